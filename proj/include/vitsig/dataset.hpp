#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vitsig/vit.hpp"

namespace vitsig {

struct DatasetSpec {
  int classes = 10;
  int per_class = 50;
  int image_side = 32;
  int channels = 3;
  std::uint64_t seed = 7;
  double noise = 0.03;
};

/// Procedural shape/texture classes: stripes (3 orientations), checkerboard,
/// disk, ring, filled rectangle, frame, plus, diagonal cross. Foreground and
/// background colors are random with a contrast floor; a small Gaussian
/// pixel noise is added and values clamp to [0,1].
std::vector<LabeledImage> generate_shapes(const DatasetSpec& spec);

/// Directory of VTF1 tensors plus labels.csv (filename,label) and
/// manifest.json.
void save_dataset(const std::string& dir, const std::vector<LabeledImage>& samples,
                  const DatasetSpec& spec);
std::vector<LabeledImage> load_dataset(const std::string& dir);

}  // namespace vitsig
