#include "vitsig/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "vitsig/rng.hpp"
#include "vitsig/vtf.hpp"

namespace fs = std::filesystem;

namespace vitsig {

namespace {

struct Palette {
  double bg[3];
  double fg[3];
};

Palette pick_palette(Rng& rng) {
  Palette p{};
  for (;;) {
    double contrast = 0.0;
    for (int c = 0; c < 3; ++c) {
      p.bg[c] = rng.uniform(0.05, 0.95);
      p.fg[c] = rng.uniform(0.05, 0.95);
      contrast += std::abs(p.fg[c] - p.bg[c]);
    }
    if (contrast / 3.0 >= 0.3) return p;
  }
}

// Mask painters, one per class; (x, y) in pixels, true = foreground.
bool shape_mask(int label, int x, int y, const int* par) {
  const int p = par[0], phase = par[1], t = par[2];
  const int cx = par[3], cy = par[4], r = par[5];
  switch (label) {
    case 0:  // horizontal stripes
      return ((y + phase) % p) * 2 < p;
    case 1:  // vertical stripes
      return ((x + phase) % p) * 2 < p;
    case 2:  // diagonal stripes
      return ((x + y + phase) % p) * 2 < p;
    case 3:  // checkerboard
      return ((x / t + y / t + phase) % 2) == 0;
    case 4:  // filled disk
      return std::hypot(x - cx, y - cy) <= r;
    case 5:  // ring
      return std::abs(std::hypot(x - cx, y - cy) - r) <= t;
    case 6:  // filled rectangle
      return std::abs(x - cx) <= r && std::abs(y - cy) <= r;
    case 7:  // square frame
      return std::abs(x - cx) <= r && std::abs(y - cy) <= r &&
             !(std::abs(x - cx) <= r - t && std::abs(y - cy) <= r - t);
    case 8:  // plus
      return std::abs(x - cx) <= t || std::abs(y - cy) <= t;
    case 9:  // diagonal cross
      return std::abs((x - cx) - (y - cy)) <= t || std::abs((x - cx) + (y - cy)) <= t;
    default:
      throw std::invalid_argument("dataset: class " + std::to_string(label) + " has no painter");
  }
}

LabeledImage render(int label, int index, const DatasetSpec& spec, Rng& rng) {
  const int s = spec.image_side;
  Palette pal = pick_palette(rng);
  int par[6] = {0, 0, 0, 0, 0, 0};
  par[0] = rng.uniform_int(4, 8);                      // stripe period
  par[1] = rng.uniform_int(0, 7);                      // phase
  par[3] = s / 2 + rng.uniform_int(-4, 4);             // center x
  par[4] = s / 2 + rng.uniform_int(-4, 4);             // center y
  switch (label) {
    case 3:
      par[2] = rng.uniform_int(2, 4);  // checker block
      break;
    case 4:
      par[5] = rng.uniform_int(6, 10);  // disk radius
      par[2] = 0;
      break;
    case 5:
      par[5] = rng.uniform_int(8, 12);  // ring radius
      par[2] = rng.uniform_int(1, 2);   // half thickness
      break;
    case 6:
    case 7:
      par[5] = rng.uniform_int(8, 12);  // half width
      par[2] = rng.uniform_int(2, 3);   // frame thickness
      break;
    case 8:
    case 9:
      par[2] = rng.uniform_int(2, 3);  // bar half width
      break;
    default:
      par[2] = 1;
      break;
  }

  Tensor img(Shape{spec.channels, s, s});
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const bool fg = shape_mask(label, x, y, par);
      for (int c = 0; c < spec.channels; ++c) {
        const double base = fg ? pal.fg[std::min(c, 2)] : pal.bg[std::min(c, 2)];
        const double v = base + rng.normal(0.0, spec.noise);
        img.data()[(static_cast<std::size_t>(c) * s + y) * s + x] = std::clamp(v, 0.0, 1.0);
      }
    }
  }

  char id[32];
  std::snprintf(id, sizeof(id), "img_%05d", index);
  return LabeledImage{std::move(img), label, id};
}

}  // namespace

std::vector<LabeledImage> generate_shapes(const DatasetSpec& spec) {
  if (spec.classes < 1 || spec.classes > 10) {
    throw std::invalid_argument("dataset: supported class counts are 1..10, got " +
                                std::to_string(spec.classes));
  }
  if (spec.per_class < 1 || spec.image_side < 8 || spec.channels < 1 || spec.channels > 3) {
    throw std::invalid_argument("dataset: bad spec");
  }
  std::vector<LabeledImage> out;
  out.reserve(static_cast<std::size_t>(spec.classes) * spec.per_class);
  int index = 0;
  // Interleave classes so any prefix of the set is roughly balanced.
  for (int i = 0; i < spec.per_class; ++i) {
    for (int cls = 0; cls < spec.classes; ++cls) {
      Rng rng(Rng::derive(spec.seed, {0xda7aull, static_cast<std::uint64_t>(cls),
                                      static_cast<std::uint64_t>(i)}));
      out.push_back(render(cls, index, spec, rng));
      ++index;
    }
  }
  return out;
}

void save_dataset(const std::string& dir, const std::vector<LabeledImage>& samples,
                  const DatasetSpec& spec) {
  fs::create_directories(dir);
  std::ofstream labels(fs::path(dir) / "labels.csv");
  if (!labels) throw std::runtime_error("dataset: cannot write labels.csv in " + dir);
  labels << "filename,label\n";
  for (const LabeledImage& s : samples) {
    const std::string file = s.id + ".vtf";
    vtf::save((fs::path(dir) / file).string(), s.image);
    labels << file << "," << s.label << "\n";
  }
  nlohmann::json manifest{{"classes", spec.classes},       {"per_class", spec.per_class},
                          {"image_side", spec.image_side}, {"channels", spec.channels},
                          {"seed", spec.seed},             {"count", samples.size()}};
  std::ofstream mf(fs::path(dir) / "manifest.json");
  mf << manifest.dump(2) << "\n";
}

std::vector<LabeledImage> load_dataset(const std::string& dir) {
  std::ifstream labels(fs::path(dir) / "labels.csv");
  if (!labels) throw std::runtime_error("dataset: missing labels.csv in " + dir);
  std::string line;
  std::getline(labels, line);  // header
  std::vector<LabeledImage> out;
  while (std::getline(labels, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw std::runtime_error("dataset: bad labels.csv row: " + line);
    LabeledImage s;
    const std::string file = line.substr(0, comma);
    s.label = std::stoi(line.substr(comma + 1));
    s.image = vtf::load((fs::path(dir) / file).string());
    s.id = file.substr(0, file.rfind('.'));
    out.push_back(std::move(s));
  }
  if (out.empty()) throw std::runtime_error("dataset: no samples listed in " + dir);
  return out;
}

}  // namespace vitsig
