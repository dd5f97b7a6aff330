#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vitsig/vit.hpp"

namespace vitsig {

/// Orthonormal 2-D DCT-II of one square channel; idct2 inverts it exactly
/// (up to rounding) and Parseval holds for the coefficient squares.
Tensor dct2(const Tensor& channel);
Tensor idct2(const Tensor& coeffs);

/// High/low DCT energy ratio of an image [C,S,S]: energies are squared
/// coefficients summed over channels, split by index sum i+j >= phi.
double frequency_ratio(const Tensor& image, int phi);

/// Shannon entropy of a posterior over K classes, 0*log(0) = 0.
double posterior_entropy(const std::vector<double>& posterior);

/// Attention-weighted mean pixel distance between patch centers of one
/// head; the class-token row and column are dropped before the sums.
double attention_distance(const Tensor& attention, const PatchGrid& grid);

/// Per (block, head) attention distances of one trace.
std::vector<std::vector<double>> attention_profile(const InferenceTrace& trace,
                                                   const PatchGrid& grid);

/// Sum of absolute deviations from a reference mean profile.
double attention_profile_summary(const std::vector<std::vector<double>>& profile,
                                 const std::vector<std::vector<double>>& reference);

/// Layer-pair CKA similarities with an explicit validity mask: an entry is
/// undefined when a layer's activations are constant across the batch
/// (zero self-HSIC), never silently zero.
struct CkaMatrix {
  int layers = 0;
  int batch = 0;  // m
  std::vector<double> values;
  std::vector<std::uint8_t> defined;

  double at(int i, int j) const { return values[static_cast<std::size_t>(i) * layers + j]; }
  bool ok(int i, int j) const { return defined[static_cast<std::size_t>(i) * layers + j] != 0; }
};

/// activations[i] is the m x c_i matrix of per-sample feature rows for
/// layer i; linear-kernel CKA via centered Gram matrices and HSIC.
CkaMatrix cka_matrix(const std::vector<Tensor>& activations);

struct CkaDifference {
  CkaMatrix mean;                     // mean of the batch CKA matrices
  std::vector<double> d;              // |ref - mean| per entry, 0 where excluded
  std::vector<std::uint8_t> valid;    // entry had defined values on both sides
  double s_cka = 0.0;                 // sum of d over valid entries
  int excluded = 0;
};

CkaDifference cka_difference(const CkaMatrix& reference, const std::vector<CkaMatrix>& batches);

/// Tap labels in trace order: block0.attn, block0.proj, block0.mlp, block1...
std::vector<std::string> tap_names(int depth);

/// Stacks the taps of a batch of traces into per-layer activation matrices
/// (one flattened tokens*embed row per sample).
std::vector<Tensor> collect_latents(const std::vector<const InferenceTrace*>& batch);

}  // namespace vitsig
