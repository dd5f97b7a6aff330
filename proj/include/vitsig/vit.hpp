#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vitsig/tensor.hpp"

namespace vitsig {

struct ViTConfig {
  int image_side = 32;
  int channels = 3;
  int patch_side = 8;
  int depth = 4;
  int heads = 4;
  int embed_dim = 64;
  int mlp_hidden = 128;
  int num_classes = 10;

  int patches_per_side() const { return image_side / patch_side; }
  int num_patches() const { return patches_per_side() * patches_per_side(); }
  int tokens() const { return num_patches() + 1; }  // class token first
  int patch_dim() const { return channels * patch_side * patch_side; }
  int head_dim() const { return embed_dim / heads; }

  /// Throws when image_side is not divisible by patch_side or embed_dim by heads.
  void validate() const;
};

struct BlockWeights {
  Tensor ln1_gamma, ln1_beta;
  Tensor wq, bq, wk, bk, wv, bv;
  Tensor wo, bo;
  Tensor ln2_gamma, ln2_beta;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct ViTWeights {
  ViTConfig config;
  Tensor patch_proj, patch_bias;  // [patch_dim, embed], [embed]
  Tensor cls_token;               // [1, embed]
  Tensor pos_embed;               // [tokens, embed]
  std::vector<BlockWeights> blocks;
  Tensor final_gamma, final_beta;
  Tensor head_w, head_b;  // [embed, classes], [classes]

  static ViTWeights init(const ViTConfig& cfg, std::uint64_t seed);

  /// Stable name -> tensor mapping used by SGD, checkpoints, and tests.
  std::vector<std::pair<std::string, Tensor*>> named_tensors();
  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;

  void set_requires_grad(bool b);
  ViTWeights clone() const;
  bool all_finite() const;
};

/// Patch centers in pixel coordinates and their pairwise distances.
struct PatchGrid {
  int per_side = 0;
  std::vector<double> cx, cy;   // per patch, raster order
  std::vector<double> dist;     // N*N pairwise center distances
  double max_dist = 0.0;

  static PatchGrid regular(int image_side, int patch_side);
  double d(int i, int j) const { return dist[static_cast<std::size_t>(i) * cx.size() + j]; }
};

/// Everything one forward pass exposes for signature extraction.
struct InferenceTrace {
  std::vector<double> logits;     // K
  std::vector<double> posterior;  // K, normalized
  int predicted = -1;
  // attention[b][h]: (N+1)x(N+1) row-stochastic, class token at index 0
  std::vector<std::vector<Tensor>> attention;
  // latents[b]: after multi-head attention (head concat), after the output
  // projection rejoins the residual stream, after the MLP rejoins; each
  // tokens x embed
  std::vector<std::array<Tensor, 3>> latents;
};

/// [C,S,S] image -> [N, C*P*P] patch rows, raster order; within a row the
/// layout is channel-major, then pixel rows, then pixel columns.
Tensor patchify(const Tensor& image, const ViTConfig& cfg);
/// Exact inverse of patchify (no gradient participation).
Tensor unpatchify(const Tensor& patches, const ViTConfig& cfg);

/// Builds the logits graph; gradients flow back to `image` when it requires
/// them. With a capture the attention matrices and latent taps are recorded.
Tensor vit_logits(const ViTWeights& w, const Tensor& image, InferenceTrace* capture = nullptr);

/// Instrumented forward pass; checks the posterior and attention invariants.
InferenceTrace vit_forward(const ViTWeights& w, const Tensor& image);

struct LabeledImage {
  Tensor image;  // [C,S,S], values in [0,1]
  int label = 0;
  std::string id;
};

struct TrainParams {
  int epochs = 50;
  double lr = 0.2;
  double momentum = 0.9;
  int batch = 32;
  double target_accuracy = 0.90;
  std::uint64_t seed = 1;
  int eval_threads = 1;
};

struct TrainLogRow {
  int epoch = 0;
  double mean_loss = 0.0;
  double train_accuracy = 0.0;
};

struct TrainResult {
  ViTWeights weights;
  std::vector<TrainLogRow> log;
  bool reached_target = false;
  std::string failure;  // nonempty when training aborted
};

/// Plain SGD with momentum over softmax cross-entropy. Stops when the train
/// accuracy target is met; a non-finite loss aborts and the weights revert
/// to the last completed epoch.
TrainResult train_toy(const std::vector<LabeledImage>& data, const ViTConfig& cfg,
                      const TrainParams& params);

int predict(const ViTWeights& w, const Tensor& image);
double evaluate_accuracy(const ViTWeights& w, const std::vector<LabeledImage>& data, int threads = 1);

}  // namespace vitsig
