#include "vitsig/vit.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

#include "vitsig/parallel.hpp"
#include "vitsig/rng.hpp"

namespace vitsig {

void ViTConfig::validate() const {
  if (image_side <= 0 || channels <= 0 || patch_side <= 0 || depth <= 0 || heads <= 0 ||
      embed_dim <= 0 || mlp_hidden <= 0 || num_classes <= 0) {
    throw std::invalid_argument("vit config: all extents must be positive");
  }
  if (image_side % patch_side != 0) {
    throw std::invalid_argument("vit config: image_side " + std::to_string(image_side) +
                                " not divisible by patch_side " + std::to_string(patch_side));
  }
  if (embed_dim % heads != 0) {
    throw std::invalid_argument("vit config: embed_dim " + std::to_string(embed_dim) +
                                " not divisible by heads " + std::to_string(heads));
  }
}

namespace {

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal(0.0, stddev);
  return Tensor(std::move(shape), std::move(v));
}

// Flat index map for patchify: out row n covers patch (pr, pc), entries
// channel-major then pixel row then pixel column.
std::shared_ptr<const std::vector<std::size_t>> patch_index_map(const ViTConfig& cfg) {
  const int s = cfg.image_side, p = cfg.patch_side, c = cfg.channels;
  const int g = cfg.patches_per_side();
  auto map = std::make_shared<std::vector<std::size_t>>();
  map->reserve(static_cast<std::size_t>(cfg.num_patches()) * cfg.patch_dim());
  for (int pr = 0; pr < g; ++pr) {
    for (int pc = 0; pc < g; ++pc) {
      for (int ch = 0; ch < c; ++ch) {
        for (int py = 0; py < p; ++py) {
          for (int px = 0; px < p; ++px) {
            const std::size_t y = static_cast<std::size_t>(pr * p + py);
            const std::size_t x = static_cast<std::size_t>(pc * p + px);
            map->push_back((static_cast<std::size_t>(ch) * s + y) * s + x);
          }
        }
      }
    }
  }
  return map;
}

void check_block_finite(const Tensor& x, int block) {
  if (!x.all_finite()) {
    throw std::runtime_error("vit: non-finite activation in block " + std::to_string(block));
  }
}

}  // namespace

Tensor patchify(const Tensor& image, const ViTConfig& cfg) {
  if (image.rank() != 3 || image.dim(0) != cfg.channels || image.dim(1) != cfg.image_side ||
      image.dim(2) != cfg.image_side) {
    throw std::invalid_argument("patchify: image shape " + shape_str(image.shape()) +
                                " does not match config [" + std::to_string(cfg.channels) + "," +
                                std::to_string(cfg.image_side) + "," + std::to_string(cfg.image_side) + "]");
  }
  return gather(image, Shape{cfg.num_patches(), cfg.patch_dim()}, patch_index_map(cfg));
}

Tensor unpatchify(const Tensor& patches, const ViTConfig& cfg) {
  if (patches.rank() != 2 || patches.dim(0) != cfg.num_patches() || patches.dim(1) != cfg.patch_dim()) {
    throw std::invalid_argument("unpatchify: shape " + shape_str(patches.shape()) + " does not match config");
  }
  auto map = patch_index_map(cfg);
  Tensor img(Shape{cfg.channels, cfg.image_side, cfg.image_side});
  for (std::size_t i = 0; i < map->size(); ++i) img.data()[(*map)[i]] = patches.data()[i];
  return img;
}

ViTWeights ViTWeights::init(const ViTConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const double std_w = 0.02;
  ViTWeights w;
  w.config = cfg;
  w.patch_proj = normal_tensor({cfg.patch_dim(), cfg.embed_dim}, std_w, rng);
  w.patch_bias = Tensor({cfg.embed_dim}, 0.0);
  w.cls_token = normal_tensor({1, cfg.embed_dim}, std_w, rng);
  w.pos_embed = normal_tensor({cfg.tokens(), cfg.embed_dim}, std_w, rng);
  w.blocks.resize(static_cast<std::size_t>(cfg.depth));
  for (auto& b : w.blocks) {
    b.ln1_gamma = Tensor({cfg.embed_dim}, 1.0);
    b.ln1_beta = Tensor({cfg.embed_dim}, 0.0);
    b.wq = normal_tensor({cfg.embed_dim, cfg.embed_dim}, std_w, rng);
    b.bq = Tensor({cfg.embed_dim}, 0.0);
    b.wk = normal_tensor({cfg.embed_dim, cfg.embed_dim}, std_w, rng);
    b.bk = Tensor({cfg.embed_dim}, 0.0);
    b.wv = normal_tensor({cfg.embed_dim, cfg.embed_dim}, std_w, rng);
    b.bv = Tensor({cfg.embed_dim}, 0.0);
    b.wo = normal_tensor({cfg.embed_dim, cfg.embed_dim}, std_w, rng);
    b.bo = Tensor({cfg.embed_dim}, 0.0);
    b.ln2_gamma = Tensor({cfg.embed_dim}, 1.0);
    b.ln2_beta = Tensor({cfg.embed_dim}, 0.0);
    b.mlp_w1 = normal_tensor({cfg.embed_dim, cfg.mlp_hidden}, std_w, rng);
    b.mlp_b1 = Tensor({cfg.mlp_hidden}, 0.0);
    b.mlp_w2 = normal_tensor({cfg.mlp_hidden, cfg.embed_dim}, std_w, rng);
    b.mlp_b2 = Tensor({cfg.embed_dim}, 0.0);
  }
  w.final_gamma = Tensor({cfg.embed_dim}, 1.0);
  w.final_beta = Tensor({cfg.embed_dim}, 0.0);
  w.head_w = normal_tensor({cfg.embed_dim, cfg.num_classes}, std_w, rng);
  w.head_b = Tensor({cfg.num_classes}, 0.0);
  return w;
}

std::vector<std::pair<std::string, Tensor*>> ViTWeights::named_tensors() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("patch_proj", &patch_proj);
  out.emplace_back("patch_bias", &patch_bias);
  out.emplace_back("cls_token", &cls_token);
  out.emplace_back("pos_embed", &pos_embed);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = "block" + std::to_string(i) + ".";
    BlockWeights& b = blocks[i];
    out.emplace_back(p + "ln1_gamma", &b.ln1_gamma);
    out.emplace_back(p + "ln1_beta", &b.ln1_beta);
    out.emplace_back(p + "wq", &b.wq);
    out.emplace_back(p + "bq", &b.bq);
    out.emplace_back(p + "wk", &b.wk);
    out.emplace_back(p + "bk", &b.bk);
    out.emplace_back(p + "wv", &b.wv);
    out.emplace_back(p + "bv", &b.bv);
    out.emplace_back(p + "wo", &b.wo);
    out.emplace_back(p + "bo", &b.bo);
    out.emplace_back(p + "ln2_gamma", &b.ln2_gamma);
    out.emplace_back(p + "ln2_beta", &b.ln2_beta);
    out.emplace_back(p + "mlp_w1", &b.mlp_w1);
    out.emplace_back(p + "mlp_b1", &b.mlp_b1);
    out.emplace_back(p + "mlp_w2", &b.mlp_w2);
    out.emplace_back(p + "mlp_b2", &b.mlp_b2);
  }
  out.emplace_back("final_gamma", &final_gamma);
  out.emplace_back("final_beta", &final_beta);
  out.emplace_back("head_w", &head_w);
  out.emplace_back("head_b", &head_b);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> ViTWeights::named_tensors() const {
  auto mut = const_cast<ViTWeights*>(this)->named_tensors();
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.reserve(mut.size());
  for (auto& [name, t] : mut) out.emplace_back(name, t);
  return out;
}

void ViTWeights::set_requires_grad(bool b) {
  for (auto& [name, t] : named_tensors()) t->set_requires_grad(b);
}

ViTWeights ViTWeights::clone() const {
  ViTWeights w;
  w.config = config;
  w.patch_proj = patch_proj.clone();
  w.patch_bias = patch_bias.clone();
  w.cls_token = cls_token.clone();
  w.pos_embed = pos_embed.clone();
  w.blocks.resize(blocks.size());
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const BlockWeights& b = blocks[i];
    BlockWeights& o = w.blocks[i];
    o.ln1_gamma = b.ln1_gamma.clone();
    o.ln1_beta = b.ln1_beta.clone();
    o.wq = b.wq.clone();
    o.bq = b.bq.clone();
    o.wk = b.wk.clone();
    o.bk = b.bk.clone();
    o.wv = b.wv.clone();
    o.bv = b.bv.clone();
    o.wo = b.wo.clone();
    o.bo = b.bo.clone();
    o.ln2_gamma = b.ln2_gamma.clone();
    o.ln2_beta = b.ln2_beta.clone();
    o.mlp_w1 = b.mlp_w1.clone();
    o.mlp_b1 = b.mlp_b1.clone();
    o.mlp_w2 = b.mlp_w2.clone();
    o.mlp_b2 = b.mlp_b2.clone();
  }
  w.final_gamma = final_gamma.clone();
  w.final_beta = final_beta.clone();
  w.head_w = head_w.clone();
  w.head_b = head_b.clone();
  return w;
}

bool ViTWeights::all_finite() const {
  for (const auto& [name, t] : named_tensors()) {
    if (!t->all_finite()) return false;
  }
  return true;
}

PatchGrid PatchGrid::regular(int image_side, int patch_side) {
  if (patch_side <= 0 || image_side % patch_side != 0) {
    throw std::invalid_argument("patch grid: bad sides " + std::to_string(image_side) + "/" +
                                std::to_string(patch_side));
  }
  PatchGrid g;
  g.per_side = image_side / patch_side;
  const int n = g.per_side * g.per_side;
  g.cx.resize(static_cast<std::size_t>(n));
  g.cy.resize(static_cast<std::size_t>(n));
  for (int r = 0; r < g.per_side; ++r) {
    for (int c = 0; c < g.per_side; ++c) {
      const int i = r * g.per_side + c;
      g.cy[static_cast<std::size_t>(i)] = r * patch_side + patch_side / 2.0;
      g.cx[static_cast<std::size_t>(i)] = c * patch_side + patch_side / 2.0;
    }
  }
  g.dist.assign(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const double dx = g.cx[i] - g.cx[j];
      const double dy = g.cy[i] - g.cy[j];
      const double d = std::hypot(dx, dy);
      g.dist[static_cast<std::size_t>(i) * n + j] = d;
      g.max_dist = std::max(g.max_dist, d);
    }
  }
  return g;
}

Tensor vit_logits(const ViTWeights& w, const Tensor& image, InferenceTrace* capture) {
  const ViTConfig& cfg = w.config;
  const int dh = cfg.head_dim();
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor patches = patchify(image, cfg);
  Tensor x = add_rowwise(matmul(patches, w.patch_proj), w.patch_bias);
  x = concat_rows({w.cls_token, x});
  x = add(x, w.pos_embed);

  if (capture) {
    capture->attention.assign(static_cast<std::size_t>(cfg.depth), {});
    capture->latents.resize(static_cast<std::size_t>(cfg.depth));
  }

  for (int bi = 0; bi < cfg.depth; ++bi) {
    const BlockWeights& b = w.blocks[static_cast<std::size_t>(bi)];
    Tensor h = layer_norm_rows(x, b.ln1_gamma, b.ln1_beta);
    Tensor q = add_rowwise(matmul(h, b.wq), b.bq);
    Tensor k = add_rowwise(matmul(h, b.wk), b.bk);
    Tensor v = add_rowwise(matmul(h, b.wv), b.bv);
    std::vector<Tensor> head_out;
    head_out.reserve(static_cast<std::size_t>(cfg.heads));
    for (int hi = 0; hi < cfg.heads; ++hi) {
      Tensor qh = slice_cols(q, hi * dh, dh);
      Tensor kh = slice_cols(k, hi * dh, dh);
      Tensor vh = slice_cols(v, hi * dh, dh);
      Tensor scores = scale(matmul(qh, transpose(kh)), attn_scale);
      Tensor attn = softmax_rows(scores);
      if (capture) capture->attention[static_cast<std::size_t>(bi)].push_back(attn.detached());
      head_out.push_back(matmul(attn, vh));
    }
    Tensor attn_cat = concat_cols(head_out);
    x = add(x, add_rowwise(matmul(attn_cat, b.wo), b.bo));
    Tensor after_proj = x;
    Tensor m = layer_norm_rows(x, b.ln2_gamma, b.ln2_beta);
    m = add_rowwise(matmul(m, b.mlp_w1), b.mlp_b1);
    m = gelu(m);
    m = add_rowwise(matmul(m, b.mlp_w2), b.mlp_b2);
    x = add(x, m);
    check_block_finite(x, bi);
    if (capture) {
      capture->latents[static_cast<std::size_t>(bi)] = {attn_cat.detached(), after_proj.detached(),
                                                        x.detached()};
    }
  }

  Tensor f = layer_norm_rows(x, w.final_gamma, w.final_beta);
  auto cls_ix = std::make_shared<std::vector<std::size_t>>();
  for (int c = 0; c < cfg.embed_dim; ++c) cls_ix->push_back(static_cast<std::size_t>(c));
  Tensor cls = gather(f, Shape{1, cfg.embed_dim}, cls_ix);
  return add_rowwise(matmul(cls, w.head_w), w.head_b);
}

InferenceTrace vit_forward(const ViTWeights& w, const Tensor& image) {
  InferenceTrace trace;
  Tensor logits = vit_logits(w, image.detached(), &trace);
  trace.logits = logits.values();
  Tensor post = softmax_rows(logits.detached());
  trace.posterior = post.values();

  double sum = 0.0;
  int arg = 0;
  for (std::size_t k = 0; k < trace.posterior.size(); ++k) {
    const double p = trace.posterior[k];
    if (p < 0.0) throw std::runtime_error("vit: negative posterior entry");
    sum += p;
    if (p > trace.posterior[static_cast<std::size_t>(arg)]) arg = static_cast<int>(k);
  }
  if (std::abs(sum - 1.0) > 1e-9) throw std::runtime_error("vit: posterior does not sum to 1");
  trace.predicted = arg;

  const int t = w.config.tokens();
  for (const auto& per_block : trace.attention) {
    for (const Tensor& a : per_block) {
      for (int r = 0; r < t; ++r) {
        double rs = 0.0;
        for (int c = 0; c < t; ++c) rs += a.data()[static_cast<std::size_t>(r) * t + c];
        if (std::abs(rs - 1.0) > 1e-9) throw std::runtime_error("vit: attention row not stochastic");
      }
    }
  }
  return trace;
}

int predict(const ViTWeights& w, const Tensor& image) {
  Tensor logits = vit_logits(w, image.detached());
  const double* d = logits.data();
  int arg = 0;
  for (std::size_t k = 1; k < logits.size(); ++k) {
    if (d[k] > d[arg]) arg = static_cast<int>(k);
  }
  return arg;
}

double evaluate_accuracy(const ViTWeights& w, const std::vector<LabeledImage>& data, int threads) {
  if (data.empty()) return 0.0;
  std::vector<char> hit(data.size(), 0);
  parallel_for(data.size(), threads, [&](std::size_t i) {
    hit[i] = predict(w, data[i].image) == data[i].label ? 1 : 0;
  });
  std::size_t correct = 0;
  for (char h : hit) correct += static_cast<std::size_t>(h);
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

TrainResult train_toy(const std::vector<LabeledImage>& data, const ViTConfig& cfg,
                      const TrainParams& params) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  for (const LabeledImage& s : data) {
    if (s.label < 0 || s.label >= cfg.num_classes) {
      throw std::invalid_argument("train: label " + std::to_string(s.label) + " out of range for " +
                                  std::to_string(cfg.num_classes) + " classes");
    }
  }

  TrainResult result;
  result.weights = ViTWeights::init(cfg, Rng::derive(params.seed, {0x1717}));
  result.weights.set_requires_grad(true);

  auto named = result.weights.named_tensors();
  std::vector<std::vector<double>> velocity(named.size());
  for (std::size_t i = 0; i < named.size(); ++i) velocity[i].assign(named[i].second->size(), 0.0);

  Rng order_rng(Rng::derive(params.seed, {0x5eull}));
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  ViTWeights snapshot = result.weights.clone();

  for (int epoch = 0; epoch < params.epochs; ++epoch) {
    order_rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    const std::size_t bs = static_cast<std::size_t>(std::max(1, params.batch));
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      Tensor total;
      for (std::size_t i = start; i < end; ++i) {
        const LabeledImage& s = data[order[i]];
        Tensor logits = vit_logits(result.weights, s.image.detached());
        Tensor ce = cross_entropy(logits, s.label);
        total = total.defined() ? add(total, ce) : ce;
      }
      Tensor loss = scale(total, 1.0 / static_cast<double>(end - start));
      const double lv = loss.item();
      if (!std::isfinite(lv)) {
        result.weights = snapshot;
        result.weights.set_requires_grad(false);
        result.failure = "non-finite loss in epoch " + std::to_string(epoch);
        return result;
      }
      loss_sum += lv;
      ++batches;
      loss.backward();
      for (std::size_t wi = 0; wi < named.size(); ++wi) {
        Tensor* t = named[wi].second;
        const Tensor g = t->grad();
        auto& vel = velocity[wi];
        double* wd = t->data();
        for (std::size_t j = 0; j < vel.size(); ++j) {
          vel[j] = params.momentum * vel[j] + g.data()[j];
          wd[j] -= params.lr * vel[j];
        }
      }
    }
    if (!result.weights.all_finite()) {
      result.weights = snapshot;
      result.weights.set_requires_grad(false);
      result.failure = "non-finite weights in epoch " + std::to_string(epoch);
      return result;
    }
    snapshot = result.weights.clone();

    result.weights.set_requires_grad(false);
    const double acc = evaluate_accuracy(result.weights, data, params.eval_threads);
    result.weights.set_requires_grad(true);
    result.log.push_back({epoch, batches ? loss_sum / static_cast<double>(batches) : 0.0, acc});
    if (acc >= params.target_accuracy) {
      result.reached_target = true;
      break;
    }
  }
  result.weights.set_requires_grad(false);
  return result;
}

}  // namespace vitsig
