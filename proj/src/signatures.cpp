#include "vitsig/signatures.hpp"

#include <cmath>
#include <stdexcept>

namespace vitsig {

namespace {

constexpr double kPi = 3.14159265358979323846;

// cos(pi * (2n+1) * k / (2N)) table, k-major.
std::vector<double> dct_basis(int n) {
  std::vector<double> c(static_cast<std::size_t>(n) * n);
  for (int k = 0; k < n; ++k) {
    for (int i = 0; i < n; ++i) {
      c[static_cast<std::size_t>(k) * n + i] = std::cos(kPi * (2.0 * i + 1.0) * k / (2.0 * n));
    }
  }
  return c;
}

double dct_scale(int k, int n) { return k == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n); }

int square_side(const Tensor& t, const char* op) {
  if (t.rank() != 2 || t.dim(0) != t.dim(1)) {
    throw std::invalid_argument(std::string(op) + ": expected a square channel, got " +
                                shape_str(t.shape()));
  }
  return t.dim(0);
}

}  // namespace

Tensor dct2(const Tensor& channel) {
  const int n = square_side(channel, "dct2");
  const auto basis = dct_basis(n);
  // rows first
  std::vector<double> tmp(static_cast<std::size_t>(n) * n);
  for (int r = 0; r < n; ++r) {
    for (int k = 0; k < n; ++k) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i) acc += channel.data()[static_cast<std::size_t>(r) * n + i] *
                                         basis[static_cast<std::size_t>(k) * n + i];
      tmp[static_cast<std::size_t>(r) * n + k] = acc * dct_scale(k, n);
    }
  }
  // then columns
  Tensor out(Shape{n, n});
  for (int c = 0; c < n; ++c) {
    for (int k = 0; k < n; ++k) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i) acc += tmp[static_cast<std::size_t>(i) * n + c] *
                                         basis[static_cast<std::size_t>(k) * n + i];
      out.data()[static_cast<std::size_t>(k) * n + c] = acc * dct_scale(k, n);
    }
  }
  return out;
}

Tensor idct2(const Tensor& coeffs) {
  const int n = square_side(coeffs, "idct2");
  const auto basis = dct_basis(n);
  std::vector<double> tmp(static_cast<std::size_t>(n) * n);
  // invert columns
  for (int c = 0; c < n; ++c) {
    for (int i = 0; i < n; ++i) {
      double acc = 0.0;
      for (int k = 0; k < n; ++k) acc += dct_scale(k, n) * coeffs.data()[static_cast<std::size_t>(k) * n + c] *
                                         basis[static_cast<std::size_t>(k) * n + i];
      tmp[static_cast<std::size_t>(i) * n + c] = acc;
    }
  }
  // invert rows
  Tensor out(Shape{n, n});
  for (int r = 0; r < n; ++r) {
    for (int i = 0; i < n; ++i) {
      double acc = 0.0;
      for (int k = 0; k < n; ++k) acc += dct_scale(k, n) * tmp[static_cast<std::size_t>(r) * n + k] *
                                         basis[static_cast<std::size_t>(k) * n + i];
      out.data()[static_cast<std::size_t>(r) * n + i] = acc;
    }
  }
  return out;
}

double frequency_ratio(const Tensor& image, int phi) {
  if (image.rank() != 3 || image.dim(1) != image.dim(2)) {
    throw std::invalid_argument("frequency_ratio: expected [C,S,S] image, got " +
                                shape_str(image.shape()));
  }
  const int s = image.dim(1);
  if (phi <= 0 || phi > 2 * (s - 1)) {
    throw std::invalid_argument("frequency_ratio: phi " + std::to_string(phi) +
                                " outside (0, 2*(side-1)]");
  }
  double hf = 0.0, lf = 0.0;
  const std::size_t plane = static_cast<std::size_t>(s) * s;
  for (int c = 0; c < image.dim(0); ++c) {
    Tensor ch(Shape{s, s},
              std::vector<double>(image.data() + c * plane, image.data() + (c + 1) * plane));
    Tensor coef = dct2(ch);
    for (int i = 0; i < s; ++i) {
      for (int j = 0; j < s; ++j) {
        const double e = coef.data()[static_cast<std::size_t>(i) * s + j];
        if (i + j >= phi) {
          hf += e * e;
        } else {
          lf += e * e;
        }
      }
    }
  }
  if (lf == 0.0) {
    throw std::invalid_argument("frequency_ratio: zero low-frequency energy (degenerate image)");
  }
  return hf / lf;
}

double posterior_entropy(const std::vector<double>& posterior) {
  if (posterior.empty()) throw std::invalid_argument("posterior_entropy: empty posterior");
  double sum = 0.0;
  for (double p : posterior) {
    if (p < 0.0) throw std::invalid_argument("posterior_entropy: negative probability");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6) {
    throw std::invalid_argument("posterior_entropy: probabilities sum to " + std::to_string(sum));
  }
  double h = 0.0;
  for (double p : posterior) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

double attention_distance(const Tensor& attention, const PatchGrid& grid) {
  const int n = static_cast<int>(grid.cx.size());
  if (attention.rank() != 2 || attention.dim(0) != n + 1 || attention.dim(1) != n + 1) {
    throw std::invalid_argument("attention_distance: matrix " + shape_str(attention.shape()) +
                                " does not match " + std::to_string(n) + " patches + class token");
  }
  double num = 0.0, den = 0.0;
  for (int i = 0; i < n; ++i) {
    const double* row = attention.data() + static_cast<std::size_t>(i + 1) * (n + 1) + 1;
    const double* d = grid.dist.data() + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      num += row[j] * d[j];
      den += row[j];
    }
  }
  if (den == 0.0) throw std::invalid_argument("attention_distance: all-zero attention submatrix");
  return num / den;
}

std::vector<std::vector<double>> attention_profile(const InferenceTrace& trace,
                                                   const PatchGrid& grid) {
  std::vector<std::vector<double>> profile;
  profile.reserve(trace.attention.size());
  for (const auto& per_block : trace.attention) {
    std::vector<double> row;
    row.reserve(per_block.size());
    for (const Tensor& attn : per_block) row.push_back(attention_distance(attn, grid));
    profile.push_back(std::move(row));
  }
  return profile;
}

double attention_profile_summary(const std::vector<std::vector<double>>& profile,
                                 const std::vector<std::vector<double>>& reference) {
  if (profile.size() != reference.size()) {
    throw std::invalid_argument("attention_profile_summary: block count mismatch");
  }
  double s = 0.0;
  for (std::size_t b = 0; b < profile.size(); ++b) {
    if (profile[b].size() != reference[b].size()) {
      throw std::invalid_argument("attention_profile_summary: head count mismatch in block " +
                                  std::to_string(b));
    }
    for (std::size_t h = 0; h < profile[b].size(); ++h) s += std::abs(reference[b][h] - profile[b][h]);
  }
  return s;
}

CkaMatrix cka_matrix(const std::vector<Tensor>& activations) {
  if (activations.empty()) throw std::invalid_argument("cka: no layers");
  const int l = static_cast<int>(activations.size());
  const int m = activations[0].dim(0);
  if (m < 2) throw std::invalid_argument("cka: batch size must be at least 2");
  for (const Tensor& h : activations) {
    if (h.rank() != 2 || h.dim(0) != m) {
      throw std::invalid_argument("cka: layer activation " + shape_str(h.shape()) +
                                  " does not share batch size " + std::to_string(m));
    }
  }

  // Centered Gram per layer: K' = K - rowmean - colmean + totalmean.
  std::vector<std::vector<double>> grams(static_cast<std::size_t>(l));
  for (int li = 0; li < l; ++li) {
    const Tensor& h = activations[static_cast<std::size_t>(li)];
    const int c = h.dim(1);
    std::vector<double> k(static_cast<std::size_t>(m) * m);
    for (int a = 0; a < m; ++a) {
      for (int b = a; b < m; ++b) {
        double acc = 0.0;
        const double* ra = h.data() + static_cast<std::size_t>(a) * c;
        const double* rb = h.data() + static_cast<std::size_t>(b) * c;
        for (int j = 0; j < c; ++j) acc += ra[j] * rb[j];
        k[static_cast<std::size_t>(a) * m + b] = acc;
        k[static_cast<std::size_t>(b) * m + a] = acc;
      }
    }
    std::vector<double> rowmean(static_cast<std::size_t>(m), 0.0);
    double total = 0.0;
    for (int a = 0; a < m; ++a) {
      for (int b = 0; b < m; ++b) rowmean[static_cast<std::size_t>(a)] += k[static_cast<std::size_t>(a) * m + b];
      rowmean[static_cast<std::size_t>(a)] /= m;
      total += rowmean[static_cast<std::size_t>(a)];
    }
    total /= m;
    for (int a = 0; a < m; ++a) {
      for (int b = 0; b < m; ++b) {
        k[static_cast<std::size_t>(a) * m + b] +=
            total - rowmean[static_cast<std::size_t>(a)] - rowmean[static_cast<std::size_t>(b)];
      }
    }
    grams[static_cast<std::size_t>(li)] = std::move(k);
  }

  const double norm = static_cast<double>(m - 1) * (m - 1);
  auto hsic = [&](int i, int j) {
    const auto& a = grams[static_cast<std::size_t>(i)];
    const auto& b = grams[static_cast<std::size_t>(j)];
    double acc = 0.0;
    for (std::size_t t = 0; t < a.size(); ++t) acc += a[t] * b[t];
    return acc / norm;
  };

  CkaMatrix out;
  out.layers = l;
  out.batch = m;
  out.values.assign(static_cast<std::size_t>(l) * l, 0.0);
  out.defined.assign(static_cast<std::size_t>(l) * l, 0);
  std::vector<double> self(static_cast<std::size_t>(l));
  for (int i = 0; i < l; ++i) self[static_cast<std::size_t>(i)] = hsic(i, i);
  for (int i = 0; i < l; ++i) {
    for (int j = i; j < l; ++j) {
      const double si = self[static_cast<std::size_t>(i)], sj = self[static_cast<std::size_t>(j)];
      if (si <= 0.0 || sj <= 0.0) continue;  // constant activations, entry stays undefined
      const double v = hsic(i, j) / std::sqrt(si * sj);
      out.values[static_cast<std::size_t>(i) * l + j] = v;
      out.values[static_cast<std::size_t>(j) * l + i] = v;
      out.defined[static_cast<std::size_t>(i) * l + j] = 1;
      out.defined[static_cast<std::size_t>(j) * l + i] = 1;
    }
  }
  return out;
}

CkaDifference cka_difference(const CkaMatrix& reference, const std::vector<CkaMatrix>& batches) {
  if (batches.empty()) throw std::invalid_argument("cka_difference: no batches");
  const int l = reference.layers;
  for (const CkaMatrix& b : batches) {
    if (b.layers != l) {
      throw std::invalid_argument("cka_difference: layer count mismatch (" + std::to_string(b.layers) +
                                  " vs " + std::to_string(l) + ")");
    }
  }

  CkaDifference out;
  out.mean.layers = l;
  out.mean.batch = batches.front().batch;
  out.mean.values.assign(static_cast<std::size_t>(l) * l, 0.0);
  out.mean.defined.assign(static_cast<std::size_t>(l) * l, 0);
  out.d.assign(static_cast<std::size_t>(l) * l, 0.0);
  out.valid.assign(static_cast<std::size_t>(l) * l, 0);

  for (int i = 0; i < l; ++i) {
    for (int j = 0; j < l; ++j) {
      const std::size_t ix = static_cast<std::size_t>(i) * l + j;
      double sum = 0.0;
      int count = 0;
      for (const CkaMatrix& b : batches) {
        if (b.ok(i, j)) {
          sum += b.at(i, j);
          ++count;
        }
      }
      if (count > 0) {
        out.mean.values[ix] = sum / count;
        out.mean.defined[ix] = 1;
      }
      if (count > 0 && reference.ok(i, j)) {
        out.d[ix] = std::abs(reference.at(i, j) - out.mean.values[ix]);
        out.valid[ix] = 1;
        out.s_cka += out.d[ix];
      } else {
        ++out.excluded;
      }
    }
  }
  return out;
}

std::vector<std::string> tap_names(int depth) {
  std::vector<std::string> names;
  names.reserve(static_cast<std::size_t>(depth) * 3);
  for (int b = 0; b < depth; ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    names.push_back(p + "attn");
    names.push_back(p + "proj");
    names.push_back(p + "mlp");
  }
  return names;
}

std::vector<Tensor> collect_latents(const std::vector<const InferenceTrace*>& batch) {
  if (batch.empty()) throw std::invalid_argument("collect_latents: empty batch");
  const std::size_t depth = batch.front()->latents.size();
  const int m = static_cast<int>(batch.size());
  std::vector<Tensor> layers;
  layers.reserve(depth * 3);
  for (std::size_t b = 0; b < depth; ++b) {
    for (int t = 0; t < 3; ++t) {
      const std::size_t feat = batch.front()->latents[b][static_cast<std::size_t>(t)].size();
      Tensor h(Shape{m, static_cast<int>(feat)});
      for (int s = 0; s < m; ++s) {
        const Tensor& tap = batch[static_cast<std::size_t>(s)]->latents[b][static_cast<std::size_t>(t)];
        if (tap.size() != feat) throw std::invalid_argument("collect_latents: tap size mismatch");
        std::copy(tap.data(), tap.data() + feat, h.data() + static_cast<std::size_t>(s) * feat);
      }
      layers.push_back(std::move(h));
    }
  }
  return layers;
}

}  // namespace vitsig
