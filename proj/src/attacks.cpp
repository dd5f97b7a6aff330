#include "vitsig/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <limits>
#include <stdexcept>

namespace vitsig {

namespace {

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

std::string fmt_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

int argmax(const std::vector<double>& v) {
  int arg = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[static_cast<std::size_t>(arg)]) arg = static_cast<int>(i);
  }
  return arg;
}

int argmax_excluding(const std::vector<double>& v, int skip) {
  int arg = skip == 0 ? 1 : 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (static_cast<int>(i) == skip) continue;
    if (v[i] > v[static_cast<std::size_t>(arg)]) arg = static_cast<int>(i);
  }
  return arg;
}

void check_image(const Tensor& o) {
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double v = o.data()[i];
    if (!(v >= 0.0 && v <= 1.0)) {
      throw std::invalid_argument("attack: pixel " + std::to_string(v) + " outside [0,1]");
    }
  }
}

void check_label(const ViTWeights& w, int label) {
  if (label < 0 || label >= w.config.num_classes) {
    throw std::invalid_argument("attack: label " + std::to_string(label) + " out of range");
  }
}

// Loss gradient at the image; logits of the clean pass come back through
// `out_logits` so callers avoid a second forward.
Tensor input_gradient(const ViTWeights& w, const Tensor& image, int label,
                      std::vector<double>* out_logits, const char* who) {
  Tensor x = image.clone();
  x.set_requires_grad(true);
  Tensor logits = vit_logits(w, x);
  Tensor loss = cross_entropy(logits, label);
  Tensor g = grad_input(loss, x);
  if (!g.all_finite()) throw std::runtime_error(std::string(who) + ": non-finite input gradient");
  if (out_logits) *out_logits = logits.values();
  return g;
}

AttackResult finish(const ViTWeights& w, const Tensor& original, Tensor attacked, int clean_pred,
                    int iterations, double budget = -1.0) {
  AttackResult r;
  double linf = 0.0, l2sq = 0.0;
  for (std::size_t i = 0; i < original.size(); ++i) {
    const double d = attacked.data()[i] - original.data()[i];
    linf = std::max(linf, std::abs(d));
    l2sq += d * d;
  }
  r.linf = linf;
  r.l2 = std::sqrt(l2sq);
  r.iterations = iterations;
  if (budget >= 0.0 && linf > budget + 1e-9) {
    throw std::runtime_error("attack: l-inf distortion " + std::to_string(linf) +
                             " exceeds budget " + std::to_string(budget));
  }
  for (std::size_t i = 0; i < attacked.size(); ++i) {
    const double v = attacked.data()[i];
    if (!(v >= 0.0 && v <= 1.0)) throw std::runtime_error("attack: output pixel outside [0,1]");
  }
  r.success = predict(w, attacked) != clean_pred;
  r.image = std::move(attacked);
  return r;
}

}  // namespace

std::string family_name(AttackFamily f) {
  switch (f) {
    case AttackFamily::kFgsm:
      return "fgsm";
    case AttackFamily::kPgd:
      return "pgd";
    case AttackFamily::kCw:
      return "cw";
  }
  return "?";
}

void AttackSpec::validate() const {
  if (epsilon < 0.0) throw std::invalid_argument("attack spec: epsilon < 0");
  if (alpha <= 0.0) throw std::invalid_argument("attack spec: alpha <= 0");
  if (iters < 1) throw std::invalid_argument("attack spec: iters < 1");
  if (c < 0.0) throw std::invalid_argument("attack spec: c < 0");
  if (kappa < 0.0) throw std::invalid_argument("attack spec: kappa < 0");
  if (cw_steps < 1 || cw_lr <= 0.0) throw std::invalid_argument("attack spec: bad CW optimizer settings");
}

std::string AttackSpec::tag() const {
  switch (family) {
    case AttackFamily::kFgsm:
      return "fgsm_eps" + fmt_g(epsilon);
    case AttackFamily::kPgd:
      return "pgd_eps" + fmt_g(epsilon) + "_a" + fmt_g(alpha) + "_it" + std::to_string(iters);
    case AttackFamily::kCw:
      return "cw_c" + fmt_g(c) + "_k" + fmt_g(kappa);
  }
  return "?";
}

AttackResult fgsm(const ViTWeights& w, const Tensor& original, int label, double epsilon) {
  check_image(original);
  check_label(w, label);
  if (epsilon < 0.0) throw std::invalid_argument("fgsm: epsilon < 0");

  std::vector<double> clean_logits;
  Tensor g = input_gradient(w, original, label, &clean_logits, "fgsm");
  Tensor x = original.clone();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = original.data()[i] + epsilon * sign(g.data()[i]);
    x.data()[i] = std::clamp(v, 0.0, 1.0);
  }
  return finish(w, original, std::move(x), argmax(clean_logits), 1, epsilon);
}

AttackResult pgd(const ViTWeights& w, const Tensor& original, int label, double epsilon,
                 double alpha, int iters) {
  check_image(original);
  check_label(w, label);
  if (epsilon < 0.0) throw std::invalid_argument("pgd: epsilon < 0");
  if (alpha <= 0.0) throw std::invalid_argument("pgd: alpha <= 0");
  if (iters < 1) throw std::invalid_argument("pgd: iters < 1");

  int clean_pred = -1;
  Tensor x = original.clone();
  for (int t = 0; t < iters; ++t) {
    std::vector<double> logits;
    Tensor g = input_gradient(w, x, label, &logits, "pgd");
    if (t == 0) clean_pred = argmax(logits);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double o = original.data()[i];
      double v = x.data()[i] + alpha * sign(g.data()[i]);
      v = std::clamp(v, o - epsilon, o + epsilon);
      x.data()[i] = std::clamp(v, 0.0, 1.0);
    }
  }
  return finish(w, original, std::move(x), clean_pred, iters, epsilon);
}

AttackResult cw(const ViTWeights& w, const Tensor& original, int label, double c, double kappa,
                int steps, double lr) {
  check_image(original);
  check_label(w, label);
  if (c < 0.0 || kappa < 0.0 || steps < 1 || lr <= 0.0) {
    throw std::invalid_argument("cw: bad hyperparameters");
  }

  const int clean_pred = predict(w, original);

  // atanh is singular at 0/1, squeeze first
  const double delta = 1e-6;
  std::vector<double> wdata(original.size());
  for (std::size_t i = 0; i < wdata.size(); ++i) {
    const double o = std::clamp(original.data()[i], delta, 1.0 - delta);
    wdata[i] = std::atanh(2.0 * o - 1.0);
  }

  double best_obj = std::numeric_limits<double>::infinity();
  std::vector<double> best_x;
  int ran = 0;
  for (int step = 0; step <= steps; ++step) {
    Tensor wt(original.shape(), wdata, true);
    Tensor x = scale(add_scalar(tanh(wt), 1.0), 0.5);
    Tensor diff = sub(x, original.detached());
    Tensor dist = sum_all(mul(diff, diff));
    Tensor logits = vit_logits(w, x);
    const int other = argmax_excluding(logits.values(), label);
    Tensor margin = sub(pick(logits, static_cast<std::size_t>(label)),
                        pick(logits, static_cast<std::size_t>(other)));
    Tensor objective = add(dist, scale(clamp_min(margin, -kappa), c));

    const double ov = objective.item();
    if (!std::isfinite(ov)) {
      std::cerr << "cw: non-finite objective at step " << step << ", keeping best iterate\n";
      break;
    }
    if (ov < best_obj) {
      best_obj = ov;
      best_x = x.values();
    }
    if (step == steps) break;
    objective.backward();
    Tensor g = wt.grad();
    if (!g.all_finite()) {
      std::cerr << "cw: non-finite gradient at step " << step << ", keeping best iterate\n";
      break;
    }
    for (std::size_t i = 0; i < wdata.size(); ++i) wdata[i] -= lr * g.data()[i];
    ran = step + 1;
  }
  if (best_x.empty()) throw std::runtime_error("cw: no finite iterate found");
  return finish(w, original, Tensor(original.shape(), std::move(best_x)), clean_pred, ran);
}

AttackResult run_attack(const ViTWeights& w, const AttackSpec& spec, const Tensor& original,
                        int label) {
  spec.validate();
  switch (spec.family) {
    case AttackFamily::kFgsm:
      return fgsm(w, original, label, spec.epsilon);
    case AttackFamily::kPgd:
      return pgd(w, original, label, spec.epsilon, spec.alpha, spec.iters);
    case AttackFamily::kCw:
      return cw(w, original, label, spec.c, spec.kappa, spec.cw_steps, spec.cw_lr);
  }
  throw std::invalid_argument("attack: unknown family");
}

}  // namespace vitsig
