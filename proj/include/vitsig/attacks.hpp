#pragma once

#include <string>

#include "vitsig/vit.hpp"

namespace vitsig {

enum class AttackFamily { kFgsm, kPgd, kCw };

std::string family_name(AttackFamily f);

struct AttackSpec {
  AttackFamily family = AttackFamily::kFgsm;
  double epsilon = 0.031;  // l-inf budget, image units
  double alpha = 0.025;    // PGD step size
  int iters = 40;          // PGD iterations
  double c = 1e-4;         // CW trade-off weight
  double kappa = 0.0;      // CW margin
  int cw_steps = 100;
  double cw_lr = 1e-2;

  void validate() const;
  /// Stable identifier such as "fgsm_eps0.031" used in file names and reports.
  std::string tag() const;
};

struct AttackResult {
  Tensor image;
  bool success = false;  // prediction changed vs. the clean input
  double linf = 0.0;
  double l2 = 0.0;
  int iterations = 0;
};

/// x = clip01(o + eps * sign(grad_o L(o,y))), sign(0) = 0.
AttackResult fgsm(const ViTWeights& w, const Tensor& original, int label, double epsilon);

/// Iterated sign steps projected into the eps ball around the original and
/// into [0,1]; x0 = o.
AttackResult pgd(const ViTWeights& w, const Tensor& original, int label, double epsilon,
                 double alpha, int iters);

/// Carlini-Wagner style l2 attack: gradient descent on w with
/// x(w) = (tanh(w)+1)/2 over ||x-o||^2 + c*max(logit_y - max_other, -kappa);
/// best iterate by objective is returned. Margins use pre-softmax logits.
AttackResult cw(const ViTWeights& w, const Tensor& original, int label, double c, double kappa,
                int steps, double lr);

AttackResult run_attack(const ViTWeights& w, const AttackSpec& spec, const Tensor& original,
                        int label);

}  // namespace vitsig
