#pragma once

#include <functional>
#include <vector>

#include "gleve/ad.hpp"
#include "gleve/errors.hpp"
#include "gleve/volume.hpp"

namespace gleve {

struct LossWeights {
  double uni = 0.1;
  double con = 1.0;
  double sep = 0.1;
  double seg = 1.0;
  double weak = 1.0;
  double eps = 1e-8;
};

struct LossReport {
  double uni = 0.0;
  double attr = 0.0;
  double org = 0.0;
  double con = 0.0;
  double sep = 0.0;
  double weak = 0.0;
  double seg = 0.0;
  double total = 0.0;
  bool has_mask = false;
};

// ((|V - Vr|/(|Vr|+eps))^2 + (|mu - mur|/(|mur|+eps))^2 for one lesion.
double attr_loss(double volume_mm3, double mean_hu, double reported_volume_mm3,
                 double reported_mean_hu, double eps);

// Predicted mass outside the binary organ mask, normalized by total mass.
double org_loss(const Volume3& soft_mask, const Mask3& organ_mask, double eps);

// Pairwise soft-IoU overlap between per-lesion masks.
double sep_loss(const std::vector<Volume3>& soft_masks, double eps);

// (1 - softDice) + mean BCE, equal weighting. Predictions are squashed to
// [eps, 1-eps] before the logs.
double seg_loss(const Volume3& soft_mask, const Mask3& gt, double eps);

// Composes the report: con = attr + org, weak = uni*w + con*w + sep*w,
// total = delta*seg_w*seg + weak_w*weak.
LossReport total_loss(double uni, double attr, double org, double sep,
                      double seg, bool has_mask, const LossWeights& w);

// tape-side building blocks used by the training pipeline (identical
// formulas; the plain versions above double as oracles in tests)
ad::Val soft_volume_tape(ad::Tape& t, ad::Val pred, double voxel_mm3);
ad::Val soft_mean_hu_tape(ad::Tape& t, ad::Val pred, ad::Val hu, double eps);
ad::Val attr_loss_tape(ad::Tape& t, ad::Val volume_mm3, ad::Val mean_hu,
                       double reported_volume, double reported_hu, double eps);
ad::Val org_loss_tape(ad::Tape& t, ad::Val pred, ad::Val organ_indicator,
                      double eps);
ad::Val seg_loss_tape(ad::Tape& t, ad::Val pred, ad::Val gt, double eps);
ad::Val abs_tape(ad::Tape& t, ad::Val x);

struct DiffProbe {
  std::function<double(const std::vector<double>&)> value;
  std::function<std::vector<double>(const std::vector<double>&)> gradient;
};

// Central differences against the analytic gradient; returns the max over
// coordinates of |ga - gfd| / max(|ga|, |gfd|, 1e-8).
double grad_check(const DiffProbe& probe, const std::vector<double>& theta0,
                  double eps_fd);

struct OptimizerConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  bool cosine = true;  // anneal lr to 0 over the step budget
};

// Decoupled weight decay Adam with cosine annealing.
class AdamW {
 public:
  AdamW(std::size_t n, const OptimizerConfig& cfg, int total_steps);
  double current_lr() const;
  void step(std::vector<double>& params, const std::vector<double>& grad);
  int steps_taken() const { return t_; }

 private:
  OptimizerConfig cfg_;
  int total_steps_;
  int t_ = 0;
  std::vector<double> m_, v_;
};

struct OptimizeResult {
  std::vector<double> loss_trace;
  std::vector<double> lr_trace;
};

// loss_and_grad fills `grad` and returns the loss at `params`. Non-finite
// losses abort with a NumericError diagnostic.
OptimizeResult optimize(
    std::vector<double>& params,
    const std::function<double(const std::vector<double>&,
                               std::vector<double>&)>& loss_and_grad,
    int steps, const OptimizerConfig& cfg);

}  // namespace gleve
