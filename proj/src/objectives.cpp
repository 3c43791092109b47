#include "gleve/objectives.hpp"

#include <cmath>

namespace gleve {

namespace {

void check_same_grid(const Volume3& v, const Mask3& m, const char* what) {
  if (v.nx != m.nx || v.ny != m.ny || v.nz != m.nz || v.channels != 1) {
    throw DataError(std::string(what) + ": shape mismatch");
  }
}

}  // namespace

double attr_loss(double volume_mm3, double mean_hu, double reported_volume_mm3,
                 double reported_mean_hu, double eps) {
  const double dv =
      std::abs(volume_mm3 - reported_volume_mm3) /
      (std::abs(reported_volume_mm3) + eps);
  const double dh = std::abs(mean_hu - reported_mean_hu) /
                    (std::abs(reported_mean_hu) + eps);
  return dv * dv + dh * dh;
}

double org_loss(const Volume3& soft_mask, const Mask3& organ_mask, double eps) {
  check_same_grid(soft_mask, organ_mask, "org_loss");
  double outside = 0.0, total = 0.0;
  for (std::int64_t i = 0; i < soft_mask.voxels(); ++i) {
    const double y = soft_mask.data[std::size_t(i)];
    total += y;
    if (!organ_mask.data[std::size_t(i)]) outside += y;
  }
  return outside / (total + eps);
}

double sep_loss(const std::vector<Volume3>& soft_masks, double eps) {
  if (soft_masks.empty()) throw DataError("sep_loss: need at least one mask");
  double loss = 0.0;
  for (std::size_t i = 0; i < soft_masks.size(); ++i) {
    for (std::size_t j = i + 1; j < soft_masks.size(); ++j) {
      const Volume3& a = soft_masks[i];
      const Volume3& b = soft_masks[j];
      if (!a.same_grid(b)) throw DataError("sep_loss: shape mismatch");
      double inter = 0.0, uni = 0.0;
      for (std::int64_t v = 0; v < a.voxels(); ++v) {
        inter += double(a.data[std::size_t(v)]) * b.data[std::size_t(v)];
        uni += std::max(double(a.data[std::size_t(v)]), double(b.data[std::size_t(v)]));
      }
      loss += inter / (uni + eps);
    }
  }
  return loss;
}

double seg_loss(const Volume3& soft_mask, const Mask3& gt, double eps) {
  check_same_grid(soft_mask, gt, "seg_loss");
  const double squash = std::max(eps, 1e-12);
  double inter = 0.0, psum = 0.0, ysum = 0.0, bce = 0.0;
  const std::int64_t n = soft_mask.voxels();
  for (std::int64_t i = 0; i < n; ++i) {
    const double p = soft_mask.data[std::size_t(i)];
    const double y = gt.data[std::size_t(i)];
    inter += p * y;
    psum += p;
    ysum += y;
    const double ps = squash + (1.0 - 2.0 * squash) * p;
    bce -= y * std::log(ps) + (1.0 - y) * std::log(1.0 - ps);
  }
  const double dice = (2.0 * inter + eps) / (psum + ysum + eps);
  return (1.0 - dice) + bce / double(n);
}

LossReport total_loss(double uni, double attr, double org, double sep,
                      double seg, bool has_mask, const LossWeights& w) {
  LossReport r;
  r.uni = uni;
  r.attr = attr;
  r.org = org;
  r.con = attr + org;
  r.sep = sep;
  r.seg = seg;
  r.has_mask = has_mask;
  r.weak = w.uni * r.uni + w.con * r.con + w.sep * r.sep;
  r.total = (has_mask ? 1.0 : 0.0) * w.seg * r.seg + w.weak * r.weak;
  return r;
}

ad::Val abs_tape(ad::Tape& t, ad::Val x) {
  return t.maximum(x, t.mul_scalar(x, -1.0));
}

ad::Val soft_volume_tape(ad::Tape& t, ad::Val pred, double voxel_mm3) {
  return t.mul_scalar(t.sum(pred), voxel_mm3);
}

ad::Val soft_mean_hu_tape(ad::Tape& t, ad::Val pred, ad::Val hu, double eps) {
  ad::Val num = t.sum(t.mul(pred, hu));
  ad::Val den = t.maximum(t.sum(pred), t.leaf(ad::Tensor::scalar(eps)));
  return t.div(num, den);
}

ad::Val attr_loss_tape(ad::Tape& t, ad::Val volume_mm3, ad::Val mean_hu,
                       double reported_volume, double reported_hu,
                       double eps) {
  ad::Val dv = t.mul_scalar(
      abs_tape(t, t.add_scalar(volume_mm3, -reported_volume)),
      1.0 / (std::abs(reported_volume) + eps));
  ad::Val dh = t.mul_scalar(abs_tape(t, t.add_scalar(mean_hu, -reported_hu)),
                            1.0 / (std::abs(reported_hu) + eps));
  return t.add(t.mul(dv, dv), t.mul(dh, dh));
}

ad::Val org_loss_tape(ad::Tape& t, ad::Val pred, ad::Val organ_indicator,
                      double eps) {
  ad::Val outside = t.sum(
      t.mul(pred, t.add_scalar(t.mul_scalar(organ_indicator, -1.0), 1.0)));
  ad::Val total = t.add_scalar(t.sum(pred), eps);
  return t.div(outside, total);
}

ad::Val seg_loss_tape(ad::Tape& t, ad::Val pred, ad::Val gt, double eps) {
  const double squash = std::max(eps, 1e-12);
  const std::int64_t n = t.value(pred).numel();
  ad::Val inter = t.sum(t.mul(pred, gt));
  ad::Val dice = t.div(
      t.add_scalar(t.mul_scalar(inter, 2.0), eps),
      t.add_scalar(t.add(t.sum(pred), t.sum(gt)), eps));
  ad::Val dice_term = t.add_scalar(t.mul_scalar(dice, -1.0), 1.0);

  ad::Val ps = t.add_scalar(t.mul_scalar(pred, 1.0 - 2.0 * squash), squash);
  ad::Val one_minus_gt = t.add_scalar(t.mul_scalar(gt, -1.0), 1.0);
  ad::Val one_minus_ps = t.add_scalar(t.mul_scalar(ps, -1.0), 1.0);
  ad::Val bce = t.mul_scalar(
      t.sum(t.add(t.mul(gt, t.log_(ps)),
                  t.mul(one_minus_gt, t.log_(one_minus_ps)))),
      -1.0 / double(n));
  return t.add(dice_term, bce);
}

double grad_check(const DiffProbe& probe, const std::vector<double>& theta0,
                  double eps_fd) {
  const std::vector<double> ga = probe.gradient(theta0);
  if (ga.size() != theta0.size()) {
    throw NumericError("grad_check: gradient size mismatch");
  }
  double worst = 0.0;
  std::vector<double> theta = theta0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double h = eps_fd * std::max(1.0, std::abs(theta0[i]));
    theta[i] = theta0[i] + h;
    const double fp = probe.value(theta);
    theta[i] = theta0[i] - h;
    const double fm = probe.value(theta);
    theta[i] = theta0[i];
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("grad_check: non-finite loss");
    }
    const double gfd = (fp - fm) / (2.0 * h);
    const double denom =
        std::max({std::abs(ga[i]), std::abs(gfd), 1e-8});
    worst = std::max(worst, std::abs(ga[i] - gfd) / denom);
  }
  return worst;
}

AdamW::AdamW(std::size_t n, const OptimizerConfig& cfg, int total_steps)
    : cfg_(cfg), total_steps_(std::max(total_steps, 1)) {
  m_.assign(n, 0.0);
  v_.assign(n, 0.0);
}

double AdamW::current_lr() const {
  if (!cfg_.cosine) return cfg_.lr;
  const double frac = double(t_) / double(total_steps_);
  return cfg_.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac));
}

void AdamW::step(std::vector<double>& params, const std::vector<double>& grad) {
  if (params.size() != m_.size() || grad.size() != m_.size()) {
    throw NumericError("optimizer size mismatch");
  }
  const double lr = current_lr();
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad[i];
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
    const double mhat = m_[i] / bc1;
    const double vhat = v_[i] / bc2;
    params[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                       cfg_.weight_decay * params[i]);
  }
}

OptimizeResult optimize(
    std::vector<double>& params,
    const std::function<double(const std::vector<double>&,
                               std::vector<double>&)>& loss_and_grad,
    int steps, const OptimizerConfig& cfg) {
  if (steps < 0) throw ConfigError("optimize: steps must be >= 0");
  OptimizeResult res;
  AdamW opt(params.size(), cfg, steps);
  std::vector<double> grad(params.size(), 0.0);
  for (int s = 0; s < steps; ++s) {
    std::fill(grad.begin(), grad.end(), 0.0);
    const double loss = loss_and_grad(params, grad);
    if (!std::isfinite(loss)) {
      throw NumericError("optimize: non-finite loss at step " +
                         std::to_string(s));
    }
    res.loss_trace.push_back(loss);
    res.lr_trace.push_back(opt.current_lr());
    opt.step(params, grad);
  }
  return res;
}

}  // namespace gleve
