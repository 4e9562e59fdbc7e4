#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "gnfield/checkpoint.hpp"
#include "gnfield/config.hpp"
#include "gnfield/model.hpp"
#include "gnfield/toytracer.hpp"

namespace gnfield {

struct LossReport {
  double l_mse = 0, l_backbone = 0, l_dy = 0, total = 0;
  int64_t step = 0;
};

// Mean over rays of the squared color error.
template <class S>
Var<S> loss_mse(Var<S> pred /*[B,3]*/, Var<S> gt /*[B,3]*/) {
  if (pred.shape() != gt.shape()) throw std::invalid_argument("loss_mse: shape mismatch");
  const S inv_b = S(1) / static_cast<S>(pred.shape()[0]);
  return mul_scalar(sum_all(square(sub(pred, gt))), inv_b);
}

// Per-pixel MSE over all reference images.
template <class S>
Var<S> loss_backbone(Var<S> reconstructed, Var<S> originals) {
  if (reconstructed.shape() != originals.shape())
    throw std::invalid_argument("loss_backbone: shape mismatch");
  return mean_all(square(sub(reconstructed, originals)));
}

// Auxiliary supervision for the dynamic weights: reproject reference colors,
// blend them with M^DY (averaged over levels), composite with detached hitting
// weights, and penalize against the true color. Gradient reaches only the
// dynamic-weight paths.
template <class S>
Var<S> loss_dy(const ForwardOut<S>& fwd, Var<S> gt /*[B,3]*/,
               const std::array<double, 3>& background,
               const Tensor<S>* frozen_weights = nullptr) {
  Tape<S>& tape = *fwd.color.tape;
  const Shape& ws = fwd.weights.shape();
  const int64_t B = ws[0];
  Var<S> ref_colors = make_const(tape, fwd.reference_colors);  // [B,K,N,3]
  Var<S> blended;
  int active = 0;
  for (int l = 0; l < 3; ++l) {
    if (!fwd.dyn_active[static_cast<size_t>(l)]) continue;
    Var<S> cl = weighted_sum_views(ref_colors, fwd.dynamic_w[static_cast<size_t>(l)]);
    blended = active == 0 ? cl : add(blended, cl);
    ++active;
  }
  if (active == 0) throw std::invalid_argument("loss_dy: no dynamic weights present");
  Var<S> c_prime = mul_scalar(blended, S(1) / static_cast<S>(active));  // [B,K,3]
  // The hitting weights are auxiliary here: detached so this loss shapes only
  // the dynamic-weight paths. Finite-difference checks pass pre-captured
  // weights instead, which is the same function at the evaluation point.
  Var<S> w = frozen_weights ? make_const(tape, *frozen_weights) : stopgrad(fwd.weights);
  Var<S> residual = mul_scalar(add_scalar(sum_last(w), S(-1)), S(-1));
  Tensor<S> bg(Shape{3});
  for (int i = 0; i < 3; ++i) bg[i] = static_cast<S>(background[static_cast<size_t>(i)]);
  Var<S> c_hat = add(weighted_sum_views(c_prime, w), outer_rows(residual, bg));
  const S inv_b = S(1) / static_cast<S>(B);
  return mul_scalar(sum_all(square(sub(c_hat, gt))), inv_b);
}

template <class S>
struct LossVars {
  Var<S> mse, backbone, dy, total;
};

template <class S>
struct TrainBatch {
  int scene_index = 0;
  PairBatch pair;
  SampleBatch samples;
  std::array<double, 3> background{0, 0, 0};
};

template <class S>
class Trainer {
 public:
  Trainer(const TrainConfig& cfg, std::vector<SceneDataset> scenes)
      : cfg_(cfg), scenes_(std::move(scenes)), model_(cfg.model_config()) {
    cfg_.validate();
    if (scenes_.empty()) throw std::invalid_argument("trainer: no training scenes");
    for (const SceneDataset& s : scenes_) {
      if (static_cast<int>(s.views.size()) < 2 * cfg_.n_references)
        throw std::invalid_argument(
            "trainer: scene " + s.scene_id + " has too few views for target-reference sampling");
      scene_ids_.push_back(s.scene_id);
    }
  }

  Model<S>& model() { return model_; }
  const Model<S>& model() const { return model_; }
  const TrainConfig& config() const { return cfg_; }
  const std::vector<SceneDataset>& scenes() const { return scenes_; }
  const std::vector<std::string>& scene_ids() const { return scene_ids_; }
  int64_t step_index() const { return step_; }

  TrainBatch<S> make_batch(Rng& rng, int forced_scene = -1) const {
    TrainBatch<S> tb;
    tb.scene_index =
        forced_scene >= 0
            ? forced_scene
            : static_cast<int>(rng.uniform_int(static_cast<int64_t>(scenes_.size())));
    const SceneDataset& sc = scenes_[static_cast<size_t>(tb.scene_index)];
    tb.pair = sample_pair_batch(sc.scene_id, sc.views, cfg_.n_references, cfg_.pool_factor,
                                cfg_.rays_per_batch, rng);
    const CameraView& target = sc.views[static_cast<size_t>(tb.pair.target_index)];
    const std::vector<Ray> rays = generate_rays(target, tb.pair.pixels, sc.near, sc.far);
    tb.samples = stratified_sample(rays, cfg_.samples_per_ray, cfg_.jitter, rng);
    tb.background = sc.background;
    return tb;
  }

  // Forward plus the three loss terms for one batch.
  LossVars<S> build_losses(Tape<S>& tape, Binder<S>& bind, const TrainBatch<S>& tb,
                           const Tensor<S>* dy_frozen_weights = nullptr) {
    const SceneDataset& sc = scenes_[static_cast<size_t>(tb.scene_index)];
    ForwardInputs<S> in;
    in.samples = &tb.samples;
    for (int idx : tb.pair.reference_indices)
      in.ref_views.push_back(&sc.views[static_cast<size_t>(idx)]);
    in.background = tb.background;
    in.training = bind.training();
    in.want_reconstruction = true;
    const bool dynamic = cfg_.aggregation != "static_only";
    in.want_reference_colors = dynamic;
    ForwardOut<S> fwd = model_.forward(tape, bind, in);

    Var<S> gt = make_const(tape, tb.pair.gt_colors.template cast<S>());
    LossVars<S> lv;
    lv.mse = loss_mse(fwd.color, gt).tagged("loss.mse");
    lv.backbone = loss_backbone(fwd.reconstruction, fwd.ref_images).tagged("loss.backbone");
    lv.dy = dynamic ? loss_dy(fwd, gt, tb.background, dy_frozen_weights).tagged("loss.dy")
                    : make_const(tape, Tensor<S>::scalar(S(0)));
    lv.total = add(lv.mse, add(mul_scalar(lv.backbone, static_cast<S>(cfg_.lambda1)),
                               mul_scalar(lv.dy, static_cast<S>(cfg_.lambda2))))
                   .tagged("loss.total");
    return lv;
  }

  LossReport step() {
    Rng rng(cfg_.seed, 0x7261696e00000000ull + static_cast<uint64_t>(step_));
    const TrainBatch<S> tb = make_batch(rng);
    Tape<S> tape;
    Binder<S> bind(tape, model_.store, /*training=*/true);
    LossVars<S> lv = build_losses(tape, bind, tb);
    LossReport rep;
    rep.step = step_;
    rep.l_mse = static_cast<double>(lv.mse.val()[0]);
    rep.l_backbone = static_cast<double>(lv.backbone.val()[0]);
    rep.l_dy = static_cast<double>(lv.dy.val()[0]);
    rep.total = static_cast<double>(lv.total.val()[0]);
    if (!std::isfinite(rep.total)) {
      const char* tag = tape.first_nonfinite_tag();
      throw std::runtime_error("non-finite loss at step " + std::to_string(step_) +
                               "; first non-finite tensor: " + (tag ? tag : "unknown"));
    }
    tape.backward(lv.total.id);
    bind.harvest_grads();
    const double decay =
        std::pow(cfg_.decay_factor, static_cast<double>(step_ / cfg_.decay_interval));
    adam_step(model_.store, step_, cfg_.lr_backbone * decay, cfg_.lr_rest * decay);
    ++step_;
    return rep;
  }

  void save(const std::string& path) const {
    save_checkpoint(path, model_.store, cfg_, step_, scene_ids_);
  }

  void restore(const CheckpointData& data) {
    restore_store(model_.store, data);
    step_ = data.step;
  }

 private:
  TrainConfig cfg_;
  std::vector<SceneDataset> scenes_;
  std::vector<std::string> scene_ids_;
  Model<S> model_;
  int64_t step_ = 0;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

struct GradCheckGroup {
  std::string name;
  double max_rel_err = 0;
  int checked = 0;
  int nonsmooth_skipped = 0;  // picks where the 1e-5 central difference is invalid
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  double max_rel_err = 0;
  int checked = 0;
  int nonsmooth_skipped = 0;
};

inline std::string gradcheck_group_of(const std::string& param_name) {
  const size_t dot = param_name.find('.');
  std::string first = param_name.substr(0, dot);
  if (first == "hyper" && dot != std::string::npos) {
    const size_t dot2 = param_name.find('.', dot + 1);
    return param_name.substr(0, dot2);
  }
  if (first == "agg") return "aggregator";
  return first;
}

// Central differences (step 1e-5) on a random subset of parameters spanning
// every group. Normalization runs in eval mode; the batch is fixed.
template <class S>
GradCheckReport gradcheck(Trainer<S>& trainer, int max_params = 512, double fd_step = 1e-5) {
  static_assert(std::is_same_v<S, double>, "gradcheck requires the float64 instantiation");
  Rng rng(trainer.config().seed, "gradcheck");
  std::vector<TrainBatch<S>> batches;
  const size_t n_batches = std::min<size_t>(2, trainer.scenes().size());
  for (size_t i = 0; i < n_batches; ++i)
    batches.push_back(trainer.make_batch(rng, static_cast<int>(i)));

  ParamStore<S>& store = trainer.model().store;

  // The dynamic-weights loss detaches the hitting weights; differencing the
  // raw total would measure the deliberately-dropped path. Freeze w at its
  // unperturbed value per batch so FD and the analytic gradient describe the
  // same function.
  std::vector<Tensor<S>> frozen_w(batches.size());
  for (size_t i = 0; i < batches.size(); ++i) {
    Tape<S> tape;
    tape.grad_enabled = false;
    Binder<S> bind(tape, store, /*training=*/false);
    LossVars<S> lv = trainer.build_losses(tape, bind, batches[i]);
    (void)lv;
    for (auto& node : tape.nodes)
      if (node.tag && std::string_view(node.tag) == "field.weights") frozen_w[i] = node.val;
  }

  auto loss_value = [&]() -> double {
    double total = 0;
    for (size_t i = 0; i < batches.size(); ++i) {
      Tape<S> tape;
      tape.grad_enabled = false;
      Binder<S> bind(tape, store, /*training=*/false);
      total += trainer.build_losses(tape, bind, batches[i], &frozen_w[i]).total.val()[0];
    }
    return total;
  };

  // Analytic gradients, accumulated across the fixed batches.
  zero_grads(store);
  for (Param<S>& p : store.all())
    if (p.trainable && p.grad.empty()) p.grad = Tensor<S>::zeros(p.value.shape);
  for (size_t i = 0; i < batches.size(); ++i) {
    Tape<S> tape;
    Binder<S> bind(tape, store, /*training=*/false);
    LossVars<S> lv = trainer.build_losses(tape, bind, batches[i], &frozen_w[i]);
    tape.backward(lv.total.id);
    bind.harvest_grads();
  }

  // Proportional per-group quotas over the trainable scalars.
  std::map<std::string, std::vector<int>> group_params;
  for (size_t i = 0; i < store.size(); ++i) {
    const Param<S>& p = store.at(static_cast<int>(i));
    if (p.trainable) group_params[gradcheck_group_of(p.name)].push_back(static_cast<int>(i));
  }
  int64_t total_scalars = 0;
  for (const Param<S>& p : store.all())
    if (p.trainable) total_scalars += p.value.numel();

  auto fd_at = [&](Param<S>& p, int64_t idx, double h) {
    const double original = p.value[idx];
    p.value[idx] = original + h;
    const double lp = loss_value();
    p.value[idx] = original - h;
    const double lm = loss_value();
    p.value[idx] = original;
    return (lp - lm) / (2 * h);
  };

  GradCheckReport report;
  for (const auto& [group, pids] : group_params) {
    int64_t group_scalars = 0;
    for (int pid : pids) group_scalars += store.at(pid).value.numel();
    int quota = static_cast<int>((max_params * group_scalars) / std::max<int64_t>(1, total_scalars));
    quota = std::max(quota, 3);
    GradCheckGroup g;
    g.name = group;
    for (int q = 0; q < quota; ++q) {
      // A central difference is only a derivative estimate where the loss is
      // locally smooth at the step size; picks straddling a ReLU/argmax kink
      // fail the h vs h/4 consistency probe and are resampled.
      bool checked = false;
      for (int attempt = 0; attempt < 16 && !checked; ++attempt) {
        const int pid =
            pids[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(pids.size())))];
        Param<S>& p = store.at(pid);
        const int64_t idx = rng.uniform_int(p.value.numel());
        const double fd = fd_at(p, idx, fd_step);
        const double fd_fine = fd_at(p, idx, fd_step / 4);
        const double scale = std::max({std::abs(fd), std::abs(fd_fine), 1e-6});
        if (std::abs(fd - fd_fine) > 1e-4 * scale) {
          ++g.nonsmooth_skipped;
          continue;
        }
        const double an = p.grad[idx];
        const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
        g.max_rel_err = std::max(g.max_rel_err, rel);
        ++g.checked;
        checked = true;
      }
    }
    report.max_rel_err = std::max(report.max_rel_err, g.max_rel_err);
    report.checked += g.checked;
    report.nonsmooth_skipped += g.nonsmooth_skipped;
    report.groups.push_back(g);
  }
  zero_grads(store);
  return report;
}

}  // namespace gnfield
