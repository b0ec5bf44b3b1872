#pragma once

// The per-iteration optimization step and the epoch loop, in three modes:
//
//   iomatch     L_s + lambda_mb*L_mb + lambda_ui*L_ui + lambda_op*L_op
//   fixmatch    L_s + lambda_ui * hard-label confidence consistency
//   supervised  L_s only
//
// Randomness is split into independent streams (batch sampling, labeled-view
// augmentation, unlabeled-view augmentation, parameter init) so the
// labeled-side draws are identical across modes; with all auxiliary weights
// at zero, iomatch reproduces the supervised per-iteration L_s bitwise.

#include <cmath>
#include <cstdint>
#include <memory>
#include <sstream>
#include <vector>

#include "iomatch/config.hpp"
#include "iomatch/data.hpp"
#include "iomatch/evaluator.hpp"
#include "iomatch/network.hpp"
#include "iomatch/objectives.hpp"
#include "iomatch/tensor.hpp"

namespace iomatch {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t role, std::uint64_t index = 0) {
    return splitmix64(splitmix64(splitmix64(seed) ^ role) ^ index);
}

inline constexpr std::uint64_t kStreamInit = 0x01;
inline constexpr std::uint64_t kStreamBatch = 0x02;
inline constexpr std::uint64_t kStreamLabeledAug = 0x03;
inline constexpr std::uint64_t kStreamUnlabeledAug = 0x04;

inline std::string batch_stats(const char* name, const TensorPtr& x) {
    double lo = 0.0, hi = 0.0, sum = 0.0;
    if (x->size() > 0) {
        lo = hi = x->values()[0];
        for (double v : x->values()) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
            sum += v;
        }
    }
    std::ostringstream os;
    os << name << "[" << x->shape_string() << " min=" << lo << " max=" << hi
       << " mean=" << (x->size() ? sum / x->size() : 0.0) << "]";
    return os.str();
}

} // namespace detail

struct IterationLosses {
    double l_s = 0.0, l_mb = 0.0, l_ui = 0.0, l_op = 0.0, l_overall = 0.0;
    int n_selected_inliers = 0, n_selected_open = 0;
};

struct RunState {
    RunState(const OpenSetDataset& ds, const TrainConfig& cfg)
        : config(cfg),
          params(NetworkParams::init(detail::stream_seed(cfg.seed, detail::kStreamInit),
                                     with_input_dim(cfg.dims, ds.input_dim), ds.num_seen())),
          optimizer(params.parameters(), cfg.lr, cfg.momentum),
          align(ds.num_seen()),
          data_rng(detail::stream_seed(cfg.seed, detail::kStreamBatch)) {}

    static NetworkDims with_input_dim(NetworkDims dims, int input_dim) {
        dims.input_dim = input_dim;
        return dims;
    }

    TrainConfig config;
    NetworkParams params;
    SgdOptimizer optimizer;
    AlignmentState align;
    std::mt19937_64 data_rng;
    long iteration = 0;
    int epochs_done = 0;
    NetworkParams best_params;
    int best_epoch = -1;
    double best_closed_acc = -1.0;
    std::vector<MetricsRecord> history;
    std::vector<IterationLosses> iteration_losses;
};

inline double scheduled_lr(const TrainConfig& cfg, long iteration) {
    if (!cfg.cosine_decay) return cfg.lr;
    constexpr double pi = 3.14159265358979323846;
    const double total = static_cast<double>(cfg.epochs) * cfg.iters_per_epoch;
    const double frac = std::min(1.0, static_cast<double>(iteration) / std::max(1.0, total));
    return cfg.lr * std::cos(7.0 * pi / 16.0 * frac);
}

// One step of the training loop: forward the weak labeled view, forward the
// weak and strong unlabeled views, build the losses the mode asks for, fuse
// targets, backpropagate, and apply the optimizer.
inline LossBreakdown train_iteration(RunState& state, const LabeledBatch& labeled,
                                     const UnlabeledBatch& unlabeled, const TrainConfig& cfg) {
    Tape tape;
    std::mt19937_64 lab_rng(detail::stream_seed(cfg.seed, detail::kStreamLabeledAug,
                                                static_cast<std::uint64_t>(state.iteration)));
    std::mt19937_64 unlab_rng(detail::stream_seed(cfg.seed, detail::kStreamUnlabeledAug,
                                                  static_cast<std::uint64_t>(state.iteration)));

    const auto x_l = augment(labeled.x, cfg.augment, AugmentStrength::weak, lab_rng);
    const ForwardOutputs out_l = forward(tape, state.params, x_l);
    TensorPtr l_s = supervised_loss(tape, out_l.p, labeled.y);
    TensorPtr l_mb = scalar_tensor(0.0);
    TensorPtr l_ui = scalar_tensor(0.0);
    TensorPtr l_op = scalar_tensor(0.0);
    int n_sel_in = 0, n_sel_op = 0;

    if (cfg.mode != TrainMode::supervised) {
        const auto x_w = augment(unlabeled.x, cfg.augment, AugmentStrength::weak, unlab_rng);
        const auto x_s = augment(unlabeled.x, cfg.augment, AugmentStrength::strong, unlab_rng);
        const auto [out_w, out_s] = forward_views(tape, state.params, x_w, x_s);
        const TensorPtr p_tilde = distribution_align(detach(out_w.p), state.align, cfg.da_enabled);
        if (cfg.mode == TrainMode::iomatch) {
            l_mb = multi_binary_loss(tape, out_l.o, labeled.y);
            const OpenSetTarget target = open_set_targets(p_tilde, detach(out_w.o));
            LossTerm op = open_set_loss(tape, target, out_s.q_open, cfg.tau_q);
            LossTerm ui = unlabeled_inlier_loss(tape, target, out_s.p, cfg.tau_p, cfg.hard_labels);
            l_op = op.value;
            l_ui = ui.value;
            n_sel_op = op.n_selected;
            n_sel_in = ui.n_selected;
        } else {
            LossTerm fix = fixmatch_consistency_loss(tape, p_tilde, out_s.p, cfg.tau_p);
            l_ui = fix.value;
            n_sel_in = fix.n_selected;
        }
    }

    LossBreakdown breakdown =
        overall_loss(tape, l_s, l_mb, l_ui, l_op, cfg.lambda_mb, cfg.lambda_ui, cfg.lambda_op);
    breakdown.n_selected_inliers = n_sel_in;
    breakdown.n_selected_open = n_sel_op;

    if (!std::isfinite(breakdown.l_overall->item())) {
        std::ostringstream os;
        os << "non-finite loss at iteration " << state.iteration << ": l_s=" << l_s->item()
           << " l_mb=" << l_mb->item() << " l_ui=" << l_ui->item() << " l_op=" << l_op->item()
           << "; " << detail::batch_stats("labeled", labeled.x) << " "
           << detail::batch_stats("unlabeled", unlabeled.x);
        throw TrainingAbort(os.str());
    }

    tape.backward(breakdown.l_overall);
    state.optimizer.set_lr(scheduled_lr(cfg, state.iteration));
    state.optimizer.step();
    ++state.iteration;

    state.iteration_losses.push_back({l_s->item(), l_mb->item(), l_ui->item(), l_op->item(),
                                      breakdown.l_overall->item(), n_sel_in, n_sel_op});
    return breakdown;
}

// N_e epochs of N_i iterations; evaluates after each epoch and keeps the
// parameters of the best epoch by closed-set test accuracy (earliest on ties).
inline RunState train_run(const OpenSetDataset& ds, const TrainConfig& cfg) {
    cfg.validate();
    RunState state(ds, cfg);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const std::size_t first_iter = state.iteration_losses.size();
        for (int i = 0; i < cfg.iters_per_epoch; ++i) {
            auto [lb, ub] = next_batch(ds, cfg.batch_size, cfg.mu, state.data_rng);
            train_iteration(state, lb, ub, cfg);
        }
        MetricsRecord rec = evaluate_epoch(state.params, ds, cfg, state.align, epoch);
        const std::size_t count = state.iteration_losses.size() - first_iter;
        for (std::size_t i = first_iter; i < state.iteration_losses.size(); ++i) {
            const auto& it = state.iteration_losses[i];
            rec.l_s += it.l_s / count;
            rec.l_mb += it.l_mb / count;
            rec.l_ui += it.l_ui / count;
            rec.l_op += it.l_op / count;
            rec.l_overall += it.l_overall / count;
            rec.n_selected_inliers += static_cast<double>(it.n_selected_inliers) / count;
            rec.n_selected_open += static_cast<double>(it.n_selected_open) / count;
        }
        state.history.push_back(rec);
        if (rec.closed_acc > state.best_closed_acc) {
            state.best_closed_acc = rec.closed_acc;
            state.best_epoch = epoch;
            state.best_params = state.params.clone();
        }
        state.epochs_done = epoch + 1;
    }
    return state;
}

struct BestCheckpoint {
    NetworkParams params;
    int epoch = -1;
    double closed_acc = 0.0;
};

inline BestCheckpoint select_best_checkpoint(const RunState& state) {
    if (state.epochs_done < 1 || state.best_epoch < 0) {
        throw UsageError("select_best_checkpoint requires at least one completed epoch");
    }
    return {state.best_params.clone(), state.best_epoch, state.best_closed_acc};
}

} // namespace iomatch
