#pragma once

// Learning objectives: supervised cross-entropy, multi-binary loss with
// hard-negative selection, distribution alignment, fused (K+1)-way open-set
// target production, the masked open-set loss, and the double-filtered
// unlabeled-inlier loss.
//
// Targets (q_tilde, p_tilde) are constants during backpropagation: the heads
// that produce them are trained through the supervised, multi-binary, and
// inlier losses, never through the target path, which keeps pseudo-label
// generation and utilization disentangled.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <vector>

#include "iomatch/errors.hpp"
#include "iomatch/tensor.hpp"

namespace iomatch {

// Per-sample fused open-set target: q_tilde_k = p_tilde_k * o_k for the K
// seen classes, and q_tilde_K = S = sum_j p_tilde_j * (1 - o_j) for the
// virtual outlier class. All tensors are detached.
struct OpenSetTarget {
    TensorPtr q_tilde; // n x (K+1)
    TensorPtr S;       // n x 1, equal to the last q_tilde column
    TensorPtr p_tilde; // n x K aligned closed-set prediction used to build it
};

struct LossTerm {
    TensorPtr value;
    int n_selected = 0;
};

struct LossBreakdown {
    TensorPtr l_s;
    TensorPtr l_mb;
    TensorPtr l_ui;
    TensorPtr l_op;
    TensorPtr l_overall;
    int n_selected_inliers = 0;
    int n_selected_open = 0;
};

// Running average of batch-mean closed-set predictions over the most recent
// batches (one vector per batch). Before anything is stored the average
// equals the marginal, so early alignment is the identity.
class AlignmentState {
public:
    explicit AlignmentState(int num_seen, std::size_t capacity = 128)
        : num_seen_(num_seen), capacity_(capacity),
          marginal_(static_cast<std::size_t>(num_seen), 1.0 / num_seen) {
        if (num_seen < 1) throw ConfigError("alignment state needs at least one class");
        if (capacity < 1) throw ConfigError("alignment buffer capacity must be positive");
    }

    const std::vector<double>& marginal() const { return marginal_; }

    void set_marginal(std::vector<double> m) {
        if (static_cast<int>(m.size()) != num_seen_) {
            throw ShapeError("marginal has " + std::to_string(m.size()) + " entries, expected " +
                             std::to_string(num_seen_));
        }
        marginal_ = std::move(m);
    }

    std::vector<double> average() const {
        if (buffer_.empty()) return marginal_;
        std::vector<double> avg(static_cast<std::size_t>(num_seen_), 0.0);
        for (const auto& m : buffer_)
            for (int k = 0; k < num_seen_; ++k) avg[k] += m[k];
        double total = 0.0;
        for (double v : avg) total += v;
        if (total <= 0.0) return marginal_;
        for (double& v : avg) v /= total;
        return avg;
    }

    void push(const std::vector<double>& batch_mean) {
        if (static_cast<int>(batch_mean.size()) != num_seen_) {
            throw ShapeError("batch mean has " + std::to_string(batch_mean.size()) +
                             " entries, expected " + std::to_string(num_seen_));
        }
        buffer_.push_back(batch_mean);
        if (buffer_.size() > capacity_) buffer_.pop_front();
    }

    std::size_t size() const { return buffer_.size(); }
    std::size_t capacity() const { return capacity_; }
    int num_seen() const { return num_seen_; }

private:
    int num_seen_;
    std::size_t capacity_;
    std::vector<double> marginal_;
    std::deque<std::vector<double>> buffer_;
};

namespace detail {

inline std::vector<double> column_mean(const TensorPtr& p) {
    std::vector<double> mean(static_cast<std::size_t>(p->cols()), 0.0);
    if (p->rows() == 0) return mean;
    for (int i = 0; i < p->rows(); ++i)
        for (int j = 0; j < p->cols(); ++j) mean[j] += p->at(i, j);
    for (double& v : mean) v /= p->rows();
    return mean;
}

} // namespace detail

// Rescales each prediction row by marginal / running-average and renormalizes
// (value-space; the result feeds detached targets only). The current batch's
// raw mean is pushed into the state after alignment, so a batch never aligns
// against itself.
inline TensorPtr apply_alignment(const TensorPtr& p_w, const AlignmentState& state) {
    const int k = state.num_seen();
    if (p_w->cols() != k) {
        throw ShapeError("apply_alignment: predictions have " + std::to_string(p_w->cols()) +
                         " columns, expected " + std::to_string(k));
    }
    const std::vector<double> avg = state.average();
    const std::vector<double>& mrgl = state.marginal();
    auto out = make_tensor(p_w->rows(), k);
    for (int i = 0; i < p_w->rows(); ++i) {
        double total = 0.0;
        for (int j = 0; j < k; ++j) {
            const double denom = std::max(avg[j], 1e-8);
            const double v = p_w->at(i, j) * mrgl[j] / denom;
            out->at(i, j) = v;
            total += v;
        }
        if (total <= 0.0) total = 1.0;
        for (int j = 0; j < k; ++j) out->at(i, j) /= total;
    }
    return out;
}

inline TensorPtr distribution_align(const TensorPtr& p_w, AlignmentState& state, bool enabled) {
    if (!enabled) return detach(p_w);
    auto out = apply_alignment(p_w, state);
    if (p_w->rows() > 0) state.push(detail::column_mean(p_w));
    return out;
}

// Standard cross-entropy against index labels: (1/B) * sum_i -log p[i, y_i].
inline TensorPtr supervised_loss(Tape& tape, const TensorPtr& p, const std::vector<int>& labels) {
    if (p->rows() != static_cast<int>(labels.size())) {
        throw ShapeError("supervised_loss: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(p->rows()) + " rows");
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= p->cols()) {
            throw DataError("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                            " is outside [0, " + std::to_string(p->cols()) + ")");
        }
    }
    auto picked = gather(tape, p, labels);
    auto total = sum_all(tape, safe_log(tape, picked));
    return scale(tape, total, -1.0 / static_cast<double>(labels.size()));
}

// Hard-negative multi-binary loss:
// (1/B) * sum_i [ -log o[i, y_i] - min_{k != y_i} log(1 - o[i, k]) ].
// The minimum picks the negative class with the largest inlier probability;
// that index is selected in value space so gradients flow only into the
// chosen coordinate, as for any piecewise-defined objective.
inline TensorPtr multi_binary_loss(Tape& tape, const TensorPtr& inlier_probs,
                                   const std::vector<int>& labels) {
    const int k = inlier_probs->cols();
    if (k < 2) {
        throw ConfigError("multi_binary_loss needs at least 2 classes; none can act as negative");
    }
    if (inlier_probs->rows() != static_cast<int>(labels.size())) {
        throw ShapeError("multi_binary_loss: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(inlier_probs->rows()) + " rows");
    }
    std::vector<int> hard_negative(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= k) {
            throw DataError("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                            " is outside [0, " + std::to_string(k) + ")");
        }
        int best = -1;
        for (int c = 0; c < k; ++c) {
            if (c == labels[i]) continue;
            if (best < 0 || inlier_probs->at(static_cast<int>(i), c) >
                                inlier_probs->at(static_cast<int>(i), best)) {
                best = c;
            }
        }
        hard_negative[i] = best;
    }
    auto positive = gather(tape, inlier_probs, labels);
    auto negative = gather(tape, inlier_probs, hard_negative);
    auto ones = make_tensor(negative->rows(), 1);
    std::fill(ones->values().begin(), ones->values().end(), 1.0);
    auto complement = sub(tape, ones, negative);
    auto total = sum_all(tape, add(tape, safe_log(tape, positive), safe_log(tape, complement)));
    return scale(tape, total, -1.0 / static_cast<double>(labels.size()));
}

// Fuses aligned closed-set predictions with multi-binary inlier probabilities
// into a (K+1)-way distribution. Inputs are consumed by value; the output is
// detached from gradient flow.
inline OpenSetTarget open_set_targets(const TensorPtr& p_tilde, const TensorPtr& o_w) {
    if (p_tilde->rows() != o_w->rows() || p_tilde->cols() != o_w->cols()) {
        throw ShapeError("open_set_targets: shapes " + p_tilde->shape_string() + " and " +
                         o_w->shape_string() + " do not match");
    }
    const int n = p_tilde->rows();
    const int k = p_tilde->cols();
    OpenSetTarget target;
    target.q_tilde = make_tensor(n, k + 1);
    target.S = make_tensor(n, 1);
    target.p_tilde = detach(p_tilde);
    for (int i = 0; i < n; ++i) {
        double unseen = 0.0;
        for (int j = 0; j < k; ++j) {
            const double q = p_tilde->at(i, j) * o_w->at(i, j);
            target.q_tilde->at(i, j) = q;
            unseen += p_tilde->at(i, j) * (1.0 - o_w->at(i, j));
        }
        unseen = std::min(std::max(unseen, 0.0), 1.0);
        target.q_tilde->at(i, k) = unseen;
        target.S->at(i, 0) = unseen;
    }
    return target;
}

// Masked soft cross-entropy between the fused targets (weak view) and the
// open-head predictions on the strong view:
// (1/uB) * sum_i 1(max_k q_tilde[i,k] > tau_q) * H(q_tilde_i, q_s_i).
inline LossTerm open_set_loss(Tape& tape, const OpenSetTarget& target, const TensorPtr& q_s,
                              double tau_q) {
    if (q_s->rows() != target.q_tilde->rows() || q_s->cols() != target.q_tilde->cols()) {
        throw ShapeError("open_set_loss: predictions " + q_s->shape_string() + " vs targets " +
                         target.q_tilde->shape_string());
    }
    const int n = q_s->rows();
    LossTerm term;
    if (n == 0) {
        term.value = scalar_tensor(0.0);
        return term;
    }
    auto mask = make_tensor(n, 1);
    const std::vector<double> maxes = row_max(target.q_tilde);
    for (int i = 0; i < n; ++i) {
        const bool keep = maxes[i] > tau_q;
        mask->at(i, 0) = keep ? 1.0 : 0.0;
        term.n_selected += keep ? 1 : 0;
    }
    auto per_entry = mul(tape, safe_log(tape, q_s), target.q_tilde);
    auto per_row = scale_rows(tape, row_sum(tape, per_entry), mask);
    term.value = scale(tape, sum_all(tape, per_row), -1.0 / static_cast<double>(n));
    return term;
}

// Double filter selecting high-quality unlabeled inliers: confident closed-set
// prediction AND unseen score below 0.5 (the 0.5 cut is fixed).
inline bool inlier_filter(const std::vector<double>& p_tilde_row, double S, double tau_p) {
    double best = 0.0;
    for (double v : p_tilde_row) best = std::max(best, v);
    return best > tau_p && S < 0.5;
}

// (1/uB) * sum_i F(u_i) * H(target_i, p_s_i) where the target is the soft
// aligned prediction, or its one-hot argmax when hard labels are requested.
inline LossTerm unlabeled_inlier_loss(Tape& tape, const OpenSetTarget& target, const TensorPtr& p_s,
                                      double tau_p, bool hard_labels) {
    if (p_s->rows() != target.p_tilde->rows() || p_s->cols() != target.p_tilde->cols()) {
        throw ShapeError("unlabeled_inlier_loss: predictions " + p_s->shape_string() +
                         " vs targets " + target.p_tilde->shape_string());
    }
    const int n = p_s->rows();
    LossTerm term;
    if (n == 0) {
        term.value = scalar_tensor(0.0);
        return term;
    }
    auto mask = make_tensor(n, 1);
    const std::vector<double> maxes = row_max(target.p_tilde);
    for (int i = 0; i < n; ++i) {
        const bool keep = maxes[i] > tau_p && target.S->at(i, 0) < 0.5;
        mask->at(i, 0) = keep ? 1.0 : 0.0;
        term.n_selected += keep ? 1 : 0;
    }
    TensorPtr labels = target.p_tilde;
    if (hard_labels) labels = one_hot(row_argmax(target.p_tilde), p_s->cols());
    auto per_entry = mul(tape, safe_log(tape, p_s), labels);
    auto per_row = scale_rows(tape, row_sum(tape, per_entry), mask);
    term.value = scale(tape, sum_all(tape, per_row), -1.0 / static_cast<double>(n));
    return term;
}

// FixMatch-style baseline objective: confidence-masked hard-label consistency
// between the (aligned) weak-view prediction and the strong-view prediction.
// Single filter only; no unseen-score cut, no extra heads.
inline LossTerm fixmatch_consistency_loss(Tape& tape, const TensorPtr& p_tilde,
                                          const TensorPtr& p_s, double tau_p) {
    if (p_s->rows() != p_tilde->rows() || p_s->cols() != p_tilde->cols()) {
        throw ShapeError("fixmatch_consistency_loss: predictions " + p_s->shape_string() +
                         " vs targets " + p_tilde->shape_string());
    }
    const int n = p_s->rows();
    LossTerm term;
    if (n == 0) {
        term.value = scalar_tensor(0.0);
        return term;
    }
    auto mask = make_tensor(n, 1);
    const std::vector<double> maxes = row_max(p_tilde);
    for (int i = 0; i < n; ++i) {
        const bool keep = maxes[i] > tau_p;
        mask->at(i, 0) = keep ? 1.0 : 0.0;
        term.n_selected += keep ? 1 : 0;
    }
    auto labels = one_hot(row_argmax(p_tilde), p_s->cols());
    auto per_entry = mul(tape, safe_log(tape, p_s), labels);
    auto per_row = scale_rows(tape, row_sum(tape, per_entry), mask);
    term.value = scale(tape, sum_all(tape, per_row), -1.0 / static_cast<double>(n));
    return term;
}

// L_overall = L_s + lambda_mb * L_mb + lambda_ui * L_ui + lambda_op * L_op.
// A zero weight removes that term exactly.
inline LossBreakdown overall_loss(Tape& tape, const TensorPtr& l_s, const TensorPtr& l_mb,
                                  const TensorPtr& l_ui, const TensorPtr& l_op, double lambda_mb,
                                  double lambda_ui, double lambda_op) {
    if (lambda_mb < 0.0 || lambda_ui < 0.0 || lambda_op < 0.0) {
        throw ConfigError("loss weights must be non-negative");
    }
    LossBreakdown out;
    out.l_s = l_s;
    out.l_mb = l_mb;
    out.l_ui = l_ui;
    out.l_op = l_op;
    auto weighted = add(tape, scale(tape, l_mb, lambda_mb),
                        add(tape, scale(tape, l_ui, lambda_ui), scale(tape, l_op, lambda_op)));
    out.l_overall = add(tape, l_s, weighted);
    return out;
}

} // namespace iomatch
