#pragma once

// Inference rules and metrics: closed-set accuracy via the closed-set head,
// balanced accuracy over K+1 classes via the open-set head, and the
// utilization rate of open-set unlabeled data (selected correct pseudo-labels
// over all unlabeled samples). Everything here is read-only over parameters
// and data.

#include <iostream>
#include <vector>

#include "iomatch/config.hpp"
#include "iomatch/objectives.hpp"

namespace iomatch {

struct MetricsRecord {
    int epoch = 0;
    double closed_acc = 0.0;
    double open_ba = 0.0;
    std::vector<double> per_class_recall; // K+1 entries; NaN-free (absent classes excluded)
    double util_rate = 0.0;
    double l_s = 0.0, l_mb = 0.0, l_ui = 0.0, l_op = 0.0, l_overall = 0.0;
    double n_selected_inliers = 0.0, n_selected_open = 0.0; // per-iteration means
};

// argmax over p = phi(f(x)); ties break to the lowest index. When
// via_open_head is set, uses the open head's first K entries instead.
inline std::vector<int> predict_closed(const NetworkParams& net, const TensorPtr& x,
                                       bool via_open_head = false) {
    Tape tape;
    const ForwardOutputs out = forward(tape, net, x);
    if (!via_open_head) return row_argmax(out.p);
    const int k = net.num_seen();
    std::vector<int> pred(static_cast<std::size_t>(x->rows()));
    for (int i = 0; i < x->rows(); ++i) {
        int best = 0;
        for (int j = 1; j < k; ++j)
            if (out.q_open->at(i, j) > out.q_open->at(i, best)) best = j;
        pred[i] = best;
    }
    return pred;
}

// argmax over q = psi(g(f(x))); index K means outlier.
inline std::vector<int> predict_open(const NetworkParams& net, const TensorPtr& x) {
    Tape tape;
    return row_argmax(forward(tape, net, x).q_open);
}

// Mean per-class recall. A class absent from the truth is excluded from the
// mean (with a warning) rather than contributing 0/0. per_class_recall, when
// provided, receives one entry per class with 0 for absent classes.
inline double balanced_accuracy(const std::vector<int>& pred, const std::vector<int>& truth,
                                int n_classes, std::vector<double>* per_class_recall = nullptr) {
    if (pred.size() != truth.size()) {
        throw ShapeError("balanced_accuracy: " + std::to_string(pred.size()) + " predictions vs " +
                         std::to_string(truth.size()) + " truths");
    }
    std::vector<long> count(static_cast<std::size_t>(n_classes), 0);
    std::vector<long> correct(static_cast<std::size_t>(n_classes), 0);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const int t = truth[i];
        if (t < 0 || t >= n_classes) {
            throw DataError("balanced_accuracy: truth label " + std::to_string(t) +
                            " outside [0, " + std::to_string(n_classes) + ")");
        }
        ++count[t];
        if (pred[i] == t) ++correct[t];
    }
    if (per_class_recall) per_class_recall->assign(static_cast<std::size_t>(n_classes), 0.0);
    double sum = 0.0;
    int present = 0;
    for (int k = 0; k < n_classes; ++k) {
        if (count[k] == 0) {
            std::cerr << "balanced_accuracy: class " << k << " absent from truth, excluded\n";
            continue;
        }
        const double recall = static_cast<double>(correct[k]) / count[k];
        if (per_class_recall) (*per_class_recall)[k] = recall;
        sum += recall;
        ++present;
    }
    return present > 0 ? sum / present : 0.0;
}

// |{i : selected_i and pseudo_i == truth_i}| / n_unlabeled. The denominator
// is the full unlabeled pool; unknown ground truth (-1) never counts correct.
inline double utilization_rate(const std::vector<char>& selected, const std::vector<int>& pseudo,
                               const std::vector<int>& truth, int n_unlabeled) {
    if (selected.size() != pseudo.size() || pseudo.size() != truth.size()) {
        throw ShapeError("utilization_rate: mask/pseudo/truth lengths disagree");
    }
    if (n_unlabeled <= 0) return 0.0;
    long hits = 0;
    for (std::size_t i = 0; i < selected.size(); ++i) {
        if (selected[i] && truth[i] != kUnknownLabel && pseudo[i] == truth[i]) ++hits;
    }
    return static_cast<double>(hits) / n_unlabeled;
}

// Per-epoch evaluation pass: closed-set accuracy on seen-class test rows,
// balanced accuracy on all test rows, and the utilization rate over the full
// unlabeled pool using the mode's own selection rule. The alignment state is
// read, never updated.
inline MetricsRecord evaluate_epoch(const NetworkParams& net, const OpenSetDataset& ds,
                                    const TrainConfig& cfg, const AlignmentState& align,
                                    int epoch) {
    MetricsRecord rec;
    rec.epoch = epoch;
    const int k = ds.num_seen();

    std::vector<int> closed_rows;
    std::vector<int> closed_truth;
    std::vector<int> open_rows;
    std::vector<int> open_truth;
    for (int row : ds.test_idx) {
        const int t = ds.open_truth(row);
        if (t == kUnknownLabel) continue;
        open_rows.push_back(row);
        open_truth.push_back(t);
        if (t < k) {
            closed_rows.push_back(row);
            closed_truth.push_back(t);
        }
    }
    if (!closed_rows.empty()) {
        const auto pred = predict_closed(net, ds.rows(closed_rows), cfg.eval_closed_with_open_head);
        long hit = 0;
        for (std::size_t i = 0; i < pred.size(); ++i)
            if (pred[i] == closed_truth[i]) ++hit;
        rec.closed_acc = static_cast<double>(hit) / pred.size();
    }
    if (!open_rows.empty()) {
        const auto pred = predict_open(net, ds.rows(open_rows));
        rec.open_ba = balanced_accuracy(pred, open_truth, k + 1, &rec.per_class_recall);
    }

    if (cfg.mode != TrainMode::supervised && !ds.unlabeled_idx.empty()) {
        const auto x = ds.rows(ds.unlabeled_idx);
        Tape tape;
        const ForwardOutputs out = forward(tape, net, x);
        auto p_w = detach(out.p);
        auto p_tilde = cfg.da_enabled ? apply_alignment(p_w, align) : p_w;
        const int n = x->rows();
        std::vector<char> selected(static_cast<std::size_t>(n), 0);
        std::vector<int> pseudo(static_cast<std::size_t>(n), 0);
        if (cfg.mode == TrainMode::iomatch) {
            const OpenSetTarget target = open_set_targets(p_tilde, detach(out.o));
            const auto maxes = row_max(target.q_tilde);
            const auto labels = row_argmax(target.q_tilde);
            for (int i = 0; i < n; ++i) {
                selected[i] = maxes[i] > cfg.tau_q ? 1 : 0;
                pseudo[i] = labels[i];
            }
        } else {
            const auto maxes = row_max(p_tilde);
            const auto labels = row_argmax(p_tilde);
            for (int i = 0; i < n; ++i) {
                selected[i] = maxes[i] > cfg.tau_p ? 1 : 0;
                pseudo[i] = labels[i];
            }
        }
        rec.util_rate = utilization_rate(selected, pseudo, ds.open_truth_for(ds.unlabeled_idx), n);
    }
    return rec;
}

} // namespace iomatch
