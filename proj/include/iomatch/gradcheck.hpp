#pragma once

// Finite-difference verification of every loss gradient on small random
// networks and batches. Shared by the `gradcheck` CLI verb and the test
// suites. Targets and masks are frozen at the base point, matching their
// constant role during backpropagation.

#include <algorithm>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "iomatch/network.hpp"
#include "iomatch/objectives.hpp"
#include "iomatch/tensor.hpp"

namespace iomatch {

struct GradCheckCase {
    std::string name;
    double max_rel_error = 0.0;
};

inline constexpr double kGradCheckTolerance = 1e-4;

namespace detail {

inline TensorPtr random_uniform(int rows, int cols, std::mt19937_64& rng, double lo = -1.0,
                                double hi = 1.0) {
    auto t = make_tensor(rows, cols);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& v : t->values()) v = dist(rng);
    return t;
}

inline double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

} // namespace detail

inline std::vector<GradCheckCase> run_gradient_suite(std::uint64_t seed = 7, double eps = 1e-5) {
    std::vector<GradCheckCase> results;
    {
        std::mt19937_64 rng(seed);
        auto w = make_tensor(2, 2, true);
        for (double& v : w->values()) v = std::uniform_real_distribution<double>(-2.0, 2.0)(rng);
        auto quad = [w](Tape& t) { return sum_all(t, mul(t, w, w)); };
        results.push_back({"quadratic", finite_difference_check(quad, {w}, eps)});
    }

    for (int k : {2, 3, 5}) {
        NetworkDims dims;
        dims.input_dim = 5;
        dims.encoder_hidden = {6};
        dims.feature_dim = 4;
        dims.projector_hidden = {4};
        dims.projection_dim = 3;
        NetworkParams net = NetworkParams::init(seed + k, dims, k);
        const auto params = net.parameters();
        const std::string suffix = "_k" + std::to_string(k);

        std::mt19937_64 rng(seed * 977 + k);
        const int batch = 4, unlabeled = 8; // B=4, mu=2
        auto x_l = detail::random_uniform(batch, dims.input_dim, rng);
        std::vector<int> y(batch);
        std::uniform_int_distribution<int> pick(0, k - 1);
        for (int& v : y) v = pick(rng);
        auto x_w = detail::random_uniform(unlabeled, dims.input_dim, rng);
        auto x_s = detail::random_uniform(unlabeled, dims.input_dim, rng);

        // Freeze targets at the base point; thresholds at the median row max
        // so each mask keeps some rows and drops others.
        OpenSetTarget target;
        double tau_q, tau_p;
        {
            Tape t0;
            const ForwardOutputs out_w = forward(t0, net, x_w);
            target = open_set_targets(detach(out_w.p), detach(out_w.o));
            tau_q = detail::median(row_max(target.q_tilde));
            tau_p = detail::median(row_max(target.p_tilde));
        }

        auto check = [&](const std::string& name, const std::function<TensorPtr(Tape&)>& fn) {
            results.push_back({name + suffix, finite_difference_check(fn, params, eps)});
        };
        check("supervised", [&](Tape& t) {
            return supervised_loss(t, forward(t, net, x_l).p, y);
        });
        check("multi_binary", [&](Tape& t) {
            return multi_binary_loss(t, forward(t, net, x_l).o, y);
        });
        check("open_set", [&](Tape& t) {
            return open_set_loss(t, target, forward(t, net, x_s).q_open, tau_q).value;
        });
        check("unlabeled_inlier_soft", [&](Tape& t) {
            return unlabeled_inlier_loss(t, target, forward(t, net, x_s).p, tau_p, false).value;
        });
        check("unlabeled_inlier_hard", [&](Tape& t) {
            return unlabeled_inlier_loss(t, target, forward(t, net, x_s).p, tau_p, true).value;
        });
        check("fixmatch_consistency", [&](Tape& t) {
            return fixmatch_consistency_loss(t, target.p_tilde, forward(t, net, x_s).p, tau_p).value;
        });
        check("overall", [&](Tape& t) {
            const ForwardOutputs out_l = forward(t, net, x_l);
            const ForwardOutputs out_s = forward(t, net, x_s);
            auto l_s = supervised_loss(t, out_l.p, y);
            auto l_mb = multi_binary_loss(t, out_l.o, y);
            auto l_op = open_set_loss(t, target, out_s.q_open, tau_q).value;
            auto l_ui = unlabeled_inlier_loss(t, target, out_s.p, tau_p, false).value;
            return overall_loss(t, l_s, l_mb, l_ui, l_op, 1.0, 1.0, 1.0).l_overall;
        });
    }
    return results;
}

inline bool gradient_suite_passes(const std::vector<GradCheckCase>& results,
                                  double tolerance = kGradCheckTolerance) {
    for (const auto& c : results)
        if (!(c.max_rel_error < tolerance)) return false;
    return true;
}

} // namespace iomatch
