#pragma once

// Dense 2-D tensors with reverse-mode automatic differentiation.
//
// Every differentiable operation takes a Tape&. When at least one input
// requires gradients, the op appends a backward closure to the tape and the
// output requires gradients too. Tape::backward replays the closures in
// reverse execution order (a valid reverse topological order, since ops are
// recorded as they run) and accumulates gradients additively, so a tensor
// feeding several ops receives the sum of its per-path gradients.
//
// Storage is row-major, doubles only, no views. The only broadcast is adding
// a 1 x n bias row to an m x n matrix. Single-threaded per tape.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "iomatch/errors.hpp"

namespace iomatch {

// Inputs below this are clamped before log so filtering edge cases that
// produce exact-zero probabilities never yield NaN.
inline constexpr double kLogEpsilon = 1e-12;

class Tensor {
public:
    Tensor(int rows, int cols, bool requires_grad = false)
        : rows_(rows), cols_(cols), requires_grad_(requires_grad) {
        if (rows < 0 || cols < 0) {
            throw ShapeError("tensor dimensions must be non-negative, got " +
                             std::to_string(rows) + "x" + std::to_string(cols));
        }
        data_.assign(static_cast<std::size_t>(rows) * cols, 0.0);
        if (requires_grad_) grad_.assign(data_.size(), 0.0);
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool requires_grad() const { return requires_grad_; }

    double& at(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
    double at(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }

    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    std::vector<double>& grad() {
        if (!requires_grad_) throw UsageError("tensor does not track gradients");
        return grad_;
    }
    const std::vector<double>& grad() const {
        if (!requires_grad_) throw UsageError("tensor does not track gradients");
        return grad_;
    }

    double& grad_at(int r, int c) { return grad()[static_cast<std::size_t>(r) * cols_ + c]; }

    void zero_grad() {
        if (requires_grad_) std::fill(grad_.begin(), grad_.end(), 0.0);
    }

    // Scalar convenience for 1x1 loss tensors.
    double item() const {
        if (rows_ != 1 || cols_ != 1) {
            throw ShapeError("item() requires a 1x1 tensor, got " + shape_string());
        }
        return data_[0];
    }

    std::string shape_string() const {
        return std::to_string(rows_) + "x" + std::to_string(cols_);
    }

private:
    int rows_ = 0;
    int cols_ = 0;
    bool requires_grad_ = false;
    std::vector<double> data_;
    std::vector<double> grad_;
};

using TensorPtr = std::shared_ptr<Tensor>;

inline TensorPtr make_tensor(int rows, int cols, bool requires_grad = false) {
    return std::make_shared<Tensor>(rows, cols, requires_grad);
}

inline TensorPtr make_tensor(std::initializer_list<std::initializer_list<double>> rows,
                             bool requires_grad = false) {
    const int r = static_cast<int>(rows.size());
    const int c = r > 0 ? static_cast<int>(rows.begin()->size()) : 0;
    auto t = make_tensor(r, c, requires_grad);
    int i = 0;
    for (const auto& row : rows) {
        if (static_cast<int>(row.size()) != c) {
            throw ShapeError("ragged initializer: row " + std::to_string(i) + " has " +
                             std::to_string(row.size()) + " entries, expected " + std::to_string(c));
        }
        int j = 0;
        for (double v : row) t->at(i, j++) = v;
        ++i;
    }
    return t;
}

inline TensorPtr make_tensor(int rows, int cols, const std::vector<double>& flat,
                             bool requires_grad = false) {
    auto t = make_tensor(rows, cols, requires_grad);
    if (flat.size() != t->size()) {
        throw ShapeError("flat data has " + std::to_string(flat.size()) + " entries for a " +
                         t->shape_string() + " tensor");
    }
    t->values() = flat;
    return t;
}

inline TensorPtr scalar_tensor(double v) {
    auto t = make_tensor(1, 1);
    t->at(0, 0) = v;
    return t;
}

// Value copy that is cut off from gradient flow.
inline TensorPtr detach(const TensorPtr& a) {
    auto t = make_tensor(a->rows(), a->cols());
    t->values() = a->values();
    return t;
}

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::function<void()> backward_step) {
        if (consumed_) {
            throw UsageError("recording on a consumed tape; call clear() to reuse it");
        }
        steps_.push_back(std::move(backward_step));
    }

    // Seeds d(loss)/d(loss) = 1 and replays all recorded steps in reverse,
    // leaving d(loss)/d(param) in every reachable gradient buffer. The tape is
    // consumed afterwards; a second call is a usage error.
    void backward(const TensorPtr& loss) {
        if (consumed_) throw UsageError("backward called on a consumed tape");
        if (steps_.empty()) throw UsageError("backward called on an empty tape");
        if (loss->rows() != 1 || loss->cols() != 1) {
            throw ShapeError("backward requires a scalar loss, got " + loss->shape_string());
        }
        if (!loss->requires_grad()) {
            throw UsageError("loss does not depend on any tensor that requires gradients");
        }
        loss->grad()[0] = 1.0;
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
        consumed_ = true;
        steps_.clear();
    }

    void clear() {
        steps_.clear();
        consumed_ = false;
    }

    std::size_t size() const { return steps_.size(); }
    bool consumed() const { return consumed_; }

private:
    std::vector<std::function<void()>> steps_;
    bool consumed_ = false;
};

namespace detail {

inline void check_same_shape(const TensorPtr& a, const TensorPtr& b, const char* op) {
    if (a->rows() != b->rows() || a->cols() != b->cols()) {
        throw ShapeError(std::string(op) + ": shapes " + a->shape_string() + " and " +
                         b->shape_string() + " do not match");
    }
}

inline bool any_grad(const TensorPtr& a, const TensorPtr& b) {
    return a->requires_grad() || b->requires_grad();
}

} // namespace detail

inline TensorPtr matmul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    if (a->cols() != b->rows()) {
        throw ShapeError("matmul: inner dimensions disagree, " + a->shape_string() + " * " +
                         b->shape_string());
    }
    const int m = a->rows(), k = a->cols(), n = b->cols();
    const bool rg = detail::any_grad(a, b);
    auto out = make_tensor(m, n, rg);
    for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
            const double av = a->at(i, p);
            if (av == 0.0) continue;
            for (int j = 0; j < n; ++j) out->at(i, j) += av * b->at(p, j);
        }
    }
    if (rg) {
        tape.record([a, b, out, m, k, n] {
            if (a->requires_grad()) {
                // dA = dOut * B^T
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        const double g = out->grad_at(i, j);
                        if (g == 0.0) continue;
                        for (int p = 0; p < k; ++p) a->grad_at(i, p) += g * b->at(p, j);
                    }
            }
            if (b->requires_grad()) {
                // dB = A^T * dOut
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        const double av = a->at(i, p);
                        if (av == 0.0) continue;
                        for (int j = 0; j < n; ++j) b->grad_at(p, j) += av * out->grad_at(i, j);
                    }
            }
        });
    }
    return out;
}

// Elementwise sum; b may also be a 1 x n bias row added to every row of a.
inline TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    const bool bias_row = (b->rows() == 1 && a->cols() == b->cols() && a->rows() != 1);
    if (!bias_row) detail::check_same_shape(a, b, "add");
    const bool rg = detail::any_grad(a, b);
    auto out = make_tensor(a->rows(), a->cols(), rg);
    for (int i = 0; i < a->rows(); ++i)
        for (int j = 0; j < a->cols(); ++j)
            out->at(i, j) = a->at(i, j) + b->at(bias_row ? 0 : i, j);
    if (rg) {
        tape.record([a, b, out, bias_row] {
            if (a->requires_grad()) {
                auto& ga = a->grad();
                const auto& go = out->grad();
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
            }
            if (b->requires_grad()) {
                if (bias_row) {
                    for (int i = 0; i < out->rows(); ++i)
                        for (int j = 0; j < out->cols(); ++j) b->grad_at(0, j) += out->grad_at(i, j);
                } else {
                    auto& gb = b->grad();
                    const auto& go = out->grad();
                    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[i];
                }
            }
        });
    }
    return out;
}

inline TensorPtr sub(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    detail::check_same_shape(a, b, "sub");
    const bool rg = detail::any_grad(a, b);
    auto out = make_tensor(a->rows(), a->cols(), rg);
    for (std::size_t i = 0; i < a->size(); ++i) out->values()[i] = a->values()[i] - b->values()[i];
    if (rg) {
        tape.record([a, b, out] {
            const auto& go = out->grad();
            if (a->requires_grad()) {
                auto& ga = a->grad();
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
            }
            if (b->requires_grad()) {
                auto& gb = b->grad();
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= go[i];
            }
        });
    }
    return out;
}

inline TensorPtr mul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    detail::check_same_shape(a, b, "mul");
    const bool rg = detail::any_grad(a, b);
    auto out = make_tensor(a->rows(), a->cols(), rg);
    for (std::size_t i = 0; i < a->size(); ++i) out->values()[i] = a->values()[i] * b->values()[i];
    if (rg) {
        tape.record([a, b, out] {
            const auto& go = out->grad();
            if (a->requires_grad()) {
                auto& ga = a->grad();
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * b->values()[i];
            }
            if (b->requires_grad()) {
                auto& gb = b->grad();
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[i] * a->values()[i];
            }
        });
    }
    return out;
}

inline TensorPtr scale(Tape& tape, const TensorPtr& a, double s) {
    const bool rg = a->requires_grad();
    auto out = make_tensor(a->rows(), a->cols(), rg);
    for (std::size_t i = 0; i < a->size(); ++i) out->values()[i] = a->values()[i] * s;
    if (rg) {
        tape.record([a, out, s] {
            auto& ga = a->grad();
            const auto& go = out->grad();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * s;
        });
    }
    return out;
}

// Multiplies row i of a by col(i, 0). Used to apply per-sample selection masks.
inline TensorPtr scale_rows(Tape& tape, const TensorPtr& a, const TensorPtr& col) {
    if (col->cols() != 1 || col->rows() != a->rows()) {
        throw ShapeError("scale_rows: column must be " + std::to_string(a->rows()) +
                         "x1, got " + col->shape_string());
    }
    const bool rg = detail::any_grad(a, col);
    auto out = make_tensor(a->rows(), a->cols(), rg);
    for (int i = 0; i < a->rows(); ++i) {
        const double s = col->at(i, 0);
        for (int j = 0; j < a->cols(); ++j) out->at(i, j) = a->at(i, j) * s;
    }
    if (rg) {
        tape.record([a, col, out] {
            if (a->requires_grad()) {
                for (int i = 0; i < a->rows(); ++i) {
                    const double s = col->at(i, 0);
                    for (int j = 0; j < a->cols(); ++j) a->grad_at(i, j) += out->grad_at(i, j) * s;
                }
            }
            if (col->requires_grad()) {
                for (int i = 0; i < a->rows(); ++i) {
                    double acc = 0.0;
                    for (int j = 0; j < a->cols(); ++j) acc += out->grad_at(i, j) * a->at(i, j);
                    col->grad_at(i, 0) += acc;
                }
            }
        });
    }
    return out;
}

inline TensorPtr relu(Tape& tape, const TensorPtr& a) {
    const bool rg = a->requires_grad();
    auto out = make_tensor(a->rows(), a->cols(), rg);
    for (std::size_t i = 0; i < a->size(); ++i) out->values()[i] = std::max(0.0, a->values()[i]);
    if (rg) {
        tape.record([a, out] {
            auto& ga = a->grad();
            const auto& go = out->grad();
            for (std::size_t i = 0; i < ga.size(); ++i)
                if (a->values()[i] > 0.0) ga[i] += go[i];
        });
    }
    return out;
}

// log(max(x, kLogEpsilon)): finite for any finite input, flat below the clamp.
inline TensorPtr safe_log(Tape& tape, const TensorPtr& a) {
    const bool rg = a->requires_grad();
    auto out = make_tensor(a->rows(), a->cols(), rg);
    for (std::size_t i = 0; i < a->size(); ++i)
        out->values()[i] = std::log(std::max(a->values()[i], kLogEpsilon));
    if (rg) {
        tape.record([a, out] {
            auto& ga = a->grad();
            const auto& go = out->grad();
            for (std::size_t i = 0; i < ga.size(); ++i) {
                const double x = a->values()[i];
                if (x > kLogEpsilon) ga[i] += go[i] / x;
            }
        });
    }
    return out;
}

inline TensorPtr row_sum(Tape& tape, const TensorPtr& a) {
    const bool rg = a->requires_grad();
    auto out = make_tensor(a->rows(), 1, rg);
    for (int i = 0; i < a->rows(); ++i) {
        double acc = 0.0;
        for (int j = 0; j < a->cols(); ++j) acc += a->at(i, j);
        out->at(i, 0) = acc;
    }
    if (rg) {
        tape.record([a, out] {
            for (int i = 0; i < a->rows(); ++i) {
                const double g = out->grad_at(i, 0);
                for (int j = 0; j < a->cols(); ++j) a->grad_at(i, j) += g;
            }
        });
    }
    return out;
}

inline TensorPtr sum_all(Tape& tape, const TensorPtr& a) {
    const bool rg = a->requires_grad();
    auto out = make_tensor(1, 1, rg);
    double acc = 0.0;
    for (double v : a->values()) acc += v;
    out->at(0, 0) = acc;
    if (rg) {
        tape.record([a, out] {
            const double g = out->grad()[0];
            auto& ga = a->grad();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
        });
    }
    return out;
}

inline TensorPtr mean_all(Tape& tape, const TensorPtr& a) {
    if (a->size() == 0) throw ShapeError("mean_all of an empty tensor");
    return scale(tape, sum_all(tape, a), 1.0 / static_cast<double>(a->size()));
}

// Value-only helpers (not differentiated; used for masks and predictions).

inline std::vector<double> row_max(const TensorPtr& a) {
    std::vector<double> out(static_cast<std::size_t>(a->rows()));
    for (int i = 0; i < a->rows(); ++i) {
        double best = a->at(i, 0);
        for (int j = 1; j < a->cols(); ++j) best = std::max(best, a->at(i, j));
        out[i] = best;
    }
    return out;
}

// Ties break toward the lowest index.
inline std::vector<int> row_argmax(const TensorPtr& a) {
    std::vector<int> out(static_cast<std::size_t>(a->rows()));
    for (int i = 0; i < a->rows(); ++i) {
        int best = 0;
        for (int j = 1; j < a->cols(); ++j)
            if (a->at(i, j) > a->at(i, best)) best = j;
        out[i] = best;
    }
    return out;
}

// out(i, 0) = a(i, idx[i]); gradients flow only into the gathered entries.
inline TensorPtr gather(Tape& tape, const TensorPtr& a, const std::vector<int>& idx) {
    if (static_cast<int>(idx.size()) != a->rows()) {
        throw ShapeError("gather: " + std::to_string(idx.size()) + " indices for " +
                         std::to_string(a->rows()) + " rows");
    }
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= a->cols()) {
            throw DataError("gather: index " + std::to_string(idx[i]) + " at row " +
                            std::to_string(i) + " is outside [0, " + std::to_string(a->cols()) + ")");
        }
    }
    const bool rg = a->requires_grad();
    auto out = make_tensor(a->rows(), 1, rg);
    for (int i = 0; i < a->rows(); ++i) out->at(i, 0) = a->at(i, idx[i]);
    if (rg) {
        tape.record([a, out, idx] {
            for (int i = 0; i < a->rows(); ++i) a->grad_at(i, idx[i]) += out->grad_at(i, 0);
        });
    }
    return out;
}

inline TensorPtr one_hot(const std::vector<int>& labels, int num_classes) {
    auto out = make_tensor(static_cast<int>(labels.size()), num_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes) {
            throw DataError("one_hot: label " + std::to_string(labels[i]) + " at row " +
                            std::to_string(i) + " is outside [0, " + std::to_string(num_classes) + ")");
        }
        out->at(static_cast<int>(i), labels[i]) = 1.0;
    }
    return out;
}

// Row-wise softmax, computed with max subtraction so large logits cannot
// overflow. Backward uses dx = p * (g - <g, p>) per row.
inline TensorPtr softmax_rows(Tape& tape, const TensorPtr& a) {
    const bool rg = a->requires_grad();
    auto out = make_tensor(a->rows(), a->cols(), rg);
    for (int i = 0; i < a->rows(); ++i) {
        double m = a->at(i, 0);
        for (int j = 1; j < a->cols(); ++j) m = std::max(m, a->at(i, j));
        double z = 0.0;
        for (int j = 0; j < a->cols(); ++j) {
            const double e = std::exp(a->at(i, j) - m);
            out->at(i, j) = e;
            z += e;
        }
        for (int j = 0; j < a->cols(); ++j) out->at(i, j) /= z;
    }
    if (rg) {
        tape.record([a, out] {
            for (int i = 0; i < a->rows(); ++i) {
                double dot = 0.0;
                for (int j = 0; j < a->cols(); ++j) dot += out->grad_at(i, j) * out->at(i, j);
                for (int j = 0; j < a->cols(); ++j)
                    a->grad_at(i, j) += out->at(i, j) * (out->grad_at(i, j) - dot);
            }
        });
    }
    return out;
}

inline bool all_finite(const TensorPtr& a) {
    for (double v : a->values())
        if (!std::isfinite(v)) return false;
    return true;
}

// Momentum SGD over a fixed parameter list: v <- momentum * v + g,
// w <- w - lr * v, gradients zeroed after the step.
class SgdOptimizer {
public:
    SgdOptimizer(std::vector<TensorPtr> params, double lr, double momentum)
        : params_(std::move(params)), lr_(lr), momentum_(momentum) {
        if (lr <= 0.0) throw ConfigError("learning rate must be positive, got " + std::to_string(lr));
        if (momentum < 0.0 || momentum >= 1.0) {
            throw ConfigError("momentum must lie in [0, 1), got " + std::to_string(momentum));
        }
        velocity_.reserve(params_.size());
        for (const auto& p : params_) {
            if (!p->requires_grad()) {
                throw UsageError("optimizer parameter has no gradient buffer");
            }
            velocity_.emplace_back(p->size(), 0.0);
        }
    }

    void step() {
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto& w = params_[k]->values();
            const auto& g = params_[k]->grad();
            auto& v = velocity_[k];
            for (std::size_t i = 0; i < w.size(); ++i) {
                v[i] = momentum_ * v[i] + g[i];
                w[i] -= lr_ * v[i];
            }
            params_[k]->zero_grad();
        }
    }

    void set_lr(double lr) {
        if (lr < 0.0) throw ConfigError("learning rate must be non-negative, got " + std::to_string(lr));
        lr_ = lr;
    }
    double lr() const { return lr_; }
    double momentum() const { return momentum_; }

private:
    std::vector<TensorPtr> params_;
    std::vector<std::vector<double>> velocity_;
    double lr_;
    double momentum_;
};

// Compares tape gradients of a deterministic scalar function against central
// finite differences, coordinate by coordinate. Returns the maximum relative
// error with denominator max(|analytic|, |numeric|, 1e-8).
inline double finite_difference_check(const std::function<TensorPtr(Tape&)>& loss_fn,
                                      const std::vector<TensorPtr>& params,
                                      double eps = 1e-5) {
    for (const auto& p : params) p->zero_grad();
    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        auto loss = loss_fn(tape);
        // A loss with no differentiable dependence (constant function) simply
        // leaves every analytic gradient at zero.
        if (loss->requires_grad()) tape.backward(loss);
        analytic.reserve(params.size());
        for (const auto& p : params) analytic.push_back(p->requires_grad() ? p->grad()
                                                                           : std::vector<double>(p->size(), 0.0));
    }
    auto eval = [&loss_fn]() {
        Tape tape;
        return loss_fn(tape)->item();
    };
    double max_rel = 0.0;
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& w = params[k]->values();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double saved = w[i];
            w[i] = saved + eps;
            const double up = eval();
            w[i] = saved - eps;
            const double down = eval();
            w[i] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic[k][i];
            const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
            max_rel = std::max(max_rel, std::fabs(a - numeric) / denom);
        }
    }
    return max_rel;
}

} // namespace iomatch
