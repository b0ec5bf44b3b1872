#pragma once

// Open-set SSL task construction: synthetic Gaussian-mixture tasks, CSV
// feature-file ingestion, the weak/strong feature-space augmentations, and
// batch sampling with the B / mu*B structure.
//
// Ground-truth labels of unlabeled samples are kept for evaluation only; the
// trainer consumes LabeledBatch (features + labels) and UnlabeledBatch
// (features only), so no trainer-visible structure carries hidden truth.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "iomatch/errors.hpp"
#include "iomatch/tensor.hpp"

namespace iomatch {

inline constexpr int kUnknownLabel = -1;

struct AugmentSpec {
    double weak_sigma = 0.1;       // additive Gaussian noise scale, weak view
    double strong_sigma = 0.5;     // noise scale, strong view
    double strong_mask_frac = 0.25; // fraction of coordinates zeroed per strong sample

    void validate() const {
        if (weak_sigma < 0.0) throw ConfigError("weak_sigma must be >= 0");
        if (strong_sigma < weak_sigma) {
            throw ConfigError("strong_sigma must be >= weak_sigma; weak must stay the milder view");
        }
        if (strong_mask_frac < 0.0 || strong_mask_frac >= 1.0) {
            throw ConfigError("strong_mask_frac must lie in [0, 1)");
        }
    }
};

enum class AugmentStrength { weak, strong };

struct LabeledBatch {
    TensorPtr x;
    std::vector<int> y; // canonical seen-class indices in [0, K)
};

struct UnlabeledBatch {
    TensorPtr x;
};

struct OpenSetDataset {
    int n = 0;
    int input_dim = 0;
    std::vector<double> features;     // n x input_dim, row-major
    std::vector<int> raw_labels;      // original class ids; kUnknownLabel allowed
    std::vector<int> seen_class_ids;  // sorted; canonical index = position
    std::vector<int> unseen_class_ids;
    std::vector<int> labeled_idx;
    std::vector<int> unlabeled_idx;
    std::vector<int> test_idx;

    int num_seen() const { return static_cast<int>(seen_class_ids.size()); }

    // Canonical open-set label: seen-class index in [0, K), K for any unseen
    // class, kUnknownLabel when the ground truth is unknown.
    int open_truth(int row) const {
        const int raw = raw_labels[row];
        if (raw == kUnknownLabel) return kUnknownLabel;
        const auto it = std::lower_bound(seen_class_ids.begin(), seen_class_ids.end(), raw);
        if (it != seen_class_ids.end() && *it == raw) {
            return static_cast<int>(it - seen_class_ids.begin());
        }
        return num_seen();
    }

    TensorPtr rows(const std::vector<int>& idx) const {
        auto out = make_tensor(static_cast<int>(idx.size()), input_dim);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const double* src = features.data() + static_cast<std::size_t>(idx[i]) * input_dim;
            std::copy(src, src + input_dim, out->values().begin() + i * input_dim);
        }
        return out;
    }

    std::vector<int> open_truth_for(const std::vector<int>& idx) const {
        std::vector<int> out(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) out[i] = open_truth(idx[i]);
        return out;
    }
};

struct SyntheticTaskSpec {
    std::uint64_t seed = 1;
    int k_seen = 4;
    int k_unseen = 4;
    int input_dim = 16;
    int n_per_class = 500;
    int n_labeled = 4;
    double class_sep = 3.0;
};

namespace detail {

// Class means sit on the sphere of radius class_sep. Candidates are redrawn
// (bounded tries) until every pairwise cosine stays below 0.5, which keeps
// the realized separations close to class_sep * sqrt(2) across seeds.
inline std::vector<std::vector<double>> draw_class_means(int k_total, int dim, double sep,
                                                         std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<std::vector<double>> means;
    means.reserve(k_total);
    for (int c = 0; c < k_total; ++c) {
        std::vector<double> best;
        double best_worst_cos = 2.0;
        for (int attempt = 0; attempt < 256; ++attempt) {
            std::vector<double> cand(dim);
            double norm2 = 0.0;
            for (double& v : cand) {
                v = normal(rng);
                norm2 += v * v;
            }
            const double norm = std::sqrt(norm2);
            if (norm < 1e-12) continue;
            for (double& v : cand) v *= sep / norm;
            double worst_cos = -1.0;
            for (const auto& m : means) {
                double dot = 0.0;
                for (int j = 0; j < dim; ++j) dot += cand[j] * m[j];
                worst_cos = std::max(worst_cos, dot / (sep * sep));
            }
            if (worst_cos < best_worst_cos) {
                best_worst_cos = worst_cos;
                best = cand;
            }
            if (worst_cos < 0.5) break;
        }
        means.push_back(std::move(best));
    }
    return means;
}

} // namespace detail

inline OpenSetDataset make_gaussian_mixture_task(const SyntheticTaskSpec& spec) {
    if (spec.k_seen < 2) throw ConfigError("k_seen must be at least 2");
    if (spec.k_unseen < 0) throw ConfigError("k_unseen must be non-negative");
    if (spec.input_dim < 1) throw ConfigError("input_dim must be positive");
    if (spec.class_sep <= 0.0) throw ConfigError("class_sep must be positive");
    const int n_test = spec.n_per_class / 5; // 20% per-class holdout
    if (spec.n_per_class < 2 || n_test < 1) {
        throw ConfigError("n_per_class too small for a 20% test holdout");
    }
    if (spec.n_labeled < 1 || spec.n_labeled > spec.n_per_class - n_test) {
        throw ConfigError("n_labeled must lie in [1, n_per_class - test holdout], got " +
                          std::to_string(spec.n_labeled));
    }
    const int k_total = spec.k_seen + spec.k_unseen;
    std::mt19937_64 rng(spec.seed);
    const auto means = detail::draw_class_means(k_total, spec.input_dim, spec.class_sep, rng);

    OpenSetDataset ds;
    ds.n = k_total * spec.n_per_class;
    ds.input_dim = spec.input_dim;
    ds.features.resize(static_cast<std::size_t>(ds.n) * spec.input_dim);
    ds.raw_labels.resize(ds.n);
    for (int c = 0; c < spec.k_seen; ++c) ds.seen_class_ids.push_back(c);
    for (int c = spec.k_seen; c < k_total; ++c) ds.unseen_class_ids.push_back(c);

    std::normal_distribution<double> normal(0.0, 1.0);
    for (int c = 0; c < k_total; ++c) {
        for (int i = 0; i < spec.n_per_class; ++i) {
            const int row = c * spec.n_per_class + i;
            ds.raw_labels[row] = c;
            double* dst = ds.features.data() + static_cast<std::size_t>(row) * spec.input_dim;
            for (int j = 0; j < spec.input_dim; ++j) dst[j] = means[c][j] + normal(rng);
        }
    }
    for (int c = 0; c < k_total; ++c) {
        std::vector<int> order(spec.n_per_class);
        std::iota(order.begin(), order.end(), c * spec.n_per_class);
        std::shuffle(order.begin(), order.end(), rng);
        for (int i = 0; i < n_test; ++i) ds.test_idx.push_back(order[i]);
        int next = n_test;
        if (c < spec.k_seen) {
            for (int i = 0; i < spec.n_labeled; ++i) ds.labeled_idx.push_back(order[next++]);
        }
        for (; next < spec.n_per_class; ++next) ds.unlabeled_idx.push_back(order[next]);
    }
    return ds;
}

namespace detail {

struct CsvRow {
    int label;
    std::vector<double> feats;
};

inline CsvRow parse_csv_line(const std::string& line, const std::string& file, int line_no) {
    CsvRow row;
    std::size_t pos = 0;
    bool first = true;
    while (pos <= line.size()) {
        std::size_t comma = line.find(',', pos);
        if (comma == std::string::npos) comma = line.size();
        const char* begin = line.data() + pos;
        const char* end = line.data() + comma;
        while (begin < end && (*begin == ' ' || *begin == '\t')) ++begin;
        const char* trimmed_end = end;
        while (trimmed_end > begin &&
               (*(trimmed_end - 1) == ' ' || *(trimmed_end - 1) == '\t' || *(trimmed_end - 1) == '\r'))
            --trimmed_end;
        if (begin == trimmed_end) {
            throw ParseError(file + ":" + std::to_string(line_no) + ": empty field");
        }
        if (first) {
            long value = 0;
            auto [ptr, ec] = std::from_chars(begin, trimmed_end, value);
            if (ec != std::errc() || ptr != trimmed_end) {
                throw ParseError(file + ":" + std::to_string(line_no) +
                                 ": label must be an integer, got '" +
                                 std::string(begin, trimmed_end) + "'");
            }
            row.label = static_cast<int>(value);
            first = false;
        } else {
            double value = 0.0;
            auto [ptr, ec] = std::from_chars(begin, trimmed_end, value);
            if (ec != std::errc() || ptr != trimmed_end || !std::isfinite(value)) {
                throw ParseError(file + ":" + std::to_string(line_no) +
                                 ": non-numeric feature '" + std::string(begin, trimmed_end) + "'");
            }
            row.feats.push_back(value);
        }
        pos = comma + 1;
        if (comma == line.size()) break;
    }
    return row;
}

inline std::vector<CsvRow> read_csv(const std::string& path, int& dim, bool allow_unknown) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open " + path);
    std::vector<CsvRow> rows;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        CsvRow row = parse_csv_line(line, path, line_no);
        if (row.label < 0 && !(allow_unknown && row.label == kUnknownLabel)) {
            throw ParseError(path + ":" + std::to_string(line_no) + ": label " +
                             std::to_string(row.label) + " not allowed here");
        }
        if (dim < 0) {
            dim = static_cast<int>(row.feats.size());
            if (dim == 0) {
                throw ParseError(path + ":" + std::to_string(line_no) + ": row has no features");
            }
        } else if (static_cast<int>(row.feats.size()) != dim) {
            throw ParseError(path + ":" + std::to_string(line_no) + ": row has " +
                             std::to_string(row.feats.size()) + " features, expected " +
                             std::to_string(dim));
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

inline void append_rows(OpenSetDataset& ds, const std::vector<CsvRow>& rows, std::vector<int>& idx) {
    for (const auto& row : rows) {
        idx.push_back(ds.n);
        ds.raw_labels.push_back(row.label);
        ds.features.insert(ds.features.end(), row.feats.begin(), row.feats.end());
        ++ds.n;
    }
}

inline std::string format_double(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    (void)ec;
    return std::string(buf, ptr);
}

} // namespace detail

// Files are header-free lines `label,f1,...,fD`. Seen classes are the
// distinct labels of the labeled file; unlabeled/test labels outside that set
// become outlier ground truth, and -1 in the unlabeled file marks unknown
// ground truth.
inline OpenSetDataset load_feature_csv(const std::string& labeled_path,
                                       const std::string& unlabeled_path,
                                       const std::string& test_path) {
    int dim = -1;
    const auto labeled = detail::read_csv(labeled_path, dim, false);
    if (labeled.empty()) throw ParseError(labeled_path + ": labeled file is empty");
    const auto unlabeled = detail::read_csv(unlabeled_path, dim, true);
    const auto test = detail::read_csv(test_path, dim, true);

    OpenSetDataset ds;
    ds.input_dim = dim;
    std::vector<int> seen;
    for (const auto& row : labeled) seen.push_back(row.label);
    std::sort(seen.begin(), seen.end());
    seen.erase(std::unique(seen.begin(), seen.end()), seen.end());
    ds.seen_class_ids = seen;
    if (ds.num_seen() < 2) {
        throw DataError(labeled_path + ": needs at least 2 distinct labeled classes, found " +
                        std::to_string(ds.num_seen()));
    }
    detail::append_rows(ds, labeled, ds.labeled_idx);
    detail::append_rows(ds, unlabeled, ds.unlabeled_idx);
    detail::append_rows(ds, test, ds.test_idx);

    std::vector<int> others;
    for (const auto& row : unlabeled)
        if (row.label >= 0) others.push_back(row.label);
    for (const auto& row : test)
        if (row.label >= 0) others.push_back(row.label);
    std::sort(others.begin(), others.end());
    others.erase(std::unique(others.begin(), others.end()), others.end());
    for (int id : others)
        if (!std::binary_search(seen.begin(), seen.end(), id)) ds.unseen_class_ids.push_back(id);
    return ds;
}

// Writes the three split files back out (ground-truth labels included, for
// later evaluation). Doubles use the shortest round-trip representation, so
// save followed by load reproduces the matrices exactly.
inline void save_feature_csv(const OpenSetDataset& ds, const std::string& labeled_path,
                             const std::string& unlabeled_path, const std::string& test_path) {
    auto write = [&ds](const std::string& path, const std::vector<int>& idx) {
        std::ofstream out(path);
        if (!out) throw DataError("cannot open " + path + " for writing");
        for (int row : idx) {
            out << ds.raw_labels[row];
            const double* src = ds.features.data() + static_cast<std::size_t>(row) * ds.input_dim;
            for (int j = 0; j < ds.input_dim; ++j) out << ',' << detail::format_double(src[j]);
            out << '\n';
        }
    };
    write(labeled_path, ds.labeled_idx);
    write(unlabeled_path, ds.unlabeled_idx);
    write(test_path, ds.test_idx);
}

// Weak: additive Gaussian noise. Strong: stronger noise, then a fixed
// fraction of coordinates zeroed per sample, chosen uniformly.
inline TensorPtr augment(const TensorPtr& x, const AugmentSpec& spec, AugmentStrength strength,
                         std::mt19937_64& rng) {
    spec.validate();
    auto out = detach(x);
    const double sigma = strength == AugmentStrength::weak ? spec.weak_sigma : spec.strong_sigma;
    if (sigma > 0.0) {
        std::normal_distribution<double> noise(0.0, sigma);
        for (double& v : out->values()) v += noise(rng);
    }
    if (strength == AugmentStrength::strong && spec.strong_mask_frac > 0.0) {
        const int dim = x->cols();
        const int n_mask = static_cast<int>(spec.strong_mask_frac * dim);
        if (n_mask > 0) {
            std::vector<int> coords(dim);
            for (int i = 0; i < out->rows(); ++i) {
                std::iota(coords.begin(), coords.end(), 0);
                std::shuffle(coords.begin(), coords.end(), rng);
                for (int j = 0; j < n_mask; ++j) out->at(i, coords[j]) = 0.0;
            }
        }
    }
    return out;
}

// Uniform sampling with replacement from each pool: B labeled rows and mu*B
// unlabeled rows per call.
inline std::pair<LabeledBatch, UnlabeledBatch> next_batch(const OpenSetDataset& ds, int batch_size,
                                                          int mu, std::mt19937_64& rng) {
    if (batch_size < 1 || mu < 1) throw ConfigError("batch_size and mu must be at least 1");
    if (ds.labeled_idx.empty()) throw ConfigError("labeled pool is empty");
    if (ds.unlabeled_idx.empty()) throw ConfigError("unlabeled pool is empty");
    std::uniform_int_distribution<std::size_t> pick_labeled(0, ds.labeled_idx.size() - 1);
    std::uniform_int_distribution<std::size_t> pick_unlabeled(0, ds.unlabeled_idx.size() - 1);

    std::vector<int> lab(batch_size);
    for (int i = 0; i < batch_size; ++i) lab[i] = ds.labeled_idx[pick_labeled(rng)];
    std::vector<int> unlab(static_cast<std::size_t>(mu) * batch_size);
    for (auto& v : unlab) v = ds.unlabeled_idx[pick_unlabeled(rng)];

    LabeledBatch lb{ds.rows(lab), {}};
    lb.y.resize(lab.size());
    for (std::size_t i = 0; i < lab.size(); ++i) {
        lb.y[i] = ds.open_truth(lab[i]);
        if (lb.y[i] < 0 || lb.y[i] >= ds.num_seen()) {
            throw DataError("labeled row " + std::to_string(lab[i]) + " is not from a seen class");
        }
    }
    UnlabeledBatch ub{ds.rows(unlab)};
    return {std::move(lb), std::move(ub)};
}

} // namespace iomatch
