#pragma once

#include <cstdint>
#include <string>

#include "iomatch/data.hpp"
#include "iomatch/errors.hpp"
#include "iomatch/network.hpp"

namespace iomatch {

enum class TrainMode { supervised, fixmatch, iomatch };

inline std::string to_string(TrainMode mode) {
    switch (mode) {
        case TrainMode::supervised: return "supervised";
        case TrainMode::fixmatch: return "fixmatch";
        case TrainMode::iomatch: return "iomatch";
    }
    return "unknown";
}

inline TrainMode parse_mode(const std::string& name) {
    if (name == "supervised") return TrainMode::supervised;
    if (name == "fixmatch") return TrainMode::fixmatch;
    if (name == "iomatch") return TrainMode::iomatch;
    throw ConfigError("unknown mode '" + name + "' (expected iomatch, fixmatch, or supervised)");
}

struct TrainConfig {
    TrainMode mode = TrainMode::iomatch;
    int batch_size = 32; // B
    int mu = 4;          // unlabeled batch is mu * B
    double tau_p = 0.95;
    double tau_q = 0.5;
    double lambda_mb = 1.0;
    double lambda_ui = 1.0;
    double lambda_op = 1.0;
    int epochs = 30;          // N_e
    int iters_per_epoch = 64; // N_i
    double lr = 0.03;
    double momentum = 0.9;
    bool cosine_decay = true;
    bool da_enabled = false;
    bool hard_labels = false;
    bool eval_closed_with_open_head = false;
    std::uint64_t seed = 1;
    AugmentSpec augment;
    NetworkDims dims;

    void validate() const {
        auto in_unit = [](double v, const char* name) {
            if (v < 0.0 || v > 1.0) {
                throw ConfigError(std::string(name) + " must lie in [0, 1], got " + std::to_string(v));
            }
        };
        in_unit(tau_p, "tau_p");
        in_unit(tau_q, "tau_q");
        if (lambda_mb < 0.0) throw ConfigError("lambda_mb must be >= 0");
        if (lambda_ui < 0.0) throw ConfigError("lambda_ui must be >= 0");
        if (lambda_op < 0.0) throw ConfigError("lambda_op must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
        if (mu < 1) throw ConfigError("mu must be at least 1");
        if (epochs < 1) throw ConfigError("epochs must be at least 1");
        if (iters_per_epoch < 1) throw ConfigError("iters_per_epoch must be at least 1");
        if (lr <= 0.0) throw ConfigError("lr must be positive");
        if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
        augment.validate();
    }
};

} // namespace iomatch
