#pragma once

// Local training loops: Adam with bias correction, global-norm gradient
// clipping, and one-epoch passes for the pre-training (MLM + NSP) and
// fine-tuning (token-level NER cross-entropy) objectives. Everything is
// deterministic given (params, data, config seed).

#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "silobert/data.hpp"
#include "silobert/errors.hpp"
#include "silobert/model.hpp"
#include "silobert/rng.hpp"
#include "silobert/tensor.hpp"

namespace silobert {

struct TrainerConfig {
    double learning_rate = 2e-5;
    std::size_t batch_size = 32;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double max_grad_norm = 1.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (learning_rate <= 0.0) {
            throw ConfigError("trainer config: learning_rate must be > 0");
        }
        if (batch_size == 0) {
            throw ConfigError("trainer config: batch_size must be >= 1");
        }
    }
};

/// First/second moment estimates, one pair of buffers per parameter in
/// ParamSet order.
struct AdamState {
    std::size_t step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;

    explicit AdamState(const ParamSet& params) {
        m.reserve(params.size());
        v.reserve(params.size());
        for (const auto& [name, t] : params.entries()) {
            m.emplace_back(t.numel(), 0.0);
            v.emplace_back(t.numel(), 0.0);
        }
    }
};

/// Scales all gradients so their global L2 norm does not exceed max_norm.
/// Returns the pre-clip norm.
inline double clip_global_norm(ParamSet& params, double max_norm) {
    double sq = 0.0;
    for (auto& [name, t] : params.entries()) {
        if (!t.has_grad()) continue;
        for (double g : t.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double scale = max_norm / norm;
        for (auto& [name, t] : params.entries()) {
            if (!t.has_grad()) continue;
            for (double& g : t.grad()) g *= scale;
        }
    }
    return norm;
}

/// One Adam update from the gradients accumulated in params. Clips at
/// config.max_grad_norm first, then applies the bias-corrected update.
inline void adam_step(ParamSet& params, AdamState& state,
                      const TrainerConfig& config) {
    for (const auto& [name, t] : params.entries()) {
        if (!t.has_grad()) continue;
        for (double g : t.grad()) {
            if (!std::isfinite(g)) {
                throw DivergenceError("non-finite gradient in " + name);
            }
        }
    }
    clip_global_norm(params, config.max_grad_norm);
    ++state.step;
    const double bc1 =
        1.0 - std::pow(config.beta1, static_cast<double>(state.step));
    const double bc2 =
        1.0 - std::pow(config.beta2, static_cast<double>(state.step));
    std::size_t index = 0;
    for (auto& [name, t] : params.entries()) {
        auto& m = state.m[index];
        auto& v = state.v[index];
        ++index;
        auto data = t.data();
        if (!t.has_grad()) {
            for (std::size_t i = 0; i < m.size(); ++i) {
                m[i] *= config.beta1;
                v[i] *= config.beta2;
            }
            continue;
        }
        auto grad = t.grad();
        for (std::size_t i = 0; i < data.size(); ++i) {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * grad[i];
            v[i] = config.beta2 * v[i] +
                   (1.0 - config.beta2) * grad[i] * grad[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            data[i] -= config.learning_rate * mhat /
                       (std::sqrt(vhat) + config.eps);
        }
    }
}

struct EpochResult {
    double mean_loss = 0.0;
    double mean_mlm = 0.0;
    double mean_nsp = 0.0;
};

namespace detail {

inline void check_finite_loss(double loss, std::size_t step) {
    if (!std::isfinite(loss)) {
        throw DivergenceError("non-finite loss at step " +
                              std::to_string(step));
    }
}

inline std::vector<std::size_t> shuffled_indices(std::size_t n,
                                                 std::uint64_t seed) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(order);
    return order;
}

}  // namespace detail

/// One seeded-shuffled pass over MLM/NSP examples. Optimizer state lives
/// for the duration of the epoch only (it is reset at every federated
/// broadcast, and the centralized loop mirrors that policy exactly).
inline EpochResult train_epoch_pretrain(ParamSet& params,
                                        const ModelConfig& model_cfg,
                                        std::span<const PretrainExample> data,
                                        const TrainerConfig& config) {
    config.validate();
    if (data.empty()) throw ContractError("train_epoch_pretrain: no data");
    const auto order = detail::shuffled_indices(data.size(), config.seed);
    AdamState state(params);
    EpochResult result;
    std::size_t step = 0;
    for (std::size_t begin = 0; begin < order.size();
         begin += config.batch_size) {
        const std::size_t end =
            std::min(begin + config.batch_size, order.size());
        const double inv = 1.0 / static_cast<double>(end - begin);
        params.zero_grad();
        for (std::size_t i = begin; i < end; ++i) {
            const PretrainExample& ex = data[order[i]];
            Tape tape;
            ForwardOptions opt;
            opt.training = true;
            opt.dropout_seed = derive_seed(config.seed, step, i);
            EncoderOutput enc =
                encoder_forward(tape, model_cfg, params, ex.token_ids,
                                ex.segment_ids, ex.attn_mask, opt);
            Tensor mlm = cross_entropy_logits(
                tape, mlm_logits_from_hidden(tape, model_cfg, params, enc.hidden),
                ex.labels, kIgnoreIndex);
            Tensor total = mlm;
            double nsp_value = 0.0;
            if (model_cfg.use_nsp) {
                const int target[1] = {ex.is_next};
                Tensor nsp = cross_entropy_logits(
                    tape, nsp_logits_from_hidden(tape, params, enc.hidden),
                    target);
                nsp_value = nsp.value();
                total = add(tape, mlm, nsp);
            }
            detail::check_finite_loss(total.value(), step);
            result.mean_loss += total.value();
            result.mean_mlm += mlm.value();
            result.mean_nsp += nsp_value;
            tape.backward(scalar_mul(tape, total, inv));
        }
        adam_step(params, state, config);
        ++step;
    }
    const double n = static_cast<double>(data.size());
    result.mean_loss /= n;
    result.mean_mlm /= n;
    result.mean_nsp /= n;
    return result;
}

/// One seeded-shuffled pass over encoded NER examples with token-level
/// cross-entropy (continuation pieces and specials are ignored).
inline EpochResult train_epoch_finetune(ParamSet& params,
                                        const ModelConfig& model_cfg,
                                        std::span<const NerEncoded> data,
                                        const TrainerConfig& config) {
    config.validate();
    if (data.empty()) throw ContractError("train_epoch_finetune: no data");
    const auto order = detail::shuffled_indices(data.size(), config.seed);
    AdamState state(params);
    EpochResult result;
    std::size_t step = 0;
    for (std::size_t begin = 0; begin < order.size();
         begin += config.batch_size) {
        const std::size_t end =
            std::min(begin + config.batch_size, order.size());
        const double inv = 1.0 / static_cast<double>(end - begin);
        params.zero_grad();
        for (std::size_t i = begin; i < end; ++i) {
            const NerEncoded& ex = data[order[i]];
            Tape tape;
            ForwardOptions opt;
            opt.training = true;
            opt.dropout_seed = derive_seed(config.seed, step, i);
            Tensor logits = ner_logits(tape, model_cfg, params, ex.token_ids,
                                       ex.segment_ids, ex.attn_mask, opt);
            Tensor loss =
                cross_entropy_logits(tape, logits, ex.label_ids, kIgnoreIndex);
            detail::check_finite_loss(loss.value(), step);
            result.mean_loss += loss.value();
            if (loss.requires_grad()) {
                tape.backward(scalar_mul(tape, loss, inv));
            }
        }
        adam_step(params, state, config);
        ++step;
    }
    result.mean_loss /= static_cast<double>(data.size());
    return result;
}

}  // namespace silobert
