#pragma once

// The federated protocol: broadcast identical parameters to every silo,
// train locally for one epoch per global cycle, then aggregate the
// returned parameter sets weighted by sample size,
//
//   Q_ag = sum_k (n_k / N) * Q_k,   N = sum_k n_k,
//
// and repeat. Silos are simulated in-process; "sending the model" is a
// deep copy. Silo tasks are independent and may run on separate threads;
// aggregation is a single-threaded barrier in ascending silo order, so
// results do not depend on scheduling.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "silobert/data.hpp"
#include "silobert/errors.hpp"
#include "silobert/model.hpp"
#include "silobert/serialize.hpp"
#include "silobert/trainer.hpp"

namespace silobert {

struct SiloHandle {
    std::size_t silo_index = 0;
    SiloDataset dataset;
    std::size_t sample_size = 0;  // patients (pre-train) or notes (fine-tune)
    std::uint64_t seed = 0;
};

inline std::vector<SiloHandle> make_silo_handles(std::vector<SiloDataset> silos,
                                                 std::uint64_t base_seed) {
    std::vector<SiloHandle> handles;
    handles.reserve(silos.size());
    for (std::size_t k = 0; k < silos.size(); ++k) {
        SiloHandle h;
        h.silo_index = k;
        h.sample_size = silos[k].sample_size;
        h.dataset = std::move(silos[k]);
        h.seed = derive_seed(base_seed, k);
        handles.push_back(std::move(h));
    }
    return handles;
}

struct SiloCycleMetrics {
    double loss = 0.0;
    double mlm_loss = 0.0;
    double nsp_loss = 0.0;
    std::vector<double> epoch_losses;
};

struct GlobalCycleState {
    std::size_t cycle = 0;  // t in [1, T]
    ParamSet aggregated;
    std::vector<SiloCycleMetrics> silo_metrics;
    double wall_seconds = 0.0;
    std::string checkpoint_path;
};

/// Sample-size-weighted average of congruent parameter sets, summed in
/// the order given (the orchestrator passes silos in ascending index
/// order). Weights n_k/N are evaluated in 64-bit; per-element products
/// accumulate in extended precision so K=1 is bit-identity and convex
/// bounds hold.
inline ParamSet aggregate(
    const std::vector<std::pair<ParamSet, std::size_t>>& contributions) {
    if (contributions.empty()) {
        throw ContractError("aggregate: no contributions");
    }
    std::size_t total = 0;
    for (const auto& [params, n] : contributions) {
        if (n == 0) throw ContractError("aggregate: sample size must be >= 1");
        total += n;
        if (auto mismatch =
                contributions.front().first.first_incongruence(params)) {
            throw AggregationError("aggregate: incongruent parameter sets at " +
                                   *mismatch);
        }
    }
    std::vector<double> weights;
    weights.reserve(contributions.size());
    for (const auto& [params, n] : contributions) {
        weights.push_back(static_cast<double>(n) / static_cast<double>(total));
    }
    ParamSet out = contributions.front().first.deep_copy();
    std::size_t entry_index = 0;
    for (auto& [name, tensor] : out.entries()) {
        auto dst = tensor.data();
        for (std::size_t i = 0; i < dst.size(); ++i) {
            long double acc = 0.0L;
            for (std::size_t k = 0; k < contributions.size(); ++k) {
                acc += static_cast<long double>(weights[k]) *
                       contributions[k].first.entries()[entry_index]
                           .second.data()[i];
            }
            dst[i] = static_cast<double>(acc);
        }
        ++entry_index;
    }
    return out;
}

enum class Stage { kPretrain, kFinetune };

struct FederatedConfig {
    Stage stage = Stage::kPretrain;
    std::size_t cycles = 10;
    std::size_t local_epochs = 1;
    // trainer.seed doubles as the run seed: silo k's stream is
    // derive_seed(trainer.seed, k) when handles come from make_silo_handles,
    // and the centralized loop replays the k = 0 stream.
    TrainerConfig trainer;
    ModelConfig model;
    const Vocab* vocab = nullptr;  // required for the pre-training stage
    std::size_t seq_len = 64;
    bool parallel = false;
    std::filesystem::path metrics_path;    // empty: no metrics file
    std::filesystem::path checkpoint_dir;  // empty: no per-cycle checkpoints
};

namespace detail {

/// Per-epoch streams all flow from the silo's own seed, so two silos with
/// identical data and identical seeds train identically, and the
/// centralized path can replay the silo-0 stream bit for bit.
inline std::uint64_t epoch_trainer_seed(std::uint64_t silo_seed, std::size_t t,
                                        std::size_t e) {
    return derive_seed(silo_seed, t, e, 1);
}

inline std::uint64_t epoch_mask_seed(std::uint64_t silo_seed, std::size_t t,
                                     std::size_t e) {
    return derive_seed(silo_seed, t, e, 2);
}

/// Runs local_epochs of local training on one silo's copy of the global
/// parameters. Pre-training regenerates MLM masking every epoch from the
/// derived seed; fine-tuning uses the pre-encoded examples.
inline SiloCycleMetrics train_silo(ParamSet& params, const FederatedConfig& cfg,
                                   const SiloDataset& dataset,
                                   std::span<const NerEncoded> encoded,
                                   std::size_t t, std::uint64_t silo_seed) {
    SiloCycleMetrics metrics;
    for (std::size_t e = 0; e < cfg.local_epochs; ++e) {
        TrainerConfig local = cfg.trainer;
        local.seed = epoch_trainer_seed(silo_seed, t, e);
        EpochResult epoch;
        if (cfg.stage == Stage::kPretrain) {
            const auto examples =
                make_mlm_examples(*cfg.vocab, dataset.documents, cfg.seq_len,
                                  epoch_mask_seed(silo_seed, t, e));
            if (examples.empty()) {
                throw ContractError("silo produced no MLM examples");
            }
            epoch = train_epoch_pretrain(params, cfg.model, examples, local);
        } else {
            epoch = train_epoch_finetune(params, cfg.model, encoded, local);
        }
        metrics.loss = epoch.mean_loss;
        metrics.mlm_loss = epoch.mean_mlm;
        metrics.nsp_loss = epoch.mean_nsp;
        metrics.epoch_losses.push_back(epoch.mean_loss);
    }
    return metrics;
}

inline void emit_cycle_metrics(std::ofstream& out, const GlobalCycleState& st) {
    nlohmann::json line;
    line["cycle"] = st.cycle;
    std::vector<double> losses;
    for (const auto& m : st.silo_metrics) losses.push_back(m.loss);
    line["silo_losses"] = losses;
    line["aggregate_checkpoint_path"] = st.checkpoint_path;
    out << line.dump() << '\n';
    out.flush();
}

}  // namespace detail

/// Runs T global cycles of broadcast -> local training -> aggregation and
/// returns the full per-cycle history. Divergence in a silo aborts the
/// cycle with a diagnostic naming the silo and step.
inline std::vector<GlobalCycleState> run_federated(
    const ParamSet& initial, std::span<const SiloHandle> silos,
    const FederatedConfig& cfg) {
    if (silos.empty()) throw ContractError("run_federated: no silos");
    if (cfg.cycles == 0) throw ContractError("run_federated: cycles must be >= 1");
    if (cfg.stage == Stage::kPretrain && cfg.vocab == nullptr) {
        throw ContractError("run_federated: pre-training requires a vocab");
    }

    // fine-tuning inputs are encoded once up front
    std::vector<std::vector<NerEncoded>> encoded(silos.size());
    if (cfg.stage == Stage::kFinetune) {
        if (cfg.vocab == nullptr) {
            throw ContractError("run_federated: fine-tuning requires a vocab");
        }
        for (std::size_t k = 0; k < silos.size(); ++k) {
            for (const NerExample& ex : silos[k].dataset.examples) {
                encoded[k].push_back(
                    encode_ner_example(*cfg.vocab, ex, cfg.seq_len));
            }
            if (encoded[k].empty()) {
                throw ContractError("run_federated: silo " + std::to_string(k) +
                                    " has no fine-tuning examples");
            }
        }
    }

    std::ofstream metrics_out;
    if (!cfg.metrics_path.empty()) {
        metrics_out.open(cfg.metrics_path, std::ios::trunc);
        if (!metrics_out) {
            throw FormatError("cannot write metrics file: " +
                              cfg.metrics_path.string());
        }
    }

    std::vector<GlobalCycleState> history;
    ParamSet global = initial.deep_copy();
    for (std::size_t t = 1; t <= cfg.cycles; ++t) {
        const auto started = std::chrono::steady_clock::now();
        std::vector<ParamSet> locals(silos.size());
        std::vector<SiloCycleMetrics> metrics(silos.size());
        std::vector<std::string> failures(silos.size());

        auto run_silo = [&](std::size_t k) {
            try {
                locals[k] = global.deep_copy();
                metrics[k] = detail::train_silo(locals[k], cfg,
                                                silos[k].dataset, encoded[k],
                                                t, silos[k].seed);
            } catch (const std::exception& e) {
                failures[k] = e.what();
            }
        };

        if (cfg.parallel && silos.size() > 1) {
            std::vector<std::thread> workers;
            workers.reserve(silos.size());
            for (std::size_t k = 0; k < silos.size(); ++k)
                workers.emplace_back(run_silo, k);
            for (auto& w : workers) w.join();
        } else {
            for (std::size_t k = 0; k < silos.size(); ++k) run_silo(k);
        }
        for (std::size_t k = 0; k < silos.size(); ++k) {
            if (!failures[k].empty()) {
                throw DivergenceError("cycle " + std::to_string(t) + " silo " +
                                      std::to_string(silos[k].silo_index) +
                                      ": " + failures[k]);
            }
        }

        std::vector<std::pair<ParamSet, std::size_t>> contributions;
        contributions.reserve(silos.size());
        for (std::size_t k = 0; k < silos.size(); ++k) {
            contributions.emplace_back(std::move(locals[k]),
                                       silos[k].sample_size);
        }
        global = aggregate(contributions);

        GlobalCycleState state;
        state.cycle = t;
        state.aggregated = global.deep_copy();
        state.silo_metrics = std::move(metrics);
        state.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                          started)
                .count();
        if (!cfg.checkpoint_dir.empty()) {
            const auto path =
                cfg.checkpoint_dir / ("cycle_" + std::to_string(t) + ".fcrp");
            save_checkpoint(global, path);
            state.checkpoint_path = path.string();
        }
        if (metrics_out.is_open()) detail::emit_cycle_metrics(metrics_out, state);
        history.push_back(std::move(state));
    }
    return history;
}

struct CentralizedRun {
    ParamSet params;
    std::vector<SiloCycleMetrics> epochs;
};

/// Ordinary single-site training over the merged data, using the same
/// trainer loop and the silo-0 seed derivation as the federated path, and
/// resetting optimizer state at each epoch boundary exactly as a
/// broadcast does. A K=1 federated run is therefore bit-identical.
inline CentralizedRun run_centralized(const ParamSet& initial,
                                      const SiloDataset& merged,
                                      std::size_t epochs,
                                      const FederatedConfig& cfg) {
    if (epochs == 0) throw ContractError("run_centralized: epochs must be >= 1");
    if (cfg.vocab == nullptr) {
        throw ContractError("run_centralized: vocab required");
    }
    std::vector<NerEncoded> encoded;
    if (cfg.stage == Stage::kFinetune) {
        for (const NerExample& ex : merged.examples) {
            encoded.push_back(encode_ner_example(*cfg.vocab, ex, cfg.seq_len));
        }
        if (encoded.empty()) {
            throw ContractError("run_centralized: no fine-tuning examples");
        }
    }
    std::ofstream metrics_out;
    if (!cfg.metrics_path.empty()) {
        metrics_out.open(cfg.metrics_path, std::ios::trunc);
        if (!metrics_out) {
            throw FormatError("cannot write metrics file: " +
                              cfg.metrics_path.string());
        }
    }
    CentralizedRun run;
    run.params = initial.deep_copy();
    for (std::size_t t = 1; t <= epochs; ++t) {
        SiloCycleMetrics metrics;
        try {
            metrics = detail::train_silo(run.params, cfg, merged, encoded, t,
                                         derive_seed(cfg.trainer.seed, 0));
        } catch (const std::exception& e) {
            throw DivergenceError("epoch " + std::to_string(t) + ": " +
                                  e.what());
        }
        run.epochs.push_back(metrics);
        if (metrics_out.is_open()) {
            GlobalCycleState state;
            state.cycle = t;
            state.silo_metrics = {run.epochs.back()};
            detail::emit_cycle_metrics(metrics_out, state);
        }
    }
    return run;
}

}  // namespace silobert
