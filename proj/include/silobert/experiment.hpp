#pragma once

// Configuration-driven experiment runner. The 3x2 design crosses the
// pre-training condition {none, centralized, federated} with the
// fine-tuning mode {centralized, federated}:
//
//   1 none        + centralized      4 none        + federated
//   2 centralized + centralized      5 centralized + federated
//   3 federated   + centralized      6 federated   + federated
//
// A full matrix run additionally profiles the attention heads of the
// three pre-fine-tuning models and writes a two-block comparison report.

#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "silobert/attention.hpp"
#include "silobert/data.hpp"
#include "silobert/errors.hpp"
#include "silobert/federated.hpp"
#include "silobert/model.hpp"
#include "silobert/ner.hpp"
#include "silobert/serialize.hpp"
#include "silobert/trainer.hpp"

namespace silobert {

enum class Pretraining { kNone, kCentralized, kFederated };
enum class Finetuning { kCentralized, kFederated };

inline std::string pretraining_label(Pretraining p) {
    switch (p) {
        case Pretraining::kNone: return "BERTbase";
        case Pretraining::kCentralized: return "ClinicalBERT";
        case Pretraining::kFederated: return "Fed_ClinicalBERT";
    }
    throw ContractError("unknown pretraining condition");
}

inline std::string finetuning_label(Finetuning f) {
    return f == Finetuning::kCentralized ? "Centralized" : "Federated";
}

struct ExperimentCell {
    int number;
    Pretraining pretraining;
    Finetuning finetuning;
};

inline const std::array<ExperimentCell, 6>& experiment_matrix() {
    static const std::array<ExperimentCell, 6> cells = {{
        {1, Pretraining::kNone, Finetuning::kCentralized},
        {2, Pretraining::kCentralized, Finetuning::kCentralized},
        {3, Pretraining::kFederated, Finetuning::kCentralized},
        {4, Pretraining::kNone, Finetuning::kFederated},
        {5, Pretraining::kCentralized, Finetuning::kFederated},
        {6, Pretraining::kFederated, Finetuning::kFederated},
    }};
    return cells;
}

struct ResultRow {
    std::string task;
    std::string pretraining;
    std::string fine_tuning;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

struct ExperimentSpec {
    std::string task = "synthetic_ner";
    std::uint64_t seed = 42;
    std::filesystem::path out_dir = "out";
    std::size_t silos = 5;
    std::size_t cycles_pretrain = 10;
    std::size_t cycles_finetune = 6;
    std::size_t centralized_pretrain_epochs = 10;
    std::size_t centralized_finetune_epochs = 4;
    std::vector<int> experiments = {1, 2, 3, 4, 5, 6};
    bool resume = false;
    bool parallel_silos = false;
    std::filesystem::path corpus_file;  // empty: generate synthetically
    CorpusSpec corpus;
    ModelConfig model;
    TrainerConfig pretrain_trainer;
    TrainerConfig finetune_trainer;
    std::size_t vocab_max_size = 512;
    std::size_t probe_sentences = 128;
    DistanceMode distance_mode = DistanceMode::kMean;
    // fraction of train notes used for fine-tuning; the task corpus is
    // ordinarily much smaller than the pre-training corpus
    double finetune_fraction = 1.0;

    ExperimentSpec() {
        pretrain_trainer.learning_rate = 1e-4;
        pretrain_trainer.batch_size = 16;
        finetune_trainer.learning_rate = 2e-5;
        finetune_trainer.batch_size = 32;
    }

    void validate() const {
        model.validate();
        pretrain_trainer.validate();
        finetune_trainer.validate();
        if (silos == 0) throw ConfigError("experiment: silos must be >= 1");
        if (finetune_fraction <= 0.0 || finetune_fraction > 1.0) {
            throw ConfigError("experiment: finetune_fraction must be in (0,1]");
        }
        for (int n : experiments) {
            if (n < 1 || n > 6) {
                throw ConfigError("experiment: cell numbers must be in 1..6");
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Config file parsing (single JSON document; CLI flags override fields)
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void maybe_get(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

inline void parse_trainer(const nlohmann::json& j, TrainerConfig& cfg) {
    maybe_get(j, "learning_rate", cfg.learning_rate);
    maybe_get(j, "batch_size", cfg.batch_size);
    maybe_get(j, "beta1", cfg.beta1);
    maybe_get(j, "beta2", cfg.beta2);
    maybe_get(j, "eps", cfg.eps);
    maybe_get(j, "max_grad_norm", cfg.max_grad_norm);
}

}  // namespace detail

inline ExperimentSpec parse_experiment_spec(const nlohmann::json& j) {
    ExperimentSpec spec;
    detail::maybe_get(j, "task", spec.task);
    detail::maybe_get(j, "seed", spec.seed);
    if (j.contains("out_dir"))
        spec.out_dir = j.at("out_dir").get<std::string>();
    detail::maybe_get(j, "silos", spec.silos);
    detail::maybe_get(j, "cycles_pretrain", spec.cycles_pretrain);
    detail::maybe_get(j, "cycles_finetune", spec.cycles_finetune);
    detail::maybe_get(j, "centralized_pretrain_epochs",
                      spec.centralized_pretrain_epochs);
    detail::maybe_get(j, "centralized_finetune_epochs",
                      spec.centralized_finetune_epochs);
    detail::maybe_get(j, "experiments", spec.experiments);
    detail::maybe_get(j, "resume", spec.resume);
    detail::maybe_get(j, "parallel_silos", spec.parallel_silos);
    if (j.contains("corpus_file"))
        spec.corpus_file = j.at("corpus_file").get<std::string>();
    detail::maybe_get(j, "vocab_max_size", spec.vocab_max_size);
    detail::maybe_get(j, "probe_sentences", spec.probe_sentences);
    detail::maybe_get(j, "finetune_fraction", spec.finetune_fraction);
    if (j.contains("distance_mode")) {
        const std::string mode = j.at("distance_mode").get<std::string>();
        if (mode == "mean") {
            spec.distance_mode = DistanceMode::kMean;
        } else if (mode == "sum") {
            spec.distance_mode = DistanceMode::kSum;
        } else {
            throw ConfigError("distance_mode must be \"mean\" or \"sum\"");
        }
    }
    if (j.contains("corpus")) {
        const auto& c = j.at("corpus");
        detail::maybe_get(c, "num_patients", spec.corpus.num_patients);
        detail::maybe_get(c, "notes_per_patient", spec.corpus.notes_per_patient);
        detail::maybe_get(c, "min_sentences", spec.corpus.min_sentences);
        detail::maybe_get(c, "max_sentences", spec.corpus.max_sentences);
        detail::maybe_get(c, "test_fraction", spec.corpus.test_fraction);
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        detail::maybe_get(m, "num_layers", spec.model.num_layers);
        detail::maybe_get(m, "hidden_size", spec.model.hidden_size);
        detail::maybe_get(m, "num_heads", spec.model.num_heads);
        detail::maybe_get(m, "intermediate_size", spec.model.intermediate_size);
        detail::maybe_get(m, "max_seq_len", spec.model.max_seq_len);
        detail::maybe_get(m, "dropout_p", spec.model.dropout_p);
        detail::maybe_get(m, "use_nsp", spec.model.use_nsp);
        detail::maybe_get(m, "tie_mlm_embeddings", spec.model.tie_mlm_embeddings);
    }
    if (j.contains("pretrain_trainer"))
        detail::parse_trainer(j.at("pretrain_trainer"), spec.pretrain_trainer);
    if (j.contains("finetune_trainer"))
        detail::parse_trainer(j.at("finetune_trainer"), spec.finetune_trainer);
    return spec;
}

inline ExperimentSpec load_experiment_spec(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open config: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("config parse error: " + std::string(e.what()));
    }
    return parse_experiment_spec(j);
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalOutcome {
    Prf prf;
    double token_accuracy = 0.0;
};

/// Tags every test sentence with the argmax label at each word's first
/// piece, then scores exact-match spans micro-averaged over sequences.
inline EvalOutcome evaluate_ner(const ModelConfig& cfg, const ParamSet& params,
                                const Vocab& vocab,
                                std::span<const NerExample> test,
                                std::size_t max_len) {
    std::vector<std::vector<Span>> gold, pred;
    std::vector<std::vector<std::string>> gold_tags, pred_tags;
    for (const NerExample& ex : test) {
        const NerEncoded enc = encode_ner_example(vocab, ex, max_len);
        Tape tape;
        const Tensor logits = ner_logits(tape, cfg, params, enc.token_ids,
                                         enc.segment_ids, enc.attn_mask);
        const std::size_t words = enc.word_positions.size();
        std::vector<std::string> tags;
        for (std::size_t w = 0; w < words; ++w) {
            const std::size_t pos = enc.word_positions[w];
            const auto row = logits.data().subspan(
                pos * cfg.num_ner_labels, cfg.num_ner_labels);
            std::size_t best = 0;
            for (std::size_t c = 1; c < cfg.num_ner_labels; ++c)
                if (row[c] > row[best]) best = c;
            tags.push_back(ner_label_names()[best]);
        }
        std::vector<std::string> truth(ex.tags.begin(),
                                       ex.tags.begin() +
                                           static_cast<std::ptrdiff_t>(words));
        gold.push_back(decode_iob(truth));
        pred.push_back(decode_iob(tags));
        gold_tags.push_back(std::move(truth));
        pred_tags.push_back(std::move(tags));
    }
    EvalOutcome out;
    out.prf = prf1(gold, pred);
    out.token_accuracy = token_accuracy(gold_tags, pred_tags);
    return out;
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fixed4(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

}  // namespace detail

inline std::string results_tsv_header() {
    return "task\tpretraining\tfine_tuning\tprec\trec\tf1";
}

inline std::string result_row_tsv(const ResultRow& row) {
    return row.task + '\t' + row.pretraining + '\t' + row.fine_tuning + '\t' +
           detail::fixed4(row.precision) + '\t' + detail::fixed4(row.recall) +
           '\t' + detail::fixed4(row.f1);
}

inline void write_results_tsv(std::span<const ResultRow> rows,
                              const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot write results: " + path.string());
    out << results_tsv_header() << '\n';
    for (const ResultRow& row : rows) out << result_row_tsv(row) << '\n';
}

inline std::vector<ResultRow> parse_results_tsv(
    const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open results: " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != results_tsv_header()) {
        throw FormatError("results file header mismatch: " + path.string());
    }
    std::vector<ResultRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        ResultRow row;
        std::string prec, rec, f1;
        const bool ok = static_cast<bool>(std::getline(ss, row.task, '\t')) &&
                        std::getline(ss, row.pretraining, '\t') &&
                        std::getline(ss, row.fine_tuning, '\t') &&
                        std::getline(ss, prec, '\t') &&
                        std::getline(ss, rec, '\t') && std::getline(ss, f1);
        if (!ok) throw FormatError("results row malformed: " + line);
        row.precision = std::stod(prec);
        row.recall = std::stod(rec);
        row.f1 = std::stod(f1);
        rows.push_back(std::move(row));
    }
    return rows;
}

/// Two lower-triangular blocks over the compared models: Spearman
/// correlation of entropy profiles, and distances between JSD matrices.
inline void write_attention_report(std::span<const AttentionProfile> profiles,
                                   DistanceMode mode,
                                   const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot write report: " + path.string());
    auto header = [&](const std::string& title) {
        out << "# " << title << '\n';
        out << "model";
        for (const AttentionProfile& p : profiles) out << '\t' << p.model_tag;
        out << '\n';
    };
    header("Spearman correlation among entropy of attention heads");
    for (std::size_t i = 0; i < profiles.size(); ++i) {
        out << profiles[i].model_tag;
        for (std::size_t j = 0; j <= i; ++j) {
            const auto rho = spearman(profiles[i].entropy.data(),
                                      profiles[j].entropy.data());
            out << '\t' << (rho ? detail::fixed4(*rho) : "undefined");
        }
        out << '\n';
    }
    header(std::string("Distances among Jensen-Shannon divergence matrices "
                       "of attention heads (") +
           (mode == DistanceMode::kMean ? "mean" : "sum") + ")");
    for (std::size_t i = 0; i < profiles.size(); ++i) {
        out << profiles[i].model_tag;
        for (std::size_t j = 0; j <= i; ++j) {
            out << '\t'
                << detail::fixed4(model_distance(profiles[i].jsd_matrix,
                                                 profiles[j].jsd_matrix, mode));
        }
        out << '\n';
    }
}

inline void write_mds_points(const AttentionProfile& profile,
                             std::size_t num_heads,
                             const std::filesystem::path& path) {
    const Tensor points = mds_project_2d(profile.jsd_matrix);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot write MDS file: " + path.string());
    out << "layer\thead\tx\ty\n";
    for (std::size_t i = 0; i < points.dim(0); ++i) {
        out << (i / num_heads) << '\t' << (i % num_heads) << '\t'
            << detail::fixed4(points.data()[i * 2]) << '\t'
            << detail::fixed4(points.data()[i * 2 + 1]) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Matrix runner
// ---------------------------------------------------------------------------

struct CellOutcome {
    int number = 0;
    bool ok = false;
    ResultRow row;
    double token_accuracy = 0.0;
    std::string error;
};

struct MatrixOutcome {
    std::vector<CellOutcome> cells;
    std::filesystem::path results_path;
    std::filesystem::path attention_report_path;  // empty unless full run
};

/// Owns the shared state of one matrix run: corpus, vocabulary, initial
/// parameters, and lazily computed pre-trained models.
class MatrixRunner {
  public:
    explicit MatrixRunner(ExperimentSpec spec) : spec_(std::move(spec)) {
        spec_.validate();
        prepare();
    }

    const ExperimentSpec& spec() const { return spec_; }
    const Vocab& vocab() const { return vocab_; }
    const ModelConfig& model() const { return model_; }
    const Corpus& corpus() const { return corpus_; }

    /// Pre-trained parameters for a condition (computed once, cached, and
    /// checkpointed; reloaded from disk under --resume).
    const ParamSet& pretrained(Pretraining condition) {
        auto it = pretrained_.find(condition);
        if (it != pretrained_.end()) return it->second;
        ParamSet params = compute_pretrained(condition);
        return pretrained_.emplace(condition, std::move(params)).first->second;
    }

    CellOutcome run_cell(int number) {
        CellOutcome outcome;
        outcome.number = number;
        const auto cell_path = cells_dir() / cell_file_name(number);
        if (spec_.resume && std::filesystem::exists(cell_path)) {
            outcome = load_cell(cell_path, number);
            return outcome;
        }
        const ExperimentCell& cell = experiment_matrix().at(
            static_cast<std::size_t>(number - 1));
        try {
            ParamSet start = pretrained(cell.pretraining).deep_copy();
            ParamSet tuned = fine_tune(start, cell, number);
            const EvalOutcome eval = evaluate_ner(
                model_, tuned, vocab_, ner_test_, model_.max_seq_len);
            outcome.row = ResultRow{spec_.task,
                                    pretraining_label(cell.pretraining),
                                    finetuning_label(cell.finetuning),
                                    eval.prf.precision,
                                    eval.prf.recall,
                                    eval.prf.f1};
            outcome.token_accuracy = eval.token_accuracy;
            outcome.ok = true;
            save_checkpoint(tuned, checkpoints_dir() /
                                       ("exp" + std::to_string(number) +
                                        "_final.fcrp"));
            save_cell(cell_path, outcome);
        } catch (const std::exception& e) {
            outcome.ok = false;
            outcome.error = "experiment " + std::to_string(number) + " (" +
                            pretraining_label(cell.pretraining) + "/" +
                            finetuning_label(cell.finetuning) + "): " +
                            e.what();
        }
        return outcome;
    }

    /// Runs the configured experiment subset. A full six-cell run also
    /// writes the attention comparison report for the three pre-trained
    /// models. Failed cells are reported; completed rows are still written.
    MatrixOutcome run() {
        MatrixOutcome outcome;
        const bool full_matrix = spec_.experiments.size() == 6;
        if (full_matrix) {
            outcome.attention_report_path =
                spec_.out_dir / "attention_report.tsv";
            write_attention_outputs(outcome.attention_report_path);
        }
        for (int number : spec_.experiments) {
            outcome.cells.push_back(run_cell(number));
        }
        std::vector<ResultRow> rows;
        for (const CellOutcome& cell : outcome.cells) {
            if (cell.ok) rows.push_back(cell.row);
        }
        outcome.results_path = spec_.out_dir / "results.tsv";
        write_results_tsv(rows, outcome.results_path);
        return outcome;
    }

    /// Attention captures of one parameter set over the shared probe set.
    std::vector<AttentionCapture> capture_probe(const ParamSet& params) const {
        std::vector<AttentionCapture> captures;
        captures.reserve(probe_.size());
        for (const auto& ids : probe_) {
            const std::vector<int> segs(ids.size(), 0), mask(ids.size(), 1);
            Tape tape;
            ForwardOptions opt;
            opt.capture_attention = true;
            auto out =
                encoder_forward(tape, model_, params, ids, segs, mask, opt);
            captures.push_back(std::move(*out.capture));
        }
        return captures;
    }

  private:
    void prepare() {
        namespace fs = std::filesystem;
        fs::create_directories(spec_.out_dir);
        fs::create_directories(cells_dir());
        fs::create_directories(checkpoints_dir());
        fs::create_directories(metrics_dir());

        if (!spec_.corpus_file.empty()) {
            corpus_ = load_corpus_jsonl(spec_.corpus_file,
                                        spec_.corpus.test_fraction);
        } else {
            CorpusSpec cspec = spec_.corpus;
            cspec.seed = derive_seed(spec_.seed, 1);
            corpus_ = generate_corpus(cspec);
            save_corpus_jsonl(corpus_, spec_.out_dir / "corpus.jsonl");
        }
        const std::set<std::string> train_set(corpus_.train_patients.begin(),
                                              corpus_.train_patients.end());
        for (const Document& doc : corpus_.documents) {
            if (train_set.contains(doc.patient_id)) train_docs_.push_back(doc);
        }
        for (const NerExample& ex : corpus_.examples) {
            if (train_set.contains(ex.patient_id)) {
                ner_train_.push_back(ex);
            } else {
                ner_test_.push_back(ex);
            }
        }
        if (spec_.finetune_fraction < 1.0) {
            // keep whole notes, seeded sample, order preserved
            std::vector<std::string> notes;
            std::set<std::string> seen;
            for (const NerExample& ex : ner_train_) {
                if (seen.insert(ex.note_id).second) notes.push_back(ex.note_id);
            }
            const std::size_t keep = std::max<std::size_t>(
                spec_.silos, static_cast<std::size_t>(
                                 static_cast<double>(notes.size()) *
                                 spec_.finetune_fraction));
            Rng rng(derive_seed(spec_.seed, 8));
            rng.shuffle(notes);
            notes.resize(std::min(keep, notes.size()));
            const std::set<std::string> kept(notes.begin(), notes.end());
            std::vector<NerExample> subset;
            for (NerExample& ex : ner_train_) {
                if (kept.contains(ex.note_id)) subset.push_back(std::move(ex));
            }
            ner_train_ = std::move(subset);
        }
        if (train_docs_.empty() || ner_train_.empty() || ner_test_.empty()) {
            throw ConfigError("corpus too small to form train and test sets");
        }
        vocab_ = build_vocab(train_docs_, spec_.vocab_max_size);
        save_vocab(vocab_, spec_.out_dir / "vocab.txt");
        model_ = spec_.model;
        model_.vocab_size = vocab_.size();
        initial_ = init_params(model_, derive_seed(spec_.seed, 2));

        // fixed probe sentences from a held-out generator stream
        CorpusSpec probe_spec = spec_.corpus;
        probe_spec.seed = derive_seed(spec_.seed, 7);
        probe_spec.num_patients =
            std::max<std::size_t>(8, spec_.probe_sentences / 8);
        probe_spec.notes_per_patient = 2;
        const Corpus probe_corpus = generate_corpus(probe_spec);
        for (const NerExample& ex : probe_corpus.examples) {
            if (probe_.size() >= spec_.probe_sentences) break;
            std::vector<int> ids{Vocab::kCls};
            for (const std::string& w : ex.tokens) {
                const auto pieces = vocab_.encode_word(detail::lowercase(w));
                ids.insert(ids.end(), pieces.begin(), pieces.end());
            }
            ids.push_back(Vocab::kSep);
            if (ids.size() > model_.max_seq_len) ids.resize(model_.max_seq_len);
            probe_.push_back(std::move(ids));
        }
    }

    std::filesystem::path cells_dir() const { return spec_.out_dir / "cells"; }
    std::filesystem::path checkpoints_dir() const {
        return spec_.out_dir / "checkpoints";
    }
    std::filesystem::path metrics_dir() const {
        return spec_.out_dir / "metrics";
    }
    static std::string cell_file_name(int number) {
        return "exp" + std::to_string(number) + ".json";
    }

    FederatedConfig base_config(Stage stage) const {
        FederatedConfig cfg;
        cfg.stage = stage;
        cfg.model = model_;
        cfg.vocab = &vocab_;
        cfg.seq_len = model_.max_seq_len;
        cfg.parallel = spec_.parallel_silos;
        if (stage == Stage::kPretrain) {
            cfg.trainer = spec_.pretrain_trainer;
            cfg.trainer.seed = derive_seed(spec_.seed, 5);
            cfg.cycles = spec_.cycles_pretrain;
        } else {
            cfg.trainer = spec_.finetune_trainer;
            // one fine-tuning seed shared by every matrix cell, so the
            // pre-training condition is the only varying factor
            cfg.trainer.seed = derive_seed(spec_.seed, 6);
            cfg.cycles = spec_.cycles_finetune;
        }
        return cfg;
    }

    ParamSet compute_pretrained(Pretraining condition) {
        if (condition == Pretraining::kNone) return initial_.deep_copy();
        const std::string tag = condition == Pretraining::kCentralized
                                    ? "pretrain_centralized"
                                    : "pretrain_federated";
        const auto ckpt = checkpoints_dir() / (tag + ".fcrp");
        if (spec_.resume && std::filesystem::exists(ckpt)) {
            return load_checkpoint(ckpt);
        }
        FederatedConfig cfg = base_config(Stage::kPretrain);
        cfg.metrics_path = metrics_dir() / (tag + ".jsonl");
        ParamSet result;
        if (condition == Pretraining::kCentralized) {
            SiloDataset merged;
            merged.documents = train_docs_;
            merged.sample_size = corpus_.train_patients.size();
            result = run_centralized(initial_, merged,
                                     spec_.centralized_pretrain_epochs, cfg)
                         .params;
        } else {
            auto silos = split_silos_by_patient(train_docs_, spec_.silos,
                                                derive_seed(spec_.seed, 3));
            const auto handles = make_silo_handles(std::move(silos),
                                                   cfg.trainer.seed);
            cfg.checkpoint_dir = checkpoints_dir();
            auto history = run_federated(initial_, handles, cfg);
            result = std::move(history.back().aggregated);
        }
        save_checkpoint(result, ckpt);
        return result;
    }

    ParamSet fine_tune(ParamSet& start, const ExperimentCell& cell,
                       int number) {
        FederatedConfig cfg = base_config(Stage::kFinetune);
        cfg.metrics_path = metrics_dir() / ("exp" + std::to_string(number) +
                                            "_finetune.jsonl");
        try {
            if (cell.finetuning == Finetuning::kCentralized) {
                SiloDataset merged;
                merged.examples = ner_train_;
                std::set<std::string> notes;
                for (const NerExample& ex : ner_train_) notes.insert(ex.note_id);
                merged.sample_size = notes.size();
                return run_centralized(start, merged,
                                       spec_.centralized_finetune_epochs, cfg)
                    .params;
            }
            auto silos = split_silos_by_note(ner_train_, spec_.silos,
                                             derive_seed(spec_.seed, 4));
            const auto handles =
                make_silo_handles(std::move(silos), cfg.trainer.seed);
            auto history = run_federated(start, handles, cfg);
            return std::move(history.back().aggregated);
        } catch (const std::exception& e) {
            throw DivergenceError("fine-tuning stage: " + std::string(e.what()));
        }
    }

    void write_attention_outputs(const std::filesystem::path& report_path) {
        std::vector<AttentionProfile> profiles;
        for (const Pretraining condition :
             {Pretraining::kNone, Pretraining::kCentralized,
              Pretraining::kFederated}) {
            const auto captures = capture_probe(pretrained(condition));
            profiles.push_back(profile_attention(pretraining_label(condition),
                                                 captures));
        }
        write_attention_report(profiles, spec_.distance_mode, report_path);
        for (const AttentionProfile& profile : profiles) {
            write_mds_points(profile, model_.num_heads,
                             spec_.out_dir /
                                 ("attention_mds_" + profile.model_tag +
                                  ".tsv"));
        }
    }

    void save_cell(const std::filesystem::path& path,
                   const CellOutcome& outcome) const {
        nlohmann::json j;
        j["number"] = outcome.number;
        j["task"] = outcome.row.task;
        j["pretraining"] = outcome.row.pretraining;
        j["fine_tuning"] = outcome.row.fine_tuning;
        j["precision"] = outcome.row.precision;
        j["recall"] = outcome.row.recall;
        j["f1"] = outcome.row.f1;
        j["token_accuracy"] = outcome.token_accuracy;
        std::ofstream out(path, std::ios::trunc);
        out << j.dump(2) << '\n';
    }

    CellOutcome load_cell(const std::filesystem::path& path,
                          int number) const {
        std::ifstream in(path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError("cell file " + path.string() + ": " + e.what());
        }
        CellOutcome outcome;
        outcome.number = number;
        outcome.ok = true;
        outcome.row = ResultRow{
            j.at("task").get<std::string>(),
            j.at("pretraining").get<std::string>(),
            j.at("fine_tuning").get<std::string>(),
            j.at("precision").get<double>(),
            j.at("recall").get<double>(),
            j.at("f1").get<double>()};
        outcome.token_accuracy = j.value("token_accuracy", 0.0);
        return outcome;
    }

    ExperimentSpec spec_;
    Corpus corpus_;
    std::vector<Document> train_docs_;
    std::vector<NerExample> ner_train_;
    std::vector<NerExample> ner_test_;
    Vocab vocab_;
    ModelConfig model_;
    ParamSet initial_;
    std::vector<std::vector<int>> probe_;
    std::map<Pretraining, ParamSet> pretrained_;
};

/// Single-cell entry point matching the experiment enumeration.
inline ResultRow run_experiment(const ExperimentSpec& spec, int number) {
    ExperimentSpec single = spec;
    single.experiments = {number};
    MatrixRunner runner(std::move(single));
    CellOutcome outcome = runner.run_cell(number);
    if (!outcome.ok) throw DivergenceError(outcome.error);
    return outcome.row;
}

/// Full-matrix entry point.
inline MatrixOutcome run_matrix(const ExperimentSpec& spec) {
    MatrixRunner runner(spec);
    return runner.run();
}

}  // namespace silobert
