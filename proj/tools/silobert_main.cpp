// Command-line entry point: runs the experiment matrix (or a single
// experiment) from a JSON config with flag overrides, and generates
// synthetic corpora.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "silobert/data.hpp"
#include "silobert/experiment.hpp"

namespace {

int cmd_run(const std::string& config_path, int experiment,
            std::uint64_t seed, bool seed_set, const std::string& out_dir,
            bool resume, std::size_t silos, bool silos_set,
            std::size_t cycles_pretrain, bool cp_set,
            std::size_t cycles_finetune, bool cf_set, bool parallel) {
    silobert::ExperimentSpec spec;
    if (!config_path.empty()) {
        spec = silobert::load_experiment_spec(config_path);
    }
    if (seed_set) spec.seed = seed;
    if (!out_dir.empty()) spec.out_dir = out_dir;
    if (resume) spec.resume = true;
    if (silos_set) spec.silos = silos;
    if (cp_set) spec.cycles_pretrain = cycles_pretrain;
    if (cf_set) spec.cycles_finetune = cycles_finetune;
    if (parallel) spec.parallel_silos = true;
    if (experiment != 0) spec.experiments = {experiment};

    const silobert::MatrixOutcome outcome = silobert::run_matrix(spec);
    int failures = 0;
    for (const silobert::CellOutcome& cell : outcome.cells) {
        if (cell.ok) {
            std::cout << "experiment " << cell.number << ": "
                      << silobert::result_row_tsv(cell.row)
                      << "\ttoken_acc=" << cell.token_accuracy << '\n';
        } else {
            ++failures;
            std::cerr << "FAILED " << cell.error << '\n';
        }
    }
    std::cout << "results: " << outcome.results_path.string() << '\n';
    if (!outcome.attention_report_path.empty()) {
        std::cout << "attention report: "
                  << outcome.attention_report_path.string() << '\n';
    }
    return failures == 0 ? 0 : 1;
}

int cmd_gen_corpus(const std::string& out_path, const std::string& vocab_path,
                   std::size_t patients, std::size_t notes,
                   std::uint64_t seed) {
    silobert::CorpusSpec spec;
    spec.seed = seed;
    spec.num_patients = patients;
    spec.notes_per_patient = notes;
    const silobert::Corpus corpus = silobert::generate_corpus(spec);
    silobert::save_corpus_jsonl(corpus, out_path);
    std::cout << "wrote " << corpus.examples.size() << " sentences for "
              << patients << " patients to " << out_path << '\n';
    if (!vocab_path.empty()) {
        const silobert::Vocab vocab =
            silobert::build_vocab(corpus.documents, 512);
        silobert::save_vocab(vocab, vocab_path);
        std::cout << "wrote vocab (" << vocab.size() << " tokens) to "
                  << vocab_path << '\n';
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"silobert: federated pre-training and fine-tuning simulator"};
    app.require_subcommand(1);

    // run
    auto* run = app.add_subcommand(
        "run", "run the experiment matrix (or one experiment)");
    std::string config_path;
    int experiment = 0;
    std::uint64_t seed = 42;
    std::string out_dir;
    bool resume = false, parallel = false;
    std::size_t silos = 5, cycles_pretrain = 10, cycles_finetune = 6;
    run->add_option("--config", config_path, "JSON config file");
    run->add_option("--experiment", experiment,
                    "run a single experiment 1..6 (default: all)")
        ->check(CLI::Range(1, 6));
    auto* seed_opt = run->add_option("--seed", seed, "master seed");
    run->add_option("--out", out_dir, "output directory");
    run->add_flag("--resume", resume, "skip completed experiment cells");
    auto* silos_opt = run->add_option("--silos", silos, "number of silos K");
    auto* cp_opt = run->add_option("--cycles-pretrain", cycles_pretrain,
                                   "federated pre-training global cycles");
    auto* cf_opt = run->add_option("--cycles-finetune", cycles_finetune,
                                   "federated fine-tuning global cycles");
    run->add_flag("--parallel", parallel, "train silos on separate threads");

    // gen-corpus
    auto* gen = app.add_subcommand("gen-corpus",
                                   "generate a synthetic corpus file");
    std::string corpus_out = "corpus.jsonl", vocab_out;
    std::size_t patients = 200, notes = 2;
    std::uint64_t gen_seed = 1;
    gen->add_option("--out", corpus_out, "corpus output path");
    gen->add_option("--vocab", vocab_out, "also write a vocab file");
    gen->add_option("--patients", patients, "number of patients");
    gen->add_option("--notes-per-patient", notes, "notes per patient");
    gen->add_option("--seed", gen_seed, "corpus seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) {
            return cmd_run(config_path, experiment, seed, seed_opt->count() > 0,
                           out_dir, resume, silos, silos_opt->count() > 0,
                           cycles_pretrain, cp_opt->count() > 0,
                           cycles_finetune, cf_opt->count() > 0, parallel);
        }
        if (gen->parsed()) {
            return cmd_gen_corpus(corpus_out, vocab_out, patients, notes,
                                  gen_seed);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
