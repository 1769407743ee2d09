#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <unistd.h>
#include <vector>

#include "silobert/model.hpp"
#include "silobert/serialize.hpp"
#include "silobert/trainer.hpp"

using namespace silobert;
using Catch::Approx;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.num_layers = 2;
    cfg.hidden_size = 16;
    cfg.num_heads = 2;
    cfg.vocab_size = 40;
    cfg.max_seq_len = 16;
    cfg.dropout_p = 0.1;
    return cfg;
}

bool params_bit_identical(const ParamSet& a, const ParamSet& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto& [an, at] = a.entries()[i];
        const auto& [bn, bt] = b.entries()[i];
        if (an != bn || at.shape() != bt.shape()) return false;
        for (std::size_t e = 0; e < at.numel(); ++e) {
            if (at.data()[e] != bt.data()[e]) return false;
        }
    }
    return true;
}

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        static int counter = 0;
        path = std::filesystem::temp_directory_path() /
               ("silobert_model_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter++));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("init_params is deterministic and follows conventions", "[model]") {
    const ModelConfig cfg = tiny_config();
    const ParamSet a = init_params(cfg, 7);
    const ParamSet b = init_params(cfg, 7);
    CHECK(params_bit_identical(a, b));
    const ParamSet c = init_params(cfg, 8);
    CHECK_FALSE(params_bit_identical(a, c));

    for (const auto& [name, t] : a.entries()) {
        if (name.ends_with(".gain")) {
            for (double v : t.data()) CHECK(v == 1.0);
        } else if (t.rank() == 1) {  // biases
            for (double v : t.data()) CHECK(v == 0.0);
        }
    }
}

TEST_CASE("init weight statistics match the truncated normal", "[model]") {
    ModelConfig cfg = tiny_config();
    cfg.hidden_size = 64;
    cfg.num_heads = 4;
    const ParamSet params = init_params(cfg, 42);
    const Tensor& w = params.at("layer0.attn.wq");  // 64x64
    REQUIRE(w.numel() == 64 * 64);
    double mean = 0.0;
    for (double v : w.data()) {
        mean += v;
        CHECK(std::fabs(v) <= 0.04 + 1e-12);  // clipped at two sigma
    }
    mean /= static_cast<double>(w.numel());
    double var = 0.0;
    for (double v : w.data()) var += (v - mean) * (v - mean);
    var /= static_cast<double>(w.numel());
    const double stddev = std::sqrt(var);
    CHECK(stddev >= 0.015);
    CHECK(stddev <= 0.025);
}

TEST_CASE("config validation", "[model]") {
    ModelConfig cfg = tiny_config();
    cfg.hidden_size = 15;  // not divisible by heads
    CHECK_THROWS_AS(init_params(cfg, 1), ConfigError);
    cfg = tiny_config();
    cfg.num_layers = 0;
    CHECK_THROWS_AS(init_params(cfg, 1), ConfigError);
}

TEST_CASE("forward shape contract and single-token attention", "[model]") {
    const ModelConfig cfg = tiny_config();
    const ParamSet params = init_params(cfg, 3);
    Tape tape;

    const std::vector<int> one_token{5}, one_segment{0}, one_mask{1};
    ForwardOptions opt;
    opt.capture_attention = true;
    EncoderOutput out = encoder_forward(tape, cfg, params, one_token,
                                        one_segment, one_mask, opt);
    CHECK(out.hidden.shape() == Shape{1, cfg.hidden_size});
    REQUIRE(out.capture.has_value());
    for (std::size_t l = 0; l < cfg.num_layers; ++l)
        for (std::size_t a = 0; a < cfg.num_heads; ++a)
            CHECK(out.capture->row(l, a, 0)[0] == Approx(1.0));

    const std::vector<int> ids{2, 7, 9, 11, 3};
    const std::vector<int> segs(5, 0), mask(5, 1);
    EncoderOutput full = encoder_forward(tape, cfg, params, ids, segs, mask);
    CHECK(full.hidden.shape() == Shape{5, cfg.hidden_size});

    std::vector<int> toolong(cfg.max_seq_len + 1, 5);
    std::vector<int> toolong_seg(toolong.size(), 0),
        toolong_mask(toolong.size(), 1);
    CHECK_THROWS_AS(
        encoder_forward(tape, cfg, params, toolong, toolong_seg, toolong_mask),
        ContractError);
}

TEST_CASE("attention rows are distributions and padding gets no mass",
          "[model]") {
    const ModelConfig cfg = tiny_config();
    const ParamSet params = init_params(cfg, 5);
    Tape tape;
    const std::size_t len = 8, valid = 5;
    std::vector<int> ids(len, 6), segs(len, 0), mask(len, 0);
    for (std::size_t i = 0; i < valid; ++i) mask[i] = 1;
    for (std::size_t i = valid; i < len; ++i) ids[i] = 0;  // [PAD]
    ForwardOptions opt;
    opt.capture_attention = true;
    EncoderOutput out =
        encoder_forward(tape, cfg, params, ids, segs, mask, opt);
    REQUIRE(out.capture.has_value());
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        for (std::size_t a = 0; a < cfg.num_heads; ++a) {
            for (std::size_t i = 0; i < len; ++i) {
                const auto row = out.capture->row(l, a, i);
                double total = 0.0, pad_mass = 0.0;
                for (std::size_t j = 0; j < len; ++j) {
                    total += row[j];
                    if (!mask[j]) pad_mass += row[j];
                }
                CHECK(std::fabs(total - 1.0) <= 1e-9);
                CHECK(pad_mass < 1e-6);
            }
        }
    }
}

TEST_CASE("forward is deterministic in evaluation mode", "[model]") {
    const ModelConfig cfg = tiny_config();
    const ParamSet params = init_params(cfg, 11);
    const std::vector<int> ids{2, 8, 9, 3}, segs(4, 0), mask(4, 1);
    Tape t1, t2;
    EncoderOutput a = encoder_forward(t1, cfg, params, ids, segs, mask);
    EncoderOutput b = encoder_forward(t2, cfg, params, ids, segs, mask);
    for (std::size_t i = 0; i < a.hidden.numel(); ++i)
        CHECK(a.hidden.data()[i] == b.hidden.data()[i]);
}

TEST_CASE("untrained losses sit at chance level", "[model]") {
    ModelConfig cfg = tiny_config();
    cfg.vocab_size = 120;
    cfg.dropout_p = 0.0;
    const ParamSet params = init_params(cfg, 13);
    Rng rng(99);

    // NSP on balanced data
    double nsp_total = 0.0;
    const int pairs = 40;
    for (int i = 0; i < pairs; ++i) {
        Tape tape;
        std::vector<int> ids{2};
        for (int j = 0; j < 10; ++j)
            ids.push_back(static_cast<int>(5 + rng.uniform_int(100)));
        ids.push_back(3);
        std::vector<int> segs(ids.size(), 0), mask(ids.size(), 1);
        nsp_total += nsp_loss(tape, cfg, params, ids, segs, mask, i % 2).value();
    }
    CHECK(nsp_total / pairs == Approx(std::log(2.0)).margin(0.2));

    // MLM at chance is about ln(vocab)
    double mlm_total = 0.0;
    const int batches = 20;
    for (int i = 0; i < batches; ++i) {
        Tape tape;
        std::vector<int> ids{2};
        std::vector<int> labels{-1};
        for (int j = 0; j < 12; ++j) {
            const int original = static_cast<int>(5 + rng.uniform_int(100));
            const bool masked = j % 5 == 0;
            ids.push_back(masked ? 4 : original);
            labels.push_back(masked ? original : -1);
        }
        ids.push_back(3);
        labels.push_back(-1);
        std::vector<int> segs(ids.size(), 0), mask(ids.size(), 1);
        mlm_total +=
            mlm_loss(tape, cfg, params, ids, segs, mask, labels).value();
    }
    const double mean_mlm = mlm_total / batches;
    const double chance = std::log(static_cast<double>(cfg.vocab_size));
    CHECK(mean_mlm >= chance * 0.85);
    CHECK(mean_mlm <= chance * 1.15);
}

TEST_CASE("ner_logits shape contract", "[model]") {
    const ModelConfig cfg = tiny_config();
    const ParamSet params = init_params(cfg, 17);
    Tape tape;
    const std::vector<int> ids{2, 5, 6, 7, 3}, segs(5, 0), mask(5, 1);
    Tensor logits = ner_logits(tape, cfg, params, ids, segs, mask);
    CHECK(logits.shape() == Shape{5, cfg.num_ner_labels});
}

TEST_CASE("one optimizer step decreases a single-example MLM loss",
          "[model]") {
    ModelConfig cfg = tiny_config();
    cfg.dropout_p = 0.0;
    ParamSet params = init_params(cfg, 19);
    const std::vector<int> ids{2, 4, 8, 9, 4, 3};
    const std::vector<int> labels{-1, 7, -1, -1, 12, -1};
    const std::vector<int> segs(6, 0), mask(6, 1);

    auto eval = [&]() {
        Tape tape;
        return mlm_loss(tape, cfg, params, ids, segs, mask, labels).value();
    };
    const double before = eval();
    {
        Tape tape;
        Tensor loss = mlm_loss(tape, cfg, params, ids, segs, mask, labels);
        params.zero_grad();
        tape.backward(loss);
        TrainerConfig tc;
        tc.learning_rate = 1e-3;
        AdamState state(params);
        adam_step(params, state, tc);
    }
    CHECK(eval() < before);
}

TEST_CASE("checkpoint round trip is bit exact", "[model]") {
    const ModelConfig cfg = tiny_config();
    const ParamSet params = init_params(cfg, 23);
    TempDir dir;
    const auto path = dir.path / "model.fcrp";
    save_checkpoint(params, path);
    const ParamSet loaded = load_checkpoint(path);
    CHECK(params_bit_identical(params, loaded));
}

TEST_CASE("checkpoint format errors", "[model]") {
    TempDir dir;
    const auto bad_magic = dir.path / "bad_magic.fcrp";
    {
        std::ofstream out(bad_magic, std::ios::binary);
        out << "NOTCHKP and more bytes here";
    }
    CHECK_THROWS_AS(load_checkpoint(bad_magic), FormatError);

    // truncate a valid checkpoint mid payload
    const ModelConfig cfg = tiny_config();
    const ParamSet params = init_params(cfg, 29);
    const auto good = dir.path / "good.fcrp";
    save_checkpoint(params, good);
    std::ifstream in(good, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
    const auto truncated = dir.path / "truncated.fcrp";
    {
        std::ofstream out(truncated, std::ios::binary);
        out.write(bytes.data(),
                  static_cast<std::streamsize>(bytes.size() / 2));
    }
    CHECK_THROWS_AS(load_checkpoint(truncated), FormatError);

    const auto trailing = dir.path / "trailing.fcrp";
    {
        std::ofstream out(trailing, std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out << "junk";
    }
    CHECK_THROWS_AS(load_checkpoint(trailing), FormatError);
}

TEST_CASE("paramset congruence reports first mismatch", "[model]") {
    const ModelConfig cfg = tiny_config();
    ParamSet a = init_params(cfg, 31);
    ParamSet b = init_params(cfg, 31);
    CHECK_FALSE(a.first_incongruence(b).has_value());

    ModelConfig other = cfg;
    other.hidden_size = 8;
    other.num_heads = 2;
    ParamSet c = init_params(other, 31);
    const auto mismatch = a.first_incongruence(c);
    REQUIRE(mismatch.has_value());
    CHECK(mismatch->find("embeddings.word") != std::string::npos);
}
