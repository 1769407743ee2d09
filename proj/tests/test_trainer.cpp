#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <vector>

#include "silobert/data.hpp"
#include "silobert/model.hpp"
#include "silobert/trainer.hpp"

using namespace silobert;
using Catch::Approx;

namespace {

ParamSet scalar_params(double x) {
    ParamSet p;
    p.add("x", Tensor::scalar(x, true));
    return p;
}

ModelConfig trainer_model() {
    ModelConfig cfg;
    cfg.num_layers = 1;
    cfg.hidden_size = 16;
    cfg.num_heads = 2;
    cfg.vocab_size = 60;
    cfg.max_seq_len = 32;
    cfg.dropout_p = 0.1;
    return cfg;
}

std::vector<NerEncoded> templated_ner_data(const Vocab& vocab,
                                           const Corpus& corpus,
                                           std::size_t count) {
    std::vector<NerEncoded> out;
    for (std::size_t i = 0; i < corpus.examples.size() && out.size() < count;
         ++i) {
        out.push_back(encode_ner_example(vocab, corpus.examples[i], 32));
    }
    return out;
}

}  // namespace

TEST_CASE("adam with zero gradient leaves parameters unchanged", "[trainer]") {
    ParamSet params = scalar_params(1.5);
    params.at("x").grad();  // allocate zero gradient
    AdamState state(params);
    TrainerConfig cfg;
    cfg.learning_rate = 0.1;
    adam_step(params, state, cfg);
    CHECK(params.at("x").value() == 1.5);
    CHECK(state.m[0][0] == 0.0);
    CHECK(state.v[0][0] == 0.0);
    CHECK(state.step == 1);
}

TEST_CASE("adam moments decay without gradient", "[trainer]") {
    ParamSet params = scalar_params(1.0);
    AdamState state(params);
    state.m[0][0] = 1.0;
    state.v[0][0] = 1.0;
    TrainerConfig cfg;
    // no gradient buffer at all: only the moments decay
    adam_step(params, state, cfg);
    CHECK(params.at("x").value() == 1.0);
    CHECK(state.m[0][0] == Approx(cfg.beta1));
    CHECK(state.v[0][0] == Approx(cfg.beta2));
}

TEST_CASE("first adam step moves against the gradient by about lr",
          "[trainer]") {
    ParamSet params = scalar_params(0.0);
    params.at("x").grad()[0] = 1.0;
    AdamState state(params);
    TrainerConfig cfg;
    cfg.learning_rate = 0.01;
    adam_step(params, state, cfg);
    CHECK(params.at("x").value() < 0.0);
    CHECK(params.at("x").value() == Approx(-cfg.learning_rate).epsilon(1e-3));
}

TEST_CASE("adam drives a quadratic to its minimum", "[trainer]") {
    ParamSet params = scalar_params(0.0);
    AdamState state(params);
    TrainerConfig cfg;
    cfg.learning_rate = 0.1;
    for (int step = 0; step < 200; ++step) {
        params.zero_grad();
        const double x = params.at("x").value();
        params.at("x").grad()[0] = 2.0 * (x - 3.0);
        adam_step(params, state, cfg);
    }
    CHECK(std::fabs(params.at("x").value() - 3.0) < 0.05);
}

TEST_CASE("non-finite gradients raise divergence", "[trainer]") {
    ParamSet params = scalar_params(1.0);
    params.at("x").grad()[0] = std::numeric_limits<double>::quiet_NaN();
    AdamState state(params);
    TrainerConfig cfg;
    CHECK_THROWS_AS(adam_step(params, state, cfg), DivergenceError);
}

TEST_CASE("global norm clipping bounds the gradient", "[trainer]") {
    ParamSet params;
    params.add("a", Tensor(Shape{3}, {0.0, 0.0, 0.0}, true));
    params.add("b", Tensor(Shape{2}, {0.0, 0.0}, true));
    auto ga = params.at("a").grad();
    ga[0] = 3.0;
    ga[1] = 4.0;
    params.at("b").grad()[0] = 12.0;  // norm = 13
    const double before = clip_global_norm(params, 1.0);
    CHECK(before == Approx(13.0));
    double sq = 0.0;
    for (const auto& [name, t] : params.entries())
        for (double g : t.grad()) sq += g * g;
    CHECK(std::sqrt(sq) <= 1.0 + 1e-9);

    // norms already under the bound stay untouched
    ParamSet small;
    small.add("x", Tensor::scalar(0.0, true));
    small.at("x").grad()[0] = 0.5;
    clip_global_norm(small, 1.0);
    CHECK(small.at("x").grad()[0] == 0.5);
}

TEST_CASE("training epochs are deterministic", "[trainer]") {
    CorpusSpec cspec;
    cspec.seed = 3;
    cspec.num_patients = 10;
    cspec.notes_per_patient = 2;
    const Corpus corpus = generate_corpus(cspec);
    const Vocab vocab = build_vocab(corpus.documents, 256);
    ModelConfig mcfg = trainer_model();
    mcfg.vocab_size = vocab.size();

    const auto examples = make_mlm_examples(vocab, corpus.documents, 32, 5);
    REQUIRE_FALSE(examples.empty());
    TrainerConfig tcfg;
    tcfg.learning_rate = 1e-3;
    tcfg.batch_size = 4;
    tcfg.seed = 17;

    auto run = [&]() {
        ParamSet params = init_params(mcfg, 7);
        const EpochResult r =
            train_epoch_pretrain(params, mcfg, examples, tcfg);
        return std::make_pair(params, r.mean_loss);
    };
    auto [p1, l1] = run();
    auto [p2, l2] = run();
    CHECK(l1 == l2);
    for (std::size_t i = 0; i < p1.size(); ++i) {
        const auto& ta = p1.entries()[i].second;
        const auto& tb = p2.entries()[i].second;
        for (std::size_t e = 0; e < ta.numel(); ++e)
            REQUIRE(ta.data()[e] == tb.data()[e]);
    }
}

TEST_CASE("fine-tuning on templated sentences halves the loss", "[trainer]") {
    CorpusSpec cspec;
    cspec.seed = 11;
    cspec.num_patients = 12;
    cspec.notes_per_patient = 2;
    const Corpus corpus = generate_corpus(cspec);
    const Vocab vocab = build_vocab(corpus.documents, 256);
    ModelConfig mcfg = trainer_model();
    mcfg.vocab_size = vocab.size();
    mcfg.dropout_p = 0.0;

    const auto data = templated_ner_data(vocab, corpus, 50);
    REQUIRE(data.size() == 50);
    ParamSet params = init_params(mcfg, 21);
    TrainerConfig tcfg;
    tcfg.learning_rate = 2e-3;
    tcfg.batch_size = 4;
    tcfg.seed = 3;

    double initial = 0.0, final = 0.0;
    for (int epoch = 0; epoch < 4; ++epoch) {
        TrainerConfig ecfg = tcfg;
        ecfg.seed = derive_seed(tcfg.seed, static_cast<std::uint64_t>(epoch));
        const EpochResult r = train_epoch_finetune(params, mcfg, data, ecfg);
        if (epoch == 0) initial = r.mean_loss;
        final = r.mean_loss;
    }
    CHECK(final < 0.5 * initial);
}

TEST_CASE("a batch larger than the dataset is one valid batch", "[trainer]") {
    CorpusSpec cspec;
    cspec.seed = 13;
    cspec.num_patients = 5;
    cspec.notes_per_patient = 1;
    cspec.min_sentences = 3;
    cspec.max_sentences = 4;
    const Corpus corpus = generate_corpus(cspec);
    const Vocab vocab = build_vocab(corpus.documents, 256);
    ModelConfig mcfg = trainer_model();
    mcfg.vocab_size = vocab.size();

    const auto data = templated_ner_data(vocab, corpus, 6);
    REQUIRE(data.size() >= 2);
    ParamSet params = init_params(mcfg, 9);
    TrainerConfig tcfg;
    tcfg.learning_rate = 1e-3;
    tcfg.batch_size = 512;  // far larger than the data
    tcfg.seed = 1;
    const EpochResult r = train_epoch_finetune(params, mcfg, data, tcfg);
    CHECK(std::isfinite(r.mean_loss));
    CHECK(r.mean_loss > 0.0);
}

TEST_CASE("trainer config validation", "[trainer]") {
    TrainerConfig cfg;
    cfg.learning_rate = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TrainerConfig{};
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
