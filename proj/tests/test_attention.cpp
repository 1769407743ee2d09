#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "silobert/attention.hpp"
#include "silobert/model.hpp"
#include "silobert/rng.hpp"

using namespace silobert;
using Catch::Approx;

namespace {

/// Hand-built capture: one layer, two heads, chosen row distributions.
AttentionCapture synthetic_capture(
    const std::vector<std::vector<double>>& head_rows, std::size_t seq_len) {
    AttentionCapture cap;
    cap.num_layers = 1;
    cap.num_heads = head_rows.size();
    cap.seq_len = seq_len;
    cap.attn_mask.assign(seq_len, 1);
    cap.probs.resize(1);
    cap.probs[0].resize(head_rows.size());
    for (std::size_t h = 0; h < head_rows.size(); ++h) {
        cap.probs[0][h].clear();
        for (std::size_t i = 0; i < seq_len; ++i) {
            cap.probs[0][h].insert(cap.probs[0][h].end(),
                                   head_rows[h].begin(), head_rows[h].end());
        }
    }
    return cap;
}

std::vector<double> random_distribution(Rng& rng, std::size_t n) {
    std::vector<double> p(n);
    double total = 0.0;
    for (double& v : p) {
        v = rng.uniform() + 1e-6;
        total += v;
    }
    for (double& v : p) v /= total;
    return p;
}

}  // namespace

TEST_CASE("entropy of uniform and one-hot attention", "[attention]") {
    const std::size_t n = 8;
    std::vector<double> uniform(n, 1.0 / static_cast<double>(n));
    std::vector<double> onehot(n, 0.0);
    onehot[3] = 1.0;
    const auto cap = synthetic_capture({uniform, onehot}, n);
    const Tensor entropy = head_entropy(std::vector<AttentionCapture>{cap});
    REQUIRE(entropy.shape() == Shape{1, 2});
    CHECK(entropy.data()[0] == Approx(std::log(8.0)).margin(1e-12));
    CHECK(entropy.data()[1] == Approx(0.0).margin(1e-12));
}

TEST_CASE("entropy equals the direct summation oracle", "[attention]") {
    Rng rng(5);
    const std::size_t seq = 6;
    // build a capture whose rows differ per position
    AttentionCapture cap;
    cap.num_layers = 1;
    cap.num_heads = 1;
    cap.seq_len = seq;
    cap.attn_mask.assign(seq, 1);
    cap.probs.resize(1);
    cap.probs[0].resize(1);
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < seq; ++i) {
        rows.push_back(random_distribution(rng, seq));
        cap.probs[0][0].insert(cap.probs[0][0].end(), rows.back().begin(),
                               rows.back().end());
    }
    const Tensor entropy = head_entropy(std::vector<AttentionCapture>{cap});

    double expected = 0.0;  // brute-force mean of row entropies
    for (const auto& row : rows) {
        double h = 0.0;
        for (double p : row)
            if (p > 0.0) h -= p * std::log(p);
        expected += h;
    }
    expected /= static_cast<double>(seq);
    CHECK(entropy.data()[0] == Approx(expected).margin(1e-12));
}

TEST_CASE("entropy stays within its bounds", "[attention]") {
    Rng rng(7);
    const std::size_t seq = 9;
    std::vector<std::vector<double>> heads;
    for (int h = 0; h < 4; ++h) heads.push_back(random_distribution(rng, seq));
    const auto cap = synthetic_capture(heads, seq);
    const Tensor entropy = head_entropy(std::vector<AttentionCapture>{cap});
    for (double v : entropy.data()) {
        CHECK(v >= 0.0);
        CHECK(v <= std::log(static_cast<double>(seq)) + 1e-12);
    }
}

TEST_CASE("spearman textbook values", "[attention]") {
    const std::vector<double> x{1, 2, 3, 4};
    CHECK(spearman(x, x).value() == Approx(1.0));

    const std::vector<double> reversed{4, 3, 2, 1};
    CHECK(spearman(x, reversed).value() == Approx(-1.0));

    const std::vector<double> y{1, 3, 2, 4};
    CHECK(spearman(x, y).value() == Approx(0.8));
}

TEST_CASE("spearman handles ties with average ranks", "[attention]") {
    const std::vector<double> x{1, 2, 2, 3};
    const std::vector<double> y{10, 20, 20, 30};
    CHECK(spearman(x, y).value() == Approx(1.0));

    const std::vector<double> flat{5, 5, 5, 5};
    CHECK_FALSE(spearman(x, flat).has_value());

    CHECK_THROWS_AS(spearman(x, std::vector<double>{1.0}), ContractError);
}

TEST_CASE("spearman of any vector with itself is one", "[attention]") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> x(8);
        for (double& v : x) v = std::round(rng.uniform() * 5.0);
        bool distinct = false;
        for (double v : x) distinct = distinct || v != x[0];
        if (!distinct) x[0] += 1.0;
        CHECK(spearman(x, x).value() == Approx(1.0));
    }
}

TEST_CASE("jsd basic identities", "[attention]") {
    const std::vector<double> p{0.25, 0.25, 0.5};
    CHECK(jsd(p, p) == Approx(0.0).margin(1e-15));

    const std::vector<double> a{1.0, 0.0}, b{0.0, 1.0};
    CHECK(jsd(a, b) == Approx(std::log(2.0)).margin(1e-12));

    CHECK_THROWS_AS(jsd(p, std::vector<double>{0.5, 0.5}), ContractError);
    CHECK_THROWS_AS(jsd(std::vector<double>{0.9, 0.3},
                        std::vector<double>{0.5, 0.5}),
                    ContractError);
}

TEST_CASE("jsd is symmetric and bounded on random pairs", "[attention]") {
    Rng rng(13);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 2 + rng.uniform_int(6);
        const auto p = random_distribution(rng, n);
        const auto q = random_distribution(rng, n);
        const double pq = jsd(p, q);
        const double qp = jsd(q, p);
        CHECK(std::fabs(pq - qp) <= 1e-12);
        CHECK(pq >= 0.0);
        CHECK(pq <= std::log(2.0) + 1e-12);
    }
}

TEST_CASE("jsd head matrix is symmetric with zero diagonal", "[attention]") {
    Rng rng(17);
    const std::size_t seq = 7;
    std::vector<std::vector<double>> heads;
    for (int h = 0; h < 3; ++h) heads.push_back(random_distribution(rng, seq));
    const auto cap = synthetic_capture(heads, seq);
    const Tensor m = jsd_head_matrix(std::vector<AttentionCapture>{cap});
    REQUIRE(m.shape() == Shape{3, 3});
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(m.data()[i * 3 + i] == 0.0);
        for (std::size_t j = 0; j < 3; ++j) {
            CHECK(m.data()[i * 3 + j] == m.data()[j * 3 + i]);
            CHECK(m.data()[i * 3 + j] <= std::log(2.0) + 1e-12);
        }
    }
}

TEST_CASE("model distance identities and hand case", "[attention]") {
    Tensor a(Shape{2, 2}, {0.0, 0.3, 0.3, 0.0});
    Tensor b(Shape{2, 2}, {0.0, 0.1, 0.1, 0.0});
    CHECK(model_distance(a, a) == 0.0);
    // mean over all four entries: 2*|0.3-0.1| / 4 = |a-b|/2
    CHECK(model_distance(a, b, DistanceMode::kMean) == Approx(0.1));
    CHECK(model_distance(a, b, DistanceMode::kSum) == Approx(0.4));
    Tensor c(Shape{3, 3});
    CHECK_THROWS_AS(model_distance(a, c), ContractError);
}

TEST_CASE("model distance is a pseudometric", "[attention]") {
    Rng rng(19);
    auto random_matrix = [&](std::size_t n) {
        Tensor m(Shape{n, n});
        for (double& v : m.data()) v = rng.uniform();
        return m;
    };
    const auto a = random_matrix(4), b = random_matrix(4), c = random_matrix(4);
    const double ab = model_distance(a, b), ba = model_distance(b, a);
    const double ac = model_distance(a, c), cb = model_distance(c, b);
    CHECK(ab == Approx(ba).margin(1e-15));
    CHECK(ab >= 0.0);
    CHECK(ab <= ac + cb + 1e-12);
}

TEST_CASE("mds recovers an equilateral triangle", "[attention]") {
    const double d = 0.42;
    Tensor dist(Shape{3, 3},
                {0.0, d, d,
                 d, 0.0, d,
                 d, d, 0.0});
    const Tensor points = mds_project_2d(dist);
    REQUIRE(points.shape() == Shape{3, 2});
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = i + 1; j < 3; ++j) {
            const double dx = points.data()[i * 2] - points.data()[j * 2];
            const double dy =
                points.data()[i * 2 + 1] - points.data()[j * 2 + 1];
            CHECK(std::sqrt(dx * dx + dy * dy) == Approx(d).margin(1e-9));
        }
    }
}

TEST_CASE("mds maps the zero matrix to the origin", "[attention]") {
    Tensor zeros(Shape{4, 4});
    const Tensor points = mds_project_2d(zeros);
    for (double v : points.data()) CHECK(v == 0.0);
}

TEST_CASE("mds reconstructs a planted planar configuration", "[attention]") {
    const std::vector<std::pair<double, double>> planted{
        {0.0, 0.0}, {1.0, 0.0}, {1.0, 2.0}, {-0.5, 0.75}};
    const std::size_t n = planted.size();
    Tensor dist(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double dx = planted[i].first - planted[j].first;
            const double dy = planted[i].second - planted[j].second;
            dist.data()[i * n + j] = std::sqrt(dx * dx + dy * dy);
        }
    }
    const Tensor points = mds_project_2d(dist);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double dx = points.data()[i * 2] - points.data()[j * 2];
            const double dy =
                points.data()[i * 2 + 1] - points.data()[j * 2 + 1];
            CHECK(std::sqrt(dx * dx + dy * dy) ==
                  Approx(dist.data()[i * n + j]).margin(1e-6));
        }
    }
}

TEST_CASE("mds validates its input", "[attention]") {
    Tensor not_square(Shape{2, 3});
    CHECK_THROWS_AS(mds_project_2d(not_square), ContractError);

    Tensor bad_diag(Shape{2, 2}, {1.0, 0.5, 0.5, 0.0});
    CHECK_THROWS_AS(mds_project_2d(bad_diag), ContractError);

    Tensor asym(Shape{2, 2}, {0.0, 0.5, 0.25, 0.0});
    CHECK_THROWS_AS(mds_project_2d(asym), ContractError);
}

TEST_CASE("profiles computed from real captures keep all invariants",
          "[attention]") {
    ModelConfig cfg;
    cfg.num_layers = 2;
    cfg.hidden_size = 16;
    cfg.num_heads = 2;
    cfg.vocab_size = 50;
    cfg.max_seq_len = 16;
    const ParamSet params = init_params(cfg, 3);
    Rng rng(23);
    std::vector<AttentionCapture> captures;
    for (int s = 0; s < 6; ++s) {
        const std::size_t len = 3 + rng.uniform_int(8);
        std::vector<int> ids(len), segs(len, 0), mask(len, 1);
        for (auto& id : ids)
            id = static_cast<int>(5 + rng.uniform_int(40));
        Tape tape;
        ForwardOptions opt;
        opt.capture_attention = true;
        auto out = encoder_forward(tape, cfg, params, ids, segs, mask, opt);
        captures.push_back(std::move(*out.capture));
    }
    const AttentionProfile profile = profile_attention("model", captures);
    REQUIRE(profile.entropy.shape() == Shape{2, 2});
    REQUIRE(profile.jsd_matrix.shape() == Shape{4, 4});
    for (double v : profile.entropy.data()) {
        CHECK(v >= 0.0);
        CHECK(v <= std::log(16.0) + 1e-12);
    }
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j)
            CHECK(profile.jsd_matrix.data()[i * 4 + j] ==
                  profile.jsd_matrix.data()[j * 4 + i]);
    CHECK(model_distance(profile.jsd_matrix, profile.jsd_matrix) == 0.0);
}
