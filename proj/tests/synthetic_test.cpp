#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "kvrelay/compressors.hpp"
#include "kvrelay/error.hpp"
#include "kvrelay/synthetic.hpp"
#include "oracles.hpp"

using namespace kvrelay;

TEST(CounterRng, ReferenceValues) {
    // SplitMix64 from state 0: first output is mix64(γ).
    EXPECT_EQ(mix64(0x9E3779B97F4A7C15ULL), 0xE220A8397B1DCDAFULL);
    EXPECT_EQ(CounterRng(0).bits(0), 0xE220A8397B1DCDAFULL);
    EXPECT_EQ(CounterRng(0).bits(1), 0x6E789E6AA1B965F4ULL);
}

TEST(CounterRng, StreamsAreIndependentAndPure) {
    const auto a = CounterRng::stream(42, {1, 0, 0, 1});
    const auto b = CounterRng::stream(42, {1, 0, 0, 2});
    const auto c = CounterRng::stream(43, {1, 0, 0, 1});
    EXPECT_EQ(a.bits(17), CounterRng::stream(42, {1, 0, 0, 1}).bits(17));
    EXPECT_NE(a.key(), b.key());
    EXPECT_NE(a.key(), c.key());
    std::set<std::uint64_t> seen;
    for (std::uint64_t n = 0; n < 1000; ++n) seen.insert(a.bits(n));
    EXPECT_EQ(seen.size(), 1000u);
}

TEST(CounterRng, Distributions) {
    const auto r = CounterRng::stream(7, {});
    double sum = 0.0, sq = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double u = r.uniform(i);
        ASSERT_GT(u, 0.0);
        ASSERT_LT(u, 1.0);
        const double z = r.normal(i);
        sum += z;
        sq += z * z;
    }
    EXPECT_NEAR(sum / n, 0.0, 0.05);
    EXPECT_NEAR(sq / n, 1.0, 0.05);
}

TEST(TinyAttention, Examples) {
    const Matrix q{{1, 2}, {-3, 0.5}, {0, 0}};
    const auto single = tiny_attention_forward(Matrix{{0.3, -1}}, q, 0.7);
    for (std::size_t t = 0; t < 3; ++t) EXPECT_EQ(single(t, 0), 1.0);

    const auto same = tiny_attention_forward(Matrix{{1, 1}, {1, 1}, {1, 1}, {1, 1}}, q, 0.7);
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(same(t, j), 0.25, 1e-15);

    const auto flat = tiny_attention_forward(Matrix{{1, 0}, {0, 5}, {-2, 3}}, q, 0.0);
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(flat(t, j), 1.0 / 3.0, 1e-15);

    try {
        tiny_attention_forward(Matrix(2, 3), q, 1.0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::DimensionMismatch);
    }
}

TEST(TinyAttention, MatchesDirectSoftmax) {
    std::mt19937_64 rng(3);
    const Matrix k = oracle::random_matrix(rng, 9, 5);
    const Matrix q = oracle::random_matrix(rng, 4, 5);
    const auto w = tiny_attention_forward(k, q, 0.5);
    const Eigen::MatrixXd logits = 0.5 * oracle::to_eigen(q) * oracle::to_eigen(k).transpose();
    for (Eigen::Index t = 0; t < logits.rows(); ++t) {
        const Eigen::RowVectorXd e = logits.row(t).array().exp();
        const double s = e.sum();
        for (Eigen::Index j = 0; j < logits.cols(); ++j) EXPECT_NEAR(w(t, j), e(j) / s, 1e-14);
        EXPECT_NEAR(oracle::to_eigen(w).row(t).sum(), 1.0, 1e-12);
    }
}

TEST(GenerateEpisode, LayoutAndPurity) {
    EpisodeSpec s;
    s.seed = 9;
    s.key_dim = 8;
    s.value_dim = 8;
    s.prompt_lens = {12, 10};
    s.pad_lens = {3, 0};
    s.gen_len = 5;
    const auto r1 = generate_episode(s, 1);
    const auto r2 = generate_episode(s, 2);
    EXPECT_EQ(r1.padding, IndexList::range(0, 3));
    EXPECT_EQ(r1.prompt, IndexList::range(0, 15));
    EXPECT_EQ(r1.generation, IndexList::range(15, 20));
    EXPECT_TRUE(r2.padding.empty());
    EXPECT_EQ(r2.prompt, IndexList::range(20, 30));
    EXPECT_EQ(r2.generation, IndexList::range(30, 35));

    const auto again = generate_episode(s, 1);
    EXPECT_EQ(again.local, r1.local);
    EXPECT_EQ(again.attention.all_weights(), r1.attention.all_weights());

    // Padding columns get no attention; step s sees itself but not s + 1.
    for (const auto& w : r1.attention.all_weights()) {
        for (std::size_t t = 0; t < w.rows(); ++t) {
            for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(w(t, j), 0.0);
            EXPECT_GT(w(t, 15 + t), 0.0);
            if (15 + t + 1 < w.cols()) EXPECT_EQ(w(t, 15 + t + 1), 0.0);
        }
    }
    EXPECT_THROW(generate_episode(s, 3), Error);
}

TEST(GenerateEpisode, RowStochastic) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        EpisodeSpec s;
        s.seed = seed;
        for (int round = 1; round <= 3; ++round) {
            EXPECT_LE(max_row_stochastic_error(generate_episode(s, round).attention), 1e-12);
        }
    }
}

TEST(GenerateEpisode, LowRankValues) {
    EpisodeSpec s;
    s.seed = 4;
    s.value_dim = 8;
    s.value_structure = ValueStructure::LowRank;
    s.structure_rank = 2;
    const auto r = generate_episode(s, 2);
    for (const auto& v : r.local.all_values()) {
        // Eigen's rank-revealing QR as the rank oracle.
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(oracle::to_eigen(v));
        qr.setThreshold(1e-10);
        EXPECT_LE(qr.rank(), 2);
        EXPECT_LE(numeric_rank(v, 1e-10), 2u);
    }
}

TEST(GenerateEpisode, PlantedInSpanResidualVanishes) {
    EpisodeSpec s;
    s.seed = 12;
    s.value_structure = ValueStructure::PlantedInSpan;
    const auto r = generate_episode(s, 2);
    const auto keep = IndexList::range(r.prompt.front(), r.prompt.front() + 32);
    const auto del = set_difference(r.prompt, keep);
    for (std::size_t l = 0; l < s.num_layers; ++l) {
        for (std::size_t h = 0; h < s.num_kv_heads; ++h) {
            const auto split =
                obf_residual(select(r.local, keep).values(l, h), select(r.local, del).values(l, h));
            EXPECT_LE(frobenius_norm(split.residual), 1e-8);
        }
    }
}

TEST(EpisodeSpec, Validation) {
    EpisodeSpec s;
    s.value_dim = 0;
    EXPECT_THROW(s.validate(), Error);
    s = EpisodeSpec{};
    s.pad_lens = {1};
    EXPECT_THROW(s.validate(), Error);
    EXPECT_EQ(parse_value_structure("planted_in_span"), ValueStructure::PlantedInSpan);
    EXPECT_THROW(parse_value_structure("sparse"), Error);
}
