#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "migu/grad_check.hpp"
#include "migu/transformer.hpp"

using namespace migu;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.vocab_size = 32;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_blocks = 1;
    cfg.d_ffn = 12;
    cfg.n_classes = 3;
    cfg.max_seq = 8;
    return cfg;
}

std::vector<std::int32_t> random_tokens(Rng& rng, std::size_t count, std::size_t vocab) {
    std::vector<std::int32_t> tokens(count);
    for (auto& t : tokens) t = static_cast<std::int32_t>(rng.uniform_below(vocab));
    return tokens;
}

// Straight-line recomputation of the forward graph with plain loops over
// std::vector<double>. Shares nothing with the library's kernels.
std::vector<double> reference_forward(TinyTransformer<double>& model,
                                      const std::vector<std::int32_t>& tokens, std::size_t batch,
                                      std::size_t seq) {
    const auto& cfg = model.config();
    const std::size_t dm = cfg.d_model, heads = cfg.n_heads, dh = dm / heads;
    const std::size_t n = batch * seq;

    auto at = [](const Matrix<double>& m, std::size_t r, std::size_t c) { return m(r, c); };

    std::vector<std::vector<double>> x(n, std::vector<double>(dm));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t d = 0; d < dm; ++d) {
            x[i][d] = at(model.token_embedding().table, tokens[i], d) +
                      at(model.position_embedding().table, i % seq, d);
        }
    }

    auto linear = [&](const std::vector<std::vector<double>>& in, const Matrix<double>& w,
                      const Matrix<double>& b) {
        std::vector<std::vector<double>> out(in.size(), std::vector<double>(w.cols()));
        for (std::size_t i = 0; i < in.size(); ++i) {
            for (std::size_t j = 0; j < w.cols(); ++j) {
                double acc = b(0, j);
                for (std::size_t k = 0; k < w.rows(); ++k) acc += in[i][k] * w(k, j);
                out[i][j] = acc;
            }
        }
        return out;
    };

    auto layer_norm = [&](const std::vector<std::vector<double>>& in, const Matrix<double>& gamma,
                          const Matrix<double>& beta) {
        std::vector<std::vector<double>> out(in.size(), std::vector<double>(in[0].size()));
        for (std::size_t i = 0; i < in.size(); ++i) {
            double mean = 0.0;
            for (double v : in[i]) mean += v;
            mean /= static_cast<double>(in[i].size());
            double var = 0.0;
            for (double v : in[i]) var += (v - mean) * (v - mean);
            var /= static_cast<double>(in[i].size());
            const double istd = 1.0 / std::sqrt(var + 1e-5);
            for (std::size_t d = 0; d < in[i].size(); ++d) {
                out[i][d] = gamma(0, d) * ((in[i][d] - mean) * istd) + beta(0, d);
            }
        }
        return out;
    };

    for (auto& block : model.blocks()) {
        const auto q = linear(x, block.attn_q.base.weight, block.attn_q.base.bias);
        const auto k = linear(x, block.attn_k.base.weight, block.attn_k.base.bias);
        const auto v = linear(x, block.attn_v.base.weight, block.attn_v.base.bias);

        std::vector<std::vector<double>> concat(n, std::vector<double>(dm, 0.0));
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t h = 0; h < heads; ++h) {
                for (std::size_t s = 0; s < seq; ++s) {
                    std::vector<double> scores(seq);
                    for (std::size_t s2 = 0; s2 < seq; ++s2) {
                        double dot = 0.0;
                        for (std::size_t d = 0; d < dh; ++d) {
                            dot += q[b * seq + s][h * dh + d] * k[b * seq + s2][h * dh + d];
                        }
                        scores[s2] = dot / std::sqrt(static_cast<double>(dh));
                    }
                    double maxv = scores[0];
                    for (double sv : scores) maxv = std::max(maxv, sv);
                    double total = 0.0;
                    for (auto& sv : scores) {
                        sv = std::exp(sv - maxv);
                        total += sv;
                    }
                    for (std::size_t s2 = 0; s2 < seq; ++s2) {
                        const double weight = scores[s2] / total;
                        for (std::size_t d = 0; d < dh; ++d) {
                            concat[b * seq + s][h * dh + d] += weight * v[b * seq + s2][h * dh + d];
                        }
                    }
                }
            }
        }

        auto attn_out = linear(concat, block.attn_o.base.weight, block.attn_o.base.bias);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t d = 0; d < dm; ++d) attn_out[i][d] += x[i][d];
        }
        const auto x1 = layer_norm(attn_out, block.ln1.gamma, block.ln1.beta);

        auto hidden = linear(x1, block.ffn_1.base.weight, block.ffn_1.base.bias);
        for (auto& row : hidden) {
            for (auto& hv : row) hv = 0.5 * hv * (1.0 + std::erf(hv / std::sqrt(2.0)));
        }
        auto ffn_out = linear(hidden, block.ffn_2.base.weight, block.ffn_2.base.bias);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t d = 0; d < dm; ++d) ffn_out[i][d] += x1[i][d];
        }
        x = layer_norm(ffn_out, block.ln2.gamma, block.ln2.beta);
    }

    x = layer_norm(x, model.final_norm().gamma, model.final_norm().beta);
    std::vector<std::vector<double>> pooled(batch, std::vector<double>(dm, 0.0));
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t s = 0; s < seq; ++s) {
            for (std::size_t d = 0; d < dm; ++d) pooled[b][d] += x[b * seq + s][d] / static_cast<double>(seq);
        }
    }
    const auto logits = linear(pooled, model.head().base.weight, model.head().base.bias);
    std::vector<double> flat;
    for (const auto& row : logits) flat.insert(flat.end(), row.begin(), row.end());
    return flat;
}

}  // namespace

TEST(Model, AllZeroWeightsYieldClassifierBias) {
    auto cfg = tiny_config();
    TinyTransformer<float> model(cfg, 1);
    for (auto& ref : model.parameters()) ref.value->fill(0.0f);
    model.head().base.bias = Matrix<float>{{0.5f, -1.0f, 2.0f}};

    Rng rng(2);
    const auto tokens = random_tokens(rng, 2 * 4, cfg.vocab_size);
    const auto logits = model.forward(tokens, 2, 4);
    for (std::size_t b = 0; b < 2; ++b) {
        EXPECT_FLOAT_EQ(logits(b, 0), 0.5f);
        EXPECT_FLOAT_EQ(logits(b, 1), -1.0f);
        EXPECT_FLOAT_EQ(logits(b, 2), 2.0f);
    }
}

TEST(Model, IdenticalSequencesGiveIdenticalLogitRows) {
    auto cfg = tiny_config();
    TinyTransformer<float> model(cfg, 3);
    Rng rng(4);
    const auto one = random_tokens(rng, 4, cfg.vocab_size);
    std::vector<std::int32_t> tokens;
    for (int rep = 0; rep < 3; ++rep) tokens.insert(tokens.end(), one.begin(), one.end());
    const auto logits = model.forward(tokens, 3, 4);
    for (std::size_t b = 1; b < 3; ++b) {
        for (std::size_t c = 0; c < cfg.n_classes; ++c) EXPECT_EQ(logits(b, c), logits(0, c));
    }
}

TEST(Model, ForwardMatchesStraightLineReference) {
    auto cfg = tiny_config();
    TinyTransformer<double> model(cfg, 7);
    Rng rng(8);
    const std::size_t batch = 2, seq = 4;
    const auto tokens = random_tokens(rng, batch * seq, cfg.vocab_size);

    const auto logits = model.forward(tokens, batch, seq);
    const auto expected = reference_forward(model, tokens, batch, seq);
    ASSERT_EQ(expected.size(), batch * cfg.n_classes);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t c = 0; c < cfg.n_classes; ++c) {
            EXPECT_NEAR(logits(b, c), expected[b * cfg.n_classes + c], 1e-10);
        }
    }
}

TEST(Model, ForwardDeterministicAcrossInstances) {
    auto cfg = tiny_config();
    Rng rng(9);
    const auto tokens = random_tokens(rng, 8, cfg.vocab_size);
    TinyTransformer<float> m1(cfg, 42), m2(cfg, 42);
    EXPECT_EQ(m1.forward(tokens, 2, 4), m2.forward(tokens, 2, 4));
}

TEST(Model, OutOfRangeTokenRejected) {
    auto cfg = tiny_config();
    TinyTransformer<float> model(cfg, 1);
    std::vector<std::int32_t> tokens(4, static_cast<std::int32_t>(cfg.vocab_size));
    EXPECT_THROW(model.forward(tokens, 1, 4), ConfigError);
}

TEST(Model, DimensionValidation) {
    ModelConfig bad = tiny_config();
    bad.d_model = 10;
    bad.n_heads = 4;
    EXPECT_THROW(TinyTransformer<float>(bad, 1), ConfigError);
}

TEST(Model, RegistryListsSixLinearsPerBlock) {
    auto cfg = tiny_config();
    cfg.n_blocks = 2;
    TinyTransformer<float> model(cfg, 1);
    std::size_t count = 0;
    model.each_component([&count](std::size_t, const std::string&, AdaptedLinear<float>&) { ++count; });
    EXPECT_EQ(count, 12u);

    cfg.gated_ffn = true;
    TinyTransformer<float> gated(cfg, 1);
    count = 0;
    std::set<std::string> names;
    gated.each_component([&](std::size_t, const std::string& comp, AdaptedLinear<float>&) {
        ++count;
        names.insert(comp);
    });
    EXPECT_EQ(count, 14u);
    EXPECT_TRUE(names.count("ffn_3"));
}

TEST(Model, AttachMiguScopesExactlyToSelector) {
    auto cfg = tiny_config();
    cfg.n_blocks = 2;
    TinyTransformer<float> model(cfg, 5);
    MiguConfig migu;
    migu.components = parse_components("ffn_first");
    model.attach_migu(migu);
    model.each_component([](std::size_t, const std::string& comp, AdaptedLinear<float>& lin) {
        EXPECT_EQ(lin.base.instrumented, comp == "ffn_1") << comp;
    });

    migu.components = parse_components("all");
    model.attach_migu(migu);
    model.each_component([](std::size_t, const std::string&, AdaptedLinear<float>& lin) {
        EXPECT_TRUE(lin.base.instrumented);
    });
}

TEST(Model, AttachMiguRefusesUnknownComponent) {
    TinyTransformer<float> model(tiny_config(), 5);
    MiguConfig migu;
    migu.components = {"ffn_9"};
    try {
        model.attach_migu(migu);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        const std::string what = e.what();
        EXPECT_NE(what.find("ffn_9"), std::string::npos);
        EXPECT_NE(what.find("attn_q"), std::string::npos);  // lists valid names
    }
}

TEST(Model, AttachMiguRequiresNonemptySelector) {
    TinyTransformer<float> model(tiny_config(), 5);
    MiguConfig migu;
    EXPECT_THROW(model.attach_migu(migu), ConfigError);
}

TEST(Model, InstrumentedCachesFreshAfterTrainForward) {
    auto cfg = tiny_config();
    TinyTransformer<float> model(cfg, 6);
    MiguConfig migu;
    migu.components = parse_components("all");
    model.attach_migu(migu);
    Rng rng(7);
    const auto tokens = random_tokens(rng, 8, cfg.vocab_size);
    std::vector<std::int32_t> labels{0, 1};
    model.loss(tokens, labels, 2, 4, Pass::train, 17);
    model.each_component([](std::size_t, const std::string&, AdaptedLinear<float>& lin) {
        EXPECT_TRUE(lin.base.cache.fresh_for(17)) << lin.base.name;
        EXPECT_EQ(lin.base.cache.n.size(), lin.base.d_out());
    });
}

TEST(Model, EvalForwardDoesNotTouchCaches) {
    auto cfg = tiny_config();
    TinyTransformer<float> model(cfg, 6);
    MiguConfig migu;
    migu.components = parse_components("all");
    model.attach_migu(migu);
    Rng rng(8);
    const auto tokens = random_tokens(rng, 8, cfg.vocab_size);
    std::vector<std::int32_t> labels{0, 1};
    model.loss(tokens, labels, 2, 4, Pass::train, 3);
    const auto frozen_time = model.blocks()[0].ffn_1.base.cache.freshness;
    model.forward(random_tokens(rng, 8, cfg.vocab_size), 2, 4, Pass::infer);
    EXPECT_EQ(model.blocks()[0].ffn_1.base.cache.freshness, frozen_time);
}

namespace {

// End-to-end finite differences on a 16-entry subset of one parameter.
void check_sampled_entries(TinyTransformer<double>& model, ParamRef<double>& ref,
                           const std::vector<std::int32_t>& tokens,
                           const std::vector<std::int32_t>& labels, std::size_t batch, std::size_t seq,
                           Rng& pick) {
    const double eps = 1e-4;
    const std::size_t total = ref.value->size();
    std::vector<std::size_t> entries;
    if (total <= 16) {
        for (std::size_t i = 0; i < total; ++i) entries.push_back(i);
    } else {
        std::set<std::size_t> chosen;
        while (chosen.size() < 16) chosen.insert(pick.uniform_below(total));
        entries.assign(chosen.begin(), chosen.end());
    }
    for (std::size_t flat : entries) {
        double& slot = ref.value->storage()[flat];
        const double saved = slot;
        slot = saved + eps;
        const double up = model.loss(tokens, labels, batch, seq, Pass::infer);
        slot = saved - eps;
        const double down = model.loss(tokens, labels, batch, seq, Pass::infer);
        slot = saved;
        const double numeric = (up - down) / (2.0 * eps);
        const double analytic = ref.grad->storage()[flat];
        EXPECT_LT(grad_rel_error(analytic, numeric), 1e-3)
            << ref.name << " entry " << flat << ": analytic " << analytic << " numeric " << numeric;
    }
}

void run_end_to_end_check(bool gated) {
    ModelConfig cfg;
    cfg.vocab_size = 24;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_blocks = 2;
    cfg.d_ffn = 10;
    cfg.n_classes = 3;
    cfg.max_seq = 6;
    cfg.gated_ffn = gated;
    TinyTransformer<double> model(cfg, 11);

    Rng rng(12);
    const std::size_t batch = 2, seq = 4;
    const auto tokens = random_tokens(rng, batch * seq, cfg.vocab_size);
    std::vector<std::int32_t> labels{1, 2};

    model.zero_grads();
    model.loss(tokens, labels, batch, seq, Pass::train);
    model.backward();

    Rng pick(13);
    for (auto& ref : model.parameters()) {
        check_sampled_entries(model, ref, tokens, labels, batch, seq, pick);
    }
}

}  // namespace

TEST(Model, EndToEndGradientsMatchFiniteDifferences) { run_end_to_end_check(false); }

TEST(Model, EndToEndGradientsMatchFiniteDifferencesGatedFfn) { run_end_to_end_check(true); }
