// Transformer forward/backward, optimizer, schedule, training loop, decoding.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "pqlr/tokenizer.hpp"
#include "pqlr/model.hpp"

using namespace pqlr;

namespace {

ModelConfig tiny_config(bool tied) {
    ModelConfig cfg;
    cfg.vocab_size = 23;
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ff = 24;
    cfg.max_seq_len = 12;
    cfg.tie_embeddings = tied;
    return cfg;
}

TokenBatch tiny_batch() {
    TokenBatch b;
    b.tokens = {{3, 7, 11, 2, 5, 9}, {4, 8, 2, 6, 1, 0}};
    b.targets = {{-1, -1, -1, 5, 9, 1}, {-1, -1, 6, 1, -1, -1}};
    return b;
}

} // namespace

TEST_CASE("analytic gradients match central finite differences (double precision)") {
    for (bool tied : {true, false}) {
        CAPTURE(tied);
        ModelConfig cfg = tiny_config(tied);
        Rng rng(17);
        ParamMap<double> params = init_parameters<double>(cfg, rng, 0.05);
        auto w = ModelWeights<double>::from_params(params, cfg);
        TokenBatch batch = tiny_batch();
        auto lg = transformer_loss_and_grads(w, cfg, batch);
        REQUIRE(lg.grads.count("tok_emb") == 1);

        const double h = 1e-6;
        Rng pick(99);
        for (const auto& [name, g] : lg.grads) {
            // Probe a few coordinates per tensor.
            for (int probe = 0; probe < 4; ++probe) {
                const std::size_t i = pick.below(g.size());
                const double orig = params.at(name).data[i];
                params.at(name).data[i] = orig + h;
                auto wp = ModelWeights<double>::from_params(params, cfg);
                const double lp = transformer_loss_and_grads(wp, cfg, batch).loss;
                params.at(name).data[i] = orig - h;
                auto wm = ModelWeights<double>::from_params(params, cfg);
                const double lm = transformer_loss_and_grads(wm, cfg, batch).loss;
                params.at(name).data[i] = orig;
                const double fd = (lp - lm) / (2 * h);
                const double tol = 1e-6 + 1e-4 * std::max(std::abs(fd), std::abs(g.data[i]));
                CAPTURE(name);
                CAPTURE(i);
                CHECK(std::abs(g.data[i] - fd) < tol);
            }
        }
    }
}

TEST_CASE("attention is causal: future tokens cannot change earlier logits") {
    ModelConfig cfg = tiny_config(true);
    Rng rng(5);
    Parameters params = init_parameters<float>(cfg, rng, 0.05);
    auto w = ModelWeights<float>::from_params(params, cfg);
    TokenBatch a, b;
    a.tokens = {{3, 4, 5, 6, 7}};
    b.tokens = {{3, 4, 5, 21, 22}}; // differs only at positions 3 and 4
    a.targets = b.targets = {{-1, -1, -1, -1, -1}};
    Tensor la = transformer_forward<float>(w, cfg, a, nullptr);
    Tensor lb = transformer_forward<float>(w, cfg, b, nullptr);
    const std::size_t v = static_cast<std::size_t>(cfg.vocab_size);
    for (std::size_t pos = 0; pos < 3; ++pos)
        for (std::size_t j = 0; j < v; ++j)
            CHECK(la.data[pos * v + j] == lb.data[pos * v + j]);
    // And position 3 does change.
    bool diff = false;
    for (std::size_t j = 0; j < v; ++j) diff = diff || la.data[3 * v + j] != lb.data[3 * v + j];
    CHECK(diff);
}

TEST_CASE("zero-layer model equals the closed-form embed->norm->project pipeline") {
    ModelConfig cfg = tiny_config(false);
    cfg.n_layers = 0;
    Rng rng(21);
    Parameters params = init_parameters<float>(cfg, rng, 0.1);
    auto w = ModelWeights<float>::from_params(params, cfg);
    TokenBatch b;
    b.tokens = {{3, 9, 14}};
    b.targets = {{-1, -1, -1}};
    Tensor logits = transformer_forward<float>(w, cfg, b, nullptr);

    const std::size_t d = 16;
    Tensor x = Tensor::zeros({3, d});
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t j = 0; j < d; ++j)
            x.at(t, j) = params.at("tok_emb").at(static_cast<std::size_t>(b.tokens[0][t]), j) +
                         params.at("pos_emb").at(t, j);
    Tensor f = layer_norm_rows(x, params.at("final_ln.g"), params.at("final_ln.b"), 1e-5f);
    Tensor expect = matmul_nt(f, params.at("head"));
    REQUIRE(logits.shape == expect.shape);
    for (std::size_t i = 0; i < expect.size(); ++i)
        CHECK(logits.data[i] == doctest::Approx(expect.data[i]).epsilon(1e-5));
}

TEST_CASE("initial loss is close to log(vocab) under small random init") {
    ModelConfig cfg = tiny_config(true);
    Rng rng(2);
    Parameters params = init_parameters<float>(cfg, rng, 0.02);
    auto w = ModelWeights<float>::from_params(params, cfg);
    TokenBatch batch = tiny_batch();
    auto lg = transformer_loss_and_grads(w, cfg, batch);
    CHECK(lg.loss == doctest::Approx(std::log(23.0)).epsilon(0.05));
}

TEST_CASE("freezing every parameter yields an empty gradient map but a valid loss") {
    ModelConfig cfg = tiny_config(true);
    Rng rng(2);
    Parameters params = init_parameters<float>(cfg, rng);
    auto w = ModelWeights<float>::from_params(params, cfg);
    std::set<std::string> frozen;
    for (const auto& [k, v] : params) frozen.insert(k);
    auto lg = transformer_loss_and_grads(w, cfg, tiny_batch(), frozen);
    CHECK(lg.grads.empty());
    CHECK(std::isfinite(lg.loss));
}

TEST_CASE("lr schedule: warmup then linear or cosine decay to zero") {
    LrSchedule s;
    s.base_lr = 3e-5;
    s.total_steps = 100;
    s.warmup_steps = 10;
    s.kind = LrSchedule::Kind::linear;
    CHECK(lr_at_step(s, 0) == doctest::Approx(0.0));
    CHECK(lr_at_step(s, 5) == doctest::Approx(1.5e-5));
    CHECK(lr_at_step(s, 10) == doctest::Approx(3e-5));
    CHECK(lr_at_step(s, 55) == doctest::Approx(3e-5 * 0.5));
    CHECK(lr_at_step(s, 100) == doctest::Approx(0.0));
    s.kind = LrSchedule::Kind::cosine;
    CHECK(lr_at_step(s, 10) == doctest::Approx(3e-5));
    CHECK(lr_at_step(s, 55) == doctest::Approx(1.5e-5));
    CHECK(lr_at_step(s, 100) == doctest::Approx(0.0).scale(3e-5));
    CHECK_THROWS_AS(lr_at_step(s, 101), UsageError);
    CHECK_THROWS_AS(lr_at_step(s, -1), UsageError);
    // No warmup, no decay span: constant base rate.
    LrSchedule flat;
    flat.base_lr = 2e-4;
    flat.total_steps = 0;
    CHECK(lr_at_step(flat, 0) == doctest::Approx(2e-4));
}

TEST_CASE("adamw: first-step update approaches -lr*sign(g); decay is decoupled") {
    Parameters p{{"w", Tensor({2}, {1.0f, -2.0f})}};
    Parameters g{{"w", Tensor({2}, {10.0f, -0.5f})}};
    OptimizerState st;
    adamw_step(p, g, st, 0.1f);
    // Bias-corrected mhat = g, vhat = g^2, so step ~ lr*sign(g).
    CHECK(p.at("w").data[0] == doctest::Approx(1.0 - 0.1).epsilon(1e-4));
    CHECK(p.at("w").data[1] == doctest::Approx(-2.0 + 0.1).epsilon(1e-4));

    // Zero gradient with weight decay: pure multiplicative shrink.
    Parameters p2{{"w", Tensor({1}, {4.0f})}};
    Parameters g2{{"w", Tensor({1}, {0.0f})}};
    OptimizerState st2;
    st2.hp.weight_decay = 0.01f;
    adamw_step(p2, g2, st2, 0.5f);
    CHECK(p2.at("w").data[0] == doctest::Approx(4.0 - 0.5 * 0.01 * 4.0));

    // Unknown gradient entry is a shape error.
    Parameters gbad{{"missing", Tensor({1}, {1.0f})}};
    CHECK_THROWS_AS(adamw_step(p2, gbad, st2, 0.1f), ShapeError);
}

TEST_CASE("training is deterministic and reduces loss over two epochs") {
    ModelConfig cfg = tiny_config(true);
    std::vector<TokenizedSample> data;
    for (int i = 0; i < 24; ++i) {
        // prompt [3, 4, 5+i%5], SEP, response token 10+i%5, EOS
        int x = i % 5;
        TokenizedSample s;
        s.tokens = {3, 4, 5 + x, CharTokenizer::kSep, 10 + x};
        s.targets = {kIgnoreIndex, kIgnoreIndex, kIgnoreIndex, 10 + x, CharTokenizer::kEos};
        data.push_back(s);
    }
    TrainConfig tc;
    tc.batch_size = 8;
    tc.seed = 42;
    tc.schedule.base_lr = 1e-3;
    CHECK(tc.epochs == 2); // two passes by default

    Rng r1(1), r2(1);
    Parameters pa = init_parameters<float>(cfg, r1);
    Parameters pb = init_parameters<float>(cfg, r2);
    TrainLog la = train_sft(pa, cfg, data, tc);
    TrainLog lb = train_sft(pb, cfg, data, tc);
    CHECK(la.lines == lb.lines);
    for (const auto& [k, v] : pa)
        CHECK(std::memcmp(v.data.data(), pb.at(k).data.data(), v.size() * sizeof(float)) == 0);
    REQUIRE(la.per_epoch_mean_loss.size() == 2);
    CHECK(la.per_epoch_mean_loss[1] < la.per_epoch_mean_loss[0]);
}

TEST_CASE("greedy decoding is deterministic and honors truncation and EOS") {
    ModelConfig cfg = tiny_config(true);
    cfg.max_seq_len = 16;
    Rng rng(4);
    Parameters params = init_parameters<float>(cfg, rng);
    auto w = ModelWeights<float>::from_params(params, cfg);
    std::vector<int> prompt{5, 6, 7, 8, 9, 10, 11, 12};
    auto a = generate_greedy(w, cfg, prompt, 8, 5);
    auto b = generate_greedy(w, cfg, prompt, 8, 5);
    CHECK(a == b);
    CHECK(a.size() <= 5); // only newly generated tokens come back

    // Left truncation: only the last max_input prompt tokens matter.
    std::vector<int> longp{3, 4, 5, 6, 7, 8, 9, 10, 11, 12};
    std::vector<int> tail(longp.end() - 4, longp.end());
    CHECK(generate_greedy(w, cfg, longp, 4, 5) ==
          generate_greedy(w, cfg, tail, 4, 5));
}

TEST_CASE("model config validation rejects bad head counts") {
    ModelConfig cfg;
    cfg.d_model = 10;
    cfg.n_heads = 3;
    CHECK_THROWS_AS(cfg.validate(), UsageError);
}
