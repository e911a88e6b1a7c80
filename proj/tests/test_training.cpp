#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "pip/training.hpp"

using namespace pip;

namespace {

Schema train_schema() {
    Schema s;
    s.name = "train";
    s.keys = {{"AA", "##"}, {"BB", "@@"}};
    s.l_max = 8;
    s.grid_width = 14;
    s.grid_height = 5;
    s.n_distractors = 1;
    return s;
}

ModelConfig train_config(AttentionMode mode) {
    ModelConfig cfg;
    cfg.d_model = 32;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ff = 64;
    cfg.max_seq_len = 96;
    cfg.max_rows = 8;
    cfg.max_cols = 16;
    cfg.vocab_size = Vocabulary::build(train_schema()).size();
    cfg.attention_mode = mode;
    return cfg;
}

std::vector<DocumentGrid> train_docs(int n, uint64_t seed0 = 100) {
    std::vector<DocumentGrid> docs;
    const Schema s = train_schema();
    for (int i = 0; i < n; ++i) docs.push_back(generate_document(seed0 + static_cast<uint64_t>(i), s));
    return docs;
}

OptimizerState fresh_opt(const Model& m, float lr) {
    OptimizerState opt;
    opt.config.learning_rate = lr;
    for (const auto& [name, t] : m.params) {
        AdamMoments<float> mom;
        mom.m.assign(t.data.size(), 0.0f);
        mom.v.assign(t.data.size(), 0.0f);
        opt.moments.push_back(std::move(mom));
    }
    return opt;
}

}  // namespace

TEST_CASE("pretrain reduces the masked-caption loss") {
    Model m = Model::random_init(train_config(AttentionMode::BIDIRECTIONAL));
    OptimizerState opt = fresh_opt(m, 3e-3f);
    TrainConfig cfg;
    cfg.stage = Stage::PRETRAIN;
    cfg.learning_rate = 3e-3f;
    cfg.epochs = 40;
    cfg.batch_size = 4;
    cfg.lambda = 0.5;
    cfg.rng_seed = 1;
    const TrainLog log = pretrain(m, opt, train_docs(8), Vocabulary::build(train_schema()), cfg);
    REQUIRE_FALSE(log.steps.empty());
    CHECK(log.final_loss < 0.7f * log.first_loss);
    CHECK(opt.step_count == static_cast<int64_t>(log.steps.size()));
    for (const auto& r : log.steps) {
        CHECK(std::isfinite(r.loss));
        CHECK(r.tokens_in_loss > 0);
    }
}

TEST_CASE("sft reduces loss and reports pad/eos share") {
    const Schema s = train_schema();
    const Vocabulary v = Vocabulary::build(s);
    Model m = Model::random_init(train_config(AttentionMode::BIDIRECTIONAL));
    OptimizerState opt = fresh_opt(m, 3e-3f);
    TrainConfig cfg;
    cfg.stage = Stage::SFT;
    cfg.learning_rate = 3e-3f;
    cfg.epochs = 40;
    cfg.batch_size = 4;
    cfg.rng_seed = 2;
    const TrainLog log = finetune_kv(m, opt, train_docs(8), s, v, cfg);
    CHECK(log.final_loss < 0.5f * log.first_loss);
    for (const auto& r : log.steps) {
        CHECK(r.pad_eos_fraction > 0.0);
        CHECK(r.pad_eos_fraction < 1.0);
        // every example supervises exactly n_keys * l_max slots
        CHECK(r.tokens_in_loss % (2 * s.l_max) == 0);
    }
}

TEST_CASE("ar baseline reduces loss") {
    const Schema s = train_schema();
    Model m = Model::random_init(train_config(AttentionMode::CAUSAL));
    OptimizerState opt = fresh_opt(m, 3e-3f);
    TrainConfig cfg;
    cfg.stage = Stage::AR_BASELINE;
    cfg.learning_rate = 3e-3f;
    cfg.epochs = 40;
    cfg.batch_size = 4;
    cfg.rng_seed = 3;
    const TrainLog log = train_ar_baseline(m, opt, train_docs(8), s, Vocabulary::build(s), cfg);
    CHECK(log.final_loss < 0.5f * log.first_loss);
}

TEST_CASE("training is deterministic: identical seeds give bit-identical checkpoints") {
    const Schema s = train_schema();
    const Vocabulary v = Vocabulary::build(s);
    const auto docs = train_docs(6);
    TrainConfig cfg;
    cfg.stage = Stage::PRETRAIN;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.rng_seed = 7;

    auto run = [&]() {
        Model m = Model::random_init(train_config(AttentionMode::BIDIRECTIONAL));
        OptimizerState opt = fresh_opt(m, 1e-3f);
        pretrain(m, opt, docs, v, cfg);
        return m;
    };
    const Model a = run();
    const Model b = run();
    for (size_t i = 0; i < a.params.size(); ++i) CHECK(a.params[i].second.data == b.params[i].second.data);

    TrainConfig other = cfg;
    other.rng_seed = 8;
    Model c = Model::random_init(train_config(AttentionMode::BIDIRECTIONAL));
    OptimizerState opt = fresh_opt(c, 1e-3f);
    pretrain(c, opt, docs, v, other);
    bool all_equal = true;
    for (size_t i = 0; i < a.params.size(); ++i)
        all_equal = all_equal && a.params[i].second.data == c.params[i].second.data;
    CHECK_FALSE(all_equal);
}

TEST_CASE("stage and attention mode must agree") {
    const Schema s = train_schema();
    const Vocabulary v = Vocabulary::build(s);
    const auto docs = train_docs(2);
    TrainConfig cfg;
    cfg.epochs = 1;

    Model causal = Model::random_init(train_config(AttentionMode::CAUSAL));
    OptimizerState opt1 = fresh_opt(causal, 1e-3f);
    cfg.stage = Stage::PRETRAIN;
    CHECK_THROWS_AS(pretrain(causal, opt1, docs, v, cfg), ConfigError);
    cfg.stage = Stage::SFT;
    CHECK_THROWS_AS(finetune_kv(causal, opt1, docs, s, v, cfg), ConfigError);

    Model bi = Model::random_init(train_config(AttentionMode::BIDIRECTIONAL));
    OptimizerState opt2 = fresh_opt(bi, 1e-3f);
    cfg.stage = Stage::AR_BASELINE;
    CHECK_THROWS_AS(train_ar_baseline(bi, opt2, docs, s, v, cfg), ConfigError);
}

TEST_CASE("training log jsonl is written") {
    const Schema s = train_schema();
    Model m = Model::random_init(train_config(AttentionMode::BIDIRECTIONAL));
    OptimizerState opt = fresh_opt(m, 1e-3f);
    TrainConfig cfg;
    cfg.stage = Stage::PRETRAIN;
    cfg.epochs = 1;
    const TrainLog log = pretrain(m, opt, train_docs(4), Vocabulary::build(s), cfg);
    const std::string path = "train_log_tmp.jsonl";
    log.write_jsonl(path);
    std::ifstream in(path);
    REQUIRE(in.good());
    std::string line;
    size_t lines = 0;
    while (std::getline(in, line))
        if (!line.empty()) ++lines;
    CHECK(lines == log.steps.size() + 1);  // steps plus a summary line
    std::remove(path.c_str());
}
