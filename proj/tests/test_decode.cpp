#include <doctest.h>

#include "pip/decode.hpp"
#include "pip/training.hpp"

using namespace pip;

namespace {

Schema decode_schema() {
    Schema s;
    s.name = "decode";
    s.keys = {{"AA", "##"}, {"BB", "@@@"}};
    s.l_max = 8;
    s.grid_width = 16;
    s.grid_height = 5;
    s.n_distractors = 1;
    return s;
}

ModelConfig decode_config(AttentionMode mode, const Vocabulary& v) {
    ModelConfig cfg;
    cfg.d_model = 32;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ff = 64;
    cfg.max_seq_len = 128;
    cfg.max_rows = 8;
    cfg.max_cols = 16;
    cfg.vocab_size = v.size();
    cfg.attention_mode = mode;
    return cfg;
}

// train one model per mode on a single document until it reproduces it
struct OverfitFixture {
    Schema schema = decode_schema();
    Vocabulary vocab = Vocabulary::build(schema);
    DocumentGrid doc = generate_document(3, schema);
    Model pip_model = Model::random_init(decode_config(AttentionMode::BIDIRECTIONAL, vocab));
    Model ar_model = Model::random_init(decode_config(AttentionMode::CAUSAL, vocab));

    OverfitFixture() {
        TrainConfig cfg;
        cfg.learning_rate = 3e-3f;
        cfg.epochs = 120;
        cfg.batch_size = 1;
        cfg.rng_seed = 5;

        OptimizerState opt1;
        cfg.stage = Stage::SFT;
        finetune_kv(pip_model, opt1, {doc}, schema, vocab, cfg);
        OptimizerState opt2;
        cfg.stage = Stage::AR_BASELINE;
        train_ar_baseline(ar_model, opt2, {doc}, schema, vocab, cfg);
    }

    std::string gold(const std::string& key) const {
        for (const auto& f : doc.fields)
            if (f.key == key) return f.present() ? *f.value : "unknown";
        return "";
    }
};

}  // namespace

TEST_CASE("parallel prompt scaffold layout") {
    const Schema s = decode_schema();
    const Vocabulary v = Vocabulary::build(s);
    for (int l_max : {2, 4, 8}) {
        for (size_t n_keys : {1u, 2u}) {
            std::vector<std::string> keys;
            for (size_t k = 0; k < n_keys; ++k) keys.push_back(s.keys[k].name);
            const PromptScaffold ps = build_parallel_prompt(keys, l_max, v);
            CHECK(ps.seq.size() == 1 + n_keys * (l_max + 2));
            CHECK(ps.slots.size() == n_keys * l_max);
            CHECK(ps.seq.ids[0] == v.bos());
            for (size_t k = 0; k < n_keys; ++k) {
                const size_t base = 1 + k * (l_max + 2);
                CHECK(ps.seq.ids[base] == v.key_id(keys[k]));
                CHECK(ps.seq.segment[base] == Segment::PROMPT);
                for (int i = 0; i < l_max; ++i) {
                    CHECK(ps.seq.ids[base + 1 + i] == v.mask());
                    CHECK(ps.seq.segment[base + 1 + i] == Segment::ANSWER);
                }
                CHECK(ps.seq.ids[base + 1 + l_max] == v.sep());
            }
            for (const auto& slot : ps.slots) {
                CHECK(ps.seq.ids[slot.pos] == v.mask());
                CHECK(slot.key_index == static_cast<int>(&slot - ps.slots.data()) / l_max);
            }
        }
    }
}

TEST_CASE("trim_field_value") {
    const Vocabulary v = Vocabulary::build(decode_schema());
    auto ids = [&](const std::string& text, int pad_to = 0, bool eos = true) {
        std::vector<int32_t> out;
        for (char c : text) out.push_back(v.char_id(c));
        if (eos) out.push_back(v.eos());
        while (static_cast<int>(out.size()) < pad_to) out.push_back(v.pad());
        return out;
    };

    SUBCASE("value stops at eos then pads") {
        const TrimResult r = trim_field_value(ids("193.00", 8), v);
        CHECK(r.value == "193.00");
        CHECK_FALSE(r.malformed);
        CHECK_FALSE(r.empty);
    }
    SUBCASE("unknown passes through verbatim") {
        const TrimResult r = trim_field_value(ids("unknown", 8), v);
        CHECK(r.value == "unknown");
        CHECK_FALSE(r.malformed);
    }
    SUBCASE("immediate eos is empty") {
        const TrimResult r = trim_field_value({v.eos(), v.pad(), v.pad()}, v);
        CHECK(r.value.empty());
        CHECK(r.empty);
        CHECK_FALSE(r.malformed);
    }
    SUBCASE("interior mask or sep is malformed") {
        CHECK(trim_field_value({v.char_id('1'), v.mask(), v.eos()}, v).malformed);
        CHECK(trim_field_value({v.char_id('1'), v.sep(), v.eos()}, v).malformed);
    }
    SUBCASE("chars after eos are ignored") {
        const TrimResult r = trim_field_value({v.char_id('4'), v.eos(), v.char_id('9')}, v);
        CHECK(r.value == "4");
        CHECK_FALSE(r.malformed);
    }
    SUBCASE("no terminator still yields the chars") {
        const TrimResult r = trim_field_value(ids("42", 0, false), v);
        CHECK(r.value == "42");
    }
}

TEST_CASE_FIXTURE(OverfitFixture, "parallel decode: counts, single pass, exact fields") {
    DecodeRequest req;
    req.doc = &doc;
    req.keys = {"AA", "BB"};
    req.l_max = schema.l_max;
    req.mode = DecodeMode::PARALLEL;
    const DecodeOutput out = parallel_decode(pip_model, vocab, req);

    CHECK(out.forward_pass_count == 1);
    CHECK(out.generated_token_count == 2 * schema.l_max);
    const int64_t doc_tokens = doc.non_empty_cells();
    CHECK(out.input_token_count == doc_tokens + 1 + 2 * (schema.l_max + 2));

    REQUIRE(out.fields.size() == 2);
    for (const auto& [key, res] : out.fields) {
        CHECK(res.value == gold(key));
        CHECK_FALSE(res.malformed);
        for (float c : res.confidences) {
            CHECK(c > 0.0f);
            CHECK(c <= 1.0f);
        }
    }
}

TEST_CASE_FIXTURE(OverfitFixture, "ar decode: count law and exact fields") {
    DecodeRequest req;
    req.doc = &doc;
    req.keys = {"AA", "BB"};
    req.l_max = schema.l_max;
    req.mode = DecodeMode::AR;
    const DecodeOutput out = ar_decode(ar_model, vocab, req);

    REQUIRE(out.fields.size() == 2);
    int64_t value_len = 0;
    for (const auto& [key, res] : out.fields) {
        CHECK(res.value == gold(key));
        value_len += static_cast<int64_t>(res.value.size());
    }
    // forced [KEY] + value chars + [SEP] per key, one final [EOS]
    CHECK(out.generated_token_count == value_len + 2 * 2 + 1);
    CHECK(out.forward_pass_count == out.generated_token_count);
    CHECK(out.input_token_count == doc.non_empty_cells() + 1 + (out.forward_pass_count - 1));
}

TEST_CASE_FIXTURE(OverfitFixture, "ar decode with and without kv cache is identical") {
    DecodeRequest req;
    req.doc = &doc;
    req.keys = {"AA", "BB"};
    req.l_max = schema.l_max;
    req.mode = DecodeMode::AR;
    const DecodeOutput with = ar_decode(ar_model, vocab, req, true);
    const DecodeOutput without = ar_decode(ar_model, vocab, req, false);
    REQUIRE(with.fields.size() == without.fields.size());
    for (size_t i = 0; i < with.fields.size(); ++i) {
        CHECK(with.fields[i].first == without.fields[i].first);
        CHECK(with.fields[i].second.value == without.fields[i].second.value);
    }
    CHECK(with.forward_pass_count == without.forward_pass_count);
    CHECK(with.generated_token_count == without.generated_token_count);
}

TEST_CASE("parallel decode input count law across key counts") {
    // untrained model: counts are architecture facts, not learned behavior
    const Schema s = decode_schema();
    const Vocabulary v = Vocabulary::build(s);
    Model m = Model::random_init(decode_config(AttentionMode::BIDIRECTIONAL, v));
    const DocumentGrid doc = generate_document(9, s);
    for (size_t n_keys : {1u, 2u}) {
        for (int l_max : {2, 8}) {
            DecodeRequest req;
            req.doc = &doc;
            for (size_t k = 0; k < n_keys; ++k) req.keys.push_back(s.keys[k].name);
            req.l_max = l_max;
            const DecodeOutput out = parallel_decode(m, v, req);
            CHECK(out.input_token_count ==
                  doc.non_empty_cells() + 1 + static_cast<int64_t>(n_keys) * (l_max + 2));
            CHECK(out.forward_pass_count == 1);
            CHECK(out.generated_token_count == static_cast<int64_t>(n_keys) * l_max);
        }
    }
}

TEST_CASE("decode errors") {
    const Schema s = decode_schema();
    const Vocabulary v = Vocabulary::build(s);
    const DocumentGrid doc = generate_document(9, s);

    // parallel decode refuses when the prompt cannot fit
    ModelConfig tiny_cfg = decode_config(AttentionMode::BIDIRECTIONAL, v);
    tiny_cfg.max_seq_len = 8;
    const Model tiny = Model::random_init(tiny_cfg);
    DecodeRequest req;
    req.doc = &doc;
    req.keys = {"AA", "BB"};
    req.l_max = 8;
    CHECK_THROWS_AS(parallel_decode(tiny, v, req), CapacityError);

    // ar decode requires a causal model
    const Model bi = Model::random_init(decode_config(AttentionMode::BIDIRECTIONAL, v));
    req.mode = DecodeMode::AR;
    CHECK_THROWS_AS(ar_decode(bi, v, req), ModeError);

    // unknown key is a schema error
    const Model m = Model::random_init(decode_config(AttentionMode::BIDIRECTIONAL, v));
    DecodeRequest bad;
    bad.doc = &doc;
    bad.keys = {"NOPE"};
    CHECK_THROWS_AS(parallel_decode(m, v, bad), SchemaError);
}

TEST_CASE_FIXTURE(OverfitFixture, "decode output json includes counts") {
    DecodeRequest req;
    req.doc = &doc;
    req.keys = {"AA", "BB"};
    req.l_max = schema.l_max;
    const DecodeOutput out = parallel_decode(pip_model, vocab, req);
    const std::string j = out.to_json(doc.doc_id, DecodeMode::PARALLEL);
    CHECK(j.find("\"forward_passes\":1") != std::string::npos);
    CHECK(j.find(doc.doc_id) != std::string::npos);
    CHECK(j.find("\"AA\"") != std::string::npos);
    CHECK(out.field("AA") != nullptr);
    CHECK(out.field("ZZ") == nullptr);
}
