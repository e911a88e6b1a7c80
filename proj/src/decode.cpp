#include "pip/decode.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include <json.hpp>

namespace pip {

namespace {

using Clock = std::chrono::steady_clock;

// stable softmax max-probability and argmax of one logits row
std::pair<int32_t, float> argmax_with_prob(const float* row, int64_t n) {
    int32_t best = 0;
    float mx = row[0];
    for (int64_t i = 1; i < n; ++i)
        if (row[i] > mx) {
            mx = row[i];
            best = static_cast<int32_t>(i);
        }
    double sum = 0;
    for (int64_t i = 0; i < n; ++i) sum += std::exp(static_cast<double>(row[i] - mx));
    return {best, static_cast<float>(1.0 / sum)};
}

}  // namespace

const FieldResult* DecodeOutput::field(const std::string& key) const {
    for (const auto& [k, v] : fields)
        if (k == key) return &v;
    return nullptr;
}

std::string DecodeOutput::to_json(const std::string& doc_id, DecodeMode mode) const {
    nlohmann::json j;
    j["doc_id"] = doc_id;
    j["mode"] = mode == DecodeMode::AR ? "ar" : "parallel";
    nlohmann::json f = nlohmann::json::object();
    for (const auto& [k, v] : fields) f[k] = v.value;
    j["fields"] = f;
    j["forward_passes"] = forward_pass_count;
    j["generated_tokens"] = generated_token_count;
    j["input_tokens"] = input_token_count;
    j["wall_time_s"] = wall_time_s;
    if (truncated) j["truncated"] = true;
    return j.dump();
}

PromptScaffold build_parallel_prompt(const std::vector<std::string>& keys, int l_max, const Vocabulary& vocab) {
    if (keys.empty()) throw SchemaError("parallel prompt needs at least one key");
    PromptScaffold sc;
    int32_t tpos = 0;
    sc.seq.push(vocab.bos(), {-1, -1, tpos++}, Segment::PROMPT);
    for (size_t ki = 0; ki < keys.size(); ++ki) {
        sc.seq.push(vocab.key_id(keys[ki]), {-1, -1, tpos++}, Segment::PROMPT);
        for (int s = 0; s < l_max; ++s) {
            sc.slots.push_back({static_cast<int>(ki), s, sc.seq.size()});
            sc.seq.push(vocab.mask(), {-1, -1, tpos++}, Segment::ANSWER);
        }
        sc.seq.push(vocab.sep(), {-1, -1, tpos++}, Segment::PROMPT);
    }
    return sc;
}

TrimResult trim_field_value(const std::vector<int32_t>& slot_tokens, const Vocabulary& vocab) {
    TrimResult out;
    for (int32_t id : slot_tokens) {
        if (id == vocab.eos() || id == vocab.pad()) break;
        if (vocab.is_char(id)) {
            out.value.push_back(vocab.id_to_char(id));
        } else {
            out.malformed = true;  // interior [MASK]/[SEP]/other specials decode to nothing
        }
    }
    out.empty = out.value.empty();
    return out;
}

DecodeOutput parallel_decode(const Model& m, const Vocabulary& vocab, const DecodeRequest& req,
                             AttentionRecord* attn, PromptScaffold* scaffold_out) {
    if (m.config.attention_mode != AttentionMode::BIDIRECTIONAL)
        throw ModeError("parallel_decode requires a BIDIRECTIONAL model");
    const auto t0 = Clock::now();
    TokenSequence seq = tokenize_document(*req.doc, vocab);
    const int64_t doc_tokens = static_cast<int64_t>(seq.size());
    PromptScaffold sc = build_parallel_prompt(req.keys, req.l_max, vocab);
    const int64_t required = doc_tokens + static_cast<int64_t>(sc.seq.size());
    if (required > m.config.max_seq_len)
        throw CapacityError("parallel decode needs " + std::to_string(required) + " tokens, model allows " +
                            std::to_string(m.config.max_seq_len));
    for (auto& slot : sc.slots) slot.pos += static_cast<size_t>(doc_tokens);
    seq.append(sc.seq);

    const Tensor<float> logits = infer_forward(m, seq, attn);  // the single pass

    DecodeOutput out;
    out.forward_pass_count = 1;
    out.input_token_count = static_cast<int64_t>(seq.size());
    out.generated_token_count = static_cast<int64_t>(sc.slots.size());
    const int64_t V = m.config.vocab_size;
    std::vector<std::vector<int32_t>> slot_tokens(req.keys.size());
    std::vector<std::vector<float>> slot_conf(req.keys.size());
    for (const auto& slot : sc.slots) {
        const auto [tok, prob] = argmax_with_prob(&logits.data[slot.pos * V], V);
        slot_tokens[slot.key_index].push_back(tok);
        slot_conf[slot.key_index].push_back(prob);
    }
    for (size_t ki = 0; ki < req.keys.size(); ++ki) {
        const TrimResult tr = trim_field_value(slot_tokens[ki], vocab);
        FieldResult fr;
        fr.value = tr.value;
        fr.malformed = tr.malformed;
        fr.empty = tr.empty;
        fr.confidences = std::move(slot_conf[ki]);
        out.fields.emplace_back(req.keys[ki], std::move(fr));
    }
    if (scaffold_out) *scaffold_out = std::move(sc);
    out.wall_time_s = std::chrono::duration<double>(Clock::now() - t0).count();
    return out;
}

DecodeOutput ar_decode(const Model& m, const Vocabulary& vocab, const DecodeRequest& req, bool use_cache) {
    if (m.config.attention_mode != AttentionMode::CAUSAL) throw ModeError("ar_decode requires a CAUSAL model");
    const auto t0 = Clock::now();
    TokenSequence seq = tokenize_document(*req.doc, vocab);
    const int64_t doc_tokens = static_cast<int64_t>(seq.size());
    const int64_t budget = static_cast<int64_t>(req.keys.size()) * (req.l_max + 2);
    if (doc_tokens + 1 + budget > m.config.max_seq_len)
        throw CapacityError("ar decode needs up to " + std::to_string(doc_tokens + 1 + budget) +
                            " tokens, model allows " + std::to_string(m.config.max_seq_len));

    DecodeOutput out;
    KVCache cache = KVCache::make(m.config);
    std::vector<float> logits;

    // prefill over the document; [BOS] is the first incremental feed
    if (doc_tokens > 0) infer_forward(m, seq, nullptr, &cache);

    // cache-off oracle path keeps the whole sequence and reruns the full
    // forward per step
    TokenSequence full = seq;
    int32_t tpos = 0;
    auto feed = [&](int32_t id, Segment seg) {
        const TokenPos p{-1, -1, tpos++};
        if (use_cache) {
            logits = decode_step(m, cache, id, p, seg);
        } else {
            full.push(id, p, seg);
            const Tensor<float> all = infer_forward(m, full);
            const int64_t V = m.config.vocab_size;
            logits.assign(all.data.end() - V, all.data.end());
        }
        ++out.forward_pass_count;
    };

    feed(vocab.bos(), Segment::PROMPT);
    const int64_t V = m.config.vocab_size;
    bool eos_seen = false;
    for (size_t ki = 0; ki < req.keys.size() && !eos_seen; ++ki) {
        // key markers are teacher-forced; the preceding logits are unused
        ++out.generated_token_count;
        feed(vocab.key_id(req.keys[ki]), Segment::PROMPT);
        FieldResult fr;
        std::vector<int32_t> value_tokens;
        bool sep_seen = false;
        while (!sep_seen && !eos_seen) {
            auto [tok, prob] = argmax_with_prob(logits.data(), V);
            if (static_cast<int>(value_tokens.size()) >= req.l_max && tok != vocab.sep()) {
                // runaway value: force the separator to keep the stream well-formed
                tok = vocab.sep();
                out.truncated = true;
                fr.malformed = true;
            }
            ++out.generated_token_count;
            if (tok == vocab.eos()) {
                eos_seen = true;
                out.truncated = true;  // stream ended before all keys were answered
                break;
            }
            if (tok == vocab.sep()) {
                sep_seen = true;
                // always fed: the last key's [SEP] logits predict the closing [EOS]
                feed(tok, Segment::ANSWER);
            } else {
                fr.confidences.push_back(prob);
                value_tokens.push_back(tok);
                feed(tok, Segment::ANSWER);
            }
        }
        const TrimResult tr = trim_field_value(value_tokens, vocab);
        fr.value = tr.value;
        fr.malformed = fr.malformed || tr.malformed;
        fr.empty = tr.empty;
        out.fields.emplace_back(req.keys[ki], std::move(fr));
    }
    if (!eos_seen) {
        // expect the closing [EOS]; it is generated but never fed
        const auto [tok, prob] = argmax_with_prob(logits.data(), V);
        (void)prob;
        ++out.generated_token_count;
        if (tok != vocab.eos()) out.truncated = true;
    }
    // fill any unanswered keys so the fields map is total
    for (size_t ki = out.fields.size(); ki < req.keys.size(); ++ki) {
        FieldResult fr;
        fr.empty = true;
        out.fields.emplace_back(req.keys[ki], std::move(fr));
    }
    out.input_token_count = doc_tokens + 1 + (out.forward_pass_count - 1);
    out.wall_time_s = std::chrono::duration<double>(Clock::now() - t0).count();
    return out;
}

}  // namespace pip
