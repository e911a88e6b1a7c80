#pragma once

#include <string>
#include <vector>

#include "pip/corpus.hpp"
#include "pip/model.hpp"

namespace pip {

enum class DecodeMode : uint8_t { AR = 0, PARALLEL = 1 };

struct DecodeRequest {
    const DocumentGrid* doc = nullptr;
    std::vector<std::string> keys;
    int l_max = 8;
    DecodeMode mode = DecodeMode::PARALLEL;
};

struct FieldResult {
    std::string value;
    std::vector<float> confidences;  // max softmax probability per emitted slot
    bool malformed = false;
    bool empty = false;
};

struct DecodeOutput {
    std::vector<std::pair<std::string, FieldResult>> fields;
    int64_t forward_pass_count = 0;
    int64_t generated_token_count = 0;
    int64_t input_token_count = 0;
    double wall_time_s = 0;
    bool truncated = false;

    const FieldResult* field(const std::string& key) const;
    std::string to_json(const std::string& doc_id, DecodeMode mode) const;
};

// [BOS] ++ per key: [KEY:k], l_max x [MASK], [SEP]; slots carry field/slot
// metadata for readout after the forward pass.
struct PromptScaffold {
    TokenSequence seq;
    struct Slot {
        int key_index = 0;
        int slot = 0;
        size_t pos = 0;  // position within seq
    };
    std::vector<Slot> slots;
};

PromptScaffold build_parallel_prompt(const std::vector<std::string>& keys, int l_max, const Vocabulary& vocab);

struct TrimResult {
    std::string value;
    bool malformed = false;
    bool empty = false;
};

// Characters up to the first [EOS]/[PAD]; interior [MASK]/[SEP] flag the
// field malformed; "unknown" passes through verbatim.
TrimResult trim_field_value(const std::vector<int32_t>& slot_tokens, const Vocabulary& vocab);

DecodeOutput parallel_decode(const Model& m, const Vocabulary& vocab, const DecodeRequest& req,
                             AttentionRecord* attn = nullptr, PromptScaffold* scaffold_out = nullptr);

DecodeOutput ar_decode(const Model& m, const Vocabulary& vocab, const DecodeRequest& req, bool use_cache = true);

}  // namespace pip
