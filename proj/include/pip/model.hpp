#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pip/corpus.hpp"
#include "pip/numerics.hpp"
#include "pip/tape.hpp"
#include "pip/tensor.hpp"

namespace pip {

struct CapacityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ModeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class AttentionMode : uint8_t { CAUSAL = 0, BIDIRECTIONAL = 1 };

inline const char* to_string(AttentionMode m) { return m == AttentionMode::CAUSAL ? "CAUSAL" : "BIDIRECTIONAL"; }

struct ModelConfig {
    int d_model = 128;
    int n_layers = 4;
    int n_heads = 4;
    int d_ff = 512;
    int max_seq_len = 1024;
    int max_rows = 64;   // 2D row positions for DOC tokens
    int max_cols = 64;
    int vocab_size = 0;
    AttentionMode attention_mode = AttentionMode::BIDIRECTIONAL;
    float dropout = 0.0f;  // reserved; training runs without dropout
    uint64_t rng_seed = 0;

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

struct ParamSpec {
    std::string name;
    std::vector<int64_t> shape;
};

std::vector<ParamSpec> param_specs(const ModelConfig& cfg);
int64_t param_count(const ModelConfig& cfg);

// attention probabilities captured at forward time, one [T,T] matrix per
// (layer, head); each row sums to 1
struct AttentionRecord {
    int n_layers = 0, n_heads = 0;
    int64_t seq_len = 0;
    std::vector<Tensor<float>> probs;

    const Tensor<float>& at(int layer, int head) const { return probs[layer * n_heads + head]; }
};

template <typename T>
struct ModelT {
    ModelConfig config;
    std::vector<std::pair<std::string, Tensor<T>>> params;  // checkpoint order

    static ModelT random_init(const ModelConfig& cfg);

    const Tensor<T>& param(const std::string& name) const;
    Tensor<T>& param(const std::string& name);
    int64_t total_params() const;
};

using Model = ModelT<float>;

// Differentiable forward. param_ids must follow param_specs order; returns the
// logits node [T, V]. Used for training and as the oracle for the inference
// path.
template <typename T>
typename Tape<T>::Id tape_forward(Tape<T>& tape, const ModelConfig& cfg,
                                  const std::vector<typename Tape<T>::Id>& param_ids, const TokenSequence& seq);

struct KVCache {
    std::vector<Tensor<float>> k, v;  // per layer [max_seq_len, d_model]
    int64_t length = 0;
    int64_t capacity = 0;

    static KVCache make(const ModelConfig& cfg);
};

// Plain inference forward (no tape). When cache is given (CAUSAL only) the
// per-layer keys/values are stored so incremental decoding can continue from
// the end of seq.
Tensor<float> infer_forward(const Model& m, const TokenSequence& seq, AttentionRecord* attn = nullptr,
                            KVCache* cache = nullptr);

// One incremental CAUSAL step; returns the next-token logits row.
std::vector<float> decode_step(const Model& m, KVCache& cache, int32_t token_id, TokenPos pos, Segment seg);

struct OptimizerState {
    int64_t step_count = 0;
    AdamConfig config;
    std::vector<AdamMoments<float>> moments;  // aligned with Model::params
};

void checkpoint_save(const Model& m, const std::string& vocab_json, const std::string& schema_json,
                     const std::string& path, const OptimizerState* opt = nullptr);

struct Checkpoint {
    Model model;
    std::string vocab_json;
    std::string schema_json;
    std::optional<OptimizerState> optimizer;
};

Checkpoint checkpoint_load(const std::string& path);

}  // namespace pip
