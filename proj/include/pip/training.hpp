#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pip/corpus.hpp"
#include "pip/model.hpp"

namespace pip {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Stage : uint8_t { PRETRAIN = 0, SFT = 1, AR_BASELINE = 2 };

inline const char* to_string(Stage s) {
    switch (s) {
        case Stage::PRETRAIN: return "PRETRAIN";
        case Stage::SFT: return "SFT";
        default: return "AR_BASELINE";
    }
}

struct TrainConfig {
    Stage stage = Stage::SFT;
    // the desk-scale default trains a 4-layer model from scratch, so it
    // wants a larger learning rate than typical fine-tuning settings
    float learning_rate = 3e-4f;
    int epochs = 1;
    int batch_size = 8;
    double lambda = 0.5;  // pretrain mask ratio
    bool reweight_by_inv_lambda = false;
    // when true, pretraining also masks the document cell aligned with each
    // masked caption token, so targets cannot be transcribed off the grid
    bool mask_aligned_doc = false;
    uint64_t rng_seed = 0;
};

struct TrainStepRecord {
    int64_t step = 0;
    Stage stage = Stage::SFT;
    float loss = 0;
    int64_t tokens_in_loss = 0;
    double wall_time_s = 0;
    double pad_eos_fraction = 0;  // SFT only: share of loss tokens that are [PAD]/[EOS]
};

struct TrainLog {
    std::vector<TrainStepRecord> steps;
    float first_loss = 0, final_loss = 0;
    double total_time_s = 0;

    void write_jsonl(const std::string& path) const;
};

TrainLog pretrain(Model& m, OptimizerState& opt, const std::vector<DocumentGrid>& docs, const Vocabulary& vocab,
                  const TrainConfig& cfg);
TrainLog finetune_kv(Model& m, OptimizerState& opt, const std::vector<DocumentGrid>& docs, const Schema& schema,
                     const Vocabulary& vocab, const TrainConfig& cfg);
TrainLog train_ar_baseline(Model& m, OptimizerState& opt, const std::vector<DocumentGrid>& docs,
                           const Schema& schema, const Vocabulary& vocab, const TrainConfig& cfg);

}  // namespace pip
