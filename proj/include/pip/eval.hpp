#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pip/corpus.hpp"
#include "pip/decode.hpp"
#include "pip/model.hpp"
#include "pip/training.hpp"

namespace pip {

struct InsufficientDataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct MetricConfig {
    double anls_threshold = 0.5;
    bool case_sensitive = true;
    bool strip_whitespace = true;
    // strict mode treats an "unknown" prediction for an ABSENT gold key as a
    // true positive instead of an abstention
    bool strict_unknown = false;
};

int levenshtein(const std::string& a, const std::string& b);

double anls_pair(const std::string& pred, const std::string& gold, const MetricConfig& cfg = {});

struct F1Result {
    double precision = 0, recall = 0, f1 = 0;
    int tp = 0, fp = 0, fn = 0;
};

// gold values are nullopt for ABSENT keys; "unknown" predictions abstain
F1Result field_f1(const std::map<std::string, std::string>& pred,
                  const std::map<std::string, std::optional<std::string>>& gold, const MetricConfig& cfg = {});

// decode-vs-annotation scoring over a dataset
struct EvalSummary {
    double anls = 0;           // mean over fields, gold "unknown" for absent keys
    double exact_accuracy = 0; // exact field match under the same convention
    F1Result f1;
    double unknown_recall = 0; // share of ABSENT fields predicted "unknown"
    int64_t n_docs = 0, n_fields = 0, n_absent = 0;
    double mean_wall_time_s = 0;
    double mean_forward_passes = 0;
};

EvalSummary evaluate_model(const Model& m, const Vocabulary& vocab, const Schema& schema,
                           const std::vector<DocumentGrid>& docs, DecodeMode mode, const MetricConfig& cfg = {});

struct BenchRow {
    int n_keys = 0;
    int l_max = 0;
    std::string model_id;
    DecodeMode mode = DecodeMode::PARALLEL;
    double mean_wall_time_s = 0, median_wall_time_s = 0, p95_wall_time_s = 0;
    double mean_forward_passes = 0;
    double mean_generated_tokens = 0;
    // exact integer sums over the timed runs; derived columns are recomputed
    // from these so the arithmetic can be checked
    int64_t sum_input_tokens = 0;
    int64_t sum_doc_tokens = 0;
    int warmup_runs = 0, timed_runs = 0;

    double mean_input_tokens() const { return static_cast<double>(sum_input_tokens) / timed_runs; }
};

struct BenchReport {
    std::vector<BenchRow> rows;
    // derived per n_keys: speedup = AR mean / PARALLEL mean, overhead from
    // exact token counts
    struct Derived {
        int n_keys = 0;
        double speedup = 0;
        double input_overhead_pct = 0;
    };
    std::vector<Derived> derived;

    std::string table_text() const;
    void write_jsonl(const std::string& path) const;
};

BenchReport run_benchmark(const Model& ar_model, const Model& pip_model, const Vocabulary& vocab,
                          const Schema& schema, const std::vector<DocumentGrid>& docs,
                          const std::vector<int>& key_counts, int l_max, int warmup_runs = 5, int timed_runs = 30);

struct SweepRow {
    double lambda = 0;
    double anls_mean = 0;
    double exact_mean = 0;
    int n_seeds = 0;
};

struct SweepSettings {
    ModelConfig model;
    Schema schema;
    int n_train_docs = 150;
    int n_eval_docs = 60;
    int pretrain_epochs = 6;
    int sft_epochs = 2;
    float learning_rate = 1e-3f;
    int batch_size = 8;
    uint64_t data_seed = 0;
};

// For each lambda: pretrain from an identical init, identical SFT, identical
// eval; results averaged over n_seeds seeds.
std::vector<SweepRow> mask_ratio_sweep(const std::vector<double>& lambdas, int n_seeds, const SweepSettings& st);

struct LocalizationRow {
    std::string doc_id, key;
    int slot = 0;
    std::string token;
    int argmax_row = 0, argmax_col = 0;
    int chebyshev = 0;
    bool hit = false;
};

struct LocalizationReport {
    std::vector<LocalizationRow> rows;
    double hit_rate = 0;
    int margin = 1;
    int n_tokens = 0;

    void write_csv(const std::string& path) const;
};

// Aggregates answer-token attention over DOC positions (mean over heads of
// one layer, renormalized), maps the argmax to a grid cell, and scores the
// Chebyshev distance to the gold value region. layer -1 = last layer.
// Heatmaps are written as binary PGM, one per (doc, present field).
LocalizationReport attention_localization(const Model& pip_model, const Vocabulary& vocab, const Schema& schema,
                                          const std::vector<DocumentGrid>& docs, int margin = 1, int layer = -1,
                                          const std::string& heatmap_dir = "");

void write_pgm(const std::string& path, int width, int height, const std::vector<double>& values);

}  // namespace pip
