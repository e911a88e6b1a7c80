#include "pip/training.hpp"

#include <chrono>
#include <fstream>

#include <json.hpp>

namespace pip {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

// One gradient step over a mini-batch of examples. Parameter gradients are
// accumulated across the batch and averaged before the Adam update.
class Trainer {
  public:
    Trainer(Model& m, OptimizerState& opt, const TrainConfig& cfg, const Vocabulary& vocab)
        : model_(m), opt_(opt), cfg_(cfg), vocab_(vocab) {
        if (opt_.moments.empty()) opt_.moments.resize(m.params.size());
        opt_.config.learning_rate = cfg.learning_rate;
        grads_.reserve(m.params.size());
        for (auto& [name, t] : m.params) grads_.emplace_back(t.shape);
    }

    TrainLog run(const std::vector<TrainExample>& order_template, int64_t n_examples,
                 const std::function<TrainExample(int64_t epoch, int64_t index)>& make_example) {
        TrainLog log;
        const auto t0 = Clock::now();
        int64_t step = 0;
        for (int64_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
            std::vector<int64_t> perm(n_examples);
            for (int64_t i = 0; i < n_examples; ++i) perm[i] = i;
            Rng shuffle_rng(cfg_.rng_seed ^ (0x5851F42D4C957F2DULL + static_cast<uint64_t>(epoch)));
            for (int64_t i = n_examples - 1; i > 0; --i)
                std::swap(perm[i], perm[shuffle_rng.below(i + 1)]);

            for (int64_t b = 0; b < n_examples; b += cfg_.batch_size) {
                const auto step_t0 = Clock::now();
                for (auto& g : grads_) std::fill(g.data.begin(), g.data.end(), 0.0f);
                float batch_loss = 0;
                int64_t batch_tokens = 0, pad_eos_tokens = 0;
                int in_batch = 0;
                for (int64_t i = b; i < std::min(b + cfg_.batch_size, n_examples); ++i, ++in_batch) {
                    const TrainExample ex = make_example(epoch, perm[i]);
                    check_targets(ex);
                    batch_loss += backprop(ex);
                    for (size_t t = 0; t < ex.input.size(); ++t) {
                        if (!ex.input.loss_mask[t]) continue;
                        ++batch_tokens;
                        if (ex.targets[t] == vocab_.pad() || ex.targets[t] == vocab_.eos()) ++pad_eos_tokens;
                    }
                }
                for (size_t p = 0; p < model_.params.size(); ++p)
                    for (float& g : grads_[p].data) g /= static_cast<float>(in_batch);
                ++opt_.step_count;
                for (size_t p = 0; p < model_.params.size(); ++p)
                    adam_update(model_.params[p].second, grads_[p], opt_.moments[p], opt_.step_count, opt_.config);

                TrainStepRecord rec;
                rec.step = ++step;
                rec.stage = cfg_.stage;
                rec.loss = batch_loss / static_cast<float>(in_batch);
                if (!std::isfinite(rec.loss)) throw NumericError("non-finite training loss at step " + std::to_string(step));
                rec.tokens_in_loss = batch_tokens;
                rec.pad_eos_fraction = batch_tokens ? static_cast<double>(pad_eos_tokens) / batch_tokens : 0.0;
                rec.wall_time_s = seconds_since(step_t0);
                if (log.steps.empty()) log.first_loss = rec.loss;
                log.final_loss = rec.loss;
                log.steps.push_back(rec);
            }
        }
        (void)order_template;
        log.total_time_s = seconds_since(t0);
        return log;
    }

  private:
    void check_targets(const TrainExample& ex) const {
        for (size_t t = 0; t < ex.input.size(); ++t) {
            if (!ex.input.loss_mask[t]) continue;
            if (ex.targets[t] == vocab_.mask()) throw NumericError("[MASK] appeared as a loss target");
            if (ex.input.segment[t] == Segment::DOC) throw NumericError("loss over a DOC token");
        }
    }

    float backprop(const TrainExample& ex) {
        Tape<float> tape(true);
        std::vector<Tape<float>::Id> pids;
        pids.reserve(model_.params.size());
        for (auto& [name, t] : model_.params) pids.push_back(tape.input(t, true));
        const auto logits = tape_forward(tape, model_.config, pids, ex.input);
        const float rw = cfg_.reweight_by_inv_lambda && cfg_.stage == Stage::PRETRAIN
                             ? static_cast<float>(1.0 / cfg_.lambda)
                             : 1.0f;
        const auto loss = tape.masked_cross_entropy(logits, ex.targets, ex.input.loss_mask, rw);
        tape.backward(loss);
        for (size_t p = 0; p < model_.params.size(); ++p) {
            const auto& g = tape.grad(pids[p]);
            for (size_t i = 0; i < g.data.size(); ++i) grads_[p].data[i] += g.data[i];
        }
        return tape.value(loss).data[0];
    }

    Model& model_;
    OptimizerState& opt_;
    TrainConfig cfg_;
    const Vocabulary& vocab_;
    std::vector<Tensor<float>> grads_;
};

}  // namespace

void TrainLog::write_jsonl(const std::string& path) const {
    std::ofstream out(path);
    for (const auto& s : steps) {
        nlohmann::json j{{"step", s.step},
                         {"stage", to_string(s.stage)},
                         {"loss", s.loss},
                         {"tokens_in_loss", s.tokens_in_loss},
                         {"wall_time_s", s.wall_time_s},
                         {"pad_eos_fraction", s.pad_eos_fraction}};
        out << j.dump() << "\n";
    }
    nlohmann::json summary{{"summary", true},
                           {"first_loss", first_loss},
                           {"final_loss", final_loss},
                           {"total_time_s", total_time_s}};
    out << summary.dump() << "\n";
}

TrainLog pretrain(Model& m, OptimizerState& opt, const std::vector<DocumentGrid>& docs, const Vocabulary& vocab,
                  const TrainConfig& cfg) {
    if (m.config.attention_mode != AttentionMode::BIDIRECTIONAL)
        throw ConfigError("pretrain requires BIDIRECTIONAL attention");
    if (docs.empty()) throw ConfigError("pretrain dataset is empty");
    if (!(cfg.lambda > 0.0 && cfg.lambda < 1.0)) throw ConfigError("lambda must be in (0,1)");
    TrainConfig c = cfg;
    c.stage = Stage::PRETRAIN;
    Trainer tr(m, opt, c, vocab);
    const int64_t n = static_cast<int64_t>(docs.size());
    return tr.run({}, n, [&](int64_t epoch, int64_t i) {
        // fresh mask per epoch, seeded by (global seed, example, epoch)
        const uint64_t seed = cfg.rng_seed + static_cast<uint64_t>(i) + static_cast<uint64_t>(epoch) * 1000003ULL;
        return make_pretrain_example(docs[i], vocab, c.lambda, seed, c.mask_aligned_doc);
    });
}

TrainLog finetune_kv(Model& m, OptimizerState& opt, const std::vector<DocumentGrid>& docs, const Schema& schema,
                     const Vocabulary& vocab, const TrainConfig& cfg) {
    if (m.config.attention_mode != AttentionMode::BIDIRECTIONAL)
        throw ConfigError("finetune_kv requires BIDIRECTIONAL attention");
    if (docs.empty()) throw ConfigError("finetune dataset is empty");
    for (const auto& d : docs)
        if (d.fields.empty()) throw ConfigError("document " + d.doc_id + " has no KV annotations");
    TrainConfig c = cfg;
    c.stage = Stage::SFT;
    Trainer tr(m, opt, c, vocab);
    return tr.run({}, static_cast<int64_t>(docs.size()),
                  [&](int64_t, int64_t i) { return make_sft_example(docs[i], vocab, schema); });
}

TrainLog train_ar_baseline(Model& m, OptimizerState& opt, const std::vector<DocumentGrid>& docs,
                           const Schema& schema, const Vocabulary& vocab, const TrainConfig& cfg) {
    if (m.config.attention_mode != AttentionMode::CAUSAL)
        throw ConfigError("train_ar_baseline requires CAUSAL attention");
    if (docs.empty()) throw ConfigError("AR dataset is empty");
    TrainConfig c = cfg;
    c.stage = Stage::AR_BASELINE;
    Trainer tr(m, opt, c, vocab);
    return tr.run({}, static_cast<int64_t>(docs.size()),
                  [&](int64_t, int64_t i) { return make_ar_example(docs[i], vocab, schema); });
}

}  // namespace pip
