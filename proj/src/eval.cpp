#include "pip/eval.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

namespace pip {

namespace {

using Clock = std::chrono::steady_clock;

std::string normalize(const std::string& s, const MetricConfig& cfg) {
    std::string out;
    out.reserve(s.size());
    for (char c : s) {
        if (cfg.strip_whitespace && std::isspace(static_cast<unsigned char>(c))) continue;
        out.push_back(cfg.case_sensitive ? c : static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    return out;
}

}  // namespace

int levenshtein(const std::string& a, const std::string& b) {
    const size_t n = a.size(), m = b.size();
    std::vector<int> prev(m + 1), cur(m + 1);
    for (size_t j = 0; j <= m; ++j) prev[j] = static_cast<int>(j);
    for (size_t i = 1; i <= n; ++i) {
        cur[0] = static_cast<int>(i);
        for (size_t j = 1; j <= m; ++j) {
            const int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

double anls_pair(const std::string& pred, const std::string& gold, const MetricConfig& cfg) {
    const std::string p = normalize(pred, cfg), g = normalize(gold, cfg);
    if (p.empty() && g.empty()) return 1.0;
    const size_t mx = std::max(p.size(), g.size());
    const double nls = 1.0 - static_cast<double>(levenshtein(p, g)) / static_cast<double>(mx);
    return nls >= cfg.anls_threshold ? nls : 0.0;
}

F1Result field_f1(const std::map<std::string, std::string>& pred,
                  const std::map<std::string, std::optional<std::string>>& gold, const MetricConfig& cfg) {
    F1Result r;
    for (const auto& [key, gv] : gold) {
        auto it = pred.find(key);
        const bool predicted = it != pred.end() && normalize(it->second, cfg) != normalize("unknown", cfg);
        if (gv.has_value()) {
            if (!predicted) {
                ++r.fn;
            } else if (normalize(it->second, cfg) == normalize(*gv, cfg)) {
                ++r.tp;
            } else {
                ++r.fp;
                ++r.fn;
            }
        } else {
            if (predicted) {
                ++r.fp;
            } else if (cfg.strict_unknown && it != pred.end()) {
                ++r.tp;  // strict mode: explicit "unknown" on an absent key is a match
            }
        }
    }
    // stray predicted keys not in gold are false positives
    for (const auto& [key, pv] : pred) {
        if (gold.count(key)) continue;
        if (normalize(pv, cfg) != normalize("unknown", cfg)) ++r.fp;
    }
    if (r.tp + r.fp + r.fn == 0) {
        r.precision = r.recall = r.f1 = 1.0;  // perfect abstention
        return r;
    }
    r.precision = r.tp + r.fp ? static_cast<double>(r.tp) / (r.tp + r.fp) : 0.0;
    r.recall = r.tp + r.fn ? static_cast<double>(r.tp) / (r.tp + r.fn) : 0.0;
    r.f1 = r.precision + r.recall > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
    return r;
}

EvalSummary evaluate_model(const Model& m, const Vocabulary& vocab, const Schema& schema,
                           const std::vector<DocumentGrid>& docs, DecodeMode mode, const MetricConfig& cfg) {
    EvalSummary s;
    std::vector<std::string> keys;
    for (const auto& k : schema.keys) keys.push_back(k.name);
    int tp = 0, fp = 0, fn = 0;
    for (const auto& doc : docs) {
        DecodeRequest req{&doc, keys, schema.l_max, mode};
        const DecodeOutput out =
            mode == DecodeMode::PARALLEL ? parallel_decode(m, vocab, req) : ar_decode(m, vocab, req);
        s.mean_wall_time_s += out.wall_time_s;
        s.mean_forward_passes += static_cast<double>(out.forward_pass_count);
        std::map<std::string, std::string> pred;
        std::map<std::string, std::optional<std::string>> gold;
        for (const auto& f : doc.fields) gold[f.key] = f.value;
        for (const auto& [k, fr] : out.fields) pred[k] = fr.value;
        for (const auto& f : doc.fields) {
            const std::string gold_str = f.present() ? *f.value : "unknown";
            const std::string pred_str = pred.count(f.key) ? pred[f.key] : "";
            s.anls += anls_pair(pred_str, gold_str, cfg);
            s.exact_accuracy += normalize(pred_str, cfg) == normalize(gold_str, cfg) ? 1.0 : 0.0;
            ++s.n_fields;
            if (!f.present()) {
                ++s.n_absent;
                if (pred_str == "unknown") s.unknown_recall += 1.0;
            }
        }
        const F1Result r = field_f1(pred, gold, cfg);
        tp += r.tp;
        fp += r.fp;
        fn += r.fn;
        ++s.n_docs;
    }
    if (s.n_fields) {
        s.anls /= static_cast<double>(s.n_fields);
        s.exact_accuracy /= static_cast<double>(s.n_fields);
    }
    if (s.n_absent) s.unknown_recall /= static_cast<double>(s.n_absent);
    if (s.n_docs) {
        s.mean_wall_time_s /= static_cast<double>(s.n_docs);
        s.mean_forward_passes /= static_cast<double>(s.n_docs);
    }
    s.f1.tp = tp;
    s.f1.fp = fp;
    s.f1.fn = fn;
    if (tp + fp + fn == 0) {
        s.f1.precision = s.f1.recall = s.f1.f1 = 1.0;
    } else {
        s.f1.precision = tp + fp ? static_cast<double>(tp) / (tp + fp) : 0.0;
        s.f1.recall = tp + fn ? static_cast<double>(tp) / (tp + fn) : 0.0;
        s.f1.f1 = s.f1.precision + s.f1.recall > 0 ? 2 * s.f1.precision * s.f1.recall / (s.f1.precision + s.f1.recall)
                                                   : 0.0;
    }
    return s;
}

// ---- benchmark ----

namespace {

double percentile(std::vector<double> v, double p) {
    std::sort(v.begin(), v.end());
    const double idx = p * (static_cast<double>(v.size()) - 1);
    const size_t lo = static_cast<size_t>(idx);
    const size_t hi = std::min(lo + 1, v.size() - 1);
    const double w = idx - static_cast<double>(lo);
    return v[lo] * (1 - w) + v[hi] * w;
}

}  // namespace

BenchReport run_benchmark(const Model& ar_model, const Model& pip_model, const Vocabulary& vocab,
                          const Schema& schema, const std::vector<DocumentGrid>& docs,
                          const std::vector<int>& key_counts, int l_max, int warmup_runs, int timed_runs) {
    if (timed_runs < 30) throw InsufficientDataError("benchmark needs >= 30 timed runs");
    if (docs.empty()) throw InsufficientDataError("benchmark needs at least one document");
    BenchReport report;
    for (int nk : key_counts) {
        if (nk < 1 || nk > static_cast<int>(schema.keys.size()))
            throw SchemaError("benchmark key count " + std::to_string(nk) + " outside schema (" +
                              std::to_string(schema.keys.size()) + " keys)");
        std::vector<std::string> keys;
        for (int i = 0; i < nk; ++i) keys.push_back(schema.keys[i].name);
        for (DecodeMode mode : {DecodeMode::AR, DecodeMode::PARALLEL}) {
            const Model& m = mode == DecodeMode::AR ? ar_model : pip_model;
            BenchRow row;
            row.n_keys = nk;
            row.l_max = l_max;
            row.model_id = mode == DecodeMode::AR ? "ar" : "pip";
            row.mode = mode;
            row.warmup_runs = warmup_runs;
            row.timed_runs = timed_runs;
            auto one = [&](const DocumentGrid& doc) {
                DecodeRequest req{&doc, keys, l_max, mode};
                return mode == DecodeMode::AR ? ar_decode(m, vocab, req) : parallel_decode(m, vocab, req);
            };
            for (int w = 0; w < warmup_runs; ++w) (void)one(docs[w % docs.size()]);
            std::vector<double> times;
            times.reserve(timed_runs);
            for (int r = 0; r < timed_runs; ++r) {
                const DocumentGrid& doc = docs[r % docs.size()];
                const auto t0 = Clock::now();
                const DecodeOutput out = one(doc);
                times.push_back(std::chrono::duration<double>(Clock::now() - t0).count());
                row.mean_forward_passes += static_cast<double>(out.forward_pass_count);
                row.mean_generated_tokens += static_cast<double>(out.generated_token_count);
                row.sum_input_tokens += out.input_token_count;
                row.sum_doc_tokens += static_cast<int64_t>(tokenize_document(doc, vocab).size());
            }
            row.mean_forward_passes /= timed_runs;
            row.mean_generated_tokens /= timed_runs;
            double sum = 0;
            for (double t : times) sum += t;
            row.mean_wall_time_s = sum / timed_runs;
            row.median_wall_time_s = percentile(times, 0.5);
            row.p95_wall_time_s = percentile(times, 0.95);
            report.rows.push_back(row);
        }
        const BenchRow& ar = report.rows[report.rows.size() - 2];
        const BenchRow& pp = report.rows[report.rows.size() - 1];
        BenchReport::Derived d;
        d.n_keys = nk;
        d.speedup = ar.mean_wall_time_s / pp.mean_wall_time_s;
        d.input_overhead_pct = 100.0 * static_cast<double>(pp.sum_input_tokens - ar.sum_input_tokens) /
                               static_cast<double>(ar.sum_input_tokens);
        report.derived.push_back(d);
    }
    return report;
}

std::string BenchReport::table_text() const {
    std::ostringstream os;
    os << "timing: single-threaded, monotonic clock around decode only\n";
    os << std::left << std::setw(7) << "n_keys" << std::setw(6) << "l_max" << std::setw(10) << "mode"
       << std::right << std::setw(12) << "mean_s" << std::setw(12) << "median_s" << std::setw(12) << "p95_s"
       << std::setw(10) << "passes" << std::setw(12) << "in_tokens" << "\n";
    for (const auto& r : rows) {
        os << std::left << std::setw(7) << r.n_keys << std::setw(6) << r.l_max << std::setw(10)
           << (r.mode == DecodeMode::AR ? "ar" : "parallel") << std::right << std::fixed << std::setprecision(6)
           << std::setw(12) << r.mean_wall_time_s << std::setw(12) << r.median_wall_time_s << std::setw(12)
           << r.p95_wall_time_s << std::setprecision(1) << std::setw(10) << r.mean_forward_passes
           << std::setprecision(1) << std::setw(12) << r.mean_input_tokens() << "\n";
    }
    os << "\n" << std::left << std::setw(7) << "n_keys" << std::right << std::setw(10) << "speedup"
       << std::setw(16) << "overhead_pct" << "\n";
    for (const auto& d : derived)
        os << std::left << std::setw(7) << d.n_keys << std::right << std::fixed << std::setprecision(2)
           << std::setw(10) << d.speedup << std::setw(16) << d.input_overhead_pct << "\n";
    return os.str();
}

void BenchReport::write_jsonl(const std::string& path) const {
    std::ofstream out(path);
    for (const auto& r : rows) {
        nlohmann::json j{{"n_keys", r.n_keys},
                         {"l_max", r.l_max},
                         {"model_id", r.model_id},
                         {"mode", r.mode == DecodeMode::AR ? "ar" : "parallel"},
                         {"mean_wall_time_s", r.mean_wall_time_s},
                         {"median_wall_time_s", r.median_wall_time_s},
                         {"p95_wall_time_s", r.p95_wall_time_s},
                         {"mean_forward_passes", r.mean_forward_passes},
                         {"mean_generated_tokens", r.mean_generated_tokens},
                         {"sum_input_tokens", r.sum_input_tokens},
                         {"sum_doc_tokens", r.sum_doc_tokens},
                         {"warmup_runs", r.warmup_runs},
                         {"timed_runs", r.timed_runs}};
        out << j.dump() << "\n";
    }
    for (const auto& d : derived) {
        nlohmann::json j{{"derived", true},
                         {"n_keys", d.n_keys},
                         {"speedup", d.speedup},
                         {"input_overhead_pct", d.input_overhead_pct}};
        out << j.dump() << "\n";
    }
}

// ---- mask-ratio sweep ----

std::vector<SweepRow> mask_ratio_sweep(const std::vector<double>& lambdas, int n_seeds, const SweepSettings& st) {
    for (double l : lambdas)
        if (!(l > 0.0 && l < 1.0)) throw std::invalid_argument("sweep lambda outside (0,1)");
    const Vocabulary vocab = Vocabulary::build(st.schema);
    std::vector<SweepRow> rows(lambdas.size());
    for (size_t i = 0; i < lambdas.size(); ++i) rows[i].lambda = lambdas[i];

    for (int seed = 0; seed < n_seeds; ++seed) {
        std::vector<DocumentGrid> train_docs, eval_docs;
        const uint64_t base = st.data_seed + static_cast<uint64_t>(seed) * 1000000ULL;
        for (int i = 0; i < st.n_train_docs; ++i) train_docs.push_back(generate_document(base + i, st.schema));
        for (int i = 0; i < st.n_eval_docs; ++i)
            eval_docs.push_back(generate_document(base + 500000ULL + i, st.schema));

        ModelConfig mc = st.model;
        mc.vocab_size = vocab.size();
        mc.attention_mode = AttentionMode::BIDIRECTIONAL;
        mc.rng_seed = static_cast<uint64_t>(seed) + 11;
        const Model init = Model::random_init(mc);  // identical init across lambdas

        for (size_t li = 0; li < lambdas.size(); ++li) {
            Model m = init;
            OptimizerState opt;
            TrainConfig pc;
            pc.stage = Stage::PRETRAIN;
            pc.lambda = lambdas[li];
            // with the source cell visible, higher ratios degenerate into an
            // easy transcription task and more masking is always better; the
            // sweep masks the aligned cell so lambda measures cloze difficulty
            pc.mask_aligned_doc = true;
            pc.epochs = st.pretrain_epochs;
            pc.learning_rate = st.learning_rate;
            pc.batch_size = st.batch_size;
            pc.rng_seed = static_cast<uint64_t>(seed) * 31 + 1;
            pretrain(m, opt, train_docs, vocab, pc);

            OptimizerState opt2;
            TrainConfig sc = pc;
            sc.stage = Stage::SFT;
            sc.epochs = st.sft_epochs;
            finetune_kv(m, opt2, train_docs, st.schema, vocab, sc);

            const EvalSummary es = evaluate_model(m, vocab, st.schema, eval_docs, DecodeMode::PARALLEL);
            rows[li].anls_mean += es.anls;
            rows[li].exact_mean += es.exact_accuracy;
            ++rows[li].n_seeds;
        }
    }
    for (auto& r : rows) {
        r.anls_mean /= r.n_seeds;
        r.exact_mean /= r.n_seeds;
    }
    return rows;
}

// ---- attention localization ----

void write_pgm(const std::string& path, int width, int height, const std::vector<double>& values) {
    if (static_cast<int>(values.size()) != width * height) throw DimensionError("pgm: values size != width*height");
    double mx = 0;
    for (double v : values) mx = std::max(mx, v);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ParseError("cannot write pgm: " + path);
    out << "P5\n" << width << " " << height << "\n255\n";
    for (double v : values) {
        const int gray = mx > 0 ? static_cast<int>(std::lround(v / mx * 255.0)) : 0;
        out.put(static_cast<char>(std::clamp(gray, 0, 255)));
    }
}

void LocalizationReport::write_csv(const std::string& path) const {
    std::ofstream out(path);
    out << "doc_id,key,slot,token,argmax_row,argmax_col,chebyshev,hit\n";
    for (const auto& r : rows)
        out << r.doc_id << "," << r.key << "," << r.slot << "," << r.token << "," << r.argmax_row << ","
            << r.argmax_col << "," << r.chebyshev << "," << (r.hit ? 1 : 0) << "\n";
}

LocalizationReport attention_localization(const Model& pip_model, const Vocabulary& vocab, const Schema& schema,
                                          const std::vector<DocumentGrid>& docs, int margin, int layer,
                                          const std::string& heatmap_dir) {
    if (pip_model.config.attention_mode != AttentionMode::BIDIRECTIONAL)
        throw ModeError("attention localization requires a BIDIRECTIONAL model");
    LocalizationReport rep;
    rep.margin = margin;
    const int L = layer < 0 ? pip_model.config.n_layers - 1 : layer;
    if (L < 0 || L >= pip_model.config.n_layers) throw DimensionError("attention layer out of range");
    std::vector<std::string> keys;
    for (const auto& k : schema.keys) keys.push_back(k.name);

    int hits = 0;
    for (const auto& doc : docs) {
        DecodeRequest req{&doc, keys, schema.l_max, DecodeMode::PARALLEL};
        AttentionRecord attn;
        PromptScaffold sc;
        const DecodeOutput out = parallel_decode(pip_model, vocab, req, &attn, &sc);
        const TokenSequence doc_seq = tokenize_document(doc, vocab);
        const int64_t n_doc = static_cast<int64_t>(doc_seq.size());
        if (n_doc == 0) continue;
        const int H = attn.n_heads;
        const int64_t T = attn.seq_len;

        std::map<std::string, std::vector<double>> heat;  // per present field
        for (const auto& slot : sc.slots) {
            const std::string& key = keys[slot.key_index];
            const FieldResult* fr = out.field(key);
            if (!fr || slot.slot >= static_cast<int>(fr->value.size())) continue;
            const KVAnnotation* ann = nullptr;
            for (const auto& f : doc.fields)
                if (f.key == key && f.present()) ann = &f;
            if (!ann) continue;

            // head-mean attention of this slot restricted to DOC keys, renormalized
            std::vector<double> w(static_cast<size_t>(n_doc), 0.0);
            double total = 0;
            for (int h = 0; h < H; ++h) {
                const Tensor<float>& P = attn.at(L, h);
                const float* row = &P.data[static_cast<int64_t>(slot.pos) * T];
                for (int64_t j = 0; j < n_doc; ++j) w[j] += row[j];
            }
            for (int64_t j = 0; j < n_doc; ++j) total += w[j];
            if (total <= 0) continue;
            for (int64_t j = 0; j < n_doc; ++j) w[j] /= total;

            int64_t best = 0;
            for (int64_t j = 1; j < n_doc; ++j)
                if (w[j] > w[best]) best = j;
            const int ar = doc_seq.pos[best].row, ac = doc_seq.pos[best].col;
            int dist = 1 << 20;
            for (int c = ann->col_start; c < ann->col_end; ++c)
                dist = std::min(dist, std::max(std::abs(ar - ann->row), std::abs(ac - c)));

            LocalizationRow lr;
            lr.doc_id = doc.doc_id;
            lr.key = key;
            lr.slot = slot.slot;
            lr.token = std::string(1, fr->value[slot.slot]);
            lr.argmax_row = ar;
            lr.argmax_col = ac;
            lr.chebyshev = dist;
            lr.hit = dist <= margin;
            if (lr.hit) ++hits;
            rep.rows.push_back(lr);

            if (!heatmap_dir.empty()) {
                auto& hmap = heat[key];
                if (hmap.empty()) hmap.assign(static_cast<size_t>(doc.width * doc.height), 0.0);
                for (int64_t j = 0; j < n_doc; ++j)
                    hmap[doc_seq.pos[j].row * doc.width + doc_seq.pos[j].col] += w[j];
            }
        }
        if (!heatmap_dir.empty())
            for (const auto& [key, hmap] : heat)
                write_pgm(heatmap_dir + "/" + doc.doc_id + "_" + key + ".pgm", doc.width, doc.height, hmap);
    }
    rep.n_tokens = static_cast<int>(rep.rows.size());
    rep.hit_rate = rep.n_tokens ? static_cast<double>(hits) / rep.n_tokens : 0.0;
    return rep;
}

}  // namespace pip
