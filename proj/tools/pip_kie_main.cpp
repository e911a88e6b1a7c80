// pip-kie: single entry point for corpus generation, training, evaluation,
// benchmarking, mask-ratio sweeps, and attention visualization.
#include <CLI11.hpp>

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "pip/decode.hpp"
#include "pip/eval.hpp"
#include "pip/training.hpp"

using nlohmann::json;
using namespace pip;

namespace {

constexpr const char* kVersion = "pip-kie 0.1.0";

std::string iso_now() {
    const std::time_t t = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

uint64_t fnv1a_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open artifact for checksum: " + path);
    uint64_t h = 1469598103934665603ULL;
    char c;
    while (in.get(c)) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ULL;
    }
    return h;
}

// Written beside the first output as <out>.manifest.json, atomically
// (temp file + rename), after all artifacts exist.
struct ManifestWriter {
    std::string command;
    json config = json::object();
    std::vector<std::string> inputs, outputs;
    std::string started = iso_now();

    void write() const {
        if (outputs.empty()) return;
        json j;
        j["tool_version"] = kVersion;
        j["command"] = command;
        j["config"] = config;
        j["inputs"] = inputs;
        j["outputs"] = outputs;
        json sums = json::object();
        for (const auto& o : outputs) sums[o] = fnv1a_file(o);
        j["artifact_checksums_fnv1a64"] = sums;
        j["started"] = started;
        j["finished"] = iso_now();
        const std::string path = outputs.front() + ".manifest.json";
        const std::string tmp = path + ".tmp";
        {
            std::ofstream out(tmp);
            out << j.dump(2) << "\n";
        }
        std::rename(tmp.c_str(), path.c_str());
    }
};

std::string data_dir_default() {
    const char* env = std::getenv("PIP_KIE_DATA_DIR");
    return env ? std::string(env) : std::string(".");
}

// "receipt", "wide:N", or a schema JSON file path
Schema resolve_schema(const std::string& spec) {
    if (spec == "receipt") return receipt_schema();
    if (spec.rfind("wide:", 0) == 0) return wide_schema(std::stoi(spec.substr(5)));
    return load_schema(spec);
}

std::string schema_to_json(const Schema& s) {
    json j;
    j["name"] = s.name;
    j["keys"] = json::array();
    for (const auto& k : s.keys) j["keys"].push_back({{"name", k.name}, {"pattern", k.pattern}});
    j["l_max"] = s.l_max;
    j["p_present"] = s.p_present;
    j["grid_width"] = s.grid_width;
    j["grid_height"] = s.grid_height;
    j["n_distractors"] = s.n_distractors;
    return j.dump();
}

Schema schema_from_json(const std::string& text) {
    const json j = json::parse(text);
    Schema s;
    s.name = j.at("name").get<std::string>();
    for (const auto& k : j.at("keys"))
        s.keys.push_back({k.at("name").get<std::string>(), k.at("pattern").get<std::string>()});
    s.l_max = j.value("l_max", 8);
    s.p_present = j.value("p_present", 0.85);
    s.grid_width = j.value("grid_width", 32);
    s.grid_height = j.value("grid_height", 16);
    s.n_distractors = j.value("n_distractors", 3);
    s.validate();
    return s;
}

// optional model-config JSON file; flags override file values
ModelConfig model_config_from_file(const std::string& path, int32_t vocab, AttentionMode mode) {
    ModelConfig cfg;
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw ParseError("cannot open config file: " + path);
        json j;
        try {
            in >> j;
        } catch (const json::exception& e) {
            throw ParseError(std::string("config parse error: ") + e.what());
        }
        cfg.d_model = j.value("d_model", cfg.d_model);
        cfg.n_layers = j.value("n_layers", cfg.n_layers);
        cfg.n_heads = j.value("n_heads", cfg.n_heads);
        cfg.d_ff = j.value("d_ff", cfg.d_ff);
        cfg.max_seq_len = j.value("max_seq_len", cfg.max_seq_len);
        cfg.max_rows = j.value("max_rows", cfg.max_rows);
        cfg.max_cols = j.value("max_cols", cfg.max_cols);
        cfg.rng_seed = j.value("rng_seed", cfg.rng_seed);
    }
    cfg.vocab_size = vocab;
    cfg.attention_mode = mode;
    cfg.validate();
    return cfg;
}

json model_config_json(const ModelConfig& c) {
    return json{{"d_model", c.d_model},       {"n_layers", c.n_layers},
                {"n_heads", c.n_heads},       {"d_ff", c.d_ff},
                {"max_seq_len", c.max_seq_len}, {"max_rows", c.max_rows},
                {"max_cols", c.max_cols},     {"vocab_size", c.vocab_size},
                {"attention_mode", to_string(c.attention_mode)}, {"rng_seed", c.rng_seed}};
}

json train_config_json(const TrainConfig& c) {
    return json{{"stage", to_string(c.stage)}, {"learning_rate", c.learning_rate},
                {"epochs", c.epochs},          {"batch_size", c.batch_size},
                {"lambda", c.lambda},          {"mask_aligned_doc", c.mask_aligned_doc},
                {"rng_seed", c.rng_seed}};
}

int run(int argc, char** argv) {
    CLI::App app{"pip-kie: parallel key-information extraction experiments"};
    app.require_subcommand(1);
    int threads = 1;
    app.add_option("--threads", threads,
                   "worker threads (timing-critical sections always run single-threaded)");

    // ---- gen-data ----
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic document dataset");
    std::string g_schema = "receipt", g_out = data_dir_default() + "/dataset.jsonl";
    int g_count = 100;
    uint64_t g_seed = 0;
    gen->add_option("--schema", g_schema, "'receipt', 'wide:N', or schema JSON path");
    gen->add_option("--count", g_count, "number of documents")->check(CLI::PositiveNumber);
    gen->add_option("--seed", g_seed, "base seed; document i uses seed+i");
    gen->add_option("--out", g_out, "output JSONL path");

    // ---- pretrain ----
    auto* pre = app.add_subcommand("pretrain", "stage-1 mask pretraining (bidirectional)");
    std::string p_data, p_config, p_out = "pretrained.ckpt", p_schema = "receipt";
    double p_lambda = 0.5;
    int p_epochs = 1, p_batch = 8;
    float p_lr = 3e-4f;
    uint64_t p_seed = 0;
    std::string p_log;
    pre->add_option("--data", p_data, "training dataset JSONL")->required();
    pre->add_option("--schema", p_schema, "'receipt', 'wide:N', or schema JSON path");
    pre->add_option("--config", p_config, "model config JSON file");
    pre->add_option("--lambda", p_lambda, "mask ratio in (0,1)");
    bool p_mask_aligned = false;
    pre->add_flag("--mask-aligned-doc", p_mask_aligned, "also mask the document cell behind each masked caption token");
    pre->add_option("--epochs", p_epochs);
    pre->add_option("--lr", p_lr);
    pre->add_option("--batch-size", p_batch);
    pre->add_option("--seed", p_seed);
    pre->add_option("--log", p_log, "per-step training log JSONL");
    pre->add_option("--out", p_out, "output checkpoint");

    // ---- finetune ----
    auto* fin = app.add_subcommand("finetune", "stage-2 key-value SFT from a checkpoint");
    std::string f_data, f_init, f_out = "finetuned.ckpt", f_log;
    int f_epochs = 1, f_batch = 8;
    float f_lr = 3e-4f;
    bool f_resume_opt = false;
    uint64_t f_seed = 0;
    fin->add_option("--data", f_data)->required();
    fin->add_option("--init", f_init, "initial checkpoint (from pretrain)")->required();
    fin->add_option("--epochs", f_epochs);
    fin->add_option("--lr", f_lr);
    fin->add_option("--batch-size", f_batch);
    fin->add_option("--seed", f_seed);
    fin->add_flag("--resume-opt", f_resume_opt,
                  "continue the optimizer state stored in --init (for staged learning rates)");
    fin->add_option("--log", f_log);
    fin->add_option("--out", f_out);

    // ---- train-ar ----
    auto* tar = app.add_subcommand("train-ar", "autoregressive baseline (causal, from scratch)");
    std::string a_data, a_config, a_out = "ar.ckpt", a_schema = "receipt", a_log;
    int a_epochs = 1, a_batch = 8;
    float a_lr = 3e-4f;
    uint64_t a_seed = 0;
    tar->add_option("--data", a_data)->required();
    tar->add_option("--schema", a_schema);
    tar->add_option("--config", a_config);
    tar->add_option("--epochs", a_epochs);
    tar->add_option("--lr", a_lr);
    tar->add_option("--batch-size", a_batch);
    tar->add_option("--seed", a_seed);
    tar->add_option("--log", a_log);
    tar->add_option("--out", a_out);

    // ---- eval ----
    auto* ev = app.add_subcommand("eval", "score a checkpoint on a dataset");
    std::string e_model, e_mode = "parallel", e_data, e_out = "metrics.json";
    ev->add_option("--model", e_model)->required();
    ev->add_option("--mode", e_mode)->check(CLI::IsMember({"ar", "parallel"}));
    ev->add_option("--data", e_data)->required();
    ev->add_option("--metrics-out", e_out);

    // ---- bench ----
    auto* be = app.add_subcommand("bench", "paired AR/parallel latency benchmark");
    std::string b_ar, b_pip, b_data, b_keys = "2,8,32", b_out = "bench.jsonl";
    int b_lmax = 8, b_warmup = 5, b_runs = 30;
    be->add_option("--ar", b_ar, "AR checkpoint")->required();
    be->add_option("--pip", b_pip, "parallel checkpoint")->required();
    be->add_option("--data", b_data)->required();
    be->add_option("--keys", b_keys, "comma-separated key counts");
    be->add_option("--l-max", b_lmax);
    be->add_option("--warmup", b_warmup);
    be->add_option("--runs", b_runs, "timed runs per cell (>= 30)");
    be->add_option("--out", b_out);

    // ---- sweep-lambda ----
    auto* sw = app.add_subcommand("sweep-lambda", "mask-ratio sweep over pretrain+SFT");
    std::string s_lambdas = "0.1,0.3,0.5,0.7,0.9", s_out = "sweep.jsonl", s_schema = "receipt";
    int s_seeds = 3, s_train = 150, s_eval = 60, s_pre = 6, s_sft = 2, s_batch = 8;
    int s_dmodel = 32, s_layers = 2, s_heads = 4, s_dff = 128;
    float s_lr = 1e-3f;
    uint64_t s_data_seed = 0;
    sw->add_option("--lambdas", s_lambdas);
    sw->add_option("--seeds", s_seeds)->check(CLI::PositiveNumber);
    sw->add_option("--schema", s_schema);
    sw->add_option("--train-docs", s_train);
    sw->add_option("--eval-docs", s_eval);
    sw->add_option("--pretrain-epochs", s_pre);
    sw->add_option("--sft-epochs", s_sft);
    sw->add_option("--lr", s_lr);
    sw->add_option("--batch-size", s_batch);
    sw->add_option("--d-model", s_dmodel);
    sw->add_option("--layers", s_layers);
    sw->add_option("--heads", s_heads);
    sw->add_option("--d-ff", s_dff);
    sw->add_option("--data-seed", s_data_seed);
    sw->add_option("--out", s_out);

    // ---- viz-attn ----
    auto* vz = app.add_subcommand("viz-attn", "attention localization report + PGM heatmaps");
    std::string v_model, v_data, v_layer = "last", v_dir = ".";
    int v_margin = 1;
    vz->add_option("--model", v_model)->required();
    vz->add_option("--data", v_data)->required();
    vz->add_option("--layer", v_layer, "'last' or a 0-based layer index");
    vz->add_option("--margin", v_margin, "hit margin in cells");
    vz->add_option("--out-dir", v_dir);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // help text, exit 0
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: usage: " << e.what() << "\n" << app.help();
        return 2;
    }
    (void)threads;  // all stages run single-threaded for determinism

    if (gen->parsed()) {
        const Schema schema = resolve_schema(g_schema);
        std::vector<DocumentGrid> docs;
        docs.reserve(static_cast<size_t>(g_count));
        for (int i = 0; i < g_count; ++i) docs.push_back(generate_document(g_seed + static_cast<uint64_t>(i), schema));
        write_dataset(g_out, docs);
        ManifestWriter mf{"gen-data",
                          json{{"schema", g_schema}, {"count", g_count}, {"seed", g_seed}},
                          {},
                          {g_out}};
        mf.write();
        std::cout << "wrote " << docs.size() << " documents to " << g_out << "\n";
        return 0;
    }

    if (pre->parsed()) {
        const Schema schema = resolve_schema(p_schema);
        const Vocabulary vocab = Vocabulary::build(schema);
        const auto docs = read_dataset(p_data);
        ModelConfig mc = model_config_from_file(p_config, vocab.size(), AttentionMode::BIDIRECTIONAL);
        Model m = Model::random_init(mc);
        OptimizerState opt;
        TrainConfig tc;
        tc.stage = Stage::PRETRAIN;
        tc.learning_rate = p_lr;
        tc.epochs = p_epochs;
        tc.batch_size = p_batch;
        tc.lambda = p_lambda;
        tc.mask_aligned_doc = p_mask_aligned;
        tc.rng_seed = p_seed;
        const TrainLog log = pretrain(m, opt, docs, vocab, tc);
        checkpoint_save(m, vocab.to_json(), schema_to_json(schema), p_out, &opt);
        ManifestWriter mf{"pretrain",
                          json{{"model", model_config_json(mc)}, {"train", train_config_json(tc)},
                               {"schema", p_schema}},
                          {p_data},
                          {p_out}};
        if (!p_log.empty()) {
            log.write_jsonl(p_log);
            mf.outputs.push_back(p_log);
        }
        mf.write();
        std::cout << "pretrain: loss " << log.first_loss << " -> " << log.final_loss << " over "
                  << log.steps.size() << " steps (" << log.total_time_s << "s)\n";
        return 0;
    }

    if (fin->parsed()) {
        Checkpoint ck = checkpoint_load(f_init);
        const Schema schema = schema_from_json(ck.schema_json);
        const Vocabulary vocab = Vocabulary::from_json(ck.vocab_json);
        const auto docs = read_dataset(f_data);
        OptimizerState opt;  // fresh optimizer for the new stage unless resuming
        if (f_resume_opt) {
            if (!ck.optimizer) throw ConfigError("--resume-opt: checkpoint has no optimizer state");
            opt = *ck.optimizer;
        }
        TrainConfig tc;
        tc.stage = Stage::SFT;
        tc.learning_rate = f_lr;
        tc.epochs = f_epochs;
        tc.batch_size = f_batch;
        tc.rng_seed = f_seed;
        const TrainLog log = finetune_kv(ck.model, opt, docs, schema, vocab, tc);
        checkpoint_save(ck.model, ck.vocab_json, ck.schema_json, f_out, &opt);
        ManifestWriter mf{"finetune",
                          json{{"model", model_config_json(ck.model.config)}, {"train", train_config_json(tc)}},
                          {f_data, f_init},
                          {f_out}};
        if (!f_log.empty()) {
            log.write_jsonl(f_log);
            mf.outputs.push_back(f_log);
        }
        mf.write();
        std::cout << "finetune: loss " << log.first_loss << " -> " << log.final_loss << " over "
                  << log.steps.size() << " steps (" << log.total_time_s << "s)\n";
        return 0;
    }

    if (tar->parsed()) {
        const Schema schema = resolve_schema(a_schema);
        const Vocabulary vocab = Vocabulary::build(schema);
        const auto docs = read_dataset(a_data);
        ModelConfig mc = model_config_from_file(a_config, vocab.size(), AttentionMode::CAUSAL);
        Model m = Model::random_init(mc);
        OptimizerState opt;
        TrainConfig tc;
        tc.stage = Stage::AR_BASELINE;
        tc.learning_rate = a_lr;
        tc.epochs = a_epochs;
        tc.batch_size = a_batch;
        tc.rng_seed = a_seed;
        const TrainLog log = train_ar_baseline(m, opt, docs, schema, vocab, tc);
        checkpoint_save(m, vocab.to_json(), schema_to_json(schema), a_out, &opt);
        ManifestWriter mf{"train-ar",
                          json{{"model", model_config_json(mc)}, {"train", train_config_json(tc)},
                               {"schema", a_schema}},
                          {a_data},
                          {a_out}};
        if (!a_log.empty()) {
            log.write_jsonl(a_log);
            mf.outputs.push_back(a_log);
        }
        mf.write();
        std::cout << "train-ar: loss " << log.first_loss << " -> " << log.final_loss << " over "
                  << log.steps.size() << " steps (" << log.total_time_s << "s)\n";
        return 0;
    }

    if (ev->parsed()) {
        const Checkpoint ck = checkpoint_load(e_model);
        const Schema schema = schema_from_json(ck.schema_json);
        const Vocabulary vocab = Vocabulary::from_json(ck.vocab_json);
        const auto docs = read_dataset(e_data);
        const DecodeMode mode = e_mode == "ar" ? DecodeMode::AR : DecodeMode::PARALLEL;
        const MetricConfig metric;
        const EvalSummary sum = evaluate_model(ck.model, vocab, schema, docs, mode, metric);
        json j{{"mode", e_mode},
               {"anls_threshold", metric.anls_threshold},
               {"anls", sum.anls},
               {"exact_accuracy", sum.exact_accuracy},
               {"f1", sum.f1.f1},
               {"precision", sum.f1.precision},
               {"recall", sum.f1.recall},
               {"unknown_recall", sum.unknown_recall},
               {"n_docs", sum.n_docs},
               {"n_fields", sum.n_fields},
               {"n_absent", sum.n_absent},
               {"mean_wall_time_s", sum.mean_wall_time_s},
               {"mean_forward_passes", sum.mean_forward_passes}};
        {
            std::ofstream out(e_out);
            if (!out) throw ParseError("cannot open for writing: " + e_out);
            out << j.dump(2) << "\n";
        }
        ManifestWriter mf{"eval", json{{"mode", e_mode}}, {e_model, e_data}, {e_out}};
        mf.write();
        std::cout << j.dump(2) << "\n";
        return 0;
    }

    if (be->parsed()) {
        const Checkpoint ar = checkpoint_load(b_ar);
        const Checkpoint pp = checkpoint_load(b_pip);
        const Schema schema = schema_from_json(pp.schema_json);
        const Vocabulary vocab = Vocabulary::from_json(pp.vocab_json);
        const auto docs = read_dataset(b_data);
        std::vector<int> key_counts;
        std::stringstream ss(b_keys);
        for (std::string tok; std::getline(ss, tok, ',');) key_counts.push_back(std::stoi(tok));
        const BenchReport rep =
            run_benchmark(ar.model, pp.model, vocab, schema, docs, key_counts, b_lmax, b_warmup, b_runs);
        rep.write_jsonl(b_out);
        ManifestWriter mf{"bench",
                          json{{"keys", b_keys}, {"l_max", b_lmax}, {"warmup", b_warmup}, {"runs", b_runs},
                               {"single_threaded", true}},
                          {b_ar, b_pip, b_data},
                          {b_out}};
        mf.write();
        std::cout << rep.table_text();
        return 0;
    }

    if (sw->parsed()) {
        std::vector<double> lambdas;
        std::stringstream ss(s_lambdas);
        for (std::string tok; std::getline(ss, tok, ',');) lambdas.push_back(std::stod(tok));
        SweepSettings st;
        st.schema = resolve_schema(s_schema);
        st.model.d_model = s_dmodel;
        st.model.n_layers = s_layers;
        st.model.n_heads = s_heads;
        st.model.d_ff = s_dff;
        st.model.max_seq_len = 256;
        st.model.max_rows = st.schema.grid_height;
        st.model.max_cols = st.schema.grid_width;
        st.model.vocab_size = Vocabulary::build(st.schema).size();
        st.model.attention_mode = AttentionMode::BIDIRECTIONAL;
        st.n_train_docs = s_train;
        st.n_eval_docs = s_eval;
        st.pretrain_epochs = s_pre;
        st.sft_epochs = s_sft;
        st.learning_rate = s_lr;
        st.batch_size = s_batch;
        st.data_seed = s_data_seed;
        const auto rows = mask_ratio_sweep(lambdas, s_seeds, st);
        {
            std::ofstream out(s_out);
            if (!out) throw ParseError("cannot open for writing: " + s_out);
            for (const auto& r : rows)
                out << json{{"lambda", r.lambda}, {"anls_mean", r.anls_mean}, {"exact_mean", r.exact_mean},
                            {"n_seeds", r.n_seeds}}
                           .dump()
                    << "\n";
        }
        ManifestWriter mf{"sweep-lambda",
                          json{{"lambdas", s_lambdas}, {"seeds", s_seeds}, {"schema", s_schema},
                               {"train_docs", s_train}, {"eval_docs", s_eval}, {"pretrain_epochs", s_pre},
                               {"sft_epochs", s_sft}, {"lr", s_lr}, {"data_seed", s_data_seed}},
                          {},
                          {s_out}};
        mf.write();
        std::cout << "lambda  anls    exact\n";
        for (const auto& r : rows)
            std::cout << r.lambda << "   " << r.anls_mean << "  " << r.exact_mean << "\n";
        return 0;
    }

    if (vz->parsed()) {
        const Checkpoint ck = checkpoint_load(v_model);
        const Schema schema = schema_from_json(ck.schema_json);
        const Vocabulary vocab = Vocabulary::from_json(ck.vocab_json);
        const auto docs = read_dataset(v_data);
        std::filesystem::create_directories(v_dir);
        const int layer = v_layer == "last" ? -1 : std::stoi(v_layer);
        const LocalizationReport rep = attention_localization(ck.model, vocab, schema, docs, v_margin, layer, v_dir);
        const std::string csv = v_dir + "/localization.csv";
        rep.write_csv(csv);
        ManifestWriter mf{"viz-attn",
                          json{{"layer", v_layer}, {"margin", v_margin}, {"aggregation", "head-mean"}},
                          {v_model, v_data},
                          {csv}};
        mf.write();
        std::cout << "localization hit-rate (margin " << rep.margin << "): " << rep.hit_rate << " over "
                  << rep.n_tokens << " tokens; csv + heatmaps in " << v_dir << "\n";
        return 0;
    }

    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ParseError& e) {
        std::cerr << "error: parse: " << e.what() << "\n";
    } catch (const VocabError& e) {
        std::cerr << "error: vocab: " << e.what() << "\n";
    } catch (const SchemaError& e) {
        std::cerr << "error: schema: " << e.what() << "\n";
    } catch (const GenerationError& e) {
        std::cerr << "error: generation: " << e.what() << "\n";
    } catch (const CheckpointError& e) {
        std::cerr << "error: checkpoint: " << e.what() << "\n";
    } catch (const CapacityError& e) {
        std::cerr << "error: capacity: " << e.what() << "\n";
    } catch (const ModeError& e) {
        std::cerr << "error: mode: " << e.what() << "\n";
    } catch (const ConfigError& e) {
        std::cerr << "error: config: " << e.what() << "\n";
    } catch (const InsufficientDataError& e) {
        std::cerr << "error: data: " << e.what() << "\n";
    } catch (const NumericError& e) {
        std::cerr << "error: numeric: " << e.what() << "\n";
    } catch (const DimensionError& e) {
        std::cerr << "error: dimension: " << e.what() << "\n";
    } catch (const std::exception& e) {
        std::cerr << "error: internal: " << e.what() << "\n";
    }
    return 1;
}
