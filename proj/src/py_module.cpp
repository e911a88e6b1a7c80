// Python bindings for the core operations: corpus generation, model
// construction, the three training stages, both decoders, and metrics.
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "pip/eval.hpp"

namespace py = pybind11;
using namespace pip;

namespace {

DecodeOutput decode_doc(const Model& m, const Vocabulary& vocab, const DocumentGrid& doc,
                        const std::vector<std::string>& keys, int l_max, const std::string& mode) {
    DecodeRequest req;
    req.doc = &doc;
    req.keys = keys;
    req.l_max = l_max;
    if (mode == "parallel") return parallel_decode(m, vocab, req);
    if (mode == "ar") return ar_decode(m, vocab, req);
    throw std::invalid_argument("mode must be 'parallel' or 'ar'");
}

}  // namespace

PYBIND11_MODULE(_pip_kie, m) {
    m.doc() = "Key-value extraction with a switchable causal/bidirectional transformer";

    py::register_exception<GenerationError>(m, "GenerationError");
    py::register_exception<VocabError>(m, "VocabError");
    py::register_exception<ParseError>(m, "ParseError");
    py::register_exception<SchemaError>(m, "SchemaError");
    py::register_exception<CapacityError>(m, "CapacityError");
    py::register_exception<ModeError>(m, "ModeError");
    py::register_exception<CheckpointError>(m, "CheckpointError");
    py::register_exception<ConfigError>(m, "ConfigError");

    py::enum_<AttentionMode>(m, "AttentionMode")
        .value("CAUSAL", AttentionMode::CAUSAL)
        .value("BIDIRECTIONAL", AttentionMode::BIDIRECTIONAL);
    py::enum_<Stage>(m, "Stage")
        .value("PRETRAIN", Stage::PRETRAIN)
        .value("SFT", Stage::SFT)
        .value("AR_BASELINE", Stage::AR_BASELINE);
    py::enum_<DecodeMode>(m, "DecodeMode")
        .value("AR", DecodeMode::AR)
        .value("PARALLEL", DecodeMode::PARALLEL);

    py::class_<FieldSpec>(m, "FieldSpec")
        .def(py::init<>())
        .def_readwrite("name", &FieldSpec::name)
        .def_readwrite("pattern", &FieldSpec::pattern);

    py::class_<Schema>(m, "Schema")
        .def(py::init<>())
        .def_readwrite("name", &Schema::name)
        .def_readwrite("keys", &Schema::keys)
        .def_readwrite("l_max", &Schema::l_max)
        .def_readwrite("p_present", &Schema::p_present)
        .def_readwrite("grid_width", &Schema::grid_width)
        .def_readwrite("grid_height", &Schema::grid_height)
        .def_readwrite("n_distractors", &Schema::n_distractors)
        .def("validate", &Schema::validate)
        .def("key_names", [](const Schema& s) {
            std::vector<std::string> names;
            for (const auto& k : s.keys) names.push_back(k.name);
            return names;
        });

    m.def("receipt_schema", &receipt_schema);
    m.def("wide_schema", &wide_schema, py::arg("n_keys"));
    m.def("load_schema", &load_schema, py::arg("path"));
    m.def("save_schema", &save_schema, py::arg("schema"), py::arg("path"));

    py::class_<KVAnnotation>(m, "KVAnnotation")
        .def_readonly("key", &KVAnnotation::key)
        .def_readonly("value", &KVAnnotation::value)
        .def_readonly("row", &KVAnnotation::row)
        .def_readonly("col_start", &KVAnnotation::col_start)
        .def_readonly("col_end", &KVAnnotation::col_end)
        .def("present", &KVAnnotation::present);

    py::class_<DocumentGrid>(m, "DocumentGrid")
        .def_readonly("width", &DocumentGrid::width)
        .def_readonly("height", &DocumentGrid::height)
        .def_readonly("rows", &DocumentGrid::rows)
        .def_readonly("fields", &DocumentGrid::fields)
        .def_readonly("doc_id", &DocumentGrid::doc_id)
        .def_readonly("seed", &DocumentGrid::seed)
        .def("non_empty_cells", &DocumentGrid::non_empty_cells)
        .def("text", [](const DocumentGrid& d) {
            std::string out;
            for (const auto& r : d.rows) {
                out += r;
                out += '\n';
            }
            return out;
        });

    m.def("generate_document", &generate_document, py::arg("seed"), py::arg("schema"));
    m.def("write_dataset", &write_dataset, py::arg("path"), py::arg("docs"));
    m.def("read_dataset", &read_dataset, py::arg("path"));

    py::class_<Vocabulary>(m, "Vocabulary")
        .def_static("build", &Vocabulary::build, py::arg("schema"))
        .def("size", &Vocabulary::size)
        .def("token_name", &Vocabulary::token_name, py::arg("id"))
        .def("key_id", &Vocabulary::key_id, py::arg("key"))
        .def("char_id", &Vocabulary::char_id, py::arg("c"))
        .def("to_json", &Vocabulary::to_json)
        .def_static("from_json", &Vocabulary::from_json, py::arg("text"));

    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_readwrite("d_model", &ModelConfig::d_model)
        .def_readwrite("n_layers", &ModelConfig::n_layers)
        .def_readwrite("n_heads", &ModelConfig::n_heads)
        .def_readwrite("d_ff", &ModelConfig::d_ff)
        .def_readwrite("max_seq_len", &ModelConfig::max_seq_len)
        .def_readwrite("max_rows", &ModelConfig::max_rows)
        .def_readwrite("max_cols", &ModelConfig::max_cols)
        .def_readwrite("vocab_size", &ModelConfig::vocab_size)
        .def_readwrite("attention_mode", &ModelConfig::attention_mode)
        .def_readwrite("rng_seed", &ModelConfig::rng_seed)
        .def("validate", &ModelConfig::validate);

    m.def("param_count", &param_count, py::arg("config"));

    py::class_<Model>(m, "Model")
        .def_static("random_init", &Model::random_init, py::arg("config"))
        .def_readonly("config", &Model::config)
        .def("param_count", [](const Model& mm) { return param_count(mm.config); });

    py::class_<OptimizerState>(m, "OptimizerState").def(py::init<>());

    py::class_<Checkpoint>(m, "Checkpoint")
        .def_readonly("model", &Checkpoint::model)
        .def_readonly("vocab_json", &Checkpoint::vocab_json)
        .def_readonly("schema_json", &Checkpoint::schema_json);

    m.def(
        "checkpoint_save",
        [](const Model& mm, const std::string& vocab_json, const std::string& schema_json, const std::string& path,
           const OptimizerState* opt) { checkpoint_save(mm, vocab_json, schema_json, path, opt); },
        py::arg("model"), py::arg("vocab_json"), py::arg("schema_json"), py::arg("path"),
        py::arg("optimizer") = nullptr);
    m.def("checkpoint_load", &checkpoint_load, py::arg("path"));

    py::class_<TrainConfig>(m, "TrainConfig")
        .def(py::init<>())
        .def_readwrite("stage", &TrainConfig::stage)
        .def_readwrite("learning_rate", &TrainConfig::learning_rate)
        .def_readwrite("epochs", &TrainConfig::epochs)
        .def_readwrite("batch_size", &TrainConfig::batch_size)
        .def_readwrite("lambda_", &TrainConfig::lambda)
        .def_readwrite("mask_aligned_doc", &TrainConfig::mask_aligned_doc)
        .def_readwrite("reweight_by_inv_lambda", &TrainConfig::reweight_by_inv_lambda)
        .def_readwrite("rng_seed", &TrainConfig::rng_seed);

    py::class_<TrainStepRecord>(m, "TrainStepRecord")
        .def_readonly("step", &TrainStepRecord::step)
        .def_readonly("loss", &TrainStepRecord::loss)
        .def_readonly("tokens_in_loss", &TrainStepRecord::tokens_in_loss)
        .def_readonly("pad_eos_fraction", &TrainStepRecord::pad_eos_fraction);

    py::class_<TrainLog>(m, "TrainLog")
        .def_readonly("steps", &TrainLog::steps)
        .def_readonly("first_loss", &TrainLog::first_loss)
        .def_readonly("final_loss", &TrainLog::final_loss)
        .def_readonly("total_time_s", &TrainLog::total_time_s)
        .def("write_jsonl", &TrainLog::write_jsonl, py::arg("path"));

    m.def("pretrain", &pretrain, py::arg("model"), py::arg("optimizer"), py::arg("docs"), py::arg("vocab"),
          py::arg("config"));
    m.def("finetune_kv", &finetune_kv, py::arg("model"), py::arg("optimizer"), py::arg("docs"), py::arg("schema"),
          py::arg("vocab"), py::arg("config"));
    m.def("train_ar_baseline", &train_ar_baseline, py::arg("model"), py::arg("optimizer"), py::arg("docs"),
          py::arg("schema"), py::arg("vocab"), py::arg("config"));

    py::class_<FieldResult>(m, "FieldResult")
        .def_readonly("value", &FieldResult::value)
        .def_readonly("confidences", &FieldResult::confidences)
        .def_readonly("malformed", &FieldResult::malformed)
        .def_readonly("empty", &FieldResult::empty);

    py::class_<DecodeOutput>(m, "DecodeOutput")
        .def_readonly("fields", &DecodeOutput::fields)
        .def_readonly("forward_pass_count", &DecodeOutput::forward_pass_count)
        .def_readonly("generated_token_count", &DecodeOutput::generated_token_count)
        .def_readonly("input_token_count", &DecodeOutput::input_token_count)
        .def_readonly("wall_time_s", &DecodeOutput::wall_time_s)
        .def("value", [](const DecodeOutput& o, const std::string& key) {
            const FieldResult* f = o.field(key);
            if (!f) throw py::key_error(key);
            return f->value;
        });

    m.def("decode", &decode_doc, py::arg("model"), py::arg("vocab"), py::arg("doc"), py::arg("keys"),
          py::arg("l_max"), py::arg("mode") = "parallel");

    m.def("levenshtein", &levenshtein, py::arg("a"), py::arg("b"));
    m.def(
        "anls_pair", [](const std::string& pred, const std::string& gold) { return anls_pair(pred, gold); },
        py::arg("pred"), py::arg("gold"));

    py::class_<EvalSummary>(m, "EvalSummary")
        .def_readonly("anls", &EvalSummary::anls)
        .def_readonly("exact_accuracy", &EvalSummary::exact_accuracy)
        .def_readonly("unknown_recall", &EvalSummary::unknown_recall)
        .def_readonly("n_docs", &EvalSummary::n_docs)
        .def_readonly("n_fields", &EvalSummary::n_fields)
        .def_readonly("mean_forward_passes", &EvalSummary::mean_forward_passes);

    m.def(
        "evaluate_model",
        [](const Model& mm, const Vocabulary& v, const Schema& s, const std::vector<DocumentGrid>& docs,
           DecodeMode mode) { return evaluate_model(mm, v, s, docs, mode); },
        py::arg("model"), py::arg("vocab"), py::arg("schema"), py::arg("docs"), py::arg("mode"));
}
