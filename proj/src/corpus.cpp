#include "pip/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace pip {

using nlohmann::json;

namespace {

constexpr const char* kAlphabet =
    "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz.-/:,%$#";

std::string expand_pattern(const std::string& pattern, Rng& rng) {
    std::string out;
    out.reserve(pattern.size());
    for (char c : pattern) {
        if (c == '#')
            out.push_back(static_cast<char>('0' + rng.below(10)));
        else if (c == '@')
            out.push_back(static_cast<char>('A' + rng.below(26)));
        else
            out.push_back(c);
    }
    return out;
}

}  // namespace

void Schema::validate() const {
    if (keys.empty()) throw SchemaError("schema has no keys");
    if (l_max < 2) throw SchemaError("l_max must be >= 2");
    for (const auto& k : keys) {
        if (k.name.empty()) throw SchemaError("empty key name");
        if (static_cast<int>(k.pattern.size()) > l_max - 1)
            throw SchemaError("value pattern for key '" + k.name + "' exceeds l_max-1");
    }
}

Schema receipt_schema() {
    Schema s;
    s.name = "receipt";
    s.keys = {{"TOTAL", "###.##"}, {"DATE", "##/##"},  {"NUM", "####"},
              {"PRICE", "##.##"},  {"NAME", "@@@@@"},  {"TAX", "#.##"}};
    return s;
}

Schema wide_schema(int n_keys) {
    Schema s;
    s.name = "wide" + std::to_string(n_keys);
    for (int i = 0; i < n_keys; ++i) {
        std::string name = "F";
        name += static_cast<char>('A' + i / 10);
        name += static_cast<char>('0' + i % 10);
        s.keys.push_back({name, "###"});
    }
    // roughly 3 rendered fields per row, with slack for distractors
    s.grid_width = 40;
    s.grid_height = std::max(16, (n_keys + 2) / 3 * 2 + 6);
    s.n_distractors = 2;
    return s;
}

Schema load_schema(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open schema file: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ParseError("schema parse error in " + path + ": " + e.what());
    }
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

void save_schema(const Schema& s, const std::string& path) {
    json j;
    j["name"] = s.name;
    j["keys"] = json::array();
    for (const auto& k : s.keys) j["keys"].push_back({{"name", k.name}, {"pattern", k.pattern}});
    j["l_max"] = s.l_max;
    j["p_present"] = s.p_present;
    j["grid_width"] = s.grid_width;
    j["grid_height"] = s.grid_height;
    j["n_distractors"] = s.n_distractors;
    std::ofstream out(path);
    out << j.dump(2) << "\n";
}

int DocumentGrid::non_empty_cells() const {
    int n = 0;
    for (const auto& row : rows)
        for (char c : row)
            if (c != ' ') ++n;
    return n;
}

namespace {

// free run of cells with a one-cell gap so adjacent text stays separable
bool run_fits(const std::vector<std::string>& rows, int r, int c, int len, int width) {
    if (c + len > width) return false;
    const int lo = std::max(0, c - 1), hi = std::min(width - 1, c + len);
    for (int cc = lo; cc <= hi; ++cc)
        if (rows[r][cc] != ' ') return false;
    return true;
}

void write_run(std::vector<std::string>& rows, int r, int c, const std::string& text) {
    for (size_t i = 0; i < text.size(); ++i) rows[r][c + static_cast<int>(i)] = text[i];
}

}  // namespace

DocumentGrid generate_document(uint64_t seed, const Schema& schema) {
    schema.validate();
    Rng rng(seed * 0x9E3779B97F4A7C15ULL + 0x2545F4914F6CDD1DULL);
    DocumentGrid doc;
    doc.width = schema.grid_width;
    doc.height = schema.grid_height;
    doc.rows.assign(schema.grid_height, std::string(schema.grid_width, ' '));
    doc.seed = seed;
    doc.doc_id = schema.name + "-" + std::to_string(seed);

    for (const auto& key : schema.keys) {
        KVAnnotation ann;
        ann.key = key.name;
        const bool present = rng.uniform() < schema.p_present;
        if (present) {
            const std::string value = expand_pattern(key.pattern, rng);
            const std::string text = key.name + ":" + value;
            bool placed = false;
            for (int attempt = 0; attempt < 500 && !placed; ++attempt) {
                const int r = static_cast<int>(rng.below(doc.height));
                const int c = static_cast<int>(rng.below(doc.width));
                if (!run_fits(doc.rows, r, c, static_cast<int>(text.size()), doc.width)) continue;
                write_run(doc.rows, r, c, text);
                ann.value = value;
                ann.row = r;
                ann.col_start = c + static_cast<int>(key.name.size()) + 1;
                ann.col_end = ann.col_start + static_cast<int>(value.size());
                placed = true;
            }
            if (!placed)
                throw GenerationError("could not place field '" + key.name + "' after 500 attempts (seed " +
                                      std::to_string(seed) + "); reduce field count or enlarge grid");
        }
        doc.fields.push_back(std::move(ann));
    }

    // distractor runs of random characters in remaining space
    const std::string distractor_chars = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ";
    for (int d = 0; d < schema.n_distractors; ++d) {
        const int len = 3 + static_cast<int>(rng.below(5));
        std::string text;
        for (int i = 0; i < len; ++i)
            text.push_back(distractor_chars[rng.below(static_cast<int64_t>(distractor_chars.size()))]);
        for (int attempt = 0; attempt < 100; ++attempt) {
            const int r = static_cast<int>(rng.below(doc.height));
            const int c = static_cast<int>(rng.below(doc.width));
            if (!run_fits(doc.rows, r, c, len, doc.width)) continue;
            write_run(doc.rows, r, c, text);
            break;
        }
        // distractors are best-effort; a full grid just gets fewer of them
    }
    return doc;
}

// ---- vocabulary ----

Vocabulary Vocabulary::build(const Schema& schema) {
    Vocabulary v;
    v.names_ = {"[PAD]", "[MASK]", "[SEP]", "[BOS]", "[EOS]", "[UNKNOWN]"};
    for (const auto& k : schema.keys) v.names_.push_back("[KEY:" + k.name + "]");
    v.first_char_ = static_cast<int32_t>(v.names_.size());
    for (const char* p = kAlphabet; *p; ++p) v.names_.push_back(std::string(1, *p));
    v.index();
    return v;
}

void Vocabulary::index() {
    ids_.clear();
    chars_.clear();
    for (int32_t i = 0; i < static_cast<int32_t>(names_.size()); ++i) {
        ids_[names_[i]] = i;
        if (i >= first_char_) chars_[names_[i][0]] = i;
    }
    pad_ = ids_.at("[PAD]");
    mask_ = ids_.at("[MASK]");
    sep_ = ids_.at("[SEP]");
    bos_ = ids_.at("[BOS]");
    eos_ = ids_.at("[EOS]");
    unknown_ = ids_.at("[UNKNOWN]");
}

int32_t Vocabulary::key_id(const std::string& key) const {
    auto it = ids_.find("[KEY:" + key + "]");
    if (it == ids_.end()) throw SchemaError("unknown key: " + key);
    return it->second;
}

int32_t Vocabulary::char_id(char c) const {
    auto it = chars_.find(c);
    if (it == chars_.end()) throw VocabError(std::string("character not in vocabulary: '") + c + "'");
    return it->second;
}

bool Vocabulary::has_char(char c) const { return chars_.count(c) > 0; }
bool Vocabulary::is_char(int32_t id) const { return id >= first_char_ && id < size(); }
bool Vocabulary::is_key(int32_t id) const { return id >= 6 && id < first_char_; }

char Vocabulary::id_to_char(int32_t id) const {
    if (!is_char(id)) throw VocabError("token id " + std::to_string(id) + " is not a character token");
    return names_[id][0];
}

const std::string& Vocabulary::token_name(int32_t id) const {
    if (id < 0 || id >= size()) throw VocabError("token id out of range: " + std::to_string(id));
    return names_[id];
}

std::string Vocabulary::to_json() const {
    json j;
    j["names"] = names_;
    j["first_char"] = first_char_;
    return j.dump();
}

Vocabulary Vocabulary::from_json(const std::string& text) {
    Vocabulary v;
    try {
        json j = json::parse(text);
        v.names_ = j.at("names").get<std::vector<std::string>>();
        v.first_char_ = j.at("first_char").get<int32_t>();
    } catch (const json::exception& e) {
        throw ParseError(std::string("vocabulary parse error: ") + e.what());
    }
    v.index();
    return v;
}

// ---- token sequences ----

void TokenSequence::append(const TokenSequence& other) {
    ids.insert(ids.end(), other.ids.begin(), other.ids.end());
    pos.insert(pos.end(), other.pos.begin(), other.pos.end());
    segment.insert(segment.end(), other.segment.begin(), other.segment.end());
    loss_mask.insert(loss_mask.end(), other.loss_mask.begin(), other.loss_mask.end());
}

TokenSequence tokenize_document(const DocumentGrid& doc, const Vocabulary& vocab) {
    TokenSequence seq;
    for (int r = 0; r < doc.height; ++r) {
        for (int c = 0; c < doc.width; ++c) {
            const char ch = doc.cell(r, c);
            if (ch == ' ') continue;
            seq.push(vocab.char_id(ch), {static_cast<int16_t>(r), static_cast<int16_t>(c), -1}, Segment::DOC);
        }
    }
    return seq;
}

std::vector<uint8_t> sample_mask_positions(int64_t length, double lambda, uint64_t seed) {
    if (length < 1) throw std::invalid_argument("sample_mask_positions: length must be >= 1");
    if (!(lambda > 0.0 && lambda < 1.0)) throw std::invalid_argument("sample_mask_positions: lambda not in (0,1)");
    int64_t k = std::llround(lambda * static_cast<double>(length));
    k = std::max<int64_t>(1, std::min(k, length));
    // partial Fisher-Yates over position indices
    std::vector<int64_t> idx(length);
    for (int64_t i = 0; i < length; ++i) idx[i] = i;
    Rng rng(seed ^ 0xA24BAED4963EE407ULL);
    for (int64_t i = 0; i < k; ++i) {
        const int64_t j = i + rng.below(length - i);
        std::swap(idx[i], idx[j]);
    }
    std::vector<uint8_t> mask(length, 0);
    for (int64_t i = 0; i < k; ++i) mask[idx[i]] = 1;
    return mask;
}

namespace {

// row-major non-empty cells as character ids, [SEP] between non-empty rows
std::vector<int32_t> caption_ids(const DocumentGrid& doc, const Vocabulary& vocab) {
    std::vector<int32_t> out;
    bool row_written = false;
    for (int r = 0; r < doc.height; ++r) {
        bool any = false;
        for (int c = 0; c < doc.width; ++c) {
            const char ch = doc.cell(r, c);
            if (ch == ' ') continue;
            if (!any && row_written) out.push_back(vocab.sep());
            any = true;
            out.push_back(vocab.char_id(ch));
        }
        row_written = row_written || any;
    }
    return out;
}

TokenPos text_pos(int32_t index) { return {-1, -1, index}; }

}  // namespace

TrainExample make_pretrain_example(const DocumentGrid& doc, const Vocabulary& vocab, double lambda,
                                   uint64_t seed, bool mask_aligned_doc) {
    TrainExample ex;
    ex.input = tokenize_document(doc, vocab);
    if (ex.input.ids.empty()) throw GenerationError("pretrain example needs a non-empty document");
    const std::vector<int32_t> caption = caption_ids(doc, vocab);
    const std::vector<uint8_t> mask = sample_mask_positions(static_cast<int64_t>(caption.size()), lambda, seed);

    ex.targets.assign(ex.input.size(), -1);
    int32_t tpos = 0;
    ex.input.push(vocab.bos(), text_pos(tpos++), Segment::PROMPT);
    ex.targets.push_back(-1);
    // the caption is the row-major reading of non-empty cells, so the i-th
    // non-[SEP] caption token sits in the i-th document token's cell
    size_t cell = 0;
    for (size_t i = 0; i < caption.size(); ++i) {
        const bool is_sep = caption[i] == vocab.sep();
        const bool masked = mask[i] != 0;
        if (masked && mask_aligned_doc && !is_sep) ex.input.ids[cell] = vocab.mask();
        if (!is_sep) ++cell;
        ex.input.push(masked ? vocab.mask() : caption[i], text_pos(tpos++), Segment::PROMPT, masked);
        ex.targets.push_back(masked ? caption[i] : -1);
    }
    return ex;
}

TrainExample make_sft_example(const DocumentGrid& doc, const Vocabulary& vocab, const Schema& schema) {
    TrainExample ex;
    ex.input = tokenize_document(doc, vocab);
    ex.targets.assign(ex.input.size(), -1);
    int32_t tpos = 0;
    auto push = [&](int32_t id, Segment seg, bool loss, int32_t target) {
        ex.input.push(id, text_pos(tpos++), seg, loss);
        ex.targets.push_back(target);
    };
    push(vocab.bos(), Segment::PROMPT, false, -1);
    for (const auto& field : doc.fields) {
        push(vocab.key_id(field.key), Segment::PROMPT, false, -1);
        const std::string value = field.present() ? *field.value : "unknown";
        if (static_cast<int>(value.size()) > schema.l_max - 1)
            throw SchemaError("value for key '" + field.key + "' longer than l_max-1");
        for (int s = 0; s < schema.l_max; ++s) {
            int32_t target;
            if (s < static_cast<int>(value.size()))
                target = vocab.char_id(value[s]);
            else if (s == static_cast<int>(value.size()))
                target = vocab.eos();
            else
                target = vocab.pad();
            push(vocab.mask(), Segment::ANSWER, true, target);
        }
        push(vocab.sep(), Segment::PROMPT, false, -1);
    }
    return ex;
}

TrainExample make_ar_example(const DocumentGrid& doc, const Vocabulary& vocab, const Schema& schema) {
    TrainExample ex;
    ex.input = tokenize_document(doc, vocab);
    (void)schema;
    // build the text stream first, then derive next-token targets
    std::vector<int32_t> text;
    std::vector<uint8_t> is_forced;  // true for [BOS]/[KEY:*] prompt-forced tokens
    text.push_back(vocab.bos());
    is_forced.push_back(1);
    for (const auto& field : doc.fields) {
        text.push_back(vocab.key_id(field.key));
        is_forced.push_back(1);
        const std::string value = field.present() ? *field.value : "unknown";
        for (char c : value) {
            text.push_back(vocab.char_id(c));
            is_forced.push_back(0);
        }
        text.push_back(vocab.sep());
        is_forced.push_back(0);
    }
    text.push_back(vocab.eos());
    is_forced.push_back(0);

    ex.targets.assign(ex.input.size(), -1);
    for (size_t i = 0; i < text.size(); ++i) {
        // loss at position i when the following token is generated (not forced)
        const bool supervised = i + 1 < text.size() && !is_forced[i + 1];
        const Segment seg = is_forced[i] ? Segment::PROMPT : Segment::ANSWER;
        ex.input.push(text[i], text_pos(static_cast<int32_t>(i)), seg, supervised);
        ex.targets.push_back(supervised ? text[i + 1] : -1);
    }
    return ex;
}

// ---- dataset io ----

void write_dataset(const std::string& path, const std::vector<DocumentGrid>& docs) {
    std::ofstream out(path);
    if (!out) throw ParseError("cannot open for writing: " + path);
    for (const auto& d : docs) {
        json j;
        j["doc_id"] = d.doc_id;
        j["seed"] = d.seed;
        j["schema_name"] = d.doc_id.substr(0, d.doc_id.rfind('-'));
        j["grid"] = d.rows;
        j["fields"] = json::array();
        for (const auto& f : d.fields) {
            json fj;
            fj["key"] = f.key;
            if (f.present()) {
                fj["value"] = *f.value;
                fj["region"] = {f.row, f.col_start, f.col_end};
            } else {
                fj["value"] = nullptr;
            }
            j["fields"].push_back(fj);
        }
        out << j.dump() << "\n";
    }
}

std::vector<DocumentGrid> read_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open dataset: " + path);
    std::vector<DocumentGrid> docs;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
            DocumentGrid d;
            d.doc_id = j.at("doc_id").get<std::string>();
            d.seed = j.at("seed").get<uint64_t>();
            d.rows = j.at("grid").get<std::vector<std::string>>();
            d.height = static_cast<int>(d.rows.size());
            d.width = d.height ? static_cast<int>(d.rows[0].size()) : 0;
            for (const auto& fj : j.at("fields")) {
                KVAnnotation ann;
                ann.key = fj.at("key").get<std::string>();
                if (!fj.at("value").is_null()) {
                    ann.value = fj.at("value").get<std::string>();
                    const auto& r = fj.at("region");
                    ann.row = r.at(0).get<int>();
                    ann.col_start = r.at(1).get<int>();
                    ann.col_end = r.at(2).get<int>();
                }
                d.fields.push_back(std::move(ann));
            }
            docs.push_back(std::move(d));
        } catch (const json::exception& e) {
            throw ParseError("dataset parse error at line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return docs;
}

}  // namespace pip
