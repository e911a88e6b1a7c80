#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace pip {

struct GenerationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct VocabError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct SchemaError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Deterministic RNG wrapper. mt19937_64 output is fully specified by the
// standard, and we avoid std distributions so generated corpora are
// byte-identical across platforms.
class Rng {
  public:
    explicit Rng(uint64_t seed) : eng_(seed) {}
    uint64_t next() { return eng_(); }
    int64_t below(int64_t n) { return static_cast<int64_t>(next() % static_cast<uint64_t>(n)); }
    double uniform() { return static_cast<double>(next() >> 11) * (1.0 / 9007199254740992.0); }

  private:
    std::mt19937_64 eng_;
};

// Value patterns: '#' draws a digit, '@' draws an uppercase letter, anything
// else is a literal.
struct FieldSpec {
    std::string name;
    std::string pattern;
};

struct Schema {
    std::string name;
    std::vector<FieldSpec> keys;
    int l_max = 8;
    double p_present = 0.85;
    int grid_width = 32;
    int grid_height = 16;
    int n_distractors = 3;

    void validate() const;
};

Schema receipt_schema();
// n_keys generic fields for benchmark sweeps; grid sized to fit.
Schema wide_schema(int n_keys);
Schema load_schema(const std::string& path);
void save_schema(const Schema& s, const std::string& path);

struct KVAnnotation {
    std::string key;
    std::optional<std::string> value;  // nullopt = ABSENT
    int row = -1, col_start = -1, col_end = -1;  // value cells, col_end exclusive

    bool present() const { return value.has_value(); }
};

struct DocumentGrid {
    int width = 0, height = 0;
    std::vector<std::string> rows;  // height strings of exactly width chars, ' ' = empty
    std::vector<KVAnnotation> fields;
    std::string doc_id;
    uint64_t seed = 0;

    char cell(int r, int c) const { return rows[r][c]; }
    int non_empty_cells() const;
};

DocumentGrid generate_document(uint64_t seed, const Schema& schema);

// ---- tokens ----

enum class Segment : uint8_t { DOC = 0, PROMPT = 1, ANSWER = 2 };

struct TokenPos {
    int16_t row = -1, col = -1;  // DOC tokens
    int32_t index = -1;          // text tokens
};

struct TokenSequence {
    std::vector<int32_t> ids;
    std::vector<TokenPos> pos;
    std::vector<Segment> segment;
    std::vector<uint8_t> loss_mask;

    size_t size() const { return ids.size(); }
    void push(int32_t id, TokenPos p, Segment s, bool loss = false) {
        ids.push_back(id);
        pos.push_back(p);
        segment.push_back(s);
        loss_mask.push_back(loss ? 1 : 0);
    }
    void append(const TokenSequence& other);
};

class Vocabulary {
  public:
    static Vocabulary build(const Schema& schema);

    int32_t pad() const { return pad_; }
    int32_t mask() const { return mask_; }
    int32_t sep() const { return sep_; }
    int32_t bos() const { return bos_; }
    int32_t eos() const { return eos_; }
    int32_t unknown() const { return unknown_; }

    int32_t key_id(const std::string& key) const;
    int32_t char_id(char c) const;
    bool has_char(char c) const;
    bool is_char(int32_t id) const;
    bool is_key(int32_t id) const;
    char id_to_char(int32_t id) const;
    const std::string& token_name(int32_t id) const;
    int32_t size() const { return static_cast<int32_t>(names_.size()); }

    std::string to_json() const;
    static Vocabulary from_json(const std::string& text);

  private:
    std::vector<std::string> names_;
    std::map<std::string, int32_t> ids_;
    std::map<char, int32_t> chars_;
    int32_t pad_ = 0, mask_ = 0, sep_ = 0, bos_ = 0, eos_ = 0, unknown_ = 0;
    int32_t first_char_ = 0;
    void index();
};

// One token per non-empty cell, row-major, 2D positions; loss_mask all false.
TokenSequence tokenize_document(const DocumentGrid& doc, const Vocabulary& vocab);

// Exactly max(1, round(lambda*length)) true positions, uniform without
// replacement, deterministic per seed.
std::vector<uint8_t> sample_mask_positions(int64_t length, double lambda, uint64_t seed);

// input plus aligned per-position targets (meaningful where loss_mask is set)
struct TrainExample {
    TokenSequence input;
    std::vector<int32_t> targets;
};

// Masks round(lambda * caption length) caption tokens; loss is on caption
// positions only. With mask_aligned_doc=true the document cell that produced
// each masked caption token is masked as well, so the target cannot be read
// off the grid directly and must come from surrounding structure.
TrainExample make_pretrain_example(const DocumentGrid& doc, const Vocabulary& vocab, double lambda,
                                   uint64_t seed, bool mask_aligned_doc = false);
TrainExample make_sft_example(const DocumentGrid& doc, const Vocabulary& vocab, const Schema& schema);
// AR serialization: [BOS] then per key "[KEY:k] value [SEP]" ("unknown" when
// absent) then [EOS]; loss on value/[SEP]/[EOS] predictions only.
TrainExample make_ar_example(const DocumentGrid& doc, const Vocabulary& vocab, const Schema& schema);

void write_dataset(const std::string& path, const std::vector<DocumentGrid>& docs);
std::vector<DocumentGrid> read_dataset(const std::string& path);

}  // namespace pip
