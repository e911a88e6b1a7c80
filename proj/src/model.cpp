#include "pip/model.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>

namespace pip {

void ModelConfig::validate() const {
    if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0) throw DimensionError("model dims must be positive");
    if (d_model % n_heads != 0) throw DimensionError("d_model must be divisible by n_heads");
    if (vocab_size <= 0) throw DimensionError("vocab_size must be set");
    if (max_seq_len <= 0 || max_rows <= 0 || max_cols <= 0) throw DimensionError("capacity fields must be positive");
}

std::vector<ParamSpec> param_specs(const ModelConfig& cfg) {
    const int64_t d = cfg.d_model, V = cfg.vocab_size, f = cfg.d_ff;
    std::vector<ParamSpec> specs;
    specs.push_back({"tok_emb", {V, d}});
    specs.push_back({"pos1d_emb", {cfg.max_seq_len, d}});
    specs.push_back({"row_emb", {cfg.max_rows, d}});
    specs.push_back({"col_emb", {cfg.max_cols, d}});
    specs.push_back({"seg_emb", {3, d}});
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        specs.push_back({p + "ln1.g", {d}});
        specs.push_back({p + "ln1.b", {d}});
        specs.push_back({p + "attn.wq", {d, d}});
        specs.push_back({p + "attn.bq", {d}});
        specs.push_back({p + "attn.wk", {d, d}});
        specs.push_back({p + "attn.bk", {d}});
        specs.push_back({p + "attn.wv", {d, d}});
        specs.push_back({p + "attn.bv", {d}});
        specs.push_back({p + "attn.wo", {d, d}});
        specs.push_back({p + "attn.bo", {d}});
        specs.push_back({p + "ln2.g", {d}});
        specs.push_back({p + "ln2.b", {d}});
        specs.push_back({p + "ff.w1", {d, f}});
        specs.push_back({p + "ff.b1", {f}});
        specs.push_back({p + "ff.w2", {f, d}});
        specs.push_back({p + "ff.b2", {d}});
    }
    specs.push_back({"lnf.g", {d}});
    specs.push_back({"lnf.b", {d}});
    specs.push_back({"out.w", {d, V}});
    specs.push_back({"out.b", {V}});
    return specs;
}

int64_t param_count(const ModelConfig& cfg) {
    int64_t n = 0;
    for (const auto& s : param_specs(cfg)) {
        int64_t p = 1;
        for (int64_t dd : s.shape) p *= dd;
        n += p;
    }
    return n;
}

namespace {

// deterministic standard normal (Box-Muller over the raw engine)
class Gaussian {
  public:
    explicit Gaussian(uint64_t seed) : rng_(seed) {}
    double next() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = (static_cast<double>(rng_.next() >> 11) + 1.0) * (1.0 / 9007199254740993.0);
        const double u2 = static_cast<double>(rng_.next() >> 11) * (1.0 / 9007199254740992.0);
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * M_PI * u2);
        has_spare_ = true;
        return r * std::cos(2.0 * M_PI * u2);
    }

  private:
    Rng rng_;
    double spare_ = 0;
    bool has_spare_ = false;
};

bool is_gain(const std::string& name) { return name.size() > 2 && name.substr(name.size() - 2) == ".g"; }
bool is_bias(const std::string& name) {
    const auto n = name.size();
    return (n > 2 && name.substr(n - 2) == ".b") || name.find(".b1") != std::string::npos ||
           name.find(".b2") != std::string::npos || name.find(".bq") != std::string::npos ||
           name.find(".bk") != std::string::npos || name.find(".bv") != std::string::npos ||
           name.find(".bo") != std::string::npos;
}

}  // namespace

template <typename T>
ModelT<T> ModelT<T>::random_init(const ModelConfig& cfg) {
    cfg.validate();
    ModelT<T> m;
    m.config = cfg;
    Gaussian g(cfg.rng_seed * 0x9E3779B97F4A7C15ULL + 7);
    for (const auto& spec : param_specs(cfg)) {
        Tensor<T> t(spec.shape);
        if (is_gain(spec.name)) {
            std::fill(t.data.begin(), t.data.end(), T(1));
        } else if (is_bias(spec.name)) {
            // zeros
        } else {
            for (T& v : t.data) v = static_cast<T>(g.next() * 0.02);
        }
        m.params.emplace_back(spec.name, std::move(t));
    }
    return m;
}

template <typename T>
const Tensor<T>& ModelT<T>::param(const std::string& name) const {
    for (const auto& [n, t] : params)
        if (n == name) return t;
    throw DimensionError("no such parameter: " + name);
}

template <typename T>
Tensor<T>& ModelT<T>::param(const std::string& name) {
    for (auto& [n, t] : params)
        if (n == name) return t;
    throw DimensionError("no such parameter: " + name);
}

template <typename T>
int64_t ModelT<T>::total_params() const {
    int64_t n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
}

template struct ModelT<float>;
template struct ModelT<double>;

// ---- shared input validation / id preparation ----

namespace {

struct EmbedIds {
    std::vector<int32_t> tok, seg, row, col, idx;
    std::vector<uint8_t> is_doc;
};

EmbedIds prepare_ids(const ModelConfig& cfg, const TokenSequence& seq) {
    const int64_t T = static_cast<int64_t>(seq.size());
    if (T > cfg.max_seq_len)
        throw CapacityError("sequence length " + std::to_string(T) + " exceeds max_seq_len " +
                            std::to_string(cfg.max_seq_len));
    EmbedIds e;
    e.tok.resize(T);
    e.seg.resize(T);
    e.row.assign(T, 0);
    e.col.assign(T, 0);
    e.idx.assign(T, 0);
    e.is_doc.resize(T);
    for (int64_t i = 0; i < T; ++i) {
        const int32_t id = seq.ids[i];
        if (id < 0 || id >= cfg.vocab_size) throw VocabError("token id out of vocab range: " + std::to_string(id));
        e.tok[i] = id;
        e.seg[i] = static_cast<int32_t>(seq.segment[i]);
        const bool doc = seq.segment[i] == Segment::DOC;
        e.is_doc[i] = doc;
        if (doc) {
            if (seq.pos[i].row < 0 || seq.pos[i].row >= cfg.max_rows || seq.pos[i].col < 0 ||
                seq.pos[i].col >= cfg.max_cols)
                throw CapacityError("2D position out of range for DOC token");
            e.row[i] = seq.pos[i].row;
            e.col[i] = seq.pos[i].col;
        } else {
            if (seq.pos[i].index < 0 || seq.pos[i].index >= cfg.max_seq_len)
                throw CapacityError("1D position out of range for text token");
            e.idx[i] = seq.pos[i].index;
        }
    }
    return e;
}

}  // namespace

// ---- differentiable forward ----

template <typename T>
typename Tape<T>::Id tape_forward(Tape<T>& tape, const ModelConfig& cfg,
                                  const std::vector<typename Tape<T>::Id>& param_ids, const TokenSequence& seq) {
    using Id = typename Tape<T>::Id;
    const auto specs = param_specs(cfg);
    std::map<std::string, Id> P;
    for (size_t i = 0; i < specs.size(); ++i) P[specs[i].name] = param_ids[i];

    const EmbedIds e = prepare_ids(cfg, seq);
    const int64_t T_ = static_cast<int64_t>(seq.size());
    const int64_t d = cfg.d_model;

    // DOC tokens take row+col embeddings, text tokens the 1D position table;
    // the complementary gathers are zeroed by constant 0/1 masks
    Tensor<T> doc_mask({T_, d}), text_mask({T_, d});
    for (int64_t i = 0; i < T_; ++i)
        for (int64_t c = 0; c < d; ++c) {
            doc_mask.data[i * d + c] = e.is_doc[i] ? T(1) : T(0);
            text_mask.data[i * d + c] = e.is_doc[i] ? T(0) : T(1);
        }
    Id doc_m = tape.input(std::move(doc_mask), false);
    Id text_m = tape.input(std::move(text_mask), false);

    Id x = tape.add(tape.embed_rows(P["tok_emb"], e.tok), tape.embed_rows(P["seg_emb"], e.seg));
    x = tape.add(x, tape.mul(tape.embed_rows(P["row_emb"], e.row), doc_m));
    x = tape.add(x, tape.mul(tape.embed_rows(P["col_emb"], e.col), doc_m));
    x = tape.add(x, tape.mul(tape.embed_rows(P["pos1d_emb"], e.idx), text_m));

    std::vector<uint8_t> causal;
    const bool is_causal = cfg.attention_mode == AttentionMode::CAUSAL;
    if (is_causal) {
        causal.assign(static_cast<size_t>(T_ * T_), 0);
        for (int64_t q = 0; q < T_; ++q)
            for (int64_t k = 0; k <= q; ++k) causal[q * T_ + k] = 1;
    }

    const int64_t dh = d / cfg.n_heads;
    const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        Id h = tape.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"]);
        Id Q = tape.add_bias(tape.matmul(h, P[p + "attn.wq"]), P[p + "attn.bq"]);
        Id K = tape.add_bias(tape.matmul(h, P[p + "attn.wk"]), P[p + "attn.bk"]);
        Id V = tape.add_bias(tape.matmul(h, P[p + "attn.wv"]), P[p + "attn.bv"]);
        std::vector<Id> heads;
        for (int hd = 0; hd < cfg.n_heads; ++hd) {
            Id qh = tape.slice_cols(Q, hd * dh, (hd + 1) * dh);
            Id kh = tape.slice_cols(K, hd * dh, (hd + 1) * dh);
            Id vh = tape.slice_cols(V, hd * dh, (hd + 1) * dh);
            Id scores = tape.scale(tape.matmul_nt(qh, kh), inv_sqrt_dh);
            Id probs = tape.masked_softmax_rows(scores, is_causal ? &causal : nullptr);
            heads.push_back(tape.matmul(probs, vh));
        }
        Id ctx = tape.concat_cols(heads);
        Id attn_out = tape.add_bias(tape.matmul(ctx, P[p + "attn.wo"]), P[p + "attn.bo"]);
        x = tape.add(x, attn_out);
        Id h2 = tape.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"]);
        Id ff = tape.gelu(tape.add_bias(tape.matmul(h2, P[p + "ff.w1"]), P[p + "ff.b1"]));
        ff = tape.add_bias(tape.matmul(ff, P[p + "ff.w2"]), P[p + "ff.b2"]);
        x = tape.add(x, ff);
    }
    Id xf = tape.layer_norm(x, P["lnf.g"], P["lnf.b"]);
    return tape.add_bias(tape.matmul(xf, P["out.w"]), P["out.b"]);
}

template Tape<float>::Id tape_forward<float>(Tape<float>&, const ModelConfig&, const std::vector<Tape<float>::Id>&,
                                             const TokenSequence&);
template Tape<double>::Id tape_forward<double>(Tape<double>&, const ModelConfig&,
                                               const std::vector<Tape<double>::Id>&, const TokenSequence&);

// ---- plain inference path ----

namespace {

using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using CMatMap = Eigen::Map<const Mat>;
using VecMap = Eigen::Map<Eigen::Matrix<float, 1, Eigen::Dynamic, Eigen::RowMajor>>;

CMatMap as_mat(const Tensor<float>& t) { return CMatMap(t.data.data(), t.rows(), t.cols()); }

void layer_norm_rows(Mat& x, const Tensor<float>& g, const Tensor<float>& b) {
    const int64_t n = x.cols();
    for (int64_t r = 0; r < x.rows(); ++r) {
        float* row = x.data() + r * n;
        float mean = 0;
        for (int64_t c = 0; c < n; ++c) mean += row[c];
        mean /= static_cast<float>(n);
        float var = 0;
        for (int64_t c = 0; c < n; ++c) var += (row[c] - mean) * (row[c] - mean);
        var /= static_cast<float>(n);
        const float is = 1.0f / std::sqrt(var + 1e-5f);
        for (int64_t c = 0; c < n; ++c) row[c] = (row[c] - mean) * is * g.data[c] + b.data[c];
    }
}

void gelu_inplace(Mat& x) {
    static const float k = std::sqrt(2.0f / static_cast<float>(M_PI));
    for (int64_t i = 0; i < x.size(); ++i) {
        const float v = x.data()[i];
        x.data()[i] = 0.5f * v * (1.0f + std::tanh(k * (v + 0.044715f * v * v * v)));
    }
}

Mat embed(const Model& m, const EmbedIds& e) {
    const int64_t T = static_cast<int64_t>(e.tok.size()), d = m.config.d_model;
    const auto& tok = m.param("tok_emb");
    const auto& seg = m.param("seg_emb");
    const auto& row = m.param("row_emb");
    const auto& col = m.param("col_emb");
    const auto& pos = m.param("pos1d_emb");
    Mat x(T, d);
    for (int64_t i = 0; i < T; ++i) {
        const float* t = &tok.data[e.tok[i] * d];
        const float* s = &seg.data[e.seg[i] * d];
        if (e.is_doc[i]) {
            const float* r = &row.data[e.row[i] * d];
            const float* c = &col.data[e.col[i] * d];
            for (int64_t j = 0; j < d; ++j) x(i, j) = t[j] + s[j] + r[j] + c[j];
        } else {
            const float* p = &pos.data[e.idx[i] * d];
            for (int64_t j = 0; j < d; ++j) x(i, j) = t[j] + s[j] + p[j];
        }
    }
    return x;
}

void softmax_rows_masked(Mat& scores, bool causal) {
    const int64_t T = scores.rows(), n = scores.cols();
    for (int64_t r = 0; r < T; ++r) {
        float* row = scores.data() + r * n;
        const int64_t limit = causal ? std::min<int64_t>(r + 1, n) : n;
        float mx = row[0];
        for (int64_t c = 1; c < limit; ++c) mx = std::max(mx, row[c]);
        float sum = 0;
        for (int64_t c = 0; c < limit; ++c) {
            row[c] = std::exp(row[c] - mx);
            sum += row[c];
        }
        for (int64_t c = 0; c < limit; ++c) row[c] /= sum;
        for (int64_t c = limit; c < n; ++c) row[c] = 0.0f;
    }
}

}  // namespace

KVCache KVCache::make(const ModelConfig& cfg) {
    KVCache c;
    c.capacity = cfg.max_seq_len;
    for (int l = 0; l < cfg.n_layers; ++l) {
        c.k.emplace_back(std::vector<int64_t>{cfg.max_seq_len, cfg.d_model});
        c.v.emplace_back(std::vector<int64_t>{cfg.max_seq_len, cfg.d_model});
    }
    return c;
}

Tensor<float> infer_forward(const Model& m, const TokenSequence& seq, AttentionRecord* attn, KVCache* cache) {
    const ModelConfig& cfg = m.config;
    const bool causal = cfg.attention_mode == AttentionMode::CAUSAL;
    if (cache && !causal) throw ModeError("KV cache is only valid in CAUSAL mode");
    const EmbedIds e = prepare_ids(cfg, seq);
    const int64_t T = static_cast<int64_t>(seq.size()), d = cfg.d_model;
    const int64_t dh = d / cfg.n_heads;
    const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(dh));

    if (attn) {
        attn->n_layers = cfg.n_layers;
        attn->n_heads = cfg.n_heads;
        attn->seq_len = T;
        attn->probs.clear();
    }

    Mat x = embed(m, e);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        Mat h = x;
        layer_norm_rows(h, m.param(p + "ln1.g"), m.param(p + "ln1.b"));
        Mat Q = h * as_mat(m.param(p + "attn.wq"));
        Mat K = h * as_mat(m.param(p + "attn.wk"));
        Mat V = h * as_mat(m.param(p + "attn.wv"));
        Q.rowwise() += VecMap(const_cast<float*>(m.param(p + "attn.bq").data.data()), d);
        K.rowwise() += VecMap(const_cast<float*>(m.param(p + "attn.bk").data.data()), d);
        V.rowwise() += VecMap(const_cast<float*>(m.param(p + "attn.bv").data.data()), d);
        if (cache) {
            MatMap(cache->k[l].data.data(), cache->k[l].rows(), d).topRows(T) = K;
            MatMap(cache->v[l].data.data(), cache->v[l].rows(), d).topRows(T) = V;
        }
        Mat ctx(T, d);
        for (int hd = 0; hd < cfg.n_heads; ++hd) {
            auto qh = Q.middleCols(hd * dh, dh);
            auto kh = K.middleCols(hd * dh, dh);
            auto vh = V.middleCols(hd * dh, dh);
            Mat scores = qh * kh.transpose() * inv_sqrt_dh;
            softmax_rows_masked(scores, causal);
            if (attn) {
                Tensor<float> rec({T, T});
                std::memcpy(rec.data.data(), scores.data(), sizeof(float) * T * T);
                attn->probs.push_back(std::move(rec));
            }
            ctx.middleCols(hd * dh, dh) = scores * vh;
        }
        Mat attn_out = ctx * as_mat(m.param(p + "attn.wo"));
        attn_out.rowwise() += VecMap(const_cast<float*>(m.param(p + "attn.bo").data.data()), d);
        x += attn_out;
        Mat h2 = x;
        layer_norm_rows(h2, m.param(p + "ln2.g"), m.param(p + "ln2.b"));
        Mat ff = h2 * as_mat(m.param(p + "ff.w1"));
        ff.rowwise() += VecMap(const_cast<float*>(m.param(p + "ff.b1").data.data()), cfg.d_ff);
        gelu_inplace(ff);
        Mat ff2 = ff * as_mat(m.param(p + "ff.w2"));
        ff2.rowwise() += VecMap(const_cast<float*>(m.param(p + "ff.b2").data.data()), d);
        x += ff2;
    }
    layer_norm_rows(x, m.param("lnf.g"), m.param("lnf.b"));
    Mat logits = x * as_mat(m.param("out.w"));
    logits.rowwise() += VecMap(const_cast<float*>(m.param("out.b").data.data()), cfg.vocab_size);
    if (cache) cache->length = T;

    Tensor<float> out({T, cfg.vocab_size});
    std::memcpy(out.data.data(), logits.data(), sizeof(float) * T * cfg.vocab_size);
    return out;
}

std::vector<float> decode_step(const Model& m, KVCache& cache, int32_t token_id, TokenPos pos, Segment seg) {
    const ModelConfig& cfg = m.config;
    if (cfg.attention_mode != AttentionMode::CAUSAL) throw ModeError("decode_step requires CAUSAL mode");
    if (cache.length + 1 > cache.capacity)
        throw CapacityError("KV cache full at length " + std::to_string(cache.length));

    TokenSequence one;
    one.push(token_id, pos, seg);
    const EmbedIds e = prepare_ids(cfg, one);
    const int64_t d = cfg.d_model, dh = d / cfg.n_heads;
    const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(dh));
    const int64_t len = cache.length;

    Mat x = embed(m, e);  // [1, d]
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        Mat h = x;
        layer_norm_rows(h, m.param(p + "ln1.g"), m.param(p + "ln1.b"));
        Mat q = h * as_mat(m.param(p + "attn.wq"));
        Mat k = h * as_mat(m.param(p + "attn.wk"));
        Mat v = h * as_mat(m.param(p + "attn.wv"));
        q.rowwise() += VecMap(const_cast<float*>(m.param(p + "attn.bq").data.data()), d);
        k.rowwise() += VecMap(const_cast<float*>(m.param(p + "attn.bk").data.data()), d);
        v.rowwise() += VecMap(const_cast<float*>(m.param(p + "attn.bv").data.data()), d);
        MatMap Kc(cache.k[l].data.data(), cache.k[l].rows(), d);
        MatMap Vc(cache.v[l].data.data(), cache.v[l].rows(), d);
        Kc.row(len) = k.row(0);
        Vc.row(len) = v.row(0);
        Mat ctx(1, d);
        for (int hd = 0; hd < cfg.n_heads; ++hd) {
            auto kh = Kc.topRows(len + 1).middleCols(hd * dh, dh);
            auto vh = Vc.topRows(len + 1).middleCols(hd * dh, dh);
            Mat scores = q.middleCols(hd * dh, dh) * kh.transpose() * inv_sqrt_dh;
            softmax_rows_masked(scores, false);  // whole cache is the visible prefix
            ctx.middleCols(hd * dh, dh) = scores * vh;
        }
        Mat attn_out = ctx * as_mat(m.param(p + "attn.wo"));
        attn_out.rowwise() += VecMap(const_cast<float*>(m.param(p + "attn.bo").data.data()), d);
        x += attn_out;
        Mat h2 = x;
        layer_norm_rows(h2, m.param(p + "ln2.g"), m.param(p + "ln2.b"));
        Mat ff = h2 * as_mat(m.param(p + "ff.w1"));
        ff.rowwise() += VecMap(const_cast<float*>(m.param(p + "ff.b1").data.data()), cfg.d_ff);
        gelu_inplace(ff);
        Mat ff2 = ff * as_mat(m.param(p + "ff.w2"));
        ff2.rowwise() += VecMap(const_cast<float*>(m.param(p + "ff.b2").data.data()), d);
        x += ff2;
    }
    layer_norm_rows(x, m.param("lnf.g"), m.param("lnf.b"));
    Mat logits = x * as_mat(m.param("out.w"));
    logits.rowwise() += VecMap(const_cast<float*>(m.param("out.b").data.data()), cfg.vocab_size);
    cache.length = len + 1;
    return std::vector<float>(logits.data(), logits.data() + cfg.vocab_size);
}

// ---- checkpointing ----

namespace {

constexpr char kMagic[4] = {'P', 'I', 'P', 'K'};
constexpr uint32_t kVersion = 1;

class Hashed {
  public:
    explicit Hashed(std::ostream& out) : out_(out) {}
    void write(const void* p, size_t n) {
        const auto* b = static_cast<const uint8_t*>(p);
        for (size_t i = 0; i < n; ++i) {
            hash_ ^= b[i];
            hash_ *= 0x100000001B3ULL;
        }
        out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    }
    void u32(uint32_t v) { write(&v, 4); }
    void str(const std::string& s) {
        u32(static_cast<uint32_t>(s.size()));
        write(s.data(), s.size());
    }
    uint64_t hash() const { return hash_; }

  private:
    std::ostream& out_;
    uint64_t hash_ = 0xCBF29CE484222325ULL;
};

class Reader {
  public:
    explicit Reader(std::istream& in) : in_(in) {}
    void read(void* p, size_t n) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<size_t>(in_.gcount()) != n) throw CheckpointError("checkpoint truncated");
        const auto* b = static_cast<const uint8_t*>(p);
        for (size_t i = 0; i < n; ++i) {
            hash_ ^= b[i];
            hash_ *= 0x100000001B3ULL;
        }
    }
    uint32_t u32() {
        uint32_t v;
        read(&v, 4);
        return v;
    }
    std::string str() {
        const uint32_t n = u32();
        if (n > (1u << 26)) throw CheckpointError("checkpoint string length implausible");
        std::string s(n, '\0');
        read(s.data(), n);
        return s;
    }
    uint64_t hash() const { return hash_; }

  private:
    std::istream& in_;
    uint64_t hash_ = 0xCBF29CE484222325ULL;
};

std::string config_block(const Model& m, const std::string& vocab_json, const std::string& schema_json,
                         const OptimizerState* opt) {
    std::ostringstream os;
    const ModelConfig& c = m.config;
    os << "d_model=" << c.d_model << "\nn_layers=" << c.n_layers << "\nn_heads=" << c.n_heads
       << "\nd_ff=" << c.d_ff << "\nmax_seq_len=" << c.max_seq_len << "\nmax_rows=" << c.max_rows
       << "\nmax_cols=" << c.max_cols << "\nvocab_size=" << c.vocab_size
       << "\nattention_mode=" << to_string(c.attention_mode) << "\ndropout=" << c.dropout
       << "\nrng_seed=" << c.rng_seed << "\n";
    if (!vocab_json.empty()) os << "vocab=" << vocab_json << "\n";
    if (!schema_json.empty()) os << "schema=" << schema_json << "\n";
    if (opt) {
        os << "opt_step=" << opt->step_count << "\nopt_lr=" << opt->config.learning_rate
           << "\nopt_beta1=" << opt->config.beta1 << "\nopt_beta2=" << opt->config.beta2
           << "\nopt_eps=" << opt->config.epsilon << "\n";
    }
    return os.str();
}

void write_tensor(Hashed& w, const std::string& name, const Tensor<float>& t) {
    w.str(name);
    w.u32(static_cast<uint32_t>(t.shape.size()));
    for (int64_t d : t.shape) w.u32(static_cast<uint32_t>(d));
    w.write(t.data.data(), t.data.size() * sizeof(float));
}

}  // namespace

void checkpoint_save(const Model& m, const std::string& vocab_json, const std::string& schema_json,
                     const std::string& path, const OptimizerState* opt) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("cannot open checkpoint for writing: " + path);
    Hashed w(out);
    w.write(kMagic, 4);
    w.u32(kVersion);
    w.str(config_block(m, vocab_json, schema_json, opt));
    uint32_t n_tensors = static_cast<uint32_t>(m.params.size());
    if (opt) n_tensors += 2 * static_cast<uint32_t>(m.params.size());
    w.u32(n_tensors);
    for (const auto& [name, t] : m.params) write_tensor(w, name, t);
    if (opt) {
        for (size_t i = 0; i < m.params.size(); ++i) {
            const auto& [name, t] = m.params[i];
            Tensor<float> mm(t.shape), vv(t.shape);
            if (!opt->moments[i].m.empty()) {
                mm.data = opt->moments[i].m;
                vv.data = opt->moments[i].v;
            }
            write_tensor(w, "opt.m." + name, mm);
            write_tensor(w, "opt.v." + name, vv);
        }
    }
    const uint64_t h = w.hash();
    out.write(reinterpret_cast<const char*>(&h), 8);
    if (!out) throw CheckpointError("write failed: " + path);
}

Checkpoint checkpoint_load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint: " + path);
    Reader r(in);
    char magic[4];
    r.read(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw CheckpointError("bad checkpoint magic");
    const uint32_t version = r.u32();
    if (version != kVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    const std::string cfg_text = r.str();

    Checkpoint ck;
    std::map<std::string, std::string> kv;
    std::istringstream cs(cfg_text);
    std::string line;
    while (std::getline(cs, line)) {
        const auto eq = line.find('=');
        if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    ModelConfig& c = ck.model.config;
    try {
        c.d_model = std::stoi(kv.at("d_model"));
        c.n_layers = std::stoi(kv.at("n_layers"));
        c.n_heads = std::stoi(kv.at("n_heads"));
        c.d_ff = std::stoi(kv.at("d_ff"));
        c.max_seq_len = std::stoi(kv.at("max_seq_len"));
        c.max_rows = std::stoi(kv.at("max_rows"));
        c.max_cols = std::stoi(kv.at("max_cols"));
        c.vocab_size = std::stoi(kv.at("vocab_size"));
        c.attention_mode = kv.at("attention_mode") == "CAUSAL" ? AttentionMode::CAUSAL : AttentionMode::BIDIRECTIONAL;
        c.dropout = std::stof(kv.at("dropout"));
        c.rng_seed = std::stoull(kv.at("rng_seed"));
    } catch (const std::out_of_range&) {
        throw CheckpointError("checkpoint config block missing required field");
    }
    if (kv.count("vocab")) ck.vocab_json = kv["vocab"];
    if (kv.count("schema")) ck.schema_json = kv["schema"];
    const bool has_opt = kv.count("opt_step") > 0;

    const auto specs = param_specs(c);
    const uint32_t n_tensors = r.u32();
    if (n_tensors != specs.size() * (has_opt ? 3u : 1u))
        throw CheckpointError("config mismatch: tensor count " + std::to_string(n_tensors) + " but config implies " +
                              std::to_string(specs.size() * (has_opt ? 3u : 1u)));

    std::map<std::string, Tensor<float>> loaded;
    for (uint32_t i = 0; i < n_tensors; ++i) {
        const std::string name = r.str();
        const uint32_t rank = r.u32();
        if (rank > 4) throw CheckpointError("tensor rank implausible: " + name);
        std::vector<int64_t> shape(rank);
        int64_t n = 1;
        for (uint32_t dd = 0; dd < rank; ++dd) {
            shape[dd] = r.u32();
            n *= shape[dd];
        }
        Tensor<float> t(shape);
        r.read(t.data.data(), static_cast<size_t>(n) * sizeof(float));
        loaded[name] = std::move(t);
    }
    const uint64_t expect = r.hash();
    uint64_t stored;
    in.read(reinterpret_cast<char*>(&stored), 8);
    if (in.gcount() != 8) throw CheckpointError("checkpoint truncated (missing checksum)");
    if (stored != expect) throw CheckpointError("checkpoint checksum mismatch");

    for (const auto& s : specs) {
        auto it = loaded.find(s.name);
        if (it == loaded.end()) throw CheckpointError("config mismatch: missing tensor " + s.name);
        if (it->second.shape != s.shape)
            throw CheckpointError("config mismatch: tensor " + s.name + " has shape " + shape_str(it->second.shape) +
                                  ", config implies " + shape_str(s.shape));
        ck.model.params.emplace_back(s.name, std::move(it->second));
    }
    if (has_opt) {
        OptimizerState opt;
        opt.step_count = std::stoll(kv.at("opt_step"));
        opt.config.learning_rate = std::stof(kv.at("opt_lr"));
        opt.config.beta1 = std::stof(kv.at("opt_beta1"));
        opt.config.beta2 = std::stof(kv.at("opt_beta2"));
        opt.config.epsilon = std::stof(kv.at("opt_eps"));
        for (const auto& s : specs) {
            AdamMoments<float> mom;
            mom.m = loaded.at("opt.m." + s.name).data;
            mom.v = loaded.at("opt.v." + s.name).data;
            opt.moments.push_back(std::move(mom));
        }
        ck.optimizer = std::move(opt);
    }
    return ck;
}

}  // namespace pip
