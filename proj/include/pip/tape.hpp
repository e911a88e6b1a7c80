#pragma once

#define EIGEN_DONT_PARALLELIZE 1
#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "pip/tensor.hpp"

namespace pip {

// Reverse-mode autodiff tape over dense tensors. Nodes are created in forward
// order; backward() walks them in reverse. With recording disabled the same
// ops run as plain inference (no closures, no grad buffers).
template <typename T>
class Tape {
  public:
    using Id = int32_t;
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using MatMap = Eigen::Map<Mat>;
    using CMatMap = Eigen::Map<const Mat>;

    explicit Tape(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }

    Id input(Tensor<T> value, bool requires_grad) {
        return push(std::move(value), requires_grad && recording_, nullptr);
    }

    const Tensor<T>& value(Id id) const { return nodes_[id].value; }
    const Tensor<T>& grad(Id id) const { return nodes_[id].grad; }

    // ---- ops ----

    // [m,k] x [k,n] -> [m,n]
    Id matmul(Id a, Id b) {
        const Tensor<T>& A = nodes_[a].value;
        const Tensor<T>& B = nodes_[b].value;
        if (A.cols() != B.rows())
            throw DimensionError("matmul: inner dims " + shape_str(A.shape) + " x " + shape_str(B.shape));
        Tensor<T> out({A.rows(), B.cols()});
        mat(out) = cmat(A) * cmat(B);
        return push(std::move(out), needs_grad({a, b}), [this, a, b](Id o) {
            const Tensor<T>& go = nodes_[o].grad;
            if (wants(a)) mat(nodes_[a].grad) += cmat(go) * cmat(nodes_[b].value).transpose();
            if (wants(b)) mat(nodes_[b].grad) += cmat(nodes_[a].value).transpose() * cmat(go);
        });
    }

    // a * b^T, avoids materializing transposes for attention scores
    Id matmul_nt(Id a, Id b) {
        const Tensor<T>& A = nodes_[a].value;
        const Tensor<T>& B = nodes_[b].value;
        if (A.cols() != B.cols())
            throw DimensionError("matmul_nt: inner dims " + shape_str(A.shape) + " x " + shape_str(B.shape));
        Tensor<T> out({A.rows(), B.rows()});
        mat(out) = cmat(A) * cmat(B).transpose();
        return push(std::move(out), needs_grad({a, b}), [this, a, b](Id o) {
            const Tensor<T>& go = nodes_[o].grad;
            if (wants(a)) mat(nodes_[a].grad) += cmat(go) * cmat(nodes_[b].value);
            if (wants(b)) mat(nodes_[b].grad) += cmat(go).transpose() * cmat(nodes_[a].value);
        });
    }

    Id add(Id a, Id b) {
        const Tensor<T>& A = nodes_[a].value;
        const Tensor<T>& B = nodes_[b].value;
        if (!same_shape(A, B)) throw DimensionError("add: shape mismatch");
        Tensor<T> out = A;
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += B.data[i];
        return push(std::move(out), needs_grad({a, b}), [this, a, b](Id o) {
            const Tensor<T>& go = nodes_[o].grad;
            if (wants(a))
                for (size_t i = 0; i < go.data.size(); ++i) nodes_[a].grad.data[i] += go.data[i];
            if (wants(b))
                for (size_t i = 0; i < go.data.size(); ++i) nodes_[b].grad.data[i] += go.data[i];
        });
    }

    // mat[m,n] + row-vector bias[n]
    Id add_bias(Id a, Id bias) {
        const Tensor<T>& A = nodes_[a].value;
        const Tensor<T>& B = nodes_[bias].value;
        if (B.numel() != A.cols()) throw DimensionError("add_bias: bias length != cols");
        Tensor<T> out = A;
        const int64_t n = A.cols();
        for (int64_t r = 0; r < A.rows(); ++r)
            for (int64_t c = 0; c < n; ++c) out.data[r * n + c] += B.data[c];
        return push(std::move(out), needs_grad({a, bias}), [this, a, bias, n](Id o) {
            const Tensor<T>& go = nodes_[o].grad;
            if (wants(a))
                for (size_t i = 0; i < go.data.size(); ++i) nodes_[a].grad.data[i] += go.data[i];
            if (wants(bias)) {
                const int64_t rows = go.rows();
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t c = 0; c < n; ++c) nodes_[bias].grad.data[c] += go.data[r * n + c];
            }
        });
    }

    Id scale(Id a, T s) {
        Tensor<T> out = nodes_[a].value;
        for (T& v : out.data) v *= s;
        return push(std::move(out), needs_grad({a}), [this, a, s](Id o) {
            const Tensor<T>& go = nodes_[o].grad;
            for (size_t i = 0; i < go.data.size(); ++i) nodes_[a].grad.data[i] += s * go.data[i];
        });
    }

    Id gelu(Id a) {
        static const T k = static_cast<T>(std::sqrt(2.0 / M_PI));
        Tensor<T> out = nodes_[a].value;
        for (T& v : out.data) {
            T x = v;
            v = T(0.5) * x * (T(1) + std::tanh(k * (x + T(0.044715) * x * x * x)));
        }
        return push(std::move(out), needs_grad({a}), [this, a](Id o) {
            const Tensor<T>& go = nodes_[o].grad;
            const Tensor<T>& x = nodes_[a].value;
            for (size_t i = 0; i < go.data.size(); ++i) {
                T xi = x.data[i];
                T u = k * (xi + T(0.044715) * xi * xi * xi);
                T th = std::tanh(u);
                T sech2 = T(1) - th * th;
                T du = k * (T(1) + T(3) * T(0.044715) * xi * xi);
                T dgelu = T(0.5) * (T(1) + th) + T(0.5) * xi * sech2 * du;
                nodes_[a].grad.data[i] += go.data[i] * dgelu;
            }
        });
    }

    // per-row layer norm with learned gain/bias vectors of length cols
    Id layer_norm(Id a, Id gain, Id bias, T eps = T(1e-5)) {
        const Tensor<T>& X = nodes_[a].value;
        const int64_t n = X.cols();
        if (nodes_[gain].value.numel() != n || nodes_[bias].value.numel() != n)
            throw DimensionError("layer_norm: gain/bias length != cols");
        Tensor<T> out({X.rows(), n});
        Tensor<T> xhat({X.rows(), n});
        std::vector<T> inv_std(static_cast<size_t>(X.rows()));
        const T* g = nodes_[gain].value.data.data();
        const T* b = nodes_[bias].value.data.data();
        for (int64_t r = 0; r < X.rows(); ++r) {
            const T* row = &X.data[r * n];
            T mean = 0;
            for (int64_t c = 0; c < n; ++c) mean += row[c];
            mean /= static_cast<T>(n);
            T var = 0;
            for (int64_t c = 0; c < n; ++c) var += (row[c] - mean) * (row[c] - mean);
            var /= static_cast<T>(n);
            T is = T(1) / std::sqrt(var + eps);
            inv_std[r] = is;
            for (int64_t c = 0; c < n; ++c) {
                T xh = (row[c] - mean) * is;
                xhat.data[r * n + c] = xh;
                out.data[r * n + c] = xh * g[c] + b[c];
            }
        }
        return push(std::move(out), needs_grad({a, gain, bias}),
                    [this, a, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), n](Id o) {
                        const Tensor<T>& go = nodes_[o].grad;
                        const T* g = nodes_[gain].value.data.data();
                        for (int64_t r = 0; r < go.rows(); ++r) {
                            const T* gr = &go.data[r * n];
                            const T* xh = &xhat.data[r * n];
                            if (wants(gain) || wants(bias)) {
                                for (int64_t c = 0; c < n; ++c) {
                                    if (wants(gain)) nodes_[gain].grad.data[c] += gr[c] * xh[c];
                                    if (wants(bias)) nodes_[bias].grad.data[c] += gr[c];
                                }
                            }
                            if (wants(a)) {
                                T sum_dy = 0, sum_dy_xh = 0;
                                for (int64_t c = 0; c < n; ++c) {
                                    T dy = gr[c] * g[c];
                                    sum_dy += dy;
                                    sum_dy_xh += dy * xh[c];
                                }
                                T* ga = &nodes_[a].grad.data[r * n];
                                for (int64_t c = 0; c < n; ++c) {
                                    T dy = gr[c] * g[c];
                                    ga[c] += inv_std[r] *
                                             (dy - sum_dy / static_cast<T>(n) - xh[c] * sum_dy_xh / static_cast<T>(n));
                                }
                            }
                        }
                    });
    }

    // row-wise softmax; allowed[r*n+c]==0 forces probability 0 (attention mask)
    Id masked_softmax_rows(Id a, const std::vector<uint8_t>* allowed = nullptr) {
        const Tensor<T>& X = nodes_[a].value;
        const int64_t n = X.cols();
        Tensor<T> out({X.rows(), n});
        for (int64_t r = 0; r < X.rows(); ++r) {
            const T* row = &X.data[r * n];
            const uint8_t* al = allowed ? &(*allowed)[r * n] : nullptr;
            T mx = -std::numeric_limits<T>::infinity();
            for (int64_t c = 0; c < n; ++c)
                if ((!al || al[c]) && row[c] > mx) mx = row[c];
            T sum = 0;
            T* orow = &out.data[r * n];
            for (int64_t c = 0; c < n; ++c) {
                T e = (!al || al[c]) ? std::exp(row[c] - mx) : T(0);
                orow[c] = e;
                sum += e;
            }
            for (int64_t c = 0; c < n; ++c) orow[c] /= sum;
        }
        return push(std::move(out), needs_grad({a}), [this, a, n](Id o) {
            const Tensor<T>& go = nodes_[o].grad;
            const Tensor<T>& p = nodes_[o].value;
            for (int64_t r = 0; r < go.rows(); ++r) {
                const T* pr = &p.data[r * n];
                const T* gr = &go.data[r * n];
                T dot = 0;
                for (int64_t c = 0; c < n; ++c) dot += pr[c] * gr[c];
                T* ga = &nodes_[a].grad.data[r * n];
                for (int64_t c = 0; c < n; ++c) ga[c] += pr[c] * (gr[c] - dot);
            }
        });
    }

    Id slice_cols(Id a, int64_t c0, int64_t c1) {
        const Tensor<T>& X = nodes_[a].value;
        const int64_t n = X.cols(), w = c1 - c0;
        if (c0 < 0 || c1 > n || w <= 0) throw DimensionError("slice_cols: range out of bounds");
        Tensor<T> out({X.rows(), w});
        for (int64_t r = 0; r < X.rows(); ++r)
            for (int64_t c = 0; c < w; ++c) out.data[r * w + c] = X.data[r * n + c0 + c];
        return push(std::move(out), needs_grad({a}), [this, a, c0, w, n](Id o) {
            const Tensor<T>& go = nodes_[o].grad;
            for (int64_t r = 0; r < go.rows(); ++r)
                for (int64_t c = 0; c < w; ++c) nodes_[a].grad.data[r * n + c0 + c] += go.data[r * w + c];
        });
    }

    Id concat_cols(const std::vector<Id>& parts) {
        int64_t total = 0;
        const int64_t rows = nodes_[parts[0]].value.rows();
        for (Id p : parts) total += nodes_[p].value.cols();
        Tensor<T> out({rows, total});
        int64_t off = 0;
        for (Id p : parts) {
            const Tensor<T>& P = nodes_[p].value;
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t c = 0; c < P.cols(); ++c) out.data[r * total + off + c] = P.data[r * P.cols() + c];
            off += P.cols();
        }
        bool ng = false;
        for (Id p : parts) ng = ng || wants_rec(p);
        return push(std::move(out), ng, [this, parts, total](Id o) {
            const Tensor<T>& go = nodes_[o].grad;
            int64_t off = 0;
            for (Id p : parts) {
                const int64_t w = nodes_[p].value.cols();
                if (wants(p))
                    for (int64_t r = 0; r < go.rows(); ++r)
                        for (int64_t c = 0; c < w; ++c) nodes_[p].grad.data[r * w + c] += go.data[r * total + off + c];
                off += w;
            }
        });
    }

    // gathers rows of an embedding table; ids are plain data, not a node
    Id embed_rows(Id table, std::vector<int32_t> ids) {
        const Tensor<T>& Tb = nodes_[table].value;
        const int64_t n = Tb.cols();
        Tensor<T> out({static_cast<int64_t>(ids.size()), n});
        for (size_t r = 0; r < ids.size(); ++r)
            for (int64_t c = 0; c < n; ++c) out.data[r * n + c] = Tb.data[ids[r] * n + c];
        return push(std::move(out), needs_grad({table}), [this, table, ids = std::move(ids), n](Id o) {
            const Tensor<T>& go = nodes_[o].grad;
            for (size_t r = 0; r < ids.size(); ++r)
                for (int64_t c = 0; c < n; ++c) nodes_[table].grad.data[ids[r] * n + c] += go.data[r * n + c];
        });
    }

    // mean NLL over masked rows; unmasked rows contribute exactly zero
    // gradient. reweight multiplies the loss (1/lambda variant, default 1).
    Id masked_cross_entropy(Id logits, const std::vector<int32_t>& targets, const std::vector<uint8_t>& mask,
                            T reweight = T(1)) {
        const Tensor<T>& L = nodes_[logits].value;
        const int64_t V = L.cols(), Tn = L.rows();
        if (static_cast<int64_t>(targets.size()) != Tn || static_cast<int64_t>(mask.size()) != Tn)
            throw DimensionError("masked_cross_entropy: targets/mask length != rows");
        int64_t n_masked = 0;
        for (uint8_t m : mask) n_masked += m ? 1 : 0;
        if (n_masked == 0) throw std::invalid_argument("masked_cross_entropy: empty mask");
        // softmax probabilities kept for backward
        Tensor<T> probs({Tn, V});
        T loss = 0;
        for (int64_t r = 0; r < Tn; ++r) {
            if (!mask[r]) continue;
            const T* row = &L.data[r * V];
            T mx = row[0];
            for (int64_t c = 1; c < V; ++c) mx = std::max(mx, row[c]);
            T sum = 0;
            T* pr = &probs.data[r * V];
            for (int64_t c = 0; c < V; ++c) {
                pr[c] = std::exp(row[c] - mx);
                sum += pr[c];
            }
            for (int64_t c = 0; c < V; ++c) pr[c] /= sum;
            loss -= std::log(pr[targets[r]]);
        }
        loss = loss / static_cast<T>(n_masked) * reweight;
        Tensor<T> out({1}, {loss});
        return push(std::move(out), needs_grad({logits}),
                    [this, logits, targets, mask, probs = std::move(probs), n_masked, reweight, V](Id o) {
                        const T g = nodes_[o].grad.data[0] * reweight / static_cast<T>(n_masked);
                        Tensor<T>& gl = nodes_[logits].grad;
                        for (int64_t r = 0; r < gl.rows(); ++r) {
                            if (!mask[r]) continue;
                            const T* pr = &probs.data[r * V];
                            T* gr = &gl.data[r * V];
                            for (int64_t c = 0; c < V; ++c) gr[c] += g * pr[c];
                            gr[targets[r]] -= g;
                        }
                    });
    }

    Id reshape(Id a, std::vector<int64_t> shape) {
        Tensor<T> out(shape, nodes_[a].value.data);
        return push(std::move(out), needs_grad({a}), [this, a](Id o) {
            const Tensor<T>& go = nodes_[o].grad;
            for (size_t i = 0; i < go.data.size(); ++i) nodes_[a].grad.data[i] += go.data[i];
        });
    }

    Id sum(Id a) {
        T s = 0;
        for (T v : nodes_[a].value.data) s += v;
        return push(Tensor<T>({1}, {s}), needs_grad({a}), [this, a](Id o) {
            const T g = nodes_[o].grad.data[0];
            for (T& v : nodes_[a].grad.data) v += g;
        });
    }

    Id mul(Id a, Id b) {
        const Tensor<T>& A = nodes_[a].value;
        const Tensor<T>& B = nodes_[b].value;
        if (!same_shape(A, B)) throw DimensionError("mul: shape mismatch");
        Tensor<T> out = A;
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= B.data[i];
        return push(std::move(out), needs_grad({a, b}), [this, a, b](Id o) {
            const Tensor<T>& go = nodes_[o].grad;
            if (wants(a))
                for (size_t i = 0; i < go.data.size(); ++i)
                    nodes_[a].grad.data[i] += go.data[i] * nodes_[b].value.data[i];
            if (wants(b))
                for (size_t i = 0; i < go.data.size(); ++i)
                    nodes_[b].grad.data[i] += go.data[i] * nodes_[a].value.data[i];
        });
    }

    void backward(Id root) {
        if (!recording_) throw NumericError("backward on a non-recording tape");
        if (nodes_[root].value.numel() != 1) throw DimensionError("backward: root must be scalar");
        for (auto& n : nodes_)
            if (n.requires_grad) std::fill(n.grad.data.begin(), n.grad.data.end(), T(0));
        nodes_[root].grad.data[0] = T(1);
        for (Id i = root; i >= 0; --i)
            if (nodes_[i].backward && nodes_[i].requires_grad) nodes_[i].backward(i);
    }

    size_t size() const { return nodes_.size(); }

  private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        std::function<void(Id)> backward;
        bool requires_grad = false;
    };

    bool wants(Id id) const { return nodes_[id].requires_grad; }
    bool wants_rec(Id id) const { return nodes_[id].requires_grad; }
    bool needs_grad(std::initializer_list<Id> parents) const {
        if (!recording_) return false;
        for (Id p : parents)
            if (nodes_[p].requires_grad) return true;
        return false;
    }

    Id push(Tensor<T> value, bool requires_grad, std::function<void(Id)> bw) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = recording_ && requires_grad;
        if (n.requires_grad) {
            n.grad = Tensor<T>(n.value.shape);
            n.backward = std::move(bw);
        }
        nodes_.push_back(std::move(n));
        return static_cast<Id>(nodes_.size() - 1);
    }

    static MatMap mat(Tensor<T>& t) { return MatMap(t.data.data(), t.rows(), t.cols()); }
    static CMatMap cmat(const Tensor<T>& t) { return CMatMap(t.data.data(), t.rows(), t.cols()); }

    std::vector<Node> nodes_;
    bool recording_;
};

}  // namespace pip
