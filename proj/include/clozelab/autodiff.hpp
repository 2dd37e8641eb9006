// Reverse-mode automatic differentiation on an append-only tape.
// The primitive set is chosen to express every reader architecture and
// its log-loss; nothing here knows about readers.
//
// A tape is confined to one thread. ParameterStore values are read-only
// during forward/backward of a tape; gradients accumulate single-writer.

#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "clozelab/tensor.hpp"

namespace clozelab {

class ParameterStore {
public:
    struct Entry {
        TensorValue value;
        TensorValue grad;
        bool trainable = true;
    };

    TensorValue& add(const std::string& name, TensorValue init, bool trainable = true) {
        if (entries_.count(name)) throw error("duplicate parameter name: " + name);
        Entry e;
        e.grad = TensorValue::zeros(init.shape);
        e.value = std::move(init);
        e.trainable = trainable;
        return entries_.emplace(name, std::move(e)).first->second.value;
    }

    bool has(const std::string& name) const { return entries_.count(name) != 0; }

    Entry& entry(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw error("unknown parameter: " + name);
        return it->second;
    }
    const Entry& entry(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw error("unknown parameter: " + name);
        return it->second;
    }

    TensorValue& value(const std::string& name) { return entry(name).value; }
    const TensorValue& value(const std::string& name) const { return entry(name).value; }
    TensorValue& grad(const std::string& name) { return entry(name).grad; }

    void zero_grads() {
        for (auto& [name, e] : entries_)
            std::fill(e.grad.data.begin(), e.grad.data.end(), 0.0);
    }

    // deterministic (name-sorted) iteration
    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }
    std::size_t size() const { return entries_.size(); }

private:
    std::map<std::string, Entry> entries_;
};

namespace ad {

class Tape;

struct Var {
    int idx = -1;
    Tape* tape = nullptr;

    bool valid() const { return tape != nullptr && idx >= 0; }
    // reference is invalidated by the next op on the tape; copy to keep
    const TensorValue& value() const;
};

struct Node {
    TensorValue value;
    TensorValue grad;
    std::vector<int> parents;
    // distributes this node's grad to its parents (or a parameter slot)
    std::function<void(Tape&, const Node&)> backward;
};

class Tape {
public:
    std::vector<Node> nodes;

    Var emplace(TensorValue value, std::vector<int> parents,
                std::function<void(Tape&, const Node&)> backward) {
        Node n;
        n.grad = TensorValue::zeros(value.shape);
        n.value = std::move(value);
        n.parents = std::move(parents);
        n.backward = std::move(backward);
        nodes.push_back(std::move(n));
        return Var{static_cast<int>(nodes.size()) - 1, this};
    }

    const TensorValue& value(int idx) const { return nodes[static_cast<std::size_t>(idx)].value; }
    TensorValue& grad(int idx) { return nodes[static_cast<std::size_t>(idx)].grad; }

    // Reverse sweep from a scalar root. Gradients of parameters reachable
    // from the root accumulate into their ParameterStore slots; everything
    // else keeps a zero gradient.
    void backward(Var root) {
        if (!root.valid() || root.tape != this) throw error("backward: root not on this tape");
        Node& r = nodes[static_cast<std::size_t>(root.idx)];
        if (r.value.rank() != 0)
            throw error("backward: root must be scalar, got " + r.value.shape_str());
        r.grad.data[0] = 1.0;
        for (int i = root.idx; i >= 0; --i) {
            const Node& n = nodes[static_cast<std::size_t>(i)];
            if (n.backward) n.backward(*this, n);
        }
    }
};

inline const TensorValue& Var::value() const { return tape->value(idx); }

inline Var constant(Tape& t, TensorValue v) {
    return t.emplace(std::move(v), {}, nullptr);
}

inline Var scalar(Tape& t, double v) { return constant(t, TensorValue::scalar(v)); }

// Leaf bound to a named parameter; backward accumulates into the store.
inline Var param(Tape& t, ParameterStore& store, const std::string& name) {
    auto& entry = store.entry(name);
    TensorValue* gslot = &entry.grad;
    return t.emplace(entry.value, {},
                     [gslot](Tape&, const Node& self) {
                         for (std::size_t i = 0; i < self.grad.data.size(); ++i)
                             gslot->data[i] += self.grad.data[i];
                     });
}

namespace detail {

inline void check_same_shape(const char* op, const TensorValue& a, const TensorValue& b) {
    if (!a.same_shape(b))
        throw error(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

inline void accumulate(Tape& t, int parent, const std::vector<double>& contrib) {
    auto& g = t.grad(parent).data;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += contrib[i];
}

} // namespace detail

// ---- elementwise ----

inline Var add(Var a, Var b) {
    detail::check_same_shape("add", a.value(), b.value());
    TensorValue out = a.value();
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.value().data[i];
    int ia = a.idx, ib = b.idx;
    return a.tape->emplace(std::move(out), {ia, ib}, [ia, ib](Tape& t, const Node& self) {
        detail::accumulate(t, ia, self.grad.data);
        detail::accumulate(t, ib, self.grad.data);
    });
}

inline Var sub(Var a, Var b) {
    detail::check_same_shape("sub", a.value(), b.value());
    TensorValue out = a.value();
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.value().data[i];
    int ia = a.idx, ib = b.idx;
    return a.tape->emplace(std::move(out), {ia, ib}, [ia, ib](Tape& t, const Node& self) {
        detail::accumulate(t, ia, self.grad.data);
        auto& g = t.grad(ib).data;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad.data[i];
    });
}

inline Var mul(Var a, Var b) {
    detail::check_same_shape("mul", a.value(), b.value());
    TensorValue out = a.value();
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.value().data[i];
    int ia = a.idx, ib = b.idx;
    return a.tape->emplace(std::move(out), {ia, ib}, [ia, ib](Tape& t, const Node& self) {
        const auto& av = t.value(ia).data;
        const auto& bv = t.value(ib).data;
        auto& ga = t.grad(ia).data;
        auto& gb = t.grad(ib).data;
        for (std::size_t i = 0; i < self.grad.data.size(); ++i) {
            ga[i] += self.grad.data[i] * bv[i];
            gb[i] += self.grad.data[i] * av[i];
        }
    });
}

inline Var scale(Var a, double c) {
    TensorValue out = a.value();
    for (double& v : out.data) v *= c;
    int ia = a.idx;
    return a.tape->emplace(std::move(out), {ia}, [ia, c](Tape& t, const Node& self) {
        auto& g = t.grad(ia).data;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad.data[i];
    });
}

inline Var sigmoid(Var a) {
    TensorValue out = a.value();
    for (double& v : out.data) {
        // stable in both tails
        v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                     : std::exp(v) / (1.0 + std::exp(v));
    }
    int ia = a.idx;
    return a.tape->emplace(std::move(out), {ia}, [ia](Tape& t, const Node& self) {
        auto& g = t.grad(ia).data;
        for (std::size_t i = 0; i < g.size(); ++i) {
            double y = self.value.data[i];
            g[i] += self.grad.data[i] * y * (1.0 - y);
        }
    });
}

inline Var tanh(Var a) {
    TensorValue out = a.value();
    for (double& v : out.data) v = std::tanh(v);
    int ia = a.idx;
    return a.tape->emplace(std::move(out), {ia}, [ia](Tape& t, const Node& self) {
        auto& g = t.grad(ia).data;
        for (std::size_t i = 0; i < g.size(); ++i) {
            double y = self.value.data[i];
            g[i] += self.grad.data[i] * (1.0 - y * y);
        }
    });
}

inline Var log(Var a) {
    TensorValue out = a.value();
    for (double& v : out.data) v = std::log(v);
    int ia = a.idx;
    return a.tape->emplace(std::move(out), {ia}, [ia](Tape& t, const Node& self) {
        const auto& av = t.value(ia).data;
        auto& g = t.grad(ia).data;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad.data[i] / av[i];
    });
}

// max(a, floor) elementwise; gradient passes where a >= floor
inline Var clamp_min(Var a, double floor) {
    TensorValue out = a.value();
    for (double& v : out.data) v = v < floor ? floor : v;
    int ia = a.idx;
    return a.tape->emplace(std::move(out), {ia}, [ia, floor](Tape& t, const Node& self) {
        const auto& av = t.value(ia).data;
        auto& g = t.grad(ia).data;
        for (std::size_t i = 0; i < g.size(); ++i)
            if (av[i] >= floor) g[i] += self.grad.data[i];
    });
}

// ---- linear algebra ----

// (m,k)x(k,n)->(m,n), (m,k)x(k)->(m), (k)x(k,n)->(n)
inline Var matmul(Var a, Var b) {
    const TensorValue& A = a.value();
    const TensorValue& B = b.value();
    int ia = a.idx, ib = b.idx;

    if (A.rank() == 2 && B.rank() == 2) {
        if (A.cols() != B.rows())
            throw error("matmul: shape mismatch " + A.shape_str() + " vs " + B.shape_str());
        int m = A.rows(), k = A.cols(), n = B.cols();
        TensorValue out = TensorValue::zeros({m, n});
        for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
                double av = A.at(i, p);
                for (int j = 0; j < n; ++j) out.at(i, j) += av * B.at(p, j);
            }
        return a.tape->emplace(std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape& t, const Node& self) {
            const TensorValue& Av = t.value(ia);
            const TensorValue& Bv = t.value(ib);
            TensorValue& gA = t.grad(ia);
            TensorValue& gB = t.grad(ib);
            // dA = dO B^T ; dB = A^T dO
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) {
                    double go = self.grad.at(i, j);
                    if (go == 0.0) continue;
                    for (int p = 0; p < k; ++p) {
                        gA.at(i, p) += go * Bv.at(p, j);
                        gB.at(p, j) += go * Av.at(i, p);
                    }
                }
        });
    }
    if (A.rank() == 2 && B.rank() == 1) {
        if (A.cols() != B.dim())
            throw error("matmul: shape mismatch " + A.shape_str() + " vs " + B.shape_str());
        int m = A.rows(), k = A.cols();
        TensorValue out = TensorValue::zeros({m});
        for (int i = 0; i < m; ++i) {
            double s = 0.0;
            for (int p = 0; p < k; ++p) s += A.at(i, p) * B.at(static_cast<std::size_t>(p));
            out.data[static_cast<std::size_t>(i)] = s;
        }
        return a.tape->emplace(std::move(out), {ia, ib}, [ia, ib, m, k](Tape& t, const Node& self) {
            const TensorValue& Av = t.value(ia);
            const TensorValue& xv = t.value(ib);
            TensorValue& gA = t.grad(ia);
            TensorValue& gx = t.grad(ib);
            for (int i = 0; i < m; ++i) {
                double go = self.grad.data[static_cast<std::size_t>(i)];
                if (go == 0.0) continue;
                for (int p = 0; p < k; ++p) {
                    gA.at(i, p) += go * xv.data[static_cast<std::size_t>(p)];
                    gx.data[static_cast<std::size_t>(p)] += go * Av.at(i, p);
                }
            }
        });
    }
    if (A.rank() == 1 && B.rank() == 2) {
        if (A.dim() != B.rows())
            throw error("matmul: shape mismatch " + A.shape_str() + " vs " + B.shape_str());
        int k = B.rows(), n = B.cols();
        TensorValue out = TensorValue::zeros({n});
        for (int p = 0; p < k; ++p) {
            double av = A.data[static_cast<std::size_t>(p)];
            if (av == 0.0) continue;
            for (int j = 0; j < n; ++j) out.data[static_cast<std::size_t>(j)] += av * B.at(p, j);
        }
        return a.tape->emplace(std::move(out), {ia, ib}, [ia, ib, k, n](Tape& t, const Node& self) {
            const TensorValue& xv = t.value(ia);
            const TensorValue& Bv = t.value(ib);
            TensorValue& gx = t.grad(ia);
            TensorValue& gB = t.grad(ib);
            for (int j = 0; j < n; ++j) {
                double go = self.grad.data[static_cast<std::size_t>(j)];
                if (go == 0.0) continue;
                for (int p = 0; p < k; ++p) {
                    gx.data[static_cast<std::size_t>(p)] += go * Bv.at(p, j);
                    gB.at(p, j) += go * xv.data[static_cast<std::size_t>(p)];
                }
            }
        });
    }
    throw error("matmul: unsupported ranks " + A.shape_str() + " vs " + B.shape_str());
}

inline Var dot(Var a, Var b) {
    const TensorValue& A = a.value();
    const TensorValue& B = b.value();
    if (A.rank() != 1 || B.rank() != 1 || A.dim() != B.dim())
        throw error("dot: shape mismatch " + A.shape_str() + " vs " + B.shape_str());
    double s = 0.0;
    for (std::size_t i = 0; i < A.data.size(); ++i) s += A.data[i] * B.data[i];
    int ia = a.idx, ib = b.idx;
    return a.tape->emplace(TensorValue::scalar(s), {ia, ib}, [ia, ib](Tape& t, const Node& self) {
        double go = self.grad.data[0];
        const auto& av = t.value(ia).data;
        const auto& bv = t.value(ib).data;
        auto& ga = t.grad(ia).data;
        auto& gb = t.grad(ib).data;
        for (std::size_t i = 0; i < av.size(); ++i) {
            ga[i] += go * bv[i];
            gb[i] += go * av[i];
        }
    });
}

inline Var transpose(Var a) {
    const TensorValue& A = a.value();
    if (A.rank() != 2) throw error("transpose: need rank-2, got " + A.shape_str());
    int m = A.rows(), n = A.cols();
    TensorValue out = TensorValue::zeros({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(j, i) = A.at(i, j);
    int ia = a.idx;
    return a.tape->emplace(std::move(out), {ia}, [ia, m, n](Tape& t, const Node& self) {
        TensorValue& g = t.grad(ia);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) g.at(i, j) += self.grad.at(j, i);
    });
}

// ---- shape ops ----

// concatenate along the last axis; 1-D vectors or 2-D with equal row count
inline Var concat(Var a, Var b) {
    const TensorValue& A = a.value();
    const TensorValue& B = b.value();
    int ia = a.idx, ib = b.idx;
    if (A.rank() == 1 && B.rank() == 1) {
        int na = A.dim(), nb = B.dim();
        TensorValue out = TensorValue::zeros({na + nb});
        std::copy(A.data.begin(), A.data.end(), out.data.begin());
        std::copy(B.data.begin(), B.data.end(), out.data.begin() + na);
        return a.tape->emplace(std::move(out), {ia, ib}, [ia, ib, na, nb](Tape& t, const Node& self) {
            auto& ga = t.grad(ia).data;
            auto& gb = t.grad(ib).data;
            for (int i = 0; i < na; ++i) ga[static_cast<std::size_t>(i)] += self.grad.data[static_cast<std::size_t>(i)];
            for (int i = 0; i < nb; ++i) gb[static_cast<std::size_t>(i)] += self.grad.data[static_cast<std::size_t>(na + i)];
        });
    }
    if (A.rank() == 2 && B.rank() == 2 && A.rows() == B.rows()) {
        int m = A.rows(), ca = A.cols(), cb = B.cols();
        TensorValue out = TensorValue::zeros({m, ca + cb});
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < ca; ++j) out.at(i, j) = A.at(i, j);
            for (int j = 0; j < cb; ++j) out.at(i, ca + j) = B.at(i, j);
        }
        return a.tape->emplace(std::move(out), {ia, ib}, [ia, ib, m, ca, cb](Tape& t, const Node& self) {
            TensorValue& ga = t.grad(ia);
            TensorValue& gb = t.grad(ib);
            for (int i = 0; i < m; ++i) {
                for (int j = 0; j < ca; ++j) ga.at(i, j) += self.grad.at(i, j);
                for (int j = 0; j < cb; ++j) gb.at(i, j) += self.grad.at(i, ca + j);
            }
        });
    }
    throw error("concat: shape mismatch " + A.shape_str() + " vs " + B.shape_str());
}

// rows (all same length) -> matrix
inline Var stack_rows(const std::vector<Var>& rows) {
    if (rows.empty()) throw error("stack_rows: empty input");
    Tape& t = *rows[0].tape;
    int n = rows[0].value().dim();
    int m = static_cast<int>(rows.size());
    TensorValue out = TensorValue::zeros({m, n});
    std::vector<int> parents;
    parents.reserve(rows.size());
    for (int i = 0; i < m; ++i) {
        const TensorValue& r = rows[static_cast<std::size_t>(i)].value();
        if (r.rank() != 1 || r.dim() != n)
            throw error("stack_rows: row " + std::to_string(i) + " has shape " + r.shape_str());
        for (int j = 0; j < n; ++j) out.at(i, j) = r.data[static_cast<std::size_t>(j)];
        parents.push_back(rows[static_cast<std::size_t>(i)].idx);
    }
    auto ps = parents;
    return t.emplace(std::move(out), std::move(parents), [ps, n](Tape& tp, const Node& self) {
        for (std::size_t i = 0; i < ps.size(); ++i) {
            auto& g = tp.grad(ps[i]).data;
            for (int j = 0; j < n; ++j)
                g[static_cast<std::size_t>(j)] += self.grad.at(static_cast<int>(i), j);
        }
    });
}

// scalars -> 1-D vector
inline Var stack_scalars(const std::vector<Var>& xs) {
    if (xs.empty()) throw error("stack_scalars: empty input");
    Tape& t = *xs[0].tape;
    TensorValue out = TensorValue::zeros({static_cast<int>(xs.size())});
    std::vector<int> parents;
    parents.reserve(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (xs[i].value().rank() != 0)
            throw error("stack_scalars: element " + std::to_string(i) + " has shape " +
                        xs[i].value().shape_str());
        out.data[i] = xs[i].value().item();
        parents.push_back(xs[i].idx);
    }
    auto ps = parents;
    return t.emplace(std::move(out), std::move(parents), [ps](Tape& tp, const Node& self) {
        for (std::size_t i = 0; i < ps.size(); ++i) tp.grad(ps[i]).data[0] += self.grad.data[i];
    });
}

// contiguous slice of a 1-D vector
inline Var slice(Var a, int offset, int len) {
    const TensorValue& A = a.value();
    if (A.rank() != 1 || offset < 0 || len <= 0 || offset + len > A.dim())
        throw error("slice: bad range [" + std::to_string(offset) + "," +
                    std::to_string(offset + len) + ") of " + A.shape_str());
    TensorValue out = TensorValue::zeros({len});
    for (int i = 0; i < len; ++i) out.data[static_cast<std::size_t>(i)] = A.data[static_cast<std::size_t>(offset + i)];
    int ia = a.idx;
    return a.tape->emplace(std::move(out), {ia}, [ia, offset, len](Tape& t, const Node& self) {
        auto& g = t.grad(ia).data;
        for (int i = 0; i < len; ++i) g[static_cast<std::size_t>(offset + i)] += self.grad.data[static_cast<std::size_t>(i)];
    });
}

// scalar element of a 1-D vector
inline Var pick(Var a, int index) {
    const TensorValue& A = a.value();
    if (A.rank() != 1 || index < 0 || index >= A.dim())
        throw error("pick: index " + std::to_string(index) + " out of " + A.shape_str());
    int ia = a.idx;
    return a.tape->emplace(TensorValue::scalar(A.data[static_cast<std::size_t>(index)]), {ia},
                           [ia, index](Tape& t, const Node& self) {
                               t.grad(ia).data[static_cast<std::size_t>(index)] += self.grad.data[0];
                           });
}

// row of an embedding matrix; backward scatters into that row
inline Var gather_row(Var table, int row) {
    const TensorValue& E = table.value();
    if (E.rank() != 2 || row < 0 || row >= E.rows())
        throw error("gather_row: row " + std::to_string(row) + " out of " + E.shape_str());
    int n = E.cols();
    TensorValue out = TensorValue::zeros({n});
    for (int j = 0; j < n; ++j) out.data[static_cast<std::size_t>(j)] = E.at(row, j);
    int ie = table.idx;
    return table.tape->emplace(std::move(out), {ie}, [ie, row, n](Tape& t, const Node& self) {
        TensorValue& g = t.grad(ie);
        for (int j = 0; j < n; ++j) g.at(row, j) += self.grad.data[static_cast<std::size_t>(j)];
    });
}

// multiple rows -> matrix
inline Var gather_rows(Var table, const std::vector<int>& ids) {
    const TensorValue& E = table.value();
    if (E.rank() != 2) throw error("gather_rows: need rank-2 table, got " + E.shape_str());
    int n = E.cols();
    int m = static_cast<int>(ids.size());
    if (m == 0) throw error("gather_rows: empty index list");
    TensorValue out = TensorValue::zeros({m, n});
    for (int i = 0; i < m; ++i) {
        int row = ids[static_cast<std::size_t>(i)];
        if (row < 0 || row >= E.rows())
            throw error("gather_rows: row " + std::to_string(row) + " out of " + E.shape_str());
        for (int j = 0; j < n; ++j) out.at(i, j) = E.at(row, j);
    }
    int ie = table.idx;
    auto idx_copy = ids;
    return table.tape->emplace(std::move(out), {ie}, [ie, idx_copy, n](Tape& t, const Node& self) {
        TensorValue& g = t.grad(ie);
        for (std::size_t i = 0; i < idx_copy.size(); ++i)
            for (int j = 0; j < n; ++j) g.at(idx_copy[i], j) += self.grad.at(static_cast<int>(i), j);
    });
}

// ---- reductions ----

inline Var sum(Var a) {
    const TensorValue& A = a.value();
    double s = 0.0;
    for (double v : A.data) s += v;
    int ia = a.idx;
    return a.tape->emplace(TensorValue::scalar(s), {ia}, [ia](Tape& t, const Node& self) {
        double go = self.grad.data[0];
        auto& g = t.grad(ia).data;
        for (double& v : g) v += go;
    });
}

inline Var mean(Var a) {
    double inv = 1.0 / static_cast<double>(a.value().size());
    return scale(sum(a), inv);
}

// 2-D reduction: axis 0 sums over rows (-> cols vector), axis 1 over columns
inline Var sum_axis(Var a, int axis) {
    const TensorValue& A = a.value();
    if (A.rank() != 2 || (axis != 0 && axis != 1))
        throw error("sum_axis: need rank-2 and axis 0/1, got " + A.shape_str());
    int m = A.rows(), n = A.cols();
    int ia = a.idx;
    if (axis == 0) {
        TensorValue out = TensorValue::zeros({n});
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) out.data[static_cast<std::size_t>(j)] += A.at(i, j);
        return a.tape->emplace(std::move(out), {ia}, [ia, m, n](Tape& t, const Node& self) {
            TensorValue& g = t.grad(ia);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) g.at(i, j) += self.grad.data[static_cast<std::size_t>(j)];
        });
    }
    TensorValue out = TensorValue::zeros({m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.data[static_cast<std::size_t>(i)] += A.at(i, j);
    return a.tape->emplace(std::move(out), {ia}, [ia, m, n](Tape& t, const Node& self) {
        TensorValue& g = t.grad(ia);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) g.at(i, j) += self.grad.data[static_cast<std::size_t>(i)];
    });
}

inline Var mean_axis(Var a, int axis) {
    const TensorValue& A = a.value();
    double inv = 1.0 / static_cast<double>(axis == 0 ? A.rows() : A.cols());
    return scale(sum_axis(a, axis), inv);
}

// ---- masked softmax ----
//
// Masked entries are excluded from the normalizer and emit exact zeros,
// so padded positions provably carry zero attention. Max subtraction
// keeps exp() in range. A fully masked row is rejected.

namespace detail {

inline void softmax_span(const double* x, const double* mask, double* out, std::size_t n,
                         std::size_t stride) {
    double mx = -1.0;
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
        if (mask[i * stride] == 0.0) continue;
        double v = x[i * stride];
        if (!any || v > mx) mx = v;
        any = true;
    }
    if (!any) throw error("masked_softmax: fully masked row");
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (mask[i * stride] == 0.0) {
            out[i * stride] = 0.0;
        } else {
            double e = std::exp(x[i * stride] - mx);
            out[i * stride] = e;
            z += e;
        }
    }
    for (std::size_t i = 0; i < n; ++i)
        if (mask[i * stride] != 0.0) out[i * stride] /= z;
}

// dx_i = y_i * (dy_i - sum_j dy_j y_j), masked entries get no gradient
inline void softmax_span_backward(const double* y, const double* gy, const double* mask,
                                  double* gx, std::size_t n, std::size_t stride) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        if (mask[i * stride] != 0.0) acc += gy[i * stride] * y[i * stride];
    for (std::size_t i = 0; i < n; ++i)
        if (mask[i * stride] != 0.0)
            gx[i * stride] += y[i * stride] * (gy[i * stride] - acc);
}

} // namespace detail

// mask is a constant (not differentiated); 1 keeps an entry, 0 drops it.
// 1-D: normalizes the vector (axis ignored). 2-D: axis selects the
// normalization direction — axis 0 normalizes each column over rows,
// axis 1 each row over columns.
inline Var masked_softmax(Var a, const TensorValue& mask, int axis = 1) {
    const TensorValue& A = a.value();
    detail::check_same_shape("masked_softmax", A, mask);
    int ia = a.idx;
    TensorValue out = TensorValue::zeros(A.shape);
    TensorValue mask_copy = mask;
    if (A.rank() == 1) {
        detail::softmax_span(A.data.data(), mask.data.data(), out.data.data(), A.data.size(), 1);
        return a.tape->emplace(std::move(out), {ia},
                               [ia, mask_copy](Tape& t, const Node& self) {
                                   detail::softmax_span_backward(self.value.data.data(), self.grad.data.data(),
                                                                 mask_copy.data.data(), t.grad(ia).data.data(),
                                                                 self.value.data.size(), 1);
                               });
    }
    if (A.rank() == 2) {
        std::size_t m = static_cast<std::size_t>(A.rows()), n = static_cast<std::size_t>(A.cols());
        if (axis == 1) {
            for (std::size_t i = 0; i < m; ++i)
                detail::softmax_span(A.data.data() + i * n, mask.data.data() + i * n,
                                     out.data.data() + i * n, n, 1);
        } else if (axis == 0) {
            for (std::size_t j = 0; j < n; ++j)
                detail::softmax_span(A.data.data() + j, mask.data.data() + j, out.data.data() + j, m, n);
        } else {
            throw error("masked_softmax: bad axis");
        }
        return a.tape->emplace(std::move(out), {ia},
                               [ia, mask_copy, m, n, axis](Tape& t, const Node& self) {
                                   if (axis == 1) {
                                       for (std::size_t i = 0; i < m; ++i)
                                           detail::softmax_span_backward(self.value.data.data() + i * n,
                                                                         self.grad.data.data() + i * n,
                                                                         mask_copy.data.data() + i * n,
                                                                         t.grad(ia).data.data() + i * n, n, 1);
                                   } else {
                                       for (std::size_t j = 0; j < n; ++j)
                                           detail::softmax_span_backward(self.value.data.data() + j,
                                                                         self.grad.data.data() + j,
                                                                         mask_copy.data.data() + j,
                                                                         t.grad(ia).data.data() + j, m, n);
                                   }
                               });
    }
    throw error("masked_softmax: unsupported rank " + A.shape_str());
}

inline Var softmax(Var a) {
    TensorValue ones = a.value();
    std::fill(ones.data.begin(), ones.data.end(), 1.0);
    return masked_softmax(a, ones, a.value().rank() == 2 ? 1 : 0);
}

} // namespace ad
} // namespace clozelab
