// GRU and LSTM cells, sequence encoders, and the initialization schemes
// used by the readers (orthogonal input-to-hidden, identity
// hidden-to-hidden, zero biases).
//
// Gate conventions, fixed here and mirrored by the scalar reference
// implementation in the tests:
//   GRU:  z = sig(Wz x + Uz h + bz);  r = sig(Wr x + Ur h + br)
//         cand = tanh(Wh x + Uh (r*h) + bh);  h' = (1-z)*h + z*cand
//   LSTM: i,f,o = sig(.); g = tanh(.); c' = f*c + i*g; h' = o*tanh(c')

#pragma once

#include <string>
#include <vector>

#include "clozelab/autodiff.hpp"
#include "clozelab/linalg.hpp"

namespace clozelab {

enum class CellKind { GRU, LSTM };

inline const std::vector<std::string>& gate_names(CellKind kind) {
    static const std::vector<std::string> gru = {"z", "r", "h"};
    static const std::vector<std::string> lstm = {"i", "f", "o", "g"};
    return kind == CellKind::GRU ? gru : lstm;
}

// Names the per-gate tensors of one recurrent cell inside a ParameterStore:
//   <prefix>.W_<gate>  input-to-hidden   (hidden x input)
//   <prefix>.U_<gate>  hidden-to-hidden  (hidden x hidden)
//   <prefix>.b_<gate>  bias              (hidden)
struct RecurrentCellParams {
    CellKind kind = CellKind::GRU;
    int input_dim = 0;
    int hidden_dim = 0;
    std::string prefix;

    std::string W(const std::string& gate) const { return prefix + ".W_" + gate; }
    std::string U(const std::string& gate) const { return prefix + ".U_" + gate; }
    std::string b(const std::string& gate) const { return prefix + ".b_" + gate; }
};

inline RecurrentCellParams add_cell(ParameterStore& store, CellKind kind,
                                    const std::string& prefix, int input_dim, int hidden_dim) {
    RecurrentCellParams cell{kind, input_dim, hidden_dim, prefix};
    for (const auto& g : gate_names(kind)) {
        store.add(cell.W(g), TensorValue::zeros({hidden_dim, input_dim}));
        store.add(cell.U(g), TensorValue::zeros({hidden_dim, hidden_dim}));
        store.add(cell.b(g), TensorValue::zeros({hidden_dim}));
    }
    return cell;
}

// Orthogonal input-to-hidden (one draw per gate), identity hidden-to-hidden,
// zero biases.
inline void init_cell(ParameterStore& store, const RecurrentCellParams& cell, Rng& rng) {
    for (const auto& g : gate_names(cell.kind)) {
        store.value(cell.W(g)) = random_orthogonal(cell.hidden_dim, cell.input_dim, rng);
        TensorValue& U = store.value(cell.U(g));
        if (U.rows() != U.cols())
            throw error("identity init needs a square hidden-to-hidden block, got " + U.shape_str());
        U = TensorValue::identity(cell.hidden_dim);
        std::fill(store.value(cell.b(g)).data.begin(), store.value(cell.b(g)).data.end(), 0.0);
    }
}

inline void init_embedding(TensorValue& table, Rng& rng, double range = 0.1) {
    for (double& v : table.data) v = rng.uniform(-range, range);
}

namespace rnn_detail {

struct CellVars {
    std::vector<ad::Var> W, U, b; // indexed in gate_names order
};

inline CellVars bind(ad::Tape& tape, ParameterStore& store, const RecurrentCellParams& cell) {
    CellVars v;
    for (const auto& g : gate_names(cell.kind)) {
        v.W.push_back(ad::param(tape, store, cell.W(g)));
        v.U.push_back(ad::param(tape, store, cell.U(g)));
        v.b.push_back(ad::param(tape, store, cell.b(g)));
    }
    return v;
}

inline ad::Var gate_preact(const CellVars& v, std::size_t g, ad::Var x, ad::Var h) {
    return ad::add(ad::add(ad::matmul(v.W[g], x), ad::matmul(v.U[g], h)), v.b[g]);
}

} // namespace rnn_detail

inline ad::Var gru_step(ad::Tape& tape, const rnn_detail::CellVars& v, ad::Var x, ad::Var h_prev) {
    ad::Var z = ad::sigmoid(rnn_detail::gate_preact(v, 0, x, h_prev));
    ad::Var r = ad::sigmoid(rnn_detail::gate_preact(v, 1, x, h_prev));
    ad::Var gated = ad::mul(r, h_prev);
    ad::Var cand = ad::tanh(ad::add(ad::add(ad::matmul(v.W[2], x), ad::matmul(v.U[2], gated)), v.b[2]));
    ad::Var ones = ad::constant(tape, [&] {
        TensorValue t = TensorValue::zeros(z.value().shape);
        std::fill(t.data.begin(), t.data.end(), 1.0);
        return t;
    }());
    return ad::add(ad::mul(ad::sub(ones, z), h_prev), ad::mul(z, cand));
}

struct LstmState {
    ad::Var h;
    ad::Var c;
};

inline LstmState lstm_step(ad::Tape&, const rnn_detail::CellVars& v, ad::Var x, LstmState prev) {
    ad::Var i = ad::sigmoid(rnn_detail::gate_preact(v, 0, x, prev.h));
    ad::Var f = ad::sigmoid(rnn_detail::gate_preact(v, 1, x, prev.h));
    ad::Var o = ad::sigmoid(rnn_detail::gate_preact(v, 2, x, prev.h));
    ad::Var g = ad::tanh(rnn_detail::gate_preact(v, 3, x, prev.h));
    ad::Var c = ad::add(ad::mul(f, prev.c), ad::mul(i, g));
    return {ad::mul(o, ad::tanh(c)), c};
}

// Convenience entry points matching the cell contract directly (state in,
// state out); used by the unit tests and by the encoders below.
inline ad::Var gru_step(ad::Tape& tape, ParameterStore& store, const RecurrentCellParams& cell,
                        ad::Var x, ad::Var h_prev) {
    if (cell.kind != CellKind::GRU) throw error("gru_step: cell is not a GRU");
    if (x.value().dim() != cell.input_dim || h_prev.value().dim() != cell.hidden_dim)
        throw error("gru_step: dim mismatch x" + x.value().shape_str() + " h" +
                    h_prev.value().shape_str());
    auto v = rnn_detail::bind(tape, store, cell);
    return gru_step(tape, v, x, h_prev);
}

inline LstmState lstm_step(ad::Tape& tape, ParameterStore& store, const RecurrentCellParams& cell,
                           ad::Var x, LstmState prev) {
    if (cell.kind != CellKind::LSTM) throw error("lstm_step: cell is not an LSTM");
    if (x.value().dim() != cell.input_dim || prev.h.value().dim() != cell.hidden_dim ||
        prev.c.value().dim() != cell.hidden_dim)
        throw error("lstm_step: dim mismatch");
    auto v = rnn_detail::bind(tape, store, cell);
    return lstm_step(tape, v, x, prev);
}

struct SequenceEncoding {
    std::vector<ad::Var> states; // per position, input order
    ad::Var final_forward;       // last state of the forward pass
    ad::Var final_backward;      // state of the backward pass at position 1
};

// One direction; `reverse` consumes the sequence back to front but reports
// states aligned to input positions.
inline std::vector<ad::Var> encode_direction(ad::Tape& tape, ParameterStore& store,
                                             const RecurrentCellParams& cell,
                                             const std::vector<ad::Var>& xs, bool reverse) {
    if (xs.empty()) throw error("encode: empty sequence");
    auto v = rnn_detail::bind(tape, store, cell);
    ad::Var h0 = ad::constant(tape, TensorValue::zeros({cell.hidden_dim}));
    std::vector<ad::Var> states(xs.size());
    if (cell.kind == CellKind::GRU) {
        ad::Var h = h0;
        for (std::size_t k = 0; k < xs.size(); ++k) {
            std::size_t t = reverse ? xs.size() - 1 - k : k;
            h = gru_step(tape, v, xs[t], h);
            states[t] = h;
        }
    } else {
        LstmState st{h0, ad::constant(tape, TensorValue::zeros({cell.hidden_dim}))};
        for (std::size_t k = 0; k < xs.size(); ++k) {
            std::size_t t = reverse ? xs.size() - 1 - k : k;
            st = lstm_step(tape, v, xs[t], st);
            states[t] = st.h;
        }
    }
    return states;
}

// Position t holds [forward_t, backward_t].
inline SequenceEncoding bi_encode(ad::Tape& tape, ParameterStore& store,
                                  const RecurrentCellParams& fwd, const RecurrentCellParams& bwd,
                                  const std::vector<ad::Var>& xs) {
    if (xs.empty()) throw error("bi_encode: empty sequence");
    auto f = encode_direction(tape, store, fwd, xs, false);
    auto b = encode_direction(tape, store, bwd, xs, true);
    SequenceEncoding enc;
    enc.states.reserve(xs.size());
    for (std::size_t t = 0; t < xs.size(); ++t) enc.states.push_back(ad::concat(f[t], b[t]));
    enc.final_forward = f.back();
    enc.final_backward = b.front();
    return enc;
}

// [final forward state, backward state at the first position]
inline ad::Var encode_question(ad::Tape& tape, ParameterStore& store,
                               const RecurrentCellParams& fwd, const RecurrentCellParams& bwd,
                               const std::vector<ad::Var>& xs) {
    if (xs.empty()) throw error("encode_question: empty question");
    auto f = encode_direction(tape, store, fwd, xs, false);
    auto b = encode_direction(tape, store, bwd, xs, true);
    return ad::concat(f.back(), b.front());
}

} // namespace clozelab
