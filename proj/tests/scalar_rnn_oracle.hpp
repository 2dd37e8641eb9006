// Test-only scalar (loop-over-coordinates) reference for the recurrent
// cells. Written independently of the tape ops so it can serve as an
// oracle: plain double loops, same gate conventions.

#pragma once

#include <cmath>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;
using Mat = std::vector<std::vector<double>>; // row major

inline double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Vec affine(const Mat& W, const Vec& x, const Mat& U, const Vec& h, const Vec& b) {
    Vec out(b.size(), 0.0);
    for (std::size_t i = 0; i < out.size(); ++i) {
        double s = b[i];
        for (std::size_t j = 0; j < x.size(); ++j) s += W[i][j] * x[j];
        for (std::size_t j = 0; j < h.size(); ++j) s += U[i][j] * h[j];
        out[i] = s;
    }
    return out;
}

struct GruWeights {
    Mat Wz, Wr, Wh, Uz, Ur, Uh;
    Vec bz, br, bh;
};

inline Vec gru_step(const GruWeights& w, const Vec& x, const Vec& h) {
    Vec z = affine(w.Wz, x, w.Uz, h, w.bz);
    Vec r = affine(w.Wr, x, w.Ur, h, w.br);
    Vec rh(h.size());
    for (std::size_t i = 0; i < h.size(); ++i) {
        z[i] = sig(z[i]);
        r[i] = sig(r[i]);
        rh[i] = r[i] * h[i];
    }
    Vec cand = affine(w.Wh, x, w.Uh, rh, w.bh);
    Vec out(h.size());
    for (std::size_t i = 0; i < h.size(); ++i)
        out[i] = (1.0 - z[i]) * h[i] + z[i] * std::tanh(cand[i]);
    return out;
}

struct LstmWeights {
    Mat Wi, Wf, Wo, Wg, Ui, Uf, Uo, Ug;
    Vec bi, bf, bo, bg;
};

struct LstmOut {
    Vec h, c;
};

inline LstmOut lstm_step(const LstmWeights& w, const Vec& x, const Vec& h, const Vec& c) {
    Vec i = affine(w.Wi, x, w.Ui, h, w.bi);
    Vec f = affine(w.Wf, x, w.Uf, h, w.bf);
    Vec o = affine(w.Wo, x, w.Uo, h, w.bo);
    Vec g = affine(w.Wg, x, w.Ug, h, w.bg);
    LstmOut out{Vec(h.size()), Vec(h.size())};
    for (std::size_t k = 0; k < h.size(); ++k) {
        out.c[k] = sig(f[k]) * c[k] + sig(i[k]) * std::tanh(g[k]);
        out.h[k] = sig(o[k]) * std::tanh(out.c[k]);
    }
    return out;
}

} // namespace oracle
