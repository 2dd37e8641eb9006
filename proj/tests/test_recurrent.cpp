#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "clozelab/recurrent.hpp"
#include "clozelab/gradcheck.hpp"

#include "scalar_rnn_oracle.hpp"

#include <cstring>

using namespace clozelab;
using ad::Tape;
using ad::Var;

namespace {

void fill_random(ParameterStore& store, std::uint64_t seed) {
    Rng rng(seed);
    for (auto& [name, e] : store)
        for (double& v : e.value.data) v = rng.uniform(-0.8, 0.8);
}

oracle::Mat as_mat(const TensorValue& t) {
    oracle::Mat m(t.rows(), oracle::Vec(t.cols()));
    for (int i = 0; i < t.rows(); ++i)
        for (int j = 0; j < t.cols(); ++j) m[i][j] = t.at(i, j);
    return m;
}

Var vec_const(Tape& tape, std::vector<double> v) {
    return ad::constant(tape, TensorValue::vec(std::move(v)));
}

} // namespace

TEST_CASE("GRU with zero weights halves the previous state") {
    ParameterStore store;
    auto cell = add_cell(store, CellKind::GRU, "cell", 2, 3);
    Tape tape;
    Var h = vec_const(tape, {1.0, -2.0, 0.5});
    Var x = vec_const(tape, {0.3, 0.7});
    Var out = gru_step(tape, store, cell, x, h);
    CHECK(out.value().data[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(out.value().data[1] == doctest::Approx(-1.0).epsilon(1e-15));
    CHECK(out.value().data[2] == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("GRU zero input and state is a fixed point") {
    ParameterStore store;
    auto cell = add_cell(store, CellKind::GRU, "cell", 2, 2);
    Tape tape;
    Var out = gru_step(tape, store, cell, vec_const(tape, {0.0, 0.0}), vec_const(tape, {0.0, 0.0}));
    for (double v : out.value().data) CHECK(v == 0.0);
}

TEST_CASE("GRU matches the scalar reference on a random cell") {
    ParameterStore store;
    auto cell = add_cell(store, CellKind::GRU, "cell", 2, 2);
    fill_random(store, 91);

    oracle::GruWeights w;
    w.Wz = as_mat(store.value("cell.W_z"));
    w.Wr = as_mat(store.value("cell.W_r"));
    w.Wh = as_mat(store.value("cell.W_h"));
    w.Uz = as_mat(store.value("cell.U_z"));
    w.Ur = as_mat(store.value("cell.U_r"));
    w.Uh = as_mat(store.value("cell.U_h"));
    w.bz = store.value("cell.b_z").data;
    w.br = store.value("cell.b_r").data;
    w.bh = store.value("cell.b_h").data;

    oracle::Vec x{0.4, -0.9}, h{0.2, 0.6};
    auto expect = oracle::gru_step(w, x, h);

    Tape tape;
    Var out = gru_step(tape, store, cell, vec_const(tape, x), vec_const(tape, h));
    for (std::size_t i = 0; i < expect.size(); ++i)
        CHECK(std::abs(out.value().data[i] - expect[i]) < 1e-12);
}

TEST_CASE("GRU rejects dimension mismatches") {
    ParameterStore store;
    auto cell = add_cell(store, CellKind::GRU, "cell", 2, 3);
    Tape tape;
    CHECK_THROWS_AS(gru_step(tape, store, cell, vec_const(tape, {1.0}), vec_const(tape, {0, 0, 0})),
                    error);
}

TEST_CASE("LSTM with zero weights: gates at one half") {
    ParameterStore store;
    auto cell = add_cell(store, CellKind::LSTM, "cell", 2, 2);
    Tape tape;
    LstmState prev{vec_const(tape, {0.0, 0.0}), vec_const(tape, {0.8, -0.4})};
    auto out = lstm_step(tape, store, cell, vec_const(tape, {0.1, 0.2}), prev);
    for (int i = 0; i < 2; ++i) {
        double c = prev.c.value().data[i];
        CHECK(out.c.value().data[i] == doctest::Approx(0.5 * c).epsilon(1e-15));
        CHECK(out.h.value().data[i] == doctest::Approx(0.5 * std::tanh(0.5 * c)).epsilon(1e-15));
    }
}

TEST_CASE("LSTM zero state and input stays zero") {
    ParameterStore store;
    auto cell = add_cell(store, CellKind::LSTM, "cell", 1, 2);
    Tape tape;
    LstmState prev{vec_const(tape, {0.0, 0.0}), vec_const(tape, {0.0, 0.0})};
    auto out = lstm_step(tape, store, cell, vec_const(tape, {0.0}), prev);
    for (double v : out.h.value().data) CHECK(v == 0.0);
    for (double v : out.c.value().data) CHECK(v == 0.0);
}

TEST_CASE("LSTM matches the scalar reference on a random cell") {
    ParameterStore store;
    auto cell = add_cell(store, CellKind::LSTM, "cell", 3, 3);
    fill_random(store, 17);

    oracle::LstmWeights w;
    w.Wi = as_mat(store.value("cell.W_i"));
    w.Wf = as_mat(store.value("cell.W_f"));
    w.Wo = as_mat(store.value("cell.W_o"));
    w.Wg = as_mat(store.value("cell.W_g"));
    w.Ui = as_mat(store.value("cell.U_i"));
    w.Uf = as_mat(store.value("cell.U_f"));
    w.Uo = as_mat(store.value("cell.U_o"));
    w.Ug = as_mat(store.value("cell.U_g"));
    w.bi = store.value("cell.b_i").data;
    w.bf = store.value("cell.b_f").data;
    w.bo = store.value("cell.b_o").data;
    w.bg = store.value("cell.b_g").data;

    oracle::Vec x{0.3, -0.5, 0.7}, h{0.1, 0.2, -0.3}, c{0.4, -0.6, 0.2};
    auto expect = oracle::lstm_step(w, x, h, c);

    Tape tape;
    LstmState prev{vec_const(tape, h), vec_const(tape, c)};
    auto out = lstm_step(tape, store, cell, vec_const(tape, x), prev);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(std::abs(out.h.value().data[i] - expect.h[i]) < 1e-12);
        CHECK(std::abs(out.c.value().data[i] - expect.c[i]) < 1e-12);
    }
}

TEST_CASE("bi_encode output shape and alignment") {
    ParameterStore store;
    auto fwd = add_cell(store, CellKind::GRU, "fwd", 2, 3);
    auto bwd = add_cell(store, CellKind::GRU, "bwd", 2, 3);
    fill_random(store, 3);
    Tape tape;
    std::vector<Var> xs;
    for (int t = 0; t < 4; ++t) xs.push_back(vec_const(tape, {0.1 * t, -0.2 * t}));
    auto enc = bi_encode(tape, store, fwd, bwd, xs);
    REQUIRE(enc.states.size() == 4);
    for (auto& s : enc.states) CHECK(s.value().dim() == 6);
    // the concatenation halves are exactly the per-direction encoders
    auto f = encode_direction(tape, store, fwd, xs, false);
    auto b = encode_direction(tape, store, bwd, xs, true);
    for (int t = 0; t < 4; ++t)
        for (int j = 0; j < 3; ++j) {
            CHECK(enc.states[t].value().data[j] == f[t].value().data[j]);
            CHECK(enc.states[t].value().data[3 + j] == b[t].value().data[j]);
        }
}

TEST_CASE("palindrome with tied directions mirrors the encoding") {
    ParameterStore store;
    auto cell = add_cell(store, CellKind::GRU, "cell", 2, 3);
    fill_random(store, 29);
    Tape tape;
    std::vector<std::vector<double>> tokens = {{0.5, -0.1}, {0.9, 0.4}, {0.5, -0.1}};
    std::vector<Var> xs;
    for (auto& t : tokens) xs.push_back(vec_const(tape, t));
    // same cell parameters for both directions
    auto enc = bi_encode(tape, store, cell, cell, xs);
    const int T = 3, H = 3;
    for (int t = 0; t < T; ++t)
        for (int j = 0; j < H; ++j) {
            double fwd_t = enc.states[t].value().data[j];
            double bwd_mirror = enc.states[T - 1 - t].value().data[H + j];
            CHECK(fwd_t == doctest::Approx(bwd_mirror).epsilon(1e-12));
        }
}

TEST_CASE("single token: tied directions produce equal halves") {
    ParameterStore store;
    auto cell = add_cell(store, CellKind::LSTM, "cell", 2, 3);
    fill_random(store, 5);
    Tape tape;
    std::vector<Var> xs{vec_const(tape, {0.2, 0.3})};
    auto enc = bi_encode(tape, store, cell, cell, xs);
    for (int j = 0; j < 3; ++j)
        CHECK(enc.states[0].value().data[j] == enc.states[0].value().data[3 + j]);
}

TEST_CASE("empty sequences rejected") {
    ParameterStore store;
    auto fwd = add_cell(store, CellKind::GRU, "fwd", 2, 3);
    auto bwd = add_cell(store, CellKind::GRU, "bwd", 2, 3);
    Tape tape;
    std::vector<Var> empty;
    CHECK_THROWS_AS(bi_encode(tape, store, fwd, bwd, empty), error);
    CHECK_THROWS_AS(encode_question(tape, store, fwd, bwd, empty), error);
}

TEST_CASE("encode_question concatenates final forward and first backward states") {
    ParameterStore store;
    auto fwd = add_cell(store, CellKind::LSTM, "fwd", 2, 3);
    auto bwd = add_cell(store, CellKind::LSTM, "bwd", 2, 3);
    fill_random(store, 47);
    Tape tape;
    std::vector<Var> xs;
    for (int t = 0; t < 3; ++t) xs.push_back(vec_const(tape, {0.4 - 0.3 * t, 0.2 * t}));

    Var hq = encode_question(tape, store, fwd, bwd, xs);
    REQUIRE(hq.value().dim() == 6);

    // manual unroll over both directions
    auto f = encode_direction(tape, store, fwd, xs, false);
    auto b = encode_direction(tape, store, bwd, xs, true);
    for (int j = 0; j < 3; ++j) {
        CHECK(hq.value().data[j] == f[2].value().data[j]);
        CHECK(hq.value().data[3 + j] == b[0].value().data[j]);
    }

    // length-1 question: both halves see exactly one step
    std::vector<Var> one{vec_const(tape, {0.1, 0.2})};
    Var hq1 = encode_question(tape, store, fwd, bwd, one);
    auto f1 = encode_direction(tape, store, fwd, one, false);
    auto b1 = encode_direction(tape, store, bwd, one, true);
    for (int j = 0; j < 3; ++j) {
        CHECK(hq1.value().data[j] == f1[0].value().data[j]);
        CHECK(hq1.value().data[3 + j] == b1[0].value().data[j]);
    }
}

TEST_CASE("orthogonal initialization") {
    Rng rng(712);
    SUBCASE("tall block has orthonormal columns") {
        TensorValue Q = random_orthogonal(6, 4, rng);
        for (int a = 0; a < 4; ++a)
            for (int b = 0; b < 4; ++b) {
                double s = 0.0;
                for (int i = 0; i < 6; ++i) s += Q.at(i, a) * Q.at(i, b);
                CHECK(std::abs(s - (a == b ? 1.0 : 0.0)) < 1e-10);
            }
    }
    SUBCASE("wide block has orthonormal rows") {
        TensorValue Q = random_orthogonal(3, 5, rng);
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) {
                double s = 0.0;
                for (int j = 0; j < 5; ++j) s += Q.at(a, j) * Q.at(b, j);
                CHECK(std::abs(s - (a == b ? 1.0 : 0.0)) < 1e-10);
            }
    }
}

TEST_CASE("cell initialization scheme") {
    ParameterStore store;
    auto cell = add_cell(store, CellKind::GRU, "cell", 3, 3);
    Rng rng(9);
    init_cell(store, cell, rng);

    // identity hidden-to-hidden passes h through unscaled in the preactivation
    const TensorValue& U = store.value("cell.U_z");
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) CHECK(U.at(i, j) == (i == j ? 1.0 : 0.0));
    for (double b : store.value("cell.b_z").data) CHECK(b == 0.0);

    const TensorValue& W = store.value("cell.W_z");
    for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) {
            double s = 0.0;
            for (int i = 0; i < 3; ++i) s += W.at(i, a) * W.at(i, b);
            CHECK(std::abs(s - (a == b ? 1.0 : 0.0)) < 1e-10);
        }

    SUBCASE("same seed reproduces bit-identical parameters") {
        ParameterStore s1, s2;
        auto c1 = add_cell(s1, CellKind::LSTM, "c", 2, 4);
        auto c2 = add_cell(s2, CellKind::LSTM, "c", 2, 4);
        Rng r1(33), r2(33);
        init_cell(s1, c1, r1);
        init_cell(s2, c2, r2);
        for (auto it1 = s1.begin(), it2 = s2.begin(); it1 != s1.end(); ++it1, ++it2)
            CHECK(std::memcmp(it1->second.value.data.data(), it2->second.value.data.data(),
                              it1->second.value.data.size() * sizeof(double)) == 0);
    }

    SUBCASE("identity init on a non-square block is rejected") {
        ParameterStore bad;
        RecurrentCellParams fake{CellKind::GRU, 2, 3, "bad"};
        for (const auto& g : gate_names(CellKind::GRU)) {
            bad.add(fake.W(g), TensorValue::zeros({3, 2}));
            bad.add(fake.U(g), TensorValue::zeros({3, 2})); // wrong on purpose
            bad.add(fake.b(g), TensorValue::zeros({3}));
        }
        Rng r(1);
        CHECK_THROWS_AS(init_cell(bad, fake, r), error);
    }
}

TEST_CASE("embedding init range and determinism") {
    TensorValue t1 = TensorValue::zeros({20, 5});
    TensorValue t2 = TensorValue::zeros({20, 5});
    Rng r1(77), r2(77);
    init_embedding(t1, r1);
    init_embedding(t2, r2);
    CHECK(t1.data == t2.data);
    for (double v : t1.data) {
        CHECK(v >= -0.1);
        CHECK(v <= 0.1);
    }
}

TEST_CASE("gradient check through an unrolled length-6 biGRU") {
    ParameterStore store;
    auto fwd = add_cell(store, CellKind::GRU, "fwd", 2, 3);
    auto bwd = add_cell(store, CellKind::GRU, "bwd", 2, 3);
    store.add("readout", TensorValue::zeros({6}));
    fill_random(store, 101);

    std::vector<std::vector<double>> inputs;
    Rng rng(55);
    for (int t = 0; t < 6; ++t) inputs.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1)});

    auto build = [&](Tape& t) {
        std::vector<Var> xs;
        for (auto& x : inputs) xs.push_back(ad::constant(t, TensorValue::vec(x)));
        auto enc = bi_encode(t, store, fwd, bwd, xs);
        Var acc = ad::dot(ad::param(t, store, "readout"), enc.states[0]);
        for (std::size_t i = 1; i < enc.states.size(); ++i)
            acc = ad::add(acc, ad::dot(ad::param(t, store, "readout"), ad::tanh(enc.states[i])));
        return acc;
    };
    CHECK(gradient_check(build, store, 1e-5) < 1e-4);
}

TEST_CASE("gradient check through an unrolled length-6 biLSTM") {
    ParameterStore store;
    auto fwd = add_cell(store, CellKind::LSTM, "fwd", 2, 2);
    auto bwd = add_cell(store, CellKind::LSTM, "bwd", 2, 2);
    store.add("readout", TensorValue::zeros({4}));
    fill_random(store, 59);

    std::vector<std::vector<double>> inputs;
    Rng rng(60);
    for (int t = 0; t < 6; ++t) inputs.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1)});

    auto build = [&](Tape& t) {
        std::vector<Var> xs;
        for (auto& x : inputs) xs.push_back(ad::constant(t, TensorValue::vec(x)));
        Var hq = encode_question(t, store, fwd, bwd, xs);
        return ad::dot(ad::param(t, store, "readout"), hq);
    };
    CHECK(gradient_check(build, store, 1e-5) < 1e-4);
}
