// Representation probes for trained readers: predication statistics over
// reference positions, output-embedding Gram matrices, attention and
// candidate-emission heat maps, an exact algebraic oracle for the
// direct-sum hidden-state decomposition, designed two-sparse constant
// embeddings, and a vectorial entailment test.

#pragma once

#include <fstream>
#include <iomanip>

#include "clozelab/readers.hpp"

namespace clozelab {

// ---- streaming mean/variance ----

struct StatRow {
    std::size_t count = 0;
    double mean = 0.0;
    double variance = 0.0; // population variance

    json to_json() const { return json{{"count", count}, {"mean", mean}, {"variance", variance}}; }
};

class Welford {
public:
    void add(double x) {
        ++n_;
        double d = x - mean_;
        mean_ += d / static_cast<double>(n_);
        m2_ += d * (x - mean_);
    }
    StatRow row() const {
        return {n_, mean_, n_ ? m2_ / static_cast<double>(n_) : 0.0};
    }

private:
    std::size_t n_ = 0;
    double mean_ = 0.0;
    double m2_ = 0.0;
};

// ---- predication statistics ----

struct PredicationStats {
    StatRow in_reference;          // e_o(a)^T h_t, t in R(a,p)
    StatRow out_of_reference;      // e_o(a)^T h_t, t not in R(a,p)
    StatRow adjacent;              // e_o(a)^T h_{t+-1}, t in R(a,p)
    StatRow question_state_cosine; // cos(h_q, h_t) at candidate positions
    StatRow question_output_cosine;// cos(h_q, e_o(a)) over candidates
    // measured, never asserted: cos(mean of h_t over R(a,p), e_o(a))
    StatRow reference_mean_state_cosine;

    json to_json() const {
        return json{{"in_reference", in_reference.to_json()},
                    {"out_of_reference", out_of_reference.to_json()},
                    {"adjacent", adjacent.to_json()},
                    {"question_state_cosine", question_state_cosine.to_json()},
                    {"question_output_cosine", question_output_cosine.to_json()},
                    {"reference_mean_state_cosine", reference_mean_state_cosine.to_json()},
                    // full-scale CNN-dev context from the original study;
                    // reported for orientation, never a pass/fail target
                    {"cnn_dev_reference",
                     json{{"in_reference_mean", 10.66},
                          {"in_reference_variance", 2.26},
                          {"out_of_reference_mean", -0.57},
                          {"adjacent_mean", 2.32},
                          {"question_state_cosine_mean", 0.22},
                          {"question_output_cosine_mean", -0.03}}}};
    }

    std::string to_text() const {
        std::ostringstream os;
        os << std::left << std::setw(34) << "statistic" << std::right << std::setw(10) << "samples"
           << std::setw(14) << "mean" << std::setw(14) << "variance" << "\n";
        auto line = [&](const char* name, const StatRow& r) {
            os << std::left << std::setw(34) << name << std::right << std::setw(10) << r.count
               << std::setw(14) << std::setprecision(4) << std::fixed << r.mean << std::setw(14)
               << r.variance << "\n";
            os.unsetf(std::ios::fixed);
        };
        line("e_o(a).h_t, t in R(a,p)", in_reference);
        line("e_o(a).h_t, t not in R(a,p)", out_of_reference);
        line("e_o(a).h_(t+-1), t in R(a,p)", adjacent);
        line("cos(h_q, h_t) at entity pos", question_state_cosine);
        line("cos(h_q, e_o(a))", question_output_cosine);
        line("cos(mean R(a,p) state, e_o(a))", reference_mean_state_cosine);
        return os.str();
    }
};

namespace probe_detail {

inline TensorValue output_row(const Reader& reader, int token_id) {
    const TensorValue& table = reader.params().value("output_embedding");
    TensorValue row = TensorValue::zeros({table.cols()});
    for (int j = 0; j < table.cols(); ++j) row.data[static_cast<std::size_t>(j)] = table.at(token_id, j);
    return row;
}

inline void require_aggregation(const Reader& reader, const char* what) {
    if (!is_aggregation(reader.config().variant))
        throw data_error(std::string(what) +
                         " needs an aggregation reader with output embeddings, got " +
                         to_string(reader.config().variant));
}

} // namespace probe_detail

inline PredicationStats predication_stats(Reader& reader, const Corpus& corpus) {
    probe_detail::require_aggregation(reader, "predication statistics");
    Welford in_ref, out_ref, adj, qh, qe, mean_state;
    for (const auto& inst : corpus) {
        auto res = reader.predict(inst);
        const auto& h = res.trace.passage_states;
        const auto& h_q = res.trace.question_vector;
        const int T = static_cast<int>(h.size());

        std::vector<char> is_ref_pos(static_cast<std::size_t>(T), 0);
        for (std::size_t a = 0; a < inst.candidates.size(); ++a) {
            TensorValue e_o = probe_detail::output_row(
                reader, reader.vocab().id(inst.candidates[a]));
            std::vector<char> in_R(static_cast<std::size_t>(T), 0);
            for (int pos : inst.references[a]) {
                in_R[static_cast<std::size_t>(pos)] = 1;
                is_ref_pos[static_cast<std::size_t>(pos)] = 1;
            }
            for (int t = 0; t < T; ++t) {
                double prod = dot(e_o.data, h[static_cast<std::size_t>(t)].data);
                (in_R[static_cast<std::size_t>(t)] ? in_ref : out_ref).add(prod);
            }
            for (int pos : inst.references[a])
                for (int d : {-1, 1}) {
                    int t = pos + d;
                    if (t >= 0 && t < T)
                        adj.add(dot(e_o.data, h[static_cast<std::size_t>(t)].data));
                }
            qe.add(cosine(h_q, e_o));
            if (!inst.references[a].empty()) {
                TensorValue avg = TensorValue::zeros(h[0].shape);
                for (int pos : inst.references[a])
                    for (std::size_t i = 0; i < avg.data.size(); ++i)
                        avg.data[i] += h[static_cast<std::size_t>(pos)].data[i];
                for (double& v : avg.data) v /= static_cast<double>(inst.references[a].size());
                mean_state.add(cosine(avg, e_o));
            }
        }
        for (int t = 0; t < T; ++t)
            if (is_ref_pos[static_cast<std::size_t>(t)]) qh.add(cosine(h_q, h[static_cast<std::size_t>(t)]));
    }
    return {in_ref.row(), out_ref.row(), adj.row(), qh.row(), qe.row(), mean_state.row()};
}

// ---- Gram matrix of output embeddings ----

struct GramMatrix {
    std::vector<std::string> labels;
    TensorValue matrix; // labels.size() x labels.size()
    StatRow diagonal;
    StatRow off_diagonal;
};

inline GramMatrix gram_from_rows(const std::vector<std::string>& labels,
                                 const std::vector<TensorValue>& rows) {
    const int n = static_cast<int>(rows.size());
    GramMatrix g;
    g.labels = labels;
    g.matrix = TensorValue::zeros({n, n});
    Welford diag, off;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double v = dot(rows[static_cast<std::size_t>(i)].data, rows[static_cast<std::size_t>(j)].data);
            g.matrix.at(i, j) = v;
            (i == j ? diag : off).add(v);
        }
    g.diagonal = diag.row();
    g.off_diagonal = off.row();
    return g;
}

// Gram over the entity-identifier output embeddings (the candidate
// universe of an anonymized corpus).
inline GramMatrix output_gram(const Reader& reader) {
    probe_detail::require_aggregation(reader, "output gram");
    const auto& ids = reader.vocab().entity_ids();
    if (ids.empty())
        throw data_error("output gram: vocabulary has no entity identifiers");
    std::vector<std::string> labels;
    std::vector<TensorValue> rows;
    for (int id : ids) {
        labels.push_back(reader.vocab().token(id));
        rows.push_back(probe_detail::output_row(reader, id));
    }
    return gram_from_rows(labels, rows);
}

// ---- heat maps ----

struct HeatMap {
    std::string label;            // "alpha" or the candidate token
    std::vector<double> row;      // probability over passage positions
};

struct HeatMapSet {
    std::vector<std::string> tokens;
    std::vector<HeatMap> maps;
};

inline std::vector<double> softmax_values(const std::vector<double>& scores) {
    double mx = *std::max_element(scores.begin(), scores.end());
    std::vector<double> out(scores.size());
    double z = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        out[i] = std::exp(scores[i] - mx);
        z += out[i];
    }
    for (double& v : out) v /= z;
    return out;
}

// One attention map per instance; aggregation readers add one
// candidate-emission map softmax_t(e_o(a)^T h_t) per candidate.
inline HeatMapSet heatmaps(Reader& reader, const ClozeInstance& inst) {
    auto res = reader.predict(inst);
    HeatMapSet set;
    set.tokens = inst.passage;
    HeatMap alpha;
    alpha.label = "alpha";
    alpha.row.assign(res.trace.attention.data.begin(),
                     res.trace.attention.data.begin() + static_cast<long>(inst.passage.size()));
    set.maps.push_back(std::move(alpha));
    if (is_aggregation(reader.config().variant)) {
        for (const auto& cand : inst.candidates) {
            TensorValue e_o = probe_detail::output_row(reader, reader.vocab().id(cand));
            std::vector<double> scores;
            scores.reserve(res.trace.passage_states.size());
            for (const auto& h_t : res.trace.passage_states) scores.push_back(dot(e_o.data, h_t.data));
            set.maps.push_back({cand, softmax_values(scores)});
        }
    }
    return set;
}

// fraction of attention mass on candidate reference positions, averaged
// over the corpus
inline double attention_reference_mass(Reader& reader, const Corpus& corpus) {
    Welford w;
    for (const auto& inst : corpus) {
        auto res = reader.predict(inst);
        double mass = 0.0;
        for (const auto& refs : inst.references)
            for (int pos : refs) mass += res.trace.attention.data[static_cast<std::size_t>(pos)];
        w.add(mass);
    }
    return w.row().mean;
}

// ---- CSV + plot script emission ----

inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

inline void write_heatmap_csv(const HeatMapSet& set, const std::string& path,
                              const json& config_echo = {}) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw data_error("cannot open for writing: " + path);
    out << std::setprecision(17);
    if (!config_echo.is_null()) out << "# config " << config_echo.dump() << "\n";
    out << "label";
    for (const auto& t : set.tokens) out << "," << csv_escape(t);
    out << "\n";
    for (const auto& m : set.maps) {
        out << csv_escape(m.label);
        for (double v : m.row) out << "," << v;
        out << "\n";
    }
}

inline void write_gram_csv(const GramMatrix& g, const std::string& path,
                           const json& config_echo = {}) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw data_error("cannot open for writing: " + path);
    out << std::setprecision(17);
    if (!config_echo.is_null()) out << "# config " << config_echo.dump() << "\n";
    out << "label";
    for (const auto& l : g.labels) out << "," << csv_escape(l);
    out << "\n";
    for (int i = 0; i < g.matrix.rows(); ++i) {
        out << csv_escape(g.labels[static_cast<std::size_t>(i)]);
        for (int j = 0; j < g.matrix.cols(); ++j) out << "," << g.matrix.at(i, j);
        out << "\n";
    }
}

// matplotlib script consuming the CSV grids written above
inline void write_plot_script(const std::string& path) {
    static const char* kScript = R"PY(#!/usr/bin/env python3
"""Render a labeled CSV grid (heat map or Gram matrix) as a PNG.

Usage: plot_grid.py input.csv [output.png]
Lines starting with '#' carry the generating config and are skipped.
"""
import csv
import sys

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt


def main():
    if len(sys.argv) < 2:
        sys.exit(__doc__)
    src = sys.argv[1]
    dst = sys.argv[2] if len(sys.argv) > 2 else src.rsplit(".", 1)[0] + ".png"
    with open(src, newline="") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    columns = rows[0][1:]
    labels = [r[0] for r in rows[1:]]
    grid = [[float(v) for v in r[1:]] for r in rows[1:]]

    fig, ax = plt.subplots(figsize=(max(6, 0.45 * len(columns)), max(2.5, 0.45 * len(labels))))
    im = ax.imshow(grid, aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(columns)), columns, rotation=90, fontsize=7)
    ax.set_yticks(range(len(labels)), labels, fontsize=8)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(dst, dpi=150)
    print(dst)


if __name__ == "__main__":
    main()
)PY";
    std::ofstream out(path, std::ios::binary);
    if (!out) throw data_error("cannot open for writing: " + path);
    out << kScript;
}

// ---- direct-sum oracle ----
//
// Constructs hidden states that satisfy the direct-sum decomposition
// exactly: h_t = Q [s(Phi_t); s(c_t)], h_q = Q [s(Psi); 0],
// e_o(a) = Q [0; s(a)] with an orthonormal entity basis and an optional
// random rotation Q of the whole space. Under this construction the
// aggregation argmax and the explicit-reference argmax coincide, and
// e_o(a)^T h_t is 1 on reference positions and 0 elsewhere.

struct DirectSumSpec {
    int statement_dim = 8;
    int num_entities = 5; // orthonormal basis vectors, dimension num_entities
    int passage_len = 12;
    bool rotate = false;
    std::uint64_t rotation_seed = 7;
    double noise_sigma = 0.0;

    int hidden_dim() const { return statement_dim + num_entities; }
};

struct DirectSumReport {
    int trials = 0;
    double agreement_rate = 0.0;
    StatRow in_reference_product;  // measured constant c
    StatRow off_reference_product;
    double max_in_reference_abs_dev = 0.0; // max |product - 1| on references
    double max_off_reference_abs = 0.0;    // max |product| off references

    json to_json() const {
        return json{{"trials", trials},
                    {"agreement_rate", agreement_rate},
                    {"in_reference_product", in_reference_product.to_json()},
                    {"off_reference_product", off_reference_product.to_json()},
                    {"max_in_reference_abs_dev", max_in_reference_abs_dev},
                    {"max_off_reference_abs", max_off_reference_abs}};
    }
};

inline DirectSumReport direct_sum_oracle(const DirectSumSpec& spec, int trials,
                                         std::uint64_t seed) {
    if (trials < 1) throw data_error("direct-sum oracle: need at least one trial");
    if (spec.statement_dim < 1 || spec.num_entities < 2 || spec.passage_len < 1)
        throw data_error("direct-sum oracle: bad spec");
    const int ds = spec.statement_dim, m = spec.num_entities, H = spec.hidden_dim();

    // optional rotation of the whole hidden space
    TensorValue Q = TensorValue::identity(H);
    if (spec.rotate) {
        Rng rot(spec.rotation_seed);
        Q = random_orthogonal(H, H, rot);
    }
    auto apply_rot = [&](const std::vector<double>& v) {
        if (!spec.rotate) return v;
        std::vector<double> out(static_cast<std::size_t>(H), 0.0);
        for (int i = 0; i < H; ++i) {
            double s = 0.0;
            for (int j = 0; j < H; ++j) s += Q.at(i, j) * v[static_cast<std::size_t>(j)];
            out[static_cast<std::size_t>(i)] = s;
        }
        return out;
    };

    DirectSumReport report;
    report.trials = trials;
    Welford in_ref, off_ref;
    int agreements = 0;

    for (int trial = 0; trial < trials; ++trial) {
        Rng rng(split_seed(seed, "trial", static_cast<std::uint64_t>(trial)));
        const int T = spec.passage_len;

        std::vector<std::vector<double>> h(static_cast<std::size_t>(T));
        std::vector<int> entity_at(static_cast<std::size_t>(T));
        for (int t = 0; t < T; ++t) {
            std::vector<double> v(static_cast<std::size_t>(H), 0.0);
            for (int i = 0; i < ds; ++i) v[static_cast<std::size_t>(i)] = rng.gaussian();
            int c = static_cast<int>(rng.integer(static_cast<std::uint64_t>(m)));
            entity_at[static_cast<std::size_t>(t)] = c;
            v[static_cast<std::size_t>(ds + c)] = 1.0; // orthonormal entity basis
            if (spec.noise_sigma > 0.0)
                for (double& x : v) x += spec.noise_sigma * rng.gaussian();
            h[static_cast<std::size_t>(t)] = apply_rot(v);
        }
        std::vector<double> hq(static_cast<std::size_t>(H), 0.0);
        for (int i = 0; i < ds; ++i) hq[static_cast<std::size_t>(i)] = rng.gaussian();
        hq = apply_rot(hq);

        std::vector<std::vector<double>> e_o(static_cast<std::size_t>(m));
        for (int a = 0; a < m; ++a) {
            std::vector<double> v(static_cast<std::size_t>(H), 0.0);
            v[static_cast<std::size_t>(ds + a)] = 1.0;
            e_o[static_cast<std::size_t>(a)] = apply_rot(v);
        }

        std::vector<double> scores(static_cast<std::size_t>(T));
        for (int t = 0; t < T; ++t) scores[static_cast<std::size_t>(t)] = dot(h[static_cast<std::size_t>(t)], hq);
        auto alpha = softmax_values(scores);

        std::vector<double> o(static_cast<std::size_t>(H), 0.0);
        for (int t = 0; t < T; ++t)
            for (int i = 0; i < H; ++i)
                o[static_cast<std::size_t>(i)] += alpha[static_cast<std::size_t>(t)] * h[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)];

        std::vector<double> agg(static_cast<std::size_t>(m)), ref(static_cast<std::size_t>(m), 0.0);
        for (int a = 0; a < m; ++a) agg[static_cast<std::size_t>(a)] = dot(e_o[static_cast<std::size_t>(a)], o);
        for (int t = 0; t < T; ++t) ref[static_cast<std::size_t>(entity_at[static_cast<std::size_t>(t)])] += alpha[static_cast<std::size_t>(t)];

        if (argmax_lowest(agg) == argmax_lowest(ref)) ++agreements;

        for (int a = 0; a < m; ++a)
            for (int t = 0; t < T; ++t) {
                double prod = dot(e_o[static_cast<std::size_t>(a)], h[static_cast<std::size_t>(t)]);
                if (entity_at[static_cast<std::size_t>(t)] == a) {
                    in_ref.add(prod);
                    report.max_in_reference_abs_dev =
                        std::max(report.max_in_reference_abs_dev, std::abs(prod - 1.0));
                } else {
                    off_ref.add(prod);
                    report.max_off_reference_abs =
                        std::max(report.max_off_reference_abs, std::abs(prod));
                }
            }
    }
    report.agreement_rate = static_cast<double>(agreements) / static_cast<double>(trials);
    report.in_reference_product = in_ref.row();
    report.off_reference_product = off_ref.row();
    return report;
}

// ---- two-sparse constant embeddings ----

// All vectors with exactly two nonzero coordinates, each +-1/sqrt(2):
// 2d(d-1) unit vectors in dimension d.
inline std::vector<TensorValue> two_sparse_embeddings(int d) {
    if (d < 2) throw data_error("two-sparse embeddings need dimension >= 2");
    const double r = 1.0 / std::sqrt(2.0);
    std::vector<TensorValue> out;
    out.reserve(static_cast<std::size_t>(2 * d * (d - 1)));
    for (int i = 0; i < d; ++i)
        for (int j = i + 1; j < d; ++j)
            for (int si : {+1, -1})
                for (int sj : {+1, -1}) {
                    TensorValue v = TensorValue::zeros({d});
                    v.data[static_cast<std::size_t>(i)] = si * r;
                    v.data[static_cast<std::size_t>(j)] = sj * r;
                    out.push_back(std::move(v));
                }
    return out;
}

// Phi[x] implies Psi[x] iff Phi . Psi >= ||Psi||_1
inline bool entailment_check(const TensorValue& phi, const TensorValue& psi) {
    if (phi.shape != psi.shape)
        throw data_error("entailment check: shape mismatch " + phi.shape_str() + " vs " +
                         psi.shape_str());
    double l1 = 0.0;
    for (double v : psi.data) l1 += std::abs(v);
    return dot(phi.data, psi.data) >= l1;
}

// ---- entity-subspace projection ----

struct SubspaceReport {
    int subspace_dim = 0;
    StatRow reference_projection;     // ||proj_E h_t|| at reference positions
    StatRow nonreference_projection;  // ||proj_E h_t|| elsewhere
    StatRow question_projection_ratio; // ||proj_E h_q|| / ||h_q||

    json to_json() const {
        return json{{"subspace_dim", subspace_dim},
                    {"reference_projection", reference_projection.to_json()},
                    {"nonreference_projection", nonreference_projection.to_json()},
                    {"question_projection_ratio", question_projection_ratio.to_json()}};
    }
};

// Estimate E as the orthonormalized span of the output embeddings and
// report projection norms of hidden states onto it.
inline SubspaceReport entity_subspace_projection(Reader& reader, const Corpus& corpus) {
    probe_detail::require_aggregation(reader, "entity subspace projection");
    std::vector<int> ids = reader.vocab().entity_ids();
    if (ids.empty()) {
        std::set<int> cand_ids;
        for (const auto& inst : corpus)
            for (const auto& c : inst.candidates) cand_ids.insert(reader.vocab().id(c));
        ids.assign(cand_ids.begin(), cand_ids.end());
    }
    std::vector<std::vector<double>> rows;
    for (int id : ids) rows.push_back(probe_detail::output_row(reader, id).data);
    auto basis = orthonormal_rows(std::move(rows));
    if (basis.empty())
        throw data_error("entity subspace projection: output embeddings are degenerate");

    auto proj_norm = [&](const std::vector<double>& v) {
        double sq = 0.0;
        for (const auto& b : basis) {
            double p = dot(b, v);
            sq += p * p;
        }
        return std::sqrt(sq);
    };

    SubspaceReport report;
    report.subspace_dim = static_cast<int>(basis.size());
    Welford ref, nonref, q;
    for (const auto& inst : corpus) {
        auto res = reader.predict(inst);
        std::vector<char> is_ref(res.trace.passage_states.size(), 0);
        for (const auto& refs : inst.references)
            for (int pos : refs) is_ref[static_cast<std::size_t>(pos)] = 1;
        for (std::size_t t = 0; t < res.trace.passage_states.size(); ++t)
            (is_ref[t] ? ref : nonref).add(proj_norm(res.trace.passage_states[t].data));
        double hq_norm = l2_norm(res.trace.question_vector.data);
        q.add(hq_norm < 1e-300 ? 0.0 : proj_norm(res.trace.question_vector.data) / hq_norm);
    }
    report.reference_projection = ref.row();
    report.nonreference_projection = nonref.row();
    report.question_projection_ratio = q.row();
    return report;
}

} // namespace clozelab
