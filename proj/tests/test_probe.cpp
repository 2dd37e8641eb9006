#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "clozelab/probe.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

using namespace clozelab;

namespace {

Corpus tiny_anonymized_corpus(int size) {
    SyntheticConfig cfg;
    cfg.num_entities = 5;
    cfg.num_predicates = 2;
    cfg.passage_len = 3;
    cfg.num_candidates = 3;
    cfg.size = size;
    cfg.seed = 17;
    auto raw = generate_synthetic(cfg);
    Corpus anon;
    for (std::size_t i = 0; i < raw.size(); ++i)
        anon.push_back(anonymize(raw[i], split_seed(3, "anon", i), cfg.num_entities));
    return anon;
}

Reader tiny_stanford(const Corpus& corpus) {
    ReaderConfig cfg;
    cfg.variant = ReaderVariant::Stanford;
    cfg.embedding_dim = 4;
    cfg.hidden_dim = 5;
    cfg.anonymized = true;
    return Reader(cfg, Vocabulary::build(corpus), 99);
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

} // namespace

TEST_CASE("predication stats") {
    auto corpus = tiny_anonymized_corpus(8);
    auto reader = tiny_stanford(corpus);

    SUBCASE("zero output embeddings zero the inner-product rows exactly") {
        auto& table = reader.params().value("output_embedding");
        std::fill(table.data.begin(), table.data.end(), 0.0);
        auto stats = predication_stats(reader, corpus);
        CHECK(stats.in_reference.mean == 0.0);
        CHECK(stats.in_reference.variance == 0.0);
        CHECK(stats.out_of_reference.mean == 0.0);
        CHECK(stats.adjacent.mean == 0.0);
        // cosine against a zero vector is reported as zero
        CHECK(stats.question_output_cosine.mean == 0.0);
        CHECK(stats.in_reference.count > 0);
        CHECK(stats.out_of_reference.count > 0);
    }
    SUBCASE("sample counts match the reference structure") {
        auto stats = predication_stats(reader, corpus);
        std::size_t expect_in = 0, expect_total = 0, entity_positions = 0, cands = 0;
        for (const auto& inst : corpus) {
            std::set<int> refpos;
            for (const auto& refs : inst.references) {
                expect_in += refs.size();
                refpos.insert(refs.begin(), refs.end());
            }
            expect_total += inst.candidates.size() * inst.passage.size();
            entity_positions += refpos.size();
            cands += inst.candidates.size();
        }
        CHECK(stats.in_reference.count == expect_in);
        CHECK(stats.out_of_reference.count == expect_total - expect_in);
        CHECK(stats.question_state_cosine.count == entity_positions);
        CHECK(stats.question_output_cosine.count == cands);
    }
    SUBCASE("explicit-reference readers are rejected") {
        ReaderConfig cfg;
        cfg.variant = ReaderVariant::AttentionSum;
        cfg.embedding_dim = 4;
        cfg.hidden_dim = 5;
        Reader as(cfg, Vocabulary::build(corpus), 1);
        CHECK_THROWS_AS(predication_stats(as, corpus), data_error);
    }
    SUBCASE("repeated runs are bit-identical") {
        auto a = predication_stats(reader, corpus);
        auto b = predication_stats(reader, corpus);
        CHECK(std::memcmp(&a.in_reference.mean, &b.in_reference.mean, sizeof(double)) == 0);
        CHECK(std::memcmp(&a.question_state_cosine.variance, &b.question_state_cosine.variance,
                          sizeof(double)) == 0);
    }
}

TEST_CASE("gram matrix") {
    SUBCASE("orthogonal embeddings scaled by sqrt(c) give diagonal c") {
        Rng rng(4);
        TensorValue Q = random_orthogonal(6, 6, rng);
        const double c = 7.3;
        std::vector<TensorValue> rows;
        std::vector<std::string> labels;
        for (int i = 0; i < 6; ++i) {
            TensorValue r = TensorValue::zeros({6});
            for (int j = 0; j < 6; ++j) r.data[static_cast<std::size_t>(j)] = std::sqrt(c) * Q.at(i, j);
            rows.push_back(std::move(r));
            labels.push_back("e" + std::to_string(i));
        }
        auto g = gram_from_rows(labels, rows);
        CHECK(g.diagonal.mean == doctest::Approx(c).epsilon(1e-9));
        CHECK(std::abs(g.off_diagonal.mean) < 1e-9);
        for (int i = 0; i < 6; ++i)
            for (int j = 0; j < 6; ++j)
                CHECK(std::abs(g.matrix.at(i, j) - g.matrix.at(j, i)) < 1e-12); // symmetry
    }
    SUBCASE("output gram requires entity identifiers") {
        SyntheticConfig cfg;
        cfg.size = 3;
        cfg.seed = 1;
        auto raw = generate_synthetic(cfg); // raw corpus, no @entity tokens
        ReaderConfig rc;
        rc.variant = ReaderVariant::Stanford;
        rc.embedding_dim = 4;
        rc.hidden_dim = 4;
        Reader reader(rc, Vocabulary::build(raw), 3);
        CHECK_THROWS_AS(output_gram(reader), data_error);
    }
    SUBCASE("output gram over an anonymized vocabulary") {
        auto corpus = tiny_anonymized_corpus(5);
        auto reader = tiny_stanford(corpus);
        auto g = output_gram(reader);
        CHECK(g.labels.size() == reader.vocab().entity_ids().size());
        CHECK(g.matrix.rows() == static_cast<int>(g.labels.size()));
        CHECK(g.diagonal.count == g.labels.size());
    }
}

TEST_CASE("heat maps") {
    auto corpus = tiny_anonymized_corpus(4);
    auto reader = tiny_stanford(corpus);

    SUBCASE("single-token passage gives the [1.0] map") {
        ClozeInstance inst;
        inst.passage = {"@entity0"};
        inst.question = {kBlankToken, "x"};
        inst.candidates = {"@entity0"};
        inst.answer = 0;
        recompute_references(inst);
        Reader r(tiny_stanford(Corpus{inst}));
        auto set = heatmaps(r, inst);
        for (const auto& m : set.maps) {
            REQUIRE(m.row.size() == 1);
            CHECK(m.row[0] == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
    SUBCASE("every row is a probability vector") {
        for (const auto& inst : corpus) {
            auto set = heatmaps(reader, inst);
            CHECK(set.maps.size() == 1 + inst.candidates.size());
            for (const auto& m : set.maps) {
                double s = 0.0;
                for (double v : m.row) s += v;
                CHECK(std::abs(s - 1.0) <= 1e-9);
            }
        }
    }
    SUBCASE("csv emission") {
        auto set = heatmaps(reader, corpus[0]);
        auto path = temp_path("clozelab_heatmap.csv");
        write_heatmap_csv(set, path, json{{"seed", 1}});
        std::ifstream in(path);
        std::string line;
        std::getline(in, line);
        CHECK(line.rfind("# config", 0) == 0);
        std::getline(in, line);
        CHECK(line.rfind("label,", 0) == 0);
        int rows = 0;
        while (std::getline(in, line))
            if (!line.empty()) ++rows;
        CHECK(rows == static_cast<int>(set.maps.size()));
        std::remove(path.c_str());
    }
    SUBCASE("attention mass over references lies in [0,1]") {
        double mass = attention_reference_mass(reader, corpus);
        CHECK(mass >= 0.0);
        CHECK(mass <= 1.0);
    }
}

TEST_CASE("direct-sum oracle at zero noise") {
    DirectSumSpec spec;
    spec.statement_dim = 6;
    spec.num_entities = 5;
    spec.passage_len = 10;

    SUBCASE("identity rotation: construction satisfies the decomposition exactly") {
        auto report = direct_sum_oracle(spec, 200, 11);
        CHECK(report.agreement_rate == 1.0);
        CHECK(report.max_in_reference_abs_dev == 0.0); // exact with the standard basis
        CHECK(report.max_off_reference_abs == 0.0);
        CHECK(report.in_reference_product.mean == 1.0);
        CHECK(report.off_reference_product.mean == 0.0);
    }
    SUBCASE("random rotation leaves agreement and products unchanged") {
        spec.rotate = true;
        for (std::uint64_t rs : {3ull, 4ull, 5ull}) {
            spec.rotation_seed = rs;
            auto report = direct_sum_oracle(spec, 200, 11);
            CHECK(report.agreement_rate == 1.0);
            CHECK(report.max_in_reference_abs_dev <= 1e-9);
            CHECK(report.max_off_reference_abs <= 1e-9);
        }
    }
    SUBCASE("agreement degrades monotonically with noise") {
        std::vector<double> rates;
        for (double sigma : {0.0, 0.1, 0.3, 1.0}) {
            spec.noise_sigma = sigma;
            rates.push_back(direct_sum_oracle(spec, 1000, 21).agreement_rate);
        }
        CHECK(rates[0] == 1.0);
        for (std::size_t i = 1; i < rates.size(); ++i) CHECK(rates[i] <= rates[i - 1]);
        CHECK(rates.back() < 0.95); // heavy noise visibly breaks the agreement
    }
    SUBCASE("bad specs rejected") {
        CHECK_THROWS_AS(direct_sum_oracle(spec, 0, 1), data_error);
        DirectSumSpec bad;
        bad.num_entities = 1;
        CHECK_THROWS_AS(direct_sum_oracle(bad, 10, 1), data_error);
    }
}

TEST_CASE("two-sparse embeddings") {
    SUBCASE("counts follow 2d(d-1)") {
        CHECK(two_sparse_embeddings(2).size() == 4);
        CHECK(two_sparse_embeddings(3).size() == 12);
        CHECK(two_sparse_embeddings(6).size() == 60);
    }
    SUBCASE("d=2 gives the four sign patterns") {
        auto v = two_sparse_embeddings(2);
        const double r = 1.0 / std::sqrt(2.0);
        std::set<std::pair<double, double>> got;
        for (auto& t : v) got.insert({t.data[0], t.data[1]});
        CHECK(got == std::set<std::pair<double, double>>{{r, r}, {r, -r}, {-r, r}, {-r, -r}});
    }
    SUBCASE("dimension below two rejected") {
        CHECK_THROWS_AS(two_sparse_embeddings(1), data_error);
    }
    SUBCASE("unit norm, two nonzeros, no duplicates, pairwise dots") {
        for (int d = 2; d <= 6; ++d) {
            auto vs = two_sparse_embeddings(d);
            CHECK(vs.size() == static_cast<std::size_t>(2 * d * (d - 1)));
            std::set<std::vector<double>> uniq;
            for (const auto& v : vs) {
                int nonzero = 0;
                for (double x : v.data)
                    if (x != 0.0) ++nonzero;
                CHECK(nonzero == 2);
                CHECK(std::abs(l2_norm(v.data) - 1.0) < 1e-12);
                uniq.insert(v.data);
            }
            CHECK(uniq.size() == vs.size());
            for (std::size_t i = 0; i < vs.size(); ++i)
                for (std::size_t j = i + 1; j < vs.size(); ++j) {
                    double dp = dot(vs[i].data, vs[j].data);
                    bool antipodal = std::abs(dp + 1.0) < 1e-12;
                    if (antipodal) {
                        for (std::size_t k = 0; k < vs[i].data.size(); ++k)
                            CHECK(vs[i].data[k] == -vs[j].data[k]);
                    } else {
                        CHECK(std::abs(dp) <= 0.5 + 1e-12);
                    }
                }
        }
    }
}

TEST_CASE("vectorial entailment") {
    SUBCASE("zero statement is entailed by anything") {
        CHECK(entailment_check(TensorValue::vec({0.3, -0.7}), TensorValue::vec({0.0, 0.0})));
    }
    SUBCASE("hand examples") {
        CHECK(entailment_check(TensorValue::vec({1, 1, 0}), TensorValue::vec({1, 0, 0})));
        CHECK(!entailment_check(TensorValue::vec({0, 1, 0}), TensorValue::vec({1, 0, 0})));
    }
    SUBCASE("0-1 vectors: entailment is support containment") {
        const int d = 5; // exhaustive over all 0-1 vector pairs
        for (int a = 0; a < (1 << d); ++a)
            for (int b = 0; b < (1 << d); ++b) {
                TensorValue phi = TensorValue::zeros({d});
                TensorValue psi = TensorValue::zeros({d});
                bool contained = true;
                for (int k = 0; k < d; ++k) {
                    phi.data[static_cast<std::size_t>(k)] = (a >> k) & 1;
                    psi.data[static_cast<std::size_t>(k)] = (b >> k) & 1;
                    if (((b >> k) & 1) && !((a >> k) & 1)) contained = false;
                }
                CHECK(entailment_check(phi, psi) == contained);
            }
    }
    SUBCASE("shape mismatch rejected") {
        CHECK_THROWS_AS(entailment_check(TensorValue::vec({1}), TensorValue::vec({1, 2})),
                        data_error);
    }
}

TEST_CASE("entity subspace projection") {
    SUBCASE("oracle-constructed states project exactly") {
        // basis = first two axes of R^4; states carry a unit entity part
        std::vector<std::vector<double>> rows = {{2, 0, 0, 0}, {0, 3, 0, 0}};
        auto basis = orthonormal_rows(rows);
        REQUIRE(basis.size() == 2);
        auto proj = [&](const std::vector<double>& v) {
            double sq = 0.0;
            for (auto& b : basis) {
                double p = dot(b, v);
                sq += p * p;
            }
            return std::sqrt(sq);
        };
        CHECK(proj({0.0, 1.0, 0.7, -0.3}) == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(proj({0.0, 0.0, 0.9, 0.5}) == doctest::Approx(0.0));
    }
    SUBCASE("runs on an untrained reader as a baseline report") {
        auto corpus = tiny_anonymized_corpus(4);
        auto reader = tiny_stanford(corpus);
        auto report = entity_subspace_projection(reader, corpus);
        CHECK(report.subspace_dim > 0);
        CHECK(report.reference_projection.count > 0);
        CHECK(report.nonreference_projection.count > 0);
        CHECK(report.question_projection_ratio.mean >= 0.0);
        CHECK(report.question_projection_ratio.mean <= 1.0 + 1e-12);
    }
    SUBCASE("degenerate zero output embeddings rejected") {
        auto corpus = tiny_anonymized_corpus(3);
        auto reader = tiny_stanford(corpus);
        auto& table = reader.params().value("output_embedding");
        std::fill(table.data.begin(), table.data.end(), 0.0);
        CHECK_THROWS_AS(entity_subspace_projection(reader, corpus), data_error);
    }
}

TEST_CASE("plot script emission") {
    auto path = temp_path("clozelab_plot.py");
    write_plot_script(path);
    std::ifstream in(path);
    std::string first;
    std::getline(in, first);
    CHECK(first == "#!/usr/bin/env python3");
    std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    CHECK(all.find("matplotlib") != std::string::npos);
    std::remove(path.c_str());
}
