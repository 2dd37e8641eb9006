// Command-line surface: corpus generation, anonymization, training,
// evaluation, probing, the direct-sum oracle sweep, and the two-sparse
// embedding table. One command is one process; every artifact embeds the
// effective config and seed, and eval/probe refuse inputs whose embedded
// config conflicts with the flags.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.

#pragma once

#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "clozelab/probe.hpp"
#include "clozelab/training.hpp"

namespace clozelab::cli {

namespace detail {

inline json corpus_meta(const std::string& command, const json& config, std::uint64_t seed) {
    return json{{"command", command}, {"config", config}, {"seed", seed}};
}

// flags win over the config document; the document wins over defaults
template <typename T>
void overlay(const CLI::Option* opt, const json& doc, const char* key, T& value) {
    if (opt != nullptr && opt->count() > 0) return; // explicit flag already applied
    if (doc.is_object() && doc.contains(key)) value = doc[key].get<T>();
}

inline json load_config_doc(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream in(path);
    if (!in) throw data_error("cannot open config: " + path);
    json doc = json::parse(in, nullptr, false);
    if (doc.is_discarded() || !doc.is_object())
        throw data_error("malformed config document: " + path);
    return doc;
}

inline void require_parent_writable(const std::string& path) {
    auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty() && !std::filesystem::exists(parent))
        throw data_error("output directory does not exist: " + parent.string());
}

inline Corpus read_instances(const std::string& path, json* meta_out = nullptr) {
    auto file = read_corpus(path);
    if (file.instances.empty()) throw data_error("corpus is empty: " + path);
    if (meta_out) *meta_out = file.meta;
    return file.instances;
}

struct ReaderFlagSet {
    std::string variant = "attention-sum";
    ReaderConfig cfg;
    CLI::Option *o_variant = nullptr, *o_emb = nullptr, *o_hid = nullptr, *o_layers = nullptr,
                *o_maxc = nullptr, *o_mlp = nullptr, *o_window = nullptr, *o_anon = nullptr,
                *o_feat = nullptr, *o_ptr = nullptr, *o_embr = nullptr, *o_attr = nullptr;

    void attach(CLI::App* app) {
        o_variant = app->add_option("--reader", variant,
                                    "reader variant (stanford, stanford-wide, attentive, "
                                    "attention-sum, gated-attention, attention-over-attention, "
                                    "one-hot-pointer, general-pointer)");
        o_emb = app->add_option("--embedding-dim", cfg.embedding_dim, "input embedding width");
        o_hid = app->add_option("--hidden-dim", cfg.hidden_dim, "recurrent state width per direction");
        o_layers = app->add_option("--layers", cfg.layers, "gated-attention layer count K");
        o_maxc = app->add_option("--max-candidates", cfg.max_candidates, "candidate list capacity");
        o_mlp = app->add_option("--mlp-hidden", cfg.mlp_hidden, "attentive reader MLP width");
        o_window = app->add_option("--window", cfg.context_window, "context-match window");
        o_anon = app->add_flag("--anonymized", cfg.anonymized, "corpus uses entity identifiers");
        o_feat = app->add_flag("--features", cfg.linguistic_features, "append linguistic features");
        o_ptr = app->add_flag("--pointer", cfg.pointer_features, "append pointer annotations");
        o_embr = app->add_option("--embedding-init-range", cfg.embedding_init_range,
                                 "uniform init range for embedding tables");
        o_attr = app->add_option("--attention-init-range", cfg.attention_init_range,
                                 "uniform init range for attention weights");
    }

    ReaderConfig resolve(const json& doc) const {
        ReaderConfig out = cfg;
        std::string var = variant;
        overlay(o_variant, doc, "variant", var);
        out.variant = reader_variant_from_string(var);
        overlay(o_emb, doc, "embedding_dim", out.embedding_dim);
        overlay(o_hid, doc, "hidden_dim", out.hidden_dim);
        overlay(o_layers, doc, "layers", out.layers);
        overlay(o_maxc, doc, "max_candidates", out.max_candidates);
        overlay(o_mlp, doc, "mlp_hidden", out.mlp_hidden);
        overlay(o_window, doc, "context_window", out.context_window);
        overlay(o_anon, doc, "anonymized", out.anonymized);
        overlay(o_feat, doc, "linguistic_features", out.linguistic_features);
        overlay(o_ptr, doc, "pointer_features", out.pointer_features);
        overlay(o_embr, doc, "embedding_init_range", out.embedding_init_range);
        overlay(o_attr, doc, "attention_init_range", out.attention_init_range);
        out.validate();
        return out;
    }
};

struct TrainFlagSet {
    TrainConfig cfg;
    CLI::Option *o_lr = nullptr, *o_batch = nullptr, *o_clip = nullptr, *o_epochs = nullptr,
                *o_patience = nullptr, *o_buckets = nullptr, *o_seed = nullptr,
                *o_reshuffle = nullptr, *o_stop = nullptr;

    void attach(CLI::App* app) {
        o_lr = app->add_option("--lr", cfg.learning_rate, "Adam learning rate");
        o_batch = app->add_option("--batch", cfg.batch_size, "mini-batch size");
        o_clip = app->add_option("--clip", cfg.clip_threshold, "global gradient-norm threshold");
        o_epochs = app->add_option("--epochs", cfg.max_epochs, "maximum training epochs");
        o_patience = app->add_option("--patience", cfg.patience,
                                     "epochs without validation improvement before stopping");
        o_buckets = app->add_option("--buckets", cfg.bucket_count,
                                    "prefetch window in batches for length sorting");
        o_seed = app->add_option("--seed", cfg.seed, "training seed");
        o_reshuffle = app->add_flag("--reshuffle", cfg.reshuffle_entities,
                                    "reshuffle entity identifiers each epoch");
        o_stop = app->add_option("--stop-accuracy", cfg.stop_accuracy,
                                 "stop once validation accuracy reaches this value");
    }

    TrainConfig resolve(const json& doc) const {
        TrainConfig out = cfg;
        overlay(o_lr, doc, "learning_rate", out.learning_rate);
        overlay(o_batch, doc, "batch_size", out.batch_size);
        overlay(o_clip, doc, "clip_threshold", out.clip_threshold);
        overlay(o_epochs, doc, "max_epochs", out.max_epochs);
        overlay(o_patience, doc, "patience", out.patience);
        overlay(o_buckets, doc, "bucket_count", out.bucket_count);
        overlay(o_seed, doc, "seed", out.seed);
        overlay(o_reshuffle, doc, "reshuffle_entities", out.reshuffle_entities);
        overlay(o_stop, doc, "stop_accuracy", out.stop_accuracy);
        out.validate();
        return out;
    }
};

inline void check_corpus_against_reader(const json& meta, const ReaderConfig& cfg,
                                        const Corpus& corpus, const std::string& path) {
    if (meta.is_object() && meta.contains("config") && meta["config"].contains("anonymized")) {
        bool corpus_anon = meta["config"]["anonymized"].get<bool>();
        if (corpus_anon != cfg.anonymized)
            throw data_error(path + ": corpus anonymized=" + (corpus_anon ? "true" : "false") +
                             " conflicts with reader config");
    } else {
        bool corpus_anon = std::all_of(corpus.begin(), corpus.end(),
                                       [](const ClozeInstance& i) { return is_anonymized(i); });
        if (cfg.anonymized && !corpus_anon)
            throw data_error(path + ": reader expects an anonymized corpus");
    }
    for (const auto& inst : corpus)
        if (static_cast<int>(inst.candidates.size()) > cfg.max_candidates &&
            (cfg.pointer_features || is_pointer(cfg.variant)))
            throw data_error(path + ": instance exceeds max_candidates=" +
                             std::to_string(cfg.max_candidates));
}

inline void check_config_matches_checkpoint(const json& doc, const Checkpoint& ck,
                                            const std::string& what) {
    if (!doc.is_object() || !doc.contains("reader")) return;
    ReaderConfig requested = ReaderConfig::from_json(doc["reader"]);
    if (!(requested == ck.reader_config))
        throw data_error(what + ": requested reader config conflicts with the checkpoint");
}

} // namespace detail

inline int run(const std::vector<std::string>& args) {
    using detail::overlay;

    CLI::App app{"desk-scale laboratory for cloze-style neural readers"};
    app.require_subcommand(1);

    // ---- gen ----
    auto* gen = app.add_subcommand("gen", "generate a synthetic cloze corpus");
    std::string gen_out, gen_config;
    SyntheticConfig gen_cfg;
    gen->add_option("--out", gen_out, "corpus output path")->required();
    gen->add_option("--config", gen_config, "JSON config document");
    auto* g_ent = gen->add_option("--entities", gen_cfg.num_entities, "entity universe size");
    auto* g_pred = gen->add_option("--predicates", gen_cfg.num_predicates, "predicate count");
    auto* g_len = gen->add_option("--passage-len", gen_cfg.passage_len, "facts per passage");
    auto* g_cand = gen->add_option("--candidates", gen_cfg.num_candidates, "candidates per instance");
    auto* g_size = gen->add_option("--size", gen_cfg.size, "number of instances");
    auto* g_seed = gen->add_option("--seed", gen_cfg.seed, "generation seed");

    // ---- anon ----
    auto* anon = app.add_subcommand("anon", "anonymize a corpus with entity identifiers");
    std::string anon_in, anon_out;
    std::uint64_t anon_seed = 1;
    int anon_pool = 0;
    anon->add_option("--in", anon_in, "input corpus")->required();
    anon->add_option("--out", anon_out, "output corpus")->required();
    anon->add_option("--seed", anon_seed, "identifier assignment seed");
    anon->add_option("--pool", anon_pool, "identifier pool size (default: entity universe)");

    // ---- train ----
    auto* train_cmd = app.add_subcommand("train", "train a reader");
    std::string train_path, valid_path, ckpt_out, log_out, train_config;
    std::uint64_t init_seed = 0;
    bool init_seed_set = false;
    detail::ReaderFlagSet rflags;
    detail::TrainFlagSet tflags;
    train_cmd->add_option("--train", train_path, "training corpus")->required();
    train_cmd->add_option("--valid", valid_path, "validation corpus")->required();
    train_cmd->add_option("--out", ckpt_out, "checkpoint output path")->required();
    train_cmd->add_option("--log", log_out, "epoch log CSV path");
    train_cmd->add_option("--config", train_config, "JSON config document ({reader:{},train:{}})");
    train_cmd->add_option("--init-seed", init_seed, "parameter init seed (default: train seed)")
        ->each([&](const std::string&) { init_seed_set = true; });
    rflags.attach(train_cmd);
    tflags.attach(train_cmd);

    // ---- eval ----
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a corpus");
    std::string eval_ckpt, eval_corpus, eval_out, eval_config;
    bool per_instance = false;
    eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();
    eval_cmd->add_option("--corpus", eval_corpus, "corpus path")->required();
    eval_cmd->add_option("--out", eval_out, "report path (default: stdout)");
    eval_cmd->add_option("--config", eval_config, "config document; must match the checkpoint");
    eval_cmd->add_flag("--per-instance", per_instance, "include per-instance predictions");

    // ---- probe ----
    auto* probe_cmd = app.add_subcommand("probe", "run representation probes on a checkpoint");
    std::string probe_ckpt, probe_corpus, probe_dir, probe_config;
    int heatmap_count = 2;
    bool no_stats = false, no_gram = false, no_subspace = false;
    probe_cmd->add_option("--ckpt", probe_ckpt, "checkpoint path")->required();
    probe_cmd->add_option("--corpus", probe_corpus, "corpus path")->required();
    probe_cmd->add_option("--out", probe_dir, "output directory")->required();
    probe_cmd->add_option("--config", probe_config, "config document; must match the checkpoint");
    probe_cmd->add_option("--heatmaps", heatmap_count, "instances to render as heat maps");
    probe_cmd->add_flag("--no-stats", no_stats, "skip predication statistics");
    probe_cmd->add_flag("--no-gram", no_gram, "skip the output Gram matrix");
    probe_cmd->add_flag("--no-subspace", no_subspace, "skip the entity-subspace projection");

    // ---- oracle ----
    auto* oracle_cmd = app.add_subcommand("oracle", "direct-sum agreement oracle sweep");
    DirectSumSpec spec;
    int trials = 1000;
    std::uint64_t oracle_seed = 1;
    std::string sigmas = "0,0.1,0.3,1.0", oracle_out;
    oracle_cmd->add_option("--statement-dim", spec.statement_dim, "statement subspace dimension");
    oracle_cmd->add_option("--entities", spec.num_entities, "entity basis size");
    oracle_cmd->add_option("--passage-len", spec.passage_len, "positions per trial");
    oracle_cmd->add_option("--trials", trials, "trials per noise level");
    oracle_cmd->add_option("--seed", oracle_seed, "sampling seed");
    oracle_cmd->add_flag("--rotate", spec.rotate, "apply a random orthogonal rotation");
    oracle_cmd->add_option("--rotation-seed", spec.rotation_seed, "rotation seed");
    oracle_cmd->add_option("--sigmas", sigmas, "comma-separated noise levels");
    oracle_cmd->add_option("--out", oracle_out, "agreement CSV path (default: stdout)");

    // ---- sparse ----
    auto* sparse_cmd = app.add_subcommand("sparse", "emit the two-sparse embedding table");
    int sparse_d = 0;
    std::string sparse_out;
    sparse_cmd->add_option("--d", sparse_d, "embedding dimension")->required();
    sparse_cmd->add_option("--out", sparse_out, "CSV path (default: stdout)");

    std::vector<const char*> argv;
    argv.push_back("clozelab");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    }

    try {
        if (gen->parsed()) {
            json doc = detail::load_config_doc(gen_config);
            if (doc.contains("gen")) doc = doc["gen"];
            overlay(g_ent, doc, "entities", gen_cfg.num_entities);
            overlay(g_pred, doc, "predicates", gen_cfg.num_predicates);
            overlay(g_len, doc, "passage_len", gen_cfg.passage_len);
            overlay(g_cand, doc, "candidates", gen_cfg.num_candidates);
            overlay(g_size, doc, "size", gen_cfg.size);
            overlay(g_seed, doc, "seed", gen_cfg.seed);
            detail::require_parent_writable(gen_out);
            auto corpus = generate_synthetic(gen_cfg);
            json cfg_echo{{"entities", gen_cfg.num_entities},
                          {"predicates", gen_cfg.num_predicates},
                          {"passage_len", gen_cfg.passage_len},
                          {"candidates", gen_cfg.num_candidates},
                          {"size", gen_cfg.size},
                          {"anonymized", false}};
            write_corpus(corpus, gen_out, detail::corpus_meta("gen", cfg_echo, gen_cfg.seed));
            std::cout << "wrote " << corpus.size() << " instances to " << gen_out << "\n";
            return 0;
        }

        if (anon->parsed()) {
            json meta;
            auto corpus = detail::read_instances(anon_in, &meta);
            int pool = anon_pool;
            if (pool == 0 && meta.is_object() && meta.contains("config") &&
                meta["config"].contains("entities"))
                pool = meta["config"]["entities"].get<int>();
            Corpus out;
            for (std::size_t i = 0; i < corpus.size(); ++i)
                out.push_back(anonymize(corpus[i], split_seed(anon_seed, "anon", i), pool));
            json cfg_echo = meta.is_object() && meta.contains("config") ? meta["config"] : json::object();
            cfg_echo["anonymized"] = true;
            cfg_echo["pool"] = pool;
            detail::require_parent_writable(anon_out);
            write_corpus(out, anon_out, detail::corpus_meta("anon", cfg_echo, anon_seed));
            std::cout << "wrote " << out.size() << " anonymized instances to " << anon_out << "\n";
            return 0;
        }

        if (train_cmd->parsed()) {
            json doc = detail::load_config_doc(train_config);
            ReaderConfig rcfg = rflags.resolve(doc.value("reader", json::object()));
            TrainConfig tcfg = tflags.resolve(doc.value("train", json::object()));

            json train_meta, valid_meta;
            auto train_corpus = detail::read_instances(train_path, &train_meta);
            auto valid_corpus = detail::read_instances(valid_path, &valid_meta);
            detail::check_corpus_against_reader(train_meta, rcfg, train_corpus, train_path);
            detail::check_corpus_against_reader(valid_meta, rcfg, valid_corpus, valid_path);

            Corpus all = train_corpus;
            all.insert(all.end(), valid_corpus.begin(), valid_corpus.end());
            Reader reader(rcfg, Vocabulary::build(all),
                          init_seed_set ? init_seed : tcfg.seed);

            auto result = clozelab::train(reader, train_corpus, valid_corpus, tcfg);
            detail::require_parent_writable(ckpt_out);
            save_checkpoint(result.best, ckpt_out);
            json echo{{"reader", rcfg.to_json()}, {"train", tcfg.to_json()}};
            if (!log_out.empty()) write_epoch_log_csv(result.log, log_out, echo);
            std::cout << "best validation accuracy " << result.best.valid_accuracy << " at epoch "
                      << result.best_epoch << "; checkpoint " << ckpt_out << "\n";
            return 0;
        }

        if (eval_cmd->parsed()) {
            auto ck = load_checkpoint(eval_ckpt);
            detail::check_config_matches_checkpoint(detail::load_config_doc(eval_config), ck,
                                                    "eval");
            json meta;
            auto corpus = detail::read_instances(eval_corpus, &meta);
            detail::check_corpus_against_reader(meta, ck.reader_config, corpus, eval_corpus);
            Reader reader = ck.restore();
            auto ev = evaluate(reader, corpus);
            json report{{"accuracy", ev.accuracy},
                        {"instances", corpus.size()},
                        {"checkpoint", eval_ckpt},
                        {"checkpoint_accuracy", ck.valid_accuracy},
                        {"config", json{{"reader", ck.reader_config.to_json()},
                                        {"train", ck.train_config.to_json()}}},
                        {"seed", ck.seed}};
            if (per_instance) report["predictions"] = ev.predictions;
            if (eval_out.empty()) {
                std::cout << report.dump(2) << "\n";
            } else {
                detail::require_parent_writable(eval_out);
                std::ofstream out(eval_out);
                out << report.dump(2) << "\n";
                std::cout << "accuracy " << ev.accuracy << "; report " << eval_out << "\n";
            }
            return 0;
        }

        if (probe_cmd->parsed()) {
            auto ck = load_checkpoint(probe_ckpt);
            detail::check_config_matches_checkpoint(detail::load_config_doc(probe_config), ck,
                                                    "probe");
            json meta;
            auto corpus = detail::read_instances(probe_corpus, &meta);
            detail::check_corpus_against_reader(meta, ck.reader_config, corpus, probe_corpus);
            Reader reader = ck.restore();
            std::filesystem::create_directories(probe_dir);
            auto out_path = [&](const std::string& name) {
                return (std::filesystem::path(probe_dir) / name).string();
            };
            json echo{{"reader", ck.reader_config.to_json()},
                      {"train", ck.train_config.to_json()},
                      {"seed", ck.seed},
                      {"corpus", probe_corpus}};

            json report{{"config", echo}};
            const bool aggregation = is_aggregation(ck.reader_config.variant);
            if (!no_stats && aggregation) {
                auto stats = predication_stats(reader, corpus);
                report["predication_stats"] = stats.to_json();
                std::ofstream txt(out_path("stats.txt"));
                txt << stats.to_text();
            }
            if (!no_gram && aggregation) {
                auto gram = output_gram(reader);
                report["gram"] = json{{"diagonal", gram.diagonal.to_json()},
                                      {"off_diagonal", gram.off_diagonal.to_json()}};
                write_gram_csv(gram, out_path("gram.csv"), echo);
            }
            if (!no_subspace && aggregation)
                report["entity_subspace"] = entity_subspace_projection(reader, corpus).to_json();
            report["attention_reference_mass"] = attention_reference_mass(reader, corpus);
            for (int k = 0; k < std::min<int>(heatmap_count, static_cast<int>(corpus.size())); ++k)
                write_heatmap_csv(heatmaps(reader, corpus[static_cast<std::size_t>(k)]),
                                  out_path("heatmap_" + std::to_string(k) + ".csv"), echo);
            write_plot_script(out_path("plot_grid.py"));
            std::ofstream rep(out_path("probe_report.json"));
            rep << report.dump(2) << "\n";
            std::cout << "probe outputs in " << probe_dir << "\n";
            return 0;
        }

        if (oracle_cmd->parsed()) {
            std::vector<double> sigma_list;
            for (std::size_t pos = 0; pos < sigmas.size();) {
                auto comma = sigmas.find(',', pos);
                if (comma == std::string::npos) comma = sigmas.size();
                try {
                    sigma_list.push_back(std::stod(sigmas.substr(pos, comma - pos)));
                } catch (const std::exception&) {
                    throw data_error("bad --sigmas entry: " + sigmas.substr(pos, comma - pos));
                }
                pos = comma + 1;
            }
            std::ostringstream csv;
            csv << std::setprecision(17);
            csv << "# config "
                << json{{"statement_dim", spec.statement_dim}, {"entities", spec.num_entities},
                        {"passage_len", spec.passage_len},     {"trials", trials},
                        {"rotate", spec.rotate},               {"rotation_seed", spec.rotation_seed},
                        {"seed", oracle_seed}}
                       .dump()
                << "\n";
            csv << "sigma,agreement_rate,in_ref_mean,in_ref_variance,off_ref_mean,"
                   "off_ref_variance,max_in_ref_abs_dev,max_off_ref_abs\n";
            for (double s : sigma_list) {
                DirectSumSpec sp = spec;
                sp.noise_sigma = s;
                auto r = direct_sum_oracle(sp, trials, oracle_seed);
                csv << s << "," << r.agreement_rate << "," << r.in_reference_product.mean << ","
                    << r.in_reference_product.variance << "," << r.off_reference_product.mean
                    << "," << r.off_reference_product.variance << ","
                    << r.max_in_reference_abs_dev << "," << r.max_off_reference_abs << "\n";
            }
            if (oracle_out.empty()) {
                std::cout << csv.str();
            } else {
                detail::require_parent_writable(oracle_out);
                std::ofstream out(oracle_out);
                out << csv.str();
                std::cout << "wrote oracle sweep to " << oracle_out << "\n";
            }
            return 0;
        }

        if (sparse_cmd->parsed()) {
            auto vectors = two_sparse_embeddings(sparse_d);
            std::ostringstream csv;
            csv << std::setprecision(17);
            for (const auto& v : vectors) {
                for (std::size_t i = 0; i < v.data.size(); ++i)
                    csv << (i ? "," : "") << v.data[i];
                csv << "\n";
            }
            if (sparse_out.empty()) {
                std::cout << csv.str();
            } else {
                detail::require_parent_writable(sparse_out);
                std::ofstream out(sparse_out);
                out << csv.str();
                std::cout << "wrote " << vectors.size() << " vectors to " << sparse_out << "\n";
            }
            return 0;
        }
    } catch (const data_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const numeric_error& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return 3;
    } catch (const error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

inline int run(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(args);
}

} // namespace clozelab::cli
