// Training loop per the reference recipe: Adam (lr 0.0005), global-norm
// gradient clipping at 10, mini-batches of 32 with length-sorted prefetch
// windows, per-epoch entity reshuffling on anonymized corpora, early
// stopping on validation accuracy, and a binary checkpoint container.

#pragma once

#include <chrono>
#include <cstring>
#include <fstream>
#include <limits>

#include "clozelab/readers.hpp"

namespace clozelab {

struct TrainConfig {
    double learning_rate = 0.0005;
    int batch_size = 32;
    double clip_threshold = 10.0;
    int max_epochs = 30;
    int patience = 3;
    int bucket_count = 10;
    std::uint64_t seed = 1;
    bool reshuffle_entities = false;
    double stop_accuracy = std::numeric_limits<double>::infinity(); // optional early target
    // reference dims from the recipe; desk-scale runs default smaller
    static constexpr int kReferenceEmbeddingDim = 200;
    static constexpr int kReferenceHiddenDim = 384;

    void validate() const {
        if (learning_rate <= 0 || batch_size < 1 || clip_threshold <= 0 || max_epochs < 1 ||
            patience < 1 || bucket_count < 1)
            throw data_error("train config: non-positive value");
    }

    json to_json() const {
        return json{{"learning_rate", learning_rate}, {"batch_size", batch_size},
                    {"clip_threshold", clip_threshold}, {"max_epochs", max_epochs},
                    {"patience", patience},           {"bucket_count", bucket_count},
                    {"seed", seed},                   {"reshuffle_entities", reshuffle_entities}};
    }
    static TrainConfig from_json(const json& j) {
        TrainConfig c;
        try {
            c.learning_rate = j.at("learning_rate").get<double>();
            c.batch_size = j.at("batch_size").get<int>();
            c.clip_threshold = j.at("clip_threshold").get<double>();
            c.max_epochs = j.at("max_epochs").get<int>();
            c.patience = j.at("patience").get<int>();
            c.bucket_count = j.at("bucket_count").get<int>();
            c.seed = j.at("seed").get<std::uint64_t>();
            c.reshuffle_entities = j.at("reshuffle_entities").get<bool>();
        } catch (const json::exception& e) {
            throw data_error(std::string("train config: ") + e.what());
        }
        c.validate();
        return c;
    }
};

// ---- Adam ----

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

class AdamState {
public:
    AdamState() = default;
    AdamState(const ParameterStore& params, AdamConfig cfg = {}) : cfg_(cfg) {
        for (const auto& [name, e] : params) {
            m_.emplace(name, TensorValue::zeros(e.value.shape));
            v_.emplace(name, TensorValue::zeros(e.value.shape));
        }
    }

    int step_count() const { return step_; }
    const AdamConfig& config() const { return cfg_; }
    const std::map<std::string, TensorValue>& first_moments() const { return m_; }
    const std::map<std::string, TensorValue>& second_moments() const { return v_; }
    std::map<std::string, TensorValue>& first_moments() { return m_; }
    std::map<std::string, TensorValue>& second_moments() { return v_; }
    void set_step(int s) { step_ = s; }

    // one update from the gradients accumulated in the store
    void step(ParameterStore& params, double lr) {
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, step_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, step_);
        for (auto& [name, e] : params) {
            if (!e.trainable) continue;
            auto& m = m_.at(name).data;
            auto& v = v_.at(name).data;
            for (std::size_t i = 0; i < e.value.data.size(); ++i) {
                const double g = e.grad.data[i];
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                e.value.data[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
            }
        }
    }

private:
    AdamConfig cfg_;
    int step_ = 0;
    std::map<std::string, TensorValue> m_, v_;
};

// scale all gradients by threshold/norm when the global L2 norm exceeds it
inline double clip_global_norm(ParameterStore& params, double threshold) {
    if (threshold <= 0) throw data_error("clip threshold must be positive");
    double sq = 0.0;
    for (const auto& [name, e] : params) {
        if (!e.trainable) continue;
        for (double g : e.grad.data) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > threshold) {
        const double scale = threshold / norm;
        for (auto& [name, e] : params) {
            if (!e.trainable) continue;
            for (double& g : e.grad.data) g *= scale;
        }
    }
    return norm;
}

// ---- early stopping ----

// Tracks the best validation accuracy; stops after `patience` epochs
// without improvement (patience 1 stops as soon as accuracy declines).
class EarlyStopper {
public:
    explicit EarlyStopper(int patience) : patience_(patience) {}

    // returns true if this epoch improved on the best so far
    bool observe(double accuracy) {
        if (accuracy > best_) {
            best_ = accuracy;
            stall_ = 0;
            return true;
        }
        ++stall_;
        return false;
    }
    bool should_stop() const { return stall_ >= patience_; }
    double best() const { return best_; }

private:
    int patience_;
    int stall_ = 0;
    double best_ = -1.0;
};

// ---- evaluation ----

struct Evaluation {
    double accuracy = 0.0;
    std::vector<int> predictions;
};

template <typename PredictFn>
Evaluation evaluate_with(const Corpus& corpus, PredictFn&& predict) {
    Evaluation ev;
    int correct = 0;
    for (const auto& inst : corpus) {
        int p = predict(inst);
        ev.predictions.push_back(p);
        if (p == inst.answer) ++correct;
    }
    ev.accuracy = corpus.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(corpus.size());
    return ev;
}

inline Evaluation evaluate(Reader& reader, const Corpus& corpus) {
    return evaluate_with(corpus, [&](const ClozeInstance& inst) {
        return reader.predict(inst, /*want_trace=*/false).dist.predicted;
    });
}

// ---- checkpoints ----
//
// Little-endian container: one JSON header line (version, configs, tensor
// directory with offsets) followed by the raw 64-bit float payload, so
// tensors round-trip byte-exactly.

inline constexpr const char* kCheckpointMagic = "CLOZELAB-CKPT";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
    ReaderConfig reader_config;
    TrainConfig train_config;
    std::vector<std::string> vocab_tokens;
    std::map<std::string, std::pair<TensorValue, bool>> tensors; // value, trainable
    std::map<std::string, TensorValue> adam_m, adam_v;
    int adam_step = 0;
    int epoch = 0;
    double valid_accuracy = 0.0;
    std::uint64_t seed = 0;

    static Checkpoint capture(const Reader& reader, const TrainConfig& tc, const AdamState* adam,
                              int epoch, double valid_accuracy) {
        Checkpoint ck;
        ck.reader_config = reader.config();
        ck.train_config = tc;
        ck.vocab_tokens = reader.vocab().tokens();
        for (const auto& [name, e] : reader.params())
            ck.tensors.emplace(name, std::make_pair(e.value, e.trainable));
        if (adam) {
            ck.adam_step = adam->step_count();
            ck.adam_m = adam->first_moments();
            ck.adam_v = adam->second_moments();
        }
        ck.epoch = epoch;
        ck.valid_accuracy = valid_accuracy;
        ck.seed = tc.seed;
        return ck;
    }

    // reader with the checkpointed parameters and vocabulary
    Reader restore() const {
        Reader reader(reader_config, Vocabulary::from_tokens(vocab_tokens), seed);
        for (auto& [name, e] : reader.params()) {
            auto it = tensors.find(name);
            if (it == tensors.end()) throw data_error("checkpoint missing tensor " + name);
            if (it->second.first.shape != e.value.shape)
                throw data_error("checkpoint tensor " + name + " has shape " +
                                 it->second.first.shape_str() + ", expected " + e.value.shape_str());
            e.value = it->second.first;
        }
        if (tensors.size() != reader.params().size())
            throw data_error("checkpoint has extra tensors for this config");
        return reader;
    }
};

namespace ckpt_detail {

inline void write_f64_le(std::string& out, const std::vector<double>& v) {
    for (double d : v) {
        std::uint64_t bits;
        std::memcpy(&bits, &d, 8);
        for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
    }
}

inline std::vector<double> read_f64_le(const std::string& payload, std::size_t offset,
                                       std::size_t count) {
    if ((offset + count) * 8 > payload.size()) throw data_error("checkpoint payload truncated");
    std::vector<double> v(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b)
            bits |= static_cast<std::uint64_t>(
                        static_cast<unsigned char>(payload[(offset + i) * 8 + b]))
                    << (8 * b);
        std::memcpy(&v[i], &bits, 8);
    }
    return v;
}

} // namespace ckpt_detail

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    json dir = json::array();
    std::string payload;
    std::size_t offset = 0;
    auto put = [&](const std::string& kind, const std::string& name, const TensorValue& t,
                   bool trainable) {
        dir.push_back(json{{"kind", kind},
                           {"name", name},
                           {"shape", t.shape},
                           {"offset", offset},
                           {"count", t.data.size()},
                           {"trainable", trainable}});
        ckpt_detail::write_f64_le(payload, t.data);
        offset += t.data.size();
    };
    for (const auto& [name, tv] : ck.tensors) put("param", name, tv.first, tv.second);
    for (const auto& [name, t] : ck.adam_m) put("adam_m", name, t, true);
    for (const auto& [name, t] : ck.adam_v) put("adam_v", name, t, true);

    json header{{"magic", kCheckpointMagic},
                {"version", kCheckpointVersion},
                {"reader_config", ck.reader_config.to_json()},
                {"train_config", ck.train_config.to_json()},
                {"vocab", ck.vocab_tokens},
                {"adam_step", ck.adam_step},
                {"epoch", ck.epoch},
                {"valid_accuracy", ck.valid_accuracy},
                {"seed", ck.seed},
                {"tensors", dir}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw data_error("cannot open for writing: " + path);
    out << header.dump() << "\n" << payload;
    if (!out) throw data_error("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("cannot open checkpoint: " + path);
    std::string header_line;
    if (!std::getline(in, header_line)) throw data_error("checkpoint truncated: " + path);
    json header = json::parse(header_line, nullptr, false);
    if (header.is_discarded() || !header.is_object())
        throw data_error("checkpoint header malformed: " + path);
    if (header.value("magic", std::string{}) != kCheckpointMagic)
        throw data_error("not a checkpoint file: " + path);
    if (header.value("version", -1) != kCheckpointVersion)
        throw data_error("unsupported checkpoint version " +
                         std::to_string(header.value("version", -1)));
    std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    Checkpoint ck;
    try {
        ck.reader_config = ReaderConfig::from_json(header.at("reader_config"));
        ck.train_config = TrainConfig::from_json(header.at("train_config"));
        ck.vocab_tokens = header.at("vocab").get<std::vector<std::string>>();
        ck.adam_step = header.at("adam_step").get<int>();
        ck.epoch = header.at("epoch").get<int>();
        ck.valid_accuracy = header.at("valid_accuracy").get<double>();
        ck.seed = header.at("seed").get<std::uint64_t>();
        for (const auto& entry : header.at("tensors")) {
            const std::string kind = entry.at("kind").get<std::string>();
            const std::string name = entry.at("name").get<std::string>();
            auto shape = entry.at("shape").get<std::vector<int>>();
            auto data = ckpt_detail::read_f64_le(payload, entry.at("offset").get<std::size_t>(),
                                                 entry.at("count").get<std::size_t>());
            TensorValue t(shape, std::move(data));
            if (kind == "param")
                ck.tensors.emplace(name, std::make_pair(std::move(t), entry.at("trainable").get<bool>()));
            else if (kind == "adam_m")
                ck.adam_m.emplace(name, std::move(t));
            else if (kind == "adam_v")
                ck.adam_v.emplace(name, std::move(t));
            else
                throw data_error("unknown tensor kind " + kind);
        }
    } catch (const json::exception& e) {
        throw data_error(std::string("checkpoint header: ") + e.what());
    }
    return ck;
}

// ---- the training loop ----

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double valid_accuracy = 0.0;
    double seconds = 0.0;
};

struct TrainResult {
    Checkpoint best;
    std::vector<EpochLog> log;
    int best_epoch = 0;
};

inline TrainResult train(Reader& reader, const Corpus& train_corpus, const Corpus& valid_corpus,
                         const TrainConfig& cfg) {
    cfg.validate();
    if (train_corpus.empty() || valid_corpus.empty())
        throw data_error("train: empty train or validation corpus");
    if (cfg.reshuffle_entities && !reader.config().anonymized)
        throw data_error("train: entity reshuffling requires an anonymized reader corpus");

    const auto& rcfg = reader.config();
    AdamState adam(reader.params());
    EarlyStopper stopper(cfg.patience);
    TrainResult result;

    BatchOptions bopts;
    bopts.batch_size = cfg.batch_size;
    bopts.bucket_count = cfg.bucket_count;
    bopts.context_window = rcfg.context_window;
    bopts.max_candidates = rcfg.max_candidates;
    bopts.with_features = rcfg.linguistic_features;
    bopts.with_pointer = rcfg.pointer_features;

    const int universe = static_cast<int>(reader.vocab().entity_ids().size());

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();

        Corpus epoch_corpus;
        const Corpus* active = &train_corpus;
        if (cfg.reshuffle_entities) {
            epoch_corpus.reserve(train_corpus.size());
            for (std::size_t i = 0; i < train_corpus.size(); ++i)
                epoch_corpus.push_back(reshuffle_entities(
                    train_corpus[i],
                    split_seed(cfg.seed, "reshuffle", static_cast<std::uint64_t>(epoch) * 1000003 + i),
                    universe));
            active = &epoch_corpus;
        }

        bopts.seed = split_seed(cfg.seed, "batch", static_cast<std::uint64_t>(epoch));
        double loss_sum = 0.0;
        std::size_t loss_count = 0;
        for (const auto& batch : batchify(*active, reader.vocab(), bopts)) {
            reader.params().zero_grads();
            const double inv = 1.0 / static_cast<double>(batch.size());
            for (int row = 0; row < batch.size(); ++row) {
                ad::Tape tape;
                auto in = input_from_batch(batch, row);
                auto res = reader.forward(tape, in, {true, 1e-12, false});
                const double L = res.loss.value().item();
                if (!std::isfinite(L))
                    throw numeric_error("training diverged: loss is not finite at epoch " +
                                        std::to_string(epoch));
                loss_sum += L;
                ++loss_count;
                tape.backward(ad::scale(res.loss, inv));
            }
            clip_global_norm(reader.params(), cfg.clip_threshold);
            adam.step(reader.params(), cfg.learning_rate);
        }

        auto ev = evaluate(reader, valid_corpus);
        const double seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.log.push_back(
            {epoch, loss_sum / static_cast<double>(loss_count), ev.accuracy, seconds});

        if (stopper.observe(ev.accuracy)) {
            result.best = Checkpoint::capture(reader, cfg, &adam, epoch, ev.accuracy);
            result.best_epoch = epoch;
        }
        if (stopper.should_stop() || ev.accuracy >= cfg.stop_accuracy) break;
    }
    if (result.best_epoch == 0)
        throw numeric_error("train: no epoch produced a checkpoint");
    return result;
}

inline void write_epoch_log_csv(const std::vector<EpochLog>& log, const std::string& path,
                                const json& config_echo = {}) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw data_error("cannot open for writing: " + path);
    if (!config_echo.is_null()) out << "# config " << config_echo.dump() << "\n";
    out << "epoch,train_loss,valid_accuracy,seconds\n";
    char buf[160];
    for (const auto& e : log) {
        std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.3f\n", e.epoch, e.train_loss,
                      e.valid_accuracy, e.seconds);
        out << buf;
    }
}

} // namespace clozelab
