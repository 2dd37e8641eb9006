// The reader architectures, split by answer-selection criterion:
//
//   aggregation readers (Stanford, wide-softmax Stanford, Attentive) score
//   a candidate against an attention-weighted passage vector o;
//
//   explicit-reference readers (Attention-Sum, Gated-Attention,
//   Attention-over-Attention) sum attention over the candidate's
//   occurrence positions, without renormalizing;
//
//   pointer readers (one-hot, general) append candidate-index features to
//   the input embeddings and read the answer out of reserved coordinates
//   of o.
//
// All variants share the encoder and attention primitives and one
// ParameterStore, so the training loop and the probes treat them
// uniformly.

#pragma once

#include <string>
#include <vector>

#include "clozelab/autodiff.hpp"
#include "clozelab/corpus.hpp"
#include "clozelab/recurrent.hpp"

namespace clozelab {

enum class ReaderVariant {
    Stanford,
    StanfordWide,
    Attentive,
    AttentionSum,
    GatedAttention,
    AttentionOverAttention,
    OneHotPointer,
    GeneralPointer,
};

inline const std::vector<std::pair<ReaderVariant, std::string>>& reader_variant_names() {
    static const std::vector<std::pair<ReaderVariant, std::string>> names = {
        {ReaderVariant::Stanford, "stanford"},
        {ReaderVariant::StanfordWide, "stanford-wide"},
        {ReaderVariant::Attentive, "attentive"},
        {ReaderVariant::AttentionSum, "attention-sum"},
        {ReaderVariant::GatedAttention, "gated-attention"},
        {ReaderVariant::AttentionOverAttention, "attention-over-attention"},
        {ReaderVariant::OneHotPointer, "one-hot-pointer"},
        {ReaderVariant::GeneralPointer, "general-pointer"},
    };
    return names;
}

inline std::string to_string(ReaderVariant v) {
    for (const auto& [var, name] : reader_variant_names())
        if (var == v) return name;
    throw error("unknown reader variant");
}

inline ReaderVariant reader_variant_from_string(const std::string& s) {
    for (const auto& [var, name] : reader_variant_names())
        if (name == s) return var;
    throw data_error("unknown reader variant: " + s);
}

// explicit-reference answer selection (sum of attention over R(a,p))
inline bool is_explicit_reference(ReaderVariant v) {
    return v == ReaderVariant::AttentionSum || v == ReaderVariant::GatedAttention ||
           v == ReaderVariant::AttentionOverAttention;
}

// has a trained output-embedding table e_o
inline bool is_aggregation(ReaderVariant v) {
    return v == ReaderVariant::Stanford || v == ReaderVariant::StanfordWide ||
           v == ReaderVariant::Attentive;
}

inline bool is_pointer(ReaderVariant v) {
    return v == ReaderVariant::OneHotPointer || v == ReaderVariant::GeneralPointer;
}

// Attention-Sum/GA/AoA ride on GRUs, the Stanford family on LSTMs.
inline CellKind cell_kind_for(ReaderVariant v) {
    return is_explicit_reference(v) ? CellKind::GRU : CellKind::LSTM;
}

struct ReaderConfig {
    ReaderVariant variant = ReaderVariant::AttentionSum;
    int embedding_dim = 16;
    int hidden_dim = 32;
    int layers = 1; // K, gated-attention only
    int max_candidates = 5;
    int mlp_hidden = 32; // attentive only
    int context_window = 2;
    bool anonymized = false;
    bool linguistic_features = false;
    bool pointer_features = false;
    // uniform init ranges for the embedding tables and attention weights;
    // desk-scale budgets need O(1) initial state magnitudes to break
    // attention symmetry within the epoch limit
    double embedding_init_range = 1.0;
    double attention_init_range = 1.0;

    bool operator==(const ReaderConfig&) const = default;

    int input_dim() const {
        return embedding_dim + (linguistic_features ? TokenFeatures::kCount : 0) +
               (pointer_features ? max_candidates : 0);
    }
    int state_dim() const { return 2 * hidden_dim; } // bidirectional

    void validate() const {
        if (embedding_dim < 1 || hidden_dim < 1 || max_candidates < 1 || mlp_hidden < 1)
            throw data_error("reader config: non-positive dimension");
        if (layers < 1) throw data_error("reader config: layer count must be >= 1");
        if (is_pointer(variant)) {
            if (!pointer_features)
                throw data_error("reader config: pointer readers require pointer features");
            if (hidden_dim < max_candidates)
                throw data_error("reader config: pointer readers need hidden_dim >= max_candidates");
        }
        if (variant != ReaderVariant::GatedAttention && layers != 1)
            throw data_error("reader config: only gated-attention is multi-layer");
    }

    json to_json() const {
        return json{{"variant", to_string(variant)},
                    {"embedding_dim", embedding_dim},
                    {"hidden_dim", hidden_dim},
                    {"layers", layers},
                    {"max_candidates", max_candidates},
                    {"mlp_hidden", mlp_hidden},
                    {"context_window", context_window},
                    {"anonymized", anonymized},
                    {"linguistic_features", linguistic_features},
                    {"pointer_features", pointer_features},
                    {"embedding_init_range", embedding_init_range},
                    {"attention_init_range", attention_init_range}};
    }

    static ReaderConfig from_json(const json& j) {
        ReaderConfig c;
        try {
            c.variant = reader_variant_from_string(j.at("variant").get<std::string>());
            c.embedding_dim = j.at("embedding_dim").get<int>();
            c.hidden_dim = j.at("hidden_dim").get<int>();
            c.layers = j.at("layers").get<int>();
            c.max_candidates = j.at("max_candidates").get<int>();
            c.mlp_hidden = j.at("mlp_hidden").get<int>();
            c.context_window = j.at("context_window").get<int>();
            c.anonymized = j.at("anonymized").get<bool>();
            c.linguistic_features = j.at("linguistic_features").get<bool>();
            c.pointer_features = j.at("pointer_features").get<bool>();
            c.embedding_init_range = j.value("embedding_init_range", 1.0);
            c.attention_init_range = j.value("attention_init_range", 1.0);
        } catch (const json::exception& e) {
            throw data_error(std::string("reader config: ") + e.what());
        }
        c.validate();
        return c;
    }
};

// One instance as the forward pass consumes it. Masks follow the batch
// padding; positions at and beyond *_len are padding and provably receive
// zero attention.
struct InstanceInput {
    std::vector<int> question_ids;
    std::vector<int> passage_ids;
    int question_len = 0;
    int passage_len = 0;
    std::vector<TokenFeatures> features;      // per true passage position
    std::vector<std::vector<double>> pointer; // per true passage position
    std::vector<int> candidate_ids;
    std::vector<std::vector<int>> references;
    int gold = -1;
};

inline InstanceInput make_input(const ReaderConfig& cfg, const Vocabulary& vocab,
                                const ClozeInstance& inst) {
    InstanceInput in;
    in.question_ids = vocab.ids_of(inst.question);
    in.passage_ids = vocab.ids_of(inst.passage);
    in.question_len = static_cast<int>(inst.question.size());
    in.passage_len = static_cast<int>(inst.passage.size());
    if (cfg.linguistic_features) in.features = compute_linguistic_features(inst, cfg.context_window);
    if (cfg.pointer_features) in.pointer = pointer_annotate(inst, cfg.max_candidates);
    for (const auto& c : inst.candidates) in.candidate_ids.push_back(vocab.id(c));
    in.references = inst.references;
    in.gold = inst.answer;
    return in;
}

inline InstanceInput input_from_batch(const Batch& b, int row) {
    InstanceInput in;
    std::size_t r = static_cast<std::size_t>(row);
    in.question_ids = b.question_ids[r];
    in.passage_ids = b.passage_ids[r];
    in.question_len = b.question_len[r];
    in.passage_len = b.passage_len[r];
    in.features = b.features[r];
    in.pointer = b.pointer[r];
    in.candidate_ids = b.candidate_ids[r];
    in.references = b.references[r];
    in.gold = b.gold[r];
    return in;
}

struct AnswerDistribution {
    std::vector<double> scores;
    std::vector<double> probabilities;
    bool normalized = true; // explicit-reference sums are <= 1, flag false
    int predicted = -1;
};

struct AttentionTrace {
    std::vector<TensorValue> passage_states; // h_t, true positions
    TensorValue question_vector;             // h_q (final layer for GA)
    TensorValue attention;                   // alpha, padded length, exact zeros at pads
    TensorValue aggregate;                   // o (aggregation and pointer variants)
    std::vector<std::vector<TensorValue>> layer_states; // GA: per layer per position
    TensorValue pairwise_alpha;              // AoA: alpha_{t,j}
    TensorValue pairwise_beta;               // AoA: beta_{t,j}
    TensorValue question_attention;          // AoA: beta_j
};

struct ForwardOptions {
    bool with_loss = false;
    double loss_floor = 0.0; // training floors P(gold) at 1e-12 inside the log
    bool want_trace = true;
};

struct ForwardResult {
    AnswerDistribution dist;
    AttentionTrace trace;
    ad::Var loss; // valid only when requested
};

// argmax with ties broken toward the lowest candidate index
inline int argmax_lowest(const std::vector<double>& v) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(v.size()); ++i)
        if (v[static_cast<std::size_t>(i)] > v[static_cast<std::size_t>(best)]) best = i;
    return best;
}

// -log p, guarded: p must be positive unless a training floor is in effect
inline ad::Var log_loss(ad::Var p_gold, double floor = 0.0) {
    if (floor > 0.0) return ad::scale(ad::log(ad::clamp_min(p_gold, floor)), -1.0);
    if (p_gold.value().item() <= 0.0)
        throw numeric_error("log-loss undefined: P(gold) = 0 "
                            "(gold answer has no attended references)");
    return ad::scale(ad::log(p_gold), -1.0);
}

// ---- attention and distribution primitives ----

// alpha_t = softmax_t h_t^T W h_q over unmasked positions
inline ad::Var attend_bilinear(ad::Var H, ad::Var h_q, ad::Var W, const TensorValue& mask) {
    return ad::masked_softmax(ad::matmul(H, ad::matmul(W, h_q)), mask);
}

// alpha_t = softmax_t h_t^T h_q
inline ad::Var attend_inner(ad::Var H, ad::Var h_q, const TensorValue& mask) {
    return ad::masked_softmax(ad::matmul(H, h_q), mask);
}

// o = sum_t alpha_t h_t
inline ad::Var aggregate(ad::Var alpha, ad::Var H) { return ad::matmul(alpha, H); }

// P(a) = sum over R(a,p) of alpha_t; not normalized across candidates
inline ad::Var explicit_reference_scores(ad::Tape& tape, ad::Var alpha,
                                         const std::vector<std::vector<int>>& references) {
    const int T = alpha.value().dim();
    const int m = static_cast<int>(references.size());
    TensorValue R = TensorValue::zeros({m, T});
    for (int i = 0; i < m; ++i)
        for (int pos : references[static_cast<std::size_t>(i)]) {
            if (pos < 0 || pos >= T)
                throw error("explicit reference position " + std::to_string(pos) +
                            " outside passage of length " + std::to_string(T));
            R.at(i, pos) = 1.0;
        }
    return ad::matmul(ad::constant(tape, std::move(R)), alpha);
}

namespace readout {

inline TensorValue ones(int n) {
    TensorValue m = TensorValue::zeros({n});
    std::fill(m.data.begin(), m.data.end(), 1.0);
    return m;
}

// softmax over candidate scores e_o(a)^T o
inline ad::Var stanford_scores(ad::Var e_o_rows, ad::Var o) { return ad::matmul(e_o_rows, o); }

// softmax over the whole vocabulary (wide-softmax training distribution)
inline ad::Var wide_distribution(ad::Var e_o_table, ad::Var key) {
    ad::Var scores = ad::matmul(e_o_table, key);
    return ad::masked_softmax(scores, ones(scores.value().dim()));
}

// candidate i reads coordinate i of the reserved tail block of o
inline ad::Var one_hot_pointer_scores(ad::Var o, int max_candidates, int num_candidates) {
    if (num_candidates > max_candidates)
        throw data_error("one-hot pointer: candidate index exceeds reserved dims");
    ad::Var block = ad::slice(o, o.value().dim() - max_candidates, max_candidates);
    std::vector<ad::Var> coords;
    coords.reserve(static_cast<std::size_t>(num_candidates));
    for (int i = 0; i < num_candidates; ++i) coords.push_back(ad::pick(block, i));
    return ad::stack_scalars(coords);
}

// p(i) = softmax_i [0, e'(i)]^T o with fixed pointer vectors e'
inline ad::Var general_pointer_scores(ad::Var pointer_rows, ad::Var o, int max_candidates) {
    ad::Var block = ad::slice(o, o.value().dim() - max_candidates, max_candidates);
    return ad::matmul(pointer_rows, block);
}

} // namespace readout

// ---- the reader ----

class Reader {
public:
    Reader(ReaderConfig cfg, Vocabulary vocab, std::uint64_t init_seed)
        : cfg_(cfg), vocab_(std::move(vocab)) {
        cfg_.validate();
        build_parameters();
        initialize(init_seed);
    }

    const ReaderConfig& config() const { return cfg_; }
    const Vocabulary& vocab() const { return vocab_; }
    ParameterStore& params() { return params_; }
    const ParameterStore& params() const { return params_; }

    ForwardResult forward(ad::Tape& tape, const InstanceInput& in, const ForwardOptions& opts) {
        if (in.passage_len < 1 || in.question_len < 1)
            throw data_error("reader forward: empty question or passage");
        if (in.candidate_ids.empty()) throw data_error("reader forward: no candidates");
        if (cfg_.linguistic_features &&
            static_cast<int>(in.features.size()) < in.passage_len)
            throw data_error("reader forward: missing linguistic features");
        if (cfg_.pointer_features && static_cast<int>(in.pointer.size()) < in.passage_len)
            throw data_error("reader forward: missing pointer annotations");

        switch (cfg_.variant) {
            case ReaderVariant::Stanford:
            case ReaderVariant::StanfordWide:
            case ReaderVariant::Attentive:
            case ReaderVariant::OneHotPointer:
            case ReaderVariant::GeneralPointer:
                return forward_aggregation_family(tape, in, opts);
            case ReaderVariant::AttentionSum:
            case ReaderVariant::GatedAttention:
                return forward_gated_family(tape, in, opts);
            case ReaderVariant::AttentionOverAttention:
                return forward_aoa(tape, in, opts);
        }
        throw error("unreachable reader variant");
    }

    ForwardResult predict(const ClozeInstance& inst, bool want_trace = true) {
        ad::Tape tape;
        return forward(tape, make_input(cfg_, vocab_, inst), {false, 0.0, want_trace});
    }

    // fixed pointer vectors e'(i) for the general-pointer reader
    const TensorValue& pointer_table() const {
        return params_.value("pointer_vectors");
    }

private:
    ReaderConfig cfg_;
    Vocabulary vocab_;
    ParameterStore params_;
    RecurrentCellParams q_fwd_, q_bwd_; // layer-1 question encoder
    std::vector<RecurrentCellParams> p_fwd_, p_bwd_;       // passage encoder per layer
    std::vector<RecurrentCellParams> q_fwd_ga_, q_bwd_ga_; // GA extra question encoders

    void build_parameters() {
        const CellKind kind = cell_kind_for(cfg_.variant);
        const int in_dim = cfg_.input_dim();
        const int h = cfg_.hidden_dim;
        const int sd = cfg_.state_dim();

        params_.add("input_embedding", TensorValue::zeros({vocab_.size(), cfg_.embedding_dim}));

        p_fwd_.push_back(add_cell(params_, kind, "passage1.fwd", in_dim, h));
        p_bwd_.push_back(add_cell(params_, kind, "passage1.bwd", in_dim, h));
        q_fwd_ = add_cell(params_, kind, "question1.fwd", in_dim, h);
        q_bwd_ = add_cell(params_, kind, "question1.bwd", in_dim, h);
        if (cfg_.variant == ReaderVariant::GatedAttention) {
            for (int l = 2; l <= cfg_.layers; ++l) {
                std::string tag = std::to_string(l);
                p_fwd_.push_back(add_cell(params_, kind, "passage" + tag + ".fwd", sd, h));
                p_bwd_.push_back(add_cell(params_, kind, "passage" + tag + ".bwd", sd, h));
                q_fwd_ga_.push_back(add_cell(params_, kind, "question" + tag + ".fwd", in_dim, h));
                q_bwd_ga_.push_back(add_cell(params_, kind, "question" + tag + ".bwd", in_dim, h));
            }
        }

        if (is_aggregation(cfg_.variant))
            params_.add("output_embedding", TensorValue::zeros({vocab_.size(), sd}));
        if (cfg_.variant == ReaderVariant::Stanford || cfg_.variant == ReaderVariant::StanfordWide ||
            is_pointer(cfg_.variant))
            params_.add("attention_bilinear", TensorValue::zeros({sd, sd}));
        if (cfg_.variant == ReaderVariant::Attentive) {
            params_.add("attention_mlp.W1", TensorValue::zeros({cfg_.mlp_hidden, 2 * sd}));
            params_.add("attention_mlp.b1", TensorValue::zeros({cfg_.mlp_hidden}));
            params_.add("attention_mlp.w2", TensorValue::zeros({cfg_.mlp_hidden}));
            params_.add("attention_mlp.b2", TensorValue::zeros({1}));
            params_.add("output_mlp.W1", TensorValue::zeros({cfg_.mlp_hidden, 2 * sd}));
            params_.add("output_mlp.b1", TensorValue::zeros({cfg_.mlp_hidden}));
            params_.add("output_mlp.W2", TensorValue::zeros({sd, cfg_.mlp_hidden}));
            params_.add("output_mlp.b2", TensorValue::zeros({sd}));
        }
        if (cfg_.variant == ReaderVariant::GeneralPointer)
            params_.add("pointer_vectors",
                        TensorValue::zeros({cfg_.max_candidates, cfg_.max_candidates}),
                        /*trainable=*/false);
    }

    void initialize(std::uint64_t seed) {
        {
            Rng rng(split_seed(seed, "embedding"));
            init_embedding(params_.value("input_embedding"), rng, cfg_.embedding_init_range);
            if (params_.has("output_embedding"))
                init_embedding(params_.value("output_embedding"), rng, cfg_.embedding_init_range);
        }
        {
            Rng rng(split_seed(seed, "cells"));
            for (auto& c : p_fwd_) init_cell(params_, c, rng);
            for (auto& c : p_bwd_) init_cell(params_, c, rng);
            init_cell(params_, q_fwd_, rng);
            init_cell(params_, q_bwd_, rng);
            for (auto& c : q_fwd_ga_) init_cell(params_, c, rng);
            for (auto& c : q_bwd_ga_) init_cell(params_, c, rng);
        }
        Rng rng(split_seed(seed, "attention"));
        if (params_.has("attention_bilinear"))
            init_embedding(params_.value("attention_bilinear"), rng, cfg_.attention_init_range);
        for (const char* name : {"attention_mlp.W1", "attention_mlp.w2", "output_mlp.W1",
                                 "output_mlp.W2"})
            if (params_.has(name)) init_embedding(params_.value(name), rng, cfg_.attention_init_range);
        if (params_.has("pointer_vectors")) {
            Rng prng(split_seed(seed, "pointer"));
            params_.entry("pointer_vectors").value =
                random_orthogonal(cfg_.max_candidates, cfg_.max_candidates, prng);
        }
    }

    // token -> [embedding | linguistic features | pointer one-hot].
    // Linguistic features are defined on passage positions, so the question
    // side carries a zero block there. Pointer annotation marks candidate
    // occurrences on both sides: it stands in for anonymization's reference
    // marking, which rewrites question and passage alike.
    std::vector<ad::Var> embed_sequence(ad::Tape& tape, const InstanceInput& in, bool passage) {
        ad::Var table = ad::param(tape, params_, "input_embedding");
        const int len = passage ? in.passage_len : in.question_len;
        const auto& ids = passage ? in.passage_ids : in.question_ids;
        const int extra = cfg_.input_dim() - cfg_.embedding_dim;
        std::vector<ad::Var> xs;
        xs.reserve(static_cast<std::size_t>(len));
        for (int t = 0; t < len; ++t) {
            const int id = ids[static_cast<std::size_t>(t)];
            ad::Var x = ad::gather_row(table, id);
            if (extra > 0) {
                std::vector<double> block;
                block.reserve(static_cast<std::size_t>(extra));
                if (cfg_.linguistic_features) {
                    if (passage) {
                        auto f = in.features[static_cast<std::size_t>(t)].as_array();
                        block.insert(block.end(), f.begin(), f.end());
                    } else {
                        block.insert(block.end(), TokenFeatures::kCount, 0.0);
                    }
                }
                if (cfg_.pointer_features) {
                    if (passage) {
                        const auto& row = in.pointer[static_cast<std::size_t>(t)];
                        block.insert(block.end(), row.begin(), row.end());
                    } else {
                        std::vector<double> row(static_cast<std::size_t>(cfg_.max_candidates), 0.0);
                        for (std::size_t i = 0; i < in.candidate_ids.size(); ++i)
                            if (in.candidate_ids[i] == id && id != Vocabulary::kUnk) row[i] = 1.0;
                        block.insert(block.end(), row.begin(), row.end());
                    }
                }
                x = ad::concat(x, ad::constant(tape, TensorValue::vec(std::move(block))));
            }
            xs.push_back(x);
        }
        return xs;
    }

    static TensorValue ones_mask(int n) {
        TensorValue m = TensorValue::zeros({n});
        std::fill(m.data.begin(), m.data.end(), 1.0);
        return m;
    }

    // alpha over the padded passage length: exact zeros at padding
    TensorValue padded_attention(const TensorValue& alpha, const InstanceInput& in) const {
        TensorValue out = TensorValue::zeros({static_cast<int>(in.passage_ids.size())});
        for (int t = 0; t < in.passage_len; ++t)
            out.data[static_cast<std::size_t>(t)] = alpha.data[static_cast<std::size_t>(t)];
        return out;
    }

    void fill_trace(AttentionTrace& trace, const std::vector<ad::Var>& states, ad::Var h_q,
                    ad::Var alpha, const InstanceInput& in) const {
        for (const auto& s : states) trace.passage_states.push_back(s.value());
        trace.question_vector = h_q.value();
        trace.attention = padded_attention(alpha.value(), in);
    }

    ForwardResult finish_softmax_family(ad::Var cand_scores, const InstanceInput& in,
                                        const ForwardOptions& opts, ForwardResult&& result,
                                        ad::Var full_vocab_probs = {}) {
        ad::Var probs = ad::masked_softmax(cand_scores, ones_mask(cand_scores.value().dim()));
        result.dist.scores = cand_scores.value().data;
        result.dist.probabilities = probs.value().data;
        result.dist.normalized = true;
        result.dist.predicted = argmax_lowest(result.dist.scores);
        if (opts.with_loss) {
            if (in.gold < 0) throw data_error("loss requested without a gold answer");
            if (full_vocab_probs.valid()) {
                // wide-softmax training loss: -log P(gold) over the vocabulary
                int gold_token = in.candidate_ids[static_cast<std::size_t>(in.gold)];
                result.loss = log_loss(ad::pick(full_vocab_probs, gold_token), opts.loss_floor);
            } else {
                result.loss = log_loss(ad::pick(probs, in.gold), opts.loss_floor);
            }
        }
        return std::move(result);
    }

    ForwardResult finish_explicit_family(ad::Tape& tape, ad::Var alpha, const InstanceInput& in,
                                         const ForwardOptions& opts, ForwardResult&& result) {
        ad::Var ref_scores = explicit_reference_scores(tape, alpha, in.references);
        result.dist.scores = ref_scores.value().data;
        result.dist.probabilities = ref_scores.value().data;
        result.dist.normalized = false;
        result.dist.predicted = argmax_lowest(result.dist.probabilities);
        if (opts.with_loss) {
            if (in.gold < 0) throw data_error("loss requested without a gold answer");
            result.loss = log_loss(ad::pick(ref_scores, in.gold), opts.loss_floor);
        }
        return std::move(result);
    }

    // Stanford, wide-softmax Stanford, Attentive, and the pointer readers:
    // biLSTM encodings, a single attention over the passage, and a
    // variant-specific readout of o.
    ForwardResult forward_aggregation_family(ad::Tape& tape, const InstanceInput& in,
                                             const ForwardOptions& opts) {
        auto p_xs = embed_sequence(tape, in, true);
        auto q_xs = embed_sequence(tape, in, false);
        auto enc = bi_encode(tape, params_, p_fwd_[0], p_bwd_[0], p_xs);
        ad::Var h_q = encode_question(tape, params_, q_fwd_, q_bwd_, q_xs);
        ad::Var H = ad::stack_rows(enc.states);
        const TensorValue mask = ones_mask(in.passage_len);

        ad::Var alpha;
        if (cfg_.variant == ReaderVariant::Attentive) {
            ad::Var W1 = ad::param(tape, params_, "attention_mlp.W1");
            ad::Var b1 = ad::param(tape, params_, "attention_mlp.b1");
            ad::Var w2 = ad::param(tape, params_, "attention_mlp.w2");
            ad::Var b2 = ad::param(tape, params_, "attention_mlp.b2");
            std::vector<ad::Var> scores;
            scores.reserve(enc.states.size());
            for (const auto& h_t : enc.states) {
                ad::Var hidden = ad::tanh(
                    ad::add(ad::matmul(W1, ad::concat(h_t, h_q)), b1));
                scores.push_back(ad::add(ad::dot(w2, hidden), ad::pick(b2, 0)));
            }
            alpha = ad::masked_softmax(ad::stack_scalars(scores), mask);
        } else {
            ad::Var W = ad::param(tape, params_, "attention_bilinear");
            alpha = attend_bilinear(H, h_q, W, mask);
        }
        ad::Var o = aggregate(alpha, H);

        ForwardResult result;
        if (opts.want_trace) {
            fill_trace(result.trace, enc.states, h_q, alpha, in);
            result.trace.aggregate = o.value();
        }

        switch (cfg_.variant) {
            case ReaderVariant::Stanford: {
                ad::Var e_o = ad::gather_rows(ad::param(tape, params_, "output_embedding"),
                                              in.candidate_ids);
                return finish_softmax_family(readout::stanford_scores(e_o, o), in, opts,
                                             std::move(result));
            }
            case ReaderVariant::StanfordWide: {
                ad::Var table = ad::param(tape, params_, "output_embedding");
                ad::Var cand_scores = ad::matmul(ad::gather_rows(table, in.candidate_ids), o);
                ad::Var full;
                if (opts.with_loss) full = readout::wide_distribution(table, o);
                return finish_softmax_family(cand_scores, in, opts, std::move(result), full);
            }
            case ReaderVariant::Attentive: {
                ad::Var W1 = ad::param(tape, params_, "output_mlp.W1");
                ad::Var b1 = ad::param(tape, params_, "output_mlp.b1");
                ad::Var W2 = ad::param(tape, params_, "output_mlp.W2");
                ad::Var b2 = ad::param(tape, params_, "output_mlp.b2");
                ad::Var key = ad::add(
                    ad::matmul(W2, ad::tanh(ad::add(ad::matmul(W1, ad::concat(o, h_q)), b1))), b2);
                ad::Var table = ad::param(tape, params_, "output_embedding");
                ad::Var cand_scores = ad::matmul(ad::gather_rows(table, in.candidate_ids), key);
                ad::Var full;
                if (opts.with_loss) full = readout::wide_distribution(table, key);
                return finish_softmax_family(cand_scores, in, opts, std::move(result), full);
            }
            case ReaderVariant::OneHotPointer: {
                const int m = static_cast<int>(in.candidate_ids.size());
                return finish_softmax_family(
                    readout::one_hot_pointer_scores(o, cfg_.max_candidates, m), in, opts,
                    std::move(result));
            }
            case ReaderVariant::GeneralPointer: {
                const int m = static_cast<int>(in.candidate_ids.size());
                std::vector<int> rows;
                for (int i = 0; i < m; ++i) rows.push_back(i);
                ad::Var pointer_rows =
                    ad::gather_rows(ad::param(tape, params_, "pointer_vectors"), rows);
                return finish_softmax_family(
                    readout::general_pointer_scores(pointer_rows, o, cfg_.max_candidates), in,
                    opts, std::move(result));
            }
            default:
                throw error("unreachable");
        }
    }

    // Attention-Sum is the K=1 case of the gated-attention stack.
    ForwardResult forward_gated_family(ad::Tape& tape, const InstanceInput& in,
                                       const ForwardOptions& opts) {
        const int K = cfg_.variant == ReaderVariant::GatedAttention ? cfg_.layers : 1;
        auto p_xs = embed_sequence(tape, in, true);
        auto q_xs = embed_sequence(tape, in, false);

        ForwardResult result;
        std::vector<ad::Var> states;
        ad::Var h_q_layer;
        for (int l = 1; l <= K; ++l) {
            if (l == 1) {
                h_q_layer = encode_question(tape, params_, q_fwd_, q_bwd_, q_xs);
                states = bi_encode(tape, params_, p_fwd_[0], p_bwd_[0], p_xs).states;
            } else {
                // gate the previous layer by that layer's question vector,
                // then re-encode with this layer's own parameters
                std::vector<ad::Var> gated;
                gated.reserve(states.size());
                for (const auto& h_t : states) gated.push_back(ad::mul(h_t, h_q_layer));
                h_q_layer = encode_question(tape, params_, q_fwd_ga_[static_cast<std::size_t>(l - 2)],
                                            q_bwd_ga_[static_cast<std::size_t>(l - 2)], q_xs);
                states = bi_encode(tape, params_, p_fwd_[static_cast<std::size_t>(l - 1)],
                                   p_bwd_[static_cast<std::size_t>(l - 1)], gated)
                             .states;
            }
            if (opts.want_trace && cfg_.variant == ReaderVariant::GatedAttention) {
                std::vector<TensorValue> layer;
                for (const auto& s : states) layer.push_back(s.value());
                result.trace.layer_states.push_back(std::move(layer));
            }
        }

        ad::Var H = ad::stack_rows(states);
        ad::Var alpha = attend_inner(H, h_q_layer, ones_mask(in.passage_len));
        if (opts.want_trace) fill_trace(result.trace, states, h_q_layer, alpha, in);
        return finish_explicit_family(tape, alpha, in, opts, std::move(result));
    }

    ForwardResult forward_aoa(ad::Tape& tape, const InstanceInput& in, const ForwardOptions& opts) {
        auto p_xs = embed_sequence(tape, in, true);
        auto q_xs = embed_sequence(tape, in, false);
        auto p_enc = bi_encode(tape, params_, p_fwd_[0], p_bwd_[0], p_xs);
        auto q_enc = bi_encode(tape, params_, q_fwd_, q_bwd_, q_xs);

        ad::Var H = ad::stack_rows(p_enc.states);  // T x 2h
        ad::Var Hq = ad::stack_rows(q_enc.states); // J x 2h
        ad::Var M = ad::matmul(H, ad::transpose(Hq)); // pairwise scores, T x J

        TensorValue full = TensorValue::zeros({in.passage_len, in.question_len});
        std::fill(full.data.begin(), full.data.end(), 1.0);
        ad::Var alpha_tj = ad::masked_softmax(M, full, 0); // over passage positions
        ad::Var beta_tj = ad::masked_softmax(M, full, 1);  // over question positions

        // beta_j = mean over unmasked passage positions of beta_{t,j}
        TensorValue avg = TensorValue::zeros({in.passage_len});
        std::fill(avg.data.begin(), avg.data.end(), 1.0 / static_cast<double>(in.passage_len));
        ad::Var beta_j = ad::matmul(ad::constant(tape, std::move(avg)), beta_tj);
        ad::Var alpha = ad::matmul(alpha_tj, beta_j);

        ForwardResult result;
        if (opts.want_trace) {
            // trace reports the final-state question summary used elsewhere,
            // even though this variant attends per question position
            ad::Var h_q = ad::concat(q_enc.final_forward, q_enc.final_backward);
            fill_trace(result.trace, p_enc.states, h_q, alpha, in);
            result.trace.pairwise_alpha = alpha_tj.value();
            result.trace.pairwise_beta = beta_tj.value();
            result.trace.question_attention = beta_j.value();
        }
        return finish_explicit_family(tape, alpha, in, opts, std::move(result));
    }
};

} // namespace clozelab
