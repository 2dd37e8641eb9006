// Cloze-instance data model: synthetic corpus generation, string-matching
// anonymization, entity reshuffling, linguistic features, pointer
// annotation, bucketed batching, and line-delimited serialization.

#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clozelab/rng.hpp"
#include "clozelab/tensor.hpp"

namespace clozelab {

using json = nlohmann::json;

inline constexpr const char* kBlankToken = "@blank";
inline constexpr const char* kPadToken = "@pad";
inline constexpr const char* kUnkToken = "@unk";

inline bool is_entity_identifier(const std::string& tok) {
    if (tok.rfind("@entity", 0) != 0 || tok.size() <= 7) return false;
    for (std::size_t i = 7; i < tok.size(); ++i)
        if (!std::isdigit(static_cast<unsigned char>(tok[i]))) return false;
    return true;
}

inline std::string entity_identifier(int k) { return "@entity" + std::to_string(k); }

inline int entity_identifier_index(const std::string& tok) {
    if (!is_entity_identifier(tok)) throw error("not an entity identifier: " + tok);
    return std::stoi(tok.substr(7));
}

// One (question, passage, answer, candidates) tuple. Candidates are kept
// in first-occurrence order in the passage; `references[i]` lists the
// passage positions where candidate i occurs (start position for
// multi-token candidates).
struct ClozeInstance {
    std::vector<std::string> question;
    std::vector<std::string> passage;
    std::vector<std::string> candidates;
    int answer = -1;
    std::vector<std::vector<int>> references;

    bool operator==(const ClozeInstance& o) const = default;
};

using Corpus = std::vector<ClozeInstance>;

inline std::vector<std::string> split_tokens(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
}

// Positions where the candidate token sequence starts in the passage.
inline std::vector<int> find_references(const std::vector<std::string>& passage,
                                        const std::string& candidate) {
    auto cand = split_tokens(candidate);
    std::vector<int> out;
    if (cand.empty() || passage.size() < cand.size()) return out;
    for (std::size_t p = 0; p + cand.size() <= passage.size(); ++p) {
        bool match = true;
        for (std::size_t k = 0; k < cand.size(); ++k)
            if (passage[p + k] != cand[k]) {
                match = false;
                break;
            }
        if (match) out.push_back(static_cast<int>(p));
    }
    return out;
}

inline void recompute_references(ClozeInstance& inst) {
    inst.references.clear();
    for (const auto& c : inst.candidates) inst.references.push_back(find_references(inst.passage, c));
}

inline void validate_instance(const ClozeInstance& inst, const std::string& where = "instance") {
    auto fail = [&](const std::string& msg) { throw data_error(where + ": " + msg); };
    if (inst.candidates.empty()) fail("empty candidate list");
    if (inst.passage.empty()) fail("empty passage");
    int blanks = static_cast<int>(std::count(inst.question.begin(), inst.question.end(), kBlankToken));
    if (blanks != 1) fail("question must contain exactly one blank, found " + std::to_string(blanks));
    if (inst.answer < 0 || inst.answer >= static_cast<int>(inst.candidates.size()))
        fail("answer index out of range");
    {
        std::set<std::string> uniq(inst.candidates.begin(), inst.candidates.end());
        if (uniq.size() != inst.candidates.size()) fail("duplicate candidates");
    }
    if (inst.references.size() != inst.candidates.size())
        fail("references not aligned with candidates");
    std::set<int> seen;
    for (std::size_t i = 0; i < inst.candidates.size(); ++i) {
        auto expect = find_references(inst.passage, inst.candidates[i]);
        if (inst.references[i] != expect)
            fail("stale references for candidate '" + inst.candidates[i] + "'");
        for (int p : inst.references[i])
            if (!seen.insert(p).second) fail("reference lists overlap at position " + std::to_string(p));
    }
    if (inst.references[static_cast<std::size_t>(inst.answer)].empty())
        fail("answer '" + inst.candidates[static_cast<std::size_t>(inst.answer)] +
             "' does not occur in the passage");
}

// ---- vocabulary ----

class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kBlank = 1;
    static constexpr int kUnk = 2;

    Vocabulary() {
        tokens_ = {kPadToken, kBlankToken, kUnkToken};
        for (std::size_t i = 0; i < tokens_.size(); ++i) ids_[tokens_[i]] = static_cast<int>(i);
    }

    static Vocabulary build(const Corpus& corpus) {
        std::set<std::string> toks;
        for (const auto& inst : corpus) {
            toks.insert(inst.passage.begin(), inst.passage.end());
            toks.insert(inst.question.begin(), inst.question.end());
            for (const auto& c : inst.candidates)
                for (const auto& t : split_tokens(c)) toks.insert(t);
        }
        Vocabulary v;
        for (const auto& t : toks) v.intern(t);
        v.index_entities();
        return v;
    }

    static Vocabulary from_tokens(const std::vector<std::string>& all) {
        Vocabulary v;
        if (all.size() < 3 || all[0] != kPadToken || all[1] != kBlankToken || all[2] != kUnkToken)
            throw data_error("vocabulary token list missing reserved prefix");
        for (std::size_t i = 3; i < all.size(); ++i) {
            if (v.ids_.count(all[i])) throw data_error("duplicate vocabulary token " + all[i]);
            v.tokens_.push_back(all[i]);
            v.ids_[all[i]] = static_cast<int>(i);
        }
        v.index_entities();
        return v;
    }

    int id(const std::string& tok) const {
        auto it = ids_.find(tok);
        return it == ids_.end() ? kUnk : it->second;
    }
    bool contains(const std::string& tok) const { return ids_.count(tok) != 0; }
    const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    int size() const { return static_cast<int>(tokens_.size()); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    // ids of @entityN tokens, in increasing N
    const std::vector<int>& entity_ids() const { return entity_ids_; }

    std::vector<int> ids_of(const std::vector<std::string>& toks) const {
        std::vector<int> out;
        out.reserve(toks.size());
        for (const auto& t : toks) out.push_back(id(t));
        return out;
    }

private:
    void intern(const std::string& tok) {
        if (ids_.count(tok)) return;
        ids_[tok] = static_cast<int>(tokens_.size());
        tokens_.push_back(tok);
    }
    void index_entities() {
        std::vector<std::pair<int, int>> found; // (entity number, id)
        for (std::size_t i = 0; i < tokens_.size(); ++i)
            if (is_entity_identifier(tokens_[i]))
                found.emplace_back(entity_identifier_index(tokens_[i]), static_cast<int>(i));
        std::sort(found.begin(), found.end());
        entity_ids_.clear();
        for (auto& [n, id] : found) entity_ids_.push_back(id);
    }

    std::vector<std::string> tokens_;
    std::map<std::string, int> ids_;
    std::vector<int> entity_ids_;
};

// ---- synthetic corpus ----
//
// Passages are sequences of templated facts "<entity> <predicate> <entity> ."
// over a small entity set; the question repeats one fact with one argument
// blanked, and that (anchor, predicate) pattern matches exactly one fact,
// so the answer is recoverable only by pattern matching. Argument slots are
// dealt from a balanced multiset, which keeps candidate frequencies
// uninformative.

struct SyntheticConfig {
    int num_entities = 8;
    int num_predicates = 3;
    int passage_len = 5; // number of facts
    int num_candidates = 4;
    int size = 1000;
    std::uint64_t seed = 1;
};

inline std::string synthetic_entity_name(int k) { return "ent" + std::to_string(k); }
inline std::string synthetic_predicate_name(int k) { return "rel" + std::to_string(k); }

namespace gen_detail {

struct Fact {
    int subject, predicate, object;
};

inline bool deal_facts(Rng& rng, const std::vector<int>& cands, int num_facts,
                       std::vector<Fact>& out) {
    const int C = static_cast<int>(cands.size());
    std::vector<int> slots;
    slots.reserve(static_cast<std::size_t>(2 * num_facts));
    for (int k = 0; k < 2 * num_facts; ++k) slots.push_back(cands[static_cast<std::size_t>(k % C)]);
    rng.shuffle(slots);
    // repair facts whose two slots collide by swapping with a later slot
    for (int i = 0; i < num_facts; ++i) {
        std::size_t a = static_cast<std::size_t>(2 * i), b = a + 1;
        if (slots[a] != slots[b]) continue;
        bool fixed = false;
        for (std::size_t j = b + 1; j < slots.size() && !fixed; ++j) {
            std::size_t partner = j ^ 1u;
            if (slots[j] != slots[a] && (partner <= b || slots[partner] != slots[b])) {
                std::swap(slots[b], slots[j]);
                fixed = true;
            }
        }
        if (!fixed) return false;
    }
    out.clear();
    for (int i = 0; i < num_facts; ++i)
        out.push_back({slots[static_cast<std::size_t>(2 * i)], 0,
                       slots[static_cast<std::size_t>(2 * i + 1)]});
    return true;
}

} // namespace gen_detail

inline ClozeInstance generate_synthetic_instance(const SyntheticConfig& cfg, Rng& rng) {
    const int C = cfg.num_candidates, L = cfg.passage_len;
    for (int attempt = 0; attempt < 200; ++attempt) {
        // candidate entities for this instance
        std::vector<int> pool(static_cast<std::size_t>(cfg.num_entities));
        for (int i = 0; i < cfg.num_entities; ++i) pool[static_cast<std::size_t>(i)] = i;
        rng.shuffle(pool);
        std::vector<int> cands(pool.begin(), pool.begin() + C);

        std::vector<gen_detail::Fact> facts;
        if (!gen_detail::deal_facts(rng, cands, L, facts)) continue;
        for (auto& f : facts) f.predicate = static_cast<int>(rng.integer(static_cast<std::uint64_t>(cfg.num_predicates)));

        // Draw the answer entity uniformly over the candidates before
        // looking at the layout, so candidate frequency carries no signal
        // about the answer; then blank a unique-anchor slot holding it.
        const int answer_entity = cands[static_cast<std::size_t>(rng.integer(static_cast<std::uint64_t>(C)))];
        const bool blank_object = rng.uniform() < 0.5;
        std::vector<int> eligible;
        for (int i = 0; i < L; ++i) {
            int blanked = blank_object ? facts[i].object : facts[i].subject;
            if (blanked != answer_entity) continue;
            bool unique = true;
            for (int j = 0; j < L && unique; ++j) {
                if (i == j) continue;
                bool same_anchor = blank_object
                                       ? (facts[j].subject == facts[i].subject &&
                                          facts[j].predicate == facts[i].predicate)
                                       : (facts[j].object == facts[i].object &&
                                          facts[j].predicate == facts[i].predicate);
                if (same_anchor) unique = false;
            }
            if (unique) eligible.push_back(i);
        }
        if (eligible.empty()) continue;
        const auto& target = facts[static_cast<std::size_t>(
            eligible[static_cast<std::size_t>(rng.integer(eligible.size()))])];

        ClozeInstance inst;
        for (const auto& f : facts) {
            inst.passage.push_back(synthetic_entity_name(f.subject));
            inst.passage.push_back(synthetic_predicate_name(f.predicate));
            inst.passage.push_back(synthetic_entity_name(f.object));
            inst.passage.push_back(".");
        }
        inst.question = {blank_object ? synthetic_entity_name(target.subject) : kBlankToken,
                         synthetic_predicate_name(target.predicate),
                         blank_object ? kBlankToken : synthetic_entity_name(target.object), "."};

        // candidates in first-occurrence order
        std::set<std::string> cand_set;
        for (int c : cands) cand_set.insert(synthetic_entity_name(c));
        for (const auto& tok : inst.passage)
            if (cand_set.count(tok) &&
                std::find(inst.candidates.begin(), inst.candidates.end(), tok) == inst.candidates.end())
                inst.candidates.push_back(tok);

        const std::string answer_tok =
            synthetic_entity_name(blank_object ? target.object : target.subject);
        auto it = std::find(inst.candidates.begin(), inst.candidates.end(), answer_tok);
        inst.answer = static_cast<int>(it - inst.candidates.begin());
        recompute_references(inst);
        validate_instance(inst, "generated instance");
        return inst;
    }
    throw data_error("synthetic generator: configuration unsatisfiable after 200 attempts");
}

inline Corpus generate_synthetic(const SyntheticConfig& cfg) {
    if (cfg.num_candidates < 2) throw data_error("synthetic generator: need at least 2 candidates");
    if (cfg.num_candidates > cfg.num_entities)
        throw data_error("synthetic generator: candidates exceed entities");
    if (2 * cfg.passage_len < cfg.num_candidates)
        throw data_error("synthetic generator: passage too short to cover candidates");
    if (cfg.num_predicates < 1 || cfg.size < 1 || cfg.passage_len < 1)
        throw data_error("synthetic generator: non-positive config value");
    Corpus corpus;
    corpus.reserve(static_cast<std::size_t>(cfg.size));
    for (int i = 0; i < cfg.size; ++i) {
        Rng rng(split_seed(cfg.seed, "gen", static_cast<std::uint64_t>(i)));
        corpus.push_back(generate_synthetic_instance(cfg, rng));
    }
    return corpus;
}

// ---- anonymization ----

// Replace every exact-string occurrence of each candidate in passage and
// question by @entityK; K values are a seeded random draw from [0, pool).
inline ClozeInstance anonymize(const ClozeInstance& inst, std::uint64_t assignment_seed,
                               int pool_size = 0) {
    const int C = static_cast<int>(inst.candidates.size());
    if (C == 0) throw data_error("anonymize: no candidates");
    const int pool = std::max(pool_size, C);

    std::vector<std::vector<std::string>> cand_tokens;
    for (const auto& c : inst.candidates) {
        auto toks = split_tokens(c);
        if (toks.empty()) throw data_error("anonymize: empty candidate string");
        if (find_references(inst.passage, c).empty())
            throw data_error("anonymize: candidate '" + c + "' not present in passage");
        cand_tokens.push_back(std::move(toks));
    }

    Rng rng(assignment_seed);
    auto perm = rng.permutation(static_cast<std::size_t>(pool));
    std::vector<std::string> ids(static_cast<std::size_t>(C));
    for (int i = 0; i < C; ++i) ids[static_cast<std::size_t>(i)] = entity_identifier(static_cast<int>(perm[static_cast<std::size_t>(i)]));

    // longest-match-first, left to right
    std::vector<int> order(static_cast<std::size_t>(C));
    for (int i = 0; i < C; ++i) order[static_cast<std::size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return cand_tokens[static_cast<std::size_t>(a)].size() > cand_tokens[static_cast<std::size_t>(b)].size();
    });
    auto rewrite = [&](const std::vector<std::string>& toks) {
        std::vector<std::string> out;
        std::size_t p = 0;
        while (p < toks.size()) {
            int hit = -1;
            for (int i : order) {
                const auto& ct = cand_tokens[static_cast<std::size_t>(i)];
                if (p + ct.size() > toks.size()) continue;
                bool match = true;
                for (std::size_t k = 0; k < ct.size() && match; ++k) match = toks[p + k] == ct[k];
                if (match) {
                    hit = i;
                    break;
                }
            }
            if (hit >= 0) {
                out.push_back(ids[static_cast<std::size_t>(hit)]);
                p += cand_tokens[static_cast<std::size_t>(hit)].size();
            } else {
                out.push_back(toks[p]);
                ++p;
            }
        }
        return out;
    };

    ClozeInstance out;
    out.passage = rewrite(inst.passage);
    out.question = rewrite(inst.question);
    out.candidates.resize(static_cast<std::size_t>(C));
    for (int i = 0; i < C; ++i) out.candidates[static_cast<std::size_t>(i)] = ids[static_cast<std::size_t>(i)];
    out.answer = inst.answer;
    recompute_references(out);
    validate_instance(out, "anonymized instance");
    return out;
}

inline bool is_anonymized(const ClozeInstance& inst) {
    return !inst.candidates.empty() &&
           std::all_of(inst.candidates.begin(), inst.candidates.end(), is_entity_identifier);
}

// Apply @entityK -> @entity{perm[K]} consistently to passage, question,
// candidates; reference positions are unchanged.
inline ClozeInstance apply_entity_permutation(const ClozeInstance& inst,
                                              const std::vector<std::size_t>& perm) {
    if (!is_anonymized(inst)) throw data_error("entity reshuffle requires an anonymized instance");
    auto rename = [&](const std::string& tok) {
        if (!is_entity_identifier(tok)) return tok;
        int k = entity_identifier_index(tok);
        if (k < 0 || static_cast<std::size_t>(k) >= perm.size())
            throw data_error("entity id " + tok + " outside permutation domain");
        return entity_identifier(static_cast<int>(perm[static_cast<std::size_t>(k)]));
    };
    ClozeInstance out = inst;
    for (auto& t : out.passage) t = rename(t);
    for (auto& t : out.question) t = rename(t);
    for (auto& c : out.candidates) c = rename(c);
    recompute_references(out);
    validate_instance(out, "reshuffled instance");
    return out;
}

// Fresh random permutation of the identifier universe (at least the ids
// present in the instance).
inline ClozeInstance reshuffle_entities(const ClozeInstance& inst, std::uint64_t epoch_seed,
                                        int universe_size = 0) {
    if (!is_anonymized(inst)) throw data_error("entity reshuffle requires an anonymized instance");
    int max_id = 0;
    for (const auto& c : inst.candidates) max_id = std::max(max_id, entity_identifier_index(c));
    const std::size_t universe = static_cast<std::size_t>(std::max(universe_size, max_id + 1));
    Rng rng(epoch_seed);
    return apply_entity_permutation(inst, rng.permutation(universe));
}

// ---- linguistic features ----

struct TokenFeatures {
    double in_question = 0.0;
    double passage_frequency = 0.0;
    double first_occurrence = 0.0; // fraction of passage length
    double context_match = 0.0;    // candidate positions only

    static constexpr int kCount = 4;
    std::array<double, kCount> as_array() const {
        return {in_question, passage_frequency, first_occurrence, context_match};
    }

    bool operator==(const TokenFeatures&) const = default;
};

// context_match at a candidate position compares the +-window tokens around
// it with the tokens around the blank in the question, centers excluded.
// Offsets whose question index falls outside the question are skipped;
// an offset with question context but no passage context is a mismatch.
inline std::vector<TokenFeatures> compute_linguistic_features(const ClozeInstance& inst,
                                                              int context_window) {
    const auto& p = inst.passage;
    const auto& q = inst.question;
    const int T = static_cast<int>(p.size());
    const int Q = static_cast<int>(q.size());
    int blank = -1;
    for (int j = 0; j < Q; ++j)
        if (q[static_cast<std::size_t>(j)] == kBlankToken) blank = j;
    if (blank < 0) throw data_error("features: question has no blank token");

    std::set<std::string> qset(q.begin(), q.end());
    std::map<std::string, int> freq;
    std::map<std::string, int> first;
    for (int t = 0; t < T; ++t) {
        const auto& tok = p[static_cast<std::size_t>(t)];
        ++freq[tok];
        if (!first.count(tok)) first[tok] = t;
    }
    std::set<int> candidate_positions;
    for (const auto& refs : inst.references) candidate_positions.insert(refs.begin(), refs.end());

    std::vector<TokenFeatures> out(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) {
        const auto& tok = p[static_cast<std::size_t>(t)];
        TokenFeatures& f = out[static_cast<std::size_t>(t)];
        f.in_question = qset.count(tok) ? 1.0 : 0.0;
        f.passage_frequency = static_cast<double>(freq[tok]);
        f.first_occurrence = static_cast<double>(first[tok]) / static_cast<double>(T);
        if (candidate_positions.count(t)) {
            bool match = true;
            int compared = 0;
            for (int d = -context_window; d <= context_window && match; ++d) {
                if (d == 0) continue;
                int qi = blank + d;
                if (qi < 0 || qi >= Q) continue;
                int pi = t + d;
                if (pi < 0 || pi >= T) {
                    match = false;
                    break;
                }
                ++compared;
                match = p[static_cast<std::size_t>(pi)] == q[static_cast<std::size_t>(qi)];
            }
            f.context_match = (match && compared > 0) ? 1.0 : 0.0;
        }
    }
    return out;
}

// One-hot candidate-index rows per passage token: candidate i (1-based in
// candidate order) puts a one at position i-1; non-candidate tokens get
// the zero vector.
inline std::vector<std::vector<double>> pointer_annotate(const ClozeInstance& inst,
                                                         int max_candidates) {
    if (static_cast<int>(inst.candidates.size()) > max_candidates)
        throw data_error("pointer annotation: " + std::to_string(inst.candidates.size()) +
                         " candidates exceed max " + std::to_string(max_candidates));
    std::vector<std::vector<double>> out(inst.passage.size(),
                                         std::vector<double>(static_cast<std::size_t>(max_candidates), 0.0));
    for (std::size_t i = 0; i < inst.references.size(); ++i)
        for (int pos : inst.references[i]) out[static_cast<std::size_t>(pos)][i] = 1.0;
    return out;
}

// ---- batching ----

struct BatchOptions {
    int batch_size = 32;
    int bucket_count = 10; // prefetch windows of bucket_count * batch_size
    std::uint64_t seed = 1;
    int context_window = 2;
    int max_candidates = 5;
    bool with_features = false;
    bool with_pointer = false;
};

struct Batch {
    std::vector<int> corpus_indices;
    std::vector<int> question_len, passage_len;
    std::vector<std::vector<int>> question_ids; // padded with Vocabulary::kPad
    std::vector<std::vector<int>> passage_ids;
    std::vector<std::vector<double>> question_mask;
    std::vector<std::vector<double>> passage_mask;
    std::vector<std::vector<TokenFeatures>> features;        // per true position
    std::vector<std::vector<std::vector<double>>> pointer;   // per true position
    std::vector<std::vector<int>> candidate_ids;             // token ids per candidate
    std::vector<std::vector<std::vector<int>>> references;   // positions per candidate
    std::vector<int> gold;

    int size() const { return static_cast<int>(corpus_indices.size()); }
};

inline std::vector<Batch> batchify(const Corpus& corpus, const Vocabulary& vocab,
                                   const BatchOptions& opts) {
    if (corpus.empty()) throw data_error("batchify: empty corpus");
    if (opts.batch_size < 1 || opts.bucket_count < 1) throw data_error("batchify: bad batch config");

    Rng rng(opts.seed);
    auto order = rng.permutation(corpus.size());

    const std::size_t window = static_cast<std::size_t>(opts.batch_size) *
                               static_cast<std::size_t>(opts.bucket_count);
    for (std::size_t start = 0; start < order.size(); start += window) {
        auto lo = order.begin() + static_cast<std::ptrdiff_t>(start);
        auto hi = order.begin() + static_cast<std::ptrdiff_t>(std::min(start + window, order.size()));
        std::stable_sort(lo, hi, [&](std::size_t a, std::size_t b) {
            return corpus[a].passage.size() < corpus[b].passage.size();
        });
    }

    std::vector<Batch> batches;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(opts.batch_size)) {
        std::size_t end = std::min(start + static_cast<std::size_t>(opts.batch_size), order.size());
        Batch b;
        std::size_t max_q = 0, max_p = 0;
        for (std::size_t k = start; k < end; ++k) {
            const auto& inst = corpus[order[k]];
            max_q = std::max(max_q, inst.question.size());
            max_p = std::max(max_p, inst.passage.size());
        }
        for (std::size_t k = start; k < end; ++k) {
            const auto& inst = corpus[order[k]];
            b.corpus_indices.push_back(static_cast<int>(order[k]));
            b.question_len.push_back(static_cast<int>(inst.question.size()));
            b.passage_len.push_back(static_cast<int>(inst.passage.size()));

            std::vector<int> qids(max_q, Vocabulary::kPad), pids(max_p, Vocabulary::kPad);
            std::vector<double> qmask(max_q, 0.0), pmask(max_p, 0.0);
            for (std::size_t j = 0; j < inst.question.size(); ++j) {
                qids[j] = vocab.id(inst.question[j]);
                qmask[j] = 1.0;
            }
            for (std::size_t j = 0; j < inst.passage.size(); ++j) {
                pids[j] = vocab.id(inst.passage[j]);
                pmask[j] = 1.0;
            }
            b.question_ids.push_back(std::move(qids));
            b.passage_ids.push_back(std::move(pids));
            b.question_mask.push_back(std::move(qmask));
            b.passage_mask.push_back(std::move(pmask));

            b.features.push_back(opts.with_features
                                     ? compute_linguistic_features(inst, opts.context_window)
                                     : std::vector<TokenFeatures>{});
            b.pointer.push_back(opts.with_pointer ? pointer_annotate(inst, opts.max_candidates)
                                                  : std::vector<std::vector<double>>{});
            std::vector<int> cids;
            for (const auto& c : inst.candidates) cids.push_back(vocab.id(c));
            b.candidate_ids.push_back(std::move(cids));
            b.references.push_back(inst.references);
            b.gold.push_back(inst.answer);
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

// ---- serialization ----
//
// Line-delimited records, one JSON object per line. An optional first line
// {"meta": {...}} carries the generating config and seed.

inline json instance_to_json(const ClozeInstance& inst, bool include_references) {
    json j;
    j["question"] = inst.question;
    j["passage"] = inst.passage;
    j["candidates"] = inst.candidates;
    j["answer"] = inst.answer;
    if (include_references) j["references"] = inst.references;
    return j;
}

inline ClozeInstance instance_from_json(const json& j, const std::string& where) {
    ClozeInstance inst;
    try {
        inst.question = j.at("question").get<std::vector<std::string>>();
        inst.passage = j.at("passage").get<std::vector<std::string>>();
        inst.candidates = j.at("candidates").get<std::vector<std::string>>();
        inst.answer = j.at("answer").get<int>();
        if (j.contains("references"))
            inst.references = j.at("references").get<std::vector<std::vector<int>>>();
        else
            recompute_references(inst);
    } catch (const json::exception& e) {
        throw data_error(where + ": " + e.what());
    }
    validate_instance(inst, where);
    return inst;
}

struct CorpusFile {
    Corpus instances;
    json meta; // null when absent
};

inline void write_corpus(const Corpus& corpus, const std::string& path, const json& meta = {},
                         bool include_references = true) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw data_error("cannot open for writing: " + path);
    if (!meta.is_null()) out << json{{"meta", meta}}.dump() << "\n";
    for (const auto& inst : corpus) out << instance_to_json(inst, include_references).dump() << "\n";
    if (!out) throw data_error("write failed: " + path);
}

inline CorpusFile read_corpus(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("cannot open corpus: " + path);
    CorpusFile file;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::string where = path + ":" + std::to_string(lineno);
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded()) throw data_error(where + ": malformed JSON record");
        if (lineno == 1 && j.is_object() && j.contains("meta")) {
            file.meta = j["meta"];
            continue;
        }
        file.instances.push_back(instance_from_json(j, where));
    }
    return file;
}

} // namespace clozelab
