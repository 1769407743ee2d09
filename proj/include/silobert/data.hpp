#pragma once

// Synthetic clinical-style corpus: templated note sentences with gold IOB
// spans over {problem, treatment, test}, a greedy longest-match subword
// tokenizer, MLM/NSP example construction, and silo splitting by patient
// or by note.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "silobert/errors.hpp"
#include "silobert/rng.hpp"

namespace silobert {

constexpr int kIgnoreIndex = -1;

struct Document {
    std::string patient_id;
    std::string note_id;
    std::vector<std::vector<std::string>> sentences;  // word tokens
};

struct NerExample {
    std::string patient_id;
    std::string note_id;
    std::vector<std::string> tokens;
    std::vector<std::string> tags;  // IOB labels aligned with tokens
};

/// True when every I-x is preceded by B-x or I-x of the same class.
inline bool iob_well_formed(std::span<const std::string> tags) {
    std::string open;
    for (const std::string& tag : tags) {
        if (tag == "O") {
            open.clear();
        } else if (tag.starts_with("B-")) {
            open = tag.substr(2);
        } else if (tag.starts_with("I-")) {
            if (open != tag.substr(2)) return false;
        } else {
            return false;
        }
    }
    return true;
}

// ---------------------------------------------------------------------------
// Corpus generation
// ---------------------------------------------------------------------------

struct EntityLexicons {
    std::vector<std::string> problems;
    std::vector<std::string> treatments;
    std::vector<std::string> tests;

    void validate() const {
        if (problems.empty() || treatments.empty() || tests.empty()) {
            throw ConfigError("entity lexicons must be nonempty");
        }
        std::set<std::string> seen;
        for (const auto* list : {&problems, &treatments, &tests}) {
            for (const std::string& e : *list) {
                if (!seen.insert(e).second) {
                    throw ConfigError("entity lexicons overlap on: " + e);
                }
            }
        }
    }
};

inline EntityLexicons default_lexicons() {
    return EntityLexicons{
        {"severe asthma", "chronic migraine", "acute bronchitis",
         "type two diabetes", "essential hypertension", "atrial fibrillation",
         "community acquired pneumonia", "congestive heart failure",
         "chronic kidney disease", "iron deficiency anemia",
         "gastroesophageal reflux", "seasonal allergies", "lower back pain",
         "persistent vertigo", "bacterial sinusitis", "rheumatoid arthritis",
         "unstable angina", "peptic ulcer", "panic disorder",
         "mild concussion", "cellulitis", "hypothyroidism", "hyperlipidemia",
         "osteoporosis", "gout flare", "pulmonary embolism",
         "deep vein thrombosis", "urinary tract infection",
         "viral gastroenteritis", "sleep apnea"},
        {"lisinopril", "metformin", "albuterol inhaler", "oral antibiotics",
         "intravenous fluids", "physical therapy", "warfarin", "atorvastatin",
         "insulin glargine", "prednisone taper", "amoxicillin",
         "supplemental oxygen", "beta blocker therapy",
         "proton pump inhibitor", "levothyroxine", "anticoagulation therapy",
         "ibuprofen", "nebulizer treatments", "dietary modification",
         "furosemide", "aspirin therapy", "antihistamines", "statin therapy",
         "gabapentin", "wound care"},
        {"chest radiograph", "complete blood count", "basic metabolic panel",
         "electrocardiogram", "echocardiogram", "computed tomography",
         "magnetic resonance imaging", "lipid panel", "thyroid function test",
         "urinalysis", "blood culture", "troponin assay", "arterial blood gas",
         "pulmonary function test", "colonoscopy", "cardiac stress test",
         "hemoglobin a1c", "renal ultrasound", "carotid doppler",
         "liver function panel", "d dimer assay", "sleep study", "spirometry",
         "glucose tolerance test", "bone density scan"}};
}

namespace detail {

// Sentence templates. {P} = problem, {T} = treatment, {X} = test.
inline const std::vector<std::string>& sentence_templates() {
    static const std::vector<std::string> templates = {
        "patient reports {P} treated with {T} after {X}",
        "he has {P}",
        "she has {P} and was started on {T}",
        "the patient denies chest pain or shortness of breath today",
        "follow up {X} was ordered on admission",
        "history includes {P} managed with {T}",
        "results of {X} were reviewed with the patient and family",
        "patient was discharged home in stable condition",
        "initial {X} showed evidence of {P}",
        "we continued {T} at the current dose during the stay",
        "the team recommended {T} pending {X}",
        "review of systems was otherwise negative on examination",
        "symptoms of {P} improved after starting {T}",
        "repeat {X} will be scheduled at the follow up visit",
        "patient tolerated {T} without complications overnight",
        "the hospital course was uncomplicated and vitals remained stable",
        "nursing staff monitored intake and output every shift",
        "on admission {X} was obtained and {P} was suspected",
    };
    return templates;
}

inline std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::string current;
    for (char c : text) {
        if (c == ' ') {
            if (!current.empty()) words.push_back(std::move(current));
            current.clear();
        } else {
            current.push_back(c);
        }
    }
    if (!current.empty()) words.push_back(std::move(current));
    return words;
}

inline std::string tag_for_class(char slot) {
    switch (slot) {
        case 'P': return "problem";
        case 'T': return "treatment";
        case 'X': return "test";
        default: throw ContractError("unknown template slot");
    }
}

}  // namespace detail

/// Fills one template with the given entity surface forms (in slot order)
/// and produces the aligned gold IOB tags.
inline std::pair<std::vector<std::string>, std::vector<std::string>>
fill_template(const std::string& tmpl,
              std::span<const std::string> entities) {
    std::vector<std::string> tokens;
    std::vector<std::string> tags;
    std::size_t next_entity = 0;
    for (const std::string& word : detail::split_words(tmpl)) {
        if (word.size() == 3 && word.front() == '{' && word.back() == '}') {
            if (next_entity >= entities.size()) {
                throw ContractError("template has more slots than entities");
            }
            const std::string cls = detail::tag_for_class(word[1]);
            const auto entity_words =
                detail::split_words(entities[next_entity++]);
            for (std::size_t i = 0; i < entity_words.size(); ++i) {
                tokens.push_back(entity_words[i]);
                tags.push_back((i == 0 ? "B-" : "I-") + cls);
            }
        } else {
            tokens.push_back(word);
            tags.push_back("O");
        }
    }
    return {std::move(tokens), std::move(tags)};
}

struct CorpusSpec {
    std::uint64_t seed = 1;
    std::size_t num_patients = 200;
    std::size_t notes_per_patient = 2;
    std::size_t min_sentences = 3;
    std::size_t max_sentences = 8;
    double test_fraction = 0.2;
    EntityLexicons lexicons = default_lexicons();
};

struct Corpus {
    std::vector<Document> documents;
    // one example per generated sentence, document-major order
    std::vector<NerExample> examples;
    std::vector<std::string> train_patients;
    std::vector<std::string> test_patients;
};

/// Generates documents plus gold NER examples. Patients get slightly
/// different entity pools (a shared core plus a per-group slice) so silo
/// vocabularies differ; a reserved slice of each lexicon appears only in
/// test patients' notes, keeping train/test surface forms partially
/// disjoint.
inline Corpus generate_corpus(const CorpusSpec& spec) {
    spec.lexicons.validate();
    if (spec.num_patients == 0 || spec.notes_per_patient == 0 ||
        spec.min_sentences == 0 || spec.min_sentences > spec.max_sentences) {
        throw ConfigError("corpus spec: invalid sizes");
    }
    Rng rng(spec.seed);
    const std::size_t num_test = static_cast<std::size_t>(
        static_cast<double>(spec.num_patients) * spec.test_fraction);
    const std::size_t num_train = spec.num_patients - num_test;

    constexpr std::size_t kGroups = 5;
    auto reserved_for_test = [](std::size_t i) { return i % 7 == 3; };
    auto build_pools = [&](const std::vector<std::string>& lexicon) {
        std::vector<std::vector<std::string>> pools(kGroups);
        std::vector<std::string> test_pool;
        for (std::size_t i = 0; i < lexicon.size(); ++i) {
            test_pool.push_back(lexicon[i]);
            if (reserved_for_test(i)) continue;
            if (i % 3 == 0) {  // shared core
                for (auto& pool : pools) pool.push_back(lexicon[i]);
            } else {
                pools[i % kGroups].push_back(lexicon[i]);
            }
        }
        for (auto& pool : pools) {
            if (pool.empty()) pool.push_back(lexicon.front());
        }
        pools.push_back(std::move(test_pool));  // index kGroups = test pool
        return pools;
    };
    const auto problem_pools = build_pools(spec.lexicons.problems);
    const auto treatment_pools = build_pools(spec.lexicons.treatments);
    const auto test_pools = build_pools(spec.lexicons.tests);

    Corpus corpus;
    for (std::size_t p = 0; p < spec.num_patients; ++p) {
        std::ostringstream pid;
        pid << 'P' << std::setw(4) << std::setfill('0') << p;
        const std::string patient_id = pid.str();
        const bool is_test = p >= num_train;
        (is_test ? corpus.test_patients : corpus.train_patients)
            .push_back(patient_id);
        const std::size_t pool_index = is_test ? kGroups : p % kGroups;

        auto pick = [&](char slot) -> const std::string& {
            const auto& pools = slot == 'P' ? problem_pools
                                : slot == 'T' ? treatment_pools
                                              : test_pools;
            const auto& pool = pools[pool_index];
            return pool[rng.uniform_int(pool.size())];
        };

        for (std::size_t n = 0; n < spec.notes_per_patient; ++n) {
            Document doc;
            doc.patient_id = patient_id;
            doc.note_id = patient_id + "-N" + std::to_string(n);
            const std::size_t num_sentences =
                spec.min_sentences +
                rng.uniform_int(spec.max_sentences - spec.min_sentences + 1);
            for (std::size_t s = 0; s < num_sentences; ++s) {
                const auto& templates = detail::sentence_templates();
                const std::string& tmpl =
                    templates[rng.uniform_int(templates.size())];
                std::vector<std::string> entities;
                for (const std::string& word : detail::split_words(tmpl)) {
                    if (word.size() == 3 && word.front() == '{' &&
                        word.back() == '}') {
                        entities.push_back(pick(word[1]));
                    }
                }
                auto [tokens, tags] = fill_template(tmpl, entities);
                doc.sentences.push_back(tokens);
                corpus.examples.push_back(NerExample{
                    patient_id, doc.note_id, std::move(tokens),
                    std::move(tags)});
            }
            corpus.documents.push_back(std::move(doc));
        }
    }
    return corpus;
}

// ---------------------------------------------------------------------------
// Vocabulary and tokenizer
// ---------------------------------------------------------------------------

/// Subword vocabulary with dense ids and fixed special ids.
class Vocab {
  public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kCls = 2;
    static constexpr int kSep = 3;
    static constexpr int kMask = 4;
    static constexpr std::size_t kNumSpecials = 5;

    Vocab() {
        for (const char* s : {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"})
            add(s);
    }

    int add(const std::string& token) {
        auto it = index_.find(token);
        if (it != index_.end()) return it->second;
        const int id = static_cast<int>(tokens_.size());
        tokens_.push_back(token);
        index_.emplace(token, id);
        return id;
    }

    std::size_t size() const { return tokens_.size(); }

    const std::string& token(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
            throw IndexError("vocab id out of range: " + std::to_string(id));
        }
        return tokens_[static_cast<std::size_t>(id)];
    }

    int id(std::string_view token) const {
        auto it = index_.find(std::string(token));
        return it == index_.end() ? -1 : it->second;
    }

    bool contains(std::string_view token) const { return id(token) >= 0; }

    /// Greedy longest-match segmentation of one lowercased word.
    /// Continuation pieces carry the "##" prefix; a word with uncovered
    /// residue collapses to a single [UNK].
    std::vector<int> encode_word(const std::string& word) const {
        constexpr std::size_t kMaxWordLen = 64;
        if (word.empty() || word.size() > kMaxWordLen) return {kUnk};
        const int whole = id(word);
        if (whole >= 0) return {whole};
        std::vector<int> pieces;
        std::size_t start = 0;
        while (start < word.size()) {
            std::size_t end = word.size();
            int found = -1;
            while (start < end) {
                std::string piece = word.substr(start, end - start);
                if (start > 0) piece = "##" + piece;
                found = id(piece);
                if (found >= 0) break;
                --end;
            }
            if (found < 0) return {kUnk};
            pieces.push_back(found);
            start = end;
        }
        return pieces;
    }

  private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

namespace detail {

inline std::string lowercase(std::string_view word) {
    std::string out;
    out.reserve(word.size());
    for (char c : word)
        out.push_back(static_cast<char>(
            std::tolower(static_cast<unsigned char>(c))));
    return out;
}

}  // namespace detail

/// Builds a vocabulary from the documents: specials, single-character
/// pieces for every character seen, then whole words by descending
/// frequency until max_size.
inline Vocab build_vocab(std::span<const Document> documents,
                         std::size_t max_size = 512) {
    if (documents.empty()) throw ContractError("build_vocab: empty corpus");
    std::map<std::string, std::size_t> counts;
    std::set<char> chars;
    for (const Document& doc : documents) {
        for (const auto& sentence : doc.sentences) {
            for (const std::string& raw : sentence) {
                const std::string word = detail::lowercase(raw);
                ++counts[word];
                for (char c : word) chars.insert(c);
            }
        }
    }
    Vocab vocab;
    for (char c : chars) {
        vocab.add(std::string(1, c));
        vocab.add("##" + std::string(1, c));
    }
    std::vector<std::pair<std::string, std::size_t>> by_freq(counts.begin(),
                                                             counts.end());
    std::stable_sort(by_freq.begin(), by_freq.end(),
                     [](const auto& a, const auto& b) {
                         if (a.second != b.second) return a.second > b.second;
                         return a.first < b.first;
                     });
    for (const auto& [word, count] : by_freq) {
        if (vocab.size() >= max_size) break;
        vocab.add(word);
    }
    return vocab;
}

/// Whitespace pre-split, lowercase, then greedy subword segmentation.
inline std::vector<int> tokenize(const Vocab& vocab, std::string_view text) {
    std::vector<int> ids;
    for (const std::string& word : detail::split_words(text)) {
        const auto pieces = vocab.encode_word(detail::lowercase(word));
        ids.insert(ids.end(), pieces.begin(), pieces.end());
    }
    return ids;
}

inline std::string detokenize(const Vocab& vocab, std::span<const int> ids) {
    std::string out;
    for (int id : ids) {
        const std::string& tok = vocab.token(id);
        if (tok.starts_with("##")) {
            out += tok.substr(2);
        } else {
            if (!out.empty()) out += ' ';
            out += tok;
        }
    }
    return out;
}

inline void save_vocab(const Vocab& vocab, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot write vocab file: " + path.string());
    for (std::size_t i = 0; i < vocab.size(); ++i)
        out << vocab.token(static_cast<int>(i)) << '\n';
}

inline Vocab load_vocab(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open vocab file: " + path.string());
    Vocab vocab;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        if (line_no < Vocab::kNumSpecials) {
            if (vocab.token(static_cast<int>(line_no)) != line) {
                throw FormatError("vocab file: special token mismatch at line " +
                                  std::to_string(line_no));
            }
        } else {
            vocab.add(line);
        }
        ++line_no;
    }
    return vocab;
}

// ---------------------------------------------------------------------------
// MLM / NSP examples
// ---------------------------------------------------------------------------

struct PretrainExample {
    std::vector<int> token_ids;
    std::vector<int> segment_ids;
    std::vector<int> attn_mask;
    std::vector<int> labels;  // original id at masked positions, else ignore
    int is_next = 1;
};

/// Builds sentence-pair examples with BERT-style masking: 15% of
/// non-special positions are selected; of those 80% become [MASK], 10% a
/// random token, 10% stay unchanged. Pairs are 50% consecutive / 50%
/// random; documents with fewer than two sentences are excluded from
/// pairing.
inline std::vector<PretrainExample> make_mlm_examples(
    const Vocab& vocab, std::span<const Document> documents,
    std::size_t seq_len, std::uint64_t seed) {
    if (seq_len < 8) throw ContractError("make_mlm_examples: seq_len too small");
    Rng rng(seed);

    std::vector<std::vector<std::vector<int>>> doc_sentences;
    doc_sentences.reserve(documents.size());
    for (const Document& doc : documents) {
        std::vector<std::vector<int>> sents;
        for (const auto& sentence : doc.sentences) {
            std::vector<int> ids;
            for (const std::string& w : sentence) {
                const auto pieces = vocab.encode_word(detail::lowercase(w));
                ids.insert(ids.end(), pieces.begin(), pieces.end());
            }
            if (!ids.empty()) sents.push_back(std::move(ids));
        }
        doc_sentences.push_back(std::move(sents));
    }

    std::vector<PretrainExample> examples;
    for (std::size_t d = 0; d < doc_sentences.size(); ++d) {
        const auto& sents = doc_sentences[d];
        if (sents.size() < 2) continue;
        for (std::size_t s = 0; s + 1 < sents.size(); ++s) {
            std::vector<int> first = sents[s];
            std::vector<int> second;
            int is_next = 1;
            if (doc_sentences.size() > 1 && rng.bernoulli(0.5)) {
                // draw a random sentence from a different document
                std::size_t od = rng.uniform_int(doc_sentences.size() - 1);
                if (od >= d) ++od;
                if (!doc_sentences[od].empty()) {
                    second =
                        doc_sentences[od][rng.uniform_int(doc_sentences[od].size())];
                    is_next = 0;
                }
            }
            if (second.empty()) second = sents[s + 1];

            // truncate the longer segment first until the pair fits
            while (first.size() + second.size() + 3 > seq_len) {
                if (first.size() >= second.size()) {
                    first.pop_back();
                } else {
                    second.pop_back();
                }
            }
            if (first.empty() || second.empty()) continue;

            PretrainExample ex;
            ex.is_next = is_next;
            ex.token_ids.push_back(Vocab::kCls);
            ex.segment_ids.push_back(0);
            for (int id : first) {
                ex.token_ids.push_back(id);
                ex.segment_ids.push_back(0);
            }
            ex.token_ids.push_back(Vocab::kSep);
            ex.segment_ids.push_back(0);
            for (int id : second) {
                ex.token_ids.push_back(id);
                ex.segment_ids.push_back(1);
            }
            ex.token_ids.push_back(Vocab::kSep);
            ex.segment_ids.push_back(1);
            ex.attn_mask.assign(ex.token_ids.size(), 1);
            ex.labels.assign(ex.token_ids.size(), kIgnoreIndex);

            // masking
            std::vector<std::size_t> candidates;
            for (std::size_t i = 0; i < ex.token_ids.size(); ++i) {
                if (ex.token_ids[i] != Vocab::kCls &&
                    ex.token_ids[i] != Vocab::kSep) {
                    candidates.push_back(i);
                }
            }
            std::vector<std::size_t> selected;
            for (std::size_t i : candidates)
                if (rng.bernoulli(0.15)) selected.push_back(i);
            if (selected.empty() && !candidates.empty())
                selected.push_back(candidates.front());
            for (std::size_t i : selected) {
                ex.labels[i] = ex.token_ids[i];
                const double roll = rng.uniform();
                if (roll < 0.8) {
                    ex.token_ids[i] = Vocab::kMask;
                } else if (roll < 0.9) {
                    ex.token_ids[i] = static_cast<int>(
                        Vocab::kNumSpecials +
                        rng.uniform_int(vocab.size() - Vocab::kNumSpecials));
                }  // else unchanged
            }
            examples.push_back(std::move(ex));
        }
    }
    return examples;
}

// ---------------------------------------------------------------------------
// NER encoding
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& ner_label_names() {
    static const std::vector<std::string> names = {
        "O",      "B-problem",   "I-problem", "B-treatment",
        "I-treatment", "B-test", "I-test"};
    return names;
}

inline int ner_label_id(std::string_view label) {
    const auto& names = ner_label_names();
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == label) return static_cast<int>(i);
    throw FormatError("unknown NER label: " + std::string(label));
}

struct NerEncoded {
    std::vector<int> token_ids;
    std::vector<int> segment_ids;
    std::vector<int> attn_mask;
    std::vector<int> label_ids;  // first piece of each word, else ignore
    std::vector<std::size_t> word_positions;  // first-piece index per word
};

/// [CLS] pieces [SEP] with the word label on each word's first piece and
/// ignore_index on continuations and specials. Words beyond the length
/// budget are dropped from the tail.
inline NerEncoded encode_ner_example(const Vocab& vocab, const NerExample& ex,
                                     std::size_t max_len) {
    if (ex.tokens.size() != ex.tags.size()) {
        throw ContractError("NER example: tokens/tags length mismatch");
    }
    NerEncoded enc;
    enc.token_ids.push_back(Vocab::kCls);
    enc.label_ids.push_back(kIgnoreIndex);
    for (std::size_t w = 0; w < ex.tokens.size(); ++w) {
        const auto pieces =
            vocab.encode_word(detail::lowercase(ex.tokens[w]));
        if (enc.token_ids.size() + pieces.size() + 1 > max_len) break;
        enc.word_positions.push_back(enc.token_ids.size());
        for (std::size_t p = 0; p < pieces.size(); ++p) {
            enc.token_ids.push_back(pieces[p]);
            enc.label_ids.push_back(p == 0 ? ner_label_id(ex.tags[w])
                                           : kIgnoreIndex);
        }
    }
    enc.token_ids.push_back(Vocab::kSep);
    enc.label_ids.push_back(kIgnoreIndex);
    enc.segment_ids.assign(enc.token_ids.size(), 0);
    enc.attn_mask.assign(enc.token_ids.size(), 1);
    return enc;
}

// ---------------------------------------------------------------------------
// Silo splitting
// ---------------------------------------------------------------------------

struct SiloDataset {
    std::vector<Document> documents;   // pre-training stage
    std::vector<NerExample> examples;  // fine-tuning stage
    std::size_t sample_size = 0;       // patients or notes
};

namespace detail {

/// Uniform random assignment of units to k silos; redrawn (deterministic
/// derived seeds) until every silo is nonempty.
inline std::vector<std::size_t> assign_units(std::size_t num_units,
                                             std::size_t k,
                                             std::uint64_t seed) {
    std::vector<std::size_t> assignment(num_units);
    for (std::uint64_t attempt = 0;; ++attempt) {
        Rng rng(derive_seed(seed, attempt));
        std::vector<bool> used(k, false);
        for (std::size_t i = 0; i < num_units; ++i) {
            assignment[i] = rng.uniform_int(k);
            used[assignment[i]] = true;
        }
        if (std::all_of(used.begin(), used.end(), [](bool b) { return b; }))
            return assignment;
    }
}

}  // namespace detail

/// Whole patients assigned uniformly at random; sample size is the number
/// of patients in a silo.
inline std::vector<SiloDataset> split_silos_by_patient(
    std::span<const Document> documents, std::size_t k, std::uint64_t seed) {
    if (k == 0) throw SplitError("split: need at least one silo");
    std::vector<std::string> patients;
    std::unordered_map<std::string, std::size_t> patient_index;
    for (const Document& doc : documents) {
        if (patient_index.emplace(doc.patient_id, patients.size()).second)
            patients.push_back(doc.patient_id);
    }
    if (patients.size() < k) {
        throw SplitError("split by patient: " + std::to_string(patients.size()) +
                         " patients < " + std::to_string(k) + " silos");
    }
    const auto assignment = detail::assign_units(patients.size(), k, seed);
    std::vector<SiloDataset> silos(k);
    for (const Document& doc : documents) {
        const std::size_t silo = assignment[patient_index.at(doc.patient_id)];
        silos[silo].documents.push_back(doc);
    }
    for (std::size_t s = 0; s < k; ++s) {
        std::unordered_set<std::string> distinct;
        for (const Document& doc : silos[s].documents)
            distinct.insert(doc.patient_id);
        silos[s].sample_size = distinct.size();
    }
    return silos;
}

/// Whole notes assigned uniformly at random; sample size is the number of
/// notes in a silo.
inline std::vector<SiloDataset> split_silos_by_note(
    std::span<const NerExample> examples, std::size_t k, std::uint64_t seed) {
    if (k == 0) throw SplitError("split: need at least one silo");
    std::vector<std::string> notes;
    std::unordered_map<std::string, std::size_t> note_index;
    for (const NerExample& ex : examples) {
        if (note_index.emplace(ex.note_id, notes.size()).second)
            notes.push_back(ex.note_id);
    }
    if (notes.size() < k) {
        throw SplitError("split by note: " + std::to_string(notes.size()) +
                         " notes < " + std::to_string(k) + " silos");
    }
    const auto assignment = detail::assign_units(notes.size(), k, seed);
    std::vector<SiloDataset> silos(k);
    for (const NerExample& ex : examples) {
        silos[assignment[note_index.at(ex.note_id)]].examples.push_back(ex);
    }
    for (std::size_t s = 0; s < k; ++s) {
        std::unordered_set<std::string> distinct;
        for (const NerExample& ex : silos[s].examples)
            distinct.insert(ex.note_id);
        silos[s].sample_size = distinct.size();
    }
    return silos;
}

// ---------------------------------------------------------------------------
// Corpus files: one JSON object per line
// {patient_id, note_id, tokens, tags?}
// ---------------------------------------------------------------------------

inline void save_corpus_jsonl(const Corpus& corpus,
                              const std::filesystem::path& path) {
    if (!corpus.examples.empty()) {
        std::size_t sentence_count = 0;
        for (const Document& doc : corpus.documents)
            sentence_count += doc.sentences.size();
        if (sentence_count != corpus.examples.size()) {
            throw ContractError(
                "save_corpus_jsonl: examples not aligned with sentences");
        }
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot write corpus file: " + path.string());
    std::size_t next = 0;
    for (const Document& doc : corpus.documents) {
        for (const auto& sentence : doc.sentences) {
            nlohmann::json line;
            line["patient_id"] = doc.patient_id;
            line["note_id"] = doc.note_id;
            line["tokens"] = sentence;
            if (!corpus.examples.empty()) {
                line["tags"] = corpus.examples[next].tags;
            }
            ++next;
            out << line.dump() << '\n';
        }
    }
}

/// Rebuilds documents (grouped by note, in file order) and NER examples
/// from a corpus file. Patients are split train/test by final fraction of
/// their order of first appearance.
inline Corpus load_corpus_jsonl(const std::filesystem::path& path,
                                double test_fraction = 0.2) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open corpus file: " + path.string());
    Corpus corpus;
    std::unordered_map<std::string, std::size_t> doc_index;
    std::vector<std::string> patients;
    std::unordered_set<std::string> seen_patients;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError("corpus line " + std::to_string(line_no) +
                              ": " + e.what());
        }
        if (!rec.contains("patient_id") || !rec.contains("note_id") ||
            !rec.contains("tokens")) {
            throw FormatError("corpus line " + std::to_string(line_no) +
                              ": missing required field");
        }
        const std::string patient_id = rec["patient_id"].get<std::string>();
        const std::string note_id = rec["note_id"].get<std::string>();
        const auto tokens = rec["tokens"].get<std::vector<std::string>>();
        if (seen_patients.insert(patient_id).second)
            patients.push_back(patient_id);
        auto [it, inserted] =
            doc_index.emplace(note_id, corpus.documents.size());
        if (inserted) {
            corpus.documents.push_back(Document{patient_id, note_id, {}});
        }
        corpus.documents[it->second].sentences.push_back(tokens);
        if (rec.contains("tags")) {
            const auto tags = rec["tags"].get<std::vector<std::string>>();
            if (tags.size() != tokens.size()) {
                throw FormatError("corpus line " + std::to_string(line_no) +
                                  ": tags/tokens length mismatch");
            }
            corpus.examples.push_back(
                NerExample{patient_id, note_id, tokens, tags});
        }
    }
    const std::size_t num_test = static_cast<std::size_t>(
        static_cast<double>(patients.size()) * test_fraction);
    const std::size_t num_train = patients.size() - num_test;
    corpus.train_patients.assign(patients.begin(),
                                 patients.begin() + static_cast<std::ptrdiff_t>(num_train));
    corpus.test_patients.assign(patients.begin() + static_cast<std::ptrdiff_t>(num_train),
                                patients.end());
    return corpus;
}

}  // namespace silobert
