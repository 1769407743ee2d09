#pragma once

// IOB decoding and span-level precision/recall/F1. Spans match exactly on
// (class, start, end); scores are micro-averaged over all classes and
// sequences with the 0/0 -> 0 convention.

#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "silobert/errors.hpp"

namespace silobert {

struct Span {
    std::string label;   // entity class, e.g. "problem"
    std::size_t start = 0;
    std::size_t end = 0;  // inclusive

    auto operator<=>(const Span&) const = default;
};

/// Decodes an IOB tag sequence into spans. B-x opens a span; a same-class
/// I-x extends it; anything else closes it. An orphan I-x (no open span of
/// class x) opens a span, the standard lenient repair.
inline std::vector<Span> decode_iob(std::span<const std::string> tags) {
    std::vector<Span> spans;
    std::string open;
    std::size_t start = 0;
    auto close = [&](std::size_t end_exclusive) {
        if (!open.empty()) {
            spans.push_back(Span{open, start, end_exclusive - 1});
            open.clear();
        }
    };
    for (std::size_t i = 0; i < tags.size(); ++i) {
        const std::string& tag = tags[i];
        if (tag == "O") {
            close(i);
        } else if (tag.starts_with("B-")) {
            close(i);
            open = tag.substr(2);
            start = i;
        } else if (tag.starts_with("I-")) {
            const std::string cls = tag.substr(2);
            if (open != cls) {  // orphan or class switch: open a new span
                close(i);
                open = cls;
                start = i;
            }
        } else {
            throw FormatError("unknown IOB label: " + tag);
        }
    }
    close(tags.size());
    return spans;
}

/// Inverse of decode_iob for well-formed, non-overlapping span sets.
inline std::vector<std::string> encode_iob(std::span<const Span> spans,
                                           std::size_t length) {
    std::vector<std::string> tags(length, "O");
    for (const Span& s : spans) {
        if (s.start > s.end || s.end >= length) {
            throw ContractError("encode_iob: span out of range");
        }
        tags[s.start] = "B-" + s.label;
        for (std::size_t i = s.start + 1; i <= s.end; ++i)
            tags[i] = "I-" + s.label;
    }
    return tags;
}

struct Prf {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t fn = 0;
};

/// Micro-averaged exact-match span scores across sequences.
inline Prf prf1(const std::vector<std::vector<Span>>& gold,
                const std::vector<std::vector<Span>>& pred) {
    if (gold.size() != pred.size()) {
        throw ContractError("prf1: gold and pred sequence counts differ");
    }
    Prf out;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        std::set<Span> gold_set(gold[i].begin(), gold[i].end());
        std::set<Span> pred_set(pred[i].begin(), pred[i].end());
        for (const Span& s : pred_set) {
            if (gold_set.contains(s)) {
                ++out.tp;
            } else {
                ++out.fp;
            }
        }
        for (const Span& s : gold_set) {
            if (!pred_set.contains(s)) ++out.fn;
        }
    }
    const auto ratio = [](std::size_t num, std::size_t den) {
        return den == 0 ? 0.0
                        : static_cast<double>(num) / static_cast<double>(den);
    };
    out.precision = ratio(out.tp, out.tp + out.fp);
    out.recall = ratio(out.tp, out.tp + out.fn);
    out.f1 = (out.precision + out.recall) == 0.0
                 ? 0.0
                 : 2.0 * out.precision * out.recall /
                       (out.precision + out.recall);
    return out;
}

/// Fraction of positions where the predicted tag equals the gold tag.
/// Reported as a diagnostic alongside span scores.
inline double token_accuracy(
    const std::vector<std::vector<std::string>>& gold,
    const std::vector<std::vector<std::string>>& pred) {
    if (gold.size() != pred.size()) {
        throw ContractError("token_accuracy: sequence counts differ");
    }
    std::size_t correct = 0, total = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        if (gold[i].size() != pred[i].size()) {
            throw ContractError("token_accuracy: sequence lengths differ");
        }
        for (std::size_t j = 0; j < gold[i].size(); ++j) {
            ++total;
            if (gold[i][j] == pred[i][j]) ++correct;
        }
    }
    return total == 0 ? 0.0
                      : static_cast<double>(correct) /
                            static_cast<double>(total);
}

}  // namespace silobert
