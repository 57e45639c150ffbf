#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "dtx/clustering.hpp"
#include "dtx/core.hpp"

namespace dtx {

struct ConceptVocabulary {
    // lowercase concepts; each stored with its normalized token sequence
    std::vector<std::string> concepts;
    std::vector<std::vector<std::string>> concept_tokens;

    static ConceptVocabulary from_lines(const std::vector<std::string>& lines);
    static ConceptVocabulary load(const std::string& path);
    size_t size() const { return concepts.size(); }
};

struct ConceptCounts {
    std::vector<size_t> counts;               // per concept
    std::vector<std::vector<int>> matched;    // per pair, matched concept indices
    size_t dropped_invalid_utf8 = 0;
};

enum class Provenance { text, image, intersection };

struct CurationSelection {
    std::set<std::string> kept_ids;
    Provenance provenance = Provenance::text;
};

// Caption normalization shared by matching and tokenization: lowercase,
// strip punctuation, split on whitespace.
std::vector<std::string> normalize_tokens(const std::string& caption);

ConceptCounts match_concepts(const std::vector<PairRecord>& pairs,
                             const ConceptVocabulary& vocab, int threads = 1);

// Frequency-capped stochastic drop: concept c accepts each of its matched
// pairs with probability min(1, cap_t / counts[c]); a pair survives if any
// matched concept accepts it. Pairs matching nothing are dropped.
CurationSelection text_balance(const std::vector<PairRecord>& pairs,
                               const ConceptCounts& counts, size_t cap_t,
                               uint64_t seed);

CurationSelection image_balance(const std::vector<PairRecord>& records,
                                const ClusterTree& tree, size_t budget,
                                uint64_t seed);

CurationSelection intersect(const CurationSelection& a, const CurationSelection& b);

struct Histogram {
    std::vector<size_t> before;
    std::vector<size_t> after;
    double entropy_before = 0.0;  // normalized to [0,1]
    double entropy_after = 0.0;
};

struct CurationReport {
    Histogram concept_hist;
    Histogram cluster_hist;  // top-level clusters
    size_t n_before = 0;
    size_t n_after = 0;
};

CurationReport curation_report(const std::vector<PairRecord>& before,
                               const CurationSelection& after,
                               const ConceptCounts& counts,
                               const ClusterTree& tree);

double normalized_entropy(const std::vector<size_t>& hist);

}  // namespace dtx
