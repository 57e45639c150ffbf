#include "dtx/curation.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>

#include "dtx/parallel.hpp"
#include "dtx/rng.hpp"

namespace dtx {

std::vector<std::string> normalize_tokens(const std::string& caption) {
    std::string cleaned;
    cleaned.reserve(caption.size());
    size_t i = 0, n = caption.size();
    while (i < n) {
        unsigned char c = caption[i];
        if (c < 0x80) {
            if (std::isalnum(c)) {
                cleaned.push_back(static_cast<char>(std::tolower(c)));
            } else {
                cleaned.push_back(' ');
            }
            ++i;
        } else {
            // multi-byte sequence: keep letters from other scripts, drop the
            // common Unicode punctuation blocks (U+2000-206F, U+FF00-FF65)
            int len = (c & 0xe0) == 0xc0 ? 2 : (c & 0xf0) == 0xe0 ? 3 : 4;
            if (i + len > n) break;
            uint32_t cp = 0;
            if (len == 2) cp = (c & 0x1f);
            else if (len == 3) cp = (c & 0x0f);
            else cp = (c & 0x07);
            for (int k = 1; k < len; ++k) cp = (cp << 6) | (caption[i + k] & 0x3f);
            bool punct = (cp >= 0x2000 && cp <= 0x206f) ||
                         (cp >= 0xff00 && cp <= 0xff65) ||
                         (cp >= 0x00a1 && cp <= 0x00bf);
            if (punct) cleaned.push_back(' ');
            else cleaned.append(caption, i, len);
            i += len;
        }
    }
    std::vector<std::string> toks;
    size_t pos = 0;
    while (pos < cleaned.size()) {
        while (pos < cleaned.size() && cleaned[pos] == ' ') ++pos;
        size_t start = pos;
        while (pos < cleaned.size() && cleaned[pos] != ' ') ++pos;
        if (pos > start) toks.push_back(cleaned.substr(start, pos - start));
    }
    return toks;
}

ConceptVocabulary ConceptVocabulary::from_lines(const std::vector<std::string>& lines) {
    ConceptVocabulary v;
    std::set<std::string> seen;
    for (const auto& line : lines) {
        auto toks = normalize_tokens(line);
        if (toks.empty()) continue;
        std::string joined;
        for (size_t i = 0; i < toks.size(); ++i) {
            if (i) joined += ' ';
            joined += toks[i];
        }
        if (!seen.insert(joined).second) continue;
        v.concepts.push_back(joined);
        v.concept_tokens.push_back(std::move(toks));
    }
    return v;
}

ConceptVocabulary ConceptVocabulary::load(const std::string& path) {
    std::ifstream f(path);
    check(f.good(), ErrorKind::data, "cannot open: " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(f, line)) lines.push_back(line);
    return from_lines(lines);
}

namespace {

bool contains_subsequence(const std::vector<std::string>& hay,
                          const std::vector<std::string>& needle) {
    if (needle.empty() || needle.size() > hay.size()) return false;
    for (size_t i = 0; i + needle.size() <= hay.size(); ++i) {
        bool ok = true;
        for (size_t j = 0; j < needle.size(); ++j)
            if (hay[i + j] != needle[j]) {
                ok = false;
                break;
            }
        if (ok) return true;
    }
    return false;
}

}  // namespace

ConceptCounts match_concepts(const std::vector<PairRecord>& pairs,
                             const ConceptVocabulary& vocab, int threads) {
    check(vocab.size() > 0, ErrorKind::data, "match_concepts: empty vocabulary");
    ConceptCounts out;
    out.matched.assign(pairs.size(), {});
    std::vector<char> invalid(pairs.size(), 0);
    parallel_for(pairs.size(), threads, [&](size_t i) {
        if (!valid_utf8(pairs[i].caption)) {
            invalid[i] = 1;
            return;
        }
        auto toks = normalize_tokens(pairs[i].caption);
        for (size_t c = 0; c < vocab.size(); ++c)
            if (contains_subsequence(toks, vocab.concept_tokens[c]))
                out.matched[i].push_back(static_cast<int>(c));
    });
    out.counts.assign(vocab.size(), 0);
    for (size_t i = 0; i < pairs.size(); ++i) {
        out.dropped_invalid_utf8 += invalid[i];
        for (int c : out.matched[i]) out.counts[c]++;
    }
    return out;
}

CurationSelection text_balance(const std::vector<PairRecord>& pairs,
                               const ConceptCounts& counts, size_t cap_t,
                               uint64_t seed) {
    check(cap_t >= 1, ErrorKind::data, "text_balance: cap must be >= 1");
    CurationSelection sel;
    sel.provenance = Provenance::text;
    for (size_t i = 0; i < pairs.size(); ++i) {
        bool keep = false;
        for (int c : counts.matched[i]) {
            double p = counts.counts[c] == 0
                           ? 0.0
                           : std::min(1.0, static_cast<double>(cap_t) /
                                               static_cast<double>(counts.counts[c]));
            // one independent draw per (concept, pair id)
            uint64_t h = hash_combine(hash_str(pairs[i].id, seed),
                                      static_cast<uint64_t>(c));
            double u = static_cast<double>(mix64(h) >> 11) * 0x1.0p-53;
            if (u < p) {
                keep = true;
                break;
            }
        }
        if (keep) sel.kept_ids.insert(pairs[i].id);
    }
    return sel;
}

CurationSelection image_balance(const std::vector<PairRecord>& records,
                                const ClusterTree& tree, size_t budget,
                                uint64_t seed) {
    check(tree.n_points() == records.size(), ErrorKind::data,
          "image_balance: tree / record count mismatch");
    CurationSelection sel;
    sel.provenance = Provenance::image;
    for (size_t idx : balanced_sample(tree, budget, seed))
        sel.kept_ids.insert(records[idx].id);
    return sel;
}

CurationSelection intersect(const CurationSelection& a, const CurationSelection& b) {
    CurationSelection out;
    out.provenance = Provenance::intersection;
    std::set_intersection(a.kept_ids.begin(), a.kept_ids.end(),
                          b.kept_ids.begin(), b.kept_ids.end(),
                          std::inserter(out.kept_ids, out.kept_ids.begin()));
    return out;
}

double normalized_entropy(const std::vector<size_t>& hist) {
    size_t total = 0;
    size_t nonzero_bins = 0;
    for (size_t h : hist) total += h;
    if (total == 0 || hist.size() <= 1) return 0.0;
    double ent = 0.0;
    for (size_t h : hist) {
        if (h == 0) continue;
        ++nonzero_bins;
        double p = static_cast<double>(h) / static_cast<double>(total);
        ent -= p * std::log(p);
    }
    (void)nonzero_bins;
    return ent / std::log(static_cast<double>(hist.size()));
}

CurationReport curation_report(const std::vector<PairRecord>& before,
                               const CurationSelection& after,
                               const ConceptCounts& counts,
                               const ClusterTree& tree) {
    CurationReport rep;
    rep.n_before = before.size();
    rep.n_after = after.kept_ids.size();

    size_t n_concepts = counts.counts.size();
    rep.concept_hist.before.assign(n_concepts, 0);
    rep.concept_hist.after.assign(n_concepts, 0);
    for (size_t i = 0; i < before.size(); ++i) {
        bool kept = after.kept_ids.count(before[i].id) > 0;
        for (int c : counts.matched[i]) {
            rep.concept_hist.before[c]++;
            if (kept) rep.concept_hist.after[c]++;
        }
    }
    rep.concept_hist.entropy_before = normalized_entropy(rep.concept_hist.before);
    rep.concept_hist.entropy_after = normalized_entropy(rep.concept_hist.after);

    if (tree.n_levels() > 0) {
        check(tree.n_points() == before.size(), ErrorKind::data,
              "curation_report: tree / record count mismatch");
        auto top = compose_assignment(tree, tree.n_levels() - 1);
        int k_top = tree.levels.back().centroids.rows;
        rep.cluster_hist.before.assign(k_top, 0);
        rep.cluster_hist.after.assign(k_top, 0);
        for (size_t i = 0; i < before.size(); ++i) {
            rep.cluster_hist.before[top[i]]++;
            if (after.kept_ids.count(before[i].id)) rep.cluster_hist.after[top[i]]++;
        }
        rep.cluster_hist.entropy_before = normalized_entropy(rep.cluster_hist.before);
        rep.cluster_hist.entropy_after = normalized_entropy(rep.cluster_hist.after);
    }
    return rep;
}

}  // namespace dtx
