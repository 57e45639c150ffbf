#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dtx/common.hpp"

namespace dtx {

// Dense row-major matrix of doubles. Persisted formats are f32; in-memory
// math runs in doubles so finite-difference checks are meaningful.
struct Mat {
    std::vector<double> d;
    int rows = 0;
    int cols = 0;

    Mat() = default;
    Mat(int r, int c) : d(static_cast<size_t>(r) * c, 0.0), rows(r), cols(c) {}

    double& at(int r, int c) { return d[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return d[static_cast<size_t>(r) * cols + c]; }
    double* row(int r) { return d.data() + static_cast<size_t>(r) * cols; }
    const double* row(int r) const { return d.data() + static_cast<size_t>(r) * cols; }
};

using Vec = std::vector<double>;

struct FeatureGrid {
    Vec cls;       // dim D
    Mat patches;   // (grid_h * grid_w) x D
    int grid_h = 0;
    int grid_w = 0;

    int dim() const { return static_cast<int>(cls.size()); }
};

// One training/curation sample. Exactly one of `embedding` / `feature_ref`
// is populated depending on the pipeline stage.
struct PairRecord {
    std::string id;
    std::string caption;
    Vec embedding;            // global image embedding (curation use)
    std::string feature_ref;  // path of a stored FeatureGrid (training use)
};

// 2D-dim text embedding with views on its two halves.
struct TextEmbedding {
    Vec full;  // dim 2D

    int half_dim() const { return static_cast<int>(full.size()) / 2; }
    Vec cls_part() const { return Vec(full.begin(), full.begin() + half_dim()); }
    Vec patch_part() const { return Vec(full.begin() + half_dim(), full.end()); }
};

struct NormResult {
    Vec v;
    bool degenerate = false;
};

inline double norm2(const double* p, size_t n) {
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) s += p[i] * p[i];
    return std::sqrt(s);
}

inline double dot(const double* a, const double* b, size_t n) {
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

// Near-zero vectors pass through flagged instead of failing: curation must
// survive junk rows, while comparisons on them fail loudly (see cosine).
inline NormResult l2_normalize(const Vec& v) {
    double n = norm2(v.data(), v.size());
    if (n < 1e-12) return {v, true};
    Vec out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
    return {out, false};
}

inline double cosine(const Vec& a, const Vec& b) {
    check(a.size() == b.size(), ErrorKind::data, "cosine: dimension mismatch");
    double na = norm2(a.data(), a.size());
    double nb = norm2(b.data(), b.size());
    check(na >= 1e-12 && nb >= 1e-12, ErrorKind::numeric,
          "cosine: degenerate input vector");
    double c = dot(a.data(), b.data(), a.size()) / (na * nb);
    if (c > 1.0) c = 1.0;
    if (c < -1.0) c = -1.0;
    return c;
}

// --- binary file formats (all little-endian, f32 payloads) ---

// DTXE: rows x dim embedding table plus per-row string ids.
void write_embeddings(const std::vector<std::string>& ids, const Mat& m,
                      const std::string& path);
void read_embeddings(const std::string& path, std::vector<std::string>& ids,
                     Mat& m);

// DTXF: a single FeatureGrid.
void write_feature_grid(const FeatureGrid& g, const std::string& path);
FeatureGrid read_feature_grid(const std::string& path);

// Captions JSONL ({"id":..., "caption":...} per line); invalid-UTF8 captions
// are counted and dropped by the caller, not here.
struct CaptionLine {
    std::string id;
    std::string caption;
};
std::vector<CaptionLine> read_captions_jsonl(const std::string& path);
void write_captions_jsonl(const std::vector<CaptionLine>& lines,
                          const std::string& path);

// Selection list: newline-delimited ids, LF endings.
std::vector<std::string> read_id_list(const std::string& path);
void write_id_list(const std::vector<std::string>& ids, const std::string& path);

bool valid_utf8(const std::string& s);

}  // namespace dtx
