#pragma once

#include <string>
#include <vector>

#include "dtx/alignment.hpp"
#include "dtx/core.hpp"
#include "dtx/encoder.hpp"
#include "dtx/segmap.hpp"

namespace dtx {

struct ClassPrompt {
    std::string class_name;
    std::string template_str = "{}";  // "{}" replaced by the class name

    std::string render() const;
};

std::vector<ClassPrompt> bare_prompts(const std::vector<std::string>& names,
                                      const std::string& template_str = "{}");

// Embedded queries: whole-vector-normalized rows (Q x 2D) plus an
// independently normalized patch half for dense use.
struct QueryEmbeddings {
    Mat full;        // Q x 2D, rows unit norm
    Mat cls_part;    // Q x D, slices of `full` (not renormalized)
    Mat patch_part;  // Q x D, independently renormalized for dense scoring
    std::vector<std::string> names;
};

QueryEmbeddings embed_queries(const AlignmentModel& m,
                              const std::vector<ClassPrompt>& prompts);

struct Classification {
    int argmax = 0;  // ties to lowest class index
    Vec scores;
};

// global descriptor g vs every query, cosine over the pooled width
Classification classify(const AlignmentModel& m, const FeatureGrid& grid,
                        const QueryEmbeddings& queries);

// text -> image Recall@1 over index-paired grids/captions
double retrieve_r1(const AlignmentModel& m,
                   const std::vector<FeatureGrid>& grids,
                   const std::vector<std::string>& captions);

enum class DenseEmbedding { PATCH, CLS_PATCH };

struct LogitVolume {
    std::vector<double> logits;  // grid_h * grid_w * Q
    std::vector<double> weights; // grid_h * grid_w
    int grid_h = 0, grid_w = 0, n_queries = 0;

    double& at(int y, int x, int q) {
        return logits[(static_cast<size_t>(y) * grid_w + x) * n_queries + q];
    }
    double at(int y, int x, int q) const {
        return logits[(static_cast<size_t>(y) * grid_w + x) * n_queries + q];
    }
};

// per-patch cosine similarities after the vision blocks
LogitVolume dense_logits(const AlignmentModel& m, const FeatureGrid& grid,
                         const QueryEmbeddings& queries,
                         DenseEmbedding mode = DenseEmbedding::PATCH);

// corner-aligned bilinear upsampling of a logit volume to pixel resolution;
// out[q] has size out_h * out_w
std::vector<std::vector<double>> upsample_logits(const LogitVolume& vol,
                                                 int out_h, int out_w);

struct SlidingWindowOptions {
    int window = 0;  // pixels; 0 = trained-resolution default (grid 8 x patch)
    int stride = 0;  // 0 = window / 2
    DenseEmbedding embedding = DenseEmbedding::PATCH;
    int threads = 1;
};

// TCL-style protocol: overlapping windows, averaged patch logits, bilinear
// upsample, per-pixel argmax
SegmentationMap sliding_window_segment(const AlignmentModel& m,
                                       const VisionEncoder& enc,
                                       const Raster& raster,
                                       const QueryEmbeddings& queries,
                                       const SlidingWindowOptions& opt = {});

// window/stride placement with the final offset snapped to the edge
std::vector<int> window_offsets(int image_extent, int window, int stride);

}  // namespace dtx
