#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dtx/alignment.hpp"
#include "dtx/encoder.hpp"
#include "dtx/highres.hpp"
#include "dtx/inference.hpp"
#include "dtx/segmap.hpp"

namespace dtx {

// rows = ground truth, cols = prediction; ignored pixels excluded
struct ConfusionMatrix {
    int n_classes = 0;
    std::vector<uint64_t> counts;

    uint64_t& at(int gt, int pred) {
        return counts[static_cast<size_t>(gt) * n_classes + pred];
    }
    uint64_t at(int gt, int pred) const {
        return counts[static_cast<size_t>(gt) * n_classes + pred];
    }
};

struct MiouResult {
    double miou = 0.0;
    std::vector<double> per_class;  // IoU; -1 for classes absent from both maps
    std::vector<bool> present;
    ConfusionMatrix confusion;
};

// IoU_c = TP / (TP + FP + FN); classes absent from both maps are excluded
// from the mean; ignore_index pixels excluded from all counts
MiouResult miou(const SegmentationMap& pred, const SegmentationMap& gt);

struct ToplineResult {
    SegmentationMap map;
    MiouResult score;
};

// Perfect-boundary topline: the pixel feature field is built as in
// highres_segment, but each ground-truth segment is classified as a whole by
// the cosine between its mean feature and the query patch halves.
ToplineResult topline_with_gt_masks(const AlignmentModel& m,
                                    const VisionEncoder& enc,
                                    const Raster& raster,
                                    const SegmentationMap& gt,
                                    const QueryEmbeddings& queries,
                                    const HighresParams& params);

struct NameChoice {
    std::string original;
    std::string chosen;
    double similarity = 0.0;
    bool flagged = false;  // zero ground-truth pixels, original kept
};

struct LabeledImage {
    Raster raster;
    SegmentationMap gt;
};

// For each ground-truth class, the dataset-wide pixel mean of per-pixel
// features over its mask is matched against every candidate word's patch
// half; the best-cosine candidate wins, ties to the lowest vocab index.
std::vector<NameChoice> optimize_class_names(
    const AlignmentModel& m, const VisionEncoder& enc,
    const std::vector<LabeledImage>& data,
    const std::vector<std::string>& candidate_vocab, const HighresParams& params);

double accuracy(const std::vector<int>& preds, const std::vector<int>& gts);

}  // namespace dtx
