#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "dtx/alignment.hpp"
#include "dtx/encoder.hpp"
#include "dtx/inference.hpp"
#include "dtx/segmap.hpp"

namespace dtx {

struct Point {
    double x = 0.0, y = 0.0;
};

// Convex quad in pixel coordinates, corners ordered TL, TR, BR, BL.
struct Quadrilateral {
    std::array<Point, 4> corners;

    bool convex() const;
    double area() const;
};

// 8-DOF projective map from the unit square to the quad.
class Homography {
public:
    static Homography fit(const Quadrilateral& q);

    Point map(double u, double v) const;    // unit square -> pixels
    Point unmap(double x, double y) const;  // pixels -> unit square

private:
    std::array<double, 9> h_{};
    std::array<double, 9> hinv_{};
};

// Multi-scale noisy crop schedule. Base squares per area fraction are laid
// on a shared grid whose stride is a fraction of the smallest crop side, so
// the default schedule reaches the intended crop count and per-pixel visit
// rate; corners are then jittered and clamped, with convexity rejection.
struct CropScheduleOptions {
    std::vector<double> area_fracs = {0.01, 0.1, 1.0};
    double noise_frac = 0.05;
    double stride_frac = 0.4;  // of the smallest crop side
};

std::vector<Quadrilateral> sample_crops(int image_h, int image_w,
                                        const CropScheduleOptions& opt,
                                        uint64_t seed);

struct PixelFeatureField {
    std::vector<double> accum;   // H * W * D
    std::vector<double> weight;  // H * W
    int height = 0, width = 0, dim = 0;

    double* feat(int y, int x) {
        return accum.data() + (static_cast<size_t>(y) * width + x) * dim;
    }
    const double* feat(int y, int x) const {
        return accum.data() + (static_cast<size_t>(y) * width + x) * dim;
    }
    double& wgt(int y, int x) { return weight[static_cast<size_t>(y) * width + x]; }
    double wgt(int y, int x) const { return weight[static_cast<size_t>(y) * width + x]; }
};

// Warps the quad content to a sample_res x sample_res raster (bilinear,
// clamp-to-edge) and encodes it.
Raster warp_raster(const Raster& src, const Homography& hmg, int sample_res);

// Projects a warped-crop patch grid back into the pixel field. Gather mode
// (default): every pixel inside the quad pulls a bilinear interpolation of
// the patch lattice at its inverse-mapped position. Scatter mode: each patch
// feature splats onto the 4 pixels around its mapped center. `weight` scales
// one crop's whole contribution (both accum and weight), so the normalized
// field is a weighted mean across crops.
void splat_back(PixelFeatureField& field, const FeatureGrid& grid,
                const Homography& hmg, bool scatter = false, double weight = 1.0);

struct HighresParams {
    CropScheduleOptions crops;
    int sample_res = 224;  // multiple of the encoder patch size
    int k = 32;
    uint64_t seed = 0;
    int threads = 1;
    bool scatter_splat = false;
    bool bypass_cluster = false;  // per-pixel argmax on field logits, no k-means
    size_t kmeans_pixel_cap = 65536;
};

// Accumulated per-pixel features over the full crop schedule. Patch rows are
// L2-normalized before projection. Crops are combined with inverse-variance
// weights: a crop's patch-lattice blur grows with its source footprint, so
// its contribution is discounted by its squared area relative to the finest
// crop in the schedule (single-scale schedules are unaffected). Pixels left
// unvisited by every crop copy their nearest visited neighbor.
PixelFeatureField build_pixel_feature_field(const AlignmentModel& m,
                                            const VisionEncoder& enc,
                                            const Raster& raster,
                                            const HighresParams& params);

// Per-pixel query logits from a field: plain dot with the normalized query
// patch halves (linear in the field, so a single full-image crop reproduces
// dense logits + bilinear upsampling).
std::vector<std::vector<double>> field_logits(const PixelFeatureField& field,
                                              const QueryEmbeddings& queries);

SegmentationMap highres_segment(const AlignmentModel& m, const VisionEncoder& enc,
                                const Raster& raster, const QueryEmbeddings& queries,
                                const HighresParams& params);

// per-pixel visit counts for a crop schedule (gather coverage)
std::vector<double> crop_coverage(int image_h, int image_w,
                                  const std::vector<Quadrilateral>& crops);

}  // namespace dtx
