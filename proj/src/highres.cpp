#include "dtx/highres.hpp"

#include <algorithm>
#include <cmath>

#include "dtx/clustering.hpp"
#include "dtx/parallel.hpp"
#include "dtx/rng.hpp"

namespace dtx {

namespace {

double cross_z(const Point& o, const Point& a, const Point& b) {
    return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

}  // namespace

bool Quadrilateral::convex() const {
    int sign = 0;
    for (int i = 0; i < 4; ++i) {
        double cz = cross_z(corners[i], corners[(i + 1) % 4], corners[(i + 2) % 4]);
        if (std::abs(cz) < 1e-9) return false;
        int s = cz > 0 ? 1 : -1;
        if (sign == 0) sign = s;
        else if (s != sign) return false;
    }
    return true;
}

double Quadrilateral::area() const {
    double a = 0.0;
    for (int i = 0; i < 4; ++i) {
        const Point& p = corners[i];
        const Point& q = corners[(i + 1) % 4];
        a += p.x * q.y - q.x * p.y;
    }
    return std::abs(a) * 0.5;
}

namespace {

// Gaussian elimination with partial pivoting on an n x (n+1) system.
void solve_linear(std::vector<double>& a, int n, double* out) {
    int w = n + 1;
    for (int col = 0; col < n; ++col) {
        int piv = col;
        for (int r = col + 1; r < n; ++r)
            if (std::abs(a[r * w + col]) > std::abs(a[piv * w + col])) piv = r;
        check(std::abs(a[piv * w + col]) > 1e-12, ErrorKind::numeric,
              "homography: degenerate quad");
        if (piv != col)
            for (int c = 0; c < w; ++c) std::swap(a[piv * w + c], a[col * w + c]);
        double d = a[col * w + col];
        for (int c = col; c < w; ++c) a[col * w + c] /= d;
        for (int r = 0; r < n; ++r) {
            if (r == col) continue;
            double f = a[r * w + col];
            if (f == 0.0) continue;
            for (int c = col; c < w; ++c) a[r * w + c] -= f * a[col * w + c];
        }
    }
    for (int r = 0; r < n; ++r) out[r] = a[r * w + n];
}

std::array<double, 9> invert3(const std::array<double, 9>& m) {
    double det = m[0] * (m[4] * m[8] - m[5] * m[7]) -
                 m[1] * (m[3] * m[8] - m[5] * m[6]) +
                 m[2] * (m[3] * m[7] - m[4] * m[6]);
    check(std::abs(det) > 1e-12, ErrorKind::numeric,
          "homography: non-invertible matrix");
    std::array<double, 9> inv;
    inv[0] = (m[4] * m[8] - m[5] * m[7]) / det;
    inv[1] = (m[2] * m[7] - m[1] * m[8]) / det;
    inv[2] = (m[1] * m[5] - m[2] * m[4]) / det;
    inv[3] = (m[5] * m[6] - m[3] * m[8]) / det;
    inv[4] = (m[0] * m[8] - m[2] * m[6]) / det;
    inv[5] = (m[2] * m[3] - m[0] * m[5]) / det;
    inv[6] = (m[3] * m[7] - m[4] * m[6]) / det;
    inv[7] = (m[1] * m[6] - m[0] * m[7]) / det;
    inv[8] = (m[0] * m[4] - m[1] * m[3]) / det;
    return inv;
}

}  // namespace

Homography Homography::fit(const Quadrilateral& q) {
    check(q.convex() && q.area() > 1e-9, ErrorKind::numeric,
          "homography: quad must be convex with positive area");
    // unit-square corners in TL,TR,BR,BL order
    const double us[4] = {0, 1, 1, 0};
    const double vs[4] = {0, 0, 1, 1};
    // x = (a u + b v + c)/(g u + h v + 1), y = (d u + e v + f)/(...)
    std::vector<double> sys(8 * 9, 0.0);
    for (int i = 0; i < 4; ++i) {
        double u = us[i], v = vs[i];
        double x = q.corners[i].x, y = q.corners[i].y;
        double* r1 = sys.data() + (2 * i) * 9;
        double* r2 = sys.data() + (2 * i + 1) * 9;
        r1[0] = u; r1[1] = v; r1[2] = 1; r1[6] = -u * x; r1[7] = -v * x; r1[8] = x;
        r2[3] = u; r2[4] = v; r2[5] = 1; r2[6] = -u * y; r2[7] = -v * y; r2[8] = y;
    }
    double coef[8];
    solve_linear(sys, 8, coef);
    Homography hm;
    for (int i = 0; i < 8; ++i) hm.h_[i] = coef[i];
    hm.h_[8] = 1.0;
    hm.hinv_ = invert3(hm.h_);
    return hm;
}

Point Homography::map(double u, double v) const {
    double w = h_[6] * u + h_[7] * v + h_[8];
    return {(h_[0] * u + h_[1] * v + h_[2]) / w,
            (h_[3] * u + h_[4] * v + h_[5]) / w};
}

Point Homography::unmap(double x, double y) const {
    double w = hinv_[6] * x + hinv_[7] * y + hinv_[8];
    return {(hinv_[0] * x + hinv_[1] * y + hinv_[2]) / w,
            (hinv_[3] * x + hinv_[4] * y + hinv_[5]) / w};
}

std::vector<Quadrilateral> sample_crops(int image_h, int image_w,
                                        const CropScheduleOptions& opt,
                                        uint64_t seed) {
    check(!opt.area_fracs.empty(), ErrorKind::data, "sample_crops: no area fractions");
    for (double f : opt.area_fracs)
        check(f > 0.0 && f <= 1.0, ErrorKind::data, "area fraction out of (0,1]");
    check(opt.noise_frac >= 0.0 && opt.noise_frac < 0.5, ErrorKind::data,
          "noise fraction out of [0,0.5)");
    double min_frac = *std::min_element(opt.area_fracs.begin(), opt.area_fracs.end());
    double geom = std::sqrt(static_cast<double>(image_h) * image_w);
    double stride = std::max(1.0, opt.stride_frac * std::sqrt(min_frac) * geom);

    Rng rng(hash_combine(seed, 0xc409b5ULL));
    std::vector<Quadrilateral> out;
    for (double frac : opt.area_fracs) {
        double side = std::sqrt(frac) * geom;
        side = std::min({side, static_cast<double>(image_h), static_cast<double>(image_w)});
        auto offsets = [&](int extent) {
            std::vector<double> offs;
            double span = extent - 1.0;
            for (double o = 0.0; o + side - 1.0 <= span + 1e-9; o += stride)
                offs.push_back(o);
            if (offs.empty() || offs.back() + side - 1.0 < span - 1e-9)
                offs.push_back(span - (side - 1.0));
            return offs;
        };
        auto ys = offsets(image_h);
        auto xs = offsets(image_w);
        for (double oy : ys) {
            for (double ox : xs) {
                Quadrilateral base;
                base.corners = {Point{ox, oy}, Point{ox + side - 1.0, oy},
                                Point{ox + side - 1.0, oy + side - 1.0},
                                Point{ox, oy + side - 1.0}};
                Quadrilateral q = base;
                if (opt.noise_frac > 0.0) {
                    bool ok = false;
                    for (int attempt = 0; attempt < 8 && !ok; ++attempt) {
                        q = base;
                        for (auto& c : q.corners) {
                            c.x += rng.uniform(-opt.noise_frac, opt.noise_frac) * side;
                            c.y += rng.uniform(-opt.noise_frac, opt.noise_frac) * side;
                            c.x = std::clamp(c.x, 0.0, image_w - 1.0);
                            c.y = std::clamp(c.y, 0.0, image_h - 1.0);
                        }
                        ok = q.convex();
                    }
                    if (!ok) q = base;  // fall back to the un-noised square
                }
                out.push_back(q);
            }
        }
    }
    return out;
}

Raster warp_raster(const Raster& src, const Homography& hmg, int sample_res) {
    Raster out(sample_res, sample_res);
    double denom = sample_res > 1 ? sample_res - 1.0 : 1.0;
    for (int i = 0; i < sample_res; ++i) {
        double v = i / denom;
        for (int j = 0; j < sample_res; ++j) {
            double u = j / denom;
            Point p = hmg.map(u, v);
            double x = std::clamp(p.x, 0.0, src.width - 1.0);
            double y = std::clamp(p.y, 0.0, src.height - 1.0);
            int x0 = static_cast<int>(x), y0 = static_cast<int>(y);
            int x1 = std::min(x0 + 1, src.width - 1);
            int y1 = std::min(y0 + 1, src.height - 1);
            double fx = x - x0, fy = y - y0;
            for (int c = 0; c < 3; ++c) {
                double val = (1 - fy) * ((1 - fx) * src.px(y0, x0)[c] +
                                         fx * src.px(y0, x1)[c]) +
                             fy * ((1 - fx) * src.px(y1, x0)[c] +
                                   fx * src.px(y1, x1)[c]);
                out.px(i, j)[c] =
                    static_cast<uint8_t>(std::clamp(std::lround(val), 0l, 255l));
            }
        }
    }
    return out;
}

namespace {

// bilinear read of the (gh x gw x D) patch lattice at corner-aligned coords
void lattice_read(const Mat& patches, int gh, int gw, double u, double v,
                  double* out) {
    double lu = u * (gw - 1);
    double lv = v * (gh - 1);
    int x0 = std::clamp(static_cast<int>(lu), 0, gw - 1);
    int y0 = std::clamp(static_cast<int>(lv), 0, gh - 1);
    int x1 = std::min(x0 + 1, gw - 1);
    int y1 = std::min(y0 + 1, gh - 1);
    double fx = lu - x0, fy = lv - y0;
    const double* p00 = patches.row(y0 * gw + x0);
    const double* p01 = patches.row(y0 * gw + x1);
    const double* p10 = patches.row(y1 * gw + x0);
    const double* p11 = patches.row(y1 * gw + x1);
    int d = patches.cols;
    for (int c = 0; c < d; ++c)
        out[c] = (1 - fy) * ((1 - fx) * p00[c] + fx * p01[c]) +
                 fy * ((1 - fx) * p10[c] + fx * p11[c]);
}

}  // namespace

void splat_back(PixelFeatureField& field, const FeatureGrid& grid,
                const Homography& hmg, bool scatter, double weight) {
    check(field.dim == grid.dim(), ErrorKind::data, "splat_back: dim mismatch");
    check(weight > 0.0, ErrorKind::usage, "splat_back: weight must be positive");
    int gh = grid.grid_h, gw = grid.grid_w;
    if (scatter) {
        for (int py = 0; py < gh; ++py)
            for (int px = 0; px < gw; ++px) {
                double u = gw > 1 ? static_cast<double>(px) / (gw - 1) : 0.5;
                double v = gh > 1 ? static_cast<double>(py) / (gh - 1) : 0.5;
                Point p = hmg.map(u, v);
                int x0 = static_cast<int>(std::floor(p.x));
                int y0 = static_cast<int>(std::floor(p.y));
                double fx = p.x - x0, fy = p.y - y0;
                const double* f = grid.patches.row(py * gw + px);
                for (int dy = 0; dy <= 1; ++dy)
                    for (int dx = 0; dx <= 1; ++dx) {
                        int xx = x0 + dx, yy = y0 + dy;
                        if (xx < 0 || yy < 0 || xx >= field.width || yy >= field.height)
                            continue;
                        double w = weight * (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy);
                        if (w <= 0.0) continue;
                        double* dst = field.feat(yy, xx);
                        for (int c = 0; c < field.dim; ++c) dst[c] += w * f[c];
                        field.wgt(yy, xx) += w;
                    }
            }
        return;
    }
    // gather: every pixel whose inverse map lands in the unit square
    double minx = field.width - 1.0, maxx = 0.0, miny = field.height - 1.0, maxy = 0.0;
    for (double u : {0.0, 1.0})
        for (double v : {0.0, 1.0}) {
            Point p = hmg.map(u, v);
            minx = std::min(minx, p.x);
            maxx = std::max(maxx, p.x);
            miny = std::min(miny, p.y);
            maxy = std::max(maxy, p.y);
        }
    int x_lo = std::max(0, static_cast<int>(std::floor(minx)));
    int x_hi = std::min(field.width - 1, static_cast<int>(std::ceil(maxx)));
    int y_lo = std::max(0, static_cast<int>(std::floor(miny)));
    int y_hi = std::min(field.height - 1, static_cast<int>(std::ceil(maxy)));
    std::vector<double> feat(field.dim);
    const double eps = 1e-9;
    for (int y = y_lo; y <= y_hi; ++y)
        for (int x = x_lo; x <= x_hi; ++x) {
            Point uv = hmg.unmap(x, y);
            if (uv.x < -eps || uv.x > 1 + eps || uv.y < -eps || uv.y > 1 + eps)
                continue;
            double u = std::clamp(uv.x, 0.0, 1.0);
            double v = std::clamp(uv.y, 0.0, 1.0);
            lattice_read(grid.patches, gh, gw, u, v, feat.data());
            double* dst = field.feat(y, x);
            for (int c = 0; c < field.dim; ++c) dst[c] += weight * feat[c];
            field.wgt(y, x) += weight;
        }
}

std::vector<double> crop_coverage(int image_h, int image_w,
                                  const std::vector<Quadrilateral>& crops) {
    std::vector<double> visits(static_cast<size_t>(image_h) * image_w, 0.0);
    const double eps = 1e-9;
    for (const auto& q : crops) {
        Homography hmg = Homography::fit(q);
        double minx = image_w - 1.0, maxx = 0.0, miny = image_h - 1.0, maxy = 0.0;
        for (const auto& c : q.corners) {
            minx = std::min(minx, c.x);
            maxx = std::max(maxx, c.x);
            miny = std::min(miny, c.y);
            maxy = std::max(maxy, c.y);
        }
        int x_lo = std::max(0, static_cast<int>(std::floor(minx)));
        int x_hi = std::min(image_w - 1, static_cast<int>(std::ceil(maxx)));
        int y_lo = std::max(0, static_cast<int>(std::floor(miny)));
        int y_hi = std::min(image_h - 1, static_cast<int>(std::ceil(maxy)));
        for (int y = y_lo; y <= y_hi; ++y)
            for (int x = x_lo; x <= x_hi; ++x) {
                Point uv = hmg.unmap(x, y);
                if (uv.x < -eps || uv.x > 1 + eps || uv.y < -eps || uv.y > 1 + eps)
                    continue;
                visits[static_cast<size_t>(y) * image_w + x] += 1.0;
            }
    }
    return visits;
}

PixelFeatureField build_pixel_feature_field(const AlignmentModel& m,
                                            const VisionEncoder& enc,
                                            const Raster& raster,
                                            const HighresParams& params) {
    check(params.sample_res % enc.patch_size() == 0, ErrorKind::usage,
          "sample_res must be a multiple of the encoder patch size");
    auto quads = sample_crops(raster.height, raster.width, params.crops, params.seed);

    PixelFeatureField field;
    field.height = raster.height;
    field.width = raster.width;
    field.dim = m.cfg.dim;
    field.accum.assign(static_cast<size_t>(raster.height) * raster.width * field.dim,
                       0.0);
    field.weight.assign(static_cast<size_t>(raster.height) * raster.width, 0.0);

    // feature extraction per crop in parallel; splats merged in crop order
    std::vector<Homography> hmgs(quads.size());
    std::vector<FeatureGrid> grids(quads.size());
    parallel_for(quads.size(), params.threads, [&](size_t i) {
        hmgs[i] = Homography::fit(quads[i]);
        Raster warped = warp_raster(raster, hmgs[i], params.sample_res);
        FeatureGrid g = enc.encode(warped);
        Vec cls;
        Mat patches;
        vision_forward(m, g, cls, patches);
        // rows normalized before projection back to pixels
        for (int p = 0; p < patches.rows; ++p) {
            double n = std::max(norm2(patches.row(p), patches.cols), 1e-12);
            for (int c = 0; c < patches.cols; ++c) patches.row(p)[c] /= n;
        }
        grids[i].cls = cls;
        grids[i].patches = std::move(patches);
        grids[i].grid_h = g.grid_h;
        grids[i].grid_w = g.grid_w;
    });
    // inverse-variance weighting across scales: the blur of a crop's patch
    // lattice grows with its source footprint, so each crop's contribution is
    // discounted by its area relative to the finest crop in the schedule (the
    // finest scale keeps weight 1, so single-scale schedules are unaffected)
    double min_area = std::numeric_limits<double>::infinity();
    for (const auto& q : quads) min_area = std::min(min_area, q.area());
    for (size_t i = 0; i < quads.size(); ++i) {
        double rel = min_area / std::max(quads[i].area(), 1e-12);
        splat_back(field, grids[i], hmgs[i], params.scatter_splat, rel * rel);
    }

    // corner noise can pull quads off the image border; borrow the nearest
    // covered pixel for the few that end up unvisited
    std::vector<size_t> holes;
    bool any_covered = false;
    for (int y = 0; y < field.height; ++y)
        for (int x = 0; x < field.width; ++x) {
            if (field.wgt(y, x) > 0.0)
                any_covered = true;
            else
                holes.push_back(static_cast<size_t>(y) * field.width + x);
        }
    check(any_covered, ErrorKind::numeric,
          "highres coverage violated: no pixel visited");
    for (size_t px : holes) {
        int hy = static_cast<int>(px) / field.width;
        int hx = static_cast<int>(px) % field.width;
        int best = -1;
        long best_d2 = 0;
        for (int y = 0; y < field.height; ++y)
            for (int x = 0; x < field.width; ++x) {
                if (field.wgt(y, x) <= 0.0) continue;
                long dy = y - hy, dx = x - hx;
                long d2 = dy * dy + dx * dx;
                if (best < 0 || d2 < best_d2) {
                    best = y * field.width + x;
                    best_d2 = d2;
                }
            }
        const double* src = field.feat(best / field.width, best % field.width);
        double* dst = &field.accum[px * field.dim];
        for (int c = 0; c < field.dim; ++c) dst[c] = src[c];
        field.weight[px] = field.weight[best];
    }
    return field;
}

std::vector<std::vector<double>> field_logits(const PixelFeatureField& field,
                                              const QueryEmbeddings& queries) {
    size_t n_px = static_cast<size_t>(field.height) * field.width;
    int q = queries.patch_part.rows;
    std::vector<std::vector<double>> out(q, std::vector<double>(n_px));
    for (int y = 0; y < field.height; ++y)
        for (int x = 0; x < field.width; ++x) {
            const double* f = field.feat(y, x);
            double w = field.wgt(y, x);
            size_t px = static_cast<size_t>(y) * field.width + x;
            for (int j = 0; j < q; ++j) {
                double s = dot(f, queries.patch_part.row(j), field.dim);
                out[j][px] = s / w;
            }
        }
    return out;
}

SegmentationMap highres_segment(const AlignmentModel& m, const VisionEncoder& enc,
                                const Raster& raster, const QueryEmbeddings& queries,
                                const HighresParams& params) {
    PixelFeatureField field = build_pixel_feature_field(m, enc, raster, params);
    SegmentationMap seg;
    seg.height = raster.height;
    seg.width = raster.width;
    seg.class_names = queries.names;
    seg.labels.assign(static_cast<size_t>(raster.height) * raster.width, 0);

    if (params.bypass_cluster) {
        auto logits = field_logits(field, queries);
        for (size_t px = 0; px < seg.labels.size(); ++px) {
            int best = 0;
            for (int j = 1; j < static_cast<int>(logits.size()); ++j)
                if (logits[j][px] > logits[best][px]) best = j;
            seg.labels[px] = static_cast<uint16_t>(best);
        }
        return seg;
    }

    // normalized per-pixel features
    size_t n_px = static_cast<size_t>(field.height) * field.width;
    Mat feats(static_cast<int>(n_px), field.dim);
    for (size_t px = 0; px < n_px; ++px) {
        const double* f = field.accum.data() + px * field.dim;
        double w = field.weight[px];
        double n = 0.0;
        for (int c = 0; c < field.dim; ++c) {
            double v = f[c] / w;
            feats.row(static_cast<int>(px))[c] = v;
            n += v * v;
        }
        n = std::max(std::sqrt(n), 1e-12);
        for (int c = 0; c < field.dim; ++c) feats.row(static_cast<int>(px))[c] /= n;
    }

    // k-means on a bounded pixel subsample, exact assignment for all pixels
    int k = std::min<int>(params.k, static_cast<int>(n_px));
    Mat fit_pts;
    if (n_px > params.kmeans_pixel_cap) {
        Rng rng(hash_combine(params.seed, 0xf17db5ULL));
        auto pick = rng.sample_without_replacement(n_px, params.kmeans_pixel_cap);
        std::sort(pick.begin(), pick.end());
        fit_pts = Mat(static_cast<int>(pick.size()), field.dim);
        for (size_t i = 0; i < pick.size(); ++i)
            std::copy_n(feats.row(static_cast<int>(pick[i])), field.dim,
                        fit_pts.row(static_cast<int>(i)));
    } else {
        fit_pts = feats;
    }
    KMeansOptions kopt;
    kopt.threads = params.threads;
    KMeansResult km = kmeans_fit(fit_pts, k, params.seed, kopt);

    // classify centroids against the query patch halves
    std::vector<uint16_t> centroid_class(k, 0);
    for (int c = 0; c < k; ++c) {
        Vec cen(km.centroids.row(c), km.centroids.row(c) + field.dim);
        auto nc = l2_normalize(cen);
        int best = 0;
        double bs = -2.0;
        for (int j = 0; j < queries.patch_part.rows; ++j) {
            double s = nc.degenerate
                           ? -2.0
                           : dot(nc.v.data(), queries.patch_part.row(j), field.dim);
            if (s > bs) {
                bs = s;
                best = j;
            }
        }
        centroid_class[c] = static_cast<uint16_t>(best);
    }
    for (size_t px = 0; px < n_px; ++px) {
        int best = 0;
        double bd = std::numeric_limits<double>::infinity();
        for (int c = 0; c < k; ++c) {
            double d2 = 0.0;
            const double* a = feats.row(static_cast<int>(px));
            const double* b = km.centroids.row(c);
            for (int j = 0; j < field.dim; ++j) {
                double t = a[j] - b[j];
                d2 += t * t;
            }
            if (d2 < bd) {
                bd = d2;
                best = c;
            }
        }
        seg.labels[px] = centroid_class[best];
    }
    return seg;
}

}  // namespace dtx
