#include "dtx/encoder.hpp"

#include <algorithm>
#include <set>

#include "dtx/binio.hpp"
#include "dtx/rng.hpp"

namespace dtx {

void write_raster(const Raster& r, const std::string& path) {
    BinWriter w(path);
    w.magic("DTXR");
    w.u32(static_cast<uint32_t>(r.height));
    w.u32(static_cast<uint32_t>(r.width));
    w.raw(r.pixels.data(), r.pixels.size());
    w.close();
}

Raster read_raster(const std::string& path) {
    BinReader rd(path);
    rd.expect_magic("DTXR");
    Raster r;
    r.height = static_cast<int>(rd.u32());
    r.width = static_cast<int>(rd.u32());
    check(r.height > 0 && r.width > 0 && r.height < (1 << 16) && r.width < (1 << 16),
          ErrorKind::data, path + ": bad raster dimensions");
    r.pixels.resize(static_cast<size_t>(r.height) * r.width * 3);
    rd.raw(r.pixels.data(), r.pixels.size());
    return r;
}

SyntheticEncoder::SyntheticEncoder(int dim, uint64_t seed, int patch, double jitter)
    : dim_(dim), seed_(seed), patch_(patch), jitter_(jitter) {
    check(dim >= 8, ErrorKind::data, "synthetic encoder: dim must be >= 8");
    check(patch >= 1, ErrorKind::data, "synthetic encoder: bad patch size");
}

int SyntheticEncoder::color_bin(uint8_t r, uint8_t g, uint8_t b) {
    return (r >> 6) * 16 + (g >> 6) * 4 + (b >> 6);
}

Vec SyntheticEncoder::anchor(int bin) const {
    Rng rng(hash_combine(hash_combine(seed_, 0xa17c4042ULL), static_cast<uint64_t>(bin)));
    Vec v(dim_);
    for (auto& x : v) x = rng.gaussian();
    double n = norm2(v.data(), v.size());
    for (auto& x : v) x /= n;
    return v;
}

FeatureGrid SyntheticEncoder::encode(const Raster& r) const {
    check(r.height % patch_ == 0 && r.width % patch_ == 0, ErrorKind::data,
          "raster dimensions not divisible by patch size");
    FeatureGrid g;
    g.grid_h = r.height / patch_;
    g.grid_w = r.width / patch_;
    g.patches = Mat(g.grid_h * g.grid_w, dim_);
    Vec mean(dim_, 0.0);
    for (int py = 0; py < g.grid_h; ++py) {
        for (int px = 0; px < g.grid_w; ++px) {
            int counts[64] = {0};
            for (int y = py * patch_; y < (py + 1) * patch_; ++y)
                for (int x = px * patch_; x < (px + 1) * patch_; ++x) {
                    const uint8_t* p = r.px(y, x);
                    counts[color_bin(p[0], p[1], p[2])]++;
                }
            int dominant = 0;
            for (int b = 1; b < 64; ++b)
                if (counts[b] > counts[dominant]) dominant = b;
            Vec v = anchor(dominant);
            if (jitter_ > 0.0) {
                Rng jr(hash_combine(hash_combine(hash_combine(seed_, 0xb3377e2ULL),
                                                 static_cast<uint64_t>(py)),
                                    static_cast<uint64_t>(px)));
                Vec j(dim_);
                for (auto& x : j) x = jr.gaussian();
                double jn = norm2(j.data(), j.size());
                for (int i = 0; i < dim_; ++i) v[i] += jitter_ * j[i] / jn;
                double vn = norm2(v.data(), v.size());
                for (auto& x : v) x /= vn;
            }
            std::copy(v.begin(), v.end(), g.patches.row(py * g.grid_w + px));
            for (int i = 0; i < dim_; ++i) mean[i] += v[i];
        }
    }
    int n = g.grid_h * g.grid_w;
    for (auto& x : mean) x /= n;
    auto nr = l2_normalize(mean);
    g.cls = nr.v;
    return g;
}

FeatureGrid file_encode(const std::string& path, int expected_dim) {
    FeatureGrid g = read_feature_grid(path);
    if (expected_dim > 0 && g.dim() != expected_dim)
        throw FileFormatError(FormatError::dim_mismatch,
                              path + ": grid dim does not match configured dim");
    return g;
}

const std::vector<NamedColor>& shapes_palette() {
    static const std::vector<NamedColor> p = {
        {"gray", 96, 96, 96},      {"red", 224, 32, 32},
        {"green", 32, 224, 32},    {"blue", 32, 32, 224},
        {"yellow", 224, 224, 32},  {"magenta", 224, 32, 224},
        {"cyan", 32, 224, 224},    {"orange", 224, 160, 32},
        {"purple", 160, 32, 224},  {"pink", 224, 160, 160},
        {"brown", 160, 96, 32},    {"olive", 160, 160, 32},
        {"teal", 32, 160, 160},    {"navy", 32, 32, 96},
        {"maroon", 96, 32, 32},    {"lime", 160, 224, 32},
        {"white", 224, 224, 224},
    };
    return p;
}

namespace {

NamedColor lookup_color(const std::string& name) {
    for (const auto& c : shapes_palette())
        if (c.name == name) return c;
    throw Error(ErrorKind::data, "unknown shapes color: " + name);
}

struct RectPx {
    int x0, y0, x1, y1;  // half-open, pixel coords
    bool overlaps(const RectPx& o) const {
        return x0 < o.x1 && o.x0 < x1 && y0 < o.y1 && o.y0 < y1;
    }
};

}  // namespace

std::vector<ShapesImage> make_shapes_dataset(int n_images,
                                             const std::vector<std::string>& classes,
                                             uint64_t seed,
                                             const ShapesOptions& opt) {
    check(classes.size() >= 2, ErrorKind::data,
          "shapes dataset needs a background class plus at least one color");
    check(opt.image_size % opt.patch == 0, ErrorKind::data,
          "image size must be a multiple of the patch size");
    std::vector<NamedColor> colors;
    std::set<int> bins;
    for (const auto& c : classes) {
        colors.push_back(lookup_color(c));
        check(bins.insert(SyntheticEncoder::color_bin(colors.back().r, colors.back().g,
                                                      colors.back().b))
                  .second,
              ErrorKind::data, "shapes classes must occupy distinct color bins");
    }

    Rng rng(hash_combine(seed, 0x5484be5ULL));
    int grid = opt.image_size / opt.patch;
    int n_shape_colors = static_cast<int>(classes.size()) - 1;
    std::set<std::vector<int>> seen_sets;

    std::vector<ShapesImage> out;
    out.reserve(n_images);
    for (int img = 0; img < n_images; ++img) {
        ShapesImage si;
        for (int attempt = 0;; ++attempt) {
            check(attempt < 2000, ErrorKind::numeric,
                  "shapes dataset: cannot find enough distinct class combinations");
            int max_r = std::min(opt.max_rects, n_shape_colors);
            int n_rects = opt.min_rects +
                          static_cast<int>(rng.below(max_r - opt.min_rects + 1));
            auto color_pick = rng.sample_without_replacement(n_shape_colors, n_rects);

            std::vector<RectPx> rects;
            std::vector<int> rect_class;
            bool placed_all = true;
            for (size_t ri = 0; ri < color_pick.size(); ++ri) {
                bool placed = false;
                for (int t = 0; t < 100 && !placed; ++t) {
                    int w = opt.min_side_patches +
                            static_cast<int>(rng.below(opt.max_side_patches -
                                                       opt.min_side_patches + 1));
                    int h = opt.min_side_patches +
                            static_cast<int>(rng.below(opt.max_side_patches -
                                                       opt.min_side_patches + 1));
                    if (w > grid) w = grid;
                    if (h > grid) h = grid;
                    int gx = static_cast<int>(rng.below(grid - w + 1));
                    int gy = static_cast<int>(rng.below(grid - h + 1));
                    RectPx r{gx * opt.patch, gy * opt.patch, (gx + w) * opt.patch,
                             (gy + h) * opt.patch};
                    bool clash = false;
                    for (const auto& o : rects)
                        if (r.overlaps(o)) clash = true;
                    if (clash) continue;
                    rects.push_back(r);
                    rect_class.push_back(1 + static_cast<int>(color_pick[ri]));
                    placed = true;
                }
                if (!placed) placed_all = false;
            }
            if (!placed_all || rects.empty()) continue;

            if (opt.unique_class_sets) {
                std::vector<int> key = rect_class;
                std::sort(key.begin(), key.end());
                if (!seen_sets.insert(key).second) continue;
            }

            si.raster = Raster(opt.image_size, opt.image_size);
            si.mask.height = si.mask.width = opt.image_size;
            si.mask.labels.assign(
                static_cast<size_t>(opt.image_size) * opt.image_size, 0);
            si.mask.class_names = classes;
            for (int y = 0; y < opt.image_size; ++y)
                for (int x = 0; x < opt.image_size; ++x) {
                    uint8_t* p = si.raster.px(y, x);
                    p[0] = colors[0].r;
                    p[1] = colors[0].g;
                    p[2] = colors[0].b;
                }
            for (size_t ri = 0; ri < rects.size(); ++ri) {
                const auto& r = rects[ri];
                const auto& c = colors[rect_class[ri]];
                for (int y = r.y0; y < r.y1; ++y)
                    for (int x = r.x0; x < r.x1; ++x) {
                        uint8_t* p = si.raster.px(y, x);
                        p[0] = c.r;
                        p[1] = c.g;
                        p[2] = c.b;
                        si.mask.at(y, x) = static_cast<uint16_t>(rect_class[ri]);
                    }
            }
            break;
        }

        // caption lists classes by raster-scan order of first appearance
        std::vector<char> seen(classes.size(), 0);
        for (uint16_t l : si.mask.labels) {
            if (!seen[l]) {
                seen[l] = 1;
                si.present.push_back(l);
            }
        }
        si.caption = "a photo of";
        for (size_t i = 0; i < si.present.size(); ++i) {
            si.caption += (i == 0 ? " " : " and ");
            si.caption += classes[si.present[i]];
        }
        out.push_back(std::move(si));
    }
    return out;
}

}  // namespace dtx
