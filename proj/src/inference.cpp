#include "dtx/inference.hpp"

#include <algorithm>
#include <cmath>

#include "dtx/parallel.hpp"

namespace dtx {

std::string ClassPrompt::render() const {
    std::string out = template_str;
    auto pos = out.find("{}");
    if (pos == std::string::npos) return out.empty() ? class_name : out;
    out.replace(pos, 2, class_name);
    check(!out.empty(), ErrorKind::data, "rendered prompt is empty");
    return out;
}

std::vector<ClassPrompt> bare_prompts(const std::vector<std::string>& names,
                                      const std::string& template_str) {
    std::vector<ClassPrompt> out;
    for (const auto& n : names) out.push_back({n, template_str});
    return out;
}

QueryEmbeddings embed_queries(const AlignmentModel& m,
                              const std::vector<ClassPrompt>& prompts) {
    check(!prompts.empty(), ErrorKind::data, "embed_queries: no prompts");
    int d = m.cfg.dim;
    QueryEmbeddings q;
    q.full = Mat(static_cast<int>(prompts.size()), 2 * d);
    q.cls_part = Mat(static_cast<int>(prompts.size()), d);
    q.patch_part = Mat(static_cast<int>(prompts.size()), d);
    for (size_t i = 0; i < prompts.size(); ++i) {
        q.names.push_back(prompts[i].class_name);
        auto ids = m.tokenizer.tokenize(prompts[i].render());
        TextEmbedding e = encode_text(m, ids);
        auto nr = l2_normalize(e.full);
        check(!nr.degenerate, ErrorKind::numeric,
              "degenerate text embedding for query: " + prompts[i].class_name);
        std::copy(nr.v.begin(), nr.v.end(), q.full.row(static_cast<int>(i)));
        std::copy_n(nr.v.begin(), d, q.cls_part.row(static_cast<int>(i)));
        // patch half renormalized independently for dense scoring
        Vec ph(nr.v.begin() + d, nr.v.end());
        auto pn = l2_normalize(ph);
        check(!pn.degenerate, ErrorKind::numeric,
              "degenerate patch-part for query: " + prompts[i].class_name);
        std::copy(pn.v.begin(), pn.v.end(), q.patch_part.row(static_cast<int>(i)));
    }
    return q;
}

namespace {

// query vectors at the model's pooled width, rows unit-norm
Mat queries_at_pooled_width(const AlignmentModel& m, const QueryEmbeddings& q) {
    int d = pooled_dim(m.cfg.pooling, m.cfg.dim);
    if (d == q.full.cols) return q.full;
    Mat out(q.full.rows, d);
    for (int i = 0; i < q.full.rows; ++i) {
        Vec head(q.full.row(i), q.full.row(i) + d);
        auto nr = l2_normalize(head);
        std::copy(nr.v.begin(), nr.v.end(), out.row(i));
    }
    return out;
}

}  // namespace

Classification classify(const AlignmentModel& m, const FeatureGrid& grid,
                        const QueryEmbeddings& queries) {
    Vec g = image_descriptor(m, grid);
    Mat qm = queries_at_pooled_width(m, queries);
    Classification res;
    res.scores.resize(qm.rows);
    for (int i = 0; i < qm.rows; ++i) {
        double s = dot(g.data(), qm.row(i), g.size());
        res.scores[i] = std::clamp(s, -1.0, 1.0);
        if (res.scores[i] > res.scores[res.argmax]) res.argmax = i;
    }
    return res;
}

double retrieve_r1(const AlignmentModel& m,
                   const std::vector<FeatureGrid>& grids,
                   const std::vector<std::string>& captions) {
    check(grids.size() == captions.size() && !grids.empty(), ErrorKind::data,
          "retrieve_r1: count mismatch");
    size_t n = grids.size();
    std::vector<Vec> img(n), txt(n);
    for (size_t i = 0; i < n; ++i) {
        img[i] = image_descriptor(m, grids[i]);
        txt[i] = text_descriptor(m, m.tokenizer.tokenize(captions[i]));
    }
    size_t hits = 0;
    for (size_t i = 0; i < n; ++i) {
        size_t best = 0;
        double bs = -2.0;
        for (size_t j = 0; j < n; ++j) {
            double s = dot(txt[i].data(), img[j].data(), txt[i].size());
            if (s > bs) {
                bs = s;
                best = j;
            }
        }
        if (best == i) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

LogitVolume dense_logits(const AlignmentModel& m, const FeatureGrid& grid,
                         const QueryEmbeddings& queries, DenseEmbedding mode) {
    Vec cls;
    Mat patches;
    vision_forward(m, grid, cls, patches);
    int n = patches.rows, q = queries.full.rows;
    LogitVolume vol;
    vol.grid_h = grid.grid_h;
    vol.grid_w = grid.grid_w;
    vol.n_queries = q;
    vol.logits.assign(static_cast<size_t>(n) * q, 0.0);
    vol.weights.assign(static_cast<size_t>(n), 1.0);
    for (int p = 0; p < n; ++p) {
        if (mode == DenseEmbedding::PATCH) {
            Vec f(patches.row(p), patches.row(p) + patches.cols);
            auto nf = l2_normalize(f);
            check(!nf.degenerate, ErrorKind::numeric, "degenerate patch feature");
            for (int j = 0; j < q; ++j)
                vol.logits[static_cast<size_t>(p) * q + j] = std::clamp(
                    dot(nf.v.data(), queries.patch_part.row(j), nf.v.size()), -1.0, 1.0);
        } else {
            Vec f;
            f.reserve(2 * patches.cols);
            f.insert(f.end(), cls.begin(), cls.end());
            f.insert(f.end(), patches.row(p), patches.row(p) + patches.cols);
            auto nf = l2_normalize(f);
            check(!nf.degenerate, ErrorKind::numeric, "degenerate patch feature");
            for (int j = 0; j < q; ++j)
                vol.logits[static_cast<size_t>(p) * q + j] = std::clamp(
                    dot(nf.v.data(), queries.full.row(j), nf.v.size()), -1.0, 1.0);
        }
    }
    return vol;
}

std::vector<std::vector<double>> upsample_logits(const LogitVolume& vol,
                                                 int out_h, int out_w) {
    std::vector<std::vector<double>> out(
        vol.n_queries, std::vector<double>(static_cast<size_t>(out_h) * out_w));
    double sy = out_h > 1 ? static_cast<double>(vol.grid_h - 1) / (out_h - 1) : 0.0;
    double sx = out_w > 1 ? static_cast<double>(vol.grid_w - 1) / (out_w - 1) : 0.0;
    for (int y = 0; y < out_h; ++y) {
        double gy = y * sy;
        int y0 = std::min(static_cast<int>(gy), vol.grid_h - 1);
        int y1 = std::min(y0 + 1, vol.grid_h - 1);
        double fy = gy - y0;
        for (int x = 0; x < out_w; ++x) {
            double gx = x * sx;
            int x0 = std::min(static_cast<int>(gx), vol.grid_w - 1);
            int x1 = std::min(x0 + 1, vol.grid_w - 1);
            double fx = gx - x0;
            for (int q = 0; q < vol.n_queries; ++q) {
                double v = (1 - fy) * ((1 - fx) * vol.at(y0, x0, q) +
                                       fx * vol.at(y0, x1, q)) +
                           fy * ((1 - fx) * vol.at(y1, x0, q) +
                                 fx * vol.at(y1, x1, q));
                out[q][static_cast<size_t>(y) * out_w + x] = v;
            }
        }
    }
    return out;
}

std::vector<int> window_offsets(int image_extent, int window, int stride) {
    check(window <= image_extent, ErrorKind::data,
          "window larger than image");
    check(stride >= 1, ErrorKind::data, "stride must be >= 1");
    std::vector<int> offs;
    for (int o = 0; o + window <= image_extent; o += stride) offs.push_back(o);
    if (offs.empty() || offs.back() + window < image_extent)
        offs.push_back(image_extent - window);
    return offs;
}

SegmentationMap sliding_window_segment(const AlignmentModel& m,
                                       const VisionEncoder& enc,
                                       const Raster& raster,
                                       const QueryEmbeddings& queries,
                                       const SlidingWindowOptions& opt) {
    int patch = enc.patch_size();
    int window = opt.window > 0 ? opt.window : 8 * patch;
    window = std::min(window, std::min(raster.height, raster.width));
    check(window % patch == 0, ErrorKind::usage,
          "window must be a multiple of the patch size");
    int stride = opt.stride > 0 ? opt.stride : window / 2;
    stride = std::max(patch, (stride / patch) * patch);  // patch-aligned grid

    auto ys = window_offsets(raster.height, window, stride);
    auto xs = window_offsets(raster.width, window, stride);
    for (int& o : ys) o = (o / patch) * patch;
    for (int& o : xs) o = (o / patch) * patch;

    int gh = raster.height / patch, gw = raster.width / patch;
    int q = queries.full.rows;
    LogitVolume acc;
    acc.grid_h = gh;
    acc.grid_w = gw;
    acc.n_queries = q;
    acc.logits.assign(static_cast<size_t>(gh) * gw * q, 0.0);
    acc.weights.assign(static_cast<size_t>(gh) * gw, 0.0);

    struct Win {
        int oy, ox;
        LogitVolume vol;
    };
    std::vector<Win> wins;
    for (int oy : ys)
        for (int ox : xs) wins.push_back({oy, ox, {}});

    parallel_for(wins.size(), opt.threads, [&](size_t i) {
        auto& w = wins[i];
        Raster crop(window, window);
        for (int y = 0; y < window; ++y)
            std::copy_n(raster.px(w.oy + y, w.ox), static_cast<size_t>(window) * 3,
                        crop.px(y, 0));
        FeatureGrid g = enc.encode(crop);
        w.vol = dense_logits(m, g, queries, opt.embedding);
    });

    // fixed-order merge
    for (const auto& w : wins) {
        int by = w.oy / patch, bx = w.ox / patch;
        for (int y = 0; y < w.vol.grid_h; ++y)
            for (int x = 0; x < w.vol.grid_w; ++x) {
                acc.weights[static_cast<size_t>(by + y) * gw + (bx + x)] += 1.0;
                for (int j = 0; j < q; ++j)
                    acc.at(by + y, bx + x, j) += w.vol.at(y, x, j);
            }
    }
    for (int y = 0; y < gh; ++y)
        for (int x = 0; x < gw; ++x) {
            double wgt = acc.weights[static_cast<size_t>(y) * gw + x];
            check(wgt > 0.0, ErrorKind::numeric, "sliding window coverage hole");
            for (int j = 0; j < q; ++j) acc.at(y, x, j) /= wgt;
        }

    auto up = upsample_logits(acc, raster.height, raster.width);
    SegmentationMap seg;
    seg.height = raster.height;
    seg.width = raster.width;
    seg.class_names = queries.names;
    seg.labels.assign(static_cast<size_t>(raster.height) * raster.width, 0);
    for (size_t px = 0; px < seg.labels.size(); ++px) {
        int best = 0;
        for (int j = 1; j < q; ++j)
            if (up[j][px] > up[best][px]) best = j;
        seg.labels[px] = static_cast<uint16_t>(best);
    }
    return seg;
}

}  // namespace dtx
