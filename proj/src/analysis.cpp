#include "dtx/analysis.hpp"

#include <algorithm>
#include <cmath>

#include "dtx/parallel.hpp"

namespace dtx {

MiouResult miou(const SegmentationMap& pred, const SegmentationMap& gt) {
    check(pred.height == gt.height && pred.width == gt.width, ErrorKind::data,
          "miou: dimension mismatch");
    check(pred.class_names == gt.class_names, ErrorKind::data,
          "miou: class list mismatch");
    int c = static_cast<int>(gt.class_names.size());
    check(c > 0, ErrorKind::data, "miou: empty class list");

    size_t n = gt.labels.size();
    size_t chunk = 4096;
    size_t n_chunks = (n + chunk - 1) / chunk;
    std::vector<ConfusionMatrix> parts(n_chunks);
    parallel_for(n_chunks, 0, [&](size_t ci) {
        ConfusionMatrix& cm = parts[ci];
        cm.n_classes = c;
        cm.counts.assign(static_cast<size_t>(c) * c, 0);
        size_t lo = ci * chunk, hi = std::min(n, lo + chunk);
        for (size_t i = lo; i < hi; ++i) {
            uint16_t g = gt.labels[i], p = pred.labels[i];
            if (g == gt.ignore_index || p == pred.ignore_index) continue;
            check(g < c && p < c, ErrorKind::data, "miou: label out of range");
            ++cm.at(g, p);
        }
    });
    MiouResult res;
    res.confusion.n_classes = c;
    res.confusion.counts.assign(static_cast<size_t>(c) * c, 0);
    for (const auto& cm : parts)
        for (size_t i = 0; i < cm.counts.size(); ++i)
            res.confusion.counts[i] += cm.counts[i];

    res.per_class.assign(c, -1.0);
    res.present.assign(c, false);
    double sum = 0.0;
    int kept = 0;
    for (int j = 0; j < c; ++j) {
        uint64_t tp = res.confusion.at(j, j);
        uint64_t fn = 0, fp = 0;
        for (int o = 0; o < c; ++o) {
            if (o == j) continue;
            fn += res.confusion.at(j, o);
            fp += res.confusion.at(o, j);
        }
        if (tp + fn + fp == 0) continue;
        res.present[j] = true;
        res.per_class[j] = static_cast<double>(tp) / static_cast<double>(tp + fn + fp);
        sum += res.per_class[j];
        ++kept;
    }
    check(kept > 0, ErrorKind::data, "miou: no classes present in either map");
    res.miou = sum / kept;
    return res;
}

ToplineResult topline_with_gt_masks(const AlignmentModel& m,
                                    const VisionEncoder& enc,
                                    const Raster& raster,
                                    const SegmentationMap& gt,
                                    const QueryEmbeddings& queries,
                                    const HighresParams& params) {
    check(gt.height == raster.height && gt.width == raster.width, ErrorKind::data,
          "topline: ground truth does not match the raster");
    check(queries.names == gt.class_names, ErrorKind::data,
          "topline: query names must match the ground-truth class list");
    PixelFeatureField field = build_pixel_feature_field(m, enc, raster, params);

    int c = static_cast<int>(gt.class_names.size());
    std::vector<Vec> seg_sum(c, Vec(field.dim, 0.0));
    std::vector<size_t> seg_count(c, 0);
    for (int y = 0; y < gt.height; ++y)
        for (int x = 0; x < gt.width; ++x) {
            uint16_t g = gt.at(y, x);
            if (g == gt.ignore_index) continue;
            check(g < c, ErrorKind::data, "topline: label out of range");
            const double* f = field.feat(y, x);
            double w = field.wgt(y, x);
            for (int d = 0; d < field.dim; ++d) seg_sum[g][d] += f[d] / w;
            ++seg_count[g];
        }
    size_t total = 0;
    for (int j = 0; j < c; ++j) total += seg_count[j];
    check(total > 0, ErrorKind::data, "topline: ground truth has no segments");

    std::vector<uint16_t> seg_class(c, 0);
    for (int j = 0; j < c; ++j) {
        if (seg_count[j] == 0) continue;
        Vec mean(field.dim);
        for (int d = 0; d < field.dim; ++d) mean[d] = seg_sum[j][d] / seg_count[j];
        auto nm = l2_normalize(mean);
        int best = 0;
        double bs = -2.0;
        for (int q = 0; q < queries.patch_part.rows; ++q) {
            double s = nm.degenerate
                           ? -2.0
                           : dot(nm.v.data(), queries.patch_part.row(q), field.dim);
            if (s > bs) {
                bs = s;
                best = q;
            }
        }
        seg_class[j] = static_cast<uint16_t>(best);
    }

    ToplineResult out;
    out.map.height = gt.height;
    out.map.width = gt.width;
    out.map.class_names = gt.class_names;
    out.map.labels.assign(gt.labels.size(), gt.ignore_index);
    for (size_t i = 0; i < gt.labels.size(); ++i)
        if (gt.labels[i] != gt.ignore_index)
            out.map.labels[i] = seg_class[gt.labels[i]];
    out.score = miou(out.map, gt);
    return out;
}

std::vector<NameChoice> optimize_class_names(
    const AlignmentModel& m, const VisionEncoder& enc,
    const std::vector<LabeledImage>& data,
    const std::vector<std::string>& candidate_vocab, const HighresParams& params) {
    check(!candidate_vocab.empty(), ErrorKind::data,
          "optimize_class_names: empty candidate vocabulary");
    check(!data.empty(), ErrorKind::data, "optimize_class_names: empty dataset");
    const auto& names = data.front().gt.class_names;
    for (const auto& li : data)
        check(li.gt.class_names == names, ErrorKind::data,
              "optimize_class_names: inconsistent class lists");
    int c = static_cast<int>(names.size());

    std::vector<Vec> class_sum(c, Vec(m.cfg.dim, 0.0));
    std::vector<size_t> class_count(c, 0);
    for (const auto& li : data) {
        PixelFeatureField field = build_pixel_feature_field(m, enc, li.raster, params);
        for (int y = 0; y < li.gt.height; ++y)
            for (int x = 0; x < li.gt.width; ++x) {
                uint16_t g = li.gt.at(y, x);
                if (g == li.gt.ignore_index) continue;
                check(g < c, ErrorKind::data, "optimize_class_names: label out of range");
                const double* f = field.feat(y, x);
                double w = field.wgt(y, x);
                for (int d = 0; d < field.dim; ++d) class_sum[g][d] += f[d] / w;
                ++class_count[g];
            }
    }

    QueryEmbeddings cand = embed_queries(m, bare_prompts(candidate_vocab));
    std::vector<NameChoice> out(c);
    for (int j = 0; j < c; ++j) {
        out[j].original = names[j];
        if (class_count[j] == 0) {
            out[j].chosen = names[j];
            out[j].flagged = true;
            continue;
        }
        Vec mean(m.cfg.dim);
        for (int d = 0; d < m.cfg.dim; ++d) mean[d] = class_sum[j][d] / class_count[j];
        auto nm = l2_normalize(mean);
        int best = 0;
        double bs = -2.0;
        for (int v = 0; v < cand.patch_part.rows; ++v) {
            double s = nm.degenerate
                           ? -2.0
                           : dot(nm.v.data(), cand.patch_part.row(v), m.cfg.dim);
            if (s > bs) {
                bs = s;
                best = v;
            }
        }
        out[j].chosen = candidate_vocab[best];
        out[j].similarity = bs;
    }
    return out;
}

double accuracy(const std::vector<int>& preds, const std::vector<int>& gts) {
    check(preds.size() == gts.size() && !preds.empty(), ErrorKind::data,
          "accuracy: length mismatch");
    size_t hits = 0;
    for (size_t i = 0; i < preds.size(); ++i)
        if (preds[i] == gts[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(preds.size());
}

}  // namespace dtx
