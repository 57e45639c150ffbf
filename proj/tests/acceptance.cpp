// Acceptance gate: one pass/fail line per criterion, nonzero exit on any
// failure. Criteria 4, 5, and 13 share one trained fixture model.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "dtx/alignment.hpp"
#include "dtx/analysis.hpp"
#include "dtx/clustering.hpp"
#include "dtx/curation.hpp"
#include "dtx/encoder.hpp"
#include "dtx/highres.hpp"
#include "dtx/inference.hpp"
#include "dtx/parallel.hpp"
#include "dtx/rng.hpp"
#include "dtx/tape.hpp"

namespace fs = std::filesystem;
using namespace dtx;
using Clock = std::chrono::steady_clock;

namespace {

int g_failures = 0;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

void report(int idx, bool pass, const std::string& detail) {
    std::printf("criterion %2d: %s  %s\n", idx, pass ? "PASS" : "FAIL",
                detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

void run_criterion(int idx, const std::function<std::pair<bool, std::string>()>& fn) {
    try {
        auto [pass, detail] = fn();
        report(idx, pass, detail);
    } catch (const std::exception& e) {
        report(idx, false, std::string("exception: ") + e.what());
    }
}

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof buf, f, ap);
    va_end(ap);
    return buf;
}

// ---- shared trained fixture (criteria 4, 5, 13) ----

struct Fixture {
    std::vector<std::string> train_classes;           // gray + 14 colors
    std::vector<std::string> eval_classes = {"gray", "red", "green", "blue",
                                             "yellow"};
    AlignmentModel model;
    std::vector<TrainSample> train_samples;
    std::vector<FeatureGrid> holdout_grids;
    std::vector<std::string> holdout_captions;
    std::vector<ShapesImage> eval_images;
    std::vector<double> loss_trace;
    double train_seconds = 0.0;
    bool ready = false;
};

Fixture g_fix;

void build_fixture() {
    for (int i = 0; i < 15; ++i)
        g_fix.train_classes.push_back(shapes_palette()[i].name);

    // Varied-background corpus: eight sub-corpora whose background class
    // rotates over the first eight palette colors. A fixed background would
    // appear in every caption, leaving its name contrastively uninformative
    // and its query too weak for dense prediction.
    ShapesOptions topt;
    topt.image_size = 56;
    topt.patch = 14;
    topt.min_rects = 1;
    topt.max_rects = 3;
    topt.min_side_patches = 2;
    topt.max_side_patches = 2;
    topt.unique_class_sets = true;
    const int n_bg = 8;
    const int per = 288 / n_bg;
    std::vector<std::vector<ShapesImage>> subs(n_bg);
    for (int b = 0; b < n_bg; ++b) {
        std::vector<std::string> cls;
        cls.push_back(g_fix.train_classes[b]);
        for (int i = 0; i < 15; ++i)
            if (i != b) cls.push_back(g_fix.train_classes[i]);
        subs[b] = make_shapes_dataset(per, cls, 42 + b, topt);
    }
    // interleave so both the 256 train pairs and the 32 holdout pairs span
    // all backgrounds
    std::vector<ShapesImage> corpus;
    for (int i = 0; i < per; ++i)
        for (int b = 0; b < n_bg; ++b) corpus.push_back(std::move(subs[b][i]));

    SyntheticEncoder enc(32, 0, 14);
    std::vector<std::string> train_captions;
    for (int i = 0; i < 256; ++i) {
        TrainSample s;
        s.grid = enc.encode(corpus[i].raster);
        s.caption = corpus[i].caption;
        train_captions.push_back(s.caption);
        g_fix.train_samples.push_back(std::move(s));
    }
    for (int i = 256; i < 288; ++i) {
        g_fix.holdout_grids.push_back(enc.encode(corpus[i].raster));
        g_fix.holdout_captions.push_back(corpus[i].caption);
    }

    ModelConfig cfg;
    cfg.dim = 32;
    cfg.text_dim = 32;
    cfg.max_len = 16;
    cfg.text_depth = 1;
    cfg.vision_depth = 2;
    cfg.pooling = Pooling::CLS_AVG;
    cfg.per_half_norm = true;
    g_fix.model =
        AlignmentModel::init(cfg, Tokenizer::build(train_captions, cfg.max_len), 0);

    TrainConfig tcfg;
    tcfg.batch_size = 32;
    tcfg.steps = 500;
    tcfg.lr = 3e-3;
    tcfg.seed = 0;
    tcfg.threads = default_threads();
    auto t0 = Clock::now();
    g_fix.loss_trace = train(g_fix.model, g_fix.train_samples, tcfg);
    g_fix.train_seconds = seconds_since(t0);

    // 160 px eval images on a 20 px layout grid: object boundaries do not
    // align with the 4 px evaluation patches, which is the regime where the
    // crop-averaged high-res field genuinely out-resolves the patch grid
    ShapesOptions eopt;
    eopt.image_size = 160;
    eopt.patch = 20;
    eopt.min_rects = 1;
    eopt.max_rects = 2;
    eopt.min_side_patches = 3;
    eopt.max_side_patches = 5;
    g_fix.eval_images = make_shapes_dataset(16, g_fix.eval_classes, 1234, eopt);
    g_fix.ready = true;
}

// dataset-wide mIoU from summed confusion matrices
double dataset_miou(const ConfusionMatrix& cm) {
    double sum = 0.0;
    int kept = 0;
    for (int j = 0; j < cm.n_classes; ++j) {
        uint64_t tp = cm.at(j, j), fn = 0, fp = 0;
        for (int o = 0; o < cm.n_classes; ++o) {
            if (o == j) continue;
            fn += cm.at(j, o);
            fp += cm.at(o, j);
        }
        if (tp + fn + fp == 0) continue;
        sum += static_cast<double>(tp) / static_cast<double>(tp + fn + fp);
        ++kept;
    }
    return kept ? sum / kept : 0.0;
}

void add_confusion(ConfusionMatrix& acc, const ConfusionMatrix& part) {
    if (acc.n_classes == 0) {
        acc = part;
        return;
    }
    for (size_t i = 0; i < acc.counts.size(); ++i) acc.counts[i] += part.counts[i];
}

// ---- criteria ----

std::pair<bool, std::string> c1_gradient_exactness() {
    auto t0 = Clock::now();
    std::vector<std::string> caps = {"a red box on gray", "a green box",
                                     "blue over yellow", "one purple disk"};
    Tokenizer tok = Tokenizer::build(caps, 8);
    ModelConfig cfg;
    cfg.dim = 64;
    cfg.text_dim = 64;
    cfg.max_len = 8;
    cfg.text_depth = 1;
    cfg.vision_depth = 2;
    AlignmentModel m = AlignmentModel::init(cfg, tok, 3);
    SyntheticEncoder enc(64, 5, 14);
    Rng rng(17);
    std::vector<FeatureGrid> grids(4);
    Batch b;
    for (int i = 0; i < 4; ++i) {
        Raster r(28, 28);
        for (auto& px : r.pixels) px = static_cast<uint8_t>(rng.below(256));
        grids[i] = enc.encode(r);
        b.grids.push_back(&grids[i]);
        b.token_ids.push_back(tok.tokenize(caps[i]));
    }
    Gradients g;
    forward_backward(m, b, g);
    auto refs = param_refs(m);
    int checked = 0, failed = 0;
    const double h = 1e-4;
    for (int trial = 0; trial < 120; ++trial) {
        size_t ti = rng.below(refs.size());
        Mat* t = refs[ti].second;
        size_t ei = rng.below(t->d.size());
        double orig = t->d[ei];
        t->d[ei] = orig + h;
        double lp = forward_loss(m, b);
        t->d[ei] = orig - h;
        double lm = forward_loss(m, b);
        t->d[ei] = orig;
        double fd = (lp - lm) / (2 * h);
        double an = g.tensors[ti].d[ei];
        double rel = std::abs(an - fd) / std::max(1e-8, std::abs(fd));
        // near-zero gradients are dominated by FD cancellation noise; both
        // sides agreeing on ~0 counts as a pass
        bool ok = rel < 1e-4 || (std::abs(an) < 1e-5 && std::abs(fd) < 1e-5);
        ++checked;
        if (!ok) ++failed;
    }
    double secs = seconds_since(t0);
    bool pass = checked >= 100 && failed == 0 && secs < 60.0;
    return {pass, fmt("%d/%d params within rel 1e-4 (h=1e-4), %.1fs (limit 60s)",
                      checked - failed, checked, secs)};
}

std::pair<bool, std::string> c2_pool_routing() {
    Rng rng(29);
    int n = 5, d = 8;
    Vec cls(d);
    Mat patches(n, d);
    for (auto& v : cls) v = rng.gaussian();
    for (auto& v : patches.d) v = rng.gaussian();

    Vec up_cls(pooled_dim(Pooling::CLS, d));
    for (auto& v : up_cls) v = rng.gaussian();
    Vec d_cls;
    Mat d_patches;
    pool_gradients(Pooling::CLS, cls, patches, up_cls, d_cls, d_patches);
    double max_patch = 0.0;
    for (double v : d_patches.d) max_patch = std::max(max_patch, std::abs(v));
    bool cls_ok = max_patch == 0.0;

    Vec up(pooled_dim(Pooling::CLS_AVG, d));
    for (auto& v : up) v = rng.gaussian();
    pool_gradients(Pooling::CLS_AVG, cls, patches, up, d_cls, d_patches);
    double worst = 0.0;
    for (int p = 0; p < n; ++p)
        for (int i = 0; i < d; ++i)
            worst = std::max(worst,
                             std::abs(d_patches.at(p, i) - up[d + i] / n));
    bool avg_ok = worst < 1e-7;
    return {cls_ok && avg_ok,
            fmt("CLS patch grad max %.1e (exact 0), CLS_AVG routing err %.1e "
                "(tol 1e-7)",
                max_patch, worst)};
}

std::pair<bool, std::string> c3_contrastive_anchors() {
    Mat one(1, 4);
    one.at(0, 0) = 1.0;
    double l1 = contrastive_loss(one, one, 0.7, false).loss;

    Mat a(2, 4), b(2, 4);
    a.at(0, 0) = a.at(1, 0) = 1.0;  // identical rows -> uniform S
    b.at(0, 1) = b.at(1, 1) = 1.0;
    double l2 = contrastive_loss(a, b, 0.3, false).loss;

    Mat i2(2, 4), t2(2, 4);
    i2.at(0, 0) = i2.at(1, 1) = 1.0;  // S = identity at log_temp 0
    t2.at(0, 0) = t2.at(1, 1) = 1.0;
    double l3 = contrastive_loss(i2, t2, 0.0, false).loss;
    double want3 = std::log(1.0 + std::exp(-1.0));

    bool pass = std::abs(l1) < 1e-12 && std::abs(l2 - std::log(2.0)) < 1e-9 &&
                std::abs(l3 - want3) < 1e-6;
    return {pass, fmt("B=1 loss %.1e (tol 1e-12), uniform %.2e off ln2 (tol "
                      "1e-9), identity %.2e off ln(1+1/e) (tol 1e-6)",
                      l1, std::abs(l2 - std::log(2.0)), std::abs(l3 - want3))};
}

std::pair<bool, std::string> c4_convergence() {
    double tail = 0.0;
    for (size_t i = g_fix.loss_trace.size() - 10; i < g_fix.loss_trace.size(); ++i)
        tail += g_fix.loss_trace[i] / 10.0;
    double r1 = retrieve_r1(g_fix.model, g_fix.holdout_grids,
                            g_fix.holdout_captions);
    bool pass = tail < 0.1 && r1 >= 0.95 && g_fix.train_seconds < 300.0;
    return {pass, fmt("train loss %.4f (limit 0.1, mean of last 10 steps), "
                      "holdout R@1 %.3f (min 0.95), %.0fs (limit 300s)",
                      tail, r1, g_fix.train_seconds)};
}

std::pair<bool, std::string> c5_end_to_end_segmentation() {
    auto t0 = Clock::now();
    SyntheticEncoder enc4(32, 0, 4);  // anchors are patch-size agnostic
    // "a photo of {}" keeps the class token at the caption positions the text
    // encoder saw in training; a bare class name sits at position 1, which is
    // positionally out of distribution for this fixture
    auto queries = embed_queries(
        g_fix.model, bare_prompts(g_fix.eval_classes, "a photo of {}"));

    // window 16 at patch 4 = 17 tokens, matching the training grid size
    SlidingWindowOptions swopt;
    swopt.window = 16;
    swopt.stride = 8;
    swopt.threads = default_threads();
    ConfusionMatrix dense_cm;
    for (const auto& si : g_fix.eval_images) {
        auto pred = sliding_window_segment(g_fix.model, enc4, si.raster,
                                           queries, swopt);
        add_confusion(dense_cm, miou(pred, si.mask).confusion);
    }
    double dense = dataset_miou(dense_cm);

    HighresParams hp;
    hp.sample_res = 16;  // 17 tokens per crop, same as training
    hp.k = 32;
    hp.seed = 0;
    hp.threads = default_threads();
    ConfusionMatrix high_cm;
    for (const auto& si : g_fix.eval_images) {
        auto pred = highres_segment(g_fix.model, enc4, si.raster, queries, hp);
        add_confusion(high_cm, miou(pred, si.mask).confusion);
    }
    double high = dataset_miou(high_cm);

    double secs = seconds_since(t0);
    bool pass = dense >= 0.90 && high >= dense - 0.02 && secs < 600.0;
    return {pass, fmt("dense mIoU %.4f (min 0.90), highres mIoU %.4f (min "
                      "dense-0.02), %.0fs (limit 600s)",
                      dense, high, secs)};
}

std::pair<bool, std::string> c6_highres_degeneration() {
    std::vector<std::string> classes = {"gray", "red", "green", "blue"};
    ShapesOptions opt;
    opt.image_size = 56;
    opt.min_side_patches = 1;
    opt.max_side_patches = 2;
    auto img = make_shapes_dataset(1, classes, 77, opt)[0];
    SyntheticEncoder enc(16, 2, 14);
    ModelConfig cfg;
    cfg.dim = 16;
    cfg.text_dim = 16;
    cfg.max_len = 12;
    AlignmentModel m =
        AlignmentModel::init(cfg, Tokenizer::build({img.caption}, 12), 3);
    auto queries = embed_queries(m, bare_prompts(classes));

    HighresParams hp;
    hp.crops.area_fracs = {1.0};
    hp.crops.noise_frac = 0.0;
    hp.sample_res = 56;
    hp.bypass_cluster = true;
    auto field = build_pixel_feature_field(m, enc, img.raster, hp);
    auto hl = field_logits(field, queries);

    auto vol = dense_logits(m, enc.encode(img.raster), queries,
                            DenseEmbedding::PATCH);
    auto up = upsample_logits(vol, 56, 56);
    double worst = 0.0;
    for (size_t j = 0; j < hl.size(); ++j)
        for (size_t px = 0; px < hl[j].size(); ++px)
            worst = std::max(worst, std::abs(hl[j][px] - up[j][px]));
    return {worst < 1e-5, fmt("max per-logit gap %.2e (tol 1e-5)", worst)};
}

std::pair<bool, std::string> c7_coverage_statistic() {
    auto crops = sample_crops(448, 448, CropScheduleOptions{}, 0);
    auto visits = crop_coverage(448, 448, crops);
    double mean = 0.0;
    for (double v : visits) mean += v / visits.size();
    size_t n = crops.size();
    bool pass = n >= 600 && n <= 1000 && mean >= 30.0 && mean <= 50.0;
    return {pass, fmt("%zu crops (range [600,1000]), mean visits %.1f (range "
                      "[30,50])",
                      n, mean)};
}

std::pair<bool, std::string> c8_kmeans_oracle() {
    Rng rng(13);
    int bad = 0, trace_bad = 0;
    for (int inst = 0; inst < 200; ++inst) {
        int n = 4 + static_cast<int>(rng.below(5));       // up to 8
        int k = 2 + static_cast<int>(rng.below(2));       // up to 3
        Mat pts(n, 2);
        for (auto& v : pts.d) v = rng.uniform(-1.0, 1.0);
        double best = 1e300;
        for (int r = 0; r < 20; ++r) {
            auto res = kmeans_fit(pts, k, 1000 + inst * 20 + r);
            best = std::min(best, res.inertia);
            for (size_t i = 1; i < res.inertia_trace.size(); ++i)
                if (res.inertia_trace[i] > res.inertia_trace[i - 1] + 1e-12)
                    ++trace_bad;
        }
        double opt = 1e300;
        std::vector<int> assign(n);
        long total = 1;
        for (int i = 0; i < n; ++i) total *= k;
        for (long code = 0; code < total; ++code) {
            long c = code;
            for (int i = 0; i < n; ++i) {
                assign[i] = static_cast<int>(c % k);
                c /= k;
            }
            double inertia = 0.0;
            for (int j = 0; j < k; ++j) {
                double sx = 0, sy = 0;
                int cnt = 0;
                for (int i = 0; i < n; ++i)
                    if (assign[i] == j) {
                        sx += pts.at(i, 0);
                        sy += pts.at(i, 1);
                        ++cnt;
                    }
                if (!cnt) continue;
                sx /= cnt;
                sy /= cnt;
                for (int i = 0; i < n; ++i)
                    if (assign[i] == j) {
                        double dx = pts.at(i, 0) - sx, dy = pts.at(i, 1) - sy;
                        inertia += dx * dx + dy * dy;
                    }
            }
            opt = std::min(opt, inertia);
        }
        if (best > opt * (1 + 1e-5) + 1e-12) ++bad;
    }
    bool pass = bad == 0 && trace_bad == 0;
    return {pass, fmt("%d/200 instances missed the brute-force optimum (rel "
                      "1e-5), %d inertia increases",
                      bad, trace_bad)};
}

std::pair<bool, std::string> c9_water_filling() {
    auto alloc = water_fill(6, {10, 2, 1});
    bool exact = alloc == std::vector<size_t>{3, 2, 1};

    // long-tail fixture: three well-separated blobs, sizes 60/12/4
    std::vector<int> sizes = {60, 12, 4};
    int n = 76;
    Mat pts(n, 2);
    Rng rng(41);
    int row = 0;
    for (int b = 0; b < 3; ++b)
        for (int i = 0; i < sizes[b]; ++i, ++row) {
            pts.at(row, 0) = b * 10.0 + rng.gaussian() * 0.1;
            pts.at(row, 1) = rng.gaussian() * 0.1;
        }
    auto tree = hierarchical_fit(pts, {3}, 7);
    auto chosen = balanced_sample(tree, 30, 9);
    auto top = compose_assignment(tree, 0);
    std::vector<size_t> before(3, 0), after(3, 0);
    for (int i = 0; i < n; ++i) ++before[top[i]];
    for (size_t i : chosen) ++after[top[i]];
    auto ratio = [](const std::vector<size_t>& h) {
        size_t mx = 0, mn = SIZE_MAX;
        for (size_t v : h)
            if (v > 0) {
                mx = std::max(mx, v);
                mn = std::min(mn, v);
            }
        return static_cast<double>(mx) / mn;
    };
    double rb = ratio(before), ra = ratio(after);
    bool pass = exact && ra < rb;
    return {pass, fmt("water_fill(6,[10,2,1])=[%zu,%zu,%zu] (want [3,2,1]), "
                      "top-level ratio %.1f -> %.1f (must decrease)",
                      alloc[0], alloc[1], alloc[2], rb, ra)};
}

std::pair<bool, std::string> c10_text_balancing() {
    ConceptVocabulary vocab = ConceptVocabulary::from_lines({"cat"});
    std::vector<PairRecord> pairs;
    for (int i = 0; i < 200; ++i)
        pairs.push_back({"p" + std::to_string(i), "a cat sits", {}, ""});
    pairs.push_back({"zero", "nothing matches here", {}, ""});
    auto counts = match_concepts(pairs, vocab);

    double mean = 0.0;
    size_t lo = SIZE_MAX, hi = 0;
    bool zero_dropped = true;
    for (uint64_t seed = 0; seed < 100; ++seed) {
        auto sel = text_balance(pairs, counts, 100, seed);
        if (sel.kept_ids.count("zero")) zero_dropped = false;
        size_t kept = sel.kept_ids.size();
        lo = std::min(lo, kept);
        hi = std::max(hi, kept);
        mean += kept / 100.0;
    }

    std::vector<PairRecord> few;
    for (int i = 0; i < 50; ++i)
        few.push_back({"q" + std::to_string(i), "a cat naps", {}, ""});
    auto fcounts = match_concepts(few, vocab);
    bool undercap_kept = true;
    for (uint64_t seed = 0; seed < 20; ++seed)
        if (text_balance(few, fcounts, 100, seed).kept_ids.size() != 50)
            undercap_kept = false;

    bool pass = lo >= 70 && hi <= 130 && mean >= 95.0 && mean <= 105.0 &&
                zero_dropped && undercap_kept;
    return {pass, fmt("kept range [%zu,%zu] (bounds [70,130]), mean %.1f "
                      "(bounds [95,105]), zero-match dropped %d, under-cap "
                      "kept %d",
                      lo, hi, mean, zero_dropped ? 1 : 0, undercap_kept ? 1 : 0)};
}

std::pair<bool, std::string> c11_miou_oracle() {
    SegmentationMap gt, pr;
    gt.height = pr.height = 2;
    gt.width = pr.width = 2;
    gt.class_names = pr.class_names = {"a", "b"};
    gt.labels = {0, 0, 1, 1};
    pr.labels = {0, 1, 1, 1};
    double hand = miou(pr, gt).miou;
    bool hand_ok = std::abs(hand - 7.0 / 12.0) < 1e-15;

    Rng rng(19);
    int bad = 0;
    for (int inst = 0; inst < 1000; ++inst) {
        int h = 1 + static_cast<int>(rng.below(8));
        int w = 1 + static_cast<int>(rng.below(8));
        int c = 2 + static_cast<int>(rng.below(3));
        SegmentationMap g2, p2;
        g2.height = p2.height = h;
        g2.width = p2.width = w;
        for (int j = 0; j < c; ++j) {
            g2.class_names.push_back("c" + std::to_string(j));
            p2.class_names.push_back("c" + std::to_string(j));
        }
        g2.labels.resize(static_cast<size_t>(h) * w);
        p2.labels.resize(g2.labels.size());
        for (auto& l : g2.labels) l = static_cast<uint16_t>(rng.below(c));
        for (auto& l : p2.labels) l = static_cast<uint16_t>(rng.below(c));
        double got = miou(p2, g2).miou;
        double sum = 0.0;
        int kept = 0;
        for (int j = 0; j < c; ++j) {
            size_t inter = 0, uni = 0;
            for (size_t i = 0; i < g2.labels.size(); ++i) {
                bool a = g2.labels[i] == j, b = p2.labels[i] == j;
                inter += a && b;
                uni += a || b;
            }
            if (!uni) continue;
            sum += static_cast<double>(inter) / uni;
            ++kept;
        }
        if (got != sum / kept) ++bad;
    }
    return {hand_ok && bad == 0,
            fmt("2x2 case %.6f (want 7/12), %d/1000 brute-force mismatches",
                hand, bad)};
}

std::pair<bool, std::string> c12_homography() {
    Rng rng(5);
    double worst_corner = 0.0, worst_round = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        double side = rng.uniform(20.0, 120.0);
        double x = rng.uniform(0.0, 100.0), y = rng.uniform(0.0, 100.0);
        Quadrilateral q;
        do {
            q.corners = {Point{x, y}, Point{x + side, y},
                         Point{x + side, y + side}, Point{x, y + side}};
            for (auto& c : q.corners) {
                c.x += rng.uniform(-0.2, 0.2) * side;
                c.y += rng.uniform(-0.2, 0.2) * side;
            }
        } while (!q.convex());
        auto h = Homography::fit(q);
        const double us[4] = {0, 1, 1, 0};
        const double vs[4] = {0, 0, 1, 1};
        for (int i = 0; i < 4; ++i) {
            auto p = h.map(us[i], vs[i]);
            worst_corner = std::max({worst_corner, std::abs(p.x - q.corners[i].x),
                                     std::abs(p.y - q.corners[i].y)});
        }
        for (int i = 0; i < 100; ++i) {
            double u = rng.uniform(), v = rng.uniform();
            auto p = h.map(u, v);
            auto back = h.unmap(p.x, p.y);
            worst_round = std::max({worst_round, std::abs(back.x - u),
                                    std::abs(back.y - v)});
        }
    }
    bool pass = worst_corner < 1e-6 && worst_round < 1e-9;
    return {pass, fmt("corner err %.2e (tol 1e-6), roundtrip err %.2e (tol "
                      "1e-9), 100 quads x 100 points",
                      worst_corner, worst_round)};
}

std::pair<bool, std::string> c13_name_optimization() {
    SyntheticEncoder enc4(32, 0, 4);
    std::vector<std::string> vocab = g_fix.eval_classes;
    for (const auto& w : {"airplane", "bicycle", "guitar", "mountain", "river",
                          "table", "window", "garden", "bridge", "forest"})
        vocab.push_back(w);
    std::vector<LabeledImage> data;
    for (const auto& si : g_fix.eval_images) data.push_back({si.raster, si.mask});
    HighresParams hp;
    hp.sample_res = 16;
    hp.seed = 0;
    hp.threads = default_threads();
    auto choices = optimize_class_names(g_fix.model, enc4, data, vocab, hp);
    int recovered = 0;
    for (size_t i = 0; i < choices.size(); ++i)
        if (!choices[i].flagged && choices[i].chosen == g_fix.eval_classes[i])
            ++recovered;
    bool pass = recovered == static_cast<int>(g_fix.eval_classes.size());
    return {pass, fmt("%d/%zu true names recovered against 10 distractors",
                      recovered, g_fix.eval_classes.size())};
}

// ---- criterion 14: CLI determinism across thread counts ----

int run_cli(const std::string& args) {
    std::string cmd = std::string(DTX_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    return WEXITSTATUS(std::system(cmd.c_str()));
}

std::string run_cli_stdout(const std::string& args) {
    static int counter = 0;
    auto tmp = (fs::temp_directory_path() /
                ("dtx_acc_" + std::to_string(counter++) + ".txt"))
                   .string();
    int rc = std::system((std::string(DTX_CLI_PATH) + " " + args + " > " + tmp +
                          " 2>/dev/null")
                             .c_str());
    (void)rc;
    std::ifstream in(tmp);
    std::stringstream ss;
    ss << in.rdbuf();
    fs::remove(tmp);
    return ss.str();
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

bool same_tree(const std::string& a, const std::string& b) {
    for (const auto& e : fs::directory_iterator(a)) {
        auto other = b + "/" + e.path().filename().string();
        if (!fs::exists(other)) return false;
        if (slurp(e.path().string()) != slurp(other)) return false;
    }
    return true;
}

std::pair<bool, std::string> c14_determinism() {
    std::string root = (fs::temp_directory_path() / "dtx_acceptance").string();
    fs::remove_all(root);
    fs::create_directories(root);
    std::vector<std::string> mismatches;
    auto expect = [&](bool ok, const std::string& what) {
        if (!ok) mismatches.push_back(what);
    };

    for (int rep = 0; rep < 2; ++rep) {
        std::string d = root + "/gen" + std::to_string(rep);
        expect(run_cli("gen-shapes --out " + d +
                       " --n 12 --seed 5 --classes gray,red,green,blue"
                       " --image-size 56 --encoder-dim 16 --max-rects 2") == 0,
               "gen-shapes run " + std::to_string(rep));
    }
    expect(same_tree(root + "/gen0", root + "/gen1"), "gen-shapes outputs");

    std::string data = root + "/gen0";
    std::ofstream(root + "/concepts.txt") << "red\ngreen\nblue\ngray\n";
    for (int t : {1, 3}) {
        std::string s = std::to_string(t);
        expect(run_cli("curate-text --captions " + data + "/captions.jsonl" +
                       " --concepts " + root + "/concepts.txt --cap 8 --seed 1" +
                       " --threads " + s + " --out " + root + "/text_t" + s +
                       ".txt") == 0,
               "curate-text t" + s);
        expect(run_cli("fit-tree --embeddings " + data + "/embeddings.dtxe" +
                       " --ks 4,2 --seed 2 --threads " + s + " --out " + root +
                       "/tree_t" + s + ".dtxt") == 0,
               "fit-tree t" + s);
        expect(run_cli("train --data " + data + " --out " + root + "/model_t" +
                       s + ".dtxm --seed 7 --steps 6 --batch-size 4 --dim 16" +
                       " --text-dim 16 --encoder-dim 16 --max-len 12" +
                       " --threads " + s) == 0,
               "train t" + s);
    }
    expect(slurp(root + "/text_t1.txt") == slurp(root + "/text_t3.txt"),
           "curate-text output");
    expect(slurp(root + "/tree_t1.dtxt") == slurp(root + "/tree_t3.dtxt"),
           "fit-tree output");
    expect(slurp(root + "/model_t1.dtxm") == slurp(root + "/model_t3.dtxm"),
           "train checkpoint");

    expect(run_cli("curate-image --embeddings " + data + "/embeddings.dtxe" +
                   " --tree " + root + "/tree_t1.dtxt --budget 10 --seed 3" +
                   " --out " + root + "/img_a.txt") == 0,
           "curate-image a");
    expect(run_cli("curate-image --embeddings " + data + "/embeddings.dtxe" +
                   " --tree " + root + "/tree_t1.dtxt --budget 10 --seed 3" +
                   " --out " + root + "/img_b.txt") == 0,
           "curate-image b");
    expect(slurp(root + "/img_a.txt") == slurp(root + "/img_b.txt"),
           "curate-image output");
    expect(run_cli("intersect --a " + root + "/text_t1.txt --b " + root +
                   "/img_a.txt --out " + root + "/kept_a.txt") == 0,
           "intersect a");
    expect(run_cli("intersect --a " + root + "/text_t1.txt --b " + root +
                   "/img_a.txt --out " + root + "/kept_b.txt") == 0,
           "intersect b");
    expect(slurp(root + "/kept_a.txt") == slurp(root + "/kept_b.txt"),
           "intersect output");

    std::string model = root + "/model_t1.dtxm";
    for (int t : {1, 3}) {
        std::string s = std::to_string(t);
        expect(run_cli("eval-seg --model " + model + " --data " + data +
                       " --encoder-dim 16 --window 28 --stride 14 --threads " +
                       s + " --out-dir " + root + "/seg_t" + s) == 0,
               "eval-seg t" + s);
        expect(run_cli("eval-seg-highres --model " + model + " --data " + data +
                       " --encoder-dim 16 --seed 9 --sample-res 28 --k 6" +
                       " --threads " + s + " --out-dir " + root + "/hr_t" + s) ==
                   0,
               "eval-seg-highres t" + s);
    }
    expect(same_tree(root + "/seg_t1", root + "/seg_t3"), "eval-seg maps");
    expect(same_tree(root + "/hr_t1", root + "/hr_t3"), "eval-seg-highres maps");

    for (const char* sub : {"eval-classify", "eval-retrieval"}) {
        auto a = run_cli_stdout(std::string(sub) + " --model " + model +
                                " --data " + data + " --encoder-dim 16" +
                                " --threads 1");
        auto b = run_cli_stdout(std::string(sub) + " --model " + model +
                                " --data " + data + " --encoder-dim 16" +
                                " --threads 3");
        expect(!a.empty() && a == b, std::string(sub) + " stdout");
    }
    {
        auto a = run_cli_stdout("topline --model " + model + " --data " + data +
                                " --encoder-dim 16 --seed 4 --sample-res 28" +
                                " --threads 1");
        auto b = run_cli_stdout("topline --model " + model + " --data " + data +
                                " --encoder-dim 16 --seed 4 --sample-res 28" +
                                " --threads 3");
        expect(!a.empty() && a == b, "topline stdout");
    }
    {
        std::ofstream(root + "/vocab.txt") << "red\ngreen\nblue\ngray\nhouse\n";
        auto a = run_cli_stdout("optimize-names --model " + model + " --data " +
                                data + " --encoder-dim 16 --seed 4" +
                                " --sample-res 28 --vocab " + root +
                                "/vocab.txt --threads 1");
        auto b = run_cli_stdout("optimize-names --model " + model + " --data " +
                                data + " --encoder-dim 16 --seed 4" +
                                " --sample-res 28 --vocab " + root +
                                "/vocab.txt --threads 3");
        expect(!a.empty() && a == b, "optimize-names stdout");
    }

    if (mismatches.empty()) return {true, "all CLI outputs byte-identical across thread counts"};
    std::string msg = "mismatches:";
    for (const auto& m : mismatches) msg += " " + m + ";";
    return {false, msg};
}

}  // namespace

int main() {
    std::printf("building shared trained fixture (criteria 4, 5, 13)...\n");
    std::fflush(stdout);
    try {
        build_fixture();
    } catch (const std::exception& e) {
        std::printf("fixture construction failed: %s\n", e.what());
    }

    run_criterion(1, c1_gradient_exactness);
    run_criterion(2, c2_pool_routing);
    run_criterion(3, c3_contrastive_anchors);
    if (g_fix.ready) {
        run_criterion(4, c4_convergence);
        run_criterion(5, c5_end_to_end_segmentation);
    } else {
        report(4, false, "fixture unavailable");
        report(5, false, "fixture unavailable");
    }
    run_criterion(6, c6_highres_degeneration);
    run_criterion(7, c7_coverage_statistic);
    run_criterion(8, c8_kmeans_oracle);
    run_criterion(9, c9_water_filling);
    run_criterion(10, c10_text_balancing);
    run_criterion(11, c11_miou_oracle);
    run_criterion(12, c12_homography);
    if (g_fix.ready) {
        run_criterion(13, c13_name_optimization);
    } else {
        report(13, false, "fixture unavailable");
    }
    run_criterion(14, c14_determinism);

    std::printf("%s: %d criterion failure(s)\n",
                g_failures == 0 ? "ACCEPTANCE PASSED" : "ACCEPTANCE FAILED",
                g_failures);
    return g_failures == 0 ? 0 : 1;
}
