#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "dtx/alignment.hpp"
#include "dtx/encoder.hpp"
#include "dtx/inference.hpp"
#include "dtx/rng.hpp"

using namespace dtx;

namespace {

struct SmallWorld {
    std::vector<std::string> classes = {"gray", "red", "green", "blue"};
    SyntheticEncoder enc{16, 2, 14};
    std::vector<ShapesImage> imgs;
    Tokenizer tok;
    AlignmentModel model;

    SmallWorld() {
        ShapesOptions opt;
        opt.image_size = 56;
        opt.min_side_patches = 1;
        opt.max_side_patches = 2;
        opt.unique_class_sets = true;
        imgs = make_shapes_dataset(6, classes, 11, opt);
        std::vector<std::string> caps;
        for (const auto& si : imgs) caps.push_back(si.caption);
        ModelConfig cfg;
        cfg.dim = 16;
        cfg.text_dim = 16;
        cfg.max_len = 12;
        tok = Tokenizer::build(caps, cfg.max_len);
        model = AlignmentModel::init(cfg, tok, 3);
    }
};

}  // namespace

TEST_CASE("prompt rendering") {
    ClassPrompt p{"red", "a photo of {}"};
    CHECK(p.render() == "a photo of red");
    ClassPrompt bare{"red", "{}"};
    CHECK(bare.render() == "red");
    auto ps = bare_prompts({"a", "b"}, "the {}");
    REQUIRE(ps.size() == 2);
    CHECK(ps[1].render() == "the b");
}

TEST_CASE("query embeddings are normalized per view") {
    SmallWorld w;
    auto q = embed_queries(w.model, bare_prompts(w.classes));
    REQUIRE(q.full.rows == 4);
    CHECK(q.full.cols == 32);
    CHECK(q.names == w.classes);
    for (int i = 0; i < 4; ++i) {
        CHECK(norm2(q.full.row(i), 32) == doctest::Approx(1.0));
        CHECK(norm2(q.patch_part.row(i), 16) == doctest::Approx(1.0));
        // cls_part is an unnormalized slice of full
        for (int j = 0; j < 16; ++j)
            CHECK(q.cls_part.at(i, j) == q.full.at(i, j));
    }
    CHECK_THROWS_AS(embed_queries(w.model, {}), Error);
}

TEST_CASE("classify scores are cosines with ties to the lowest index") {
    SmallWorld w;
    // duplicated class names give identical query rows: argmax stays at 0
    auto q = embed_queries(w.model, bare_prompts({"red", "red", "red"}));
    auto grid = w.enc.encode(w.imgs[0].raster);
    auto res = classify(w.model, grid, q);
    CHECK(res.argmax == 0);
    REQUIRE(res.scores.size() == 3);
    CHECK(res.scores[0] == doctest::Approx(res.scores[1]));
    for (double s : res.scores) {
        CHECK(s <= 1.0);
        CHECK(s >= -1.0);
    }
    // scores match a hand dot product of descriptor and query
    auto g = image_descriptor(w.model, grid);
    CHECK(res.scores[0] == doctest::Approx(dot(g.data(), q.full.row(0), 32)));
}

TEST_CASE("retrieval matches a brute-force scan") {
    SmallWorld w;
    std::vector<FeatureGrid> grids;
    std::vector<std::string> caps;
    for (const auto& si : w.imgs) {
        grids.push_back(w.enc.encode(si.raster));
        caps.push_back(si.caption);
    }
    double r1 = retrieve_r1(w.model, grids, caps);

    // independent O(n^2) recount
    size_t n = grids.size(), hits = 0;
    for (size_t i = 0; i < n; ++i) {
        auto t = text_descriptor(w.model, w.model.tokenizer.tokenize(caps[i]));
        size_t best = 0;
        double bs = -2.0;
        for (size_t j = 0; j < n; ++j) {
            auto g = image_descriptor(w.model, grids[j]);
            double s = dot(t.data(), g.data(), t.size());
            if (s > bs) {
                bs = s;
                best = j;
            }
        }
        if (best == i) ++hits;
    }
    CHECK(r1 == doctest::Approx(static_cast<double>(hits) / n));
    CHECK_THROWS_AS(retrieve_r1(w.model, grids, {"just one"}), Error);
}

TEST_CASE("dense logits shapes and value range") {
    SmallWorld w;
    auto q = embed_queries(w.model, bare_prompts(w.classes));
    auto grid = w.enc.encode(w.imgs[0].raster);
    auto vol = dense_logits(w.model, grid, q, DenseEmbedding::PATCH);
    CHECK(vol.grid_h == 4);
    CHECK(vol.grid_w == 4);
    CHECK(vol.n_queries == 4);
    for (double v : vol.logits) {
        CHECK(v <= 1.0);
        CHECK(v >= -1.0);
    }
    auto vol2 = dense_logits(w.model, grid, q, DenseEmbedding::CLS_PATCH);
    CHECK(vol2.logits.size() == vol.logits.size());
    CHECK(vol2.logits != vol.logits);
}

TEST_CASE("upsample_logits is corner-aligned bilinear") {
    LogitVolume vol;
    vol.grid_h = 2;
    vol.grid_w = 2;
    vol.n_queries = 1;
    vol.logits = {0.0, 1.0, 2.0, 3.0};
    auto up = upsample_logits(vol, 3, 3);
    REQUIRE(up.size() == 1);
    // corners reproduce exactly, center averages all four
    CHECK(up[0][0] == doctest::Approx(0.0));
    CHECK(up[0][2] == doctest::Approx(1.0));
    CHECK(up[0][6] == doctest::Approx(2.0));
    CHECK(up[0][8] == doctest::Approx(3.0));
    CHECK(up[0][4] == doctest::Approx(1.5));
    CHECK(up[0][1] == doctest::Approx(0.5));

    // identity when sizes match
    auto same = upsample_logits(vol, 2, 2);
    CHECK(same[0] == std::vector<double>{0.0, 1.0, 2.0, 3.0});

    // constant volume stays constant at any output size
    LogitVolume c;
    c.grid_h = 3;
    c.grid_w = 3;
    c.n_queries = 1;
    c.logits.assign(9, 0.25);
    auto cu = upsample_logits(c, 7, 5);
    for (double v : cu[0]) CHECK(v == doctest::Approx(0.25));
}

TEST_CASE("window offsets cover the image and snap to the far edge") {
    CHECK(window_offsets(10, 4, 2) == std::vector<int>{0, 2, 4, 6});
    CHECK(window_offsets(10, 4, 3) == std::vector<int>{0, 3, 6});
    CHECK(window_offsets(11, 4, 3) == std::vector<int>{0, 3, 6, 7});  // snapped
    CHECK(window_offsets(4, 4, 2) == std::vector<int>{0});
    CHECK_THROWS_AS(window_offsets(3, 4, 2), Error);
    CHECK_THROWS_AS(window_offsets(10, 4, 0), Error);
}

TEST_CASE("single-window segmentation equals the dense path") {
    SmallWorld w;
    auto q = embed_queries(w.model, bare_prompts(w.classes));
    const auto& raster = w.imgs[1].raster;  // 56x56, window 56 covers it all

    SlidingWindowOptions opt;
    opt.window = 56;
    auto seg = sliding_window_segment(w.model, w.enc, raster, q, opt);
    CHECK(seg.height == 56);
    CHECK(seg.class_names == w.classes);

    auto vol = dense_logits(w.model, w.enc.encode(raster), q);
    auto up = upsample_logits(vol, 56, 56);
    for (size_t px = 0; px < seg.labels.size(); ++px) {
        int best = 0;
        for (int j = 1; j < 4; ++j)
            if (up[j][px] > up[best][px]) best = j;
        CHECK(seg.labels[px] == best);
    }
}

TEST_CASE("sliding window segmentation is thread-count independent") {
    SmallWorld w;
    auto q = embed_queries(w.model, bare_prompts(w.classes));
    ShapesOptions opt;
    opt.image_size = 112;
    auto big = make_shapes_dataset(1, w.classes, 21, opt);

    SlidingWindowOptions o1;
    o1.window = 56;
    o1.stride = 28;
    o1.threads = 1;
    auto a = sliding_window_segment(w.model, w.enc, big[0].raster, q, o1);
    SlidingWindowOptions o4 = o1;
    o4.threads = 4;
    auto b = sliding_window_segment(w.model, w.enc, big[0].raster, q, o4);
    CHECK(a.labels == b.labels);
}

TEST_CASE("sliding window rejects bad window sizes") {
    SmallWorld w;
    auto q = embed_queries(w.model, bare_prompts(w.classes));
    SlidingWindowOptions opt;
    opt.window = 30;  // not a patch multiple
    CHECK_THROWS_AS(
        sliding_window_segment(w.model, w.enc, w.imgs[0].raster, q, opt), Error);
}
