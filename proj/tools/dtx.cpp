// dtx: single-binary pipeline driver. Exit codes: 0 success, 1 usage,
// 2 data/format, 3 numeric. stdout carries one JSON document per run;
// --verbose adds single-line JSON events on stderr.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dtx/analysis.hpp"
#include "dtx/clustering.hpp"
#include "dtx/common.hpp"
#include "dtx/curation.hpp"
#include "dtx/encoder.hpp"
#include "dtx/highres.hpp"
#include "dtx/inference.hpp"
#include "dtx/parallel.hpp"
#include "dtx/rng.hpp"
#include "dtx/tape.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dtx;

namespace {

bool g_verbose = false;

void log_event(const std::string& event, const json& fields) {
    if (!g_verbose) return;
    json j = fields;
    j["event"] = event;
    std::cerr << j.dump() << "\n";
}

void emit(const json& j) { std::cout << j.dump(2) << "\n"; }

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path);
    check(in.good(), ErrorKind::data, "cannot open " + path);
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) out.push_back(line);
    }
    return out;
}

// --- dataset directory convention ---
// DIR/img_NNNN.dtxr, DIR/img_NNNN.dtxs, DIR/captions.jsonl, DIR/classes.txt

struct DatasetItem {
    std::string id;
    std::string raster_path;
    std::string mask_path;  // may be empty
    std::string caption;
};

std::vector<DatasetItem> load_dataset(const std::string& dir,
                                      const std::string& kept_path = "") {
    auto caps = read_captions_jsonl(dir + "/captions.jsonl");
    std::set<std::string> kept;
    bool filter = !kept_path.empty();
    if (filter)
        for (const auto& id : read_id_list(kept_path)) kept.insert(id);
    std::vector<DatasetItem> out;
    for (const auto& c : caps) {
        if (filter && !kept.count(c.id)) continue;
        DatasetItem it;
        it.id = c.id;
        it.caption = c.caption;
        it.raster_path = dir + "/" + c.id + ".dtxr";
        std::string m = dir + "/" + c.id + ".dtxs";
        if (fs::exists(m)) it.mask_path = m;
        check(fs::exists(it.raster_path), ErrorKind::data,
              "missing raster " + it.raster_path);
        out.push_back(std::move(it));
    }
    check(!out.empty(), ErrorKind::data, "dataset is empty: " + dir);
    return out;
}

std::vector<std::string> dataset_classes(const std::string& dir) {
    return read_lines(dir + "/classes.txt");
}

// dataset-wide mIoU from summed per-image confusion matrices
json miou_report(const ConfusionMatrix& cm, const std::vector<std::string>& names) {
    int c = cm.n_classes;
    json per = json::object();
    double sum = 0.0;
    int kept = 0;
    for (int j = 0; j < c; ++j) {
        uint64_t tp = cm.at(j, j), fn = 0, fp = 0;
        for (int o = 0; o < c; ++o) {
            if (o == j) continue;
            fn += cm.at(j, o);
            fp += cm.at(o, j);
        }
        if (tp + fn + fp == 0) continue;
        double iou = static_cast<double>(tp) / static_cast<double>(tp + fn + fp);
        per[names[j]] = iou;
        sum += iou;
        ++kept;
    }
    check(kept > 0, ErrorKind::data, "no classes present in evaluation");
    return json{{"miou", sum / kept}, {"per_class", per}};
}

void add_confusion(ConfusionMatrix& acc, const ConfusionMatrix& part) {
    if (acc.n_classes == 0) {
        acc = part;
        return;
    }
    check(acc.n_classes == part.n_classes, ErrorKind::data,
          "confusion matrix size mismatch");
    for (size_t i = 0; i < acc.counts.size(); ++i) acc.counts[i] += part.counts[i];
}

struct EncoderOpts {
    int dim = 64;
    uint64_t seed = 0;
    int patch = 14;
};

void add_encoder_opts(CLI::App* sub, EncoderOpts& e) {
    sub->add_option("--encoder-dim", e.dim, "frozen encoder feature dim");
    sub->add_option("--encoder-seed", e.seed, "frozen encoder anchor seed");
    sub->add_option("--patch", e.patch, "encoder patch size in pixels");
}

// --- selfcheck suites ---

int selfcheck_gradients() {
    std::vector<std::string> caps = {"a red box", "a green box", "a blue box",
                                     "a yellow box"};
    Tokenizer tok = Tokenizer::build(caps, 8, 64, 16);
    ModelConfig cfg;
    cfg.dim = 16;
    cfg.text_dim = 16;
    cfg.max_len = 8;
    AlignmentModel m = AlignmentModel::init(cfg, tok, 7);
    SyntheticEncoder enc(16, 3, 14);
    Rng rng(11);
    Batch b;
    std::vector<FeatureGrid> grids(4);
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
    for (int trial = 0; trial < 40; ++trial) {
        size_t ti = rng.below(refs.size());
        Mat* t = refs[ti].second;
        size_t ei = rng.below(t->d.size());
        double orig = t->d[ei];
        double h = 1e-4;
        t->d[ei] = orig + h;
        double lp = forward_loss(m, b);
        t->d[ei] = orig - h;
        double lm = forward_loss(m, b);
        t->d[ei] = orig;
        double fd = (lp - lm) / (2 * h);
        double an = g.tensors[ti].d[ei];
        double rel = std::abs(an - fd) / std::max(1e-8, std::abs(fd));
        ++checked;
        // near-zero gradients drown in finite-difference cancellation noise
        if (rel > 1e-4 && (std::abs(an) > 1e-5 || std::abs(fd) > 1e-5)) ++failed;
    }
    log_event("selfcheck_gradients", {{"checked", checked}, {"failed", failed}});
    return failed;
}

int selfcheck_kmeans() {
    int failed = 0;
    Rng rng(21);
    for (int inst = 0; inst < 30; ++inst) {
        int n = 4 + static_cast<int>(rng.below(4));
        int k = 2 + static_cast<int>(rng.below(2));
        Mat pts(n, 2);
        for (auto& v : pts.d) v = rng.uniform(-1.0, 1.0);
        double best = 1e300;
        for (int restart = 0; restart < 20; ++restart) {
            auto res = kmeans_fit(pts, k, 100 + restart);
            best = std::min(best, res.inertia);
        }
        // brute-force optimum over all assignments
        double opt = 1e300;
        std::vector<int> assign(n, 0);
        long total = 1;
        for (int i = 0; i < n; ++i) total *= k;
        for (long code = 0; code < total; ++code) {
            long c2 = code;
            for (int i = 0; i < n; ++i) {
                assign[i] = static_cast<int>(c2 % k);
                c2 /= k;
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
        if (best > opt * (1 + 1e-5) + 1e-9) ++failed;
    }
    log_event("selfcheck_kmeans", {{"failed", failed}});
    return failed;
}

int selfcheck_miou() {
    int failed = 0;
    Rng rng(31);
    for (int inst = 0; inst < 100; ++inst) {
        int h = 2 + static_cast<int>(rng.below(6));
        int w = 2 + static_cast<int>(rng.below(6));
        int c = 2 + static_cast<int>(rng.below(3));
        SegmentationMap gt, pr;
        gt.height = pr.height = h;
        gt.width = pr.width = w;
        for (int j = 0; j < c; ++j) {
            gt.class_names.push_back("c" + std::to_string(j));
            pr.class_names.push_back("c" + std::to_string(j));
        }
        gt.labels.resize(static_cast<size_t>(h) * w);
        pr.labels.resize(gt.labels.size());
        for (auto& l : gt.labels) l = static_cast<uint16_t>(rng.below(c));
        for (auto& l : pr.labels) l = static_cast<uint16_t>(rng.below(c));
        auto res = miou(pr, gt);
        // brute-force recount
        double sum = 0.0;
        int kept = 0;
        for (int j = 0; j < c; ++j) {
            size_t inter = 0, uni = 0;
            for (size_t i = 0; i < gt.labels.size(); ++i) {
                bool a = gt.labels[i] == j, b = pr.labels[i] == j;
                if (a && b) ++inter;
                if (a || b) ++uni;
            }
            if (!uni) continue;
            sum += static_cast<double>(inter) / uni;
            ++kept;
        }
        if (std::abs(res.miou - sum / kept) > 1e-12) ++failed;
    }
    log_event("selfcheck_miou", {{"failed", failed}});
    return failed;
}

int dispatch(int argc, char** argv) {
    CLI::App app{"image-text alignment pipeline"};
    app.require_subcommand(1);
    app.add_flag("--verbose", g_verbose, "JSON event log on stderr");
    app.set_config("--config", "",
                   "key=value config file with [subcommand] sections; "
                   "flags override");
    app.allow_config_extras(false);

    // gen-shapes
    auto* gen = app.add_subcommand("gen-shapes", "generate a shapes corpus");
    std::string gen_out, gen_classes = "";
    int gen_n = 256;
    uint64_t gen_seed = 0;
    ShapesOptions sopt;
    EncoderOpts gen_enc;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--n", gen_n, "number of images");
    gen->add_option("--seed", gen_seed, "rng seed")->required();
    gen->add_option("--classes", gen_classes,
                    "comma-separated class names, first is background");
    gen->add_option("--image-size", sopt.image_size);
    gen->add_option("--min-rects", sopt.min_rects);
    gen->add_option("--max-rects", sopt.max_rects);
    gen->add_flag("--unique-class-sets", sopt.unique_class_sets,
                  "reject repeated color combinations");
    add_encoder_opts(gen, gen_enc);

    // curate-text
    auto* ctx = app.add_subcommand("curate-text", "frequency-capped text curation");
    std::string ctx_caps, ctx_concepts, ctx_out;
    size_t ctx_cap = 100;
    uint64_t ctx_seed = 0;
    int ctx_threads = default_threads();
    ctx->add_option("--captions", ctx_caps)->required();
    ctx->add_option("--concepts", ctx_concepts)->required();
    ctx->add_option("--cap", ctx_cap, "per-concept frequency cap");
    ctx->add_option("--seed", ctx_seed)->required();
    ctx->add_option("--out", ctx_out, "kept-id list")->required();
    ctx->add_option("--threads", ctx_threads);

    // fit-tree
    auto* fit = app.add_subcommand("fit-tree", "hierarchical k-means on embeddings");
    std::string fit_emb, fit_out, fit_ks = "8,4";
    uint64_t fit_seed = 0;
    KMeansOptions kopt;
    kopt.threads = default_threads();
    fit->add_option("--embeddings", fit_emb)->required();
    fit->add_option("--ks", fit_ks, "per-level cluster counts, fine to coarse");
    fit->add_option("--seed", fit_seed)->required();
    fit->add_option("--out", fit_out)->required();
    fit->add_option("--max-iters", kopt.max_iters);
    fit->add_option("--tol", kopt.tol);
    fit->add_flag("--normalize", kopt.normalize);
    fit->add_option("--threads", kopt.threads);

    // curate-image
    auto* cim = app.add_subcommand("curate-image", "balanced sampling over a tree");
    std::string cim_emb, cim_tree, cim_out;
    size_t cim_budget = 0;
    uint64_t cim_seed = 0;
    cim->add_option("--embeddings", cim_emb)->required();
    cim->add_option("--tree", cim_tree)->required();
    cim->add_option("--budget", cim_budget)->required();
    cim->add_option("--seed", cim_seed)->required();
    cim->add_option("--out", cim_out)->required();

    // intersect
    auto* ins = app.add_subcommand("intersect", "intersect two id lists");
    std::string ins_a, ins_b, ins_out;
    ins->add_option("--a", ins_a)->required();
    ins->add_option("--b", ins_b)->required();
    ins->add_option("--out", ins_out)->required();

    // curation-report
    auto* rep = app.add_subcommand("curation-report", "before/after balance report");
    std::string rep_caps, rep_concepts, rep_emb, rep_tree, rep_kept;
    int rep_threads = default_threads();
    rep->add_option("--captions", rep_caps)->required();
    rep->add_option("--concepts", rep_concepts)->required();
    rep->add_option("--embeddings", rep_emb)->required();
    rep->add_option("--tree", rep_tree)->required();
    rep->add_option("--kept", rep_kept)->required();
    rep->add_option("--threads", rep_threads);

    // train
    auto* trn = app.add_subcommand("train", "contrastive alignment training");
    std::string trn_data, trn_kept = "", trn_out, trn_pooling = "cls_avg";
    uint64_t trn_seed = 0;
    TrainConfig tcfg;
    ModelConfig mcfg;
    EncoderOpts trn_enc;
    bool trn_per_half = false;
    trn->add_option("--data", trn_data, "dataset directory")->required();
    trn->add_option("--kept", trn_kept, "optional kept-id list");
    trn->add_option("--out", trn_out, "model checkpoint")->required();
    trn->add_option("--seed", trn_seed)->required();
    trn->add_option("--steps", tcfg.steps);
    trn->add_option("--batch-size", tcfg.batch_size);
    trn->add_option("--lr", tcfg.lr);
    trn->add_option("--weight-decay", tcfg.weight_decay);
    trn->add_option("--warmup-frac", tcfg.warmup_frac);
    trn->add_option("--threads", tcfg.threads)->default_val(default_threads());
    trn->add_option("--dim", mcfg.dim);
    trn->add_option("--text-dim", mcfg.text_dim);
    trn->add_option("--max-len", mcfg.max_len);
    trn->add_option("--text-depth", mcfg.text_depth);
    trn->add_option("--vision-depth", mcfg.vision_depth);
    trn->add_option("--heads", mcfg.heads);
    trn->add_option("--pooling", trn_pooling, "cls|avg|max|cls_max|cls_avg");
    trn->add_flag("--per-half-norm", trn_per_half);
    add_encoder_opts(trn, trn_enc);

    // shared eval options
    struct EvalOpts {
        std::string model, data, kept = "", classes = "";
        int threads = default_threads();
        EncoderOpts enc;
    };
    auto add_eval_opts = [&](CLI::App* sub, EvalOpts& e, bool with_classes) {
        sub->add_option("--model", e.model)->required();
        sub->add_option("--data", e.data)->required();
        sub->add_option("--kept", e.kept);
        if (with_classes)
            sub->add_option("--classes", e.classes,
                            "comma-separated; default: classes.txt in --data");
        sub->add_option("--threads", e.threads);
        add_encoder_opts(sub, e.enc);
    };

    auto* ecl = app.add_subcommand("eval-classify", "zero-shot classification");
    EvalOpts ecl_o;
    std::string ecl_template = "{}";
    add_eval_opts(ecl, ecl_o, true);
    ecl->add_option("--template", ecl_template, "prompt template with {}");

    auto* ert = app.add_subcommand("eval-retrieval", "text-to-image Recall@1");
    EvalOpts ert_o;
    add_eval_opts(ert, ert_o, false);

    auto* esg = app.add_subcommand("eval-seg", "sliding-window segmentation");
    EvalOpts esg_o;
    SlidingWindowOptions swopt;
    std::string esg_embedding = "patch", esg_outdir = "";
    add_eval_opts(esg, esg_o, true);
    esg->add_option("--window", swopt.window);
    esg->add_option("--stride", swopt.stride);
    esg->add_option("--embedding", esg_embedding, "patch|cls_patch");
    esg->add_option("--out-dir", esg_outdir, "write predicted maps here");

    auto* ehr = app.add_subcommand("eval-seg-highres", "quadrilateral-crop segmentation");
    EvalOpts ehr_o;
    HighresParams hrp;
    std::string ehr_fracs = "", ehr_outdir = "";
    uint64_t ehr_seed = 0;
    add_eval_opts(ehr, ehr_o, true);
    ehr->add_option("--seed", ehr_seed)->required();
    ehr->add_option("--k", hrp.k);
    ehr->add_option("--sample-res", hrp.sample_res);
    ehr->add_option("--area-fracs", ehr_fracs, "comma-separated fractions");
    ehr->add_option("--noise-frac", hrp.crops.noise_frac);
    ehr->add_option("--stride-frac", hrp.crops.stride_frac);
    ehr->add_flag("--scatter", hrp.scatter_splat);
    ehr->add_flag("--bypass-cluster", hrp.bypass_cluster);
    ehr->add_option("--out-dir", ehr_outdir);

    auto* emi = app.add_subcommand("eval-miou", "score one prediction against gt");
    std::string emi_pred, emi_gt;
    emi->add_option("--pred", emi_pred)->required();
    emi->add_option("--gt", emi_gt)->required();

    auto* top = app.add_subcommand("topline", "perfect-boundary topline");
    EvalOpts top_o;
    HighresParams top_hrp;
    uint64_t top_seed = 0;
    std::string top_fracs = "";
    add_eval_opts(top, top_o, false);
    top->add_option("--seed", top_seed)->required();
    top->add_option("--sample-res", top_hrp.sample_res);
    top->add_option("--area-fracs", top_fracs);
    top->add_option("--noise-frac", top_hrp.crops.noise_frac);
    top->add_option("--stride-frac", top_hrp.crops.stride_frac);

    auto* opn = app.add_subcommand("optimize-names", "class-name optimization");
    EvalOpts opn_o;
    std::string opn_vocab;
    uint64_t opn_seed = 0;
    HighresParams opn_hrp;
    add_eval_opts(opn, opn_o, false);
    opn->add_option("--vocab", opn_vocab, "candidate word list")->required();
    opn->add_option("--seed", opn_seed)->required();
    opn->add_option("--sample-res", opn_hrp.sample_res);

    auto* slf = app.add_subcommand("selfcheck", "bundled verification suites");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    if (gen->parsed()) {
        std::vector<std::string> classes;
        if (!gen_classes.empty()) {
            classes = split_csv(gen_classes);
        } else {
            for (const auto& nc : shapes_palette()) classes.push_back(nc.name);
        }
        sopt.patch = gen_enc.patch;
        log_event("config", {{"cmd", "gen-shapes"}, {"n", gen_n}, {"seed", gen_seed},
                             {"out", gen_out}, {"image_size", sopt.image_size}});
        fs::create_directories(gen_out);
        auto imgs = make_shapes_dataset(gen_n, classes, gen_seed, sopt);
        SyntheticEncoder enc(gen_enc.dim, gen_enc.seed, gen_enc.patch);
        std::vector<CaptionLine> caps;
        std::vector<std::string> ids;
        Mat emb(gen_n, gen_enc.dim);
        for (int i = 0; i < gen_n; ++i) {
            char buf[16];
            std::snprintf(buf, sizeof buf, "img_%04d", i);
            std::string id = buf;
            write_raster(imgs[i].raster, gen_out + "/" + id + ".dtxr");
            write_segmentation(imgs[i].mask, gen_out + "/" + id + ".dtxs");
            caps.push_back({id, imgs[i].caption});
            ids.push_back(id);
            FeatureGrid g = enc.encode(imgs[i].raster);
            std::copy(g.cls.begin(), g.cls.end(), emb.row(i));
        }
        write_captions_jsonl(caps, gen_out + "/captions.jsonl");
        write_embeddings(ids, emb, gen_out + "/embeddings.dtxe");
        {
            std::ofstream cf(gen_out + "/classes.txt");
            for (const auto& c : classes) cf << c << "\n";
        }
        emit({{"images", gen_n}, {"classes", classes}, {"out", gen_out}});
        return 0;
    }

    if (ctx->parsed()) {
        log_event("config", {{"cmd", "curate-text"}, {"cap", ctx_cap},
                             {"seed", ctx_seed}, {"threads", ctx_threads}});
        auto caps = read_captions_jsonl(ctx_caps);
        std::vector<PairRecord> pairs;
        for (const auto& c : caps) pairs.push_back({c.id, c.caption, {}, ""});
        auto vocab = ConceptVocabulary::load(ctx_concepts);
        auto counts = match_concepts(pairs, vocab, ctx_threads);
        auto sel = text_balance(pairs, counts, ctx_cap, ctx_seed);
        std::vector<std::string> kept(sel.kept_ids.begin(), sel.kept_ids.end());
        write_id_list(kept, ctx_out);
        emit({{"kept", kept.size()}, {"total", pairs.size()},
              {"dropped_invalid_utf8", counts.dropped_invalid_utf8}});
        return 0;
    }

    if (fit->parsed()) {
        std::vector<std::string> ids;
        Mat emb;
        read_embeddings(fit_emb, ids, emb);
        std::vector<int> ks;
        for (const auto& s : split_csv(fit_ks)) ks.push_back(std::stoi(s));
        log_event("config", {{"cmd", "fit-tree"}, {"n", emb.rows}, {"ks", ks},
                             {"seed", fit_seed}, {"threads", kopt.threads}});
        auto tree = hierarchical_fit(emb, ks, fit_seed, kopt);
        write_cluster_tree(tree, fit_out);
        json inertia = json::array();
        for (const auto& l : tree.levels) inertia.push_back(l.inertia);
        emit({{"levels", tree.n_levels()}, {"inertia", inertia}, {"out", fit_out}});
        return 0;
    }

    if (cim->parsed()) {
        std::vector<std::string> ids;
        Mat emb;
        read_embeddings(cim_emb, ids, emb);
        std::vector<PairRecord> recs;
        for (const auto& id : ids) recs.push_back({id, "", {}, ""});
        auto tree = read_cluster_tree(cim_tree);
        log_event("config", {{"cmd", "curate-image"}, {"budget", cim_budget},
                             {"seed", cim_seed}});
        auto sel = image_balance(recs, tree, cim_budget, cim_seed);
        std::vector<std::string> kept(sel.kept_ids.begin(), sel.kept_ids.end());
        write_id_list(kept, cim_out);
        emit({{"kept", kept.size()}, {"total", ids.size()}});
        return 0;
    }

    if (ins->parsed()) {
        CurationSelection a, b;
        for (const auto& id : read_id_list(ins_a)) a.kept_ids.insert(id);
        for (const auto& id : read_id_list(ins_b)) b.kept_ids.insert(id);
        b.provenance = Provenance::image;
        auto both = intersect(a, b);
        std::vector<std::string> kept(both.kept_ids.begin(), both.kept_ids.end());
        write_id_list(kept, ins_out);
        emit({{"kept", kept.size()}});
        return 0;
    }

    if (rep->parsed()) {
        auto caps = read_captions_jsonl(rep_caps);
        std::vector<PairRecord> pairs;
        for (const auto& c : caps) pairs.push_back({c.id, c.caption, {}, ""});
        auto vocab = ConceptVocabulary::load(rep_concepts);
        auto counts = match_concepts(pairs, vocab, rep_threads);
        auto tree = read_cluster_tree(rep_tree);
        CurationSelection sel;
        sel.provenance = Provenance::intersection;
        for (const auto& id : read_id_list(rep_kept)) sel.kept_ids.insert(id);
        auto report = curation_report(pairs, sel, counts, tree);
        emit({{"n_before", report.n_before},
              {"n_after", report.n_after},
              {"concepts",
               {{"before", report.concept_hist.before},
                {"after", report.concept_hist.after},
                {"entropy_before", report.concept_hist.entropy_before},
                {"entropy_after", report.concept_hist.entropy_after}}},
              {"clusters",
               {{"before", report.cluster_hist.before},
                {"after", report.cluster_hist.after},
                {"entropy_before", report.cluster_hist.entropy_before},
                {"entropy_after", report.cluster_hist.entropy_after}}}});
        return 0;
    }

    if (trn->parsed()) {
        mcfg.pooling = pooling_from_string(trn_pooling);
        mcfg.per_half_norm = trn_per_half;
        tcfg.seed = trn_seed;
        check(trn_enc.dim == mcfg.dim, ErrorKind::usage,
              "encoder dim must match model dim");
        log_event("config", {{"cmd", "train"}, {"steps", tcfg.steps},
                             {"batch_size", tcfg.batch_size}, {"lr", tcfg.lr},
                             {"seed", trn_seed}, {"pooling", trn_pooling},
                             {"threads", tcfg.threads}});
        auto items = load_dataset(trn_data, trn_kept);
        SyntheticEncoder enc(trn_enc.dim, trn_enc.seed, trn_enc.patch);
        std::vector<TrainSample> samples(items.size());
        std::vector<std::string> captions;
        for (const auto& it : items) captions.push_back(it.caption);
        parallel_for(items.size(), tcfg.threads, [&](size_t i) {
            samples[i].grid = enc.encode(read_raster(items[i].raster_path));
            samples[i].caption = items[i].caption;
        });
        Tokenizer tok = Tokenizer::build(captions, mcfg.max_len);
        AlignmentModel m = AlignmentModel::init(mcfg, tok, trn_seed);
        auto trace = train(m, samples, tcfg);
        save_model(m, trn_out);
        emit({{"samples", samples.size()},
              {"steps", tcfg.steps},
              {"initial_loss", trace.front()},
              {"final_loss", trace.back()},
              {"out", trn_out}});
        return 0;
    }

    auto load_eval = [&](const EvalOpts& e, AlignmentModel& m,
                         std::unique_ptr<SyntheticEncoder>& enc,
                         std::vector<DatasetItem>& items) {
        m = load_model(e.model);
        check(e.enc.dim == m.cfg.dim, ErrorKind::usage,
              "encoder dim must match model dim");
        enc = std::make_unique<SyntheticEncoder>(e.enc.dim, e.enc.seed, e.enc.patch);
        items = load_dataset(e.data, e.kept);
    };
    auto eval_classes = [&](const EvalOpts& e) {
        return e.classes.empty() ? dataset_classes(e.data) : split_csv(e.classes);
    };

    if (ecl->parsed()) {
        AlignmentModel m;
        std::unique_ptr<SyntheticEncoder> enc;
        std::vector<DatasetItem> items;
        load_eval(ecl_o, m, enc, items);
        auto classes = eval_classes(ecl_o);
        auto queries = embed_queries(m, bare_prompts(classes, ecl_template));
        std::vector<int> preds, gts;
        for (const auto& it : items) {
            check(!it.mask_path.empty(), ErrorKind::data,
                  "eval-classify needs masks for ground truth: " + it.id);
            auto gt = read_segmentation(it.mask_path);
            // ground truth = majority class among those evaluated
            std::vector<size_t> hist(classes.size(), 0);
            for (uint16_t l : gt.labels) {
                if (l == gt.ignore_index) continue;
                auto pos = std::find(classes.begin(), classes.end(),
                                     gt.class_names[l]);
                if (pos != classes.end()) ++hist[pos - classes.begin()];
            }
            int best = static_cast<int>(
                std::max_element(hist.begin(), hist.end()) - hist.begin());
            check(hist[best] > 0, ErrorKind::data,
                  "no evaluated class present in " + it.id);
            gts.push_back(best);
            auto res = classify(m, enc->encode(read_raster(it.raster_path)), queries);
            preds.push_back(res.argmax);
        }
        emit({{"accuracy", accuracy(preds, gts)}, {"n", preds.size()}});
        return 0;
    }

    if (ert->parsed()) {
        AlignmentModel m;
        std::unique_ptr<SyntheticEncoder> enc;
        std::vector<DatasetItem> items;
        load_eval(ert_o, m, enc, items);
        std::vector<FeatureGrid> grids(items.size());
        std::vector<std::string> captions;
        for (const auto& it : items) captions.push_back(it.caption);
        parallel_for(items.size(), ert_o.threads, [&](size_t i) {
            grids[i] = enc->encode(read_raster(items[i].raster_path));
        });
        emit({{"recall_at_1", retrieve_r1(m, grids, captions)}, {"n", items.size()}});
        return 0;
    }

    auto run_seg_eval = [&](const EvalOpts& e, const std::string& outdir,
                            auto&& segment_fn) {
        AlignmentModel m;
        std::unique_ptr<SyntheticEncoder> enc;
        std::vector<DatasetItem> items;
        load_eval(e, m, enc, items);
        auto classes = eval_classes(e);
        auto queries = embed_queries(m, bare_prompts(classes));
        if (!outdir.empty()) fs::create_directories(outdir);
        ConfusionMatrix acc;
        for (const auto& it : items) {
            check(!it.mask_path.empty(), ErrorKind::data,
                  "segmentation eval needs masks: " + it.id);
            auto gt = read_segmentation(it.mask_path);
            check(gt.class_names == classes, ErrorKind::data,
                  "mask class list does not match evaluated classes: " + it.id);
            SegmentationMap pred =
                segment_fn(m, *enc, read_raster(it.raster_path), queries);
            if (!outdir.empty())
                write_segmentation(pred, outdir + "/" + it.id + ".dtxs");
            add_confusion(acc, miou(pred, gt).confusion);
        }
        json out = miou_report(acc, classes);
        out["n"] = items.size();
        emit(out);
    };

    if (esg->parsed()) {
        swopt.embedding = esg_embedding == "cls_patch" ? DenseEmbedding::CLS_PATCH
                                                       : DenseEmbedding::PATCH;
        check(esg_embedding == "patch" || esg_embedding == "cls_patch",
              ErrorKind::usage, "unknown --embedding");
        swopt.threads = esg_o.threads;
        log_event("config", {{"cmd", "eval-seg"}, {"window", swopt.window},
                             {"stride", swopt.stride}, {"embedding", esg_embedding}});
        run_seg_eval(esg_o, esg_outdir,
                     [&](const AlignmentModel& m, const VisionEncoder& enc,
                         const Raster& r, const QueryEmbeddings& q) {
                         return sliding_window_segment(m, enc, r, q, swopt);
                     });
        return 0;
    }

    if (ehr->parsed()) {
        if (!ehr_fracs.empty()) {
            hrp.crops.area_fracs.clear();
            for (const auto& s : split_csv(ehr_fracs))
                hrp.crops.area_fracs.push_back(std::stod(s));
        }
        hrp.seed = ehr_seed;
        hrp.threads = ehr_o.threads;
        log_event("config", {{"cmd", "eval-seg-highres"}, {"k", hrp.k},
                             {"sample_res", hrp.sample_res}, {"seed", ehr_seed}});
        run_seg_eval(ehr_o, ehr_outdir,
                     [&](const AlignmentModel& m, const VisionEncoder& enc,
                         const Raster& r, const QueryEmbeddings& q) {
                         return highres_segment(m, enc, r, q, hrp);
                     });
        return 0;
    }

    if (emi->parsed()) {
        auto pred = read_segmentation(emi_pred);
        auto gt = read_segmentation(emi_gt);
        auto res = miou(pred, gt);
        json per = json::object();
        for (size_t j = 0; j < res.per_class.size(); ++j)
            if (res.present[j]) per[gt.class_names[j]] = res.per_class[j];
        json conf = json::array();
        for (int r = 0; r < res.confusion.n_classes; ++r) {
            json row = json::array();
            for (int c = 0; c < res.confusion.n_classes; ++c)
                row.push_back(res.confusion.at(r, c));
            conf.push_back(row);
        }
        emit({{"miou", res.miou}, {"per_class", per}, {"confusion", conf}});
        return 0;
    }

    if (top->parsed()) {
        AlignmentModel m;
        std::unique_ptr<SyntheticEncoder> enc;
        std::vector<DatasetItem> items;
        load_eval(top_o, m, enc, items);
        if (!top_fracs.empty()) {
            top_hrp.crops.area_fracs.clear();
            for (const auto& s : split_csv(top_fracs))
                top_hrp.crops.area_fracs.push_back(std::stod(s));
        }
        top_hrp.seed = top_seed;
        top_hrp.threads = top_o.threads;
        ConfusionMatrix acc;
        std::vector<std::string> classes;
        for (const auto& it : items) {
            check(!it.mask_path.empty(), ErrorKind::data, "topline needs masks");
            auto gt = read_segmentation(it.mask_path);
            if (classes.empty()) classes = gt.class_names;
            auto queries = embed_queries(m, bare_prompts(gt.class_names));
            auto res = topline_with_gt_masks(m, *enc, read_raster(it.raster_path),
                                             gt, queries, top_hrp);
            add_confusion(acc, res.score.confusion);
        }
        json out = miou_report(acc, classes);
        out["n"] = items.size();
        emit(out);
        return 0;
    }

    if (opn->parsed()) {
        AlignmentModel m;
        std::unique_ptr<SyntheticEncoder> enc;
        std::vector<DatasetItem> items;
        load_eval(opn_o, m, enc, items);
        auto vocab = read_lines(opn_vocab);
        opn_hrp.seed = opn_seed;
        opn_hrp.threads = opn_o.threads;
        std::vector<LabeledImage> data;
        for (const auto& it : items) {
            check(!it.mask_path.empty(), ErrorKind::data, "optimize-names needs masks");
            data.push_back({read_raster(it.raster_path),
                            read_segmentation(it.mask_path)});
        }
        auto choices = optimize_class_names(m, *enc, data, vocab, opn_hrp);
        json out = json::object();
        for (const auto& ch : choices)
            out[ch.original] = {{"chosen", ch.chosen},
                                {"similarity", ch.similarity},
                                {"flagged", ch.flagged}};
        emit(out);
        return 0;
    }

    if (slf->parsed()) {
        int failed = selfcheck_gradients() + selfcheck_kmeans() + selfcheck_miou();
        emit({{"failed", failed}, {"ok", failed == 0}});
        check(failed == 0, ErrorKind::numeric, "selfcheck failures");
        return 0;
    }

    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return dispatch(argc, argv);
    } catch (const FileFormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return static_cast<int>(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
