#include "dtx/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "dtx/binio.hpp"
#include "dtx/curation.hpp"
#include "dtx/rng.hpp"

namespace dtx {

Pooling pooling_from_string(const std::string& s) {
    if (s == "cls") return Pooling::CLS;
    if (s == "avg") return Pooling::AVG;
    if (s == "max") return Pooling::MAX;
    if (s == "cls_max") return Pooling::CLS_MAX;
    if (s == "cls_avg") return Pooling::CLS_AVG;
    throw Error(ErrorKind::usage, "unknown pooling mode: " + s);
}

std::string pooling_to_string(Pooling p) {
    switch (p) {
        case Pooling::CLS: return "cls";
        case Pooling::AVG: return "avg";
        case Pooling::MAX: return "max";
        case Pooling::CLS_MAX: return "cls_max";
        case Pooling::CLS_AVG: return "cls_avg";
    }
    return "?";
}

int Tokenizer::word_id(const std::string& w) const {
    auto it = lookup.find(w);
    if (it != lookup.end()) return it->second;
    uint64_t h = hash_str(w, 0x70cabc1bULL);
    return 3 + static_cast<int>(words.size()) +
           static_cast<int>(h % static_cast<uint64_t>(n_hash_buckets));
}

std::vector<int> Tokenizer::tokenize(const std::string& caption) const {
    auto toks = normalize_tokens(caption);
    std::vector<int> ids;
    ids.reserve(max_len);
    for (const auto& t : toks) {
        if (static_cast<int>(ids.size()) == max_len - 1) break;  // room for EOS
        ids.push_back(word_id(t));
    }
    ids.push_back(EOS);
    while (static_cast<int>(ids.size()) < max_len) ids.push_back(PAD);
    return ids;
}

int Tokenizer::eos_position(const std::vector<int>& ids) {
    for (size_t i = 0; i < ids.size(); ++i)
        if (ids[i] == EOS) return static_cast<int>(i);
    throw Error(ErrorKind::numeric, "token sequence without EOS");
}

Tokenizer Tokenizer::build(const std::vector<std::string>& captions, int max_len,
                           size_t max_words, int n_hash) {
    Tokenizer tk;
    tk.max_len = max_len;
    tk.n_hash_buckets = n_hash;
    std::map<std::string, size_t> freq;
    for (const auto& c : captions)
        for (const auto& t : normalize_tokens(c)) freq[t]++;
    // most frequent first, ties alphabetical
    std::vector<std::pair<std::string, size_t>> items(freq.begin(), freq.end());
    std::stable_sort(items.begin(), items.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    if (items.size() > max_words) items.resize(max_words);
    std::sort(items.begin(), items.end());
    for (const auto& [w, f] : items) {
        (void)f;
        tk.lookup[w] = 3 + static_cast<int>(tk.words.size());
        tk.words.push_back(w);
    }
    return tk;
}

namespace {

void fill_gauss(Mat& m, Rng& rng, double std_dev) {
    for (auto& v : m.d) v = rng.gaussian() * std_dev;
}

BlockParams init_block(int w, Rng& rng) {
    BlockParams b;
    b.ln1_g = Mat(1, w);
    b.ln1_b = Mat(1, w);
    b.ln2_g = Mat(1, w);
    b.ln2_b = Mat(1, w);
    std::fill(b.ln1_g.d.begin(), b.ln1_g.d.end(), 1.0);
    std::fill(b.ln2_g.d.begin(), b.ln2_g.d.end(), 1.0);
    double ws = 1.0 / std::sqrt(static_cast<double>(w));
    b.wq = Mat(w, w); fill_gauss(b.wq, rng, ws);
    b.wk = Mat(w, w); fill_gauss(b.wk, rng, ws);
    b.wv = Mat(w, w); fill_gauss(b.wv, rng, ws);
    b.wo = Mat(w, w); fill_gauss(b.wo, rng, ws);
    b.bq = Mat(1, w); b.bk = Mat(1, w); b.bv = Mat(1, w); b.bo = Mat(1, w);
    b.w1 = Mat(w, 4 * w); fill_gauss(b.w1, rng, ws);
    b.b1 = Mat(1, 4 * w);
    b.w2 = Mat(4 * w, w); fill_gauss(b.w2, rng, 0.5 * ws);
    b.b2 = Mat(1, w);
    return b;
}

}  // namespace

AlignmentModel AlignmentModel::init(const ModelConfig& cfg, const Tokenizer& tok,
                                    uint64_t seed) {
    check(cfg.dim % cfg.heads == 0 && cfg.text_dim % cfg.heads == 0,
          ErrorKind::usage, "model dim must be divisible by head count");
    AlignmentModel m;
    m.cfg = cfg;
    m.tokenizer = tok;
    m.tokenizer.max_len = cfg.max_len;
    Rng rng(hash_combine(seed, 0xa11c9ed5ULL));

    m.text.tok_emb = Mat(m.tokenizer.vocab_size(), cfg.text_dim);
    fill_gauss(m.text.tok_emb, rng, 0.02);
    m.text.pos_emb = Mat(cfg.max_len, cfg.text_dim);
    fill_gauss(m.text.pos_emb, rng, 0.02);
    for (int i = 0; i < cfg.text_depth; ++i)
        m.text.blocks.push_back(init_block(cfg.text_dim, rng));
    m.text.ln_f_g = Mat(1, cfg.text_dim);
    std::fill(m.text.ln_f_g.d.begin(), m.text.ln_f_g.d.end(), 1.0);
    m.text.ln_f_b = Mat(1, cfg.text_dim);
    m.text.proj_w = Mat(cfg.text_dim, 2 * cfg.dim);
    fill_gauss(m.text.proj_w, rng, 1.0 / std::sqrt(static_cast<double>(cfg.text_dim)));
    m.text.proj_b = Mat(1, 2 * cfg.dim);

    for (int i = 0; i < cfg.vision_depth; ++i)
        m.vision_blocks.push_back(init_block(cfg.dim, rng));

    m.log_temperature = Mat(1, 1);
    m.log_temperature.at(0, 0) = std::log(1.0 / 0.07);
    return m;
}

std::vector<std::pair<std::string, Mat*>> param_refs(AlignmentModel& m) {
    std::vector<std::pair<std::string, Mat*>> out;
    auto add_block = [&](const std::string& prefix, BlockParams& b) {
        out.emplace_back(prefix + ".ln1_g", &b.ln1_g);
        out.emplace_back(prefix + ".ln1_b", &b.ln1_b);
        out.emplace_back(prefix + ".wq", &b.wq);
        out.emplace_back(prefix + ".bq", &b.bq);
        out.emplace_back(prefix + ".wk", &b.wk);
        out.emplace_back(prefix + ".bk", &b.bk);
        out.emplace_back(prefix + ".wv", &b.wv);
        out.emplace_back(prefix + ".bv", &b.bv);
        out.emplace_back(prefix + ".wo", &b.wo);
        out.emplace_back(prefix + ".bo", &b.bo);
        out.emplace_back(prefix + ".ln2_g", &b.ln2_g);
        out.emplace_back(prefix + ".ln2_b", &b.ln2_b);
        out.emplace_back(prefix + ".w1", &b.w1);
        out.emplace_back(prefix + ".b1", &b.b1);
        out.emplace_back(prefix + ".w2", &b.w2);
        out.emplace_back(prefix + ".b2", &b.b2);
    };
    out.emplace_back("text.tok_emb", &m.text.tok_emb);
    out.emplace_back("text.pos_emb", &m.text.pos_emb);
    for (size_t i = 0; i < m.text.blocks.size(); ++i)
        add_block("text.block" + std::to_string(i), m.text.blocks[i]);
    out.emplace_back("text.ln_f_g", &m.text.ln_f_g);
    out.emplace_back("text.ln_f_b", &m.text.ln_f_b);
    out.emplace_back("text.proj_w", &m.text.proj_w);
    out.emplace_back("text.proj_b", &m.text.proj_b);
    for (size_t i = 0; i < m.vision_blocks.size(); ++i)
        add_block("vision.block" + std::to_string(i), m.vision_blocks[i]);
    out.emplace_back("log_temperature", &m.log_temperature);
    return out;
}

namespace {

struct BlockLeaf {
    int ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

BlockLeaf leaf_block(Tape& t, const BlockParams& b, bool ng) {
    BlockLeaf l;
    l.ln1_g = t.leaf(b.ln1_g, ng); l.ln1_b = t.leaf(b.ln1_b, ng);
    l.wq = t.leaf(b.wq, ng); l.bq = t.leaf(b.bq, ng);
    l.wk = t.leaf(b.wk, ng); l.bk = t.leaf(b.bk, ng);
    l.wv = t.leaf(b.wv, ng); l.bv = t.leaf(b.bv, ng);
    l.wo = t.leaf(b.wo, ng); l.bo = t.leaf(b.bo, ng);
    l.ln2_g = t.leaf(b.ln2_g, ng); l.ln2_b = t.leaf(b.ln2_b, ng);
    l.w1 = t.leaf(b.w1, ng); l.b1 = t.leaf(b.b1, ng);
    l.w2 = t.leaf(b.w2, ng); l.b2 = t.leaf(b.b2, ng);
    return l;
}

void collect_block_grads(Tape& t, const BlockLeaf& l, std::vector<Mat*>& dst) {
    for (int id : {l.ln1_g, l.ln1_b, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo,
                   l.bo, l.ln2_g, l.ln2_b, l.w1, l.b1, l.w2, l.b2}) {
        Mat& g = t.grad(id);
        Mat* d = dst.front();
        dst.erase(dst.begin());
        for (size_t i = 0; i < g.d.size(); ++i) d->d[i] += g.d[i];
    }
}

// pre-norm block: x + attn(ln1(x)), then + ffn(ln2(.))
int run_block(Tape& t, int x, const BlockLeaf& l, const Mat* mask, int heads) {
    int w = t.val(x).cols;
    int dh = w / heads;
    int y = t.layernorm(x, l.ln1_g, l.ln1_b);
    int q = t.add_bias(t.matmul(y, l.wq), l.bq);
    int k = t.add_bias(t.matmul(y, l.wk), l.bk);
    int v = t.add_bias(t.matmul(y, l.wv), l.bv);
    std::vector<int> ctx;
    for (int h = 0; h < heads; ++h) {
        int qh = heads == 1 ? q : t.slice_cols(q, h * dh, dh);
        int kh = heads == 1 ? k : t.slice_cols(k, h * dh, dh);
        int vh = heads == 1 ? v : t.slice_cols(v, h * dh, dh);
        int scores = t.scale(t.matmul_nt(qh, kh), 1.0 / std::sqrt(double(dh)));
        if (mask) scores = t.add_const(scores, *mask);
        int p = t.softmax_rows(scores);
        ctx.push_back(t.matmul(p, vh));
    }
    int c = heads == 1 ? ctx[0] : t.concat_cols(ctx);
    int attn_out = t.add_bias(t.matmul(c, l.wo), l.bo);
    int h1 = t.add(x, attn_out);
    int y2 = t.layernorm(h1, l.ln2_g, l.ln2_b);
    int f1 = t.gelu(t.add_bias(t.matmul(y2, l.w1), l.b1));
    int f2 = t.add_bias(t.matmul(f1, l.w2), l.b2);
    return t.add(h1, f2);
}

struct TextLeaf {
    int tok_emb, pos_emb;
    std::vector<BlockLeaf> blocks;
    int ln_f_g, ln_f_b, proj_w, proj_b;
};

TextLeaf leaf_text(Tape& t, const TextEncoderParams& p, bool ng) {
    TextLeaf l;
    l.tok_emb = t.leaf(p.tok_emb, ng);
    l.pos_emb = t.leaf(p.pos_emb, ng);
    for (const auto& b : p.blocks) l.blocks.push_back(leaf_block(t, b, ng));
    l.ln_f_g = t.leaf(p.ln_f_g, ng);
    l.ln_f_b = t.leaf(p.ln_f_b, ng);
    l.proj_w = t.leaf(p.proj_w, ng);
    l.proj_b = t.leaf(p.proj_b, ng);
    return l;
}

// full 2D-dim text output node (unnormalized)
int build_text(Tape& t, const AlignmentModel& m, const TextLeaf& l,
               const std::vector<int>& ids) {
    check(static_cast<int>(ids.size()) == m.cfg.max_len, ErrorKind::data,
          "encode_text: ids length must equal max_len");
    int x = t.add(t.embed(l.tok_emb, ids), l.pos_emb);
    // PAD positions never serve as attention keys
    int L = m.cfg.max_len;
    Mat mask(L, L);
    for (int j = 0; j < L; ++j)
        if (ids[j] == Tokenizer::PAD)
            for (int i = 0; i < L; ++i) mask.at(i, j) = -1e9;
    for (const auto& bl : l.blocks) x = run_block(t, x, bl, &mask, m.cfg.heads);
    x = t.layernorm(x, l.ln_f_g, l.ln_f_b);
    int eos = t.slice_rows(x, Tokenizer::eos_position(ids), 1);
    return t.add_bias(t.matmul(eos, l.proj_w), l.proj_b);
}

struct VisionLeaf {
    std::vector<BlockLeaf> blocks;
};

VisionLeaf leaf_vision(Tape& t, const AlignmentModel& m, bool ng) {
    VisionLeaf l;
    for (const auto& b : m.vision_blocks) l.blocks.push_back(leaf_block(t, b, ng));
    return l;
}

// returns node with [cls; patches] after the vision blocks
int build_vision(Tape& t, const AlignmentModel& m, const VisionLeaf& l,
                 const FeatureGrid& grid) {
    check(grid.dim() == m.cfg.dim, ErrorKind::data,
          "vision_forward: grid dim != model dim");
    int n = grid.patches.rows;
    Mat tokens(1 + n, m.cfg.dim);
    std::copy(grid.cls.begin(), grid.cls.end(), tokens.row(0));
    std::copy(grid.patches.d.begin(), grid.patches.d.end(), tokens.row(1));
    int x = t.leaf(tokens, false);
    for (const auto& bl : l.blocks) x = run_block(t, x, bl, nullptr, m.cfg.heads);
    return x;
}

int build_pool(Tape& t, int tokens, int n_patches, Pooling mode) {
    int c = t.slice_rows(tokens, 0, 1);
    int p = t.slice_rows(tokens, 1, n_patches);
    switch (mode) {
        case Pooling::CLS: return c;
        case Pooling::AVG: return t.mean_rows(p);
        case Pooling::MAX: return t.max_rows(p);
        case Pooling::CLS_AVG: return t.concat_cols({c, t.mean_rows(p)});
        case Pooling::CLS_MAX: return t.concat_cols({c, t.max_rows(p)});
    }
    throw Error(ErrorKind::usage, "bad pooling mode");
}

int normalize_desc(Tape& t, int g, const ModelConfig& cfg) {
    int d = t.val(g).cols;
    if (cfg.per_half_norm && d == 2 * cfg.dim) {
        int a = t.l2norm_rows(t.slice_cols(g, 0, cfg.dim));
        int b = t.l2norm_rows(t.slice_cols(g, cfg.dim, cfg.dim));
        g = t.concat_cols({a, b});
    }
    return t.l2norm_rows(g);
}

int build_image_descriptor(Tape& t, const AlignmentModel& m, const VisionLeaf& l,
                           const FeatureGrid& grid) {
    int x = build_vision(t, m, l, grid);
    int g = build_pool(t, x, grid.patches.rows, m.cfg.pooling);
    return normalize_desc(t, g, m.cfg);
}

int build_text_descriptor(Tape& t, const AlignmentModel& m, const TextLeaf& l,
                          const std::vector<int>& ids) {
    int full = build_text(t, m, l, ids);
    int d = pooled_dim(m.cfg.pooling, m.cfg.dim);
    // single-width pooling compares against the first D text dims
    if (d < t.val(full).cols) full = t.slice_cols(full, 0, d);
    return normalize_desc(t, full, m.cfg);
}

Vec row_to_vec(const Mat& m, int r = 0) {
    return Vec(m.row(r), m.row(r) + m.cols);
}

}  // namespace

TextEmbedding encode_text(const AlignmentModel& m, const std::vector<int>& ids) {
    Tape t;
    TextLeaf l = leaf_text(t, m.text, false);
    int out = build_text(t, m, l, ids);
    return TextEmbedding{row_to_vec(t.val(out))};
}

void vision_forward(const AlignmentModel& m, const FeatureGrid& grid, Vec& cls_out,
                    Mat& patches_out) {
    Tape t;
    VisionLeaf l = leaf_vision(t, m, false);
    int x = build_vision(t, m, l, grid);
    const Mat& v = t.val(x);
    cls_out = row_to_vec(v, 0);
    patches_out = Mat(grid.patches.rows, m.cfg.dim);
    std::copy(v.row(1), v.row(1) + patches_out.d.size(), patches_out.d.begin());
}

Vec pool(const Vec& cls, const Mat& patches, Pooling mode) {
    Tape t;
    Mat tokens(1 + patches.rows, static_cast<int>(cls.size()));
    std::copy(cls.begin(), cls.end(), tokens.row(0));
    std::copy(patches.d.begin(), patches.d.end(), tokens.row(1));
    int x = t.leaf(tokens, false);
    return row_to_vec(t.val(build_pool(t, x, patches.rows, mode)));
}

void pool_gradients(Pooling mode, const Vec& cls, const Mat& patches,
                    const Vec& upstream, Vec& d_cls, Mat& d_patches) {
    Tape t;
    Mat tokens(1 + patches.rows, static_cast<int>(cls.size()));
    std::copy(cls.begin(), cls.end(), tokens.row(0));
    std::copy(patches.d.begin(), patches.d.end(), tokens.row(1));
    int x = t.leaf(tokens, true);
    int g = build_pool(t, x, patches.rows, mode);
    check(t.val(g).cols == static_cast<int>(upstream.size()), ErrorKind::data,
          "pool_gradients: upstream width mismatch");
    std::copy(upstream.begin(), upstream.end(), t.grad(g).row(0));
    t.backward();
    const Mat& gx = t.grad(x);
    d_cls = Vec(gx.row(0), gx.row(0) + gx.cols);
    d_patches = Mat(patches.rows, gx.cols);
    std::copy(gx.row(1), gx.row(1) + d_patches.d.size(), d_patches.d.begin());
}

Vec image_descriptor(const AlignmentModel& m, const FeatureGrid& grid) {
    Tape t;
    VisionLeaf l = leaf_vision(t, m, false);
    return row_to_vec(t.val(build_image_descriptor(t, m, l, grid)));
}

Vec text_descriptor(const AlignmentModel& m, const std::vector<int>& ids) {
    Tape t;
    TextLeaf l = leaf_text(t, m.text, false);
    return row_to_vec(t.val(build_text_descriptor(t, m, l, ids)));
}

namespace {

double batch_pass(AlignmentModel& m, const Batch& batch, Gradients* grads) {
    size_t b = batch.grids.size();
    check(b >= 1 && b == batch.token_ids.size(), ErrorKind::data,
          "batch must be non-empty and paired");
    bool ng = grads != nullptr;

    struct SampleTape {
        Tape tape;
        VisionLeaf vl;
        TextLeaf tl;
        int g_node = -1;
        int t_node = -1;
    };
    std::vector<SampleTape> tapes(b);
    for (size_t i = 0; i < b; ++i) {
        auto& st = tapes[i];
        st.vl = leaf_vision(st.tape, m, ng);
        st.tl = leaf_text(st.tape, m.text, ng);
        st.g_node = build_image_descriptor(st.tape, m, st.vl, *batch.grids[i]);
        st.t_node = build_text_descriptor(st.tape, m, st.tl, batch.token_ids[i]);
    }
    int d = pooled_dim(m.cfg.pooling, m.cfg.dim);
    Mat img(static_cast<int>(b), d), txt(static_cast<int>(b), d);
    for (size_t i = 0; i < b; ++i) {
        const Mat& gv = tapes[i].tape.val(tapes[i].g_node);
        const Mat& tv = tapes[i].tape.val(tapes[i].t_node);
        std::copy_n(gv.row(0), d, img.row(static_cast<int>(i)));
        std::copy_n(tv.row(0), d, txt.row(static_cast<int>(i)));
    }
    auto res = contrastive_loss(img, txt, m.log_temperature.at(0, 0), ng);
    if (!ng) return res.loss;

    auto refs = param_refs(m);
    grads->tensors.clear();
    for (auto& [name, p] : refs) grads->tensors.emplace_back(p->rows, p->cols);

    // per-sample backward, accumulated in sample order (thread-count neutral)
    for (size_t i = 0; i < b; ++i) {
        auto& st = tapes[i];
        Mat& gg = st.tape.grad(st.g_node);
        Mat& gt = st.tape.grad(st.t_node);
        std::copy_n(res.d_img.row(static_cast<int>(i)), d, gg.row(0));
        std::copy_n(res.d_txt.row(static_cast<int>(i)), d, gt.row(0));
        st.tape.backward();

        std::vector<Mat*> dst;
        for (auto& mat : grads->tensors) dst.push_back(&mat);
        // leaves were created in param_refs order minus log_temperature:
        // vision blocks come after text in the registry but were leafed first
        size_t n_text = 2 + 16 * m.text.blocks.size() + 4;
        size_t n_vision = 16 * m.vision_blocks.size();
        std::vector<Mat*> text_dst(dst.begin(), dst.begin() + n_text);
        std::vector<Mat*> vision_dst(dst.begin() + n_text, dst.begin() + n_text + n_vision);
        // vision grads
        {
            std::vector<Mat*> v = vision_dst;
            for (auto& bl : st.vl.blocks) collect_block_grads(st.tape, bl, v);
        }
        // text grads
        {
            std::vector<Mat*> v = text_dst;
            for (int id : {st.tl.tok_emb, st.tl.pos_emb}) {
                Mat& g = st.tape.grad(id);
                Mat* dd = v.front();
                v.erase(v.begin());
                for (size_t j = 0; j < g.d.size(); ++j) dd->d[j] += g.d[j];
            }
            for (auto& bl : st.tl.blocks) collect_block_grads(st.tape, bl, v);
            for (int id : {st.tl.ln_f_g, st.tl.ln_f_b, st.tl.proj_w, st.tl.proj_b}) {
                Mat& g = st.tape.grad(id);
                Mat* dd = v.front();
                v.erase(v.begin());
                for (size_t j = 0; j < g.d.size(); ++j) dd->d[j] += g.d[j];
            }
        }
    }
    grads->tensors.back().at(0, 0) = res.d_log_temp;  // log_temperature is last
    return res.loss;
}

}  // namespace

double forward_loss(AlignmentModel& m, const Batch& batch) {
    return batch_pass(m, batch, nullptr);
}

double forward_backward(AlignmentModel& m, const Batch& batch, Gradients& grads) {
    return batch_pass(m, batch, &grads);
}

std::vector<double> train(AlignmentModel& m, const std::vector<TrainSample>& data,
                          const TrainConfig& cfg) {
    check(!data.empty(), ErrorKind::data, "train: empty dataset");
    std::vector<std::vector<int>> tokens;
    tokens.reserve(data.size());
    for (const auto& s : data) tokens.push_back(m.tokenizer.tokenize(s.caption));

    auto refs = param_refs(m);
    std::vector<Mat> adam_m, adam_v;
    for (auto& [name, p] : refs) {
        adam_m.emplace_back(p->rows, p->cols);
        adam_v.emplace_back(p->rows, p->cols);
    }
    const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int warmup = static_cast<int>(std::lround(cfg.warmup_frac * cfg.steps));

    std::vector<size_t> order(data.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    size_t cursor = order.size();  // force initial shuffle
    uint64_t epoch = 0;

    size_t bsz = std::min<size_t>(cfg.batch_size, data.size());
    std::vector<double> trace;
    trace.reserve(cfg.steps);
    Gradients grads;
    for (int step = 1; step <= cfg.steps; ++step) {
        if (cursor + bsz > order.size()) {
            Rng rng(hash_combine(hash_combine(cfg.seed, 0x7261157fULL), epoch++));
            rng.shuffle(order);
            cursor = 0;
        }
        Batch batch;
        for (size_t i = 0; i < bsz; ++i) {
            size_t idx = order[cursor + i];
            batch.grids.push_back(&data[idx].grid);
            batch.token_ids.push_back(tokens[idx]);
        }
        cursor += bsz;

        double loss = forward_backward(m, batch, grads);
        trace.push_back(loss);

        double lr;
        if (step <= warmup && warmup > 0) {
            lr = cfg.lr * static_cast<double>(step) / warmup;
        } else {
            double prog = warmup >= cfg.steps
                              ? 1.0
                              : static_cast<double>(step - warmup) /
                                    static_cast<double>(cfg.steps - warmup);
            lr = cfg.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * prog));
        }
        double bc1 = 1.0 - std::pow(beta1, step);
        double bc2 = 1.0 - std::pow(beta2, step);
        for (size_t t = 0; t < refs.size(); ++t) {
            Mat* p = refs[t].second;
            bool decay = p->rows > 1;  // weight matrices and embeddings only
            const Mat& g = grads.tensors[t];
            for (size_t j = 0; j < p->d.size(); ++j) {
                double gj = g.d[j];
                adam_m[t].d[j] = beta1 * adam_m[t].d[j] + (1 - beta1) * gj;
                adam_v[t].d[j] = beta2 * adam_v[t].d[j] + (1 - beta2) * gj * gj;
                double mh = adam_m[t].d[j] / bc1;
                double vh = adam_v[t].d[j] / bc2;
                double upd = mh / (std::sqrt(vh) + eps);
                if (decay) upd += cfg.weight_decay * p->d[j];
                p->d[j] -= lr * upd;
            }
        }
        // exp(log_temperature) stays in [1, 100]
        double& lt = m.log_temperature.at(0, 0);
        lt = std::clamp(lt, 0.0, std::log(100.0));
    }
    return trace;
}

void save_model(const AlignmentModel& m, const std::string& path) {
    BinWriter w(path);
    w.magic("DTXM");
    w.u32(1);
    w.u32(static_cast<uint32_t>(m.cfg.dim));
    w.u32(static_cast<uint32_t>(m.cfg.text_dim));
    w.u32(static_cast<uint32_t>(m.cfg.max_len));
    w.u32(static_cast<uint32_t>(m.cfg.text_depth));
    w.u32(static_cast<uint32_t>(m.cfg.vision_depth));
    w.u32(static_cast<uint32_t>(m.cfg.heads));
    w.u32(static_cast<uint32_t>(m.cfg.pooling));
    w.u32(m.cfg.per_half_norm ? 1 : 0);
    w.u32(static_cast<uint32_t>(m.tokenizer.n_hash_buckets));
    w.u32(static_cast<uint32_t>(m.tokenizer.words.size()));
    for (const auto& word : m.tokenizer.words) w.str(word);

    auto refs = param_refs(const_cast<AlignmentModel&>(m));
    w.u32(static_cast<uint32_t>(refs.size()));
    for (auto& [name, p] : refs) {
        w.str(name);
        w.u32(2);
        w.u32(static_cast<uint32_t>(p->rows));
        w.u32(static_cast<uint32_t>(p->cols));
        w.f32s(p->d.data(), p->d.size());
    }
    w.close();
}

AlignmentModel load_model(const std::string& path) {
    BinReader r(path);
    r.expect_magic("DTXM");
    r.expect_version(1);
    ModelConfig cfg;
    cfg.dim = static_cast<int>(r.u32());
    cfg.text_dim = static_cast<int>(r.u32());
    cfg.max_len = static_cast<int>(r.u32());
    cfg.text_depth = static_cast<int>(r.u32());
    cfg.vision_depth = static_cast<int>(r.u32());
    cfg.heads = static_cast<int>(r.u32());
    cfg.pooling = static_cast<Pooling>(r.u32());
    cfg.per_half_norm = r.u32() != 0;
    Tokenizer tok;
    tok.max_len = cfg.max_len;
    tok.n_hash_buckets = static_cast<int>(r.u32());
    uint32_t n_words = r.u32();
    for (uint32_t i = 0; i < n_words; ++i) {
        std::string word = r.str();
        tok.lookup[word] = 3 + static_cast<int>(tok.words.size());
        tok.words.push_back(word);
    }
    AlignmentModel m = AlignmentModel::init(cfg, tok, 0);
    auto refs = param_refs(m);
    std::map<std::string, Mat*> by_name;
    for (auto& [name, p] : refs) by_name[name] = p;
    uint32_t n_tensors = r.u32();
    for (uint32_t i = 0; i < n_tensors; ++i) {
        std::string name = r.str();
        uint32_t rank = r.u32();
        check(rank == 2, ErrorKind::data, path + ": unexpected tensor rank");
        uint32_t rows = r.u32(), cols = r.u32();
        auto it = by_name.find(name);
        check(it != by_name.end(), ErrorKind::data, path + ": unknown tensor " + name);
        if (static_cast<int>(rows) != it->second->rows ||
            static_cast<int>(cols) != it->second->cols)
            throw FileFormatError(FormatError::dim_mismatch,
                                  path + ": tensor shape mismatch for " + name);
        r.f32s(it->second->d.data(), it->second->d.size());
    }
    return m;
}

}  // namespace dtx
