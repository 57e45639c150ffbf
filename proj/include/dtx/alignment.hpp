#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dtx/core.hpp"
#include "dtx/tape.hpp"

namespace dtx {

enum class Pooling { CLS = 0, AVG = 1, MAX = 2, CLS_MAX = 3, CLS_AVG = 4 };

Pooling pooling_from_string(const std::string& s);
std::string pooling_to_string(Pooling p);

// dim of the image descriptor g under a pooling mode
inline int pooled_dim(Pooling p, int d) {
    return (p == Pooling::CLS_MAX || p == Pooling::CLS_AVG) ? 2 * d : d;
}

struct Tokenizer {
    static constexpr int PAD = 0;
    static constexpr int BOS = 1;
    static constexpr int EOS = 2;

    std::vector<std::string> words;  // id = 3 + index
    std::unordered_map<std::string, int> lookup;
    int n_hash_buckets = 256;
    int max_len = 16;

    int vocab_size() const { return 3 + static_cast<int>(words.size()) + n_hash_buckets; }
    int word_id(const std::string& w) const;
    // lowercase whitespace tokens, EOS appended (always last), PAD fill
    std::vector<int> tokenize(const std::string& caption) const;
    // position of EOS in a tokenized sequence
    static int eos_position(const std::vector<int>& ids);

    static Tokenizer build(const std::vector<std::string>& captions, int max_len,
                           size_t max_words = 4096, int n_hash = 256);
};

// One pre-norm transformer block; width W, GELU feed-forward W -> 4W -> W.
struct BlockParams {
    Mat ln1_g, ln1_b;
    Mat wq, wk, wv, wo;  // W x W
    Mat bq, bk, bv, bo;  // 1 x W
    Mat ln2_g, ln2_b;
    Mat w1, b1;  // W x 4W, 1 x 4W
    Mat w2, b2;  // 4W x W, 1 x W
};

struct TextEncoderParams {
    Mat tok_emb;  // V x Dt
    Mat pos_emb;  // Lmax x Dt
    std::vector<BlockParams> blocks;
    Mat ln_f_g, ln_f_b;  // final pre-projection layernorm
    Mat proj_w;  // Dt x 2D
    Mat proj_b;  // 1 x 2D
};

struct ModelConfig {
    int dim = 64;           // vision dim D
    int text_dim = 64;      // Dt
    int max_len = 16;
    int text_depth = 1;
    int vision_depth = 2;
    int heads = 1;
    Pooling pooling = Pooling::CLS_AVG;
    bool per_half_norm = false;  // normalize the two halves of g independently first
};

struct AlignmentModel {
    ModelConfig cfg;
    Tokenizer tokenizer;
    TextEncoderParams text;
    std::vector<BlockParams> vision_blocks;
    Mat log_temperature;  // 1 x 1

    static AlignmentModel init(const ModelConfig& cfg, const Tokenizer& tok,
                               uint64_t seed);
};

// Ordered registry of every trainable tensor; the order is the contract for
// optimizer state, gradients, and checkpoints.
std::vector<std::pair<std::string, Mat*>> param_refs(AlignmentModel& m);

// --- forward paths ---

// text encoder: embeds, runs blocks with PAD keys masked, reads the EOS
// hidden state, projects to 2D. Output is not normalized.
TextEmbedding encode_text(const AlignmentModel& m, const std::vector<int>& ids);

// vision blocks over [cls; patches]; identity at depth 0
void vision_forward(const AlignmentModel& m, const FeatureGrid& grid, Vec& cls_out,
                    Mat& patches_out);

Vec pool(const Vec& cls, const Mat& patches, Pooling mode);

// Gradient routing at the pool boundary: given an upstream gradient on the
// pooled descriptor, returns the gradients reaching cls and each patch token.
void pool_gradients(Pooling mode, const Vec& cls, const Mat& patches,
                    const Vec& upstream, Vec& d_cls, Mat& d_patches);

// g for one image: vision_forward + pool + normalization convention
Vec image_descriptor(const AlignmentModel& m, const FeatureGrid& grid);

// text embedding projected to the loss width (first D dims for single-width
// pooling modes) and normalized
Vec text_descriptor(const AlignmentModel& m, const std::vector<int>& ids);

// --- training ---

struct Batch {
    std::vector<const FeatureGrid*> grids;
    std::vector<std::vector<int>> token_ids;
};

struct Gradients {
    std::vector<Mat> tensors;  // same order as param_refs
};

double forward_loss(AlignmentModel& m, const Batch& batch);
double forward_backward(AlignmentModel& m, const Batch& batch, Gradients& grads);

struct TrainConfig {
    int batch_size = 32;
    int steps = 500;
    double lr = 1e-3;
    double weight_decay = 0.1;
    double warmup_frac = 0.1;
    uint64_t seed = 0;
    int threads = 1;
};

struct TrainSample {
    FeatureGrid grid;
    std::string caption;
};

std::vector<double> train(AlignmentModel& m, const std::vector<TrainSample>& data,
                          const TrainConfig& cfg);

// DTXM checkpoint
void save_model(const AlignmentModel& m, const std::string& path);
AlignmentModel load_model(const std::string& path);

}  // namespace dtx
