#pragma once

#include <functional>
#include <vector>

#include "dtx/core.hpp"

namespace dtx {

// C += A(n,k) * B(k,m)
void gemm_nn(Mat& c, const Mat& a, const Mat& b);
// C += A(n,k) * B(m,k)^T
void gemm_nt(Mat& c, const Mat& a, const Mat& b);
// C += A(n,k)^T * B(n,m)
void gemm_tn(Mat& c, const Mat& a, const Mat& b);

// Symmetric InfoNCE over row-normalized descriptors. S = exp(log_temp) * I T^T;
// loss averages row- and column-wise cross-entropy against the diagonal.
struct ContrastiveResult {
    double loss = 0.0;
    Mat d_img;        // B x d
    Mat d_txt;        // B x d
    double d_log_temp = 0.0;
};
ContrastiveResult contrastive_loss(const Mat& img, const Mat& txt,
                                   double log_temp, bool want_grads = true);

// Minimal reverse-mode tape over the fixed operator set used by the
// alignment model. Node ids index into the tape; backward() walks the
// recording in reverse.
class Tape {
public:
    int leaf(const Mat& v, bool needs_grad);

    int matmul(int a, int b);       // (n,k)(k,m)
    int matmul_nt(int a, int b);    // (n,k)(m,k)^T
    int add(int a, int b);          // same shape
    int add_bias(int a, int bias);  // (n,m) + (1,m) broadcast
    int add_const(int a, const Mat& c);  // constant offset (attention mask)
    int scale(int a, double s);
    int gelu(int a);
    int layernorm(int x, int gamma, int beta);  // per row, eps 1e-5
    int softmax_rows(int a);
    int slice_cols(int a, int start, int len);
    int slice_rows(int a, int start, int len);
    int concat_cols(const std::vector<int>& parts);
    int stack_rows(const std::vector<int>& rows);  // each (1,m)
    int embed(int table, const std::vector<int>& ids);
    int mean_rows(int a);
    int max_rows(int a);            // ties to lowest row index
    int l2norm_rows(int a);

    const Mat& val(int id) const { return nodes_[id].val; }
    Mat& grad(int id) {
        auto& n = nodes_[id];
        if (n.grad.rows == 0) n.grad = Mat(n.val.rows, n.val.cols);
        return n.grad;
    }

    // Runs every recorded backward step in reverse order; callers seed
    // output gradients via grad(id) beforehand.
    void backward();

private:
    struct Node {
        Mat val;
        Mat grad;  // lazily allocated
        std::function<void()> back;
        bool needs_grad = false;
    };
    std::vector<Node> nodes_;

    int push(Mat v, bool needs_grad, std::function<void()> back);
    bool wants(int id) const { return nodes_[id].needs_grad; }
};

}  // namespace dtx
