#include "dtx/tape.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace dtx {

void gemm_nn(Mat& c, const Mat& a, const Mat& b) {
    int n = a.rows, k = a.cols, m = b.cols;
    for (int i = 0; i < n; ++i) {
        double* ci = c.row(i);
        const double* ai = a.row(i);
        for (int kk = 0; kk < k; ++kk) {
            double av = ai[kk];
            if (av == 0.0) continue;
            const double* bk = b.row(kk);
            for (int j = 0; j < m; ++j) ci[j] += av * bk[j];
        }
    }
}

void gemm_nt(Mat& c, const Mat& a, const Mat& b) {
    int n = a.rows, k = a.cols, m = b.rows;
    for (int i = 0; i < n; ++i) {
        double* ci = c.row(i);
        const double* ai = a.row(i);
        for (int j = 0; j < m; ++j) {
            const double* bj = b.row(j);
            double s = 0.0;
            for (int kk = 0; kk < k; ++kk) s += ai[kk] * bj[kk];
            ci[j] += s;
        }
    }
}

void gemm_tn(Mat& c, const Mat& a, const Mat& b) {
    int n = a.rows, k = a.cols, m = b.cols;
    for (int i = 0; i < n; ++i) {
        const double* ai = a.row(i);
        const double* bi = b.row(i);
        for (int kk = 0; kk < k; ++kk) {
            double av = ai[kk];
            if (av == 0.0) continue;
            double* ck = c.row(kk);
            for (int j = 0; j < m; ++j) ck[j] += av * bi[j];
        }
    }
}

ContrastiveResult contrastiveResult_impl(const Mat& img, const Mat& txt,
                                         double log_temp, bool want_grads) {
    check(img.cols == txt.cols, ErrorKind::data,
          "contrastive_loss: descriptor dim mismatch");
    check(img.rows == txt.rows && img.rows >= 1, ErrorKind::data,
          "contrastive_loss: batch size mismatch");
    int b = img.rows;
    double t = std::exp(log_temp);
    Mat s(b, b);
    gemm_nt(s, img, txt);
    for (auto& v : s.d) v *= t;

    // row-wise and column-wise softmax cross-entropy against the diagonal
    Mat p(b, b), q(b, b);
    double loss = 0.0;
    for (int i = 0; i < b; ++i) {
        const double* si = s.row(i);
        double mx = *std::max_element(si, si + b);
        double z = 0.0;
        for (int j = 0; j < b; ++j) z += std::exp(si[j] - mx);
        for (int j = 0; j < b; ++j) p.at(i, j) = std::exp(si[j] - mx) / z;
        loss += -(si[i] - mx) + std::log(z);
    }
    for (int j = 0; j < b; ++j) {
        double mx = s.at(0, j);
        for (int i = 1; i < b; ++i) mx = std::max(mx, s.at(i, j));
        double z = 0.0;
        for (int i = 0; i < b; ++i) z += std::exp(s.at(i, j) - mx);
        for (int i = 0; i < b; ++i) q.at(i, j) = std::exp(s.at(i, j) - mx) / z;
        loss += -(s.at(j, j) - mx) + std::log(z);
    }
    ContrastiveResult res;
    res.loss = loss / (2.0 * b);
    if (!want_grads) return res;

    // dL/dS = ((P - I) + (Q - I)) / (2B)
    Mat g(b, b);
    for (int i = 0; i < b; ++i)
        for (int j = 0; j < b; ++j)
            g.at(i, j) = (p.at(i, j) + q.at(i, j) - 2.0 * (i == j)) / (2.0 * b);

    res.d_img = Mat(b, img.cols);
    res.d_txt = Mat(b, txt.cols);
    // S = t * I T^T
    Mat gt(b, b);
    for (int i = 0; i < b; ++i)
        for (int j = 0; j < b; ++j) gt.at(i, j) = g.at(j, i);
    gemm_nn(res.d_img, g, txt);
    gemm_nn(res.d_txt, gt, img);
    for (auto& v : res.d_img.d) v *= t;
    for (auto& v : res.d_txt.d) v *= t;
    res.d_log_temp = 0.0;
    for (size_t i = 0; i < g.d.size(); ++i) res.d_log_temp += g.d[i] * s.d[i];
    return res;
}

ContrastiveResult contrastive_loss(const Mat& img, const Mat& txt,
                                   double log_temp, bool want_grads) {
    return contrastiveResult_impl(img, txt, log_temp, want_grads);
}

int Tape::push(Mat v, bool needs_grad, std::function<void()> back) {
    nodes_.push_back({std::move(v), Mat(), std::move(back), needs_grad});
    return static_cast<int>(nodes_.size()) - 1;
}

int Tape::leaf(const Mat& v, bool needs_grad) {
    return push(v, needs_grad, nullptr);
}

int Tape::matmul(int a, int b) {
    const Mat &av = nodes_[a].val, &bv = nodes_[b].val;
    check(av.cols == bv.rows, ErrorKind::data, "matmul shape mismatch");
    Mat out(av.rows, bv.cols);
    gemm_nn(out, av, bv);
    int id = push(std::move(out), wants(a) || wants(b), nullptr);
    nodes_[id].back = [this, id, a, b]() {
        const Mat& go = grad(id);
        if (wants(a)) gemm_nt(grad(a), go, nodes_[b].val);
        if (wants(b)) gemm_tn(grad(b), nodes_[a].val, go);
    };
    return id;
}

int Tape::matmul_nt(int a, int b) {
    const Mat &av = nodes_[a].val, &bv = nodes_[b].val;
    check(av.cols == bv.cols, ErrorKind::data, "matmul_nt shape mismatch");
    Mat out(av.rows, bv.rows);
    gemm_nt(out, av, bv);
    int id = push(std::move(out), wants(a) || wants(b), nullptr);
    nodes_[id].back = [this, id, a, b]() {
        const Mat& go = grad(id);
        if (wants(a)) gemm_nn(grad(a), go, nodes_[b].val);
        if (wants(b)) gemm_tn(grad(b), go, nodes_[a].val);
    };
    return id;
}

int Tape::add(int a, int b) {
    const Mat &av = nodes_[a].val, &bv = nodes_[b].val;
    check(av.rows == bv.rows && av.cols == bv.cols, ErrorKind::data,
          "add shape mismatch");
    Mat out = av;
    for (size_t i = 0; i < out.d.size(); ++i) out.d[i] += bv.d[i];
    int id = push(std::move(out), wants(a) || wants(b), nullptr);
    nodes_[id].back = [this, id, a, b]() {
        const Mat& go = grad(id);
        if (wants(a)) {
            Mat& ga = grad(a);
            for (size_t i = 0; i < go.d.size(); ++i) ga.d[i] += go.d[i];
        }
        if (wants(b)) {
            Mat& gb = grad(b);
            for (size_t i = 0; i < go.d.size(); ++i) gb.d[i] += go.d[i];
        }
    };
    return id;
}

int Tape::add_bias(int a, int bias) {
    const Mat &av = nodes_[a].val, &bv = nodes_[bias].val;
    check(bv.rows == 1 && bv.cols == av.cols, ErrorKind::data,
          "add_bias shape mismatch");
    Mat out = av;
    for (int i = 0; i < out.rows; ++i)
        for (int j = 0; j < out.cols; ++j) out.at(i, j) += bv.at(0, j);
    int id = push(std::move(out), wants(a) || wants(bias), nullptr);
    nodes_[id].back = [this, id, a, bias]() {
        const Mat& go = grad(id);
        if (wants(a)) {
            Mat& ga = grad(a);
            for (size_t i = 0; i < go.d.size(); ++i) ga.d[i] += go.d[i];
        }
        if (wants(bias)) {
            Mat& gb = grad(bias);
            for (int i = 0; i < go.rows; ++i)
                for (int j = 0; j < go.cols; ++j) gb.at(0, j) += go.at(i, j);
        }
    };
    return id;
}

int Tape::add_const(int a, const Mat& c) {
    const Mat& av = nodes_[a].val;
    check(av.rows == c.rows && av.cols == c.cols, ErrorKind::data,
          "add_const shape mismatch");
    Mat out = av;
    for (size_t i = 0; i < out.d.size(); ++i) out.d[i] += c.d[i];
    int id = push(std::move(out), wants(a), nullptr);
    nodes_[id].back = [this, id, a]() {
        if (!wants(a)) return;
        const Mat& go = grad(id);
        Mat& ga = grad(a);
        for (size_t i = 0; i < go.d.size(); ++i) ga.d[i] += go.d[i];
    };
    return id;
}

int Tape::scale(int a, double s) {
    Mat out = nodes_[a].val;
    for (auto& v : out.d) v *= s;
    int id = push(std::move(out), wants(a), nullptr);
    nodes_[id].back = [this, id, a, s]() {
        if (!wants(a)) return;
        const Mat& go = grad(id);
        Mat& ga = grad(a);
        for (size_t i = 0; i < go.d.size(); ++i) ga.d[i] += s * go.d[i];
    };
    return id;
}

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
}  // namespace

int Tape::gelu(int a) {
    const Mat& av = nodes_[a].val;
    Mat out(av.rows, av.cols);
    for (size_t i = 0; i < av.d.size(); ++i) {
        double x = av.d[i];
        out.d[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
    }
    int id = push(std::move(out), wants(a), nullptr);
    nodes_[id].back = [this, id, a]() {
        if (!wants(a)) return;
        const Mat& go = grad(id);
        Mat& ga = grad(a);
        const Mat& av2 = nodes_[a].val;
        for (size_t i = 0; i < go.d.size(); ++i) {
            double x = av2.d[i];
            double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
            ga.d[i] += go.d[i] * (cdf + x * pdf);
        }
    };
    return id;
}

int Tape::layernorm(int x, int gamma, int beta) {
    const Mat& xv = nodes_[x].val;
    const Mat& gv = nodes_[gamma].val;
    const Mat& bv = nodes_[beta].val;
    check(gv.rows == 1 && gv.cols == xv.cols && bv.rows == 1 && bv.cols == xv.cols,
          ErrorKind::data, "layernorm shape mismatch");
    const double eps = 1e-5;
    int n = xv.rows, m = xv.cols;
    Mat out(n, m);
    // normalized activations and 1/sigma per row, kept for backward
    auto xhat = std::make_shared<Mat>(n, m);
    auto rsig = std::make_shared<std::vector<double>>(n);
    for (int i = 0; i < n; ++i) {
        const double* xi = xv.row(i);
        double mu = 0.0;
        for (int j = 0; j < m; ++j) mu += xi[j];
        mu /= m;
        double var = 0.0;
        for (int j = 0; j < m; ++j) {
            double t = xi[j] - mu;
            var += t * t;
        }
        var /= m;
        double rs = 1.0 / std::sqrt(var + eps);
        (*rsig)[i] = rs;
        for (int j = 0; j < m; ++j) {
            double xh = (xi[j] - mu) * rs;
            xhat->at(i, j) = xh;
            out.at(i, j) = gv.at(0, j) * xh + bv.at(0, j);
        }
    }
    int id = push(std::move(out), wants(x) || wants(gamma) || wants(beta), nullptr);
    nodes_[id].back = [this, id, x, gamma, beta, xhat, rsig]() {
        const Mat& go = grad(id);
        const Mat& gv2 = nodes_[gamma].val;
        int n2 = go.rows, m2 = go.cols;
        if (wants(gamma)) {
            Mat& gg = grad(gamma);
            for (int i = 0; i < n2; ++i)
                for (int j = 0; j < m2; ++j)
                    gg.at(0, j) += go.at(i, j) * xhat->at(i, j);
        }
        if (wants(beta)) {
            Mat& gb = grad(beta);
            for (int i = 0; i < n2; ++i)
                for (int j = 0; j < m2; ++j) gb.at(0, j) += go.at(i, j);
        }
        if (wants(x)) {
            Mat& gx = grad(x);
            for (int i = 0; i < n2; ++i) {
                double s1 = 0.0, s2 = 0.0;
                for (int j = 0; j < m2; ++j) {
                    double dy = go.at(i, j) * gv2.at(0, j);
                    s1 += dy;
                    s2 += dy * xhat->at(i, j);
                }
                s1 /= m2;
                s2 /= m2;
                double rs = (*rsig)[i];
                for (int j = 0; j < m2; ++j) {
                    double dy = go.at(i, j) * gv2.at(0, j);
                    gx.at(i, j) += rs * (dy - s1 - xhat->at(i, j) * s2);
                }
            }
        }
    };
    return id;
}

int Tape::softmax_rows(int a) {
    const Mat& av = nodes_[a].val;
    Mat out(av.rows, av.cols);
    for (int i = 0; i < av.rows; ++i) {
        const double* xi = av.row(i);
        double mx = *std::max_element(xi, xi + av.cols);
        double z = 0.0;
        for (int j = 0; j < av.cols; ++j) z += std::exp(xi[j] - mx);
        for (int j = 0; j < av.cols; ++j) out.at(i, j) = std::exp(xi[j] - mx) / z;
    }
    int id = push(std::move(out), wants(a), nullptr);
    nodes_[id].back = [this, id, a]() {
        if (!wants(a)) return;
        const Mat& go = grad(id);
        const Mat& s = nodes_[id].val;
        Mat& ga = grad(a);
        for (int i = 0; i < s.rows; ++i) {
            double dotv = 0.0;
            for (int j = 0; j < s.cols; ++j) dotv += go.at(i, j) * s.at(i, j);
            for (int j = 0; j < s.cols; ++j)
                ga.at(i, j) += s.at(i, j) * (go.at(i, j) - dotv);
        }
    };
    return id;
}

int Tape::slice_cols(int a, int start, int len) {
    const Mat& av = nodes_[a].val;
    check(start >= 0 && start + len <= av.cols, ErrorKind::data,
          "slice_cols out of range");
    Mat out(av.rows, len);
    for (int i = 0; i < av.rows; ++i)
        std::copy_n(av.row(i) + start, len, out.row(i));
    int id = push(std::move(out), wants(a), nullptr);
    nodes_[id].back = [this, id, a, start, len]() {
        if (!wants(a)) return;
        const Mat& go = grad(id);
        Mat& ga = grad(a);
        for (int i = 0; i < go.rows; ++i)
            for (int j = 0; j < len; ++j) ga.at(i, start + j) += go.at(i, j);
    };
    return id;
}

int Tape::slice_rows(int a, int start, int len) {
    const Mat& av = nodes_[a].val;
    check(start >= 0 && start + len <= av.rows, ErrorKind::data,
          "slice_rows out of range");
    Mat out(len, av.cols);
    for (int i = 0; i < len; ++i) std::copy_n(av.row(start + i), av.cols, out.row(i));
    int id = push(std::move(out), wants(a), nullptr);
    nodes_[id].back = [this, id, a, start, len]() {
        if (!wants(a)) return;
        const Mat& go = grad(id);
        Mat& ga = grad(a);
        for (int i = 0; i < len; ++i)
            for (int j = 0; j < go.cols; ++j) ga.at(start + i, j) += go.at(i, j);
    };
    return id;
}

int Tape::concat_cols(const std::vector<int>& parts) {
    check(!parts.empty(), ErrorKind::data, "concat_cols: empty");
    int rows = nodes_[parts[0]].val.rows;
    int total = 0;
    bool ng = false;
    for (int p : parts) {
        check(nodes_[p].val.rows == rows, ErrorKind::data, "concat_cols row mismatch");
        total += nodes_[p].val.cols;
        ng = ng || wants(p);
    }
    Mat out(rows, total);
    int off = 0;
    for (int p : parts) {
        const Mat& pv = nodes_[p].val;
        for (int i = 0; i < rows; ++i) std::copy_n(pv.row(i), pv.cols, out.row(i) + off);
        off += pv.cols;
    }
    auto parts_copy = parts;
    int id = push(std::move(out), ng, nullptr);
    nodes_[id].back = [this, id, parts_copy]() {
        const Mat& go = grad(id);
        int off2 = 0;
        for (int p : parts_copy) {
            const Mat& pv = nodes_[p].val;
            if (wants(p)) {
                Mat& gp = grad(p);
                for (int i = 0; i < go.rows; ++i)
                    for (int j = 0; j < pv.cols; ++j)
                        gp.at(i, j) += go.at(i, off2 + j);
            }
            off2 += pv.cols;
        }
    };
    return id;
}

int Tape::stack_rows(const std::vector<int>& rows) {
    check(!rows.empty(), ErrorKind::data, "stack_rows: empty");
    int cols = nodes_[rows[0]].val.cols;
    bool ng = false;
    for (int r : rows) {
        check(nodes_[r].val.rows == 1 && nodes_[r].val.cols == cols, ErrorKind::data,
              "stack_rows: parts must be 1 x m");
        ng = ng || wants(r);
    }
    Mat out(static_cast<int>(rows.size()), cols);
    for (size_t i = 0; i < rows.size(); ++i)
        std::copy_n(nodes_[rows[i]].val.row(0), cols, out.row(static_cast<int>(i)));
    auto rows_copy = rows;
    int id = push(std::move(out), ng, nullptr);
    nodes_[id].back = [this, id, rows_copy]() {
        const Mat& go = grad(id);
        for (size_t i = 0; i < rows_copy.size(); ++i) {
            if (!wants(rows_copy[i])) continue;
            Mat& gr = grad(rows_copy[i]);
            for (int j = 0; j < go.cols; ++j)
                gr.at(0, j) += go.at(static_cast<int>(i), j);
        }
    };
    return id;
}

int Tape::embed(int table, const std::vector<int>& ids) {
    const Mat& tv = nodes_[table].val;
    Mat out(static_cast<int>(ids.size()), tv.cols);
    for (size_t i = 0; i < ids.size(); ++i) {
        check(ids[i] >= 0 && ids[i] < tv.rows, ErrorKind::data,
              "embed: token id out of range");
        std::copy_n(tv.row(ids[i]), tv.cols, out.row(static_cast<int>(i)));
    }
    auto ids_copy = ids;
    int id = push(std::move(out), wants(table), nullptr);
    nodes_[id].back = [this, id, table, ids_copy]() {
        if (!wants(table)) return;
        const Mat& go = grad(id);
        Mat& gt = grad(table);
        for (size_t i = 0; i < ids_copy.size(); ++i)
            for (int j = 0; j < go.cols; ++j)
                gt.at(ids_copy[i], j) += go.at(static_cast<int>(i), j);
    };
    return id;
}

int Tape::mean_rows(int a) {
    const Mat& av = nodes_[a].val;
    Mat out(1, av.cols);
    for (int i = 0; i < av.rows; ++i)
        for (int j = 0; j < av.cols; ++j) out.at(0, j) += av.at(i, j);
    for (auto& v : out.d) v /= av.rows;
    int id = push(std::move(out), wants(a), nullptr);
    int n = av.rows;
    nodes_[id].back = [this, id, a, n]() {
        if (!wants(a)) return;
        const Mat& go = grad(id);
        Mat& ga = grad(a);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < go.cols; ++j) ga.at(i, j) += go.at(0, j) / n;
    };
    return id;
}

int Tape::max_rows(int a) {
    const Mat& av = nodes_[a].val;
    Mat out(1, av.cols);
    auto arg = std::make_shared<std::vector<int>>(av.cols, 0);
    for (int j = 0; j < av.cols; ++j) {
        double best = av.at(0, j);
        int bi = 0;
        for (int i = 1; i < av.rows; ++i)
            if (av.at(i, j) > best) {
                best = av.at(i, j);
                bi = i;
            }
        out.at(0, j) = best;
        (*arg)[j] = bi;
    }
    int id = push(std::move(out), wants(a), nullptr);
    nodes_[id].back = [this, id, a, arg]() {
        if (!wants(a)) return;
        const Mat& go = grad(id);
        Mat& ga = grad(a);
        for (int j = 0; j < go.cols; ++j) ga.at((*arg)[j], j) += go.at(0, j);
    };
    return id;
}

int Tape::l2norm_rows(int a) {
    const Mat& av = nodes_[a].val;
    Mat out(av.rows, av.cols);
    auto norms = std::make_shared<std::vector<double>>(av.rows);
    for (int i = 0; i < av.rows; ++i) {
        double nrm = std::max(norm2(av.row(i), av.cols), 1e-12);
        (*norms)[i] = nrm;
        for (int j = 0; j < av.cols; ++j) out.at(i, j) = av.at(i, j) / nrm;
    }
    int id = push(std::move(out), wants(a), nullptr);
    nodes_[id].back = [this, id, a, norms]() {
        if (!wants(a)) return;
        const Mat& go = grad(id);
        const Mat& y = nodes_[id].val;
        Mat& ga = grad(a);
        for (int i = 0; i < go.rows; ++i) {
            double dotv = 0.0;
            for (int j = 0; j < go.cols; ++j) dotv += go.at(i, j) * y.at(i, j);
            double nrm = (*norms)[i];
            for (int j = 0; j < go.cols; ++j)
                ga.at(i, j) += (go.at(i, j) - y.at(i, j) * dotv) / nrm;
        }
    };
    return id;
}

void Tape::backward() {
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
        if (!nodes_[i].back || !nodes_[i].needs_grad) continue;
        if (nodes_[i].grad.rows == 0) continue;  // never touched downstream
        nodes_[i].back();
    }
}

}  // namespace dtx
