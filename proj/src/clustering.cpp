#include "dtx/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "dtx/binio.hpp"
#include "dtx/parallel.hpp"
#include "dtx/rng.hpp"

namespace dtx {
namespace {

constexpr size_t kChunk = 1024;  // fixed reduction chunk, thread-count independent

double sq_dist(const double* a, const double* b, int d) {
    double s = 0.0;
    for (int i = 0; i < d; ++i) {
        double t = a[i] - b[i];
        s += t * t;
    }
    return s;
}

// Nearest centroid, ties broken by lowest index.
int nearest(const double* p, const Mat& centroids, double* out_d2) {
    int best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (int c = 0; c < centroids.rows; ++c) {
        double d2 = sq_dist(p, centroids.row(c), centroids.cols);
        if (d2 < bd) {
            bd = d2;
            best = c;
        }
    }
    if (out_d2) *out_d2 = bd;
    return best;
}

Mat init_kmeanspp(const Mat& pts, int k, Rng& rng) {
    int n = pts.rows, d = pts.cols;
    Mat centroids(k, d);
    std::vector<char> chosen(n, 0);
    int first = static_cast<int>(rng.below(static_cast<uint64_t>(n)));
    std::copy_n(pts.row(first), d, centroids.row(0));
    chosen[first] = 1;
    std::vector<double> d2(n);
    for (int i = 0; i < n; ++i) d2[i] = sq_dist(pts.row(i), centroids.row(0), d);
    for (int c = 1; c < k; ++c) {
        double total = std::accumulate(d2.begin(), d2.end(), 0.0);
        int pick = -1;
        if (total > 0.0) {
            double target = rng.uniform() * total;
            double acc = 0.0;
            for (int i = 0; i < n; ++i) {
                acc += d2[i];
                if (acc >= target) {
                    pick = i;
                    break;
                }
            }
            if (pick < 0) pick = n - 1;
        } else {
            // all remaining mass zero (duplicate points): lowest unchosen index
            for (int i = 0; i < n; ++i)
                if (!chosen[i]) {
                    pick = i;
                    break;
                }
            if (pick < 0) pick = 0;
        }
        std::copy_n(pts.row(pick), d, centroids.row(c));
        chosen[pick] = 1;
        for (int i = 0; i < n; ++i)
            d2[i] = std::min(d2[i], sq_dist(pts.row(i), centroids.row(c), d));
    }
    return centroids;
}

}  // namespace

KMeansResult kmeans_fit(const Mat& points, int k, uint64_t seed,
                        const KMeansOptions& opt) {
    int n = points.rows, d = points.cols;
    check(k >= 1, ErrorKind::data, "kmeans: k must be >= 1");
    check(k <= n, ErrorKind::data, "kmeans: k > number of points");

    const Mat* ppts = &points;
    Mat normed;
    if (opt.normalize) {
        normed = points;
        for (int i = 0; i < n; ++i) {
            double nn = norm2(normed.row(i), d);
            if (nn >= 1e-12)
                for (int j = 0; j < d; ++j) normed.row(i)[j] /= nn;
        }
        ppts = &normed;
    }
    const Mat& pts = *ppts;

    Rng rng(hash_combine(seed, 0x6b6d65616e73ULL));
    KMeansResult res;
    res.centroids = init_kmeanspp(pts, k, rng);
    res.assignment.assign(n, 0);

    size_t n_chunks = (static_cast<size_t>(n) + kChunk - 1) / kChunk;
    std::vector<double> chunk_inertia(n_chunks);

    auto assign_step = [&]() {
        std::fill(chunk_inertia.begin(), chunk_inertia.end(), 0.0);
        parallel_chunks(static_cast<size_t>(n), opt.threads, kChunk,
                        [&](size_t c, size_t b, size_t e) {
                            double acc = 0.0;
                            for (size_t i = b; i < e; ++i) {
                                double d2;
                                res.assignment[i] =
                                    nearest(pts.row(static_cast<int>(i)), res.centroids, &d2);
                                acc += d2;
                            }
                            chunk_inertia[c] = acc;
                        });
        double total = 0.0;
        for (double ci : chunk_inertia) total += ci;  // fixed merge order
        return total;
    };

    auto lloyd_iter = [&](double& inertia) {
        // centroid update with fixed-chunk deterministic reduction
        std::vector<Mat> sums(n_chunks);
        std::vector<std::vector<int>> cnts(n_chunks);
        parallel_chunks(static_cast<size_t>(n), opt.threads, kChunk,
                        [&](size_t c, size_t b, size_t e) {
                            sums[c] = Mat(k, d);
                            cnts[c].assign(k, 0);
                            for (size_t i = b; i < e; ++i) {
                                int a = res.assignment[i];
                                const double* p = pts.row(static_cast<int>(i));
                                double* s = sums[c].row(a);
                                for (int j = 0; j < d; ++j) s[j] += p[j];
                                cnts[c][a]++;
                            }
                        });
        Mat sum(k, d);
        std::vector<int> cnt(k, 0);
        for (size_t c = 0; c < n_chunks; ++c) {
            for (size_t j = 0; j < sum.d.size(); ++j) sum.d[j] += sums[c].d[j];
            for (int a = 0; a < k; ++a) cnt[a] += cnts[c][a];
        }
        for (int a = 0; a < k; ++a)
            if (cnt[a] > 0)
                for (int j = 0; j < d; ++j)
                    res.centroids.at(a, j) = sum.at(a, j) / cnt[a];

        // empty clusters: reseed to the point farthest from its centroid
        std::vector<char> taken(n, 0);
        for (int a = 0; a < k; ++a) {
            if (cnt[a] > 0) continue;
            int far = -1;
            double fd = -1.0;
            for (int i = 0; i < n; ++i) {
                if (taken[i]) continue;
                double d2 = sq_dist(pts.row(i), res.centroids.row(res.assignment[i]), d);
                if (d2 > fd) {
                    fd = d2;
                    far = i;
                }
            }
            std::copy_n(pts.row(far), d, res.centroids.row(a));
            taken[far] = 1;
        }

        double next = assign_step();
        res.inertia_trace.push_back(next);
        double denom = std::max(inertia, 1e-300);
        bool converged = (inertia - next) / denom < opt.tol;
        inertia = next;
        return converged;
    };

    // Hartigan polish: a size-weighted single-point transfer can strictly
    // lower the objective even when Lloyd has converged, so alternate Lloyd
    // rounds with greedy transfer sweeps until neither makes progress.
    auto hartigan_sweep = [&]() {
        std::vector<int> cnt(k, 0);
        Mat sum(k, d);
        for (int i = 0; i < n; ++i) {
            int a = res.assignment[i];
            const double* p = pts.row(i);
            double* s = sum.row(a);
            for (int j = 0; j < d; ++j) s[j] += p[j];
            cnt[a]++;
        }
        std::vector<double> ca(d), cb(d);
        bool moved = false;
        for (int i = 0; i < n; ++i) {
            int a = res.assignment[i];
            if (cnt[a] <= 1) continue;
            for (int j = 0; j < d; ++j) ca[j] = sum.at(a, j) / cnt[a];
            double rem = -static_cast<double>(cnt[a]) / (cnt[a] - 1) *
                         sq_dist(pts.row(i), ca.data(), d);
            int to = -1;
            double best = -1e-12;  // strict improvement only
            for (int b = 0; b < k; ++b) {
                if (b == a || cnt[b] == 0) continue;
                for (int j = 0; j < d; ++j) cb[j] = sum.at(b, j) / cnt[b];
                double delta = rem + static_cast<double>(cnt[b]) / (cnt[b] + 1) *
                                         sq_dist(pts.row(i), cb.data(), d);
                if (delta < best) {
                    best = delta;
                    to = b;
                }
            }
            if (to >= 0) {
                const double* p = pts.row(i);
                for (int j = 0; j < d; ++j) {
                    sum.at(a, j) -= p[j];
                    sum.at(to, j) += p[j];
                }
                cnt[a]--;
                cnt[to]++;
                res.assignment[i] = to;
                moved = true;
            }
        }
        if (moved)
            for (int a = 0; a < k; ++a)
                if (cnt[a] > 0)
                    for (int j = 0; j < d; ++j)
                        res.centroids.at(a, j) = sum.at(a, j) / cnt[a];
        return moved;
    };

    double inertia = assign_step();
    res.inertia_trace.push_back(inertia);
    for (int round = 0; round < opt.max_iters; ++round) {
        for (int iter = 0; iter < opt.max_iters; ++iter)
            if (lloyd_iter(inertia)) break;
        if (!hartigan_sweep()) break;
        // nearest-centroid reassignment after the transfers cannot raise the
        // objective, so the recorded trace stays non-increasing
        inertia = assign_step();
        res.inertia_trace.push_back(inertia);
    }
    res.inertia = inertia;
    return res;
}

ClusterTree hierarchical_fit(const Mat& points, const std::vector<int>& ks,
                             uint64_t seed, const KMeansOptions& opt) {
    check(!ks.empty(), ErrorKind::data, "hierarchical_fit: empty ks");
    for (size_t i = 1; i < ks.size(); ++i)
        check(ks[i] < ks[i - 1], ErrorKind::data,
              "hierarchical_fit: ks must be strictly decreasing");
    ClusterTree tree;
    tree.ks = ks;
    const Mat* level_pts = &points;
    for (size_t l = 0; l < ks.size(); ++l) {
        tree.levels.push_back(
            kmeans_fit(*level_pts, ks[l], hash_combine(seed, l), opt));
        level_pts = &tree.levels.back().centroids;
    }
    return tree;
}

std::vector<int> compose_assignment(const ClusterTree& tree, int level) {
    check(level >= 0 && level < tree.n_levels(), ErrorKind::data,
          "compose_assignment: level out of range");
    std::vector<int> out = tree.levels[0].assignment;
    for (int l = 1; l <= level; ++l)
        for (auto& a : out) a = tree.levels[l].assignment[a];
    return out;
}

std::vector<size_t> water_fill(size_t budget, const std::vector<size_t>& caps) {
    size_t nb = caps.size();
    std::vector<size_t> alloc(nb, 0);
    std::vector<size_t> active;
    for (size_t i = 0; i < nb; ++i)
        if (caps[i] > 0) active.push_back(i);
    while (budget > 0 && !active.empty()) {
        size_t fair = budget / active.size();
        size_t rem = budget % active.size();
        if (fair == 0 && rem == 0) break;
        std::vector<size_t> still;
        for (size_t r = 0; r < active.size(); ++r) {
            size_t i = active[r];
            size_t want = fair + (r < rem ? 1 : 0);
            size_t give = std::min(want, caps[i] - alloc[i]);
            alloc[i] += give;
            budget -= give;
            if (alloc[i] < caps[i]) still.push_back(i);
        }
        if (still.size() == active.size() && fair == 0) break;
        active.swap(still);
    }
    return alloc;
}

namespace {

// children[l][c] = indices at level l-1 (or raw points for l=0) under cluster c
struct TreeIndex {
    std::vector<std::vector<std::vector<size_t>>> children;
    std::vector<std::vector<size_t>> subtree_count;  // per level, per cluster
};

TreeIndex build_index(const ClusterTree& tree) {
    TreeIndex ix;
    int L = tree.n_levels();
    ix.children.resize(L);
    ix.subtree_count.resize(L);
    for (int l = 0; l < L; ++l) {
        int k = tree.levels[l].centroids.rows;
        ix.children[l].assign(k, {});
        const auto& a = tree.levels[l].assignment;
        for (size_t i = 0; i < a.size(); ++i) ix.children[l][a[i]].push_back(i);
        ix.subtree_count[l].assign(k, 0);
        for (int c = 0; c < k; ++c) {
            if (l == 0) {
                ix.subtree_count[l][c] = ix.children[l][c].size();
            } else {
                size_t s = 0;
                for (size_t ch : ix.children[l][c]) s += ix.subtree_count[l - 1][ch];
                ix.subtree_count[l][c] = s;
            }
        }
    }
    return ix;
}

void sample_cluster(const ClusterTree& tree, const TreeIndex& ix, int level,
                    size_t cluster, size_t budget, uint64_t seed,
                    std::vector<size_t>& out) {
    if (budget == 0) return;
    const auto& kids = ix.children[level][cluster];
    if (level == 0) {
        Rng rng(hash_combine(hash_combine(seed, static_cast<uint64_t>(level)),
                             cluster));
        auto pick = rng.sample_without_replacement(kids.size(),
                                                   std::min(budget, kids.size()));
        for (size_t p : pick) out.push_back(kids[p]);
        return;
    }
    std::vector<size_t> caps(kids.size());
    for (size_t i = 0; i < kids.size(); ++i)
        caps[i] = ix.subtree_count[level - 1][kids[i]];
    auto alloc = water_fill(budget, caps);
    for (size_t i = 0; i < kids.size(); ++i)
        sample_cluster(tree, ix, level - 1, kids[i], alloc[i], seed, out);
}

}  // namespace

std::vector<size_t> balanced_sample(const ClusterTree& tree, size_t budget,
                                    uint64_t seed) {
    size_t n = tree.n_points();
    budget = std::min(budget, n);
    if (budget == 0) return {};
    TreeIndex ix = build_index(tree);
    int top = tree.n_levels() - 1;
    int k_top = tree.levels[top].centroids.rows;
    std::vector<size_t> caps(k_top);
    for (int c = 0; c < k_top; ++c) caps[c] = ix.subtree_count[top][c];
    auto alloc = water_fill(budget, caps);
    std::vector<size_t> out;
    out.reserve(budget);
    for (int c = 0; c < k_top; ++c)
        sample_cluster(tree, ix, top, static_cast<size_t>(c), alloc[c], seed, out);
    std::sort(out.begin(), out.end());
    return out;
}

void write_cluster_tree(const ClusterTree& tree, const std::string& path) {
    BinWriter w(path);
    w.magic("DTXT");
    w.u32(1);
    w.u32(static_cast<uint32_t>(tree.n_levels()));
    for (const auto& lvl : tree.levels) {
        w.u32(static_cast<uint32_t>(lvl.centroids.rows));
        w.u32(static_cast<uint32_t>(lvl.centroids.cols));
        w.f32s(lvl.centroids.d.data(), lvl.centroids.d.size());
        w.u64(lvl.assignment.size());
        for (int a : lvl.assignment) w.u32(static_cast<uint32_t>(a));
    }
    w.close();
}

ClusterTree read_cluster_tree(const std::string& path) {
    BinReader r(path);
    r.expect_magic("DTXT");
    r.expect_version(1);
    uint32_t n_levels = r.u32();
    check(n_levels >= 1 && n_levels <= 64, ErrorKind::data,
          path + ": bad level count");
    ClusterTree tree;
    for (uint32_t l = 0; l < n_levels; ++l) {
        KMeansResult lvl;
        uint32_t k = r.u32();
        uint32_t dim = r.u32();
        lvl.centroids = Mat(static_cast<int>(k), static_cast<int>(dim));
        r.f32s(lvl.centroids.d.data(), lvl.centroids.d.size());
        uint64_t n_assign = r.u64();
        lvl.assignment.resize(n_assign);
        for (uint64_t i = 0; i < n_assign; ++i) {
            uint32_t a = r.u32();
            check(a < k, ErrorKind::data, path + ": assignment index out of range");
            lvl.assignment[i] = static_cast<int>(a);
        }
        tree.levels.push_back(std::move(lvl));
        tree.ks.push_back(static_cast<int>(k));
    }
    return tree;
}

}  // namespace dtx
