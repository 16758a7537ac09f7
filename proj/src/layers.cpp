#include "sdseg/layers.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "sdseg/parallel.hpp"

namespace sdseg {

namespace {

// Shape of an input viewed as a batch [N,C,H,W]; rank-3 inputs are N=1.
struct Batched {
    int n, c, h, w;
    bool had_batch_dim;
};

Batched as_batch(const Tensor& t, const char* what) {
    if (t.rank() == 4) return {t.dim(0), t.dim(1), t.dim(2), t.dim(3), true};
    if (t.rank() == 3) return {1, t.dim(0), t.dim(1), t.dim(2), false};
    throw ShapeError(std::string(what) + ": expected rank 3 or 4 input, got shape " +
                     t.shape_str());
}

std::vector<int> out_shape(const Batched& b, int channels, int h, int w) {
    if (b.had_batch_dim) return {b.n, channels, h, w};
    return {channels, h, w};
}

void check_kernel(const Tensor& kernel, const Tensor& bias, int in_channels, const char* what) {
    if (kernel.rank() != 4 || kernel.dim(2) != kernel.dim(3))
        throw ShapeError(std::string(what) + ": kernel must be [Cout,Cin,k,k], got " +
                         kernel.shape_str());
    if (kernel.dim(1) != in_channels)
        throw ShapeError(std::string(what) + ": kernel expects " + std::to_string(kernel.dim(1)) +
                         " input channels, input has " + std::to_string(in_channels));
    if (bias.rank() != 1 || bias.dim(0) != kernel.dim(0))
        throw ShapeError(std::string(what) + ": bias must be [Cout], got " + bias.shape_str());
}

// --- small dense kernels -------------------------------------------------
//
// All convolutions funnel into two matmul forms. Accumulation order within
// each output element is a fixed function of the shapes (never of the thread
// count), which keeps results bit-reproducible under any parallel schedule.

// C[M,N] += A[M,K] * B[K,N], row-major, all operands contiguous. Callers keep
// N small enough (observation grouping) that B stays cache-resident. The
// 32-wide blocks hold four independent accumulator vectors in flight to cover
// the FMA latency; per C element the k order is sequential.
void matmul_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    constexpr int kBlock = 32;
    constexpr int kSlab = 512;  // K processed in slabs so the active A/B slices stay cached
    for (int k0 = 0; k0 < k; k0 += kSlab) {
        const int k1 = std::min(k, k0 + kSlab);
        for (int i = 0; i < m; ++i) {
            const double* arow = a + static_cast<std::int64_t>(i) * k;
            double* crow = c + static_cast<std::int64_t>(i) * n;
            int j0 = 0;
            for (; j0 + kBlock <= n; j0 += kBlock) {
                double acc[kBlock];
                for (int j = 0; j < kBlock; ++j) acc[j] = crow[j0 + j];
                const double* bp = b + static_cast<std::int64_t>(k0) * n + j0;
                for (int kk = k0; kk < k1; ++kk, bp += n) {
                    const double av = arow[kk];
                    for (int j = 0; j < kBlock; ++j) acc[j] += av * bp[j];
                }
                for (int j = 0; j < kBlock; ++j) crow[j0 + j] = acc[j];
            }
            if (j0 < n) {
                const int rem = n - j0;
                double acc[kBlock];
                for (int j = 0; j < rem; ++j) acc[j] = crow[j0 + j];
                const double* bp = b + static_cast<std::int64_t>(k0) * n + j0;
                for (int kk = k0; kk < k1; ++kk, bp += n) {
                    const double av = arow[kk];
                    for (int j = 0; j < rem; ++j) acc[j] += av * bp[j];
                }
                for (int j = 0; j < rem; ++j) crow[j0 + j] = acc[j];
            }
        }
    }
}

// C[M,N] += A[M,K] * B[N,K]^T (row-by-row dot products). Sixteen accumulator
// lanes hide the FMA latency; per element the order is fixed: sequential
// within each lane, lanes combined pairwise, then the short tail.
void matmul_abt_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    constexpr int kLanes = 16;
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<std::int64_t>(i) * k;
        double* crow = c + static_cast<std::int64_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* brow = b + static_cast<std::int64_t>(j) * k;
            double acc[kLanes] = {};
            int kk = 0;
            for (; kk + kLanes <= k; kk += kLanes)
                for (int l = 0; l < kLanes; ++l) acc[l] += arow[kk + l] * brow[kk + l];
            double tail = 0.0;
            for (; kk < k; ++kk) tail += arow[kk] * brow[kk];
            for (int s = kLanes; s > 1; s /= 2)
                for (int l = 0; l < s / 2; ++l) acc[l] += acc[l + s / 2];
            crow[j] += acc[0] + tail;
        }
    }
}

// observations per group so a [rows, G*plane] block stays near 256 KiB
int group_size(int rows, std::int64_t plane, int n) {
    const std::int64_t target = 1048576 / (8 * std::max(1, rows));
    return static_cast<int>(std::clamp<std::int64_t>(std::max<std::int64_t>(target, 64) / plane, 1, n));
}

// im2col for stride-1 "same" convolution, kernel kk x kk (1 or 3):
// col[(c*kk+dy)*kk+dx, y*w+x] = in[c, y+dy-off, x+dx-off] (zero outside).
// `col` points at this observation's column block; rows advance by row_stride
// so a whole batch can share one [K9, N*HW] matrix.
void im2col_same(const double* in, int cin, int h, int w, int kk, double* col,
                 std::int64_t row_stride) {
    const int off = kk / 2;
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    std::int64_t row = 0;
    for (int c = 0; c < cin; ++c) {
        const double* in_c = in + static_cast<std::int64_t>(c) * plane;
        for (int dy = 0; dy < kk; ++dy) {
            for (int dx = 0; dx < kk; ++dx, ++row) {
                double* dst = col + row * row_stride;
                for (int y = 0; y < h; ++y) {
                    const int sy = y + dy - off;
                    double* drow = dst + static_cast<std::int64_t>(y) * w;
                    if (sy < 0 || sy >= h) {
                        std::fill(drow, drow + w, 0.0);
                        continue;
                    }
                    const double* srow = in_c + static_cast<std::int64_t>(sy) * w;
                    const int x0 = std::max(0, off - dx), x1 = std::min(w, w + off - dx);
                    if (x0 > 0) std::fill(drow, drow + x0, 0.0);
                    for (int x = x0; x < x1; ++x) drow[x] = srow[x + dx - off];
                    if (x1 < w) std::fill(drow + x1, drow + w, 0.0);
                }
            }
        }
    }
}

// adjoint of im2col_same: scatter-add one observation's columns back
void col2im_same(const double* col, int cin, int h, int w, int kk, double* in,
                 std::int64_t row_stride) {
    const int off = kk / 2;
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    std::int64_t row = 0;
    for (int c = 0; c < cin; ++c) {
        double* in_c = in + static_cast<std::int64_t>(c) * plane;
        for (int dy = 0; dy < kk; ++dy) {
            for (int dx = 0; dx < kk; ++dx, ++row) {
                const double* src = col + row * row_stride;
                for (int y = 0; y < h; ++y) {
                    const int sy = y + dy - off;
                    if (sy < 0 || sy >= h) continue;
                    const double* srow = src + static_cast<std::int64_t>(y) * w;
                    double* drow = in_c + static_cast<std::int64_t>(sy) * w + (dx - off);
                    const int x0 = std::max(0, off - dx), x1 = std::min(w, w + off - dx);
                    for (int x = x0; x < x1; ++x) drow[x] += srow[x];
                }
            }
        }
    }
}

// [N,C,HW] -> [C, N*HW] and back; wide columns keep the matmuls efficient
// even when the spatial plane has shrunk to a few pixels

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias) {
    const Batched b = as_batch(input, "conv2d");
    check_kernel(kernel, bias, b.c, "conv2d");
    const int kk = kernel.dim(2);
    if (kk != 1 && kk != 3) throw ShapeError("conv2d: kernel spatial size must be 1 or 3");
    const int cout = kernel.dim(0);
    const int h = b.h, w = b.w, cin = b.c;
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    const int krows = cin * kk * kk;

    Tensor out(out_shape(b, cout, h, w));
    const double* x = input.data();
    const double* k = kernel.data();
    const double* bs = bias.data();
    double* y = out.data();

    // observations are processed in groups whose column block stays cached;
    // scratch is group-local so groups parallelize freely
    const int g_sz = group_size(krows, plane, b.n);
    const std::int64_t n_groups = (b.n + g_sz - 1) / g_sz;
    parallel_for(n_groups, [&](std::int64_t lo, std::int64_t hi) {
        std::vector<double> col(static_cast<std::size_t>(krows) * g_sz * plane);
        std::vector<double> out_cn(static_cast<std::size_t>(cout) * g_sz * plane);
        for (std::int64_t grp = lo; grp < hi; ++grp) {
            const std::int64_t n0 = grp * g_sz;
            const int gn = static_cast<int>(std::min<std::int64_t>(g_sz, b.n - n0));
            const std::int64_t wide = static_cast<std::int64_t>(gn) * plane;
            for (int i = 0; i < gn; ++i)
                im2col_same(x + (n0 + i) * cin * plane, cin, h, w, kk,
                            col.data() + static_cast<std::int64_t>(i) * plane, wide);
            for (int o = 0; o < cout; ++o)
                std::fill(out_cn.begin() + static_cast<std::int64_t>(o) * wide,
                          out_cn.begin() + static_cast<std::int64_t>(o) * wide + wide, bs[o]);
            matmul_acc(k, col.data(), out_cn.data(), cout, krows, static_cast<int>(wide));
            for (int i = 0; i < gn; ++i)
                for (int o = 0; o < cout; ++o)
                    std::copy_n(out_cn.data() + static_cast<std::int64_t>(o) * wide +
                                    static_cast<std::int64_t>(i) * plane,
                                plane, y + ((n0 + i) * cout + o) * plane);
        }
    });
    return out;
}

ConvGrad conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& grad_out) {
    const Batched b = as_batch(input, "conv2d_backward");
    check_kernel(kernel, Tensor::zeros({kernel.dim(0)}), b.c, "conv2d_backward");
    const int kk = kernel.dim(2);
    const int cout = kernel.dim(0);
    const int h = b.h, w = b.w, cin = b.c;
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    const int krows = cin * kk * kk;
    Tensor::require_shape(grad_out, out_shape(b, cout, h, w), "conv2d_backward grad");

    ConvGrad grad{Tensor(input.shape()), Tensor(kernel.shape()), Tensor({cout})};
    const double* x = input.data();
    const double* k = kernel.data();
    const double* g = grad_out.data();

    // kernel transposed to [Cin*kk*kk, Cout] for the d_input matmul
    std::vector<double> kt(static_cast<std::size_t>(krows) * cout);
    for (int o = 0; o < cout; ++o)
        for (int r = 0; r < krows; ++r)
            kt[static_cast<std::size_t>(r) * cout + o] = k[static_cast<std::int64_t>(o) * krows + r];

    // grouped column/gradient blocks, kept for the kernel-gradient pass
    const int g_sz = group_size(krows, plane, b.n);
    const std::int64_t n_groups = (b.n + g_sz - 1) / g_sz;
    const std::int64_t block = static_cast<std::int64_t>(g_sz) * plane;
    std::vector<double> col(static_cast<std::size_t>(n_groups) * krows * block);
    std::vector<double> g_cn(static_cast<std::size_t>(n_groups) * cout * block);

    double* dx = grad.d_input.data();
    parallel_for(n_groups, [&](std::int64_t lo, std::int64_t hi) {
        std::vector<double> dcol(static_cast<std::size_t>(krows) * block);
        for (std::int64_t grp = lo; grp < hi; ++grp) {
            const std::int64_t n0 = grp * g_sz;
            const int gn = static_cast<int>(std::min<std::int64_t>(g_sz, b.n - n0));
            const std::int64_t wide = static_cast<std::int64_t>(gn) * plane;
            double* col_g = col.data() + grp * krows * block;
            double* g_g = g_cn.data() + grp * cout * block;
            for (int i = 0; i < gn; ++i) {
                im2col_same(x + (n0 + i) * cin * plane, cin, h, w, kk,
                            col_g + static_cast<std::int64_t>(i) * plane, wide);
                for (int o = 0; o < cout; ++o)
                    std::copy_n(g + ((n0 + i) * cout + o) * plane, plane,
                                g_g + static_cast<std::int64_t>(o) * wide +
                                    static_cast<std::int64_t>(i) * plane);
            }
            std::fill(dcol.begin(), dcol.begin() + krows * wide, 0.0);
            matmul_acc(kt.data(), g_g, dcol.data(), krows, cout, static_cast<int>(wide));
            for (int i = 0; i < gn; ++i)
                col2im_same(dcol.data() + static_cast<std::int64_t>(i) * plane, cin, h, w, kk,
                            dx + (n0 + i) * cin * plane, wide);
        }
    });

    // d_kernel: output-channel rows split across threads, groups accumulated
    // in a fixed order inside; d_bias likewise
    double* dk = grad.d_kernel.data();
    parallel_for(cout, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t grp = 0; grp < n_groups; ++grp) {
            const std::int64_t n0 = grp * g_sz;
            const int gn = static_cast<int>(std::min<std::int64_t>(g_sz, b.n - n0));
            const std::int64_t wide = static_cast<std::int64_t>(gn) * plane;
            matmul_abt_acc(g_cn.data() + grp * cout * block + lo * wide,
                           col.data() + grp * krows * block, dk + lo * krows,
                           static_cast<int>(hi - lo), static_cast<int>(wide), krows);
        }
    });
    double* db = grad.d_bias.data();
    parallel_for(cout, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t o = lo; o < hi; ++o) {
            double acc = 0.0;
            for (int n = 0; n < b.n; ++n) {
                const double* g_no = g + (static_cast<std::int64_t>(n) * cout + o) * plane;
                for (std::int64_t i = 0; i < plane; ++i) acc += g_no[i];
            }
            db[o] = acc;
        }
    });
    return grad;
}

namespace {

// kernel slice at one (dy,dx) offset, contiguous [Cout, Cin]
void tconv_slice(const double* k, int cout, int cin, int dy, int dx, double* out) {
    for (int o = 0; o < cout; ++o)
        for (int c = 0; c < cin; ++c)
            out[static_cast<std::int64_t>(o) * cin + c] =
                k[(static_cast<std::int64_t>(o) * cin + c) * 9 + dy * 3 + dx];
}

// gradient plane gathered at stride-2 positions (2i+dy, 2j+dx), zero outside
void tconv_gather(const double* g_o, int oh, int ow, int h, int w, int dy, int dx, double* out) {
    for (int i = 0; i < h; ++i) {
        const int y = 2 * i + dy;
        double* drow = out + static_cast<std::int64_t>(i) * w;
        if (y >= oh) {
            std::fill(drow, drow + w, 0.0);
            continue;
        }
        const double* grow = g_o + static_cast<std::int64_t>(y) * ow + dx;
        const int jmax = std::min(w, (ow - dx + 1) / 2);
        for (int j = 0; j < jmax; ++j) drow[j] = grow[2 * j];
        for (int j = jmax; j < w; ++j) drow[j] = 0.0;
    }
}

}  // namespace

Tensor tconv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias) {
    const Batched b = as_batch(input, "tconv2d");
    check_kernel(kernel, bias, b.c, "tconv2d");
    if (kernel.dim(2) != 3) throw ShapeError("tconv2d: kernel spatial size must be 3");
    const int cout = kernel.dim(0);
    const int h = b.h, w = b.w, cin = b.c;
    const int oh = 2 * h, ow = 2 * w;
    const std::int64_t in_plane = static_cast<std::int64_t>(h) * w;
    const std::int64_t out_plane = static_cast<std::int64_t>(oh) * ow;

    Tensor out(out_shape(b, cout, oh, ow));
    const double* x = input.data();
    const double* bs = bias.data();
    double* y = out.data();

    std::vector<double> slices(9 * static_cast<std::size_t>(cout) * cin);
    for (int dy = 0; dy < 3; ++dy)
        for (int dx = 0; dx < 3; ++dx)
            tconv_slice(kernel.data(), cout, cin, dy, dx,
                        slices.data() + (dy * 3 + dx) * static_cast<std::size_t>(cout) * cin);

    const int g_sz = group_size(cin, in_plane, b.n);
    const std::int64_t n_groups = (b.n + g_sz - 1) / g_sz;
    parallel_for(n_groups, [&](std::int64_t lo, std::int64_t hi) {
        std::vector<double> in_g(static_cast<std::size_t>(cin) * g_sz * in_plane);
        std::vector<double> tmp(static_cast<std::size_t>(cout) * g_sz * in_plane);
        for (std::int64_t grp = lo; grp < hi; ++grp) {
            const std::int64_t n0 = grp * g_sz;
            const int gn = static_cast<int>(std::min<std::int64_t>(g_sz, b.n - n0));
            const std::int64_t wide = static_cast<std::int64_t>(gn) * in_plane;
            for (int i = 0; i < gn; ++i)
                for (int c = 0; c < cin; ++c)
                    std::copy_n(x + ((n0 + i) * cin + c) * in_plane, in_plane,
                                in_g.data() + static_cast<std::int64_t>(c) * wide +
                                    static_cast<std::int64_t>(i) * in_plane);
            for (int i = 0; i < gn; ++i) {
                double* out_n = y + (n0 + i) * cout * out_plane;
                for (int o = 0; o < cout; ++o)
                    std::fill(out_n + o * out_plane, out_n + (o + 1) * out_plane, bs[o]);
            }
            for (int dy = 0; dy < 3; ++dy) {
                for (int dx = 0; dx < 3; ++dx) {
                    std::fill(tmp.begin(), tmp.begin() + cout * wide, 0.0);
                    matmul_acc(slices.data() +
                                   (dy * 3 + dx) * static_cast<std::size_t>(cout) * cin,
                               in_g.data(), tmp.data(), cout, cin, static_cast<int>(wide));
                    // scatter to the strided output positions (far edge clips)
                    const int jmax = std::min(w, (ow - dx + 1) / 2);
                    for (int i = 0; i < gn; ++i) {
                        double* out_n = y + (n0 + i) * cout * out_plane;
                        for (int o = 0; o < cout; ++o) {
                            const double* trow_base = tmp.data() +
                                                      static_cast<std::int64_t>(o) * wide +
                                                      static_cast<std::int64_t>(i) * in_plane;
                            double* orow_base = out_n + static_cast<std::int64_t>(o) * out_plane;
                            for (int r = 0; r < h; ++r) {
                                const int yy = 2 * r + dy;
                                if (yy >= oh) continue;
                                const double* trow = trow_base + static_cast<std::int64_t>(r) * w;
                                double* orow = orow_base + static_cast<std::int64_t>(yy) * ow + dx;
                                for (int j = 0; j < jmax; ++j) orow[2 * j] += trow[j];
                            }
                        }
                    }
                }
            }
        }
    });
    return out;
}

ConvGrad tconv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& grad_out) {
    const Batched b = as_batch(input, "tconv2d_backward");
    const int cout = kernel.dim(0);
    const int h = b.h, w = b.w, cin = b.c;
    const int oh = 2 * h, ow = 2 * w;
    const std::int64_t in_plane = static_cast<std::int64_t>(h) * w;
    const std::int64_t out_plane = static_cast<std::int64_t>(oh) * ow;
    Tensor::require_shape(grad_out, out_shape(b, cout, oh, ow), "tconv2d_backward grad");

    ConvGrad grad{Tensor(input.shape()), Tensor(kernel.shape()), Tensor({cout})};
    const double* x = input.data();
    const double* g = grad_out.data();

    // transposed kernel slices [Cin, Cout] per offset for the d_input matmuls
    std::vector<double> slices_t(9 * static_cast<std::size_t>(cin) * cout);
    for (int dy = 0; dy < 3; ++dy)
        for (int dx = 0; dx < 3; ++dx) {
            double* s = slices_t.data() + (dy * 3 + dx) * static_cast<std::size_t>(cin) * cout;
            for (int o = 0; o < cout; ++o)
                for (int c = 0; c < cin; ++c)
                    s[static_cast<std::int64_t>(c) * cout + o] =
                        kernel.data()[(static_cast<std::int64_t>(o) * cin + c) * 9 + dy * 3 + dx];
        }

    const int g_sz = group_size(std::max(cin, cout), in_plane, b.n);
    const std::int64_t n_groups = (b.n + g_sz - 1) / g_sz;
    const std::int64_t block = static_cast<std::int64_t>(g_sz) * in_plane;

    // packed input blocks are shared by the d_input and d_kernel passes
    std::vector<double> in_cn(static_cast<std::size_t>(n_groups) * cin * block);
    parallel_for(n_groups, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t grp = lo; grp < hi; ++grp) {
            const std::int64_t n0 = grp * g_sz;
            const int gn = static_cast<int>(std::min<std::int64_t>(g_sz, b.n - n0));
            const std::int64_t wide = static_cast<std::int64_t>(gn) * in_plane;
            for (int i = 0; i < gn; ++i)
                for (int c = 0; c < cin; ++c)
                    std::copy_n(x + ((n0 + i) * cin + c) * in_plane, in_plane,
                                in_cn.data() + grp * cin * block +
                                    static_cast<std::int64_t>(c) * wide +
                                    static_cast<std::int64_t>(i) * in_plane);
        }
    });

    double* dx_out = grad.d_input.data();
    parallel_for(n_groups, [&](std::int64_t lo, std::int64_t hi) {
        std::vector<double> g_off(static_cast<std::size_t>(cout) * block);
        std::vector<double> dx_cn(static_cast<std::size_t>(cin) * block);
        for (std::int64_t grp = lo; grp < hi; ++grp) {
            const std::int64_t n0 = grp * g_sz;
            const int gn = static_cast<int>(std::min<std::int64_t>(g_sz, b.n - n0));
            const std::int64_t wide = static_cast<std::int64_t>(gn) * in_plane;
            std::fill(dx_cn.begin(), dx_cn.begin() + cin * wide, 0.0);
            for (int dy = 0; dy < 3; ++dy)
                for (int dx = 0; dx < 3; ++dx) {
                    for (int i = 0; i < gn; ++i)
                        for (int o = 0; o < cout; ++o)
                            tconv_gather(g + ((n0 + i) * cout + o) * out_plane, oh, ow, h, w, dy,
                                         dx,
                                         g_off.data() + static_cast<std::int64_t>(o) * wide +
                                             static_cast<std::int64_t>(i) * in_plane);
                    matmul_acc(slices_t.data() +
                                   (dy * 3 + dx) * static_cast<std::size_t>(cin) * cout,
                               g_off.data(), dx_cn.data(), cin, cout, static_cast<int>(wide));
                }
            for (int i = 0; i < gn; ++i)
                for (int c = 0; c < cin; ++c)
                    std::copy_n(dx_cn.data() + static_cast<std::int64_t>(c) * wide +
                                    static_cast<std::int64_t>(i) * in_plane,
                                in_plane, dx_out + ((n0 + i) * cin + c) * in_plane);
        }
    });

    // d_kernel: one task per (dy,dx) offset; groups accumulate in fixed order
    double* dk = grad.d_kernel.data();
    parallel_for(9, [&](std::int64_t lo, std::int64_t hi) {
        std::vector<double> g_off(static_cast<std::size_t>(cout) * block);
        std::vector<double> dk_off(static_cast<std::size_t>(cout) * cin);
        for (std::int64_t off = lo; off < hi; ++off) {
            const int dy = static_cast<int>(off) / 3, dx = static_cast<int>(off) % 3;
            std::fill(dk_off.begin(), dk_off.end(), 0.0);
            for (std::int64_t grp = 0; grp < n_groups; ++grp) {
                const std::int64_t n0 = grp * g_sz;
                const int gn = static_cast<int>(std::min<std::int64_t>(g_sz, b.n - n0));
                const std::int64_t wide = static_cast<std::int64_t>(gn) * in_plane;
                for (int i = 0; i < gn; ++i)
                    for (int o = 0; o < cout; ++o)
                        tconv_gather(g + ((n0 + i) * cout + o) * out_plane, oh, ow, h, w, dy, dx,
                                     g_off.data() + static_cast<std::int64_t>(o) * wide +
                                         static_cast<std::int64_t>(i) * in_plane);
                matmul_abt_acc(g_off.data(), in_cn.data() + grp * cin * block, dk_off.data(), cout,
                               static_cast<int>(wide), cin);
            }
            for (int o = 0; o < cout; ++o)
                for (int c = 0; c < cin; ++c)
                    dk[(static_cast<std::int64_t>(o) * cin + c) * 9 + off] =
                        dk_off[static_cast<std::int64_t>(o) * cin + c];
        }
    });

    double* db = grad.d_bias.data();
    parallel_for(cout, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t o = lo; o < hi; ++o) {
            double acc = 0.0;
            for (int n = 0; n < b.n; ++n) {
                const double* g_no = g + (static_cast<std::int64_t>(n) * cout + o) * out_plane;
                for (std::int64_t i = 0; i < out_plane; ++i) acc += g_no[i];
            }
            db[o] = acc;
        }
    });
    return grad;
}

MaxPoolResult maxpool2(const Tensor& input) {
    const Batched b = as_batch(input, "maxpool2");
    if (b.h % 2 != 0 || b.w % 2 != 0)
        throw ShapeError("maxpool2: spatial extents must be even, got " +
                         std::to_string(b.h) + "x" + std::to_string(b.w));
    const int oh = b.h / 2, ow = b.w / 2;
    MaxPoolResult res;
    res.output = Tensor(out_shape(b, b.c, oh, ow));
    res.argmax.resize(static_cast<std::size_t>(res.output.size()));
    const double* x = input.data();
    double* y = res.output.data();
    std::uint8_t* am = res.argmax.data();
    const std::int64_t planes = static_cast<std::int64_t>(b.n) * b.c;
    const std::int64_t in_plane = static_cast<std::int64_t>(b.h) * b.w;
    const std::int64_t out_plane = static_cast<std::int64_t>(oh) * ow;
    parallel_for(planes, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t p = lo; p < hi; ++p) {
            const double* in_p = x + p * in_plane;
            double* out_p = y + p * out_plane;
            std::uint8_t* am_p = am + p * out_plane;
            for (int i = 0; i < oh; ++i) {
                const double* r0 = in_p + static_cast<std::int64_t>(2 * i) * b.w;
                const double* r1 = r0 + b.w;
                for (int j = 0; j < ow; ++j) {
                    const double v[4] = {r0[2 * j], r0[2 * j + 1], r1[2 * j], r1[2 * j + 1]};
                    int best = 0;
                    for (int t = 1; t < 4; ++t)
                        if (v[t] > v[best]) best = t;
                    out_p[static_cast<std::int64_t>(i) * ow + j] = v[best];
                    am_p[static_cast<std::int64_t>(i) * ow + j] = static_cast<std::uint8_t>(best);
                }
            }
        }
    });
    return res;
}

Tensor maxpool2_backward(const MaxPoolResult& fwd, const std::vector<int>& input_shape,
                         const Tensor& grad_out) {
    Tensor d_input(input_shape);
    const Batched b = as_batch(d_input, "maxpool2_backward");
    const int oh = b.h / 2, ow = b.w / 2;
    Tensor::require_shape(grad_out, out_shape(b, b.c, oh, ow), "maxpool2_backward grad");
    const double* g = grad_out.data();
    const std::uint8_t* am = fwd.argmax.data();
    double* dx = d_input.data();
    const std::int64_t planes = static_cast<std::int64_t>(b.n) * b.c;
    const std::int64_t in_plane = static_cast<std::int64_t>(b.h) * b.w;
    const std::int64_t out_plane = static_cast<std::int64_t>(oh) * ow;
    parallel_for(planes, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t p = lo; p < hi; ++p) {
            double* dx_p = dx + p * in_plane;
            const double* g_p = g + p * out_plane;
            const std::uint8_t* am_p = am + p * out_plane;
            for (int i = 0; i < oh; ++i) {
                for (int j = 0; j < ow; ++j) {
                    const int a = am_p[static_cast<std::int64_t>(i) * ow + j];
                    const int yy = 2 * i + a / 2, xx = 2 * j + a % 2;
                    dx_p[static_cast<std::int64_t>(yy) * b.w + xx] +=
                        g_p[static_cast<std::int64_t>(i) * ow + j];
                }
            }
        }
    });
    return d_input;
}

BatchNormState::BatchNormState(int channels) {
    if (channels > 0) {
        running_mean = Tensor::zeros({channels});
        running_var = Tensor::full({channels}, 1.0);
    }
}

Tensor batchnorm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                 BatchNormState& state, BnMode mode, bool update_running,
                 BatchNormCache* cache) {
    const Batched b = as_batch(input, "batchnorm");
    if (gamma.rank() != 1 || gamma.dim(0) != b.c || beta.rank() != 1 || beta.dim(0) != b.c)
        throw ShapeError("batchnorm: gamma/beta must be [C]");
    const std::int64_t plane = static_cast<std::int64_t>(b.h) * b.w;
    const std::int64_t m = static_cast<std::int64_t>(b.n) * plane;
    if (mode == BnMode::kTrain && m < 2)
        throw ShapeError("batchnorm train mode needs at least 2 values per channel");

    Tensor out(input.shape());
    const double* x = input.data();
    double* y = out.data();
    Tensor mean({b.c}), var({b.c});

    if (mode == BnMode::kTrain) {
        parallel_for(b.c, [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t c = lo; c < hi; ++c) {
                double acc = 0.0;
                for (int n = 0; n < b.n; ++n) {
                    const double* xp = x + (static_cast<std::int64_t>(n) * b.c + c) * plane;
                    for (std::int64_t i = 0; i < plane; ++i) acc += xp[i];
                }
                const double mu = acc / static_cast<double>(m);
                double vacc = 0.0;
                for (int n = 0; n < b.n; ++n) {
                    const double* xp = x + (static_cast<std::int64_t>(n) * b.c + c) * plane;
                    for (std::int64_t i = 0; i < plane; ++i) {
                        const double d = xp[i] - mu;
                        vacc += d * d;
                    }
                }
                mean[c] = mu;
                var[c] = vacc / static_cast<double>(m);  // population convention
            }
        });
        if (update_running) {
            for (int c = 0; c < b.c; ++c) {
                state.running_mean[c] = kBnMomentum * state.running_mean[c] + (1.0 - kBnMomentum) * mean[c];
                state.running_var[c] = kBnMomentum * state.running_var[c] + (1.0 - kBnMomentum) * var[c];
            }
        }
    } else {
        mean = state.running_mean;
        var = state.running_var;
    }

    if (cache) {
        cache->x_hat = Tensor(input.shape());
        cache->batch_mean = mean;
        cache->batch_var = var;
    }
    double* xh = cache ? cache->x_hat.data() : nullptr;
    const double* gm = gamma.data();
    const double* bt = beta.data();
    parallel_for(static_cast<std::int64_t>(b.n) * b.c, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t nc = lo; nc < hi; ++nc) {
            const int c = static_cast<int>(nc % b.c);
            const double inv = 1.0 / std::sqrt(var[c] + kBnEps);
            const double mu = mean[c], ga = gm[c], be = bt[c];
            const double* xp = x + nc * plane;
            double* yp = y + nc * plane;
            if (xh) {
                double* xhp = xh + nc * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    xhp[i] = (xp[i] - mu) * inv;
                    yp[i] = ga * xhp[i] + be;
                }
            } else {
                for (std::int64_t i = 0; i < plane; ++i) yp[i] = ga * (xp[i] - mu) * inv + be;
            }
        }
    });
    return out;
}

BatchNormGrad batchnorm_backward(const Tensor& input, const Tensor& gamma,
                                 const BatchNormCache& cache, const Tensor& grad_out) {
    const Batched b = as_batch(input, "batchnorm_backward");
    Tensor::require_shape(grad_out, input.shape(), "batchnorm_backward grad");
    const std::int64_t plane = static_cast<std::int64_t>(b.h) * b.w;
    const std::int64_t m = static_cast<std::int64_t>(b.n) * plane;

    BatchNormGrad grad{Tensor(input.shape()), Tensor({b.c}), Tensor({b.c})};
    const double* g = grad_out.data();
    const double* xh = cache.x_hat.data();
    const double* gm = gamma.data();
    double* dx = grad.d_input.data();
    double* dgm = grad.d_gamma.data();
    double* dbt = grad.d_beta.data();

    parallel_for(b.c, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t c = lo; c < hi; ++c) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (int n = 0; n < b.n; ++n) {
                const std::int64_t base = (static_cast<std::int64_t>(n) * b.c + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    sum_g += g[base + i];
                    sum_gx += g[base + i] * xh[base + i];
                }
            }
            dgm[c] = sum_gx;
            dbt[c] = sum_g;
            const double inv = 1.0 / std::sqrt(cache.batch_var[c] + kBnEps);
            const double k1 = sum_g / static_cast<double>(m);
            const double k2 = sum_gx / static_cast<double>(m);
            const double scale = gm[c] * inv;
            for (int n = 0; n < b.n; ++n) {
                const std::int64_t base = (static_cast<std::int64_t>(n) * b.c + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i)
                    dx[base + i] = scale * (g[base + i] - k1 - xh[base + i] * k2);
            }
        }
    });
    return grad;
}

Tensor relu(const Tensor& input) {
    Tensor out(input.shape());
    const double* x = input.data();
    double* y = out.data();
    parallel_for(input.size(), [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
    });
    return out;
}

Tensor relu_backward(const Tensor& input, const Tensor& grad_out) {
    Tensor::require_shape(grad_out, input.shape(), "relu_backward grad");
    Tensor d(input.shape());
    const double* x = input.data();
    const double* g = grad_out.data();
    double* dx = d.data();
    parallel_for(input.size(), [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) dx[i] = x[i] > 0.0 ? g[i] : 0.0;
    });
    return d;
}

Tensor softmax2(const Tensor& logits) {
    const Batched b = as_batch(logits, "softmax2");
    if (b.c != 2) throw ShapeError("softmax2: expected 2 class channels, got " + logits.shape_str());
    Tensor out(logits.shape());
    const double* z = logits.data();
    double* p = out.data();
    const std::int64_t plane = static_cast<std::int64_t>(b.h) * b.w;
    parallel_for(b.n, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t n = lo; n < hi; ++n) {
            const double* z0 = z + n * 2 * plane;
            const double* z1 = z0 + plane;
            double* p0 = p + n * 2 * plane;
            double* p1 = p0 + plane;
            for (std::int64_t i = 0; i < plane; ++i) {
                const double mx = std::max(z0[i], z1[i]);
                const double e0 = std::exp(z0[i] - mx);
                const double e1 = std::exp(z1[i] - mx);
                const double inv = 1.0 / (e0 + e1);
                p0[i] = e0 * inv;
                p1[i] = e1 * inv;
            }
        }
    });
    return out;
}

Tensor softmax2_backward(const Tensor& probs, const Tensor& grad_out) {
    const Batched b = as_batch(probs, "softmax2_backward");
    Tensor::require_shape(grad_out, probs.shape(), "softmax2_backward grad");
    Tensor d(probs.shape());
    const double* p = probs.data();
    const double* g = grad_out.data();
    double* dz = d.data();
    const std::int64_t plane = static_cast<std::int64_t>(b.h) * b.w;
    for (int n = 0; n < b.n; ++n) {
        const std::int64_t base = static_cast<std::int64_t>(n) * 2 * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
            const double dot = p[base + i] * g[base + i] + p[base + plane + i] * g[base + plane + i];
            dz[base + i] = p[base + i] * (g[base + i] - dot);
            dz[base + plane + i] = p[base + plane + i] * (g[base + plane + i] - dot);
        }
    }
    return d;
}

DropoutResult dropout(const Tensor& input, double p, StreamRng& rng) {
    if (p < 0.0 || p >= 1.0)
        throw std::invalid_argument("dropout: probability must be in [0, 1), got " +
                                    std::to_string(p));
    DropoutResult res;
    res.mask.assign(static_cast<std::size_t>(input.size()), 1);
    if (p == 0.0) {
        res.output = input;
        return res;
    }
    res.output = Tensor(input.shape());
    const double scale = 1.0 / (1.0 - p);
    const double* x = input.data();
    double* y = res.output.data();
    const std::int64_t n = input.size();
    for (std::int64_t i = 0; i < n; ++i) {
        if (rng.uniform() < p) {
            res.mask[static_cast<std::size_t>(i)] = 0;
            y[i] = 0.0;
        } else {
            y[i] = x[i] * scale;
        }
    }
    return res;
}

Tensor dropout_apply(const Tensor& input, double p, const std::vector<std::uint8_t>& mask) {
    if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: probability must be in [0, 1)");
    if (mask.size() != static_cast<std::size_t>(input.size()))
        throw ShapeError("dropout_apply: mask size mismatch");
    Tensor out(input.shape());
    const double scale = 1.0 / (1.0 - p);
    const double* x = input.data();
    double* y = out.data();
    const std::int64_t n = input.size();
    for (std::int64_t i = 0; i < n; ++i)
        y[i] = mask[static_cast<std::size_t>(i)] ? x[i] * scale : 0.0;
    return out;
}

Tensor dropout_backward(const std::vector<std::uint8_t>& mask, double p, const Tensor& grad_out) {
    if (mask.size() != static_cast<std::size_t>(grad_out.size()))
        throw ShapeError("dropout_backward: mask size mismatch");
    Tensor d(grad_out.shape());
    const double scale = 1.0 / (1.0 - p);
    const double* g = grad_out.data();
    double* dx = d.data();
    const std::int64_t n = grad_out.size();
    for (std::int64_t i = 0; i < n; ++i)
        dx[i] = mask[static_cast<std::size_t>(i)] ? g[i] * scale : 0.0;
    return d;
}

namespace {

void check_ce_shapes(const Batched& b, const std::vector<DamageMask>& truth) {
    if (b.c != 2) throw ShapeError("weighted_ce: probs must have 2 class channels");
    if (static_cast<int>(truth.size()) != b.n)
        throw ShapeError("weighted_ce: need one truth mask per observation");
    for (const auto& t : truth)
        if (t.h != b.h || t.w != b.w) throw ShapeError("weighted_ce: truth mask shape mismatch");
}

}  // namespace

double weighted_ce(const Tensor& probs, const std::vector<DamageMask>& truth,
                   std::pair<double, double> weights) {
    const Batched b = as_batch(probs, "weighted_ce");
    check_ce_shapes(b, truth);
    const std::int64_t plane = static_cast<std::int64_t>(b.h) * b.w;
    const double* p = probs.data();
    double loss = 0.0;
    for (int n = 0; n < b.n; ++n) {
        const double* p0 = p + static_cast<std::int64_t>(n) * 2 * plane;
        const std::uint8_t* t = truth[static_cast<std::size_t>(n)].labels.data();
        for (std::int64_t i = 0; i < plane; ++i) {
            const double w = t[i] ? weights.second : weights.first;
            const double pt = t[i] ? p0[plane + i] : p0[i];
            loss -= w * std::log(std::max(pt, kProbFloor));
        }
    }
    return loss / static_cast<double>(static_cast<std::int64_t>(b.n) * plane);
}

double weighted_ce(const Tensor& probs, const DamageMask& truth,
                   std::pair<double, double> weights) {
    return weighted_ce(probs, std::vector<DamageMask>{truth}, weights);
}

Tensor weighted_ce_backward(const Tensor& probs, const std::vector<DamageMask>& truth,
                            std::pair<double, double> weights) {
    const Batched b = as_batch(probs, "weighted_ce_backward");
    check_ce_shapes(b, truth);
    const std::int64_t plane = static_cast<std::int64_t>(b.h) * b.w;
    const double inv_nodes = 1.0 / static_cast<double>(static_cast<std::int64_t>(b.n) * plane);
    Tensor d(probs.shape());
    const double* p = probs.data();
    double* dp = d.data();
    for (int n = 0; n < b.n; ++n) {
        const std::int64_t base = static_cast<std::int64_t>(n) * 2 * plane;
        const std::uint8_t* t = truth[static_cast<std::size_t>(n)].labels.data();
        for (std::int64_t i = 0; i < plane; ++i) {
            const std::int64_t at = t[i] ? base + plane + i : base + i;
            const double pt = p[at];
            // derivative of the floored log is zero below the floor
            if (pt > kProbFloor)
                dp[at] = -(t[i] ? weights.second : weights.first) * inv_nodes / pt;
        }
    }
    return d;
}

}  // namespace sdseg
