#include "gradseg/net.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "json.hpp"

namespace gradseg {

namespace nn {

namespace {

// Copies one channel into a zero-padded (n+2)^3 buffer.
void pad_channel(const float* src, int nx, int ny, int nz, float* dst) {
    const int px = nx + 2, py = ny + 2;
    std::memset(dst, 0, sizeof(float) * static_cast<std::size_t>(px) * py * (nz + 2));
    for (int z = 0; z < nz; ++z)
        for (int y = 0; y < ny; ++y)
            std::memcpy(dst + (static_cast<std::size_t>(z + 1) * py + (y + 1)) * px + 1,
                        src + (static_cast<std::size_t>(z) * ny + y) * nx,
                        sizeof(float) * nx);
}

}  // namespace

void Conv::init(int cin_, int cout_, int kernel_, Rng& rng) {
    if (kernel_ != 1 && kernel_ != 3) throw std::invalid_argument("conv kernel must be 1 or 3");
    cin = cin_;
    cout = cout_;
    kernel = kernel_;
    const int k3 = kernel * kernel * kernel;
    w.resize(static_cast<std::size_t>(cout) * cin * k3);
    b.assign(cout, 0.0f);
    const double stddev = std::sqrt(2.0 / (static_cast<double>(cin) * k3));
    for (float& x : w) x = static_cast<float>(rng.normal(0.0, stddev));
    wg.assign(w.size(), 0.0f);
    bg.assign(b.size(), 0.0f);
}

void Conv::zero_grad() {
    std::fill(wg.begin(), wg.end(), 0.0f);
    std::fill(bg.begin(), bg.end(), 0.0f);
}

void Conv::forward(const Tensor4& x, Tensor4& y) const {
    if (x.c != cin) throw std::invalid_argument("conv forward: channel mismatch");
    y.resize(cout, x.nx, x.ny, x.nz);
    const int nx = x.nx, ny = x.ny, nz = x.nz;

    if (kernel == 1) {
#pragma omp parallel for schedule(static)
        for (int oc = 0; oc < cout; ++oc) {
            float* out = y.channel(oc);
            const std::size_t n = x.spatial();
            std::fill(out, out + n, b[oc]);
            for (int ic = 0; ic < cin; ++ic) {
                const float wv = w[static_cast<std::size_t>(oc) * cin + ic];
                const float* in = x.channel(ic);
                for (std::size_t i = 0; i < n; ++i) out[i] += wv * in[i];
            }
        }
        return;
    }

    const int px = nx + 2, py = ny + 2;
    scratch_.resize(static_cast<std::size_t>(cin) * px * py * (nz + 2));
    float* padded = scratch_.data();
    for (int ic = 0; ic < cin; ++ic)
        pad_channel(x.channel(ic), nx, ny, nz, padded + static_cast<std::size_t>(ic) * px * py * (nz + 2));

#pragma omp parallel for schedule(static) collapse(2)
    for (int oc = 0; oc < cout; ++oc) {
        for (int z = 0; z < nz; ++z) {
            std::vector<float> row(nx);
            const float* wbase = w.data() + static_cast<std::size_t>(oc) * cin * 27;
            for (int yy = 0; yy < ny; ++yy) {
                std::fill(row.begin(), row.end(), b[oc]);
                for (int ic = 0; ic < cin; ++ic) {
                    const float* pc = padded + static_cast<std::size_t>(ic) * px * py * (nz + 2);
                    const float* wk = wbase + static_cast<std::size_t>(ic) * 27;
                    for (int dz = 0; dz < 3; ++dz)
                        for (int dy = 0; dy < 3; ++dy) {
                            const float* src =
                                pc + (static_cast<std::size_t>(z + dz) * py + (yy + dy)) * px;
                            const float w0 = wk[(dz * 3 + dy) * 3 + 0];
                            const float w1 = wk[(dz * 3 + dy) * 3 + 1];
                            const float w2 = wk[(dz * 3 + dy) * 3 + 2];
                            for (int xx = 0; xx < nx; ++xx)
                                row[xx] += w0 * src[xx] + w1 * src[xx + 1] + w2 * src[xx + 2];
                        }
                }
                std::memcpy(y.channel(oc) + (static_cast<std::size_t>(z) * ny + yy) * nx,
                            row.data(), sizeof(float) * nx);
            }
        }
    }
}

void Conv::backward(Tensor4& x, const Tensor4& y) {
    const int nx = x.nx, ny = x.ny, nz = x.nz;

    if (kernel == 1) {
        const std::size_t n = x.spatial();
#pragma omp parallel for schedule(static)
        for (int ic = 0; ic < cin; ++ic) {
            float* gin = x.g.data() + static_cast<std::size_t>(ic) * n;
            for (int oc = 0; oc < cout; ++oc) {
                const float wv = w[static_cast<std::size_t>(oc) * cin + ic];
                const float* gout = y.channel_grad(oc);
                for (std::size_t i = 0; i < n; ++i) gin[i] += wv * gout[i];
            }
        }
#pragma omp parallel for schedule(static)
        for (int oc = 0; oc < cout; ++oc) {
            const float* gout = y.channel_grad(oc);
            double bacc = 0.0;
            for (std::size_t i = 0; i < n; ++i) bacc += gout[i];
            bg[oc] += static_cast<float>(bacc);
            for (int ic = 0; ic < cin; ++ic) {
                const float* in = x.channel(ic);
                double acc = 0.0;
                for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(gout[i]) * in[i];
                wg[static_cast<std::size_t>(oc) * cin + ic] += static_cast<float>(acc);
            }
        }
        return;
    }

    const int px = nx + 2, py = ny + 2;
    const std::size_t pchan = static_cast<std::size_t>(px) * py * (nz + 2);

    // Padded output gradients, used by both the input-gradient correlation
    // and the weight-gradient reductions.
    std::vector<float> padg(static_cast<std::size_t>(cout) * pchan);
    for (int oc = 0; oc < cout; ++oc)
        pad_channel(y.channel_grad(oc), nx, ny, nz, padg.data() + static_cast<std::size_t>(oc) * pchan);

#pragma omp parallel for schedule(static) collapse(2)
    for (int ic = 0; ic < cin; ++ic) {
        for (int z = 0; z < nz; ++z) {
            std::vector<float> row(nx);
            float* gin = x.g.data() + static_cast<std::size_t>(ic) * x.spatial();
            for (int yy = 0; yy < ny; ++yy) {
                std::fill(row.begin(), row.end(), 0.0f);
                for (int oc = 0; oc < cout; ++oc) {
                    const float* pg = padg.data() + static_cast<std::size_t>(oc) * pchan;
                    const float* wk = w.data() + (static_cast<std::size_t>(oc) * cin + ic) * 27;
                    for (int dz = 0; dz < 3; ++dz)
                        for (int dy = 0; dy < 3; ++dy) {
                            const float* src =
                                pg + (static_cast<std::size_t>(z + dz) * py + (yy + dy)) * px;
                            // flipped kernel for the correlation
                            const float w0 = wk[((2 - dz) * 3 + (2 - dy)) * 3 + 2];
                            const float w1 = wk[((2 - dz) * 3 + (2 - dy)) * 3 + 1];
                            const float w2 = wk[((2 - dz) * 3 + (2 - dy)) * 3 + 0];
                            for (int xx = 0; xx < nx; ++xx)
                                row[xx] += w0 * src[xx] + w1 * src[xx + 1] + w2 * src[xx + 2];
                        }
                }
                float* dst = gin + (static_cast<std::size_t>(z) * ny + yy) * nx;
                for (int xx = 0; xx < nx; ++xx) dst[xx] += row[xx];
            }
        }
    }

    std::vector<float> padx(static_cast<std::size_t>(cin) * pchan);
    for (int ic = 0; ic < cin; ++ic)
        pad_channel(x.channel(ic), nx, ny, nz, padx.data() + static_cast<std::size_t>(ic) * pchan);

#pragma omp parallel for schedule(static) collapse(2)
    for (int oc = 0; oc < cout; ++oc)
        for (int ic = 0; ic < cin; ++ic) {
            const float* gout = y.channel_grad(oc);
            const float* pc = padx.data() + static_cast<std::size_t>(ic) * pchan;
            float* wdst = wg.data() + (static_cast<std::size_t>(oc) * cin + ic) * 27;
            double acc[27] = {};
            for (int z = 0; z < nz; ++z)
                for (int yy = 0; yy < ny; ++yy) {
                    const float* g = gout + (static_cast<std::size_t>(z) * ny + yy) * nx;
                    for (int dz = 0; dz < 3; ++dz)
                        for (int dy = 0; dy < 3; ++dy) {
                            const float* s =
                                pc + (static_cast<std::size_t>(z + dz) * py + (yy + dy)) * px;
                            double a0 = 0.0, a1 = 0.0, a2 = 0.0;
                            for (int xx = 0; xx < nx; ++xx) {
                                const double gv = g[xx];
                                a0 += gv * s[xx];
                                a1 += gv * s[xx + 1];
                                a2 += gv * s[xx + 2];
                            }
                            acc[(dz * 3 + dy) * 3 + 0] += a0;
                            acc[(dz * 3 + dy) * 3 + 1] += a1;
                            acc[(dz * 3 + dy) * 3 + 2] += a2;
                        }
                }
            for (int k = 0; k < 27; ++k) wdst[k] += static_cast<float>(acc[k]);
        }

#pragma omp parallel for schedule(static)
    for (int oc = 0; oc < cout; ++oc) {
        const float* gout = y.channel_grad(oc);
        double acc = 0.0;
        for (std::size_t i = 0; i < y.spatial(); ++i) acc += gout[i];
        bg[oc] += static_cast<float>(acc);
    }
}

void InstanceNorm::forward(const Tensor4& x, Tensor4& y) {
    y.resize(x.c, x.nx, x.ny, x.nz);
    inv_std.assign(x.c, 0.0);
    const std::size_t n = x.spatial();
#pragma omp parallel for schedule(static)
    for (int c = 0; c < x.c; ++c) {
        const float* in = x.channel(c);
        double sum = 0.0, sumsq = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            sum += in[i];
            sumsq += static_cast<double>(in[i]) * in[i];
        }
        const double mean = sum / static_cast<double>(n);
        const double var = std::max(0.0, sumsq / static_cast<double>(n) - mean * mean);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[c] = is;
        float* out = y.channel(c);
        for (std::size_t i = 0; i < n; ++i)
            out[i] = static_cast<float>((in[i] - mean) * is);
    }
}

void InstanceNorm::backward(Tensor4& x, const Tensor4& y) const {
    const std::size_t n = x.spatial();
#pragma omp parallel for schedule(static)
    for (int c = 0; c < x.c; ++c) {
        const float* yn = y.channel(c);
        const float* gy = y.channel_grad(c);
        float* gx = x.g.data() + static_cast<std::size_t>(c) * n;
        double gsum = 0.0, gysum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            gsum += gy[i];
            gysum += static_cast<double>(gy[i]) * yn[i];
        }
        const double gmean = gsum / static_cast<double>(n);
        const double gymean = gysum / static_cast<double>(n);
        const double is = inv_std[c];
        for (std::size_t i = 0; i < n; ++i)
            gx[i] += static_cast<float>(is * (gy[i] - gmean - yn[i] * gymean));
    }
}

void relu_forward(const Tensor4& x, Tensor4& y) {
    y.resize(x.c, x.nx, x.ny, x.nz);
    for (std::size_t i = 0; i < x.size(); ++i) y.v[i] = x.v[i] > 0.0f ? x.v[i] : 0.0f;
}

void relu_backward(Tensor4& x, const Tensor4& y) {
    for (std::size_t i = 0; i < x.size(); ++i)
        if (x.v[i] > 0.0f) x.g[i] += y.g[i];
}

void sigmoid_forward(const Tensor4& x, Tensor4& y) {
    y.resize(x.c, x.nx, x.ny, x.nz);
    for (std::size_t i = 0; i < x.size(); ++i)
        y.v[i] = 1.0f / (1.0f + std::exp(-x.v[i]));
}

void sigmoid_backward(Tensor4& x, const Tensor4& y) {
    for (std::size_t i = 0; i < x.size(); ++i)
        x.g[i] += y.g[i] * y.v[i] * (1.0f - y.v[i]);
}

void hadamard_forward(const Tensor4& a, const Tensor4& b, Tensor4& y) {
    y.resize(a.c, a.nx, a.ny, a.nz);
    for (std::size_t i = 0; i < a.size(); ++i) y.v[i] = a.v[i] * b.v[i];
}

void hadamard_backward(Tensor4& a, Tensor4& b, const Tensor4& y) {
    for (std::size_t i = 0; i < a.size(); ++i) {
        a.g[i] += y.g[i] * b.v[i];
        b.g[i] += y.g[i] * a.v[i];
    }
}

void avg_pool2_forward(const Tensor4& x, Tensor4& y) {
    if (x.nx % 2 || x.ny % 2 || x.nz % 2)
        throw std::invalid_argument("avg_pool2 needs even dims");
    y.resize(x.c, x.nx / 2, x.ny / 2, x.nz / 2);
    for (int c = 0; c < x.c; ++c) {
        const float* in = x.channel(c);
        float* out = y.channel(c);
        for (int z = 0; z < y.nz; ++z)
            for (int yy = 0; yy < y.ny; ++yy)
                for (int xx = 0; xx < y.nx; ++xx) {
                    float acc = 0.0f;
                    for (int dz = 0; dz < 2; ++dz)
                        for (int dy = 0; dy < 2; ++dy)
                            for (int dx = 0; dx < 2; ++dx)
                                acc += in[(static_cast<std::size_t>(2 * z + dz) * x.ny +
                                           (2 * yy + dy)) * x.nx +
                                          (2 * xx + dx)];
                    out[(static_cast<std::size_t>(z) * y.ny + yy) * y.nx + xx] = acc * 0.125f;
                }
    }
}

void avg_pool2_backward(Tensor4& x, const Tensor4& y) {
    for (int c = 0; c < x.c; ++c) {
        const float* gout = y.channel_grad(c);
        float* gin = x.g.data() + static_cast<std::size_t>(c) * x.spatial();
        for (int z = 0; z < y.nz; ++z)
            for (int yy = 0; yy < y.ny; ++yy)
                for (int xx = 0; xx < y.nx; ++xx) {
                    const float gv =
                        gout[(static_cast<std::size_t>(z) * y.ny + yy) * y.nx + xx] * 0.125f;
                    for (int dz = 0; dz < 2; ++dz)
                        for (int dy = 0; dy < 2; ++dy)
                            for (int dx = 0; dx < 2; ++dx)
                                gin[(static_cast<std::size_t>(2 * z + dz) * x.ny + (2 * yy + dy)) *
                                        x.nx +
                                    (2 * xx + dx)] += gv;
                }
    }
}

void upsample_nearest_forward(const Tensor4& x, int scale, Tensor4& y) {
    y.resize(x.c, x.nx * scale, x.ny * scale, x.nz * scale);
    for (int c = 0; c < x.c; ++c) {
        const float* in = x.channel(c);
        float* out = y.channel(c);
        for (int z = 0; z < y.nz; ++z)
            for (int yy = 0; yy < y.ny; ++yy)
                for (int xx = 0; xx < y.nx; ++xx)
                    out[(static_cast<std::size_t>(z) * y.ny + yy) * y.nx + xx] =
                        in[(static_cast<std::size_t>(z / scale) * x.ny + (yy / scale)) * x.nx +
                           (xx / scale)];
    }
}

void upsample_nearest_backward(Tensor4& x, int scale, const Tensor4& y) {
    for (int c = 0; c < x.c; ++c) {
        const float* gout = y.channel_grad(c);
        float* gin = x.g.data() + static_cast<std::size_t>(c) * x.spatial();
        for (int z = 0; z < y.nz; ++z)
            for (int yy = 0; yy < y.ny; ++yy)
                for (int xx = 0; xx < y.nx; ++xx)
                    gin[(static_cast<std::size_t>(z / scale) * x.ny + (yy / scale)) * x.nx +
                        (xx / scale)] +=
                        gout[(static_cast<std::size_t>(z) * y.ny + yy) * y.nx + xx];
    }
}

namespace {

struct LinearTap {
    int lo;
    float w_lo;  // weight of lo; hi = lo+1 gets 1-w_lo (clamped at edges)
};

std::vector<LinearTap> linear_taps(int n_out, int n_in, int scale) {
    std::vector<LinearTap> taps(n_out);
    for (int i = 0; i < n_out; ++i) {
        const double src = (i + 0.5) / scale - 0.5;
        double f = std::floor(src);
        double t = src - f;
        int lo = static_cast<int>(f);
        if (lo < 0) {
            lo = 0;
            t = 0.0;
        }
        if (lo >= n_in - 1) {
            lo = n_in - 1;
            t = 0.0;
        }
        taps[i] = {lo, static_cast<float>(1.0 - t)};
    }
    return taps;
}

}  // namespace

void upsample_trilinear_forward(const Tensor4& x, int scale, Tensor4& y) {
    y.resize(x.c, x.nx * scale, x.ny * scale, x.nz * scale);
    const auto tx = linear_taps(y.nx, x.nx, scale);
    const auto ty = linear_taps(y.ny, x.ny, scale);
    const auto tz = linear_taps(y.nz, x.nz, scale);
    auto in_at = [&](const float* in, int xx, int yy, int zz) {
        return in[(static_cast<std::size_t>(zz) * x.ny + yy) * x.nx + xx];
    };
    for (int c = 0; c < x.c; ++c) {
        const float* in = x.channel(c);
        float* out = y.channel(c);
        for (int z = 0; z < y.nz; ++z)
            for (int yy = 0; yy < y.ny; ++yy)
                for (int xx = 0; xx < y.nx; ++xx) {
                    const auto& ax = tx[xx];
                    const auto& ay = ty[yy];
                    const auto& az = tz[z];
                    const int x1 = std::min(ax.lo + 1, x.nx - 1);
                    const int y1 = std::min(ay.lo + 1, x.ny - 1);
                    const int z1 = std::min(az.lo + 1, x.nz - 1);
                    float acc = 0.0f;
                    for (int k = 0; k < 8; ++k) {
                        const int sx = (k & 1) ? x1 : ax.lo;
                        const int sy = (k & 2) ? y1 : ay.lo;
                        const int sz = (k & 4) ? z1 : az.lo;
                        const float wv = ((k & 1) ? 1.0f - ax.w_lo : ax.w_lo) *
                                         ((k & 2) ? 1.0f - ay.w_lo : ay.w_lo) *
                                         ((k & 4) ? 1.0f - az.w_lo : az.w_lo);
                        acc += wv * in_at(in, sx, sy, sz);
                    }
                    out[(static_cast<std::size_t>(z) * y.ny + yy) * y.nx + xx] = acc;
                }
    }
}

void upsample_trilinear_backward(Tensor4& x, int scale, const Tensor4& y) {
    const auto tx = linear_taps(y.nx, x.nx, scale);
    const auto ty = linear_taps(y.ny, x.ny, scale);
    const auto tz = linear_taps(y.nz, x.nz, scale);
    for (int c = 0; c < x.c; ++c) {
        const float* gout = y.channel_grad(c);
        float* gin = x.g.data() + static_cast<std::size_t>(c) * x.spatial();
        for (int z = 0; z < y.nz; ++z)
            for (int yy = 0; yy < y.ny; ++yy)
                for (int xx = 0; xx < y.nx; ++xx) {
                    const auto& ax = tx[xx];
                    const auto& ay = ty[yy];
                    const auto& az = tz[z];
                    const int x1 = std::min(ax.lo + 1, x.nx - 1);
                    const int y1 = std::min(ay.lo + 1, x.ny - 1);
                    const int z1 = std::min(az.lo + 1, x.nz - 1);
                    const float gv = gout[(static_cast<std::size_t>(z) * y.ny + yy) * y.nx + xx];
                    for (int k = 0; k < 8; ++k) {
                        const int sx = (k & 1) ? x1 : ax.lo;
                        const int sy = (k & 2) ? y1 : ay.lo;
                        const int sz = (k & 4) ? z1 : az.lo;
                        const float wv = ((k & 1) ? 1.0f - ax.w_lo : ax.w_lo) *
                                         ((k & 2) ? 1.0f - ay.w_lo : ay.w_lo) *
                                         ((k & 4) ? 1.0f - az.w_lo : az.w_lo);
                        gin[(static_cast<std::size_t>(sz) * x.ny + sy) * x.nx + sx] += wv * gv;
                    }
                }
    }
}

}  // namespace nn

// ---------------------------------------------------------------------------
// NetSpec
// ---------------------------------------------------------------------------

int NetSpec::group_count() const {
    int g = 0;
    for (const BlockSpec& b : blocks) g = std::max(g, b.group + 1);
    return g;
}

std::vector<int> NetSpec::block_scales() const {
    std::vector<int> s(blocks.size(), 1);
    int cur = 1;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        if (blocks[i].role == BlockRole::Down) cur *= 2;
        if (blocks[i].role == BlockRole::Up) cur /= 2;
        s[i] = cur;
    }
    return s;
}

int NetSpec::decoder_start() const {
    for (std::size_t i = 0; i < blocks.size(); ++i)
        if (blocks[i].role == BlockRole::Up) return static_cast<int>(i);
    return static_cast<int>(blocks.size());
}

std::vector<std::vector<int>> NetSpec::pyramid_members() const {
    std::vector<std::vector<int>> m(group_count());
    for (std::size_t i = 0; i < blocks.size(); ++i)
        if (blocks[i].pyramid) m[blocks[i].group].push_back(static_cast<int>(i));
    return m;
}

int NetSpec::prediction_group() const { return blocks.back().group; }

bool NetSpec::group_is_decoder_side(int gid) const {
    const int ds = decoder_start();
    int last = -1;
    for (std::size_t i = 0; i < blocks.size(); ++i)
        if (blocks[i].group == gid) last = static_cast<int>(i);
    return last >= ds;
}

void NetSpec::validate() const {
    if (blocks.empty()) throw std::invalid_argument("net spec has no blocks");
    if (input_channels < 1) throw std::invalid_argument("input_channels must be >= 1");
    if (pyramid_channels < 1) throw std::invalid_argument("pyramid_channels must be >= 1");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0))
        throw std::invalid_argument("dropout_p must be in [0,1)");

    const auto scales = block_scales();
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const BlockSpec& b = blocks[i];
        if (b.attention_stages != 1 && b.attention_stages != 2)
            throw std::invalid_argument("attention_stages must be 1 or 2");
        if (b.conv_kernel != 1 && b.conv_kernel != 3)
            throw std::invalid_argument("conv_kernel must be 1 or 3");
        if (scales[i] < 1) throw std::invalid_argument("upsampling below full resolution");
        int expected_in;
        if (i == 0) {
            if (b.role != BlockRole::Plain)
                throw std::invalid_argument("first block must be Plain");
            expected_in = input_channels;
        } else if (b.role == BlockRole::Up) {
            if (b.skip_from < 0 || b.skip_from >= static_cast<int>(i))
                throw std::invalid_argument("Up block needs a valid skip_from");
            if (scales[b.skip_from] != scales[i])
                throw std::invalid_argument("skip connection resolution mismatch");
            expected_in = blocks[i - 1].out_channels + blocks[b.skip_from].out_channels;
        } else {
            expected_in = blocks[i - 1].out_channels;
        }
        if (b.in_channels != expected_in)
            throw std::invalid_argument("block " + std::to_string(i) +
                                        " in_channels mismatch: expected " +
                                        std::to_string(expected_in));
        if (b.group < 0) throw std::invalid_argument("negative group id");
    }
    // groups must form a contiguous 0..G-1 range and each needs a pyramid
    const auto members = pyramid_members();
    for (std::size_t g = 0; g < members.size(); ++g) {
        bool used = false;
        for (const BlockSpec& b : blocks) used |= b.group == static_cast<int>(g);
        if (!used) throw std::invalid_argument("group ids must be contiguous");
        if (members[g].empty())
            throw std::invalid_argument("group " + std::to_string(g) + " has no pyramid members");
    }
}

NetSpec NetSpec::desk_default() {
    NetSpec s;
    s.input_channels = 1;
    s.pyramid_channels = 2;
    s.dropout_p = 0.3;
    auto add = [&](int in, int out, int attn, BlockRole role, int skip = -1) {
        BlockSpec b;
        b.in_channels = in;
        b.out_channels = out;
        b.attention_stages = attn;
        b.role = role;
        b.skip_from = skip;
        s.blocks.push_back(b);
    };
    add(1, 4, 1, BlockRole::Plain);
    add(4, 8, 2, BlockRole::Down);
    add(8, 8, 2, BlockRole::Plain);
    add(8, 16, 2, BlockRole::Down);
    add(16, 16, 2, BlockRole::Plain);
    add(16, 16, 2, BlockRole::Plain);
    add(24, 8, 2, BlockRole::Up, 2);
    add(8, 8, 2, BlockRole::Plain);
    add(12, 4, 1, BlockRole::Up, 0);
    add(4, 4, 1, BlockRole::Plain);
    apply_scheme(s, SupervisionScheme{});
    return s;
}

NetSpec NetSpec::toy() {
    NetSpec s;
    s.input_channels = 1;
    s.pyramid_channels = 2;
    s.dropout_p = 0.0;
    auto add = [&](int in, int out, int attn, BlockRole role, int skip = -1) {
        BlockSpec b;
        b.in_channels = in;
        b.out_channels = out;
        b.attention_stages = attn;
        b.role = role;
        b.skip_from = skip;
        s.blocks.push_back(b);
    };
    add(1, 4, 2, BlockRole::Plain);
    add(4, 8, 2, BlockRole::Down);
    add(12, 8, 2, BlockRole::Up, 0);
    add(8, 4, 1, BlockRole::Plain);
    apply_scheme(s, SupervisionScheme{});
    return s;
}

SupervisionScheme SupervisionScheme::parse(const std::string& text, double ae, double ad) {
    SupervisionScheme s;
    s.alpha_e = ae;
    s.alpha_d = ad;
    if (text == "final") {
        s.kind = SupervisionKind::Final;
    } else if (text == "deep") {
        s.kind = SupervisionKind::Deep;
    } else if (text == "per-block") {
        s.kind = SupervisionKind::PerBlock;
    } else if (text.rfind("groups", 0) == 0) {
        s.kind = SupervisionKind::Groups;
        std::string rest = text.substr(6);
        s.k = 2;
        s.mode = GroupMode::Successive;
        if (!rest.empty()) {
            if (rest[0] != '-') throw std::invalid_argument("bad scheme '" + text + "'");
            rest = rest.substr(1);
            const auto dash = rest.find('-');
            const std::string num = dash == std::string::npos ? rest : rest.substr(0, dash);
            s.k = std::stoi(num);
            if (dash != std::string::npos) {
                const std::string mode = rest.substr(dash + 1);
                if (mode == "cross") s.mode = GroupMode::Cross;
                else if (mode == "successive") s.mode = GroupMode::Successive;
                else throw std::invalid_argument("bad group mode '" + mode + "'");
            }
        }
    } else {
        throw std::invalid_argument("unknown supervision scheme '" + text + "'");
    }
    return s;
}

std::string SupervisionScheme::name() const {
    switch (kind) {
        case SupervisionKind::Final: return "final";
        case SupervisionKind::Deep: return "deep";
        case SupervisionKind::PerBlock: return "per-block";
        case SupervisionKind::Groups:
            return "groups-" + std::to_string(k) +
                   (mode == GroupMode::Cross ? "-cross" : "-successive");
    }
    return "groups";
}

void apply_scheme(NetSpec& spec, const SupervisionScheme& scheme) {
    const int n = static_cast<int>(spec.blocks.size());
    const int ds = spec.decoder_start();
    for (BlockSpec& b : spec.blocks) b.pyramid = true;

    switch (scheme.kind) {
        case SupervisionKind::Final:
            for (BlockSpec& b : spec.blocks) {
                b.group = 0;
                b.pyramid = false;
            }
            spec.blocks.back().pyramid = true;
            break;
        case SupervisionKind::PerBlock:
            for (int i = 0; i < n; ++i) spec.blocks[i].group = i;
            break;
        case SupervisionKind::Deep: {
            int stage = 0;
            for (int i = 0; i < n; ++i) {
                if (i > 0 && spec.blocks[i].role != BlockRole::Plain) ++stage;
                spec.blocks[i].group = stage;
            }
            break;
        }
        case SupervisionKind::Groups: {
            const int k = std::max(1, scheme.k);
            if (k == 1) {
                for (BlockSpec& b : spec.blocks) b.group = 0;
                break;
            }
            const int kd = k / 2;
            const int ke = k - kd;
            auto assign = [&](int lo, int hi, int base, int parts) {
                const int count = hi - lo;
                if (count <= 0) return;
                if (scheme.mode == GroupMode::Cross) {
                    for (int i = lo; i < hi; ++i)
                        spec.blocks[i].group = base + (i - lo) % parts;
                    return;
                }
                for (int i = lo; i < hi; ++i) {
                    int part = (i - lo) * parts / count;
                    spec.blocks[i].group = base + part;
                }
            };
            assign(0, ds, 0, ke);
            assign(ds, n, ke, kd > 0 ? kd : 1);
            break;
        }
    }
}

// ---------------------------------------------------------------------------
// Net
// ---------------------------------------------------------------------------

struct Net::BlockState {
    nn::Conv conv;
    nn::InstanceNorm norm;
    nn::Conv attn1, attn2;  // 1x1 convs to a single-channel soft mask
    nn::Conv pyr;           // 1x1 projection feeding the group pyramid

    Tensor4 pooled;    // Down: pooled input
    Tensor4 upcat;     // Up: upsampled previous output ++ skip
    Tensor4 conv_out;  // pre-norm
    Tensor4 norm_out;
    Tensor4 relu_out;  // f_0
    Tensor4 attn1_pre, attn1_sig, attn1_out;  // first attention stage
    Tensor4 attn2_pre, attn2_sig, attn2_out;  // second stage (optional)
    Tensor4 pyr_pre;  // pyramid projection at block resolution
    Tensor4 fg;       // pyramid contribution at full resolution
    bool pyramid_computed = false;

    Tensor4& fb(const BlockSpec& spec) {
        return spec.attention_stages == 2 ? attn2_out : attn1_out;
    }
    const Tensor4& fb(const BlockSpec& spec) const {
        return spec.attention_stages == 2 ? attn2_out : attn1_out;
    }
};

struct Net::GroupState {
    std::vector<int> members;
    nn::Conv head;
    Tensor4 concat;
    Tensor4 dropped;
    Tensor4 logit;
    Tensor4 prob;
    std::vector<std::uint8_t> keep;  // mask used by the last forward (empty = off)
    float scale = 1.0f;
};

Net::~Net() = default;
Net::Net(Net&&) noexcept = default;
Net& Net::operator=(Net&&) noexcept = default;
Net::Net(const Net&) = default;
Net& Net::operator=(const Net&) = default;

Net::Net(NetSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    spec_.validate();
    scales_ = spec_.block_scales();
    Rng rng(derive_seed(seed, 0xC0FFEE));

    blocks_.resize(spec_.blocks.size());
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const BlockSpec& b = spec_.blocks[i];
        blocks_[i].conv.init(b.in_channels, b.out_channels, b.conv_kernel, rng);
        blocks_[i].attn1.init(b.out_channels, 1, 1, rng);
        if (b.attention_stages == 2) blocks_[i].attn2.init(b.out_channels, 1, 1, rng);
        blocks_[i].pyr.init(b.out_channels, spec_.pyramid_channels, 1, rng);
    }
    const auto members = spec_.pyramid_members();
    groups_.resize(members.size());
    for (std::size_t g = 0; g < members.size(); ++g) {
        groups_[g].members = members[g];
        groups_[g].head.init(spec_.pyramid_channels * static_cast<int>(members[g].size()), 1, 1,
                             rng);
    }
}

DropoutPlan Net::draw_dropout(Rng& rng) const {
    DropoutPlan plan;
    plan.p = spec_.dropout_p;
    plan.keep.resize(groups_.size());
    for (std::size_t g = 0; g < groups_.size(); ++g) {
        const std::size_t channels = spec_.pyramid_channels * groups_[g].members.size();
        plan.keep[g].resize(channels);
        for (std::size_t c = 0; c < channels; ++c)
            plan.keep[g][c] = rng.bernoulli(plan.p) ? 0 : 1;
    }
    return plan;
}

namespace {

void check_finite(const Tensor4& t, const std::string& where) {
    for (float v : t.v)
        if (!std::isfinite(v))
            throw std::runtime_error("non-finite activation in " + where);
}

}  // namespace

void Net::block_forward(int i, const Tensor4& input) {
    const BlockSpec& spec = spec_.blocks[i];
    BlockState& st = blocks_[i];

    const Tensor4* x = nullptr;
    if (i == 0) {
        x = &input;
    } else if (spec.role == BlockRole::Down) {
        nn::avg_pool2_forward(blocks_[i - 1].fb(spec_.blocks[i - 1]), st.pooled);
        x = &st.pooled;
    } else if (spec.role == BlockRole::Up) {
        const Tensor4& prev = blocks_[i - 1].fb(spec_.blocks[i - 1]);
        const Tensor4& skip = blocks_[spec.skip_from].fb(spec_.blocks[spec.skip_from]);
        Tensor4 up;
        nn::upsample_nearest_forward(prev, 2, up);
        st.upcat.resize(up.c + skip.c, up.nx, up.ny, up.nz);
        std::memcpy(st.upcat.v.data(), up.v.data(), sizeof(float) * up.size());
        std::memcpy(st.upcat.v.data() + up.size(), skip.v.data(), sizeof(float) * skip.size());
        x = &st.upcat;
    } else {
        x = &blocks_[i - 1].fb(spec_.blocks[i - 1]);
    }

    st.conv.forward(*x, st.conv_out);
    if (spec.normalize) {
        st.norm.forward(st.conv_out, st.norm_out);
    } else {
        st.norm_out.resize(st.conv_out.c, st.conv_out.nx, st.conv_out.ny, st.conv_out.nz);
        st.norm_out.v = st.conv_out.v;
    }
    nn::relu_forward(st.norm_out, st.relu_out);

    st.attn1.forward(st.relu_out, st.attn1_pre);
    nn::sigmoid_forward(st.attn1_pre, st.attn1_sig);
    st.attn1_out.resize(st.relu_out.c, st.relu_out.nx, st.relu_out.ny, st.relu_out.nz);
    {
        const float* s = st.attn1_sig.channel(0);
        for (int c = 0; c < st.relu_out.c; ++c) {
            const float* f = st.relu_out.channel(c);
            float* o = st.attn1_out.channel(c);
            for (std::size_t k = 0; k < st.relu_out.spatial(); ++k) o[k] = s[k] * f[k];
        }
    }
    if (spec.attention_stages == 2) {
        st.attn2.forward(st.attn1_out, st.attn2_pre);
        nn::sigmoid_forward(st.attn2_pre, st.attn2_sig);
        st.attn2_out.resize(st.attn1_out.c, st.attn1_out.nx, st.attn1_out.ny, st.attn1_out.nz);
        const float* s = st.attn2_sig.channel(0);
        for (int c = 0; c < st.attn1_out.c; ++c) {
            const float* f = st.attn1_out.channel(c);
            float* o = st.attn2_out.channel(c);
            for (std::size_t k = 0; k < st.attn1_out.spatial(); ++k) o[k] = s[k] * f[k];
        }
    }
    check_finite(st.fb(spec), "block " + std::to_string(i));

    st.pyramid_computed = false;
    if (spec.pyramid &&
        (!only_final_head_ || spec.group == spec_.prediction_group())) {
        st.pyr.forward(st.fb(spec), st.pyr_pre);
        if (scales_[i] == 1) {
            st.fg = st.pyr_pre;  // already at full resolution
        } else if (spec_.trilinear_pyramid) {
            nn::upsample_trilinear_forward(st.pyr_pre, scales_[i], st.fg);
        } else {
            nn::upsample_nearest_forward(st.pyr_pre, scales_[i], st.fg);
        }
        st.pyramid_computed = true;
    }
}

void Net::forward(const Tensor4& input, const DropoutPlan* dropout, bool only_final_head) {
    if (input.c != spec_.input_channels)
        throw std::invalid_argument("net forward: input channel mismatch");
    int max_scale = 1;
    for (int s : scales_) max_scale = std::max(max_scale, s);
    if (input.nx % max_scale || input.ny % max_scale || input.nz % max_scale)
        throw std::invalid_argument("input dims must be divisible by the net's max scale");

    only_final_head_ = only_final_head;
    input_copy_ = input;

    for (int i = 0; i < block_count(); ++i) block_forward(i, input_copy_);

    const int pred_group = spec_.prediction_group();
    for (std::size_t g = 0; g < groups_.size(); ++g) {
        GroupState& gs = groups_[g];
        if (only_final_head && static_cast<int>(g) != pred_group) {
            gs.keep.clear();
            continue;
        }
        const int pc = spec_.pyramid_channels;
        const Tensor4& first = blocks_[gs.members[0]].fg;
        gs.concat.resize(pc * static_cast<int>(gs.members.size()), first.nx, first.ny, first.nz);
        std::size_t offset = 0;
        for (int bi : gs.members) {
            std::memcpy(gs.concat.v.data() + offset, blocks_[bi].fg.v.data(),
                        sizeof(float) * blocks_[bi].fg.size());
            offset += blocks_[bi].fg.size();
        }
        gs.dropped = gs.concat;
        if (dropout && dropout->p > 0.0) {
            gs.keep = dropout->keep[g];
            gs.scale = static_cast<float>(1.0 / (1.0 - dropout->p));
            for (int c = 0; c < gs.dropped.c; ++c) {
                float* ch = gs.dropped.channel(c);
                const float mult = gs.keep[c] ? gs.scale : 0.0f;
                for (std::size_t k = 0; k < gs.dropped.spatial(); ++k) ch[k] *= mult;
            }
        } else {
            gs.keep.clear();
            gs.scale = 1.0f;
        }
        gs.head.forward(gs.dropped, gs.logit);
        nn::sigmoid_forward(gs.logit, gs.prob);
        check_finite(gs.prob, "group head " + std::to_string(g));
    }
    have_forward_ = true;
}

Tensor4& Net::group_prediction(int gid) { return groups_.at(gid).prob; }

const Tensor4& Net::prediction() const { return groups_.at(spec_.prediction_group()).prob; }

void Net::backward() {
    if (!have_forward_) throw std::logic_error("backward without forward");

    // Clear intermediate gradients; parameter gradients accumulate until
    // zero_grad().
    input_copy_.zero_grad();
    for (BlockState& st : blocks_) {
        st.pooled.zero_grad();
        st.upcat.zero_grad();
        st.conv_out.zero_grad();
        st.norm_out.zero_grad();
        st.relu_out.zero_grad();
        st.attn1_pre.zero_grad();
        st.attn1_sig.zero_grad();
        st.attn1_out.zero_grad();
        st.attn2_pre.zero_grad();
        st.attn2_sig.zero_grad();
        st.attn2_out.zero_grad();
        st.pyr_pre.zero_grad();
        st.fg.zero_grad();
    }
    for (GroupState& gs : groups_) {
        gs.concat.zero_grad();
        gs.dropped.zero_grad();
        gs.logit.zero_grad();
    }

    const int pred_group = spec_.prediction_group();
    for (std::size_t g = 0; g < groups_.size(); ++g) {
        GroupState& gs = groups_[g];
        if (only_final_head_ && static_cast<int>(g) != pred_group) continue;
        nn::sigmoid_backward(gs.logit, gs.prob);
        gs.head.backward(gs.dropped, gs.logit);
        if (!gs.keep.empty()) {
            for (int c = 0; c < gs.dropped.c; ++c) {
                const float mult = gs.keep[c] ? gs.scale : 0.0f;
                const float* gd = gs.dropped.channel_grad(c);
                float* gc = gs.concat.g.data() + static_cast<std::size_t>(c) * gs.concat.spatial();
                for (std::size_t k = 0; k < gs.concat.spatial(); ++k) gc[k] += gd[k] * mult;
            }
        } else {
            for (std::size_t k = 0; k < gs.concat.size(); ++k)
                gs.concat.g[k] += gs.dropped.g[k];
        }
        std::size_t offset = 0;
        for (int bi : gs.members) {
            Tensor4& fg = blocks_[bi].fg;
            for (std::size_t k = 0; k < fg.size(); ++k) fg.g[k] += gs.concat.g[offset + k];
            offset += fg.size();
        }
    }

    for (int i = block_count() - 1; i >= 0; --i) block_backward(i, input_copy_);
    have_forward_ = false;
}

void Net::block_backward(int i, Tensor4& input) {
    const BlockSpec& spec = spec_.blocks[i];
    BlockState& st = blocks_[i];
    Tensor4& fb = st.fb(spec);

    if (st.pyramid_computed) {
        if (scales_[i] == 1) {
            for (std::size_t k = 0; k < st.pyr_pre.size(); ++k) st.pyr_pre.g[k] += st.fg.g[k];
        } else if (spec_.trilinear_pyramid) {
            nn::upsample_trilinear_backward(st.pyr_pre, scales_[i], st.fg);
        } else {
            nn::upsample_nearest_backward(st.pyr_pre, scales_[i], st.fg);
        }
        st.pyr.backward(fb, st.pyr_pre);
    }

    // second attention stage: fb = s2 ⊙ f1
    if (spec.attention_stages == 2) {
        const float* s = st.attn2_sig.channel(0);
        float* gs = st.attn2_sig.channel_grad(0);
        for (int c = 0; c < st.attn1_out.c; ++c) {
            const float* f = st.attn1_out.channel(c);
            const float* go = st.attn2_out.channel_grad(c);
            float* gf = st.attn1_out.g.data() + static_cast<std::size_t>(c) * st.attn1_out.spatial();
            for (std::size_t k = 0; k < st.attn1_out.spatial(); ++k) {
                gs[k] += go[k] * f[k];
                gf[k] += go[k] * s[k];
            }
        }
        nn::sigmoid_backward(st.attn2_pre, st.attn2_sig);
        st.attn2.backward(st.attn1_out, st.attn2_pre);
    }

    // first attention stage: f1 = s1 ⊙ f0
    {
        const float* s = st.attn1_sig.channel(0);
        float* gs = st.attn1_sig.channel_grad(0);
        for (int c = 0; c < st.relu_out.c; ++c) {
            const float* f = st.relu_out.channel(c);
            const float* go = st.attn1_out.channel_grad(c);
            float* gf = st.relu_out.g.data() + static_cast<std::size_t>(c) * st.relu_out.spatial();
            for (std::size_t k = 0; k < st.relu_out.spatial(); ++k) {
                gs[k] += go[k] * f[k];
                gf[k] += go[k] * s[k];
            }
        }
        nn::sigmoid_backward(st.attn1_pre, st.attn1_sig);
        st.attn1.backward(st.relu_out, st.attn1_pre);
    }

    nn::relu_backward(st.norm_out, st.relu_out);
    if (spec.normalize) {
        st.norm.backward(st.conv_out, st.norm_out);
    } else {
        for (std::size_t k = 0; k < st.conv_out.size(); ++k)
            st.conv_out.g[k] += st.norm_out.g[k];
    }

    if (i == 0) {
        st.conv.backward(input, st.conv_out);
        return;
    }
    Tensor4& prev_fb = blocks_[i - 1].fb(spec_.blocks[i - 1]);
    if (spec.role == BlockRole::Down) {
        st.conv.backward(st.pooled, st.conv_out);
        nn::avg_pool2_backward(prev_fb, st.pooled);
    } else if (spec.role == BlockRole::Up) {
        st.conv.backward(st.upcat, st.conv_out);
        // split the concatenated gradient: upsampled previous output, skip
        Tensor4 up(prev_fb.c, st.upcat.nx, st.upcat.ny, st.upcat.nz);
        std::memcpy(up.g.data(), st.upcat.g.data(), sizeof(float) * up.size());
        nn::upsample_nearest_backward(prev_fb, 2, up);
        Tensor4& skip_fb = blocks_[spec.skip_from].fb(spec_.blocks[spec.skip_from]);
        const float* gsrc = st.upcat.g.data() + up.size();
        for (std::size_t k = 0; k < skip_fb.size(); ++k) skip_fb.g[k] += gsrc[k];
    } else {
        st.conv.backward(prev_fb, st.conv_out);
    }
}

void Net::zero_grad() {
    for (BlockState& st : blocks_) {
        st.conv.zero_grad();
        st.attn1.zero_grad();
        if (!st.attn2.w.empty()) st.attn2.zero_grad();
        st.pyr.zero_grad();
    }
    for (GroupState& gs : groups_) gs.head.zero_grad();
}

std::vector<Net::Param> Net::parameters() {
    std::vector<Param> out;
    auto add = [&](const std::string& name, nn::Conv& c) {
        if (c.w.empty()) return;
        out.push_back({name + ".w", &c.w, &c.wg});
        out.push_back({name + ".b", &c.b, &c.bg});
    };
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const std::string p = "block" + std::to_string(i);
        add(p + ".conv", blocks_[i].conv);
        add(p + ".attn1", blocks_[i].attn1);
        add(p + ".attn2", blocks_[i].attn2);
        add(p + ".pyr", blocks_[i].pyr);
    }
    for (std::size_t g = 0; g < groups_.size(); ++g)
        add("group" + std::to_string(g) + ".head", groups_[g].head);
    return out;
}

const Tensor4& Net::block_output(int i) const { return blocks_.at(i).fb(spec_.blocks.at(i)); }

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

nlohmann::json spec_to_json(const NetSpec& s) {
    nlohmann::json j;
    j["input_channels"] = s.input_channels;
    j["pyramid_channels"] = s.pyramid_channels;
    j["dropout_p"] = s.dropout_p;
    j["trilinear_pyramid"] = s.trilinear_pyramid;
    j["blocks"] = nlohmann::json::array();
    for (const BlockSpec& b : s.blocks) {
        nlohmann::json jb;
        jb["in"] = b.in_channels;
        jb["out"] = b.out_channels;
        jb["attention_stages"] = b.attention_stages;
        jb["role"] = b.role == BlockRole::Plain ? "plain"
                     : b.role == BlockRole::Down ? "down"
                                                 : "up";
        jb["skip_from"] = b.skip_from;
        jb["group"] = b.group;
        jb["pyramid"] = b.pyramid;
        jb["kernel"] = b.conv_kernel;
        jb["normalize"] = b.normalize;
        j["blocks"].push_back(jb);
    }
    return j;
}

NetSpec spec_from_json(const nlohmann::json& j) {
    NetSpec s;
    s.input_channels = j.at("input_channels").get<int>();
    s.pyramid_channels = j.at("pyramid_channels").get<int>();
    s.dropout_p = j.at("dropout_p").get<double>();
    s.trilinear_pyramid = j.at("trilinear_pyramid").get<bool>();
    for (const auto& jb : j.at("blocks")) {
        BlockSpec b;
        b.in_channels = jb.at("in").get<int>();
        b.out_channels = jb.at("out").get<int>();
        b.attention_stages = jb.at("attention_stages").get<int>();
        const std::string role = jb.at("role").get<std::string>();
        b.role = role == "plain" ? BlockRole::Plain
                 : role == "down" ? BlockRole::Down
                                  : BlockRole::Up;
        b.skip_from = jb.at("skip_from").get<int>();
        b.group = jb.at("group").get<int>();
        b.pyramid = jb.at("pyramid").get<bool>();
        b.conv_kernel = jb.at("kernel").get<int>();
        b.normalize = jb.value("normalize", true);
        s.blocks.push_back(b);
    }
    return s;
}

void write_u32(std::ostream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t read_u32(std::istream& in) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}

}  // namespace

void Net::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out << "GSNET 1\n";
    const std::string js = spec_to_json(spec_).dump();
    write_u32(out, static_cast<std::uint32_t>(js.size()));
    out.write(js.data(), static_cast<std::streamsize>(js.size()));

    Net& self = const_cast<Net&>(*this);
    for (const Param& p : self.parameters()) {
        write_u32(out, 1);
        write_u32(out, static_cast<std::uint32_t>(p.value->size()));
        out.write(reinterpret_cast<const char*>(p.value->data()),
                  static_cast<std::streamsize>(p.value->size() * sizeof(float)));
    }
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

Net Net::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::invalid_argument("cannot open checkpoint: " + path.string());
    std::string magic;
    std::getline(in, magic);
    if (magic != "GSNET 1") throw std::invalid_argument("bad checkpoint magic");
    const std::uint32_t jlen = read_u32(in);
    std::string js(jlen, '\0');
    in.read(js.data(), jlen);
    const NetSpec spec = spec_from_json(nlohmann::json::parse(js));

    Net net(spec, 0);
    for (const Param& p : net.parameters()) {
        const std::uint32_t ndims = read_u32(in);
        std::size_t total = 1;
        for (std::uint32_t d = 0; d < ndims; ++d) total *= read_u32(in);
        if (total != p.value->size())
            throw std::invalid_argument("checkpoint tensor size mismatch at " + p.name);
        in.read(reinterpret_cast<char*>(p.value->data()),
                static_cast<std::streamsize>(total * sizeof(float)));
    }
    if (!in) throw std::invalid_argument("truncated checkpoint: " + path.string());
    return net;
}

// ---------------------------------------------------------------------------
// Probes
// ---------------------------------------------------------------------------

AttentionMaps attention_probe(const Net& net, const Spacing& spacing) {
    AttentionMaps maps;
    const auto scales = net.spec().block_scales();
    for (int i = 0; i < net.block_count(); ++i) {
        const Tensor4& fb = net.block_output(i);
        const int s = scales[i];
        Volume o({fb.nx, fb.ny, fb.nz}, {spacing.sx * s, spacing.sy * s, spacing.sz * s},
                 ElementKind::Probability);
        Volume g = o;
        double omax = 0.0, gmax = 0.0;
        std::vector<double> osum(fb.spatial(), 0.0), gsum(fb.spatial(), 0.0);
        for (int c = 0; c < fb.c; ++c) {
            const float* fv = fb.channel(c);
            const float* fgr = fb.channel_grad(c);
            for (std::size_t k = 0; k < fb.spatial(); ++k) {
                osum[k] += std::abs(fv[k]);
                gsum[k] += std::abs(fgr[k]);
            }
        }
        for (std::size_t k = 0; k < fb.spatial(); ++k) {
            omax = std::max(omax, osum[k]);
            gmax = std::max(gmax, gsum[k]);
        }
        for (std::size_t k = 0; k < fb.spatial(); ++k) {
            o.data[k] = omax > 0.0 ? static_cast<float>(osum[k] / omax) : 0.0f;
            g.data[k] = gmax > 0.0 ? static_cast<float>(gsum[k] / gmax) : 0.0f;
        }
        maps.output.push_back(std::move(o));
        maps.gradient.push_back(std::move(g));
    }
    return maps;
}

ProbeTrace erosion_dilation_probe(const Volume& fg_template, double seed_ratio, int layers,
                                  const std::array<float, 27>* kernel) {
    if (fg_template.kind != ElementKind::Binary)
        throw std::invalid_argument("probe template must be binary");
    if (layers < 0) throw std::invalid_argument("layers must be >= 0");

    std::array<float, 27> k;
    if (kernel) {
        k = *kernel;
    } else {
        k.fill(1.0f / 27.0f);
    }

    const int nx = fg_template.dims.nx, ny = fg_template.dims.ny, nz = fg_template.dims.nz;
    std::vector<std::uint8_t> fg(fg_template.size());
    bool any_fg = false, any_bg = false;
    for (std::size_t i = 0; i < fg.size(); ++i) {
        fg[i] = fg_template.data[i] != 0.0f;
        any_fg |= fg[i];
        any_bg |= !fg[i];
    }
    if (!any_fg || !any_bg)
        throw std::invalid_argument("probe template needs both classes");

    // near-background: background voxels 26-adjacent to the structure
    std::vector<std::uint8_t> near(fg.size(), 0);
    for (int z = 0; z < nz; ++z)
        for (int y = 0; y < ny; ++y)
            for (int x = 0; x < nx; ++x) {
                const std::size_t i = fg_template.index(x, y, z);
                if (fg[i]) continue;
                bool adj = false;
                for (int dz = -1; dz <= 1 && !adj; ++dz)
                    for (int dy = -1; dy <= 1 && !adj; ++dy)
                        for (int dx = -1; dx <= 1 && !adj; ++dx) {
                            if (!fg_template.in_bounds(x + dx, y + dy, z + dz)) continue;
                            adj = fg[fg_template.index(x + dx, y + dy, z + dz)] != 0;
                        }
                near[i] = adj;
            }

    // u: the full gradient field; d: the foreground-attributable part
    std::vector<double> u(fg.size()), d(fg.size());
    for (std::size_t i = 0; i < fg.size(); ++i) {
        u[i] = fg[i] ? -seed_ratio : 1.0;
        d[i] = fg[i] ? -(seed_ratio + 1.0) : 0.0;
    }

    // Border handling renormalizes the kernel over in-bounds taps, so a
    // constant field stays constant and volume edges do not masquerade as
    // erosion.
    auto convolve = [&](const std::vector<double>& src) {
        std::vector<double> dst(src.size(), 0.0);
        for (int z = 0; z < nz; ++z)
            for (int y = 0; y < ny; ++y)
                for (int x = 0; x < nx; ++x) {
                    double acc = 0.0, mass = 0.0;
                    int ki = 0;
                    for (int dz = -1; dz <= 1; ++dz)
                        for (int dy = -1; dy <= 1; ++dy)
                            for (int dx = -1; dx <= 1; ++dx, ++ki) {
                                if (!fg_template.in_bounds(x + dx, y + dy, z + dz)) continue;
                                acc += k[ki] * src[fg_template.index(x + dx, y + dy, z + dz)];
                                mass += k[ki];
                            }
                    dst[fg_template.index(x, y, z)] = mass > 0.0 ? acc / mass : 0.0;
                }
        return dst;
    };

    ProbeTrace trace;
    auto record = [&]() {
        double fg_sum = 0.0, bg_sum = 0.0, near_sum = 0.0, far_sum = 0.0;
        std::size_t n_fg = 0, n_bg = 0, n_near = 0, n_far = 0;
        for (std::size_t i = 0; i < fg.size(); ++i) {
            if (fg[i]) {
                fg_sum += std::abs(u[i]);
                ++n_fg;
            } else {
                bg_sum += std::abs(u[i]);
                ++n_bg;
                if (near[i]) {
                    near_sum += std::abs(d[i]);
                    ++n_near;
                } else {
                    far_sum += std::abs(u[i]);
                    ++n_far;
                }
            }
        }
        const double bg_mean = bg_sum / static_cast<double>(n_bg);
        trace.fg_bg_ratio.push_back((fg_sum / static_cast<double>(n_fg)) / bg_mean);
        const double far_mean = n_far > 0 ? far_sum / static_cast<double>(n_far) : bg_mean;
        trace.near_bg_influx.push_back(n_near > 0
                                           ? (near_sum / static_cast<double>(n_near)) / far_mean
                                           : 0.0);
    };

    record();
    for (int layer = 0; layer < layers; ++layer) {
        u = convolve(u);
        d = convolve(d);
        record();
    }
    return trace;
}

}  // namespace gradseg
