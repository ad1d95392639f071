#include "nowcast/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <thread>

namespace nowcast {

namespace {

int g_workers = 1;

/// Splits [0, count) into contiguous chunks, one per worker. Writes from
/// different chunks never alias, so the result does not depend on the
/// worker count.
void parallel_for(int count, const std::function<void(int, int)>& body) {
    const int workers = std::min(g_workers, count);
    if (workers <= 1) {
        body(0, count);
        return;
    }
    std::vector<std::thread> threads;
    threads.reserve(workers);
    const int chunk = (count + workers - 1) / workers;
    for (int t = 0; t < workers; ++t) {
        const int begin = t * chunk;
        const int end = std::min(count, begin + chunk);
        if (begin >= end) break;
        threads.emplace_back([&, begin, end] { body(begin, end); });
    }
    for (auto& th : threads) th.join();
}

}  // namespace

void set_worker_threads(int n) { g_workers = std::max(1, n); }
int worker_threads() { return g_workers; }

// ---------------------------------------------------------------------
// Dimension planning
// ---------------------------------------------------------------------

namespace {

bool simulate_plan(const ModelConfig& config, DimPlan& plan, std::string& why) {
    plan.input_hw = config.input_hw;
    int size = config.input_hw;
    for (int level = 0; level <= config.depth; ++level) {
        if (level > 0) {
            if (size % 2 != 0) {
                why = "pooling at stage " + std::to_string(level) + ": size " + std::to_string(size) +
                      " is odd";
                return false;
            }
            size /= 2;
        }
        if (size < 5) {
            why = "conv pair at stage " + std::to_string(level) + ": size " + std::to_string(size) +
                  " too small";
            return false;
        }
        size -= 4;
        plan.down_size.push_back(size);
        plan.channels.push_back(config.base_channels << level);
    }

    plan.up_size.assign(config.depth, 0);
    plan.crop_margin.assign(config.depth, 0);
    for (int level = config.depth - 1; level >= 0; --level) {
        size *= 2;  // up-convolution
        const int margin = plan.down_size[level] - size;
        if (margin < 0 || margin % 2 != 0) {
            why = "skip crop at stage " + std::to_string(level) + ": skip " +
                  std::to_string(plan.down_size[level]) + " vs " + std::to_string(size);
            return false;
        }
        if (size < 5) {
            why = "expansive conv pair at stage " + std::to_string(level) + ": size " +
                  std::to_string(size) + " too small";
            return false;
        }
        plan.crop_margin[level] = margin / 2;
        size -= 4;
        plan.up_size[level] = size;
    }

    if (size < 3) {
        why = "head conv: size " + std::to_string(size) + " too small";
        return false;
    }
    size -= 2;

    plan.output_hw = size;
    const int margin = config.input_hw - size;
    if (margin < 0 || margin % 2 != 0) {
        why = "offset is not integral";
        return false;
    }
    plan.offset = margin / 2;
    return true;
}

}  // namespace

DimPlan dim_plan(const ModelConfig& config) {
    require(config.depth >= 0, ErrorCode::InvalidArgument, "depth must be non-negative");
    require(config.base_channels >= 1 && config.in_channels >= 1 && config.out_channels >= 1,
            ErrorCode::InvalidArgument, "channel counts must be positive");
    require(config.input_hw >= 1, ErrorCode::InvalidArgument, "input size must be positive");

    DimPlan plan;
    std::string why;
    if (simulate_plan(config, plan, why)) return plan;

    if (config.depth == kFullScaleContract.depth && config.input_hw == kFullScaleContract.input_hw) {
        DimPlan ref;
        ref.input_hw = kFullScaleContract.input_hw;
        ref.output_hw = kFullScaleContract.output_hw;
        ref.offset = kFullScaleContract.offset;
        ref.reference_only = true;
        return ref;
    }
    fail(ErrorCode::InfeasibleConfig, why);
}

// ---------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------

namespace {

std::vector<double> uniform_fan_in(Rng& rng, std::size_t count, int fan_in) {
    const double scale = 1.0 / std::sqrt(double(fan_in));
    std::vector<double> w(count);
    for (double& v : w) v = rng.uniform(-scale, scale);
    return w;
}

Conv make_conv(Rng& rng, int in_ch, int out_ch) {
    Conv c;
    c.in_ch = in_ch;
    c.out_ch = out_ch;
    c.weight = uniform_fan_in(rng, std::size_t(out_ch) * in_ch * 9, in_ch * 9);
    return c;
}

BatchNorm make_bn(int ch) {
    BatchNorm bn;
    bn.ch = ch;
    bn.scale.assign(ch, 1.0);
    bn.shift.assign(ch, 0.0);
    bn.run_mean.assign(ch, 0.0);
    bn.run_var.assign(ch, 1.0);
    return bn;
}

UpConv make_upconv(Rng& rng, int in_ch) {
    UpConv u;
    u.in_ch = in_ch;
    u.out_ch = in_ch / 2;
    // stride-2 2x2 transposed conv: each output reads one tap per channel
    u.weight = uniform_fan_in(rng, std::size_t(in_ch) * u.out_ch * 4, in_ch);
    return u;
}

}  // namespace

ParamSet init_params(const ModelConfig& config, std::uint64_t seed) {
    const DimPlan plan = dim_plan(config);
    require(!plan.reference_only, ErrorCode::InfeasibleConfig,
            "this configuration has no strict stage layout (reference contract only); pick a depth/input size whose plan succeeds");
    Rng rng(seed);
    ParamSet p;
    p.config = config;

    int ch = config.in_channels;
    for (int level = 0; level <= config.depth; ++level) {
        DownStage s;
        const int out = config.base_channels << level;
        s.conv1 = make_conv(rng, ch, out);
        s.bn1 = make_bn(out);
        s.conv2 = make_conv(rng, out, out);
        s.bn2 = make_bn(out);
        p.down.push_back(std::move(s));
        ch = out;
    }
    for (int level = config.depth - 1; level >= 0; --level) {
        UpStage s;
        s.up = make_upconv(rng, ch);
        const int out = ch / 2;
        s.conv1 = make_conv(rng, out * 2, out);  // concatenated input
        s.bn1 = make_bn(out);
        s.conv2 = make_conv(rng, out, out);
        s.bn2 = make_bn(out);
        p.up.push_back(std::move(s));
        ch = out;
    }
    p.head = make_conv(rng, ch, config.out_channels);
    return p;
}

namespace {

template <typename PS, typename F>
void visit_trainable(PS& p, F&& f) {
    for (std::size_t i = 0; i < p.down.size(); ++i) {
        const std::string base = "down" + std::to_string(i);
        f(base + ".conv1.w", p.down[i].conv1.weight);
        f(base + ".bn1.scale", p.down[i].bn1.scale);
        f(base + ".bn1.shift", p.down[i].bn1.shift);
        f(base + ".conv2.w", p.down[i].conv2.weight);
        f(base + ".bn2.scale", p.down[i].bn2.scale);
        f(base + ".bn2.shift", p.down[i].bn2.shift);
    }
    for (std::size_t i = 0; i < p.up.size(); ++i) {
        const std::string base = "up" + std::to_string(i);
        f(base + ".up.w", p.up[i].up.weight);
        f(base + ".conv1.w", p.up[i].conv1.weight);
        f(base + ".bn1.scale", p.up[i].bn1.scale);
        f(base + ".bn1.shift", p.up[i].bn1.shift);
        f(base + ".conv2.w", p.up[i].conv2.weight);
        f(base + ".bn2.scale", p.up[i].bn2.scale);
        f(base + ".bn2.shift", p.up[i].bn2.shift);
    }
    f("head.w", p.head.weight);
}

template <typename PS, typename F>
void visit_buffers(PS& p, F&& f) {
    auto visit_bn = [&](const std::string& base, auto& bn) {
        f(base + ".run_mean", bn.run_mean);
        f(base + ".run_var", bn.run_var);
    };
    for (std::size_t i = 0; i < p.down.size(); ++i) {
        visit_bn("down" + std::to_string(i) + ".bn1", p.down[i].bn1);
        visit_bn("down" + std::to_string(i) + ".bn2", p.down[i].bn2);
    }
    for (std::size_t i = 0; i < p.up.size(); ++i) {
        visit_bn("up" + std::to_string(i) + ".bn1", p.up[i].bn1);
        visit_bn("up" + std::to_string(i) + ".bn2", p.up[i].bn2);
    }
}

}  // namespace

void ParamSet::for_each_trainable(const std::function<void(const std::string&, std::vector<double>&)>& f) {
    visit_trainable(*this, f);
}
void ParamSet::for_each_trainable(
    const std::function<void(const std::string&, const std::vector<double>&)>& f) const {
    visit_trainable(*this, f);
}
void ParamSet::for_each_buffer(const std::function<void(const std::string&, std::vector<double>&)>& f) {
    visit_buffers(*this, f);
}
void ParamSet::for_each_buffer(
    const std::function<void(const std::string&, const std::vector<double>&)>& f) const {
    visit_buffers(*this, f);
}

std::size_t ParamSet::trainable_count() const {
    std::size_t n = 0;
    for_each_trainable([&](const std::string&, const std::vector<double>& v) { n += v.size(); });
    return n;
}

GradSet GradSet::zeros_like(const ParamSet& params) {
    GradSet g;
    params.for_each_trainable(
        [&](const std::string&, const std::vector<double>& v) { g.grads.emplace_back(v.size(), 0.0); });
    return g;
}

void GradSet::accumulate(const GradSet& other, double weight) {
    require(grads.size() == other.grads.size(), ErrorCode::ShapeMismatch, "gradient layout mismatch");
    for (std::size_t i = 0; i < grads.size(); ++i) {
        for (std::size_t j = 0; j < grads[i].size(); ++j) grads[i][j] += weight * other.grads[i][j];
    }
}

// ---------------------------------------------------------------------
// Operators
// ---------------------------------------------------------------------

Tensor conv3x3_valid(const Tensor& x, const Conv& conv) {
    require(x.c == conv.in_ch, ErrorCode::ShapeMismatch, "conv input channel mismatch");
    require(x.h >= 3 && x.w >= 3, ErrorCode::ShapeMismatch, "conv input smaller than kernel");
    const int oh = x.h - 2, ow = x.w - 2;
    Tensor y(x.n, conv.out_ch, oh, ow);
    parallel_for(x.n * conv.out_ch, [&](int begin, int end) {
        for (int idx = begin; idx < end; ++idx) {
            const int in = idx / conv.out_ch;
            const int co = idx % conv.out_ch;
            double* out = y.plane(in, co);
            for (int ci = 0; ci < conv.in_ch; ++ci) {
                const double* src = x.plane(in, ci);
                const double* w = conv.weight.data() + (std::size_t(co) * conv.in_ch + ci) * 9;
                for (int i = 0; i < oh; ++i) {
                    double* __restrict__ orow = out + std::size_t(i) * ow;
                    for (int di = 0; di < 3; ++di) {
                        const double* __restrict__ srow = src + std::size_t(i + di) * x.w;
                        const double w0 = w[di * 3], w1 = w[di * 3 + 1], w2 = w[di * 3 + 2];
                        for (int j = 0; j < ow; ++j) {
                            orow[j] += w0 * srow[j] + w1 * srow[j + 1] + w2 * srow[j + 2];
                        }
                    }
                }
            }
        }
    });
    return y;
}

void conv3x3_backward(const Tensor& x, const Conv& conv, const Tensor& dy, Tensor& dx,
                      std::vector<double>& dweight) {
    require(dy.c == conv.out_ch && dy.h == x.h - 2 && dy.w == x.w - 2, ErrorCode::ShapeMismatch,
            "conv backward shape mismatch");
    dx = Tensor(x.n, x.c, x.h, x.w);
    dweight.assign(conv.weight.size(), 0.0);
    const int oh = dy.h, ow = dy.w;

    // gradient w.r.t. the input: each (di,dj) tap becomes one shifted
    // saxpy pass per destination row, so writes never overlap in a pass
    parallel_for(x.n * conv.in_ch, [&](int begin, int end) {
        for (int idx = begin; idx < end; ++idx) {
            const int in = idx / conv.in_ch;
            const int ci = idx % conv.in_ch;
            double* dst = dx.plane(in, ci);
            for (int co = 0; co < conv.out_ch; ++co) {
                const double* g = dy.plane(in, co);
                const double* w = conv.weight.data() + (std::size_t(co) * conv.in_ch + ci) * 9;
                for (int r = 0; r < x.h; ++r) {
                    double* drow = dst + std::size_t(r) * x.w;
                    for (int di = 0; di < 3; ++di) {
                        const int i = r - di;
                        if (i < 0 || i >= oh) continue;
                        const double* grow = g + std::size_t(i) * ow;
                        for (int dj = 0; dj < 3; ++dj) {
                            const double wv = w[di * 3 + dj];
                            double* __restrict__ d = drow + dj;
                            const double* __restrict__ gr = grow;
                            for (int j = 0; j < ow; ++j) d[j] += wv * gr[j];
                        }
                    }
                }
            }
        }
    });

    // gradient w.r.t. the weights: fixed-order partial sums per tap
    parallel_for(conv.out_ch, [&](int begin, int end) {
        for (int co = begin; co < end; ++co) {
            for (int in = 0; in < x.n; ++in) {
                const double* g = dy.plane(in, co);
                for (int ci = 0; ci < conv.in_ch; ++ci) {
                    const double* src = x.plane(in, ci);
                    double* w = dweight.data() + (std::size_t(co) * conv.in_ch + ci) * 9;
                    for (int i = 0; i < oh; ++i) {
                        const double* grow = g + std::size_t(i) * ow;
                        for (int di = 0; di < 3; ++di) {
                            const double* srow = src + std::size_t(i + di) * x.w;
                            for (int dj = 0; dj < 3; ++dj) {
                                const double* __restrict__ s = srow + dj;
                                const double* __restrict__ gr = grow;
                                double a0 = 0, a1 = 0, a2 = 0, a3 = 0;
                                int j = 0;
                                for (; j + 4 <= ow; j += 4) {
                                    a0 += gr[j] * s[j];
                                    a1 += gr[j + 1] * s[j + 1];
                                    a2 += gr[j + 2] * s[j + 2];
                                    a3 += gr[j + 3] * s[j + 3];
                                }
                                double tail = 0;
                                for (; j < ow; ++j) tail += gr[j] * s[j];
                                w[di * 3 + dj] += ((a0 + a1) + (a2 + a3)) + tail;
                            }
                        }
                    }
                }
            }
        }
    });
}

Tensor bn_relu(const Tensor& x, BatchNorm& bn, BnMode mode, BnTrace* trace, bool update_running) {
    require(x.c == bn.ch, ErrorCode::ShapeMismatch, "batch norm channel mismatch");
    Tensor y(x.n, x.c, x.h, x.w);
    const std::size_t plane = std::size_t(x.h) * x.w;
    const double count = double(x.n) * plane;

    std::vector<double> mean(x.c, 0.0), invstd(x.c, 0.0);
    if (mode == BnMode::Train) {
        for (int ci = 0; ci < x.c; ++ci) {
            double m = 0.0;
            for (int in = 0; in < x.n; ++in) {
                const double* p = x.plane(in, ci);
                for (std::size_t i = 0; i < plane; ++i) m += p[i];
            }
            m /= count;
            double v = 0.0;
            for (int in = 0; in < x.n; ++in) {
                const double* p = x.plane(in, ci);
                for (std::size_t i = 0; i < plane; ++i) {
                    const double d = p[i] - m;
                    v += d * d;
                }
            }
            v /= count;
            mean[ci] = m;
            invstd[ci] = 1.0 / std::sqrt(v + kBnEpsilon);
            if (update_running) {
                bn.run_mean[ci] = (1.0 - kBnMomentum) * bn.run_mean[ci] + kBnMomentum * m;
                bn.run_var[ci] = (1.0 - kBnMomentum) * bn.run_var[ci] + kBnMomentum * v;
            }
        }
    } else {
        for (int ci = 0; ci < x.c; ++ci) {
            mean[ci] = bn.run_mean[ci];
            invstd[ci] = 1.0 / std::sqrt(bn.run_var[ci] + kBnEpsilon);
        }
    }

    parallel_for(x.c, [&](int begin, int end) {
        for (int ci = begin; ci < end; ++ci) {
            const double m = mean[ci], is = invstd[ci];
            const double s = bn.scale[ci], b = bn.shift[ci];
            for (int in = 0; in < x.n; ++in) {
                const double* src = x.plane(in, ci);
                double* dst = y.plane(in, ci);
                for (std::size_t i = 0; i < plane; ++i) {
                    const double v = s * ((src[i] - m) * is) + b;
                    dst[i] = v > 0.0 ? v : 0.0;
                }
            }
        }
    });

    if (trace) {
        trace->input = x;
        trace->mean = std::move(mean);
        trace->invstd = std::move(invstd);
        trace->output = y;
    }
    return y;
}

void bn_relu_backward(const BnTrace& trace, const BatchNorm& bn, const Tensor& dy, Tensor& dx,
                      std::vector<double>& dscale, std::vector<double>& dshift) {
    const Tensor& x = trace.input;
    dx = Tensor(x.n, x.c, x.h, x.w);
    dscale.assign(bn.ch, 0.0);
    dshift.assign(bn.ch, 0.0);
    const std::size_t plane = std::size_t(x.h) * x.w;
    const double count = double(x.n) * plane;

    parallel_for(x.c, [&](int begin, int end) {
        for (int ci = begin; ci < end; ++ci) {
            const double m = trace.mean[ci], is = trace.invstd[ci], s = bn.scale[ci];
            // first pass: relu gate, dscale/dshift, and the two batch sums
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0, dsc = 0.0, dsh = 0.0;
            for (int in = 0; in < x.n; ++in) {
                const double* xv = x.plane(in, ci);
                const double* out = trace.output.plane(in, ci);
                const double* g = dy.plane(in, ci);
                for (std::size_t i = 0; i < plane; ++i) {
                    if (out[i] <= 0.0) continue;
                    const double gp = g[i];
                    const double xhat = (xv[i] - m) * is;
                    dsc += gp * xhat;
                    dsh += gp;
                    const double dxhat = gp * s;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
            dscale[ci] = dsc;
            dshift[ci] = dsh;
            // second pass: dL/dx through the batch statistics
            for (int in = 0; in < x.n; ++in) {
                const double* xv = x.plane(in, ci);
                const double* out = trace.output.plane(in, ci);
                const double* g = dy.plane(in, ci);
                double* dst = dx.plane(in, ci);
                for (std::size_t i = 0; i < plane; ++i) {
                    const double xhat = (xv[i] - m) * is;
                    const double dxhat = (out[i] > 0.0 ? g[i] : 0.0) * s;
                    dst[i] = is * (dxhat - sum_dxhat / count - xhat * sum_dxhat_xhat / count);
                }
            }
        }
    });
}

Tensor max_pool2(const Tensor& x, PoolTrace* trace) {
    require(x.h % 2 == 0 && x.w % 2 == 0, ErrorCode::ShapeMismatch,
            "max pooling requires even dimensions");
    const int oh = x.h / 2, ow = x.w / 2;
    Tensor y(x.n, x.c, oh, ow);
    if (trace) {
        trace->argmax.assign(y.size(), 0);
        trace->in_h = x.h;
        trace->in_w = x.w;
    }
    for (int in = 0; in < x.n; ++in) {
        for (int ci = 0; ci < x.c; ++ci) {
            const double* src = x.plane(in, ci);
            double* dst = y.plane(in, ci);
            const std::size_t base = (std::size_t(in) * x.c + ci) * oh * ow;
            for (int i = 0; i < oh; ++i) {
                for (int j = 0; j < ow; ++j) {
                    const std::size_t o00 = std::size_t(2 * i) * x.w + 2 * j;
                    const std::size_t cand[4] = {o00, o00 + 1, o00 + x.w, o00 + x.w + 1};
                    std::size_t best = cand[0];
                    for (int k = 1; k < 4; ++k) {
                        if (src[cand[k]] > src[best]) best = cand[k];
                    }
                    dst[std::size_t(i) * ow + j] = src[best];
                    if (trace) trace->argmax[base + std::size_t(i) * ow + j] = std::uint32_t(best);
                }
            }
        }
    }
    return y;
}

Tensor max_pool2_backward(const PoolTrace& trace, const Tensor& dy, int n, int c) {
    Tensor dx(n, c, trace.in_h, trace.in_w);
    const std::size_t plane_out = std::size_t(dy.h) * dy.w;
    for (int in = 0; in < n; ++in) {
        for (int ci = 0; ci < c; ++ci) {
            const double* g = dy.plane(in, ci);
            double* dst = dx.plane(in, ci);
            const std::size_t base = (std::size_t(in) * c + ci) * plane_out;
            for (std::size_t i = 0; i < plane_out; ++i) {
                dst[trace.argmax[base + i]] += g[i];
            }
        }
    }
    return dx;
}

Tensor up_conv2(const Tensor& x, const UpConv& up) {
    require(x.c == up.in_ch, ErrorCode::ShapeMismatch, "up-conv input channel mismatch");
    require(up.in_ch % 2 == 0, ErrorCode::ShapeMismatch, "up-conv needs an even channel count");
    Tensor y(x.n, up.out_ch, x.h * 2, x.w * 2);
    parallel_for(x.n * up.out_ch, [&](int begin, int end) {
        for (int idx = begin; idx < end; ++idx) {
            const int in = idx / up.out_ch;
            const int co = idx % up.out_ch;
            double* out = y.plane(in, co);
            for (int ci = 0; ci < up.in_ch; ++ci) {
                const double* src = x.plane(in, ci);
                const double* w = up.weight.data() + (std::size_t(ci) * up.out_ch + co) * 4;
                for (int i = 0; i < x.h; ++i) {
                    double* r0 = out + std::size_t(2 * i) * y.w;
                    double* r1 = r0 + y.w;
                    const double* srow = src + std::size_t(i) * x.w;
                    for (int j = 0; j < x.w; ++j) {
                        const double v = srow[j];
                        r0[2 * j] += v * w[0];
                        r0[2 * j + 1] += v * w[1];
                        r1[2 * j] += v * w[2];
                        r1[2 * j + 1] += v * w[3];
                    }
                }
            }
        }
    });
    return y;
}

void up_conv2_backward(const Tensor& x, const UpConv& up, const Tensor& dy, Tensor& dx,
                       std::vector<double>& dweight) {
    require(dy.c == up.out_ch && dy.h == x.h * 2 && dy.w == x.w * 2, ErrorCode::ShapeMismatch,
            "up-conv backward shape mismatch");
    dx = Tensor(x.n, x.c, x.h, x.w);
    dweight.assign(up.weight.size(), 0.0);
    parallel_for(x.n * up.in_ch, [&](int begin, int end) {
        for (int idx = begin; idx < end; ++idx) {
            const int in = idx / up.in_ch;
            const int ci = idx % up.in_ch;
            double* dst = dx.plane(in, ci);
            for (int co = 0; co < up.out_ch; ++co) {
                const double* g = dy.plane(in, co);
                const double* w = up.weight.data() + (std::size_t(ci) * up.out_ch + co) * 4;
                for (int i = 0; i < x.h; ++i) {
                    const double* g0 = g + std::size_t(2 * i) * dy.w;
                    const double* g1 = g0 + dy.w;
                    double* drow = dst + std::size_t(i) * x.w;
                    for (int j = 0; j < x.w; ++j) {
                        drow[j] += w[0] * g0[2 * j] + w[1] * g0[2 * j + 1] + w[2] * g1[2 * j] +
                                   w[3] * g1[2 * j + 1];
                    }
                }
            }
        }
    });
    // weight gradient, partitioned over the input channel index
    parallel_for(up.in_ch, [&](int begin, int end) {
        for (int ci = begin; ci < end; ++ci) {
            for (int co = 0; co < up.out_ch; ++co) {
                double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
                for (int in = 0; in < x.n; ++in) {
                    const double* src = x.plane(in, ci);
                    const double* g = dy.plane(in, co);
                    for (int i = 0; i < x.h; ++i) {
                        const double* srow = src + std::size_t(i) * x.w;
                        const double* g0 = g + std::size_t(2 * i) * dy.w;
                        const double* g1 = g0 + dy.w;
                        for (int j = 0; j < x.w; ++j) {
                            const double v = srow[j];
                            s0 += v * g0[2 * j];
                            s1 += v * g0[2 * j + 1];
                            s2 += v * g1[2 * j];
                            s3 += v * g1[2 * j + 1];
                        }
                    }
                }
                double* w = dweight.data() + (std::size_t(ci) * up.out_ch + co) * 4;
                w[0] += s0;
                w[1] += s1;
                w[2] += s2;
                w[3] += s3;
            }
        }
    });
}

Tensor center_crop_concat(const Tensor& skip, const Tensor& up) {
    require(skip.n == up.n && skip.c == up.c, ErrorCode::ShapeMismatch,
            "crop-concat needs equal batch and channel counts");
    const int mh = skip.h - up.h, mw = skip.w - up.w;
    require(mh >= 0 && mw >= 0 && mh % 2 == 0 && mw % 2 == 0, ErrorCode::ShapeMismatch,
            "skip margins must be non-negative and even");
    const int oh = up.h, ow = up.w;
    Tensor y(skip.n, skip.c * 2, oh, ow);
    for (int in = 0; in < skip.n; ++in) {
        for (int ci = 0; ci < skip.c; ++ci) {
            const double* src = skip.plane(in, ci);
            double* dst = y.plane(in, ci);
            for (int i = 0; i < oh; ++i) {
                std::memcpy(dst + std::size_t(i) * ow,
                            src + std::size_t(i + mh / 2) * skip.w + mw / 2, sizeof(double) * ow);
            }
        }
        for (int ci = 0; ci < up.c; ++ci) {
            std::memcpy(y.plane(in, skip.c + ci), up.plane(in, ci), sizeof(double) * oh * ow);
        }
    }
    return y;
}

void center_crop_concat_backward(const Tensor& dy, int skip_h, int skip_w, Tensor& dskip, Tensor& dup) {
    const int c = dy.c / 2;
    const int mh = skip_h - dy.h, mw = skip_w - dy.w;
    dskip = Tensor(dy.n, c, skip_h, skip_w);
    dup = Tensor(dy.n, c, dy.h, dy.w);
    for (int in = 0; in < dy.n; ++in) {
        for (int ci = 0; ci < c; ++ci) {
            const double* g = dy.plane(in, ci);
            double* dst = dskip.plane(in, ci);
            for (int i = 0; i < dy.h; ++i) {
                std::memcpy(dst + std::size_t(i + mh / 2) * skip_w + mw / 2,
                            g + std::size_t(i) * dy.w, sizeof(double) * dy.w);
            }
            std::memcpy(dup.plane(in, ci), dy.plane(in, c + ci), sizeof(double) * dy.h * dy.w);
        }
    }
}

Tensor softmax_channels(const Tensor& logits) {
    Tensor y(logits.n, logits.c, logits.h, logits.w);
    const std::size_t plane = std::size_t(logits.h) * logits.w;
    for (int in = 0; in < logits.n; ++in) {
        for (std::size_t i = 0; i < plane; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int ci = 0; ci < logits.c; ++ci) mx = std::max(mx, logits.plane(in, ci)[i]);
            double sum = 0.0;
            for (int ci = 0; ci < logits.c; ++ci) {
                const double e = std::exp(logits.plane(in, ci)[i] - mx);
                y.plane(in, ci)[i] = e;
                sum += e;
            }
            for (int ci = 0; ci < logits.c; ++ci) y.plane(in, ci)[i] /= sum;
        }
    }
    return y;
}

Tensor softmax_backward(const Tensor& probs, const Tensor& dprobs) {
    Tensor dx(probs.n, probs.c, probs.h, probs.w);
    const std::size_t plane = std::size_t(probs.h) * probs.w;
    for (int in = 0; in < probs.n; ++in) {
        for (std::size_t i = 0; i < plane; ++i) {
            double dot = 0.0;
            for (int ci = 0; ci < probs.c; ++ci) dot += dprobs.plane(in, ci)[i] * probs.plane(in, ci)[i];
            for (int ci = 0; ci < probs.c; ++ci) {
                dx.plane(in, ci)[i] = probs.plane(in, ci)[i] * (dprobs.plane(in, ci)[i] - dot);
            }
        }
    }
    return dx;
}

// ---------------------------------------------------------------------
// Network composition
// ---------------------------------------------------------------------

Tensor unet_forward(ParamSet& params, const Tensor& input, BnMode mode, ForwardTrace* trace,
                    bool update_running) {
    const ModelConfig& cfg = params.config;
    require(input.c == cfg.in_channels && input.h == cfg.input_hw && input.w == cfg.input_hw,
            ErrorCode::ShapeMismatch, "network input does not match the configuration");
    const bool track = trace != nullptr;
    if (track) {
        trace->down.assign(params.down.size(), {});
        trace->up.assign(params.up.size(), {});
        trace->input = input;
    }

    std::vector<Tensor> skips;  // level output before pooling, per level 0..depth-1
    Tensor x = input;
    for (std::size_t level = 0; level < params.down.size(); ++level) {
        DownStage& s = params.down[level];
        auto* rec = track ? &trace->down[level] : nullptr;
        if (rec) rec->conv1_in = x;
        Tensor z = conv3x3_valid(x, s.conv1);
        Tensor a = bn_relu(z, s.bn1, mode, rec ? &rec->bn1 : nullptr, update_running);
        if (rec) rec->conv2_in = a;
        z = conv3x3_valid(a, s.conv2);
        x = bn_relu(z, s.bn2, mode, rec ? &rec->bn2 : nullptr, update_running);
        if (level + 1 < params.down.size()) {
            skips.push_back(x);
            x = max_pool2(x, rec ? &rec->pool : nullptr);
        }
    }

    for (std::size_t ui = 0; ui < params.up.size(); ++ui) {
        UpStage& s = params.up[ui];
        auto* rec = track ? &trace->up[ui] : nullptr;
        const Tensor& skip = skips[skips.size() - 1 - ui];
        if (rec) {
            rec->up_in = x;
            rec->skip_h = skip.h;
            rec->skip_w = skip.w;
        }
        Tensor u = up_conv2(x, s.up);
        if (rec) rec->up_out = u;
        Tensor cc = center_crop_concat(skip, u);
        if (rec) rec->concat = cc;
        Tensor z = conv3x3_valid(cc, s.conv1);
        Tensor a = bn_relu(z, s.bn1, mode, rec ? &rec->bn1 : nullptr, update_running);
        if (rec) rec->conv2_in = a;
        z = conv3x3_valid(a, s.conv2);
        x = bn_relu(z, s.bn2, mode, rec ? &rec->bn2 : nullptr, update_running);
    }

    if (track) trace->head_in = x;
    return conv3x3_valid(x, params.head);
}

Tensor unet_infer(const ParamSet& params, const Tensor& input) {
    // running statistics are read, never written, in eval mode
    return unet_forward(const_cast<ParamSet&>(params), input, BnMode::Eval, nullptr, false);
}

GradSet unet_backward(const ParamSet& params, const ForwardTrace& trace, const Tensor& dlogits) {
    GradSet grads = GradSet::zeros_like(params);
    // gradient slots in for_each_trainable order
    const std::size_t per_down = 6, per_up = 7;
    auto down_slot = [&](std::size_t level, int item) { return level * per_down + item; };
    auto up_slot = [&](std::size_t ui, int item) {
        return params.down.size() * per_down + ui * per_up + item;
    };
    const std::size_t head_slot = params.down.size() * per_down + params.up.size() * per_up;

    Tensor dx;
    conv3x3_backward(trace.head_in, params.head, dlogits, dx, grads.grads[head_slot]);

    // expansive path; skip gradients are held back until the contracting pass
    std::vector<Tensor> d_skips(params.up.size());
    for (std::size_t ui = params.up.size(); ui-- > 0;) {
        const UpStage& s = params.up[ui];
        const ForwardTrace::UpRec& rec = trace.up[ui];
        Tensor d_bn2_in;
        bn_relu_backward(rec.bn2, s.bn2, dx, d_bn2_in, grads.grads[up_slot(ui, 5)],
                         grads.grads[up_slot(ui, 6)]);
        Tensor d_conv2_in;
        conv3x3_backward(rec.conv2_in, s.conv2, d_bn2_in, d_conv2_in, grads.grads[up_slot(ui, 4)]);
        Tensor d_bn1_in;
        bn_relu_backward(rec.bn1, s.bn1, d_conv2_in, d_bn1_in, grads.grads[up_slot(ui, 2)],
                         grads.grads[up_slot(ui, 3)]);
        Tensor d_concat;
        conv3x3_backward(rec.concat, s.conv1, d_bn1_in, d_concat, grads.grads[up_slot(ui, 1)]);
        Tensor d_up;
        center_crop_concat_backward(d_concat, rec.skip_h, rec.skip_w, d_skips[ui], d_up);
        Tensor d_up_in;
        up_conv2_backward(rec.up_in, s.up, d_up, d_up_in, grads.grads[up_slot(ui, 0)]);
        dx = std::move(d_up_in);
    }

    // contracting path, deepest first; dx is the bottleneck-output gradient
    for (std::size_t level = params.down.size(); level-- > 0;) {
        const DownStage& s = params.down[level];
        const ForwardTrace::DownRec& rec = trace.down[level];
        Tensor d_out;
        if (level + 1 == params.down.size()) {
            d_out = std::move(dx);
        } else {
            // pooled-path gradient plus the skip used at up stage (depth-1-level)
            d_out = max_pool2_backward(rec.pool, dx, dx.n, dx.c);
            const Tensor& ds = d_skips[params.up.size() - 1 - level];
            for (std::size_t i = 0; i < d_out.data.size(); ++i) d_out.data[i] += ds.data[i];
        }
        Tensor d_bn2_in;
        bn_relu_backward(rec.bn2, s.bn2, d_out, d_bn2_in, grads.grads[down_slot(level, 4)],
                         grads.grads[down_slot(level, 5)]);
        Tensor d_conv2_in;
        conv3x3_backward(rec.conv2_in, s.conv2, d_bn2_in, d_conv2_in, grads.grads[down_slot(level, 3)]);
        Tensor d_bn1_in;
        bn_relu_backward(rec.bn1, s.bn1, d_conv2_in, d_bn1_in, grads.grads[down_slot(level, 1)],
                         grads.grads[down_slot(level, 2)]);
        Tensor d_in;
        conv3x3_backward(rec.conv1_in, s.conv1, d_bn1_in, d_in, grads.grads[down_slot(level, 0)]);
        dx = std::move(d_in);
    }

    return grads;
}

// ---------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------

namespace {

constexpr char kParamMagic[4] = {'N', 'W', 'P', '1'};

template <typename T>
void write_pod(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    require(in.good(), ErrorCode::TruncatedPayload, "parameter file ends early");
    return v;
}

void write_array(std::ofstream& out, const std::vector<double>& v) {
    write_pod<std::uint64_t>(out, v.size());
    out.write(reinterpret_cast<const char*>(v.data()), std::streamsize(v.size() * sizeof(double)));
}

void read_array(std::ifstream& in, std::vector<double>& v) {
    const auto n = read_pod<std::uint64_t>(in);
    require(n == v.size(), ErrorCode::PayloadMismatch, "parameter array size mismatch");
    in.read(reinterpret_cast<char*>(v.data()), std::streamsize(n * sizeof(double)));
    require(in.good(), ErrorCode::TruncatedPayload, "parameter file ends early");
}

}  // namespace

void save_params(const ParamSet& params, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorCode::IoFailure, "cannot open for writing: " + path.string());
    out.write(kParamMagic, 4);
    write_pod<std::int32_t>(out, params.config.depth);
    write_pod<std::int32_t>(out, params.config.base_channels);
    write_pod<std::int32_t>(out, params.config.in_channels);
    write_pod<std::int32_t>(out, params.config.out_channels);
    write_pod<std::int32_t>(out, params.config.input_hw);
    params.for_each_trainable(
        [&](const std::string&, const std::vector<double>& v) { write_array(out, v); });
    params.for_each_buffer(
        [&](const std::string&, const std::vector<double>& v) { write_array(out, v); });
    out.flush();
    require(out.good(), ErrorCode::IoFailure, "write failed: " + path.string());
}

ParamSet load_params(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorCode::IoFailure, "cannot open " + path.string());
    char magic[4];
    in.read(magic, 4);
    require(in.good() && std::memcmp(magic, kParamMagic, 4) == 0, ErrorCode::BadMagic,
            "not a parameter file: " + path.string());
    ModelConfig cfg;
    cfg.depth = read_pod<std::int32_t>(in);
    cfg.base_channels = read_pod<std::int32_t>(in);
    cfg.in_channels = read_pod<std::int32_t>(in);
    cfg.out_channels = read_pod<std::int32_t>(in);
    cfg.input_hw = read_pod<std::int32_t>(in);
    ParamSet params = init_params(cfg, 0);
    params.for_each_trainable([&](const std::string&, std::vector<double>& v) { read_array(in, v); });
    params.for_each_buffer([&](const std::string&, std::vector<double>& v) { read_array(in, v); });
    return params;
}

}  // namespace nowcast
