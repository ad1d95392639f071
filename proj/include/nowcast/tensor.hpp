#pragma once

#include <cstddef>
#include <vector>

#include "nowcast/errors.hpp"

namespace nowcast {

/// Dense batch-major feature map, NCHW, double precision throughout so
/// gradient checks against central differences are meaningful.
struct Tensor {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<double> data;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_)
        : n(n_), c(c_), h(h_), w(w_), data(std::size_t(n_) * c_ * h_ * w_, 0.0) {}

    static Tensor zeros(int n, int c, int h, int w) { return Tensor(n, c, h, w); }

    std::size_t size() const { return data.size(); }

    std::size_t index(int in, int ic, int ih, int iw) const {
        return ((std::size_t(in) * c + ic) * h + ih) * w + iw;
    }

    double at(int in, int ic, int ih, int iw) const { return data[index(in, ic, ih, iw)]; }
    double& at(int in, int ic, int ih, int iw) { return data[index(in, ic, ih, iw)]; }

    double* plane(int in, int ic) { return data.data() + (std::size_t(in) * c + ic) * h * w; }
    const double* plane(int in, int ic) const { return data.data() + (std::size_t(in) * c + ic) * h * w; }

    bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }
};

inline void require_shape(const Tensor& t, int n, int c, int h, int w, const char* what) {
    require(t.n == n && t.c == c && t.h == h && t.w == w, ErrorCode::ShapeMismatch, what);
}

}  // namespace nowcast
