#include "fedmgp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace fedmgp {

namespace {

std::size_t shape_product(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ")";
    return os.str();
}

// C(m x n) += A(m x k) * B(k x n)
void mm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
           double* c) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aik = arow[p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
}

// C(m x k) += A(m x n) * B(k x n)^T : row-by-row dot products.
void mm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
           double* c) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * n;
        double* crow = c + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double* brow = b + p * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += arow[j] * brow[j];
            crow[p] += dot;
        }
    }
}

// C(k x n) += A(m x k)^T * B(m x n)
void mm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
           double* c) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = arow[p];
            double* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

Tensor::Tensor(Shape shape, double fill, bool requires_grad)
    : d_(std::make_shared<detail::TensorData>()) {
    d_->shape = std::move(shape);
    d_->values.assign(shape_product(d_->shape), fill);
    if (requires_grad) set_requires_grad(true);
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : d_(std::make_shared<detail::TensorData>()) {
    if (shape_product(shape) != values.size()) {
        throw ShapeMismatchError("tensor shape " + shape_str(shape) + " does not cover " +
                                 std::to_string(values.size()) + " values");
    }
    d_->shape = std::move(shape);
    d_->values = std::move(values);
    if (requires_grad) set_requires_grad(true);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return Tensor(Shape{1}, std::vector<double>{v}, requires_grad);
}

std::size_t Tensor::rows() const {
    if (rank() == 1) return 1;
    if (rank() == 2) return d_->shape[0];
    throw ShapeMismatchError("rows() needs rank <= 2, got rank " + std::to_string(rank()));
}

std::size_t Tensor::cols() const {
    if (rank() == 1) return d_->shape[0];
    if (rank() == 2) return d_->shape[1];
    throw ShapeMismatchError("cols() needs rank <= 2, got rank " + std::to_string(rank()));
}

double Tensor::value() const {
    if (size() != 1) {
        throw ShapeMismatchError("value() on non-scalar tensor " + shape_str(d_->shape));
    }
    return d_->values[0];
}

void Tensor::set_requires_grad(bool on) {
    d_->requires_grad = on;
    if (on) {
        d_->grad.assign(d_->values.size(), 0.0);
    } else {
        d_->grad.clear();
        d_->grad.shrink_to_fit();
    }
}

void Tensor::zero_grad() {
    std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
    Tensor copy(d_->shape, d_->values);
    if (d_->requires_grad) {
        copy.set_requires_grad(true);
        copy.d_->grad = d_->grad;
    }
    return copy;
}

Tensor Tensor::detached() const {
    return Tensor(d_->shape, d_->values);
}

bool Tensor::all_finite() const {
    for (double v : d_->values) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

Tensor seeded_uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad) {
    std::vector<double> values(shape_product(shape));
    for (double& v : values) v = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(values), requires_grad);
}

Tensor seeded_normal(Shape shape, Rng& rng, double mean, double stddev, bool requires_grad) {
    std::vector<double> values(shape_product(shape));
    for (double& v : values) v = rng.normal(mean, stddev);
    return Tensor(std::move(shape), std::move(values), requires_grad);
}

std::size_t argmax(std::span<const double> values) {
    return static_cast<std::size_t>(
        std::max_element(values.begin(), values.end()) - values.begin());
}

Tensor Tape::make_output(Shape shape, std::vector<double> values, bool requires_grad) {
    Tensor out(std::move(shape), std::move(values));
    if (requires_grad) out.set_requires_grad(true);
    return out;
}

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
        throw ShapeMismatchError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                                 shape_str(b.shape()));
    }
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> out(m * n, 0.0);
    mm_nn(m, k, n, a.values().data(), b.values().data(), out.data());
    const bool rg = a.requires_grad() || b.requires_grad();
    Tensor c = make_output({m, n}, std::move(out), rg);
    if (rg) {
        DataPtr ad = a.handle(), bd = b.handle(), cd = c.handle();
        record([ad, bd, cd, m, k, n] {
            if (ad->requires_grad) {
                mm_nt(m, n, k, cd->grad.data(), bd->values.data(), ad->grad.data());
            }
            if (bd->requires_grad) {
                mm_tn(m, k, n, ad->values.data(), cd->grad.data(), bd->grad.data());
            }
        });
    }
    return c;
}

Tensor Tape::transpose(const Tensor& a) {
    if (a.rank() != 2) {
        throw ShapeMismatchError("transpose needs rank 2, got " + shape_str(a.shape()));
    }
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.values()[i * n + j];
    Tensor c = make_output({n, m}, std::move(out), a.requires_grad());
    if (a.requires_grad()) {
        DataPtr ad = a.handle(), cd = c.handle();
        record([ad, cd, m, n] {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ad->grad[i * n + j] += cd->grad[j * m + i];
        });
    }
    return c;
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeMismatchError("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                                 shape_str(b.shape()));
    }
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    const bool rg = a.requires_grad() || b.requires_grad();
    Tensor c = make_output(a.shape(), std::move(out), rg);
    if (rg) {
        DataPtr ad = a.handle(), bd = b.handle(), cd = c.handle();
        record([ad, bd, cd] {
            if (ad->requires_grad)
                for (std::size_t i = 0; i < cd->grad.size(); ++i) ad->grad[i] += cd->grad[i];
            if (bd->requires_grad)
                for (std::size_t i = 0; i < cd->grad.size(); ++i) bd->grad[i] += cd->grad[i];
        });
    }
    return c;
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
    return add(a, scale(b, -1.0));
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeMismatchError("mul shape mismatch: " + shape_str(a.shape()) + " vs " +
                                 shape_str(b.shape()));
    }
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    const bool rg = a.requires_grad() || b.requires_grad();
    Tensor c = make_output(a.shape(), std::move(out), rg);
    if (rg) {
        DataPtr ad = a.handle(), bd = b.handle(), cd = c.handle();
        record([ad, bd, cd] {
            if (ad->requires_grad)
                for (std::size_t i = 0; i < cd->grad.size(); ++i)
                    ad->grad[i] += cd->grad[i] * bd->values[i];
            if (bd->requires_grad)
                for (std::size_t i = 0; i < cd->grad.size(); ++i)
                    bd->grad[i] += cd->grad[i] * ad->values[i];
        });
    }
    return c;
}

Tensor Tape::scale(const Tensor& a, double k) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * k;
    Tensor c = make_output(a.shape(), std::move(out), a.requires_grad());
    if (a.requires_grad()) {
        DataPtr ad = a.handle(), cd = c.handle();
        record([ad, cd, k] {
            for (std::size_t i = 0; i < cd->grad.size(); ++i) ad->grad[i] += k * cd->grad[i];
        });
    }
    return c;
}

Tensor Tape::add_row(const Tensor& a, const Tensor& bias) {
    const std::size_t t = a.rows(), d = a.cols();
    if (bias.size() != d) {
        throw ShapeMismatchError("add_row bias length " + std::to_string(bias.size()) +
                                 " vs row width " + std::to_string(d));
    }
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = a.values()[i * d + j] + bias.values()[j];
    const bool rg = a.requires_grad() || bias.requires_grad();
    Tensor c = make_output(a.shape(), std::move(out), rg);
    if (rg) {
        DataPtr ad = a.handle(), bd = bias.handle(), cd = c.handle();
        record([ad, bd, cd, t, d] {
            if (ad->requires_grad)
                for (std::size_t i = 0; i < t * d; ++i) ad->grad[i] += cd->grad[i];
            if (bd->requires_grad)
                for (std::size_t i = 0; i < t; ++i)
                    for (std::size_t j = 0; j < d; ++j) bd->grad[j] += cd->grad[i * d + j];
        });
    }
    return c;
}

Tensor Tape::gelu(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = a.values()[i];
        out[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
    }
    Tensor c = make_output(a.shape(), std::move(out), a.requires_grad());
    if (a.requires_grad()) {
        DataPtr ad = a.handle(), cd = c.handle();
        record([ad, cd] {
            for (std::size_t i = 0; i < cd->grad.size(); ++i) {
                const double x = ad->values[i];
                const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                ad->grad[i] += cd->grad[i] * (cdf + x * pdf);
            }
        });
    }
    return c;
}

Tensor Tape::layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
    const std::size_t t = a.rows(), d = a.cols();
    if (gain.size() != d || bias.size() != d) {
        throw ShapeMismatchError("layer_norm parameter width mismatch");
    }
    std::vector<double> out(a.size());
    std::vector<double> mean(t), inv_std(t);
    for (std::size_t i = 0; i < t; ++i) {
        const double* row = a.values().data() + i * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        mean[i] = mu;
        inv_std[i] = is;
        for (std::size_t j = 0; j < d; ++j)
            out[i * d + j] = (row[j] - mu) * is * gain.values()[j] + bias.values()[j];
    }
    const bool rg = a.requires_grad() || gain.requires_grad() || bias.requires_grad();
    Tensor c = make_output(a.shape(), std::move(out), rg);
    if (rg) {
        DataPtr ad = a.handle(), gd = gain.handle(), bd = bias.handle(), cd = c.handle();
        record([ad, gd, bd, cd, t, d, mean, inv_std] {
            for (std::size_t i = 0; i < t; ++i) {
                const double* row = ad->values.data() + i * d;
                const double* dy = cd->grad.data() + i * d;
                const double mu = mean[i];
                const double is = inv_std[i];
                if (gd->requires_grad || bd->requires_grad) {
                    for (std::size_t j = 0; j < d; ++j) {
                        const double xhat = (row[j] - mu) * is;
                        if (gd->requires_grad) gd->grad[j] += dy[j] * xhat;
                        if (bd->requires_grad) bd->grad[j] += dy[j];
                    }
                }
                if (ad->requires_grad) {
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dxhat = dy[j] * gd->values[j];
                        const double xhat = (row[j] - mu) * is;
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    const double inv_d = 1.0 / static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dxhat = dy[j] * gd->values[j];
                        const double xhat = (row[j] - mu) * is;
                        ad->grad[i * d + j] +=
                            is * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                    }
                }
            }
        });
    }
    return c;
}

Tensor Tape::rms_scale(const Tensor& a, double eps) {
    double mean_sq = 0.0;
    for (double v : a.values()) mean_sq += v * v;
    mean_sq /= static_cast<double>(a.size());
    const double r = std::sqrt(mean_sq + eps);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a.values()[i] / r;
    Tensor c = make_output(a.shape(), std::move(out), a.requires_grad());
    if (a.requires_grad()) {
        DataPtr ad = a.handle(), cd = c.handle();
        const double inv_n = 1.0 / static_cast<double>(a.size());
        record([ad, cd, r, inv_n] {
            double dot = 0.0;
            for (std::size_t i = 0; i < cd->grad.size(); ++i) dot += cd->grad[i] * ad->values[i];
            const double r3 = r * r * r;
            for (std::size_t i = 0; i < cd->grad.size(); ++i) {
                ad->grad[i] += cd->grad[i] / r - ad->values[i] * dot * inv_n / r3;
            }
        });
    }
    return c;
}

Tensor Tape::softmax(const Tensor& a, std::size_t axis) {
    if (axis >= a.rank()) {
        throw AxisError("softmax axis " + std::to_string(axis) + " out of range for rank " +
                        std::to_string(a.rank()));
    }
    if (a.rank() > 2) {
        throw ShapeMismatchError("softmax supports rank <= 2");
    }
    // Normalize to (slices x span): slices iterate over the non-axis extent.
    const bool along_cols = (a.rank() == 1) || axis == 1;
    const std::size_t slices = along_cols ? a.rows() : a.cols();
    const std::size_t span = along_cols ? a.cols() : a.rows();
    const std::size_t slice_stride = along_cols ? a.cols() : 1;
    const std::size_t step = along_cols ? 1 : a.cols();

    std::vector<double> out(a.size());
    for (std::size_t s = 0; s < slices; ++s) {
        const std::size_t base = along_cols ? s * slice_stride : s;
        double mx = a.values()[base];
        for (std::size_t j = 1; j < span; ++j) mx = std::max(mx, a.values()[base + j * step]);
        double denom = 0.0;
        for (std::size_t j = 0; j < span; ++j) {
            const double e = std::exp(a.values()[base + j * step] - mx);
            out[base + j * step] = e;
            denom += e;
        }
        for (std::size_t j = 0; j < span; ++j) out[base + j * step] /= denom;
    }
    Tensor c = make_output(a.shape(), std::move(out), a.requires_grad());
    if (a.requires_grad()) {
        DataPtr ad = a.handle(), cd = c.handle();
        record([ad, cd, slices, span, slice_stride, step, along_cols] {
            for (std::size_t s = 0; s < slices; ++s) {
                const std::size_t base = along_cols ? s * slice_stride : s;
                double dot = 0.0;
                for (std::size_t j = 0; j < span; ++j) {
                    const std::size_t idx = base + j * step;
                    dot += cd->grad[idx] * cd->values[idx];
                }
                for (std::size_t j = 0; j < span; ++j) {
                    const std::size_t idx = base + j * step;
                    ad->grad[idx] += cd->values[idx] * (cd->grad[idx] - dot);
                }
            }
        });
    }
    return c;
}

Tensor Tape::concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw ShapeMismatchError("concat_rows on empty list");
    const std::size_t d = parts[0].cols();
    std::size_t total_rows = 0;
    bool rg = false;
    for (const Tensor& p : parts) {
        if (p.cols() != d) {
            throw ShapeMismatchError("concat_rows width mismatch: " + std::to_string(p.cols()) +
                                     " vs " + std::to_string(d));
        }
        total_rows += p.rows();
        rg = rg || p.requires_grad();
    }
    std::vector<double> out;
    out.reserve(total_rows * d);
    for (const Tensor& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
    Tensor c = make_output({total_rows, d}, std::move(out), rg);
    if (rg) {
        std::vector<DataPtr> srcs;
        srcs.reserve(parts.size());
        for (const Tensor& p : parts) srcs.push_back(p.handle());
        DataPtr cd = c.handle();
        record([srcs, cd] {
            std::size_t offset = 0;
            for (const DataPtr& src : srcs) {
                if (src->requires_grad) {
                    for (std::size_t i = 0; i < src->values.size(); ++i)
                        src->grad[i] += cd->grad[offset + i];
                }
                offset += src->values.size();
            }
        });
    }
    return c;
}

Tensor Tape::concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) throw ShapeMismatchError("concat_cols on empty list");
    const std::size_t t = parts[0].rows();
    std::size_t total_cols = 0;
    bool rg = false;
    for (const Tensor& p : parts) {
        if (p.rows() != t) {
            throw ShapeMismatchError("concat_cols height mismatch");
        }
        total_cols += p.cols();
        rg = rg || p.requires_grad();
    }
    std::vector<double> out(t * total_cols);
    std::size_t col_offset = 0;
    for (const Tensor& p : parts) {
        const std::size_t pc = p.cols();
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t j = 0; j < pc; ++j)
                out[i * total_cols + col_offset + j] = p.values()[i * pc + j];
        col_offset += pc;
    }
    Tensor c = make_output({t, total_cols}, std::move(out), rg);
    if (rg) {
        std::vector<DataPtr> srcs;
        std::vector<std::size_t> widths;
        for (const Tensor& p : parts) {
            srcs.push_back(p.handle());
            widths.push_back(p.cols());
        }
        DataPtr cd = c.handle();
        record([srcs, widths, cd, t, total_cols] {
            std::size_t offset = 0;
            for (std::size_t s = 0; s < srcs.size(); ++s) {
                const std::size_t pc = widths[s];
                if (srcs[s]->requires_grad) {
                    for (std::size_t i = 0; i < t; ++i)
                        for (std::size_t j = 0; j < pc; ++j)
                            srcs[s]->grad[i * pc + j] += cd->grad[i * total_cols + offset + j];
                }
                offset += pc;
            }
        });
    }
    return c;
}

Tensor Tape::slice_rows(const Tensor& a, std::size_t row_begin, std::size_t row_end) {
    const std::size_t t = a.rows(), d = a.cols();
    if (row_begin > row_end || row_end > t) {
        throw ShapeMismatchError("slice_rows range out of bounds");
    }
    const std::size_t h = row_end - row_begin;
    std::vector<double> out(a.values().begin() + row_begin * d,
                            a.values().begin() + row_end * d);
    Tensor c = make_output({h, d}, std::move(out), a.requires_grad());
    if (a.requires_grad()) {
        DataPtr ad = a.handle(), cd = c.handle();
        record([ad, cd, row_begin, h, d] {
            for (std::size_t i = 0; i < h * d; ++i) ad->grad[row_begin * d + i] += cd->grad[i];
        });
    }
    return c;
}

Tensor Tape::slice_cols(const Tensor& a, std::size_t col_begin, std::size_t col_end) {
    const std::size_t t = a.rows(), d = a.cols();
    if (col_begin > col_end || col_end > d) {
        throw ShapeMismatchError("slice_cols range out of bounds");
    }
    const std::size_t w = col_end - col_begin;
    std::vector<double> out(t * w);
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < w; ++j) out[i * w + j] = a.values()[i * d + col_begin + j];
    Tensor c = make_output({t, w}, std::move(out), a.requires_grad());
    if (a.requires_grad()) {
        DataPtr ad = a.handle(), cd = c.handle();
        record([ad, cd, col_begin, t, w, d] {
            for (std::size_t i = 0; i < t; ++i)
                for (std::size_t j = 0; j < w; ++j)
                    ad->grad[i * d + col_begin + j] += cd->grad[i * w + j];
        });
    }
    return c;
}

Tensor Tape::sum_all(const Tensor& a) {
    double total = 0.0;
    for (double v : a.values()) total += v;
    Tensor c = make_output({1}, {total}, a.requires_grad());
    if (a.requires_grad()) {
        DataPtr ad = a.handle(), cd = c.handle();
        record([ad, cd] {
            for (double& g : ad->grad) g += cd->grad[0];
        });
    }
    return c;
}

Tensor Tape::mean_all(const Tensor& a) {
    double total = 0.0;
    for (double v : a.values()) total += v;
    const double inv_n = 1.0 / static_cast<double>(a.size());
    Tensor c = make_output({1}, {total * inv_n}, a.requires_grad());
    if (a.requires_grad()) {
        DataPtr ad = a.handle(), cd = c.handle();
        record([ad, cd, inv_n] {
            for (double& g : ad->grad) g += cd->grad[0] * inv_n;
        });
    }
    return c;
}

Tensor Tape::cross_entropy(const Tensor& logits, std::size_t label) {
    const std::size_t n = logits.size();
    if (label >= n) {
        throw LabelError("cross_entropy label " + std::to_string(label) + " out of range " +
                         std::to_string(n));
    }
    double mx = logits.values()[0];
    for (double v : logits.values()) mx = std::max(mx, v);
    double denom = 0.0;
    std::vector<double> probs(n);
    for (std::size_t i = 0; i < n; ++i) {
        probs[i] = std::exp(logits.values()[i] - mx);
        denom += probs[i];
    }
    for (double& p : probs) p /= denom;
    const double loss = std::log(denom) + mx - logits.values()[label];
    Tensor c = make_output({1}, {loss}, logits.requires_grad());
    if (logits.requires_grad()) {
        DataPtr ld = logits.handle(), cd = c.handle();
        record([ld, cd, probs, label] {
            const double g = cd->grad[0];
            for (std::size_t i = 0; i < probs.size(); ++i) {
                ld->grad[i] += g * (probs[i] - (i == label ? 1.0 : 0.0));
            }
        });
    }
    return c;
}

Tensor Tape::mse(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeMismatchError("mse shape mismatch: " + shape_str(a.shape()) + " vs " +
                                 shape_str(b.shape()));
    }
    const double inv_n = 1.0 / static_cast<double>(a.size());
    double total = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double diff = a.values()[i] - b.values()[i];
        total += diff * diff;
    }
    const bool rg = a.requires_grad() || b.requires_grad();
    Tensor c = make_output({1}, {total * inv_n}, rg);
    if (rg) {
        DataPtr ad = a.handle(), bd = b.handle(), cd = c.handle();
        record([ad, bd, cd, inv_n] {
            const double g = cd->grad[0];
            for (std::size_t i = 0; i < ad->values.size(); ++i) {
                const double d = 2.0 * inv_n * (ad->values[i] - bd->values[i]) * g;
                if (ad->requires_grad) ad->grad[i] += d;
                if (bd->requires_grad) bd->grad[i] -= d;
            }
        });
    }
    return c;
}

Tensor Tape::cosine_distance(const Tensor& u, const Tensor& v) {
    if (u.size() != v.size()) {
        throw ShapeMismatchError("cosine_distance size mismatch: " + std::to_string(u.size()) +
                                 " vs " + std::to_string(v.size()));
    }
    double dot = 0.0, nu2 = 0.0, nv2 = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        dot += u.values()[i] * v.values()[i];
        nu2 += u.values()[i] * u.values()[i];
        nv2 += v.values()[i] * v.values()[i];
    }
    if (nu2 == 0.0 || nv2 == 0.0) {
        throw DegenerateKeyError("cosine_distance on zero-norm vector");
    }
    const double nu = std::sqrt(nu2), nv = std::sqrt(nv2);
    const double dist = 1.0 - dot / (nu * nv);
    const bool rg = u.requires_grad() || v.requires_grad();
    Tensor c = make_output({1}, {dist}, rg);
    if (rg) {
        DataPtr ud = u.handle(), vd = v.handle(), cd = c.handle();
        record([ud, vd, cd, dot, nu, nv] {
            const double g = cd->grad[0];
            const double inv = 1.0 / (nu * nv);
            for (std::size_t i = 0; i < ud->values.size(); ++i) {
                if (ud->requires_grad) {
                    ud->grad[i] -= g * (vd->values[i] * inv - dot * ud->values[i] / (nu * nu * nu * nv));
                }
                if (vd->requires_grad) {
                    vd->grad[i] -= g * (ud->values[i] * inv - dot * vd->values[i] / (nu * nv * nv * nv));
                }
            }
        });
    }
    return c;
}

void Tape::backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw NonScalarLossError("backward needs a scalar loss, got " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) return;  // loss disconnected from every trainable leaf
    loss.handle()->grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backprop();
}

}  // namespace fedmgp
