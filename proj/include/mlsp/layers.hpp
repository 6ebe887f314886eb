#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mlsp/errors.hpp"
#include "mlsp/gemm.hpp"
#include "mlsp/rng.hpp"
#include "mlsp/tensor.hpp"

namespace mlsp::nn {

// Execution modes.
//   Train:     batch statistics, running-stat updates, dropout active, caches kept.
//   Eval:      running statistics, dropout off, no caches.
//   GradCheck: batch statistics but no running-stat updates, dropout off,
//              caches kept. Fully deterministic, used by finite differencing.
enum class Mode { Train, Eval, GradCheck };

inline bool mode_caches(Mode m) { return m != Mode::Eval; }

template <typename T>
struct Param {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    bool trainable = true;
};

struct ForwardCtx {
    Mode mode = Mode::Eval;
    uint64_t dropout_key = 0;  // per-forward stream key; layers mix in their node id
    int node_id = 0;
    const std::string* node_name = nullptr;
};

template <typename T>
struct BackwardIO {
    const std::vector<const Tensor<T>*>& inputs;  // graph-cached inputs
    const Tensor<T>& output;                      // graph-cached output
    const Tensor<T>& grad_out;
    const std::vector<char>& need_input_grad;     // per input position
};

namespace detail2 {
inline std::string node_label(const ForwardCtx& ctx, const char* kind) {
    return (ctx.node_name ? *ctx.node_name : std::string("<node>")) + " (" + kind + ")";
}
[[noreturn]] inline void shape_fail(const ForwardCtx& ctx, const char* kind,
                                    const std::string& expected, const Shape& actual) {
    throw DataError("layer " + node_label(ctx, kind) + ": expected input " + expected +
                    ", got " + shape_str(actual));
}
}  // namespace detail2

template <typename T>
class Layer {
public:
    virtual ~Layer() = default;
    virtual const char* kind() const = 0;
    virtual size_t arity() const { return 1; }
    virtual void init(Rng&) {}
    virtual std::vector<Param<T>*> params() { return {}; }

    // Validates shapes; caches whatever backward needs when mode_caches(ctx.mode).
    virtual Tensor<T> forward(const std::vector<const Tensor<T>*>& inputs, const ForwardCtx& ctx) = 0;

    // Returns one gradient per input (empty tensors where need_input_grad is
    // false). Accumulates parameter gradients into Param::grad.
    virtual std::vector<Tensor<T>> backward(const BackwardIO<T>& io) = 0;
};

// ---------------------------------------------------------------------------
// dense: y = x W + b on [B, in] -> [B, units]
// ---------------------------------------------------------------------------
template <typename T>
class DenseLayer final : public Layer<T> {
public:
    DenseLayer(int64_t in_features, int64_t units, bool use_bias, bool trainable)
        : in_(in_features), units_(units), use_bias_(use_bias) {
        if (units < 1) throw DataError("dense: units must be >= 1, got " + std::to_string(units));
        weight_ = {"weight", Tensor<T>({in_, units_}), Tensor<T>({in_, units_}), trainable};
        if (use_bias_) bias_ = {"bias", Tensor<T>({units_}), Tensor<T>({units_}), trainable};
    }

    const char* kind() const override { return "dense"; }

    void init(Rng& rng) override {
        const double limit = std::sqrt(6.0 / static_cast<double>(in_ + units_));
        for (auto& w : weight_.value.data) w = static_cast<T>(rng.next_range(-limit, limit));
        // biases stay zero
    }

    std::vector<Param<T>*> params() override {
        std::vector<Param<T>*> ps{&weight_};
        if (use_bias_) ps.push_back(&bias_);
        return ps;
    }

    Tensor<T> forward(const std::vector<const Tensor<T>*>& ins, const ForwardCtx& ctx) override {
        const Tensor<T>& x = *ins[0];
        if (x.rank() != 2 || x.dim(1) != in_)
            detail2::shape_fail(ctx, kind(), "[batch x " + std::to_string(in_) + "]", x.shape);
        const int64_t b = x.dim(0);
        Tensor<T> y({b, units_});
        mlsp::detail::gemm<T>(false, false, b, units_, in_, x.ptr(), weight_.value.ptr(), y.ptr(), false);
        if (use_bias_) {
            for (int64_t r = 0; r < b; ++r) {
                T* row = y.ptr() + r * units_;
                const T* bias = bias_.value.ptr();
                for (int64_t c = 0; c < units_; ++c) row[c] += bias[c];
            }
        }
        return y;
    }

    std::vector<Tensor<T>> backward(const BackwardIO<T>& io) override {
        const Tensor<T>& x = *io.inputs[0];
        const Tensor<T>& g = io.grad_out;
        const int64_t b = x.dim(0);
        if (weight_.trainable) {
            mlsp::detail::gemm<T>(true, false, in_, units_, b, x.ptr(), g.ptr(),
                                  weight_.grad.ptr(), true);
            if (use_bias_) {
                std::vector<double> acc(static_cast<size_t>(units_), 0.0);
                for (int64_t r = 0; r < b; ++r)
                    for (int64_t c = 0; c < units_; ++c) acc[c] += static_cast<double>(g[r * units_ + c]);
                for (int64_t c = 0; c < units_; ++c) bias_.grad[c] += static_cast<T>(acc[c]);
            }
        }
        std::vector<Tensor<T>> gins(1);
        if (io.need_input_grad[0]) {
            gins[0] = Tensor<T>(x.shape);
            mlsp::detail::gemm<T>(false, true, b, in_, units_, g.ptr(), weight_.value.ptr(),
                                  gins[0].ptr(), false);
        }
        return gins;
    }

    Param<T>& weight() { return weight_; }
    Param<T>& bias() { return bias_; }

private:
    int64_t in_, units_;
    bool use_bias_;
    Param<T> weight_, bias_;
};

// ---------------------------------------------------------------------------
// conv2d: stride 1, same padding, kernel 1 or 3, channels-last [B,H,W,C].
// The 3x3 path runs one GEMM per kernel offset over gathered row runs, which
// keeps scratch memory at one [rows x C] buffer instead of a full im2col.
// ---------------------------------------------------------------------------
template <typename T>
class Conv2dLayer final : public Layer<T> {
public:
    Conv2dLayer(int64_t in_channels, int64_t out_channels, int kernel, bool trainable)
        : cin_(in_channels), cout_(out_channels), k_(kernel) {
        if (kernel != 1 && kernel != 3)
            throw DataError("conv2d: kernel size must be 1 or 3, got " + std::to_string(kernel));
        if (out_channels < 1) throw DataError("conv2d: output channels must be >= 1");
        weight_ = {"weight", Tensor<T>({k_, k_, cin_, cout_}), Tensor<T>({k_, k_, cin_, cout_}), trainable};
        bias_ = {"bias", Tensor<T>({cout_}), Tensor<T>({cout_}), trainable};
    }

    const char* kind() const override { return "conv2d"; }

    void init(Rng& rng) override {
        const double fan_in = static_cast<double>(k_) * k_ * cin_;
        const double fan_out = static_cast<double>(k_) * k_ * cout_;
        const double limit = std::sqrt(6.0 / (fan_in + fan_out));
        for (auto& w : weight_.value.data) w = static_cast<T>(rng.next_range(-limit, limit));
    }

    std::vector<Param<T>*> params() override { return {&weight_, &bias_}; }

    Tensor<T> forward(const std::vector<const Tensor<T>*>& ins, const ForwardCtx& ctx) override {
        const Tensor<T>& x = *ins[0];
        if (x.rank() != 4 || x.dim(3) != cin_)
            detail2::shape_fail(ctx, kind(), "[batch x H x W x " + std::to_string(cin_) + "]", x.shape);
        const int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2);
        Tensor<T> y({b, h, w, cout_});
        const int64_t rows = b * h * w;
        for (int64_t r = 0; r < rows; ++r) {
            T* row = y.ptr() + r * cout_;
            const T* bias = bias_.value.ptr();
            for (int64_t c = 0; c < cout_; ++c) row[c] = bias[c];
        }
        if (k_ == 1) {
            mlsp::detail::gemm<T>(false, false, rows, cout_, cin_, x.ptr(), weight_.value.ptr(),
                                  y.ptr(), true);
            return y;
        }
        for (int dy = 0; dy < 3; ++dy) {
            for (int dx = 0; dx < 3; ++dx) {
                OffsetRect rect = offset_rect(h, w, dy, dx);
                if (rect.empty()) continue;
                const int64_t m = b * rect.rows() * rect.cols();
                gather_.resize(static_cast<size_t>(m * cin_));
                gather_rows(x, rect, dy, dx, gather_.data());
                scratch_.resize(static_cast<size_t>(m * cout_));
                mlsp::detail::gemm<T>(false, false, m, cout_, cin_, gather_.data(),
                                      weight_slice(dy, dx), scratch_.data(), false);
                scatter_add_output(y, rect, scratch_.data());
            }
        }
        return y;
    }

    std::vector<Tensor<T>> backward(const BackwardIO<T>& io) override {
        const Tensor<T>& x = *io.inputs[0];
        const Tensor<T>& g = io.grad_out;
        const int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2);
        const int64_t rows = b * h * w;

        if (bias_.trainable) {
            std::vector<double> acc(static_cast<size_t>(cout_), 0.0);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t c = 0; c < cout_; ++c) acc[c] += static_cast<double>(g[r * cout_ + c]);
            for (int64_t c = 0; c < cout_; ++c) bias_.grad[c] += static_cast<T>(acc[c]);
        }

        std::vector<Tensor<T>> gins(1);
        const bool need_dx = io.need_input_grad[0] != 0;
        if (need_dx) gins[0] = Tensor<T>(x.shape);

        if (k_ == 1) {
            if (weight_.trainable)
                mlsp::detail::gemm<T>(true, false, cin_, cout_, rows, x.ptr(), g.ptr(),
                                      weight_.grad.ptr(), true);
            if (need_dx)
                mlsp::detail::gemm<T>(false, true, rows, cin_, cout_, g.ptr(), weight_.value.ptr(),
                                      gins[0].ptr(), false);
            return gins;
        }

        for (int dy = 0; dy < 3; ++dy) {
            for (int dx = 0; dx < 3; ++dx) {
                OffsetRect rect = offset_rect(h, w, dy, dx);
                if (rect.empty()) continue;
                const int64_t m = b * rect.rows() * rect.cols();
                scratch_.resize(static_cast<size_t>(m * cout_));
                gather_out_rows(g, rect, scratch_.data());
                if (weight_.trainable) {
                    gather_.resize(static_cast<size_t>(m * cin_));
                    gather_rows(x, rect, dy, dx, gather_.data());
                    mlsp::detail::gemm<T>(true, false, cin_, cout_, m, gather_.data(),
                                          scratch_.data(), weight_grad_slice(dy, dx), true);
                }
                if (need_dx) {
                    gather_.resize(static_cast<size_t>(m * cin_));
                    mlsp::detail::gemm<T>(false, true, m, cin_, cout_, scratch_.data(),
                                          weight_slice(dy, dx), gather_.data(), false);
                    scatter_add_input(gins[0], rect, dy, dx, gather_.data());
                }
            }
        }
        return gins;
    }

private:
    struct OffsetRect {
        int64_t y0, y1, x0, x1, b, h, w;
        bool empty() const { return y0 >= y1 || x0 >= x1; }
        int64_t rows() const { return y1 - y0; }
        int64_t cols() const { return x1 - x0; }
    };

    OffsetRect offset_rect(int64_t h, int64_t w, int dy, int dx) const {
        // output (y,x) participates iff input (y+dy-1, x+dx-1) is in bounds
        OffsetRect r;
        r.y0 = std::max<int64_t>(0, 1 - dy);
        r.y1 = std::min<int64_t>(h, h + 1 - dy);
        r.x0 = std::max<int64_t>(0, 1 - dx);
        r.x1 = std::min<int64_t>(w, w + 1 - dx);
        r.h = h;
        r.w = w;
        return r;
    }

    const T* weight_slice(int dy, int dx) const {
        return weight_.value.ptr() + (static_cast<int64_t>(dy) * 3 + dx) * cin_ * cout_;
    }
    T* weight_grad_slice(int dy, int dx) {
        return weight_.grad.ptr() + (static_cast<int64_t>(dy) * 3 + dx) * cin_ * cout_;
    }

    void gather_rows(const Tensor<T>& x, const OffsetRect& r, int dy, int dx, T* dst) const {
        const int64_t b = x.dim(0), run = r.cols() * cin_;
        for (int64_t bi = 0; bi < b; ++bi) {
            for (int64_t y = r.y0; y < r.y1; ++y) {
                const int64_t iy = y + dy - 1, ix = r.x0 + dx - 1;
                const T* src = x.ptr() + ((bi * r.h + iy) * r.w + ix) * cin_;
                std::copy(src, src + run, dst);
                dst += run;
            }
        }
    }

    void gather_out_rows(const Tensor<T>& g, const OffsetRect& r, T* dst) const {
        const int64_t b = g.dim(0), run = r.cols() * cout_;
        for (int64_t bi = 0; bi < b; ++bi) {
            for (int64_t y = r.y0; y < r.y1; ++y) {
                const T* src = g.ptr() + ((bi * r.h + y) * r.w + r.x0) * cout_;
                std::copy(src, src + run, dst);
                dst += run;
            }
        }
    }

    void scatter_add_output(Tensor<T>& y, const OffsetRect& r, const T* src) const {
        const int64_t b = y.dim(0), run = r.cols() * cout_;
        for (int64_t bi = 0; bi < b; ++bi) {
            for (int64_t yy = r.y0; yy < r.y1; ++yy) {
                T* dst = y.ptr() + ((bi * r.h + yy) * r.w + r.x0) * cout_;
                for (int64_t i = 0; i < run; ++i) dst[i] += src[i];
                src += run;
            }
        }
    }

    void scatter_add_input(Tensor<T>& dx, const OffsetRect& r, int dy, int dxo, const T* src) const {
        const int64_t b = dx.dim(0), run = r.cols() * cin_;
        for (int64_t bi = 0; bi < b; ++bi) {
            for (int64_t y = r.y0; y < r.y1; ++y) {
                const int64_t iy = y + dy - 1, ix = r.x0 + dxo - 1;
                T* dst = dx.ptr() + ((bi * r.h + iy) * r.w + ix) * cin_;
                for (int64_t i = 0; i < run; ++i) dst[i] += src[i];
                src += run;
            }
        }
    }

    int64_t cin_, cout_;
    int64_t k_;
    Param<T> weight_, bias_;
    std::vector<T> gather_, scratch_;
};

// ---------------------------------------------------------------------------
// batch_norm over the last axis. Training normalizes with biased batch
// statistics; inference uses the running estimates (momentum 0.99, eps 1e-3).
// ---------------------------------------------------------------------------
template <typename T>
class BatchNormLayer final : public Layer<T> {
public:
    explicit BatchNormLayer(int64_t channels, double momentum = 0.99, double eps = 1e-3)
        : c_(channels), momentum_(momentum), eps_(eps) {
        gamma_ = {"gamma", Tensor<T>({c_}), Tensor<T>({c_}), true};
        beta_ = {"beta", Tensor<T>({c_}), Tensor<T>({c_}), true};
        running_mean_ = {"running_mean", Tensor<T>({c_}), Tensor<T>({c_}), false};
        running_var_ = {"running_var", Tensor<T>({c_}), Tensor<T>({c_}), false};
        gamma_.value.fill(T(1));
        running_var_.value.fill(T(1));
    }

    const char* kind() const override { return "batch_norm"; }

    std::vector<Param<T>*> params() override {
        return {&gamma_, &beta_, &running_mean_, &running_var_};
    }

    Tensor<T> forward(const std::vector<const Tensor<T>*>& ins, const ForwardCtx& ctx) override {
        const Tensor<T>& x = *ins[0];
        if (x.rank() < 2 || x.shape.back() != c_)
            detail2::shape_fail(ctx, kind(), "[... x " + std::to_string(c_) + "]", x.shape);
        const int64_t n = x.numel() / c_;
        Tensor<T> y(x.shape);
        if (ctx.mode == Mode::Eval) {
            for (int64_t c = 0; c < c_; ++c) {
                const double inv = 1.0 / std::sqrt(static_cast<double>(running_var_.value[c]) + eps_);
                const double a = static_cast<double>(gamma_.value[c]) * inv;
                const double b = static_cast<double>(beta_.value[c]) -
                                 a * static_cast<double>(running_mean_.value[c]);
                for (int64_t r = 0; r < n; ++r)
                    y[r * c_ + c] = static_cast<T>(a * static_cast<double>(x[r * c_ + c]) + b);
            }
            return y;
        }
        mean_.assign(static_cast<size_t>(c_), 0.0);
        invstd_.assign(static_cast<size_t>(c_), 0.0);
        std::vector<double> sq(static_cast<size_t>(c_), 0.0);
        for (int64_t r = 0; r < n; ++r) {
            const T* row = x.ptr() + r * c_;
            for (int64_t c = 0; c < c_; ++c) {
                const double v = static_cast<double>(row[c]);
                mean_[static_cast<size_t>(c)] += v;
                sq[static_cast<size_t>(c)] += v * v;
            }
        }
        for (int64_t c = 0; c < c_; ++c) {
            mean_[c] /= static_cast<double>(n);
            double var = sq[c] / static_cast<double>(n) - mean_[c] * mean_[c];
            var = std::max(0.0, var);
            invstd_[c] = 1.0 / std::sqrt(var + eps_);
            if (ctx.mode == Mode::Train) {
                running_mean_.value[c] = static_cast<T>(momentum_ * static_cast<double>(running_mean_.value[c]) +
                                                        (1.0 - momentum_) * mean_[c]);
                running_var_.value[c] = static_cast<T>(momentum_ * static_cast<double>(running_var_.value[c]) +
                                                       (1.0 - momentum_) * var);
            }
        }
        for (int64_t r = 0; r < n; ++r) {
            const T* row = x.ptr() + r * c_;
            T* yrow = y.ptr() + r * c_;
            for (int64_t c = 0; c < c_; ++c) {
                const double xhat = (static_cast<double>(row[c]) - mean_[c]) * invstd_[c];
                yrow[c] = static_cast<T>(static_cast<double>(gamma_.value[c]) * xhat +
                                         static_cast<double>(beta_.value[c]));
            }
        }
        rows_cached_ = n;
        return y;
    }

    std::vector<Tensor<T>> backward(const BackwardIO<T>& io) override {
        const Tensor<T>& x = *io.inputs[0];
        const Tensor<T>& g = io.grad_out;
        const int64_t n = rows_cached_;
        std::vector<double> sum_g(static_cast<size_t>(c_), 0.0), sum_gx(static_cast<size_t>(c_), 0.0);
        for (int64_t r = 0; r < n; ++r) {
            const T* grow = g.ptr() + r * c_;
            const T* xrow = x.ptr() + r * c_;
            for (int64_t c = 0; c < c_; ++c) {
                const double xhat = (static_cast<double>(xrow[c]) - mean_[c]) * invstd_[c];
                sum_g[c] += static_cast<double>(grow[c]);
                sum_gx[c] += static_cast<double>(grow[c]) * xhat;
            }
        }
        for (int64_t c = 0; c < c_; ++c) {
            gamma_.grad[c] += static_cast<T>(sum_gx[c]);
            beta_.grad[c] += static_cast<T>(sum_g[c]);
        }
        std::vector<Tensor<T>> gins(1);
        if (io.need_input_grad[0]) {
            gins[0] = Tensor<T>(x.shape);
            for (int64_t r = 0; r < n; ++r) {
                const T* grow = g.ptr() + r * c_;
                const T* xrow = x.ptr() + r * c_;
                T* drow = gins[0].ptr() + r * c_;
                for (int64_t c = 0; c < c_; ++c) {
                    const double xhat = (static_cast<double>(xrow[c]) - mean_[c]) * invstd_[c];
                    const double coef = static_cast<double>(gamma_.value[c]) * invstd_[c] / n;
                    drow[c] = static_cast<T>(coef * (n * static_cast<double>(grow[c]) - sum_g[c] -
                                                     xhat * sum_gx[c]));
                }
            }
        }
        return gins;
    }

    double eps() const { return eps_; }

private:
    int64_t c_;
    double momentum_, eps_;
    Param<T> gamma_, beta_, running_mean_, running_var_;
    std::vector<double> mean_, invstd_;
    int64_t rows_cached_ = 0;
};

// ---------------------------------------------------------------------------
// dropout with inverted scaling: train-time outputs are divided by the keep
// probability so inference is a plain identity.
// ---------------------------------------------------------------------------
template <typename T>
class DropoutLayer final : public Layer<T> {
public:
    explicit DropoutLayer(double rate) : rate_(rate) {
        if (rate < 0.0 || rate >= 1.0)
            throw DataError("dropout: rate must be in [0,1), got " + std::to_string(rate));
    }

    const char* kind() const override { return "dropout"; }

    Tensor<T> forward(const std::vector<const Tensor<T>*>& ins, const ForwardCtx& ctx) override {
        const Tensor<T>& x = *ins[0];
        active_ = ctx.mode == Mode::Train && rate_ > 0.0;
        if (!active_) return x;
        Rng rng(keyed_u64(ctx.dropout_key, rng_tag::kDropout, static_cast<uint64_t>(ctx.node_id)));
        const double keep = 1.0 - rate_;
        const T scale = static_cast<T>(1.0 / keep);
        mask_.resize(static_cast<size_t>(x.numel()));
        Tensor<T> y(x.shape);
        for (int64_t i = 0; i < x.numel(); ++i) {
            const bool on = rng.next_unit() >= rate_;
            mask_[static_cast<size_t>(i)] = on;
            y[i] = on ? x[i] * scale : T(0);
        }
        return y;
    }

    std::vector<Tensor<T>> backward(const BackwardIO<T>& io) override {
        std::vector<Tensor<T>> gins(1);
        if (!io.need_input_grad[0]) return gins;
        if (!active_) {
            gins[0] = io.grad_out;
            return gins;
        }
        const T scale = static_cast<T>(1.0 / (1.0 - rate_));
        gins[0] = Tensor<T>(io.grad_out.shape);
        for (int64_t i = 0; i < io.grad_out.numel(); ++i)
            gins[0][i] = mask_[static_cast<size_t>(i)] ? io.grad_out[i] * scale : T(0);
        return gins;
    }

    double rate() const { return rate_; }

private:
    double rate_;
    bool active_ = false;
    std::vector<char> mask_;
};

// ---------------------------------------------------------------------------
template <typename T>
class ReluLayer final : public Layer<T> {
public:
    const char* kind() const override { return "relu"; }

    Tensor<T> forward(const std::vector<const Tensor<T>*>& ins, const ForwardCtx&) override {
        Tensor<T> y(ins[0]->shape);
        for (int64_t i = 0; i < y.numel(); ++i) y[i] = std::max(T(0), (*ins[0])[i]);
        return y;
    }

    std::vector<Tensor<T>> backward(const BackwardIO<T>& io) override {
        std::vector<Tensor<T>> gins(1);
        if (!io.need_input_grad[0]) return gins;
        gins[0] = Tensor<T>(io.grad_out.shape);
        for (int64_t i = 0; i < io.grad_out.numel(); ++i)
            gins[0][i] = io.output[i] > T(0) ? io.grad_out[i] : T(0);
        return gins;
    }
};

// ---------------------------------------------------------------------------
// global_avg_pool: [B,H,W,C] -> [B,C]
// ---------------------------------------------------------------------------
template <typename T>
class GlobalAvgPoolLayer final : public Layer<T> {
public:
    const char* kind() const override { return "global_avg_pool"; }

    Tensor<T> forward(const std::vector<const Tensor<T>*>& ins, const ForwardCtx& ctx) override {
        const Tensor<T>& x = *ins[0];
        if (x.rank() != 4) detail2::shape_fail(ctx, kind(), "[batch x H x W x C]", x.shape);
        const int64_t b = x.dim(0), s = x.dim(1) * x.dim(2), c = x.dim(3);
        Tensor<T> y({b, c});
        std::vector<double> acc(static_cast<size_t>(c));
        for (int64_t bi = 0; bi < b; ++bi) {
            std::fill(acc.begin(), acc.end(), 0.0);
            const T* base = x.ptr() + bi * s * c;
            for (int64_t p = 0; p < s; ++p)
                for (int64_t ci = 0; ci < c; ++ci) acc[ci] += static_cast<double>(base[p * c + ci]);
            for (int64_t ci = 0; ci < c; ++ci)
                y[bi * c + ci] = static_cast<T>(acc[ci] / static_cast<double>(s));
        }
        return y;
    }

    std::vector<Tensor<T>> backward(const BackwardIO<T>& io) override {
        std::vector<Tensor<T>> gins(1);
        if (!io.need_input_grad[0]) return gins;
        const Tensor<T>& x = *io.inputs[0];
        const int64_t b = x.dim(0), s = x.dim(1) * x.dim(2), c = x.dim(3);
        gins[0] = Tensor<T>(x.shape);
        const T inv = static_cast<T>(1.0 / static_cast<double>(s));
        for (int64_t bi = 0; bi < b; ++bi) {
            const T* grow = io.grad_out.ptr() + bi * c;
            T* base = gins[0].ptr() + bi * s * c;
            for (int64_t p = 0; p < s; ++p)
                for (int64_t ci = 0; ci < c; ++ci) base[p * c + ci] = grow[ci] * inv;
        }
        return gins;
    }
};

// ---------------------------------------------------------------------------
// spatial_avg_pool: 3x3 window, stride 1, same padding; averages over the
// in-bounds neighbors only.
// ---------------------------------------------------------------------------
template <typename T>
class SpatialAvgPoolLayer final : public Layer<T> {
public:
    const char* kind() const override { return "spatial_avg_pool"; }

    Tensor<T> forward(const std::vector<const Tensor<T>*>& ins, const ForwardCtx& ctx) override {
        const Tensor<T>& x = *ins[0];
        if (x.rank() != 4) detail2::shape_fail(ctx, kind(), "[batch x H x W x C]", x.shape);
        const int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
        Tensor<T> y(x.shape);
        for (int64_t bi = 0; bi < b; ++bi) {
            for (int64_t yy = 0; yy < h; ++yy) {
                const int64_t ylo = std::max<int64_t>(0, yy - 1), yhi = std::min(h, yy + 2);
                for (int64_t xx = 0; xx < w; ++xx) {
                    const int64_t xlo = std::max<int64_t>(0, xx - 1), xhi = std::min(w, xx + 2);
                    const T inv = static_cast<T>(1.0 / static_cast<double>((yhi - ylo) * (xhi - xlo)));
                    T* out = y.ptr() + ((bi * h + yy) * w + xx) * c;
                    std::fill(out, out + c, T(0));
                    for (int64_t ny = ylo; ny < yhi; ++ny)
                        for (int64_t nx = xlo; nx < xhi; ++nx) {
                            const T* src = x.ptr() + ((bi * h + ny) * w + nx) * c;
                            for (int64_t ci = 0; ci < c; ++ci) out[ci] += src[ci];
                        }
                    for (int64_t ci = 0; ci < c; ++ci) out[ci] *= inv;
                }
            }
        }
        return y;
    }

    std::vector<Tensor<T>> backward(const BackwardIO<T>& io) override {
        std::vector<Tensor<T>> gins(1);
        if (!io.need_input_grad[0]) return gins;
        const Tensor<T>& x = *io.inputs[0];
        const int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
        gins[0] = Tensor<T>(x.shape);
        for (int64_t bi = 0; bi < b; ++bi) {
            for (int64_t yy = 0; yy < h; ++yy) {
                const int64_t ylo = std::max<int64_t>(0, yy - 1), yhi = std::min(h, yy + 2);
                for (int64_t xx = 0; xx < w; ++xx) {
                    const int64_t xlo = std::max<int64_t>(0, xx - 1), xhi = std::min(w, xx + 2);
                    const T inv = static_cast<T>(1.0 / static_cast<double>((yhi - ylo) * (xhi - xlo)));
                    const T* grow = io.grad_out.ptr() + ((bi * h + yy) * w + xx) * c;
                    for (int64_t ny = ylo; ny < yhi; ++ny)
                        for (int64_t nx = xlo; nx < xhi; ++nx) {
                            T* dst = gins[0].ptr() + ((bi * h + ny) * w + nx) * c;
                            for (int64_t ci = 0; ci < c; ++ci) dst[ci] += grow[ci] * inv;
                        }
                }
            }
        }
        return gins;
    }
};

// ---------------------------------------------------------------------------
// concat along the channel (last) axis.
// ---------------------------------------------------------------------------
template <typename T>
class ConcatLayer final : public Layer<T> {
public:
    explicit ConcatLayer(size_t arity) : arity_(arity) {
        if (arity < 2) throw DataError("concat: needs at least 2 inputs");
    }

    const char* kind() const override { return "concat"; }
    size_t arity() const override { return arity_; }

    Tensor<T> forward(const std::vector<const Tensor<T>*>& ins, const ForwardCtx& ctx) override {
        const Tensor<T>& first = *ins[0];
        Shape lead(first.shape.begin(), first.shape.end() - 1);
        int64_t ctotal = 0;
        for (const Tensor<T>* t : ins) {
            Shape l(t->shape.begin(), t->shape.end() - 1);
            if (l != lead) detail2::shape_fail(ctx, kind(), "matching leading dims", t->shape);
            ctotal += t->shape.back();
        }
        Shape out_shape = lead;
        out_shape.push_back(ctotal);
        Tensor<T> y(out_shape);
        const int64_t rows = y.numel() / ctotal;
        int64_t off = 0;
        for (const Tensor<T>* t : ins) {
            const int64_t c = t->shape.back();
            for (int64_t r = 0; r < rows; ++r)
                std::copy(t->ptr() + r * c, t->ptr() + (r + 1) * c, y.ptr() + r * ctotal + off);
            off += c;
        }
        return y;
    }

    std::vector<Tensor<T>> backward(const BackwardIO<T>& io) override {
        std::vector<Tensor<T>> gins(io.inputs.size());
        const int64_t ctotal = io.grad_out.shape.back();
        const int64_t rows = io.grad_out.numel() / ctotal;
        int64_t off = 0;
        for (size_t i = 0; i < io.inputs.size(); ++i) {
            const int64_t c = io.inputs[i]->shape.back();
            if (io.need_input_grad[i]) {
                gins[i] = Tensor<T>(io.inputs[i]->shape);
                for (int64_t r = 0; r < rows; ++r)
                    std::copy(io.grad_out.ptr() + r * ctotal + off,
                              io.grad_out.ptr() + r * ctotal + off + c, gins[i].ptr() + r * c);
            }
            off += c;
        }
        return gins;
    }

private:
    size_t arity_;
};

// ---------------------------------------------------------------------------
// softmax over the last axis, stabilized by max subtraction.
// ---------------------------------------------------------------------------
template <typename T>
class SoftmaxLayer final : public Layer<T> {
public:
    const char* kind() const override { return "softmax"; }

    Tensor<T> forward(const std::vector<const Tensor<T>*>& ins, const ForwardCtx& ctx) override {
        const Tensor<T>& x = *ins[0];
        if (x.rank() != 2) detail2::shape_fail(ctx, kind(), "[batch x classes]", x.shape);
        const int64_t b = x.dim(0), c = x.dim(1);
        Tensor<T> y(x.shape);
        for (int64_t r = 0; r < b; ++r) {
            const T* row = x.ptr() + r * c;
            T* out = y.ptr() + r * c;
            double mx = static_cast<double>(row[0]);
            for (int64_t i = 1; i < c; ++i) mx = std::max(mx, static_cast<double>(row[i]));
            double denom = 0.0;
            for (int64_t i = 0; i < c; ++i) denom += std::exp(static_cast<double>(row[i]) - mx);
            for (int64_t i = 0; i < c; ++i)
                out[i] = static_cast<T>(std::exp(static_cast<double>(row[i]) - mx) / denom);
        }
        return y;
    }

    std::vector<Tensor<T>> backward(const BackwardIO<T>& io) override {
        std::vector<Tensor<T>> gins(1);
        if (!io.need_input_grad[0]) return gins;
        const int64_t b = io.output.dim(0), c = io.output.dim(1);
        gins[0] = Tensor<T>(io.output.shape);
        for (int64_t r = 0; r < b; ++r) {
            const T* y = io.output.ptr() + r * c;
            const T* g = io.grad_out.ptr() + r * c;
            double dot = 0.0;
            for (int64_t i = 0; i < c; ++i) dot += static_cast<double>(g[i]) * static_cast<double>(y[i]);
            T* d = gins[0].ptr() + r * c;
            for (int64_t i = 0; i < c; ++i)
                d[i] = static_cast<T>((static_cast<double>(g[i]) - dot) * static_cast<double>(y[i]));
        }
        return gins;
    }
};

// ---------------------------------------------------------------------------
// weighted_sum of k scalar streams: y = sum_i w_i x_i + bias on [B,1] inputs.
// ---------------------------------------------------------------------------
template <typename T>
class WeightedSumLayer final : public Layer<T> {
public:
    explicit WeightedSumLayer(size_t arity) : arity_(arity) {
        if (arity < 1) throw DataError("weighted_sum: needs at least 1 input");
        weights_ = {"weights", Tensor<T>({static_cast<int64_t>(arity)}),
                    Tensor<T>({static_cast<int64_t>(arity)}), true};
        bias_ = {"bias", Tensor<T>({1}), Tensor<T>({1}), true};
        weights_.value.fill(static_cast<T>(1.0 / static_cast<double>(arity)));
    }

    const char* kind() const override { return "weighted_sum"; }
    size_t arity() const override { return arity_; }
    void init(Rng&) override {}  // 1/N and 0 regardless of seed

    std::vector<Param<T>*> params() override { return {&weights_, &bias_}; }

    Tensor<T> forward(const std::vector<const Tensor<T>*>& ins, const ForwardCtx& ctx) override {
        const int64_t b = ins[0]->dim(0);
        for (const Tensor<T>* t : ins)
            if (t->rank() != 2 || t->dim(1) != 1 || t->dim(0) != b)
                detail2::shape_fail(ctx, kind(), "[batch x 1]", t->shape);
        Tensor<T> y({b, 1});
        for (int64_t r = 0; r < b; ++r) {
            double acc = static_cast<double>(bias_.value[0]);
            for (size_t i = 0; i < arity_; ++i)
                acc += static_cast<double>(weights_.value[static_cast<int64_t>(i)]) *
                       static_cast<double>((*ins[i])[r]);
            y[r] = static_cast<T>(acc);
        }
        return y;
    }

    std::vector<Tensor<T>> backward(const BackwardIO<T>& io) override {
        const int64_t b = io.grad_out.dim(0);
        double gsum = 0.0;
        for (int64_t r = 0; r < b; ++r) gsum += static_cast<double>(io.grad_out[r]);
        bias_.grad[0] += static_cast<T>(gsum);
        std::vector<Tensor<T>> gins(io.inputs.size());
        for (size_t i = 0; i < io.inputs.size(); ++i) {
            double acc = 0.0;
            for (int64_t r = 0; r < b; ++r)
                acc += static_cast<double>(io.grad_out[r]) * static_cast<double>((*io.inputs[i])[r]);
            weights_.grad[static_cast<int64_t>(i)] += static_cast<T>(acc);
            if (io.need_input_grad[i]) {
                gins[i] = Tensor<T>({b, 1});
                const T w = weights_.value[static_cast<int64_t>(i)];
                for (int64_t r = 0; r < b; ++r) gins[i][r] = io.grad_out[r] * w;
            }
        }
        return gins;
    }

private:
    size_t arity_;
    Param<T> weights_, bias_;
};

// ---------------------------------------------------------------------------
// slice of the channel axis on [B,C]: columns [offset, offset+length).
// Lets heads consume per-block channel ranges of a concatenated feature.
// ---------------------------------------------------------------------------
template <typename T>
class SliceLayer final : public Layer<T> {
public:
    SliceLayer(int64_t offset, int64_t length) : off_(offset), len_(length) {
        if (offset < 0 || length < 1) throw DataError("slice: invalid range");
    }

    const char* kind() const override { return "slice"; }

    Tensor<T> forward(const std::vector<const Tensor<T>*>& ins, const ForwardCtx& ctx) override {
        const Tensor<T>& x = *ins[0];
        if (x.rank() != 2 || x.dim(1) < off_ + len_)
            detail2::shape_fail(ctx, kind(),
                                "[batch x >=" + std::to_string(off_ + len_) + "]", x.shape);
        const int64_t b = x.dim(0), c = x.dim(1);
        Tensor<T> y({b, len_});
        for (int64_t r = 0; r < b; ++r)
            std::copy(x.ptr() + r * c + off_, x.ptr() + r * c + off_ + len_, y.ptr() + r * len_);
        return y;
    }

    std::vector<Tensor<T>> backward(const BackwardIO<T>& io) override {
        std::vector<Tensor<T>> gins(1);
        if (!io.need_input_grad[0]) return gins;
        const Tensor<T>& x = *io.inputs[0];
        const int64_t b = x.dim(0), c = x.dim(1);
        gins[0] = Tensor<T>(x.shape);
        for (int64_t r = 0; r < b; ++r)
            std::copy(io.grad_out.ptr() + r * len_, io.grad_out.ptr() + (r + 1) * len_,
                      gins[0].ptr() + r * c + off_);
        return gins;
    }

private:
    int64_t off_, len_;
};

}  // namespace mlsp::nn
