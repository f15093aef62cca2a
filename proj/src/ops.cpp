// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#include "voxfuse/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace voxfuse::ops {

namespace detail {

void gemm(const Tensor &a, bool trans_a, const Tensor &b, bool trans_b, Tensor &c, bool accumulate, Precision p) {
    const int m = trans_a ? a.cols : a.rows;
    const int k = trans_a ? a.rows : a.cols;
    const int kb = trans_b ? b.cols : b.rows;
    const int n = trans_b ? b.rows : b.cols;
    if (k != kb || c.rows != m || c.cols != n) {
        throw std::invalid_argument("gemm: shape mismatch " + a.shape_string() + " * " + b.shape_string() + " -> " +
                                    c.shape_string());
    }
    if (m == 0 || n == 0) {
        return;
    }
    auto am = as_matrix(a);
    auto bm = as_matrix(b);
    auto cm = as_matrix(c);
    if (!accumulate) {
        cm.setZero();
    }
    if (k == 0) {
        return;
    }
    if (p == Precision::f64) {
        if (trans_a && trans_b) {
            cm.noalias() += am.transpose() * bm.transpose();
        } else if (trans_a) {
            cm.noalias() += am.transpose() * bm;
        } else if (trans_b) {
            cm.noalias() += am * bm.transpose();
        } else {
            cm.noalias() += am * bm;
        }
        return;
    }
    using FloatMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    FloatMatrix af = am.cast<float>();
    FloatMatrix bf = bm.cast<float>();
    FloatMatrix prod;
    if (trans_a && trans_b) {
        prod.noalias() = af.transpose() * bf.transpose();
    } else if (trans_a) {
        prod.noalias() = af.transpose() * bf;
    } else if (trans_b) {
        prod.noalias() = af * bf.transpose();
    } else {
        prod.noalias() = af * bf;
    }
    cm += prod.cast<double>();
}

} // namespace detail

namespace {

void require_same_shape(const char *op, Var a, Var b) {
    if (!a.value().same_shape(b.value())) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.value().shape_string() + " vs " +
                                    b.value().shape_string());
    }
}

template <typename Fwd, typename Deriv>
Var unary(Var a, Fwd fwd, Deriv deriv) {
    const Tensor &x = a.value();
    Tensor out(x.rows, x.cols);
    for (std::size_t i = 0; i < x.size(); ++i) {
        out.data[i] = fwd(x.data[i]);
    }
    return a.tape->record(std::move(out), {a}, [a, deriv](Tape &tape, const Tensor &g) {
        const Tensor &x = tape.value(a);
        Tensor &ga = tape.grad_buffer(a);
        for (std::size_t i = 0; i < x.size(); ++i) {
            ga.data[i] += g.data[i] * deriv(x.data[i]);
        }
    });
}

double stable_sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

} // namespace

Var add(Var a, Var b) {
    require_same_shape("add", a, b);
    Tensor out = a.value();
    const Tensor &bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data[i] += bv.data[i];
    }
    return a.tape->record(std::move(out), {a, b}, [a, b](Tape &tape, const Tensor &g) {
        for (Var v : {a, b}) {
            if (tape.requires_grad(v)) {
                Tensor &gv = tape.grad_buffer(v);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    gv.data[i] += g.data[i];
                }
            }
        }
    });
}

Var sub(Var a, Var b) {
    require_same_shape("sub", a, b);
    Tensor out = a.value();
    const Tensor &bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data[i] -= bv.data[i];
    }
    return a.tape->record(std::move(out), {a, b}, [a, b](Tape &tape, const Tensor &g) {
        if (tape.requires_grad(a)) {
            Tensor &ga = tape.grad_buffer(a);
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga.data[i] += g.data[i];
            }
        }
        if (tape.requires_grad(b)) {
            Tensor &gb = tape.grad_buffer(b);
            for (std::size_t i = 0; i < g.size(); ++i) {
                gb.data[i] -= g.data[i];
            }
        }
    });
}

Var mul(Var a, Var b) {
    require_same_shape("mul", a, b);
    Tensor out = a.value();
    const Tensor &bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data[i] *= bv.data[i];
    }
    return a.tape->record(std::move(out), {a, b}, [a, b](Tape &tape, const Tensor &g) {
        const Tensor &av = tape.value(a);
        const Tensor &bv = tape.value(b);
        if (tape.requires_grad(a)) {
            Tensor &ga = tape.grad_buffer(a);
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga.data[i] += g.data[i] * bv.data[i];
            }
        }
        if (tape.requires_grad(b)) {
            Tensor &gb = tape.grad_buffer(b);
            for (std::size_t i = 0; i < g.size(); ++i) {
                gb.data[i] += g.data[i] * av.data[i];
            }
        }
    });
}

Var affine(Var a, double scale, double shift) {
    return unary(a, [scale, shift](double x) { return scale * x + shift; }, [scale](double) { return scale; });
}

Var relu(Var a) {
    return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(Var a) {
    return unary(a, stable_sigmoid, [](double x) {
        const double s = stable_sigmoid(x);
        return s * (1.0 - s);
    });
}

Var tanh(Var a) {
    return unary(a, [](double x) { return std::tanh(x); }, [](double x) {
        const double t = std::tanh(x);
        return 1.0 - t * t;
    });
}

Var softplus(Var a) {
    return unary(a, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }, stable_sigmoid);
}

Var matmul(Var a, Var b) {
    const Tensor &av = a.value();
    const Tensor &bv = b.value();
    if (av.cols != bv.rows) {
        throw std::invalid_argument("matmul: shape mismatch " + av.shape_string() + " * " + bv.shape_string());
    }
    Tensor out(av.rows, bv.cols);
    const Precision p = a.tape->precision();
    detail::gemm(av, false, bv, false, out, false, p);
    return a.tape->record(std::move(out), {a, b}, [a, b, p](Tape &tape, const Tensor &g) {
        if (tape.requires_grad(a)) {
            detail::gemm(g, false, tape.value(b), true, tape.grad_buffer(a), true, p);
        }
        if (tape.requires_grad(b)) {
            detail::gemm(tape.value(a), true, g, false, tape.grad_buffer(b), true, p);
        }
    });
}

Var linear(Var x, Var w, Var b) {
    const Tensor &xv = x.value();
    const Tensor &wv = w.value();
    const Tensor &bv = b.value();
    if (xv.cols != wv.rows || bv.rows != 1 || bv.cols != wv.cols) {
        throw std::invalid_argument("linear: shape mismatch x" + xv.shape_string() + " w" + wv.shape_string() + " b" +
                                    bv.shape_string());
    }
    Tensor out(xv.rows, wv.cols);
    for (int r = 0; r < out.rows; ++r) {
        std::copy(bv.data.begin(), bv.data.end(), out.row(r).begin());
    }
    const Precision p = x.tape->precision();
    detail::gemm(xv, false, wv, false, out, true, p);
    return x.tape->record(std::move(out), {x, w, b}, [x, w, b, p](Tape &tape, const Tensor &g) {
        if (tape.requires_grad(x)) {
            detail::gemm(g, false, tape.value(w), true, tape.grad_buffer(x), true, p);
        }
        if (tape.requires_grad(w)) {
            detail::gemm(tape.value(x), true, g, false, tape.grad_buffer(w), true, p);
        }
        if (tape.requires_grad(b)) {
            Tensor &gb = tape.grad_buffer(b);
            for (int r = 0; r < g.rows; ++r) {
                for (int c = 0; c < g.cols; ++c) {
                    gb.data[static_cast<std::size_t>(c)] += g(r, c);
                }
            }
        }
    });
}

Var concat_cols(const std::vector<Var> &parts) {
    if (parts.empty()) {
        throw std::invalid_argument("concat_cols: no inputs");
    }
    const int rows = parts.front().rows();
    int cols = 0;
    for (const Var &p : parts) {
        if (p.rows() != rows) {
            throw std::invalid_argument("concat_cols: row count mismatch");
        }
        cols += p.cols();
    }
    Tensor out(rows, cols);
    int offset = 0;
    for (const Var &p : parts) {
        const Tensor &v = p.value();
        for (int r = 0; r < rows; ++r) {
            std::copy(v.row(r).begin(), v.row(r).end(), out.row(r).begin() + offset);
        }
        offset += v.cols;
    }
    return parts.front().tape->record(std::move(out), std::span<const Var>(parts), [parts](Tape &tape, const Tensor &g) {
        int offset = 0;
        for (const Var &p : parts) {
            const int pc = tape.value(p).cols;
            if (tape.requires_grad(p)) {
                Tensor &gp = tape.grad_buffer(p);
                for (int r = 0; r < g.rows; ++r) {
                    for (int c = 0; c < pc; ++c) {
                        gp(r, c) += g(r, offset + c);
                    }
                }
            }
            offset += pc;
        }
    });
}

Var slice_cols(Var a, int begin, int count) {
    const Tensor &v = a.value();
    if (begin < 0 || count < 0 || begin + count > v.cols) {
        throw std::invalid_argument("slice_cols: range out of bounds");
    }
    Tensor out(v.rows, count);
    for (int r = 0; r < v.rows; ++r) {
        for (int c = 0; c < count; ++c) {
            out(r, c) = v(r, begin + c);
        }
    }
    return a.tape->record(std::move(out), {a}, [a, begin, count](Tape &tape, const Tensor &g) {
        Tensor &ga = tape.grad_buffer(a);
        for (int r = 0; r < g.rows; ++r) {
            for (int c = 0; c < count; ++c) {
                ga(r, begin + c) += g(r, c);
            }
        }
    });
}

Var gather_rows(Var a, std::vector<int> rows) {
    const Tensor &v = a.value();
    Tensor out(static_cast<int>(rows.size()), v.cols);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= v.rows) {
            throw std::out_of_range("gather_rows: row index out of range");
        }
        if (rows[i] >= 0) {
            std::copy(v.row(rows[i]).begin(), v.row(rows[i]).end(), out.row(static_cast<int>(i)).begin());
        }
    }
    return a.tape->record(std::move(out), {a}, [a, rows = std::move(rows)](Tape &tape, const Tensor &g) {
        Tensor &ga = tape.grad_buffer(a);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i] < 0) {
                continue;
            }
            auto src = g.row(static_cast<int>(i));
            auto dst = ga.row(rows[i]);
            for (int c = 0; c < g.cols; ++c) {
                dst[c] += src[c];
            }
        }
    });
}

Var assemble_rows(int n_rows, int cols, std::vector<RowSource> sources) {
    if (sources.empty()) {
        throw std::invalid_argument("assemble_rows: no sources");
    }
    Tensor out(n_rows, cols);
    std::vector<char> written(static_cast<std::size_t>(n_rows), 0);
    std::vector<Var> inputs;
    for (const RowSource &s : sources) {
        const Tensor &v = s.src.value();
        if (v.cols != cols || s.src_rows.size() != s.dst_rows.size()) {
            throw std::invalid_argument("assemble_rows: source shape mismatch");
        }
        for (std::size_t i = 0; i < s.src_rows.size(); ++i) {
            const int d = s.dst_rows[i];
            const int r = s.src_rows[i];
            if (d < 0 || d >= n_rows || r < 0 || r >= v.rows) {
                throw std::out_of_range("assemble_rows: row index out of range");
            }
            if (written[static_cast<std::size_t>(d)]) {
                throw std::invalid_argument("assemble_rows: destination row written twice");
            }
            written[static_cast<std::size_t>(d)] = 1;
            std::copy(v.row(r).begin(), v.row(r).end(), out.row(d).begin());
        }
        inputs.push_back(s.src);
    }
    Tape *tape = sources.front().src.tape;
    return tape->record(std::move(out), std::span<const Var>(inputs), [sources = std::move(sources)](Tape &tape, const Tensor &g) {
        for (const RowSource &s : sources) {
            if (!tape.requires_grad(s.src)) {
                continue;
            }
            Tensor &gs = tape.grad_buffer(s.src);
            for (std::size_t i = 0; i < s.src_rows.size(); ++i) {
                auto src = g.row(s.dst_rows[i]);
                auto dst = gs.row(s.src_rows[i]);
                for (int c = 0; c < g.cols; ++c) {
                    dst[c] += src[c];
                }
            }
        }
    });
}

Var sum(Var a) {
    double total = 0.0;
    for (double v : a.value().data) {
        total += v;
    }
    return a.tape->record(Tensor::from(1, 1, {total}), {a}, [a](Tape &tape, const Tensor &g) {
        Tensor &ga = tape.grad_buffer(a);
        for (double &v : ga.data) {
            v += g.data[0];
        }
    });
}

Var mse(Var pred, const Tensor &target) {
    const Tensor &p = pred.value();
    if (!p.same_shape(target)) {
        throw std::invalid_argument("mse: shape mismatch " + p.shape_string() + " vs " + target.shape_string());
    }
    if (p.size() == 0) {
        throw std::invalid_argument("mse: empty input");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double d = p.data[i] - target.data[i];
        total += d * d;
    }
    const double n = static_cast<double>(p.size());
    return pred.tape->record(Tensor::from(1, 1, {total / n}), {pred}, [pred, target, n](Tape &tape, const Tensor &g) {
        const Tensor &p = tape.value(pred);
        Tensor &gp = tape.grad_buffer(pred);
        const double scale = 2.0 * g.data[0] / n;
        for (std::size_t i = 0; i < p.size(); ++i) {
            gp.data[i] += scale * (p.data[i] - target.data[i]);
        }
    });
}

Var positional_encoding(Var features, int frequencies) {
    if (frequencies < 1) {
        throw std::invalid_argument("positional_encoding: need at least one frequency");
    }
    const Tensor &f = features.value();
    const int c = f.cols;
    const int width = c * (2 * frequencies + 1);
    Tensor out(f.rows, width);
    for (int r = 0; r < f.rows; ++r) {
        auto in = f.row(r);
        auto o = out.row(r);
        for (int j = 0; j < c; ++j) {
            o[j] = in[j];
            // Octaves by the double-angle recurrence from one sin/cos pair.
            double s = std::sin(std::numbers::pi * in[j]);
            double co = std::cos(std::numbers::pi * in[j]);
            for (int k = 0; k < frequencies; ++k) {
                o[c * (1 + 2 * k) + j] = s;
                o[c * (2 + 2 * k) + j] = co;
                const double s2 = 2.0 * s * co;
                co = 1.0 - 2.0 * s * s;
                s = s2;
            }
        }
    }
    return features.tape->record(std::move(out), {features}, [features, frequencies, c](Tape &tape, const Tensor &g) {
        Tensor &gf = tape.grad_buffer(features);
        const Tensor &f = tape.value(features);
        for (int r = 0; r < f.rows; ++r) {
            auto gr = g.row(r);
            auto gfr = gf.row(r);
            for (int j = 0; j < c; ++j) {
                double acc = gr[j];
                double s = std::sin(std::numbers::pi * f(r, j));
                double co = std::cos(std::numbers::pi * f(r, j));
                double scale = std::numbers::pi;
                for (int k = 0; k < frequencies; ++k) {
                    acc += scale * (co * gr[c * (1 + 2 * k) + j] - s * gr[c * (2 + 2 * k) + j]);
                    const double s2 = 2.0 * s * co;
                    co = 1.0 - 2.0 * s * s;
                    s = s2;
                    scale *= 2.0;
                }
                gfr[j] += acc;
            }
        }
    });
}

} // namespace voxfuse::ops
