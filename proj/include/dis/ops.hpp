#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <tuple>
#include <vector>

#include <Eigen/Core>

#include "dis/mac_counter.hpp"
#include "dis/tensor.hpp"

namespace dis {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

/// Trailing-axis (numpy) broadcasting of two shapes.
inline Shape broadcast_shapes(const Shape& a, const Shape& b)
{
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        const Index da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        const Index db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da == db || db == 1) {
            out[i] = da;
        } else if (da == 1) {
            out[i] = db;
        } else {
            throw ShapeError("cannot broadcast shapes " + to_string(a) + " and " + to_string(b));
        }
    }
    return out;
}

namespace detail {

/// Element strides of `in` aligned to the broadcast shape `out`; zero on broadcast axes.
inline std::vector<Index> broadcast_strides(const Shape& in, const Shape& out)
{
    const std::size_t offset = out.size() - in.size();
    std::vector<Index> strides(out.size(), 0);
    Index stride = 1;
    for (std::size_t i = in.size(); i-- > 0;) {
        strides[i + offset] = in[i] == 1 ? 0 : stride;
        stride *= in[i];
    }
    return strides;
}

/// Visits output elements in row-major order with the matching flat offsets
/// of both operands.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<Index>& sa, const std::vector<Index>& sb, F&& f)
{
    const Index total = numel(out);
    if (total == 0) {
        return;
    }
    if (out.empty()) {
        f(Index(0), Index(0), Index(0));
        return;
    }
    const std::size_t rank = out.size();
    const Index inner = out[rank - 1];
    const Index step_a = sa[rank - 1];
    const Index step_b = sb[rank - 1];
    std::vector<Index> counter(rank, 0);
    Index oa = 0;
    Index ob = 0;
    for (Index o = 0; o < total; o += inner) {
        for (Index k = 0; k < inner; ++k) {
            f(o + k, oa + k * step_a, ob + k * step_b);
        }
        for (std::size_t axis = rank - 1; axis-- > 0;) {
            oa += sa[axis];
            ob += sb[axis];
            if (++counter[axis] < out[axis]) {
                break;
            }
            oa -= sa[axis] * out[axis];
            ob -= sb[axis] * out[axis];
            counter[axis] = 0;
        }
    }
}

template <typename Scalar, typename F, typename DA, typename DB>
Tensor<Scalar> binary_elementwise(const Tensor<Scalar>& a, const Tensor<Scalar>& b, F f, DA da, DB db)
{
    Shape out = broadcast_shapes(a.shape(), b.shape());
    std::vector<Scalar> value(static_cast<std::size_t>(numel(out)));
    const Scalar* pa = a.data();
    const Scalar* pb = b.data();
    if (a.shape() == b.shape()) {
        for (std::size_t i = 0; i < value.size(); ++i) {
            value[i] = f(pa[i], pb[i]);
        }
        return make_result(std::move(out), std::move(value), {&a, &b}, [da, db](Node<Scalar>& self) {
            Scalar* ga = input_grad(self, 0);
            Scalar* gb = input_grad(self, 1);
            const Scalar* xa = self.inputs[0]->value.data();
            const Scalar* xb = self.inputs[1]->value.data();
            const Scalar* g = self.grad.data();
            const std::size_t n = self.grad.size();
            if (ga) {
                for (std::size_t i = 0; i < n; ++i) {
                    ga[i] += g[i] * da(xa[i], xb[i]);
                }
            }
            if (gb) {
                for (std::size_t i = 0; i < n; ++i) {
                    gb[i] += g[i] * db(xa[i], xb[i]);
                }
            }
        });
    }
    auto sa = broadcast_strides(a.shape(), out);
    auto sb = broadcast_strides(b.shape(), out);
    for_each_broadcast(out, sa, sb, [&](Index o, Index i, Index j) { value[o] = f(pa[i], pb[j]); });
    Shape out_copy = out;
    return make_result(std::move(out), std::move(value), {&a, &b},
                       [out = std::move(out_copy), sa = std::move(sa), sb = std::move(sb), da, db](Node<Scalar>& self) {
                           Scalar* ga = input_grad(self, 0);
                           Scalar* gb = input_grad(self, 1);
                           const Scalar* xa = self.inputs[0]->value.data();
                           const Scalar* xb = self.inputs[1]->value.data();
                           const Scalar* g = self.grad.data();
                           for_each_broadcast(out, sa, sb, [&](Index o, Index i, Index j) {
                               if (ga) {
                                   ga[i] += g[o] * da(xa[i], xb[j]);
                               }
                               if (gb) {
                                   gb[j] += g[o] * db(xa[i], xb[j]);
                               }
                           });
                       });
}

/// `derivative(x, y)` receives the input and the forward output.
template <typename Scalar, typename F, typename G>
Tensor<Scalar> unary_elementwise(const Tensor<Scalar>& x, F f, G derivative)
{
    std::vector<Scalar> value(static_cast<std::size_t>(x.numel()));
    const Scalar* px = x.data();
    for (std::size_t i = 0; i < value.size(); ++i) {
        value[i] = f(px[i]);
    }
    return make_result(x.shape(), std::move(value), {&x}, [derivative](Node<Scalar>& self) {
        Scalar* gx = input_grad(self, 0);
        const Scalar* xv = self.inputs[0]->value.data();
        const Scalar* y = self.value.data();
        const Scalar* g = self.grad.data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            gx[i] += g[i] * derivative(xv[i], y[i]);
        }
    });
}

/// Same contract as unary_elementwise, with both maps written as Eigen array
/// expressions so they vectorize. `derivative(x, y)` returns dy/dx. Inputs are
/// copied into aligned arrays first: Eigen evaluates unaligned leading elements
/// with scalar transcendentals, which would tie the result bits to addresses.
template <typename Scalar, typename F, typename G>
Tensor<Scalar> unary_array(const Tensor<Scalar>& x, F f, G derivative)
{
    using Flat = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
    const Eigen::Index n = x.numel();
    const Flat xs = Eigen::Map<const Flat>(x.data(), n);
    const Flat ys = f(xs);
    std::vector<Scalar> value(ys.data(), ys.data() + n);
    return make_result(x.shape(), std::move(value), {&x}, [derivative, n](Node<Scalar>& self) {
        const Flat xv = Eigen::Map<const Flat>(self.inputs[0]->value.data(), n);
        const Flat y = Eigen::Map<const Flat>(self.value.data(), n);
        const Flat dy = derivative(xv, y);
        Eigen::Map<Flat>(input_grad(self, 0), n) += Eigen::Map<const Flat>(self.grad.data(), n) * dy;
    });
}

template <typename Scalar>
Scalar stable_sigmoid(Scalar x)
{
    if (x >= 0) {
        return Scalar(1) / (Scalar(1) + std::exp(-x));
    }
    const Scalar e = std::exp(x);
    return e / (Scalar(1) + e);
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic with broadcasting

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b)
{
    return detail::binary_elementwise(
        a, b, [](Scalar x, Scalar y) { return x + y; }, [](Scalar, Scalar) { return Scalar(1); },
        [](Scalar, Scalar) { return Scalar(1); });
}

template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b)
{
    return detail::binary_elementwise(
        a, b, [](Scalar x, Scalar y) { return x - y; }, [](Scalar, Scalar) { return Scalar(1); },
        [](Scalar, Scalar) { return Scalar(-1); });
}

template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, const Tensor<Scalar>& b)
{
    return detail::binary_elementwise(
        a, b, [](Scalar x, Scalar y) { return x * y; }, [](Scalar, Scalar y) { return y; },
        [](Scalar x, Scalar) { return x; });
}

template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, Scalar s)
{
    return detail::unary_elementwise(
        a, [s](Scalar x) { return x * s; }, [s](Scalar, Scalar) { return s; });
}

template <typename Scalar>
Tensor<Scalar> operator*(Scalar s, const Tensor<Scalar>& a)
{
    return a * s;
}

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, Scalar s)
{
    return detail::unary_elementwise(
        a, [s](Scalar x) { return x + s; }, [](Scalar, Scalar) { return Scalar(1); });
}

template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a)
{
    return a * Scalar(-1);
}

// ---------------------------------------------------------------------------
// Nonlinearities

template <typename Scalar>
Tensor<Scalar> exp(const Tensor<Scalar>& x)
{
    Tensor<Scalar> y = detail::unary_array(
        x, [](const auto& v) { return v.exp(); }, [](const auto&, const auto& out) { return out; });
    const auto xv = x.values();
    const auto yv = y.values();
    for (std::size_t i = 0; i < yv.size(); ++i) {
        if (!std::isfinite(yv[i]) && std::isfinite(xv[i])) {
            throw NumericError("exp overflow at input " + std::to_string(xv[i]));
        }
    }
    return y;
}

template <typename Scalar>
Tensor<Scalar> log(const Tensor<Scalar>& x)
{
    for (Scalar v : x.values()) {
        if (!(v > Scalar(0))) {
            throw NumericError("log of non-positive value " + std::to_string(v));
        }
    }
    return detail::unary_elementwise(
        x, [](Scalar v) { return std::log(v); }, [](Scalar v, Scalar) { return Scalar(1) / v; });
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x)
{
    return detail::unary_elementwise(
        x, [](Scalar v) { return detail::stable_sigmoid(v); }, [](Scalar, Scalar y) { return y * (Scalar(1) - y); });
}

template <typename Scalar>
Tensor<Scalar> silu(const Tensor<Scalar>& x)
{
    return detail::unary_array(
        x, [](const auto& v) { return v / (Scalar(1) + (-v).exp()); },
        [](const auto& v, const auto&) {
            const auto s = (Scalar(1) + (-v).exp()).inverse();
            return s * (Scalar(1) + v * (Scalar(1) - s));
        });
}

template <typename Scalar>
Tensor<Scalar> softplus(const Tensor<Scalar>& x)
{
    return detail::unary_array(
        x, [](const auto& v) { return v.max(Scalar(0)) + (-v.abs()).exp().log1p(); },
        [](const auto& v, const auto&) { return (Scalar(1) + (-v).exp()).inverse(); });
}

template <typename Scalar>
Tensor<Scalar> square(const Tensor<Scalar>& x)
{
    return detail::unary_elementwise(
        x, [](Scalar v) { return v * v; }, [](Scalar v, Scalar) { return Scalar(2) * v; });
}

// ---------------------------------------------------------------------------
// Reductions (sequential over the flat buffer)

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x)
{
    Scalar total = 0;
    for (Scalar v : x.values()) {
        total += v;
    }
    return detail::make_result(Shape{}, std::vector<Scalar>{total}, {&x}, [](Node<Scalar>& self) {
        Scalar* gx = detail::input_grad(self, 0);
        const Scalar g = self.grad[0];
        const std::size_t n = self.inputs[0]->value.size();
        for (std::size_t i = 0; i < n; ++i) {
            gx[i] += g;
        }
    });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x)
{
    if (x.numel() == 0) {
        throw ShapeError("mean of empty tensor");
    }
    return sum(x) * (Scalar(1) / static_cast<Scalar>(x.numel()));
}

// ---------------------------------------------------------------------------
// Matrix product

/// Batched product of [..., m, k] and [..., k, n]; batch extents broadcast.
template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b)
{
    if (a.rank() < 2 || b.rank() < 2 || a.dim(-1) != b.dim(-2)) {
        throw ShapeError("matmul dimension mismatch: " + to_string(a.shape()) + " x " + to_string(b.shape()));
    }
    const Index m = a.dim(-2);
    const Index k = a.dim(-1);
    const Index n = b.dim(-1);
    const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
    const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
    Shape batch;
    try {
        batch = broadcast_shapes(batch_a, batch_b);
    } catch (const ShapeError&) {
        throw ShapeError("matmul batch mismatch: " + to_string(a.shape()) + " x " + to_string(b.shape()));
    }
    Shape out = batch;
    out.push_back(m);
    out.push_back(n);
    const Index batches = numel(batch);
    count_macs(batches * m * n * k);

    std::vector<Scalar> value(static_cast<std::size_t>(batches * m * n), Scalar(0));

    if (batch_b.empty()) {
        // [rows, k] x [k, n] with all batch axes folded into rows.
        const Index rows = batches * m;
        MatrixMap<Scalar>(value.data(), rows, n).noalias() =
            ConstMatrixMap<Scalar>(a.data(), rows, k) * ConstMatrixMap<Scalar>(b.data(), k, n);
        return detail::make_result(std::move(out), std::move(value), {&a, &b}, [rows, k, n](Node<Scalar>& self) {
            Scalar* ga = detail::input_grad(self, 0);
            Scalar* gb = detail::input_grad(self, 1);
            ConstMatrixMap<Scalar> g(self.grad.data(), rows, n);
            if (ga) {
                MatrixMap<Scalar>(ga, rows, k).noalias() +=
                    g * ConstMatrixMap<Scalar>(self.inputs[1]->value.data(), k, n).transpose();
            }
            if (gb) {
                MatrixMap<Scalar>(gb, k, n).noalias() +=
                    ConstMatrixMap<Scalar>(self.inputs[0]->value.data(), rows, k).transpose() * g;
            }
        });
    }

    auto sa = detail::broadcast_strides(batch_a, batch);
    auto sb = detail::broadcast_strides(batch_b, batch);
    const Scalar* pa = a.data();
    const Scalar* pb = b.data();
    detail::for_each_broadcast(batch, sa, sb, [&](Index o, Index i, Index j) {
        MatrixMap<Scalar>(value.data() + o * m * n, m, n).noalias() =
            ConstMatrixMap<Scalar>(pa + i * m * k, m, k) * ConstMatrixMap<Scalar>(pb + j * k * n, k, n);
    });
    return detail::make_result(
        std::move(out), std::move(value), {&a, &b},
        [batch = std::move(batch), sa = std::move(sa), sb = std::move(sb), m, k, n](Node<Scalar>& self) {
            Scalar* ga = detail::input_grad(self, 0);
            Scalar* gb = detail::input_grad(self, 1);
            const Scalar* xa = self.inputs[0]->value.data();
            const Scalar* xb = self.inputs[1]->value.data();
            const Scalar* g = self.grad.data();
            detail::for_each_broadcast(batch, sa, sb, [&](Index o, Index i, Index j) {
                ConstMatrixMap<Scalar> go(g + o * m * n, m, n);
                if (ga) {
                    MatrixMap<Scalar>(ga + i * m * k, m, k).noalias() +=
                        go * ConstMatrixMap<Scalar>(xb + j * k * n, k, n).transpose();
                }
                if (gb) {
                    MatrixMap<Scalar>(gb + j * k * n, k, n).noalias() +=
                        ConstMatrixMap<Scalar>(xa + i * m * k, m, k).transpose() * go;
                }
            });
        });
}

// ---------------------------------------------------------------------------
// Layout operations

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape)
{
    if (numel(shape) != x.numel()) {
        throw ShapeError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
    }
    std::vector<Scalar> value(x.values().begin(), x.values().end());
    return detail::make_result(std::move(shape), std::move(value), {&x}, [](Node<Scalar>& self) {
        Scalar* gx = detail::input_grad(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            gx[i] += self.grad[i];
        }
    });
}

/// out[i] = x[index[i]]; backward scatters additively.
template <typename Scalar>
Tensor<Scalar> gather(const Tensor<Scalar>& x, std::shared_ptr<const std::vector<Index>> index, Shape shape)
{
    if (numel(shape) != static_cast<Index>(index->size())) {
        throw ShapeError("gather index count does not match shape " + to_string(shape));
    }
    std::vector<Scalar> value(index->size());
    const Scalar* px = x.data();
    for (std::size_t i = 0; i < value.size(); ++i) {
        const Index src = (*index)[i];
        if (src < 0 || src >= x.numel()) {
            throw ShapeError("gather index out of range for shape " + to_string(x.shape()));
        }
        value[i] = px[src];
    }
    return detail::make_result(std::move(shape), std::move(value), {&x}, [index](Node<Scalar>& self) {
        Scalar* gx = detail::input_grad(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            gx[(*index)[i]] += self.grad[i];
        }
    });
}

namespace detail {
inline Index normalize_axis(Index axis, Index rank)
{
    const Index a = axis < 0 ? axis + rank : axis;
    if (a < 0 || a >= rank) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
    }
    return a;
}

/// (outer, extent, inner) split of a shape around one axis.
inline std::tuple<Index, Index, Index> split_axis(const Shape& shape, Index axis)
{
    Index outer = 1;
    Index inner = 1;
    for (Index i = 0; i < axis; ++i) {
        outer *= shape[static_cast<std::size_t>(i)];
    }
    for (Index i = axis + 1; i < static_cast<Index>(shape.size()); ++i) {
        inner *= shape[static_cast<std::size_t>(i)];
    }
    return {outer, shape[static_cast<std::size_t>(axis)], inner};
}
} // namespace detail

template <typename Scalar>
Tensor<Scalar> slice(const Tensor<Scalar>& x, Index axis, Index start, Index length)
{
    axis = detail::normalize_axis(axis, x.rank());
    const auto [outer, extent, inner] = detail::split_axis(x.shape(), axis);
    if (start < 0 || length < 0 || start + length > extent) {
        throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") out of range for shape " + to_string(x.shape()));
    }
    Shape shape = x.shape();
    shape[static_cast<std::size_t>(axis)] = length;
    std::vector<Scalar> value(static_cast<std::size_t>(outer * length * inner));
    const Scalar* px = x.data();
    for (Index o = 0; o < outer; ++o) {
        std::copy_n(px + (o * extent + start) * inner, length * inner, value.data() + o * length * inner);
    }
    return detail::make_result(std::move(shape), std::move(value), {&x},
                               [outer, extent, inner, start, length](Node<Scalar>& self) {
                                   Scalar* gx = detail::input_grad(self, 0);
                                   const Scalar* g = self.grad.data();
                                   for (Index o = 0; o < outer; ++o) {
                                       Scalar* dst = gx + (o * extent + start) * inner;
                                       const Scalar* src = g + o * length * inner;
                                       for (Index i = 0; i < length * inner; ++i) {
                                           dst[i] += src[i];
                                       }
                                   }
                               });
}

template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, Index axis)
{
    if (parts.empty()) {
        throw ShapeError("concat of zero tensors");
    }
    const Index rank = parts.front().rank();
    axis = detail::normalize_axis(axis, rank);
    Shape shape = parts.front().shape();
    Index total = 0;
    std::vector<Index> extents;
    for (const auto& part : parts) {
        Shape probe = part.shape();
        if (part.rank() != rank) {
            throw ShapeError("concat rank mismatch: " + to_string(shape) + " vs " + to_string(probe));
        }
        probe[static_cast<std::size_t>(axis)] = shape[static_cast<std::size_t>(axis)];
        if (probe != shape) {
            throw ShapeError("concat shape mismatch: " + to_string(shape) + " vs " + to_string(part.shape()));
        }
        extents.push_back(part.dim(axis));
        total += part.dim(axis);
    }
    shape[static_cast<std::size_t>(axis)] = total;
    const auto [outer, unused, inner] = detail::split_axis(shape, axis);
    (void)unused;
    std::vector<Scalar> value(static_cast<std::size_t>(numel(shape)));
    Index offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const Scalar* src = parts[p].data();
        const Index len = extents[p];
        for (Index o = 0; o < outer; ++o) {
            std::copy_n(src + o * len * inner, len * inner, value.data() + (o * total + offset) * inner);
        }
        offset += len;
    }
    return detail::make_result_n<Scalar>(
        std::move(shape), std::move(value), parts,
        [extents, outer = outer, inner = inner, total](Node<Scalar>& self) {
            Index offset = 0;
            for (std::size_t p = 0; p < extents.size(); ++p) {
                Scalar* gp = detail::input_grad(self, p);
                const Index len = extents[p];
                if (gp) {
                    for (Index o = 0; o < outer; ++o) {
                        const Scalar* src = self.grad.data() + (o * total + offset) * inner;
                        Scalar* dst = gp + o * len * inner;
                        for (Index i = 0; i < len * inner; ++i) {
                            dst[i] += src[i];
                        }
                    }
                }
                offset += len;
            }
        });
}

/// Reverses element order along one axis.
template <typename Scalar>
Tensor<Scalar> reverse(const Tensor<Scalar>& x, Index axis)
{
    axis = detail::normalize_axis(axis, x.rank());
    const auto [outer, extent, inner] = detail::split_axis(x.shape(), axis);
    auto index = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(x.numel()));
    std::size_t i = 0;
    for (Index o = 0; o < outer; ++o) {
        for (Index e = 0; e < extent; ++e) {
            for (Index k = 0; k < inner; ++k) {
                (*index)[i++] = (o * extent + (extent - 1 - e)) * inner + k;
            }
        }
    }
    return gather(x, std::move(index), x.shape());
}

template <typename Scalar>
Tensor<Scalar> transpose_last2(const Tensor<Scalar>& x)
{
    if (x.rank() < 2) {
        throw ShapeError("transpose needs rank >= 2, got " + to_string(x.shape()));
    }
    const Index rows = x.dim(-2);
    const Index cols = x.dim(-1);
    const Index batches = x.numel() / std::max<Index>(rows * cols, 1);
    auto index = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(x.numel()));
    std::size_t i = 0;
    for (Index b = 0; b < batches; ++b) {
        for (Index c = 0; c < cols; ++c) {
            for (Index r = 0; r < rows; ++r) {
                (*index)[i++] = b * rows * cols + r * cols + c;
            }
        }
    }
    Shape shape = x.shape();
    std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
    return gather(x, std::move(index), std::move(shape));
}

/// Rows of a [R, D] table selected by id; result [ids.size(), D].
template <typename Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& table, std::span<const int> ids)
{
    if (table.rank() != 2) {
        throw ShapeError("gather_rows needs a [R, D] table, got " + to_string(table.shape()));
    }
    const Index rows = table.dim(0);
    const Index width = table.dim(1);
    auto index = std::make_shared<std::vector<Index>>();
    index->reserve(ids.size() * static_cast<std::size_t>(width));
    for (int id : ids) {
        if (id < 0 || id >= rows) {
            throw ContractError("row id " + std::to_string(id) + " out of range for table with " +
                                std::to_string(rows) + " rows");
        }
        for (Index k = 0; k < width; ++k) {
            index->push_back(id * width + k);
        }
    }
    return gather(table, std::move(index), Shape{static_cast<Index>(ids.size()), width});
}

// ---------------------------------------------------------------------------
// Normalization

/// Zero-mean, unit-variance over the last axis (biased variance plus eps).
template <typename Scalar>
Tensor<Scalar> normalize_last(const Tensor<Scalar>& x, Scalar eps)
{
    const Index width = x.dim(-1);
    const Index rows = x.numel() / std::max<Index>(width, 1);
    std::vector<Scalar> value(static_cast<std::size_t>(x.numel()));
    std::vector<Scalar> inv_std(static_cast<std::size_t>(rows));
    const Scalar* px = x.data();
    for (Index r = 0; r < rows; ++r) {
        const Scalar* row = px + r * width;
        Scalar mu = 0;
        for (Index k = 0; k < width; ++k) {
            mu += row[k];
        }
        mu /= static_cast<Scalar>(width);
        Scalar var = 0;
        for (Index k = 0; k < width; ++k) {
            var += (row[k] - mu) * (row[k] - mu);
        }
        var /= static_cast<Scalar>(width);
        const Scalar inv = Scalar(1) / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(r)] = inv;
        for (Index k = 0; k < width; ++k) {
            value[static_cast<std::size_t>(r * width + k)] = (row[k] - mu) * inv;
        }
    }
    return detail::make_result(x.shape(), std::move(value), {&x},
                               [rows, width, inv_std = std::move(inv_std)](Node<Scalar>& self) {
                                   Scalar* gx = detail::input_grad(self, 0);
                                   const Scalar* y = self.value.data();
                                   const Scalar* g = self.grad.data();
                                   for (Index r = 0; r < rows; ++r) {
                                       const Scalar* yr = y + r * width;
                                       const Scalar* gr = g + r * width;
                                       Scalar mean_g = 0;
                                       Scalar mean_gy = 0;
                                       for (Index k = 0; k < width; ++k) {
                                           mean_g += gr[k];
                                           mean_gy += gr[k] * yr[k];
                                       }
                                       mean_g /= static_cast<Scalar>(width);
                                       mean_gy /= static_cast<Scalar>(width);
                                       const Scalar inv = inv_std[static_cast<std::size_t>(r)];
                                       for (Index k = 0; k < width; ++k) {
                                           gx[r * width + k] += inv * (gr[k] - mean_g - yr[k] * mean_gy);
                                       }
                                   }
                               });
}

template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                          Scalar eps = Scalar(1e-6))
{
    if (gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != x.dim(-1) || beta.dim(0) != x.dim(-1)) {
        throw ShapeError("layer_norm parameters " + to_string(gamma.shape()) + "/" + to_string(beta.shape()) +
                         " do not match input " + to_string(x.shape()));
    }
    return normalize_last(x, eps) * gamma + beta;
}

/// Softmax over the last axis, stabilized by subtracting the row maximum.
template <typename Scalar>
Tensor<Scalar> softmax_last(const Tensor<Scalar>& x)
{
    const Index width = x.dim(-1);
    const Index rows = x.numel() / std::max<Index>(width, 1);
    std::vector<Scalar> value(static_cast<std::size_t>(x.numel()));
    const Scalar* px = x.data();
    for (Index r = 0; r < rows; ++r) {
        const Scalar* row = px + r * width;
        Scalar* out = value.data() + r * width;
        const Scalar hi = *std::max_element(row, row + width);
        Scalar total = 0;
        for (Index k = 0; k < width; ++k) {
            out[k] = std::exp(row[k] - hi);
            total += out[k];
        }
        for (Index k = 0; k < width; ++k) {
            out[k] /= total;
        }
    }
    return detail::make_result(x.shape(), std::move(value), {&x}, [rows, width](Node<Scalar>& self) {
        Scalar* gx = detail::input_grad(self, 0);
        for (Index r = 0; r < rows; ++r) {
            const Scalar* y = self.value.data() + r * width;
            const Scalar* g = self.grad.data() + r * width;
            Scalar dot = 0;
            for (Index k = 0; k < width; ++k) {
                dot += g[k] * y[k];
            }
            for (Index k = 0; k < width; ++k) {
                gx[r * width + k] += y[k] * (g[k] - dot);
            }
        }
    });
}

} // namespace dis
