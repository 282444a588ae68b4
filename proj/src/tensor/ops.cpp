#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

#include "mrt/autodiff.hpp"
#include "mrt/error.hpp"
#include "mrt/kernels.hpp"

namespace mrt {
namespace {

[[noreturn]] void shape_fail(std::string_view op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

std::string pair_str(const Shape& a, const Shape& b) { return shape_str(a) + " vs " + shape_str(b); }

Tape& tape_of(std::string_view op, Var a) {
  if (!a.valid()) shape_fail(op, "input is not attached to a tape");
  return *a.tape();
}

std::size_t norm_axis(std::string_view op, int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) shape_fail(op, "axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(a);
}

// Leading-dimension broadcast: the smaller shape must be a suffix of the larger.
struct Broadcast {
  Shape shape;
  bool a_small = false;
  bool b_small = false;
  std::size_t block = 0;    // elements in the smaller operand
  std::size_t repeats = 1;  // copies of the smaller operand in the result
};

Broadcast broadcast(std::string_view op, const Shape& a, const Shape& b) {
  Broadcast bc;
  const bool a_longer = a.size() >= b.size();
  const Shape& big = a_longer ? a : b;
  const Shape& small = a_longer ? b : a;
  if (!std::equal(small.rbegin(), small.rend(), big.rbegin())) {
    shape_fail(op, "cannot broadcast " + pair_str(a, b));
  }
  bc.shape = big;
  bc.block = shape_numel(small);
  bc.repeats = shape_numel(big) / bc.block;
  if (a.size() != b.size()) {
    bc.a_small = !a_longer;
    bc.b_small = a_longer;
  }
  return bc;
}

// dst (shape of one operand) += sign * g (result shape), reducing over repeats.
void accumulate_reduced(const Tensor& g, Tensor& dst, double sign) {
  const auto& kt = kernels::active();
  const std::size_t block = dst.size();
  for (std::size_t r = 0; r < g.size() / block; ++r) kt.axpy(sign, g.ptr() + r * block, dst.ptr(), block);
}

void transpose_copy(const double* src, std::size_t rows, std::size_t cols, double* dst) {
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
  }
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <class Kernel>
Var elementwise(std::string_view op, Var a, Var b, Kernel kernel, Tape::BackwardFn backward) {
  Tape& tape = tape_of(op, a);
  const Broadcast bc = broadcast(op, a.shape(), b.shape());
  Tensor out(bc.shape);
  const double* pa = a.value().ptr();
  const double* pb = b.value().ptr();
  for (std::size_t r = 0; r < bc.repeats; ++r) {
    kernel(bc.a_small ? pa : pa + r * bc.block, bc.b_small ? pb : pb + r * bc.block,
           out.ptr() + r * bc.block, bc.block);
  }
  const Var inputs[] = {a, b};
  return tape.record(op, std::move(out), inputs, std::move(backward));
}

}  // namespace

Var add(Var a, Var b) {
  return elementwise("add", a, b, kernels::active().add,
                     [](const Tensor& g, std::span<Tensor* const> gin) {
                       if (gin[0]) accumulate_reduced(g, *gin[0], 1.0);
                       if (gin[1]) accumulate_reduced(g, *gin[1], 1.0);
                     });
}

Var sub(Var a, Var b) {
  return elementwise("sub", a, b, kernels::active().sub,
                     [](const Tensor& g, std::span<Tensor* const> gin) {
                       if (gin[0]) accumulate_reduced(g, *gin[0], 1.0);
                       if (gin[1]) accumulate_reduced(g, *gin[1], -1.0);
                     });
}

namespace {

// d/da = g * b and d/db = g * a, each reduced to its operand's shape.
void mul_grad(const Tensor& g, const Tensor& other, Tensor& dst) {
  const auto& kt = kernels::active();
  const std::size_t n = g.size();
  if (dst.size() == n) {
    const std::size_t block = other.size();
    for (std::size_t r = 0; r < n / block; ++r) {
      kt.mul_acc(g.ptr() + r * block, other.ptr(), dst.ptr() + r * block, block);
    }
  } else {
    const std::size_t block = dst.size();
    for (std::size_t r = 0; r < n / block; ++r) {
      kt.mul_acc(g.ptr() + r * block, other.ptr() + r * block, dst.ptr(), block);
    }
  }
}

}  // namespace

Var mul(Var a, Var b) {
  return elementwise("mul", a, b, kernels::active().mul,
                     [a, b](const Tensor& g, std::span<Tensor* const> gin) {
                       if (gin[0]) mul_grad(g, b.value(), *gin[0]);
                       if (gin[1]) mul_grad(g, a.value(), *gin[1]);
                     });
}

Var scale(Var a, double factor) {
  Tape& tape = tape_of("scale", a);
  Tensor out(a.shape());
  kernels::active().scale(factor, a.value().ptr(), out.ptr(), out.size());
  const Var inputs[] = {a};
  return tape.record("scale", std::move(out), inputs,
                     [factor](const Tensor& g, std::span<Tensor* const> gin) {
                       if (gin[0]) kernels::active().axpy(factor, g.ptr(), gin[0]->ptr(), g.size());
                     });
}

Var matmul(Var a, Var b) {
  constexpr std::string_view op = "matmul";
  Tape& tape = tape_of(op, a);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) shape_fail(op, "operands need rank >= 2, got " + pair_str(sa, sb));
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa.back();
  const std::size_t kb = sb[sb.size() - 2];
  const std::size_t n = sb.back();
  const bool shared = sb.size() == 2;
  if (kb != k) shape_fail(op, "inner dimensions differ, " + pair_str(sa, sb));
  if (!shared && (sb.size() != sa.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin()))) {
    shape_fail(op, "batch dimensions differ, " + pair_str(sa, sb));
  }
  const std::size_t batch = shape_numel(sa) / (m * k);
  Shape out_shape(sa.begin(), sa.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor out(out_shape, 0.0);
  if (shared) {
    kernels::gemm_acc(batch * m, n, k, a.value().ptr(), b.value().ptr(), out.ptr());
  } else {
    for (std::size_t i = 0; i < batch; ++i) {
      kernels::gemm_acc(m, n, k, a.value().ptr() + i * m * k, b.value().ptr() + i * k * n,
                        out.ptr() + i * m * n);
    }
  }
  const Var inputs[] = {a, b};
  return tape.record(op, std::move(out), inputs,
                     [a, b, m, n, k, batch, shared](const Tensor& g, std::span<Tensor* const> gin) {
                       const Tensor& av = a.value();
                       const Tensor& bv = b.value();
                       const std::size_t rows = shared ? batch * m : m;
                       const std::size_t groups = shared ? 1 : batch;
                       std::vector<double> bt(n * k);
                       std::vector<double> at(rows * k);
                       for (std::size_t i = 0; i < groups; ++i) {
                         const double* gp = g.ptr() + i * rows * n;
                         const double* bp = bv.ptr() + (shared ? 0 : i * k * n);
                         if (gin[0]) {
                           // dA = dC * B^T
                           transpose_copy(bp, k, n, bt.data());
                           kernels::gemm_acc(rows, k, n, gp, bt.data(), gin[0]->ptr() + i * rows * k);
                         }
                         if (gin[1]) {
                           // dB = A^T * dC
                           transpose_copy(av.ptr() + i * rows * k, rows, k, at.data());
                           kernels::gemm_acc(k, n, rows, at.data(), gp,
                                             gin[1]->ptr() + (shared ? 0 : i * k * n));
                         }
                       }
                     });
}

Var sigmoid(Var a) {
  Tape& tape = tape_of("sigmoid", a);
  Tensor out(a.shape());
  const double* x = a.value().ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(x[i]);
  const Var inputs[] = {a};
  return tape.record("sigmoid", std::move(out), inputs,
                     [a](const Tensor& g, std::span<Tensor* const> gin) {
                       if (!gin[0]) return;
                       const double* xv = a.value().ptr();
                       double* d = gin[0]->ptr();
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         const double s = stable_sigmoid(xv[i]);
                         d[i] += g[i] * s * (1.0 - s);
                       }
                     });
}

Var square(Var a) {
  Tape& tape = tape_of("square", a);
  Tensor out(a.shape());
  kernels::active().mul(a.value().ptr(), a.value().ptr(), out.ptr(), out.size());
  const Var inputs[] = {a};
  return tape.record("square", std::move(out), inputs,
                     [a](const Tensor& g, std::span<Tensor* const> gin) {
                       if (!gin[0]) return;
                       const double* xv = a.value().ptr();
                       double* d = gin[0]->ptr();
                       for (std::size_t i = 0; i < g.size(); ++i) d[i] += 2.0 * xv[i] * g[i];
                     });
}

namespace {

// Neumaier summation: terms that are identical between two evaluations cancel
// exactly, which keeps finite-difference probes of large reductions clean.
double compensated_sum(std::span<const double> v) {
  double s = 0.0;
  double c = 0.0;
  for (double x : v) {
    const double t = s + x;
    c += std::abs(s) >= std::abs(x) ? (s - t) + x : (x - t) + s;
    s = t;
  }
  return s + c;
}

}  // namespace

Var sum(Var a) {
  Tape& tape = tape_of("sum", a);
  const Tensor& v = a.value();
  Tensor out = Tensor::scalar(compensated_sum(v.data()));
  const Var inputs[] = {a};
  return tape.record("sum", std::move(out), inputs, [](const Tensor& g, std::span<Tensor* const> gin) {
    if (!gin[0]) return;
    const double gv = g.item();
    for (double& d : gin[0]->data()) d += gv;
  });
}

Var mean(Var a) {
  Tape& tape = tape_of("mean", a);
  const Tensor& v = a.value();
  const double n = static_cast<double>(v.size());
  Tensor out = Tensor::scalar(compensated_sum(v.data()) / n);
  const Var inputs[] = {a};
  return tape.record("mean", std::move(out), inputs, [n](const Tensor& g, std::span<Tensor* const> gin) {
    if (!gin[0]) return;
    const double gv = g.item() / n;
    for (double& d : gin[0]->data()) d += gv;
  });
}

Var concat(std::span<const Var> parts, int axis) {
  constexpr std::string_view op = "concat";
  if (parts.empty()) shape_fail(op, "no inputs");
  Tape& tape = tape_of(op, parts[0]);
  const Shape& first = parts[0].shape();
  const std::size_t ax = norm_axis(op, axis, first.size());
  std::size_t outer = 1;
  for (std::size_t d = 0; d < ax; ++d) outer *= first[d];
  std::size_t inner = 1;
  for (std::size_t d = ax + 1; d < first.size(); ++d) inner *= first[d];
  std::vector<std::size_t> widths;  // per part, elements per outer slice
  std::size_t total_axis = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == ax || s[d] == first[d];
    if (!ok) shape_fail(op, "incompatible parts " + pair_str(first, s));
    total_axis += s[ax];
    widths.push_back(s[ax] * inner);
  }
  Shape out_shape = first;
  out_shape[ax] = total_axis;
  Tensor out(out_shape);
  const std::size_t row = total_axis * inner;
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const double* src = parts[p].value().ptr();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src + o * widths[p], widths[p], out.ptr() + o * row + offset);
    }
    offset += widths[p];
  }
  return tape.record(op, std::move(out), parts,
                     [widths, outer, row](const Tensor& g, std::span<Tensor* const> gin) {
                       const auto& kt = kernels::active();
                       std::size_t off = 0;
                       for (std::size_t p = 0; p < gin.size(); ++p) {
                         if (gin[p]) {
                           for (std::size_t o = 0; o < outer; ++o) {
                             kt.axpy(1.0, g.ptr() + o * row + off, gin[p]->ptr() + o * widths[p], widths[p]);
                           }
                         }
                         off += widths[p];
                       }
                     });
}

Var slice(Var a, int axis, std::size_t begin, std::size_t end) {
  constexpr std::string_view op = "slice";
  Tape& tape = tape_of(op, a);
  const Shape& s = a.shape();
  const std::size_t ax = norm_axis(op, axis, s.size());
  if (begin >= end || end > s[ax]) {
    shape_fail(op, "range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " + shape_str(s));
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < ax; ++d) outer *= s[d];
  std::size_t inner = 1;
  for (std::size_t d = ax + 1; d < s.size(); ++d) inner *= s[d];
  Shape out_shape = s;
  out_shape[ax] = end - begin;
  Tensor out(out_shape);
  const std::size_t src_row = s[ax] * inner;
  const std::size_t dst_row = (end - begin) * inner;
  const std::size_t start = begin * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(a.value().ptr() + o * src_row + start, dst_row, out.ptr() + o * dst_row);
  }
  const Var inputs[] = {a};
  return tape.record(op, std::move(out), inputs,
                     [outer, src_row, dst_row, start](const Tensor& g, std::span<Tensor* const> gin) {
                       if (!gin[0]) return;
                       for (std::size_t o = 0; o < outer; ++o) {
                         kernels::active().axpy(1.0, g.ptr() + o * dst_row, gin[0]->ptr() + o * src_row + start, dst_row);
                       }
                     });
}

Var transpose(Var a) {
  const std::size_t r = a.shape().size();
  if (r < 2) shape_fail("transpose", "needs rank >= 2, got " + shape_str(a.shape()));
  std::vector<std::size_t> order(r);
  for (std::size_t i = 0; i < r; ++i) order[i] = i;
  std::swap(order[r - 1], order[r - 2]);
  return permute(a, order);
}

namespace {

// Source offset for every destination element of a permutation.
std::vector<std::size_t> permutation_map(const Shape& src, const std::vector<std::size_t>& order) {
  const std::size_t r = src.size();
  std::vector<std::size_t> src_stride(r, 1);
  for (std::size_t d = r; d-- > 1;) src_stride[d - 1] = src_stride[d] * src[d];
  Shape dst(r);
  std::vector<std::size_t> step(r);
  for (std::size_t d = 0; d < r; ++d) {
    dst[d] = src[order[d]];
    step[d] = src_stride[order[d]];
  }
  const std::size_t n = shape_numel(src);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < n; ++i) {
    map[i] = off;
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < dst[d]) {
        off += step[d];
        break;
      }
      off -= step[d] * (dst[d] - 1);
      idx[d] = 0;
    }
  }
  return map;
}

}  // namespace

Var permute(Var a, const std::vector<std::size_t>& order) {
  constexpr std::string_view op = "permute";
  Tape& tape = tape_of(op, a);
  const Shape& s = a.shape();
  if (order.size() != s.size()) shape_fail(op, "order length does not match rank of " + shape_str(s));
  std::vector<bool> seen(s.size(), false);
  for (std::size_t d : order) {
    if (d >= s.size() || seen[d]) shape_fail(op, "order is not a permutation");
    seen[d] = true;
  }
  Shape out_shape(s.size());
  for (std::size_t d = 0; d < s.size(); ++d) out_shape[d] = s[order[d]];
  auto map = std::make_shared<std::vector<std::size_t>>(permutation_map(s, order));
  Tensor out(out_shape);
  const double* src = a.value().ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = src[(*map)[i]];
  const Var inputs[] = {a};
  return tape.record(op, std::move(out), inputs, [map](const Tensor& g, std::span<Tensor* const> gin) {
    if (!gin[0]) return;
    double* d = gin[0]->ptr();
    for (std::size_t i = 0; i < g.size(); ++i) d[(*map)[i]] += g[i];
  });
}

Var reshape(Var a, Shape shape) {
  Tape& tape = tape_of("reshape", a);
  if (shape_numel(shape) != a.value().size()) {
    shape_fail("reshape", "cannot reshape " + pair_str(a.shape(), shape));
  }
  Tensor out = a.value().reshaped(std::move(shape));
  const Var inputs[] = {a};
  return tape.record("reshape", std::move(out), inputs, [](const Tensor& g, std::span<Tensor* const> gin) {
    if (gin[0]) kernels::active().axpy(1.0, g.ptr(), gin[0]->ptr(), g.size());
  });
}

namespace {

struct ConvGeometry {
  std::size_t batch, c_in, c_out, len, k, len_out, stride, padding;
};

// cols[(i*k + j), t] = x[i, t*stride - padding + j], zero outside [0, len).
void im2col(const ConvGeometry& c, const double* x, double* cols) {
  for (std::size_t i = 0; i < c.c_in; ++i) {
    for (std::size_t j = 0; j < c.k; ++j) {
      double* row = cols + (i * c.k + j) * c.len_out;
      for (std::size_t t = 0; t < c.len_out; ++t) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * c.stride + j) -
                                   static_cast<std::ptrdiff_t>(c.padding);
        row[t] = (src >= 0 && src < static_cast<std::ptrdiff_t>(c.len)) ? x[i * c.len + static_cast<std::size_t>(src)] : 0.0;
      }
    }
  }
}

void col2im_acc(const ConvGeometry& c, const double* cols, double* x) {
  for (std::size_t i = 0; i < c.c_in; ++i) {
    for (std::size_t j = 0; j < c.k; ++j) {
      const double* row = cols + (i * c.k + j) * c.len_out;
      for (std::size_t t = 0; t < c.len_out; ++t) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * c.stride + j) -
                                   static_cast<std::ptrdiff_t>(c.padding);
        if (src >= 0 && src < static_cast<std::ptrdiff_t>(c.len)) x[i * c.len + static_cast<std::size_t>(src)] += row[t];
      }
    }
  }
}

ConvGeometry conv_geometry(std::string_view op, const Shape& xs, const Shape& ws, const Shape& bs) {
  if (xs.size() < 2) shape_fail(op, "input needs rank >= 2, got " + shape_str(xs));
  if (ws.size() != 3) shape_fail(op, "weight must be [C_out, C_in, k], got " + shape_str(ws));
  if (bs != Shape{ws[0]}) shape_fail(op, "bias must be [" + std::to_string(ws[0]) + "], got " + shape_str(bs));
  ConvGeometry c{};
  c.c_in = xs[xs.size() - 2];
  c.len = xs.back();
  c.c_out = ws[0];
  c.k = ws[2];
  if (ws[1] != c.c_in) shape_fail(op, "channel mismatch, input " + pair_str(xs, ws));
  c.batch = shape_numel(xs) / (c.c_in * c.len);
  return c;
}

}  // namespace

Var conv1d(Var x, Var weight, Var bias, std::size_t stride, std::size_t padding) {
  constexpr std::string_view op = "conv1d";
  Tape& tape = tape_of(op, x);
  if (stride == 0) shape_fail(op, "stride must be positive");
  ConvGeometry c = conv_geometry(op, x.shape(), weight.shape(), bias.shape());
  c.stride = stride;
  c.padding = padding;
  if (c.len + 2 * padding < c.k) shape_fail(op, "input length shorter than kernel for " + shape_str(x.shape()));
  c.len_out = (c.len + 2 * padding - c.k) / stride + 1;
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = c.c_out;
  out_shape.back() = c.len_out;
  Tensor out(out_shape, 0.0);
  const std::size_t ck = c.c_in * c.k;
  std::vector<double> cols(ck * c.len_out);
  const double* w = weight.value().ptr();
  const double* b = bias.value().ptr();
  for (std::size_t n = 0; n < c.batch; ++n) {
    im2col(c, x.value().ptr() + n * c.c_in * c.len, cols.data());
    double* y = out.ptr() + n * c.c_out * c.len_out;
    for (std::size_t o = 0; o < c.c_out; ++o) std::fill_n(y + o * c.len_out, c.len_out, b[o]);
    kernels::gemm_acc(c.c_out, c.len_out, ck, w, cols.data(), y);
  }
  const Var inputs[] = {x, weight, bias};
  return tape.record(op, std::move(out), inputs, [x, weight, c](const Tensor& g, std::span<Tensor* const> gin) {
    const std::size_t ck = c.c_in * c.k;
    std::vector<double> cols(ck * c.len_out);
    std::vector<double> cols_t(ck * c.len_out);
    std::vector<double> w_t(ck * c.c_out);
    transpose_copy(weight.value().ptr(), c.c_out, ck, w_t.data());
    std::vector<double> dcols(ck * c.len_out);
    for (std::size_t n = 0; n < c.batch; ++n) {
      const double* gy = g.ptr() + n * c.c_out * c.len_out;
      if (gin[1]) {
        im2col(c, x.value().ptr() + n * c.c_in * c.len, cols.data());
        transpose_copy(cols.data(), ck, c.len_out, cols_t.data());
        kernels::gemm_acc(c.c_out, ck, c.len_out, gy, cols_t.data(), gin[1]->ptr());
      }
      if (gin[0]) {
        std::fill(dcols.begin(), dcols.end(), 0.0);
        kernels::gemm_acc(ck, c.len_out, c.c_out, w_t.data(), gy, dcols.data());
        col2im_acc(c, dcols.data(), gin[0]->ptr() + n * c.c_in * c.len);
      }
      if (gin[2]) {
        for (std::size_t o = 0; o < c.c_out; ++o) {
          (*gin[2])[o] += kernels::active().sum(gy + o * c.len_out, c.len_out);
        }
      }
    }
  });
}

Var transposed_conv1d(Var x, Var weight, Var bias, std::size_t stride, std::size_t padding,
                      std::size_t output_padding) {
  constexpr std::string_view op = "transposed_conv1d";
  Tape& tape = tape_of(op, x);
  if (stride == 0) shape_fail(op, "stride must be positive");
  ConvGeometry c = conv_geometry(op, x.shape(), weight.shape(), bias.shape());
  c.stride = stride;
  c.padding = padding;
  const std::ptrdiff_t len_out = static_cast<std::ptrdiff_t>((c.len - 1) * stride + c.k + output_padding) -
                                 static_cast<std::ptrdiff_t>(2 * padding);
  if (len_out <= 0) shape_fail(op, "non-positive output length for " + shape_str(x.shape()));
  c.len_out = static_cast<std::size_t>(len_out);
  // wp[(o*k + j), i] = w[o, i, j]
  const std::size_t ok = c.c_out * c.k;
  auto wp = std::make_shared<std::vector<double>>(ok * c.c_in);
  const double* w = weight.value().ptr();
  for (std::size_t o = 0; o < c.c_out; ++o)
    for (std::size_t i = 0; i < c.c_in; ++i)
      for (std::size_t j = 0; j < c.k; ++j) (*wp)[(o * c.k + j) * c.c_in + i] = w[(o * c.c_in + i) * c.k + j];

  // z[(o*k + j), t] contributes to y[o, t*stride - padding + j].
  auto target = [c](std::size_t t, std::size_t j) -> std::ptrdiff_t {
    return static_cast<std::ptrdiff_t>(t * c.stride + j) - static_cast<std::ptrdiff_t>(c.padding);
  };
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = c.c_out;
  out_shape.back() = c.len_out;
  Tensor out(out_shape, 0.0);
  std::vector<double> z(ok * c.len);
  const double* b = bias.value().ptr();
  for (std::size_t n = 0; n < c.batch; ++n) {
    std::fill(z.begin(), z.end(), 0.0);
    kernels::gemm_acc(ok, c.len, c.c_in, wp->data(), x.value().ptr() + n * c.c_in * c.len, z.data());
    double* y = out.ptr() + n * c.c_out * c.len_out;
    for (std::size_t o = 0; o < c.c_out; ++o) {
      std::fill_n(y + o * c.len_out, c.len_out, b[o]);
      for (std::size_t j = 0; j < c.k; ++j) {
        for (std::size_t t = 0; t < c.len; ++t) {
          const std::ptrdiff_t dst = target(t, j);
          if (dst >= 0 && dst < static_cast<std::ptrdiff_t>(c.len_out)) {
            y[o * c.len_out + static_cast<std::size_t>(dst)] += z[(o * c.k + j) * c.len + t];
          }
        }
      }
    }
  }
  const Var inputs[] = {x, weight, bias};
  return tape.record(op, std::move(out), inputs,
                     [x, c, wp, target](const Tensor& g, std::span<Tensor* const> gin) {
                       const std::size_t ok = c.c_out * c.k;
                       std::vector<double> dz(ok * c.len);
                       std::vector<double> x_t(c.len * c.c_in);
                       std::vector<double> wp_t(c.c_in * ok);
                       std::vector<double> dwp(ok * c.c_in, 0.0);
                       transpose_copy(wp->data(), ok, c.c_in, wp_t.data());
                       for (std::size_t n = 0; n < c.batch; ++n) {
                         const double* gy = g.ptr() + n * c.c_out * c.len_out;
                         for (std::size_t o = 0; o < c.c_out; ++o) {
                           for (std::size_t j = 0; j < c.k; ++j) {
                             for (std::size_t t = 0; t < c.len; ++t) {
                               const std::ptrdiff_t dst = target(t, j);
                               dz[(o * c.k + j) * c.len + t] =
                                   (dst >= 0 && dst < static_cast<std::ptrdiff_t>(c.len_out))
                                       ? gy[o * c.len_out + static_cast<std::size_t>(dst)]
                                       : 0.0;
                             }
                           }
                         }
                         const double* xn = x.value().ptr() + n * c.c_in * c.len;
                         if (gin[1]) {
                           transpose_copy(xn, c.c_in, c.len, x_t.data());
                           kernels::gemm_acc(ok, c.c_in, c.len, dz.data(), x_t.data(), dwp.data());
                         }
                         if (gin[0]) {
                           kernels::gemm_acc(c.c_in, c.len, ok, wp_t.data(), dz.data(), gin[0]->ptr() + n * c.c_in * c.len);
                         }
                         if (gin[2]) {
                           for (std::size_t o = 0; o < c.c_out; ++o) {
                             (*gin[2])[o] += kernels::active().sum(gy + o * c.len_out, c.len_out);
                           }
                         }
                       }
                       if (gin[1]) {
                         double* dw = gin[1]->ptr();
                         for (std::size_t o = 0; o < c.c_out; ++o)
                           for (std::size_t i = 0; i < c.c_in; ++i)
                             for (std::size_t j = 0; j < c.k; ++j)
                               dw[(o * c.c_in + i) * c.k + j] += dwp[(o * c.k + j) * c.c_in + i];
                       }
                     });
}

Var upsample_nearest(Var x, std::size_t factor) {
  constexpr std::string_view op = "upsample_nearest";
  Tape& tape = tape_of(op, x);
  if (factor == 0) shape_fail(op, "factor must be positive");
  if (x.shape().empty()) shape_fail(op, "needs rank >= 1");
  const std::size_t len = x.shape().back();
  Shape out_shape = x.shape();
  out_shape.back() = len * factor;
  Tensor out(out_shape);
  const double* src = x.value().ptr();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t row = i / (len * factor);
    const std::size_t t = i % (len * factor);
    out[i] = src[row * len + t / factor];
  }
  const Var inputs[] = {x};
  return tape.record(op, std::move(out), inputs, [len, factor](const Tensor& g, std::span<Tensor* const> gin) {
    if (!gin[0]) return;
    double* d = gin[0]->ptr();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const std::size_t row = i / (len * factor);
      const std::size_t t = i % (len * factor);
      d[row * len + t / factor] += g[i];
    }
  });
}

namespace {

void move_rows(const double* src, std::size_t src_rows, double* dst, std::size_t dst_rows,
               std::size_t outer, std::size_t cols, const std::vector<std::size_t>& index, bool gather) {
  const auto& kt = kernels::active();
  for (std::size_t o = 0; o < outer; ++o) {
    const double* s = src + o * src_rows * cols;
    double* d = dst + o * dst_rows * cols;
    for (std::size_t r = 0; r < index.size(); ++r) {
      if (gather) {
        kt.axpy(1.0, s + index[r] * cols, d + r * cols, cols);
      } else {
        kt.axpy(1.0, s + r * cols, d + index[r] * cols, cols);
      }
    }
  }
}

}  // namespace

Var gather_rows(Var x, std::span<const std::size_t> index) {
  constexpr std::string_view op = "gather_rows";
  Tape& tape = tape_of(op, x);
  const Shape& s = x.shape();
  if (s.size() < 2) shape_fail(op, "needs rank >= 2, got " + shape_str(s));
  if (index.empty()) shape_fail(op, "empty index list");
  const std::size_t rows = s[s.size() - 2];
  const std::size_t cols = s.back();
  for (std::size_t i : index) {
    if (i >= rows) shape_fail(op, "row index " + std::to_string(i) + " out of range for " + shape_str(s));
  }
  const std::size_t outer = shape_numel(s) / (rows * cols);
  std::vector<std::size_t> idx(index.begin(), index.end());
  Shape out_shape = s;
  out_shape[out_shape.size() - 2] = idx.size();
  Tensor out(out_shape, 0.0);
  move_rows(x.value().ptr(), rows, out.ptr(), idx.size(), outer, cols, idx, true);
  const Var inputs[] = {x};
  return tape.record(op, std::move(out), inputs,
                     [idx, rows, cols, outer](const Tensor& g, std::span<Tensor* const> gin) {
                       if (gin[0]) move_rows(g.ptr(), idx.size(), gin[0]->ptr(), rows, outer, cols, idx, false);
                     });
}

Var scatter_add_rows(Var x, std::span<const std::size_t> index, std::size_t rows) {
  constexpr std::string_view op = "scatter_add_rows";
  Tape& tape = tape_of(op, x);
  const Shape& s = x.shape();
  if (s.size() < 2) shape_fail(op, "needs rank >= 2, got " + shape_str(s));
  const std::size_t in_rows = s[s.size() - 2];
  const std::size_t cols = s.back();
  if (index.size() != in_rows) {
    shape_fail(op, "index length " + std::to_string(index.size()) + " does not match rows of " + shape_str(s));
  }
  if (rows == 0) shape_fail(op, "output must have at least one row");
  for (std::size_t i : index) {
    if (i >= rows) shape_fail(op, "row index " + std::to_string(i) + " out of range for " + std::to_string(rows) + " rows");
  }
  const std::size_t outer = shape_numel(s) / (in_rows * cols);
  std::vector<std::size_t> idx(index.begin(), index.end());
  Shape out_shape = s;
  out_shape[out_shape.size() - 2] = rows;
  Tensor out(out_shape, 0.0);
  move_rows(x.value().ptr(), in_rows, out.ptr(), rows, outer, cols, idx, false);
  const Var inputs[] = {x};
  return tape.record(op, std::move(out), inputs,
                     [idx, rows, cols, outer](const Tensor& g, std::span<Tensor* const> gin) {
                       if (gin[0]) move_rows(g.ptr(), rows, gin[0]->ptr(), idx.size(), outer, cols, idx, true);
                     });
}

}  // namespace mrt
