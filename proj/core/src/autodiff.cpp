#include "vqc/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace vqc::ad {

// ---------------------------------------------------------------- Array

Array::Array(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw InvalidArgument("Array: data length " + std::to_string(data_.size()) +
                          " does not match shape " + std::to_string(rows_) + "x" +
                          std::to_string(cols_));
  }
}

Array Array::row(std::initializer_list<double> values) {
  return Array(1, values.size(), std::vector<double>(values));
}

Array Array::row(std::span<const double> values) {
  return Array(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

double Array::item() const {
  if (data_.size() != 1) throw InvalidArgument("Array::item on shape " + shape_string(*this));
  return data_[0];
}

void Array::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Array& Array::operator+=(const Array& o) {
  if (!same_shape(o)) {
    throw InvalidArgument("Array +=: shape " + shape_string(*this) + " vs " + shape_string(o));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
  return *this;
}

std::string shape_string(const Array& a) {
  return "(" + std::to_string(a.rows()) + "," + std::to_string(a.cols()) + ")";
}

const Array& Var::value() const { return tape->value(*this); }
const Array& Var::grad() const { return tape->grad(*this); }

// ---------------------------------------------------------------- Tape

Var Tape::leaf(Array value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  n.is_leaf = true;
  nodes_.push_back(std::move(n));
  return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::constant(Array value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::record(Array value, std::vector<Var> parents, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  for (const Var& p : parents) {
    if (p.tape != this) throw InvalidArgument("Tape: operand belongs to a different tape");
    n.requires_grad = n.requires_grad || nodes_[p.id].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Array& Tape::grad(Var v) {
  Node& n = nodes_.at(v.id);
  if (!n.has_grad) {
    n.grad = Array(n.value.rows(), n.value.cols());
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::accumulate(Var v, const Array& g) {
  Node& n = nodes_.at(v.id);
  if (!n.requires_grad) return;
  if (!g.same_shape(n.value)) {
    throw InvalidArgument("Tape: gradient shape " + shape_string(g) + " does not match value " +
                          shape_string(n.value));
  }
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
  } else {
    n.grad += g;
  }
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw InvalidArgument("backward: loss belongs to a different tape");
  if (value(loss).size() != 1) {
    throw InvalidArgument("backward: loss must be scalar, got shape " +
                          shape_string(value(loss)));
  }
  for (Node& n : nodes_) {
    if (!n.is_leaf) n.has_grad = false;
  }
  accumulate(loss, Array::scalar(1.0));
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.is_leaf || !n.has_grad || !n.backward) continue;
    n.backward(*this, n.grad);
  }
}

void Tape::zero_grad() {
  for (Node& n : nodes_) n.has_grad = false;
}

std::vector<std::size_t> Tape::choose(std::vector<std::size_t> computed) {
  if (freeze_ == nullptr || freeze_->mode == Freeze::Mode::off) return computed;
  if (freeze_->mode == Freeze::Mode::record) {
    freeze_->choices.push_back(computed);
    return computed;
  }
  if (freeze_->choice_cursor >= freeze_->choices.size()) {
    throw InvalidArgument("Freeze: replay ran past the recorded choices");
  }
  return freeze_->choices[freeze_->choice_cursor++];
}

// ---------------------------------------------------------------- helpers

namespace {

Tape& tape_of(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) throw InvalidArgument("operands on different tapes");
  return *a.tape;
}

enum class Bcast { same, a_scalar, b_scalar };

Bcast broadcast_kind(const Array& a, const Array& b, const char* op) {
  if (a.same_shape(b)) return Bcast::same;
  if (a.size() == 1) return Bcast::a_scalar;
  if (b.size() == 1) return Bcast::b_scalar;
  throw InvalidArgument(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " +
                        shape_string(b));
}

// Reduces a full-shape gradient to the shape of the operand it belongs to.
Array reduce_to(const Array& g, const Array& like) {
  if (g.same_shape(like)) return g;
  double s = 0.0;
  for (double v : g.data()) s += v;
  return Array(like.rows(), like.cols(), s);
}

template <typename F, typename Da, typename Db>
Var binary(Var a, Var b, const char* name, F f, Da da, Db db) {
  Tape& t = tape_of(a, b);
  const Array& av = t.value(a);
  const Array& bv = t.value(b);
  const Bcast kind = broadcast_kind(av, bv, name);
  const Array& shape_src = kind == Bcast::a_scalar ? bv : av;
  Array out(shape_src.rows(), shape_src.cols());
  const std::size_t n = out.size();
  const bool as = kind == Bcast::a_scalar;
  const bool bs = kind == Bcast::b_scalar;
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[as ? 0 : i], bv[bs ? 0 : i]);

  return t.record(std::move(out), {a, b}, [a, b, as, bs, n, da, db](Tape& tp, const Array& g) {
    const Array& x = tp.value(a);
    const Array& y = tp.value(b);
    if (tp.requires_grad(a)) {
      Array ga(g.rows(), g.cols());
      for (std::size_t i = 0; i < n; ++i) ga[i] = g[i] * da(x[as ? 0 : i], y[bs ? 0 : i]);
      tp.accumulate(a, reduce_to(ga, x));
    }
    if (tp.requires_grad(b)) {
      Array gb(g.rows(), g.cols());
      for (std::size_t i = 0; i < n; ++i) gb[i] = g[i] * db(x[as ? 0 : i], y[bs ? 0 : i]);
      tp.accumulate(b, reduce_to(gb, y));
    }
  });
}

template <typename F, typename D>
Var unary(Var a, F f, D d) {
  Tape& t = *a.tape;
  const Array& av = t.value(a);
  Array out(av.rows(), av.cols());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return t.record(std::move(out), {a}, [a, d](Tape& tp, const Array& g) {
    const Array& x = tp.value(a);
    Array ga(g.rows(), g.cols());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * d(x[i]);
    tp.accumulate(a, ga);
  });
}

}  // namespace

// ---------------------------------------------------------------- elementwise

Var add(Var a, Var b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Var div(Var a, Var b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
}

Var neg(Var a) {
  return unary(a, [](double x) { return -x; }, [](double) { return -1.0; });
}

Var square(Var a) {
  return unary(a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Var sqrt(Var a) {
  for (double v : a.value().data()) {
    if (v < 0.0) throw InvalidArgument("sqrt: negative input");
  }
  return unary(a, [](double x) { return std::sqrt(x); },
               [](double x) { return 0.5 / std::sqrt(x); });
}

Var scale(Var a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double) { return s; });
}

Var tanh(Var a) {
  return unary(a, [](double x) { return std::tanh(x); },
               [](double x) {
                 const double t = std::tanh(x);
                 return 1.0 - t * t;
               });
}

namespace {
double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace

Var sigmoid(Var a) {
  return unary(a, logistic, [](double x) {
    const double s = logistic(x);
    return s * (1.0 - s);
  });
}

Var relu(Var a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------- linear algebra

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Array& av = t.value(a);
  const Array& bv = t.value(b);
  if (av.cols() != bv.rows()) {
    throw InvalidArgument("matmul: shapes " + shape_string(av) + " and " + shape_string(bv));
  }
  const std::size_t m = av.rows();
  const std::size_t k = av.cols();
  const std::size_t n = bv.cols();
  Array out(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double x = av(i, p);
      for (std::size_t j = 0; j < n; ++j) out(i, j) += x * bv(p, j);
    }
  }
  return t.record(std::move(out), {a, b}, [a, b, m, k, n](Tape& tp, const Array& g) {
    const Array& x = tp.value(a);
    const Array& y = tp.value(b);
    if (tp.requires_grad(a)) {
      Array ga(m, k);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g(i, j) * y(p, j);
          ga(i, p) = s;
        }
      }
      tp.accumulate(a, ga);
    }
    if (tp.requires_grad(b)) {
      Array gb(k, n);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double xv = x(i, p);
          for (std::size_t j = 0; j < n; ++j) gb(p, j) += xv * g(i, j);
        }
      }
      tp.accumulate(b, gb);
    }
  });
}

namespace {

Var affine(Var x, Var weight, const Var* bias_ptr) {
  Tape& t = tape_of(x, weight);
  const bool has_bias = bias_ptr != nullptr;
  const Var bias = has_bias ? *bias_ptr : x;
  if (has_bias) tape_of(x, bias);
  const Array& xv = t.value(x);
  const Array& wv = t.value(weight);
  const std::size_t batch = xv.rows();
  const std::size_t in = xv.cols();
  const std::size_t out_w = wv.rows();
  if (wv.cols() != in ||
      (has_bias && (t.value(bias).rows() != 1 || t.value(bias).cols() != out_w))) {
    throw InvalidArgument("linear: x " + shape_string(xv) + ", W " + shape_string(wv) +
                          (has_bias ? ", b " + shape_string(t.value(bias)) : std::string()));
  }
  Array out(batch, out_w);
  for (std::size_t r = 0; r < batch; ++r) {
    const double* xr = &xv.data()[r * in];
    for (std::size_t o = 0; o < out_w; ++o) {
      const double* wr = &wv.data()[o * in];
      double s = has_bias ? t.value(bias)[o] : 0.0;
      for (std::size_t i = 0; i < in; ++i) s += wr[i] * xr[i];
      out(r, o) = s;
    }
  }
  std::vector<Var> parents{x, weight};
  if (has_bias) parents.push_back(bias);
  return t.record(std::move(out), std::move(parents),
                  [x, weight, bias, has_bias, batch, in, out_w](Tape& tp, const Array& g) {
                    const Array& xv2 = tp.value(x);
                    const Array& wv2 = tp.value(weight);
                    if (tp.requires_grad(x)) {
                      Array gx(batch, in);
                      for (std::size_t r = 0; r < batch; ++r) {
                        for (std::size_t o = 0; o < out_w; ++o) {
                          const double go = g(r, o);
                          if (go == 0.0) continue;
                          const double* wr = &wv2.data()[o * in];
                          double* gr = &gx.data()[r * in];
                          for (std::size_t i = 0; i < in; ++i) gr[i] += go * wr[i];
                        }
                      }
                      tp.accumulate(x, gx);
                    }
                    if (tp.requires_grad(weight)) {
                      Array gw(out_w, in);
                      for (std::size_t r = 0; r < batch; ++r) {
                        const double* xr = &xv2.data()[r * in];
                        for (std::size_t o = 0; o < out_w; ++o) {
                          const double go = g(r, o);
                          if (go == 0.0) continue;
                          double* gwr = &gw.data()[o * in];
                          for (std::size_t i = 0; i < in; ++i) gwr[i] += go * xr[i];
                        }
                      }
                      tp.accumulate(weight, gw);
                    }
                    if (has_bias && tp.requires_grad(bias)) {
                      Array gb(1, out_w);
                      for (std::size_t r = 0; r < batch; ++r) {
                        for (std::size_t o = 0; o < out_w; ++o) gb[o] += g(r, o);
                      }
                      tp.accumulate(bias, gb);
                    }
                  });
}

}  // namespace

Var linear(Var x, Var weight, Var bias) { return affine(x, weight, &bias); }

Var linear(Var x, Var weight) { return affine(x, weight, nullptr); }

Var add_row(Var a, Var row) {
  Tape& t = tape_of(a, row);
  const Array& av = t.value(a);
  const Array& rv = t.value(row);
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw InvalidArgument("add_row: " + shape_string(av) + " and row " + shape_string(rv));
  }
  Array out = av;
  for (std::size_t r = 0; r < av.rows(); ++r) {
    for (std::size_t c = 0; c < av.cols(); ++c) out(r, c) += rv[c];
  }
  return t.record(std::move(out), {a, row}, [a, row](Tape& tp, const Array& g) {
    tp.accumulate(a, g);
    if (tp.requires_grad(row)) {
      Array gr(1, g.cols());
      for (std::size_t r = 0; r < g.rows(); ++r) {
        for (std::size_t c = 0; c < g.cols(); ++c) gr[c] += g(r, c);
      }
      tp.accumulate(row, gr);
    }
  });
}

// ---------------------------------------------------------------- reductions

Var sum(Var a) {
  Tape& t = *a.tape;
  const Array& av = t.value(a);
  double s = 0.0;
  for (double v : av.data()) s += v;
  return t.record(Array::scalar(s), {a}, [a](Tape& tp, const Array& g) {
    const Array& x = tp.value(a);
    tp.accumulate(a, Array(x.rows(), x.cols(), g[0]));
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw InvalidArgument("mean: empty array");
  return scale(sum(a), 1.0 / n);
}

Var sum(Var a, int axis) {
  Tape& t = *a.tape;
  const Array& av = t.value(a);
  if (axis != 0 && axis != 1) throw InvalidArgument("sum: axis must be 0 or 1");
  const std::size_t rows = av.rows();
  const std::size_t cols = av.cols();
  Array out = axis == 0 ? Array(1, cols) : Array(rows, 1);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[axis == 0 ? c : r] += av(r, c);
  }
  return t.record(std::move(out), {a}, [a, axis, rows, cols](Tape& tp, const Array& g) {
    Array ga(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) ga(r, c) = g[axis == 0 ? c : r];
    }
    tp.accumulate(a, ga);
  });
}

Var mean(Var a, int axis) {
  const Array& av = a.value();
  const std::size_t n = axis == 0 ? av.rows() : av.cols();
  if (n == 0) throw InvalidArgument("mean: empty axis");
  return scale(sum(a, axis), 1.0 / static_cast<double>(n));
}

Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw InvalidArgument("concat: no inputs");
  if (axis != 0 && axis != 1) throw InvalidArgument("concat: axis must be 0 or 1");
  Tape& t = *parts[0].tape;
  std::vector<Var> ps(parts.begin(), parts.end());
  std::size_t rows = 0;
  std::size_t cols = 0;
  for (const Var& p : ps) {
    tape_of(ps[0], p);
    const Array& v = t.value(p);
    if (axis == 1) {
      if (rows == 0 && cols == 0) rows = v.rows();
      if (v.rows() != rows) throw InvalidArgument("concat: row counts differ");
      cols += v.cols();
    } else {
      if (rows == 0 && cols == 0) cols = v.cols();
      if (v.cols() != cols) throw InvalidArgument("concat: column counts differ");
      rows += v.rows();
    }
  }
  Array out(rows, cols);
  std::size_t offset = 0;
  for (const Var& p : ps) {
    const Array& v = t.value(p);
    for (std::size_t r = 0; r < v.rows(); ++r) {
      for (std::size_t c = 0; c < v.cols(); ++c) {
        if (axis == 1) {
          out(r, offset + c) = v(r, c);
        } else {
          out(offset + r, c) = v(r, c);
        }
      }
    }
    offset += axis == 1 ? v.cols() : v.rows();
  }
  return t.record(std::move(out), ps, [ps, axis](Tape& tp, const Array& g) {
    std::size_t off = 0;
    for (const Var& p : ps) {
      const Array& v = tp.value(p);
      if (tp.requires_grad(p)) {
        Array gp(v.rows(), v.cols());
        for (std::size_t r = 0; r < v.rows(); ++r) {
          for (std::size_t c = 0; c < v.cols(); ++c) {
            gp(r, c) = axis == 1 ? g(r, off + c) : g(off + r, c);
          }
        }
        tp.accumulate(p, gp);
      }
      off += axis == 1 ? v.cols() : v.rows();
    }
  });
}

Var slice(Var a, std::size_t begin, std::size_t end, int axis) {
  Tape& t = *a.tape;
  const Array& av = t.value(a);
  if (axis != 0 && axis != 1) throw InvalidArgument("slice: axis must be 0 or 1");
  const std::size_t extent = axis == 1 ? av.cols() : av.rows();
  if (begin > end || end > extent) {
    throw InvalidArgument("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                          ") out of bounds for extent " + std::to_string(extent));
  }
  const std::size_t rows = axis == 1 ? av.rows() : end - begin;
  const std::size_t cols = axis == 1 ? end - begin : av.cols();
  Array out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      out(r, c) = axis == 1 ? av(r, begin + c) : av(begin + r, c);
    }
  }
  return t.record(std::move(out), {a}, [a, begin, axis, rows, cols](Tape& tp, const Array& g) {
    const Array& x = tp.value(a);
    Array ga(x.rows(), x.cols());
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        if (axis == 1) {
          ga(r, begin + c) = g(r, c);
        } else {
          ga(begin + r, c) = g(r, c);
        }
      }
    }
    tp.accumulate(a, ga);
  });
}

// ---------------------------------------------------------------- special

Var stop_gradient(Var a) {
  Tape& t = *a.tape;
  Array v = t.value(a);
  if (Freeze* f = t.freeze_; f != nullptr) {
    if (f->mode == Freeze::Mode::record) {
      f->stopped.push_back(v);
    } else if (f->mode == Freeze::Mode::replay) {
      if (f->stopped_cursor >= f->stopped.size()) {
        throw InvalidArgument("Freeze: replay ran past the recorded stop-gradient values");
      }
      const Array& frozen = f->stopped[f->stopped_cursor++];
      if (!frozen.same_shape(v)) throw InvalidArgument("Freeze: replayed shape mismatch");
      v = frozen;
    }
  }
  return t.constant(std::move(v));
}

Var scale_grad(Var a, double factor) {
  Tape& t = *a.tape;
  return t.record(t.value(a), {a}, [a, factor](Tape& tp, const Array& g) {
    Array ga = g;
    for (double& v : ga.data()) v *= factor;
    tp.accumulate(a, ga);
  });
}

Var gather_columns(Var source, std::span<const std::size_t> index) {
  Tape& t = *source.tape;
  const Array& sv = t.value(source);
  const std::size_t dim = sv.rows();
  Array out(index.size(), dim);
  for (std::size_t b = 0; b < index.size(); ++b) {
    if (index[b] >= sv.cols()) {
      throw InvalidArgument("gather_columns: index " + std::to_string(index[b]) +
                            " out of range for " + std::to_string(sv.cols()) + " columns");
    }
    for (std::size_t e = 0; e < dim; ++e) out(b, e) = sv(e, index[b]);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return t.record(std::move(out), {source}, [source, idx, dim](Tape& tp, const Array& g) {
    const Array& s = tp.value(source);
    Array gs(s.rows(), s.cols());
    for (std::size_t b = 0; b < idx.size(); ++b) {
      for (std::size_t e = 0; e < dim; ++e) gs(e, idx[b]) += g(b, e);
    }
    tp.accumulate(source, gs);
  });
}

Var normalize_pairs(Var a, double floor) {
  Tape& t = *a.tape;
  const Array& av = t.value(a);
  if (av.cols() % 2 != 0) throw InvalidArgument("normalize_pairs: odd row length");
  const std::size_t E = av.cols() / 2;
  Array out(av.rows(), av.cols());
  for (std::size_t r = 0; r < av.rows(); ++r) {
    for (std::size_t i = 0; i < E; ++i) {
      const double re = av(r, i);
      const double im = av(r, i + E);
      const double mag = std::hypot(re, im);
      if (mag < floor) {
        out(r, i) = 1.0;
        out(r, i + E) = 0.0;
      } else {
        out(r, i) = re / mag;
        out(r, i + E) = im / mag;
      }
    }
  }
  return t.record(std::move(out), {a}, [a, E, floor](Tape& tp, const Array& g) {
    const Array& x = tp.value(a);
    Array ga(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
      for (std::size_t i = 0; i < E; ++i) {
        const double re = x(r, i);
        const double im = x(r, i + E);
        const double mag = std::hypot(re, im);
        if (mag < floor) continue;
        // d(u/|u|) = (I - n n^T) / |u|, with n the normalized pair.
        const double nr = re / mag;
        const double ni = im / mag;
        const double gr = g(r, i);
        const double gi = g(r, i + E);
        const double dot = gr * nr + gi * ni;
        ga(r, i) = (gr - dot * nr) / mag;
        ga(r, i + E) = (gi - dot * ni) / mag;
      }
    }
    tp.accumulate(a, ga);
  });
}

}  // namespace vqc::ad
