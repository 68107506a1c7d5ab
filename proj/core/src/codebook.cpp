#include "vqc/codebook.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace vqc {

namespace {
constexpr double kModulusFloor = 1e-12;
}

std::vector<double> Codebook::column(std::size_t j) const {
  std::vector<double> c(entries.rows());
  for (std::size_t r = 0; r < entries.rows(); ++r) c[r] = entries(r, j);
  return c;
}

CVector Codebook::codeword(std::size_t j) const {
  const std::size_t E = elements();
  CVector c(E);
  for (std::size_t i = 0; i < E; ++i) c[i] = {entries(i, j), entries(i + E, j)};
  return c;
}

NormalizeResult normalize_unit_modulus(std::span<const double> v) {
  if (v.size() % 2 != 0) throw InvalidArgument("normalize_unit_modulus: odd length");
  const std::size_t E = v.size() / 2;
  NormalizeResult out{std::vector<double>(v.size()), 0};
  for (std::size_t i = 0; i < E; ++i) {
    const double mag = std::hypot(v[i], v[i + E]);
    if (mag < kModulusFloor) {
      out.values[i] = 1.0;
      out.values[i + E] = 0.0;
      ++out.fallback_pairs;
    } else {
      out.values[i] = v[i] / mag;
      out.values[i + E] = v[i + E] / mag;
    }
  }
  return out;
}

Codebook init_codebook(std::size_t E, std::size_t W, Rng& rng) {
  if (E == 0 || W == 0) throw InvalidArgument("init_codebook: E and W must be >= 1");
  Codebook cb{ad::Array(2 * E, W), true};
  for (std::size_t j = 0; j < W; ++j) {
    for (std::size_t i = 0; i < E; ++i) {
      const Complex z = complex_normal(rng, 2.0 * std::numbers::pi);
      cb.entries(i, j) = z.real();
      cb.entries(i + E, j) = z.imag();
    }
  }
  return project_codebook(cb);
}

Codebook project_codebook(const Codebook& cb) {
  Codebook out = cb;
  const std::size_t E = cb.elements();
  for (std::size_t j = 0; j < cb.size(); ++j) {
    for (std::size_t i = 0; i < E; ++i) {
      const double re = cb.entries(i, j);
      const double im = cb.entries(i + E, j);
      const double mag = std::hypot(re, im);
      if (mag < kModulusFloor) {
        out.entries(i, j) = 1.0;
        out.entries(i + E, j) = 0.0;
      } else if (std::abs(mag - 1.0) > 1e-15) {
        // Pairs already at unit modulus (to rounding) stay untouched, which
        // keeps projection idempotent bit for bit.
        out.entries(i, j) = re / mag;
        out.entries(i + E, j) = im / mag;
      }
    }
  }
  return out;
}

double max_modulus_error(std::span<const double> pairs) {
  const std::size_t E = pairs.size() / 2;
  double worst = 0.0;
  for (std::size_t i = 0; i < E; ++i) {
    worst = std::max(worst, std::abs(std::hypot(pairs[i], pairs[i + E]) - 1.0));
  }
  return worst;
}

double max_modulus_error(const Codebook& cb) {
  double worst = 0.0;
  for (std::size_t j = 0; j < cb.size(); ++j) {
    worst = std::max(worst, max_modulus_error(cb.column(j)));
  }
  return worst;
}

namespace {

std::size_t argmin_column(const double* query, const ad::Array& entries, double* best_out) {
  const std::size_t D = entries.rows();
  const std::size_t W = entries.cols();
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < W; ++j) {
    double d = 0.0;
    for (std::size_t r = 0; r < D; ++r) {
      const double diff = query[r] - entries(r, j);
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = j;
    }
  }
  if (best_out != nullptr) *best_out = best_d;
  return best;
}

}  // namespace

Nearest nearest_codeword(std::span<const double> query, const Codebook& cb) {
  if (query.size() != cb.entries.rows()) {
    throw InvalidArgument("nearest_codeword: query length " + std::to_string(query.size()) +
                          " does not match codeword length " +
                          std::to_string(cb.entries.rows()));
  }
  if (cb.size() == 0) throw InvalidArgument("nearest_codeword: empty codebook");
  Nearest n;
  n.index = argmin_column(query.data(), cb.entries, &n.squared_distance);
  n.codeword = cb.column(n.index);
  return n;
}

Quantized straight_through_select(ad::Var pre_q, ad::Var codebook) {
  ad::Tape& tape = *pre_q.tape;
  const ad::Array& q = pre_q.value();
  const ad::Array& entries = codebook.value();
  if (q.cols() != entries.rows()) {
    throw InvalidArgument("straight_through_select: vector length " + std::to_string(q.cols()) +
                          " vs codeword length " + std::to_string(entries.rows()));
  }
  std::vector<std::size_t> index(q.rows());
  for (std::size_t b = 0; b < q.rows(); ++b) {
    index[b] = argmin_column(&q.data()[b * q.cols()], entries, nullptr);
  }
  index = tape.choose(std::move(index));

  const ad::Var codeword = ad::gather_columns(codebook, index);
  // selected = pre_q + SG(codeword - pre_q). The forward value is taken from
  // the codeword itself so it matches the column bit for bit.
  const ad::Var offset = ad::stop_gradient(codeword - pre_q);
  const ad::Freeze* freeze = tape.freeze();
  const bool replaying = freeze != nullptr && freeze->mode == ad::Freeze::Mode::replay;
  ad::Array value = codeword.value();
  if (replaying) {
    // Tape storage may have moved since `q` was taken.
    const ad::Array& current = pre_q.value();
    const ad::Array& off = offset.value();
    for (std::size_t i = 0; i < value.size(); ++i) value[i] = current[i] + off[i];
  }
  const ad::Var selected = tape.record(std::move(value), {pre_q},
                                       [pre_q](ad::Tape& tp, const ad::Array& g) {
                                         tp.accumulate(pre_q, g);
                                       });

  Quantized out;
  out.selected = selected;
  out.index = std::move(index);
  out.codeword_loss = ad::sum(ad::square(ad::stop_gradient(pre_q) - codeword), 1);
  out.commitment_loss = ad::sum(ad::square(pre_q - ad::stop_gradient(codeword)), 1);
  return out;
}

}  // namespace vqc
