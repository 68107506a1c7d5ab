#pragma once

// Trainable unit-modulus codebooks and vector quantization with a
// straight-through gradient path.

#include <span>
#include <vector>

#include "vqc/autodiff.hpp"
#include "vqc/types.hpp"

namespace vqc {

/// Columns are codewords. Each column has 2E real entries: the E real parts
/// followed by the E imaginary parts.
struct Codebook {
  ad::Array entries;  // 2E x W
  bool trainable = true;

  std::size_t elements() const { return entries.rows() / 2; }
  std::size_t size() const { return entries.cols(); }

  std::vector<double> column(std::size_t j) const;
  CVector codeword(std::size_t j) const;
};

/// Count of pairs that fell below the magnitude floor and were replaced.
struct NormalizeResult {
  std::vector<double> values;
  std::size_t fallback_pairs = 0;
};

/// (a, b) -> (a, b) / sqrt(a^2 + b^2) for each pair (v[i], v[i + E]).
/// Pairs with magnitude below 1e-12 become (1, 0).
NormalizeResult normalize_unit_modulus(std::span<const double> v);

/// Entries drawn i.i.d. CN(0, 2*pi), then projected to unit modulus.
Codebook init_codebook(std::size_t E, std::size_t W, Rng& rng);

Codebook project_codebook(const Codebook& cb);

/// Largest deviation of any element modulus from 1.
double max_modulus_error(const Codebook& cb);
double max_modulus_error(std::span<const double> pairs);

struct Nearest {
  std::size_t index = 0;
  double squared_distance = 0.0;
  std::vector<double> codeword;
};

/// Squared-Euclidean argmin over columns; ties go to the smallest index.
Nearest nearest_codeword(std::span<const double> query, const Codebook& cb);

/// Output of quantizing a batch of pre-quantized vectors (B x 2E).
struct Quantized {
  ad::Var selected;         // forward value: the codewords; gradient copied to pre_q
  std::vector<std::size_t> index;
  ad::Var codeword_loss;    // B x 1, ||SG(pre_q) - codeword||^2
  ad::Var commitment_loss;  // B x 1, ||pre_q - SG(codeword)||^2
};

/// `codebook` is the tape node holding the 2E x W entries; its value is used
/// for the nearest-neighbour search.
Quantized straight_through_select(ad::Var pre_q, ad::Var codebook);

}  // namespace vqc
