#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <utility>

#include "patchfill/grid.hpp"
#include "patchfill/rng.hpp"

namespace patchfill {

/// Two latent-vector banks: `e` quantizes features of fully-known patches,
/// `e_prime` features of patches containing missing pixels. Entries are
/// optimized by an exponential moving average of assigned features, so the
/// invariant e_k = ema_sums_k / ema_counts_k holds after every update.
template <typename Scalar>
struct DualCodebook {
  MatrixX<Scalar> e;        // K x C
  MatrixX<Scalar> e_prime;  // K' x C
  VectorX<Scalar> ema_counts_e, ema_counts_e_prime;
  MatrixX<Scalar> ema_sums_e, ema_sums_e_prime;
  Scalar gamma = Scalar(0.99);

  int entries() const { return static_cast<int>(e.rows()); }
  int entries_prime() const { return static_cast<int>(e_prime.rows()); }
  int dim() const { return static_cast<int>(e.cols()); }
};

/// Entries i.i.d. Gaussian with standard deviation 1/sqrt(C); EMA counts start
/// at 1 and sums at the entries themselves so the ratio identity holds at t=0.
template <typename Scalar>
DualCodebook<Scalar> init_codebook(int K, int K_prime, int C, Scalar gamma, std::uint64_t seed) {
  require(K > 0 && K_prime > 0 && C > 0, "init_codebook: sizes must be positive");
  require(gamma > Scalar(0) && gamma < Scalar(1), "init_codebook: gamma must lie in (0,1)");
  DualCodebook<Scalar> book;
  book.gamma = gamma;
  CounterRng rng(seed);
  const double sd = 1.0 / std::sqrt(static_cast<double>(C));
  auto fill = [&](MatrixX<Scalar>& m, int rows) {
    m.resize(rows, C);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < C; ++j) m(i, j) = static_cast<Scalar>(sd * rng.gaussian());
  };
  fill(book.e, K);
  fill(book.e_prime, K_prime);
  book.ema_counts_e = VectorX<Scalar>::Ones(K);
  book.ema_counts_e_prime = VectorX<Scalar>::Ones(K_prime);
  book.ema_sums_e = book.e;
  book.ema_sums_e_prime = book.e_prime;
  return book;
}

namespace detail {

// Nearest entry under L2, ties broken by lowest index. Distances are
// accumulated in double regardless of Scalar so that the argmin agrees with a
// plain exhaustive scan even on near-ties.
template <typename Scalar>
int nearest_entry(const MatrixX<Scalar>& bank, const Eigen::Ref<const Eigen::RowVectorXd>& f) {
  int best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  for (int k = 0; k < bank.rows(); ++k) {
    const double d = (bank.row(k).template cast<double>() - f).squaredNorm();
    if (d < best_dist) {
      best_dist = d;
      best = k;
    }
  }
  return best;
}

}  // namespace detail

/// Positionwise nearest-neighbor quantization. Where the indicator is 1 the
/// feature is matched against bank e, elsewhere against e_prime. Returns the
/// selected entries and their indices within the chosen bank.
template <typename Scalar>
std::pair<Grid<Scalar>, TokenGrid> quantize(const Grid<Scalar>& features, const IndicatorMask& indicator,
                                            const DualCodebook<Scalar>& book) {
  require(features.channels == book.dim(), "quantize: feature dimension does not match the codebook");
  require(indicator.height() == features.height && indicator.width() == features.width,
          "quantize: indicator resolution does not match the feature grid");
  Grid<Scalar> quantized(features.height, features.width, features.channels);
  TokenGrid tokens;
  tokens.data = TokenArray::Zero(features.height, features.width);
  tokens.bank = indicator.data;
  for (int i = 0; i < features.height; ++i)
    for (int j = 0; j < features.width; ++j) {
      const Eigen::RowVectorXd f = features.row(i, j).template cast<double>();
      if (indicator.data(i, j)) {
        const int k = detail::nearest_entry(book.e, f);
        tokens.data(i, j) = k;
        quantized.row(i, j) = book.e.row(k);
      } else {
        const int k = detail::nearest_entry(book.e_prime, f);
        tokens.data(i, j) = k;
        quantized.row(i, j) = book.e_prime.row(k);
      }
    }
  return {std::move(quantized), std::move(tokens)};
}

enum class Bank { unmasked, masked };

/// Positionwise lookup of codebook entries for a token grid.
template <typename Scalar>
Grid<Scalar> tokens_to_vectors(const TokenGrid& tokens, const DualCodebook<Scalar>& book, Bank bank) {
  const MatrixX<Scalar>& entries = bank == Bank::unmasked ? book.e : book.e_prime;
  Grid<Scalar> out(tokens.height(), tokens.width(), book.dim());
  for (int i = 0; i < tokens.height(); ++i)
    for (int j = 0; j < tokens.width(); ++j) {
      const int t = tokens.data(i, j);
      require(t >= 0 && t < entries.rows(), "tokens_to_vectors: token out of range");
      out.row(i, j) = entries.row(t);
    }
  return out;
}

/// Per-bank lookup following each token's recorded bank.
template <typename Scalar>
Grid<Scalar> tokens_to_vectors(const TokenGrid& tokens, const DualCodebook<Scalar>& book) {
  Grid<Scalar> out(tokens.height(), tokens.width(), book.dim());
  for (int i = 0; i < tokens.height(); ++i)
    for (int j = 0; j < tokens.width(); ++j) {
      const MatrixX<Scalar>& entries = tokens.bank(i, j) ? book.e : book.e_prime;
      const int t = tokens.data(i, j);
      require(t >= 0 && t < entries.rows(), "tokens_to_vectors: token out of range");
      out.row(i, j) = entries.row(t);
    }
  return out;
}

/// One EMA step over a batch of (features, tokens) pairs. Assignment counts
/// and sums are pooled over the whole batch, then every entry - assigned or
/// not - follows the decay recurrence; entries with positive running count are
/// set to the running ratio.
template <typename Scalar>
void ema_update(DualCodebook<Scalar>& book, std::span<const Grid<Scalar>* const> features,
                std::span<const TokenGrid* const> tokens) {
  require(features.size() == tokens.size(), "ema_update: feature/token batch size mismatch");
  const Scalar g = book.gamma;
  VectorX<Scalar> count_e = VectorX<Scalar>::Zero(book.entries());
  VectorX<Scalar> count_p = VectorX<Scalar>::Zero(book.entries_prime());
  MatrixX<Scalar> sum_e = MatrixX<Scalar>::Zero(book.entries(), book.dim());
  MatrixX<Scalar> sum_p = MatrixX<Scalar>::Zero(book.entries_prime(), book.dim());
  for (std::size_t b = 0; b < features.size(); ++b) {
    const Grid<Scalar>& f = *features[b];
    const TokenGrid& t = *tokens[b];
    require(f.height == t.height() && f.width == t.width() && f.channels == book.dim(),
            "ema_update: feature grid does not match tokens");
    for (int i = 0; i < f.height; ++i)
      for (int j = 0; j < f.width; ++j) {
        const int k = t.data(i, j);
        if (t.bank(i, j)) {
          require(k >= 0 && k < book.entries(), "ema_update: token out of range for bank e");
          count_e(k) += Scalar(1);
          sum_e.row(k) += f.row(i, j);
        } else {
          require(k >= 0 && k < book.entries_prime(), "ema_update: token out of range for bank e'");
          count_p(k) += Scalar(1);
          sum_p.row(k) += f.row(i, j);
        }
      }
  }
  book.ema_counts_e = book.ema_counts_e * g + count_e * (Scalar(1) - g);
  book.ema_counts_e_prime = book.ema_counts_e_prime * g + count_p * (Scalar(1) - g);
  book.ema_sums_e = book.ema_sums_e * g + sum_e * (Scalar(1) - g);
  book.ema_sums_e_prime = book.ema_sums_e_prime * g + sum_p * (Scalar(1) - g);
  for (int k = 0; k < book.entries(); ++k)
    if (book.ema_counts_e(k) > Scalar(0)) book.e.row(k) = book.ema_sums_e.row(k) / book.ema_counts_e(k);
  for (int k = 0; k < book.entries_prime(); ++k)
    if (book.ema_counts_e_prime(k) > Scalar(0))
      book.e_prime.row(k) = book.ema_sums_e_prime.row(k) / book.ema_counts_e_prime(k);
}

template <typename Scalar>
void ema_update(DualCodebook<Scalar>& book, const Grid<Scalar>& features, const TokenGrid& tokens) {
  const Grid<Scalar>* f = &features;
  const TokenGrid* t = &tokens;
  ema_update(book, std::span<const Grid<Scalar>* const>(&f, 1), std::span<const TokenGrid* const>(&t, 1));
}

/// Assignment counts per entry per bank over a stream of token grids.
struct UsageHistogram {
  VectorX<std::int64_t> counts_e;
  VectorX<std::int64_t> counts_e_prime;

  UsageHistogram(int K, int K_prime)
      : counts_e(VectorX<std::int64_t>::Zero(K)), counts_e_prime(VectorX<std::int64_t>::Zero(K_prime)) {}

  void accumulate(const TokenGrid& tokens) {
    for (int i = 0; i < tokens.height(); ++i)
      for (int j = 0; j < tokens.width(); ++j) {
        const int k = tokens.data(i, j);
        if (tokens.bank(i, j)) {
          require(k >= 0 && k < counts_e.size(), "codebook_usage: token out of range");
          ++counts_e(k);
        } else {
          require(k >= 0 && k < counts_e_prime.size(), "codebook_usage: token out of range");
          ++counts_e_prime(k);
        }
      }
  }
};

}  // namespace patchfill
