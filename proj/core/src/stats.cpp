#include <cmath>

#include "kil/common.hpp"
#include "kil/evaluation.hpp"

namespace kil::eval {

namespace {

// Continued fraction for the incomplete beta function (modified Lentz).
double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 1e-15;
  constexpr double kTiny = 1e-300;

  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace

double regularized_incomplete_beta(double a, double b, double x) {
  require(a > 0.0 && b > 0.0, "invalid-counts", "beta parameters must be positive");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_bt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                       a * std::log(x) + b * std::log1p(-x);
  const double bt = std::exp(ln_bt);
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return bt * beta_continued_fraction(a, b, x) / a;
  }
  return 1.0 - bt * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double beta_inv(double p, double a, double b) {
  if (p <= 0.0) return 0.0;
  if (p >= 1.0) return 1.0;
  double lo = 0.0, hi = 1.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (regularized_incomplete_beta(a, b, mid) < p) {
      lo = mid;
    } else {
      hi = mid;
    }
    if (hi - lo < 1e-12) break;
  }
  return 0.5 * (lo + hi);
}

std::pair<double, double> clopper_pearson_ci(int k, int n, double confidence) {
  require(n >= 1 && k >= 0 && k <= n, "invalid-counts",
          "need 0 <= k <= n with n >= 1");
  require(confidence > 0.0 && confidence < 1.0, "invalid-counts",
          "confidence must lie in (0, 1)");
  const double alpha = 1.0 - confidence;
  const double lo = (k == 0) ? 0.0 : beta_inv(alpha / 2.0, k, n - k + 1);
  const double hi = (k == n) ? 1.0 : beta_inv(1.0 - alpha / 2.0, k + 1, n - k);
  return {lo, hi};
}

std::pair<double, double> wald_ci(const std::vector<double>& scores,
                                  double confidence) {
  const int n = static_cast<int>(scores.size());
  if (n < 2) fail("insufficient-samples", "Wald CI needs at least 2 scores");
  require(confidence == 0.95, "unsupported-confidence",
          "only the 95% Wald interval (z = 1.96) is supported");
  double mean = 0.0;
  for (double s : scores) mean += s;
  mean /= n;
  double ss = 0.0;
  for (double s : scores) ss += (s - mean) * (s - mean);
  const double stddev = std::sqrt(ss / (n - 1));
  const double half = 1.96 * stddev / std::sqrt(static_cast<double>(n));
  return {mean - half, mean + half};
}

}  // namespace kil::eval
