#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "msrf/tensor.hpp"

namespace msrf {

inline constexpr double kBinarizeThreshold = 0.5;

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

template <std::floating_point T>
Tensor<T> binarize(const Tensor<T>& x, double threshold = kBinarizeThreshold) {
  Tensor<T> out = x;
  for (auto& v : out.data()) v = static_cast<double>(v) >= threshold ? T{1} : T{0};
  return out;
}

/// Pixel counts for two binary masks of identical size.
template <std::floating_point T>
ConfusionCounts confusion_counts(std::span<const T> pred, std::span<const T> gt) {
  if (pred.size() != gt.size()) {
    throw ShapeError("confusion_counts: " + std::to_string(pred.size()) + " vs " +
                     std::to_string(gt.size()) + " pixels");
  }
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != T{0}, g = gt[i] != T{0};
    if ((pred[i] != T{0} && pred[i] != T{1}) || (gt[i] != T{0} && gt[i] != T{1})) {
      throw UsageError("confusion_counts: masks must be binary");
    }
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

// Two empty masks agree perfectly, so 0/0 cases with nothing missed score 1.

inline double dsc(const ConfusionCounts& c) {
  const auto den = 2 * c.tp + c.fp + c.fn;
  return den == 0 ? 1.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(den);
}

inline double iou(const ConfusionCounts& c) {
  const auto den = c.tp + c.fp + c.fn;
  return den == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(den);
}

inline double recall(const ConfusionCounts& c) {
  const auto den = c.tp + c.fn;
  if (den == 0) return c.fp == 0 ? 1.0 : 0.0;
  return static_cast<double>(c.tp) / static_cast<double>(den);
}

inline double precision(const ConfusionCounts& c) {
  const auto den = c.tp + c.fp;
  if (den == 0) return c.fn == 0 ? 1.0 : 0.0;
  return static_cast<double>(c.tp) / static_cast<double>(den);
}

// ---- statistics ----

namespace detail {

// Continued fraction for the incomplete beta function (modified Lentz).
inline double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-15;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::fabs(delta - 1.0) < kEps) return h;
  }
  throw NumericError("incomplete beta continued fraction did not converge");
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0 && b > 0.0)) throw NumericError("incomplete_beta: a, b must be positive");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

/// Two-sided tail probability of Student's t with df degrees of freedom.
inline double student_t_two_sided_p(double t, double df) {
  return incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
}

struct TTestResult {
  double t = 0.0;
  std::size_t df = 0;
  double p = 1.0;
};

/// Paired t-test on a[i] - b[i].
inline TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw UsageError("paired_t_test: samples differ in length");
  const std::size_t n = a.size();
  if (n < 2) throw UsageError("paired_t_test: need at least two pairs");
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a[i] - b[i] - mean;
    ss += d * d;
  }
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (!(sd > 0.0)) throw NumericError("paired_t_test: differences have zero variance");
  TTestResult r;
  r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  r.df = n - 1;
  r.p = student_t_two_sided_p(r.t, static_cast<double>(r.df));
  return r;
}

struct Summary {
  double mean = 0.0;
  double stddev = 0.0;  // population (divide by n)
};

inline Summary summarize(std::span<const double> v) {
  Summary s;
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - s.mean) * (x - s.mean);
  s.stddev = std::sqrt(ss / static_cast<double>(v.size()));
  return s;
}

// ---- report ----

struct ImageMetrics {
  std::string id;
  double dsc = 0.0, miou = 0.0, recall = 0.0, precision = 0.0;
};

inline ImageMetrics image_metrics(std::string id, const ConfusionCounts& c) {
  return {std::move(id), dsc(c), iou(c), recall(c), precision(c)};
}

struct MetricsReport {
  std::vector<ImageMetrics> rows;
  Summary dsc, miou, recall, precision;
  std::optional<double> fps;
  std::optional<TTestResult> ttest;

  static MetricsReport from_rows(std::vector<ImageMetrics> rows) {
    MetricsReport r;
    r.rows = std::move(rows);
    std::vector<double> d, m, re, p;
    for (const auto& row : r.rows) {
      d.push_back(row.dsc);
      m.push_back(row.miou);
      re.push_back(row.recall);
      p.push_back(row.precision);
    }
    r.dsc = summarize(d);
    r.miou = summarize(m);
    r.recall = summarize(re);
    r.precision = summarize(p);
    return r;
  }

  std::vector<double> dsc_values() const {
    std::vector<double> v;
    for (const auto& row : rows) v.push_back(row.dsc);
    return v;
  }

  /// Comma-separated, one row per image.
  std::string to_csv() const {
    std::string out = "image_id,dsc,miou,recall,precision\n";
    char buf[160];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, ",%.10f,%.10f,%.10f,%.10f\n", r.dsc, r.miou, r.recall,
                    r.precision);
      out += r.id + buf;
    }
    return out;
  }

  /// Aligned plain-text table with a mean +- std footer.
  std::string to_table() const {
    std::size_t idw = 8;
    for (const auto& r : rows) idw = std::max(idw, r.id.size());
    std::ostringstream os;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-*s  %8s  %8s  %8s  %9s\n", static_cast<int>(idw), "image_id",
                  "dsc", "miou", "recall", "precision");
    os << buf;
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%-*s  %8.4f  %8.4f  %8.4f  %9.4f\n", static_cast<int>(idw),
                    r.id.c_str(), r.dsc, r.miou, r.recall, r.precision);
      os << buf;
    }
    std::snprintf(buf, sizeof buf,
                  "mean +- std: dsc %.4f +- %.4f | miou %.4f +- %.4f | recall %.4f +- %.4f | "
                  "precision %.4f +- %.4f\n",
                  dsc.mean, dsc.stddev, miou.mean, miou.stddev, recall.mean, recall.stddev,
                  precision.mean, precision.stddev);
    os << buf;
    if (fps) {
      std::snprintf(buf, sizeof buf, "fps: %.2f\n", *fps);
      os << buf;
    }
    if (ttest) {
      std::snprintf(buf, sizeof buf, "paired t-test vs baseline: t = %.4f, df = %zu, p = %.4e\n",
                    ttest->t, ttest->df, ttest->p);
      os << buf;
    }
    return os.str();
  }
};

/// Images per second over `trials` calls of forward_once (each processing
/// `images_per_call` images) after one untimed warm-up call.
template <class Fn>
double measure_fps(Fn&& forward_once, std::size_t images_per_call, std::size_t trials) {
  if (trials < 1 || images_per_call < 1) throw UsageError("measure_fps: need >= 1 trial and image");
  forward_once();
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < trials; ++i) forward_once();
  const double elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double safe = std::max(elapsed, std::numeric_limits<double>::min());
  return static_cast<double>(images_per_call * trials) / safe;
}

}  // namespace msrf
