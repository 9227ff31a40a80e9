// Dense reference implementations used as independent oracles by the tests.
// Everything here works on plain row-major std::vector<double> and shares no
// code with the library's ops.
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "pmf/encoder.hpp"
#include "pmf/fusion.hpp"

namespace oracle {

struct Mat {
  std::size_t r = 0, c = 0;
  std::vector<double> v;

  double& at(std::size_t i, std::size_t j) { return v[i * c + j]; }
  double at(std::size_t i, std::size_t j) const { return v[i * c + j]; }
};

inline Mat of(const pmf::Tensor& t) { return Mat{t.rows(), t.cols(), t.to_vector()}; }

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat o{a.r, b.c, std::vector<double>(a.r * b.c, 0.0)};
  for (std::size_t i = 0; i < a.r; ++i)
    for (std::size_t j = 0; j < b.c; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.c; ++k) s += a.at(i, k) * b.at(k, j);
      o.at(i, j) = s;
    }
  return o;
}

inline Mat add_row(Mat a, const Mat& bias) {
  for (std::size_t i = 0; i < a.r; ++i)
    for (std::size_t j = 0; j < a.c; ++j) a.at(i, j) += bias.v[j];
  return a;
}

inline Mat affine(const Mat& x, const pmf::Tensor& w, const pmf::Tensor& b) {
  return add_row(matmul(x, of(w)), of(b));
}

inline Mat layer_norm(const Mat& x, const pmf::Tensor& gain, const pmf::Tensor& bias, double eps) {
  const auto g = gain.to_vector(), b = bias.to_vector();
  Mat o = x;
  for (std::size_t i = 0; i < x.r; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < x.c; ++j) mean += x.at(i, j);
    mean /= static_cast<double>(x.c);
    double var = 0.0;
    for (std::size_t j = 0; j < x.c; ++j) var += (x.at(i, j) - mean) * (x.at(i, j) - mean);
    var /= static_cast<double>(x.c);
    for (std::size_t j = 0; j < x.c; ++j) o.at(i, j) = (x.at(i, j) - mean) / std::sqrt(var + eps) * g[j] + b[j];
  }
  return o;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

/// Pre-norm transformer layer with multi-head attention over unmasked keys.
/// Masked rows come back unchanged.
inline Mat layer(const Mat& x, const std::vector<std::uint8_t>& mask, const pmf::LayerParams& p,
                 const pmf::EncoderConfig& cfg) {
  const std::size_t n = x.r, d = x.c, hd = d / cfg.heads;
  const Mat h = layer_norm(x, p.ln1_gain, p.ln1_bias, cfg.ln_eps);
  const Mat q = affine(h, p.wq, p.bq), k = affine(h, p.wk, p.bk), v = affine(h, p.wv, p.bv);
  Mat ctx{n, d, std::vector<double>(n * d, 0.0)};
  for (std::size_t head = 0; head < cfg.heads; ++head) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> logits(n, -std::numeric_limits<double>::infinity());
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        if (!mask[j]) continue;
        double s = 0.0;
        for (std::size_t t = 0; t < hd; ++t) s += q.at(i, head * hd + t) * k.at(j, head * hd + t);
        logits[j] = s / std::sqrt(static_cast<double>(hd));
        mx = std::max(mx, logits[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) z += mask[j] ? std::exp(logits[j] - mx) : 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (!mask[j]) continue;
        const double pij = std::exp(logits[j] - mx) / z;
        for (std::size_t t = 0; t < hd; ++t) ctx.at(i, head * hd + t) += pij * v.at(j, head * hd + t);
      }
    }
  }
  const Mat a = affine(ctx, p.wo, p.bo);
  Mat x1 = x;
  for (std::size_t i = 0; i < n; ++i)
    if (mask[i])
      for (std::size_t j = 0; j < d; ++j) x1.at(i, j) += a.at(i, j);
  const Mat h2 = layer_norm(x1, p.ln2_gain, p.ln2_bias, cfg.ln_eps);
  Mat u = affine(h2, p.w_up, p.b_up);
  for (auto& e : u.v) e = gelu(e);
  const Mat m = affine(u, p.w_down, p.b_down);
  Mat out = x1;
  for (std::size_t i = 0; i < n; ++i)
    if (mask[i])
      for (std::size_t j = 0; j < d; ++j) out.at(i, j) += m.at(i, j);
  return out;
}

inline Mat stack(const std::vector<const Mat*>& parts) {
  Mat o;
  for (const Mat* p : parts) {
    if (p->r == 0) continue;
    o.c = p->c;
    o.r += p->r;
    o.v.insert(o.v.end(), p->v.begin(), p->v.end());
  }
  return o;
}

inline Mat rows(const Mat& x, std::size_t begin, std::size_t end) {
  Mat o{end - begin, x.c, {}};
  o.v.assign(x.v.begin() + static_cast<std::ptrdiff_t>(begin * x.c),
             x.v.begin() + static_cast<std::ptrdiff_t>(end * x.c));
  return o;
}

inline Mat maybe(const pmf::Tensor& t) { return t.defined() ? of(t) : Mat{}; }

/// Layer on [z || qcp || qp], last |qp| rows.
inline Mat querying(const Mat& z, const std::vector<std::uint8_t>& mask, const pmf::Tensor& qcp,
                    const pmf::Tensor& qp, const pmf::LayerParams& p, const pmf::EncoderConfig& cfg) {
  const Mat mc = maybe(qcp), mq = maybe(qp);
  const Mat full = stack({&z, &mc, &mq});
  std::vector<std::uint8_t> m = mask;
  m.resize(full.r, 1);
  const Mat out = layer(full, m, p, cfg);
  return rows(out, full.r - mq.r, full.r);
}

/// Row-wise W2 relu(W1 x + b1) + b2.
inline Mat mapping(const Mat& x, const pmf::MappingFunction& f) {
  if (f.identity) return x;
  Mat h = affine(x, f.w1, f.b1);
  for (auto& e : h.v) e = std::max(0.0, e);
  return affine(h, f.w2, f.b2);
}

/// Layer on [z' || fcp || y], first |z'| rows.
inline Mat fusion(const Mat& z, const std::vector<std::uint8_t>& mask, const pmf::Tensor& fcp,
                  const Mat& y, const pmf::LayerParams& p, const pmf::EncoderConfig& cfg) {
  const Mat mf = maybe(fcp);
  const Mat full = stack({&z, &mf, &y});
  std::vector<std::uint8_t> m = mask;
  m.resize(full.r, 1);
  return rows(layer(full, m, p, cfg), 0, z.r);
}

inline double max_abs_diff(const Mat& a, const std::vector<double>& b) {
  if (a.v.size() != b.size()) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) m = std::max(m, std::abs(a.v[i] - b[i]));
  return m;
}

}  // namespace oracle
