#pragma once

// Hand-rolled reference implementations the tests compare against. These are
// written as direct loops so they share no code with the library paths.

#include <cmath>
#include <cstddef>
#include <vector>

#include "panp/tensor.hpp"

namespace oracles {

// Per-query attention loop: explicit score, softmax, weighted sum.
inline std::vector<double> naive_attention(const panp::Tensor& q, const panp::Tensor& k,
                                           const panp::Tensor& v) {
  const size_t qr = q.rows(), n = k.rows(), d = q.cols(), dv = v.cols();
  std::vector<double> out(qr * dv, 0.0);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (size_t i = 0; i < qr; ++i) {
    std::vector<double> score(n, 0.0);
    for (size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (size_t c = 0; c < d; ++c) s += q.at(i, c) * k.at(j, c);
      score[j] = s * scale;
    }
    double m = score[0];
    for (double s : score) m = std::max(m, s);
    double z = 0.0;
    std::vector<double> e(n);
    for (size_t j = 0; j < n; ++j) {
      e[j] = std::exp(score[j] - m);
      z += e[j];
    }
    for (size_t j = 0; j < n; ++j) {
      const double w = e[j] / z;
      for (size_t c = 0; c < dv; ++c) out[i * dv + c] += w * v.at(j, c);
    }
  }
  return out;
}

// Full multi-head attention by loops: project, split heads, attend, merge,
// output-project.
inline std::vector<double> naive_mha(const panp::Tensor& wq, const panp::Tensor& wk,
                                     const panp::Tensor& wv, const panp::Tensor& wo,
                                     size_t n_heads, const panp::Tensor& q_in,
                                     const panp::Tensor& k_in, const panp::Tensor& v_in) {
  const size_t nq = q_in.rows(), nk = k_in.rows(), d = wq.rows();
  const size_t dh = d / n_heads;
  auto project = [d](const panp::Tensor& x, const panp::Tensor& w) {
    std::vector<double> out(x.rows() * d, 0.0);
    for (size_t i = 0; i < x.rows(); ++i)
      for (size_t j = 0; j < d; ++j) {
        double s = 0.0;
        for (size_t p = 0; p < d; ++p) s += x.at(i, p) * w.at(p, j);
        out[i * d + j] = s;
      }
    return out;
  };
  std::vector<double> q = project(q_in, wq), k = project(k_in, wk), v = project(v_in, wv);
  std::vector<double> merged(nq * d, 0.0);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (size_t h = 0; h < n_heads; ++h) {
    const size_t c0 = h * dh;
    for (size_t i = 0; i < nq; ++i) {
      std::vector<double> score(nk, 0.0);
      for (size_t j = 0; j < nk; ++j) {
        double s = 0.0;
        for (size_t c = 0; c < dh; ++c) s += q[i * d + c0 + c] * k[j * d + c0 + c];
        score[j] = s * scale;
      }
      double m = score[0];
      for (double s : score) m = std::max(m, s);
      double z = 0.0;
      std::vector<double> e(nk);
      for (size_t j = 0; j < nk; ++j) {
        e[j] = std::exp(score[j] - m);
        z += e[j];
      }
      for (size_t j = 0; j < nk; ++j) {
        const double w = e[j] / z;
        for (size_t c = 0; c < dh; ++c) merged[i * d + c0 + c] += w * v[j * d + c0 + c];
      }
    }
  }
  std::vector<double> out(nq * d, 0.0);
  for (size_t i = 0; i < nq; ++i)
    for (size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (size_t p = 0; p < d; ++p) s += merged[i * d + p] * wo.at(p, j);
      out[i * d + j] = s;
    }
  return out;
}

// Diagonal-Gaussian log density, summed over elements.
inline double gaussian_logpdf(const std::vector<double>& y, const std::vector<double>& mu,
                              const std::vector<double>& sigma) {
  double lp = 0.0;
  for (size_t i = 0; i < y.size(); ++i) {
    const double z = (y[i] - mu[i]) / sigma[i];
    lp += -0.5 * z * z - std::log(sigma[i]) - 0.5 * std::log(2.0 * 3.14159265358979323846);
  }
  return lp;
}

// KL(N(mu1, sig1^2) || N(mu2, sig2^2)) for diagonal Gaussians, summed.
inline double kl_diag(const std::vector<double>& mu1, const std::vector<double>& sig1,
                      const std::vector<double>& mu2, const std::vector<double>& sig2) {
  double kl = 0.0;
  for (size_t i = 0; i < mu1.size(); ++i) {
    const double v1 = sig1[i] * sig1[i], v2 = sig2[i] * sig2[i];
    kl += std::log(sig2[i] / sig1[i]) + (v1 + (mu1[i] - mu2[i]) * (mu1[i] - mu2[i])) / (2.0 * v2) -
          0.5;
  }
  return kl;
}

}  // namespace oracles
