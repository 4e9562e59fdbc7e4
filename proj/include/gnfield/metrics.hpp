#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "gnfield/tensor.hpp"

namespace gnfield {

constexpr double kPsnrCap = 99.0;

// Peak signal-to-noise ratio in dB for images in [0,1]; identical images are
// capped at 99 dB.
inline double psnr(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape != b.shape) throw std::invalid_argument("psnr: shape mismatch");
  double mse = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    mse += d * d;
  }
  mse /= static_cast<double>(a.numel());
  if (mse <= 0) return kPsnrCap;
  return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

// Windowed SSIM (11x11 Gaussian, sigma 1.5, C1=0.01^2, C2=0.03^2), computed
// per channel over valid window positions and averaged.
inline double ssim(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape != b.shape) throw std::invalid_argument("ssim: shape mismatch");
  const int64_t H = a.shape[0], W = a.shape[1];
  const int64_t C = a.shape.nd >= 3 ? a.shape[2] : 1;
  constexpr int kRadius = 5;
  constexpr int kWin = 2 * kRadius + 1;
  double kernel[kWin];
  {
    double sum = 0;
    for (int i = 0; i < kWin; ++i) {
      const double x = i - kRadius;
      kernel[i] = std::exp(-x * x / (2 * 1.5 * 1.5));
      sum += kernel[i];
    }
    for (double& k : kernel) k /= sum;
  }
  if (H < kWin || W < kWin) throw std::invalid_argument("ssim: image smaller than the window");
  constexpr double kC1 = 0.01 * 0.01;
  constexpr double kC2 = 0.03 * 0.03;

  const int64_t Ho = H - kWin + 1, Wo = W - kWin + 1;
  std::vector<double> rowbuf(static_cast<size_t>(W));
  auto blur = [&](const std::vector<double>& img, std::vector<double>& out) {
    // separable valid-mode convolution
    std::vector<double> tmp(static_cast<size_t>(H * Wo));
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < Wo; ++x) {
        double acc = 0;
        for (int i = 0; i < kWin; ++i) acc += kernel[i] * img[static_cast<size_t>(y * W + x + i)];
        tmp[static_cast<size_t>(y * Wo + x)] = acc;
      }
    out.assign(static_cast<size_t>(Ho * Wo), 0.0);
    for (int64_t y = 0; y < Ho; ++y)
      for (int64_t x = 0; x < Wo; ++x) {
        double acc = 0;
        for (int i = 0; i < kWin; ++i) acc += kernel[i] * tmp[static_cast<size_t>((y + i) * Wo + x)];
        out[static_cast<size_t>(y * Wo + x)] = acc;
      }
  };

  double total = 0;
  std::vector<double> xa(static_cast<size_t>(H * W)), xb(static_cast<size_t>(H * W));
  std::vector<double> xab(static_cast<size_t>(H * W)), xaa(static_cast<size_t>(H * W)),
      xbb(static_cast<size_t>(H * W));
  std::vector<double> mu_a, mu_b, m_ab, m_aa, m_bb;
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t i = 0; i < H * W; ++i) {
      const double va = a[i * C + c], vb = b[i * C + c];
      xa[static_cast<size_t>(i)] = va;
      xb[static_cast<size_t>(i)] = vb;
      xab[static_cast<size_t>(i)] = va * vb;
      xaa[static_cast<size_t>(i)] = va * va;
      xbb[static_cast<size_t>(i)] = vb * vb;
    }
    blur(xa, mu_a);
    blur(xb, mu_b);
    blur(xab, m_ab);
    blur(xaa, m_aa);
    blur(xbb, m_bb);
    double acc = 0;
    for (size_t i = 0; i < mu_a.size(); ++i) {
      const double ma = mu_a[i], mb = mu_b[i];
      const double va = m_aa[i] - ma * ma;
      const double vb = m_bb[i] - mb * mb;
      const double cov = m_ab[i] - ma * mb;
      acc += ((2 * ma * mb + kC1) * (2 * cov + kC2)) /
             ((ma * ma + mb * mb + kC1) * (va + vb + kC2));
    }
    total += acc / static_cast<double>(mu_a.size());
  }
  return total / static_cast<double>(C);
}

// Pearson correlation over entries where both masks are set.
inline double pearson_masked(const Tensor<float>& a, const Tensor<float>& b,
                             const std::vector<uint8_t>& mask) {
  double sa = 0, sb = 0;
  int64_t n = 0;
  for (int64_t i = 0; i < a.numel(); ++i)
    if (mask[static_cast<size_t>(i)]) {
      sa += a[i];
      sb += b[i];
      ++n;
    }
  if (n < 2) return 0;
  const double ma = sa / n, mb = sb / n;
  double caa = 0, cbb = 0, cab = 0;
  for (int64_t i = 0; i < a.numel(); ++i)
    if (mask[static_cast<size_t>(i)]) {
      const double da = a[i] - ma, db = b[i] - mb;
      caa += da * da;
      cbb += db * db;
      cab += da * db;
    }
  if (caa <= 0 || cbb <= 0) return 0;
  return cab / std::sqrt(caa * cbb);
}

}  // namespace gnfield
