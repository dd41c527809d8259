#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace brainseg {

/// Dense NCHW batch in double precision.
struct Tensor {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_, double fill = 0.0)
      : n(n_), c(c_), h(h_), w(w_), data(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  std::size_t offset(int b, int ch) const { return (static_cast<std::size_t>(b) * c + ch) * plane(); }
  double& at(int b, int ch, int row, int col) { return data[offset(b, ch) + static_cast<std::size_t>(row) * w + col]; }
  double at(int b, int ch, int row, int col) const {
    return data[offset(b, ch) + static_cast<std::size_t>(row) * w + col];
  }
  double* item(int b) { return data.data() + offset(b, 0); }
  const double* item(int b) const { return data.data() + offset(b, 0); }

  bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }
  std::string shape_string() const {
    return "(" + std::to_string(n) + ", " + std::to_string(c) + ", " + std::to_string(h) + ", " + std::to_string(w) + ")";
  }
};

}  // namespace brainseg
