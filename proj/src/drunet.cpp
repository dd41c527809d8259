#include "brainseg/drunet.hpp"

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <random>

#include "brainseg/error.hpp"

namespace brainseg {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

void snap_to_float(std::vector<double>& values) {
  for (auto& v : values) v = static_cast<double>(static_cast<float>(v));
}

void DRUNetConfig::validate() const {
  if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (base_filters < 1) throw ConfigError("base_filters must be >= 1");
  for (int d : down_dilations) {
    if (d < 1) throw ConfigError("dilations must be >= 1");
  }
  for (int d : up_dilations) {
    if (d < 1) throw ConfigError("dilations must be >= 1");
  }
  if (upsample_kernel != 2 && upsample_kernel != 3) throw ConfigError("upsample_kernel must be 2 or 3");
}

namespace {

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;
constexpr int kKernel = 3;

struct ConvRef {
  int weight = -1;
  int bias = -1;
  int cin = 0;
  int cout = 0;
  int k = 0;
  int dilation = 1;
};

struct BnRef {
  int gamma = -1;
  int beta = -1;
  int mean = -1;
  int var = -1;
  int channels = 0;
};

struct BlockRef {
  bool residual = false;
  ConvRef conv1, conv2;
  BnRef bn1, bn2;
  bool projected = false;
  ConvRef shortcut;
  BnRef shortcut_bn;
};

struct UpRef {
  int weight = -1;
  int bias = -1;
  int cin = 0;
  int cout = 0;
  int k = 0;
};

struct BnCache {
  std::vector<double> xhat;
  std::vector<double> inv_std;
};

struct BlockTrace {
  Tensor input;
  BnCache bn1;
  Tensor act1;
  BnCache bn2;
  BnCache shortcut_bn;
  Tensor output;
};

struct BatchStat {
  BnRef ref;
  std::vector<double> mean;
  std::vector<double> var_unbiased;
};

struct Trace {
  std::array<BlockTrace, 6> blocks;
  std::vector<int> pool_index[2];
  int pool_h[2] = {0, 0};
  int pool_w[2] = {0, 0};
  std::vector<BatchStat> stats;
};

// ---------------------------------------------------------------------------
// Convolution (stride 1, dilated, zero "same" padding) via im2col + GEMM.

void im2col(const double* img, int cin, int h, int w, int k, int dil, double* col) {
  const int half = k / 2;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int ci = 0; ci < cin; ++ci) {
    const double* src = img + ci * hw;
    for (int ky = 0; ky < k; ++ky) {
      const int oy = (ky - half) * dil;
      for (int kx = 0; kx < k; ++kx) {
        const int ox = (kx - half) * dil;
        double* dst = col + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * hw;
        const int x_lo = std::max(0, -ox);
        const int x_hi = std::min(w, w - ox);
        for (int y = 0; y < h; ++y) {
          double* row = dst + static_cast<std::size_t>(y) * w;
          const int sy = y + oy;
          if (sy < 0 || sy >= h || x_lo >= x_hi) {
            std::fill(row, row + w, 0.0);
            continue;
          }
          const double* srow = src + static_cast<std::size_t>(sy) * w + ox;
          std::fill(row, row + x_lo, 0.0);
          for (int x = x_lo; x < x_hi; ++x) row[x] = srow[x];
          std::fill(row + x_hi, row + w, 0.0);
        }
      }
    }
  }
}

void col2im_add(const double* col, int cin, int h, int w, int k, int dil, double* img) {
  const int half = k / 2;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int ci = 0; ci < cin; ++ci) {
    double* dst = img + ci * hw;
    for (int ky = 0; ky < k; ++ky) {
      const int oy = (ky - half) * dil;
      for (int kx = 0; kx < k; ++kx) {
        const int ox = (kx - half) * dil;
        const double* src = col + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * hw;
        const int x_lo = std::max(0, -ox);
        const int x_hi = std::min(w, w - ox);
        for (int y = 0; y < h; ++y) {
          const int sy = y + oy;
          if (sy < 0 || sy >= h) continue;
          const double* row = src + static_cast<std::size_t>(y) * w;
          double* drow = dst + static_cast<std::size_t>(sy) * w + ox;
          for (int x = x_lo; x < x_hi; ++x) drow[x] += row[x];
        }
      }
    }
  }
}

Tensor conv_forward(const std::vector<ParameterArray>& arrays, const ConvRef& r, const Tensor& in) {
  const int hw = in.h * in.w;
  const int kk = r.k * r.k;
  Tensor out(in.n, r.cout, in.h, in.w);
  ConstMatrixMap weight(arrays[r.weight].value.data(), r.cout, static_cast<Eigen::Index>(r.cin) * kk);
  Eigen::Map<const Eigen::VectorXd> bias(arrays[r.bias].value.data(), r.cout);
  RowMatrix col;
  if (r.k != 1) col.resize(static_cast<Eigen::Index>(r.cin) * kk, hw);
  for (int b = 0; b < in.n; ++b) {
    MatrixMap o(out.item(b), r.cout, hw);
    if (r.k == 1) {
      o.noalias() = weight * ConstMatrixMap(in.item(b), r.cin, hw);
    } else {
      im2col(in.item(b), r.cin, in.h, in.w, r.k, r.dilation, col.data());
      o.noalias() = weight * col;
    }
    o.colwise() += bias;
  }
  return out;
}

/// Accumulates weight/bias gradients and returns dL/d(input).
Tensor conv_backward(std::vector<ParameterArray>& arrays, const ConvRef& r, const Tensor& in, const Tensor& dout) {
  const int hw = in.h * in.w;
  const int kk = r.k * r.k;
  const auto ckk = static_cast<Eigen::Index>(r.cin) * kk;
  ConstMatrixMap weight(arrays[r.weight].value.data(), r.cout, ckk);
  MatrixMap dweight(arrays[r.weight].grad.data(), r.cout, ckk);
  Eigen::Map<Eigen::VectorXd> dbias(arrays[r.bias].grad.data(), r.cout);
  Tensor din(in.n, in.c, in.h, in.w);
  RowMatrix col(ckk, hw);
  for (int b = 0; b < in.n; ++b) {
    ConstMatrixMap d(dout.item(b), r.cout, hw);
    dbias += d.rowwise().sum();
    if (r.k == 1) {
      ConstMatrixMap x(in.item(b), r.cin, hw);
      dweight.noalias() += d * x.transpose();
      MatrixMap(din.item(b), r.cin, hw).noalias() = weight.transpose() * d;
    } else {
      im2col(in.item(b), r.cin, in.h, in.w, r.k, r.dilation, col.data());
      dweight.noalias() += d * col.transpose();
      col.noalias() = weight.transpose() * d;
      col2im_add(col.data(), r.cin, in.h, in.w, r.k, r.dilation, din.item(b));
    }
  }
  return din;
}

// ---------------------------------------------------------------------------
// Stride-2 transposed convolution. Output pixel (2y + ky, 2x + kx) receives
// input pixel (y, x) through tap (ky, kx); taps past 2H or 2W are dropped.

Tensor upsample_forward(const std::vector<ParameterArray>& arrays, const UpRef& r, const Tensor& in) {
  const int hw = in.h * in.w;
  const int kk = r.k * r.k;
  const int oh = in.h * 2;
  const int ow = in.w * 2;
  Tensor out(in.n, r.cout, oh, ow);
  ConstMatrixMap weight(arrays[r.weight].value.data(), r.cin, static_cast<Eigen::Index>(r.cout) * kk);
  const auto& bias = arrays[r.bias].value;
  RowMatrix cols(static_cast<Eigen::Index>(r.cout) * kk, hw);
  for (int b = 0; b < in.n; ++b) {
    cols.noalias() = weight.transpose() * ConstMatrixMap(in.item(b), r.cin, hw);
    double* o = out.item(b);
    for (int co = 0; co < r.cout; ++co) {
      double* oc = o + static_cast<std::size_t>(co) * oh * ow;
      std::fill(oc, oc + static_cast<std::size_t>(oh) * ow, bias[co]);
      for (int ky = 0; ky < r.k; ++ky) {
        for (int kx = 0; kx < r.k; ++kx) {
          const double* src = cols.data() + (static_cast<std::size_t>(co) * kk + ky * r.k + kx) * hw;
          for (int y = 0; y < in.h; ++y) {
            const int yy = 2 * y + ky;
            if (yy >= oh) continue;
            for (int x = 0; x < in.w; ++x) {
              const int xx = 2 * x + kx;
              if (xx >= ow) continue;
              oc[static_cast<std::size_t>(yy) * ow + xx] += src[static_cast<std::size_t>(y) * in.w + x];
            }
          }
        }
      }
    }
  }
  return out;
}

Tensor upsample_backward(std::vector<ParameterArray>& arrays, const UpRef& r, const Tensor& in, const Tensor& dout) {
  const int hw = in.h * in.w;
  const int kk = r.k * r.k;
  const int oh = dout.h;
  const int ow = dout.w;
  const auto ckk = static_cast<Eigen::Index>(r.cout) * kk;
  ConstMatrixMap weight(arrays[r.weight].value.data(), r.cin, ckk);
  MatrixMap dweight(arrays[r.weight].grad.data(), r.cin, ckk);
  auto& dbias = arrays[r.bias].grad;
  Tensor din(in.n, in.c, in.h, in.w);
  RowMatrix dcols(ckk, hw);
  for (int b = 0; b < in.n; ++b) {
    const double* d = dout.item(b);
    for (int co = 0; co < r.cout; ++co) {
      const double* dc = d + static_cast<std::size_t>(co) * oh * ow;
      double s = 0.0;
      for (std::size_t i = 0; i < static_cast<std::size_t>(oh) * ow; ++i) s += dc[i];
      dbias[co] += s;
      for (int ky = 0; ky < r.k; ++ky) {
        for (int kx = 0; kx < r.k; ++kx) {
          double* dst = dcols.data() + (static_cast<std::size_t>(co) * kk + ky * r.k + kx) * hw;
          for (int y = 0; y < in.h; ++y) {
            const int yy = 2 * y + ky;
            for (int x = 0; x < in.w; ++x) {
              const int xx = 2 * x + kx;
              dst[static_cast<std::size_t>(y) * in.w + x] =
                  (yy < oh && xx < ow) ? dc[static_cast<std::size_t>(yy) * ow + xx] : 0.0;
            }
          }
        }
      }
    }
    ConstMatrixMap x(in.item(b), r.cin, hw);
    dweight.noalias() += x * dcols.transpose();
    MatrixMap(din.item(b), r.cin, hw).noalias() = weight * dcols;
  }
  return din;
}

// ---------------------------------------------------------------------------
// Batch normalization over (N, H, W) per channel.

void bn_forward(const std::vector<ParameterArray>& arrays, const BnRef& r, Tensor& x, BnCache* cache,
                std::vector<BatchStat>* stats) {
  const auto& gamma = arrays[r.gamma].value;
  const auto& beta = arrays[r.beta].value;
  const std::size_t plane = x.plane();
  const double m = static_cast<double>(x.n) * static_cast<double>(plane);
  if (cache == nullptr) {
    const auto& rm = arrays[r.mean].value;
    const auto& rv = arrays[r.var].value;
    for (int ch = 0; ch < x.c; ++ch) {
      const double scale = gamma[ch] / std::sqrt(rv[ch] + kBnEps);
      const double shift = beta[ch] - rm[ch] * scale;
      for (int b = 0; b < x.n; ++b) {
        double* p = x.data.data() + x.offset(b, ch);
        for (std::size_t i = 0; i < plane; ++i) p[i] = p[i] * scale + shift;
      }
    }
    return;
  }
  cache->xhat.resize(x.size());
  cache->inv_std.resize(x.c);
  BatchStat stat{r, std::vector<double>(x.c), std::vector<double>(x.c)};
  for (int ch = 0; ch < x.c; ++ch) {
    double mean = 0.0;
    for (int b = 0; b < x.n; ++b) {
      const double* p = x.data.data() + x.offset(b, ch);
      for (std::size_t i = 0; i < plane; ++i) mean += p[i];
    }
    mean /= m;
    double var = 0.0;
    for (int b = 0; b < x.n; ++b) {
      const double* p = x.data.data() + x.offset(b, ch);
      for (std::size_t i = 0; i < plane; ++i) var += (p[i] - mean) * (p[i] - mean);
    }
    const double ssd = var;
    var /= m;
    const double inv = 1.0 / std::sqrt(var + kBnEps);
    cache->inv_std[ch] = inv;
    for (int b = 0; b < x.n; ++b) {
      double* p = x.data.data() + x.offset(b, ch);
      double* xh = cache->xhat.data() + x.offset(b, ch);
      for (std::size_t i = 0; i < plane; ++i) {
        xh[i] = (p[i] - mean) * inv;
        p[i] = gamma[ch] * xh[i] + beta[ch];
      }
    }
    stat.mean[ch] = mean;
    stat.var_unbiased[ch] = m > 1.0 ? ssd / (m - 1.0) : var;
  }
  if (stats) stats->push_back(std::move(stat));
}

Tensor bn_backward(std::vector<ParameterArray>& arrays, const BnRef& r, const BnCache& cache, const Tensor& dy) {
  const auto& gamma = arrays[r.gamma].value;
  auto& dgamma = arrays[r.gamma].grad;
  auto& dbeta = arrays[r.beta].grad;
  const std::size_t plane = dy.plane();
  const double m = static_cast<double>(dy.n) * static_cast<double>(plane);
  Tensor dx(dy.n, dy.c, dy.h, dy.w);
  for (int ch = 0; ch < dy.c; ++ch) {
    double sum_dy = 0.0;
    double sum_dy_xhat = 0.0;
    for (int b = 0; b < dy.n; ++b) {
      const double* d = dy.data.data() + dy.offset(b, ch);
      const double* xh = cache.xhat.data() + dy.offset(b, ch);
      for (std::size_t i = 0; i < plane; ++i) {
        sum_dy += d[i];
        sum_dy_xhat += d[i] * xh[i];
      }
    }
    dgamma[ch] += sum_dy_xhat;
    dbeta[ch] += sum_dy;
    const double k = gamma[ch] * cache.inv_std[ch] / m;
    for (int b = 0; b < dy.n; ++b) {
      const double* d = dy.data.data() + dy.offset(b, ch);
      const double* xh = cache.xhat.data() + dy.offset(b, ch);
      double* o = dx.data.data() + dy.offset(b, ch);
      for (std::size_t i = 0; i < plane; ++i) o[i] = k * (m * d[i] - sum_dy - xh[i] * sum_dy_xhat);
    }
  }
  return dx;
}

void relu_inplace(Tensor& x) {
  for (auto& v : x.data) v = v > 0.0 ? v : 0.0;
}

void relu_mask(const Tensor& activation, Tensor& grad) {
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!(activation.data[i] > 0.0)) grad.data[i] = 0.0;
  }
}

// ---------------------------------------------------------------------------

Tensor maxpool_forward(const Tensor& in, std::vector<int>* argmax) {
  Tensor out(in.n, in.c, in.h / 2, in.w / 2);
  if (argmax) argmax->assign(out.size(), 0);
  std::size_t o = 0;
  for (int b = 0; b < in.n; ++b) {
    for (int ch = 0; ch < in.c; ++ch) {
      const double* src = in.data.data() + in.offset(b, ch);
      for (int y = 0; y < out.h; ++y) {
        for (int x = 0; x < out.w; ++x, ++o) {
          int best = (2 * y) * in.w + 2 * x;
          const int cand[3] = {best + 1, best + in.w, best + in.w + 1};
          for (int c : cand) {
            if (src[c] > src[best]) best = c;
          }
          out.data[o] = src[best];
          if (argmax) (*argmax)[o] = best;
        }
      }
    }
  }
  return out;
}

Tensor maxpool_backward(const Tensor& dout, const std::vector<int>& argmax, int h, int w) {
  Tensor din(dout.n, dout.c, h, w);
  std::size_t o = 0;
  for (int b = 0; b < dout.n; ++b) {
    for (int ch = 0; ch < dout.c; ++ch) {
      double* dst = din.data.data() + din.offset(b, ch);
      for (std::size_t i = 0; i < dout.plane(); ++i, ++o) dst[argmax[o]] += dout.data[o];
    }
  }
  return din;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  Tensor out(a.n, a.c + b.c, a.h, a.w);
  for (int n = 0; n < a.n; ++n) {
    std::copy(a.item(n), a.item(n) + a.c * a.plane(), out.item(n));
    std::copy(b.item(n), b.item(n) + b.c * b.plane(), out.item(n) + a.c * a.plane());
  }
  return out;
}

std::pair<Tensor, Tensor> split_channels(const Tensor& t, int first) {
  Tensor a(t.n, first, t.h, t.w);
  Tensor b(t.n, t.c - first, t.h, t.w);
  for (int n = 0; n < t.n; ++n) {
    std::copy(t.item(n), t.item(n) + a.c * a.plane(), a.item(n));
    std::copy(t.item(n) + a.c * a.plane(), t.item(n) + t.c * t.plane(), b.item(n));
  }
  return {std::move(a), std::move(b)};
}

void add_inplace(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += src.data[i];
}

}  // namespace

// ---------------------------------------------------------------------------

struct Network::Impl {
  std::array<BlockRef, 6> blocks;
  std::array<UpRef, 2> ups;
  ConvRef head;
  Trace trace;
  bool has_trace = false;

  Tensor block_forward(const std::vector<ParameterArray>& a, const BlockRef& r, const Tensor& x, BlockTrace* tr,
                       std::vector<BatchStat>* stats) const {
    Tensor h = conv_forward(a, r.conv1, x);
    bn_forward(a, r.bn1, h, tr ? &tr->bn1 : nullptr, stats);
    relu_inplace(h);
    Tensor out = conv_forward(a, r.conv2, h);
    bn_forward(a, r.bn2, out, tr ? &tr->bn2 : nullptr, stats);
    if (r.residual) {
      if (r.projected) {
        Tensor s = conv_forward(a, r.shortcut, x);
        bn_forward(a, r.shortcut_bn, s, tr ? &tr->shortcut_bn : nullptr, stats);
        add_inplace(out, s);
      } else {
        add_inplace(out, x);
      }
    }
    relu_inplace(out);
    if (tr) {
      tr->input = x;
      tr->act1 = std::move(h);
      tr->output = out;
    }
    return out;
  }

  Tensor block_backward(std::vector<ParameterArray>& a, const BlockRef& r, const BlockTrace& tr, Tensor d) const {
    relu_mask(tr.output, d);
    Tensor dx;
    if (r.residual) {
      if (r.projected) {
        dx = conv_backward(a, r.shortcut, tr.input, bn_backward(a, r.shortcut_bn, tr.shortcut_bn, d));
      } else {
        dx = d;
      }
    }
    Tensor d_act1 = conv_backward(a, r.conv2, tr.act1, bn_backward(a, r.bn2, tr.bn2, d));
    relu_mask(tr.act1, d_act1);
    Tensor d_in = conv_backward(a, r.conv1, tr.input, bn_backward(a, r.bn1, tr.bn1, d_act1));
    if (r.residual) {
      add_inplace(dx, d_in);
      return dx;
    }
    return d_in;
  }

  Tensor run(const std::vector<ParameterArray>& a, const Tensor& x, Trace* tr,
             std::array<BlockActivation, 6>* probe = nullptr) const {
    auto* stats = tr ? &tr->stats : nullptr;
    auto bt = [tr](int i) { return tr ? &tr->blocks[i] : nullptr; };
    auto block = [&](int i, Tensor in) {
      Tensor out = block_forward(a, blocks[i], in, bt(i), stats);
      if (probe) (*probe)[i] = {std::move(in), out};
      return out;
    };
    Tensor s1 = block(0, x);
    if (tr) {
      tr->pool_h[0] = s1.h;
      tr->pool_w[0] = s1.w;
    }
    Tensor s2 = block(1, maxpool_forward(s1, tr ? &tr->pool_index[0] : nullptr));
    if (tr) {
      tr->pool_h[1] = s2.h;
      tr->pool_w[1] = s2.w;
    }
    Tensor s3 = block(2, maxpool_forward(s2, tr ? &tr->pool_index[1] : nullptr));
    Tensor s4 = block(3, concat_channels(upsample_forward(a, ups[0], s3), s2));
    Tensor s5 = block(4, concat_channels(upsample_forward(a, ups[1], s4), s1));
    Tensor s6 = block(5, s5);
    return conv_forward(a, head, s6);
  }

  Tensor back(std::vector<ParameterArray>& a, const Tensor& dlogits) const {
    const auto& tr = trace;
    Tensor d = conv_backward(a, head, tr.blocks[5].output, dlogits);
    d = block_backward(a, blocks[5], tr.blocks[5], std::move(d));
    d = block_backward(a, blocks[4], tr.blocks[4], std::move(d));
    auto [d_up2, d_skip1] = split_channels(d, ups[1].cout);
    d = upsample_backward(a, ups[1], tr.blocks[3].output, d_up2);
    d = block_backward(a, blocks[3], tr.blocks[3], std::move(d));
    auto [d_up1, d_skip2] = split_channels(d, ups[0].cout);
    d = upsample_backward(a, ups[0], tr.blocks[2].output, d_up1);
    d = block_backward(a, blocks[2], tr.blocks[2], std::move(d));
    d = maxpool_backward(d, tr.pool_index[1], tr.pool_h[1], tr.pool_w[1]);
    add_inplace(d, d_skip2);
    d = block_backward(a, blocks[1], tr.blocks[1], std::move(d));
    d = maxpool_backward(d, tr.pool_index[0], tr.pool_h[0], tr.pool_w[0]);
    add_inplace(d, d_skip1);
    return block_backward(a, blocks[0], tr.blocks[0], std::move(d));
  }
};

namespace {

class Builder {
 public:
  Builder(std::vector<ParameterArray>& arrays, std::uint64_t seed) : arrays_(arrays), rng_(seed) {}

  int add(const std::string& name, std::vector<int> shape, bool trainable, double fill) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    arrays_.push_back({name, std::move(shape), std::vector<double>(n, fill), std::vector<double>(trainable ? n : 0, 0.0),
                       trainable});
    return static_cast<int>(arrays_.size()) - 1;
  }

  int add_he(const std::string& name, std::vector<int> shape, int fan_in) {
    const int idx = add(name, std::move(shape), true, 0.0);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    for (auto& v : arrays_[idx].value) v = dist(rng_);
    snap_to_float(arrays_[idx].value);
    return idx;
  }

  ConvRef conv(const std::string& name, int cin, int cout, int k, int dilation) {
    ConvRef r;
    r.cin = cin;
    r.cout = cout;
    r.k = k;
    r.dilation = dilation;
    r.weight = add_he(name + ".weight", {cout, cin, k, k}, cin * k * k);
    r.bias = add(name + ".bias", {cout}, true, 0.0);
    return r;
  }

  BnRef bn(const std::string& name, int channels) {
    BnRef r;
    r.channels = channels;
    r.gamma = add(name + ".gamma", {channels}, true, 1.0);
    r.beta = add(name + ".beta", {channels}, true, 0.0);
    r.mean = add(name + ".running_mean", {channels}, false, 0.0);
    r.var = add(name + ".running_var", {channels}, false, 1.0);
    return r;
  }

  BlockRef block(const std::string& name, bool residual, int cin, int cout, int dilation) {
    BlockRef r;
    r.residual = residual;
    r.conv1 = conv(name + ".conv1", cin, cout, kKernel, dilation);
    r.bn1 = bn(name + ".bn1", cout);
    r.conv2 = conv(name + ".conv2", cout, cout, kKernel, dilation);
    r.bn2 = bn(name + ".bn2", cout);
    if (residual && cin != cout) {
      r.projected = true;
      r.shortcut = conv(name + ".shortcut", cin, cout, 1, 1);
      r.shortcut_bn = bn(name + ".shortcut_bn", cout);
    }
    return r;
  }

  UpRef up(const std::string& name, int cin, int cout, int k) {
    UpRef r;
    r.cin = cin;
    r.cout = cout;
    r.k = k;
    r.weight = add_he(name + ".weight", {cin, cout, k, k}, cin * k * k);
    r.bias = add(name + ".bias", {cout}, true, 0.0);
    return r;
  }

 private:
  std::vector<ParameterArray>& arrays_;
  std::mt19937_64 rng_;
};

}  // namespace

Network::Network(const DRUNetConfig& config, std::uint64_t seed) : config_(config), impl_(std::make_unique<Impl>()) {
  config_.validate();
  Builder b(arrays_, seed);
  const int f = config_.base_filters;
  const auto& dd = config_.down_dilations;
  const auto& ud = config_.up_dilations;
  impl_->blocks[0] = b.block("block1", false, config_.in_channels, f, dd[0]);
  impl_->blocks[1] = b.block("block2", true, f, f, dd[1]);
  impl_->blocks[2] = b.block("block3", true, f, f, dd[2]);
  impl_->ups[0] = b.up("up1", f, f, config_.upsample_kernel);
  impl_->blocks[3] = b.block("block4", true, 2 * f, f, ud[0]);
  impl_->ups[1] = b.up("up2", f, f, config_.upsample_kernel);
  impl_->blocks[4] = b.block("block5", true, 2 * f, f, ud[1]);
  impl_->blocks[5] = b.block("block6", false, f, f, ud[2]);
  impl_->head = b.conv("head", f, config_.num_classes, 1, 1);
}

Network::Network(const Network& o)
    : config_(o.config_), mode_(o.mode_), arrays_(o.arrays_), impl_(std::make_unique<Impl>(*o.impl_)) {}

Network& Network::operator=(const Network& o) {
  if (this != &o) {
    config_ = o.config_;
    mode_ = o.mode_;
    arrays_ = o.arrays_;
    impl_ = std::make_unique<Impl>(*o.impl_);
  }
  return *this;
}

Network::Network(Network&&) noexcept = default;
Network& Network::operator=(Network&&) noexcept = default;
Network::~Network() = default;

ParameterArray* Network::find(const std::string& name) {
  for (auto& a : arrays_) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

const ParameterArray* Network::find(const std::string& name) const {
  for (const auto& a : arrays_) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

namespace {

void check_input(const DRUNetConfig& cfg, const Tensor& x) {
  if (x.n < 1) throw ShapeError("batch is empty");
  if (x.c != cfg.in_channels) {
    throw ShapeError("expected " + std::to_string(cfg.in_channels) + " input channels, got " + std::to_string(x.c) +
                     " (input shape " + x.shape_string() + ")");
  }
  if (x.h <= 0 || x.w <= 0 || x.h % 4 != 0 || x.w % 4 != 0) {
    throw ShapeError("input height and width must be positive multiples of 4, got " + std::to_string(x.h) + "x" +
                     std::to_string(x.w));
  }
  if (x.size() != static_cast<std::size_t>(x.n) * x.c * x.h * x.w) throw ShapeError("tensor data length mismatch");
}

}  // namespace

Tensor Network::predict(const Tensor& input) const {
  check_input(config_, input);
  return impl_->run(arrays_, input, nullptr);
}

std::array<BlockActivation, 6> Network::probe_blocks(const Tensor& input) const {
  check_input(config_, input);
  std::array<BlockActivation, 6> out;
  impl_->run(arrays_, input, nullptr, &out);
  return out;
}

Tensor Network::forward(const Tensor& input) {
  if (mode_ == Mode::Eval) return predict(input);
  check_input(config_, input);
  impl_->trace = Trace{};
  Tensor out = impl_->run(arrays_, input, &impl_->trace);
  for (const auto& s : impl_->trace.stats) {
    auto& rm = arrays_[s.ref.mean].value;
    auto& rv = arrays_[s.ref.var].value;
    for (int ch = 0; ch < s.ref.channels; ++ch) {
      rm[ch] = (1.0 - kBnMomentum) * rm[ch] + kBnMomentum * s.mean[ch];
      rv[ch] = (1.0 - kBnMomentum) * rv[ch] + kBnMomentum * s.var_unbiased[ch];
    }
    snap_to_float(rm);
    snap_to_float(rv);
  }
  impl_->has_trace = true;
  return out;
}

Tensor Network::backward(const Tensor& grad_logits) {
  if (!impl_->has_trace) throw ArgumentError("backward() requires a preceding train-mode forward()");
  const auto& last = impl_->trace.blocks[5].output;
  if (grad_logits.n != last.n || grad_logits.c != config_.num_classes || grad_logits.h != last.h ||
      grad_logits.w != last.w) {
    throw ShapeError("logit gradient has shape " + grad_logits.shape_string() + ", expected (" +
                     std::to_string(last.n) + ", " + std::to_string(config_.num_classes) + ", " +
                     std::to_string(last.h) + ", " + std::to_string(last.w) + ")");
  }
  return impl_->back(arrays_, grad_logits);
}

void Network::zero_grad() {
  for (auto& a : arrays_) std::fill(a.grad.begin(), a.grad.end(), 0.0);
}

void Network::zero_block(int index) {
  if (index < 1 || index > 6) throw ArgumentError("block index must be in 1..6");
  const BlockRef& r = impl_->blocks[index - 1];
  for (int i : {r.conv1.weight, r.conv1.bias, r.conv2.weight, r.conv2.bias, r.bn1.beta, r.bn2.beta}) {
    std::fill(arrays_[i].value.begin(), arrays_[i].value.end(), 0.0);
  }
}

Network build_network(const DRUNetConfig& config, std::uint64_t seed) { return Network(config, seed); }

std::size_t count_parameters(const Network& net) {
  std::size_t total = 0;
  for (const auto& a : net.arrays()) {
    if (a.trainable) total += a.numel();
  }
  return total;
}

Tensor softmax_probabilities(const Tensor& logits) {
  Tensor out(logits.n, logits.c, logits.h, logits.w);
  const std::size_t plane = logits.plane();
  for (int b = 0; b < logits.n; ++b) {
    const double* src = logits.item(b);
    double* dst = out.item(b);
    for (std::size_t p = 0; p < plane; ++p) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int k = 0; k < logits.c; ++k) {
        const double v = src[k * plane + p];
        if (!std::isfinite(v)) throw NumericError("non-finite logit at pixel " + std::to_string(p));
        mx = std::max(mx, v);
      }
      double sum = 0.0;
      for (int k = 0; k < logits.c; ++k) {
        const double e = std::exp(src[k * plane + p] - mx);
        dst[k * plane + p] = e;
        sum += e;
      }
      for (int k = 0; k < logits.c; ++k) dst[k * plane + p] /= sum;
    }
  }
  return out;
}

}  // namespace brainseg
