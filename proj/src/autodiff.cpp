/* Copyright 2026 The IQT Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#include "iqt/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "iqt/error.hpp"

namespace iqt::ad {
namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Map = Eigen::Map<MatR<T>>;
template <typename T>
using CMap = Eigen::Map<const MatR<T>>;

[[noreturn]] void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " +
                   to_string(b));
}

std::size_t channel_size(const Shape& s) {
  return static_cast<std::size_t>(s[2]) * static_cast<std::size_t>(s[3]) *
         static_cast<std::size_t>(s[4]);
}

// Columns of a 3x3x3 same-padded convolution for one sample: row
// (c, kx, ky, kz) holds the input shifted by (kx-1, ky-1, kz-1).
template <typename T>
void im2col3(const T* in, int channels, int nx, int ny, int nz, T* col) {
  const std::size_t p = static_cast<std::size_t>(nx) * ny * nz;
  for (int c = 0; c < channels; ++c) {
    const T* src = in + c * p;
    for (int k = 0; k < 27; ++k) {
      const int dx = k / 9 - 1;
      const int dy = (k / 3) % 3 - 1;
      const int dz = k % 3 - 1;
      T* row = col + (static_cast<std::size_t>(c) * 27 + k) * p;
      const int z0 = std::max(0, -dz);
      const int z1 = std::min(nz, nz - dz);
      for (int x = 0; x < nx; ++x) {
        const int sx = x + dx;
        for (int y = 0; y < ny; ++y) {
          const int sy = y + dy;
          T* dst = row + (static_cast<std::size_t>(x) * ny + y) * nz;
          if (sx < 0 || sx >= nx || sy < 0 || sy >= ny) {
            std::fill(dst, dst + nz, T(0));
            continue;
          }
          const T* s = src + (static_cast<std::size_t>(sx) * ny + sy) * nz + dz;
          for (int z = 0; z < z0; ++z) dst[z] = T(0);
          for (int z = z0; z < z1; ++z) dst[z] = s[z];
          for (int z = z1; z < nz; ++z) dst[z] = T(0);
        }
      }
    }
  }
}

template <typename T>
void col2im3(const T* col, int channels, int nx, int ny, int nz, T* in) {
  const std::size_t p = static_cast<std::size_t>(nx) * ny * nz;
  for (int c = 0; c < channels; ++c) {
    T* dst = in + c * p;
    for (int k = 0; k < 27; ++k) {
      const int dx = k / 9 - 1;
      const int dy = (k / 3) % 3 - 1;
      const int dz = k % 3 - 1;
      const T* row = col + (static_cast<std::size_t>(c) * 27 + k) * p;
      const int z0 = std::max(0, -dz);
      const int z1 = std::min(nz, nz - dz);
      for (int x = 0; x < nx; ++x) {
        const int sx = x + dx;
        if (sx < 0 || sx >= nx) continue;
        for (int y = 0; y < ny; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= ny) continue;
          const T* s = row + (static_cast<std::size_t>(x) * ny + y) * nz;
          T* d = dst + (static_cast<std::size_t>(sx) * ny + sy) * nz + dz;
          for (int z = z0; z < z1; ++z) d[z] += s[z];
        }
      }
    }
  }
}

template <typename T>
std::vector<T>& scratch() {
  thread_local std::vector<T> buf;
  return buf;
}

void check_conv_weight(const char* op, const Shape& x, const Shape& w, int k) {
  if (w[1] != x[1] || w[2] != k || w[3] != k || w[4] != k) shape_mismatch(op, x, w);
}

}  // namespace

std::string to_string(const Shape& s) {
  return "(" + std::to_string(s[0]) + ", " + std::to_string(s[1]) + ", " + std::to_string(s[2]) +
         ", " + std::to_string(s[3]) + ", " + std::to_string(s[4]) + ")";
}

std::size_t element_count(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d < 0) throw ShapeError("negative extent in shape " + to_string(s));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

template <typename T>
Tensor<T>::Tensor(const Shape& s, std::vector<T> values) : shape(s), data(std::move(values)) {
  if (data.size() != element_count(s)) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + to_string(s));
  }
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kConv3: return "conv3";
    case OpKind::kConv1: return "conv1";
    case OpKind::kConvTranspose: return "convtranspose";
    case OpKind::kMaxPool: return "maxpool";
    case OpKind::kRelu: return "relu";
    case OpKind::kBatchNorm: return "batchnorm";
    case OpKind::kConcat: return "concat";
    case OpKind::kAdd: return "add";
    case OpKind::kMse: return "mse";
    case OpKind::kChannelMask: return "channel_mask";
  }
  return "unknown";
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::leaf(Tensor<T> value, bool requires_grad) {
  Node n;
  n.kind = OpKind::kLeaf;
  n.requires_grad = requires_grad;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::apply(OpKind kind, std::vector<NodeId> inputs,
                                          const OpParams& params) {
  if (kind == OpKind::kLeaf) throw ArgumentError("use leaf() to create leaves");
  Node n;
  n.kind = kind;
  n.params = params;
  for (NodeId id : inputs) {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
      throw ArgumentError(std::string(op_name(kind)) + ": input node does not exist");
    }
    n.requires_grad = n.requires_grad || nodes_[id].requires_grad;
  }
  n.inputs = std::move(inputs);
  forward(n);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::conv3(NodeId x, NodeId w, NodeId bias) {
  if (bias >= 0) return apply(OpKind::kConv3, {x, w, bias});
  return apply(OpKind::kConv3, {x, w});
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::conv1(NodeId x, NodeId w, NodeId bias) {
  if (bias >= 0) return apply(OpKind::kConv1, {x, w, bias});
  return apply(OpKind::kConv1, {x, w});
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::conv_transpose(NodeId x, NodeId w, std::array<int, 3> stride,
                                                   NodeId bias) {
  OpParams p;
  p.window = stride;
  if (bias >= 0) return apply(OpKind::kConvTranspose, {x, w, bias}, p);
  return apply(OpKind::kConvTranspose, {x, w}, p);
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::max_pool(NodeId x, std::array<int, 3> window) {
  OpParams p;
  p.window = window;
  return apply(OpKind::kMaxPool, {x}, p);
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::relu(NodeId x) {
  return apply(OpKind::kRelu, {x});
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::batch_norm(NodeId x, NodeId gamma, NodeId beta, double eps) {
  OpParams p;
  p.training = true;
  p.eps = eps;
  return apply(OpKind::kBatchNorm, {x, gamma, beta}, p);
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::batch_norm_inference(NodeId x, NodeId gamma, NodeId beta,
                                                         NodeId mean, NodeId var, double eps) {
  OpParams p;
  p.training = false;
  p.eps = eps;
  return apply(OpKind::kBatchNorm, {x, gamma, beta, mean, var}, p);
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::concat(std::vector<NodeId> parts) {
  return apply(OpKind::kConcat, std::move(parts));
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::add(NodeId a, NodeId b) {
  return apply(OpKind::kAdd, {a, b});
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::mse(NodeId estimate, NodeId target) {
  return apply(OpKind::kMse, {estimate, target});
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::channel_mask(NodeId x, NodeId mask) {
  return apply(OpKind::kChannelMask, {x, mask});
}

template <typename T>
Tensor<T>& Graph<T>::leaf_value(NodeId id) {
  Node& n = nodes_.at(id);
  if (n.kind != OpKind::kLeaf) throw ArgumentError("leaf_value on a non-leaf node");
  return n.value;
}

template <typename T>
const Tensor<T>& Graph<T>::grad(NodeId id) const {
  const Node& n = nodes_.at(id);
  if (n.grad.size() != n.value.size()) {
    thread_local Tensor<T> zeros;
    zeros = Tensor<T>(n.value.shape);
    return zeros;
  }
  return n.grad;
}

template <typename T>
Tensor<T>& Graph<T>::grad_buffer(NodeId id) {
  Node& n = nodes_[id];
  if (n.grad.size() != n.value.size()) n.grad = Tensor<T>(n.value.shape);
  return n.grad;
}

template <typename T>
std::span<const T> Graph<T>::batch_mean(NodeId bn) const {
  const Node& n = nodes_.at(bn);
  if (n.kind != OpKind::kBatchNorm || !n.params.training) {
    throw ArgumentError("batch_mean needs a training-mode batch norm node");
  }
  return std::span<const T>(n.stats).subspan(0, n.stats.size() / 2);
}

template <typename T>
std::span<const T> Graph<T>::batch_var(NodeId bn) const {
  const Node& n = nodes_.at(bn);
  if (n.kind != OpKind::kBatchNorm || !n.params.training) {
    throw ArgumentError("batch_var needs a training-mode batch norm node");
  }
  return std::span<const T>(n.stats).subspan(n.stats.size() / 2);
}

template <typename T>
void Graph<T>::forward(Node& node) {
  const auto in = [&](std::size_t i) -> const Tensor<T>& { return nodes_[node.inputs[i]].value; };
  const char* name = op_name(node.kind);
  auto need_inputs = [&](std::size_t lo, std::size_t hi) {
    if (node.inputs.size() < lo || node.inputs.size() > hi) {
      throw ArgumentError(std::string(name) + ": wrong number of inputs");
    }
  };
  Tensor<T>& out = node.value;

  switch (node.kind) {
    case OpKind::kLeaf:
      return;

    case OpKind::kConv3:
    case OpKind::kConv1: {
      need_inputs(2, 3);
      const bool c3 = node.kind == OpKind::kConv3;
      const Tensor<T>& x = in(0);
      const Tensor<T>& w = in(1);
      check_conv_weight(name, x.shape, w.shape, c3 ? 3 : 1);
      const int cout = w.shape[0];
      const int cin = x.c();
      if (node.inputs.size() == 3 && in(2).size() != static_cast<std::size_t>(cout)) {
        shape_mismatch(name, w.shape, in(2).shape);
      }
      out = Tensor<T>({x.n(), cout, x.shape[2], x.shape[3], x.shape[4]});
      const std::size_t p = x.spatial();
      const int k = c3 ? cin * 27 : cin;
      CMap<T> wm(w.data.data(), cout, k);
      std::vector<T>& col = scratch<T>();
      if (c3) col.resize(static_cast<std::size_t>(k) * p);
      for (int n = 0; n < x.n(); ++n) {
        const T* xn = x.data.data() + static_cast<std::size_t>(n) * cin * p;
        Map<T> om(out.data.data() + static_cast<std::size_t>(n) * cout * p, cout, p);
        if (c3) {
          im2col3(xn, cin, x.shape[2], x.shape[3], x.shape[4], col.data());
          om.noalias() = wm * CMap<T>(col.data(), k, p);
        } else {
          om.noalias() = wm * CMap<T>(xn, cin, p);
        }
        if (node.inputs.size() == 3) {
          const T* b = in(2).data.data();
          for (int c = 0; c < cout; ++c) om.row(c).array() += b[c];
        }
      }
      return;
    }

    case OpKind::kConvTranspose: {
      need_inputs(2, 3);
      const Tensor<T>& x = in(0);
      const Tensor<T>& w = in(1);
      const auto s = node.params.window;
      if (s[0] < 1 || s[1] < 1 || s[2] < 1) throw ArgumentError("convtranspose: bad stride");
      if (w.shape[0] != x.c() || w.shape[2] != s[0] || w.shape[3] != s[1] || w.shape[4] != s[2]) {
        shape_mismatch(name, x.shape, w.shape);
      }
      const int cin = x.c();
      const int cout = w.shape[1];
      if (node.inputs.size() == 3 && in(2).size() != static_cast<std::size_t>(cout)) {
        shape_mismatch(name, w.shape, in(2).shape);
      }
      const int nx = x.shape[2], ny = x.shape[3], nz = x.shape[4];
      const int ox = nx * s[0], oy = ny * s[1], oz = nz * s[2];
      out = Tensor<T>({x.n(), cout, ox, oy, oz});
      const int kk = s[0] * s[1] * s[2];
      const std::size_t p = x.spatial();
      const std::size_t op = out.spatial();
      CMap<T> wm(w.data.data(), cin, static_cast<Eigen::Index>(cout) * kk);
      std::vector<T>& tmp = scratch<T>();
      tmp.resize(static_cast<std::size_t>(cout) * kk * p);
      for (int n = 0; n < x.n(); ++n) {
        Map<T> tm(tmp.data(), static_cast<Eigen::Index>(cout) * kk, p);
        tm.noalias() = wm.transpose() * CMap<T>(x.data.data() + n * cin * p, cin, p);
        T* on = out.data.data() + static_cast<std::size_t>(n) * cout * op;
        for (int co = 0; co < cout; ++co) {
          const T b = node.inputs.size() == 3 ? in(2).data[co] : T(0);
          T* oc = on + co * op;
          for (int a = 0; a < kk; ++a) {
            const int ax = a / (s[1] * s[2]);
            const int ay = (a / s[2]) % s[1];
            const int az = a % s[2];
            const T* row = tmp.data() + (static_cast<std::size_t>(co) * kk + a) * p;
            for (int x0 = 0; x0 < nx; ++x0) {
              for (int y0 = 0; y0 < ny; ++y0) {
                const T* r = row + (static_cast<std::size_t>(x0) * ny + y0) * nz;
                T* d = oc + (static_cast<std::size_t>(x0 * s[0] + ax) * oy + (y0 * s[1] + ay)) * oz +
                       az;
                for (int z0 = 0; z0 < nz; ++z0) d[z0 * s[2]] = r[z0] + b;
              }
            }
          }
        }
      }
      return;
    }

    case OpKind::kMaxPool: {
      need_inputs(1, 1);
      const Tensor<T>& x = in(0);
      const auto w = node.params.window;
      if (w[0] < 1 || w[1] < 1 || w[2] < 1 || x.shape[2] % w[0] || x.shape[3] % w[1] ||
          x.shape[4] % w[2]) {
        throw ShapeError("maxpool: window (" + std::to_string(w[0]) + ", " +
                         std::to_string(w[1]) + ", " + std::to_string(w[2]) +
                         ") does not divide " + to_string(x.shape));
      }
      const int nx = x.shape[2], ny = x.shape[3], nz = x.shape[4];
      const int ox = nx / w[0], oy = ny / w[1], oz = nz / w[2];
      out = Tensor<T>({x.n(), x.c(), ox, oy, oz});
      node.argmax.assign(out.size(), 0);
      const std::size_t p = x.spatial();
      const std::size_t op = out.spatial();
      for (int nc = 0; nc < x.n() * x.c(); ++nc) {
        const T* src = x.data.data() + nc * p;
        for (int i = 0; i < ox; ++i)
          for (int j = 0; j < oy; ++j)
            for (int k = 0; k < oz; ++k) {
              std::size_t best = 0;
              T bv = T(0);
              bool first = true;
              for (int a = 0; a < w[0]; ++a)
                for (int b = 0; b < w[1]; ++b)
                  for (int c = 0; c < w[2]; ++c) {
                    const std::size_t idx =
                        (static_cast<std::size_t>(i * w[0] + a) * ny + (j * w[1] + b)) * nz +
                        (k * w[2] + c);
                    if (first || src[idx] > bv) {
                      bv = src[idx];
                      best = idx;
                      first = false;
                    }
                  }
              const std::size_t o = nc * op + (static_cast<std::size_t>(i) * oy + j) * oz + k;
              out.data[o] = bv;
              node.argmax[o] = static_cast<std::uint32_t>(best);
            }
      }
      return;
    }

    case OpKind::kRelu: {
      need_inputs(1, 1);
      const Tensor<T>& x = in(0);
      out = Tensor<T>(x.shape);
      for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x.data[i] > T(0) ? x.data[i] : T(0);
      return;
    }

    case OpKind::kBatchNorm: {
      need_inputs(node.params.training ? 3 : 5, node.params.training ? 3 : 5);
      const Tensor<T>& x = in(0);
      const int cs = x.c();
      for (std::size_t i = 1; i < node.inputs.size(); ++i) {
        if (in(i).size() != static_cast<std::size_t>(cs)) shape_mismatch(name, x.shape, in(i).shape);
      }
      const T* gamma = in(1).data.data();
      const T* beta = in(2).data.data();
      const std::size_t p = x.spatial();
      const double m = static_cast<double>(p) * x.n();
      out = Tensor<T>(x.shape);
      node.saved.assign(x.size() + 2 * cs, T(0));
      T* xhat = node.saved.data();
      T* mean_inv = node.saved.data() + x.size();
      if (node.params.training) node.stats.assign(2 * cs, T(0));
      for (int c = 0; c < cs; ++c) {
        double mean;
        double var;
        if (node.params.training) {
          double s = 0.0;
          for (int n = 0; n < x.n(); ++n) {
            const T* v = x.data.data() + (static_cast<std::size_t>(n) * cs + c) * p;
            for (std::size_t i = 0; i < p; ++i) s += v[i];
          }
          mean = s / m;
          double q = 0.0;
          for (int n = 0; n < x.n(); ++n) {
            const T* v = x.data.data() + (static_cast<std::size_t>(n) * cs + c) * p;
            for (std::size_t i = 0; i < p; ++i) {
              const double d = v[i] - mean;
              q += d * d;
            }
          }
          var = q / m;
          node.stats[c] = static_cast<T>(mean);
          node.stats[cs + c] = static_cast<T>(var);
        } else {
          mean = in(3).data[c];
          var = in(4).data[c];
        }
        const double inv = 1.0 / std::sqrt(var + node.params.eps);
        mean_inv[c] = static_cast<T>(mean);
        mean_inv[cs + c] = static_cast<T>(inv);
        for (int n = 0; n < x.n(); ++n) {
          const std::size_t off = (static_cast<std::size_t>(n) * cs + c) * p;
          for (std::size_t i = 0; i < p; ++i) {
            const T h = static_cast<T>((x.data[off + i] - mean) * inv);
            xhat[off + i] = h;
            out.data[off + i] = gamma[c] * h + beta[c];
          }
        }
      }
      return;
    }

    case OpKind::kConcat: {
      if (node.inputs.size() < 2) throw ArgumentError("concat: needs at least two inputs");
      const Shape s0 = in(0).shape;
      int total = 0;
      for (std::size_t i = 0; i < node.inputs.size(); ++i) {
        const Shape& s = in(i).shape;
        if (s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] || s[4] != s0[4]) {
          shape_mismatch(name, s0, s);
        }
        total += s[1];
      }
      out = Tensor<T>({s0[0], total, s0[2], s0[3], s0[4]});
      const std::size_t p = channel_size(s0);
      for (int n = 0; n < s0[0]; ++n) {
        T* dst = out.data.data() + static_cast<std::size_t>(n) * total * p;
        for (std::size_t i = 0; i < node.inputs.size(); ++i) {
          const Tensor<T>& t = in(i);
          const std::size_t len = static_cast<std::size_t>(t.c()) * p;
          std::copy_n(t.data.data() + n * len, len, dst);
          dst += len;
        }
      }
      return;
    }

    case OpKind::kAdd: {
      need_inputs(2, 2);
      const Tensor<T>& a = in(0);
      const Tensor<T>& b = in(1);
      if (a.shape != b.shape) shape_mismatch(name, a.shape, b.shape);
      out = Tensor<T>(a.shape);
      for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] + b.data[i];
      return;
    }

    case OpKind::kMse: {
      need_inputs(2, 2);
      const Tensor<T>& a = in(0);
      const Tensor<T>& b = in(1);
      if (a.shape != b.shape) shape_mismatch(name, a.shape, b.shape);
      if (a.size() == 0) throw ArgumentError("mse of empty tensors");
      double s = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
        s += d * d;
      }
      out = Tensor<T>({1, 1, 1, 1, 1}, static_cast<T>(s / static_cast<double>(a.size())));
      return;
    }

    case OpKind::kChannelMask: {
      need_inputs(2, 2);
      const Tensor<T>& x = in(0);
      const Tensor<T>& mask = in(1);
      const int m = mask.shape[0];
      if (mask.shape[1] != x.c() || m < 1 || x.n() % m != 0) shape_mismatch(name, x.shape, mask.shape);
      const int group = x.n() / m;
      const std::size_t p = x.spatial();
      out = Tensor<T>(x.shape);
      for (int n = 0; n < x.n(); ++n) {
        const T* mrow = mask.data.data() + static_cast<std::size_t>(n / group) * x.c();
        for (int c = 0; c < x.c(); ++c) {
          const std::size_t off = (static_cast<std::size_t>(n) * x.c() + c) * p;
          for (std::size_t i = 0; i < p; ++i) out.data[off + i] = x.data[off + i] * mrow[c];
        }
      }
      return;
    }
  }
}

template <typename T>
void Graph<T>::propagate(Node& node) {
  const Tensor<T>& g = node.grad;
  const auto in = [&](std::size_t i) -> const Tensor<T>& { return nodes_[node.inputs[i]].value; };
  const auto wants = [&](std::size_t i) { return nodes_[node.inputs[i]].requires_grad; };

  switch (node.kind) {
    case OpKind::kLeaf:
      return;

    case OpKind::kConv3:
    case OpKind::kConv1: {
      const bool c3 = node.kind == OpKind::kConv3;
      const Tensor<T>& x = in(0);
      const Tensor<T>& w = in(1);
      const int cout = w.shape[0];
      const int cin = x.c();
      const std::size_t p = x.spatial();
      const int k = c3 ? cin * 27 : cin;
      CMap<T> wm(w.data.data(), cout, k);
      T* dx = wants(0) ? grad_buffer(node.inputs[0]).data.data() : nullptr;
      T* dw = wants(1) ? grad_buffer(node.inputs[1]).data.data() : nullptr;
      T* db = node.inputs.size() == 3 && wants(2) ? grad_buffer(node.inputs[2]).data.data() : nullptr;
      std::vector<T>& col = scratch<T>();
      std::vector<T> dcol;
      if (c3) {
        col.resize(static_cast<std::size_t>(k) * p);
        if (dx) dcol.resize(static_cast<std::size_t>(k) * p);
      }
      for (int n = 0; n < x.n(); ++n) {
        const T* xn = x.data.data() + static_cast<std::size_t>(n) * cin * p;
        CMap<T> gm(g.data.data() + static_cast<std::size_t>(n) * cout * p, cout, p);
        if (db) {
          // Ordered sum, independent of buffer alignment.
          for (int c = 0; c < cout; ++c) {
            const T* row = gm.data() + static_cast<std::size_t>(c) * p;
            T acc = T(0);
            for (std::size_t i = 0; i < p; ++i) acc += row[i];
            db[c] += acc;
          }
        }
        if (c3 && dw) im2col3(xn, cin, x.shape[2], x.shape[3], x.shape[4], col.data());
        if (dw) {
          Map<T> dwm(dw, cout, k);
          if (c3) {
            dwm.noalias() += gm * CMap<T>(col.data(), k, p).transpose();
          } else {
            dwm.noalias() += gm * CMap<T>(xn, cin, p).transpose();
          }
        }
        if (dx) {
          T* dxn = dx + static_cast<std::size_t>(n) * cin * p;
          if (c3) {
            Map<T> dc(dcol.data(), k, p);
            dc.noalias() = wm.transpose() * gm;
            col2im3(dcol.data(), cin, x.shape[2], x.shape[3], x.shape[4], dxn);
          } else {
            Map<T>(dxn, cin, p).noalias() += wm.transpose() * gm;
          }
        }
      }
      return;
    }

    case OpKind::kConvTranspose: {
      const Tensor<T>& x = in(0);
      const Tensor<T>& w = in(1);
      const auto s = node.params.window;
      const int cin = x.c();
      const int cout = w.shape[1];
      const int nx = x.shape[2], ny = x.shape[3], nz = x.shape[4];
      const int oy = ny * s[1], oz = nz * s[2];
      const int kk = s[0] * s[1] * s[2];
      const std::size_t p = x.spatial();
      const std::size_t op = g.spatial();
      CMap<T> wm(w.data.data(), cin, static_cast<Eigen::Index>(cout) * kk);
      T* dx = wants(0) ? grad_buffer(node.inputs[0]).data.data() : nullptr;
      T* dw = wants(1) ? grad_buffer(node.inputs[1]).data.data() : nullptr;
      T* db = node.inputs.size() == 3 && wants(2) ? grad_buffer(node.inputs[2]).data.data() : nullptr;
      std::vector<T>& gath = scratch<T>();
      gath.resize(static_cast<std::size_t>(cout) * kk * p);
      for (int n = 0; n < x.n(); ++n) {
        const T* gn = g.data.data() + static_cast<std::size_t>(n) * cout * op;
        for (int co = 0; co < cout; ++co) {
          const T* gc = gn + co * op;
          if (db) {
            T acc = T(0);
            for (std::size_t i = 0; i < op; ++i) acc += gc[i];
            db[co] += acc;
          }
          for (int a = 0; a < kk; ++a) {
            const int ax = a / (s[1] * s[2]);
            const int ay = (a / s[2]) % s[1];
            const int az = a % s[2];
            T* row = gath.data() + (static_cast<std::size_t>(co) * kk + a) * p;
            for (int x0 = 0; x0 < nx; ++x0)
              for (int y0 = 0; y0 < ny; ++y0) {
                T* r = row + (static_cast<std::size_t>(x0) * ny + y0) * nz;
                const T* d =
                    gc + (static_cast<std::size_t>(x0 * s[0] + ax) * oy + (y0 * s[1] + ay)) * oz + az;
                for (int z0 = 0; z0 < nz; ++z0) r[z0] = d[z0 * s[2]];
              }
          }
        }
        CMap<T> gm(gath.data(), static_cast<Eigen::Index>(cout) * kk, p);
        CMap<T> xm(x.data.data() + static_cast<std::size_t>(n) * cin * p, cin, p);
        if (dw) Map<T>(dw, cin, static_cast<Eigen::Index>(cout) * kk).noalias() += xm * gm.transpose();
        if (dx) Map<T>(dx + static_cast<std::size_t>(n) * cin * p, cin, p).noalias() += wm * gm;
      }
      return;
    }

    case OpKind::kMaxPool: {
      if (!wants(0)) return;
      const Tensor<T>& x = in(0);
      T* dx = grad_buffer(node.inputs[0]).data.data();
      const std::size_t p = x.spatial();
      const std::size_t op = g.spatial();
      for (std::size_t o = 0; o < g.size(); ++o) {
        const std::size_t nc = o / op;
        dx[nc * p + node.argmax[o]] += g.data[o];
      }
      return;
    }

    case OpKind::kRelu: {
      if (!wants(0)) return;
      const Tensor<T>& x = in(0);
      T* dx = grad_buffer(node.inputs[0]).data.data();
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (x.data[i] > T(0)) dx[i] += g.data[i];
      }
      return;
    }

    case OpKind::kBatchNorm: {
      const Tensor<T>& x = in(0);
      const int cs = x.c();
      const std::size_t p = x.spatial();
      const double m = static_cast<double>(p) * x.n();
      const T* gamma = in(1).data.data();
      const T* xhat = node.saved.data();
      const T* inv = node.saved.data() + x.size() + cs;
      T* dx = wants(0) ? grad_buffer(node.inputs[0]).data.data() : nullptr;
      T* dgamma = wants(1) ? grad_buffer(node.inputs[1]).data.data() : nullptr;
      T* dbeta = wants(2) ? grad_buffer(node.inputs[2]).data.data() : nullptr;
      for (int c = 0; c < cs; ++c) {
        double sdy = 0.0;
        double sdyx = 0.0;
        for (int n = 0; n < x.n(); ++n) {
          const std::size_t off = (static_cast<std::size_t>(n) * cs + c) * p;
          for (std::size_t i = 0; i < p; ++i) {
            sdy += g.data[off + i];
            sdyx += static_cast<double>(g.data[off + i]) * xhat[off + i];
          }
        }
        if (dgamma) dgamma[c] += static_cast<T>(sdyx);
        if (dbeta) dbeta[c] += static_cast<T>(sdy);
        if (!dx) continue;
        const double scale = static_cast<double>(gamma[c]) * inv[c];
        for (int n = 0; n < x.n(); ++n) {
          const std::size_t off = (static_cast<std::size_t>(n) * cs + c) * p;
          if (node.params.training) {
            const double a = scale / m;
            for (std::size_t i = 0; i < p; ++i) {
              dx[off + i] += static_cast<T>(
                  a * (m * g.data[off + i] - sdy - xhat[off + i] * sdyx));
            }
          } else {
            for (std::size_t i = 0; i < p; ++i) dx[off + i] += static_cast<T>(scale * g.data[off + i]);
          }
        }
      }
      return;
    }

    case OpKind::kConcat: {
      const std::size_t p = g.spatial();
      const int total = g.c();
      for (int n = 0; n < g.n(); ++n) {
        const T* src = g.data.data() + static_cast<std::size_t>(n) * total * p;
        for (std::size_t i = 0; i < node.inputs.size(); ++i) {
          const std::size_t len = static_cast<std::size_t>(in(i).c()) * p;
          if (wants(i)) {
            T* dst = grad_buffer(node.inputs[i]).data.data() + n * len;
            for (std::size_t j = 0; j < len; ++j) dst[j] += src[j];
          }
          src += len;
        }
      }
      return;
    }

    case OpKind::kAdd: {
      for (std::size_t k = 0; k < 2; ++k) {
        if (!wants(k)) continue;
        T* d = grad_buffer(node.inputs[k]).data.data();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g.data[i];
      }
      return;
    }

    case OpKind::kMse: {
      const Tensor<T>& a = in(0);
      const Tensor<T>& b = in(1);
      const T scale = static_cast<T>(2.0 * g.data[0] / static_cast<double>(a.size()));
      T* da = wants(0) ? grad_buffer(node.inputs[0]).data.data() : nullptr;
      T* db = wants(1) ? grad_buffer(node.inputs[1]).data.data() : nullptr;
      for (std::size_t i = 0; i < a.size(); ++i) {
        const T d = scale * (a.data[i] - b.data[i]);
        if (da) da[i] += d;
        if (db) db[i] -= d;
      }
      return;
    }

    case OpKind::kChannelMask: {
      const Tensor<T>& x = in(0);
      const Tensor<T>& mask = in(1);
      const int group = x.n() / mask.shape[0];
      const std::size_t p = x.spatial();
      T* dx = wants(0) ? grad_buffer(node.inputs[0]).data.data() : nullptr;
      T* dm = wants(1) ? grad_buffer(node.inputs[1]).data.data() : nullptr;
      for (int n = 0; n < x.n(); ++n) {
        const std::size_t row = static_cast<std::size_t>(n / group) * x.c();
        for (int c = 0; c < x.c(); ++c) {
          const std::size_t off = (static_cast<std::size_t>(n) * x.c() + c) * p;
          if (dx) {
            for (std::size_t i = 0; i < p; ++i) dx[off + i] += g.data[off + i] * mask.data[row + c];
          }
          if (dm) {
            T acc = T(0);
            for (std::size_t i = 0; i < p; ++i) acc += g.data[off + i] * x.data[off + i];
            dm[row + c] += acc;
          }
        }
      }
      return;
    }
  }
}

template <typename T>
void Graph<T>::backward(NodeId loss) {
  Node& l = nodes_.at(loss);
  if (l.value.size() != 1) {
    throw ArgumentError("backward needs a scalar loss, got shape " + to_string(l.value.shape));
  }
  grad_buffer(loss).data[0] += T(1);
  for (NodeId id = loss; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.kind == OpKind::kLeaf) continue;
    if (n.grad.size() != n.value.size()) continue;
    propagate(n);
  }
}

template <typename T>
void Graph<T>::zero_grad() {
  for (Node& n : nodes_) n.grad = Tensor<T>();
}

template <typename T>
void Graph<T>::replay() {
  for (Node& n : nodes_) {
    if (n.kind != OpKind::kLeaf) forward(n);
  }
}

template <typename T>
std::uint64_t Graph<T>::activation_signature() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](std::uint64_t v) {
    h ^= v;
    h *= 1099511628211ull;
  };
  for (const Node& n : nodes_) {
    if (n.kind == OpKind::kRelu) {
      for (T v : nodes_[n.inputs[0]].value.data) mix(v > T(0) ? 1u : 0u);
    } else if (n.kind == OpKind::kMaxPool) {
      for (std::uint32_t a : n.argmax) mix(a);
    }
  }
  return h;
}

double gradient_check(Graph<double>& graph, Graph<double>::NodeId loss,
                      Graph<double>::NodeId leaf, double eps,
                      std::span<const std::size_t> entries) {
  graph.zero_grad();
  graph.backward(loss);
  const Tensor<double> analytic = graph.grad(leaf);
  Tensor<double>& v = graph.leaf_value(leaf);
  std::vector<std::size_t> all;
  if (entries.empty()) {
    all.resize(v.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    entries = all;
  }
  double worst = 0.0;
  for (std::size_t i : entries) {
    const double orig = v.data.at(i);
    double h = eps;
    double fd = 0.0;
    for (int attempt = 0; attempt < 4; ++attempt) {
      v.data[i] = orig + h;
      graph.replay();
      const double lp = graph.value(loss).data[0];
      const std::uint64_t sp = graph.activation_signature();
      v.data[i] = orig - h;
      graph.replay();
      const double lm = graph.value(loss).data[0];
      const std::uint64_t sm = graph.activation_signature();
      fd = (lp - lm) / (2.0 * h);
      if (sp == sm) break;
      h /= 10.0;
    }
    v.data[i] = orig;
    const double ad = analytic.data[i];
    const double denom = std::max({std::fabs(fd), std::fabs(ad), 1e-8});
    worst = std::max(worst, std::fabs(fd - ad) / denom);
  }
  graph.replay();
  return worst;
}

template struct Tensor<float>;
template struct Tensor<double>;
template class Graph<float>;
template class Graph<double>;

}  // namespace iqt::ad
