#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "dsfpn/tensor.hpp"

// Differentiable operations. None of them broadcast: shapes must agree exactly.
namespace dsfpn::ops {

namespace detail {

using dsfpn::detail::make_result;
using dsfpn::detail::Node;

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

template <class T>
void accumulate(Node<T>& target, std::span<const T> delta) {
  if (!target.requires_grad) return;
  auto& g = target.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

template <class T>
void im2col(const T* x, std::size_t channels, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow, T* col) {
  const std::size_t cols = oh * ow;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = col + ((c * k + ky) * k + kx) * cols;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            const bool inside = iy >= 0 && iy < static_cast<long>(h) && ix >= 0 && ix < static_cast<long>(w);
            row[oy * ow + ox] = inside ? x[(c * h + iy) * w + ix] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* col, std::size_t channels, std::size_t h, std::size_t w, std::size_t k,
                std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow, T* dx) {
  const std::size_t cols = oh * ow;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = col + ((c * k + ky) * k + kx) * cols;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            dx[(c * h + iy) * w + ix] += row[oy * ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// NCHW convolution with square kernels, zero padding.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, std::size_t pad) {
  using detail::require;
  require(input.rank() == 4, "conv2d input must be NCHW, got " + shape_str(input.shape()));
  require(weight.rank() == 4 && weight.dim(2) == weight.dim(3),
          "conv2d weight must be OxCxkxk, got " + shape_str(weight.shape()));
  require(weight.dim(1) == input.dim(1), "conv2d channel mismatch: input " + shape_str(input.shape()) +
                                             " weight " + shape_str(weight.shape()));
  require(bias.rank() == 1 && bias.dim(0) == weight.dim(0), "conv2d bias must have O entries");
  require(stride >= 1, "conv2d stride must be >= 1");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t o = weight.dim(0), k = weight.dim(2);
  require(h + 2 * pad >= k && w + 2 * pad >= k, "conv2d kernel larger than padded input");
  const std::size_t oh = (h + 2 * pad - k) / stride + 1;
  const std::size_t ow = (w + 2 * pad - k) / stride + 1;
  const std::size_t ckk = c * k * k, l = oh * ow;
  const bool pointwise = k == 1 && stride == 1 && pad == 0;

  using Mat = detail::RowMat<T>;
  using CMap = Eigen::Map<const Mat>;
  auto cols = std::make_shared<std::vector<T>>(pointwise ? 0 : n * ckk * l);
  std::vector<T> out(n * o * l);
  CMap wm(weight.data().data(), o, ckk);
  for (std::size_t b = 0; b < n; ++b) {
    const T* xb = input.data().data() + b * c * h * w;
    const T* col = xb;
    if (!pointwise) {
      detail::im2col(xb, c, h, w, k, stride, pad, oh, ow, cols->data() + b * ckk * l);
      col = cols->data() + b * ckk * l;
    }
    Eigen::Map<Mat> om(out.data() + b * o * l, o, l);
    om.noalias() = wm * CMap(col, ckk, l);
    for (std::size_t oc = 0; oc < o; ++oc) om.row(oc).array() += bias.data()[oc];
  }

  auto xn = input.node(), wn = weight.node(), bn = bias.node();
  return detail::make_result<T>(
      "conv2d", {n, o, oh, ow}, std::move(out), {xn, wn, bn},
      [=](detail::Node<T>& self) {
        CMap wmat(wn->value.data(), o, ckk);
        std::vector<T> dcol(xn->requires_grad ? ckk * l : 0);
        for (std::size_t b = 0; b < n; ++b) {
          CMap dout(self.grad.data() + b * o * l, o, l);
          const T* col = pointwise ? xn->value.data() + b * c * h * w : cols->data() + b * ckk * l;
          if (wn->requires_grad) {
            Eigen::Map<Mat> dw(wn->grad_buffer().data(), o, ckk);
            dw.noalias() += dout * CMap(col, ckk, l).transpose();
          }
          if (bn->requires_grad) {
            auto& db = bn->grad_buffer();
            for (std::size_t oc = 0; oc < o; ++oc) db[oc] += dout.row(oc).sum();
          }
          if (xn->requires_grad) {
            T* dx = xn->grad_buffer().data() + b * c * h * w;
            if (pointwise) {
              Eigen::Map<Mat> dxm(dx, c, l);
              dxm.noalias() += wmat.transpose() * dout;
            } else {
              Eigen::Map<Mat> dcm(dcol.data(), ckk, l);
              dcm.noalias() = wmat.transpose() * dout;
              detail::col2im_add(dcol.data(), c, h, w, k, stride, pad, oh, ow, dx);
            }
          }
        }
      });
}

// input N×F, weight G×F, bias G -> N×G.
template <class T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  using detail::require;
  require(input.rank() == 2 && weight.rank() == 2 && bias.rank() == 1, "linear expects N×F, G×F, G");
  require(input.dim(1) == weight.dim(1), "linear inner dimension mismatch: " + shape_str(input.shape()) +
                                             " vs " + shape_str(weight.shape()));
  require(bias.dim(0) == weight.dim(0), "linear bias must have G entries");
  const std::size_t n = input.dim(0), f = input.dim(1), g = weight.dim(0);
  using Mat = detail::RowMat<T>;
  using CMap = Eigen::Map<const Mat>;
  std::vector<T> out(n * g);
  Eigen::Map<Mat> om(out.data(), n, g);
  om.noalias() = CMap(input.data().data(), n, f) * CMap(weight.data().data(), g, f).transpose();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < g; ++j) om(i, j) += bias.data()[j];
  }
  auto xn = input.node(), wn = weight.node(), bn = bias.node();
  return detail::make_result<T>("linear", {n, g}, std::move(out), {xn, wn, bn}, [=](detail::Node<T>& self) {
    CMap dout(self.grad.data(), n, g);
    if (xn->requires_grad) {
      Eigen::Map<Mat> dx(xn->grad_buffer().data(), n, f);
      dx.noalias() += dout * CMap(wn->value.data(), g, f);
    }
    if (wn->requires_grad) {
      Eigen::Map<Mat> dw(wn->grad_buffer().data(), g, f);
      dw.noalias() += dout.transpose() * CMap(xn->value.data(), n, f);
    }
    if (bn->requires_grad) {
      auto& db = bn->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < g; ++j) db[j] += dout(i, j);
      }
    }
  });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  auto xn = x.node();
  return detail::make_result<T>("relu", x.shape(), std::move(out), {xn}, [xn](detail::Node<T>& self) {
    if (!xn->requires_grad) return;
    auto& g = xn->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xn->value[i] > T(0)) g[i] += self.grad[i];
    }
  });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x.data()[i];
    // Branch on sign so exp never overflows.
    out[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  }
  auto xn = x.node();
  return detail::make_result<T>("sigmoid", x.shape(), std::move(out), {xn}, [xn](detail::Node<T>& self) {
    if (!xn->requires_grad) return;
    auto& g = xn->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = self.value[i];
      g[i] += self.grad[i] * s * (T(1) - s);
    }
  });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>("add", a.shape(), std::move(out), {an, bn}, [an, bn](detail::Node<T>& self) {
    detail::accumulate<T>(*an, self.grad);
    detail::accumulate<T>(*bn, self.grad);
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  auto xn = x.node();
  return detail::make_result<T>("scale", x.shape(), std::move(out), {xn}, [xn, factor](detail::Node<T>& self) {
    if (!xn->requires_grad) return;
    auto& g = xn->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  auto xn = x.node();
  return detail::make_result<T>("sum", {}, {total}, {xn}, [xn](detail::Node<T>& self) {
    if (!xn->requires_grad) return;
    for (auto& g : xn->grad_buffer()) g += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  detail::require(x.numel() > 0, "mean of empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// Σ weights[i] · terms[i] over scalar terms, accumulated left to right.
template <class T>
Tensor<T> weighted_sum(const std::vector<Tensor<T>>& terms, const std::vector<T>& weights) {
  detail::require(terms.size() == weights.size() && !terms.empty(), "weighted_sum needs matching non-empty lists");
  T total = T(0);
  std::vector<std::shared_ptr<detail::Node<T>>> inputs;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    detail::require(terms[i].numel() == 1, "weighted_sum terms must be scalars");
    total += weights[i] * terms[i].item();
    inputs.push_back(terms[i].node());
  }
  return detail::make_result<T>("weighted_sum", {}, {total}, inputs, [inputs, weights](detail::Node<T>& self) {
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (inputs[i]->requires_grad) inputs[i]->grad_buffer()[0] += weights[i] * self.grad[0];
    }
  });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape) {
  detail::require(numel(shape) == x.numel(),
                  "reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
  auto xn = x.node();
  return detail::make_result<T>("reshape", shape, std::vector<T>(x.data().begin(), x.data().end()), {xn},
                                [xn](detail::Node<T>& self) { detail::accumulate<T>(*xn, self.grad); });
}

// Each pixel of an NCHW map becomes a 2×2 block.
template <class T>
Tensor<T> nearest_upsample2x(const Tensor<T>& x) {
  detail::require(x.rank() == 4, "nearest_upsample2x expects NCHW");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = 2 * h, ow = 2 * w;
  std::vector<T> out(planes * oh * ow);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        out[(p * oh + y) * ow + xx] = x.data()[(p * h + y / 2) * w + xx / 2];
      }
    }
  }
  auto xn = x.node();
  return detail::make_result<T>(
      "nearest_upsample2x", {x.dim(0), x.dim(1), oh, ow}, std::move(out), {xn}, [=](detail::Node<T>& self) {
        if (!xn->requires_grad) return;
        auto& g = xn->grad_buffer();
        for (std::size_t p = 0; p < planes; ++p) {
          for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t xx = 0; xx < ow; ++xx) g[(p * h + y / 2) * w + xx / 2] += self.grad[(p * oh + y) * ow + xx];
          }
        }
      });
}

// Flattens and joins tensors end to end.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts) {
  std::vector<T> out;
  std::vector<std::shared_ptr<detail::Node<T>>> inputs;
  for (const auto& p : parts) {
    out.insert(out.end(), p.data().begin(), p.data().end());
    inputs.push_back(p.node());
  }
  const std::size_t total = out.size();
  return detail::make_result<T>("concat", {total}, std::move(out), inputs, [inputs](detail::Node<T>& self) {
    std::size_t offset = 0;
    for (const auto& in : inputs) {
      if (in->requires_grad) {
        auto& g = in->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offset + i];
      }
      offset += in->value.size();
    }
  });
}

// out.flat[i] = x.flat[indices[i]], reshaped to out_shape. Repeated indices accumulate.
template <class T>
Tensor<T> gather(const Tensor<T>& x, const std::vector<std::size_t>& indices, const Shape& out_shape) {
  detail::require(numel(out_shape) == indices.size(), "gather output shape does not match index count");
  std::vector<T> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    detail::require(indices[i] < x.numel(), "gather index out of range");
    out[i] = x.data()[indices[i]];
  }
  auto xn = x.node();
  return detail::make_result<T>("gather", out_shape, std::move(out), {xn}, [xn, indices](detail::Node<T>& self) {
    if (!xn->requires_grad) return;
    auto& g = xn->grad_buffer();
    for (std::size_t i = 0; i < indices.size(); ++i) g[indices[i]] += self.grad[i];
  });
}

// Rows of an N×F tensor, in the given order.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& rows) {
  detail::require(x.rank() >= 1, "gather_rows on a scalar");
  const std::size_t row = x.numel() / std::max<std::size_t>(x.dim(0), 1);
  std::vector<std::size_t> idx;
  idx.reserve(rows.size() * row);
  for (auto r : rows) {
    detail::require(r < x.dim(0), "gather_rows index out of range");
    for (std::size_t j = 0; j < row; ++j) idx.push_back(r * row + j);
  }
  Shape shape = x.shape();
  shape[0] = rows.size();
  return gather(x, idx, shape);
}

// Mean over rows of −log softmax(logits)[target], via a max-shifted log-sum-exp.
template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& targets) {
  detail::require(logits.rank() == 2, "softmax_cross_entropy expects N×K logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  detail::require(targets.size() == n && n > 0, "softmax_cross_entropy needs one target per row");
  auto probs = std::make_shared<std::vector<T>>(n * k);
  T total = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] >= k) {
      throw std::out_of_range("class target " + std::to_string(targets[i]) + " outside [0, " + std::to_string(k) + ")");
    }
    const T* row = logits.data().data() + i * k;
    const T m = *std::max_element(row, row + k);
    T z = T(0);
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - m);
    const T lse = m + std::log(z);
    total += lse - row[targets[i]];
    for (std::size_t j = 0; j < k; ++j) (*probs)[i * k + j] = std::exp(row[j] - lse);
  }
  auto ln = logits.node();
  const T inv_n = T(1) / static_cast<T>(n);
  return detail::make_result<T>(
      "softmax_cross_entropy", {}, {total * inv_n}, {ln}, [=](detail::Node<T>& self) {
        if (!ln->requires_grad) return;
        auto& g = ln->grad_buffer();
        const T s = self.grad[0] * inv_n;
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < k; ++j) {
            const T onehot = j == targets[i] ? T(1) : T(0);
            g[i * k + j] += s * ((*probs)[i * k + j] - onehot);
          }
        }
      });
}

// Mean of 0.5·d² for |d| < 1, |d| − 0.5 otherwise.
template <class T>
Tensor<T> smooth_l1(const Tensor<T>& pred, const Tensor<T>& target) {
  detail::require(pred.shape() == target.shape(), "smooth_l1 shape mismatch: " + shape_str(pred.shape()) + " vs " +
                                                      shape_str(target.shape()));
  detail::require(pred.numel() > 0, "smooth_l1 of empty tensors");
  const std::size_t n = pred.numel();
  T total = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const T d = pred.data()[i] - target.data()[i];
    total += std::abs(d) < T(1) ? T(0.5) * d * d : std::abs(d) - T(0.5);
  }
  auto pn = pred.node(), tn = target.node();
  const T inv_n = T(1) / static_cast<T>(n);
  return detail::make_result<T>("smooth_l1", {}, {total * inv_n}, {pn, tn}, [=](detail::Node<T>& self) {
    const T s = self.grad[0] * inv_n;
    for (std::size_t i = 0; i < n; ++i) {
      const T d = pn->value[i] - tn->value[i];
      const T dd = std::abs(d) < T(1) ? d : (d > T(0) ? T(1) : T(-1));
      if (pn->requires_grad) pn->grad_buffer()[i] += s * dd;
      if (tn->requires_grad) tn->grad_buffer()[i] -= s * dd;
    }
  });
}

// Mean of −[t·log σ(x) + (1−t)·log(1−σ(x))] computed as max(x,0) − x·t + log1p(exp(−|x|)).
template <class T>
Tensor<T> binary_cross_entropy_with_logits(const Tensor<T>& logits, const Tensor<T>& targets) {
  detail::require(logits.shape() == targets.shape(), "binary_cross_entropy shape mismatch");
  detail::require(logits.numel() > 0, "binary_cross_entropy of empty tensors");
  const std::size_t n = logits.numel();
  T total = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const T x = logits.data()[i], t = targets.data()[i];
    if (t != T(0) && t != T(1)) throw std::domain_error("binary target must be 0 or 1");
    total += std::max(x, T(0)) - x * t + std::log1p(std::exp(-std::abs(x)));
  }
  auto ln = logits.node(), tn = targets.node();
  const T inv_n = T(1) / static_cast<T>(n);
  return detail::make_result<T>(
      "binary_cross_entropy_with_logits", {}, {total * inv_n}, {ln, tn}, [=](detail::Node<T>& self) {
        if (!ln->requires_grad) return;
        auto& g = ln->grad_buffer();
        const T s = self.grad[0] * inv_n;
        for (std::size_t i = 0; i < n; ++i) {
          const T x = ln->value[i];
          const T sig = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
          g[i] += s * (sig - tn->value[i]);
        }
      });
}

}  // namespace dsfpn::ops
