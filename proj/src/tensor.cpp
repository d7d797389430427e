#include "idpg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <utility>

namespace idpg {

namespace {

constexpr double kSqrt2 = 1.41421356237309504880;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void ensure_grad_buf(TensorData& t) {
  if (t.grad.empty()) t.grad.assign(t.value.size(), 0.0);
}

void add_grad(TensorData& t, std::size_t i, double v) {
  t.grad[i] = round_to(t.dtype, t.grad[i] + round_to(t.dtype, v));
}

}  // namespace

std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << "]";
  return os.str();
}

Tensor Tensor::zeros(Shape shape, DType dt, bool requires_grad) {
  auto d = std::make_shared<TensorData>();
  d->shape = std::move(shape);
  d->value.assign(shape_size(d->shape), 0.0);
  d->requires_grad = requires_grad;
  d->dtype = dt;
  return Tensor(std::move(d));
}

Tensor Tensor::full(Shape shape, double v, DType dt, bool requires_grad) {
  Tensor t = zeros(std::move(shape), dt, requires_grad);
  std::fill(t.d_->value.begin(), t.d_->value.end(), round_to(dt, v));
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, DType dt,
                    bool requires_grad) {
  if (values.size() != shape_size(shape)) {
    throw DimensionError("tensor: " + std::to_string(values.size()) +
                         " values do not fill shape " + shape_str(shape));
  }
  auto d = std::make_shared<TensorData>();
  d->shape = std::move(shape);
  d->value = std::move(values);
  for (double& x : d->value) x = round_to(dt, x);
  d->requires_grad = requires_grad;
  d->dtype = dt;
  return Tensor(std::move(d));
}

Tensor Tensor::scalar(double v, DType dt) {
  return from({1}, {v}, dt, false);
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= d_->shape.size()) {
    throw IndexError("tensor: axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(d_->shape));
  }
  return d_->shape[axis];
}

double Tensor::at(std::size_t i) const {
  if (i >= d_->value.size()) {
    throw IndexError("tensor: flat index " + std::to_string(i) +
                     " out of range for size " + std::to_string(d_->value.size()));
  }
  return d_->value[i];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  if (rank() != 2) {
    throw DimensionError("tensor: 2d access on shape " + shape_str(d_->shape));
  }
  if (r >= d_->shape[0] || c >= d_->shape[1]) {
    throw IndexError("tensor: index (" + std::to_string(r) + ", " +
                     std::to_string(c) + ") out of range for shape " +
                     shape_str(d_->shape));
  }
  return d_->value[r * d_->shape[1] + c];
}

void Tensor::set(std::size_t i, double v) {
  if (i >= d_->value.size()) {
    throw IndexError("tensor: flat index " + std::to_string(i) +
                     " out of range for size " + std::to_string(d_->value.size()));
  }
  d_->value[i] = round_to(d_->dtype, v);
}

void Tensor::fill(const std::vector<double>& values) {
  if (values.size() != d_->value.size()) {
    throw DimensionError("tensor: fill with " + std::to_string(values.size()) +
                         " values into size " + std::to_string(d_->value.size()));
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    d_->value[i] = round_to(d_->dtype, values[i]);
  }
}

Tensor Tensor::clone() const {
  auto d = std::make_shared<TensorData>();
  d->shape = d_->shape;
  d->value = d_->value;
  d->requires_grad = d_->requires_grad;
  d->dtype = d_->dtype;
  return Tensor(std::move(d));
}

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) {
    throw ContractError("tensor: gradient not populated; run backward first");
  }
  return d_->grad;
}

void Tensor::ensure_grad() { ensure_grad_buf(*d_); }

Tensor Tape::constant(Shape shape, std::vector<double> values) const {
  return Tensor::from(std::move(shape), std::move(values), dtype_, false);
}

Tensor Tape::make(Shape shape, std::vector<double> values, bool requires_grad) {
  Tensor t = Tensor::from(std::move(shape), std::move(values), dtype_, false);
  t.d_->requires_grad = requires_grad;
  return t;
}

void Tape::check(const Tensor& t, const char* op) const {
  if (!t.defined()) {
    throw ContractError(std::string(op) + ": undefined tensor operand");
  }
  if (t.dtype() != dtype_) {
    throw ContractError(std::string(op) + ": operand dtype " +
                        dtype_name(t.dtype()) + " on a " + dtype_name(dtype_) +
                        " tape");
  }
}

void Tape::check_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got shape " +
                         shape_str(t.shape()));
  }
}

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  check(a, "matmul");
  check(b, "matmul");
  if (a.rank() == 2 && b.rank() == 2) {
    const std::size_t r = a.dim(0), k = a.dim(1), c = b.dim(1);
    if (b.dim(0) != k) {
      throw DimensionError("matmul: inner dims disagree, " +
                           shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    std::vector<double> out(r * c, 0.0);
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        double acc = 0.0;
        for (std::size_t t = 0; t < k; ++t) acc += av[i * k + t] * bv[t * c + j];
        out[i * c + j] = acc;
      }
    }
    Tensor y = make({r, c}, std::move(out), a.requires_grad() || b.requires_grad());
    if (y.requires_grad()) {
      auto ad = a.d_, bd = b.d_, yd = y.d_;
      nodes_.push_back([ad, bd, yd, r, k, c] {
        if (yd->grad.empty()) return;
        if (ad->requires_grad) {
          ensure_grad_buf(*ad);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t t = 0; t < k; ++t) {
              double acc = 0.0;
              for (std::size_t j = 0; j < c; ++j)
                acc += yd->grad[i * c + j] * bd->value[t * c + j];
              add_grad(*ad, i * k + t, acc);
            }
        }
        if (bd->requires_grad) {
          ensure_grad_buf(*bd);
          for (std::size_t t = 0; t < k; ++t)
            for (std::size_t j = 0; j < c; ++j) {
              double acc = 0.0;
              for (std::size_t i = 0; i < r; ++i)
                acc += ad->value[i * k + t] * yd->grad[i * c + j];
              add_grad(*bd, t * c + j, acc);
            }
        }
      });
    }
    return y;
  }
  if (a.rank() == 2 && b.rank() == 1) {
    const std::size_t r = a.dim(0), k = a.dim(1);
    if (b.dim(0) != k) {
      throw DimensionError("matmul: inner dims disagree, " +
                           shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    std::vector<double> out(r, 0.0);
    for (std::size_t i = 0; i < r; ++i) {
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += a.values()[i * k + t] * b.values()[t];
      out[i] = acc;
    }
    Tensor y = make({r}, std::move(out), a.requires_grad() || b.requires_grad());
    if (y.requires_grad()) {
      auto ad = a.d_, bd = b.d_, yd = y.d_;
      nodes_.push_back([ad, bd, yd, r, k] {
        if (yd->grad.empty()) return;
        if (ad->requires_grad) {
          ensure_grad_buf(*ad);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t t = 0; t < k; ++t)
              add_grad(*ad, i * k + t, yd->grad[i] * bd->value[t]);
        }
        if (bd->requires_grad) {
          ensure_grad_buf(*bd);
          for (std::size_t t = 0; t < k; ++t) {
            double acc = 0.0;
            for (std::size_t i = 0; i < r; ++i)
              acc += yd->grad[i] * ad->value[i * k + t];
            add_grad(*bd, t, acc);
          }
        }
      });
    }
    return y;
  }
  if (a.rank() == 1 && b.rank() == 2) {
    const std::size_t k = a.dim(0), c = b.dim(1);
    if (b.dim(0) != k) {
      throw DimensionError("matmul: inner dims disagree, " +
                           shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    std::vector<double> out(c, 0.0);
    for (std::size_t j = 0; j < c; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += a.values()[t] * b.values()[t * c + j];
      out[j] = acc;
    }
    Tensor y = make({c}, std::move(out), a.requires_grad() || b.requires_grad());
    if (y.requires_grad()) {
      auto ad = a.d_, bd = b.d_, yd = y.d_;
      nodes_.push_back([ad, bd, yd, k, c] {
        if (yd->grad.empty()) return;
        if (ad->requires_grad) {
          ensure_grad_buf(*ad);
          for (std::size_t t = 0; t < k; ++t) {
            double acc = 0.0;
            for (std::size_t j = 0; j < c; ++j)
              acc += yd->grad[j] * bd->value[t * c + j];
            add_grad(*ad, t, acc);
          }
        }
        if (bd->requires_grad) {
          ensure_grad_buf(*bd);
          for (std::size_t t = 0; t < k; ++t)
            for (std::size_t j = 0; j < c; ++j)
              add_grad(*bd, t * c + j, ad->value[t] * yd->grad[j]);
        }
      });
    }
    return y;
  }
  throw DimensionError("matmul: unsupported ranks " + shape_str(a.shape()) +
                       " x " + shape_str(b.shape()));
}

Tensor Tape::kron(const Tensor& a, const Tensor& b) {
  check(a, "kron");
  check(b, "kron");
  check_rank(a, 2, "kron");
  check_rank(b, 2, "kron");
  const std::size_t p = a.dim(0), q = a.dim(1), r = b.dim(0), s = b.dim(1);
  std::vector<double> out(p * r * q * s, 0.0);
  const std::size_t cols = q * s;
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j) {
      const double av = a.values()[i * q + j];
      for (std::size_t k = 0; k < r; ++k)
        for (std::size_t l = 0; l < s; ++l)
          out[(i * r + k) * cols + (j * s + l)] = av * b.values()[k * s + l];
    }
  Tensor y = make({p * r, q * s}, std::move(out),
                  a.requires_grad() || b.requires_grad());
  if (y.requires_grad()) {
    auto ad = a.d_, bd = b.d_, yd = y.d_;
    nodes_.push_back([ad, bd, yd, p, q, r, s, cols] {
      if (yd->grad.empty()) return;
      if (ad->requires_grad) {
        ensure_grad_buf(*ad);
        for (std::size_t i = 0; i < p; ++i)
          for (std::size_t j = 0; j < q; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < r; ++k)
              for (std::size_t l = 0; l < s; ++l)
                acc += yd->grad[(i * r + k) * cols + (j * s + l)] *
                       bd->value[k * s + l];
            add_grad(*ad, i * q + j, acc);
          }
      }
      if (bd->requires_grad) {
        ensure_grad_buf(*bd);
        for (std::size_t k = 0; k < r; ++k)
          for (std::size_t l = 0; l < s; ++l) {
            double acc = 0.0;
            for (std::size_t i = 0; i < p; ++i)
              for (std::size_t j = 0; j < q; ++j)
                acc += yd->grad[(i * r + k) * cols + (j * s + l)] *
                       ad->value[i * q + j];
            add_grad(*bd, k * s + l, acc);
          }
      }
    });
  }
  return y;
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  check(a, "add");
  check(b, "add");
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a.values()[i] + b.values()[i];
  Tensor y = make(a.shape(), std::move(out), a.requires_grad() || b.requires_grad());
  if (y.requires_grad()) {
    auto ad = a.d_, bd = b.d_, yd = y.d_;
    nodes_.push_back([ad, bd, yd] {
      if (yd->grad.empty()) return;
      if (ad->requires_grad) {
        ensure_grad_buf(*ad);
        for (std::size_t i = 0; i < yd->grad.size(); ++i)
          add_grad(*ad, i, yd->grad[i]);
      }
      if (bd->requires_grad) {
        ensure_grad_buf(*bd);
        for (std::size_t i = 0; i < yd->grad.size(); ++i)
          add_grad(*bd, i, yd->grad[i]);
      }
    });
  }
  return y;
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
  check(a, "sub");
  check(b, "sub");
  if (a.shape() != b.shape()) {
    throw DimensionError("sub: shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a.values()[i] - b.values()[i];
  Tensor y = make(a.shape(), std::move(out), a.requires_grad() || b.requires_grad());
  if (y.requires_grad()) {
    auto ad = a.d_, bd = b.d_, yd = y.d_;
    nodes_.push_back([ad, bd, yd] {
      if (yd->grad.empty()) return;
      if (ad->requires_grad) {
        ensure_grad_buf(*ad);
        for (std::size_t i = 0; i < yd->grad.size(); ++i)
          add_grad(*ad, i, yd->grad[i]);
      }
      if (bd->requires_grad) {
        ensure_grad_buf(*bd);
        for (std::size_t i = 0; i < yd->grad.size(); ++i)
          add_grad(*bd, i, -yd->grad[i]);
      }
    });
  }
  return y;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  check(a, "mul");
  check(b, "mul");
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a.values()[i] * b.values()[i];
  Tensor y = make(a.shape(), std::move(out), a.requires_grad() || b.requires_grad());
  if (y.requires_grad()) {
    auto ad = a.d_, bd = b.d_, yd = y.d_;
    nodes_.push_back([ad, bd, yd] {
      if (yd->grad.empty()) return;
      if (ad->requires_grad) {
        ensure_grad_buf(*ad);
        for (std::size_t i = 0; i < yd->grad.size(); ++i)
          add_grad(*ad, i, yd->grad[i] * bd->value[i]);
      }
      if (bd->requires_grad) {
        ensure_grad_buf(*bd);
        for (std::size_t i = 0; i < yd->grad.size(); ++i)
          add_grad(*bd, i, yd->grad[i] * ad->value[i]);
      }
    });
  }
  return y;
}

Tensor Tape::scale(const Tensor& a, double s) {
  check(a, "scale");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * s;
  Tensor y = make(a.shape(), std::move(out), a.requires_grad());
  if (y.requires_grad()) {
    auto ad = a.d_, yd = y.d_;
    nodes_.push_back([ad, yd, s] {
      if (yd->grad.empty()) return;
      ensure_grad_buf(*ad);
      for (std::size_t i = 0; i < yd->grad.size(); ++i)
        add_grad(*ad, i, yd->grad[i] * s);
    });
  }
  return y;
}

Tensor Tape::add_row(const Tensor& m, const Tensor& v) {
  check(m, "add_row");
  check(v, "add_row");
  check_rank(m, 2, "add_row");
  check_rank(v, 1, "add_row");
  const std::size_t r = m.dim(0), c = m.dim(1);
  if (v.dim(0) != c) {
    throw DimensionError("add_row: row size " + std::to_string(v.dim(0)) +
                         " vs matrix " + shape_str(m.shape()));
  }
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      out[i * c + j] = m.values()[i * c + j] + v.values()[j];
  Tensor y = make({r, c}, std::move(out), m.requires_grad() || v.requires_grad());
  if (y.requires_grad()) {
    auto md = m.d_, vd = v.d_, yd = y.d_;
    nodes_.push_back([md, vd, yd, r, c] {
      if (yd->grad.empty()) return;
      if (md->requires_grad) {
        ensure_grad_buf(*md);
        for (std::size_t i = 0; i < r * c; ++i) add_grad(*md, i, yd->grad[i]);
      }
      if (vd->requires_grad) {
        ensure_grad_buf(*vd);
        for (std::size_t j = 0; j < c; ++j) {
          double acc = 0.0;
          for (std::size_t i = 0; i < r; ++i) acc += yd->grad[i * c + j];
          add_grad(*vd, j, acc);
        }
      }
    });
  }
  return y;
}

Tensor Tape::tanh(const Tensor& a) {
  check(a, "tanh");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.values()[i]);
  Tensor y = make(a.shape(), std::move(out), a.requires_grad());
  if (y.requires_grad()) {
    auto ad = a.d_, yd = y.d_;
    nodes_.push_back([ad, yd] {
      if (yd->grad.empty()) return;
      ensure_grad_buf(*ad);
      for (std::size_t i = 0; i < yd->grad.size(); ++i) {
        const double t = yd->value[i];
        add_grad(*ad, i, yd->grad[i] * (1.0 - t * t));
      }
    });
  }
  return y;
}

Tensor Tape::relu(const Tensor& a) {
  check(a, "relu");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a.values()[i] > 0.0 ? a.values()[i] : 0.0;
  Tensor y = make(a.shape(), std::move(out), a.requires_grad());
  if (y.requires_grad()) {
    auto ad = a.d_, yd = y.d_;
    nodes_.push_back([ad, yd] {
      if (yd->grad.empty()) return;
      ensure_grad_buf(*ad);
      for (std::size_t i = 0; i < yd->grad.size(); ++i)
        if (ad->value[i] > 0.0) add_grad(*ad, i, yd->grad[i]);
    });
  }
  return y;
}

Tensor Tape::gelu(const Tensor& a) {
  check(a, "gelu");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.values()[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x / kSqrt2));
  }
  Tensor y = make(a.shape(), std::move(out), a.requires_grad());
  if (y.requires_grad()) {
    auto ad = a.d_, yd = y.d_;
    nodes_.push_back([ad, yd] {
      if (yd->grad.empty()) return;
      ensure_grad_buf(*ad);
      for (std::size_t i = 0; i < yd->grad.size(); ++i) {
        const double x = ad->value[i];
        const double cdf = 0.5 * (1.0 + std::erf(x / kSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        add_grad(*ad, i, yd->grad[i] * (cdf + x * pdf));
      }
    });
  }
  return y;
}

// Lines along `axis` are normalized independently; max is subtracted
// before exponentiation for stability.
Tensor Tape::softmax(const Tensor& a, int axis) {
  check(a, "softmax");
  std::size_t lines = 0, len = 0, base_stride = 0, stride = 0;
  if (a.rank() == 1) {
    if (axis != 0) {
      throw DimensionError("softmax: axis " + std::to_string(axis) +
                           " invalid for shape " + shape_str(a.shape()));
    }
    lines = 1, len = a.dim(0), base_stride = 0, stride = 1;
  } else if (a.rank() == 2) {
    if (axis == 1) {
      lines = a.dim(0), len = a.dim(1), base_stride = a.dim(1), stride = 1;
    } else if (axis == 0) {
      lines = a.dim(1), len = a.dim(0), base_stride = 1, stride = a.dim(1);
    } else {
      throw DimensionError("softmax: axis " + std::to_string(axis) +
                           " invalid for shape " + shape_str(a.shape()));
    }
  } else {
    throw DimensionError("softmax: unsupported shape " + shape_str(a.shape()));
  }
  if (len == 0) throw DimensionError("softmax: empty axis");
  std::vector<double> out(a.size());
  for (std::size_t l = 0; l < lines; ++l) {
    const std::size_t base = l * base_stride;
    double mx = a.values()[base];
    for (std::size_t i = 1; i < len; ++i)
      mx = std::max(mx, a.values()[base + i * stride]);
    double z = 0.0;
    for (std::size_t i = 0; i < len; ++i)
      z += std::exp(a.values()[base + i * stride] - mx);
    for (std::size_t i = 0; i < len; ++i)
      out[base + i * stride] = std::exp(a.values()[base + i * stride] - mx) / z;
  }
  Tensor y = make(a.shape(), std::move(out), a.requires_grad());
  if (y.requires_grad()) {
    auto ad = a.d_, yd = y.d_;
    nodes_.push_back([ad, yd, lines, len, base_stride, stride] {
      if (yd->grad.empty()) return;
      ensure_grad_buf(*ad);
      for (std::size_t l = 0; l < lines; ++l) {
        const std::size_t base = l * base_stride;
        double dot = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
          const std::size_t k = base + i * stride;
          dot += yd->grad[k] * yd->value[k];
        }
        for (std::size_t i = 0; i < len; ++i) {
          const std::size_t k = base + i * stride;
          add_grad(*ad, k, yd->value[k] * (yd->grad[k] - dot));
        }
      }
    });
  }
  return y;
}

Tensor Tape::log_softmax(const Tensor& a, int axis) {
  check(a, "log_softmax");
  std::size_t lines = 0, len = 0, base_stride = 0, stride = 0;
  if (a.rank() == 1) {
    if (axis != 0) {
      throw DimensionError("log_softmax: axis " + std::to_string(axis) +
                           " invalid for shape " + shape_str(a.shape()));
    }
    lines = 1, len = a.dim(0), base_stride = 0, stride = 1;
  } else if (a.rank() == 2 && (axis == 0 || axis == 1)) {
    if (axis == 1) {
      lines = a.dim(0), len = a.dim(1), base_stride = a.dim(1), stride = 1;
    } else {
      lines = a.dim(1), len = a.dim(0), base_stride = 1, stride = a.dim(1);
    }
  } else {
    throw DimensionError("log_softmax: unsupported shape " +
                         shape_str(a.shape()) + " axis " + std::to_string(axis));
  }
  if (len == 0) throw DimensionError("log_softmax: empty axis");
  std::vector<double> out(a.size());
  for (std::size_t l = 0; l < lines; ++l) {
    const std::size_t base = l * base_stride;
    double mx = a.values()[base];
    for (std::size_t i = 1; i < len; ++i)
      mx = std::max(mx, a.values()[base + i * stride]);
    double z = 0.0;
    for (std::size_t i = 0; i < len; ++i)
      z += std::exp(a.values()[base + i * stride] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t i = 0; i < len; ++i)
      out[base + i * stride] = a.values()[base + i * stride] - lz;
  }
  Tensor y = make(a.shape(), std::move(out), a.requires_grad());
  if (y.requires_grad()) {
    auto ad = a.d_, yd = y.d_;
    nodes_.push_back([ad, yd, lines, len, base_stride, stride] {
      if (yd->grad.empty()) return;
      ensure_grad_buf(*ad);
      for (std::size_t l = 0; l < lines; ++l) {
        const std::size_t base = l * base_stride;
        double gsum = 0.0;
        for (std::size_t i = 0; i < len; ++i)
          gsum += yd->grad[base + i * stride];
        for (std::size_t i = 0; i < len; ++i) {
          const std::size_t k = base + i * stride;
          add_grad(*ad, k, yd->grad[k] - std::exp(yd->value[k]) * gsum);
        }
      }
    });
  }
  return y;
}

// Normalizes the last axis: y = gain * (x - mean) / sqrt(var + eps) + shift,
// with the population variance.
Tensor Tape::layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift,
                        double eps) {
  check(x, "layer_norm");
  check(gain, "layer_norm");
  check(shift, "layer_norm");
  if (x.rank() != 1 && x.rank() != 2) {
    throw DimensionError("layer_norm: unsupported shape " + shape_str(x.shape()));
  }
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  check_rank(gain, 1, "layer_norm");
  check_rank(shift, 1, "layer_norm");
  if (gain.dim(0) != d || shift.dim(0) != d) {
    throw DimensionError("layer_norm: gain " + shape_str(gain.shape()) +
                         " / shift " + shape_str(shift.shape()) +
                         " do not match feature dim " + std::to_string(d));
  }
  if (d == 0) throw DimensionError("layer_norm: empty feature axis");
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += x.values()[base + j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = x.values()[base + j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    inv[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[base + j] = (x.values()[base + j] - mean) * inv[r];
      out[base + j] = gain.values()[j] * xhat[base + j] + shift.values()[j];
    }
  }
  Tensor y = make(x.shape(), std::move(out),
                  x.requires_grad() || gain.requires_grad() || shift.requires_grad());
  if (y.requires_grad()) {
    auto xd = x.d_, gd = gain.d_, sd = shift.d_, yd = y.d_;
    nodes_.push_back([xd, gd, sd, yd, rows, d, xhat = std::move(xhat),
                      inv = std::move(inv)] {
      if (yd->grad.empty()) return;
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * d;
        if (xd->requires_grad) {
          ensure_grad_buf(*xd);
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = yd->grad[base + j] * gd->value[j];
            m1 += dxh;
            m2 += dxh * xhat[base + j];
          }
          m1 /= static_cast<double>(d);
          m2 /= static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = yd->grad[base + j] * gd->value[j];
            add_grad(*xd, base + j, inv[r] * (dxh - m1 - xhat[base + j] * m2));
          }
        }
        if (gd->requires_grad) {
          ensure_grad_buf(*gd);
          for (std::size_t j = 0; j < d; ++j)
            add_grad(*gd, j, yd->grad[base + j] * xhat[base + j]);
        }
        if (sd->requires_grad) {
          ensure_grad_buf(*sd);
          for (std::size_t j = 0; j < d; ++j)
            add_grad(*sd, j, yd->grad[base + j]);
        }
      }
    });
  }
  return y;
}

Tensor Tape::transpose(const Tensor& a) {
  check(a, "transpose");
  check_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.values()[i * c + j];
  Tensor y = make({c, r}, std::move(out), a.requires_grad());
  if (y.requires_grad()) {
    auto ad = a.d_, yd = y.d_;
    nodes_.push_back([ad, yd, r, c] {
      if (yd->grad.empty()) return;
      ensure_grad_buf(*ad);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j)
          add_grad(*ad, i * c + j, yd->grad[j * r + i]);
    });
  }
  return y;
}

Tensor Tape::reshape(const Tensor& a, Shape shape) {
  check(a, "reshape");
  if (shape_size(shape) != a.size()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " to " +
                         shape_str(shape) + " changes element count");
  }
  Tensor y = make(std::move(shape), a.values(), a.requires_grad());
  if (y.requires_grad()) {
    auto ad = a.d_, yd = y.d_;
    nodes_.push_back([ad, yd] {
      if (yd->grad.empty()) return;
      ensure_grad_buf(*ad);
      for (std::size_t i = 0; i < yd->grad.size(); ++i)
        add_grad(*ad, i, yd->grad[i]);
    });
  }
  return y;
}

Tensor Tape::gather_rows(const Tensor& table, const std::vector<std::size_t>& ids) {
  check(table, "gather_rows");
  check_rank(table, 2, "gather_rows");
  if (ids.empty()) throw DimensionError("gather_rows: empty id list");
  const std::size_t rows = table.dim(0), c = table.dim(1);
  for (std::size_t id : ids) {
    if (id >= rows) {
      throw IndexError("gather_rows: id " + std::to_string(id) +
                       " out of range for table with " + std::to_string(rows) +
                       " rows");
    }
  }
  std::vector<double> out(ids.size() * c);
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (std::size_t j = 0; j < c; ++j)
      out[i * c + j] = table.values()[ids[i] * c + j];
  Tensor y = make({ids.size(), c}, std::move(out), table.requires_grad());
  if (y.requires_grad()) {
    auto td = table.d_, yd = y.d_;
    nodes_.push_back([td, yd, ids, c] {
      if (yd->grad.empty()) return;
      ensure_grad_buf(*td);
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < c; ++j)
          add_grad(*td, ids[i] * c + j, yd->grad[i * c + j]);
    });
  }
  return y;
}

Tensor Tape::concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no parts");
  std::size_t rows = 0;
  const std::size_t c = [&] {
    check(parts[0], "concat_rows");
    check_rank(parts[0], 2, "concat_rows");
    return parts[0].dim(1);
  }();
  bool rg = false;
  for (const Tensor& p : parts) {
    check(p, "concat_rows");
    check_rank(p, 2, "concat_rows");
    if (p.dim(1) != c) {
      throw DimensionError("concat_rows: column mismatch " +
                           shape_str(p.shape()) + " vs " +
                           shape_str(parts[0].shape()));
    }
    rows += p.dim(0);
    rg = rg || p.requires_grad();
  }
  std::vector<double> out;
  out.reserve(rows * c);
  for (const Tensor& p : parts)
    out.insert(out.end(), p.values().begin(), p.values().end());
  Tensor y = make({rows, c}, std::move(out), rg);
  if (y.requires_grad()) {
    std::vector<std::shared_ptr<TensorData>> pd;
    pd.reserve(parts.size());
    for (const Tensor& p : parts) pd.push_back(p.d_);
    auto yd = y.d_;
    nodes_.push_back([pd = std::move(pd), yd, c] {
      if (yd->grad.empty()) return;
      std::size_t off = 0;
      for (const auto& p : pd) {
        const std::size_t n = p->value.size();
        if (p->requires_grad) {
          ensure_grad_buf(*p);
          for (std::size_t i = 0; i < n; ++i) add_grad(*p, i, yd->grad[off + i]);
        }
        off += n;
      }
    });
  }
  return y;
}

Tensor Tape::concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no parts");
  check(parts[0], "concat_cols");
  check_rank(parts[0], 2, "concat_cols");
  const std::size_t r = parts[0].dim(0);
  std::size_t cols = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    check(p, "concat_cols");
    check_rank(p, 2, "concat_cols");
    if (p.dim(0) != r) {
      throw DimensionError("concat_cols: row mismatch " + shape_str(p.shape()) +
                           " vs " + shape_str(parts[0].shape()));
    }
    cols += p.dim(1);
    rg = rg || p.requires_grad();
  }
  std::vector<double> out(r * cols);
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    const std::size_t pc = p.dim(1);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < pc; ++j)
        out[i * cols + off + j] = p.values()[i * pc + j];
    off += pc;
  }
  Tensor y = make({r, cols}, std::move(out), rg);
  if (y.requires_grad()) {
    std::vector<std::shared_ptr<TensorData>> pd;
    pd.reserve(parts.size());
    for (const Tensor& p : parts) pd.push_back(p.d_);
    auto yd = y.d_;
    nodes_.push_back([pd = std::move(pd), yd, r, cols] {
      if (yd->grad.empty()) return;
      std::size_t off = 0;
      for (const auto& p : pd) {
        const std::size_t pc = p->shape[1];
        if (p->requires_grad) {
          ensure_grad_buf(*p);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < pc; ++j)
              add_grad(*p, i * pc + j, yd->grad[i * cols + off + j]);
        }
        off += pc;
      }
    });
  }
  return y;
}

Tensor Tape::slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
  check(a, "slice_rows");
  check_rank(a, 2, "slice_rows");
  const std::size_t r = a.dim(0), c = a.dim(1);
  if (start + count > r) {
    throw IndexError("slice_rows: range [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") exceeds " +
                     shape_str(a.shape()));
  }
  std::vector<double> out(a.values().begin() + start * c,
                          a.values().begin() + (start + count) * c);
  Tensor y = make({count, c}, std::move(out), a.requires_grad());
  if (y.requires_grad()) {
    auto ad = a.d_, yd = y.d_;
    nodes_.push_back([ad, yd, start, c] {
      if (yd->grad.empty()) return;
      ensure_grad_buf(*ad);
      for (std::size_t i = 0; i < yd->grad.size(); ++i)
        add_grad(*ad, start * c + i, yd->grad[i]);
    });
  }
  return y;
}

Tensor Tape::slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
  check(a, "slice_cols");
  check_rank(a, 2, "slice_cols");
  const std::size_t r = a.dim(0), c = a.dim(1);
  if (start + count > c) {
    throw IndexError("slice_cols: range [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") exceeds " +
                     shape_str(a.shape()));
  }
  std::vector<double> out(r * count);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < count; ++j)
      out[i * count + j] = a.values()[i * c + start + j];
  Tensor y = make({r, count}, std::move(out), a.requires_grad());
  if (y.requires_grad()) {
    auto ad = a.d_, yd = y.d_;
    nodes_.push_back([ad, yd, r, c, start, count] {
      if (yd->grad.empty()) return;
      ensure_grad_buf(*ad);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < count; ++j)
          add_grad(*ad, i * c + start + j, yd->grad[i * count + j]);
    });
  }
  return y;
}

Tensor Tape::overwrite_rows(const Tensor& base, const Tensor& rows,
                            std::size_t start) {
  check(base, "overwrite_rows");
  check(rows, "overwrite_rows");
  check_rank(base, 2, "overwrite_rows");
  check_rank(rows, 2, "overwrite_rows");
  const std::size_t r = base.dim(0), c = base.dim(1), t = rows.dim(0);
  if (rows.dim(1) != c || start + t > r) {
    throw DimensionError("overwrite_rows: rows " + shape_str(rows.shape()) +
                         " at " + std::to_string(start) + " do not fit " +
                         shape_str(base.shape()));
  }
  std::vector<double> out = base.values();
  for (std::size_t i = 0; i < t * c; ++i) out[start * c + i] = rows.values()[i];
  Tensor y = make({r, c}, std::move(out), base.requires_grad() || rows.requires_grad());
  if (y.requires_grad()) {
    auto bd = base.d_, rd = rows.d_, yd = y.d_;
    nodes_.push_back([bd, rd, yd, c, t, start] {
      if (yd->grad.empty()) return;
      if (bd->requires_grad) {
        ensure_grad_buf(*bd);
        for (std::size_t i = 0; i < yd->grad.size(); ++i) {
          if (i >= start * c && i < (start + t) * c) continue;
          add_grad(*bd, i, yd->grad[i]);
        }
      }
      if (rd->requires_grad) {
        ensure_grad_buf(*rd);
        for (std::size_t i = 0; i < t * c; ++i)
          add_grad(*rd, i, yd->grad[start * c + i]);
      }
    });
  }
  return y;
}

Tensor Tape::row(const Tensor& a, std::size_t r) {
  check(a, "row");
  check_rank(a, 2, "row");
  if (r >= a.dim(0)) {
    throw IndexError("row: index " + std::to_string(r) + " out of range for " +
                     shape_str(a.shape()));
  }
  const std::size_t c = a.dim(1);
  std::vector<double> out(a.values().begin() + r * c,
                          a.values().begin() + (r + 1) * c);
  Tensor y = make({c}, std::move(out), a.requires_grad());
  if (y.requires_grad()) {
    auto ad = a.d_, yd = y.d_;
    nodes_.push_back([ad, yd, r, c] {
      if (yd->grad.empty()) return;
      ensure_grad_buf(*ad);
      for (std::size_t j = 0; j < c; ++j) add_grad(*ad, r * c + j, yd->grad[j]);
    });
  }
  return y;
}

Tensor Tape::mean_rows(const Tensor& a) {
  check(a, "mean_rows");
  check_rank(a, 2, "mean_rows");
  const std::size_t r = a.dim(0), c = a.dim(1);
  if (r == 0) throw DimensionError("mean_rows: no rows");
  std::vector<double> out(c, 0.0);
  for (std::size_t j = 0; j < c; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < r; ++i) acc += a.values()[i * c + j];
    out[j] = acc / static_cast<double>(r);
  }
  Tensor y = make({c}, std::move(out), a.requires_grad());
  if (y.requires_grad()) {
    auto ad = a.d_, yd = y.d_;
    nodes_.push_back([ad, yd, r, c] {
      if (yd->grad.empty()) return;
      ensure_grad_buf(*ad);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j)
          add_grad(*ad, i * c + j, yd->grad[j] / static_cast<double>(r));
    });
  }
  return y;
}

Tensor Tape::sum(const Tensor& a) {
  check(a, "sum");
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  Tensor y = make({1}, {acc}, a.requires_grad());
  if (y.requires_grad()) {
    auto ad = a.d_, yd = y.d_;
    nodes_.push_back([ad, yd] {
      if (yd->grad.empty()) return;
      ensure_grad_buf(*ad);
      for (std::size_t i = 0; i < ad->value.size(); ++i)
        add_grad(*ad, i, yd->grad[0]);
    });
  }
  return y;
}

Tensor Tape::mean(const Tensor& a) {
  check(a, "mean");
  if (a.size() == 0) throw DimensionError("mean: empty tensor");
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  const double n = static_cast<double>(a.size());
  Tensor y = make({1}, {acc / n}, a.requires_grad());
  if (y.requires_grad()) {
    auto ad = a.d_, yd = y.d_;
    nodes_.push_back([ad, yd, n] {
      if (yd->grad.empty()) return;
      ensure_grad_buf(*ad);
      for (std::size_t i = 0; i < ad->value.size(); ++i)
        add_grad(*ad, i, yd->grad[0] / n);
    });
  }
  return y;
}

Tensor Tape::pick(const Tensor& a, std::size_t i) {
  check(a, "pick");
  if (i >= a.size()) {
    throw IndexError("pick: flat index " + std::to_string(i) +
                     " out of range for size " + std::to_string(a.size()));
  }
  Tensor y = make({1}, {a.values()[i]}, a.requires_grad());
  if (y.requires_grad()) {
    auto ad = a.d_, yd = y.d_;
    nodes_.push_back([ad, yd, i] {
      if (yd->grad.empty()) return;
      ensure_grad_buf(*ad);
      add_grad(*ad, i, yd->grad[0]);
    });
  }
  return y;
}

void Tape::backward(const Tensor& loss) {
  check(loss, "backward");
  if (loss.size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " +
                        shape_str(loss.shape()));
  }
  if (backward_done_) {
    throw ContractError("backward: tape already replayed; build a new tape");
  }
  backward_done_ = true;
  loss.d_->grad.assign(1, 1.0);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

}  // namespace idpg
