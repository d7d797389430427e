#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "idpg/common.hpp"

namespace idpg {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorData {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until backward reaches this tensor
  bool requires_grad = false;
  DType dtype = DType::f64;
};

// Handle with shared storage; copying a Tensor aliases the same data.
// Tensors are not tied to a tape: tapes record ops, tensors hold state.
// A tensor never produced by a tape op is a leaf; leaves with
// requires_grad are the trainable parameters.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, DType dt, bool requires_grad = false);
  static Tensor full(Shape shape, double v, DType dt, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, DType dt,
                     bool requires_grad = false);
  static Tensor scalar(double v, DType dt);

  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  std::size_t rank() const { return d_->shape.size(); }
  std::size_t size() const { return d_->value.size(); }
  std::size_t dim(std::size_t axis) const;
  DType dtype() const { return d_->dtype; }
  bool requires_grad() const { return d_->requires_grad; }

  double at(std::size_t i) const;
  double at(std::size_t r, std::size_t c) const;
  const std::vector<double>& values() const { return d_->value; }
  void set(std::size_t i, double v);
  void fill(const std::vector<double>& values);
  Tensor clone() const;

  bool has_grad() const { return d_ && !d_->grad.empty(); }
  const std::vector<double>& grad() const;
  void ensure_grad();
  void zero_grad() { if (d_) d_->grad.clear(); }

  // Identity of the underlying storage; used to deduplicate shared
  // parameters (PHM pools) when counting or serializing.
  const void* id() const { return d_.get(); }
  TensorData* data() { return d_.get(); }
  const TensorData* data() const { return d_.get(); }

 private:
  explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
  std::shared_ptr<TensorData> d_;
  friend class Tape;
};

// Records one forward pass and replays it in reverse insertion order on
// backward(). An explicit per-forward object, never global, so tests can
// run tapes concurrently. Every operand must carry the tape's dtype:
// gradcheck runs on f64 tapes, training on f32 tapes, never mixed.
// In f32 mode intermediate arithmetic still accumulates in double and
// results are stored rounded to float.
class Tape {
 public:
  explicit Tape(DType dt) : dtype_(dt) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  DType dtype() const { return dtype_; }

  // No-grad leaf with the tape's dtype (masks, spliced constants).
  Tensor constant(Shape shape, std::vector<double> values) const;

  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor kron(const Tensor& a, const Tensor& b);
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& a, double s);
  Tensor add_row(const Tensor& m, const Tensor& v);
  Tensor tanh(const Tensor& a);
  Tensor relu(const Tensor& a);
  Tensor gelu(const Tensor& a);
  Tensor softmax(const Tensor& a, int axis);
  Tensor log_softmax(const Tensor& a, int axis);
  Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift,
                    double eps = 1e-5);
  Tensor transpose(const Tensor& a);
  Tensor reshape(const Tensor& a, Shape shape);
  Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& ids);
  Tensor concat_rows(const std::vector<Tensor>& parts);
  Tensor concat_cols(const std::vector<Tensor>& parts);
  Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count);
  Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count);
  Tensor overwrite_rows(const Tensor& base, const Tensor& rows, std::size_t start);
  Tensor row(const Tensor& a, std::size_t r);
  Tensor mean_rows(const Tensor& a);
  Tensor sum(const Tensor& a);
  Tensor mean(const Tensor& a);
  Tensor pick(const Tensor& a, std::size_t i);

  // Seeds d(loss)/d(loss) = 1 and runs recorded nodes in reverse order.
  // loss must be scalar; calling twice on one tape is an error.
  void backward(const Tensor& loss);

 private:
  Tensor make(Shape shape, std::vector<double> values, bool requires_grad);
  void check(const Tensor& t, const char* op) const;
  static void check_rank(const Tensor& t, std::size_t rank, const char* op);

  DType dtype_;
  std::vector<std::function<void()>> nodes_;
  bool backward_done_ = false;
};

}  // namespace idpg
