#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <iosfwd>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace samic {

using Index = std::ptrdiff_t;
using Shape = std::vector<Index>;

template <class Scalar>
using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <class Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Raised when an op produces NaN or Inf.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised on misuse of the tape (detached loss, double backward, ...).
class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <class Scalar>
struct TensorStorage {
  Shape shape;
  Array<Scalar> value;
  Array<Scalar> grad;  // empty until a gradient reaches this tensor
  bool requires_grad = false;
  bool is_leaf = true;

  void accumulate(const Array<Scalar>& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
  Array<Scalar>& grad_buffer() {
    if (grad.size() == 0) grad = Array<Scalar>::Zero(value.size());
    return grad;
  }
};

/// Dense row-major N-d array with an optional gradient buffer.
///
/// Copies are shallow: a Tensor is a handle onto shared storage, so a parameter
/// handed to an op and the op's recorded input are the same object. Use clone()
/// for a deep copy.
template <class Scalar>
class Tensor {
 public:
  using StoragePtr = std::shared_ptr<TensorStorage<Scalar>>;

  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, Array<Scalar> values);
  explicit Tensor(StoragePtr storage) : storage_(std::move(storage)) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor constant(Shape shape, Scalar v);
  static Tensor from(Shape shape, std::initializer_list<Scalar> values);
  static Tensor scalar(Scalar v) { return constant({}, v); }

  bool defined() const { return storage_ != nullptr; }
  const Shape& shape() const { return storage_->shape; }
  int rank() const { return static_cast<int>(storage_->shape.size()); }
  Index dim(int axis) const;
  Index size() const { return storage_->value.size(); }

  const Array<Scalar>& value() const { return storage_->value; }
  /// Mutable access is for leaves only (parameter updates, test setup).
  Array<Scalar>& mutable_value();
  Scalar item() const;
  Scalar at(std::initializer_list<Index> index) const;

  bool requires_grad() const { return storage_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);
  bool is_leaf() const { return storage_->is_leaf; }
  bool has_grad() const { return storage_->grad.size() != 0; }
  /// Gradient buffer; zeros if no gradient has been accumulated.
  Array<Scalar> grad() const;
  void zero_grad() { storage_->grad.resize(0); }

  Tensor detach() const;
  Tensor clone() const { return detach(); }

  const StoragePtr& storage() const { return storage_; }

 private:
  StoragePtr storage_;
};

/// One recorded op. The backward closure owns whatever it saved and pushes the
/// output gradient into the inputs' grad buffers.
template <class Scalar>
struct TapeNode {
  const char* op = "";
  std::vector<typename Tensor<Scalar>::StoragePtr> inputs;
  typename Tensor<Scalar>::StoragePtr output;
  std::function<void(const Array<Scalar>& grad_out)> backward;
};

/// Linear record of ops for reverse-mode differentiation.
///
/// Ops record onto the tape made current by a TapeScope on the calling thread;
/// with no current tape nothing is recorded and outputs never require grad.
/// backward() may be called once per recording.
template <class Scalar>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(TapeNode<Scalar> node);
  void backward(const Tensor<Scalar>& loss);
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  static Tape* current();
  static void set_current(Tape* tape);

 private:
  std::vector<TapeNode<Scalar>> nodes_;
  bool consumed_ = false;
};

template <class Scalar>
class TapeScope {
 public:
  explicit TapeScope(Tape<Scalar>& tape) : previous_(Tape<Scalar>::current()) {
    Tape<Scalar>::set_current(&tape);
  }
  ~TapeScope() { Tape<Scalar>::set_current(previous_); }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<Scalar>* previous_;
};

/// Suspends recording for the current thread (inference-only sections).
template <class Scalar>
class NoGradScope {
 public:
  NoGradScope() : previous_(Tape<Scalar>::current()) { Tape<Scalar>::set_current(nullptr); }
  ~NoGradScope() { Tape<Scalar>::set_current(previous_); }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<Scalar>* previous_;
};

namespace detail {

/// Builds an op result and records it when any input requires grad.
template <class Scalar, class Backward>
Tensor<Scalar> make_result(const char* op, Shape shape, Array<Scalar> value,
                           std::initializer_list<const Tensor<Scalar>*> inputs,
                           Backward&& backward) {
  if (!value.allFinite()) {
    throw NonFiniteError(std::string("non-finite output in ") + op);
  }
  auto out = std::make_shared<TensorStorage<Scalar>>();
  out->shape = std::move(shape);
  out->value = std::move(value);
  Tape<Scalar>* tape = Tape<Scalar>::current();
  bool needs = false;
  if (tape != nullptr) {
    for (const auto* in : inputs) needs = needs || (in->defined() && in->requires_grad());
  }
  if (needs) {
    out->requires_grad = true;
    out->is_leaf = false;
    TapeNode<Scalar> node;
    node.op = op;
    for (const auto* in : inputs)
      if (in->defined()) node.inputs.push_back(in->storage());
    node.output = out;
    node.backward = std::forward<Backward>(backward);
    tape->record(std::move(node));
  }
  return Tensor<Scalar>(std::move(out));
}

/// Same, for ops with a run-time number of inputs.
template <class Scalar, class Backward>
Tensor<Scalar> make_result(const char* op, Shape shape, Array<Scalar> value,
                           const std::vector<Tensor<Scalar>>& inputs, Backward&& backward) {
  if (!value.allFinite()) {
    throw NonFiniteError(std::string("non-finite output in ") + op);
  }
  auto out = std::make_shared<TensorStorage<Scalar>>();
  out->shape = std::move(shape);
  out->value = std::move(value);
  Tape<Scalar>* tape = Tape<Scalar>::current();
  bool needs = false;
  if (tape != nullptr) {
    for (const auto& in : inputs) needs = needs || (in.defined() && in.requires_grad());
  }
  if (needs) {
    out->requires_grad = true;
    out->is_leaf = false;
    TapeNode<Scalar> node;
    node.op = op;
    for (const auto& in : inputs) node.inputs.push_back(in.storage());
    node.output = out;
    node.backward = std::forward<Backward>(backward);
    tape->record(std::move(node));
  }
  return Tensor<Scalar>(std::move(out));
}

/// Adds g into the storage's grad when that input participates in differentiation.
template <class Scalar>
inline void push_grad(const typename Tensor<Scalar>::StoragePtr& s, const Array<Scalar>& g) {
  if (s && s->requires_grad) s->accumulate(g);
}

}  // namespace detail

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

using Tensord = Tensor<double>;
using Tensorf = Tensor<float>;

/// u32 rank, u32 extents, then the values as little-endian 32-bit floats.
template <class Scalar>
void write_tensor(std::ostream& os, const Tensor<Scalar>& t);
/// Inverse of write_tensor; throws std::runtime_error on a short or malformed record.
template <class Scalar>
Tensor<Scalar> read_tensor(std::istream& is);

}  // namespace samic
