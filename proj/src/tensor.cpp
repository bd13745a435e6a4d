#include "samic/tensor.hpp"

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <sstream>

namespace samic {

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) {
    if (e < 0) throw std::invalid_argument("negative extent in shape " + to_string(shape));
    n *= e;
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <class Scalar>
Tensor<Scalar>::Tensor(Shape shape) : storage_(std::make_shared<TensorStorage<Scalar>>()) {
  storage_->value = Array<Scalar>::Zero(numel(shape));
  storage_->shape = std::move(shape);
}

template <class Scalar>
Tensor<Scalar>::Tensor(Shape shape, Array<Scalar> values)
    : storage_(std::make_shared<TensorStorage<Scalar>>()) {
  if (numel(shape) != values.size()) {
    throw std::invalid_argument("element count " + std::to_string(values.size()) +
                                " does not match shape " + to_string(shape));
  }
  storage_->shape = std::move(shape);
  storage_->value = std::move(values);
}

template <class Scalar>
Tensor<Scalar> Tensor<Scalar>::constant(Shape shape, Scalar v) {
  const Index n = numel(shape);
  return Tensor(std::move(shape), Array<Scalar>::Constant(n, v));
}

template <class Scalar>
Tensor<Scalar> Tensor<Scalar>::from(Shape shape, std::initializer_list<Scalar> values) {
  Array<Scalar> a(static_cast<Index>(values.size()));
  Index i = 0;
  for (Scalar v : values) a[i++] = v;
  return Tensor(std::move(shape), std::move(a));
}

template <class Scalar>
Index Tensor<Scalar>::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw std::out_of_range("axis out of range");
  return storage_->shape[static_cast<std::size_t>(axis)];
}

template <class Scalar>
Array<Scalar>& Tensor<Scalar>::mutable_value() {
  if (!storage_->is_leaf) throw TapeError("mutable_value() on a non-leaf tensor");
  return storage_->value;
}

template <class Scalar>
Scalar Tensor<Scalar>::item() const {
  if (size() != 1) throw std::invalid_argument("item() on tensor of shape " + to_string(shape()));
  return storage_->value[0];
}

template <class Scalar>
Scalar Tensor<Scalar>::at(std::initializer_list<Index> index) const {
  if (static_cast<int>(index.size()) != rank()) throw std::invalid_argument("index rank mismatch");
  Index flat = 0;
  std::size_t a = 0;
  for (Index i : index) {
    const Index e = storage_->shape[a++];
    if (i < 0 || i >= e) throw std::out_of_range("index out of range");
    flat = flat * e + i;
  }
  return storage_->value[flat];
}

template <class Scalar>
Tensor<Scalar>& Tensor<Scalar>::set_requires_grad(bool on) {
  if (!storage_->is_leaf) throw TapeError("requires_grad can only be set on leaves");
  storage_->requires_grad = on;
  if (!on) storage_->grad.resize(0);
  return *this;
}

template <class Scalar>
Array<Scalar> Tensor<Scalar>::grad() const {
  if (storage_->grad.size() == 0) return Array<Scalar>::Zero(size());
  return storage_->grad;
}

template <class Scalar>
Tensor<Scalar> Tensor<Scalar>::detach() const {
  return Tensor(storage_->shape, storage_->value);
}

namespace {
template <class Scalar>
Tape<Scalar>*& current_tape() {
  thread_local Tape<Scalar>* tape = nullptr;
  return tape;
}
}  // namespace

template <class Scalar>
Tape<Scalar>* Tape<Scalar>::current() {
  return current_tape<Scalar>();
}

template <class Scalar>
void Tape<Scalar>::set_current(Tape* tape) {
  current_tape<Scalar>() = tape;
}

template <class Scalar>
void Tape<Scalar>::record(TapeNode<Scalar> node) {
  if (consumed_) throw TapeError("recording onto a tape that has already been backpropagated");
  nodes_.push_back(std::move(node));
}

template <class Scalar>
void Tape<Scalar>::backward(const Tensor<Scalar>& loss) {
  if (consumed_) throw TapeError("backward() called twice on the same tape");
  if (loss.size() != 1) throw TapeError("loss must be a scalar, got " + to_string(loss.shape()));
  if (!loss.requires_grad() || loss.is_leaf()) {
    throw TapeError("loss is detached from the tape");
  }
  std::size_t end = nodes_.size();
  while (end > 0 && nodes_[end - 1].output != loss.storage()) --end;
  if (end == 0) throw TapeError("loss was not recorded on this tape");

  loss.storage()->grad = Array<Scalar>::Ones(1);
  for (std::size_t i = end; i-- > 0;) {
    auto& node = nodes_[i];
    if (node.output->grad.size() != 0) node.backward(node.output->grad);
  }
  consumed_ = true;
  nodes_.clear();
}

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("tensor record truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

template <class Scalar>
void write_tensor(std::ostream& os, const Tensor<Scalar>& t) {
  put_u32(os, static_cast<std::uint32_t>(t.shape().size()));
  for (Index e : t.shape()) put_u32(os, static_cast<std::uint32_t>(e));
  for (Index i = 0; i < t.size(); ++i) put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(t.value()[i])));
}

template <class Scalar>
Tensor<Scalar> read_tensor(std::istream& is) {
  const std::uint32_t rank = get_u32(is);
  if (rank > 8) throw std::runtime_error("tensor record has implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) e = get_u32(is);
  Tensor<Scalar> t(shape);
  for (Index i = 0; i < t.size(); ++i) t.mutable_value()[i] = static_cast<Scalar>(std::bit_cast<float>(get_u32(is)));
  return t;
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template void write_tensor(std::ostream&, const Tensor<float>&);
template void write_tensor(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor(std::istream&);
template Tensor<double> read_tensor(std::istream&);

}  // namespace samic
