#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "gi2i/errors.hpp"
#include "gi2i/rng.hpp"

namespace gi2i {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense n-dimensional array of doubles, row-major. Copies are shallow: they
// alias the same payload, so a model's parameter map and an optimizer can hold
// the same storage. Ops never mutate their inputs; in-place mutation is
// reserved for parameter updates.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value);
    static Tensor randn(Shape shape, RngState& rng);
    // Centered uniform with fan-in scaling, for conv kernels and dense weights.
    static Tensor fan_in_uniform(Shape shape, int fan_in, RngState& rng);

    bool defined() const { return data_ != nullptr; }
    const Shape& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::int64_t numel() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }

    double* data() { return data_->data(); }
    const double* data() const { return data_->data(); }
    double value() const;  // scalar tensors only

    double& operator[](std::int64_t i) { return (*data_)[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return (*data_)[static_cast<std::size_t>(i)]; }

    // 4-d convenience accessor, [n][c][h][w] row-major.
    double& at(int n, int c, int h, int w);
    double at(int n, int c, int h, int w) const;

    bool has_grad() const { return grad_ != nullptr; }
    double* grad() { return grad_->data(); }
    const double* grad() const { return grad_->data(); }
    void ensure_grad();  // allocates zero-filled grad of matching shape
    void zero_grad();

    int node() const { return node_; }
    void set_node(int id) { node_ = id; }

    bool all_finite() const;
    void require_finite(const std::string& what) const;

    Tensor clone() const;  // deep copy of the payload (grad not copied)

    std::shared_ptr<std::vector<double>> storage() { return data_; }
    std::shared_ptr<std::vector<double>> grad_storage() { return grad_; }

private:
    Shape shape_;
    std::shared_ptr<std::vector<double>> data_;
    std::shared_ptr<std::vector<double>> grad_;
    int node_ = -1;
};

// Reverse-mode tape. Ops append nodes in execution order, which is a
// topological order by construction; backward() walks it once in reverse.
// Single-threaded by contract. clear() invalidates node ids held by tensors.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Registers a leaf (typically a parameter). Zeroes and adopts the
    // tensor's grad buffer so backward() fills it directly.
    int watch(Tensor& t);

    // Records an op output. The closure receives the output gradient and the
    // tape, and accumulates into the input nodes' buffers.
    using BackwardFn = std::function<void(Tape&, const std::vector<double>& gout)>;
    int push(std::int64_t out_numel, BackwardFn fn);

    std::vector<double>& grad_of(int id);

    // Seeds d(loss)/d(loss) = 1 and propagates once through the whole tape.
    // loss must be a scalar recorded on this tape.
    void backward(const Tensor& loss);

    void clear();
    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        std::shared_ptr<std::vector<double>> grad;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
};

// Binary tensor container: "GI2I", version u8=1, u8 ndim, ndim x u32 extents,
// little-endian f64 payload, no padding.
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);
void write_tensor_bytes(std::string& out, const Tensor& t);
Tensor read_tensor_bytes(const char* bytes, std::size_t len, std::size_t* consumed = nullptr);

}  // namespace gi2i
