#include "gi2i/tensor.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace gi2i {

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
    for (int e : shape_) {
        if (e <= 0) throw DimensionError("tensor extent must be positive, got shape " + shape_str(shape_));
    }
    data_ = std::make_shared<std::vector<double>>(static_cast<std::size_t>(shape_numel(shape_)), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
    for (int e : shape_) {
        if (e <= 0) throw DimensionError("tensor extent must be positive, got shape " + shape_str(shape_));
    }
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape_)) {
        throw DimensionError("data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape_));
    }
    data_ = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor Tensor::zeros(Shape shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(Shape shape, double value) {
    Tensor t(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), value);
    return t;
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::randn(Shape shape, RngState& rng) {
    Tensor t(std::move(shape));
    for (auto& v : *t.data_) v = rng.normal();
    return t;
}

Tensor Tensor::fan_in_uniform(Shape shape, int fan_in, RngState& rng) {
    Tensor t(std::move(shape));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in > 0 ? fan_in : 1));
    for (auto& v : *t.data_) v = (2.0 * rng.uniform() - 1.0) * bound;
    return t;
}

double Tensor::value() const {
    if (numel() != 1) throw ContractError("value() requires a scalar tensor, shape " + shape_str(shape_));
    return (*data_)[0];
}

double& Tensor::at(int n, int c, int h, int w) {
    const int C = shape_[1], H = shape_[2], W = shape_[3];
    return (*data_)[static_cast<std::size_t>(((static_cast<std::int64_t>(n) * C + c) * H + h) * W + w)];
}

double Tensor::at(int n, int c, int h, int w) const {
    const int C = shape_[1], H = shape_[2], W = shape_[3];
    return (*data_)[static_cast<std::size_t>(((static_cast<std::int64_t>(n) * C + c) * H + h) * W + w)];
}

void Tensor::ensure_grad() {
    if (!grad_) grad_ = std::make_shared<std::vector<double>>(data_->size(), 0.0);
}

void Tensor::zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
}

bool Tensor::all_finite() const {
    for (double v : *data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

void Tensor::require_finite(const std::string& what) const {
    if (!all_finite()) throw NumericError("non-finite values in " + what);
}

Tensor Tensor::clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<double>>(*data_);
    return t;
}

int Tape::watch(Tensor& t) {
    t.ensure_grad();
    t.zero_grad();
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{t.grad_storage(), nullptr});
    t.set_node(id);
    return id;
}

int Tape::push(std::int64_t out_numel, BackwardFn fn) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{std::make_shared<std::vector<double>>(static_cast<std::size_t>(out_numel), 0.0),
                          std::move(fn)});
    return id;
}

std::vector<double>& Tape::grad_of(int id) {
    if (id < 0 || id >= static_cast<int>(nodes_.size())) {
        throw InternalError("tape node id out of range: " + std::to_string(id));
    }
    return *nodes_[static_cast<std::size_t>(id)].grad;
}

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1) throw ContractError("backward requires a scalar loss");
    const int root = loss.node();
    if (root < 0 || root >= static_cast<int>(nodes_.size())) {
        throw ContractError("loss is not recorded on this tape");
    }
    (*nodes_[static_cast<std::size_t>(root)].grad)[0] = 1.0;
    for (int id = root; id >= 0; --id) {
        Node& node = nodes_[static_cast<std::size_t>(id)];
        if (node.backward) node.backward(*this, *node.grad);
    }
}

void Tape::clear() { nodes_.clear(); }

namespace {

void put_u32_le(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

std::uint32_t get_u32_le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

void write_tensor_bytes(std::string& out, const Tensor& t) {
    out.append("GI2I", 4);
    out.push_back(static_cast<char>(1));  // version
    out.push_back(static_cast<char>(t.ndim()));
    for (int i = 0; i < t.ndim(); ++i) put_u32_le(out, static_cast<std::uint32_t>(t.dim(i)));
    static_assert(sizeof(double) == 8);
    const std::size_t payload = static_cast<std::size_t>(t.numel()) * 8;
    const std::size_t base = out.size();
    out.resize(base + payload);
    std::memcpy(out.data() + base, t.data(), payload);  // host is little-endian
}

Tensor read_tensor_bytes(const char* bytes, std::size_t len, std::size_t* consumed) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes);
    if (len < 6 || std::memcmp(p, "GI2I", 4) != 0) throw IoError("bad tensor magic");
    if (p[4] != 1) throw IoError("unsupported tensor version " + std::to_string(p[4]));
    const int ndim = p[5];
    std::size_t off = 6;
    if (len < off + static_cast<std::size_t>(ndim) * 4) throw IoError("truncated tensor header");
    Shape shape(static_cast<std::size_t>(ndim));
    for (int i = 0; i < ndim; ++i) {
        shape[static_cast<std::size_t>(i)] = static_cast<int>(get_u32_le(p + off));
        off += 4;
    }
    const std::size_t payload = static_cast<std::size_t>(shape_numel(shape)) * 8;
    if (len < off + payload) throw IoError("truncated tensor payload");
    Tensor t(shape);
    std::memcpy(t.data(), bytes + off, payload);
    if (consumed) *consumed = off + payload;
    return t;
}

void save_tensor(const std::string& path, const Tensor& t) {
    std::string buf;
    write_tensor_bytes(buf, t);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("write failed: " + path);
}

Tensor load_tensor(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return read_tensor_bytes(buf.data(), buf.size());
}

}  // namespace gi2i
