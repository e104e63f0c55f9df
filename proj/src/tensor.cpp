#include "pemf/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "pemf/errors.hpp"

namespace pemf {

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (std::int64_t e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace {

void check_extents(const Shape& shape) {
    for (std::int64_t e : shape) {
        if (e <= 0) {
            throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
        }
    }
}

}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
    check_extents(shape_);
    data_.assign(static_cast<std::size_t>(shape_numel(shape_)), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents(shape_);
    if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size())) {
        throw ShapeError("data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_str(shape_));
    }
}

Tensor Tensor::full(Shape shape, double value) {
    Tensor t(std::move(shape));
    t.fill(value);
    return t;
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

std::int64_t Tensor::dim(std::int64_t axis) const {
    if (axis < 0 || axis >= rank()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
    }
    return shape_[static_cast<std::size_t>(axis)];
}

double& Tensor::at4(std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w) {
    return data_[static_cast<std::size_t>(((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
}

double Tensor::at4(std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return data_[static_cast<std::size_t>(((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
}

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

void Tensor::fill(double value) { data_.assign(data_.size(), value); }

}  // namespace pemf
