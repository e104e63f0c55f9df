#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace pemf {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major tensor of 64-bit floats. Image batches use the
/// B x C x H x W layout; lower ranks are allowed for biases, scalars, etc.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);  // zero-filled
    Tensor(Shape shape, std::vector<double> data);

    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value);  // shape {1}

    const Shape& shape() const { return shape_; }
    std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    std::int64_t dim(std::int64_t axis) const;

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    // 4-D accessor for B x C x H x W tensors.
    double& at4(std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w);
    double at4(std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w) const;

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;

    void fill(double value);

private:
    Shape shape_;
    std::vector<double> data_;
};

}  // namespace pemf
