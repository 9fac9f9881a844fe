#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "desk/errors.hpp"

namespace desk {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::string shape_str(const std::vector<int>& shape);

// Dense n-d array of doubles in row-major order. The universal value type for
// images, activations, weights and gradients.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);  // zero-filled

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, double value);
    static Tensor from_vector(std::vector<int> shape, Vector data);

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    Eigen::Index size() const { return data_.size(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    Vector& vec() { return data_; }
    const Vector& vec() const { return data_; }

    double& operator[](Eigen::Index i) { return data_[i]; }
    double operator[](Eigen::Index i) const { return data_[i]; }

    // Rank-specific element access, row-major.
    double& at(int i) { return data_[i]; }
    double at(int i) const { return data_[i]; }
    double& at(int i, int j) { return data_[flat2(i, j)]; }
    double at(int i, int j) const { return data_[flat2(i, j)]; }
    double& at(int i, int j, int k) { return data_[flat3(i, j, k)]; }
    double at(int i, int j, int k) const { return data_[flat3(i, j, k)]; }
    double& at(int i, int j, int k, int l) { return data_[flat4(i, j, k, l)]; }
    double at(int i, int j, int k, int l) const { return data_[flat4(i, j, k, l)]; }

    // Rank-2 view over the buffer (no copy).
    Eigen::Map<RowMatrix> mat();
    Eigen::Map<const RowMatrix> mat() const;
    // View of the buffer as a rows x cols row-major matrix regardless of rank.
    Eigen::Map<RowMatrix> as_mat(Eigen::Index rows, Eigen::Index cols);
    Eigen::Map<const RowMatrix> as_mat(Eigen::Index rows, Eigen::Index cols) const;

    Tensor reshaped(std::vector<int> new_shape) const;
    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const { return data_.allFinite(); }

  private:
    Eigen::Index flat2(int i, int j) const {
        return static_cast<Eigen::Index>(i) * shape_[1] + j;
    }
    Eigen::Index flat3(int i, int j, int k) const {
        return (static_cast<Eigen::Index>(i) * shape_[1] + j) * shape_[2] + k;
    }
    Eigen::Index flat4(int i, int j, int k, int l) const {
        return ((static_cast<Eigen::Index>(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l;
    }

    std::vector<int> shape_;
    Vector data_;
};

// Matrix product of two rank-2 tensors.
Tensor matmul(const Tensor& a, const Tensor& b);

// Cross-correlation (no filter flip) of a single image. Input is H x W x C,
// filters are kh x kw x C x F, bias has F entries. `pad` adds a symmetric
// zero border before the valid convolution, so the output is
// (H - kh + 1 + 2*pad) x (W - kw + 1 + 2*pad) x F.
Tensor conv2d_forward(const Tensor& input, const Tensor& filters, const Tensor& bias,
                      int pad = 0);

// Patch matrix for conv-as-GEMM: row (h', w'), column (i, j, c). Values
// outside the padded frame are zero. Shared by conv2d forward and backward.
RowMatrix im2col(const Tensor& input, int kh, int kw, int pad);
RowMatrix im2col_raw(const double* in, int h, int w, int c, int kh, int kw, int pad);

// Scatter-add of a patch-matrix gradient back onto an H x W x C image.
void col2im_add(const RowMatrix& cols, int kh, int kw, int pad, Tensor& into);
void col2im_add_raw(const RowMatrix& cols, int h, int w, int c, int kh, int kw, int pad,
                    double* out);

struct MaxPoolResult {
    Tensor output;
    // Flat input index of the winning cell, one per output element.
    std::vector<Eigen::Index> argmax;
};

// Non-overlapping max pooling; spatial dims must divide by the window.
// Accepts H x W or H x W x C input and preserves the rank.
MaxPoolResult maxpool_forward(const Tensor& input, int ph, int pw);

}  // namespace desk
