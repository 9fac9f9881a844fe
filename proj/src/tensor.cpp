#include "desk/tensor.hpp"

#include <numeric>
#include <sstream>

namespace desk {

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << " ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace {

Eigen::Index checked_numel(const std::vector<int>& shape) {
    Eigen::Index n = 1;
    for (int d : shape) {
        if (d <= 0) throw DimensionError("tensor dimension must be positive, got shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

}  // namespace

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_ = Vector::Zero(checked_numel(shape_));
}

Tensor Tensor::full(std::vector<int> shape, double value) {
    Tensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
}

Tensor Tensor::from_vector(std::vector<int> shape, Vector data) {
    if (checked_numel(shape) != data.size())
        throw DimensionError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
}

Eigen::Map<RowMatrix> Tensor::mat() {
    if (rank() != 2) throw DimensionError("rank-2 view requested on tensor of shape " + shape_str(shape_));
    return {data_.data(), shape_[0], shape_[1]};
}

Eigen::Map<const RowMatrix> Tensor::mat() const {
    if (rank() != 2) throw DimensionError("rank-2 view requested on tensor of shape " + shape_str(shape_));
    return {data_.data(), shape_[0], shape_[1]};
}

Eigen::Map<RowMatrix> Tensor::as_mat(Eigen::Index rows, Eigen::Index cols) {
    if (rows * cols != data_.size())
        throw DimensionError("matrix view " + std::to_string(rows) + "x" + std::to_string(cols) +
                             " does not cover tensor of shape " + shape_str(shape_));
    return {data_.data(), rows, cols};
}

Eigen::Map<const RowMatrix> Tensor::as_mat(Eigen::Index rows, Eigen::Index cols) const {
    if (rows * cols != data_.size())
        throw DimensionError("matrix view " + std::to_string(rows) + "x" + std::to_string(cols) +
                             " does not cover tensor of shape " + shape_str(shape_));
    return {data_.data(), rows, cols};
}

Tensor Tensor::reshaped(std::vector<int> new_shape) const {
    if (checked_numel(new_shape) != data_.size())
        throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(new_shape));
    Tensor t;
    t.shape_ = std::move(new_shape);
    t.data_ = data_;
    return t;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    Tensor out({a.dim(0), b.dim(1)});
    out.mat().noalias() = a.mat() * b.mat();
    return out;
}

RowMatrix im2col(const Tensor& input, int kh, int kw, int pad) {
    if (input.rank() != 3)
        throw DimensionError("im2col expects H x W x C input, got " + shape_str(input.shape()));
    return im2col_raw(input.data(), input.dim(0), input.dim(1), input.dim(2), kh, kw, pad);
}

RowMatrix im2col_raw(const double* in, int h, int w, int c, int kh, int kw, int pad) {
    const int oh = h + 2 * pad - kh + 1, ow = w + 2 * pad - kw + 1;
    if (kh <= 0 || kw <= 0 || oh <= 0 || ow <= 0)
        throw DimensionError("filter " + std::to_string(kh) + "x" + std::to_string(kw) +
                             " larger than (padded) input " +
                             shape_str({h, w, c}));
    RowMatrix cols(static_cast<Eigen::Index>(oh) * ow, static_cast<Eigen::Index>(kh) * kw * c);
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            double* row = cols.row(static_cast<Eigen::Index>(oy) * ow + ox).data();
            for (int i = 0; i < kh; ++i) {
                const int y = oy + i - pad;
                for (int j = 0; j < kw; ++j) {
                    const int x = ox + j - pad;
                    double* dst = row + (static_cast<Eigen::Index>(i) * kw + j) * c;
                    if (y < 0 || y >= h || x < 0 || x >= w) {
                        for (int ch = 0; ch < c; ++ch) dst[ch] = 0.0;
                    } else {
                        const double* src = in + (static_cast<Eigen::Index>(y) * w + x) * c;
                        for (int ch = 0; ch < c; ++ch) dst[ch] = src[ch];
                    }
                }
            }
        }
    }
    return cols;
}

void col2im_add(const RowMatrix& cols, int kh, int kw, int pad, Tensor& into) {
    col2im_add_raw(cols, into.dim(0), into.dim(1), into.dim(2), kh, kw, pad, into.data());
}

void col2im_add_raw(const RowMatrix& cols, int h, int w, int c, int kh, int kw, int pad,
                    double* out) {
    const int oh = h + 2 * pad - kh + 1, ow = w + 2 * pad - kw + 1;
    if (cols.rows() != static_cast<Eigen::Index>(oh) * ow ||
        cols.cols() != static_cast<Eigen::Index>(kh) * kw * c)
        throw DimensionError("col2im_add: patch matrix does not match target shape " +
                             shape_str({h, w, c}));
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            const double* row = cols.row(static_cast<Eigen::Index>(oy) * ow + ox).data();
            for (int i = 0; i < kh; ++i) {
                const int y = oy + i - pad;
                if (y < 0 || y >= h) continue;
                for (int j = 0; j < kw; ++j) {
                    const int x = ox + j - pad;
                    if (x < 0 || x >= w) continue;
                    const double* src = row + (static_cast<Eigen::Index>(i) * kw + j) * c;
                    double* dst = out + (static_cast<Eigen::Index>(y) * w + x) * c;
                    for (int ch = 0; ch < c; ++ch) dst[ch] += src[ch];
                }
            }
        }
    }
}

Tensor conv2d_forward(const Tensor& input, const Tensor& filters, const Tensor& bias, int pad) {
    if (input.rank() != 3)
        throw DimensionError("conv2d input must be H x W x C, got " + shape_str(input.shape()));
    if (filters.rank() != 4)
        throw DimensionError("conv2d filters must be kh x kw x C x F, got " +
                             shape_str(filters.shape()));
    const int c = input.dim(2);
    const int kh = filters.dim(0), kw = filters.dim(1), fc = filters.dim(2), f = filters.dim(3);
    if (fc != c)
        throw DimensionError("conv2d channel mismatch: input " + shape_str(input.shape()) +
                             " vs filters " + shape_str(filters.shape()));
    if (bias.rank() != 1 || bias.dim(0) != f)
        throw DimensionError("conv2d bias must have " + std::to_string(f) + " entries, got " +
                             shape_str(bias.shape()));
    if (pad < 0) throw DimensionError("conv2d padding must be non-negative");

    const int oh = input.dim(0) + 2 * pad - kh + 1;
    const int ow = input.dim(1) + 2 * pad - kw + 1;
    if (oh <= 0 || ow <= 0)
        throw DimensionError("conv2d filter " + shape_str(filters.shape()) +
                             " larger than (padded) input " + shape_str(input.shape()));

    RowMatrix cols = im2col(input, kh, kw, pad);
    Tensor out({oh, ow, f});
    auto out_m = out.as_mat(static_cast<Eigen::Index>(oh) * ow, f);
    out_m.noalias() = cols * filters.as_mat(static_cast<Eigen::Index>(kh) * kw * c, f);
    out_m.rowwise() += bias.vec().transpose();
    return out;
}

MaxPoolResult maxpool_forward(const Tensor& input, int ph, int pw) {
    if (input.rank() != 2 && input.rank() != 3)
        throw DimensionError("maxpool expects H x W or H x W x C input, got " +
                             shape_str(input.shape()));
    const int h = input.dim(0), w = input.dim(1);
    const int c = input.rank() == 3 ? input.dim(2) : 1;
    if (ph <= 0 || pw <= 0 || h % ph != 0 || w % pw != 0)
        throw ConfigError("maxpool window " + std::to_string(ph) + "x" + std::to_string(pw) +
                          " does not divide input " + shape_str(input.shape()));
    const int oh = h / ph, ow = w / pw;

    MaxPoolResult res;
    res.output = input.rank() == 3 ? Tensor({oh, ow, c}) : Tensor({oh, ow});
    res.argmax.resize(static_cast<size_t>(oh) * ow * c);

    const double* in = input.data();
    double* out = res.output.data();
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            for (int ch = 0; ch < c; ++ch) {
                Eigen::Index best_idx = -1;
                double best = -std::numeric_limits<double>::infinity();
                for (int i = 0; i < ph; ++i) {
                    for (int j = 0; j < pw; ++j) {
                        Eigen::Index idx =
                            (static_cast<Eigen::Index>(oy * ph + i) * w + (ox * pw + j)) * c + ch;
                        if (in[idx] > best) {
                            best = in[idx];
                            best_idx = idx;
                        }
                    }
                }
                Eigen::Index oidx = (static_cast<Eigen::Index>(oy) * ow + ox) * c + ch;
                out[oidx] = best;
                res.argmax[static_cast<size_t>(oidx)] = best_idx;
            }
        }
    }
    return res;
}

}  // namespace desk
