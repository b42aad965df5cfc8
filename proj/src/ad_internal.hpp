#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pipsim/autodiff.hpp"

namespace pipsim::ad::detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using MapVec = Eigen::Map<Eigen::VectorXd>;
using ConstMapVec = Eigen::Map<const Eigen::VectorXd>;
using AlignedBuffer = std::vector<double, Eigen::aligned_allocator<double>>;

// Eigen chooses its vectorization peel from the operand address, so the
// summation order of a product would otherwise depend on where the allocator
// placed the data. Product operands are always handed over at Eigen's maximum
// alignment, copying only when the source is not already aligned.
class Aligned {
  public:
    Aligned(const double* data, std::size_t n) {
        if (reinterpret_cast<std::uintptr_t>(data) % EIGEN_MAX_ALIGN_BYTES == 0) {
            ptr_ = data;
        } else {
            copy_.assign(data, data + n);
            ptr_ = copy_.data();
        }
    }
    explicit Aligned(const Tensor& t) : Aligned(t.data.data(), t.size()) {}

    const double* get() const { return ptr_; }

  private:
    AlignedBuffer copy_;
    const double* ptr_ = nullptr;
};

inline Tape& tape_of(Var a) {
    if (!a.valid()) {
        throw Error("operation on an unbound Var");
    }
    return *a.tape();
}

inline Tape& tape_of(Var a, Var b) {
    Tape& t = tape_of(a);
    if (b.valid() && b.tape() != &t) {
        throw Error("operands live on different tapes");
    }
    return t;
}

inline void add_into(Tensor& dst, const Tensor& src) {
    for (std::size_t i = 0; i < src.size(); ++i) {
        dst.data[i] += src.data[i];
    }
}

inline double sigmoid_scalar(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace pipsim::ad::detail
