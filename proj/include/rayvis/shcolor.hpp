// Copyright Contributors to the rayvis project
// SPDX-License-Identifier: Apache-2.0

#pragma once

// View-dependent point color from weighted observations.
//
// Real spherical harmonics up to degree 3, ordered by l ascending and m from
// -l to l (index l*l + l + m), without the Condon-Shortley phase:
//   l=0:  c0
//   l=1:  c1 y, c1 z, c1 x
//   l=2:  c2 xy, c2 yz, c20 (3z^2 - 1), c2 xz, c22 (x^2 - y^2)
//   l=3:  c33 y(3x^2 - y^2), c32 xyz, c31 y(5z^2 - 1), c30 z(5z^2 - 3),
//         c31 x(5z^2 - 1), c32' z(x^2 - y^2), c33 x(x^2 - 3y^2)
//
// A fit minimizes sum_j w_j |R(r_j; theta) - c_j|^2 + theta^T Lambda theta
// per channel, with Lambda diagonal per degree.

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <array>
#include <cmath>
#include <span>
#include <stdexcept>

namespace rayvis {

inline constexpr int kMaxShDegree = 3;
inline constexpr int kMaxShSize = (kMaxShDegree + 1) * (kMaxShDegree + 1);

template <class Scalar>
using ShVector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1, 0, kMaxShSize, 1>;
template <class Scalar>
using ShMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, 0, kMaxShSize, kMaxShSize>;

struct DegenerateFitError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SHBasis {
    int degree = kMaxShDegree;

    explicit SHBasis(int l = kMaxShDegree) : degree(l) {
        if (l < 0 || l > kMaxShDegree)
            throw std::invalid_argument("SHBasis: degree must be in [0, 3]");
    }
    int size() const { return (degree + 1) * (degree + 1); }
};

struct SHRegularizer {
    std::array<double, kMaxShDegree + 1> per_degree{0.0, 0.001, 0.005, 0.01};

    static SHRegularizer none() { return {{0.0, 0.0, 0.0, 0.0}}; }

    template <class Scalar> ShVector<Scalar> diagonal(const SHBasis &basis) const {
        ShVector<Scalar> d(basis.size());
        for (int l = 0; l <= basis.degree; ++l) {
            if (per_degree[std::size_t(l)] < 0.0)
                throw std::invalid_argument("SHRegularizer: penalties must be >= 0");
            d.segment(l * l, 2 * l + 1).setConstant(Scalar(per_degree[std::size_t(l)]));
        }
        return d;
    }
};

template <class Scalar> struct WeightedColorSample {
    Eigen::Matrix<Scalar, 3, 1> direction;
    Eigen::Matrix<Scalar, 3, 1> color;
    Scalar weight;
};

/// One column of coefficients per color channel.
template <class Scalar>
using SHCoefficients = Eigen::Matrix<Scalar, Eigen::Dynamic, 3, 0, kMaxShSize, 3>;

template <class Scalar>
ShVector<Scalar> sh_eval(const SHBasis &basis, const Eigen::Matrix<Scalar, 3, 1> &dir) {
    using std::abs;
    if (!(abs(dir.norm() - Scalar(1)) <= Scalar(1e-6)))
        throw std::invalid_argument("sh_eval: direction is not unit length");
    const Scalar x = dir.x(), y = dir.y(), z = dir.z();
    ShVector<Scalar> out(basis.size());
    out[0] = Scalar(0.28209479177387814);
    if (basis.degree >= 1) {
        const Scalar c1(0.4886025119029199);
        out[1] = c1 * y;
        out[2] = c1 * z;
        out[3] = c1 * x;
    }
    if (basis.degree >= 2) {
        const Scalar c2(1.0925484305920792);
        out[4] = c2 * x * y;
        out[5] = c2 * y * z;
        out[6] = Scalar(0.31539156525252005) * (Scalar(3) * z * z - Scalar(1));
        out[7] = c2 * x * z;
        out[8] = Scalar(0.5462742152960396) * (x * x - y * y);
    }
    if (basis.degree >= 3) {
        const Scalar c33(0.5900435899266435), c31(0.4570457994644658);
        out[9] = c33 * y * (Scalar(3) * x * x - y * y);
        out[10] = Scalar(2.890611442640554) * x * y * z;
        out[11] = c31 * y * (Scalar(5) * z * z - Scalar(1));
        out[12] = Scalar(0.3731763325901154) * z * (Scalar(5) * z * z - Scalar(3));
        out[13] = c31 * x * (Scalar(5) * z * z - Scalar(1));
        out[14] = Scalar(1.445305721320277) * z * (x * x - y * y);
        out[15] = c33 * x * (x * x - Scalar(3) * y * y);
    }
    return out;
}

/// Regularized normal equations (B^T W B + Lambda) theta = B^T W c for one
/// point. Solved by LDLT; falls back to an eigen-decomposition pseudo-inverse
/// when the estimated conditioning exceeds 1e12.
template <class Scalar> class ShNormalEquations {
public:
    ShNormalEquations(std::span<const WeightedColorSample<Scalar>> samples, const SHBasis &basis,
                      const SHRegularizer &reg)
        : basis_(basis) {
        const int n = basis.size();
        lhs_ = ShMatrix<Scalar>::Zero(n, n);
        rhs_ = SHCoefficients<Scalar>::Zero(n, 3);
        for (const auto &s : samples) {
            if (s.weight < Scalar(0))
                throw std::invalid_argument("sh_fit: negative sample weight");
            if (s.weight == Scalar(0))
                continue;
            const ShVector<Scalar> b = sh_eval(basis, s.direction);
            lhs_.noalias() += s.weight * b * b.transpose();
            rhs_.noalias() += s.weight * b * s.color.transpose();
        }
        lhs_.diagonal() += reg.diagonal<Scalar>(basis);
        if (lhs_.cwiseAbs().maxCoeff() == Scalar(0))
            throw DegenerateFitError("sh_fit: all weights and regularizers are zero");
        factorize();
    }

    template <class Rhs> auto solve(const Rhs &b) const {
        using Out = Eigen::Matrix<Scalar, Eigen::Dynamic, Rhs::ColsAtCompileTime, 0, kMaxShSize,
                                  Rhs::MaxColsAtCompileTime>;
        if (use_pinv_)
            return Out(pinv_ * b);
        return Out(ldlt_.solve(b));
    }

    SHCoefficients<Scalar> coefficients() const { return solve(rhs_); }
    const ShMatrix<Scalar> &lhs() const { return lhs_; }
    const SHCoefficients<Scalar> &rhs() const { return rhs_; }
    bool used_pseudo_inverse() const { return use_pinv_; }

private:
    void factorize() {
        using std::abs;
        ldlt_.compute(lhs_);
        const auto d = ldlt_.vectorD();
        const Scalar dmax = d.cwiseAbs().maxCoeff();
        const Scalar dmin = d.minCoeff();
        if (ldlt_.info() == Eigen::Success && dmin > Scalar(0) && dmax <= Scalar(1e12) * dmin)
            return;
        use_pinv_ = true;
        Eigen::SelfAdjointEigenSolver<ShMatrix<Scalar>> eig(lhs_);
        const auto &vals = eig.eigenvalues();
        const Scalar cutoff = vals.cwiseAbs().maxCoeff() * Scalar(1e-12);
        ShVector<Scalar> inv(vals.size());
        for (Eigen::Index i = 0; i < vals.size(); ++i)
            inv[i] = vals[i] > cutoff ? Scalar(1) / vals[i] : Scalar(0);
        pinv_ = eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
    }

    SHBasis basis_;
    ShMatrix<Scalar> lhs_;
    SHCoefficients<Scalar> rhs_;
    Eigen::LDLT<ShMatrix<Scalar>> ldlt_;
    ShMatrix<Scalar> pinv_;
    bool use_pinv_ = false;
};

template <class Scalar>
SHCoefficients<Scalar> sh_fit(std::span<const WeightedColorSample<Scalar>> samples,
                              const SHBasis &basis, const SHRegularizer &reg = {}) {
    return ShNormalEquations<Scalar>(samples, basis, reg).coefficients();
}

/// R(direction; theta). Not clamped.
template <class Scalar>
Eigen::Matrix<Scalar, 3, 1> sh_color(const SHCoefficients<Scalar> &coeffs,
                                     const Eigen::Matrix<Scalar, 3, 1> &direction) {
    const int degree = int(std::lround(std::sqrt(double(coeffs.rows())))) - 1;
    const ShVector<Scalar> b = sh_eval(SHBasis(degree), direction);
    return coeffs.transpose() * b;
}

} // namespace rayvis
