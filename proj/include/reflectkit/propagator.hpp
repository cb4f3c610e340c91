#pragma once

#include <cmath>

#include <Eigen/Dense>

namespace reflectkit {

template <typename Scalar>
using Transfer = Eigen::Matrix<Scalar, 2, 2>;

template <typename Scalar>
using CauchyData = Eigen::Matrix<Scalar, 2, 1>;

/// Exact transfer map of -y'' + c y = w^2 y over a cell of (signed) length
/// delta, acting on (y, y'). k2 = w^2 - c; k2 < 0 uses the hyperbolic branch.
/// The determinant is one, so the Wronskian is conserved cell by cell.
template <typename Scalar>
Transfer<Scalar> cell_transfer(Scalar k2, Scalar delta)
{
    using std::abs;
    using std::cos;
    using std::cosh;
    using std::sin;
    using std::sinh;
    using std::sqrt;

    Transfer<Scalar> m;
    if (abs(k2) < Scalar(1e-12)) {
        m << Scalar(1), delta, Scalar(0), Scalar(1);
    } else if (k2 > Scalar(0)) {
        const Scalar k = sqrt(k2);
        const Scalar c = cos(k * delta);
        const Scalar s = sin(k * delta);
        m << c, s / k, -k * s, c;
    } else {
        const Scalar kappa = sqrt(-k2);
        const Scalar c = cosh(kappa * delta);
        const Scalar s = sinh(kappa * delta);
        m << c, s / kappa, kappa * s, c;
    }
    return m;
}

/// Piecewise-constant reading of a linearly interpolated potential: cell i
/// carries the mean of samples i and i+1.
template <typename Derived>
typename Derived::Scalar cell_potential(const Eigen::MatrixBase<Derived>& q, Eigen::Index cell)
{
    return typename Derived::Scalar(0.5) * (q(cell) + q(cell + 1));
}

} // namespace reflectkit
