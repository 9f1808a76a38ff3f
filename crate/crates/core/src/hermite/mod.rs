//! Hermite-polynomial algebra over the standard Gaussian measure.
//!
//! All series use the unnormalized probabilists' basis `He_k`; use
//! [`HermiteSeries::from_normalized`] and [`HermiteSeries::to_normalized`]
//! when reading or writing coefficients on the orthonormal basis.

mod quadrature;
mod series;

pub use quadrature::{
    expand_function, gauss_quadrature, normal_cdf, normal_pdf, relu_shifted_coeffs, superorthogonality_check,
    superorthogonality_order, QuadratureRule, RuleKind, DEFAULT_ORDER, MAX_ORDER,
};
pub use series::{factorial, he_eval, he_table, superorthogonal_k2_l2, HermiteSeries, DEFAULT_IE_TOL};
