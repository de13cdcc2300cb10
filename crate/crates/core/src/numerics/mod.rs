//! Shared numerical machinery.

pub mod linalg;
pub mod optimize;
pub mod quadrature;
pub mod special;

pub use linalg::{psd_logdet, psd_solve, PsdFactor};
pub use optimize::{check_gradient, minimize, GradientCheck, MinimizeOptions, MinimizeStatus, Minimum};
pub use quadrature::{
    discrete_expect, gauss_hermite, gaussian_expect, hermite_expect, integrate_adaptive, CountCap,
    GaussianExpectationPlan, QuadratureScheme,
};
pub use special::{digamma, inverse_digamma, polygamma, tetragamma, trigamma};
