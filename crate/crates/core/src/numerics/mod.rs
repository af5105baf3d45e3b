//! Numerical building blocks: splines, quadrature, root finding, normal
//! distribution functions, and a quasi-Newton optimizer.

pub mod linalg;
pub mod normal;
pub mod optim;
pub mod quadrature;
pub mod roots;
pub mod spline;

pub use linalg::CovStructure;
pub use normal::{std_normal, std_normal_cdf, std_normal_pdf};
pub use quadrature::{
    gauss_hermite, gk15, gk15_panel_points, gk15_panels, QuadratureKind, QuadratureRule,
};
pub use roots::brent_root;
pub use spline::{BSplineBasis, NcsBasis};
