//! Exact or near-exact samplers reused across the model: Pólya-gamma draws,
//! elliptical slice sampling, Chinese-restaurant-table counts and
//! normal–inverse-Wishart draws with their Student-t marginal.

mod crt;
mod niw;
mod polya_gamma;
mod slice;

pub use crt::{crt_draw, crt_mean};
pub use niw::{
    gaussian_log_density, inverse_wishart_draw, niw_draw, niw_marginal_density,
    niw_marginal_log_density, student_t_log_density, NiwParams,
};
pub use polya_gamma::{pg_draw, pg_draw_or_zero, PolyaGammaParams, PG_TERMS};
pub use slice::{ess_step, ess_update, EllipseState, MIN_BRACKET};
