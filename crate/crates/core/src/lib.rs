//! Stochastic beable dynamics on finite configuration spaces with
//! self-adjusting spin bases.

pub mod linalg;
pub mod space;
pub mod spin;
pub mod dynamics;
pub mod models;
pub mod ensemble;
