pub mod expr;
pub mod jets;
pub mod numerics;
pub mod almost_analytic;
pub mod linalg;
pub mod branch;
pub mod newton;
pub mod phase;
pub mod oracle;
pub mod stationary;
pub mod symbol;
pub mod compose;
pub mod report;
pub mod config;
pub mod validate;
pub mod cli;
