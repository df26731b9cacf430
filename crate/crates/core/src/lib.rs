//! Flow maps of nonautonomous ODEs, their forward sensitivities, and the
//! nonlinear variation-of-constants identity that expresses a perturbed
//! solution as the unperturbed flow plus transported defects.

// `!(a > b)` is used on purpose so that NaN inputs are rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod agformula;
pub mod cli;
pub mod error;
pub mod exec;
pub mod flow;
pub mod path;
pub mod picard;
pub mod problems;
pub mod quadrature;
pub mod sensitivity;
pub mod types;
