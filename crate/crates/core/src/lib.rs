#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Attitude, position and velocity estimation on SE2(3) from IMU data and
//! landmark observations, with prescribed-performance error shaping.

pub mod liegroup;
pub mod measurements;
pub mod ppf;
pub mod filter;
pub mod harness;
