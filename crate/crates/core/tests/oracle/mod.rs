//! Independent reference implementations shared by the integration and
//! acceptance tests.

#![allow(dead_code)]

pub mod assignment;
pub mod gen;
pub mod mase;
pub mod network;
pub mod panoptic;
