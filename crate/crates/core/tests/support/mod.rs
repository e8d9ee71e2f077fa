#![allow(dead_code)]
//! Test oracles shared by the integration and acceptance suites.

pub mod data;
pub mod gradcheck;
