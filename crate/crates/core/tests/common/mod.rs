#![allow(dead_code)]

pub mod flood;
pub mod gradcheck;
pub mod metrics;
