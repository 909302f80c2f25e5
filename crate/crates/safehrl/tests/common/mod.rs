#![allow(dead_code)]

pub mod exec;
pub mod qp;
