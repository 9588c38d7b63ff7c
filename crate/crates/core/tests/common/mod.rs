#![allow(dead_code)]

pub mod grad;
pub mod jacobian;
