#![allow(dead_code)]

pub mod dgp;
pub mod integrals;
pub mod quadrature;
