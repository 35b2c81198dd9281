pub mod control;
pub mod gibbs;
pub mod hjb;
pub mod lab;
pub mod numerics;
pub mod problems;
pub mod sde;
