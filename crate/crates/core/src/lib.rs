pub mod geometry;
pub mod world;
pub mod nn;
pub mod policy;
pub mod reward;
pub mod controller;
pub mod baselines;
pub mod trainer;
pub mod eval;
