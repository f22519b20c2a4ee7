pub mod analysis;
pub mod cli;
pub mod compose;
pub mod exec;
pub mod expr;
pub mod gallery;
pub mod graph;
pub mod morphism;
pub mod sample;
pub mod system;
