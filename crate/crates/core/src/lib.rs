//! Concept-level memory for compositional reasoning over ARC-style grid
//! puzzles.

pub mod abstraction;
pub mod clock;
pub mod continual;
pub mod evaluator;
pub mod experiment;
pub mod exchange;
pub mod gateway;
pub mod grid;
pub mod prompts;
pub mod selection;
pub mod sandbox;
pub mod solver;
pub mod store;
