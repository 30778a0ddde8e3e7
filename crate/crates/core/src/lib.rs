pub mod agents;
pub mod backends;
pub mod benchmark;
pub mod config;
pub mod dataset;
pub mod math;
pub mod orchestrator;
pub mod prompts;
pub mod retrieval;
pub mod seed;
pub mod selfgame;
pub mod training;
