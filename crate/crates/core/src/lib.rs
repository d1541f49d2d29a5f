pub mod claims;
pub mod config;
pub mod eval;
pub mod features;
pub mod learners;
pub mod phases;
pub mod pipeline;
pub mod provenance;
pub mod sim;
