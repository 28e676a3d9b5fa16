pub mod chaos;
pub mod cli;
pub mod header;
pub mod load;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod resmon;
pub mod spec;
pub mod transport;
