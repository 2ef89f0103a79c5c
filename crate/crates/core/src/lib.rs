pub mod domain;
pub mod ingestion;
pub mod kmedoids;
pub mod partition;
pub mod logreg;
pub mod committee;
pub mod consensus;
pub mod iteration;
pub mod store;
pub mod engine;
pub mod sim;
pub mod config;
pub mod projection;
pub mod service;
