pub mod error;
pub mod event_stream;
pub mod kac_system;
pub mod transport;
pub mod flow;
pub mod stats;
pub mod coupling;
pub mod experiments;
