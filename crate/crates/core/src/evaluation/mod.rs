pub mod metrics;
pub mod suite;

pub use metrics::*;
pub use suite::*;
