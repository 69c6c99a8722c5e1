pub mod attacks;
pub mod bundled;
pub mod channel;
pub mod config;
pub mod knowledge;
pub mod pfs;
pub mod report;
pub mod stats;
pub mod vectors;
pub mod world;
