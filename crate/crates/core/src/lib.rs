pub mod crypto;
pub mod puf;
pub mod rffi;
pub mod entities;
pub mod messages;
pub mod meter;
pub mod metrics;
pub mod protocol;
