pub mod channel;
pub mod desync;
pub mod engine;
pub mod par;
pub mod scenario;
pub mod splitjoin;
pub mod sweep;
pub mod topology;
pub mod trace;
