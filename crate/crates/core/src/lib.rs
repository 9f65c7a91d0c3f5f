pub mod alloc;
pub mod channel;
pub mod cli;
pub mod cpu;
pub mod profiler;
pub mod report;
pub mod sim;
pub mod trends;
pub mod units;
pub mod vm;
