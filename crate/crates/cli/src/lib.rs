pub mod client;
pub mod commands;
pub mod server;

pub use commands::{run, Cli};
