pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod networks;
pub mod objectives;
pub mod pipeline;
pub mod report;
pub mod tensor;
pub mod verify;
