pub mod config;
pub mod manifest;
pub mod measure;
pub mod pipeline;
pub mod report;
