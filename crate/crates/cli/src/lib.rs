//! Command-line tools and the local generation service.

pub mod commands;
pub mod request;
pub mod service;
