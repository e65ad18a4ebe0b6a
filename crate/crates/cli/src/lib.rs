//! Command-line tools and the HTTP inference service.

pub mod commands;
pub mod config;
pub mod service;
