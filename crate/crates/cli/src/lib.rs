//! Command-line front end and HTTP job service over [`emojich::pipeline`].

pub mod commands;
pub mod jobs;
pub mod service;
