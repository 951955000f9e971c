//! Driver for training, evaluating and comparing SERL runs.

pub mod commands;
pub mod settings;
