//! File formats, commands and the experiment harness around
//! `transreid-core`.

pub mod ablate_cmd;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod eval_cmd;
pub mod run;
pub mod synth_cmd;
pub mod train_cmd;
