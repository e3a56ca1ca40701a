pub mod ablation;
pub mod bank;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod encoder;
pub mod fixtures;
pub mod losses;
pub mod ndiff;
pub mod permute;
pub mod probe;
pub mod seed;
pub mod textgen;
pub mod train;
