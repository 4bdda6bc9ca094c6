#![allow(dead_code)]

pub mod criteria;

use std::path::PathBuf;

use polydmc::config::{self, LoadedConfig};
use polydmc::harness::ScenarioConfig;

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

pub fn load(name: &str) -> LoadedConfig {
    config::load(&config_path(name)).expect("shipped config loads")
}

pub fn nominal() -> ScenarioConfig {
    load("nominal.toml").scenario
}

pub fn disturbed() -> ScenarioConfig {
    load("disturbed.toml").scenario
}

/// |a − b| / max(|a|, |b|), zero when both vanish.
pub fn rel_diff(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
