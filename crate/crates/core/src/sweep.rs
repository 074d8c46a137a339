//! One-axis parameter sweeps over a base configuration.

use rayon::prelude::*;

use crate::config::{ExperimentConfig, RawConfig, KNOWN_KEYS};
use crate::error::{Error, Result};
use crate::metrics::RoundLedger;
use crate::seeding::{derive_seed, tag};

/// Short axis names accepted besides full `section.key` names.
pub const AXIS_ALIASES: &[(&str, &str)] = &[
    ("m", "federation.clients"),
    ("s", "federation.sample"),
    ("n", "federation.blocks"),
    ("r", "federation.rounds"),
    ("lambda", "server.lambda"),
    ("eta", "local.eta"),
    ("t", "local.steps"),
    ("e", "local.epochs"),
    ("rho", "partition.rho"),
    ("k", "compression.k"),
    ("levels", "compression.levels"),
    ("rule", "local.rule"),
    ("seed", "master_seed"),
];

/// Resolves an axis name to its config key.
pub fn resolve_axis(axis: &str) -> Result<&'static str> {
    let lower = axis.trim().to_ascii_lowercase();
    if let Some((_, key)) = AXIS_ALIASES.iter().find(|(a, _)| *a == lower) {
        return Ok(key);
    }
    KNOWN_KEYS
        .iter()
        .find(|k| **k == lower)
        .copied()
        .ok_or_else(|| Error::UnknownAxis(axis.to_string()))
}

/// Seed of the child run for `value`. It depends only on the value text, so
/// adding or reordering sweep values leaves the other runs untouched.
pub fn child_seed(master_seed: u64, value: &str) -> u64 {
    derive_seed(master_seed, &[tag::SWEEP, fnv1a(value.trim())])
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Debug)]
pub struct SweepRun {
    pub value: String,
    pub config: Result<ExperimentConfig>,
    pub ledger: Result<RoundLedger>,
}

impl SweepRun {
    pub fn succeeded(&self) -> bool {
        self.ledger.is_ok()
    }
}

/// Child configuration for one sweep value.
pub fn child_config(base: &RawConfig, key: &str, value: &str) -> Result<ExperimentConfig> {
    let mut raw = base.clone();
    raw.set(key, value.trim())?;
    if key != "master_seed" {
        let master: u64 = match base.get("master_seed") {
            None => 0,
            Some(v) => v
                .parse()
                .map_err(|_| Error::Validation(format!("bad master_seed {v:?}")))?,
        };
        raw.set("master_seed", &child_seed(master, value).to_string())?;
    }
    ExperimentConfig::from_raw(&raw)
}

/// Runs every value in parallel. Invalid values produce a failed run; the
/// others still execute. An unknown axis fails before anything runs.
pub fn sweep(base: &RawConfig, axis: &str, values: &[String]) -> Result<Vec<SweepRun>> {
    let key = resolve_axis(axis)?;
    Ok(values
        .par_iter()
        .map(|value| {
            let config = child_config(base, key, value);
            let ledger = match &config {
                Ok(c) => crate::experiment::run_experiment(c),
                Err(e) => Err(Error::Validation(e.to_string())),
            };
            SweepRun {
                value: value.trim().to_string(),
                config,
                ledger,
            }
        })
        .collect())
}

/// Splits a comma-separated value list; blank input gives no values.
pub fn parse_values(csv: &str) -> Vec<String> {
    csv.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(String::from)
        .collect()
}
