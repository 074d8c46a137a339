//! Builds a federation from a config and drives it for `R` rounds.

use std::path::Path;
use std::sync::Arc;

use log::info;
use rand::seq::SliceRandom;

use crate::config::{ControlInit, DataSource, ExperimentConfig, PartitionScheme, RegMode};
use crate::data::{dirichlet_partition, gen_synthetic, load_csv, parse_label_map, ClientShard, PartitionSpec};
use crate::error::{Error, Result};
use crate::federation::{
    control_from_gradients, evaluate, run_round, FederatedProblem, RoundConfig, ServerState,
};
use crate::algorithms::ControlState;
use crate::metrics::{export_csv, RoundLedger};
use crate::param_space::{BlockPartition, ParamVector};
use crate::problems::{Dataset, Objective};
use crate::seeding::{derive_seed, rng_for, tag};
use crate::transport::Bus;

/// Learning rates searched when tuning.
pub const ETA_GRID: [f64; 6] = [0.01, 0.03, 0.05, 0.1, 0.2, 0.3];

pub fn load_dataset(source: &DataSource) -> Result<Dataset> {
    match source {
        DataSource::Synthetic { n, d, margin, seed } => gen_synthetic(*n, *d, *margin, *seed),
        DataSource::Csv {
            path,
            label_column,
            label_map,
        } => load_csv(path, label_column, &parse_label_map(label_map)?),
    }
}

pub fn build_objective(cfg: &ExperimentConfig, data: Arc<Dataset>) -> Result<Objective> {
    match cfg.problem.reg_mode {
        RegMode::Absolute => Objective::new(cfg.problem.kind, data, cfg.problem.reg),
        RegMode::Relative => Objective::with_relative_reg(cfg.problem.kind, data, cfg.problem.reg),
    }
}

pub fn build_shards(cfg: &ExperimentConfig, data: &Dataset) -> Result<Vec<ClientShard>> {
    let seed = cfg
        .partition_seed
        .unwrap_or_else(|| derive_seed(cfg.master_seed, &[tag::PARTITION]));
    let m = cfg.clients;
    if m > data.n() {
        return Err(Error::TooManyClients {
            clients: m,
            samples: data.n(),
        });
    }
    match cfg.partition_scheme {
        PartitionScheme::Dirichlet => dirichlet_partition(
            data,
            &PartitionSpec {
                num_clients: m,
                rho: cfg.rho,
                seed,
            },
        ),
        PartitionScheme::Identical => Ok((0..m)
            .map(|client_id| ClientShard {
                client_id,
                indices: (0..data.n()).collect(),
            })
            .collect()),
        PartitionScheme::Iid => {
            let mut idx: Vec<usize> = (0..data.n()).collect();
            idx.shuffle(&mut rng_for(seed, &[tag::PARTITION]));
            let (base, extra) = (data.n() / m, data.n() % m);
            let mut start = 0;
            Ok((0..m)
                .map(|client_id| {
                    let len = base + usize::from(client_id < extra);
                    let mut indices = idx[start..start + len].to_vec();
                    indices.sort_unstable();
                    start += len;
                    ClientShard { client_id, indices }
                })
                .collect())
        }
    }
}

/// A fully built, ready-to-run experiment.
#[derive(Debug)]
pub struct Experiment {
    pub problem: FederatedProblem,
    pub server: ServerState,
    pub round_cfg: RoundConfig,
    pub bus: Bus,
    pub rounds: u32,
}

impl Experiment {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let data = Arc::new(load_dataset(&cfg.problem.source)?);
        Self::build_on(cfg, data)
    }

    /// Like [`Experiment::build`] but reuses an already loaded dataset.
    pub fn build_on(cfg: &ExperimentConfig, data: Arc<Dataset>) -> Result<Self> {
        let shards = build_shards(cfg, &data)?;
        let objective = Arc::new(build_objective(cfg, data)?);
        let d = objective.dim();
        let partition = BlockPartition::equal(d, cfg.blocks, cfg.shared_size)?;
        let problem = FederatedProblem::new(objective, shards)?;
        let x0 = ParamVector::zeros(d);
        let control = if cfg.local.rule.uses_control_variates() {
            Some(match cfg.control_init {
                ControlInit::Zero => ControlState::new(d, cfg.clients),
                ControlInit::Gradient => control_from_gradients(&problem, &x0)?,
            })
        } else {
            None
        };
        let server = ServerState::new(x0, partition, cfg.lambda, control)?;
        let mut round_cfg = RoundConfig::new(cfg.local, cfg.sample, cfg.master_seed);
        round_cfg.eta_decay = cfg.eta_decay;
        round_cfg.compression = cfg.compression;
        round_cfg.control_scaling = cfg.control_scaling;
        round_cfg.bandwidth = cfg.bandwidth.clone();
        round_cfg.record_time = cfg.record_time;
        let mut bus = Bus::new(cfg.float_unit);
        if cfg.dump_frames {
            if let Some(dir) = &cfg.out_dir {
                let frames = dir.join("frames");
                std::fs::create_dir_all(&frames).map_err(|e| Error::io(&frames, e))?;
                bus = bus.with_dump_dir(frames);
            }
        }
        Ok(Self {
            problem,
            server,
            round_cfg,
            bus,
            rounds: cfg.rounds,
        })
    }

    /// Initial evaluation row followed by one row per round.
    pub fn run(&mut self) -> Result<RoundLedger> {
        let mut ledger = RoundLedger::new();
        ledger.push(evaluate(&self.server, &self.problem, &self.bus, 0)?)?;
        for _ in 0..self.rounds {
            let row = run_round(&mut self.server, &self.problem, &self.round_cfg, &self.bus)?;
            ledger.push(row)?;
        }
        if let Some(last) = ledger.last() {
            info!(
                "{} rounds of {}: loss {:.6e}, {} floats uploaded",
                self.rounds, self.round_cfg.local.rule, last.train_loss, last.cumulative_upload_floats
            );
        }
        Ok(ledger)
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RoundLedger> {
    Experiment::build(cfg)?.run()
}

/// Runs the experiment and writes `ledger.csv` into `dir`.
pub fn run_to_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<RoundLedger> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ledger = run_experiment(cfg)?;
    export_csv(&ledger, dir.join("ledger.csv"))?;
    Ok(ledger)
}

/// Picks the step size from `grid` with the lowest final training loss;
/// diverged runs are skipped. Returns the winner and its ledger.
pub fn tune_eta(cfg: &ExperimentConfig, data: Arc<Dataset>, grid: &[f64]) -> Result<(f64, RoundLedger)> {
    let mut best: Option<(f64, RoundLedger)> = None;
    for &eta in grid {
        let mut c = cfg.clone();
        c.local.eta = eta;
        let ledger = Experiment::build_on(&c, Arc::clone(&data))?.run()?;
        let loss = ledger.last().map_or(f64::NAN, |r| r.train_loss);
        if !loss.is_finite() {
            continue;
        }
        let better = best
            .as_ref()
            .is_none_or(|(_, b)| loss < b.last().expect("nonempty").train_loss);
        if better {
            best = Some((eta, ledger));
        }
    }
    best.ok_or_else(|| Error::Validation("every step size in the grid diverged".into()))
}
