//! Client-side local update rules and server control-variate maintenance.
//!
//! All local rules are pure functions of `(inputs, seed)`: minibatches for
//! local step `t` are drawn from a stream keyed by `(seed, t)`.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;

use crate::data::ClientShard;
use crate::error::{Error, Result};
use crate::param_space::{BlockId, BlockPartition, ParamVector};
use crate::problems::Objective;
use crate::seeding::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LocalRule {
    FedAvg,
    FedBcgd,
    FedBcgdPlus,
    FreezeNonShare,
    FreezeShare,
    Scaffold,
}

impl LocalRule {
    pub const ALL: [LocalRule; 6] = [
        LocalRule::FedAvg,
        LocalRule::FedBcgd,
        LocalRule::FedBcgdPlus,
        LocalRule::FreezeNonShare,
        LocalRule::FreezeShare,
        LocalRule::Scaffold,
    ];

    /// Rules that upload the whole model rather than one block.
    pub fn uploads_full_model(self) -> bool {
        matches!(self, LocalRule::FedAvg | LocalRule::Scaffold)
    }

    pub fn uses_control_variates(self) -> bool {
        matches!(self, LocalRule::FedBcgdPlus | LocalRule::Scaffold)
    }

    /// Whether block uploads include the shared block.
    pub fn uploads_shared(self) -> bool {
        !matches!(self, LocalRule::FreezeNonShare)
    }

    /// Server momentum used when the configuration leaves it unset.
    pub fn default_lambda(self) -> f64 {
        match self {
            LocalRule::FedBcgd => 0.8,
            _ => 0.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LocalRule::FedAvg => "fedavg",
            LocalRule::FedBcgd => "fedbcgd",
            LocalRule::FedBcgdPlus => "fedbcgd_plus",
            LocalRule::FreezeNonShare => "fedbcgd_freeze_nonshare",
            LocalRule::FreezeShare => "fedbcgd_freeze_share",
            LocalRule::Scaffold => "scaffold",
        }
    }
}

impl fmt::Display for LocalRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LocalRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s
            .trim()
            .to_ascii_lowercase()
            .replace('+', "_plus")
            .replace('-', "_");
        LocalRule::ALL
            .into_iter()
            .find(|r| r.name() == norm)
            .ok_or_else(|| Error::Validation(format!("unknown rule {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalSteps {
    Fixed(usize),
    /// `E` passes over the shard: `T = E · ceil(|shard| / batch)`.
    Epochs(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalConfig {
    pub eta: f64,
    pub steps: LocalSteps,
    pub batch_size: usize,
    pub rule: LocalRule,
    /// FedBCGD+ only: include the SVRG correction pair. Off gives the
    /// drift-control-only variant.
    pub variance_reduction: bool,
}

impl LocalConfig {
    pub fn new(rule: LocalRule, eta: f64, steps: usize, batch_size: usize) -> Self {
        Self {
            eta,
            steps: LocalSteps::Fixed(steps),
            batch_size,
            rule,
            variance_reduction: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::BadLocalConfig(format!("eta must be >= 0, got {}", self.eta)));
        }
        match self.steps {
            LocalSteps::Fixed(0) | LocalSteps::Epochs(0) => {
                return Err(Error::BadLocalConfig("local steps must be >= 1".into()))
            }
            _ => {}
        }
        if self.batch_size == 0 {
            return Err(Error::BadLocalConfig("batch size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn steps_for(&self, shard_len: usize) -> usize {
        match self.steps {
            LocalSteps::Fixed(t) => t,
            LocalSteps::Epochs(e) => e * shard_len.div_ceil(self.batch_size).max(1),
        }
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }
}

/// Server control variate `c` plus the per-client variates `c_i`
/// (zero until first written).
#[derive(Debug, Clone, PartialEq)]
pub struct ControlState {
    pub c_global: ParamVector,
    c_local: Vec<Option<ParamVector>>,
}

impl ControlState {
    pub fn new(dim: usize, num_clients: usize) -> Self {
        Self {
            c_global: ParamVector::zeros(dim),
            c_local: vec![None; num_clients],
        }
    }

    pub fn dim(&self) -> usize {
        self.c_global.len()
    }

    pub fn num_clients(&self) -> usize {
        self.c_local.len()
    }

    pub fn local(&self, client: usize) -> Cow<'_, ParamVector> {
        match self.c_local.get(client).and_then(Option::as_ref) {
            Some(c) => Cow::Borrowed(c),
            None => Cow::Owned(ParamVector::zeros(self.dim())),
        }
    }

    pub fn set_local(&mut self, client: usize, value: ParamVector) -> Result<()> {
        if value.len() != self.dim() {
            return Err(Error::LayoutMismatch {
                expected: self.dim(),
                actual: value.len(),
            });
        }
        let clients = self.num_clients();
        let slot = self
            .c_local
            .get_mut(client)
            .ok_or(Error::UnknownClient { client, clients })?;
        *slot = Some(value);
        Ok(())
    }

    /// Overwrites the coordinates of `regions` in `c_client` with `source`.
    pub fn commit_local_regions(
        &mut self,
        client: usize,
        source: &[f64],
        regions: &[std::ops::Range<usize>],
    ) -> Result<()> {
        let mut c = self.local(client).into_owned();
        for r in regions {
            c[r.clone()].copy_from_slice(&source[r.clone()]);
        }
        self.set_local(client, c)
    }

    /// `(1/M) Σ_i c_i` (never-written clients contribute zero).
    pub fn mean_local(&self) -> ParamVector {
        let mut acc = vec![0.0; self.dim()];
        for c in self.c_local.iter().flatten() {
            for (a, v) in acc.iter_mut().zip(c.iter()) {
                *a += v;
            }
        }
        let m = self.num_clients() as f64;
        acc.into_iter().map(|a| a / m).collect::<Vec<_>>().into()
    }
}

/// A client's `Δc` restricted to one region of the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlDelta {
    pub client_id: usize,
    pub block: BlockId,
    pub values: Vec<f64>,
}

/// One parameter upload (`block_values`) plus the matching `Δc` slice.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpload {
    pub client_id: usize,
    pub block: BlockId,
    pub block_values: Vec<f64>,
    pub delta_c_block: Option<Vec<f64>>,
}

/// Denominators for the server control update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ControlScaling {
    /// `1/M` for blocks, `1/(M·N)` for the shared block.
    #[default]
    AllClients,
    /// `1/K` per block, `1/(N·K)` for the shared block.
    Participants,
}

/// Result of a control-variate local rule.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlledOutcome {
    pub x: ParamVector,
    pub delta_c: ParamVector,
    /// The client's new control variate `c_i^+`.
    pub c_plus: ParamVector,
}

fn check_dim(obj: &Objective, v: &[f64]) -> Result<()> {
    if v.len() != obj.dim() {
        return Err(Error::DimensionMismatch {
            expected: obj.dim(),
            actual: v.len(),
        });
    }
    Ok(())
}

/// Minibatch for local step `step`: the whole shard (in shard order) when the
/// batch covers it, otherwise a sorted uniform sample without replacement.
pub fn minibatch<'a>(shard: &'a ClientShard, batch: usize, seed: u64, step: usize) -> Cow<'a, [usize]> {
    if batch >= shard.len() {
        return Cow::Borrowed(&shard.indices);
    }
    let mut rng = rng_for(seed, &[step as u64]);
    let mut pos = index::sample(&mut rng, shard.len(), batch).into_vec();
    pos.sort_unstable();
    Cow::Owned(pos.into_iter().map(|p| shard.indices[p]).collect())
}

/// `T` steps of `x ← x − η ∇f(x; ζ)` over all coordinates.
pub fn local_sgd(
    x0: &[f64],
    obj: &Objective,
    shard: &ClientShard,
    cfg: &LocalConfig,
    rng_seed: u64,
) -> Result<ParamVector> {
    check_dim(obj, x0)?;
    let mut x = x0.to_vec();
    for t in 0..cfg.steps_for(shard.len()) {
        let batch = minibatch(shard, cfg.batch_size, rng_seed, t);
        let g = obj.grad(&x, Some(&batch))?;
        for (xj, gj) in x.iter_mut().zip(g.iter()) {
            *xj -= cfg.eta * gj;
        }
    }
    Ok(x.into())
}

/// FedBCGD+ local rule:
/// `x ← x − η [∇f(x;ζ) + (c − c_i) + (∇f(x⁰) − ∇f(x⁰;ζ))]`.
///
/// The anchor gradient `∇f(x⁰)` is computed once over the whole shard and
/// becomes `c_i^+`; `Δc = c_i^+ − c_i`.
pub fn local_bcgd_plus(
    x0: &[f64],
    obj: &Objective,
    shard: &ClientShard,
    cfg: &LocalConfig,
    c: &[f64],
    c_i: &[f64],
    rng_seed: u64,
) -> Result<ControlledOutcome> {
    check_dim(obj, x0)?;
    check_dim(obj, c)?;
    check_dim(obj, c_i)?;
    let g_full = obj.grad(x0, Some(&shard.indices))?;
    let drift: Vec<f64> = c.iter().zip(c_i).map(|(a, b)| a - b).collect();
    let mut x = x0.to_vec();
    for t in 0..cfg.steps_for(shard.len()) {
        let batch = minibatch(shard, cfg.batch_size, rng_seed, t);
        let g = obj.grad(&x, Some(&batch))?;
        if cfg.variance_reduction {
            let g_anchor = obj.grad(x0, Some(&batch))?;
            for j in 0..x.len() {
                let dir = (g[j] + drift[j]) + (g_full[j] - g_anchor[j]);
                x[j] -= cfg.eta * dir;
            }
        } else {
            for j in 0..x.len() {
                x[j] -= cfg.eta * (g[j] + drift[j]);
            }
        }
    }
    let delta_c: Vec<f64> = g_full.iter().zip(c_i).map(|(a, b)| a - b).collect();
    Ok(ControlledOutcome {
        x: x.into(),
        delta_c: delta_c.into(),
        c_plus: g_full,
    })
}

/// Block-freezing ablation: SGD on the assigned block (and the shared block
/// when `with_shared`) only; every other coordinate stays at `x0`.
#[allow(clippy::too_many_arguments)]
pub fn local_freeze(
    x0: &[f64],
    obj: &Objective,
    shard: &ClientShard,
    cfg: &LocalConfig,
    partition: &BlockPartition,
    assigned_block: usize,
    with_shared: bool,
    rng_seed: u64,
) -> Result<ParamVector> {
    check_dim(obj, x0)?;
    if partition.total_dim() != x0.len() {
        return Err(Error::LayoutMismatch {
            expected: partition.total_dim(),
            actual: x0.len(),
        });
    }
    let mut active = vec![partition.range(BlockId::Block(assigned_block))?];
    if with_shared {
        active.push(partition.range(BlockId::Shared)?);
    }
    let mut x = x0.to_vec();
    for t in 0..cfg.steps_for(shard.len()) {
        let batch = minibatch(shard, cfg.batch_size, rng_seed, t);
        let g = obj.grad(&x, Some(&batch))?;
        for r in &active {
            for j in r.clone() {
                x[j] -= cfg.eta * g[j];
            }
        }
    }
    Ok(x.into())
}

/// SCAFFOLD baseline: `x ← x − η (∇f(x;ζ) − c_i + c)`, then the
/// difference-of-iterates control update
/// `c_i^+ = c_i − c + (x⁰ − x_T)/(T η)`.
pub fn scaffold_local(
    x0: &[f64],
    obj: &Objective,
    shard: &ClientShard,
    cfg: &LocalConfig,
    c: &[f64],
    c_i: &[f64],
    rng_seed: u64,
) -> Result<ControlledOutcome> {
    check_dim(obj, x0)?;
    check_dim(obj, c)?;
    check_dim(obj, c_i)?;
    let drift: Vec<f64> = c.iter().zip(c_i).map(|(a, b)| a - b).collect();
    let steps = cfg.steps_for(shard.len());
    let mut x = x0.to_vec();
    for t in 0..steps {
        let batch = minibatch(shard, cfg.batch_size, rng_seed, t);
        let g = obj.grad(&x, Some(&batch))?;
        for j in 0..x.len() {
            x[j] -= cfg.eta * (g[j] + drift[j]);
        }
    }
    let scale = steps as f64 * cfg.eta;
    let c_plus: Vec<f64> = if scale > 0.0 {
        (0..x.len())
            .map(|j| c_i[j] - c[j] + (x0[j] - x[j]) / scale)
            .collect()
    } else {
        // No movement information when η = 0; keep the old variate.
        c_i.to_vec()
    };
    let delta_c: Vec<f64> = c_plus.iter().zip(c_i).map(|(a, b)| a - b).collect();
    Ok(ControlledOutcome {
        x: x.into(),
        delta_c: delta_c.into(),
        c_plus: c_plus.into(),
    })
}

/// Applies the server control update blockwise, in client-id order:
/// `c_(j) += Σ_k Δc_{k,(j)} / M`, `c_s += Σ Δc_{k,s} / (M·N)`,
/// `c += Σ Δc_k / M` for full-vector deltas.
pub fn server_apply_control(
    control: &mut ControlState,
    participants: &[ControlDelta],
    num_clients: usize,
    partition: &BlockPartition,
    scaling: ControlScaling,
) -> Result<()> {
    if control.dim() != partition.total_dim() {
        return Err(Error::LayoutMismatch {
            expected: partition.total_dim(),
            actual: control.dim(),
        });
    }
    let mut sorted: Vec<&ControlDelta> = participants.iter().collect();
    sorted.sort_by_key(|d| (d.block, d.client_id));
    for d in &sorted {
        if d.client_id >= num_clients {
            return Err(Error::UnknownClient {
                client: d.client_id,
                clients: num_clients,
            });
        }
        let expected = partition.len_of(d.block)?;
        if d.values.len() != expected {
            return Err(Error::LayoutMismatch {
                expected,
                actual: d.values.len(),
            });
        }
    }
    let m = num_clients as f64;
    let n_blocks = partition.num_blocks() as f64;
    let mut i = 0;
    while i < sorted.len() {
        let block = sorted[i].block;
        let group: Vec<&ControlDelta> = sorted[i..]
            .iter()
            .take_while(|d| d.block == block)
            .copied()
            .collect();
        i += group.len();
        let range = partition.range(block)?;
        let mut sum = vec![0.0; range.len()];
        for d in &group {
            for (s, v) in sum.iter_mut().zip(&d.values) {
                *s += v;
            }
        }
        let denom = match (scaling, block) {
            (ControlScaling::AllClients, BlockId::Shared) => m * n_blocks,
            (ControlScaling::AllClients, _) => m,
            (ControlScaling::Participants, _) => group.len() as f64,
        };
        for (c, s) in control.c_global[range].iter_mut().zip(sum) {
            *c += s / denom;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{Dataset, ObjectiveKind};
    use std::sync::Arc;

    fn quad(d: usize, n: usize) -> (Objective, ClientShard) {
        let feats: Vec<f64> = (0..n * d).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let ds = Dataset::new(feats, vec![1.0; n], d).unwrap();
        let obj = Objective::new(ObjectiveKind::Quadratic, Arc::new(ds), 0.0).unwrap();
        (obj, ClientShard { client_id: 0, indices: (0..n).collect() })
    }

    fn zero_quad(d: usize) -> (Objective, ClientShard) {
        let ds = Dataset::new(vec![0.0; 2 * d], vec![1.0; 2], d).unwrap();
        let obj = Objective::new(ObjectiveKind::Quadratic, Arc::new(ds), 0.0).unwrap();
        (obj, ClientShard { client_id: 0, indices: vec![0, 1] })
    }

    #[test]
    fn rule_names_round_trip() {
        for r in LocalRule::ALL {
            assert_eq!(r.name().parse::<LocalRule>().unwrap(), r);
        }
        assert_eq!("FedBCGD+".parse::<LocalRule>().unwrap(), LocalRule::FedBcgdPlus);
        assert_eq!("fedbcgd-freeze-share".parse::<LocalRule>().unwrap(), LocalRule::FreezeShare);
        assert!("fedprox".parse::<LocalRule>().is_err());
    }

    #[test]
    fn epochs_map_to_steps() {
        let mut cfg = LocalConfig::new(LocalRule::FedBcgd, 0.1, 1, 50);
        cfg.steps = LocalSteps::Epochs(2);
        assert_eq!(cfg.steps_for(120), 6);
        assert_eq!(cfg.steps_for(10), 2);
        assert!(LocalConfig::new(LocalRule::FedAvg, 0.1, 0, 1).validate().is_err());
        assert!(LocalConfig::new(LocalRule::FedAvg, -0.1, 1, 1).validate().is_err());
    }

    #[test]
    fn sgd_zero_eta_and_closed_form() {
        let (obj, shard) = zero_quad(3);
        let x0 = [1.0, -2.0, 4.0];
        let cfg = LocalConfig::new(LocalRule::FedAvg, 0.0, 5, 2);
        assert_eq!(&local_sgd(&x0, &obj, &shard, &cfg, 1).unwrap()[..], &x0);
        let cfg = LocalConfig::new(LocalRule::FedAvg, 0.1, 1, 2);
        let x = local_sgd(&x0, &obj, &shard, &cfg, 1).unwrap();
        for (a, b) in x.iter().zip(x0) {
            assert!((a - 0.9 * b).abs() < 1e-15);
        }
        assert!(matches!(
            local_sgd(&x0[..2], &obj, &shard, &cfg, 1),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn minibatch_is_sorted_subset() {
        let shard = ClientShard { client_id: 0, indices: (10..40).collect() };
        let b = minibatch(&shard, 7, 3, 2);
        assert_eq!(b.len(), 7);
        assert!(b.windows(2).all(|w| w[0] < w[1]));
        assert!(b.iter().all(|i| shard.indices.contains(i)));
        assert_eq!(b, minibatch(&shard, 7, 3, 2));
        assert_eq!(&*minibatch(&shard, 30, 3, 2), &shard.indices[..]);
    }

    #[test]
    fn plus_with_equal_controls_and_full_batch_matches_sgd() {
        let (obj, shard) = quad(4, 6);
        let x0 = [0.3, -0.1, 2.0, 1.0];
        let cfg = LocalConfig::new(LocalRule::FedBcgdPlus, 0.2, 4, 100);
        let c = [0.5, 0.25, -1.0, 3.0];
        let out = local_bcgd_plus(&x0, &obj, &shard, &cfg, &c, &c, 7).unwrap();
        let sgd = local_sgd(&x0, &obj, &shard, &cfg, 7).unwrap();
        assert_eq!(out.x, sgd);
        let g0 = obj.grad(&x0, Some(&shard.indices)).unwrap();
        assert_eq!(out.c_plus, g0);
        for j in 0..4 {
            assert_eq!(out.delta_c[j], g0[j] - c[j]);
        }
    }

    #[test]
    fn plus_full_batch_reduces_to_drift_control() {
        let (obj, shard) = quad(4, 6);
        let x0 = [0.3, -0.1, 2.0, 1.0];
        let c = [0.5, 0.25, -1.0, 3.0];
        let ci = [0.0, 1.0, 0.5, -0.5];
        let cfg = LocalConfig::new(LocalRule::FedBcgdPlus, 0.2, 4, 6);
        let with_vr = local_bcgd_plus(&x0, &obj, &shard, &cfg, &c, &ci, 7).unwrap();
        let mut no_vr_cfg = cfg;
        no_vr_cfg.variance_reduction = false;
        let no_vr = local_bcgd_plus(&x0, &obj, &shard, &no_vr_cfg, &c, &ci, 7).unwrap();
        assert_eq!(with_vr, no_vr);
        // Closed form: x ← x − η (∇f(x) + c − c_i).
        let mut x = x0.to_vec();
        for _ in 0..4 {
            let g = obj.grad(&x, Some(&shard.indices)).unwrap();
            for j in 0..4 {
                x[j] -= 0.2 * (g[j] + (c[j] - ci[j]));
            }
        }
        assert_eq!(&with_vr.x[..], &x[..]);
    }

    #[test]
    fn freeze_contract() {
        let (obj, shard) = quad(4, 6);
        let p = BlockPartition::new(4, vec![2, 1], 1).unwrap();
        let x0 = [1.0, 2.0, 3.0, 4.0];
        let cfg = LocalConfig::new(LocalRule::FreezeNonShare, 0.3, 3, 2);
        let x = local_freeze(&x0, &obj, &shard, &cfg, &p, 0, false, 5).unwrap();
        assert_eq!(&x[2..], &x0[2..]);
        assert_ne!(&x[..2], &x0[..2]);
        let x = local_freeze(&x0, &obj, &shard, &cfg, &p, 1, true, 5).unwrap();
        assert_eq!(&x[..2], &x0[..2]);
        assert_ne!(x[3], x0[3]);

        let whole = BlockPartition::new(4, vec![4], 0).unwrap();
        let frozen = local_freeze(&x0, &obj, &shard, &cfg, &whole, 0, false, 5).unwrap();
        assert_eq!(frozen, local_sgd(&x0, &obj, &shard, &cfg, 5).unwrap());
    }

    #[test]
    fn scaffold_examples() {
        let (obj, shard) = quad(3, 5);
        let x0 = [1.0, 0.0, -1.0];
        let c = [0.2, -0.4, 0.1];
        let cfg = LocalConfig::new(LocalRule::Scaffold, 0.1, 3, 2);
        let out = scaffold_local(&x0, &obj, &shard, &cfg, &c, &c, 4).unwrap();
        assert_eq!(out.x, local_sgd(&x0, &obj, &shard, &cfg, 4).unwrap());

        let cfg1 = LocalConfig::new(LocalRule::Scaffold, 0.25, 1, 5);
        let out = scaffold_local(&x0, &obj, &shard, &cfg1, &[0.0; 3], &[0.0; 3], 4).unwrap();
        let g = obj.grad(&x0, None).unwrap();
        for j in 0..3 {
            assert_eq!(out.x[j], x0[j] - 0.25 * g[j]);
        }
    }

    #[test]
    fn scaffold_control_is_mean_step_direction() {
        let (obj, shard) = quad(3, 5);
        let x0 = [1.0, 0.5, -1.0];
        let c = [0.2, -0.4, 0.1];
        let ci = [-0.3, 0.0, 0.7];
        let cfg = LocalConfig::new(LocalRule::Scaffold, 0.1, 3, 2);
        let out = scaffold_local(&x0, &obj, &shard, &cfg, &c, &ci, 4).unwrap();
        // Replay the steps and average the applied directions.
        let mut x = x0.to_vec();
        let mut mean_dir = [0.0; 3];
        for t in 0..3 {
            let b = minibatch(&shard, 2, 4, t);
            let g = obj.grad(&x, Some(&b)).unwrap();
            for j in 0..3 {
                let dir = g[j] + (c[j] - ci[j]);
                mean_dir[j] += dir / 3.0;
                x[j] -= 0.1 * dir;
            }
        }
        for j in 0..3 {
            let telescoped = (x0[j] - out.x[j]) / 0.3;
            assert!((telescoped - mean_dir[j]).abs() < 1e-13);
            assert!((out.c_plus[j] - (ci[j] - c[j] + mean_dir[j])).abs() < 1e-13);
            assert_eq!(out.delta_c[j], out.c_plus[j] - ci[j]);
        }
    }

    #[test]
    fn control_update_examples() {
        let p = BlockPartition::new(3, vec![3], 0).unwrap();
        let mut cs = ControlState::new(3, 1);
        cs.c_global = vec![1.0, 2.0, 3.0].into();
        let before = cs.clone();
        let zero = ControlDelta { client_id: 0, block: BlockId::Block(0), values: vec![0.0; 3] };
        server_apply_control(&mut cs, &[zero], 1, &p, ControlScaling::AllClients).unwrap();
        assert_eq!(cs, before);

        let g = ControlDelta { client_id: 0, block: BlockId::Block(0), values: vec![0.5, -1.0, 2.0] };
        server_apply_control(&mut cs, &[g], 1, &p, ControlScaling::AllClients).unwrap();
        assert_eq!(&cs.c_global[..], &[1.5, 1.0, 5.0]);

        let bad = ControlDelta { client_id: 3, block: BlockId::Block(0), values: vec![0.0; 3] };
        assert!(matches!(
            server_apply_control(&mut cs, &[bad], 1, &p, ControlScaling::AllClients),
            Err(Error::UnknownClient { client: 3, .. })
        ));
        let short = ControlDelta { client_id: 0, block: BlockId::Block(0), values: vec![0.0; 2] };
        assert!(matches!(
            server_apply_control(&mut cs, &[short], 1, &p, ControlScaling::AllClients),
            Err(Error::LayoutMismatch { .. })
        ));
    }

    #[test]
    fn mean_local_counts_unset_clients_as_zero() {
        let mut cs = ControlState::new(2, 4);
        cs.set_local(1, vec![4.0, 8.0].into()).unwrap();
        assert_eq!(&cs.mean_local()[..], &[1.0, 2.0]);
        cs.commit_local_regions(2, &[10.0, 20.0], std::slice::from_ref(&(1..2))).unwrap();
        assert_eq!(&cs.local(2)[..], &[0.0, 20.0]);
        assert!(cs.set_local(9, vec![0.0, 0.0].into()).is_err());
    }
}
