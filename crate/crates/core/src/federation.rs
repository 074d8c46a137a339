//! Round orchestration: sampling, block assignment, local work, uploads
//! through the bus, and blockwise server aggregation with momentum.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;
use std::time::Instant;

use log::debug;
use rand::seq::{index, SliceRandom};
use rayon::prelude::*;

use crate::algorithms::{
    local_bcgd_plus, local_freeze, local_sgd, scaffold_local, server_apply_control, ClientUpload, ControlDelta,
    ControlScaling, ControlState, LocalConfig, LocalRule,
};
use crate::compression::{CompressedPayload, CompressionConfig};
use crate::data::ClientShard;
use crate::error::{Error, Result};
use crate::metrics::RoundRecord;
use crate::param_space::{momentum_update, BlockId, BlockPartition, MomentumState, ParamVector};
use crate::problems::Objective;
use crate::seeding::{derive_seed, rng_for, tag};
use crate::transport::{deserialize, Bus, MsgType, WireMessage};

/// A dataset sharded over `M` clients plus the objective evaluated on it.
#[derive(Debug, Clone)]
pub struct FederatedProblem {
    objective: Arc<Objective>,
    shards: Vec<ClientShard>,
}

impl FederatedProblem {
    /// Shards may overlap (useful for homogeneous-client experiments) but
    /// each must be nonempty and `shards[i].client_id == i`.
    pub fn new(objective: Arc<Objective>, shards: Vec<ClientShard>) -> Result<Self> {
        if shards.is_empty() {
            return Err(Error::Validation("federation needs at least one client".into()));
        }
        let n = objective.dataset().n();
        for (i, s) in shards.iter().enumerate() {
            if s.client_id != i {
                return Err(Error::Validation(format!(
                    "shard at position {i} belongs to client {}",
                    s.client_id
                )));
            }
            if s.is_empty() {
                return Err(Error::Validation(format!("client {i} has an empty shard")));
            }
            if let Some(&bad) = s.indices.iter().find(|&&k| k >= n) {
                return Err(Error::SampleOutOfRange { index: bad, n });
            }
        }
        Ok(Self { objective, shards })
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn shard(&self, client: usize) -> &ClientShard {
        &self.shards[client]
    }

    pub fn shards(&self) -> &[ClientShard] {
        &self.shards
    }

    /// Federated objective `f(x) = (1/M) Σ_i f_i(x)`. Equals the pooled
    /// training loss only when all shards have the same size.
    pub fn loss(&self, x: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for s in &self.shards {
            total += self.objective.loss(x, Some(&s.indices))?;
        }
        Ok(total / self.shards.len() as f64)
    }

    /// Gradient of [`FederatedProblem::loss`].
    pub fn grad(&self, x: &[f64]) -> Result<ParamVector> {
        let mut total = ParamVector::zeros(x.len());
        for s in &self.shards {
            let g = self.objective.grad(x, Some(&s.indices))?;
            total.iter_mut().zip(g.iter()).for_each(|(t, gi)| *t += gi);
        }
        let m = self.shards.len() as f64;
        total.iter_mut().for_each(|t| *t /= m);
        Ok(total)
    }
}

/// Everything a round needs besides the server state.
#[derive(Debug, Clone)]
pub struct RoundConfig {
    pub local: LocalConfig,
    /// Per-round multiplicative step-size decay.
    pub eta_decay: f64,
    /// Clients sampled per round (`S`).
    pub sampled: usize,
    pub compression: CompressionConfig,
    pub control_scaling: ControlScaling,
    /// Optional per-client bandwidth; when set, slower clients get smaller blocks.
    pub bandwidth: Option<Vec<f64>>,
    pub master_seed: u64,
    pub record_time: bool,
}

impl RoundConfig {
    pub fn new(local: LocalConfig, sampled: usize, master_seed: u64) -> Self {
        Self {
            local,
            eta_decay: 1.0,
            sampled,
            compression: CompressionConfig::None,
            control_scaling: ControlScaling::AllClients,
            bandwidth: None,
            master_seed,
            record_time: false,
        }
    }

    pub fn eta_at(&self, round: u32) -> f64 {
        self.local.eta * self.eta_decay.powi(round as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub x: ParamVector,
    pub momentum: MomentumState,
    pub control: Option<ControlState>,
    pub round: u32,
    pub partition: BlockPartition,
}

impl ServerState {
    pub fn new(
        x0: ParamVector,
        partition: BlockPartition,
        lambda: f64,
        control: Option<ControlState>,
    ) -> Result<Self> {
        if x0.len() != partition.total_dim() {
            return Err(Error::LayoutMismatch {
                expected: partition.total_dim(),
                actual: x0.len(),
            });
        }
        if let Some(c) = &control {
            if c.dim() != partition.total_dim() {
                return Err(Error::LayoutMismatch {
                    expected: partition.total_dim(),
                    actual: c.dim(),
                });
            }
        }
        Ok(Self {
            momentum: MomentumState::new(x0.len(), lambda)?,
            x: x0,
            control,
            round: 0,
            partition,
        })
    }
}

/// Sampled clients and the region each one must upload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundPlan {
    /// Ascending client ids.
    pub sampled_clients: Vec<usize>,
    pub assignment: BTreeMap<usize, BlockId>,
}

impl RoundPlan {
    pub fn clients_for(&self, block: BlockId) -> Vec<usize> {
        self.assignment
            .iter()
            .filter(|(_, b)| **b == block)
            .map(|(c, _)| *c)
            .collect()
    }
}

/// `S` distinct clients, uniform without replacement, ascending.
pub fn sample_clients(m: usize, s: usize, round: u32, master_seed: u64) -> Result<Vec<usize>> {
    if s == 0 || s > m {
        return Err(Error::BadSampleSize {
            sample: s,
            clients: m,
        });
    }
    if s == m {
        return Ok((0..m).collect());
    }
    let mut rng = rng_for(master_seed, &[tag::SAMPLE_CLIENTS, u64::from(round)]);
    let mut ids = index::sample(&mut rng, m, s).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Uniformly random balanced assignment: every block gets `K = S/N` clients.
pub fn assign_blocks(sampled: &[usize], n: usize, round: u32, seed: u64) -> Result<RoundPlan> {
    let order = shuffled_for_assignment(sampled, n, round, seed)?;
    Ok(plan_from_chunks(sampled, &order, n, BlockId::Block))
}

/// Capability-aware assignment: clients sorted by bandwidth (ties broken by
/// the random order) fill blocks sorted by size, smallest first.
pub fn assign_blocks_by_bandwidth(
    sampled: &[usize],
    partition: &BlockPartition,
    bandwidth: &[f64],
    round: u32,
    seed: u64,
) -> Result<RoundPlan> {
    let n = partition.num_blocks();
    let mut order = shuffled_for_assignment(sampled, n, round, seed)?;
    if let Some(&c) = sampled.iter().find(|&&c| c >= bandwidth.len()) {
        return Err(Error::UnknownClient {
            client: c,
            clients: bandwidth.len(),
        });
    }
    order.sort_by(|&a, &b| bandwidth[a].total_cmp(&bandwidth[b]));
    let mut blocks: Vec<usize> = (0..n).collect();
    blocks.sort_by_key(|&j| (partition.block_sizes()[j], j));
    Ok(plan_from_chunks(sampled, &order, n, |rank| BlockId::Block(blocks[rank])))
}

fn shuffled_for_assignment(sampled: &[usize], n: usize, round: u32, seed: u64) -> Result<Vec<usize>> {
    if n == 0 || sampled.is_empty() || !sampled.len().is_multiple_of(n) {
        return Err(Error::IndivisibleSample {
            sampled: sampled.len(),
            blocks: n,
        });
    }
    let mut order = sampled.to_vec();
    let mut rng = rng_for(seed, &[tag::ASSIGN_BLOCKS, u64::from(round)]);
    order.shuffle(&mut rng);
    Ok(order)
}

fn plan_from_chunks(
    sampled: &[usize],
    order: &[usize],
    n: usize,
    block_of_chunk: impl Fn(usize) -> BlockId,
) -> RoundPlan {
    let k = order.len() / n;
    let assignment = order
        .chunks(k)
        .enumerate()
        .flat_map(|(j, chunk)| chunk.iter().map(move |&c| (c, j)))
        .map(|(c, j)| (c, block_of_chunk(j)))
        .collect();
    let mut sampled_clients = sampled.to_vec();
    sampled_clients.sort_unstable();
    RoundPlan {
        sampled_clients,
        assignment,
    }
}

/// Builds the round plan for `rule`: full-model rules upload [`BlockId::Full`].
pub fn plan_round(
    server: &ServerState,
    num_clients: usize,
    cfg: &RoundConfig,
) -> Result<RoundPlan> {
    let sampled = sample_clients(num_clients, cfg.sampled, server.round, cfg.master_seed)?;
    if cfg.local.rule.uploads_full_model() {
        let assignment = sampled.iter().map(|&c| (c, BlockId::Full)).collect();
        return Ok(RoundPlan {
            sampled_clients: sampled,
            assignment,
        });
    }
    match &cfg.bandwidth {
        Some(bw) => assign_blocks_by_bandwidth(&sampled, &server.partition, bw, server.round, cfg.master_seed),
        None => assign_blocks(&sampled, server.partition.num_blocks(), server.round, cfg.master_seed),
    }
}

/// Regions a client uploads for its assignment (non-empty regions only).
pub fn upload_regions(rule: LocalRule, partition: &BlockPartition, assigned: BlockId) -> Vec<BlockId> {
    let mut out = vec![assigned];
    if assigned != BlockId::Full && rule.uploads_shared() && partition.shared_size() > 0 {
        out.push(BlockId::Shared);
    }
    out
}

/// Closed-form upload floats of one uncompressed round.
pub fn expected_upload_floats(rule: LocalRule, partition: &BlockPartition, plan: &RoundPlan) -> u64 {
    let per_client = |c: &usize| -> u64 {
        let assigned = plan.assignment[c];
        let floats: usize = upload_regions(rule, partition, assigned)
            .into_iter()
            .map(|b| partition.len_of(b).expect("planned region"))
            .sum();
        floats as u64 * if rule.uses_control_variates() { 2 } else { 1 }
    };
    plan.sampled_clients.iter().map(per_client).sum()
}

struct ClientWork {
    client: usize,
    messages: Vec<WireMessage>,
    commit: Option<(ParamVector, Vec<Range<usize>>)>,
}

fn local_seed(master: u64, round: u32, client: usize) -> u64 {
    derive_seed(master, &[tag::LOCAL, u64::from(round), client as u64])
}

#[allow(clippy::too_many_arguments)]
fn client_round(
    client: usize,
    assigned: BlockId,
    x: &[f64],
    c: Option<&[f64]>,
    c_i: Option<&[f64]>,
    problem: &FederatedProblem,
    cfg: &RoundConfig,
    local: &LocalConfig,
    partition: &BlockPartition,
    round: u32,
) -> Result<ClientWork> {
    let obj = problem.objective();
    let shard = problem.shard(client);
    let seed = local_seed(cfg.master_seed, round, client);
    let rule = local.rule;
    let (x_t, controlled) = match rule {
        LocalRule::FedAvg | LocalRule::FedBcgd => (local_sgd(x, obj, shard, local, seed)?, None),
        LocalRule::FreezeNonShare | LocalRule::FreezeShare => {
            let BlockId::Block(j) = assigned else {
                return Err(Error::Validation("freezing rules need a block assignment".into()));
            };
            let with_shared = rule == LocalRule::FreezeShare;
            (local_freeze(x, obj, shard, local, partition, j, with_shared, seed)?, None)
        }
        LocalRule::FedBcgdPlus | LocalRule::Scaffold => {
            let (c, c_i) = (c.expect("control broadcast"), c_i.expect("client control"));
            let out = if rule == LocalRule::Scaffold {
                scaffold_local(x, obj, shard, local, c, c_i, seed)?
            } else {
                local_bcgd_plus(x, obj, shard, local, c, c_i, seed)?
            };
            (out.x.clone(), Some(out))
        }
    };

    let regions = upload_regions(rule, partition, assigned);
    let mut messages = Vec::with_capacity(regions.len() * 2);
    for &region in &regions {
        let range = partition.range(region)?;
        let payload = if cfg.compression.is_none() {
            CompressedPayload::Dense(x_t[range].to_vec())
        } else {
            let delta: Vec<f64> = x_t[range.clone()]
                .iter()
                .zip(&x[range])
                .map(|(a, b)| a - b)
                .collect();
            let cseed = derive_seed(cfg.master_seed, &[tag::COMPRESS, u64::from(round), client as u64, region.to_wire() as u64]);
            cfg.compression.encode(&delta, cseed)?
        };
        messages.push(WireMessage::with_payloads(MsgType::Upload, round, client as u32, region, &[payload]));
    }
    let mut commit = None;
    if let Some(out) = controlled {
        let mut ranges = Vec::with_capacity(regions.len());
        for &region in &regions {
            let range = partition.range(region)?;
            let dc = CompressedPayload::Dense(out.delta_c[range.clone()].to_vec());
            messages.push(WireMessage::with_payloads(MsgType::ControlUpload, round, client as u32, region, &[dc]));
            ranges.push(range);
        }
        commit = Some((out.c_plus, ranges));
    }
    Ok(ClientWork {
        client,
        messages,
        commit,
    })
}

/// Runs one communication round and returns its ledger row.
pub fn run_round(
    server: &mut ServerState,
    problem: &FederatedProblem,
    cfg: &RoundConfig,
    bus: &Bus,
) -> Result<RoundRecord> {
    let started = Instant::now();
    let rule = cfg.local.rule;
    let round = server.round;
    let partition = server.partition.clone();
    if partition.total_dim() != problem.objective().dim() {
        return Err(Error::LayoutMismatch {
            expected: problem.objective().dim(),
            actual: partition.total_dim(),
        });
    }
    if rule.uses_control_variates() && server.control.is_none() {
        return Err(Error::Validation(format!("{rule} needs control state")));
    }
    let plan = plan_round(server, problem.num_clients(), cfg)?;
    bus.open_round(round);

    // Downstream: x (and c) to every sampled client.
    let mut down = vec![CompressedPayload::Dense(server.x.to_vec())];
    if rule.uses_control_variates() {
        let c = server.control.as_ref().expect("checked above");
        down.push(CompressedPayload::Dense(c.c_global.to_vec()));
    }
    let frame = bus.broadcast(
        &WireMessage::with_payloads(MsgType::Broadcast, round, u32::MAX, BlockId::Full, &down),
        plan.sampled_clients.len(),
    )?;
    let received = deserialize(&frame)?.payloads()?;
    let x_recv = received[0].decode();
    let c_recv = received.get(1).map(CompressedPayload::decode);

    let mut local = cfg.local;
    local.eta = cfg.eta_at(round);
    let control = server.control.as_ref();
    let work: Vec<ClientWork> = plan
        .sampled_clients
        .par_iter()
        .map(|&client| {
            let c_i = control.map(|cs| cs.local(client));
            client_round(
                client,
                plan.assignment[&client],
                &x_recv,
                c_recv.as_deref(),
                c_i.as_deref().map(|v| &v[..]),
                problem,
                cfg,
                &local,
                &partition,
                round,
            )
        })
        .collect::<Result<_>>()?;

    let mut expected = 0;
    for w in &work {
        for m in &w.messages {
            bus.send(m)?;
            expected += 1;
        }
    }
    let messages = bus.collect(round, expected)?;

    let mut uploads = Vec::new();
    let mut deltas = Vec::new();
    let mut seen: BTreeMap<usize, Vec<(BlockId, MsgType)>> = BTreeMap::new();
    for m in &messages {
        let client = m.header.client_id as usize;
        let region = m.block()?;
        let assigned = *plan.assignment.get(&client).ok_or(Error::UnknownClient {
            client,
            clients: problem.num_clients(),
        })?;
        if !upload_regions(rule, &partition, assigned).contains(&region) {
            return Err(Error::MalformedPayload(format!(
                "client {client} assigned {assigned} uploaded region {region}"
            )));
        }
        seen.entry(client).or_default().push((region, m.header.msg_type));
        let payload = m
            .payloads()?
            .into_iter()
            .next()
            .ok_or_else(|| Error::MalformedPayload("empty upload".into()))?;
        let range = partition.range(region)?;
        if payload.dense_len() != range.len() {
            return Err(Error::LayoutMismatch {
                expected: range.len(),
                actual: payload.dense_len(),
            });
        }
        match m.header.msg_type {
            MsgType::Upload => {
                let values = if cfg.compression.is_none() {
                    payload.decode()
                } else {
                    payload
                        .decode()
                        .iter()
                        .zip(&server.x[range])
                        .map(|(d, x)| x + d)
                        .collect()
                };
                uploads.push(ClientUpload {
                    client_id: client,
                    block: region,
                    block_values: values,
                    delta_c_block: None,
                });
            }
            MsgType::ControlUpload => deltas.push(ControlDelta {
                client_id: client,
                block: region,
                values: payload.decode(),
            }),
            MsgType::Broadcast => {
                return Err(Error::MalformedPayload("broadcast frame in upload queue".into()))
            }
        }
    }
    for &client in &plan.sampled_clients {
        let want = upload_regions(rule, &partition, plan.assignment[&client]).len()
            * if rule.uses_control_variates() { 2 } else { 1 };
        let got = seen.get(&client).map_or(0, Vec::len);
        if got != want {
            return Err(Error::MissingUpload {
                round,
                detail: format!("client {client} sent {got} of {want} messages"),
            });
        }
    }

    aggregate_blocks(server, &uploads)?;

    if let Some(control) = server.control.as_mut() {
        if !deltas.is_empty() {
            server_apply_control(control, &deltas, problem.num_clients(), &partition, cfg.control_scaling)?;
        }
        for w in work {
            if let Some((c_plus, ranges)) = w.commit {
                control.commit_local_regions(w.client, &c_plus, &ranges)?;
            }
        }
    }

    server.round += 1;
    let elapsed = if cfg.record_time {
        started.elapsed().as_millis() as u64
    } else {
        0
    };
    let row = evaluate(server, problem, bus, elapsed)?;
    debug!(
        "round {} loss {:.6e} up {}",
        row.round, row.train_loss, row.cumulative_upload_floats
    );
    Ok(row)
}

/// Averages the parameter uploads of each region and applies the momentum
/// step there. Uploads are summed in (region, client id) order, so the
/// result does not depend on arrival order. Regions nobody uploaded keep
/// their values and momentum.
pub fn aggregate_blocks(server: &mut ServerState, uploads: &[ClientUpload]) -> Result<()> {
    let mut sorted: Vec<&ClientUpload> = uploads.iter().collect();
    sorted.sort_by_key(|u| (u.block, u.client_id));
    let lambda = server.momentum.lambda();
    for group in sorted.chunk_by(|a, b| a.block == b.block) {
        let range = server.partition.range(group[0].block)?;
        let mut avg = vec![0.0; range.len()];
        for u in group {
            if u.block_values.len() != range.len() {
                return Err(Error::LayoutMismatch {
                    expected: range.len(),
                    actual: u.block_values.len(),
                });
            }
            for (a, v) in avg.iter_mut().zip(&u.block_values) {
                *a += v;
            }
        }
        let k = group.len() as f64;
        avg.iter_mut().for_each(|a| *a /= k);
        let (x_new, v_new) = momentum_update(&server.x[range.clone()], &avg, &server.momentum.v[range.clone()], lambda)?;
        server.x[range.clone()].copy_from_slice(&x_new);
        server.momentum.v[range].copy_from_slice(&v_new);
    }
    Ok(())
}

/// Ledger row for the current server state.
/// Loss and gradient norm are those of the federated objective; accuracy
/// is over the full training set.
pub fn evaluate(server: &ServerState, problem: &FederatedProblem, bus: &Bus, wall_time_ms: u64) -> Result<RoundRecord> {
    let meter = bus.meter();
    Ok(RoundRecord {
        round: server.round,
        train_loss: problem.loss(&server.x)?,
        train_accuracy: problem.objective().accuracy(&server.x)?,
        grad_norm: problem.grad(&server.x)?.norm(),
        cumulative_upload_floats: meter.upload_floats,
        cumulative_download_floats: meter.download_floats,
        wall_time_ms,
    })
}

/// Control state with `c_i = ∇f_i(x)` for every client and `c` their mean.
pub fn control_from_gradients(problem: &FederatedProblem, x: &[f64]) -> Result<ControlState> {
    let m = problem.num_clients();
    let mut cs = ControlState::new(x.len(), m);
    for i in 0..m {
        let g = problem.objective().grad(x, Some(&problem.shard(i).indices))?;
        cs.set_local(i, g)?;
    }
    cs.c_global = cs.mean_local();
    Ok(cs)
}
