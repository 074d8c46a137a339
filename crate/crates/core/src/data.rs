//! Synthetic data, CSV loading, and Dirichlet non-IID sharding.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::param_space::dot;
use crate::problems::Dataset;
use crate::seeding::{rng_for, tag};

/// Sample indices owned by one client. Sorted, no duplicates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientShard {
    pub client_id: usize,
    pub indices: Vec<usize>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub num_clients: usize,
    /// Dirichlet concentration; smaller is more heterogeneous.
    pub rho: f64,
    pub seed: u64,
}

/// Gaussian features with labels from a hidden unit direction:
/// `b_i = sign(margin · a_iᵀw* + ε_i)`, `ε_i ~ N(0, 1)`.
pub fn gen_synthetic(n: usize, d: usize, margin: f64, seed: u64) -> Result<Dataset> {
    if n < 2 || d < 1 {
        return Err(Error::BadShape(format!(
            "synthetic data needs n >= 2 and d >= 1, got n={n}, d={d}"
        )));
    }
    if !margin.is_finite() {
        return Err(Error::BadShape(format!("margin {margin} is not finite")));
    }
    let mut rng = rng_for(seed, &[]);
    let mut w: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let wn = w.iter().map(|a| a * a).sum::<f64>().sqrt();
    w.iter_mut().for_each(|a| *a /= wn);

    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let noise: f64 = rng.sample(StandardNormal);
        let score = margin * dot(&row, &w) + noise;
        labels.push(if score >= 0.0 { 1.0 } else { -1.0 });
        features.extend(row);
    }
    Dataset::new(features, labels, d)
}

/// Splits each label class across clients with proportions drawn from
/// `Dirichlet(ρ·1_M)`, then repairs empty shards.
///
/// Empty-shard repair: each empty client, in id order, takes the highest
/// index of the currently largest shard (lowest id on ties).
pub fn dirichlet_partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    let m = spec.num_clients;
    if m == 0 {
        return Err(Error::BadPartitionSpec("need at least one client".into()));
    }
    if !(spec.rho > 0.0 && spec.rho.is_finite()) {
        return Err(Error::BadPartitionSpec(format!(
            "Dirichlet concentration must be positive, got {}",
            spec.rho
        )));
    }
    if m > ds.n() {
        return Err(Error::TooManyClients {
            clients: m,
            samples: ds.n(),
        });
    }

    // Classes keyed by the label's bit pattern so ordering is total and stable.
    let mut classes: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &b) in ds.labels().iter().enumerate() {
        classes.entry(label_key(b)).or_default().push(i);
    }

    let gamma = Gamma::new(spec.rho, 1.0)
        .map_err(|e| Error::BadPartitionSpec(format!("gamma({}): {e}", spec.rho)))?;
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (class_no, members) in classes.values_mut().enumerate() {
        let mut rng = rng_for(spec.seed, &[tag::PARTITION, class_no as u64]);
        members.shuffle(&mut rng);
        let mut props: Vec<f64> = (0..m).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = props.iter().sum();
        if total > 0.0 && total.is_finite() {
            props.iter_mut().for_each(|p| *p /= total);
        } else {
            // Every gamma draw underflowed; the limit is a single vertex.
            let pick = rng.random_range(0..m);
            props.iter_mut().enumerate().for_each(|(k, p)| *p = f64::from(k == pick));
        }
        let count = members.len();
        let mut start = 0usize;
        let mut cum = 0.0;
        for (k, p) in props.iter().enumerate() {
            cum += p;
            let end = if k + 1 == m {
                count
            } else {
                ((cum * count as f64).round() as usize).clamp(start, count)
            };
            shards[k].extend_from_slice(&members[start..end]);
            start = end;
        }
    }

    for s in shards.iter_mut() {
        s.sort_unstable();
    }
    for k in 0..m {
        if shards[k].is_empty() {
            let donor = (0..m)
                .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
                .expect("m >= 1");
            let moved = shards[donor].pop().expect("donor shard is the largest");
            shards[k].push(moved);
        }
    }

    Ok(shards
        .into_iter()
        .enumerate()
        .map(|(client_id, indices)| ClientShard { client_id, indices })
        .collect())
}

fn label_key(b: f64) -> u64 {
    // Order-preserving map from f64 to u64 (negative labels sort first).
    let bits = b.to_bits();
    if bits >> 63 == 1 {
        !bits
    } else {
        bits | (1 << 63)
    }
}

/// Reads a headed CSV. Every column except `label_column` is a feature, in
/// header order; label tokens are mapped through `label_map`.
pub fn load_csv(
    path: impl AsRef<Path>,
    label_column: &str,
    label_map: &BTreeMap<String, f64>,
) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let label_idx = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("label column {label_column:?} not in header"),
        })?;
    let dim = header.len() - 1;

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let line = row_no + 2;
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() != header.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        for (col, cell) in record.iter().enumerate() {
            if col == label_idx {
                let label = label_map.get(cell).ok_or_else(|| Error::UnknownLabel {
                    label: cell.to_string(),
                    line,
                })?;
                labels.push(*label);
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("column {:?}: {cell:?} is not a number", &header[col]),
                })?;
                features.push(v);
            }
        }
    }
    Dataset::new(features, labels, dim)
}

/// Writes `ds` as `f1..fd,y` with shortest round-trip float formatting.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header: Vec<String> = (1..=ds.dim()).map(|j| format!("f{j}")).collect();
    header.push("y".into());
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for i in 0..ds.n() {
        let mut rec: Vec<String> = ds.row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(format!("{}", ds.label(i)));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Parses `"0:-1,1:1"` style label maps.
pub fn parse_label_map(text: &str) -> Result<BTreeMap<String, f64>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|pair| {
            let (k, v) = pair.split_once(':').ok_or_else(|| {
                Error::Validation(format!("label map entry {pair:?} is not key:value"))
            })?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Validation(format!("label map value {v:?} is not a number")))?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}
