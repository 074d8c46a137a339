//! Block-partitioned parameter vectors.
//!
//! A model `x ∈ R^d` is laid out as `N` contiguous parameter blocks followed
//! by one (possibly empty) shared block:
//!
//! ```text
//! [ block 0 | block 1 | ... | block N-1 | shared ]
//! ```
//!
//! Every block is addressable by offset, which is what lets the transport
//! ship a single block as an independent payload.

use std::fmt;
use std::ops::{Deref, DerefMut, Range};

use crate::error::{Error, Result};

/// Identifies a region of the parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockId {
    Block(usize),
    Shared,
    /// The whole vector (used by full-model uploads and broadcasts).
    Full,
}

impl BlockId {
    /// Wire encoding: block index, `-1` for shared, `-2` for the full vector.
    pub fn to_wire(self) -> i32 {
        match self {
            BlockId::Block(j) => j as i32,
            BlockId::Shared => -1,
            BlockId::Full => -2,
        }
    }

    pub fn from_wire(raw: i32) -> Result<Self> {
        match raw {
            -1 => Ok(BlockId::Shared),
            -2 => Ok(BlockId::Full),
            j if j >= 0 => Ok(BlockId::Block(j as usize)),
            other => Err(Error::MalformedPayload(format!("block id {other}"))),
        }
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockId::Block(j) => write!(f, "{j}"),
            BlockId::Shared => f.write_str("shared"),
            BlockId::Full => f.write_str("full"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    total_dim: usize,
    block_sizes: Vec<usize>,
    shared_size: usize,
    offsets: Vec<usize>,
}

impl BlockPartition {
    pub fn new(total_dim: usize, block_sizes: Vec<usize>, shared_size: usize) -> Result<Self> {
        if block_sizes.is_empty() {
            return Err(Error::EmptyPartition);
        }
        if let Some(j) = block_sizes.iter().position(|&s| s == 0) {
            return Err(Error::SizeMismatch(format!("block {j} has size 0")));
        }
        let covered: usize = block_sizes.iter().sum::<usize>() + shared_size;
        if covered != total_dim {
            return Err(Error::SizeMismatch(format!(
                "blocks ({:?}) plus shared ({shared_size}) cover {covered} coordinates, expected {total_dim}",
                block_sizes
            )));
        }
        let offsets = block_sizes
            .iter()
            .scan(0usize, |acc, &s| {
                let start = *acc;
                *acc += s;
                Some(start)
            })
            .collect();
        Ok(Self {
            total_dim,
            block_sizes,
            shared_size,
            offsets,
        })
    }

    /// Splits the non-shared coordinates into `num_blocks` blocks whose sizes
    /// differ by at most one (larger blocks first).
    pub fn equal(total_dim: usize, num_blocks: usize, shared_size: usize) -> Result<Self> {
        if num_blocks == 0 {
            return Err(Error::EmptyPartition);
        }
        let body = total_dim.checked_sub(shared_size).ok_or_else(|| {
            Error::SizeMismatch(format!(
                "shared size {shared_size} exceeds dimension {total_dim}"
            ))
        })?;
        if body < num_blocks {
            return Err(Error::SizeMismatch(format!(
                "{body} non-shared coordinates cannot fill {num_blocks} blocks"
            )));
        }
        let base = body / num_blocks;
        let extra = body % num_blocks;
        let sizes = (0..num_blocks)
            .map(|j| base + usize::from(j < extra))
            .collect();
        Self::new(total_dim, sizes, shared_size)
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn num_blocks(&self) -> usize {
        self.block_sizes.len()
    }

    pub fn block_sizes(&self) -> &[usize] {
        &self.block_sizes
    }

    pub fn shared_size(&self) -> usize {
        self.shared_size
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Coordinate range occupied by `id`.
    pub fn range(&self, id: BlockId) -> Result<Range<usize>> {
        match id {
            BlockId::Block(j) => {
                let start = *self.offsets.get(j).ok_or(Error::IndexOutOfRange {
                    index: j,
                    blocks: self.num_blocks(),
                })?;
                Ok(start..start + self.block_sizes[j])
            }
            BlockId::Shared => Ok(self.total_dim - self.shared_size..self.total_dim),
            BlockId::Full => Ok(0..self.total_dim),
        }
    }

    pub fn len_of(&self, id: BlockId) -> Result<usize> {
        self.range(id).map(|r| r.len())
    }

    fn check(&self, len: usize) -> Result<()> {
        if len != self.total_dim {
            return Err(Error::LayoutMismatch {
                expected: self.total_dim,
                actual: len,
            });
        }
        Ok(())
    }
}

/// Dense model vector (64-bit floats).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Server-side heavy-ball state.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub v: ParamVector,
    lambda: f64,
}

impl MomentumState {
    pub fn new(dim: usize, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(Self {
            v: ParamVector::zeros(dim),
            lambda,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Effective server step size `1 / (1 - λ)`.
    pub fn alpha(&self) -> f64 {
        1.0 / (1.0 - self.lambda)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::ShapeMismatch(format!(
            "momentum parameter {lambda} outside [0, 1)"
        )));
    }
    Ok(())
}

pub fn make_partition(
    total_dim: usize,
    block_sizes: Vec<usize>,
    shared_size: usize,
) -> Result<BlockPartition> {
    BlockPartition::new(total_dim, block_sizes, shared_size)
}

pub fn extract_block(x: &[f64], p: &BlockPartition, id: BlockId) -> Result<Vec<f64>> {
    p.check(x.len())?;
    Ok(x[p.range(id)?].to_vec())
}

/// Concatenates `blocks` and `shared` in partition order.
pub fn assemble(blocks: &[Vec<f64>], shared: &[f64], p: &BlockPartition) -> Result<ParamVector> {
    if blocks.len() != p.num_blocks() {
        return Err(Error::SizeMismatch(format!(
            "{} blocks supplied for a {}-block partition",
            blocks.len(),
            p.num_blocks()
        )));
    }
    for (j, (b, &size)) in blocks.iter().zip(p.block_sizes()).enumerate() {
        if b.len() != size {
            return Err(Error::SizeMismatch(format!(
                "block {j} has length {}, expected {size}",
                b.len()
            )));
        }
    }
    if shared.len() != p.shared_size() {
        return Err(Error::SizeMismatch(format!(
            "shared block has length {}, expected {}",
            shared.len(),
            p.shared_size()
        )));
    }
    let mut out = Vec::with_capacity(p.total_dim());
    for b in blocks {
        out.extend_from_slice(b);
    }
    out.extend_from_slice(shared);
    Ok(ParamVector(out))
}

/// One heavy-ball step on a block:
/// `v ← λ v + (avg − x_prev)`, `x ← x_prev + v`.
pub fn momentum_update(
    x_prev: &[f64],
    block_avg: &[f64],
    v_prev: &[f64],
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if x_prev.len() != block_avg.len() || x_prev.len() != v_prev.len() {
        return Err(Error::ShapeMismatch(format!(
            "momentum inputs have lengths {}, {}, {}",
            x_prev.len(),
            block_avg.len(),
            v_prev.len()
        )));
    }
    check_lambda(lambda)?;
    let v_new: Vec<f64> = v_prev
        .iter()
        .zip(block_avg.iter().zip(x_prev))
        .map(|(&v, (&a, &x))| lambda * v + (a - x))
        .collect();
    let x_new = x_prev.iter().zip(&v_new).map(|(&x, &v)| x + v).collect();
    Ok((x_new, v_new))
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
