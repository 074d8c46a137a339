//! Objectives with exact full-batch and minibatch gradients.
//!
//! Every objective is an empirical average over samples plus an L2 term:
//! `f(x) = (1/|B|) Σ_{i∈B} ℓ(x; a_i, b_i) + (reg/2)‖x‖²`, where `B` is either
//! the whole dataset or a caller-supplied subset (a client shard or a
//! minibatch drawn from it).

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::param_space::{dot, norm, ParamVector};

/// Row-major sample matrix with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<f64>,
    dim: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::BadShape("feature dimension must be positive".into()));
        }
        if labels.is_empty() {
            return Err(Error::BadShape("dataset has no samples".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::BadShape(format!(
                "{} feature values for {} samples of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if features.iter().chain(&labels).any(|v| !v.is_finite()) {
            return Err(Error::BadShape("non-finite feature or label".into()));
        }
        Ok(Self {
            features,
            labels,
            dim,
        })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn is_binary(&self) -> bool {
        self.labels.iter().all(|&b| b == 1.0 || b == -1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjectiveKind {
    /// `log(1 + exp(-b aᵀx))`
    Logistic,
    /// `1 / (1 + exp(b aᵀx))`, smooth but non-convex.
    SigmoidErm,
    /// `½‖x − a‖²`; labels are ignored.
    Quadratic,
}

impl ObjectiveKind {
    pub fn is_classifier(self) -> bool {
        !matches!(self, ObjectiveKind::Quadratic)
    }
}

#[derive(Debug, Clone)]
pub struct Objective {
    kind: ObjectiveKind,
    reg_lambda: f64,
    data: Arc<Dataset>,
}

/// Tolerance and iteration cap for the power iteration in [`Objective::estimate_smoothness`].
pub const POWER_TOL: f64 = 1e-8;
pub const POWER_MAX_ITERS: usize = 1000;

impl Objective {
    pub fn new(kind: ObjectiveKind, data: Arc<Dataset>, reg_lambda: f64) -> Result<Self> {
        if !(reg_lambda >= 0.0 && reg_lambda.is_finite()) {
            return Err(Error::Validation(format!(
                "regularizer must be a finite nonnegative number, got {reg_lambda}"
            )));
        }
        if kind.is_classifier() && !data.is_binary() {
            return Err(Error::BadShape(
                "classification objectives need labels in {-1, +1}".into(),
            ));
        }
        Ok(Self {
            kind,
            reg_lambda,
            data,
        })
    }

    /// Sets the regularizer to `factor · L`, where `L` is the smoothness of
    /// the unregularized data term.
    pub fn with_relative_reg(kind: ObjectiveKind, data: Arc<Dataset>, factor: f64) -> Result<Self> {
        let smooth = Self::new(kind, data.clone(), 0.0)?.estimate_smoothness()?;
        Self::new(kind, data, factor * smooth)
    }

    pub fn kind(&self) -> ObjectiveKind {
        self.kind
    }

    pub fn reg_lambda(&self) -> f64 {
        self.reg_lambda
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.data
    }

    pub fn dim(&self) -> usize {
        self.data.dim()
    }

    fn check(&self, x: &[f64], subset: Option<&[usize]>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        if let Some(s) = subset {
            if s.is_empty() {
                return Err(Error::EmptySubset);
            }
            let n = self.data.n();
            if let Some(&bad) = s.iter().find(|&&i| i >= n) {
                return Err(Error::SampleOutOfRange { index: bad, n });
            }
        }
        Ok(())
    }

    fn sample_loss(&self, x: &[f64], i: usize) -> f64 {
        let a = self.data.row(i);
        match self.kind {
            ObjectiveKind::Logistic => softplus(-self.data.label(i) * dot(a, x)),
            ObjectiveKind::SigmoidErm => sigmoid(-self.data.label(i) * dot(a, x)),
            ObjectiveKind::Quadratic => {
                0.5 * x.iter().zip(a).map(|(xi, ai)| (xi - ai) * (xi - ai)).sum::<f64>()
            }
        }
    }

    /// Accumulates the gradient of sample `i` into `out`.
    fn add_sample_grad(&self, x: &[f64], i: usize, out: &mut [f64]) {
        let a = self.data.row(i);
        match self.kind {
            ObjectiveKind::Logistic | ObjectiveKind::SigmoidErm => {
                let b = self.data.label(i);
                let m = b * dot(a, x);
                let scale = match self.kind {
                    // d/dm log(1+e^{-m}) = -σ(-m)
                    ObjectiveKind::Logistic => -sigmoid(-m),
                    // d/dm σ(-m) = -σ(m)σ(-m)
                    _ => -sigmoid(m) * sigmoid(-m),
                } * b;
                for (o, &aj) in out.iter_mut().zip(a) {
                    *o += scale * aj;
                }
            }
            ObjectiveKind::Quadratic => {
                for ((o, &xj), &aj) in out.iter_mut().zip(x).zip(a) {
                    *o += xj - aj;
                }
            }
        }
    }

    pub fn loss(&self, x: &[f64], subset: Option<&[usize]>) -> Result<f64> {
        self.check(x, subset)?;
        let (sum, count) = match subset {
            Some(s) => (s.iter().map(|&i| self.sample_loss(x, i)).sum::<f64>(), s.len()),
            None => (
                (0..self.data.n()).map(|i| self.sample_loss(x, i)).sum::<f64>(),
                self.data.n(),
            ),
        };
        Ok(sum / count as f64 + 0.5 * self.reg_lambda * dot(x, x))
    }

    pub fn grad(&self, x: &[f64], subset: Option<&[usize]>) -> Result<ParamVector> {
        self.check(x, subset)?;
        let mut g = vec![0.0; x.len()];
        let count = match subset {
            Some(s) => {
                for &i in s {
                    self.add_sample_grad(x, i, &mut g);
                }
                s.len()
            }
            None => {
                for i in 0..self.data.n() {
                    self.add_sample_grad(x, i, &mut g);
                }
                self.data.n()
            }
        };
        let inv = 1.0 / count as f64;
        for (gj, &xj) in g.iter_mut().zip(x) {
            *gj = *gj * inv + self.reg_lambda * xj;
        }
        Ok(g.into())
    }

    /// Fraction of samples with `sign(aᵀx) == b`; a zero margin counts as wrong.
    /// `NaN` for the quadratic objective, which has no notion of a class.
    pub fn accuracy(&self, x: &[f64]) -> Result<f64> {
        self.check(x, None)?;
        if !self.kind.is_classifier() {
            return Ok(f64::NAN);
        }
        let correct = (0..self.data.n())
            .filter(|&i| self.data.label(i) * dot(self.data.row(i), x) > 0.0)
            .count();
        Ok(correct as f64 / self.data.n() as f64)
    }

    /// Upper bound on the gradient Lipschitz constant.
    ///
    /// For the classifiers this is `λ_max(AᵀA / 4n) + reg`, computed by power
    /// iteration; the logistic bound is reused for the sigmoid loss.
    pub fn estimate_smoothness(&self) -> Result<f64> {
        match self.kind {
            ObjectiveKind::Quadratic => Ok(1.0 + self.reg_lambda),
            ObjectiveKind::Logistic | ObjectiveKind::SigmoidErm => {
                Ok(self.gram_top_eigenvalue()? / 4.0 + self.reg_lambda)
            }
        }
    }

    /// Largest eigenvalue of `AᵀA / n`.
    fn gram_top_eigenvalue(&self) -> Result<f64> {
        let d = self.dim();
        let n = self.data.n();
        // Fixed, non-degenerate start vector.
        let mut v: Vec<f64> = (0..d).map(|j| 1.0 + 0.5 * ((j as f64) * 1.618).sin()).collect();
        let nv = norm(&v);
        v.iter_mut().for_each(|a| *a /= nv);

        let mut prev = f64::NAN;
        let mut av = vec![0.0; n];
        for _ in 0..POWER_MAX_ITERS {
            for (i, slot) in av.iter_mut().enumerate() {
                *slot = dot(self.data.row(i), &v);
            }
            let mut w = vec![0.0; d];
            for (i, &s) in av.iter().enumerate() {
                for (wj, &aij) in w.iter_mut().zip(self.data.row(i)) {
                    *wj += s * aij;
                }
            }
            w.iter_mut().for_each(|a| *a /= n as f64);
            // Rayleigh quotient of the unit vector v.
            let rq = dot(&v, &w);
            let nw = norm(&w);
            if nw == 0.0 {
                return Ok(0.0);
            }
            if (rq - prev).abs() <= POWER_TOL * rq.abs().max(f64::MIN_POSITIVE) {
                return Ok(rq);
            }
            prev = rq;
            v = w.into_iter().map(|a| a / nw).collect();
        }
        Err(Error::NonConvergence {
            iterations: POWER_MAX_ITERS,
        })
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}
