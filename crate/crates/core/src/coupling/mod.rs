//! Invertible transformations with exact log-det Jacobians.
//!
//! Every transform exposes `forward` (returning the output id and a scalar
//! log-det id on the tape, so likelihoods stay differentiable) and an exact
//! `inverse` operating on plain tensor values. Data flows through couplings in
//! a canonical `[C, H, W]` layout; grouping happens either along the height
//! axis (sequence layouts, one row per group) or the channel axis (image
//! layouts, Glow-style).

mod actnorm;
mod affine;
mod multiscale;
mod permute;
mod spline;

pub use actnorm::{actnorm_init, Actnorm};
pub use affine::AffineCoupling;
pub use multiscale::{squeeze_map, unsqueeze_map, Squeeze};
pub use permute::{InvertibleMix, ReverseGroups};
pub use spline::{RqSplineCoupling, SplineConfig};

use crate::error::{Error, Result};
use crate::params::Graph;
use crate::tensor::{Id, Tensor};

/// Contiguous equal-size grouping of one axis of the data layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupPartition {
    pub groups: usize,
    pub axis: GroupAxis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupAxis {
    /// Groups are blocks of rows; group 1 is the top block. Sequence and flat
    /// layouts are reshaped so each group is one row.
    Height,
    /// Groups are blocks of channels (image layouts).
    Channel,
}

impl GroupPartition {
    pub fn new(groups: usize, axis: GroupAxis) -> Result<Self> {
        if groups < 2 {
            return Err(Error::Config(format!("group count must be >= 2, got {groups}")));
        }
        Ok(Self { groups, axis })
    }

    /// Size of each group along the partitioned axis; errors unless the group
    /// count divides the axis length.
    pub fn group_size(&self, shape: &[usize]) -> Result<usize> {
        if shape.len() != 3 {
            return Err(Error::Dimension(format!(
                "couplings expect [C,H,W] data, got {shape:?}"
            )));
        }
        let axis_len = match self.axis {
            GroupAxis::Height => shape[1],
            GroupAxis::Channel => shape[0],
        };
        if axis_len % self.groups != 0 {
            return Err(Error::Dimension(format!(
                "group count {} does not divide axis length {axis_len}",
                self.groups
            )));
        }
        Ok(axis_len / self.groups)
    }

    /// Flat element indices covered by group `i` for the given shape.
    pub(crate) fn group_elements(&self, shape: &[usize], i: usize) -> Result<Vec<usize>> {
        let s = self.group_size(shape)?;
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let mut out = Vec::new();
        match self.axis {
            GroupAxis::Height => {
                for ch in 0..c {
                    for r in i * s..(i + 1) * s {
                        let base = (ch * h + r) * w;
                        out.extend(base..base + w);
                    }
                }
            }
            GroupAxis::Channel => {
                for ch in i * s..(i + 1) * s {
                    let base = ch * h * w;
                    out.extend(base..base + h * w);
                }
            }
        }
        Ok(out)
    }
}

/// Produces coupling parameters for every group of the input in one logical
/// pass. Implementations must be causal: the parameters emitted for group `i`
/// may depend only on groups before `i`.
pub trait ParamSource {
    /// Parameter slots per transformed element (2 for affine shift/log-scale,
    /// `3*bins - 1` for splines).
    fn arity(&self) -> usize;

    /// Emits a `[arity*C, H, W]` tensor aligned with `x: [C, H, W]`; slot `q`
    /// for data channel `c` lives at channel `q*C + c`.
    fn params(&self, g: &mut Graph, x: Id, flow: usize) -> Result<Id>;
}

/// An invertible transform exposing forward-with-log-det and exact inverse.
pub trait Bijection {
    /// Returns `(z, log_det)`; `log_det` is a scalar node summed over all
    /// elements on the tape.
    fn forward(&self, g: &mut Graph, x: Id) -> Result<(Id, Id)>;

    /// Exact inverse on values; may evaluate estimators through `g`.
    fn inverse(&self, g: &mut Graph, z: &Tensor) -> Result<Tensor>;
}

/// One step of a flow composition.
pub enum Step<'a> {
    Map(Box<dyn Bijection + 'a>),
    /// Splits channels in half, scores the second half under the prior, and
    /// passes the first half onward.
    FactorOut,
}

/// Ordered flow steps with a standard-normal prior on every latent.
pub struct Composition<'a> {
    pub steps: Vec<Step<'a>>,
}

/// Result of running a composition forward.
pub struct ForwardPass {
    /// Factored-out latents in encounter order.
    pub factored: Vec<Id>,
    /// Final latent.
    pub z: Id,
    /// Sum of per-step log-dets (scalar id).
    pub log_det: Id,
}

impl<'a> Composition<'a> {
    pub fn new(steps: Vec<Step<'a>>) -> Self {
        Self { steps }
    }

    pub fn forward(&self, g: &mut Graph, x: Id) -> Result<ForwardPass> {
        let mut cur = x;
        let mut log_det = g.tape.scalar_const(0.0);
        let mut factored = Vec::new();
        for (idx, step) in self.steps.iter().enumerate() {
            match step {
                Step::Map(b) => {
                    let (z, ld) = b.forward(g, cur).map_err(|e| at_flow(idx, e))?;
                    log_det = g.tape.add(log_det, ld).map_err(|e| at_flow(idx, e))?;
                    cur = z;
                }
                Step::FactorOut => {
                    let shape = g.tape.value(cur).shape().to_vec();
                    if shape[0] % 2 != 0 {
                        return Err(Error::Dimension(format!(
                            "factor-out needs even channels, got {}",
                            shape[0]
                        )));
                    }
                    let parts = g.tape.split(cur, 0, &[shape[0] / 2, shape[0] / 2])?;
                    factored.push(parts[1]);
                    cur = parts[0];
                }
            }
        }
        Ok(ForwardPass { factored, z: cur, log_det })
    }

    /// Exact log-likelihood in nats, summed over all elements of `x`:
    /// prior log-density of every latent plus the total log-det.
    pub fn log_likelihood(&self, g: &mut Graph, x: Id) -> Result<Id> {
        let pass = self.forward(g, x)?;
        let mut ll = standard_normal_logp(g, pass.z)?;
        for f in &pass.factored {
            let lp = standard_normal_logp(g, *f)?;
            ll = g.tape.add(ll, lp)?;
        }
        g.tape.add(ll, pass.log_det)
    }

    /// Inverts the composition. `factored` must carry one tensor per
    /// factor-out step, in the order the forward pass emitted them.
    pub fn inverse(&self, g: &mut Graph, z: &Tensor, factored: &[Tensor]) -> Result<Tensor> {
        let n_factor = self
            .steps
            .iter()
            .filter(|s| matches!(s, Step::FactorOut))
            .count();
        if factored.len() != n_factor {
            return Err(Error::Contract(format!(
                "expected {n_factor} factored tensors, got {}",
                factored.len()
            )));
        }
        let mut cur = z.clone();
        let mut factor_idx = n_factor;
        for (idx, step) in self.steps.iter().enumerate().rev() {
            match step {
                Step::Map(b) => {
                    cur = b.inverse(g, &cur).map_err(|e| at_flow(idx, e))?;
                }
                Step::FactorOut => {
                    factor_idx -= 1;
                    let f = &factored[factor_idx];
                    let mut t = Graph::empty();
                    let a = t.tape.leaf(cur.clone());
                    let b = t.tape.leaf(f.clone());
                    let joined = t.tape.concat(&[a, b], 0)?;
                    cur = t.tape.detach(joined);
                }
            }
        }
        Ok(cur)
    }
}

fn at_flow(idx: usize, e: Error) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("flow step {idx}: {m}")),
        Error::Stability(m) => Error::Stability(format!("flow step {idx}: {m}")),
        other => other,
    }
}

/// Log-density of a standard normal over every element, as a tape scalar.
pub fn standard_normal_logp(g: &mut Graph, z: Id) -> Result<Id> {
    let n = g.tape.value(z).numel() as f64;
    let sq = g.tape.mul(z, z)?;
    let ss = g.tape.sum_all(sq)?;
    let half = g.tape.mul_const(ss, -0.5)?;
    g.tape
        .add_const(half, -0.5 * n * (2.0 * std::f64::consts::PI).ln())
}

/// Scalar standard-normal log-density, for value-side code.
pub fn normal_logp_value(z: &[f64]) -> f64 {
    let ss: f64 = z.iter().map(|v| v * v).sum();
    -0.5 * ss - 0.5 * z.len() as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Shifts rows down by `s`, filling the first `s` rows with zeros. Output row
/// `r` holds input row `r - s`, so a causal stack on top of this sees only
/// strictly-past groups.
pub(crate) fn shift_rows_down(g: &mut Graph, x: Id, s: usize) -> Result<Id> {
    let shape = g.tape.value(x).shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if s == 0 || s >= h {
        return Err(Error::Dimension(format!(
            "row shift {s} out of range for height {h}"
        )));
    }
    let zeros = g.tape.constant(Tensor::zeros(&[c, s, w]));
    let head = g.tape.slice(x, 1, 0, h - s)?;
    g.tape.concat(&[zeros, head], 1)
}

#[cfg(test)]
mod tests;
