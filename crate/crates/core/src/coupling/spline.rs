//! Monotonic rational-quadratic spline coupling.
//!
//! Each transformed element gets `3*bins - 1` raw parameters: bin widths,
//! bin heights, and interior knot derivatives. Widths/heights are
//! exponential-normalized over bins and scaled to `[-tail_bound, tail_bound]`;
//! derivatives go through a shifted softplus with a small positive floor, so
//! monotonicity holds by construction and all-zero raw parameters give the
//! identity map. Outside the tail bound the transform is the identity with
//! boundary derivatives pinned to 1, which keeps the map continuous.
//!
//! The forward pass is built from tape primitives (bin selection enters as
//! constant one-hot masks, which is exact because the selection is piecewise
//! constant), so parameter gradients need no hand-derived adjoints. The
//! inverse solves the per-bin quadratic analytically.

use crate::coupling::{Bijection, GroupPartition, ParamSource};
use crate::error::{Error, Result};
use crate::params::Graph;
use crate::tensor::{Id, Tensor};

const MIN_DERIVATIVE: f64 = 1e-3;

/// Raw derivative offset chosen so a zero raw parameter maps to derivative
/// exactly 1: `softplus(x + shift) + floor = 1` at `x = 0`.
fn derivative_shift() -> f64 {
    (1.0 - MIN_DERIVATIVE).exp_m1().ln()
}

#[derive(Debug, Clone, Copy)]
pub struct SplineConfig {
    pub bins: usize,
    pub tail_bound: f64,
}

impl SplineConfig {
    pub fn new(bins: usize, tail_bound: f64) -> Result<Self> {
        if bins < 2 {
            return Err(Error::Config(format!("spline needs >= 2 bins, got {bins}")));
        }
        if tail_bound <= 0.0 {
            return Err(Error::Config("tail bound must be positive".into()));
        }
        Ok(Self { bins, tail_bound })
    }

    pub fn arity(&self) -> usize {
        3 * self.bins - 1
    }
}

pub struct RqSplineCoupling<'a> {
    pub est: &'a dyn ParamSource,
    pub partition: GroupPartition,
    pub flow: usize,
    pub cfg: SplineConfig,
}

impl<'a> RqSplineCoupling<'a> {
    pub fn new(
        est: &'a dyn ParamSource,
        partition: GroupPartition,
        flow: usize,
        cfg: SplineConfig,
    ) -> Result<Self> {
        if est.arity() != cfg.arity() {
            return Err(Error::Config(format!(
                "spline with {} bins needs arity {}, estimator has {}",
                cfg.bins,
                cfg.arity(),
                est.arity()
            )));
        }
        Ok(Self { est, partition, flow, cfg })
    }
}

/// Normalized spline geometry on the tape, all `[N, ...]` with N elements.
struct Knots {
    x_knots: Id,  // [N, B+1]
    y_knots: Id,  // [N, B+1]
    widths: Id,   // [N, B]
    heights: Id,  // [N, B]
    derivs: Id,   // [N, B+1], boundary entries fixed to 1
}

/// Turns the raw `[(3B-1)*C, H, W]` parameter tensor into knot geometry.
fn normalize(g: &mut Graph, params: Id, channels: usize, cfg: &SplineConfig) -> Result<Knots> {
    let b = cfg.bins;
    let shape = g.tape.value(params).shape().to_vec();
    let n = channels * shape[1] * shape[2];
    let w_block = g.tape.slice(params, 0, 0, b * channels)?;
    let h_block = g.tape.slice(params, 0, b * channels, b * channels)?;
    let d_block = g.tape.slice(params, 0, 2 * b * channels, (b - 1) * channels)?;

    let to_cols = |g: &mut Graph, block: Id, rows: usize| -> Result<Id> {
        let m = g.tape.reshape(block, vec![rows, n])?;
        g.tape.transpose2d(m) // [N, rows]
    };
    let w_raw = to_cols(g, w_block, b)?;
    let h_raw = to_cols(g, h_block, b)?;
    let d_raw = to_cols(g, d_block, b - 1)?;

    // exponential normalization over bins, scaled to the 2*tail_bound span
    let span = 2.0 * cfg.tail_bound;
    let norm_bins = |g: &mut Graph, raw: Id| -> Result<Id> {
        let e = g.tape.exp(raw)?;
        let sum = g.tape.sum_last_axis(e)?; // [N]
        let frac = g.tape.div(e, sum)?; // per-row broadcast
        g.tape.mul_const(frac, span)
    };
    let widths = norm_bins(g, w_raw)?;
    let heights = norm_bins(g, h_raw)?;

    // cumulative positions via a constant lower-triangular ones matrix
    let mut cum = vec![0.0; b * (b + 1)];
    for row in 0..b {
        for col in row + 1..=b {
            cum[row * (b + 1) + col] = 1.0;
        }
    }
    let cum = Tensor::new(vec![b, b + 1], cum)?;
    let cum_w = g.constant(cum.clone());
    let cum_h = g.constant(cum);
    let xw = g.tape.matmul(widths, cum_w)?;
    let x_knots = g.tape.add_const(xw, -cfg.tail_bound)?;
    let yh = g.tape.matmul(heights, cum_h)?;
    let y_knots = g.tape.add_const(yh, -cfg.tail_bound)?;

    // interior derivatives, boundaries pinned to 1 for tail continuity
    let shifted = g.tape.add_const(d_raw, derivative_shift())?;
    let sp = g.tape.softplus(shifted)?;
    let d_int = g.tape.add_const(sp, MIN_DERIVATIVE)?;
    let ones = g.constant(Tensor::full(&[n, 1], 1.0));
    let derivs = g.tape.concat(&[ones, d_int, ones], 1)?;

    Ok(Knots { x_knots, y_knots, widths, heights, derivs })
}

/// One-hot masks for bin membership, built from values. `coords` are the
/// per-element inputs (x for forward, z for inverse) and `knots` the matching
/// knot array. A value exactly at a knot goes to the left bin.
struct Masks {
    bins: Tensor,       // [N, B]
    knot_left: Tensor,  // [N, B+1]
    knot_right: Tensor, // [N, B+1]
    in_range: Tensor,   // [N]
    bin_index: Vec<Option<usize>>,
}

fn build_masks(coords: &[f64], knots: &[f64], b: usize, tail: f64) -> Masks {
    let n = coords.len();
    let mut bins = vec![0.0; n * b];
    let mut left = vec![0.0; n * (b + 1)];
    let mut right = vec![0.0; n * (b + 1)];
    let mut inr = vec![0.0; n];
    let mut idx = vec![None; n];
    for e in 0..n {
        let v = coords[e];
        if v <= -tail || v > tail {
            continue;
        }
        let row = &knots[e * (b + 1)..(e + 1) * (b + 1)];
        // number of knots 1..=B strictly below v, clamped into [0, B-1]
        let mut j = 0;
        for m in 1..=b {
            if row[m] < v {
                j = m;
            }
        }
        let j = j.min(b - 1);
        bins[e * b + j] = 1.0;
        left[e * (b + 1) + j] = 1.0;
        right[e * (b + 1) + j + 1] = 1.0;
        inr[e] = 1.0;
        idx[e] = Some(j);
    }
    Masks {
        bins: Tensor::new(vec![n, b], bins).expect("mask shape"),
        knot_left: Tensor::new(vec![n, b + 1], left).expect("mask shape"),
        knot_right: Tensor::new(vec![n, b + 1], right).expect("mask shape"),
        in_range: Tensor::new(vec![n], inr).expect("mask shape"),
        bin_index: idx,
    }
}

/// X-knot positions as flat values, for knot-probing tests.
#[cfg(test)]
pub(crate) fn knot_positions_for_test(
    g: &mut Graph,
    params: Id,
    channels: usize,
    cfg: &SplineConfig,
) -> Result<Vec<f64>> {
    let knots = normalize(g, params, channels, cfg)?;
    Ok(g.tape.value(knots.x_knots).data().to_vec())
}

/// Selects the masked entry per row: `sum_last_axis(values * mask)`.
fn select(g: &mut Graph, values: Id, mask: &Tensor) -> Result<Id> {
    let m = g.constant(mask.clone());
    let prod = g.tape.mul(values, m)?;
    g.tape.sum_last_axis(prod)
}

impl Bijection for RqSplineCoupling<'_> {
    fn forward(&self, g: &mut Graph, x: Id) -> Result<(Id, Id)> {
        let shape = g.tape.value(x).shape().to_vec();
        self.partition.group_size(&shape)?;
        let (c, b, tail) = (shape[0], self.cfg.bins, self.cfg.tail_bound);
        let n = shape.iter().product::<usize>();

        let params = self.est.params(g, x, self.flow)?;
        let knots = normalize(g, params, c, &self.cfg)?;
        let x_flat = g.tape.reshape(x, vec![n])?;

        let masks = build_masks(
            g.tape.value(x_flat).data(),
            g.tape.value(knots.x_knots).data(),
            b,
            tail,
        );

        let xk = select(g, knots.x_knots, &masks.knot_left)?;
        let yk = select(g, knots.y_knots, &masks.knot_left)?;
        let d0 = select(g, knots.derivs, &masks.knot_left)?;
        let d1 = select(g, knots.derivs, &masks.knot_right)?;
        let wk = select(g, knots.widths, &masks.bins)?;
        let hk = select(g, knots.heights, &masks.bins)?;

        // pad out-of-range rows with harmless dummies so divisions stay legal
        let out_rows = masks.in_range.map(|v| 1.0 - v);
        let pad = g.constant(out_rows.clone());
        let wk = g.tape.add(wk, pad)?;
        let pad = g.constant(out_rows.clone());
        let hk = g.tape.add(hk, pad)?;

        let dx = g.tape.sub(x_flat, xk)?;
        let xi = g.tape.div(dx, wk)?;
        let s = g.tape.div(hk, wk)?;
        let ones = g.constant(Tensor::full(&[n], 1.0));
        let om = g.tape.sub(ones, xi)?;
        let xi2 = g.tape.mul(xi, xi)?;
        let xiom = g.tape.mul(xi, om)?;
        let om2 = g.tape.mul(om, om)?;

        let dsum = g.tape.add(d1, d0)?;
        let two_s = g.tape.mul_const(s, 2.0)?;
        let kterm = g.tape.sub(dsum, two_s)?;
        let kx = g.tape.mul(kterm, xiom)?;
        let denom = g.tape.add(s, kx)?;

        let sxi2 = g.tape.mul(s, xi2)?;
        let d0xiom = g.tape.mul(d0, xiom)?;
        let znum_in = g.tape.add(sxi2, d0xiom)?;
        let znum = g.tape.mul(hk, znum_in)?;
        let zfrac = g.tape.div(znum, denom)?;
        let z_in = g.tape.add(yk, zfrac)?;

        let s2 = g.tape.mul(s, s)?;
        let d1xi2 = g.tape.mul(d1, xi2)?;
        let sxiom = g.tape.mul(s, xiom)?;
        let sxiom2 = g.tape.mul_const(sxiom, 2.0)?;
        let d0om2 = g.tape.mul(d0, om2)?;
        let dsum2 = g.tape.add(d1xi2, sxiom2)?;
        let dnum_in = g.tape.add(dsum2, d0om2)?;
        let dnum = g.tape.mul(s2, dnum_in)?;
        let denom2 = g.tape.mul(denom, denom)?;
        let deriv = g.tape.div(dnum, denom2)?;

        // blend with identity outside the tails
        let inr = g.constant(masks.in_range.clone());
        let outr = g.constant(out_rows);
        let z_masked = g.tape.mul(z_in, inr)?;
        let x_masked = g.tape.mul(x_flat, outr)?;
        let z_flat = g.tape.add(z_masked, x_masked)?;
        let inr2 = g.constant(masks.in_range.clone());
        let outr2 = g.constant(masks.in_range.map(|v| 1.0 - v));
        let deriv_masked = g.tape.mul(deriv, inr2)?;
        let deriv_eff = g.tape.add(deriv_masked, outr2)?;
        let log_d = g.tape.log(deriv_eff)?;
        let log_det = g.tape.sum_all(log_d)?;

        let z = g.tape.reshape(z_flat, shape)?;
        Ok((z, log_det))
    }

    fn inverse(&self, g: &mut Graph, z: &Tensor) -> Result<Tensor> {
        let shape = z.shape().to_vec();
        self.partition.group_size(&shape)?;
        let (c, b, tail) = (shape[0], self.cfg.bins, self.cfg.tail_bound);

        let mut x = Tensor::zeros(&shape);
        for i in 0..self.partition.groups {
            let xin = g.tape.leaf(x.clone());
            let params = self.est.params(g, xin, self.flow)?;
            let knots = normalize(g, params, c, &self.cfg)?;
            let xk = g.tape.value(knots.x_knots).data().to_vec();
            let yk = g.tape.value(knots.y_knots).data().to_vec();
            let wv = g.tape.value(knots.widths).data().to_vec();
            let hv = g.tape.value(knots.heights).data().to_vec();
            let dv = g.tape.value(knots.derivs).data().to_vec();

            let masks = build_masks(z.data(), &yk, b, tail);
            for &e in &self.partition.group_elements(&shape, i)? {
                let zv = z.data()[e];
                let Some(j) = masks.bin_index[e] else {
                    x.data_mut()[e] = zv; // identity tails
                    continue;
                };
                let wk = wv[e * b + j];
                let hk = hv[e * b + j];
                let d0 = dv[e * (b + 1) + j];
                let d1 = dv[e * (b + 1) + j + 1];
                let s = hk / wk;
                let u = zv - yk[e * (b + 1) + j];
                let k = d1 + d0 - 2.0 * s;
                // quadratic a*xi^2 + b*xi + c = 0 with the numerically stable root
                let qa = hk * (s - d0) + u * k;
                let qb = hk * d0 - u * k;
                let qc = -s * u;
                let disc = (qb * qb - 4.0 * qa * qc).max(0.0);
                let xi = 2.0 * qc / (-qb - disc.sqrt());
                x.data_mut()[e] = xk[e * (b + 1) + j] + xi * wk;
            }
        }
        Ok(x)
    }
}
