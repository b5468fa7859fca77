//! Grouped affine coupling: `Z_i = sigma_i(X_<i) * X_i + mu_i(X_<i)`.
//!
//! The estimator emits shift and log-scale for every group in one causal
//! pass, so the forward direction is a single elementwise transform. The
//! inverse recovers groups sequentially, re-evaluating the estimator on the
//! partially recovered input.

use crate::coupling::{Bijection, GroupPartition, ParamSource};
use crate::error::{Error, Result};
use crate::params::Graph;
use crate::tensor::{Id, Tensor};

/// Log-scales are clamped to this band; saturation is a diagnosable failure
/// rather than a silent over/underflow.
pub const LOG_SCALE_CLAMP: f64 = 30.0;

pub struct AffineCoupling<'a> {
    pub est: &'a dyn ParamSource,
    pub partition: GroupPartition,
    pub flow: usize,
}

impl<'a> AffineCoupling<'a> {
    pub fn new(est: &'a dyn ParamSource, partition: GroupPartition, flow: usize) -> Result<Self> {
        if est.arity() != 2 {
            return Err(Error::Config(format!(
                "affine coupling needs arity 2, estimator has {}",
                est.arity()
            )));
        }
        Ok(Self { est, partition, flow })
    }

    /// Splits the raw parameter tensor into (mu, raw log-sigma).
    fn split_params(&self, g: &mut Graph, params: Id, channels: usize) -> Result<(Id, Id)> {
        let parts = g.tape.split(params, 0, &[channels, channels])?;
        Ok((parts[0], parts[1]))
    }
}

impl Bijection for AffineCoupling<'_> {
    fn forward(&self, g: &mut Graph, x: Id) -> Result<(Id, Id)> {
        let shape = g.tape.value(x).shape().to_vec();
        self.partition.group_size(&shape)?;
        let params = self.est.params(g, x, self.flow).map_err(|e| {
            Error::Numeric(format!("estimator failed for flow {}: {e}", self.flow))
        })?;
        let (mu, log_sigma_raw) = self.split_params(g, params, shape[0])?;
        let sat = g
            .tape
            .value(log_sigma_raw)
            .data()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        g.diag.push((format!("flow{}.max_abs_log_sigma", self.flow), sat));
        let log_sigma = g.tape.clamp(log_sigma_raw, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)?;
        let sigma = g.tape.exp(log_sigma)?;
        let scaled = g.tape.mul(sigma, x)?;
        let z = g.tape.add(scaled, mu)?;
        let log_det = g.tape.sum_all(log_sigma)?;
        Ok((z, log_det))
    }

    fn inverse(&self, g: &mut Graph, z: &Tensor) -> Result<Tensor> {
        let shape = z.shape().to_vec();
        self.partition.group_size(&shape)?;
        let channels = shape[0];
        let mut x = Tensor::zeros(&shape);
        for i in 0..self.partition.groups {
            let xin = g.tape.leaf(x.clone());
            let params = self.est.params(g, xin, self.flow)?;
            let (mu_id, ls_id) = self.split_params(g, params, channels)?;
            let mu = g.tape.value(mu_id).data().to_vec();
            let ls = g.tape.value(ls_id).data().to_vec();
            for &e in &self.partition.group_elements(&shape, i)? {
                let raw = ls[e];
                if raw.abs() > LOG_SCALE_CLAMP {
                    return Err(Error::Stability(format!(
                        "log-scale {raw:.2} saturated beyond +-{LOG_SCALE_CLAMP} in flow {}",
                        self.flow
                    )));
                }
                x.data_mut()[e] = (z.data()[e] - mu[e]) / raw.exp();
            }
        }
        Ok(x)
    }
}
