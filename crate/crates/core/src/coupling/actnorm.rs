//! Per-channel affine normalization with data-dependent initialization.
//!
//! `z = scale * (x + bias)` per channel; `log_det = spatial_size * sum log
//! |scale|`. Initialization from a batch sets post-transform channel mean to
//! zero and variance to one.

use crate::coupling::Bijection;
use crate::error::{Error, Result};
use crate::params::{Graph, ParamStore};
use crate::tensor::{Id, Tensor};

pub struct Actnorm {
    /// Parameter names in the store: `<prefix>.scale` and `<prefix>.bias`.
    pub prefix: String,
}

impl Actnorm {
    pub fn new(prefix: impl Into<String>) -> Self {
        Self { prefix: prefix.into() }
    }

    pub fn scale_name(&self) -> String {
        format!("{}.scale", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.prefix)
    }
}

impl Bijection for Actnorm {
    fn forward(&self, g: &mut Graph, x: Id) -> Result<(Id, Id)> {
        let shape = g.tape.value(x).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Dimension(format!("actnorm expects [C,H,W], got {shape:?}")));
        }
        let spatial = (shape[1] * shape[2]) as f64;
        let scale = g.p(&self.scale_name())?;
        let bias = g.p(&self.bias_name())?;
        if g.tape.value(scale).data().iter().any(|v| *v == 0.0) {
            return Err(Error::Invertibility("actnorm scale has a zero entry".into()));
        }
        let shifted = g.tape.add(x, bias)?;
        let z = g.tape.mul(shifted, scale)?;
        let abs_scale = g.tape.abs(scale)?;
        let log_abs = g.tape.log(abs_scale)?;
        let sum = g.tape.sum_all(log_abs)?;
        let log_det = g.tape.mul_const(sum, spatial)?;
        Ok((z, log_det))
    }

    fn inverse(&self, g: &mut Graph, z: &Tensor) -> Result<Tensor> {
        let shape = z.shape().to_vec();
        let (c, hw) = (shape[0], shape[1] * shape[2]);
        let scale_id = g.p(&self.scale_name())?;
        let bias_id = g.p(&self.bias_name())?;
        let scale = g.tape.value(scale_id).data().to_vec();
        let bias = g.tape.value(bias_id).data().to_vec();
        if scale.iter().any(|v| *v == 0.0) {
            return Err(Error::Invertibility("actnorm scale has a zero entry".into()));
        }
        let mut out = z.clone();
        for ch in 0..c {
            for v in &mut out.data_mut()[ch * hw..(ch + 1) * hw] {
                *v = *v / scale[ch] - bias[ch];
            }
        }
        Ok(out)
    }
}

/// Data-dependent initialization from a batch laid out as `[C, H, W]` (the
/// batch may be folded into the spatial axes). Sets `bias = -mean` and
/// `scale = 1 / sqrt(max(var, 1e-6))` per channel so the transformed batch
/// has channel mean 0 and variance 1.
pub fn actnorm_init(store: &mut ParamStore, prefix: &str, batch: &Tensor) -> Result<()> {
    let shape = batch.shape();
    if shape.len() != 3 {
        return Err(Error::Dimension(format!(
            "actnorm init expects [C,H,W], got {shape:?}"
        )));
    }
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    let mut scale = vec![0.0; c];
    let mut bias = vec![0.0; c];
    for ch in 0..c {
        let slice = &batch.data()[ch * hw..(ch + 1) * hw];
        let mean = slice.iter().sum::<f64>() / hw as f64;
        let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
        bias[ch] = -mean;
        scale[ch] = 1.0 / var.max(1e-6).sqrt();
    }
    store.insert(&format!("{prefix}.scale"), Tensor::from_vec(scale));
    store.insert(&format!("{prefix}.bias"), Tensor::from_vec(bias));
    Ok(())
}
