//! Volume-preserving permutations and invertible channel mixing.

use std::sync::Arc;

use crate::coupling::{Bijection, GroupAxis, GroupPartition};
use crate::error::{Error, Result};
use crate::params::Graph;
use crate::tensor::{Id, Tensor};

/// Emits groups in reverse order along the partitioned axis; log_det = 0 and
/// applying it twice is the identity.
pub struct ReverseGroups {
    pub partition: GroupPartition,
}

impl ReverseGroups {
    pub fn new(partition: GroupPartition) -> Self {
        Self { partition }
    }

    fn index_map(&self, shape: &[usize]) -> Result<Vec<usize>> {
        let s = self.partition.group_size(shape)?;
        let gcount = self.partition.groups;
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let mut map = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    let (src_c, src_r) = match self.partition.axis {
                        GroupAxis::Height => {
                            let grp = r / s;
                            (ch, (gcount - 1 - grp) * s + r % s)
                        }
                        GroupAxis::Channel => {
                            let grp = ch / s;
                            ((gcount - 1 - grp) * s + ch % s, r)
                        }
                    };
                    map.push((src_c * h + src_r) * w + col);
                }
            }
        }
        Ok(map)
    }
}

impl Bijection for ReverseGroups {
    fn forward(&self, g: &mut Graph, x: Id) -> Result<(Id, Id)> {
        let shape = g.tape.value(x).shape().to_vec();
        let map = self.index_map(&shape)?;
        let z = g.tape.gather(x, Arc::new(map), shape)?;
        let zero = g.tape.scalar_const(0.0);
        Ok((z, zero))
    }

    fn inverse(&self, g: &mut Graph, z: &Tensor) -> Result<Tensor> {
        // the reversal is an involution
        let mut t = Graph::empty();
        let id = t.tape.leaf(z.clone());
        let shape = z.shape().to_vec();
        let map = self.index_map(&shape)?;
        let out = t.tape.gather(id, Arc::new(map), shape)?;
        let _ = g;
        Ok(t.tape.detach(out))
    }
}

/// Invertible per-position channel mix `z[:, h, w] = W x[:, h, w]`, the
/// 1x1-convolution permutation generalization. log_det = spatial * log|det W|.
pub struct InvertibleMix {
    /// Name of the `[C, C]` mixing matrix in the store.
    pub weight: String,
}

impl InvertibleMix {
    pub fn new(weight: impl Into<String>) -> Self {
        Self { weight: weight.into() }
    }
}

impl Bijection for InvertibleMix {
    fn forward(&self, g: &mut Graph, x: Id) -> Result<(Id, Id)> {
        let shape = g.tape.value(x).shape().to_vec();
        let c = shape[0];
        let w = g.p(&self.weight)?;
        let ws = g.tape.value(w).shape().to_vec();
        if ws != [c, c] {
            return Err(Error::Dimension(format!(
                "mix weight {ws:?} does not match {c} channels"
            )));
        }
        let (sign, _) = crate::tensor::lu_sign_logdet(g.tape.value(w).data(), c)?;
        if sign == 0.0 {
            return Err(Error::Invertibility("singular channel mix".into()));
        }
        let kernel = g.tape.reshape(w, vec![c, c, 1, 1])?;
        let z = g
            .tape
            .conv2d(x, kernel, (1, 1), (1, 1), crate::tensor::PadMode::Same)?;
        let ld1 = g.tape.log_abs_det(w)?;
        let log_det = g.tape.mul_const(ld1, (shape[1] * shape[2]) as f64)?;
        Ok((z, log_det))
    }

    fn inverse(&self, g: &mut Graph, z: &Tensor) -> Result<Tensor> {
        let shape = z.shape().to_vec();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let wid = g.p(&self.weight)?;
        let wmat = g.tape.value(wid).data().to_vec();
        let inv = crate::tensor::invert_matrix(&wmat, c)
            .map_err(|_| Error::Invertibility("singular channel mix".into()))?;
        let mut out = Tensor::zeros(&shape);
        for pos in 0..h * w {
            for row in 0..c {
                let mut acc = 0.0;
                for col in 0..c {
                    acc += inv[row * c + col] * z.data()[col * h * w + pos];
                }
                out.data_mut()[row * h * w + pos] = acc;
            }
        }
        Ok(out)
    }
}
