//! Multi-scale plumbing: sub-pixel squeeze and its inverse.
//!
//! `squeeze` turns `[C, H, W]` into `[4C, H/2, W/2]` by moving each 2x2
//! spatial block into channels; output channel `c*4 + dy*2 + dx` holds the
//! sub-pixel at offset `(dy, dx)`. It is a fixed reshuffle, so log_det = 0
//! and the inverse is exact.

use std::sync::Arc;

use crate::coupling::Bijection;
use crate::error::{Error, Result};
use crate::params::Graph;
use crate::tensor::{Id, Tensor};

/// Index map for squeeze: `out[i] = in[map[i]]` with out shape
/// `[4C, H/2, W/2]`.
pub fn squeeze_map(c: usize, h: usize, w: usize) -> Result<Vec<usize>> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "squeeze needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut map = Vec::with_capacity(c * h * w);
    for oc in 0..4 * c {
        let ch = oc / 4;
        let dy = (oc % 4) / 2;
        let dx = oc % 2;
        for y in 0..oh {
            for x in 0..ow {
                map.push((ch * h + 2 * y + dy) * w + 2 * x + dx);
            }
        }
    }
    Ok(map)
}

/// Inverse index map: `in[i] = out[map[i]]` with in shape `[C, H, W]`.
pub fn unsqueeze_map(c: usize, h: usize, w: usize) -> Result<Vec<usize>> {
    let fwd = squeeze_map(c, h, w)?;
    let mut inv = vec![0usize; fwd.len()];
    for (dst, src) in fwd.iter().enumerate() {
        inv[*src] = dst;
    }
    Ok(inv)
}

pub struct Squeeze;

impl Bijection for Squeeze {
    fn forward(&self, g: &mut Graph, x: Id) -> Result<(Id, Id)> {
        let s = g.tape.value(x).shape().to_vec();
        if s.len() != 3 {
            return Err(Error::Dimension(format!("squeeze expects [C,H,W], got {s:?}")));
        }
        let map = squeeze_map(s[0], s[1], s[2])?;
        let z = g
            .tape
            .gather(x, Arc::new(map), vec![4 * s[0], s[1] / 2, s[2] / 2])?;
        let zero = g.tape.scalar_const(0.0);
        Ok((z, zero))
    }

    fn inverse(&self, g: &mut Graph, z: &Tensor) -> Result<Tensor> {
        let s = z.shape().to_vec();
        if s.len() != 3 || s[0] % 4 != 0 {
            return Err(Error::Dimension(format!("unsqueeze expects [4C,h,w], got {s:?}")));
        }
        let (c, h, w) = (s[0] / 4, s[1] * 2, s[2] * 2);
        let map = unsqueeze_map(c, h, w)?;
        let mut t = Graph::empty();
        let id = t.tape.leaf(z.clone());
        let out = t.tape.gather(id, Arc::new(map), vec![c, h, w])?;
        let _ = g;
        Ok(t.tape.detach(out))
    }
}
