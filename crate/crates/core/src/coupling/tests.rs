use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::params::Graph;
use crate::tensor::PadMode;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: &[usize], r: &mut ChaCha8Rng, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Constant-parameter source: ignores the input entirely, which is trivially
/// causal. `fill[q]` is broadcast over slot `q`.
struct ConstSource {
    arity: usize,
    fill: Vec<f64>,
}

impl ParamSource for ConstSource {
    fn arity(&self) -> usize {
        self.arity
    }
    fn params(&self, g: &mut Graph, x: Id, _flow: usize) -> Result<Id> {
        let s = g.tape.value(x).shape().to_vec();
        let mut data = Vec::new();
        for q in 0..self.arity {
            data.extend(std::iter::repeat(self.fill[q]).take(s[0] * s[1] * s[2]));
        }
        let t = Tensor::new(vec![self.arity * s[0], s[1], s[2]], data).unwrap();
        Ok(g.constant(t))
    }
}

/// Fixed full parameter tensor (still input-independent).
struct FixedSource {
    arity: usize,
    params: Tensor,
}

impl ParamSource for FixedSource {
    fn arity(&self) -> usize {
        self.arity
    }
    fn params(&self, g: &mut Graph, _x: Id, _flow: usize) -> Result<Id> {
        Ok(g.constant(self.params.clone()))
    }
}

/// Small causal network over the height axis: shift rows down by the group
/// size, then a causal conv, tanh, and a 1x1 projection.
struct ToyHeightSource {
    arity: usize,
    shift: usize,
    k1: Tensor, // [hidden, c, 3, 1]
    k2: Tensor, // [arity*c, hidden, 1, 1]
    b2: Tensor, // [arity*c]
}

impl ToyHeightSource {
    fn random(c: usize, arity: usize, shift: usize, r: &mut ChaCha8Rng, scale: f64) -> Self {
        let hidden = 6;
        Self {
            arity,
            shift,
            k1: random_tensor(&[hidden, c, 3, 1], r, scale),
            k2: random_tensor(&[arity * c, hidden, 1, 1], r, scale),
            b2: random_tensor(&[arity * c], r, scale),
        }
    }
}

impl ParamSource for ToyHeightSource {
    fn arity(&self) -> usize {
        self.arity
    }
    fn params(&self, g: &mut Graph, x: Id, _flow: usize) -> Result<Id> {
        let shifted = shift_rows_down(g, x, self.shift)?;
        let k1 = g.constant(self.k1.clone());
        let h = g.tape.conv2d(shifted, k1, (1, 1), (1, 1), PadMode::CausalH)?;
        let h = g.tape.tanh(h)?;
        let k2 = g.constant(self.k2.clone());
        let out = g.tape.conv2d(h, k2, (1, 1), (1, 1), PadMode::Same)?;
        let b2 = g.constant(self.b2.clone());
        g.tape.add(out, b2)
    }
}

/// Channel-grouped source: evaluates a small conv net per group on the input
/// with all channels of groups >= i zeroed, then keeps that group's slots.
struct ToyChannelSource {
    arity: usize,
    groups: usize,
    k1: Tensor, // [hidden, c, 3, 3]
    k2: Tensor, // [arity*c, hidden, 1, 1]
    b2: Tensor,
}

impl ToyChannelSource {
    fn random(c: usize, arity: usize, groups: usize, r: &mut ChaCha8Rng, scale: f64) -> Self {
        let hidden = 5;
        Self {
            arity,
            groups,
            k1: random_tensor(&[hidden, c, 3, 3], r, scale),
            k2: random_tensor(&[arity * c, hidden, 1, 1], r, scale),
            b2: random_tensor(&[arity * c], r, scale),
        }
    }
}

impl ParamSource for ToyChannelSource {
    fn arity(&self) -> usize {
        self.arity
    }
    fn params(&self, g: &mut Graph, x: Id, _flow: usize) -> Result<Id> {
        let s = g.tape.value(x).shape().to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let gs = c / self.groups;
        let mut acc: Option<Id> = None;
        for i in 0..self.groups {
            // zero out channels of groups >= i
            let mut mask = vec![0.0; c * h * w];
            for v in &mut mask[..i * gs * h * w] {
                *v = 1.0;
            }
            let mask = g.constant(Tensor::new(vec![c, h, w], mask).unwrap());
            let xm = g.tape.mul(x, mask)?;
            let k1 = g.constant(self.k1.clone());
            let hid = g.tape.conv2d(xm, k1, (1, 1), (1, 1), PadMode::Same)?;
            let hid = g.tape.tanh(hid)?;
            let k2 = g.constant(self.k2.clone());
            let p = g.tape.conv2d(hid, k2, (1, 1), (1, 1), PadMode::Same)?;
            let b2 = g.constant(self.b2.clone());
            let p = g.tape.add(p, b2)?;
            // keep slots for this group's channels only
            let mut pmask = vec![0.0; self.arity * c * h * w];
            for q in 0..self.arity {
                let ch0 = q * c + i * gs;
                for v in &mut pmask[ch0 * h * w..(ch0 + gs) * h * w] {
                    *v = 1.0;
                }
            }
            let pmask = g.constant(Tensor::new(vec![self.arity * c, h, w], pmask).unwrap());
            let kept = g.tape.mul(p, pmask)?;
            acc = Some(match acc {
                None => kept,
                Some(a) => g.tape.add(a, kept)?,
            });
        }
        Ok(acc.unwrap())
    }
}

fn run_forward(b: &dyn Bijection, x: &Tensor) -> (Tensor, f64) {
    let mut g = Graph::empty();
    let ix = g.tape.leaf(x.clone());
    let (z, ld) = b.forward(&mut g, ix).unwrap();
    (g.tape.detach(z), g.tape.value(ld).item().unwrap())
}

fn run_inverse(b: &dyn Bijection, z: &Tensor) -> Tensor {
    let mut g = Graph::empty();
    b.inverse(&mut g, z).unwrap()
}

/// Dense Jacobian by central differences of the forward map.
fn numeric_jacobian(b: &dyn Bijection, x: &Tensor, eps: f64) -> Vec<f64> {
    let n = x.numel();
    let mut jac = vec![0.0; n * n];
    for col in 0..n {
        let mut plus = x.clone();
        plus.data_mut()[col] += eps;
        let mut minus = x.clone();
        minus.data_mut()[col] -= eps;
        let (zp, _) = run_forward(b, &plus);
        let (zm, _) = run_forward(b, &minus);
        for row in 0..n {
            jac[row * n + col] = (zp.data()[row] - zm.data()[row]) / (2.0 * eps);
        }
    }
    jac
}

/// Independent log|det| via plain Gaussian elimination (test-side oracle).
fn logabsdet_oracle(m: &[f64], n: usize) -> f64 {
    let mut a = m.to_vec();
    let mut acc = 0.0;
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[piv * n + col].abs() {
                piv = r;
            }
        }
        for c2 in 0..n {
            a.swap(col * n + c2, piv * n + c2);
        }
        let d = a[col * n + col];
        acc += d.abs().ln();
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            for c2 in col..n {
                a[r * n + c2] -= f * a[col * n + c2];
            }
        }
    }
    acc
}

fn partition_h(g: usize) -> GroupPartition {
    GroupPartition::new(g, GroupAxis::Height).unwrap()
}

// ---- affine coupling ----

#[test]
fn affine_identity_estimator_gives_identity() {
    let src = ConstSource { arity: 2, fill: vec![0.0, 0.0] };
    let c = AffineCoupling::new(&src, partition_h(2), 0).unwrap();
    let mut r = rng(1);
    let x = random_tensor(&[1, 2, 5], &mut r, 2.0);
    let (z, ld) = run_forward(&c, &x);
    assert_eq!(z.data(), x.data());
    assert_eq!(ld, 0.0);
}

#[test]
fn affine_constant_params_closed_form() {
    // mu = 1, log sigma = ln 2 everywhere: z = 2x + 1, log_det = 10 ln 2
    let src = ConstSource { arity: 2, fill: vec![1.0, 2.0f64.ln()] };
    let c = AffineCoupling::new(&src, partition_h(2), 0).unwrap();
    let mut r = rng(2);
    let x = random_tensor(&[1, 2, 5], &mut r, 2.0);
    let (z, ld) = run_forward(&c, &x);
    for (zv, xv) in z.data().iter().zip(x.data()) {
        assert!((zv - (2.0 * xv + 1.0)).abs() < 1e-12);
    }
    assert!((ld - 10.0 * 2.0f64.ln()).abs() < 1e-12);
}

#[test]
fn affine_log_det_matches_dense_jacobian() {
    let mut r = rng(3);
    // height grouping on [1, 4, 2] (8 dims)
    let src = ToyHeightSource::random(1, 2, 1, &mut r, 0.6);
    let c = AffineCoupling::new(&src, partition_h(4), 0).unwrap();
    let x = random_tensor(&[1, 4, 2], &mut r, 1.5);
    let (_, analytic) = run_forward(&c, &x);
    let jac = numeric_jacobian(&c, &x, 1e-5);
    let numeric = logabsdet_oracle(&jac, 8);
    assert!(
        (analytic - numeric).abs() / numeric.abs().max(1e-8) < 1e-4,
        "{analytic} vs {numeric}"
    );

    // channel grouping on [4, 1, 2] (8 dims)
    let src = ToyChannelSource::random(4, 2, 2, &mut r, 0.5);
    let part = GroupPartition::new(2, GroupAxis::Channel).unwrap();
    let c = AffineCoupling::new(&src, part, 0).unwrap();
    let x = random_tensor(&[4, 1, 2], &mut r, 1.5);
    let (_, analytic) = run_forward(&c, &x);
    let jac = numeric_jacobian(&c, &x, 1e-5);
    let numeric = logabsdet_oracle(&jac, 8);
    assert!(
        (analytic - numeric).abs() / numeric.abs().max(1e-8) < 1e-4,
        "channel: {analytic} vs {numeric}"
    );
}

#[test]
fn affine_round_trip_various_group_counts() {
    let mut r = rng(4);
    for &g in &[2usize, 4, 8] {
        let src = ToyHeightSource::random(1, 2, 1, &mut r, 0.8);
        let c = AffineCoupling::new(&src, partition_h(g), 0).unwrap();
        let x = random_tensor(&[1, g, 3], &mut r, 2.0);
        let (z, _) = run_forward(&c, &x);
        let back = run_inverse(&c, &z);
        assert!(back.max_abs_diff(&x) < 1e-6, "G={g}");
    }
}

#[test]
fn affine_fully_autoregressive_round_trip() {
    // G = dim(x): every element is its own group
    let mut r = rng(5);
    let src = ToyHeightSource::random(1, 2, 1, &mut r, 0.7);
    let c = AffineCoupling::new(&src, partition_h(16), 0).unwrap();
    let x = random_tensor(&[1, 16, 1], &mut r, 2.0);
    let (z, _) = run_forward(&c, &x);
    let back = run_inverse(&c, &z);
    assert!(back.max_abs_diff(&x) < 1e-6);
    // sequential recovery really is groupwise: z differs from x somewhere
    assert!(z.max_abs_diff(&x) > 1e-6);
}

#[test]
fn affine_group_count_must_divide_axis() {
    let src = ConstSource { arity: 2, fill: vec![0.0, 0.0] };
    let c = AffineCoupling::new(&src, partition_h(3), 0).unwrap();
    let x = Tensor::zeros(&[1, 4, 2]);
    let mut g = Graph::empty();
    let ix = g.tape.leaf(x);
    assert!(c.forward(&mut g, ix).is_err());
}

#[test]
fn affine_saturated_scale_raises_stability_error_in_inverse() {
    let src = ConstSource { arity: 2, fill: vec![0.0, 31.0] };
    let c = AffineCoupling::new(&src, partition_h(2), 0).unwrap();
    let z = Tensor::zeros(&[1, 2, 2]);
    let mut g = Graph::empty();
    assert!(matches!(
        c.inverse(&mut g, &z),
        Err(crate::Error::Stability(_))
    ));
}

// ---- spline coupling ----

fn spline_cfg() -> SplineConfig {
    SplineConfig::new(8, 3.0).unwrap()
}

#[test]
fn spline_zero_params_is_identity() {
    let cfg = spline_cfg();
    let src = ConstSource { arity: cfg.arity(), fill: vec![0.0; cfg.arity()] };
    let c = RqSplineCoupling::new(&src, partition_h(2), 0, cfg).unwrap();
    let mut r = rng(6);
    let x = random_tensor(&[1, 2, 6], &mut r, 2.9);
    let (z, ld) = run_forward(&c, &x);
    assert!(z.max_abs_diff(&x) < 1e-9);
    assert!(ld.abs() < 1e-9);
}

#[test]
fn spline_identity_outside_tail_bound() {
    let cfg = spline_cfg();
    let mut r = rng(7);
    let params = random_tensor(&[cfg.arity(), 2, 3], &mut r, 1.0);
    let src = FixedSource { arity: cfg.arity(), params };
    let c = RqSplineCoupling::new(&src, partition_h(2), 0, cfg).unwrap();
    let mut x = Tensor::zeros(&[1, 2, 3]);
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        *v = if i % 2 == 0 { 4.5 } else { -3.2 };
    }
    let (z, ld) = run_forward(&c, &x);
    assert_eq!(z.data(), x.data());
    assert_eq!(ld, 0.0);
}

#[test]
fn spline_round_trip_and_derivative_oracle() {
    let cfg = spline_cfg();
    let mut r = rng(8);
    let src = ToyHeightSource::random(1, cfg.arity(), 1, &mut r, 0.5);
    let part = partition_h(4);
    let c = RqSplineCoupling::new(&src, part, 0, cfg).unwrap();

    // 200 random inputs across several tensors
    for trial in 0..10 {
        let x = random_tensor(&[1, 4, 5], &mut r, 4.0); // some land outside tails
        let (z, analytic_ld) = run_forward(&c, &x);
        let back = run_inverse(&c, &z);
        assert!(back.max_abs_diff(&x) < 1e-8, "trial {trial}");

        // diagonal of the Jacobian: per-element derivative holding the causal
        // context fixed (earlier groups unchanged by a same-element nudge)
        let mut sum_log = 0.0;
        let eps = 1e-6;
        for e in 0..x.numel() {
            let mut plus = x.clone();
            plus.data_mut()[e] += eps;
            let mut minus = x.clone();
            minus.data_mut()[e] -= eps;
            let (zp, _) = run_forward(&c, &plus);
            let (zm, _) = run_forward(&c, &minus);
            let d = (zp.data()[e] - zm.data()[e]) / (2.0 * eps);
            sum_log += d.ln();
        }
        let rel = (analytic_ld - sum_log).abs() / sum_log.abs().max(1e-8);
        assert!(rel < 1e-5, "trial {trial}: {analytic_ld} vs {sum_log}");
    }
}

#[test]
fn spline_log_det_matches_dense_jacobian() {
    let cfg = SplineConfig::new(4, 3.0).unwrap();
    let mut r = rng(9);
    let src = ToyHeightSource::random(1, cfg.arity(), 1, &mut r, 0.4);
    let c = RqSplineCoupling::new(&src, partition_h(3), 0, cfg).unwrap();
    let x = random_tensor(&[1, 3, 2], &mut r, 2.0);
    let (_, analytic) = run_forward(&c, &x);
    let jac = numeric_jacobian(&c, &x, 1e-6);
    let numeric = logabsdet_oracle(&jac, 6);
    assert!(
        (analytic - numeric).abs() / numeric.abs().max(1e-8) < 1e-4,
        "{analytic} vs {numeric}"
    );
}

#[test]
fn spline_continuity_at_knots_and_tails() {
    let cfg = spline_cfg();
    let mut r = rng(10);
    // single-element layout so we can probe exact knot positions
    let params = random_tensor(&[cfg.arity(), 2, 1], &mut r, 1.2);
    let src = FixedSource { arity: cfg.arity(), params: params.clone() };
    let part = partition_h(2);
    let c = RqSplineCoupling::new(&src, part, 0, cfg).unwrap();

    // recover the knot geometry through the shared normalization path
    let mut g = Graph::empty();
    let x0 = g.tape.leaf(Tensor::zeros(&[1, 2, 1]));
    let pid = src.params(&mut g, x0, 0).unwrap();
    let knots = super::spline::knot_positions_for_test(&mut g, pid, 1, &cfg).unwrap();

    let eval = |v: f64, elem: usize| -> f64 {
        let mut x = Tensor::zeros(&[1, 2, 1]);
        x.data_mut()[elem] = v;
        let (z, _) = run_forward(&c, &x);
        z.data()[elem]
    };
    let eps = 1e-7;
    for elem in 0..2 {
        let row = &knots[elem * (cfg.bins + 1)..(elem + 1) * (cfg.bins + 1)];
        for &knot in row {
            let lo = eval(knot - eps, elem);
            let hi = eval(knot + eps, elem);
            // local derivative bound: numeric slope around the knot
            let slope = ((hi - lo) / (2.0 * eps)).abs().max(1.0);
            assert!(
                (hi - lo).abs() < 10.0 * eps * slope,
                "discontinuity at knot {knot}: {lo} vs {hi}"
            );
        }
        for &tail in &[-cfg.tail_bound, cfg.tail_bound] {
            let lo = eval(tail - eps, elem);
            let hi = eval(tail + eps, elem);
            let slope = ((hi - lo) / (2.0 * eps)).abs().max(1.0);
            assert!((hi - lo).abs() < 10.0 * eps * slope);
        }
    }
}

// ---- actnorm ----

#[test]
fn actnorm_unit_params_is_identity() {
    let mut store = crate::params::ParamStore::new();
    store.insert("a.scale", Tensor::full(&[3], 1.0));
    store.insert("a.bias", Tensor::zeros(&[3]));
    let an = Actnorm::new("a");
    let mut g = Graph::from_store(&store, false);
    let mut r = rng(11);
    let x = random_tensor(&[3, 2, 2], &mut r, 1.0);
    let ix = g.tape.leaf(x.clone());
    let (z, ld) = an.forward(&mut g, ix).unwrap();
    assert_eq!(g.tape.value(z).data(), x.data());
    assert_eq!(g.tape.value(ld).item().unwrap(), 0.0);
}

#[test]
fn actnorm_data_dependent_init_normalizes() {
    let mut r = rng(12);
    let mut batch = random_tensor(&[3, 8, 32], &mut r, 1.0);
    for (i, v) in batch.data_mut().iter_mut().enumerate() {
        *v = *v * (1.0 + i as f64 * 1e-3) + 0.3; // uneven spread per channel
    }
    let mut store = crate::params::ParamStore::new();
    actnorm_init(&mut store, "a", &batch).unwrap();
    let an = Actnorm::new("a");
    let mut g = Graph::from_store(&store, false);
    let ix = g.tape.leaf(batch);
    let (z, _) = an.forward(&mut g, ix).unwrap();
    let zv = g.tape.value(z);
    let hw = 8 * 32;
    for ch in 0..3 {
        let slice = &zv.data()[ch * hw..(ch + 1) * hw];
        let mean = slice.iter().sum::<f64>() / hw as f64;
        let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-6, "var {var}");
    }
}

#[test]
fn actnorm_log_det_symmetry_case() {
    // scale (2, 1, 0.5) on a 3x4x4 input: 16*(ln2 + 0 + ln .5) = 0
    let mut store = crate::params::ParamStore::new();
    store.insert("a.scale", Tensor::from_vec(vec![2.0, 1.0, 0.5]));
    store.insert("a.bias", Tensor::zeros(&[3]));
    let an = Actnorm::new("a");
    let mut g = Graph::from_store(&store, false);
    let mut r = rng(13);
    let x = random_tensor(&[3, 4, 4], &mut r, 1.0);
    let ix = g.tape.leaf(x.clone());
    let (z, ld) = an.forward(&mut g, ix).unwrap();
    assert!(g.tape.value(ld).item().unwrap().abs() < 1e-12);
    // direct sum oracle
    let manual: f64 = 16.0 * (2.0f64.ln() + 1.0f64.ln() + 0.5f64.ln());
    assert!(manual.abs() < 1e-12);
    // inverse round trip
    let zt = g.tape.detach(z);
    let back = an.inverse(&mut g, &zt).unwrap();
    assert!(back.max_abs_diff(&x) < 1e-12);
}

// ---- permutations ----

#[test]
fn reverse_twice_is_identity() {
    for axis in [GroupAxis::Height, GroupAxis::Channel] {
        let part = GroupPartition::new(4, axis).unwrap();
        let rev = ReverseGroups::new(part);
        let mut r = rng(14);
        let x = random_tensor(&[4, 4, 3], &mut r, 2.0);
        let (z, ld) = run_forward(&rev, &x);
        assert_eq!(ld, 0.0);
        assert!(z.data() != x.data());
        let (back, _) = run_forward(&rev, &z);
        for (a, b) in x.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // inverse agrees with the involution
        let inv = run_inverse(&rev, &z);
        assert_eq!(inv.data(), back.data());
    }
}

#[test]
fn invertible_mix_identity_weight() {
    let mut store = crate::params::ParamStore::new();
    let mut eye = vec![0.0; 16];
    for i in 0..4 {
        eye[i * 4 + i] = 1.0;
    }
    store.insert("m.w", Tensor::new(vec![4, 4], eye).unwrap());
    let mix = InvertibleMix::new("m.w");
    let mut g = Graph::from_store(&store, false);
    let mut r = rng(15);
    let x = random_tensor(&[4, 3, 3], &mut r, 1.0);
    let ix = g.tape.leaf(x.clone());
    let (z, ld) = mix.forward(&mut g, ix).unwrap();
    assert_eq!(g.tape.value(z).data(), x.data());
    assert_eq!(g.tape.value(ld).item().unwrap(), 0.0);
}

#[test]
fn invertible_mix_log_det_matches_lu_oracle() {
    let mut r = rng(16);
    // well-conditioned: diagonally dominant
    let mut w = random_tensor(&[4, 4], &mut r, 0.3);
    for i in 0..4 {
        w.data_mut()[i * 4 + i] += 2.0;
    }
    let mut store = crate::params::ParamStore::new();
    store.insert("m.w", w.clone());
    let mix = InvertibleMix::new("m.w");
    let mut g = Graph::from_store(&store, false);
    let x = random_tensor(&[4, 3, 3], &mut r, 1.0);
    let ix = g.tape.leaf(x.clone());
    let (z, ld) = mix.forward(&mut g, ix).unwrap();
    let expect = 9.0 * logabsdet_oracle(w.data(), 4);
    assert!((g.tape.value(ld).item().unwrap() - expect).abs() < 1e-10);
    // round trip
    let zt = g.tape.detach(z);
    let back = mix.inverse(&mut g, &zt).unwrap();
    assert!(back.max_abs_diff(&x) < 1e-10);
}

#[test]
fn invertible_mix_rejects_singular_weight() {
    let mut store = crate::params::ParamStore::new();
    store.insert("m.w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 2.0, 4.0]).unwrap());
    let mix = InvertibleMix::new("m.w");
    let mut g = Graph::from_store(&store, false);
    let x = g.tape.leaf(Tensor::zeros(&[2, 2, 2]));
    assert!(matches!(
        mix.forward(&mut g, x),
        Err(crate::Error::Invertibility(_))
    ));
}

// ---- squeeze / factor-out ----

#[test]
fn squeeze_unsqueeze_bit_identical() {
    let sq = Squeeze;
    let mut r = rng(17);
    let x = random_tensor(&[3, 4, 6], &mut r, 2.0);
    let (z, ld) = run_forward(&sq, &x);
    assert_eq!(z.shape(), &[12, 2, 3]);
    assert_eq!(ld, 0.0);
    let back = run_inverse(&sq, &z);
    for (a, b) in x.data().iter().zip(back.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn squeeze_subpixel_ordering() {
    // [[a, b], [c, d]] -> channels (a, b, c, d): dy-major, dx-minor
    let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let (z, _) = run_forward(&Squeeze, &x);
    assert_eq!(z.shape(), &[4, 1, 1]);
    assert_eq!(z.data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn squeeze_rejects_odd_spatial_dims() {
    let mut g = Graph::empty();
    let x = g.tape.leaf(Tensor::zeros(&[1, 3, 4]));
    assert!(matches!(
        Squeeze.forward(&mut g, x),
        Err(crate::Error::Dimension(_))
    ));
}

#[test]
fn factor_out_prior_score_matches_monte_carlo() {
    use rand_distr::{Distribution, StandardNormal};
    // factored half of a standard-normal input scores near the analytic
    // expectation -d/2 (1 + ln 2pi) per tensor
    let comp = Composition::new(vec![Step::FactorOut]);
    let mut r = rng(18);
    let d = 4.0; // factored half is [1, 2, 2]
    let n_samples = 10_000;
    let mut acc = 0.0;
    let mut acc2 = 0.0;
    for _ in 0..n_samples {
        let data: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut r)).collect();
        let x = Tensor::new(vec![2, 2, 2], data).unwrap();
        let mut g = Graph::empty();
        let ix = g.tape.leaf(x);
        let pass = comp.forward(&mut g, ix).unwrap();
        assert_eq!(pass.factored.len(), 1);
        let lp = standard_normal_logp(&mut g, pass.factored[0]).unwrap();
        let v = g.tape.value(lp).item().unwrap();
        acc += v;
        acc2 += v * v;
    }
    let mean = acc / n_samples as f64;
    let var = acc2 / n_samples as f64 - mean * mean;
    let stderr = (var / n_samples as f64).sqrt();
    let analytic = -0.5 * d * (1.0 + (2.0 * std::f64::consts::PI).ln());
    assert!(
        (mean - analytic).abs() < 4.0 * stderr + 1e-6,
        "mean {mean} vs analytic {analytic} (stderr {stderr})"
    );
}

// ---- composition ----

#[test]
fn prior_only_log_likelihood_at_origin() {
    let comp = Composition::new(vec![]);
    let mut g = Graph::empty();
    let d = 6;
    let x = g.tape.leaf(Tensor::zeros(&[1, 2, 3]));
    let ll = comp.log_likelihood(&mut g, x).unwrap();
    let expect = -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
    assert!((g.tape.value(ll).item().unwrap() - expect).abs() < 1e-12);
}

#[test]
fn identity_coupling_matches_prior_only() {
    let src = ConstSource { arity: 2, fill: vec![0.0, 0.0] };
    let part = partition_h(2);
    let c = AffineCoupling::new(&src, part, 0).unwrap();
    let comp = Composition::new(vec![Step::Map(Box::new(c))]);
    let mut r = rng(19);
    let x = random_tensor(&[1, 2, 3], &mut r, 1.5);
    let mut g = Graph::empty();
    let ix = g.tape.leaf(x.clone());
    let ll_id = comp.log_likelihood(&mut g, ix).unwrap();
    let ll = g.tape.value(ll_id).item().unwrap();
    let expect = normal_logp_value(x.data());
    assert!((ll - expect).abs() < 1e-12);
}

#[test]
fn two_flow_log_likelihood_matches_full_jacobian_oracle() {
    let mut r = rng(20);
    let part = partition_h(2);
    let src1 = ToyHeightSource::random(1, 2, 1, &mut r, 0.6);
    let src2 = ToyHeightSource::random(1, 2, 1, &mut r, 0.6);
    let c1 = AffineCoupling::new(&src1, part, 0).unwrap();
    let rev = ReverseGroups::new(part);
    let c2 = AffineCoupling::new(&src2, part, 1).unwrap();
    let comp = Composition::new(vec![
        Step::Map(Box::new(c1)),
        Step::Map(Box::new(rev)),
        Step::Map(Box::new(c2)),
    ]);
    let x = random_tensor(&[1, 2, 2], &mut r, 1.2);

    let mut g = Graph::empty();
    let ix = g.tape.leaf(x.clone());
    let ll_id = comp.log_likelihood(&mut g, ix).unwrap();
    let ll = g.tape.value(ll_id).item().unwrap();

    // oracle: numerically assemble the full 4x4 Jacobian of the composition
    let fwd = |pt: &Tensor| -> Tensor {
        let mut g = Graph::empty();
        let ix = g.tape.leaf(pt.clone());
        let pass = comp.forward(&mut g, ix).unwrap();
        g.tape.detach(pass.z)
    };
    let n = 4;
    let eps = 1e-5;
    let mut jac = vec![0.0; n * n];
    for col in 0..n {
        let mut plus = x.clone();
        plus.data_mut()[col] += eps;
        let mut minus = x.clone();
        minus.data_mut()[col] -= eps;
        let (zp, zm) = (fwd(&plus), fwd(&minus));
        for row in 0..n {
            jac[row * n + col] = (zp.data()[row] - zm.data()[row]) / (2.0 * eps);
        }
    }
    let z = fwd(&x);
    let oracle = normal_logp_value(z.data()) + logabsdet_oracle(&jac, n);
    assert!(
        (ll - oracle).abs() / oracle.abs().max(1e-8) < 1e-4,
        "{ll} vs {oracle}"
    );
}

#[test]
fn composition_log_det_is_sum_of_parts() {
    let mut r = rng(21);
    let part = partition_h(2);
    let src1 = ToyHeightSource::random(1, 2, 1, &mut r, 0.5);
    let src2 = ToyHeightSource::random(1, 2, 1, &mut r, 0.5);
    let x = random_tensor(&[1, 2, 4], &mut r, 1.0);

    let c1 = AffineCoupling::new(&src1, part, 0).unwrap();
    let c2 = AffineCoupling::new(&src2, part, 1).unwrap();

    // individual applications
    let (z1, ld1) = run_forward(&c1, &x);
    let (_, ld2) = run_forward(&c2, &z1);

    let comp = Composition::new(vec![Step::Map(Box::new(c1)), Step::Map(Box::new(c2))]);
    let mut g = Graph::empty();
    let ix = g.tape.leaf(x);
    let pass = comp.forward(&mut g, ix).unwrap();
    let total = g.tape.value(pass.log_det).item().unwrap();
    assert_eq!(total, ld1 + ld2);
}

#[test]
fn composition_round_trip_with_multiscale_blocks() {
    let mut r = rng(22);
    let part = GroupPartition::new(2, GroupAxis::Channel).unwrap();
    let src = ToyChannelSource::random(4, 2, 2, &mut r, 0.4);

    let mut store = crate::params::ParamStore::new();
    let mut w = random_tensor(&[4, 4], &mut r, 0.2);
    for i in 0..4 {
        w.data_mut()[i * 4 + i] += 1.5;
    }
    store.insert("mix.w", w);
    store.insert("an.scale", Tensor::from_vec(vec![1.2, 0.7, 1.0, 2.0]));
    store.insert("an.bias", Tensor::from_vec(vec![0.1, -0.2, 0.0, 0.4]));

    let comp = Composition::new(vec![
        Step::Map(Box::new(Squeeze)),
        Step::Map(Box::new(Actnorm::new("an"))),
        Step::Map(Box::new(InvertibleMix::new("mix.w"))),
        Step::Map(Box::new(AffineCoupling::new(&src, part, 0).unwrap())),
        Step::FactorOut,
    ]);

    let x = random_tensor(&[1, 4, 4], &mut r, 1.0);
    let mut g = Graph::from_store(&store, false);
    let ix = g.tape.leaf(x.clone());
    let pass = comp.forward(&mut g, ix).unwrap();
    let z = g.tape.detach(pass.z);
    let factored: Vec<Tensor> = pass.factored.iter().map(|f| g.tape.detach(*f)).collect();

    let mut g2 = Graph::from_store(&store, false);
    let back = comp.inverse(&mut g2, &z, &factored).unwrap();
    assert!(back.max_abs_diff(&x) < 1e-6);
}
