//! Small feed-forward networks with hand-rolled backpropagation.
//!
//! Both the policy and the value function use the same trunk: two
//! hidden layers of `Linear -> LayerNorm -> tanh` followed by a linear
//! head. Parameters flatten into a single vector (fixed order), which
//! keeps the optimizer, gradient clipping, finiteness checks, snapshots,
//! and finite-difference verification all trivial.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Epsilon inside the layer-norm variance root.
pub const LN_EPS: f64 = 1e-5;
/// Learned log standard deviations are projected into this interval
/// after every optimizer step.
pub const LOG_STD_MIN: f64 = -3.0;
pub const LOG_STD_MAX: f64 = 0.0;
const LOG_STD_INIT: f64 = -0.7;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: DVector<f64>,
    pub bias: DVector<f64>,
}

/// Orthogonal weight init (gaussian -> QR, sign-fixed by diag(R)),
/// the standard recipe for small policy-gradient networks.
fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    let tall = rows >= cols;
    let (n, m) = if tall { (rows, cols) } else { (cols, rows) };
    let g = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let (q, r) = g.qr().unpack();
    let mut q = q.columns(0, m).into_owned();
    for j in 0..m {
        if r[(j, j)] < 0.0 {
            for i in 0..n {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    let q = if tall { q } else { q.transpose() };
    q * gain
}

impl Linear {
    fn new(out: usize, inp: usize, gain: f64, rng: &mut impl Rng) -> Self {
        Linear { w: orthogonal(out, inp, gain, rng), b: DVector::zeros(out) }
    }
}

impl LayerNorm {
    fn new(dim: usize) -> Self {
        LayerNorm { gain: DVector::from_element(dim, 1.0), bias: DVector::zeros(dim) }
    }

    /// Returns (normalized input before gain/bias, reciprocal std).
    fn normalize(&self, z: &DVector<f64>) -> (DVector<f64>, f64) {
        let mean = z.mean();
        let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / z.len() as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        ((z.add_scalar(-mean)) * rstd, rstd)
    }
}

/// Two-hidden-layer trunk with a linear head.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub n1: LayerNorm,
    pub l2: Linear,
    pub n2: LayerNorm,
    pub head: Linear,
}

/// Cached activations from one forward pass, enough to backpropagate.
pub struct Trace {
    x: DVector<f64>,
    xhat1: DVector<f64>,
    rstd1: f64,
    h1: DVector<f64>,
    xhat2: DVector<f64>,
    rstd2: f64,
    h2: DVector<f64>,
}

/// Parameter gradients, same shapes and flattening order as [`Mlp`].
#[derive(Clone, Debug)]
pub struct MlpGrads {
    pub l1w: DMatrix<f64>,
    pub l1b: DVector<f64>,
    pub n1g: DVector<f64>,
    pub n1b: DVector<f64>,
    pub l2w: DMatrix<f64>,
    pub l2b: DVector<f64>,
    pub n2g: DVector<f64>,
    pub n2b: DVector<f64>,
    pub hw: DMatrix<f64>,
    pub hb: DVector<f64>,
}

impl Mlp {
    pub fn new(inp: usize, hidden: usize, out: usize, head_gain: f64, rng: &mut impl Rng) -> Self {
        let gain = 2.0_f64.sqrt();
        Mlp {
            l1: Linear::new(hidden, inp, gain, rng),
            n1: LayerNorm::new(hidden),
            l2: Linear::new(hidden, hidden, gain, rng),
            n2: LayerNorm::new(hidden),
            head: Linear::new(out, hidden, head_gain, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.l1.w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.head.w.nrows()
    }

    pub fn forward(&self, x: &DVector<f64>) -> (DVector<f64>, Trace) {
        let z1 = &self.l1.w * x + &self.l1.b;
        let (xhat1, rstd1) = self.n1.normalize(&z1);
        let h1 = (xhat1.component_mul(&self.n1.gain) + &self.n1.bias).map(f64::tanh);
        let z2 = &self.l2.w * &h1 + &self.l2.b;
        let (xhat2, rstd2) = self.n2.normalize(&z2);
        let h2 = (xhat2.component_mul(&self.n2.gain) + &self.n2.bias).map(f64::tanh);
        let out = &self.head.w * &h2 + &self.head.b;
        (out, Trace { x: x.clone(), xhat1, rstd1, h1, xhat2, rstd2, h2 })
    }

    pub fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        self.forward(x).0
    }

    /// Accumulates parameter gradients of `dL/dout` into `grads`.
    pub fn backward_into(&self, t: &Trace, dout: &DVector<f64>, grads: &mut MlpGrads) {
        grads.hw += dout * t.h2.transpose();
        grads.hb += dout;
        let dh2 = self.head.w.transpose() * dout;

        let dz2 = ln_tanh_backward(&dh2, &t.h2, &t.xhat2, t.rstd2, &self.n2, &mut grads.n2g, &mut grads.n2b);
        grads.l2w += &dz2 * t.h1.transpose();
        grads.l2b += &dz2;
        let dh1 = self.l2.w.transpose() * dz2;

        let dz1 = ln_tanh_backward(&dh1, &t.h1, &t.xhat1, t.rstd1, &self.n1, &mut grads.n1g, &mut grads.n1b);
        grads.l1w += &dz1 * t.x.transpose();
        grads.l1b += dz1;
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            l1w: DMatrix::zeros(self.l1.w.nrows(), self.l1.w.ncols()),
            l1b: DVector::zeros(self.l1.b.len()),
            n1g: DVector::zeros(self.n1.gain.len()),
            n1b: DVector::zeros(self.n1.bias.len()),
            l2w: DMatrix::zeros(self.l2.w.nrows(), self.l2.w.ncols()),
            l2b: DVector::zeros(self.l2.b.len()),
            n2g: DVector::zeros(self.n2.gain.len()),
            n2b: DVector::zeros(self.n2.bias.len()),
            hw: DMatrix::zeros(self.head.w.nrows(), self.head.w.ncols()),
            hb: DVector::zeros(self.head.b.len()),
        }
    }

    pub fn n_params(&self) -> usize {
        self.l1.w.len()
            + self.l1.b.len()
            + 2 * self.n1.gain.len()
            + self.l2.w.len()
            + self.l2.b.len()
            + 2 * self.n2.gain.len()
            + self.head.w.len()
            + self.head.b.len()
    }

    pub fn flat(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for part in self.parts() {
            out.extend_from_slice(part);
        }
        DVector::from_vec(out)
    }

    pub fn set_flat(&mut self, flat: &DVector<f64>) {
        assert_eq!(flat.len(), self.n_params(), "flat parameter length mismatch");
        let mut offset = 0;
        for part in self.parts_mut() {
            part.copy_from_slice(&flat.as_slice()[offset..offset + part.len()]);
            offset += part.len();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.parts().into_iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    fn parts(&self) -> [&[f64]; 10] {
        [
            self.l1.w.as_slice(),
            self.l1.b.as_slice(),
            self.n1.gain.as_slice(),
            self.n1.bias.as_slice(),
            self.l2.w.as_slice(),
            self.l2.b.as_slice(),
            self.n2.gain.as_slice(),
            self.n2.bias.as_slice(),
            self.head.w.as_slice(),
            self.head.b.as_slice(),
        ]
    }

    fn parts_mut(&mut self) -> [&mut [f64]; 10] {
        [
            self.l1.w.as_mut_slice(),
            self.l1.b.as_mut_slice(),
            self.n1.gain.as_mut_slice(),
            self.n1.bias.as_mut_slice(),
            self.l2.w.as_mut_slice(),
            self.l2.b.as_mut_slice(),
            self.n2.gain.as_mut_slice(),
            self.n2.bias.as_mut_slice(),
            self.head.w.as_mut_slice(),
            self.head.b.as_mut_slice(),
        ]
    }
}

/// Backward through gain/bias + tanh + layer normalization in one step.
/// `h` is the tanh output, `xhat` the pre-gain normalized input.
/// Returns dL/dz for the pre-normalization activations.
fn ln_tanh_backward(
    dh: &DVector<f64>,
    h: &DVector<f64>,
    xhat: &DVector<f64>,
    rstd: f64,
    ln: &LayerNorm,
    dgain: &mut DVector<f64>,
    dbias: &mut DVector<f64>,
) -> DVector<f64> {
    // tanh'(y) = 1 - h^2
    let dy = DVector::from_fn(dh.len(), |i, _| dh[i] * (1.0 - h[i] * h[i]));
    *dgain += dy.component_mul(xhat);
    *dbias += &dy;
    let dxhat = dy.component_mul(&ln.gain);
    let m1 = dxhat.mean();
    let m2 = dxhat.component_mul(xhat).mean();
    DVector::from_fn(dxhat.len(), |i, _| rstd * (dxhat[i] - m1 - xhat[i] * m2))
}

impl MlpGrads {
    pub fn flat(&self) -> DVector<f64> {
        let parts: [&[f64]; 10] = [
            self.l1w.as_slice(),
            self.l1b.as_slice(),
            self.n1g.as_slice(),
            self.n1b.as_slice(),
            self.l2w.as_slice(),
            self.l2b.as_slice(),
            self.n2g.as_slice(),
            self.n2b.as_slice(),
            self.hw.as_slice(),
            self.hb.as_slice(),
        ];
        let mut out = Vec::new();
        for part in parts {
            out.extend_from_slice(part);
        }
        DVector::from_vec(out)
    }
}

/// Gaussian policy: trunk output squashed by tanh and scaled to the
/// velocity bound gives the mean; a state-independent learned log-std
/// vector gives the spread.
#[derive(Clone, Debug)]
pub struct PolicyNet {
    pub mlp: Mlp,
    pub log_std: DVector<f64>,
    pub action_scale: f64,
}

impl PolicyNet {
    pub fn new(obs_dim: usize, hidden: usize, act_dim: usize, action_scale: f64, rng: &mut impl Rng) -> Self {
        PolicyNet {
            mlp: Mlp::new(obs_dim, hidden, act_dim, 0.01, rng),
            log_std: DVector::from_element(act_dim, LOG_STD_INIT),
            action_scale,
        }
    }

    pub fn act_dim(&self) -> usize {
        self.log_std.len()
    }

    /// Mean action plus the raw head output and trace for backprop.
    pub fn forward_mean(&self, obs: &DVector<f64>) -> (DVector<f64>, DVector<f64>, Trace) {
        let (u, trace) = self.mlp.forward(obs);
        let mean = u.map(|v| self.action_scale * v.tanh());
        (mean, u, trace)
    }

    pub fn mean_action(&self, obs: &DVector<f64>) -> DVector<f64> {
        self.mlp.output(obs).map(|v| self.action_scale * v.tanh())
    }

    /// Draws a ~ N(mean, diag(std^2)); returns (action, log prob).
    pub fn sample_action(&self, obs: &DVector<f64>, rng: &mut impl Rng) -> (DVector<f64>, f64) {
        let mean = self.mean_action(obs);
        let a = DVector::from_fn(mean.len(), |i, _| {
            mean[i] + self.log_std[i].exp() * rng.sample::<f64, _>(StandardNormal)
        });
        let logp = self.log_prob(&mean, &a);
        (a, logp)
    }

    pub fn log_prob(&self, mean: &DVector<f64>, action: &DVector<f64>) -> f64 {
        let mut lp = 0.0;
        for i in 0..mean.len() {
            let std = self.log_std[i].exp();
            let z = (action[i] - mean[i]) / std;
            lp += -0.5 * z * z - self.log_std[i] - 0.5 * (2.0 * std::f64::consts::PI).ln();
        }
        lp
    }

    /// Mean per-dimension entropy of the diagonal gaussian.
    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|ls| ls + 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln()).sum()
    }

    pub fn n_params(&self) -> usize {
        self.mlp.n_params() + self.log_std.len()
    }

    pub fn flat(&self) -> DVector<f64> {
        let mut v = self.mlp.flat().as_slice().to_vec();
        v.extend_from_slice(self.log_std.as_slice());
        DVector::from_vec(v)
    }

    pub fn set_flat(&mut self, flat: &DVector<f64>) {
        assert_eq!(flat.len(), self.n_params(), "flat parameter length mismatch");
        let split = self.mlp.n_params();
        self.mlp.set_flat(&DVector::from_column_slice(&flat.as_slice()[..split]));
        self.log_std.copy_from_slice(&flat.as_slice()[split..]);
    }

    /// Projects log-std back into its bounds; run after optimizer steps.
    pub fn clamp_log_std(&mut self) {
        for v in self.log_std.iter_mut() {
            *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.mlp.all_finite() && self.log_std.iter().all(|v| v.is_finite())
    }
}

/// State-value network: same trunk, scalar head.
#[derive(Clone, Debug)]
pub struct ValueNet {
    pub mlp: Mlp,
}

impl ValueNet {
    pub fn new(obs_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        ValueNet { mlp: Mlp::new(obs_dim, hidden, 1, 1.0, rng) }
    }

    pub fn value(&self, obs: &DVector<f64>) -> f64 {
        self.mlp.output(obs)[0]
    }

    pub fn forward(&self, obs: &DVector<f64>) -> (f64, Trace) {
        let (out, trace) = self.mlp.forward(obs);
        (out[0], trace)
    }

    pub fn all_finite(&self) -> bool {
        self.mlp.all_finite()
    }
}

/// Scales `g` so its euclidean norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(g: &mut DVector<f64>, max_norm: f64) -> f64 {
    let norm = g.norm();
    if norm > max_norm && norm > 0.0 {
        *g *= max_norm / norm;
    }
    norm
}

/// Adam over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: DVector<f64>,
    v: DVector<f64>,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: DVector::zeros(n_params),
            v: DVector::zeros(n_params),
        }
    }

    pub fn step(&mut self, params: &mut DVector<f64>, grads: &DVector<f64>) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_init_has_orthonormal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = orthogonal(64, 12, 1.0, &mut rng);
        let gram = w.transpose() * &w;
        for i in 0..12 {
            for j in 0..12 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((gram[(i, j)] - expect).abs() < 1e-10);
            }
        }
        // Wide matrices get orthonormal rows instead.
        let w = orthogonal(3, 8, 1.0, &mut rng);
        let gram = &w * w.transpose();
        for i in 0..3 {
            assert!((gram[(i, i)] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn flat_round_trip_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = Mlp::new(5, 16, 3, 0.01, &mut rng);
        let flat = net.flat();
        assert_eq!(flat.len(), net.n_params());
        let mut bumped = flat.clone();
        bumped[7] += 0.5;
        net.set_flat(&bumped);
        assert_eq!(net.flat(), bumped);
        net.set_flat(&flat);
        assert_eq!(net.flat(), flat);
    }

    #[test]
    fn backward_matches_finite_differences() {
        // Loss = c . out for a random fixed c exercises every layer,
        // including both layer norms.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(3, 8, 2, 0.5, &mut rng);
        let x = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
        let c = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0_f64));

        let (_, trace) = net.forward(&x);
        let mut grads = net.zero_grads();
        net.backward_into(&trace, &c, &mut grads);
        let analytic = grads.flat();

        let flat = net.flat();
        let h = 1e-6;
        for k in 0..flat.len() {
            let mut net_p = net.clone();
            let mut bumped = flat.clone();
            bumped[k] += h;
            net_p.set_flat(&bumped);
            let up = c.dot(&net_p.output(&x));
            bumped[k] -= 2.0 * h;
            net_p.set_flat(&bumped);
            let down = c.dot(&net_p.output(&x));
            let numeric = (up - down) / (2.0 * h);
            let denom = analytic[k].abs().max(numeric.abs()).max(1e-8);
            assert!(
                ((analytic[k] - numeric) / denom).abs() < 1e-5,
                "param {k}: analytic {} vs numeric {numeric}",
                analytic[k]
            );
        }
    }

    #[test]
    fn policy_log_prob_matches_gaussian_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let policy = PolicyNet::new(4, 8, 2, 1.0, &mut rng);
        let obs = DVector::from_element(4, 0.3);
        let mean = policy.mean_action(&obs);
        // At the mean the density is the normalization constant alone.
        let lp = policy.log_prob(&mean, &mean);
        let expect: f64 = policy
            .log_std
            .iter()
            .map(|ls| -ls - 0.5 * (2.0 * std::f64::consts::PI).ln())
            .sum();
        assert!((lp - expect).abs() < 1e-12);
        // Sampled actions have finite log-probs and respect no clamp.
        let (a, lp) = policy.sample_action(&obs, &mut rng);
        assert!(lp.is_finite());
        assert!((policy.log_prob(&mean, &a) - lp).abs() < 1e-12);
    }

    #[test]
    fn clamp_log_std_projects_into_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut policy = PolicyNet::new(3, 8, 2, 1.0, &mut rng);
        policy.log_std[0] = 1.7;
        policy.log_std[1] = -9.0;
        policy.clamp_log_std();
        assert_eq!(policy.log_std[0], LOG_STD_MAX);
        assert_eq!(policy.log_std[1], LOG_STD_MIN);
    }

    #[test]
    fn adam_with_zero_grads_moves_nothing() {
        let mut params = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let before = params.clone();
        let mut opt = Adam::new(3, 1e-3);
        opt.step(&mut params, &DVector::zeros(3));
        assert_eq!(params, before);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // min (p - 3)^2: gradient 2(p - 3).
        let mut params = DVector::from_vec(vec![0.0]);
        let mut opt = Adam::new(1, 0.1);
        for _ in 0..500 {
            let grads = DVector::from_vec(vec![2.0 * (params[0] - 3.0)]);
            opt.step(&mut params, &grads);
        }
        assert!((params[0] - 3.0).abs() < 0.05, "ended at {}", params[0]);
    }

    #[test]
    fn global_norm_clip_caps_the_norm() {
        let mut g = DVector::from_vec(vec![3.0, 4.0]);
        let pre = clip_global_norm(&mut g, 0.5);
        assert!((pre - 5.0).abs() < 1e-12);
        assert!((g.norm() - 0.5).abs() < 1e-12);
        // Below the cap nothing changes.
        let mut g = DVector::from_vec(vec![0.1, 0.2]);
        let pre = clip_global_norm(&mut g, 0.5);
        assert_eq!(g, DVector::from_vec(vec![0.1, 0.2]));
        assert!(pre < 0.5);
    }

    #[test]
    fn finiteness_check_detects_poison() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut net = Mlp::new(3, 8, 1, 1.0, &mut rng);
        assert!(net.all_finite());
        net.l2.w[(4, 4)] = f64::NAN;
        assert!(!net.all_finite());
    }
}
