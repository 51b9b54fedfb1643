//! Contrastive successor representations.
//!
//! Three encoders: `phi(s, a^R, a^H)`, `phi'(s, a^R)` and a shared future
//! encoder `psi(g)`. Both state encoders are trained against the same `psi`
//! with the symmetrized infoNCE objective, so that
//! `(phi - phi') . psi(g)` estimates `log rho(g | s, a^R, a^H) / rho(g | s, a^R)`
//! up to a constant.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::{EpisodeBuffer, FutureSample};
use crate::error::{Error, Result};
use crate::features::{Active, Featurizer};
use crate::mdp::sample_index;
use crate::nn::{Adam, Input, Mlp, MlpGrads};

/// Exponent cap of the simplified reward.
pub const SIMPLIFIED_EXP_CAP: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReprConfig {
    /// Hidden widths; empty gives linear encoders.
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub condition_on_robot: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub gamma_future: f64,
}

impl Default for ReprConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            latent_dim: 100,
            condition_on_robot: true,
            lr: 3e-4,
            batch_size: 256,
            gamma_future: 0.9,
        }
    }
}

impl ReprConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.batch_size == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("latent_dim, batch_size and hidden widths must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.gamma_future > 0.0 && self.gamma_future < 1.0) {
            return Err(Error::Config(format!("gamma_future must lie in (0,1), got {}", self.gamma_future)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReprParams {
    pub phi: Mlp,
    pub phi_prime: Mlp,
    pub psi: Mlp,
    pub latent_dim: usize,
    pub condition_on_robot: bool,
}

fn sizes(input: usize, hidden: &[usize], out: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(out);
    s
}

impl ReprParams {
    pub fn new<F: Featurizer, R: Rng + ?Sized>(feat: &F, config: &ReprConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let r = config.condition_on_robot;
        let d = config.latent_dim;
        Ok(Self {
            phi: Mlp::new(&sizes(feat.dim(true, r), &config.hidden, d), rng),
            phi_prime: Mlp::new(&sizes(feat.dim(false, r), &config.hidden, d), rng),
            psi: Mlp::new(&sizes(feat.dim(false, false), &config.hidden, d), rng),
            latent_dim: d,
            condition_on_robot: r,
        })
    }

    /// Every encoder then outputs zero, so all logits vanish.
    pub fn zero_final_layers(&mut self) {
        self.phi.zero_last_layer();
        self.phi_prime.zero_last_layer();
        self.psi.zero_last_layer();
    }

    pub fn is_finite(&self) -> bool {
        self.phi.is_finite() && self.phi_prime.is_finite() && self.psi.is_finite()
    }

    pub fn num_params(&self) -> usize {
        self.phi.num_params() + self.phi_prime.num_params() + self.psi.num_params()
    }

    fn robot(&self, a_r: usize) -> Option<usize> {
        self.condition_on_robot.then_some(a_r)
    }

    pub fn phi_features<F: Featurizer>(&self, feat: &F, s: &F::Obs, a_h: usize, a_r: usize) -> Active {
        feat.active(s, Some(a_h), self.robot(a_r))
    }

    pub fn phi_prime_features<F: Featurizer>(&self, feat: &F, s: &F::Obs, a_r: usize) -> Active {
        feat.active(s, None, self.robot(a_r))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let ck = ReprCheckpoint {
            version: CHECKPOINT_VERSION,
            manifest: ShapeManifest::of(self),
            params: self.clone(),
        };
        std::fs::write(path, serde_json::to_string(&ck)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: ReprCheckpoint = serde_json::from_str(&text)?;
        ck.check()?;
        Ok(ck.params)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Layer shapes `[(in, out), ...]` of each encoder, checked on load.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeManifest {
    pub phi: Vec<(usize, usize)>,
    pub phi_prime: Vec<(usize, usize)>,
    pub psi: Vec<(usize, usize)>,
}

pub(crate) fn layer_shapes(m: &Mlp) -> Vec<(usize, usize)> {
    m.layers.iter().map(|l| l.weight.dim()).collect()
}

pub(crate) fn check_mlp(m: &Mlp, what: &str) -> Result<()> {
    for (i, l) in m.layers.iter().enumerate() {
        if l.bias.len() != l.weight.ncols() {
            return Err(Error::Config(format!("{what} layer {i}: bias length does not match weight")));
        }
        if i > 0 && m.layers[i - 1].weight.ncols() != l.weight.nrows() {
            return Err(Error::Config(format!("{what} layer {i}: input width does not match previous layer")));
        }
    }
    if m.layers.is_empty() {
        return Err(Error::Config(format!("{what} has no layers")));
    }
    Ok(())
}

impl ShapeManifest {
    pub fn of(p: &ReprParams) -> Self {
        Self {
            phi: layer_shapes(&p.phi),
            phi_prime: layer_shapes(&p.phi_prime),
            psi: layer_shapes(&p.psi),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReprCheckpoint {
    pub version: u32,
    pub manifest: ShapeManifest,
    pub params: ReprParams,
}

impl ReprCheckpoint {
    pub fn check(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", self.version)));
        }
        let p = &self.params;
        check_mlp(&p.phi, "phi")?;
        check_mlp(&p.phi_prime, "phi_prime")?;
        check_mlp(&p.psi, "psi")?;
        if ShapeManifest::of(p) != self.manifest {
            return Err(Error::Config("checkpoint parameters do not match their shape manifest".into()));
        }
        let d = p.latent_dim;
        if [&p.phi, &p.phi_prime, &p.psi].iter().any(|m| m.output_dim() != d) {
            return Err(Error::Config("encoder output widths differ from latent_dim".into()));
        }
        Ok(())
    }
}

/// Feature rows for the three encoders; row `i` of each belongs to record `i`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContrastiveBatch {
    pub sa: Vec<Active>,
    pub s_r: Vec<Active>,
    pub g: Vec<Active>,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.sa.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sa.is_empty()
    }

    pub fn push<F: Featurizer>(&mut self, params: &ReprParams, feat: &F, s: &F::Obs, a_h: usize, a_r: usize, g: &F::Obs) {
        self.sa.push(params.phi_features(feat, s, a_h, a_r));
        self.s_r.push(params.phi_prime_features(feat, s, a_r));
        self.g.push(feat.active(g, None, None));
    }

    pub fn from_samples<F: Featurizer>(params: &ReprParams, feat: &F, samples: &[FutureSample<F::Obs>]) -> Self {
        let mut b = Self::default();
        for x in samples {
            b.push(params, feat, &x.obs, x.a_h, x.a_r, &x.future);
        }
        b
    }
}

/// Draws `n` anchors with geometric futures from the buffer.
pub fn sample_future_batch<F: Featurizer, R: Rng + ?Sized>(
    buffer: &EpisodeBuffer<F::Obs>,
    params: &ReprParams,
    feat: &F,
    n: usize,
    gamma_future: f64,
    rng: &mut R,
) -> Result<ContrastiveBatch>
where
    F::Obs: Clone,
{
    let samples = buffer.sample_futures(n, gamma_future, rng)?;
    Ok(ContrastiveBatch::from_samples(params, feat, &samples))
}

fn row_log_softmax_diag(l: &ArrayView2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = l.nrows();
    let mut diag = vec![0.0; n];
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        let row = l.row(i);
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + z.ln();
        diag[i] = l[(i, i)] - lse;
        for j in 0..n {
            p[(i, j)] = (l[(i, j)] - lse).exp();
        }
    }
    (diag, p)
}

/// Per-record terms `log softmax_j(L_ij)[i] + log softmax_j(L_ji)[i]` and
/// the gradient of their sum with respect to `L`, `2I - P_row - P_col`.
fn infonce_terms(l: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let (row_diag, p_row) = row_log_softmax_diag(&l.view());
    let (col_diag, p_col_t) = row_log_softmax_diag(&l.t());
    let n = l.nrows();
    let mut grad = -(p_row + p_col_t.t());
    for i in 0..n {
        grad[(i, i)] += 2.0;
    }
    let terms = row_diag.iter().zip(&col_diag).map(|(a, b)| a + b).collect();
    (terms, grad)
}

/// Symmetrized infoNCE, as a quantity to maximize. Always `<= 0`.
pub fn infonce_objective(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::Config(format!("infoNCE needs equal shapes, got {:?} and {:?}", x.dim(), y.dim())));
    }
    let l = x.dot(&y.t());
    Ok(infonce_terms(&l).0.iter().sum())
}

#[derive(Clone, Debug)]
pub struct ReprGrads {
    pub phi: MlpGrads,
    pub phi_prime: MlpGrads,
    pub psi: MlpGrads,
}

impl ReprGrads {
    pub fn is_finite(&self) -> bool {
        self.phi.is_finite() && self.phi_prime.is_finite() && self.psi.is_finite()
    }
}

fn sparse<'a>(m: &Mlp, rows: &'a [Active]) -> Input<'a> {
    Input::Sparse { dim: m.input_dim(), rows }
}

/// `-(infonce(phi, psi) + infonce(phi', psi)) / (4N)`: the mean negative
/// log-likelihood per classification, so all-zero logits give `log N`.
pub fn repr_loss_and_grads(params: &ReprParams, batch: &ContrastiveBatch) -> Result<(f64, ReprGrads)> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Usage("contrastive batch is empty".into()));
    }
    if batch.s_r.len() != n || batch.g.len() != n {
        return Err(Error::Config("contrastive batch columns differ in length".into()));
    }
    let (x_in, xp_in, y_in) = (
        sparse(&params.phi, &batch.sa),
        sparse(&params.phi_prime, &batch.s_r),
        sparse(&params.psi, &batch.g),
    );
    let (x, x_cache) = params.phi.forward_cached(&x_in);
    let (xp, xp_cache) = params.phi_prime.forward_cached(&xp_in);
    let (y, y_cache) = params.psi.forward_cached(&y_in);

    let (t1, g1) = infonce_terms(&x.dot(&y.t()));
    let (t2, g2) = infonce_terms(&xp.dot(&y.t()));
    let scale = -1.0 / (4.0 * n as f64);
    let loss = scale * (t1.iter().sum::<f64>() + t2.iter().sum::<f64>());
    if !loss.is_finite() {
        let bad = (0..n)
            .find(|&i| {
                let rows_ok = [&x, &xp, &y].iter().all(|m| m.row(i).iter().all(|v| v.is_finite()));
                !rows_ok || !(t1[i] + t2[i]).is_finite()
            })
            .unwrap_or(0);
        return Err(Error::Numeric(format!("non-finite contrastive loss at record {bad}")));
    }

    let d1 = g1 * scale;
    let d2 = g2 * scale;
    let dx = d1.dot(&y);
    let dxp = d2.dot(&y);
    let dy = d1.t().dot(&x) + d2.t().dot(&xp);
    let grads = ReprGrads {
        phi: params.phi.backward(&x_in, &x_cache, &dx),
        phi_prime: params.phi_prime.backward(&xp_in, &xp_cache, &dxp),
        psi: params.psi.backward(&y_in, &y_cache, &dy),
    };
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite contrastive gradient".into()));
    }
    Ok((loss, grads))
}

/// Largest relative error between the analytic gradient of
/// [`repr_loss_and_grads`] and central differences with step `h`, over every
/// parameter. The denominator is floored at `1e-3` of the largest analytic
/// entry so near-zero gradients do not dominate.
pub fn max_gradient_error(params: &ReprParams, batch: &ContrastiveBatch, h: f64) -> Result<f64> {
    let (_, g) = repr_loss_and_grads(params, batch)?;
    let analytic: Vec<f64> = g.phi.values().chain(g.phi_prime.values()).chain(g.psi.values()).collect();
    // entries far below the largest gradient are compared against a floor
    let floor = 1e-3 * analytic.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
    let mut worst: f64 = 0.0;
    for (k, &a) in analytic.iter().enumerate() {
        let eval = |delta: f64| {
            let mut q = params.clone();
            if let Some(v) = q.phi.params_mut().chain(q.phi_prime.params_mut()).chain(q.psi.params_mut()).nth(k) {
                *v += delta;
            }
            repr_loss_and_grads(&q, batch).map(|r| r.0)
        };
        let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
        worst = worst.max((fd - a).abs() / a.abs().max(fd.abs()).max(floor));
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReprStepStats {
    pub loss: f64,
    /// `log N - loss`, the infoNCE lower bound; never above `log N`.
    pub infonce_bound: f64,
}

/// Owns the encoders and their optimizer state.
#[derive(Clone, Debug)]
pub struct ReprTrainer {
    pub params: ReprParams,
    opt_phi: Adam,
    opt_phi_prime: Adam,
    opt_psi: Adam,
}

impl ReprTrainer {
    pub fn new(params: ReprParams, lr: f64) -> Self {
        Self {
            opt_phi: Adam::new(&params.phi, lr),
            opt_phi_prime: Adam::new(&params.phi_prime, lr),
            opt_psi: Adam::new(&params.psi, lr),
            params,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.opt_phi.lr = lr;
        self.opt_phi_prime.lr = lr;
        self.opt_psi.lr = lr;
    }

    pub fn step(&mut self, batch: &ContrastiveBatch) -> Result<ReprStepStats> {
        let (loss, g) = repr_loss_and_grads(&self.params, batch)?;
        self.opt_phi.step(&mut self.params.phi, &g.phi);
        self.opt_phi_prime.step(&mut self.params.phi_prime, &g.phi_prime);
        self.opt_psi.step(&mut self.params.psi, &g.psi);
        let log_n = (batch.len() as f64).ln();
        let bound = log_n - loss;
        debug_assert!(bound <= log_n + 1e-6);
        Ok(ReprStepStats {
            loss,
            infonce_bound: bound,
        })
    }
}

/// Rowwise `(phi - phi') . psi` for every record of a batch.
pub fn esr_rewards(params: &ReprParams, batch: &ContrastiveBatch) -> Vec<f64> {
    if batch.is_empty() {
        return Vec::new();
    }
    let x = params.phi.forward(&sparse(&params.phi, &batch.sa));
    let xp = params.phi_prime.forward(&sparse(&params.phi_prime, &batch.s_r));
    let y = params.psi.forward(&sparse(&params.psi, &batch.g));
    ((x - xp) * y).sum_axis(Axis(1)).to_vec()
}

/// `(phi(s, a^R, a^H) - phi'(s, a^R)) . psi(g)`, unclipped.
pub fn esr_reward<F: Featurizer>(params: &ReprParams, feat: &F, s: &F::Obs, a_r: usize, a_h: usize, g: &F::Obs) -> f64 {
    let mut b = ContrastiveBatch::default();
    b.push(params, feat, s, a_h, a_r, g);
    esr_rewards(params, &b)[0]
}

/// `exp(|phi|^2 / 2) (phi - phi') . phi` with the exponent capped.
pub fn simplified_reward_from(phi: &[f64], phi_prime: &[f64]) -> f64 {
    let half_sq = 0.5 * phi.iter().map(|v| v * v).sum::<f64>();
    let e = if half_sq > SIMPLIFIED_EXP_CAP {
        log::warn!("simplified reward exponent {half_sq:.3} capped at {SIMPLIFIED_EXP_CAP}");
        SIMPLIFIED_EXP_CAP
    } else {
        half_sq
    };
    let dot: f64 = phi.iter().zip(phi_prime).map(|(a, b)| (a - b) * a).sum();
    e.exp() * dot
}

/// Simplified rewards for `(sa, s_r)` feature rows; no future sample needed.
pub fn esr_rewards_simplified(params: &ReprParams, sa: &[Active], s_r: &[Active]) -> Vec<f64> {
    if sa.is_empty() {
        return Vec::new();
    }
    let x = params.phi.forward(&sparse(&params.phi, sa));
    let xp = params.phi_prime.forward(&sparse(&params.phi_prime, s_r));
    x.outer_iter()
        .zip(xp.outer_iter())
        .map(|(a, b)| simplified_reward_from(a.as_slice().expect("contiguous"), b.as_slice().expect("contiguous")))
        .collect()
}

pub fn esr_reward_simplified<F: Featurizer>(params: &ReprParams, feat: &F, s: &F::Obs, a_r: usize, a_h: usize) -> f64 {
    let sa = [params.phi_features(feat, s, a_h, a_r)];
    let s_r = [params.phi_prime_features(feat, s, a_r)];
    esr_rewards_simplified(params, &sa, &s_r)[0]
}

/// Mean ESR reward at `s` with `a^H ~ pi_h`, `a^R ~ pi_r` and `g` drawn from
/// stored futures of transitions that took exactly those actions at `s`.
/// `None` when fewer than `num_g_samples / 2` draws found a matching anchor.
#[allow(clippy::too_many_arguments)]
pub fn estimate_mi_at_state<F: Featurizer, R: Rng + ?Sized>(
    params: &ReprParams,
    feat: &F,
    s: &F::Obs,
    pi_h: &[f64],
    pi_r: &[f64],
    num_g_samples: usize,
    buffer: &EpisodeBuffer<F::Obs>,
    gamma_future: f64,
    rng: &mut R,
) -> Result<Option<f64>>
where
    F::Obs: Clone + PartialEq,
{
    if pi_h.len() != feat.num_human_actions() || pi_r.len() != feat.num_robot_actions() {
        return Err(Error::Config("policy rows do not match the featurizer's action counts".into()));
    }
    let nh = pi_h.len();
    let mut by_action = vec![Vec::new(); nh * pi_r.len()];
    for a in buffer.anchors_where(|st| &st.obs == s) {
        let st = buffer.step_at(a).expect("anchor from this buffer");
        by_action[st.a_r * nh + st.a_h].push(a);
    }
    let mut batch = ContrastiveBatch::default();
    for _ in 0..num_g_samples {
        let (a_h, a_r) = (sample_index(pi_h, rng), sample_index(pi_r, rng));
        let pool = &by_action[a_r * nh + a_h];
        if pool.is_empty() {
            continue;
        }
        let anchor = pool[rng.gen_range(0..pool.len())];
        let f = buffer.sample_future_at(anchor, gamma_future, rng)?;
        batch.push(params, feat, s, a_h, a_r, &f.future);
    }
    if num_g_samples == 0 || 2 * batch.len() < num_g_samples {
        return Ok(None);
    }
    let r = esr_rewards(params, &batch);
    Ok(Some(r.iter().sum::<f64>() / r.len() as f64))
}
