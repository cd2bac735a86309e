//! The per-datum ELBO and its gradient estimators.
//!
//! Every estimator returns the gradient of the batch-mean ELBO (an ascent
//! direction), one tensor per parameter in store order. The decoder `theta`
//! always learns from `log p(y | x, z)` with the drawn masks held fixed and
//! the priors `eta` from `log p_eta(z)`; the estimators differ only in how
//! the encoder heads `phi` are reached.

mod adam;
mod oracle;

pub use adam::{adam_update, AdamConfig, OptimizerState};
pub use oracle::{exact_elbo_grad_bruteforce, ExactElbo, MAX_ENUMERATED_BITS};

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dropout::{
    gaussian_kl_var, kl_site, mask_log_prob, scaled_sigmoid, shared_bernoulli_log_prob,
    scaled_sigmoid_var, DropoutSite, MaskDist, SiteParams, Variant,
};
use crate::error::{Error, Result};
use crate::models::{log_likelihood, MaskMode, MaskTrace, Mlp, ParamGroups};
use crate::tensor::{Gradients, Graph, ParamId, ParamStore, RngStream, Tensor, Var};

/// How the encoder (and any other mask parameters) receive gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// Plain backpropagation: fixed-rate, relaxed and gating dropout.
    Backprop,
    Reinforce,
    ArmSequential,
    ArmIndependent,
    /// Reparameterized Gaussian masks.
    Reparam,
}

impl Estimator {
    pub const ALL: [Estimator; 5] = [
        Estimator::Backprop,
        Estimator::Reinforce,
        Estimator::ArmSequential,
        Estimator::ArmIndependent,
        Estimator::Reparam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Backprop => "backprop",
            Estimator::Reinforce => "reinforce",
            Estimator::ArmSequential => "arm-sequential",
            Estimator::ArmIndependent => "arm-independent",
            Estimator::Reparam => "reparam",
        }
    }

    /// The usual estimator for a dropout variant.
    pub fn default_for(variant: Option<Variant>) -> Self {
        match variant {
            Some(Variant::ContextualBernoulli) => Estimator::ArmSequential,
            Some(Variant::ContextualGaussian) => Estimator::Reparam,
            _ => Estimator::Backprop,
        }
    }

    pub fn check(self, variant: Option<Variant>) -> Result<()> {
        let ok = match self {
            Estimator::Backprop => !matches!(
                variant,
                Some(Variant::ContextualBernoulli | Variant::ContextualGaussian)
            ),
            Estimator::Reinforce | Estimator::ArmSequential | Estimator::ArmIndependent => {
                variant == Some(Variant::ContextualBernoulli)
            }
            Estimator::Reparam => variant == Some(Variant::ContextualGaussian),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::usage(format!(
                "estimator {} does not apply to {}",
                self,
                variant.map_or("a network without dropout", Variant::name)
            )))
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Estimator::ALL.iter().map(|e| e.name()).collect();
                Error::usage(format!("unknown estimator {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// A labelled mini-batch.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub x: &'a Tensor,
    pub y: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn new(x: &'a Tensor, y: &'a [usize]) -> Result<Self> {
        if x.rank() != 2 || x.rows() != y.len() || y.is_empty() {
            return Err(Error::usage(format!(
                "batch of {:?} inputs with {} labels",
                x.shape(),
                y.len()
            )));
        }
        Ok(Batch { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradNorms {
    pub theta: f64,
    pub phi: f64,
    pub eta: f64,
    pub concrete: f64,
}

impl GradNorms {
    pub fn of(grads: &[Tensor], groups: &ParamGroups) -> Self {
        let norm = |ids: &[ParamId]| -> f64 {
            ids.iter()
                .map(|id| grads[id.index()].data().iter().map(|v| v * v).sum::<f64>())
                // Empty float sums are -0.0; start from +0.0 instead.
                .fold(0.0, |a, b| a + b)
                .sqrt()
        };
        GradNorms {
            theta: norm(&groups.theta),
            phi: norm(&groups.phi),
            eta: norm(&groups.eta),
            concrete: norm(&groups.concrete),
        }
    }
}

/// Diagnostics of one estimator step. Objective values are batch means.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub elbo: f64,
    pub log_likelihood: f64,
    /// Analytic KL for the drawn sample's logits (per-datum sites) or the
    /// amortized global term (relaxed Bernoulli).
    pub kl: f64,
    pub grad_norms: GradNorms,
    /// (datum, site) pairs whose true and pseudo masks coincide.
    pub arm_noop_sites: usize,
    pub forward_passes: usize,
    /// Probabilities clamped before a logarithm.
    pub saturated: usize,
    /// Seconds; kept out of serialized reports so they stay deterministic.
    #[serde(skip)]
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    /// Ascent direction of the batch-mean ELBO, store order.
    pub grads: Vec<Tensor>,
    pub report: StepReport,
}

impl Estimate {
    /// Gradients of the loss `-ELBO`, as consumed by [`adam_update`].
    pub fn loss_grads(&self) -> Vec<Tensor> {
        self.grads.iter().map(|g| g.map(|v| -v)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOptions {
    pub estimator: Estimator,
    /// Training-set size, used to amortize the global relaxed-Bernoulli KL.
    pub dataset_size: usize,
}

/// Per-row pieces of the reward `r = log p(y|x,z) + log p_eta(z) - log q(z|x)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RewardTerms {
    pub log_likelihood: Vec<f64>,
    pub log_prior: Vec<f64>,
    pub log_q: Vec<f64>,
    pub saturated: usize,
}

impl RewardTerms {
    pub fn reward(&self) -> Vec<f64> {
        (0..self.log_likelihood.len())
            .map(|r| self.log_likelihood[r] + self.log_prior[r] - self.log_q[r])
            .collect()
    }

    fn add_site(&mut self, other: (Vec<f64>, Vec<f64>, usize)) {
        for (a, b) in self.log_q.iter_mut().zip(&other.0) {
            *a += b;
        }
        for (a, b) in self.log_prior.iter_mut().zip(&other.1) {
            *a += b;
        }
        self.saturated += other.2;
    }
}

fn prior_logit(site: &DropoutSite, store: &ParamStore) -> Option<f64> {
    site.prior().map(|p| store.get(p).item())
}

/// `(log q, log p_eta, saturated)` per row for one variational site, with
/// `q` evaluated at the logits the mask was drawn from.
fn site_terms(
    site: &DropoutSite,
    store: &ParamStore,
    alpha: &Tensor,
    z: &Tensor,
) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let t = site.config.t;
    let eta = prior_logit(site, store).ok_or_else(|| Error::usage("site has no prior"))?;
    let (lq, lp) = match site.variant() {
        Variant::ContextualBernoulli => (
            mask_log_prob(z, &MaskDist::bernoulli_from_logits(alpha, t))?,
            shared_bernoulli_log_prob(z, scaled_sigmoid(eta, t))?,
        ),
        Variant::ContextualGaussian => {
            let p = MaskDist::Gaussian {
                var: Tensor::full(alpha.shape(), (t * eta).exp()),
            };
            (mask_log_prob(z, &MaskDist::gaussian_from_logits(alpha, t))?, mask_log_prob(z, &p)?)
        }
        other => return Err(Error::usage(format!("{other} sites have no mask density"))),
    };
    Ok((lq.rows, lp.rows, lq.saturated + lp.saturated))
}

type SiteRows = (Vec<f64>, Vec<f64>, usize);

/// [`site_terms`] for every variational site of a trace, in trace order;
/// `None` for sites without a mask density.
fn trace_site_terms(mlp: &Mlp, store: &ParamStore, trace: &MaskTrace, rows: usize) -> Result<Vec<Option<SiteRows>>> {
    trace
        .sites
        .iter()
        .map(|st| {
            let site = mlp
                .site(st.position)
                .ok_or_else(|| Error::usage(format!("trace refers to missing site {}", st.position)))?;
            if !site.variant().is_variational() {
                return Ok(None);
            }
            let alpha = st
                .alpha
                .as_ref()
                .ok_or_else(|| Error::usage("variational site traced without logits"))?;
            if alpha.rows() != rows {
                return Err(Error::usage("trace and likelihood disagree on batch size"));
            }
            site_terms(site, store, alpha, &st.z).map(Some)
        })
        .collect()
}

fn collect_terms(log_lik: &[f64], per_site: &[Option<SiteRows>]) -> RewardTerms {
    let rows = log_lik.len();
    let mut terms = RewardTerms {
        log_likelihood: log_lik.to_vec(),
        log_prior: vec![0.0; rows],
        log_q: vec![0.0; rows],
        saturated: 0,
    };
    for s in per_site.iter().flatten() {
        terms.add_site(s.clone());
    }
    terms
}

/// Reward terms for a completed forward pass with per-row log-likelihoods.
pub fn reward_r(mlp: &Mlp, store: &ParamStore, trace: &MaskTrace, log_lik: &[f64]) -> Result<RewardTerms> {
    let per_site = trace_site_terms(mlp, store, trace, log_lik.len())?;
    Ok(collect_terms(log_lik, &per_site))
}

/// Per-row analytic KL between each site's mask distribution and its prior,
/// summed over sites.
pub fn analytic_kl(mlp: &Mlp, store: &ParamStore, trace: &MaskTrace) -> Result<(Vec<f64>, usize)> {
    let mut total: Vec<f64> = Vec::new();
    let mut saturated = 0;
    for st in &trace.sites {
        let Some(site) = mlp.site(st.position) else { continue };
        if !site.variant().is_variational() {
            continue;
        }
        let (Some(alpha), Some(eta)) = (st.alpha.as_ref(), prior_logit(site, store)) else {
            continue;
        };
        let t = site.config.t;
        let (q, p) = if site.variant().is_gaussian() {
            (
                MaskDist::gaussian_from_logits(alpha, t),
                MaskDist::Gaussian {
                    var: Tensor::full(alpha.shape(), (t * eta).exp()),
                },
            )
        } else {
            (
                MaskDist::bernoulli_from_logits(alpha, t),
                MaskDist::Bernoulli {
                    keep: Tensor::full(alpha.shape(), scaled_sigmoid(eta, t)),
                },
            )
        };
        let kl = kl_site(&q, &p)?;
        saturated += kl.saturated;
        if total.is_empty() {
            total = kl.rows;
        } else {
            total.iter_mut().zip(&kl.rows).for_each(|(a, b)| *a += b);
        }
    }
    Ok((total, saturated))
}

/// Per-datum ELBO terms for one sampled forward pass:
/// `(log-likelihood rows, KL rows)`, with `L = log-likelihood - KL`.
pub fn elbo(
    mlp: &Mlp,
    store: &ParamStore,
    batch: Batch<'_>,
    dataset_size: usize,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let f = mlp.forward(&mut g, store, batch.x, MaskMode::Sample { pseudo: false }, rng)?;
    let ll = log_likelihood(&mut g, f.log_probs, batch.y)?;
    let ll = g.value(ll).data().to_vec();
    let kl = match mlp.variant() {
        Some(Variant::Concrete) => {
            let global = concrete_kl_value(mlp, store) / dataset_size.max(1) as f64;
            vec![global; ll.len()]
        }
        _ => {
            let (kl, _) = analytic_kl(mlp, store, &f.trace)?;
            if kl.is_empty() {
                vec![0.0; ll.len()]
            } else {
                kl
            }
        }
    };
    Ok((ll, kl))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn dense(grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
    store.ids().map(|id| grads.param_or_zeros(id, store)).collect()
}

/// `sum_rows log p_eta(z)` on the tape for every variational Bernoulli site.
fn prior_log_prob_var(g: &mut Graph, mlp: &Mlp, store: &ParamStore, trace: &MaskTrace) -> Result<Option<Var>> {
    let mut total = None;
    for st in &trace.sites {
        let Some(site) = mlp.site(st.position) else { continue };
        let (Variant::ContextualBernoulli, Some(prior)) = (site.variant(), site.prior()) else {
            continue;
        };
        // The prior is shared by every unit, so only the number of kept
        // units enters: K ln p + (N - K) ln(1 - p).
        let kept = st.z.sum();
        let dropped = st.z.len() as f64 - kept;
        let eta = g.param(store, prior);
        let keep = scaled_sigmoid_var(g, eta, site.config.t)?;
        let p = g.clamp(keep, crate::dropout::PROB_CLAMP, 1.0 - crate::dropout::PROB_CLAMP)?;
        let lp = g.log(p)?;
        let np = g.neg(p)?;
        let q = g.add_scalar(np, 1.0)?;
        let lq = g.log(q)?;
        let a = g.scale(lp, kept)?;
        let b = g.scale(lq, dropped)?;
        let s = g.add(a, b)?;
        let s = g.sum(s)?;
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    Ok(total)
}

fn concrete_kl_value(mlp: &Mlp, store: &ParamStore) -> f64 {
    mlp.sites()
        .filter_map(|s| match s.params {
            SiteParams::Concrete { logit } => {
                let p = scaled_sigmoid(store.get(logit).item(), 1.0);
                let p0 = 1.0 - s.config.rate;
                Some(s.width as f64 * bernoulli_kl(p, p0))
            }
            _ => None,
        })
        .sum()
}

fn bernoulli_kl(p: f64, p0: f64) -> f64 {
    let c = |x: f64| x.clamp(crate::dropout::PROB_CLAMP, 1.0 - crate::dropout::PROB_CLAMP);
    let (p, p0) = (c(p), c(p0));
    p * (p / p0).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - p0)).ln()
}

/// Global relaxed-Bernoulli KL to the fixed-rate prior, on the tape.
fn concrete_kl_var(g: &mut Graph, mlp: &Mlp, store: &ParamStore) -> Result<Option<Var>> {
    let mut total = None;
    for s in mlp.sites() {
        let SiteParams::Concrete { logit } = s.params else { continue };
        let p0 = 1.0 - s.config.rate;
        let l = g.param(store, logit);
        let p = g.sigmoid(l)?;
        let p = g.clamp(p, crate::dropout::PROB_CLAMP, 1.0 - crate::dropout::PROB_CLAMP)?;
        let lp = g.log(p)?;
        let a = g.add_scalar(lp, -p0.ln())?;
        let a = g.mul(p, a)?;
        let np = g.neg(p)?;
        let q = g.add_scalar(np, 1.0)?;
        let lq = g.log(q)?;
        let b = g.add_scalar(lq, -(1.0 - p0).ln())?;
        let b = g.mul(q, b)?;
        let kl = g.add(a, b)?;
        let kl = g.scale(kl, s.width as f64)?;
        total = Some(match total {
            None => kl,
            Some(acc) => g.add(acc, kl)?,
        });
    }
    Ok(total)
}

fn finish(mlp: &Mlp, grads: Vec<Tensor>, mut report: StepReport, started: Instant) -> Estimate {
    report.grad_norms = GradNorms::of(&grads, &mlp.param_groups());
    report.elbo = report.log_likelihood - report.kl;
    report.wall_time = started.elapsed().as_secs_f64();
    Estimate { grads, report }
}

/// Runs one step of the configured estimator on a batch.
pub fn estimate(
    mlp: &Mlp,
    store: &ParamStore,
    batch: Batch<'_>,
    opts: &StepOptions,
    rng: &mut RngStream,
) -> Result<Estimate> {
    opts.estimator.check(mlp.variant())?;
    match opts.estimator {
        Estimator::Backprop => backprop_step(mlp, store, batch, opts.dataset_size, rng),
        Estimator::Reinforce => reinforce_grad(mlp, store, batch, rng),
        Estimator::ArmSequential => arm_sequential_step(mlp, store, batch, rng),
        Estimator::ArmIndependent => arm_independent_step(mlp, store, batch, rng),
        Estimator::Reparam => reparam_gaussian_step(mlp, store, batch, rng),
    }
}

/// Plain backpropagation through fixed-rate, relaxed or gating masks.
/// The relaxed-Bernoulli KL is one global term, amortized as
/// `KL / dataset_size` per datum.
pub fn backprop_step(
    mlp: &Mlp,
    store: &ParamStore,
    batch: Batch<'_>,
    dataset_size: usize,
    rng: &mut RngStream,
) -> Result<Estimate> {
    let started = Instant::now();
    let b = batch.len() as f64;
    let mut g = Graph::new();
    let f = mlp.forward(&mut g, store, batch.x, MaskMode::Sample { pseudo: false }, rng)?;
    let ll = log_likelihood(&mut g, f.log_probs, batch.y)?;
    let ll_rows = g.value(ll).data().to_vec();
    let sum_ll = g.sum(ll)?;
    let mut objective = g.scale(sum_ll, 1.0 / b)?;
    let mut kl = 0.0;
    if let Some(klv) = concrete_kl_var(&mut g, mlp, store)? {
        let w = 1.0 / dataset_size.max(1) as f64;
        kl = g.value(klv).item() * w;
        let scaled = g.scale(klv, w)?;
        objective = g.sub(objective, scaled)?;
    }
    let grads = dense(&g.backward(objective)?, store);
    let report = StepReport {
        log_likelihood: mean(&ll_rows),
        kl,
        forward_passes: 1,
        ..Default::default()
    };
    Ok(finish(mlp, grads, report, started))
}

/// `theta` and `eta` gradients of `log p(y|x,z) + log p_eta(z)` for a frozen
/// mask sample, batch-mean.
pub fn decoder_and_prior_grad(
    mlp: &Mlp,
    store: &ParamStore,
    batch: Batch<'_>,
    trace: &MaskTrace,
) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    // Replay never draws.
    let mut rng = RngStream::new(0, crate::tensor::StreamId::Masks);
    let f = mlp.forward(&mut g, store, batch.x, MaskMode::Replay(trace), &mut rng)?;
    let ll = log_likelihood(&mut g, f.log_probs, batch.y)?;
    let mut total = g.sum(ll)?;
    if let Some(lp) = prior_log_prob_var(&mut g, mlp, store, trace)? {
        total = g.add(total, lp)?;
    }
    let obj = g.scale(total, 1.0 / batch.len() as f64)?;
    let grads = g.backward(obj)?;
    let groups = mlp.param_groups();
    let keep: Vec<ParamId> = groups.theta.iter().chain(&groups.eta).copied().collect();
    Ok(store
        .ids()
        .map(|id| {
            if keep.contains(&id) {
                grads.param_or_zeros(id, store)
            } else {
                Tensor::zeros(store.get(id).shape())
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ScoreKind {
    Reinforce,
    ArmSequential,
    ArmIndependent,
}

/// REINFORCE: `r * grad log q(z | x)` with a single sample per datum.
pub fn reinforce_grad(mlp: &Mlp, store: &ParamStore, batch: Batch<'_>, rng: &mut RngStream) -> Result<Estimate> {
    bernoulli_step(mlp, store, batch, ScoreKind::Reinforce, rng)
}

/// Sequential ARM: one true pass plus, for every site and datum whose true
/// and pseudo masks differ, a pseudo continuation from that site with
/// fresh uniforms downstream.
pub fn arm_sequential_step(
    mlp: &Mlp,
    store: &ParamStore,
    batch: Batch<'_>,
    rng: &mut RngStream,
) -> Result<Estimate> {
    bernoulli_step(mlp, store, batch, ScoreKind::ArmSequential, rng)
}

/// Independent ARM: one true pass and one full pseudo pass that reuses the
/// true pass's uniforms with its own logits; the shared reward difference
/// weights every site.
pub fn arm_independent_step(
    mlp: &Mlp,
    store: &ParamStore,
    batch: Batch<'_>,
    rng: &mut RngStream,
) -> Result<Estimate> {
    bernoulli_step(mlp, store, batch, ScoreKind::ArmIndependent, rng)
}

fn uniforms(trace: &crate::models::SiteTrace) -> Result<&Tensor> {
    match &trace.noise {
        crate::models::Noise::Uniform(pi) => Ok(pi),
        _ => Err(Error::usage("Bernoulli site traced without uniforms")),
    }
}

fn bernoulli_step(
    mlp: &Mlp,
    store: &ParamStore,
    batch: Batch<'_>,
    kind: ScoreKind,
    rng: &mut RngStream,
) -> Result<Estimate> {
    let started = Instant::now();
    let rows = batch.len();
    let mut g = Graph::new();
    let pseudo = kind == ScoreKind::ArmSequential;
    let f = mlp.forward(&mut g, store, batch.x, MaskMode::Sample { pseudo }, rng)?;
    let ll = log_likelihood(&mut g, f.log_probs, batch.y)?;
    let per_site = trace_site_terms(mlp, store, &f.trace, rows)?;
    let terms = collect_terms(g.value(ll).data(), &per_site);
    let r_true = terms.reward();
    let mut report = StepReport {
        log_likelihood: mean(&terms.log_likelihood),
        forward_passes: 1,
        saturated: terms.saturated,
        ..Default::default()
    };

    // Coefficients c^l with grad_phi = sum_l c^l . grad_phi alpha^l.
    let mut coeffs: Vec<(Var, Tensor)> = Vec::new();
    match kind {
        ScoreKind::Reinforce => {
            for (sv, st) in f.sites.iter().zip(&f.trace.sites) {
                let t = mlp.site(st.position).expect("traced").config.t;
                let alpha = st.alpha.as_ref().expect("contextual");
                let mut c = Tensor::zeros(alpha.shape());
                let w = alpha.row_len();
                for (i, v) in c.data_mut().iter_mut().enumerate() {
                    let keep = scaled_sigmoid(alpha.data()[i], t);
                    *v = r_true[i / w] * t * (st.z.data()[i] - keep);
                }
                coeffs.push((sv.alpha.expect("contextual"), c));
            }
        }
        ScoreKind::ArmSequential => {
            for (k, (sv, st)) in f.sites.iter().zip(&f.trace.sites).enumerate() {
                let site = mlp.site(st.position).expect("traced");
                let t = site.config.t;
                let alpha = st.alpha.as_ref().expect("contextual");
                let pi = uniforms(st)?;
                let sudo = st.z_sudo.as_ref().expect("pseudo requested");
                let differ: Vec<usize> = (0..rows).filter(|&r| st.z.row(r) != sudo.row(r)).collect();
                report.arm_noop_sites += rows - differ.len();
                let mut c = Tensor::zeros(alpha.shape());
                if !differ.is_empty() {
                    let r_sudo = pseudo_continuation(mlp, store, batch, &g, &f, &per_site, k, &differ, rng)?;
                    report.forward_passes += 1;
                    let w = alpha.row_len();
                    for (j, &r) in differ.iter().enumerate() {
                        let diff = t * (r_true[r] - r_sudo[j]);
                        for col in 0..w {
                            c.data_mut()[r * w + col] = diff * (0.5 - pi.data()[r * w + col]);
                        }
                    }
                }
                coeffs.push((sv.alpha.expect("contextual"), c));
            }
        }
        ScoreKind::ArmIndependent => {
            let mut g2 = Graph::new();
            let f2 = mlp.forward(&mut g2, store, batch.x, MaskMode::Antithetic(&f.trace), rng)?;
            report.forward_passes += 1;
            let ll2 = log_likelihood(&mut g2, f2.log_probs, batch.y)?;
            let sudo_terms = reward_r(mlp, store, &f2.trace, g2.value(ll2).data())?;
            let r_sudo = sudo_terms.reward();
            for ((sv, st), st2) in f.sites.iter().zip(&f.trace.sites).zip(&f2.trace.sites) {
                let t = mlp.site(st.position).expect("traced").config.t;
                let pi = uniforms(st)?;
                report.arm_noop_sites += (0..rows).filter(|&r| st.z.row(r) == st2.z.row(r)).count();
                let w = pi.row_len();
                let mut c = Tensor::zeros(pi.shape());
                for (i, v) in c.data_mut().iter_mut().enumerate() {
                    let r = i / w;
                    *v = t * (r_true[r] - r_sudo[r]) * (0.5 - pi.data()[i]);
                }
                coeffs.push((sv.alpha.expect("contextual"), c));
            }
        }
    }

    let mut total = g.sum(ll)?;
    if let Some(lp) = prior_log_prob_var(&mut g, mlp, store, &f.trace)? {
        total = g.add(total, lp)?;
    }
    for (alpha, c) in coeffs {
        let cv = g.constant(c);
        let prod = g.mul(alpha, cv)?;
        let s = g.sum(prod)?;
        total = g.add(total, s)?;
    }
    let obj = g.scale(total, 1.0 / rows as f64)?;
    let grads = dense(&g.backward(obj)?, store);
    let (kl, sat) = analytic_kl(mlp, store, &f.trace)?;
    report.kl = mean(&kl);
    report.saturated += sat;
    Ok(finish(mlp, grads, report, started))
}

/// Reward of the pseudo path that switches site `k` (in trace order) to its
/// pseudo mask for the given rows and samples every later site afresh.
#[allow(clippy::too_many_arguments)]
fn pseudo_continuation(
    mlp: &Mlp,
    store: &ParamStore,
    batch: Batch<'_>,
    g: &Graph,
    f: &crate::models::Forward,
    upstream: &[Option<SiteRows>],
    k: usize,
    rows: &[usize],
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let st = &f.trace.sites[k];
    let site = mlp.site(st.position).expect("traced");
    let u = g.value(f.sites[k].u).select_rows(rows);
    let z_sudo = st.z_sudo.as_ref().expect("pseudo requested").select_rows(rows);
    let alpha = st.alpha.as_ref().expect("contextual").select_rows(rows);
    let x = Tensor::new(
        u.shape().to_vec(),
        u.data().iter().zip(z_sudo.data()).map(|(a, b)| a * b).collect(),
    )?;

    let mut g2 = Graph::new();
    let xv = g2.constant(x);
    let f2 = mlp.forward_from(&mut g2, store, st.position + 1, xv, MaskMode::Sample { pseudo: false }, rng)?;
    let labels: Vec<usize> = rows.iter().map(|&r| batch.y[r]).collect();
    let ll = log_likelihood(&mut g2, f2.log_probs, &labels)?;
    let mut terms = reward_r(mlp, store, &f2.trace, g2.value(ll).data())?;
    // Sites before k keep their true masks, so their terms are reused.
    for (lq, lp, _) in upstream[..k].iter().flatten() {
        terms.add_site((
            rows.iter().map(|&r| lq[r]).collect(),
            rows.iter().map(|&r| lp[r]).collect(),
            0,
        ));
    }
    terms.add_site(site_terms(site, store, &alpha, &z_sudo)?);
    Ok(terms.reward())
}

/// Reparameterized Gaussian step. `theta` sees the masks as fixed and `eta`
/// learns from the analytic KL; `phi` receives the total derivative of
/// `log p(y|x,z) - KL` through `z = 1 + exp(t alpha / 2) eps` with `eps`
/// frozen, including the path from a site's mask into later sites' logits.
pub fn reparam_gaussian_step(
    mlp: &Mlp,
    store: &ParamStore,
    batch: Batch<'_>,
    rng: &mut RngStream,
) -> Result<Estimate> {
    reparam_inner(mlp, store, batch, MaskMode::Sample { pseudo: false }, rng)
}

/// [`reparam_gaussian_step`] with the Gaussian noise taken from `trace`.
pub fn reparam_gaussian_replay(
    mlp: &Mlp,
    store: &ParamStore,
    batch: Batch<'_>,
    trace: &MaskTrace,
) -> Result<Estimate> {
    Estimator::Reparam.check(mlp.variant())?;
    let mut rng = RngStream::new(0, crate::tensor::StreamId::Masks);
    reparam_inner(mlp, store, batch, MaskMode::Replay(trace), &mut rng)
}

fn reparam_inner(
    mlp: &Mlp,
    store: &ParamStore,
    batch: Batch<'_>,
    mode: MaskMode<'_>,
    rng: &mut RngStream,
) -> Result<Estimate> {
    let started = Instant::now();
    let mut g = Graph::new();
    let f = mlp.forward(&mut g, store, batch.x, mode, rng)?;
    let (obj, ll_rows, kl_rows) = gaussian_objective(&mut g, mlp, store, batch, &f)?;
    let barrier = g.backward(obj)?;

    let mut open = Graph::with_open_barriers();
    let f2 = mlp.forward(&mut open, store, batch.x, MaskMode::Replay(&f.trace), rng)?;
    let (obj2, _, _) = gaussian_objective(&mut open, mlp, store, batch, &f2)?;
    let total = open.backward(obj2)?;

    let phi = mlp.param_groups().phi;
    let grads = store
        .ids()
        .map(|id| {
            if phi.contains(&id) {
                total.param_or_zeros(id, store)
            } else {
                barrier.param_or_zeros(id, store)
            }
        })
        .collect();
    let report = StepReport {
        log_likelihood: mean(&ll_rows),
        kl: mean(&kl_rows),
        forward_passes: 2,
        ..Default::default()
    };
    Ok(finish(mlp, grads, report, started))
}

/// Batch-mean `log p(y|x,z) - KL` for Gaussian sites, plus per-row values.
fn gaussian_objective(
    g: &mut Graph,
    mlp: &Mlp,
    store: &ParamStore,
    batch: Batch<'_>,
    f: &crate::models::Forward,
) -> Result<(Var, Vec<f64>, Vec<f64>)> {
    let ll = log_likelihood(g, f.log_probs, batch.y)?;
    let ll_rows = g.value(ll).data().to_vec();
    let mut per_row = ll;
    let mut kl_rows = vec![0.0; batch.len()];
    for sv in &f.sites {
        let site = mlp.site(sv.position).expect("forward site");
        let (Some(alpha), Some(prior)) = (sv.alpha, site.prior()) else { continue };
        let eta = g.param(store, prior);
        let kl = gaussian_kl_var(g, alpha, eta, site.config.t)?;
        kl_rows.iter_mut().zip(g.value(kl).data()).for_each(|(a, b)| *a += b);
        per_row = g.sub(per_row, kl)?;
    }
    let s = g.sum(per_row)?;
    let obj = g.scale(s, 1.0 / batch.len() as f64)?;
    Ok((obj, ll_rows, kl_rows))
}

#[cfg(test)]
mod tests;
