use crate::dropout::{bernoulli_log_pmf_var, scaled_sigmoid_var, Variant};
use crate::error::{Error, Result};
use crate::models::{log_likelihood, MaskMode, MaskTrace, Mlp, Noise, SiteTrace};
use crate::tensor::{Graph, ParamStore, RngStream, StreamId, Tensor, Var};

use super::Batch;

/// Enumeration is refused above this many mask bits per datum.
pub const MAX_ENUMERATED_BITS: usize = 16;

/// Exact batch-mean ELBO and its gradient by enumerating every mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactElbo {
    /// `E_q[log p(y|x,z) + log p_eta(z) - log q(z|x)]`, batch mean.
    pub elbo: f64,
    /// `E_q[log p(y|x,z)]`, batch mean.
    pub expected_log_likelihood: f64,
    /// Ascent gradient of `elbo`, store order.
    pub grads: Vec<Tensor>,
    /// Per-datum sum of branch probabilities (1 up to rounding).
    pub total_probability: Vec<f64>,
    pub bits: usize,
}

/// Differentiates the exact expectation over all `2^bits` mask
/// configurations, each weighted by its autoregressive probability
/// `prod_l q(z^l | alpha^l(z^{<l}))`. The encoder barrier stays in place,
/// so `theta` receives exactly `E_q[grad log p(y|x,z)]`.
pub fn exact_elbo_grad_bruteforce(mlp: &Mlp, store: &ParamStore, batch: Batch<'_>) -> Result<ExactElbo> {
    let sites: Vec<_> = mlp.sites().collect();
    if sites.is_empty() || sites.iter().any(|s| s.variant() != Variant::ContextualBernoulli) {
        return Err(Error::usage("enumeration needs contextual Bernoulli sites only"));
    }
    let bits: usize = sites.iter().map(|s| s.width).sum();
    if bits > MAX_ENUMERATED_BITS {
        return Err(Error::usage(format!(
            "{bits} mask bits per datum; enumeration is limited to {MAX_ENUMERATED_BITS}"
        )));
    }
    let rows = batch.len();
    let mut g = Graph::new();
    let mut rng = RngStream::new(0, StreamId::Masks);
    let mut objective: Option<Var> = None;
    let mut ell: Option<Var> = None;
    let mut prob_sum = vec![0.0; rows];

    for config in 0u64..(1u64 << bits) {
        let mut trace = MaskTrace::default();
        let mut offset = 0;
        for s in &sites {
            let row: Vec<f64> = (0..s.width)
                .map(|c| ((config >> (offset + c)) & 1) as f64)
                .collect();
            offset += s.width;
            let z = Tensor::new(vec![rows, s.width], row.repeat(rows))?;
            trace.sites.push(SiteTrace {
                position: s.id,
                alpha: None,
                noise: Noise::None,
                z,
                z_sudo: None,
                shape: vec![rows, s.width],
            });
        }
        let f = mlp.forward(&mut g, store, batch.x, MaskMode::Replay(&trace), &mut rng)?;
        let ll = log_likelihood(&mut g, f.log_probs, batch.y)?;
        let mut log_q: Option<Var> = None;
        let mut log_p: Option<Var> = None;
        for (sv, st) in f.sites.iter().zip(&trace.sites) {
            let site = mlp.site(st.position).expect("enumerated");
            let t = site.config.t;
            let keep_q = scaled_sigmoid_var(&mut g, sv.alpha.expect("contextual"), t)?;
            let lq = bernoulli_log_pmf_var(&mut g, &st.z, keep_q)?;
            let eta = g.param(store, site.prior().expect("contextual"));
            let eta = g.broadcast(eta, st.z.shape(), &[])?;
            let keep_p = scaled_sigmoid_var(&mut g, eta, t)?;
            let lp = bernoulli_log_pmf_var(&mut g, &st.z, keep_p)?;
            log_q = Some(match log_q {
                None => lq,
                Some(a) => g.add(a, lq)?,
            });
            log_p = Some(match log_p {
                None => lp,
                Some(a) => g.add(a, lp)?,
            });
        }
        let (log_q, log_p) = (log_q.expect("sites"), log_p.expect("sites"));
        let q = g.exp(log_q)?;
        for (acc, p) in prob_sum.iter_mut().zip(g.value(q).data()) {
            *acc += p;
        }
        let r = g.add(ll, log_p)?;
        let r = g.sub(r, log_q)?;
        let weighted = g.mul(q, r)?;
        let term = g.sum(weighted)?;
        let wll = g.mul(q, ll)?;
        let ll_term = g.sum(wll)?;
        objective = Some(match objective {
            None => term,
            Some(a) => g.add(a, term)?,
        });
        ell = Some(match ell {
            None => ll_term,
            Some(a) => g.add(a, ll_term)?,
        });
    }
    let obj = g.scale(objective.expect("at least one configuration"), 1.0 / rows as f64)?;
    let grads = g.backward(obj)?;
    Ok(ExactElbo {
        elbo: g.value(obj).item(),
        expected_log_likelihood: g.value(ell.expect("configurations")).item() / rows as f64,
        grads: store.ids().map(|id| grads.param_or_zeros(id, store)).collect(),
        total_probability: prob_sum,
        bits,
    })
}
