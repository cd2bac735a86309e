use crate::error::{Error, Result};
use crate::tensor::{Graph, RngStream, Tensor, Var};

/// Probabilities entering a logarithm are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

/// `1 / (1 + exp(-t x))`, evaluated without overflow.
pub fn scaled_sigmoid(x: f64, t: f64) -> f64 {
    let s = t * x;
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn scaled_sigmoid_var(g: &mut Graph, alpha: Var, t: f64) -> Result<Var> {
    let s = g.scale(alpha, t)?;
    g.sigmoid(s)
}

fn clamp_prob(p: f64, saturated: &mut usize) -> f64 {
    let c = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if c != p {
        *saturated += 1;
    }
    c
}

/// One Bernoulli mask draw with the uniforms that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct BernoulliDraw {
    pub pi: Tensor,
    /// `1[pi < sigma_t(alpha)]`
    pub z_true: Tensor,
    /// `1[pi > sigma_t(-alpha)]`, the antithetic partner.
    pub z_sudo: Option<Tensor>,
}

impl BernoulliDraw {
    /// Rows whose true and pseudo masks differ somewhere.
    pub fn differing_rows(&self) -> Vec<usize> {
        let Some(sudo) = &self.z_sudo else {
            return Vec::new();
        };
        (0..self.z_true.rows())
            .filter(|&r| self.z_true.row(r) != sudo.row(r))
            .collect()
    }
}

pub fn bernoulli_from_uniforms(alpha: &Tensor, t: f64, pi: &Tensor, pseudo: bool) -> BernoulliDraw {
    assert_eq!(alpha.shape(), pi.shape(), "uniforms must match logits");
    let n = alpha.len();
    let mut z_true = Vec::with_capacity(n);
    let mut z_sudo = Vec::with_capacity(if pseudo { n } else { 0 });
    for (&a, &u) in alpha.data().iter().zip(pi.data()) {
        // sigma_t(a) = 1 / (1 + e) and sigma_t(-a) = e / (1 + e).
        let e = (-t * a).exp();
        let keep = 1.0 / (1.0 + e);
        z_true.push(f64::from(u8::from(u < keep)));
        if pseudo {
            let keep_neg = if e.is_infinite() { 1.0 } else { e * keep };
            z_sudo.push(f64::from(u8::from(u > keep_neg)));
        }
    }
    let shape = alpha.shape().to_vec();
    BernoulliDraw {
        pi: pi.clone(),
        z_true: Tensor::new(shape.clone(), z_true).expect("same shape"),
        z_sudo: pseudo.then(|| Tensor::new(shape, z_sudo).expect("same shape")),
    }
}

/// Draws `pi ~ U(0, 1)` per logit and thresholds it at `sigma_t(alpha)`.
pub fn sample_bernoulli_mask(
    alpha: &Tensor,
    t: f64,
    rng: &mut RngStream,
    pseudo: bool,
) -> BernoulliDraw {
    let pi = Tensor::new(alpha.shape().to_vec(), rng.uniforms(alpha.len())).expect("same shape");
    bernoulli_from_uniforms(alpha, t, &pi, pseudo)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDraw {
    pub eps: Tensor,
    pub z: Tensor,
}

/// `z = 1 + sqrt(s / (1 - s)) * eps` with `s = sigma_t(alpha)`.
///
/// Uses `s / (1 - s) = exp(t alpha)`, which stays finite where `1 - s`
/// would underflow.
pub fn gaussian_mask(alpha: &Tensor, t: f64, eps: &Tensor) -> Tensor {
    assert_eq!(alpha.shape(), eps.shape(), "noise must match logits");
    Tensor::new(
        alpha.shape().to_vec(),
        alpha
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&a, &e)| 1.0 + (0.5 * t * a).exp() * e)
            .collect(),
    )
    .expect("same shape")
}

pub fn sample_gaussian_mask(alpha: &Tensor, t: f64, rng: &mut RngStream) -> GaussianDraw {
    let eps = Tensor::new(alpha.shape().to_vec(), rng.normals(alpha.len())).expect("same shape");
    let z = gaussian_mask(alpha, t, &eps);
    GaussianDraw { eps, z }
}

/// Differentiable version of [`gaussian_mask`] for the reparameterized path.
pub fn gaussian_mask_var(g: &mut Graph, alpha: Var, eps: &Tensor, t: f64) -> Result<Var> {
    let half = g.scale(alpha, 0.5 * t)?;
    let std = g.exp(half)?;
    let e = g.constant(eps.clone());
    let noise = g.mul(std, e)?;
    g.add_scalar(noise, 1.0)
}

/// Mask distribution of one site for a batch, entrywise parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskDist {
    /// Keep probabilities.
    Bernoulli { keep: Tensor },
    /// Variances of `N(1, v)`.
    Gaussian { var: Tensor },
}

impl MaskDist {
    pub fn bernoulli_from_logits(alpha: &Tensor, t: f64) -> Self {
        MaskDist::Bernoulli {
            keep: alpha.map(|a| scaled_sigmoid(a, t)),
        }
    }

    /// `v = sigma_t(alpha) / (1 - sigma_t(alpha)) = exp(t alpha)`.
    pub fn gaussian_from_logits(alpha: &Tensor, t: f64) -> Self {
        MaskDist::Gaussian {
            var: alpha.map(|a| (t * a).exp()),
        }
    }

    fn params(&self) -> &Tensor {
        match self {
            MaskDist::Bernoulli { keep } => keep,
            MaskDist::Gaussian { var } => var,
        }
    }
}

/// Per-row sums of a log-density (or KL) and the number of clamped
/// probabilities encountered.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LogProb {
    pub rows: Vec<f64>,
    pub saturated: usize,
}

impl LogProb {
    pub fn total(&self) -> f64 {
        self.rows.iter().sum()
    }
}

fn per_row(shape_rows: usize, row_len: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
    (0..shape_rows)
        .map(|r| (r * row_len..(r + 1) * row_len).map(&f).sum())
        .collect()
}

/// Log-pmf (Bernoulli) or log-density (Gaussian) of mask `z`, summed over
/// all entries of each row.
pub fn mask_log_prob(z: &Tensor, dist: &MaskDist) -> Result<LogProb> {
    let p = dist.params();
    if p.shape() != z.shape() {
        return Err(Error::config(format!(
            "mask {:?} does not match distribution {:?}",
            z.shape(),
            p.shape()
        )));
    }
    let (rows, w) = (z.rows(), z.row_len());
    match dist {
        MaskDist::Bernoulli { keep } => {
            if z.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::config("Bernoulli mask entries must be 0 or 1"));
            }
            let mut saturated = 0;
            let clamped: Vec<f64> = keep
                .data()
                .iter()
                .map(|&q| clamp_prob(q, &mut saturated))
                .collect();
            let zd = z.data();
            let rows = per_row(rows, w, |i| {
                if zd[i] == 1.0 {
                    clamped[i].ln()
                } else {
                    (1.0 - clamped[i]).ln()
                }
            });
            Ok(LogProb { rows, saturated })
        }
        MaskDist::Gaussian { var } => {
            let (zd, vd) = (z.data(), var.data());
            let rows = per_row(rows, w, |i| {
                let d = zd[i] - 1.0;
                -0.5 * (2.0 * std::f64::consts::PI * vd[i]).ln() - d * d / (2.0 * vd[i])
            });
            Ok(LogProb { rows, saturated: 0 })
        }
    }
}

/// [`mask_log_prob`] for a Bernoulli distribution whose keep probability
/// is the same for every entry. Only the per-row count of kept units
/// matters, so this takes two logarithms in total.
pub fn shared_bernoulli_log_prob(z: &Tensor, keep: f64) -> Result<LogProb> {
    let mut saturated = 0;
    let k = clamp_prob(keep, &mut saturated);
    let (ln_keep, ln_drop) = (k.ln(), (1.0 - k).ln());
    let (rows, w) = (z.rows(), z.row_len());
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut kept = 0usize;
        for &v in z.row(r) {
            if v == 1.0 {
                kept += 1;
            } else if v != 0.0 {
                return Err(Error::config("Bernoulli mask entries must be 0 or 1"));
            }
        }
        out.push(kept as f64 * ln_keep + (w - kept) as f64 * ln_drop);
    }
    Ok(LogProb {
        rows: out,
        saturated: saturated * rows * w,
    })
}

/// Analytic `KL(q || p)` per row, for matching families.
pub fn kl_site(q: &MaskDist, p: &MaskDist) -> Result<LogProb> {
    let (tq, tp) = (q.params(), p.params());
    if tq.shape() != tp.shape() {
        return Err(Error::config("KL operands must have the same shape"));
    }
    let (rows, w) = (tq.rows(), tq.row_len());
    match (q, p) {
        (MaskDist::Bernoulli { .. }, MaskDist::Bernoulli { .. }) => {
            let mut saturated = 0;
            let qc: Vec<f64> = tq.data().iter().map(|&x| clamp_prob(x, &mut saturated)).collect();
            let pc: Vec<f64> = tp.data().iter().map(|&x| clamp_prob(x, &mut saturated)).collect();
            let rows = per_row(rows, w, |i| {
                let (a, b) = (qc[i], pc[i]);
                a * (a / b).ln() + (1.0 - a) * ((1.0 - a) / (1.0 - b)).ln()
            });
            Ok(LogProb { rows, saturated })
        }
        (MaskDist::Gaussian { var: vq }, MaskDist::Gaussian { var: vp }) => {
            let (a, b) = (vq.data(), vp.data());
            let rows = per_row(rows, w, |i| 0.5 * (a[i] / b[i] - 1.0 + (b[i] / a[i]).ln()));
            Ok(LogProb { rows, saturated: 0 })
        }
        _ => Err(Error::config("KL between different mask families")),
    }
}

/// Per-row `sum z ln p + (1 - z) ln(1 - p)` on the tape, `keep: [B, C]`.
pub fn bernoulli_log_pmf_var(g: &mut Graph, z: &Tensor, keep: Var) -> Result<Var> {
    if g.shape(keep) != z.shape() {
        return Err(Error::config("mask and keep-probability shapes differ"));
    }
    let p = g.clamp(keep, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let lp = g.log(p)?;
    let np = g.neg(p)?;
    let q = g.add_scalar(np, 1.0)?;
    let lq = g.log(q)?;
    let zc = g.constant(z.clone());
    let one_minus_z = g.constant(z.map(|v| 1.0 - v));
    let a = g.mul(zc, lp)?;
    let b = g.mul(one_minus_z, lq)?;
    let s = g.add(a, b)?;
    per_row_var(g, s)
}

fn per_row_var(g: &mut Graph, x: Var) -> Result<Var> {
    if g.shape(x).len() <= 1 {
        return Ok(x);
    }
    g.reduce_sum(x, &[0])
}

/// Per-row analytic Gaussian KL between `N(1, exp(t alpha))` and the
/// shared prior `N(1, exp(t eta))`: `1/2 (e^d - 1 - d)` with
/// `d = t (alpha - eta)`, summed over entries.
pub fn gaussian_kl_var(g: &mut Graph, alpha: Var, eta: Var, t: f64) -> Result<Var> {
    let shape = g.shape(alpha).to_vec();
    let eta_b = g.broadcast(eta, &shape, &[])?;
    let diff = g.sub(alpha, eta_b)?;
    let d = g.scale(diff, t)?;
    let e = g.exp(d)?;
    let e1 = g.add_scalar(e, -1.0)?;
    let inner = g.sub(e1, d)?;
    let half = g.scale(inner, 0.5)?;
    per_row_var(g, half)
}

/// Relaxed Bernoulli mask `sigmoid((logit + ln u - ln(1 - u)) / temperature)`
/// for a global scalar `logit`, broadcast to `shape`.
///
/// Returns the mask and the uniforms used.
pub fn concrete_relaxed_mask(
    g: &mut Graph,
    logit: Var,
    shape: &[usize],
    temperature: f64,
    rng: &mut RngStream,
) -> Result<(Var, Tensor)> {
    let n: usize = shape.iter().product();
    let u = Tensor::new(shape.to_vec(), rng.uniforms(n))?;
    let z = concrete_from_uniforms(g, logit, &u, temperature)?;
    Ok((z, u))
}

pub fn concrete_from_uniforms(
    g: &mut Graph,
    logit: Var,
    u: &Tensor,
    temperature: f64,
) -> Result<Var> {
    let noise = u.map(|u| {
        let u = u.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        u.ln() - (1.0 - u).ln()
    });
    let l = g.broadcast(logit, u.shape(), &[])?;
    let nc = g.constant(noise);
    let s = g.add(l, nc)?;
    let s = g.scale(s, 1.0 / temperature)?;
    g.sigmoid(s)
}
