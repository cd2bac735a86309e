use super::masks::{scaled_sigmoid, scaled_sigmoid_var};
use super::{DropoutSite, Nonlinearity, SiteParams, Variant};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, RngStream, Tensor, Var};

fn masked_dim(shape: &[usize], site: &DropoutSite) -> Result<usize> {
    if shape.len() < 2 {
        return Err(Error::config(format!(
            "activation {shape:?} needs a batch dimension and at least one feature dimension"
        )));
    }
    let dim = site.config.axis + 1;
    if dim >= shape.len() {
        return Err(Error::config(format!(
            "site {}: mask axis {} out of range for per-sample shape {:?}",
            site.id,
            site.config.axis,
            &shape[1..]
        )));
    }
    if shape[dim] != site.width {
        return Err(Error::config(format!(
            "site {}: axis {} has extent {}, expected {}",
            site.id, site.config.axis, shape[dim], site.width
        )));
    }
    Ok(dim)
}

/// Encoder logits `alpha = Phi2(NL(Phi1(avgpool_d(U))))`, shape `[B, C_d]`.
///
/// `u` is `[B, ...]`; pooling averages over every per-sample dimension
/// except the site's axis and is the identity for per-sample vectors.
/// Variational sites read `u` through a stop-gradient barrier, so the
/// encoder never pushes gradient into the main network.
pub fn encoder_logits(g: &mut Graph, store: &ParamStore, u: Var, site: &DropoutSite) -> Result<Var> {
    let head = *site
        .head()
        .ok_or_else(|| Error::config(format!("site {} has no encoder head", site.id)))?;
    let shape = g.shape(u).to_vec();
    let dim = masked_dim(&shape, site)?;
    let input = if site.variant().is_variational() {
        g.stop_gradient(u)
    } else {
        u
    };
    let pooled = if shape.len() == 2 {
        input
    } else {
        g.reduce_mean(input, &[0, dim])?
    };
    let w1 = g.param(store, head.w1);
    let b1 = g.param(store, head.b1);
    let hidden = g.linear(pooled, w1, b1)?;
    let hidden = match site.config.nonlinearity {
        Nonlinearity::LeakyRelu => g.leaky_relu(hidden, site.config.leaky_slope)?,
        Nonlinearity::Relu => g.relu(hidden)?,
    };
    let w2 = g.param(store, head.w2);
    let b2 = g.param(store, head.b2);
    g.linear(hidden, w2, b2)
}

/// Replicates a `[B, C_d]` mask over every per-sample dimension except the
/// site axis, giving a tensor of `target` shape.
pub fn broadcast_mask(g: &mut Graph, z: Var, target: &[usize], axis: usize) -> Result<Var> {
    let zs = g.shape(z).to_vec();
    let dim = axis + 1;
    if zs.len() != 2 || target.len() <= dim || target[0] != zs[0] || target[dim] != zs[1] {
        return Err(Error::config(format!(
            "cannot broadcast mask {zs:?} onto {target:?} at axis {axis}"
        )));
    }
    if target.len() == 2 {
        return Ok(z);
    }
    g.broadcast(z, target, &[0, dim])
}

/// Mask used for point prediction: the mean of the site's mask
/// distribution (keep probabilities for Bernoulli-type sites, ones for
/// Gaussian ones). `alpha` is required for encoder sites.
pub fn expected_mask(
    site: &DropoutSite,
    store: &ParamStore,
    alpha: Option<&Tensor>,
    rows: usize,
) -> Result<Tensor> {
    let shape = [rows, site.width];
    let t = site.config.t;
    let need_alpha = || {
        alpha.ok_or_else(|| Error::usage(format!("site {} needs logits", site.id)))
    };
    Ok(match (site.variant(), &site.params) {
        (Variant::McBernoulli, _) => Tensor::full(&shape, 1.0 - site.config.rate),
        (Variant::McGaussian | Variant::ContextualGaussian, _) => Tensor::ones(&shape),
        (Variant::Concrete, SiteParams::Concrete { logit }) => {
            Tensor::full(&shape, scaled_sigmoid(store.get(*logit).item(), 1.0))
        }
        (Variant::ContextualGating | Variant::ContextualBernoulli, _) => {
            need_alpha()?.map(|a| scaled_sigmoid(a, t))
        }
        (Variant::ContextualGatingDropout, _) => {
            let keep = 1.0 - site.config.rate;
            need_alpha()?.map(|a| scaled_sigmoid(a, t) * keep)
        }
        (Variant::Concrete, _) => unreachable!("concrete site without logit"),
    })
}

/// Deterministic contextual gating `U * broadcast(sigma_t(alpha(U)))`.
///
/// For [`Variant::ContextualGatingDropout`] a fixed-rate Bernoulli mask is
/// applied after the gate when `rng` is given, or its mean when it is not.
pub fn contextual_gating(
    g: &mut Graph,
    store: &ParamStore,
    u: Var,
    site: &DropoutSite,
    rng: Option<&mut RngStream>,
) -> Result<Var> {
    if !matches!(
        site.variant(),
        Variant::ContextualGating | Variant::ContextualGatingDropout
    ) {
        return Err(Error::config(format!(
            "site {} is {}, not a gating site",
            site.id,
            site.variant()
        )));
    }
    let alpha = encoder_logits(g, store, u, site)?;
    let mut gate = scaled_sigmoid_var(g, alpha, site.config.t)?;
    if site.variant() == Variant::ContextualGatingDropout {
        let keep = 1.0 - site.config.rate;
        let shape = g.shape(gate).to_vec();
        let drop = match rng {
            Some(rng) => Tensor::new(
                shape.clone(),
                (0..shape.iter().product::<usize>())
                    .map(|_| f64::from(u8::from(rng.uniform() < keep)))
                    .collect(),
            )?,
            None => Tensor::full(&shape, keep),
        };
        let d = g.constant(drop);
        gate = g.mul(gate, d)?;
    }
    let target = g.shape(u).to_vec();
    let mask = broadcast_mask(g, gate, &target, site.config.axis)?;
    g.mul(u, mask)
}
