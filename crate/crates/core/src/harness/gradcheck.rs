//! Oracle suite behind `ctxdrop gradcheck`: every primitive adjoint and
//! both learned-mask gradients against central finite differences, plus
//! closed-form checks of the ARM identity and the Student-t CDF.

use serde::Serialize;

use crate::dropout::{
    bernoulli_from_uniforms, bernoulli_log_pmf_var, gaussian_kl_var, gaussian_mask_var, scaled_sigmoid_var,
    SiteConfig, Variant,
};
use crate::error::Result;
use crate::estimators::{exact_elbo_grad_bruteforce, reparam_gaussian_replay, Batch};
use crate::models::{MaskTrace, Mlp, MlpSpec, Noise, SiteTrace};
use crate::tensor::{finite_difference_gradient, Graph, ParamId, ParamStore, RngStream, StreamId, Tensor, Var};
use crate::uncertainty::t_cdf;

/// Relative tolerance for analytic versus finite-difference gradients.
pub const GRAD_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// The measured error (or z-score for Monte Carlo checks).
    pub value: f64,
    pub tolerance: f64,
}

impl Check {
    fn new(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            passed: value <= tolerance,
            value,
            tolerance,
        }
    }
}

/// `||a - b|| / max(||a||, ||b||)` over all coordinates, 0 when both vanish.
pub fn relative_error(a: &[Tensor], b: &[Tensor]) -> f64 {
    let (mut diff, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        for (u, v) in x.data().iter().zip(y.data()) {
            diff += (u - v) * (u - v);
            na += u * u;
            nb += v * v;
        }
    }
    let scale = na.max(nb).sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

/// Compares the adjoint of `sum(w * op(inputs))` with finite differences.
fn adjoint_check(name: &str, inputs: Vec<Tensor>, build: &Build) -> Result<Check> {
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("in{i}"), t))
        .collect();
    let weights = {
        let mut g = Graph::new();
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(&store, id)).collect();
        let out = build(&mut g, &vars)?;
        let n = g.value(out).len();
        let mut r = RngStream::new(n as u64, StreamId::Custom(40));
        Tensor::new(g.shape(out).to_vec(), r.normals(n))?
    };
    let objective = |g: &mut Graph, store: &ParamStore| -> Result<Var> {
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(store, id)).collect();
        let out = build(g, &vars)?;
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w)?;
        g.sum(prod)
    };
    let mut g = Graph::new();
    let loss = objective(&mut g, &store)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| grads.param_or_zeros(id, &store)).collect();
    let numeric = finite_difference_gradient(
        |s| {
            let mut g = Graph::new();
            let l = objective(&mut g, s)?;
            Ok(g.value(l).item())
        },
        &mut store,
        &ids,
        FD_STEP,
    )?;
    Ok(Check::new(format!("adjoint {name}"), relative_error(&analytic, &numeric), GRAD_TOL))
}

/// Every differentiable primitive, with inputs kept away from kinks.
pub fn primitive_checks() -> Result<Vec<Check>> {
    let mut r = RngStream::new(17, StreamId::Custom(41));
    let mut rand = |shape: &[usize]| Tensor::new(shape.to_vec(), r.normals(shape.iter().product())).unwrap();
    let off_kink = |t: Tensor| t.map(|v| v.signum() * (0.2 + v.abs()));
    let positive = |t: Tensor| t.map(|v| 0.5 + v.abs());
    let a = rand(&[2, 3]);
    let b = rand(&[2, 3]);
    let clamp_in = rand(&[2, 3]).map(|v| if v.abs() < 0.6 && v.abs() > 0.4 { 0.0 } else { v });
    let cases: Vec<(&str, Vec<Tensor>, Box<Build>)> = vec![
        ("matmul", vec![a.clone(), rand(&[3, 4])], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("linear", vec![a.clone(), rand(&[3, 4]), rand(&[4])], Box::new(|g, v| g.linear(v[0], v[1], v[2]))),
        ("add_bias", vec![a.clone(), rand(&[3])], Box::new(|g, v| g.add_bias(v[0], v[1]))),
        ("add", vec![a.clone(), b.clone()], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![a.clone(), b.clone()], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![a.clone(), b.clone()], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("div", vec![a.clone(), positive(b.clone())], Box::new(|g, v| g.div(v[0], v[1]))),
        ("scale", vec![a.clone()], Box::new(|g, v| g.scale(v[0], 1.7))),
        ("neg", vec![a.clone()], Box::new(|g, v| g.neg(v[0]))),
        ("add_scalar", vec![a.clone()], Box::new(|g, v| g.add_scalar(v[0], 0.3))),
        ("leaky_relu", vec![off_kink(a.clone())], Box::new(|g, v| g.leaky_relu(v[0], 0.1))),
        ("relu", vec![off_kink(a.clone())], Box::new(|g, v| g.relu(v[0]))),
        ("sigmoid", vec![a.clone()], Box::new(|g, v| g.sigmoid(v[0]))),
        ("exp", vec![a.clone()], Box::new(|g, v| g.exp(v[0]))),
        ("log", vec![positive(a.clone())], Box::new(|g, v| g.log(v[0]))),
        ("sqrt", vec![positive(a.clone())], Box::new(|g, v| g.sqrt(v[0]))),
        ("clamp", vec![clamp_in], Box::new(|g, v| g.clamp(v[0], -0.5, 0.5))),
        ("log_softmax", vec![rand(&[2, 4])], Box::new(|g, v| g.log_softmax(v[0]))),
        ("reduce_sum", vec![a.clone()], Box::new(|g, v| g.reduce_sum(v[0], &[1]))),
        ("reduce_mean", vec![a.clone()], Box::new(|g, v| g.reduce_mean(v[0], &[0]))),
        ("sum", vec![a.clone()], Box::new(|g, v| g.sum(v[0]))),
        ("broadcast", vec![rand(&[3])], Box::new(|g, v| g.broadcast(v[0], &[2, 3], &[1]))),
        ("pick", vec![rand(&[2, 4])], Box::new(|g, v| g.pick(v[0], &[1, 3]))),
        ("scaled_sigmoid", vec![a.clone()], Box::new(|g, v| scaled_sigmoid_var(g, v[0], 0.7))),
        (
            "gaussian_mask",
            vec![a.clone()],
            Box::new(move |g, v| gaussian_mask_var(g, v[0], &Tensor::new(vec![2, 3], vec![0.3, -1.1, 0.8, 1.9, -0.4, 0.05]).unwrap(), 0.5)),
        ),
        (
            "bernoulli_log_pmf",
            vec![a.clone()],
            Box::new(|g, v| {
                let keep = scaled_sigmoid_var(g, v[0], 1.0)?;
                bernoulli_log_pmf_var(g, &Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap(), keep)
            }),
        ),
        (
            "gaussian_kl",
            vec![a.clone(), Tensor::scalar(0.4)],
            Box::new(|g, v| gaussian_kl_var(g, v[0], v[1], 0.8)),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, build)| adjoint_check(name, inputs, build.as_ref()))
        .collect()
}

fn small_net(variant: Variant, t: f64, widths: Vec<usize>, seed: u64) -> Result<(Mlp, ParamStore)> {
    let mut store = ParamStore::new();
    let site = SiteConfig {
        variant,
        t,
        ..SiteConfig::default()
    };
    let mlp = Mlp::new(
        MlpSpec::uniform(widths, Some(site)),
        &mut store,
        &mut RngStream::new(seed, StreamId::Init),
    )?;
    Ok((mlp, store))
}

/// Reparameterized encoder and prior gradients of a 2-layer Gaussian
/// contextual network against finite differences with frozen noise.
pub fn reparam_check() -> Result<Check> {
    let (mlp, mut store) = small_net(Variant::ContextualGaussian, 0.5, vec![4, 5, 3], 61)?;
    // Keeps the encoder's leaky ReLU off its kink for all-zero inputs.
    for s in mlp.sites() {
        if let Some(h) = s.head() {
            store.get_mut(h.b1).data_mut().fill(0.1);
        }
    }
    let mut r = RngStream::new(62, StreamId::Custom(42));
    let x = Tensor::new(vec![3, 4], r.normals(12))?;
    let y = [2, 0, 1];
    let mut trace = MaskTrace::default();
    for s in mlp.sites() {
        trace.sites.push(SiteTrace {
            position: s.id,
            alpha: None,
            noise: Noise::Gaussian(Tensor::new(vec![3, s.width], r.normals(3 * s.width))?),
            z: Tensor::zeros(&[3, s.width]),
            z_sudo: None,
            shape: vec![3, s.width],
        });
    }
    let batch = Batch::new(&x, &y)?;
    let est = reparam_gaussian_replay(&mlp, &store, batch, &trace)?;
    let groups = mlp.param_groups();
    let ids: Vec<ParamId> = groups.phi.iter().chain(&groups.eta).copied().collect();
    let numeric = finite_difference_gradient(
        |s| Ok(reparam_gaussian_replay(&mlp, s, Batch::new(&x, &y)?, &trace)?.report.elbo),
        &mut store,
        &ids,
        FD_STEP,
    )?;
    let analytic: Vec<Tensor> = ids.iter().map(|id| est.grads[id.index()].clone()).collect();
    Ok(Check::new("reparam encoder+prior gradient", relative_error(&analytic, &numeric), GRAD_TOL))
}

/// The enumerated ELBO's encoder and prior gradients against finite
/// differences of the enumerated ELBO itself.
pub fn enumeration_check() -> Result<Vec<Check>> {
    let (mlp, mut store) = small_net(Variant::ContextualBernoulli, 1.0, vec![2, 3, 2], 21)?;
    let x = Tensor::new(vec![2, 2], vec![0.8, -1.2, -0.5, 1.5])?;
    let y = [1, 0];
    let batch = Batch::new(&x, &y)?;
    let exact = exact_elbo_grad_bruteforce(&mlp, &store, batch)?;
    let mass = exact
        .total_probability
        .iter()
        .map(|p| (p - 1.0).abs())
        .fold(0.0, f64::max);
    let groups = mlp.param_groups();
    let ids: Vec<ParamId> = groups.phi.iter().chain(&groups.eta).copied().collect();
    let numeric = finite_difference_gradient(
        |s| Ok(exact_elbo_grad_bruteforce(&mlp, s, Batch::new(&x, &y)?)?.elbo),
        &mut store,
        &ids,
        FD_STEP,
    )?;
    let analytic: Vec<Tensor> = ids.iter().map(|id| exact.grads[id.index()].clone()).collect();
    Ok(vec![
        Check::new("enumeration total probability", mass, 1e-12),
        Check::new("enumeration encoder+prior gradient", relative_error(&analytic, &numeric), GRAD_TOL),
    ])
}

/// Monte Carlo mean of the ARM estimator for `r(z) = z` at `alpha = 0`,
/// `t = 1`, whose expectation is `sigma'(0) = 1/4`. Reports
/// `|mean - 1/4|` in standard errors.
pub fn arm_identity_check(draws: usize, seed: u64) -> Result<Check> {
    let mut rng = RngStream::new(seed, StreamId::Custom(43));
    let pi = Tensor::new(vec![draws, 1], rng.uniforms(draws))?;
    let d = bernoulli_from_uniforms(&Tensor::zeros(&[draws, 1]), 1.0, &pi, true);
    let sudo = d.z_sudo.expect("pseudo draw requested");
    let g: Vec<f64> = (0..draws)
        .map(|i| (d.z_true.data()[i] - sudo.data()[i]) * (0.5 - pi.data()[i]))
        .collect();
    let n = draws as f64;
    let mean = g.iter().sum::<f64>() / n;
    let var = g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    Ok(Check::new("ARM scalar identity (standard errors)", (mean - 0.25).abs() / se, 3.0))
}

/// Student-t CDF with one degree of freedom against the Cauchy CDF.
pub fn cauchy_check() -> Result<Check> {
    let mut worst: f64 = 0.0;
    for i in 0..=80 {
        let x = -4.0 + 0.1 * i as f64;
        let exact = 0.5 + x.atan() / std::f64::consts::PI;
        worst = worst.max((t_cdf(x, 1.0)? - exact).abs());
    }
    Ok(Check::new("t cdf vs Cauchy closed form", worst, 1e-10))
}

/// The full suite, in a fixed order.
pub fn run_gradcheck() -> Result<Vec<Check>> {
    let mut checks = primitive_checks()?;
    checks.push(reparam_check()?);
    checks.extend(enumeration_check()?);
    checks.push(arm_identity_check(1_000_000, 1)?);
    checks.push(cauchy_check()?);
    Ok(checks)
}
