use super::*;
use crate::dropout::{bernoulli_from_uniforms, SiteConfig};
use crate::models::{MlpSpec, Noise, SiteTrace};
use crate::tensor::{finite_difference_gradient, StreamId};

fn net(widths: Vec<usize>, variant: Variant, t: f64, seed: u64) -> (Mlp, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(seed, StreamId::Init);
    let cfg = SiteConfig {
        variant,
        t,
        ..SiteConfig::default()
    };
    let mlp = Mlp::new(MlpSpec::uniform(widths, Some(cfg)), &mut store, &mut rng).unwrap();
    (mlp, store)
}

fn inputs(rows: usize, width: usize, seed: u64) -> Tensor {
    let mut r = RngStream::new(seed, StreamId::Custom(5));
    Tensor::new(vec![rows, width], r.normals(rows * width)).unwrap()
}

fn repeat_rows(x: &Tensor, y: &[usize], times: usize) -> (Tensor, Vec<usize>) {
    let idx: Vec<usize> = (0..times).flat_map(|_| 0..x.rows()).collect();
    (x.select_rows(&idx), idx.iter().map(|&i| y[i]).collect())
}

fn zero_encoder_weights(mlp: &Mlp, store: &mut ParamStore) {
    for s in mlp.sites() {
        let h = *s.head().unwrap();
        store.get_mut(h.w1).data_mut().fill(0.0);
        store.get_mut(h.w2).data_mut().fill(0.0);
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[test]
fn estimator_names_round_trip() {
    for e in Estimator::ALL {
        assert_eq!(e.name().parse::<Estimator>().unwrap(), e);
    }
    assert!(matches!("arm".parse::<Estimator>(), Err(Error::Usage(_))));
    assert!(Estimator::Reparam.check(Some(Variant::ContextualBernoulli)).is_err());
    assert!(Estimator::Backprop.check(Some(Variant::ContextualGaussian)).is_err());
    assert!(Estimator::ArmSequential.check(Some(Variant::ContextualBernoulli)).is_ok());
}

#[test]
fn reward_equals_log_likelihood_when_q_matches_prior() {
    let (mlp, mut store) = net(vec![3, 4, 2], Variant::ContextualBernoulli, 0.01, 1);
    zero_encoder_weights(&mlp, &mut store);
    let x = inputs(5, 3, 2);
    let mut g = Graph::new();
    let mut rng = RngStream::new(3, StreamId::Masks);
    let f = mlp.forward(&mut g, &store, &x, MaskMode::Sample { pseudo: false }, &mut rng).unwrap();
    let ll = log_likelihood(&mut g, f.log_probs, &[0, 1, 1, 0, 1]).unwrap();
    let terms = reward_r(&mlp, &store, &f.trace, g.value(ll).data()).unwrap();
    for (r, l) in terms.reward().iter().zip(g.value(ll).data()) {
        assert!((r - l).abs() < 1e-12);
    }
}

#[test]
fn reward_of_uniform_two_class_output_is_ln_half() {
    let (mlp, mut store) = net(vec![3, 4, 2], Variant::ContextualBernoulli, 0.01, 1);
    zero_encoder_weights(&mlp, &mut store);
    let last = mlp.layer(1);
    store.get_mut(last.0).data_mut().fill(0.0);
    store.get_mut(last.1).data_mut().fill(0.0);
    let x = inputs(2, 3, 4);
    let mut g = Graph::new();
    let mut rng = RngStream::new(3, StreamId::Masks);
    let f = mlp.forward(&mut g, &store, &x, MaskMode::Sample { pseudo: false }, &mut rng).unwrap();
    let ll = log_likelihood(&mut g, f.log_probs, &[0, 1]).unwrap();
    let r = reward_r(&mlp, &store, &f.trace, g.value(ll).data()).unwrap().reward();
    for v in r {
        assert!((v - 0.5f64.ln()).abs() < 1e-15);
    }
}

#[test]
fn elbo_of_uniform_ten_class_predictive() {
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(0, StreamId::Init);
    let mlp = Mlp::new(MlpSpec::uniform(vec![4, 10], None), &mut store, &mut rng).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let x = inputs(3, 4, 1);
    let (ll, kl) = elbo(&mlp, &store, Batch::new(&x, &[1, 5, 9]).unwrap(), 60_000, &mut rng).unwrap();
    for (l, k) in ll.iter().zip(&kl) {
        assert!((l - k - 0.1f64.ln()).abs() < 1e-14);
    }
}

#[test]
fn kl_makes_elbo_a_lower_bound() {
    let (mlp, store) = net(vec![3, 4, 2], Variant::ContextualBernoulli, 1.0, 5);
    let x = inputs(20, 3, 6);
    let y: Vec<usize> = (0..20).map(|i| i % 2).collect();
    let mut rng = RngStream::new(1, StreamId::Masks);
    let (ll, kl) = elbo(&mlp, &store, Batch::new(&x, &y).unwrap(), 20, &mut rng).unwrap();
    assert!(kl.iter().all(|&k| k >= 0.0));
    assert!(kl.iter().any(|&k| k > 0.0));
    assert!(ll.iter().zip(&kl).all(|(l, k)| l - k <= *l));
}

#[test]
fn enumeration_matches_likelihood_minus_analytic_kl_on_one_site() {
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(8, StreamId::Init);
    let cfg = SiteConfig {
        variant: Variant::ContextualBernoulli,
        t: 1.0,
        ..SiteConfig::default()
    };
    let mlp = Mlp::new(
        MlpSpec {
            widths: vec![4, 3, 2],
            sites: vec![None, Some(cfg)],
        },
        &mut store,
        &mut rng,
    )
    .unwrap();
    let x = inputs(2, 4, 9);
    let y = [1, 0];
    let exact = exact_elbo_grad_bruteforce(&mlp, &store, Batch::new(&x, &y).unwrap()).unwrap();
    assert_eq!(exact.bits, 3);
    for p in &exact.total_probability {
        assert!((p - 1.0).abs() < 1e-12);
    }
    // With one site the logits do not depend on the mask, so the KL is the
    // analytic one for those logits.
    let mut g = Graph::new();
    let f = mlp.forward(&mut g, &store, &x, MaskMode::Sample { pseudo: false }, &mut rng).unwrap();
    let (kl, _) = analytic_kl(&mlp, &store, &f.trace).unwrap();
    let want = exact.expected_log_likelihood - mean(&kl);
    assert!((exact.elbo - want).abs() < 1e-10, "{} vs {want}", exact.elbo);
}

#[test]
fn enumeration_of_one_bit_matches_hand_formula() {
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(10, StreamId::Init);
    let cfg = SiteConfig {
        variant: Variant::ContextualBernoulli,
        t: 1.0,
        gamma: 1,
        ..SiteConfig::default()
    };
    let mlp = Mlp::new(
        MlpSpec {
            widths: vec![1, 2],
            sites: vec![Some(cfg)],
        },
        &mut store,
        &mut rng,
    )
    .unwrap();
    zero_encoder_weights(&mlp, &mut store);
    let site = mlp.site(0).unwrap();
    let b2 = site.head().unwrap().b2;
    let prior = site.prior().unwrap();
    store.get_mut(b2).data_mut()[0] = 0.3;
    store.get_mut(prior).data_mut()[0] = -0.4;
    let x = Tensor::new(vec![1, 1], vec![1.7]).unwrap();
    let y = [1usize];
    let exact = exact_elbo_grad_bruteforce(&mlp, &store, Batch::new(&x, &y).unwrap()).unwrap();

    let (w, b) = mlp.layer(0);
    let (w, b) = (store.get(w).data().to_vec(), store.get(b).data().to_vec());
    let ll = |z: f64| {
        let l: Vec<f64> = (0..2).map(|k| b[k] + w[k] * 1.7 * z).collect();
        l[1] - (l[0].exp() + l[1].exp()).ln()
    };
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let (q, p) = (sig(0.3), sig(-0.4));
    let r1 = ll(1.0) + p.ln() - q.ln();
    let r0 = ll(0.0) + (1.0 - p).ln() - (1.0 - q).ln();
    assert!((exact.elbo - (q * r1 + (1.0 - q) * r0)).abs() < 1e-12);

    // d/d(alpha) [q r1 + (1-q) r0] = q(1-q)(r1 - r0) + q dr1 + (1-q) dr0,
    // with dr1 = -(1-q) and dr0 = q, which cancel.
    let d_alpha = q * (1.0 - q) * (r1 - r0);
    assert!((exact.grads[b2.index()].data()[0] - d_alpha).abs() < 1e-12);
    let d_eta = q * (1.0 - p) - (1.0 - q) * p;
    assert!((exact.grads[prior.index()].data()[0] - d_eta).abs() < 1e-12);
}

#[test]
fn enumeration_refuses_too_many_bits() {
    let (mlp, store) = net(vec![17, 2], Variant::ContextualBernoulli, 1.0, 1);
    let x = inputs(1, 17, 1);
    assert!(matches!(
        exact_elbo_grad_bruteforce(&mlp, &store, Batch::new(&x, &[0]).unwrap()),
        Err(Error::Usage(_))
    ));
}

fn sampled_trace(mlp: &Mlp, store: &ParamStore, x: &Tensor, seed: u64) -> MaskTrace {
    let mut g = Graph::new();
    let mut rng = RngStream::new(seed, StreamId::Masks);
    mlp.forward(&mut g, store, x, MaskMode::Sample { pseudo: false }, &mut rng)
        .unwrap()
        .trace
}

#[test]
fn prior_gradient_matches_closed_form() {
    let (mlp, store) = net(vec![5, 6, 3], Variant::ContextualBernoulli, 0.01, 2);
    let x = inputs(4, 5, 3);
    let y = [0, 2, 1, 1];
    let trace = sampled_trace(&mlp, &store, &x, 4);
    let grads = decoder_and_prior_grad(&mlp, &store, Batch::new(&x, &y).unwrap(), &trace).unwrap();
    for st in &trace.sites {
        let site = mlp.site(st.position).unwrap();
        let eta = store.get(site.prior().unwrap()).item();
        let k = st.z.sum();
        let n = st.z.len() as f64;
        let want = 0.01 * (k - n * scaled_sigmoid(eta, 0.01)) / 4.0;
        let got = grads[site.prior().unwrap().index()].item();
        assert!(rel_err(got, want) < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn decoder_gradient_matches_finite_differences_with_replayed_masks() {
    let (mlp, mut store) = net(vec![5, 6, 3], Variant::ContextualBernoulli, 0.01, 2);
    let x = inputs(4, 5, 3);
    let y = [0, 2, 1, 1];
    let trace = sampled_trace(&mlp, &store, &x, 4);
    let batch = Batch::new(&x, &y).unwrap();
    let grads = decoder_and_prior_grad(&mlp, &store, batch, &trace).unwrap();
    let theta = mlp.param_groups().theta;
    let fd = finite_difference_gradient(
        |s| {
            let mut g = Graph::new();
            let mut rng = RngStream::new(0, StreamId::Masks);
            let f = mlp.forward(&mut g, s, &x, MaskMode::Replay(&trace), &mut rng)?;
            let ll = log_likelihood(&mut g, f.log_probs, &y)?;
            Ok(g.value(ll).sum() / 4.0)
        },
        &mut store,
        &theta,
        1e-6,
    )
    .unwrap();
    for (id, num) in theta.iter().zip(&fd) {
        for (a, b) in grads[id.index()].data().iter().zip(num.data()) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1e-3), "{a} vs {b}");
        }
    }
}

#[test]
fn dropped_units_give_zero_downstream_weight_rows() {
    let (mlp, store) = net(vec![5, 6, 3], Variant::ContextualBernoulli, 0.01, 2);
    let x = inputs(4, 5, 3);
    let y = [0, 2, 1, 1];
    let mut trace = sampled_trace(&mlp, &store, &x, 4);
    let hidden = trace.sites.iter_mut().find(|s| s.position == 1).unwrap();
    hidden.z.data_mut().fill(0.0);
    let grads = decoder_and_prior_grad(&mlp, &store, Batch::new(&x, &y).unwrap(), &trace).unwrap();
    let w = grads[mlp.layer(1).0.index()].clone();
    assert!(w.data().iter().all(|&v| v == 0.0));
}

#[test]
fn encoder_path_sends_no_gradient_to_decoder() {
    let (mlp, store) = net(vec![5, 6, 3], Variant::ContextualBernoulli, 0.01, 2);
    let x = inputs(4, 5, 3);
    let mut g = Graph::new();
    let mut rng = RngStream::new(1, StreamId::Masks);
    let f = mlp.forward(&mut g, &store, &x, MaskMode::Sample { pseudo: true }, &mut rng).unwrap();
    let mut total = g.scalar(0.0);
    for sv in &f.sites {
        let a = sv.alpha.unwrap();
        let c = g.constant(Tensor::new(g.shape(a).to_vec(), rng.normals(g.value(a).len())).unwrap());
        let p = g.mul(a, c).unwrap();
        let s = g.sum(p).unwrap();
        total = g.add(total, s).unwrap();
    }
    let grads = g.backward(total).unwrap();
    for id in mlp.param_groups().theta {
        assert!(grads.param_or_zeros(id, &store).data().iter().all(|&v| v == 0.0));
    }
    let phi = mlp.param_groups().phi;
    assert!(phi.iter().any(|&id| grads.param_or_zeros(id, &store).norm() > 0.0));
}

#[test]
fn saturated_sites_make_arm_a_no_op() {
    let (mlp, mut store) = net(vec![3, 4, 2], Variant::ContextualBernoulli, 1.0, 3);
    zero_encoder_weights(&mlp, &mut store);
    for s in mlp.sites() {
        store.get_mut(s.head().unwrap().b2).data_mut().fill(1e3);
    }
    let x = inputs(6, 3, 1);
    let y = [0, 1, 0, 1, 1, 0];
    let mut rng = RngStream::new(2, StreamId::Masks);
    let batch = Batch::new(&x, &y).unwrap();
    let est = arm_sequential_step(&mlp, &store, batch, &mut rng).unwrap();
    assert_eq!(est.report.forward_passes, 1);
    assert_eq!(est.report.arm_noop_sites, 12);
    for id in mlp.param_groups().phi {
        assert!(est.grads[id.index()].data().iter().all(|&v| v == 0.0));
    }
    let ind = arm_independent_step(&mlp, &store, batch, &mut rng).unwrap();
    assert_eq!(ind.report.forward_passes, 2);
    for id in mlp.param_groups().phi {
        assert!(ind.grads[id.index()].data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn scalar_arm_identity() {
    // r(z) = z, alpha = 0, t = 1: E[(z_true - z_sudo)(1/2 - pi)] = sigma'(0).
    let mut rng = RngStream::new(4, StreamId::Custom(9));
    let n = 200_000;
    let pi = Tensor::new(vec![n, 1], rng.uniforms(n)).unwrap();
    let d = bernoulli_from_uniforms(&Tensor::zeros(&[n, 1]), 1.0, &pi, true);
    let sudo = d.z_sudo.unwrap();
    let g: Vec<f64> = (0..n)
        .map(|i| (d.z_true.data()[i] - sudo.data()[i]) * (0.5 - pi.data()[i]))
        .collect();
    let m = mean(&g);
    let sd = (g.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    assert!((m - 0.25).abs() < 3.0 * sd / (n as f64).sqrt() + 1e-12, "{m}");
}

#[test]
fn score_function_has_zero_mean() {
    let mut rng = RngStream::new(5, StreamId::Custom(9));
    let n = 100_000;
    let alpha = 0.7;
    let keep = scaled_sigmoid(alpha, 1.0);
    let g: Vec<f64> = (0..n)
        .map(|_| {
            let z = f64::from(u8::from(rng.uniform() < keep));
            3.5 * (z - keep)
        })
        .collect();
    let m = mean(&g);
    let sd = (g.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    assert!(m.abs() < 3.0 * sd / (n as f64).sqrt());
}

/// Per-coordinate mean and standard error of `steps` estimator draws.
fn mc_gradient(
    steps: usize,
    mut draw: impl FnMut() -> Vec<Tensor>,
) -> (Vec<f64>, Vec<f64>) {
    let mut sum: Vec<f64> = Vec::new();
    let mut sq: Vec<f64> = Vec::new();
    for _ in 0..steps {
        let flat: Vec<f64> = draw().iter().flat_map(|t| t.data().to_vec()).collect();
        if sum.is_empty() {
            sum = vec![0.0; flat.len()];
            sq = vec![0.0; flat.len()];
        }
        for (i, v) in flat.iter().enumerate() {
            sum[i] += v;
            sq[i] += v * v;
        }
    }
    let n = steps as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let se = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| ((q / n - m * m).max(0.0) * n / (n - 1.0) / n).sqrt())
        .collect();
    (mean, se)
}

fn tiny_problem_at(t: f64) -> (Mlp, ParamStore, Tensor, Vec<usize>) {
    let (mlp, store) = net(vec![2, 3, 2], Variant::ContextualBernoulli, t, 21);
    let x = Tensor::new(vec![2, 2], vec![0.8, -1.2, -0.5, 1.5]).unwrap();
    (mlp, store, x, vec![1, 0])
}

fn tiny_problem() -> (Mlp, ParamStore, Tensor, Vec<usize>) {
    tiny_problem_at(1.0)
}

fn assert_unbiased(kind: Estimator, seed: u64) {
    let (mlp, store, x, y) = tiny_problem();
    let exact = exact_elbo_grad_bruteforce(&mlp, &store, Batch::new(&x, &y).unwrap()).unwrap();
    // Replicated rows make one step average many independent draws.
    let (xr, yr) = repeat_rows(&x, &y, 100);
    let batch = Batch::new(&xr, &yr).unwrap();
    let mut rng = RngStream::new(seed, StreamId::Masks);
    let opts = StepOptions {
        estimator: kind,
        dataset_size: 2,
    };
    let (m, se) = mc_gradient(300, || estimate(&mlp, &store, batch, &opts, &mut rng).unwrap().grads);
    let want: Vec<f64> = exact.grads.iter().flat_map(|t| t.data().to_vec()).collect();
    let groups = mlp.param_groups();
    let checked: Vec<ParamId> = groups.phi.iter().chain(&groups.eta).chain(&groups.theta).copied().collect();
    let mut offset = 0;
    for id in store.ids() {
        let len = store.get(id).len();
        if checked.contains(&id) {
            for i in offset..offset + len {
                // 4 standard errors: many coordinates are tested at once.
                assert!(
                    (m[i] - want[i]).abs() <= 4.0 * se[i] + 1e-9,
                    "{kind} {} [{}]: {} vs {} (se {})",
                    store.name(id),
                    i - offset,
                    m[i],
                    want[i],
                    se[i]
                );
            }
        }
        offset += len;
    }
}

#[test]
fn reinforce_is_unbiased_on_tiny_net() {
    assert_unbiased(Estimator::Reinforce, 31);
}

#[test]
fn sequential_arm_is_unbiased_on_tiny_net() {
    assert_unbiased(Estimator::ArmSequential, 32);
}

#[test]
fn arm_variance_is_below_reinforce() {
    let (mlp, store, x, y) = tiny_problem_at(SiteConfig::default().t);
    let batch = Batch::new(&x, &y).unwrap();
    let phi = mlp.param_groups().phi;
    let trace_cov = |kind| {
        let mut rng = RngStream::new(40, StreamId::Masks);
        let opts = StepOptions {
            estimator: kind,
            dataset_size: 2,
        };
        let (_, se) = mc_gradient(3000, || {
            let g = estimate(&mlp, &store, batch, &opts, &mut rng).unwrap().grads;
            phi.iter().map(|id| g[id.index()].clone()).collect()
        });
        se.iter().map(|s| s * s).sum::<f64>()
    };
    let reinforce = trace_cov(Estimator::Reinforce);
    let seq = trace_cov(Estimator::ArmSequential);
    let ind = trace_cov(Estimator::ArmIndependent);
    assert!(seq < reinforce, "{seq} vs {reinforce}");
    assert!(ind < reinforce, "{ind} vs {reinforce}");
}

#[test]
fn single_site_independent_arm_matches_sequential() {
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(50, StreamId::Init);
    let cfg = SiteConfig {
        variant: Variant::ContextualBernoulli,
        t: 1.0,
        ..SiteConfig::default()
    };
    let mlp = Mlp::new(
        MlpSpec {
            widths: vec![3, 4, 2],
            sites: vec![None, Some(cfg)],
        },
        &mut store,
        &mut rng,
    )
    .unwrap();
    let x = inputs(2, 3, 51);
    let y = [0, 1];
    let exact = exact_elbo_grad_bruteforce(&mlp, &store, Batch::new(&x, &y).unwrap()).unwrap();
    let (xr, yr) = repeat_rows(&x, &y, 100);
    let batch = Batch::new(&xr, &yr).unwrap();
    for kind in [Estimator::ArmSequential, Estimator::ArmIndependent] {
        let opts = StepOptions {
            estimator: kind,
            dataset_size: 2,
        };
        let (m, se) = mc_gradient(300, || estimate(&mlp, &store, batch, &opts, &mut rng).unwrap().grads);
        let want: Vec<f64> = exact.grads.iter().flat_map(|t| t.data().to_vec()).collect();
        for i in 0..m.len() {
            assert!((m[i] - want[i]).abs() <= 4.0 * se[i] + 1e-9, "{kind} coord {i}");
        }
    }
}

fn gaussian_net() -> (Mlp, ParamStore, Tensor, Vec<usize>) {
    let (mlp, mut store) = net(vec![4, 5, 3], Variant::ContextualGaussian, 0.5, 61);
    // Keep encoder pre-activations off the leaky-ReLU kink for rows whose
    // input is all zeros after the ReLU, where finite differences break.
    for s in mlp.sites() {
        store.get_mut(s.head().unwrap().b1).data_mut().fill(0.1);
    }
    (mlp, store, inputs(3, 4, 62), vec![2, 0, 1])
}

fn gaussian_trace(mlp: &Mlp, x: &Tensor, eps: impl Fn(usize) -> f64) -> MaskTrace {
    let mut trace = MaskTrace::default();
    for s in mlp.sites() {
        let e = Tensor::new(vec![x.rows(), s.width], (0..x.rows() * s.width).map(&eps).collect()).unwrap();
        trace.sites.push(SiteTrace {
            position: s.id,
            alpha: None,
            noise: Noise::Gaussian(e),
            z: Tensor::zeros(&[x.rows(), s.width]),
            z_sudo: None,
            shape: vec![x.rows(), s.width],
        });
    }
    trace
}

fn replay_objective(mlp: &Mlp, store: &ParamStore, x: &Tensor, y: &[usize], trace: &MaskTrace) -> Result<f64> {
    let mut g = Graph::new();
    let mut rng = RngStream::new(0, StreamId::Masks);
    let f = mlp.forward(&mut g, store, x, MaskMode::Replay(trace), &mut rng)?;
    let (obj, _, _) = gaussian_objective(&mut g, mlp, store, Batch::new(x, y)?, &f)?;
    Ok(g.value(obj).item())
}

#[test]
fn zero_noise_reduces_to_deterministic_network() {
    let (mlp, store, x, y) = gaussian_net();
    let trace = gaussian_trace(&mlp, &x, |_| 0.0);
    let mut g = Graph::new();
    let mut rng = RngStream::new(0, StreamId::Masks);
    let a = mlp.forward(&mut g, &store, &x, MaskMode::Replay(&trace), &mut rng).unwrap();
    let b = mlp.forward(&mut g, &store, &x, MaskMode::Ones, &mut rng).unwrap();
    assert_eq!(g.value(a.log_probs), g.value(b.log_probs));
    let est = reparam_gaussian_replay(&mlp, &store, Batch::new(&x, &y).unwrap(), &trace).unwrap();
    assert!(est.report.grad_norms.phi > 0.0);
    assert!(est.report.grad_norms.eta > 0.0);
}

#[test]
fn reparam_gradient_matches_finite_differences() {
    let (mlp, mut store, x, y) = gaussian_net();
    let mut r = RngStream::new(63, StreamId::Custom(1));
    let noise = r.normals(64);
    let trace = gaussian_trace(&mlp, &x, |i| noise[i % 64]);
    let est = reparam_gaussian_replay(&mlp, &store, Batch::new(&x, &y).unwrap(), &trace).unwrap();
    let groups = mlp.param_groups();
    let ids: Vec<ParamId> = groups.phi.iter().chain(&groups.eta).copied().collect();
    let fd = finite_difference_gradient(|s| replay_objective(&mlp, s, &x, &y, &trace), &mut store, &ids, 1e-5).unwrap();
    for (id, num) in ids.iter().zip(&fd) {
        for (a, b) in est.grads[id.index()].data().iter().zip(num.data()) {
            let scale = a.abs().max(b.abs());
            assert!((a - b).abs() <= 1e-5 * scale.max(1e-4), "{}: {a} vs {b}", store.name(*id));
        }
    }
}

#[test]
fn reparam_bias_gradient_in_one_unit_case() {
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(70, StreamId::Init);
    let t = 0.5;
    let cfg = SiteConfig {
        variant: Variant::ContextualGaussian,
        t,
        gamma: 1,
        ..SiteConfig::default()
    };
    let mlp = Mlp::new(
        MlpSpec {
            widths: vec![1, 2],
            sites: vec![Some(cfg)],
        },
        &mut store,
        &mut rng,
    )
    .unwrap();
    zero_encoder_weights(&mlp, &mut store);
    let site = mlp.site(0).unwrap();
    let (b2, prior) = (site.head().unwrap().b2, site.prior().unwrap());
    store.get_mut(b2).data_mut()[0] = 0.4;
    store.get_mut(prior).data_mut()[0] = -0.2;
    let x = Tensor::new(vec![1, 1], vec![1.3]).unwrap();
    let y = [0usize];
    let eps = 0.7;
    let trace = gaussian_trace(&mlp, &x, |_| eps);
    let est = reparam_gaussian_replay(&mlp, &store, Batch::new(&x, &y).unwrap(), &trace).unwrap();

    let (w, b) = mlp.layer(0);
    let (w, b) = (store.get(w).data().to_vec(), store.get(b).data().to_vec());
    let std = (0.5 * t * 0.4f64).exp();
    let xt = 1.3 * (1.0 + std * eps);
    let logits = [b[0] + w[0] * xt, b[1] + w[1] * xt];
    let z = logits[0].exp() + logits[1].exp();
    let p = [logits[0].exp() / z, logits[1].exp() / z];
    let dll_dxt = (1.0 - p[0]) * w[0] - p[1] * w[1];
    let dxt_db = 1.3 * eps * 0.5 * t * std;
    let d = t * (0.4 - (-0.2));
    let dkl_db = 0.5 * t * (d.exp() - 1.0);
    let want = dll_dxt * dxt_db - dkl_db;
    assert!(rel_err(est.grads[b2.index()].item(), want) < 1e-12);
    assert!(rel_err(est.grads[prior.index()].item(), dkl_db) < 1e-12);
}

#[test]
fn step_reports_are_consistent() {
    let (mlp, store, x, y) = tiny_problem();
    let mut rng = RngStream::new(80, StreamId::Masks);
    let batch = Batch::new(&x, &y).unwrap();
    for kind in [Estimator::Reinforce, Estimator::ArmSequential, Estimator::ArmIndependent] {
        let opts = StepOptions {
            estimator: kind,
            dataset_size: 2,
        };
        let e = estimate(&mlp, &store, batch, &opts, &mut rng).unwrap();
        let r = &e.report;
        assert!((r.elbo - (r.log_likelihood - r.kl)).abs() < 1e-12);
        assert!(r.elbo.is_finite() && r.kl >= 0.0);
        assert!(r.forward_passes >= 1);
    }
    let opts = StepOptions {
        estimator: Estimator::Reparam,
        dataset_size: 2,
    };
    assert!(matches!(estimate(&mlp, &store, batch, &opts, &mut rng), Err(Error::Usage(_))));
}

#[test]
fn backprop_baselines_train_their_parameters() {
    for variant in [Variant::Concrete, Variant::ContextualGating, Variant::McBernoulli] {
        let (mlp, store) = net(vec![3, 4, 2], variant, 1.0, 90);
        let x = inputs(4, 3, 91);
        let mut rng = RngStream::new(92, StreamId::Masks);
        let opts = StepOptions {
            estimator: Estimator::Backprop,
            dataset_size: 100,
        };
        let e = estimate(&mlp, &store, Batch::new(&x, &[0, 1, 1, 0]).unwrap(), &opts, &mut rng).unwrap();
        assert!(e.report.grad_norms.theta > 0.0);
        match variant {
            Variant::Concrete => {
                assert!(e.report.grad_norms.concrete > 0.0);
                assert!(e.report.kl >= 0.0);
            }
            Variant::ContextualGating => assert!(e.report.grad_norms.phi > 0.0),
            _ => assert_eq!(e.report.kl, 0.0),
        }
    }
}
