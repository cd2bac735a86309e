// Gaussian contextual dropout trained by reparameterization: one step's
// encoder gradient against finite differences with the noise frozen.

use ctxdrop::dropout::{SiteConfig, Variant};
use ctxdrop::estimators::{reparam_gaussian_replay, reparam_gaussian_step, Batch};
use ctxdrop::models::{Mlp, MlpSpec};
use ctxdrop::tensor::finite_difference_gradient;
use ctxdrop::{ParamStore, Result, RngStream, StreamId, Tensor};

pub fn run_example() -> Result<()> {
    let site = SiteConfig {
        variant: Variant::ContextualGaussian,
        t: 0.5,
        ..SiteConfig::default()
    };
    let mut store = ParamStore::new();
    let mlp = Mlp::new(
        MlpSpec::uniform(vec![4, 6, 3], Some(site)),
        &mut store,
        &mut RngStream::new(8, StreamId::Init),
    )?;
    for s in mlp.sites() {
        // Keep the encoder's leaky ReLU away from its kink.
        store.get_mut(s.head().expect("contextual").b1).data_mut().fill(0.1);
    }
    let mut data = RngStream::new(9, StreamId::Custom(0));
    let x = Tensor::new(vec![5, 4], data.normals(20))?;
    let y = [0, 2, 1, 1, 0];
    let batch = Batch::new(&x, &y)?;

    // A sampled step records its noise; replaying it gives a deterministic
    // objective to differentiate numerically.
    let mut rng = RngStream::new(10, StreamId::Masks);
    let sampled = reparam_gaussian_step(&mlp, &store, batch, &mut rng)?;
    println!("sampled step: elbo {:.5}", sampled.report.elbo);

    let mut g = ctxdrop::Graph::new();
    let trace = mlp
        .forward(&mut g, &store, &x, ctxdrop::models::MaskMode::Sample { pseudo: false }, &mut rng)?
        .trace;
    let est = reparam_gaussian_replay(&mlp, &store, batch, &trace)?;
    let phi = mlp.param_groups().phi;
    let fd = finite_difference_gradient(
        |s| Ok(reparam_gaussian_replay(&mlp, s, Batch::new(&x, &y)?, &trace)?.report.elbo),
        &mut store,
        &phi,
        1e-6,
    )?;
    let mut worst: f64 = 0.0;
    for (id, num) in phi.iter().zip(&fd) {
        for (a, b) in est.grads[id.index()].data().iter().zip(num.data()) {
            worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1e-6));
        }
    }
    println!("encoder gradient: max relative error vs finite differences {worst:.2e}");
    assert!(worst < 1e-5);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
