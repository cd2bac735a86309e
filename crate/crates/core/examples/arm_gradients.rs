// Encoder gradients from REINFORCE and both ARM variants, averaged over
// many draws and compared with the exact gradient obtained by summing
// over every mask configuration of a tiny network.

use ctxdrop::dropout::{SiteConfig, Variant};
use ctxdrop::estimators::{
    arm_independent_step, arm_sequential_step, exact_elbo_grad_bruteforce, reinforce_grad, Batch, Estimate,
};
use ctxdrop::models::{Mlp, MlpSpec};
use ctxdrop::{ParamStore, Result, RngStream, StreamId, Tensor};

type Step = fn(&Mlp, &ParamStore, Batch<'_>, &mut RngStream) -> Result<Estimate>;

pub fn run_example() -> Result<()> {
    let site = SiteConfig {
        variant: Variant::ContextualBernoulli,
        t: 1.0,
        ..SiteConfig::default()
    };
    let mut store = ParamStore::new();
    let mlp = Mlp::new(
        MlpSpec::uniform(vec![2, 3, 2], Some(site)),
        &mut store,
        &mut RngStream::new(21, StreamId::Init),
    )?;
    let x = Tensor::from_rows(&[vec![0.8, -1.2], vec![-0.5, 1.5]])?;
    let y = [1, 0];
    let batch = Batch::new(&x, &y)?;

    let exact = exact_elbo_grad_bruteforce(&mlp, &store, batch)?;
    let phi = mlp.param_groups().phi;
    let flat = |grads: &[Tensor]| -> Vec<f64> {
        phi.iter().flat_map(|id| grads[id.index()].data().to_vec()).collect()
    };
    let target = flat(&exact.grads);
    println!("exact ELBO {:.5} over {} mask bits", exact.elbo, exact.bits);

    let steps = 4000;
    let estimators: [(&str, Step); 3] = [
        ("reinforce", reinforce_grad),
        ("arm-sequential", arm_sequential_step),
        ("arm-independent", arm_independent_step),
    ];
    for (name, step) in estimators {
        let mut rng = RngStream::new(5, StreamId::Masks);
        let mut sum = vec![0.0; target.len()];
        let mut sq = vec![0.0; target.len()];
        for _ in 0..steps {
            let g = flat(&step(&mlp, &store, batch, &mut rng)?.grads);
            for i in 0..g.len() {
                sum[i] += g[i];
                sq[i] += g[i] * g[i];
            }
        }
        let n = steps as f64;
        let var: f64 = (0..sum.len()).map(|i| sq[i] / n - (sum[i] / n).powi(2)).sum();
        let err: f64 = (0..sum.len())
            .map(|i| (sum[i] / n - target[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        println!("{name:<16} |mean - exact| {err:.4}   total variance {var:.4}");
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
