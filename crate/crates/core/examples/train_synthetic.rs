// Short training runs on Gaussian blobs, one per dropout variant with its
// natural estimator, reporting the ELBO before and after.

use ctxdrop::dropout::Variant;
use ctxdrop::harness::{prepare_data, train_model, DatasetKind, RunConfig, SyntheticSpec};
use ctxdrop::Result;

pub fn run_example() -> Result<()> {
    let synthetic = SyntheticSpec {
        classes: 3,
        dim: 6,
        separation: 3.0,
        train: 384,
        test: 128,
    };
    for variant in [
        Variant::McBernoulli,
        Variant::Concrete,
        Variant::ContextualGating,
        Variant::ContextualBernoulli,
        Variant::ContextualGaussian,
    ] {
        let cfg = RunConfig {
            dataset: DatasetKind::Synthetic,
            synthetic: synthetic.clone(),
            widths: vec![6, 32, 3],
            variant,
            batch_size: 32,
            epochs: 8,
            t: 1.0,
            ..RunConfig::default()
        };
        let data = prepare_data(&cfg)?;
        let trained = train_model(&cfg, 1, &data.train, None, &mut |_| {})?;
        let (first, last) = (&trained.history[0], trained.history.last().expect("epochs > 0"));
        println!(
            "{:<26} {:<16} elbo {:>8.4} -> {:>8.4}",
            variant.name(),
            cfg.estimator().name(),
            first.elbo,
            last.elbo
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
