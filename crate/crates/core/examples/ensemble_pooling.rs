// Pooling the predictive samples of independently trained models.

use ctxdrop::harness::{combine_members, prepare_data, sample_sets, score, train_model, DatasetKind, EvalSummary, RunConfig};
use ctxdrop::uncertainty::ensemble_combine;
use ctxdrop::Result;

pub fn run_example() -> Result<()> {
    let cfg = RunConfig {
        dataset: DatasetKind::Synthetic,
        widths: vec![8, 24, 3],
        batch_size: 32,
        epochs: 4,
        t: 1.0,
        k: 10,
        noise_var: 1.0,
        ..RunConfig::default()
    };
    let data = prepare_data(&cfg)?;
    let mut members = Vec::new();
    for seed in 0..3 {
        let m = train_model(&cfg, seed, &data.train, None, &mut |_| {})?;
        let sets = sample_sets(&m.mlp, &m.store, &data.test, cfg.k, seed)?;
        let records = score(&sets, &data.test.y, &cfg.thresholds)?;
        let s = EvalSummary::from_records(&records, cfg.k, &cfg.thresholds)?;
        println!("member {seed}: accuracy {:.4}  PAvPU(0.05) {:.4}", s.accuracy, s.pavpu_at(0.05).unwrap_or(f64::NAN));
        members.push(sets);
    }

    // A one-model "ensemble" is that model's samples, untouched.
    assert_eq!(ensemble_combine(&members[0][..1])?, members[0][0]);

    let pooled = combine_members(&members)?;
    let records = score(&pooled, &data.test.y, &cfg.thresholds)?;
    let s = EvalSummary::from_records(&records, cfg.k * members.len(), &cfg.thresholds)?;
    println!(
        "ensemble of {}: accuracy {:.4}  PAvPU(0.05) {:.4}  ({} samples per input)",
        members.len(),
        s.accuracy,
        s.pavpu_at(0.05).unwrap_or(f64::NAN),
        pooled[0].len()
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
