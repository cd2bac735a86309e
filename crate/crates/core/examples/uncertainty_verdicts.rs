// Certainty decisions from K predictive samples: a paired t-test between
// the two most probable classes, then PAvPU over a set of records.

use ctxdrop::models::PredictiveSampleSet;
use ctxdrop::uncertainty::{certainty_verdict, pavpu, EvalRecord, DEFAULT_THRESHOLDS};
use ctxdrop::{Result, RngStream, StreamId};

/// K softmax samples whose top two classes are `gap` apart on average.
fn samples(gap: f64, noise: f64, rng: &mut RngStream) -> Result<PredictiveSampleSet> {
    let rows = (0..20)
        .map(|_| {
            let a = 0.45 + gap / 2.0 + noise * rng.normal();
            let b = 0.45 - gap / 2.0 + noise * rng.normal();
            vec![a, b, 1.0 - a - b]
        })
        .collect();
    PredictiveSampleSet::new(rows)
}

pub fn run_example() -> Result<()> {
    let mut rng = RngStream::new(11, StreamId::Custom(0));
    let confident = samples(0.5, 0.05, &mut rng)?;
    let torn = samples(0.01, 0.05, &mut rng)?;
    for (name, set) in [("confident", &confident), ("torn", &torn)] {
        let v = certainty_verdict(set, &DEFAULT_THRESHOLDS)?;
        println!(
            "{name:<10} top {} vs {}: t = {:>7.3}, p = {:.4}, certain at {:?}: {:?}",
            v.top, v.runner_up, v.t_stat, v.p_value, v.thresholds, v.certain
        );
    }

    // Label 0 for both: the confident prediction is right, the torn one is
    // right too but uncertain, which PAvPU counts against.
    let records = vec![
        EvalRecord::from_samples(0, 0, &confident, &DEFAULT_THRESHOLDS)?,
        EvalRecord::from_samples(1, 0, &torn, &DEFAULT_THRESHOLDS)?,
        EvalRecord::from_samples(2, 1, &torn, &DEFAULT_THRESHOLDS)?,
    ];
    for tau in DEFAULT_THRESHOLDS {
        println!("PAvPU({tau}) = {:.3}", pavpu(&records, tau)?);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
