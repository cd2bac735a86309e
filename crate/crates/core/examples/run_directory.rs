// The artifacts of a full run: train, evaluate a checkpoint, export
// samples, all on synthetic data in a temporary directory.

use ctxdrop::harness::{run_eval, run_export_samples, run_train, DatasetKind, RunConfig};
use ctxdrop::Result;

pub fn run_example() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let cfg = RunConfig {
        dataset: DatasetKind::Synthetic,
        widths: vec![8, 16, 3],
        batch_size: 64,
        epochs: 2,
        k: 5,
        out: dir.path().join("run"),
        ..RunConfig::default()
    };
    let trained = run_train(&cfg, &mut |e| println!("epoch {} elbo {:.4}", e.epoch, e.elbo))?;
    let mut files: Vec<String> = std::fs::read_dir(&cfg.out)?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect::<std::io::Result<_>>()?;
    files.sort();
    println!("run directory: {}", files.join(", "));

    // Evaluating the stored checkpoint reproduces the training summary.
    let again = run_eval(&RunConfig { out: dir.path().join("eval"), ..cfg.clone() }, Some(&cfg.out.join("model.ckpt")))?;
    println!("accuracy after training {:.4}, from checkpoint {:.4}", trained.accuracy, again.accuracy);
    assert_eq!(trained, again);

    let n = run_export_samples(&RunConfig { out: dir.path().join("samples"), ..cfg.clone() }, Some(&cfg.out.join("model.ckpt")))?;
    println!("exported {n} sample sets");
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
