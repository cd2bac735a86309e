// Saving and restoring model parameters bit-exactly.

use ctxdrop::models::{predict_point, read_checkpoint, write_checkpoint, Mlp, MlpSpec};
use ctxdrop::{ParamStore, Result, RngStream, StreamId, Tensor};

pub fn run_example() -> Result<()> {
    let spec = MlpSpec::uniform(vec![5, 7, 3], Some(Default::default()));
    let mut store = ParamStore::new();
    let mlp = Mlp::new(spec.clone(), &mut store, &mut RngStream::new(1, StreamId::Init))?;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.ckpt");
    write_checkpoint(&path, &store)?;
    let text = std::fs::read_to_string(&path)?;
    println!("{}", text.lines().take(3).collect::<Vec<_>>().join("\n"));

    // A model built from another seed, then overwritten from disk.
    let mut restored = ParamStore::new();
    let _ = Mlp::new(spec, &mut restored, &mut RngStream::new(2, StreamId::Init))?;
    read_checkpoint(&path, &mut restored)?;

    let x = Tensor::new(vec![2, 5], RngStream::new(3, StreamId::Custom(0)).normals(10))?;
    let before = predict_point(&mlp, &store, &x)?;
    let after = predict_point(&mlp, &restored, &x)?;
    println!("point predictions identical after reload: {}", before == after);
    assert_eq!(before, after);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
