// Reverse-mode differentiation on the tape, checked against central
// finite differences.

use ctxdrop::tensor::finite_difference_gradient;
use ctxdrop::{Graph, ParamStore, Result, Tensor};

pub fn run_example() -> Result<()> {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::from_rows(&[vec![0.5, -1.0], vec![0.25, 2.0]])?);
    let b = store.add("b", Tensor::vector(vec![0.1, -0.2]));
    let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.3], vec![0.0, 1.5]])?;
    let labels = [1, 0, 1];

    // Mean negative log-likelihood of a linear softmax classifier.
    let loss = |g: &mut Graph, s: &ParamStore| -> Result<_> {
        let xv = g.constant(x.clone());
        let (wv, bv) = (g.param(s, w), g.param(s, b));
        let logits = g.linear(xv, wv, bv)?;
        let lp = g.log_softmax(logits)?;
        let picked = g.pick(lp, &labels)?;
        let total = g.sum(picked)?;
        g.scale(total, -1.0 / labels.len() as f64)
    };

    let mut g = Graph::new();
    let l = loss(&mut g, &store)?;
    let grads = g.backward(l)?;
    println!("loss = {:.6}", g.value(l).item());

    let numeric = finite_difference_gradient(
        |s| {
            let mut g = Graph::new();
            let l = loss(&mut g, s)?;
            Ok(g.value(l).item())
        },
        &mut store,
        &[w, b],
        1e-6,
    )?;
    for (id, fd) in [w, b].into_iter().zip(&numeric) {
        let analytic = grads.param_or_zeros(id, &store);
        let err = analytic
            .data()
            .iter()
            .zip(fd.data())
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        println!("{:>2}: analytic {:?}  max |analytic - fd| = {err:.2e}", store.name(id), analytic.data());
        assert!(err < 1e-8);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
