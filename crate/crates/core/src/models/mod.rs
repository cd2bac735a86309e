//! The MLP classifier, its forward modes and predictive sampling.

mod checkpoint;
mod mlp;

pub use checkpoint::{read_checkpoint, write_checkpoint, checkpoint_to_string, checkpoint_from_str};
pub use mlp::{
    log_likelihood, Forward, MaskMode, MaskTrace, Mlp, MlpSpec, Noise, ParamGroups, SiteTrace,
    SiteVars,
};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, RngStream, Tensor};

/// `K` predictive probability vectors for one input, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveSampleSet {
    classes: usize,
    probs: Vec<f64>,
}

impl PredictiveSampleSet {
    /// Every row must have `classes` entries; rows are probability vectors.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || classes == 0 {
            return Err(Error::usage("empty predictive sample set"));
        }
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::usage("ragged predictive samples"));
        }
        Ok(PredictiveSampleSet {
            classes,
            probs: rows.into_iter().flatten().collect(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Number of samples `K`.
    pub fn len(&self) -> usize {
        self.probs.len() / self.classes
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn sample(&self, k: usize) -> &[f64] {
        &self.probs[k * self.classes..(k + 1) * self.classes]
    }

    pub fn samples(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.classes)
    }

    /// The `K` draws of one class probability.
    pub fn class_draws(&self, c: usize) -> Vec<f64> {
        self.samples().map(|s| s[c]).collect()
    }

    /// Predictive mean over the samples.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.classes];
        for s in self.samples() {
            for (a, b) in m.iter_mut().zip(s) {
                *a += b;
            }
        }
        let k = self.len() as f64;
        m.iter_mut().for_each(|v| *v /= k);
        m
    }

    /// Arg-max of the predictive mean; ties go to the lowest index.
    pub fn top_class(&self) -> usize {
        argmax(&self.mean())
    }

    /// Concatenates the samples of several sets for the same input.
    pub fn pool(sets: &[PredictiveSampleSet]) -> Result<Self> {
        let first = sets.first().ok_or_else(|| Error::usage("nothing to pool"))?;
        if sets.iter().any(|s| s.classes != first.classes) {
            return Err(Error::usage("pooled sets disagree on class count"));
        }
        Ok(PredictiveSampleSet {
            classes: first.classes,
            probs: sets.iter().flat_map(|s| s.probs.iter().copied()).collect(),
        })
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Class probabilities `[B, classes]` with every mask at its mean.
pub fn predict_point(mlp: &Mlp, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    // Expected mode never draws.
    let mut rng = RngStream::new(0, crate::tensor::StreamId::Eval);
    let f = mlp.forward(&mut g, store, x, MaskMode::Expected, &mut rng)?;
    Ok(g.value(f.log_probs).map(f64::exp))
}

/// `k` stochastic forward passes over a batch, returned per input.
pub fn predictive_samples(
    mlp: &Mlp,
    store: &ParamStore,
    x: &Tensor,
    k: usize,
    rng: &mut RngStream,
) -> Result<Vec<PredictiveSampleSet>> {
    if k == 0 {
        return Err(Error::config("need at least one predictive sample"));
    }
    let rows = x.rows();
    let classes = mlp.classes();
    let mut per_input: Vec<Vec<f64>> = vec![Vec::with_capacity(k * classes); rows];
    for _ in 0..k {
        let mut g = Graph::new();
        let f = mlp.forward(&mut g, store, x, MaskMode::Sample { pseudo: false }, rng)?;
        let lp = g.value(f.log_probs);
        for (r, acc) in per_input.iter_mut().enumerate() {
            acc.extend(lp.row(r).iter().map(|v| v.exp()));
        }
    }
    Ok(per_input
        .into_iter()
        .map(|probs| PredictiveSampleSet { classes, probs })
        .collect())
}
