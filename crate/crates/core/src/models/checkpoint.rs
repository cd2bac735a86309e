//! Bit-exact text checkpoints: every `f64` is written as the hex of its
//! IEEE-754 bit pattern.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

const MAGIC: &str = "ctxdrop-checkpoint v1";
const PER_LINE: usize = 8;

pub fn checkpoint_to_string(store: &ParamStore) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "params {}", store.len());
    for (_, name, t) in store.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let _ = writeln!(out, "param {name} {} {}", t.rank(), dims.join(" "));
        for chunk in t.data().chunks(PER_LINE) {
            let words: Vec<String> = chunk.iter().map(|v| format!("{:016x}", v.to_bits())).collect();
            let _ = writeln!(out, "{}", words.join(" "));
        }
    }
    out
}

/// Loads values into a store with the same parameter names and shapes, as
/// built from the same configuration.
pub fn checkpoint_from_str(text: &str, store: &mut ParamStore) -> Result<()> {
    let mut lines = text.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, &str)> {
        lines
            .next()
            .ok_or_else(|| Error::data(format!("checkpoint truncated, expected {what}")))
    };
    let (_, magic) = next("header")?;
    if magic.trim() != MAGIC {
        return Err(Error::data(format!("not a checkpoint (header {magic:?})")));
    }
    let (ln, count) = next("parameter count")?;
    let n: usize = count
        .strip_prefix("params ")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::data(format!("line {}: bad parameter count", ln + 1)))?;
    if n != store.len() {
        return Err(Error::data(format!(
            "checkpoint has {n} parameters, model has {}",
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let (ln, head) = next("parameter header")?;
        let fields: Vec<&str> = head.split_whitespace().collect();
        let bad = || Error::data(format!("line {}: bad parameter header", ln + 1));
        if fields.len() < 3 || fields[0] != "param" {
            return Err(bad());
        }
        if fields[1] != store.name(id) {
            return Err(Error::data(format!(
                "line {}: parameter {} where {} was expected",
                ln + 1,
                fields[1],
                store.name(id)
            )));
        }
        let rank: usize = fields[2].parse().map_err(|_| bad())?;
        let dims: Vec<usize> = fields[3..]
            .iter()
            .map(|d| d.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        if dims.len() != rank || dims != store.get(id).shape() {
            return Err(Error::data(format!(
                "line {}: {} has shape {dims:?}, model expects {:?}",
                ln + 1,
                store.name(id),
                store.get(id).shape()
            )));
        }
        let len = store.get(id).len();
        let mut values = Vec::with_capacity(len);
        while values.len() < len {
            let (ln, row) = next("parameter values")?;
            for w in row.split_whitespace() {
                let bits = (w.len() == 16)
                    .then(|| u64::from_str_radix(w, 16).ok())
                    .flatten()
                    .ok_or(())
                    .map_err(|_| Error::data(format!("line {}: bad value {w:?}", ln + 1)))?;
                values.push(f64::from_bits(bits));
            }
        }
        if values.len() != len {
            return Err(Error::data(format!("{}: too many values", store.name(id))));
        }
        store.get_mut(id).data_mut().copy_from_slice(&values);
    }
    if let Some((ln, extra)) = lines.next() {
        if !extra.trim().is_empty() {
            return Err(Error::data(format!("line {}: trailing content", ln + 1)));
        }
    }
    Ok(())
}

pub fn write_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(store))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path, store: &mut ParamStore) -> Result<()> {
    let text = std::fs::read_to_string(path)?;
    checkpoint_from_str(&text, store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", Tensor::new(vec![values.len()], values.to_vec()).unwrap());
        s.add("b", Tensor::scalar(-0.0));
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let vals = [0.1, f64::MIN_POSITIVE, -1e300, 1.0 / 3.0, 5e-324, 2.0, 3.0, 4.0, 5.0, 6.0];
        let src = store(&vals);
        let text = checkpoint_to_string(&src);
        let mut dst = store(&[0.0; 10]);
        checkpoint_from_str(&text, &mut dst).unwrap();
        for id in src.ids() {
            let a: Vec<u64> = src.get(id).data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = dst.get(id).data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mismatches_are_data_errors() {
        let text = checkpoint_to_string(&store(&[1.0, 2.0]));
        let mut wrong = store(&[1.0, 2.0, 3.0]);
        assert!(matches!(checkpoint_from_str(&text, &mut wrong), Err(Error::Data(_))));
        let mut ok = store(&[0.0, 0.0]);
        assert!(matches!(checkpoint_from_str("garbage", &mut ok), Err(Error::Data(_))));
        let cut = &text[..text.len() - 10];
        assert!(checkpoint_from_str(cut, &mut ok).is_err());
    }
}
