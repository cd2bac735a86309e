// Input-dependent mask logits for the three activation layouts: a fully
// connected layer, a convolutional feature map and attention heads.

use ctxdrop::dropout::{
    broadcast_mask, encoder_logits, sample_bernoulli_mask, scaled_sigmoid, DropoutSite, SiteConfig, Variant,
};
use ctxdrop::{Graph, ParamStore, Result, RngStream, StreamId, Tensor};

fn site(width: usize, axis: usize, store: &mut ParamStore, rng: &mut RngStream) -> Result<DropoutSite> {
    let cfg = SiteConfig {
        variant: Variant::ContextualBernoulli,
        axis,
        ..SiteConfig::default()
    };
    DropoutSite::new(0, width, cfg, store, rng)
}

pub fn run_example() -> Result<()> {
    let mut rng = RngStream::new(3, StreamId::Init);
    let mut data = RngStream::new(3, StreamId::Custom(0));
    // (activation shape [B, ...], mask axis, mask width)
    let layouts = [
        ("fully connected", vec![2, 16], 0, 16),
        ("conv (5x5x8)", vec![2, 5, 5, 8], 2, 8),
        ("attention (8 heads x 14 x 14)", vec![2, 8, 14, 14], 0, 8),
    ];
    for (name, shape, axis, width) in layouts {
        let mut store = ParamStore::new();
        let s = site(width, axis, &mut store, &mut rng)?;
        let mut g = Graph::new();
        let n: usize = shape.iter().product();
        let u = g.constant(Tensor::new(shape.clone(), data.normals(n))?);
        let alpha = encoder_logits(&mut g, &store, u, &s)?;
        let draw = sample_bernoulli_mask(g.value(alpha), s.config.t, &mut data, false);
        let z = g.constant(draw.z_true.clone());
        let full = broadcast_mask(&mut g, z, &shape, axis)?;
        let keep: Vec<String> = g
            .value(alpha)
            .row(0)
            .iter()
            .take(4)
            .map(|&a| format!("{:.3}", scaled_sigmoid(a, s.config.t)))
            .collect();
        println!(
            "{name:<30} alpha {:?} -> mask {:?}; keep prob (first 4) {}",
            g.shape(alpha),
            g.shape(full),
            keep.join(" ")
        );
        assert_eq!(g.shape(alpha), &[2, width]);
        assert_eq!(g.shape(full), shape.as_slice());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
