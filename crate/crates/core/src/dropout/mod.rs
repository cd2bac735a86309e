//! Dropout sites: where a mask multiplies activations, how the mask is
//! distributed, and the parameters that shape it.
//!
//! Probability conventions used throughout:
//!
//! - Bernoulli variants: `sigma_t(alpha)` is the probability of KEEPING a
//!   unit (`z = 1`). A dropout rate of 0.2 therefore initializes
//!   `sigma_t = 0.8`.
//! - Gaussian variants: `z ~ N(1, s / (1 - s))` with `s = sigma_t(alpha)`;
//!   `s` plays the dropout-rate role, so rate 0.2 gives standard deviation
//!   0.5.

mod encoder;
mod masks;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use encoder::{broadcast_mask, contextual_gating, encoder_logits, expected_mask};
pub use masks::{
    bernoulli_from_uniforms, bernoulli_log_pmf_var, concrete_from_uniforms, concrete_relaxed_mask, gaussian_kl_var,
    gaussian_mask, gaussian_mask_var, kl_site, logit, mask_log_prob, sample_bernoulli_mask,
    sample_gaussian_mask, scaled_sigmoid, scaled_sigmoid_var, shared_bernoulli_log_prob, BernoulliDraw, GaussianDraw,
    LogProb, MaskDist, PROB_CLAMP,
};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, RngStream, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Fixed-rate Bernoulli dropout, sampled at test time too.
    McBernoulli,
    /// Fixed-variance multiplicative Gaussian noise with mean 1.
    McGaussian,
    /// Relaxed Bernoulli with a learnable global rate per site.
    Concrete,
    /// Deterministic scaling by the encoder's keep probabilities.
    ContextualGating,
    /// Contextual gating followed by fixed-rate Bernoulli dropout.
    ContextualGatingDropout,
    /// Input-dependent Bernoulli masks.
    ContextualBernoulli,
    /// Input-dependent Gaussian masks.
    ContextualGaussian,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::McBernoulli,
        Variant::McGaussian,
        Variant::Concrete,
        Variant::ContextualGating,
        Variant::ContextualGatingDropout,
        Variant::ContextualBernoulli,
        Variant::ContextualGaussian,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::McBernoulli => "mc-bernoulli",
            Variant::McGaussian => "mc-gaussian",
            Variant::Concrete => "concrete",
            Variant::ContextualGating => "contextual-gating",
            Variant::ContextualGatingDropout => "contextual-gating-dropout",
            Variant::ContextualBernoulli => "contextual-bernoulli",
            Variant::ContextualGaussian => "contextual-gaussian",
        }
    }

    /// Carries an encoder head.
    pub fn has_encoder(self) -> bool {
        matches!(
            self,
            Variant::ContextualGating
                | Variant::ContextualGatingDropout
                | Variant::ContextualBernoulli
                | Variant::ContextualGaussian
        )
    }

    /// Has a variational posterior `q(z | x)` and a learned prior.
    pub fn is_variational(self) -> bool {
        matches!(self, Variant::ContextualBernoulli | Variant::ContextualGaussian)
    }

    pub fn is_gaussian(self) -> bool {
        matches!(self, Variant::McGaussian | Variant::ContextualGaussian)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown dropout variant '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Nonlinearity {
    LeakyRelu,
    Relu,
}

/// User-facing description of one dropout site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SiteConfig {
    pub variant: Variant,
    /// Zero-based per-sample dimension that carries the mask; every other
    /// per-sample dimension shares it (spatial positions, query/key grid).
    pub axis: usize,
    /// Encoder reduction ratio: the hidden layer has `ceil(C / gamma)` units.
    pub gamma: usize,
    pub nonlinearity: Nonlinearity,
    pub leaky_slope: f64,
    /// Slope of the scaled sigmoid `1 / (1 + exp(-t * alpha))`.
    pub t: f64,
    /// Dropout rate: fixed for MC variants, the initial value otherwise.
    pub rate: f64,
    /// Relaxation temperature for [`Variant::Concrete`].
    pub temperature: f64,
}

impl Default for SiteConfig {
    fn default() -> Self {
        SiteConfig {
            variant: Variant::ContextualBernoulli,
            axis: 0,
            gamma: 10,
            nonlinearity: Nonlinearity::LeakyRelu,
            leaky_slope: 0.1,
            t: 0.01,
            rate: 0.2,
            temperature: 0.1,
        }
    }
}

impl SiteConfig {
    pub fn with_variant(variant: Variant) -> Self {
        SiteConfig {
            variant,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma < 1 {
            return Err(Error::config("reduction ratio gamma must be >= 1"));
        }
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(Error::config(format!("rate {} outside (0, 1)", self.rate)));
        }
        if !(self.t > 0.0 && self.t.is_finite()) {
            return Err(Error::config("scaled-sigmoid factor t must be positive"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("concrete temperature must be positive"));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::config("leaky slope must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Probability that `sigma_t` of the site's logits should take at
    /// initialization (keep probability for Bernoulli-type sites, variance
    /// ratio for Gaussian ones).
    pub fn initial_probability(&self) -> f64 {
        if self.variant.is_gaussian() {
            self.rate
        } else {
            1.0 - self.rate
        }
    }
}

/// Parameters of the encoder head `Phi2(NL(Phi1(pool(U))))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub hidden: usize,
}

/// What a site learns, by variant. Exactly one parameterization is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SiteParams {
    /// MC variants: the configured rate is used as is.
    Fixed,
    /// Learnable global keep-logit (plain sigmoid).
    Concrete { logit: ParamId },
    /// Gating variants: encoder head only.
    Gating { head: EncoderHead },
    /// Variational contextual sites: encoder head plus a scalar prior logit.
    Contextual { head: EncoderHead, prior: ParamId },
}

/// A configured dropout location with its parameters registered in a
/// [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutSite {
    pub id: usize,
    /// Logit width `C_d`: extent of the masked dimension.
    pub width: usize,
    pub config: SiteConfig,
    pub params: SiteParams,
}

/// `ceil(width / gamma)`, at least 1.
pub fn hidden_width(width: usize, gamma: usize) -> usize {
    width.div_ceil(gamma).max(1)
}

impl DropoutSite {
    /// Registers the site's parameters.
    ///
    /// Encoder weights use He-normal initialization; the output bias is set
    /// so that zero weights reproduce the configured initial rate, and the
    /// prior logit starts at the same rate.
    pub fn new(
        id: usize,
        width: usize,
        config: SiteConfig,
        store: &mut ParamStore,
        rng: &mut RngStream,
    ) -> Result<Self> {
        config.validate()?;
        if width == 0 {
            return Err(Error::config("dropout site width must be positive"));
        }
        let target = logit(config.initial_probability()) / config.t;
        let params = match config.variant {
            Variant::McBernoulli | Variant::McGaussian => SiteParams::Fixed,
            Variant::Concrete => SiteParams::Concrete {
                logit: store.add(
                    format!("site{id}.concrete_logit"),
                    Tensor::scalar(logit(1.0 - config.rate)),
                ),
            },
            Variant::ContextualGating | Variant::ContextualGatingDropout => SiteParams::Gating {
                head: Self::init_head(id, width, &config, target, store, rng),
            },
            Variant::ContextualBernoulli | Variant::ContextualGaussian => {
                let head = Self::init_head(id, width, &config, target, store, rng);
                let prior = store.add(format!("site{id}.prior"), Tensor::scalar(target));
                SiteParams::Contextual { head, prior }
            }
        };
        Ok(DropoutSite {
            id,
            width,
            config,
            params,
        })
    }

    fn init_head(
        id: usize,
        width: usize,
        config: &SiteConfig,
        bias: f64,
        store: &mut ParamStore,
        rng: &mut RngStream,
    ) -> EncoderHead {
        let hidden = hidden_width(width, config.gamma);
        let he = |fan_in: usize, n: usize, rng: &mut RngStream| -> Vec<f64> {
            let std = (2.0 / fan_in as f64).sqrt();
            (0..n).map(|_| std * rng.normal()).collect()
        };
        let w1 = Tensor::new(vec![width, hidden], he(width, width * hidden, rng))
            .expect("encoder w1 shape");
        let w2 = Tensor::new(vec![hidden, width], he(hidden, width * hidden, rng))
            .expect("encoder w2 shape");
        EncoderHead {
            w1: store.add(format!("site{id}.enc.w1"), w1),
            b1: store.add(format!("site{id}.enc.b1"), Tensor::zeros(&[hidden])),
            w2: store.add(format!("site{id}.enc.w2"), w2),
            b2: store.add(format!("site{id}.enc.b2"), Tensor::full(&[width], bias)),
            hidden,
        }
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn head(&self) -> Option<&EncoderHead> {
        match &self.params {
            SiteParams::Gating { head } | SiteParams::Contextual { head, .. } => Some(head),
            _ => None,
        }
    }

    pub fn prior(&self) -> Option<ParamId> {
        match self.params {
            SiteParams::Contextual { prior, .. } => Some(prior),
            _ => None,
        }
    }

    /// Encoder-head parameter ids (`w1, b1, w2, b2`), empty for sites without
    /// a head.
    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.head()
            .map(|h| vec![h.w1, h.b1, h.w2, h.b2])
            .unwrap_or_default()
    }

    /// Keep probability (Bernoulli-type) or variance ratio (Gaussian) of the
    /// learned prior.
    pub fn prior_probability(&self, store: &ParamStore) -> Option<f64> {
        self.prior()
            .map(|p| scaled_sigmoid(store.get(p).item(), self.config.t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::StreamId;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("dropconnect".parse::<Variant>(), Err(Error::Usage(_))));
    }

    #[test]
    fn hidden_width_rounds_up() {
        assert_eq!(hidden_width(784, 10), 79);
        assert_eq!(hidden_width(300, 10), 30);
        assert_eq!(hidden_width(2, 10), 1);
        assert_eq!(hidden_width(8, 1), 8);
    }

    #[test]
    fn exactly_one_parameterization() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(0, StreamId::Init);
        for v in Variant::ALL {
            let site = DropoutSite::new(0, 6, SiteConfig::with_variant(v), &mut store, &mut rng)
                .unwrap();
            match site.params {
                SiteParams::Fixed => assert!(!v.has_encoder() && v != Variant::Concrete),
                SiteParams::Concrete { .. } => assert_eq!(v, Variant::Concrete),
                SiteParams::Gating { .. } => assert!(v.has_encoder() && !v.is_variational()),
                SiteParams::Contextual { .. } => assert!(v.is_variational()),
            }
        }
    }

    #[test]
    fn initialization_targets_configured_rate() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(0, StreamId::Init);
        let bern = DropoutSite::new(
            0,
            4,
            SiteConfig::with_variant(Variant::ContextualBernoulli),
            &mut store,
            &mut rng,
        )
        .unwrap();
        let b2 = store.get(bern.head().unwrap().b2).data()[0];
        assert!((b2 - 4.0f64.ln() / 0.01).abs() < 1e-9);
        assert!((bern.prior_probability(&store).unwrap() - 0.8).abs() < 1e-12);

        let gauss = DropoutSite::new(
            1,
            4,
            SiteConfig::with_variant(Variant::ContextualGaussian),
            &mut store,
            &mut rng,
        )
        .unwrap();
        assert!((gauss.prior_probability(&store).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            SiteConfig {
                gamma: 0,
                ..Default::default()
            },
            SiteConfig {
                rate: 1.0,
                ..Default::default()
            },
            SiteConfig {
                t: 0.0,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }
}
