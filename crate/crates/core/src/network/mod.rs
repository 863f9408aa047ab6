//! The enhancement network: a shared encoder, `T` recurrent units of
//! intra-view enhancement → stage prediction → cross-view alignment and
//! fusion → top-1 routing, and a single-convolution output head.
//!
//! Views travel as a `3 × C × H × W` batch with the primary view in slot 1.

mod model;
mod params;

use serde::{Deserialize, Serialize};

use crate::alignment::TopK;
use crate::alignment::{DEFAULT_K, DEFAULT_PATCH, DEFAULT_RADIUS};
use crate::error::{Error, Result};
use crate::image_io::ImageRGB;
use crate::tensor::{Tape, Var};

pub use model::{residual_attention, stack_views, ForwardOutput, InterOutput, Network, PRIMARY};
pub use params::{param_shapes, ModelParams, CONFIG_RECORD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: usize,
    pub units: usize,
    pub k: usize,
    pub patch: usize,
    pub radius: usize,
    pub se_reduction: usize,
    pub encoder_depth: usize,
    /// Spatial/channel attention inside each unit.
    pub intra_en: bool,
    /// Cross-view alignment and fusion.
    pub inter_af: bool,
    /// Confidence map driven by the stage prediction; when off the averaged
    /// candidate is weighted by 1.
    pub e2a: bool,
    /// Feed top-1 matches into the next unit's spatial attention.
    pub a2e: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 16,
            units: 3,
            k: DEFAULT_K,
            patch: DEFAULT_PATCH,
            radius: DEFAULT_RADIUS,
            se_reduction: 4,
            encoder_depth: 3,
            intra_en: true,
            inter_af: true,
            e2a: true,
            a2e: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(m));
        if self.units == 0 {
            return bad("units must be at least 1".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.patch == 0 || self.encoder_depth == 0 || self.channels == 0 {
            return bad("patch, encoder_depth and channels must be positive".into());
        }
        if self.se_reduction == 0 || !self.channels.is_multiple_of(self.se_reduction) {
            return bad(format!(
                "channels ({}) must be divisible by se_reduction ({})",
                self.channels, self.se_reduction
            ));
        }
        let window = (2 * self.radius + 1).pow(2);
        if self.k > window {
            return bad(format!(
                "k = {} exceeds the {window}-cell search window",
                self.k
            ));
        }
        Ok(())
    }

    /// Whether unit `t` (1-based) receives routed top-1 features.
    pub fn routes_top1_into(&self, t: usize) -> bool {
        t > 1 && self.a2e && self.inter_af
    }
}

/// Result of running a trained model on one triplet.
pub struct Enhanced {
    /// Restored primary view clamped to [0, 1].
    pub restored: ImageRGB,
    /// Stage predictions, clamped the same way.
    pub stages: Vec<ImageRGB>,
    pub alignments: Vec<[TopK; 3]>,
}

/// Enhances `views[primary]` using the other two views as auxiliaries.
pub fn enhance(
    params: &ModelParams<f32>,
    views: &[ImageRGB; 3],
    primary: usize,
) -> Result<Enhanced> {
    for v in views {
        v.ensure_network_size()?;
    }
    let tape = Tape::new();
    let net = Network::new(&tape, params, false)?;
    let out = net.forward(tape.constant(stack_views::<f32>(views, primary)?))?;
    let image = |v: Var| -> Result<ImageRGB> {
        let t = tape.value(v);
        if !t.is_finite() {
            return Err(Error::NumericDomain(
                "network produced non-finite values".into(),
            ));
        }
        Ok(ImageRGB::from_tensor(&t)?.clamped())
    };
    Ok(Enhanced {
        restored: image(out.restored)?,
        stages: out
            .stages
            .iter()
            .map(|&s| image(s))
            .collect::<Result<_>>()?,
        alignments: out.alignments,
    })
}
