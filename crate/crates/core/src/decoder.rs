//! All-MLP decoder: unify every stage to a common width at quarter
//! resolution, concatenate, and classify each pixel.

use crate::error::{bail, Result};
use crate::params::{Bound, LinearParams, ParamLayout};
use crate::tensor::{Element, Tape, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    /// Common width every stage is projected to.
    pub unify_channels: usize,
    pub n_cls: usize,
    pub stage_channels: Vec<usize>,
    /// Hidden width of the fusion MLP.
    pub hidden: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.unify_channels == 0 || self.hidden == 0 || self.n_cls == 0 {
            bail!(Config, "decoder widths and class count must be positive");
        }
        if self.stage_channels.is_empty() || self.stage_channels.len() > 4 {
            bail!(Config, "decoder takes 1 to 4 stages, got {}", self.stage_channels.len());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpDecoderParams {
    pub unify: Vec<LinearParams>,
    pub fuse: LinearParams,
    pub classify: LinearParams,
    pub cfg: DecoderConfig,
}

impl MlpDecoderParams {
    pub fn register(layout: &mut ParamLayout, prefix: &str, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let unify = cfg
            .stage_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| LinearParams::register(layout, &format!("{prefix}.unify{}", i + 1), c, cfg.unify_channels))
            .collect();
        let concat = cfg.unify_channels * cfg.stage_channels.len();
        Ok(MlpDecoderParams {
            unify,
            fuse: LinearParams::register(layout, &format!("{prefix}.fuse"), concat, cfg.hidden),
            classify: LinearParams::register(layout, &format!("{prefix}.classify"), cfg.hidden, cfg.n_cls),
            cfg: cfg.clone(),
        })
    }
}

/// Maps stage features (first at H/2) to `[N, n_cls, H/4, W/4]` logits.
pub fn decode<T: Element>(tape: &mut Tape<T>, bound: &Bound, features: &[Var], params: &MlpDecoderParams) -> Result<Var> {
    if features.len() != params.unify.len() {
        bail!(
            Dimension,
            "decoder expects {} scales, got {}",
            params.unify.len(),
            features.len()
        );
    }
    let [n, _, h2, w2] = tape.value(features[0]).dims4()?;
    let (h4, w4) = (h2 / 2, w2 / 2);
    let mut unified = Vec::with_capacity(features.len());
    for (i, (&f, unify)) in features.iter().zip(&params.unify).enumerate() {
        let [fnb, fc, _, _] = tape.value(f).dims4()?;
        if fnb != n {
            bail!(Dimension, "stage {} has batch {fnb}, stage 1 has {n}", i + 1);
        }
        if fc != unify.in_features {
            bail!(Dimension, "stage {} has {fc} channels, decoder expects {}", i + 1, unify.in_features);
        }
        let u = tape.in_region(&format!("decoder/unify{}", i + 1), |t| -> Result<Var> {
            let u = unify.apply_channels(t, bound, f)?;
            t.bilinear_resize(u, h4, w4)
        })?;
        unified.push(u);
    }
    tape.in_region("decoder/fuse", |t| {
        let cat = t.concat_channels(&unified)?;
        let hidden = params.fuse.apply_channels(t, bound, cat)?;
        let hidden = t.relu(hidden)?;
        params.classify.apply_channels(t, bound, hidden)
    })
}

/// Bilinear upsampling of quarter-resolution logits to `height x width`.
pub fn upsample_logits<T: Element>(tape: &mut Tape<T>, logits: Var, height: usize, width: usize) -> Result<Var> {
    let [_, _, h, w] = tape.value(logits).dims4()?;
    if height != 4 * h || width != 4 * w {
        bail!(Geometry, "target {height}x{width} is not 4x the logit grid {h}x{w}");
    }
    tape.bilinear_resize(logits, height, width)
}
