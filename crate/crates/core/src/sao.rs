//! Depth spatial-aware optimization: a ConvBlock shared between the RGB and
//! depth branches of each pyramid stage, fused into a position-aware map.

use crate::error::{bail, Result};
use crate::params::{Bound, Init, LinearParams, ParamId, ParamLayout};
use crate::tensor::{Element, Tape, Var};

pub const GN_EPS: f64 = 1e-5;

/// Group count for GroupNorm over `channels`: all of them below 8,
/// otherwise gcd with 8.
pub fn gn_groups(channels: usize) -> usize {
    if channels < 8 {
        return channels.max(1);
    }
    let (mut a, mut b) = (channels, 8usize);
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// One conv3x3 + GroupNorm unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvUnit {
    pub weight: ParamId,
    pub bias: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl ConvUnit {
    fn register(layout: &mut ParamLayout, prefix: &str, cin: usize, cout: usize) -> Self {
        ConvUnit {
            weight: layout.register(format!("{prefix}.weight"), &[cout, cin, 3, 3], Init::TruncNormal(0.02), true),
            bias: layout.register(format!("{prefix}.bias"), &[cout], Init::Zeros, true),
            gamma: layout.register(format!("{prefix}.gn.gamma"), &[cout], Init::Ones, false),
            beta: layout.register(format!("{prefix}.gn.beta"), &[cout], Init::Zeros, false),
            groups: gn_groups(cout),
        }
    }

    fn apply<T: Element>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, bound[self.weight], Some(bound[self.bias]), 1, 1)?;
        tape.group_norm(y, self.groups, bound[self.gamma], bound[self.beta], GN_EPS)
    }
}

/// Parameters of one pyramid stage. A single set serves both modalities.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SaoStageParams {
    pub convs: [ConvUnit; 3],
    /// `Linear(R_F + D_F)`; absent for stages that never fuse depth.
    pub fuse: Option<LinearParams>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl SaoStageParams {
    pub fn register(layout: &mut ParamLayout, prefix: &str, in_channels: usize, out_channels: usize, with_fuse: bool) -> Self {
        let convs = [
            ConvUnit::register(layout, &format!("{prefix}.conv1"), in_channels, out_channels),
            ConvUnit::register(layout, &format!("{prefix}.conv2"), out_channels, out_channels),
            ConvUnit::register(layout, &format!("{prefix}.conv3"), out_channels, out_channels),
        ];
        let fuse = with_fuse.then(|| LinearParams::register(layout, &format!("{prefix}.fuse"), out_channels, out_channels));
        SaoStageParams {
            convs,
            fuse,
            in_channels,
            out_channels,
        }
    }
}

/// RGB and depth features of one stage together with their fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StagePair {
    pub r_f: Var,
    pub d_f: Var,
    pub fused: Var,
}

/// The shared ConvBlock on one branch: three conv3x3+GN passes, a 2x2 max
/// pool after the first, and a skip from the pooled map onto the third.
pub fn conv_block<T: Element>(tape: &mut Tape<T>, bound: &Bound, x: Var, params: &SaoStageParams) -> Result<Var> {
    let [_, c, h, w] = tape.value(x).dims4()?;
    if c != params.in_channels {
        bail!(Config, "stage expects {} input channels, got {c}", params.in_channels);
    }
    if h % 2 != 0 || w % 2 != 0 {
        bail!(Geometry, "stage input {h}x{w} cannot be halved");
    }
    let y = params.convs[0].apply(tape, bound, x)?;
    let pooled = tape.max_pool2d(y, 2, 2)?;
    let y = params.convs[1].apply(tape, bound, pooled)?;
    let y = params.convs[2].apply(tape, bound, y)?;
    tape.add(y, pooled)
}

pub fn sao_stage_forward<T: Element>(
    tape: &mut Tape<T>,
    bound: &Bound,
    r_in: Var,
    d_in: Var,
    params: &SaoStageParams,
) -> Result<StagePair> {
    let (rs, ds) = (tape.value(r_in).dims4()?, tape.value(d_in).dims4()?);
    if rs[0] != ds[0] || rs[2..] != ds[2..] {
        bail!(Dimension, "rgb {rs:?} and depth {ds:?} disagree on batch or spatial size");
    }
    if rs[1] != params.in_channels || ds[1] != params.in_channels {
        bail!(
            Config,
            "stage expects {} channels on both branches, got {} and {}",
            params.in_channels,
            rs[1],
            ds[1]
        );
    }
    let Some(fuse) = params.fuse else {
        bail!(Config, "stage was built without a fusion map");
    };
    let r_f = conv_block(tape, bound, r_in, params)?;
    let d_f = conv_block(tape, bound, d_in, params)?;
    let sum = tape.add(r_f, d_f)?;
    let fused = fuse.apply_channels(tape, bound, sum)?;
    Ok(StagePair { r_f, d_f, fused })
}

/// Input projections and stage parameters for the full pyramid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SaoPyramidParams {
    pub rgb_proj: LinearParams,
    pub depth_proj: LinearParams,
    pub stages: Vec<SaoStageParams>,
    /// Rebuild each stage from the projected raw inputs instead of chaining.
    pub recompute: bool,
}

impl SaoPyramidParams {
    pub fn register(layout: &mut ParamLayout, channels: &[usize], recompute: bool) -> Self {
        let c0 = channels[0];
        let rgb_proj = LinearParams::register(layout, "input.rgb_proj", 3, c0);
        let depth_proj = LinearParams::register(layout, "input.depth_proj", 1, c0);
        let stages = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let cin = if i == 0 || recompute { c0 } else { channels[i - 1] };
                SaoStageParams::register(layout, &format!("stage{}", i + 1), cin, c, true)
            })
            .collect();
        SaoPyramidParams {
            rgb_proj,
            depth_proj,
            stages,
            recompute,
        }
    }
}

/// Projects RGB and depth to the first stage width and runs every stage,
/// each consuming the previous stage's branch features.
pub fn sao_pyramid_forward<T: Element>(
    tape: &mut Tape<T>,
    bound: &Bound,
    rgb: Var,
    depth: Var,
    params: &SaoPyramidParams,
) -> Result<Vec<StagePair>> {
    let [n, c, h, w] = tape.value(rgb).dims4()?;
    let [dn, dc, dh, dw] = tape.value(depth).dims4()?;
    if c != 3 || dc != 1 {
        bail!(Dimension, "expected 3-channel rgb and 1-channel depth, got {c} and {dc}");
    }
    if (n, h, w) != (dn, dh, dw) {
        bail!(Dimension, "rgb and depth disagree: {:?} vs {:?}", [n, h, w], [dn, dh, dw]);
    }
    if h % 16 != 0 || w % 16 != 0 {
        bail!(Geometry, "input {h}x{w} is not divisible by 16");
    }
    let (r0, d0) = tape.in_region("sao/input", |t| -> Result<_> {
        Ok((
            params.rgb_proj.apply_channels(t, bound, rgb)?,
            params.depth_proj.apply_channels(t, bound, depth)?,
        ))
    })?;
    let mut pairs: Vec<StagePair> = Vec::with_capacity(params.stages.len());
    for (i, stage) in params.stages.iter().enumerate() {
        pairs.push(tape.in_region(&format!("sao/stage{}", i + 1), |t| {
            let (r_in, d_in) = match pairs.last() {
                None => (r0, d0),
                Some(_) if params.recompute => (
                    t.bilinear_resize(r0, h >> i, w >> i)?,
                    t.bilinear_resize(d0, h >> i, w >> i)?,
                ),
                Some(prev) => (prev.r_f, prev.d_f),
            };
            sao_stage_forward(t, bound, r_in, d_in, stage)
        })?);
    }
    Ok(pairs)
}
