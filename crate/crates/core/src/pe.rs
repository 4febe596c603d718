//! Comparison position embeddings and pixel-wise depth fusion baselines.

use std::fmt;
use std::str::FromStr;

use crate::error::{bail, Error, Result};
use crate::params::{Bound, Init, LinearParams, ParamId, ParamLayout};
use crate::tensor::{Element, Tape, Tensor, Var};

/// How position / depth information enters the pyramid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PeKind {
    SinCos,
    Learnable,
    Implicit,
    DepthAdd,
    DepthConcat,
    DepthSao,
}

impl PeKind {
    pub const ALL: [PeKind; 6] = [
        PeKind::SinCos,
        PeKind::Learnable,
        PeKind::Implicit,
        PeKind::DepthAdd,
        PeKind::DepthConcat,
        PeKind::DepthSao,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PeKind::SinCos => "sincos",
            PeKind::Learnable => "learnable",
            PeKind::Implicit => "implicit",
            PeKind::DepthAdd => "depth-add",
            PeKind::DepthConcat => "depth-concat",
            PeKind::DepthSao => "depth-sao",
        }
    }

    pub fn uses_depth(self) -> bool {
        matches!(self, PeKind::DepthAdd | PeKind::DepthConcat | PeKind::DepthSao)
    }
}

impl fmt::Display for PeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PeKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown position embedding kind {s:?}")))
    }
}

/// Fixed 2-D sine/cosine table `[1, c, h, w]`.
///
/// Channels `0..c/2` encode the row index and `c/2..c` the column index. In
/// each half of width `m`, channel `2i` is `sin(pos * w_i)` and `2i + 1` is
/// `cos(pos * w_i)` with `w_i = 10000^(-2i/m)`.
pub fn sincos_pe<T: Element>(h: usize, w: usize, c: usize) -> Result<Tensor<T>> {
    if c == 0 || c % 2 != 0 {
        bail!(Config, "sine/cosine embedding needs an even channel count, got {c}");
    }
    let half = c / 2;
    let value = |ch: usize, pos: usize| -> f64 {
        let i = ch / 2;
        let freq = 10000f64.powf(-((2 * i) as f64) / half as f64);
        let phase = pos as f64 * freq;
        if ch % 2 == 0 {
            phase.sin()
        } else {
            phase.cos()
        }
    };
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = if ch < half { value(ch, y) } else { value(ch - half, x) };
                data.push(T::lit(v));
            }
        }
    }
    Tensor::new(&[1, c, h, w], data)
}

/// Trainable `[1, c, h, w]` table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LearnablePe {
    pub table: ParamId,
    pub shape: [usize; 4],
}

impl LearnablePe {
    pub fn register(layout: &mut ParamLayout, prefix: &str, h: usize, w: usize, c: usize) -> Self {
        LearnablePe {
            table: layout.register(format!("{prefix}.table"), &[1, c, h, w], Init::Normal(0.02), true),
            shape: [1, c, h, w],
        }
    }
}

pub fn learnable_pe<T: Element>(tape: &mut Tape<T>, bound: &Bound, params: &LearnablePe, h: usize, w: usize, c: usize) -> Result<Var> {
    let table = bound[params.table];
    if tape.shape(table) != [1, c, h, w] {
        bail!(
            Config,
            "learnable embedding table {:?} does not cover [1, {c}, {h}, {w}]",
            tape.shape(table)
        );
    }
    Ok(table)
}

/// Depthwise 3x3 conv added residually.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImplicitPe {
    pub weight: ParamId,
    pub bias: ParamId,
    pub channels: usize,
}

impl ImplicitPe {
    pub fn register(layout: &mut ParamLayout, prefix: &str, channels: usize) -> Self {
        ImplicitPe {
            weight: layout.register(format!("{prefix}.weight"), &[channels, 1, 3, 3], Init::TruncNormal(0.02), true),
            bias: layout.register(format!("{prefix}.bias"), &[channels], Init::Zeros, true),
            channels,
        }
    }
}

pub fn implicit_pe<T: Element>(tape: &mut Tape<T>, bound: &Bound, x: Var, params: &ImplicitPe) -> Result<Var> {
    let [_, c, _, _] = tape.value(x).dims4()?;
    if c != params.channels {
        bail!(Config, "implicit embedding built for {} channels, input has {c}", params.channels);
    }
    let pos = tape.conv2d_grouped(x, bound[params.weight], Some(bound[params.bias]), 1, 1, c)?;
    tape.add(x, pos)
}

/// Pixel-wise depth fusion: `proj` lifts depth to the RGB width; `concat`
/// maps the channel concatenation back down for [`PeKind::DepthConcat`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DepthFuseParams {
    pub proj: LinearParams,
    pub concat: Option<LinearParams>,
}

impl DepthFuseParams {
    pub fn register(layout: &mut ParamLayout, prefix: &str, depth_channels: usize, channels: usize, kind: PeKind) -> Result<Self> {
        let concat = match kind {
            PeKind::DepthAdd => None,
            PeKind::DepthConcat => Some(LinearParams::register(layout, &format!("{prefix}.concat"), 2 * channels, channels)),
            other => bail!(Config, "{other} is not a pixel-wise depth fusion"),
        };
        Ok(DepthFuseParams {
            proj: LinearParams::register(layout, &format!("{prefix}.proj"), depth_channels, channels),
            concat,
        })
    }
}

pub fn depth_fuse_baseline<T: Element>(
    tape: &mut Tape<T>,
    bound: &Bound,
    r: Var,
    d: Var,
    kind: PeKind,
    params: &DepthFuseParams,
) -> Result<Var> {
    let rs = tape.value(r).dims4()?;
    let ds = tape.value(d).dims4()?;
    if rs[0] != ds[0] || rs[2..] != ds[2..] {
        bail!(Dimension, "feature {rs:?} and depth {ds:?} disagree on batch or spatial size");
    }
    let projected = params.proj.apply_channels(tape, bound, d)?;
    match (kind, params.concat) {
        (PeKind::DepthAdd, _) => tape.add(r, projected),
        (PeKind::DepthConcat, Some(concat)) => {
            let both = tape.concat_channels(&[r, projected])?;
            concat.apply_channels(tape, bound, both)
        }
        (other, _) => bail!(Config, "{other} is not a pixel-wise depth fusion"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    #[test]
    fn kind_names_round_trip() {
        for k in PeKind::ALL {
            assert_eq!(k.as_str().parse::<PeKind>().unwrap(), k);
        }
        assert!("absolute".parse::<PeKind>().is_err());
    }

    #[test]
    fn sincos_zero_phase_and_odd_width() {
        let pe = sincos_pe::<f64>(4, 4, 8).unwrap();
        assert_eq!(pe.at([0, 0, 0, 0]), 0.0);
        assert_eq!(pe.at([0, 1, 0, 0]), 1.0);
        assert!(matches!(sincos_pe::<f64>(4, 4, 7), Err(Error::Config(_))));
        assert_eq!(pe, sincos_pe::<f64>(4, 4, 8).unwrap());
    }

    #[test]
    fn implicit_with_zero_kernel_is_identity() {
        let mut layout = ParamLayout::default();
        let params = ImplicitPe::register(&mut layout, "pe", 3);
        let mut store: ParamStore<f64> = layout.init(0);
        store.get_mut(params.weight).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_fn(&[1, 3, 5, 5], |i| i as f64 * 0.1));
        let y = implicit_pe(&mut tape, &b, x, &params).unwrap();
        assert_eq!(tape.value(x), tape.value(y));
    }

    #[test]
    fn pixel_fusion_rejects_spatial_mismatch() {
        let mut layout = ParamLayout::default();
        let params = DepthFuseParams::register(&mut layout, "f", 1, 4, PeKind::DepthAdd).unwrap();
        let store: ParamStore<f64> = layout.init(0);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let r = tape.constant(Tensor::zeros(&[1, 4, 4, 4]));
        let d = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(matches!(
            depth_fuse_baseline(&mut tape, &b, r, d, PeKind::DepthAdd, &params),
            Err(Error::Dimension(_))
        ));
    }
}
