//! End-to-end network: input projections, pyramid stages with depth fusion
//! or a comparison embedding, optional cross-attention per stage, decoder.

use sha2::{Digest, Sha256};

use crate::decoder::{decode, upsample_logits, DecoderConfig, MlpDecoderParams};
use crate::error::{bail, Error, Result};
use crate::kv::{join_list, KvMap};
use crate::lca::{lca_attention_map, lca_forward, LcaParams};
use crate::params::{Bound, LinearParams, ParamLayout, ParamStore};
use crate::pe::{depth_fuse_baseline, implicit_pe, learnable_pe, sincos_pe, DepthFuseParams, ImplicitPe, LearnablePe, PeKind};
use crate::sao::{conv_block, sao_stage_forward, SaoStageParams};
use crate::tensor::{Element, Precision, Tape, Tensor, Var};

pub const IGNORE_LABEL: u8 = 255;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Width of each stage; 1 to 4 stages.
    pub stage_channels: Vec<usize>,
    pub stage_heads: Vec<usize>,
    /// Side of the pooled key/value grid, clamped to the stage size.
    pub pool_size: usize,
    pub n_cls: usize,
    pub decoder_channels: usize,
    pub decoder_hidden: usize,
    pub pe_kind: PeKind,
    pub use_lca: bool,
    /// Without the decoder a 1x1 head on the last stage predicts the mask.
    pub use_decoder: bool,
    /// Feed every stage a resized copy of the input projection instead of
    /// the previous stage's features.
    pub recompute_stages: bool,
    pub input_height: usize,
    pub input_width: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stage_channels: vec![32, 64, 160, 256],
            stage_heads: vec![1, 2, 5, 8],
            pool_size: 7,
            n_cls: 3,
            decoder_channels: 128,
            decoder_hidden: 128,
            pe_kind: PeKind::DepthSao,
            use_lca: true,
            use_decoder: true,
            recompute_stages: false,
            input_height: 64,
            input_width: 64,
            seed: 0,
            precision: Precision::Standard,
        }
    }
}

const CONFIG_KEYS: [&str; 14] = [
    "stage_channels",
    "stage_heads",
    "pool_size",
    "n_cls",
    "decoder_channels",
    "decoder_hidden",
    "pe_kind",
    "use_lca",
    "use_decoder",
    "recompute_stages",
    "input_height",
    "input_width",
    "seed",
    "precision",
];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let stages = self.stage_channels.len();
        if !(1..=4).contains(&stages) {
            bail!(Config, "1 to 4 stages supported, got {stages}");
        }
        if self.stage_heads.len() != stages {
            bail!(Config, "{stages} stage widths but {} head counts", self.stage_heads.len());
        }
        for (i, (&c, &h)) in self.stage_channels.iter().zip(&self.stage_heads).enumerate() {
            if c == 0 || h == 0 || c % h != 0 {
                bail!(Config, "stage {}: width {c} not divisible by {h} heads", i + 1);
            }
        }
        if self.pool_size == 0 || self.decoder_channels == 0 || self.decoder_hidden == 0 {
            bail!(Config, "pool size and decoder widths must be positive");
        }
        if self.n_cls == 0 || self.n_cls > IGNORE_LABEL as usize {
            bail!(Config, "class count {} outside 1..=255", self.n_cls);
        }
        let (h, w) = (self.input_height, self.input_width);
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            bail!(Geometry, "input {h}x{w} is not a positive multiple of 16");
        }
        if self.pe_kind == PeKind::SinCos && self.stage_channels[0] % 2 != 0 {
            bail!(Config, "sine/cosine embedding needs an even first-stage width");
        }
        Ok(())
    }

    pub fn uses_depth(&self) -> bool {
        self.pe_kind.uses_depth() || self.use_lca
    }

    /// Spatial size of stage `i` (0-based).
    pub fn stage_size(&self, i: usize) -> (usize, usize) {
        (self.input_height >> (i + 1), self.input_width >> (i + 1))
    }

    pub fn effective_pool(&self, i: usize) -> usize {
        let (h, w) = self.stage_size(i);
        self.pool_size.min(h).min(w)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.insert("stage_channels", join_list(&self.stage_channels));
        kv.insert("stage_heads", join_list(&self.stage_heads));
        kv.insert("pool_size", self.pool_size);
        kv.insert("n_cls", self.n_cls);
        kv.insert("decoder_channels", self.decoder_channels);
        kv.insert("decoder_hidden", self.decoder_hidden);
        kv.insert("pe_kind", self.pe_kind);
        kv.insert("use_lca", self.use_lca);
        kv.insert("use_decoder", self.use_decoder);
        kv.insert("recompute_stages", self.recompute_stages);
        kv.insert("input_height", self.input_height);
        kv.insert("input_width", self.input_width);
        kv.insert("seed", self.seed);
        kv.insert("precision", self.precision.as_str());
        kv
    }

    /// Reads the keys present in `kv` over the defaults. Unknown keys fail.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        kv.reject_unknown(&CONFIG_KEYS)?;
        let d = ModelConfig::default();
        let list = |key: &str, default: Vec<usize>| match kv.get(key) {
            None => Ok(default),
            Some(_) => kv.require_list(key),
        };
        let precision = match kv.get("precision") {
            None => d.precision,
            Some(raw) => Precision::parse(raw).ok_or_else(|| Error::Config(format!("unknown precision {raw:?}")))?,
        };
        let cfg = ModelConfig {
            stage_channels: list("stage_channels", d.stage_channels)?,
            stage_heads: list("stage_heads", d.stage_heads)?,
            pool_size: kv.get_or("pool_size", d.pool_size)?,
            n_cls: kv.get_or("n_cls", d.n_cls)?,
            decoder_channels: kv.get_or("decoder_channels", d.decoder_channels)?,
            decoder_hidden: kv.get_or("decoder_hidden", d.decoder_hidden)?,
            pe_kind: kv.get_or("pe_kind", d.pe_kind)?,
            use_lca: kv.get_or("use_lca", d.use_lca)?,
            use_decoder: kv.get_or("use_decoder", d.use_decoder)?,
            recompute_stages: kv.get_or("recompute_stages", d.recompute_stages)?,
            input_height: kv.get_or("input_height", d.input_height)?,
            input_width: kv.get_or("input_width", d.input_width)?,
            seed: kv.get_or("seed", d.seed)?,
            precision,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvMap::parse(text)?)
    }

    pub fn render(&self) -> String {
        self.to_kv().render()
    }

    /// Hex SHA-256 of the rendered config.
    pub fn hash(&self) -> String {
        Sha256::digest(self.render().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
enum PeParams {
    None,
    SinCos,
    Learnable(LearnablePe),
    Implicit(ImplicitPe),
    Pixel(DepthFuseParams),
}

#[derive(Clone, Debug, PartialEq)]
enum Head {
    Decoder(MlpDecoderParams),
    Linear(LinearParams),
}

#[derive(Clone, Copy, Debug)]
pub struct StageOutput {
    pub r_f: Var,
    pub d_f: Option<Var>,
    /// Stage fusion result before cross-attention.
    pub fused: Var,
    /// Feature handed to the decoder.
    pub out: Var,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub stages: Vec<StageOutput>,
    /// `[N, n_cls, H/4, W/4]`; absent when the decoder is off.
    pub quarter_logits: Option<Var>,
    /// `[N, n_cls, H, W]`.
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct DipFormer {
    cfg: ModelConfig,
    layout: ParamLayout,
    rgb_proj: LinearParams,
    depth_proj: Option<LinearParams>,
    stages: Vec<SaoStageParams>,
    pe: PeParams,
    lca: Vec<LcaParams>,
    head: Head,
}

impl DipFormer {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layout = ParamLayout::default();
        let chans = &cfg.stage_channels;
        let c0 = chans[0];
        let rgb_proj = LinearParams::register(&mut layout, "input.rgb_proj", 3, c0);
        let depth_proj = cfg
            .uses_depth()
            .then(|| LinearParams::register(&mut layout, "input.depth_proj", 1, c0));
        let stages = chans
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let cin = if i == 0 || cfg.recompute_stages { c0 } else { chans[i - 1] };
                SaoStageParams::register(&mut layout, &format!("stage{}", i + 1), cin, c, cfg.pe_kind == PeKind::DepthSao)
            })
            .collect();
        let (h1, w1) = cfg.stage_size(0);
        let pe = match cfg.pe_kind {
            PeKind::DepthSao => PeParams::None,
            PeKind::SinCos => PeParams::SinCos,
            PeKind::Learnable => PeParams::Learnable(LearnablePe::register(&mut layout, "pe", h1, w1, c0)),
            PeKind::Implicit => PeParams::Implicit(ImplicitPe::register(&mut layout, "pe", c0)),
            kind @ (PeKind::DepthAdd | PeKind::DepthConcat) => {
                PeParams::Pixel(DepthFuseParams::register(&mut layout, "pe", 1, c0, kind)?)
            }
        };
        let lca = if cfg.use_lca {
            chans
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    LcaParams::register(
                        &mut layout,
                        &format!("stage{}.lca", i + 1),
                        c,
                        cfg.stage_heads[i],
                        cfg.effective_pool(i),
                    )
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let head = if cfg.use_decoder {
            let dc = DecoderConfig {
                unify_channels: cfg.decoder_channels,
                n_cls: cfg.n_cls,
                stage_channels: chans.clone(),
                hidden: cfg.decoder_hidden,
            };
            Head::Decoder(MlpDecoderParams::register(&mut layout, "decoder", &dc)?)
        } else {
            Head::Linear(LinearParams::register(&mut layout, "head", *chans.last().unwrap(), cfg.n_cls))
        };
        Ok(DipFormer {
            cfg,
            layout,
            rgb_proj,
            depth_proj,
            stages,
            pe,
            lca,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.numel()
    }

    pub fn init_params<T: Element>(&self, seed: u64) -> ParamStore<T> {
        self.layout.init(seed)
    }

    pub fn lca_params(&self, stage: usize) -> Option<&LcaParams> {
        self.lca.get(stage)
    }

    /// Checks `[N,3,H,W]` / `[N,1,H,W]` against the configured geometry.
    pub fn check_inputs(&self, rgb: &[usize], depth: &[usize]) -> Result<()> {
        if rgb.len() != 4 || depth.len() != 4 || rgb[1] != 3 || depth[1] != 1 {
            bail!(Dimension, "expected [N,3,H,W] rgb and [N,1,H,W] depth, got {rgb:?} and {depth:?}");
        }
        if rgb[0] != depth[0] || rgb[2..] != depth[2..] {
            bail!(Dimension, "rgb {rgb:?} and depth {depth:?} disagree");
        }
        if rgb[2] % 16 != 0 || rgb[3] % 16 != 0 {
            bail!(Geometry, "input {}x{} is not divisible by 16", rgb[2], rgb[3]);
        }
        if (rgb[2], rgb[3]) != (self.cfg.input_height, self.cfg.input_width) {
            bail!(
                Config,
                "model is configured for {}x{} inputs, got {}x{}",
                self.cfg.input_height,
                self.cfg.input_width,
                rgb[2],
                rgb[3]
            );
        }
        Ok(())
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, bound: &Bound, rgb: Var, depth: Var) -> Result<ModelOutput> {
        self.check_inputs(tape.shape(rgb), tape.shape(depth))?;
        let (h, w) = (self.cfg.input_height, self.cfg.input_width);
        let (r0, d0) = tape.in_region("input", |t| -> Result<_> {
            let r0 = self.rgb_proj.apply_channels(t, bound, rgb)?;
            let d0 = match &self.depth_proj {
                Some(p) => Some(p.apply_channels(t, bound, depth)?),
                None => None,
            };
            Ok((r0, d0))
        })?;

        let mut outputs: Vec<StageOutput> = Vec::with_capacity(self.stages.len());
        for (i, sp) in self.stages.iter().enumerate() {
            let region = format!("stage{}", i + 1);
            let (r_in, d_in) = match outputs.last() {
                None => (r0, d0),
                Some(_) if self.cfg.recompute_stages => tape.in_region(&region, |t| -> Result<_> {
                    let r = t.bilinear_resize(r0, h >> i, w >> i)?;
                    let d = match d0 {
                        Some(d) => Some(t.bilinear_resize(d, h >> i, w >> i)?),
                        None => None,
                    };
                    Ok((r, d))
                })?,
                Some(prev) => (prev.r_f, prev.d_f),
            };
            let (mut r_f, d_f, sao_fused) = tape.in_region(&region, |t| -> Result<_> {
                match d_in {
                    Some(d) if sp.fuse.is_some() => {
                        let pair = sao_stage_forward(t, bound, r_in, d, sp)?;
                        Ok((pair.r_f, Some(pair.d_f), Some(pair.fused)))
                    }
                    Some(d) => Ok((conv_block(t, bound, r_in, sp)?, Some(conv_block(t, bound, d, sp)?), None)),
                    None => Ok((conv_block(t, bound, r_in, sp)?, None, None)),
                }
            })?;
            if i == 0 {
                r_f = tape.in_region("pe", |t| self.apply_pe(t, bound, r_f, depth))?;
            }
            let fused = sao_fused.unwrap_or(r_f);
            let out = match (self.lca.get(i), d_f) {
                (Some(lp), Some(d)) => tape.in_region(&format!("{region}/lca"), |t| -> Result<Var> {
                    let attended = lca_forward(t, bound, r_f, d, lp)?;
                    t.add(fused, attended)
                })?,
                _ => fused,
            };
            outputs.push(StageOutput { r_f, d_f, fused, out });
        }

        let (quarter_logits, logits) = match &self.head {
            Head::Decoder(dp) => {
                let feats: Vec<Var> = outputs.iter().map(|s| s.out).collect();
                let q = decode(tape, bound, &feats, dp)?;
                let full = tape.in_region("decoder/upsample", |t| upsample_logits(t, q, h, w))?;
                (Some(q), full)
            }
            Head::Linear(lp) => {
                let last = outputs.last().expect("at least one stage").out;
                let full = tape.in_region("head", |t| -> Result<Var> {
                    let y = lp.apply_channels(t, bound, last)?;
                    t.bilinear_resize(y, h, w)
                })?;
                (None, full)
            }
        };
        Ok(ModelOutput {
            stages: outputs,
            quarter_logits,
            logits,
        })
    }

    fn apply_pe<T: Element>(&self, tape: &mut Tape<T>, bound: &Bound, r_f: Var, depth: Var) -> Result<Var> {
        let [_, c, h, w] = tape.value(r_f).dims4()?;
        match &self.pe {
            PeParams::None => Ok(r_f),
            PeParams::SinCos => {
                let table = tape.constant(sincos_pe(h, w, c)?);
                tape.add(r_f, table)
            }
            PeParams::Learnable(p) => {
                let table = learnable_pe(tape, bound, p, h, w, c)?;
                tape.add(r_f, table)
            }
            PeParams::Implicit(p) => implicit_pe(tape, bound, r_f, p),
            PeParams::Pixel(p) => {
                let d = tape.bilinear_resize(depth, h, w)?;
                depth_fuse_baseline(tape, bound, r_f, d, self.cfg.pe_kind, p)
            }
        }
    }

    /// Full-resolution logits without gradient tracking.
    pub fn logits<T: Element>(&self, store: &ParamStore<T>, rgb: &Tensor<T>, depth: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let (r, d) = (tape.constant(rgb.clone()), tape.constant(depth.clone()));
        let out = self.forward(&mut tape, &bound, r, d)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Per-pixel argmax labels, `N*H*W` in row-major order.
    pub fn predict<T: Element>(&self, store: &ParamStore<T>, rgb: &Tensor<T>, depth: &Tensor<T>) -> Result<Vec<u8>> {
        argmax_labels(&self.logits(store, rgb, depth)?)
    }

    /// Head-averaged `[P, P]` attention of stage `stage` (1-based) for the
    /// query at `query` (row-major at stage resolution), first sample.
    pub fn attention_map<T: Element>(
        &self,
        store: &ParamStore<T>,
        rgb: &Tensor<T>,
        depth: &Tensor<T>,
        stage: usize,
        query: usize,
    ) -> Result<Tensor<T>> {
        if !self.cfg.use_lca {
            bail!(Usage, "model has no cross-attention to visualize");
        }
        if stage == 0 || stage > self.stages.len() {
            bail!(Usage, "stage {stage} outside 1..={}", self.stages.len());
        }
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let (r, d) = (tape.constant(rgb.clone()), tape.constant(depth.clone()));
        let out = self.forward(&mut tape, &bound, r, d)?;
        let so = out.stages[stage - 1];
        let d_f = so.d_f.expect("cross-attention implies a depth branch");
        lca_attention_map(
            store,
            tape.value(so.r_f),
            tape.value(d_f),
            &self.lca[stage - 1],
            query,
        )
    }
}

/// Argmax over the channel axis of `[N, C, H, W]` logits; ties pick the
/// lowest class.
pub fn argmax_labels<T: Element>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    let [n, c, h, w] = logits.dims4()?;
    let hw = h * w;
    let data = logits.data();
    let mut labels = Vec::with_capacity(n * hw);
    for b in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if data[(b * c + k) * hw + p] > data[(b * c + best) * hw + p] {
                    best = k;
                }
            }
            labels.push(best as u8);
        }
    }
    Ok(labels)
}

/// Softmax over the channel axis, returned as `[N, C, H, W]` in f64.
pub fn class_probabilities<T: Element>(logits: &Tensor<T>) -> Result<Tensor<f64>> {
    let [n, c, h, w] = logits.dims4()?;
    let hw = h * w;
    let data = logits.data();
    let mut out = vec![0.0; data.len()];
    for b in 0..n {
        for p in 0..hw {
            let at = |k: usize| (b * c + k) * hw + p;
            let max = (0..c).map(|k| data[at(k)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|k| (data[at(k)].as_f64() - max).exp()).sum();
            for k in 0..c {
                out[at(k)] = (data[at(k)].as_f64() - max).exp() / z;
            }
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(pe_kind: PeKind, use_lca: bool) -> ModelConfig {
        ModelConfig {
            stage_channels: vec![8, 8, 16, 16],
            stage_heads: vec![1, 2, 2, 4],
            decoder_channels: 8,
            decoder_hidden: 8,
            pe_kind,
            use_lca,
            input_height: 32,
            input_width: 32,
            ..ModelConfig::default()
        }
    }

    fn inputs(n: usize, size: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rgb = Tensor::from_fn(&[n, 3, size, size], |_| rng.random());
        let depth = Tensor::from_fn(&[n, 1, size, size], |_| rng.random());
        (rgb, depth)
    }

    #[test]
    fn config_round_trips_and_hash_is_stable() {
        let cfg = small(PeKind::Learnable, false);
        let back = ModelConfig::parse(&cfg.render()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(small(PeKind::Implicit, false).hash(), cfg.hash());
        assert!(ModelConfig::parse("stage_heads=3,2,5,8").is_err());
        assert!(ModelConfig::parse("colour=red").is_err());
    }

    #[test]
    fn every_kind_gives_same_output_shape() {
        let (rgb, depth) = inputs(2, 32, 0);
        for kind in PeKind::ALL {
            for lca in [false, true] {
                let model = DipFormer::new(small(kind, lca)).unwrap();
                let store = model.init_params::<f64>(1);
                let logits = model.logits(&store, &rgb, &depth).unwrap();
                assert_eq!(logits.shape(), &[2, 3, 32, 32], "{kind} lca={lca}");
                assert!(logits.is_finite());
            }
        }
    }

    #[test]
    fn sincos_is_parameter_free() {
        let sc = DipFormer::new(small(PeKind::SinCos, false)).unwrap().param_count();
        let lp = DipFormer::new(small(PeKind::Learnable, false)).unwrap().param_count();
        assert_eq!(lp - sc, 8 * 16 * 16);
    }

    #[test]
    fn wrong_geometry_is_rejected() {
        let model = DipFormer::new(small(PeKind::DepthSao, true)).unwrap();
        let store = model.init_params::<f64>(1);
        let (rgb, depth) = inputs(1, 48, 0);
        assert!(matches!(model.logits(&store, &rgb, &depth), Err(Error::Config(_))));
    }

    #[test]
    fn argmax_prefers_lowest_class_on_ties() {
        let t = Tensor::new(&[1, 3, 1, 2], vec![1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(argmax_labels(&t).unwrap(), vec![0, 1]);
        let p = class_probabilities(&t).unwrap();
        assert!((p.at([0, 0, 0, 0]) + p.at([0, 1, 0, 0]) + p.at([0, 2, 0, 0]) - 1.0).abs() < 1e-12);
    }
}
