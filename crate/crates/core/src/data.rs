//! Samples, PNG I/O, the synthetic depth-separable scene generator and
//! batching.

use std::collections::HashMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::atomic::write_atomic;
use crate::error::{bail, Error, Result};
use crate::model::IGNORE_LABEL;
use crate::tensor::{Element, Tensor};

/// One RGB-D frame. `rgb` is `[3,H,W]` in `[0,1]`, `depth` is `[1,H,W]`
/// min-max normalized with missing pixels at 0.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub height: usize,
    pub width: usize,
    pub rgb: Tensor<f32>,
    pub depth: Tensor<f32>,
    pub labels: Option<Vec<u8>>,
    /// Depth as stored on disk; 0 marks a missing measurement.
    pub raw_depth: Vec<u16>,
    /// Some depth pixels are missing.
    pub depth_missing: bool,
}

/// Min-max normalization over the valid (non-zero) pixels. Missing pixels
/// stay 0; a constant valid depth maps to 0.
pub fn normalize_depth(raw: &[u16]) -> (Vec<f32>, bool) {
    let valid = raw.iter().copied().filter(|&v| v != 0);
    let (lo, hi) = valid.fold((u16::MAX, 0u16), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let missing = raw.contains(&0);
    if lo > hi {
        return (vec![0.0; raw.len()], missing);
    }
    let span = (hi - lo) as f64;
    let out = raw
        .iter()
        .map(|&v| {
            if v == 0 || span == 0.0 {
                0.0
            } else {
                ((v - lo) as f64 / span) as f32
            }
        })
        .collect();
    (out, missing)
}

impl SegSample {
    /// Builds a sample from interleaved 8-bit RGB, raw depth and labels.
    pub fn from_raw(height: usize, width: usize, rgb8: &[u8], raw_depth: Vec<u16>, labels: Option<Vec<u8>>) -> Result<Self> {
        let hw = height * width;
        if rgb8.len() != 3 * hw || raw_depth.len() != hw || labels.as_ref().is_some_and(|l| l.len() != hw) {
            bail!(Data, "buffers do not match a {height}x{width} image");
        }
        let mut rgb = vec![0f32; 3 * hw];
        for (p, px) in rgb8.chunks_exact(3).enumerate() {
            for c in 0..3 {
                rgb[c * hw + p] = px[c] as f32 / 255.0;
            }
        }
        let (depth, depth_missing) = normalize_depth(&raw_depth);
        Ok(SegSample {
            height,
            width,
            rgb: Tensor::new(&[3, height, width], rgb)?,
            depth: Tensor::new(&[1, height, width], depth)?,
            labels,
            raw_depth,
            depth_missing,
        })
    }

    /// Interleaved 8-bit RGB.
    pub fn rgb8(&self) -> Vec<u8> {
        let hw = self.height * self.width;
        let d = self.rgb.data();
        (0..hw)
            .flat_map(|p| (0..3).map(move |c| (d[c * hw + p] * 255.0).round().clamp(0.0, 255.0) as u8))
            .collect()
    }

    pub fn labels(&self) -> Result<&[u8]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Data("sample has no labels".into()))
    }

    /// Central `height x width` window.
    pub fn center_crop(&self, height: usize, width: usize) -> Result<Self> {
        if height > self.height || width > self.width || height == 0 || width == 0 {
            bail!(
                Data,
                "cannot crop {}x{} to {height}x{width}",
                self.height,
                self.width
            );
        }
        let (y0, x0) = ((self.height - height) / 2, (self.width - width) / 2);
        let src_w = self.width;
        let pick = |v: &[u8], ch: usize| -> Vec<u8> {
            let mut out = Vec::with_capacity(height * width * ch);
            for y in 0..height {
                let row = ((y0 + y) * src_w + x0) * ch;
                out.extend_from_slice(&v[row..row + width * ch]);
            }
            out
        };
        let rgb8 = pick(&self.rgb8(), 3);
        let mut depth = Vec::with_capacity(height * width);
        for y in 0..height {
            let row = (y0 + y) * src_w + x0;
            depth.extend_from_slice(&self.raw_depth[row..row + width]);
        }
        let labels = self.labels.as_deref().map(|l| pick(l, 1));
        SegSample::from_raw(height, width, &rgb8, depth, labels)
    }

    /// Mirror along the width axis, all modalities together.
    pub fn hflip(&self) -> Self {
        let (h, w) = (self.height, self.width);
        fn flip<T: Copy>(v: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
            let mut out = v.to_vec();
            for p in 0..planes * h {
                out[p * w..(p + 1) * w].reverse();
            }
            out
        }
        SegSample {
            height: h,
            width: w,
            rgb: Tensor::new(&[3, h, w], flip(self.rgb.data(), 3, h, w)).expect("same shape"),
            depth: Tensor::new(&[1, h, w], flip(self.depth.data(), 1, h, w)).expect("same shape"),
            labels: self.labels.as_deref().map(|l| flip(l, 1, h, w)),
            raw_depth: flip(&self.raw_depth, 1, h, w),
            depth_missing: self.depth_missing,
        }
    }
}

/// Flips with probability `p`; the draw happens even when `p` is 0 or 1 so
/// the stream position does not depend on `p`.
pub fn random_hflip(sample: &SegSample, p: f64, rng: &mut impl Rng) -> SegSample {
    let u: f64 = rng.random();
    if u < p {
        sample.hflip()
    } else {
        sample.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PngImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub bit_depth: u8,
    /// Row-major interleaved samples.
    pub samples: Vec<u16>,
}

pub fn decode_png(bytes: &[u8], what: &Path) -> Result<PngImage> {
    let bad = |e: png::DecodingError| Error::Data(format!("{}: {e}", what.display()));
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Data(format!("{}: image too large", what.display())))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => bail!(Data, "{}: unsupported color type {other:?}", what.display()),
    };
    let (width, height) = (info.width as usize, info.height as usize);
    let n = width * height * channels;
    let (bit_depth, samples) = match info.bit_depth {
        png::BitDepth::Eight => (8, buf[..n].iter().map(|&b| b as u16).collect()),
        png::BitDepth::Sixteen => (
            16,
            buf[..2 * n].chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect(),
        ),
        other => bail!(Data, "{}: unsupported bit depth {other:?}", what.display()),
    };
    Ok(PngImage {
        width,
        height,
        channels,
        bit_depth,
        samples,
    })
}

pub fn read_png(path: &Path) -> Result<PngImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes, path)
}

/// Encodes 8-bit grayscale / RGB or 16-bit grayscale.
pub fn encode_png(width: usize, height: usize, channels: usize, bit_depth: u8, samples: &[u16]) -> Result<Vec<u8>> {
    if samples.len() != width * height * channels {
        bail!(Data, "{} samples for a {width}x{height}x{channels} image", samples.len());
    }
    let color = match channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => bail!(Data, "unsupported channel count {channels}"),
    };
    let (depth, bytes): (_, Vec<u8>) = match bit_depth {
        8 => (png::BitDepth::Eight, samples.iter().map(|&v| v as u8).collect()),
        16 => (png::BitDepth::Sixteen, samples.iter().flat_map(|v| v.to_be_bytes()).collect()),
        _ => bail!(Data, "unsupported bit depth {bit_depth}"),
    };
    let mut out = Vec::new();
    let enc_err = |e: png::EncodingError| Error::Data(format!("png encoding: {e}"));
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut writer = enc.write_header().map_err(enc_err)?;
        writer.write_image_data(&bytes).map_err(enc_err)?;
        writer.finish().map_err(enc_err)?;
    }
    Ok(out)
}

pub fn write_png(path: &Path, width: usize, height: usize, channels: usize, bit_depth: u8, samples: &[u16]) -> Result<()> {
    write_atomic(path, &encode_png(width, height, channels, bit_depth, samples)?)
}

pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb8: &[u8]) -> Result<()> {
    let s: Vec<u16> = rgb8.iter().map(|&v| v as u16).collect();
    write_png(path, width, height, 3, 8, &s)
}

pub fn write_depth_png(path: &Path, width: usize, height: usize, depth: &[u16]) -> Result<()> {
    write_png(path, width, height, 1, 16, depth)
}

pub fn write_label_png(path: &Path, width: usize, height: usize, labels: &[u8]) -> Result<()> {
    let s: Vec<u16> = labels.iter().map(|&v| v as u16).collect();
    write_png(path, width, height, 1, 8, &s)
}

/// Reads an RGB / depth / optional label triple. With `crop` the central
/// window is kept; the result must be divisible by 16 either way.
pub fn load_sample(rgb_path: &Path, depth_path: &Path, label_path: Option<&Path>, crop: Option<(usize, usize)>) -> Result<SegSample> {
    let rgb = read_png(rgb_path)?;
    if rgb.channels != 3 || rgb.bit_depth != 8 {
        bail!(
            Data,
            "{}: expected 8-bit RGB, found {}-bit with {} channels",
            rgb_path.display(),
            rgb.bit_depth,
            rgb.channels
        );
    }
    let depth = read_png(depth_path)?;
    if depth.channels != 1 {
        bail!(Data, "{}: depth must have one channel, found {}", depth_path.display(), depth.channels);
    }
    let labels = match label_path {
        None => None,
        Some(p) => {
            let l = read_png(p)?;
            if l.channels != 1 || l.bit_depth != 8 {
                bail!(Data, "{}: labels must be 8-bit single channel", p.display());
            }
            if (l.width, l.height) != (rgb.width, rgb.height) {
                bail!(Data, "{}: {}x{} labels for a {}x{} image", p.display(), l.width, l.height, rgb.width, rgb.height);
            }
            Some(l.samples.iter().map(|&v| v as u8).collect::<Vec<u8>>())
        }
    };
    if (depth.width, depth.height) != (rgb.width, rgb.height) {
        bail!(
            Data,
            "{}: {}x{} depth for a {}x{} image",
            depth_path.display(),
            depth.width,
            depth.height,
            rgb.width,
            rgb.height
        );
    }
    let rgb8: Vec<u8> = rgb.samples.iter().map(|&v| v as u8).collect();
    let mut sample = SegSample::from_raw(rgb.height, rgb.width, &rgb8, depth.samples, labels)?;
    if let Some((h, w)) = crop {
        sample = sample.center_crop(h, w)?;
    }
    if sample.height % 16 != 0 || sample.width % 16 != 0 {
        bail!(
            Data,
            "{}: {}x{} is not divisible by 16; pass a crop size",
            rgb_path.display(),
            sample.height,
            sample.width
        );
    }
    Ok(sample)
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub labels: Option<PathBuf>,
}

/// Parses `rgb<TAB>depth<TAB>labels` lines; relative paths resolve against
/// the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut entries = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&cols.len()) {
            bail!(Data, "{}:{}: expected 2 or 3 tab-separated paths", path.display(), no + 1);
        }
        entries.push(ManifestEntry {
            rgb: base.join(cols[0]),
            depth: base.join(cols[1]),
            labels: cols.get(2).filter(|s| !s.is_empty()).map(|s| base.join(s)),
        });
    }
    if entries.is_empty() {
        bail!(Data, "{}: manifest lists no samples", path.display());
    }
    Ok(entries)
}

pub fn load_manifest(path: &Path, crop: Option<(usize, usize)>) -> Result<Vec<SegSample>> {
    read_manifest(path)?
        .iter()
        .map(|e| load_sample(&e.rgb, &e.depth, e.labels.as_deref(), crop))
        .collect()
}

/// Writes PNGs for every sample plus `manifest.tsv` into `dir`.
pub fn write_dataset(dir: &Path, samples: &[SegSample]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let (rgb, depth, label) = (format!("rgb_{i:04}.png"), format!("depth_{i:04}.png"), format!("label_{i:04}.png"));
        write_rgb_png(&dir.join(&rgb), s.width, s.height, &s.rgb8())?;
        write_depth_png(&dir.join(&depth), s.width, s.height, &s.raw_depth)?;
        match &s.labels {
            Some(l) => {
                write_label_png(&dir.join(&label), s.width, s.height, l)?;
                manifest.push_str(&format!("{rgb}\t{depth}\t{label}\n"));
            }
            None => manifest.push_str(&format!("{rgb}\t{depth}\n")),
        }
    }
    let path = dir.join("manifest.tsv");
    write_atomic(&path, manifest.as_bytes())?;
    Ok(path)
}

pub const BACKGROUND: u8 = 0;
pub const ROAD: u8 = 1;

pub const ROAD_NEAR_MM: u16 = 3000;
pub const ROAD_FAR_MM: u16 = 20000;
pub const BACKGROUND_MM: u16 = 60000;
pub const NEAR_PLANE_MM: u16 = 8000;
pub const FAR_PLANE_MM: u16 = 30000;
pub const SINGLE_PLANE_MM: u16 = 15000;

const MAX_SYNTH_CLASSES: usize = 20;

const CLASS_COLORS: [[u8; 3]; MAX_SYNTH_CLASSES] = [
    [70, 130, 180],
    [128, 64, 128],
    [220, 20, 60],
    [0, 0, 142],
    [250, 170, 30],
    [107, 142, 35],
    [119, 11, 32],
    [0, 60, 100],
    [255, 0, 0],
    [0, 80, 100],
    [190, 153, 153],
    [153, 153, 153],
    [220, 220, 0],
    [152, 251, 152],
    [0, 0, 70],
    [102, 102, 156],
    [244, 35, 232],
    [70, 70, 70],
    [0, 0, 230],
    [60, 20, 220],
];

/// Color used by both members of a pair when their texture is shared.
const SHARED_COLORS: [[u8; 3]; MAX_SYNTH_CLASSES / 2] = [
    [200, 120, 40],
    [40, 200, 120],
    [120, 40, 200],
    [230, 230, 230],
    [30, 30, 30],
    [200, 40, 120],
    [120, 200, 40],
    [40, 120, 200],
    [160, 160, 60],
    [60, 160, 160],
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    /// Background and road plus object classes; pairs `(2,3), (4,5), ..`
    /// differ only in depth when they share a color.
    pub n_cls: usize,
    pub count: usize,
    pub seed: u64,
    /// Probability that a pair of objects in a scene shares one color.
    pub depth_only_class_fraction: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_SYNTH_CLASSES).contains(&self.n_cls) {
            bail!(Config, "synthetic scenes support 2 to {MAX_SYNTH_CLASSES} classes, got {}", self.n_cls);
        }
        if self.height < 32 || self.width < 32 || self.height % 16 != 0 || self.width % 16 != 0 {
            bail!(Geometry, "synthetic size {}x{} must be multiples of 16, at least 32", self.height, self.width);
        }
        if !(0.0..=1.0).contains(&self.depth_only_class_fraction) {
            bail!(Config, "depth-only fraction {} outside [0, 1]", self.depth_only_class_fraction);
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        if self.height.min(self.width) <= 64 {
            4
        } else {
            8
        }
    }

    /// `(a, b)` object class pairs.
    pub fn pairs(&self) -> Vec<(u8, u8)> {
        (2..self.n_cls.saturating_sub(1)).step_by(2).map(|a| (a as u8, a as u8 + 1)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthObject {
    pub class: u8,
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
    pub color: [u8; 3],
    pub depth_mm: u16,
}

impl SynthObject {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y0 + self.h).contains(&y) && (self.x0..self.x0 + self.w).contains(&x)
    }
}

/// Analytic description of one scene. Objects never overlap.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneLayout {
    pub height: usize,
    pub width: usize,
    pub road_top: usize,
    pub objects: Vec<SynthObject>,
}

impl SceneLayout {
    pub fn road_depth(&self, y: usize) -> u16 {
        let span = (self.height - 1 - self.road_top).max(1) as u64;
        let t = (self.height - 1 - y) as u64;
        (ROAD_NEAR_MM as u64 + t * (ROAD_FAR_MM - ROAD_NEAR_MM) as u64 / span) as u16
    }

    /// Class, color and depth at a pixel from the geometry alone.
    pub fn at(&self, y: usize, x: usize) -> (u8, [u8; 3], u16) {
        if let Some(o) = self.objects.iter().find(|o| o.contains(y, x)) {
            (o.class, o.color, o.depth_mm)
        } else if y >= self.road_top {
            (ROAD, CLASS_COLORS[ROAD as usize], self.road_depth(y))
        } else {
            (BACKGROUND, CLASS_COLORS[BACKGROUND as usize], BACKGROUND_MM)
        }
    }

    pub fn render(&self) -> SegSample {
        let (h, w) = (self.height, self.width);
        let mut rgb8 = Vec::with_capacity(3 * h * w);
        let mut depth = Vec::with_capacity(h * w);
        let mut labels = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (c, color, d) = self.at(y, x);
                rgb8.extend_from_slice(&color);
                depth.push(d);
                labels.push(c);
            }
        }
        SegSample::from_raw(h, w, &rgb8, depth, Some(labels)).expect("consistent buffers")
    }
}

fn sample_layout(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> SceneLayout {
    let (h, w, g) = (spec.height, spec.width, spec.grid());
    let snap = |v: usize| v / g * g;
    let road_top = snap(rng.random_range(h / 2..=3 * h / 4));
    let mut objects: Vec<SynthObject> = Vec::new();
    let lo = (h.min(w) / 8).max(g);
    let hi = (h.min(w) / 4).max(lo);
    let mut place = |class: u8, oh: usize, ow: usize, color: [u8; 3], depth_mm: u16, rng: &mut ChaCha8Rng| {
        for _ in 0..200 {
            let y0 = snap(rng.random_range(0..=h - oh));
            let x0 = snap(rng.random_range(0..=w - ow));
            let clash = objects
                .iter()
                .any(|o| y0 < o.y0 + o.h && o.y0 < y0 + oh && x0 < o.x0 + o.w && o.x0 < x0 + ow);
            if !clash {
                objects.push(SynthObject {
                    class,
                    y0,
                    x0,
                    h: oh,
                    w: ow,
                    color,
                    depth_mm,
                });
                return;
            }
        }
    };
    let side = |rng: &mut ChaCha8Rng| snap(rng.random_range(lo..=hi)).max(g);
    for (pi, (a, b)) in spec.pairs().into_iter().enumerate() {
        let (oh, ow) = (side(rng), side(rng));
        let shared = rng.random::<f64>() < spec.depth_only_class_fraction;
        let (ca, cb) = if shared {
            (SHARED_COLORS[pi], SHARED_COLORS[pi])
        } else {
            (CLASS_COLORS[a as usize], CLASS_COLORS[b as usize])
        };
        // draw the placement order so neither class is systematically first
        if rng.random::<bool>() {
            place(a, oh, ow, ca, NEAR_PLANE_MM, rng);
            place(b, oh, ow, cb, FAR_PLANE_MM, rng);
        } else {
            place(b, oh, ow, cb, FAR_PLANE_MM, rng);
            place(a, oh, ow, ca, NEAR_PLANE_MM, rng);
        }
    }
    if spec.n_cls > 2 && spec.n_cls % 2 == 1 {
        let c = (spec.n_cls - 1) as u8;
        let (oh, ow) = (side(rng), side(rng));
        place(c, oh, ow, CLASS_COLORS[c as usize], SINGLE_PLANE_MM, rng);
    }
    SceneLayout {
        height: h,
        width: w,
        road_top,
        objects,
    }
}

pub fn generate_layouts(spec: &SynthSpec) -> Result<Vec<SceneLayout>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..spec.count).map(|_| sample_layout(spec, &mut rng)).collect())
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<SegSample>> {
    Ok(generate_layouts(spec)?.iter().map(SceneLayout::render).collect())
}

/// Best accuracy (percent) any deterministic function of the RGB value can
/// reach on pixels whose label is in `classes`.
pub fn rgb_bayes_accuracy(samples: &[SegSample], classes: &[u8]) -> Result<f64> {
    let mut hist: HashMap<[u8; 3], HashMap<u8, u64>> = HashMap::new();
    let mut total = 0u64;
    for s in samples {
        let labels = s.labels()?;
        for (px, &l) in s.rgb8().chunks_exact(3).zip(labels) {
            if classes.contains(&l) {
                *hist.entry([px[0], px[1], px[2]]).or_default().entry(l).or_default() += 1;
                total += 1;
            }
        }
    }
    if total == 0 {
        bail!(Data, "no pixels of classes {classes:?}");
    }
    let best: u64 = hist.values().map(|h| h.values().copied().max().unwrap_or(0)).sum();
    Ok(100.0 * best as f64 / total as f64)
}

/// Majority-class-per-color lookup table built over `samples`.
pub fn color_lookup_table(samples: &[SegSample]) -> Result<HashMap<[u8; 3], u8>> {
    let mut hist: HashMap<[u8; 3], HashMap<u8, u64>> = HashMap::new();
    for s in samples {
        for (px, &l) in s.rgb8().chunks_exact(3).zip(s.labels()?) {
            if l != IGNORE_LABEL {
                *hist.entry([px[0], px[1], px[2]]).or_default().entry(l).or_default() += 1;
            }
        }
    }
    Ok(hist
        .into_iter()
        .map(|(color, h)| {
            let mut best: Vec<(u8, u64)> = h.into_iter().collect();
            best.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            (color, best[0].0)
        })
        .collect())
}

/// Stacked inputs for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub rgb: Tensor<T>,
    pub depth: Tensor<T>,
    pub labels: Vec<u8>,
}

pub fn make_batch<T: Element>(samples: &[&SegSample]) -> Result<Batch<T>> {
    let Some(first) = samples.first() else {
        bail!(Usage, "empty batch");
    };
    let (h, w) = (first.height, first.width);
    let n = samples.len();
    let mut rgb = Vec::with_capacity(n * 3 * h * w);
    let mut depth = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n * h * w);
    for s in samples {
        if (s.height, s.width) != (h, w) {
            bail!(Data, "batch mixes {h}x{w} and {}x{} samples", s.height, s.width);
        }
        rgb.extend(s.rgb.data().iter().map(|&v| T::lit(v as f64)));
        depth.extend(s.depth.data().iter().map(|&v| T::lit(v as f64)));
        match &s.labels {
            Some(l) => labels.extend_from_slice(l),
            None => labels.extend(std::iter::repeat_n(IGNORE_LABEL, h * w)),
        }
    }
    Ok(Batch {
        rgb: Tensor::new(&[n, 3, h, w], rgb)?,
        depth: Tensor::new(&[n, 1, h, w], depth)?,
        labels,
    })
}
