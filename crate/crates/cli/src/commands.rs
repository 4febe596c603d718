use std::path::Path;

use dipformer::atomic::write_atomic;
use dipformer::checkpoint::{load_checkpoint, peek_config, save_checkpoint};
use dipformer::data::{load_manifest, load_sample, make_batch, write_dataset, write_label_png, write_rgb_png, SegSample, SynthSpec};
use dipformer::gradcheck::{end_to_end, op_suite, CheckResult};
use dipformer::kv::KvMap;
use dipformer::metrics::{max_f_and_ap, MetricsReport};
use dipformer::model::{class_probabilities, DipFormer, ModelConfig, IGNORE_LABEL};
use dipformer::train::{evaluate_metrics, history_csv, run_ablation, run_training, ArmSpec, TrainOptions};
use dipformer::{Element, Error, OpKind, Precision, Result, Tape, Tensor};
use log::info;

use crate::render::{colorize, heat_map};
use crate::settings::{self, ConfigFile};
use crate::{AblateArgs, BenchArgs, EvalArgs, GradcheckArgs, InferArgs, Outcome, SynthArgs, TrainArgs};

/// Pixels per attention cell in the rendered heat map.
const HEAT_CELL: usize = 32;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_labeled(path: &Path) -> Result<Vec<SegSample>> {
    load_manifest(path, None)
}

pub fn synth(a: &SynthArgs) -> Result<Outcome> {
    let spec = SynthSpec {
        height: a.size,
        width: a.size,
        n_cls: a.n_cls,
        count: a.count,
        seed: a.seed,
        depth_only_class_fraction: a.fraction,
    };
    let samples = dipformer::data::generate_synthetic(&spec)?;
    create_dir(&a.out)?;
    let manifest = write_dataset(&a.out, &samples)?;
    println!("{}", manifest.display());
    Ok(Outcome::Ok)
}

pub fn train(a: &TrainArgs) -> Result<Outcome> {
    let file = ConfigFile::load(a.run.config.as_deref())?;
    let data = load_labeled(&a.data)?;
    let eval = a.eval.as_deref().map(load_labeled).transpose()?;
    let model_cfg = settings::model_config(&file, &a.run, &data)?;
    let cfg = settings::train_config(&file, &a.run)?;
    create_dir(&a.out)?;
    write_atomic(&a.out.join("config.txt"), settings::render(&model_cfg, &cfg).as_bytes())?;
    let opts = TrainOptions {
        best_checkpoint: eval.is_some().then(|| a.out.join("best.ckpt")),
        diagnostic_path: Some(a.out.join("nonfinite.txt")),
    };
    match model_cfg.precision {
        Precision::Standard => train_with::<f32>(&model_cfg, &cfg, &data, eval.as_deref(), &opts, &a.out),
        Precision::Verification => train_with::<f64>(&model_cfg, &cfg, &data, eval.as_deref(), &opts, &a.out),
    }
}

fn train_with<T: Element>(
    model_cfg: &ModelConfig,
    cfg: &dipformer::train::TrainConfig,
    data: &[SegSample],
    eval: Option<&[SegSample]>,
    opts: &TrainOptions,
    out: &Path,
) -> Result<Outcome> {
    let outcome = run_training::<T>(model_cfg, cfg, data, eval, opts)?;
    save_checkpoint(&outcome.params, model_cfg, &out.join("model.ckpt"))?;
    write_atomic(&out.join("history.csv"), history_csv(&outcome.history).as_bytes())?;
    let last = outcome.history.last().map_or(f64::NAN, |r| r.loss);
    println!("steps={} final_loss={last:.6}", outcome.history.len());
    if eval.is_some() {
        println!("best_miou={:.4}", outcome.best_miou);
    }
    Ok(Outcome::Ok)
}

pub fn eval(a: &EvalArgs) -> Result<Outcome> {
    let cfg = peek_config(&a.checkpoint)?;
    match cfg.precision {
        Precision::Standard => eval_with::<f32>(a),
        Precision::Verification => eval_with::<f64>(a),
    }
}

fn eval_with<T: Element>(a: &EvalArgs) -> Result<Outcome> {
    let (cfg, store) = load_checkpoint::<T>(&a.checkpoint)?;
    let model = DipFormer::new(cfg)?;
    let data = load_labeled(&a.data)?;
    let mut report = MetricsReport {
        multiclass: Some(evaluate_metrics(&model, &store, &data, a.batch_size)?),
        ..MetricsReport::default()
    };
    if let Some(pos) = a.positive_class {
        if pos as usize >= model.config().n_cls {
            return Err(Error::Usage(format!("positive class {pos} outside 0..{}", model.config().n_cls)));
        }
        let (prob, gt) = positive_scores(&model, &store, &data, a.batch_size, pos)?;
        let sweep = max_f_and_ap(&prob, &gt, a.thresholds)?;
        let binary = MetricsReport::from_sweep(&sweep, &prob, &gt)?;
        report.binary = binary.binary;
        report.curve = binary.curve;
    } else if a.curve.is_some() {
        return Err(Error::Usage("--curve needs --positive-class".into()));
    }
    let text = report.to_kv().render();
    print!("{text}");
    if let Some(out) = &a.out {
        write_atomic(out, text.as_bytes())?;
    }
    if let Some(curve) = &a.curve {
        write_atomic(curve, report.curve_csv().as_bytes())?;
    }
    Ok(Outcome::Ok)
}

/// Softmax probability of `pos` and the matching 0/1 ground truth over every
/// labeled pixel.
fn positive_scores<T: Element>(
    model: &DipFormer,
    store: &dipformer::params::ParamStore<T>,
    data: &[SegSample],
    batch_size: usize,
    pos: u8,
) -> Result<(Vec<f64>, Vec<u8>)> {
    let n_cls = model.config().n_cls;
    let (mut prob, mut gt) = (Vec::new(), Vec::new());
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&SegSample> = chunk.iter().collect();
        let batch = make_batch::<T>(&refs)?;
        let p = class_probabilities(&model.logits(store, &batch.rgb, &batch.depth)?)?;
        let hw = p.shape()[2] * p.shape()[3];
        for (i, &l) in batch.labels.iter().enumerate() {
            if l == IGNORE_LABEL {
                continue;
            }
            let (b, px) = (i / hw, i % hw);
            prob.push(p.data()[(b * n_cls + pos as usize) * hw + px]);
            gt.push(u8::from(l == pos));
        }
    }
    Ok((prob, gt))
}

pub fn infer(a: &InferArgs) -> Result<Outcome> {
    let cfg = peek_config(&a.checkpoint)?;
    match cfg.precision {
        Precision::Standard => infer_with::<f32>(a),
        Precision::Verification => infer_with::<f64>(a),
    }
}

fn infer_with<T: Element>(a: &InferArgs) -> Result<Outcome> {
    let (cfg, store) = load_checkpoint::<T>(&a.checkpoint)?;
    let model = DipFormer::new(cfg)?;
    let sample = load_sample(&a.rgb, &a.depth, None, None)?;
    let batch = make_batch::<T>(&[&sample])?;
    let labels = model.predict(&store, &batch.rgb, &batch.depth)?;
    let (h, w) = (sample.height, sample.width);
    write_rgb_png(&a.out_mask, w, h, &colorize(&labels, model.config().n_cls))?;
    if let Some(path) = &a.out_labels {
        write_label_png(path, w, h, &labels)?;
    }
    if let Some(path) = &a.out_attn {
        let map = model.attention_map(&store, &batch.rgb, &batch.depth, a.stage, a.query)?;
        let p = map.shape()[0];
        let weights: Vec<f64> = map.data().iter().map(|v| v.as_f64()).collect();
        write_rgb_png(path, p * HEAT_CELL, p * HEAT_CELL, &heat_map(&weights, p, HEAT_CELL))?;
        println!("attention_stage={} query={} pool={p} row_sum={:.9}", a.stage, a.query, weights.iter().sum::<f64>());
    }
    Ok(Outcome::Ok)
}

fn report_checks(results: &[CheckResult]) -> bool {
    let mut ok = true;
    for r in results {
        println!("{r}");
        if !r.passed() {
            ok = false;
            let op = r.op.map_or(r.name.clone(), |k| k.name().to_string());
            eprintln!(
                "FAILED {op}: tensor {} index {} rel_err {:.3e} > {:.0e}",
                r.worst.0, r.worst.1, r.max_rel_err, r.tolerance
            );
        }
    }
    ok
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<Outcome> {
    if !a.ops && !a.end_to_end {
        return Err(Error::Usage("choose --ops, --end-to-end or both".into()));
    }
    let fault = match a.inject_fault.as_deref() {
        None => None,
        Some(name) => Some(OpKind::parse(name).ok_or_else(|| Error::Usage(format!("unknown op {name:?}")))?),
    };
    let mut results = Vec::new();
    if a.ops {
        results.extend(op_suite(a.seed, fault)?);
    }
    if a.end_to_end {
        results.push(end_to_end(a.seed, a.params, fault)?);
    }
    let ok = report_checks(&results);
    let passed = results.iter().filter(|r| r.passed()).count();
    println!("{passed}/{} checks passed", results.len());
    Ok(if ok { Outcome::Ok } else { Outcome::CheckFailed })
}

/// Multiply-add totals for one forward pass at `size x size`.
struct BenchRow {
    size: usize,
    input: u64,
    pe: u64,
    encoder: u64,
    lca_proj: u64,
    lca_attn: Vec<u64>,
    kv_tokens: Vec<usize>,
    decoder: u64,
    head: u64,
    total: u64,
}

fn bench_size(base: &KvMap, size: usize, seed: u64) -> Result<BenchRow> {
    let mut kv = base.clone();
    kv.insert("input_height", size);
    kv.insert("input_width", size);
    let cfg = ModelConfig::from_kv(&kv)?;
    let stages = cfg.stage_channels.len();
    let model = DipFormer::new(cfg)?;
    let store = model.init_params::<f32>(seed);
    let mut tape = Tape::<f32>::new();
    let bound = store.bind_frozen(&mut tape);
    let rgb = Tensor::from_fn(&[1, 3, size, size], |i| ((i * 7919) % 256) as f32 / 255.0);
    let depth = Tensor::from_fn(&[1, 1, size, size], |i| ((i * 104_729) % 256) as f32 / 255.0);
    let (r, d) = (tape.constant(rgb), tape.constant(depth));
    model.forward(&mut tape, &bound, r, d)?;
    let c = tape.take_counter();
    let lca = |i: usize| format!("stage{}/lca", i + 1);
    let lca_attn: Vec<u64> = (0..stages)
        .map(|i| c.total_leaf(&lca(i), "scores") + c.total_leaf(&lca(i), "weighted_sum"))
        .collect();
    let lca_all: u64 = (0..stages).map(|i| c.total(&lca(i))).sum();
    Ok(BenchRow {
        size,
        input: c.total("input"),
        pe: c.total("pe"),
        encoder: (0..stages).map(|i| c.total(&format!("stage{}", i + 1))).sum::<u64>() - lca_all,
        lca_proj: lca_all - lca_attn.iter().sum::<u64>(),
        kv_tokens: (0..stages).map(|i| c.kv_tokens(&lca(i)).unwrap_or(0)).collect(),
        lca_attn,
        decoder: c.total("decoder"),
        head: c.total("head"),
        total: c.grand_total(),
    })
}

fn ratio(now: u64, before: Option<u64>) -> String {
    match before {
        Some(b) if b > 0 => format!("{:.4}", now as f64 / b as f64),
        _ => "-".into(),
    }
}

pub fn bench(a: &BenchArgs) -> Result<Outcome> {
    if a.sizes.is_empty() {
        return Err(Error::Usage("--sizes needs at least one size".into()));
    }
    if let Some(s) = a.sizes.iter().find(|&&s| s == 0 || s % 16 != 0) {
        return Err(Error::Usage(format!("size {s} is not a positive multiple of 16")));
    }
    let file = ConfigFile::load(a.config.as_deref())?;
    let mut rows = Vec::with_capacity(a.sizes.len());
    for &size in &a.sizes {
        info!("bench size {size}");
        rows.push(bench_size(&file.model, size, a.seed)?);
    }
    let stages = rows[0].kv_tokens.len();
    let mut header = vec!["size", "input", "pe", "encoder", "lca_proj", "lca_attn", "decoder", "head", "total"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    header.extend((1..=stages).map(|i| format!("lca_attn_s{i}")));
    header.extend((1..=stages).map(|i| format!("kv_tokens_s{i}")));
    header.extend(["pixel_ratio", "lca_attn_ratio", "decoder_ratio"].map(String::from));
    let mut csv = header.join(",") + "\n";
    let mut prev: Option<&BenchRow> = None;
    for r in &rows {
        let attn: u64 = r.lca_attn.iter().sum();
        let mut cells: Vec<String> = [r.size as u64, r.input, r.pe, r.encoder, r.lca_proj, attn, r.decoder, r.head, r.total]
            .iter()
            .map(u64::to_string)
            .collect();
        cells.extend(r.lca_attn.iter().map(u64::to_string));
        cells.extend(r.kv_tokens.iter().map(usize::to_string));
        cells.push(ratio((r.size * r.size) as u64, prev.map(|p| (p.size * p.size) as u64)));
        cells.push(ratio(attn, prev.map(|p| p.lca_attn.iter().sum())));
        cells.push(ratio(r.decoder, prev.map(|p| p.decoder)));
        csv.push_str(&(cells.join(",") + "\n"));
        prev = Some(r);
    }
    print!("{csv}");
    if let Some(out) = &a.out {
        write_atomic(out, csv.as_bytes())?;
    }
    Ok(Outcome::Ok)
}

pub fn ablate(a: &AblateArgs) -> Result<Outcome> {
    let file = ConfigFile::load(a.run.config.as_deref())?;
    let train = load_labeled(&a.data)?;
    let test = match &a.test {
        Some(p) => load_labeled(p)?,
        None => train.clone(),
    };
    let base = settings::model_config(&file, &a.run, &train)?;
    let cfg = settings::train_config(&file, &a.run)?;
    let arms = a.arms.iter().map(|s| ArmSpec::parse(s.trim())).collect::<Result<Vec<_>>>()?;
    let table = match base.precision {
        Precision::Standard => run_ablation::<f32>(&arms, &base, &cfg, &train, &test, &a.focus)?,
        Precision::Verification => run_ablation::<f64>(&arms, &base, &cfg, &train, &test, &a.focus)?,
    };
    let csv = table.to_csv();
    print!("{csv}");
    if let Some(out) = &a.out {
        write_atomic(out, csv.as_bytes())?;
    }
    Ok(Outcome::Ok)
}
