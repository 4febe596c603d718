//! Cross-entropy training with AdamW and warmup + cosine decay, evaluation,
//! and the ablation runner.

use std::fmt::Write as _;
use std::path::PathBuf;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::save_checkpoint;
use crate::data::{make_batch, random_hflip, SegSample};
use crate::error::{bail, Error, Result};
use crate::kv::KvMap;
use crate::metrics::{MulticlassConfusion, MulticlassMetrics};
use crate::model::{argmax_labels, DipFormer, ModelConfig, IGNORE_LABEL};
use crate::params::ParamStore;
use crate::pe::PeKind;
use crate::tensor::{Element, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate every this many steps (and always after the last one).
    pub eval_every: usize,
    pub flip_p: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 6e-5,
            weight_decay: 0.05,
            warmup_steps: 10,
            total_steps: 100,
            batch_size: 4,
            seed: 0,
            eval_every: 50,
            flip_p: 0.5,
        }
    }
}

const TRAIN_KEYS: [&str; 8] = [
    "lr0",
    "weight_decay",
    "warmup_steps",
    "total_steps",
    "batch_size",
    "seed",
    "eval_every",
    "flip_p",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            bail!(
                Config,
                "need 0 <= warmup_steps < total_steps, got {} and {}",
                self.warmup_steps,
                self.total_steps
            );
        }
        if !(self.lr0 > 0.0) || !(self.weight_decay >= 0.0) {
            bail!(Config, "lr0 must be positive and weight_decay non-negative");
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            bail!(Config, "batch_size and eval_every must be positive");
        }
        if !(0.0..=1.0).contains(&self.flip_p) {
            bail!(Config, "flip_p {} outside [0, 1]", self.flip_p);
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.insert("lr0", self.lr0);
        kv.insert("weight_decay", self.weight_decay);
        kv.insert("warmup_steps", self.warmup_steps);
        kv.insert("total_steps", self.total_steps);
        kv.insert("batch_size", self.batch_size);
        kv.insert("seed", self.seed);
        kv.insert("eval_every", self.eval_every);
        kv.insert("flip_p", self.flip_p);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        kv.reject_unknown(&TRAIN_KEYS)?;
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            lr0: kv.get_or("lr0", d.lr0)?,
            weight_decay: kv.get_or("weight_decay", d.weight_decay)?,
            warmup_steps: kv.get_or("warmup_steps", d.warmup_steps)?,
            total_steps: kv.get_or("total_steps", d.total_steps)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            seed: kv.get_or("seed", d.seed)?,
            eval_every: kv.get_or("eval_every", d.eval_every)?,
            flip_p: kv.get_or("flip_p", d.flip_p)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Linear warmup from 0 to `lr0`, then half-cosine down to 0 at
/// `total_steps`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        bail!(Usage, "step {step} beyond total_steps {}", cfg.total_steps);
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.lr0 * step as f64 / cfg.warmup_steps as f64);
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    Ok(cfg.lr0 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Element> AdamWState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = store.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        AdamWState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One AdamW update from the gradients held in `store`. Weight decay is
/// decoupled and skipped for tensors registered without decay. A tensor
/// without a gradient is treated as having a zero gradient.
pub fn adamw_step<T: Element>(store: &mut ParamStore<T>, state: &mut AdamWState<T>, lr: f64, wd: f64) -> Result<()> {
    if state.m.len() != store.len() {
        bail!(Usage, "optimizer tracks {} tensors, store has {}", state.m.len(), store.len());
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let (one, eps) = (T::one(), T::lit(state.eps));
    let bc1 = T::lit(1.0 - state.beta1.powi(t));
    let bc2 = T::lit(1.0 - state.beta2.powi(t));
    let lr_t = T::lit(lr);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let decay = store.decays(id);
        let tensor = store.get_mut(id);
        let n = tensor.numel();
        if state.m[i].len() != n || state.v[i].len() != n {
            bail!(Usage, "moment size {} does not match parameter size {n}", state.m[i].len());
        }
        if tensor.grad().is_some_and(|g| g.len() != n) {
            bail!(Usage, "gradient size does not match parameter size {n}");
        }
        let grad: Vec<T> = tensor.grad().map_or_else(|| vec![T::zero(); n], <[T]>::to_vec);
        let shrink = T::lit(1.0 - lr * wd);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, p) in tensor.data_mut().iter_mut().enumerate() {
            if decay {
                *p = *p * shrink;
            }
            let g = grad[k];
            m[k] = b1 * m[k] + (one - b1) * g;
            v[k] = b2 * v[k] + (one - b2) * g * g;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *p = *p - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Mean cross-entropy of full-resolution logits against `labels`.
pub fn cross_entropy_loss<T: Element>(logits: &Tensor<T>, labels: &[u8], ignore: u8) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone());
    let loss = tape.cross_entropy(x, labels, ignore)?;
    Ok(tape.value(loss).data()[0].as_f64())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub miou: Option<f64>,
}

pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut s = String::from("step,loss,lr,miou\n");
    for r in history {
        let miou = r.miou.map_or(String::new(), |m| format!("{m:.6}"));
        writeln!(s, "{},{:.9},{:.9e},{miou}", r.step, r.loss, r.lr).unwrap();
    }
    s
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Written whenever evaluation mIoU improves.
    pub best_checkpoint: Option<PathBuf>,
    /// Receives a key=value dump if the loss turns non-finite.
    pub diagnostic_path: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: ParamStore<T>,
    pub best_params: ParamStore<T>,
    pub best_miou: f64,
    pub history: Vec<HistoryRow>,
}

/// Accumulated confusion of `model` over `samples`.
pub fn evaluate<T: Element>(
    model: &DipFormer,
    store: &ParamStore<T>,
    samples: &[SegSample],
    batch_size: usize,
) -> Result<MulticlassConfusion> {
    let mut conf = MulticlassConfusion::new(model.config().n_cls, IGNORE_LABEL);
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SegSample> = chunk.iter().collect();
        let batch = make_batch::<T>(&refs)?;
        let pred = model.predict(store, &batch.rgb, &batch.depth)?;
        conf.add(&pred, &batch.labels)?;
    }
    Ok(conf)
}

pub fn evaluate_metrics<T: Element>(
    model: &DipFormer,
    store: &ParamStore<T>,
    samples: &[SegSample],
    batch_size: usize,
) -> Result<MulticlassMetrics> {
    evaluate(model, store, samples, batch_size)?.finish()
}

fn describe_batch<T: Element>(step: usize, lr: f64, indices: &[usize], rgb: &Tensor<T>, depth: &Tensor<T>, logits: Option<&Tensor<T>>) -> KvMap {
    let range = |t: &Tensor<T>| {
        let (lo, hi) = t
            .data()
            .iter()
            .map(|v| v.as_f64())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        format!("{lo},{hi}")
    };
    let mut kv = KvMap::default();
    kv.insert("step", step);
    kv.insert("lr", lr);
    kv.insert("samples", indices.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
    kv.insert("rgb_range", range(rgb));
    kv.insert("depth_range", range(depth));
    if let Some(l) = logits {
        kv.insert("nonfinite_logits", l.data().iter().filter(|v| !v.is_finite()).count());
    }
    kv
}

pub fn run_training<T: Element>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train: &[SegSample],
    eval: Option<&[SegSample]>,
    opts: &TrainOptions,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        bail!(Data, "training set is empty");
    }
    if train.iter().any(|s| s.labels.is_none()) {
        bail!(Data, "every training sample needs labels");
    }
    let model = DipFormer::new(model_cfg.clone())?;
    let mut store = model.init_params::<T>(model_cfg.seed);
    let mut opt = AdamWState::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eval_set = eval.unwrap_or(train);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut history = Vec::with_capacity(cfg.total_steps);
    let mut best = (f64::NEG_INFINITY, store.clone());

    for step in 0..cfg.total_steps {
        let lr = lr_schedule(step, cfg)?;
        let mut indices = Vec::with_capacity(cfg.batch_size);
        while indices.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            indices.push(order[cursor]);
            cursor += 1;
        }
        let flipped: Vec<SegSample> = indices.iter().map(|&i| random_hflip(&train[i], cfg.flip_p, &mut rng)).collect();
        let refs: Vec<&SegSample> = flipped.iter().collect();
        let batch = make_batch::<T>(&refs)?;

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let (r, d) = (tape.constant(batch.rgb.clone()), tape.constant(batch.depth.clone()));
        let out = model.forward(&mut tape, &bound, r, d)?;
        let loss_var = tape.cross_entropy(out.logits, &batch.labels, IGNORE_LABEL)?;
        let loss = tape.value(loss_var).data()[0].as_f64();
        if !loss.is_finite() {
            let dump = describe_batch(step, lr, &indices, &batch.rgb, &batch.depth, Some(tape.value(out.logits)));
            if let Some(p) = &opts.diagnostic_path {
                crate::atomic::write_atomic(p, dump.render().as_bytes())?;
            }
            return Err(Error::NonFiniteLoss {
                step,
                detail: dump.render().trim_end().replace('\n', " "),
            });
        }
        tape.backward(loss_var)?;
        store.zero_grads();
        store.collect_grads(&tape, &bound);
        drop(tape);
        adamw_step(&mut store, &mut opt, lr, cfg.weight_decay)?;
        debug!("step {step} loss {loss:.6} lr {lr:.3e}");

        let mut row = HistoryRow {
            step,
            loss,
            lr,
            miou: None,
        };
        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.total_steps {
            let miou = evaluate_metrics(&model, &store, eval_set, cfg.batch_size)?.miou;
            info!("step {step} loss {loss:.4} miou {miou:.2}");
            row.miou = Some(miou);
            if miou > best.0 {
                best = (miou, store.clone());
                if let Some(p) = &opts.best_checkpoint {
                    save_checkpoint(&best.1, model_cfg, p)?;
                }
            }
        }
        history.push(row);
    }
    let mut params = store;
    params.zero_grads();
    Ok(TrainOutcome {
        params,
        best_params: best.1,
        best_miou: best.0,
        history,
    })
}

/// One ablation arm: a model variant trained on shared data.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArmSpec {
    pub name: String,
    pub pe_kind: PeKind,
    pub use_lca: bool,
    pub use_decoder: bool,
}

impl ArmSpec {
    /// Known names: `baseline`, `sao`, `lca`, `sao+lca`, `no-decoder`, and
    /// `pe:<kind>` for a position embedding without cross-attention.
    pub fn parse(name: &str) -> Result<Self> {
        let arm = |pe_kind, use_lca, use_decoder| ArmSpec {
            name: name.to_string(),
            pe_kind,
            use_lca,
            use_decoder,
        };
        Ok(match name {
            "baseline" => arm(PeKind::Implicit, false, true),
            "sao" => arm(PeKind::DepthSao, false, true),
            "lca" => arm(PeKind::Implicit, true, true),
            "sao+lca" => arm(PeKind::DepthSao, true, true),
            "no-decoder" => arm(PeKind::DepthSao, true, false),
            other => match other.strip_prefix("pe:") {
                Some(kind) => arm(kind.parse()?, false, true),
                None => bail!(Config, "unknown ablation arm {other:?}"),
            },
        })
    }

    pub fn component_arms() -> Vec<ArmSpec> {
        ["baseline", "sao", "lca", "sao+lca"]
            .iter()
            .map(|n| ArmSpec::parse(n).expect("known arm"))
            .collect()
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            pe_kind: self.pe_kind,
            use_lca: self.use_lca,
            use_decoder: self.use_decoder,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub arm: ArmSpec,
    pub param_count: usize,
    pub miou: f64,
    pub macc: f64,
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean IoU over the focus classes, when any were given.
    pub focus_iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub focus_classes: Vec<u8>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("arm,pe_kind,use_lca,use_decoder,params,miou,macc,focus_iou\n");
        for r in &self.rows {
            let focus = r.focus_iou.map_or(String::new(), |v| format!("{v:.4}"));
            writeln!(
                s,
                "{},{},{},{},{},{:.4},{:.4},{focus}",
                r.arm.name, r.arm.pe_kind, r.arm.use_lca, r.arm.use_decoder, r.param_count, r.miou, r.macc
            )
            .unwrap();
        }
        s
    }

    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.arm.name == name)
    }
}

/// Mean IoU over `classes`, skipping classes absent from the ground truth.
pub fn focus_iou(metrics: &MulticlassMetrics, classes: &[u8]) -> Option<f64> {
    let v: Vec<f64> = classes
        .iter()
        .filter_map(|&c| metrics.per_class_iou.get(c as usize).copied().flatten())
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Trains every arm with the same seed, data and schedule and evaluates on
/// `test`. Rows follow the order of `arms`.
pub fn run_ablation<T: Element>(
    arms: &[ArmSpec],
    base: &ModelConfig,
    cfg: &TrainConfig,
    train: &[SegSample],
    test: &[SegSample],
    focus_classes: &[u8],
) -> Result<AblationTable> {
    if arms.len() < 2 {
        bail!(Usage, "an ablation needs at least 2 arms, got {}", arms.len());
    }
    let mut rows = Vec::with_capacity(arms.len());
    for arm in arms {
        let mcfg = arm.apply(base);
        info!("ablation arm {}", arm.name);
        let outcome = run_training::<T>(&mcfg, cfg, train, None, &TrainOptions::default())?;
        let model = DipFormer::new(mcfg)?;
        let m = evaluate_metrics(&model, &outcome.params, test, cfg.batch_size)?;
        rows.push(AblationRow {
            arm: arm.clone(),
            param_count: model.param_count(),
            miou: m.miou,
            macc: m.macc,
            focus_iou: (!focus_classes.is_empty()).then(|| focus_iou(&m, focus_classes)).flatten(),
            per_class_iou: m.per_class_iou,
        });
    }
    Ok(AblationTable {
        rows,
        focus_classes: focus_classes.to_vec(),
    })
}

/// Class predictions of `model` for every sample, concatenated.
pub fn predict_all<T: Element>(model: &DipFormer, store: &ParamStore<T>, samples: &[SegSample], batch_size: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SegSample> = chunk.iter().collect();
        let b = make_batch::<T>(&refs)?;
        out.extend(argmax_labels(&model.logits(store, &b.rgb, &b.depth)?)?);
    }
    Ok(out)
}
