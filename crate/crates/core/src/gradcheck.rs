//! Centered finite-difference checks of the tape's analytic gradients, run
//! in f64.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand::seq::{IndexedRandom, SliceRandom};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{DipFormer, ModelConfig, IGNORE_LABEL};
use crate::pe::PeKind;
use crate::tensor::{OpKind, Precision, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-5;
pub const END_TO_END_TOLERANCE: f64 = 1e-4;

/// `|analytic - fd| / (|fd| + 1e-8)`.
pub fn relative_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / (fd.abs() + 1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub op: Option<OpKind>,
    pub max_rel_err: f64,
    /// Input tensor and flat index of the worst element.
    pub worst: (String, usize),
    pub checked: usize,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} {} max_rel_err={:.3e} worst={}[{}] checked={} tol={:.0e}",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.worst.0,
            self.worst.1,
            self.checked,
            self.tolerance
        )
    }
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

fn weighted_loss(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn eval_loss(inputs: &[(String, Tensor<f64>)], build: &Build, weights: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let loss = weighted_loss(&mut tape, out, weights)?;
    Ok(tape.value(loss).data()[0])
}

/// Compares analytic gradients of `sum(build(inputs) * W)` for a fixed
/// random `W` against centered differences on every input element.
pub fn check_function(
    name: &str,
    op: Option<OpKind>,
    inputs: Vec<(String, Tensor<f64>)>,
    build: &Build,
    seed: u64,
    fault: Option<OpKind>,
) -> Result<CheckResult> {
    let mut tape = Tape::new();
    if let Some(k) = fault {
        tape.inject_fault(k);
    }
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.leaf(t.clone().with_requires_grad(true))).collect();
    let out = build(&mut tape, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let weights = Tensor::from_fn(tape.shape(out), |_| rng.random_range(0.5..1.5) * if rng.random() { 1.0 } else { -1.0 });
    let loss = weighted_loss(&mut tape, out, &weights)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, (_, t))| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    drop(tape);

    let mut worst = (0.0, (inputs[0].0.clone(), 0));
    let mut checked = 0;
    let mut probe = inputs.clone();
    for (ti, (tname, t)) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let orig = t.data()[i];
            probe[ti].1.data_mut()[i] = orig + FD_STEP;
            let up = eval_loss(&probe, build, &weights)?;
            probe[ti].1.data_mut()[i] = orig - FD_STEP;
            let down = eval_loss(&probe, build, &weights)?;
            probe[ti].1.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let err = relative_error(analytic[ti][i], fd);
            if err > worst.0 || err.is_nan() {
                worst = (err, (tname.clone(), i));
            }
            checked += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        op,
        max_rel_err: worst.0,
        worst: worst.1,
        checked,
        tolerance: OP_TOLERANCE,
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values a fixed gap apart in shuffled order, so max selection and ReLU
/// signs never flip under the finite-difference step.
fn separated(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * gap).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).expect("shape matches")
}

struct Case {
    name: &'static str,
    op: OpKind,
    inputs: Vec<(String, Tensor<f64>)>,
    build: Box<Build<'static>>,
}

fn case(name: &'static str, op: OpKind, inputs: Vec<(&str, Tensor<f64>)>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        op,
        inputs: inputs.into_iter().map(|(n, t)| (n.to_string(), t)).collect(),
        build: Box::new(build),
    }
}

fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    vec![
        case(
            "conv2d",
            OpKind::Conv2d,
            vec![("x", uniform(r, &[2, 3, 5, 5], -1.0, 1.0)), ("w", uniform(r, &[4, 3, 3, 3], -1.0, 1.0)), ("b", uniform(r, &[4], -1.0, 1.0))],
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
        ),
        case(
            "conv2d/stride2",
            OpKind::Conv2d,
            vec![("x", uniform(r, &[1, 2, 7, 7], -1.0, 1.0)), ("w", uniform(r, &[3, 2, 3, 3], -1.0, 1.0))],
            |t, v| t.conv2d(v[0], v[1], None, 2, 1),
        ),
        case(
            "conv2d/depthwise",
            OpKind::Conv2d,
            vec![("x", uniform(r, &[1, 3, 4, 4], -1.0, 1.0)), ("w", uniform(r, &[3, 1, 3, 3], -1.0, 1.0)), ("b", uniform(r, &[3], -1.0, 1.0))],
            |t, v| t.conv2d_grouped(v[0], v[1], Some(v[2]), 1, 1, 3),
        ),
        case(
            "group_norm",
            OpKind::GroupNorm,
            vec![("x", uniform(r, &[2, 4, 3, 3], -2.0, 2.0)), ("gamma", uniform(r, &[4], 0.5, 1.5)), ("beta", uniform(r, &[4], -1.0, 1.0))],
            |t, v| t.group_norm(v[0], 2, v[1], v[2], 1e-5),
        ),
        case(
            "linear",
            OpKind::Linear,
            vec![("x", uniform(r, &[5, 3], -1.0, 1.0)), ("w", uniform(r, &[4, 3], -1.0, 1.0)), ("b", uniform(r, &[4], -1.0, 1.0))],
            |t, v| t.linear(v[0], v[1], Some(v[2])),
        ),
        case(
            "channel_linear",
            OpKind::ChannelLinear,
            vec![("x", uniform(r, &[2, 3, 3, 3], -1.0, 1.0)), ("w", uniform(r, &[4, 3], -1.0, 1.0)), ("b", uniform(r, &[4], -1.0, 1.0))],
            |t, v| t.channel_linear(v[0], v[1], Some(v[2])),
        ),
        case(
            "max_pool2d",
            OpKind::MaxPool2d,
            vec![("x", separated(r, &[1, 2, 6, 6], 0.01))],
            |t, v| t.max_pool2d(v[0], 2, 2),
        ),
        case(
            "adaptive_avg_pool2d",
            OpKind::AdaptiveAvgPool2d,
            vec![("x", uniform(r, &[1, 2, 7, 5], -1.0, 1.0))],
            |t, v| t.adaptive_avg_pool2d(v[0], 3),
        ),
        case(
            "softmax",
            OpKind::Softmax,
            vec![("x", uniform(r, &[3, 5], -2.0, 2.0))],
            |t, v| t.softmax(v[0]),
        ),
        case(
            "bilinear_resize/up",
            OpKind::BilinearResize,
            vec![("x", uniform(r, &[1, 2, 3, 4], -1.0, 1.0))],
            |t, v| t.bilinear_resize(v[0], 7, 9),
        ),
        case(
            "bilinear_resize/down",
            OpKind::BilinearResize,
            vec![("x", uniform(r, &[1, 2, 6, 5], -1.0, 1.0))],
            |t, v| t.bilinear_resize(v[0], 3, 2),
        ),
        case(
            "add",
            OpKind::Add,
            vec![("a", uniform(r, &[2, 3, 2, 2], -1.0, 1.0)), ("b", uniform(r, &[1, 3, 2, 2], -1.0, 1.0))],
            |t, v| t.add(v[0], v[1]),
        ),
        case(
            "mul",
            OpKind::Mul,
            vec![("a", uniform(r, &[2, 3], -1.0, 1.0)), ("b", uniform(r, &[2, 3], -1.0, 1.0))],
            |t, v| t.mul(v[0], v[1]),
        ),
        case("scale", OpKind::Scale, vec![("x", uniform(r, &[4, 3], -1.0, 1.0))], |t, v| t.scale(v[0], -1.7)),
        case("relu", OpKind::Relu, vec![("x", separated(r, &[3, 4], 0.1))], |t, v| t.relu(v[0])),
        case("sum", OpKind::Sum, vec![("x", uniform(r, &[2, 3, 2], -1.0, 1.0))], |t, v| t.sum(v[0])),
        case("mean", OpKind::Mean, vec![("x", uniform(r, &[2, 3, 2], -1.0, 1.0))], |t, v| t.mean(v[0])),
        case(
            "reshape",
            OpKind::Reshape,
            vec![("x", uniform(r, &[2, 6], -1.0, 1.0))],
            |t, v| t.reshape(v[0], &[3, 4]),
        ),
        case(
            "concat_channels",
            OpKind::ConcatChannels,
            vec![("a", uniform(r, &[2, 2, 2, 2], -1.0, 1.0)), ("b", uniform(r, &[2, 1, 2, 2], -1.0, 1.0))],
            |t, v| t.concat_channels(&[v[0], v[1]]),
        ),
        case(
            "cross_attention",
            OpKind::CrossAttention,
            vec![
                ("q", uniform(r, &[2, 4, 3, 2], -1.0, 1.0)),
                ("k", uniform(r, &[2, 4, 2, 2], -1.0, 1.0)),
                ("v", uniform(r, &[2, 4, 2, 2], -1.0, 1.0)),
            ],
            |t, v| t.cross_attention(v[0], v[1], v[2], 2, 0.7),
        ),
        case(
            "cross_entropy",
            OpKind::CrossEntropy,
            vec![("logits", uniform(r, &[2, 4, 2, 3], -2.0, 2.0))],
            |t, v| t.cross_entropy(v[0], &[0, 1, 2, 3, 255, 1, 3, 3, 2, 0, 1, 255], 255),
        ),
    ]
}

/// Every tape op against finite differences. `fault` corrupts the backward
/// pass of one op kind on the analytic side.
pub fn op_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckResult>> {
    op_cases(seed)
        .into_iter()
        .map(|c| check_function(c.name, Some(c.op), c.inputs, &*c.build, seed, fault))
        .collect()
}

/// Op kinds exercised by [`op_suite`].
pub fn covered_ops() -> Vec<OpKind> {
    let mut ops: Vec<OpKind> = op_cases(0).iter().map(|c| c.op).collect();
    ops.dedup();
    ops
}

/// The reduced model used by the end-to-end check.
pub fn reduced_config() -> ModelConfig {
    ModelConfig {
        stage_channels: vec![8],
        stage_heads: vec![2],
        pool_size: 7,
        n_cls: 3,
        decoder_channels: 8,
        decoder_hidden: 8,
        pe_kind: PeKind::DepthSao,
        use_lca: true,
        use_decoder: true,
        recompute_stages: false,
        input_height: 16,
        input_width: 16,
        seed: 0,
        precision: Precision::Verification,
    }
}

/// Cross-entropy of the reduced model on a random 1x3x16x16 input against
/// centered differences on `n_params` randomly chosen parameter entries.
/// Weights are drawn wider than the training init so that every gradient
/// stays well above the finite-difference noise floor.
pub fn end_to_end(seed: u64, n_params: usize, fault: Option<OpKind>) -> Result<CheckResult> {
    let cfg = reduced_config();
    let model = DipFormer::new(cfg.clone())?;
    let mut store = model.init_params::<f64>(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    store.map_values(|name, v| {
        if name.ends_with("weight") || name.ends_with("table") {
            v.iter_mut().for_each(|x| *x = rng.random_range(-0.6..0.6));
        } else if name.ends_with("bias") || name.ends_with("beta") {
            v.iter_mut().for_each(|x| *x = rng.random_range(-0.2..0.2));
        }
    });
    let (h, w) = (cfg.input_height, cfg.input_width);
    let rgb = uniform(&mut rng, &[1, 3, h, w], 0.0, 1.0);
    let depth = uniform(&mut rng, &[1, 1, h, w], 0.0, 1.0);
    let labels: Vec<u8> = (0..h * w)
        .map(|_| if rng.random_bool(0.1) { IGNORE_LABEL } else { rng.random_range(0..cfg.n_cls as u8) })
        .collect();

    let loss_of = |store: &crate::params::ParamStore<f64>, tape: &mut Tape<f64>| -> Result<(Var, crate::params::Bound)> {
        let bound = store.bind(tape);
        let (r, d) = (tape.constant(rgb.clone()), tape.constant(depth.clone()));
        let out = model.forward(tape, &bound, r, d)?;
        Ok((tape.cross_entropy(out.logits, &labels, IGNORE_LABEL)?, bound))
    };

    let mut tape = Tape::new();
    if let Some(k) = fault {
        tape.inject_fault(k);
    }
    let (loss, bound) = loss_of(&store, &mut tape)?;
    tape.backward(loss)?;
    store.collect_grads(&tape, &bound);
    drop(tape);

    let mut flat: Vec<(crate::params::ParamId, usize)> = Vec::new();
    for id in store.ids() {
        for i in 0..store.get(id).numel() {
            flat.push((id, i));
        }
    }
    let picks: Vec<_> = flat.choose_multiple(&mut rng, n_params).copied().collect();
    let mut worst = (0.0, (String::new(), 0));
    let mut probe = store.clone();
    for (id, i) in picks {
        let analytic = store.get(id).grad().map_or(0.0, |g| g[i]);
        let orig = store.get(id).data()[i];
        let mut at = |v: f64| -> Result<f64> {
            probe.get_mut(id).data_mut()[i] = v;
            let mut t = Tape::new();
            let (l, _) = loss_of(&probe, &mut t)?;
            Ok(t.value(l).data()[0])
        };
        let fd = (at(orig + FD_STEP)? - at(orig - FD_STEP)?) / (2.0 * FD_STEP);
        probe.get_mut(id).data_mut()[i] = orig;
        let err = relative_error(analytic, fd);
        if err > worst.0 || err.is_nan() || worst.1 .0.is_empty() {
            worst = (err, (store.name(id).to_string(), i));
        }
    }
    Ok(CheckResult {
        name: "end_to_end".into(),
        op: None,
        max_rel_err: worst.0,
        worst: worst.1,
        checked: n_params,
        tolerance: END_TO_END_TOLERANCE,
    })
}
