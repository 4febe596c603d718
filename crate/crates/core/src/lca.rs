//! Depth linear cross-attention: depth tokens query a fixed P x P grid of
//! average-pooled RGB keys and values.

use crate::error::{bail, Error, Result};
use crate::params::{Bound, LinearParams, ParamLayout, ParamStore};
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LcaParams {
    pub q_proj: LinearParams,
    pub k_proj: LinearParams,
    pub v_proj: LinearParams,
    pub out_proj: LinearParams,
    pub num_heads: usize,
    pub pool_size: usize,
    pub scale: f64,
}

impl LcaParams {
    pub fn register(layout: &mut ParamLayout, prefix: &str, channels: usize, num_heads: usize, pool_size: usize) -> Result<Self> {
        if num_heads == 0 || channels % num_heads != 0 {
            bail!(Config, "{channels} channels are not divisible by {num_heads} heads");
        }
        if pool_size == 0 {
            bail!(Config, "pool size must be positive");
        }
        Ok(LcaParams {
            q_proj: LinearParams::register(layout, &format!("{prefix}.q"), channels, channels),
            k_proj: LinearParams::register(layout, &format!("{prefix}.k"), channels, channels),
            v_proj: LinearParams::register(layout, &format!("{prefix}.v"), channels, channels),
            out_proj: LinearParams::register(layout, &format!("{prefix}.out"), channels, channels),
            num_heads,
            pool_size,
            scale: 1.0 / ((channels / num_heads) as f64).sqrt(),
        })
    }

    pub fn channels(&self) -> usize {
        self.q_proj.in_features
    }
}

struct Projected {
    attended: Var,
}

fn project_and_attend<T: Element>(
    tape: &mut Tape<T>,
    bound: &Bound,
    r_f: Var,
    d_f: Var,
    params: &LcaParams,
) -> Result<Projected> {
    let rs = tape.value(r_f).dims4()?;
    let ds = tape.value(d_f).dims4()?;
    if rs != ds {
        bail!(Dimension, "rgb feature {rs:?} and depth feature {ds:?} differ");
    }
    let [_, c, h, w] = rs;
    if c != params.channels() {
        bail!(Config, "attention built for {} channels, feature has {c}", params.channels());
    }
    let p = params.pool_size;
    if p * p > h * w || p > h || p > w {
        bail!(Geometry, "pool grid {p}x{p} does not fit a {h}x{w} feature");
    }
    let q = params.q_proj.apply_channels(tape, bound, d_f)?;
    let pooled = tape.adaptive_avg_pool2d(r_f, p)?;
    let k = params.k_proj.apply_channels(tape, bound, pooled)?;
    let v = params.v_proj.apply_channels(tape, bound, pooled)?;
    let attended = tape.cross_attention(q, k, v, params.num_heads, params.scale)?;
    Ok(Projected { attended })
}

/// `out_proj(concat_h softmax(Q_h K_h^T * scale) V_h)` with `Q` from the
/// depth feature and `K`, `V` from the pooled RGB feature. Output has the
/// shape of `d_f`.
pub fn lca_forward<T: Element>(tape: &mut Tape<T>, bound: &Bound, r_f: Var, d_f: Var, params: &LcaParams) -> Result<Var> {
    let proj = project_and_attend(tape, bound, r_f, d_f, params)?;
    params.out_proj.apply_channels(tape, bound, proj.attended)
}

/// Head-averaged attention row of query `query_index` (row-major over the
/// stage grid) of the first sample, as a `[P, P]` map over pooled bins.
pub fn lca_attention_map<T: Element>(
    store: &ParamStore<T>,
    r_f: &Tensor<T>,
    d_f: &Tensor<T>,
    params: &LcaParams,
    query_index: usize,
) -> Result<Tensor<T>> {
    let [_, _, h, w] = d_f.dims4()?;
    if query_index >= h * w {
        bail!(Usage, "query index {query_index} outside a {h}x{w} feature");
    }
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let (r, d) = (tape.constant(r_f.clone()), tape.constant(d_f.clone()));
    let proj = project_and_attend(&mut tape, &bound, r, d, params)?;
    let (probs, shape) = tape
        .attention_probs(proj.attended)
        .ok_or_else(|| Error::Usage("attention node missing".into()))?;
    let p = params.pool_size;
    let mut map = vec![T::zero(); shape.lk];
    for head in 0..shape.heads {
        let row = &probs[(head * shape.lq + query_index) * shape.lk..][..shape.lk];
        map.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
    }
    let heads = T::lit(shape.heads as f64);
    map.iter_mut().for_each(|m| *m /= heads);
    Tensor::new(&[p, p], map)
}
