//! Gradient-free convenience forms of the tape operations.

use super::{Element, Tape, Tensor, Var};
use crate::error::Result;

fn run<T: Element>(inputs: &[&Tensor<T>], f: impl FnOnce(&mut Tape<T>, &[Var]) -> Result<Var>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.constant((*t).clone()))
        .collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).clone())
}

pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    match bias {
        Some(b) => run(&[x, weight, b], |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, padding)),
        None => run(&[x, weight], |t, v| t.conv2d(v[0], v[1], None, stride, padding)),
    }
}

pub fn group_norm<T: Element>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    run(&[x, gamma, beta], |t, v| t.group_norm(v[0], groups, v[1], v[2], eps))
}

pub fn linear<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    match bias {
        Some(b) => run(&[x, weight, b], |t, v| t.linear(v[0], v[1], Some(v[2]))),
        None => run(&[x, weight], |t, v| t.linear(v[0], v[1], None)),
    }
}

pub fn max_pool2d<T: Element>(x: &Tensor<T>, k: usize, stride: usize) -> Result<Tensor<T>> {
    run(&[x], |t, v| t.max_pool2d(v[0], k, stride))
}

pub fn adaptive_avg_pool2d<T: Element>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    run(&[x], |t, v| t.adaptive_avg_pool2d(v[0], p))
}

pub fn softmax<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    run(&[x], |t, v| t.softmax(v[0]))
}

pub fn bilinear_resize<T: Element>(x: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    run(&[x], |t, v| t.bilinear_resize(v[0], height, width))
}
