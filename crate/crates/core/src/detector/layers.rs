//! Parameter initialization and the small dense/conv building blocks.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

pub fn init_conv(
    store: &mut ParamStore,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    bias: bool,
    rng: &mut impl Rng,
) -> Result<()> {
    store.insert(format!("{name}.w"), he_normal(&[cout, cin, k, k], cin * k * k, rng))?;
    if bias {
        store.insert(format!("{name}.b"), Tensor::zeros(&[cout]))?;
    }
    Ok(())
}

/// Weight `(in, out)` plus bias `(out)`.
pub fn init_linear(store: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut impl Rng) -> Result<()> {
    store.insert(format!("{name}.w"), he_normal(&[inp, out], inp, rng))?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[out]))
}

/// Linear layer whose weights start at zero (prediction heads that should
/// begin at the identity transform).
pub fn init_linear_zero(store: &mut ParamStore, name: &str, inp: usize, out: usize) -> Result<()> {
    store.insert(format!("{name}.w"), Tensor::zeros(&[inp, out]))?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[out]))
}

/// Scaled-down normal init for output layers.
pub fn init_linear_small(
    store: &mut ParamStore,
    name: &str,
    inp: usize,
    out: usize,
    std: f64,
    rng: &mut impl Rng,
) -> Result<()> {
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..inp * out).map(|_| normal.sample(rng)).collect();
    store.insert(format!("{name}.w"), Tensor::new(&[inp, out], data)?)?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[out]))
}

pub fn conv(g: &mut Graph, store: &ParamStore, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let bname = format!("{name}.b");
    let b = if store.contains(&bname) {
        Some(g.param(store, &bname)?)
    } else {
        None
    };
    g.conv2d(x, w, b, stride, pad)
}

pub fn linear(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// `fc2(relu(fc1(x)))`.
pub fn mlp2(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let h = linear(g, store, &format!("{name}.fc1"), x)?;
    let h = g.relu(h)?;
    linear(g, store, &format!("{name}.fc2"), h)
}

pub fn init_mlp2(
    store: &mut ParamStore,
    name: &str,
    inp: usize,
    hidden: usize,
    out: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    init_linear(store, &format!("{name}.fc1"), inp, hidden, rng)?;
    init_linear(store, &format!("{name}.fc2"), hidden, out, rng)
}
