use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, Var};
use crate::Elem;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// A learnable tensor. Identity is per-process; names come from [`Module`]
/// traversal and are what checkpoints store.
#[derive(Clone)]
pub struct Param<F: Elem> {
    pub id: u64,
    pub value: Rc<ArrayD<F>>,
}

impl<F: Elem> Param<F> {
    pub fn new(value: ArrayD<F>) -> Self {
        Param {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            value: Rc::new(value),
        }
    }

    pub fn array(&self) -> &ArrayD<F> {
        &self.value
    }

    pub fn array_mut(&mut self) -> &mut ArrayD<F> {
        Rc::make_mut(&mut self.value)
    }

    /// Replace the value, keeping identity (shape must match).
    pub fn assign(&mut self, value: ArrayD<F>) {
        assert_eq!(self.value.shape(), value.shape(), "param shape change");
        self.value = Rc::new(value);
    }
}

/// Named-parameter traversal, used by the optimizer, checkpoints, and
/// gradient checks.
pub trait Module<F: Elem> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>));
}

/// Zero every parameter (tests of the all-zero-weight contracts).
pub fn zero_params<F: Elem, M: Module<F>>(m: &mut M) {
    m.visit_mut("", &mut |_, p| p.array_mut().fill(F::zero()));
}

fn uniform_init<F: Elem>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> ArrayD<F> {
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n)
        .map(|_| F::c(rng.gen_range(-bound..bound)))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("init shape")
}

/// 2-D convolution layer; weight (Cout,Cin,kh,kw), He-uniform init.
pub struct Conv2d<F: Elem> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Elem> Conv2d<F> {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (cin * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        Conv2d {
            weight: Param::new(uniform_init(&[cout, cin, k, k], bound, rng)),
            bias: Param::new(ArrayD::zeros(IxDyn(&[cout]))),
            stride,
            pad,
        }
    }

    pub fn forward(&self, t: &Tape<F>, x: Var) -> Var {
        let w = t.param(&self.weight);
        let b = t.param(&self.bias);
        t.conv2d(x, w, b, self.stride, self.pad)
    }
}

impl<F: Elem> Module<F> for Conv2d<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Transposed 2x2 stride-2 convolution; weight (Cin,Cout,2,2).
pub struct ConvTranspose2x2<F: Elem> {
    pub weight: Param<F>,
    pub bias: Param<F>,
}

impl<F: Elem> ConvTranspose2x2<F> {
    pub fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (cin * 4) as f64).sqrt();
        ConvTranspose2x2 {
            weight: Param::new(uniform_init(&[cin, cout, 2, 2], bound, rng)),
            bias: Param::new(ArrayD::zeros(IxDyn(&[cout]))),
        }
    }

    pub fn forward(&self, t: &Tape<F>, x: Var) -> Var {
        let w = t.param(&self.weight);
        let b = t.param(&self.bias);
        t.conv_transpose2x2(x, w, b)
    }
}

impl<F: Elem> Module<F> for ConvTranspose2x2<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Fully connected layer; weight (out,in).
pub struct Linear<F: Elem> {
    pub weight: Param<F>,
    pub bias: Param<F>,
}

impl<F: Elem> Linear<F> {
    pub fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / input as f64).sqrt();
        Linear {
            weight: Param::new(uniform_init(&[output, input], bound, rng)),
            bias: Param::new(ArrayD::zeros(IxDyn(&[output]))),
        }
    }

    pub fn forward(&self, t: &Tape<F>, x: Var) -> Var {
        let w = t.param(&self.weight);
        let b = t.param(&self.bias);
        t.linear(x, w, b)
    }
}

impl<F: Elem> Module<F> for Linear<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Row-lookup table (V,d).
pub struct Embedding<F: Elem> {
    pub table: Param<F>,
}

impl<F: Elem> Embedding<F> {
    pub fn new(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Embedding {
            table: Param::new(uniform_init(&[rows, dim], 1.0 / (dim as f64).sqrt(), rng)),
        }
    }

    pub fn forward(&self, t: &Tape<F>, indices: &[usize]) -> Var {
        let table = t.param(&self.table);
        t.embedding(table, indices)
    }
}

impl<F: Elem> Module<F> for Embedding<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&format!("{prefix}.table"), &self.table);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&format!("{prefix}.table"), &mut self.table);
    }
}
