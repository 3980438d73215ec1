//! Engine self-checks: hand oracles for forward kernels and a composite
//! finite-difference sweep that exercises every op's backward path.

use ndarray::{arr0, Array1, Array2, Array4, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use aisdiff_nn::{
    central_diff_check, Conv2d, ConvTranspose2x2, Embedding, Gradients, Linear, Module, Param,
    SgdMomentum, Tape, Var,
};

fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

#[test]
fn conv2d_matches_hand_computation() {
    // 1x1x3x3 input, single 3x3 kernel of ones, pad 1: output center = sum of input.
    let t = Tape::<f64>::new();
    let x = Array4::from_shape_fn((1, 1, 3, 3), |(_, _, i, j)| (i * 3 + j) as f64);
    let xsum: f64 = x.sum();
    let xv = t.constant(x.into_dyn());
    let w = t.constant(Array4::from_elem((1, 1, 3, 3), 1.0).into_dyn());
    let b = t.constant(Array1::zeros(1).into_dyn());
    let y = t.conv2d(xv, w, b, 1, 1);
    let yv = t.value(y);
    assert_eq!(yv.shape(), &[1, 1, 3, 3]);
    assert!((yv[[0usize, 0, 1, 1].as_ref()] - xsum).abs() < 1e-12);
    // Corner sees the 2x2 neighborhood.
    assert!((yv[[0usize, 0, 0, 0].as_ref()] - (0.0 + 1.0 + 3.0 + 4.0)).abs() < 1e-12);
}

#[test]
fn conv_transpose_paints_2x2_blocks() {
    let t = Tape::<f64>::new();
    let x = Array4::from_shape_fn((1, 1, 2, 2), |(_, _, i, j)| 1.0 + (i * 2 + j) as f64);
    let xv = t.constant(x.into_dyn());
    let mut w = Array4::zeros((1, 1, 2, 2));
    w[[0, 0, 0, 0]] = 1.0;
    w[[0, 0, 1, 1]] = 2.0;
    let wv = t.constant(w.into_dyn());
    let b = t.constant(Array1::zeros(1).into_dyn());
    let y = t.conv_transpose2x2(xv, wv, b);
    let yv = t.value(y);
    assert_eq!(yv.shape(), &[1, 1, 4, 4]);
    // Input pixel (0,0)=1 paints out[0,0]=1*1 and out[1,1]=1*2.
    assert_eq!(yv[[0usize, 0, 0, 0].as_ref()], 1.0);
    assert_eq!(yv[[0usize, 0, 1, 1].as_ref()], 2.0);
    assert_eq!(yv[[0usize, 0, 0, 1].as_ref()], 0.0);
    // Input pixel (1,1)=4 paints out[2,2]=4 and out[3,3]=8.
    assert_eq!(yv[[0usize, 0, 2, 2].as_ref()], 4.0);
    assert_eq!(yv[[0usize, 0, 3, 3].as_ref()], 8.0);
}

#[test]
fn softmax_rows_are_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = Tape::<f64>::new();
    let a = t.constant(rand_arr(&[2, 7, 5], &mut rng));
    let s = t.softmax_rows(a);
    let sv = t.value(s);
    let s3 = sv.view().into_dimensionality::<ndarray::Ix3>().unwrap();
    for n in 0..2 {
        for r in 0..7 {
            let sum: f64 = s3.slice(ndarray::s![n, r, ..]).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}

/// A deliberately tangled model touching every op, for the FD sweep.
struct ZooModel {
    conv: Conv2d<f64>,
    convt: ConvTranspose2x2<f64>,
    proj_q: Conv2d<f64>,
    proj_k: Conv2d<f64>,
    proj_v: Conv2d<f64>,
    lin: Linear<f64>,
    emb: Embedding<f64>,
    tok: Linear<f64>,
}

impl Module<f64> for ZooModel {
    fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
        self.conv.visit(&format!("{p}conv"), f);
        self.convt.visit(&format!("{p}convt"), f);
        self.proj_q.visit(&format!("{p}q"), f);
        self.proj_k.visit(&format!("{p}k"), f);
        self.proj_v.visit(&format!("{p}v"), f);
        self.lin.visit(&format!("{p}lin"), f);
        self.emb.visit(&format!("{p}emb"), f);
        self.tok.visit(&format!("{p}tok"), f);
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
        self.conv.visit_mut(&format!("{p}conv"), f);
        self.convt.visit_mut(&format!("{p}convt"), f);
        self.proj_q.visit_mut(&format!("{p}q"), f);
        self.proj_k.visit_mut(&format!("{p}k"), f);
        self.proj_v.visit_mut(&format!("{p}v"), f);
        self.lin.visit_mut(&format!("{p}lin"), f);
        self.emb.visit_mut(&format!("{p}emb"), f);
        self.tok.visit_mut(&format!("{p}tok"), f);
    }
}

fn zoo_forward(m: &ZooModel, input: &ArrayD<f64>, target: &ArrayD<f64>) -> (f64, Gradients<f64>) {
    let t = Tape::<f64>::new();
    let x = t.constant(input.clone());
    let h = m.conv.forward(&t, x); // (1,4,6,6)
    let h = t.sigmoid(h);
    let pooled = t.avg_pool(h, 3); // (1,4,2,2)
    let small = t.bilinear_resize(pooled, 4, 4);
    let cropped = t.bilinear_sample(small, vec![0.25, 1.5, 2.75], vec![0.5, 1.0, 2.5]); // (1,4,3,3)

    // Attention over the 6x6 map with token cross-talk.
    let q = t.to_nodes(m.proj_q.forward(&t, h)); // (1,36,2)
    let k = t.to_nodes(m.proj_k.forward(&t, h));
    let v = t.to_nodes(m.proj_v.forward(&t, h));
    let scores = t.mul_scalar(t.bmatmul(q, t.btranspose(k)), 1.0 / (2.0f64).sqrt());
    let attn = t.softmax_rows(scores);
    let mixed = t.from_nodes(t.bmatmul(attn, v), 6, 6); // (1,2,6,6)

    let up = m.convt.forward(&t, mixed); // (1,3,12,12)
    let up = t.relu(up);
    let gap = t.global_avg_pool(up); // (1,3)

    let tok_emb = m.emb.forward(&t, &[1]); // (1,4)
    let tok = m.tok.forward(&t, tok_emb); // (1,3)
    let stacked = t.stack_tokens(&[gap, tok]); // (1,2,3)
    let logits = m.lin.forward(&t, t.global_avg_pool(t.from_nodes(stacked, 1, 2)));

    let ce = t.softmax_ce_mean(logits, &[2]);
    let bce = t.bce_with_logits_mean(cropped, target);
    let mse = t.mse_mean(t.mean_all(up), &arr0(0.3).into_dyn());
    let gate = t.mul(t.sigmoid(t.mean_all(gap)), mse);
    let loss = t.add(t.add(ce, bce), gate);
    let lv = t.value(loss).iter().next().cloned().unwrap();
    let grads = t.backward(loss);
    (lv, grads)
}

#[test]
fn composite_graph_passes_finite_difference_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut model = ZooModel {
        conv: Conv2d::new(2, 4, 3, 1, 1, &mut rng),
        convt: ConvTranspose2x2::new(2, 3, &mut rng),
        proj_q: Conv2d::new(4, 2, 1, 1, 0, &mut rng),
        proj_k: Conv2d::new(4, 2, 1, 1, 0, &mut rng),
        proj_v: Conv2d::new(4, 2, 1, 1, 0, &mut rng),
        lin: Linear::new(3, 3, &mut rng),
        emb: Embedding::new(3, 4, &mut rng),
        tok: Linear::new(4, 3, &mut rng),
    };
    let input = rand_arr(&[1, 2, 6, 6], &mut rng);
    let target = rand_arr(&[1, 4, 3, 3], &mut rng).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let report = central_diff_check(
        &mut model,
        |m| zoo_forward(m, &input, &target),
        120,
        1e-4,
        7,
    );
    assert!(
        report.passes(1e-5),
        "composite gradcheck failed: {:?}",
        report.worst
    );
}

#[test]
fn input_leaf_receives_gradient() {
    let t = Tape::<f64>::new();
    let x = t.leaf(Array2::from_elem((2, 2), 0.5).into_dyn());
    let y = t.mean_all(t.mul(x, x));
    let grads = t.backward(y);
    let gx = grads.wrt(x).unwrap();
    // d/dx mean(x^2) = 2x/4 = 0.25 at x=0.5
    for &g in gx.iter() {
        assert!((g - 0.25).abs() < 1e-12);
    }
}

#[test]
fn weight_sharing_accumulates_gradient() {
    let t = Tape::<f64>::new();
    let p = Param::new(arr0(2.0).into_dyn());
    let a = t.param(&p);
    let b = t.param(&p); // same node
    assert_eq!(a, b);
    let y = t.mul(a, b); // y = p^2
    let grads = t.backward(t.mean_all(y));
    assert!((grads.of_param(&p).unwrap().iter().next().unwrap() - 4.0).abs() < 1e-12);
}

#[test]
fn sgd_momentum_matches_reference_and_zero_lr_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut lin = Linear::<f64>::new(2, 1, &mut rng);
    let before = lin.weight.array().clone();
    let x = ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![1.0, -2.0]).unwrap();

    let eval = |m: &Linear<f64>| {
        let t = Tape::<f64>::new();
        let xv = t.constant(x.clone());
        let y = m.forward(&t, xv);
        let loss = t.mse_mean(y, &ArrayD::zeros(IxDyn(&[1, 1])));
        let g = t.backward(loss);
        g
    };

    let mut opt0 = SgdMomentum::new(0.0, 0.9);
    let g = eval(&lin);
    opt0.step(&mut lin, &g);
    assert_eq!(lin.weight.array(), &before, "lr=0 must not move weights");

    // Two steps with momentum: v1=g1, w1=w0-lr*g1; v2=0.9*v1+g2, ...
    let mut opt = SgdMomentum::new(0.1, 0.9);
    let g1 = eval(&lin);
    let g1w = g1.of_param(&lin.weight).unwrap().clone();
    opt.step(&mut lin, &g1);
    let w1 = lin.weight.array().clone();
    let expect_w1 = &before - &g1w.mapv(|v| 0.1 * v);
    assert!(w1
        .iter()
        .zip(expect_w1.iter())
        .all(|(a, b)| (a - b).abs() < 1e-12));
    let g2 = eval(&lin);
    let g2w = g2.of_param(&lin.weight).unwrap().clone();
    opt.step(&mut lin, &g2);
    let expect_w2 = &w1 - &(g1w.mapv(|v| 0.9 * v) + &g2w).mapv(|v| 0.1 * v);
    assert!(lin
        .weight
        .array()
        .iter()
        .zip(expect_w2.iter())
        .all(|(a, b)| (a - b).abs() < 1e-12));
}
