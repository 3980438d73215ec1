//! Tape operations. Each op computes its value eagerly and records a backward
//! closure capturing `Rc` clones of whatever it needs.

use std::rc::Rc;

use ndarray::{Array2, Array3, ArrayD, Axis, Ix2, Ix3, Ix4};

use crate::kernels;
use crate::tape::{Tape, Var};
use crate::Elem;

fn unary<F: Elem>(
    tape: &Tape<F>,
    a: Var,
    value: ArrayD<F>,
    back: impl Fn(&ArrayD<F>) -> ArrayD<F> + 'static,
) -> Var {
    let needs = tape.needs_grad(a);
    let bf = needs.then(|| {
        Box::new(move |g: &ArrayD<F>| vec![(a, back(g))]) as crate::tape::BackFn<F>
    });
    tape.push(value, needs, bf)
}

impl<F: Elem> Tape<F> {
    pub fn add(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let out = &*va + &*vb;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let bf = needs.then(|| {
            Box::new(move |g: &ArrayD<F>| vec![(a, g.clone()), (b, g.clone())])
                as crate::tape::BackFn<F>
        });
        self.push(out, needs, bf)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let out = &*va - &*vb;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let bf = needs.then(|| {
            Box::new(move |g: &ArrayD<F>| vec![(a, g.clone()), (b, g.mapv(|v| -v))])
                as crate::tape::BackFn<F>
        });
        self.push(out, needs, bf)
    }

    /// Elementwise product (same shape).
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let out = &*va * &*vb;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let (ca, cb) = (Rc::clone(&va), Rc::clone(&vb));
        let bf = needs.then(|| {
            Box::new(move |g: &ArrayD<F>| vec![(a, g * &*cb), (b, g * &*ca)])
                as crate::tape::BackFn<F>
        });
        self.push(out, needs, bf)
    }

    pub fn mul_scalar(&self, a: Var, s: F) -> Var {
        let va = self.value(a);
        unary(self, a, va.mapv(|v| v * s), move |g| g.mapv(|v| v * s))
    }

    pub fn relu(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(|v| if v > F::zero() { v } else { F::zero() });
        let keep = Rc::clone(&va);
        unary(self, a, out, move |g| {
            let mut dg = g.clone();
            dg.zip_mut_with(&keep, |d, &x| {
                if x <= F::zero() {
                    *d = F::zero();
                }
            });
            dg
        })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(|v| F::one() / (F::one() + (-v).exp()));
        let s = out.clone();
        unary(self, a, out, move |g| {
            let mut dg = g.clone();
            dg.zip_mut_with(&s, |d, &y| *d = *d * y * (F::one() - y));
            dg
        })
    }

    /// 2-D convolution on NCHW input, weight (Cout,Cin,kh,kw), bias (Cout).
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let vb = self.value(b);
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("conv2d input NCHW");
        let w4 = vw.view().into_dimensionality::<Ix4>().expect("conv2d weight 4d");
        let b1 = vb
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("conv2d bias 1d")
            .to_owned();
        let out = kernels::conv2d_fwd(x4, w4, &b1, stride, pad);
        let needs = self.needs_grad(x) || self.needs_grad(w) || self.needs_grad(b);
        let (cx, cw) = (Rc::clone(&vx), Rc::clone(&vw));
        let bf = needs.then(|| {
            Box::new(move |g: &ArrayD<F>| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let x4 = cx.view().into_dimensionality::<Ix4>().unwrap();
                let w4 = cw.view().into_dimensionality::<Ix4>().unwrap();
                let (dx, dw, db) = kernels::conv2d_bwd(x4, w4, g4, stride, pad);
                vec![
                    (x, dx.into_dyn()),
                    (w, dw.into_dyn()),
                    (b, db.into_dyn()),
                ]
            }) as crate::tape::BackFn<F>
        });
        self.push(out.into_dyn(), needs, bf)
    }

    /// Transposed convolution 2x2 stride 2, weight (Cin,Cout,2,2).
    pub fn conv_transpose2x2(&self, x: Var, w: Var, b: Var) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let vb = self.value(b);
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("convT input NCHW");
        let w4 = vw.view().into_dimensionality::<Ix4>().expect("convT weight 4d");
        let b1 = vb
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("convT bias 1d")
            .to_owned();
        let out = kernels::convt2x2_fwd(x4, w4, &b1);
        let needs = self.needs_grad(x) || self.needs_grad(w) || self.needs_grad(b);
        let (cx, cw) = (Rc::clone(&vx), Rc::clone(&vw));
        let bf = needs.then(|| {
            Box::new(move |g: &ArrayD<F>| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let x4 = cx.view().into_dimensionality::<Ix4>().unwrap();
                let w4 = cw.view().into_dimensionality::<Ix4>().unwrap();
                let (dx, dw, db) = kernels::convt2x2_bwd(x4, w4, g4);
                vec![
                    (x, dx.into_dyn()),
                    (w, dw.into_dyn()),
                    (b, db.into_dyn()),
                ]
            }) as crate::tape::BackFn<F>
        });
        self.push(out.into_dyn(), needs, bf)
    }

    /// Fully connected: x (N,in) × w (out,in) + b -> (N,out).
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let vb = self.value(b);
        let x2 = vx.view().into_dimensionality::<Ix2>().expect("linear input 2d");
        let w2 = vw.view().into_dimensionality::<Ix2>().expect("linear weight 2d");
        let mut out = x2.dot(&w2.t());
        for mut row in out.rows_mut() {
            for (o, bv) in row.iter_mut().zip(vb.iter()) {
                *o += *bv;
            }
        }
        let needs = self.needs_grad(x) || self.needs_grad(w) || self.needs_grad(b);
        let (cx, cw) = (Rc::clone(&vx), Rc::clone(&vw));
        let bf = needs.then(|| {
            Box::new(move |g: &ArrayD<F>| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let x2 = cx.view().into_dimensionality::<Ix2>().unwrap();
                let w2 = cw.view().into_dimensionality::<Ix2>().unwrap();
                let dx = g2.dot(&w2);
                let dw = g2.t().dot(&x2);
                let db = g2.sum_axis(Axis(0));
                vec![
                    (x, dx.into_dyn()),
                    (w, dw.into_dyn()),
                    (b, db.into_dyn()),
                ]
            }) as crate::tape::BackFn<F>
        });
        self.push(out.into_dyn(), needs, bf)
    }

    /// Row gather from an embedding table (V,d) -> (N,d).
    pub fn embedding(&self, table: Var, indices: &[usize]) -> Var {
        let vt = self.value(table);
        let t2 = vt.view().into_dimensionality::<Ix2>().expect("embedding table 2d");
        let (v, d) = t2.dim();
        let mut out = Array2::<F>::zeros((indices.len(), d));
        for (row, &ix) in indices.iter().enumerate() {
            assert!(ix < v, "embedding index {ix} out of range {v}");
            out.row_mut(row).assign(&t2.row(ix));
        }
        let needs = self.needs_grad(table);
        let idx: Vec<usize> = indices.to_vec();
        let bf = needs.then(|| {
            Box::new(move |g: &ArrayD<F>| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dt = Array2::<F>::zeros((v, d));
                for (row, &ix) in idx.iter().enumerate() {
                    let mut target = dt.row_mut(ix);
                    target += &g2.row(row);
                }
                vec![(table, dt.into_dyn())]
            }) as crate::tape::BackFn<F>
        });
        self.push(out.into_dyn(), needs, bf)
    }

    /// (N,C,H,W) -> (N, H*W, C) node matrix for attention.
    pub fn to_nodes(&self, x: Var) -> Var {
        let vx = self.value(x);
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("to_nodes NCHW");
        let (n, c, h, w) = x4.dim();
        let mut out = Array3::<F>::zeros((n, h * w, c));
        for ni in 0..n {
            for ci in 0..c {
                for yi in 0..h {
                    for xi in 0..w {
                        out[[ni, yi * w + xi, ci]] = x4[[ni, ci, yi, xi]];
                    }
                }
            }
        }
        unary(self, x, out.into_dyn(), move |g| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let mut dx = ndarray::Array4::<F>::zeros((n, c, h, w));
            for ni in 0..n {
                for ci in 0..c {
                    for yi in 0..h {
                        for xi in 0..w {
                            dx[[ni, ci, yi, xi]] = g3[[ni, yi * w + xi, ci]];
                        }
                    }
                }
            }
            dx.into_dyn()
        })
    }

    /// (N, H*W, C) -> (N,C,H,W).
    pub fn from_nodes(&self, x: Var, h: usize, w: usize) -> Var {
        let vx = self.value(x);
        let x3 = vx.view().into_dimensionality::<Ix3>().expect("from_nodes 3d");
        let (n, hw, c) = x3.dim();
        assert_eq!(hw, h * w, "from_nodes size mismatch");
        let mut out = ndarray::Array4::<F>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                for yi in 0..h {
                    for xi in 0..w {
                        out[[ni, ci, yi, xi]] = x3[[ni, yi * w + xi, ci]];
                    }
                }
            }
        }
        unary(self, x, out.into_dyn(), move |g| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let mut dx = Array3::<F>::zeros((n, h * w, c));
            for ni in 0..n {
                for ci in 0..c {
                    for yi in 0..h {
                        for xi in 0..w {
                            dx[[ni, yi * w + xi, ci]] = g4[[ni, ci, yi, xi]];
                        }
                    }
                }
            }
            dx.into_dyn()
        })
    }

    /// Batched matrix × shared weight: (N,r,k) × (k,c) -> (N,r,c).
    pub fn matmul_shared(&self, x: Var, w: Var) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let x3 = vx.view().into_dimensionality::<Ix3>().expect("matmul_shared lhs 3d");
        let w2 = vw.view().into_dimensionality::<Ix2>().expect("matmul_shared rhs 2d");
        let (n, r, _k) = x3.dim();
        let c = w2.dim().1;
        let mut out = Array3::<F>::zeros((n, r, c));
        for ni in 0..n {
            out.index_axis_mut(Axis(0), ni)
                .assign(&x3.index_axis(Axis(0), ni).dot(&w2));
        }
        let needs = self.needs_grad(x) || self.needs_grad(w);
        let (cx, cw) = (Rc::clone(&vx), Rc::clone(&vw));
        let bf = needs.then(|| {
            Box::new(move |g: &ArrayD<F>| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let x3 = cx.view().into_dimensionality::<Ix3>().unwrap();
                let w2 = cw.view().into_dimensionality::<Ix2>().unwrap();
                let (n, r, k) = x3.dim();
                let c = w2.dim().1;
                let mut dx = Array3::<F>::zeros((n, r, k));
                let mut dw = Array2::<F>::zeros((k, c));
                for ni in 0..n {
                    let gn = g3.index_axis(Axis(0), ni);
                    let xn = x3.index_axis(Axis(0), ni);
                    dx.index_axis_mut(Axis(0), ni).assign(&gn.dot(&w2.t()));
                    dw += &xn.t().dot(&gn);
                }
                vec![(x, dx.into_dyn()), (w, dw.into_dyn())]
            }) as crate::tape::BackFn<F>
        });
        self.push(out.into_dyn(), needs, bf)
    }

    /// Batched matmul: (N,r,k) × (N,k,c) -> (N,r,c).
    pub fn bmatmul(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let a3 = va.view().into_dimensionality::<Ix3>().expect("bmatmul lhs 3d");
        let b3 = vb.view().into_dimensionality::<Ix3>().expect("bmatmul rhs 3d");
        let (n, r, _) = a3.dim();
        let c = b3.dim().2;
        let mut out = Array3::<F>::zeros((n, r, c));
        for ni in 0..n {
            out.index_axis_mut(Axis(0), ni)
                .assign(&a3.index_axis(Axis(0), ni).dot(&b3.index_axis(Axis(0), ni)));
        }
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let (ca, cb) = (Rc::clone(&va), Rc::clone(&vb));
        let bf = needs.then(|| {
            Box::new(move |g: &ArrayD<F>| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let a3 = ca.view().into_dimensionality::<Ix3>().unwrap();
                let b3 = cb.view().into_dimensionality::<Ix3>().unwrap();
                let (n, r, k) = a3.dim();
                let c = b3.dim().2;
                let mut da = Array3::<F>::zeros((n, r, k));
                let mut db = Array3::<F>::zeros((n, k, c));
                for ni in 0..n {
                    let gn = g3.index_axis(Axis(0), ni);
                    let an = a3.index_axis(Axis(0), ni);
                    let bn = b3.index_axis(Axis(0), ni);
                    da.index_axis_mut(Axis(0), ni)
                        .assign(&gn.dot(&bn.t().to_owned()));
                    db.index_axis_mut(Axis(0), ni)
                        .assign(&an.t().to_owned().dot(&gn));
                }
                vec![(a, da.into_dyn()), (b, db.into_dyn())]
            }) as crate::tape::BackFn<F>
        });
        self.push(out.into_dyn(), needs, bf)
    }

    /// Batched transpose (N,r,c) -> (N,c,r).
    pub fn btranspose(&self, a: Var) -> Var {
        let va = self.value(a);
        let a3 = va.view().into_dimensionality::<Ix3>().expect("btranspose 3d");
        let (n, r, c) = a3.dim();
        let mut out = Array3::<F>::zeros((n, c, r));
        for ni in 0..n {
            out.index_axis_mut(Axis(0), ni)
                .assign(&a3.index_axis(Axis(0), ni).t());
        }
        unary(self, a, out.into_dyn(), move |g| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let mut da = Array3::<F>::zeros((n, r, c));
            for ni in 0..n {
                da.index_axis_mut(Axis(0), ni)
                    .assign(&g3.index_axis(Axis(0), ni).t());
            }
            da.into_dyn()
        })
    }

    /// Softmax over the last axis of a (N,r,c) tensor.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        let a3 = va.view().into_dimensionality::<Ix3>().expect("softmax_rows 3d");
        let (n, r, c) = a3.dim();
        let mut out = Array3::<F>::zeros((n, r, c));
        for ni in 0..n {
            for ri in 0..r {
                let row = a3.slice(ndarray::s![ni, ri, ..]);
                let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
                let mut sum = F::zero();
                for ci in 0..c {
                    let e = (row[ci] - m).exp();
                    out[[ni, ri, ci]] = e;
                    sum += e;
                }
                for ci in 0..c {
                    out[[ni, ri, ci]] /= sum;
                }
            }
        }
        let y = out.clone();
        unary(self, a, out.into_dyn(), move |g| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let mut da = Array3::<F>::zeros((n, r, c));
            for ni in 0..n {
                for ri in 0..r {
                    let mut dot = F::zero();
                    for ci in 0..c {
                        dot += g3[[ni, ri, ci]] * y[[ni, ri, ci]];
                    }
                    for ci in 0..c {
                        da[[ni, ri, ci]] = y[[ni, ri, ci]] * (g3[[ni, ri, ci]] - dot);
                    }
                }
            }
            da.into_dyn()
        })
    }

    /// Stack K (N,d) tensors into (N,K,d).
    pub fn stack_tokens(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let first = vals[0].view().into_dimensionality::<Ix2>().expect("token 2d");
        let (n, d) = first.dim();
        let k = parts.len();
        let mut out = Array3::<F>::zeros((n, k, d));
        for (ki, v) in vals.iter().enumerate() {
            let v2 = v.view().into_dimensionality::<Ix2>().unwrap();
            assert_eq!(v2.dim(), (n, d), "token shape mismatch");
            out.slice_mut(ndarray::s![.., ki, ..]).assign(&v2);
        }
        let needs = parts.iter().any(|&p| self.needs_grad(p));
        let parts_owned: Vec<Var> = parts.to_vec();
        let bf = needs.then(|| {
            Box::new(move |g: &ArrayD<F>| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                parts_owned
                    .iter()
                    .enumerate()
                    .map(|(ki, &p)| (p, g3.slice(ndarray::s![.., ki, ..]).to_owned().into_dyn()))
                    .collect()
            }) as crate::tape::BackFn<F>
        });
        self.push(out.into_dyn(), needs, bf)
    }

    /// Channel concat of two NCHW tensors.
    pub fn concat_channels(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let a4 = va.view().into_dimensionality::<Ix4>().expect("concat NCHW");
        let b4 = vb.view().into_dimensionality::<Ix4>().expect("concat NCHW");
        let (n, ca, h, w) = a4.dim();
        let cb = b4.dim().1;
        let out = ndarray::concatenate(Axis(1), &[a4.view(), b4.view()]).expect("concat");
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let bf = needs.then(|| {
            Box::new(move |g: &ArrayD<F>| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let da = g4.slice(ndarray::s![.., ..ca, .., ..]).to_owned();
                let db = g4.slice(ndarray::s![.., ca.., .., ..]).to_owned();
                debug_assert_eq!(da.dim(), (n, ca, h, w));
                debug_assert_eq!(db.dim().1, cb);
                vec![(a, da.into_dyn()), (b, db.into_dyn())]
            }) as crate::tape::BackFn<F>
        });
        self.push(out.into_dyn(), needs, bf)
    }

    /// Add a per-sample channel vector (N,C) to every spatial site of (N,C,H,W).
    pub fn add_channel_bias(&self, x: Var, bias: Var) -> Var {
        let vx = self.value(x);
        let vb = self.value(bias);
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("bias NCHW");
        let b2 = vb.view().into_dimensionality::<Ix2>().expect("bias (N,C)");
        let (n, c, h, w) = x4.dim();
        assert_eq!(b2.dim(), (n, c), "channel bias shape");
        let mut out = x4.to_owned();
        for ni in 0..n {
            for ci in 0..c {
                let bv = b2[[ni, ci]];
                out.slice_mut(ndarray::s![ni, ci, .., ..]).mapv_inplace(|v| v + bv);
            }
        }
        let needs = self.needs_grad(x) || self.needs_grad(bias);
        let bf = needs.then(|| {
            Box::new(move |g: &ArrayD<F>| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut db = Array2::<F>::zeros((n, c));
                for ni in 0..n {
                    for ci in 0..c {
                        db[[ni, ci]] = g4.slice(ndarray::s![ni, ci, .., ..]).sum();
                    }
                }
                debug_assert_eq!(g4.dim(), (n, c, h, w));
                vec![(x, g.clone()), (bias, db.into_dyn())]
            }) as crate::tape::BackFn<F>
        });
        self.push(out.into_dyn(), needs, bf)
    }

    /// Broadcast a single-channel map over channels: (N,C,H,W) ⊙ (N,1,H,W).
    pub fn mul_spatial(&self, x: Var, m: Var) -> Var {
        let vx = self.value(x);
        let vm = self.value(m);
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("mul_spatial NCHW");
        let m4 = vm.view().into_dimensionality::<Ix4>().expect("mul_spatial map");
        let (n, c, h, w) = x4.dim();
        assert_eq!(m4.dim(), (n, 1, h, w), "mul_spatial map shape");
        let mut out = x4.to_owned();
        for ni in 0..n {
            for ci in 0..c {
                for yi in 0..h {
                    for xi in 0..w {
                        out[[ni, ci, yi, xi]] *= m4[[ni, 0, yi, xi]];
                    }
                }
            }
        }
        let needs = self.needs_grad(x) || self.needs_grad(m);
        let (cx, cm) = (Rc::clone(&vx), Rc::clone(&vm));
        let bf = needs.then(|| {
            Box::new(move |g: &ArrayD<F>| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let x4 = cx.view().into_dimensionality::<Ix4>().unwrap();
                let m4 = cm.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = ndarray::Array4::<F>::zeros((n, c, h, w));
                let mut dm = ndarray::Array4::<F>::zeros((n, 1, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        for yi in 0..h {
                            for xi in 0..w {
                                let gv = g4[[ni, ci, yi, xi]];
                                dx[[ni, ci, yi, xi]] = gv * m4[[ni, 0, yi, xi]];
                                dm[[ni, 0, yi, xi]] += gv * x4[[ni, ci, yi, xi]];
                            }
                        }
                    }
                }
                vec![(x, dx.into_dyn()), (m, dm.into_dyn())]
            }) as crate::tape::BackFn<F>
        });
        self.push(out.into_dyn(), needs, bf)
    }

    /// Spatial mean: (N,C,H,W) -> (N,C).
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let vx = self.value(x);
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("gap NCHW");
        let (n, c, h, w) = x4.dim();
        let denom = F::c((h * w) as f64);
        let mut out = Array2::<F>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                out[[ni, ci]] = x4.slice(ndarray::s![ni, ci, .., ..]).sum() / denom;
            }
        }
        unary(self, x, out.into_dyn(), move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut dx = ndarray::Array4::<F>::zeros((n, c, h, w));
            for ni in 0..n {
                for ci in 0..c {
                    let gv = g2[[ni, ci]] / denom;
                    dx.slice_mut(ndarray::s![ni, ci, .., ..]).fill(gv);
                }
            }
            dx.into_dyn()
        })
    }

    /// Average pooling with square kernel k, stride k.
    pub fn avg_pool(&self, x: Var, k: usize) -> Var {
        let vx = self.value(x);
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("avg_pool NCHW");
        let (n, c, h, w) = x4.dim();
        assert!(h % k == 0 && w % k == 0, "avg_pool size not divisible");
        let (oh, ow) = (h / k, w / k);
        let denom = F::c((k * k) as f64);
        let mut out = ndarray::Array4::<F>::zeros((n, c, oh, ow));
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        out[[ni, ci, oy, ox]] = x4
                            .slice(ndarray::s![ni, ci, oy * k..(oy + 1) * k, ox * k..(ox + 1) * k])
                            .sum()
                            / denom;
                    }
                }
            }
        }
        unary(self, x, out.into_dyn(), move |g| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let mut dx = ndarray::Array4::<F>::zeros((n, c, h, w));
            for ni in 0..n {
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g4[[ni, ci, oy, ox]] / denom;
                            dx.slice_mut(ndarray::s![
                                ni,
                                ci,
                                oy * k..(oy + 1) * k,
                                ox * k..(ox + 1) * k
                            ])
                            .fill(gv);
                        }
                    }
                }
            }
            dx.into_dyn()
        })
    }

    /// Bilinear sample at the outer product of `ys` × `xs` (image coordinates
    /// with pixel centers at integers). Linear in the input.
    pub fn bilinear_sample(&self, x: Var, ys: Vec<f64>, xs: Vec<f64>) -> Var {
        let vx = self.value(x);
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("bilinear NCHW");
        let (_, _, h, w) = x4.dim();
        let out = kernels::bilinear_sample_fwd(x4, &ys, &xs);
        unary(self, x, out.into_dyn(), move |g| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            kernels::bilinear_sample_bwd(g4, (h, w), &ys, &xs).into_dyn()
        })
    }

    /// Bilinear resize of (N,C,H,W) to (oh,ow), half-pixel centers.
    pub fn bilinear_resize(&self, x: Var, oh: usize, ow: usize) -> Var {
        let vx = self.value(x);
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("resize NCHW");
        let (_, _, h, w) = x4.dim();
        let ys = kernels::resize_coords(h, oh);
        let xs = kernels::resize_coords(w, ow);
        self.bilinear_sample(x, ys, xs)
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let shape = va.raw_dim();
        let s = va.sum();
        unary(self, a, ndarray::arr0(s).into_dyn(), move |g| {
            let gv = *g.iter().next().unwrap();
            ArrayD::from_elem(shape.clone(), gv)
        })
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let n = F::c(va.len() as f64);
        let s = self.sum_all(a);
        self.mul_scalar(s, F::one() / n)
    }

    /// Mean binary cross-entropy on logits against a constant target grid.
    /// Numerically stable form; gradient is (σ(z) − y)/numel.
    pub fn bce_with_logits_mean(&self, logits: Var, targets: &ArrayD<F>) -> Var {
        let vz = self.value(logits);
        assert_eq!(vz.shape(), targets.shape(), "bce target shape mismatch");
        let n = F::c(vz.len() as f64);
        let mut acc = F::zero();
        for (&z, &y) in vz.iter().zip(targets.iter()) {
            let pos = if z > F::zero() { z } else { F::zero() };
            acc += pos - z * y + (F::one() + (-z.abs()).exp()).ln();
        }
        let loss = acc / n;
        let cz = Rc::clone(&vz);
        let ty = targets.clone();
        unary(self, logits, ndarray::arr0(loss).into_dyn(), move |g| {
            let gv = *g.iter().next().unwrap();
            let mut dz = (*cz).clone();
            dz.zip_mut_with(&ty, |z, &y| {
                let s = F::one() / (F::one() + (-*z).exp());
                *z = (s - y) / n * gv;
            });
            dz
        })
    }

    /// Mean categorical cross-entropy of (N,K) logits against integer labels.
    pub fn softmax_ce_mean(&self, logits: Var, labels: &[usize]) -> Var {
        let vz = self.value(logits);
        let z2 = vz.view().into_dimensionality::<Ix2>().expect("ce logits 2d");
        let (n, k) = z2.dim();
        assert_eq!(n, labels.len(), "ce label count");
        let mut acc = F::zero();
        let mut soft = Array2::<F>::zeros((n, k));
        for ni in 0..n {
            let row = z2.row(ni);
            let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for ci in 0..k {
                let e = (row[ci] - m).exp();
                soft[[ni, ci]] = e;
                sum += e;
            }
            for ci in 0..k {
                soft[[ni, ci]] /= sum;
            }
            acc += sum.ln() + m - row[labels[ni]];
        }
        let denom = F::c(n as f64);
        let loss = acc / denom;
        let labels_owned: Vec<usize> = labels.to_vec();
        unary(self, logits, ndarray::arr0(loss).into_dyn(), move |g| {
            let gv = *g.iter().next().unwrap();
            let mut dz = soft.clone();
            for (ni, &lab) in labels_owned.iter().enumerate() {
                dz[[ni, lab]] -= F::one();
            }
            dz.mapv_inplace(|v| v / denom * gv);
            dz.into_dyn()
        })
    }

    /// (N,C,H,W) -> (N, C·H·W).
    pub fn flatten_spatial(&self, x: Var) -> Var {
        let vx = self.value(x);
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("flatten NCHW");
        let (n, c, h, w) = x4.dim();
        let out = x4
            .to_owned()
            .into_shape_with_order((n, c * h * w))
            .expect("flatten reshape");
        unary(self, x, out.into_dyn(), move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            g2.to_owned()
                .into_shape_with_order((n, c, h, w))
                .expect("unflatten reshape")
                .into_dyn()
        })
    }

    /// Mean squared error against a constant target.
    pub fn mse_mean(&self, pred: Var, target: &ArrayD<F>) -> Var {
        let vp = self.value(pred);
        assert_eq!(vp.shape(), target.shape(), "mse target shape mismatch");
        let n = F::c(vp.len() as f64);
        let mut acc = F::zero();
        for (&p, &t) in vp.iter().zip(target.iter()) {
            let d = p - t;
            acc += d * d;
        }
        let loss = acc / n;
        let cp = Rc::clone(&vp);
        let ct = target.clone();
        unary(self, pred, ndarray::arr0(loss).into_dyn(), move |g| {
            let gv = *g.iter().next().unwrap();
            let two = F::c(2.0);
            let mut dp = (*cp).clone();
            dp.zip_mut_with(&ct, |p, &t| *p = two * (*p - t) / n * gv);
            dp
        })
    }
}
