//! Occlusion-aware visible segmentation: two branches (occluding, visible)
//! with a non-local GCN block each, occluding-feature fusion into the visible
//! branch, and a category classifier on pooled visible features.

use rand_chacha::ChaCha8Rng;

use aisdiff_nn::{Conv2d, ConvTranspose2x2, Elem, Linear, Module, Param, Tape, Var};

/// Single-head non-local block over the H·W spatial positions:
/// X' = X + W_out·(A·g(X)), A = row-softmax(θ(X)·φ(X)ᵀ/√d), d = C/2.
pub struct GcnBlock<F: Elem> {
    pub theta: Conv2d<F>,
    pub phi: Conv2d<F>,
    pub g: Conv2d<F>,
    pub w_out: Conv2d<F>,
    d: usize,
}

impl<F: Elem> GcnBlock<F> {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let d = (channels / 2).max(1);
        GcnBlock {
            theta: Conv2d::new(channels, d, 1, 1, 0, rng),
            phi: Conv2d::new(channels, d, 1, 1, 0, rng),
            g: Conv2d::new(channels, d, 1, 1, 0, rng),
            w_out: Conv2d::new(d, channels, 1, 1, 0, rng),
            d,
        }
    }

    /// Returns (output, row-stochastic adjacency) for inspection.
    pub fn forward_with_adjacency(&self, t: &Tape<F>, x: Var) -> (Var, Var) {
        let shape = t.value(x).shape().to_vec();
        let (h, w) = (shape[2], shape[3]);
        let q = t.to_nodes(self.theta.forward(t, x));
        let k = t.to_nodes(self.phi.forward(t, x));
        let gx = t.to_nodes(self.g.forward(t, x));
        let scale = F::c(1.0 / (self.d as f64).sqrt());
        let scores = t.mul_scalar(t.bmatmul(q, t.btranspose(k)), scale);
        let adjacency = t.softmax_rows(scores);
        let mixed = t.from_nodes(t.bmatmul(adjacency, gx), h, w);
        let out = t.add(x, self.w_out.forward(t, mixed));
        (out, adjacency)
    }

    pub fn forward(&self, t: &Tape<F>, x: Var) -> Var {
        self.forward_with_adjacency(t, x).0
    }
}

impl<F: Elem> Module<F> for GcnBlock<F> {
    fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.theta.visit(&format!("{p}.theta"), f);
        self.phi.visit(&format!("{p}.phi"), f);
        self.g.visit(&format!("{p}.g"), f);
        self.w_out.visit(&format!("{p}.w_out"), f);
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.theta.visit_mut(&format!("{p}.theta"), f);
        self.phi.visit_mut(&format!("{p}.phi"), f);
        self.g.visit_mut(&format!("{p}.g"), f);
        self.w_out.visit_mut(&format!("{p}.w_out"), f);
    }
}

/// Feature extraction (conv3×3 → GCN → conv3×3) plus mask prediction
/// (transposed conv 2×2 stride 2 → conv1×1).
pub struct Branch<F: Elem> {
    pub feat1: Conv2d<F>,
    pub gcn: GcnBlock<F>,
    pub feat2: Conv2d<F>,
    pub deconv: ConvTranspose2x2<F>,
    pub pred: Conv2d<F>,
}

pub struct BranchOutput {
    /// (1, 1, 2H, 2W) mask logits.
    pub mask_logits: Var,
    /// (1, C, H, W) extracted feature, input to the mask predictor.
    pub branch_feature: Var,
}

impl<F: Elem> Branch<F> {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Branch {
            feat1: Conv2d::new(channels, channels, 3, 1, 1, rng),
            gcn: GcnBlock::new(channels, rng),
            feat2: Conv2d::new(channels, channels, 3, 1, 1, rng),
            deconv: ConvTranspose2x2::new(channels, channels / 2, rng),
            pred: Conv2d::new(channels / 2, 1, 1, 1, 0, rng),
        }
    }

    pub fn forward(&self, t: &Tape<F>, x: Var) -> BranchOutput {
        let f = t.relu(self.feat1.forward(t, x));
        let f = self.gcn.forward(t, f);
        let f = t.relu(self.feat2.forward(t, f));
        let up = t.relu(self.deconv.forward(t, f));
        let mask_logits = self.pred.forward(t, up);
        BranchOutput {
            mask_logits,
            branch_feature: f,
        }
    }
}

impl<F: Elem> Module<F> for Branch<F> {
    fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.feat1.visit(&format!("{p}.feat1"), f);
        self.gcn.visit(&format!("{p}.gcn"), f);
        self.feat2.visit(&format!("{p}.feat2"), f);
        self.deconv.visit(&format!("{p}.deconv"), f);
        self.pred.visit(&format!("{p}.pred"), f);
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.feat1.visit_mut(&format!("{p}.feat1"), f);
        self.gcn.visit_mut(&format!("{p}.gcn"), f);
        self.feat2.visit_mut(&format!("{p}.feat2"), f);
        self.deconv.visit_mut(&format!("{p}.deconv"), f);
        self.pred.visit_mut(&format!("{p}.pred"), f);
    }
}

/// The full head: occluding branch on F, visible branch on F + P(occluding
/// feature), classifier on globally pooled visible features.
pub struct VisOccHead<F: Elem> {
    pub occluding: Branch<F>,
    pub visible: Branch<F>,
    /// 1×1 fusion projection P; zeroing it decouples the branches.
    pub fuse: Conv2d<F>,
    pub classifier: Linear<F>,
}

pub struct VisOccPrediction {
    pub visible_logits: Var,
    pub occluding_logits: Var,
    /// (1, num_categories).
    pub class_logits: Var,
    pub visible_feature: Var,
    pub occluding_feature: Var,
}

impl<F: Elem> VisOccHead<F> {
    pub fn new(channels: usize, num_categories: usize, rng: &mut ChaCha8Rng) -> Self {
        VisOccHead {
            occluding: Branch::new(channels, rng),
            visible: Branch::new(channels, rng),
            fuse: Conv2d::new(channels, channels, 1, 1, 0, rng),
            classifier: Linear::new(channels, num_categories, rng),
        }
    }

    pub fn forward(&self, t: &Tape<F>, roi_feature: Var) -> VisOccPrediction {
        let occ = self.occluding.forward(t, roi_feature);
        let fused = t.add(roi_feature, self.fuse.forward(t, occ.branch_feature));
        let vis = self.visible.forward(t, fused);
        let pooled = t.global_avg_pool(vis.branch_feature);
        let class_logits = self.classifier.forward(t, pooled);
        VisOccPrediction {
            visible_logits: vis.mask_logits,
            occluding_logits: occ.mask_logits,
            class_logits,
            visible_feature: vis.branch_feature,
            occluding_feature: occ.branch_feature,
        }
    }
}

impl<F: Elem> Module<F> for VisOccHead<F> {
    fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.occluding.visit(&format!("{p}occluding"), f);
        self.visible.visit(&format!("{p}visible"), f);
        self.fuse.visit(&format!("{p}fuse"), f);
        self.classifier.visit(&format!("{p}classifier"), f);
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.occluding.visit_mut(&format!("{p}occluding"), f);
        self.visible.visit_mut(&format!("{p}visible"), f);
        self.fuse.visit_mut(&format!("{p}fuse"), f);
        self.classifier.visit_mut(&format!("{p}classifier"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array4};
    use rand::{Rng, SeedableRng};

    fn rand_input(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn gcn_zero_output_projection_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut gcn = GcnBlock::<f64>::new(8, &mut rng);
        gcn.w_out.weight.array_mut().fill(0.0);
        gcn.w_out.bias.array_mut().fill(0.0);
        let x = rand_input((1, 8, 5, 5), 1);
        let t = Tape::new();
        let xv = t.constant(x.clone().into_dyn());
        let y = gcn.forward(&t, xv);
        assert_eq!(&*t.value(y), &x.clone().into_dyn());
    }

    #[test]
    fn gcn_adjacency_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gcn = GcnBlock::<f64>::new(6, &mut rng);
        let x = rand_input((1, 6, 4, 3), 3);
        let t = Tape::new();
        let xv = t.constant(x.into_dyn());
        let (_, adj) = gcn.forward_with_adjacency(&t, xv);
        let a = t.value(adj);
        let a3 = a.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        for r in 0..12 {
            let sum: f64 = a3.slice(ndarray::s![0, r, ..]).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gcn_two_node_graph_matches_hand_oracle() {
        // 1 channel, 2x1 grid: d = max(1/2,1) = 1, all projections scalars.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut gcn = GcnBlock::<f64>::new(1, &mut rng);
        let (th, ph, gg, wo) = (0.7, -0.4, 1.3, 0.9);
        gcn.theta.weight.array_mut().fill(th);
        gcn.theta.bias.array_mut().fill(0.0);
        gcn.phi.weight.array_mut().fill(ph);
        gcn.phi.bias.array_mut().fill(0.0);
        gcn.g.weight.array_mut().fill(gg);
        gcn.g.bias.array_mut().fill(0.0);
        gcn.w_out.weight.array_mut().fill(wo);
        gcn.w_out.bias.array_mut().fill(0.0);

        let (x0, x1) = (0.8, -0.5);
        let x = Array4::from_shape_vec((1, 1, 2, 1), vec![x0, x1]).unwrap();
        let t = Tape::new();
        let xv = t.constant(x.into_dyn());
        let y = gcn.forward(&t, xv);
        let yv = t.value(y);

        // Hand-computed N=2 non-local block (d=1, so the scale is 1).
        let q = [th * x0, th * x1];
        let k = [ph * x0, ph * x1];
        let row = |qi: f64| {
            let (s0, s1) = ((qi * k[0]).exp(), (qi * k[1]).exp());
            let z = s0 + s1;
            (s0 / z, s1 / z)
        };
        let (a00, a01) = row(q[0]);
        let (a10, a11) = row(q[1]);
        let gv = [gg * x0, gg * x1];
        let expect0 = x0 + wo * (a00 * gv[0] + a01 * gv[1]);
        let expect1 = x1 + wo * (a10 * gv[0] + a11 * gv[1]);
        assert!((yv[[0usize, 0, 0, 0].as_ref()] - expect0).abs() < 1e-12);
        assert!((yv[[0usize, 0, 1, 0].as_ref()] - expect1).abs() < 1e-12);
    }

    #[test]
    fn branch_shape_contract_and_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut branch = Branch::<f64>::new(64, &mut rng);
        let x = rand_input((1, 64, 14, 14), 6);
        let t = Tape::new();
        let xv = t.constant(x.into_dyn());
        let out = branch.forward(&t, xv);
        assert_eq!(t.value(out.mask_logits).shape(), &[1, 1, 28, 28]);
        assert_eq!(t.value(out.branch_feature).shape(), &[1, 64, 14, 14]);

        aisdiff_nn::zero_params(&mut branch);
        let t = Tape::new();
        let xv = t.constant(rand_input((1, 64, 14, 14), 7).into_dyn());
        let out = branch.forward(&t, xv);
        assert!(t.value(out.mask_logits).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn branch_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut branch = Branch::<f64>::new(8, &mut rng);
        let x = rand_input((1, 8, 6, 6), 9);
        let report = aisdiff_nn::central_diff_check(
            &mut branch,
            |m| {
                let t = Tape::new();
                let xv = t.constant(x.clone().into_dyn());
                let out = m.forward(&t, xv);
                let loss = t.sum_all(out.mask_logits);
                let lv = *t.value(loss).iter().next().unwrap();
                (lv, t.backward(loss))
            },
            25,
            1e-4,
            10,
        );
        assert!(report.passes(1e-3), "worst: {:?}", report.worst);
    }

    #[test]
    fn class_logits_length_equals_category_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let head = VisOccHead::<f64>::new(16, 5, &mut rng);
        let t = Tape::new();
        let xv = t.constant(rand_input((1, 16, 7, 7), 12).into_dyn());
        let pred = head.forward(&t, xv);
        assert_eq!(t.value(pred.class_logits).shape(), &[1, 5]);
    }

    #[test]
    fn zeroed_fusion_decouples_the_visible_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut head = VisOccHead::<f64>::new(8, 3, &mut rng);
        head.fuse.weight.array_mut().fill(0.0);
        head.fuse.bias.array_mut().fill(0.0);
        let x = rand_input((1, 8, 5, 5), 14);

        let t = Tape::new();
        let xv = t.constant(x.clone().into_dyn());
        let pred = head.forward(&t, xv);
        let fused_vis = t.value(pred.visible_logits);

        let t2 = Tape::new();
        let xv2 = t2.constant(x.into_dyn());
        let alone = head.visible.forward(&t2, xv2);
        let alone_vis = t2.value(alone.mask_logits);
        assert_eq!(&*fused_vis, &*alone_vis);
    }

    #[test]
    fn occluding_to_class_gradient_flows_and_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut head = VisOccHead::<f64>::new(8, 4, &mut rng);
        let x = rand_input((1, 8, 5, 5), 16);
        // Loss = class_logits[0]; its gradient w.r.t. occluding-branch weights
        // must be nonzero (information flows occluding -> visible -> class).
        let eval = |m: &VisOccHead<f64>| {
            let t = Tape::new();
            let xv = t.constant(x.clone().into_dyn());
            let pred = m.forward(&t, xv);
            let picked = t.mul(
                pred.class_logits,
                t.constant(
                    ndarray::ArrayD::from_shape_vec(
                        ndarray::IxDyn(&[1, 4]),
                        vec![1.0, 0.0, 0.0, 0.0],
                    )
                    .unwrap(),
                ),
            );
            let loss = t.sum_all(picked);
            let lv = *t.value(loss).iter().next().unwrap();
            (lv, t.backward(loss))
        };
        let (_, grads) = eval(&head);
        let g = grads.of_param(&head.occluding.feat1.weight).unwrap();
        assert!(g.iter().any(|&v| v.abs() > 1e-9), "no occluding→class flow");

        let report = aisdiff_nn::central_diff_check(&mut head, eval, 30, 1e-4, 17);
        assert!(report.passes(1e-3), "worst: {:?}", report.worst);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let head = VisOccHead::<f64>::new(8, 3, &mut rng);
        let x = rand_input((1, 8, 5, 5), 20);
        let run = || {
            let t = Tape::new();
            let xv = t.constant(x.clone().into_dyn());
            let pred = head.forward(&t, xv);
            (
                t.value(pred.visible_logits).to_owned(),
                t.value(pred.class_logits).to_owned(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gcn_adjacency_stays_stochastic_under_extreme_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let gcn = GcnBlock::<f64>::new(4, &mut rng);
        let x = Array4::from_shape_fn((1, 4, 3, 3), |(_, c, y, _)| {
            if (c + y) % 2 == 0 { 40.0 } else { -40.0 }
        });
        let t = Tape::new();
        let xv = t.constant(x.into_dyn());
        let (_, adj) = gcn.forward_with_adjacency(&t, xv);
        let a = t.value(adj);
        let a3 = a.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        for r in 0..9 {
            let row = a3.slice(ndarray::s![0, r, ..]);
            let sum: f64 = row.sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let _ = Array2::<f64>::zeros((1, 1));
    }
}
