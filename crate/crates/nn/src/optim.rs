use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::layers::Module;
use crate::tape::Gradients;
use crate::Elem;

/// Plain SGD with momentum: v ← μ·v + g, w ← w − lr·v.
pub struct SgdMomentum<F: Elem> {
    pub lr: F,
    pub momentum: F,
    velocity: BTreeMap<u64, ArrayD<F>>,
}

impl<F: Elem> SgdMomentum<F> {
    pub fn new(lr: F, momentum: F) -> Self {
        SgdMomentum {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Apply one step to every parameter that received a gradient.
    pub fn step<M: Module<F>>(&mut self, model: &mut M, grads: &Gradients<F>) {
        let lr = self.lr;
        let mu = self.momentum;
        let velocity = &mut self.velocity;
        model.visit_mut("", &mut |_, p| {
            let Some(g) = grads.of_param(p) else { return };
            let v = velocity
                .entry(p.id)
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            v.zip_mut_with(g, |vv, &gv| *vv = *vv * mu + gv);
            let w = p.array_mut();
            w.zip_mut_with(v, |wv, &vv| *wv = *wv - lr * vv);
        });
    }
}
