//! Central-difference gradient checking against the tape's analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::layers::{Module, Param};
use crate::tape::Gradients;
use crate::Elem;

/// Result of one check run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (param name, flat index, analytic, finite-difference) of the worst sample.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }
}

fn perturb<F: Elem, M: Module<F>>(model: &mut M, target: u64, idx: usize, delta: F) {
    model.visit_mut("", &mut |_, p: &mut Param<F>| {
        if p.id == target {
            p.array_mut().as_slice_mut().expect("contiguous param")[idx] += delta;
        }
    });
}

/// Check `n_samples` randomly chosen weight coordinates of `model` with
/// central differences of step `step`. `eval` must rebuild the forward pass
/// and return the scalar loss plus its gradients.
pub fn central_diff_check<F: Elem, M: Module<F>>(
    model: &mut M,
    mut eval: impl FnMut(&M) -> (F, Gradients<F>),
    n_samples: usize,
    step: f64,
    seed: u64,
) -> GradCheckReport {
    let mut coords: Vec<(String, u64, usize)> = Vec::new();
    model.visit("", &mut |name, p| {
        coords.push((name.to_string(), p.id, p.array().len()));
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, grads) = eval(model);

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    let h = F::c(step);
    for _ in 0..n_samples {
        let (name, id, numel) = coords[rng.gen_range(0..coords.len())].clone();
        let idx = rng.gen_range(0..numel);
        let analytic = {
            let mut val = None;
            model.visit("", &mut |_, p| {
                if p.id == id {
                    val = grads
                        .of_param(p)
                        .map(|g| g.as_slice().expect("contiguous grad")[idx].as_f64());
                }
            });
            val.unwrap_or(0.0)
        };
        perturb(model, id, idx, h);
        let (lp, _) = eval(model);
        perturb(model, id, idx, -(h + h));
        let (lm, _) = eval(model);
        perturb(model, id, idx, h);
        let fd = (lp.as_f64() - lm.as_f64()) / (2.0 * step);
        // Both effectively zero (e.g. softmax shift-invariant directions):
        // treat as matching rather than dividing noise by noise.
        let rel = if analytic.abs() < 1e-8 && fd.abs() < 1e-8 {
            0.0
        } else {
            (analytic - fd).abs() / analytic.abs().max(fd.abs())
        };
        report.checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some((name, idx, analytic, fd));
        }
    }
    report
}
