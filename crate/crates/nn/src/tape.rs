use std::cell::RefCell;
use std::rc::Rc;

use ndarray::ArrayD;

use crate::layers::Param;
use crate::Elem;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

pub(crate) type BackFn<F> = Box<dyn Fn(&ArrayD<F>) -> Vec<(Var, ArrayD<F>)>>;

pub(crate) struct Node<F: Elem> {
    pub value: Rc<ArrayD<F>>,
    pub needs_grad: bool,
    pub backward: Option<BackFn<F>>,
}

/// Computation tape for one forward pass. Rebuilt every step; parameters are
/// bound once per tape so shared weights accumulate gradients.
pub struct Tape<F: Elem> {
    pub(crate) nodes: RefCell<Vec<Node<F>>>,
    bindings: RefCell<Vec<(u64, Var)>>,
    grad_enabled: bool,
}

impl<F: Elem> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Elem> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            bindings: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// Inference tape: parameters bind as constants, no backward closures are
    /// recorded anywhere downstream.
    pub fn no_grad() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            bindings: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub(crate) fn push(&self, value: ArrayD<F>, needs_grad: bool, backward: Option<BackFn<F>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            needs_grad,
            backward,
        });
        Var(nodes.len() - 1)
    }

    /// A value that gradients do not flow into.
    pub fn constant(&self, value: ArrayD<F>) -> Var {
        self.push(value, false, None)
    }

    /// A value gradients are requested for (inputs under test, targets of FD checks).
    pub fn leaf(&self, value: ArrayD<F>) -> Var {
        self.push(value, self.grad_enabled, None)
    }

    /// Bind a parameter. Repeated binds of the same parameter return the same
    /// node, so weight sharing accumulates into one gradient.
    pub fn param(&self, p: &Param<F>) -> Var {
        if let Some(&(_, v)) = self.bindings.borrow().iter().find(|(id, _)| *id == p.id) {
            return v;
        }
        let v = self.push((*p.value).clone(), self.grad_enabled, None);
        self.bindings.borrow_mut().push((p.id, v));
        v
    }

    pub fn value(&self, v: Var) -> Rc<ArrayD<F>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub(crate) fn needs_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.0].value.len(),
            1,
            "backward root must be a scalar, got shape {:?}",
            nodes[root.0].value.shape()
        );
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(nodes[root.0].value.raw_dim(), F::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(back) = &nodes[i].backward {
                for (pv, contrib) in back(&g) {
                    if !nodes[pv.0].needs_grad {
                        continue;
                    }
                    match &mut grads[pv.0] {
                        Some(acc) => *acc += &contrib,
                        slot => *slot = Some(contrib),
                    }
                }
            }
            if nodes[i].needs_grad && nodes[i].backward.is_none() {
                grads[i] = Some(g); // leaf: keep the accumulated gradient
            }
        }
        Gradients {
            grads,
            bindings: self.bindings.borrow().clone(),
        }
    }
}

/// Gradients of one backward pass, addressable by [`Var`] or by parameter.
pub struct Gradients<F: Elem> {
    grads: Vec<Option<ArrayD<F>>>,
    bindings: Vec<(u64, Var)>,
}

impl<F: Elem> Gradients<F> {
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn of_param(&self, p: &Param<F>) -> Option<&ArrayD<F>> {
        self.bindings
            .iter()
            .find(|(id, _)| *id == p.id)
            .and_then(|&(_, v)| self.wrt(v))
    }
}
