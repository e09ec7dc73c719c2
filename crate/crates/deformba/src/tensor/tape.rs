//! Reverse-mode tape.
//!
//! A `Tape` records one primitive application per node: the node's value, its
//! parent node ids, and a closure evaluating the primitive's vector-Jacobian
//! product. `backward` walks the nodes in reverse and accumulates one gradient
//! tensor per node; leaves created with `Tape::leaf` are the usual gradient
//! targets.
//!
//! Values are checked for NaN/Inf when a node is pushed, so a non-finite
//! intermediate fails at the primitive that produced it.

use std::cell::RefCell;
use std::rc::Rc;

use super::{Result, Tensor, TensorError};

/// grad_fn(grad_out, parent_values, own_value) -> one gradient per parent.
pub(crate) type GradFn = Box<dyn Fn(&Tensor, &[Rc<Tensor>], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    grad_fn: Option<GradFn>,
}

#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<Vec<Node>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { inner: Rc::new(RefCell::new(Vec::new())) }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Introduces an input (parameter or data) as a differentiation target.
    pub fn leaf(&self, value: Tensor) -> Var {
        let mut nodes = self.inner.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value: Rc::new(value), parents: Vec::new(), grad_fn: None });
        Var { tape: self.clone(), id }
    }

    /// Introduces a constant; gradients do not flow into it.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value)
    }

    pub(crate) fn push(
        &self,
        op: &'static str,
        value: Tensor,
        parents: &[&Var],
        grad_fn: GradFn,
    ) -> Result<Var> {
        for p in parents {
            if !Rc::ptr_eq(&p.tape.inner, &self.inner) {
                return Err(TensorError::TapeMismatch);
            }
        }
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let mut nodes = self.inner.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            grad_fn: Some(grad_fn),
        });
        Ok(Var { tape: self.clone(), id })
    }

    /// Reverse pass from a scalar root. Returns per-node gradients; read them
    /// through [`Gradients::wrt`]. Errors if any analytic gradient is
    /// non-finite.
    pub fn backward(&self, root: &Var) -> Result<Gradients> {
        if !Rc::ptr_eq(&root.tape.inner, &self.inner) {
            return Err(TensorError::TapeMismatch);
        }
        let nodes = self.inner.borrow();
        if nodes[root.id].value.len() != 1 {
            return Err(TensorError::arg(
                "backward",
                format!("root must be scalar, got shape {:?}", nodes[root.id].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Tensor::new(nodes[root.id].value.shape(), vec![1.0]).unwrap());
        for i in (0..=root.id).rev() {
            let go = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            let node = &nodes[i];
            let Some(gf) = &node.grad_fn else { continue };
            let pvals: Vec<Rc<Tensor>> =
                node.parents.iter().map(|&p| Rc::clone(&nodes[p].value)).collect();
            let pgrads = gf(&go, &pvals, &node.value);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(pgrads) {
                if !pg.all_finite() {
                    return Err(TensorError::NonFinite { op: "backward" });
                }
                debug_assert_eq!(pg.shape(), nodes[pid].value.shape());
                match &mut grads[pid] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += b;
                        }
                    }
                    None => grads[pid] = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Handle to a tape node. Cheap to clone.
#[derive(Clone)]
pub struct Var {
    pub(crate) tape: Tape,
    pub(crate) id: usize,
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Tensor {
        (*self.tape.inner.borrow()[self.id].value).clone()
    }

    pub(crate) fn value_rc(&self) -> Rc<Tensor> {
        Rc::clone(&self.tape.inner.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow()[self.id].value.shape().to_vec()
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient accumulated at `v`, zeros if the loss never touched it.
    pub fn wrt(&self, v: &Var) -> Tensor {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&v.shape()),
        }
    }
}
