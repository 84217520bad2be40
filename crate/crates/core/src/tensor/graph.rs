//! Recording tape and reverse-mode differentiation.
//!
//! A [`Var`] either lives on a [`Graph`] (training: every op is recorded so
//! `backward` can run) or is a plain reference-counted tensor (inference:
//! nothing is retained beyond the live values). Node values are shared via
//! `Rc`, so reading them never copies buffers.

use std::cell::RefCell;
use std::rc::Rc;

use super::conv::{self, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub(super) enum OpRecord {
    Leaf,
    Conv { geom: ConvGeom },
    LeakyRelu { slope: f64 },
    Tanh,
    Add,
    Scale { factor: f64 },
    Concat { axis: usize },
    Reshape,
    L1Loss,
}

pub(super) struct Node<T> {
    pub value: Rc<Tensor<T>>,
    pub op: OpRecord,
    pub parents: Vec<usize>,
    pub requires_grad: bool,
}

struct Inner<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    consumed: bool,
}

/// Append-only op tape. One graph records one forward pass and supports one
/// backward pass; build a fresh graph per training step.
pub struct Graph<T: Scalar> {
    inner: RefCell<Inner<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { inner: RefCell::new(Inner { nodes: Vec::new(), grads: Vec::new(), consumed: false }) }
    }

    /// Register an input tensor. Gradients are accumulated for it (and
    /// retrievable afterwards) only when `requires_grad` is set.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let id = self.push(Node {
            value: Rc::new(value),
            op: OpRecord::Leaf,
            parents: Vec::new(),
            requires_grad,
        });
        Var::Traced { graph: self, id }
    }

    pub(super) fn push(&self, node: Node<T>) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        inner.grads.push(None);
        inner.nodes.len() - 1
    }

    pub(super) fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.inner.borrow().nodes[id].value)
    }

    pub(super) fn requires(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    fn grad_of(&self, id: usize) -> Option<Tensor<T>> {
        self.inner.borrow().grads[id].clone()
    }

    /// Reverse sweep from `root` with an explicit output cotangent. Leaf
    /// gradients become available through [`Var::grad`]; intermediate
    /// gradients are freed as soon as they are consumed. A graph can only
    /// run backward once.
    fn backward_from(&self, root: usize, seed: Tensor<T>) -> Result<()> {
        let inner = &mut *self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::Config("backward already ran on this graph".into()));
        }
        inner.consumed = true;
        if inner.nodes[root].value.shape() != seed.shape() {
            return Err(Error::shape(
                "backward",
                format!("cotangent {:?} vs root {:?}", seed.shape(), inner.nodes[root].value.shape()),
            ));
        }
        inner.grads[root] = Some(seed);

        for id in (0..=root).rev() {
            if matches!(inner.nodes[id].op, OpRecord::Leaf) {
                continue;
            }
            let Some(gout) = inner.grads[id].take() else { continue };
            if !inner.nodes[id].requires_grad {
                continue;
            }
            distribute(inner, id, gout)?;
        }
        Ok(())
    }
}

/// Push `gout` through node `id` onto its parents.
fn distribute<T: Scalar>(inner: &mut Inner<T>, id: usize, gout: Tensor<T>) -> Result<()> {
    let parents = inner.nodes[id].parents.clone();
    let wants: Vec<bool> = parents.iter().map(|&p| inner.nodes[p].requires_grad).collect();
    match inner.nodes[id].op.clone() {
        OpRecord::Leaf => {}
        OpRecord::Conv { geom } => {
            let x = Rc::clone(&inner.nodes[parents[0]].value);
            let w = Rc::clone(&inner.nodes[parents[1]].value);
            let (dx, dw, db) = conv::backward(&x, &w, &gout, &geom, wants[0]);
            if let Some(dx) = dx {
                accumulate(&mut inner.grads[parents[0]], dx);
            }
            if wants[1] {
                accumulate(&mut inner.grads[parents[1]], dw);
            }
            if wants[2] {
                accumulate(&mut inner.grads[parents[2]], db);
            }
        }
        OpRecord::LeakyRelu { slope } => {
            if wants[0] {
                let x = Rc::clone(&inner.nodes[parents[0]].value);
                let s = T::from_f64(slope);
                let mut dx = gout;
                for (g, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                    // Unconditional select store keeps the loop vectorizable.
                    *g = if xv <= T::zero() { *g * s } else { *g };
                }
                accumulate(&mut inner.grads[parents[0]], dx);
            }
        }
        OpRecord::Tanh => {
            if wants[0] {
                let y = Rc::clone(&inner.nodes[id].value);
                let mut dx = gout;
                for (g, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                    *g = *g * (T::one() - yv * yv);
                }
                accumulate(&mut inner.grads[parents[0]], dx);
            }
        }
        OpRecord::Add => {
            if wants[0] && wants[1] {
                accumulate(&mut inner.grads[parents[0]], gout.clone());
                accumulate(&mut inner.grads[parents[1]], gout);
            } else if wants[0] {
                accumulate(&mut inner.grads[parents[0]], gout);
            } else if wants[1] {
                accumulate(&mut inner.grads[parents[1]], gout);
            }
        }
        OpRecord::Scale { factor } => {
            if wants[0] {
                let f = T::from_f64(factor);
                accumulate(&mut inner.grads[parents[0]], gout.map(|v| v * f));
            }
        }
        OpRecord::Concat { axis } => {
            let shape = inner.nodes[id].value.shape().to_vec();
            let outer: usize = shape[..axis].iter().product();
            let tail: usize = shape[axis + 1..].iter().product();
            let mut offset = 0;
            for (pi, &p) in parents.iter().enumerate() {
                let extent = inner.nodes[p].value.shape()[axis];
                if wants[pi] {
                    let mut dp = Tensor::zeros(inner.nodes[p].value.shape());
                    let chunk = extent * tail;
                    let total = shape[axis] * tail;
                    for o in 0..outer {
                        let src = &gout.data()[o * total + offset..o * total + offset + chunk];
                        dp.data_mut()[o * chunk..(o + 1) * chunk].copy_from_slice(src);
                    }
                    accumulate(&mut inner.grads[p], dp);
                }
                offset += extent * tail;
            }
        }
        OpRecord::Reshape => {
            if wants[0] {
                let pshape = inner.nodes[parents[0]].value.shape().to_vec();
                accumulate(&mut inner.grads[parents[0]], gout.into_reshaped(&pshape)?);
            }
        }
        OpRecord::L1Loss => {
            let p = Rc::clone(&inner.nodes[parents[0]].value);
            let t = Rc::clone(&inner.nodes[parents[1]].value);
            let scale = gout.item()? / T::from_f64(p.len() as f64);
            let signed = |flip: bool| {
                let mut d = Tensor::zeros(p.shape());
                for ((g, &pv), &tv) in d.data_mut().iter_mut().zip(p.data()).zip(t.data()) {
                    let s = if pv > tv {
                        T::one()
                    } else if pv < tv {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    *g = if flip { -s * scale } else { s * scale };
                }
                d
            };
            if wants[0] {
                accumulate(&mut inner.grads[parents[0]], signed(false));
            }
            if wants[1] {
                accumulate(&mut inner.grads[parents[1]], signed(true));
            }
        }
    }
    Ok(())
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, add: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&add),
        None => *slot = Some(add),
    }
}

/// A value in a computation: either a node recorded on a graph or a plain
/// tensor outside any graph.
pub enum Var<'g, T: Scalar> {
    Traced { graph: &'g Graph<T>, id: usize },
    Plain(Rc<Tensor<T>>),
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Var::Traced { id, .. } => write!(f, "Var::Traced(id={}, shape={:?})", id, self.shape()),
            Var::Plain(rc) => write!(f, "Var::Plain(shape={:?})", rc.shape()),
        }
    }
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        match self {
            Var::Traced { graph, id } => Var::Traced { graph, id: *id },
            Var::Plain(rc) => Var::Plain(Rc::clone(rc)),
        }
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Wrap a tensor with no graph attached.
    pub fn plain(value: Tensor<T>) -> Var<'static, T> {
        Var::Plain(Rc::new(value))
    }

    pub(super) fn graph(&self) -> Option<&'g Graph<T>> {
        match self {
            Var::Traced { graph, .. } => Some(graph),
            Var::Plain(_) => None,
        }
    }

    /// Shared handle to the current value.
    pub fn value(&self) -> Rc<Tensor<T>> {
        match self {
            Var::Traced { graph, id } => graph.value_of(*id),
            Var::Plain(rc) => Rc::clone(rc),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Owned copy of the current value.
    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().as_ref().clone()
    }

    /// Gradient accumulated by [`Var::backward`]; present only on traced
    /// `requires_grad` leaves after a backward pass.
    pub fn grad(&self) -> Option<Tensor<T>> {
        match self {
            Var::Traced { graph, id } => graph.grad_of(*id),
            Var::Plain(_) => None,
        }
    }

    /// Run reverse-mode differentiation from this scalar.
    pub fn backward(&self) -> Result<()> {
        if self.value().len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", self.shape()),
            ));
        }
        self.backward_seeded(Tensor::scalar(T::one()))
    }

    /// Vector-Jacobian product: reverse sweep with an explicit cotangent for
    /// this (possibly non-scalar) value. The test rig uses this to probe
    /// gradients position by position.
    pub fn backward_seeded(&self, seed: Tensor<T>) -> Result<()> {
        match self {
            Var::Traced { graph, id } => graph.backward_from(*id, seed),
            Var::Plain(_) => Err(Error::Config("backward needs a graph-recorded value".into())),
        }
    }
}
