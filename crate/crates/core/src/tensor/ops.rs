//! The op surface: forward kernels plus tape recording.
//!
//! Each op computes its output eagerly, trips on any non-finite result, and
//! records itself when an operand belongs to a graph. Mixing operands from
//! two different graphs is an error.

use std::rc::Rc;

use super::conv::{self, ConvGeom};
use super::graph::{Node, OpRecord};
use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

fn common_graph<'g, T: Scalar>(inputs: &[&Var<'g, T>]) -> Result<Option<&'g Graph<T>>> {
    let mut found: Option<&'g Graph<T>> = None;
    for v in inputs {
        if let Some(g) = v.graph() {
            match found {
                None => found = Some(g),
                Some(f) if std::ptr::eq(f, g) => {}
                Some(_) => return Err(Error::Config("operands recorded on different graphs".into())),
            }
        }
    }
    Ok(found)
}

/// Check the output, then either wrap it plain or record it on the graph.
fn finalize<'g, T: Scalar>(
    name: &'static str,
    inputs: &[&Var<'g, T>],
    record: OpRecord,
    out: Tensor<T>,
) -> Result<Var<'g, T>> {
    if !out.all_finite() {
        return Err(Error::NonFinite(name.to_string()));
    }
    let Some(graph) = common_graph(inputs)? else {
        return Ok(Var::Plain(Rc::new(out)));
    };
    let mut parents = Vec::with_capacity(inputs.len());
    let mut requires = false;
    for v in inputs {
        let id = match v {
            Var::Traced { id, .. } => *id,
            Var::Plain(rc) => graph.push(Node {
                value: Rc::clone(rc),
                op: OpRecord::Leaf,
                parents: Vec::new(),
                requires_grad: false,
            }),
        };
        requires |= graph.requires(id);
        parents.push(id);
    }
    let id = graph.push(Node { value: Rc::new(out), op: record, parents, requires_grad: requires });
    Ok(Var::Traced { graph, id })
}

impl<'g, T: Scalar> Var<'g, T> {
    /// 2D cross-correlation with bias: x [N,C,H,W], w [F,C,kh,kw], b [F].
    pub fn conv2d(&self, w: &Var<'g, T>, b: &Var<'g, T>, stride: usize, padding: usize) -> Result<Var<'g, T>> {
        let (xv, wv, bv) = (self.value(), w.value(), b.value());
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 4 || bv.shape().len() != 1 {
            return Err(Error::shape(
                "conv2d",
                format!("expected x[N,C,H,W], w[F,C,kh,kw], b[F]; got {:?}, {:?}, {:?}", xs, ws, bv.shape()),
            ));
        }
        let x5 = [xs[0], xs[1], 1, xs[2], xs[3]];
        let w5 = [ws[0], ws[1], 1, ws[2], ws[3]];
        let geom = ConvGeom::resolve(&x5, &w5, bv.len(), stride, 0, padding)?;
        let out5 = conv::forward(&xv, &wv, &bv, &geom);
        let out_shape = [geom.n, geom.f, geom.out_h, geom.out_w];
        let out = out5.into_reshaped(&out_shape)?;
        finalize("conv2d", &[self, w, b], OpRecord::Conv { geom }, out)
    }

    /// 3D cross-correlation with bias: x [N,C,D,H,W], w [F,C,kd,kh,kw].
    /// Depth and spatial padding are independent.
    pub fn conv3d(
        &self,
        w: &Var<'g, T>,
        b: &Var<'g, T>,
        stride: usize,
        pad_depth: usize,
        pad_spatial: usize,
    ) -> Result<Var<'g, T>> {
        let (xv, wv, bv) = (self.value(), w.value(), b.value());
        if xv.shape().len() != 5 || wv.shape().len() != 5 || bv.shape().len() != 1 {
            return Err(Error::shape(
                "conv3d",
                format!(
                    "expected x[N,C,D,H,W], w[F,C,kd,kh,kw], b[F]; got {:?}, {:?}, {:?}",
                    xv.shape(),
                    wv.shape(),
                    bv.shape()
                ),
            ));
        }
        let geom = ConvGeom::resolve(xv.shape(), wv.shape(), bv.len(), stride, pad_depth, pad_spatial)?;
        let out = conv::forward(&xv, &wv, &bv, &geom);
        finalize("conv3d", &[self, w, b], OpRecord::Conv { geom }, out)
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Var<'g, T>> {
        let s = T::from_f64(slope);
        // Branch-free split into positive and negative parts vectorizes.
        let out = self.value().map(|v| v.max(T::zero()) + v.min(T::zero()) * s);
        finalize("leaky_relu", &[self], OpRecord::LeakyRelu { slope }, out)
    }

    pub fn tanh(&self) -> Result<Var<'g, T>> {
        let out = self.value().map(|v| v.tanh());
        finalize("tanh", &[self], OpRecord::Tanh, out)
    }

    pub fn add(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let mut out = a.as_ref().clone();
        out.add_assign(&b);
        finalize("add", &[self, other], OpRecord::Add, out)
    }

    pub fn scale(&self, factor: f64) -> Result<Var<'g, T>> {
        let f = T::from_f64(factor);
        let out = self.value().map(|v| v * f);
        finalize("scale", &[self], OpRecord::Scale { factor }, out)
    }

    /// Same data, new extents; the element count must not change.
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let out = self.to_tensor().into_reshaped(shape)?;
        finalize("reshape", &[self], OpRecord::Reshape, out)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(inputs: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        if inputs.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let values: Vec<Rc<Tensor<T>>> = inputs.iter().map(|v| v.value()).collect();
        let base = values[0].shape();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {} for rank {}", axis, base.len())));
        }
        let mut axis_total = 0;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter().enumerate().all(|(i, &e)| i == axis || e == base[i]);
            if !compatible {
                return Err(Error::shape("concat", format!("{:?} vs {:?} along axis {}", s, base, axis)));
            }
            axis_total += s[axis];
        }
        let mut shape = base.to_vec();
        shape[axis] = axis_total;
        let outer: usize = base[..axis].iter().product();
        let tail: usize = base[axis + 1..].iter().product();
        let mut out = Tensor::zeros(&shape);
        let total = axis_total * tail;
        let mut offset = 0;
        for v in &values {
            let chunk = v.shape()[axis] * tail;
            for o in 0..outer {
                out.data_mut()[o * total + offset..o * total + offset + chunk]
                    .copy_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
            offset += chunk;
        }
        let refs: Vec<&Var<'g, T>> = inputs.iter().collect();
        finalize("concat", &refs, OpRecord::Concat { axis }, out)
    }

    /// Mean absolute error as a scalar tensor.
    pub fn l1_loss(&self, target: &Var<'g, T>) -> Result<Var<'g, T>> {
        let (p, t) = (self.value(), target.value());
        if p.shape() != t.shape() {
            return Err(Error::shape("l1_loss", format!("{:?} vs {:?}", p.shape(), t.shape())));
        }
        if p.is_empty() {
            return Err(Error::shape("l1_loss", "empty tensors"));
        }
        let mut acc = 0.0f64;
        for (&pv, &tv) in p.data().iter().zip(t.data()) {
            acc += (pv - tv).abs().to_f64();
        }
        let out = Tensor::scalar(T::from_f64(acc / p.len() as f64));
        finalize("l1_loss", &[self, target], OpRecord::L1Loss, out)
    }
}
