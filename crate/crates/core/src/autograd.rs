//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s together with a
//! backward closure. [`Tape::backward`] walks the tape in reverse and returns
//! gradients for every leaf that requires them. Constants never receive
//! gradients, and subgraphs that do not depend on a leaf are not recorded.
//!
//! An inference tape (`Tape::inference`) keeps values but drops all backward
//! state, so sampling loops do not pay for bookkeeping.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{FlagError, Result};
use crate::tensor::{broadcast_shape, gemm, Tensor};

type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

pub(crate) struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub inputs: &'a [Rc<Tensor>],
    pub output: &'a Tensor,
    pub needs: &'a [bool],
}

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), record: true }
    }

    /// A tape that never records backward closures.
    pub fn inference() -> Self {
        Self { nodes: RefCell::new(Vec::new()), record: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, requires_grad: bool, backward: Option<BackwardFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value: Rc::new(value), parents, requires_grad, backward });
        Var { tape: self, id }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), self.record, None)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), false, None)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn op(&self, value: Tensor, parents: &[Var<'_>], backward: BackwardFn) -> Var<'_> {
        let requires = self.record && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        if requires {
            self.push(value, parents.iter().map(|p| p.id).collect(), true, Some(backward))
        } else {
            self.push(value, Vec::new(), false, None)
        }
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(FlagError::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = &node.backward else {
                leaf_grads[id] = Some(g);
                continue;
            };
            let inputs: Vec<Rc<Tensor>> = node.parents.iter().map(|&p| nodes[p].value.clone()).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let ctx = BackwardCtx { grad: &g, inputs: &inputs, output: &node.value, needs: &needs };
            let parent_grads = backward(&ctx);
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape of node {p}");
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

/// Gradients of a scalar with respect to the leaves of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of its shape when it did not influence the loss.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

fn shape_err(e: FlagError) -> ! {
    panic!("{e}")
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(self, value: Tensor, df: impl Fn(&Tensor, &Tensor, &Tensor) -> Tensor + 'static) -> Var<'t> {
        self.tape.op(
            value,
            &[self],
            Box::new(move |ctx| vec![Some(df(ctx.grad, &ctx.inputs[0], ctx.output))]),
        )
    }

    fn elementwise(self, f: impl Fn(f64) -> f64, dfdx: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let value = self.value().map(f);
        self.unary(value, move |g, x, y| {
            let data = g
                .data()
                .iter()
                .zip(x.data().iter().zip(y.data()))
                .map(|(&g, (&x, &y))| g * dfdx(x, y))
                .collect();
            Tensor::from_parts(g.shape().to_vec(), data)
        })
    }

    // ---- broadcasting arithmetic -------------------------------------------------

    pub fn try_add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let value = self.value().zip_with(&rhs.value(), |a, b| a + b)?;
        Ok(self.tape.op(
            value,
            &[self, rhs],
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.sum_to(ctx.inputs[0].shape())),
                    ctx.needs[1].then(|| ctx.grad.sum_to(ctx.inputs[1].shape())),
                ]
            }),
        ))
    }

    pub fn try_sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let value = self.value().zip_with(&rhs.value(), |a, b| a - b)?;
        Ok(self.tape.op(
            value,
            &[self, rhs],
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.sum_to(ctx.inputs[0].shape())),
                    ctx.needs[1].then(|| ctx.grad.map(|x| -x).sum_to(ctx.inputs[1].shape())),
                ]
            }),
        ))
    }

    pub fn try_mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let value = self.value().zip_with(&rhs.value(), |a, b| a * b)?;
        Ok(self.tape.op(
            value,
            &[self, rhs],
            Box::new(|ctx| {
                let (a, b) = (&ctx.inputs[0], &ctx.inputs[1]);
                vec![
                    ctx.needs[0].then(|| mul_sum_to(ctx.grad, b, a.shape())),
                    ctx.needs[1].then(|| mul_sum_to(ctx.grad, a, b.shape())),
                ]
            }),
        ))
    }

    pub fn try_div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let value = self.value().zip_with(&rhs.value(), |a, b| a / b)?;
        Ok(self.tape.op(
            value,
            &[self, rhs],
            Box::new(|ctx| {
                let (a, b) = (&ctx.inputs[0], &ctx.inputs[1]);
                let ga = ctx.needs[0].then(|| {
                    let q = ctx.grad.zip_with(b, |g, b| g / b).expect("broadcast checked");
                    q.sum_to(a.shape())
                });
                let gb = ctx.needs[1].then(|| {
                    // d(a/b)/db = -y/b
                    let gy = ctx.grad.zip_with(ctx.output, |g, y| -g * y).expect("same shape");
                    let q = gy.zip_with(b, |v, b| v / b).expect("broadcast checked");
                    q.sum_to(b.shape())
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.elementwise(move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.elementwise(move |x| x + c, |_, _| 1.0)
    }

    pub fn exp(self) -> Var<'t> {
        self.elementwise(f64::exp, |_, y| y)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.elementwise(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(self) -> Var<'t> {
        self.elementwise(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn abs(self) -> Var<'t> {
        // subgradient 0 at the kink
        self.elementwise(f64::abs, |x, _| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
    }

    pub fn tanh(self) -> Var<'t> {
        self.elementwise(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn silu(self) -> Var<'t> {
        self.elementwise(
            |x| x / (1.0 + (-x).exp()),
            |x, _| {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        self.elementwise(gelu, gelu_grad)
    }

    // ---- linear algebra -----------------------------------------------------------

    /// Batched `self @ rhs`; `rhs` is either 2-D (shared) or has the same batch dims.
    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        self.try_matmul(rhs, false).unwrap_or_else(|e| shape_err(e))
    }

    /// Batched `self @ rhsᵀ` (transpose of the last two axes of `rhs`).
    pub fn matmul_t(self, rhs: Var<'t>) -> Var<'t> {
        self.try_matmul(rhs, true).unwrap_or_else(|e| shape_err(e))
    }

    pub fn try_matmul(self, rhs: Var<'t>, rhs_t: bool) -> Result<Var<'t>> {
        let value = bmm(&self.value(), false, &rhs.value(), rhs_t)?;
        Ok(self.tape.op(
            value,
            &[self, rhs],
            Box::new(move |ctx| {
                let (a, b, g) = (&ctx.inputs[0], &ctx.inputs[1], ctx.grad);
                let shared = b.ndim() == 2;
                let ga = ctx.needs[0].then(|| {
                    // C = A B  -> dA = G Bᵀ ;  C = A Bᵀ -> dA = G B
                    bmm(g, false, b, !rhs_t).expect("shapes validated in forward")
                });
                let gb = ctx.needs[1].then(|| match (shared, rhs_t) {
                    (true, false) => flat_tn(a, g),
                    (true, true) => flat_tn(g, a),
                    (false, false) => bmm(a, true, g, false).expect("validated"),
                    (false, true) => bmm(g, true, a, false).expect("validated"),
                });
                vec![ga, gb]
            }),
        ))
    }

    // ---- shape ops ------------------------------------------------------------------

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let value = self.value().reshape(shape).unwrap_or_else(|e| shape_err(e));
        self.unary(value, |g, x, _| g.reshape(x.shape()).expect("same numel"))
    }

    pub fn permute(self, axes: &[usize]) -> Var<'t> {
        let value = self.value().permute(axes).unwrap_or_else(|e| shape_err(e));
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.unary(value, move |g, _, _| g.permute(&inverse).expect("valid inverse"))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let value = self.value().narrow(axis, start, len).unwrap_or_else(|e| shape_err(e));
        self.unary(value, move |g, x, _| {
            let (outer, dim, inner) = x.axis_split(axis);
            let mut out = vec![0.0; x.len()];
            for o in 0..outer {
                let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                let base = (o * dim + start) * inner;
                out[base..base + len * inner].copy_from_slice(src);
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        })
    }

    /// Rows `idx` of the leading axis; repeated indices accumulate gradient.
    pub fn index_rows(self, idx: &[usize]) -> Var<'t> {
        let x = self.value();
        let inner = x.len() / x.shape()[0].max(1);
        let value = x.select_rows(idx).unwrap_or_else(|e| shape_err(e));
        let idx = idx.to_vec();
        self.unary(value, move |g, x, _| {
            let mut out = vec![0.0; x.len()];
            for (k, &r) in idx.iter().enumerate() {
                let dst = &mut out[r * inner..(r + 1) * inner];
                for (d, s) in dst.iter_mut().zip(&g.data()[k * inner..(k + 1) * inner]) {
                    *d += s;
                }
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        })
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Var<'t> {
        let tape = parts[0].tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let value = Tensor::concat(&refs, axis).unwrap_or_else(|e| shape_err(e));
        tape.op(
            value,
            parts,
            Box::new(move |ctx| {
                let mut start = 0;
                ctx.inputs
                    .iter()
                    .zip(ctx.needs)
                    .map(|(x, &need)| {
                        let len = x.shape()[axis];
                        let g = need.then(|| ctx.grad.narrow(axis, start, len).expect("in range"));
                        start += len;
                        g
                    })
                    .collect()
            }),
        )
    }

    // ---- reductions -----------------------------------------------------------------

    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.value().sum());
        self.unary(value, |g, x, _| Tensor::full(x.shape(), g.item()))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Var<'t> {
        let value = self.value().sum_axis(axis, keepdim);
        self.unary(value, move |g, x, _| {
            let mut kept = x.shape().to_vec();
            kept[axis] = 1;
            g.reshape(&kept).expect("same numel").broadcast_to(x.shape()).expect("broadcastable")
        })
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Var<'t> {
        let n = self.value().shape()[axis] as f64;
        self.sum_axis(axis, keepdim).scale(1.0 / n)
    }

    // ---- fused normalizations ------------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let x = self.value();
        let d = *x.shape().last().expect("softmax of scalar");
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        self.unary(value, move |g, _, y| {
            let mut dx = vec![0.0; y.len()];
            for ((dxr, gr), yr) in dx.chunks_mut(d).zip(g.data().chunks(d)).zip(y.data().chunks(d)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((o, &gi), &yi) in dxr.iter_mut().zip(gr).zip(yr) {
                    *o = yi * (gi - dot);
                }
            }
            Tensor::from_parts(y.shape().to_vec(), dx)
        })
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(self, eps: f64) -> Var<'t> {
        let x = self.value();
        let d = *x.shape().last().expect("layer_norm of scalar");
        let mut out = x.data().to_vec();
        let mut inv_std = Vec::with_capacity(x.len() / d.max(1));
        for row in out.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            inv_std.push(r);
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        self.unary(value, move |g, _, y| {
            let mut dx = vec![0.0; y.len()];
            for (((dxr, gr), yr), &r) in
                dx.chunks_mut(d).zip(g.data().chunks(d)).zip(y.data().chunks(d)).zip(&inv_std)
            {
                let mg = gr.iter().sum::<f64>() / d as f64;
                let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for ((o, &gi), &yi) in dxr.iter_mut().zip(gr).zip(yr) {
                    *o = r * (gi - mg - yi * mgy);
                }
            }
            Tensor::from_parts(y.shape().to_vec(), dx)
        })
    }
}

fn mul_sum_to(g: &Tensor, other: &Tensor, shape: &[usize]) -> Tensor {
    g.zip_with(other, |a, b| a * b).expect("broadcast checked").sum_to(shape)
}

/// `tanh` through a single `exp`; libm's `tanh` dominates profiles otherwise.
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + fast_tanh(C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64, _y: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let th = fast_tanh(u);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// Batched matrix product with optional transposes of the last two axes.
/// `b` may be 2-D (shared across the batch) or carry the same batch dims as `a`.
pub(crate) fn bmm(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Result<Tensor> {
    let nd = a.ndim();
    if nd < 2 || b.ndim() < 2 {
        return Err(FlagError::Shape(format!("matmul needs >=2-D operands, got {:?} and {:?}", a.shape(), b.shape())));
    }
    let (ar, ac) = (a.shape()[nd - 2], a.shape()[nd - 1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let bnd = b.ndim();
    let (br, bc) = (b.shape()[bnd - 2], b.shape()[bnd - 1]);
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    if k != kb {
        return Err(FlagError::Shape(format!(
            "matmul inner dims differ: {:?}{} x {:?}{}",
            a.shape(),
            if ta { "ᵀ" } else { "" },
            b.shape(),
            if tb { "ᵀ" } else { "" }
        )));
    }
    let batch = &a.shape()[..nd - 2];
    let nb: usize = batch.iter().product();
    let mut shape = batch.to_vec();
    shape.extend([m, n]);
    let mut out = vec![0.0; nb * m * n];
    if bnd == 2 {
        if !ta {
            gemm(nb * m, k, n, a.data(), false, b.data(), tb, &mut out, 0.0);
        } else {
            for i in 0..nb {
                gemm(m, k, n, &a.data()[i * m * k..(i + 1) * m * k], true, b.data(), tb, &mut out[i * m * n..(i + 1) * m * n], 0.0);
            }
        }
    } else {
        if &b.shape()[..bnd - 2] != batch {
            return Err(FlagError::Shape(format!("matmul batch dims differ: {:?} vs {:?}", a.shape(), b.shape())));
        }
        for i in 0..nb {
            gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                ta,
                &b.data()[i * k * n..(i + 1) * k * n],
                tb,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

/// `flat(a)ᵀ · flat(b)` where both are flattened to 2-D over all leading axes.
fn flat_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let ka = *a.shape().last().expect("nonscalar");
    let kb = *b.shape().last().expect("nonscalar");
    let rows = a.len() / ka;
    let mut out = vec![0.0; ka * kb];
    gemm(ka, rows, kb, a.data(), true, b.data(), false, &mut out, 0.0);
    Tensor::from_parts(vec![ka, kb], out)
}

/// Checks that two shapes broadcast, for callers that want an early error.
pub fn check_broadcast(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    broadcast_shape(a, b).ok_or_else(|| FlagError::Shape(format!("cannot broadcast {a:?} with {b:?}")))
}

macro_rules! impl_binop {
    ($trait:ident, $method:ident, $call:ident) => {
        impl<'t> std::ops::$trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.$call(rhs).unwrap_or_else(|e| shape_err(e))
            }
        }
    };
}
impl_binop!(Add, add, try_add);
impl_binop!(Sub, sub, try_sub);
impl_binop!(Mul, mul, try_mul);
impl_binop!(Div, div, try_div);

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}
