use std::cell::{Ref, RefCell};

use super::conv::{self, ConvGeom};
use super::gemm::{gemm, Mat};
use super::{
    Broadcast, Result, Tensor, TensorError, EXP_CLAMP, LOG_FLOOR, NORM_EPS, STD_FLOOR,
};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Div(usize, usize, Broadcast),
    Scale(usize, f64),
    Shift(usize),
    Neg(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Sum { input: usize, axes: Vec<usize> },
    Mean { input: usize, axes: Vec<usize> },
    Matmul(usize, usize),
    Conv2d { input: usize, kernel: usize, geom: ConvGeom },
    Upsample2x(usize),
    Reshape(usize),
    Softmax(usize),
    L2Normalize { input: usize, norms: Vec<f64> },
    InstanceMean(usize),
    InstanceStd { input: usize, mean: Vec<f64> },
    InstanceAffine { input: usize, scale: usize, shift: usize },
    GradReverse(usize, f64),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in creation order; node inputs always precede the node.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn backward_from(&self, root: usize) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root].value.shape();
        if nodes[root].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root] = Some(vec![1.0]);
        for id in (0..=root).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|d| Tensor::from_vec(d, n.value.shape()).expect("grad shape")))
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

fn binary_grads(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    (a, b, bc): (usize, usize, Broadcast),
    g: &[f64],
    da: impl Fn(f64, f64, f64) -> f64,
    db: impl Fn(f64, f64, f64) -> f64,
) {
    let av = nodes[a].value.data();
    let bv = nodes[b].value.data();
    accumulate(grads, nodes, a, |slot| {
        for (i, &gi) in g.iter().enumerate() {
            let (ia, ib) = bc.index(i);
            slot[ia] += da(gi, av[ia], bv[ib]);
        }
    });
    accumulate(grads, nodes, b, |slot| {
        for (i, &gi) in g.iter().enumerate() {
            let (ia, ib) = bc.index(i);
            slot[ib] += db(gi, av[ia], bv[ib]);
        }
    });
}

fn unary_grad(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    input: usize,
    out: &Tensor,
    g: &[f64],
    f: impl Fn(f64, f64, f64) -> f64,
) {
    let x = nodes[input].value.data();
    let y = out.data();
    accumulate(grads, nodes, input, |slot| {
        for i in 0..g.len() {
            slot[i] += f(g[i], x[i], y[i]);
        }
    });
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b, bc) => binary_grads(grads, nodes, (*a, *b, *bc), g, |g, _, _| g, |g, _, _| g),
        Op::Sub(a, b, bc) => binary_grads(grads, nodes, (*a, *b, *bc), g, |g, _, _| g, |g, _, _| -g),
        Op::Mul(a, b, bc) => {
            binary_grads(grads, nodes, (*a, *b, *bc), g, |g, _, y| g * y, |g, x, _| g * x)
        }
        Op::Div(a, b, bc) => binary_grads(
            grads,
            nodes,
            (*a, *b, *bc),
            g,
            |g, _, y| g / y,
            |g, x, y| -g * x / (y * y),
        ),
        Op::Scale(a, s) => unary_grad(grads, nodes, *a, out, g, |g, _, _| g * s),
        Op::Shift(a) => unary_grad(grads, nodes, *a, out, g, |g, _, _| g),
        Op::Neg(a) => unary_grad(grads, nodes, *a, out, g, |g, _, _| -g),
        Op::Relu(a) => unary_grad(grads, nodes, *a, out, g, |g, x, _| if x > 0.0 { g } else { 0.0 }),
        Op::Sigmoid(a) => unary_grad(grads, nodes, *a, out, g, |g, _, y| g * y * (1.0 - y)),
        Op::Exp(a) => unary_grad(grads, nodes, *a, out, g, |g, x, y| {
            if x < EXP_CLAMP.0 || x > EXP_CLAMP.1 {
                0.0
            } else {
                g * y
            }
        }),
        Op::Log(a) => unary_grad(grads, nodes, *a, out, g, |g, x, _| {
            if x > LOG_FLOOR {
                g / x
            } else {
                0.0
            }
        }),
        Op::Sum { input, axes } | Op::Mean { input, axes } => {
            let shape = nodes[*input].value.shape();
            let map = ReduceMap::new(shape, axes);
            let scale = if matches!(nodes[id].op, Op::Mean { .. }) {
                1.0 / map.group as f64
            } else {
                1.0
            };
            accumulate(grads, nodes, *input, |slot| {
                map.for_each(|i, o| slot[i] += g[o] * scale);
            });
        }
        Op::Matmul(a, b) => {
            let (m, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
            let n = nodes[*b].value.shape()[1];
            let gm = Mat::new(g, m, n);
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            accumulate(grads, nodes, *a, |slot| gemm(gm, Mat::new(bv, k, n).t(), slot, 1.0));
            accumulate(grads, nodes, *b, |slot| gemm(Mat::new(av, m, k).t(), gm, slot, 1.0));
        }
        Op::Conv2d {
            input,
            kernel,
            geom,
        } => {
            let need_in = nodes[*input].requires_grad;
            let need_k = nodes[*kernel].requires_grad;
            let mut d_in = need_in.then(|| {
                grads[*input]
                    .take()
                    .unwrap_or_else(|| vec![0.0; nodes[*input].value.len()])
            });
            let mut d_k = need_k.then(|| {
                grads[*kernel]
                    .take()
                    .unwrap_or_else(|| vec![0.0; nodes[*kernel].value.len()])
            });
            conv::backward(
                geom,
                nodes[*input].value.data(),
                nodes[*kernel].value.data(),
                g,
                d_in.as_deref_mut(),
                d_k.as_deref_mut(),
            );
            if let Some(d) = d_in {
                grads[*input] = Some(d);
            }
            if let Some(d) = d_k {
                grads[*kernel] = Some(d);
            }
        }
        Op::Upsample2x(a) => {
            let s = nodes[*a].value.shape();
            let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
            accumulate(grads, nodes, *a, |slot| {
                for p in 0..planes {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            slot[(p * h + y / 2) * w + x / 2] += g[(p * 2 * h + y) * 2 * w + x];
                        }
                    }
                }
            });
        }
        Op::Reshape(a) => accumulate(grads, nodes, *a, |slot| {
            slot.iter_mut().zip(g).for_each(|(s, g)| *s += g)
        }),
        Op::Softmax(a) => {
            let (outer, c, inner) = softmax_dims(out.shape());
            let y = out.data();
            accumulate(grads, nodes, *a, |slot| {
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |k: usize| (o * c + k) * inner + j;
                        let dot: f64 = (0..c).map(|k| y[at(k)] * g[at(k)]).sum();
                        for k in 0..c {
                            slot[at(k)] += y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
            });
        }
        Op::L2Normalize { input, norms } => {
            let d = *out.shape().last().unwrap_or(&1);
            let y = out.data();
            accumulate(grads, nodes, *input, |slot| {
                for (r, norm) in norms.iter().enumerate() {
                    let row = r * d..(r + 1) * d;
                    let dot: f64 = y[row.clone()].iter().zip(&g[row.clone()]).map(|(a, b)| a * b).sum();
                    for i in row {
                        slot[i] += (g[i] - y[i] * dot) / norm;
                    }
                }
            });
        }
        Op::InstanceMean(a) => {
            let s = nodes[*a].value.shape();
            let hw = s[2] * s[3];
            accumulate(grads, nodes, *a, |slot| {
                for (p, chunk) in slot.chunks_mut(hw).enumerate() {
                    let share = g[p] / hw as f64;
                    chunk.iter_mut().for_each(|v| *v += share);
                }
            });
        }
        Op::InstanceStd { input, mean } => {
            let s = nodes[*input].value.shape();
            let hw = s[2] * s[3];
            let x = nodes[*input].value.data();
            let sigma = out.data();
            accumulate(grads, nodes, *input, |slot| {
                for (p, chunk) in slot.chunks_mut(hw).enumerate() {
                    if sigma[p] <= STD_FLOOR {
                        continue;
                    }
                    let coef = g[p] / (hw as f64 * sigma[p]);
                    for (i, v) in chunk.iter_mut().enumerate() {
                        *v += coef * (x[p * hw + i] - mean[p]);
                    }
                }
            });
        }
        Op::InstanceAffine {
            input,
            scale,
            shift,
        } => {
            let s = nodes[*input].value.shape();
            let hw = s[2] * s[3];
            let x = nodes[*input].value.data();
            let a = nodes[*scale].value.data();
            accumulate(grads, nodes, *input, |slot| {
                for (i, v) in slot.iter_mut().enumerate() {
                    *v += g[i] * a[i / hw];
                }
            });
            accumulate(grads, nodes, *scale, |slot| {
                for (i, &gi) in g.iter().enumerate() {
                    slot[i / hw] += gi * x[i];
                }
            });
            accumulate(grads, nodes, *shift, |slot| {
                for (i, &gi) in g.iter().enumerate() {
                    slot[i / hw] += gi;
                }
            });
        }
        Op::GradReverse(a, lambda) => {
            unary_grad(grads, nodes, *a, out, g, |g, _, _| -lambda * g)
        }
    }
}

fn softmax_dims(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        0 => (1, 1, 1),
        1 => (1, shape[0], 1),
        _ => (shape[0], shape[1], shape[2..].iter().product()),
    }
}

/// Maps input positions onto output positions of an axis reduction.
struct ReduceMap {
    shape: Vec<usize>,
    out_strides: Vec<usize>,
    out_len: usize,
    group: usize,
}

impl ReduceMap {
    fn new(shape: &[usize], axes: &[usize]) -> Self {
        let mut out_strides = vec![0; shape.len()];
        let mut stride = 1;
        for d in (0..shape.len()).rev() {
            if !axes.contains(&d) {
                out_strides[d] = stride;
                stride *= shape[d];
            }
        }
        let group = axes.iter().map(|&a| shape[a]).product();
        ReduceMap {
            shape: shape.to_vec(),
            out_strides,
            out_len: stride,
            group,
        }
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let total: usize = self.shape.iter().product();
        let mut idx = vec![0usize; self.shape.len()];
        let mut out = 0usize;
        for i in 0..total {
            f(i, out);
            for d in (0..self.shape.len()).rev() {
                idx[d] += 1;
                out += self.out_strides[d];
                if idx[d] < self.shape[d] {
                    break;
                }
                out -= self.out_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrow of the recorded value. Do not hold it across new operations.
    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value(self.id)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(&[self.id])
    }

    /// Reverse pass from this scalar.
    pub fn backward(&self) -> Result<Gradients> {
        self.tape.backward_from(self.id)
    }

    fn same_tape(&self, other: Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::ForeignTape)
        }
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'t> {
        let rg = self.tape.requires(inputs);
        self.tape.push(value, op, rg)
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize, Broadcast) -> Op,
    ) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let value = {
            let a = self.value();
            let b = other.value();
            let bc = Broadcast::resolve(name, a.shape(), b.shape())?;
            let shape = bc.out_shape(a.shape(), b.shape());
            let n: usize = shape.iter().product();
            let (ad, bd) = (a.data(), b.data());
            let data = (0..n)
                .map(|i| {
                    let (ia, ib) = bc.index(i);
                    f(ad[ia], bd[ib])
                })
                .collect();
            (Tensor { shape, data }, bc)
        };
        let (value, bc) = value;
        Ok(self.record(value, op(self.id, other.id, bc), &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, Op::Div)
    }

    fn unary(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let value = self.value().map(f);
        self.record(value, op, &[self.id])
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(|v| v * s, Op::Scale(self.id, s))
    }

    pub fn shift(self, s: f64) -> Var<'t> {
        self.unary(|v| v + s, Op::Shift(self.id))
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(|v| -v, Op::Neg(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|v| v.max(0.0), Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(|v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(self.id))
    }

    /// `exp` with the argument clamped to [`EXP_CLAMP`].
    pub fn exp(self) -> Var<'t> {
        self.unary(|v| v.clamp(EXP_CLAMP.0, EXP_CLAMP.1).exp(), Op::Exp(self.id))
    }

    /// Natural log with the argument floored at [`LOG_FLOOR`].
    pub fn log(self) -> Var<'t> {
        self.unary(|v| v.max(LOG_FLOOR).ln(), Op::Log(self.id))
    }

    fn reduce(self, name: &'static str, axes: &[usize], mean: bool) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            let rank = x.rank();
            let mut axes = axes.to_vec();
            axes.sort_unstable();
            axes.dedup();
            if let Some(&axis) = axes.iter().find(|&&a| a >= rank) {
                return Err(TensorError::Axis { op: name, axis, rank });
            }
            let map = ReduceMap::new(x.shape(), &axes);
            let mut data = vec![0.0; map.out_len];
            let xd = x.data();
            map.for_each(|i, o| data[o] += xd[i]);
            if mean && map.group > 0 {
                let inv = 1.0 / map.group as f64;
                data.iter_mut().for_each(|v| *v *= inv);
            }
            let shape = x
                .shape()
                .iter()
                .enumerate()
                .filter(|(d, _)| !axes.contains(d))
                .map(|(_, &s)| s)
                .collect();
            (Tensor { shape, data }, axes)
        };
        let (value, axes) = value;
        let op = if mean {
            Op::Mean {
                input: self.id,
                axes,
            }
        } else {
            Op::Sum {
                input: self.id,
                axes,
            }
        };
        Ok(self.record(value, op, &[self.id]))
    }

    /// Sum over `axes`; an empty list returns an identical copy.
    pub fn sum(self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce("sum", axes, false)
    }

    pub fn mean(self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce("mean", axes, true)
    }

    pub fn sum_all(self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.value().rank()).collect();
        self.sum(&axes).expect("all axes are in range")
    }

    pub fn mean_all(self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.value().rank()).collect();
        self.mean(&axes).expect("all axes are in range")
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let value = {
            let a = self.value();
            let b = other.value();
            for (t, _) in [(&*a, 0), (&*b, 1)] {
                if t.rank() != 2 {
                    return Err(TensorError::Rank {
                        op: "matmul",
                        expected: 2,
                        shape: t.shape().to_vec(),
                    });
                }
            }
            let (m, k, k2, n) = (a.shape()[0], a.shape()[1], b.shape()[0], b.shape()[1]);
            if k != k2 {
                return Err(TensorError::Dimension {
                    op: "matmul",
                    axis: 1,
                    left: k,
                    right: k2,
                });
            }
            let mut data = vec![0.0; m * n];
            gemm(Mat::new(a.data(), m, k), Mat::new(b.data(), k, n), &mut data, 0.0);
            Tensor {
                shape: vec![m, n],
                data,
            }
        };
        Ok(self.record(value, Op::Matmul(self.id, other.id), &[self.id, other.id]))
    }

    /// 2-D cross-correlation of `[N,C,H,W]` input with `[K,C,kh,kw]` kernel.
    pub fn conv2d(self, kernel: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        self.same_tape(kernel)?;
        let (value, geom) = {
            let x = self.value();
            let k = kernel.value();
            for (t, op) in [(&*x, "conv2d input"), (&*k, "conv2d kernel")] {
                if t.rank() != 4 {
                    return Err(TensorError::Rank {
                        op,
                        expected: 4,
                        shape: t.shape().to_vec(),
                    });
                }
            }
            let (xs, ks) = (x.shape(), k.shape());
            if xs[1] != ks[1] {
                return Err(TensorError::Dimension {
                    op: "conv2d",
                    axis: 1,
                    left: xs[1],
                    right: ks[1],
                });
            }
            for axis in [2, 3] {
                if ks[axis] > xs[axis] + 2 * padding {
                    return Err(TensorError::Dimension {
                        op: "conv2d",
                        axis,
                        left: xs[axis] + 2 * padding,
                        right: ks[axis],
                    });
                }
            }
            let stride = stride.max(1);
            let geom = ConvGeom {
                n: xs[0],
                c: xs[1],
                h: xs[2],
                w: xs[3],
                k: ks[0],
                kh: ks[2],
                kw: ks[3],
                stride,
                pad: padding,
                ho: (xs[2] + 2 * padding - ks[2]) / stride + 1,
                wo: (xs[3] + 2 * padding - ks[3]) / stride + 1,
            };
            let data = conv::forward(&geom, x.data(), k.data());
            (
                Tensor {
                    shape: vec![geom.n, geom.k, geom.ho, geom.wo],
                    data,
                },
                geom,
            )
        };
        Ok(self.record(
            value,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                geom,
            },
            &[self.id, kernel.id],
        ))
    }

    /// Nearest-neighbour ×2 upsampling of an `[N,C,H,W]` map.
    pub fn upsample2x(self) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            let s = x.shape();
            if s.len() != 4 {
                return Err(TensorError::Rank {
                    op: "upsample2x",
                    expected: 4,
                    shape: s.to_vec(),
                });
            }
            let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
            let xd = x.data();
            let mut data = Vec::with_capacity(planes * 4 * h * w);
            for p in 0..planes {
                for y in 0..2 * h {
                    let row = &xd[(p * h + y / 2) * w..][..w];
                    for xx in 0..2 * w {
                        data.push(row[xx / 2]);
                    }
                }
            }
            Tensor {
                shape: vec![s[0], s[1], 2 * h, 2 * w],
                data,
            }
        };
        Ok(self.record(value, Op::Upsample2x(self.id), &[self.id]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        Ok(self.record(value, Op::Reshape(self.id), &[self.id]))
    }

    /// Softmax along axis 1 (or axis 0 of a vector).
    pub fn softmax(self) -> Var<'t> {
        let value = {
            let x = self.value();
            let (outer, c, inner) = softmax_dims(x.shape());
            let xd = x.data();
            let mut data = vec![0.0; xd.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let at = |k: usize| (o * c + k) * inner + j;
                    let max = (0..c).map(|k| xd[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for k in 0..c {
                        let e = (xd[at(k)] - max).exp();
                        data[at(k)] = e;
                        total += e;
                    }
                    for k in 0..c {
                        data[at(k)] /= total;
                    }
                }
            }
            Tensor {
                shape: x.shape().to_vec(),
                data,
            }
        };
        self.record(value, Op::Softmax(self.id), &[self.id])
    }

    /// Unit-normalizes a `[D]` vector, or each row of an `[N,D]` matrix.
    pub fn l2_normalize(self) -> Result<Var<'t>> {
        let (value, norms) = {
            let x = self.value();
            if x.rank() == 0 || x.rank() > 2 {
                return Err(TensorError::Rank {
                    op: "l2_normalize",
                    expected: 2,
                    shape: x.shape().to_vec(),
                });
            }
            let d = *x.shape().last().expect("rank checked");
            let mut data = x.data().to_vec();
            let mut norms = Vec::new();
            for row in data.chunks_mut(d.max(1)) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm <= NORM_EPS {
                    return Err(TensorError::DegenerateVector { norm });
                }
                row.iter_mut().for_each(|v| *v /= norm);
                norms.push(norm);
            }
            (
                Tensor {
                    shape: x.shape().to_vec(),
                    data,
                },
                norms,
            )
        };
        Ok(self.record(
            value,
            Op::L2Normalize {
                input: self.id,
                norms,
            },
            &[self.id],
        ))
    }

    /// Per-instance, per-channel spatial mean and population standard
    /// deviation (floored at [`STD_FLOOR`]) of an `[N,C,H,W]` map.
    pub fn instance_stats(self) -> Result<(Var<'t>, Var<'t>)> {
        let (mean, sigma, nc) = {
            let x = self.value();
            let s = x.shape();
            if s.len() != 4 {
                return Err(TensorError::Rank {
                    op: "instance_stats",
                    expected: 4,
                    shape: s.to_vec(),
                });
            }
            let hw = s[2] * s[3];
            if hw < 2 {
                return Err(TensorError::DegenerateSpatial(hw));
            }
            let (mean, sigma) = channel_moments(x.data(), hw);
            (mean, sigma, vec![s[0], s[1]])
        };
        let mu = self.record(
            Tensor::from_vec(mean.clone(), &nc)?,
            Op::InstanceMean(self.id),
            &[self.id],
        );
        let sd = self.record(
            Tensor::from_vec(sigma, &nc)?,
            Op::InstanceStd {
                input: self.id,
                mean,
            },
            &[self.id],
        );
        Ok((mu, sd))
    }

    /// `scale[n,c] * x[n,c,..] + shift[n,c]` for an `[N,C,H,W]` map.
    pub fn instance_affine(self, scale: Var<'t>, shift: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(scale)?;
        self.same_tape(shift)?;
        let value = {
            let x = self.value();
            let a = scale.value();
            let b = shift.value();
            let s = x.shape();
            if s.len() != 4 {
                return Err(TensorError::Rank {
                    op: "instance_affine",
                    expected: 4,
                    shape: s.to_vec(),
                });
            }
            for t in [&*a, &*b] {
                if t.shape() != [s[0], s[1]] {
                    return Err(TensorError::Broadcast {
                        op: "instance_affine",
                        left: s.to_vec(),
                        right: t.shape().to_vec(),
                    });
                }
            }
            let hw = s[2] * s[3];
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| a.data()[i / hw] * v + b.data()[i / hw])
                .collect();
            Tensor {
                shape: s.to_vec(),
                data,
            }
        };
        Ok(self.record(
            value,
            Op::InstanceAffine {
                input: self.id,
                scale: scale.id,
                shift: shift.id,
            },
            &[self.id, scale.id, shift.id],
        ))
    }

    /// Identity forward; multiplies the gradient by `-lambda` on the way back.
    pub fn grad_reverse(self, lambda: f64) -> Var<'t> {
        let value = self.value().clone();
        self.record(value, Op::GradReverse(self.id, lambda), &[self.id])
    }

    /// Same value, cut from the gradient graph.
    pub fn detach(self) -> Var<'t> {
        let value = self.value().clone();
        self.tape.constant(value)
    }
}

/// Per-plane mean and floored population standard deviation.
pub(crate) fn channel_moments(data: &[f64], hw: usize) -> (Vec<f64>, Vec<f64>) {
    data.chunks(hw)
        .map(|plane| {
            let mean = plane.iter().sum::<f64>() / hw as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            (mean, var.sqrt().max(STD_FLOOR))
        })
        .unzip()
}
