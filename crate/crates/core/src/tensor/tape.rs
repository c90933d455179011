use super::kernels::{self, ConvParams, PoolParams};
use super::ops::{self, ActivationKind, NormCache, NormKind};
use super::{Element, FlopCount, Result, Shape, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an op implemented outside the tape.
pub trait CustomOp<T: Element> {
    fn name(&self) -> &'static str;

    /// One entry per input; `None` means no gradient flows to that input.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Element> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        p: ConvParams,
    },
    Pool {
        x: Var,
        p: PoolParams,
        argmax: Vec<u32>,
    },
    Sigmoid(Var),
    Silu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Norm {
        x: Var,
        scale: Var,
        shift: Var,
        kind: NormKind,
        cache: NormCache<T>,
        fixed: bool,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Upsample(Var),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics observed by a training-mode batch norm, used to
/// update running statistics outside the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

/// Records ops in execution order; `backward` replays them in reverse once.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients keyed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(TensorError::Usage(
                "tape already consumed by backward".into(),
            ));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Operation count of everything recorded so far, under the same
    /// convention as the analytic block counts.
    pub fn flop_tally(&self) -> FlopCount {
        let mut f = FlopCount::default();
        for node in &self.nodes {
            let out = node.value.numel() as u64;
            match &node.op {
                Op::Conv { w, .. } => {
                    let ws = self.nodes[w.0].value.shape();
                    f.conv += 2 * (ws.c * ws.h * ws.w) as u64 * out;
                }
                Op::MatMul(a, _) => f.matmul += 2 * self.nodes[a.0].value.shape().w as u64 * out,
                Op::Pool { .. }
                | Op::Sigmoid(_)
                | Op::Silu(_)
                | Op::Softmax { .. }
                | Op::Norm { .. }
                | Op::Add(..)
                | Op::Mul(..)
                | Op::Scale(..) => f.pointwise += out,
                Op::Leaf
                | Op::Concat(_)
                | Op::Slice { .. }
                | Op::Upsample(_)
                | Op::Reshape(_)
                | Op::Sum(_)
                | Op::Custom { .. } => {}
            }
        }
        f
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, p: ConvParams) -> Result<Var> {
        let out = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), p)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Conv { x, w, b, p }, &inputs)
    }

    pub fn pool(&mut self, x: Var, p: PoolParams) -> Result<Var> {
        let (out, argmax) = kernels::pool_forward(self.value(x), p)?;
        self.push(out, Op::Pool { x, p, argmax }, &[x])
    }

    pub fn activation(&mut self, x: Var, kind: ActivationKind) -> Result<Var> {
        let out = ops::activation(self.value(x), kind)?;
        let op = match kind {
            ActivationKind::Sigmoid => Op::Sigmoid(x),
            ActivationKind::Silu => Op::Silu(x),
            ActivationKind::Softmax(axis) => Op::Softmax { x, axis },
        };
        self.push(out, op, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, ActivationKind::Sigmoid)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, ActivationKind::Silu)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.activation(x, ActivationKind::Softmax(axis))
    }

    /// Training-mode batch norm. Returns the batch statistics alongside.
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        eps: f64,
    ) -> Result<(Var, BnStats)> {
        let (out, cache) = ops::normalize_train(
            self.value(x),
            NormKind::BatchTrain,
            self.value(scale),
            self.value(shift),
            eps,
        )?;
        let count = {
            let s = self.value(x).shape();
            (s.n * s.plane()) as f64
        };
        let bessel = if count > 1.0 {
            count / (count - 1.0)
        } else {
            1.0
        };
        let stats = BnStats {
            mean: cache.mean.clone(),
            var: cache.var.iter().map(|v| v * bessel).collect(),
        };
        let op = Op::Norm {
            x,
            scale,
            shift,
            kind: NormKind::BatchTrain,
            cache,
            fixed: false,
        };
        Ok((self.push(out, op, &[x, scale, shift])?, stats))
    }

    /// Inference-mode batch norm over stored statistics (treated as constants).
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var> {
        let (out, cache) = ops::batch_norm_eval(
            self.value(x),
            self.value(scale),
            self.value(shift),
            running_mean,
            running_var,
            eps,
        )?;
        let op = Op::Norm {
            x,
            scale,
            shift,
            kind: NormKind::BatchTrain,
            cache,
            fixed: true,
        };
        self.push(out, op, &[x, scale, shift])
    }

    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        scale: Var,
        shift: Var,
        eps: f64,
    ) -> Result<Var> {
        let kind = NormKind::GroupNorm(groups);
        let (out, cache) = ops::normalize_train(
            self.value(x),
            kind,
            self.value(scale),
            self.value(shift),
            eps,
        )?;
        let op = Op::Norm {
            x,
            scale,
            shift,
            kind,
            cache,
            fixed: false,
        };
        self.push(out, op, &[x, scale, shift])
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_channels(&vals)?;
        self.push(out, Op::Concat(xs.to_vec()), xs)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = ops::slice_channels(self.value(x), start, len)?;
        self.push(out, Op::Slice { x, start }, &[x])
    }

    pub fn split(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        if sizes.iter().sum::<usize>() != self.value(x).shape().c {
            return Err(TensorError::dim(
                "split",
                format!("sizes {sizes:?} vs {}", self.value(x).shape()),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice_channels(x, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let out = ops::upsample_nearest_2x(self.value(x));
        self.push(out, Op::Upsample(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x])
    }

    pub fn group_fold(&mut self, x: Var, groups: usize) -> Result<Var> {
        let out = ops::group_fold(self.value(x), groups)?;
        self.push(out, Op::Reshape(x), &[x])
    }

    pub fn group_unfold(&mut self, x: Var, groups: usize) -> Result<Var> {
        let out = ops::group_unfold(self.value(x), groups)?;
        self.push(out, Op::Reshape(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let k = T::from_f64(k);
        let out = self.value(x).map(|v| v * k).ensure_finite("scale")?;
        self.push(out, Op::Scale(x, k), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// Sum of all elements as a `(1,1,1,1)` scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = T::from_f64(self.value(x).sum_f64());
        let out = Tensor::scalar(s).ensure_finite("sum")?;
        self.push(out, Op::Sum(x), &[x])
    }

    /// Records a value computed outside the tape with its own backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Result<Var> {
        let name = op.name();
        let output = output.ensure_finite(name)?;
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// Reverse-mode accumulation from a scalar output. Consumes the
    /// recording: a second call is an error.
    pub fn backward(&mut self, output: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::Usage(
                "backward already ran on this tape".into(),
            ));
        }
        if output.0 >= self.nodes.len() {
            return Err(TensorError::Usage(
                "output not recorded on this tape".into(),
            ));
        }
        if self.nodes[output.0].value.shape() != Shape::scalar() {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar output, got {}",
                self.nodes[output.0].value.shape()
            )));
        }
        if !self.nodes[output.0].requires_grad {
            return Err(TensorError::Usage(
                "output is detached from every parameter".into(),
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (v, dg) in self.input_grads(node, &g)? {
                accumulate(&mut grads, &self.nodes, v, dg)?;
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            } else if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn input_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, p } => {
                let cg = kernels::conv2d_backward(val(*x), val(*w), g, *p, needs(*x), b.is_some())?;
                if let Some(dx) = cg.input {
                    out.push((*x, dx));
                }
                out.push((*w, cg.weight));
                if let (Some(b), Some(db)) = (b, cg.bias) {
                    let db = db.reshape(val(*b).shape())?;
                    out.push((*b, db));
                }
            }
            Op::Pool { x, p, argmax } => {
                out.push((*x, kernels::pool_backward(val(*x).shape(), g, *p, argmax)));
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let d = zip_map(y, g, |s, gv| gv * s * (T::one() - s));
                out.push((*x, d));
            }
            Op::Silu(x) => {
                let d = zip_map(val(*x), g, |xv, gv| {
                    let s = ops::sigmoid(xv);
                    gv * s * (T::one() + xv * (T::one() - s))
                });
                out.push((*x, d));
            }
            Op::Softmax { x, axis } => {
                out.push((*x, ops::softmax_backward(&node.value, g, *axis)));
            }
            Op::Norm {
                x,
                scale,
                shift,
                kind,
                cache,
                fixed,
            } => {
                let (dx, dscale, dshift) =
                    ops::normalize_backward(*kind, cache, val(*scale), g, *fixed);
                out.push((*x, dx));
                out.push((*scale, dscale.reshape(val(*scale).shape())?));
                out.push((*shift, dshift.reshape(val(*shift).shape())?));
            }
            Op::Concat(xs) => {
                let mut start = 0;
                for &x in xs {
                    let c = val(x).shape().c;
                    if needs(x) {
                        out.push((x, g.channels(start, c)));
                    }
                    start += c;
                }
            }
            Op::Slice { x, start } => {
                let s = val(*x).shape();
                let len = g.shape().c;
                let mut dx = Tensor::zeros(s);
                let plane = s.plane();
                for n in 0..s.n {
                    let dst = s.index(n, *start, 0, 0);
                    dx.data_mut()[dst..dst + len * plane]
                        .copy_from_slice(&g.data()[n * len * plane..(n + 1) * len * plane]);
                }
                out.push((*x, dx));
            }
            Op::Upsample(x) => out.push((*x, ops::upsample_backward(val(*x).shape(), g))),
            Op::Reshape(x) => out.push((*x, g.clone().reshape(val(*x).shape())?)),
            Op::Add(a, b) => {
                out.push((*a, ops::reduce_to(g, val(*a).shape())));
                out.push((*b, ops::reduce_to(g, val(*b).shape())));
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let ga = ops::broadcast_binary(g, val(*b), |x, y| x * y)?;
                    out.push((*a, ops::reduce_to(&ga, val(*a).shape())));
                }
                if needs(*b) {
                    let gb = ops::broadcast_binary(g, val(*a), |x, y| x * y)?;
                    out.push((*b, ops::reduce_to(&gb, val(*b).shape())));
                }
            }
            Op::Scale(x, k) => out.push((*x, g.map(|v| v * *k))),
            Op::MatMul(a, b) => {
                let (da, db) = ops::matmul_backward(val(*a), val(*b), g);
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::Sum(x) => out.push((*x, Tensor::full(val(*x).shape(), g.item()))),
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let gs = op.backward(&ins, &node.value, g);
                if gs.len() != inputs.len() {
                    return Err(TensorError::Usage(format!(
                        "{} returned {} gradients for {} inputs",
                        op.name(),
                        gs.len(),
                        inputs.len()
                    )));
                }
                for (&v, dg) in inputs.iter().zip(gs) {
                    if let Some(dg) = dg {
                        out.push((v, dg));
                    }
                }
            }
        }
        Ok(out)
    }
}

fn zip_map<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

fn accumulate<T: Element>(
    grads: &mut [Option<Tensor<T>>],
    nodes: &[Node<T>],
    v: Var,
    g: Tensor<T>,
) -> Result<()> {
    if !nodes[v.0].requires_grad {
        return Ok(());
    }
    if g.shape() != nodes[v.0].value.shape() {
        return Err(TensorError::dim(
            "backward",
            format!(
                "gradient {} for value {}",
                g.shape(),
                nodes[v.0].value.shape()
            ),
        ));
    }
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        slot => *slot = Some(g),
    }
    Ok(())
}
