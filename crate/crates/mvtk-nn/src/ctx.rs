//! Execution contexts. Layers are written once against [`Cx`]; `EvalCx` runs
//! plain inference (optionally counting multiply-accumulates), `TrainCx`
//! records a tape for backward and switches batchnorm to per-batch statistics.

use std::cell::Cell;

use mvtk_tensor::kernels as k;
use mvtk_tensor::tape::{Op, Tape, Var};
use mvtk_tensor::{Element, Result, Shape, Tensor};

use crate::layers::BnParams;

pub const NORM_EPS: f64 = 1e-5;

pub trait Cx<T: Element> {
    type V: Clone;

    fn param(&mut self, name: &str, t: &Tensor<T>) -> Self::V;
    fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T>;
    fn training(&self) -> bool;

    fn shape(&self, v: &Self::V) -> Shape {
        self.value(v).shape()
    }

    fn conv2d(
        &mut self,
        x: &Self::V,
        w: &Self::V,
        b: Option<&Self::V>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self::V>;
    fn linear(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>) -> Result<Self::V>;
    fn bmm(&mut self, a: &Self::V, b: &Self::V, ta: bool, tb: bool) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, x: &Self::V, s: f64) -> Self::V;
    fn silu(&mut self, x: &Self::V) -> Self::V;
    fn sigmoid(&mut self, x: &Self::V) -> Self::V;
    fn relu(&mut self, x: &Self::V) -> Self::V;
    fn softmax(&mut self, x: &Self::V, axis: usize) -> Self::V;
    fn batchnorm(&mut self, x: &Self::V, prefix: &str, bn: &BnParams<T>) -> Result<Self::V>;
    fn layernorm(&mut self, x: &Self::V, g: &Self::V, b: &Self::V, start_axis: usize)
        -> Result<Self::V>;
    fn groupnorm_tokens(
        &mut self,
        x: &Self::V,
        g: &Self::V,
        b: &Self::V,
        batch: usize,
    ) -> Result<Self::V>;
    fn global_pool(&mut self, x: &Self::V) -> Self::V;
    fn unfold(&mut self, x: &Self::V, ph: usize, pw: usize) -> Result<Self::V>;
    fn fold(&mut self, x: &Self::V, ph: usize, pw: usize, h: usize, w: usize) -> Result<Self::V>;
    fn concat_channels(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn slice_tokens(&mut self, x: &Self::V, offset: usize, len: usize) -> Self::V;
    fn head_split(&mut self, x: &Self::V, heads: usize) -> Result<Self::V>;
    fn head_merge(&mut self, x: &Self::V, heads: usize) -> Result<Self::V>;
    fn mul_bcast_tokens(&mut self, v: &Self::V, ctx: &Self::V) -> Result<Self::V>;
    fn reshape(&mut self, x: &Self::V, s: Shape) -> Result<Self::V>;
    fn sum_all(&mut self, x: &Self::V) -> Self::V;
    fn cross_entropy(&mut self, logits: &Self::V, targets: &[usize]) -> Result<Self::V>;
}

// ---------------------------------------------------------------------------

/// Inference context. Batchnorm uses stored running statistics.
#[derive(Default)]
pub struct EvalCx {
    /// When set, forward kernels count one increment per multiply performed by
    /// the zero-padded conv/linear/matmul formulation.
    pub macs: Option<Cell<u64>>,
}

impl EvalCx {
    pub fn new() -> EvalCx {
        EvalCx { macs: None }
    }

    pub fn counting() -> EvalCx {
        EvalCx {
            macs: Some(Cell::new(0)),
        }
    }

    pub fn mac_count(&self) -> u64 {
        self.macs.as_ref().map(|c| c.get()).unwrap_or(0)
    }

    fn ctr(&self) -> Option<&Cell<u64>> {
        self.macs.as_ref()
    }
}

impl<T: Element> Cx<T> for EvalCx {
    type V = Tensor<T>;

    fn param(&mut self, _name: &str, t: &Tensor<T>) -> Tensor<T> {
        t.clone()
    }
    fn input(&mut self, t: Tensor<T>, _requires_grad: bool) -> Tensor<T> {
        t
    }
    fn value<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }
    fn training(&self) -> bool {
        false
    }

    fn conv2d(
        &mut self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Tensor<T>> {
        k::conv2d(x, w, b, stride, padding, groups, self.ctr())
    }
    fn linear(&mut self, x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        k::linear(x, w, b, self.ctr())
    }
    fn bmm(&mut self, a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
        k::bmm(a, b, ta, tb, self.ctr())
    }
    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        k::add(a, b)
    }
    fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        k::mul(a, b)
    }
    fn scale(&mut self, x: &Tensor<T>, s: f64) -> Tensor<T> {
        k::scale(x, T::from_f64(s))
    }
    fn silu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        k::silu(x)
    }
    fn sigmoid(&mut self, x: &Tensor<T>) -> Tensor<T> {
        k::sigmoid(x)
    }
    fn relu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        k::relu(x)
    }
    fn softmax(&mut self, x: &Tensor<T>, axis: usize) -> Tensor<T> {
        k::softmax(x, axis)
    }
    fn batchnorm(&mut self, x: &Tensor<T>, _prefix: &str, bn: &BnParams<T>) -> Result<Tensor<T>> {
        k::batchnorm_infer(x, &bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var, NORM_EPS)
    }
    fn layernorm(
        &mut self,
        x: &Tensor<T>,
        g: &Tensor<T>,
        b: &Tensor<T>,
        start_axis: usize,
    ) -> Result<Tensor<T>> {
        k::layernorm(x, g, b, NORM_EPS, start_axis)
    }
    fn groupnorm_tokens(
        &mut self,
        x: &Tensor<T>,
        g: &Tensor<T>,
        b: &Tensor<T>,
        batch: usize,
    ) -> Result<Tensor<T>> {
        k::groupnorm_tokens(x, batch, g, b, NORM_EPS)
    }
    fn global_pool(&mut self, x: &Tensor<T>) -> Tensor<T> {
        k::global_avg_pool(x)
    }
    fn unfold(&mut self, x: &Tensor<T>, ph: usize, pw: usize) -> Result<Tensor<T>> {
        k::unfold(x, ph, pw)
    }
    fn fold(&mut self, x: &Tensor<T>, ph: usize, pw: usize, h: usize, w: usize) -> Result<Tensor<T>> {
        k::fold(x, ph, pw, h, w)
    }
    fn concat_channels(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        k::concat_channels(a, b)
    }
    fn slice_tokens(&mut self, x: &Tensor<T>, offset: usize, len: usize) -> Tensor<T> {
        k::slice_tokens(x, offset, len)
    }
    fn head_split(&mut self, x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
        k::head_split(x, heads)
    }
    fn head_merge(&mut self, x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
        k::head_merge(x, heads)
    }
    fn mul_bcast_tokens(&mut self, v: &Tensor<T>, ctx: &Tensor<T>) -> Result<Tensor<T>> {
        k::mul_bcast_tokens(v, ctx)
    }
    fn reshape(&mut self, x: &Tensor<T>, s: Shape) -> Result<Tensor<T>> {
        x.reshape(s)
    }
    fn sum_all(&mut self, x: &Tensor<T>) -> Tensor<T> {
        k::sum_all(x)
    }
    fn cross_entropy(&mut self, logits: &Tensor<T>, targets: &[usize]) -> Result<Tensor<T>> {
        Ok(k::cross_entropy(logits, targets)?.0)
    }
}

// ---------------------------------------------------------------------------

/// Deferred running-statistic update produced by a train-mode batchnorm.
pub struct BnUpdate<T> {
    pub prefix: String,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

/// Training context: records every op on a tape, registers parameters as
/// named leaves, and collects batchnorm statistic updates for the caller to
/// apply after the step.
pub struct TrainCx<T: Element> {
    pub tape: Tape<T>,
    trace: Vec<(String, Var)>,
    pub bn_updates: Vec<BnUpdate<T>>,
    seed: u64,
}

impl<T: Element> TrainCx<T> {
    pub fn new(seed: u64) -> TrainCx<T> {
        TrainCx {
            tape: Tape::new(),
            trace: Vec::new(),
            bn_updates: Vec::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn trace(&self) -> &[(String, Var)] {
        &self.trace
    }

    /// Run backward and return gradients keyed by parameter name.
    pub fn backward(self, loss: Var) -> Result<(Vec<(String, Tensor<T>)>, Vec<BnUpdate<T>>)> {
        let grads = self.tape.backward(loss)?;
        let named = self
            .trace
            .into_iter()
            .map(|(name, var)| {
                let g = grads
                    .get(var)
                    .cloned()
                    .unwrap_or_else(|| panic!("parameter {name} unreachable from loss"));
                (name, g)
            })
            .collect();
        Ok((named, self.bn_updates))
    }
}

impl<T: Element> Cx<T> for TrainCx<T> {
    type V = Var;

    fn param(&mut self, name: &str, t: &Tensor<T>) -> Var {
        let v = self.tape.leaf(t.clone(), true);
        self.trace.push((name.to_string(), v));
        v
    }
    fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.tape.leaf(t, requires_grad)
    }
    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        self.tape.value(*v)
    }
    fn training(&self) -> bool {
        true
    }

    fn conv2d(
        &mut self,
        x: &Var,
        w: &Var,
        b: Option<&Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let y = k::conv2d(
            self.tape.value(*x),
            self.tape.value(*w),
            b.map(|v| self.tape.value(*v)),
            stride,
            padding,
            groups,
            None,
        )?;
        let mut parents = vec![*x, *w];
        if let Some(b) = b {
            parents.push(*b);
        }
        Ok(self.tape.push(
            Op::Conv2d {
                stride,
                padding,
                groups,
            },
            parents,
            y,
        ))
    }
    fn linear(&mut self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let y = k::linear(
            self.tape.value(*x),
            self.tape.value(*w),
            b.map(|v| self.tape.value(*v)),
            None,
        )?;
        let mut parents = vec![*x, *w];
        if let Some(b) = b {
            parents.push(*b);
        }
        Ok(self.tape.push(Op::Linear, parents, y))
    }
    fn bmm(&mut self, a: &Var, b: &Var, ta: bool, tb: bool) -> Result<Var> {
        let y = k::bmm(self.tape.value(*a), self.tape.value(*b), ta, tb, None)?;
        Ok(self.tape.push(Op::Bmm { ta, tb }, vec![*a, *b], y))
    }
    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = k::add(self.tape.value(*a), self.tape.value(*b))?;
        Ok(self.tape.push(Op::Add, vec![*a, *b], y))
    }
    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = k::mul(self.tape.value(*a), self.tape.value(*b))?;
        Ok(self.tape.push(Op::Mul, vec![*a, *b], y))
    }
    fn scale(&mut self, x: &Var, s: f64) -> Var {
        let sv = T::from_f64(s);
        let y = k::scale(self.tape.value(*x), sv);
        self.tape.push(Op::Scale(sv), vec![*x], y)
    }
    fn silu(&mut self, x: &Var) -> Var {
        let y = k::silu(self.tape.value(*x));
        self.tape.push(Op::Silu, vec![*x], y)
    }
    fn sigmoid(&mut self, x: &Var) -> Var {
        let y = k::sigmoid(self.tape.value(*x));
        self.tape.push(Op::Sigmoid, vec![*x], y)
    }
    fn relu(&mut self, x: &Var) -> Var {
        let y = k::relu(self.tape.value(*x));
        self.tape.push(Op::Relu, vec![*x], y)
    }
    fn softmax(&mut self, x: &Var, axis: usize) -> Var {
        let y = k::softmax(self.tape.value(*x), axis);
        self.tape.push(Op::Softmax { axis }, vec![*x], y)
    }
    fn batchnorm(&mut self, x: &Var, prefix: &str, bn: &BnParams<T>) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gamma"), &bn.gamma);
        let b = self.param(&format!("{prefix}.beta"), &bn.beta);
        let (y, mean, invstd) = k::batchnorm_train(
            self.tape.value(*x),
            self.tape.value(g),
            self.tape.value(b),
            NORM_EPS,
        )?;
        // recover the batch variance from invstd for the running update
        let mut var = invstd.clone();
        for v in var.data_mut() {
            let iv = v.to_f64();
            *v = T::from_f64(1.0 / (iv * iv) - NORM_EPS);
        }
        self.bn_updates.push(BnUpdate {
            prefix: prefix.to_string(),
            mean: mean.clone(),
            var,
        });
        Ok(self.tape.push(
            Op::BatchNorm {
                eps: NORM_EPS,
                mean,
                invstd,
            },
            vec![*x, g, b],
            y,
        ))
    }
    fn layernorm(&mut self, x: &Var, g: &Var, b: &Var, start_axis: usize) -> Result<Var> {
        let y = k::layernorm(
            self.tape.value(*x),
            self.tape.value(*g),
            self.tape.value(*b),
            NORM_EPS,
            start_axis,
        )?;
        Ok(self.tape.push(
            Op::LayerNorm {
                eps: NORM_EPS,
                start_axis,
            },
            vec![*x, *g, *b],
            y,
        ))
    }
    fn groupnorm_tokens(&mut self, x: &Var, g: &Var, b: &Var, batch: usize) -> Result<Var> {
        let y = k::groupnorm_tokens(
            self.tape.value(*x),
            batch,
            self.tape.value(*g),
            self.tape.value(*b),
            NORM_EPS,
        )?;
        Ok(self.tape.push(
            Op::GroupNormTokens {
                eps: NORM_EPS,
                batch,
            },
            vec![*x, *g, *b],
            y,
        ))
    }
    fn global_pool(&mut self, x: &Var) -> Var {
        let y = k::global_avg_pool(self.tape.value(*x));
        self.tape.push(Op::GlobalAvgPool, vec![*x], y)
    }
    fn unfold(&mut self, x: &Var, ph: usize, pw: usize) -> Result<Var> {
        let y = k::unfold(self.tape.value(*x), ph, pw)?;
        Ok(self.tape.push(Op::Unfold { ph, pw }, vec![*x], y))
    }
    fn fold(&mut self, x: &Var, ph: usize, pw: usize, h: usize, w: usize) -> Result<Var> {
        let y = k::fold(self.tape.value(*x), ph, pw, h, w)?;
        Ok(self.tape.push(Op::Fold { ph, pw }, vec![*x], y))
    }
    fn concat_channels(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = k::concat_channels(self.tape.value(*a), self.tape.value(*b))?;
        Ok(self.tape.push(Op::ConcatChannels, vec![*a, *b], y))
    }
    fn slice_tokens(&mut self, x: &Var, offset: usize, len: usize) -> Var {
        let y = k::slice_tokens(self.tape.value(*x), offset, len);
        self.tape.push(Op::SliceTokens { offset }, vec![*x], y)
    }
    fn head_split(&mut self, x: &Var, heads: usize) -> Result<Var> {
        let y = k::head_split(self.tape.value(*x), heads)?;
        Ok(self.tape.push(Op::HeadSplit { heads }, vec![*x], y))
    }
    fn head_merge(&mut self, x: &Var, heads: usize) -> Result<Var> {
        let y = k::head_merge(self.tape.value(*x), heads)?;
        Ok(self.tape.push(Op::HeadMerge { heads }, vec![*x], y))
    }
    fn mul_bcast_tokens(&mut self, v: &Var, ctx: &Var) -> Result<Var> {
        let y = k::mul_bcast_tokens(self.tape.value(*v), self.tape.value(*ctx))?;
        Ok(self.tape.push(Op::MulBcastTokens, vec![*v, *ctx], y))
    }
    fn reshape(&mut self, x: &Var, s: Shape) -> Result<Var> {
        let y = self.tape.value(*x).reshape(s)?;
        Ok(self.tape.push(Op::Reshape, vec![*x], y))
    }
    fn sum_all(&mut self, x: &Var) -> Var {
        let y = k::sum_all(self.tape.value(*x));
        self.tape.push(Op::SumAll, vec![*x], y)
    }
    fn cross_entropy(&mut self, logits: &Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = k::cross_entropy(self.tape.value(*logits), targets)?;
        Ok(self.tape.push(
            Op::CrossEntropy {
                targets: targets.to_vec(),
                probs,
            },
            vec![*logits],
            loss,
        ))
    }
}
