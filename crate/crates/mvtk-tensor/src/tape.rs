//! Reverse-mode autodiff over a linear tape of recorded operations. Backward
//! traversal visits nodes in exact reverse recording order; taking `self` by
//! value clears the tape once gradients are produced.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::kernels as k;
use crate::tensor::Tensor;

pub type Var = usize;

#[derive(Debug, Clone)]
pub enum Op<T> {
    Leaf {
        requires_grad: bool,
    },
    Conv2d {
        stride: usize,
        padding: usize,
        groups: usize,
    },
    Linear,
    Matmul2,
    Bmm {
        ta: bool,
        tb: bool,
    },
    Add,
    Sub,
    Mul,
    Scale(T),
    Silu,
    Sigmoid,
    Relu,
    Softmax {
        axis: usize,
    },
    BatchNorm {
        eps: f64,
        mean: Tensor<T>,
        invstd: Tensor<T>,
    },
    LayerNorm {
        eps: f64,
        start_axis: usize,
    },
    GroupNorm {
        eps: f64,
        groups: usize,
    },
    GroupNormTokens {
        eps: f64,
        batch: usize,
    },
    GlobalAvgPool,
    Unfold {
        ph: usize,
        pw: usize,
    },
    Fold {
        ph: usize,
        pw: usize,
    },
    ConcatChannels,
    SliceTokens {
        offset: usize,
    },
    HeadSplit {
        heads: usize,
    },
    HeadMerge {
        heads: usize,
    },
    MulBcastTokens,
    Reshape,
    SumAll,
    CrossEntropy {
        targets: Vec<usize>,
        probs: Tensor<T>,
    },
    Dropout {
        mask: Tensor<T>,
    },
}

struct Node<T> {
    op: Op<T>,
    parents: Vec<Var>,
    value: Tensor<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v].as_ref()
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Tape<T> {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v].value
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Op::Leaf { requires_grad }, vec![], value)
    }

    pub fn push(&mut self, op: Op<T>, parents: Vec<Var>, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op, parents, value });
        self.nodes.len() - 1
    }

    /// Backpropagate from a scalar loss. Consumes the tape (recording is
    /// cleared); every reachable leaf with `requires_grad` gets a gradient.
    pub fn backward(self, loss: Var) -> Result<Grads<T>> {
        let loss_val = &self.nodes[loss].value;
        if loss_val.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss_val.shape(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::full(loss_val.shape(), T::ONE));

        for id in (0..=loss).rev() {
            let Some(dy) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            let pv = |i: usize| &self.nodes[node.parents[i]].value;
            let pgrads: Vec<(Var, Tensor<T>)> = match &node.op {
                Op::Leaf { requires_grad } => {
                    if *requires_grad {
                        grads[id] = Some(dy);
                    }
                    continue;
                }
                Op::Conv2d {
                    stride,
                    padding,
                    groups,
                } => {
                    let x = pv(0);
                    let w = pv(1);
                    let mut out = vec![
                        (
                            node.parents[0],
                            k::conv2d_dx(&dy, w, x.shape(), *stride, *padding, *groups)?,
                        ),
                        (
                            node.parents[1],
                            k::conv2d_dw(&dy, x, w.shape(), *stride, *padding, *groups)?,
                        ),
                    ];
                    if node.parents.len() == 3 {
                        out.push((node.parents[2], k::conv2d_db(&dy)));
                    }
                    out
                }
                Op::Linear => {
                    let x = pv(0);
                    let w = pv(1);
                    let mut out = vec![
                        (node.parents[0], k::linear_dx(&dy, w, x.shape())?),
                        (node.parents[1], k::linear_dw(&dy, x, w.shape())?),
                    ];
                    if node.parents.len() == 3 {
                        out.push((node.parents[2], k::linear_db(&dy)));
                    }
                    out
                }
                Op::Matmul2 => {
                    let (a, b) = (pv(0), pv(1));
                    let (sa, sb) = (a.shape(), b.shape());
                    let (m, kk, n) = (sa.n(), sa.c(), sb.c());
                    let mut da = vec![T::ZERO; m * kk];
                    k::gemm_nt(dy.data(), b.data(), &mut da, m, n, kk);
                    let mut db = vec![T::ZERO; kk * n];
                    k::gemm_tn(a.data(), dy.data(), &mut db, kk, m, n);
                    vec![
                        (node.parents[0], Tensor::new(sa, da)?),
                        (node.parents[1], Tensor::new(sb, db)?),
                    ]
                }
                Op::Bmm { ta, tb } => {
                    let (a, b) = (pv(0), pv(1));
                    let (da, db) = bmm_vjp(&dy, a, b, *ta, *tb)?;
                    vec![(node.parents[0], da), (node.parents[1], db)]
                }
                Op::Add => vec![(node.parents[0], dy.clone()), (node.parents[1], dy)],
                Op::Sub => vec![
                    (node.parents[0], dy.clone()),
                    (node.parents[1], k::scale(&dy, -T::ONE)),
                ],
                Op::Mul => vec![
                    (node.parents[0], k::mul(&dy, pv(1))?),
                    (node.parents[1], k::mul(&dy, pv(0))?),
                ],
                Op::Scale(s) => vec![(node.parents[0], k::scale(&dy, *s))],
                Op::Silu => vec![(node.parents[0], k::silu_vjp(&dy, pv(0)))],
                Op::Sigmoid => vec![(node.parents[0], k::sigmoid_vjp(&dy, pv(0)))],
                Op::Relu => vec![(node.parents[0], k::relu_vjp(&dy, pv(0)))],
                Op::Softmax { axis } => {
                    vec![(node.parents[0], k::softmax_vjp(&dy, &node.value, *axis))]
                }
                Op::BatchNorm { mean, invstd, .. } => {
                    let (dx, dgamma, dbeta) =
                        k::batchnorm_train_vjp(&dy, pv(0), pv(1), mean, invstd);
                    vec![
                        (node.parents[0], dx),
                        (node.parents[1], dgamma),
                        (node.parents[2], dbeta),
                    ]
                }
                Op::LayerNorm { eps, start_axis } => {
                    let (dx, dgamma, dbeta) =
                        k::layernorm_vjp(&dy, pv(0), pv(1), *eps, *start_axis);
                    vec![
                        (node.parents[0], dx),
                        (node.parents[1], dgamma),
                        (node.parents[2], dbeta),
                    ]
                }
                Op::GroupNorm { eps, groups } => {
                    let (dx, dgamma, dbeta) = k::groupnorm_vjp(&dy, pv(0), *groups, pv(1), *eps);
                    vec![
                        (node.parents[0], dx),
                        (node.parents[1], dgamma),
                        (node.parents[2], dbeta),
                    ]
                }
                Op::GroupNormTokens { eps, batch } => {
                    let (dx, dgamma, dbeta) =
                        k::groupnorm_tokens_vjp(&dy, pv(0), *batch, pv(1), *eps);
                    vec![
                        (node.parents[0], dx),
                        (node.parents[1], dgamma),
                        (node.parents[2], dbeta),
                    ]
                }
                Op::GlobalAvgPool => vec![(
                    node.parents[0],
                    k::global_avg_pool_vjp(&dy, pv(0).shape()),
                )],
                Op::Unfold { ph, pw } => {
                    let xs = pv(0).shape();
                    vec![(node.parents[0], k::fold(&dy, *ph, *pw, xs.h(), xs.w())?)]
                }
                Op::Fold { ph, pw } => vec![(node.parents[0], k::unfold(&dy, *ph, *pw)?)],
                Op::ConcatChannels => {
                    let ca = pv(0).shape().c();
                    let cb = pv(1).shape().c();
                    vec![
                        (node.parents[0], k::slice_channels(&dy, 0, ca)),
                        (node.parents[1], k::slice_channels(&dy, ca, cb)),
                    ]
                }
                Op::SliceTokens { offset } => vec![(
                    node.parents[0],
                    k::slice_tokens_vjp(&dy, pv(0).shape(), *offset),
                )],
                Op::HeadSplit { heads } => {
                    vec![(node.parents[0], k::head_merge(&dy, *heads)?)]
                }
                Op::HeadMerge { heads } => {
                    vec![(node.parents[0], k::head_split(&dy, *heads)?)]
                }
                Op::MulBcastTokens => {
                    let (dv, dctx) = k::mul_bcast_tokens_vjp(&dy, pv(0), pv(1));
                    vec![(node.parents[0], dv), (node.parents[1], dctx)]
                }
                Op::Reshape => vec![(node.parents[0], dy.reshape(pv(0).shape())?)],
                Op::SumAll => vec![(
                    node.parents[0],
                    Tensor::full(pv(0).shape(), dy.data()[0]),
                )],
                Op::CrossEntropy { targets, probs } => vec![(
                    node.parents[0],
                    k::cross_entropy_vjp(&dy, probs, targets),
                )],
                Op::Dropout { mask } => vec![(node.parents[0], k::mul(&dy, mask)?)],
            };
            for (pid, g) in pgrads {
                accumulate(&mut grads[pid], g);
            }
        }
        Ok(Grads { grads })
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            let data = acc.data_mut();
            for (a, &b) in data.iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
}

fn bmm_vjp<T: Element>(
    dy: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    ta: bool,
    tb: bool,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (sa, sb) = (a.shape(), b.shape());
    let bsz = sa.n();
    let (m, kk) = if ta { (sa.h(), sa.c()) } else { (sa.c(), sa.h()) };
    let n = if tb { sb.c() } else { sb.h() };
    let mut da = vec![T::ZERO; a.numel()];
    let mut db = vec![T::ZERO; b.numel()];
    let (alen, blen, ylen) = (sa.c() * sa.h(), sb.c() * sb.h(), m * n);
    let (ad, bd, dyd) = (a.data(), b.data(), dy.data());
    for i in 0..bsz {
        let av = &ad[i * alen..(i + 1) * alen];
        let bv = &bd[i * blen..(i + 1) * blen];
        let dyv = &dyd[i * ylen..(i + 1) * ylen];
        let dav = &mut da[i * alen..(i + 1) * alen];
        let dbv = &mut db[i * blen..(i + 1) * blen];
        match (ta, tb) {
            (false, false) => {
                k::gemm_nt(dyv, bv, dav, m, n, kk);
                k::gemm_tn(av, dyv, dbv, kk, m, n);
            }
            (false, true) => {
                k::gemm_nn(dyv, bv, dav, m, n, kk);
                k::gemm_tn(dyv, av, dbv, n, m, kk);
            }
            (true, false) => {
                k::gemm_nt(bv, dyv, dav, kk, n, m);
                k::gemm_nn(av, dyv, dbv, kk, m, n);
            }
            (true, true) => unreachable!(),
        }
    }
    Ok((Tensor::new(sa, da)?, Tensor::new(sb, db)?))
}
