//! Reverse-mode differentiation by tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with
//! the forward value. [`Graph::backward`] walks the record in reverse and
//! applies each operation's hand-written adjoint from [`crate::ops`].

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops::{self, MatmulPlan};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Adjoint of a user-supplied operation: `(inputs, output, output_grad) -> input grads`.
pub type CustomBackward = fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    DivScalar(Var, f64),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        plan: MatmulPlan,
    },
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Gelu(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    IndexSelect {
        x: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    SumAxis(Var, usize),
    MaxAxis {
        x: Var,
        axis: usize,
        arg: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Matmul FLOPs (two per multiply-add) tallied by named scope.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopTally {
    pub by_scope: BTreeMap<String, u64>,
}

impl FlopTally {
    pub fn get(&self, scope: &str) -> u64 {
        self.by_scope.get(scope).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.by_scope.values().sum()
    }
}

pub struct Graph<'p> {
    nodes: Vec<Node>,
    params: Option<&'p ParamStore>,
    bound: BTreeMap<String, Var>,
    grad_enabled: bool,
    scope: String,
    flops: FlopTally,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A graph without parameters, recording gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            bound: BTreeMap::new(),
            grad_enabled: true,
            scope: String::from("other"),
            flops: FlopTally::default(),
        }
    }

    /// A graph that binds parameters from `params` and records gradients for them.
    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    /// A forward-only graph; parameters are bound as constants.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sets the FLOP-accounting scope, returning the previous one.
    pub fn set_scope(&mut self, scope: &str) -> String {
        core::mem::replace(&mut self.scope, scope.to_string())
    }

    pub fn flops(&self) -> &FlopTally {
        &self.flops
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds (once) and returns the named parameter.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let store = self
            .params
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let value = store
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?
            .clone();
        let v = self.push(value, Op::Leaf, true);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Names of the parameters bound so far, with their variables.
    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // -- elementwise ---------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::sub(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = ops::affine(self.value(a), c, 0.0);
        let ng = self.ng(a);
        self.push(out, Op::Affine(a, c), ng)
    }

    pub fn div_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v / c);
        let ng = self.ng(a);
        self.push(out, Op::DivScalar(a, c), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = ops::gelu(self.value(a));
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    // -- linear algebra ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, true)
    }

    fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b), trans_b)?;
        let out = ops::matmul_planned(self.value(a), self.value(b), trans_b, &plan);
        let flops = 2 * plan.macs();
        *self.flops.by_scope.entry(self.scope.clone()).or_insert(0) += flops;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul { a, b, trans_b, plan }, ng))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(a), axis)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Softmax(a, axis), ng))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let out = ops::layer_norm(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            ops::LAYER_NORM_EPS,
        )?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta }, ng))
    }

    // -- structure -----------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat(&values, axis)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let out = ops::slice(self.value(x), axis, start, end)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Slice { x, axis, start }, ng))
    }

    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let out = ops::index_select(self.value(x), axis, indices)?;
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::IndexSelect {
                x,
                axis,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = ops::permute(self.value(x), perm)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Permute(x, perm.to_vec()), ng))
    }

    // -- reductions ----------------------------------------------------------

    /// Sum along `axis`, keeping it with extent one.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::sum_axis(self.value(x), axis)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::SumAxis(x, axis), ng))
    }

    /// Mean along `axis` as `sum / extent`, keeping the axis.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = self.shape(x).get(axis).copied().unwrap_or(1) as f64;
        let s = self.sum_axis(x, axis)?;
        Ok(self.div_scalar(s, len))
    }

    /// Max along `axis`, keeping it with extent one.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (out, arg) = ops::max_axis(self.value(x), axis)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::MaxAxis { x, axis, arg }, ng))
    }

    /// Mean cross-entropy of `[n, classes]` logits; returns a `[1]` scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy(self.value(logits), targets)?;
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Records an operation whose forward value was computed by the caller and
    /// whose adjoint is `backward`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, backward: CustomBackward) -> Var {
        let ng = inputs.iter().any(|&p| self.ng(p));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            ng,
        )
    }

    // -- differentiation -----------------------------------------------------

    /// Back-propagates from a scalar `root` with unit seed.
    pub fn backward(&self, root: Var) -> Gradients {
        let seed = Tensor::ones(self.shape(root));
        self.backward_with(root, seed)
    }

    /// Back-propagates `seed` (shaped like `root`) through the tape.
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), self.shape(root), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(t.data()) {
                        *e += x;
                    }
                }
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (ga, gb) = ops::add_backward(g, self.shape(*a), self.shape(*b));
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Sub(a, b) => {
                let (ga, gb) = ops::sub_backward(g, self.shape(*a), self.shape(*b));
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Mul(a, b) => {
                let (ga, gb) = ops::mul_backward(g, self.value(*a), self.value(*b));
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Affine(a, c) => acc(*a, g.map(|v| v * c)),
            Op::DivScalar(a, c) => acc(*a, g.map(|v| v / c)),
            Op::MatMul { a, b, trans_b, plan } => {
                let (ga, gb) = ops::matmul_backward(
                    g,
                    self.value(*a),
                    self.value(*b),
                    *trans_b,
                    plan,
                    self.ng(*a),
                    self.ng(*b),
                );
                if let Some(ga) = ga {
                    acc(*a, ga);
                }
                if let Some(gb) = gb {
                    acc(*b, gb);
                }
            }
            Op::Softmax(a, axis) => acc(*a, ops::softmax_backward(g, &node.value, *axis)),
            Op::LayerNorm { x, gamma, beta } => {
                let (gx, ggamma, gbeta) =
                    ops::layer_norm_backward(g, self.value(*x), self.value(*gamma), ops::LAYER_NORM_EPS);
                acc(*x, gx);
                acc(*gamma, ggamma);
                acc(*beta, gbeta);
            }
            Op::Gelu(a) => acc(*a, ops::gelu_backward(g, self.value(*a))),
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    let piece = ops::slice(g, *axis, start, start + len).expect("concat extents");
                    acc(p, piece);
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                acc(*x, ops::slice_backward(g, self.shape(*x), *axis, *start));
            }
            Op::IndexSelect { x, axis, indices } => {
                acc(*x, ops::index_select_backward(g, self.shape(*x), *axis, indices));
            }
            Op::Reshape(x) => acc(*x, g.reshape(self.shape(*x)).expect("reshape inverse")),
            Op::Permute(x, perm) => {
                let inv = ops::inverse_permutation(perm);
                acc(*x, ops::permute(g, &inv).expect("inverse permutation"));
            }
            Op::SumAxis(x, axis) => acc(*x, ops::sum_axis_backward(g, self.shape(*x), *axis)),
            Op::MaxAxis { x, axis, arg } => {
                acc(*x, ops::max_axis_backward(g, self.shape(*x), *axis, arg));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => acc(*logits, ops::cross_entropy_backward(g.item(), probs, targets)),
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = backward(&values, &node.value, g);
                for (&v, gv) in inputs.iter().zip(gs) {
                    acc(v, gv);
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `v`, or zeros shaped like it when nothing flowed there.
    pub fn get(&self, graph: &Graph<'_>, v: Var) -> Tensor {
        self.grads
            .get(v.0)
            .and_then(Option::as_ref)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }

    pub fn try_get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every bound parameter, keyed by name.
    pub fn params(&self, graph: &Graph<'_>) -> BTreeMap<String, Tensor> {
        graph
            .bound_params()
            .iter()
            .map(|(name, &v)| (name.clone(), self.get(graph, v)))
            .collect()
    }
}
