//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Var`] is a reference-counted node holding its forward value and, when
//! it depends on a parameter, the operation that produced it. Nodes that do
//! not depend on any parameter keep no history, so inference runs free their
//! intermediates as soon as the handles are dropped.
//!
//! ```
//! use mtnet::autograd::Var;
//! use mtnet::tensor::{Shape, Tensor};
//!
//! let x = Var::parameter(Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 2).unwrap(), vec![1.0, 2.0]).unwrap());
//! let loss = x.mul(&x).unwrap().sum();
//! loss.backward().unwrap();
//! assert_eq!(x.grad().data(), &[2.0, 4.0]);
//! ```

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, InstanceNormCache};
use crate::tensor::{Scalar, Shape, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Learnable leaf; accumulates gradient.
    Parameter,
    /// Produced by an operation from at least one parameter.
    Intermediate,
    /// Never receives gradient.
    Constant,
}

/// Traversal used by [`Var::backward_with_order`]. Both visit every node after
/// all of its consumers; results are identical because per-node gradient
/// contributions are summed in a fixed order independent of traversal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackwardOrder {
    /// Reverse post-order of a depth-first search from the loss.
    #[default]
    DepthFirst,
    /// Kahn's algorithm, consumers-first, breaking ties by newest node.
    Kahn,
}

enum Op<T: Scalar> {
    Leaf,
    Constant,
    Conv2d { input: Var<T>, weight: Var<T>, bias: Option<Var<T>>, stride: usize },
    InstanceNorm { input: Var<T>, gain: Var<T>, bias: Var<T>, cache: InstanceNormCache<T> },
    Relu(Var<T>),
    Tanh(Var<T>),
    Clamp { input: Var<T>, lo: T, hi: T },
    NearestUp2(Var<T>),
    Bilinear(Var<T>),
    MaxPool2 { input: Var<T>, argmax: Vec<usize> },
    AvgPool2(Var<T>),
    Concat(Var<T>, Var<T>),
    Add(Var<T>, Var<T>),
    Mul(Var<T>, Var<T>),
    Affine { input: Var<T>, scale: T },
    ChannelMix { input: Var<T>, matrix: Vec<T> },
    Gram(Var<T>),
    Mse(Var<T>, Var<T>),
    Sum(Var<T>),
}

impl<T: Scalar> Op<T> {
    fn inputs(&self) -> Vec<&Var<T>> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Conv2d { input, weight, bias, .. } => {
                let mut v = vec![input, weight];
                v.extend(bias.as_ref());
                v
            }
            Op::InstanceNorm { input, gain, bias, .. } => vec![input, gain, bias],
            Op::Relu(x)
            | Op::Tanh(x)
            | Op::NearestUp2(x)
            | Op::Bilinear(x)
            | Op::AvgPool2(x)
            | Op::Gram(x)
            | Op::Sum(x) => vec![x],
            Op::Clamp { input, .. }
            | Op::MaxPool2 { input, .. }
            | Op::Affine { input, .. }
            | Op::ChannelMix { input, .. } => vec![input],
            Op::Concat(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::Mse(a, b) => vec![a, b],
        }
    }
}

struct Node<T: Scalar> {
    id: u64,
    value: Arc<Tensor<T>>,
    role: Role,
    op: Op<T>,
    grad: RefCell<Option<Tensor<T>>>,
}

/// Handle to a node in a computation history. Cloning is cheap.
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?}, {:?})", self.0.id, self.0.role, self.0.value)
    }
}

impl<T: Scalar> Var<T> {
    fn make(value: Tensor<T>, role: Role, op: Op<T>) -> Self {
        Self::make_shared(Arc::new(value), role, op)
    }

    fn make_shared(value: Arc<Tensor<T>>, role: Role, op: Op<T>) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            role,
            op,
            grad: RefCell::new(None),
        }))
    }

    /// A learnable leaf.
    pub fn parameter(value: Tensor<T>) -> Self {
        Self::make(value, Role::Parameter, Op::Leaf)
    }

    pub fn constant(value: Tensor<T>) -> Self {
        Self::make(value, Role::Constant, Op::Constant)
    }

    pub fn constant_shared(value: Arc<Tensor<T>>) -> Self {
        Self::make_shared(value, Role::Constant, Op::Constant)
    }

    /// Produce a node; collapses to a constant when no input needs gradient.
    fn derive(value: Tensor<T>, op: Op<T>) -> Self {
        if op.inputs().iter().any(|v| v.requires_grad()) {
            Self::make(value, Role::Intermediate, op)
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shared_value(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.0.value)
    }

    pub fn shape(&self) -> Shape {
        self.0.value.shape()
    }

    pub fn role(&self) -> Role {
        self.0.role
    }

    pub fn requires_grad(&self) -> bool {
        self.0.role != Role::Constant
    }

    pub fn ptr_eq(&self, other: &Var<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Accumulated gradient of a parameter; zeros when none has reached it.
    pub fn grad(&self) -> Tensor<T> {
        self.0.grad.borrow().clone().unwrap_or_else(|| Tensor::zeros(self.shape()))
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same value, cut from the history.
    pub fn detach(&self) -> Var<T> {
        Self::constant_shared(self.shared_value())
    }

    pub fn conv2d(&self, weight: &Var<T>, bias: Option<&Var<T>>, stride: usize) -> Result<Var<T>> {
        let out = kernels::conv2d_forward(self.value(), weight.value(), bias.map(|b| b.value()), stride)?;
        Ok(Self::derive(
            out,
            Op::Conv2d { input: self.clone(), weight: weight.clone(), bias: bias.cloned(), stride },
        ))
    }

    pub fn instance_norm(&self, gain: &Var<T>, bias: &Var<T>, eps: T) -> Result<Var<T>> {
        let (out, cache) = kernels::instance_norm_forward(self.value(), gain.value(), bias.value(), eps)?;
        Ok(Self::derive(
            out,
            Op::InstanceNorm { input: self.clone(), gain: gain.clone(), bias: bias.clone(), cache },
        ))
    }

    pub fn relu(&self) -> Var<T> {
        let out = self.value().map(|v| if v > T::zero() { v } else { T::zero() });
        Self::derive(out, Op::Relu(self.clone()))
    }

    pub fn tanh(&self) -> Var<T> {
        Self::derive(self.value().map(|v| v.tanh()), Op::Tanh(self.clone()))
    }

    /// Gradient passes where `lo ≤ x ≤ hi`.
    pub fn clamp(&self, lo: T, hi: T) -> Var<T> {
        let out = self.value().map(|v| v.max(lo).min(hi));
        Self::derive(out, Op::Clamp { input: self.clone(), lo, hi })
    }

    pub fn nearest_upsample2x(&self) -> Var<T> {
        Self::derive(kernels::nearest_upsample2x_forward(self.value()), Op::NearestUp2(self.clone()))
    }

    /// Resizing to the current extent is the identity and returns `self`.
    pub fn bilinear_resize(&self, height: usize, width: usize) -> Result<Var<T>> {
        let s = self.shape();
        if s.h == height && s.w == width {
            return Ok(self.clone());
        }
        let out = kernels::bilinear_resize_forward(self.value(), height, width)?;
        Ok(Self::derive(out, Op::Bilinear(self.clone())))
    }

    pub fn max_pool2(&self) -> Var<T> {
        let (out, argmax) = kernels::max_pool2_forward(self.value());
        Self::derive(out, Op::MaxPool2 { input: self.clone(), argmax })
    }

    pub fn avg_pool2(&self) -> Var<T> {
        Self::derive(kernels::avg_pool2_forward(self.value()), Op::AvgPool2(self.clone()))
    }

    pub fn concat_channels(&self, other: &Var<T>) -> Result<Var<T>> {
        let (a, b) = (self.shape(), other.shape());
        if a.n != b.n || a.h != b.h || a.w != b.w {
            return Err(Error::shape(format!("concat_channels spatial mismatch: {a} vs {b}")));
        }
        let os = Shape::new(a.n, a.c + b.c, a.h, a.w)?;
        let mut out = Vec::with_capacity(os.numel());
        let (ap, bp) = (a.c * a.plane(), b.c * b.plane());
        for n in 0..a.n {
            out.extend_from_slice(&self.value().data()[n * ap..(n + 1) * ap]);
            out.extend_from_slice(&other.value().data()[n * bp..(n + 1) * bp]);
        }
        Ok(Self::derive(Tensor::from_vec(os, out)?, Op::Concat(self.clone(), other.clone())))
    }

    fn same_shape(&self, other: &Var<T>, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!("{what}: {} vs {}", self.shape(), other.shape())));
        }
        Ok(())
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        self.same_shape(other, "add")?;
        let mut out = self.value().clone();
        out.add_assign(other.value());
        Ok(Self::derive(out, Op::Add(self.clone(), other.clone())))
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.same_shape(other, "mul")?;
        let data = self.value().data().iter().zip(other.value().data()).map(|(&a, &b)| a * b).collect();
        let out = Tensor::from_vec(self.shape(), data)?;
        Ok(Self::derive(out, Op::Mul(self.clone(), other.clone())))
    }

    pub fn scalar_mul(&self, scale: T) -> Var<T> {
        self.affine(scale, T::zero())
    }

    /// `scale·x + shift`.
    pub fn affine(&self, scale: T, shift: T) -> Var<T> {
        let out = self.value().map(|v| scale * v + shift);
        Self::derive(out, Op::Affine { input: self.clone(), scale })
    }

    /// Per-pixel linear map across channels, `out[o] = Σ_i m[o][i]·x[i] + offset[o]`,
    /// with `matrix` row-major `(out_channels, in_channels)`.
    pub fn channel_mix(&self, matrix: &[T], offsets: &[T]) -> Result<Var<T>> {
        let out = kernels::channel_mix_forward(self.value(), matrix, offsets)?;
        Ok(Self::derive(out, Op::ChannelMix { input: self.clone(), matrix: matrix.to_vec() }))
    }

    /// Per-sample unnormalized Gram matrices, shape `(n, 1, c, c)`.
    pub fn gram(&self) -> Var<T> {
        Self::derive(kernels::gram_forward(self.value()), Op::Gram(self.clone()))
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&self, other: &Var<T>) -> Result<Var<T>> {
        self.same_shape(other, "mse")?;
        let n = T::from_usize(self.value().len());
        let ss = self
            .value()
            .data()
            .iter()
            .zip(other.value().data())
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
        Ok(Self::derive(Tensor::scalar(ss / n), Op::Mse(self.clone(), other.clone())))
    }

    pub fn sum(&self) -> Var<T> {
        Self::derive(Tensor::scalar(self.value().sum()), Op::Sum(self.clone()))
    }

    /// Accumulate `d self / d leaf` into every reachable parameter.
    pub fn backward(&self) -> Result<()> {
        self.backward_with_order(BackwardOrder::default())
    }

    pub fn backward_with_order(&self, order: BackwardOrder) -> Result<()> {
        if self.value().len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward requires a scalar loss, got shape {}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let nodes = match order {
            BackwardOrder::DepthFirst => depth_first_order(self),
            BackwardOrder::Kahn => kahn_order(self),
        };

        // Contributions are keyed by consumer id and summed in id order, so
        // the traversal order cannot change the result.
        let mut pending: HashMap<u64, Vec<(u64, Tensor<T>)>> = HashMap::new();
        pending.insert(self.0.id, vec![(u64::MAX, Tensor::scalar(T::one()))]);

        for node in nodes {
            let Some(mut parts) = pending.remove(&node.0.id) else { continue };
            parts.sort_by_key(|(consumer, _)| *consumer);
            let mut iter = parts.into_iter();
            let mut grad = iter.next().expect("non-empty contributions").1;
            for (_, g) in iter {
                grad.add_assign(&g);
            }
            match node.0.role {
                Role::Parameter => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.add_assign(&grad),
                        None => *slot = Some(grad),
                    }
                }
                Role::Intermediate => {
                    for (input, g) in node.input_grads(&grad) {
                        if input.requires_grad() {
                            pending.entry(input.0.id).or_default().push((node.0.id, g));
                        }
                    }
                }
                Role::Constant => {}
            }
        }
        Ok(())
    }

    fn input_grads(&self, grad: &Tensor<T>) -> Vec<(Var<T>, Tensor<T>)> {
        let out = self.value();
        match &self.0.op {
            Op::Leaf | Op::Constant => vec![],
            Op::Conv2d { input, weight, bias, stride } => {
                let g = kernels::conv2d_backward(input.value(), weight.value(), *stride, grad);
                let mut v = vec![(input.clone(), g.input), (weight.clone(), g.weight)];
                if let Some(b) = bias {
                    v.push((b.clone(), g.bias.reshape(b.shape()).expect("bias shape")));
                }
                v
            }
            Op::InstanceNorm { input, gain, bias, cache } => {
                let (dx, dg, db) = kernels::instance_norm_backward(gain.value(), cache, grad);
                vec![(input.clone(), dx), (gain.clone(), dg), (bias.clone(), db)]
            }
            Op::Relu(x) => {
                let data = x.value().data().iter().zip(grad.data());
                let d = data.map(|(&v, &g)| if v > T::zero() { g } else { T::zero() }).collect();
                vec![(x.clone(), Tensor::from_vec(x.shape(), d).expect("shape"))]
            }
            Op::Tanh(x) => {
                let d = out.data().iter().zip(grad.data()).map(|(&y, &g)| g * (T::one() - y * y)).collect();
                vec![(x.clone(), Tensor::from_vec(x.shape(), d).expect("shape"))]
            }
            Op::Clamp { input, lo, hi } => {
                let data = input.value().data().iter().zip(grad.data());
                let d = data.map(|(&v, &g)| if v >= *lo && v <= *hi { g } else { T::zero() }).collect();
                vec![(input.clone(), Tensor::from_vec(input.shape(), d).expect("shape"))]
            }
            Op::NearestUp2(x) => vec![(x.clone(), kernels::nearest_upsample2x_backward(x.shape(), grad))],
            Op::Bilinear(x) => vec![(x.clone(), kernels::bilinear_resize_backward(x.shape(), grad))],
            Op::MaxPool2 { input, argmax } => {
                let mut d = Tensor::zeros(input.shape());
                for (&i, &g) in argmax.iter().zip(grad.data()) {
                    d.data_mut()[i] = d.data()[i] + g;
                }
                vec![(input.clone(), d)]
            }
            Op::AvgPool2(x) => vec![(x.clone(), kernels::avg_pool2_backward(x.shape(), grad))],
            Op::Concat(a, b) => {
                let (sa, sb) = (a.shape(), b.shape());
                let (ap, bp) = (sa.c * sa.plane(), sb.c * sb.plane());
                let (mut da, mut db) = (Vec::with_capacity(sa.numel()), Vec::with_capacity(sb.numel()));
                for chunk in grad.data().chunks(ap + bp) {
                    da.extend_from_slice(&chunk[..ap]);
                    db.extend_from_slice(&chunk[ap..]);
                }
                vec![
                    (a.clone(), Tensor::from_vec(sa, da).expect("shape")),
                    (b.clone(), Tensor::from_vec(sb, db).expect("shape")),
                ]
            }
            Op::Add(a, b) => vec![(a.clone(), grad.clone()), (b.clone(), grad.clone())],
            Op::Mul(a, b) => {
                let ga = grad.data().iter().zip(b.value().data()).map(|(&g, &v)| g * v).collect();
                let gb = grad.data().iter().zip(a.value().data()).map(|(&g, &v)| g * v).collect();
                vec![
                    (a.clone(), Tensor::from_vec(a.shape(), ga).expect("shape")),
                    (b.clone(), Tensor::from_vec(b.shape(), gb).expect("shape")),
                ]
            }
            Op::Affine { input, scale } => vec![(input.clone(), grad.map(|g| g * *scale))],
            Op::ChannelMix { input, matrix } => {
                vec![(input.clone(), kernels::channel_mix_backward(input.shape(), matrix, grad))]
            }
            Op::Gram(x) => vec![(x.clone(), kernels::gram_backward(x.value(), grad))],
            Op::Mse(a, b) => {
                let k = grad.item() * T::from_f64(2.0) / T::from_usize(a.value().len());
                let pairs = a.value().data().iter().zip(b.value().data());
                let da: Vec<T> = pairs.map(|(&x, &y)| k * (x - y)).collect();
                let db = da.iter().map(|&v| -v).collect();
                vec![
                    (a.clone(), Tensor::from_vec(a.shape(), da).expect("shape")),
                    (b.clone(), Tensor::from_vec(b.shape(), db).expect("shape")),
                ]
            }
            Op::Sum(x) => vec![(x.clone(), Tensor::full(x.shape(), grad.item()))],
        }
    }
}

fn grad_children<T: Scalar>(v: &Var<T>) -> impl Iterator<Item = &Var<T>> {
    v.0.op.inputs().into_iter().filter(|c| c.requires_grad())
}

fn depth_first_order<T: Scalar>(root: &Var<T>) -> Vec<Var<T>> {
    let mut post = Vec::new();
    let mut seen = HashSet::new();
    let mut stack: Vec<(Var<T>, bool)> = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            post.push(v);
            continue;
        }
        if !seen.insert(v.0.id) {
            continue;
        }
        stack.push((v.clone(), true));
        for c in grad_children(&v) {
            if !seen.contains(&c.0.id) {
                stack.push((c.clone(), false));
            }
        }
    }
    post.reverse();
    post
}

fn kahn_order<T: Scalar>(root: &Var<T>) -> Vec<Var<T>> {
    let mut consumers: HashMap<u64, usize> = HashMap::new();
    let mut all: HashMap<u64, Var<T>> = HashMap::new();
    let mut stack = vec![root.clone()];
    while let Some(v) = stack.pop() {
        if all.insert(v.0.id, v.clone()).is_some() {
            continue;
        }
        for c in grad_children(&v) {
            *consumers.entry(c.0.id).or_default() += 1;
            stack.push(c.clone());
        }
    }
    // Max-heap on id: among ready nodes, the newest goes first.
    let mut ready = std::collections::BinaryHeap::new();
    ready.push(root.0.id);
    let mut order = Vec::with_capacity(all.len());
    while let Some(id) = ready.pop() {
        let v = all[&id].clone();
        for c in grad_children(&v) {
            let k = consumers.get_mut(&c.0.id).expect("counted");
            *k -= 1;
            if *k == 0 {
                ready.push(c.0.id);
            }
        }
        order.push(v);
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec4(v: Vec<f64>) -> Tensor<f64> {
        let n = v.len();
        Tensor::from_vec(Shape::new(1, 1, 1, n).unwrap(), v).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let x = Var::parameter(Tensor::<f64>::full(Shape::new(2, 3, 2, 2).unwrap(), 0.3));
        x.sum().backward().unwrap();
        assert!(x.grad().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn unreachable_leaf_has_zero_gradient() {
        let x = Var::parameter(vec4(vec![1.0, 2.0]));
        let y = Var::parameter(vec4(vec![3.0, 4.0]));
        x.sum().backward().unwrap();
        assert_eq!(y.grad().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let x = Var::parameter(vec4(vec![1.0, 2.0]));
        assert!(matches!(x.relu().backward(), Err(Error::Autodiff(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Var::parameter(vec4(vec![1.0, 2.0]));
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().data(), &[4.0, 8.0]);
        x.zero_grad();
        assert_eq!(x.grad().data(), &[0.0, 0.0]);
    }

    #[test]
    fn relu_values_and_subgradient() {
        let x = Var::parameter(vec4(vec![-1.0, 0.0, 2.0]));
        let y = x.relu();
        assert_eq!(y.value().data(), &[0.0, 0.0, 2.0]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn constants_carry_no_history() {
        let c = Var::constant(vec4(vec![1.0, -2.0]));
        let y = c.relu().sum();
        assert_eq!(y.role(), Role::Constant);
        y.backward().unwrap();
        assert_eq!(c.grad().data(), &[0.0, 0.0]);
    }

    #[test]
    fn detach_stops_gradient() {
        let x = Var::parameter(vec4(vec![1.0, 2.0]));
        let d = x.scalar_mul(3.0).detach();
        let loss = x.mul(&d).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().data(), &[3.0, 6.0]);
    }

    #[test]
    fn concat_splits_gradient() {
        let s = Shape::new(1, 1, 2, 2).unwrap();
        let a = Var::parameter(Tensor::<f64>::full(s, 1.0));
        let b = Var::parameter(Tensor::<f64>::full(Shape::new(1, 2, 2, 2).unwrap(), 2.0));
        let c = a.concat_channels(&b).unwrap();
        assert_eq!(c.shape().dims(), [1, 3, 2, 2]);
        assert_eq!(&c.value().data()[..4], a.value().data());
        let w = Var::constant(Tensor::from_vec(c.shape(), (0..12).map(|v| v as f64).collect()).unwrap());
        c.mul(&w).unwrap().sum().backward().unwrap();
        assert_eq!(a.grad().data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(b.grad().data(), &[4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
        assert!(a.concat_channels(&Var::constant(Tensor::zeros(Shape::new(1, 1, 3, 2).unwrap()))).is_err());
    }
}
