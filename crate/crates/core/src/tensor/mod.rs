//! Dense rank-≤4 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheaply clonable handle to an immutable node. Operations
//! that see at least one input with `requires_grad` (and run while gradient
//! recording is enabled) attach a backward closure that keeps their inputs
//! alive. [`Tensor::backward`] walks the recorded graph in reverse
//! topological order and accumulates gradients into leaves and into any
//! intermediate marked with [`Tensor::retain_grad`].
//!
//! Compute precision is chosen by the element type: `f32` for training,
//! `f64` for gradient and oracle checks.

mod conv;
pub mod gradcheck;
mod loss;
mod norm;
mod ops;
mod optim;
mod pool;
mod upsample;

pub use conv::{conv2d, conv_output_len, Conv2dParams};
pub use loss::{softmax, softmax_cce, CceOutput, IGNORE_INDEX};
pub use norm::{batchnorm2d, BnMode, BnOutput, RunningStats};
pub use ops::{add, concat_channels, mean, mul, narrow_channels, relu, scale, select_channel, sum};
pub use optim::{Adam, AdamConfig, Parameter};
pub use pool::{pool2d, PoolKind, PoolParams};
pub use upsample::{bilinear_source, bilinear_upsample};

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use num_traits::Float;

use crate::error::{shape_err, Error, Result};

/// Floating-point element type of a tensor.
pub trait Real:
    Float + Default + fmt::Debug + fmt::Display + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a · b + beta · c` for row-major matrices, `a` is m×k and `b` is k×n.
    /// With `a_t`/`b_t` the operand is stored transposed (k×m / n×k).
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, beta: Self, c: &mut [Self]);
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
            fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, beta: Self, c: &mut [Self]) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too short");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: bounds asserted above; strides describe dense row-major storage.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording disabled on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _restore = Restore(prev);
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward rule of a recorded operation.
pub(crate) trait GradFn<T: Real> {
    fn inputs(&self) -> Vec<&Tensor<T>>;
    /// Gradients w.r.t. each input (same order as `inputs`); `None` skips an input.
    fn backward(&self, grad_out: &[T]) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Real> {
    id: usize,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    requires_grad: bool,
    retain_grad: Cell<bool>,
    grad: RefCell<Option<Vec<T>>>,
    grad_fn: Option<Box<dyn GradFn<T>>>,
}

pub struct Tensor<T: Real = f32> {
    node: Rc<Node<T>>,
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    fn from_node(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, grad_fn: Option<Box<dyn GradFn<T>>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad,
                retain_grad: Cell::new(false),
                grad: RefCell::new(None),
                grad_fn,
            }),
        }
    }

    /// New leaf tensor. Fails when `data.len()` differs from the shape's element count.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.len() > 4 {
            return Err(shape_err!("rank {} exceeds 4", shape.len()));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!("shape {:?} needs {} elements, got {}", shape, n, data.len()));
        }
        Ok(Self::from_node(shape.to_vec(), data, false, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_node(shape.to_vec(), vec![value; n], false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::from_node(Vec::new(), vec![value], false, None)
    }

    /// Leaf tensor that accumulates gradients.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Ok(Self::new(shape, data)?.requires_grad_(true))
    }

    /// Returns a leaf sharing nothing with `self` whose `requires_grad` is `flag`.
    pub fn requires_grad_(self, flag: bool) -> Self {
        if self.node.grad_fn.is_none() && self.node.requires_grad == flag {
            return self;
        }
        let data = self.node.data.borrow().clone();
        Self::from_node(self.node.shape.clone(), data, flag, None)
    }

    /// Copy of the values, cut off from the recorded graph.
    pub fn detach(&self) -> Self {
        Self::from_node(self.node.shape.clone(), self.node.data.borrow().clone(), false, None)
    }

    /// Result of an operation: records `grad_fn` only if some input needs gradient.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>, grad_fn: impl GradFn<T> + 'static) -> Self {
        let needs = grad_enabled() && grad_fn.inputs().iter().any(|t| t.requires_grad());
        if needs {
            Self::from_node(shape, data, true, Some(Box::new(grad_fn)))
        } else {
            Self::from_node(shape, data, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    /// Shape as `[N, C, H, W]`; errors for any other rank.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.node.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(shape_err!("expected a rank-4 tensor, got shape {:?}", self.node.shape)),
        }
    }

    pub fn id(&self) -> usize {
        self.node.id
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    /// Borrow the values.
    pub fn data(&self) -> std::cell::Ref<'_, Vec<T>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.node.data.borrow()[0]
    }

    /// In-place overwrite of a leaf's values (optimizer steps, checkpoint loads).
    pub fn set_data(&self, values: &[T]) -> Result<()> {
        if !self.is_leaf() {
            return Err(Error::InvalidArgument("cannot overwrite a non-leaf tensor".into()));
        }
        let mut data = self.node.data.borrow_mut();
        if data.len() != values.len() {
            return Err(shape_err!("set_data expects {} values, got {}", data.len(), values.len()));
        }
        data.copy_from_slice(values);
        Ok(())
    }

    pub(crate) fn data_mut(&self) -> std::cell::RefMut<'_, Vec<T>> {
        self.node.data.borrow_mut()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    pub(crate) fn grad_ref(&self) -> std::cell::Ref<'_, Option<Vec<T>>> {
        self.node.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Keep the gradient of this intermediate after `backward`.
    pub fn retain_grad(&self) {
        self.node.retain_grad.set(true);
    }

    fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Recorded ancestors in topological order (inputs before outputs).
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            let children: Vec<Tensor<T>> = match &t.node.grad_fn {
                Some(f) => f
                    .inputs()
                    .into_iter()
                    .filter(|c| c.requires_grad() && !visited.contains(&c.id()))
                    .cloned()
                    .collect(),
                None => Vec::new(),
            };
            stack.push((t, true));
            for c in children.into_iter().rev() {
                stack.push((c, false));
            }
        }
        order
    }

    /// Back-propagates from a scalar, accumulating into leaf gradients.
    pub fn backward(&self) -> Result<()> {
        self.backward_with(&[T::one()])
    }

    /// Back-propagates an explicit upstream gradient of the same shape as `self`.
    pub fn backward_with(&self, upstream: &[T]) -> Result<()> {
        if !self.requires_grad() {
            return Err(Error::NoGraph);
        }
        if upstream.len() != self.numel() {
            return Err(shape_err!(
                "upstream gradient has {} values for a tensor of {}",
                upstream.len(),
                self.numel()
            ));
        }
        let order = self.topo_order();
        let mut pending: HashMap<usize, Vec<T>> = HashMap::new();
        pending.insert(self.id(), upstream.to_vec());
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else { continue };
            match &t.node.grad_fn {
                Some(f) => {
                    if t.node.retain_grad.get() {
                        t.accumulate_grad(&g);
                    }
                    let grads = f.backward(&g);
                    for (input, gi) in f.inputs().into_iter().zip(grads) {
                        let Some(gi) = gi else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(gi.len(), input.numel());
                        match pending.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, &b)| *a += b),
                            None => {
                                pending.insert(input.id(), gi);
                            }
                        }
                    }
                }
                None => t.accumulate_grad(&g),
            }
        }
        Ok(())
    }

    /// Same values in another precision, as a fresh leaf.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        let data = self.node.data.borrow().iter().map(|&x| U::of(x.as_f64())).collect();
        Tensor::from_node(self.node.shape.clone(), data, false, None)
    }
}
