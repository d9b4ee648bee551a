//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Only the operations the trainable part of the meta-learner needs are
//! recorded. Frozen inputs (backbone features, correlation maps, masks) enter
//! the tape as constants.

use crate::error::{Error, Result};
use crate::tensor::{self, Broadcast, ConvSpec, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

/// Named parameters with accumulated gradients.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Add `grads` into the stored gradients of trainable parameters.
    /// Frozen parameters are left untouched.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (i, g) in grads.by_param.iter().enumerate() {
            let (Some(g), Some(p)) = (g, self.params.get_mut(i)) else {
                continue;
            };
            if p.trainable {
                p.grad.add_assign(g)?;
            }
        }
        Ok(())
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }
}

/// Gradients from one backward pass, indexed by [`ParamId`]. Parameters that
/// the loss does not reach have no entry.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    by_param: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for `id`, or zeros shaped like the parameter when unreached.
    pub fn get_or_zeros(&self, store: &ParamStore<T>, id: ParamId) -> Tensor<T> {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).value.shape()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Constant,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Var, spec: ConvSpec },
    Relu(Var),
    Sigmoid(Var),
    SoftmaxChannel(Var),
    Hadamard { a: Var, b: Var, kind: Broadcast },
    Concat(Vec<Var>),
    Tile(Var),
    Resize(Var),
    GlobalAvgPool(Var),
    MaskedAvgPool { x: Var, mask: Tensor<T> },
    Mean(Vec<Var>),
    Sum(Var),
    /// Foreground BCE on channel 1 of a `[2,H,W]` probability map.
    Bce { p: Var, target: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Lower/upper clamp applied to probabilities inside the BCE loss. The
/// backward pass treats the clamp as the identity, so saturated wrong
/// predictions still receive a gradient.
pub const BCE_EPS: f64 = 1e-7;

/// Records a forward computation for a single reverse pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
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

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let y = tensor::conv2d(self.value(x), self.value(w), self.value(b), spec)?;
        Ok(self.push(y, Op::Conv2d { x, w, b, spec }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = tensor::activation(self.value(x), tensor::Activation::Relu);
        self.push(y, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = tensor::activation(self.value(x), tensor::Activation::Sigmoid);
        self.push(y, Op::Sigmoid(x))
    }

    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        let y = tensor::softmax_channel(self.value(x))?;
        Ok(self.push(y, Op::SoftmaxChannel(x)))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = tensor::broadcast_kind(self.value(a), self.value(b))?;
        let y = tensor::hadamard(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Hadamard { a, b, kind }))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = tensor::concat_channels(&values)?;
        Ok(self.push(y, Op::Concat(parts.to_vec())))
    }

    pub fn tile(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let y = tensor::tile(self.value(x), h, w)?;
        Ok(self.push(y, Op::Tile(x)))
    }

    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let y = tensor::bilinear_resize(self.value(x), h, w)?;
        Ok(self.push(y, Op::Resize(x)))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = tensor::global_avg_pool(self.value(x))?;
        Ok(self.push(y, Op::GlobalAvgPool(x)))
    }

    pub fn masked_avg_pool(&mut self, x: Var, mask: &Tensor<T>) -> Result<Var> {
        let y = tensor::masked_avg_pool(self.value(x), mask)?;
        Ok(self.push(
            y,
            Op::MaskedAvgPool {
                x,
                mask: mask.clone(),
            },
        ))
    }

    /// Elementwise mean of equally shaped values. A single input is passed
    /// through unchanged (same node).
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        match xs {
            [] => Err(Error::invalid("mean", "no inputs")),
            [only] => Ok(*only),
            [first, rest @ ..] => {
                let mut acc = self.value(*first).clone();
                for &x in rest {
                    acc.add_assign(self.value(x))?;
                }
                let y = acc.scale(T::one() / T::lit(xs.len() as f64));
                Ok(self.push(y, Op::Mean(xs.to_vec())))
            }
        }
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum(x))
    }

    /// Mean per-pixel binary cross entropy between the foreground channel of
    /// `p: [2,H,W]` and a `{0,1}` target `[1,H,W]`.
    pub fn bce(&mut self, p: Var, target: &Tensor<T>) -> Result<Var> {
        let probs = self.value(p);
        let (c, h, w) = probs.dims3("bce")?;
        if c != 2 || target.shape() != [1, h, w] {
            return Err(Error::ShapeMismatch {
                op: "bce",
                lhs: "prediction",
                lhs_shape: probs.shape().to_vec(),
                rhs: "target",
                rhs_shape: target.shape().to_vec(),
            });
        }
        let y = Tensor::scalar(bce_value(&probs.data()[h * w..], target.data()));
        Ok(self.push(
            y,
            Op::Bce {
                p,
                target: target.clone(),
            },
        ))
    }

    /// Reverse pass from scalar `loss`. The tape cannot be reused afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&loss_shape, T::one()));
        let mut by_param: Vec<Option<Tensor<T>>> = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    if by_param.len() <= id.0 {
                        by_param.resize_with(id.0 + 1, || None);
                    }
                    accumulate(&mut by_param[id.0], dy)?;
                }
                Op::Conv2d { x, w, b, spec } => {
                    let g = tensor::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        self.value(*b),
                        &dy,
                        *spec,
                    )?;
                    accumulate(&mut grads[x.0], g.x)?;
                    accumulate(&mut grads[w.0], g.w)?;
                    accumulate(&mut grads[b.0], g.b)?;
                }
                Op::Relu(x) => {
                    let dx = self.value(*x).zip_map(&dy, |v, g| if v > T::zero() { g } else { T::zero() })?;
                    accumulate(&mut grads[x.0], dx)?;
                }
                Op::Sigmoid(x) => {
                    let dx = node.value.zip_map(&dy, |s, g| g * s * (T::one() - s))?;
                    accumulate(&mut grads[x.0], dx)?;
                }
                Op::SoftmaxChannel(x) => {
                    let (c, h, w) = node.value.dims3("softmax_backward")?;
                    let hw = h * w;
                    let s = node.value.data();
                    let g = dy.data();
                    let mut dx = vec![T::zero(); s.len()];
                    for p in 0..hw {
                        let dot: T = (0..c).map(|ch| s[ch * hw + p] * g[ch * hw + p]).sum();
                        for ch in 0..c {
                            let k = ch * hw + p;
                            dx[k] = s[k] * (g[k] - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::from_vec(&[c, h, w], dx)?)?;
                }
                Op::Hadamard { a, b, kind } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let da = tensor::hadamard(&dy, bv)?;
                    let full = dy.zip_map(av, |g, v| g * v)?;
                    let db = tensor::unbroadcast(full.data(), *kind, bv.shape());
                    accumulate(&mut grads[a.0], da)?;
                    accumulate(&mut grads[b.0], db)?;
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for part in parts {
                        let shape = self.value(*part).shape().to_vec();
                        let n: usize = shape.iter().product();
                        let slice = dy.data()[offset..offset + n].to_vec();
                        offset += n;
                        accumulate(&mut grads[part.0], Tensor::from_vec(&shape, slice)?)?;
                    }
                }
                Op::Tile(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    let dx = tensor::unbroadcast(dy.data(), Broadcast::ChannelVector, &shape);
                    accumulate(&mut grads[x.0], dx)?;
                }
                Op::Resize(x) => {
                    let (_, h, w) = self.value(*x).dims3("resize_backward")?;
                    let dx = tensor::bilinear_resize_backward(&dy, h, w)?;
                    accumulate(&mut grads[x.0], dx)?;
                }
                Op::GlobalAvgPool(x) => {
                    let (c, h, w) = self.value(*x).dims3("pool_backward")?;
                    let n = T::lit((h * w) as f64);
                    let dx = Tensor::from_fn(&[c, h, w], |i| dy.data()[i / (h * w)] / n);
                    accumulate(&mut grads[x.0], dx)?;
                }
                Op::MaskedAvgPool { x, mask } => {
                    let (c, h, w) = self.value(*x).dims3("pool_backward")?;
                    let hw = h * w;
                    let area = mask.sum();
                    let m = mask.data();
                    let dx = Tensor::from_fn(&[c, h, w], |i| dy.data()[i / hw] * m[i % hw] / area);
                    accumulate(&mut grads[x.0], dx)?;
                }
                Op::Mean(xs) => {
                    let share = dy.scale(T::one() / T::lit(xs.len() as f64));
                    for x in xs {
                        accumulate(&mut grads[x.0], share.clone())?;
                    }
                }
                Op::Sum(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads[x.0], Tensor::full(&shape, dy.data()[0]))?;
                }
                Op::Bce { p, target } => {
                    let probs = self.value(*p);
                    let (_, h, w) = probs.dims3("bce_backward")?;
                    let hw = h * w;
                    let n = T::lit(hw as f64);
                    let eps = T::lit(BCE_EPS);
                    let upstream = dy.data()[0];
                    let mut dp = vec![T::zero(); 2 * hw];
                    for (k, (&pf, &y)) in probs.data()[hw..].iter().zip(target.data()).enumerate() {
                        let pc = pf.max(eps).min(T::one() - eps);
                        dp[hw + k] = upstream * ((T::one() - y) / (T::one() - pc) - y / pc) / n;
                    }
                    accumulate(&mut grads[p.0], Tensor::from_vec(&[2, h, w], dp)?)?;
                }
            }
        }
        Ok(Gradients { by_param })
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Mean BCE of foreground probabilities against `{0,1}` targets with
/// probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_value<T: Real>(p_fg: &[T], target: &[T]) -> T {
    let eps = T::lit(BCE_EPS);
    let n = T::lit(p_fg.len() as f64);
    let total: T = p_fg
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = p.max(eps).min(T::one() - eps);
            -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
        })
        .sum();
    total / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn linear_loss_gradient_is_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let w = store.add("w", random(&[2, 3, 3], &mut rng), true);
        let x = random(&[2, 3, 3], &mut rng);
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let xv = tape.constant(x.clone());
        let prod = tape.hadamard(wv, xv).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &x);
    }

    #[test]
    fn unreached_parameter_has_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let used = store.add("used", Tensor::full(&[1, 2, 2], 1.0), true);
        let unused = store.add("unused", Tensor::full(&[1, 2, 2], 1.0), true);
        let mut tape = Tape::new();
        let v = tape.param(&store, used);
        let loss = tape.sum(v);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert!(grads.get_or_zeros(&store, unused).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn frozen_parameters_accumulate_nothing() {
        let mut store = ParamStore::<f64>::new();
        let frozen = store.add("frozen", Tensor::full(&[3], 2.0), false);
        let live = store.add("live", Tensor::full(&[3], 2.0), true);
        let mut tape = Tape::new();
        let a = tape.param(&store, frozen);
        let b = tape.param(&store, live);
        let ab = tape.hadamard(a, b).unwrap();
        let loss = tape.sum(ab);
        let grads = tape.backward(loss).unwrap();
        store.accumulate(&grads).unwrap();
        assert!(store.get(frozen).grad.data().iter().all(|&g| g == 0.0));
        assert_eq!(store.get(live).grad.data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn tape_is_single_use_and_needs_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn bce_reference_values() {
        let half = vec![0.5f64; 9];
        let y: Vec<f64> = (0..9).map(|i| (i % 2) as f64).collect();
        assert!((bce_value(&half, &y) - std::f64::consts::LN_2).abs() < 1e-12);

        let confident: Vec<f64> = y.iter().map(|&t| if t == 1.0 { 1.0 - 1e-7 } else { 1e-7 }).collect();
        assert!(bce_value(&confident, &y) < 1e-6);
        let saturated: Vec<f64> = y.to_vec();
        assert!(bce_value(&saturated, &y) < 1e-6);
    }

    #[test]
    fn bce_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p: Vec<f64> = (0..64).map(|_| rng.random_range(0.01..0.99)).collect();
        let y: Vec<f64> = (0..64).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let mut direct = 0.0;
        for (pi, yi) in p.iter().zip(&y) {
            direct += if *yi == 1.0 { -pi.ln() } else { -(1.0 - pi).ln() };
        }
        assert!((bce_value(&p, &y) - direct / 64.0).abs() < 1e-6);
    }
}
