//! Reverse-mode differentiation over a linear tape.
//!
//! Each recorded op stores its output value and whatever the backward pass
//! needs. [`Tape::gradient`] replays the tape in reverse from a scalar node
//! and returns one gradient tensor per bound parameter.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ops::{self, NormCache, Reduce, ReduceCache};
use crate::params::ParameterSet;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Parameter name to tape handle, produced by [`Tape::bind`].
pub type ParamVars = BTreeMap<String, Var>;

enum Op<T> {
    Input,
    Param(String),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        cols: Vec<T>,
    },
    MaxPool2 { input: Var, argmax: Vec<usize> },
    Upsample2 { input: Var },
    Concat { inputs: Vec<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    LeakyRelu { input: Var, slope: T },
    Sigmoid { input: Var },
    ChannelNorm { input: Var, scale: Var, shift: Var, cache: NormCache<T> },
    Reduce { input: Var, kind: Reduce, cache: ReduceCache },
    /// Scalar whose partial derivatives with respect to `parts` were
    /// computed outside the tape.
    External { parts: Vec<(Var, Tensor<T>)> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name.to_string() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant input (no gradient flows into it).
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push("input", value, Op::Input, false)
    }

    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<Var> {
        self.push(name, value, Op::Param(name.to_string()), true)
    }

    /// Records every tensor of `params` as a trainable leaf.
    pub fn bind(&mut self, params: &ParameterSet<T>) -> Result<ParamVars> {
        params
            .iter()
            .map(|(name, t)| Ok((name.to_string(), self.param(name, t.clone())?)))
            .collect()
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (y, cols) = ops::conv2d_with_cols(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        let cols = if rg { cols } else { Vec::new() };
        self.push("conv2d", y, Op::Conv2d { input, weight, bias, cols }, rg)
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (y, argmax) = ops::maxpool2(self.value(input))?;
        let rg = self.needs(input);
        self.push("maxpool2", y, Op::MaxPool2 { input, argmax }, rg)
    }

    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let y = ops::upsample2(self.value(input))?;
        let rg = self.needs(input);
        self.push("upsample2", y, Op::Upsample2 { input }, rg)
    }

    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat_channels(&vals)?;
        let rg = inputs.iter().any(|&v| self.needs(v));
        self.push(
            "concat",
            y,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            rg,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        self.push("add", y, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::mul(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        self.push("mul", y, Op::Mul(a, b), rg)
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Result<Var> {
        let slope = T::of(slope);
        let y = ops::leaky_relu(self.value(input), slope);
        let rg = self.needs(input);
        self.push("leaky_relu", y, Op::LeakyRelu { input, slope }, rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let y = ops::sigmoid(self.value(input));
        let rg = self.needs(input);
        self.push("sigmoid", y, Op::Sigmoid { input }, rg)
    }

    pub fn channel_norm(&mut self, input: Var, scale: Var, shift: Var) -> Result<Var> {
        let (y, cache) = ops::channel_norm(self.value(input), self.value(scale), self.value(shift))?;
        let rg = self.needs(input) || self.needs(scale) || self.needs(shift);
        self.push(
            "channel_norm",
            y,
            Op::ChannelNorm {
                input,
                scale,
                shift,
                cache,
            },
            rg,
        )
    }

    pub fn reduce(&mut self, input: Var, axes: &[usize], kind: Reduce) -> Result<Var> {
        let (y, cache) = ops::reduce(self.value(input), axes, kind)?;
        let rg = self.needs(input);
        self.push("reduce", y, Op::Reduce { input, kind, cache }, rg)
    }

    pub fn sum_all(&mut self, input: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(input).rank()).collect();
        self.reduce(input, &axes, Reduce::Sum)
    }

    /// Records a scalar computed outside the tape together with its
    /// gradients with respect to existing nodes.
    pub fn external(&mut self, value: f64, parts: Vec<(Var, Tensor<T>)>) -> Result<Var> {
        for (v, g) in &parts {
            if g.shape() != self.value(*v).shape() {
                return Err(crate::error::shape_err(
                    "external",
                    format!("gradient {:?} for node {:?}", g.shape(), self.value(*v).shape()),
                ));
            }
        }
        let rg = parts.iter().any(|(v, _)| self.needs(*v));
        self.push("external", Tensor::scalar(T::of(value)), Op::External { parts }, rg)
    }

    /// Gradient of the scalar at `loss` with respect to every parameter on
    /// the tape. Parameters the loss does not depend on get zero gradients.
    pub fn gradient(&self, loss: Var) -> Result<ParameterSet<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.item().is_finite() {
            return Err(Error::NonFiniteLoss(lv.item().as_f64()));
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        let mut out = ParameterSet::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |v: Var, d: Tensor<T>| {
                if !self.needs(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&d),
                    slot => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(name) => {
                    out.insert(name.clone(), g)?;
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    cols,
                } => {
                    let chw = self.value(*input).chw();
                    let (dx, dw, db) = ops::conv2d_backward_cols(cols, chw, self.value(*weight), &g, self.needs(*input));
                    if let Some(dx) = dx {
                        acc(*input, dx);
                    }
                    acc(*weight, dw);
                    acc(*bias, db);
                }
                Op::MaxPool2 { input, argmax } => {
                    acc(*input, ops::maxpool2_backward(self.value(*input).shape(), argmax, &g));
                }
                Op::Upsample2 { input } => acc(*input, ops::upsample2_backward(&g)),
                Op::Concat { inputs } => {
                    let shapes: Vec<Vec<usize>> = inputs.iter().map(|v| self.value(*v).shape().to_vec()).collect();
                    for (v, d) in inputs.iter().zip(ops::concat_backward(&shapes, &g)) {
                        acc(*v, d);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, ops::mul(&g, self.value(*b))?);
                    acc(*b, ops::mul(&g, self.value(*a))?);
                }
                Op::LeakyRelu { input, slope } => {
                    acc(*input, ops::leaky_relu_backward(self.value(*input), *slope, &g));
                }
                Op::Sigmoid { input } => acc(*input, ops::sigmoid_backward(&node.value, &g)),
                Op::ChannelNorm {
                    input,
                    scale,
                    shift,
                    cache,
                } => {
                    let (dx, ds, db) = ops::channel_norm_backward(cache, self.value(*scale), &g);
                    acc(*input, dx);
                    acc(*scale, ds);
                    acc(*shift, db);
                }
                Op::Reduce { input, kind, cache } => {
                    acc(*input, ops::reduce_backward(self.value(*input).shape(), cache, *kind, &g));
                }
                Op::External { parts } => {
                    let s = g.item();
                    for (v, d) in parts {
                        let mut d = d.clone();
                        d.scale_in_place(s);
                        acc(*v, d);
                    }
                }
            }
        }

        for node in &self.nodes {
            if let Op::Param(name) = &node.op {
                if out.get(name).is_none() {
                    out.insert(name.clone(), Tensor::zeros(node.value.shape()))?;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn rel_close(a: f64, n: f64) -> bool {
        (a - n).abs() <= 1e-3 * a.abs().max(n.abs()) + 1e-8
    }

    /// Central finite differences of `f` for every parameter entry.
    fn check_fd(params: &ParameterSet<f64>, f: impl Fn(&ParameterSet<f64>) -> (f64, ParameterSet<f64>)) {
        let (_, analytic) = f(params);
        let h = 1e-5;
        for (name, t) in params.iter() {
            for i in 0..t.len() {
                let mut p = params.clone();
                p.get_mut(name).unwrap().data_mut()[i] += h;
                let (up, _) = f(&p);
                p.get_mut(name).unwrap().data_mut()[i] -= 2.0 * h;
                let (dn, _) = f(&p);
                let numeric = (up - dn) / (2.0 * h);
                let a = analytic.get(name).unwrap().data()[i];
                assert!(rel_close(a, numeric), "{name}[{i}]: analytic {a} vs numeric {numeric}");
            }
        }
    }

    #[test]
    fn sum_of_params_has_unit_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParameterSet::<f64>::new();
        params.insert("a", random(&[2, 3], &mut rng)).unwrap();
        params.insert("b", random(&[4], &mut rng)).unwrap();
        let mut tape = Tape::new();
        let vars = tape.bind(&params).unwrap();
        let sa = tape.sum_all(vars["a"]).unwrap();
        let sb = tape.sum_all(vars["b"]).unwrap();
        let loss = tape.add(sa, sb).unwrap();
        let g = tape.gradient(loss).unwrap();
        for (_, t) in g.iter() {
            assert!(t.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn sum_of_squares_has_gradient_two_p() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ParameterSet::<f64>::new();
        params.insert("p", random(&[3, 2, 2], &mut rng)).unwrap();
        let mut tape = Tape::new();
        let vars = tape.bind(&params).unwrap();
        let sq = tape.mul(vars["p"], vars["p"]).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let g = tape.gradient(loss).unwrap();
        for (a, p) in g.get("p").unwrap().data().iter().zip(params.get("p").unwrap().data()) {
            assert!((a - 2.0 * p).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let p = tape.param("p", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(tape.gradient(p), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_values_are_reported() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param("p", Tensor::full(&[1], 1e300)).unwrap();
        assert!(matches!(tape.mul(p, p), Err(Error::NonFinite { .. })));
        assert!(matches!(tape.external(f64::NAN, vec![]), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn max_reduction_routes_to_argmax() {
        let mut tape = Tape::<f64>::new();
        let p = tape
            .param("p", Tensor::new(vec![4], vec![0.5, 2.0, 2.0, -1.0]).unwrap())
            .unwrap();
        let m = tape.reduce(p, &[0], Reduce::Max).unwrap();
        let g = tape.gradient(m).unwrap();
        assert_eq!(g.get("p").unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn max_routing_is_stable_under_small_perturbations() {
        // perturbing a non-argmax element by less than the gap keeps routing
        let base = [0.3, 1.0, 0.7, 0.2];
        for (i, delta) in [(0, 0.69), (2, 0.29), (3, -0.5)] {
            let mut v = base;
            v[i] += delta;
            let mut tape = Tape::<f64>::new();
            let p = tape.param("p", Tensor::new(vec![4], v.to_vec()).unwrap()).unwrap();
            let m = tape.reduce(p, &[0], Reduce::Max).unwrap();
            let g = tape.gradient(m).unwrap();
            assert_eq!(g.get("p").unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParameterSet::<f64>::new();
        params.insert("w1", random(&[3, 2, 3, 3], &mut rng)).unwrap();
        params.insert("b1", random(&[3], &mut rng)).unwrap();
        params.insert("g1", random(&[3], &mut rng)).unwrap();
        params.insert("s1", random(&[3], &mut rng)).unwrap();
        params.insert("w2", random(&[2, 3, 3, 3], &mut rng)).unwrap();
        params.insert("b2", random(&[2], &mut rng)).unwrap();
        params.insert("w3", random(&[1, 5, 3, 3], &mut rng)).unwrap();
        params.insert("b3", random(&[1], &mut rng)).unwrap();
        let image = random(&[2, 8, 8], &mut rng);

        let f = |p: &ParameterSet<f64>| {
            let mut tape = Tape::new();
            let v = tape.bind(p).unwrap();
            let x = tape.input(image.clone()).unwrap();
            let h = tape.conv2d(x, v["w1"], v["b1"]).unwrap();
            let h = tape.leaky_relu(h, 0.01).unwrap();
            let h = tape.channel_norm(h, v["g1"], v["s1"]).unwrap();
            let d = tape.maxpool2(h).unwrap();
            let d = tape.conv2d(d, v["w2"], v["b2"]).unwrap();
            let u = tape.upsample2(d).unwrap();
            let c = tape.concat(&[h, u]).unwrap();
            let o = tape.conv2d(c, v["w3"], v["b3"]).unwrap();
            let s = tape.sigmoid(o).unwrap();
            let sq = tape.mul(s, o).unwrap();
            let m = tape.reduce(sq, &[1], Reduce::Max).unwrap();
            let mean = tape.reduce(m, &[0, 1], Reduce::Mean).unwrap();
            let total = tape.sum_all(s).unwrap();
            let loss = tape.add(mean, total).unwrap();
            (tape.value(loss).item(), tape.gradient(loss).unwrap())
        };
        check_fd(&params, f);
    }
}
