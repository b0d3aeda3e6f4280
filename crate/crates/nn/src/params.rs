use rand::Rng;

use crate::graph::{Grads, Graph, Var};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<R> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<R>,
}

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<R> {
    params: Vec<Param<R>>,
}

impl<R: Real> ParamSet<R> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<R>) -> ParamId {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "param data/shape mismatch");
        self.params.push(Param { name: name.into(), shape: shape.to_vec(), data });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<R> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<R> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<R>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<R>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Element-type conversion (used to run the f32 model in f64).
    pub fn cast<S: Real>(&self) -> ParamSet<S> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|&v| S::from_f64(v.to_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Places every parameter on the tape as a leaf.
    pub fn bind(&self, g: &mut Graph<R>, trainable: bool) -> Bound {
        Bound { vars: self.params.iter().map(|p| g.leaf(p.data.clone(), &p.shape, trainable)).collect() }
    }

    /// All parameter values concatenated in order.
    pub fn flat(&self) -> Vec<R> {
        self.params.iter().flat_map(|p| p.data.iter().copied()).collect()
    }
}

/// Tape handles of a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Pulls per-parameter gradients out of `grads`, in parameter order.
    pub fn gradients<R: Real>(&self, grads: &mut Grads<R>) -> Vec<Option<Vec<R>>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialisation.
pub fn fan_in_uniform<G: Rng + ?Sized>(rng: &mut G, len: usize, fan_in: usize) -> Vec<f32> {
    let bound = 1.0 / (fan_in as f32).sqrt();
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<G: Rng + ?Sized>(ps: &mut ParamSet<f32>, rng: &mut G, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let w = ps.add(format!("{name}.weight"), &[d_in, d_out], fan_in_uniform(rng, d_in * d_out, d_in));
        let b = bias.then(|| ps.add(format!("{name}.bias"), &[d_out], vec![0.0; d_out]));
        Self { w, b, d_in, d_out }
    }

    /// Same as [`Linear::new`] with all-zero weights.
    pub fn zeros(ps: &mut ParamSet<f32>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let w = ps.add(format!("{name}.weight"), &[d_in, d_out], vec![0.0; d_in * d_out]);
        let b = bias.then(|| ps.add(format!("{name}.bias"), &[d_out], vec![0.0; d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p.var(self.w), false, false);
        match self.b {
            Some(b) => g.add_bias(y, p.var(b)),
            None => y,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub c_out: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<G: Rng + ?Sized>(
        ps: &mut ParamSet<f32>,
        rng: &mut G,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = kernel * kernel * c_in;
        let w = ps.add(format!("{name}.weight"), &[fan_in, c_out], fan_in_uniform(rng, fan_in * c_out, fan_in));
        let b = ps.add(format!("{name}.bias"), &[c_out], vec![0.0; c_out]);
        Self { w, b, kernel, stride, pad, c_out }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, p: &Bound, x: Var) -> Var {
        let y = g.conv2d(x, p.var(self.w), self.kernel, self.stride, self.pad);
        g.add_bias(y, p.var(self.b))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamSet<f32>, name: &str, channels: usize, groups: usize) -> Self {
        assert_eq!(channels % groups, 0, "{name}: {channels} channels not divisible into {groups} groups");
        let gamma = ps.add(format!("{name}.gamma"), &[channels], vec![1.0; channels]);
        let beta = ps.add(format!("{name}.beta"), &[channels], vec![0.0; channels]);
        Self { gamma, beta, groups }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, p: &Bound, x: Var) -> Var {
        g.group_norm(x, p.var(self.gamma), p.var(self.beta), self.groups)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet<f32>, name: &str, dim: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), &[dim], vec![1.0; dim]);
        let beta = ps.add(format!("{name}.beta"), &[dim], vec![0.0; dim]);
        Self { gamma, beta }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, p: &Bound, x: Var) -> Var {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta))
    }
}
