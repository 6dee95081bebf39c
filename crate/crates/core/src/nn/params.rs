use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Gradients, Graph, Var};
use super::tensor::{Scalar, Tensor};

/// Ordered, named parameter tensors. Order is part of the checkpoint format.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<F>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Put every parameter on the graph, as gradient leaves or constants.
    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { g.leaf(t.clone()) } else { g.input(t.clone()) })
            .collect()
    }

    /// Collect gradients for every bound parameter; unused parameters get zeros.
    pub fn collect_grads(&self, vars: &[Var], grads: &mut Gradients<F>) -> Vec<Tensor<F>> {
        vars.iter()
            .zip(&self.tensors)
            .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    /// He-normal conv kernel `[cout, cin, k, k]` plus zero bias.
    pub fn push_conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, rng: &mut impl Rng) {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let data = (0..cout * cin * k * k).map(|_| F::lit(normal.sample(rng))).collect();
        self.push(format!("{name}.weight"), Tensor::from_vec([cout, cin, k, k], data));
        self.push(format!("{name}.bias"), Tensor::zeros([1, 1, 1, cout]));
    }

    /// Conv layer whose weights and bias start at zero.
    pub fn push_zero_conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.push(format!("{name}.weight"), Tensor::zeros([cout, cin, k, k]));
        self.push(format!("{name}.bias"), Tensor::zeros([1, 1, 1, cout]));
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(params: &ParamStore<F>, lr: f64) -> Self {
        let zeros: Vec<Tensor<F>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &[Tensor<F>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let lr = F::lit(self.lr / bc1);
        let bc2 = F::lit(bc2);
        let eps = F::lit(self.eps);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = b1 * m[k] + (F::one() - b1) * g[k];
                v[k] = b2 * v[k] + (F::one() - b2) * g[k] * g[k];
                let vhat = v[k] / bc2;
                *w = *w - lr * m[k] / (vhat.sqrt() + eps);
            }
        }
    }
}
