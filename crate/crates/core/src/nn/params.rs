//! Named parameter storage, gradient buffers and the Adam optimizer.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.params.push(Param { name, shape, value });
        ParamId(self.params.len() - 1)
    }

    /// He-normal weights, `std = sqrt(2 / fan_in)`, scaled by `gain`.
    pub fn add_he<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        gain: f64,
        rng: &mut R,
    ) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt() * gain;
        let normal = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let value = (0..n).map(|_| T::lit(normal.sample(rng))).collect();
        self.add(name, shape, value)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: Vec<usize>, v: f64) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![T::lit(v); n])
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Vec<T> {
        &mut self.params[id.0].value
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grads(&self) -> Gradients<T> {
        Gradients {
            grads: self
                .params
                .iter()
                .map(|p| vec![T::zero(); p.value.len()])
                .collect(),
        }
    }
}

/// Gradient buffers parallel to a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub grads: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.grads[id.0]
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = store
            .params()
            .iter()
            .map(|p| vec![T::zero(); p.value.len()])
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update. Parameters whose gradient is exactly
    /// zero and whose moments are still zero are left untouched.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let one = T::one();
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = T::lit(lr * c2.sqrt() / c1);
        let eps = T::lit(self.eps * c2.sqrt());
        for ((p, g), (m, v)) in store
            .params_mut()
            .iter_mut()
            .zip(&grads.grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.value.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                if m[i] != T::zero() {
                    p.value[i] -= step_size * m[i] / (v[i].sqrt() + eps);
                }
            }
        }
    }
}
