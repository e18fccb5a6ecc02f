//! Parameter storage, layers and the AdamW optimizer.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{invalid, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named parameter tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<F>) -> ParamId {
        self.names.push(name.to_string());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Replaces every tensor by name; names and shapes must match exactly.
    pub fn load(&mut self, named: &[(String, Tensor<F>)]) -> Result<()> {
        if named.len() != self.tensors.len() {
            return invalid(alloc::format!(
                "expected {} tensors, got {}",
                self.tensors.len(),
                named.len()
            ));
        }
        for (i, (name, t)) in named.iter().enumerate() {
            if *name != self.names[i] || t.shape() != self.tensors[i].shape() {
                return invalid(alloc::format!(
                    "tensor {i}: expected {} {:?}, got {name} {:?}",
                    self.names[i],
                    self.tensors[i].shape(),
                    t.shape()
                ));
            }
        }
        for (slot, (_, t)) in self.tensors.iter_mut().zip(named) {
            *slot = t.clone();
        }
        Ok(())
    }

    /// Places every parameter on the tape.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect())
    }
}

/// Tape variables for the parameters of one store, in store order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    /// Gradients for every parameter (zeros where none flowed).
    pub fn grads<F: Real>(&self, grads: &mut Gradients<F>, store: &ParamStore<F>) -> Vec<Tensor<F>> {
        self.0
            .iter()
            .zip(store.tensors())
            .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

pub(crate) fn normal_tensor<F: Real>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            F::of(v * std)
        })
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    /// Square kernel, He-normal initialised; `gain` scales the init.
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        gain: f64,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let w = store.add(
            &alloc::format!("{name}.weight"),
            normal_tensor(rng, &[cout, cin, k, k], gain * libm::sqrt(2.0 / fan_in)),
        );
        let b = store.add(&alloc::format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { w, b, stride, pad }
    }

    /// 3×3, stride 1, same padding.
    pub fn same3<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        Self::new(store, rng, name, cin, cout, 3, 1, 1, 1.0)
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Var {
        let y = tape.conv2d(x, p.var(self.w), self.stride, self.pad);
        tape.add_bias(y, p.var(self.b), 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
        gain: f64,
    ) -> Self {
        let w = store.add(
            &alloc::format!("{name}.weight"),
            normal_tensor(rng, &[dout, din], gain * libm::sqrt(1.0 / din as f64)),
        );
        let b = store.add(&alloc::format!("{name}.bias"), Tensor::zeros(&[dout]));
        Self { w, b }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Var {
        let y = tape.linear(x, p.var(self.w));
        let axis = tape.shape(y).len() - 1;
        tape.add_bias(y, p.var(self.b), axis)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    /// Standard moments and decay with the given learning rate.
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// AdamW with decoupled weight decay, minimising by default.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    step: i32,
}

impl<F: Real> AdamW<F> {
    pub fn new(config: AdamWConfig, shapes: &[&[usize]]) -> Self {
        Self {
            config,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
        }
    }

    pub fn for_store(config: AdamWConfig, store: &ParamStore<F>) -> Self {
        let shapes: Vec<&[usize]> = store.tensors().iter().map(|t| t.shape()).collect();
        Self::new(config, &shapes)
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// One descent step on `params` using `grads`.
    pub fn step(&mut self, params: &mut [Tensor<F>], grads: &[Tensor<F>]) {
        self.step_scaled(params, grads, 1.0)
    }

    /// One ascent step: follows `+grads`.
    pub fn ascend(&mut self, params: &mut [Tensor<F>], grads: &[Tensor<F>]) {
        self.step_scaled(params, grads, -1.0)
    }

    fn step_scaled(&mut self, params: &mut [Tensor<F>], grads: &[Tensor<F>], sign: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - libm::pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.step as f64);
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - c.beta1), F::of(1.0 - c.beta2));
        let step_size = F::of(c.lr / bc1);
        let decay = F::of(1.0 - c.lr * c.weight_decay);
        let inv_sqrt_bc2 = F::of(1.0 / libm::sqrt(bc2));
        let eps = F::of(c.eps);
        let s = F::of(sign);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                let gv = gv * s;
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                *pv *= decay;
                *pv -= step_size * *mv / ((*vv).sqrt() * inv_sqrt_bc2 + eps);
            }
        }
    }
}

/// Deterministic Fisher–Yates shuffle of `0..n`.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adamw_minimises_a_quadratic() {
        let mut p = alloc::vec![Tensor::<f64>::from_vec(&[2], alloc::vec![3.0, -2.0]).unwrap()];
        let mut opt = AdamW::new(
            AdamWConfig { weight_decay: 0.0, ..AdamWConfig::with_lr(0.1) },
            &[&[2]],
        );
        for _ in 0..500 {
            let g = p[0].map(|x| 2.0 * x);
            opt.step(&mut p, &[g]);
        }
        assert!(p[0].data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn adamw_first_step_matches_closed_form() {
        // After one step m̂ = g and v̂ = g², so the update is lr·g/(|g|+eps).
        let cfg = AdamWConfig::with_lr(0.1);
        let mut p = alloc::vec![Tensor::<f64>::from_vec(&[1], alloc::vec![1.0]).unwrap()];
        let mut opt = AdamW::new(cfg, &[&[1]]);
        opt.ascend(&mut p, &[Tensor::from_vec(&[1], alloc::vec![0.5]).unwrap()]);
        let want = 1.0 * (1.0 - 0.1 * 0.01) + 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p[0].data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn store_load_checks_names_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f32>::new();
        Dense::new(&mut s, &mut rng, "fc", 3, 2, 1.0);
        let named: Vec<(String, Tensor<f32>)> =
            s.iter().map(|(n, t)| (n.to_string(), t.map(|v| v + 1.0))).collect();
        let mut s2 = s.clone();
        s2.load(&named).unwrap();
        assert_ne!(s2, s);
        let mut bad = named.clone();
        bad[0].0 = "other".to_string();
        assert!(s2.load(&bad).is_err());
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut idx = shuffled_indices(50, &mut rng);
        idx.sort_unstable();
        assert_eq!(idx, (0..50).collect::<Vec<_>>());
    }
}
