//! Named parameter registry and storage.
//!
//! Layers allocate [`ParamId`]s through a [`ParamBuilder`] at construction
//! time; [`ParamBuilder::build`] then materializes every tensor with its
//! declared initializer, deterministically from a seed. The resulting
//! [`ParamStore`] owns data and gradient buffers; graphs borrow parameter
//! data by reference count.

use std::rc::Rc;

use rand::Rng;

use crate::rng;
use crate::tensor::{numel, Graph, TensorRef};

pub use crate::tensor::graph::ParamId;

/// Initialization scheme for one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f32),
    /// Uniform on ±√(1/fan_in).
    FanInUniform(usize),
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub trainable: bool,
}

/// Collects parameter declarations while the model is being wired.
#[derive(Debug, Default)]
pub struct ParamBuilder {
    specs: Vec<ParamSpec>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, trainable: bool) -> ParamId {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
            trainable,
        });
        ParamId(self.specs.len() - 1)
    }

    /// Materialize all declared parameters; initialization draws one derived
    /// PRNG stream per parameter so the result is a pure function of `seed`.
    pub fn build(self, seed: u64) -> ParamStore {
        let entries = self
            .specs
            .into_iter()
            .enumerate()
            .map(|(i, spec)| {
                let n = numel(&spec.shape);
                let data = match spec.init {
                    Init::Zeros => vec![0f32; n],
                    Init::Const(c) => vec![c; n],
                    Init::FanInUniform(fan_in) => {
                        let bound = (1.0 / fan_in as f32).sqrt();
                        let mut r = rng::stream(seed, 0x7061_7261, i as u64);
                        (0..n).map(|_| r.gen_range(-bound..=bound)).collect()
                    }
                };
                ParamEntry {
                    name: spec.name,
                    shape: spec.shape,
                    trainable: spec.trainable,
                    data: Rc::new(data),
                    grad: vec![0f32; n],
                }
            })
            .collect();
        ParamStore { entries }
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    data: Rc<Vec<f32>>,
    pub grad: Vec<f32>,
}

impl ParamEntry {
    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Owns every parameter tensor of a model plus its gradient buffer.
#[derive(Debug, Clone)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn entry(&self, pid: ParamId) -> &ParamEntry {
        &self.entries[pid.0]
    }

    pub fn data(&self, pid: ParamId) -> &[f32] {
        &self.entries[pid.0].data
    }

    pub fn data_rc(&self, pid: ParamId) -> Rc<Vec<f32>> {
        Rc::clone(&self.entries[pid.0].data)
    }

    /// Mutable access to parameter data (copy-on-write if a graph still
    /// shares the buffer).
    pub fn data_mut(&mut self, pid: ParamId) -> &mut Vec<f32> {
        Rc::make_mut(&mut self.entries[pid.0].data)
    }

    pub fn data_mut_by_index(&mut self, idx: usize) -> &mut Vec<f32> {
        Rc::make_mut(&mut self.entries[idx].data)
    }

    pub fn replace_data(&mut self, idx: usize, data: Vec<f32>) {
        assert_eq!(data.len(), numel(&self.entries[idx].shape));
        self.entries[idx].data = Rc::new(data);
    }

    pub fn grad(&self, pid: ParamId) -> &[f32] {
        &self.entries[pid.0].grad
    }

    pub fn grad_mut(&mut self, pid: ParamId) -> &mut [f32] {
        &mut self.entries[pid.0].grad
    }

    pub fn grad_by_index(&self, idx: usize) -> &[f32] {
        &self.entries[idx].grad
    }

    pub fn grad_mut_by_index(&mut self, idx: usize) -> &mut [f32] {
        &mut self.entries[idx].grad
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Register this parameter as a graph leaf.
    pub fn leaf(&self, g: &mut Graph, pid: ParamId) -> TensorRef {
        let e = &self.entries[pid.0];
        g.param(pid, &e.shape, Rc::clone(&e.data), e.trainable)
    }

    /// Add the gradients a finished graph computed into the store buffers.
    pub fn absorb_grads(&mut self, g: &Graph) {
        let updates: Vec<(usize, Vec<f32>)> = g
            .param_grads()
            .filter_map(|(pid, grad)| grad.map(|gr| (pid.0, gr.to_vec())))
            .collect();
        for (idx, gr) in updates {
            let dst = &mut self.entries[idx].grad;
            for (d, s) in dst.iter_mut().zip(gr) {
                *d += s;
            }
        }
    }

    /// Total element count of trainable parameters.
    pub fn trainable_elems(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| numel(&e.shape) as u64)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_is_deterministic() {
        let mk = || {
            let mut pb = ParamBuilder::new();
            let w = pb.add("w", &[4, 3], Init::FanInUniform(3), true);
            let b = pb.add("b", &[4], Init::Zeros, true);
            let s = pb.build(42);
            (s.data(w).to_vec(), s.data(b).to_vec())
        };
        assert_eq!(mk(), mk());
    }

    #[test]
    fn fan_in_bound_respected() {
        let mut pb = ParamBuilder::new();
        let w = pb.add("w", &[64, 27], Init::FanInUniform(27), true);
        let s = pb.build(7);
        let bound = (1.0f32 / 27.0).sqrt();
        assert!(s.data(w).iter().all(|v| v.abs() <= bound));
        assert!(s.data(w).iter().any(|v| v.abs() > bound * 0.5));
    }

    #[test]
    fn grad_absorb_accumulates() {
        let mut pb = ParamBuilder::new();
        let w = pb.add("w", &[2], Init::Const(1.0), true);
        let mut s = pb.build(0);
        let mut g = Graph::train();
        let wr = s.leaf(&mut g, w);
        let l = g.sum(wr);
        g.backward(l).unwrap();
        s.absorb_grads(&g);
        assert_eq!(s.grad(w), &[1.0, 1.0]);
        let mut g2 = Graph::train();
        let wr2 = s.leaf(&mut g2, w);
        let l2 = g2.sum(wr2);
        g2.backward(l2).unwrap();
        s.absorb_grads(&g2);
        assert_eq!(s.grad(w), &[2.0, 2.0]);
    }
}
