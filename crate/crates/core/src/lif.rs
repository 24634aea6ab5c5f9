//! Leaky integrate-and-fire dynamics with hard reset and a rectangular
//! surrogate gradient.
//!
//! The membrane update is `v_pre = λ·v_prev + x_t`; a spike fires where
//! `v_pre >= v_th` and resets the membrane to zero. During backpropagation
//! the non-differentiable spike is replaced by a rectangle of height `a`
//! on `|v_pre − v_th| < halfwidth`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Tensor, TensorError, TensorRef};

#[derive(Debug, Error)]
pub enum LifError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("spike tensor holds non-binary value {value} at index {index}")]
    NonBinaryValue { index: usize, value: f32 },
    #[error("invalid LIF config: {0}")]
    InvalidConfig(String),
}

/// Neuron constants: decay λ, threshold, timestep count, and the surrogate
/// rectangle.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LifConfig {
    pub lambda: f32,
    pub v_th: f32,
    pub t_steps: usize,
    pub surrogate_a: f32,
    pub surrogate_halfwidth: f32,
}

impl Default for LifConfig {
    fn default() -> Self {
        LifConfig {
            lambda: 0.9,
            v_th: 1.0,
            t_steps: 2,
            surrogate_a: 1.0,
            surrogate_halfwidth: 0.5,
        }
    }
}

impl LifConfig {
    pub fn validate(&self) -> Result<(), LifError> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(LifError::InvalidConfig(format!("lambda {} not in (0, 1]", self.lambda)));
        }
        if self.v_th <= 0.0 {
            return Err(LifError::InvalidConfig(format!("v_th {} must be > 0", self.v_th)));
        }
        if self.t_steps == 0 {
            return Err(LifError::InvalidConfig("t_steps must be >= 1".into()));
        }
        if self.surrogate_a <= 0.0 || self.surrogate_halfwidth <= 0.0 {
            return Err(LifError::InvalidConfig("surrogate parameters must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-sequence membrane scratch; zeroed at the start of every sequence.
#[derive(Debug, Clone)]
pub struct LifState {
    pub membrane: Tensor,
}

impl LifState {
    pub fn zeros(shape: &[usize]) -> Self {
        LifState { membrane: Tensor::zeros(shape) }
    }
}

/// One membrane update step: returns `(v_next, spikes)`.
pub fn lif_step(cfg: &LifConfig, v_prev: &Tensor, x_t: &Tensor) -> Result<(Tensor, Tensor), LifError> {
    if v_prev.shape() != x_t.shape() {
        return Err(LifError::ShapeMismatch(v_prev.shape().to_vec(), x_t.shape().to_vec()));
    }
    let mut v_next = Tensor::zeros(x_t.shape());
    let mut spikes = Tensor::zeros(x_t.shape());
    for i in 0..x_t.len() {
        let v_pre = cfg.lambda * v_prev.data()[i] + x_t.data()[i];
        if v_pre >= cfg.v_th {
            spikes.data_mut()[i] = 1.0;
            v_next.data_mut()[i] = 0.0;
        } else {
            v_next.data_mut()[i] = v_pre;
        }
    }
    Ok((v_next, spikes))
}

/// Fold [`lif_step`] over the leading (time) axis of `inputs`, starting from
/// a zero membrane. State does not persist across calls.
pub fn lif_sequence(cfg: &LifConfig, inputs: &Tensor) -> Result<Tensor, LifError> {
    let shape = inputs.shape();
    assert!(!shape.is_empty(), "lif_sequence input must have a time axis");
    let t_len = shape[0];
    let step_shape = &shape[1..];
    let step_elems: usize = step_shape.iter().product();
    let mut state = LifState::zeros(step_shape);
    let mut out = Tensor::zeros(shape);
    for t in 0..t_len {
        let x_t = Tensor::new(step_shape, inputs.data()[t * step_elems..][..step_elems].to_vec());
        let (v_next, spikes) = lif_step(cfg, &state.membrane, &x_t)?;
        out.data_mut()[t * step_elems..][..step_elems].copy_from_slice(spikes.data());
        state.membrane = v_next;
    }
    Ok(out)
}

/// Rectangular surrogate: `a` where `|v_pre − v_th| < halfwidth`, else 0.
pub fn surrogate_grad(cfg: &LifConfig, v_pre: &Tensor) -> Tensor {
    Tensor::from_fn(v_pre.shape(), |i| {
        if (v_pre.data()[i] - cfg.v_th).abs() < cfg.surrogate_halfwidth {
            cfg.surrogate_a
        } else {
            0.0
        }
    })
}

/// Count active neurons in a spike tensor: `(n_active, n_total)`.
pub fn count_spikes(spikes: &Tensor) -> Result<(u64, u64), LifError> {
    count_spikes_slice(spikes.data())
}

/// Slice variant of [`count_spikes`] for graph node outputs.
pub fn count_spikes_slice(data: &[f32]) -> Result<(u64, u64), LifError> {
    let mut active = 0u64;
    for (i, &v) in data.iter().enumerate() {
        if (v - 1.0).abs() <= 1e-6 {
            active += 1;
        } else if v.abs() > 1e-6 {
            return Err(LifError::NonBinaryValue { index: i, value: v });
        }
    }
    Ok((active, data.len() as u64))
}

/// Recorded-graph LIF step: membrane integrate, spike, hard reset.
/// Returns `(spikes, v_next, v_pre)`. `v_prev = None` starts from a zero
/// membrane (the integrate step then reduces to the input itself).
pub fn lif_step_graph(
    g: &mut Graph,
    cfg: &LifConfig,
    v_prev: Option<TensorRef>,
    x_t: TensorRef,
) -> Result<(TensorRef, TensorRef, TensorRef), TensorError> {
    let v_pre = match v_prev {
        Some(v) => g.axpy(cfg.lambda, v, x_t)?,
        None => x_t,
    };
    let s = g.spike(v_pre, cfg.v_th, cfg.surrogate_a, cfg.surrogate_halfwidth);
    let v_next = g.lif_reset(v_pre, s)?;
    Ok((s, v_next, v_pre))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> LifConfig {
        LifConfig::default()
    }

    #[test]
    fn quiescent_with_zero_input() {
        let z = Tensor::zeros(&[4]);
        let (v, s) = lif_step(&cfg(), &z, &z).unwrap();
        assert_eq!(v.data(), &[0.0; 4]);
        assert_eq!(s.data(), &[0.0; 4]);
    }

    #[test]
    fn unit_input_fires_and_resets() {
        let v0 = Tensor::zeros(&[1]);
        let x = Tensor::full(&[1], 1.0);
        let (v, s) = lif_step(&cfg(), &v0, &x).unwrap();
        assert_eq!(s.data(), &[1.0]);
        assert_eq!(v.data(), &[0.0]);
    }

    #[test]
    fn half_input_first_spike_at_step_three() {
        // V1=0.5, V2=0.95, V3=1.355 -> spike at t=3.
        let inputs = Tensor::full(&[3, 1], 0.5);
        let spikes = lif_sequence(&cfg(), &inputs).unwrap();
        assert_eq!(spikes.data(), &[0.0, 0.0, 1.0]);
        let (active, total) = count_spikes(&spikes).unwrap();
        assert_eq!((active, total), (1, 3));
    }

    #[test]
    fn sequence_t1_is_single_step_from_zero() {
        let inputs = Tensor::new(&[1, 3], vec![0.2, 1.0, 5.0]);
        let seq = lif_sequence(&cfg(), &inputs).unwrap();
        let (_, step) = lif_step(&cfg(), &Tensor::zeros(&[3]), &Tensor::new(&[3], vec![0.2, 1.0, 5.0])).unwrap();
        assert_eq!(seq.data(), step.data());
    }

    #[test]
    fn suprathreshold_input_fires_every_step() {
        let inputs = Tensor::full(&[4, 2], 1.5);
        let spikes = lif_sequence(&cfg(), &inputs).unwrap();
        assert!(spikes.data().iter().all(|&s| s == 1.0));
    }

    #[test]
    fn surrogate_rectangle_points() {
        let c = cfg();
        let v = Tensor::new(&[3], vec![1.0, 1.6, 1.0 - 0.49]);
        let g = surrogate_grad(&c, &v);
        assert_eq!(g.data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn count_spikes_rejects_non_binary() {
        let t = Tensor::new(&[2], vec![1.0, 0.5]);
        assert!(matches!(count_spikes(&t), Err(LifError::NonBinaryValue { .. })));
        let ok = Tensor::new(&[3], vec![0.0, 1.0, 1.0]);
        assert_eq!(count_spikes(&ok).unwrap(), (2, 3));
    }

    #[test]
    fn lambda_one_no_spikes_conserves_sum() {
        let c = LifConfig { lambda: 1.0, v_th: 100.0, ..cfg() };
        let inputs = Tensor::new(&[3, 1], vec![0.5, 1.25, -0.75]);
        // Track the membrane manually through steps.
        let mut v = Tensor::zeros(&[1]);
        for t in 0..3 {
            let x = Tensor::new(&[1], vec![inputs.data()[t]]);
            let (vn, s) = lif_step(&c, &v, &x).unwrap();
            assert_eq!(s.data(), &[0.0]);
            v = vn;
        }
        assert!((v.data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn graph_lif_matches_plain_sequence() {
        let c = cfg();
        let vals: Vec<f32> = (0..2 * 6).map(|i| ((i * 37 % 11) as f32) * 0.2 - 0.4).collect();
        let inputs = Tensor::new(&[2, 6], vals.clone());
        let plain = lif_sequence(&c, &inputs).unwrap();

        let mut g = Graph::eval();
        let x0 = g.leaf_data(&[6], vals[0..6].to_vec());
        let x1 = g.leaf_data(&[6], vals[6..12].to_vec());
        let (s0, v1, _) = lif_step_graph(&mut g, &c, None, x0).unwrap();
        let (s1, _, _) = lif_step_graph(&mut g, &c, Some(v1), x1).unwrap();
        assert_eq!(g.value(s0), &plain.data()[0..6]);
        assert_eq!(g.value(s1), &plain.data()[6..12]);
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(LifConfig { lambda: 0.0, ..cfg() }.validate().is_err());
        assert!(LifConfig { t_steps: 0, ..cfg() }.validate().is_err());
        assert!(LifConfig { v_th: -1.0, ..cfg() }.validate().is_err());
    }
}
