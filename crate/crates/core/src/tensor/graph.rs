//! Reverse-mode autodiff over a dynamically recorded computation graph.
//!
//! Every forward operation appends a node to the tape; nodes are therefore
//! already in topological order and [`Graph::backward`] is a single reverse
//! sweep. Node outputs are reference-counted so fan-out shares storage, and
//! gradient accumulation across fan-out is additive.

use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, ConvGeom, Region};
use super::{broadcast_shape, broadcast_strides, numel, Tensor, TensorError};

/// Handle to a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(usize);

/// Stable identity of a model parameter across graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, k: f32 },
    Axpy { k: f32, x: usize, y: usize },
    Conv3d { x: usize, w: usize, b: usize, geom: ConvGeom, region: Region },
    Depthwise { x: usize, w: usize, b: usize, geom: ConvGeom },
    MaxPool { x: usize, in_dims: [usize; 3], out_dims: [usize; 3], argmax: Vec<u32> },
    Gap { x: usize, vol: usize },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch: usize,
        channels: usize,
        vol: usize,
        train: bool,
    },
    Gelu { x: usize },
    Sigmoid { x: usize },
    Linear { x: usize, w: usize, b: usize, batch: usize, f_in: usize, f_out: usize },
    Reshape { x: usize },
    Spike { v: usize, v_th: f32, height: f32, halfwidth: f32 },
    LifReset { v: usize, s: usize },
    MaskedCombine { a: usize, b: usize, mask: Rc<Vec<f32>>, literal: bool },
    AttnApply { x: usize, wc: usize, ws: usize, alpha: usize, beta: usize },
    MeanStack { xs: Vec<usize> },
    Sum { x: usize },
    CeLoss { logits: usize, labels: Vec<usize>, probs: Vec<f32> },
}

struct Node {
    shape: Vec<usize>,
    data: Rc<Vec<f32>>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph plus (after `backward`) its gradients.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    params: Vec<(ParamId, usize)>,
    param_memo: HashMap<usize, usize>,
    training: bool,
    consumed: bool,
}

impl Graph {
    pub fn new(training: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
            param_memo: HashMap::new(),
            training,
            consumed: false,
        }
    }

    pub fn train() -> Self {
        Graph::new(true)
    }

    pub fn eval() -> Self {
        Graph::new(false)
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, op: Op, needs_grad: bool) -> TensorRef {
        self.push_rc(shape, Rc::new(data), op, needs_grad)
    }

    fn push_rc(
        &mut self,
        shape: Vec<usize>,
        data: Rc<Vec<f32>>,
        op: Op,
        needs_grad: bool,
    ) -> TensorRef {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node { shape, data, op, needs_grad });
        self.grads.push(None);
        TensorRef(self.nodes.len() - 1)
    }

    fn ng(&self, t: TensorRef) -> bool {
        self.nodes[t.0].needs_grad
    }

    pub fn shape(&self, t: TensorRef) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn value(&self, t: TensorRef) -> &[f32] {
        &self.nodes[t.0].data
    }

    pub fn value_rc(&self, t: TensorRef) -> Rc<Vec<f32>> {
        Rc::clone(&self.nodes[t.0].data)
    }

    pub fn tensor(&self, t: TensorRef) -> Tensor {
        Tensor::new(&self.nodes[t.0].shape, self.nodes[t.0].data.as_ref().clone())
    }

    /// Whether this node is the direct output of a spike nonlinearity.
    pub fn is_spike(&self, t: TensorRef) -> bool {
        matches!(self.nodes[t.0].op, Op::Spike { .. })
    }

    /// Gradient of the most recent backward pass w.r.t. this node.
    pub fn grad(&self, t: TensorRef) -> Option<&[f32]> {
        self.grads[t.0].as_deref()
    }

    /// Gradients of all parameter leaves touched by this graph.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, Option<&[f32]>)> {
        self.params
            .iter()
            .map(move |&(pid, idx)| (pid, self.grads[idx].as_deref()))
    }

    // ---- leaves -------------------------------------------------------

    /// Constant input (no gradient).
    pub fn leaf(&mut self, t: &Tensor) -> TensorRef {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn leaf_data(&mut self, shape: &[usize], data: Vec<f32>) -> TensorRef {
        self.push(shape.to_vec(), data, Op::Leaf, false)
    }

    /// Leaf that participates in gradient computation (tests).
    pub fn leaf_grad(&mut self, shape: &[usize], data: Vec<f32>) -> TensorRef {
        self.push(shape.to_vec(), data, Op::Leaf, true)
    }

    /// Parameter leaf; repeated registration of the same id returns the same
    /// node so fan-out accumulates into one gradient.
    pub fn param(&mut self, pid: ParamId, shape: &[usize], data: Rc<Vec<f32>>, trainable: bool) -> TensorRef {
        if let Some(&idx) = self.param_memo.get(&pid.0) {
            return TensorRef(idx);
        }
        let t = self.push_rc(shape.to_vec(), data, Op::Leaf, trainable);
        self.param_memo.insert(pid.0, t.0);
        if trainable {
            self.params.push((pid, t.0));
        }
        t
    }

    // ---- elementwise ---------------------------------------------------

    fn binop(&mut self, a: TensorRef, b: TensorRef, which: u8) -> Result<TensorRef, TensorError> {
        let out_shape = broadcast_shape(&self.nodes[a.0].shape, &self.nodes[b.0].shape)?;
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let out = if self.nodes[a.0].shape == self.nodes[b.0].shape {
            da.iter()
                .zip(db.iter())
                .map(|(&x, &y)| match which {
                    0 => x + y,
                    1 => x - y,
                    _ => x * y,
                })
                .collect()
        } else {
            let sa = broadcast_strides(&self.nodes[a.0].shape, &out_shape);
            let sb = broadcast_strides(&self.nodes[b.0].shape, &out_shape);
            let mut out = vec![0f32; numel(&out_shape)];
            let mut idx = vec![0usize; out_shape.len()];
            let (mut ia, mut ib) = (0usize, 0usize);
            for o in out.iter_mut() {
                let (x, y) = (da[ia], db[ib]);
                *o = match which {
                    0 => x + y,
                    1 => x - y,
                    _ => x * y,
                };
                for ax in (0..out_shape.len()).rev() {
                    idx[ax] += 1;
                    ia += sa[ax];
                    ib += sb[ax];
                    if idx[ax] < out_shape[ax] {
                        break;
                    }
                    idx[ax] = 0;
                    ia -= sa[ax] * out_shape[ax];
                    ib -= sb[ax] * out_shape[ax];
                }
            }
            out
        };
        let ng = self.ng(a) || self.ng(b);
        let op = match which {
            0 => Op::Add { a: a.0, b: b.0 },
            1 => Op::Sub { a: a.0, b: b.0 },
            _ => Op::Mul { a: a.0, b: b.0 },
        };
        Ok(self.push(out_shape, out, op, ng))
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef, TensorError> {
        self.binop(a, b, 0)
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef, TensorError> {
        self.binop(a, b, 1)
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef, TensorError> {
        self.binop(a, b, 2)
    }

    pub fn scale(&mut self, x: TensorRef, k: f32) -> TensorRef {
        let data = self.nodes[x.0].data.iter().map(|&v| v * k).collect();
        let ng = self.ng(x);
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, data, Op::Scale { x: x.0, k }, ng)
    }

    /// `k·x + y` for same-shape tensors.
    pub fn axpy(&mut self, k: f32, x: TensorRef, y: TensorRef) -> Result<TensorRef, TensorError> {
        if self.nodes[x.0].shape != self.nodes[y.0].shape {
            return Err(TensorError::ShapeMismatch {
                context: "axpy",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[y.0].shape.clone(),
            });
        }
        let data = self.nodes[x.0]
            .data
            .iter()
            .zip(self.nodes[y.0].data.iter())
            .map(|(&a, &b)| a.mul_add(k, b))
            .collect();
        let ng = self.ng(x) || self.ng(y);
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, data, Op::Axpy { k, x: x.0, y: y.0 }, ng))
    }

    // ---- structured ops -------------------------------------------------

    fn conv_geom(
        &self,
        x: TensorRef,
        w: TensorRef,
        b: TensorRef,
        stride: usize,
        pad: usize,
        depthwise: bool,
    ) -> Result<ConvGeom, TensorError> {
        let xs = &self.nodes[x.0].shape;
        let ws = &self.nodes[w.0].shape;
        let bs = &self.nodes[b.0].shape;
        let bad = |context: &'static str| TensorError::ShapeMismatch {
            context,
            lhs: xs.clone(),
            rhs: ws.clone(),
        };
        if xs.len() != 5 || ws.len() != 5 {
            return Err(bad("conv3d rank"));
        }
        let (c_out, wc_in, k) = (ws[0], ws[1], ws[2]);
        if ws[3] != k || ws[4] != k {
            return Err(bad("conv3d kernel not cubic"));
        }
        if depthwise {
            if wc_in != 1 || c_out != xs[1] {
                return Err(bad("depthwise channel layout"));
            }
        } else if wc_in != xs[1] {
            return Err(bad("conv3d input channels"));
        }
        if bs.len() != 1 || bs[0] != c_out {
            return Err(TensorError::ShapeMismatch {
                context: "conv3d bias",
                lhs: bs.clone(),
                rhs: vec![c_out],
            });
        }
        let ext = |dim: usize| {
            kernels::conv_out_extent(dim, k, pad, stride).ok_or(
                TensorError::NonIntegralOutputExtent { dim, kernel: k, pad, stride },
            )
        };
        Ok(ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            c_out,
            k,
            stride,
            pad,
            in_d: xs[2],
            in_h: xs[3],
            in_w: xs[4],
            out_d: ext(xs[2])?,
            out_h: ext(xs[3])?,
            out_w: ext(xs[4])?,
        })
    }

    /// 3-D cross-correlation with per-channel bias. `region` restricts the
    /// computed output cells (everything outside stays 0).
    pub fn conv3d(
        &mut self,
        x: TensorRef,
        w: TensorRef,
        b: TensorRef,
        stride: usize,
        pad: usize,
        region: Option<Region>,
    ) -> Result<TensorRef, TensorError> {
        let geom = self.conv_geom(x, w, b, stride, pad, false)?;
        let region = region.unwrap_or_else(|| geom.full_region());
        let mut out = vec![0f32; geom.batch * geom.c_out * geom.out_vol()];
        kernels::conv3d_fwd(
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            &self.nodes[b.0].data,
            &geom,
            &region,
            &mut out,
        );
        let shape = vec![geom.batch, geom.c_out, geom.out_d, geom.out_h, geom.out_w];
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(shape, out, Op::Conv3d { x: x.0, w: w.0, b: b.0, geom, region }, ng))
    }

    /// Depthwise 3-D convolution: weight shape (C, 1, k, k, k).
    pub fn depthwise_conv3d(
        &mut self,
        x: TensorRef,
        w: TensorRef,
        b: TensorRef,
        stride: usize,
        pad: usize,
    ) -> Result<TensorRef, TensorError> {
        let geom = self.conv_geom(x, w, b, stride, pad, true)?;
        let mut out = vec![0f32; geom.batch * geom.c_out * geom.out_vol()];
        kernels::depthwise_fwd(
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            &self.nodes[b.0].data,
            &geom,
            &mut out,
        );
        let shape = vec![geom.batch, geom.c_out, geom.out_d, geom.out_h, geom.out_w];
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(shape, out, Op::Depthwise { x: x.0, w: w.0, b: b.0, geom }, ng))
    }

    pub fn maxpool3d(&mut self, x: TensorRef, k: usize, s: usize) -> Result<TensorRef, TensorError> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 5 {
            return Err(TensorError::ShapeMismatch {
                context: "maxpool3d rank",
                lhs: xs,
                rhs: vec![],
            });
        }
        let ext = |dim: usize| {
            kernels::conv_out_extent(dim, k, 0, s)
                .ok_or(TensorError::NonIntegralOutputExtent { dim, kernel: k, pad: 0, stride: s })
        };
        let in_dims = [xs[2], xs[3], xs[4]];
        let out_dims = [ext(xs[2])?, ext(xs[3])?, ext(xs[4])?];
        let out_vol: usize = out_dims.iter().product();
        let mut out = vec![0f32; xs[0] * xs[1] * out_vol];
        let mut argmax = vec![0u32; out.len()];
        kernels::maxpool_fwd(&self.nodes[x.0].data, xs[1], in_dims, k, s, out_dims, &mut out, &mut argmax);
        let shape = vec![xs[0], xs[1], out_dims[0], out_dims[1], out_dims[2]];
        let ng = self.ng(x);
        Ok(self.push(shape, out, Op::MaxPool { x: x.0, in_dims, out_dims, argmax }, ng))
    }

    pub fn global_avg_pool(&mut self, x: TensorRef) -> Result<TensorRef, TensorError> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 5 {
            return Err(TensorError::ShapeMismatch {
                context: "global_avg_pool rank",
                lhs: xs,
                rhs: vec![],
            });
        }
        let vol = xs[2] * xs[3] * xs[4];
        let mut out = vec![0f32; xs[0] * xs[1]];
        kernels::gap_fwd(&self.nodes[x.0].data, vol, &mut out);
        let ng = self.ng(x);
        Ok(self.push(vec![xs[0], xs[1], 1, 1, 1], out, Op::Gap { x: x.0, vol }, ng))
    }

    /// Batchnorm with explicitly supplied normalization statistics.
    /// Training mode uses batch statistics (callers update running stats);
    /// eval mode normalizes with the provided running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm3d(
        &mut self,
        x: TensorRef,
        gamma: TensorRef,
        beta: TensorRef,
        mean: &[f32],
        var: &[f32],
        eps: f32,
        train: bool,
    ) -> Result<TensorRef, TensorError> {
        let xs = self.nodes[x.0].shape.clone();
        let channels = xs[1];
        if self.nodes[gamma.0].shape != [channels] || self.nodes[beta.0].shape != [channels] {
            return Err(TensorError::ShapeMismatch {
                context: "batchnorm params",
                lhs: self.nodes[gamma.0].shape.clone(),
                rhs: vec![channels],
            });
        }
        let vol = xs[2] * xs[3] * xs[4];
        let batch = xs[0];
        let n = batch * channels * vol;
        let mut xhat = vec![0f32; n];
        let mut out = vec![0f32; n];
        let mut inv_std = vec![0f32; channels];
        kernels::bn_fwd(
            &self.nodes[x.0].data,
            batch,
            channels,
            vol,
            mean,
            var,
            &self.nodes[gamma.0].data,
            &self.nodes[beta.0].data,
            eps,
            &mut xhat,
            &mut out,
            &mut inv_std,
        );
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            xs,
            out,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                batch,
                channels,
                vol,
                train,
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, x: TensorRef) -> TensorRef {
        let mut out = vec![0f32; self.nodes[x.0].data.len()];
        kernels::gelu_fwd(&self.nodes[x.0].data, &mut out);
        let ng = self.ng(x);
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, Op::Gelu { x: x.0 }, ng)
    }

    pub fn sigmoid(&mut self, x: TensorRef) -> TensorRef {
        let mut out = vec![0f32; self.nodes[x.0].data.len()];
        kernels::sigmoid_fwd(&self.nodes[x.0].data, &mut out);
        let ng = self.ng(x);
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, Op::Sigmoid { x: x.0 }, ng)
    }

    pub fn linear(&mut self, x: TensorRef, w: TensorRef, b: TensorRef) -> Result<TensorRef, TensorError> {
        let xs = &self.nodes[x.0].shape;
        let ws = &self.nodes[w.0].shape;
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                context: "linear",
                lhs: xs.clone(),
                rhs: ws.clone(),
            });
        }
        let (batch, f_in, f_out) = (xs[0], xs[1], ws[0]);
        if self.nodes[b.0].shape != [f_out] {
            return Err(TensorError::ShapeMismatch {
                context: "linear bias",
                lhs: self.nodes[b.0].shape.clone(),
                rhs: vec![f_out],
            });
        }
        let mut out = vec![0f32; batch * f_out];
        kernels::linear_fwd(
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            &self.nodes[b.0].data,
            batch,
            f_in,
            f_out,
            &mut out,
        );
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            vec![batch, f_out],
            out,
            Op::Linear { x: x.0, w: w.0, b: b.0, batch, f_in, f_out },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: TensorRef, shape: &[usize]) -> Result<TensorRef, TensorError> {
        if numel(shape) != self.nodes[x.0].data.len() {
            return Err(TensorError::ShapeMismatch {
                context: "reshape",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let data = Rc::clone(&self.nodes[x.0].data);
        let ng = self.ng(x);
        Ok(self.push_rc(shape.to_vec(), data, Op::Reshape { x: x.0 }, ng))
    }

    /// Heaviside spike with a rectangular surrogate gradient: forward emits
    /// 1.0 where `v >= v_th`, backward passes `height` inside
    /// `|v - v_th| < halfwidth` and 0 outside.
    pub fn spike(&mut self, v: TensorRef, v_th: f32, height: f32, halfwidth: f32) -> TensorRef {
        let data = self.nodes[v.0]
            .data
            .iter()
            .map(|&x| if x >= v_th { 1.0 } else { 0.0 })
            .collect();
        let ng = self.ng(v);
        let shape = self.nodes[v.0].shape.clone();
        self.push(shape, data, Op::Spike { v: v.0, v_th, height, halfwidth }, ng)
    }

    /// Hard reset after a spike: `v_next = v·(1 − s)`. The spike mask is
    /// treated as a constant, so the reset path blocks gradient where a spike
    /// fired and is transparent elsewhere.
    pub fn lif_reset(&mut self, v: TensorRef, s: TensorRef) -> Result<TensorRef, TensorError> {
        if self.nodes[v.0].shape != self.nodes[s.0].shape {
            return Err(TensorError::ShapeMismatch {
                context: "lif_reset",
                lhs: self.nodes[v.0].shape.clone(),
                rhs: self.nodes[s.0].shape.clone(),
            });
        }
        let data = self.nodes[v.0]
            .data
            .iter()
            .zip(self.nodes[s.0].data.iter())
            .map(|(&v, &s)| if s > 0.5 { 0.0 } else { v })
            .collect();
        let ng = self.ng(v);
        let shape = self.nodes[v.0].shape.clone();
        Ok(self.push(shape, data, Op::LifReset { v: v.0, s: s.0 }, ng))
    }

    /// `mask⊙a + (1−mask)⊙b`, or `mask⊙a + mask⊙b` in literal mode.
    pub fn masked_combine(
        &mut self,
        a: TensorRef,
        b: TensorRef,
        mask: Rc<Vec<f32>>,
        literal: bool,
    ) -> Result<TensorRef, TensorError> {
        let sa = self.nodes[a.0].shape.clone();
        if sa != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                context: "masked_combine",
                lhs: sa,
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        // Mask covers one (d, h, w) slab and is tiled over batch/channel.
        let vol = mask.len();
        if numel(&sa) % vol != 0 {
            return Err(TensorError::ShapeMismatch {
                context: "masked_combine mask",
                lhs: sa,
                rhs: vec![vol],
            });
        }
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        let mut out = vec![0f32; da.len()];
        for (slab, (oa, ob)) in out
            .chunks_mut(vol)
            .zip(da.chunks(vol).zip(db.chunks(vol)))
        {
            for i in 0..vol {
                let m = mask[i];
                slab[i] = if literal {
                    m * (oa[i] + ob[i])
                } else {
                    m * oa[i] + (1.0 - m) * ob[i]
                };
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(sa, out, Op::MaskedCombine { a: a.0, b: b.0, mask, literal }, ng))
    }

    /// Attention gating `out = x ⊙ (α·w_c + β·w_s)` with `w_c` of shape
    /// (B, C, 1, 1, 1), `w_s` of shape (B, 1, D, H, W), and scalar α, β.
    pub fn attn_apply(
        &mut self,
        x: TensorRef,
        wc: TensorRef,
        ws: TensorRef,
        alpha: TensorRef,
        beta: TensorRef,
    ) -> Result<TensorRef, TensorError> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 5 {
            return Err(TensorError::ShapeMismatch {
                context: "attn_apply input rank",
                lhs: xs,
                rhs: vec![],
            });
        }
        let (b, c, d, h, w) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        if self.nodes[wc.0].shape != [b, c, 1, 1, 1] {
            return Err(TensorError::ShapeMismatch {
                context: "attn_apply channel map",
                lhs: self.nodes[wc.0].shape.clone(),
                rhs: vec![b, c, 1, 1, 1],
            });
        }
        if self.nodes[ws.0].shape != [b, 1, d, h, w] {
            return Err(TensorError::ShapeMismatch {
                context: "attn_apply spatial map",
                lhs: self.nodes[ws.0].shape.clone(),
                rhs: vec![b, 1, d, h, w],
            });
        }
        for p in [alpha, beta] {
            if self.nodes[p.0].shape != [1] {
                return Err(TensorError::ShapeMismatch {
                    context: "attn_apply scalar weight",
                    lhs: self.nodes[p.0].shape.clone(),
                    rhs: vec![1],
                });
            }
        }
        let vol = d * h * w;
        let (al, be) = (self.nodes[alpha.0].data[0], self.nodes[beta.0].data[0]);
        let xd = &self.nodes[x.0].data;
        let wcd = &self.nodes[wc.0].data;
        let wsd = &self.nodes[ws.0].data;
        let mut out = vec![0f32; xd.len()];
        for bi in 0..b {
            let ws_sl = &wsd[bi * vol..][..vol];
            for ci in 0..c {
                let g0 = al * wcd[bi * c + ci];
                let base = (bi * c + ci) * vol;
                for i in 0..vol {
                    out[base + i] = xd[base + i] * (g0 + be * ws_sl[i]);
                }
            }
        }
        let ng = self.ng(x) || self.ng(wc) || self.ng(ws) || self.ng(alpha) || self.ng(beta);
        Ok(self.push(
            xs,
            out,
            Op::AttnApply { x: x.0, wc: wc.0, ws: ws.0, alpha: alpha.0, beta: beta.0 },
            ng,
        ))
    }

    /// Arithmetic mean of same-shape tensors (used for temporal averaging).
    pub fn mean_stack(&mut self, xs: &[TensorRef]) -> Result<TensorRef, TensorError> {
        assert!(!xs.is_empty());
        let shape = self.nodes[xs[0].0].shape.clone();
        for t in xs {
            if self.nodes[t.0].shape != shape {
                return Err(TensorError::ShapeMismatch {
                    context: "mean_stack",
                    lhs: shape,
                    rhs: self.nodes[t.0].shape.clone(),
                });
            }
        }
        let n = numel(&shape);
        let inv = 1.0 / xs.len() as f32;
        let mut out = vec![0f32; n];
        for t in xs {
            for (o, &v) in out.iter_mut().zip(self.nodes[t.0].data.iter()) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o *= inv;
        }
        let ng = xs.iter().any(|&t| self.ng(t));
        Ok(self.push(shape, out, Op::MeanStack { xs: xs.iter().map(|t| t.0).collect() }, ng))
    }

    /// Sum of all elements (scalar output).
    pub fn sum(&mut self, x: TensorRef) -> TensorRef {
        let mut acc = 0f64;
        for &v in self.nodes[x.0].data.iter() {
            acc += v as f64;
        }
        let ng = self.ng(x);
        self.push(vec![1], vec![acc as f32], Op::Sum { x: x.0 }, ng)
    }

    /// Mean cross-entropy over the batch, numerically stable.
    pub fn ce_loss(&mut self, logits: TensorRef, labels: &[usize]) -> Result<TensorRef, TensorError> {
        let ls = self.nodes[logits.0].shape.clone();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(TensorError::ShapeMismatch {
                context: "ce_loss",
                lhs: ls,
                rhs: vec![labels.len()],
            });
        }
        let classes = ls[1];
        for &y in labels {
            if y >= classes {
                return Err(TensorError::LabelOutOfRange { label: y, classes });
            }
        }
        let mut probs = vec![0f32; labels.len() * classes];
        let loss = kernels::softmax_ce_fwd(&self.nodes[logits.0].data, labels, classes, &mut probs);
        let ng = self.ng(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CeLoss { logits: logits.0, labels: labels.to_vec(), probs },
            ng,
        ))
    }

    // ---- backward -------------------------------------------------------

    fn acc(grads: &mut [Option<Vec<f32>>], idx: usize, len: usize) -> &mut Vec<f32> {
        grads[idx].get_or_insert_with(|| vec![0f32; len])
    }

    /// Reverse sweep from a scalar loss; populates per-node gradients.
    pub fn backward(&mut self, loss: TensorRef) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        if self.nodes[loss.0].shape != [1] {
            return Err(TensorError::NotScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        self.consumed = true;
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let dout = self.grads[i].take().unwrap();
            self.dispatch(i, &dout);
            // Leaf gradients stay; interior gradients are kept too so tests
            // can inspect them.
            self.grads[i] = Some(dout);
        }
        Ok(())
    }

    fn dispatch(&mut self, i: usize, dout: &[f32]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let len_of = |idx: usize| nodes[idx].data.len();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(nodes[i].op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                for (idx, s) in [(*a, 1.0f32), (*b, sign)] {
                    if !nodes[idx].needs_grad {
                        continue;
                    }
                    let g = Self::acc(grads, idx, len_of(idx));
                    if nodes[idx].shape == nodes[i].shape {
                        for (gi, &d) in g.iter_mut().zip(dout.iter()) {
                            *gi += s * d;
                        }
                    } else {
                        reduce_broadcast(&nodes[i].shape, &nodes[idx].shape, dout, None, s, g);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if nodes[a].needs_grad {
                    let factor = &nodes[b].data;
                    let g = Self::acc(grads, a, len_of(a));
                    if nodes[a].shape == nodes[i].shape && nodes[b].shape == nodes[i].shape {
                        for ((gi, &d), &f) in g.iter_mut().zip(dout.iter()).zip(factor.iter()) {
                            *gi += d * f;
                        }
                    } else {
                        reduce_broadcast_mul(
                            &nodes[i].shape,
                            &nodes[a].shape,
                            &nodes[b].shape,
                            dout,
                            factor,
                            g,
                        );
                    }
                }
                if nodes[b].needs_grad {
                    let factor = &nodes[a].data;
                    let g = Self::acc(grads, b, len_of(b));
                    if nodes[a].shape == nodes[i].shape && nodes[b].shape == nodes[i].shape {
                        for ((gi, &d), &f) in g.iter_mut().zip(dout.iter()).zip(factor.iter()) {
                            *gi += d * f;
                        }
                    } else {
                        reduce_broadcast_mul(
                            &nodes[i].shape,
                            &nodes[b].shape,
                            &nodes[a].shape,
                            dout,
                            factor,
                            g,
                        );
                    }
                }
            }
            Op::Scale { x, k } => {
                let (x, k) = (*x, *k);
                if nodes[x].needs_grad {
                    let g = Self::acc(grads, x, len_of(x));
                    for (gi, &d) in g.iter_mut().zip(dout.iter()) {
                        *gi += k * d;
                    }
                }
            }
            Op::Axpy { k, x, y } => {
                let (k, x, y) = (*k, *x, *y);
                if nodes[x].needs_grad {
                    let g = Self::acc(grads, x, len_of(x));
                    for (gi, &d) in g.iter_mut().zip(dout.iter()) {
                        *gi += k * d;
                    }
                }
                if nodes[y].needs_grad {
                    let g = Self::acc(grads, y, len_of(y));
                    for (gi, &d) in g.iter_mut().zip(dout.iter()) {
                        *gi += d;
                    }
                }
            }
            Op::Conv3d { x, w, b, geom, region } => {
                let (x, w, b) = (*x, *w, *b);
                let (geom, region) = (*geom, *region);
                if nodes[x].needs_grad {
                    let wdata = Rc::clone(&nodes[w].data);
                    let g = Self::acc(grads, x, len_of(x));
                    kernels::conv3d_bwd_x(dout, &wdata, &geom, &region, g);
                }
                if nodes[w].needs_grad || nodes[b].needs_grad {
                    let xdata = Rc::clone(&nodes[x].data);
                    let mut dw = vec![0f32; len_of(w)];
                    let mut db = vec![0f32; len_of(b)];
                    kernels::conv3d_bwd_w(&xdata, dout, &geom, &region, &mut dw, &mut db);
                    if nodes[w].needs_grad {
                        let g = Self::acc(grads, w, len_of(w));
                        for (gi, d) in g.iter_mut().zip(dw) {
                            *gi += d;
                        }
                    }
                    if nodes[b].needs_grad {
                        let g = Self::acc(grads, b, len_of(b));
                        for (gi, d) in g.iter_mut().zip(db) {
                            *gi += d;
                        }
                    }
                }
            }
            Op::Depthwise { x, w, b, geom } => {
                let (x, w, b) = (*x, *w, *b);
                let geom = *geom;
                let xdata = Rc::clone(&nodes[x].data);
                let wdata = Rc::clone(&nodes[w].data);
                let mut dx = vec![0f32; len_of(x)];
                let mut dw = vec![0f32; len_of(w)];
                let mut db = vec![0f32; len_of(b)];
                kernels::depthwise_bwd(&xdata, dout, &wdata, &geom, &mut dx, &mut dw, &mut db);
                for (idx, src) in [(x, dx), (w, dw), (b, db)] {
                    if nodes[idx].needs_grad {
                        let g = Self::acc(grads, idx, len_of(idx));
                        for (gi, d) in g.iter_mut().zip(src) {
                            *gi += d;
                        }
                    }
                }
            }
            Op::MaxPool { x, in_dims, out_dims, argmax } => {
                let x = *x;
                if nodes[x].needs_grad {
                    let in_vol: usize = in_dims.iter().product();
                    let out_vol: usize = out_dims.iter().product();
                    let argmax = argmax.clone();
                    let g = Self::acc(grads, x, len_of(x));
                    kernels::maxpool_bwd(dout, &argmax, in_vol, out_vol, g);
                }
            }
            Op::Gap { x, vol } => {
                let (x, vol) = (*x, *vol);
                if nodes[x].needs_grad {
                    let g = Self::acc(grads, x, len_of(x));
                    kernels::gap_bwd(dout, vol, g);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch, channels, vol, train } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (batch, channels, vol, train) = (*batch, *channels, *vol, *train);
                let gdata = Rc::clone(&nodes[gamma].data);
                // xhat/inv_std borrowed from the op; clone the Rc-free slices.
                let (xh, is) = (xhat.clone(), inv_std.clone());
                let mut dx = vec![0f32; len_of(x)];
                let mut dgamma = vec![0f32; channels];
                let mut dbeta = vec![0f32; channels];
                if train {
                    kernels::bn_bwd_train(dout, &xh, &is, &gdata, batch, channels, vol, &mut dx, &mut dgamma, &mut dbeta);
                } else {
                    kernels::bn_bwd_eval(dout, &xh, &is, &gdata, batch, channels, vol, &mut dx, &mut dgamma, &mut dbeta);
                }
                for (idx, src) in [(x, dx), (gamma, dgamma), (beta, dbeta)] {
                    if nodes[idx].needs_grad {
                        let g = Self::acc(grads, idx, len_of(idx));
                        for (gi, d) in g.iter_mut().zip(src) {
                            *gi += d;
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let x = *x;
                if nodes[x].needs_grad {
                    let xdata = Rc::clone(&nodes[x].data);
                    let g = Self::acc(grads, x, len_of(x));
                    kernels::gelu_bwd(&xdata, dout, g);
                }
            }
            Op::Sigmoid { x } => {
                let x = *x;
                if nodes[x].needs_grad {
                    let ydata = Rc::clone(&nodes[i].data);
                    let g = Self::acc(grads, x, len_of(x));
                    kernels::sigmoid_bwd(&ydata, dout, g);
                }
            }
            Op::Linear { x, w, b, batch, f_in, f_out } => {
                let (x, w, b) = (*x, *w, *b);
                let (batch, f_in, f_out) = (*batch, *f_in, *f_out);
                let xdata = Rc::clone(&nodes[x].data);
                let wdata = Rc::clone(&nodes[w].data);
                let mut dx = vec![0f32; len_of(x)];
                let mut dw = vec![0f32; len_of(w)];
                let mut db = vec![0f32; len_of(b)];
                kernels::linear_bwd(&xdata, dout, &wdata, batch, f_in, f_out, &mut dx, &mut dw, &mut db);
                for (idx, src) in [(x, dx), (w, dw), (b, db)] {
                    if nodes[idx].needs_grad {
                        let g = Self::acc(grads, idx, len_of(idx));
                        for (gi, d) in g.iter_mut().zip(src) {
                            *gi += d;
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                let x = *x;
                if nodes[x].needs_grad {
                    let g = Self::acc(grads, x, len_of(x));
                    for (gi, &d) in g.iter_mut().zip(dout.iter()) {
                        *gi += d;
                    }
                }
            }
            Op::Spike { v, v_th, height, halfwidth } => {
                let (v, v_th, height, halfwidth) = (*v, *v_th, *height, *halfwidth);
                if nodes[v].needs_grad {
                    let vdata = Rc::clone(&nodes[v].data);
                    let g = Self::acc(grads, v, len_of(v));
                    for ((gi, &vv), &d) in g.iter_mut().zip(vdata.iter()).zip(dout.iter()) {
                        if (vv - v_th).abs() < halfwidth {
                            *gi += height * d;
                        }
                    }
                }
            }
            Op::LifReset { v, s } => {
                let (v, s) = (*v, *s);
                if nodes[v].needs_grad {
                    let sdata = Rc::clone(&nodes[s].data);
                    let g = Self::acc(grads, v, len_of(v));
                    for ((gi, &sv), &d) in g.iter_mut().zip(sdata.iter()).zip(dout.iter()) {
                        if sv <= 0.5 {
                            *gi += d;
                        }
                    }
                }
            }
            Op::MaskedCombine { a, b, mask, literal } => {
                let (a, b, literal) = (*a, *b, *literal);
                let mask = Rc::clone(mask);
                let vol = mask.len();
                if nodes[a].needs_grad {
                    let g = Self::acc(grads, a, len_of(a));
                    for (slab, gs) in dout.chunks(vol).zip(g.chunks_mut(vol)) {
                        for i in 0..vol {
                            gs[i] += mask[i] * slab[i];
                        }
                    }
                }
                if nodes[b].needs_grad {
                    let g = Self::acc(grads, b, len_of(b));
                    for (slab, gs) in dout.chunks(vol).zip(g.chunks_mut(vol)) {
                        for i in 0..vol {
                            let m = if literal { mask[i] } else { 1.0 - mask[i] };
                            gs[i] += m * slab[i];
                        }
                    }
                }
            }
            Op::AttnApply { x, wc, ws, alpha, beta } => {
                let (x, wc, ws, alpha, beta) = (*x, *wc, *ws, *alpha, *beta);
                let shape = nodes[i].shape.clone();
                let (b, c) = (shape[0], shape[1]);
                let vol = shape[2] * shape[3] * shape[4];
                let xd = Rc::clone(&nodes[x].data);
                let wcd = Rc::clone(&nodes[wc].data);
                let wsd = Rc::clone(&nodes[ws].data);
                let al = nodes[alpha].data[0];
                let be = nodes[beta].data[0];
                if nodes[x].needs_grad {
                    let g = Self::acc(grads, x, len_of(x));
                    for bi in 0..b {
                        let ws_sl = &wsd[bi * vol..][..vol];
                        for ci in 0..c {
                            let g0 = al * wcd[bi * c + ci];
                            let base = (bi * c + ci) * vol;
                            for v in 0..vol {
                                g[base + v] += dout[base + v] * (g0 + be * ws_sl[v]);
                            }
                        }
                    }
                }
                if nodes[wc].needs_grad {
                    let g = Self::acc(grads, wc, len_of(wc));
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * vol;
                            let mut acc = 0f64;
                            for v in 0..vol {
                                acc += (dout[base + v] * xd[base + v]) as f64;
                            }
                            g[bi * c + ci] += (al as f64 * acc) as f32;
                        }
                    }
                }
                if nodes[ws].needs_grad {
                    let g = Self::acc(grads, ws, len_of(ws));
                    for bi in 0..b {
                        let gs = &mut g[bi * vol..][..vol];
                        for ci in 0..c {
                            let base = (bi * c + ci) * vol;
                            for v in 0..vol {
                                gs[v] += be * dout[base + v] * xd[base + v];
                            }
                        }
                    }
                }
                if nodes[alpha].needs_grad {
                    let mut acc = 0f64;
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * vol;
                            let wcv = wcd[bi * c + ci] as f64;
                            let mut inner = 0f64;
                            for v in 0..vol {
                                inner += (dout[base + v] * xd[base + v]) as f64;
                            }
                            acc += wcv * inner;
                        }
                    }
                    Self::acc(grads, alpha, 1)[0] += acc as f32;
                }
                if nodes[beta].needs_grad {
                    let mut acc = 0f64;
                    for bi in 0..b {
                        let ws_sl = &wsd[bi * vol..][..vol];
                        for ci in 0..c {
                            let base = (bi * c + ci) * vol;
                            for v in 0..vol {
                                acc += (dout[base + v] * xd[base + v]) as f64 * ws_sl[v] as f64;
                            }
                        }
                    }
                    Self::acc(grads, beta, 1)[0] += acc as f32;
                }
            }
            Op::MeanStack { xs } => {
                let xs = xs.clone();
                let inv = 1.0 / xs.len() as f32;
                for idx in xs {
                    if nodes[idx].needs_grad {
                        let g = Self::acc(grads, idx, len_of(idx));
                        for (gi, &d) in g.iter_mut().zip(dout.iter()) {
                            *gi += inv * d;
                        }
                    }
                }
            }
            Op::Sum { x } => {
                let x = *x;
                if nodes[x].needs_grad {
                    let d = dout[0];
                    let g = Self::acc(grads, x, len_of(x));
                    for gi in g.iter_mut() {
                        *gi += d;
                    }
                }
            }
            Op::CeLoss { logits, labels, probs } => {
                let logits = *logits;
                if nodes[logits].needs_grad {
                    let classes = nodes[logits].shape[1];
                    let (labels, probs) = (labels.clone(), probs.clone());
                    let g = Self::acc(grads, logits, len_of(logits));
                    kernels::softmax_ce_bwd(&probs, &labels, classes, dout[0], g);
                }
            }
        }
    }
}

/// Accumulate `sign · dout` (optionally times a broadcast factor) into a
/// gradient buffer of the un-broadcast input shape.
fn reduce_broadcast(
    out_shape: &[usize],
    in_shape: &[usize],
    dout: &[f32],
    factor: Option<(&[f32], &[usize])>,
    sign: f32,
    g: &mut [f32],
) {
    let s_in = broadcast_strides(in_shape, out_shape);
    let s_f = factor.map(|(_, fs)| broadcast_strides(fs, out_shape));
    let mut idx = vec![0usize; out_shape.len()];
    let mut ii = 0usize;
    let mut fi = 0usize;
    for &d in dout.iter() {
        let contrib = match factor {
            Some((fd, _)) => d * fd[fi],
            None => d,
        };
        g[ii] += sign * contrib;
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            ii += s_in[ax];
            if let Some(sf) = &s_f {
                fi += sf[ax];
            }
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            ii -= s_in[ax] * out_shape[ax];
            if let Some(sf) = &s_f {
                fi -= sf[ax] * out_shape[ax];
            }
        }
    }
}

/// Broadcast-aware product-rule accumulation: `g += dout ⊙ factor`, reduced
/// onto `in_shape`.
fn reduce_broadcast_mul(
    out_shape: &[usize],
    in_shape: &[usize],
    factor_shape: &[usize],
    dout: &[f32],
    factor: &[f32],
    g: &mut [f32],
) {
    reduce_broadcast(out_shape, in_shape, dout, Some((factor, factor_shape)), 1.0, g);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::train();
        let x = g.leaf_grad(&[3], vec![1.0, 2.0, 3.0]);
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::train();
        let x = g.leaf_grad(&[2], vec![1.0, 2.0]);
        let y = g.mul(x, x).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn fanout_accumulates() {
        // z = x + x  =>  dz/dx = 2
        let mut g = Graph::train();
        let x = g.leaf_grad(&[2], vec![5.0, -1.0]);
        let z = g.add(x, x).unwrap();
        let l = g.sum(z);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn broadcast_outer_product() {
        let mut g = Graph::train();
        let a = g.leaf_grad(&[2, 1], vec![2.0, 3.0]);
        let b = g.leaf_grad(&[1, 3], vec![1.0, 10.0, 100.0]);
        let m = g.mul(a, b).unwrap();
        assert_eq!(g.shape(m), &[2, 3]);
        assert_eq!(g.value(m), &[2.0, 20.0, 200.0, 3.0, 30.0, 300.0]);
        let l = g.sum(m);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[111.0, 111.0]);
        assert_eq!(g.grad(b).unwrap(), &[5.0, 5.0, 5.0]);
    }

    #[test]
    fn add_zero_is_identity() {
        let mut g = Graph::eval();
        let x = g.leaf_data(&[4], vec![1.5, -2.5, 0.0, 7.25]);
        let z = g.leaf_data(&[4], vec![0.0; 4]);
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn elementwise_mul_example() {
        let mut g = Graph::eval();
        let a = g.leaf_data(&[3], vec![1.0, 2.0, 3.0]);
        let b = g.leaf_data(&[3], vec![4.0, 5.0, 6.0]);
        let m = g.mul(a, b).unwrap();
        assert_eq!(g.value(m), &[4.0, 10.0, 18.0]);
    }

    #[test]
    fn conv_identity_k1() {
        let mut g = Graph::eval();
        let x = g.leaf_data(&[1, 2, 2, 2, 2], (0..16).map(|i| i as f32).collect());
        let w = g.leaf_data(&[2, 2, 1, 1, 1], vec![1.0, 0.0, 0.0, 1.0]);
        let b = g.leaf_data(&[2], vec![0.0, 0.0]);
        let y = g.conv3d(x, w, b, 1, 0, None).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn double_backward_rejected() {
        let mut g = Graph::train();
        let x = g.leaf_grad(&[1], vec![1.0]);
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(TensorError::GraphConsumed)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::train();
        let x = g.leaf_grad(&[2], vec![1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(TensorError::NotScalarLoss(_))));
    }

    #[test]
    fn ce_saturated_logit() {
        let mut g = Graph::train();
        let logits = g.leaf_grad(&[1, 3], vec![1000.0, 0.0, 0.0]);
        let l = g.ce_loss(logits, &[0]).unwrap();
        assert!(g.value(l)[0] <= 1e-6);
    }

    #[test]
    fn ce_label_out_of_range() {
        let mut g = Graph::train();
        let logits = g.leaf_grad(&[1, 3], vec![0.0; 3]);
        assert!(matches!(
            g.ce_loss(logits, &[3]),
            Err(TensorError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn spike_forward_binary_and_surrogate_window() {
        let mut g = Graph::train();
        let v = g.leaf_grad(&[4], vec![0.2, 1.0, 1.45, 1.6]);
        let s = g.spike(v, 1.0, 1.0, 0.5);
        assert_eq!(g.value(s), &[0.0, 1.0, 1.0, 1.0]);
        assert!(g.is_spike(s));
        let l = g.sum(s);
        g.backward(l).unwrap();
        // |v-1| < 0.5 for 1.0 and 1.45; 0.2 and 1.6 are outside.
        assert_eq!(g.grad(v).unwrap(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn lif_reset_blocks_spiking_path() {
        let mut g = Graph::train();
        let v = g.leaf_grad(&[2], vec![0.8, 1.2]);
        let s = g.spike(v, 1.0, 1.0, 0.5);
        let vn = g.lif_reset(v, s).unwrap();
        assert_eq!(g.value(vn), &[0.8, 0.0]);
        let l = g.sum(vn);
        g.backward(l).unwrap();
        // Non-spiking element: transparent. Spiking element: blocked through
        // the reset (the spike output path is not part of this loss).
        assert_eq!(g.grad(v).unwrap(), &[1.0, 0.0]);
    }
}
