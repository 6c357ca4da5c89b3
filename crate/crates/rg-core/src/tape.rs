//! Reverse-mode autodiff over a per-operation recorded tape.
//!
//! Each forward call pushes one node holding its output value and enough
//! context for a hand-written adjoint. `backward` walks the nodes in
//! reverse, accumulating vector-Jacobian products in a fixed order, so
//! gradients are deterministic. Only the operations the fusion pipelines
//! need carry a backward rule; there is no general expression compiler.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::kernels;
use crate::param::Parameter;
use crate::tensor::{Real, Tensor};

/// Splat weights below this threshold leave the output cell at zero instead
/// of dividing by a vanishing denominator.
pub const SPLAT_WEIGHT_THRESHOLD: Real = 1e-8;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(u32);

impl VarId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Attention-probability dropout configuration (training mode only).
#[derive(Debug, Clone, Copy)]
pub struct DropoutSpec {
    pub rate: f64,
    pub seed: u64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: VarId,
        w: VarId,
        b: VarId,
    },
    Add {
        a: VarId,
        b: VarId,
    },
    Scale {
        x: VarId,
        k: Real,
    },
    AddFixed {
        x: VarId,
    },
    Log {
        x: VarId,
    },
    DotFixed {
        x: VarId,
        c: Tensor,
    },
    MulRowBroadcast {
        x: VarId,
        w: VarId,
    },
    Softmax {
        x: VarId,
        axis: usize,
    },
    Transpose {
        x: VarId,
    },
    Permute3 {
        x: VarId,
        perm: [usize; 3],
    },
    Reshape {
        x: VarId,
    },
    ReverseAxis0 {
        x: VarId,
    },
    ConcatRows {
        xs: Vec<VarId>,
    },
    SliceRows {
        x: VarId,
        start: usize,
    },
    BilinearSample {
        map: VarId,
        coords: Arc<Vec<(f64, f64)>>,
    },
    BilinearSplatNorm {
        values: VarId,
        coords: Arc<Vec<(f64, f64)>>,
        weight: Tensor,
    },
    MeanPool2 {
        x: VarId,
    },
    AddBroadcastLeading {
        x: VarId,
        b: VarId,
    },
    AddScaledVec {
        x: VarId,
        scale: VarId,
        vec: Vec<Real>,
    },
    ColumnMha {
        q: VarId,
        k: VarId,
        v: VarId,
        heads: usize,
        dropout: Option<DropoutSpec>,
    },
    BceWithLogitsMean {
        x: VarId,
        targets: Tensor,
    },
    MaskedL1Sum {
        x: VarId,
        targets: Tensor,
        mask: Tensor,
    },
    SumAll {
        x: VarId,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads[id.idx()].as_ref()
    }
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: BTreeMap<String, VarId>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.idx()].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> VarId {
        let id = VarId(self.nodes.len() as u32);
        self.nodes.push(Node { value, op });
        id
    }

    /// Inserts a constant input. It participates in gradient flow like any
    /// node but has no named binding.
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf)
    }

    /// Binds a named parameter as a leaf. Re-binding the same name returns
    /// the existing node, so shared parameters accumulate gradients from
    /// every use site.
    pub fn param(&mut self, name: &str, p: &Parameter) -> VarId {
        if let Some(&id) = self.bindings.get(name) {
            debug_assert_eq!(
                self.nodes[id.idx()].value.shape(),
                p.value.shape(),
                "parameter `{name}` re-bound with a different shape"
            );
            return id;
        }
        let id = self.push(p.value.clone(), Op::Leaf);
        self.bindings.insert(name.to_string(), id);
        id
    }

    pub fn binding(&self, name: &str) -> Option<VarId> {
        self.bindings.get(name).copied()
    }

    pub fn bindings(&self) -> impl Iterator<Item = (&str, VarId)> {
        self.bindings.iter().map(|(n, &id)| (n.as_str(), id))
    }

    // ── forward operations ──────────────────────────────────────────────

    /// y[n,o] = Σ_i x[n,i]·w[i,o] + b[o]
    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(CoreError::ShapeMismatch {
                context: "linear",
                expected: vec![xs[0], ws[0], ws[1]],
                got: [xs.as_slice(), ws.as_slice(), bs.as_slice()].concat(),
            });
        }
        let (n, din, dout) = (xs[0], ws[0], ws[1]);
        let mut out = vec![0.0; n * dout];
        kernels::matmul(self.value(x).data(), self.value(w).data(), n, din, dout, &mut out);
        let bias = self.value(b).data().to_vec();
        for row in out.chunks_mut(dout) {
            for (o, bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        Ok(self.push(Tensor::new(vec![n, dout], out)?, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(CoreError::ShapeMismatch {
                context: "add",
                expected: self.value(a).shape().to_vec(),
                got: self.value(b).shape().to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: VarId, k: Real) -> VarId {
        let value = self.value(x).map(|v| v * k);
        self.push(value, Op::Scale { x, k })
    }

    /// y = x + c for a constant tensor c.
    pub fn add_fixed(&mut self, x: VarId, c: &Tensor) -> Result<VarId> {
        if self.value(x).shape() != c.shape() {
            return Err(CoreError::ShapeMismatch {
                context: "add_fixed",
                expected: self.value(x).shape().to_vec(),
                got: c.shape().to_vec(),
            });
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| a + b)
            .collect();
        let shape = c.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::AddFixed { x }))
    }

    pub fn log(&mut self, x: VarId) -> VarId {
        let value = self.value(x).map(Real::ln);
        self.push(value, Op::Log { x })
    }

    /// Scalar y = Σ x ⊙ c for a constant tensor c.
    pub fn dot_fixed(&mut self, x: VarId, c: Tensor) -> Result<VarId> {
        if self.value(x).shape() != c.shape() {
            return Err(CoreError::ShapeMismatch {
                context: "dot_fixed",
                expected: self.value(x).shape().to_vec(),
                got: c.shape().to_vec(),
            });
        }
        let s: Real = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| a * b)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::DotFixed { x, c }))
    }

    /// y[c,l] = x[c,l] · w[l]
    pub fn mul_row_broadcast(&mut self, x: VarId, w: VarId) -> Result<VarId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 1 || xs[1] != ws[0] {
            return Err(CoreError::ShapeMismatch {
                context: "mul_row_broadcast",
                expected: xs,
                got: ws,
            });
        }
        let l = xs[1];
        let wd = self.value(w).data().to_vec();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * wd[i % l])
            .collect();
        Ok(self.push(Tensor::new(xs, data)?, Op::MulRowBroadcast { x, w }))
    }

    pub fn softmax(&mut self, x: VarId, axis: usize) -> Result<VarId> {
        let value = kernels::softmax(self.value(x), axis)?;
        Ok(self.push(value, Op::Softmax { x, axis }))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: VarId) -> Result<VarId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 {
            return Err(CoreError::InvalidArgument(format!(
                "transpose expects rank 2, got {xs:?}"
            )));
        }
        let value = transpose2d(self.value(x));
        Ok(self.push(value, Op::Transpose { x }))
    }

    /// 3-D axis permutation: output axis i is input axis perm[i].
    pub fn permute3(&mut self, x: VarId, perm: [usize; 3]) -> Result<VarId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 {
            return Err(CoreError::InvalidArgument(format!(
                "permute3 expects rank 3, got {xs:?}"
            )));
        }
        let value = permute3(self.value(x), perm);
        Ok(self.push(value, Op::Permute3 { x, perm }))
    }

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> Result<VarId> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Reverses the leading axis (whole sub-blocks).
    pub fn reverse_axis0(&mut self, x: VarId) -> VarId {
        let value = reverse_axis0(self.value(x));
        self.push(value, Op::ReverseAxis0 { x })
    }

    /// Stacks matrices [c_i, l] into [Σc_i, l].
    pub fn concat_rows(&mut self, xs: &[VarId]) -> Result<VarId> {
        if xs.is_empty() {
            return Err(CoreError::InvalidArgument("concat_rows of nothing".into()));
        }
        let l = self.value(xs[0]).shape()[1];
        let mut rows = 0;
        for &id in xs {
            let s = self.value(id).shape();
            if s.len() != 2 || s[1] != l {
                return Err(CoreError::ShapeMismatch {
                    context: "concat_rows",
                    expected: vec![s[0], l],
                    got: s.to_vec(),
                });
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * l);
        for &id in xs {
            data.extend_from_slice(self.value(id).data());
        }
        Ok(self.push(
            Tensor::new(vec![rows, l], data)?,
            Op::ConcatRows { xs: xs.to_vec() },
        ))
    }

    /// Rows [start, start+len) of a matrix.
    pub fn slice_rows(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 || start + len > xs[0] {
            return Err(CoreError::InvalidArgument(format!(
                "slice_rows [{start}, {}) out of range for {xs:?}",
                start + len
            )));
        }
        let l = xs[1];
        let data = self.value(x).data()[start * l..(start + len) * l].to_vec();
        Ok(self.push(Tensor::new(vec![len, l], data)?, Op::SliceRows { x, start }))
    }

    /// Bilinear sample of a C×H×W map at fixed coordinates; zero padding.
    pub fn bilinear_sample(&mut self, map: VarId, coords: Arc<Vec<(f64, f64)>>) -> Result<VarId> {
        if self.value(map).shape().len() != 3 {
            return Err(CoreError::InvalidArgument(
                "bilinear_sample expects a C×H×W map".into(),
            ));
        }
        let value = kernels::bilinear_sample_2d(self.value(map), &coords);
        Ok(self.push(value, Op::BilinearSample { map, coords }))
    }

    /// Splats C×len values at fixed coordinates onto an H×W grid and
    /// normalizes by accumulated weight (zero where weight is negligible).
    pub fn bilinear_splat_norm(
        &mut self,
        values: VarId,
        coords: Arc<Vec<(f64, f64)>>,
        h: usize,
        w: usize,
    ) -> Result<VarId> {
        let vs = self.value(values).shape().to_vec();
        if vs.len() != 2 || vs[1] != coords.len() {
            return Err(CoreError::ShapeMismatch {
                context: "bilinear_splat_norm",
                expected: vec![vs[0], coords.len()],
                got: vs,
            });
        }
        let (accum, weight) = kernels::bilinear_splat_2d(self.value(values), &coords, h, w);
        let c = vs[0];
        let mut out = accum.into_data();
        let wd = weight.data();
        for ch in 0..c {
            for cell in 0..h * w {
                let idx = ch * h * w + cell;
                if wd[cell] > SPLAT_WEIGHT_THRESHOLD {
                    out[idx] /= wd[cell];
                } else {
                    out[idx] = 0.0;
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![c, h, w], out)?,
            Op::BilinearSplatNorm {
                values,
                coords,
                weight,
            },
        ))
    }

    pub fn mean_pool2(&mut self, x: VarId) -> Result<VarId> {
        let value = kernels::mean_pool2(self.value(x))?;
        Ok(self.push(value, Op::MeanPool2 { x }))
    }

    /// y[i, ...] = x[i, ...] + b[...] for every leading slice i.
    pub fn add_broadcast_leading(&mut self, x: VarId, b: VarId) -> Result<VarId> {
        let xs = self.value(x).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() < 2 || xs[1..] != bs[..] {
            return Err(CoreError::ShapeMismatch {
                context: "add_broadcast_leading",
                expected: xs,
                got: bs,
            });
        }
        let block = self.value(b).numel();
        let bd = self.value(b).data().to_vec();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % block])
            .collect();
        Ok(self.push(Tensor::new(xs, data)?, Op::AddBroadcastLeading { x, b }))
    }

    /// y[w,h,c] = x[w,h,c] + scale · vec[h], with a learnable scalar scale.
    pub fn add_scaled_vec(&mut self, x: VarId, scale: VarId, vec: Vec<Real>) -> Result<VarId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 || xs[1] != vec.len() || self.value(scale).numel() != 1 {
            return Err(CoreError::InvalidArgument(format!(
                "add_scaled_vec: shape {xs:?} incompatible with vec of {} and scalar scale",
                vec.len()
            )));
        }
        let s = self.value(scale).item();
        let (h, c) = (xs[1], xs[2]);
        let mut data = self.value(x).data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            let hh = (i / c) % h;
            *v += s * vec[hh];
        }
        Ok(self.push(
            Tensor::new(xs, data)?,
            Op::AddScaledVec { x, scale, vec },
        ))
    }

    /// Scaled dot-product multi-head attention per leading (column) slice.
    /// q is [W, Hq, d]; k and v are [W, Hk, d]; no attention crosses
    /// columns. Dropout, when given, masks attention probabilities.
    pub fn column_mha(
        &mut self,
        q: VarId,
        k: VarId,
        v: VarId,
        heads: usize,
        dropout: Option<DropoutSpec>,
    ) -> Result<VarId> {
        let (qs, ks, vs) = (
            self.value(q).shape().to_vec(),
            self.value(k).shape().to_vec(),
            self.value(v).shape().to_vec(),
        );
        if qs.len() != 3 || ks.len() != 3 || ks != vs || qs[0] != ks[0] || qs[2] != ks[2] {
            return Err(CoreError::ShapeMismatch {
                context: "column_mha",
                expected: qs,
                got: ks,
            });
        }
        let d = qs[2];
        if heads == 0 || d % heads != 0 {
            return Err(CoreError::InvalidArgument(format!(
                "column_mha: embed dim {d} not divisible by {heads} heads"
            )));
        }
        let value = column_mha_forward(self.value(q), self.value(k), self.value(v), heads, dropout);
        Ok(self.push(
            value,
            Op::ColumnMha {
                q,
                k,
                v,
                heads,
                dropout,
            },
        ))
    }

    /// Mean binary cross-entropy between logits x and fixed targets in [0,1].
    pub fn bce_with_logits_mean(&mut self, x: VarId, targets: Tensor) -> Result<VarId> {
        if self.value(x).numel() != targets.numel() {
            return Err(CoreError::ShapeMismatch {
                context: "bce_with_logits_mean",
                expected: self.value(x).shape().to_vec(),
                got: targets.shape().to_vec(),
            });
        }
        let n = targets.numel() as Real;
        let s: Real = self
            .value(x)
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::BceWithLogitsMean { x, targets }))
    }

    /// Σ_{k,l} mask[l] · |x[k,l] − targets[k,l]|
    pub fn masked_l1_sum(&mut self, x: VarId, targets: Tensor, mask: Tensor) -> Result<VarId> {
        let xs = self.value(x).shape().to_vec();
        if xs != targets.shape() || xs.len() != 2 || mask.numel() != xs[1] {
            return Err(CoreError::ShapeMismatch {
                context: "masked_l1_sum",
                expected: xs,
                got: targets.shape().to_vec(),
            });
        }
        let l = xs[1];
        let s: Real = self
            .value(x)
            .data()
            .iter()
            .zip(targets.data())
            .enumerate()
            .map(|(i, (&a, &t))| mask.data()[i % l] * (a - t).abs())
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::MaskedL1Sum { x, targets, mask }))
    }

    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let s: Real = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { x })
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Accumulates vector-Jacobian products from `loss` (seeded with ones)
    /// down to every reachable node.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = Tensor::filled(self.value(loss).shape(), 1.0);
        grads[loss.idx()] = Some(seed);

        for i in (0..=loss.idx()).rev() {
            let Some(dy) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            self.apply_vjp(node, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn apply_vjp(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.value(*x).shape(), self.value(*w).shape());
                let (n, din, dout) = (xs[0], ws[0], ws[1]);
                // dx = dy · wᵀ
                let mut dx = vec![0.0; n * din];
                kernels::matmul_a_bt(dy.data(), self.value(*w).data(), n, dout, din, &mut dx);
                add_into(grads, *x, self.value(*x).shape(), &dx);
                // dw = xᵀ · dy
                let gw = grad_slot(grads, *w, self.value(*w).shape());
                kernels::matmul_at_b_acc(self.value(*x).data(), dy.data(), n, din, dout, gw);
                // db = column sums of dy
                let gb = grad_slot(grads, *b, self.value(*b).shape());
                for row in dy.data().chunks(dout) {
                    for (g, &v) in gb.iter_mut().zip(row) {
                        *g += v;
                    }
                }
            }
            Op::Add { a, b } => {
                add_into(grads, *a, self.value(*a).shape(), dy.data());
                add_into(grads, *b, self.value(*b).shape(), dy.data());
            }
            Op::Scale { x, k } => {
                let dx: Vec<Real> = dy.data().iter().map(|&v| v * k).collect();
                add_into(grads, *x, self.value(*x).shape(), &dx);
            }
            Op::AddFixed { x } => {
                add_into(grads, *x, self.value(*x).shape(), dy.data());
            }
            Op::Log { x } => {
                let dx: Vec<Real> = dy
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| g / v)
                    .collect();
                add_into(grads, *x, self.value(*x).shape(), &dx);
            }
            Op::DotFixed { x, c } => {
                let g = dy.item();
                let dx: Vec<Real> = c.data().iter().map(|&v| v * g).collect();
                add_into(grads, *x, self.value(*x).shape(), &dx);
            }
            Op::MulRowBroadcast { x, w } => {
                let l = self.value(*w).numel();
                let wd = self.value(*w).data();
                let xd = self.value(*x).data();
                let dx: Vec<Real> = dy
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| g * wd[i % l])
                    .collect();
                add_into(grads, *x, self.value(*x).shape(), &dx);
                let gw = grad_slot(grads, *w, self.value(*w).shape());
                for (i, &g) in dy.data().iter().enumerate() {
                    gw[i % l] += g * xd[i];
                }
            }
            Op::Softmax { x, axis } => {
                // dx = y ⊙ (dy − Σ_axis dy ⊙ y)
                let y = &node.value;
                let shape = y.shape();
                let axis_len = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let mut dx = vec![0.0; y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * axis_len * inner + i;
                        let mut dot = 0.0;
                        for a in 0..axis_len {
                            let idx = base + a * inner;
                            dot += dy.data()[idx] * y.data()[idx];
                        }
                        for a in 0..axis_len {
                            let idx = base + a * inner;
                            dx[idx] = y.data()[idx] * (dy.data()[idx] - dot);
                        }
                    }
                }
                add_into(grads, *x, self.value(*x).shape(), &dx);
            }
            Op::Transpose { x } => {
                let dt = transpose2d(dy);
                add_into(grads, *x, self.value(*x).shape(), dt.data());
            }
            Op::Permute3 { x, perm } => {
                let inv = inverse_perm3(*perm);
                let dt = permute3(dy, inv);
                add_into(grads, *x, self.value(*x).shape(), dt.data());
            }
            Op::Reshape { x } => {
                add_into(grads, *x, self.value(*x).shape(), dy.data());
            }
            Op::ReverseAxis0 { x } => {
                let dt = reverse_axis0(dy);
                add_into(grads, *x, self.value(*x).shape(), dt.data());
            }
            Op::ConcatRows { xs } => {
                let l = dy.shape()[1];
                let mut row = 0;
                for &id in xs {
                    let rows = self.value(id).shape()[0];
                    add_into(
                        grads,
                        id,
                        self.value(id).shape(),
                        &dy.data()[row * l..(row + rows) * l],
                    );
                    row += rows;
                }
            }
            Op::SliceRows { x, start } => {
                let l = dy.shape()[1];
                let g = grad_slot(grads, *x, self.value(*x).shape());
                for (i, &v) in dy.data().iter().enumerate() {
                    g[start * l + i] += v;
                }
            }
            Op::BilinearSample { map, coords } => {
                // Adjoint of sampling is unnormalized splatting.
                let (acc, _) = kernels::bilinear_splat_2d(
                    dy,
                    coords,
                    self.value(*map).shape()[1],
                    self.value(*map).shape()[2],
                );
                add_into(grads, *map, self.value(*map).shape(), acc.data());
            }
            Op::BilinearSplatNorm {
                values,
                coords,
                weight,
            } => {
                // out = splat(values)/weight, so the adjoint is a bilinear
                // sample of dy/weight at the same coordinates.
                let shape = node.value.shape();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let mut tmp = vec![0.0; c * h * w];
                let wd = weight.data();
                for ch in 0..c {
                    for cell in 0..h * w {
                        if wd[cell] > SPLAT_WEIGHT_THRESHOLD {
                            tmp[ch * h * w + cell] = dy.data()[ch * h * w + cell] / wd[cell];
                        }
                    }
                }
                let tmp = Tensor::new(vec![c, h, w], tmp)?;
                let dv = kernels::bilinear_sample_2d(&tmp, coords);
                add_into(grads, *values, self.value(*values).shape(), dv.data());
            }
            Op::MeanPool2 { x } => {
                let xs = self.value(*x).shape();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for r in 0..h {
                        for cc in 0..w {
                            dx[ch * h * w + r * w + cc] =
                                0.25 * dy.data()[ch * oh * ow + (r / 2) * ow + cc / 2];
                        }
                    }
                }
                add_into(grads, *x, xs, &dx);
            }
            Op::AddBroadcastLeading { x, b } => {
                add_into(grads, *x, self.value(*x).shape(), dy.data());
                let block = self.value(*b).numel();
                let gb = grad_slot(grads, *b, self.value(*b).shape());
                for (i, &v) in dy.data().iter().enumerate() {
                    gb[i % block] += v;
                }
            }
            Op::AddScaledVec { x, scale, vec } => {
                add_into(grads, *x, self.value(*x).shape(), dy.data());
                let xs = self.value(*x).shape();
                let (h, c) = (xs[1], xs[2]);
                let mut ds = 0.0;
                for (i, &v) in dy.data().iter().enumerate() {
                    ds += v * vec[(i / c) % h];
                }
                let gs = grad_slot(grads, *scale, self.value(*scale).shape());
                gs[0] += ds;
            }
            Op::ColumnMha {
                q,
                k,
                v,
                heads,
                dropout,
            } => {
                let (dq, dk, dv) = column_mha_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    dy,
                    *heads,
                    *dropout,
                );
                add_into(grads, *q, self.value(*q).shape(), dq.data());
                add_into(grads, *k, self.value(*k).shape(), dk.data());
                add_into(grads, *v, self.value(*v).shape(), dv.data());
            }
            Op::BceWithLogitsMean { x, targets } => {
                let g = dy.item() / targets.numel() as Real;
                let dx: Vec<Real> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&z, &t)| g * (sigmoid(z) - t))
                    .collect();
                add_into(grads, *x, self.value(*x).shape(), &dx);
            }
            Op::MaskedL1Sum { x, targets, mask } => {
                let g = dy.item();
                let l = mask.numel();
                let dx: Vec<Real> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(targets.data())
                    .enumerate()
                    .map(|(i, (&a, &t))| g * mask.data()[i % l] * sign(a - t))
                    .collect();
                add_into(grads, *x, self.value(*x).shape(), &dx);
            }
            Op::SumAll { x } => {
                let g = dy.item();
                let dx = vec![g; self.value(*x).numel()];
                add_into(grads, *x, self.value(*x).shape(), &dx);
            }
        }
        Ok(())
    }

    /// Adds the gradients of every bound parameter into `Parameter::grad`,
    /// walking the group in its deterministic visit order.
    pub fn accumulate_into<G: crate::param::ParamGroup + ?Sized>(
        &self,
        grads: &Gradients,
        group: &mut G,
    ) {
        group.for_each_mut(&mut |name, p| {
            if let Some(&id) = self.bindings.get(name) {
                if let Some(g) = grads.get(id) {
                    for (acc, &v) in p.grad.data_mut().iter_mut().zip(g.data()) {
                        *acc += v;
                    }
                }
            }
        });
    }
}

fn sigmoid(z: Real) -> Real {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn sign(v: Real) -> Real {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Tensor>], id: VarId, shape: &[usize]) -> &'a mut [Real] {
    grads[id.idx()]
        .get_or_insert_with(|| Tensor::zeros(shape))
        .data_mut()
}

fn add_into(grads: &mut [Option<Tensor>], id: VarId, shape: &[usize], delta: &[Real]) {
    let slot = grad_slot(grads, id, shape);
    debug_assert_eq!(slot.len(), delta.len());
    for (g, &v) in slot.iter_mut().zip(delta) {
        *g += v;
    }
}

fn transpose2d(x: &Tensor) -> Tensor {
    let (n, m) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = x.data()[i * m + j];
        }
    }
    Tensor::new(vec![m, n], out).expect("shape by construction")
}

fn permute3(x: &Tensor, perm: [usize; 3]) -> Tensor {
    let s = x.shape();
    let out_shape = [s[perm[0]], s[perm[1]], s[perm[2]]];
    let mut out = vec![0.0; x.numel()];
    let strides = [s[1] * s[2], s[2], 1];
    for a in 0..out_shape[0] {
        for b in 0..out_shape[1] {
            for c in 0..out_shape[2] {
                let mut idx = [0usize; 3];
                idx[perm[0]] = a;
                idx[perm[1]] = b;
                idx[perm[2]] = c;
                let src = idx[0] * strides[0] + idx[1] * strides[1] + idx[2];
                out[(a * out_shape[1] + b) * out_shape[2] + c] = x.data()[src];
            }
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("shape by construction")
}

fn inverse_perm3(perm: [usize; 3]) -> [usize; 3] {
    let mut inv = [0usize; 3];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn reverse_axis0(x: &Tensor) -> Tensor {
    let n = x.shape()[0];
    let block = x.numel() / n;
    let mut out = vec![0.0; x.numel()];
    for i in 0..n {
        out[(n - 1 - i) * block..(n - i) * block].copy_from_slice(&x.data()[i * block..(i + 1) * block]);
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape by construction")
}

fn dropout_mask(shape: usize, spec: &DropoutSpec) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..shape).map(|_| rng.random::<f64>() >= spec.rate).collect()
}

fn column_mha_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    dropout: Option<DropoutSpec>,
) -> Tensor {
    let (w, hq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let hk = k.shape()[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as Real).sqrt();
    let mask = dropout
        .as_ref()
        .map(|spec| dropout_mask(w * heads * hq * hk, spec));
    let keep = dropout.map_or(1.0, |s| 1.0 - s.rate as Real);

    let mut out = vec![0.0; w * hq * d];
    let mut qh = vec![0.0; hq * dh];
    let mut kh = vec![0.0; hk * dh];
    let mut vh = vec![0.0; hk * dh];
    let mut scores = vec![0.0; hq * hk];
    let mut oh = vec![0.0; hq * dh];

    for col in 0..w {
        for head in 0..heads {
            gather_head(q.data(), col, head, hq, d, dh, &mut qh);
            gather_head(k.data(), col, head, hk, d, dh, &mut kh);
            gather_head(v.data(), col, head, hk, d, dh, &mut vh);
            kernels::matmul_a_bt(&qh, &kh, hq, dh, hk, &mut scores);
            for s in scores.iter_mut() {
                *s *= scale;
            }
            softmax_rows(&mut scores, hq, hk);
            if let Some(mask) = &mask {
                let base = (col * heads + head) * hq * hk;
                for (i, s) in scores.iter_mut().enumerate() {
                    *s = if mask[base + i] { *s / keep } else { 0.0 };
                }
            }
            kernels::matmul(&scores, &vh, hq, hk, dh, &mut oh);
            scatter_head(&oh, col, head, hq, d, dh, &mut out);
        }
    }
    Tensor::new(vec![w, hq, d], out).expect("shape by construction")
}

fn column_mha_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    dy: &Tensor,
    heads: usize,
    dropout: Option<DropoutSpec>,
) -> (Tensor, Tensor, Tensor) {
    let (w, hq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let hk = k.shape()[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as Real).sqrt();
    let mask = dropout
        .as_ref()
        .map(|spec| dropout_mask(w * heads * hq * hk, spec));
    let keep = dropout.map_or(1.0, |s| 1.0 - s.rate as Real);

    let mut dq = vec![0.0; w * hq * d];
    let mut dk = vec![0.0; w * hk * d];
    let mut dv = vec![0.0; w * hk * d];

    let mut qh = vec![0.0; hq * dh];
    let mut kh = vec![0.0; hk * dh];
    let mut vh = vec![0.0; hk * dh];
    let mut probs = vec![0.0; hq * hk];
    let mut probs_dropped = vec![0.0; hq * hk];
    let mut doh = vec![0.0; hq * dh];
    let mut dvh = vec![0.0; hk * dh];
    let mut dp = vec![0.0; hq * hk];
    let mut dqh = vec![0.0; hq * dh];
    let mut dkh = vec![0.0; hk * dh];

    for col in 0..w {
        for head in 0..heads {
            gather_head(q.data(), col, head, hq, d, dh, &mut qh);
            gather_head(k.data(), col, head, hk, d, dh, &mut kh);
            gather_head(v.data(), col, head, hk, d, dh, &mut vh);
            gather_head(dy.data(), col, head, hq, d, dh, &mut doh);

            // Recompute probabilities instead of caching them.
            kernels::matmul_a_bt(&qh, &kh, hq, dh, hk, &mut probs);
            for s in probs.iter_mut() {
                *s *= scale;
            }
            softmax_rows(&mut probs, hq, hk);
            probs_dropped.copy_from_slice(&probs);
            if let Some(mask) = &mask {
                let base = (col * heads + head) * hq * hk;
                for (i, s) in probs_dropped.iter_mut().enumerate() {
                    *s = if mask[base + i] { *s / keep } else { 0.0 };
                }
            }

            // dV = P'ᵀ · dO
            dvh.fill(0.0);
            kernels::matmul_at_b_acc(&probs_dropped, &doh, hq, hk, dh, &mut dvh);
            // dP' = dO · Vᵀ, then undo dropout scaling
            kernels::matmul_a_bt(&doh, &vh, hq, dh, hk, &mut dp);
            if let Some(mask) = &mask {
                let base = (col * heads + head) * hq * hk;
                for (i, g) in dp.iter_mut().enumerate() {
                    *g = if mask[base + i] { *g / keep } else { 0.0 };
                }
            }
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), then scale
            for r in 0..hq {
                let row = &mut dp[r * hk..(r + 1) * hk];
                let prow = &probs[r * hk..(r + 1) * hk];
                let dot: Real = row.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (g, &p) in row.iter_mut().zip(prow) {
                    *g = p * (*g - dot) * scale;
                }
            }
            // dQ = dS · K ; dK = dSᵀ · Q
            kernels::matmul(&dp, &kh, hq, hk, dh, &mut dqh);
            dkh.fill(0.0);
            kernels::matmul_at_b_acc(&dp, &qh, hq, hk, dh, &mut dkh);

            scatter_head_add(&dqh, col, head, hq, d, dh, &mut dq);
            scatter_head_add(&dkh, col, head, hk, d, dh, &mut dk);
            scatter_head_add(&dvh, col, head, hk, d, dh, &mut dv);
        }
    }
    (
        Tensor::new(vec![w, hq, d], dq).expect("shape by construction"),
        Tensor::new(vec![w, hk, d], dk).expect("shape by construction"),
        Tensor::new(vec![w, hk, d], dv).expect("shape by construction"),
    )
}

fn gather_head(
    src: &[Real],
    col: usize,
    head: usize,
    rows: usize,
    d: usize,
    dh: usize,
    dst: &mut [Real],
) {
    let base = col * rows * d + head * dh;
    for r in 0..rows {
        dst[r * dh..(r + 1) * dh].copy_from_slice(&src[base + r * d..base + r * d + dh]);
    }
}

fn scatter_head(
    src: &[Real],
    col: usize,
    head: usize,
    rows: usize,
    d: usize,
    dh: usize,
    dst: &mut [Real],
) {
    let base = col * rows * d + head * dh;
    for r in 0..rows {
        dst[base + r * d..base + r * d + dh].copy_from_slice(&src[r * dh..(r + 1) * dh]);
    }
}

fn scatter_head_add(
    src: &[Real],
    col: usize,
    head: usize,
    rows: usize,
    d: usize,
    dh: usize,
    dst: &mut [Real],
) {
    let base = col * rows * d + head * dh;
    for r in 0..rows {
        for c in 0..dh {
            dst[base + r * d + c] += src[r * dh + c];
        }
    }
}

fn softmax_rows(scores: &mut [Real], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut scores[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
        let mut sum = 0.0;
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for s in row.iter_mut() {
            *s /= sum;
        }
    }
}
