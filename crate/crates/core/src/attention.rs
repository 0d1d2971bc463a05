//! Localized attention: glimpse maps over the full feature map, masked to
//! the question's region only after normalization, then pooled.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::kaiming_uniform;
use crate::error::{Error, Result};
use crate::tensor::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

/// Binary region mask at full image resolution (`size x size`).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RegionMask {
    size: usize,
    bits: Vec<u8>,
}

impl RegionMask {
    pub fn new(size: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != size * size {
            return Err(Error::invalid(format!(
                "mask of {} pixels for size {size}",
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(Self { size, bits })
    }

    pub fn empty(size: usize) -> Self {
        Self {
            size,
            bits: vec![0; size * size],
        }
    }

    pub fn full(size: usize) -> Self {
        Self {
            size,
            bits: vec![1; size * size],
        }
    }

    pub fn from_fn(size: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(size * size);
        for r in 0..size {
            for c in 0..size {
                bits.push(f(r, c) as u8);
            }
        }
        Self { size, bits }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.size + c] != 0
    }

    pub fn set(&mut self, r: usize, c: usize, on: bool) {
        self.bits[r * self.size + c] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Half-open bounding box `(r0, c0, r1, c1)` of the set pixels.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.size {
            for c in 0..self.size {
                if self.get(r, c) {
                    bb = Some(match bb {
                        None => (r, c, r + 1, c + 1),
                        Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r + 1), c1.max(c + 1)),
                    });
                }
            }
        }
        bb
    }

    pub fn flipped(&self) -> Self {
        Self::from_fn(self.size, |r, c| self.get(r, self.size - 1 - c))
    }

    /// Mask as a `[size, size]` tensor of zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.size, self.size],
            self.bits.iter().map(|&b| b as f64).collect(),
        )
        .expect("mask shape")
    }
}

/// `H x W` binary mask whose cell is set iff any covered pixel is set.
pub fn downsample_mask(mask: &RegionMask, h: usize, w: usize) -> Result<Tensor> {
    let s = mask.size();
    if h == 0 || w == 0 || s % h != 0 || s % w != 0 {
        return Err(Error::invalid(format!(
            "mask of size {s} cannot be downsampled to {h}x{w}"
        )));
    }
    let (kh, kw) = (s / h, s / w);
    let mut out = vec![0.0; h * w];
    for r in 0..s {
        for c in 0..s {
            if mask.get(r, c) {
                out[(r / kh) * w + c / kw] = 1.0;
            }
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Normalization axis of the glimpse logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxAxis {
    /// Each glimpse is a distribution over spatial positions.
    #[default]
    Spatial,
    /// At each position the glimpses form a distribution.
    Glimpse,
}

/// Validated glimpse map `g` of shape `[G, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap(Tensor);

impl AttentionMap {
    /// Accepts nonnegative maps whose every glimpse sums to one over space.
    pub fn new(g: Tensor) -> Result<Self> {
        if g.rank() != 3 {
            return Err(Error::invalid(format!("attention map shape {:?}", g.shape())));
        }
        if g.data().iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::invalid("attention map has negative or NaN entries"));
        }
        let hw = g.shape()[1] * g.shape()[2];
        for (k, glimpse) in g.data().chunks(hw).enumerate() {
            let total: f64 = glimpse.iter().sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("glimpse {k} sums to {total}")));
            }
        }
        Ok(Self(g))
    }

    /// Wraps a map without the per-glimpse normalization check.
    pub fn new_unchecked(g: Tensor) -> Self {
        Self(g)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn glimpses(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn glimpse(&self, k: usize) -> &[f64] {
        let hw = self.0.shape()[1] * self.0.shape()[2];
        &self.0.data()[k * hw..(k + 1) * hw]
    }
}

/// Projections `W_x: C' x C`, `W_q: C' x Q`, `W_g: G x C'`, each preceded by
/// dropout on its input.
#[derive(Clone, Debug)]
pub struct LocalizedAttention {
    pub wx: ParamId,
    pub wq: ParamId,
    pub wg: ParamId,
    pub dropout: f64,
    pub softmax_axis: SoftmaxAxis,
}

impl LocalizedAttention {
    pub const WX: &'static str = "attention.wx";
    pub const WQ: &'static str = "attention.wq";
    pub const WG: &'static str = "attention.wg";

    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        channels: usize,
        proj: usize,
        question: usize,
        glimpses: usize,
        dropout: f64,
        softmax_axis: SoftmaxAxis,
        rng: &mut R,
    ) -> Self {
        let wx = kaiming_uniform(vec![proj, channels, 1, 1], channels, rng);
        let wq = kaiming_uniform(vec![question, proj], question, rng);
        let wg = kaiming_uniform(vec![glimpses, proj, 1, 1], proj, rng);
        Self {
            wx: store.insert(Self::WX, wx, true),
            wq: store.insert(Self::WQ, wq, true),
            wg: store.insert(Self::WG, wg, true),
            dropout,
            softmax_axis,
        }
    }

    pub fn from_store(store: &ParamStore, dropout: f64, softmax_axis: SoftmaxAxis) -> Result<Self> {
        Ok(Self {
            wx: store.id(Self::WX)?,
            wq: store.id(Self::WQ)?,
            wg: store.id(Self::WG)?,
            dropout,
            softmax_axis,
        })
    }

    /// Glimpse maps `[B, G, H, W]` from features `[B, C, H, W]` and question
    /// embeddings `[B, Q]`. The region mask plays no part here.
    pub fn attention_map<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        features: Var,
        question: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let fs = tape.shape(features).to_vec();
        let qs = tape.shape(question).to_vec();
        if fs.len() != 4 || qs.len() != 2 || fs[0] != qs[0] {
            return Err(Error::ShapeMismatch {
                op: "attention_map",
                lhs: fs,
                rhs: qs,
            });
        }
        let (b, h, w) = (fs[0], fs[2], fs[3]);
        let xd = tape.dropout(features, self.dropout, train, rng)?;
        let xp = tape.conv2d(xd, bound.var(self.wx), None, 1, 0)?;
        let proj = tape.shape(xp)[1];
        let qd = tape.dropout(question, self.dropout, train, rng)?;
        let qp = tape.matmul(qd, bound.var(self.wq))?;
        let qp = tape.reshape(qp, vec![b, proj, 1, 1])?;
        let qp = tape.broadcast_to(qp, vec![b, proj, h, w])?;
        let joint = tape.mul(xp, qp)?;
        let joint = tape.relu(joint);
        let jd = tape.dropout(joint, self.dropout, train, rng)?;
        let logits = tape.conv2d(jd, bound.var(self.wg), None, 1, 0)?;
        let g = tape.shape(logits)[1];
        let flat = tape.reshape(logits, vec![b, g, h * w])?;
        let axis = match self.softmax_axis {
            SoftmaxAxis::Spatial => 2,
            SoftmaxAxis::Glimpse => 1,
        };
        let att = tape.softmax(flat, axis)?;
        tape.reshape(att, vec![b, g, h, w])
    }
}

/// Mask-after-attention pooling.
///
/// `v[b, g * C + c] = sum_{h,w} att[b,g,h,w] * features[b,c,h,w] * mask[b,h,w]`
/// with `att: [B, G, H, W]`, `features: [B, C, H, W]`, `mask: [B, H, W]`.
pub fn masked_pool(tape: &mut Tape, att: Var, features: Var, mask: Var) -> Result<Var> {
    let gs = tape.shape(att).to_vec();
    let fs = tape.shape(features).to_vec();
    let ms = tape.shape(mask).to_vec();
    if gs.len() != 4 || fs.len() != 4 || gs[0] != fs[0] || gs[2..] != fs[2..] {
        return Err(Error::ShapeMismatch {
            op: "masked_pool",
            lhs: gs,
            rhs: fs,
        });
    }
    if ms != [gs[0], gs[2], gs[3]] {
        return Err(Error::ShapeMismatch {
            op: "masked_pool",
            lhs: gs,
            rhs: ms,
        });
    }
    let (b, g, c, hw) = (gs[0], gs[1], fs[1], gs[2] * gs[3]);
    let att = tape.reshape(att, vec![b, g, hw])?;
    let m = tape.reshape(mask, vec![b, 1, hw])?;
    let m = tape.broadcast_to(m, vec![b, g, hw])?;
    let weighted = tape.mul(att, m)?;
    let x = tape.reshape(features, vec![b, c, hw])?;
    let xt = tape.swap_axes(x, 1, 2)?;
    let pooled = tape.batch_matmul(weighted, xt)?;
    tape.reshape(pooled, vec![b, g * c])
}
