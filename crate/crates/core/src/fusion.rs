//! Cross-attention fusion kernels.
//!
//! The parameter-free attention scores text features against visual features
//! through a fixed feature map `phi` and aggregates the (unnormalised) visual
//! rows directly:
//!
//! ```text
//! S   = phi(X_l) · phi(V)ᵀ            L×N
//! S'  = S with the floor(gamma·N) lowest entries of each row zeroed
//! out = S' · V                         L×d
//! ```
//!
//! with `V = beta · (X_raw · A · B) + E` and the fused delta `alpha · out`.
//! The learned standard cross-attention is kept alongside as a reference
//! point for the FLOPs comparison.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    activation, matmul, matmul_nt, matmul_tn, sigmoid, Activation, Scalar, Tensor,
};

/// Projection matrices of a learned single-head cross-attention.
#[derive(Debug, Clone)]
pub struct StandardXAttnParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub d_k: usize,
}

impl StandardXAttnParams {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor, d_k: usize) -> Result<Self> {
        let d = w_q.shape().first().copied().unwrap_or(0);
        for w in [&w_q, &w_k, &w_v, &w_o] {
            if w.shape() != [d, d] {
                return Err(Error::shape("standard_xattn params", &[d, d], w.shape()));
            }
        }
        if d_k == 0 {
            return Err(Error::Config("d_k must be positive".into()));
        }
        Ok(StandardXAttnParams {
            w_q,
            w_k,
            w_v,
            w_o,
            d_k,
        })
    }

    pub fn identity(d: usize) -> Self {
        let i = Tensor::identity(d);
        StandardXAttnParams {
            w_q: i.clone(),
            w_k: i.clone(),
            w_v: i.clone(),
            w_o: i,
            d_k: d,
        }
    }

    pub fn random<R: Rng>(d: usize, rng: &mut R) -> Self {
        let std = 1.0 / (d as Scalar).sqrt();
        let mut w = || random_normal(&[d, d], std, rng);
        StandardXAttnParams {
            w_q: w(),
            w_k: w(),
            w_v: w(),
            w_o: w(),
            d_k: d,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }
}

/// `softmax((X_l W_Q)(X_v W_K)ᵀ / √d_k) (X_v W_V) W_oᵀ`.
pub fn standard_xattn(x_l: &Tensor, x_v: &Tensor, p: &StandardXAttnParams) -> Result<Tensor> {
    let q = matmul(x_l, &p.w_q)?;
    let k = matmul(x_v, &p.w_k)?;
    let v = matmul(x_v, &p.w_v)?;
    let scores = matmul_nt(&q, &k)?.scale(1.0 / (p.d_k as Scalar).sqrt());
    let weights = activation(&scores, Activation::SoftmaxRows)?;
    matmul_nt(&matmul(&weights, &v)?, &p.w_o)
}

/// Which visual rows each text row keeps after adaptive masking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropDecision {
    rows: usize,
    cols: usize,
    dropped_per_row: usize,
    kept: Vec<bool>,
}

impl DropDecision {
    pub fn keep_all(rows: usize, cols: usize) -> Self {
        DropDecision {
            rows,
            cols,
            dropped_per_row: 0,
            kept: vec![true; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Number of zeros in every row.
    pub fn dropped_per_row(&self) -> usize {
        self.dropped_per_row
    }

    pub fn is_kept(&self, i: usize, j: usize) -> bool {
        self.kept[i * self.cols + j]
    }

    pub fn kept_row(&self, i: usize) -> &[bool] {
        &self.kept[i * self.cols..(i + 1) * self.cols]
    }

    /// The binary mask as a 0/1 matrix.
    pub fn mask(&self) -> Tensor {
        let data = self.kept.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        Tensor::new(&[self.rows, self.cols], data).expect("mask shape")
    }

    /// Zeroes the dropped entries of `s`.
    pub fn apply(&self, s: &Tensor) -> Result<Tensor> {
        if s.shape() != [self.rows, self.cols] {
            return Err(Error::shape("drop_decision.apply", &[self.rows, self.cols], s.shape()));
        }
        let data = s
            .data()
            .iter()
            .zip(&self.kept)
            .map(|(&v, &k)| if k { v } else { 0.0 })
            .collect();
        Tensor::new(s.shape(), data)
    }

    /// Adds 1 to `counts[j]` for every kept entry in column `j`.
    pub fn accumulate_kept(&self, counts: &mut [u64]) {
        for i in 0..self.rows {
            for (c, &k) in counts.iter_mut().zip(self.kept_row(i)) {
                *c += k as u64;
            }
        }
    }
}

pub fn check_gamma(gamma: Scalar) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Config(format!("drop ratio gamma must lie in [0, 1), got {gamma}")));
    }
    Ok(())
}

/// `floor(gamma · n)`, with a small absolute slack so ratios such as 0.29
/// at n = 100 do not lose a unit to binary rounding.
pub fn drop_count(gamma: Scalar, n: usize) -> usize {
    let k = (gamma * n as Scalar + 1e-9).floor() as usize;
    k.min(n)
}

/// Folds `-0.0` into `0.0` so signed zeros tie.
fn score_key(x: Scalar) -> Scalar {
    if x == 0.0 {
        0.0
    } else {
        x
    }
}

/// Masks the `floor(gamma·N)` smallest scores of every row. Equal scores are
/// dropped in increasing column order.
pub fn adaptive_mask(s: &Tensor, gamma: Scalar) -> Result<DropDecision> {
    s.expect_rank("adaptive_mask", 2)?;
    check_gamma(gamma)?;
    let (rows, cols) = (s.rows(), s.cols());
    let k = drop_count(gamma, cols);
    let mut decision = DropDecision::keep_all(rows, cols);
    decision.dropped_per_row = k;
    if k == 0 {
        return Ok(decision);
    }
    let mut order: Vec<usize> = Vec::with_capacity(cols);
    for i in 0..rows {
        let row = s.row(i);
        order.clear();
        order.extend(0..cols);
        order.select_nth_unstable_by(k - 1, |&a, &b| {
            score_key(row[a]).total_cmp(&score_key(row[b])).then(a.cmp(&b))
        });
        let kept = &mut decision.kept[i * cols..(i + 1) * cols];
        for &j in &order[..k] {
            kept[j] = false;
        }
    }
    Ok(decision)
}

#[derive(Debug, Clone)]
pub struct XAttnOutput {
    pub out: Tensor,
    /// Scores before masking.
    pub scores: Tensor,
    pub decision: DropDecision,
}

/// Parameter-free cross-attention `mask(phi(X_l) phi(X_v)ᵀ) X_v`.
pub fn param_free_xattn(
    x_l: &Tensor,
    x_v: &Tensor,
    phi: Activation,
    gamma: Scalar,
) -> Result<XAttnOutput> {
    check_gamma(gamma)?;
    if x_l.rank() != 2 || x_v.rank() != 2 || x_l.cols() != x_v.cols() {
        return Err(Error::shape("param_free_xattn", x_l.shape(), x_v.shape()));
    }
    let scores = matmul_nt(&activation(x_l, phi)?, &activation(x_v, phi)?)?;
    let decision = adaptive_mask(&scores, gamma)?;
    let out = matmul(&decision.apply(&scores)?, x_v)?;
    Ok(XAttnOutput {
        out,
        scores,
        decision,
    })
}

/// Low-rank alignment `X_raw · A · B`, evaluated as `(X_raw·A)·B`.
pub fn embed_visual(x_raw: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul(&matmul(x_raw, a)?, b)
}

/// Fixed scalars of the fusion rule plus the feature map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionHyper {
    /// Weight of the fused output.
    pub alpha: Scalar,
    /// Weight of the embedded visual features.
    pub beta: Scalar,
    /// Drop ratio.
    pub gamma: Scalar,
    pub phi: Activation,
}

impl Default for FusionHyper {
    fn default() -> Self {
        FusionHyper {
            alpha: 0.1,
            beta: 0.01,
            gamma: 0.2,
            phi: Activation::Silu,
        }
    }
}

impl FusionHyper {
    pub fn validate(&self) -> Result<()> {
        check_gamma(self.gamma)?;
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Config("alpha and beta must be finite".into()));
        }
        Ok(())
    }
}

/// Sizes of the fusion parameter tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionDims {
    /// Width of the vision features.
    pub d_vis: usize,
    pub rank: usize,
    /// Width of the language stream.
    pub d: usize,
    /// Rows of the visual prompt.
    pub n_visual: usize,
}

impl FusionDims {
    /// `2·(d′·r + r·d) + N·d`
    pub fn trainable_count(&self) -> usize {
        2 * (self.d_vis * self.rank + self.rank * self.d) + self.n_visual * self.d
    }
}

/// Every trainable tensor of the fusion branch, plus its fixed scalars.
///
/// The patch projector pair and the positional embedding feed the
/// cross-attention; the [cls] pair maps the global image feature to one extra
/// input token.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub a_feat: Tensor,
    pub b_feat: Tensor,
    pub a_cls: Tensor,
    pub b_cls: Tensor,
    pub pos_embed: Tensor,
    pub hyper: FusionHyper,
}

pub const FUSION_TENSOR_NAMES: [&str; 5] = ["a_feat", "b_feat", "a_cls", "b_cls", "pos_embed"];

impl FusionParams {
    pub fn new(
        a_feat: Tensor,
        b_feat: Tensor,
        a_cls: Tensor,
        b_cls: Tensor,
        pos_embed: Tensor,
        hyper: FusionHyper,
    ) -> Result<Self> {
        hyper.validate()?;
        for (a, b) in [(&a_feat, &b_feat), (&a_cls, &b_cls)] {
            if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
                return Err(Error::shape("low-rank pair", a.shape(), b.shape()));
            }
        }
        if a_cls.rows() != a_feat.rows() || b_cls.cols() != b_feat.cols() {
            return Err(Error::shape("cls pair", a_feat.shape(), a_cls.shape()));
        }
        if pos_embed.rank() != 2 || pos_embed.cols() != b_feat.cols() {
            return Err(Error::shape("pos_embed", b_feat.shape(), pos_embed.shape()));
        }
        Ok(FusionParams {
            a_feat,
            b_feat,
            a_cls,
            b_cls,
            pos_embed,
            hyper,
        })
    }

    /// `A ~ U(−1/√d′, 1/√d′)`, `B = 0`, `E ~ N(0, pos_std²)`.
    ///
    /// `pos_std = 0` gives the null initialisation under which the fusion
    /// branch contributes exactly nothing.
    pub fn init<R: Rng>(dims: FusionDims, hyper: FusionHyper, pos_std: Scalar, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (dims.d_vis as Scalar).sqrt();
        let uniform = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let a = |rng: &mut R| {
            let data = (0..dims.d_vis * dims.rank).map(|_| uniform.sample(rng)).collect();
            Tensor::new(&[dims.d_vis, dims.rank], data).expect("shape")
        };
        let a_feat = a(rng);
        let a_cls = a(rng);
        let pos_embed = if pos_std > 0.0 {
            random_normal(&[dims.n_visual, dims.d], pos_std, rng)
        } else {
            Tensor::zeros(&[dims.n_visual, dims.d])
        };
        Self::new(
            a_feat,
            Tensor::zeros(&[dims.rank, dims.d]),
            a_cls,
            Tensor::zeros(&[dims.rank, dims.d]),
            pos_embed,
            hyper,
        )
    }

    pub fn dims(&self) -> FusionDims {
        FusionDims {
            d_vis: self.a_feat.rows(),
            rank: self.a_feat.cols(),
            d: self.b_feat.cols(),
            n_visual: self.pos_embed.rows(),
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 5] {
        [
            ("a_feat", &self.a_feat),
            ("b_feat", &self.b_feat),
            ("a_cls", &self.a_cls),
            ("b_cls", &self.b_cls),
            ("pos_embed", &self.pos_embed),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 5] {
        [
            ("a_feat", &mut self.a_feat),
            ("b_feat", &mut self.b_feat),
            ("a_cls", &mut self.a_cls),
            ("b_cls", &mut self.b_cls),
            ("pos_embed", &mut self.pos_embed),
        ]
    }

    /// Embeds the global image feature for use as the leading input token.
    pub fn embed_cls(&self, cls_raw: &Tensor) -> Result<Tensor> {
        embed_visual(cls_raw, &self.a_cls, &self.b_cls)
    }
}

/// Gradients for the trainable fusion tensors; same layout as [`FusionParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct FusionGrads {
    pub a_feat: Tensor,
    pub b_feat: Tensor,
    pub a_cls: Tensor,
    pub b_cls: Tensor,
    pub pos_embed: Tensor,
}

impl FusionGrads {
    pub fn zeros_like(p: &FusionParams) -> Self {
        FusionGrads {
            a_feat: Tensor::zeros(p.a_feat.shape()),
            b_feat: Tensor::zeros(p.b_feat.shape()),
            a_cls: Tensor::zeros(p.a_cls.shape()),
            b_cls: Tensor::zeros(p.b_cls.shape()),
            pos_embed: Tensor::zeros(p.pos_embed.shape()),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 5] {
        [
            ("a_feat", &self.a_feat),
            ("b_feat", &self.b_feat),
            ("a_cls", &self.a_cls),
            ("b_cls", &self.b_cls),
            ("pos_embed", &self.pos_embed),
        ]
    }

    pub fn add_assign(&mut self, other: &FusionGrads) -> Result<()> {
        self.a_feat.add_assign(&other.a_feat)?;
        self.b_feat.add_assign(&other.b_feat)?;
        self.a_cls.add_assign(&other.a_cls)?;
        self.b_cls.add_assign(&other.b_cls)?;
        self.pos_embed.add_assign(&other.pos_embed)
    }

    pub fn scale(&mut self, s: Scalar) {
        for t in [
            &mut self.a_feat,
            &mut self.b_feat,
            &mut self.a_cls,
            &mut self.b_cls,
            &mut self.pos_embed,
        ] {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
}

/// Per-image visual state shared by every fusion site: the aligned features
/// `V = beta·X_raw·A·B + E` and their feature map `phi(V)`.
#[derive(Debug, Clone)]
pub struct VisualMemory {
    pub(crate) raw: Tensor,
    pub(crate) raw_a: Tensor,
    pub(crate) values: Tensor,
    pub(crate) keys: Tensor,
}

impl VisualMemory {
    pub fn prepare(x_raw: &Tensor, p: &FusionParams) -> Result<Self> {
        let raw_a = matmul(x_raw, &p.a_feat)?;
        let embedded = matmul(&raw_a, &p.b_feat)?;
        if embedded.shape() != p.pos_embed.shape() {
            return Err(Error::shape("positional embedding", embedded.shape(), p.pos_embed.shape()));
        }
        let values = embedded.scale(p.hyper.beta).add(&p.pos_embed)?;
        let keys = activation(&values, p.hyper.phi)?;
        Ok(VisualMemory {
            raw: x_raw.clone(),
            raw_a,
            values,
            keys,
        })
    }

    /// `beta·X_raw·A·B + E`
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pulls a gradient with respect to `values` back to `A_feat`, `B_feat`
    /// and `E`. Returns `(dA, dB, dE)`.
    pub fn backward(&self, d_values: &Tensor, p: &FusionParams) -> Result<(Tensor, Tensor, Tensor)> {
        let d_embedded = d_values.scale(p.hyper.beta);
        let d_b = matmul_tn(&self.raw_a, &d_embedded)?;
        let d_raw_a = matmul_nt(&d_embedded, &p.b_feat)?;
        let d_a = matmul_tn(&self.raw, &d_raw_a)?;
        Ok((d_a, d_b, d_values.clone()))
    }
}

/// Intermediates of one attention evaluation against a [`VisualMemory`].
#[derive(Debug, Clone)]
pub struct AttendCache {
    query_in: Tensor,
    query_feat: Tensor,
    masked_scores: Tensor,
    pub decision: DropDecision,
}

/// One fusion site: `alpha · mask(phi(X_l)·phi(V)ᵀ) · V`.
pub fn attend(x_l: &Tensor, mem: &VisualMemory, hyper: &FusionHyper) -> Result<(Tensor, AttendCache)> {
    if x_l.rank() != 2 || x_l.cols() != mem.values.cols() {
        return Err(Error::shape("attend", x_l.shape(), mem.values.shape()));
    }
    let query_feat = activation(x_l, hyper.phi)?;
    let scores = matmul_nt(&query_feat, &mem.keys)?;
    let decision = adaptive_mask(&scores, hyper.gamma)?;
    let masked_scores = decision.apply(&scores)?;
    let delta = matmul(&masked_scores, &mem.values)?.scale(hyper.alpha);
    Ok((
        delta,
        AttendCache {
            query_in: x_l.clone(),
            query_feat,
            masked_scores,
            decision,
        },
    ))
}

/// Backward of [`attend`] with the mask held fixed. Returns `(dX_l, dV)`.
pub fn attend_backward(
    upstream: &Tensor,
    cache: &AttendCache,
    mem: &VisualMemory,
    hyper: &FusionHyper,
) -> Result<(Tensor, Tensor)> {
    let d_out = upstream.scale(hyper.alpha);
    // value path
    let mut d_values = matmul_tn(&cache.masked_scores, &d_out)?;
    // score path; dropped entries receive no gradient
    let d_scores = cache.decision.apply(&matmul_nt(&d_out, &mem.values)?)?;
    let d_query_feat = matmul(&d_scores, &mem.keys)?;
    let d_keys = matmul_tn(&d_scores, &cache.query_feat)?;
    let d_x_l = activation_backward(&cache.query_in, &cache.query_feat, &d_query_feat, hyper.phi)?;
    d_values.add_assign(&activation_backward(&mem.values, &mem.keys, &d_keys, hyper.phi)?)?;
    Ok((d_x_l, d_values))
}

/// Vector-Jacobian product of [`activation`]: given `x`, `y = phi(x)` and
/// `dy`, returns `dx`.
pub fn activation_backward(x: &Tensor, y: &Tensor, dy: &Tensor, kind: Activation) -> Result<Tensor> {
    if x.shape() != dy.shape() || y.shape() != dy.shape() {
        return Err(Error::shape("activation_backward", x.shape(), dy.shape()));
    }
    Ok(match kind {
        Activation::Identity => dy.clone(),
        Activation::Relu => x.zip_with("relu'", dy, |x, g| if x > 0.0 { g } else { 0.0 })?,
        Activation::Elu => x.zip_with("elu'", dy, |x, g| if x > 0.0 { g } else { g * x.exp() })?,
        Activation::Silu => x.zip_with("silu'", dy, |x, g| g * silu_grad(x))?,
        Activation::SiluPositive => {
            let mut dx = x.zip_with("silu'", dy, |x, g| g * silu_grad(x))?;
            let argmin = x
                .data()
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v < x.data()[best] { i } else { best });
            if !dx.is_empty() {
                dx.data_mut()[argmin] -= dy.sum();
            }
            dx
        }
        Activation::SoftmaxRows => {
            let mut dx = dy.clone();
            for i in 0..dx.rows() {
                let yr = y.row(i);
                let dot: Scalar = yr.iter().zip(dy.row(i)).map(|(a, b)| a * b).sum();
                for (g, &yv) in dx.row_mut(i).iter_mut().zip(yr) {
                    *g = yv * (*g - dot);
                }
            }
            dx
        }
    })
}

/// `d/dx silu(x) = σ(x)·(1 + x·(1 − σ(x)))`
pub fn silu_grad(x: Scalar) -> Scalar {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[derive(Debug, Clone)]
pub struct FuseOutput {
    pub delta: Tensor,
    pub scores: Tensor,
    pub decision: DropDecision,
}

/// Full fusion rule `alpha · XAttn(X_l, beta·X_raw·A·B + E)` for one site.
pub fn fuse(x_l: &Tensor, x_v_raw: &Tensor, p: &FusionParams) -> Result<FuseOutput> {
    FusionTape::new(p).forward(x_l, x_v_raw)
}

/// Gradients of a single-site fusion with respect to its trainable inputs.
#[derive(Debug, Clone)]
pub struct FuseGrads {
    pub a_feat: Tensor,
    pub b_feat: Tensor,
    pub pos_embed: Tensor,
    pub x_l: Tensor,
}

/// Records one [`fuse`] evaluation so it can be differentiated.
pub struct FusionTape<'p> {
    params: &'p FusionParams,
    cache: Option<(VisualMemory, AttendCache)>,
}

impl<'p> FusionTape<'p> {
    pub fn new(params: &'p FusionParams) -> Self {
        FusionTape {
            params,
            cache: None,
        }
    }

    pub fn forward(&mut self, x_l: &Tensor, x_v_raw: &Tensor) -> Result<FuseOutput> {
        let mem = VisualMemory::prepare(x_v_raw, self.params)?;
        let (delta, cache) = attend(x_l, &mem, &self.params.hyper)?;
        let scores = matmul_nt(&cache.query_feat, &mem.keys)?;
        let decision = cache.decision.clone();
        self.cache = Some((mem, cache));
        Ok(FuseOutput {
            delta,
            scores,
            decision,
        })
    }

    pub fn backward(&self, upstream: &Tensor) -> Result<FuseGrads> {
        let (mem, cache) = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Usage("fuse_backward called before a forward pass".into()))?;
        if upstream.shape() != cache.query_in.shape() {
            return Err(Error::shape("fuse_backward", cache.query_in.shape(), upstream.shape()));
        }
        let (x_l, d_values) = attend_backward(upstream, cache, mem, &self.params.hyper)?;
        let (a_feat, b_feat, pos_embed) = mem.backward(&d_values, self.params)?;
        Ok(FuseGrads {
            a_feat,
            b_feat,
            pos_embed,
            x_l,
        })
    }
}

pub(crate) fn random_normal<R: Rng>(shape: &[usize], std: Scalar, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
}
