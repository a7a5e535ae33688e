//! A small frozen decoder-only language model with fusion sites.
//!
//! Blocks are pre-norm: single-head causal self-attention followed by a
//! two-layer SiLU MLP, each wrapped in a residual connection. Four tap points
//! per block can feed or receive the fusion delta:
//!
//! ```text
//! a = LN1(x)        <- mhsa_in
//! o = Attn(a)       <- mhsa_out
//! h = x + o
//! m = LN2(h)        <- mlp_in
//! f = MLP(m)        <- mlp_out
//! y = h + f
//! ```
//!
//! Only the fusion tensors receive gradients; the base weights never change
//! after construction.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{
    attend, attend_backward, random_normal, silu_grad, AttendCache, DropDecision, FusionDims,
    FusionGrads, FusionHyper, FusionParams, VisualMemory,
};
use crate::prompt::PromptSpec;
use crate::tensor::{matmul, matmul_nt, matmul_tn, silu, softmax_in_place, Scalar, Tensor};

const LN_EPS: Scalar = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapPoint {
    MhsaIn,
    MhsaOut,
    MlpIn,
    MlpOut,
}

impl TapPoint {
    fn is_mlp(self) -> bool {
        matches!(self, TapPoint::MlpIn | TapPoint::MlpOut)
    }
}

impl fmt::Display for TapPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TapPoint::MhsaIn => "MHSA(in)",
            TapPoint::MhsaOut => "MHSA(out)",
            TapPoint::MlpIn => "MLP(in)",
            TapPoint::MlpOut => "MLP(out)",
        })
    }
}

/// Where the fusion query is read and where its output is added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Placement {
    pub query_from: TapPoint,
    pub add_to: TapPoint,
}

impl Default for Placement {
    fn default() -> Self {
        Placement {
            query_from: TapPoint::MlpIn,
            add_to: TapPoint::MlpOut,
        }
    }
}

impl Placement {
    /// The legal placements: both points inside the same sub-layer, the
    /// output added at or after the point the query is read from.
    pub const ALL: [Placement; 6] = [
        Placement::new(TapPoint::MhsaIn, TapPoint::MhsaIn),
        Placement::new(TapPoint::MhsaIn, TapPoint::MhsaOut),
        Placement::new(TapPoint::MhsaOut, TapPoint::MhsaOut),
        Placement::new(TapPoint::MlpIn, TapPoint::MlpIn),
        Placement::new(TapPoint::MlpIn, TapPoint::MlpOut),
        Placement::new(TapPoint::MlpOut, TapPoint::MlpOut),
    ];

    pub const fn new(query_from: TapPoint, add_to: TapPoint) -> Self {
        Placement { query_from, add_to }
    }

    pub fn validate(&self) -> Result<()> {
        if self.query_from.is_mlp() != self.add_to.is_mlp() || self.add_to < self.query_from {
            return Err(Error::Config(format!("illegal placement {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -> {}", self.query_from, self.add_to)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub d: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub mlp_ratio: usize,
    /// Width of the vision features.
    pub d_vis: usize,
    pub rank: usize,
    pub prompt: PromptSpec,
    pub placement: Placement,
    pub fusion: FusionHyper,
    /// Standard deviation of the initial positional embedding.
    pub pos_embed_init_std: Scalar,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_blocks: 2,
            d: 64,
            vocab_size: 40,
            max_seq_len: 8,
            mlp_ratio: 4,
            d_vis: 32,
            rank: 8,
            prompt: PromptSpec::default(),
            placement: Placement::default(),
            fusion: FusionHyper::default(),
            pos_embed_init_std: 0.02,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_blocks", self.n_blocks),
            ("d", self.d),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("mlp_ratio", self.mlp_ratio),
            ("d_vis", self.d_vis),
            ("rank", self.rank),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.pos_embed_init_std >= 0.0) {
            return Err(Error::Config("pos_embed_init_std must be >= 0".into()));
        }
        self.placement.validate()?;
        self.prompt.validate()?;
        self.fusion.validate()
    }

    pub fn fusion_dims(&self) -> FusionDims {
        FusionDims {
            d_vis: self.d_vis,
            rank: self.rank,
            d: self.d,
            n_visual: self.prompt.row_count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<Scalar>,
    pub bias: Vec<Scalar>,
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Tensor,
    inv_std: Vec<Scalar>,
}

impl LayerNorm {
    fn identity(d: usize) -> Self {
        LayerNorm {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }

    fn forward(&self, x: &Tensor) -> (Tensor, LnCache) {
        let d = x.cols();
        let mut xhat = x.clone();
        let mut y = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = x.row(i);
            let mean = row.iter().sum::<Scalar>() / d as Scalar;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Scalar>() / d as Scalar;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in xhat.row_mut(i).iter_mut().enumerate() {
                *v = (row[j] - mean) * is;
            }
            for (j, v) in y.row_mut(i).iter_mut().enumerate() {
                *v = xhat.at(i, j) * self.gain[j] + self.bias[j];
            }
        }
        (y, LnCache { xhat, inv_std })
    }

    fn backward(&self, dy: &Tensor, cache: &LnCache) -> Tensor {
        let d = dy.cols();
        let mut dx = dy.clone();
        for i in 0..dy.rows() {
            let xh = cache.xhat.row(i);
            let dxhat: Vec<Scalar> = dy.row(i).iter().zip(&self.gain).map(|(g, w)| g * w).collect();
            let mean_d = dxhat.iter().sum::<Scalar>() / d as Scalar;
            let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<Scalar>() / d as Scalar;
            for (j, v) in dx.row_mut(i).iter_mut().enumerate() {
                *v = cache.inv_std[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1: LayerNorm,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln2: LayerNorm,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

/// Frozen language-model weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    pub tok_embed: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub ln_f: LayerNorm,
    pub head: Tensor,
}

impl BaseModel {
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d;
        let hidden = d * cfg.mlp_ratio;
        let s = 1.0 / (d as Scalar).sqrt();
        let tok_embed = random_normal(&[cfg.vocab_size, d], 1.0, rng);
        let pos_embed = random_normal(&[cfg.max_seq_len, d], 0.1, rng);
        let blocks = (0..cfg.n_blocks)
            .map(|_| BlockWeights {
                ln1: LayerNorm::identity(d),
                w_q: random_normal(&[d, d], s, rng),
                w_k: random_normal(&[d, d], s, rng),
                w_v: random_normal(&[d, d], s, rng),
                w_o: random_normal(&[d, d], s, rng),
                ln2: LayerNorm::identity(d),
                w_up: random_normal(&[d, hidden], s, rng),
                w_down: random_normal(&[hidden, d], 1.0 / (hidden as Scalar).sqrt(), rng),
            })
            .collect();
        BaseModel {
            tok_embed,
            pos_embed,
            blocks,
            ln_f: LayerNorm::identity(d),
            head: random_normal(&[d, cfg.vocab_size], s, rng),
        }
    }

    pub fn d(&self) -> usize {
        self.tok_embed.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.tok_embed.rows()
    }

    pub fn max_seq_len(&self) -> usize {
        self.pos_embed.rows()
    }

    /// Every frozen tensor by name, for checkpoints and integrity checks.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let vec_t = |v: &[Scalar]| Tensor::new(&[v.len()], v.to_vec()).expect("shape");
        let mut out = vec![
            ("tok_embed".to_string(), self.tok_embed.clone()),
            ("pos_embed_lm".to_string(), self.pos_embed.clone()),
            ("ln_f.gain".to_string(), vec_t(&self.ln_f.gain)),
            ("ln_f.bias".to_string(), vec_t(&self.ln_f.bias)),
            ("head".to_string(), self.head.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in [
                ("w_q", &b.w_q),
                ("w_k", &b.w_k),
                ("w_v", &b.w_v),
                ("w_o", &b.w_o),
                ("w_up", &b.w_up),
                ("w_down", &b.w_down),
            ] {
                out.push((format!("block{i}.{name}"), t.clone()));
            }
            for (name, ln) in [("ln1", &b.ln1), ("ln2", &b.ln2)] {
                out.push((format!("block{i}.{name}.gain"), vec_t(&ln.gain)));
                out.push((format!("block{i}.{name}.bias"), vec_t(&ln.bias)));
            }
        }
        out
    }
}

/// Base model plus the trainable fusion branch.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub base: BaseModel,
    pub fusion: FusionParams,
}

impl Model {
    /// Draws the frozen base weights and the initial fusion tensors from
    /// `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let base = BaseModel::init(&config, &mut rng);
        let fusion = FusionParams::init(
            config.fusion_dims(),
            config.fusion,
            config.pos_embed_init_std,
            &mut rng,
        )?;
        Ok(Model {
            config,
            base,
            fusion,
        })
    }

    /// Forward pass with fusion active.
    pub fn forward(&self, input: &SampleInput<'_>) -> Result<Trace> {
        forward(&self.base, &self.fusion, self.config.placement, input, true)
    }

    /// Forward pass with every fusion site skipped; the [cls] token is still
    /// prepended.
    pub fn forward_baseline(&self, input: &SampleInput<'_>) -> Result<Trace> {
        forward(&self.base, &self.fusion, self.config.placement, input, false)
    }
}

/// One example: text token ids plus the raw (pre-alignment) visual prompt and
/// global feature.
#[derive(Debug, Clone, Copy)]
pub struct SampleInput<'a> {
    pub tokens: &'a [usize],
    /// `N×d′`
    pub visual: &'a Tensor,
    /// `1×d′`
    pub cls: &'a Tensor,
}

#[derive(Debug, Clone)]
struct BlockTrace {
    ln1: LnCache,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Tensor,
    ln2: LnCache,
    up: Tensor,
    fusion: Option<AttendCache>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub logits: Tensor,
    placement: Placement,
    fused: bool,
    cls_raw: Tensor,
    cls_raw_a: Tensor,
    memory: Option<VisualMemory>,
    blocks: Vec<BlockTrace>,
    ln_f: LnCache,
}

impl Trace {
    /// Drop decisions of every fusion site, in block order.
    pub fn decisions(&self) -> Vec<&DropDecision> {
        self.blocks
            .iter()
            .filter_map(|b| b.fusion.as_ref().map(|f| &f.decision))
            .collect()
    }
}

pub fn forward(
    base: &BaseModel,
    fusion: &FusionParams,
    placement: Placement,
    input: &SampleInput<'_>,
    fused: bool,
) -> Result<Trace> {
    let len = input.tokens.len() + 1;
    if len > base.max_seq_len() {
        return Err(Error::Config(format!(
            "sequence of {len} positions (with cls) exceeds max_seq_len {}",
            base.max_seq_len()
        )));
    }
    if let Some(&t) = input.tokens.iter().find(|&&t| t >= base.vocab_size()) {
        return Err(Error::Config(format!("token {t} outside vocabulary")));
    }
    let d = base.d();
    let cls_raw_a = matmul(input.cls, &fusion.a_cls)?;
    let cls = matmul(&cls_raw_a, &fusion.b_cls)?;
    if cls.shape() != [1, d] {
        return Err(Error::shape("cls embedding", &[1, d], cls.shape()));
    }
    let mut x = Tensor::zeros(&[len, d]);
    x.row_mut(0).copy_from_slice(cls.row(0));
    for (i, &t) in input.tokens.iter().enumerate() {
        x.row_mut(i + 1).copy_from_slice(base.tok_embed.row(t));
    }
    x.add_assign(&base.pos_embed.slice_rows(0, len)?)?;

    let memory = if fused {
        Some(VisualMemory::prepare(input.visual, fusion)?)
    } else {
        None
    };
    let site = memory.as_ref().map(|m| (m, &fusion.hyper, placement));

    let mut blocks = Vec::with_capacity(base.blocks.len());
    for w in &base.blocks {
        let (y, trace) = block_forward(w, &x, site)?;
        blocks.push(trace);
        x = y;
    }
    let (xf, ln_f) = base.ln_f.forward(&x);
    let logits = matmul(&xf, &base.head)?;
    Ok(Trace {
        logits,
        placement,
        fused,
        cls_raw: input.cls.clone(),
        cls_raw_a,
        memory,
        blocks,
        ln_f,
    })
}

type Site<'a> = Option<(&'a VisualMemory, &'a FusionHyper, Placement)>;

struct Tap<'a> {
    site: Site<'a>,
    pending: Option<Tensor>,
    cache: Option<AttendCache>,
}

impl Tap<'_> {
    fn visit(&mut self, point: TapPoint, value: &mut Tensor) -> Result<()> {
        let Some((mem, hyper, placement)) = self.site else {
            return Ok(());
        };
        if placement.query_from == point {
            let (delta, cache) = attend(value, mem, hyper)?;
            self.pending = Some(delta);
            self.cache = Some(cache);
        }
        if placement.add_to == point {
            let delta = self.pending.take().expect("query tapped before add");
            value.add_assign(&delta)?;
        }
        Ok(())
    }
}

fn block_forward(w: &BlockWeights, x: &Tensor, site: Site<'_>) -> Result<(Tensor, BlockTrace)> {
    let mut tap = Tap {
        site,
        pending: None,
        cache: None,
    };
    let (mut attn_in, ln1) = w.ln1.forward(x);
    tap.visit(TapPoint::MhsaIn, &mut attn_in)?;

    let q = matmul(&attn_in, &w.w_q)?;
    let k = matmul(&attn_in, &w.w_k)?;
    let v = matmul(&attn_in, &w.w_v)?;
    let mut probs = matmul_nt(&q, &k)?.scale(1.0 / (q.cols() as Scalar).sqrt());
    for i in 0..probs.rows() {
        let row = probs.row_mut(i);
        softmax_in_place(&mut row[..=i]);
        row[i + 1..].fill(0.0);
    }
    let ctx = matmul(&probs, &v)?;
    let mut attn_out = matmul(&ctx, &w.w_o)?;
    tap.visit(TapPoint::MhsaOut, &mut attn_out)?;

    let h = x.add(&attn_out)?;
    let (mut mlp_in, ln2) = w.ln2.forward(&h);
    tap.visit(TapPoint::MlpIn, &mut mlp_in)?;
    let up = matmul(&mlp_in, &w.w_up)?;
    let mut mlp_out = matmul(&up.map(silu), &w.w_down)?;
    tap.visit(TapPoint::MlpOut, &mut mlp_out)?;
    let y = h.add(&mlp_out)?;

    Ok((
        y,
        BlockTrace {
            ln1,
            q,
            k,
            v,
            probs,
            ln2,
            up,
            fusion: tap.cache,
        },
    ))
}

struct Untap<'a> {
    site: Option<(&'a VisualMemory, &'a FusionHyper, Placement)>,
    cache: Option<&'a AttendCache>,
    pending: Option<Tensor>,
    d_values: &'a mut Tensor,
}

impl Untap<'_> {
    fn visit(&mut self, point: TapPoint, grad: &mut Tensor) -> Result<()> {
        let Some((mem, hyper, placement)) = self.site else {
            return Ok(());
        };
        if placement.add_to == point {
            self.pending = Some(grad.clone());
        }
        if placement.query_from == point {
            let upstream = self.pending.take().expect("add visited before query");
            let cache = self.cache.expect("fusion cache present");
            let (d_x, d_v) = attend_backward(&upstream, cache, mem, hyper)?;
            grad.add_assign(&d_x)?;
            self.d_values.add_assign(&d_v)?;
        }
        Ok(())
    }
}

fn block_backward(
    w: &BlockWeights,
    t: &BlockTrace,
    d_y: &Tensor,
    site: Site<'_>,
    d_values: &mut Tensor,
) -> Result<Tensor> {
    let mut untap = Untap {
        site,
        cache: t.fusion.as_ref(),
        pending: None,
        d_values,
    };
    // y = h + f
    let mut d_f = d_y.clone();
    untap.visit(TapPoint::MlpOut, &mut d_f)?;
    let d_act = matmul_nt(&d_f, &w.w_down)?;
    let d_up = d_act.zip_with("silu'", &t.up, |g, u| g * silu_grad(u))?;
    let mut d_m = matmul_nt(&d_up, &w.w_up)?;
    untap.visit(TapPoint::MlpIn, &mut d_m)?;
    let mut d_h = d_y.clone();
    d_h.add_assign(&w.ln2.backward(&d_m, &t.ln2))?;

    // h = x + o
    let mut d_o = d_h.clone();
    untap.visit(TapPoint::MhsaOut, &mut d_o)?;
    let d_ctx = matmul_nt(&d_o, &w.w_o)?;
    let d_probs = matmul_nt(&d_ctx, &t.v)?;
    let d_v = matmul_tn(&t.probs, &d_ctx)?;
    let mut d_scores = Tensor::zeros(t.probs.shape());
    let scale = 1.0 / (t.q.cols() as Scalar).sqrt();
    for i in 0..t.probs.rows() {
        let p = t.probs.row(i);
        let g = d_probs.row(i);
        let dot: Scalar = p[..=i].iter().zip(&g[..=i]).map(|(a, b)| a * b).sum();
        for (j, out) in d_scores.row_mut(i)[..=i].iter_mut().enumerate() {
            *out = p[j] * (g[j] - dot) * scale;
        }
    }
    let d_q = matmul(&d_scores, &t.k)?;
    let d_k = matmul_tn(&d_scores, &t.q)?;
    let mut d_a = matmul_nt(&d_q, &w.w_q)?;
    d_a.add_assign(&matmul_nt(&d_k, &w.w_k)?)?;
    d_a.add_assign(&matmul_nt(&d_v, &w.w_v)?)?;
    untap.visit(TapPoint::MhsaIn, &mut d_a)?;
    let mut d_x = d_h;
    d_x.add_assign(&w.ln1.backward(&d_a, &t.ln1))?;
    Ok(d_x)
}

/// Pulls `d_logits` back to the fusion tensors. Base weights get no
/// gradient.
pub fn backward(base: &BaseModel, fusion: &FusionParams, trace: &Trace, d_logits: &Tensor) -> Result<FusionGrads> {
    if d_logits.shape() != trace.logits.shape() {
        return Err(Error::shape("backward", trace.logits.shape(), d_logits.shape()));
    }
    let mut grads = FusionGrads::zeros_like(fusion);
    let d_xf = matmul_nt(d_logits, &base.head)?;
    let mut d_x = base.ln_f.backward(&d_xf, &trace.ln_f);

    let mut d_values = Tensor::zeros(fusion.pos_embed.shape());
    let site = if trace.fused {
        trace.memory.as_ref().map(|m| (m, &fusion.hyper, trace.placement))
    } else {
        None
    };
    for (w, t) in base.blocks.iter().zip(&trace.blocks).rev() {
        d_x = block_backward(w, t, &d_x, site, &mut d_values)?;
    }

    // cls token is row 0 of the input stream
    let d_cls = d_x.slice_rows(0, 1)?;
    grads.b_cls = matmul_tn(&trace.cls_raw_a, &d_cls)?;
    grads.a_cls = matmul_tn(&trace.cls_raw, &matmul_nt(&d_cls, &fusion.b_cls)?)?;

    if let Some(mem) = trace.memory.as_ref().filter(|_| trace.fused) {
        let (d_a, d_b, d_e) = mem.backward(&d_values, fusion)?;
        grads.a_feat = d_a;
        grads.b_feat = d_b;
        grads.pos_embed = d_e;
    }
    Ok(grads)
}

/// Mean cross-entropy over the answer positions and its gradient with
/// respect to the logits. An empty answer span yields zero loss and a zero
/// gradient.
pub fn answer_loss(logits: &Tensor, answers: &[(usize, usize)]) -> Result<(Scalar, Tensor)> {
    let mut grad = Tensor::zeros(logits.shape());
    if answers.is_empty() {
        return Ok((0.0, grad));
    }
    let weight = 1.0 / answers.len() as Scalar;
    let mut loss = 0.0;
    for &(pos, target) in answers {
        if pos >= logits.rows() || target >= logits.cols() {
            return Err(Error::Config(format!("answer ({pos}, {target}) outside logits")));
        }
        let row = logits.row(pos);
        let peak = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
        let lse = peak + row.iter().map(|v| (v - peak).exp()).sum::<Scalar>().ln();
        loss += weight * (lse - row[target]);
        let mut p = row.to_vec();
        softmax_in_place(&mut p);
        let g = grad.row_mut(pos);
        for (gv, pv) in g.iter_mut().zip(&p) {
            *gv += weight * pv;
        }
        g[target] -= weight;
    }
    Ok((loss, grad))
}

/// Index of the largest entry; ties resolve to the lower index.
pub fn argmax(row: &[Scalar]) -> usize {
    row.iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Activation;
    use rand::Rng;

    fn small_config(placement: Placement) -> ModelConfig {
        ModelConfig {
            n_blocks: 2,
            d: 8,
            vocab_size: 11,
            max_seq_len: 6,
            mlp_ratio: 2,
            d_vis: 5,
            rank: 3,
            prompt: PromptSpec {
                scales: vec![4],
                pool: crate::tensor::PoolKind::Avg,
            },
            placement,
            fusion: FusionHyper {
                alpha: 0.7,
                beta: 0.9,
                gamma: 0.2,
                phi: Activation::Silu,
            },
            pos_embed_init_std: 0.5,
            seed: 3,
        }
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn trained_like(model: &mut Model, rng: &mut ChaCha8Rng) {
        model.fusion.b_feat = random(model.fusion.b_feat.shape(), rng);
        model.fusion.b_cls = random(model.fusion.b_cls.shape(), rng);
    }

    #[test]
    fn placement_legality() {
        for p in Placement::ALL {
            p.validate().unwrap();
        }
        let mut legal = 0;
        let points = [TapPoint::MhsaIn, TapPoint::MhsaOut, TapPoint::MlpIn, TapPoint::MlpOut];
        for q in points {
            for a in points {
                if Placement::new(q, a).validate().is_ok() {
                    legal += 1;
                }
            }
        }
        assert_eq!(legal, 6);
        assert!(Placement::new(TapPoint::MlpOut, TapPoint::MlpIn).validate().is_err());
        assert!(Placement::new(TapPoint::MhsaIn, TapPoint::MlpOut).validate().is_err());
    }

    #[test]
    fn null_fusion_matches_baseline_bit_exactly() {
        let mut cfg = small_config(Placement::default());
        cfg.pos_embed_init_std = 0.0;
        let model = Model::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let visual = random(&[16, 5], &mut rng);
        let cls = random(&[1, 5], &mut rng);
        let input = SampleInput { tokens: &[1, 4, 7], visual: &visual, cls: &cls };
        let a = model.forward(&input).unwrap().logits;
        let b = model.forward_baseline(&input).unwrap().logits;
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn alpha_zero_matches_baseline() {
        let mut cfg = small_config(Placement::default());
        cfg.fusion.alpha = 0.0;
        let mut model = Model::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        trained_like(&mut model, &mut rng);
        let visual = random(&[16, 5], &mut rng);
        let cls = random(&[1, 5], &mut rng);
        let input = SampleInput { tokens: &[2, 3], visual: &visual, cls: &cls };
        assert_eq!(model.forward(&input).unwrap().logits, model.forward_baseline(&input).unwrap().logits);
    }

    #[test]
    fn placements_are_not_aliased() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let visual = random(&[16, 5], &mut rng);
        let cls = random(&[1, 5], &mut rng);
        let mut outs = Vec::new();
        for p in Placement::ALL {
            let mut model = Model::new(small_config(p)).unwrap();
            let mut r = ChaCha8Rng::seed_from_u64(9);
            trained_like(&mut model, &mut r);
            let input = SampleInput { tokens: &[2, 3, 5], visual: &visual, cls: &cls };
            outs.push(model.forward(&input).unwrap().logits);
        }
        for i in 0..outs.len() {
            for j in i + 1..outs.len() {
                assert_ne!(outs[i], outs[j], "{} vs {}", Placement::ALL[i], Placement::ALL[j]);
            }
        }
    }

    #[test]
    fn overlong_sequence_rejected() {
        let model = Model::new(small_config(Placement::default())).unwrap();
        let visual = Tensor::zeros(&[16, 5]);
        let cls = Tensor::zeros(&[1, 5]);
        let input = SampleInput { tokens: &[1; 6], visual: &visual, cls: &cls };
        assert_eq!(model.forward(&input).unwrap_err().kind(), "config");
        let input = SampleInput { tokens: &[99], visual: &visual, cls: &cls };
        assert!(model.forward(&input).is_err());
    }

    #[test]
    fn causal_logits_ignore_future_tokens() {
        let mut model = Model::new(small_config(Placement::default())).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        trained_like(&mut model, &mut rng);
        let visual = random(&[16, 5], &mut rng);
        let cls = random(&[1, 5], &mut rng);
        let a = model.forward(&SampleInput { tokens: &[1, 2, 3, 4], visual: &visual, cls: &cls }).unwrap();
        let b = model.forward(&SampleInput { tokens: &[1, 2, 9, 0], visual: &visual, cls: &cls }).unwrap();
        for pos in 0..3 {
            assert_eq!(a.logits.row(pos), b.logits.row(pos));
        }
        assert_ne!(a.logits.row(3), b.logits.row(3));
    }

    #[test]
    fn empty_answer_span_has_zero_loss() {
        let logits = Tensor::full(&[3, 4], 1.0);
        let (loss, grad) = answer_loss(&logits, &[]).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad.max_abs(), 0.0);
        let (loss, _) = answer_loss(&logits, &[(2, 1)]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    /// Central differences of the answer loss for every fusion tensor.
    fn check_model_gradients(placement: Placement, gamma: f64, seed: u64) {
        let mut cfg = small_config(placement);
        cfg.fusion.gamma = gamma;
        cfg.seed = seed;
        let mut model = Model::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        trained_like(&mut model, &mut rng);
        let visual = random(&[16, 5], &mut rng);
        let cls = random(&[1, 5], &mut rng);
        let tokens = [1usize, 6, 2];
        let answers = [(3usize, 4usize), (1, 7)];
        let input = SampleInput { tokens: &tokens, visual: &visual, cls: &cls };
        let loss_of = |m: &Model| {
            let t = m.forward(&input).unwrap();
            answer_loss(&t.logits, &answers).unwrap().0
        };
        let trace = model.forward(&input).unwrap();
        let (_, dl) = answer_loss(&trace.logits, &answers).unwrap();
        let grads = backward(&model.base, &model.fusion, &trace, &dl).unwrap();
        let h = 1e-5;
        for (name, g) in grads.tensors() {
            for idx in 0..g.len() {
                let nudged = |delta: f64| {
                    let mut m = model.clone();
                    for (n, t) in m.fusion.tensors_mut() {
                        if n == name {
                            t.data_mut()[idx] += delta;
                        }
                    }
                    m
                };
                let (plus, minus) = (nudged(h), nudged(-h));
                let num = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let ana = g.data()[idx];
                let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                assert!(err < 1e-4, "{placement} {name}[{idx}]: analytic {ana} numeric {num}");
            }
        }
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        for (i, p) in Placement::ALL.into_iter().enumerate() {
            check_model_gradients(p, 0.0, i as u64);
        }
        check_model_gradients(Placement::default(), 0.2, 11);
    }
}
