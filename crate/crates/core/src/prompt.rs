//! Multiscale visual prompts built from a 16×16 grid of patch features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::random_normal;
use crate::tensor::{concat_rows, pool2d, PoolKind, Scalar, Tensor};

/// Side length of the patch grid.
pub const GRID: usize = 16;
pub const PATCHES: usize = GRID * GRID;
pub const ALLOWED_SCALES: [usize; 3] = [1, 2, 4];

/// Frozen encoder output: one feature row per patch plus a global summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `256×d′`, raster order over the 16×16 grid.
    pub patches: Tensor,
    /// `1×d′`
    pub cls: Tensor,
}

/// Stand-in for a frozen vision tower.
///
/// Each patch feature is `content · W + pos(row, col)` where `content` is the
/// cell's channel vector, `W` a fixed Gaussian map drawn from `seed`, and
/// `pos` a 2-D sinusoidal code. The global feature is the patch mean.
#[derive(Debug, Clone)]
pub struct SyntheticEncoder {
    content_map: Tensor,
    position_code: Tensor,
}

impl SyntheticEncoder {
    pub fn new(channels: usize, d_vis: usize, seed: u64) -> Result<Self> {
        if channels == 0 || d_vis < channels {
            return Err(Error::Config(format!(
                "encoder needs 0 < channels ({channels}) <= d_vis ({d_vis})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(SyntheticEncoder {
            content_map: random_normal(&[channels, d_vis], 1.0, &mut rng),
            position_code: sinusoidal_2d(d_vis),
        })
    }

    pub fn channels(&self) -> usize {
        self.content_map.rows()
    }

    pub fn d_vis(&self) -> usize {
        self.content_map.cols()
    }

    pub fn position_code(&self) -> &Tensor {
        &self.position_code
    }

    /// Encodes a `16×16×c` grid.
    pub fn encode(&self, image: &Tensor) -> Result<EncoderOutput> {
        let c = self.channels();
        if image.shape() != [GRID, GRID, c] {
            return Err(Error::shape("synthetic_encoder", &[GRID, GRID, c], image.shape()));
        }
        let cells = image.reshape(&[PATCHES, c])?;
        let patches = crate::tensor::matmul(&cells, &self.content_map)?.add(&self.position_code)?;
        let d = self.d_vis();
        let mut mean = vec![0.0; d];
        for i in 0..PATCHES {
            for (m, v) in mean.iter_mut().zip(patches.row(i)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= PATCHES as Scalar;
        }
        Ok(EncoderOutput {
            patches,
            cls: Tensor::new(&[1, d], mean)?,
        })
    }

    /// Encodes a grid given as one colour index per cell (one-hot channels).
    pub fn encode_indices(&self, cells: &[u8]) -> Result<EncoderOutput> {
        self.encode(&one_hot_grid(cells, self.channels())?)
    }
}

pub fn one_hot_grid(cells: &[u8], channels: usize) -> Result<Tensor> {
    if cells.len() != PATCHES {
        return Err(Error::shape("one_hot_grid", &[PATCHES], &[cells.len()]));
    }
    let mut t = Tensor::zeros(&[GRID, GRID, channels]);
    for (i, &c) in cells.iter().enumerate() {
        let c = c as usize;
        if c >= channels {
            return Err(Error::Config(format!("cell value {c} out of {channels} channels")));
        }
        t.data_mut()[i * channels + c] = 1.0;
    }
    Ok(t)
}

/// Row position in the first half of the channels, column in the second.
fn sinusoidal_2d(d: usize) -> Tensor {
    let half = d / 2;
    let mut t = Tensor::zeros(&[PATCHES, d]);
    let encode = |out: &mut [Scalar], pos: usize| {
        let width = out.len();
        for (i, v) in out.iter_mut().enumerate() {
            let pair = (i / 2) as Scalar;
            let freq = 1.0 / 100.0f64.powf(2.0 * pair / width.max(1) as Scalar);
            let angle = pos as Scalar * freq;
            *v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    };
    for r in 0..GRID {
        for c in 0..GRID {
            let row = t.row_mut(r * GRID + c);
            let (a, b) = row.split_at_mut(half);
            encode(a, r);
            encode(b, c);
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub scales: Vec<usize>,
    pub pool: PoolKind,
}

impl Default for PromptSpec {
    fn default() -> Self {
        PromptSpec {
            scales: vec![1, 2],
            pool: PoolKind::Avg,
        }
    }
}

impl PromptSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("at least one prompt scale is required".into()));
        }
        for (i, s) in self.scales.iter().enumerate() {
            if !ALLOWED_SCALES.contains(s) {
                return Err(Error::Config(format!("prompt scale {s} not in {ALLOWED_SCALES:?}")));
            }
            if self.scales[..i].contains(s) {
                return Err(Error::Config(format!("prompt scale {s} repeated")));
            }
        }
        Ok(())
    }

    /// `Σ (16/s)²`
    pub fn row_count(&self) -> usize {
        self.scales.iter().map(|s| (GRID / s) * (GRID / s)).sum()
    }

    /// Short label such as `avg:256+64`.
    pub fn label(&self) -> String {
        let sizes: Vec<String> = self
            .scales
            .iter()
            .map(|s| ((GRID / s) * (GRID / s)).to_string())
            .collect();
        let pool = match self.pool {
            PoolKind::Avg => "avg",
            PoolKind::Max => "max",
        };
        format!("{pool}:{}", sizes.join("+"))
    }
}

/// Where a prompt row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowOrigin {
    pub scale: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiscalePrompt {
    /// `N_total×d′`
    pub features: Tensor,
    pub origins: Vec<RowOrigin>,
    pub spec: PromptSpec,
}

impl MultiscalePrompt {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Row range occupied by `scale`.
    pub fn scale_range(&self, scale: usize) -> Option<std::ops::Range<usize>> {
        let mut start = 0;
        for &s in &self.spec.scales {
            let n = (GRID / s) * (GRID / s);
            if s == scale {
                return Some(start..start + n);
            }
            start += n;
        }
        None
    }

    /// Rebuilds the pooled `(16/s)×(16/s)×d′` grid for `scale` by placing each
    /// row at its recorded position.
    pub fn unflatten(&self, scale: usize) -> Result<Tensor> {
        let side = GRID / scale;
        let d = self.features.cols();
        let mut grid = Tensor::zeros(&[side, side, d]);
        let mut seen = 0;
        for (i, o) in self.origins.iter().enumerate() {
            if o.scale != scale {
                continue;
            }
            let dst = (o.row * side + o.col) * d;
            grid.data_mut()[dst..dst + d].copy_from_slice(self.features.row(i));
            seen += 1;
        }
        if seen != side * side {
            return Err(Error::Config(format!("scale {scale} not present in prompt")));
        }
        Ok(grid)
    }

    /// Per-row metadata for the JSON sidecar of a prompt dump.
    pub fn metadata(&self) -> PromptMetadata {
        PromptMetadata {
            spec: self.spec.clone(),
            rows: self.origins.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptMetadata {
    #[serde(flatten)]
    pub spec: PromptSpec,
    pub rows: Vec<RowOrigin>,
}

/// Pools the patch grid at every requested scale and concatenates the
/// raster-flattened results in the given scale order.
pub fn build_prompt(enc: &EncoderOutput, spec: &PromptSpec) -> Result<MultiscalePrompt> {
    spec.validate()?;
    if enc.patches.rank() != 2 || enc.patches.rows() != PATCHES {
        return Err(Error::shape("build_prompt", &[PATCHES], enc.patches.shape()));
    }
    let d = enc.patches.cols();
    let grid = enc.patches.reshape(&[GRID, GRID, d])?;
    let mut parts = Vec::with_capacity(spec.scales.len());
    let mut origins = Vec::with_capacity(spec.row_count());
    for &s in &spec.scales {
        let pooled = if s == 1 {
            grid.clone()
        } else {
            pool2d(&grid, s, spec.pool)?
        };
        let side = GRID / s;
        parts.push(pooled.reshape(&[side * side, d])?);
        for row in 0..side {
            for col in 0..side {
                origins.push(RowOrigin { scale: s, row, col });
            }
        }
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(MultiscalePrompt {
        features: concat_rows(&refs)?,
        origins,
        spec: spec.clone(),
    })
}

/// Prepends the embedded [cls] row to the text stream.
pub fn attach_cls(text_tokens: &Tensor, cls_embedded: &Tensor) -> Result<Tensor> {
    if cls_embedded.rank() != 2 || cls_embedded.rows() != 1 {
        return Err(Error::invalid("attach_cls", cls_embedded.shape(), "cls must be 1×d"));
    }
    if text_tokens.rank() != 2 || text_tokens.cols() != cls_embedded.cols() {
        return Err(Error::shape("attach_cls", text_tokens.shape(), cls_embedded.shape()));
    }
    concat_rows(&[cls_embedded, text_tokens])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_cells(seed: u64, colors: u8) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..PATCHES).map(|_| rng.random_range(0..colors)).collect()
    }

    #[test]
    fn encoder_is_deterministic() {
        let enc = SyntheticEncoder::new(8, 32, 5).unwrap();
        let cells = random_cells(1, 8);
        assert_eq!(enc.encode_indices(&cells).unwrap(), enc.encode_indices(&cells).unwrap());
        let again = SyntheticEncoder::new(8, 32, 5).unwrap();
        assert_eq!(enc.encode_indices(&cells).unwrap(), again.encode_indices(&cells).unwrap());
    }

    #[test]
    fn swapping_cells_touches_only_their_rows() {
        let enc = SyntheticEncoder::new(8, 32, 5).unwrap();
        let mut cells = random_cells(2, 8);
        cells[3] = 1;
        cells[200] = 6;
        let before = enc.encode_indices(&cells).unwrap();
        cells.swap(3, 200);
        let after = enc.encode_indices(&cells).unwrap();
        for i in 0..PATCHES {
            let same = before.patches.row(i) == after.patches.row(i);
            assert_eq!(same, i != 3 && i != 200, "row {i}");
        }
        // content parts swapped, position parts stayed
        let pos = enc.position_code();
        for k in 0..32 {
            let c3 = before.patches.at(3, k) - pos.at(3, k);
            let c200 = after.patches.at(200, k) - pos.at(200, k);
            assert!((c3 - c200).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_image_is_position_code() {
        let enc = SyntheticEncoder::new(4, 16, 9).unwrap();
        let out = enc.encode(&Tensor::zeros(&[16, 16, 4])).unwrap();
        assert_eq!(&out.patches, enc.position_code());
    }

    #[test]
    fn encoder_rejects_bad_input() {
        assert!(SyntheticEncoder::new(8, 4, 0).is_err());
        let enc = SyntheticEncoder::new(2, 4, 0).unwrap();
        assert!(enc.encode(&Tensor::zeros(&[8, 8, 2])).is_err());
        assert!(enc.encode_indices(&[3; PATCHES]).is_err());
    }

    fn prompt(scales: &[usize], pool: PoolKind) -> MultiscalePrompt {
        let enc = SyntheticEncoder::new(8, 12, 3).unwrap();
        let out = enc.encode_indices(&random_cells(4, 8)).unwrap();
        build_prompt(&out, &PromptSpec { scales: scales.to_vec(), pool }).unwrap()
    }

    #[test]
    fn row_counts_per_configuration() {
        for (scales, n) in [
            (&[1][..], 256),
            (&[1, 2][..], 320),
            (&[1, 2, 4][..], 336),
            (&[2, 4][..], 80),
            (&[2][..], 64),
            (&[4][..], 16),
            (&[1, 4][..], 272),
        ] {
            let p = prompt(scales, PoolKind::Avg);
            assert_eq!(p.len(), n);
            assert_eq!(p.features.rows(), n);
            assert_eq!(p.spec.row_count(), n);
        }
    }

    #[test]
    fn scale_one_is_passthrough() {
        let enc = SyntheticEncoder::new(8, 12, 3).unwrap();
        let out = enc.encode_indices(&random_cells(4, 8)).unwrap();
        let p = build_prompt(&out, &PromptSpec { scales: vec![1], pool: PoolKind::Avg }).unwrap();
        assert_eq!(p.features, out.patches);
    }

    #[test]
    fn invalid_scales_rejected() {
        let enc = SyntheticEncoder::new(2, 4, 0).unwrap();
        let out = enc.encode(&Tensor::zeros(&[16, 16, 2])).unwrap();
        for scales in [vec![], vec![3], vec![1, 1], vec![8]] {
            let err = build_prompt(&out, &PromptSpec { scales, pool: PoolKind::Avg }).unwrap_err();
            assert_eq!(err.kind(), "config");
        }
    }

    #[test]
    fn pooled_rows_match_window_means() {
        let enc = SyntheticEncoder::new(8, 12, 3).unwrap();
        let out = enc.encode_indices(&random_cells(7, 8)).unwrap();
        let p = build_prompt(&out, &PromptSpec { scales: vec![1, 2, 4], pool: PoolKind::Avg }).unwrap();
        for (i, o) in p.origins.iter().enumerate() {
            for k in 0..12 {
                let mut s = 0.0;
                for di in 0..o.scale {
                    for dj in 0..o.scale {
                        s += out.patches.at((o.row * o.scale + di) * GRID + o.col * o.scale + dj, k);
                    }
                }
                let mean = s / (o.scale * o.scale) as f64;
                assert!((mean - p.features.at(i, k)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn max_pool_prompt_uses_window_max() {
        let p = prompt(&[2], PoolKind::Max);
        let base = prompt(&[1], PoolKind::Max);
        let o = p.origins[5];
        for k in 0..12 {
            let mut m = f64::NEG_INFINITY;
            for di in 0..2 {
                for dj in 0..2 {
                    m = m.max(base.features.at((o.row * 2 + di) * GRID + o.col * 2 + dj, k));
                }
            }
            assert_eq!(p.features.at(5, k), m);
        }
    }

    #[test]
    fn unflatten_reconstructs_pooled_grids() {
        let enc = SyntheticEncoder::new(8, 12, 3).unwrap();
        let out = enc.encode_indices(&random_cells(8, 8)).unwrap();
        let p = build_prompt(&out, &PromptSpec { scales: vec![2, 1, 4], pool: PoolKind::Avg }).unwrap();
        let grid = out.patches.reshape(&[16, 16, 12]).unwrap();
        assert_eq!(p.unflatten(1).unwrap(), grid);
        assert_eq!(p.unflatten(2).unwrap(), crate::tensor::avg_pool2d(&grid, 2).unwrap());
        assert_eq!(p.unflatten(4).unwrap(), crate::tensor::avg_pool2d(&grid, 4).unwrap());
        assert_eq!(p.scale_range(1), Some(64..320));
        assert!(p.unflatten(8).is_err());
    }

    #[test]
    fn attach_cls_prepends_one_row() {
        let cls = Tensor::from_rows(&[[9.0, 9.0]]).unwrap();
        let empty = Tensor::zeros(&[0, 2]);
        assert_eq!(attach_cls(&empty, &cls).unwrap(), cls);
        let text = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let out = attach_cls(&text, &cls).unwrap();
        assert_eq!(out.data(), &[9.0, 9.0, 1.0, 2.0, 3.0, 4.0]);
        assert!(attach_cls(&text, &Tensor::zeros(&[1, 3])).is_err());
    }

    proptest! {
        #[test]
        fn prompt_row_formula(mask in 1u8..8, seed in any::<u64>()) {
            let scales: Vec<usize> = ALLOWED_SCALES.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, &s)| s).collect();
            let enc = SyntheticEncoder::new(3, 6, seed).unwrap();
            let out = enc.encode_indices(&random_cells(seed, 3)).unwrap();
            let spec = PromptSpec { scales: scales.clone(), pool: PoolKind::Avg };
            let p = build_prompt(&out, &spec).unwrap();
            let want: usize = scales.iter().map(|s| (16 / s) * (16 / s)).sum();
            prop_assert_eq!(p.len(), want);
            prop_assert_eq!(p.origins.len(), want);
            prop_assert_eq!(build_prompt(&out, &spec).unwrap(), p);
        }

        #[test]
        fn attach_cls_grows_by_one(t in 0usize..10) {
            let text = Tensor::zeros(&[t, 3]);
            let cls = Tensor::full(&[1, 3], 1.0);
            let out = attach_cls(&text, &cls).unwrap();
            prop_assert_eq!(out.rows(), t + 1);
            prop_assert_eq!(out.row(0), cls.row(0));
        }
    }
}
