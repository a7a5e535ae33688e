//! Operation counts for standard versus parameter-free cross-attention, with
//! optional wall-clock timing of both kernels.

use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{param_free_xattn, random_normal, standard_xattn, StandardXAttnParams};
use crate::tensor::{Activation, Scalar};

/// Number of timed repetitions per kernel; the median is reported.
pub const BENCH_REPEATS: usize = 11;

/// Exact non-negative rational, kept in lowest terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u128,
    pub den: u128,
}

impl Ratio {
    pub fn new(num: u128, den: u128) -> Self {
        let g = gcd(num, den).max(1);
        Ratio {
            num: num / g,
            den: den / g,
        }
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Median wall-clock nanoseconds per call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub standard_ns: u128,
    pub param_free_ns: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    /// Text rows.
    pub l: u64,
    /// Visual rows.
    pub n: u64,
    /// Hidden width.
    pub d: u64,
    pub flops_standard: u128,
    pub flops_param_free: u128,
    pub ratio: Ratio,
    pub ratio_approx: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub measured_ns: Option<Timing>,
}

impl FlopsReport {
    /// `flops_standard − flops_param_free`
    pub fn savings(&self) -> u128 {
        self.flops_standard - self.flops_param_free
    }

    /// Two-column plain-text table.
    pub fn table(&self) -> String {
        let mut rows: Vec<(&str, String)> = vec![
            ("L", self.l.to_string()),
            ("N", self.n.to_string()),
            ("d", self.d.to_string()),
            ("standard FLOPs", self.flops_standard.to_string()),
            ("param-free FLOPs", self.flops_param_free.to_string()),
            ("savings", self.savings().to_string()),
            ("ratio", format!("{} (~{:.4})", self.ratio, self.ratio_approx)),
        ];
        if let Some(t) = self.measured_ns {
            rows.push(("standard ns (median)", t.standard_ns.to_string()));
            rows.push(("param-free ns (median)", t.param_free_ns.to_string()));
        }
        let kw = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let vw = rows.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
        rows.iter()
            .map(|(k, v)| format!("{k:<kw$}  {v:>vw$}\n"))
            .collect()
    }
}

fn overflow(l: u64, n: u64, d: u64) -> Error {
    Error::Config(format!("FLOP count overflows u128 for L={l}, N={n}, d={d}"))
}

/// Counts multiply-adds as two operations. Projections, scores and the
/// weighted sum are included; softmax and activations are not.
///
/// standard = `2Ld² + 2Nd² + 2LNd`, parameter-free = `2LNd`.
pub fn flops(l: u64, n: u64, d: u64) -> Result<FlopsReport> {
    if l == 0 || n == 0 || d == 0 {
        return Err(Error::Config(format!("L, N, d must be positive (got {l}, {n}, {d})")));
    }
    let (lw, nw, dw) = (l as u128, n as u128, d as u128);
    let term = |a: u128, b: u128, c: u128| {
        2u128
            .checked_mul(a)
            .and_then(|x| x.checked_mul(b))
            .and_then(|x| x.checked_mul(c))
    };
    let param_free = term(lw, nw, dw).ok_or_else(|| overflow(l, n, d))?;
    let standard = term(lw, dw, dw)
        .and_then(|x| term(nw, dw, dw).and_then(|y| x.checked_add(y)))
        .and_then(|x| x.checked_add(param_free))
        .ok_or_else(|| overflow(l, n, d))?;
    let ratio = Ratio::new(standard, param_free);
    Ok(FlopsReport {
        l,
        n,
        d,
        flops_standard: standard,
        flops_param_free: param_free,
        ratio,
        ratio_approx: ratio.to_f64(),
        measured_ns: None,
    })
}

/// [`flops`] plus median timings of both kernels on seeded random inputs.
/// The parameter-free kernel runs with `γ = 0` and `φ = silu`.
pub fn flops_with_bench(l: u64, n: u64, d: u64, seed: u64) -> Result<FlopsReport> {
    let mut report = flops(l, n, d)?;
    let (l, n, d) = (l as usize, n as usize, d as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_l = random_normal(&[l, d], 1.0, &mut rng);
    let x_v = random_normal(&[n, d], 1.0, &mut rng);
    let params = StandardXAttnParams::random(d, &mut rng);
    let standard_ns = median_ns(|| standard_xattn(&x_l, &x_v, &params).map(|_| ()))?;
    let param_free_ns = median_ns(|| param_free_xattn(&x_l, &x_v, Activation::Silu, 0.0).map(|_| ()))?;
    report.measured_ns = Some(Timing {
        standard_ns,
        param_free_ns,
    });
    Ok(report)
}

fn median_ns(mut f: impl FnMut() -> Result<()>) -> Result<u128> {
    let mut times = Vec::with_capacity(BENCH_REPEATS);
    for _ in 0..BENCH_REPEATS {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_nanos());
    }
    times.sort_unstable();
    Ok(times[BENCH_REPEATS / 2])
}

/// `d(L+N)/(LN) + 1`, the closed form of the ratio.
pub fn ratio_closed_form(l: u64, n: u64, d: u64) -> Scalar {
    let (l, n, d) = (l as Scalar, n as Scalar, d as Scalar);
    d * (l + n) / (l * n) + 1.0
}
