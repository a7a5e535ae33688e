//! Acceptance suite. Each test prints one `PASS`/`FAIL` line and then
//! asserts the same condition.

use std::io::Write as _;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vlfuse_core::data::gen_dataset;
use vlfuse_core::flops::flops;
use vlfuse_core::fusion::{FusionTape, VisualMemory};
use vlfuse_core::harness::{ablate, drop_heatmap, pooling_rows, run_experiment_full, AblationAxis, ExperimentConfig, TrainedRun};
use vlfuse_core::model::{Model, ModelConfig, Placement, SampleInput};
use vlfuse_core::tensor::matmul;
use vlfuse_core::train::VisionPipeline;
use vlfuse_core::{adaptive_mask, fuse, param_free_xattn, standard_xattn, Activation, FusionParams, StandardXAttnParams, Tensor};

fn report(name: &str, ok: bool, detail: String) {
    let line = format!("[acceptance] {} {name}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    // bypasses the test harness's output capture
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

type Grid = Vec<Vec<f64>>;

fn grid(t: &Tensor) -> Grid {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Unmasked identity-feature attention, one scalar at a time.
fn oracle_param_free(xl: &Grid, xv: &Grid) -> Grid {
    let d = xl[0].len();
    xl.iter()
        .map(|q| {
            let mut out = vec![0.0; d];
            for v in xv {
                let mut s = 0.0;
                for k in 0..d {
                    s += q[k] * v[k];
                }
                for k in 0..d {
                    out[k] += s * v[k];
                }
            }
            out
        })
        .collect()
}

fn oracle_matmul(a: &Grid, b: &Grid) -> Grid {
    let (n, m, p) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; p]; n];
    for i in 0..n {
        for j in 0..p {
            for k in 0..m {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn oracle_transpose(a: &Grid) -> Grid {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

fn oracle_standard(xl: &Grid, xv: &Grid, p: &StandardXAttnParams) -> Grid {
    let q = oracle_matmul(xl, &grid(&p.w_q));
    let k = oracle_matmul(xv, &grid(&p.w_k));
    let v = oracle_matmul(xv, &grid(&p.w_v));
    let scale = 1.0 / (p.d_k as f64).sqrt();
    let weights: Grid = q
        .iter()
        .map(|qi| {
            let s: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale).collect();
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|x| x / z).collect()
        })
        .collect();
    oracle_matmul(&oracle_matmul(&weights, &v), &oracle_transpose(&grid(&p.w_o)))
}

#[test]
fn oracle_equivalence() {
    let start = Instant::now();
    let mut worst_pf: f64 = 0.0;
    let mut worst_std: f64 = 0.0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = rng.random_range(1..=16);
        let n = rng.random_range(1..=32);
        let d = rng.random_range(1..=8);
        let xl = uniform(l, d, &mut rng);
        let xv = uniform(n, d, &mut rng);
        let out = param_free_xattn(&xl, &xv, Activation::Identity, 0.0).unwrap().out;
        let want = oracle_param_free(&grid(&xl), &grid(&xv));
        worst_pf = worst_pf.max(max_diff(&out, &Tensor::from_rows(&want.iter().map(|r| r.as_slice()).collect::<Vec<_>>()).unwrap()));

        let p = StandardXAttnParams::random(d, &mut rng);
        let out = standard_xattn(&xl, &xv, &p).unwrap();
        let want = oracle_standard(&grid(&xl), &grid(&xv), &p);
        worst_std = worst_std.max(max_diff(&out, &Tensor::from_rows(&want.iter().map(|r| r.as_slice()).collect::<Vec<_>>()).unwrap()));
    }
    let elapsed = start.elapsed();
    let ok = worst_pf <= 1e-12 && worst_std <= 1e-10 && elapsed < Duration::from_secs(5);
    report(
        "oracle equivalence",
        ok,
        format!("param-free max err {worst_pf:.2e} (tol 1e-12), standard max err {worst_std:.2e} (tol 1e-10), {:.3}s (limit 5s)", elapsed.as_secs_f64()),
    );
    assert!(ok);
}

/// Fusion instance with every tensor nonzero.
fn fusion_instance(seed: u64, gamma: f64) -> (FusionParams, Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = rng.random_range(1..=4);
    let n = rng.random_range(4..=12);
    let d = rng.random_range(2..=6);
    let dv = rng.random_range(2..=5);
    let r = rng.random_range(1..=3);
    let mut params = FusionParams::new(
        uniform(dv, r, &mut rng),
        uniform(r, d, &mut rng),
        uniform(dv, r, &mut rng),
        uniform(r, d, &mut rng),
        uniform(n, d, &mut rng),
        Default::default(),
    )
    .unwrap();
    params.hyper.gamma = gamma;
    params.hyper.beta = 0.5;
    (params, uniform(l, d, &mut rng), uniform(n, dv, &mut rng), uniform(l, d, &mut rng))
}

#[test]
fn gradient_suite() {
    let start = Instant::now();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    let mut seed = 1000u64;
    let mut gammas_seen = [0usize; 2];
    while checked < 24 {
        let gi = checked % 2;
        let gamma = [0.0, 0.2][gi];
        seed += 1;
        let (params, x_l, x_raw, up) = fusion_instance(seed, gamma);
        let mut tape = FusionTape::new(&params);
        let base = tape.forward(&x_l, &x_raw).unwrap();
        let g = tape.backward(&up).unwrap();
        let objective = |p: &FusionParams, xl: &Tensor| -> Option<f64> {
            let o = fuse(xl, &x_raw, p).unwrap();
            (o.decision == base.decision).then(|| o.delta.data().iter().zip(up.data()).map(|(a, b)| a * b).sum())
        };
        let mut errs = Vec::new();
        let mut tie = false;
        for which in 0..4 {
            let analytic = [&g.a_feat, &g.b_feat, &g.pos_embed, &g.x_l][which];
            for idx in 0..analytic.len() {
                let eval = |delta: f64| {
                    let mut p = params.clone();
                    let mut xl = x_l.clone();
                    let t = match which {
                        0 => &mut p.a_feat,
                        1 => &mut p.b_feat,
                        2 => &mut p.pos_embed,
                        _ => &mut xl,
                    };
                    t.data_mut()[idx] += delta;
                    objective(&p, &xl)
                };
                match (eval(h), eval(-h)) {
                    (Some(a), Some(b)) => {
                        let num = (a - b) / (2.0 * h);
                        let ana = analytic.data()[idx];
                        errs.push((num - ana).abs() / num.abs().max(ana.abs()).max(1e-6));
                    }
                    _ => tie = true,
                }
            }
        }
        if tie {
            // the finite difference straddles a mask boundary
            skipped += 1;
            continue;
        }
        worst = errs.into_iter().fold(worst, f64::max);
        gammas_seen[gi] += 1;
        checked += 1;
    }
    let elapsed = start.elapsed();
    let ok = worst <= 1e-4 && gammas_seen.iter().all(|&c| c >= 10) && elapsed < Duration::from_secs(30);
    report(
        "gradient suite",
        ok,
        format!(
            "{checked} instances (gamma 0: {}, gamma 0.2: {}, {skipped} near-tie redraws), max rel err {worst:.2e} (tol 1e-4), {:.2}s (limit 30s)",
            gammas_seen[0],
            gammas_seen[1],
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

/// Number of dropped entries for the tested ratios, in integer arithmetic.
fn expected_drops(gamma_id: usize, n: usize) -> usize {
    match gamma_id {
        0 => 0,
        1 => n / 10,
        2 => n / 5,
        // 0.5 - 1e-6
        _ => n.div_ceil(2) - 1,
    }
}

#[test]
fn mask_properties() {
    let start = Instant::now();
    let gammas = [0.0, 0.1, 0.2, 0.5 - 1e-6];
    let mut cases = 0;
    let mut ok = true;
    for seed in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = rng.random_range(1..=64);
        let n = rng.random_range(1..=336);
        // coarse quantisation creates many ties
        let levels: f64 = if seed % 2 == 0 { 7.0 } else { 1e6 };
        let s = Tensor::new(
            &[rows, n],
            (0..rows * n).map(|_| (rng.random_range(-1.0..1.0) * levels).round() / levels).collect(),
        )
        .unwrap();
        for (gi, &gamma) in gammas.iter().enumerate() {
            let k = expected_drops(gi, n);
            let dec = adaptive_mask(&s, gamma).unwrap();
            for i in 0..rows {
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| s.at(i, a).partial_cmp(&s.at(i, b)).unwrap().then(a.cmp(&b)));
                let mut expected = vec![true; n];
                for &j in &order[..k] {
                    expected[j] = false;
                }
                ok &= dec.kept_row(i) == expected.as_slice();
                ok &= dec.kept_row(i).iter().filter(|&&kept| !kept).count() == k;
            }
            cases += 1;
        }
    }

    // full fusion output against manual zeroing with the oracle's drop set
    for seed in 0..20u64 {
        for (gi, &gamma) in gammas.iter().enumerate() {
            let (params, x_l, x_raw, _) = fusion_instance(500 + seed, gamma);
            let out = fuse(&x_l, &x_raw, &params).unwrap();
            let n = out.scores.cols();
            let k = expected_drops(gi, n);
            let mut zeroed = out.scores.clone();
            for i in 0..zeroed.rows() {
                let row = out.scores.row(i).to_vec();
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap().then(a.cmp(&b)));
                for &j in &order[..k] {
                    zeroed.set(i, j, 0.0);
                }
            }
            let values = VisualMemory::prepare(&x_raw, &params).unwrap().values().clone();
            let manual = matmul(&zeroed, &values).unwrap().scale(params.hyper.alpha);
            ok &= manual == out.delta;

            let pf = param_free_xattn(&x_l, &values, params.hyper.phi, gamma).unwrap();
            let zero_pf = pf.decision.apply(&pf.scores).unwrap();
            ok &= matmul(&zero_pf, &values).unwrap() == pf.out;
            cases += 1;
        }
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(5);
    report(
        "mask properties",
        ok,
        format!("{cases} matrices, exact cardinality, sort oracle and manual zeroing, {:.3}s (limit 5s)", elapsed.as_secs_f64()),
    );
    assert!(ok);
}

#[test]
fn flops_model() {
    let r = flops(256, 320, 4096).unwrap();
    let mut ok = r.flops_standard == 19_998_441_472 && r.flops_param_free == 671_088_640;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let (l, n, d) = (rng.random_range(1..100_000u64), rng.random_range(1..100_000u64), rng.random_range(1..100_000u64));
        let r = flops(l, n, d).unwrap();
        let (l, n, d) = (l as u128, n as u128, d as u128);
        ok &= r.flops_standard - r.flops_param_free == 2 * l * d * d + 2 * n * d * d;
        ok &= r.flops_param_free == 2 * l * n * d;
    }
    report(
        "FLOPs model",
        ok,
        format!(
            "standard {} param-free {} ratio {:.4}; savings identity on 100 random shapes",
            r.flops_standard, r.flops_param_free, r.ratio_approx
        ),
    );
    assert!(ok);
}

#[test]
fn initialization_nullity() {
    let cfg = ModelConfig {
        pos_embed_init_std: 0.0,
        seed: 21,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg.clone()).unwrap();
    let null = model.fusion.b_feat.max_abs() == 0.0 && model.fusion.pos_embed.max_abs() == 0.0;
    let vision = VisionPipeline::new(8, cfg.d_vis, cfg.prompt.clone(), 5).unwrap();
    let data = gen_dataset(21, 0, 80, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut identical = true;
    let mut rows = 0;
    for batch in data.test.chunks(8) {
        for s in batch {
            let len = rng.random_range(1..cfg.max_seq_len);
            let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
            let img = vision.encode(&s.image).unwrap();
            let input = SampleInput {
                tokens: &tokens,
                visual: &img.prompt.features,
                cls: &img.cls,
            };
            let fused = model.forward(&input).unwrap().logits;
            let plain = model.forward_baseline(&input).unwrap().logits;
            identical &= fused.data().iter().zip(plain.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            rows += fused.rows();
        }
    }
    let ok = null && identical;
    report(
        "initialization nullity",
        ok,
        format!("10 batches, {rows} logit rows bit-identical to the fusion-free baseline: {identical}"),
    );
    assert!(ok);
}

struct EndToEnd {
    fused: TrainedRun,
    text_only: TrainedRun,
}

fn end_to_end() -> &'static EndToEnd {
    static RUNS: OnceLock<EndToEnd> = OnceLock::new();
    RUNS.get_or_init(|| {
        let base = ExperimentConfig::default();
        let fused = run_experiment_full(&base, "fused").unwrap();
        let mut text = base.clone();
        text.model.fusion.alpha = 0.0;
        let text_only = run_experiment_full(&text, "alpha=0").unwrap();
        EndToEnd { fused, text_only }
    })
}

#[test]
fn end_to_end_learning_signal() {
    let runs = end_to_end();
    let f = &runs.fused.report;
    let t = &runs.text_only.report;
    let colors = f.config.data.colors as f64;
    let ok_fused = f.test_accuracy >= 0.90;
    let ok_text = t.test_accuracy <= 1.0 / colors + 0.05;
    let ok_time = f.wall_clock_s < 600.0 && t.wall_clock_s < 600.0;
    let ok = ok_fused && ok_text && ok_time;
    report(
        "end-to-end learning signal",
        ok,
        format!(
            "fused accuracy {:.4} (need >= 0.90) after {} steps in {:.0}s; alpha=0 accuracy {:.4} (need <= {:.4}) in {:.0}s",
            f.test_accuracy,
            f.loss_curve.len(),
            f.wall_clock_s,
            t.test_accuracy,
            1.0 / colors + 0.05,
            t.wall_clock_s
        ),
    );
    assert!(ok);
}

#[test]
fn ablation_structure() {
    let mut base = ExperimentConfig::default();
    base.seed = 100;
    base.data.n_train = 64;
    base.data.n_test = 48;
    base.train.steps = 8;
    base.train.batch_size = 8;
    base.heatmap_samples = 8;

    let mut ok = true;
    let mut details = Vec::new();
    let mut projection_acc = Vec::new();
    for (axis, expected) in [(AblationAxis::Placement, 6), (AblationAxis::Projection, 6), (AblationAxis::Pooling, 8)] {
        let result = ablate(axis, &base);
        ok &= result.entries.len() == expected;
        ok &= result.entries.iter().all(|e| e.report.is_some());
        let labels: Vec<_> = result.entries.iter().map(|e| e.label.clone()).collect();
        let expected_labels: Vec<String> = match axis {
            AblationAxis::Placement => Placement::ALL.iter().map(|p| p.to_string()).collect(),
            AblationAxis::Projection => Activation::ALL.iter().map(|a| a.name().to_string()).collect(),
            _ => pooling_rows().iter().map(|p| p.label()).collect(),
        };
        let mut a = labels.clone();
        let mut b = expected_labels;
        a.sort();
        b.sort();
        ok &= a == b;
        let mut reproduced = 0;
        for e in &result.entries {
            let Some(r) = &e.report else { continue };
            let again = run_experiment_full(&r.config, &r.label).unwrap().report;
            if again.same_outcome(r) {
                reproduced += 1;
            }
            if axis == AblationAxis::Projection {
                projection_acc.push((e.label.clone(), r.test_accuracy));
            }
        }
        ok &= reproduced == expected;
        details.push(format!("{}: {}/{expected} reports, {reproduced} reproduced", axis.name(), result.entries.len()));
    }
    let acc = |name: &str| projection_acc.iter().find(|(l, _)| l == name).map(|(_, a)| *a).unwrap_or(f64::NAN);
    let (silu, ident, soft) = (acc("silu"), acc("identity"), acc("softmax_rows"));
    let directional = silu >= ident && ident >= soft;
    let _ = std::io::stderr().write_all(
        format!(
            "[acceptance] note: projection ordering silu {silu:.4} identity {ident:.4} softmax {soft:.4} -> silu >= identity >= softmax: {directional} (logged only)\n"
        )
        .as_bytes(),
    );
    report("ablation structure", ok, details.join("; "));
    assert!(ok);
}

#[test]
fn heatmap_conservation() {
    let run = &end_to_end().fused;
    let h = drop_heatmap(&run.model, &run.vision, &run.data.vocab, &run.data.test).unwrap();
    let conserved = (h.mean_frequency - h.expected_mean).abs() <= 1e-12;
    let in_range = h.grids.iter().all(|g| g.frequency.iter().chain(&g.normalized).all(|v| (0.0..=1.0).contains(v)));
    let spatial = h.query_top_decile_rate >= 0.80;
    let ok = conserved && in_range && spatial;
    let grid_means: Vec<String> = h.grids.iter().map(|g| format!("scale {} mean {:.4}", g.scale, g.mean())).collect();
    report(
        "heatmap conservation",
        ok,
        format!(
            "mean kept frequency {:.12} vs 1 - floor(gN)/N = {:.12}; queried cell in top decile on {:.4} of {} test samples (need >= 0.80); {}",
            h.mean_frequency,
            h.expected_mean,
            h.query_top_decile_rate,
            h.samples,
            grid_means.join(", ")
        ),
    );
    assert!(ok);
}
