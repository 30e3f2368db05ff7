// SPDX-License-Identifier: MIT OR Apache-2.0

//! The ten acceptance checks, one PASS/FAIL line each.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::Parser;
use hijacklens::eval::{run_ab, zero_ablation_check, EvalKnobs};
use hijacklens::habi::{
    calibrate, identify_inert, otsu_threshold, quartile_threshold, CalibrationKnobs,
    HijackProfile,
};
use hijacklens::havae::{build_hook, enhance_attention, InterventionSpec, Mode};
use hijacklens::heads::{
    har, nhar, persistent_set, rank_heads, step_top_k, HeadId, HeadTableKnobs, DEFAULT_K_TOP,
    DEFAULT_T,
};
use hijacklens::lens::lens_distribution;
use hijacklens::model::{
    make_battery, make_capture_fixture, make_scene, CaptureSpec, ForwardCapture, ModelConfig,
    SceneParams, ToyScene, ToyTransformer,
};
use hijacklens_cli::{cmd_calibrate, cmd_eval, cmd_rank_heads, Cli};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Exhaustive scan of the 255 interior edges of a 256-bin histogram on [0, 1],
/// bin centers as class representatives, lowest maximizing edge.
fn otsu_scan(values: &[f64]) -> Option<f64> {
    const B: usize = 256;
    let centers: Vec<f64> = values
        .iter()
        .map(|&v| {
            let b = ((v * B as f64).floor() as usize).min(B - 1);
            (b as f64 + 0.5) / B as f64
        })
        .collect();
    let n = values.len() as f64;
    let mut best: Option<(usize, f64)> = None;
    for k in 1..B {
        let edge = k as f64 / B as f64;
        let lo: Vec<f64> = centers.iter().copied().filter(|&c| c < edge).collect();
        let hi: Vec<f64> = centers.iter().copied().filter(|&c| c >= edge).collect();
        if lo.is_empty() || hi.is_empty() {
            continue;
        }
        let m0 = lo.iter().sum::<f64>() / lo.len() as f64;
        let m1 = hi.iter().sum::<f64>() / hi.len() as f64;
        let var = (lo.len() as f64 / n) * (hi.len() as f64 / n) * (m0 - m1).powi(2);
        if best.is_none_or(|(_, b)| var > b * (1.0 + 1e-9)) {
            best = Some((k, var));
        }
    }
    best.filter(|&(_, v)| v > 0.0).map(|(k, _)| k as f64 / B as f64)
}

fn criterion_1() -> Check {
    let start = Instant::now();
    for seed in 0..100u64 {
        let mut r = rng(seed);
        let n = r.random_range(50..300);
        let low = Normal::<f64>::new(r.random_range(0.05..0.35), 0.06).unwrap();
        let high = Normal::<f64>::new(r.random_range(0.6..0.9), 0.06).unwrap();
        let w = r.random_range(0.5..0.9);
        let values: Vec<f64> = (0..n)
            .map(|_| {
                let d = if r.random_bool(w) { &low } else { &high };
                d.sample(&mut r).clamp(0.0, 1.0)
            })
            .collect();
        let got = otsu_threshold(&values, 256).map_err(|e| format!("seed {seed}: {e}"))?;
        let want = otsu_scan(&values).ok_or(format!("seed {seed}: scan found no split"))?;
        ensure(got == want, format!("seed {seed}: {got} vs scan {want}"))?;
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(1), format!("took {t:?}"))?;
    Ok(format!("100/100 samples match the exhaustive scan in {t:.2?}"))
}

fn criterion_2() -> Check {
    let xs: Vec<f64> = (1..=8).map(f64::from).collect();
    let t = quartile_threshold(&xs, 1.5).map_err(|e| e.to_string())?;
    let q3 = quartile_threshold(&xs, 0.0).map_err(|e| e.to_string())?;
    ensure(t == 11.5, format!("threshold {t}"))?;
    ensure(q3 == 6.25, format!("Q3 {q3}"))?;
    Ok("threshold 11.5, Q3 6.25".into())
}

fn criterion_3() -> Check {
    let mut worst_attn: f64 = 0.0;
    let mut worst_lens: f64 = 0.0;
    for i in 0..20u64 {
        let mut r = rng(1000 + i);
        let heads = [1, 2, 4][r.random_range(0..3)];
        let cfg = ModelConfig::with_dims(
            r.random_range(1..=4),
            heads,
            heads * r.random_range(4..=8),
            r.random_range(48..=96),
            r.random_range(4..=16),
            r.random(),
        )
        .map_err(|e| e.to_string())?;
        let model = ToyTransformer::new(cfg).map_err(|e| e.to_string())?;
        let scene = make_scene(&model, &SceneParams::default(), i, r.random()).map_err(|e| e.to_string())?;
        let mut seq = scene.input(&model);
        for _ in 0..r.random_range(0..8) {
            seq.push_output(r.random_range(0..cfg.vocab_size as u32));
        }
        let cap = model
            .forward_capture(&seq, Some(scene.embeddings.view()), None)
            .map_err(|e| e.to_string())?;
        let t = cap.seq_len();
        for (l, a) in cap.attn.iter().enumerate() {
            for h in 0..a.shape()[0] {
                for q in 0..t {
                    worst_attn = worst_attn.max(((0..t).map(|k| a[[h, q, k]]).sum::<f64>() - 1.0).abs());
                    if let Some(k) = (q + 1..t).find(|&k| a[[h, q, k]] != 0.0) {
                        return Err(format!("pair {i} layer {l} head {h}: query {q} sees key {k}"));
                    }
                }
            }
        }
        for hidden in &cap.hidden {
            for row in hidden.outer_iter() {
                let p = lens_distribution(row, &model).map_err(|e| e.to_string())?;
                worst_lens = worst_lens.max((p.sum() - 1.0).abs());
            }
        }
    }
    ensure(worst_attn <= 1e-6, format!("attention row off by {worst_attn:e}"))?;
    ensure(worst_lens <= 1e-6, format!("lens distribution off by {worst_lens:e}"))?;
    Ok(format!("20 pairs causal; max row error {worst_attn:.1e}, lens {worst_lens:.1e}"))
}

fn criterion_4() -> Check {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    let mut worst_precision: f64 = 1.0;
    for seed in 0..20u64 {
        let model = ToyTransformer::new(ModelConfig::toy(seed)).map_err(|e| e.to_string())?;
        ensure(model.config().n_vision == 16, "fixture must have 16 vision tokens")?;
        let params = SceneParams::default();
        ensure(params.n_inert == 2, "fixture must plant 2 inert tokens")?;
        let cal_scenes = make_battery(&model, &params, 50, seed, "calibration").map_err(|e| e.to_string())?;
        let cal = calibrate(&cal_scenes, &model, &CalibrationKnobs::default(), seed).map_err(|e| e.to_string())?;
        let anchors: BTreeSet<_> = cal.profile.anchors.iter().copied().collect();
        let test = make_battery(&model, &params, 20, seed, "eval").map_err(|e| e.to_string())?;
        let (mut s_tp, mut s_fp, mut s_fn) = (0, 0, 0);
        for s in cal_scenes.iter().chain(&test) {
            ensure(
                anchors.contains(&s.anchor_word),
                format!("seed {seed} scene {}: anchor {} not discovered", s.id, s.anchor_word),
            )?;
        }
        for s in &test {
            let gen = model
                .generate_greedy(&s.input(&model), Some(s.embeddings.view()), 1, None)
                .map_err(|e| e.to_string())?;
            let got: BTreeSet<usize> = identify_inert(&gen.captures, &model, &cal.profile)
                .map_err(|e| e.to_string())?
                .into_iter()
                .collect();
            let want: BTreeSet<usize> = s.planted_inert.iter().copied().collect();
            s_tp += got.intersection(&want).count();
            s_fp += got.difference(&want).count();
            s_fn += want.difference(&got).count();
        }
        ensure(s_fn == 0, format!("seed {seed}: recall {}/{}", s_tp, s_tp + s_fn))?;
        let precision = s_tp as f64 / (s_tp + s_fp).max(1) as f64;
        ensure(precision >= 0.9, format!("seed {seed}: precision {precision:.3}"))?;
        worst_precision = worst_precision.min(precision);
        tp += s_tp;
        fp += s_fp;
        fn_ += s_fn;
    }
    Ok(format!(
        "20 seeds: tp {tp}, fp {fp}, fn {fn_}; recall 1.0, worst precision {worst_precision:.3}; anchors found in every run"
    ))
}

fn criterion_5() -> Check {
    // hand example: head 0 targeted, vision means [0.3, 0.2]
    let mut a = Array3::zeros((2, 1, 3));
    for (h, row) in [[0.2, 0.1, 0.7], [0.4, 0.3, 0.3]].iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            a[[h, 0, k]] = v;
        }
    }
    enhance_attention(&mut a, &[0], 0.1, 0..2, 0..1, false).map_err(|e| e.to_string())?;
    let hand = [(0, 0, 0.23), (0, 1, 0.12), (1, 0, 0.4), (1, 1, 0.3)];
    for (h, k, v) in hand {
        ensure((a[[h, 0, k]] - v).abs() < 1e-12, format!("hand example [{h}, {k}] = {}", a[[h, 0, k]]))?;
    }

    let mut worst: f64 = 0.0;
    for i in 0..100u64 {
        let mut r = rng(5000 + i);
        let (h, t) = (r.random_range(1..=6), r.random_range(2..=12));
        let nv = r.random_range(1..t);
        let start = r.random_range(0..t);
        let alpha = r.random_range(0.0..2.0);
        let orig = Array3::from_shape_fn((h, t, t), |_| r.random_range(-1.0..1.0));
        let targets: Vec<usize> = (0..h).filter(|_| r.random_bool(0.5)).collect();
        let mut out = orig.clone();
        enhance_attention(&mut out, &targets, alpha, 0..nv, start..t, false).map_err(|e| e.to_string())?;
        for hh in 0..h {
            for q in 0..t {
                for k in 0..t {
                    let hit = targets.contains(&hh) && q >= start && k < nv;
                    if hit {
                        let mean = (0..h).map(|g| orig[[g, q, k]].abs()).sum::<f64>() / h as f64;
                        worst = worst.max((out[[hh, q, k]] - (orig[[hh, q, k]] + alpha * mean)).abs());
                    } else if out[[hh, q, k]].to_bits() != orig[[hh, q, k]].to_bits() {
                        return Err(format!("tensor {i}: untouched entry ({hh}, {q}, {k}) changed"));
                    }
                }
            }
        }
    }
    ensure(worst <= 1e-9, format!("max deviation {worst:e}"))?;

    let model = ToyTransformer::new(ModelConfig::toy(42)).map_err(|e| e.to_string())?;
    let profile = {
        let mut p = bare_ranked_profile(&model);
        p.alpha = 0.0;
        p
    };
    let hook = build_hook(&InterventionSpec::from_profile(&profile, Mode::Enhance, 0.0, false), &profile)
        .map_err(|e| e.to_string())?;
    let scenes = make_battery(&model, &SceneParams::default(), 10, 42, "eval").map_err(|e| e.to_string())?;
    for s in &scenes {
        let vis = Some(s.embeddings.view());
        let base = model.generate_greedy(&s.input(&model), vis, 10, None).map_err(|e| e.to_string())?;
        let hooked = model
            .generate_greedy(&s.input(&model), vis, 10, Some(hook.as_ref()))
            .map_err(|e| e.to_string())?;
        ensure(
            base.tokens == hooked.tokens && base.captures == hooked.captures,
            format!("scene {}: alpha 0 changed generation", s.id),
        )?;
    }
    Ok(format!("hand example exact; 100 random tensors max error {worst:.1e}; alpha 0 bit-identical on 10 scenes"))
}

/// Calibrated profile targeting every head of layers 1 and 2.
fn bare_ranked_profile(model: &ToyTransformer) -> HijackProfile {
    let scenes = make_battery(model, &SceneParams::default(), 10, 7, "calibration").unwrap();
    let mut p = calibrate(&scenes, model, &CalibrationKnobs::default(), 7).unwrap().profile;
    p.h_target = HeadId::all(2, model.config().n_heads).iter().map(|h| (h.layer, h.head)).collect();
    p.k = Some(p.h_target.len());
    p
}

fn worked_capture(row: &[f64], n_vision: usize, n_heads: usize) -> ForwardCapture {
    let model = ToyTransformer::new(ModelConfig::toy(0)).unwrap();
    let mut spec = CaptureSpec::uniform(n_vision, row.len() - n_vision, 1, n_heads, 1, 20);
    spec.query_rows[0][0] = vec![row.to_vec(); n_heads];
    make_capture_fixture(&model, &spec).unwrap().0.remove(0)
}

fn criterion_6() -> Check {
    let cap = worked_capture(&[0.5, 0.3, 0.2], 2, 1);
    let head = HeadId::new(1, 1);
    let inert = BTreeSet::from([0]);
    let n = nhar(&cap, head, &inert);
    ensure((n - 0.3).abs() < 1e-12, format!("worked NHAR {n}"))?;
    let h = har(&cap, head, &inert).map_err(|e| e.to_string())?;
    ensure((h - 0.625).abs() < 1e-12, format!("worked HAR {h}"))?;

    let model = ToyTransformer::new(ModelConfig::toy(11)).map_err(|e| e.to_string())?;
    let scenes = make_battery(&model, &SceneParams::default(), 10, 11, "eval").map_err(|e| e.to_string())?;
    let mut checked = 0usize;
    for s in &scenes {
        let gen = model
            .generate_greedy(&s.input(&model), Some(s.embeddings.view()), 5, None)
            .map_err(|e| e.to_string())?;
        let all: BTreeSet<usize> = (0..s.n_vision()).collect();
        let planted: BTreeSet<usize> = s.planted_inert.iter().copied().collect();
        for cap in &gen.captures {
            for id in HeadId::all(cap.n_layers(), cap.n_heads()) {
                let empty = har(cap, id, &BTreeSet::new()).map_err(|e| e.to_string())?;
                let full = har(cap, id, &all).map_err(|e| e.to_string())?;
                let mid = har(cap, id, &planted).map_err(|e| e.to_string())?;
                ensure(empty == 0.0 && full == 1.0, format!("HAR endpoints {empty}, {full}"))?;
                ensure((0.0..=1.0).contains(&mid), format!("HAR {mid} out of range"))?;
                let row = cap.query_row(id.layer - 1, id.head - 1);
                let z: f64 = row.sum();
                let normalized: f64 = (0..s.n_vision()).filter(|p| !planted.contains(p)).map(|p| row[p] / z).sum();
                let raw = nhar(cap, id, &planted);
                ensure((raw - normalized).abs() <= 1e-9, format!("raw {raw} vs normalized {normalized}"))?;
                checked += 1;
            }
        }
    }
    Ok(format!("worked example NHAR 0.3, HAR 0.625; identities on {checked} head-steps"))
}

fn criterion_7() -> Check {
    ensure(DEFAULT_T == 5 && DEFAULT_K_TOP == 10, format!("defaults T={DEFAULT_T}, K={DEFAULT_K_TOP}"))?;
    let model = ToyTransformer::new(ModelConfig::toy(0)).map_err(|e| e.to_string())?;
    let mut nonempty = 0;
    for i in 0..50u64 {
        let mut r = rng(7000 + i);
        let (nv, np, l, h) = (16, 3, r.random_range(1..=3), r.random_range(1..=3));
        let steps = DEFAULT_T + r.random_range(0..3);
        let mut spec = CaptureSpec::uniform(nv, np, l, h, steps, 20);
        // a few always-heavy positions plus noise, so intersections are non-trivial
        let heavy: Vec<usize> = (0..nv).filter(|_| r.random_bool(0.3)).collect();
        for (t, layers) in spec.query_rows.iter_mut().enumerate() {
            let len = nv + np + t;
            for heads in layers.iter_mut() {
                for row in heads.iter_mut() {
                    let w: Vec<f64> = (0..len)
                        .map(|p| r.random_range(0.01..1.0) + if heavy.contains(&p) { 2.0 } else { 0.0 })
                        .collect();
                    let z: f64 = w.iter().sum();
                    *row = w.iter().map(|x| x / z).collect();
                }
            }
        }
        let (caps, _) = make_capture_fixture(&model, &spec).map_err(|e| e.to_string())?;
        let got = persistent_set(&caps, DEFAULT_T, DEFAULT_K_TOP).map_err(|e| e.to_string())?;
        let mut want: Option<BTreeSet<usize>> = None;
        for cap in &caps[..DEFAULT_T] {
            let top = brute_top_k(cap, DEFAULT_K_TOP);
            want = Some(match want {
                None => top,
                Some(acc) => acc.intersection(&top).copied().collect(),
            });
        }
        let want: Vec<usize> = want.unwrap().into_iter().collect();
        ensure(got == want, format!("fixture {i}: {got:?} vs {want:?}"))?;
        ensure(step_top_k(&caps[0], DEFAULT_K_TOP).len() == DEFAULT_K_TOP, "top-K size")?;
        nonempty += usize::from(!got.is_empty());
    }
    Ok(format!("50/50 fixtures exact ({nonempty} non-empty); T=5, K_top=10"))
}

/// Rank every vision position by mean query attention against all others.
fn brute_top_k(cap: &ForwardCapture, k: usize) -> BTreeSet<usize> {
    let q = cap.query_pos();
    let mass: Vec<f64> = cap
        .spans
        .vision
        .clone()
        .map(|p| {
            let (mut s, mut n) = (0.0, 0);
            for a in &cap.attn {
                for h in 0..a.shape()[0] {
                    s += a[[h, q, p]];
                    n += 1;
                }
            }
            s / n as f64
        })
        .collect();
    (0..mass.len())
        .filter(|&p| {
            let better = (0..mass.len())
                .filter(|&o| mass[o] > mass[p] || (mass[o] == mass[p] && o < p))
                .count();
            better < k
        })
        .map(|i| cap.spans.vision.start + i)
        .collect()
}

struct Battery {
    model: ToyTransformer,
    profile: HijackProfile,
    eval: Vec<ToyScene>,
}

fn seed_42_battery() -> Result<Battery, String> {
    let model = ToyTransformer::new(ModelConfig::toy(42)).map_err(|e| e.to_string())?;
    let params = SceneParams::default();
    let cal_scenes = make_battery(&model, &params, 50, 42, "calibration").map_err(|e| e.to_string())?;
    let cal = calibrate(&cal_scenes, &model, &CalibrationKnobs::default(), 42).map_err(|e| e.to_string())?;
    let (profile, _) = rank_heads(&cal_scenes, &model, &cal.profile, 8, 10, HeadTableKnobs::default())
        .map_err(|e| e.to_string())?;
    let eval = make_battery(&model, &params, 50, 42, "eval").map_err(|e| e.to_string())?;
    Ok(Battery { model, profile, eval })
}

fn criterion_8() -> Check {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let (b, report) = pool.install(|| -> Result<_, String> {
        let b = seed_42_battery()?;
        let knobs = EvalKnobs {
            alpha: 0.3,
            ..EvalKnobs::default()
        };
        let report = run_ab(&b.eval, &b.model, &b.profile, &knobs, 42).map_err(|e| e.to_string())?;
        Ok((b, report))
    })?;
    let t = start.elapsed();
    let real = report.har_real_mean.ok_or("no real-object steps")?;
    let hal = report.har_hal_mean.ok_or("no hallucinated steps")?;
    let n = b.eval.len();
    let reduced = report.inert_share_reduced;
    let detail = format!(
        "HAR hal {hal:.3} vs real {real:.3}; share reduced on {reduced}/{n}; CHAIR_S {:.2} -> {:.2}; {t:.1?} on one thread",
        report.baseline.chair_s, report.intervened.chair_s
    );
    ensure(hal > real, format!("(a) failed: {detail}"))?;
    ensure(reduced as f64 >= 0.9 * n as f64, format!("(b) failed: {detail}"))?;
    ensure(report.intervened.chair_s <= report.baseline.chair_s, format!("(c) failed: {detail}"))?;
    ensure(t < Duration::from_secs(60), format!("too slow: {detail}"))?;
    Ok(detail)
}

fn criterion_9() -> Check {
    let b = seed_42_battery()?;
    let r = zero_ablation_check(&b.eval, &b.model, &b.profile, 10, 42).map_err(|e| e.to_string())?;
    let detail = format!(
        "inert mask unchanged {}/{}; changed: random {} vs inert {}",
        r.unchanged_inert, r.n_scenes, r.changed_random, r.changed_inert
    );
    ensure(r.unchanged_inert as f64 >= 0.8 * r.n_scenes as f64, detail.clone())?;
    ensure(r.changed_random > r.changed_inert, detail.clone())?;
    Ok(detail)
}

fn pipeline(dir: &std::path::Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    let out = dir.to_str().unwrap();
    let parse = |cmd: &str| {
        Cli::try_parse_from(["hijacklens", cmd, "--seed", "42", "--out", out]).map_err(|e| e.to_string())
    };
    let err = |e: hijacklens_cli::CliError| e.message;
    cmd_calibrate(&parse("calibrate")?.run).map_err(err)?;
    cmd_rank_heads(&parse("rank-heads")?.run).map_err(err)?;
    cmd_eval(&parse("eval")?.run).map_err(err)?;
    let read = |f: &str| std::fs::read(dir.join(f)).map_err(|e| e.to_string());
    Ok((read("profile.json")?, read("eval.json")?))
}

fn criterion_10() -> Check {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (pa, ea) = pipeline(a.path())?;
    let (pb, eb) = pipeline(b.path())?;
    ensure(pa == pb, "profile JSON differs between runs")?;
    ensure(ea == eb, "eval JSON differs between runs")?;
    let path = a.path().join("profile.json");
    let profile = HijackProfile::load(&path).map_err(|e| e.to_string())?;
    let copy = a.path().join("profile_copy.json");
    profile.save(&copy).map_err(|e| e.to_string())?;
    let again = std::fs::read(&copy).map_err(|e| e.to_string())?;
    ensure(again == pa, "profile load -> save is not byte-identical")?;
    Ok(format!("profile {} bytes and report {} bytes identical across runs; round-trip exact", pa.len(), ea.len()))
}

fn main() -> ExitCode {
    let checks: [Criterion; 10] = [
        ("Otsu oracle", criterion_1),
        ("quantile lock", criterion_2),
        ("softmax and causality", criterion_3),
        ("planted inert recall", criterion_4),
        ("enhancement exactness", criterion_5),
        ("metric identities", criterion_6),
        ("persistent-set oracle", criterion_7),
        ("directional intervention", criterion_8),
        ("zero-ablation property", criterion_9),
        ("reproducibility", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("{}/10 criteria passed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
