//! Built-in verification suites behind the `selftest` command: finite
//! differences, filter responses, and brute-force oracles for NMS, event
//! matching and the rank tests.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::dsp::{design_butterworth, resample_polyphase, standardize_channels, FilterSpec, ResampleConfig};
use crate::error::Result;
use crate::evalstats::{kruskal_wallis, mann_whitney_u, u_statistic};
use crate::events::{assign_targets, decode_offsets, iou, match_evaluation, nms, AnchorGrid, Interval, ScoredEvent};
use crate::loss::{batch_loss, LossConfig};
use crate::model::{DetectionModel, ModelConfig, OutputVars};
use crate::nncore::gradcheck::{layer_suite, max_gradient_error, rel_err, GradCheckOptions, FD_STEP};
use crate::nncore::{Mode, Tape, Tensor};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Copy)]
pub struct SelftestOptions {
    /// Random instances per gradient check.
    pub trials: usize,
    pub seed: u64,
    /// Offset added to analytic gradients, to confirm failures are caught.
    pub perturb_gradient: f64,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self {
            trials: 10,
            seed: 20_240_601,
            perturb_gradient: 0.0,
        }
    }
}

pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

fn check(suite: &'static str, name: impl Into<String>, passed: bool, detail: String) -> Check {
    Check {
        suite,
        name: name.into(),
        passed,
        detail,
    }
}

/// Runs every suite in order.
pub fn run(opts: &SelftestOptions) -> Result<Vec<Check>> {
    let mut out = gradient_suite(opts)?;
    out.extend(dsp_suite()?);
    out.extend(event_suite(opts.seed));
    out.extend(stats_suite(opts.seed)?);
    Ok(out)
}

pub fn gradient_suite(opts: &SelftestOptions) -> Result<Vec<Check>> {
    let g = GradCheckOptions {
        perturb: opts.perturb_gradient,
    };
    let mut out: Vec<Check> = layer_suite(opts.trials, opts.seed, LAYER_TOLERANCE, g)?
        .into_iter()
        .map(|o| {
            check(
                "gradients",
                o.name.clone(),
                o.passed(),
                format!("max rel err {:.2e} over {} trials", o.max_rel_err, o.trials),
            )
        })
        .collect();

    let cfg = LossConfig::default();
    let mut rng = Rng::stream(opts.seed, 50);
    let mut worst = 0.0f64;
    for _ in 0..opts.trials {
        let (n, a) = (2, 6);
        let logits = random(&mut rng, &[n, a, 2]);
        let y = random(&mut rng, &[n, a, 2]);
        let grid = AnchorGrid::build(45.0, 15.0, 0.5)?;
        let matches: Vec<_> = (0..n).map(|_| assign_targets(&grid, &random_truth(&mut rng, 45.0))).collect();
        worst = worst.max(max_gradient_error(
            &[logits, y],
            |t, v| {
                let p = t.softmax(v[0], 2)?;
                Ok(batch_loss(t, OutputVars { p, y: v[1] }, &matches, &cfg)?.total)
            },
            g,
        )?);
    }
    out.push(check(
        "gradients",
        "total_loss",
        worst < LAYER_TOLERANCE,
        format!("max rel err {worst:.2e} over {} trials", opts.trials),
    ));

    let worst = tiny_model_gradient_error(opts.trials, opts.seed, g)?;
    out.push(check(
        "gradients",
        "end_to_end_model",
        worst < MODEL_TOLERANCE,
        format!("max rel err {worst:.2e} over {} trials", opts.trials),
    ));
    Ok(out)
}

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).expect("shape")
}

fn random_truth(rng: &mut Rng, segment: f64) -> Vec<Interval> {
    let mut t = Vec::new();
    let mut at = rng.uniform_range(0.0, 5.0);
    while at + 3.0 < segment {
        let d = rng.uniform_range(3.0, 15.0).min(segment - at);
        t.push(Interval::new(at, d));
        at += d + rng.uniform_range(1.0, 20.0);
    }
    t
}

/// Tiny network (C = 2, T = 64) whose total loss is checked against
/// central differences in a random sample of parameter entries.
pub fn tiny_model_gradient_error(trials: usize, seed: u64, opts: GradCheckOptions) -> Result<f64> {
    let cfg = ModelConfig {
        channels: 2,
        segment_samples: 64,
        f0: 2,
        kernel: 3,
        stride: 2,
        k_max: 2,
        classes: 1,
        windows_per_anchor: 1,
        anchor_pool: 2,
    };
    let grid = AnchorGrid::build(64.0, 16.0, 0.5)?;
    let loss_cfg = LossConfig::default();
    let mut rng = Rng::stream(seed, 60);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let mut model = DetectionModel::build(cfg.clone(), seed.wrapping_add(trial as u64))?;
        assert_eq!(model.config.n_anchors(), grid.len());
        let x = random(&mut rng, &[3, 1, 2, 64]);
        let matches: Vec<_> = (0..3).map(|_| assign_targets(&grid, &random_truth(&mut rng, 64.0))).collect();
        let loss_of = |model: &mut DetectionModel, backward: bool| -> Result<f64> {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let out = model.forward(&mut tape, xv, Mode::Train)?;
            let l = batch_loss(&mut tape, out, &matches, &loss_cfg)?;
            if backward {
                model.store.zero_grad();
                tape.backward(l.total, &mut model.store)?;
            }
            Ok(tape.value(l.total).item())
        };
        loss_of(&mut model, true)?;
        let analytic: Vec<Tensor> = model
            .store
            .params()
            .iter()
            .map(|p| p.grad.clone().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect();
        let ids: Vec<_> = model.store.ids().collect();
        for (pi, id) in ids.iter().enumerate() {
            let numel = model.store.get(*id).value.numel();
            for _ in 0..3 {
                let k = rng.index(numel);
                let x0 = model.store.get(*id).value.data()[k];
                model.store.get_mut(*id).value.data_mut()[k] = x0 + FD_STEP;
                let up = loss_of(&mut model, false)?;
                model.store.get_mut(*id).value.data_mut()[k] = x0 - FD_STEP;
                let down = loss_of(&mut model, false)?;
                model.store.get_mut(*id).value.data_mut()[k] = x0;
                let numeric = (up - down) / (2.0 * FD_STEP);
                worst = worst.max(rel_err(analytic[pi].data()[k] + opts.perturb, numeric));
            }
        }
    }
    Ok(worst)
}

pub fn dsp_suite() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let fs = 128.0;
    for (label, spec, edges) in [
        ("eeg_eog_bandpass", FilterSpec::bandpass(2, 0.3, 35.0, fs), vec![0.3, 35.0]),
        ("emg_highpass", FilterSpec::highpass(4, 10.0, fs), vec![10.0]),
    ] {
        let c = design_butterworth(&spec)?;
        let worst = edges
            .iter()
            .map(|&f| (c.magnitude(f, fs) / FRAC_1_SQRT_2 - 1.0).abs())
            .fold(0.0, f64::max);
        out.push(check(
            "dsp",
            format!("{label}_cutoff"),
            worst < 0.005,
            format!("largest relative deviation from -3 dB: {worst:.2e}"),
        ));
        let radius = c.poles().iter().map(|p| p.norm()).fold(0.0, f64::max);
        out.push(check(
            "dsp",
            format!("{label}_stable"),
            radius < 1.0,
            format!("largest pole radius {radius:.6}"),
        ));
    }

    let x: Vec<f64> = (0..2560).map(|i| (2.0 * PI * 5.0 * i as f64 / 256.0).sin()).collect();
    let y = resample_polyphase(&x, 256.0, &ResampleConfig::default())?;
    let ideal: Vec<f64> = (0..y.len()).map(|i| (2.0 * PI * 5.0 * i as f64 / 128.0).sin()).collect();
    let (lo, hi) = (128, y.len() - 128);
    let signal: f64 = ideal[lo..hi].iter().map(|v| v * v).sum();
    let noise: f64 = y[lo..hi].iter().zip(&ideal[lo..hi]).map(|(a, b)| (a - b).powi(2)).sum();
    let snr = 10.0 * (signal / noise).log10();
    out.push(check("dsp", "resample_tone_snr", snr > 60.0, format!("{snr:.1} dB")));

    let mut rng = Rng::new(11);
    let mut chans: Vec<Vec<f64>> = (0..3)
        .map(|c| (0..5000).map(|_| 3.0 + (c as f64 + 1.0) * rng.normal()).collect())
        .collect();
    standardize_channels(&mut chans)?;
    let worst = chans
        .iter()
        .map(|ch| {
            let n = ch.len() as f64;
            let m = ch.iter().sum::<f64>() / n;
            let s = (ch.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            m.abs().max((s - 1.0).abs())
        })
        .fold(0.0, f64::max);
    out.push(check(
        "dsp",
        "standardization",
        worst < 1e-9,
        format!("max |mean| or |std - 1|: {worst:.2e}"),
    ));
    Ok(out)
}

/// Reference NMS: repeatedly take the best remaining event and drop every
/// remaining event overlapping it.
pub fn reference_nms(events: &[ScoredEvent], threshold: f64) -> Vec<ScoredEvent> {
    let mut left: Vec<ScoredEvent> = events.to_vec();
    let mut kept = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for (i, e) in left.iter().enumerate() {
            let b = &left[best];
            if e.probability > b.probability || (e.probability == b.probability && e.start_s < b.start_s) {
                best = i;
            }
        }
        let top = left.remove(best);
        left.retain(|e| iou(e.interval(), top.interval()) < threshold);
        kept.push(top);
    }
    kept
}

/// Maximum number of one-to-one pairs with IOU at least the threshold, by
/// exhaustive search.
pub fn brute_force_max_matching(det: &[Interval], truth: &[Interval], threshold: f64) -> usize {
    fn go(i: usize, det: &[Interval], truth: &[Interval], used: &mut Vec<bool>, thr: f64) -> usize {
        if i == det.len() {
            return 0;
        }
        let mut best = go(i + 1, det, truth, used, thr);
        for j in 0..truth.len() {
            if !used[j] && iou(det[i], truth[j]) >= thr {
                used[j] = true;
                best = best.max(1 + go(i + 1, det, truth, used, thr));
                used[j] = false;
            }
        }
        best
    }
    go(0, det, truth, &mut vec![false; truth.len()], threshold)
}

fn random_events(rng: &mut Rng, n: usize, span: f64) -> Vec<ScoredEvent> {
    (0..n)
        .map(|_| ScoredEvent {
            start_s: (rng.uniform_range(0.0, span) * 4.0).round() / 4.0,
            duration_s: (rng.uniform_range(1.0, 15.0) * 4.0).round() / 4.0,
            probability: (rng.uniform() * 10.0).round() / 10.0,
            label: 1,
        })
        .collect()
}

pub fn event_suite(seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    let mut rng = Rng::stream(seed, 70);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.index(11);
        let events = random_events(&mut rng, n, 60.0);
        let thr = [0.3, 0.5, 0.7][rng.index(3)];
        if nms(&events, thr) != reference_nms(&events, thr) {
            mismatches += 1;
        }
    }
    out.push(check(
        "events",
        "nms_vs_reference",
        mismatches == 0,
        format!("{mismatches} of 1000 instances differ"),
    ));

    let mut mismatches = 0;
    for _ in 0..500 {
        let (nd, nt) = (rng.index(7), rng.index(7));
        let det = random_events(&mut rng, nd, 40.0);
        let truth: Vec<Interval> = random_events(&mut rng, nt, 40.0).iter().map(|e| e.interval()).collect();
        let got = match_evaluation(&det, &truth, 0.5);
        let dets: Vec<Interval> = det.iter().map(|e| e.interval()).collect();
        let want = brute_force_max_matching(&dets, &truth, 0.5);
        if got.tp != want || got.tp + got.fp != det.len() || got.tp + got.fn_ != truth.len() {
            mismatches += 1;
        }
    }
    out.push(check(
        "events",
        "matching_vs_brute_force",
        mismatches == 0,
        format!("{mismatches} of 500 instances differ"),
    ));

    let grid = AnchorGrid::build(120.0, 15.0, 0.5).expect("default grid");
    let mut worst = 0.0f64;
    let mut tested = 0;
    for _ in 0..1000 {
        let t = Interval::new(rng.uniform_range(0.0, 105.0), rng.uniform_range(3.0, 15.0));
        if !grid.anchors.iter().any(|a| iou(*a, t) > 0.5) {
            continue;
        }
        tested += 1;
        let m = assign_targets(&grid, &[t]);
        for (a, y) in m.positives.iter().zip(&m.targets) {
            let d = decode_offsets(grid.anchors[*a], *y);
            worst = worst.max((d.start_s - t.start_s).abs()).max((d.end_s() - t.end_s()).abs());
        }
    }
    out.push(check(
        "events",
        "anchor_round_trip",
        worst < 1e-9 && tested > 0,
        format!("max error {worst:.2e} s over {tested} events"),
    ));
    out
}

/// Two-sided permutation p-value of U by enumerating every assignment of
/// the pooled values to a first sample of `a.len()` items.
pub fn permutation_mwu_p(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (n, k) = (pooled.len(), a.len());
    let mu = (a.len() * b.len()) as f64 / 2.0;
    let observed = (u_statistic(a, b) - mu).abs();
    let (mut hits, mut total) = (0u64, 0u64);
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        let mut in_a = vec![false; n];
        for &i in &idx {
            in_a[i] = true;
        }
        let (xa, xb): (Vec<f64>, Vec<f64>) = {
            let xa = (0..n).filter(|i| in_a[*i]).map(|i| pooled[i]).collect();
            let xb = (0..n).filter(|i| !in_a[*i]).map(|i| pooled[i]).collect();
            (xa, xb)
        };
        total += 1;
        if (u_statistic(&xa, &xb) - mu).abs() >= observed - 1e-9 {
            hits += 1;
        }
        // Next k-combination in lexicographic order.
        let mut i = k;
        loop {
            if i == 0 {
                return hits as f64 / total as f64;
            }
            i -= 1;
            if idx[i] < n - k + i {
                idx[i] += 1;
                for j in i + 1..k {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}

pub fn stats_suite(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut rng = Rng::stream(seed, 80);
    let mut worst = 0.0f64;
    for trial in 0..40 {
        let na = 1 + rng.index(8);
        let nb = 1 + rng.index(9);
        // Coarse values so ties occur.
        let draw = |rng: &mut Rng, n: usize| -> Vec<f64> {
            (0..n).map(|_| (rng.uniform() * if trial % 2 == 0 { 5.0 } else { 1000.0 }).floor()).collect()
        };
        let a = draw(&mut rng, na);
        let b = draw(&mut rng, nb);
        let got = mann_whitney_u(&a, &b)?;
        worst = worst.max((got.p - permutation_mwu_p(&a, &b)).abs());
    }
    out.push(check(
        "stats",
        "mwu_exact_vs_permutation",
        worst < 1e-12,
        format!("max |p difference| {worst:.2e} over 40 instances"),
    ));
    let kw = kruskal_wallis(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]])?;
    out.push(check(
        "stats",
        "kruskal_wallis_reference",
        (kw.h - 32.0 / 7.0).abs() < 1e-5,
        format!("H = {:.6}", kw.h),
    ));
    Ok(out)
}
