//! Segment sampling, the optimization loop with validation-based model
//! selection, record-level inference and detection-threshold selection.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalstats::{metric_values, record_metrics, Metric, RecordMetrics};
use crate::events::{
    assign_targets, decode_output, nms, AnchorGrid, Interval, ScoredEvent, DEFAULT_IOU_THRESHOLD,
    DEFAULT_OVERLAP, DEFAULT_WINDOW_S,
};
use crate::loss::{batch_loss, LossBreakdown, LossConfig};
use crate::model::DetectionModel;
use crate::nncore::{Adam, Mode, OptimizerConfig, ParamStore, Tape, Tensor};
use crate::rng::Rng;
use crate::synthdata::{SignalRecord, AROUSAL_LABEL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub segment_duration_s: f64,
    pub window_duration_s: f64,
    pub window_overlap: f64,
    /// Fixed validation segments drawn per evaluation record.
    pub val_segments_per_record: usize,
    pub threshold_grid: Vec<f64>,
    pub iou_threshold: f64,
    pub rng_seed: u64,
}

pub fn default_threshold_grid() -> Vec<f64> {
    (1..=19).map(|k| f64::from(k) * 5.0 / 100.0).collect()
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            max_steps: 5000,
            eval_every: 100,
            patience: 10,
            segment_duration_s: 120.0,
            window_duration_s: DEFAULT_WINDOW_S,
            window_overlap: DEFAULT_OVERLAP,
            val_segments_per_record: 2,
            threshold_grid: default_threshold_grid(),
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            rng_seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("max_steps", self.max_steps),
            ("eval_every", self.eval_every),
            ("patience", self.patience),
            ("val_segments_per_record", self.val_segments_per_record),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("train.{name} must be positive")));
        }
        if self.threshold_grid.is_empty() {
            return Err(Error::Config("train.threshold_grid must not be empty".into()));
        }
        if self.threshold_grid.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::Config("train.threshold_grid values must lie in (0, 1)".into()));
        }
        if self.threshold_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("train.threshold_grid must be strictly increasing".into()));
        }
        if !(self.segment_duration_s > 0.0) {
            return Err(Error::Config("train.segment_duration_s must be positive".into()));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config("train.iou_threshold must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn anchor_grid(&self) -> Result<AnchorGrid> {
        AnchorGrid::build(self.segment_duration_s, self.window_duration_s, self.window_overlap)
    }
}

/// A segment of a record: its first sample and the events it contains,
/// clipped to the segment and expressed in segment time.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub record: usize,
    pub start_sample: usize,
    pub truth: Vec<Interval>,
}

fn segment_samples(record: &SignalRecord, duration_s: f64) -> usize {
    (duration_s * record.sample_rate_hz).round() as usize
}

/// Events overlapping `[start_s, start_s + duration_s)`, clipped and shifted.
pub fn events_in_window(record: &SignalRecord, start_s: f64, duration_s: f64) -> Vec<Interval> {
    let end = start_s + duration_s;
    record
        .events
        .iter()
        .filter(|e| e.label == AROUSAL_LABEL)
        .filter_map(|e| {
            let lo = e.start_s.max(start_s);
            let hi = e.end_s().min(end);
            (hi > lo).then(|| Interval::from_bounds(lo - start_s, hi - start_s))
        })
        .collect()
}

/// Picks a random arousal of the record and a placement holding at least
/// half of it; eventless records get a uniform placement.
pub fn sample_segment(record: &SignalRecord, index: usize, duration_s: f64, rng: &mut Rng) -> Result<Segment> {
    let fs = record.sample_rate_hz;
    let len = segment_samples(record, duration_s);
    let n = record.n_samples();
    if len > n {
        return Err(Error::Sampling(format!(
            "segment of {duration_s} s exceeds record {} ({} s)",
            record.record_id, record.duration_s
        )));
    }
    let max_start = n - len;
    let arousals: Vec<_> = record.events.iter().filter(|e| e.label == AROUSAL_LABEL).collect();
    let start_sample = if arousals.is_empty() {
        rng.index(max_start + 1)
    } else {
        let e = arousals[rng.index(arousals.len())];
        let half = 0.5 * e.duration_s;
        let lo_s = e.start_s + half - duration_s;
        let hi_s = e.end_s() - half;
        let lo = ((lo_s * fs).ceil().max(0.0) as usize).min(max_start);
        let hi = ((hi_s * fs).floor().max(0.0) as usize).min(max_start);
        if hi < lo {
            return Err(Error::Sampling(format!(
                "no placement of a {duration_s} s segment covers half of the event at {} s in {}",
                e.start_s, record.record_id
            )));
        }
        lo + rng.index(hi - lo + 1)
    };
    let start_s = start_sample as f64 / fs;
    Ok(Segment {
        record: index,
        start_sample,
        truth: events_in_window(record, start_s, duration_s),
    })
}

/// Stacks segments into a `[B, 1, C, T]` input tensor.
pub fn batch_tensor(records: &[SignalRecord], segments: &[Segment], len: usize) -> Result<Tensor> {
    let c = records.first().map_or(0, |r| r.channels.len());
    let mut data = Vec::with_capacity(segments.len() * c * len);
    for s in segments {
        let r = &records[s.record];
        if r.channels.len() != c {
            return Err(Error::Shape("records in a batch differ in channel count".into()));
        }
        for ch in &r.channels {
            data.extend_from_slice(&ch.samples[s.start_sample..s.start_sample + len]);
        }
    }
    Tensor::new(&[segments.len(), 1, c, len], data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub split: String,
    pub loss: LossBreakdown,
    /// Most recent validation total at this step.
    pub val_total: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,split,loc,pos,neg,total,val_total";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let val = r.val_total.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.step, r.split, r.loss.loc, r.loss.pos, r.loss.neg, r.loss.total, val
        )
        .unwrap();
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters and buffers at the lowest validation loss.
    pub best: ParamStore,
    pub best_step: usize,
    pub best_val: LossBreakdown,
    pub steps_run: usize,
    pub stopped_early: bool,
    pub metrics: Vec<MetricsRow>,
}

fn check_data(model: &DetectionModel, records: &[SignalRecord], cfg: &TrainConfig, grid: &AnchorGrid) -> Result<usize> {
    let mc = &model.config;
    if grid.len() != mc.n_anchors() {
        return Err(Error::Config(format!(
            "anchor grid has {} windows but the model emits {} anchors",
            grid.len(),
            mc.n_anchors()
        )));
    }
    if records.is_empty() {
        return Err(Error::Validation("no records to train on".into()));
    }
    for r in records {
        if r.channels.len() != mc.channels {
            return Err(Error::Shape(format!(
                "record {} has {} channels, model expects {}",
                r.record_id,
                r.channels.len(),
                mc.channels
            )));
        }
        let len = segment_samples(r, cfg.segment_duration_s);
        if len != mc.segment_samples {
            return Err(Error::Config(format!(
                "{} s at {} Hz is {len} samples, model expects {}",
                cfg.segment_duration_s, r.sample_rate_hz, mc.segment_samples
            )));
        }
    }
    Ok(mc.segment_samples)
}

/// Fixed validation segments: `per_record` event-centred draws from each record.
pub fn validation_segments(records: &[SignalRecord], cfg: &TrainConfig) -> Result<Vec<Segment>> {
    let mut rng = Rng::stream(cfg.rng_seed, 2);
    let mut out = Vec::new();
    for (i, r) in records.iter().enumerate() {
        for _ in 0..cfg.val_segments_per_record {
            out.push(sample_segment(r, i, cfg.segment_duration_s, &mut rng)?);
        }
    }
    Ok(out)
}

/// Mean evaluation-mode loss over fixed segments.
pub fn validation_loss(
    model: &mut DetectionModel,
    records: &[SignalRecord],
    segments: &[Segment],
    grid: &AnchorGrid,
    loss_cfg: &LossConfig,
    batch_size: usize,
) -> Result<LossBreakdown> {
    let len = model.config.segment_samples;
    let mut acc = LossBreakdown::default();
    for chunk in segments.chunks(batch_size) {
        let x = batch_tensor(records, chunk, len)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = model.forward(&mut tape, xv, Mode::Eval)?;
        let matches: Vec<_> = chunk.iter().map(|s| assign_targets(grid, &s.truth)).collect();
        let l = batch_loss(&mut tape, out, &matches, loss_cfg)?.breakdown(&tape);
        let w = chunk.len() as f64 / segments.len() as f64;
        acc.loc += w * l.loc;
        acc.pos += w * l.pos;
        acc.neg += w * l.neg;
    }
    Ok(LossBreakdown::new(acc.loc, acc.pos, acc.neg))
}

fn divergence(step: usize, loss: &LossBreakdown, store: &ParamStore) -> Error {
    let bad: Vec<&str> = store
        .params()
        .iter()
        .filter(|p| p.value.data().iter().any(|v| !v.is_finite()))
        .map(|p| p.name.as_str())
        .collect();
    let max_abs = store
        .params()
        .iter()
        .flat_map(|p| p.value.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    Error::Divergence {
        step,
        detail: format!(
            "loss loc={} pos={} neg={} total={}; max |param| = {max_abs}; non-finite parameters: [{}]",
            loss.loc,
            loss.pos,
            loss.neg,
            loss.total,
            bad.join(", ")
        ),
    }
}

/// Trains `model` in place and returns the best snapshot by validation loss.
/// On return the model holds the best parameters.
pub fn train(
    model: &mut DetectionModel,
    train_records: &[SignalRecord],
    val_records: &[SignalRecord],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    opt_cfg: &OptimizerConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let grid = cfg.anchor_grid()?;
    let len = check_data(model, train_records, cfg, &grid)?;
    check_data(model, val_records, cfg, &grid)?;
    let val_segments = validation_segments(val_records, cfg)?;
    let mut adam = Adam::new(opt_cfg.clone())?;
    let mut rng = Rng::stream(cfg.rng_seed, 1);
    let mut metrics = Vec::new();
    let mut best: Option<(ParamStore, usize, LossBreakdown)> = None;
    let mut evals_since_best = 0;
    let mut last_val: Option<f64> = None;
    let mut stopped_early = false;
    let mut step = 0;
    while step < cfg.max_steps {
        step += 1;
        let segments: Vec<Segment> = (0..cfg.batch_size)
            .map(|_| {
                let i = rng.index(train_records.len());
                sample_segment(&train_records[i], i, cfg.segment_duration_s, &mut rng)
            })
            .collect::<Result<_>>()?;
        let x = batch_tensor(train_records, &segments, len)?;
        let matches: Vec<_> = segments.iter().map(|s| assign_targets(&grid, &s.truth)).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = model.forward(&mut tape, xv, Mode::Train)?;
        let lv = batch_loss(&mut tape, out, &matches, loss_cfg)?;
        let breakdown = lv.breakdown(&tape);
        if !breakdown.is_finite() {
            return Err(divergence(step, &breakdown, &model.store));
        }
        model.store.zero_grad();
        tape.backward(lv.total, &mut model.store)?;
        adam.step(&mut model.store, step as i64)?;
        metrics.push(MetricsRow {
            step,
            split: "train".into(),
            loss: breakdown,
            val_total: last_val,
        });

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let val = validation_loss(model, val_records, &val_segments, &grid, loss_cfg, cfg.batch_size)?;
            if !val.is_finite() {
                return Err(divergence(step, &val, &model.store));
            }
            last_val = Some(val.total);
            metrics.push(MetricsRow {
                step,
                split: "val".into(),
                loss: val,
                val_total: last_val,
            });
            if best.as_ref().is_none_or(|(_, _, b)| val.total < b.total) {
                let mut snapshot = model.store.clone();
                snapshot.zero_grad();
                best = Some((snapshot, step, val));
                evals_since_best = 0;
            } else {
                evals_since_best += 1;
                if evals_since_best >= cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    let (best_store, best_step, best_val) = best.expect("at least one validation pass");
    model.store = best_store.clone();
    Ok(TrainOutcome {
        best: best_store,
        best_step,
        best_val,
        steps_run: step,
        stopped_early,
        metrics,
    })
}

/// Every decoded anchor of a record (no probability threshold), in record
/// time, plus the record's true arousals.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordPredictions {
    pub record_id: String,
    pub candidates: Vec<ScoredEvent>,
    pub truth: Vec<Interval>,
}

impl RecordPredictions {
    /// Candidates reaching `tau`, after non-maximum suppression.
    pub fn detections(&self, tau: f64, nms_iou: f64) -> Vec<ScoredEvent> {
        let kept: Vec<ScoredEvent> = self.candidates.iter().filter(|e| e.probability >= tau).copied().collect();
        nms(&kept, nms_iou)
    }

    pub fn metrics(&self, tau: f64, iou_threshold: f64) -> RecordMetrics {
        record_metrics(&self.record_id, &self.detections(tau, iou_threshold), &self.truth, iou_threshold)
    }
}

/// Segment starts tiling a record with half-segment hops; the last
/// segment is aligned to the record end.
pub fn tile_starts(n_samples: usize, len: usize) -> Vec<usize> {
    if n_samples < len {
        return Vec::new();
    }
    let hop = (len / 2).max(1);
    let mut starts: Vec<usize> = (0..).map(|k| k * hop).take_while(|&s| s + len <= n_samples).collect();
    if *starts.last().unwrap() + len < n_samples {
        starts.push(n_samples - len);
    }
    starts
}

pub fn predict_record(
    model: &mut DetectionModel,
    record: &SignalRecord,
    cfg: &TrainConfig,
    batch_size: usize,
) -> Result<RecordPredictions> {
    let grid = cfg.anchor_grid()?;
    let len = check_data(model, std::slice::from_ref(record), cfg, &grid)?;
    let fs = record.sample_rate_hz;
    let starts = tile_starts(record.n_samples(), len);
    if starts.is_empty() {
        return Err(Error::Sampling(format!(
            "record {} is shorter than one segment",
            record.record_id
        )));
    }
    let mut candidates = Vec::new();
    let segments: Vec<Segment> = starts
        .iter()
        .map(|&s| Segment {
            record: 0,
            start_sample: s,
            truth: Vec::new(),
        })
        .collect();
    for chunk in segments.chunks(batch_size.max(1)) {
        let x = batch_tensor(std::slice::from_ref(record), chunk, len)?;
        let out = model.predict(x)?;
        for (b, seg) in chunk.iter().enumerate() {
            let offset = seg.start_sample as f64 / fs;
            for mut e in decode_output(&out, b, &grid, 0.0)? {
                e.start_s += offset;
                candidates.push(e);
            }
        }
    }
    Ok(RecordPredictions {
        record_id: record.record_id.clone(),
        candidates,
        truth: events_in_window(record, 0.0, record.duration_s),
    })
}

pub fn predict_records(
    model: &mut DetectionModel,
    records: &[SignalRecord],
    cfg: &TrainConfig,
) -> Result<Vec<RecordPredictions>> {
    records.iter().map(|r| predict_record(model, r, cfg, cfg.batch_size)).collect()
}

/// Mean per-record F1 over records with true events; 0 if there are none.
pub fn mean_f1(preds: &[RecordPredictions], tau: f64, iou_threshold: f64) -> f64 {
    let ms: Vec<RecordMetrics> = preds.iter().map(|p| p.metrics(tau, iou_threshold)).collect();
    let f1 = metric_values(&ms, Metric::F1);
    if f1.is_empty() {
        0.0
    } else {
        f1.iter().sum::<f64>() / f1.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweep {
    pub tau: f64,
    pub grid: Vec<f64>,
    pub mean_f1: Vec<f64>,
}

/// The grid value maximizing mean per-record F1; ties go to the smaller value.
pub fn select_threshold(preds: &[RecordPredictions], grid: &[f64], iou_threshold: f64) -> Result<ThresholdSweep> {
    if grid.is_empty() {
        return Err(Error::Config("threshold grid is empty".into()));
    }
    let scores: Vec<f64> = grid.iter().map(|&t| mean_f1(preds, t, iou_threshold)).collect();
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    Ok(ThresholdSweep {
        tau: grid[best],
        grid: grid.to_vec(),
        mean_f1: scores,
    })
}
