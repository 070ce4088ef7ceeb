//! Interval algebra, default-window grids, target assignment, decoding,
//! non-maximum suppression and evaluation matching.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::NetworkOutput;

pub const DEFAULT_WINDOW_S: f64 = 15.0;
pub const DEFAULT_OVERLAP: f64 = 0.5;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub start_s: f64,
    pub duration_s: f64,
}

impl Interval {
    pub fn new(start_s: f64, duration_s: f64) -> Self {
        Self { start_s, duration_s }
    }

    pub fn from_bounds(start_s: f64, end_s: f64) -> Self {
        Self::new(start_s, end_s - start_s)
    }

    pub fn end_s(&self) -> f64 {
        self.start_s + self.duration_s
    }

    pub fn center_s(&self) -> f64 {
        self.start_s + 0.5 * self.duration_s
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: Interval, b: Interval) -> f64 {
    let inter = (a.end_s().min(b.end_s()) - a.start_s.max(b.start_s)).max(0.0);
    let union = a.duration_s + b.duration_s - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub segment_duration_s: f64,
    pub window_duration_s: f64,
    pub overlap: f64,
    pub anchors: Vec<Interval>,
}

impl AnchorGrid {
    /// Windows start at `k * window * (1 - overlap)` for every `k` whose
    /// start lies inside the segment; a window as long as the segment
    /// yields a single anchor.
    pub fn build(segment_duration_s: f64, window_duration_s: f64, overlap: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&overlap) {
            return Err(Error::Config(format!("overlap must lie in [0, 1), got {overlap}")));
        }
        if !(window_duration_s > 0.0) {
            return Err(Error::Config("window duration must be positive".into()));
        }
        if window_duration_s > segment_duration_s {
            return Err(Error::Config(format!(
                "window ({window_duration_s} s) longer than segment ({segment_duration_s} s)"
            )));
        }
        let step = window_duration_s * (1.0 - overlap);
        let count = if window_duration_s >= segment_duration_s {
            1
        } else {
            (segment_duration_s / step - 1e-9).ceil() as usize
        };
        let anchors = (0..count)
            .map(|k| Interval::new(k as f64 * step, window_duration_s))
            .collect();
        Ok(Self {
            segment_duration_s,
            window_duration_s,
            overlap,
            anchors,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// `((c_e - c_a) / w, ln(d_e / w))`
pub fn encode(anchor: Interval, event: Interval) -> [f64; 2] {
    let w = anchor.duration_s;
    [(event.center_s() - anchor.center_s()) / w, (event.duration_s / w).ln()]
}

pub fn decode_offsets(anchor: Interval, y: [f64; 2]) -> Interval {
    let w = anchor.duration_s;
    let center = anchor.center_s() + y[0] * w;
    let duration = w * y[1].exp();
    Interval::new(center - 0.5 * duration, duration)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    /// Positive anchors in increasing order.
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    /// Regression target per positive, aligned with `positives`.
    pub targets: Vec<[f64; 2]>,
    /// Truth index per positive, aligned with `positives`.
    pub assigned: Vec<usize>,
}

impl MatchResult {
    pub fn n_pos(&self) -> usize {
        self.positives.len()
    }

    pub fn n_neg(&self) -> usize {
        self.negatives.len()
    }
}

/// Training-time assignment: every truth claims its highest-IOU anchor
/// (ties to the earlier anchor); any other anchor whose best IOU exceeds
/// 0.5 is positive for that truth. Remaining anchors are negative.
pub fn assign_targets(grid: &AnchorGrid, truth: &[Interval]) -> MatchResult {
    let n = grid.len();
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for (a, anchor) in grid.anchors.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, t) in truth.iter().enumerate() {
            let v = iou(*anchor, *t);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, v)) = best {
            if v > 0.5 {
                owner[a] = Some(j);
            }
        }
    }
    // An anchor claimed as best by several truths goes to the one it
    // overlaps most (ties to the earlier truth).
    let mut forced: Vec<Option<(usize, f64)>> = vec![None; n];
    for (j, t) in truth.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (a, anchor) in grid.anchors.iter().enumerate() {
            let v = iou(*anchor, *t);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((a, v));
            }
        }
        if let Some((a, v)) = best {
            if v > 0.0 && forced[a].is_none_or(|(_, w)| v > w) {
                forced[a] = Some((j, v));
            }
        }
    }
    for (o, f) in owner.iter_mut().zip(&forced) {
        if let Some((j, _)) = f {
            *o = Some(*j);
        }
    }
    let mut m = MatchResult::default();
    for (a, o) in owner.iter().enumerate() {
        match o {
            Some(j) => {
                m.positives.push(a);
                m.targets.push(encode(grid.anchors[a], truth[*j]));
                m.assigned.push(*j);
            }
            None => m.negatives.push(a),
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredEvent {
    pub start_s: f64,
    pub duration_s: f64,
    pub probability: f64,
    pub label: usize,
}

impl ScoredEvent {
    pub fn interval(&self) -> Interval {
        Interval::new(self.start_s, self.duration_s)
    }
}

/// Anchors whose arousal probability reaches `tau` become events, clamped
/// to `[0, segment_duration]`.
pub fn decode(probs: &[f64], offsets: &[[f64; 2]], grid: &AnchorGrid, tau: f64) -> Vec<ScoredEvent> {
    let mut out = Vec::new();
    for (a, anchor) in grid.anchors.iter().enumerate() {
        let p = probs[a];
        if p < tau {
            continue;
        }
        let iv = decode_offsets(*anchor, offsets[a]);
        let start = iv.start_s.max(0.0);
        let end = iv.end_s().min(grid.segment_duration_s);
        if end > start {
            out.push(ScoredEvent {
                start_s: start,
                duration_s: end - start,
                probability: p,
                label: 1,
            });
        }
    }
    out
}

/// Decodes item `b` of a batched network output.
pub fn decode_output(out: &NetworkOutput, b: usize, grid: &AnchorGrid, tau: f64) -> Result<Vec<ScoredEvent>> {
    if out.n_anchors() != grid.len() {
        return Err(Error::Shape(format!(
            "network emits {} anchors, grid has {}",
            out.n_anchors(),
            grid.len()
        )));
    }
    let probs: Vec<f64> = (0..grid.len()).map(|a| out.arousal_prob(b, a)).collect();
    let offsets: Vec<[f64; 2]> = (0..grid.len()).map(|a| out.offsets(b, a)).collect();
    Ok(decode(&probs, &offsets, grid, tau))
}

/// Greedy NMS: highest probability first (ties to the earlier start); an
/// event survives if its IOU with every kept event is below the threshold.
pub fn nms(events: &[ScoredEvent], iou_threshold: f64) -> Vec<ScoredEvent> {
    let mut order: Vec<&ScoredEvent> = events.iter().collect();
    order.sort_by(|a, b| {
        b.probability
            .total_cmp(&a.probability)
            .then(a.start_s.total_cmp(&b.start_s))
    });
    let mut kept: Vec<ScoredEvent> = Vec::new();
    for e in order {
        if kept.iter().all(|k| iou(k.interval(), e.interval()) < iou_threshold) {
            kept.push(*e);
        }
    }
    kept
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchOutcome {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `(detection index, truth index)` pairs.
    pub pairs: Vec<(usize, usize)>,
}

/// One-to-one matching of detections to truths over pairs with
/// `IOU >= threshold`. Pairs are taken greedily by descending IOU (ties to
/// the more probable detection, then the earlier truth); augmenting paths
/// then extend the greedy matching to maximum cardinality.
pub fn match_evaluation(detected: &[ScoredEvent], truth: &[Interval], iou_threshold: f64) -> MatchOutcome {
    let mut cand: Vec<(usize, usize, f64)> = Vec::new();
    for (d, e) in detected.iter().enumerate() {
        for (t, iv) in truth.iter().enumerate() {
            let v = iou(e.interval(), *iv);
            if v >= iou_threshold {
                cand.push((d, t, v));
            }
        }
    }
    cand.sort_by(|a, b| {
        b.2.total_cmp(&a.2)
            .then(detected[b.0].probability.total_cmp(&detected[a.0].probability))
            .then(a.1.cmp(&b.1))
            .then(a.0.cmp(&b.0))
    });
    let mut det_of_truth: Vec<Option<usize>> = vec![None; truth.len()];
    let mut truth_of_det: Vec<Option<usize>> = vec![None; detected.len()];
    for &(d, t, _) in &cand {
        if truth_of_det[d].is_none() && det_of_truth[t].is_none() {
            truth_of_det[d] = Some(t);
            det_of_truth[t] = Some(d);
        }
    }
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); detected.len()];
    for &(d, t, _) in &cand {
        adj[d].push(t);
    }
    fn augment(
        d: usize,
        adj: &[Vec<usize>],
        seen: &mut [bool],
        det_of_truth: &mut [Option<usize>],
        truth_of_det: &mut [Option<usize>],
    ) -> bool {
        for &t in &adj[d] {
            if seen[t] {
                continue;
            }
            seen[t] = true;
            let free = match det_of_truth[t] {
                None => true,
                Some(other) => augment(other, adj, seen, det_of_truth, truth_of_det),
            };
            if free {
                det_of_truth[t] = Some(d);
                truth_of_det[d] = Some(t);
                return true;
            }
        }
        false
    }
    for d in 0..detected.len() {
        if truth_of_det[d].is_none() && !adj[d].is_empty() {
            let mut seen = vec![false; truth.len()];
            augment(d, &adj, &mut seen, &mut det_of_truth, &mut truth_of_det);
        }
    }
    let pairs: Vec<(usize, usize)> = truth_of_det
        .iter()
        .enumerate()
        .filter_map(|(d, t)| t.map(|t| (d, t)))
        .collect();
    let tp = pairs.len();
    MatchOutcome {
        tp,
        fp: detected.len() - tp,
        fn_: truth.len() - tp,
        pairs,
    }
}

/// `record_id, start_s, duration_s, probability` per line, six decimals.
pub fn format_events(rows: &[(String, ScoredEvent)]) -> String {
    let mut s = String::new();
    for (id, e) in rows {
        writeln!(s, "{id}, {:.6}, {:.6}, {:.6}", e.start_s, e.duration_s, e.probability).unwrap();
    }
    s
}

pub fn parse_events(text: &str) -> Result<Vec<(String, ScoredEvent)>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let here = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |m: &str| Error::Parse {
            offset: here,
            message: format!("{m}: `{line}`"),
        };
        if fields.len() != 4 {
            return Err(bad("expected 4 comma-separated fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("invalid number"));
        out.push((
            fields[0].to_string(),
            ScoredEvent {
                start_s: num(fields[1])?,
                duration_s: num(fields[2])?,
                probability: num(fields[3])?,
                label: 1,
            },
        ));
    }
    Ok(out)
}
