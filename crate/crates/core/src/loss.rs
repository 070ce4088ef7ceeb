//! Detection objective: Huber localization over positive windows plus
//! focal classification terms over positive and negative windows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::MatchResult;
use crate::model::OutputVars;
use crate::nncore::{Tape, Var};

pub use crate::nncore::huber;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("loss.alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("loss.gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loc: f64,
    pub pos: f64,
    pub neg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(loc: f64, pos: f64, neg: f64) -> Self {
        Self {
            loc,
            pos,
            neg,
            total: loc + pos + neg,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.loc, self.pos, self.neg, self.total].iter().all(|v| v.is_finite())
    }
}

/// `-alpha (1 - p)^gamma ln p`, with `p` floored at 1e-12.
pub fn focal_term(p: f64, cfg: &LossConfig) -> f64 {
    crate::nncore::focal(p, cfg.alpha, cfg.gamma)
}

/// Mean over positives of the Huber sum over both coordinates; 0 without
/// positives.
pub fn localization_loss(y: &[[f64; 2]], m: &MatchResult) -> f64 {
    if m.positives.is_empty() {
        return 0.0;
    }
    let total: f64 = m
        .positives
        .iter()
        .zip(&m.targets)
        .map(|(&a, t)| huber(y[a][0] - t[0]) + huber(y[a][1] - t[1]))
        .sum();
    total / m.n_pos() as f64
}

/// `(l_pos, l_neg)`: focal terms of the arousal probability over positives
/// and of the background probability over negatives, each averaged over
/// its own set.
pub fn classification_losses(p: &[[f64; 2]], m: &MatchResult, cfg: &LossConfig) -> (f64, f64) {
    let mean = |idx: &[usize], class: usize| {
        if idx.is_empty() {
            0.0
        } else {
            idx.iter().map(|&a| focal_term(p[a][class], cfg)).sum::<f64>() / idx.len() as f64
        }
    };
    (mean(&m.positives, 1), mean(&m.negatives, 0))
}

pub fn total_loss(p: &[[f64; 2]], y: &[[f64; 2]], m: &MatchResult, cfg: &LossConfig) -> LossBreakdown {
    let (pos, neg) = classification_losses(p, m, cfg);
    LossBreakdown::new(localization_loss(y, m), pos, neg)
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub loc: Var,
    pub pos: Var,
    pub neg: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            loc: tape.value(self.loc).item(),
            pos: tape.value(self.pos).item(),
            neg: tape.value(self.neg).item(),
            total: tape.value(self.total).item(),
        }
    }
}

/// Differentiable loss of a batch: each component is computed per segment
/// with that segment's own normalizers, then averaged over the batch.
pub fn batch_loss(tape: &mut Tape, out: OutputVars, matches: &[MatchResult], cfg: &LossConfig) -> Result<LossVars> {
    let pshape = tape.value(out.p).shape().to_vec();
    if pshape.len() != 3 || pshape[2] != 2 {
        return Err(Error::Shape(format!(
            "loss expects binary class probabilities [N, A, 2], got {pshape:?}"
        )));
    }
    let (n, a) = (pshape[0], pshape[1]);
    if matches.len() != n {
        return Err(Error::Shape(format!("{} match results for a batch of {n}", matches.len())));
    }
    let mut parts: Vec<[Var; 3]> = Vec::with_capacity(n);
    for (b, m) in matches.iter().enumerate() {
        if m.n_pos() + m.n_neg() != a {
            return Err(Error::Shape(format!(
                "match covers {} anchors, network emits {a}",
                m.n_pos() + m.n_neg()
            )));
        }
        let loc_picks: Vec<(usize, f64)> = m
            .positives
            .iter()
            .zip(&m.targets)
            .flat_map(|(&k, t)| [((b * a + k) * 2, t[0]), ((b * a + k) * 2 + 1, t[1])])
            .collect();
        let loc = tape.huber_sum(out.y, loc_picks, m.n_pos() as f64)?;
        let pos_picks = m.positives.iter().map(|&k| (b * a + k) * 2 + 1).collect();
        let pos = tape.focal_mean(out.p, pos_picks, cfg.alpha, cfg.gamma)?;
        let neg_picks = m.negatives.iter().map(|&k| (b * a + k) * 2).collect();
        let neg = tape.focal_mean(out.p, neg_picks, cfg.alpha, cfg.gamma)?;
        parts.push([loc, pos, neg]);
    }
    let scale = 1.0 / n as f64;
    let mut reduce = |k: usize| -> Result<Var> {
        let mut acc = parts[0][k];
        for p in &parts[1..] {
            acc = tape.add(acc, p[k])?;
        }
        Ok(tape.scale(acc, scale))
    };
    let loc = reduce(0)?;
    let pos = reduce(1)?;
    let neg = reduce(2)?;
    let lp = tape.add(loc, pos)?;
    let total = tape.add(lp, neg)?;
    Ok(LossVars { loc, pos, neg, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::gradcheck::{max_gradient_error, GradCheckOptions};
    use crate::nncore::Tensor;
    use crate::rng::Rng;

    fn matches(pos: &[usize], targets: &[[f64; 2]], n: usize) -> MatchResult {
        MatchResult {
            positives: pos.to_vec(),
            negatives: (0..n).filter(|a| !pos.contains(a)).collect(),
            targets: targets.to_vec(),
            assigned: vec![0; pos.len()],
        }
    }

    #[test]
    fn huber_values() {
        assert_eq!(huber(0.0), 0.0);
        assert_eq!(huber(0.5), 0.125);
        assert_eq!(huber(-2.0), 1.5);
        // Value and slope agree on both sides of the breakpoint.
        assert!((huber(1.0 - 1e-9) - huber(1.0 + 1e-9)).abs() < 1e-8);
    }

    #[test]
    fn focal_values() {
        let cfg = LossConfig::default();
        assert_eq!(focal_term(1.0, &cfg), 0.0);
        assert!((focal_term(0.5, &cfg) - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-15);
        let ce = LossConfig { alpha: 1.0, gamma: 0.0 };
        assert!((focal_term(0.5, &ce) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(focal_term(0.0, &cfg).is_finite());
        let mut prev = f64::INFINITY;
        for i in 1..100 {
            let v = focal_term(i as f64 / 100.0, &cfg);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn component_examples() {
        let cfg = LossConfig::default();
        let m = matches(&[0], &[[0.0, 0.0]], 2);
        assert_eq!(localization_loss(&[[0.5, 0.0], [9.0, 9.0]], &m), 0.125);
        assert_eq!(localization_loss(&[[0.0; 2]; 2], &matches(&[], &[], 2)), 0.0);

        let p = [[0.0, 1.0], [0.5, 0.5]];
        let (pos, neg) = classification_losses(&p, &m, &cfg);
        assert_eq!(pos, 0.0);
        assert!((neg - 0.043_321_698_784_996_58).abs() < 1e-12);

        // Negatives are normalized by their own count.
        let m3 = matches(&[0, 2], &[[0.0, 0.0]; 2], 3);
        let p3 = [[0.0, 1.0], [0.5, 0.5], [0.0, 1.0]];
        assert_eq!(classification_losses(&p3, &m3, &cfg).1, neg);
    }

    #[test]
    fn cross_entropy_reduction() {
        let cfg = LossConfig { alpha: 1.0, gamma: 0.0 };
        let p = [[0.3, 0.7], [0.8, 0.2], [0.45, 0.55]];
        let m = matches(&[0], &[[0.0, 0.0]], 3);
        let (pos, neg) = classification_losses(&p, &m, &cfg);
        assert!((pos - -(0.7f64).ln()).abs() < 1e-12);
        assert!((neg - -((0.8f64).ln() + (0.45f64).ln()) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn additivity_and_perfect_predictions() {
        let cfg = LossConfig::default();
        let m = matches(&[1], &[[0.1, -0.2]], 3);
        let perfect = total_loss(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]], &[[0.0; 2], [0.1, -0.2], [0.0; 2]], &m, &cfg);
        assert_eq!(perfect.total, 0.0);
        let b = total_loss(&[[0.6, 0.4], [0.3, 0.7], [0.9, 0.1]], &[[0.0; 2], [0.4, 0.5], [0.0; 2]], &m, &cfg);
        assert_eq!(b.total, b.loc + b.pos + b.neg);
    }

    fn random_case(rng: &mut Rng, n: usize, a: usize) -> (Vec<Tensor>, Vec<MatchResult>) {
        let logits = Tensor::new(&[n, a, 2], (0..n * a * 2).map(|_| rng.normal()).collect()).unwrap();
        let y = Tensor::new(&[n, a, 2], (0..n * a * 2).map(|_| rng.normal()).collect()).unwrap();
        let ms = (0..n)
            .map(|_| {
                let pos: Vec<usize> = (0..a).filter(|_| rng.uniform() < 0.4).collect();
                let t: Vec<[f64; 2]> = pos.iter().map(|_| [rng.normal() * 0.3, rng.normal() * 0.3]).collect();
                matches(&pos, &t, a)
            })
            .collect();
        (vec![logits, y], ms)
    }

    #[test]
    fn tape_loss_matches_reference() {
        let cfg = LossConfig::default();
        let mut rng = Rng::new(17);
        let (inputs, ms) = random_case(&mut rng, 3, 5);
        let mut tape = Tape::new();
        let logits = tape.constant(inputs[0].clone());
        let p = tape.softmax(logits, 2).unwrap();
        let y = tape.constant(inputs[1].clone());
        let lv = batch_loss(&mut tape, OutputVars { p, y }, &ms, &cfg).unwrap().breakdown(&tape);
        let rows = |t: &Tensor, b: usize| -> Vec<[f64; 2]> {
            (0..5).map(|k| [t.at(&[b, k, 0]), t.at(&[b, k, 1])]).collect()
        };
        let mut want = LossBreakdown::default();
        for (b, m) in ms.iter().enumerate() {
            let l = total_loss(&rows(tape.value(p), b), &rows(&inputs[1], b), m, &cfg);
            want.loc += l.loc / 3.0;
            want.pos += l.pos / 3.0;
            want.neg += l.neg / 3.0;
        }
        assert!((lv.loc - want.loc).abs() < 1e-12);
        assert!((lv.pos - want.pos).abs() < 1e-12);
        assert!((lv.neg - want.neg).abs() < 1e-12);
        assert_eq!(lv.total, lv.loc + lv.pos + lv.neg);
    }

    #[test]
    fn total_loss_gradient() {
        let cfg = LossConfig::default();
        let mut rng = Rng::new(23);
        for _ in 0..10 {
            let (inputs, ms) = random_case(&mut rng, 2, 4);
            let err = max_gradient_error(
                &inputs,
                |t, v| {
                    let p = t.softmax(v[0], 2)?;
                    Ok(batch_loss(t, OutputVars { p, y: v[1] }, &ms, &cfg)?.total)
                },
                GradCheckOptions::default(),
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }
}
