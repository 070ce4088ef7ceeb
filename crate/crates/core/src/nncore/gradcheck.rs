//! Central finite-difference verification of tape gradients.

use super::autograd::{GruVars, Padding2d, Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;
use crate::rng::Rng;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Relative errors are computed against `max(|analytic|, |numeric|, floor)`.
pub const REL_ERR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheckOptions {
    /// Added to every analytic gradient entry; lets callers confirm that
    /// the harness notices a wrong gradient.
    pub perturb: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Largest elementwise relative error between the analytic gradient of
/// `f(inputs)` and its central finite-difference estimate, over every
/// entry of every input.
pub fn max_gradient_error<F>(inputs: &[Tensor], f: F, opts: GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.gradients(out)?;
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for k in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[k];
            work[i].data_mut()[k] = x0 + FD_STEP;
            let up = eval(&work)?;
            work[i].data_mut()[k] = x0 - FD_STEP;
            let down = eval(&work)?;
            work[i].data_mut()[k] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[k] + opts.perturb, numeric));
        }
    }
    Ok(worst)
}

fn random(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * rng.normal()).collect()).expect("shape")
}

/// Reduces an activation to a scalar with fixed random weights so every
/// output element contributes a distinct gradient.
fn project(tape: &mut Tape, y: Var, rng_seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let mut rng = Rng::new(rng_seed);
    let w = tape.constant(random(&mut rng, &shape, 1.0));
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One random instance per layer type: inputs and the function under test.
fn layer_case(name: &str, rng: &mut Rng) -> (Vec<Tensor>, Builder) {
    let seed = rng.next_u64();
    match name {
        "conv2d" => {
            let (n, cin, cout) = (1 + rng.index(2), 1 + rng.index(2), 1 + rng.index(3));
            let (h, w) = (1 + rng.index(3), 4 + rng.index(4));
            let (kh, kw) = (1 + rng.index(h), 1 + rng.index(3));
            let stride = (1, 1 + rng.index(2));
            let pad = Padding2d::width(rng.index(2), rng.index(2));
            let inputs = vec![
                random(rng, &[n, cin, h, w], 1.0),
                random(rng, &[cout, cin, kh, kw], 0.5),
                random(rng, &[cout], 0.5),
            ];
            let f: Builder = Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                project(t, y, seed)
            });
            (inputs, f)
        }
        "batchnorm" => {
            let (n, f, w) = (2 + rng.index(2), 1 + rng.index(3), 2 + rng.index(3));
            let inputs = vec![
                random(rng, &[n, f, 1, w], 1.0),
                random(rng, &[f], 1.0),
                random(rng, &[f], 1.0),
            ];
            let f: Builder = Box::new(move |t, v| {
                let (y, _) = t.batchnorm(v[0], v[1], v[2], None, 1e-5)?;
                project(t, y, seed)
            });
            (inputs, f)
        }
        "batchnorm_eval" => {
            let f = 1 + rng.index(3);
            let mean: Vec<f64> = (0..f).map(|_| rng.normal()).collect();
            let var: Vec<f64> = (0..f).map(|_| 0.5 + rng.uniform()).collect();
            let inputs = vec![
                random(rng, &[2, f, 1, 3], 1.0),
                random(rng, &[f], 1.0),
                random(rng, &[f], 1.0),
            ];
            let f: Builder = Box::new(move |t, v| {
                let (y, _) = t.batchnorm(v[0], v[1], v[2], Some((&mean, &var)), 1e-5)?;
                project(t, y, seed)
            });
            (inputs, f)
        }
        "relu" => {
            // Keep inputs away from the kink.
            let n = 3 + rng.index(6);
            let data = (0..n)
                .map(|_| {
                    let m = 0.1 + rng.uniform();
                    if rng.uniform() < 0.5 {
                        -m
                    } else {
                        m
                    }
                })
                .collect();
            let inputs = vec![Tensor::new(&[n], data).unwrap()];
            let f: Builder = Box::new(move |t, v| {
                let y = t.relu(v[0]);
                project(t, y, seed)
            });
            (inputs, f)
        }
        "softmax" => {
            let shape = [1 + rng.index(3), 2 + rng.index(3), 1 + rng.index(3)];
            let axis = rng.index(3);
            let inputs = vec![random(rng, &shape, 2.0)];
            let f: Builder = Box::new(move |t, v| {
                let y = t.softmax(v[0], axis)?;
                project(t, y, seed)
            });
            (inputs, f)
        }
        "avgpool1d" => {
            let kernel = 1 + rng.index(3);
            let stride = 1 + rng.index(3);
            let w = kernel + rng.index(6);
            let inputs = vec![random(rng, &[2, w], 1.0)];
            let f: Builder = Box::new(move |t, v| {
                let y = t.avgpool1d(v[0], kernel, stride)?;
                project(t, y, seed)
            });
            (inputs, f)
        }
        "bigru" => {
            let (n, feat, h, steps) = (1 + rng.index(2), 1 + rng.index(3), 1 + rng.index(3), 1 + rng.index(4));
            let mut inputs = vec![random(rng, &[n, feat, steps], 1.0)];
            for _ in 0..2 {
                inputs.push(random(rng, &[3 * h, feat], 0.7));
                inputs.push(random(rng, &[3 * h, h], 0.7));
                inputs.push(random(rng, &[3 * h], 0.5));
                inputs.push(random(rng, &[3 * h], 0.5));
            }
            let f: Builder = Box::new(move |t, v| {
                let dir = |o: usize| GruVars {
                    w_ih: v[o],
                    w_hh: v[o + 1],
                    b_ih: v[o + 2],
                    b_hh: v[o + 3],
                };
                let y = t.bigru(v[0], [dir(1), dir(5)])?;
                project(t, y, seed)
            });
            (inputs, f)
        }
        "heads" => {
            // (2, 1) convolution over the direction axis, then class softmax.
            let (n, f, steps, outs) = (1 + rng.index(2), 1 + rng.index(3), 1 + rng.index(4), 2);
            let inputs = vec![
                random(rng, &[n, f, 2, steps], 1.0),
                random(rng, &[outs, f, 2, 1], 0.5),
                random(rng, &[outs], 0.5),
            ];
            let f: Builder = Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), (1, 1), Padding2d::NONE)?;
                let p = t.softmax(y, 1)?;
                let perm = t.permute(p, &[0, 3, 2, 1])?;
                project(t, perm, seed)
            });
            (inputs, f)
        }
        "focal" => {
            let n = 2 + rng.index(5);
            let inputs = vec![random(rng, &[n, 2], 1.0)];
            let picks: Vec<usize> = (0..n).map(|i| 2 * i + rng.index(2)).collect();
            let (alpha, gamma) = (0.25, 2.0);
            let f: Builder = Box::new(move |t, v| {
                let p = t.softmax(v[0], 1)?;
                t.focal_mean(p, picks.clone(), alpha, gamma)
            });
            (inputs, f)
        }
        "huber" => {
            let n = 2 + rng.index(5);
            let inputs = vec![random(rng, &[n], 1.5)];
            let picks: Vec<(usize, f64)> = (0..n)
                .map(|i| {
                    let mut target = rng.normal() * 1.5;
                    // Keep |u| away from the unit breakpoint.
                    let u = inputs[0].data()[i] - target;
                    if (u.abs() - 1.0).abs() < 0.05 {
                        target += 0.2;
                    }
                    (i, target)
                })
                .collect();
            let norm = 1.0 + rng.index(3) as f64;
            let f: Builder = Box::new(move |t, v| t.huber_sum(v[0], picks.clone(), norm));
            (inputs, f)
        }
        other => panic!("no gradient case named {other}"),
    }
}

pub const LAYER_CASES: &[&str] = &[
    "conv2d",
    "batchnorm",
    "batchnorm_eval",
    "relu",
    "softmax",
    "avgpool1d",
    "bigru",
    "heads",
    "focal",
    "huber",
];

/// Runs `trials` random instances of every layer case.
pub fn layer_suite(trials: usize, seed: u64, tolerance: f64, opts: GradCheckOptions) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for (k, name) in LAYER_CASES.iter().enumerate() {
        let mut rng = Rng::stream(seed, k as u64);
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let (inputs, f) = layer_case(name, &mut rng);
            worst = worst.max(max_gradient_error(&inputs, f, opts)?);
        }
        out.push(CheckOutcome {
            name: name.to_string(),
            trials,
            max_rel_err: worst,
            tolerance,
        });
    }
    Ok(out)
}
