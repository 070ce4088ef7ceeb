use super::autograd::{GruVars, Padding2d, Tape, Var};
use super::params::{uniform_init, BufferId, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: (usize, usize),
    pub padding: Padding2d,
}

impl Conv2d {
    /// Registers `<name>.weight` of shape `[cout, cin, kh, kw]` and, when
    /// requested, a zero-initialized `<name>.bias`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding2d,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = cin * kernel.0 * kernel.1;
        let weight = store.add(
            &format!("{name}.weight"),
            uniform_init(rng, &[cout, cin, kernel.0, kernel.1], fan_in),
        )?;
        let bias = if bias {
            Some(store.add(&format!("{name}.bias"), Tensor::zeros(&[cout]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, self.stride, self.padding)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    /// Single-element buffer counting training batches seen.
    pub tracked: BufferId,
    pub momentum: f64,
    pub eps: f64,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, features: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[features], 1.0))?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[features]))?,
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[features]))?,
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::full(&[features], 1.0))?,
            tracked: store.add_buffer(&format!("{name}.tracked"), Tensor::zeros(&[1]))?,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        })
    }

    /// In training mode normalizes with batch statistics and folds them into
    /// the running averages (variance with the unbiased divisor). Eval mode
    /// requires at least one prior training batch.
    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        match mode {
            Mode::Eval => {
                if store.buffer(self.tracked).value.item() == 0.0 {
                    let name = &store.get(self.gamma).name;
                    return Err(Error::State(format!(
                        "batch norm `{name}` evaluated before any training step"
                    )));
                }
                let rm = store.buffer(self.running_mean).value.data().to_vec();
                let rv = store.buffer(self.running_var).value.data().to_vec();
                Ok(tape.batchnorm(x, g, b, Some((&rm, &rv)), self.eps)?.0)
            }
            Mode::Train => {
                let (y, stats) = tape.batchnorm(x, g, b, None, self.eps)?;
                let stats = stats.expect("training mode yields statistics");
                let m = self.momentum;
                let unbias = stats.count as f64 / (stats.count as f64 - 1.0);
                let rm = store.buffer_mut(self.running_mean).value.data_mut();
                rm.iter_mut()
                    .zip(&stats.mean)
                    .for_each(|(r, v)| *r = (1.0 - m) * *r + m * v);
                let rv = store.buffer_mut(self.running_var).value.data_mut();
                rv.iter_mut()
                    .zip(&stats.var)
                    .for_each(|(r, v)| *r = (1.0 - m) * *r + m * v * unbias);
                store.buffer_mut(self.tracked).value.data_mut()[0] += 1.0;
                Ok(y)
            }
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GruDirection {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
}

impl GruDirection {
    pub fn ids(&self) -> [ParamId; 4] {
        [self.w_ih, self.w_hh, self.b_ih, self.b_hh]
    }
}

#[derive(Debug, Clone)]
pub struct BiGru {
    pub dirs: [GruDirection; 2],
    pub hidden: usize,
}

impl BiGru {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, features: usize, hidden: usize) -> Result<Self> {
        let mut dir = |suffix: &str| -> Result<GruDirection> {
            let p = format!("{name}.{suffix}");
            Ok(GruDirection {
                w_ih: store.add(&format!("{p}.w_ih"), uniform_init(rng, &[3 * hidden, features], hidden))?,
                w_hh: store.add(&format!("{p}.w_hh"), uniform_init(rng, &[3 * hidden, hidden], hidden))?,
                b_ih: store.add(&format!("{p}.b_ih"), uniform_init(rng, &[3 * hidden], hidden))?,
                b_hh: store.add(&format!("{p}.b_hh"), uniform_init(rng, &[3 * hidden], hidden))?,
            })
        };
        let fwd = dir("fwd")?;
        let bwd = dir("bwd")?;
        Ok(Self {
            dirs: [fwd, bwd],
            hidden,
        })
    }

    /// `[N, F, T] -> [N, H, 2, T]`
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut place = |d: &GruDirection| GruVars {
            w_ih: tape.param(store, d.w_ih),
            w_hh: tape.param(store, d.w_hh),
            b_ih: tape.param(store, d.b_ih),
            b_hh: tape.param(store, d.b_hh),
        };
        let vars = [place(&self.dirs[0]), place(&self.dirs[1])];
        tape.bigru(x, vars)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.dirs
            .iter()
            .flat_map(|d| [d.w_ih, d.w_hh, d.b_ih, d.b_hh])
            .collect()
    }
}
