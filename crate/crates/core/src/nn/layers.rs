use rand::Rng;

use super::spec::BlockConfig;
use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::{Pool, Tape, Tensor, Var};

/// Convolution kernel plus per-channel bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvWeights<T> {
    pub kernel: T,
    pub bias: T,
}

/// Excitation MLP: `[C, hidden]` and `[hidden, C]` dense layers with biases.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeWeights<T> {
    pub reduce_w: T,
    pub reduce_b: T,
    pub expand_w: T,
    pub expand_b: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockWeights<T> {
    pub expand: Option<ConvWeights<T>>,
    pub depthwise: ConvWeights<T>,
    pub se: SeWeights<T>,
    pub project: ConvWeights<T>,
}

impl<T: Copy> ConvWeights<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> ConvWeights<U> {
        ConvWeights {
            kernel: f(self.kernel),
            bias: f(self.bias),
        }
    }
}

impl<T: Copy> SeWeights<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> SeWeights<U> {
        SeWeights {
            reduce_w: f(self.reduce_w),
            reduce_b: f(self.reduce_b),
            expand_w: f(self.expand_w),
            expand_b: f(self.expand_b),
        }
    }
}

impl<T: Copy> BlockWeights<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> BlockWeights<U> {
        BlockWeights {
            expand: self.expand.map(|c| c.map(&mut f)),
            depthwise: self.depthwise.map(&mut f),
            se: self.se.map(&mut f),
            project: self.project.map(&mut f),
        }
    }
}

pub(crate) fn conv_bias(
    tape: &mut Tape,
    x: Var,
    w: &ConvWeights<Var>,
    stride: usize,
    padding: usize,
    depthwise: bool,
) -> Result<Var> {
    let y = tape.conv2d(x, w.kernel, stride, padding, depthwise)?;
    tape.channel_bias(y, w.bias)
}

fn check_probability(what: &'static str, value: f64, upper_inclusive: bool) -> Result<()> {
    let ok = value >= 0.0 && if upper_inclusive { value <= 1.0 } else { value < 1.0 };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidProbability { what, value })
    }
}

/// Squeeze (global average pool) then excite (dense, swish, dense, sigmoid)
/// and rescale every channel of `x` by its gate.
pub fn se_block(tape: &mut Tape, x: Var, w: &SeWeights<Var>) -> Result<Var> {
    let (n, c) = match *tape.value(x).shape() {
        [n, c, _, _] => (n, c),
        ref s => return Err(Error::shape(format!("se_block input {s:?}"))),
    };
    let squeezed = tape.pool(Pool::GlobalAvg, x)?;
    let squeezed = tape.reshape(squeezed, &[n, c])?;
    let h = tape.matmul(squeezed, w.reduce_w)?;
    let h = tape.add(h, w.reduce_b)?;
    let h = tape.swish(h)?;
    let g = tape.matmul(h, w.expand_w)?;
    let g = tape.add(g, w.expand_b)?;
    let gates = tape.sigmoid(g)?;
    tape.channel_scale(x, gates)
}

/// Train: keep the whole residual with probability `survival_prob`, else
/// zero it (one coin per call). Eval: scale by `survival_prob`.
pub fn stochastic_depth<R: Rng + ?Sized>(
    tape: &mut Tape,
    residual: Var,
    survival_prob: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    check_probability("survival_prob", survival_prob, true)?;
    match mode {
        Mode::Eval => {
            if survival_prob == 1.0 {
                Ok(residual)
            } else {
                tape.scale(residual, survival_prob)
            }
        }
        Mode::Train => {
            if survival_prob == 1.0 {
                return Ok(residual);
            }
            let keep = rng.random::<f64>() < survival_prob;
            tape.scale(residual, if keep { 1.0 } else { 0.0 })
        }
    }
}

/// Inverted dropout: Train zeroes each element with probability `p` and
/// scales survivors by `1/(1-p)`; Eval is the identity.
pub fn dropout<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    check_probability("dropout", p, false)?;
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let keep_scale = 1.0 / (1.0 - p);
    let shape = tape.value(x).shape().to_vec();
    let mask: Vec<f64> = (0..tape.value(x).len())
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep_scale })
        .collect();
    let mask = tape.constant(Tensor::new(&shape, mask)?);
    tape.mul(x, mask)
}

/// Expand (1x1) -> depthwise 3x3 -> SE -> project (1x1), with a
/// stochastic-depth-gated skip when stride is 1 and channels match.
pub fn inverted_residual<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    cfg: &BlockConfig,
    w: &BlockWeights<Var>,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let channels = tape.value(x).shape().get(1).copied();
    if channels != Some(cfg.in_channels) || tape.value(x).shape().len() != 4 {
        return Err(Error::shape(format!(
            "block expects {} channels, input is {:?}",
            cfg.in_channels,
            tape.value(x).shape()
        )));
    }
    let mut h = x;
    if let Some(expand) = &w.expand {
        h = conv_bias(tape, h, expand, 1, 0, false)?;
        h = tape.swish(h)?;
    }
    h = conv_bias(tape, h, &w.depthwise, cfg.stride, 1, true)?;
    h = tape.swish(h)?;
    h = se_block(tape, h, &w.se)?;
    h = conv_bias(tape, h, &w.project, 1, 0, false)?;
    if cfg.has_skip() {
        let branch = stochastic_depth(tape, h, cfg.survival_prob, mode, rng)?;
        tape.add(x, branch)
    } else {
        Ok(h)
    }
}
