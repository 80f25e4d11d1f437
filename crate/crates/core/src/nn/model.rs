use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::layers::{conv_bias, dropout, inverted_residual, BlockWeights, ConvWeights, SeWeights};
use super::spec::ModelSpec;
use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::{Pool, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    fan_in: usize,
    is_bias: bool,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    params: Vec<ParamInfo>,
    stem: ConvWeights<usize>,
    blocks: Vec<BlockWeights<usize>>,
    head: (usize, usize),
}

#[derive(Default)]
struct LayoutBuilder {
    params: Vec<ParamInfo>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, fan_in: usize, is_bias: bool) -> usize {
        self.params.push(ParamInfo {
            name,
            shape,
            fan_in,
            is_bias,
        });
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, f: usize, c: usize, k: usize, depthwise: bool) -> ConvWeights<usize> {
        let (kc, fan_in) = if depthwise { (1, k * k) } else { (c, c * k * k) };
        ConvWeights {
            kernel: self.add(format!("{name}.kernel"), vec![f, kc, k, k], fan_in, false),
            bias: self.add(format!("{name}.bias"), vec![f], 1, true),
        }
    }

    fn dense(&mut self, name: &str, fan_in: usize, out: usize) -> (usize, usize) {
        (
            self.add(format!("{name}.weight"), vec![fan_in, out], fan_in, false),
            self.add(format!("{name}.bias"), vec![out], 1, true),
        )
    }
}

impl Layout {
    fn new(spec: &ModelSpec) -> Self {
        let mut b = LayoutBuilder::default();
        let stem = b.conv("stem", spec.stem_channels, 3, 3, false);
        let blocks = spec
            .blocks
            .iter()
            .enumerate()
            .map(|(i, cfg)| {
                let e = cfg.expanded_channels();
                let h = cfg.se_hidden();
                let expand = cfg
                    .has_expansion()
                    .then(|| b.conv(&format!("block{i}.expand"), e, cfg.in_channels, 1, false));
                let depthwise = b.conv(&format!("block{i}.depthwise"), e, e, 3, true);
                let (reduce_w, reduce_b) = b.dense(&format!("block{i}.se.reduce"), e, h);
                let (expand_w, expand_b) = b.dense(&format!("block{i}.se.expand"), h, e);
                let project = b.conv(&format!("block{i}.project"), cfg.out_channels, e, 1, false);
                BlockWeights {
                    expand,
                    depthwise,
                    se: SeWeights {
                        reduce_w,
                        reduce_b,
                        expand_w,
                        expand_b,
                    },
                    project,
                }
            })
            .collect();
        let head = b.dense("head", spec.final_channels(), spec.num_classes);
        Self {
            params: b.params,
            stem,
            blocks,
            head,
        }
    }
}

/// Result of pushing one forward pass onto a tape.
#[derive(Debug)]
pub struct ForwardPass {
    pub logits: Var,
    /// One tape variable per model parameter, in [`Model::params`] order.
    pub params: Vec<Var>,
    /// Number of dropout / stochastic-depth decisions that consumed randomness.
    pub noise_draws: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    layout: Layout,
    params: Vec<Tensor>,
}

/// He-normal weights, zero biases.
pub fn build_model<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Model> {
    spec.validate()?;
    let layout = Layout::new(spec);
    let params = layout
        .params
        .iter()
        .map(|p| {
            let n: usize = p.shape.iter().product();
            let data = if p.is_bias {
                vec![0.0; n]
            } else {
                let std = (2.0 / p.fan_in as f64).sqrt();
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut *rng);
                        std * z
                    })
                    .collect::<Vec<f64>>()
            };
            Tensor::new(&p.shape, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Model {
        spec: spec.clone(),
        layout,
        params,
    })
}

/// The weight-initialization stream for `seed`.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

impl Model {
    /// Reassembles a model from a spec and flat parameter arrays.
    pub fn from_parameters(spec: &ModelSpec, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::new(spec);
        if params.len() != layout.params.len() {
            return Err(Error::InvalidSpec(format!(
                "spec needs {} parameter arrays, got {}",
                layout.params.len(),
                params.len()
            )));
        }
        for (p, info) in params.iter().zip(&layout.params) {
            if p.shape() != info.shape.as_slice() {
                return Err(Error::shape(format!(
                    "{}: expected {:?}, got {:?}",
                    info.name,
                    info.shape,
                    p.shape()
                )));
            }
        }
        Ok(Self {
            spec: spec.clone(),
            layout,
            params,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_info(&self) -> &[ParamInfo] {
        &self.layout.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn input_resolution(&self) -> usize {
        self.spec.input_resolution
    }

    /// Pushes the network onto `tape`. Parameters become gradient leaves when
    /// `track_params` is set, constants otherwise.
    pub fn forward_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        input: Var,
        mode: Mode,
        rng: &mut R,
        track_params: bool,
    ) -> Result<ForwardPass> {
        let shape = tape.value(input).shape().to_vec();
        let res = self.spec.input_resolution;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != res || shape[3] != res {
            return Err(Error::shape(format!(
                "model expects Nx3x{res}x{res}, got {shape:?}"
            )));
        }
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if track_params {
                    tape.leaf(p.clone().with_grad())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        let v = |i: usize| params[i];
        let mut noise_draws = 0;

        let stem = self.layout.stem.map(v);
        let mut h = conv_bias(tape, input, &stem, 2, 1, false)?;
        h = tape.swish(h)?;
        for (cfg, w) in self.spec.blocks.iter().zip(&self.layout.blocks) {
            let w = w.map(v);
            if mode == Mode::Train && cfg.has_skip() && cfg.survival_prob < 1.0 {
                noise_draws += 1;
            }
            h = inverted_residual(tape, h, cfg, &w, mode, rng)?;
        }
        let pooled = tape.pool(Pool::GlobalAvg, h)?;
        let n = shape[0];
        let mut feats = tape.reshape(pooled, &[n, self.spec.final_channels()])?;
        if mode == Mode::Train && self.spec.dropout_prob > 0.0 {
            noise_draws += 1;
        }
        feats = dropout(tape, feats, self.spec.dropout_prob, mode, rng)?;
        let logits = tape.matmul(feats, v(self.layout.head.0))?;
        let logits = tape.add(logits, v(self.layout.head.1))?;
        if !tape.value(logits).is_finite() {
            return Err(Error::NonFinite("model logits".into()));
        }
        Ok(ForwardPass {
            logits,
            params,
            noise_draws,
        })
    }

    pub fn forward<R: Rng + ?Sized>(&self, batch: &Tensor, mode: Mode, rng: &mut R) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let pass = self.forward_on_tape(&mut tape, x, mode, rng, false)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Deterministic evaluation-mode logits.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward(batch, Mode::Eval, &mut NoRng)
    }

    /// Evaluation-mode class probabilities, `[N, num_classes]`.
    pub fn predict_proba(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let pass = self.forward_on_tape(&mut tape, x, Mode::Eval, &mut NoRng, false)?;
        let probs = tape.softmax(pass.logits)?;
        Ok(tape.value(probs).clone())
    }
}

/// Rng for evaluation passes; panics if anything tries to draw from it.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("evaluation forward pass consumed randomness")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("evaluation forward pass consumed randomness")
    }
    fn fill_bytes(&mut self, _dst: &mut [u8]) {
        unreachable!("evaluation forward pass consumed randomness")
    }
}
