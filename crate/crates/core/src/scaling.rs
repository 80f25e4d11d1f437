//! Compound scaling: `d = alpha^phi`, `w = beta^phi`, `r = gamma^phi` under
//! `alpha * beta^2 * gamma^2 ~= 2`, so that each unit of `phi` roughly
//! doubles convolution FLOPS (which grow as `d * w^2 * r^2`).

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BlockConfig, ModelSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingCoefficients {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub phi: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaledDims {
    pub d: f64,
    pub w: f64,
    pub r: f64,
}

impl ScaledDims {
    pub const IDENTITY: ScaledDims = ScaledDims {
        d: 1.0,
        w: 1.0,
        r: 1.0,
    };
}

impl ScalingCoefficients {
    pub fn new(alpha: f64, beta: f64, gamma: f64, phi: f64) -> Result<Self> {
        let c = Self {
            alpha,
            beta,
            gamma,
            phi,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 1.0) || !v.is_finite() {
                return Err(Error::InvalidCoefficient(format!("{name} = {v} must be >= 1")));
            }
        }
        if !(self.phi >= 0.0) || !self.phi.is_finite() {
            return Err(Error::InvalidCoefficient(format!("phi = {} must be >= 0", self.phi)));
        }
        Ok(())
    }

    pub fn with_phi(self, phi: f64) -> Self {
        Self { phi, ..self }
    }
}

pub fn apply_scaling(c: &ScalingCoefficients) -> Result<ScaledDims> {
    c.validate()?;
    Ok(ScaledDims {
        d: c.alpha.powf(c.phi),
        w: c.beta.powf(c.phi),
        r: c.gamma.powf(c.phi),
    })
}

pub fn constraint_value(c: &ScalingCoefficients) -> f64 {
    c.alpha * c.beta * c.beta * c.gamma * c.gamma
}

pub fn flops_estimate(dims: &ScaledDims, base_flops: f64) -> Result<f64> {
    if !(base_flops > 0.0) {
        return Err(Error::InvalidBase(base_flops));
    }
    Ok(base_flops * dims.d * dims.w * dims.w * dims.r * dims.r)
}

/// Enumerates `(alpha, beta, gamma)` on `1 + k * grid_step` over `[1, 2]^3`
/// at `phi = 1` and keeps points with `|alpha*beta^2*gamma^2 - 2| <= tolerance`.
///
/// With an objective, candidates are ordered by descending score; otherwise
/// by distance to 2. Remaining ties fall back to lexicographic order.
pub fn grid_search_coefficients(
    grid_step: f64,
    tolerance: f64,
    objective: Option<&dyn Fn(&ScalingCoefficients) -> f64>,
) -> Result<Vec<ScalingCoefficients>> {
    if !(grid_step > 0.0) {
        return Err(Error::InvalidCoefficient(format!("grid_step {grid_step} must be > 0")));
    }
    if !(tolerance > 0.0) {
        return Err(Error::InvalidCoefficient(format!("tolerance {tolerance} must be > 0")));
    }
    let steps = (1.0 / grid_step + 1e-9).floor() as usize;
    let axis: Vec<f64> = (0..=steps).map(|k| 1.0 + k as f64 * grid_step).collect();
    let mut found = Vec::new();
    for &alpha in &axis {
        for &beta in &axis {
            for &gamma in &axis {
                let c = ScalingCoefficients {
                    alpha,
                    beta,
                    gamma,
                    phi: 1.0,
                };
                let gap = (constraint_value(&c) - 2.0).abs();
                if gap <= tolerance {
                    let score = objective.map(|f| f(&c));
                    found.push((c, gap, score));
                }
            }
        }
    }
    if found.is_empty() {
        return Err(Error::EmptyResult);
    }
    let lex = |a: &ScalingCoefficients, b: &ScalingCoefficients| {
        a.alpha
            .total_cmp(&b.alpha)
            .then(a.beta.total_cmp(&b.beta))
            .then(a.gamma.total_cmp(&b.gamma))
    };
    found.sort_by(|(ca, ga, sa), (cb, gb, sb)| {
        let primary = match (sa, sb) {
            (Some(x), Some(y)) => y.total_cmp(x),
            _ => Ordering::Equal,
        };
        primary.then(ga.total_cmp(gb)).then_with(|| lex(ca, cb))
    });
    Ok(found.into_iter().map(|(c, _, _)| c).collect())
}

fn scale_channels(channels: usize, w: f64) -> usize {
    let scaled = channels as f64 * w;
    (((scaled / 4.0).round() as usize) * 4).max(4)
}

/// Scales blocks per stage by `ceil(count * d)`, every channel count to the
/// nearest multiple of 4 (at least 4), and the input resolution by `r`.
/// Extra blocks in a stage repeat its last block with stride 1.
pub fn scale_model_spec(base: &ModelSpec, dims: &ScaledDims) -> Result<ModelSpec> {
    base.validate()?;
    for (name, v) in [("d", dims.d), ("w", dims.w), ("r", dims.r)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidSpec(format!("scale factor {name} = {v}")));
        }
    }
    let identity = *dims == ScaledDims::IDENTITY;
    let ch = |c: usize| if identity { c } else { scale_channels(c, dims.w) };

    let stem_channels = ch(base.stem_channels);
    let mut blocks = Vec::new();
    let mut channels = stem_channels;
    let mut start = 0;
    for (stage, count) in base.stage_counts() {
        let stage_blocks = &base.blocks[start..start + count];
        start += count;
        // Tolerate representation error such as 2 * 1.5000000000000002.
        let target = ((count as f64 * dims.d) - 1e-9).ceil().max(1.0) as usize;
        for i in 0..target {
            let template = &stage_blocks[i.min(count - 1)];
            let out = ch(template.out_channels);
            blocks.push(BlockConfig {
                stage,
                in_channels: channels,
                out_channels: out,
                stride: if i < count { template.stride } else { 1 },
                ..template.clone()
            });
            channels = out;
        }
    }
    let spec = ModelSpec {
        stem_channels,
        blocks,
        dropout_prob: base.dropout_prob,
        num_classes: base.num_classes,
        input_resolution: ((base.input_resolution as f64 * dims.r).round() as usize).max(1),
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::StageConfig;

    fn coeffs(a: f64, b: f64, g: f64, p: f64) -> ScalingCoefficients {
        ScalingCoefficients::new(a, b, g, p).unwrap()
    }

    #[test]
    fn apply_scaling_examples() {
        let d = apply_scaling(&coeffs(1.7, 1.3, 1.9, 0.0)).unwrap();
        assert_eq!(d, ScaledDims::IDENTITY);
        let d = apply_scaling(&coeffs(2.0, 1.0, 1.0, 3.0)).unwrap();
        assert_eq!(d, ScaledDims { d: 8.0, w: 1.0, r: 1.0 });
        let d = apply_scaling(&coeffs(1.2, 1.1, 1.15, 2.0)).unwrap();
        assert!((d.d - 1.44).abs() < 1e-12);
        assert!((d.w - 1.21).abs() < 1e-12);
        assert!((d.r - 1.3225).abs() < 1e-12);
    }

    #[test]
    fn invalid_coefficients() {
        assert!(matches!(
            ScalingCoefficients::new(0.9, 1.0, 1.0, 1.0),
            Err(Error::InvalidCoefficient(_))
        ));
        let c = ScalingCoefficients { alpha: 1.0, beta: 1.0, gamma: 1.0, phi: -1.0 };
        assert!(apply_scaling(&c).is_err());
    }

    #[test]
    fn constraint_examples() {
        assert_eq!(constraint_value(&coeffs(2.0, 1.0, 1.0, 1.0)), 2.0);
        assert!((constraint_value(&coeffs(1.0, 2f64.sqrt(), 1.0, 1.0)) - 2.0).abs() < 1e-15);
        // 1.2 * 1.21 * 1.3225 = 1.920270
        assert!((constraint_value(&coeffs(1.2, 1.1, 1.15, 1.0)) - 1.92027).abs() < 1e-12);
    }

    #[test]
    fn flops_examples() {
        assert_eq!(flops_estimate(&ScaledDims::IDENTITY, 3.5e6).unwrap(), 3.5e6);
        assert!(matches!(flops_estimate(&ScaledDims::IDENTITY, 0.0), Err(Error::InvalidBase(_))));
        let c = coeffs(1.2, 1.1, 1.15, 2.0);
        let f2 = flops_estimate(&apply_scaling(&c).unwrap(), 1.0).unwrap();
        let f3 = flops_estimate(&apply_scaling(&c.with_phi(3.0)).unwrap(), 1.0).unwrap();
        assert!((f3 / f2 - constraint_value(&c)).abs() < 1e-12);
    }

    #[test]
    fn grid_search_examples() {
        let found = grid_search_coefficients(0.25, 0.01, None).unwrap();
        assert_eq!((found[0].alpha, found[0].beta, found[0].gamma), (2.0, 1.0, 1.0));

        let has = |tol: f64| {
            grid_search_coefficients(0.05, tol, None)
                .unwrap()
                .iter()
                .any(|c| {
                    (c.alpha - 1.2).abs() < 1e-9
                        && (c.beta - 1.1).abs() < 1e-9
                        && (c.gamma - 1.15).abs() < 1e-9
                })
        };
        assert!(!has(0.05));
        assert!(has(0.1));

        assert!(matches!(grid_search_coefficients(0.3, 1e-9, None), Err(Error::EmptyResult)));
    }

    #[test]
    fn grid_search_with_objective() {
        let prefer_depth = |c: &ScalingCoefficients| c.alpha;
        let found = grid_search_coefficients(0.1, 0.05, Some(&prefer_depth)).unwrap();
        for pair in found.windows(2) {
            assert!(pair[0].alpha >= pair[1].alpha);
        }
    }

    fn base_spec() -> ModelSpec {
        ModelSpec::from_stages(
            16,
            &[
                StageConfig { repeats: 2, out_channels: 16, expansion_ratio: 2.0, stride: 1 },
                StageConfig { repeats: 2, out_channels: 24, expansion_ratio: 3.0, stride: 2 },
            ],
            4,
            32,
        )
    }

    #[test]
    fn identity_scaling_keeps_spec() {
        let base = base_spec();
        assert_eq!(scale_model_spec(&base, &ScaledDims::IDENTITY).unwrap(), base);
        // Multiples of 4 survive w = 1 through the rounding path as well.
        let nearly = ScaledDims { d: 1.0, w: 1.0 + 1e-12, r: 1.0 };
        let s = scale_model_spec(&base, &nearly).unwrap();
        assert_eq!(s.blocks, base.blocks);
    }

    #[test]
    fn depth_two_doubles_stage_counts() {
        let s = scale_model_spec(&base_spec(), &ScaledDims { d: 2.0, w: 1.0, r: 1.0 }).unwrap();
        assert_eq!(s.stage_counts(), vec![(0, 4), (1, 4)]);
        s.validate().unwrap();
    }

    #[test]
    fn hand_computed_compound_example() {
        let base = ModelSpec::from_stages(
            16,
            &[StageConfig { repeats: 2, out_channels: 16, expansion_ratio: 2.0, stride: 1 }],
            4,
            32,
        );
        let dims = ScaledDims { d: 1.44, w: 1.21, r: 1.3225 };
        let s = scale_model_spec(&base, &dims).unwrap();
        // ceil(2 * 1.44) = 3; 16 * 1.21 = 19.36 -> 20; round(32 * 1.3225) = 42
        assert_eq!(s.stage_counts(), vec![(0, 3)]);
        assert!(s.blocks.iter().all(|b| b.out_channels == 20));
        assert_eq!(s.stem_channels, 20);
        assert_eq!(s.input_resolution, 42);
    }

    #[test]
    fn tiny_channels_floor_at_four() {
        assert_eq!(scale_channels(1, 1.0), 4);
        assert_eq!(scale_channels(5, 1.0), 4);
        assert_eq!(scale_channels(6, 1.0), 8);
    }
}
