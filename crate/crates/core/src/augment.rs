//! Stochastic training-time preprocessing and deterministic eval preprocessing.
//!
//! Train: resize, horizontal flip, vertical flip, shift-scale-rotate, one of
//! {emboss, sharpen, blur}, piecewise affine, channel normalization, in that
//! order. Eval: resize and normalize only.
//!
//! Geometric stages use inverse mapping with bilinear sampling and
//! reflect-101 borders, so constant images stay constant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `height x width x channels`, row-major, channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape(format!("image {height}x{width}x{channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::shape(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image pixels".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: [f64; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| value).collect();
        Self::new(height, width, 3, pixels).expect("filled: zero-sized image")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    fn blank_like(&self, height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            channels: self.channels,
            pixels: vec![0.0; height * width * self.channels],
        }
    }

    /// Bilinear sample at continuous `(y, x)` with reflect-101 borders.
    fn sample(&self, y: f64, x: f64, out: &mut [f64]) {
        let y0 = y.floor();
        let x0 = x.floor();
        let (fy, fx) = (y - y0, x - x0);
        let (y0, x0) = (y0 as i64, x0 as i64);
        let ya = reflect101(y0, self.height);
        let yb = reflect101(y0 + 1, self.height);
        let xa = reflect101(x0, self.width);
        let xb = reflect101(x0 + 1, self.width);
        for (c, o) in out.iter_mut().enumerate() {
            let top = self.get(ya, xa, c) * (1.0 - fx) + self.get(ya, xb, c) * fx;
            let bot = self.get(yb, xa, c) * (1.0 - fx) + self.get(yb, xb, c) * fx;
            *o = top * (1.0 - fy) + bot * fy;
        }
    }

    /// Inverse-mapping warp: output pixel `(y, x)` reads the source at
    /// `map(y, x)`.
    fn warp(&self, map: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        let mut out = self.blank_like(self.height, self.width);
        let mut px = vec![0.0; self.channels];
        for y in 0..self.height {
            for x in 0..self.width {
                let (sy, sx) = map(y as f64, x as f64);
                self.sample(sy, sx, &mut px);
                let base = (y * self.width + x) * self.channels;
                out.pixels[base..base + self.channels].copy_from_slice(&px);
            }
        }
        out
    }
}

/// Reflect-101 index for `n` samples (`-1 -> 1`, `n -> n-2`).
fn reflect101(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as i64;
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Seeded stream for one image (or any other indexed consumer); streams with
/// distinct `(seed, index)` are independent.
pub fn image_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub target_size: usize,
    pub p_hflip: f64,
    pub p_vflip: f64,
    pub p_ssr: f64,
    pub rotation_limit_deg: f64,
    /// Fraction of image size.
    pub shift_limit: f64,
    pub scale_limit: f64,
    pub p_oneof_filter: f64,
    pub p_piecewise: f64,
    pub piecewise_grid: usize,
    /// Fraction of image size.
    pub piecewise_sigma: f64,
    pub channel_mean: [f64; 3],
    pub channel_std: [f64; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            target_size: 545,
            p_hflip: 0.5,
            p_vflip: 0.5,
            p_ssr: 0.7,
            rotation_limit_deg: 25.0,
            shift_limit: 0.0625,
            scale_limit: 0.1,
            p_oneof_filter: 0.5,
            p_piecewise: 0.5,
            piecewise_grid: 4,
            piecewise_sigma: 0.03,
            channel_mean: [0.485, 0.456, 0.406],
            channel_std: [0.229, 0.224, 0.225],
        }
    }
}

impl AugmentConfig {
    pub fn with_target(mut self, target_size: usize) -> Self {
        self.target_size = target_size;
        self
    }

    /// Every stochastic stage disabled.
    pub fn deterministic(mut self) -> Self {
        self.p_hflip = 0.0;
        self.p_vflip = 0.0;
        self.p_ssr = 0.0;
        self.p_oneof_filter = 0.0;
        self.p_piecewise = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidAugmentConfig(m));
        if self.target_size < 1 {
            return Err(Error::InvalidTarget(self.target_size));
        }
        for (name, p) in [
            ("p_hflip", self.p_hflip),
            ("p_vflip", self.p_vflip),
            ("p_ssr", self.p_ssr),
            ("p_oneof_filter", self.p_oneof_filter),
            ("p_piecewise", self.p_piecewise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if !(self.rotation_limit_deg >= 0.0) {
            return bad(format!("rotation_limit_deg = {}", self.rotation_limit_deg));
        }
        if !(self.shift_limit >= 0.0) || !(0.0..1.0).contains(&self.scale_limit) {
            return bad("shift_limit must be >= 0 and scale_limit in [0, 1)".into());
        }
        if self.piecewise_grid < 2 {
            return Err(Error::InvalidGrid(self.piecewise_grid));
        }
        if !(self.piecewise_sigma >= 0.0) {
            return bad(format!("piecewise_sigma = {}", self.piecewise_sigma));
        }
        if let Some(&s) = self.channel_std.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::ZeroStd(s));
        }
        Ok(())
    }
}

/// Bilinear resize to `target x target` using pixel-center alignment.
pub fn resize(img: &Image, target: usize) -> Result<Image> {
    if target < 1 {
        return Err(Error::InvalidTarget(target));
    }
    if img.height == target && img.width == target {
        return Ok(img.clone());
    }
    let mut out = img.blank_like(target, target);
    let sy = img.height as f64 / target as f64;
    let sx = img.width as f64 / target as f64;
    let max_y = (img.height - 1) as f64;
    let max_x = (img.width - 1) as f64;
    let mut px = vec![0.0; img.channels];
    for y in 0..target {
        let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
        for x in 0..target {
            let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
            img.sample(src_y, src_x, &mut px);
            for (c, v) in px.iter().enumerate() {
                out.set(y, x, c, *v);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlipAxis {
    Horizontal,
    Vertical,
}

pub fn flip(img: &Image, axis: FlipAxis) -> Image {
    let mut out = img.blank_like(img.height, img.width);
    for y in 0..img.height {
        for x in 0..img.width {
            let (sy, sx) = match axis {
                FlipAxis::Horizontal => (y, img.width - 1 - x),
                FlipAxis::Vertical => (img.height - 1 - y, x),
            };
            for c in 0..img.channels {
                out.set(y, x, c, img.get(sy, sx, c));
            }
        }
    }
    out
}

/// One affine warp: rotate about the center by `angle_deg` (positive is
/// counter-clockwise on screen), scale, then translate by `shift` given as
/// fractions of `(width, height)`.
pub fn shift_scale_rotate(img: &Image, shift: (f64, f64), scale: f64, angle_deg: f64) -> Result<Image> {
    if !(scale > 0.0) {
        return Err(Error::InvalidScale(scale));
    }
    let (cy, cx) = ((img.height - 1) as f64 / 2.0, (img.width - 1) as f64 / 2.0);
    let tx = shift.0 * img.width as f64;
    let ty = shift.1 * img.height as f64;
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    // Forward: out = R (in - c) * s + c + t with R = [[cos, sin], [-sin, cos]]
    // acting on (x, y). The inverse uses R^T.
    Ok(img.warp(|y, x| {
        let u = (x - cx - tx) / scale;
        let v = (y - cy - ty) / scale;
        let sx = cos * u - sin * v;
        let sy = sin * u + cos * v;
        (sy + cy, sx + cx)
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FilterKind {
    Emboss,
    Sharpen,
    Blur,
}

impl FilterKind {
    pub const ALL: [FilterKind; 3] = [FilterKind::Emboss, FilterKind::Sharpen, FilterKind::Blur];

    fn kernel(self) -> ([f64; 9], f64) {
        const NINTH: f64 = 1.0 / 9.0;
        match self {
            FilterKind::Emboss => ([-2.0, -1.0, 0.0, -1.0, 1.0, 1.0, 0.0, 1.0, 2.0], 0.5),
            FilterKind::Sharpen => ([0.0, -1.0, 0.0, -1.0, 5.0, -1.0, 0.0, -1.0, 0.0], 0.0),
            FilterKind::Blur => ([NINTH; 9], 0.0),
        }
    }
}

/// 3x3 filter per channel with reflect-101 padding, clamped to `[0, 1]`.
pub fn filter3x3(img: &Image, kind: FilterKind) -> Image {
    let (k, offset) = kind.kernel();
    let mut out = img.blank_like(img.height, img.width);
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                let mut acc = 0.0;
                for dy in 0..3 {
                    let sy = reflect101(y as i64 + dy as i64 - 1, img.height);
                    for dx in 0..3 {
                        let sx = reflect101(x as i64 + dx as i64 - 1, img.width);
                        acc += k[dy * 3 + dx] * img.get(sy, sx, c);
                    }
                }
                out.set(y, x, c, (acc + offset).clamp(0.0, 1.0));
            }
        }
    }
    out
}

pub fn one_of_with_choice<R: Rng + ?Sized>(img: &Image, rng: &mut R) -> (Image, FilterKind) {
    let kind = FilterKind::ALL[rng.random_range(0..3)];
    (filter3x3(img, kind), kind)
}

/// Applies exactly one of emboss, sharpen or blur, chosen uniformly.
pub fn one_of<R: Rng + ?Sized>(img: &Image, rng: &mut R) -> Image {
    one_of_with_choice(img, rng).0
}

/// Gaussian jitter of a `grid x grid` lattice of control points, interpolated
/// affinely over the two triangles of every lattice cell.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    grid: usize,
    height: usize,
    width: usize,
    /// `(dy, dx)` in pixels per control point, row-major over the lattice.
    jitter: Vec<(f64, f64)>,
}

impl DisplacementField {
    /// `sigma` is a fraction of the smaller image side.
    pub fn sample<R: Rng + ?Sized>(
        grid: usize,
        sigma: f64,
        height: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if grid < 2 {
            return Err(Error::InvalidGrid(grid));
        }
        if !(sigma >= 0.0) {
            return Err(Error::InvalidAugmentConfig(format!("piecewise sigma {sigma}")));
        }
        let std = sigma * height.min(width) as f64;
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let jitter = (0..grid * grid)
            .map(|_| {
                let dy: f64 = normal.sample(rng);
                let dx: f64 = normal.sample(rng);
                (dy * std, dx * std)
            })
            .collect();
        Ok(Self {
            grid,
            height,
            width,
            jitter,
        })
    }

    pub fn jitter(&self) -> &[(f64, f64)] {
        &self.jitter
    }

    /// Pixel position of control point `(i, j)`.
    pub fn control_point(&self, i: usize, j: usize) -> (f64, f64) {
        let step_y = (self.height - 1) as f64 / (self.grid - 1) as f64;
        let step_x = (self.width - 1) as f64 / (self.grid - 1) as f64;
        (i as f64 * step_y, j as f64 * step_x)
    }

    pub fn displacement_at(&self, y: f64, x: f64) -> (f64, f64) {
        let cells = (self.grid - 1) as f64;
        let gy = if self.height > 1 {
            y / (self.height - 1) as f64 * cells
        } else {
            0.0
        };
        let gx = if self.width > 1 {
            x / (self.width - 1) as f64 * cells
        } else {
            0.0
        };
        let i = (gy.floor() as usize).min(self.grid - 2);
        let j = (gx.floor() as usize).min(self.grid - 2);
        let (v, u) = (gy - i as f64, gx - j as f64);
        let at = |a: usize, b: usize| self.jitter[a * self.grid + b];
        let (d00, d01, d10, d11) = (at(i, j), at(i, j + 1), at(i + 1, j), at(i + 1, j + 1));
        let lerp = |base: (f64, f64), a: (f64, f64), wa: f64, b: (f64, f64), wb: f64| {
            (
                base.0 + wa * (a.0 - base.0) + wb * (b.0 - base.0),
                base.1 + wa * (a.1 - base.1) + wb * (b.1 - base.1),
            )
        };
        if u + v <= 1.0 {
            lerp(d00, d01, u, d10, v)
        } else {
            lerp(d11, d10, 1.0 - u, d01, 1.0 - v)
        }
    }

    pub fn apply(&self, img: &Image) -> Image {
        img.warp(|y, x| {
            let (dy, dx) = self.displacement_at(y, x);
            (y + dy, x + dx)
        })
    }
}

pub fn piecewise_affine<R: Rng + ?Sized>(img: &Image, grid: usize, sigma: f64, rng: &mut R) -> Result<Image> {
    let field = DisplacementField::sample(grid, sigma, img.height, img.width, rng)?;
    Ok(field.apply(img))
}

pub fn normalize(img: &Image, mean: &[f64; 3], std: &[f64; 3]) -> Result<Image> {
    if let Some(&s) = std.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::ZeroStd(s));
    }
    if img.channels != 3 {
        return Err(Error::shape(format!("normalize expects 3 channels, got {}", img.channels)));
    }
    let mut out = img.clone();
    for (i, v) in out.pixels.iter_mut().enumerate() {
        let c = i % 3;
        *v = (*v - mean[c]) / std[c];
    }
    Ok(out)
}

/// Parameters drawn for a shift-scale-rotate stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsrParams {
    pub shift: (f64, f64),
    pub scale: f64,
    pub angle_deg: f64,
}

/// Which stochastic stages fired for one pipeline run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineTrace {
    pub hflip: bool,
    pub vflip: bool,
    pub ssr: Option<SsrParams>,
    pub filter: Option<FilterKind>,
    pub piecewise: bool,
}

pub fn apply_train_pipeline_traced<R: Rng + ?Sized>(
    img: &Image,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Image, PipelineTrace)> {
    cfg.validate()?;
    let mut trace = PipelineTrace::default();
    let mut cur = resize(img, cfg.target_size)?;
    if rng.random::<f64>() < cfg.p_hflip {
        cur = flip(&cur, FlipAxis::Horizontal);
        trace.hflip = true;
    }
    if rng.random::<f64>() < cfg.p_vflip {
        cur = flip(&cur, FlipAxis::Vertical);
        trace.vflip = true;
    }
    if rng.random::<f64>() < cfg.p_ssr {
        let lim = cfg.rotation_limit_deg;
        let params = SsrParams {
            angle_deg: if lim > 0.0 { rng.random_range(-lim..=lim) } else { 0.0 },
            scale: 1.0 + symmetric(rng, cfg.scale_limit),
            shift: (symmetric(rng, cfg.shift_limit), symmetric(rng, cfg.shift_limit)),
        };
        cur = shift_scale_rotate(&cur, params.shift, params.scale, params.angle_deg)?;
        trace.ssr = Some(params);
    }
    if rng.random::<f64>() < cfg.p_oneof_filter {
        let (next, kind) = one_of_with_choice(&cur, rng);
        cur = next;
        trace.filter = Some(kind);
    }
    if rng.random::<f64>() < cfg.p_piecewise {
        cur = piecewise_affine(&cur, cfg.piecewise_grid, cfg.piecewise_sigma, rng)?;
        trace.piecewise = true;
    }
    let out = normalize(&cur, &cfg.channel_mean, &cfg.channel_std)?;
    Ok((out, trace))
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, limit: f64) -> f64 {
    if limit > 0.0 {
        rng.random_range(-limit..=limit)
    } else {
        0.0
    }
}

pub fn apply_train_pipeline<R: Rng + ?Sized>(img: &Image, cfg: &AugmentConfig, rng: &mut R) -> Result<Image> {
    apply_train_pipeline_traced(img, cfg, rng).map(|(img, _)| img)
}

pub fn apply_eval_pipeline(img: &Image, cfg: &AugmentConfig) -> Result<Image> {
    cfg.validate()?;
    let resized = resize(img, cfg.target_size)?;
    normalize(&resized, &cfg.channel_mean, &cfg.channel_std)
}

/// Packs same-sized 3-channel images into an `[N, 3, H, W]` tensor.
pub fn images_to_batch(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or(Error::EmptyDataset)?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height != h || img.width != w || img.channels != 3 {
            return Err(Error::shape(format!(
                "batch mixes {}x{}x{} with {h}x{w}x3",
                img.height, img.width, img.channels
            )));
        }
        for c in 0..3 {
            data.extend(img.pixels.iter().skip(c).step_by(3));
        }
    }
    Tensor::new(&[images.len(), 3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(h: usize, w: usize) -> Image {
        let mut px = Vec::new();
        for y in 0..h {
            for x in 0..w {
                px.extend([
                    y as f64 / h as f64,
                    x as f64 / w as f64,
                    ((x * 7 + y * 3) % 5) as f64 / 5.0,
                ]);
            }
        }
        Image::new(h, w, 3, px).unwrap()
    }

    fn assert_close(a: &Image, b: &Image, tol: f64) {
        assert_eq!((a.height, a.width), (b.height, b.width));
        for (x, y) in a.pixels.iter().zip(&b.pixels) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    fn assert_constant(img: &Image, value: [f64; 3], tol: f64) {
        for (i, v) in img.pixels.iter().enumerate() {
            assert!((v - value[i % 3]).abs() <= tol, "{v}");
        }
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect101(-1, 4), 1);
        assert_eq!(reflect101(4, 4), 2);
        assert_eq!(reflect101(-5, 4), 1);
        assert_eq!(reflect101(3, 1), 0);
    }

    #[test]
    fn resize_examples() {
        let img = gradient_image(5, 5);
        assert_eq!(resize(&img, 5).unwrap(), img);
        let c = Image::filled(7, 5, [0.2, 0.4, 0.9]);
        assert_constant(&resize(&c, 11).unwrap(), [0.2, 0.4, 0.9], 1e-12);
        assert!(matches!(resize(&img, 0), Err(Error::InvalidTarget(0))));

        // 2x2 checkerboard -> 3x3. Source coordinates (d + 0.5) * 2/3 - 0.5,
        // clamped: 0, 0.5, 1 in both axes.
        let px: Vec<f64> = [1.0, 0.0, 0.0, 1.0].iter().flat_map(|&v| [v, v, v]).collect();
        let board = Image::new(2, 2, 3, px).unwrap();
        let r = resize(&board, 3).unwrap();
        let expected = [1.0, 0.5, 0.0, 0.5, 0.5, 0.5, 0.0, 0.5, 1.0];
        for (i, e) in expected.iter().enumerate() {
            assert!((r.get(i / 3, i % 3, 0) - e).abs() < 1e-12);
        }
    }

    #[test]
    fn flip_examples() {
        let img = Image::new(1, 2, 3, vec![0.1, 0.2, 0.3, 0.7, 0.8, 0.9]).unwrap();
        let h = flip(&img, FlipAxis::Horizontal);
        assert_eq!(h.pixels(), &[0.7, 0.8, 0.9, 0.1, 0.2, 0.3]);
        let g = gradient_image(4, 6);
        for axis in [FlipAxis::Horizontal, FlipAxis::Vertical] {
            assert_eq!(flip(&flip(&g, axis), axis), g);
        }
        let hv = flip(&flip(&g, FlipAxis::Horizontal), FlipAxis::Vertical);
        let vh = flip(&flip(&g, FlipAxis::Vertical), FlipAxis::Horizontal);
        assert_eq!(hv, vh);
        let sym = Image::new(1, 3, 3, vec![0.5, 0.5, 0.5, 0.1, 0.1, 0.1, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(flip(&sym, FlipAxis::Horizontal), sym);
    }

    #[test]
    fn ssr_examples() {
        let g = gradient_image(6, 7);
        assert_close(&shift_scale_rotate(&g, (0.0, 0.0), 1.0, 0.0).unwrap(), &g, 1e-9);
        let c = Image::filled(5, 5, [0.3, 0.6, 0.1]);
        assert_constant(&shift_scale_rotate(&c, (0.1, -0.05), 1.2, 360.0).unwrap(), [0.3, 0.6, 0.1], 1e-12);
        assert!(matches!(shift_scale_rotate(&g, (0.0, 0.0), 0.0, 0.0), Err(Error::InvalidScale(_))));

        // Bright pixel at row 0, col 1 of a 3x3. Relative to the center it sits
        // at (x, y) = (0, -1); a counter-clockwise quarter turn on screen sends
        // "up" to "left", i.e. (x, y) = (-1, 0) -> row 1, col 0.
        let mut px = vec![0.0; 27];
        px[3..6].copy_from_slice(&[1.0, 1.0, 1.0]);
        let img = Image::new(3, 3, 3, px).unwrap();
        let r = shift_scale_rotate(&img, (0.0, 0.0), 1.0, 90.0).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                let expected = if (y, x) == (1, 0) { 1.0 } else { 0.0 };
                assert!((r.get(y, x, 0) - expected).abs() < 1e-9, "({y},{x}) = {}", r.get(y, x, 0));
            }
        }
    }

    #[test]
    fn filter_examples() {
        let c = Image::filled(4, 5, [0.25, 0.5, 0.75]);
        assert_constant(&filter3x3(&c, FilterKind::Blur), [0.25, 0.5, 0.75], 1e-12);
        assert_constant(&filter3x3(&c, FilterKind::Sharpen), [0.25, 0.5, 0.75], 1e-12);
        assert_constant(&filter3x3(&c, FilterKind::Emboss), [0.75, 1.0, 1.0], 1e-12);

        let mut px = vec![0.0; 27];
        px[12..15].copy_from_slice(&[1.0, 1.0, 1.0]);
        let dot = Image::new(3, 3, 3, px).unwrap();
        let b = filter3x3(&dot, FilterKind::Blur);
        assert!((b.get(1, 1, 0) - 1.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn one_of_is_uniform_and_deterministic() {
        let tiny = Image::filled(1, 1, [0.5; 3]);
        let mut rng = image_rng(1, 0);
        let draws = 30_000;
        let mut counts = [0usize; 3];
        for _ in 0..draws {
            let (_, kind) = one_of_with_choice(&tiny, &mut rng);
            counts[FilterKind::ALL.iter().position(|k| *k == kind).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / draws as f64 - 1.0 / 3.0).abs() < 0.01, "{counts:?}");
        }
        let a = one_of_with_choice(&tiny, &mut image_rng(5, 3)).1;
        let b = one_of_with_choice(&tiny, &mut image_rng(5, 3)).1;
        assert_eq!(a, b);

        let c = Image::filled(4, 4, [0.2, 0.4, 0.6]);
        for kind in [FilterKind::Sharpen, FilterKind::Blur] {
            assert_constant(&filter3x3(&c, kind), [0.2, 0.4, 0.6], 1e-12);
        }
    }

    #[test]
    fn piecewise_examples() {
        let g = gradient_image(9, 8);
        let mut rng = image_rng(2, 0);
        assert_close(&piecewise_affine(&g, 4, 0.0, &mut rng).unwrap(), &g, 1e-9);
        let c = Image::filled(9, 9, [0.1, 0.2, 0.3]);
        assert_constant(&piecewise_affine(&c, 4, 0.2, &mut rng).unwrap(), [0.1, 0.2, 0.3], 1e-12);
        assert!(matches!(piecewise_affine(&g, 1, 0.1, &mut rng), Err(Error::InvalidGrid(1))));

        let field = DisplacementField::sample(4, 0.05, 13, 10, &mut rng).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let (y, x) = field.control_point(i, j);
                let (dy, dx) = field.displacement_at(y, x);
                let (jy, jx) = field.jitter()[i * 4 + j];
                assert!((dy - jy).abs() < 1e-12 && (dx - jx).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalize_examples() {
        let g = gradient_image(3, 3);
        assert_eq!(normalize(&g, &[0.0; 3], &[1.0; 3]).unwrap(), g);
        let mean = [0.3, 0.5, 0.7];
        let m = Image::filled(3, 3, mean);
        assert_constant(&normalize(&m, &mean, &[0.2; 3]).unwrap(), [0.0; 3], 0.0);
        let std = [0.2, 0.25, 0.3];
        let n = normalize(&g, &mean, &std).unwrap();
        let back: Vec<f64> = n
            .pixels()
            .iter()
            .enumerate()
            .map(|(i, v)| v * std[i % 3] + mean[i % 3])
            .collect();
        for (a, b) in back.iter().zip(g.pixels()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(normalize(&g, &mean, &[0.2, 0.0, 0.1]), Err(Error::ZeroStd(_))));
    }

    #[test]
    fn pipeline_degenerate_and_deterministic() {
        let g = gradient_image(12, 10);
        let cfg = AugmentConfig::default().with_target(8);
        let a = apply_train_pipeline(&g, &cfg, &mut image_rng(9, 4)).unwrap();
        let b = apply_train_pipeline(&g, &cfg, &mut image_rng(9, 4)).unwrap();
        assert_eq!(a.pixels(), b.pixels());

        let off = cfg.clone().deterministic();
        let t = apply_train_pipeline(&g, &off, &mut image_rng(1, 1)).unwrap();
        let e = apply_eval_pipeline(&g, &cfg).unwrap();
        assert_eq!(t.pixels(), e.pixels());
        assert_eq!(apply_eval_pipeline(&g, &cfg).unwrap(), e);

        let mean = Image::filled(8, 8, cfg.channel_mean);
        assert_constant(&apply_eval_pipeline(&mean, &cfg).unwrap(), [0.0; 3], 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig { p_ssr: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig { channel_std: [0.2, 0.0, 0.2], ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::ZeroStd(_))));
        let bad = AugmentConfig { piecewise_grid: 1, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::InvalidGrid(1))));
    }

    #[test]
    fn batch_layout_is_channel_first() {
        let img = Image::new(1, 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = images_to_batch(&[&img]).unwrap();
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
