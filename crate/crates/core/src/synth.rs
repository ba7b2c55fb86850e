//! Procedural segmentation domains with controllable appearance shift.
//!
//! Every image is a scene of flat regions, one texture per class:
//!
//! | id | class        | geometry                       | texture            |
//! |----|--------------|--------------------------------|--------------------|
//! | 0  | background   | whole image                    | smooth gradient    |
//! | 1  | block        | axis-aligned rectangles        | horizontal stripes |
//! | 2  | disc         | discs                          | spots              |
//! | 3  | ground       | band along the bottom edge     | vertical stripes   |
//! | 4  | unknown      | triangles and diamonds         | checkerboard       |
//!
//! The style shift moves class palettes, texture periods and noise away from
//! the source appearance. The unknown family only appears when a domain
//! asks for it, and its label id is `k_known`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Smallest supported image side.
pub const MIN_EXTENT: usize = 16;

/// Number of known classes drawn by the generator.
pub const GENERATED_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Style {
    /// Appearance shift away from the source domain, `0` for none.
    pub shift: f64,
    /// Extra Gaussian pixel noise on top of the shift-driven level.
    pub noise: f64,
}

impl Default for Style {
    fn default() -> Self {
        Self {
            shift: 0.0,
            noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub k_known: usize,
    pub include_ood: bool,
    pub style: Style,
    pub n_images: usize,
    /// `[height, width]`.
    pub extent: [usize; 2],
    pub seed: u64,
}

impl DomainSpec {
    pub fn k_total(&self) -> usize {
        self.k_known + usize::from(self.include_ood)
    }

    pub fn validate(&self) -> Result<()> {
        if self.extent.iter().any(|&e| e < MIN_EXTENT) {
            return Err(Error::InvalidArgument(format!(
                "extent {:?} is below the minimum of {MIN_EXTENT}",
                self.extent
            )));
        }
        if self.k_known != GENERATED_CLASSES {
            return Err(Error::InvalidArgument(format!(
                "the generator draws {GENERATED_CLASSES} known classes, got k_known = {}",
                self.k_known
            )));
        }
        if !(self.style.shift >= 0.0 && self.style.shift <= 1.0 && self.style.noise >= 0.0) {
            return Err(Error::InvalidArgument(format!("bad style {:?}", self.style)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ShapeKind {
    Rect { top: f64, left: f64, bottom: f64, right: f64 },
    Disc { cy: f64, cx: f64, r: f64 },
    /// Upward-pointing isosceles triangle with apex at `(top, cx)`.
    Triangle { top: f64, cx: f64, size: f64 },
    /// L1 ball.
    Diamond { cy: f64, cx: f64, r: f64 },
}

impl ShapeKind {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Self::Rect { top, left, bottom, right } => y >= top && y < bottom && x >= left && x < right,
            Self::Disc { cy, cx, r } => (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r,
            Self::Triangle { top, cx, size } => {
                let depth = y - top;
                depth >= 0.0 && depth <= size && (x - cx).abs() <= depth / 2.0 + 0.5
            }
            Self::Diamond { cy, cx, r } => (y - cy).abs() + (x - cx).abs() <= r,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub class: i32,
}

/// Lower band whose upper edge is `base + amp * sin(2 pi freq x / w + phase)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub base: f64,
    pub amp: f64,
    pub freq: f64,
    pub phase: f64,
}

/// Geometry of one image; shapes are painted in order over the band, which
/// is painted over the background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub band: Band,
    pub shapes: Vec<Shape>,
}

impl Scene {
    /// Label map in row-major order; pixel `(y, x)` is tested at its centre.
    pub fn render_labels(&self, h: usize, w: usize) -> Vec<i32> {
        let mut out = vec![0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
                let b = &self.band;
                let edge = b.base + b.amp * libm::sin(2.0 * core::f64::consts::PI * b.freq * fx / w as f64 + b.phase);
                let mut label = if fy >= edge { 3 } else { 0 };
                for s in &self.shapes {
                    if s.kind.contains(fy, fx) {
                        label = s.class;
                    }
                }
                out[y * w + x] = label;
            }
        }
        out
    }
}

/// Images, labels and scene geometry of one generated domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: DomainSpec,
    /// `[3, H, W]` images with values in `k / 255`.
    pub images: Vec<Tensor>,
    pub labels: Option<Vec<Vec<i32>>>,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stacks the images at `indices` into `[N, 3, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        stack(indices.iter().map(|&i| &self.images[i]))
    }

    /// Labels of the images at `indices`, concatenated.
    pub fn batch_labels(&self, indices: &[usize]) -> Result<Vec<i32>> {
        let labels = self.labels.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("dataset {} has no labels", self.spec.name))
        })?;
        Ok(indices.iter().flat_map(|&i| labels[i].iter().copied()).collect())
    }

    /// Checks shape and label invariants.
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.spec.extent;
        for img in &self.images {
            if img.shape() != [3, h, w] {
                return Err(Error::ShapeMismatch {
                    op: "dataset image",
                    left: img.shape().to_vec(),
                    right: vec![3, h, w],
                });
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.images.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} label maps for {} images",
                    labels.len(),
                    self.images.len()
                )));
            }
            let k_total = self.spec.k_total() as i32;
            for (i, map) in labels.iter().enumerate() {
                if map.len() != h * w {
                    return Err(Error::InvalidArgument(format!("label map {i} has {} pixels", map.len())));
                }
                if let Some(&bad) = map.iter().find(|&&l| l < -1 || l >= k_total) {
                    return Err(Error::InvalidArgument(format!(
                        "label map {i} holds {bad}, outside {{-1}} and [0, {k_total})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Stacks `[C, H, W]` tensors into `[N, C, H, W]`.
pub fn stack<'a>(items: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut shape: Option<Vec<usize>> = None;
    let mut data = Vec::new();
    let mut n = 0;
    for t in items {
        match &shape {
            None => shape = Some(t.shape().to_vec()),
            Some(s) if s.as_slice() != t.shape() => {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    left: s.clone(),
                    right: t.shape().to_vec(),
                })
            }
            _ => {}
        }
        data.extend_from_slice(t.data());
        n += 1;
    }
    let mut shape = shape.ok_or(Error::Empty("stack"))?;
    shape.insert(0, n);
    Tensor::new(shape, data)
}

const SOURCE_PALETTE: [[f64; 3]; 5] = [
    [0.55, 0.68, 0.82],
    [0.78, 0.32, 0.24],
    [0.26, 0.62, 0.34],
    [0.52, 0.42, 0.30],
    [0.82, 0.74, 0.22],
];

const SHIFTED_PALETTE: [[f64; 3]; 5] = [
    [0.74, 0.70, 0.58],
    [0.60, 0.26, 0.46],
    [0.40, 0.56, 0.22],
    [0.34, 0.36, 0.40],
    [0.30, 0.72, 0.70],
];

/// Per-image appearance drawn from the style.
struct Appearance {
    colors: [[f64; 3]; 5],
    periods: [f64; 5],
    phases: [f64; 5],
    amplitude: f64,
    noise: f64,
}

impl Appearance {
    fn sample<R: Rng>(rng: &mut R, style: &Style, extent: f64) -> Self {
        let s = style.shift;
        let mut colors = [[0.0; 3]; 5];
        for (k, c) in colors.iter_mut().enumerate() {
            for ch in 0..3 {
                let base = SOURCE_PALETTE[k][ch] * (1.0 - s) + SHIFTED_PALETTE[k][ch] * s;
                c[ch] = (base + rng.random_range(-0.06..=0.06)).clamp(0.05, 0.95);
            }
        }
        let scale = extent / 40.0 * (1.0 + 0.6 * s);
        let base_periods = [0.0, 4.0, 6.0, 5.0, 6.0];
        let mut periods = [0.0; 5];
        let mut phases = [0.0; 5];
        for k in 0..5 {
            periods[k] = base_periods[k] * scale * rng.random_range(0.85..=1.15);
            phases[k] = rng.random_range(0.0..core::f64::consts::TAU);
        }
        Self {
            colors,
            periods,
            phases,
            amplitude: 0.18 + 0.08 * s,
            noise: 0.02 + 0.05 * s + style.noise,
        }
    }

    fn modulation(&self, class: usize, y: f64, x: f64, h: f64) -> f64 {
        use core::f64::consts::TAU;
        let (p, phi, a) = (self.periods[class], self.phases[class], self.amplitude);
        match class {
            0 => 0.85 + 0.3 * y / h,
            1 => 1.0 + a * libm::sin(TAU * y / p + phi),
            2 => 1.0 + a * libm::cos(TAU * x / p + phi) * libm::cos(TAU * y / p),
            3 => 1.0 + a * libm::sin(TAU * x / p + phi),
            _ => {
                let v = libm::sin(TAU * x / p + phi) * libm::sin(TAU * y / p);
                1.0 + a * if v >= 0.0 { 1.0 } else { -1.0 }
            }
        }
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller on (0, 1]
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

fn sample_scene<R: Rng>(rng: &mut R, h: usize, w: usize, ood: bool) -> Scene {
    let (hf, wf) = (h as f64, w as f64);
    let band = Band {
        base: hf * rng.random_range(0.65..=0.8),
        amp: hf * rng.random_range(0.02..=0.06),
        freq: rng.random_range(0.5..=2.0),
        phase: rng.random_range(0.0..core::f64::consts::TAU),
    };
    let mut shapes = Vec::new();
    for _ in 0..rng.random_range(1..=2) {
        let (bh, bw) = (hf * rng.random_range(0.15..=0.35), wf * rng.random_range(0.15..=0.35));
        let top = rng.random_range(0.0..=hf * 0.75 - bh);
        let left = rng.random_range(0.0..=wf - bw);
        shapes.push(Shape {
            kind: ShapeKind::Rect {
                top,
                left,
                bottom: top + bh,
                right: left + bw,
            },
            class: 1,
        });
    }
    for _ in 0..rng.random_range(1..=2) {
        let r = hf.min(wf) * rng.random_range(0.08..=0.16);
        shapes.push(Shape {
            kind: ShapeKind::Disc {
                cy: rng.random_range(r..=hf - r),
                cx: rng.random_range(r..=wf - r),
                r,
            },
            class: 2,
        });
    }
    if ood {
        let size = hf.min(wf) * rng.random_range(0.22..=0.32);
        let kind = if rng.random::<bool>() {
            ShapeKind::Triangle {
                top: rng.random_range(0.0..=hf - size),
                cx: rng.random_range(size / 2.0..=wf - size / 2.0),
                size,
            }
        } else {
            let r = size / 2.0;
            ShapeKind::Diamond {
                cy: rng.random_range(r..=hf - r),
                cx: rng.random_range(r..=wf - r),
                r,
            }
        };
        shapes.push(Shape {
            kind,
            class: GENERATED_CLASSES as i32,
        });
    }
    Scene { band, shapes }
}

fn render_image<R: Rng>(rng: &mut R, labels: &[i32], h: usize, w: usize, style: &Style) -> Tensor {
    let look = Appearance::sample(rng, style, h.min(w) as f64);
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let class = labels[p] as usize;
            let m = look.modulation(class, y as f64, x as f64, h as f64);
            for ch in 0..3 {
                let v = look.colors[class][ch] * m + look.noise * normal(rng);
                data[ch * plane + p] = libm::round(v.clamp(0.0, 1.0) * 255.0) / 255.0;
            }
        }
    }
    Tensor::new([3, h, w], data).expect("sized above")
}

/// Renders every image of a domain; identical specs give identical output.
pub fn generate_domain(spec: &DomainSpec) -> Result<Dataset> {
    spec.validate()?;
    let [h, w] = spec.extent;
    let mut images = Vec::with_capacity(spec.n_images);
    let mut labels = Vec::with_capacity(spec.n_images);
    let mut scenes = Vec::with_capacity(spec.n_images);
    for i in 0..spec.n_images {
        let mut rng = rng::stream(spec.seed, i as u64);
        let scene = sample_scene(&mut rng, h, w, spec.include_ood);
        let map = scene.render_labels(h, w);
        images.push(render_image(&mut rng, &map, h, w, &spec.style));
        labels.push(map);
        scenes.push(scene);
    }
    Ok(Dataset {
        spec: spec.clone(),
        images,
        labels: Some(labels),
        scenes,
    })
}
