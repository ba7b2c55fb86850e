//! Paired augmented views of an unlabelled image and alignment of their
//! score maps.
//!
//! Both views share a fixed-size global crop. One of them additionally
//! crops a sub-rectangle of the global crop and resizes it back to the crop
//! size; the other keeps the global crop unchanged. Each view then gets its
//! own colour jitter. Scores predicted on the two views are aligned by
//! applying the same local crop to the scores of the non-cropped view.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::resample::{sample_plane, Region};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Global crop extent `[height, width]`.
    pub crop: [usize; 2],
    /// Range of the local crop area as a fraction of the global crop.
    pub local_scale: [f64; 2],
    /// Range of the local crop aspect ratio (height over width).
    pub aspect: [f64; 2],
    /// Range of the brightness, contrast and saturation multipliers.
    pub color_scale: [f64; 2],
    /// Largest hue rotation, in turns.
    pub hue_shift: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop: [64, 64],
            local_scale: [0.3, 0.8],
            aspect: [0.75, 4.0 / 3.0],
            color_scale: [0.6, 1.4],
            hue_shift: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.local_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "local crop scale range [{lo}, {hi}] must lie within (0, 1]"
            )));
        }
        let [alo, ahi] = self.aspect;
        if !(alo > 0.0 && alo <= ahi && ahi.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad aspect range [{alo}, {ahi}]")));
        }
        let [clo, chi] = self.color_scale;
        if !(clo >= 0.0 && clo <= chi && chi.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad colour range [{clo}, {chi}]")));
        }
        if !(self.hue_shift >= 0.0 && self.hue_shift <= 0.5) {
            return Err(Error::InvalidArgument(format!("bad hue shift {}", self.hue_shift)));
        }
        if self.crop.iter().any(|&c| c < 2) {
            return Err(Error::InvalidArgument(format!(
                "crop {:?} must be at least 2 pixels per side",
                self.crop
            )));
        }
        Ok(())
    }
}

/// Brightness, contrast and saturation multipliers and a hue rotation in
/// turns, applied in that order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl ColorParams {
    pub const IDENTITY: Self = Self {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
    };

    fn sample<R: Rng>(rng: &mut R, cfg: &AugmentConfig) -> Self {
        let [lo, hi] = cfg.color_scale;
        let mut scale = || if lo < hi { rng.random_range(lo..=hi) } else { lo };
        let (brightness, contrast, saturation) = (scale(), scale(), scale());
        let hue = if cfg.hue_shift > 0.0 {
            rng.random_range(-cfg.hue_shift..=cfg.hue_shift)
        } else {
            0.0
        };
        Self {
            brightness,
            contrast,
            saturation,
            hue,
        }
    }

    /// Applies the transform to a `[3, H, W]` image in place, clamping to
    /// `[0, 1]` after every step. Identity steps are skipped.
    pub fn apply(&self, image: &mut Tensor) -> Result<()> {
        let plane = match *image.shape() {
            [3, h, w] => h * w,
            _ if *self == Self::IDENTITY => return Ok(()),
            _ => {
                return Err(Error::InvalidShape {
                    op: "colour transform",
                    shape: image.shape().to_vec(),
                    reason: "expected an RGB image [3, H, W]",
                })
            }
        };
        let data = image.data_mut();
        let clamp = |data: &mut [f64]| data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        if self.brightness != 1.0 {
            data.iter_mut().for_each(|v| *v *= self.brightness);
            clamp(data);
        }
        if self.contrast != 1.0 {
            let mean = (0..plane).map(|p| luma(data, plane, p)).sum::<f64>() / plane as f64;
            data.iter_mut()
                .for_each(|v| *v = (*v - mean) * self.contrast + mean);
            clamp(data);
        }
        if self.saturation != 1.0 {
            for p in 0..plane {
                let y = luma(data, plane, p);
                for c in 0..3 {
                    let v = &mut data[c * plane + p];
                    *v = (*v - y) * self.saturation + y;
                }
            }
            clamp(data);
        }
        if self.hue != 0.0 {
            let theta = 2.0 * core::f64::consts::PI * self.hue;
            let (sin, cos) = (libm::sin(theta), libm::cos(theta));
            for p in 0..plane {
                let (r, g, b) = (data[p], data[plane + p], data[2 * plane + p]);
                let y = 0.299 * r + 0.587 * g + 0.114 * b;
                let i = 0.596 * r - 0.274 * g - 0.322 * b;
                let q = 0.211 * r - 0.523 * g + 0.312 * b;
                let (i, q) = (i * cos - q * sin, i * sin + q * cos);
                data[p] = y + 0.956 * i + 0.621 * q;
                data[plane + p] = y - 0.272 * i - 0.647 * q;
                data[2 * plane + p] = y - 1.106 * i + 1.703 * q;
            }
            clamp(data);
        }
        Ok(())
    }
}

fn luma(data: &[f64], plane: usize, p: usize) -> f64 {
    0.299 * data[p] + 0.587 * data[plane + p] + 0.114 * data[2 * plane + p]
}

/// Integer translation window into the source image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalCrop {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPlan {
    pub global: GlobalCrop,
    /// Local crop in the pixel-centre coordinates of the global crop.
    pub local: Region,
    /// Whether the first view receives the local crop.
    pub local_on_first: bool,
    pub colors: [ColorParams; 2],
    pub seed: u64,
}

impl ViewPlan {
    /// Local crop area over global crop area.
    pub fn area_ratio(&self) -> f64 {
        self.local.area() / Region::full(self.global.height, self.global.width).area()
    }

    /// Local crop in source-image coordinates.
    pub fn local_in_source(&self) -> Region {
        let (dy, dx) = (self.global.top as f64, self.global.left as f64);
        Region::new(
            self.local.top + dy,
            self.local.left + dx,
            self.local.bottom + dy,
            self.local.right + dx,
        )
    }
}

/// Draws a plan for an `h x w` image, deterministically from `seed`.
pub fn sample_view_plan(seed: u64, h: usize, w: usize, cfg: &AugmentConfig) -> Result<ViewPlan> {
    cfg.validate()?;
    let [ch, cw] = cfg.crop;
    if h < ch || w < cw {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} is smaller than the {ch}x{cw} crop"
        )));
    }
    let mut rng = rng::seeded(seed);
    let global = GlobalCrop {
        top: rng.random_range(0..=h - ch),
        left: rng.random_range(0..=w - cw),
        height: ch,
        width: cw,
    };
    let local = sample_local(&mut rng, ch, cw, cfg);
    let local_on_first = rng.random::<bool>();
    let colors = [
        ColorParams::sample(&mut rng, cfg),
        ColorParams::sample(&mut rng, cfg),
    ];
    Ok(ViewPlan {
        global,
        local,
        local_on_first,
        colors,
        seed,
    })
}

fn sample_local<R: Rng>(rng: &mut R, ch: usize, cw: usize, cfg: &AugmentConfig) -> Region {
    let (hm, wm) = ((ch - 1) as f64, (cw - 1) as f64);
    let [lo, hi] = cfg.local_scale;
    if lo == 1.0 {
        return Region::full(ch, cw);
    }
    let ratio = if lo < hi { rng.random_range(lo..=hi) } else { lo };
    let [alo, ahi] = cfg.aspect;
    let aspect = if alo < ahi {
        libm::exp(rng.random_range(libm::log(alo)..=libm::log(ahi)))
    } else {
        alo
    };
    let area = ratio * hm * wm;
    let mut height = libm::sqrt(area * aspect);
    let mut width = area / height;
    if height > hm {
        height = hm;
        width = area / hm;
    }
    if width > wm {
        width = wm;
        height = area / wm;
    }
    let top = rng.random_range(0.0..=hm - height);
    let left = rng.random_range(0.0..=wm - width);
    Region::new(top, left, top + height, left + width)
}

/// Geometry of one view of a `[C, H, W]` image: the global crop, resampled
/// through the local crop when `local` is set. No colour transform.
pub fn crop_view(image: &Tensor, plan: &ViewPlan, local: bool) -> Result<Tensor> {
    let [c, h, w] = match *image.shape() {
        [c, h, w] => [c, h, w],
        _ => {
            return Err(Error::InvalidShape {
                op: "render_views",
                shape: image.shape().to_vec(),
                reason: "expected [C, H, W]",
            })
        }
    };
    let g = plan.global;
    if g.top + g.height > h || g.left + g.width > w {
        return Err(Error::InvalidArgument(format!(
            "global crop {g:?} exceeds the {h}x{w} image"
        )));
    }
    plan.local.check_within(g.height, g.width)?;
    let (oh, ow) = (g.height, g.width);
    let mut out = Vec::with_capacity(c * oh * ow);
    let src = image.data();
    if local {
        let region = plan.local_in_source();
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y, x) = region.source_coord(oy, ox, oh, ow);
                    out.push(sample_plane(plane, h, w, y, x));
                }
            }
        }
    } else {
        for ch in 0..c {
            for y in g.top..g.top + oh {
                let row = ch * h * w + y * w + g.left;
                out.extend_from_slice(&src[row..row + ow]);
            }
        }
    }
    Tensor::new([c, oh, ow], out)
}

/// The two views `(first, second)` of an RGB image with values in `[0, 1]`.
pub fn render_views(image: &Tensor, plan: &ViewPlan) -> Result<(Tensor, Tensor)> {
    let mut first = crop_view(image, plan, plan.local_on_first)?;
    let mut second = crop_view(image, plan, !plan.local_on_first)?;
    plan.colors[0].apply(&mut first)?;
    plan.colors[1].apply(&mut second)?;
    Ok((first, second))
}

/// Single augmented view of a labelled image: the geometry of the local
/// view of `plan` with the first colour transform. Labels follow by nearest
/// neighbour.
pub fn render_source(
    image: &Tensor,
    labels: &[i32],
    plan: &ViewPlan,
) -> Result<(Tensor, Vec<i32>)> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if labels.len() != h * w {
        return Err(Error::ShapeMismatch {
            op: "render_source",
            left: image.shape().to_vec(),
            right: alloc::vec![labels.len()],
        });
    }
    let mut view = crop_view(image, plan, true)?;
    plan.colors[0].apply(&mut view)?;
    let region = plan.local_in_source();
    let (oh, ow) = (plan.global.height, plan.global.width);
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        for ox in 0..ow {
            let (y, x) = region.source_coord(oy, ox, oh, ow);
            let (y, x) = (libm::round(y) as usize, libm::round(x) as usize);
            out.push(labels[y.min(h - 1) * w + x.min(w - 1)]);
        }
    }
    Ok((view, out))
}

/// Aligns `[N, K, H, W]` score maps of the two views: the view without the
/// local crop is cropped to it and resized back to `H x W`.
pub fn align_scores_graph(g: &mut Graph, first: Var, second: Var, plan: &ViewPlan) -> Result<(Var, Var)> {
    let s = g.shape(first).to_vec();
    let expected = [plan.global.height, plan.global.width];
    if s.len() != 4 || s[2..] != expected || g.shape(second) != s.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "align_scores",
            left: s,
            right: g.shape(second).to_vec(),
        });
    }
    let (h, w) = (s[2], s[3]);
    if plan.local_on_first {
        let second = g.resize_bilinear(second, plan.local, h, w)?;
        Ok((first, second))
    } else {
        let first = g.resize_bilinear(first, plan.local, h, w)?;
        Ok((first, second))
    }
}

/// Value form of [`align_scores_graph`]; accepts `[K, H, W]` or
/// `[N, K, H, W]` maps.
pub fn align_scores(first: &Tensor, second: &Tensor, plan: &ViewPlan) -> Result<(Tensor, Tensor)> {
    let lift = |t: &Tensor| -> Result<Tensor> {
        match t.rank() {
            3 => {
                let mut s = t.shape().to_vec();
                s.insert(0, 1);
                t.clone().reshape(s)
            }
            _ => Ok(t.clone()),
        }
    };
    let mut g = Graph::new();
    let a = g.constant(lift(first)?);
    let b = g.constant(lift(second)?);
    let (a, b) = align_scores_graph(&mut g, a, b, plan)?;
    let out = |t: &Tensor| t.clone().reshape(first.shape().to_vec());
    Ok((out(g.value(a))?, out(g.value(b))?))
}
