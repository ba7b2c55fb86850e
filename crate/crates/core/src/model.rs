//! Encoder, projection network, segmentation head and class prototypes.
//!
//! The encoder is a three-layer convolutional stack that downsamples by 4.
//! Two branches read its features:
//!
//! * the *head* branch, a 1x1 convolution producing class logits;
//! * the *prototype* branch, a per-pixel two-hidden-layer perceptron whose
//!   output is L2-normalised and scored by cosine similarity against one
//!   unit prototype per class.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use alloc::format;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, NORM_EPS};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Spatial reduction of the encoder (two stride-2 convolutions).
pub const DOWNSAMPLE: usize = 4;

/// Temperature of the prototype-branch softmax.
pub const PROTOTYPE_TAU: f64 = 0.07;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Output channels of the first two encoder convolutions.
    pub widths: [usize; 2],
    /// Feature length `F` of encoder output and embeddings.
    pub feature_dim: usize,
    /// Number of known classes `K`.
    pub num_classes: usize,
    /// Softmax temperature of the prototype branch.
    pub tau: f64,
    /// Softmax temperature of the head branch.
    pub head_tau: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: [32, 64],
            feature_dim: 64,
            num_classes: 4,
            tau: PROTOTYPE_TAU,
            head_tau: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.in_channels > 0
            && self.widths.iter().all(|&w| w > 0)
            && self.feature_dim > 0
            && self.num_classes > 0;
        if !ok {
            return Err(Error::InvalidArgument(format!("degenerate model config {self:?}")));
        }
        for tau in [self.tau, self.head_tau] {
            if !(tau > 0.0) {
                return Err(Error::InvalidTemperature(tau));
            }
        }
        Ok(())
    }
}

/// Weight and bias of one convolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    /// He-uniform initialisation for a `co x ci x k x k` kernel.
    fn init<R: Rng>(rng: &mut R, co: usize, ci: usize, k: usize) -> Self {
        let bound = libm::sqrt(6.0 / (ci * k * k) as f64);
        Self {
            weight: Tensor::from_fn([co, ci, k, k], |_| rng.random_range(-bound..bound)),
            bias: Tensor::zeros([co]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub encoder: [Layer; 3],
    pub projection: [Layer; 3],
    pub head: Layer,
}

impl Params {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = rng::stream(seed, 0x1417);
        let [c1, c2] = config.widths;
        let f = config.feature_dim;
        Self {
            encoder: [
                Layer::init(&mut rng, c1, config.in_channels, 3),
                Layer::init(&mut rng, c2, c1, 3),
                Layer::init(&mut rng, f, c2, 3),
            ],
            projection: [
                Layer::init(&mut rng, f, f, 1),
                Layer::init(&mut rng, f, f, 1),
                Layer::init(&mut rng, f, f, 1),
            ],
            head: Layer::init(&mut rng, config.num_classes, f, 1),
        }
    }

    fn layers(&self) -> [(&'static str, &Layer); 7] {
        [
            ("encoder.0", &self.encoder[0]),
            ("encoder.1", &self.encoder[1]),
            ("encoder.2", &self.encoder[2]),
            ("projection.0", &self.projection[0]),
            ("projection.1", &self.projection[1]),
            ("projection.2", &self.projection[2]),
            ("head", &self.head),
        ]
    }

    /// Every parameter tensor with its stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(14);
        for (name, layer) in self.layers() {
            out.push((format!("{name}.weight"), &layer.weight));
            out.push((format!("{name}.bias"), &layer.bias));
        }
        out
    }

    /// Mutable view in the order of [`Params::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(14);
        for layer in self
            .encoder
            .iter_mut()
            .chain(self.projection.iter_mut())
            .chain(core::iter::once(&mut self.head))
        {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out
    }

    /// Replaces the tensor called `name`, checking its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let names: Vec<String> = self.named().into_iter().map(|(n, _)| n).collect();
        let idx = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        let slot = self.tensors_mut().into_iter().nth(idx).expect("index from names");
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "Params::set",
                left: slot.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }
}

/// `F x K` matrix of unit class prototypes (one per column).
///
/// A class absent from the latest labelled batch keeps its previous column
/// (`fresh[k] == false`). A class that has never been observed is
/// unavailable and its column is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub vectors: Tensor,
    pub fresh: Vec<bool>,
    pub available: Vec<bool>,
}

impl PrototypeBank {
    pub fn empty(feature_dim: usize, num_classes: usize) -> Self {
        Self {
            vectors: Tensor::zeros([feature_dim, num_classes]),
            fresh: vec![false; num_classes],
            available: vec![false; num_classes],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn all_available(&self) -> bool {
        self.available.iter().all(|&a| a)
    }

    pub fn first_unavailable(&self) -> Option<usize> {
        self.available.iter().position(|&a| !a)
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        let (f, kk) = (self.feature_dim(), self.num_classes());
        (0..f).map(|i| self.vectors.data()[i * kk + k]).collect()
    }

    /// New prototypes from `[M, F]` embeddings and `[M, K]` one-hot (or
    /// all-zero, for void pixels) labels.
    pub fn compute(&self, embeddings: &Tensor, one_hot: &Tensor) -> Result<Self> {
        let mut g = Graph::new();
        let rows = g.constant(embeddings.clone());
        let z = g.transpose(rows)?;
        let (_, bank) = prototypes_from_rows(&mut g, z, one_hot, self)?;
        Ok(bank)
    }
}

/// Downsamples an `H x W` label map to `h x w` by nearest neighbour, taking
/// the label at the centre of each block.
pub fn downsample_labels(labels: &[i32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<i32> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = ((2 * y + 1) * h / (2 * out_h)).min(h - 1);
        for x in 0..out_w {
            let sx = ((2 * x + 1) * w / (2 * out_w)).min(w - 1);
            out.push(labels[sy * w + sx]);
        }
    }
    out
}

/// `[M, K]` one-hot matrix; labels outside `0..K` (void or unknown) give an
/// all-zero row.
pub fn one_hot(labels: &[i32], num_classes: usize) -> Tensor {
    let mut t = Tensor::zeros([labels.len(), num_classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= 0 && (l as usize) < num_classes {
            t.data_mut()[i * num_classes + l as usize] = 1.0;
        }
    }
    t
}

/// Graph form of prototype computation: `z` is `[F, M]`, `one_hot` is
/// `[M, K]`. Returns the `[F, K]` prototype node and the updated bank.
pub fn prototypes_from_rows(
    g: &mut Graph,
    z: Var,
    one_hot: &Tensor,
    previous: &PrototypeBank,
) -> Result<(Var, PrototypeBank)> {
    let k = one_hot.shape()[1];
    let f = g.shape(z)[0];
    if previous.num_classes() != k || previous.feature_dim() != f {
        return Err(Error::ShapeMismatch {
            op: "prototypes",
            left: previous.vectors.shape().to_vec(),
            right: vec![f, k],
        });
    }
    let mut counts = vec![0usize; k];
    for row in one_hot.data().chunks(k) {
        for (c, &v) in counts.iter_mut().zip(row) {
            *c += usize::from(v != 0.0);
        }
    }
    let y = g.constant(one_hot.clone());
    let sums = g.matmul(z, y)?;
    let normed = g.l2_normalize(sums, 0, NORM_EPS)?;
    let fresh: Vec<bool> = counts.iter().map(|&c| c > 0).collect();
    let keep = Tensor::from_fn([f, k], |i| if fresh[i % k] { 1.0 } else { 0.0 });
    let history = Tensor::from_fn([f, k], |i| {
        if fresh[i % k] {
            0.0
        } else {
            previous.vectors.data()[i]
        }
    });
    let keep = g.constant(keep);
    let history = g.constant(history);
    let kept = g.mul(normed, keep)?;
    let protos = g.add(kept, history)?;
    let available = fresh
        .iter()
        .zip(&previous.available)
        .map(|(&f, &a)| f || a)
        .collect();
    let bank = PrototypeBank {
        vectors: g.value(protos).clone(),
        fresh,
        available,
    };
    Ok((protos, bank))
}

/// Parameters placed on a graph.
#[derive(Debug, Clone, Copy)]
pub struct Bound {
    encoder: [(Var, Var); 3],
    projection: [(Var, Var); 3],
    head: (Var, Var),
    /// Head parameters as constants, for branches whose loss must not
    /// update the head.
    head_frozen: (Var, Var),
}

impl Bound {
    /// Parameter nodes in the order of [`Params::named`] (frozen copies
    /// excluded).
    pub fn vars(&self) -> [Var; 14] {
        let [e0, e1, e2] = self.encoder;
        let [p0, p1, p2] = self.projection;
        [
            e0.0, e0.1, e1.0, e1.1, e2.0, e2.1, p0.0, p0.1, p1.0, p1.1, p2.0, p2.1, self.head.0,
            self.head.1,
        ]
    }
}

/// Parameters, prototypes and trained thresholds of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Params,
    pub bank: PrototypeBank,
    /// Threshold solved by the most recent consistency step.
    pub gamma: Option<f64>,
    /// Per-class thresholds, when trained with them.
    pub class_gammas: Option<Vec<f64>>,
    pub step: u64,
}

impl ModelState {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, seed);
        let bank = PrototypeBank::empty(config.feature_dim, config.num_classes);
        Ok(Self {
            config,
            params,
            bank,
            gamma: None,
            class_gammas: None,
            step: 0,
        })
    }

    /// Places the parameters on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let mut put = |layer: &Layer| {
            if trainable {
                (g.param(layer.weight.clone()), g.param(layer.bias.clone()))
            } else {
                (g.constant(layer.weight.clone()), g.constant(layer.bias.clone()))
            }
        };
        let p = &self.params;
        let encoder = [put(&p.encoder[0]), put(&p.encoder[1]), put(&p.encoder[2])];
        let projection = [
            put(&p.projection[0]),
            put(&p.projection[1]),
            put(&p.projection[2]),
        ];
        let head = put(&p.head);
        let head_frozen = (
            g.constant(p.head.weight.clone()),
            g.constant(p.head.bias.clone()),
        );
        Bound {
            encoder,
            projection,
            head,
            head_frozen,
        }
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(Error::InvalidShape {
                op: "encode",
                shape: s.to_vec(),
                reason: "expected [N, C, H, W] with the configured channel count",
            });
        }
        if s[2] % DOWNSAMPLE != 0 || s[3] % DOWNSAMPLE != 0 || s[2] == 0 || s[3] == 0 {
            return Err(Error::InvalidShape {
                op: "encode",
                shape: s.to_vec(),
                reason: "H and W must be positive multiples of the downsample ratio",
            });
        }
        Ok(())
    }

    /// `[N, 3, H, W] -> [N, F, H/4, W/4]`, optionally followed by seeded
    /// dropout.
    pub fn encode(&self, g: &mut Graph, b: &Bound, x: Var, dropout: Option<(f64, u64)>) -> Result<Var> {
        self.check_input(g, x)?;
        let [(w0, b0), (w1, b1), (w2, b2)] = b.encoder;
        let h = g.conv2d(x, w0, Some(b0), 1, 1)?;
        let h = g.relu(h);
        let h = g.conv2d(h, w1, Some(b1), 2, 1)?;
        let h = g.relu(h);
        let z = g.conv2d(h, w2, Some(b2), 2, 1)?;
        match dropout {
            Some((p, seed)) if p > 0.0 => g.dropout(z, p, seed),
            _ => Ok(z),
        }
    }

    /// Per-pixel perceptron followed by L2 normalisation over channels.
    pub fn project(&self, g: &mut Graph, b: &Bound, features: Var) -> Result<Var> {
        let [(w0, b0), (w1, b1), (w2, b2)] = b.projection;
        let h = g.conv2d(features, w0, Some(b0), 1, 0)?;
        let h = g.relu(h);
        let h = g.conv2d(h, w1, Some(b1), 1, 0)?;
        let h = g.relu(h);
        let z = g.conv2d(h, w2, Some(b2), 1, 0)?;
        g.l2_normalize(z, 1, NORM_EPS)
    }

    /// Class logits `[N, K, h, w]` of the segmentation head.
    pub fn head(&self, g: &mut Graph, b: &Bound, features: Var, frozen: bool) -> Result<Var> {
        let (w, bias) = if frozen { b.head_frozen } else { b.head };
        g.conv2d(features, w, Some(bias), 1, 0)
    }

    // ----------------------------------------------------------- value-level API

    /// Encoder features of an image batch.
    pub fn encode_values(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(images.clone());
        let z = self.encode(&mut g, &b, x, None)?;
        Ok(g.value(z).clone())
    }

    /// Unit embeddings of encoder features.
    pub fn project_values(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(features.clone());
        let z = self.project(&mut g, &b, x)?;
        Ok(g.value(z).clone())
    }

    /// Head logits of encoder features.
    pub fn head_scores(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(features.clone());
        let s = self.head(&mut g, &b, x, false)?;
        Ok(g.value(s).clone())
    }

    /// Full-resolution cosine scores `[N, K, H, W]` of the prototype branch.
    pub fn prototype_score_map(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(images.clone());
        let features = self.encode(&mut g, &b, x, None)?;
        let z = self.project(&mut g, &b, features)?;
        let low = prototype_scores(g.value(z), &self.bank)?;
        let (h, w) = (images.shape()[2], images.shape()[3]);
        let low = g.constant(low);
        let up = g.upsample_bilinear(low, h, w)?;
        Ok(g.value(up).clone())
    }
}

/// Graph form of prototype scoring: `z` is `[N, F, h, w]`, `protos` is
/// `[F, K]`; returns `[N, K, h, w]`.
pub fn prototype_scores_graph(g: &mut Graph, z: Var, protos: Var) -> Result<Var> {
    let s = g.shape(z).to_vec();
    if s.len() != 4 || g.shape(protos).len() != 2 || g.shape(protos)[0] != s[1] {
        return Err(Error::ShapeMismatch {
            op: "prototype_scores",
            left: s,
            right: g.shape(protos).to_vec(),
        });
    }
    let (n, f, h, w) = (s[0], s[1], s[2], s[3]);
    let k = g.shape(protos)[1];
    let rows = g.permute(z, &[0, 2, 3, 1])?;
    let rows = g.reshape(rows, &[n * h * w, f])?;
    let scores = g.matmul(rows, protos)?;
    let scores = g.reshape(scores, &[n, h, w, k])?;
    g.permute(scores, &[0, 3, 1, 2])
}

/// Cosine scores of unit embeddings `[N, F, h, w]` against every prototype,
/// clamped to `[-1, 1]`.
pub fn prototype_scores(z: &Tensor, bank: &PrototypeBank) -> Result<Tensor> {
    if let Some(k) = bank.first_unavailable() {
        return Err(Error::UnavailableClass(k));
    }
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let p = g.constant(bank.vectors.clone());
    let s = prototype_scores_graph(&mut g, zv, p)?;
    Ok(g.value(s).map(|v| v.clamp(-1.0, 1.0)))
}

/// Upsamples `[N, K, h, w]` scores to `H x W` and applies softmax with
/// temperature `tau` over classes.
pub fn segment_probs_graph(g: &mut Graph, scores: Var, tau: f64, out_h: usize, out_w: usize) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::InvalidTemperature(tau));
    }
    let up = g.upsample_bilinear(scores, out_h, out_w)?;
    g.softmax(up, 1, tau)
}

/// Value form of [`segment_probs_graph`].
pub fn segment_probs(scores: &Tensor, tau: f64, out_h: usize, out_w: usize) -> Result<Tensor> {
    if !scores.all_finite() {
        return Err(Error::NonFinite("segment_probs scores".to_string()));
    }
    let mut g = Graph::new();
    let s = g.constant(scores.clone());
    let p = segment_probs_graph(&mut g, s, tau, out_h, out_w)?;
    Ok(g.value(p).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            widths: [4, 6],
            feature_dim: 5,
            num_classes: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_architecture_shapes_on_64px() {
        let m = ModelState::new(ModelConfig::default(), 0).unwrap();
        let x = Tensor::from_fn([1, 3, 64, 64], |i| (i % 7) as f64 / 7.0);
        let f = m.encode_values(&x).unwrap();
        assert_eq!(f.shape(), &[1, 64, 16, 16]);
        let z = m.project_values(&f).unwrap();
        assert_eq!(z.shape(), &[1, 64, 16, 16]);
        assert_eq!(m.head_scores(&f).unwrap().shape(), &[1, 4, 16, 16]);
    }

    #[test]
    fn zero_image_with_zero_final_layer_gives_zero_features() {
        let mut m = ModelState::new(small(), 1).unwrap();
        m.params.encoder[2].weight = m.params.encoder[2].weight.map(|_| 0.0);
        let f = m.encode_values(&Tensor::zeros([2, 3, 8, 8])).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_rejects_indivisible_extent() {
        let m = ModelState::new(small(), 1).unwrap();
        assert!(matches!(
            m.encode_values(&Tensor::zeros([1, 3, 10, 8])),
            Err(Error::InvalidShape { .. })
        ));
    }

    #[test]
    fn encode_is_batch_equivariant() {
        let m = ModelState::new(small(), 2).unwrap();
        let a = Tensor::from_fn([1, 3, 8, 8], |i| libm::sin(i as f64));
        let b = Tensor::from_fn([1, 3, 8, 8], |i| libm::cos(i as f64 * 0.3));
        let ab = Tensor::new([2, 3, 8, 8], [a.data(), b.data()].concat()).unwrap();
        let ba = Tensor::new([2, 3, 8, 8], [b.data(), a.data()].concat()).unwrap();
        let fab = m.encode_values(&ab).unwrap();
        let fba = m.encode_values(&ba).unwrap();
        let half = fab.len() / 2;
        assert_eq!(&fab.data()[..half], &fba.data()[half..]);
        assert_eq!(&fab.data()[half..], &fba.data()[..half]);
    }

    #[test]
    fn identity_projection_keeps_unit_vector() {
        let mut m = ModelState::new(small(), 3).unwrap();
        for layer in &mut m.params.projection {
            layer.weight = Tensor::from_fn([5, 5, 1, 1], |i| if i / 5 == i % 5 { 1.0 } else { 0.0 });
            layer.bias = Tensor::zeros([5]);
        }
        let v = [0.0, 0.6, 0.0, 0.8, 0.0];
        let x = Tensor::new([1, 5, 1, 1], v.to_vec()).unwrap();
        assert_eq!(m.project_values(&x).unwrap().data(), &v);
    }

    #[test]
    fn projection_outputs_unit_norm() {
        let m = ModelState::new(small(), 4).unwrap();
        let x = Tensor::from_fn([2, 5, 3, 3], |i| libm::sin(i as f64 * 1.7) * 3.0);
        let z = m.project_values(&x).unwrap();
        for n in 0..2 {
            for p in 0..9 {
                let norm: f64 = (0..5).map(|c| z.data()[(n * 5 + c) * 9 + p].powi(2)).sum();
                assert!((libm::sqrt(norm) - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn prototype_examples() {
        let bank = PrototypeBank::empty(3, 2);
        let rows = Tensor::new([1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let b = bank.compute(&rows, &one_hot(&[1], 2)).unwrap();
        assert_eq!(b.column(1), [1.0, 0.0, 0.0]);
        assert_eq!(b.fresh, [false, true]);
        assert_eq!(b.available, [false, true]);

        let bank = PrototypeBank::empty(2, 2);
        let rows = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = bank.compute(&rows, &one_hot(&[1, 1], 2)).unwrap();
        let r = core::f64::consts::FRAC_1_SQRT_2;
        let c = b.column(1);
        assert!((c[0] - r).abs() < 1e-15 && (c[1] - r).abs() < 1e-15);
    }

    #[test]
    fn absent_class_keeps_history() {
        let mut bank = PrototypeBank::empty(2, 3);
        bank.vectors = Tensor::new([2, 3], vec![1.0, 0.0, 0.6, 0.0, 1.0, 0.8]).unwrap();
        bank.available = vec![true; 3];
        let rows = Tensor::new([2, 2], vec![0.0, 2.0, 3.0, 0.0]).unwrap();
        let b = bank.compute(&rows, &one_hot(&[0, 1], 3)).unwrap();
        assert_eq!(b.column(2), [0.6, 0.8]);
        assert_eq!(b.fresh, [true, true, false]);
        assert_eq!(b.column(0), [0.0, 1.0]);
        assert_eq!(b.column(1), [1.0, 0.0]);
    }

    #[test]
    fn void_pixels_contribute_nothing() {
        let bank = PrototypeBank::empty(2, 2);
        let rows = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = bank.compute(&rows, &one_hot(&[-1, 0], 2)).unwrap();
        assert_eq!(b.column(0), [0.0, 1.0]);
        assert!(!b.available[1]);
    }

    #[test]
    fn scoring_examples() {
        let r = core::f64::consts::FRAC_1_SQRT_2;
        let bank = PrototypeBank {
            vectors: Tensor::new([2, 2], vec![1.0, r, 0.0, r]).unwrap(),
            fresh: vec![true; 2],
            available: vec![true; 2],
        };
        let z = Tensor::new([1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
        let s = prototype_scores(&z, &bank).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert!((s.data()[1] - 0.70711).abs() < 1e-5);

        let z = Tensor::new([1, 2, 1, 1], vec![0.0, 1.0]).unwrap();
        assert_eq!(prototype_scores(&z, &bank).unwrap().data()[0], 0.0);
    }

    #[test]
    fn scoring_unavailable_class_is_an_error() {
        let bank = PrototypeBank::empty(2, 3);
        let z = Tensor::zeros([1, 2, 1, 1]);
        assert_eq!(prototype_scores(&z, &bank).unwrap_err(), Error::UnavailableClass(0));
    }

    #[test]
    fn head_examples() {
        let mut m = ModelState::new(small(), 5).unwrap();
        let f = Tensor::from_fn([1, 5, 2, 2], |i| i as f64 * 0.1);
        m.params.head.weight = Tensor::zeros([3, 5, 1, 1]);
        assert!(m.head_scores(&f).unwrap().data().iter().all(|&v| v == 0.0));
        // rows select channels 4, 0, 2
        m.params.head.weight = Tensor::from_fn([3, 5, 1, 1], |i| {
            let (row, col) = (i / 5, i % 5);
            if [4, 0, 2][row] == col { 1.0 } else { 0.0 }
        });
        let s = m.head_scores(&f).unwrap();
        for (row, ch) in [4usize, 0, 2].into_iter().enumerate() {
            assert_eq!(&s.data()[row * 4..row * 4 + 4], &f.data()[ch * 4..ch * 4 + 4]);
        }
    }

    #[test]
    fn segment_probs_examples() {
        let uniform = segment_probs(&Tensor::full([1, 4, 2, 2], 0.3), PROTOTYPE_TAU, 8, 8).unwrap();
        assert!(uniform.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));

        let s = Tensor::new([1, 2, 1, 1], vec![1.0, 0.7071]).unwrap();
        let p = segment_probs(&s, PROTOTYPE_TAU, 1, 1).unwrap();
        assert!((p.data()[0] - 0.984_995_482_231_693).abs() < 1e-6);
        assert!((p.data()[1] - 0.015_004_517_768_307).abs() < 1e-6);

        assert_eq!(
            segment_probs(&s, 0.0, 1, 1).unwrap_err(),
            Error::InvalidTemperature(0.0)
        );
    }

    #[test]
    fn label_downsampling_picks_block_centres() {
        let labels: Vec<i32> = (0..64).collect();
        let d = downsample_labels(&labels, 8, 8, 2, 2);
        assert_eq!(d, [2 * 8 + 2, 2 * 8 + 6, 6 * 8 + 2, 6 * 8 + 6]);
    }

    #[test]
    fn param_names_are_stable() {
        let m = ModelState::new(small(), 0).unwrap();
        let names: Vec<String> = m.params.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 14);
        assert_eq!(names[0], "encoder.0.weight");
        assert_eq!(names[13], "head.bias");
    }
}
