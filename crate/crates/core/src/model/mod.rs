//! The prototypical-part network: trunk, add-on layers, prototype units and
//! the linear class head.

pub mod backbone;
pub mod conv;
pub mod ops;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use backbone::{Backbone, BackboneState, DeskCnn, TrunkPass, DESK_CNN_ID};
pub use conv::ConvSpec;
pub use ops::{scale_up, similarity, similarity_map, topk_pool};

use crate::error::{Error, Result};
use crate::grid::{ActivationMap, Grid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub prototypes_per_class: usize,
    /// Latent depth D.
    pub depth: usize,
    pub top_k: usize,
    pub epsilon: f64,
    pub backbone_id: String,
    pub input_side: usize,
    pub latent_side: usize,
    pub trunk: Vec<ConvSpec>,
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            prototypes_per_class: 9,
            depth: 32,
            top_k: 5,
            epsilon: 1e-4,
            backbone_id: DESK_CNN_ID.to_string(),
            input_side: 224,
            latent_side: 7,
            trunk: DeskCnn::default_layers(),
            pixel_mean: [0.0; 3],
            pixel_std: [1.0; 3],
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// 28x28 input, one 4x4/4 conv to a 7x7 latent grid. For tests and smoke runs.
    pub fn tiny(prototypes_per_class: usize, depth: usize) -> Self {
        Self {
            prototypes_per_class,
            depth,
            top_k: 3,
            input_side: 28,
            latent_side: 7,
            trunk: vec![ConvSpec { in_channels: 3, out_channels: 5, kernel: 4, stride: 4, padding: 0 }],
            ..Self::default()
        }
    }

    pub fn num_prototypes(&self) -> usize {
        self.num_classes * self.prototypes_per_class
    }

    pub fn latent_cells(&self) -> usize {
        self.latent_side * self.latent_side
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_classes < 2 {
            problems.push(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.prototypes_per_class == 0 {
            problems.push("prototypes_per_class must be positive".to_string());
        }
        if self.depth == 0 {
            problems.push("depth must be positive".to_string());
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            problems.push(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        if self.top_k == 0 || self.top_k > self.latent_cells() {
            problems.push(format!(
                "top_k={} outside 1..={}",
                self.top_k,
                self.latent_cells()
            ));
        }
        if self.pixel_std.iter().any(|s| !(*s > 0.0)) {
            problems.push("pixel_std entries must be positive".to_string());
        }
        if self.backbone_id != DESK_CNN_ID {
            problems.push(format!("unknown backbone `{}`", self.backbone_id));
        } else {
            match DeskCnn::init(self.trunk.clone(), 0) {
                Err(e) => problems.push(e.to_string()),
                Ok(cnn) => match cnn.out_side(self.input_side) {
                    Some(s) if s == self.latent_side => {}
                    other => problems.push(format!(
                        "trunk maps {0}x{0} input to side {other:?}, expected {1}",
                        self.input_side, self.latent_side
                    )),
                },
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// RGB image with unit-interval pixels in HWC order.
#[derive(Debug, Clone, PartialEq)]
pub struct InputImage {
    pub id: String,
    pub side: usize,
    pub pixels: Vec<f64>,
    pub label: Option<usize>,
}

impl InputImage {
    pub fn new(id: impl Into<String>, side: usize, pixels: Vec<f64>, label: Option<usize>) -> Result<Self> {
        let id = id.into();
        if pixels.len() != side * side * 3 {
            return Err(Error::Shape(format!(
                "image `{id}` has {} values, expected {side}x{side}x3",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(vec![format!(
                "image `{id}` has pixel value {bad} outside [0, 1]"
            )]));
        }
        Ok(Self { id, side, pixels, label })
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.side + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Latent grid with D-dimensional patches, stored patch-contiguous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    rows: usize,
    cols: usize,
    depth: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(rows: usize, cols: usize, depth: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols * depth {
            return Err(Error::Shape(format!(
                "feature map {rows}x{cols}x{depth} needs {} values, got {}",
                rows * cols * depth,
                values.len()
            )));
        }
        Ok(Self { rows, cols, depth, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn patch(&self, row: usize, col: usize) -> &[f64] {
        self.patch_at(row * self.cols + col)
    }

    pub fn patch_at(&self, cell: usize) -> &[f64] {
        &self.values[cell * self.depth..(cell + 1) * self.depth]
    }
}

/// Where a projected prototype came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSource {
    pub image_id: String,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub class_id: usize,
    pub vector: Vec<f64>,
    pub source: Option<PatchSource>,
}

/// Two 1x1 convolutions: ReLU then tanh, mapping trunk channels to depth D.
/// Parameters are laid out as `[w1 (D x C), b1 (D), w2 (D x D), b2 (D)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AddOn {
    in_channels: usize,
    depth: usize,
    params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AddOnPass {
    /// Trunk output transposed to cell-major order (cells x C).
    input: Vec<f64>,
    hidden: Vec<f64>,
    output: Vec<f64>,
    cells: usize,
}

impl AddOn {
    pub fn init(in_channels: usize, depth: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(Self::param_len(in_channels, depth));
        for fan_in in [in_channels, depth] {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            params.extend((0..depth * fan_in).map(|_| normal.sample(&mut rng)));
            params.extend(std::iter::repeat_n(0.0, depth));
        }
        Self { in_channels, depth, params }
    }

    pub fn zeros(in_channels: usize, depth: usize) -> Self {
        Self {
            in_channels,
            depth,
            params: vec![0.0; Self::param_len(in_channels, depth)],
        }
    }

    pub fn from_parts(in_channels: usize, depth: usize, params: Vec<f64>) -> Result<Self> {
        if params.len() != Self::param_len(in_channels, depth) {
            return Err(Error::Shape(format!(
                "add-on {in_channels}->{depth} expects {} parameters, got {}",
                Self::param_len(in_channels, depth),
                params.len()
            )));
        }
        Ok(Self { in_channels, depth, params })
    }

    pub fn param_len(in_channels: usize, depth: usize) -> usize {
        depth * in_channels + depth + depth * depth + depth
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        let (c, d) = (self.in_channels, self.depth);
        let (w1, rest) = self.params.split_at(d * c);
        let (b1, rest) = rest.split_at(d);
        let (w2, b2) = rest.split_at(d * d);
        (w1, b1, w2, b2)
    }

    /// `trunk_out` is CHW with `cells` spatial positions.
    pub fn forward(&self, trunk_out: &[f64], cells: usize) -> Result<AddOnPass> {
        let (c, d) = (self.in_channels, self.depth);
        if trunk_out.len() != c * cells {
            return Err(Error::Shape(format!(
                "add-on expects {c} channels x {cells} cells, got {} values",
                trunk_out.len()
            )));
        }
        let (w1, b1, w2, b2) = self.split();
        let mut input = vec![0.0; cells * c];
        for ch in 0..c {
            for cell in 0..cells {
                input[cell * c + ch] = trunk_out[ch * cells + cell];
            }
        }
        let mut hidden = vec![0.0; cells * d];
        let mut output = vec![0.0; cells * d];
        for cell in 0..cells {
            let x = &input[cell * c..(cell + 1) * c];
            let h = &mut hidden[cell * d..(cell + 1) * d];
            for (o, hv) in h.iter_mut().enumerate() {
                let w = &w1[o * c..(o + 1) * c];
                *hv = (b1[o] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).max(0.0);
            }
            let out = &mut output[cell * d..(cell + 1) * d];
            for (o, ov) in out.iter_mut().enumerate() {
                let w = &w2[o * d..(o + 1) * d];
                *ov = (b2[o] + w.iter().zip(h.iter()).map(|(a, b)| a * b).sum::<f64>()).tanh();
            }
        }
        if hidden.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: "addon.conv0".into() });
        }
        if output.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: "addon.conv1".into() });
        }
        Ok(AddOnPass { input, hidden, output, cells })
    }

    /// Accumulates parameter gradients; returns the gradient at the trunk output (CHW)
    /// when `want_input` is set.
    pub fn backward(
        &self,
        pass: &AddOnPass,
        grad_z: &[f64],
        grad_params: &mut [f64],
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let (c, d, cells) = (self.in_channels, self.depth, pass.cells);
        let (w1, _, w2, _) = self.split();
        let (gw1, rest) = grad_params.split_at_mut(d * c);
        let (gb1, rest) = rest.split_at_mut(d);
        let (gw2, gb2) = rest.split_at_mut(d * d);
        let mut grad_in = want_input.then(|| vec![0.0; c * cells]);
        let mut g_pre2 = vec![0.0; d];
        let mut g_pre1 = vec![0.0; d];
        for cell in 0..cells {
            let x = &pass.input[cell * c..(cell + 1) * c];
            let h = &pass.hidden[cell * d..(cell + 1) * d];
            let z = &pass.output[cell * d..(cell + 1) * d];
            let gz = &grad_z[cell * d..(cell + 1) * d];
            for o in 0..d {
                g_pre2[o] = gz[o] * (1.0 - z[o] * z[o]);
            }
            g_pre1.iter_mut().for_each(|v| *v = 0.0);
            for o in 0..d {
                let g = g_pre2[o];
                if g == 0.0 {
                    continue;
                }
                gb2[o] += g;
                for i in 0..d {
                    gw2[o * d + i] += g * h[i];
                    g_pre1[i] += g * w2[o * d + i];
                }
            }
            for o in 0..d {
                if h[o] <= 0.0 {
                    g_pre1[o] = 0.0;
                }
            }
            for o in 0..d {
                let g = g_pre1[o];
                if g == 0.0 {
                    continue;
                }
                gb1[o] += g;
                for i in 0..c {
                    gw1[o * c + i] += g * x[i];
                }
                if let Some(gi) = grad_in.as_mut() {
                    for i in 0..c {
                        gi[i * cells + cell] += g * w1[o * c + i];
                    }
                }
            }
        }
        grad_in
    }
}

impl AddOnPass {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

/// Linear head without bias: `scores = weights . similarity`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    num_classes: usize,
    num_prototypes: usize,
    /// Row-major K x m.
    weights: Vec<f64>,
}

impl Head {
    pub fn new(num_classes: usize, num_prototypes: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != num_classes * num_prototypes {
            return Err(Error::Shape(format!(
                "head must be {num_classes}x{num_prototypes}, got {} weights",
                weights.len()
            )));
        }
        Ok(Self { num_classes, num_prototypes, weights })
    }

    /// 1 on connections to the class's own prototypes, `off_class` elsewhere.
    pub fn class_connected(classes: &[usize], num_classes: usize, off_class: f64) -> Self {
        let m = classes.len();
        let mut weights = vec![off_class; num_classes * m];
        for (j, &c) in classes.iter().enumerate() {
            weights[c * m + j] = 1.0;
        }
        Self { num_classes, num_prototypes: m, weights }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_prototypes(&self) -> usize {
        self.num_prototypes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn weight(&self, class: usize, prototype: usize) -> f64 {
        self.weights[class * self.num_prototypes + prototype]
    }

    pub fn apply(&self, similarity: &[f64]) -> Vec<f64> {
        (0..self.num_classes)
            .map(|k| {
                let row = &self.weights[k * self.num_prototypes..(k + 1) * self.num_prototypes];
                row.iter().zip(similarity).fold(0.0, |acc, (w, s)| acc + w * s)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassLogits {
    pub scores: Vec<f64>,
    pub similarity: Vec<f64>,
}

impl ClassLogits {
    /// Highest-scoring class; lowest index on ties.
    pub fn predicted(&self) -> usize {
        let mut best = 0;
        for (k, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = k;
            }
        }
        best
    }
}

/// Everything a training step needs to backpropagate from the feature map.
#[derive(Debug, Clone)]
pub struct EmbedPass {
    pub trunk: Option<TrunkPass>,
    pub addon: AddOnPass,
    pub features: FeatureMap,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: ClassLogits,
    pub activations: Vec<ActivationMap>,
    pub features: FeatureMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtoPartModel {
    pub config: ModelConfig,
    pub backbone: BackboneState,
    pub addon: AddOn,
    pub prototypes: Vec<Prototype>,
    pub head: Head,
}

/// Off-class head weight at initialization.
pub const OFF_CLASS_INIT: f64 = -0.5;

impl ProtoPartModel {
    /// Seeded initialization: He-normal trunk and add-on, uniform [0, 1) prototypes,
    /// 1 / -0.5 class-connected head.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.init_seed;
        let trunk = DeskCnn::init(config.trunk.clone(), seed)?;
        let addon = AddOn::init(trunk.out_channels(), config.depth, seed.wrapping_add(1));
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        let prototypes = (0..config.num_prototypes())
            .map(|j| Prototype {
                class_id: j / config.prototypes_per_class,
                vector: (0..config.depth).map(|_| rng.random::<f64>()).collect(),
                source: None,
            })
            .collect::<Vec<_>>();
        let classes: Vec<usize> = prototypes.iter().map(|p| p.class_id).collect();
        let head = Head::class_connected(&classes, config.num_classes, OFF_CLASS_INIT);
        Ok(Self {
            config,
            backbone: BackboneState::DeskCnn(trunk),
            addon,
            prototypes,
            head,
        })
    }

    pub fn prototype_classes(&self) -> Vec<usize> {
        self.prototypes.iter().map(|p| p.class_id).collect()
    }

    pub fn prototypes_of(&self, class: usize) -> impl Iterator<Item = usize> + '_ {
        self.prototypes
            .iter()
            .enumerate()
            .filter(move |(_, p)| p.class_id == class)
            .map(|(j, _)| j)
    }

    /// Checks internal consistency after loading or editing.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        let mut problems = Vec::new();
        if self.prototypes.len() != c.num_prototypes() {
            problems.push(format!(
                "expected {} prototypes, found {}",
                c.num_prototypes(),
                self.prototypes.len()
            ));
        }
        for (j, p) in self.prototypes.iter().enumerate() {
            if p.vector.len() != c.depth {
                problems.push(format!("prototype {j} has length {}, depth is {}", p.vector.len(), c.depth));
            }
            if p.class_id >= c.num_classes {
                problems.push(format!("prototype {j} has class {} >= K", p.class_id));
            }
        }
        if self.head.num_classes() != c.num_classes || self.head.num_prototypes() != self.prototypes.len() {
            problems.push("head shape does not match K x m".to_string());
        }
        if self.addon.depth != c.depth || self.addon.in_channels != self.backbone.out_channels() {
            problems.push("add-on shape does not match trunk/depth".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// Standardized CHW pixels for the trunk.
    pub fn standardize(&self, image: &InputImage) -> Result<Vec<f64>> {
        let side = self.config.input_side;
        if image.side != side || image.pixels.len() != side * side * 3 {
            return Err(Error::Shape(format!(
                "image `{}` is {}x{}, model expects {side}x{side}",
                image.id, image.side, image.side
            )));
        }
        let plane = side * side;
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in image.pixels.chunks_exact(3).enumerate() {
            for ch in 0..3 {
                out[ch * plane + i] = (px[ch] - self.config.pixel_mean[ch]) / self.config.pixel_std[ch];
            }
        }
        Ok(out)
    }

    pub fn trunk_forward(&self, image: &InputImage) -> Result<TrunkPass> {
        let x = self.standardize(image)?;
        self.backbone.forward(&x, self.config.input_side)
    }

    /// Add-on layers on top of a (possibly cached) trunk output.
    pub fn embed_from_trunk(&self, trunk_out: &[f64]) -> Result<(AddOnPass, FeatureMap)> {
        let side = self.config.latent_side;
        let pass = self.addon.forward(trunk_out, side * side)?;
        let features = FeatureMap::new(side, side, self.config.depth, pass.output.clone())?;
        Ok((pass, features))
    }

    pub fn embed(&self, image: &InputImage) -> Result<FeatureMap> {
        let trunk = self.trunk_forward(image)?;
        Ok(self.embed_from_trunk(trunk.output())?.1)
    }

    pub fn embed_for_training(&self, image: &InputImage) -> Result<EmbedPass> {
        let trunk = self.trunk_forward(image)?;
        let (addon, features) = self.embed_from_trunk(trunk.output())?;
        Ok(EmbedPass { trunk: Some(trunk), addon, features })
    }

    /// Backpropagates a feature-map gradient. Trunk gradients are only
    /// computed when `grad_trunk` is given and the pass kept trunk activations.
    pub fn backward_features(
        &self,
        pass: &EmbedPass,
        grad_z: &[f64],
        grad_addon: &mut [f64],
        grad_trunk: Option<&mut [f64]>,
    ) {
        let want_trunk = grad_trunk.is_some() && pass.trunk.is_some();
        let g_trunk_out = self.addon.backward(&pass.addon, grad_z, grad_addon, want_trunk);
        if let (Some(gt), Some(trunk), Some(g)) = (grad_trunk, pass.trunk.as_ref(), g_trunk_out) {
            self.backbone.backward(trunk, &g, gt);
        }
    }

    pub fn similarity_maps(&self, z: &FeatureMap) -> Result<Vec<ActivationMap>> {
        self.prototypes
            .iter()
            .enumerate()
            .map(|(j, p)| similarity_map(z, &p.vector, j, self.config.epsilon))
            .collect()
    }

    pub fn classify_features(&self, z: &FeatureMap) -> Result<(ClassLogits, Vec<ActivationMap>)> {
        let maps = self.similarity_maps(z)?;
        let similarity = maps
            .iter()
            .map(|a| topk_pool(a, self.config.top_k))
            .collect::<Result<Vec<_>>>()?;
        let scores = self.head.apply(&similarity);
        Ok((ClassLogits { scores, similarity }, maps))
    }

    pub fn forward(&self, image: &InputImage) -> Result<ForwardOutput> {
        let features = self.embed(image)?;
        let (logits, activations) = self.classify_features(&features)?;
        Ok(ForwardOutput { logits, activations, features })
    }

    /// Input-space footprint `(x, y, w, h)` of a latent cell.
    pub fn cell_bbox(&self, row: usize, col: usize) -> [usize; 4] {
        cell_bbox(row, col, self.config.latent_side, self.config.input_side)
    }
}

/// Input-space tile of latent cell `(row, col)` using the adaptive bin edges.
pub fn cell_bbox(row: usize, col: usize, latent_side: usize, input_side: usize) -> [usize; 4] {
    let (y0, y1) = ops::adaptive_bin(row, input_side, latent_side);
    let (x0, x1) = ops::adaptive_bin(col, input_side, latent_side);
    [x0, y0, x1 - x0, y1 - y0]
}

/// Upscaled activation map (PAM) at input resolution.
pub fn activation_to_pam(a: &ActivationMap, input_side: usize) -> Result<Grid> {
    scale_up(a, input_side, input_side)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig::tiny(2, 4)
    }

    fn image(side: usize, seed: u64) -> InputImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..side * side * 3).map(|_| rng.random::<f64>()).collect();
        InputImage::new("img", side, px, Some(0)).unwrap()
    }

    #[test]
    fn default_config_is_valid_and_latent_is_seven() {
        let model = ProtoPartModel::init(ModelConfig::default()).unwrap();
        let z = model.embed(&image(224, 1)).unwrap();
        assert_eq!((z.rows(), z.cols(), z.depth()), (7, 7, 32));
    }

    #[test]
    fn zero_image_and_zero_addon_give_zero_features() {
        let mut model = ProtoPartModel::init(tiny_config()).unwrap();
        model.addon = AddOn::zeros(model.addon.in_channels(), 4);
        let img = InputImage::new("zero", 28, vec![0.0; 28 * 28 * 3], None).unwrap();
        let z = model.embed(&img).unwrap();
        assert!(z.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_is_deterministic() {
        let a = ProtoPartModel::init(tiny_config()).unwrap();
        let b = ProtoPartModel::init(tiny_config()).unwrap();
        let img = image(28, 5);
        let za = a.embed(&img).unwrap();
        let zb = b.embed(&img).unwrap();
        let bits = |z: &FeatureMap| z.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&za), bits(&zb));
    }

    #[test]
    fn wrong_image_size_is_a_shape_error() {
        let model = ProtoPartModel::init(tiny_config()).unwrap();
        let err = model.embed(&image(32, 0)).unwrap_err();
        assert!(err.is_validation(), "{err}");
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let mut model = ProtoPartModel::init(tiny_config()).unwrap();
        model.backbone.params_mut()[0] = f64::INFINITY;
        let img = image(28, 2);
        match model.embed(&img) {
            Err(Error::NonFinite { layer }) => assert!(layer.starts_with("trunk"), "{layer}"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn zero_head_gives_zero_scores() {
        let mut model = ProtoPartModel::init(tiny_config()).unwrap();
        model.head.weights_mut().iter_mut().for_each(|w| *w = 0.0);
        let out = model.forward(&image(28, 3)).unwrap();
        assert!(out.logits.scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn one_hot_head_selects_prototype() {
        let mut model = ProtoPartModel::init(tiny_config()).unwrap();
        let m = model.prototypes.len();
        let w = model.head.weights_mut();
        w.iter_mut().for_each(|x| *x = 0.0);
        w[2] = 1.0;
        w[m + 3] = 1.0;
        let out = model.forward(&image(28, 4)).unwrap();
        assert_eq!(out.logits.scores[0], out.logits.similarity[2]);
        assert_eq!(out.logits.scores[1], out.logits.similarity[3]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = tiny_config();
        c.top_k = 50;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.epsilon = 0.0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.latent_side = 6;
        assert!(c.validate().is_err());
    }

    #[test]
    fn head_init_is_class_connected() {
        let model = ProtoPartModel::init(ModelConfig::default()).unwrap();
        for (j, p) in model.prototypes.iter().enumerate() {
            for k in 0..2 {
                let expected = if p.class_id == k { 1.0 } else { OFF_CLASS_INIT };
                assert_eq!(model.head.weight(k, j), expected);
            }
        }
    }

    #[test]
    fn cell_bbox_tiles_input() {
        assert_eq!(cell_bbox(0, 0, 7, 224), [0, 0, 32, 32]);
        assert_eq!(cell_bbox(6, 2, 7, 224), [64, 192, 32, 32]);
    }
}
