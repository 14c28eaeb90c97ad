//! Small differentiable embedding models trained as identity classifiers.
//!
//! Two architectures (a three-layer MLP and a two-stage convnet) and two
//! training losses (plain softmax and an additive cosine-margin softmax)
//! give genuinely different gradient paths for crafting and transfer
//! evaluation. Features are the normalized penultimate layer; every gradient
//! is hand-derived and checked against finite differences in the tests.

mod net;

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::format;
use crate::numerics::{l2_norm, Tensor};

use net::{Layout, Net};

const MAGIC: &[u8; 4] = b"GAOM";
const VERSION: u16 = 1;

/// Gradient of an l2 norm is undefined at zero; below this residual the
/// distance-loss gradient is reported as exactly zero.
const ZERO_RESIDUAL: f64 = 1e-12;

/// Network architecture with its layer extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Mlp3 { hidden1: usize, hidden2: usize },
    Conv2 { channels1: usize, channels2: usize },
}

impl Architecture {
    pub fn mlp3_default() -> Self {
        Architecture::Mlp3 {
            hidden1: 64,
            hidden2: 64,
        }
    }

    pub fn conv2_default() -> Self {
        Architecture::Conv2 {
            channels1: 8,
            channels2: 16,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Mlp3 { .. } => "mlp3",
            Architecture::Conv2 { .. } => "conv2",
        }
    }
}

/// Classification loss used during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Softmax,
    MarginCosine,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Softmax => "softmax",
            LossKind::MarginCosine => "margin-cosine",
        }
    }
}

/// Plain minibatch gradient-descent settings.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Additive cosine margin (margin-cosine loss only).
    pub margin: f64,
    /// Logit scale (margin-cosine loss only).
    pub scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            learning_rate: 0.5,
            batch_size: 16,
            margin: 0.2,
            scale: 16.0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::invalid("margin must be in [0, 1)"));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::invalid("scale must be positive"));
        }
        Ok(())
    }
}

/// Dropout multipliers for the two hidden stages of one forward pass.
#[derive(Debug, Clone)]
pub struct DropoutPattern {
    mask1: Vec<f64>,
    mask2: Vec<f64>,
}

/// Which split of a dataset to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// A trained embedding model: deterministic, immutable, with analytic input
/// gradients.
#[derive(Debug, Clone)]
pub struct EmbeddingModel {
    arch: Architecture,
    input_shape: [usize; 3],
    feature_dim: usize,
    n_classes: usize,
    loss_kind: LossKind,
    train_seed: u64,
    params: Tensor,
    layout: Layout,
}

impl EmbeddingModel {
    /// Train an identity classifier with plain seeded minibatch gradient
    /// descent and return it as an embedding model.
    pub fn train_classifier(
        train_set: &Dataset,
        arch: Architecture,
        loss_kind: LossKind,
        feature_dim: usize,
        cfg: &TrainConfig,
        seed: u64,
    ) -> Result<EmbeddingModel> {
        cfg.validate()?;
        if train_set.n_identities() < 2 {
            return Err(Error::invalid(
                "training needs at least 2 identities to classify",
            ));
        }
        if feature_dim == 0 {
            return Err(Error::invalid("feature_dim must be positive"));
        }
        let input_shape = train_set.image_shape();
        if let Architecture::Conv2 { .. } = arch {
            if input_shape[0] % 4 != 0 || input_shape[1] % 4 != 0 {
                return Err(Error::invalid(
                    "conv2 needs image height and width divisible by 4",
                ));
            }
        }

        let n_classes = train_set.n_identities();
        let layout = Layout::new(&arch, input_shape, feature_dim, n_classes);
        let params = init_params(&arch, input_shape, feature_dim, &layout, seed);
        let mut model = EmbeddingModel {
            arch,
            input_shape,
            feature_dim,
            n_classes,
            loss_kind,
            train_seed: seed,
            params: Tensor::new(vec![layout.total], params)?,
            layout,
        };

        let pairs: Vec<(&Tensor, usize)> = train_set.train_pairs().collect();
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        // Separate stream from the init draws so changing layer extents does
        // not reshuffle the data order.
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e3779b97f4a7c15));
        let mut grad = vec![0.0; model.layout.total];
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size) {
                grad.iter_mut().for_each(|g| *g = 0.0);
                let mut batch_loss = 0.0;
                for &idx in batch {
                    let (img, label) = pairs[idx];
                    batch_loss += model.sample_loss_grad(img, label, cfg, &mut grad)?;
                }
                if !batch_loss.is_finite() {
                    return Err(Error::TrainingFailure {
                        epoch,
                        message: "batch loss became non-finite".into(),
                    });
                }
                let step = cfg.learning_rate / batch.len() as f64;
                for (p, g) in model.params.data_mut().iter_mut().zip(&grad) {
                    *p -= step * g;
                }
            }
            if !model.params.is_finite() {
                return Err(Error::TrainingFailure {
                    epoch,
                    message: "parameters became non-finite".into(),
                });
            }
        }
        Ok(model)
    }

    /// Classification loss for one sample, accumulating the full parameter
    /// gradient into `grad`.
    fn sample_loss_grad(
        &self,
        img: &Tensor,
        label: usize,
        cfg: &TrainConfig,
        grad: &mut [f64],
    ) -> Result<f64> {
        let fw = self.net().forward(self.check_image(img)?, None);
        let mut g_feat = vec![0.0; self.feature_dim];
        let p = self.params.data();
        let l = &self.layout;
        // Trunk gradient segments all live below wc.off; the head segments
        // (wc then bc) fill the tail of the flat buffer.
        let (trunk_grad, head_grad) = grad.split_at_mut(l.wc.off);
        let (g_wc, g_bc) = head_grad.split_at_mut(l.bc.off - l.wc.off);
        let loss = match self.loss_kind {
            LossKind::Softmax => net::softmax_head(
                &fw.feat_raw,
                l.wc.slice(p),
                l.bc.slice(p),
                self.n_classes,
                label,
                Some(g_wc),
                Some(g_bc),
                &mut g_feat,
            ),
            LossKind::MarginCosine => net::margin_cosine_head(
                &fw.feat_raw,
                l.wc.slice(p),
                self.n_classes,
                label,
                cfg.margin,
                cfg.scale,
                Some(g_wc),
                &mut g_feat,
            ),
        };
        self.net().backward(&fw, &g_feat, None, Some(trunk_grad), None);
        Ok(loss)
    }

    /// Unit-norm feature vector of an image.
    pub fn embed(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.embed_inner(x, None)
    }

    /// Feature vector under a fixed dropout pattern.
    pub fn embed_masked(&self, x: &Tensor, pattern: &DropoutPattern) -> Result<Vec<f64>> {
        self.embed_inner(x, Some(pattern))
    }

    fn embed_inner(&self, x: &Tensor, pattern: Option<&DropoutPattern>) -> Result<Vec<f64>> {
        let fw = self.net().forward(self.check_image(x)?, pattern);
        let norm = l2_norm(&fw.feat_raw);
        if norm < 1e-30 || !norm.is_finite() {
            return Err(Error::NumericFailure(
                "feature vector collapsed to zero; cannot normalize".into(),
            ));
        }
        Ok(fw.feat_raw.iter().map(|v| v / norm).collect())
    }

    /// l2 distance between `target_point` and the embedding of `x_adv`.
    pub fn distance_loss(&self, x_adv: &Tensor, target_point: &[f64]) -> Result<f64> {
        self.distance_loss_inner(x_adv, target_point, None)
    }

    pub fn distance_loss_masked(
        &self,
        x_adv: &Tensor,
        target_point: &[f64],
        pattern: &DropoutPattern,
    ) -> Result<f64> {
        self.distance_loss_inner(x_adv, target_point, Some(pattern))
    }

    fn distance_loss_inner(
        &self,
        x_adv: &Tensor,
        target_point: &[f64],
        pattern: Option<&DropoutPattern>,
    ) -> Result<f64> {
        self.check_target(target_point)?;
        let emb = self.embed_inner(x_adv, pattern)?;
        Ok(crate::numerics::l2_distance(target_point, &emb))
    }

    /// Gradient of `distance_loss` with respect to the raw 0-255 pixels of
    /// `x_adv`; the target point is treated as a constant.
    pub fn input_gradient(&self, x_adv: &Tensor, target_point: &[f64]) -> Result<Tensor> {
        self.input_gradient_inner(x_adv, target_point, None)
    }

    pub fn input_gradient_masked(
        &self,
        x_adv: &Tensor,
        target_point: &[f64],
        pattern: &DropoutPattern,
    ) -> Result<Tensor> {
        self.input_gradient_inner(x_adv, target_point, Some(pattern))
    }

    fn input_gradient_inner(
        &self,
        x_adv: &Tensor,
        target_point: &[f64],
        pattern: Option<&DropoutPattern>,
    ) -> Result<Tensor> {
        self.check_target(target_point)?;
        let image = self.check_image(x_adv)?;
        let net = self.net();
        let fw = net.forward(image, pattern);
        let fnorm = l2_norm(&fw.feat_raw);
        if fnorm < 1e-30 || !fnorm.is_finite() {
            return Err(Error::NumericFailure(
                "feature vector collapsed to zero; no gradient".into(),
            ));
        }
        let fhat: Vec<f64> = fw.feat_raw.iter().map(|v| v / fnorm).collect();
        let residual = crate::numerics::l2_distance(target_point, &fhat);
        let mut g_input = vec![0.0; image.len()];
        if residual > ZERO_RESIDUAL {
            // dL/d fhat = (fhat - t) / L, then through the normalization:
            // (I - fhat fhat^T) / ||feat_raw||.
            let g_fhat: Vec<f64> = fhat
                .iter()
                .zip(target_point)
                .map(|(f, t)| (f - t) / residual)
                .collect();
            let dotp: f64 = g_fhat.iter().zip(&fhat).map(|(g, f)| g * f).sum();
            let g_feat: Vec<f64> = g_fhat
                .iter()
                .zip(&fhat)
                .map(|(g, f)| (g - dotp * f) / fnorm)
                .collect();
            net.backward(&fw, &g_feat, pattern, None, Some(&mut g_input));
        }
        let grad = Tensor::new(self.input_shape.to_vec(), g_input)
            .map_err(|e| Error::NumericFailure(format!("non-finite input gradient: {}", e)))?;
        Ok(grad)
    }

    /// Stochastic view whose embed/gradient calls re-sample a seeded dropout
    /// pattern per call. `p = 0` reproduces the base model exactly.
    pub fn with_dropout(&self, p: f64, seed: u64) -> Result<DropoutView<'_>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!(
                "dropout probability must be in [0, 1), got {}",
                p
            )));
        }
        Ok(DropoutView {
            model: self,
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Draw one dropout pattern for this model's hidden stages.
    pub fn sample_dropout_pattern(&self, p: f64, rng: &mut ChaCha8Rng) -> DropoutPattern {
        let (n1, n2) = net::dropout_sizes(&self.arch, self.input_shape);
        let keep = 1.0 / (1.0 - p);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                .collect()
        };
        DropoutPattern {
            mask1: draw(n1),
            mask2: draw(n2),
        }
    }

    /// Class prediction for an image (argmax over head logits; the margin
    /// head scores plain cosine without the margin).
    pub fn classify(&self, x: &Tensor) -> Result<usize> {
        let fw = self.net().forward(self.check_image(x)?, None);
        let p = self.params.data();
        let logits = match self.loss_kind {
            LossKind::Softmax => net::affine_logits(
                &fw.feat_raw,
                self.layout.wc.slice(p),
                self.layout.bc.slice(p),
                self.n_classes,
            ),
            LossKind::MarginCosine => {
                net::cosine_logits(&fw.feat_raw, self.layout.wc.slice(p), self.n_classes)
            }
        };
        let mut best = 0;
        for (j, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = j;
            }
        }
        Ok(best)
    }

    /// Top-1 classification accuracy over one split of a dataset.
    pub fn accuracy(&self, ds: &Dataset, split: Split) -> Result<f64> {
        let mut correct = 0usize;
        let mut total = 0usize;
        for id in ds.identities() {
            let images = match split {
                Split::Train => id.train_images(),
                Split::Test => id.test_images(),
            };
            for img in images {
                if self.classify(img)? == id.identity_id as usize {
                    correct += 1;
                }
                total += 1;
            }
        }
        Ok(correct as f64 / total.max(1) as f64)
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss_kind
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn train_seed(&self) -> u64 {
        self.train_seed
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn params(&self) -> &Tensor {
        &self.params
    }

    fn net(&self) -> Net<'_> {
        Net {
            arch: &self.arch,
            input_shape: self.input_shape,
            feature_dim: self.feature_dim,
            layout: self.layout,
            params: self.params.data(),
        }
    }

    fn check_image<'a>(&self, x: &'a Tensor) -> Result<&'a [f64]> {
        if x.shape() != self.input_shape {
            return Err(Error::invalid(format!(
                "image shape {:?} does not match model input {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        Ok(x.data())
    }

    fn check_target(&self, target: &[f64]) -> Result<()> {
        if target.len() != self.feature_dim {
            return Err(Error::invalid(format!(
                "target dimension {} does not match feature dimension {}",
                target.len(),
                self.feature_dim
            )));
        }
        if target.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("target point must be finite"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        Self::read(&mut r)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        format::write_magic(w, MAGIC)?;
        format::write_u16(w, VERSION)?;
        let (tag, e1, e2) = match self.arch {
            Architecture::Mlp3 { hidden1, hidden2 } => (0u8, hidden1, hidden2),
            Architecture::Conv2 {
                channels1,
                channels2,
            } => (1u8, channels1, channels2),
        };
        w.write_all(&[tag])?;
        format::write_u32(w, e1 as u32)?;
        format::write_u32(w, e2 as u32)?;
        for e in self.input_shape {
            format::write_u32(w, e as u32)?;
        }
        w.write_all(&[match self.loss_kind {
            LossKind::Softmax => 0u8,
            LossKind::MarginCosine => 1u8,
        }])?;
        format::write_u32(w, self.feature_dim as u32)?;
        format::write_u32(w, self.n_classes as u32)?;
        format::write_u64(w, self.train_seed)?;
        format::write_u64(w, self.params.len() as u64)?;
        format::write_f64_slice(w, self.params.data())?;
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        format::expect_magic(r, MAGIC)?;
        format::check_version(format::read_u16(r)?, VERSION, "model")?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let e1 = format::read_u32(r)? as usize;
        let e2 = format::read_u32(r)? as usize;
        let arch = match tag[0] {
            0 => Architecture::Mlp3 {
                hidden1: e1,
                hidden2: e2,
            },
            1 => Architecture::Conv2 {
                channels1: e1,
                channels2: e2,
            },
            t => return Err(Error::Format(format!("unknown architecture tag {}", t))),
        };
        let input_shape = [
            format::read_u32(r)? as usize,
            format::read_u32(r)? as usize,
            format::read_u32(r)? as usize,
        ];
        let mut loss_tag = [0u8; 1];
        r.read_exact(&mut loss_tag)?;
        let loss_kind = match loss_tag[0] {
            0 => LossKind::Softmax,
            1 => LossKind::MarginCosine,
            t => return Err(Error::Format(format!("unknown loss tag {}", t))),
        };
        let feature_dim = format::read_u32(r)? as usize;
        let n_classes = format::read_u32(r)? as usize;
        let train_seed = format::read_u64(r)?;
        let n_params = format::read_u64(r)? as usize;
        let layout = Layout::new(&arch, input_shape, feature_dim, n_classes);
        if n_params != layout.total {
            return Err(Error::Format(format!(
                "parameter count {} does not match architecture ({} expected)",
                n_params, layout.total
            )));
        }
        let params = format::read_f64_vec(r, n_params)?;
        Ok(EmbeddingModel {
            arch,
            input_shape,
            feature_dim,
            n_classes,
            loss_kind,
            train_seed,
            params: Tensor::new(vec![n_params], params)
                .map_err(|e| Error::Format(format!("corrupt parameters: {}", e)))?,
            layout,
        })
    }

    /// SHA-256 of the serialized model, used in mask fingerprints.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut bytes = Vec::new();
        self.write(&mut bytes).expect("in-memory write cannot fail");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        hasher.finalize().into()
    }
}

/// Stochastic dropout view over a base model. Each embed or gradient call
/// draws a fresh pattern from the view's private seeded stream, so a view
/// must not be shared across concurrent callers.
pub struct DropoutView<'a> {
    model: &'a EmbeddingModel,
    p: f64,
    rng: ChaCha8Rng,
}

impl<'a> DropoutView<'a> {
    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn sample_pattern(&mut self) -> DropoutPattern {
        self.model.sample_dropout_pattern(self.p, &mut self.rng)
    }

    pub fn embed(&mut self, x: &Tensor) -> Result<Vec<f64>> {
        if self.p == 0.0 {
            return self.model.embed(x);
        }
        let pattern = self.sample_pattern();
        self.model.embed_masked(x, &pattern)
    }

    pub fn distance_loss(&mut self, x_adv: &Tensor, target_point: &[f64]) -> Result<f64> {
        if self.p == 0.0 {
            return self.model.distance_loss(x_adv, target_point);
        }
        let pattern = self.sample_pattern();
        self.model.distance_loss_masked(x_adv, target_point, &pattern)
    }

    pub fn input_gradient(&mut self, x_adv: &Tensor, target_point: &[f64]) -> Result<Tensor> {
        if self.p == 0.0 {
            return self.model.input_gradient(x_adv, target_point);
        }
        let pattern = self.sample_pattern();
        self.model.input_gradient_masked(x_adv, target_point, &pattern)
    }
}

fn init_params(
    arch: &Architecture,
    input_shape: [usize; 3],
    feature_dim: usize,
    layout: &Layout,
    seed: u64,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let fans = Layout::fan_ins(arch, input_shape, feature_dim);
    let mut params = vec![0.0; layout.total];
    // ReLU stages get He init, linear heads get Xavier; biases stay zero.
    let stds = [
        (2.0 / fans[0] as f64).sqrt(),
        (2.0 / fans[1] as f64).sqrt(),
        (1.0 / fans[2] as f64).sqrt(),
        (1.0 / fans[3] as f64).sqrt(),
    ];
    for (seg, std) in [
        (layout.w1, stds[0]),
        (layout.w2, stds[1]),
        (layout.w3, stds[2]),
        (layout.wc, stds[3]),
    ] {
        for v in &mut params[seg.off..seg.off + seg.len] {
            *v = normal.sample(&mut rng) * std;
        }
    }
    params
}
