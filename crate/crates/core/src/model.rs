//! Full localized VQA model and the region-encoding baselines.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    downsample_mask, masked_pool, AttentionMap, LocalizedAttention, RegionMask, SoftmaxAxis,
};
use crate::encoders::{kaiming_uniform, pad_to, tokenize, ImageEncoder, QuestionEncoder, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::{load_checkpoint, save_checkpoint, Bound, ParamId, ParamStore, Tape, Tensor, Var};

/// How region information reaches the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    NoMask,
    RegionInText,
    CropRegion,
    DrawRegion,
    #[default]
    Ours,
}

impl Variant {
    /// All variants in reporting order.
    pub const ALL: [Variant; 5] = [
        Variant::NoMask,
        Variant::RegionInText,
        Variant::CropRegion,
        Variant::DrawRegion,
        Variant::Ours,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::NoMask => "no_mask",
            Variant::RegionInText => "region_in_text",
            Variant::CropRegion => "crop_region",
            Variant::DrawRegion => "draw_region",
            Variant::Ours => "ours",
        }
    }

    /// Whether the variant changes pixels as a function of the region.
    pub fn edits_pixels(self) -> bool {
        matches!(self, Variant::CropRegion | Variant::DrawRegion)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant `{s}` (expected one of no_mask, region_in_text, crop_region, draw_region, ours)"
                ))
            })
    }
}

/// Architecture hyperparameters. `H = W = image_size / 2^depth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub depth: usize,
    pub channels: usize,
    pub proj: usize,
    pub question_dim: usize,
    pub embed_dim: usize,
    pub glimpses: usize,
    pub hidden: usize,
    pub num_answers: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub variant: Variant,
    pub softmax_axis: SoftmaxAxis,
    pub freeze_image_encoder: bool,
    pub max_len: usize,
    pub grid_n: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            depth: 3,
            channels: 32,
            proj: 64,
            question_dim: 64,
            embed_dim: 32,
            glimpses: 2,
            hidden: 128,
            num_answers: 2,
            vocab_size: 64,
            dropout: 0.25,
            variant: Variant::Ours,
            softmax_axis: SoftmaxAxis::Spatial,
            freeze_image_encoder: true,
            max_len: 16,
            grid_n: 8,
        }
    }
}

impl ModelConfig {
    /// Full-scale architecture (448 px input, 2048 x 14 x 14 features).
    pub fn full_scale() -> Self {
        Self {
            image_size: 448,
            depth: 5,
            channels: 2048,
            proj: 512,
            question_dim: 1024,
            embed_dim: 300,
            hidden: 1024,
            ..Self::default()
        }
    }

    /// Spatial side of the feature map.
    pub fn grid(&self) -> usize {
        self.image_size >> self.depth
    }

    /// Length of the classifier input.
    pub fn classifier_input(&self) -> usize {
        self.channels * self.glimpses + self.question_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("depth", self.depth),
            ("channels", self.channels),
            ("proj", self.proj),
            ("question_dim", self.question_dim),
            ("embed_dim", self.embed_dim),
            ("glimpses", self.glimpses),
            ("hidden", self.hidden),
            ("num_answers", self.num_answers),
            ("max_len", self.max_len),
            ("grid_n", self.grid_n),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.depth >= usize::BITS as usize || self.image_size % (1 << self.depth) != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by 2^{}",
                self.image_size, self.depth
            )));
        }
        if self.image_size % self.grid_n != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by grid_n {}",
                self.image_size, self.grid_n
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Probabilities over the answer set and the arg-max answer.
#[derive(Clone, Debug, PartialEq)]
pub struct AnswerDistribution {
    pub probs: Vec<f64>,
    pub predicted: usize,
}

impl AnswerDistribution {
    /// The first maximal entry wins ties.
    pub fn new(probs: Vec<f64>) -> Self {
        let predicted = probs
            .iter()
            .enumerate()
            .fold(0, |best, (i, &p)| if p > probs[best] { i } else { best });
        Self { probs, predicted }
    }
}

/// Model input after the variant's region encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantInput {
    pub image: Tensor,
    pub question: String,
    pub mask: RegionMask,
}

/// Region corners snapped outward to a `grid_n x grid_n` grid, as half-open
/// pixel bounds `(r0, c0, r1, c1)`.
pub fn snapped_corners(mask: &RegionMask, grid_n: usize) -> Result<(usize, usize, usize, usize)> {
    let (r0, c0, r1, c1) = mask
        .bbox()
        .ok_or_else(|| Error::invalid("region mask is empty"))?;
    if grid_n == 0 || mask.size() % grid_n != 0 {
        return Err(Error::invalid(format!(
            "image size {} not divisible by grid_n {grid_n}",
            mask.size()
        )));
    }
    let cell = mask.size() / grid_n;
    let down = |v: usize| v / cell * cell;
    let up = |v: usize| v.div_ceil(cell) * cell;
    Ok((down(r0), down(c0), up(r1), up(c1)))
}

/// Appends the snapped region corners to a question.
pub fn region_text(question: &str, mask: &RegionMask, grid_n: usize) -> Result<String> {
    let (r0, c0, r1, c1) = snapped_corners(mask, grid_n)?;
    let stem = question.trim_end().trim_end_matches('?').trim_end();
    Ok(format!("{stem} in ({r0},{c0}) to ({r1},{c1})?"))
}

/// Pixels of `mask` within Chebyshev distance 2 of a pixel outside it (the
/// image border counts as outside).
pub fn boundary_band(mask: &RegionMask) -> RegionMask {
    const WIDTH: isize = 2;
    let s = mask.size() as isize;
    RegionMask::from_fn(mask.size(), |r, c| {
        if !mask.get(r, c) {
            return false;
        }
        for dr in -WIDTH..=WIDTH {
            for dc in -WIDTH..=WIDTH {
                let (y, x) = (r as isize + dr, c as isize + dc);
                if y < 0 || x < 0 || y >= s || x >= s || !mask.get(y as usize, x as usize) {
                    return true;
                }
            }
        }
        false
    })
}

fn check_image(image: &Tensor, mask: &RegionMask) -> Result<usize> {
    let s = mask.size();
    if image.shape() != [3, s, s] {
        return Err(Error::ShapeMismatch {
            op: "build_variant_input",
            lhs: image.shape().to_vec(),
            rhs: vec![3, s, s],
        });
    }
    Ok(s)
}

/// `x ⊙ m` per pixel.
pub fn crop_image(image: &Tensor, mask: &RegionMask) -> Result<Tensor> {
    let s = check_image(image, mask)?;
    let mut out = image.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if mask.bits()[i % (s * s)] == 0 {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Paints the region's 2-pixel inner boundary pure red.
pub fn draw_region(image: &Tensor, mask: &RegionMask) -> Result<Tensor> {
    let s = check_image(image, mask)?;
    let band = boundary_band(mask);
    let mut out = image.clone();
    let data = out.data_mut();
    for p in 0..s * s {
        if band.bits()[p] != 0 {
            data[p] = 1.0;
            data[s * s + p] = 0.0;
            data[2 * s * s + p] = 0.0;
        }
    }
    Ok(out)
}

/// Encodes the region according to `variant`. Every variant except `ours`
/// replaces the mask by the full image.
pub fn build_variant_input(
    variant: Variant,
    image: &Tensor,
    question: &str,
    mask: &RegionMask,
    grid_n: usize,
) -> Result<VariantInput> {
    check_image(image, mask)?;
    if mask.is_empty() {
        return Err(Error::invalid("region mask is empty"));
    }
    let full = RegionMask::full(mask.size());
    Ok(match variant {
        Variant::Ours => VariantInput {
            image: image.clone(),
            question: question.to_owned(),
            mask: mask.clone(),
        },
        Variant::NoMask => VariantInput {
            image: image.clone(),
            question: question.to_owned(),
            mask: full,
        },
        Variant::RegionInText => VariantInput {
            image: image.clone(),
            question: region_text(question, mask, grid_n)?,
            mask: full,
        },
        Variant::CropRegion => VariantInput {
            image: crop_image(image, mask)?,
            question: question.to_owned(),
            mask: full,
        },
        Variant::DrawRegion => VariantInput {
            image: draw_region(image, mask)?,
            question: question.to_owned(),
            mask: full,
        },
    })
}

/// One-hidden-layer MLP with dropout on the input of each linear map.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub dropout: f64,
}

impl Classifier {
    pub const NAMES: [&'static str; 4] = [
        "classifier.w1",
        "classifier.b1",
        "classifier.w2",
        "classifier.b2",
    ];

    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        input: usize,
        hidden: usize,
        outputs: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let w1 = kaiming_uniform(vec![input, hidden], input, rng);
        let w2 = kaiming_uniform(vec![hidden, outputs], hidden, rng);
        Self {
            w1: store.insert(Self::NAMES[0], w1, true),
            b1: store.insert(Self::NAMES[1], Tensor::zeros(vec![hidden]), true),
            w2: store.insert(Self::NAMES[2], w2, true),
            b2: store.insert(Self::NAMES[3], Tensor::zeros(vec![outputs]), true),
            dropout,
        }
    }

    pub fn from_store(store: &ParamStore, dropout: f64) -> Result<Self> {
        Ok(Self {
            w1: store.id(Self::NAMES[0])?,
            b1: store.id(Self::NAMES[1])?,
            w2: store.id(Self::NAMES[2])?,
            b2: store.id(Self::NAMES[3])?,
            dropout,
        })
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        input: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let x = tape.dropout(input, self.dropout, train, rng)?;
        let h = tape.matmul(x, bound.var(self.w1))?;
        let h = tape.add_bias(h, bound.var(self.b1))?;
        let h = tape.relu(h);
        let h = tape.dropout(h, self.dropout, train, rng)?;
        let y = tape.matmul(h, bound.var(self.w2))?;
        tape.add_bias(y, bound.var(self.b2))
    }
}

/// Intermediate values of one forward pass.
pub struct ForwardOutput {
    pub logits: Var,
    pub attention: Var,
    pub pooled: Var,
    pub question: Var,
}

/// A variant-encoded sample ready for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedInput {
    pub image: Tensor,
    pub ids: Vec<usize>,
    pub mask: Tensor,
}

/// Answer distribution and glimpse maps for one sample.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub distribution: AnswerDistribution,
    pub attention: AttentionMap,
}

/// Contents of a checkpoint's `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub vocab_hash: String,
    pub variant: Variant,
}

pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.json";

/// Encoders, localized attention and classifier sharing one parameter store.
#[derive(Clone, Debug)]
pub struct VqaModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub question: QuestionEncoder,
    pub image: ImageEncoder,
    pub attention: LocalizedAttention,
    pub classifier: Classifier,
}

impl VqaModel {
    /// Deterministic initialization from `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let image = ImageEncoder::init(&mut store, config.depth, config.channels, &mut rng);
        let question = QuestionEncoder::init(
            &mut store,
            config.vocab_size,
            config.embed_dim,
            config.question_dim,
            &mut rng,
        );
        let attention = LocalizedAttention::init(
            &mut store,
            config.channels,
            config.proj,
            config.question_dim,
            config.glimpses,
            config.dropout,
            config.softmax_axis,
            &mut rng,
        );
        let classifier = Classifier::init(
            &mut store,
            config.classifier_input(),
            config.hidden,
            config.num_answers,
            config.dropout,
            &mut rng,
        );
        let mut model = Self {
            config: config.clone(),
            store,
            question,
            image,
            attention,
            classifier,
        };
        model.apply_freeze();
        Ok(model)
    }

    /// Rebuilds a model around loaded parameters, checking every shape.
    pub fn from_store(config: &ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = Self::init(config, 0)?;
        for p in reference.store.iter() {
            let loaded = store
                .by_name(&p.name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks `{}`", p.name)))?;
            if loaded.value.shape() != p.value.shape() {
                return Err(Error::Config(format!(
                    "`{}` has shape {:?}, config implies {:?}",
                    p.name,
                    loaded.value.shape(),
                    p.value.shape()
                )));
            }
        }
        if store.len() != reference.store.len() {
            return Err(Error::Config("checkpoint has unexpected parameters".into()));
        }
        let mut model = Self {
            config: config.clone(),
            question: QuestionEncoder::from_store(&store)?,
            image: ImageEncoder::from_store(&store)?,
            attention: LocalizedAttention::from_store(&store, config.dropout, config.softmax_axis)?,
            classifier: Classifier::from_store(&store, config.dropout)?,
            store,
        };
        model.apply_freeze();
        Ok(model)
    }

    fn apply_freeze(&mut self) {
        let ids: Vec<ParamId> = self.image.params().collect();
        for id in ids {
            self.store.set_trainable(id, !self.config.freeze_image_encoder);
        }
    }

    /// `[B, 3, S, S] -> [B, C, H, W]`.
    pub fn encode_images(&self, tape: &mut Tape, bound: &Bound, images: Var) -> Result<Var> {
        self.image.forward(tape, bound, images)
    }

    /// Network from feature maps `[B, C, H, W]`, padded ids and downsampled
    /// masks `[B, H, W]` to logits `[B, |A|]`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        features: Var,
        ids: &[Vec<usize>],
        masks: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let question = self.question.forward(tape, bound, ids)?;
        let attention = self
            .attention
            .attention_map(tape, bound, features, question, train, rng)?;
        let pooled = masked_pool(tape, attention, features, masks)?;
        let joint = tape.concat(&[pooled, question], 1)?;
        let logits = self.classifier.forward(tape, bound, joint, train, rng)?;
        Ok(ForwardOutput {
            logits,
            attention,
            pooled,
            question,
        })
    }

    /// Full pipeline from raw pixels `[B, 3, S, S]` and full-resolution
    /// masks. The variant's pixel edit is applied on the tape, so gradients
    /// with respect to the raw pixels are available.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_pixels<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        images: Var,
        questions: &[&str],
        masks: &[RegionMask],
        vocab: &Vocabulary,
        train: bool,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let shape = tape.shape(images).to_vec();
        let s = self.config.image_size;
        if shape.len() != 4 || shape[1..] != [3, s, s] || shape[0] != masks.len() {
            return Err(Error::ShapeMismatch {
                op: "forward_pixels",
                lhs: shape,
                rhs: vec![masks.len(), 3, s, s],
            });
        }
        if questions.len() != masks.len() {
            return Err(Error::invalid("questions and masks differ in count"));
        }
        let b = masks.len();
        let variant = self.config.variant;
        let images = match variant {
            Variant::CropRegion => {
                let keep = Tensor::from_fn(vec![b, 3, s, s], |i| {
                    masks[i / (3 * s * s)].bits()[i % (s * s)] as f64
                });
                let keep = tape.constant(keep);
                tape.mul(images, keep)?
            }
            Variant::DrawRegion => {
                let bands: Vec<RegionMask> = masks.iter().map(boundary_band).collect();
                let band_at = |i: usize| bands[i / (3 * s * s)].bits()[i % (s * s)] as f64;
                let keep = tape.constant(Tensor::from_fn(vec![b, 3, s, s], |i| 1.0 - band_at(i)));
                let paint = tape.constant(Tensor::from_fn(vec![b, 3, s, s], |i| {
                    let red = (i / (s * s)) % 3 == 0;
                    if red {
                        band_at(i)
                    } else {
                        0.0
                    }
                }));
                let kept = tape.mul(images, keep)?;
                tape.add(kept, paint)?
            }
            _ => images,
        };
        let features = self.encode_images(tape, bound, images)?;
        let mut ids = Vec::with_capacity(b);
        let mut down = Vec::with_capacity(b);
        for (q, m) in questions.iter().zip(masks) {
            let text = match variant {
                Variant::RegionInText => region_text(q, m, self.config.grid_n)?,
                _ => (*q).to_owned(),
            };
            ids.push(pad_to(&tokenize(&text, vocab)?, self.config.max_len));
            let m = if variant == Variant::Ours {
                m.clone()
            } else {
                RegionMask::full(s)
            };
            down.push(downsample_mask(&m, self.config.grid(), self.config.grid())?);
        }
        let refs: Vec<&Tensor> = down.iter().collect();
        let masks = tape.constant(Tensor::stack(&refs)?);
        self.forward(tape, bound, features, &ids, masks, train, rng)
    }

    fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        if vocab.len() != self.config.vocab_size || vocab.answers().len() != self.config.num_answers {
            return Err(Error::Config(format!(
                "vocabulary ({} tokens, {} answers) does not match the model ({} tokens, {} answers)",
                vocab.len(),
                vocab.answers().len(),
                self.config.vocab_size,
                self.config.num_answers
            )));
        }
        Ok(())
    }

    /// Applies the configured variant and tokenizes.
    pub fn prepare(
        &self,
        vocab: &Vocabulary,
        image: &Tensor,
        question: &str,
        mask: &RegionMask,
    ) -> Result<PreparedInput> {
        self.check_vocab(vocab)?;
        if mask.size() != self.config.image_size {
            return Err(Error::invalid(format!(
                "mask size {} differs from image_size {}",
                mask.size(),
                self.config.image_size
            )));
        }
        let input = build_variant_input(self.config.variant, image, question, mask, self.config.grid_n)?;
        let ids = pad_to(&tokenize(&input.question, vocab)?, self.config.max_len);
        let g = self.config.grid();
        Ok(PreparedInput {
            image: input.image,
            ids,
            mask: downsample_mask(&input.mask, g, g)?,
        })
    }

    /// Eval-mode predictions for prepared inputs.
    pub fn predict_prepared(&self, inputs: &[PreparedInput]) -> Result<Vec<Prediction>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let images: Vec<&Tensor> = inputs.iter().map(|p| &p.image).collect();
        let images = tape.constant(Tensor::stack(&images)?);
        let features = self.encode_images(&mut tape, &bound, images)?;
        self.predict_features(&mut tape, &bound, features, inputs)
    }

    /// Eval-mode predictions from precomputed feature maps `[B, C, H, W]`.
    pub fn predict_features(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        features: Var,
        inputs: &[PreparedInput],
    ) -> Result<Vec<Prediction>> {
        let ids: Vec<Vec<usize>> = inputs.iter().map(|p| p.ids.clone()).collect();
        let masks: Vec<&Tensor> = inputs.iter().map(|p| &p.mask).collect();
        let masks = tape.constant(Tensor::stack(&masks)?);
        // dropout is inactive in eval mode, so the generator is never drawn from
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(tape, bound, features, &ids, masks, false, &mut rng)?;
        let probs = tape.softmax(out.logits, 1)?;
        let probs = tape.value(probs);
        let att = tape.value(out.attention);
        let a = self.config.num_answers;
        let per = att.numel() / inputs.len();
        let att_shape = att.shape()[1..].to_vec();
        (0..inputs.len())
            .map(|i| {
                let dist = AnswerDistribution::new(probs.data()[i * a..(i + 1) * a].to_vec());
                let map = Tensor::new(att_shape.clone(), att.data()[i * per..(i + 1) * per].to_vec())?;
                Ok(Prediction {
                    distribution: dist,
                    attention: AttentionMap::new_unchecked(map),
                })
            })
            .collect()
    }

    /// Answer distribution for one raw sample.
    pub fn predict(
        &self,
        vocab: &Vocabulary,
        image: &Tensor,
        question: &str,
        mask: &RegionMask,
    ) -> Result<Prediction> {
        let input = self.prepare(vocab, image, question, mask)?;
        Ok(self.predict_prepared(&[input])?.remove(0))
    }

    /// Writes the checkpoint, `config.json` and `vocab.json` into `dir`.
    pub fn save(&self, dir: &Path, vocab: &Vocabulary) -> Result<()> {
        self.check_vocab(vocab)?;
        save_checkpoint(&self.store, dir)?;
        let cfg = CheckpointConfig {
            model: self.config.clone(),
            vocab_hash: vocab.hash(),
            variant: self.config.variant,
        };
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, serde_json::to_string_pretty(&cfg)?).map_err(|e| Error::io(&path, e))?;
        let path = dir.join(VOCAB_FILE);
        fs::write(&path, vocab.to_json()?).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    /// Loads a model saved by [`VqaModel::save`], verifying the vocabulary.
    pub fn load(dir: &Path) -> Result<(Self, Vocabulary)> {
        let path = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let cfg: CheckpointConfig = serde_json::from_str(&text)?;
        let path = dir.join(VOCAB_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let vocab = Vocabulary::from_json(&text)?;
        if vocab.hash() != cfg.vocab_hash {
            return Err(Error::Config(format!(
                "{}: vocabulary hash does not match the checkpoint",
                dir.display()
            )));
        }
        let model = Self::from_store(&cfg.model, load_checkpoint(dir)?)?;
        model.check_vocab(&vocab)?;
        Ok((model, vocab))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            depth: 2,
            channels: 4,
            proj: 6,
            question_dim: 5,
            embed_dim: 3,
            hidden: 7,
            vocab_size: 20,
            grid_n: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("foo".parse::<Variant>().is_err());
    }

    #[test]
    fn snapping_is_outward() {
        let m = RegionMask::from_fn(64, |r, c| (5..20).contains(&r) && (10..33).contains(&c));
        assert_eq!(snapped_corners(&m, 8).unwrap(), (0, 8, 24, 40));
        let q = region_text("is there a circle in this region?", &m, 8).unwrap();
        assert_eq!(q, "is there a circle in this region in (0,8) to (24,40)?");
        let aligned = RegionMask::from_fn(64, |r, c| (8..16).contains(&r) && (16..24).contains(&c));
        assert_eq!(snapped_corners(&aligned, 8).unwrap(), (8, 16, 16, 24));
    }

    #[test]
    fn boundary_band_is_two_pixels() {
        let m = RegionMask::from_fn(16, |r, c| (2..10).contains(&r) && (3..12).contains(&c));
        let band = boundary_band(&m);
        assert!(band.get(2, 5) && band.get(3, 5) && !band.get(4, 5));
        assert!(band.get(9, 5) && band.get(8, 5) && !band.get(7, 5));
        assert_eq!(band.count(), 8 * 9 - 4 * 5);
        let edge = boundary_band(&RegionMask::full(8));
        assert!(edge.get(0, 4) && edge.get(1, 4) && !edge.get(2, 4));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig { image_size: 60, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { dropout: 1.0, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { glimpses: 0, ..ModelConfig::default() }.validate().is_err());
        assert_eq!(ModelConfig::default().grid(), 8);
        assert_eq!(ModelConfig::full_scale().grid(), 14);
    }

    #[test]
    fn freeze_flag_controls_image_params() {
        let frozen = VqaModel::init(&small(), 1).unwrap();
        let trainable = VqaModel::init(
            &ModelConfig {
                freeze_image_encoder: false,
                ..small()
            },
            1,
        )
        .unwrap();
        for id in frozen.image.params() {
            assert!(!frozen.store.get(id).trainable);
            assert!(trainable.store.get(id).trainable);
        }
        assert!(frozen.store.get(frozen.classifier.w1).trainable);
    }

    #[test]
    fn from_store_rejects_shape_mismatch() {
        let model = VqaModel::init(&small(), 3).unwrap();
        let wider = ModelConfig { hidden: 9, ..small() };
        assert!(VqaModel::from_store(&wider, model.store.clone()).is_err());
        assert!(VqaModel::from_store(&small(), model.store).is_ok());
    }

    #[test]
    fn distribution_argmax() {
        let d = AnswerDistribution::new(vec![0.2, 0.5, 0.3]);
        assert_eq!(d.predicted, 1);
        assert_eq!(AnswerDistribution::new(vec![0.5, 0.5]).predicted, 0);
    }
}
