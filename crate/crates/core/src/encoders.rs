//! Question and image encoders.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token and answer vocabularies.
///
/// Token ids are dense in `0..len()`, with `PAD = 0` and `UNK = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    answers: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    tokens: BTreeMap<String, usize>,
    answers: Vec<String>,
}

/// Lowercases, turns punctuation into separators and splits on whitespace.
pub fn words(question: &str) -> Vec<String> {
    question
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

impl Vocabulary {
    /// Builds a vocabulary from training questions. Tokens are ordered by
    /// descending frequency, ties broken lexicographically.
    pub fn build<'a>(
        questions: impl IntoIterator<Item = &'a str>,
        answers: &[String],
    ) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for q in questions {
            for w in words(q) {
                *counts.entry(w).or_default() += 1;
            }
        }
        counts.remove(PAD_TOKEN);
        counts.remove(UNK_TOKEN);
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = [PAD_TOKEN.to_owned(), UNK_TOKEN.to_owned()]
            .into_iter()
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_parts(tokens, answers.to_vec())
    }

    fn from_parts(tokens: Vec<String>, answers: Vec<String>) -> Result<Self> {
        if answers.is_empty() {
            return Err(Error::Config("answer set is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = answers.iter().find(|a| !seen.insert(a.as_str())) {
            return Err(Error::Config(format!("duplicate answer `{dup}`")));
        }
        if tokens.first().map(String::as_str) != Some(PAD_TOKEN)
            || tokens.get(1).map(String::as_str) != Some(UNK_TOKEN)
        {
            return Err(Error::Config("vocabulary must start with <pad>, <unk>".into()));
        }
        let index: HashMap<String, usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        if index.len() != tokens.len() {
            return Err(Error::Config("duplicate token in vocabulary".into()));
        }
        Ok(Self {
            tokens,
            index,
            answers,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn answer_id(&self, label: &str) -> Option<usize> {
        self.answers.iter().position(|a| a == label)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabularyFile {
            tokens: self
                .tokens
                .iter()
                .enumerate()
                .map(|(i, t)| (t.clone(), i))
                .collect(),
            answers: self.answers.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabularyFile = serde_json::from_str(text)?;
        let mut tokens = vec![String::new(); file.tokens.len()];
        for (t, i) in file.tokens {
            let slot = tokens
                .get_mut(i)
                .ok_or_else(|| Error::Config(format!("token id {i} is not dense")))?;
            *slot = t;
        }
        Self::from_parts(tokens, file.answers)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = self.to_json().expect("vocabulary serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Maps a question to token ids; unknown words map to [`UNK`].
pub fn tokenize(question: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let ids: Vec<usize> = words(question).iter().map(|w| vocab.id(w)).collect();
    if ids.is_empty() {
        return Err(Error::invalid(format!("empty question {question:?}")));
    }
    Ok(ids)
}

/// Left-pads with [`PAD`] (or truncates the tail) to exactly `len` ids.
pub fn pad_to(ids: &[usize], len: usize) -> Vec<usize> {
    if ids.len() >= len {
        ids[..len].to_vec()
    } else {
        let mut out = vec![PAD; len - ids.len()];
        out.extend_from_slice(ids);
        out
    }
}

/// Uniform in `±sqrt(6 / fan_in)`, i.e. standard deviation `sqrt(2 / fan_in)`.
pub fn kaiming_uniform<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = kaiming_bound(fan_in);
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

pub fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Single-layer unidirectional LSTM over word embeddings. Gate order in the
/// fused weight is input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct QuestionEncoder {
    pub embedding: ParamId,
    pub weight: ParamId,
    pub bias: ParamId,
    pub embed_dim: usize,
    pub hidden: usize,
}

impl QuestionEncoder {
    pub const EMBEDDING: &'static str = "question.embedding";
    pub const WEIGHT: &'static str = "question.lstm.weight";
    pub const BIAS: &'static str = "question.lstm.bias";

    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        vocab_size: usize,
        embed_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let emb = Tensor::from_fn(vec![vocab_size, embed_dim], |_| rng.gen_range(-0.1..0.1));
        let fan_in = embed_dim + hidden;
        let w = kaiming_uniform(vec![fan_in, 4 * hidden], fan_in, rng);
        Self {
            embedding: store.insert(Self::EMBEDDING, emb, true),
            weight: store.insert(Self::WEIGHT, w, true),
            bias: store.insert(Self::BIAS, Tensor::zeros(vec![4 * hidden]), true),
            embed_dim,
            hidden,
        }
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let embedding = store.id(Self::EMBEDDING)?;
        let weight = store.id(Self::WEIGHT)?;
        let bias = store.id(Self::BIAS)?;
        let embed_dim = store.value(embedding).shape()[1];
        let hidden = store.value(bias).shape()[0] / 4;
        if store.value(weight).shape() != [embed_dim + hidden, 4 * hidden] {
            return Err(Error::Config("lstm weight shape inconsistent".into()));
        }
        Ok(Self {
            embedding,
            weight,
            bias,
            embed_dim,
            hidden,
        })
    }

    /// Final hidden states `[B, Q]` for a batch of equal-length id sequences.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, ids: &[Vec<usize>]) -> Result<Var> {
        let len = ids.first().map(Vec::len).unwrap_or(0);
        if len == 0 {
            return Err(Error::invalid("encode_question: empty sequence"));
        }
        if ids.iter().any(|s| s.len() != len) {
            return Err(Error::invalid("encode_question: ragged batch"));
        }
        let b = ids.len();
        let q = self.hidden;
        let emb = bound.var(self.embedding);
        let w = bound.var(self.weight);
        let bias = bound.var(self.bias);
        let mut h = tape.constant(Tensor::zeros(vec![b, q]));
        let mut c = tape.constant(Tensor::zeros(vec![b, q]));
        for t in 0..len {
            let step: Vec<usize> = ids.iter().map(|s| s[t]).collect();
            let x = tape.gather_rows(emb, &step)?;
            let xh = tape.concat(&[x, h], 1)?;
            let z = tape.matmul(xh, w)?;
            let z = tape.add_bias(z, bias)?;
            let zi = tape.slice(z, 1, 0, q)?;
            let zf = tape.slice(z, 1, q, q)?;
            let zg = tape.slice(z, 1, 2 * q, q)?;
            let zo = tape.slice(z, 1, 3 * q, q)?;
            let i = tape.sigmoid(zi);
            let f = tape.sigmoid(zf);
            let g = tape.tanh(zg);
            let o = tape.sigmoid(zo);
            let keep = tape.mul(f, c)?;
            let write = tape.mul(i, g)?;
            c = tape.add(keep, write)?;
            let tc = tape.tanh(c);
            h = tape.mul(o, tc)?;
        }
        Ok(h)
    }
}

/// Encodes one id sequence to its embedding `q̂` of shape `[Q]`.
pub fn encode_question(ids: &[usize], store: &ParamStore, enc: &QuestionEncoder) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let h = enc.forward(&mut tape, &bound, &[ids.to_vec()])?;
    tape.value(h).reshape(vec![enc.hidden])
}

/// Stack of `conv3x3 -> ReLU -> 2x max-pool` blocks.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub layers: Vec<(ParamId, ParamId)>,
    pub channels: Vec<usize>,
}

/// Channel widths per block: doubling from 8, the last block at `out`.
pub fn encoder_widths(depth: usize, out: usize) -> Vec<usize> {
    (0..depth)
        .map(|i| {
            if i + 1 == depth {
                out
            } else {
                (8usize << i).min(out)
            }
        })
        .collect()
}

impl ImageEncoder {
    pub const IN_CHANNELS: usize = 3;

    fn names(i: usize) -> (String, String) {
        (format!("image.conv{i}.weight"), format!("image.conv{i}.bias"))
    }

    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        depth: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        let mut channels = vec![Self::IN_CHANNELS];
        channels.extend(encoder_widths(depth, out_channels));
        let layers = (0..depth)
            .map(|i| {
                let (cin, cout) = (channels[i], channels[i + 1]);
                let (wn, bn) = Self::names(i);
                let w = kaiming_uniform(vec![cout, cin, 3, 3], cin * 9, rng);
                (
                    store.insert(wn, w, true),
                    store.insert(bn, Tensor::zeros(vec![cout]), true),
                )
            })
            .collect();
        Self { layers, channels }
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let mut layers = Vec::new();
        let mut channels = vec![Self::IN_CHANNELS];
        for i in 0.. {
            let (wn, bn) = Self::names(i);
            let Ok(w) = store.id(&wn) else { break };
            let b = store.id(&bn)?;
            let shape = store.value(w).shape();
            if shape[1] != *channels.last().unwrap() {
                return Err(Error::Config(format!("{wn}: input channels mismatch")));
            }
            channels.push(shape[0]);
            layers.push((w, b));
        }
        Ok(Self { layers, channels })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().unwrap()
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }

    /// Feature-map shape `[C, H, W]` for `size x size` inputs.
    pub fn output_shape(&self, size: usize) -> Result<[usize; 3]> {
        let f = 1usize << self.depth();
        if size == 0 || size % f != 0 {
            return Err(Error::invalid(format!(
                "image size {size} not divisible by 2^{}",
                self.depth()
            )));
        }
        Ok([self.out_channels(), size / f, size / f])
    }

    /// `[B, 3, S, S] -> [B, C, S / 2^depth, S / 2^depth]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, images: Var) -> Result<Var> {
        let s = tape.shape(images).to_vec();
        if s.len() != 4 || s[1] != Self::IN_CHANNELS || s[2] != s[3] {
            return Err(Error::ShapeMismatch {
                op: "encode_image",
                lhs: s,
                rhs: vec![0, Self::IN_CHANNELS, 0, 0],
            });
        }
        self.output_shape(s[2])?;
        let mut x = images;
        for &(w, b) in &self.layers {
            x = tape.conv2d(x, bound.var(w), Some(bound.var(b)), 1, 1)?;
            x = tape.relu(x);
            x = tape.max_pool(x, 2)?;
        }
        Ok(x)
    }
}

/// Encodes one `[3, S, S]` image to its feature map `[C, H, W]`.
pub fn encode_image(image: &Tensor, store: &ParamStore, enc: &ImageEncoder) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let x = tape.constant(image.reshape(shape)?);
    let y = enc.forward(&mut tape, &bound, x)?;
    let out = tape.value(y);
    out.reshape(out.shape()[1..].to_vec())
}
