//! Synthetic localized-VQA datasets: scenes, region questions, balancing,
//! file formats and loaders.

pub mod io;
mod questions;
mod scene;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use questions::{
    generate_questions, is_context_ambiguous, label, question_text, relabel, Question, Region,
    RegionKind, NO, YES,
};
pub use scene::{
    generate_scene, generate_twin, is_bar, Marker, Scene, SceneObject, ALPHA_BAR, BETA_BAR, CIRCLE,
    CLASSES, SQUARE, TRIANGLE,
};

use crate::attention::RegionMask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const STATS_FILE: &str = "stats.csv";
pub const DATA_CONFIG_FILE: &str = "data_config.json";

/// Generator settings. Fractions are relative to the image side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub image_size: usize,
    pub train_images: usize,
    pub val_images: usize,
    pub test_images: usize,
    pub questions_per_image: usize,
    pub region_kind: RegionKind,
    pub region_min: f64,
    pub region_max: f64,
    pub noise: f64,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub shape_min: f64,
    pub shape_max: f64,
    pub bar_pair: bool,
    pub bar_min: f64,
    pub bar_max: f64,
    pub bar_thickness: f64,
    pub marker_frac: f64,
    /// Probability that a bar question asks about the alpha bar rather than
    /// the beta bar.
    pub alpha_share: f64,
    /// Emit every scene together with its marker-swapped twin.
    pub twins: bool,
    pub max_retries: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            train_images: 400,
            val_images: 60,
            test_images: 120,
            questions_per_image: 8,
            region_kind: RegionKind::Rect,
            region_min: 0.1,
            region_max: 0.5,
            noise: 0.05,
            shapes_min: 1,
            shapes_max: 2,
            shape_min: 0.15,
            shape_max: 0.3,
            bar_pair: true,
            bar_min: 0.3,
            bar_max: 0.5,
            bar_thickness: 0.09,
            marker_frac: 0.125,
            alpha_share: 0.5,
            twins: true,
            max_retries: 500,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let frac = |name: &str, lo: f64, hi: f64| {
            if !(0.0 < lo && lo <= hi && hi <= 1.0) {
                Err(Error::Config(format!("{name} range [{lo}, {hi}] invalid")))
            } else {
                Ok(())
            }
        };
        frac("region", self.region_min, self.region_max)?;
        frac("shape", self.shape_min, self.shape_max)?;
        frac("bar", self.bar_min, self.bar_max)?;
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be at least 8".into()));
        }
        if self.shapes_min > self.shapes_max {
            return Err(Error::Config("shapes_min exceeds shapes_max".into()));
        }
        if self.questions_per_image % 2 != 0 {
            return Err(Error::Config("questions_per_image must be even".into()));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return Err(Error::Config("noise must lie in [0, 0.5)".into()));
        }
        if !(0.0 < self.marker_frac && self.marker_frac < 0.5) {
            return Err(Error::Config("marker_frac must lie in (0, 0.5)".into()));
        }
        if !(0.0 < self.alpha_share && self.alpha_share < 1.0) {
            return Err(Error::Config("alpha_share must lie in (0, 1)".into()));
        }
        if self.max_retries == 0 {
            return Err(Error::Config("max_retries must be positive".into()));
        }
        if self.twins
            && [self.train_images, self.val_images, self.test_images]
                .iter()
                .any(|n| n % 2 != 0)
        {
            return Err(Error::Config("image counts must be even when twins are on".into()));
        }
        Ok(())
    }

    pub fn total_images(&self) -> usize {
        self.train_images + self.val_images + self.test_images
    }
}

#[derive(Clone, Copy)]
pub(crate) enum Stream {
    Scene = 0,
    Marker = 1,
    Questions = 2,
    Balance = 3,
}

pub(crate) fn scene_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the `index`-th scene of a dataset.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    splitmix(seed ^ splitmix(index as u64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn manifest_file(self) -> String {
        format!("{}.jsonl", self.as_str())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

/// One manifest line. Paths are relative to the dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QARecord {
    pub image: String,
    pub mask: String,
    pub question: String,
    pub answer: String,
    pub class: String,
    pub region: Region,
    pub split: Split,
    pub image_id: usize,
    /// Bar question whose region avoids the marker and covers one bar.
    pub context: bool,
}

/// Result of [`balance`].
#[derive(Clone, Debug, PartialEq)]
pub struct BalanceOutcome {
    pub records: Vec<QARecord>,
    /// `(class, split)` strata removed because one answer was missing.
    pub dropped: Vec<(String, Split)>,
}

/// Equalizes yes and no counts within every `(class, split)` stratum by
/// down-sampling the majority, then shuffles. Deterministic in `seed`.
pub fn balance(records: Vec<QARecord>, seed: u64) -> BalanceOutcome {
    let mut rng = scene_rng(seed, Stream::Balance);
    let mut strata: BTreeMap<(Split, String), (Vec<QARecord>, Vec<QARecord>)> = BTreeMap::new();
    for r in records {
        let entry = strata.entry((r.split, r.class.clone())).or_default();
        if r.answer == YES {
            entry.0.push(r);
        } else {
            entry.1.push(r);
        }
    }
    let mut out = Vec::new();
    let mut dropped = Vec::new();
    for ((split, class), (mut yes, mut no)) in strata {
        if yes.is_empty() || no.is_empty() {
            log::warn!(
                "dropping stratum ({class}, {split}): {} yes / {} no",
                yes.len(),
                no.len()
            );
            dropped.push((class, split));
            continue;
        }
        let keep = yes.len().min(no.len());
        for side in [&mut yes, &mut no] {
            if side.len() > keep {
                side.shuffle(&mut rng);
                side.truncate(keep);
            }
        }
        out.extend(yes);
        out.extend(no);
    }
    out.shuffle(&mut rng);
    BalanceOutcome {
        records: out,
        dropped,
    }
}

/// A dataset held in memory: scenes indexed by image id plus the records.
#[derive(Clone, Debug)]
pub struct GeneratedDataset {
    pub config: DataConfig,
    pub seed: u64,
    pub scenes: Vec<Scene>,
    pub records: Vec<QARecord>,
}

pub fn image_path(id: usize) -> String {
    format!("images/{id:05}.ppm")
}

pub fn mask_path(id: usize, k: usize) -> String {
    format!("masks/{id:05}_{k:02}.pgm")
}

fn split_of(config: &DataConfig, id: usize) -> Split {
    if id < config.train_images {
        Split::Train
    } else if id < config.train_images + config.val_images {
        Split::Val
    } else {
        Split::Test
    }
}

/// Generates every scene and balanced question set for `seed`.
pub fn generate_dataset(config: &DataConfig, seed: u64) -> Result<GeneratedDataset> {
    config.validate()?;
    let mut scenes = Vec::with_capacity(config.total_images());
    let mut records = Vec::new();
    let mut base_questions: Vec<Question> = Vec::new();
    for id in 0..config.total_images() {
        let (base, twin) = if config.twins { (id / 2, id % 2 == 1) } else { (id, false) };
        let s = scene_seed(seed, base);
        let questions = if twin {
            let scene = generate_twin(s, config)?;
            let qs = base_questions.iter().map(|q| relabel(q, &scene)).collect();
            scenes.push(scene);
            qs
        } else {
            let scene = generate_scene(s, config)?;
            base_questions =
                generate_questions(&scene, config.questions_per_image, config.region_kind, s, config)?;
            scenes.push(scene);
            base_questions.clone()
        };
        let split = split_of(config, id);
        for (k, q) in questions.into_iter().enumerate() {
            records.push(QARecord {
                image: image_path(id),
                mask: mask_path(id, k),
                question: question_text(&q.class),
                answer: q.answer.to_owned(),
                class: q.class,
                region: q.region,
                split,
                image_id: id,
                context: q.context,
            });
        }
    }
    let outcome = balance(records, seed);
    Ok(GeneratedDataset {
        config: config.clone(),
        seed,
        scenes,
        records: outcome.records,
    })
}

/// A record with its decoded image and mask.
#[derive(Clone, Debug)]
pub struct Sample {
    pub record: QARecord,
    pub image: Arc<Tensor>,
    pub mask: RegionMask,
}

impl GeneratedDataset {
    pub fn split(&self, split: Split) -> Vec<&QARecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Samples of one split in manifest order.
    pub fn samples(&self, split: Split) -> Vec<Sample> {
        let images: Vec<Arc<Tensor>> = self.scenes.iter().map(|s| Arc::new(s.image.clone())).collect();
        self.split(split)
            .into_iter()
            .map(|r| Sample {
                record: r.clone(),
                image: images[r.image_id].clone(),
                mask: r.region.rasterize(self.config.image_size),
            })
            .collect()
    }

    /// Writes images, masks, one manifest per split, `stats.csv` and the
    /// generator settings.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (id, scene) in self.scenes.iter().enumerate() {
            io::write_ppm(&dir.join(image_path(id)), &scene.image)?;
        }
        for r in &self.records {
            io::write_mask(&dir.join(&r.mask), &r.region.rasterize(self.config.image_size))?;
        }
        for split in Split::ALL {
            let recs: Vec<&QARecord> = self.split(split);
            write_manifest(&dir.join(split.manifest_file()), recs)?;
        }
        io::write_file(&dir.join(STATS_FILE), stats_csv(&class_stats(&self.records)).as_bytes())?;
        #[derive(Serialize)]
        struct Settings<'a> {
            seed: u64,
            data: &'a DataConfig,
        }
        let json = serde_json::to_string_pretty(&Settings {
            seed: self.seed,
            data: &self.config,
        })?;
        io::write_file(&dir.join(DATA_CONFIG_FILE), json.as_bytes())
    }
}

pub fn write_manifest<'a>(path: &Path, records: impl IntoIterator<Item = &'a QARecord>) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    io::write_file(path, text.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Vec<QARecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Reads one split of a dataset directory, decoding each image once.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<Sample>> {
    let records = read_manifest(&dir.join(split.manifest_file()))?;
    let mut images: HashMap<String, Arc<Tensor>> = HashMap::new();
    let mut out = Vec::with_capacity(records.len());
    for record in records {
        let image = match images.get(&record.image) {
            Some(img) => img.clone(),
            None => {
                let img = Arc::new(io::read_ppm(&dir.join(&record.image))?);
                images.insert(record.image.clone(), img.clone());
                img
            }
        };
        let mask = io::read_mask(&dir.join(&record.mask))?;
        if mask.is_empty() {
            return Err(Error::Data(format!("{}: empty region mask", record.mask)));
        }
        out.push(Sample {
            record,
            image,
            mask,
        });
    }
    Ok(out)
}

/// Question counts per class and split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ClassStats {
    pub class: String,
    pub split: Split,
    pub yes: usize,
    pub no: usize,
}

pub fn class_stats(records: &[QARecord]) -> Vec<ClassStats> {
    let mut counts: BTreeMap<(Split, String), (usize, usize)> = BTreeMap::new();
    for r in records {
        let e = counts.entry((r.split, r.class.clone())).or_default();
        if r.answer == YES {
            e.0 += 1;
        } else {
            e.1 += 1;
        }
    }
    counts
        .into_iter()
        .map(|((split, class), (yes, no))| ClassStats {
            class,
            split,
            yes,
            no,
        })
        .collect()
}

pub fn stats_csv(rows: &[ClassStats]) -> String {
    let mut out = String::from("split,class,yes,no,total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.split,
            r.class,
            r.yes,
            r.no,
            r.yes + r.no
        ));
    }
    out
}
