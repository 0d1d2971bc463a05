//! Self-contained checks reused by the core integration tests and by the
//! acceptance suite. Each returns a measured quantity so callers decide how
//! to report it.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap, HashSet};

use lvqa_core::attention::{downsample_mask, masked_pool, LocalizedAttention, RegionMask, SoftmaxAxis};
use lvqa_core::data::{generate_dataset, DataConfig, Split, YES};
use lvqa_core::encoders::Vocabulary;
use lvqa_core::evaluation::{average_precision, roc_auc};
use lvqa_core::model::{region_text, ModelConfig, Variant, VqaModel};
use lvqa_core::tensor::{grad_check, Bound, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ap_oracle, attention_oracle, auc_oracle, downsample_oracle, masked_pool_oracle, uniform};

/// Largest deviation of the three attention ops from their loop oracles.
#[derive(Debug, Default, Clone, Copy)]
pub struct OracleErrors {
    pub attention_map: f64,
    pub downsample_mask: f64,
    pub masked_pool: f64,
}

impl OracleErrors {
    pub fn max(&self) -> f64 {
        self.attention_map.max(self.downsample_mask).max(self.masked_pool)
    }
}

fn random_mask(rng: &mut ChaCha8Rng, s: usize) -> RegionMask {
    match rng.gen_range(0..3) {
        0 => RegionMask::from_fn(s, |_, _| rng.gen_bool(0.3)),
        1 => {
            let (r0, c0) = (rng.gen_range(0..s), rng.gen_range(0..s));
            let (r1, c1) = (rng.gen_range(r0 + 1..=s), rng.gen_range(c0 + 1..=s));
            RegionMask::from_fn(s, |r, c| (r0..r1).contains(&r) && (c0..c1).contains(&c))
        }
        _ => {
            let (r, c) = (rng.gen_range(0..s), rng.gen_range(0..s));
            RegionMask::from_fn(s, |y, x| y == r && x == c)
        }
    }
}

/// `cases` random small instances of each op against its oracle.
pub fn attention_oracle_errors(cases: usize, seed: u64) -> OracleErrors {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errs = OracleErrors::default();
    for case in 0..cases {
        let b = rng.gen_range(1..=3);
        let c = rng.gen_range(1..=5);
        let h = rng.gen_range(1..=5);
        let w = rng.gen_range(1..=5);
        let p = rng.gen_range(1..=6);
        let q = rng.gen_range(1..=4);
        let g = rng.gen_range(1..=3);
        let axis = if case % 2 == 0 { SoftmaxAxis::Spatial } else { SoftmaxAxis::Glimpse };

        let mut store = ParamStore::new();
        let att = LocalizedAttention::init(&mut store, c, p, q, g, 0.0, axis, &mut rng);
        let features = uniform(&mut rng, b * c * h * w, -2.0, 2.0);
        let question = uniform(&mut rng, b * q, -1.0, 1.0);

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let fv = tape.constant(Tensor::new(vec![b, c, h, w], features.clone()).unwrap());
        let qv = tape.constant(Tensor::new(vec![b, q], question.clone()).unwrap());
        let gv = att.attention_map(&mut tape, &bound, fv, qv, false, &mut rng).unwrap();
        let expected = attention_oracle(
            store.value(att.wx).data(),
            store.value(att.wq).data(),
            store.value(att.wg).data(),
            &features,
            &question,
            (b, c, h, w, p, q, g),
            axis,
        );
        errs.attention_map = errs.attention_map.max(max_diff(tape.value(gv).data(), &expected));

        // pooling over the glimpses just computed, with a random 0/1 mask
        let mask: Vec<f64> = (0..b * h * w)
            .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        let mv = tape.constant(Tensor::new(vec![b, h, w], mask.clone()).unwrap());
        let pooled = masked_pool(&mut tape, gv, fv, mv).unwrap();
        let gvals = tape.value(gv).data().to_vec();
        let expected = masked_pool_oracle(&gvals, &features, &mask, b, g, c, h * w);
        errs.masked_pool = errs.masked_pool.max(max_diff(tape.value(pooled).data(), &expected));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdead);
    for _ in 0..cases {
        let n = rng.gen_range(1..=6);
        let k = rng.gen_range(1..=4);
        let s = n * k;
        let m = random_mask(&mut rng, s);
        let got = downsample_mask(&m, n, n).unwrap();
        errs.downsample_mask = errs
            .downsample_mask
            .max(max_diff(got.data(), &downsample_oracle(m.bits(), s, n, n)));
    }
    errs
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest deviation of `(roc_auc, average_precision)` from the pairwise and
/// sweep oracles over `cases` random instances with heavy ties.
pub fn metric_oracle_errors(cases: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut auc_err, mut ap_err) = (0.0f64, 0.0f64);
    let mut done = 0;
    while done < cases {
        let n = rng.gen_range(2..=40);
        let levels = rng.gen_range(1..=8);
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.5) {
                    rng.gen_range(0..levels) as f64 / levels as f64
                } else {
                    rng.gen::<f64>()
                }
            })
            .collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        auc_err = auc_err.max((roc_auc(&scores, &labels).unwrap() - auc_oracle(&scores, &labels)).abs());
        ap_err = ap_err.max((average_precision(&scores, &labels).unwrap() - ap_oracle(&scores, &labels)).abs());
        done += 1;
    }
    (auc_err, ap_err)
}

/// Tiny architecture for finite-difference checks.
pub fn toy_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        image_size: 8,
        depth: 1,
        channels: 3,
        proj: 4,
        question_dim: 3,
        embed_dim: 3,
        glimpses: 2,
        hidden: 5,
        num_answers: 2,
        vocab_size: 0,
        dropout: 0.0,
        variant,
        softmax_axis: SoftmaxAxis::Spatial,
        freeze_image_encoder: false,
        max_len: 16,
        grid_n: 4,
    }
}

/// Outcome of checking one variant.
#[derive(Debug, Clone)]
pub struct GradCheckSummary {
    pub variant: Variant,
    pub instances: usize,
    pub resampled: usize,
    pub worst_rel_error: f64,
    pub checked_entries: usize,
}

const QUESTIONS: [&str; 2] = ["is there a circle in this region?", "is there an alpha-bar in this region?"];

/// Central-difference check of d(loss)/d(all parameters and pixels) for the
/// whole pipeline, on `instances` random toy problems.
///
/// Instances whose ReLU pre-activations come within `1e-3` of the kink are
/// redrawn, since finite differences straddling a kink are meaningless.
pub fn pipeline_grad_check(variant: Variant, instances: usize, seed: u64) -> GradCheckSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = GradCheckSummary {
        variant,
        instances: 0,
        resampled: 0,
        worst_rel_error: 0.0,
        checked_entries: 0,
    };
    while summary.instances < instances {
        let s = 8;
        let b = 2;
        let masks: Vec<RegionMask> = (0..b)
            .map(|_| {
                let (r0, c0) = (rng.gen_range(0..s - 1), rng.gen_range(0..s - 1));
                let (r1, c1) = (rng.gen_range(r0 + 1..=s), rng.gen_range(c0 + 1..=s));
                RegionMask::from_fn(s, |r, c| (r0..r1).contains(&r) && (c0..c1).contains(&c))
            })
            .collect();
        let questions: Vec<&str> = (0..b).map(|i| QUESTIONS[i % 2]).collect();
        let mut corpus: Vec<String> = questions.iter().map(|q| q.to_string()).collect();
        for (q, m) in questions.iter().zip(&masks) {
            corpus.push(region_text(q, m, 4).unwrap());
        }
        let vocab = Vocabulary::build(corpus.iter().map(String::as_str), &[YES.into(), "no".into()]).unwrap();
        let mut config = toy_config(variant);
        config.vocab_size = vocab.len();
        let mut model = VqaModel::init(&config, rng.gen()).unwrap();
        // nonzero biases so that no unit sits at a structural kink
        for p in model.store.iter_mut() {
            if p.value.rank() == 1 {
                for v in p.value.data_mut() {
                    *v = rng.gen_range(-0.5..0.5);
                }
            }
        }
        let pixels = Tensor::from_fn(vec![b, 3, s, s], |_| rng.gen_range(0.0..1.0));
        let targets: Vec<usize> = (0..b).map(|_| rng.gen_range(0..2)).collect();

        // flat vector: every parameter in store order, then the pixels
        let shapes: Vec<Vec<usize>> = model.store.iter().map(|p| p.value.shape().to_vec()).collect();
        let mut flat: Vec<f64> = model.store.iter().flat_map(|p| p.value.data().to_vec()).collect();
        flat.extend_from_slice(pixels.data());
        let x = Tensor::from_slice(&flat);

        let loss_fn = |tape: &mut Tape, x: lvqa_core::Var| -> lvqa_core::Result<lvqa_core::Var> {
            let mut vars = Vec::with_capacity(shapes.len());
            let mut off = 0;
            for shape in &shapes {
                let n: usize = shape.iter().product();
                let v = tape.slice(x, 0, off, n)?;
                vars.push(tape.reshape(v, shape.clone())?);
                off += n;
            }
            let img = tape.slice(x, 0, off, b * 3 * s * s)?;
            let img = tape.reshape(img, vec![b, 3, s, s])?;
            let bound = Bound::from_vars(vars);
            let mut drng = ChaCha8Rng::seed_from_u64(0);
            let out = model.forward_pixels(tape, &bound, img, &questions, &masks, &vocab, false, &mut drng)?;
            tape.cross_entropy(out.logits, &targets)
        };

        let mut probe = Tape::new();
        let leaf = probe.constant(x.clone());
        loss_fn(&mut probe, leaf).unwrap();
        if probe.relu_margin() < 1e-3 {
            summary.resampled += 1;
            continue;
        }
        let report = grad_check(loss_fn, &x, 1e-5, 1e-4).unwrap();
        summary.worst_rel_error = summary.worst_rel_error.max(report.max_rel_error);
        summary.checked_entries += x.numel();
        summary.instances += 1;
    }
    summary
}

/// Violations of the generator contract, empty when it holds.
#[derive(Debug, Default)]
pub struct DataContract {
    pub records: usize,
    pub label_mismatches: usize,
    pub unbalanced_strata: Vec<String>,
    pub shared_images: usize,
    pub empty_masks: usize,
}

impl DataContract {
    pub fn holds(&self) -> bool {
        self.label_mismatches == 0 && self.unbalanced_strata.is_empty() && self.shared_images == 0 && self.empty_masks == 0
    }
}

/// Generates datasets until at least `min_records` records exist, then
/// re-labels every record by scanning mask and segmentation pixel by pixel.
pub fn data_contract(min_records: usize, seed: u64) -> DataContract {
    let config = DataConfig {
        image_size: 32,
        train_images: 140,
        val_images: 20,
        test_images: 40,
        ..DataConfig::default()
    };
    let mut out = DataContract::default();
    let mut round = 0;
    while out.records < min_records {
        let ds = generate_dataset(&config, seed + round).unwrap();
        round += 1;
        let s = config.image_size;
        let mut splits_of: HashMap<usize, HashSet<Split>> = HashMap::new();
        let mut counts: BTreeMap<(Split, String), (usize, usize)> = BTreeMap::new();
        for r in &ds.records {
            let scene = &ds.scenes[r.image_id];
            let mask = r.region.rasterize(s);
            if mask.is_empty() {
                out.empty_masks += 1;
            }
            let mut hit = false;
            for p in 0..s * s {
                if mask.bits()[p] == 1 && scene.segmap[p] != 0 {
                    let id = scene.segmap[p];
                    let class = scene.objects.iter().find(|o| o.id == id).map(|o| o.class.as_str());
                    hit |= class == Some(r.class.as_str());
                }
            }
            if hit != (r.answer == YES) {
                out.label_mismatches += 1;
            }
            splits_of.entry(r.image_id).or_default().insert(r.split);
            let e = counts.entry((r.split, r.class.clone())).or_default();
            if r.answer == YES {
                e.0 += 1;
            } else {
                e.1 += 1;
            }
        }
        out.shared_images += splits_of.values().filter(|s| s.len() > 1).count();
        for ((split, class), (y, n)) in counts {
            if y != n {
                out.unbalanced_strata.push(format!("{split}/{class}: {y} yes, {n} no"));
            }
        }
        out.records += ds.records.len();
    }
    out
}
