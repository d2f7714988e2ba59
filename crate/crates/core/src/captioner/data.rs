//! Synthetic multimodal captioning data with a planted cross-modal rule.
//!
//! Modality 1 carries one key in every frame. Every other modality carries a
//! `(key, content)` pair per frame, with keys and contents distinct across
//! frames, and exactly one frame (the same frame in every content modality)
//! repeats the item's key. With probability
//! `correlation` the caption is the content tokens found at that frame,
//! followed by EOS; otherwise the content tokens are drawn at random.
//!
//! Locating the frame needs the key from modality 1 and the per-frame keys of
//! the target, so attention that scores one modality at a time has no direct
//! way to find it.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HocaError, Result};
use crate::rng::{normal, stream};
use crate::tensor::FeatureMatrix;

pub const EOS: usize = 0;
pub const BOS: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;
/// First id available for content words.
pub const FIRST_CONTENT: usize = 4;

/// Index of the modality holding the global key.
pub const KEY_MODALITY: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_modalities: usize,
    /// Raw feature rows for every modality; at least `keys + content words`.
    pub d_raw: usize,
    /// Frames per modality.
    pub frames: usize,
    pub keys: usize,
    pub vocab_size: usize,
    pub n_items: usize,
    /// Probability that an item's caption follows the planted rule.
    pub correlation: f64,
    /// Standard deviation of additive Gaussian feature noise.
    pub noise: f64,
    /// Fractions of items in the train and validation splits; the rest is test.
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_modalities: 3,
            d_raw: 6,
            frames: 3,
            keys: 3,
            vocab_size: 7,
            n_items: 500,
            correlation: 1.0,
            noise: 0.1,
            train_fraction: 0.8,
            val_fraction: 0.1,
        }
    }
}

impl DatasetSpec {
    pub fn content_words(&self) -> usize {
        self.vocab_size.saturating_sub(FIRST_CONTENT)
    }

    pub fn caption_len(&self) -> usize {
        self.n_modalities
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(HocaError::Config(msg));
        if self.vocab_size < FIRST_CONTENT + 1 {
            return fail(format!("vocab_size: need at least {} ids, got {}", FIRST_CONTENT + 1, self.vocab_size));
        }
        if self.n_modalities < 2 {
            return fail(format!("n_modalities: need at least 2, got {}", self.n_modalities));
        }
        if self.keys < 2 {
            return fail(format!("keys: need at least 2, got {}", self.keys));
        }
        if self.frames == 0 {
            return fail("frames: must be positive".into());
        }
        if self.frames > self.keys || self.frames > self.content_words() {
            return fail(format!(
                "frames: {} frames need at least as many keys ({}) and content words ({})",
                self.frames,
                self.keys,
                self.content_words()
            ));
        }
        if self.d_raw < self.keys + self.content_words() {
            return fail(format!(
                "d_raw: {} rows cannot hold {} keys and {} content words",
                self.d_raw,
                self.keys,
                self.content_words()
            ));
        }
        if !(0.0..=1.0).contains(&self.correlation) {
            return fail(format!("correlation: must lie in [0, 1], got {}", self.correlation));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail(format!("noise: must be a non-negative number, got {}", self.noise));
        }
        let (a, b) = (self.train_fraction, self.val_fraction);
        if !(a >= 0.0 && b >= 0.0 && a + b <= 1.0) {
            return fail(format!("train_fraction/val_fraction: invalid split {a} + {b}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    /// Raw features, one `d_raw × frames` matrix per modality.
    pub features: Vec<FeatureMatrix>,
    /// Caption token ids, EOS-terminated.
    pub caption: Vec<usize>,
    /// Whether the caption follows the planted rule.
    pub planted: bool,
    pub key: usize,
    /// The frame whose key matches.
    pub frame: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: DatasetSpec,
    pub items: Vec<Item>,
}

impl SyntheticDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Item> {
        self.items.iter().filter(move |i| i.split == split)
    }

    pub fn vocab_size(&self) -> usize {
        self.spec.vocab_size
    }

    pub fn extents(&self) -> Vec<usize> {
        vec![self.spec.frames; self.spec.n_modalities]
    }

    /// Caption the rule produces from an item's features (ignoring noise).
    pub fn rule_caption(&self, item: &Item) -> Vec<usize> {
        let k = self.spec.keys;
        let mut out: Vec<usize> = (0..self.spec.n_modalities)
            .filter(|&m| m != KEY_MODALITY)
            .map(|m| {
                let col = item.features[m].column(item.frame);
                let content = argmax(&col[k..k + self.spec.content_words()]);
                FIRST_CONTENT + content
            })
            .collect();
        out.push(EOS);
        out
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Deterministically generates a dataset from `seed`.
pub fn synth_dataset(seed: u64, spec: &DatasetSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = stream(seed, 0x5eed_da7a);
    let (keys, words, frames) = (spec.keys, spec.content_words(), spec.frames);
    let n_train = (spec.n_items as f64 * spec.train_fraction).round() as usize;
    let n_val = ((spec.n_items as f64 * spec.val_fraction).round() as usize).min(spec.n_items - n_train);

    let mut items = Vec::with_capacity(spec.n_items);
    for idx in 0..spec.n_items {
        let key = rng.random_range(0..keys);
        let frame = rng.random_range(0..frames);
        let mut features = Vec::with_capacity(spec.n_modalities);
        let mut contents = Vec::new();
        for m in 0..spec.n_modalities {
            let mut values = vec![0.0; spec.d_raw * frames];
            if m == KEY_MODALITY {
                for r in 0..frames {
                    values[key * frames + r] = 1.0;
                }
            } else {
                // Keys and contents are distinct across frames, so the set of
                // words present in one modality says nothing about the caption.
                let mut others = index::sample(&mut rng, keys - 1, frames - 1).into_iter();
                let words_here = index::sample(&mut rng, words, frames).into_vec();
                for r in 0..frames {
                    let k = if r == frame {
                        key
                    } else {
                        let other = others.next().expect("frames - 1 samples");
                        if other >= key { other + 1 } else { other }
                    };
                    values[k * frames + r] = 1.0;
                    values[(keys + words_here[r]) * frames + r] = 1.0;
                }
                contents.push(words_here[frame]);
            }
            for v in values.iter_mut() {
                *v += spec.noise * normal(&mut rng);
            }
            features.push(FeatureMatrix::new(spec.d_raw, frames, values)?);
        }
        let planted = rng.random_bool(spec.correlation);
        let mut caption: Vec<usize> = if planted {
            contents.iter().map(|c| FIRST_CONTENT + c).collect()
        } else {
            contents.iter().map(|_| FIRST_CONTENT + rng.random_range(0..words)).collect()
        };
        caption.push(EOS);
        let split = if idx < n_train {
            Split::Train
        } else if idx < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        items.push(Item {
            features,
            caption,
            planted,
            key,
            frame,
            split,
        });
    }
    // Splits are assigned by position, then the order is shuffled so a
    // prefix of the item list is not biased towards one split.
    items.shuffle(&mut rng);
    Ok(SyntheticDataset {
        spec: spec.clone(),
        items,
    })
}

/// Per-token accuracy of a model that predicts every content word at chance
/// and always gets the final EOS right: the ceiling when captions ignore the
/// features.
pub fn independent_caption_ceiling(spec: &DatasetSpec) -> f64 {
    let content_steps = (spec.n_modalities - 1) as f64;
    (content_steps / spec.content_words() as f64 + 1.0) / (content_steps + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec {
            n_items: 40,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(synth_dataset(7, &small()).unwrap(), synth_dataset(7, &small()).unwrap());
        assert_ne!(synth_dataset(7, &small()).unwrap(), synth_dataset(8, &small()).unwrap());
    }

    #[test]
    fn empty_dataset_is_valid() {
        let ds = synth_dataset(1, &DatasetSpec { n_items: 0, ..small() }).unwrap();
        assert!(ds.items.is_empty());
    }

    #[test]
    fn planted_captions_follow_the_rule() {
        let ds = synth_dataset(3, &small()).unwrap();
        for item in &ds.items {
            assert!(item.planted);
            assert_eq!(item.caption, ds.rule_caption(item));
            assert!(item.caption.iter().all(|&t| t < ds.vocab_size()));
            let keyed: Vec<usize> = (0..ds.spec.frames)
                .filter(|&r| {
                    let col = item.features[0].column(r);
                    argmax(&col[..ds.spec.keys]) == item.key
                })
                .collect();
            assert_eq!(keyed, vec![item.frame]);
        }
    }

    #[test]
    fn split_sizes() {
        let ds = synth_dataset(4, &DatasetSpec { n_items: 500, ..small() }).unwrap();
        assert_eq!(ds.split(Split::Train).count(), 400);
        assert_eq!(ds.split(Split::Val).count(), 50);
        assert_eq!(ds.split(Split::Test).count(), 50);
    }

    #[test]
    fn zero_correlation_captions_are_random() {
        let spec = DatasetSpec {
            correlation: 0.0,
            n_items: 2000,
            ..small()
        };
        let ds = synth_dataset(5, &spec).unwrap();
        let agree = ds
            .items
            .iter()
            .filter(|i| i.caption[0] == ds.rule_caption(i)[0])
            .count() as f64
            / 2000.0;
        // Chance agreement is 1/3 for three content words.
        assert!((agree - 1.0 / 3.0).abs() < 0.03, "{agree}");
        assert!(ds.items.iter().all(|i| !i.planted));
        assert!((independent_caption_ceiling(&spec) - (2.0 / 3.0 + 1.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn infeasible_specs() {
        for bad in [
            DatasetSpec { vocab_size: 4, ..small() },
            DatasetSpec { n_modalities: 1, ..small() },
            DatasetSpec { d_raw: 5, ..small() },
            DatasetSpec { keys: 2, ..small() },
            DatasetSpec { correlation: 1.5, ..small() },
            DatasetSpec { keys: 1, ..small() },
            DatasetSpec { frames: 4, keys: 4, d_raw: 7, ..small() },
            DatasetSpec { train_fraction: 0.9, val_fraction: 0.2, ..small() },
        ] {
            assert!(matches!(synth_dataset(0, &bad), Err(HocaError::Config(_))), "{bad:?}");
        }
    }
}
