//! Procedural identity images.
//!
//! Each identity is a fixed layout of colored body blocks (head, torso,
//! legs) plus a "carried object" block at a stable per-identity position --
//! a non-body cue that a part-based model can localize. Every image is a
//! pure function of (seed, identity, global image index): the identity
//! template plus per-image brightness jitter and pixel noise, a horizontal
//! flip on training images, and a gray occluder rectangle on training and
//! query images. Train/query/gallery splits never share an image index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::model::ModelConfig;
use crate::tensor::Tensor;

use super::config::DataConfig;
use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Debug, Clone)]
struct IdentityPalette {
    head: [f64; 3],
    torso: [f64; 3],
    legs: [f64; 3],
    object: [f64; 3],
    /// Carried object on the left (false) or right (true) side of the torso.
    object_right: bool,
}

/// Deterministic synthetic re-identification dataset.
pub struct SyntheticDataset {
    pub seed: u64,
    pub cfg: DataConfig,
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    palettes: Vec<IdentityPalette>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn stream_key(seed: u64, a: u64, b: u64) -> u64 {
    splitmix(seed ^ splitmix(a.wrapping_mul(0x517cc1b727220a95)) ^ splitmix(b))
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.gen_range(0.05..0.95),
        rng.gen_range(0.05..0.95),
        rng.gen_range(0.05..0.95),
    ]
}

fn linf(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

impl SyntheticDataset {
    pub fn generate(model: &ModelConfig, cfg: &DataConfig, seed: u64) -> Result<Self, HarnessError> {
        cfg.validate()?;
        if model.channels != 3 {
            return Err(HarnessError::Data(format!(
                "the generator paints RGB images, got {} channels",
                model.channels
            )));
        }
        if model.image_h < 8 || model.image_w < 8 {
            return Err(HarnessError::Data(format!(
                "image {}x{} too small for the body-block layout",
                model.image_h, model.image_w
            )));
        }
        // Identity palettes come from one dedicated stream so that they are a
        // function of the seed alone. Torso colors are kept pairwise distinct
        // (the guaranteed identity cue); the resample loop is bounded.
        let mut rng = ChaCha8Rng::seed_from_u64(stream_key(seed, 0x50414c, 0));
        let mut palettes: Vec<IdentityPalette> = Vec::with_capacity(cfg.num_identities);
        for id in 0..cfg.num_identities {
            let mut attempts = 0;
            let torso = loop {
                let candidate = color(&mut rng);
                if palettes.iter().all(|p| linf(&p.torso, &candidate) >= 0.08) {
                    break candidate;
                }
                attempts += 1;
                if attempts > 10_000 {
                    return Err(HarnessError::Data(format!(
                        "could not find a distinct torso color for identity {id}"
                    )));
                }
            };
            palettes.push(IdentityPalette {
                head: color(&mut rng),
                torso,
                legs: color(&mut rng),
                object: color(&mut rng),
                object_right: rng.gen_bool(0.5),
            });
        }
        Ok(Self {
            seed,
            cfg: cfg.clone(),
            image_h: model.image_h,
            image_w: model.image_w,
            channels: model.channels,
            palettes,
        })
    }

    pub fn num_identities(&self) -> usize {
        self.cfg.num_identities
    }

    pub fn images_per(&self, split: Split) -> usize {
        match split {
            Split::Train => self.cfg.train_per_identity,
            Split::Query => self.cfg.query_per_identity,
            Split::Gallery => self.cfg.gallery_per_identity,
        }
    }

    /// (identity, image index) pairs of a split, in enumeration order.
    pub fn split_items(&self, split: Split) -> Vec<(usize, usize)> {
        let per = self.images_per(split);
        (0..self.num_identities())
            .flat_map(|id| (0..per).map(move |i| (id, i)))
            .collect()
    }

    fn global_index(&self, split: Split, idx: usize) -> usize {
        let bound = self.images_per(split);
        assert!(idx < bound, "image index {idx} out of range for {split:?}");
        match split {
            Split::Train => idx,
            Split::Query => self.cfg.train_per_identity + idx,
            Split::Gallery => self.cfg.train_per_identity + self.cfg.query_per_identity + idx,
        }
    }

    /// Render one image as an `[H×W×C]` tensor with values in [0,1].
    pub fn image(&self, id: usize, split: Split, idx: usize) -> Tensor {
        assert!(id < self.num_identities(), "identity {id} out of range");
        let global = self.global_index(split, idx);
        let mut rng = ChaCha8Rng::seed_from_u64(stream_key(self.seed, id as u64 + 1, global as u64));
        let (h, w) = (self.image_h, self.image_w);
        let pal = &self.palettes[id];

        let mut px = vec![0.8; h * w * 3];
        let mut fill = |r0: usize, r1: usize, c0: usize, c1: usize, col: &[f64; 3]| {
            for r in r0..r1 {
                for c in c0..c1 {
                    let base = (r * w + c) * 3;
                    px[base..base + 3].copy_from_slice(col);
                }
            }
        };
        // Body bands.
        fill(0, h / 4, w / 4, 3 * w / 4, &pal.head);
        fill(h / 4, 5 * h / 8, w / 6, 5 * w / 6, &pal.torso);
        fill(5 * h / 8, h, w / 4, 3 * w / 4, &pal.legs);
        // Carried object: a block beside the torso at a stable location.
        let (oc0, oc1) = if pal.object_right {
            (w - w / 6, w)
        } else {
            (0, w / 6)
        };
        fill(h / 4 + h / 16, h / 4 + h / 16 + h / 5, oc0, oc1, &pal.object.clone());

        // Per-image appearance: brightness jitter then pixel noise.
        let jitter = if self.cfg.jitter > 0.0 {
            rng.gen_range(-self.cfg.jitter..self.cfg.jitter)
        } else {
            0.0
        };
        if self.cfg.noise_std > 0.0 {
            let normal = Normal::new(0.0, self.cfg.noise_std).expect("valid std");
            for v in px.iter_mut() {
                *v += jitter + normal.sample(&mut rng);
            }
        } else if jitter != 0.0 {
            for v in px.iter_mut() {
                *v += jitter;
            }
        }

        // Augmentation: flips only in training, occluders in training and
        // query (the retrieval benchmark includes occlusion robustness).
        if split == Split::Train && rng.gen_bool(self.cfg.flip_prob) {
            for r in 0..h {
                for c in 0..w / 2 {
                    for ch in 0..3 {
                        px.swap((r * w + c) * 3 + ch, (r * w + (w - 1 - c)) * 3 + ch);
                    }
                }
            }
        }
        if split != Split::Gallery && rng.gen_bool(self.cfg.occlude_prob) {
            let bh = h / 4;
            let bw = w / 3;
            let r0 = rng.gen_range(0..=h - bh);
            let c0 = rng.gen_range(0..=w - bw);
            for r in r0..r0 + bh {
                for c in c0..c0 + bw {
                    let base = (r * w + c) * 3;
                    px[base..base + 3].copy_from_slice(&[0.5, 0.5, 0.5]);
                }
            }
        }

        for v in px.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        Tensor::new(&[h, w, 3], px).expect("image shape")
    }
}
