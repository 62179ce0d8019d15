//! Seeded epoch order, flip augmentation and batch assembly.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scene::DepthSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which samples form a batch, and which of them are mirrored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub indices: Vec<usize>,
    pub flips: Vec<bool>,
}

/// Batches of one epoch over `n` samples. The order depends only on
/// `(seed, epoch)`; the last batch may be short.
pub fn epoch_plan(n: usize, batch: usize, seed: u64, epoch: u64, shuffle: bool, flip: bool) -> Result<Vec<BatchPlan>> {
    if batch == 0 {
        return Err(Error::Argument("batch size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut rng);
    }
    let flips: Vec<bool> = (0..n).map(|_| flip && rng.gen_bool(0.5)).collect();
    Ok(order
        .chunks(batch)
        .zip(flips.chunks(batch))
        .map(|(i, f)| BatchPlan { indices: i.to_vec(), flips: f.to_vec() })
        .collect())
}

fn flip_planes<T: Copy>(data: &[T], w: usize) -> Vec<T> {
    data.chunks(w).flat_map(|row| row.iter().rev().copied()).collect()
}

/// Mirrors rgb, depth and mask left to right.
pub fn flip_horizontal(s: &DepthSample) -> DepthSample {
    let w = s.width();
    DepthSample {
        rgb: Tensor::new(s.rgb.shape(), flip_planes(s.rgb.data(), w)).expect("same shape"),
        depth: Tensor::new(s.depth.shape(), flip_planes(s.depth.data(), w)).expect("same shape"),
        mask: flip_planes(&s.mask, w),
    }
}

/// Stacked samples: `rgb: [B, 3, H, W]`, `depth: [B, 1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub rgb: Tensor<f32>,
    pub depth: Tensor<f32>,
    pub mask: Vec<bool>,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn assemble(samples: &[DepthSample], plan: &BatchPlan) -> Result<Batch> {
    let first = plan.indices.first().ok_or_else(|| Error::Argument("empty batch".into()))?;
    let (h, w) = (samples[*first].height(), samples[*first].width());
    let b = plan.indices.len();
    let (mut rgb, mut depth, mut mask) = (Vec::with_capacity(b * 3 * h * w), Vec::new(), Vec::new());
    for (&i, &f) in plan.indices.iter().zip(&plan.flips) {
        let s = samples.get(i).ok_or_else(|| Error::Argument(format!("sample {i} out of range")))?;
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::dim("batch", format!("sample {i} is {}×{}, batch is {h}×{w}", s.height(), s.width())));
        }
        let flipped;
        let s = if f {
            flipped = flip_horizontal(s);
            &flipped
        } else {
            s
        };
        rgb.extend_from_slice(s.rgb.data());
        depth.extend_from_slice(s.depth.data());
        mask.extend_from_slice(&s.mask);
    }
    Ok(Batch {
        rgb: Tensor::new([b, 3, h, w], rgb)?,
        depth: Tensor::new([b, 1, h, w], depth)?,
        mask,
        indices: plan.indices.clone(),
    })
}
