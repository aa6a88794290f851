//! Procedural scenes: blocky depth layouts sampled by a camera-like image,
//! a sparse radar, a semi-dense accumulated depth map and a single-scan map.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::depth_loss::DepthMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_CHANNELS: usize = 3;
pub const RADAR_CHANNELS: usize = 2;
pub const MIN_DEPTH: f64 = 1.0;
pub const MAX_DEPTH: f64 = 80.0;

/// Side of the constant-depth blocks.
const BLOCK: usize = 8;
const DENSE_COVERAGE: f64 = 0.2;
const SPARSE_FRACTION: f64 = 0.015;
const RADAR_FRACTION: f64 = 0.04;

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image_feat: Tensor,
    pub radar_feat: Tensor,
    pub gt_dense: DepthMap,
    pub gt_sparse: DepthMap,
    /// The complete depth layout the sensors sample. Only the teacher sees it.
    pub depth_full: DepthMap,
    pub seed: u64,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image_feat.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image_feat.shape()[1]
    }
}

pub fn gen_scene(seed: u64, h: usize, w: usize) -> Result<Scene> {
    if h == 0 || w == 0 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
        return Err(Error::Argument(format!(
            "scene size {h}×{w} must be a positive multiple of 32"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = h * w;

    // far at the top, near at the bottom, with nearer rectangular objects
    let (bh, bw) = (h / BLOCK, w / BLOCK);
    let mut blocks = vec![0.0; bh * bw];
    for by in 0..bh {
        let t = 1.0 - (by as f64 + 0.5) / bh as f64;
        let base = 4.0 + 70.0 * t * t;
        for bx in 0..bw {
            blocks[by * bw + bx] = base * rng.gen_range(0.9..1.1);
        }
    }
    for _ in 0..rng.gen_range(2..5) {
        let (y0, x0) = (rng.gen_range(0..bh), rng.gen_range(0..bw));
        let (y1, x1) = (
            (y0 + rng.gen_range(1..3)).min(bh),
            (x0 + rng.gen_range(1..4)).min(bw),
        );
        let d = rng.gen_range(2.0..20.0);
        for by in y0..y1 {
            for bx in x0..x1 {
                let b = &mut blocks[by * bw + bx];
                *b = b.min(d);
            }
        }
    }
    let depth: Vec<f64> = (0..n)
        .map(|p| {
            let (y, x) = (p / w, p % w);
            blocks[(y / BLOCK) * bw + x / BLOCK].clamp(MIN_DEPTH, MAX_DEPTH)
        })
        .collect();

    let mut image = Vec::with_capacity(n * IMAGE_CHANNELS);
    for (p, &d) in depth.iter().enumerate() {
        let (y, x) = (p / w, p % w);
        let texture = ((x as f64 * 0.7).sin() * (y as f64 * 0.45).cos() + 1.0) / 2.0;
        image.push(4.0 / d + rng.gen_range(-0.05..0.05));
        image.push(texture * (1.0 - d / MAX_DEPTH) + rng.gen_range(-0.1..0.1));
        image.push(y as f64 / h as f64);
    }

    let mut radar = vec![0.0; n * RADAR_CHANNELS];
    let mut pixels: Vec<usize> = (0..n).collect();
    pixels.shuffle(&mut rng);
    for &p in &pixels[..(n as f64 * RADAR_FRACTION) as usize] {
        radar[p * RADAR_CHANNELS] = depth[p] / MAX_DEPTH * rng.gen_range(0.9..1.1);
        radar[p * RADAR_CHANNELS + 1] = 1.0;
    }

    let dense: Vec<f64> = depth
        .iter()
        .map(|&d| if rng.gen_bool(DENSE_COVERAGE) { d } else { 0.0 })
        .collect();
    let mut valid: Vec<usize> = (0..n).filter(|&p| dense[p] > 0.0).collect();
    valid.shuffle(&mut rng);
    let mut sparse = vec![0.0; n];
    for &p in valid.iter().take((n as f64 * SPARSE_FRACTION) as usize) {
        sparse[p] = dense[p];
    }

    Ok(Scene {
        image_feat: Tensor::new(&[h, w, IMAGE_CHANNELS], image)?,
        radar_feat: Tensor::new(&[h, w, RADAR_CHANNELS], radar)?,
        gt_dense: DepthMap::from_vec(h, w, dense)?,
        gt_sparse: DepthMap::from_vec(h, w, sparse)?,
        depth_full: DepthMap::from_vec(h, w, depth)?,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = gen_scene(3, 32, 64).unwrap();
        let b = gen_scene(3, 32, 64).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_scene(4, 32, 64).unwrap());
    }

    #[test]
    fn bounds_and_densities() {
        let s = gen_scene(0, 64, 64).unwrap();
        let n = 64.0 * 64.0;
        assert!(s.gt_sparse.n_valid() as f64 / n <= 0.02);
        assert!(s.gt_sparse.n_valid() > 0);
        let radar_px = s
            .radar_feat
            .data()
            .chunks(RADAR_CHANNELS)
            .filter(|c| c[1] > 0.0)
            .count();
        assert!(radar_px as f64 / n <= 0.05);
        for m in [&s.gt_dense, &s.gt_sparse, &s.depth_full] {
            assert!(m
                .data()
                .iter()
                .all(|&d| d == 0.0 || (MIN_DEPTH..=MAX_DEPTH).contains(&d)));
        }
        for (sp, de) in s.gt_sparse.data().iter().zip(s.gt_dense.data()) {
            if *sp > 0.0 {
                assert_eq!(sp, de);
            }
        }
    }

    #[test]
    fn rejects_bad_size() {
        assert!(gen_scene(0, 48, 64).is_err());
        assert!(gen_scene(0, 0, 64).is_err());
    }
}
