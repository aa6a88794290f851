//! Frozen procedural teacher. Its camera and radar branches are hand-set
//! affinity projections that respond to inverse depth and radar range bands.
//! Its decoder reads the complete depth layout of a scene through fixed random
//! two-layer per-pixel MLPs. Its LPG-style depth maps at `k = 8, 4, 2` are
//! noisy block means of the dense ground truth; its final depth is a noisy
//! copy of the complete layout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::depth_loss::DepthMap;
use crate::distill::{
    FeaturePyramid, InterDepthSet, PyramidRole, INTER_DEPTH_SCALES, PYRAMID_LEVELS,
};
use crate::error::Result;
use crate::tensor::{avg_pool, nearest_upsample, Tensor};

use super::layers::{channel_project, Projection};
use super::scene::{Scene, IMAGE_CHANNELS, MAX_DEPTH, RADAR_CHANNELS};

pub const TEACHER_CHANNELS: usize = 8;
pub const DECODER_CHANNELS: usize = 8;
const HIDDEN: usize = 48;
const DEPTH_CODES: usize = 3;
const TEACHER_SEED: u64 = 0x7eac_4e12;
/// Log-depth code range covered by the decoder bands.
const BAND_LO: f64 = 0.1;
const BAND_HI: f64 = 1.0;
const LPG_NOISE: f64 = 0.05;
const DEPTH_NOISE: f64 = 0.03;

#[derive(Debug, Clone)]
struct Mlp {
    hidden: Projection,
    out: Projection,
}

impl Mlp {
    /// Decoder MLP over `[fused features, depth codes]`. The first hidden
    /// units are hinges on the log-depth code whose second differences give
    /// one triangular log-depth band per output channel; the remaining units
    /// are random and enter the output weakly.
    fn depth_bands(rng: &mut ChaCha8Rng) -> Self {
        let c_in = TEACHER_CHANNELS + DEPTH_CODES;
        let log_code = TEACHER_CHANNELS + 2;
        let knots = DECODER_CHANNELS + 2;
        let spacing = (BAND_HI - BAND_LO) / (knots - 1) as f64;
        let mut hidden = Projection::random(rng, c_in, HIDDEN, 1.5, 0.1);
        let mut out = Projection::random(rng, HIDDEN, DECODER_CHANNELS, 0.05, 0.0);
        for m in 0..knots {
            for i in 0..c_in {
                hidden.weight.data_mut()[i * HIDDEN + m] =
                    if i == log_code { 1.0 / spacing } else { 0.0 };
            }
            hidden.bias.data_mut()[m] = -(BAND_LO + m as f64 * spacing) / spacing;
            for j in 0..DECODER_CHANNELS {
                out.weight.data_mut()[m * DECODER_CHANNELS + j] = match m as isize - j as isize {
                    0 | 2 => 1.0,
                    1 => -2.0,
                    _ => 0.0,
                };
            }
        }
        Self { hidden, out }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        channel_project(&channel_project(x, &self.hidden)?, &self.out)
    }

    fn param_count(&self) -> usize {
        self.hidden.param_count() + self.out.param_count()
    }
}

#[derive(Debug, Clone)]
pub struct Teacher {
    camera: Vec<Projection>,
    radar: Vec<Projection>,
    decoder: Vec<Mlp>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutput {
    pub camera: FeaturePyramid,
    pub radar: FeaturePyramid,
    pub decoder: FeaturePyramid,
    pub lpg: InterDepthSet,
    pub depth: DepthMap,
}

impl Default for Teacher {
    fn default() -> Self {
        Self::new()
    }
}

impl Teacher {
    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(TEACHER_SEED);
        let camera = (0..PYRAMID_LEVELS)
            .map(|_| camera_bands(&mut rng))
            .collect();
        let radar = (0..PYRAMID_LEVELS).map(|_| radar_bands(&mut rng)).collect();
        let decoder = (0..PYRAMID_LEVELS)
            .map(|_| Mlp::depth_bands(&mut rng))
            .collect();
        Self {
            camera,
            radar,
            decoder,
        }
    }

    pub fn param_count(&self) -> usize {
        let proj: usize = self
            .camera
            .iter()
            .chain(&self.radar)
            .map(Projection::param_count)
            .sum();
        proj + self.decoder.iter().map(Mlp::param_count).sum::<usize>()
    }

    pub fn forward(&self, scene: &Scene) -> Result<TeacherOutput> {
        let depth = scene.depth_full.tensor();
        let mut cam = Vec::with_capacity(PYRAMID_LEVELS);
        let mut rad = Vec::with_capacity(PYRAMID_LEVELS);
        let mut dec = Vec::with_capacity(PYRAMID_LEVELS);
        for i in 0..PYRAMID_LEVELS {
            let s = 1 << (i + 1);
            let codes = depth_codes(&avg_pool(depth, s)?)?;
            let c = channel_project(&avg_pool(&scene.image_feat, s)?, &self.camera[i])?;
            let r = channel_project(&avg_pool(&scene.radar_feat, s)?, &self.radar[i])?;
            let fused = concat_channels(&c.add(&r)?, &codes)?;
            dec.push(self.decoder[i].forward(&fused)?);
            cam.push(c);
            rad.push(r);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ TEACHER_SEED);
        let lpg = INTER_DEPTH_SCALES
            .iter()
            .map(|&k| {
                let coarse = valid_pool(scene.gt_dense.tensor(), depth, k)?
                    .map(|d| d * (1.0 + rng.gen_range(-LPG_NOISE..LPG_NOISE)));
                nearest_upsample(&coarse, k)
            })
            .collect::<Result<Vec<_>>>()?;
        let final_depth = depth.map(|d| d * (1.0 + rng.gen_range(-DEPTH_NOISE..DEPTH_NOISE)));

        Ok(TeacherOutput {
            camera: FeaturePyramid::new(PyramidRole::Camera, cam)?,
            radar: FeaturePyramid::new(PyramidRole::Radar, rad)?,
            decoder: FeaturePyramid::new(PyramidRole::Decoder, dec)?,
            lpg: InterDepthSet::new(lpg)?,
            depth: DepthMap::new(final_depth)?,
        })
    }
}

/// `k×k` mean of the valid (positive) pixels of `sparse`, or of `full` where a
/// block has none.
fn valid_pool(sparse: &Tensor, full: &Tensor, k: usize) -> Result<Tensor> {
    let (h, w, _) = sparse.dims3()?;
    let fallback = avg_pool(full, k)?;
    let (ch, cw) = (h / k, w / k);
    let mut sum = vec![0.0; ch * cw];
    let mut count = vec![0usize; ch * cw];
    for (p, &d) in sparse.data().iter().enumerate() {
        if d > 0.0 {
            let b = (p / w / k) * cw + (p % w) / k;
            sum[b] += d;
            count[b] += 1;
        }
    }
    let out = (0..ch * cw)
        .map(|b| {
            if count[b] > 0 {
                sum[b] / count[b] as f64
            } else {
                fallback.data()[b]
            }
        })
        .collect();
    Tensor::new(&[ch, cw, 1], out)
}

/// Depths at which the band channels switch on, far to near.
fn band_depths() -> impl Iterator<Item = f64> {
    (0..TEACHER_CHANNELS)
        .map(|j| 70.0 * (3.0f64 / 70.0).powf(j as f64 / (TEACHER_CHANNELS - 1) as f64))
}

/// Channel `j` is `relu(s_j (x_0 - 4 / d_j))` on the inverse-depth image
/// channel plus a small random response to the others.
fn camera_bands(rng: &mut ChaCha8Rng) -> Projection {
    let mut w = vec![0.0; IMAGE_CHANNELS * TEACHER_CHANNELS];
    let mut b = vec![0.0; TEACHER_CHANNELS];
    for (j, d) in band_depths().enumerate() {
        let s = rng.gen_range(1.0..2.0);
        w[j] = s;
        for c in 1..IMAGE_CHANNELS {
            w[c * TEACHER_CHANNELS + j] = rng.gen_range(-0.1..0.1);
        }
        b[j] = -s * 4.0 / d;
    }
    Projection::new(
        Tensor::new(&[IMAGE_CHANNELS, TEACHER_CHANNELS], w).unwrap(),
        Tensor::new(&[TEACHER_CHANNELS], b).unwrap(),
    )
    .unwrap()
}

/// Channel `j` measures radar returns beyond (even `j`) or short of (odd `j`)
/// a range band, weighted by the local return density.
fn radar_bands(rng: &mut ChaCha8Rng) -> Projection {
    let mut w = vec![0.0; RADAR_CHANNELS * TEACHER_CHANNELS];
    for (j, d) in band_depths().enumerate() {
        let s = rng.gen_range(4.0..8.0) * if j % 2 == 0 { 1.0 } else { -1.0 };
        w[j] = s;
        w[TEACHER_CHANNELS + j] = -s * d / MAX_DEPTH;
    }
    Projection::new(
        Tensor::new(&[RADAR_CHANNELS, TEACHER_CHANNELS], w).unwrap(),
        Tensor::zeros(&[TEACHER_CHANNELS]).unwrap(),
    )
    .unwrap()
}

/// Inverse, linear and log encodings of a depth map.
fn depth_codes(d: &Tensor) -> Result<Tensor> {
    let (h, w, _) = d.dims3()?;
    let mut out = Vec::with_capacity(h * w * DEPTH_CODES);
    for &v in d.data() {
        out.push(4.0 / v);
        out.push(v / MAX_DEPTH);
        out.push(v.ln() / MAX_DEPTH.ln());
    }
    Tensor::new(&[h, w, DEPTH_CODES], out)
}

pub(crate) fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (h, w, ca) = a.dims3()?;
    let (hb, wb, cb) = b.dims3()?;
    if (h, w) != (hb, wb) {
        return Err(crate::error::Error::mismatch(
            "concatenated maps",
            a.shape(),
            b.shape(),
        ));
    }
    let mut out = Vec::with_capacity(h * w * (ca + cb));
    for (pa, pb) in a.data().chunks_exact(ca).zip(b.data().chunks_exact(cb)) {
        out.extend_from_slice(pa);
        out.extend_from_slice(pb);
    }
    Tensor::new(&[h, w, ca + cb], out)
}
