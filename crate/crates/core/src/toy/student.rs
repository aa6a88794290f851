//! The trainable student: per-level affinity projections for camera and radar,
//! a fusing decoder projection, three 1×1 inter-depth heads and a linear
//! readout of the upsampled, summed decoder pyramid. The final depth
//! pre-activation is the mean of the head pre-activations plus the readout. Everything is a 1×1 convolution, so the backward pass
//! is written out by hand.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::depth_loss::DepthMap;
use crate::distill::{
    FeaturePyramid, InterDepthSet, PyramidRole, INTER_DEPTH_SCALES, PYRAMID_LEVELS,
};
use crate::error::{Error, Result};
use crate::tensor::{avg_pool, block_sum, nearest_upsample, Tensor};

use super::layers::{
    channel_project, channel_project_backward, linear, linear_backward, relu, to_depth,
    to_depth_grad, Projection, ProjectionGrad,
};
use super::scene::{Scene, IMAGE_CHANNELS, RADAR_CHANNELS};
use super::teacher::{DECODER_CHANNELS, TEACHER_CHANNELS};

/// Weight of each head pre-activation in the final depth pre-activation.
const HEAD_SHARE: f64 = 1.0 / 3.0;

/// Head bias at initialisation, so that early predictions sit near 20 m.
const INIT_HEAD_BIAS: f64 = 1.85;

/// Pyramid level (1-based) feeding the inter-depth head of scale `k`.
pub fn inter_head_level(k: usize) -> usize {
    k.trailing_zeros() as usize
}

/// Inter-depth head: 1×1 convolution to one channel, positive depth mapping,
/// nearest upsampling by `k` to full resolution.
pub fn inter_depth_head(dec: &Tensor, head: &Projection, k: usize) -> Result<Tensor> {
    nearest_upsample(&linear(dec, head)?.map(to_depth), k)
}

/// Backward of [`inter_depth_head`] given the full-resolution output gradient.
pub fn inter_depth_head_backward(
    dec: &Tensor,
    head: &Projection,
    k: usize,
    d_out: &Tensor,
) -> Result<ProjectionGrad> {
    let z = linear(dec, head)?;
    let dz = z.zip_map(&block_sum(d_out, k)?, |z, g| g * to_depth_grad(z))?;
    linear_backward(dec, head, &dz)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub camera: Vec<Projection>,
    pub radar: Vec<Projection>,
    pub decoder: Vec<Projection>,
    pub readout: Projection,
    pub inter_heads: Vec<Projection>,
}

/// Average-pooled scene inputs per pyramid level.
#[derive(Debug, Clone)]
pub struct StudentInputs {
    pub image: Vec<Tensor>,
    pub radar: Vec<Tensor>,
    height: usize,
    width: usize,
}

impl StudentInputs {
    pub fn new(scene: &Scene) -> Result<Self> {
        let mut image = Vec::with_capacity(PYRAMID_LEVELS);
        let mut radar = Vec::with_capacity(PYRAMID_LEVELS);
        for i in 1..=PYRAMID_LEVELS {
            image.push(avg_pool(&scene.image_feat, 1 << i)?);
            radar.push(avg_pool(&scene.radar_feat, 1 << i)?);
        }
        Ok(Self {
            image,
            radar,
            height: scene.height(),
            width: scene.width(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentOutput {
    pub camera: FeaturePyramid,
    pub radar: FeaturePyramid,
    pub decoder: FeaturePyramid,
    pub inter: InterDepthSet,
    pub depth: DepthMap,
    fused: Vec<Tensor>,
    dec_sum: Tensor,
    depth_pre: Tensor,
}

/// Upstream gradients of the student outputs.
#[derive(Debug, Clone)]
pub struct OutputGrads<'a> {
    pub depth: &'a Tensor,
    pub camera: &'a [Tensor],
    pub radar: &'a [Tensor],
    pub decoder: &'a [Tensor],
    pub inter: &'a [Tensor],
}

impl ToyModel {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut levels = |c_in: usize, c_out: usize, scale: f64, bias: f64| -> Vec<Projection> {
            (0..PYRAMID_LEVELS)
                .map(|_| Projection::random(&mut rng, c_in, c_out, scale, bias))
                .collect()
        };
        let camera = levels(IMAGE_CHANNELS, TEACHER_CHANNELS, 1.0, 0.1);
        let radar = levels(RADAR_CHANNELS, TEACHER_CHANNELS, 1.0, 0.1);
        let decoder = levels(TEACHER_CHANNELS, DECODER_CHANNELS, 1.0, 0.1);
        let readout = Projection::random(&mut rng, DECODER_CHANNELS, 1, 0.2, 0.0);
        let inter_heads = (0..INTER_DEPTH_SCALES.len())
            .map(|_| Projection::random(&mut rng, DECODER_CHANNELS, 1, 0.2, INIT_HEAD_BIAS))
            .collect();
        Self {
            camera,
            radar,
            decoder,
            readout,
            inter_heads,
        }
    }

    /// All projections in a fixed order.
    pub fn projections(&self) -> impl Iterator<Item = &Projection> {
        self.camera
            .iter()
            .chain(&self.radar)
            .chain(&self.decoder)
            .chain(std::iter::once(&self.readout))
            .chain(&self.inter_heads)
    }

    pub fn projections_mut(&mut self) -> impl Iterator<Item = &mut Projection> {
        self.camera
            .iter_mut()
            .chain(&mut self.radar)
            .chain(&mut self.decoder)
            .chain(std::iter::once(&mut self.readout))
            .chain(&mut self.inter_heads)
    }

    /// Every parameter tensor (weight, then bias, per projection).
    pub fn params(&self) -> Vec<&Tensor> {
        self.projections()
            .flat_map(|p| [&p.weight, &p.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.projections_mut()
            .flat_map(|p| [&mut p.weight, &mut p.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.projections().map(Projection::param_count).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let z = |v: &[Projection]| v.iter().map(Projection::zeros_like).collect();
        Self {
            camera: z(&self.camera),
            radar: z(&self.radar),
            decoder: z(&self.decoder),
            readout: self.readout.zeros_like(),
            inter_heads: z(&self.inter_heads),
        }
    }

    /// `self += k * other`, parameter by parameter.
    pub fn add_scaled(&mut self, other: &ToyModel, k: f64) -> Result<()> {
        for (a, b) in self.params_mut().into_iter().zip(other.params()) {
            a.add_scaled(b, k)?;
        }
        Ok(())
    }

    pub fn forward(&self, inputs: &StudentInputs) -> Result<StudentOutput> {
        if inputs.image[0].dims3()?.2 != self.camera[0].c_in()
            || inputs.radar[0].dims3()?.2 != self.radar[0].c_in()
        {
            return Err(Error::Shape("scene channels do not match the model".into()));
        }
        let (h, w) = (inputs.height, inputs.width);
        let mut cam = Vec::with_capacity(PYRAMID_LEVELS);
        let mut rad = Vec::with_capacity(PYRAMID_LEVELS);
        let mut dec = Vec::with_capacity(PYRAMID_LEVELS);
        let mut fused = Vec::with_capacity(PYRAMID_LEVELS);
        let mut dec_sum = Tensor::zeros(&[h, w, DECODER_CHANNELS])?;
        for i in 0..PYRAMID_LEVELS {
            let c = channel_project(&inputs.image[i], &self.camera[i])?;
            let r = channel_project(&inputs.radar[i], &self.radar[i])?;
            let u = c.add(&r)?;
            let d = channel_project(&u, &self.decoder[i])?;
            dec_sum.add_scaled(&nearest_upsample(&d, 1 << (i + 1))?, 1.0)?;
            cam.push(c);
            rad.push(r);
            dec.push(d);
            fused.push(u);
        }
        let mut depth_pre = linear(&dec_sum, &self.readout)?;
        let mut inter = Vec::with_capacity(INTER_DEPTH_SCALES.len());
        for (&k, head) in INTER_DEPTH_SCALES.iter().zip(&self.inter_heads) {
            let z = linear(&dec[inter_head_level(k) - 1], head)?;
            depth_pre.add_scaled(&nearest_upsample(&z, k)?, HEAD_SHARE)?;
            inter.push(nearest_upsample(&z.map(to_depth), k)?);
        }
        if !depth_pre.all_finite() {
            return Err(Error::NonFinite("student depth".into()));
        }
        let depth = DepthMap::new(depth_pre.map(to_depth))?;
        Ok(StudentOutput {
            camera: FeaturePyramid::new(PyramidRole::Camera, cam)?,
            radar: FeaturePyramid::new(PyramidRole::Radar, rad)?,
            decoder: FeaturePyramid::new(PyramidRole::Decoder, dec)?,
            inter: InterDepthSet::new(inter)?,
            depth,
            fused,
            dec_sum,
            depth_pre,
        })
    }

    /// Parameter gradients given upstream gradients of every output.
    pub fn backward(
        &self,
        inputs: &StudentInputs,
        out: &StudentOutput,
        g: &OutputGrads<'_>,
    ) -> Result<ToyModel> {
        let mut grads = self.zeros_like();
        let dec = out.decoder.levels();
        let mut d_dec: Vec<Tensor> = g.decoder.to_vec();

        let dz = out
            .depth_pre
            .zip_map(g.depth, |z, gd| gd * to_depth_grad(z))?;
        let pg = linear_backward(&out.dec_sum, &self.readout, &dz)?;
        for (i, d) in d_dec.iter_mut().enumerate() {
            d.add_scaled(&block_sum(&pg.d_input, 1 << (i + 1))?, 1.0)?;
        }
        grads.readout = Projection {
            weight: pg.d_weight,
            bias: pg.d_bias,
        };
        for (j, &k) in INTER_DEPTH_SCALES.iter().enumerate() {
            let level = inter_head_level(k) - 1;
            let head = &self.inter_heads[j];
            let z = linear(&dec[level], head)?;
            let mut d_z = z.zip_map(&block_sum(&g.inter[j], k)?, |z, g| g * to_depth_grad(z))?;
            d_z.add_scaled(&block_sum(&dz, k)?, HEAD_SHARE)?;
            let pg = linear_backward(&dec[level], head, &d_z)?;
            d_dec[level].add_scaled(&pg.d_input, 1.0)?;
            grads.inter_heads[j] = Projection {
                weight: pg.d_weight,
                bias: pg.d_bias,
            };
        }
        #[allow(clippy::needless_range_loop)]
        for i in 0..PYRAMID_LEVELS {
            let pg = channel_project_backward(&out.fused[i], &self.decoder[i], &d_dec[i])?;
            let d_cam = pg.d_input.add(&g.camera[i])?;
            let d_rad = pg.d_input.add(&g.radar[i])?;
            grads.decoder[i] = Projection {
                weight: pg.d_weight,
                bias: pg.d_bias,
            };
            let pc = channel_project_backward(&inputs.image[i], &self.camera[i], &d_cam)?;
            grads.camera[i] = Projection {
                weight: pc.d_weight,
                bias: pc.d_bias,
            };
            let pr = channel_project_backward(&inputs.radar[i], &self.radar[i], &d_rad)?;
            grads.radar[i] = Projection {
                weight: pr.d_weight,
                bias: pr.d_bias,
            };
        }
        Ok(grads)
    }

    /// Every ReLU pre-activation of a forward pass, for kink detection.
    pub fn pre_activations(&self, inputs: &StudentInputs) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for i in 0..PYRAMID_LEVELS {
            let zc = linear(&inputs.image[i], &self.camera[i])?;
            let zr = linear(&inputs.radar[i], &self.radar[i])?;
            let u = zc.map(relu).add(&zr.map(relu))?;
            let zd = linear(&u, &self.decoder[i])?;
            out.extend_from_slice(zc.data());
            out.extend_from_slice(zr.data());
            out.extend_from_slice(zd.data());
        }
        Ok(out)
    }
}
