//! The Siamese CVD network: per-view encoders, parallel content and
//! viewpoint heads, and cross-reconstruction decoders, all expressed on
//! the autodiff tape.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CvdError, Result};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Drone,
    Satellite,
}

/// Model hyperparameters. `alpha` splits the embedding width between the
/// content and viewpoint heads; `squeeze = false` keeps both heads at
/// full width.
#[derive(Debug, Clone, PartialEq)]
pub struct CvdConfig {
    pub image_size: usize,
    pub channels: usize,
    pub d: usize,
    pub alpha: f64,
    pub squeeze: bool,
    pub share_encoder: bool,
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub n_projections: usize,
    pub bi_infonce: bool,
    pub seed: u64,
}

impl Default for CvdConfig {
    fn default() -> Self {
        CvdConfig {
            image_size: 32,
            channels: 1,
            d: 64,
            alpha: 0.5,
            squeeze: true,
            share_encoder: true,
            tau: 0.05,
            lambda1: 10.0,
            lambda2: 0.2,
            n_projections: 64,
            bi_infonce: false,
            seed: 0,
        }
    }
}

/// Number of stride-2 encoder blocks (and decoder upsamples).
pub const ENCODER_BLOCKS: usize = 3;

impl CvdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(CvdError::Config(format!("alpha {} outside (0,1]", self.alpha)));
        }
        if self.tau <= 0.0 {
            return Err(CvdError::Config("tau must be positive".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(CvdError::Config("lambda weights must be non-negative".into()));
        }
        if self.n_projections < 1 {
            return Err(CvdError::Config("n_projections must be >= 1".into()));
        }
        if self.image_size % (1 << ENCODER_BLOCKS) != 0 || self.image_size < 16 {
            return Err(CvdError::Config(format!(
                "image_size {} must be >= 16 and divisible by {}",
                self.image_size,
                1 << ENCODER_BLOCKS
            )));
        }
        if self.d < 1 || self.channels < 1 {
            return Err(CvdError::Config("d and channels must be positive".into()));
        }
        self.factor_widths()?;
        Ok(())
    }

    /// (d_c, d_v): content gets round(alpha*d), viewpoint the remainder;
    /// no squeeze keeps both at d.
    pub fn factor_widths(&self) -> Result<(usize, usize)> {
        if !self.squeeze {
            return Ok((self.d, self.d));
        }
        let d_c = (self.alpha * self.d as f64).round() as usize;
        if d_c == 0 || d_c >= self.d {
            return Err(CvdError::Config(format!(
                "alpha {} on d {} rounds a head to zero channels",
                self.alpha, self.d
            )));
        }
        Ok((d_c, self.d - d_c))
    }

    /// Spatial side of the encoder output map.
    pub fn feature_side(&self) -> usize {
        self.image_size >> ENCODER_BLOCKS
    }

    fn encoder_widths(&self) -> [usize; ENCODER_BLOCKS] {
        [(self.d / 4).max(1), (self.d / 2).max(1), self.d]
    }

    fn decoder_widths(&self) -> [usize; ENCODER_BLOCKS] {
        [(self.d / 2).max(1), (self.d / 4).max(1), (self.d / 8).max(1)]
    }
}

/// Per-view embeddings for one drone-satellite batch.
pub struct FactorPair {
    pub z_d: Tensor,
    pub z_s: Tensor,
    pub zc_d: Tensor,
    pub zc_s: Tensor,
    pub zv_d: Tensor,
    pub zv_s: Tensor,
    pub pooled_c_d: Tensor,
    pub pooled_c_s: Tensor,
}

/// Full forward product: factors plus both cross-reconstructions.
pub struct ForwardPair {
    pub factors: FactorPair,
    pub recon_d: Tensor,
    pub recon_s: Tensor,
}

pub struct CvdModel {
    pub cfg: CvdConfig,
    graph: Rc<Graph>,
    params: BTreeMap<String, NodeId>,
}

impl CvdModel {
    pub fn new(cfg: CvdConfig) -> Result<CvdModel> {
        cfg.validate()?;
        let graph = Graph::new(cfg.seed);
        // Separate init stream so the training-time rng (projections,
        // derangements) starts from the same state for every model size.
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut params = BTreeMap::new();
        let mut model = CvdModel {
            cfg,
            graph,
            params: BTreeMap::new(),
        };
        model.build(&mut params, &mut init)?;
        model.params = params;
        model.graph.freeze();
        Ok(model)
    }

    fn build(&self, params: &mut BTreeMap<String, NodeId>, init: &mut ChaCha8Rng) -> Result<()> {
        let cfg = &self.cfg;
        let (d_c, d_v) = cfg.factor_widths()?;
        let enc_w = cfg.encoder_widths();
        let dec_w = cfg.decoder_widths();
        let mut add_conv = |name: String, out_c: usize, in_c: usize, init: &mut ChaCha8Rng| -> Result<()> {
            let std = (2.0 / (in_c * 9) as f64).sqrt();
            let data: Vec<f64> = (0..out_c * in_c * 9)
                .map(|_| {
                    let v: f64 = rand::distributions::Distribution::sample(&rand_distr::StandardNormal, init);
                    v * std
                })
                .collect();
            let w = self.graph.tensor(data, &[out_c, in_c, 3, 3], true)?;
            params.insert(format!("{name}.w"), w.id());
            // Small positive bias keeps ReLU units alive at init even on
            // dark inputs; matters for narrow configs.
            let b = self.graph.tensor(vec![0.01; out_c], &[out_c], true)?;
            params.insert(format!("{name}.b"), b.id());
            Ok(())
        };

        let branches: &[&str] = if cfg.share_encoder { &[""] } else { &["_d", "_s"] };
        for suffix in branches {
            let mut in_c = cfg.channels;
            for (i, &w) in enc_w.iter().enumerate() {
                add_conv(format!("enc{suffix}.b{i}"), w, in_c, init)?;
                in_c = w;
            }
            add_conv(format!("head_c{suffix}"), d_c, cfg.d, init)?;
            add_conv(format!("head_v{suffix}"), d_v, cfg.d, init)?;
        }
        for suffix in ["_d", "_s"] {
            let mut in_c = d_c + d_v;
            for (i, &w) in dec_w.iter().enumerate() {
                add_conv(format!("dec{suffix}.b{i}"), w, in_c, init)?;
                in_c = w;
            }
            add_conv(format!("dec{suffix}.out"), cfg.channels, in_c, init)?;
        }
        Ok(())
    }

    pub fn graph(&self) -> &Rc<Graph> {
        &self.graph
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn param_ids(&self) -> Vec<NodeId> {
        self.params.values().copied().collect()
    }

    pub fn param(&self, name: &str) -> Option<Tensor> {
        self.params.get(name).map(|&id| self.graph.handle(id))
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, Tensor)> {
        self.params.iter().map(|(n, &id)| (n, self.graph.handle(id)))
    }

    pub fn n_params(&self) -> usize {
        self.params
            .values()
            .map(|&id| self.graph.node_data(id).len())
            .sum()
    }

    fn branch_suffix(&self, view: View) -> &'static str {
        if self.cfg.share_encoder {
            ""
        } else {
            match view {
                View::Drone => "_d",
                View::Satellite => "_s",
            }
        }
    }

    fn conv_block(&self, x: &Tensor, name: &str, stride: usize, relu: bool) -> Result<Tensor> {
        let w = self
            .param(&format!("{name}.w"))
            .ok_or_else(|| CvdError::Config(format!("missing parameter {name}.w")))?;
        let b = self.param(&format!("{name}.b")).unwrap();
        let y = x.conv2d(&w, stride, 1)?.add_channel_bias(&b)?;
        if relu {
            y.relu()
        } else {
            Ok(y)
        }
    }

    /// Encoder: stride-2 conv blocks down to a [B, d, h, w] feature map.
    pub fn encode(&self, image: &Tensor, view: View) -> Result<Tensor> {
        let cfg = &self.cfg;
        let shape = image.shape();
        if shape.len() != 4 || shape[1] != cfg.channels || shape[2] != cfg.image_size || shape[3] != cfg.image_size {
            return Err(CvdError::Shape(format!(
                "input {:?} does not match configured {}x{}x{}",
                shape, cfg.channels, cfg.image_size, cfg.image_size
            )));
        }
        let sfx = self.branch_suffix(view);
        let mut x = image.clone();
        for i in 0..ENCODER_BLOCKS {
            x = self.conv_block(&x, &format!("enc{sfx}.b{i}"), 2, true)?;
        }
        Ok(x)
    }

    /// Parallel 3x3 conv projections onto content and viewpoint factors.
    pub fn disentangle(&self, z: &Tensor, view: View) -> Result<(Tensor, Tensor)> {
        if z.shape().len() != 4 || z.shape()[1] != self.cfg.d {
            return Err(CvdError::Shape(format!(
                "disentangle expects width {} maps, got {:?}",
                self.cfg.d,
                z.shape()
            )));
        }
        let sfx = self.branch_suffix(view);
        let zc = self.conv_block(z, &format!("head_c{sfx}"), 1, false)?;
        let zv = self.conv_block(z, &format!("head_v{sfx}"), 1, false)?;
        Ok((zc, zv))
    }

    /// Global average pool then L2-normalize: the retrieval vector.
    pub fn pool_content(&self, z_c: &Tensor) -> Result<Tensor> {
        z_c.mean_spatial()?.l2_normalize_rows()
    }

    /// Decode an image from another view's content and this view's
    /// viewpoint map. `view` picks the decoder.
    pub fn cross_reconstruct(&self, zc_other: &Tensor, zv_own: &Tensor, view: View) -> Result<Tensor> {
        if zc_other.shape()[0] != zv_own.shape()[0]
            || zc_other.shape()[2..] != zv_own.shape()[2..]
        {
            return Err(CvdError::Shape(format!(
                "factor maps not spatially aligned: {:?} vs {:?}",
                zc_other.shape(),
                zv_own.shape()
            )));
        }
        let sfx = match view {
            View::Drone => "_d",
            View::Satellite => "_s",
        };
        let mut x = Tensor::concat_axis1(&[zc_other, zv_own])?;
        for i in 0..ENCODER_BLOCKS {
            x = x.upsample2x()?;
            x = self.conv_block(&x, &format!("dec{sfx}.b{i}"), 1, true)?;
        }
        self.conv_block(&x, &format!("dec{sfx}.out"), 1, false)?.sigmoid()
    }

    /// Embeddings, factor maps and pooled retrieval vectors for one batch
    /// of paired views — everything except the reconstructions.
    pub fn forward_factors(&self, drone: &Tensor, satellite: &Tensor) -> Result<FactorPair> {
        if drone.shape()[0] != satellite.shape()[0] {
            return Err(CvdError::Shape("batch sizes differ between views".into()));
        }
        let z_d = self.encode(drone, View::Drone)?;
        let z_s = self.encode(satellite, View::Satellite)?;
        let (zc_d, zv_d) = self.disentangle(&z_d, View::Drone)?;
        let (zc_s, zv_s) = self.disentangle(&z_s, View::Satellite)?;
        let pooled_c_d = self.pool_content(&zc_d)?;
        let pooled_c_s = self.pool_content(&zc_s)?;
        Ok(FactorPair {
            z_d,
            z_s,
            zc_d,
            zc_s,
            zv_d,
            zv_s,
            pooled_c_d,
            pooled_c_s,
        })
    }

    /// Full pipeline for one batch of paired views.
    pub fn forward_pair(&self, drone: &Tensor, satellite: &Tensor) -> Result<ForwardPair> {
        let factors = self.forward_factors(drone, satellite)?;
        let recon_d = self.cross_reconstruct(&factors.zc_s, &factors.zv_d, View::Drone)?;
        let recon_s = self.cross_reconstruct(&factors.zc_d, &factors.zv_s, View::Satellite)?;
        Ok(ForwardPair {
            factors,
            recon_d,
            recon_s,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptKind {
    Sgd,
    Adam,
}

/// SGD / Adam over the model's named parameters. State iterates in name
/// order, so stepping is deterministic.
pub struct Optimizer {
    pub kind: OptKind,
    pub lr: f64,
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptKind, lr: f64) -> Optimizer {
        Optimizer {
            kind,
            lr,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, model: &CvdModel) {
        self.t += 1;
        for (name, id) in model.params.iter() {
            let graph = model.graph();
            let grad = match graph.node_grad(*id) {
                Some(g) => g,
                None => continue,
            };
            match self.kind {
                OptKind::Sgd => {
                    let lr = self.lr;
                    graph.update_node_data(*id, |d| {
                        for (d, g) in d.iter_mut().zip(&grad) {
                            *d -= lr * g;
                        }
                    });
                }
                OptKind::Adam => {
                    let m = self
                        .m
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; grad.len()]);
                    for (m, g) in m.iter_mut().zip(&grad) {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    }
                    let v = self
                        .v
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; grad.len()]);
                    for (v, g) in v.iter_mut().zip(&grad) {
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    }
                    let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                    let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                    let lr = self.lr;
                    let (m, v) = (self.m.get(name).unwrap(), self.v.get(name).unwrap());
                    graph.update_node_data(*id, |d| {
                        for i in 0..d.len() {
                            let mh = m[i] / bc1;
                            let vh = v[i] / bc2;
                            d[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
                        }
                    });
                }
            }
        }
    }
}
