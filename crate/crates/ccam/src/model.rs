//! Toy trainable classifier exposing the last feature maps and FC weights.
//!
//! The backbone is deliberately small: non-overlapping patch embedding,
//! ReLU, an optional non-local block on the low-level maps, 2×2 average
//! pooling, a per-location channel linear, ReLU, an optional non-local block
//! on the high-level maps, then global average pooling into a bias-free FC
//! classifier. Everything reduces to matrix products, pooling and the
//! attention block, and every layer has an analytic backward pass.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gradcheck::{GradCheckReport, GroupReport, FD_STEP};
use crate::nonlocal::{nl_backward, nl_forward, NonLocalCache, NonLocalGrads, NonLocalParams};
use crate::storage::Checkpoint;
use crate::tensor::{matmul, softmax_slice, spatial_mean, Tensor};

/// Input images are single-channel.
pub const IN_CHANNELS: usize = 1;

pub const DEFAULT_PATCH: usize = 2;
pub const DEFAULT_WIDTH1: usize = 32;
pub const DEFAULT_WIDTH2: usize = 32;
pub const DEFAULT_REDUCTION: usize = 8;

/// Architecture hyperparameters plus the init seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
    pub width1: usize,
    pub width2: usize,
    pub classes: usize,
    pub nl_low: bool,
    pub nl_high: bool,
    pub reduction: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Default architecture for a dataset of `image_h`×`image_w` images.
    pub fn for_dataset(
        image_h: usize,
        image_w: usize,
        classes: usize,
        nl_low: bool,
        nl_high: bool,
        seed: u64,
    ) -> Self {
        ModelConfig {
            image_h,
            image_w,
            patch: DEFAULT_PATCH,
            width1: DEFAULT_WIDTH1,
            width2: DEFAULT_WIDTH2,
            classes,
            nl_low,
            nl_high,
            reduction: DEFAULT_REDUCTION,
            seed,
        }
    }

    /// Small configuration used by the gradient checker.
    pub fn gradcheck_small(seed: u64) -> Self {
        ModelConfig::for_dataset(16, 16, 3, true, true, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        if self.patch == 0 || self.width1 == 0 || self.width2 == 0 || self.reduction == 0 {
            return Err(Error::invalid("patch, widths and reduction must be positive"));
        }
        if !self.image_h.is_multiple_of(self.patch) || !self.image_w.is_multiple_of(self.patch) {
            return Err(Error::invalid(format!(
                "image {}x{} not divisible by patch {}",
                self.image_h, self.image_w, self.patch
            )));
        }
        let (h1, w1) = self.low_spatial();
        if !h1.is_multiple_of(2) || !w1.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "patch grid {h1}x{w1} must be even for 2x2 pooling"
            )));
        }
        Ok(())
    }

    /// Spatial extent of the pre-pool feature maps.
    pub fn low_spatial(&self) -> (usize, usize) {
        (self.image_h / self.patch, self.image_w / self.patch)
    }

    /// Spatial extent of the final feature maps f.
    pub fn high_spatial(&self) -> (usize, usize) {
        let (h1, w1) = self.low_spatial();
        (h1 / 2, w1 / 2)
    }

    pub fn to_metadata(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("image_h".into(), self.image_h.to_string());
        m.insert("image_w".into(), self.image_w.to_string());
        m.insert("patch".into(), self.patch.to_string());
        m.insert("width1".into(), self.width1.to_string());
        m.insert("width2".into(), self.width2.to_string());
        m.insert("classes".into(), self.classes.to_string());
        m.insert("nl_low".into(), (self.nl_low as u8).to_string());
        m.insert("nl_high".into(), (self.nl_high as u8).to_string());
        m.insert("reduction".into(), self.reduction.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m
    }

    pub fn from_metadata(meta: &BTreeMap<String, String>) -> Result<Self> {
        fn field<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
            let raw = meta
                .get(key)
                .ok_or_else(|| Error::invalid(format!("checkpoint metadata missing {key:?}")))?;
            raw.parse()
                .map_err(|_| Error::invalid(format!("bad metadata value {key}={raw:?}")))
        }
        let cfg = ModelConfig {
            image_h: field(meta, "image_h")?,
            image_w: field(meta, "image_w")?,
            patch: field(meta, "patch")?,
            width1: field(meta, "width1")?,
            width2: field(meta, "width2")?,
            classes: field(meta, "classes")?,
            nl_low: field::<u8>(meta, "nl_low")? != 0,
            nl_high: field::<u8>(meta, "nl_high")? != 0,
            reduction: field(meta, "reduction")?,
            seed: field(meta, "seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// All trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embed_w: Tensor, // width1 × (patch²·Cin)
    pub nl_low: Option<NonLocalParams>,
    pub stage2_w: Tensor, // width2 × width1
    pub nl_high: Option<NonLocalParams>,
    pub fc_w: Tensor, // width2 × classes
}

/// Gradients mirroring [`ModelParams`].
#[derive(Debug)]
pub struct ModelGrads {
    pub embed_w: Tensor,
    pub nl_low: Option<NonLocalGrads>,
    pub stage2_w: Tensor,
    pub nl_high: Option<NonLocalGrads>,
    pub fc_w: Tensor,
}

/// FNV-1a, used to give every parameter tensor its own init stream so the
/// same seed yields identical shared-layer weights whether or not the
/// non-local blocks are enabled.
fn name_hash(name: &str) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for b in name.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn stream_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ name_hash(name)))
}

fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let scale = 1.0 / (fan_in as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape, data).expect("static shape")
}

/// The classifier: configuration plus parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Outputs of one forward pass.
pub struct ForwardOutput {
    pub logits: Tensor,   // K
    pub features: Tensor, // N × H × W, the maps the CAM engine consumes
    pub pooled: Tensor,   // N, global average of `features`
}

struct ForwardCache {
    patches: Tensor,     // (patch²·Cin) × L1
    pre1: Tensor,        // width1 × L1 pre-ReLU
    nl_low: Option<NonLocalCache>,
    pooled1: Tensor,     // width1 × L2
    pre2: Tensor,        // width2 × L2 pre-ReLU
    nl_high: Option<NonLocalCache>,
    features: Tensor,    // width2 × H2 × W2
    pooled: Tensor,      // width2
    logits: Tensor,      // K
}

fn relu(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(t.shape(), data).expect("same shape")
}

fn relu_backward(upstream: &Tensor, pre: &Tensor) -> Tensor {
    let data = upstream
        .data()
        .iter()
        .zip(pre.data())
        .map(|(&d, &p)| if p > 0.0 { d } else { 0.0 })
        .collect();
    Tensor::new(upstream.shape(), data).expect("same shape")
}

fn axpy(dst: &mut Tensor, scale: f64, src: &Tensor) {
    debug_assert_eq!(dst.shape(), src.shape());
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += scale * s;
    }
}

impl Model {
    /// Fresh model with seeded weights and zero-initialized normalization.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let patch_dim = config.patch * config.patch * IN_CHANNELS;
        let embed_w = uniform_init(
            &[config.width1, patch_dim],
            patch_dim,
            &mut stream_rng(config.seed, "embed.W"),
        );
        let nl_low = if config.nl_low {
            Some(NonLocalParams::init(
                config.width1,
                config.reduction,
                &mut stream_rng(config.seed, "nl0"),
            )?)
        } else {
            None
        };
        let stage2_w = uniform_init(
            &[config.width2, config.width1],
            config.width1,
            &mut stream_rng(config.seed, "stage2.W"),
        );
        let nl_high = if config.nl_high {
            Some(NonLocalParams::init(
                config.width2,
                config.reduction,
                &mut stream_rng(config.seed, "nl1"),
            )?)
        } else {
            None
        };
        let fc_w = uniform_init(
            &[config.width2, config.classes],
            config.width2,
            &mut stream_rng(config.seed, "fc.W"),
        );
        Ok(Model {
            config: config.clone(),
            params: ModelParams {
                embed_w,
                nl_low,
                stage2_w,
                nl_high,
                fc_w,
            },
        })
    }

    fn check_image(&self, img: &Tensor) -> Result<()> {
        let expected = [IN_CHANNELS, self.config.image_h, self.config.image_w];
        if img.shape() != expected {
            return Err(Error::shape(format!(
                "image has shape {:?}, model expects {expected:?}",
                img.shape()
            )));
        }
        Ok(())
    }

    /// Non-overlapping patch extraction: column l holds the flattened
    /// patch at grid location l.
    fn extract_patches(&self, img: &Tensor) -> Tensor {
        let p = self.config.patch;
        let (h1, w1) = self.config.low_spatial();
        let patch_dim = p * p * IN_CHANNELS;
        let mut out = vec![0.0; patch_dim * h1 * w1];
        let locations = h1 * w1;
        for cy in 0..h1 {
            for cx in 0..w1 {
                let l = cy * w1 + cx;
                for c in 0..IN_CHANNELS {
                    for py in 0..p {
                        for px in 0..p {
                            let row = (c * p + py) * p + px;
                            out[row * locations + l] = img.at3(c, cy * p + py, cx * p + px);
                        }
                    }
                }
            }
        }
        Tensor::new(&[patch_dim, locations], out).expect("static shape")
    }

    fn forward_cached(&self, img: &Tensor) -> Result<ForwardCache> {
        self.check_image(img)?;
        let (h1, w1) = self.config.low_spatial();
        let (h2, w2) = self.config.high_spatial();

        let patches = self.extract_patches(img);
        let pre1 = matmul(&self.params.embed_w, &patches)?;
        let act1 = relu(&pre1);

        let (low_out, nl_low_cache) = match &self.params.nl_low {
            Some(block) => {
                let (y, cache) = nl_forward(&act1.reshaped(&[self.config.width1, h1, w1])?, block)?;
                (y.reshaped(&[self.config.width1, h1 * w1])?, Some(cache))
            }
            None => (act1, None),
        };

        let pooled1 = avg_pool_2x2(&low_out, self.config.width1, h1, w1)?;
        let pre2 = matmul(&self.params.stage2_w, &pooled1)?;
        let act2 = relu(&pre2);

        let (features, nl_high_cache) = match &self.params.nl_high {
            Some(block) => {
                let (y, cache) = nl_forward(&act2.reshaped(&[self.config.width2, h2, w2])?, block)?;
                (y, Some(cache))
            }
            None => (act2.reshaped(&[self.config.width2, h2, w2])?, None),
        };

        let pooled = spatial_mean(&features)?;
        let logits = matmul(&pooled.reshaped(&[1, self.config.width2])?, &self.params.fc_w)?
            .reshaped(&[self.config.classes])?;

        Ok(ForwardCache {
            patches,
            pre1,
            nl_low: nl_low_cache,
            pooled1,
            pre2,
            nl_high: nl_high_cache,
            features,
            pooled,
            logits,
        })
    }

    /// Forward pass returning logits, the final feature maps f and their
    /// spatial average F.
    pub fn forward(&self, img: &Tensor) -> Result<ForwardOutput> {
        let cache = self.forward_cached(img)?;
        Ok(ForwardOutput {
            logits: cache.logits,
            features: cache.features,
            pooled: cache.pooled,
        })
    }

    /// Backward pass from d(logits); returns parameter gradients.
    fn backward(&self, cache: &ForwardCache, dlogits: &[f64]) -> Result<ModelGrads> {
        let cfg = &self.config;
        let (h1, w1) = cfg.low_spatial();
        let (h2, w2) = cfg.high_spatial();
        let area2 = (h2 * w2) as f64;

        // logits = F · fc_w.
        let mut dfc = vec![0.0; cfg.width2 * cfg.classes];
        let mut dpooled = vec![0.0; cfg.width2];
        for n in 0..cfg.width2 {
            let f_n = cache.pooled.data()[n];
            for (c, &dl) in dlogits.iter().enumerate() {
                dfc[n * cfg.classes + c] = f_n * dl;
                dpooled[n] += self.params.fc_w.at2(n, c) * dl;
            }
        }

        // F = spatial mean of f.
        let mut dfeatures = vec![0.0; cfg.width2 * h2 * w2];
        for n in 0..cfg.width2 {
            let g = dpooled[n] / area2;
            for l in 0..h2 * w2 {
                dfeatures[n * h2 * w2 + l] = g;
            }
        }
        let dfeatures = Tensor::new(&[cfg.width2, h2, w2], dfeatures)?;

        let (dact2, nl_high_grads) = match (&self.params.nl_high, &cache.nl_high) {
            (Some(block), Some(nl_cache)) => {
                let (dx, grads) = nl_backward(block, nl_cache, &dfeatures)?;
                (dx.reshaped(&[cfg.width2, h2 * w2])?, Some(grads))
            }
            _ => (dfeatures.reshaped(&[cfg.width2, h2 * w2])?, None),
        };

        let dpre2 = relu_backward(&dact2, &cache.pre2);
        let dstage2 = matmul(&dpre2, &cache.pooled1.transposed2()?)?;
        let dpooled1 = matmul(&self.params.stage2_w.transposed2()?, &dpre2)?;

        let dlow_out = avg_pool_2x2_backward(&dpooled1, cfg.width1, h1, w1)?;

        let (dact1, nl_low_grads) = match (&self.params.nl_low, &cache.nl_low) {
            (Some(block), Some(nl_cache)) => {
                let (dx, grads) =
                    nl_backward(block, nl_cache, &dlow_out.reshaped(&[cfg.width1, h1, w1])?)?;
                (dx.reshaped(&[cfg.width1, h1 * w1])?, Some(grads))
            }
            _ => (dlow_out, None),
        };

        let dpre1 = relu_backward(&dact1, &cache.pre1);
        let dembed = matmul(&dpre1, &cache.patches.transposed2()?)?;

        Ok(ModelGrads {
            embed_w: dembed,
            nl_low: nl_low_grads,
            stage2_w: dstage2,
            nl_high: nl_high_grads,
            fc_w: Tensor::new(&[cfg.width2, cfg.classes], dfc)?,
        })
    }

    /// Mean cross-entropy and its gradients over one batch of indices.
    ///
    /// Per-example passes fan out over the thread pool; the reduction runs
    /// in batch order so results are deterministic.
    pub fn batch_gradients(
        &self,
        images: &[Tensor],
        labels: &[usize],
        batch: &[usize],
    ) -> Result<(f64, ModelGrads)> {
        let inv = 1.0 / batch.len() as f64;
        let per_example: Vec<Result<(f64, ModelGrads)>> = batch
            .par_iter()
            .map(|&idx| {
                let cache = self.forward_cached(&images[idx])?;
                let (loss, mut dlogits) = cross_entropy(cache.logits.data(), labels[idx]);
                for d in &mut dlogits {
                    *d *= inv;
                }
                let grads = self.backward(&cache, &dlogits)?;
                Ok((loss, grads))
            })
            .collect();
        let mut total = ModelGrads::zeros(&self.params);
        let mut loss_sum = 0.0;
        for item in per_example {
            let (loss, grads) = item?;
            loss_sum += loss;
            total.accumulate(&grads);
        }
        Ok((loss_sum * inv, total))
    }

    /// Mean cross-entropy over a batch, forward only.
    pub fn batch_loss(&self, images: &[Tensor], labels: &[usize], batch: &[usize]) -> Result<f64> {
        let mut loss_sum = 0.0;
        for &idx in batch {
            let cache = self.forward_cached(&images[idx])?;
            loss_sum += cross_entropy(cache.logits.data(), labels[idx]).0;
        }
        Ok(loss_sum / batch.len() as f64)
    }

    /// Canonical parameter names in architecture order.
    pub fn param_names(&self) -> Vec<String> {
        self.params.names()
    }

    pub fn to_checkpoint(&self, extra: &BTreeMap<String, String>) -> Checkpoint {
        let mut entries = Vec::new();
        for name in self.params.names() {
            entries.push((name.clone(), self.params.get(&name).unwrap().clone()));
        }
        let mut metadata = self.config.to_metadata();
        for (k, v) in extra {
            metadata.insert(k.clone(), v.clone());
        }
        Checkpoint { entries, metadata }
    }

    /// Rebuild a model from a checkpoint, demanding exactly the parameter
    /// set the architecture defines.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_metadata(&ckpt.metadata)?;
        let mut remaining: BTreeMap<&str, &Tensor> = BTreeMap::new();
        for (name, tensor) in &ckpt.entries {
            remaining.insert(name.as_str(), tensor);
        }
        let mut take = |name: &str| -> Result<Tensor> {
            remaining
                .remove(name)
                .cloned()
                .ok_or_else(|| Error::MissingParameter(name.to_string()))
        };

        let embed_w = take("embed.W")?;
        let nl_low = if config.nl_low {
            Some(NonLocalParams::from_parts(
                take("nl0.Wf")?,
                take("nl0.Wg")?,
                take("nl0.Wh")?,
                take("nl0.Wk")?,
                take("nl0.gamma")?,
                take("nl0.beta")?,
                config.reduction,
            )?)
        } else {
            None
        };
        let stage2_w = take("stage2.W")?;
        let nl_high = if config.nl_high {
            Some(NonLocalParams::from_parts(
                take("nl1.Wf")?,
                take("nl1.Wg")?,
                take("nl1.Wh")?,
                take("nl1.Wk")?,
                take("nl1.gamma")?,
                take("nl1.beta")?,
                config.reduction,
            )?)
        } else {
            None
        };
        let fc_w = take("fc.W")?;
        if let Some((name, _)) = remaining.into_iter().next() {
            return Err(Error::UnexpectedParameter(name.to_string()));
        }

        let expect = |name: &str, t: &Tensor, shape: &[usize]| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::shape(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(())
        };
        expect(
            "embed.W",
            &embed_w,
            &[config.width1, config.patch * config.patch * IN_CHANNELS],
        )?;
        expect("stage2.W", &stage2_w, &[config.width2, config.width1])?;
        expect("fc.W", &fc_w, &[config.width2, config.classes])?;

        Ok(Model {
            config,
            params: ModelParams {
                embed_w,
                nl_low,
                stage2_w,
                nl_high,
                fc_w,
            },
        })
    }
}

impl ModelParams {
    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["embed.W".to_string()];
        if self.nl_low.is_some() {
            for suffix in ["Wf", "Wg", "Wh", "Wk", "gamma", "beta"] {
                names.push(format!("nl0.{suffix}"));
            }
        }
        names.push("stage2.W".to_string());
        if self.nl_high.is_some() {
            for suffix in ["Wf", "Wg", "Wh", "Wk", "gamma", "beta"] {
                names.push(format!("nl1.{suffix}"));
            }
        }
        names.push("fc.W".to_string());
        names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        match name {
            "embed.W" => Some(&self.embed_w),
            "stage2.W" => Some(&self.stage2_w),
            "fc.W" => Some(&self.fc_w),
            _ => {
                let (block, field) = name.split_once('.')?;
                let p = match block {
                    "nl0" => self.nl_low.as_ref()?,
                    "nl1" => self.nl_high.as_ref()?,
                    _ => return None,
                };
                match field {
                    "Wf" => Some(&p.wf),
                    "Wg" => Some(&p.wg),
                    "Wh" => Some(&p.wh),
                    "Wk" => Some(&p.wk),
                    "gamma" => Some(&p.gamma),
                    "beta" => Some(&p.beta),
                    _ => None,
                }
            }
        }
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            "embed.W" => Some(&mut self.embed_w),
            "stage2.W" => Some(&mut self.stage2_w),
            "fc.W" => Some(&mut self.fc_w),
            _ => {
                let (block, field) = name.split_once('.')?;
                let p = match block {
                    "nl0" => self.nl_low.as_mut()?,
                    "nl1" => self.nl_high.as_mut()?,
                    _ => return None,
                };
                match field {
                    "Wf" => Some(&mut p.wf),
                    "Wg" => Some(&mut p.wg),
                    "Wh" => Some(&mut p.wh),
                    "Wk" => Some(&mut p.wk),
                    "gamma" => Some(&mut p.gamma),
                    "beta" => Some(&mut p.beta),
                    _ => None,
                }
            }
        }
    }

    fn sgd_step(&mut self, grads: &ModelGrads, lr: f64) {
        axpy(&mut self.embed_w, -lr, &grads.embed_w);
        axpy(&mut self.stage2_w, -lr, &grads.stage2_w);
        axpy(&mut self.fc_w, -lr, &grads.fc_w);
        if let (Some(p), Some(g)) = (self.nl_low.as_mut(), grads.nl_low.as_ref()) {
            nl_axpy(p, -lr, g);
        }
        if let (Some(p), Some(g)) = (self.nl_high.as_mut(), grads.nl_high.as_ref()) {
            nl_axpy(p, -lr, g);
        }
    }
}

fn nl_axpy(p: &mut NonLocalParams, scale: f64, g: &NonLocalGrads) {
    axpy(&mut p.wf, scale, &g.wf);
    axpy(&mut p.wg, scale, &g.wg);
    axpy(&mut p.wh, scale, &g.wh);
    axpy(&mut p.wk, scale, &g.wk);
    axpy(&mut p.gamma, scale, &g.gamma);
    axpy(&mut p.beta, scale, &g.beta);
}

impl ModelGrads {
    fn zeros(params: &ModelParams) -> Self {
        let zeros_like = |t: &Tensor| Tensor::zeros(t.shape()).expect("valid shape");
        let nl_zeros = |p: &NonLocalParams| NonLocalGrads {
            wf: zeros_like(&p.wf),
            wg: zeros_like(&p.wg),
            wh: zeros_like(&p.wh),
            wk: zeros_like(&p.wk),
            gamma: zeros_like(&p.gamma),
            beta: zeros_like(&p.beta),
        };
        ModelGrads {
            embed_w: zeros_like(&params.embed_w),
            nl_low: params.nl_low.as_ref().map(nl_zeros),
            stage2_w: zeros_like(&params.stage2_w),
            nl_high: params.nl_high.as_ref().map(nl_zeros),
            fc_w: zeros_like(&params.fc_w),
        }
    }

    fn accumulate(&mut self, other: &ModelGrads) {
        axpy(&mut self.embed_w, 1.0, &other.embed_w);
        axpy(&mut self.stage2_w, 1.0, &other.stage2_w);
        axpy(&mut self.fc_w, 1.0, &other.fc_w);
        if let (Some(a), Some(b)) = (self.nl_low.as_mut(), other.nl_low.as_ref()) {
            grads_axpy(a, b);
        }
        if let (Some(a), Some(b)) = (self.nl_high.as_mut(), other.nl_high.as_ref()) {
            grads_axpy(a, b);
        }
    }

    /// Gradient tensor by parameter name (same naming as the params).
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        match name {
            "embed.W" => Some(&self.embed_w),
            "stage2.W" => Some(&self.stage2_w),
            "fc.W" => Some(&self.fc_w),
            _ => {
                let (block, field) = name.split_once('.')?;
                let g = match block {
                    "nl0" => self.nl_low.as_ref()?,
                    "nl1" => self.nl_high.as_ref()?,
                    _ => return None,
                };
                match field {
                    "Wf" => Some(&g.wf),
                    "Wg" => Some(&g.wg),
                    "Wh" => Some(&g.wh),
                    "Wk" => Some(&g.wk),
                    "gamma" => Some(&g.gamma),
                    "beta" => Some(&g.beta),
                    _ => None,
                }
            }
        }
    }
}

fn grads_axpy(dst: &mut NonLocalGrads, src: &NonLocalGrads) {
    axpy(&mut dst.wf, 1.0, &src.wf);
    axpy(&mut dst.wg, 1.0, &src.wg);
    axpy(&mut dst.wh, 1.0, &src.wh);
    axpy(&mut dst.wk, 1.0, &src.wk);
    axpy(&mut dst.gamma, 1.0, &src.gamma);
    axpy(&mut dst.beta, 1.0, &src.beta);
}

fn avg_pool_2x2(flat: &Tensor, channels: usize, h: usize, w: usize) -> Result<Tensor> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; channels * h2 * w2];
    let data = flat.data();
    for c in 0..channels {
        for y in 0..h2 {
            for x in 0..w2 {
                let mut acc = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc += data[c * h * w + (2 * y + dy) * w + (2 * x + dx)];
                    }
                }
                out[c * h2 * w2 + y * w2 + x] = acc / 4.0;
            }
        }
    }
    Tensor::new(&[channels, h2 * w2], out)
}

fn avg_pool_2x2_backward(dpooled: &Tensor, channels: usize, h: usize, w: usize) -> Result<Tensor> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; channels * h * w];
    let data = dpooled.data();
    for c in 0..channels {
        for y in 0..h2 {
            for x in 0..w2 {
                let g = data[c * h2 * w2 + y * w2 + x] / 4.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        out[c * h * w + (2 * y + dy) * w + (2 * x + dx)] = g;
                    }
                }
            }
        }
    }
    Tensor::new(&[channels, h * w], out)
}

/// Stable softmax cross-entropy; returns (loss, d loss / d logits).
fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let loss = lse - logits[label];
    let mut grad = softmax_slice(logits);
    grad[label] -= 1.0;
    (loss, grad)
}

/// Training hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 0.01,
            batch: 16,
        }
    }
}

/// Plain SGD on mean cross-entropy; deterministic for a fixed seed.
/// Returns the trained model and the per-epoch loss curve.
pub fn train(
    images: &[Tensor],
    labels: &[usize],
    cfg: &ModelConfig,
    tc: &TrainConfig,
) -> Result<(Model, Vec<f64>)> {
    if images.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if images.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= cfg.classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {} classes",
            cfg.classes
        )));
    }
    if tc.batch == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }

    let mut model = Model::init(cfg)?;
    let mut rng = stream_rng(cfg.seed, "train.shuffle");
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut curve = Vec::with_capacity(tc.epochs);

    for _ in 0..tc.epochs {
        // Fisher-Yates on the seeded stream.
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for batch in order.chunks(tc.batch) {
            let (loss, grads) = model.batch_gradients(images, labels, batch)?;
            model.params.sgd_step(&grads, tc.lr);
            epoch_loss += loss * batch.len() as f64;
        }
        curve.push(epoch_loss / images.len() as f64);
    }
    Ok((model, curve))
}

/// Compare every parameter gradient of the full batch loss against central
/// finite differences. `inject_fault` corrupts one analytic component first,
/// which is how the CLI proves the checker actually bites.
///
/// The check model gets random (non-zero) normalization scales: at the
/// zero initialization the attention projections carry exactly zero
/// gradient, which would make their comparison vacuous.
pub fn grad_check_model(cfg: &ModelConfig, seed: u64, inject_fault: bool) -> Result<GradCheckReport> {
    cfg.validate()?;
    let mut model = Model::init(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ name_hash("gradcheck.batch")));
    for block in [model.params.nl_low.as_mut(), model.params.nl_high.as_mut()]
        .into_iter()
        .flatten()
    {
        for t in [&mut block.gamma, &mut block.beta] {
            for v in t.data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
    }
    let n = 2;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let len = IN_CHANNELS * cfg.image_h * cfg.image_w;
        let data: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
        images.push(Tensor::new(&[IN_CHANNELS, cfg.image_h, cfg.image_w], data)?);
        labels.push(i % cfg.classes);
    }
    let batch: Vec<usize> = (0..n).collect();

    let (_, mut grads) = model.batch_gradients(&images, &labels, &batch)?;
    if inject_fault {
        let first = model.param_names()[0].clone();
        if let Some(t) = grads_get_mut(&mut grads, &first) {
            t.data_mut()[0] = t.data()[0] * 1.5 + 0.01;
        }
    }

    let mut groups = Vec::new();
    for name in model.param_names() {
        let analytic = grads.get(&name).expect("grad for every param").clone();
        let errors: Vec<Result<f64>> = (0..analytic.len())
            .into_par_iter()
            .map(|idx| {
                let mut probe = model.clone();
                let slot = probe.params.get_mut(&name).expect("param exists");
                let original = slot.data()[idx];
                slot.data_mut()[idx] = original + FD_STEP;
                let plus = probe.batch_loss(&images, &labels, &batch)?;
                let slot = probe.params.get_mut(&name).expect("param exists");
                slot.data_mut()[idx] = original - FD_STEP;
                let minus = probe.batch_loss(&images, &labels, &batch)?;
                let numeric = (plus - minus) / (2.0 * FD_STEP);
                Ok(crate::gradcheck::relative_error(
                    analytic.data()[idx],
                    numeric,
                ))
            })
            .collect();
        let mut worst = 0.0f64;
        for err in errors {
            worst = worst.max(err?);
        }
        groups.push(GroupReport {
            name,
            max_rel_error: worst,
            components: analytic.len(),
        });
    }
    Ok(GradCheckReport { groups })
}

fn grads_get_mut<'a>(grads: &'a mut ModelGrads, name: &str) -> Option<&'a mut Tensor> {
    match name {
        "embed.W" => Some(&mut grads.embed_w),
        "stage2.W" => Some(&mut grads.stage2_w),
        "fc.W" => Some(&mut grads.fc_w),
        _ => {
            let (block, field) = name.split_once('.')?;
            let g = match block {
                "nl0" => grads.nl_low.as_mut()?,
                "nl1" => grads.nl_high.as_mut()?,
                _ => return None,
            };
            match field {
                "Wf" => Some(&mut g.wf),
                "Wg" => Some(&mut g.wg),
                "Wh" => Some(&mut g.wh),
                "Wk" => Some(&mut g.wk),
                "gamma" => Some(&mut g.gamma),
                "beta" => Some(&mut g.beta),
                _ => None,
            }
        }
    }
}
