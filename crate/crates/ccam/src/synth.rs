//! Deterministic synthetic dataset with known boxes.
//!
//! Every image is a smooth value-noise background (class-independent) with
//! one class-specific grating blob pasted at a random position. The blob's
//! rectangle is the ground-truth box, so localization quality and background
//! suppression are measurable without manual annotation.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::localization::BoxPx;
use crate::model::IN_CHANNELS;
use crate::tensor::{bilinear_resize, Tensor};

/// Generation parameters.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    /// Square image side length.
    pub image_size: usize,
    pub blob_min: usize,
    pub blob_max: usize,
    /// Lattice spacing of the background value noise, in pixels.
    pub texture_scale: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        if self.per_class_train == 0 {
            return Err(Error::invalid("per-class train count must be positive"));
        }
        if self.blob_min == 0 || self.blob_min > self.blob_max {
            return Err(Error::invalid(format!(
                "bad blob size range {}..={}",
                self.blob_min, self.blob_max
            )));
        }
        if self.blob_max > self.image_size {
            return Err(Error::invalid(format!(
                "blob size {} does not fit a {}-pixel image",
                self.blob_max, self.image_size
            )));
        }
        if self.texture_scale == 0 {
            return Err(Error::invalid("texture scale must be positive"));
        }
        Ok(())
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 8,
            per_class_train: 250,
            per_class_test: 50,
            image_size: 32,
            blob_min: 14,
            blob_max: 20,
            texture_scale: 8,
            seed: 0,
        }
    }
}

/// One labelled image with its ground-truth box.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Tensor, // 1 × S × S
    pub label: usize,
    pub boxes: Vec<BoxPx>,
}

/// Disjoint train/test splits.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Per-class grating: orientation walks the half-circle, wavelength
/// alternates so neighbouring orientations stay separable, and the phase is
/// fixed per class so blob content is stable within a class.
fn class_pattern(class: usize, classes: usize) -> (f64, f64, f64) {
    let angle = std::f64::consts::PI * class as f64 / classes as f64;
    let wavelength = 4.0 + 2.0 * (class % 2) as f64;
    let phase = std::f64::consts::TAU * class as f64 / classes as f64 + 0.7;
    (angle, wavelength, phase)
}

fn generate_sample(
    cfg: &SynthConfig,
    id: String,
    label: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    let s = cfg.image_size;

    // Smooth background: coarse uniform lattice, bilinearly upsampled.
    let lattice = s.div_ceil(cfg.texture_scale) + 1;
    let lattice_vals: Vec<f64> = (0..lattice * lattice)
        .map(|_| rng.gen_range(0.35..0.65))
        .collect();
    let coarse = Tensor::new(&[lattice, lattice], lattice_vals)?;
    let mut image = bilinear_resize(&coarse, s, s)?.into_data();

    // Shared background texture: a weak, class-independent mixture of every
    // class grating with random phases. It lights up the feature maps
    // outside the object, which is what single-map CAM leaks onto and what
    // the ranked-map subtraction cancels.
    const MIX_AMPLITUDE: f64 = 0.10;
    for class in 0..cfg.classes {
        let (angle, wavelength, _) = class_pattern(class, cfg.classes);
        let (dir_x, dir_y) = (angle.cos(), angle.sin());
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        for y in 0..s {
            for x in 0..s {
                let t =
                    std::f64::consts::TAU * (x as f64 * dir_x + y as f64 * dir_y) / wavelength;
                image[y * s + x] += MIX_AMPLITUDE * (t + phi).sin();
            }
        }
    }
    for v in &mut image {
        *v = v.clamp(0.0, 1.0);
    }

    // Class-specific grating blob at a random position.
    let bw = rng.gen_range(cfg.blob_min..=cfg.blob_max);
    let bh = rng.gen_range(cfg.blob_min..=cfg.blob_max);
    let x0 = rng.gen_range(0..=s - bw);
    let y0 = rng.gen_range(0..=s - bh);
    let (angle, wavelength, phase) = class_pattern(label, cfg.classes);
    let (dir_x, dir_y) = (angle.cos(), angle.sin());
    for y in y0..y0 + bh {
        for x in x0..x0 + bw {
            let t = std::f64::consts::TAU * (x as f64 * dir_x + y as f64 * dir_y) / wavelength;
            image[y * s + x] = 0.5 + 0.5 * (t + phase).sin();
        }
    }

    Ok(Sample {
        id,
        image: Tensor::new(&[IN_CHANNELS, s, s], image)?,
        label,
        boxes: vec![BoxPx::new(x0, y0, x0 + bw, y0 + bh)?],
    })
}

/// Generate the full dataset. Deterministic per seed; the test split draws
/// from the same stream after the train split, so the two are disjoint by
/// construction.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut make_split = |name: &str, per_class: usize| -> Result<Vec<Sample>> {
        let mut samples = Vec::with_capacity(cfg.classes * per_class);
        for label in 0..cfg.classes {
            for _ in 0..per_class {
                let id = format!("{name}_{:05}", samples.len());
                samples.push(generate_sample(cfg, id, label, &mut rng)?);
            }
        }
        Ok(samples)
    };
    let train = make_split("train", cfg.per_class_train)?;
    let test = make_split("test", cfg.per_class_test)?;
    Ok(SynthDataset { train, test })
}

/// Mean value of a normalized map outside the ground-truth box; lower means
/// better background suppression. A box covering the whole map scores 0.
pub fn background_suppression_score(map: &Tensor, gt: &BoxPx) -> f64 {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !gt.contains(x, y) {
                sum += map.at2(y, x);
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SynthConfig {
        SynthConfig {
            classes: 3,
            per_class_train: 4,
            per_class_test: 2,
            image_size: 16,
            blob_min: 6,
            blob_max: 9,
            texture_scale: 4,
            seed: 11,
        }
    }

    #[test]
    fn regeneration_is_identical() {
        let cfg = small_config();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.train.len(), b.train.len());
        for (x, y) in a.train.iter().zip(&b.train).chain(a.test.iter().zip(&b.test)) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.label, y.label);
            assert_eq!(x.boxes, y.boxes);
            assert_eq!(x.image.data(), y.image.data());
        }
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = small_config();
        let mut other = cfg.clone();
        other.seed = 12;
        let a = generate(&cfg).unwrap();
        let b = generate(&other).unwrap();
        assert_ne!(a.train[0].image.data(), b.train[0].image.data());
    }

    #[test]
    fn boxes_are_in_bounds_and_blob_sized() {
        let cfg = small_config();
        let ds = generate(&cfg).unwrap();
        for sample in ds.train.iter().chain(&ds.test) {
            assert_eq!(sample.boxes.len(), 1);
            let b = sample.boxes[0];
            assert!(b.x1 <= cfg.image_size && b.y1 <= cfg.image_size);
            assert!((cfg.blob_min..=cfg.blob_max).contains(&b.width()));
            assert!((cfg.blob_min..=cfg.blob_max).contains(&b.height()));
        }
    }

    #[test]
    fn class_histogram_is_exact() {
        let cfg = small_config();
        let ds = generate(&cfg).unwrap();
        for (split, per) in [
            (&ds.train, cfg.per_class_train),
            (&ds.test, cfg.per_class_test),
        ] {
            let mut counts = vec![0usize; cfg.classes];
            for s in split.iter() {
                counts[s.label] += 1;
            }
            assert!(counts.iter().all(|&c| c == per));
        }
    }

    #[test]
    fn image_values_stay_in_unit_range() {
        let ds = generate(&small_config()).unwrap();
        for sample in ds.train.iter().chain(&ds.test) {
            assert!(sample
                .image
                .data()
                .iter()
                .all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = small_config();
        cfg.blob_max = 40;
        assert!(generate(&cfg).is_err());
        let mut cfg = small_config();
        cfg.classes = 1;
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn suppression_of_box_indicator_is_zero() {
        let gt = BoxPx::new(1, 1, 3, 3).unwrap();
        let mut data = vec![0.0; 16];
        for y in 1..3 {
            for x in 1..3 {
                data[y * 4 + x] = 1.0;
            }
        }
        let map = Tensor::new(&[4, 4], data).unwrap();
        assert_eq!(background_suppression_score(&map, &gt), 0.0);
    }

    #[test]
    fn suppression_of_uniform_map_is_one() {
        let gt = BoxPx::new(0, 0, 2, 2).unwrap();
        let map = Tensor::filled(&[4, 4], 1.0).unwrap();
        assert_eq!(background_suppression_score(&map, &gt), 1.0);
    }

    #[test]
    fn suppression_hand_fixture() {
        // Box = left half of a 4x4 map. Outside = 8 cells, half of them 0.5.
        let gt = BoxPx::new(0, 0, 2, 4).unwrap();
        let mut data = vec![0.0; 16];
        for y in 0..4 {
            data[y * 4 + 2] = 0.5;
        }
        let map = Tensor::new(&[4, 4], data).unwrap();
        assert_eq!(background_suppression_score(&map, &gt), 0.25);
    }

    #[test]
    fn suppression_ignores_values_inside_box() {
        let gt = BoxPx::new(0, 0, 2, 2).unwrap();
        let mut a = vec![0.3; 16];
        let mut b = vec![0.3; 16];
        for y in 0..2 {
            for x in 0..2 {
                a[y * 4 + x] = 0.9;
                b[y * 4 + x] = 0.1;
            }
        }
        let ma = Tensor::new(&[4, 4], a).unwrap();
        let mb = Tensor::new(&[4, 4], b).unwrap();
        assert_eq!(
            background_suppression_score(&ma, &gt),
            background_suppression_score(&mb, &gt)
        );
    }

    #[test]
    fn full_image_box_scores_zero() {
        let gt = BoxPx::new(0, 0, 4, 4).unwrap();
        let map = Tensor::filled(&[4, 4], 0.8).unwrap();
        assert_eq!(background_suppression_score(&map, &gt), 0.0);
    }
}
