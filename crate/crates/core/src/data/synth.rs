use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use super::{RawDataset, Sample, SampleMeta};
use crate::error::{Error, Result};
use crate::{CHIP, CHIP_PIXELS};

/// Upper bound of the clean clutter intensity; targets are always brighter.
pub const CLUTTER_MAX: f64 = 0.3;
/// Added before the log so zero-intensity speckle stays finite.
pub const SPECKLE_FLOOR: f64 = 1e-3;

/// Random pose applied to every silhouette.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseJitter {
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
    pub max_shift: f64,
}

impl Default for PoseJitter {
    fn default() -> Self {
        PoseJitter {
            max_rotation_deg: 180.0,
            scale_range: (0.8, 1.2),
            max_shift: 8.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Ellipse,
    Rectangle,
    Tee,
    Ell,
    Aitch,
    Cross,
    Trapezoid,
    Diamond,
    You,
    Ring,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 10] = [
        ShapeFamily::Ellipse,
        ShapeFamily::Rectangle,
        ShapeFamily::Tee,
        ShapeFamily::Ell,
        ShapeFamily::Aitch,
        ShapeFamily::Cross,
        ShapeFamily::Trapezoid,
        ShapeFamily::Diamond,
        ShapeFamily::You,
        ShapeFamily::Ring,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Ellipse => "ellipse",
            ShapeFamily::Rectangle => "rectangle",
            ShapeFamily::Tee => "t",
            ShapeFamily::Ell => "l",
            ShapeFamily::Aitch => "h",
            ShapeFamily::Cross => "cross",
            ShapeFamily::Trapezoid => "trapezoid",
            ShapeFamily::Diamond => "diamond",
            ShapeFamily::You => "u",
            ShapeFamily::Ring => "ring",
        }
    }

    /// Silhouette test in the shape's own frame, pixels at unit scale,
    /// origin at the shape centre.
    pub fn contains(self, u: f64, v: f64) -> bool {
        let (au, av) = (u.abs(), v.abs());
        let rect = |u0: f64, u1: f64, v0: f64, v1: f64| u >= u0 && u <= u1 && v >= v0 && v <= v1;
        match self {
            ShapeFamily::Ellipse => (u / 15.0).powi(2) + (v / 8.0).powi(2) <= 1.0,
            ShapeFamily::Rectangle => au <= 13.0 && av <= 8.0,
            ShapeFamily::Tee => rect(-14.0, 14.0, -13.0, -6.0) || rect(-4.0, 4.0, -6.0, 14.0),
            ShapeFamily::Ell => rect(-11.0, -4.0, -14.0, 14.0) || rect(-11.0, 12.0, 7.0, 14.0),
            ShapeFamily::Aitch => au <= 13.0 && (au >= 6.0 && av <= 14.0 || av <= 3.5),
            ShapeFamily::Cross => (au <= 4.5 && av <= 14.0) || (av <= 4.5 && au <= 14.0),
            ShapeFamily::Trapezoid => av <= 10.0 && au <= 6.0 + 0.4 * (v + 10.0),
            ShapeFamily::Diamond => au / 15.0 + av / 11.0 <= 1.0,
            ShapeFamily::You => rect(-13.0, 13.0, 7.0, 14.0) || (au <= 13.0 && au >= 6.0 && v >= -14.0 && v <= 14.0),
            ShapeFamily::Ring => {
                let r2 = u * u + v * v;
                (7.5f64).powi(2) <= r2 && r2 <= (14.0f64).powi(2)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_classes: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub seed: u64,
    pub jitter: PoseJitter,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_classes: 10,
            per_class_train: 270,
            per_class_test: 230,
            seed: 0,
            jitter: PoseJitter::default(),
        }
    }
}

/// Every intermediate layer of one rendered chip.
#[derive(Clone, Debug)]
pub struct RenderedChip {
    /// Target over clutter, before speckle.
    pub clean: Vec<f64>,
    /// `clean` times unit-mean exponential speckle.
    pub speckled: Vec<f64>,
    /// Log-compressed and min-max normalized `speckled`.
    pub image: Vec<f64>,
    pub mask: Vec<u8>,
    pub pose_deg: f64,
    pub scale: f64,
    pub dx: f64,
    pub dy: f64,
}

/// SplitMix64 finalizer over `(master, index)`; the per-sample seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Blob {
    x: f64,
    y: f64,
    inv_two_sigma2: f64,
    amp: f64,
}

/// Renders one chip of `family` from `seed`.
pub fn render_chip(family: ShapeFamily, seed: u64, jitter: &PoseJitter) -> RenderedChip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pose_deg: f64 = rng.random_range(-1.0..=1.0) * jitter.max_rotation_deg;
    let scale: f64 = rng.random_range(jitter.scale_range.0..=jitter.scale_range.1);
    let dx: f64 = rng.random_range(-1.0..=1.0) * jitter.max_shift;
    let dy: f64 = rng.random_range(-1.0..=1.0) * jitter.max_shift;
    let target_level: f64 = rng.random_range(0.7..1.0);

    let base: f64 = rng.random_range(0.015..0.03);
    let blobs: Vec<Blob> = (0..rng.random_range(3..7))
        .map(|_| {
            let sigma: f64 = rng.random_range(5.0..14.0);
            Blob {
                x: rng.random_range(0.0..CHIP as f64),
                y: rng.random_range(0.0..CHIP as f64),
                inv_two_sigma2: 1.0 / (2.0 * sigma * sigma),
                amp: rng.random_range(0.005..0.02),
            }
        })
        .collect();
    let glints: Vec<Blob> = (0..rng.random_range(0..4))
        .map(|_| Blob {
            x: rng.random_range(0.0..CHIP as f64),
            y: rng.random_range(0.0..CHIP as f64),
            inv_two_sigma2: 1.0 / (2.0 * 1.2 * 1.2),
            amp: rng.random_range(0.05..0.15),
        })
        .collect();

    let (sin, cos) = pose_deg.to_radians().sin_cos();
    let cx = CHIP as f64 / 2.0 + dx;
    let cy = CHIP as f64 / 2.0 + dy;
    let mut clean = vec![0.0; CHIP_PIXELS];
    let mut mask = vec![0u8; CHIP_PIXELS];
    for y in 0..CHIP {
        for x in 0..CHIP {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let (rx, ry) = (px - cx, py - cy);
            let u = (cos * rx + sin * ry) / scale;
            let v = (-sin * rx + cos * ry) / scale;
            let i = y * CHIP + x;
            if family.contains(u, v) {
                mask[i] = 1;
                let texture = 0.85 + 0.15 * (u / 3.0).sin() * (v / 3.0).cos();
                clean[i] = target_level * texture;
            } else {
                let mut c = base;
                for b in blobs.iter().chain(&glints) {
                    let d2 = (px - b.x).powi(2) + (py - b.y).powi(2);
                    c += b.amp * (-d2 * b.inv_two_sigma2).exp();
                }
                clean[i] = c.min(CLUTTER_MAX);
            }
        }
    }

    let speckled: Vec<f64> = clean
        .iter()
        .map(|&c| {
            let e: f64 = rng.sample(Exp1);
            c * e
        })
        .collect();
    let logs: Vec<f64> = speckled.iter().map(|&s| (s + SPECKLE_FLOOR).ln()).collect();
    let (lo, hi) = logs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let image = logs
        .iter()
        .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect();

    RenderedChip {
        clean,
        speckled,
        image,
        mask,
        pose_deg,
        scale,
        dx,
        dy,
    }
}

/// Generates a class-balanced dataset. Sample `i` (train first, then test,
/// class-major within each) is rendered from `derive_seed(seed, i)`, so any
/// sample can be regenerated independently of the others.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<RawDataset> {
    if cfg.num_classes == 0 || cfg.num_classes > ShapeFamily::ALL.len() {
        return Err(Error::invalid(
            "generate_dataset",
            format!("num_classes must be in 1..={}, got {}", ShapeFamily::ALL.len(), cfg.num_classes),
        ));
    }
    let families = &ShapeFamily::ALL[..cfg.num_classes];
    let mut next_id = 0u64;
    let mut make = |per_class: usize| -> Vec<Sample> {
        let mut out = Vec::with_capacity(per_class * families.len());
        for (label, &family) in families.iter().enumerate() {
            for _ in 0..per_class {
                let id = next_id;
                next_id += 1;
                let seed = derive_seed(cfg.seed, id);
                let chip = render_chip(family, seed, &cfg.jitter);
                out.push(Sample {
                    image: chip.image,
                    label: Some(label),
                    mask: Some(chip.mask),
                    meta: SampleMeta {
                        id,
                        class_name: family.name().to_string(),
                        pose_deg: chip.pose_deg,
                        scale: chip.scale,
                        dx: chip.dx,
                        dy: chip.dy,
                        seed,
                    },
                });
            }
        }
        out
    };
    let train = make(cfg.per_class_train);
    let test = make(cfg.per_class_test);
    Ok(RawDataset {
        class_names: families.iter().map(|f| f.name().to_string()).collect(),
        train,
        test,
    })
}
