//! Synthetic BraTS-like examples: an ellipsoidal "brain" holding three
//! nested tumour ellipsoids (ET inside TC inside WT) with class-dependent
//! modality intensities plus Gaussian noise.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{rng_stream, stream_seed};
use crate::error::{Error, Result};
use crate::tensor::{Shape3, Tensor};
use crate::volume_io::{identity_affine, save_example, MriExample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub shape: Shape3,
    pub count: usize,
    /// Mean whole-tumour semi-axis as a fraction of the half extent.
    pub tumor_radius: f64,
    /// Tumour-core and enhancing semi-axes relative to the whole tumour.
    pub core_ratio: f64,
    pub enhancing_ratio: f64,
    /// Noise std relative to the intensity contrast between classes.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            shape: [32; 3],
            count: 20,
            tumor_radius: 0.45,
            core_ratio: 0.65,
            enhancing_ratio: 0.35,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|s| *s < 16) {
            return Err(Error::Config(format!("synthetic volumes must be at least 16^3, got {:?}", self.shape)));
        }
        let ok = |v: f64| v > 0.0 && v < 1.0;
        if !(ok(self.tumor_radius) && ok(self.core_ratio) && ok(self.enhancing_ratio)) {
            return Err(Error::Config("synthetic radii and ratios must lie in (0, 1)".into()));
        }
        if self.noise < 0.0 {
            return Err(Error::Config("synthetic noise must be >= 0".into()));
        }
        Ok(())
    }

    pub fn id(&self, i: usize) -> String {
        format!("SYN_{i:05}")
    }
}

/// Geometry drawn for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct TumorGeometry {
    pub center: [f64; 3],
    /// Whole-tumour semi-axes in voxels.
    pub axes: [f64; 3],
    pub core_ratio: f64,
    pub enhancing_ratio: f64,
}

impl TumorGeometry {
    /// Expected whole-tumour voxel count.
    pub fn whole_volume(&self) -> f64 {
        4.0 / 3.0 * PI * self.axes.iter().product::<f64>()
    }

    fn level(&self, v: [f64; 3]) -> f64 {
        (0..3).map(|a| ((v[a] - self.center[a]) / self.axes[a]).powi(2)).sum::<f64>().sqrt()
    }

    /// Class at a voxel centre: 4 inside ET, 1 inside TC, 2 inside WT.
    pub fn class_at(&self, v: [f64; 3]) -> u8 {
        let r = self.level(v);
        if r <= self.enhancing_ratio {
            4
        } else if r <= self.core_ratio {
            1
        } else if r <= 1.0 {
            2
        } else {
            0
        }
    }
}

// Base tissue and per-class means for FLAIR, T1, T1ce, T2.
const TISSUE: [f64; 4] = [100.0, 120.0, 110.0, 90.0];
const CLASS_MEAN: [[f64; 4]; 3] = [
    // NCR
    [130.0, 80.0, 60.0, 150.0],
    // ED
    [190.0, 100.0, 105.0, 180.0],
    // ET
    [150.0, 95.0, 220.0, 140.0],
];
const CONTRAST: f64 = 50.0;

pub fn draw_geometry(spec: &SyntheticSpec, i: usize) -> TumorGeometry {
    let mut rng = rng_stream(stream_seed(spec.seed, 1, i as u64));
    let half = spec.shape.map(|s| s as f64 / 2.0);
    let axes = half.map(|h| h * spec.tumor_radius * rng.random_range(0.85..1.15));
    let center = [0, 1, 2].map(|a| half[a] + rng.random_range(-0.15..0.15) * half[a]);
    TumorGeometry {
        center,
        axes,
        core_ratio: spec.core_ratio,
        enhancing_ratio: spec.enhancing_ratio,
    }
}

pub fn generate_example(spec: &SyntheticSpec, i: usize) -> Result<MriExample> {
    spec.validate()?;
    let geo = draw_geometry(spec, i);
    let mut rng = rng_stream(stream_seed(spec.seed, 2, i as u64));
    let noise = Normal::new(0.0, (spec.noise * CONTRAST).max(1e-12)).expect("finite std");
    let sp = spec.shape;
    let n = sp.iter().product::<usize>();
    let mut image = Tensor::<f32>::zeros(vec![4, sp[0], sp[1], sp[2]]);
    let mut label = vec![0u8; n];
    let half = sp.map(|s| s as f64 / 2.0);
    // brain fills most of the volume, leaving a zero border to crop
    let brain = half.map(|h| h * 0.92);
    for x in 0..sp[0] {
        for y in 0..sp[1] {
            for z in 0..sp[2] {
                let v = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                let inside: f64 = (0..3).map(|a| ((v[a] - half[a]) / brain[a]).powi(2)).sum();
                let idx = (x * sp[1] + y) * sp[2] + z;
                let class = geo.class_at(v);
                label[idx] = class;
                if inside > 1.0 && class == 0 {
                    continue;
                }
                let means = match class {
                    1 => CLASS_MEAN[0],
                    2 => CLASS_MEAN[1],
                    4 => CLASS_MEAN[2],
                    _ => TISSUE,
                };
                for (c, m) in means.iter().enumerate() {
                    image.volume_mut(c)[idx] = (m + noise.sample(&mut rng)).max(1.0) as f32;
                }
            }
        }
    }
    Ok(MriExample {
        id: spec.id(i),
        image,
        label: Some(Tensor::from_vec(sp.to_vec(), label)),
        spacing: [1.0; 3],
        affine: identity_affine(),
    })
}

/// Writes `spec.count` examples in the dataset layout; returns their ids.
pub fn generate_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<Vec<String>> {
    spec.validate()?;
    let mut ids = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let ex = generate_example(spec, i)?;
        save_example(&ex, dir)?;
        ids.push(ex.id);
    }
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::class_regions;
    use crate::volume_io::{load_example, scan_dataset};

    #[test]
    fn writes_loadable_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            count: 4,
            shape: [64; 3],
            ..Default::default()
        };
        let ids = generate_synthetic(&spec, dir.path()).unwrap();
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 20);
        let index = scan_dataset(dir.path()).unwrap();
        assert_eq!(index.ids(), ids);
        let ex = load_example(&index, &ids[2]).unwrap();
        assert_eq!(ex, generate_example(&spec, 2).unwrap());
    }

    #[test]
    fn nesting_and_volume() {
        let spec = SyntheticSpec {
            shape: [48, 40, 32],
            count: 6,
            ..Default::default()
        };
        for i in 0..spec.count {
            let ex = generate_example(&spec, i).unwrap();
            let label = ex.label.unwrap();
            let mut wt = 0;
            for c in label.data() {
                let [et, tc, w] = class_regions(*c);
                assert!(!et || tc);
                assert!(!tc || w);
                wt += w as usize;
            }
            let target = draw_geometry(&spec, i).whole_volume();
            assert!((wt as f64 - target).abs() / target < 0.2, "{wt} vs {target}");
            for c in [1u8, 2, 4] {
                assert!(label.data().contains(&c));
            }
        }
    }

    #[test]
    fn deterministic_and_seed_dependent() {
        let spec = SyntheticSpec::default();
        assert_eq!(generate_example(&spec, 0).unwrap(), generate_example(&spec, 0).unwrap());
        let other = SyntheticSpec { seed: 1, ..spec.clone() };
        assert_ne!(generate_example(&spec, 0).unwrap(), generate_example(&other, 0).unwrap());
        assert!(SyntheticSpec { shape: [8; 3], ..spec }.validate().is_err());
    }
}
