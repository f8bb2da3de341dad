//! Foreground cropping, per-channel z-scoring and the foreground channel.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::checkpoint::atomic_write;
use crate::tensor::{voxels, Shape3, Tensor};
use crate::volume_io::{Affine, MriExample};

pub const STD_EPS: f64 = 1e-8;
pub const CACHE_MAGIC: &[u8; 8] = b"TSEGPREP";
pub const CACHE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBounds {
    pub lo: Shape3,
    /// Exclusive.
    pub hi: Shape3,
}

impl CropBounds {
    pub fn full(shape: Shape3) -> Self {
        CropBounds { lo: [0; 3], hi: shape }
    }

    pub fn extent(&self) -> Shape3 {
        [self.hi[0] - self.lo[0], self.hi[1] - self.lo[1], self.hi[2] - self.lo[2]]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessedExample {
    pub id: String,
    /// `[5, H', W', D']`: four z-scored modalities and the foreground mask.
    pub image: Tensor<f32>,
    pub label: Option<Tensor<u8>>,
    pub bounds: CropBounds,
    pub stats: NormalizationStats,
    pub original_shape: Shape3,
    pub spacing: [f64; 3],
    pub affine: Affine,
}

impl PreprocessedExample {
    pub fn shape(&self) -> Shape3 {
        self.image.spatial()
    }
}

/// Voxels nonzero in any channel of `[C, H, W, D]`.
pub fn foreground_mask(image: &Tensor<f32>) -> Vec<bool> {
    let n = voxels(image.spatial());
    let mut mask = vec![false; n];
    for c in 0..image.lead() {
        for (m, v) in mask.iter_mut().zip(image.volume(c)) {
            *m |= *v != 0.0;
        }
    }
    mask
}

/// Tightest box holding every voxel that is nonzero in any channel.
pub fn foreground_bounds(image: &Tensor<f32>) -> Option<CropBounds> {
    let sp = image.spatial();
    let mask = foreground_mask(image);
    let mut lo = sp;
    let mut hi = [0; 3];
    let mut any = false;
    for x in 0..sp[0] {
        for y in 0..sp[1] {
            for z in 0..sp[2] {
                if mask[(x * sp[1] + y) * sp[2] + z] {
                    any = true;
                    for (a, v) in [x, y, z].into_iter().enumerate() {
                        lo[a] = lo[a].min(v);
                        hi[a] = hi[a].max(v + 1);
                    }
                }
            }
        }
    }
    any.then_some(CropBounds { lo, hi })
}

pub fn crop_foreground(example: &MriExample) -> Result<(Tensor<f32>, Option<Tensor<u8>>, CropBounds)> {
    let bounds = foreground_bounds(&example.image).ok_or_else(|| Error::EmptyVolume(example.id.clone()))?;
    let image = example.image.crop(bounds.lo, bounds.hi);
    let label = example.label.as_ref().map(|l| l.crop(bounds.lo, bounds.hi));
    Ok((image, label, bounds))
}

/// Z-scores every channel over the shared foreground; background stays 0.
pub fn normalize_channels(image: &Tensor<f32>) -> Result<(Tensor<f32>, NormalizationStats)> {
    let mask = foreground_mask(image);
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(Error::EmptyVolume("normalization input".into()));
    }
    let mut out = image.clone();
    let mut stats = NormalizationStats {
        mean: Vec::new(),
        std: Vec::new(),
    };
    for c in 0..image.lead() {
        let vol = image.volume(c);
        let fg = || vol.iter().zip(&mask).filter(|(_, m)| **m).map(|(v, _)| *v as f64);
        let mean = fg().sum::<f64>() / count as f64;
        let var = fg().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
        let std = var.sqrt();
        let div = std.max(STD_EPS);
        for (o, m) in out.volume_mut(c).iter_mut().zip(&mask) {
            *o = if *m { ((*o as f64 - mean) / div) as f32 } else { 0.0 };
        }
        stats.mean.push(mean);
        stats.std.push(std);
    }
    Ok((out, stats))
}

/// Appends the binary foreground mask of `mask_source` as a last channel.
pub fn append_foreground_channel(image: &Tensor<f32>, mask_source: &Tensor<f32>) -> Result<Tensor<f32>> {
    if image.spatial() != mask_source.spatial() {
        return Err(Error::ShapeMismatch(format!(
            "image {:?} vs mask source {:?}",
            image.shape(),
            mask_source.shape()
        )));
    }
    let sp = image.spatial();
    let mask = Tensor::from_vec(
        vec![1, sp[0], sp[1], sp[2]],
        foreground_mask(mask_source).into_iter().map(|m| m as u8 as f32).collect(),
    );
    Tensor::concat_first(&[image, &mask])
}

/// Crop, normalize, append the foreground channel.
pub fn preprocess_example(example: &MriExample) -> Result<PreprocessedExample> {
    if example.image.lead() != 4 {
        return Err(Error::ShapeMismatch(format!("expected 4 modalities, got {:?}", example.image.shape())));
    }
    let (cropped, label, bounds) = crop_foreground(example)?;
    let (normalized, stats) = normalize_channels(&cropped)?;
    let image = append_foreground_channel(&normalized, &cropped)?;
    Ok(PreprocessedExample {
        id: example.id.clone(),
        image,
        label,
        bounds,
        stats,
        original_shape: example.shape(),
        spacing: example.spacing,
        affine: example.affine,
    })
}

/// Places a cropped-frame volume back into the original frame, filling
/// outside the bounds with `fill`.
pub fn uncrop<T: Copy>(x: &Tensor<T>, bounds: &CropBounds, original: Shape3, fill: T) -> Result<Tensor<T>> {
    if x.spatial() != bounds.extent() {
        return Err(Error::ShapeMismatch(format!(
            "volume {:?} does not match crop extent {:?}",
            x.shape(),
            bounds.extent()
        )));
    }
    if (0..3).any(|a| bounds.hi[a] > original[a]) {
        return Err(Error::ShapeMismatch(format!("bounds {bounds:?} exceed {original:?}")));
    }
    Ok(x.pad(bounds.lo, original, fill))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheSidecar {
    pub format_version: u32,
    pub id: String,
    pub image_shape: Vec<usize>,
    pub has_label: bool,
    pub bounds: CropBounds,
    pub stats: NormalizationStats,
    pub original_shape: Shape3,
    pub spacing: [f64; 3],
    pub affine: Affine,
    pub blob_sha256: String,
}

pub fn cache_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{id}.bin")), dir.join(format!("{id}.json")))
}

/// Writes `{id}.bin` (magic, version, f32 image, u8 label) and `{id}.json`.
pub fn save_cached(example: &PreprocessedExample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (bin, json) = cache_paths(dir, &example.id);
    let mut blob = Vec::with_capacity(12 + example.image.numel() * 4);
    blob.extend_from_slice(CACHE_MAGIC);
    blob.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    for v in example.image.data() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(l) = &example.label {
        blob.extend_from_slice(l.data());
    }
    let sidecar = CacheSidecar {
        format_version: CACHE_VERSION,
        id: example.id.clone(),
        image_shape: example.image.shape().to_vec(),
        has_label: example.label.is_some(),
        bounds: example.bounds,
        stats: example.stats.clone(),
        original_shape: example.original_shape,
        spacing: example.spacing,
        affine: example.affine,
        blob_sha256: hex::encode(Sha256::digest(&blob)),
    };
    atomic_write(&bin, &blob)?;
    let text = serde_json::to_vec_pretty(&sidecar).map_err(|e| Error::format("cache sidecar", &json, e))?;
    atomic_write(&json, &text)
}

pub fn load_cached(dir: &Path, id: &str) -> Result<PreprocessedExample> {
    let (bin, json) = cache_paths(dir, id);
    let text = fs::read(&json).map_err(|e| Error::io(&json, e))?;
    let side: CacheSidecar = serde_json::from_slice(&text).map_err(|e| Error::format("cache sidecar", &json, e))?;
    let bad = |m: String| Error::format("preprocessed cache", &bin, m);
    if side.format_version != CACHE_VERSION {
        return Err(bad(format!("unsupported version {}", side.format_version)));
    }
    let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if blob.len() < 12 || &blob[..8] != CACHE_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u32::from_le_bytes(blob[8..12].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    if hex::encode(Sha256::digest(&blob)) != side.blob_sha256 {
        return Err(bad("checksum mismatch".into()));
    }
    if side.image_shape.len() != 4 {
        return Err(bad(format!("image shape {:?}", side.image_shape)));
    }
    let n: usize = side.image_shape.iter().product();
    let sp = [side.image_shape[1], side.image_shape[2], side.image_shape[3]];
    let label_len = if side.has_label { voxels(sp) } else { 0 };
    if blob.len() != 12 + 4 * n + label_len {
        return Err(bad(format!("blob holds {} bytes, expected {}", blob.len(), 12 + 4 * n + label_len)));
    }
    let image: Vec<f32> = blob[12..12 + 4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let label = side
        .has_label
        .then(|| Tensor::from_vec(sp.to_vec(), blob[12 + 4 * n..].to_vec()));
    Ok(PreprocessedExample {
        id: side.id,
        image: Tensor::from_vec(side.image_shape, image),
        label,
        bounds: side.bounds,
        stats: side.stats,
        original_shape: side.original_shape,
        spacing: side.spacing,
        affine: side.affine,
    })
}
