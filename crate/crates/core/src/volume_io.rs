//! NIfTI-1 volumes and BraTS-style dataset folders.
//!
//! Only what the pipeline needs from the format is implemented: the
//! 348-byte header, either byte order, the common integer and float voxel
//! types, `scl_slope`/`scl_inter`, and sform/qform affines. Files are
//! gzip-compressed on write and auto-detected on read.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use log::warn;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::losses::check_labels;
use crate::tensor::{Shape3, Tensor};

/// Image channel order.
pub const MODALITIES: [&str; 4] = ["flair", "t1", "t1ce", "t2"];
pub const SEGMENTATION: &str = "seg";
pub const NIFTI_SUFFIX: &str = ".nii.gz";

pub type Affine = [[f64; 4]; 4];

pub fn identity_affine() -> Affine {
    let mut a = [[0.0; 4]; 4];
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    a
}

#[derive(Clone, Debug, PartialEq)]
pub struct MriExample {
    pub id: String,
    /// `[4, H, W, D]` in [`MODALITIES`] order.
    pub image: Tensor<f32>,
    pub label: Option<Tensor<u8>>,
    pub spacing: [f64; 3],
    pub affine: Affine,
}

impl MriExample {
    pub fn shape(&self) -> Shape3 {
        self.image.spatial()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub modalities: [PathBuf; 4],
    pub segmentation: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    /// Sorted by id.
    pub entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&IndexEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn has_labels(&self) -> bool {
        self.entries.iter().any(|e| e.segmentation.is_some())
    }
}

/// `{id}_{modality}.nii.gz` under `dir`.
pub fn example_path(dir: &Path, id: &str, modality: &str) -> PathBuf {
    dir.join(format!("{id}_{modality}{NIFTI_SUFFIX}"))
}

/// Finds every `{id}_{flair|t1|t1ce|t2|seg}.nii.gz` below `root`.
pub fn scan_dataset(root: &Path) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory"),
        ));
    }
    let mut found: BTreeMap<String, BTreeMap<String, PathBuf>> = BTreeMap::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::io(root, e.into()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let name = entry.file_name().to_string_lossy();
        let Some(stem) = name.strip_suffix(NIFTI_SUFFIX) else {
            continue;
        };
        let Some((id, kind)) = stem.rsplit_once('_') else {
            continue;
        };
        if !MODALITIES.contains(&kind) && kind != SEGMENTATION {
            continue;
        }
        found
            .entry(id.to_string())
            .or_default()
            .insert(kind.to_string(), entry.path().to_path_buf());
    }
    let mut entries = Vec::with_capacity(found.len());
    for (id, mut files) in found {
        let mut modalities: Vec<PathBuf> = Vec::with_capacity(4);
        for m in MODALITIES {
            match files.remove(m) {
                Some(p) => modalities.push(p),
                None => {
                    return Err(Error::MissingModality {
                        id,
                        modality: m.to_string(),
                    })
                }
            }
        }
        entries.push(IndexEntry {
            id,
            modalities: modalities.try_into().expect("four modalities"),
            segmentation: files.remove(SEGMENTATION),
        });
    }
    let with_seg = entries.iter().filter(|e| e.segmentation.is_some()).count();
    if with_seg != 0 && with_seg != entries.len() {
        let id = entries.iter().find(|e| e.segmentation.is_none()).unwrap().id.clone();
        return Err(Error::MixedSegmentation { id });
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        entries,
    })
}

/// Reads the four modalities (and the segmentation, if indexed).
pub fn load_example(index: &DatasetIndex, id: &str) -> Result<MriExample> {
    let entry = index.get(id).ok_or_else(|| Error::UnknownExample(id.to_string()))?;
    let mut channels = Vec::with_capacity(4);
    let mut reference: Option<NiftiVolume> = None;
    for (m, path) in MODALITIES.iter().zip(&entry.modalities) {
        let vol = read_nifti(path)?;
        let data = vol.to_f32();
        if let Some(r) = &reference {
            if r.dims != vol.dims {
                return Err(Error::ShapeMismatch(format!(
                    "{id}: {m} has shape {:?}, flair has {:?}",
                    vol.dims, r.dims
                )));
            }
            if !affines_close(&r.affine, &vol.affine) {
                warn!("{id}: {m} affine differs from flair; using flair");
            }
        } else {
            if vol.dims.len() != 3 {
                return Err(Error::format("nifti", path, format!("expected a 3D volume, got {:?}", vol.dims)));
            }
            reference = Some(vol.header_only());
        }
        channels.push(data);
    }
    let reference = reference.expect("flair loaded");
    let shape: Shape3 = [reference.dims[0], reference.dims[1], reference.dims[2]];
    let mut flat = Vec::with_capacity(4 * shape.iter().product::<usize>());
    for c in channels {
        flat.extend(c);
    }
    let label = match &entry.segmentation {
        None => None,
        Some(path) => {
            let vol = read_nifti(path)?;
            if vol.dims != reference.dims {
                return Err(Error::ShapeMismatch(format!(
                    "{id}: segmentation has shape {:?}, image has {:?}",
                    vol.dims, reference.dims
                )));
            }
            let labels = vol.to_labels(path)?;
            check_labels(&labels, id)?;
            Some(Tensor::from_vec(shape.to_vec(), labels))
        }
    };
    Ok(MriExample {
        id: id.to_string(),
        image: Tensor::from_vec(vec![4, shape[0], shape[1], shape[2]], flat),
        label,
        spacing: reference.spacing,
        affine: reference.affine,
    })
}

fn affines_close(a: &Affine, b: &Affine) -> bool {
    a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| (x - y).abs() < 1e-4)
}

/// Writes a class map in the reference example's (original) frame.
pub fn save_prediction(label: &Tensor<u8>, reference: &MriExample, path: &Path) -> Result<()> {
    if label.shape() != reference.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction shape {:?} does not match reference {:?}",
            label.shape(),
            reference.shape()
        )));
    }
    check_labels(label.data(), &reference.id)?;
    write_nifti(path, &NiftiData::U8(label.data()), label.shape(), &reference.affine, reference.spacing)
}

/// Writes `[C, H, W, D]` probabilities as a 4D float volume (channels last).
pub fn save_probabilities(p: &Tensor<f32>, reference: &MriExample, path: &Path) -> Result<()> {
    if p.ndim() != 4 || p.spatial() != reference.shape() {
        return Err(Error::ShapeMismatch(format!(
            "probabilities {:?} vs reference {:?}",
            p.shape(),
            reference.shape()
        )));
    }
    let sp = p.spatial();
    let dims = [sp[0], sp[1], sp[2], p.lead()];
    write_nifti(path, &NiftiData::F32(p.data()), &dims, &reference.affine, reference.spacing)
}

/// Voxel data in the crate's layout: the first header axis is the slowest,
/// except that a 4th header axis is stored outermost.
pub enum NiftiData<'a> {
    U8(&'a [u8]),
    F32(&'a [f32]),
}

/// Parsed volume with voxels already scaled and reordered to row-major
/// (last axis fastest) for 3D, channel-first for 4D.
#[derive(Clone, Debug)]
pub struct NiftiVolume {
    pub dims: Vec<usize>,
    pub datatype: i16,
    pub spacing: [f64; 3],
    pub affine: Affine,
    values: Vec<f64>,
}

impl NiftiVolume {
    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|v| *v as f32).collect()
    }

    fn to_labels(&self, path: &Path) -> Result<Vec<u8>> {
        self.values
            .iter()
            .map(|v| {
                if v.fract() != 0.0 || *v < 0.0 || *v > 255.0 {
                    Err(Error::format("nifti", path, format!("label value {v} is not a class id")))
                } else {
                    Ok(*v as u8)
                }
            })
            .collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn header_only(&self) -> NiftiVolume {
        NiftiVolume {
            dims: self.dims.clone(),
            datatype: self.datatype,
            spacing: self.spacing,
            affine: self.affine,
            values: Vec::new(),
        }
    }
}

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

struct Cursor<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Cursor<'_> {
    fn arr<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b: [u8; N] = self.bytes[at..at + N].try_into().unwrap();
        if self.big_endian {
            b.reverse();
        }
        b
    }
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.arr(at))
    }
    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.arr(at))
    }
    fn f32(&self, at: usize) -> f64 {
        f32::from_le_bytes(self.arr(at)) as f64
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::format("nifti", path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn read_nifti(path: &Path) -> Result<NiftiVolume> {
    let bytes = read_bytes(path)?;
    let bad = |m: String| Error::format("nifti", path, m);
    if bytes.len() < HEADER_SIZE {
        return Err(bad(format!("file too short ({} bytes)", bytes.len())));
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let big_endian = match (le, i32::from_be_bytes(bytes[0..4].try_into().unwrap())) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(bad(format!("sizeof_hdr is {le}, not 348"))),
    };
    if &bytes[344..347] != b"n+1" && &bytes[344..347] != b"ni1" {
        return Err(bad("missing NIfTI-1 magic".into()));
    }
    let c = Cursor {
        bytes: &bytes,
        big_endian,
    };
    let ndim = c.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(bad(format!("invalid dim[0] = {ndim}")));
    }
    let mut dims = Vec::new();
    for i in 0..ndim as usize {
        let d = c.i16(42 + 2 * i);
        if d < 1 {
            return Err(bad(format!("invalid dim[{}] = {d}", i + 1)));
        }
        dims.push(d as usize);
    }
    while dims.len() > 3 && *dims.last().unwrap() == 1 {
        dims.pop();
    }
    while dims.len() < 3 {
        dims.push(1);
    }
    let datatype = c.i16(70);
    let pixdim: Vec<f64> = (0..8).map(|i| c.f32(76 + 4 * i)).collect();
    let vox_offset = c.f32(108) as usize;
    let (slope, inter) = (c.f32(112), c.f32(116));
    let (slope, inter) = if slope == 0.0 || !slope.is_finite() { (1.0, 0.0) } else { (slope, inter) };
    let spacing = [pixdim[1].abs(), pixdim[2].abs(), pixdim[3].abs()];
    let affine = header_affine(&c, &pixdim);

    let n: usize = dims.iter().product();
    let width = match datatype {
        2 | 256 => 1,
        4 | 512 => 2,
        8 | 16 | 768 => 4,
        64 => 8,
        other => return Err(bad(format!("unsupported datatype {other}"))),
    };
    let start = vox_offset.max(HEADER_SIZE);
    let body = bytes
        .get(start..start + n * width)
        .ok_or_else(|| bad(format!("expected {} voxel bytes after offset {start}", n * width)))?;
    let d = Cursor {
        bytes: body,
        big_endian,
    };
    let raw = |i: usize| -> f64 {
        let at = i * width;
        match datatype {
            2 => body[at] as f64,
            256 => body[at] as i8 as f64,
            4 => d.i16(at) as f64,
            512 => u16::from_le_bytes(d.arr(at)) as f64,
            8 => d.i32(at) as f64,
            768 => u32::from_le_bytes(d.arr(at)) as f64,
            16 => d.f32(at),
            _ => f64::from_le_bytes(d.arr(at)),
        }
    };
    // file order is x fastest; ours is x slowest
    let (nx, ny, nz) = (dims[0], dims[1], dims[2]);
    let spatial = nx * ny * nz;
    let channels = n / spatial;
    let mut values = vec![0.0; n];
    for ch in 0..channels {
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    let src = ch * spatial + x + nx * (y + ny * z);
                    values[ch * spatial + (x * ny + y) * nz + z] = raw(src) * slope + inter;
                }
            }
        }
    }
    Ok(NiftiVolume {
        dims,
        datatype,
        spacing,
        affine,
        values,
    })
}

fn header_affine(c: &Cursor<'_>, pixdim: &[f64]) -> Affine {
    let (qform, sform) = (c.i16(252), c.i16(254));
    let mut a = identity_affine();
    if sform > 0 {
        for (r, row) in a.iter_mut().take(3).enumerate() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = c.f32(280 + 16 * r + 4 * k);
            }
        }
    } else if qform > 0 {
        let (b, cq, d) = (c.f32(256), c.f32(260), c.f32(264));
        let aq = (1.0 - (b * b + cq * cq + d * d)).max(0.0).sqrt();
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let r = [
            [aq * aq + b * b - cq * cq - d * d, 2.0 * (b * cq - aq * d), 2.0 * (b * d + aq * cq)],
            [2.0 * (b * cq + aq * d), aq * aq + cq * cq - b * b - d * d, 2.0 * (cq * d - aq * b)],
            [2.0 * (b * d - aq * cq), 2.0 * (cq * d + aq * b), aq * aq + d * d - cq * cq - b * b],
        ];
        let scale = [pixdim[1], pixdim[2], qfac * pixdim[3]];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] = r[i][j] * scale[j];
            }
        }
        a[0][3] = c.f32(268);
        a[1][3] = c.f32(272);
        a[2][3] = c.f32(276);
    } else {
        for i in 0..3 {
            a[i][i] = pixdim[i + 1];
        }
    }
    a
}

/// Writes a gzip-compressed little-endian NIfTI-1 file with an sform.
pub fn write_nifti(path: &Path, data: &NiftiData<'_>, dims: &[usize], affine: &Affine, spacing: [f64; 3]) -> Result<()> {
    if !(3..=4).contains(&dims.len()) || dims.iter().any(|d| *d == 0 || *d > i16::MAX as usize) {
        return Err(Error::ShapeMismatch(format!("cannot store dims {dims:?} in NIfTI-1")));
    }
    let (datatype, width): (i16, usize) = match data {
        NiftiData::U8(_) => (2, 1),
        NiftiData::F32(_) => (16, 4),
    };
    let n: usize = dims.iter().product();
    let len = match data {
        NiftiData::U8(d) => d.len(),
        NiftiData::F32(d) => d.len(),
    };
    if len != n {
        return Err(Error::ShapeMismatch(format!("{len} voxels for dims {dims:?}")));
    }
    let mut h = vec![0u8; VOX_OFFSET];
    let put = |h: &mut Vec<u8>, at: usize, b: &[u8]| h[at..at + b.len()].copy_from_slice(b);
    put(&mut h, 0, &348i32.to_le_bytes());
    put(&mut h, 40, &(dims.len() as i16).to_le_bytes());
    for (i, d) in dims.iter().enumerate() {
        put(&mut h, 42 + 2 * i, &(*d as i16).to_le_bytes());
    }
    for i in dims.len()..7 {
        put(&mut h, 42 + 2 * i, &1i16.to_le_bytes());
    }
    put(&mut h, 70, &datatype.to_le_bytes());
    put(&mut h, 72, &((width * 8) as i16).to_le_bytes());
    let mut pixdim = [1.0f32; 8];
    for i in 0..3 {
        pixdim[i + 1] = spacing[i] as f32;
    }
    for (i, p) in pixdim.iter().enumerate() {
        put(&mut h, 76 + 4 * i, &p.to_le_bytes());
    }
    put(&mut h, 108, &(VOX_OFFSET as f32).to_le_bytes());
    put(&mut h, 112, &1f32.to_le_bytes());
    h[123] = 2; // mm
    put(&mut h, 254, &1i16.to_le_bytes());
    for r in 0..3 {
        for k in 0..4 {
            put(&mut h, 280 + 16 * r + 4 * k, &(affine[r][k] as f32).to_le_bytes());
        }
    }
    put(&mut h, 344, b"n+1\0");

    let (nx, ny, nz) = (dims[0], dims[1], dims[2]);
    let spatial = nx * ny * nz;
    let channels = n / spatial;
    let mut body = Vec::with_capacity(n * width);
    for ch in 0..channels {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = ch * spatial + (x * ny + y) * nz + z;
                    match data {
                        NiftiData::U8(d) => body.push(d[i]),
                        NiftiData::F32(d) => body.extend_from_slice(&d[i].to_le_bytes()),
                    }
                }
            }
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = GzEncoder::new(std::io::BufWriter::new(file), Compression::fast());
    enc.write_all(&h)
        .and_then(|_| enc.write_all(&body))
        .and_then(|_| enc.finish().map(drop))
        .map_err(|e| Error::io(path, e))
}

/// Writes an example in the dataset layout (`{dir}/{id}_{modality}.nii.gz`).
pub fn save_example(example: &MriExample, dir: &Path) -> Result<()> {
    let sp = example.shape();
    for (c, m) in MODALITIES.iter().enumerate() {
        write_nifti(
            &example_path(dir, &example.id, m),
            &NiftiData::F32(example.image.volume(c)),
            &sp,
            &example.affine,
            example.spacing,
        )?;
    }
    if let Some(label) = &example.label {
        write_nifti(
            &example_path(dir, &example.id, SEGMENTATION),
            &NiftiData::U8(label.data()),
            &sp,
            &example.affine,
            example.spacing,
        )?;
    }
    Ok(())
}
