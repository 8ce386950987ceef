//! On-disk dataset layout:
//!
//! ```text
//! root/manifest.csv            id,label,sub_protocol
//! root/rgb/<id>.png            8-bit RGB
//! root/depth/<id>.png          8-bit grayscale
//! root/ir/<id>.png             8-bit grayscale
//! ```
//!
//! A modality is part of the dataset when its directory exists; every row
//! must then have a file in it.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{face_source, generate_mask, SampleRecord};
use crate::error::{Error, Result};
use crate::metrics::{Label, SubProtocol};
use crate::models::Modality;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    /// Paths relative to the dataset root.
    pub paths: BTreeMap<Modality, PathBuf>,
    pub label: Label,
    pub sub_protocol: SubProtocol,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn modalities(&self) -> Vec<Modality> {
        let mut all: Vec<Modality> = self.rows.iter().flat_map(|r| r.paths.keys().copied()).collect();
        all.sort();
        all.dedup();
        all
    }
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    id: String,
    label: String,
    sub_protocol: String,
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> Error + '_ {
    move |source| Error::Csv { path: path.to_path_buf(), source }
}

/// Reads `root/manifest.csv` and checks that every referenced file exists.
pub fn read_manifest(root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = root.as_ref();
    let path = root.join(MANIFEST);
    let mut reader = csv::Reader::from_path(&path).map_err(csv_err(&path))?;
    let present: Vec<Modality> = Modality::ALL.into_iter().filter(|m| root.join(m.as_str()).is_dir()).collect();
    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    for rec in reader.deserialize::<CsvRow>() {
        let rec = rec.map_err(csv_err(&path))?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Dataset(format!("duplicate sample id `{}` in {}", rec.id, path.display())));
        }
        let mut paths = BTreeMap::new();
        for &m in &present {
            let rel = PathBuf::from(m.as_str()).join(format!("{}.png", rec.id));
            if !root.join(&rel).is_file() {
                return Err(Error::Dataset(format!("missing file {}", root.join(&rel).display())));
            }
            paths.insert(m, rel);
        }
        rows.push(ManifestRow {
            id: rec.id,
            paths,
            label: rec.label.parse()?,
            sub_protocol: rec.sub_protocol.parse()?,
        });
    }
    Ok(DatasetManifest { root: root.to_path_buf(), rows })
}

/// Decodes one PNG as a `[3,size,size]` tensor in `[0,1]`; grayscale
/// modalities are replicated to three channels.
pub fn load_image(path: &Path, m: Modality, size: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let s = size as u32;
    let plane = s as usize * s as usize;
    let data = if m == Modality::Rgb {
        let mut rgb = img.to_rgb8();
        if rgb.dimensions() != (s, s) {
            rgb = image::imageops::resize(&rgb, s, s, FilterType::Triangle);
        }
        let mut d = vec![0.0f32; 3 * plane];
        for (i, px) in rgb.pixels().enumerate() {
            for ch in 0..3 {
                d[ch * plane + i] = px[ch] as f32 / 255.0;
            }
        }
        d
    } else {
        let mut g = img.to_luma8();
        if g.dimensions() != (s, s) {
            g = image::imageops::resize(&g, s, s, FilterType::Triangle);
        }
        let one: Vec<f32> = g.pixels().map(|p| p[0] as f32 / 255.0).collect();
        [one.as_slice(), one.as_slice(), one.as_slice()].concat()
    };
    Tensor::new([3, size, size], data)
}

/// Decodes the requested modalities of every row, resized to `input_size`
/// and scaled to `[0,1]`, in manifest order. Decoding runs in parallel;
/// the output order does not depend on the number of workers.
pub fn load_dataset(manifest: &DatasetManifest, input_size: usize, modalities: &[Modality]) -> Result<Vec<SampleRecord>> {
    if input_size < 8 || input_size % 8 != 0 {
        return Err(Error::Config(format!("input_size must be a positive multiple of 8, got {input_size}")));
    }
    manifest
        .rows
        .par_iter()
        .map(|row| {
            let mut images = BTreeMap::new();
            for &m in modalities {
                let rel = row.paths.get(&m).ok_or_else(|| {
                    Error::Dataset(format!("sample `{}` has no {m} image but the model needs it", row.id))
                })?;
                images.insert(m, load_image(&manifest.root.join(rel), m, input_size)?);
            }
            // the face region comes from RGB even when the model does not use it
            let face = match (images.contains_key(&Modality::Rgb), row.paths.get(&Modality::Rgb)) {
                (false, Some(rel)) => Some(load_image(&manifest.root.join(rel), Modality::Rgb, input_size)?),
                _ => None,
            };
            let face = face.as_ref().or_else(|| face_source(&images));
            let mask_gt = match face {
                Some(f) => generate_mask(f, row.label, input_size / 8)?,
                None => return Err(Error::Dataset(format!("sample `{}` has no images", row.id))),
            };
            Ok(SampleRecord { id: row.id.clone(), images, label: row.label, sub_protocol: row.sub_protocol, mask_gt })
        })
        .collect()
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[H,W]` (or `[1,H,W]`) tensor in `[0,1]` as an 8-bit PNG.
pub fn write_gray_png(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let (h, w) = match *t.shape() {
        [h, w] | [1, h, w] => (h, w),
        _ => return Err(Error::InvalidArgument(format!("gray image must be [H,W], got {:?}", t.shape()))),
    };
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([to_u8(t.data()[y as usize * w + x as usize])]));
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn write_rgb_png(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let plane = h * w;
    let d = t.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([to_u8(d[i]), to_u8(d[plane + i]), to_u8(d[2 * plane + i])])
    });
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Writes records in the documented layout. Depth and IR are stored from
/// their first channel.
pub fn write_dataset(root: impl AsRef<Path>, records: &[SampleRecord]) -> Result<()> {
    let root = root.as_ref();
    let mods: Vec<Modality> = Modality::ALL
        .into_iter()
        .filter(|m| records.iter().any(|r| r.images.contains_key(m)))
        .collect();
    for m in &mods {
        let dir = root.join(m.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let path = root.join(MANIFEST);
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    for rec in records {
        for m in &mods {
            let img = rec.image(*m)?;
            let file = root.join(m.as_str()).join(format!("{}.png", rec.id));
            if *m == Modality::Rgb {
                write_rgb_png(&file, img)?;
            } else {
                let s = img.shape()[1];
                write_gray_png(&file, &Tensor::new([s, s], img.data()[..s * s].to_vec())?)?;
            }
        }
        w.serialize(CsvRow {
            id: rec.id.clone(),
            label: rec.label.to_string(),
            sub_protocol: rec.sub_protocol.to_string(),
        })
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}
