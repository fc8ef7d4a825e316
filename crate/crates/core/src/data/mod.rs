//! Datasets: manifest ingestion, synthetic generation, augmentation and
//! batch sampling.
//!
//! A [`Dataset`] owns decoded images plus the per-record metadata needed by
//! the samplers: the expression class index, the signed view angle, and the
//! view-invariant group id derived from `(subject_id, session_id)` — the
//! set of images captured simultaneously by different cameras. Grouping by
//! session rather than by expression keeps the pre-training stage label-free.

mod augment;
mod manifest;
mod sampler;
mod synthetic;

pub use augment::{augment, AugmentConfig, AugmentParams};
pub use manifest::{DatasetManifest, ManifestRecord};
pub use sampler::{sample_batch, AugmentedBatch, SamplerConfig};
pub use synthetic::{generate_synthetic_dataset, SyntheticConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::path::Path;

/// One decoded image: HWC layout, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_data(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Data(format!(
                "image buffer holds {} values, expected {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Mean over all pixels and channels.
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Append this image to a flat NCHW buffer.
    pub fn write_chw(&self, out: &mut Vec<f64>) {
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.push(self.get(y, x, c));
                }
            }
        }
    }

    /// Load from disk: `.png` (8-bit) or the raw `.f64` container.
    pub fn load(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("png") => {
                let img = image::open(path)
                    .map_err(|e| Error::Data(format!("decode {}: {e}", path.display())))?
                    .to_rgb8();
                let (w, h) = (img.width() as usize, img.height() as usize);
                let mut out = Image::new(h, w, 3);
                for (x, y, px) in img.enumerate_pixels() {
                    for c in 0..3 {
                        out.set(y as usize, x as usize, c, f64::from(px.0[c]) / 255.0);
                    }
                }
                Ok(out)
            }
            Some("f64") => {
                let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
                Self::from_raw_bytes(&bytes)
                    .ok_or_else(|| Error::Data(format!("bad raw image container {}", path.display())))
            }
            other => Err(Error::Data(format!(
                "unsupported image extension {other:?} for {}",
                path.display()
            ))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("png") => {
                let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
                for y in 0..self.height {
                    for x in 0..self.width {
                        let px = |c: usize| {
                            let v = if self.channels == 3 { self.get(y, x, c) } else { self.get(y, x, 0) };
                            (v.clamp(0.0, 1.0) * 255.0).round() as u8
                        };
                        buf.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
                    }
                }
                buf.save(path)
                    .map_err(|e| Error::Data(format!("encode {}: {e}", path.display())))
            }
            Some("f64") => std::fs::write(path, self.to_raw_bytes())
                .map_err(|e| Error::io(path.display().to_string(), e)),
            other => Err(Error::Data(format!(
                "unsupported image extension {other:?} for {}",
                path.display()
            ))),
        }
    }

    /// Raw container: magic, u32 dims, then little-endian f64 values.
    pub fn to_raw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(18 + self.data.len() * 8);
        out.extend_from_slice(b"MVIMG1");
        for dim in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_raw_bytes(bytes: &[u8]) -> Option<Self> {
        let rest = bytes.strip_prefix(b"MVIMG1")?;
        if rest.len() < 12 {
            return None;
        }
        let dim = |i: usize| u32::from_le_bytes(rest[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
        let (h, w, c) = (dim(0), dim(1), dim(2));
        let body = &rest[12..];
        if body.len() != h * w * c * 8 {
            return None;
        }
        let data = body
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Some(Image {
            height: h,
            width: w,
            channels: c,
            data,
        })
    }
}

/// A view-invariant group: all records of one `(subject, session)` capture.
#[derive(Debug, Clone)]
pub struct Group {
    pub view_invariant_id: usize,
    pub sample_indices: Vec<usize>,
}

/// Borrowed view of one record with its derived fields.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub image: &'a Image,
    pub subject_id: &'a str,
    pub expression: usize,
    pub view_angle_deg: i32,
    pub session_id: &'a str,
    pub view_invariant_id: usize,
}

/// Decoded dataset with derived group structure.
#[derive(Debug, Clone)]
pub struct Dataset {
    manifest: DatasetManifest,
    images: Vec<Image>,
    expression_ids: Vec<usize>,
    view_invariant_ids: Vec<usize>,
    groups: Vec<Group>,
}

impl Dataset {
    /// Assemble from an in-memory manifest plus images (one per record).
    pub fn from_parts(manifest: DatasetManifest, images: Vec<Image>) -> Result<Self> {
        if images.len() != manifest.records.len() {
            return Err(Error::Data(format!(
                "{} images for {} manifest records",
                images.len(),
                manifest.records.len()
            )));
        }
        let expression_ids = manifest
            .records
            .iter()
            .map(|r| {
                manifest
                    .expression_vocabulary
                    .iter()
                    .position(|name| *name == r.expression_name)
                    .expect("manifest validated expression names")
            })
            .collect();

        // dense group ids in first-appearance order of (subject, session)
        let mut key_to_id: BTreeMap<(String, String), usize> = BTreeMap::new();
        let mut view_invariant_ids = Vec::with_capacity(manifest.records.len());
        for r in &manifest.records {
            let next = key_to_id.len();
            let id = *key_to_id
                .entry((r.subject_id.clone(), r.session_id.clone()))
                .or_insert(next);
            view_invariant_ids.push(id);
        }
        let mut groups: Vec<Group> = (0..key_to_id.len())
            .map(|id| Group {
                view_invariant_id: id,
                sample_indices: Vec::new(),
            })
            .collect();
        for (idx, &vid) in view_invariant_ids.iter().enumerate() {
            groups[vid].sample_indices.push(idx);
        }

        let ds = Dataset {
            manifest,
            images,
            expression_ids,
            view_invariant_ids,
            groups,
        };
        ds.check_group_expression_consistency()?;
        Ok(ds)
    }

    /// Load a manifest and decode every referenced image (paths are
    /// resolved relative to the manifest's directory).
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let images = manifest
            .records
            .iter()
            .map(|r| Image::load(&base.join(&r.image_path)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(manifest, images)
    }

    /// Simultaneous captures of one subject must share one expression.
    fn check_group_expression_consistency(&self) -> Result<()> {
        for group in &self.groups {
            let mut it = group.sample_indices.iter();
            let Some(&first) = it.next() else { continue };
            for &idx in it {
                if self.expression_ids[idx] != self.expression_ids[first]
                    || self.manifest.records[idx].subject_id != self.manifest.records[first].subject_id
                {
                    return Err(Error::Data(format!(
                        "group {} mixes subjects or expressions (records {} and {})",
                        group.view_invariant_id, first, idx
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn image(&self, idx: usize) -> &Image {
        &self.images[idx]
    }

    pub fn sample(&self, idx: usize) -> Sample<'_> {
        let r = &self.manifest.records[idx];
        Sample {
            image: &self.images[idx],
            subject_id: &r.subject_id,
            expression: self.expression_ids[idx],
            view_angle_deg: r.view_angle_deg,
            session_id: &r.session_id,
            view_invariant_id: self.view_invariant_ids[idx],
        }
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.expression_vocabulary.len()
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.manifest.expression_vocabulary
    }

    pub fn view_set(&self) -> &[i32] {
        &self.manifest.view_set
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let img = &self.images[0];
        (img.channels, img.height, img.width)
    }

    /// Distinct subject ids in first-appearance order.
    pub fn subjects(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for r in &self.manifest.records {
            if !seen.iter().any(|s| *s == r.subject_id.as_str()) {
                seen.push(r.subject_id.as_str());
            }
        }
        seen
    }

    /// New dataset restricted to `indices` (order preserved).
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let records = indices
            .iter()
            .map(|&i| self.manifest.records[i].clone())
            .collect();
        let manifest = DatasetManifest::from_records(
            records,
            self.manifest.expression_vocabulary.clone(),
            self.manifest.view_set.clone(),
        )?;
        let images = indices.iter().map(|&i| self.images[i].clone()).collect();
        Dataset::from_parts(manifest, images)
    }

    /// Plain NCHW tensor of the listed images, no augmentation.
    pub fn images_tensor(&self, indices: &[usize]) -> Tensor {
        let (c, h, w) = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            self.images[i].write_chw(&mut data);
        }
        Tensor::new(vec![indices.len(), c, h, w], data).expect("image dims are uniform")
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.expression_ids[i]).collect()
    }
}
