//! On-disk dataset format: grayscale PNGs plus one annotation JSON per patient.
//!
//! ```json
//! { "patient_id": "P000",
//!   "images": { "LH": { "file": "P000_LH.png",
//!                       "joints": [{"type": 0, "x": 12.5, "y": 8.0, "narrowing": 1, "erosion": null}] } } }
//! ```
//!
//! Image paths are relative to the directory holding the JSON file. PNGs
//! may be 8- or 16-bit; values are scaled to `[0, 1]`. Images are always
//! written as 16-bit.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{AnnotatedImage, GrayImage, JointAnnotation};
use crate::schema::{ImageKey, JointSchema, PatientRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub file: String,
    pub joints: Vec<JointAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientAnnotation {
    pub patient_id: String,
    pub images: BTreeMap<ImageKey, ImageEntry>,
}

pub fn unit_to_level(v: f32) -> u16 {
    (f64::from(v).clamp(0.0, 1.0) * 65535.0).round() as u16
}

pub fn level_to_unit(level: u16) -> f32 {
    (f64::from(level) / 65535.0) as f32
}

pub fn read_png(path: &Path) -> Result<GrayImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf)?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::InvalidAnnotation(format!(
            "{}: expected grayscale PNG, found {:?}",
            path.display(),
            info.color_type
        )));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let data: Vec<f32> = match info.bit_depth {
        png::BitDepth::Eight => (0..h)
            .flat_map(|r| buf[r * info.line_size..r * info.line_size + w].iter().map(|&b| f32::from(b) / 255.0))
            .collect(),
        png::BitDepth::Sixteen => (0..h)
            .flat_map(|r| {
                let row = &buf[r * info.line_size..r * info.line_size + 2 * w];
                row.chunks_exact(2).map(|p| level_to_unit(u16::from_be_bytes([p[0], p[1]])))
            })
            .collect(),
        other => {
            return Err(Error::InvalidAnnotation(format!(
                "{}: unsupported bit depth {other:?}",
                path.display()
            )))
        }
    };
    GrayImage::from_vec(h, w, data)
}

/// Writes a 16-bit grayscale PNG; values are clamped to `[0, 1]`.
pub fn write_png(path: &Path, image: &GrayImage) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), image.width() as u32, image.height() as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Sixteen);
    let mut writer = encoder.write_header()?;
    let bytes: Vec<u8> = image.data().iter().flat_map(|&v| unit_to_level(v).to_be_bytes()).collect();
    writer.write_image_data(&bytes)?;
    writer.finish()?;
    Ok(())
}

pub fn annotation_path(dir: &Path, patient_id: &str) -> PathBuf {
    dir.join(format!("{patient_id}.json"))
}

/// Writes one patient's four PNGs and its annotation JSON.
pub fn save_record(dir: &Path, record: &PatientRecord) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut images = BTreeMap::new();
    for (key, img) in &record.images {
        let file = format!("{}_{}.png", record.patient_id, key);
        write_png(&dir.join(&file), &img.pixels)?;
        images.insert(
            *key,
            ImageEntry {
                file,
                joints: img.joints.clone(),
            },
        );
    }
    let ann = PatientAnnotation {
        patient_id: record.patient_id.clone(),
        images,
    };
    let path = annotation_path(dir, &record.patient_id);
    let json = serde_json::to_string_pretty(&ann)?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn save_records(dir: &Path, records: &[PatientRecord]) -> Result<()> {
    records.iter().try_for_each(|r| save_record(dir, r))
}

/// Reads one annotation JSON and the PNGs it references, validating
/// everything against `schema`.
pub fn load_record(json_path: &Path, schema: &JointSchema) -> Result<PatientRecord> {
    let bytes = std::fs::read(json_path).map_err(|e| Error::io(json_path, e))?;
    let ann: PatientAnnotation = serde_json::from_slice(&bytes)
        .map_err(|e| Error::InvalidAnnotation(format!("{}: {e}", json_path.display())))?;
    let base = json_path.parent().unwrap_or(Path::new("."));
    let mut images = BTreeMap::new();
    for (key, entry) in ann.images {
        let pixels = read_png(&base.join(&entry.file))?;
        let img = AnnotatedImage {
            pixels,
            limb: key.limb(),
            side: key.side(),
            joints: entry.joints,
        };
        img.validate(schema)?;
        images.insert(key, img);
    }
    PatientRecord::new(ann.patient_id, images)
}

/// Loads every `*.json` annotation in `dir`, sorted by patient id.
pub fn load_dir(dir: &Path, schema: &JointSchema) -> Result<Vec<PatientRecord>> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            paths.push(path);
        }
    }
    let mut records = paths.iter().map(|p| load_record(p, schema)).collect::<Result<Vec<_>>>()?;
    records.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    if let Some(w) = records.windows(2).find(|w| w[0].patient_id == w[1].patient_id) {
        return Err(Error::InvalidAnnotation(format!("duplicate patient id {}", w[0].patient_id)));
    }
    Ok(records)
}
