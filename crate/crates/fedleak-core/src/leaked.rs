//! Assembling reconstructed slots into a training corpus, with on-disk
//! export (JSON manifest plus raw f32 blobs) and lineage tracking.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lll::{BinContent, BinRecon};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct LeakedImage {
    /// [c, h, w], clamped to [0, 1].
    pub image: Tensor,
    /// Known (oracle or recovered) class, when available.
    pub label: Option<usize>,
    /// Where this image came from: attack, round, client, slot.
    pub source: String,
    /// Pixel range of the reconstruction; collisions and washed-out slots
    /// score low.
    pub quality: f64,
}

#[derive(Debug, Clone)]
pub struct LeakedDataset {
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub images: Vec<LeakedImage>,
}

impl LeakedDataset {
    pub fn new(input: (usize, usize, usize), classes: usize) -> LeakedDataset {
        LeakedDataset { input, classes, images: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Adds every slot classified as a single image. Labels and
    /// classification come from the caller (count oracle in simulations, the
    /// pixel-range heuristic outside them).
    pub fn extend_from_slots(
        &mut self,
        recs: &[BinRecon],
        content: &[BinContent],
        labels: &[Option<usize>],
        lineage: &str,
    ) -> Result<usize> {
        if recs.len() != content.len() || recs.len() != labels.len() {
            return Err(Error::input("slot, classification, and label lists must align"));
        }
        let d = self.input.0 * self.input.1 * self.input.2;
        let mut added = 0;
        for ((rec, cls), label) in recs.iter().zip(content).zip(labels) {
            if *cls != BinContent::Single {
                continue;
            }
            if rec.image.numel() != d {
                return Err(Error::input(format!(
                    "slot {} image has {} pixels, dataset wants {}",
                    rec.slot,
                    rec.image.numel(),
                    d
                )));
            }
            if let Some(l) = label {
                if *l >= self.classes {
                    return Err(Error::input(format!("label {} out of range", l)));
                }
            }
            let mut img = rec.image.clone();
            img.clamp_in_place(0.0, 1.0);
            let lo = img.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = img.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            self.images.push(LeakedImage {
                image: img,
                label: *label,
                source: format!("{}/slot{}", lineage, rec.slot),
                quality: hi - lo,
            });
            added += 1;
        }
        Ok(added)
    }

    /// Drops images whose pixel range falls below `min_quality`.
    pub fn filter_by_quality(&self, min_quality: f64) -> LeakedDataset {
        LeakedDataset {
            input: self.input,
            classes: self.classes,
            images: self.images.iter().filter(|i| i.quality >= min_quality).cloned().collect(),
        }
    }

    /// Labeled subset as a trainable dataset.
    pub fn to_dataset(&self, name: &str) -> Result<Dataset> {
        let labeled: Vec<&LeakedImage> =
            self.images.iter().filter(|i| i.label.is_some()).collect();
        if labeled.is_empty() {
            return Err(Error::input("no labeled leaked images"));
        }
        let d = self.input.0 * self.input.1 * self.input.2;
        let mut pixels = Vec::with_capacity(labeled.len() * d);
        let mut labels = Vec::with_capacity(labeled.len());
        for img in labeled {
            pixels.extend_from_slice(img.image.data());
            labels.push(img.label.unwrap());
        }
        Dataset::new(name, self.input, self.classes, pixels, labels)
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestImage {
    file: String,
    label: Option<usize>,
    source: String,
    quality: f64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    input: [usize; 3],
    classes: usize,
    images: Vec<ManifestImage>,
}

const SCHEMA_VERSION: u32 = 1;

/// Writes `manifest.json` plus one little-endian f32 blob per image.
/// Pixels round-trip within f32 precision (~1e-7 relative).
pub fn export(ds: &LeakedDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(ds.images.len());
    for (i, img) in ds.images.iter().enumerate() {
        let file = format!("img_{:06}.f32", i);
        let mut w = BufWriter::new(File::create(dir.join(&file))?);
        for v in img.image.data() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        w.flush()?;
        entries.push(ManifestImage {
            file,
            label: img.label,
            source: img.source.clone(),
            quality: img.quality,
        });
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        input: [ds.input.0, ds.input.1, ds.input.2],
        classes: ds.classes,
        images: entries,
    };
    let f = BufWriter::new(File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(f, &manifest)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<LeakedDataset> {
    let f = BufReader::new(File::open(dir.join("manifest.json"))?);
    let manifest: Manifest = serde_json::from_reader(f)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::format(format!(
            "manifest schema {} unsupported (expected {})",
            manifest.schema_version, SCHEMA_VERSION
        )));
    }
    let input = (manifest.input[0], manifest.input[1], manifest.input[2]);
    let d = input.0 * input.1 * input.2;
    let mut out = LeakedDataset::new(input, manifest.classes);
    for entry in manifest.images {
        let mut bytes = Vec::new();
        BufReader::new(File::open(dir.join(&entry.file))?).read_to_end(&mut bytes)?;
        if bytes.len() != d * 4 {
            return Err(Error::format(format!(
                "{}: {} bytes, expected {}",
                entry.file,
                bytes.len(),
                d * 4
            )));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        if let Some(l) = entry.label {
            if l >= manifest.classes {
                return Err(Error::format(format!("{}: label {} out of range", entry.file, l)));
            }
        }
        out.images.push(LeakedImage {
            image: Tensor::from_parts(vec![input.0, input.1, input.2], data),
            label: entry.label,
            source: entry.source,
            quality: entry.quality,
        });
    }
    Ok(out)
}
