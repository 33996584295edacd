use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{generate_label_map, render_photo, SynthConfig, SynthError};
use crate::raster::io::{write_image, write_mask, write_spacing, BitDepth};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub image_sha256: String,
    pub mask_sha256: String,
    pub slab_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub config: SynthConfig,
    pub spacing_mm: f64,
    pub entries: Vec<DatasetEntry>,
}

fn sha256_file(path: &Path) -> Result<String, SynthError> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Writes `out_dir/{images,masks}/NNNNN.png`, `spacing.json` and
/// `manifest.json`. Rerunning with the same config rewrites identical bytes.
pub fn make_dataset(cfg: &SynthConfig, n: usize, out_dir: &Path) -> Result<DatasetManifest, SynthError> {
    cfg.validate()?;
    let images = out_dir.join("images");
    let masks = out_dir.join("masks");
    fs::create_dir_all(&images)?;
    fs::create_dir_all(&masks)?;
    write_spacing(&out_dir.join("spacing.json"), cfg.spacing_mm)?;

    let mut entries = Vec::with_capacity(n);
    for index in 0..n {
        let lm = generate_label_map(cfg, index as u64)?;
        let (img, mask) = render_photo(&lm, cfg, index as u64);
        let id = format!("{index:05}");
        let image_rel = format!("images/{id}.png");
        let mask_rel = format!("masks/{id}.png");
        write_image(&out_dir.join(&image_rel), &img, BitDepth::Eight)?;
        write_mask(&out_dir.join(&mask_rel), &mask)?;
        entries.push(DatasetEntry {
            image_sha256: sha256_file(&out_dir.join(&image_rel))?,
            mask_sha256: sha256_file(&out_dir.join(&mask_rel))?,
            id,
            image: image_rel,
            mask: mask_rel,
            slab_count: lm.slab_count,
        });
    }

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        spacing_mm: cfg.spacing_mm,
        entries,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    let tmp = out_dir.join("manifest.json.tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, out_dir.join("manifest.json"))?;
    Ok(manifest)
}
