//! Deterministic triplet dataset synthesis.
//!
//! A dataset directory holds `train/` and `test/` image folders and a
//! `manifest.jsonl` with one [`TripletRecord`] per line. Every record is
//! generated from its own seed `root ⊕ H(id)`, so any single record can be
//! regenerated without the others and generation order does not matter.

mod corpus;
mod procedural;

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blend::{compose, BlendMode};
use crate::error::{Error, Result};
use crate::image::{AlphaMap, LayerImage};
use crate::seed;

pub use corpus::{fit, list_images, load_fitted};
pub use procedural::{gen_procedural_background, gen_procedural_foreground, ForegroundParams};

pub const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subtask {
    #[serde(rename = "xray")]
    XRay,
    Glass,
    Watermark,
    Cell,
    Occlusion,
    Flare,
}

impl Subtask {
    pub const ALL: [Subtask; 6] = [
        Subtask::XRay,
        Subtask::Glass,
        Subtask::Watermark,
        Subtask::Cell,
        Subtask::Occlusion,
        Subtask::Flare,
    ];

    pub fn index(self) -> usize {
        Subtask::ALL.iter().position(|&s| s == self).expect("listed")
    }

    pub fn name(self) -> &'static str {
        match self {
            Subtask::XRay => "xray",
            Subtask::Glass => "glass",
            Subtask::Watermark => "watermark",
            Subtask::Cell => "cell",
            Subtask::Occlusion => "occlusion",
            Subtask::Flare => "flare",
        }
    }

    pub fn blend_mode(self) -> BlendMode {
        match self {
            Subtask::XRay => BlendMode::XRay,
            Subtask::Glass => BlendMode::glass(),
            Subtask::Watermark => BlendMode::WatermarkLinear,
            Subtask::Cell => BlendMode::CellAdditive,
            Subtask::Occlusion => BlendMode::OcclusionOver,
            Subtask::Flare => BlendMode::FlareScreen,
        }
    }

    pub fn default_alpha_range(self) -> (f64, f64) {
        match self {
            Subtask::XRay => (0.5, 0.9),
            Subtask::Glass => (0.1, 0.3),
            Subtask::Watermark => (0.0, 0.25),
            Subtask::Cell => (0.3, 0.8),
            Subtask::Occlusion => (0.3, 0.6),
            Subtask::Flare => (0.05, 0.8),
        }
    }

    /// Element size as a fraction of image width. Watermarks use the
    /// 96–128 px glyph box of a 512 px image.
    pub fn default_size_range(self) -> (f64, f64) {
        match self {
            Subtask::Watermark => (96.0 / 512.0, 128.0 / 512.0),
            Subtask::XRay => (0.3, 0.6),
            Subtask::Glass => (0.25, 0.5),
            Subtask::Cell => (0.15, 0.4),
            Subtask::Occlusion => (0.05, 0.15),
            Subtask::Flare => (0.1, 0.3),
        }
    }
}

impl fmt::Display for Subtask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subtask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "xray" | "x-ray" => Ok(Subtask::XRay),
            "glass" => Ok(Subtask::Glass),
            "watermark" => Ok(Subtask::Watermark),
            "cell" => Ok(Subtask::Cell),
            "occlusion" => Ok(Subtask::Occlusion),
            "flare" => Ok(Subtask::Flare),
            _ => Err(Error::UnknownSubtask(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub enum Source {
    #[default]
    #[serde(rename = "procedural")]
    Procedural,
    /// Either directory may be omitted, in which case that layer stays
    /// procedural.
    #[serde(rename = "corpus")]
    Corpus {
        fg_dir: Option<PathBuf>,
        bg_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub subtask: Subtask,
    pub width: usize,
    pub height: usize,
    pub count_train: usize,
    pub count_test: usize,
    pub alpha_range: (f64, f64),
    pub fg_size_range: (f64, f64),
    pub source: Source,
    pub seed: u64,
    /// Codec patch size the resolution must be a multiple of.
    pub patch: usize,
}

impl SynthSpec {
    pub fn new(subtask: Subtask, width: usize, height: usize, count_train: usize, count_test: usize, seed: u64) -> Self {
        Self {
            subtask,
            width,
            height,
            count_train,
            count_test,
            alpha_range: subtask.default_alpha_range(),
            fg_size_range: subtask.default_size_range(),
            source: Source::Procedural,
            seed,
            patch: 4,
        }
    }

    /// Every violated invariant, as `field: message`.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, (lo, hi)) in [("alpha_range", self.alpha_range), ("fg_size_range", self.fg_size_range)] {
            if !(lo <= hi) {
                out.push(format!("{name}: lower bound {lo} exceeds upper bound {hi}"));
            }
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) {
                out.push(format!("{name}: bounds must lie in [0, 1]"));
            }
        }
        if self.count_train == 0 {
            out.push("count_train: must be positive".into());
        }
        if self.count_test == 0 {
            out.push("count_test: must be positive".into());
        }
        if self.width == 0 || self.height == 0 {
            out.push("resolution: must be non-zero".into());
        }
        if self.patch == 0 || self.width % self.patch != 0 || self.height % self.patch != 0 {
            out.push(format!(
                "resolution: {}x{} is not a multiple of patch {}",
                self.width, self.height, self.patch
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(v.join("; ")))
        }
    }

    fn fg_params(&self) -> ForegroundParams {
        ForegroundParams {
            alpha_range: self.alpha_range,
            size_range: self.fg_size_range,
            shape_count: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSummary {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub id: String,
    pub split: Split,
    pub subtask: Subtask,
    pub mode: BlendMode,
    pub fg_path: String,
    pub bg_path: String,
    pub comp_path: String,
    pub alpha: AlphaSummary,
    pub placement: Placement,
    pub seed: u64,
    /// `procedural` (generated stand-in) or `corpus`.
    pub provenance: String,
}

/// A record with its three images decoded.
#[derive(Debug, Clone)]
pub struct Triplet {
    pub record: TripletRecord,
    pub fg: LayerImage,
    pub bg: LayerImage,
    pub comp: LayerImage,
}

impl TripletRecord {
    /// Loads the images relative to `base`, checking they share one extent.
    pub fn load(&self, base: &Path) -> Result<Triplet> {
        let wrap = |e: Error| Error::Record {
            id: self.id.clone(),
            reason: e.to_string(),
        };
        let fg = LayerImage::load(&base.join(&self.fg_path), 4).map_err(wrap)?;
        let bg = LayerImage::load(&base.join(&self.bg_path), 3).map_err(wrap)?;
        let comp = LayerImage::load(&base.join(&self.comp_path), 3).map_err(wrap)?;
        if !fg.same_extent(&bg) || !bg.same_extent(&comp) {
            return Err(Error::Record {
                id: self.id.clone(),
                reason: "layer extents differ".into(),
            });
        }
        Ok(Triplet {
            record: self.clone(),
            fg,
            bg,
            comp,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetSummary {
    pub n_train: usize,
    pub n_test: usize,
    pub bytes: u64,
}

fn record_id(split: Split, index: usize) -> String {
    format!("{}-{index:06}", split.name())
}

/// Generates the quantized layers and composite for one record.
pub fn generate_record(spec: &SynthSpec, id: &str) -> Result<(LayerImage, LayerImage, LayerImage, Placement, u64)> {
    let record_seed = seed::derive(spec.seed, id);
    let res = (spec.width, spec.height);
    let (fg_seed, bg_seed) = (seed::derive(record_seed, "fg"), seed::derive(record_seed, "bg"));

    let (fg, placement) = match &spec.source {
        Source::Corpus { fg_dir: Some(dir), .. } => {
            let files = list_images(dir)?;
            let mut rng = seed::rng(fg_seed);
            let path = &files[rng.gen_range(0..files.len())];
            let img = image::open(path).map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?;
            let has_alpha = img.color().has_alpha();
            let mut fg = LayerImage::from_dynamic(&fit(&img, spec.width, spec.height), 4)?;
            if !has_alpha {
                let a = if spec.alpha_range.1 > spec.alpha_range.0 {
                    rng.gen_range(spec.alpha_range.0..=spec.alpha_range.1)
                } else {
                    spec.alpha_range.0
                };
                fg = fg.with_alpha(&AlphaMap::constant(spec.width, spec.height, a)?)?;
            }
            let full = Placement {
                x: 0,
                y: 0,
                w: spec.width,
                h: spec.height,
            };
            (fg, full)
        }
        _ => gen_procedural_foreground(fg_seed, res, spec.subtask, &spec.fg_params()),
    };
    let bg = match &spec.source {
        Source::Corpus { bg_dir: Some(dir), .. } => {
            let files = list_images(dir)?;
            let mut rng = seed::rng(bg_seed);
            let path = &files[rng.gen_range(0..files.len())];
            load_fitted(path, spec.width, spec.height, 3)?
        }
        _ => gen_procedural_background(bg_seed, res),
    };

    let fg = fg.quantized();
    let bg = bg.quantized();
    let comp = compose(&fg, &bg, spec.subtask.blend_mode())?.quantized();
    Ok((fg, bg, comp, placement, record_seed))
}

fn save(img: &LayerImage, path: &Path) -> Result<u64> {
    img.save_png(path)?;
    Ok(fs::metadata(path).map_err(|e| Error::io(path, e))?.len())
}

/// Writes `train/`, `test/` and the manifest under `out_dir`.
pub fn build_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetSummary> {
    spec.validate()?;
    let provenance = match spec.source {
        Source::Procedural => "procedural",
        Source::Corpus { .. } => "corpus",
    };
    let mut bytes = 0u64;
    let mut lines = String::new();
    for (split, count) in [(Split::Train, spec.count_train), (Split::Test, spec.count_test)] {
        let dir = out_dir.join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..count {
            let id = record_id(split, i);
            let (fg, bg, comp, placement, record_seed) = generate_record(spec, &id)?;
            let rel = |kind: &str| format!("{}/{id}_{kind}.png", split.name());
            let (fg_path, bg_path, comp_path) = (rel("fg"), rel("bg"), rel("comp"));
            bytes += save(&fg, &out_dir.join(&fg_path))?;
            bytes += save(&bg, &out_dir.join(&bg_path))?;
            bytes += save(&comp, &out_dir.join(&comp_path))?;
            let (min, mean, max) = fg.alpha().expect("foreground is RGBA").summary();
            let record = TripletRecord {
                id,
                split,
                subtask: spec.subtask,
                mode: spec.subtask.blend_mode(),
                fg_path,
                bg_path,
                comp_path,
                alpha: AlphaSummary { min, mean, max },
                placement,
                seed: record_seed,
                provenance: provenance.to_string(),
            };
            lines.push_str(&serde_json::to_string(&record)?);
            lines.push('\n');
        }
    }
    let manifest = out_dir.join(MANIFEST_NAME);
    let mut f = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    f.write_all(lines.as_bytes()).map_err(|e| Error::io(&manifest, e))?;
    bytes += lines.len() as u64;
    Ok(DatasetSummary {
        n_train: spec.count_train,
        n_test: spec.count_test,
        bytes,
    })
}

/// Parses a manifest. Malformed lines are reported with their record id
/// when one can be recovered, otherwise with the line number.
pub fn load_manifest(path: &Path) -> Result<Vec<TripletRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TripletRecord>(&line) {
            Ok(r) => out.push(r),
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|i| i.as_str()).map(String::from))
                    .unwrap_or_else(|| format!("line {}", lineno + 1));
                return Err(Error::Record {
                    id,
                    reason: format!("malformed manifest row: {e}"),
                });
            }
        }
    }
    Ok(out)
}

pub fn split_records(records: &[TripletRecord], split: Split) -> Vec<TripletRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inverse::consistency_check;

    #[test]
    fn subtask_names_roundtrip() {
        for s in Subtask::ALL {
            assert_eq!(s.name().parse::<Subtask>().unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.name()));
        }
        assert!("smoke".parse::<Subtask>().is_err());
    }

    #[test]
    fn spec_violations() {
        let mut spec = SynthSpec::new(Subtask::Occlusion, 30, 32, 0, 1, 1);
        spec.alpha_range = (0.6, 0.3);
        let v = spec.violations();
        assert_eq!(v.len(), 3, "{v:?}");
    }

    #[test]
    fn records_regenerate_independently() {
        let spec = SynthSpec::new(Subtask::XRay, 16, 16, 4, 1, 99);
        let a = generate_record(&spec, "train-000003").unwrap();
        let b = generate_record(&spec, "train-000003").unwrap();
        assert_eq!(a.2, b.2);
        let c = generate_record(&spec, "train-000002").unwrap();
        assert_ne!(a.2, c.2);
    }

    #[test]
    fn small_dataset_layout() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::new(Subtask::Flare, 16, 16, 8, 2, 5);
        let summary = build_dataset(&spec, dir.path()).unwrap();
        assert_eq!((summary.n_train, summary.n_test), (8, 2));
        assert!(summary.bytes > 0);
        let records = load_manifest(&dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(records.len(), 10);
        assert_eq!(split_records(&records, Split::Train).len(), 8);
        assert_eq!(split_records(&records, Split::Test).len(), 2);
        for r in &records {
            let t = r.load(dir.path()).unwrap();
            let c = consistency_check(&t.fg, &t.bg, &t.comp, r.mode, 1.5 / 255.0).unwrap();
            assert!(c.pass, "{}: {}", r.id, c.rmse);
            let recomposed = compose(&t.fg, &t.bg, r.mode).unwrap();
            for (p, q) in recomposed.data().iter().zip(t.comp.data()) {
                assert!((p - q).abs() <= 1.0 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn corpus_source_is_fitted() {
        let dir = tempfile::tempdir().unwrap();
        let bg_dir = dir.path().join("bg");
        fs::create_dir_all(&bg_dir).unwrap();
        image::RgbImage::from_pixel(40, 24, image::Rgb([120, 60, 30]))
            .save(bg_dir.join("one.png"))
            .unwrap();
        let mut spec = SynthSpec::new(Subtask::Occlusion, 16, 16, 2, 1, 3);
        spec.source = Source::Corpus {
            fg_dir: None,
            bg_dir: Some(bg_dir),
        };
        let out = dir.path().join("ds");
        build_dataset(&spec, &out).unwrap();
        let records = load_manifest(&out.join(MANIFEST_NAME)).unwrap();
        assert!(records.iter().all(|r| r.provenance == "corpus"));
        let t = records[0].load(&out).unwrap();
        assert_eq!(t.bg.get(5, 5, 0), 120.0 / 255.0);
    }

    #[test]
    fn malformed_rows_name_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_NAME);
        fs::write(&path, "{\"id\": \"test-000007\", \"split\": \"test\"}\n").unwrap();
        match load_manifest(&path) {
            Err(Error::Record { id, .. }) => assert_eq!(id, "test-000007"),
            other => panic!("unexpected {other:?}"),
        }
        fs::write(&path, "not json\n").unwrap();
        match load_manifest(&path) {
            Err(Error::Record { id, .. }) => assert_eq!(id, "line 1"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
