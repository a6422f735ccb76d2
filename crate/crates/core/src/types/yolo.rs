//! YOLO-layout dataset reader and writer.
//!
//! On-disk layout:
//!
//! ```text
//! <root>/
//!   dataset.toml        # manifest: class names, scene name, split
//!   images/<stem>.png
//!   labels/<stem>.txt   # one `class cx cy w h` line per object, normalized
//! ```
//!
//! Manifest schema (`dataset.toml`):
//!
//! ```toml
//! names = ["circle", "square", "triangle"]   # class id = index
//! scene = "tabletop"
//! split = "train"                            # train | val | test
//! ```
//!
//! Images without a label file have no objects. A label file without an
//! image is an error. Boxes are stored internally as top-left + size in
//! pixels; the normalized center format only exists in label files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bbox::BBox;
use super::dataset::{Annotation, DetectionDataset, LabeledImage, Split};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "dataset.toml";
pub const IMAGES_DIR: &str = "images";
pub const LABELS_DIR: &str = "labels";

/// Boxes whose clipped area falls below this many square pixels are dropped
/// at parse time.
pub const MIN_BOX_AREA: f64 = 1.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub names: Vec<String>,
    pub scene: String,
    pub split: Split,
}

impl DatasetManifest {
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)?;
        toml::from_str(&text)
            .map_err(|e| Error::InvalidDataset(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(root.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}

/// One parsed label line, still in normalized center format.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YoloLine {
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl YoloLine {
    pub fn parse(line: &str, path: &Path, line_no: usize) -> Result<Option<Self>> {
        let line = line.trim();
        if line.is_empty() {
            return Ok(None);
        }
        let bad = |reason: String| Error::MalformedLabel {
            path: path.to_path_buf(),
            line: line_no,
            reason,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", fields.len())));
        }
        let class: usize = fields[0]
            .parse()
            .map_err(|_| bad(format!("class `{}` is not a non-negative integer", fields[0])))?;
        let mut vals = [0.0f64; 4];
        for (v, (name, raw)) in vals
            .iter_mut()
            .zip(["cx", "cy", "w", "h"].iter().zip(&fields[1..]))
        {
            *v = raw
                .parse()
                .map_err(|_| bad(format!("{name} `{raw}` is not a number")))?;
            if !(0.0..=1.0).contains(v) {
                return Err(bad(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        let [cx, cy, w, h] = vals;
        if w <= 0.0 || h <= 0.0 {
            return Err(bad(format!("box size {w}x{h} must be positive")));
        }
        Ok(Some(Self { class, cx, cy, w, h }))
    }

    /// Convert to a pixel box (unclipped).
    pub fn to_pixels(&self, width: f64, height: f64) -> Result<BBox> {
        BBox::new(
            (self.cx - self.w / 2.0) * width,
            (self.cy - self.h / 2.0) * height,
            self.w * width,
            self.h * height,
        )
    }

    pub fn from_annotation(a: &Annotation, width: f64, height: f64) -> Self {
        let b = &a.bbox;
        Self {
            class: a.category_id,
            cx: (b.x + b.w / 2.0) / width,
            cy: (b.y + b.h / 2.0) / height,
            w: b.w / width,
            h: b.h / height,
        }
    }

    pub fn format(&self) -> String {
        format!(
            "{} {:.8} {:.8} {:.8} {:.8}",
            self.class, self.cx, self.cy, self.w, self.h
        )
    }
}

fn sorted_entries(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Read one label file into clipped pixel annotations.
pub fn read_label_file(
    path: &Path,
    width: u32,
    height: u32,
    num_categories: usize,
) -> Result<Vec<Annotation>> {
    let text = fs::read_to_string(path)?;
    let (w, h) = (width as f64, height as f64);
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let Some(parsed) = YoloLine::parse(line, path, i + 1)? else {
            continue;
        };
        if parsed.class >= num_categories {
            return Err(Error::MalformedLabel {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("class {} out of range for {num_categories} classes", parsed.class),
            });
        }
        let bbox = match parsed.to_pixels(w, h).and_then(|b| b.clip(w, h)) {
            Ok(b) if b.area() >= MIN_BOX_AREA => b,
            _ => {
                log::warn!(
                    "{}:{}: dropping box smaller than {MIN_BOX_AREA} px^2 after clipping",
                    path.display(),
                    i + 1
                );
                continue;
            }
        };
        out.push(Annotation::new(parsed.class, bbox));
    }
    Ok(out)
}

pub fn parse_yolo_dataset(root: &Path) -> Result<DetectionDataset> {
    let manifest = DatasetManifest::read(root)?;
    let mut ds = DetectionDataset::new(manifest.names, manifest.scene, manifest.split)?;
    let images_dir = root.join(IMAGES_DIR);
    let labels_dir = root.join(LABELS_DIR);

    let images = sorted_entries(&images_dir, "png")?;
    let labels = sorted_entries(&labels_dir, "txt")?;
    for label in &labels {
        if !images_dir.join(format!("{}.png", stem(label))).exists() {
            return Err(Error::MissingImage { label: label.clone() });
        }
    }

    let k = ds.num_categories();
    for path in images {
        let name = stem(&path);
        let pixels = image::open(&path)?.to_rgb8();
        let label_path = labels_dir.join(format!("{name}.txt"));
        let annotations = if label_path.exists() {
            read_label_file(&label_path, pixels.width(), pixels.height(), k)?
        } else {
            Vec::new()
        };
        ds.items.push(LabeledImage {
            name,
            pixels,
            annotations,
        });
    }
    Ok(ds)
}

/// Write the label file for one image.
pub fn write_label_file(path: &Path, annotations: &[Annotation], width: u32, height: u32) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for a in annotations {
        let line = YoloLine::from_annotation(a, width as f64, height as f64);
        writeln!(f, "{}", line.format())?;
    }
    Ok(())
}

pub fn export_yolo_dataset(dataset: &DetectionDataset, root: &Path) -> Result<()> {
    dataset.validate()?;
    let images_dir = root.join(IMAGES_DIR);
    let labels_dir = root.join(LABELS_DIR);
    fs::create_dir_all(&images_dir)?;
    fs::create_dir_all(&labels_dir)?;
    DatasetManifest {
        names: dataset.categories.clone(),
        scene: dataset.scene_name.clone(),
        split: dataset.split,
    }
    .write(root)?;
    for item in &dataset.items {
        item.pixels.save(images_dir.join(format!("{}.png", item.name)))?;
        write_label_file(
            &labels_dir.join(format!("{}.txt", item.name)),
            &item.annotations,
            item.width(),
            item.height(),
        )?;
    }
    Ok(())
}
