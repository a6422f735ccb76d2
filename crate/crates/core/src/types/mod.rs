//! Boxes, annotations, datasets and YOLO I/O.

mod bbox;
mod dataset;
pub mod yolo;

pub use bbox::{clip_bbox, derive_geometry, BBox};
pub use dataset::{Annotation, DetectionDataset, LabeledImage, Layout, Split};
pub use yolo::{export_yolo_dataset, parse_yolo_dataset, DatasetManifest};
