//! Export a procedural corpus in YOLO layout and read it back.

use odgen::toy::{shapes_corpus, ShapesConfig};
use odgen::types::{export_yolo_dataset, parse_yolo_dataset};

fn main() -> odgen::Result<()> {
    let ds = shapes_corpus(&ShapesConfig { images: 12, ..Default::default() }, 7)?;
    let dir = std::env::temp_dir().join("odgen-yolo-roundtrip");
    let _ = std::fs::remove_dir_all(&dir);
    export_yolo_dataset(&ds, &dir)?;
    let back = parse_yolo_dataset(&dir)?;

    println!("wrote {} images / {} boxes to {}", ds.items.len(), ds.num_annotations(), dir.display());
    let first = &back.items[0];
    for a in &first.annotations {
        println!("{} {:>8} {:?}", first.name, back.categories[a.category_id], a.bbox);
    }
    let max_err = ds
        .items
        .iter()
        .zip(&back.items)
        .flat_map(|(a, b)| a.annotations.iter().zip(&b.annotations))
        .map(|(a, b)| (a.bbox.x - b.bbox.x).abs().max((a.bbox.w - b.bbox.w).abs()))
        .fold(0.0, f64::max);
    println!("max pixel error after round trip: {max_err:.2e}");
    Ok(())
}
