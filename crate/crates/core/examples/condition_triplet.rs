//! Build the image list, text list, global prompt and foreground mask for
//! one sampled layout. Pool images here are crops of real objects.

use odgen::conditioning::{boxes_to_mask, build_condition_triplet, ForegroundPool};
use odgen::stats::LayoutStats;
use odgen::toy::{shapes_corpus, ShapesConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> odgen::Result<()> {
    let ds = shapes_corpus(&ShapesConfig { images: 40, ..Default::default() }, 3)?;
    let mut pool = ForegroundPool::new(ds.categories.clone());
    for item in &ds.items {
        for a in &item.annotations {
            let (x0, y0, x1, y1) = a.bbox.rounded_edges(item.width() as usize, item.height() as usize);
            let crop = image::imageops::crop_imm(&item.pixels, x0 as u32, y0 as u32, (x1 - x0) as u32, (y1 - y0) as u32);
            pool.push(a.category_id, crop.to_image());
        }
    }

    let stats = LayoutStats::fit(&ds, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pseudo = stats.sampler().sample((64, 64), &mut rng);
    let n = ds.max_objects_per_image();
    let triplet = build_condition_triplet(&pseudo, &ds.categories, &ds.scene_name, &pool, n, &mut rng)?;
    println!("global prompt: {}", triplet.global_prompt);
    println!("text list: {:?}", triplet.text_list.entries);
    for (i, c) in triplet.image_list.canvases.iter().enumerate() {
        println!("canvas {i}: {} pasted pixels", c.nonzero_pixels().len());
    }

    let mask = boxes_to_mask(&pseudo.annotations, 64, 64, ds.num_categories());
    for y in (0..64).step_by(4) {
        let row: String = (0..64)
            .step_by(2)
            .map(|x| match (0..ds.num_categories()).map(|k| mask.get(y, x, k)).sum::<u32>() {
                0 => '.',
                1 => '#',
                _ => '@',
            })
            .collect();
        println!("{row}");
    }
    Ok(())
}
