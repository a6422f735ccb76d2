//! Train the foreground/background patch classifier and use it to prune
//! boxes of a pseudo-label that point at empty background.

use odgen::label_filter::{crop_patches, filter_pseudo_labels, train_discriminator, DiscriminatorConfig};
use odgen::stats::PseudoLabel;
use odgen::toy::{shapes_corpus, ShapesConfig};
use odgen::types::{Annotation, BBox};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> odgen::Result<()> {
    let ds = shapes_corpus(&ShapesConfig { images: 120, ..Default::default() }, 0)?;
    let cfg = DiscriminatorConfig {
        patch_size: 32,
        epochs: 4,
        ..Default::default()
    };
    let patches = crop_patches(&ds, cfg.per_image_bg, cfg.patch_size, &mut ChaCha8Rng::seed_from_u64(0));
    let (disc, report) = train_discriminator(&patches, &cfg)?;
    println!(
        "threshold {:.3}, test accuracy {:.3} over {} patches",
        report.threshold, report.test_accuracy, report.test_patches
    );

    // a real object box plus one box placed on background
    let item = &ds.items[0];
    let mut pseudo = PseudoLabel::empty((64, 64));
    pseudo.annotations.push(item.annotations[0].clone());
    let real = item.annotations[0].bbox;
    let empty_x = if real.x > 32.0 { 2.0 } else { 44.0 };
    pseudo.annotations.push(Annotation::new(0, BBox::new(empty_x, 2.0, 18.0, 18.0)?));

    let outcome = filter_pseudo_labels(&item.pixels, &pseudo, &disc)?;
    for d in &outcome.decisions {
        println!("{:?} score {:.3} kept {}", d.bbox, d.score, d.kept);
    }
    println!("removed {}, drop image: {}", outcome.removed(), outcome.drop_image);
    Ok(())
}
