//! Fréchet distance between Gaussian fits of two feature sets, first on
//! synthetic vectors and then on images through a trained patch classifier.

use odgen::eval::{compute_fid, fid_from_features};
use odgen::label_filter::{crop_patches, train_discriminator, DiscriminatorConfig};
use odgen::toy::{shapes_corpus, ShapesConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> odgen::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let draw = |shift: f64, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..2000).map(|_| (0..4).map(|_| unit.sample(rng) + shift).collect()).collect()
    };
    let a = draw(0.0, &mut rng);
    for shift in [0.0, 0.5, 1.0] {
        let b = draw(shift, &mut rng);
        println!("shift {shift}: FID {:.3} (population value {:.3})", fid_from_features(&a, &b)?, 4.0 * shift * shift);
    }

    let real = shapes_corpus(&ShapesConfig { images: 80, ..Default::default() }, 0)?;
    let other = shapes_corpus(&ShapesConfig { images: 80, ..Default::default() }, 1)?;
    let crowded = shapes_corpus(
        &ShapesConfig {
            images: 80,
            min_objects: 4,
            max_objects: 6,
            max_iou: 0.3,
            ..Default::default()
        },
        2,
    )?;
    let cfg = DiscriminatorConfig {
        patch_size: 32,
        epochs: 3,
        ..Default::default()
    };
    let (disc, _) = train_discriminator(&crop_patches(&real, cfg.per_image_bg, cfg.patch_size, &mut rng), &cfg)?;
    let pixels = |ds: &odgen::types::DetectionDataset| ds.items.iter().map(|i| i.pixels.clone()).collect::<Vec<_>>();
    for (name, ds) in [("same distribution", &other), ("more objects", &crowded)] {
        let r = compute_fid(&pixels(&real), &pixels(ds), &disc)?;
        println!("{name}: FID {:.4} with {}", r.fid, r.extractor);
    }
    Ok(())
}
