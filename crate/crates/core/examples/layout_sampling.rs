//! Fit per-class count and box statistics, then draw pseudo-labels.

use odgen::stats::LayoutStats;
use odgen::toy::{shapes_corpus, ShapesConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> odgen::Result<()> {
    let ds = shapes_corpus(&ShapesConfig::default(), 0)?;
    let stats = LayoutStats::fit(&ds, None)?;
    println!("count mean {:?}", stats.counts.mean);
    for (k, row) in stats.counts.covariance.iter().enumerate() {
        println!("count cov[{k}] {row:?}");
    }
    for k in 0..ds.num_categories() {
        if let Some(b) = stats.boxes.get(k) {
            println!("{:>8}: x {:.3}±{:.3}  area {:.4}", ds.categories[k], b.x.mean, b.x.variance.sqrt(), b.area.mean);
        }
    }

    let sampler = stats.sampler();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..4 {
        let label = sampler.sample((64, 64), &mut rng);
        let names: Vec<_> = label.annotations.iter().map(|a| ds.categories[a.category_id].as_str()).collect();
        println!("pseudo-label {i}: {names:?}");
    }
    Ok(())
}
