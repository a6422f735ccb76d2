//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Criterion 8 runs the full toy pipeline from `configs/toy.toml`; its work
//! directory is reused when already complete, so the first run is slow (about
//! 1.5 h on one core) and later runs take seconds.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use odgen::conditioning::{
    boxes_to_mask, build_text_list, ImageEncoderChannels, ImageListEncoder, TextListEncoder,
};
use odgen::diffusion::{
    control_loss, dual_finetune_loss, forward_noise, make_noise_schedule, reconstruction_loss, ControlInput,
    DenoiserConfig, DenoiserModel, LossBatch, ModelCond, NoiseSchedule, ScheduleKind,
};
use odgen::eval::{fid_from_features, frechet_distance};
use odgen::nn::ParamStore;
use odgen::pipeline::{Pipeline, PipelineConfig};
use odgen::stats::{fit_box_stats, fit_count_stats, LayoutStats, PseudoLabel};
use odgen::types::{export_yolo_dataset, parse_yolo_dataset, Annotation, BBox, DetectionDataset, LabeledImage, Split};

type Outcome = Result<String, String>;

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn randn(shape: &[usize], dtype: DType, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

// 1 -------------------------------------------------------------------------

fn box_mask_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cells = 0usize;
    for case in 0..1000 {
        let h = rng.random_range(1..=40usize);
        let w = rng.random_range(1..=40usize);
        let k = rng.random_range(1..=5usize);
        let n = rng.random_range(0..=8usize);
        let mut anns = Vec::new();
        while anns.len() < n {
            let x = rng.random_range(-4.0..w as f64);
            let y = rng.random_range(-4.0..h as f64);
            let bw = rng.random_range(0.2..w as f64 / 2.0 + 4.0);
            let bh = rng.random_range(0.2..h as f64 / 2.0 + 4.0);
            if let Ok(b) = BBox::new(x, y, bw, bh) {
                anns.push(Annotation::new(rng.random_range(0..k), b));
            }
        }
        let mask = boxes_to_mask(&anns, h, w, k);
        for py in 0..h {
            for px in 0..w {
                let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
                for c in 0..k {
                    let want = anns
                        .iter()
                        .filter(|a| a.category_id == c)
                        .filter(|a| {
                            let b = &a.bbox;
                            cx > b.x.round() && cx < b.right().round() && cy > b.y.round() && cy < b.bottom().round()
                        })
                        .count() as u32;
                    if mask.get(py, px, c) != want {
                        return Err(format!("case {case}: pixel ({py},{px}) class {c}: {} != {want}", mask.get(py, px, c)));
                    }
                    cells += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 10.0, format!("1000 cases, {cells} cells match; {secs:.2}s"))
}

// 2, 3 ----------------------------------------------------------------------

fn toy_config() -> DenoiserConfig {
    DenoiserConfig {
        image_size: 16,
        channels: [4, 4, 4],
        time_dim: 4,
        attn_dim: 4,
        vocab: 8,
        text_len: 2,
        text_dim: 4,
        list_len: 2,
        image_encoder_layers: Some([4, 4, 4, 8]),
        timesteps: 100,
        ..Default::default()
    }
}

struct LossFixture {
    model: DenoiserModel,
    schedule: NoiseSchedule,
    objects: LossBatch<ModelCond>,
    scenes: LossBatch<ModelCond>,
    control: LossBatch<ModelCond>,
    mask: Tensor,
}

fn loss_fixture(dtype: DType, perturb_control: bool) -> LossFixture {
    let cfg = toy_config();
    let model = DenoiserModel::new(cfg.clone(), 3, dtype).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    if perturb_control {
        // open the zero-initialized paths so every parameter receives gradient
        let params = model.params();
        let zeroed = ["control.", "unet.dec.conv_out", "unet.dec.input_skip"]
            .into_iter()
            .flat_map(|p| params.vars_with_prefix(p));
        for (_, var) in zeroed {
            let noise = (randn(var.dims(), dtype, &mut rng) * 0.05).unwrap();
            var.set(&(var.as_tensor() + noise).unwrap()).unwrap();
        }
    }
    let schedule = make_noise_schedule(100, ScheduleKind::Linear).unwrap();
    let s = cfg.image_size;
    let b = 2;
    let categories = vec!["circle".to_string(), "square".to_string()];
    let mut pseudo = PseudoLabel::empty((s, s));
    pseudo.annotations.push(Annotation::new(1, BBox::new(2.0, 3.0, 7.0, 6.0).unwrap()));
    let text_list = build_text_list(&pseudo, &categories, cfg.list_len).unwrap();
    let batch = |rng: &mut ChaCha8Rng, prompts: Vec<String>, control: Option<ControlInput>| LossBatch {
        x0: randn(&[b, 3, s, s], dtype, rng),
        t: vec![rng.random_range(0..100), rng.random_range(0..100)],
        eps: randn(&[b, 3, s, s], dtype, rng),
        cond: ModelCond { prompts, control },
    };
    let objects = batch(&mut rng, vec!["a circle".into(), "a square".into()], None);
    let scenes = batch(&mut rng, vec!["a tabletop".into(); 2], None);
    let canvases = randn(&[b, 3 * cfg.list_len, s, s], dtype, &mut rng).abs().unwrap();
    let control = batch(
        &mut rng,
        vec!["a square in a tabletop".into(); 2],
        Some(ControlInput {
            canvases,
            text_lists: vec![text_list; b],
        }),
    );
    let mask_v: Vec<f64> = (0..b * s * s).map(|i| ((i % s) >= 4 && (i % s) < 11) as u8 as f64).collect();
    let mask = Tensor::from_vec(mask_v, (b, 1, s, s), &Device::Cpu).unwrap().to_dtype(dtype).unwrap();
    LossFixture {
        model,
        schedule,
        objects,
        scenes,
        control,
        mask,
    }
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn loss_identities() -> Outcome {
    let f = loss_fixture(DType::F32, true);
    let recon = scalar(&reconstruction_loss(&f.model, &f.control, &f.schedule).unwrap());
    let g0 = scalar(&control_loss(&f.model, &f.control, &f.mask, 0.0, &f.schedule).unwrap());
    let ones = f.mask.ones_like().unwrap();
    let gamma = 25.0;
    let full = scalar(&control_loss(&f.model, &f.control, &ones, gamma, &f.schedule).unwrap());
    let rel = (full - (1.0 + gamma) * recon).abs() / ((1.0 + gamma) * recon);
    let obj = scalar(&reconstruction_loss(&f.model, &f.objects, &f.schedule).unwrap());
    let dual0 = scalar(&dual_finetune_loss(&f.model, &f.objects, &f.scenes, 0.0, &f.schedule).unwrap());
    check(
        g0 == recon && rel <= 1e-6 && dual0 == obj,
        format!("gamma=0 exact: {}; ones-mask rel err {rel:.2e}; lambda=0 exact: {}", g0 == recon, dual0 == obj),
    )
}

/// Max relative error between backprop and a five-point difference stencil over
/// `samples` random coordinates of `vars`.
fn grad_check(vars: &[(String, Var)], loss: &dyn Fn() -> Tensor, samples: usize, rng: &mut ChaCha8Rng) -> (f64, usize) {
    let grads = loss().backward().unwrap();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut active = 0;
    for _ in 0..samples {
        let (_, var) = &vars[rng.random_range(0..vars.len())];
        let shape = var.dims().to_vec();
        let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let i = rng.random_range(0..base.len());
        let analytic = grads
            .get(var.as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap()[i])
            .unwrap_or(0.0);
        let eval_at = |v: f64| {
            let mut p = base.clone();
            p[i] = v;
            var.set(&Tensor::from_vec(p, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
            scalar(&loss())
        };
        let x = base[i];
        let numeric = (8.0 * (eval_at(x + h) - eval_at(x - h)) - (eval_at(x + 2.0 * h) - eval_at(x - 2.0 * h))) / (12.0 * h);
        var.set(&Tensor::from_vec(base.clone(), shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
        // roundoff floor of the difference quotient; small gradients cannot
        // reach a relative tolerance and are compared in absolute terms
        let floor = 1e3 * f64::EPSILON * scalar(&loss()).abs().max(1.0) / h;
        let scale = analytic.abs().max(numeric.abs());
        let diff = (analytic - numeric).abs();
        if scale > 100.0 * floor {
            active += 1;
            worst = worst.max(diff / scale);
        } else if diff > floor {
            worst = f64::INFINITY;
        }
    }
    (worst, active)
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let f = loss_fixture(DType::F64, true);
    let n_params = f.model.num_parameters();
    let store = f.model.params();
    let base: Vec<(String, Var)> = store.vars_with_prefix("").into_iter().filter(|(n, _)| !n.starts_with("control.")).collect();
    let all = store.vars_with_prefix("");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (e1, a1) = grad_check(&base, &|| reconstruction_loss(&f.model, &f.objects, &f.schedule).unwrap(), 40, &mut rng);
    let (e2, a2) = grad_check(
        &base,
        &|| dual_finetune_loss(&f.model, &f.objects, &f.scenes, 0.7, &f.schedule).unwrap(),
        40,
        &mut rng,
    );
    let (e3, a3) = grad_check(&all, &|| control_loss(&f.model, &f.control, &f.mask, 25.0, &f.schedule).unwrap(), 60, &mut rng);
    let secs = start.elapsed().as_secs_f64();
    let worst = e1.max(e2).max(e3);
    check(
        worst <= 1e-4 && n_params <= 10_000 && secs < 60.0,
        format!(
            "{n_params} params; max rel err recon {e1:.1e} ({a1} coords), dual {e2:.1e} ({a2}), control {e3:.1e} ({a3}); {secs:.1}s"
        ),
    )
}

// 4 -------------------------------------------------------------------------

fn count_corpus() -> DetectionDataset {
    let size = 128u32;
    let mut ds = DetectionDataset::new(vec!["a".into(), "b".into()], "desk", Split::Train).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let count_dist = [Normal::new(12.0, 3.0).unwrap(), Normal::new(10.0, 3.0).unwrap()];
    let attr = |m: f64, s: f64| Normal::new(m, s).unwrap();
    let class_attrs = [
        [attr(0.30, 0.05), attr(0.35, 0.06), attr(0.004, 0.001), attr(1.0, 0.1)],
        [attr(0.50, 0.06), attr(0.25, 0.05), attr(0.006, 0.0012), attr(1.3, 0.12)],
    ];
    for i in 0..100 {
        let mut annotations = Vec::new();
        for (k, dist) in count_dist.iter().enumerate() {
            let c = Distribution::<f64>::sample(dist, &mut rng).round().max(0.0) as usize;
            for _ in 0..c {
                let [x, y, area, ratio] = class_attrs[k].each_ref().map(|d| d.sample(&mut rng));
                let s = size as f64;
                let (w, h) = ((area * ratio).sqrt() * s, (area / ratio).sqrt() * s);
                annotations.push(Annotation::new(k, BBox::new(x * s, y * s, w, h).unwrap()));
            }
        }
        ds.items.push(LabeledImage {
            name: format!("{i}"),
            pixels: image::RgbImage::new(size, size),
            annotations,
        });
    }
    ds.validate().unwrap();
    ds
}

fn statistics_roundtrip() -> Outcome {
    let start = Instant::now();
    let ds = count_corpus();
    let fitted = LayoutStats::fit(&ds, Some(1000)).unwrap();
    let sampler = fitted.sampler();
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let size = (128, 128);
    let draws: Vec<PseudoLabel> = (0..10_000).map(|_| sampler.sample(size, &mut rng)).collect();

    // clamping: negative counts and boxes touching the border
    let clamped_counts = {
        let k = fitted.counts.mean.len();
        let mut z = 0usize;
        for i in 0..k {
            let sd = fitted.counts.covariance[i][i].sqrt();
            let p = 0.5 * statrs::function::erf::erfc((fitted.counts.mean[i] + 0.5) / (sd * std::f64::consts::SQRT_2));
            z += (p * 10_000.0).ceil() as usize;
        }
        z
    };
    let boxes: Vec<&Annotation> = draws.iter().flat_map(|d| &d.annotations).collect();
    let touching = boxes
        .iter()
        .filter(|a| a.bbox.x <= 0.0 || a.bbox.y <= 0.0 || a.bbox.right() >= 128.0 || a.bbox.bottom() >= 128.0)
        .count();
    let clip_frac = touching as f64 / boxes.len() as f64;

    let counts = fit_count_stats(&draws, 2).unwrap();
    let refit_boxes = fit_box_stats(&draws, 2);
    let n = draws.len() as f64;
    let mut worst: (f64, String) = (0.0, String::new());
    let mut note = |z: f64, what: String| {
        if z > worst.0 {
            worst = (z, what);
        }
    };
    let cov = &fitted.counts.covariance;
    for i in 0..2 {
        let se = (cov[i][i] / n).sqrt();
        note((counts.mean[i] - fitted.counts.mean[i]).abs() / se, format!("count mean {i}"));
        for j in 0..2 {
            let se = ((cov[i][i] * cov[j][j] + cov[i][j].powi(2)) / (n - 1.0)).sqrt();
            note((counts.covariance[i][j] - cov[i][j]).abs() / se, format!("count cov {i}{j}"));
        }
    }
    for k in 0..2 {
        let a = fitted.boxes.get(k).unwrap();
        let b = refit_boxes.get(k).unwrap();
        let m = boxes.iter().filter(|x| x.category_id == k).count() as f64;
        for (name, ga, gb) in [("x", &a.x, &b.x), ("y", &a.y, &b.y), ("area", &a.area, &b.area), ("ratio", &a.ratio, &b.ratio)] {
            note((gb.mean - ga.mean).abs() / (ga.variance / m).sqrt(), format!("class {k} {name} mean"));
            let se_var = ga.variance * (2.0 / (m - 1.0)).sqrt();
            note((gb.variance - ga.variance).abs() / se_var, format!("class {k} {name} variance"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst.0 <= 3.0 && clip_frac < 0.01 && clamped_counts < 100 && secs < 30.0,
        format!(
            "worst deviation {:.2} SE ({}); boxes at border {:.3}%; {secs:.1}s",
            worst.0,
            worst.1,
            100.0 * clip_frac
        ),
    )
}

// 5 -------------------------------------------------------------------------

fn conditioning_shapes() -> Outcome {
    let mut notes = Vec::new();
    for (n, table) in [(2usize, [16, 32, 96, 256]), (6, [32, 96, 128, 256])] {
        let ch = ImageEncoderChannels::for_n(n);
        if ch.layers != table || ch.input() != 3 * n {
            return Err(format!("N={n}: channels {:?} from {} inputs", ch.layers, ch.input()));
        }
        let store = ParamStore::new(0, DType::F32);
        let enc = ImageListEncoder::new(ch, store.var_builder()).unwrap();
        let out = enc.forward(&Tensor::zeros((1, 3 * n, 64, 64), DType::F32, &Device::Cpu).unwrap()).unwrap();
        if out.dims() != [1, 256, 8, 8] {
            return Err(format!("N={n}: image list encodes to {:?}", out.dims()));
        }
        notes.push(format!("N={n} {:?}->{:?}", ch.layers, out.dims()));
    }
    let (l, d) = (77, 16);
    for n in [8usize, 17, 27] {
        let want = [n, n / 2, n / 4, n / 8, 1];
        if TextListEncoder::channels(n) != want {
            return Err(format!("N={n}: text channels {:?}", TextListEncoder::channels(n)));
        }
        let store = ParamStore::new(0, DType::F32);
        let enc = TextListEncoder::new(n, store.var_builder()).unwrap();
        let out = enc.forward(&Tensor::zeros((1, n, l, d), DType::F32, &Device::Cpu).unwrap()).unwrap();
        if out.dims() != [1, l, d] {
            return Err(format!("N={n}: text list encodes to {:?}", out.dims()));
        }
        notes.push(format!("text N={n} {want:?}->{:?}", out.dims()));
    }
    Ok(notes.join("; "))
}

// 6 -------------------------------------------------------------------------

fn zero_init_contract() -> Outcome {
    let cfg = DenoiserConfig::default();
    let model = DenoiserModel::new(cfg.clone(), 0, DType::F32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s = cfg.image_size;
    let x = randn(&[2, 3, s, s], DType::F32, &mut rng);
    let prompts = vec!["a circle in a tabletop".to_string(), "a tabletop".to_string()];
    let categories = vec!["circle".to_string()];
    let mut pseudo = PseudoLabel::empty((s, s));
    pseudo.annotations.push(Annotation::new(0, BBox::new(10.0, 12.0, 20.0, 18.0).unwrap()));
    let list = build_text_list(&pseudo, &categories, cfg.list_len).unwrap();
    let cond = ModelCond {
        prompts: prompts.clone(),
        control: Some(ControlInput {
            canvases: randn(&[2, 3 * cfg.list_len, s, s], DType::F32, &mut rng).abs().unwrap(),
            text_lists: vec![list; 2],
        }),
    };
    let a = model.forward(&x, &[10, 700], &cond).unwrap();
    let b = model.forward(&x, &[10, 700], &ModelCond::prompts_only(prompts)).unwrap();
    let diff = scalar(&(a - b).unwrap().abs().unwrap().max_all().unwrap());
    check(diff <= 1e-6, format!("max |conditional - unconditional| = {diff:.2e}"))
}

// 7 -------------------------------------------------------------------------

fn forward_process_statistics() -> Outcome {
    let t_total = 1000;
    let schedule = make_noise_schedule(t_total, ScheduleKind::Linear).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 200_000;
    let x0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let var0 = {
        let m = x0.iter().sum::<f64>() / n as f64;
        x0.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64
    };
    let x0 = Tensor::from_vec(x0, (n, 1), &Device::Cpu).unwrap();
    let mut notes = Vec::new();
    let mut ok = true;
    for t in [0, t_total / 2, t_total - 1] {
        let eps = randn(&[n, 1], DType::F64, &mut rng);
        let xt: Vec<f64> = forward_noise(&x0, &vec![t; n], &eps, &schedule).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let m = xt.iter().sum::<f64>() / n as f64;
        let var = xt.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let m4 = xt.iter().map(|v| (v - m).powi(4)).sum::<f64>() / n as f64;
        let se = ((m4 - var * var) / n as f64).sqrt();
        let ab = schedule.alpha_bar[t];
        let want = ab * var0 + (1.0 - ab);
        let z = (var - want).abs() / se;
        ok &= z <= 3.0;
        notes.push(format!("t={t}: {var:.5} vs {want:.5} ({z:.2} SE)"));
    }
    check(ok, notes.join("; "))
}

// 8 -------------------------------------------------------------------------

fn end_to_end_toy() -> Outcome {
    let start = Instant::now();
    let mut overrides = Vec::new();
    if let Ok(dir) = std::env::var("ODGEN_ACCEPTANCE_WORK_DIR") {
        overrides.push(format!("work_dir={dir}"));
    }
    let cfg = PipelineConfig::load(&repo_root().join("configs/toy.toml"), &overrides).map_err(|e| e.to_string())?;
    let pipeline = Pipeline::new(cfg);
    let ran = pipeline.run_all().map_err(|e| e.to_string())?;
    let report = pipeline.final_report().map_err(|e| e.to_string())?;
    let disc = report.discriminator.clone().ok_or("no discriminator report")?;
    let single = report.single_object_rate.ok_or("no single-object rate")?;
    let baseline = report.baseline_single_object_rate.ok_or("no baseline rate")?;
    let positive = report.exported_positive_rate.ok_or("no boxes were exported")?;
    let a = disc.test_accuracy >= 0.95;
    let b = single >= 0.70 && single - baseline >= 0.2;
    let c = positive == 1.0;
    let stage_hours: f64 = report.stage_seconds.values().sum::<f64>() / 3600.0;
    check(
        a && b && c && report.accounting_holds(),
        format!(
            "(a) disc test acc {:.3} [{}]; (b) single-object rate {single:.3} vs baseline {baseline:.3} [{}]; (c) exported positives {positive:.3} [{}]; generated {} = {} intact + {} partial + {} dropped; pipeline {stage_hours:.2} h, this run {:.0}s ({} stages executed)",
            disc.test_accuracy,
            if a { "ok" } else { "fail" },
            if b { "ok" } else { "fail" },
            if c { "ok" } else { "fail" },
            report.generated,
            report.intact,
            report.partially_filtered,
            report.dropped,
            start.elapsed().as_secs_f64(),
            ran.iter().filter(|(_, o)| matches!(o, odgen::pipeline::StageOutcome::Ran { .. })).count(),
        ),
    )
}

// 9 -------------------------------------------------------------------------

fn gaussian_features(n: usize, mix: &DMatrix<f64>, shift: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let d = mix.nrows();
    (0..n)
        .map(|_| {
            let z: DVector<f64> = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
            (mix * z).iter().map(|v| v + shift).collect()
        })
        .collect()
}

/// `tr((A B)^½)` by Denman–Beavers iteration on the non-symmetric product.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let m = a * b;
    let mut y = m.clone();
    let mut z = DMatrix::identity(m.nrows(), m.ncols());
    for _ in 0..200 {
        let yi = y.clone().try_inverse().unwrap();
        let zi = z.clone().try_inverse().unwrap();
        let ny = (&y + zi) * 0.5;
        z = (&z + yi) * 0.5;
        let delta = (&ny - &y).norm();
        y = ny;
        if delta <= 1e-15 * y.norm() {
            break;
        }
    }
    y.trace()
}

fn fit(f: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = f.len();
    let d = f[0].len();
    let x = DMatrix::from_fn(n, d, |i, j| f[i][j]);
    let mu = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
    let c = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
    (mu, c.transpose() * c / (n - 1) as f64)
}

fn fid_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = 12;
    let mix_a = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
    let mix_b = DMatrix::from_fn(d, d, |_, _| 0.8 * Distribution::<f64>::sample(&StandardNormal, &mut rng));
    let a = gaussian_features(400, &mix_a, 0.0, &mut rng);
    let b = gaussian_features(500, &mix_b, 0.4, &mut rng);
    let same = fid_from_features(&a, &a).map_err(|e| e.to_string())?;
    let ours = fid_from_features(&a, &b).map_err(|e| e.to_string())?;
    let (ma, ca) = fit(&a);
    let (mb, cb) = fit(&b);
    let oracle = (&ma - &mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * trace_sqrt_product(&ca, &cb);
    // commuting covariances: tr((Σa Σb)^½) = Σ sqrt(a_i b_i)
    let da = DVector::from_fn(d, |i, _| 0.5 + i as f64);
    let db = DVector::from_fn(d, |i, _| 2.0 + 0.3 * i as f64);
    let mu = DVector::from_element(d, 0.25);
    let closed = mu.norm_squared() + da.sum() + db.sum() - 2.0 * da.iter().zip(db.iter()).map(|(x, y)| (x * y).sqrt()).sum::<f64>();
    let diag = frechet_distance(&mu, &DMatrix::from_diagonal(&da), &DVector::zeros(d), &DMatrix::from_diagonal(&db));
    let e1 = (ours - oracle).abs();
    let e2 = (diag - closed).abs();
    check(
        same.abs() <= 1e-6 && e1 <= 1e-8 && e2 <= 1e-8,
        format!("identical {same:.1e}; fitted Gaussians {ours:.6} vs oracle {oracle:.6} (|d| {e1:.1e}); diagonal |d| {e2:.1e}"),
    )
}

// 10 ------------------------------------------------------------------------

fn label_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(root.join("export/labels"))
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect()
}

fn determinism() -> Outcome {
    let smoke = repo_root().join("configs/smoke.toml");
    let mut runs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig::load(&smoke, &[format!("work_dir={}", dir.path().display()), "seed=21".into()])
            .map_err(|e| e.to_string())?;
        Pipeline::new(cfg).run_all().map_err(|e| e.to_string())?;
        runs.push((label_bytes(dir.path()), dir));
    }
    let files = runs[0].0.len();
    let boxes: usize = runs[0].0.values().map(|b| b.iter().filter(|&&c| c == b'\n').count()).sum();
    check(
        runs[0].0 == runs[1].0 && files > 0,
        format!("{files} label files ({boxes} boxes) byte-identical across two runs with seed 21"),
    )
}

// 11 ------------------------------------------------------------------------

fn io_roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let names: Vec<String> = (0..4).map(|i| format!("class{i}")).collect();
    let mut ds = DetectionDataset::new(names, "street", Split::Val).unwrap();
    for i in 0..50 {
        let (w, h) = (rng.random_range(8..96u32), rng.random_range(8..96u32));
        let mut annotations = Vec::new();
        for _ in 0..rng.random_range(0..6) {
            let bw = rng.random_range(1.0..w as f64);
            let bh = rng.random_range(1.0..h as f64);
            let x = rng.random_range(0.0..=w as f64 - bw);
            let y = rng.random_range(0.0..=h as f64 - bh);
            annotations.push(Annotation::new(rng.random_range(0..4), BBox::new(x, y, bw, bh).unwrap()));
        }
        ds.items.push(LabeledImage {
            name: format!("img_{i:03}"),
            pixels: image::RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 3) as u8, (y * 5) as u8, 7])),
            annotations,
        });
    }
    let dir = tempfile::tempdir().unwrap();
    export_yolo_dataset(&ds, dir.path()).map_err(|e| e.to_string())?;
    let back = parse_yolo_dataset(dir.path()).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    let mut count = 0;
    if back.items.len() != ds.items.len() || back.categories != ds.categories || back.scene_name != ds.scene_name {
        return Err("dataset header or image count changed".into());
    }
    for (a, b) in ds.items.iter().zip(&back.items) {
        if a.name != b.name || a.pixels != b.pixels || a.annotations.len() != b.annotations.len() {
            return Err(format!("{} changed", a.name));
        }
        let (w, h) = (a.pixels.width() as f64, a.pixels.height() as f64);
        for (x, y) in a.annotations.iter().zip(&b.annotations) {
            if x.category_id != y.category_id {
                return Err(format!("{}: class changed", a.name));
            }
            for (p, q, s) in [
                (x.bbox.x, y.bbox.x, w),
                (x.bbox.y, y.bbox.y, h),
                (x.bbox.w, y.bbox.w, w),
                (x.bbox.h, y.bbox.h, h),
            ] {
                worst = worst.max((p - q).abs() / s);
            }
            count += 1;
        }
    }
    check(worst <= 1e-6, format!("50 images, {count} boxes; max normalized error {worst:.1e}"))
}

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("box-to-mask oracle", box_mask_oracle),
        ("loss identities", loss_identities),
        ("gradient checks", gradient_checks),
        ("statistics round-trip", statistics_roundtrip),
        ("conditioning shapes", conditioning_shapes),
        ("zero-init contract", zero_init_contract),
        ("forward-process statistics", forward_process_statistics),
        ("end-to-end toy run", end_to_end_toy),
        ("FID implementation", fid_checks),
        ("determinism", determinism),
        ("I/O round-trip", io_roundtrip),
    ];
    let only: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
