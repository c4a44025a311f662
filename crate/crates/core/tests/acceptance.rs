//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed. Long: it trains about fifteen models.
//!
//! `ACCEPTANCE_ONLY=1,3,5` restricts the run to the listed criteria.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use facedepth::ablate::{ablate, AblationTable, Variant};
use facedepth::backbone::{BackboneConfig, BlockSpec};
use facedepth::checkpoint::Checkpoint;
use facedepth::config::TrainConfig;
use facedepth::dataset_io::{read_dataset, write_dataset};
use facedepth::depth_gt::{compose_gt_depth, patch_average, patch_targets, DepthMap, FakeMask, GroundTruthDepth, PatchGrid, Plane};
use facedepth::fdmt::FdmtConfig;
use facedepth::losses::{depth_terms, total_graph};
use facedepth::mda::{depth_attention_head, fuse, row_stochastic_violations, AttentionScale, DepthAttention, MdaConfig};
use facedepth::metrics::auc;
use facedepth::model::{Detector, Fusion, MdaSettings, ModelConfig};
use facedepth::raster::batch_tensor;
use facedepth::synth::{generate_dataset, Dataset, DatasetConfig, DegradeLevel, GeneratorConfig};
use facedepth::train::{evaluate, train, TrainOutcome};
use facedepth::viz::{depth_contrast, inspect};
use facedepth_autograd::gradcheck::check_params;
use facedepth_autograd::params::normal_tensor;
use facedepth_autograd::tensor::tensor;
use facedepth_autograd::{ParamStore, Session};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{pairwise_auc, random_scored_case};

const DATA_SEED: u64 = 1;
const DATA_COUNT: usize = 2000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Artifacts shared between criteria, built on first use.
#[derive(Default)]
struct Shared {
    dataset: Option<Dataset>,
    degraded: Option<Dataset>,
    full_run: Option<TrainOutcome>,
}

impl Shared {
    fn dataset(&mut self) -> &Dataset {
        self.dataset.get_or_insert_with(|| {
            generate_dataset(&DatasetConfig {
                count: DATA_COUNT,
                seed: DATA_SEED,
                generator: GeneratorConfig::default(),
                ..DatasetConfig::default()
            })
            .expect("dataset generation")
        })
    }

    /// Same faces, heavily compressed. The ablations run here: on clean
    /// data every variant saturates and the seed spread swamps the gaps.
    fn degraded(&mut self) -> &Dataset {
        self.degraded.get_or_insert_with(|| {
            generate_dataset(&DatasetConfig {
                count: DATA_COUNT,
                seed: DATA_SEED,
                generator: GeneratorConfig {
                    quality: Some(DegradeLevel::Low),
                    ..GeneratorConfig::default()
                },
                ..DatasetConfig::default()
            })
            .expect("dataset generation")
        })
    }

    fn full_run(&mut self) -> &TrainOutcome {
        if self.full_run.is_none() {
            let ds = self.dataset().clone();
            self.full_run = Some(train(&TrainConfig::default(), &ds, None).expect("full model trains"));
        }
        self.full_run.as_ref().unwrap()
    }
}

fn random_plane(rng: &mut impl Rng, h: usize, w: usize) -> Plane<u8> {
    Plane::from_vec(h, w, (0..h * w).map(|_| rng.random::<u8>()).collect()).unwrap()
}

fn random_mask(rng: &mut impl Rng, h: usize, w: usize) -> FakeMask {
    let density = rng.random::<f64>();
    let bits = (0..h * w).map(|_| u8::from(rng.random_bool(density))).collect();
    FakeMask::from_binary(Plane::from_vec(h, w, bits).unwrap()).unwrap()
}

fn c1_compose_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..=48), rng.random_range(1..=48));
        let depth = DepthMap(random_plane(&mut rng, h, w));
        let mask = random_mask(&mut rng, h, w);
        let lambda = rng.random_range(1..=255u32);
        let fast = compose_gt_depth(&depth, &mask, lambda).unwrap();
        let mut slow = Plane::filled(h, w, 0u8);
        for y in 0..h {
            for x in 0..w {
                let v = if mask.is_fake(y, x) {
                    0
                } else {
                    (depth.0.get(y, x) as u32 + lambda).min(255) as u8
                };
                slow.set(y, x, v);
            }
        }
        if fast != GroundTruthDepth(slow) {
            mismatches += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        mismatches == 0 && t < Duration::from_secs(10),
        format!("1000 triples, {mismatches} mismatches, {:.2} s (limit 10 s)", t.as_secs_f64()),
    )
}

fn c2_patch_average_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let per_side = rng.random_range(1..=14);
        let (ph, pw) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let (h, w) = (per_side * ph, per_side * pw);
        let gt = GroundTruthDepth(random_plane(&mut rng, h, w));
        let grid = PatchGrid::new(h, w, per_side).unwrap();
        let fast = patch_average(&gt, &grid).unwrap();
        for py in 0..per_side {
            for px in 0..per_side {
                let mut sum = 0.0;
                for y in py * ph..(py + 1) * ph {
                    for x in px * pw..(px + 1) * pw {
                        sum += gt.0.get(y, x) as f64;
                    }
                }
                let slow = sum / (ph * pw) as f64;
                worst = worst.max((fast.0[py * per_side + px] - slow).abs());
            }
        }
    }
    let t = start.elapsed();
    outcome(
        worst < 1e-9 && t < Duration::from_secs(5),
        format!("100 maps, max abs diff {worst:.3e}, {:.2} s (limit 5 s)", t.as_secs_f64()),
    )
}

fn widened(mut store: ParamStore, rng: &mut impl Rng, std: f64) -> ParamStore {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.name(id).contains("norm") {
            let shape = store.get(id).shape().to_vec();
            store.set(id, normal_tensor(rng, &shape, std)).unwrap();
        }
    }
    store
}

fn c3_attention() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    // row sums over random modules and inputs
    let mut violations = 0;
    let mut rows = 0;
    for _ in 0..200 {
        let cfg = MdaConfig {
            heads: rng.random_range(1..=4),
            head_dim: rng.random_range(1..=6),
            rgb_channels: rng.random_range(1..=8),
            depth_channels: rng.random_range(1..=8),
            mlp_ratio: 2,
            scale: AttentionScale::HeadWidth,
        };
        let mut store = ParamStore::new();
        let m = DepthAttention::new(&mut store, "m", &cfg, &mut rng).unwrap();
        let store = widened(store, &mut rng, 2.0);
        let n = rng.random_range(1..=20);
        let mut s = Session::inference(&store);
        let f_d = s.input(normal_tensor(&mut rng, &[2, n, cfg.depth_channels], 3.0));
        let f_rgb = s.input(normal_tensor(&mut rng, &[2, n, cfg.rgb_channels], 3.0));
        let out = m.forward(&mut s, f_d, f_rgb).unwrap();
        violations += row_stochastic_violations(s.value(out.attention), 1e-6);
        rows += 2 * cfg.heads * n;
    }
    let (det, params) = Detector::new(&ModelConfig::mini(), 0).unwrap();
    let imgs = &generate_dataset(&DatasetConfig {
        count: 8,
        ..DatasetConfig::default()
    })
    .unwrap()
    .train;
    let mut s = Session::inference(&params);
    let x = s.input(batch_tensor(imgs.iter().map(|r| &r.image)).unwrap());
    let (_, fdmt_attn) = det.fdmt.as_ref().unwrap().encode(&mut s, x).unwrap();
    for a in fdmt_attn {
        violations += row_stochastic_violations(s.value(a), 1e-6);
    }
    let fwd = det.forward(&mut s, x).unwrap();
    violations += row_stochastic_violations(s.value(fwd.classified.attention.unwrap()), 1e-6);

    // N = 2 hand case
    let empty = ParamStore::new();
    let mut s = Session::inference(&empty);
    let f_d = s.input(tensor(&[1, 2, 1], vec![1.0, 0.0]));
    let f_rgb = s.input(tensor(&[1, 2, 2], vec![1.0, 2.0, 0.0, 4.0]));
    let wd = s.input(tensor(&[1, 1], vec![1.0]));
    let wr = s.input(tensor(&[2, 1], vec![1.0, 0.0]));
    let wv = s.input(tensor(&[2, 1], vec![0.0, 1.0]));
    let (head, _) = depth_attention_head(&mut s, f_d, f_rgb, wd, wr, wv, 1.0).unwrap();
    let hand = s.value(head)[[0, 0, 0]];
    let hand_ok = (hand - 2.5378).abs() < 1e-4;

    // one head with identity output projection against the single-head path
    let c = 6;
    let cfg = MdaConfig {
        heads: 1,
        head_dim: c,
        rgb_channels: c,
        depth_channels: 5,
        mlp_ratio: 2,
        scale: AttentionScale::HeadWidth,
    };
    let mut store = ParamStore::new();
    let m = DepthAttention::new(&mut store, "m", &cfg, &mut rng).unwrap();
    let mut store = widened(store, &mut rng, 0.5);
    store.set(m.w_out, Array2::<f64>::eye(c).into_dyn()).unwrap();
    let mut s = Session::inference(&store);
    let f_d = s.input(normal_tensor(&mut rng, &[3, 9, 5], 1.0));
    let f_rgb = s.input(normal_tensor(&mut rng, &[3, 9, c], 1.0));
    let multi = m.forward(&mut s, f_d, f_rgb).unwrap();
    let (wd, wr, wv) = (s.param(m.w_depth), s.param(m.w_rgb), s.param(m.w_value));
    let (h, _) = depth_attention_head(&mut s, f_d, f_rgb, wd, wr, wv, c as f64).unwrap();
    let single = fuse(&mut s, f_rgb, h, &m.mlp).unwrap();
    let degeneracy = (s.value(multi.enhanced) - s.value(single))
        .iter()
        .fold(0.0f64, |a, d| a.max(d.abs()));

    outcome(
        violations == 0 && hand_ok && degeneracy < 1e-6,
        format!(
            "row-sum violations {violations} over {rows}+ rows; hand case {hand:.6} (want 2.5378 +- 1e-4); \
             l=1 degeneracy {degeneracy:.2e} (limit 1e-6)"
        ),
    )
}

fn reduced_model() -> ModelConfig {
    let b = |channels, stride| BlockSpec { channels, stride };
    ModelConfig {
        fdmt: FdmtConfig {
            image_size: 8,
            patches_per_side: 2,
            embed_dim: 8,
            blocks: 2,
            heads: 2,
            mlp_ratio: 2,
            position_embedding: true,
        },
        backbone: BackboneConfig {
            image_size: 8,
            blocks: vec![b(4, 2), b(4, 2), b(4, 1)],
            injection_index: 2,
            head_width: 4,
            num_classes: 2,
        },
        mda: MdaSettings {
            heads: 2,
            head_dim: 3,
            mlp_ratio: 2,
            scale: AttentionScale::HeadWidth,
        },
        use_fdmt: true,
        fusion: Fusion::Mda,
    }
}

fn c4_gradients() -> Outcome {
    let start = Instant::now();
    let cfg = reduced_model();
    let (det, store) = Detector::new(&cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let store = widened(store, &mut rng, 0.4);
    let p = cfg.fdmt.patches_per_side.pow(2);
    let n = cfg.backbone.injection_shape().0.pow(2);
    let images = normal_tensor(&mut rng, &[2, 8, 8, 3], 0.5).mapv(|v| v + 0.5);
    let targets = normal_tensor(&mut rng, &[2, p], 0.2).mapv(|v| (v + 0.5).clamp(0.0, 1.0));
    let train_cfg = TrainConfig::default();
    let loss = |s: &mut Session| {
        let x = s.input(images.clone());
        let fwd = det.forward(s, x).unwrap();
        let cls = s.cross_entropy(fwd.logits(), &[0, 1]);
        let t = s.input(targets.clone());
        let d = depth_terms(s, fwd.depth.unwrap().depth, t, train_cfg.ssim_constants()).unwrap();
        total_graph(s, cls, Some(&d), train_cfg.loss_weights())
    };
    let mut s = Session::train(&store);
    let l = loss(&mut s);
    let grads = s.param_grads(l);
    let report = check_params(&store, &grads, store.ids(), 1e-5, |ps| {
        let mut s = Session::inference(ps);
        let l = loss(&mut s);
        s.scalar(l)
    });
    let covered = ["fdmt.", "fusion.", "backbone."]
        .iter()
        .all(|pre| report.params.iter().any(|p| p.name.starts_with(pre) && p.analytic_norm > 0.0));
    let worst = report.worst().unwrap();
    let t = start.elapsed();
    outcome(
        report.max_relative_error() < 1e-4 && covered && t < Duration::from_secs(120),
        format!(
            "P={p} E={} T={} N={n} l={}; {} tensors, worst {} rel err {:.2e} (limit 1e-4), {:.1} s",
            cfg.fdmt.embed_dim,
            cfg.fdmt.blocks,
            cfg.mda.heads,
            report.params.len(),
            worst.name,
            worst.relative_error,
            t.as_secs_f64()
        ),
    )
}

fn c5_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (s, l) = random_scored_case(&mut rng);
        worst = worst.max((auc(&s, &l).unwrap() - pairwise_auc(&s, &l)).abs());
    }
    let mut monotone_fail = 0;
    for _ in 0..50 {
        let (s, l) = random_scored_case(&mut rng);
        let k = rng.random_range(0.5..4.0);
        let b = rng.random_range(-2.0..2.0);
        let t: Vec<f64> = s.iter().map(|&x| (k * x + b).exp() + x.powi(3)).collect();
        if auc(&t, &l).unwrap() != auc(&s, &l).unwrap() {
            monotone_fail += 1;
        }
    }
    outcome(
        worst < 1e-9 && monotone_fail == 0,
        format!("pairwise max diff {worst:.2e} over 100 cases; monotone invariance failures {monotone_fail}/50"),
    )
}

fn c6_learnability(shared: &mut Shared) -> Outcome {
    let start = Instant::now();
    let run = shared.full_run();
    let (best, best_epoch) = (run.best.clone(), run.log.best_epoch);
    let train_time = start.elapsed();
    let ds = shared.dataset();
    let tr = evaluate(&best, &ds.train, "train").unwrap();
    let te = evaluate(&best, &ds.test, "test").unwrap();
    outcome(
        tr.acc >= 0.95 && te.acc >= 0.90 && train_time < Duration::from_secs(15 * 60),
        format!(
            "train ACC {:.4} (>= 0.95), test ACC {:.4} (>= 0.90), test AUC {:.4}, best epoch {:?}, {:.0} s on {} thread(s)",
            tr.acc,
            te.acc,
            te.auc,
            best_epoch,
            train_time.as_secs_f64(),
            rayon::current_num_threads()
        ),
    )
}

fn print_table(t: &AblationTable) {
    for line in t.to_markdown().lines() {
        println!("    {line}");
    }
}

fn c7_ablation(shared: &mut Shared) -> Outcome {
    let ds = shared.degraded().clone();
    let table = ablate(
        &TrainConfig::default(),
        &ds,
        &[Variant::Baseline, Variant::ConcatDepth, Variant::Mda],
        3,
    )
    .unwrap();
    print_table(&table);
    let base = table.row(Variant::Baseline).unwrap();
    let concat = table.row(Variant::ConcatDepth).unwrap();
    let mda = table.row(Variant::Mda).unwrap();
    let ordered = mda.acc_mean >= concat.acc_mean && concat.acc_mean >= base.acc_mean;
    let margin = mda.acc_mean - base.acc_mean;
    outcome(
        ordered && margin >= base.acc_std,
        format!(
            "mean ACC mda {:.4} >= concat {:.4} >= baseline {:.4}: {ordered}; mda - baseline {margin:.4} vs baseline std {:.4}",
            mda.acc_mean, concat.acc_mean, base.acc_mean, base.acc_std
        ),
    )
}

fn c8_injection(shared: &mut Shared) -> Outcome {
    let ds = shared.degraded().clone();
    match ablate(&TrainConfig::default(), &ds, &Variant::INJECTION, 1) {
        Ok(table) => {
            print_table(&table);
            let finite = table.rows.iter().all(|r| r.acc_mean.is_finite() && r.auc_mean.is_finite());
            let idx: Vec<usize> = table.rows.iter().map(|r| r.injection_index).collect();
            outcome(
                table.rows.len() == 3 && finite,
                format!("{} rows, injection indices {idx:?}, all runs finished without non-finite values", table.rows.len()),
            )
        }
        Err(e) => outcome(false, format!("ablation failed: {e}")),
    }
}

fn c9_determinism() -> Outcome {
    let ds = generate_dataset(&DatasetConfig {
        count: 200,
        seed: 9,
        ..DatasetConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        seed: 9,
        ..TrainConfig::default()
    };
    let a = train(&cfg, &ds, None).unwrap();
    let b = train(&cfg, &ds, None).unwrap();
    let same_log = a.log.trajectory_eq(&b.log);
    let same_weights = a.last.to_bytes() == b.last.to_bytes();
    outcome(
        same_log && same_weights,
        format!(
            "{} steps, {} epochs; logs identical {same_log}, weights identical {same_weights}",
            a.log.steps.len(),
            a.log.epochs.len()
        ),
    )
}

fn c10_round_trips(shared: &mut Shared) -> Outcome {
    let ds = shared.dataset().clone();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&dir.path().join("data"), &ds).unwrap();
    let (_, back) = read_dataset(&dir.path().join("data")).unwrap();
    let data_ok = back == ds;
    let ckpt = shared.full_run().best.clone();
    let path = dir.path().join("best.ckpt");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let a = evaluate(&ckpt, &ds.test, "test").unwrap();
    let b = evaluate(&loaded, &ds.test, "test").unwrap();
    let bytes_ok = loaded.to_bytes() == ckpt.to_bytes();
    outcome(
        data_ok && a == b && bytes_ok,
        format!(
            "dataset ({} records) bit-exact {data_ok}; checkpoint bytes identical {bytes_ok}; MetricsReport identical {}",
            ds.len(),
            a == b
        ),
    )
}

/// Supplementary checks printed as notes: predicted depth is lower inside
/// the fake region, and the fitted model scores at least as well on train.
/// Predicted depth should be lower on manipulated pixels than elsewhere.
/// The same count on the ground-truth patch targets is printed alongside:
/// on a coarse grid the mask shares its patches with bright face pixels
/// while the background outside the face is zero, which caps the count.
fn notes(shared: &mut Shared) {
    let ckpt = shared.full_run().best.clone();
    let ds = shared.dataset();
    let fakes: Vec<_> = ds.test.iter().filter(|r| r.label.is_fake()).take(100).cloned().collect();
    let (det, params) = ckpt.instantiate().unwrap();
    let ins = inspect(&det, &params, &fakes).unwrap();
    let grid = det.fdmt.as_ref().unwrap().grid;
    let lower = |depth: &[f64], mask: &FakeMask| {
        let (inside, outside) = depth_contrast(depth, mask, &grid);
        inside.is_some_and(|v| v < outside)
    };
    let predicted = fakes.iter().zip(&ins).filter(|(r, i)| lower(i.depth.as_ref().unwrap(), &r.mask)).count();
    let ceiling = fakes
        .iter()
        .filter(|r| lower(&patch_targets(&r.oracle_depth, &r.mask, ckpt.train.lambda, &grid).unwrap().0, &r.mask))
        .count();
    let frac = predicted as f64 / fakes.len() as f64;
    println!(
        "note: depth inside mask < outside for {predicted}/{n} fake test samples ({:.0}%, want >= 80%): {}; \
         ground-truth targets on the same {}x{} grid: {ceiling}/{n}",
        frac * 100.0,
        if frac >= 0.8 { "ok" } else { "LOW" },
        grid.per_side(),
        grid.per_side(),
        n = fakes.len(),
    );
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |k: usize| only.as_ref().is_none_or(|o| o.contains(&k));
    let mut shared = Shared::default();
    let criteria: Vec<(usize, &str, Box<dyn Fn(&mut Shared) -> Outcome>)> = vec![
        (1, "ground-truth composition oracle", Box::new(|_| c1_compose_oracle())),
        (2, "patch averaging oracle", Box::new(|_| c2_patch_average_oracle())),
        (3, "attention correctness", Box::new(|_| c3_attention())),
        (4, "gradient checks", Box::new(|_| c4_gradients())),
        (5, "metrics oracle", Box::new(|_| c5_metrics())),
        (6, "learnability", Box::new(c6_learnability)),
        (7, "directional ablation", Box::new(c7_ablation)),
        (8, "injection sweep", Box::new(c8_injection)),
        (9, "determinism", Box::new(|_| c9_determinism())),
        (10, "round trips", Box::new(c10_round_trips)),
    ];
    let mut failed = Vec::new();
    for (k, name, run) in &criteria {
        if !wanted(*k) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| run(&mut shared)))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                outcome(false, format!("panicked: {msg}"))
            });
        println!(
            "criterion {k:>2} {}: {name}: {} [{:.1} s]",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            start.elapsed().as_secs_f64()
        );
        if !result.pass {
            failed.push(*k);
        }
    }
    if wanted(6) {
        if let Err(e) = catch_unwind(AssertUnwindSafe(|| notes(&mut shared))) {
            println!("note: supplementary checks panicked: {e:?}");
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
