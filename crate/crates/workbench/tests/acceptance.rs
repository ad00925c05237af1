//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so it can install a counting allocator
//! and report measured values. Exits nonzero if any criterion fails.

mod common;

use std::alloc::{GlobalAlloc, Layout, System};
use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use fissura::backend::{load_backend, BackendDescriptor, BackendId, FeatureBackend, FeatureMatrix};
use fissura::detector::{
    detect, detect_streaming, mask_to_bboxes, multi_stage, BBox, ClassMask, DetectionConfig,
    DetectionResult, FnRows,
};
use fissura::evaluator::{metrics, ConfusionMatrix};
use fissura::imaging::{generate_windows, ImageBuffer};
use fissura::store::{read_store, write_store};
use fissura::synthetic::{Scene, Texture};
use fissura::trainer::{
    fit, fit_rows, grid_search_matrix, load_model, predict_proba, save_model, Acquisition,
    LogRegModel, Objective, Rows, TrainConfig,
};
use fissura::Error;
use fissura_workbench::service::{router, ServiceConfig};
use fissura_workbench::ProjectLayout;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

// ---------------------------------------------------------------- allocator

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

fn grow(n: usize) {
    let now = CURRENT.fetch_add(n, Ordering::Relaxed) + n;
    PEAK.fetch_max(now, Ordering::Relaxed);
}

fn shrink(n: usize) {
    CURRENT.fetch_sub(n, Ordering::Relaxed);
}

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc_zeroed(layout) };
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        shrink(layout.size());
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            if new_size > layout.size() {
                grow(new_size - layout.size());
            } else {
                shrink(layout.size() - new_size);
            }
        }
        p
    }
}

#[global_allocator]
static ALLOCATOR: Counting = Counting;

/// Runs `f` and returns its value, the peak bytes allocated above the starting
/// level, and the bytes still held above it when `f` returns.
fn measure<T>(f: impl FnOnce() -> T) -> (T, usize, usize) {
    let base = CURRENT.load(Ordering::SeqCst);
    PEAK.store(base, Ordering::SeqCst);
    let value = f();
    let peak = PEAK.load(Ordering::SeqCst) - base;
    let held = CURRENT.load(Ordering::SeqCst).saturating_sub(base);
    (value, peak, held)
}

const MIB: f64 = 1024.0 * 1024.0;

// ---------------------------------------------------------------- helpers

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("class{i}")).collect()
}

fn acq(dim: usize) -> Acquisition {
    Acquisition {
        backend: BackendId {
            name: "test".into(),
            output_dim: dim,
        },
        tile_size: 224,
        scale_factor: 1.0,
    }
}

fn reference(tile: u32) -> Box<dyn FeatureBackend> {
    load_backend(&BackendDescriptor {
        input_size: tile,
        ..BackendDescriptor::reference()
    })
    .unwrap()
}

/// Small random head over the reference features.
fn random_model(k: usize, tile: u32, scale: f64, seed: u64) -> LogRegModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = BackendDescriptor::reference();
    LogRegModel {
        weights: (0..d.output_dim * k)
            .map(|_| rng.random_range(-0.02..0.02))
            .collect(),
        biases: (0..k).map(|_| rng.random_range(-1.0..1.0)).collect(),
        label_names: (0..k).map(|i| format!("L{i}")).collect(),
        c: 1.0,
        acquisition: Acquisition {
            backend: d.id(),
            tile_size: tile,
            scale_factor: scale,
        },
    }
}

/// Gaussian blobs around per-class centers.
fn blobs(n: usize, d: usize, k: usize, spread: f64, seed: u64) -> (FeatureMatrix, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| rng.random_range(-spread..spread)).collect())
        .collect();
    let mut values = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = (i % k) as u32;
        labels.push(c);
        for j in 0..d {
            let (u1, u2): (f64, f64) = (rng.random_range(1e-12..1.0), rng.random());
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            values.push((centers[c as usize][j] + z) as f32);
        }
    }
    (FeatureMatrix::new(d, values).unwrap(), labels)
}

fn mask_bits(m: &ClassMask) -> Vec<bool> {
    (0..m.height())
        .flat_map(|y| (0..m.width()).map(move |x| (x, y)))
        .map(|(x, y)| m.get(x, y))
        .collect()
}

// ---------------------------------------------------------------- criteria

fn metric_reproduction() -> Check {
    let labels = vec!["Background".to_string(), "Crack".to_string()];
    let mut out = Vec::new();
    for (name, rows, want) in [
        ("first field matrix", [[1577u64, 125], [122, 1630]], 0.93),
        ("second field matrix", [[1599, 117], [103, 1630]], 0.94),
    ] {
        let cm = ConfusionMatrix::from_counts(labels.clone(), &rows.map(|r| r.to_vec())).unwrap();
        let m = metrics(&cm, 1).unwrap();
        // Exact integer ratios from the cells.
        let total: u64 = rows.iter().flatten().sum();
        ensure(
            (m.accuracy.numerator, m.accuracy.denominator) == (rows[0][0] + rows[1][1], total),
            || {
                format!(
                    "{name}: accuracy ratio {}/{}",
                    m.accuracy.numerator, m.accuracy.denominator
                )
            },
        )?;
        ensure(
            (m.recall.numerator, m.recall.denominator) == (rows[1][1], rows[1][0] + rows[1][1]),
            || {
                format!(
                    "{name}: recall ratio {}/{}",
                    m.recall.numerator, m.recall.denominator
                )
            },
        )?;
        let (acc, rec) = (m.accuracy.rounded(2), m.recall.rounded(2));
        ensure(acc == Some(want) && rec == Some(want), || {
            format!("{name}: accuracy {acc:?}, recall {rec:?}, want {want}")
        })?;
        out.push(format!(
            "{name} acc {}/{} rec {}/{} -> {want}/{want}",
            m.accuracy.numerator, m.accuracy.denominator, m.recall.numerator, m.recall.denominator
        ));
    }
    Ok(out.join("; "))
}

/// Every offset that is a multiple of the step, plus the flush end window.
fn brute_axis(extent: u32, window: u32, step: u32) -> Vec<u32> {
    let last = extent - window;
    (0..=last).filter(|&p| p % step == 0 || p == last).collect()
}

fn window_count() -> Check {
    let grid = generate_windows(4248, 2850, 112, 0.6).map_err(|e| e.to_string())?;
    let step = (0.6f64 * 112.0).floor() as u32;
    let cols = brute_axis(4248, 112, step);
    let rows = brute_axis(2850, 112, step);
    let brute: Vec<(u32, u32)> = rows
        .iter()
        .flat_map(|&y| cols.iter().map(move |&x| (x, y)))
        .collect();
    let got: Vec<(u32, u32)> = grid.positions().collect();
    ensure(got == brute, || {
        format!(
            "grid differs from enumeration ({} vs {})",
            got.len(),
            brute.len()
        )
    })?;
    ensure(got.len() == 2646, || format!("{} windows", got.len()))?;
    Ok(format!(
        "{} windows ({} x {}), > 2500",
        got.len(),
        cols.len(),
        rows.len()
    ))
}

fn tiling_coverage() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..200 {
        let w = rng.random_range(2..400u32);
        let h = rng.random_range(2..400u32);
        let window = rng.random_range(2..=w.min(h));
        let frac = rng.random_range(0.05..=1.0f64);
        let step = (frac * window as f64 + 1e-9).floor() as u32;
        if step == 0 {
            continue;
        }
        let grid = generate_windows(w, h, window, frac).map_err(|e| format!("case {case}: {e}"))?;
        let mut covered = vec![false; (w * h) as usize];
        for (x, y) in grid.positions() {
            ensure(x + window <= w && y + window <= h, || {
                format!("case {case}: window out of image")
            })?;
            for yy in y..y + window {
                covered[(yy * w + x) as usize..(yy * w + x + window) as usize].fill(true);
            }
        }
        ensure(covered.iter().all(|&c| c), || {
            format!("case {case}: {w}x{h} window {window} step {step} leaves pixels uncovered")
        })?;
        let law = |extent: u32| (extent - window).div_ceil(step) as usize + 1;
        ensure(grid.len() == law(w) * law(h), || {
            format!(
                "case {case}: {} windows, law says {}",
                grid.len(),
                law(w) * law(h)
            )
        })?;
    }
    Ok("200 configurations covered, count law holds".into())
}

fn trainer_oracles() -> Check {
    // Analytic gradient against central differences.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst_rel: f64 = 0.0;
    for problem in 0..10 {
        let k = 2 + problem % 3;
        let d = 3 + problem % 4;
        let (x, y) = blobs(24, d, k, 2.0, problem as u64);
        let idx: Vec<usize> = (0..24).collect();
        let c = [0.1, 1.0, 100.0][problem % 3];
        let obj = Objective::new(
            Rows {
                features: &x,
                labels: &y,
                indices: &idx,
            },
            k,
            c,
        );
        let theta: Vec<f64> = (0..obj.num_params())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let (_, grad) = obj.value_and_gradient(&theta);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..theta.len() {
            let (mut up, mut down) = (theta.clone(), theta.clone());
            up[i] += h;
            down[i] -= h;
            worst = worst.max(((obj.value(&up) - obj.value(&down)) / (2.0 * h) - grad[i]).abs());
        }
        let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs())).max(1e-8);
        worst_rel = worst_rel.max(worst / scale);
    }
    ensure(worst_rel <= 1e-6, || {
        format!("gradient relative error {worst_rel:.2e}")
    })?;

    // Objective decreases at every iteration.
    for seed in 0..5 {
        let (x, y) = blobs(60, 4, 3, 1.5, seed);
        let idx: Vec<usize> = (0..60).collect();
        let rows = Rows {
            features: &x,
            labels: &y,
            indices: &idx,
        };
        let (_, trace) = fit_rows(rows, &names(3), 10.0, &TrainConfig::default(), &acq(4)).unwrap();
        ensure(trace.objective.windows(2).all(|w| w[1] < w[0]), || {
            format!("seed {seed}: objective not monotone")
        })?;
    }

    // Mirror-symmetric data gives exactly one half at the mirror point.
    let x = FeatureMatrix::new(1, vec![-1.0, 1.0]).unwrap();
    for c in [0.1, 1.0, 10.0, 10000.0] {
        let m = fit(&x, &[0, 1], &names(2), c, &TrainConfig::default(), &acq(1)).unwrap();
        let p = predict_proba(&m, &FeatureMatrix::new(1, vec![0.0]).unwrap()).unwrap();
        let off = (p.row(0)[0] - 0.5).abs().max((p.row(0)[1] - 0.5).abs());
        ensure(off <= 1e-9, || format!("C={c}: p = {:?}", p.row(0)))?;
    }

    // Grid-search winner against per-C cross-validation redone from scratch.
    for (seed, grid) in [
        (1u64, vec![0.1, 10000.0]),
        (3, TrainConfig::default().c_grid),
    ] {
        let (x, y) = blobs(90, 3, 2, 0.6, seed);
        let cfg = TrainConfig {
            c_grid: grid,
            shuffle_seed: seed,
            ..TrainConfig::default()
        };
        let (_, report) = grid_search_matrix(&x, &y, &names(2), &cfg, &acq(3)).unwrap();
        let oracle = oracle_cv(&x, &y, 2, &cfg);
        let got: Vec<f64> = report.cv_scores.iter().map(|s| s.mean_accuracy).collect();
        ensure(got == oracle, || {
            format!("CV scores {got:?} vs oracle {oracle:?}")
        })?;
        let best = oracle.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let want = cfg.c_grid[oracle.iter().position(|&a| a == best).unwrap()];
        ensure(report.chosen_c == want, || {
            format!("chose C={} not {want}", report.chosen_c)
        })?;
    }
    Ok(format!(
        "gradient rel err {worst_rel:.1e}; monotone; p=0.5; CV refit agrees"
    ))
}

fn oracle_cv(x: &FeatureMatrix, y: &[u32], k: usize, cfg: &TrainConfig) -> Vec<f64> {
    let n = x.rows();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.shuffle_seed));
    let train = &order[..(n as f64 * cfg.split_ratio).floor() as usize];
    let mut fold_of = vec![0; n];
    let mut dealt = vec![0; k];
    for &i in train {
        fold_of[i] = dealt[y[i] as usize] % cfg.folds;
        dealt[y[i] as usize] += 1;
    }
    cfg.c_grid
        .iter()
        .map(|&c| {
            let mut sum = 0.0;
            for f in 0..cfg.folds {
                let fit_idx: Vec<usize> =
                    train.iter().copied().filter(|&i| fold_of[i] != f).collect();
                let test_idx: Vec<usize> =
                    train.iter().copied().filter(|&i| fold_of[i] == f).collect();
                let fit_y: Vec<u32> = fit_idx.iter().map(|&i| y[i]).collect();
                let model = fit(
                    &x.select(&fit_idx),
                    &fit_y,
                    &names(k),
                    c,
                    cfg,
                    &acq(x.dim()),
                )
                .unwrap();
                let p = predict_proba(&model, &x.select(&test_idx)).unwrap();
                let correct = test_idx
                    .iter()
                    .enumerate()
                    .filter(|&(j, &i)| {
                        let row = p.row(j);
                        (0..k).fold(0, |b, c| if row[c] > row[b] { c } else { b }) == y[i] as usize
                    })
                    .count();
                sum += correct as f64 / test_idx.len() as f64;
            }
            sum / cfg.folds as f64
        })
        .collect()
}

fn fissura_cli(project: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fissura"))
        .arg("--project")
        .arg(project)
        .args(args)
        .env_remove("FISSURA_PROJECT")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "fissura {}: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn end_to_end() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path().join("project");
    fissura_cli(&root, &["init", "--labels", "Background,Crack"])?;
    let layout = ProjectLayout::open(&root).map_err(|e| e.to_string())?;
    let rt = tokio::runtime::Runtime::new().unwrap();
    let app = router(layout.clone(), ServiceConfig::default());
    let (mut cracks, mut background) = (0, 0);
    for seed in 100..106 {
        let scene = Scene::generate(900, 700, 3, 8, 50.0, seed);
        let id = format!("scene_{seed}.png");
        scene.image.save_png(layout.images_dir().join(&id)).unwrap();
        let (c, b) = common::annotate_scene(&rt, &app, &id, &scene, seed);
        cracks += c;
        background += b;
        common::request(&rt, &app, "POST", &format!("/api/images/{id}/done"), None);
    }

    fissura_cli(
        &root,
        &[
            "extract-features",
            "--backend",
            "reference",
            "--batch-size",
            "128",
        ],
    )?;
    let report = fissura_cli(
        &root,
        &[
            "train",
            "--c-grid",
            "0.1,1,10,100,1000,10000",
            "--folds",
            "3",
            "--split",
            "0.75",
        ],
    )?;
    let holdout: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("holdout accuracy: "))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| format!("no holdout accuracy in report:\n{report}"))?;
    let chosen = report
        .lines()
        .find_map(|l| l.strip_prefix("chosen C: "))
        .unwrap_or("?")
        .to_string();

    let composite = Scene::generate(1800, 1400, 12, 8, 50.0, 11);
    let probe = dir.path().join("composite.png");
    composite.image.save_png(&probe).unwrap();
    let out = dir.path().join("out");
    fissura_cli(
        &root,
        &[
            "detect",
            "--in",
            probe.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--threshold",
            "0.95",
        ],
    )?;
    let mask = image::open(out.join("composite/Crack_mask.png"))
        .map_err(|e| e.to_string())?
        .to_luma8();
    for f in ["Crack_out.png", "Background_mask.png", "predictions.csv"] {
        ensure(out.join("composite").join(f).is_file(), || {
            format!("{f} missing")
        })?;
    }

    let window = common::WINDOW;
    let grid = generate_windows(1800, 1400, window, 0.6).unwrap();
    let half = window / 2;
    let (mut planted, mut found) = (0, 0);
    for (x, y) in grid.positions() {
        let (cx, cy) = (x + half, y + half);
        if composite.crack_distance(cx as f64, cy as f64) <= window as f64 / 4.0 {
            planted += 1;
            found += (mask.get_pixel(cx, cy).0[0] == 255) as usize;
        }
    }

    // Mask pixels with no crack pixel within one window side.
    let truth = composite.crack_mask();
    let (w, h) = (1800usize, 1400usize);
    let mut sums = vec![0u32; (w + 1) * (h + 1)];
    for y in 0..h {
        for x in 0..w {
            sums[(y + 1) * (w + 1) + x + 1] = truth.get(x as u32, y as u32) as u32
                + sums[y * (w + 1) + x + 1]
                + sums[(y + 1) * (w + 1) + x]
                - sums[y * (w + 1) + x];
        }
    }
    let r = window as usize - 1;
    let mut stray = 0usize;
    let mut mask_px = 0usize;
    for (x, y, p) in mask.enumerate_pixels() {
        if p.0[0] != 255 {
            continue;
        }
        mask_px += 1;
        let (x, y) = (x as usize, y as usize);
        let (x0, y0, x1, y1) = (
            x.saturating_sub(r),
            y.saturating_sub(r),
            (x + r + 1).min(w),
            (y + r + 1).min(h),
        );
        let n = sums[y1 * (w + 1) + x1] + sums[y0 * (w + 1) + x0]
            - sums[y0 * (w + 1) + x1]
            - sums[y1 * (w + 1) + x0];
        stray += (n == 0) as usize;
    }

    let recall = found as f64 / planted as f64;
    let detail = format!(
        "{cracks} crack + {background} background crops; C={chosen}; holdout {holdout:.4}; \
         recall {found}/{planted} = {recall:.3}; {mask_px} mask px, {stray} outside dilation"
    );
    ensure(holdout >= 0.95 && recall >= 0.90 && stray == 0, || {
        detail.clone()
    })?;
    Ok(detail)
}

fn round_trips() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let finite32 = |rng: &mut ChaCha8Rng| loop {
        let v = f32::from_bits(rng.random());
        if v.is_finite() {
            return v;
        }
    };
    let finite64 = |rng: &mut ChaCha8Rng| loop {
        let v = f64::from_bits(rng.random());
        if v.is_finite() {
            return v;
        }
    };
    let random_names = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let k = rng.random_range(2..=5);
        (0..k)
            .map(|i| format!("{i}-{}", "é_x".repeat(rng.random_range(0..4))))
            .collect()
    };
    for case in 0..100 {
        let path = dir.path().join(format!("s{case}.kfs"));
        let dim = rng.random_range(1..12);
        let labels = random_names(&mut rng);
        let n = rng.random_range(0..40);
        let rows: Vec<(Vec<f32>, u32)> = (0..n)
            .map(|_| {
                (
                    (0..dim).map(|_| finite32(&mut rng)).collect(),
                    rng.random_range(0..labels.len() as u32),
                )
            })
            .collect();
        let batches: Vec<_> = rows
            .chunks(3)
            .map(|c| {
                let v = c.iter().flat_map(|(f, _)| f.iter().copied()).collect();
                (
                    FeatureMatrix::new(dim, v).unwrap(),
                    c.iter().map(|r| r.1).collect::<Vec<_>>(),
                )
            })
            .collect();
        write_store(&path, dim, &labels, batches, rng.random_range(1..8))
            .map_err(|e| e.to_string())?;
        let store = read_store(&path).map_err(|e| format!("store {case}: {e}"))?;
        let all = store.read_all().unwrap();
        let exact = store.label_names() == labels.as_slice()
            && store.rows() == n
            && rows.iter().enumerate().all(|(i, (f, l))| {
                store.labels()[i] == *l
                    && all
                        .row(i)
                        .iter()
                        .zip(f)
                        .all(|(a, b)| a.to_bits() == b.to_bits())
            });
        ensure(exact, || format!("store {case} differs after round trip"))?;
        let bytes = std::fs::read(&path).unwrap();
        let cut = rng.random_range(0..bytes.len());
        std::fs::write(&path, &bytes[..cut]).unwrap();
        ensure(matches!(read_store(&path), Err(Error::Corrupt(_))), || {
            format!("store {case} cut at {cut} not reported corrupt")
        })?;

        let path = dir.path().join(format!("m{case}.klm"));
        let d = rng.random_range(1..16);
        let names = random_names(&mut rng);
        let k = names.len();
        let model = LogRegModel {
            weights: (0..d * k).map(|_| finite64(&mut rng)).collect(),
            biases: (0..k).map(|_| finite64(&mut rng)).collect(),
            label_names: names,
            c: rng.random_range(1e-3..1e5),
            acquisition: Acquisition {
                backend: BackendId {
                    name: format!("b{case}"),
                    output_dim: d,
                },
                tile_size: rng.random_range(8..1024),
                scale_factor: rng.random_range(0.1..4.0),
            },
        };
        save_model(&model, &path).map_err(|e| e.to_string())?;
        let back = load_model(&path).map_err(|e| format!("model {case}: {e}"))?;
        let bits = |m: &LogRegModel| {
            m.weights
                .iter()
                .chain(&m.biases)
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        ensure(back == model && bits(&back) == bits(&model), || {
            format!("model {case} differs")
        })?;
        let bytes = std::fs::read(&path).unwrap();
        let cut = rng.random_range(0..bytes.len());
        std::fs::write(&path, &bytes[..cut]).unwrap();
        ensure(matches!(load_model(&path), Err(Error::Corrupt(_))), || {
            format!("model {case} cut at {cut} not reported corrupt")
        })?;
    }
    let store = dir.path().join("magic.kfs");
    write_store(&store, 2, &["a".into(), "b".into()], Vec::new(), 4).unwrap();
    let mut bytes = std::fs::read(&store).unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    std::fs::write(&store, &bytes).unwrap();
    ensure(matches!(read_store(&store), Err(Error::Format(_))), || {
        "store bad magic".into()
    })?;
    let model = dir.path().join("magic.klm");
    std::fs::write(&model, b"XXXX\x01\x00\x00\x00").unwrap();
    ensure(matches!(load_model(&model), Err(Error::Format(_))), || {
        "model bad magic".into()
    })?;
    Ok("100 stores + 100 models bit-exact; truncation -> Corrupt; bad magic -> Format".into())
}

/// 8-connected components by breadth-first flood fill.
fn flood_fill_boxes(bits: &[bool], w: usize, h: usize) -> Vec<BBox> {
    let mut seen = vec![false; bits.len()];
    let mut boxes = Vec::new();
    for start in 0..bits.len() {
        if !bits[start] || seen[start] {
            continue;
        }
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut queue = std::collections::VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x), y1.max(y));
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64 {
                        let j = ny as usize * w + nx as usize;
                        if bits[j] && !seen[j] {
                            seen[j] = true;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        boxes.push(BBox {
            x: x0 as u32,
            y: y0 as u32,
            w: (x1 - x0 + 1) as u32,
            h: (y1 - y0 + 1) as u32,
        });
    }
    boxes.sort_by_key(|b| (b.y, b.x, b.w, b.h));
    boxes
}

/// Masks stamped from the window predictions with plain boolean grids.
fn rebuild(r: &DetectionResult) -> Vec<Vec<bool>> {
    let (w, h, k) = (r.width as usize, r.height as usize, r.classes.len());
    let mut masks = vec![vec![false; w * h]; k];
    for win in &r.windows {
        let p = &win.probabilities;
        let best = (1..k).fold(0, |b, c| if p[c] > p[b] { c } else { b });
        if p[best] >= r.threshold {
            for y in win.y as usize..(win.y + r.window) as usize {
                for x in win.x as usize..(win.x + r.window) as usize {
                    masks[best][y * w + x] = true;
                }
            }
        }
    }
    masks
}

fn mask_suite() -> Check {
    let backend = reference(224);
    for seed in 0..6 {
        let scene = Scene::generate(420, 330, 2, 5, 40.0, seed);
        let k = 2 + seed as usize % 2;
        let model = random_model(k, 224, 2.0, seed);
        let cfg = DetectionConfig {
            confidence_threshold: 0.6,
            ..Default::default()
        };
        let r = detect(&scene.image, &model, backend.as_ref(), &cfg).unwrap();
        for (class, want) in r.classes.iter().zip(rebuild(&r)) {
            ensure(mask_bits(&class.mask) == want, || {
                format!("seed {seed}: mask differs from windows")
            })?;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..100 {
        let (w, h) = (rng.random_range(1..140u32), rng.random_range(1..90u32));
        let mut m = ClassMask::new(w, h);
        for _ in 0..rng.random_range(0..12) {
            m.fill_rect(
                rng.random_range(0..w),
                rng.random_range(0..h),
                rng.random_range(1..30),
                rng.random_range(1..30),
            );
        }
        for _ in 0..rng.random_range(0..40) {
            m.set(rng.random_range(0..w), rng.random_range(0..h));
        }
        let want = flood_fill_boxes(&mask_bits(&m), w as usize, h as usize);
        ensure(mask_to_bboxes(&m) == want, || {
            format!("mask {case}: boxes differ from flood fill")
        })?;
    }

    for run in 0..20u64 {
        let scene = Scene::generate(360, 280, 2, 5, 40.0, 50 + run);
        let model = random_model(2 + run as usize % 2, 224, 2.0, 50 + run);
        let lo = rng.random_range(0.5..0.9);
        let hi = rng.random_range(lo..1.0);
        let at = |t: f64| {
            let cfg = DetectionConfig {
                confidence_threshold: t,
                ..Default::default()
            };
            detect(&scene.image, &model, backend.as_ref(), &cfg).unwrap()
        };
        let (a, b) = (at(lo), at(hi));
        for (ca, cb) in a.classes.iter().zip(&b.classes) {
            let grew = mask_bits(&cb.mask)
                .iter()
                .zip(mask_bits(&ca.mask))
                .any(|(&hi_px, lo_px)| hi_px && !lo_px);
            ensure(!grew, || {
                format!("run {run}: raising {lo:.3} -> {hi:.3} added pixels")
            })?;
        }
    }
    Ok("6 runs rebuilt bit-exact; 100 masks match flood fill; 20 runs monotone".into())
}

/// Delegates to `inner` and records the allocator peak after every batch,
/// i.e. the high-water mark of the tile phase before any mask exists.
struct Probe {
    inner: Box<dyn FeatureBackend>,
    phase_peak: AtomicUsize,
}

impl FeatureBackend for Probe {
    fn descriptor(&self) -> &BackendDescriptor {
        self.inner.descriptor()
    }

    fn extract_features(
        &self,
        batch: &[fissura::imaging::TileTensor],
    ) -> fissura::Result<FeatureMatrix> {
        let out = self.inner.extract_features(batch);
        self.phase_peak
            .fetch_max(PEAK.load(Ordering::SeqCst), Ordering::SeqCst);
        out
    }
}

impl Probe {
    /// Tile-phase peak above `base`, then reset.
    fn take(&self, base: usize) -> usize {
        self.phase_peak
            .swap(0, Ordering::SeqCst)
            .saturating_sub(base)
    }
}

fn gigapixel() -> Check {
    const W: u32 = 12_000;
    const H: u32 = 10_000;
    const BATCH: usize = 16;
    let tile = 224u32;
    let backend = Probe {
        inner: reference(tile),
        phase_peak: AtomicUsize::new(0),
    };
    let model = random_model(2, tile, 1.0, 3);
    let cfg = DetectionConfig {
        confidence_threshold: 0.9,
        step_fraction: 0.6,
        batch_size: BATCH,
    };
    let texture = Texture::new(31);
    // Warm up thread pools and lazily initialised state.
    detect(&texture.image(600, 400), &model, &backend, &cfg).unwrap();
    backend.take(0);

    let tensor_bytes = (tile * tile * 3) as usize * 4;
    let crop_bytes = (tile * tile * 3) as usize;
    let feature_bytes = backend.output_dim() * 4;
    let slack = 2 << 20;
    let batch_bound = BATCH * (tensor_bytes + crop_bytes + feature_bytes) + slack;
    // Positions and predictions accumulated so far; doubled for Vec growth.
    let grid = generate_windows(W, H, tile, 0.6).unwrap();
    let bookkeeping =
        2 * grid.len() * (8 + std::mem::size_of::<fissura::detector::WindowPrediction>() + 2 * 8);
    let tile_bound = batch_bound + bookkeeping;

    let mut pixels = vec![0u8; W as usize * H as usize * 3];
    pixels
        .par_chunks_mut(W as usize * 3)
        .enumerate()
        .for_each(|(y, row)| texture.fill_row(y as u32, row));
    let image = ImageBuffer::new(W, H, pixels).unwrap();
    let image_bytes = image.byte_len();
    let base = CURRENT.load(Ordering::SeqCst);
    let started = Instant::now();
    let (full, peak, _) = measure(|| detect(&image, &model, &backend, &cfg).unwrap());
    let full_secs = started.elapsed().as_secs_f64();
    let tile_peak = backend.take(base);
    drop(image);
    ensure(tile_peak > 0 && tile_peak <= tile_bound, || {
        format!(
            "in-memory tile phase {:.1} MiB exceeds bound {:.1} MiB",
            tile_peak as f64 / MIB,
            tile_bound as f64 / MIB
        )
    })?;

    let strip_bytes = full.window as usize * W as usize * 3;
    let budget = strip_bytes + tile_bound;
    let base = CURRENT.load(Ordering::SeqCst);
    let started = Instant::now();
    let (streamed, speak, _) = measure(|| {
        let mut rows = FnRows::new(W, H, |y, row: &mut [u8]| texture.fill_row(y, row));
        detect_streaming(&mut rows, &model, &backend, &cfg).unwrap()
    });
    let stream_secs = started.elapsed().as_secs_f64();
    let stile_peak = backend.take(base);
    ensure(stile_peak <= budget && speak < image_bytes, || {
        format!(
            "streaming tile phase {:.1} MiB vs budget {:.1} MiB; peak {:.1} MiB vs image {:.1} MiB",
            stile_peak as f64 / MIB,
            budget as f64 / MIB,
            speak as f64 / MIB,
            image_bytes as f64 / MIB
        )
    })?;
    ensure(streamed == full, || {
        "streamed result differs from in-memory result".into()
    })?;
    Ok(format!(
        "{W}x{H} ({} MP), {} windows, batch {BATCH}; in-memory: tile phase {:.1} MiB <= {:.1} MiB, \
         peak incl. masks {:.1} MiB ({full_secs:.0}s); streaming: tile phase {:.1} MiB <= budget {:.1} MiB, \
         peak {:.1} MiB vs image {:.0} MiB ({stream_secs:.0}s)",
        (W as u64 * H as u64) / 1_000_000,
        full.windows.len(),
        tile_peak as f64 / MIB,
        tile_bound as f64 / MIB,
        peak as f64 / MIB,
        stile_peak as f64 / MIB,
        budget as f64 / MIB,
        speak as f64 / MIB,
        image_bytes as f64 / MIB
    ))
}

/// `r` with the mask of `label` replaced by the pixels where `f` holds.
fn gate_of(r: &DetectionResult, label: &str, f: impl Fn(u32, u32) -> bool) -> DetectionResult {
    let mut gated = r.clone();
    let class = gated.classes.iter_mut().find(|c| c.label == label).unwrap();
    let mut m = ClassMask::new(r.width, r.height);
    for y in 0..r.height {
        for x in 0..r.width {
            if f(x, y) {
                m.set(x, y);
            }
        }
    }
    class.boxes = mask_to_bboxes(&m);
    class.mask = m;
    gated
}

fn multi_stage_gating() -> Check {
    let backend = reference(224);
    let scene = Scene::generate(640, 480, 3, 6, 40.0, 8);
    let (w, h) = (640, 480);
    let cfg = DetectionConfig {
        confidence_threshold: 0.6,
        ..Default::default()
    };
    let stage1 = detect(
        &scene.image,
        &random_model(2, 224, 2.0, 1),
        backend.as_ref(),
        &cfg,
    )
    .unwrap();
    let stage2 = random_model(2, 224, 4.0, 2);
    let models = BTreeMap::from([("L1".to_string(), stage2.clone())]);
    let plain = detect(&scene.image, &stage2, backend.as_ref(), &cfg).unwrap();

    let half = gate_of(&stage1, "L1", |x, _| x < w / 2);
    let out = multi_stage(&scene.image, &half, &models, backend.as_ref(), &cfg).unwrap();
    let r = &out["L1"];
    let gate = &half.get("L1").unwrap().mask;
    let hw = r.window / 2;
    ensure(!r.windows.is_empty(), || {
        "half gate evaluated nothing".into()
    })?;
    ensure(
        r.windows.iter().all(|win| gate.get(win.x + hw, win.y + hw)),
        || "a window center lies outside the gate".into(),
    )?;
    let inside = plain
        .windows
        .iter()
        .filter(|win| gate.get(win.x + hw, win.y + hw))
        .count();
    ensure(r.windows.len() == inside, || {
        format!("{} windows, {inside} centers inside", r.windows.len())
    })?;

    let empty = gate_of(&stage1, "L1", |_, _| false);
    let out = multi_stage(&scene.image, &empty, &models, backend.as_ref(), &cfg).unwrap();
    ensure(
        out["L1"].windows.is_empty() && out["L1"].classes.iter().all(|c| c.mask.is_empty()),
        || "empty gate produced windows".into(),
    )?;
    let full = gate_of(&stage1, "L1", |_, _| true);
    let out = multi_stage(&scene.image, &full, &models, backend.as_ref(), &cfg).unwrap();
    ensure(out["L1"] == plain, || {
        "full gate differs from plain detection".into()
    })?;
    let _ = h;
    Ok(format!(
        "half gate: {} of {} windows, all centers inside; empty gate: 0; full gate == detect",
        r.windows.len(),
        plain.windows.len()
    ))
}

// ---------------------------------------------------------------- runner

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 9] = [
        ("metric reproduction", metric_reproduction),
        ("window-count claim", window_count),
        ("tiling coverage property", tiling_coverage),
        ("trainer oracle suite", trainer_oracles),
        ("end-to-end synthetic pipeline", end_to_end),
        ("store/model round-trips", round_trips),
        ("mask/bbox suite", mask_suite),
        ("gigapixel memory bound", gigapixel),
        ("multi-stage gating", multi_stage_gating),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name} [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name} [{secs:.1}s]: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
