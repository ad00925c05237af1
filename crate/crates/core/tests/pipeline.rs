//! Crops gathered along jittered copies of planted cracks train a head that
//! finds the cracks again in unseen scenes.

use fissura::backend::{load_backend, BackendDescriptor, FeatureBackend, FeatureMatrix};
use fissura::detector::{detect, DetectionConfig};
use fissura::imaging::{extract_crop, prepare_tile, ImageBuffer};
use fissura::synthetic::Scene;
use fissura::trainer::{grid_search_matrix, Acquisition, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WINDOW: u32 = 112;

fn embed(backend: &dyn FeatureBackend, tiles: &[ImageBuffer]) -> FeatureMatrix {
    let cfg = backend.descriptor().preprocess_config();
    let tensors: Vec<_> = tiles
        .iter()
        .map(|t| prepare_tile(t, 0, 0, t.width(), &cfg).unwrap())
        .collect();
    backend.extract_features(&tensors).unwrap()
}

fn crop_at(img: &ImageBuffer, cx: f64, cy: f64) -> ImageBuffer {
    let half = WINDOW as f64 / 2.0;
    let x = (cx - half)
        .round()
        .clamp(0.0, (img.width() - WINDOW) as f64) as i64;
    let y = (cy - half)
        .round()
        .clamp(0.0, (img.height() - WINDOW) as f64) as i64;
    extract_crop(img, x, y, WINDOW).unwrap()
}

fn training_set(seeds: std::ops::Range<u64>) -> (Vec<ImageBuffer>, Vec<u32>) {
    let mut tiles = Vec::new();
    let mut labels = Vec::new();
    for seed in seeds {
        let scene = Scene::generate(900, 700, 3, 8, 50.0, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for crack in &scene.cracks {
            for _ in 0..2 {
                let path: Vec<(f64, f64)> = crack
                    .points
                    .iter()
                    .map(|&(x, y)| {
                        (
                            x + rng.random_range(-20.0..20.0),
                            y + rng.random_range(-20.0..20.0),
                        )
                    })
                    .collect();
                for s in path.windows(2) {
                    for i in 0..5 {
                        let t = i as f64 / 4.0;
                        tiles.push(crop_at(
                            &scene.image,
                            s[0].0 + t * (s[1].0 - s[0].0),
                            s[0].1 + t * (s[1].1 - s[0].1),
                        ));
                        labels.push(1);
                    }
                }
            }
        }
        for y in (0..=700 - WINDOW).step_by(82) {
            for x in (0..=900 - WINDOW).step_by(82) {
                let c = (x as f64 + 56.0, y as f64 + 56.0);
                if scene.crack_distance(c.0, c.1) > 100.0 {
                    tiles.push(extract_crop(&scene.image, x as i64, y as i64, WINDOW).unwrap());
                    labels.push(0);
                }
            }
        }
    }
    (tiles, labels)
}

#[test]
fn trained_head_recovers_planted_cracks() {
    let desc = BackendDescriptor::reference();
    let backend = load_backend(&desc).unwrap();
    let (tiles, labels) = training_set(100..106);
    let features = embed(backend.as_ref(), &tiles);
    let acq = Acquisition {
        backend: desc.id(),
        tile_size: 224,
        scale_factor: 2.0,
    };
    let names = vec!["Background".to_string(), "Crack".to_string()];
    let (model, report) =
        grid_search_matrix(&features, &labels, &names, &TrainConfig::default(), &acq).unwrap();
    assert!(
        report.holdout_accuracy().value().unwrap() >= 0.95,
        "{report}"
    );

    let (mut planted, mut found) = (0, 0);
    for seed in [11, 12, 13] {
        let scene = Scene::generate(900, 700, 3, 8, 50.0, seed);
        let r = detect(
            &scene.image,
            &model,
            backend.as_ref(),
            &DetectionConfig::default(),
        )
        .unwrap();
        assert_eq!(r.window, WINDOW);
        let crack = r.get("Crack").unwrap();
        let truth = scene.crack_mask();
        let half = WINDOW / 2;
        for w in &r.windows {
            let (cx, cy) = (w.x + half, w.y + half);
            if scene.crack_distance(cx as f64, cy as f64) <= WINDOW as f64 / 4.0 {
                planted += 1;
                found += crack.mask.get(cx, cy) as usize;
            }
            if w.accepted_class(0.95) == Some(1) {
                let touches =
                    (w.y..w.y + WINDOW).any(|y| (w.x..w.x + WINDOW).any(|x| truth.get(x, y)));
                assert!(
                    touches,
                    "crack window at ({}, {}) holds no crack pixel",
                    w.x, w.y
                );
            }
        }
    }
    assert!(found as f64 >= 0.9 * planted as f64, "{found} of {planted}");
}
