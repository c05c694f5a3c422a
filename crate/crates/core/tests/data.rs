use std::fs;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vphype::data::{
    make_synthetic_scene, stratified_split, BandStats, HsiScene, PatchExtractor, SplitSpec, SynthSpec, CUBE_FILE,
    LABELS_FILE, META_FILE,
};
use vphype::{Error, Tensor};

fn small_scene(seed: u64) -> HsiScene {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let cube: Vec<f64> = (0..3 * 8 * 8).map(|_| r.random_range(-5.0f32..5.0) as f64).collect();
    let labels: Vec<u16> = (0..64).map(|_| r.random_range(0..=3)).collect();
    HsiScene::new(
        Tensor::new(vec![3, 8, 8], cube).unwrap(),
        labels,
        vec!["a".into(), "b".into(), "c".into()],
    )
    .unwrap()
}

/// One class per row band, `rows[k]` rows of width `w` each.
fn striped(rows: &[usize], w: usize) -> HsiScene {
    let h: usize = rows.iter().sum();
    let mut labels = Vec::new();
    for (k, &n) in rows.iter().enumerate() {
        labels.extend(std::iter::repeat_n(k as u16 + 1, n * w));
    }
    let cube = (0..h * w).map(|i| i as f64).collect();
    HsiScene::new(
        Tensor::new(vec![1, h, w], cube).unwrap(),
        labels,
        (0..rows.len()).map(|k| format!("c{k}")).collect(),
    )
    .unwrap()
}

// ── container ───────────────────────────────────────────────────────────────

#[test]
fn scene_round_trip_is_bit_exact() {
    let scene = small_scene(1);
    let dir = tempfile::tempdir().unwrap();
    scene.save(dir.path()).unwrap();
    let loaded = HsiScene::load(dir.path()).unwrap();
    assert_eq!(loaded, scene);
    let again = tempfile::tempdir().unwrap();
    loaded.save(again.path()).unwrap();
    for f in [META_FILE, CUBE_FILE, LABELS_FILE] {
        assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(again.path().join(f)).unwrap(), "{f}");
    }
    let cube = fs::read(dir.path().join(CUBE_FILE)).unwrap();
    assert_eq!(cube.len(), 3 * 64 * 4);
    assert_eq!(&cube[..4], &(scene.cube().data()[0] as f32).to_le_bytes());
}

#[test]
fn scene_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    small_scene(2).save(dir.path()).unwrap();
    let labels = dir.path().join(LABELS_FILE);
    let mut bytes = fs::read(&labels).unwrap();
    bytes.pop();
    fs::write(&labels, &bytes).unwrap();
    let err = HsiScene::load(dir.path()).unwrap_err().to_string();
    assert!(err.contains("labels.u16") && err.contains("expected 128 bytes"), "{err}");

    bytes.push(0);
    bytes[10] = 9;
    fs::write(&labels, &bytes).unwrap();
    let err = HsiScene::load(dir.path()).unwrap_err().to_string();
    assert!(err.contains("labels") && err.contains("exceeds num_classes"), "{err}");

    let meta = dir.path().join(META_FILE);
    let text = fs::read_to_string(&meta).unwrap().replace("\"version\": 1", "\"version\": 2");
    fs::write(&meta, text).unwrap();
    let err = HsiScene::load(dir.path()).unwrap_err();
    assert!(matches!(&err, Error::Format(m) if m.starts_with("version")), "{err}");
}

#[test]
fn unlabeled_scene_loads_then_split_fails() {
    let scene = HsiScene::new(Tensor::zeros(vec![2, 4, 4]), vec![0; 16], vec!["x".into()]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    scene.save(dir.path()).unwrap();
    let loaded = HsiScene::load(dir.path()).unwrap();
    assert!(loaded.labeled_pixels().is_empty());
    assert_eq!(loaded.empty_classes(), vec![0]);
    assert!(matches!(stratified_split(&loaded, &SplitSpec::default()), Err(Error::Split(_))));
}

// ── split ───────────────────────────────────────────────────────────────────

#[test]
fn split_counts() {
    let scene = striped(&[10, 1], 10);
    let spec = SplitSpec {
        train_fraction: 0.02,
        seed: 3,
        per_class_min: 1,
    };
    let split = stratified_split(&scene, &spec).unwrap();
    let count = |pixels: &[usize], c: usize| pixels.iter().filter(|&&p| scene.class_of(p) == Some(c)).count();
    assert_eq!((count(&split.train, 0), count(&split.test, 0)), (2, 98));
    assert_eq!((count(&split.train, 1), count(&split.test, 1)), (1, 9));

    let spec = SplitSpec {
        train_fraction: 0.25,
        ..spec
    };
    // 0.25 · 10 = 2.5 rounds away from zero
    let split = stratified_split(&scene, &spec).unwrap();
    assert_eq!(count(&split.train, 1), 3);

    let err = stratified_split(&striped(&[5, 1], 1), &SplitSpec::default()).unwrap_err();
    assert!(matches!(&err, Error::Split(m) if m.contains("c1")), "{err}");
}

#[test]
fn split_seeds() {
    let scene = striped(&[7, 5, 9], 12);
    let spec = |seed| SplitSpec {
        train_fraction: 0.1,
        seed,
        per_class_min: 1,
    };
    let reference = stratified_split(&scene, &spec(0)).unwrap();
    for seed in 1..=5 {
        let a = stratified_split(&scene, &spec(seed)).unwrap();
        assert_eq!(a, stratified_split(&scene, &spec(seed)).unwrap());
        assert_ne!(a.train, reference.train);
        assert_eq!(a.train.len(), reference.train.len());
        for c in 0..3 {
            let n = |s: &[usize]| s.iter().filter(|&&p| scene.class_of(p) == Some(c)).count();
            assert_eq!(n(&a.train), n(&reference.train));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn split_partitions_labeled_pixels(
        rows in prop::collection::vec(1usize..6, 1..5),
        frac in 0.01f64..0.6,
        seed in any::<u64>(),
        min in 1usize..3,
    ) {
        let scene = striped(&rows, 8);
        let spec = SplitSpec { train_fraction: frac, seed, per_class_min: min };
        let Ok(split) = stratified_split(&scene, &spec) else {
            // only legal when some class cannot keep a test pixel
            prop_assert!(rows.iter().any(|&r| spec.train_count(r * 8) >= r * 8));
            return Ok(());
        };
        let mut all: Vec<usize> = split.train.iter().chain(&split.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, scene.labeled_pixels());
        prop_assert!(split.train.iter().all(|p| split.test.binary_search(p).is_err()));
        for (c, &r) in rows.iter().enumerate() {
            let n = r * 8;
            let k = split.train.iter().filter(|&&p| scene.class_of(p) == Some(c)).count();
            prop_assert_eq!(k, min.max((frac * n as f64).round() as usize));
        }
    }

    #[test]
    fn patches_match_bounds_checked_oracle(h in 1usize..7, w in 1usize..7, size in prop::sample::select(vec![1usize, 3, 5, 7, 9])) {
        let cube: Vec<f64> = (0..2 * h * w).map(|i| i as f64).collect();
        let scene = HsiScene::new(Tensor::new(vec![2, h, w], cube).unwrap(), vec![1; h * w], vec!["k".into()]).unwrap();
        let ex = PatchExtractor::new(&scene, BandStats::identity(2), size).unwrap();
        let half = (size / 2) as i64;
        // reflect by repeated folding, checking bounds at every step
        let fold = |mut i: i64, n: i64| {
            if n == 1 { return 0; }
            loop {
                if i < 0 { i = -i; } else if i >= n { i = 2 * (n - 1) - i; } else { return i as usize; }
            }
        };
        for px in 0..h * w {
            let patch = ex.patch(px);
            let (r, c) = ((px / w) as i64, (px % w) as i64);
            for b in 0..2 {
                for i in 0..size {
                    for j in 0..size {
                        let rr = fold(r + i as i64 - half, h as i64);
                        let cc = fold(c + j as i64 - half, w as i64);
                        prop_assert!(rr < h && cc < w);
                        prop_assert_eq!(patch.get(&[b, i, j]), scene.cube().get(&[b, rr, cc]));
                    }
                }
            }
        }
    }
}

// ── patches ─────────────────────────────────────────────────────────────────

#[test]
fn patch_centre_and_corner() {
    let scene = small_scene(4);
    let ex = PatchExtractor::new(&scene, BandStats::identity(3), 5).unwrap();
    let px = 3 * 8 + 4;
    let patch = ex.patch(px);
    assert_eq!(patch.shape(), &[3, 5, 5]);
    for b in 0..3 {
        assert_eq!(patch.get(&[b, 2, 2]), scene.cube().get(&[b, 3, 4]));
    }

    let ex = PatchExtractor::new(&scene, BandStats::identity(3), 3).unwrap();
    let corner = ex.patch(0);
    let v = |r: usize, c: usize| scene.cube().get(&[0, r, c]);
    let want = [[v(1, 1), v(1, 0), v(1, 1)], [v(0, 1), v(0, 0), v(0, 1)], [v(1, 1), v(1, 0), v(1, 1)]];
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(corner.get(&[0, i, j]), want[i][j]);
        }
    }
    assert!(matches!(PatchExtractor::new(&scene, BandStats::identity(3), 4), Err(Error::Config(_))));
}

#[test]
fn training_patches_are_standardized() {
    // spatially stationary noise so neighbours share the pixel distribution
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let (c, h, w) = (4, 64, 64);
    let cube: Vec<f64> = (0..c * h * w)
        .map(|i| 3.0 * (i / (h * w)) as f64 + 2.0 * r.random_range(-1.0..1.0))
        .collect();
    let labels: Vec<u16> = (0..h * w).map(|i| (i % 2) as u16 + 1).collect();
    let scene = HsiScene::new(Tensor::new(vec![c, h, w], cube).unwrap(), labels, vec!["a".into(), "b".into()]).unwrap();
    let split = stratified_split(
        &scene,
        &SplitSpec {
            train_fraction: 0.5,
            seed: 1,
            per_class_min: 1,
        },
    )
    .unwrap();
    let stats = BandStats::from_pixels(&scene, &split.train).unwrap();
    let ex = PatchExtractor::new(&scene, stats, 5).unwrap();
    let (batch, _) = ex.batch(&split.train).unwrap();
    let per = 5 * 5;
    for b in 0..c {
        let vals: Vec<f64> = batch
            .data()
            .chunks(c * per)
            .flat_map(|s| s[b * per..][..per].to_vec())
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.05 && (std - 1.0).abs() < 0.05, "band {b}: mean {mean}, std {std}");
    }
}

// ── synthetic scenes ────────────────────────────────────────────────────────

fn nearest_centroid_accuracy(scene: &HsiScene) -> f64 {
    let n = scene.num_classes();
    let bands = scene.bands();
    let mut sums = vec![vec![0.0; bands]; n];
    let counts = scene.class_counts();
    for p in scene.labeled_pixels() {
        let k = scene.class_of(p).unwrap();
        for b in 0..bands {
            sums[k][b] += scene.value(b, p);
        }
    }
    let centroids: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s.iter().map(|v| v / c as f64).collect())
        .collect();
    let pixels = scene.labeled_pixels();
    let correct = pixels
        .iter()
        .filter(|&&p| {
            let d = |k: usize| (0..bands).map(|b| (scene.value(b, p) - centroids[k][b]).powi(2)).sum::<f64>();
            let best = (0..n).min_by(|&a, &b| d(a).total_cmp(&d(b))).unwrap();
            Some(best) == scene.class_of(p)
        })
        .count();
    correct as f64 / pixels.len() as f64
}

#[test]
fn well_separated_scene_is_centroid_separable() {
    let scene = make_synthetic_scene(&SynthSpec {
        separation: 10.0,
        ..SynthSpec::default()
    })
    .unwrap();
    assert_eq!(scene.class_counts().iter().filter(|&&c| c > 0).count(), 6);
    assert_eq!(nearest_centroid_accuracy(&scene), 1.0);
}

#[test]
fn synthetic_scene_properties() {
    let spec = SynthSpec {
        num_classes: 4,
        bands: 6,
        height: 10,
        width: 12,
        separation: 2.0,
        seed: 9,
    };
    let a = make_synthetic_scene(&spec).unwrap();
    assert_eq!(a, make_synthetic_scene(&spec).unwrap());
    assert_ne!(a, make_synthetic_scene(&SynthSpec { seed: 10, ..spec.clone() }).unwrap());
    assert!(a.labeled_pixels().len() == 120 && a.empty_classes().is_empty());

    // saved and reloaded without change: values are f32-representable
    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    assert_eq!(HsiScene::load(dir.path()).unwrap(), a);

    let flat = make_synthetic_scene(&SynthSpec { separation: 0.0, ..spec.clone() }).unwrap();
    assert!(nearest_centroid_accuracy(&flat) < 0.6);

    let cramped = SynthSpec { height: 3, ..spec.clone() };
    assert!(matches!(make_synthetic_scene(&cramped), Err(Error::Config(_))));
    let too_many = SynthSpec { num_classes: 7, ..spec };
    assert!(matches!(make_synthetic_scene(&too_many), Err(Error::Config(_))));
}
