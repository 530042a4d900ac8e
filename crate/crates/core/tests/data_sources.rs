use std::collections::BTreeMap;
use std::path::Path;

use cgct::data::{
    generate_synthetic_task, load_image_folder, synthetic_centroids, ImageFolderOptions, MiniBatchSampler, Sample,
    SyntheticSpec, TargetSampling,
};
use cgct::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn write_png(path: &Path, shade: u8) {
    let img = image::RgbImage::from_pixel(6, 6, image::Rgb([shade, 255 - shade, 7]));
    img.save(path).unwrap();
}

#[test]
fn labeled_folder_uses_sorted_class_names() {
    let dir = tempfile::tempdir().unwrap();
    for (c, name) in ["zebra", "apple"].iter().enumerate() {
        std::fs::create_dir(dir.path().join(name)).unwrap();
        for i in 0..3 {
            write_png(&dir.path().join(name).join(format!("{i}.png")), (40 * c + 10 * i) as u8);
        }
    }
    let opts = ImageFolderOptions { resize: None };
    let f = load_image_folder(dir.path(), 2, &opts).unwrap();
    assert_eq!(f.class_names, vec!["apple", "zebra"]);
    assert_eq!(f.dataset.len(), 6);
    assert_eq!(f.dataset.labels(), vec![0, 0, 0, 1, 1, 1]);
    let s = &f.dataset.samples[0];
    assert_eq!(s.features.len(), 3 * 36);
    assert!(s.features.iter().all(|v| (0.0..=1.0).contains(v)));
    // Channel-major layout: first plane is red.
    assert!((s.features[0] - 40.0 / 255.0).abs() < 1e-12);
    let again = load_image_folder(dir.path(), 2, &opts).unwrap();
    assert_eq!(f.dataset, again.dataset);
}

#[test]
fn flat_folder_is_unlabeled_and_skips_junk() {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..5 {
        write_png(&dir.path().join(format!("{i}.png")), 30 * i as u8);
    }
    std::fs::write(dir.path().join("notes.png"), b"not an image").unwrap();
    let f = load_image_folder(dir.path(), 1, &ImageFolderOptions::default()).unwrap();
    assert_eq!(f.dataset.len(), 5);
    assert!(f.dataset.samples.iter().all(|s| s.label.is_none()));
    assert_eq!(f.dataset.samples[0].features.len(), 3 * 28 * 28);
}

#[test]
fn empty_folder_is_a_dataset_error() {
    let dir = tempfile::tempdir().unwrap();
    let e = load_image_folder(dir.path(), 0, &ImageFolderOptions::default());
    assert!(matches!(e, Err(Error::Dataset(_))));
}

#[test]
fn synthetic_task_is_reproducible() {
    let spec = SyntheticSpec::default();
    let a = generate_synthetic_task(&spec).unwrap();
    let b = generate_synthetic_task(&spec).unwrap();
    assert_eq!(a.source, b.source);
    assert_eq!(a.targets, b.targets);
    assert_eq!(a.target_eval, b.target_eval);
    let c = generate_synthetic_task(&SyntheticSpec { seed: 1, ..spec }).unwrap();
    assert_ne!(a.source, c.source);
}

#[test]
fn zero_shift_targets_share_the_source_centroids() {
    let spec = SyntheticSpec {
        shift_magnitudes: vec![0.0, 0.0],
        ..SyntheticSpec::default()
    };
    let (src, targets) = synthetic_centroids(&spec).unwrap();
    for t in targets {
        assert_eq!(t, src);
    }
}

fn class_means(samples: &[Sample], labels: impl Fn(&Sample) -> usize, nc: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; nc];
    let mut counts = vec![0.0; nc];
    for s in samples {
        let l = labels(s);
        counts[l] += 1.0;
        for (k, v) in s.features.iter().enumerate() {
            sums[l][k] += v;
        }
    }
    sums.iter()
        .zip(counts)
        .map(|(s, c)| s.iter().map(|v| v / c).collect())
        .collect()
}

#[test]
fn empirical_displacement_grows_with_magnitude() {
    for seed in 0..5 {
        let spec = SyntheticSpec {
            seed,
            ..SyntheticSpec::default()
        };
        let task = generate_synthetic_task(&spec).unwrap();
        let src = class_means(&task.source.samples, |s| s.label.unwrap(), spec.n_classes, spec.dim);
        let disp: Vec<f64> = task
            .targets
            .iter()
            .map(|t| {
                let m = class_means(&t.samples, |s| task.hidden_target_labels[&s.uid], spec.n_classes, spec.dim);
                m.iter()
                    .zip(&src)
                    .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
                    .sum::<f64>()
            })
            .collect();
        assert!(disp.windows(2).all(|w| w[0] < w[1]), "seed {seed}: {disp:?}");
    }
}

#[test]
fn ten_epochs_draw_every_sample_ten_times() {
    let mut sampler = MiniBatchSampler::new(10, TargetSampling::Combined).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for _ in 0..100 {
        for i in sampler.next_source_indices(100, &mut rng).unwrap() {
            *counts.entry(i).or_default() += 1;
        }
    }
    assert_eq!(counts.len(), 100);
    assert!(counts.values().all(|&c| c == 10));
}

#[test]
fn fixed_seed_gives_identical_batch_sequence() {
    let task = generate_synthetic_task(&SyntheticSpec::default()).unwrap();
    let run = || {
        let mut s = MiniBatchSampler::new(16, TargetSampling::Stratified).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pool: Vec<Sample> = task.targets.iter().flat_map(|t| t.samples.clone()).collect();
        (0..20)
            .flat_map(|_| {
                let b = s.next_batch(&task.source.samples, &pool, &mut rng).unwrap();
                b.all().map(|x| x.uid).collect::<Vec<_>>()
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
