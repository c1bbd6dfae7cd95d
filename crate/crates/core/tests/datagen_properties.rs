mod common;

use mtflow::datagen::{
    generate_dataset, generate_sample, generate_scene, read_manifest, render_ideal, scene_mask, FilamentSpec, NoiseSpec,
    IMAGES_DIR, MANIFEST_FILE, MASKS_DIR,
};
use mtflow::Mask;

/// Two-pass 8-connected labelling with union-find over provisional labels.
fn count_components(mask: &Mask) -> usize {
    let (h, w) = mask.shape();
    let mut labels = vec![0usize; h * w];
    let mut parent = vec![0usize];
    fn root(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for r in 0..h {
        for c in 0..w {
            if mask.grid().get(r, c) == 0 {
                continue;
            }
            let mut neighbours = Vec::new();
            for (dr, dc) in [(-1i64, -1i64), (-1, 0), (-1, 1), (0, -1)] {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr >= 0 && nc >= 0 && nc < w as i64 {
                    let l = labels[nr as usize * w + nc as usize];
                    if l > 0 {
                        neighbours.push(l);
                    }
                }
            }
            let label = match neighbours.iter().min() {
                None => {
                    parent.push(parent.len());
                    parent.len() - 1
                }
                Some(&m) => {
                    for &n in &neighbours {
                        let (a, b) = (root(&mut parent, n), root(&mut parent, m));
                        parent[a.max(b)] = a.min(b);
                    }
                    m
                }
            };
            labels[r * w + c] = label;
        }
    }
    let mut roots: Vec<usize> = labels.iter().filter(|&&l| l > 0).map(|&l| root(&mut parent, l)).collect();
    roots.sort_unstable();
    roots.dedup();
    roots.len()
}

#[test]
fn component_oracle_counts_known_shapes() {
    let m = Mask::from_vec(4, 5, vec![1, 1, 0, 0, 1, 0, 0, 0, 1, 0, 0, 1, 0, 0, 0, 1, 0, 0, 1, 1]).unwrap();
    assert_eq!(count_components(&m), 4);
    let u = Mask::from_vec(3, 3, vec![1, 0, 1, 1, 0, 1, 1, 1, 1]).unwrap();
    assert_eq!(count_components(&u), 1);
}

#[test]
fn three_filaments_give_at_most_three_components() {
    let spec = FilamentSpec { num_filaments: (3, 3), ..FilamentSpec::simple() };
    for seed in 0..40 {
        let (_, mask) = generate_sample(&spec, &NoiseSpec::noiseless(), 64, 64, seed).unwrap();
        let n = count_components(&mask);
        assert!((1..=3).contains(&n), "seed {seed}: {n} components");
    }
}

#[test]
fn foreground_fraction_in_thin_structure_regime() {
    let fractions: Vec<f64> = (0..60)
        .map(|seed| generate_sample(&FilamentSpec::simple(), &NoiseSpec::default(), 64, 64, seed).unwrap().1.foreground_fraction())
        .collect();
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    assert!((0.005..=0.25).contains(&mean), "mean fraction {mean}");
    assert!(fractions.iter().all(|f| (0.005..=0.25).contains(f)), "{fractions:?}");
}

#[test]
fn linear_decay_dims_filament_tails() {
    let spec = FilamentSpec { num_filaments: (1, 1), ..FilamentSpec::complex() };
    for seed in 0..30 {
        let scene = generate_scene(&spec, 64, 64, seed).unwrap();
        let ideal = render_ideal(&spec, &scene);
        let pts = &scene.filaments[0].points;
        let at = |&(r, c): &(f64, f64)| ideal.get(r.round() as usize, c.round() as usize);
        let k = (pts.len() / 10).max(1);
        let head = pts[..k].iter().map(at).sum::<f64>() / k as f64;
        let tail = pts[pts.len() - k..].iter().map(at).sum::<f64>() / k as f64;
        assert!(tail <= head, "seed {seed}: head {head} tail {tail}");
    }
}

#[test]
fn uniform_variant_has_flat_profile() {
    let spec = FilamentSpec { num_filaments: (1, 1), ..FilamentSpec::simple() };
    let scene = generate_scene(&spec, 64, 64, 3).unwrap();
    let ideal = render_ideal(&spec, &scene);
    let peak = ideal.as_slice().iter().cloned().fold(0.0, f64::max);
    assert!(peak <= spec.intensity + 1e-12);
    assert_eq!(scene_mask(&spec, &scene).foreground_count(), ideal.as_slice().iter().filter(|&&v| v > 0.0).count());
}

#[test]
fn dataset_of_ten_writes_pairs_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    generate_dataset(&FilamentSpec::simple(), &NoiseSpec::default(), 32, 32, 10, 7, tmp.path()).unwrap();
    let count = |d: &str| std::fs::read_dir(tmp.path().join(d)).unwrap().count();
    assert_eq!(count(IMAGES_DIR), 10);
    assert_eq!(count(MASKS_DIR), 10);
    assert!(tmp.path().join(MANIFEST_FILE).is_file());
    let manifest = read_manifest(tmp.path()).unwrap();
    assert_eq!(manifest.entries.len(), 10);
    assert_eq!(manifest.entries[3].seed, 10);
}

#[test]
fn sizes_not_multiple_of_sixteen_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(generate_dataset(&FilamentSpec::simple(), &NoiseSpec::default(), 40, 32, 2, 0, tmp.path()).is_err());
}
