use maskgst::data::{generate_synthetic, Image, SyntheticConfig};
use maskgst::eval::*;
use maskgst::rng::seeded;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn frames_and_labels(stories: &[maskgst::data::StorySample]) -> (Vec<Image>, Vec<Vec<bool>>) {
    let frames = stories.iter().flat_map(|s| s.images.iter().cloned()).collect();
    let labels = stories.iter().flat_map(|s| s.presence.iter().cloned()).collect();
    (frames, labels)
}

#[test]
fn classifier_clears_gate_and_is_reproducible() {
    let ds = generate_synthetic(&SyntheticConfig {
        train_stories: 200,
        val_stories: 60,
        test_stories: 0,
        ..Default::default()
    })
    .unwrap();
    let (tf, tl) = frames_and_labels(&ds.train);
    let (vf, vl) = frames_and_labels(&ds.val);
    let cfg = ClassifierConfig::default();
    let (clf, stats) = train_classifier::<f32>(cfg.clone(), &tf, &tl, (&vf, &vl)).unwrap();
    assert!(stats.last().unwrap().loss < stats[0].loss);
    let heldout = clf.validated_f1().unwrap();
    assert!(heldout >= F1_GATE, "held-out F1 {heldout}");
    let own = char_metrics(&clf.predict(&tf).unwrap(), &tl).unwrap().f1();
    assert!(own >= 0.99, "training-frame F1 {own}");

    let blanks: Vec<Image> = ds_scenes().into_iter().map(|c| Image::filled(32, c)).collect();
    for p in clf.predict(&blanks).unwrap() {
        assert!(p.iter().all(|&b| !b), "blank frame predicted {p:?}");
    }
    assert!(clf.probabilities(&vf[..4]).unwrap().iter().flatten().all(|&p| p > 0.0 && p < 1.0));

    let report = evaluate_frames(&clf, &vf, &vl, Some(&vf)).unwrap();
    assert!(report.ffd.unwrap() < 1e-6);
    assert!(report.char_f1 >= F1_GATE);

    let short = ClassifierConfig { epochs: 1, ..cfg };
    let (a, _) = train_classifier::<f32>(short.clone(), &tf[..200], &tl[..200], (&vf, &vl)).unwrap();
    let (b, _) = train_classifier::<f32>(short, &tf[..200], &tl[..200], (&vf, &vl)).unwrap();
    assert_eq!(a.to_checkpoint().to_bytes(), b.to_checkpoint().to_bytes());
}

fn ds_scenes() -> Vec<[u8; 3]> {
    SyntheticConfig::default().scenes.iter().map(|s| s.color).collect()
}

#[test]
fn ungated_classifier_refuses_reports() {
    let clf = CharClassifier::<f32>::new(ClassifierConfig::default()).unwrap();
    let frames = vec![Image::filled(32, [0, 0, 0]); 2];
    let truth = vec![vec![false; 9]; 2];
    assert!(matches!(evaluate_frames(&clf, &frames, &truth, None), Err(EvalError::Unvalidated)));
    let mut clf = clf;
    let labels = vec![vec![true; 9]; 2];
    clf.validate_on(&frames, &labels).unwrap();
    assert!(matches!(evaluate_frames(&clf, &frames, &truth, None), Err(EvalError::GateUnmet { .. })));
}

fn gaussian_rows(n: usize, d: usize, mean: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeded(seed);
    // correlated features through a fixed random mixing matrix
    let mix: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            (0..d).map(|i| mean + (0..d).map(|j| mix[i * d + j] * z[j]).sum::<f64>()).collect()
        })
        .collect()
}

#[test]
fn identical_sets_have_zero_distance() {
    let x = gaussian_rows(200, 8, 0.5, 1);
    assert!(frechet_feature_distance(&x, &x).unwrap().abs() < 1e-6);
}

#[test]
fn one_dimensional_gaussians_match_closed_form() {
    let mut rng = seeded(4);
    let a: Vec<Vec<f64>> = (0..10_000).map(|_| vec![StandardNormal.sample(&mut rng)]).collect();
    let b: Vec<Vec<f64>> = (0..10_000).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); vec![1.0 + z] }).collect();
    let d = frechet_feature_distance(&a, &b).unwrap();
    assert!((d - 1.0).abs() < 0.05, "distance {d}");
}

fn oracle_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

#[test]
fn matches_eigendecomposition_oracle() {
    for seed in 0..10 {
        let a = gaussian_rows(50, 4, 0.0, 100 + seed);
        let b = gaussian_rows(60, 4, 0.3, 200 + seed);
        let ours = frechet_feature_distance(&a, &b).unwrap();
        let (ma, ca) = covariance(&a).unwrap();
        let (mb, cb) = covariance(&b).unwrap();
        let reg = DMatrix::<f64>::identity(4, 4) * COV_REGULARIZER;
        let sa = DMatrix::from_row_slice(4, 4, &ca) + &reg;
        let sb = DMatrix::from_row_slice(4, 4, &cb) + &reg;
        let root_a = oracle_sqrt(&sa);
        let cross = oracle_sqrt(&(&root_a * &sb * &root_a));
        let mean: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
        let expected = mean + sa.trace() + sb.trace() - 2.0 * cross.trace();
        assert!((ours - expected).abs() < 1e-6, "seed {seed}: {ours} vs {expected}");
        let swapped = frechet_feature_distance(&b, &a).unwrap();
        assert!((ours - swapped).abs() < 1e-6);
    }
}

#[test]
fn square_root_matches_oracle() {
    let x = gaussian_rows(30, 5, 0.0, 9);
    let (_, c) = covariance(&x).unwrap();
    let ours = sqrtm_psd(&c, 5).unwrap();
    let oracle = oracle_sqrt(&DMatrix::from_row_slice(5, 5, &c));
    for i in 0..5 {
        for j in 0..5 {
            assert!((ours[i * 5 + j] - oracle[(i, j)]).abs() < 1e-7);
        }
    }
}
