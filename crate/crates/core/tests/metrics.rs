use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sonovis_core::image::{DepthImage, LabelMap};
use sonovis_core::metrics::{self, Denominator};

struct Oracle {
    abs_rel: f64,
    sqr_rel: f64,
    rmse_lin: f64,
    rmse_log: f64,
    auc: f64,
}

/// Straight transcription of the definitions: per-image means over valid
/// pixels, averaged over images; AUC as a left Riemann sum over 30 steps.
fn oracle(preds: &[Vec<f64>], gts: &[Vec<f64>]) -> Oracle {
    let n = preds.len() as f64;
    let (mut ar, mut sr, mut ml, mut mg) = (0.0, 0.0, 0.0, 0.0);
    let mut crr = [0.0f64; 30];
    for (p, g) in preds.iter().zip(gts) {
        let valid: Vec<(f64, f64)> = p.iter().zip(g).filter(|(_, &g)| g > 0.0).map(|(&p, &g)| (p, g)).collect();
        let m = valid.len() as f64;
        ar += valid.iter().map(|(p, g)| (g - p).abs() / p.max(1e-6)).sum::<f64>() / m;
        sr += valid.iter().map(|(p, g)| (g - p).powi(2) / p.max(1e-6)).sum::<f64>() / m;
        ml += valid.iter().map(|(p, g)| (g - p).powi(2)).sum::<f64>() / m;
        mg += valid.iter().map(|(p, g)| (g.max(1e-6).ln() - p.max(1e-6).ln()).powi(2)).sum::<f64>() / m;
        for (t, c) in crr.iter_mut().enumerate() {
            let tau = t as f64 * 0.01;
            *c += valid.iter().filter(|(p, g)| (g - p).abs() / g < tau).count() as f64 / m;
        }
    }
    Oracle {
        abs_rel: ar / n,
        sqr_rel: sr / n,
        rmse_lin: (ml / n).sqrt(),
        rmse_log: (mg / n).sqrt(),
        auc: crr.iter().map(|c| c / n * 0.01).sum(),
    }
}

#[test]
fn depth_metrics_match_oracle_on_random_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut preds, mut gts) = (Vec::new(), Vec::new());
    for _ in 0..200 {
        let g: Vec<f32> = (0..64)
            .map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.5..10.0) })
            .collect();
        let mut g = g;
        g[0] = 1.0;
        let p: Vec<f32> = g.iter().map(|&v| v.max(0.5) * rng.random_range(0.8..1.25)).collect();
        preds.push(p);
        gts.push(g);
    }
    let to_img = |v: &Vec<f32>| DepthImage::new(8, 8, v.clone()).unwrap();
    let pi: Vec<DepthImage> = preds.iter().map(to_img).collect();
    let gi: Vec<DepthImage> = gts.iter().map(to_img).collect();
    let f64s = |v: &Vec<Vec<f32>>| -> Vec<Vec<f64>> { v.iter().map(|x| x.iter().map(|&y| y as f64).collect()).collect() };
    let o = oracle(&f64s(&preds), &f64s(&gts));
    let r = metrics::depth_metrics(&pi, &gi, Denominator::Prediction).unwrap();
    for (name, got, want) in [
        ("abs_rel", r.abs_rel, o.abs_rel),
        ("sqr_rel", r.sqr_rel, o.sqr_rel),
        ("rmse_lin", r.rmse_lin, o.rmse_lin),
        ("rmse_log", r.rmse_log, o.rmse_log),
        ("auc", r.auc_crr, o.auc),
    ] {
        assert!((got - want).abs() < 1e-9, "{name}: {got} vs {want}");
    }
    assert!((metrics::auc_crr(&pi, &gi).unwrap() - o.auc).abs() < 1e-9);
    assert_eq!(r.n_images, 200);
}

#[test]
fn miou_matches_confusion_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let classes = 4u8;
    let (mut preds, mut gts) = (Vec::new(), Vec::new());
    let mut conf = vec![vec![0u64; classes as usize]; classes as usize];
    for _ in 0..200 {
        let g: Vec<u8> = (0..64).map(|_| rng.random_range(0..classes)).collect();
        let p: Vec<u8> = g.iter().map(|&c| if rng.random_bool(0.7) { c } else { rng.random_range(0..classes) }).collect();
        for (&a, &b) in p.iter().zip(&g) {
            conf[b as usize][a as usize] += 1;
        }
        preds.push(LabelMap::new(8, 8, p).unwrap());
        gts.push(LabelMap::new(8, 8, g).unwrap());
    }
    let oracle_iou = |c: usize| {
        let tp = conf[c][c] as f64;
        let fp: u64 = (0..classes as usize).map(|r| conf[r][c]).sum::<u64>() - conf[c][c];
        let fnn: u64 = conf[c].iter().sum::<u64>() - conf[c][c];
        tp / (tp + fp as f64 + fnn as f64)
    };
    let all: Vec<u8> = (0..classes).collect();
    let r = metrics::miou(&preds, &gts, &all, None).unwrap();
    let want = (0..classes as usize).map(oracle_iou).sum::<f64>() / classes as f64;
    assert!((r.miou - want).abs() < 1e-12);
    for c in 0..classes {
        assert!((r.per_class_iou[&c] - oracle_iou(c as usize)).abs() < 1e-12);
    }
    // an unused label id is reported absent, not averaged
    let r = metrics::miou(&preds, &gts, &[0, 1, 2, 3, 9], None).unwrap();
    assert_eq!(r.absent_classes, vec![9]);
    assert!((r.miou - want).abs() < 1e-12);
}
