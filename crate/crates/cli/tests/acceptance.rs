//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! a summary. Set `ACCEPTANCE_STRICT=1` to exit non-zero when any criterion
//! fails.
//!
//! Run a subset with `cargo test --release --test acceptance -- 1 4 9`.

use std::f64::consts::{LN_2, PI};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sonovis_core::atnet::{infer, train_atnet, train_e2e, AtNet, AtNetConfig, AtNetNets, E2eModel};
use sonovis_core::dataset::{
    class_histogram, load_depth_tensor, load_label_maps, load_spectrograms, synth_generate, Bounds, Modality,
    PairManifest, Split, SynthConfig,
};
use sonovis_core::dsp::{mel_center_hz, mel_spectrogram, AudioClip, AudioPipeline, MelParams, SpectrumScale};
use sonovis_core::image::{DepthImage, LabelMap};
use sonovis_core::metrics::{self, Denominator, IouTable};
use sonovis_core::train::{TrainConfig, TrainState};
use sonovis_core::vq::{self, default_adam, one_hot, Codebook, LatentMap, ManifoldVariant, VqConfig, VqModel, VqNets};
use sonovis_core::CoreError;
use sonovis_diff::{
    grad_check, projection_loss, AdamState, Ctx, DiffError, GradCheckOptions, GradCheckReport, LayerSpec, Mode, Network, ParamStore,
    Tensor, Var,
};

type Forward = Box<dyn Fn(&mut Ctx<f64>, Var) -> sonovis_diff::Result<Var>>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- 1

fn randomize_affine(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for id in store.trainable_ids() {
        let name = store.entry(id).name.clone();
        if name.ends_with("gamma") || name.ends_with("beta") || name.ends_with("bias") {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0))).unwrap();
        }
    }
}

/// One finite-difference check on a random input. Elements whose
/// perturbation crosses a relu or max-pool kink are counted as skipped.
fn gradcheck(
    name: &str,
    input_shape: &[usize],
    mode: Mode,
    cap: Option<usize>,
    build: impl Fn(&mut ParamStore<f64>, &mut ChaCha8Rng) -> Forward,
) -> Result<GradCheckReport, String> {
    let seed = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let f = build(&mut store, &mut rng);
    randomize_affine(&mut store, &mut rng);
    let x = Tensor::from_fn(input_shape, |_| rng.random_range(-1.0..1.0));
    let opts = GradCheckOptions {
        eps: 1e-4,
        mode,
        seed,
        max_per_tensor: cap,
    };
    grad_check(&store, &[x], opts, |ctx, xs| {
        let y = f(ctx, xs[0])?;
        projection_loss(ctx, y, seed)
    })
    .map_err(|e| format!("{name}: {e}"))
}

fn layer(specs: Vec<LayerSpec>) -> impl Fn(&mut ParamStore<f64>, &mut ChaCha8Rng) -> Forward {
    move |store, rng| {
        let net = Network::build("net", specs.clone(), store, rng).unwrap();
        Box::new(move |ctx, x| net.forward(ctx, x))
    }
}

fn criterion_gradients() -> Outcome {
    let mut cases: Vec<(&str, Result<GradCheckReport, String>)> = vec![
        ("conv", gradcheck("conv", &[2, 2, 6, 6], Mode::Train, None, layer(vec![LayerSpec::conv(2, 3, 4, 2)]))),
        ("conv-transpose", gradcheck("conv-transpose", &[2, 2, 3, 3], Mode::Train, None, layer(vec![LayerSpec::upconv(2, 2)]))),
        ("dense", gradcheck("dense", &[3, 5], Mode::Train, None, layer(vec![LayerSpec::Dense { in_features: 5, out_features: 3 }]))),
        ("relu", gradcheck("relu", &[2, 3, 4], Mode::Train, None, layer(vec![LayerSpec::Relu]))),
        ("sigmoid", gradcheck("sigmoid", &[2, 3, 4], Mode::Train, None, layer(vec![LayerSpec::Sigmoid]))),
        ("batchnorm-train", gradcheck("bn", &[4, 3, 2, 2], Mode::Train, None, layer(vec![LayerSpec::BatchNorm { channels: 3 }]))),
        ("batchnorm-eval", gradcheck("bn", &[4, 3, 2, 2], Mode::Eval, None, layer(vec![LayerSpec::BatchNorm { channels: 3 }]))),
        ("dropout", gradcheck("dropout", &[4, 6], Mode::Train, None, layer(vec![LayerSpec::Dropout { p: 0.2 }]))),
        ("global-avg-pool", gradcheck("gap", &[2, 3, 3, 3], Mode::Train, None, layer(vec![LayerSpec::GlobalAvgPool]))),
        (
            "max-pool",
            gradcheck("maxpool", &[2, 2, 5, 5], Mode::Train, None, layer(vec![LayerSpec::MaxPool { kernel: 3, stride: 2, padding: 1 }])),
        ),
        ("residual", gradcheck("residual", &[3, 2, 4, 4], Mode::Train, None, layer(vec![LayerSpec::Residual { channels: 2 }]))),
        (
            "resnet-basic",
            gradcheck("resnet", &[3, 2, 4, 4], Mode::Train, None, layer(vec![LayerSpec::ResNetBasic { in_ch: 2, out_ch: 3, stride: 2 }])),
        ),
        (
            "flatten-reshape",
            gradcheck("reshape", &[2, 3, 2, 2], Mode::Train, None, layer(vec![LayerSpec::Flatten, LayerSpec::Reshape { shape: vec![2, 6] }])),
        ),
    ];
    let vq_config = VqConfig {
        image_size: 16,
        latent_size: 4,
        codebook_size: 8,
        code_dim: 3,
        first_features: 3,
        hidden_features: 4,
        residual_blocks: 1,
        ..VqConfig::default()
    };
    cases.push((
        "vq encoder+decoder",
        gradcheck("vq", &[2, 1, 16, 16], Mode::Train, Some(6), |store, rng| {
            let nets = VqNets::build(&vq_config, store, rng).unwrap();
            Box::new(move |ctx, x| {
                let (z, _) = nets.encode(ctx, x).map_err(to_diff)?;
                nets.decode(ctx, z).map_err(to_diff)
            })
        }),
    ));
    let at_config = AtNetConfig {
        input_channels: 2,
        input_size: 32,
        resnet_width: 2,
        mlp_hidden: [5, 6],
        start_channels: 4,
        decoder_start: 1,
        latent_size: 2,
        code_dim: 3,
        dropout: 0.2,
    };
    // batch statistics over 8 samples; with 3 the 1x1 final stage is so
    // curved that a 1e-4 central difference misses by its own truncation error
    cases.push((
        "at-net",
        gradcheck("at-net", &[8, 2, 32, 32], Mode::Train, Some(4), |store, rng| {
            let nets = AtNetNets::build(&at_config, store, rng).unwrap();
            Box::new(move |ctx, x| nets.forward(ctx, x).map_err(to_diff))
        }),
    ));
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    let mut failed = Vec::new();
    for (name, r) in &cases {
        match r {
            // most elements must sit away from kinks for the check to count
            Ok(r) if r.max_rel_error < 1e-4 && r.checked > 4 * r.skipped => {
                worst = worst.max(r.max_rel_error);
                checked += r.checked;
                skipped += r.skipped;
            }
            Ok(r) => failed.push(format!(
                "{name} {:.2e} at {} ({} checked, {} skipped)",
                r.max_rel_error, r.worst, r.checked, r.skipped
            )),
            Err(msg) => failed.push(msg.clone()),
        }
    }
    let detail = if failed.is_empty() {
        format!(
            "{} graphs, {checked} elements (+{skipped} straddling a kink), worst relative error {worst:.2e} (< 1e-4)",
            cases.len()
        )
    } else {
        format!("failing: {}", failed.join(", "))
    };
    outcome(failed.is_empty(), detail)
}

fn to_diff(e: CoreError) -> DiffError {
    DiffError::InvalidArgument(e.to_string())
}

// ---------------------------------------------------------------- 2

fn oracle_nearest(v: &[f32], table: &[f32], d: usize) -> usize {
    let dists: Vec<f64> = table
        .chunks(d)
        .map(|e| e.iter().zip(v).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum())
        .collect();
    let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    dists.iter().position(|&x| x == min).unwrap()
}

fn criterion_quantizer() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut vectors, mut ties) = (0usize, 0usize);
    for trial in 0..1000 {
        let (k, d) = (rng.random_range(2..16), rng.random_range(1..8));
        let mut table: Vec<f32> = (0..k * d).map(|_| rng.random_range(-2..=2) as f32).collect();
        if trial % 2 == 0 {
            // duplicate codewords: the copy at the higher index must lose
            let (src, dup) = (rng.random_range(0..k - 1), k - 1);
            let row = table[src * d..(src + 1) * d].to_vec();
            table[dup * d..].copy_from_slice(&row);
        }
        let cb = Codebook::new(Tensor::new(vec![k, d], table.clone()).unwrap()).unwrap();
        let (n, h, w) = (2, 3, 3);
        let grid = Tensor::from_fn(&[n, d, h, w], |_| rng.random_range(-4..=4) as f32 * 0.5);
        let q = cb.quantize(&LatentMap { grid: grid.clone(), indices: None }).unwrap();
        let idx = q.indices.as_ref().unwrap();
        let plane = h * w;
        for i in 0..n {
            for p in 0..plane {
                let v: Vec<f32> = (0..d).map(|c| grid.data()[(i * d + c) * plane + p]).collect();
                let want = oracle_nearest(&v, &table, d);
                let dists: Vec<f64> = table
                    .chunks(d)
                    .map(|e| e.iter().zip(&v).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum())
                    .collect();
                if dists.iter().filter(|&&x| x == dists[want]).count() > 1 {
                    ties += 1;
                }
                vectors += 1;
                if idx[i * plane + p] != want {
                    return outcome(false, format!("call {trial}: index {} vs oracle {want}", idx[i * plane + p]));
                }
                for c in 0..d {
                    if q.grid.data()[(i * d + c) * plane + p] != table[want * d + c] {
                        return outcome(false, format!("call {trial}: vector differs from codeword {want}"));
                    }
                }
            }
        }
    }
    outcome(ties > 0, format!("1000 calls, {vectors} vectors, {ties} tied minima resolved to the lowest index"))
}

// ---------------------------------------------------------------- 3

fn criterion_straight_through() -> Outcome {
    let config = VqConfig {
        image_size: 16,
        latent_size: 4,
        codebook_size: 8,
        code_dim: 4,
        first_features: 4,
        hidden_features: 6,
        residual_blocks: 1,
        ..VqConfig::default()
    };
    let mut store = ParamStore::<f64>::new();
    let nets = VqNets::build(&config, &mut store, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::from_fn(&[2, 1, 16, 16], |_| rng.random_range(0.0..1.0));
    let mut ctx = Ctx::new(&store, Mode::Train, 0);
    let xv = ctx.input(x, false);
    let (z_e, _) = nets.encode(&mut ctx, xv).unwrap();
    let (n, _, h, w) = ctx.tape.value(z_e).dims4().unwrap();
    let table = ctx.param(nets.codebook);
    let idx = vq::nearest_codes(ctx.tape.value(z_e), ctx.tape.value(table));
    let z_q = ctx.tape.embed_lookup(table, &idx, n, h, w).unwrap();
    let st = ctx.tape.straight_through(z_e, ctx.tape.value(z_q).clone()).unwrap();
    ctx.tape.retain_grad(st);
    ctx.tape.retain_grad(z_e);
    let out = nets.decode(&mut ctx, st).unwrap();
    let recon = vq::reconstruction_loss(&mut ctx, Modality::Depth, out, xv).unwrap();
    ctx.backward(recon).unwrap();
    let g_q = ctx.tape.grad(st).unwrap().clone();
    let g_e = ctx.tape.grad(z_e).unwrap().clone();
    let diff = g_q.max_abs_diff(&g_e);
    let nonzero = g_q.data().iter().any(|&g| g != 0.0);
    let cb_max = ctx
        .param_grads()
        .into_iter()
        .find(|(id, _)| *id == nets.codebook)
        .map_or(0.0, |(_, g)| g.data().iter().fold(0.0f64, |m, v| m.max(v.abs())));
    outcome(
        nonzero && diff <= 1e-12 && cb_max == 0.0,
        format!("max |dL/dz_e - dL/dz_q| = {diff:.1e}, max |codebook grad| = {cb_max:.1e}"),
    )
}

// ---------------------------------------------------------------- 4

struct DepthOracle {
    abs_rel: f64,
    sqr_rel: f64,
    rmse_lin: f64,
    rmse_log: f64,
    auc: f64,
}

fn depth_oracle(preds: &[Vec<f64>], gts: &[Vec<f64>]) -> DepthOracle {
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
            *c += valid.iter().filter(|(p, g)| (g - p).abs() / g < t as f64 * 0.01).count() as f64 / m;
        }
    }
    DepthOracle {
        abs_rel: ar / n,
        sqr_rel: sr / n,
        rmse_lin: (ml / n).sqrt(),
        rmse_log: (mg / n).sqrt(),
        auc: crr.iter().map(|c| c / n * 0.01).sum(),
    }
}

fn criterion_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    let mut bad = Vec::new();
    let mut check = |name: &str, got: f64, want: f64| {
        let e = (got - want).abs();
        worst = worst.max(e);
        if e >= 1e-9 {
            bad.push(format!("{name} {got} vs {want}"));
        }
    };

    let (mut preds, mut gts) = (Vec::new(), Vec::new());
    for _ in 0..200 {
        let mut g: Vec<f32> = (0..64).map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.5..10.0) }).collect();
        g[0] = 1.0;
        let p: Vec<f32> = g.iter().map(|&v| v.max(0.5) * rng.random_range(0.8..1.25)).collect();
        preds.push(p);
        gts.push(g);
    }
    let img = |v: &Vec<f32>| DepthImage::new(8, 8, v.clone()).unwrap();
    let pi: Vec<DepthImage> = preds.iter().map(img).collect();
    let gi: Vec<DepthImage> = gts.iter().map(img).collect();
    let wide = |v: &Vec<Vec<f32>>| -> Vec<Vec<f64>> { v.iter().map(|x| x.iter().map(|&y| y as f64).collect()).collect() };
    let (pw, gw) = (wide(&preds), wide(&gts));
    let o = depth_oracle(&pw, &gw);
    let r = metrics::depth_metrics(&pi, &gi, Denominator::Prediction).unwrap();
    check("abs_rel", r.abs_rel, o.abs_rel);
    check("sqr_rel", r.sqr_rel, o.sqr_rel);
    check("rmse_lin", r.rmse_lin, o.rmse_lin);
    check("rmse_log", r.rmse_log, o.rmse_log);
    check("auc_crr", r.auc_crr, o.auc);
    check("auc_crr fn", metrics::auc_crr(&pi, &gi).unwrap(), o.auc);
    for (i, tau) in [0.0, 0.03, 0.1, 0.2].into_iter().enumerate() {
        let (p, g) = (&pw[i], &gw[i]);
        let valid: Vec<(f64, f64)> = p.iter().zip(g).filter(|(_, &g)| g > 0.0).map(|(&p, &g)| (p, g)).collect();
        let want = valid.iter().filter(|(p, g)| (g - p).abs() / g < tau).count() as f64 / valid.len() as f64;
        check("crr", metrics::crr(&pi[i], &gi[i], tau).unwrap(), want);
    }

    // segmentation against a confusion matrix
    let classes = 4u8;
    let mut conf = vec![vec![0u64; 4]; 4];
    let (mut sp, mut sg) = (Vec::new(), Vec::new());
    for _ in 0..200 {
        let g: Vec<u8> = (0..64).map(|_| rng.random_range(0..classes)).collect();
        let p: Vec<u8> = g.iter().map(|&c| if rng.random_bool(0.7) { c } else { rng.random_range(0..classes) }).collect();
        for (&a, &b) in p.iter().zip(&g) {
            conf[b as usize][a as usize] += 1;
        }
        sp.push(LabelMap::new(8, 8, p).unwrap());
        sg.push(LabelMap::new(8, 8, g).unwrap());
    }
    let iou_oracle: Vec<f64> = (0..4)
        .map(|c| {
            let tp = conf[c][c] as f64;
            let fp: u64 = (0..4).filter(|&r| r != c).map(|r| conf[r][c]).sum();
            let fn_: u64 = (0..4).filter(|&k| k != c).map(|k| conf[c][k]).sum();
            tp / (tp + fp as f64 + fn_ as f64)
        })
        .collect();
    let all: Vec<u8> = (0..classes).collect();
    let s = metrics::miou(&sp, &sg, &all, None).unwrap();
    for c in 0..4u8 {
        check("iou", s.per_class_iou[&c], iou_oracle[c as usize]);
    }
    check("miou", s.miou, iou_oracle.iter().sum::<f64>() / 4.0);
    let first = {
        let (p, g) = (sp[0].data(), sg[0].data());
        let i = p.iter().zip(g).filter(|(&a, &b)| a == 1 && b == 1).count() as f64;
        let u = p.iter().zip(g).filter(|(&a, &b)| a == 1 || b == 1).count() as f64;
        i / u
    };
    check("iou single", metrics::iou(&sp[0], &sg[0], 1).unwrap().unwrap_or(f64::NAN), first);

    // hand values
    let px = |v: f32| DepthImage::new(1, 1, vec![v]).unwrap();
    let one = metrics::depth_metrics(&[px(1.0)], &[px(2.0)], Denominator::Prediction).unwrap();
    check("1px abs_rel", one.abs_rel, 1.0);
    check("1px sqr_rel", one.sqr_rel, 1.0);
    check("1px rmse_lin", one.rmse_lin, 1.0);
    check("1px rmse_log", one.rmse_log, LN_2);
    let flip = metrics::depth_metrics(&[px(2.0)], &[px(1.0)], Denominator::Prediction).unwrap();
    check("1px abs_rel paper denominator", flip.abs_rel, 0.5);
    let eigen = metrics::depth_metrics(&[px(2.0)], &[px(1.0)], Denominator::GroundTruth).unwrap();
    check("1px abs_rel eigen denominator", eigen.abs_rel, 1.0);
    let ones = DepthImage::filled(4, 4, 1.0);
    check("perfect auc", metrics::auc_crr(std::slice::from_ref(&ones), std::slice::from_ref(&ones)).unwrap(), 0.29);
    let low = DepthImage::filled(4, 4, 0.95);
    check("crr 0.04", metrics::crr(&low, &ones, 0.04).unwrap(), 0.0);
    check("crr 0.06", metrics::crr(&low, &ones, 0.06).unwrap(), 1.0);
    check("crr tau 0", metrics::crr(&ones, &ones, 0.0).unwrap(), 0.0);
    // 3 / 20 and 15 / 100 round to the same double, so tau = 0.15 must fail
    let (far, off) = (DepthImage::filled(4, 4, 20.0), DepthImage::filled(4, 4, 23.0));
    check("auc rel-err 0.15", metrics::auc_crr(&[off], &[far]).unwrap(), 0.14);
    let half = DepthImage::filled(4, 4, 1.5);
    check("auc rel-err 0.5", metrics::auc_crr(&[half], &[ones]).unwrap(), 0.0);
    let row = |v: [u8; 4]| LabelMap::new(1, 4, v.to_vec()).unwrap();
    check("iou half vs quarter", metrics::iou(&row([1, 1, 0, 0]), &row([1, 0, 0, 0]), 1).unwrap().unwrap(), 0.5);

    let pass = bad.is_empty();
    let detail = if pass {
        format!("200 random 8x8 pairs and hand values, worst deviation {worst:.1e}")
    } else {
        bad.join("; ")
    };
    outcome(pass, detail)
}

// ---------------------------------------------------------------- 5, 6, 7

struct Data {
    _dir: tempfile::TempDir,
    manifest: PairManifest,
    bounds: Bounds,
    spec_train: Tensor<f32>,
    spec_test: Tensor<f32>,
}

const AUDIO_SIZE: usize = 64;
const VISUAL_SIZE: usize = 32;
const MANIFOLD_STEPS: u64 = 600;
const AT_STEPS: u64 = 1000;
const SEEDS: [u64; 3] = [1, 2, 3];

fn make_data() -> Data {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        train: 256,
        val: 0,
        test: 64,
        mics: 4,
        ..SynthConfig::default()
    };
    let manifest = synth_generate(&cfg, 1, dir.path()).unwrap();
    let pipe = pipeline();
    let tr = manifest.entries_for(Split::Train, Modality::Depth);
    let te = manifest.entries_for(Split::Test, Modality::Depth);
    let spec_train = load_spectrograms(&manifest, &tr, &pipe).unwrap();
    let spec_test = load_spectrograms(&manifest, &te, &pipe).unwrap();
    let bounds = manifest.header.depth_bounds;
    Data {
        _dir: dir,
        manifest,
        bounds,
        spec_train,
        spec_test,
    }
}

fn pipeline() -> AudioPipeline {
    AudioPipeline {
        size: AUDIO_SIZE,
        ..AudioPipeline::default()
    }
}

fn train_config(steps: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        max_steps: steps,
        batch_size: 16,
        lr: 1e-3,
        eval_every: 100,
        patience: 1000,
        seed,
        ..TrainConfig::default()
    }
}

fn fit_manifold(config: &VqConfig, data: &Tensor<f32>, bounds: Option<Bounds>, steps: u64, seed: u64) -> (VqModel, TrainState) {
    let mut model = VqModel::new(config, seed).unwrap();
    model.depth_bounds = bounds;
    let tc = train_config(steps, seed);
    let mut adam = AdamState::new(default_adam(tc.lr), &model.store);
    let mut state = TrainState::default();
    vq::train_vqvae(&mut model, data, &tc, &mut adam, &mut state, |_, _, _| Ok(true)).unwrap();
    (model, state)
}

fn at_config(d: &Data, code_dim: usize) -> AtNetConfig {
    AtNetConfig {
        input_channels: d.spec_train.shape()[1],
        input_size: AUDIO_SIZE,
        resnet_width: 8,
        mlp_hidden: [128, 256],
        start_channels: 64,
        latent_size: 8,
        code_dim,
        ..AtNetConfig::default()
    }
}

fn fit_atnet(d: &Data, manifold: &VqModel, visual: &Tensor<f32>, seed: u64) -> AtNet {
    let mut at = AtNet::new(&at_config(d, manifold.config().code_dim), manifold.info(), seed).unwrap();
    let tc = train_config(AT_STEPS, seed);
    let mut adam = AdamState::new(default_adam(tc.lr), &at.store);
    let mut state = TrainState::default();
    train_atnet(&mut at, manifold, &d.spec_train, visual, &tc, &mut adam, &mut state, |_, _, _| Ok(true)).unwrap();
    at
}

fn depth_images(t: &Tensor<f32>, b: Bounds) -> Vec<DepthImage> {
    let s = t.shape()[2];
    (0..t.shape()[0])
        .map(|i| DepthImage::new(s, s, t.item_slice(i).iter().map(|&v| b.denormalize(v as f64) as f32).collect()).unwrap())
        .collect()
}

fn visual_config(modality: Modality, num_classes: usize, variant: ManifoldVariant) -> VqConfig {
    VqConfig {
        modality,
        num_classes,
        variant,
        image_size: VISUAL_SIZE,
        latent_size: 8,
        first_features: 16,
        hidden_features: 32,
        ..VqConfig::default()
    }
}

fn criterion_vq_training(d: &Data) -> Outcome {
    let entries = d.manifest.entries_for(Split::Train, Modality::Depth);
    let data = load_depth_tensor(&d.manifest, &entries, 64).unwrap();
    let config = VqConfig {
        image_size: 64,
        latent_size: 8,
        first_features: 8,
        hidden_features: 16,
        ..VqConfig::default()
    };
    let t = Instant::now();
    let (model, state) = fit_manifold(&config, &data, Some(d.bounds), 2000, 1);
    let secs = t.elapsed().as_secs_f64();
    let (first, last) = (state.first_loss.unwrap(), state.final_loss().unwrap());
    let rec = model.reconstruct(&data).unwrap();
    let mae = rec.data().iter().zip(data.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / data.len() as f64;
    outcome(
        state.step == 2000 && last < 0.25 * first && mae < 0.05 && secs <= 900.0,
        format!(
            "loss {first:.4} -> {last:.4} (ratio {:.4} < 0.25), train MAE {mae:.4} (< 0.05), {secs:.0} s (<= 900)",
            last / first
        ),
    )
}

struct SeedResult {
    vq_abs_rel: f64,
    vae_abs_rel: f64,
    e2e_abs_rel: f64,
    baseline_abs_rel: f64,
    miou: f64,
    majority_miou: f64,
    learnability_secs: f64,
    ablation_secs: f64,
}

fn run_seed(d: &Data, seed: u64) -> SeedResult {
    let m = &d.manifest;
    let tr = m.entries_for(Split::Train, Modality::Depth);
    let te = m.entries_for(Split::Test, Modality::Depth);
    let depth = load_depth_tensor(m, &tr, VISUAL_SIZE).unwrap();
    let gt = depth_images(&load_depth_tensor(m, &te, VISUAL_SIZE).unwrap(), d.bounds);
    let abs_rel = |pred: &Tensor<f32>| {
        metrics::depth_metrics(&depth_images(pred, d.bounds), &gt, Denominator::Prediction)
            .unwrap()
            .abs_rel
    };

    let t = Instant::now();
    let vq_cfg = visual_config(Modality::Depth, 1, ManifoldVariant::Vq);
    let (manifold, _) = fit_manifold(&vq_cfg, &depth, Some(d.bounds), MANIFOLD_STEPS, seed);
    let at = fit_atnet(d, &manifold, &depth, seed);
    let vq_abs_rel = abs_rel(&infer(&at, &manifold, &d.spec_test).unwrap().visual);
    let mean = depth.data().iter().map(|&v| d.bounds.denormalize(v as f64)).sum::<f64>() / depth.len() as f64;
    let flat: Vec<DepthImage> = gt.iter().map(|_| DepthImage::filled(VISUAL_SIZE, VISUAL_SIZE, mean as f32)).collect();
    let baseline_abs_rel = metrics::depth_metrics(&flat, &gt, Denominator::Prediction).unwrap().abs_rel;

    // segmentation, scored with the low-IoU exclusion shared between model
    // and majority baseline
    let k = m.num_classes();
    let str_ = m.entries_for(Split::Train, Modality::Segmentation);
    let ste = m.entries_for(Split::Test, Modality::Segmentation);
    let maps = load_label_maps(m, &str_, VISUAL_SIZE).unwrap();
    let refs: Vec<&[u8]> = maps.iter().map(|x| x.data()).collect();
    let seg = one_hot(&refs, k, VISUAL_SIZE, VISUAL_SIZE).unwrap();
    let (seg_manifold, _) = fit_manifold(&visual_config(Modality::Segmentation, k, ManifoldVariant::Vq), &seg, None, MANIFOLD_STEPS, seed);
    let seg_at = fit_atnet(d, &seg_manifold, &seg, seed);
    let spec_seg = load_spectrograms(m, &ste, &pipeline()).unwrap();
    let pred: Vec<LabelMap> = infer(&seg_at, &seg_manifold, &spec_seg)
        .unwrap()
        .class_maps()
        .into_iter()
        .map(|v| LabelMap::new(VISUAL_SIZE, VISUAL_SIZE, v).unwrap())
        .collect();
    let gts = load_label_maps(m, &ste, VISUAL_SIZE).unwrap();
    let majority = *class_histogram(&maps).iter().max_by_key(|e| e.1).unwrap().0;
    let flat_seg: Vec<LabelMap> = gts.iter().map(|_| LabelMap::filled(VISUAL_SIZE, VISUAL_SIZE, majority)).collect();
    let classes: Vec<u8> = (0..k as u8).collect();
    let mut table = IouTable::new();
    table.insert("model".into(), metrics::miou(&pred, &gts, &classes, None).unwrap().per_class_iou);
    table.insert("majority".into(), metrics::miou(&flat_seg, &gts, &classes, None).unwrap().per_class_iou);
    let miou = metrics::miou(&pred, &gts, &classes, Some(&table)).unwrap().miou;
    let majority_miou = metrics::miou(&flat_seg, &gts, &classes, Some(&table)).unwrap().miou;
    let learnability_secs = t.elapsed().as_secs_f64();

    // same total step budget for the single-stage baseline
    let t = Instant::now();
    let mut e2e = E2eModel::new(&at_config(d, vq_cfg.code_dim), &vq_cfg, seed).unwrap();
    let tc = train_config(MANIFOLD_STEPS + AT_STEPS, seed);
    let mut adam = AdamState::new(default_adam(tc.lr), &e2e.store);
    let mut state = TrainState::default();
    train_e2e(&mut e2e, &d.spec_train, &depth, &tc, &mut adam, &mut state, |_, _, _| Ok(true)).unwrap();
    let e2e_abs_rel = abs_rel(&e2e.predict(&d.spec_test).unwrap());

    let vae_cfg = visual_config(Modality::Depth, 1, ManifoldVariant::Vae);
    let (vae, _) = fit_manifold(&vae_cfg, &depth, Some(d.bounds), MANIFOLD_STEPS, seed);
    let vae_at = fit_atnet(d, &vae, &depth, seed);
    let vae_abs_rel = abs_rel(&infer(&vae_at, &vae, &d.spec_test).unwrap().visual);
    let ablation_secs = t.elapsed().as_secs_f64();

    eprintln!(
        "  seed {seed}: abs_rel vq {vq_abs_rel:.4} vae {vae_abs_rel:.4} e2e {e2e_abs_rel:.4} baseline {baseline_abs_rel:.4}; \
         miou {miou:.4} majority {majority_miou:.4}"
    );
    SeedResult {
        vq_abs_rel,
        vae_abs_rel,
        e2e_abs_rel,
        baseline_abs_rel,
        miou,
        majority_miou,
        learnability_secs,
        ablation_secs,
    }
}

fn mean(rs: &[SeedResult], f: impl Fn(&SeedResult) -> f64) -> f64 {
    rs.iter().map(f).sum::<f64>() / rs.len() as f64
}

fn criterion_learnability(rs: &[SeedResult], setup_secs: f64) -> Outcome {
    let (model, base) = (mean(rs, |r| r.vq_abs_rel), mean(rs, |r| r.baseline_abs_rel));
    let (miou, maj) = (mean(rs, |r| r.miou), mean(rs, |r| r.majority_miou));
    let secs = setup_secs + rs.iter().map(|r| r.learnability_secs).sum::<f64>();
    outcome(
        model < 0.5 * base && miou - maj >= 0.10 && secs <= 1800.0,
        format!(
            "3-seed mean abs_rel {model:.4} vs baseline {base:.4} (ratio {:.3} < 0.5); mIoU {miou:.4} vs majority {maj:.4} \
             (+{:.3} >= 0.10); {secs:.0} s (<= 1800)",
            model / base,
            miou - maj
        ),
    )
}

fn criterion_ablation(rs: &[SeedResult]) -> Outcome {
    let (vq, e2e, vae) = (mean(rs, |r| r.vq_abs_rel), mean(rs, |r| r.e2e_abs_rel), mean(rs, |r| r.vae_abs_rel));
    let secs: f64 = rs.iter().map(|r| r.ablation_secs).sum();
    outcome(
        vq < e2e,
        format!(
            "3-seed mean abs_rel at {} steps: two-stage vq {vq:.4} vs e2e {e2e:.4} (vae {vae:.4}, reported only); {secs:.0} s",
            MANIFOLD_STEPS + AT_STEPS
        ),
    )
}

// ---------------------------------------------------------------- 8

fn sonovis(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_sonovis"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn smoke_run(root: &Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let manifest = p("data/manifest.jsonl");
    sonovis(&["gen-synth", "--out", &p("data"), "--seed", "7", "--train", "16", "--val", "0", "--test", "8", "--image-size", "32", "--mics", "2", "--duration", "0.5"])?;
    let visual = ["--image-size", "32", "--latent-size", "8", "--code-dim", "16", "--codebook-size", "16", "--first-features", "4", "--hidden-features", "8", "--residual-blocks", "1"];
    let train = ["--max-steps", "20", "--batch-size", "8", "--lr", "1e-3", "--seed", "3"];
    let mut vq = vec!["train-vqvae", "--manifest", &manifest, "--out"];
    let vq_dir = p("vq");
    vq.push(&vq_dir);
    vq.extend(visual);
    vq.extend(train);
    sonovis(&vq)?;
    let at_dir = p("at");
    let mut at = vec!["train-atnet", "--manifest", &manifest, "--vq", &vq_dir, "--out", &at_dir];
    at.extend(["--latent-size", "8", "--code-dim", "16", "--resnet-width", "4", "--mlp-hidden", "16,16", "--start-channels", "16"]);
    at.extend(["--window-sec", "0.5", "--mels", "64", "--size", "32"]);
    at.extend(train);
    sonovis(&at)?;
    let pred = p("pred");
    sonovis(&["infer", "--model", &at_dir, "--vq", &vq_dir, "--manifest", &manifest, "--out", &pred])?;
    sonovis(&["evaluate", "--predictions", &pred, "--ground-truth", &p("data/depth")])?;
    let read = |f: &str| std::fs::read(root.join("pred").join(f)).map_err(|e| format!("{f}: {e}"));
    Ok((read("report.json")?, read("report.txt")?))
}

fn criterion_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let runs = (smoke_run(&dir.path().join("a")), smoke_run(&dir.path().join("b")));
    match runs {
        (Ok(a), Ok(b)) => outcome(
            a == b,
            format!("two seeded CLI runs, report.json {} bytes and report.txt identical: {}", a.0.len(), a == b),
        ),
        (Err(e), _) | (_, Err(e)) => outcome(false, e),
    }
}

// ---------------------------------------------------------------- 9

fn oracle_frame_magnitude(freq: f64, sr: f64, len: usize) -> Vec<f64> {
    let frame: Vec<f64> = (0..len)
        .map(|n| (0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos()) * 0.5 * (2.0 * PI * freq * n as f64 / sr).sin())
        .collect();
    (0..=len / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, x) in frame.iter().enumerate() {
                let a = -2.0 * PI * ((k * n) % len) as f64 / len as f64;
                re += x * a.cos();
                im += x * a.sin();
            }
            (re * re + im * im).sqrt()
        })
        .collect()
}

fn oracle_mel(mag: &[f64], bins: usize, sr: f64, len: usize) -> Vec<f64> {
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let edge = |i: usize| inv(mel(sr / 2.0) * i as f64 / (bins + 1) as f64);
    (0..bins)
        .map(|k| {
            let (lo, c, hi) = (edge(k), edge(k + 1), edge(k + 2));
            mag.iter()
                .enumerate()
                .map(|(j, m)| {
                    let f = j as f64 * sr / len as f64;
                    let w = if f > lo && f <= c {
                        (f - lo) / (c - lo)
                    } else if f > c && f < hi {
                        (hi - f) / (hi - c)
                    } else {
                        0.0
                    };
                    w * m
                })
                .sum()
        })
        .collect()
}

fn argmax(v: impl Iterator<Item = f64>) -> usize {
    v.enumerate().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0
}

fn criterion_dsp() -> Outcome {
    let mut bad = Vec::new();
    let mut shapes = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // (input rate, channels, seconds, window, hop, mels, scale, log)
    let configs = [
        (22_050u32, 8usize, 2.0, 2048usize, 256usize, 256usize, SpectrumScale::Magnitude, true),
        (44_100, 4, 1.0, 2048, 256, 256, SpectrumScale::Magnitude, true),
        (16_000, 1, 3.0, 1024, 128, 128, SpectrumScale::Power, false),
        (22_050, 2, 1.5, 512, 64, 64, SpectrumScale::Power, true),
        (8_000, 3, 1.0, 2048, 512, 300, SpectrumScale::Magnitude, false),
    ];
    for (rate, ch, secs, win, hop, mels, scale, log) in configs {
        let len = (rate as f64 * secs) as usize;
        let chans: Vec<Vec<f32>> = (0..ch).map(|_| (0..len).map(|_| rng.random_range(-0.5..0.5)).collect()).collect();
        let clip = AudioClip::new(chans, rate).unwrap();
        let p = AudioPipeline {
            window_seconds: 1.0,
            mel: MelParams {
                window_length: win,
                hop_length: hop,
                mel_bins: mels,
                sample_rate: 22_050,
                scale,
                log_compress: log,
            },
            size: 128,
        };
        let out = p.process(&clip).unwrap();
        let want_segments = secs.floor() as usize;
        if out.len() != want_segments || out.iter().any(|t| t.shape() != [ch, 128, 128]) {
            bad.push(format!("{rate} Hz x{ch}: {} segments of {:?}", out.len(), out.first().map(|t| t.shape().to_vec())));
        }
        shapes += 1;
    }

    let params = MelParams::default();
    let sr = params.sample_rate as f64;
    let bin_hz = sr / params.window_length as f64;
    // bins whose rising slope spans at least two FFT bins
    let candidates: Vec<usize> = (1..params.mel_bins)
        .filter(|&k| {
            mel_center_hz(k, params.mel_bins, params.sample_rate) - mel_center_hz(k - 1, params.mel_bins, params.sample_rate)
                >= 2.0 * bin_hz
        })
        .collect();
    let mut tested = Vec::new();
    for _ in 0..10 {
        let k = candidates[rng.random_range(0..candidates.len())];
        let f = mel_center_hz(k, params.mel_bins, params.sample_rate);
        let oracle = argmax(oracle_mel(&oracle_frame_magnitude(f, sr, params.window_length), params.mel_bins, sr, params.window_length).into_iter());
        let x: Vec<f32> = (0..sr as usize).map(|n| (0.5 * (2.0 * PI * f * n as f64 / sr).sin()) as f32).collect();
        let s = mel_spectrogram(&x, params.sample_rate, params).unwrap();
        let (t, w) = (s.frames(), s.bins());
        let got = argmax((0..w).map(|b| (0..t).map(|fr| s.values.data()[fr * w + b] as f64).sum::<f64>()));
        if got != k || oracle != k {
            bad.push(format!("bin {k} ({f:.0} Hz): pipeline {got}, oracle {oracle}"));
        }
        tested.push(k);
    }
    let pass = bad.is_empty();
    outcome(
        pass,
        if pass {
            format!("{shapes} front-end configs give N x 128 x 128; sine peaks at its mel bin for bins {tested:?}")
        } else {
            bad.join("; ")
        },
    )
}

// ----------------------------------------------------------------

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        println!("{} [{n}] {name}: {} ({secs:.1} s)", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o, secs));
    };

    if on(1) {
        run(1, "gradient check", &mut || {
            let t = Instant::now();
            let o = criterion_gradients();
            let s = t.elapsed().as_secs_f64();
            outcome(o.pass && s < 60.0, format!("{}; {s:.1} s (< 60)", o.detail))
        });
    }
    if on(2) {
        run(2, "quantizer oracle", &mut || {
            let t = Instant::now();
            let o = criterion_quantizer();
            let s = t.elapsed().as_secs_f64();
            outcome(o.pass && s < 5.0, format!("{}; {s:.2} s (< 5)", o.detail))
        });
    }
    if on(3) {
        run(3, "straight-through", &mut criterion_straight_through);
    }
    if on(4) {
        run(4, "metric oracle", &mut criterion_metrics);
    }
    let needs_data = on(5) || on(6) || on(7);
    let t = Instant::now();
    let data = needs_data.then(make_data);
    let setup_secs = t.elapsed().as_secs_f64();
    if let Some(d) = &data {
        if on(5) {
            run(5, "vq-vae training", &mut || criterion_vq_training(d));
        }
        if on(6) || on(7) {
            let seeds: Vec<SeedResult> = SEEDS.iter().map(|&s| run_seed(d, s)).collect();
            if on(6) {
                run(6, "two-stage learnability", &mut || criterion_learnability(&seeds, setup_secs));
            }
            if on(7) {
                run(7, "ablation direction", &mut || criterion_ablation(&seeds));
            }
        }
    }
    if on(8) {
        run(8, "cli determinism", &mut criterion_determinism);
    }
    if on(9) {
        run(9, "dsp contract", &mut criterion_dsp);
    }

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        if std::env::var_os("ACCEPTANCE_STRICT").is_some_and(|v| v != "0") {
            std::process::exit(1);
        }
    }
}
