use gvr_core::attention::{AttentionMode, TemporalUnitPlan};
use gvr_core::autodiff::Tape;
use gvr_core::flow::{
    build_detail_aware_sampler, cfm_loss, ode_sample_traced, velocity_target, DetailAwareOptions, OracleLinearVelocity,
};
use gvr_core::rng::randn;
use gvr_core::{Error, Rng, Tensor};
use gvr_model::extend::{apply_extension, ExtensionPlan};
use gvr_model::infer::infer_watched;
use gvr_model::net::{build, from_tokens, to_tokens, token_loss, NetInputs, TapeParams};
use gvr_model::*;

fn small(mode: AttentionMode) -> GvrConfig {
    let mut cfg = GvrConfig {
        width: 16,
        heads: 2,
        depth: 2,
        ..GvrConfig::default()
    };
    cfg.attention.mode = mode;
    cfg.attention.window = (2, 2);
    cfg
}

fn randomized(cfg: &GvrConfig, seed: u64) -> GvrModel {
    let mut m = GvrModel::new(cfg.clone(), seed).unwrap();
    let mut rng = Rng::new(seed, 9);
    for p in m.params.tensors_mut() {
        let noise = randn::<f32>(&mut rng, p.shape()).unwrap().scale(0.2);
        *p = p.add(&noise).unwrap();
    }
    m
}

struct Case {
    z0: Tensor<f64>,
    eps: Tensor<f64>,
    c_aug: Tensor<f64>,
    text: Tensor<f64>,
    t: f64,
    a: f64,
}

fn case(cfg: &GvrConfig, frames: usize, h: usize, w: usize, seed: u64) -> Case {
    let mut rng = Rng::new(seed, 0);
    let cl = cfg.latent_channels();
    let up = cfg.upsample;
    Case {
        z0: randn(&mut rng, &[frames, cl, h, w]).unwrap(),
        eps: randn(&mut rng, &[frames, cl, h, w]).unwrap(),
        c_aug: randn(&mut rng, &[frames, cl, h / up, w / up]).unwrap(),
        text: randn(&mut rng, &[cfg.text_dim]).unwrap(),
        t: 0.37,
        a: 0.45,
    }
}

fn loss_f64(cfg: &GvrConfig, names: &[String], params: &[Tensor<f64>], c: &Case, grads: bool) -> (f64, Vec<Tensor<f64>>) {
    let mut tape = Tape::<f64>::new();
    let p = TapeParams::record_cast(&mut tape, names, params.iter().cloned(), true);
    let z_t = c.z0.lerp_with(1.0 - c.t, &c.eps, c.t).unwrap();
    let inputs = NetInputs {
        z_t,
        t: c.t,
        c_aug: c.c_aug.clone(),
        aug_level: c.a,
        text: c.text.clone(),
    };
    let v = build(&mut tape, cfg, &p, &inputs).unwrap();
    let target = to_tokens(&c.eps.sub(&c.z0).unwrap()).unwrap();
    let loss = token_loss(&mut tape, v, &target).unwrap();
    let value = tape.value(loss).data()[0];
    if !grads {
        return (value, Vec::new());
    }
    let g = tape.backward(loss).unwrap();
    let out = p.vars().iter().zip(params).map(|(&v, t)| g.get_or_zeros(v, t)).collect();
    (value, out)
}

fn gradient_check(mode: AttentionMode) {
    let cfg = small(mode);
    let model = randomized(&cfg, 11);
    let names = model.params.names().to_vec();
    let params: Vec<Tensor<f64>> = model.params.tensors().iter().map(|t| t.cast()).collect();
    let c = case(&cfg, 2, 4, 4, 5);
    let (_, grads) = loss_f64(&cfg, &names, &params, &c, true);
    let h = 1e-3;
    let mut rng = Rng::new(77, 0);
    let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
    for (gi, name) in names.iter().enumerate() {
        let n = params[gi].numel();
        let mut coords: Vec<usize> = (0..3).map(|_| rng.index(n)).collect();
        coords.push(grads[gi].data().iter().enumerate().fold(0, |best, (i, v)| {
            if v.abs() > grads[gi].data()[best].abs() {
                i
            } else {
                best
            }
        }));
        for i in coords {
            let eval = |delta: f64| {
                let mut ps = params.clone();
                let mut d = ps[gi].to_vec();
                d[i] += delta;
                ps[gi] = Tensor::new(ps[gi].shape().to_vec(), d).unwrap();
                loss_f64(&cfg, &names, &ps, &c, false).0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = grads[gi].data()[i];
            if fd.abs().max(an.abs()) < 1e-7 {
                continue;
            }
            assert!(rel(fd, an) <= 1e-3, "{mode:?} {name}[{i}]: fd {fd} vs tape {an}");
        }
        // Directional derivative along a random unit direction of the whole
        // group, short enough not to change which windows sparse attention picks.
        let dir = randn::<f64>(&mut rng, params[gi].shape()).unwrap();
        let dir = dir.scale(1.0 / dir.sq_norm().sqrt());
        let eval = |s: f64| {
            let mut ps = params.clone();
            ps[gi] = ps[gi].lerp_with(1.0, &dir, s).unwrap();
            loss_f64(&cfg, &names, &ps, &c, false).0
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let an: f64 = grads[gi].data().iter().zip(dir.data()).map(|(g, d)| g * d).sum();
        assert!(rel(fd, an) <= 1e-3, "{mode:?} {name} directional: fd {fd} vs tape {an}");
    }
}

#[test]
fn gradients_match_finite_differences_full() {
    gradient_check(AttentionMode::Full);
}

#[test]
fn gradients_match_finite_differences_swin() {
    gradient_check(AttentionMode::Swin);
}

#[test]
fn gradients_match_finite_differences_sparse() {
    gradient_check(AttentionMode::SparseLocal);
}

#[test]
fn output_shape_matches_latent_for_random_configs() {
    let mut rng = Rng::new(21, 0);
    for trial in 0..5 {
        let heads = [1, 2, 4][rng.index(3)];
        let mut cfg = GvrConfig {
            width: heads * (2 + rng.index(4)),
            heads,
            depth: 2 * (1 + rng.index(2)),
            ..GvrConfig::default()
        };
        cfg.attention.mode = [AttentionMode::Full, AttentionMode::Swin, AttentionMode::SparseLocal][trial % 3];
        cfg.attention.window = (1 + rng.index(3), 1 + rng.index(3));
        let model = randomized(&cfg, trial as u64);
        let (f, h, w) = (1 + rng.index(3), 2 * (1 + rng.index(3)), 2 * (1 + rng.index(3)));
        let z = randn::<f32>(&mut rng, &[f, cfg.latent_channels(), h, w]).unwrap();
        let c = randn::<f32>(&mut rng, &[f, cfg.latent_channels(), h / 2, w / 2]).unwrap();
        let cond = Conditioning {
            c_aug: c,
            aug_level: 0.5,
            text: None,
        };
        assert_eq!(model.forward(&z, 0.5, &cond).unwrap().shape(), z.shape());
    }
}

#[test]
fn zero_initialized_output_gives_baseline_loss() {
    let cfg = small(AttentionMode::Full);
    let model = GvrModel::new(cfg.clone(), 1).unwrap();
    let mut rng = Rng::new(3, 0);
    let z0 = randn::<f32>(&mut rng, &[2, cfg.latent_channels(), 4, 4]).unwrap();
    let eps = randn::<f32>(&mut rng, z0.shape()).unwrap();
    let cond = Conditioning {
        c_aug: randn::<f32>(&mut rng, &[2, cfg.latent_channels(), 2, 2]).unwrap(),
        aug_level: 0.3,
        text: None,
    };
    let loss = cfm_loss(&model, &z0, &eps, 0.6, &cond).unwrap();
    let target = velocity_target(&z0, &eps).unwrap();
    let baseline = target.sq_norm() / target.numel() as f64;
    assert!((loss - baseline).abs() < 1e-9, "{loss} vs {baseline}");
}

fn tiny_data(clips: usize, frames: usize, size: usize, cfg: &GvrConfig) -> Vec<TrainPair> {
    let spec = DatasetSpec {
        clips,
        frames,
        height: size,
        width: size,
        seed: 4,
    };
    synthetic_pairs(&spec, cfg.upsample, cfg.codec, cfg.text_dim, &PairDegradation::OneOrder).unwrap()
}

#[test]
fn training_is_deterministic_and_worker_invariant() {
    let cfg = small(AttentionMode::SparseLocal);
    let data = tiny_data(4, 5, 32, &cfg);
    let tc = TrainConfig {
        steps: 6,
        batch: 3,
        ..TrainConfig::default()
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut m = GvrModel::new(cfg.clone(), 2).unwrap();
            let r = train(&mut m, &data, &tc, 0).unwrap();
            (r, m.params.digest())
        })
    };
    let (a, da) = run(1);
    let (b, db) = run(4);
    assert_eq!(a, b);
    assert_eq!(da, db);
    let (c, _) = run(1);
    assert_eq!(a, c);
}

#[test]
fn inference_is_deterministic_with_fixed_condition() {
    let cfg = small(AttentionMode::Full);
    let model = randomized(&cfg, 8);
    let c0 = randn::<f32>(&mut Rng::new(1, 0), &[2, cfg.latent_channels(), 2, 2]).unwrap();
    let a = infer_watched(&model, &c0, 6, 0.45, &mut Rng::new(5, 0), None).unwrap();
    let b = infer_watched(&model, &c0, 6, 0.45, &mut Rng::new(5, 0), None).unwrap();
    assert_eq!(a.latent.shape(), &[2, cfg.latent_channels(), 4, 4]);
    assert_eq!(a, b);
    assert_eq!(a.condition_hashes.len(), 6);
    assert!(a.condition_hashes.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn traces_have_one_entry_per_step_and_ignore_worker_count() {
    let cfg = small(AttentionMode::Full);
    let model = randomized(&cfg, 8);
    let lats: Vec<Tensor> = (0..3)
        .map(|i| randn::<f32>(&mut Rng::new(i, 0), &[1, cfg.latent_channels(), 2, 2]).unwrap())
        .collect();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| collect_trace(&model, &lats, 7, 0.45, 3).unwrap())
    };
    let one = run(1);
    assert!(one.iter().all(|t| t.len() == 7));
    assert_eq!(one, run(4));
}

#[test]
fn oracle_traces_are_degenerate() {
    let mut rng = Rng::new(6, 0);
    let z0 = randn::<f32>(&mut rng, &[2, 3, 8, 8]).unwrap();
    let eps = randn::<f32>(&mut rng, z0.shape()).unwrap();
    let oracle = OracleLinearVelocity::new(&z0, &eps).unwrap();
    let (_, trace) = ode_sample_traced(&oracle, &eps, 10, &()).unwrap();
    for est in &trace {
        assert!(est.max_abs_diff(&z0).unwrap() < 1e-5);
    }
    let err = build_detail_aware_sampler(&[trace], DetailAwareOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Degenerate(_)), "{err}");
}

#[test]
fn extension_reuses_parameters_and_units_are_independent() {
    let mut cfg = small(AttentionMode::SparseLocal);
    cfg.cond_kernel = [1, 3, 3];
    let mut model = randomized(&cfg, 12);
    let before = model.parameter_count();
    let digest = model.params.digest();
    apply_extension(&mut model, ExtensionPlan::default()).unwrap();
    assert_eq!(model.parameter_count(), before);
    assert_eq!(model.params.digest(), digest);

    model.config.attention.temporal = TemporalUnitPlan::new(5).unwrap().without_shift();
    let (h, w) = (4, 4);
    let mut rng = Rng::new(13, 0);
    let z = randn::<f32>(&mut rng, &[20, cfg.latent_channels(), h, w]).unwrap();
    let c = randn::<f32>(&mut rng, &[20, cfg.latent_channels(), h / 2, w / 2]).unwrap();
    let cond = |c: Tensor| Conditioning {
        c_aug: c,
        aug_level: 0.4,
        text: None,
    };
    let whole = model.forward(&z, 0.3, &cond(c.clone())).unwrap();
    let parts: Vec<Tensor> = (0..4)
        .map(|u| {
            let zu = z.slice_outer(5 * u, 5).unwrap();
            let cu = c.slice_outer(5 * u, 5).unwrap();
            model.forward(&zu, 0.3, &cond(cu)).unwrap()
        })
        .collect();
    let stitched = Tensor::concat_outer(&parts).unwrap();
    assert!(whole.max_abs_diff(&stitched).unwrap() < 1e-5);
}

#[test]
fn extension_rejects_short_clips() {
    let cfg = small(AttentionMode::Full);
    let data = tiny_data(1, 5, 32, &cfg);
    let mut model = GvrModel::new(cfg, 0).unwrap();
    let plan = ExtensionPlan {
        unit: 5,
        ..ExtensionPlan::default()
    };
    // Two latent frames from five source frames.
    assert!(extend_temporal(&mut model, plan, &data, &TrainConfig::default(), 0).is_err());
}

#[test]
fn attention_modes_agree_when_windows_cover_the_frame() {
    let mut cfg = small(AttentionMode::Full);
    cfg.attention.window = (4, 4);
    cfg.attention.top_k = 0;
    let base = randomized(&cfg, 14);
    let mut rng = Rng::new(15, 0);
    let z = randn::<f32>(&mut rng, &[1, cfg.latent_channels(), 4, 4]).unwrap();
    let cond = Conditioning {
        c_aug: randn::<f32>(&mut rng, &[1, cfg.latent_channels(), 2, 2]).unwrap(),
        aug_level: 0.5,
        text: None,
    };
    let reference = base.forward(&z, 0.4, &cond).unwrap();
    for mode in [AttentionMode::Swin, AttentionMode::SparseLocal] {
        let mut m = base.clone();
        m.config.attention.mode = mode;
        let out = m.forward(&z, 0.4, &cond).unwrap();
        assert!(out.max_abs_diff(&reference).unwrap() < 1e-4, "{mode:?}");
    }
}

#[test]
fn checkpoint_round_trip() {
    let cfg = small(AttentionMode::Swin);
    let model = randomized(&cfg, 16);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.gvrm");
    save_checkpoint(&model, 42, &path).unwrap();
    let (back, step) = load_checkpoint(&path).unwrap();
    assert_eq!(step, 42);
    assert_eq!(back, model);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, bytes).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn token_helpers_are_inverse() {
    let x = randn::<f32>(&mut Rng::new(0, 0), &[3, 4, 2, 5]).unwrap();
    assert_eq!(from_tokens(&to_tokens(&x).unwrap(), 3, 2, 5).unwrap(), x);
}

#[test]
fn extension_fine_tuning_reduces_loss_on_long_clips() {
    let cfg = small(AttentionMode::Full);
    let data = tiny_data(2, 21, 32, &cfg);
    let mut model = GvrModel::new(cfg, 0).unwrap();
    let plan = ExtensionPlan {
        unit: 3,
        ..ExtensionPlan::default()
    };
    let tc = TrainConfig {
        steps: 60,
        batch: 2,
        ..TrainConfig::default()
    };
    let losses = extend_temporal(&mut model, plan, &data, &tc, 0).unwrap().losses();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&losses[..15]), mean(&losses[45..]));
    assert!(last < 0.8 * first, "{first} -> {last}");
}
