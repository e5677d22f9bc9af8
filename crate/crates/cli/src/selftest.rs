//! Executable versions of the small documented examples of every module.

use std::fs;
use std::path::PathBuf;

use gvr_core::attention::{
    count_flops, full_attention, interleaved_temporal_wrap, sparse_local_attention, swin_attention, AttentionConfig,
    AttentionMode, GridLayout, TemporalUnitPlan, TokenGrid, WindowPartition,
};
use gvr_core::autodiff::Tape;
use gvr_core::codec::{decode, encode, upsample_condition, CodecDescriptor, Latent};
use gvr_core::conv::{conv2d, conv3d, Conv3dSpec};
use gvr_core::curation::{curate_clip, CurationConfig};
use gvr_core::dct::{dct2d, idct2d};
use gvr_core::degrade::{
    blend_colors, degrade_clip, estimate_flow, motion_blur, motion_mask, sample_ellipses, DegradeParams,
    EllipseParams, EllipseSpec,
};
use gvr_core::flow::{
    add_noise, apply_noise_augmentation, build_detail_aware_sampler, cfm_loss, ode_sample, ode_sample_traced,
    predict_clean, sample_timestep, sdedit_degrade, sdedit_degrade_with_noise, velocity_target,
    ContractiveToyVelocity, DetailAwareOptions, NoiseAugmentation, OracleLinearVelocity, TimestepDistribution,
    ZeroVelocity,
};
use gvr_core::media::{emit_curve, emit_report, polyline_points, read_clip, write_clip, Clip, Report};
use gvr_core::resample::bilinear_resize;
use gvr_core::rng::randn;
use gvr_core::{Error, Rng, Tensor};
use gvr_model::data::PairDegradation;
use gvr_model::extend::apply_extension;
use gvr_model::infer::infer;
use gvr_model::{collect_trace, synthetic_pairs, train, Conditioning, DatasetSpec, ExtensionPlan, GvrConfig, GvrModel, TrainConfig};

use crate::commands::{bench_attn, BenchArgs};
use crate::config::PipelineConfig;

type Check = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T>(r: gvr_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn close(a: &Tensor, b: &Tensor, tol: f32, what: &str) -> Check {
    let d = ok(a.max_abs_diff(b))?;
    ensure(d <= tol, || format!("{what}: max abs difference {d:e} > {tol:e}"))
}

fn bitwise(a: &Tensor, b: &Tensor, what: &str) -> Check {
    ensure(
        a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()),
        || format!("{what}: not bit-identical"),
    )
}

fn rand(seed: u64, shape: &[usize]) -> Tensor {
    randn(&mut Rng::new(seed, 0), shape).expect("valid shape")
}

fn unit_rand(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = Rng::new(seed, 0);
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform() as f32)
}

fn grid(seed: u64, frames: usize, h: usize, w: usize, d: usize) -> TokenGrid {
    TokenGrid::new(rand(seed, &[frames * h * w, d]), frames, h, w).expect("grid shape")
}

/// A scratch directory removed on drop.
struct Scratch(PathBuf);

impl Scratch {
    fn new(name: &str) -> Result<Self, String> {
        let dir = std::env::temp_dir().join(format!("gvr-selftest-{}-{name}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        Ok(Self(dir))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.0);
    }
}

fn textured_frame(seed: u64, h: usize, w: usize) -> Tensor {
    let mut rng = Rng::new(seed, 9);
    let phases: Vec<f32> = (0..6).map(|_| rng.uniform_in(0.0, 6.28) as f32).collect();
    Tensor::from_fn(vec![h, w, 3], |i| {
        let (p, c) = (i / 3, i % 3);
        let (y, x) = ((p / w) as f32, (p % w) as f32);
        0.5 + 0.2 * (0.45 * x + phases[c]).sin() * (0.3 * y + phases[c + 3]).cos() + 0.1 * (0.2 * (x + y)).sin()
    })
}

fn tiny_model_config() -> GvrConfig {
    GvrConfig {
        width: 16,
        heads: 2,
        depth: 2,
        ..GvrConfig::default()
    }
}

fn tiny_data() -> Result<Vec<gvr_model::TrainPair>, String> {
    let spec = DatasetSpec {
        clips: 2,
        frames: 5,
        height: 32,
        width: 32,
        seed: 3,
    };
    let cfg = tiny_model_config();
    ok(synthetic_pairs(&spec, cfg.upsample, cfg.codec, cfg.text_dim, &PairDegradation::OneOrder))
}

fn tiny_latents(n: usize) -> Vec<Tensor> {
    (0..n).map(|i| rand(40 + i as u64, &[2, 768, 2, 2]).scale(0.5)).collect()
}

pub struct SelfTest {
    pub name: &'static str,
    pub run: fn() -> Check,
}

macro_rules! tests {
    ($($name:ident),* $(,)?) => {
        &[$(SelfTest { name: stringify!($name), run: $name }),*]
    };
}

pub const TESTS: &[SelfTest] = tests![
    rng_same_seed_is_bit_identical,
    dct_of_constant_frame_is_dc_only,
    dct_round_trip,
    bilinear_of_constant_is_constant,
    bilinear_identity_size_is_bit_identical,
    conv_delta_kernel_is_identity,
    conv_box_kernel_keeps_constant,
    grad_of_sum_is_ones,
    grad_of_sum_of_squares,
    clip_write_read_quantization_bound,
    frame_directory_of_17_frames,
    y4m_c444_read_c420_rejected,
    report_two_rows_is_three_lines,
    curve_of_monotone_series_is_monotone,
    report_bytes_repeat,
    flow_of_identical_frames_is_zero,
    zero_flow_mask_is_empty,
    uniform_fast_flow_mask_is_full,
    empty_mask_has_no_ellipses,
    ellipse_centers_lie_on_mask,
    blend_without_ellipses_is_identity,
    blend_of_constant_frames_is_constant,
    blur_with_zero_flow_is_identity,
    blur_of_constant_frame_is_constant,
    degrade_static_clip_is_identity,
    degrade_single_frame_is_rejected,
    codec_round_trip_is_bitwise,
    codec_rejects_16_frames,
    upsample_identity_size,
    upsample_constant_latent,
    noising_endpoints_and_midpoint,
    oracle_cfm_loss_is_zero,
    cfm_loss_is_non_negative,
    clean_estimate_identities,
    oracle_sampling_is_exact,
    zero_velocity_sampling_is_identity,
    sdedit_alpha_zero_is_identity,
    sdedit_with_oracle_restores_latent,
    point_mass_sampler,
    detail_aware_sampler_sums_to_one,
    constant_trace_is_degenerate,
    zero_noise_augmentation,
    attention_single_token,
    attention_constant_keys_average_values,
    swin_frame_window_equals_full,
    swin_shift_round_trip,
    sparse_saturated_equals_full,
    sparse_top0_equals_swin,
    single_temporal_unit_is_noop,
    temporal_shift_round_trip,
    flops_full_equals_saturated_sparse,
    flops_quadratic_in_tokens,
    bench_rows_and_analytic_columns,
    model_output_shape,
    zero_init_model_loss_baseline,
    training_repeats_exactly,
    inference_shape_and_repeatability,
    traces_length_and_worker_invariance,
    oracle_trace_is_degenerate,
    extension_keeps_parameter_count,
    curation_rejects_black_and_gray,
];

fn rng_same_seed_is_bit_identical() -> Check {
    bitwise(&rand(3, &[4, 5]), &rand(3, &[4, 5]), "randn")
}

fn dct_of_constant_frame_is_dc_only() -> Check {
    let (h, w, c) = (6, 8, 0.37f32);
    let coeffs = ok(dct2d(&Tensor::full(vec![h, w], c)))?;
    let dc = coeffs.data()[0];
    let expect = c * ((h * w) as f32).sqrt();
    ensure((dc - expect).abs() <= 1e-5 * expect, || format!("DC {dc} != {expect}"))?;
    let ac = coeffs.data()[1..].iter().fold(0.0f32, |m, v| m.max(v.abs()));
    ensure(ac <= 1e-5, || format!("AC coefficient {ac:e}"))
}

fn dct_round_trip() -> Check {
    let x = rand(5, &[8, 8]);
    close(&ok(idct2d(&ok(dct2d(&x))?))?, &x, 1e-5, "idct(dct(x))")
}

fn bilinear_of_constant_is_constant() -> Check {
    let x = Tensor::full(vec![2, 3, 4, 4], 0.3f32);
    let y = ok(bilinear_resize(&x, 7, 5))?;
    close(&y, &Tensor::full(vec![2, 3, 7, 5], 0.3), 1e-6, "resized constant")
}

fn bilinear_identity_size_is_bit_identical() -> Check {
    let x = rand(6, &[2, 3, 4, 5]);
    bitwise(&ok(bilinear_resize(&x, 4, 5))?, &x, "identity resize")
}

fn conv_delta_kernel_is_identity() -> Check {
    let c = 3;
    let x = rand(7, &[c, 4, 5, 6]);
    let kernel = Tensor::from_fn(vec![c, c, 3, 3, 3], |i| {
        let (o, rest) = (i / (c * 27), i % (c * 27));
        let (ci, tap) = (rest / 27, rest % 27);
        if o == ci && tap == 13 {
            1.0
        } else {
            0.0
        }
    });
    let y = ok(conv3d(&x, &kernel, None, ok(Conv3dSpec::same([3, 3, 3]))?))?;
    close(&y, &x, 0.0, "delta conv")
}

fn conv_box_kernel_keeps_constant() -> Check {
    let x = Tensor::full(vec![1, 6, 7], 0.8f32);
    let k = Tensor::full(vec![1, 1, 3, 3], 1.0 / 9.0);
    let y = ok(conv2d(&x, &k, None, [1, 1], [0, 0]))?;
    close(&y, &Tensor::full(vec![1, 4, 5], 0.8), 1e-6, "box filtered constant")
}

fn grad_of_sum_is_ones() -> Check {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(rand(8, &[3, 4]));
    let s = tape.sum(x);
    let g = ok(tape.backward(s))?;
    let gx = g.get(x).ok_or("no gradient")?;
    close(gx, &Tensor::full(vec![3, 4], 1.0), 0.0, "d sum / dx")
}

fn grad_of_sum_of_squares() -> Check {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(ok(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]))?);
    let sq = tape.square(x);
    let s = tape.sum(sq);
    let g = ok(tape.backward(s))?;
    let gx = g.get(x).ok_or("no gradient")?;
    close(gx, &ok(Tensor::new(vec![3], vec![2.0, 4.0, 6.0]))?, 0.0, "d sum(x^2) / dx")
}

fn random_clip(seed: u64, t: usize, h: usize, w: usize) -> Result<Clip, String> {
    ok(Clip::new(unit_rand(seed, &[t, h, w, 3]), 24.0))
}

fn clip_write_read_quantization_bound() -> Check {
    let dir = Scratch::new("io")?;
    let clip = random_clip(9, 3, 6, 8)?;
    for name in ["frames", "clip.y4m"] {
        ok(write_clip(&clip, dir.path(name)))?;
        let back = ok(read_clip(dir.path(name)))?;
        close(back.frames(), clip.frames(), 0.5 / 255.0 + 1e-6, name)?;
    }
    Ok(())
}

fn frame_directory_of_17_frames() -> Check {
    let dir = Scratch::new("dir17")?;
    ok(write_clip(&random_clip(10, 17, 4, 4)?, dir.path("frames")))?;
    ensure(dir.path("frames/0017.ppm").exists(), || "0017.ppm missing".into())?;
    let n = ok(read_clip(dir.path("frames")))?.len();
    ensure(n == 17, || format!("T = {n}"))
}

fn y4m_c444_read_c420_rejected() -> Check {
    let dir = Scratch::new("y4m")?;
    let good = dir.path("good.y4m");
    ok(write_clip(&random_clip(11, 2, 4, 4)?, &good))?;
    let header = fs::read(&good).map_err(|e| e.to_string())?;
    ensure(header.windows(4).any(|w| w == b"C444"), || "header lacks C444".into())?;
    ok(read_clip(&good))?;
    let bad = dir.path("bad.y4m");
    fs::write(&bad, b"YUV4MPEG2 W2 H2 F24:1 C420\nFRAME\n\0\0\0\0\0\0").map_err(|e| e.to_string())?;
    match read_clip(&bad) {
        Err(Error::Unsupported { .. }) => Ok(()),
        other => Err(format!("C420 gave {other:?}")),
    }
}

fn report_two_rows_is_three_lines() -> Check {
    let dir = Scratch::new("report")?;
    let mut r = Report::new(["a", "b"]);
    ok(r.push(["1", "2"]))?;
    ok(r.push(["3", "4"]))?;
    ok(emit_report(&r, dir.path("r.csv")))?;
    let text = fs::read_to_string(dir.path("r.csv")).map_err(|e| e.to_string())?;
    ensure(text == "a,b\n1,2\n3,4\n", || format!("{text:?}"))
}

fn curve_of_monotone_series_is_monotone() -> Check {
    let dir = Scratch::new("curve")?;
    let xs: Vec<f64> = (0..6).map(f64::from).collect();
    let ys: Vec<f64> = xs.iter().map(|x| x * x).collect();
    ok(emit_curve(&xs, &ys, dir.path("c.svg")))?;
    let svg = fs::read_to_string(dir.path("c.svg")).map_err(|e| e.to_string())?;
    let pts = polyline_points(&svg);
    ensure(pts.len() == 6, || format!("{} points", pts.len()))?;
    ensure(pts.windows(2).all(|p| p[1].0 > p[0].0 && p[1].1 < p[0].1), || {
        format!("points not monotone: {pts:?}")
    })
}

fn report_bytes_repeat() -> Check {
    let dir = Scratch::new("repeat")?;
    let mut r = Report::new(["x"]);
    ok(r.push(["0.5"]))?;
    ok(emit_report(&r, dir.path("a.csv")))?;
    ok(emit_report(&r, dir.path("b.csv")))?;
    let read = |n: &str| fs::read(dir.path(n)).map_err(|e| e.to_string());
    ensure(read("a.csv")? == read("b.csv")?, || "bytes differ".into())
}

fn flow_of_identical_frames_is_zero() -> Check {
    let f = textured_frame(12, 40, 48);
    let flow = ok(estimate_flow(&f, &f))?;
    let m = flow.max_abs();
    ensure(m < 0.1, || format!("max |flow| = {m}"))
}

fn uniform_flow(h: usize, w: usize, dx: f32, dy: f32) -> Tensor {
    Tensor::from_fn(vec![h, w, 2], |i| if i % 2 == 0 { dx } else { dy })
}

fn zero_flow_mask_is_empty() -> Check {
    let m = ok(motion_mask(&uniform_flow(9, 7, 0.0, 0.0), 1.5))?;
    ensure(m.is_empty(), || format!("{} masked pixels", m.count()))
}

fn uniform_fast_flow_mask_is_full() -> Check {
    let m = ok(motion_mask(&uniform_flow(9, 7, 0.0, 3.0), 1.5))?;
    ensure(m.count() == 63, || format!("{} masked pixels", m.count()))
}

fn ellipse_params() -> EllipseParams {
    EllipseParams {
        density: 0.5,
        strength_min: 0.3,
        strength_max: 0.7,
    }
}

fn empty_mask_has_no_ellipses() -> Check {
    let flow = uniform_flow(16, 16, 0.0, 0.0);
    let m = ok(motion_mask(&flow, 1.5))?;
    let es = ok(sample_ellipses(&m, &flow, &mut Rng::new(1, 0), &ellipse_params()))?;
    ensure(es.is_empty(), || format!("{} ellipses", es.len()))
}

fn ellipse_centers_lie_on_mask() -> Check {
    let (h, w) = (32, 40);
    let flow = Tensor::from_fn(vec![h, w, 2], |i| {
        let p = i / 2;
        if (p % w) > 20 && (p / w) < 18 {
            4.0
        } else {
            0.0
        }
    });
    let m = ok(motion_mask(&flow, 1.5))?;
    let es = ok(sample_ellipses(&m, &flow, &mut Rng::new(2, 0), &ellipse_params()))?;
    ensure(!es.is_empty(), || "no ellipses".into())?;
    ensure(es.iter().all(|e| m.get(e.cx as usize, e.cy as usize)), || "center off the mask".into())
}

fn blend_without_ellipses_is_identity() -> Check {
    let (curr, prev) = (unit_rand(13, &[8, 8, 3]), unit_rand(14, &[8, 8, 3]));
    let out = ok(blend_colors(&curr, &prev, &uniform_flow(8, 8, 1.0, 0.0), &[], 16, &mut Rng::new(0, 0)))?;
    bitwise(&out, &curr, "blend")
}

fn blend_of_constant_frames_is_constant() -> Check {
    let c = Tensor::full(vec![12, 12, 3], 0.42f32);
    let e = EllipseSpec {
        cx: 6.0,
        cy: 5.0,
        a: 5.0,
        b: 3.0,
        theta: 0.4,
        strength: 0.7,
    };
    let out = ok(blend_colors(&c, &c, &uniform_flow(12, 12, 2.0, 1.0), &[e], 16, &mut Rng::new(0, 0)))?;
    close(&out, &c, 1e-6, "blended constant")
}

fn blur_with_zero_flow_is_identity() -> Check {
    let f = unit_rand(15, &[16, 16, 3]);
    bitwise(&ok(motion_blur(&f, &uniform_flow(16, 16, 0.0, 0.0), 8, 1.5))?, &f, "blur")
}

fn blur_of_constant_frame_is_constant() -> Check {
    let c = Tensor::full(vec![16, 16, 3], 0.6f32);
    let out = ok(motion_blur(&c, &uniform_flow(16, 16, 4.0, -3.0), 8, 1.5))?;
    close(&out, &c, 1e-6, "blurred constant")
}

fn degrade_static_clip_is_identity() -> Check {
    let f = textured_frame(16, 32, 32);
    let clip = ok(Clip::from_frames(&[f.clone(), f.clone(), f], 24.0))?;
    let out = ok(degrade_clip(&clip, &DegradeParams::default(), &Rng::new(0, 0)))?;
    close(out.frames(), clip.frames(), 1e-6, "degraded static clip")
}

fn degrade_single_frame_is_rejected() -> Check {
    let clip = random_clip(17, 1, 32, 32)?;
    match degrade_clip(&clip, &DegradeParams::default(), &Rng::new(0, 0)) {
        Err(e) if e.to_string().contains("need ≥ 2 frames") => Ok(()),
        other => Err(format!("T = 1 gave {other:?}")),
    }
}

fn codec_round_trip_is_bitwise() -> Check {
    let clip = random_clip(18, 9, 16, 24)?;
    let back = ok(decode(&ok(encode(&clip, CodecDescriptor::default()))?, 24.0))?;
    bitwise(back.frames(), clip.frames(), "decode(encode(x))")
}

fn codec_rejects_16_frames() -> Check {
    ensure(encode(&random_clip(19, 16, 8, 8)?, CodecDescriptor::default()).is_err(), || {
        "16 frames accepted".into()
    })
}

fn upsample_identity_size() -> Check {
    let l = ok(Latent::new(rand(20, &[2, 768, 2, 3]), CodecDescriptor::default()))?;
    bitwise(&ok(upsample_condition(&l, 2, 3))?.data, &l.data, "identity upsample")
}

fn upsample_constant_latent() -> Check {
    let l = ok(Latent::new(Tensor::full(vec![1, 768, 2, 2], -0.25), CodecDescriptor::default()))?;
    close(&ok(upsample_condition(&l, 4, 6))?.data, &Tensor::full(vec![1, 768, 4, 6], -0.25), 1e-6, "upsampled constant")
}

fn noising_endpoints_and_midpoint() -> Check {
    let (z0, eps) = (rand(21, &[3, 4]), rand(22, &[3, 4]));
    bitwise(&ok(add_noise(&z0, 0.0, &eps))?.z_t, &z0, "t = 0")?;
    bitwise(&ok(add_noise(&z0, 1.0, &eps))?.z_t, &eps, "t = 1")?;
    let mid = ok(add_noise(&Tensor::scalar(2.0), 0.5, &Tensor::scalar(0.0)))?.z_t;
    ensure(mid.data() == [1.0], || format!("midpoint {:?}", mid.data()))
}

fn oracle_cfm_loss_is_zero() -> Check {
    let (z0, eps) = (rand(23, &[2, 8]), rand(24, &[2, 8]));
    let oracle = ok(OracleLinearVelocity::new(&z0, &eps))?;
    for t in [0.0, 0.3, 0.9, 1.0] {
        let l = ok(cfm_loss(&oracle, &z0, &eps, t, &()))?;
        ensure(l <= 1e-10, || format!("loss {l:e} at t = {t}"))?;
    }
    Ok(())
}

fn cfm_loss_is_non_negative() -> Check {
    let mut rng = Rng::new(25, 0);
    for i in 0..20 {
        let (z0, eps) = (rand(100 + i, &[5]), rand(200 + i, &[5]));
        let t = rng.uniform();
        let a = ok(cfm_loss(&ZeroVelocity, &z0, &eps, t, &()))?;
        let b = ok(cfm_loss(&ContractiveToyVelocity::default(), &z0, &eps, t, &()))?;
        ensure(a >= 0.0 && b >= 0.0, || format!("negative loss {a} / {b}"))?;
    }
    Ok(())
}

fn clean_estimate_identities() -> Check {
    let (z0, eps) = (rand(26, &[6]), rand(27, &[6]));
    let v = ok(velocity_target(&z0, &eps))?;
    for t in [0.1, 0.5, 1.0] {
        let z_t = ok(add_noise(&z0, t, &eps))?.z_t;
        close(&ok(predict_clean(&z_t, t, &v))?, &z0, 1e-5, "clean estimate")?;
    }
    let z_t = rand(28, &[6]);
    bitwise(&ok(predict_clean(&z_t, 0.0, &rand(29, &[6])))?, &z_t, "t = 0 estimate")
}

fn oracle_sampling_is_exact() -> Check {
    let (z0, eps) = (rand(30, &[4, 4]), rand(31, &[4, 4]));
    let oracle = ok(OracleLinearVelocity::new(&z0, &eps))?;
    for steps in [1, 5, 50] {
        close(&ok(ode_sample(&oracle, &eps, steps, &()))?, &z0, 1e-5, "oracle sample")?;
    }
    Ok(())
}

fn zero_velocity_sampling_is_identity() -> Check {
    let z = rand(32, &[7]);
    bitwise(&ok(ode_sample(&ZeroVelocity, &z, 10, &()))?, &z, "zero field")
}

fn sdedit_alpha_zero_is_identity() -> Check {
    let c0 = rand(33, &[2, 3]);
    let out = ok(sdedit_degrade(&ContractiveToyVelocity::default(), &c0, 0.0, 5, &mut Rng::new(0, 0), &()))?;
    bitwise(&out, &c0, "alpha = 0")
}

fn sdedit_with_oracle_restores_latent() -> Check {
    let (c0, eps) = (rand(34, &[2, 3]), rand(35, &[2, 3]));
    let oracle = ok(OracleLinearVelocity::new(&c0, &eps))?;
    for alpha in [0.2, 0.5, 1.0] {
        close(&ok(sdedit_degrade_with_noise(&oracle, &c0, alpha, 7, &eps, &()))?, &c0, 1e-5, "oracle sdedit")?;
    }
    Ok(())
}

fn point_mass_sampler() -> Check {
    let d = ok(TimestepDistribution::new(vec![0.0, 0.4, 0.42, 1.0], vec![0.0, 1.0, 0.0]))?;
    let mut rng = Rng::new(36, 0);
    for _ in 0..1000 {
        let t = sample_timestep(&d, &mut rng);
        ensure((0.4..0.42).contains(&t), || format!("draw {t}"))?;
    }
    Ok(())
}

fn random_traces() -> Vec<Vec<Tensor>> {
    (0..2)
        .map(|c| (0..6).map(|s| rand(300 + 10 * c + s, &[2, 8, 8])).collect())
        .collect()
}

fn detail_aware_sampler_sums_to_one() -> Check {
    let d = ok(build_detail_aware_sampler(&random_traces(), DetailAwareOptions::default()))?;
    let total: f64 = d.probs().iter().sum();
    ensure((total - 1.0).abs() <= 1e-6, || format!("total mass {total}"))
}

fn constant_trace_is_degenerate() -> Check {
    let x = rand(37, &[2, 8, 8]);
    match build_detail_aware_sampler(&[vec![x.clone(); 5]], DetailAwareOptions::default()) {
        Err(Error::Degenerate(m)) if m.contains("degenerate trace") => Ok(()),
        other => Err(format!("constant trace gave {other:?}")),
    }
}

fn zero_noise_augmentation() -> Check {
    let c = rand(38, &[3, 3]);
    let (c_aug, a) = ok(apply_noise_augmentation(&c, NoiseAugmentation { lo: 0.0, hi: 0.0 }, &mut Rng::new(0, 0)))?;
    ensure(a == 0.0, || format!("level {a}"))?;
    bitwise(&c_aug, &c, "c_aug")
}

fn attention_single_token() -> Check {
    let (q, k, v) = (grid(39, 1, 1, 1, 4), grid(40, 1, 1, 1, 4), grid(41, 1, 1, 1, 4));
    close(ok(full_attention(&q, &k, &v, 2))?.tokens(), v.tokens(), 1e-6, "single token")
}

fn attention_constant_keys_average_values() -> Check {
    let (n, d) = (6, 4);
    let k = ok(TokenGrid::new(Tensor::from_fn(vec![n, d], |i| (i % d) as f32 * 0.3), 1, 2, 3))?;
    let v = grid(42, 1, 2, 3, d);
    let mean = Tensor::from_fn(vec![d], |j| (0..n).map(|r| v.tokens().data()[r * d + j]).sum::<f32>() / n as f32);
    for seed in [43, 44] {
        let out = ok(full_attention(&grid(seed, 1, 2, 3, d), &k, &v, 2))?;
        for r in 0..n {
            let row = ok(Tensor::new(vec![d], out.tokens().data()[r * d..(r + 1) * d].to_vec()))?;
            close(&row, &mean, 1e-5, "constant-key output")?;
        }
    }
    Ok(())
}

fn swin_frame_window_equals_full() -> Check {
    let (q, k, v) = (grid(45, 1, 4, 6, 8), grid(46, 1, 4, 6, 8), grid(47, 1, 4, 6, 8));
    let part = ok(WindowPartition::new(4, 6, 4, 6))?;
    let s = ok(swin_attention(&q, &k, &v, 2, &part, false))?;
    close(s.tokens(), ok(full_attention(&q, &k, &v, 2))?.tokens(), 1e-5, "frame-sized window")
}

fn swin_shift_round_trip() -> Check {
    let part = ok(WindowPartition::new(6, 8, 4, 4))?;
    let mut seen: Vec<usize> = part.shifted().windows().iter().flatten().copied().collect();
    seen.sort_unstable();
    ensure(seen == (0..48).collect::<Vec<_>>(), || "shifted windows do not partition the frame".into())?;
    let q = grid(48, 2, 6, 8, 4);
    let k = ok(TokenGrid::new(Tensor::full(vec![96, 4], 0.5), 2, 6, 8))?;
    let v = ok(TokenGrid::new(Tensor::from_fn(vec![96, 4], |i| (i % 4) as f32), 2, 6, 8))?;
    close(ok(swin_attention(&q, &k, &v, 2, &part, true))?.tokens(), v.tokens(), 1e-6, "shifted round trip")
}

fn sparse_saturated_equals_full() -> Check {
    let (q, k, v) = (grid(49, 1, 4, 6, 8), grid(50, 1, 4, 6, 8), grid(51, 1, 4, 6, 8));
    let part = ok(WindowPartition::new(4, 6, 2, 3))?;
    let s = ok(sparse_local_attention(&q, &k, &v, 2, &part, part.len() - 1))?;
    close(s.tokens(), ok(full_attention(&q, &k, &v, 2))?.tokens(), 1e-5, "saturated sparse")
}

fn sparse_top0_equals_swin() -> Check {
    let (q, k, v) = (grid(52, 2, 4, 6, 8), grid(53, 2, 4, 6, 8), grid(54, 2, 4, 6, 8));
    let part = ok(WindowPartition::new(4, 6, 2, 3))?;
    let s = ok(sparse_local_attention(&q, &k, &v, 2, &part, 0))?;
    close(s.tokens(), ok(swin_attention(&q, &k, &v, 2, &part, false))?.tokens(), 1e-5, "top-0 sparse")
}

fn single_temporal_unit_is_noop() -> Check {
    let plan = ok(TemporalUnitPlan::new(5))?;
    for layer in 0..2 {
        let units = ok(plan.units(5, layer))?;
        ensure(units == vec![(0..5).collect::<Vec<_>>()], || format!("units {units:?}"))?;
    }
    let (q, k, v) = (grid(55, 5, 2, 2, 4), grid(56, 5, 2, 2, 4), grid(57, 5, 2, 2, 4));
    let wrapped = ok(interleaved_temporal_wrap(|q, k, v| full_attention(q, k, v, 2), &q, &k, &v, &plan, 1))?;
    bitwise(wrapped.tokens(), ok(full_attention(&q, &k, &v, 2))?.tokens(), "wrapped single unit")
}

fn temporal_shift_round_trip() -> Check {
    let plan = ok(TemporalUnitPlan::new(2))?;
    let (q, v) = (grid(58, 7, 2, 3, 4), grid(59, 7, 2, 3, 4));
    let out = ok(interleaved_temporal_wrap(|_, _, v| Ok(v.clone()), &q, &q, &v, &plan, 1))?;
    bitwise(out.tokens(), v.tokens(), "shift / unshift")
}

fn flops_full_equals_saturated_sparse() -> Check {
    let layout = GridLayout {
        frames: 3,
        height: 4,
        width: 6,
    };
    let base = AttentionConfig {
        window: (4, 6),
        top_k: 2,
        temporal: ok(TemporalUnitPlan::new(8))?,
        ..AttentionConfig::default()
    };
    let full = ok(count_flops(layout, 16, &base, 0))?;
    let sparse = ok(count_flops(
        layout,
        16,
        &AttentionConfig {
            mode: AttentionMode::SparseLocal,
            ..base
        },
        0,
    ))?;
    ensure(full.attention == sparse.attention, || {
        format!("full {} vs sparse {}", full.attention, sparse.attention)
    })
}

fn flops_quadratic_in_tokens() -> Check {
    let cfg = AttentionConfig {
        temporal: ok(TemporalUnitPlan::new(64))?,
        ..AttentionConfig::default()
    };
    let count = |frames| {
        count_flops(
            GridLayout {
                frames,
                height: 4,
                width: 6,
            },
            16,
            &cfg,
            0,
        )
    };
    let (a, b) = (ok(count(2))?.attention, ok(count(4))?.attention);
    ensure(b == 4 * a, || format!("{a} -> {b}"))
}

fn bench_rows_and_analytic_columns() -> Check {
    let dir = Scratch::new("bench")?;
    let modes = vec![AttentionMode::Full, AttentionMode::Swin, AttentionMode::SparseLocal];
    let sizes: Vec<GridLayout> = [(1, 4, 6), (2, 4, 6), (2, 8, 6)]
        .iter()
        .map(|&(frames, height, width)| GridLayout { frames, height, width })
        .collect();
    let cfg = PipelineConfig::default();
    let args = BenchArgs {
        modes: modes.clone(),
        sizes: sizes.clone(),
        dim: 8,
        heads: 2,
        repetitions: 1,
        wall_clock: false,
    };
    let report = bench_attn(&cfg, &args, &dir.path("bench.csv")).map_err(|e| e.to_string())?;
    let text = fs::read_to_string(dir.path("bench.csv")).map_err(|e| e.to_string())?;
    ensure(text.lines().count() == 1 + 9, || format!("{} csv lines", text.lines().count()))?;
    let flops = report.column("analytic_flops").ok_or("no analytic_flops column")?;
    let mut i = 0;
    for &mode in &modes {
        for &layout in &sizes {
            let expect = ok(count_flops(layout, 8, &AttentionConfig { mode, ..cfg.attention.clone() }, 0))?.total;
            ensure(flops[i] == expect.to_string(), || format!("row {i}: {} != {expect}", flops[i]))?;
            i += 1;
        }
    }
    Ok(())
}

fn model_output_shape() -> Check {
    let mut rng = Rng::new(60, 0);
    for i in 0..5 {
        let heads = 1 + rng.index(2);
        let cfg = GvrConfig {
            width: 8 * heads,
            heads,
            depth: 2,
            attention: AttentionConfig {
                mode: [AttentionMode::Full, AttentionMode::Swin, AttentionMode::SparseLocal][rng.index(3)],
                window: (1 + rng.index(2), 1 + rng.index(2)),
                ..AttentionConfig::default()
            },
            ..GvrConfig::default()
        };
        let (tl, h, w) = (1 + rng.index(3), 1 + rng.index(2), 1 + rng.index(2));
        let model = ok(GvrModel::new(cfg, i))?;
        let z = rand(61 + i, &[tl, 768, 2 * h, 2 * w]);
        let cond = Conditioning {
            c_aug: rand(70 + i, &[tl, 768, h, w]),
            aug_level: 0.4,
            text: None,
        };
        let v = ok(model.forward(&z, 0.5, &cond))?;
        ensure(v.shape() == z.shape(), || format!("{:?} != {:?}", v.shape(), z.shape()))?;
    }
    Ok(())
}

fn zero_init_model_loss_baseline() -> Check {
    let model = ok(GvrModel::new(tiny_model_config(), 0))?;
    let (z0, eps) = (rand(80, &[2, 768, 2, 2]), rand(81, &[2, 768, 2, 2]));
    let cond = Conditioning {
        c_aug: rand(82, &[2, 768, 1, 1]),
        aug_level: 0.3,
        text: None,
    };
    let v = ok(model.forward(&ok(add_noise(&z0, 0.6, &eps))?.z_t, 0.6, &cond))?;
    ensure(v.max_abs() == 0.0, || "initial velocity is not zero".into())?;
    let loss = ok(cfm_loss(&model, &z0, &eps, 0.6, &cond))?;
    let base = ok(velocity_target(&z0, &eps))?.sq_norm() / z0.numel() as f64;
    ensure((loss - base).abs() <= 1e-9 * base.max(1.0), || format!("loss {loss} vs baseline {base}"))
}

fn tiny_train() -> Result<Vec<f64>, String> {
    let data = tiny_data()?;
    let mut model = ok(GvrModel::new(tiny_model_config(), 1))?;
    let cfg = TrainConfig {
        steps: 2,
        batch: 2,
        ..TrainConfig::default()
    };
    Ok(ok(train(&mut model, &data, &cfg, 0))?.losses())
}

fn training_repeats_exactly() -> Check {
    let (a, b) = (tiny_train()?, tiny_train()?);
    ensure(
        a.len() == 2 && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()),
        || format!("{a:?} vs {b:?}"),
    )
}

fn inference_shape_and_repeatability() -> Check {
    let model = ok(GvrModel::new(tiny_model_config(), 2))?;
    let c0 = rand(83, &[2, 768, 1, 2]);
    let run = || infer(&model, &c0, 3, 0.45, &mut Rng::new(5, 4), None);
    let (a, b) = (ok(run())?, ok(run())?);
    let up = ok(upsample_condition(&ok(Latent::new(c0.clone(), model.config.codec))?, 2, 4))?;
    ensure(a.shape() == up.data.shape(), || format!("{:?}", a.shape()))?;
    bitwise(&a, &b, "inference")
}

fn traces_length_and_worker_invariance() -> Check {
    let model = ok(GvrModel::new(tiny_model_config(), 3))?;
    let latents = tiny_latents(3);
    let run = |workers: usize| -> Result<Vec<Vec<Tensor>>, String> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| e.to_string())?;
        pool.install(|| ok(collect_trace(&model, &latents, 4, 0.45, 9)))
    };
    let (one, four) = (run(1)?, run(4)?);
    ensure(one.iter().all(|t| t.len() == 4), || "trace length != steps".into())?;
    for (a, b) in one.iter().flatten().zip(four.iter().flatten()) {
        bitwise(a, b, "trace at 1 vs 4 workers")?;
    }
    Ok(())
}

fn oracle_trace_is_degenerate() -> Check {
    let (z0, eps) = (rand(84, &[2, 8, 8]), rand(85, &[2, 8, 8]));
    let oracle = ok(OracleLinearVelocity::new(&z0, &eps))?;
    let (_, trace) = ok(ode_sample_traced(&oracle, &eps, 6, &()))?;
    for x in &trace {
        close(x, &z0, 1e-5, "oracle clean estimate")?;
    }
    match build_detail_aware_sampler(&[trace], DetailAwareOptions::default()) {
        Err(Error::Degenerate(_)) => Ok(()),
        other => Err(format!("oracle trace gave {other:?}")),
    }
}

fn extension_keeps_parameter_count() -> Check {
    let mut model = ok(GvrModel::new(tiny_model_config(), 4))?;
    let before = model.parameter_count();
    ok(apply_extension(&mut model, ExtensionPlan::default()))?;
    ensure(model.parameter_count() == before, || {
        format!("{before} -> {}", model.parameter_count())
    })
}

fn curation_rejects_black_and_gray() -> Check {
    let cfg = CurationConfig::default();
    let black = ok(Clip::new(Tensor::zeros(vec![12, 16, 16, 3]), 24.0))?;
    let v = ok(curate_clip("black", &black, None, &cfg))?;
    ensure(!v.accepted && v.reason.as_deref() == Some("brightness"), || format!("{v:?}"))?;
    let gray = ok(Clip::new(Tensor::full(vec![12, 16, 16, 3], 0.5), 24.0))?;
    let v = ok(curate_clip("gray", &gray, None, &cfg))?;
    ensure(
        !v.accepted && v.laplacian_var == 0.0 && v.reason.as_deref() == Some("laplacian"),
        || format!("{v:?}"),
    )
}

pub struct Outcome {
    pub name: &'static str,
    pub result: Check,
}

/// Runs every check, in order.
pub fn run_all() -> Vec<Outcome> {
    TESTS
        .iter()
        .map(|t| Outcome {
            name: t.name,
            result: (t.run)(),
        })
        .collect()
}
