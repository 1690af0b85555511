//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Set `ACCEPTANCE_CRITERIA=1,4,9` to run a subset.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use wdiff::diffusion::{q_sample, reverse_step, ScheduleConfig};
use wdiff::gradcheck;
use wdiff::io::checkpoint::Checkpoint;
use wdiff::io::image::images_from_batch;
use wdiff::io::toy::{make_toy, ToyKind};
use wdiff::io::{Dataset, RgbImage, RunConfig};
use wdiff::metrics::{stats_distance, subband_stats, SubbandStats};
use wdiff::nn::{midplanes, AttentionBlock, AttnMode, Builder, Forward, ParamStore};
use wdiff::sample::{sample, SampleRequest, WithParams, ZeroDenoiser};
use wdiff::train::Trainer;
use wdiff::unet::Layout;
use wdiff::wavelet::{dwt, iwt};
use wdiff::{ModelConfig, NoiseSchedule, Tensor, Variant};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

/// Toy training setup shared by the end-to-end criteria.
const TOY_IMAGES: usize = 512;
const TOY_SIZE: usize = 16;
const TOY_T: usize = 100;
const TOY_BATCH: usize = 32;
const TOY_STEPS: u64 = 2000;
const TOY_LR: f64 = 1e-3;
const SMOOTHING: usize = 50;
const SAMPLE_COUNT: usize = 64;
const ABLATION_STEPS: u64 = 300;
const ABLATION_SEEDS: u64 = 3;
const ABLATION_SAMPLE_STEPS: usize = 50;

fn toy_data() -> Dataset {
    Dataset::from_images(&make_toy(ToyKind::Blobs, TOY_IMAGES, TOY_SIZE, 0).unwrap()).unwrap()
}

fn toy_config(variant: Variant, steps: u64, seed: u64, ema_rate: f64) -> RunConfig {
    let mut cfg = RunConfig::new(ModelConfig::toy(variant));
    cfg.schedule = ScheduleConfig {
        timesteps: TOY_T,
        ..ScheduleConfig::default()
    };
    cfg.trainer.batch_size = TOY_BATCH;
    cfg.trainer.lr = TOY_LR;
    cfg.trainer.iterations = steps;
    cfg.trainer.ema_rate = ema_rate;
    cfg.trainer.seed = seed;
    cfg
}

fn pixel_stats(images: &Tensor<f32>) -> SubbandStats {
    let clamped = images.map(|v| v.clamp(-1.0, 1.0));
    subband_stats(&dwt(&clamped).unwrap()).unwrap()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

struct Shared {
    data: Option<Dataset>,
    toy: Option<Trainer>,
}

impl Shared {
    fn data(&mut self) -> &Dataset {
        self.data.get_or_insert_with(toy_data)
    }
}

fn c1_wavelet_exactness(_: &mut Shared) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut max_err, mut max_norm) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let h = 2 * rng.random_range(4..=32);
        let w = 2 * rng.random_range(4..=32);
        let x = Tensor::<f32>::rand_uniform(&[1, 3, h, w], -1.0, 1.0, &mut rng);
        let u = dwt(&x).unwrap();
        max_err = max_err.max(iwt(&u).unwrap().max_abs_diff(&x));
        let (nx, nu) = (x.sum_sq().sqrt(), u.sum_sq().sqrt());
        max_norm = max_norm.max((nu - nx).abs() / nx);
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        max_err < 1e-5 && max_norm < 1e-4 && secs < 10.0,
        format!("1000 images: max |iwt(dwt(x)) - x| {max_err:.2e}, max norm drift {max_norm:.2e}, {secs:.2} s"),
    )
}

fn factored(n_in: usize, n_out: usize) -> usize {
    let m = midplanes(n_in, n_out, 3, 3);
    m * n_in * 9 + n_out * m * 3
}

fn c2_midplanes_parity(_: &mut Shared) -> Outcome {
    let m = midplanes(64, 64, 3, 3);
    let exact = m == 144 && factored(64, 64) == 110_592 && 64 * 64 * 27 == 110_592;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = f64::INFINITY;
    let mut bounded = true;
    for _ in 0..100 {
        let (a, b) = (rng.random_range(64..=1024), rng.random_range(64..=1024));
        let (fac, full) = (factored(a, b), a * b * 27);
        bounded &= fac <= full;
        worst = worst.min(fac as f64 / full as f64);
    }
    Outcome::new(
        exact && bounded && worst >= 0.99,
        format!("midplanes(64,64,3,3) = {m}, factored {} vs full 110592; 100 pairs in [64,1024]: factored <= full {bounded}, min ratio {worst:.5}", factored(64, 64)),
    )
}

fn c3_gradient_suite(_: &mut Shared) -> Outcome {
    let start = Instant::now();
    let reports = gradcheck::check_all(gradcheck::MIN_INSTANCES, 3).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.op.as_str()).collect();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let covered = reports.len() == gradcheck::OPS.len() && reports.iter().all(|r| r.instances >= 5);
    Outcome::new(
        failed.is_empty() && covered && secs < 120.0,
        format!(
            "{} ops x {} instances, max rel err {worst:.2e}, failures {failed:?}, {secs:.1} s",
            reports.len(),
            gradcheck::MIN_INSTANCES
        ),
    )
}

fn default_schedule() -> NoiseSchedule {
    ScheduleConfig::default().build().unwrap()
}

fn c4_diffusion_algebra(_: &mut Shared) -> Outcome {
    let sched = default_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let u0 = Tensor::<f32>::randn(&[4, 3, 4, 8, 8], &mut rng);
    let eps = Tensor::<f32>::randn(u0.shape(), &mut rng);
    let ut = q_sample(&sched, &u0, 1, &eps).unwrap();
    let inversion = reverse_step(&sched, &ut, &eps, 1, None).unwrap().max_abs_diff(&u0);

    let n = 100_000;
    let mut var_dev = 0.0f64;
    for t in [1, 10, 100, 500, 1000] {
        let u0 = Tensor::<f64>::randn(&[n], &mut rng);
        let eps = Tensor::<f64>::randn(&[n], &mut rng);
        let u = q_sample(&sched, &u0, t, &eps).unwrap();
        let m = mean(u.data());
        let var = u.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
        var_dev = var_dev.max((var - 1.0).abs());
    }

    let seed = 40;
    let stub = ZeroDenoiser { layout: Layout::Wavelet };
    let out = sample::<f64, _>(&stub, &sched, &SampleRequest::new(2, 8, seed)).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let len = out.coeffs.numel();
    let mut u: Vec<f64> = (0..len).map(|_| r.sample(StandardNormal)).collect();
    for t in (1..=sched.timesteps()).rev() {
        let z: Vec<f64> = (0..len).map(|_| if t > 1 { r.sample(StandardNormal) } else { 0.0 }).collect();
        for (v, z) in u.iter_mut().zip(z) {
            *v = *v / sched.alpha(t).sqrt() + sched.sigma(t) * z;
        }
    }
    let oracle = out.coeffs.data().iter().zip(&u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    Outcome::new(
        inversion < 1e-5 && var_dev < 0.05 && oracle < 1e-5,
        format!("t=1 inversion err {inversion:.2e}; max |Var(u_t) - 1| {var_dev:.4}; zero-model vs scalar recurrence {oracle:.2e}"),
    )
}

fn attention_eval(block: &AttentionBlock, store: &ParamStore<f32>, x: &Tensor<f32>) -> Tensor<f32> {
    let mut f = Forward::eval(store);
    let xv = f.graph.constant(x.clone());
    let y = block.forward(&mut f, xv).unwrap();
    f.graph.value(y).clone()
}

fn c5_attention_isolation(_: &mut Shared) -> Outcome {
    let (b, n, fq, s) = (2, 8, 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::<f32>::randn(&[b, n, fq, s, s], &mut rng);
    let idx = |bi: usize, c: usize, f: usize, i: usize, j: usize| (((bi * n + c) * fq + f) * s + i) * s + j;

    let mut identity = true;
    let mut blocks = Vec::new();
    for mode in [AttnMode::Spatial, AttnMode::Frequency, AttnMode::All] {
        let mut store = ParamStore::new();
        let block = AttentionBlock::build(&mut Builder::new(&mut store, &mut rng), mode, n, 2).unwrap();
        identity &= attention_eval(&block, &store, &x) == x;
        for t in store.tensors_mut() {
            *t = Tensor::rand_uniform(t.shape(), -0.5, 0.5, &mut rng);
        }
        blocks.push((block, store));
    }

    // Spatial attention: change frequency slice 1 only.
    let (sp, sp_store) = &blocks[0];
    let mut x1 = x.clone();
    for bi in 0..b {
        for c in 0..n {
            for i in 0..s {
                for j in 0..s {
                    x1.data_mut()[idx(bi, c, 1, i, j)] += 0.7;
                }
            }
        }
    }
    let (y0, y1) = (attention_eval(sp, sp_store, &x), attention_eval(sp, sp_store, &x1));
    let mut spatial_ok = true;
    let mut spatial_moved = false;
    for bi in 0..b {
        for c in 0..n {
            for f in 0..fq {
                for i in 0..s {
                    for j in 0..s {
                        let k = idx(bi, c, f, i, j);
                        let same = y0.data()[k].to_bits() == y1.data()[k].to_bits();
                        if f == 1 {
                            spatial_moved |= !same;
                        } else {
                            spatial_ok &= same;
                        }
                    }
                }
            }
        }
    }

    // Frequency attention: change spatial position (2, 3) only.
    let (fa, fa_store) = &blocks[1];
    let mut x2 = x.clone();
    for bi in 0..b {
        for c in 0..n {
            for f in 0..fq {
                x2.data_mut()[idx(bi, c, f, 2, 3)] -= 0.9;
            }
        }
    }
    let (z0, z1) = (attention_eval(fa, fa_store, &x), attention_eval(fa, fa_store, &x2));
    let mut freq_ok = true;
    let mut freq_moved = false;
    for bi in 0..b {
        for c in 0..n {
            for f in 0..fq {
                for i in 0..s {
                    for j in 0..s {
                        let k = idx(bi, c, f, i, j);
                        let same = z0.data()[k].to_bits() == z1.data()[k].to_bits();
                        if (i, j) == (2, 3) {
                            freq_moved |= !same;
                        } else {
                            freq_ok &= same;
                        }
                    }
                }
            }
        }
    }
    Outcome::new(
        identity && spatial_ok && spatial_moved && freq_ok && freq_moved,
        format!(
            "identity at init (bitwise, 3 modes) {identity}; spatial: other slices unchanged {spatial_ok}, slice changed {spatial_moved}; \
             frequency: other positions unchanged {freq_ok}, position changed {freq_moved}"
        ),
    )
}

fn c6_parameter_counts(_: &mut Shared) -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for (c, target) in [(64, 73.10e6), (128, 291.31e6), (192, 665.35e6)] {
        let sf = ModelConfig::res256(Variant::Sfunet, c).param_count().unwrap();
        let full = ModelConfig::res256(Variant::Full3d, c).param_count().unwrap();
        let dev = (sf as f64 - target) / target;
        pass &= dev.abs() <= 0.05 && sf < full;
        parts.push(format!("c={c}: {:.2}M ({:+.2}% vs {:.2}M), full3d {:.2}M", sf as f64 / 1e6, 100.0 * dev, target / 1e6, full as f64 / 1e6));
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(pass, format!("{}; {secs:.2} s", parts.join("; ")))
}

fn c7_toy_training(shared: &mut Shared) -> Outcome {
    let start = Instant::now();
    let data = shared.data().clone();
    let mut trainer = Trainer::new(toy_config(Variant::Sfunet, TOY_STEPS, 0, 0.995)).unwrap();
    let losses = trainer.fit(&data, &mut std::io::sink(), None).unwrap();
    let initial = mean(&losses[..SMOOTHING]);
    let last = mean(&losses[losses.len() - SMOOTHING..]);
    let train_secs = start.elapsed().as_secs_f64();

    let req = SampleRequest {
        steps: Some(TOY_T),
        ..SampleRequest::new(SAMPLE_COUNT, TOY_SIZE, 1)
    };
    let ema = WithParams {
        model: trainer.model(),
        params: trainer.ema(),
    };
    let out = sample(&ema, trainer.schedule(), &req).unwrap();
    let finite = out.images.is_finite();
    let reference = subband_stats(&dwt(data.images()).unwrap()).unwrap();
    let d_samples = stats_distance(&pixel_stats(&out.images), &reference);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let noise = subband_stats(&Tensor::<f32>::randn(&Layout::Wavelet.shape(SAMPLE_COUNT, TOY_SIZE), &mut rng)).unwrap();
    let d_noise = stats_distance(&noise, &reference);
    let secs = start.elapsed().as_secs_f64();
    shared.toy = Some(trainer);
    Outcome::new(
        last < 0.7 * initial && finite && d_samples < d_noise,
        format!(
            "loss (mean of {SMOOTHING} steps) {initial:.4} -> {last:.4} (ratio {:.3}); samples finite {finite}; \
             stats distance samples {d_samples:.4} vs N(0,1) noise {d_noise:.4}; train {train_secs:.0} s, total {secs:.0} s",
            last / initial
        ),
    )
}

fn c8_ablation(shared: &mut Shared) -> Outcome {
    let data = shared.data().clone();
    let reference = subband_stats(&dwt(data.images()).unwrap()).unwrap();
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in 0..ABLATION_SEEDS {
        let mut dist = Vec::new();
        for v in [Variant::Sfunet, Variant::SpatialOnly] {
            let mut t = Trainer::new(toy_config(v, ABLATION_STEPS, seed, 0.99)).unwrap();
            t.fit(&data, &mut std::io::sink(), None).unwrap();
            let req = SampleRequest {
                steps: Some(ABLATION_SAMPLE_STEPS),
                ..SampleRequest::new(SAMPLE_COUNT, TOY_SIZE, 100 + seed)
            };
            let out = sample(&WithParams { model: t.model(), params: t.ema() }, t.schedule(), &req).unwrap();
            dist.push(if out.images.is_finite() {
                stats_distance(&pixel_stats(&out.images), &reference)
            } else {
                f64::INFINITY
            });
        }
        if dist[0] <= dist[1] {
            wins += 1;
        }
        parts.push(format!("seed {seed}: sfunet {:.4} vs spatial_only {:.4}", dist[0], dist[1]));
    }
    Outcome::new(
        wins >= 2,
        format!("{ABLATION_STEPS} steps each; {}; sfunet <= spatial_only in {wins}/{ABLATION_SEEDS}", parts.join("; ")),
    )
}

fn c9_reduced_steps(shared: &mut Shared) -> Outcome {
    if shared.toy.is_none() {
        let data = shared.data().clone();
        let mut t = Trainer::new(toy_config(Variant::Sfunet, TOY_STEPS, 0, 0.995)).unwrap();
        t.fit(&data, &mut std::io::sink(), None).unwrap();
        shared.toy = Some(t);
    }
    let t = shared.toy.as_ref().unwrap();
    let ema = WithParams {
        model: t.model(),
        params: t.ema(),
    };
    let mut finite = Vec::new();
    for k in [10, 25, 50, 100] {
        let req = SampleRequest {
            steps: Some(k),
            ..SampleRequest::new(16, TOY_SIZE, 9)
        };
        finite.push((k, sample(&ema, t.schedule(), &req).unwrap().images.is_finite()));
    }
    let full = sample(&ema, t.schedule(), &SampleRequest::new(8, TOY_SIZE, 10)).unwrap();
    let respaced = SampleRequest {
        steps: Some(TOY_T),
        ..SampleRequest::new(8, TOY_SIZE, 10)
    };
    let respaced = sample(&ema, t.schedule(), &respaced).unwrap();
    let identical = full.images.data().iter().zip(respaced.images.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    Outcome::new(
        finite.iter().all(|&(_, ok)| ok) && identical,
        format!("finite per K {finite:?}; K=T full vs respaced bitwise identical {identical}"),
    )
}

fn c10_reproducibility(shared: &mut Shared) -> Outcome {
    let data = Dataset::from_tensor(shared.data().gather(&(0..64).collect::<Vec<_>>()).unwrap(), (0..64).map(|i| i.to_string()).collect()).unwrap();
    let mut cfg = toy_config(Variant::Sfunet, 100, 7, 0.99);
    cfg.trainer.batch_size = 8;
    cfg.trainer.log_every = 1;

    let mut straight = Trainer::new(cfg.clone()).unwrap();
    let mut log_a = Vec::new();
    let losses_a = straight.fit(&data, &mut log_a, None).unwrap();

    let mut half = cfg.clone();
    half.trainer.iterations = 50;
    let mut first = Trainer::new(half).unwrap();
    let mut log_b = Vec::new();
    let mut losses_b = first.fit(&data, &mut log_b, None).unwrap();
    let bytes = first.to_checkpoint().encode();
    let ck = Checkpoint::decode(&bytes, "split".as_ref()).unwrap();
    let mut second = Trainer::from_checkpoint(&ck, Some(cfg)).unwrap();
    losses_b.extend(second.fit(&data, &mut log_b, None).unwrap());
    let columns = |log: &[u8]| -> Vec<String> {
        String::from_utf8_lossy(log)
            .lines()
            .map(|l| l.split(' ').take(3).collect::<Vec<_>>().join(" "))
            .collect()
    };
    let bits = |s: &ParamStore<f32>| -> Vec<u32> { s.tensors().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect() };
    let resume_ok = losses_a.len() == 100
        && losses_a == losses_b
        && columns(&log_a) == columns(&log_b)
        && bits(straight.model().params()) == bits(second.model().params())
        && bits(straight.ema()) == bits(second.ema());

    let ck = straight.to_checkpoint();
    let encoded = ck.encode();
    let decoded = Checkpoint::decode(&encoded, "round".as_ref()).unwrap();
    let lossless = decoded.encode() == encoded
        && decoded.config == ck.config
        && decoded.sections.len() == ck.sections.len()
        && decoded.sections.iter().zip(&ck.sections).all(|(a, b)| {
            a.name == b.name
                && a.tensors.len() == b.tensors.len()
                && a.tensors.iter().zip(&b.tensors).all(|((na, ta), (nb, tb))| {
                    na == nb && ta.shape() == tb.shape() && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
                })
        });
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut positions: Vec<usize> = (0..64).chain(encoded.len() - 16..encoded.len()).collect();
    positions.extend((0..256).map(|_| rng.random_range(0..encoded.len())));
    let refused = positions.iter().all(|&p| {
        let mut bad = encoded.clone();
        bad[p] ^= 1 << rng.random_range(0..8);
        Checkpoint::decode(&bad, "corrupt".as_ref()).is_err()
    }) && Checkpoint::decode(&encoded[..encoded.len() - 1], "short".as_ref()).is_err();

    let req = SampleRequest {
        steps: Some(10),
        use_ema: false,
        ..SampleRequest::new(4, TOY_SIZE, 77)
    };
    let render = || -> Vec<u8> {
        let out = sample(straight.model(), straight.schedule(), &req).unwrap();
        images_from_batch(&out.images).unwrap().iter().flat_map(RgbImage::encode_ppm).collect()
    };
    let same_bytes = render() == render();
    Outcome::new(
        resume_ok && lossless && refused && same_bytes,
        format!(
            "100-step run vs 50+50 resume identical (losses, log, params, ema) {resume_ok}; checkpoint round trip bitwise {lossless}; \
             {} corrupted variants refused {refused}; fixed-seed sample bytes identical {same_bytes}",
            positions.len() + 1
        ),
    )
}

type Criterion = (usize, &'static str, bool, fn(&mut Shared) -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "wavelet exactness", true, c1_wavelet_exactness),
        (2, "midplanes parameter parity", true, c2_midplanes_parity),
        (3, "gradient suite", true, c3_gradient_suite),
        (4, "diffusion algebra", true, c4_diffusion_algebra),
        (5, "attention isolation", true, c5_attention_isolation),
        (6, "parameter-count reproduction", true, c6_parameter_counts),
        (7, "end-to-end toy training", true, c7_toy_training),
        (8, "ablation direction (soft)", false, c8_ablation),
        (9, "reduced-step sampling", true, c9_reduced_steps),
        (10, "reproducibility and formats", true, c10_reproducibility),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let mut shared = Shared { data: None, toy: None };
    let mut hard_failures = Vec::new();
    let mut out = std::io::stdout();
    for (id, name, hard, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| run(&mut shared)))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Outcome::new(false, format!("panicked: {msg}"))
            });
        let verdict = match (outcome.pass, hard) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (soft, report only)",
        };
        writeln!(
            out,
            "criterion {id:>2} {verdict}: {name} [{:.1} s] {}",
            start.elapsed().as_secs_f64(),
            outcome.detail
        )
        .unwrap();
        out.flush().unwrap();
        if !outcome.pass && hard {
            hard_failures.push(id);
        }
    }
    if hard_failures.is_empty() {
        writeln!(out, "acceptance: all hard criteria passed").unwrap();
    } else {
        writeln!(out, "acceptance: FAILED criteria {hard_failures:?}").unwrap();
        std::process::exit(1);
    }
}
