//! Reverse diffusion from pure noise, optional reduced-step schedules and
//! trajectory capture, then inverse transform to pixels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{reverse_step, NoiseSchedule};
use crate::error::{Error, Result};
use crate::io::RgbImage;
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::unet::{Layout, Model, IMAGE_CHANNELS};
use crate::wavelet::SUBBANDS;

/// Anything that predicts the noise in a noisy batch.
pub trait Denoiser<T: Scalar> {
    fn layout(&self) -> Layout;
    fn predict_noise(&self, x: &Tensor<T>, ts: &[usize]) -> Result<Tensor<T>>;
}

impl<T: Scalar> Denoiser<T> for Model<T> {
    fn layout(&self) -> Layout {
        self.config().layout()
    }

    fn predict_noise(&self, x: &Tensor<T>, ts: &[usize]) -> Result<Tensor<T>> {
        self.predict(x, ts)
    }
}

/// A model driven by substitute parameters (e.g. the EMA shadow).
pub struct WithParams<'a, T> {
    pub model: &'a Model<T>,
    pub params: &'a ParamStore<T>,
}

impl<T: Scalar> Denoiser<T> for WithParams<'_, T> {
    fn layout(&self) -> Layout {
        self.model.config().layout()
    }

    fn predict_noise(&self, x: &Tensor<T>, ts: &[usize]) -> Result<Tensor<T>> {
        self.model.predict_with(self.params, x, ts)
    }
}

/// Predicts zero noise everywhere; reduces sampling to the closed-form
/// recurrence `u_{t-1} = u_t / sqrt(alpha_t) + sigma_t z`.
#[derive(Clone, Copy, Debug)]
pub struct ZeroDenoiser {
    pub layout: Layout,
}

impl<T: Scalar> Denoiser<T> for ZeroDenoiser {
    fn layout(&self) -> Layout {
        self.layout
    }

    fn predict_noise(&self, x: &Tensor<T>, _ts: &[usize]) -> Result<Tensor<T>> {
        Ok(Tensor::zeros(x.shape()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRequest {
    pub count: usize,
    pub image_size: usize,
    /// Reverse steps; `None` runs the full schedule.
    pub steps: Option<usize>,
    pub seed: u64,
    /// Keep every `traj_stride`-th state (0 = off).
    pub traj_stride: usize,
    /// Whether callers should sample with the EMA weights.
    pub use_ema: bool,
}

impl SampleRequest {
    pub fn new(count: usize, image_size: usize, seed: u64) -> Self {
        Self {
            count,
            image_size,
            steps: None,
            seed,
            traj_stride: 0,
            use_ema: true,
        }
    }
}

/// The state `u_t` right after the reverse step that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot<T> {
    /// Original-schedule timestep of the state (0 for the final estimate).
    pub t: usize,
    pub state: Tensor<T>,
}

impl<T: Scalar> Snapshot<T> {
    /// Pixel-space preview: the inverse transform of the snapshot itself.
    pub fn preview(&self, layout: Layout) -> Result<Tensor<T>> {
        layout.decode(&self.state)
    }
}

#[derive(Clone, Debug)]
pub struct SampleOutput<T> {
    /// `[B, 3, H, W]`, unclamped.
    pub images: Tensor<T>,
    /// The final state in the model's layout.
    pub coeffs: Tensor<T>,
    /// Captured states in order of strictly decreasing `t`.
    pub trajectory: Vec<Snapshot<T>>,
}

/// Runs reverse diffusion for `req.count` images. With `steps = Some(K)`,
/// the schedule is respaced to `K` steps and the network is conditioned on
/// the original timestep each step stands for.
pub fn sample<T: Scalar, D: Denoiser<T> + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    req: &SampleRequest,
) -> Result<SampleOutput<T>> {
    if req.count == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    if req.image_size == 0 || req.image_size % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "image size {} must be positive and even",
            req.image_size
        )));
    }
    let (sched, labels) = match req.steps {
        None => (schedule.clone(), (1..=schedule.timesteps()).collect::<Vec<_>>()),
        Some(k) => {
            let r = schedule.subsample(k)?;
            (r.schedule, r.timesteps)
        }
    };
    let steps = labels.len();
    let layout = denoiser.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut u = Tensor::<T>::randn(&layout.shape(req.count, req.image_size), &mut rng);
    let mut trajectory = Vec::new();
    for k in (1..=steps).rev() {
        let t = labels[k - 1];
        let ts = vec![t; req.count];
        let eps = denoiser.predict_noise(&u, &ts)?;
        if !eps.is_finite() {
            return Err(Error::NonFinite(format!("noise prediction at t = {t}")));
        }
        let z = (k > 1).then(|| Tensor::<T>::randn(u.shape(), &mut rng));
        u = reverse_step(&sched, &u, &eps, k, z.as_ref())?;
        if !u.is_finite() {
            return Err(Error::NonFinite(format!("reverse step at t = {t}")));
        }
        if req.traj_stride > 0 && (k - 1) % req.traj_stride == 0 {
            let t_prev = if k > 1 { labels[k - 2] } else { 0 };
            trajectory.push(Snapshot { t: t_prev, state: u.clone() });
        }
    }
    let images = layout.decode(&u)?;
    Ok(SampleOutput {
        images,
        coeffs: u,
        trajectory,
    })
}

/// Renders one `[3, 4, h, w]` stack (or `[1, 3, 4, h, w]`) as a `2h x 2w`
/// mosaic: `ll` top left, `lh` top right, `hl` bottom left, `hh` bottom
/// right. `ll` is stretched over its own min/max; each detail subband maps
/// symmetrically around mid-gray using its largest magnitude.
pub fn export_wavelet_grid<T: Scalar>(stack: &Tensor<T>) -> Result<RgbImage> {
    let s = stack.shape();
    let s = match s.len() {
        4 => s,
        5 if s[0] == 1 => &s[1..],
        _ => return Err(Error::invalid("wavelet grid", format!("expected [3, 4, h, w], got {s:?}"))),
    };
    if s[0] != IMAGE_CHANNELS || s[1] != SUBBANDS {
        return Err(Error::invalid("wavelet grid", format!("expected [3, 4, h, w], got {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    let data = stack.to_f64_vec();
    let at = |c: usize, b: usize, y: usize, x: usize| data[((c * SUBBANDS + b) * h + y) * w + x];
    let band = |b: usize| (0..IMAGE_CHANNELS).flat_map(move |c| (0..h * w).map(move |i| at(c, b, i / w, i % w)));

    let mut mappers: Vec<Box<dyn Fn(f64) -> u8>> = Vec::with_capacity(SUBBANDS);
    let (lo, hi) = band(0).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    mappers.push(Box::new(move |v| ll_level(v, lo, hi)));
    for b in 1..SUBBANDS {
        let m = band(b).fold(0.0f64, |a, v| a.max(v.abs()));
        mappers.push(Box::new(move |v| detail_level(v, m)));
    }

    let mut out = vec![0u8; 4 * h * w * IMAGE_CHANNELS];
    let width = 2 * w;
    for (b, map) in mappers.iter().enumerate() {
        let (oy, ox) = ((b / 2) * h, (b % 2) * w);
        for y in 0..h {
            for x in 0..w {
                for c in 0..IMAGE_CHANNELS {
                    out[((oy + y) * width + ox + x) * IMAGE_CHANNELS + c] = map(at(c, b, y, x));
                }
            }
        }
    }
    RgbImage::new(width, 2 * h, out)
}

/// A layout-space batch viewed as `[B, 3, 4, h, w]` subband stacks.
pub fn wavelet_view<T: Scalar>(layout: Layout, state: &Tensor<T>) -> Result<Tensor<T>> {
    match layout {
        Layout::Wavelet => Ok(state.clone()),
        Layout::Concat => {
            let s = state.shape();
            if s.len() != 4 || s[1] != IMAGE_CHANNELS * SUBBANDS {
                return Err(Error::invalid("wavelet view", format!("expected [B, 12, h, w], got {s:?}")));
            }
            state.reshape(&[s[0], IMAGE_CHANNELS, SUBBANDS, s[2], s[3]])
        }
        Layout::Pixel => crate::wavelet::dwt(state),
    }
}

/// Element `i` of a batch, without the batch axis.
pub fn batch_item<T: Scalar>(batch: &Tensor<T>, i: usize) -> Result<Tensor<T>> {
    let s = batch.shape();
    if s.is_empty() || i >= s[0] {
        return Err(Error::InvalidArgument(format!("item {i} of batch {s:?}")));
    }
    let per = batch.numel() / s[0];
    Tensor::new(&s[1..], batch.data()[i * per..(i + 1) * per].to_vec())
}

/// `ll` value stretched so `lo -> 0` and `hi -> 255` (flat bands are gray).
pub fn ll_level(v: f64, lo: f64, hi: f64) -> u8 {
    if hi > lo {
        (255.0 * (v - lo) / (hi - lo)).round().clamp(0.0, 255.0) as u8
    } else {
        128
    }
}

/// Detail value mapped so `0 -> 128` and `+-m -> 255 / 0`.
pub fn detail_level(v: f64, m: f64) -> u8 {
    if m > 0.0 {
        (127.5 + 127.5 * v / m).round().clamp(0.0, 255.0) as u8
    } else {
        128
    }
}
