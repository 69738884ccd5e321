//! Feature-space diffusion denoising with a cross-modal condition.
//!
//! Weather clutter survives pillar encoding: injected points light up BEV
//! cells that the clean scene would leave dark. This module treats that as
//! noise to be removed in feature space. The corrupted LiDAR feature grid
//! is pushed further toward Gaussian noise in a single closed-form step
//! (`diffuse`), then walked back by a small conditional U-Net that sees the
//! radar feature grid at every step (`denoise_loop`). The radar grid is the
//! natural condition because it is immune to the corruption and still marks
//! where the real objects are.
//!
//! The reverse loop predicts the previous feature state directly with no
//! injected variance, so inference is deterministic given the forward draw.
//! Training supervises only the final output, against the encoding of the
//! corrupted cloud with its weather-injected points removed, weighted by a
//! schedule that fades the auxiliary task out as the detector matures.

use crate::bev::BevGrid;
use crate::math;
use crate::nn::{Gradients, Graph, NnError, ParamStore, Tensor4, Trace};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub enum MddError {
    InvalidSchedule(String),
    InvalidConfig(String),
    /// Feature and condition grids must share shape and metadata.
    ShapeMismatch,
    Engine(NnError),
}

impl core::fmt::Display for MddError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            MddError::InvalidSchedule(m) => write!(f, "invalid diffusion schedule: {m}"),
            MddError::InvalidConfig(m) => write!(f, "invalid denoising config: {m}"),
            MddError::ShapeMismatch => write!(f, "feature/condition grid shapes differ"),
            MddError::Engine(e) => write!(f, "graph engine: {e}"),
        }
    }
}

impl core::error::Error for MddError {}

impl From<NnError> for MddError {
    fn from(e: NnError) -> Self {
        MddError::Engine(e)
    }
}

/// Noise schedule: per-step betas and their cumulative signal fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Step count and betas used throughout unless a config overrides them.
pub const DEFAULT_BETAS: [f64; 3] = [0.005, 0.0275, 0.05];

impl DiffusionSchedule {
    pub fn new(betas: &[f64]) -> Result<Self, MddError> {
        if betas.is_empty() {
            return Err(MddError::InvalidSchedule("need at least one step".into()));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for (i, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(MddError::InvalidSchedule(format!("beta[{i}] = {b} outside (0, 1)")));
            }
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(DiffusionSchedule { betas: betas.into(), alpha_bar })
    }

    pub fn standard() -> Self {
        DiffusionSchedule::new(&DEFAULT_BETAS).unwrap()
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `t` runs 1..=steps.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative product of (1 - beta) through step `t`; `t` runs 0..=steps
    /// with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Signal fraction remaining after the full forward process.
    pub fn terminal_alpha_bar(&self) -> f64 {
        self.alpha_bar[self.alpha_bar.len() - 1]
    }
}

/// Closed-form forward diffusion: one draw lands directly on the terminal
/// state. Deterministic in (grid, schedule, seed).
pub fn diffuse(f_init: &BevGrid, schedule: &DiffusionSchedule, seed: u64) -> BevGrid {
    let ab = schedule.terminal_alpha_bar();
    let signal = math::sqrt(ab);
    let noise = math::sqrt(1.0 - ab);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = f_init.clone();
    for v in out.data.data_mut() {
        let e: f64 = StandardNormal.sample(&mut rng);
        *v = signal * *v + noise * e;
    }
    out
}

/// Gradient of `diffuse` with respect to its input is the constant signal
/// scale; callers chain it when the diffused grid feeds a trained loop.
pub fn diffuse_input_gain(schedule: &DiffusionSchedule) -> f64 {
    math::sqrt(schedule.terminal_alpha_bar())
}

/// Conditional U-Net over BEV features.
///
/// Input is the concatenation of the current feature state (C channels) and
/// the condition grid (C channels); all interior blocks run at 2C channels,
/// two resolution levels with two residual blocks each, timestep embeddings
/// of width C injected in every residual block. A final 1x1 projection back
/// to C channels starts at zero and is added to the feature input, so a
/// freshly built denoiser is exactly the identity on its feature half.
#[derive(Debug, Clone)]
pub struct UnetDenoiser {
    pub graph: Graph,
    pub channels: usize,
}

struct UnetBuilder<'a> {
    store: &'a mut ParamStore,
    graph: Graph,
    rng: ChaCha12Rng,
    prefix: String,
    temb_dim: usize,
}

impl<'a> UnetBuilder<'a> {
    fn param(&mut self, name: &str, t: Tensor4) -> Result<crate::nn::ParamId, NnError> {
        self.store.add(&format!("{}.{name}", self.prefix), t)
    }

    fn conv3x3(&mut self, x: usize, name: &str, ch: usize) -> Result<usize, NnError> {
        // Fan-in scaled init keeps activations O(1) through the stack.
        let std = math::sqrt(2.0 / (ch as f64 * 9.0));
        let init = Tensor4::randn([ch, ch, 3, 3], std, &mut self.rng);
        let w = self.param(&format!("{name}.w"), init)?;
        let b = self.param(&format!("{name}.b"), Tensor4::zeros([1, ch, 1, 1]))?;
        Ok(self.graph.conv3x3(x, w, Some(b)))
    }

    fn norm(&mut self, x: usize, name: &str, ch: usize) -> Result<usize, NnError> {
        let mut gain = Tensor4::zeros([1, ch, 1, 1]);
        gain.fill(1.0);
        let g = self.param(&format!("{name}.g"), gain)?;
        let b = self.param(&format!("{name}.b"), Tensor4::zeros([1, ch, 1, 1]))?;
        Ok(self.graph.channel_norm(x, g, b))
    }

    fn time_embed(&mut self, x: usize, name: &str, ch: usize) -> Result<usize, NnError> {
        let dim = self.temb_dim;
        let std = math::sqrt(1.0 / dim as f64);
        let init = Tensor4::randn([ch, dim, 1, 1], std, &mut self.rng);
        let w = self.param(&format!("{name}.w"), init)?;
        let b = self.param(&format!("{name}.b"), Tensor4::zeros([1, ch, 1, 1]))?;
        Ok(self.graph.time_embed(x, w, b, dim))
    }

    fn resblock(&mut self, x: usize, name: &str, ch: usize) -> Result<usize, NnError> {
        let h = self.norm(x, &format!("{name}.n1"), ch)?;
        let h = self.graph.silu(h);
        let h = self.conv3x3(h, &format!("{name}.c1"), ch)?;
        let h = self.time_embed(h, &format!("{name}.temb"), ch)?;
        let h = self.norm(h, &format!("{name}.n2"), ch)?;
        let h = self.graph.silu(h);
        let h = self.conv3x3(h, &format!("{name}.c2"), ch)?;
        Ok(self.graph.add(x, h))
    }
}

impl UnetDenoiser {
    /// Registers all parameters under `prefix` and assembles the graph.
    /// `channels` must be even (the timestep embedding is C wide).
    pub fn build(
        store: &mut ParamStore,
        channels: usize,
        prefix: &str,
        seed: u64,
    ) -> Result<Self, MddError> {
        if channels < 2 || channels % 2 != 0 {
            return Err(MddError::InvalidConfig("channel count must be even and >= 2".into()));
        }
        let wide = 2 * channels;
        let mut b = UnetBuilder {
            store,
            graph: Graph::new(),
            rng: ChaCha12Rng::seed_from_u64(seed),
            prefix: prefix.into(),
            temb_dim: channels,
        };
        let f = b.graph.input(0);
        let cond = b.graph.input(1);
        let x = b.graph.concat(f, cond);
        let std = math::sqrt(2.0 / (wide as f64 * 9.0));
        let stem_init = Tensor4::randn([wide, wide, 3, 3], std, &mut b.rng);
        let stem_w = b.param("stem.w", stem_init)?;
        let stem_b = b.param("stem.b", Tensor4::zeros([1, wide, 1, 1]))?;
        let x = b.graph.conv3x3(x, stem_w, Some(stem_b));
        let x = b.resblock(x, "l1.r1", wide)?;
        let x = b.resblock(x, "l1.r2", wide)?;
        let skip = x;
        let x = b.graph.down2x(x);
        let x = b.resblock(x, "l2.r1", wide)?;
        let x = b.resblock(x, "l2.r2", wide)?;
        let x = b.graph.up2x(x);
        let x = b.graph.add(x, skip);
        let x = b.norm(x, "out.n", wide)?;
        let x = b.graph.silu(x);
        // Zero-initialized projection plus the residual below makes the
        // untrained denoiser pass features through untouched.
        let out_w = b.param("out.w", Tensor4::zeros([channels, wide, 1, 1]))?;
        let out_b = b.param("out.b", Tensor4::zeros([1, channels, 1, 1]))?;
        let x = b.graph.conv1x1(x, out_w, Some(out_b));
        b.graph.add(x, f);
        Ok(UnetDenoiser { graph: b.graph, channels })
    }

    /// One reverse step: predict the previous feature state.
    pub fn step(
        &self,
        store: &ParamStore,
        f_t: &Tensor4,
        cond: &Tensor4,
        t: usize,
    ) -> Result<Trace, MddError> {
        Ok(self.graph.forward(store, &[f_t, cond], t as f64)?)
    }
}

/// Analytic posterior-mean denoiser for a zero-mean Gaussian signal of
/// known variance observed through the diffusion chain. Each step applies
/// the exact conditional expectation of the previous state, which is a
/// scalar gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleGaussianDenoiser {
    pub signal_var: f64,
}

impl OracleGaussianDenoiser {
    /// Marginal variance of the state at step `t` (t = 0 is the signal).
    fn state_var(&self, schedule: &DiffusionSchedule, t: usize) -> f64 {
        let ab = schedule.alpha_bar(t);
        ab * self.signal_var + (1.0 - ab)
    }

    /// Gain of E[F_{t-1} | F_t].
    pub fn step_gain(&self, schedule: &DiffusionSchedule, t: usize) -> f64 {
        let prev = self.state_var(schedule, t - 1);
        let cur = self.state_var(schedule, t);
        math::sqrt(1.0 - schedule.beta(t)) * prev / cur
    }

    /// Gain of the full reverse pass; telescopes to the one-shot posterior
    /// mean E[F_0 | F_T] = sqrt(abar_T) * s / (abar_T * s + 1 - abar_T).
    pub fn total_gain(&self, schedule: &DiffusionSchedule) -> f64 {
        let ab = schedule.terminal_alpha_bar();
        math::sqrt(ab) * self.signal_var / (ab * self.signal_var + (1.0 - ab))
    }
}

/// The reverse-process denoiser choices.
pub enum Denoiser {
    Learned(UnetDenoiser),
    Oracle(OracleGaussianDenoiser),
    /// Passes the feature state through untouched; pins down loop plumbing
    /// and doubles as the denoising-off baseline.
    Identity,
}

/// Walks the reverse chain t = T..1, re-supplying the condition every step,
/// and returns the final feature grid.
pub fn denoise_loop(
    f_terminal: &BevGrid,
    radar_cond: &BevGrid,
    denoiser: &Denoiser,
    store: &ParamStore,
    schedule: &DiffusionSchedule,
) -> Result<BevGrid, MddError> {
    f_terminal.same_spec(radar_cond).map_err(|_| MddError::ShapeMismatch)?;
    let mut state = f_terminal.data.clone();
    for t in (1..=schedule.steps()).rev() {
        state = match denoiser {
            Denoiser::Learned(unet) => unet.step(store, &state, &radar_cond.data, t)?.output().clone(),
            Denoiser::Oracle(o) => {
                let mut s = state;
                s.scale(o.step_gain(schedule, t));
                s
            }
            Denoiser::Identity => state,
        };
    }
    Ok(BevGrid { spec: f_terminal.spec, frame: f_terminal.frame, data: state })
}

/// Training-mode reverse pass: same arithmetic as `denoise_loop` with the
/// learned denoiser, keeping every step's trace for the backward sweep.
/// Returned traces are ordered t = T..1.
pub fn denoise_loop_training(
    unet: &UnetDenoiser,
    store: &ParamStore,
    f_terminal: &Tensor4,
    cond: &Tensor4,
    schedule: &DiffusionSchedule,
) -> Result<(Tensor4, Vec<Trace>), MddError> {
    let mut traces = Vec::with_capacity(schedule.steps());
    let mut state = f_terminal.clone();
    for t in (1..=schedule.steps()).rev() {
        let trace = unet.step(store, &state, cond, t)?;
        state = trace.output().clone();
        traces.push(trace);
    }
    Ok((state, traces))
}

/// Backpropagates through the whole reverse chain. Accumulates parameter
/// gradients (the same weights fire at every step) and returns the
/// gradients with respect to the terminal state and the condition.
pub fn denoise_loop_backward(
    unet: &UnetDenoiser,
    store: &ParamStore,
    traces: &[Trace],
    grad_out: &Tensor4,
    grads: &mut Gradients,
) -> Result<(Tensor4, Tensor4), MddError> {
    let mut g_state = grad_out.clone();
    let mut g_cond: Option<Tensor4> = None;
    for trace in traces.iter().rev() {
        let input_grads = unet.graph.backward(store, trace, &g_state, grads)?;
        let mut it = input_grads.into_iter();
        let gf = it.next().ok_or(MddError::ShapeMismatch)?;
        let gc = it.next().ok_or(MddError::ShapeMismatch)?;
        match &mut g_cond {
            Some(acc) => acc.add_scaled(&gc, 1.0)?,
            None => g_cond = Some(gc),
        }
        g_state = gf;
    }
    let g_cond = g_cond.ok_or(MddError::ShapeMismatch)?;
    Ok((g_state, g_cond))
}

/// Epoch-scheduled weight on the denoising loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MddLossConfig {
    /// Base weight.
    pub psi: f64,
    /// Epoch scale of the decay.
    pub tau: f64,
    /// Decay midpoint in units of tau.
    pub phi: f64,
}

impl Default for MddLossConfig {
    fn default() -> Self {
        MddLossConfig { psi: 3.0, tau: 5.0, phi: 2.0 }
    }
}

impl MddLossConfig {
    pub fn validate(&self) -> Result<(), MddError> {
        if !(self.psi > 0.0) || !(self.tau > 0.0) {
            return Err(MddError::InvalidConfig("psi and tau must be positive".into()));
        }
        Ok(())
    }

    /// gamma(e) = (1 - tanh(e / tau - phi)) * psi: near its maximum for
    /// early epochs, decaying smoothly to zero.
    pub fn gamma(&self, epoch: f64) -> f64 {
        (1.0 - math::tanh(epoch / self.tau - self.phi)) * self.psi
    }
}

/// Scheduled denoising loss: MSE against the clean-geometry target, scaled
/// by gamma(epoch).
pub fn mdd_loss(
    denoised: &BevGrid,
    clean_target: &BevGrid,
    epoch: f64,
    cfg: &MddLossConfig,
) -> Result<f64, MddError> {
    cfg.validate()?;
    denoised.same_spec(clean_target).map_err(|_| MddError::ShapeMismatch)?;
    let mse = denoised.data.mse(&clean_target.data)?;
    Ok(mse * cfg.gamma(epoch))
}

/// Loss plus its gradient with respect to the denoised grid.
pub fn mdd_loss_grad(
    denoised: &Tensor4,
    clean_target: &Tensor4,
    epoch: f64,
    cfg: &MddLossConfig,
) -> Result<(f64, Tensor4), MddError> {
    cfg.validate()?;
    let mse = denoised.mse(clean_target)?;
    let gamma = cfg.gamma(epoch);
    let n = denoised.data().len() as f64;
    let mut grad = denoised.clone();
    grad.add_scaled(clean_target, -1.0)?;
    grad.scale(2.0 * gamma / n);
    Ok((mse * gamma, grad))
}
