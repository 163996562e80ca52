//! The bottleneck iterative separation network and its ablations.

mod config;
mod session;

pub use config::{ModelConfig, Variant};
pub use session::{Branch, FusionState, Session};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv1d, ConvTranspose1d, MultiScaleBlock, PRelu, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

/// Kernel of both video encoder convolutions (padding keeps length).
pub const VIDEO_KERNEL: usize = 3;
/// Token init range, uniform in `±TOKEN_INIT`.
pub const TOKEN_INIT: f64 = 0.1;

#[derive(Clone, Debug)]
pub(crate) struct VideoEncoder {
    pub conv1: Conv1d,
    pub act: PRelu,
    pub conv2: Conv1d,
}

#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug)]
pub(crate) enum Generators {
    Split { audio: MultiScaleBlock, video: MultiScaleBlock },
    Joint(MultiScaleBlock),
}

#[derive(Clone, Debug)]
pub struct BinModel {
    cfg: ModelConfig,
    store: ParamStore,
    pub(crate) audio_encoder: Conv1d,
    pub(crate) video_encoder: VideoEncoder,
    pub(crate) audio_token: Option<ParamId>,
    pub(crate) video_token: Option<ParamId>,
    pub(crate) generators: Generators,
    pub(crate) predictor: Conv1d,
    pub(crate) decoder: ConvTranspose1d,
}

/// Multiply-accumulates of one forward pass, by stage.
/// How [`BinModel::grad_check`] treats rectifiers at perturbed points.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rectifiers {
    /// Re-evaluate every gate from its input.
    Live,
    /// Keep the gates of the unperturbed pass.
    Frozen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub struct MacBreakdown {
    pub audio_encoder: u64,
    pub video_encoder: u64,
    pub per_iteration: u64,
    pub iterations: usize,
    pub predictor: u64,
    pub decoder: u64,
}

impl MacBreakdown {
    pub fn fusion(&self) -> u64 {
        self.per_iteration * self.iterations as u64
    }

    pub fn total(&self) -> u64 {
        self.audio_encoder + self.video_encoder + self.fusion() + self.predictor + self.decoder
    }

    /// Share of the total spent in the waveform encoder and decoder.
    pub fn codec_fraction(&self) -> f64 {
        (self.audio_encoder + self.decoder) as f64 / self.total() as f64
    }
}

impl BinModel {
    /// Deterministic construction: the same `(cfg, seed)` yields bit-identical
    /// parameters. Registration order is fixed, so names never depend on `R`.
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let rng = &mut rng;
        let (ca, cv, ch, fa) = (cfg.audio_channels, cfg.video_channels, cfg.token_channels, cfg.audio_frames());

        let audio_encoder = Conv1d::new(&mut store, "audio_encoder", 1, ca, cfg.enc_kernel, cfg.enc_stride, 0, rng)?;
        let cue_channels = cfg.speakers * cfg.cue_dims;
        let pad = VIDEO_KERNEL / 2;
        let video_encoder = VideoEncoder {
            conv1: Conv1d::new(&mut store, "video_encoder.conv1", cue_channels, cv, VIDEO_KERNEL, 1, pad, rng)?,
            act: PRelu::new(&mut store, "video_encoder.act", cv)?,
            conv2: Conv1d::new(&mut store, "video_encoder.conv2", cv, cv, VIDEO_KERNEL, 1, pad, rng)?,
        };

        let v = cfg.variant;
        let token = |store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng| {
            let t = Tensor::from_fn([ch, fa], |_| rng.random_range(-TOKEN_INIT..TOKEN_INIT));
            store.register(name, t)
        };
        let audio_token = if v.has_audio_token() { Some(token(&mut store, "tokens.audio", rng)?) } else { None };
        let video_token = if v.has_video_token() { Some(token(&mut store, "tokens.video", rng)?) } else { None };

        let generators = match v {
            Variant::NoBottleneck => Generators::Joint(MultiScaleBlock::new(
                &mut store,
                "joint_generator",
                ca + cv,
                ca,
                ca + cv,
                cfg.depth,
                fa,
                rng,
            )?),
            _ => {
                let a_out = ca + if v.has_audio_token() { ch } else { 0 };
                let v_out = cv + if v.has_video_token() { ch } else { 0 };
                let audio =
                    MultiScaleBlock::new(&mut store, "audio_generator", ca + ch, ca, a_out, cfg.depth, fa, rng)?;
                let video =
                    MultiScaleBlock::new(&mut store, "video_generator", cv + ch, cv, v_out, cfg.depth, fa, rng)?;
                Generators::Split { audio, video }
            }
        };

        let predictor = Conv1d::pointwise(&mut store, "predictor", ca + cv, cfg.speakers * ca, rng)?;
        let decoder = ConvTranspose1d::new(&mut store, "decoder", ca, 1, cfg.enc_kernel, cfg.enc_stride, 0, rng)?;

        Ok(BinModel {
            cfg,
            store,
            audio_encoder,
            video_encoder,
            audio_token,
            video_token,
            generators,
            predictor,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn count_params(&self) -> usize {
        self.store.count_params()
    }

    pub fn audio_token(&self) -> Option<&Tensor> {
        self.audio_token.map(|id| self.store.get(id))
    }

    pub fn video_token(&self) -> Option<&Tensor> {
        self.video_token.map(|id| self.store.get(id))
    }

    pub fn audio_generator(&self) -> Option<&MultiScaleBlock> {
        match &self.generators {
            Generators::Split { audio, .. } => Some(audio),
            Generators::Joint(_) => None,
        }
    }

    pub fn video_generator(&self) -> Option<&MultiScaleBlock> {
        match &self.generators {
            Generators::Split { video, .. } => Some(video),
            Generators::Joint(_) => None,
        }
    }

    pub fn joint_generator(&self) -> Option<&MultiScaleBlock> {
        match &self.generators {
            Generators::Joint(g) => Some(g),
            Generators::Split { .. } => None,
        }
    }

    pub fn mac_breakdown(&self) -> MacBreakdown {
        let cfg = &self.cfg;
        let fa = cfg.audio_frames();
        let ve = &self.video_encoder;
        let per_iteration = match &self.generators {
            Generators::Split { audio, video } => audio.macs(fa) + video.macs(fa),
            Generators::Joint(g) => g.macs(fa),
        };
        MacBreakdown {
            audio_encoder: self.audio_encoder.macs(cfg.samples),
            video_encoder: ve.conv1.macs(cfg.video_frames) + ve.conv2.macs(ve.conv1.out_len(cfg.video_frames)),
            per_iteration,
            iterations: cfg.iterations,
            predictor: self.predictor.macs(fa),
            decoder: cfg.speakers as u64 * self.decoder.macs(fa),
        }
    }

    pub fn session(&self) -> Session<'_> {
        Session::new(self, true)
    }

    /// A session whose parameters are constants; nothing is recorded for backprop.
    pub fn inference(&self) -> Session<'_> {
        Session::new(self, false)
    }

    /// `[M, T]` speaker estimates.
    pub fn separate(&self, mixture: &Tensor, cues: &Tensor) -> Result<Tensor> {
        let mut s = self.inference();
        let out = s.separate(mixture, cues)?;
        Ok(s.graph().value(out).clone())
    }

    /// Mask after every fusion iteration, `R` entries of `[M, C_A, F_A]`.
    pub fn per_iteration_masks(&self, mixture: &Tensor, cues: &Tensor) -> Result<Vec<Tensor>> {
        let mut s = self.inference();
        let masks = s.per_iteration_masks(mixture, cues)?;
        Ok(masks.into_iter().map(|m| s.graph().value(m).clone()).collect())
    }

    /// Waveform estimates decoded from every iteration's mask.
    pub fn separate_per_iteration(&self, mixture: &Tensor, cues: &Tensor) -> Result<Vec<Tensor>> {
        let mut s = self.inference();
        let ea = s.encode_audio(mixture)?;
        let masks = s.per_iteration_masks_from(ea, cues)?;
        let mut out = Vec::with_capacity(masks.len());
        for m in masks {
            let y = s.decode(ea, m)?;
            out.push(s.graph().value(y).clone());
        }
        Ok(out)
    }

    /// Max relative error between tape gradients of the scalar `f` and
    /// central differences of step `h` at the `(param, element)` probes.
    ///
    /// With [`Rectifiers::Frozen`] the perturbed evaluations reuse the ReLU
    /// and PReLU gates of the unperturbed forward pass, so a kink lying
    /// within `h` of the probe cannot bias the difference.
    pub fn grad_check<F>(&self, f: F, probes: &[(ParamId, usize)], h: f64, rectifiers: Rectifiers) -> Result<f64>
    where
        F: Fn(&mut Session<'_>) -> Result<Var>,
    {
        if !(h > 0.0 && h <= 1e-2) {
            return Err(Error::Contract(format!("grad_check step must lie in (0, 1e-2], got {h}")));
        }
        let frozen = rectifiers == Rectifiers::Frozen;
        let mut sess = self.session();
        if frozen {
            sess.graph_mut().record_gates();
        }
        let loss = f(&mut sess)?;
        let gates = sess.graph_mut().take_gates();
        let (grads, bound) = sess.backward(loss)?;

        let mut work = self.clone();
        let eval = |work: &mut BinModel, id: ParamId, i: usize, x: f64| -> Result<f64> {
            work.store.get_mut(id).data_mut()[i] = x;
            let mut s = work.inference();
            if let Some(g) = &gates {
                s.graph_mut().replay_gates(g.clone());
            }
            let out = f(&mut s)?;
            let v = s.value(out).data()[0];
            if !v.is_finite() {
                return Err(Error::Evaluation(format!("objective is {v} at a perturbed point")));
            }
            Ok(v)
        };
        let mut worst: f64 = 0.0;
        for &(id, i) in probes {
            let orig = self.store.get(id).data()[i];
            let plus = eval(&mut work, id, i, orig + h)?;
            let minus = eval(&mut work, id, i, orig - h)?;
            work.store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.get(bound.var(id)).map_or(0.0, |g| g[i]);
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8));
        }
        Ok(worst)
    }

    pub(crate) fn expect(&self, what: &str, t: &[usize], want: &[usize]) -> Result<()> {
        if t == want {
            return Ok(());
        }
        Err(Error::shape("bin_model", format!("{what}: expected shape {want:?}, got {t:?}")))
    }
}
