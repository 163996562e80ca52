use super::{BinModel, Generators, Variant};
use crate::error::{Error, Result};
use crate::nn::Bound;
use crate::tensor::{Gradients, Graph, Tensor, Var};

/// Which generator a probe replaces in [`Session::fusion_step_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Audio,
    Video,
    Joint,
}

/// Features and tokens after `iteration` fusion steps. Token fields are
/// `None` where the variant has no such token.
#[derive(Clone, Copy, Debug)]
pub struct FusionState {
    pub a_hat: Var,
    pub v_hat: Var,
    pub c_a: Option<Var>,
    pub c_v: Option<Var>,
    pub c: Option<Var>,
    pub iteration: usize,
}

/// One forward pass of a [`BinModel`] on a fresh graph.
pub struct Session<'m> {
    model: &'m BinModel,
    graph: Graph,
    params: Bound,
}

impl<'m> Session<'m> {
    pub(super) fn new(model: &'m BinModel, tracked: bool) -> Self {
        let mut graph = Graph::new();
        let params = if tracked { model.store().bind(&mut graph) } else { model.store().bind_frozen(&mut graph) };
        Session { model, graph, params }
    }

    pub fn model(&self) -> &'m BinModel {
        self.model
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }

    pub fn params(&self) -> &Bound {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    /// Backpropagates `loss` and returns the graph gradients with the
    /// parameter bindings needed to route them into the store.
    pub fn backward(self, loss: Var) -> Result<(Gradients, Bound)> {
        let grads = self.graph.backward(loss)?;
        Ok((grads, self.params))
    }

    /// `[1, T] → [C_A, F_A]`.
    pub fn encode_audio(&mut self, s: &Tensor) -> Result<Var> {
        let cfg = self.model.config();
        self.model.expect("mixture", s.shape(), &[1, cfg.samples])?;
        let x = self.graph.constant(s.clone());
        self.encode_audio_var(x)
    }

    pub fn encode_audio_var(&mut self, x: Var) -> Result<Var> {
        self.model.audio_encoder.forward(&mut self.graph, &self.params, x)
    }

    /// `[M·d_v, F_V] → [C_V, F_A]`.
    pub fn encode_video(&mut self, v: &Tensor) -> Result<Var> {
        let cfg = self.model.config();
        let want = cfg.speakers * cfg.cue_dims;
        if v.rank() != 2 || v.shape()[0] != want {
            return Err(Error::shape(
                "encode_video",
                format!(
                    "axis 0 (M·d_v): expected {want} = {}·{}, got shape {:?}",
                    cfg.speakers,
                    cfg.cue_dims,
                    v.shape()
                ),
            ));
        }
        let x = self.graph.constant(v.clone());
        self.encode_video_var(x)
    }

    pub fn encode_video_var(&mut self, x: Var) -> Result<Var> {
        let ve = &self.model.video_encoder;
        let (g, p) = (&mut self.graph, &self.params);
        let h = ve.conv1.forward(g, p, x)?;
        let h = ve.act.forward(g, p, h)?;
        let h = ve.conv2.forward(g, p, h)?;
        g.interpolate_time(h, self.model.config().audio_frames())
    }

    pub fn init_state(&mut self) -> Result<FusionState> {
        let cfg = self.model.config();
        let fa = cfg.audio_frames();
        let a_hat = self.graph.constant(Tensor::zeros([cfg.audio_channels, fa]));
        let v_hat = self.graph.constant(Tensor::zeros([cfg.video_channels, fa]));
        let c_a = self.model.audio_token.map(|id| self.params[id]);
        let c_v = self.model.video_token.map(|id| self.params[id]);
        let c = self.fuse(c_a, c_v)?;
        Ok(FusionState { a_hat, v_hat, c_a, c_v, c, iteration: 0 })
    }

    fn fuse(&mut self, c_a: Option<Var>, c_v: Option<Var>) -> Result<Option<Var>> {
        Ok(match (self.model.variant(), c_a, c_v) {
            (Variant::Full, Some(a), Some(v)) => {
                let sum = self.graph.add(a, v)?;
                Some(self.graph.scale(sum, 0.5)?)
            }
            (Variant::NoCA, _, v) => v,
            (Variant::NoCV, a, _) => a,
            _ => None,
        })
    }

    pub fn fusion_step(&mut self, state: &FusionState, ea: Var, ev: Var) -> Result<FusionState> {
        let model = self.model;
        self.fusion_step_with(state, ea, ev, &mut |g, p, branch, x| match (&model.generators, branch) {
            (Generators::Split { audio, .. }, Branch::Audio) => audio.forward(g, p, x),
            (Generators::Split { video, .. }, Branch::Video) => video.forward(g, p, x),
            (Generators::Joint(joint), Branch::Joint) => joint.forward(g, p, x),
            _ => unreachable!("generator layout matches variant"),
        })
    }

    /// [`Session::fusion_step`] with the generators replaced by `gen`, which
    /// must return the channel count the real generator would.
    pub fn fusion_step_with(
        &mut self,
        state: &FusionState,
        ea: Var,
        ev: Var,
        gen: &mut dyn FnMut(&mut Graph, &Bound, Branch, Var) -> Result<Var>,
    ) -> Result<FusionState> {
        let cfg = self.model.config();
        if state.iteration >= cfg.iterations {
            return Err(Error::Contract(format!(
                "fusion_step called at iteration {} but R = {}",
                state.iteration, cfg.iterations
            )));
        }
        let (ca, cv) = (cfg.audio_channels, cfg.video_channels);
        let variant = self.model.variant();
        let g = &mut self.graph;
        let xa = g.add(state.a_hat, ea)?;
        let xv = g.add(state.v_hat, ev)?;

        if variant == Variant::NoBottleneck {
            let x = g.concat(&[xa, xv], 0)?;
            let y = gen(g, &self.params, Branch::Joint, x)?;
            let parts = g.split(y, 0, &[ca, cv])?;
            return Ok(FusionState {
                a_hat: parts[0],
                v_hat: parts[1],
                c_a: None,
                c_v: None,
                c: None,
                iteration: state.iteration + 1,
            });
        }

        let missing = || Error::Contract("fusion state is missing a token its variant needs".into());
        let (audio_in, video_in) = match variant {
            Variant::NoC => (state.c_a.ok_or_else(missing)?, state.c_v.ok_or_else(missing)?),
            _ => {
                let c = state.c.ok_or_else(missing)?;
                (c, c)
            }
        };
        let ch = cfg.token_channels;

        let x = g.concat(&[xa, audio_in], 0)?;
        let y = gen(g, &self.params, Branch::Audio, x)?;
        let (a_hat, c_a) = if variant.has_audio_token() {
            let p = g.split(y, 0, &[ca, ch])?;
            (p[0], Some(p[1]))
        } else {
            (y, None)
        };

        let x = g.concat(&[xv, video_in], 0)?;
        let y = gen(g, &self.params, Branch::Video, x)?;
        let (v_hat, c_v) = if variant.has_video_token() {
            let p = g.split(y, 0, &[cv, ch])?;
            (p[0], Some(p[1]))
        } else {
            (y, None)
        };

        let c = self.fuse(c_a, c_v)?;
        Ok(FusionState { a_hat, v_hat, c_a, c_v, c, iteration: state.iteration + 1 })
    }

    /// Applies `R` fusion steps from the initial state; with `taps`, also
    /// returns the state after every step.
    pub fn run_iterations(&mut self, ea: Var, ev: Var, taps: bool) -> Result<(FusionState, Option<Vec<FusionState>>)> {
        let mut state = self.init_state()?;
        let mut trail = taps.then(Vec::new);
        for _ in 0..self.model.config().iterations {
            state = self.fusion_step(&state, ea, ev)?;
            if let Some(t) = trail.as_mut() {
                t.push(state);
            }
        }
        Ok((state, trail))
    }

    /// Nonnegative masks `[M, C_A, F_A]` from the fused features.
    pub fn predict_mask(&mut self, a_hat: Var, v_hat: Var) -> Result<Var> {
        let cfg = self.model.config();
        let x = self.graph.concat(&[a_hat, v_hat], 0)?;
        let y = self.model.predictor.forward(&mut self.graph, &self.params, x)?;
        let y = self.graph.relu(y)?;
        self.graph.reshape(y, &[cfg.speakers, cfg.audio_channels, cfg.audio_frames()])
    }

    /// Applies each speaker's mask to `ea` and decodes to `[M, T]`.
    pub fn decode(&mut self, ea: Var, mask: Var) -> Result<Var> {
        let cfg = self.model.config();
        let (ca, fa) = (cfg.audio_channels, cfg.audio_frames());
        let mut rows = Vec::with_capacity(cfg.speakers);
        for i in 0..cfg.speakers {
            let g = &mut self.graph;
            let m = g.narrow(mask, 0, i, 1)?;
            let m = g.reshape(m, &[ca, fa])?;
            let masked = g.mul(ea, m)?;
            let y = self.model.decoder.forward(g, &self.params, masked)?;
            rows.push(g.fit_length(y, cfg.samples)?);
        }
        self.graph.concat(&rows, 0)
    }

    pub fn separate(&mut self, s: &Tensor, v: &Tensor) -> Result<Var> {
        let ea = self.encode_audio(s)?;
        let ev = self.encode_video(v)?;
        let (state, _) = self.run_iterations(ea, ev, false)?;
        let mask = self.predict_mask(state.a_hat, state.v_hat)?;
        self.decode(ea, mask)
    }

    pub fn per_iteration_masks(&mut self, s: &Tensor, v: &Tensor) -> Result<Vec<Var>> {
        let ea = self.encode_audio(s)?;
        self.per_iteration_masks_from(ea, v)
    }

    pub(super) fn per_iteration_masks_from(&mut self, ea: Var, v: &Tensor) -> Result<Vec<Var>> {
        let ev = self.encode_video(v)?;
        let (_, taps) = self.run_iterations(ea, ev, true)?;
        taps.unwrap_or_default().iter().map(|st| self.predict_mask(st.a_hat, st.v_hat)).collect()
    }
}
