use rand::Rng;

use super::layers::{Conv1d, DepthwiseConv1d, GlobalLayerNorm, PRelu};
use super::{Bound, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

const DOWN_KERNEL: usize = 5;

#[derive(Clone, Debug)]
struct Stage {
    down: DepthwiseConv1d,
    mix: Conv1d,
    act: PRelu,
    norm: GlobalLayerNorm,
}

impl Stage {
    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.down.forward(g, p, x)?;
        let h = self.mix.forward(g, p, h)?;
        let h = self.act.forward(g, p, h)?;
        self.norm.forward(g, p, h)
    }
}

/// U-shaped 1-D multi-scale block: an input projection, `depth` stride-2
/// stages going down, a nearest-neighbour top-down merge going back up, and
/// a pointwise output projection. Temporal length is preserved.
#[derive(Clone, Debug)]
pub struct MultiScaleBlock {
    in_proj: Conv1d,
    in_act: PRelu,
    in_norm: GlobalLayerNorm,
    stages: Vec<Stage>,
    out_proj: Conv1d,
    pub in_channels: usize,
    pub width: usize,
    pub out_channels: usize,
    pub depth: usize,
    pub frames: usize,
}

impl MultiScaleBlock {
    /// Registers parameters under `name.*`. `frames` is the temporal length the
    /// block will run at; it must be at least `2^depth`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        width: usize,
        out_channels: usize,
        depth: usize,
        frames: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut problems = Vec::new();
        if depth >= usize::BITS as usize || frames < (1usize << depth) {
            problems.push(format!("{name}: {frames} frames is fewer than 2^depth = 2^{depth}"));
        }
        if in_channels == 0 || width == 0 || out_channels == 0 {
            problems.push(format!("{name}: channel counts must be positive"));
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let in_proj = Conv1d::pointwise(store, &format!("{name}.in_proj"), in_channels, width, rng)?;
        let in_act = PRelu::new(store, &format!("{name}.in_act"), width)?;
        let in_norm = GlobalLayerNorm::new(store, &format!("{name}.in_norm"), width)?;
        let mut stages = Vec::with_capacity(depth);
        for d in 0..depth {
            let base = format!("{name}.stage{d}");
            stages.push(Stage {
                down: DepthwiseConv1d::new(
                    store,
                    &format!("{base}.down"),
                    width,
                    DOWN_KERNEL,
                    2,
                    DOWN_KERNEL / 2,
                    rng,
                )?,
                mix: Conv1d::pointwise(store, &format!("{base}.mix"), width, width, rng)?,
                act: PRelu::new(store, &format!("{base}.act"), width)?,
                norm: GlobalLayerNorm::new(store, &format!("{base}.norm"), width)?,
            });
        }
        let out_proj = Conv1d::pointwise(store, &format!("{name}.out_proj"), width, out_channels, rng)?;
        Ok(MultiScaleBlock {
            in_proj,
            in_act,
            in_norm,
            stages,
            out_proj,
            in_channels,
            width,
            out_channels,
            depth,
            frames,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[0] != self.in_channels {
            return Err(Error::shape(
                "multiscale_forward",
                format!("axis 0 (channels): expected {}, got shape {shape:?}", self.in_channels),
            ));
        }
        if shape[1] < (1 << self.depth) {
            return Err(Error::shape(
                "multiscale_forward",
                format!("axis 1 (time): {} frames < 2^{}", shape[1], self.depth),
            ));
        }
        let h = self.in_proj.forward(g, p, x)?;
        let h = self.in_act.forward(g, p, h)?;
        let mut levels = vec![self.in_norm.forward(g, p, h)?];
        for stage in &self.stages {
            let next = stage.forward(g, p, *levels.last().unwrap())?;
            levels.push(next);
        }
        let mut top = levels.pop().unwrap();
        while let Some(skip) = levels.pop() {
            let len = g.shape(skip)[1];
            let up = g.upsample_nearest2(top, len)?;
            top = g.add(skip, up)?;
        }
        self.out_proj.forward(g, p, top)
    }

    /// Closed form: `in·w + w` (input projection) `+ 3w` (PReLU, norm)
    /// `+ depth·(w·K + w + w² + w + 3w)` `+ w·out + out`.
    pub fn param_count_formula(in_channels: usize, width: usize, out_channels: usize, depth: usize) -> usize {
        let w = width;
        (in_channels * w + w)
            + 3 * w
            + depth * (w * DOWN_KERNEL + w + w * w + w + 3 * w)
            + (w * out_channels + out_channels)
    }

    pub fn param_count(&self) -> usize {
        let stages: usize = self
            .stages
            .iter()
            .map(|s| s.down.param_count() + s.mix.param_count() + s.act.param_count() + s.norm.param_count())
            .sum();
        self.in_proj.param_count()
            + self.in_act.param_count()
            + self.in_norm.param_count()
            + stages
            + self.out_proj.param_count()
    }

    /// Multiply-accumulates for one forward pass at `frames` length.
    pub fn macs(&self, frames: usize) -> u64 {
        let mut total = self.in_proj.macs(frames) + self.out_proj.macs(frames);
        let mut len = frames;
        for s in &self.stages {
            total += s.down.macs(len);
            len = s.down.out_len(len);
            total += s.mix.macs(len);
        }
        total
    }
}
