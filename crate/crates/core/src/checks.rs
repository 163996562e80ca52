//! Finite-difference gradient suites shared by the command line and the
//! acceptance harness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{generate_example, CorpusSpec, Split};
use crate::error::Result;
use crate::model::{BinModel, ModelConfig, Rectifiers, Variant};
use crate::nn::ParamId;
use crate::tensor::{grad_check, Graph, Tensor, Var};
use crate::train::{separation_loss, LOSS_FLOOR};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Finite-difference step for the end-to-end check.
pub const MODEL_STEP: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Checks every differentiable primitive on small random inputs. Each output
/// is reduced against a fixed random projection so all elements contribute.
pub fn primitive_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut rng, &[3, 8]);
    let other = rand_tensor(&mut rng, &[3, 8]);
    let positive = Tensor::from_fn([3, 8], |i| 0.5 + (i as f64) * 0.1);
    let w = rand_tensor(&mut rng, &[4, 3, 3]);
    let wt = rand_tensor(&mut rng, &[3, 2, 4]);
    let dw = rand_tensor(&mut rng, &[3, 1, 5]);
    let bias3 = rand_tensor(&mut rng, &[3]);
    let bias4 = rand_tensor(&mut rng, &[4]);
    let mat = rand_tensor(&mut rng, &[8, 5]);
    let slope = Tensor::full([3], 0.25);
    let gamma = rand_tensor(&mut rng, &[3]);
    let beta = rand_tensor(&mut rng, &[3]);
    let proj_seed = rng.random::<u64>();

    let mut out = Vec::new();
    let mut check = |name: &str, x: &Tensor, f: &dyn Fn(&mut Graph, Var) -> Result<Var>| -> Result<()> {
        let err = grad_check(
            |g, x| {
                let y = f(g, x)?;
                let shape = g.shape(y).to_vec();
                let mut r = ChaCha8Rng::seed_from_u64(proj_seed);
                let p = g.constant(rand_tensor(&mut r, &shape));
                g.dot(y, p)
            },
            x,
            1e-5,
        )?;
        out.push(CheckOutcome {
            name: name.into(),
            probes: x.numel(),
            max_rel_err: err,
            tolerance: PRIMITIVE_TOLERANCE,
        });
        Ok(())
    };
    let k = |g: &mut Graph, t: &Tensor| g.constant(t.clone());
    check("add", &x, &|g, x| {
        let o = k(g, &other);
        g.add(x, o)
    })?;
    check("sub", &x, &|g, x| {
        let o = k(g, &other);
        g.sub(o, x)
    })?;
    check("mul", &x, &|g, x| {
        let o = k(g, &other);
        g.mul(x, o)
    })?;
    check("mul_self", &x, &|g, x| g.mul(x, x))?;
    check("div_num", &x, &|g, x| {
        let p = k(g, &positive);
        g.div(x, p)
    })?;
    check("div_den", &positive, &|g, x| {
        let o = k(g, &other);
        g.div(o, x)
    })?;
    check("scale", &x, &|g, x| g.scale(x, -1.7))?;
    check("add_scalar", &x, &|g, x| g.add_scalar(x, 0.3))?;
    check("scale_by", &x, &|g, x| {
        let s = g.sum_all(x)?;
        g.scale_by(x, s)
    })?;
    check("matmul_lhs", &x, &|g, x| {
        let m = k(g, &mat);
        g.matmul(x, m)
    })?;
    check("matmul_rhs", &mat, &|g, m| {
        let xv = k(g, &x);
        g.matmul(xv, m)
    })?;
    check("concat", &x, &|g, x| {
        let o = k(g, &other);
        g.concat(&[o, x, x], 1)
    })?;
    check("narrow", &x, &|g, x| g.narrow(x, 1, 2, 4))?;
    check("split", &x, &|g, x| {
        let p = g.split(x, 1, &[3, 5])?;
        g.mul(p[1], p[1])
    })?;
    check("mean", &x, &|g, x| g.mean(x, 0))?;
    check("sum", &x, &|g, x| g.sum(x, 1))?;
    check("mean_all", &x, &|g, x| {
        let m = g.mean_all(x)?;
        g.mul(m, m)
    })?;
    check("dot", &x, &|g, x| {
        let o = k(g, &other);
        let d = g.dot(x, o)?;
        g.mul(d, d)
    })?;
    check("relu", &x, &|g, x| g.relu(x))?;
    check("prelu_x", &x, &|g, x| {
        let s = k(g, &slope);
        g.prelu(x, s)
    })?;
    check("prelu_slope", &slope, &|g, s| {
        let xv = k(g, &x);
        g.prelu(xv, s)
    })?;
    check("sigmoid", &x, &|g, x| g.sigmoid(x))?;
    check("ln", &positive, &|g, x| g.ln(x))?;
    check("gln_x", &x, &|g, x| {
        let (ga, be) = (k(g, &gamma), k(g, &beta));
        g.global_layer_norm(x, ga, be, 1e-8)
    })?;
    check("gln_gamma", &gamma, &|g, ga| {
        let (xv, be) = (k(g, &x), k(g, &beta));
        g.global_layer_norm(xv, ga, be, 1e-8)
    })?;
    check("gln_beta", &beta, &|g, be| {
        let (xv, ga) = (k(g, &x), k(g, &gamma));
        g.global_layer_norm(xv, ga, be, 1e-8)
    })?;
    check("conv1d_x", &x, &|g, x| {
        let (wv, b) = (k(g, &w), k(g, &bias4));
        g.conv1d(x, wv, Some(b), 2, 1)
    })?;
    check("conv1d_w", &w, &|g, wv| {
        let (xv, b) = (k(g, &x), k(g, &bias4));
        g.conv1d(xv, wv, Some(b), 2, 1)
    })?;
    check("conv1d_b", &bias4, &|g, b| {
        let (xv, wv) = (k(g, &x), k(g, &w));
        g.conv1d(xv, wv, Some(b), 2, 1)
    })?;
    check("conv_t_x", &x, &|g, x| {
        let wv = k(g, &wt);
        g.conv_transpose1d(x, wv, None, 3, 1)
    })?;
    check("conv_t_w", &wt, &|g, wv| {
        let xv = k(g, &x);
        g.conv_transpose1d(xv, wv, None, 3, 1)
    })?;
    check("depthwise_x", &x, &|g, x| {
        let (wv, b) = (k(g, &dw), k(g, &bias3));
        g.depthwise_conv1d(x, wv, b, 2, 2)
    })?;
    check("depthwise_w", &dw, &|g, wv| {
        let (xv, b) = (k(g, &x), k(g, &bias3));
        g.depthwise_conv1d(xv, wv, b, 2, 2)
    })?;
    check("depthwise_b", &bias3, &|g, b| {
        let (xv, wv) = (k(g, &x), k(g, &dw));
        g.depthwise_conv1d(xv, wv, b, 2, 2)
    })?;
    check("interpolate", &x, &|g, x| g.interpolate_time(x, 13))?;
    check("upsample", &x, &|g, x| g.upsample_nearest2(x, 15))?;
    check("reshape", &x, &|g, x| g.reshape(x, &[4, 6]))?;
    check("transpose", &x, &|g, x| g.transpose(x))?;
    check("fit_crop", &x, &|g, x| g.fit_length(x, 5))?;
    check("fit_pad", &x, &|g, x| g.fit_length(x, 11))?;
    Ok(out)
}

/// Draws `n` (parameter, element) probes; every tensor is visited before any
/// is drawn twice.
pub fn parameter_probes(model: &BinModel, n: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = model.store();
    let names = store.names();
    (0..n)
        .map(|i| {
            let name = if i < names.len() { names[i] } else { names[rng.random_range(0..names.len())] };
            let id = store.id(name).expect("name from store");
            (id, rng.random_range(0..store.get(id).numel()))
        })
        .collect()
}

/// Central differences of the separation loss on one synthetic example,
/// for each variant of `cfg`, against `probes` random parameter elements.
/// Rectifier gates are frozen at the unperturbed point: at full size there
/// are enough kinks that some lie within any usable step of a probe.
pub fn model_suite(cfg: &ModelConfig, variants: &[Variant], probes: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let spec = CorpusSpec {
        n_train: 1,
        n_val: 0,
        n_test: 0,
        samples: cfg.samples,
        speakers: cfg.speakers,
        cue_dims: cfg.cue_dims,
        video_frames: cfg.video_frames,
        seed,
        ..CorpusSpec::default()
    };
    spec.validate()?;
    let ex = generate_example(&spec, Split::Train, 0)?;
    let mut out = Vec::new();
    for &v in variants {
        let model = BinModel::build(cfg.clone().with_variant(v), seed)?;
        let p = parameter_probes(&model, probes, seed ^ 0x9e37_79b9);
        let err = model.grad_check(
            |sess| {
                let est = sess.separate(&ex.mixture, &ex.cues)?;
                separation_loss(sess.graph_mut(), est, &ex.sources, LOSS_FLOOR)
            },
            &p,
            MODEL_STEP,
            Rectifiers::Frozen,
        )?;
        out.push(CheckOutcome {
            name: format!("bin_loss_{v}"),
            probes: p.len(),
            max_rel_err: err,
            tolerance: MODEL_TOLERANCE,
        });
    }
    Ok(out)
}
