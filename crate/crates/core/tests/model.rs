use binet_core::kv::KvMap;
use binet_core::model::{Branch, Session};
use binet_core::nn::{ParamId, ParamStore};
use binet_core::tensor::{Graph, Tensor, Var};
use binet_core::{BinModel, Error, ModelConfig, Rectifiers, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(variant: Variant) -> ModelConfig {
    ModelConfig {
        speakers: 2,
        samples: 400,
        enc_kernel: 16,
        enc_stride: 8,
        audio_channels: 8,
        video_channels: 6,
        video_frames: 10,
        token_channels: 3,
        iterations: 2,
        depth: 2,
        cue_dims: 3,
        variant,
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn inputs(cfg: &ModelConfig, seed: u64) -> (Tensor, Tensor) {
    (random(&[1, cfg.samples], seed), random(&[cfg.speakers * cfg.cue_dims, cfg.video_frames], seed + 1))
}

/// Moves every parameter (biases, tokens, norms) off its initial value.
fn jitter(store: &mut ParamStore, seed: u64, amount: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-amount..amount);
        }
    }
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn default_config_frames_and_kv_round_trip() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.audio_frames(), 999);
    let text = cfg.to_kv();
    assert!(text.contains("F_A = 999\n"));
    assert_eq!(ModelConfig::parse(&text).unwrap(), cfg);
    for v in Variant::ALL {
        let c = small(v);
        assert_eq!(ModelConfig::parse(&c.to_kv()).unwrap(), c);
    }
}

#[test]
fn config_errors_are_reported_together() {
    let bad = ModelConfig { token_channels: 0, iterations: 0, depth: 12, ..ModelConfig::default() };
    let Error::Config(v) = bad.validate().unwrap_err() else { panic!() };
    assert_eq!(v.len(), 3, "{v:?}");
    assert!(BinModel::build(bad, 0).is_err());

    // no_bottleneck has no tokens, so C_H is irrelevant
    let ok = ModelConfig { token_channels: 0, variant: Variant::NoBottleneck, ..ModelConfig::default() };
    ok.validate().unwrap();

    assert!(matches!(ModelConfig::parse("T = 16000\nF_A = 998\n"), Err(Error::Config(_))));
    assert!(matches!(ModelConfig::parse("bogus = 1\n"), Err(Error::Config(_))));
    assert!(matches!(ModelConfig::parse("variant = half\n"), Err(Error::Config(_))));
    assert!(matches!(KvMap::parse("no equals sign"), Err(Error::Format(_))));
}

#[test]
fn build_is_deterministic_in_seed() {
    let a = BinModel::build(small(Variant::Full), 5).unwrap();
    let b = BinModel::build(small(Variant::Full), 5).unwrap();
    let c = BinModel::build(small(Variant::Full), 6).unwrap();
    assert_eq!(a.store(), b.store());
    assert_ne!(a.store(), c.store());
}

#[test]
fn parameter_set_is_independent_of_iterations() {
    let base = BinModel::build(ModelConfig::default(), 0).unwrap();
    for r in [4, 8, 12, 16] {
        let m = BinModel::build(ModelConfig::default().with_iterations(r), 0).unwrap();
        assert_eq!(m.store().names(), base.store().names());
        assert_eq!(m.count_params(), base.count_params());
    }
}

#[test]
fn variant_token_layout() {
    for v in Variant::ALL {
        let m = BinModel::build(small(v), 1).unwrap();
        let names = m.store().names();
        let has = |n: &str| names.contains(&n);
        assert_eq!(has("tokens.audio"), v.has_audio_token(), "{v}");
        assert_eq!(has("tokens.video"), v.has_video_token(), "{v}");
        assert_eq!(names.iter().any(|n| n.starts_with("joint_generator")), v == Variant::NoBottleneck);
    }
    let nb = BinModel::build(small(Variant::NoBottleneck), 1).unwrap();
    assert!(nb.store().names().iter().all(|n| !n.starts_with("tokens")));
}

#[test]
fn audio_encoder_matches_loop_oracle() {
    let cfg = small(Variant::Full);
    let mut model = BinModel::build(cfg.clone(), 2).unwrap();
    jitter(model.store_mut(), 3, 0.2);
    let s = random(&[1, cfg.samples], 9);
    let mut sess = model.inference();
    let ea = sess.encode_audio(&s).unwrap();
    let out = sess.value(ea).clone();
    let fa = cfg.audio_frames();
    assert_eq!(out.shape(), &[cfg.audio_channels, fa]);

    let w = model.store().by_name("audio_encoder.weight").unwrap().data();
    let b = model.store().by_name("audio_encoder.bias").unwrap().data();
    let mut worst: f64 = 0.0;
    for c in 0..cfg.audio_channels {
        for f in 0..fa {
            let mut acc = b[c];
            for k in 0..cfg.enc_kernel {
                acc += w[c * cfg.enc_kernel + k] * s.data()[f * cfg.enc_stride + k];
            }
            worst = worst.max((acc - out.data()[c * fa + f]).abs());
        }
    }
    assert!(worst <= 1e-12, "{worst}");
}

#[test]
fn encoders_map_zero_to_zero_and_reject_bad_shapes() {
    let cfg = small(Variant::Full);
    let model = BinModel::build(cfg.clone(), 2).unwrap();
    let mut sess = model.inference();
    let ea = sess.encode_audio(&Tensor::zeros([1, cfg.samples])).unwrap();
    assert!(sess.value(ea).data().iter().all(|&v| v == 0.0));
    let ev = sess.encode_video(&Tensor::zeros([6, cfg.video_frames])).unwrap();
    assert_eq!(sess.value(ev).shape(), &[cfg.video_channels, cfg.audio_frames()]);
    assert!(sess.value(ev).data().iter().all(|&v| v == 0.0));

    assert!(matches!(sess.encode_audio(&Tensor::zeros([1, cfg.samples - 1])), Err(Error::Shape { .. })));
    assert!(matches!(sess.encode_video(&Tensor::zeros([3, cfg.video_frames])), Err(Error::Shape { .. })));
}

#[test]
fn video_interpolation_is_identity_when_frame_rates_match() {
    let mut cfg = small(Variant::Full);
    cfg.video_frames = cfg.audio_frames();
    let mut model = BinModel::build(cfg.clone(), 4).unwrap();
    jitter(model.store_mut(), 1, 0.1);
    let v = random(&[6, cfg.video_frames], 3);

    let mut sess = model.inference();
    let ev = sess.encode_video(&v).unwrap();
    let got = sess.value(ev).clone();

    // the same stack without the interpolation step
    let store = model.store();
    let mut g = Graph::new();
    let c = |g: &mut Graph, n: &str| g.constant(store.by_name(n).unwrap().clone());
    let x = g.constant(v);
    let (w1, b1, a, w2, b2) = (
        c(&mut g, "video_encoder.conv1.weight"),
        c(&mut g, "video_encoder.conv1.bias"),
        c(&mut g, "video_encoder.act.slope"),
        c(&mut g, "video_encoder.conv2.weight"),
        c(&mut g, "video_encoder.conv2.bias"),
    );
    let h = g.conv1d(x, w1, Some(b1), 1, 1).unwrap();
    let h = g.prelu(h, a).unwrap();
    let h = g.conv1d(h, w2, Some(b2), 1, 1).unwrap();
    assert_eq!(bits(g.value(h)), bits(&got));
}

#[test]
fn initial_state_is_zero_features_and_mean_token() {
    let cfg = small(Variant::Full);
    let mut model = BinModel::build(cfg.clone(), 7).unwrap();
    {
        let mut sess = model.inference();
        let st = sess.init_state().unwrap();
        assert_eq!(st.iteration, 0);
        assert!(sess.value(st.a_hat).data().iter().all(|&v| v == 0.0 && v.is_sign_positive()));
        assert!(sess.value(st.v_hat).data().iter().all(|&v| v == 0.0));
        let (ta, tv) = (model.audio_token().unwrap(), model.video_token().unwrap());
        let want: Vec<u64> = ta.data().iter().zip(tv.data()).map(|(a, b)| ((a + b) * 0.5).to_bits()).collect();
        assert_eq!(bits(sess.value(st.c.unwrap())), want);
    }
    let ida = model.store().id("tokens.audio").unwrap();
    let idv = model.store().id("tokens.video").unwrap();
    model.store_mut().get_mut(ida).data_mut().fill(2.0);
    model.store_mut().get_mut(idv).data_mut().fill(4.0);
    let mut sess = model.inference();
    let st = sess.init_state().unwrap();
    assert!(sess.value(st.c.unwrap()).data().iter().all(|&v| v == 3.0));
}

#[test]
fn fused_token_is_the_exact_mean_after_each_step() {
    let cfg = small(Variant::Full).with_iterations(3);
    let mut model = BinModel::build(cfg.clone(), 8).unwrap();
    jitter(model.store_mut(), 2, 0.1);
    let (s, v) = inputs(&cfg, 4);
    let mut sess = model.inference();
    let ea = sess.encode_audio(&s).unwrap();
    let ev = sess.encode_video(&v).unwrap();
    let (_, taps) = sess.run_iterations(ea, ev, true).unwrap();
    let taps = taps.unwrap();
    assert_eq!(taps.len(), 3);
    for st in &taps {
        let a = sess.value(st.c_a.unwrap()).data();
        let b = sess.value(st.c_v.unwrap()).data();
        let want: Vec<u64> = a.iter().zip(b).map(|(x, y)| ((x + y) * 0.5).to_bits()).collect();
        assert_eq!(bits(sess.value(st.c.unwrap())), want);
        assert_eq!(sess.value(st.a_hat).shape(), &[cfg.audio_channels, cfg.audio_frames()]);
        assert_eq!(sess.value(st.v_hat).shape(), &[cfg.video_channels, cfg.audio_frames()]);
    }
}

#[test]
fn probe_generator_sees_residual_inputs() {
    let cfg = small(Variant::Full);
    let mut model = BinModel::build(cfg.clone(), 9).unwrap();
    jitter(model.store_mut(), 6, 0.1);
    let (s, v) = inputs(&cfg, 11);
    let mut sess = model.inference();
    let ea = sess.encode_audio(&s).unwrap();
    let ev = sess.encode_video(&v).unwrap();
    let st0 = sess.init_state().unwrap();

    let mut seen: Vec<(Branch, Tensor)> = Vec::new();
    let mut echo = |g: &mut Graph, _: &binet_core::nn::Bound, b: Branch, x: Var| {
        seen.push((b, g.value(x).clone()));
        Ok(x)
    };
    let st1 = sess.fusion_step_with(&st0, ea, ev, &mut echo).unwrap();
    let st2 = sess.fusion_step_with(&st1, ea, ev, &mut echo).unwrap();
    assert_eq!(st2.iteration, 2);

    let cat = |a: &Tensor, b: &Tensor| {
        let mut g = Graph::new();
        let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.concat(&[a, b], 0).unwrap();
        g.value(c).clone()
    };
    let add = |a: &Tensor, b: &Tensor| {
        Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap()
    };
    let (ea_t, ev_t) = (sess.value(ea).clone(), sess.value(ev).clone());
    let c0 = sess.value(st0.c.unwrap()).clone();
    let c1 = sess.value(st1.c.unwrap()).clone();
    // iteration 1 input: concat(0 + eA, c0); iteration 2: concat(â¹ + eA, c1)
    assert_eq!(seen[0].0, Branch::Audio);
    assert_eq!(bits(&seen[0].1), bits(&cat(&ea_t, &c0)));
    assert_eq!(seen[1].0, Branch::Video);
    assert_eq!(bits(&seen[1].1), bits(&cat(&ev_t, &c0)));
    assert_eq!(bits(&seen[2].1), bits(&cat(&add(sess.value(st1.a_hat), &ea_t), &c1)));
    assert_eq!(bits(&seen[3].1), bits(&cat(&add(sess.value(st1.v_hat), &ev_t), &c1)));
    // with an echoing generator the audio feature is simply the residual sum
    assert_eq!(bits(sess.value(st1.a_hat)), bits(&ea_t));
}

#[test]
fn stepping_past_r_is_a_contract_violation() {
    let cfg = small(Variant::Full).with_iterations(1);
    let model = BinModel::build(cfg.clone(), 1).unwrap();
    let (s, v) = inputs(&cfg, 1);
    let mut sess = model.inference();
    let ea = sess.encode_audio(&s).unwrap();
    let ev = sess.encode_video(&v).unwrap();
    let st0 = sess.init_state().unwrap();
    let st1 = sess.fusion_step(&st0, ea, ev).unwrap();
    assert!(matches!(sess.fusion_step(&st1, ea, ev), Err(Error::Contract(_))));
    // R = 1 run equals one explicit step
    let (fin, taps) = sess.run_iterations(ea, ev, false).unwrap();
    assert!(taps.is_none());
    assert_eq!(bits(sess.value(fin.a_hat)), bits(sess.value(st1.a_hat)));
}

/// Two fusion steps composed by hand from the generator blocks.
#[test]
fn two_steps_match_hand_unrolled_composition() {
    let cfg = small(Variant::Full);
    let mut model = BinModel::build(cfg.clone(), 10).unwrap();
    jitter(model.store_mut(), 7, 0.1);
    let (s, v) = inputs(&cfg, 2);

    let mut sess = model.inference();
    let ea = sess.encode_audio(&s).unwrap();
    let ev = sess.encode_video(&v).unwrap();
    let (fin, _) = sess.run_iterations(ea, ev, false).unwrap();
    let (a_got, v_got, c_got) =
        (sess.value(fin.a_hat).clone(), sess.value(fin.v_hat).clone(), sess.value(fin.c.unwrap()).clone());
    let (ea_t, ev_t) = (sess.value(ea).clone(), sess.value(ev).clone());

    let (ga, gv) = (model.audio_generator().unwrap(), model.video_generator().unwrap());
    let (ca, cv, ch) = (cfg.audio_channels, cfg.video_channels, cfg.token_channels);
    let mut g = Graph::new();
    let p = model.store().bind_frozen(&mut g);
    let ea = g.constant(ea_t);
    let ev = g.constant(ev_t);
    let ta = g.constant(model.audio_token().unwrap().clone());
    let tv = g.constant(model.video_token().unwrap().clone());
    let sum = g.add(ta, tv).unwrap();
    let mut c = g.scale(sum, 0.5).unwrap();
    let mut a = g.constant(Tensor::zeros([ca, cfg.audio_frames()]));
    let mut vh = g.constant(Tensor::zeros([cv, cfg.audio_frames()]));
    for _ in 0..2 {
        let xa = g.add(a, ea).unwrap();
        let xa = g.concat(&[xa, c], 0).unwrap();
        let ya = ga.forward(&mut g, &p, xa).unwrap();
        let pa = g.split(ya, 0, &[ca, ch]).unwrap();
        let xv = g.add(vh, ev).unwrap();
        let xv = g.concat(&[xv, c], 0).unwrap();
        let yv = gv.forward(&mut g, &p, xv).unwrap();
        let pv = g.split(yv, 0, &[cv, ch]).unwrap();
        let t = g.add(pa[1], pv[1]).unwrap();
        c = g.scale(t, 0.5).unwrap();
        a = pa[0];
        vh = pv[0];
    }
    assert_eq!(bits(g.value(a)), bits(&a_got));
    assert_eq!(bits(g.value(vh)), bits(&v_got));
    assert_eq!(bits(g.value(c)), bits(&c_got));
}

#[test]
fn ablation_token_wiring() {
    for variant in [Variant::NoC, Variant::NoCA, Variant::NoCV, Variant::NoBottleneck] {
        let cfg = small(variant);
        let mut model = BinModel::build(cfg.clone(), 12).unwrap();
        jitter(model.store_mut(), 8, 0.1);
        let (s, v) = inputs(&cfg, 5);
        let mut sess = model.inference();
        let ea = sess.encode_audio(&s).unwrap();
        let ev = sess.encode_video(&v).unwrap();
        let (_, taps) = sess.run_iterations(ea, ev, true).unwrap();
        for st in taps.unwrap() {
            match variant {
                Variant::NoC => assert!(st.c.is_none() && st.c_a.is_some() && st.c_v.is_some()),
                Variant::NoCA => {
                    assert!(st.c_a.is_none());
                    assert_eq!(st.c, st.c_v);
                }
                Variant::NoCV => {
                    assert!(st.c_v.is_none());
                    assert_eq!(st.c, st.c_a);
                }
                _ => assert!(st.c.is_none() && st.c_a.is_none() && st.c_v.is_none()),
            }
        }
    }
}

#[test]
fn no_c_audio_trajectory_ignores_video() {
    let cfg = small(Variant::NoC).with_iterations(3);
    let mut model = BinModel::build(cfg.clone(), 13).unwrap();
    jitter(model.store_mut(), 4, 0.2);
    let (s, v) = inputs(&cfg, 6);
    let trajectory = |cues: &Tensor| {
        let mut sess = model.inference();
        let ea = sess.encode_audio(&s).unwrap();
        let ev = sess.encode_video(cues).unwrap();
        let (_, taps) = sess.run_iterations(ea, ev, true).unwrap();
        taps.unwrap().iter().map(|st| bits(sess.value(st.a_hat))).collect::<Vec<_>>()
    };
    assert_eq!(trajectory(&v), trajectory(&Tensor::zeros(v.shape().to_vec())));

    // the full model does route video into the audio branch
    let cfg = small(Variant::Full).with_iterations(3);
    let mut full = BinModel::build(cfg, 13).unwrap();
    jitter(full.store_mut(), 4, 0.2);
    let run = |cues: &Tensor| {
        let mut sess = full.inference();
        let ea = sess.encode_audio(&s).unwrap();
        let ev = sess.encode_video(cues).unwrap();
        let (fin, _) = sess.run_iterations(ea, ev, false).unwrap();
        bits(sess.value(fin.a_hat))
    };
    assert_ne!(run(&v), run(&Tensor::zeros(v.shape().to_vec())));
}

#[test]
fn masks_are_nonnegative_and_final_mask_is_consistent() {
    let cfg = small(Variant::Full).with_iterations(3);
    let mut model = BinModel::build(cfg.clone(), 14).unwrap();
    jitter(model.store_mut(), 5, 0.2);
    let (s, v) = inputs(&cfg, 7);
    let masks = model.per_iteration_masks(&s, &v).unwrap();
    assert_eq!(masks.len(), 3);
    for m in &masks {
        assert_eq!(m.shape(), &[2, cfg.audio_channels, cfg.audio_frames()]);
        assert!(m.data().iter().all(|&x| x >= 0.0));
    }
    let mut sess = model.inference();
    let ea = sess.encode_audio(&s).unwrap();
    let ev = sess.encode_video(&v).unwrap();
    let (fin, _) = sess.run_iterations(ea, ev, false).unwrap();
    let m = sess.predict_mask(fin.a_hat, fin.v_hat).unwrap();
    assert_eq!(bits(sess.value(m)), bits(masks.last().unwrap()));

    let per_iter = model.separate_per_iteration(&s, &v).unwrap();
    assert_eq!(bits(per_iter.last().unwrap()), bits(&model.separate(&s, &v).unwrap()));
}

#[test]
fn zero_and_identical_masks() {
    let cfg = small(Variant::Full);
    let mut model = BinModel::build(cfg.clone(), 15).unwrap();
    jitter(model.store_mut(), 3, 0.2);
    let db = model.store().id("decoder.bias").unwrap();
    model.store_mut().get_mut(db).data_mut().fill(0.0);
    let (s, _) = inputs(&cfg, 8);
    let (ca, fa) = (cfg.audio_channels, cfg.audio_frames());

    let mut sess = model.inference();
    let ea = sess.encode_audio(&s).unwrap();
    let zero = sess.graph_mut().constant(Tensor::zeros([2, ca, fa]));
    let out = sess.decode(ea, zero).unwrap();
    assert_eq!(sess.value(out).shape(), &[2, cfg.samples]);
    assert!(sess.value(out).data().iter().all(|&v| v == 0.0));

    let one = random(&[ca, fa], 30).data().iter().map(|v| v.abs()).collect::<Vec<_>>();
    let both = Tensor::new(vec![2, ca, fa], [one.clone(), one].concat()).unwrap();
    let m = sess.graph_mut().constant(both);
    let out = sess.decode(ea, m).unwrap();
    let d = sess.value(out).data();
    let (r0, r1) = d.split_at(cfg.samples);
    assert!(r0.iter().zip(r1).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(r0.iter().any(|&x| x != 0.0));
}

#[test]
fn separation_is_pure_and_shaped() {
    for variant in Variant::ALL {
        let cfg = small(variant);
        let model = BinModel::build(cfg.clone(), 16).unwrap();
        let (s, v) = inputs(&cfg, 9);
        let a = model.separate(&s, &v).unwrap();
        assert_eq!(a.shape(), &[2, cfg.samples]);
        assert_eq!(bits(&a), bits(&model.separate(&s, &v).unwrap()));
    }
}

#[test]
fn mac_breakdown_matches_executed_graph() {
    for variant in Variant::ALL {
        let cfg = small(variant).with_iterations(3);
        let model = BinModel::build(cfg.clone(), 17).unwrap();
        let (s, v) = inputs(&cfg, 10);
        let mut sess = model.inference();
        sess.separate(&s, &v).unwrap();
        assert_eq!(sess.graph().macs(), model.mac_breakdown().total(), "{variant}");
    }
}

#[test]
fn default_mac_scaling_over_iterations() {
    let macs = |r| BinModel::build(ModelConfig::default().with_iterations(r), 0).unwrap().mac_breakdown();
    let (m8, m16) = (macs(8), macs(16));
    assert!(m8.codec_fraction() < 0.05 && m16.codec_fraction() < 0.05);
    let ratio = m16.total() as f64 / m8.total() as f64;
    assert!((1.80..=2.00).contains(&ratio), "{ratio}");
}

fn probes(store: &ParamStore, n: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = store.names();
    (0..n)
        .map(|_| {
            let name = names[rng.random_range(0..names.len())];
            let id = store.id(name).unwrap();
            (id, rng.random_range(0..store.get(id).numel()))
        })
        .collect()
}

/// Weighted sum of the model output so every output element matters.
fn projected(sess: &mut Session<'_>, out: Var, w: &Tensor) -> binet_core::Result<Var> {
    let g = sess.graph_mut();
    let w = g.constant(w.clone());
    let p = g.mul(out, w)?;
    g.sum_all(p)
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for variant in [Variant::Full, Variant::NoBottleneck, Variant::NoCA] {
        let cfg = small(variant);
        let mut model = BinModel::build(cfg.clone(), 18).unwrap();
        jitter(model.store_mut(), 11, 0.15);
        let (s, v) = inputs(&cfg, 12);
        let w = random(&[2, cfg.samples], 13);
        let mut probes = probes(model.store(), 24, 3);
        // always include the tokens and the interpolated video path
        for name in ["tokens.audio", "tokens.video", "video_encoder.conv1.weight", "predictor.weight"] {
            if let Some(id) = model.store().id(name) {
                probes.push((id, 1));
            }
        }
        let err = model.grad_check(
            |sess| {
                let out = sess.separate(&s, &v)?;
                projected(sess, out, &w)
            },
            &probes,
            1e-6,
            Rectifiers::Live,
        );
        let err = err.unwrap();
        assert!(err <= 1e-3, "{variant}: {err}");
    }
}

#[test]
fn frozen_rectifiers_agree_with_live_away_from_kinks() {
    let cfg = small(Variant::Full);
    let mut model = BinModel::build(cfg.clone(), 18).unwrap();
    jitter(model.store_mut(), 11, 0.15);
    let (s, v) = inputs(&cfg, 12);
    let w = random(&[2, cfg.samples], 13);
    let probes = probes(model.store(), 24, 3);
    let f = |sess: &mut Session<'_>| {
        let out = sess.separate(&s, &v)?;
        projected(sess, out, &w)
    };
    let frozen = model.grad_check(f, &probes, 1e-6, Rectifiers::Frozen).unwrap();
    assert!(frozen <= 1e-4, "{frozen}");
}

#[test]
fn frozen_check_still_catches_a_wrong_gradient() {
    let cfg = small(Variant::Full);
    let model = BinModel::build(cfg.clone(), 19).unwrap();
    let (s, v) = inputs(&cfg, 14);
    let w = random(&[2, cfg.samples], 15);
    let probes = probes(model.store(), 12, 4);
    // Adding a detached copy of the objective doubles the true derivative
    // while the tape only sees one half.
    let f = |sess: &mut Session<'_>| {
        let out = sess.separate(&s, &v)?;
        let y = projected(sess, out, &w)?;
        let copy = sess.value(y).clone();
        let g = sess.graph_mut();
        let c = g.constant(copy);
        g.add(y, c)
    };
    let err = model.grad_check(f, &probes, 1e-6, Rectifiers::Frozen).unwrap();
    assert!((err - 0.5).abs() < 1e-3, "{err}");
    assert!(matches!(model.grad_check(f, &probes, 0.0, Rectifiers::Frozen), Err(Error::Contract(_))));
}
