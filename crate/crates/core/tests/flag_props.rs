use flag_core::flag::{align_loss, DiTConfig, FlagConfig, FlagModel, GeneDiT, GfmEmbeddings};
use flag_core::graph_transformer::GraphBackboneConfig;
use flag_core::nn::{gradient_check, uniform, Activation, AdamWConfig, Mlp, ParamStore, Session};
use flag_core::sde::{standard_normal, uniform_time_grid};
use flag_core::training::{TrainExample, Trainer};
use flag_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config(hidden: usize) -> FlagConfig {
    FlagConfig {
        backbone: GraphBackboneConfig {
            hidden,
            layers: 1,
            heads: 2,
            cond_dim: 3,
            edge_dim: 2,
            ffn_mult: 2,
            time_freq_dim: 8,
            ..Default::default()
        },
        dit: DiTConfig {
            hidden,
            layers: 2,
            heads: 2,
            mlp_ratio: 2.0,
            gene_dim: 8,
            align_layer: 1,
            time_freq_dim: 8,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn example(rng: &mut ChaCha8Rng, n: usize, g: usize) -> TrainExample {
    TrainExample::new(uniform(rng, &[n, g], 1.0), uniform(rng, &[n, 3], 1.0), uniform(rng, &[n, n, 2], 1.0)).unwrap()
}

fn embeddings(rng: &mut ChaCha8Rng, g: usize, d: usize, valid: &[bool]) -> GfmEmbeddings {
    let mut f = uniform(rng, &[g, d], 1.0);
    for (i, &v) in valid.iter().enumerate() {
        if !v {
            f.data_mut()[i * d..(i + 1) * d].fill(0.0);
        }
    }
    GfmEmbeddings::new(f, valid.to_vec(), (0..g).map(|i| format!("g{i}")).collect(), "test").unwrap()
}

fn value(v: flag_core::Var<'_>) -> Tensor {
    (*v.value()).clone()
}

#[test]
fn end_to_end_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let config = FlagConfig { lambda_align: 0.5, ..small_config(16) };
    let mut store = ParamStore::new();
    let model = FlagModel::new(&mut store, &mut rng, &config, 6, Some(5)).unwrap();
    store.randomize(&mut rng, 0.3);
    let ex = example(&mut rng, 4, 6);
    let gfm = embeddings(&mut rng, 6, 5, &[true, true, false, true, true, true]);
    let noise = model.draw_noise(&mut rng, 1, 4);
    let err = gradient_check(&store, |s| Ok(model.loss(s, &[&ex], &noise, Some(&gfm))?.0), 1e-6, 4, 1e-6).unwrap();
    assert!(err < 1e-3, "end-to-end gradcheck {err}");
}

#[test]
fn loss_report_adds_up_and_zero_lambda_drops_alignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let model = FlagModel::new(&mut store, &mut rng, &small_config(8), 5, Some(4)).unwrap();
    store.randomize(&mut rng, 0.3);
    let ex = example(&mut rng, 4, 5);
    let gfm = embeddings(&mut rng, 5, 4, &[true; 5]);
    let noise = model.draw_noise(&mut rng, 1, 4);
    let tape = Tape::new();
    let s = Session::new(&tape, &store);
    let (l, r) = model.loss(&s, &[&ex], &noise, Some(&gfm)).unwrap();
    assert!((r.total - (r.l_diff + r.lambda_align * r.l_align)).abs() < 1e-9);
    assert_eq!(l.item(), r.total);
    assert!(r.l_align < 0.0 || r.l_align > 0.0);

    let zero = FlagModel { config: FlagConfig { lambda_align: 0.0, ..model.config.clone() }, ..model.clone() };
    let (_, r0) = zero.loss(&s, &[&ex], &noise, Some(&gfm)).unwrap();
    assert_eq!(r0.total, r0.l_diff);
    assert_eq!(r0.l_diff, r.l_diff);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn align_loss_is_scale_invariant(seed in 0u64..10_000, a in 0.01f64..100.0, b in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gfm = embeddings(&mut rng, 4, 3, &[true, false, true, true]);
        let p = uniform(&mut rng, &[2, 4, 3], 1.0);
        let tape = Tape::inference();
        let base = align_loss(tape.constant(p.clone()), &gfm).unwrap().item();
        let scaled_f = GfmEmbeddings { f: gfm.f.map(|v| b * v), ..gfm.clone() };
        let both = align_loss(tape.constant(p.map(|v| a * v)), &scaled_f).unwrap().item();
        prop_assert!((base - both).abs() < 1e-6);
    }

    #[test]
    fn masked_genes_drop_out_of_the_mean(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, g, d) = (3, 6, 4);
        let valid = [true, false, true, false, true, false];
        let gfm = embeddings(&mut rng, g, d, &valid);
        let p = uniform(&mut rng, &[r, g, d], 1.0);
        let tape = Tape::inference();
        let got = align_loss(tape.constant(p.clone()), &gfm).unwrap().item();
        let mut sum = 0.0;
        for row in 0..r {
            for gene in (0..g).filter(|&i| valid[i]) {
                let pv = &p.data()[(row * g + gene) * d..(row * g + gene + 1) * d];
                let fv = &gfm.f.data()[gene * d..(gene + 1) * d];
                let dot: f64 = pv.iter().zip(fv).map(|(x, y)| x * y).sum();
                let np = pv.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nf = fv.iter().map(|x| x * x).sum::<f64>().sqrt();
                sum += -dot / (np * nf + flag_core::flag::ALIGN_EPS);
            }
        }
        let want = sum / (r * 3) as f64;
        prop_assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn gene_dit_without_positions_is_gene_permutation_equivariant(
        seed in 0u64..10_000,
        perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = DiTConfig { hidden: 8, layers: 2, heads: 2, gene_dim: 4, align_layer: 1, time_freq_dim: 4, gene_positions: false, ..Default::default() };
        let mut store = ParamStore::new();
        let dit = GeneDiT::new(&mut store, &mut rng, "d", &cfg, 5).unwrap();
        store.randomize(&mut rng, 0.4);
        let x = uniform(&mut rng, &[3, 5], 1.0);
        let c = uniform(&mut rng, &[3, 8], 1.0);
        let px = Tensor::new(vec![3, 5], (0..15).map(|k| x.data()[(k / 5) * 5 + perm[k % 5]]).collect()).unwrap();
        let tape = Tape::inference();
        let s = Session::new(&tape, &store);
        let out = value(dit.forward(&s, s.constant(x), s.constant(c.clone()), None).unwrap().0);
        let pout = value(dit.forward(&s, s.constant(px), s.constant(c), None).unwrap().0);
        for k in 0..15 {
            let want = out.data()[(k / 5) * 5 + perm[k % 5]];
            prop_assert!((pout.data()[k] - want).abs() <= 1e-10 * want.abs().max(1.0));
        }
    }
}

#[test]
fn projector_alone_reaches_alignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (r, g, h, d) = (4, 6, 16, 8);
    let z = uniform(&mut rng, &[r, g, h], 1.0);
    let gfm = embeddings(&mut rng, g, d, &[true; 6]);
    let mut store = ParamStore::new();
    let proj = Mlp::new(&mut store, &mut rng, "projector", (h, h, d), Activation::Gelu);
    let lambda = 100.0;
    let mut trainer = Trainer::new(store, AdamWConfig { lr: 1e-2, weight_decay: 0.0, ..Default::default() }, 0);
    let mut last = 0.0;
    for _ in 0..1000 {
        let (a, _) = trainer
            .step(|s, _| {
                let la = align_loss(proj.forward(s, s.constant(z.clone())), &gfm)?;
                let v = la.item();
                Ok((la.scale(lambda), v))
            })
            .unwrap();
        last = a;
        if last < -0.99 {
            break;
        }
    }
    assert!(last < -0.99, "alignment stalled at {last}");
}

#[test]
fn one_step_sampler_matches_hand_stepped_heun() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let model = FlagModel::new(&mut store, &mut rng, &small_config(8), 3, None).unwrap();
    store.randomize(&mut rng, 0.3);
    let ex = example(&mut rng, 4, 3);
    let sched = model.config.schedule;
    let score = |x: &Tensor, t: f64| {
        let tape = Tape::inference();
        let s = Session::new(&tape, &store);
        value(model.score(&s, s.constant(x.clone()), &ex.cv, &ex.ce, &[t]).unwrap())
    };
    let axpy = |a: &Tensor, c: f64, b: &Tensor| a.zip_with(b, |x, y| x + c * y).unwrap();

    let sample_rng = ChaCha8Rng::seed_from_u64(99);
    let x = standard_normal(&mut sample_rng.clone(), &[1, 4, 3]).map(|v| v * sched.sigma_max);
    let g1 = sched.g_squared(1.0).unwrap();
    let g0 = sched.g_squared(0.0).unwrap();
    let d1 = score(&x, 1.0).map(|v| -0.5 * g1 * v);
    let x_euler = axpy(&x, -1.0, &d1);
    let d2 = score(&x_euler, 0.0).map(|v| -0.5 * g0 * v);
    let x1 = axpy(&axpy(&x, -0.5, &d1), -0.5, &d2);
    let want = axpy(&x1, sched.sigma_min.powi(2), &score(&x1, 0.0)).reshape(&[4, 3]).unwrap();

    let got = model.sample(&store, &ex.cv, &ex.ce, 1, &mut sample_rng.clone()).unwrap();
    assert!(got.max_abs_diff(&want) <= 1e-9 * want.data().iter().fold(1.0f64, |m, v| m.max(v.abs())));
    assert_eq!(uniform_time_grid(1), vec![1.0, 0.0]);
}

#[test]
fn untrained_model_returns_its_prior_draw() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let model = FlagModel::new(&mut store, &mut rng, &small_config(8), 3, None).unwrap();
    let ex = example(&mut rng, 4, 3);
    let sample_rng = ChaCha8Rng::seed_from_u64(6);
    let prior = standard_normal(&mut sample_rng.clone(), &[4, 3]).map(|v| v * 10.0);
    let got = model.sample(&store, &ex.cv, &ex.ce, 5, &mut sample_rng.clone()).unwrap();
    assert_eq!(got, prior);
}

#[test]
fn sampling_is_bitwise_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let model = FlagModel::new(&mut store, &mut rng, &small_config(8), 3, None).unwrap();
    store.randomize(&mut rng, 0.3);
    let ex = example(&mut rng, 4, 3);
    let a = model.sample(&store, &ex.cv, &ex.ce, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = model.sample(&store, &ex.cv, &ex.ce, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn spatial_condition_reduces_to_time_embedding_and_tracks_the_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let model = FlagModel::new(&mut store, &mut rng, &small_config(8), 3, None).unwrap();
    store.randomize(&mut rng, 0.3);
    let ex = example(&mut rng, 4, 3);
    let x_a = uniform(&mut rng, &[1, 4, 3], 1.0);
    let x_b = uniform(&mut rng, &[1, 4, 3], 1.0);
    {
        let tape = Tape::inference();
        let s = Session::new(&tape, &store);
        let a = value(model.spatial_condition(&s, s.constant(x_a.clone()), &ex.ce, &ex.cv, &[0.4]).unwrap());
        let b = value(model.spatial_condition(&s, s.constant(x_b), &ex.ce, &ex.cv, &[0.4]).unwrap());
        assert!(a.max_abs_diff(&b) > 1e-6);
    }
    model.cond_gene.zero(&mut store);
    model.cond_hidden.zero(&mut store);
    let tape = Tape::inference();
    let s = Session::new(&tape, &store);
    let c = value(model.spatial_condition(&s, s.constant(x_a), &ex.ce, &ex.cv, &[0.4]).unwrap());
    let temb = value(model.time.forward(&s, &[0.4]));
    for spot in 0..4 {
        assert_eq!(&c.data()[spot * 8..(spot + 1) * 8], temb.data());
    }
}

#[test]
fn trained_sampler_keeps_seed_variability() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n, g) = (6, 5);
    let mut store = ParamStore::new();
    let model = FlagModel::new(&mut store, &mut rng, &small_config(8), g, None).unwrap();
    let ex = example(&mut rng, n, g);
    let mut trainer = Trainer::new(store, AdamWConfig { lr: 1e-3, ..Default::default() }, 10);
    for _ in 0..100 {
        trainer
            .step(|s, rng| {
                let noise = model.draw_noise(rng, 1, n);
                model.loss(s, &[&ex], &noise, None)
            })
            .unwrap();
    }
    let draws: Vec<Tensor> =
        (0..32).map(|seed| model.sample(&trainer.store, &ex.cv, &ex.ce, 8, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()).collect();
    let mut varied = 0;
    for gene in 0..g {
        for spot in 0..n {
            let vals: Vec<f64> = draws.iter().map(|d| d.data()[spot * g + gene]).collect();
            let mean = vals.iter().sum::<f64>() / 32.0;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 31.0).sqrt();
            varied += usize::from(sd > 0.0);
        }
    }
    assert!(varied as f64 >= 0.95 * (n * g) as f64, "{varied} of {} entries vary", n * g);
}

#[test]
fn intermediate_states_have_the_requested_layer_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let model = FlagModel::new(&mut store, &mut rng, &small_config(8), 3, Some(4)).unwrap();
    let ex = example(&mut rng, 4, 3);
    let tape = Tape::inference();
    let s = Session::new(&tape, &store);
    let fw = model.forward(&s, s.constant(uniform(&mut rng, &[1, 4, 3], 1.0)), &ex.cv, &ex.ce, &[0.5], None, Some(2)).unwrap();
    assert_eq!(fw.score.shape(), vec![1, 4, 3]);
    assert_eq!(fw.inter.unwrap().shape(), vec![4, 3, 8]);
    assert!(model.forward(&s, s.constant(Tensor::zeros(&[1, 4, 3])), &ex.cv, &ex.ce, &[0.5], None, Some(3)).is_err());
}
