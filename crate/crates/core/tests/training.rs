//! Optimizers, the pre-training loop and downstream finetuning.

use cmssl_core::contrastive::ContrastiveConfig;
use cmssl_core::dataset::{Dataset, Label, Sample};
use cmssl_core::downstream::{finetune, DownstreamModel, FinetuneConfig, FinetuneMode, Initialization};
use cmssl_core::encoders::{default_encoder_spec, Encoder, EncoderBundle, EncoderSpec, ModalitySpec};
use cmssl_core::optim::{optimizer_step, OptimizerConfig, OptimizerKind, OptimizerState};
use cmssl_core::synth::{generate_synthetic, SynthSpec};
use cmssl_core::trainer::{batch_objective, pretrain_pool, train_step, PretrainConfig, Pretrainer};
use cmssl_core::views::{make_views, AugmentationConfig, View};
use cmssl_core::{rng, Error, ParamSet, Tensor};

fn small_data() -> Dataset {
    generate_synthetic(&SynthSpec { samples_per_class: 8, negative_samples: 8, ..SynthSpec::default() }, 4).unwrap()
}

fn encoders(ds: &Dataset) -> Vec<Encoder> {
    let top = ds.modalities.iter().map(|m| m.pixels()).max().unwrap();
    ds.modalities.iter().map(|m| Encoder::new(m.clone(), default_encoder_spec(m.pixels() == top)).unwrap()).collect()
}

fn pretrain_cfg(ds: &Dataset, epochs: usize, seed: u64) -> PretrainConfig {
    PretrainConfig {
        encoders: encoders(ds),
        contrastive: ContrastiveConfig::default(),
        augmentation: AugmentationConfig::default(),
        optimizer: OptimizerConfig { epochs, batch_size: 16, ..OptimizerConfig::default() },
        seed,
    }
}

fn bits(p: &ParamSet) -> Vec<(String, Vec<u64>)> {
    p.iter().map(|(n, t)| (n.clone(), t.values().iter().map(|v| v.to_bits()).collect())).collect()
}

fn with_grad(values: &[f64], grad: &[f64]) -> ParamSet {
    let mut t = Tensor::from_vec(values.to_vec()).unwrap().requiring_grad();
    t.grad_mut().unwrap().copy_from_slice(grad);
    let mut p = ParamSet::new();
    p.insert("w", t).unwrap();
    p
}

#[test]
fn adam_matches_scripted_reference() {
    // f(w) = Σ wᵢ², so the gradient is 2w; five steps from a fixed start.
    let cfg = OptimizerConfig { learning_rate: 0.05, ..OptimizerConfig::default() };
    let mut w = vec![1.0, -0.5, 2.0];
    let mut params = with_grad(&w, &[0.0; 3]);
    let mut state = OptimizerState::default();
    let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
    for step in 1..=5 {
        let g: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
        params.get_mut("w").unwrap().grad_mut().unwrap().copy_from_slice(&g);
        optimizer_step(&mut params, &cfg, &mut state).unwrap();
        for i in 0..3 {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let mhat = m[i] / (1.0 - 0.9f64.powi(step));
            let vhat = v[i] / (1.0 - 0.999f64.powi(step));
            w[i] -= 0.05 * mhat / (vhat.sqrt() + 1e-8);
        }
        for (a, b) in params.get("w").unwrap().values().iter().zip(&w) {
            assert!((a - b).abs() <= 1e-12, "step {step}: {a} vs {b}");
        }
    }
    // First step on w² from w₀ = 1 moves by almost exactly the learning rate.
    let mut p = with_grad(&[1.0], &[2.0]);
    optimizer_step(&mut p, &OptimizerConfig::default(), &mut OptimizerState::default()).unwrap();
    assert!((p.get("w").unwrap().values()[0] - (1.0 - 1e-3 * 2.0 / (2.0 + 1e-8))).abs() <= 1e-12);
}

#[test]
fn sgd_cases() {
    let plain = OptimizerConfig { kind: OptimizerKind::Sgd, learning_rate: 0.1, momentum: 0.0, ..OptimizerConfig::default() };
    let mut p = with_grad(&[1.0], &[2.0]);
    optimizer_step(&mut p, &plain, &mut OptimizerState::default()).unwrap();
    assert!((p.get("w").unwrap().values()[0] - 0.8).abs() < 1e-15);

    // Momentum buffer b ← μb + g, w ← w − lr·b, scripted for three steps.
    let cfg = OptimizerConfig { kind: OptimizerKind::Sgd, learning_rate: 0.1, momentum: 0.9, ..OptimizerConfig::default() };
    let (mut w, mut b) = (1.0f64, 0.0f64);
    let mut p = with_grad(&[w], &[0.0]);
    let mut state = OptimizerState::default();
    for _ in 0..3 {
        let g = 2.0 * w;
        p.get_mut("w").unwrap().grad_mut().unwrap()[0] = g;
        optimizer_step(&mut p, &cfg, &mut state).unwrap();
        b = 0.9 * b + g;
        w -= 0.1 * b;
        assert!((p.get("w").unwrap().values()[0] - w).abs() <= 1e-12);
    }
}

#[test]
fn zero_learning_rate_is_a_bitwise_no_op() {
    let ds = small_data();
    let mut bundle = EncoderBundle::init(encoders(&ds), 3).unwrap();
    let before = bits(&bundle.params);
    let views = batch_views(&ds, &[0, 1, 2, 3], 0);
    let cfg = OptimizerConfig { learning_rate: 0.0, ..OptimizerConfig::default() };
    let mut state = OptimizerState::default();
    train_step(&mut bundle, &views, &ContrastiveConfig::default(), &cfg, &mut state).unwrap();
    assert_eq!(bits(&bundle.params), before);
}

#[test]
fn negative_learning_rate_is_rejected() {
    let mut p = with_grad(&[1.0], &[1.0]);
    let cfg = OptimizerConfig { learning_rate: -1.0, ..OptimizerConfig::default() };
    assert!(matches!(optimizer_step(&mut p, &cfg, &mut OptimizerState::default()), Err(Error::Config(_))));
    assert_eq!(p.get("w").unwrap().values(), &[1.0]);
}

fn batch_views(ds: &Dataset, positions: &[usize], seed: u64) -> Vec<View> {
    let mut r = rng::stream(seed, "test/views", &[]);
    positions
        .iter()
        .flat_map(|&i| make_views(&ds.samples[i], &[0, 1, 2], &AugmentationConfig::default(), &mut r).unwrap())
        .collect()
}

fn loss_of(bundle: &EncoderBundle, views: &[View]) -> f64 {
    let obj = batch_objective(bundle, views, &ContrastiveConfig::default(), false).unwrap().unwrap();
    obj.graph.value(obj.loss)[0]
}

#[test]
fn small_step_never_increases_the_batch_loss() {
    let ds = small_data();
    let cfg = OptimizerConfig { kind: OptimizerKind::Sgd, learning_rate: 1e-4, momentum: 0.0, ..OptimizerConfig::default() };
    for seed in 0..10u64 {
        let mut bundle = EncoderBundle::init(encoders(&ds), seed).unwrap();
        let positions: Vec<usize> = (0..5).map(|k| (seed as usize * 7 + k * 11) % ds.samples.len()).collect();
        let views = batch_views(&ds, &positions, seed);
        let before = loss_of(&bundle, &views);
        let reported = train_step(&mut bundle, &views, &ContrastiveConfig::default(), &cfg, &mut OptimizerState::default())
            .unwrap()
            .unwrap();
        assert_eq!(reported, before);
        let after = loss_of(&bundle, &views);
        assert!(after <= before + 1e-12, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let ds = small_data();
    let bundle = EncoderBundle::init(encoders(&ds), 1).unwrap();
    let mut seen: Vec<(String, f64)> = bundle.params.names().map(|n| (n.clone(), 0.0)).collect();
    for b in 0..5u64 {
        let positions: Vec<usize> = (0..6).map(|k| (b as usize * 13 + k * 5) % ds.samples.len()).collect();
        let views = batch_views(&ds, &positions, b);
        let mut obj = batch_objective(&bundle, &views, &ContrastiveConfig::default(), true).unwrap().unwrap();
        obj.graph.backward(obj.loss).unwrap();
        let mut params = bundle.params.clone();
        params.zero_grad();
        obj.bound.accumulate_into(&obj.graph, &mut params);
        for (name, total) in &mut seen {
            *total += params.get(name).unwrap().grad().unwrap().iter().map(|g| g.abs()).sum::<f64>();
        }
    }
    for (name, total) in seen {
        assert!(total > 0.0, "{name} never received a gradient");
    }
}

#[test]
fn perturbing_one_modality_leaves_the_others_bit_identical() {
    let ds = small_data();
    let bundle = EncoderBundle::init(encoders(&ds), 2).unwrap();
    let mut perturbed = bundle.clone();
    for (name, t) in perturbed.params.iter_mut() {
        if name.starts_with("S1/") {
            t.values_mut().iter_mut().for_each(|v| *v += 0.25);
        }
    }
    let imgs = |m: usize| (0..4).map(|i| &ds.samples[i].images[m]).collect::<Vec<_>>();
    assert_ne!(bundle.encode_batch(0, &imgs(0)).unwrap(), perturbed.encode_batch(0, &imgs(0)).unwrap());
    for m in [1, 2] {
        let a = bundle.encode_batch(m, &imgs(m)).unwrap();
        let b = perturbed.encode_batch(m, &imgs(m)).unwrap();
        let to_bits = |rows: &Vec<Vec<f64>>| rows.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(to_bits(&a), to_bits(&b));
    }
}

#[test]
fn resuming_from_a_saved_state_is_bit_exact() {
    let ds = small_data();
    let cfg = pretrain_cfg(&ds, 3, 17);
    let full = Pretrainer::new(&ds, pretrain_pool(&ds), cfg.clone()).unwrap().run(|_, _| {}).unwrap();

    let mut first = Pretrainer::new(&ds, pretrain_pool(&ds), cfg.clone()).unwrap();
    first.run_epoch().unwrap();
    let saved = first.state().clone();
    drop(first);
    let resumed = Pretrainer::resume(&ds, pretrain_pool(&ds), cfg.clone(), saved).unwrap();
    assert_eq!(resumed.epochs_done(), 1);
    let resumed = resumed.run(|_, _| {}).unwrap();

    assert_eq!(bits(&full.final_bundle.params), bits(&resumed.final_bundle.params));
    assert_eq!(bits(&full.best_bundle.params), bits(&resumed.best_bundle.params));
    assert_eq!(full.history, resumed.history);

    let other_seed = PretrainConfig { seed: 18, ..cfg };
    let state = Pretrainer::new(&ds, pretrain_pool(&ds), pretrain_cfg(&ds, 3, 17)).unwrap().state().clone();
    assert!(matches!(Pretrainer::resume(&ds, pretrain_pool(&ds), other_seed, state), Err(Error::Config(_))));
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let ds = small_data();
    let a = Pretrainer::new(&ds, pretrain_pool(&ds), pretrain_cfg(&ds, 2, 5)).unwrap().run(|_, _| {}).unwrap();
    let b = Pretrainer::new(&ds, pretrain_pool(&ds), pretrain_cfg(&ds, 2, 5)).unwrap().run(|_, _| {}).unwrap();
    assert_eq!(bits(&a.final_bundle.params), bits(&b.final_bundle.params));
    let c = Pretrainer::new(&ds, pretrain_pool(&ds), pretrain_cfg(&ds, 2, 6)).unwrap().run(|_, _| {}).unwrap();
    assert_ne!(bits(&a.final_bundle.params), bits(&c.final_bundle.params));
}

#[test]
fn pretraining_reduces_loss_without_collapse() {
    let ds = generate_synthetic(&SynthSpec::default(), 0).unwrap();
    let cfg = PretrainConfig { optimizer: OptimizerConfig { epochs: 30, ..OptimizerConfig::default() }, ..pretrain_cfg(&ds, 30, 1) };
    let out = Pretrainer::new(&ds, pretrain_pool(&ds), cfg).unwrap().run(|_, _| {}).unwrap();
    let h = &out.history;
    assert_eq!(h.len(), 30);
    assert!(h.iter().all(|e| e.mean_loss.is_finite()));
    assert!(h[29].mean_loss < h[0].mean_loss, "{} vs {}", h[29].mean_loss, h[0].mean_loss);
    for &(m, rank) in &h[29].effective_rank {
        assert!(rank > 1.5, "modality {m} effective rank {rank}");
    }
    assert!(h[29].per_dim_std_mean > 1e-3);
    assert!(out.best_epoch >= 1 && out.best_epoch <= 30);
}

#[test]
fn star_pretraining_needs_two_modalities_and_sees_raw_views_only() {
    let ds = small_data();
    let mut cfg = pretrain_cfg(&ds, 1, 3);
    cfg.augmentation = AugmentationConfig::disabled();
    cfg.encoders.truncate(1);
    assert!(matches!(Pretrainer::new(&ds, pretrain_pool(&ds), cfg.clone()), Err(Error::Config(_))));
    cfg.encoders = encoders(&ds)[..2].to_vec();
    let bundle = EncoderBundle::init(cfg.encoders.clone(), 0).unwrap();
    let mut r = rng::stream(0, "star", &[]);
    let views: Vec<View> = (0..4)
        .flat_map(|i| make_views(&ds.samples[i], &[0, 1], &cfg.augmentation, &mut r).unwrap())
        .collect();
    let obj = batch_objective(&bundle, &views, &cfg.contrastive, false).unwrap().unwrap();
    assert_eq!(obj.records.len(), 8);
    assert!(obj.records.iter().all(|r| !r.augmented));
    assert!(Pretrainer::new(&ds, pretrain_pool(&ds), cfg).unwrap().run(|_, _| {}).is_ok());
}

#[test]
fn unequal_embedding_widths_are_rejected() {
    let ds = small_data();
    let mut cfg = pretrain_cfg(&ds, 1, 3);
    cfg.encoders[0].spec = EncoderSpec::mlp(&[8], 16);
    assert!(matches!(Pretrainer::new(&ds, pretrain_pool(&ds), cfg), Err(Error::Config(_))));
}

/// Three well-separated classes in a 1×2×2 modality.
fn separable_toy() -> Dataset {
    let centres = [[3.0, 0.0, 0.0, 1.0], [-2.0, 2.5, 0.5, 0.0], [0.0, -2.0, -2.5, 0.5]];
    let mut samples = Vec::new();
    for i in 0..36 {
        let c = i % 3;
        let j = i as f64 * 0.37;
        let values: Vec<f64> = centres[c].iter().enumerate().map(|(k, v)| v + 0.4 * (j + k as f64).sin()).collect();
        samples.push(Sample { sample_id: i, label: Label::Class(c), images: vec![Tensor::new(vec![1, 2, 2], values).unwrap()] });
    }
    Dataset {
        modalities: vec![ModalitySpec::new(0, "A", 1, 2, 2)],
        class_names: vec!["a".into(), "b".into(), "c".into()],
        samples,
    }
}

/// Multiclass perceptron with bias; `true` once an epoch makes no mistakes.
fn perceptron_separates(ds: &Dataset) -> bool {
    let k = ds.num_classes();
    let mut w = vec![vec![0.0; 5]; k];
    for _ in 0..1000 {
        let mut mistakes = 0;
        for s in &ds.samples {
            let x: Vec<f64> = s.images[0].values().iter().copied().chain([1.0]).collect();
            let score = |c: usize| w[c].iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
            let pred = (0..k).max_by(|&a, &b| score(a).total_cmp(&score(b)).then(b.cmp(&a))).unwrap();
            let truth = s.label.class().unwrap();
            if pred != truth {
                mistakes += 1;
                for d in 0..5 {
                    w[truth][d] += x[d];
                    w[pred][d] -= x[d];
                }
            }
        }
        if mistakes == 0 {
            return true;
        }
    }
    false
}

#[test]
fn random_init_finetune_fits_a_separable_toy() {
    let ds = separable_toy();
    assert!(perceptron_separates(&ds));
    let enc = vec![Encoder::new(ds.modalities[0].clone(), EncoderSpec::mlp(&[8], 8)).unwrap()];
    let cfg = FinetuneConfig {
        optimizer: OptimizerConfig { epochs: 150, learning_rate: 1e-2, batch_size: 8, ..OptimizerConfig::default() },
        mode: FinetuneMode::Full,
    };
    let all: Vec<usize> = (0..ds.samples.len()).collect();
    let (_, report) = finetune(Initialization::Random(&enc), &[0], &ds, &all, &all, &cfg, 3).unwrap();
    assert_eq!(report.accuracy, 1.0);
    let support: Vec<usize> = report.confusion.iter().map(|r| r.iter().sum()).collect();
    assert_eq!(support, vec![12, 12, 12]);
}

#[test]
fn finetune_respects_checkpoint_modalities() {
    let ds = small_data();
    let split = ds.split();
    let cfg = FinetuneConfig {
        optimizer: OptimizerConfig { epochs: 1, ..FinetuneConfig::default().optimizer },
        ..FinetuneConfig::default()
    };
    let all = EncoderBundle::init(encoders(&ds), 1).unwrap();
    let init = Initialization::Pretrained { bundle: &all, star: false };
    let (_, report) = finetune(init, &[0], &ds, &split.train, &split.val, &cfg, 1).unwrap();
    assert_eq!(report.fingerprint.pretrain_modalities, Some(vec!["S1".into(), "S2".into(), "NAIP".into()]));
    assert_eq!(report.fingerprint.finetune_modalities, vec!["S1".to_string()]);

    let only_s1 = EncoderBundle::init(encoders(&ds)[..1].to_vec(), 1).unwrap();
    let init = Initialization::Pretrained { bundle: &only_s1, star: false };
    let err = finetune(init, &[1], &ds, &split.train, &split.val, &cfg, 1).unwrap_err();
    assert!(matches!(&err, Error::Config(msg) if msg.contains("S2")), "{err}");
}

#[test]
fn linear_probe_freezes_backbones_and_eval_is_deterministic() {
    let ds = small_data();
    let split = ds.split();
    let bundle = EncoderBundle::init(encoders(&ds), 4).unwrap();
    let cfg = FinetuneConfig {
        optimizer: OptimizerConfig { epochs: 3, ..FinetuneConfig::default().optimizer },
        mode: FinetuneMode::LinearProbe,
    };
    let init = Initialization::Pretrained { bundle: &bundle, star: false };
    let (model, report) = finetune(init, &[0, 2], &ds, &split.train, &split.val, &cfg, 2).unwrap();
    for (name, t) in model.params.iter().filter(|(n, _)| !n.starts_with("head/")) {
        assert_eq!(t.values(), bundle.params.get(name).unwrap().values(), "{name} moved");
    }
    assert_eq!(model.fused_dim(), 64);
    let again = model.evaluate(&ds, &split.val, report.fingerprint.clone()).unwrap();
    assert_eq!(again, report);
    let trace: usize = (0..6).map(|c| report.confusion[c][c]).sum();
    assert_eq!(report.accuracy, trace as f64 / split.val.len() as f64);
}

#[test]
fn downstream_head_is_xavier_with_zero_bias() {
    let ds = small_data();
    let bb = EncoderBundle::init(encoders(&ds)[..2].to_vec(), 0).unwrap();
    let model = DownstreamModel::new(bb, 6, 9).unwrap();
    let w = model.params.get("head/w").unwrap();
    assert_eq!(w.shape(), &[64, 6]);
    let a = (6.0f64 / 70.0).sqrt();
    assert!(w.values().iter().all(|v| v.abs() < a));
    assert!(model.params.get("head/b").unwrap().values().iter().all(|&v| v == 0.0));
}
