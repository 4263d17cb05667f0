use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use candle_core::{DType, Tensor};
use thforge_core::data::synth::{render_sample, SynthKind};
use thforge_core::data::AttackType;
use thforge_core::nn::Init;
use thforge_core::training::{
    build_param_groups, clip_grad_norm, lr_schedule, train, AdamW, EpochRecord, GroupKind, StepInfo, TrainObserver,
    TrainOptions, BEST_CHECKPOINT, HISTORY,
};
use thforge_core::{Dataset, Error, ImageSample, Label, LossConfig, ModelConfig, ModelState, TrainConfig};

fn tiny_dataset(n: usize) -> Dataset {
    let mut samples = Vec::new();
    let mut images = Vec::new();
    let mut masks = Vec::new();
    for i in 0..n {
        let kind = if i % 2 == 0 { SynthKind::BonaFide } else { SynthKind::Inpaint };
        let r = render_sample(100 + i as u64, i % 10, i % 3, kind);
        let attack = kind != SynthKind::BonaFide;
        samples.push(ImageSample {
            image_path: PathBuf::from(format!("{i}.png")),
            mask_path: attack.then(|| PathBuf::from(format!("{i}_mask.png"))),
            label: if attack { Label::Attack } else { Label::BonaFide },
            language: "english".into(),
            device: "iphone".into(),
            attack_type: attack.then_some(AttackType::SyntheticInpaint),
        });
        images.push(r.image);
        masks.push(r.mask);
    }
    Dataset::from_images(samples, images, masks, 64, DType::F32).unwrap()
}

fn quick_config(epochs: usize, freeze: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        freeze_epochs: freeze,
        batch_size: 4,
        ..TrainConfig::desk()
    }
}

#[derive(Default)]
struct Recorder {
    steps: Vec<StepInfo>,
    epochs: Vec<EpochRecord>,
}

impl TrainObserver for Recorder {
    fn on_step(&mut self, info: &StepInfo) {
        self.steps.push(info.clone());
    }

    fn on_epoch(&mut self, record: &EpochRecord) {
        self.epochs.push(record.clone());
    }
}

fn snapshot(state: &ModelState, prefix: &str) -> BTreeMap<String, Vec<u8>> {
    state
        .store()
        .tensors()
        .into_iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .map(|(k, t)| {
            let v = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            (k, v.iter().flat_map(|x| x.to_le_bytes()).collect())
        })
        .collect()
}

#[test]
fn groups_partition_parameters_with_published_rates() {
    let state = ModelState::new(&ModelConfig::desk(), 1, DType::F32, (0.0, 0.0)).unwrap();
    let groups = build_param_groups(&state, &TrainConfig::default()).unwrap();
    let lrs: Vec<f64> = groups.iter().map(|g| g.lr).collect();
    let expected = [3e-5, 1.5e-5, 1.5e-4, 1e-3, 1e-4];
    for (got, want) in lrs.iter().zip(expected) {
        assert!((got - want).abs() < 1e-15, "{lrs:?}");
    }
    assert_eq!(groups[3].weight_decay, 0.0);
    assert_eq!(groups[4].weight_decay, 0.0);

    let mut seen = BTreeSet::new();
    for g in &groups {
        assert!(!g.params.is_empty(), "{:?} is empty", g.kind);
        for (name, _) in &g.params {
            assert!(seen.insert(name.clone()), "{name} in two groups");
        }
    }
    let all: BTreeSet<String> = state.store().named_params().into_iter().map(|(n, _)| n).collect();
    assert_eq!(seen, all);
    assert!(groups[2].params.iter().any(|(n, _)| n.starts_with("aux_head.")));
    assert!(groups[0].params.iter().any(|(n, _)| n.starts_with("decoder.")));

    state.store().builder().param("stray", 1, Init::Zeros).unwrap();
    match build_param_groups(&state, &TrainConfig::default()) {
        Err(Error::Config(msg)) => assert!(msg.contains("stray"), "{msg}"),
        other => panic!("expected an orphan error, got {other:?}"),
    }
}

#[test]
fn schedule_endpoints() {
    let (base, eta) = (3e-4, 3e-7);
    assert_eq!(lr_schedule(50, 200, 50, base, eta), base);
    assert!((lr_schedule(200, 200, 50, base, eta) - eta).abs() < 1e-18);
    assert!((lr_schedule(125, 200, 50, base, eta) - (eta + 0.5 * (base - eta))).abs() < 1e-15);
    assert_eq!(lr_schedule(0, 200, 50, base, eta), 0.0);
    assert!((lr_schedule(25, 200, 50, base, eta) - base / 2.0).abs() < 1e-18);
}

#[test]
fn uncertainty_terms_are_not_decayed() {
    let state = ModelState::new(&ModelConfig::desk(), 2, DType::F32, (0.7, -0.4)).unwrap();
    let cfg = TrainConfig {
        weight_decay: 0.5,
        ..TrainConfig::default()
    };
    let groups = build_param_groups(&state, &cfg).unwrap();
    let vars: Vec<_> = groups.iter().flat_map(|g| g.params.iter().map(|(_, v)| v.clone())).collect();
    let mut opt = AdamW::new(groups);
    let before_unc = snapshot(&state, "uncertainty.");
    let before_head = snapshot(&state, "det_head.");
    for _ in 0..100 {
        // A graph touching every parameter with zero weight: gradients exist and are 0.
        let mut zero = Tensor::new(0f32, &candle_core::Device::Cpu).unwrap();
        for v in &vars {
            let t = v.as_tensor();
            zero = (zero + t.mul(&t.zeros_like().unwrap()).unwrap().sum_all().unwrap()).unwrap();
        }
        let grads = zero.backward().unwrap();
        opt.step(&grads, &[1e-2; 5]).unwrap();
    }
    assert_eq!(snapshot(&state, "uncertainty."), before_unc);
    assert_ne!(snapshot(&state, "det_head."), before_head);
}

#[test]
fn clipping_bounds_the_global_norm() {
    let state = ModelState::new(&ModelConfig::desk(), 3, DType::F32, (0.0, 0.0)).unwrap();
    let vars: Vec<_> = state.store().named_params().into_iter().map(|(_, v)| v).collect();
    let refs: Vec<_> = vars.iter().collect();
    let mut loss = Tensor::new(0f32, &candle_core::Device::Cpu).unwrap();
    for v in &vars {
        loss = (loss + (v.as_tensor().sqr().unwrap().sum_all().unwrap() * 10.0).unwrap()).unwrap();
    }
    let mut grads = loss.backward().unwrap();
    let (before, after) = clip_grad_norm(&mut grads, &refs, 1.0).unwrap();
    assert!(before > 1.0);
    assert!(after <= 1.0 + 1e-6, "{after}");
}

#[test]
fn freeze_phase_keeps_backbone_bytes() {
    let ds = tiny_dataset(8);
    let state = ModelState::new(&ModelConfig::desk(), 4, DType::F32, (0.0, 0.0)).unwrap();
    let backbone = snapshot(&state, "backbone.");
    let heads = snapshot(&state, "seg_head.");
    let opts = TrainOptions {
        stop_after_epoch: Some(1),
        ..TrainOptions::default()
    };
    train(&state, &ds, None, &LossConfig::default(), &quick_config(3, 1), &opts, &mut ()).unwrap();
    assert_eq!(snapshot(&state, "backbone."), backbone);
    assert_ne!(snapshot(&state, "seg_head."), heads);

    train(&state, &ds, None, &LossConfig::default(), &quick_config(2, 0), &TrainOptions::default(), &mut ()).unwrap();
    assert_ne!(snapshot(&state, "backbone."), backbone);
}

#[test]
fn history_clipping_and_sigma() {
    let ds = tiny_dataset(8);
    let state = ModelState::new(&ModelConfig::desk(), 5, DType::F32, (0.0, 0.0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..TrainOptions::default()
    };
    let cfg = quick_config(4, 1);
    let mut rec = Recorder::default();
    let outcome = train(&state, &ds, None, &LossConfig::default(), &cfg, &opts, &mut rec).unwrap();

    assert_eq!(rec.steps.len(), 4 * 2);
    for s in &rec.steps {
        assert!(s.clipped_grad_norm <= 1.0 + 1e-6, "step {}: {}", s.step, s.clipped_grad_norm);
        assert!(s.loss.is_finite());
    }
    assert_eq!(outcome.history.len(), 4);
    let sigmas: Vec<(f64, f64)> = outcome
        .history
        .iter()
        .map(|r| (r.sigma_det.unwrap(), r.sigma_seg.unwrap()))
        .collect();
    let tuned = &sigmas[1..];
    assert!(tuned.windows(2).any(|w| w[0].0 != w[1].0), "{sigmas:?}");
    assert!(tuned.windows(2).any(|w| w[0].1 != w[1].1), "{sigmas:?}");
    for r in &outcome.history {
        assert_eq!(r.lr.keys().cloned().collect::<Vec<_>>(), vec!["base", "det_head", "seg", "uncertainty_det", "uncertainty_seg"]);
    }
    assert!(dir.path().join(BEST_CHECKPOINT).exists());
    let history = std::fs::read_to_string(dir.path().join(HISTORY)).unwrap();
    assert_eq!(history.lines().count(), 4);
}

#[test]
fn resume_reproduces_the_trajectory() {
    let ds = tiny_dataset(8);
    let cfg = quick_config(3, 1);
    let loss_cfg = LossConfig::default();

    let full_dir = tempfile::tempdir().unwrap();
    let full = ModelState::new(&ModelConfig::desk(), 6, DType::F32, (0.0, 0.0)).unwrap();
    let mut full_rec = Recorder::default();
    let opts = TrainOptions {
        out_dir: Some(full_dir.path().to_path_buf()),
        ..TrainOptions::default()
    };
    train(&full, &ds, None, &loss_cfg, &cfg, &opts, &mut full_rec).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let first = ModelState::new(&ModelConfig::desk(), 6, DType::F32, (0.0, 0.0)).unwrap();
    let mut opts = TrainOptions {
        out_dir: Some(dir.path().to_path_buf()),
        stop_after_epoch: Some(1),
        ..TrainOptions::default()
    };
    train(&first, &ds, None, &loss_cfg, &cfg, &opts, &mut ()).unwrap();

    // A fresh state with a different seed: everything must come from the saved run.
    let resumed = ModelState::new(&ModelConfig::desk(), 99, DType::F32, (0.0, 0.0)).unwrap();
    opts.stop_after_epoch = None;
    opts.resume = true;
    let mut rec = Recorder::default();
    let outcome = train(&resumed, &ds, None, &loss_cfg, &cfg, &opts, &mut rec).unwrap();

    let tail: Vec<&StepInfo> = full_rec.steps.iter().filter(|s| s.epoch > 1).collect();
    assert_eq!(tail.len(), rec.steps.len());
    for (a, b) in tail.iter().zip(&rec.steps) {
        assert_eq!(a.step, b.step);
        assert!((a.loss - b.loss).abs() <= 1e-5 * a.loss.abs().max(1e-12), "step {}: {} vs {}", a.step, a.loss, b.loss);
        assert_eq!(a.lrs, b.lrs);
    }
    assert_eq!(outcome.history.len(), 3);
}

#[test]
fn nan_loss_aborts_with_diagnostics() {
    let ds = tiny_dataset(4);
    let state = ModelState::new(&ModelConfig::desk(), 7, DType::F32, (0.0, 0.0)).unwrap();
    let bias = state.store().get("seg_head.conv.bias").unwrap();
    bias.set(&(bias.as_tensor() * f64::NAN).unwrap()).unwrap();
    let r = train(&state, &ds, None, &LossConfig::default(), &quick_config(2, 1), &TrainOptions::default(), &mut ());
    match r {
        Err(Error::NonFiniteLoss { step, .. }) => assert_eq!(step, 1),
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}
