use std::time::Instant;

use stainforge_core::model::{
    global_pearson, load_checkpoint, load_trainer_state, predict_tiles, save_checkpoint, save_trainer_state,
    write_weights, AugmentConfig, CheckpointMeta, LoraConfig, LossConfig, Tensor, TrainConfig, TrainSample, Trainer,
    Translator, TranslatorConfig, ViTConfig,
};
use stainforge_core::synth::{generate_tile, training_pairs, SynthConfig};

fn small_model(markers: usize) -> TranslatorConfig {
    TranslatorConfig {
        vit: ViTConfig { patch_size: 8, depth: 2, width: 32, heads: 2, mlp_ratio: 2.0, dropout: 0.0, pos_grid: 4 },
        detail_channels: vec![8, 16, 32],
        decoder_channels: vec![32, 16, 16, 8],
        markers,
    }
}

#[test]
fn overfits_eight_tiles() {
    let cfg = SynthConfig { size: 32, nuclei_per_tile: 5, ..SynthConfig::default() };
    let tiles: Vec<_> = (0..8).map(|i| generate_tile(&cfg, i).unwrap()).collect();
    let data = training_pairs(&tiles).unwrap();
    let targets: Vec<&Tensor> = data.iter().map(|s| &s.target).collect();
    let loss = LossConfig::from_targets(&targets, 1.0).unwrap();
    let train = TrainConfig {
        lr: 3e-3,
        warmup: 20,
        batch: 8,
        epochs: 400,
        dropout: None,
        augment: AugmentConfig::disabled(),
        ..TrainConfig::default()
    };
    let model = Translator::new(small_model(3), 0).unwrap();
    let mut trainer = Trainer::new(model, train, loss).unwrap();
    let t0 = Instant::now();
    trainer.run(&data, &[], None, |_, _| Ok(())).unwrap();
    let planes: Vec<&Tensor> = data.iter().map(|s| &s.he).collect();
    let preds = predict_tiles(&trainer.model, &planes, 8).unwrap();
    let r = global_pearson(&preds, &targets);
    let last = trainer.curve.last().unwrap();
    println!("steps {} loss {:.4} pearson {:?} in {:.1?}", trainer.step, last.loss, r, t0.elapsed());
    for p in r {
        assert!(p.unwrap() > 0.95);
    }
}

fn tiny_model(markers: usize) -> TranslatorConfig {
    TranslatorConfig {
        vit: ViTConfig { patch_size: 8, depth: 1, width: 8, heads: 2, mlp_ratio: 2.0, dropout: 0.1, pos_grid: 2 },
        detail_channels: vec![4, 4, 4],
        decoder_channels: vec![4, 4, 4, 4],
        markers,
    }
}

fn tiny_data(n: usize) -> Vec<TrainSample> {
    let cfg = SynthConfig { size: 32, nuclei_per_tile: 4, seed: 11, ..SynthConfig::default() };
    let tiles: Vec<_> = (0..n).map(|i| generate_tile(&cfg, i).unwrap()).collect();
    training_pairs(&tiles).unwrap()
}

fn tiny_trainer(data: &[TrainSample], epochs: usize) -> Trainer {
    let targets: Vec<&Tensor> = data.iter().map(|s| &s.target).collect();
    let loss = LossConfig::from_targets(&targets, 1.0).unwrap();
    let train = TrainConfig { lr: 1e-3, warmup: 2, batch: 2, epochs, seed: 5, val_every: 2, ..TrainConfig::default() };
    Trainer::new(Translator::new(tiny_model(3), 5).unwrap(), train, loss).unwrap()
}

fn weight_bytes(model: &Translator) -> Vec<u8> {
    let mut buf = Vec::new();
    write_weights(model, &mut buf).unwrap();
    buf
}

#[test]
fn training_is_deterministic_with_augmentation_and_dropout() {
    let data = tiny_data(5);
    let mut a = tiny_trainer(&data, 2);
    let mut b = tiny_trainer(&data, 2);
    a.run(&data, &data[..2], None, |_, _| Ok(())).unwrap();
    b.run(&data, &data[..2], None, |_, _| Ok(())).unwrap();
    assert_eq!(a.step, 6);
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.validations, b.validations);
    assert_eq!(weight_bytes(&a.model), weight_bytes(&b.model));
    assert!(a.curve.iter().all(|r| r.loss.is_finite()));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = tiny_data(5);
    let dir = tempfile::tempdir().unwrap();
    let mut full = tiny_trainer(&data, 2);
    full.run(&data, &data[..2], None, |_, _| Ok(())).unwrap();

    let mut first = tiny_trainer(&data, 2);
    first.run(&data, &data[..2], Some(3), |_, _| Ok(())).unwrap();
    let meta = meta_for(&first);
    let state = dir.path().join("ckpt.state.json");
    save_trainer_state(&state, &first, &meta).unwrap();
    drop(first);
    let (mut resumed, _) = load_trainer_state(&state).unwrap();
    assert_eq!(resumed.step, 3);
    resumed.run(&data, &data[..2], None, |_, _| Ok(())).unwrap();
    assert_eq!(resumed.curve, full.curve);
    assert_eq!(resumed.validations, full.validations);
    assert_eq!(weight_bytes(&resumed.model), weight_bytes(&full.model));
}

fn meta_for(t: &Trainer) -> CheckpointMeta {
    CheckpointMeta {
        translator: t.model.config.clone(),
        lora: t.model.lora.clone(),
        train: t.config.clone(),
        loss: t.loss.clone(),
        panel_hash: "p".into(),
        config_hash: "c".into(),
        seed: t.config.seed,
        step: t.step,
    }
}

#[test]
fn zero_epochs_keeps_initialization() {
    let data = tiny_data(3);
    let mut t = tiny_trainer(&data, 0);
    let init = weight_bytes(&Translator::new(tiny_model(3), 5).unwrap());
    t.run(&data, &[], None, |_, _| Ok(())).unwrap();
    assert_eq!(t.step, 0);
    assert_eq!(weight_bytes(&t.model), init);
}

#[test]
fn checkpoint_round_trip() {
    let data = tiny_data(3);
    let mut t = tiny_trainer(&data, 1);
    t.run(&data, &[], None, |_, _| Ok(())).unwrap();
    t.model.apply_lora(LoraConfig { rank: 2, alpha: 1.0 }, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.sfw");
    let meta = meta_for(&t);
    save_checkpoint(&path, &t.model, &meta).unwrap();
    let (back, meta_back) = load_checkpoint(&path).unwrap();
    assert_eq!(meta_back, meta);
    assert_eq!(weight_bytes(&back), weight_bytes(&t.model));
    for (a, b) in back.params.entries().iter().zip(t.model.params.entries()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.trainable, b.trainable);
        assert!(a.value.max_abs_diff(&b.value) <= 1e-6 * b.value.data().iter().fold(1.0f64, |m, v| m.max(v.abs())));
    }
    let x = stainforge_core::model::normalize_input(&[&data[0].he]).unwrap();
    let (ya, yb) = (back.infer(x.clone()).unwrap(), t.model.infer(x).unwrap());
    assert!(ya.max_abs_diff(&yb) < 1e-4);
}

#[test]
fn lora_is_identity_at_init_on_sixteen_inputs() {
    let data = tiny_data(4);
    let mut t = tiny_trainer(&data, 1);
    t.run(&data, &[], None, |_, _| Ok(())).unwrap();
    let mut model = t.model;
    let mut rng = stainforge_core::rng::substream(21, "inputs");
    let inputs: Vec<Tensor> = (0..16)
        .map(|_| {
            use rand::Rng;
            let v = (0..3 * 32 * 32).map(|_| rng.random_range(-2.0..2.0)).collect();
            Tensor::new(vec![1, 3, 32, 32], v).unwrap()
        })
        .collect();
    let base: Vec<Tensor> = inputs.iter().map(|x| model.infer(x.clone()).unwrap()).collect();
    model.apply_lora(LoraConfig::default(), 8).unwrap();
    let worst = inputs
        .iter()
        .zip(&base)
        .map(|(x, b)| model.infer(x.clone()).unwrap().max_abs_diff(b))
        .fold(0.0, f64::max);
    assert!(worst < 1e-7, "max deviation {worst}");
}
