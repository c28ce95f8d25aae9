use super::*;
use tempfile::tempdir;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 13,
        max_seq_len: 16,
        dim: 8,
        layers: 2,
        heads: 2,
        ff_mult: 2,
        n_segments: 3,
        init_scale: 0.4,
        seed: 7,
    }
}

fn seq_input<'a>(
    ids: &'a [u32],
    segments: &'a [u8],
    key_mask: &'a [bool],
    lambda: f64,
) -> SequenceInput<'a> {
    SequenceInput { ids, segments, key_mask, lambda }
}

#[test]
fn forward_is_deterministic() {
    let model: Model<f32> = Model::new(tiny_config()).unwrap();
    let ids = [1u32, 2, 3, 4, 5];
    let segs = [0u8, 0, 1, 1, 2];
    let mask = [false; 5];
    let a = model.forward(&seq_input(&ids, &segs, &mask, 0.5)).unwrap();
    let b = model.forward(&seq_input(&ids, &segs, &mask, 0.5)).unwrap();
    assert_eq!(a.logits, b.logits);
}

#[test]
fn out_of_range_id_is_an_input_error() {
    let model: Model<f32> = Model::new(tiny_config()).unwrap();
    let ids = [1u32, 99];
    let segs = [0u8, 0];
    let mask = [false; 2];
    let err = model.forward(&seq_input(&ids, &segs, &mask, 0.0)).err().unwrap();
    assert!(matches!(err, crate::Error::Decode { pos: 1, id: 99 }));
}

#[test]
fn changing_one_token_changes_other_logits() {
    let model: Model<f32> = Model::new(tiny_config()).unwrap();
    let segs = [0u8, 0, 1, 1, 2];
    let mask = [false; 5];
    let a = model
        .forward(&seq_input(&[1, 2, 3, 4, 5], &segs, &mask, 0.0))
        .unwrap();
    let b = model
        .forward(&seq_input(&[1, 2, 6, 4, 5], &segs, &mask, 0.0))
        .unwrap();
    // Logits at a distant position must differ: everything attends to
    // everything.
    let v = model.config.vocab_size;
    let da: Vec<f32> = a.logits[4 * v..5 * v].to_vec();
    let db: Vec<f32> = b.logits[4 * v..5 * v].to_vec();
    assert_ne!(da, db);
}

#[test]
fn masked_keys_do_not_leak_into_other_positions() {
    let model: Model<f32> = Model::new(tiny_config()).unwrap();
    let segs = [0u8, 0, 1, 1, 2];
    // Positions 3 and 4 are masked out as keys; changing their ids must not
    // change logits anywhere else.
    let mask = [false, false, false, true, true];
    let a = model
        .forward(&seq_input(&[1, 2, 3, 4, 5], &segs, &mask, 0.0))
        .unwrap();
    let b = model
        .forward(&seq_input(&[1, 2, 3, 7, 8], &segs, &mask, 0.0))
        .unwrap();
    let v = model.config.vocab_size;
    for pos in 0..3 {
        assert_eq!(
            a.logits[pos * v..(pos + 1) * v],
            b.logits[pos * v..(pos + 1) * v],
            "position {pos} leaked"
        );
    }
}

#[test]
fn permutation_equivariance_without_position_information() {
    let mut model: Model<f32> = Model::new(tiny_config()).unwrap();
    for p in model.param_mut("pos_emb") {
        *p = 0.0;
    }
    for p in model.param_mut("seg_emb") {
        *p = 0.0;
    }
    let ids = [3u32, 1, 7, 2];
    let segs = [0u8; 4];
    let mask = [false; 4];
    let fwd = model.forward(&seq_input(&ids, &segs, &mask, 0.0)).unwrap();
    let perm = [2usize, 0, 3, 1];
    let pids: Vec<u32> = perm.iter().map(|&i| ids[i]).collect();
    let pfwd = model.forward(&seq_input(&pids, &segs, &mask, 0.0)).unwrap();
    let v = model.config.vocab_size;
    for (new_pos, &old_pos) in perm.iter().enumerate() {
        for j in 0..v {
            let a = fwd.logits[old_pos * v + j];
            let b = pfwd.logits[new_pos * v + j];
            assert!((a - b).abs() < 1e-4, "logit mismatch at {new_pos},{j}");
        }
    }
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let model: Model<f64> = Model::new(tiny_config()).unwrap();
    let ids = [1u32, 2, 3, 4, 5, 6];
    let segs = [0u8, 0, 1, 1, 2, 2];
    let mask = [false, false, false, false, false, true];
    let targets = vec![
        LossTarget { pos: 2, token: 5, weight: 1.0 },
        LossTarget { pos: 4, token: 1, weight: 2.0 },
    ];
    let items = vec![LossItem {
        input: seq_input(&ids, &segs, &mask, 0.7),
        targets,
        scale: 0.5,
    }];
    let worst = finite_difference_check(&model, &items, 80, 1e-4, 99, false).unwrap();
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn mutated_gradient_fails_finite_differences() {
    let model: Model<f64> = Model::new(tiny_config()).unwrap();
    let ids = [1u32, 2, 3];
    let segs = [0u8, 0, 1];
    let mask = [false; 3];
    let items = vec![LossItem {
        input: seq_input(&ids, &segs, &mask, 0.3),
        targets: vec![LossTarget { pos: 1, token: 2, weight: 1.0 }],
        scale: 1.0,
    }];
    // Sample enough indices that index 0 (the corrupted one) is hit.
    let worst = finite_difference_check(&model, &items, 2000, 1e-4, 1, true).unwrap();
    assert!(worst > 1e-2, "mutation not detected, worst {worst}");
}

#[test]
fn empty_targets_give_zero_loss_and_grad() {
    let model: Model<f32> = Model::new(tiny_config()).unwrap();
    let ids = [1u32, 2, 3];
    let segs = [0u8, 0, 1];
    let mask = [false; 3];
    let items = vec![LossItem {
        input: seq_input(&ids, &segs, &mask, 0.0),
        targets: vec![],
        scale: 1.0,
    }];
    let (loss, grad) = loss_and_grad(&model, &items).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grad.iter().all(|&g| g == 0.0));
}

#[test]
fn doubled_weight_doubles_gradient_contribution() {
    let model: Model<f64> = Model::new(tiny_config()).unwrap();
    let ids = [1u32, 2, 3, 4];
    let segs = [0u8, 0, 1, 1];
    let mask = [false; 4];
    let make = |w: f64| {
        let items = vec![LossItem {
            input: seq_input(&ids, &segs, &mask, 0.0),
            targets: vec![LossTarget { pos: 3, token: 2, weight: w }],
            scale: 1.0,
        }];
        loss_and_grad(&model, &items).unwrap()
    };
    let (l1, g1) = make(1.0);
    let (l2, g2) = make(2.0);
    assert!((l2 - 2.0 * l1).abs() < 1e-9);
    for (a, b) in g1.iter().zip(&g2) {
        assert!((b - 2.0 * a).abs() < 1e-9);
    }
}

#[test]
fn zero_gradients_leave_parameters_unchanged() {
    let mut model: Model<f32> = Model::new(tiny_config()).unwrap();
    let before = model.params.clone();
    let grads = vec![0.0f32; model.n_params()];
    let mut opt = AdamW::new(OptimizerConfig { weight_decay: 0.0, ..Default::default() }, model.n_params());
    opt.step(&mut model, &grads).unwrap();
    assert_eq!(model.params, before);
}

#[test]
fn first_step_moves_against_gradient() {
    let mut model: Model<f32> = Model::new(tiny_config()).unwrap();
    let p0 = model.params[0];
    let mut grads = vec![0.0f32; model.n_params()];
    grads[0] = 1.0;
    let mut opt = AdamW::new(OptimizerConfig::default(), model.n_params());
    opt.step(&mut model, &grads).unwrap();
    assert!(model.params[0] < p0);
}

#[test]
fn non_finite_gradient_names_the_parameter() {
    let mut model: Model<f32> = Model::new(tiny_config()).unwrap();
    let mut grads = vec![0.0f32; model.n_params()];
    let idx = model.registry.iter().find(|p| p.name == "lambda_emb").unwrap().offset;
    grads[idx] = f32::NAN;
    let mut opt = AdamW::new(OptimizerConfig::default(), model.n_params());
    let err = opt.step(&mut model, &grads).unwrap_err();
    assert!(err.to_string().contains("lambda_emb"), "{err}");
}

#[test]
fn optimizer_runs_are_bit_identical() {
    let run = || {
        let mut model: Model<f32> = Model::new(tiny_config()).unwrap();
        let mut opt = AdamW::new(OptimizerConfig::default(), model.n_params());
        let ids = [1u32, 2, 3, 4];
        let segs = [0u8, 0, 1, 1];
        let mask = [false; 4];
        for _ in 0..100 {
            let items = vec![LossItem {
                input: seq_input(&ids, &segs, &mask, 0.5),
                targets: vec![LossTarget { pos: 2, token: 1, weight: 1.0 }],
                scale: 1.0,
            }];
            let (_, grads) = loss_and_grad(&model, &items).unwrap();
            opt.step(&mut model, &grads).unwrap();
        }
        model.params
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_round_trip_and_size() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let model: Model<f32> = Model::new(tiny_config()).unwrap();
    let layout = crate::tokens::SequenceLayout::new(crate::tokens::LayoutConfig {
        width: 4,
        height: 4,
        k_keyframes: 1,
        chunk_size: 2,
        instruction_len: 5,
    });
    let meta = CheckpointMeta {
        config: model.config.clone(),
        vocab_hash: "abc".into(),
        layout,
        train_step: 3,
        dataset_hash: None,
    };
    save_checkpoint(&path, &model, &meta).unwrap();
    let (loaded, loaded_meta) = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.params, model.params);
    assert_eq!(loaded_meta, meta);
    let size = std::fs::metadata(&path).unwrap().len() as usize;
    assert!(size <= 2 * model.n_params() * 4, "checkpoint is {size} bytes");

    let err = load_checkpoint_verified(&path, "other").unwrap_err();
    assert!(matches!(err, crate::Error::Checkpoint(_)));
    load_checkpoint_verified(&path, "abc").unwrap();
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let model: Model<f32> = Model::new(tiny_config()).unwrap();
    let layout = crate::tokens::SequenceLayout::new(crate::tokens::LayoutConfig {
        width: 4,
        height: 4,
        k_keyframes: 1,
        chunk_size: 2,
        instruction_len: 5,
    });
    let meta = CheckpointMeta {
        config: model.config.clone(),
        vocab_hash: "abc".into(),
        layout,
        train_step: 0,
        dataset_hash: None,
    };
    save_checkpoint(&path, &model, &meta).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(crate::Error::Checkpoint(_))));
}
