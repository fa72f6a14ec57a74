use dve_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use dve_core::datasets::{synth_arm_generate, ArmDataset, ArmGenConfig, Split};
use dve_core::embedder::Arch;
use dve_core::trainer::{evaluate_loss, finetune_unsupervised, train, Supervision, TrainConfig};

fn arm(instances: usize, seed: u64) -> ArmDataset {
    synth_arm_generate(ArmGenConfig { n_instances: instances, frames_per_instance: 6, image_size: 32, seed }).unwrap()
}

fn tiny(use_dve: bool, epochs: usize) -> TrainConfig {
    TrainConfig {
        arch: Arch::SmallNet,
        input_size: Some(32),
        width_mult: 0.125,
        embed_dim: 8,
        pairs_per_batch: 4,
        aux_pool_size: 4,
        aux_per_pair: 2,
        epochs,
        batches_per_epoch: Some(15),
        lr: 3e-3,
        use_dve,
        supervision: Supervision::Flow,
        seed: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn training_lowers_the_loss() {
    let data = arm(8, 1);
    for use_dve in [false, true] {
        let state = train(&data, &tiny(use_dve, 4), &mut ()).unwrap();
        let first = state.history.first().unwrap().mean_loss;
        let last = state.history.last().unwrap().mean_loss;
        assert!(last < first, "dve={use_dve}: {first} -> {last}");
    }
}

#[test]
fn finetuning_lowers_held_out_loss() {
    let cfg = tiny(false, 2);
    let mut state = train(&arm(8, 1), &cfg, &mut ()).unwrap();
    let held_out = arm(4, 50);
    let loss_before = evaluate_loss(&mut state.model, &held_out, &cfg, 4).unwrap();
    let mut tuned = finetune_unsupervised(state.model, &held_out, &cfg, 4, &mut ()).unwrap().model;
    let loss_after = evaluate_loss(&mut tuned, &held_out, &cfg, 4).unwrap();
    assert!(loss_after < loss_before, "{loss_before} -> {loss_after}");
}

#[test]
fn checkpoint_reproduces_embeddings() {
    let state = train(&arm(6, 3), &tiny(true, 1), &mut ()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &CheckpointMeta::for_model(&state.model, "arm"), &state.model, None).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.model.state_hash(), state.model.state_hash());
    let test = arm(2, 9).to_dataset("arm", Split::Test);
    let images: Vec<_> = test.items.iter().map(|i| &i.image).collect();
    assert_eq!(loaded.model.embed(&images).unwrap(), state.model.embed(&images).unwrap());
}
