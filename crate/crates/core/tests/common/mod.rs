#![allow(dead_code)]

use sp3_core::model::{train_toy, Arch, Dataset, MajorityTask, ModelConfig, TrainSettings, TransformerModel};

pub fn task() -> MajorityTask {
    MajorityTask::new(8, 9).unwrap()
}

pub fn trained(arch: Arch) -> (TransformerModel, Dataset) {
    trained_with(ModelConfig::toy(arch))
}

pub fn trained_with(config: ModelConfig) -> (TransformerModel, Dataset) {
    let mut model = TransformerModel::random(config).unwrap();
    let train = task().generate(800, 11);
    let settings = TrainSettings {
        epochs: 8,
        batch_size: 32,
        lr: 1e-2,
        seed: 1,
    };
    train_toy(&mut model, &train, &settings).unwrap();
    (model, train)
}

pub fn seqs(data: &Dataset) -> Vec<Vec<usize>> {
    data.iter().map(|e| e.tokens.clone()).collect()
}
