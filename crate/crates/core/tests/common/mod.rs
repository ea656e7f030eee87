#![allow(dead_code)]

use mcfl_core::engine::ClientState;
use mcfl_core::{Activation, Batch, DeviceData, Matrix, ModelArch, ModelParams};

/// Client with one-dimensional inputs and the given labels.
pub fn client(id: usize, xs: &[f64], labels: &[usize], arch: &ModelArch) -> ClientState {
    let rows: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
    let train = Batch::new(Matrix::from_rows(&rows).unwrap(), labels.to_vec()).unwrap();
    ClientState {
        device_id: id,
        data: DeviceData {
            device_id: id,
            train: train.clone(),
            test: train,
            true_cluster: None,
        },
        model: ModelParams::zeros(arch.clone()),
    }
}

pub fn arch(sizes: &[usize]) -> ModelArch {
    ModelArch::new(sizes.to_vec(), Activation::Tanh).unwrap()
}

pub fn params(arch: &ModelArch, v: &[f64]) -> ModelParams {
    ModelParams::new(arch.clone(), v.to_vec()).unwrap()
}
