//! Fixtures shared by the criterion benches.

use mcfl_core::engine::{self, ClientState, HyperParams};
use mcfl_core::{Activation, DataSpec, ModelArch, SynthSpec};

pub fn arch() -> ModelArch {
    ModelArch::new(vec![10, 16, 4], Activation::Tanh).expect("valid arch")
}

/// `m` synthetic clients with two latent clusters, all at the shared init.
pub fn clients(m: usize) -> Vec<ClientState> {
    let data = DataSpec::Synthetic(SynthSpec::new(m, 2, 50, 10, 4))
        .build(0, std::path::Path::new("."))
        .expect("synthetic data");
    let init = engine::initial_model(&arch(), 0);
    engine::build_clients(&data, &init).expect("clients")
}

pub fn hyper(k: usize) -> HyperParams {
    HyperParams {
        k,
        lr: 0.5,
        weight_local_loss: false,
        ..HyperParams::default()
    }
}
