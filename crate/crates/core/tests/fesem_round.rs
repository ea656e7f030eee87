mod common;

use common::{arch, client, params};
use mcfl_core::engine::{self, HyperParams, RoundContext};
use mcfl_core::fesem::{self, ClusterState};
use mcfl_core::{DataSpec, SynthSpec};

#[test]
fn single_center_without_distance_term_is_mean_broadcast_sgd() {
    let a = arch(&[1, 2]);
    let mut clients = vec![
        client(0, &[1.0, -1.0], &[1, 0], &a),
        client(1, &[0.5], &[0], &a),
        client(2, &[2.0, 0.3, -0.7], &[1, 1, 0], &a),
    ];
    let init = [[0.2, -0.1, 0.0, 0.05], [0.4, 0.3, -0.2, 0.0], [-0.6, 0.1, 0.1, 0.1]];
    for (c, v) in clients.iter_mut().zip(init) {
        c.model = params(&a, &v);
    }
    let hyper = HyperParams { lambda: 0.0, lr: 0.4, k: 1, ..HyperParams::default() };
    let state = ClusterState { centers: vec![params(&a, &[9.0; 4])], assignment: vec![0; 3] };
    let ctx = RoundContext::new(&clients, 1);
    let (next, models) = fesem::fesem_round(&clients, &state, &[0, 1, 2], &ctx, &hyper).unwrap();

    let sums: Vec<f64> = (0..4).map(|j| init.iter().map(|v| v[j]).sum::<f64>() / 3.0).collect();
    let mean = params(&a, &sums);
    assert_eq!(next.centers, vec![mean.clone()]);
    assert_eq!(next.assignment, vec![0, 0, 0]);
    for (c, m) in clients.iter().zip(&models) {
        assert_eq!(m, &engine::local_update(c, &mean, &ctx, &hyper).unwrap());
    }
}

#[test]
fn models_at_distinct_centers_are_a_fixpoint() {
    // single-class data: zero supervised gradient, so local updates return the center
    let a = arch(&[1, 1]);
    let centers = vec![params(&a, &[1.0, 1.0]), params(&a, &[-2.0, 0.5])];
    let mut clients: Vec<_> = (0..4).map(|i| client(i, &[0.3 * i as f64], &[0], &a)).collect();
    for (i, c) in clients.iter_mut().enumerate() {
        c.model = centers[i % 2].clone();
    }
    let state = ClusterState { centers: centers.clone(), assignment: vec![0, 1, 0, 1] };
    let hyper = HyperParams { lambda: 3.0, lr: 1e-9, k: 2, local_steps: 4, ..HyperParams::default() };
    let ctx = RoundContext::new(&clients, 1);
    let (next, models) = fesem::fesem_round(&clients, &state, &[0, 1, 2, 3], &ctx, &hyper).unwrap();
    assert_eq!(next, state);
    for (c, m) in clients.iter().zip(&models) {
        assert_eq!(&c.model, m);
    }
}

#[test]
fn four_client_round_matches_hand_trace() {
    // arch [1, 2]: params (w0, w1, b0, b1), logits z_o = w_o x + b_o
    let a = arch(&[1, 2]);
    let mut clients = vec![
        client(0, &[1.0], &[1], &a),
        client(1, &[-1.0], &[0], &a),
        client(2, &[2.0], &[0], &a),
        client(3, &[0.5], &[1], &a),
    ];
    let locals = [[1.0, 0.0, 0.0, 0.0], [3.0, 0.0, 0.0, 0.0], [0.0, 0.0, 10.0, 0.0], [0.0, 0.0, 12.0, 0.0]];
    for (c, v) in clients.iter_mut().zip(locals) {
        c.model = params(&a, &v);
    }
    let state = ClusterState {
        centers: vec![params(&a, &[0.0; 4]), params(&a, &[0.0, 0.0, 11.0, 0.0])],
        assignment: vec![0, 0, 0, 0],
    };
    let hyper = HyperParams { lambda: 2.0, lr: 0.5, k: 2, weight_local_loss: true, ..HyperParams::default() };
    let ctx = RoundContext::new(&clients, 1);
    let (next, models) = fesem::fesem_round(&clients, &state, &[0, 1, 2, 3], &ctx, &hyper).unwrap();

    // E-step: clients 0, 1 sit near the origin, 2, 3 near (0,0,11,0).
    assert_eq!(next.assignment, vec![0, 0, 1, 1]);
    // M-step: plain means.
    let c0 = [2.0, 0.0, 0.0, 0.0];
    let c1 = [0.0, 0.0, 11.0, 0.0];
    assert_eq!(next.centers[0].values, c0.to_vec());
    assert_eq!(next.centers[1].values, c1.to_vec());

    // Local step from the center: W = C - lr * (1/4) * grad L_s (distance term is zero at C).
    let step = |c: [f64; 4], x: f64, y: usize| -> Vec<f64> {
        let z = [c[0] * x + c[2], c[1] * x + c[3]];
        let e = [z[0].exp(), z[1].exp()];
        let p = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
        let dz = [p[0] - (y == 0) as u8 as f64, p[1] - (y == 1) as u8 as f64];
        let g = [dz[0] * x, dz[1] * x, dz[0], dz[1]];
        (0..4).map(|j| c[j] - 0.5 * 0.25 * g[j]).collect()
    };
    let want = [step(c0, 1.0, 1), step(c0, -1.0, 0), step(c1, 2.0, 0), step(c1, 0.5, 1)];
    for (m, w) in models.iter().zip(&want) {
        for (x, y) in m.values.iter().zip(w) {
            assert!((x - y).abs() < 1e-14, "{:?} vs {:?}", m.values, w);
        }
    }
}

#[test]
fn non_participants_keep_their_models() {
    let a = arch(&[1, 2]);
    let mut clients: Vec<_> = (0..3).map(|i| client(i, &[i as f64 - 1.0], &[i % 2], &a)).collect();
    for (i, c) in clients.iter_mut().enumerate() {
        c.model = params(&a, &[i as f64, 0.0, 0.0, 0.0]);
    }
    let state = ClusterState { centers: vec![params(&a, &[0.0; 4])], assignment: vec![0; 3] };
    let hyper = HyperParams { k: 1, ..HyperParams::default() };
    let ctx = RoundContext::new(&clients, 1);
    let (_, models) = fesem::fesem_round(&clients, &state, &[1], &ctx, &hyper).unwrap();
    assert_eq!(models[0], clients[0].model);
    assert_eq!(models[2], clients[2].model);
    assert_ne!(models[1], clients[1].model);
}

fn permuted_config() -> (mcfl_core::FederatedDataset, mcfl_core::ModelArch, HyperParams) {
    let spec = SynthSpec::new(20, 2, 50, 10, 4);
    let ds = DataSpec::Synthetic(spec).build(5, std::path::Path::new(".")).unwrap();
    let hyper = HyperParams { lr: 0.5, weight_local_loss: false, ..HyperParams::default() };
    (ds, arch(&[10, 16, 4]), hyper)
}

#[test]
fn select_k_single_candidate_is_returned() {
    let (ds, a, hyper) = permuted_config();
    let r = fesem::select_k(&ds, &a, &[3], 8, 1, &hyper, 1).unwrap();
    assert_eq!(r.chosen, 3);
    assert_eq!(r.scores.len(), 1);
}

#[test]
fn select_k_prefers_two_on_permuted_clusters() {
    let (ds, a, hyper) = permuted_config();
    let r = fesem::select_k(&ds, &a, &[1, 2], 20, 3, &hyper, 2).unwrap();
    assert_eq!(r.chosen, 2, "{:?}", r.scores);
}

#[test]
fn select_k_ties_go_to_smaller_k() {
    // identical single-cluster devices: every K reaches the same accuracy
    let spec = SynthSpec { cluster_shift: 0.0, ..SynthSpec::new(4, 1, 2, 2, 2) };
    let ds = DataSpec::Synthetic(spec).build(1, std::path::Path::new(".")).unwrap();
    let hyper = HyperParams { lr: 1e-12, weight_local_loss: false, ..HyperParams::default() };
    let r = fesem::select_k(&ds, &arch(&[2, 2]), &[3, 2, 1], 4, 1, &hyper, 0).unwrap();
    let accs: Vec<f64> = r.scores.iter().map(|s| s.1).collect();
    assert!(accs.windows(2).all(|w| w[0] == w[1]), "{accs:?}");
    assert_eq!(r.chosen, 1);
}

#[test]
fn select_k_rejects_bad_inputs() {
    let (ds, a, hyper) = permuted_config();
    assert!(fesem::select_k(&ds, &a, &[], 4, 1, &hyper, 0).is_err());
    assert!(fesem::select_k(&ds, &a, &[1], 21, 1, &hyper, 0).is_err());
}
