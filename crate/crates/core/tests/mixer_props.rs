//! Monotonic mixing, IGM and agent-permutation invariance.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tgcnet::mixer::{gcn_layer, normalized_constant, Activation, Mixer, MixerConfig, StateSource};
use tgcnet::nn::{ParamStore, Session};
use tgcnet::tensor::Tensor;

const SOURCES: [StateSource; 3] = [
    StateSource::Coarsened,
    StateSource::AggOverlap,
    StateSource::TrueState,
];

fn config(n: usize, source: StateSource) -> MixerConfig {
    MixerConfig {
        n_agents: n,
        obs_size: 3,
        true_state_size: 4,
        state_dim: 6,
        gcn_layers: 3,
        gcn_dim: 6,
        gcn_weights: true,
        gcn_activation: Activation::Elu,
        readout_activation: Activation::Tanh,
        embed: 5,
        hyper_hidden: 7,
        source,
    }
}

struct Draw {
    adjacency: Vec<f64>,
    obs: Vec<f64>,
    state: Vec<f64>,
}

fn draw(rng: &mut ChaCha8Rng, n: usize) -> Draw {
    let adjacency = (0..n * n)
        .map(|k| {
            if k / n != k % n && rng.random::<bool>() {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Draw {
        adjacency,
        obs: (0..n * 3).map(|_| rng.random_range(-2.0..2.0)).collect(),
        state: (0..4).map(|_| rng.random_range(-2.0..2.0)).collect(),
    }
}

/// `Q_tot` for every row of `qs` (`[m × n]`) under one draw.
fn q_tot(mixer: &Mixer, store: &ParamStore, d: &Draw, qs: &[f64]) -> Vec<f64> {
    let n = mixer.config.n_agents;
    let m = qs.len() / n;
    let mut s = Session::new(store, false);
    let q = s.g.constant(vec![m, n], qs.to_vec()).unwrap();
    let a = s.g.constant(vec![m, n, n], d.adjacency.repeat(m)).unwrap();
    let o = s.g.constant(vec![m, n, 3], d.obs.repeat(m)).unwrap();
    let st = s.g.constant(vec![m, 4], d.state.repeat(m)).unwrap();
    let out = mixer.forward(&mut s, q, a, o, st).unwrap();
    s.g.value(out).to_vec()
}

#[test]
fn dq_tot_dq_is_nonnegative_on_100_draws() {
    let mut worst = f64::INFINITY;
    for k in 0..100u64 {
        let source = SOURCES[k as usize % 3];
        let n = 2 + (k as usize % 2);
        let mut rng = ChaCha8Rng::seed_from_u64(k);
        let mut store = ParamStore::new();
        let mixer = Mixer::new(&mut store, "m", config(n, source), &mut rng).unwrap();
        let d = draw(&mut rng, n);
        let q: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut s = Session::new(&store, false);
        let qv = s.g.leaf(&Tensor::new(vec![2, n], q).unwrap().with_grad());
        let a = s.g.constant(vec![2, n, n], d.adjacency.repeat(2)).unwrap();
        let o = s.g.constant(vec![2, n, 3], d.obs.repeat(2)).unwrap();
        let st = s.g.constant(vec![2, 4], d.state.repeat(2)).unwrap();
        let out = mixer.forward(&mut s, qv, a, o, st).unwrap();
        let total = s.g.sum_all(out).unwrap();
        s.g.backward(total).unwrap();
        for &g in s.g.grad(qv).unwrap() {
            worst = worst.min(g);
        }
    }
    assert!(worst >= -1e-8, "most negative dQ_tot/dq = {worst}");
}

#[test]
fn raising_any_q_never_lowers_q_tot() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for source in SOURCES {
        let mut store = ParamStore::new();
        let mixer = Mixer::new(&mut store, "m", config(3, source), &mut rng).unwrap();
        let d = draw(&mut rng, 3);
        for _ in 0..20 {
            let base: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut rows = base.clone();
            for i in 0..3 {
                for delta in [1e-3, 0.1, 1.0, 10.0] {
                    let mut q = base.clone();
                    q[i] += delta;
                    rows.extend(q);
                }
            }
            let out = q_tot(&mixer, &store, &d, &rows);
            for v in &out[1..] {
                assert!(*v >= out[0] - 1e-12, "{source:?}: {v} < {}", out[0]);
            }
        }
    }
}

/// Every joint action of `n` agents with `a` actions each, agent 0 slowest.
fn joint_actions(n: usize, a: usize) -> Vec<Vec<usize>> {
    (0..a.pow(n as u32))
        .map(|mut code| {
            let mut acts = vec![0; n];
            for slot in acts.iter_mut().rev() {
                *slot = code % a;
                code /= a;
            }
            acts
        })
        .collect()
}

#[test]
fn individual_greedy_attains_joint_maximum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut instances = 0;
    for n in 1..=3 {
        for actions in 2..=4 {
            for source in SOURCES {
                for _ in 0..4 {
                    let mut store = ParamStore::new();
                    let mixer = Mixer::new(&mut store, "m", config(n, source), &mut rng).unwrap();
                    let d = draw(&mut rng, n);
                    let table: Vec<f64> = (0..n * actions)
                        .map(|_| rng.random_range(-5.0..5.0))
                        .collect();
                    let joints = joint_actions(n, actions);
                    let rows: Vec<f64> = joints
                        .iter()
                        .flat_map(|j| {
                            (0..n)
                                .map(|i| table[i * actions + j[i]])
                                .collect::<Vec<_>>()
                        })
                        .collect();
                    let values = q_tot(&mixer, &store, &d, &rows);
                    let best = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let greedy: Vec<usize> = (0..n)
                        .map(|i| {
                            let row = &table[i * actions..(i + 1) * actions];
                            (0..actions).fold(0, |b, a| if row[a] > row[b] { a } else { b })
                        })
                        .collect();
                    let at = joints.iter().position(|j| *j == greedy).unwrap();
                    assert!(values[at] >= best - 1e-12, "n={n} |A|={actions} {source:?}");
                    instances += 1;
                }
            }
        }
    }
    assert_eq!(instances, 3 * 3 * 3 * 4);
}

fn permute(n: usize, d: &Draw, q: &[f64], p: &[usize]) -> (Draw, Vec<f64>) {
    let mut adjacency = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            adjacency[i * n + j] = d.adjacency[p[i] * n + p[j]];
        }
    }
    let obs = p
        .iter()
        .flat_map(|&k| d.obs[k * 3..k * 3 + 3].to_vec())
        .collect();
    let q = p.iter().map(|&k| q[k]).collect();
    (
        Draw {
            adjacency,
            obs,
            state: d.state.clone(),
        },
        q,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn graph_sources_are_permutation_invariant(seed in any::<u64>(), n in 2usize..5, rot in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<usize> = (0..n).map(|i| (i + rot) % n).rev().collect();
        for source in [StateSource::Coarsened, StateSource::AggOverlap] {
            let mut store = ParamStore::new();
            let mixer = Mixer::new(&mut store, "m", config(n, source), &mut rng).unwrap();
            let d = draw(&mut rng, n);
            let q: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (dp, qp) = permute(n, &d, &q, &p);
            let a = q_tot(&mixer, &store, &d, &q)[0];
            let b = q_tot(&mixer, &store, &dp, &qp)[0];
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{:?}: {} vs {}", source, a, b);
        }
    }

    #[test]
    fn gcn_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = draw(&mut rng, n);
        let p: Vec<usize> = {
            let mut p: Vec<usize> = (0..n).collect();
            p.rotate_left(1);
            p.swap(0, n - 1);
            p
        };
        let (dp, _) = permute(n, &d, &vec![0.0; n], &p);
        let w: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let run = |d: &Draw| {
            let store = ParamStore::new();
            let mut s = Session::new(&store, false);
            let a = s.g.constant(vec![1, n, n], d.adjacency.clone()).unwrap();
            let a_hat = normalized_constant(&mut s, a).unwrap();
            let x = s.g.constant(vec![1, n, 3], d.obs.clone()).unwrap();
            let wv = s.g.constant(vec![3, 4], w.clone()).unwrap();
            let y = gcn_layer(&mut s, a_hat, x, Some(wv), Activation::Tanh).unwrap();
            s.g.value(y).to_vec()
        };
        let (y, yp) = (run(&d), run(&dp));
        for (i, &k) in p.iter().enumerate() {
            for c in 0..4 {
                prop_assert!((yp[i * 4 + c] - y[k * 4 + c]).abs() < 1e-12);
            }
        }
    }
}
