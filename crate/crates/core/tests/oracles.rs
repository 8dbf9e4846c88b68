//! Graph normalization, GCN and pooling against dense hand computations.

use nalgebra::DMatrix;
use proptest::prelude::*;
use tgcnet::gate::Adjacency;
use tgcnet::mixer::{
    agg_overlap, gcn_layer, normalize_adjacency, normalize_values, normalized_constant, readout,
    self_att_pool, Activation,
};
use tgcnet::nn::{Linear, ParamStore, Session};

const TOL: f64 = 1e-12;

fn assert_close(got: &[f64], want: &[f64]) {
    assert_eq!(got.len(), want.len());
    for (k, (g, w)) in got.iter().zip(want).enumerate() {
        assert!((g - w).abs() < TOL, "entry {k}: {g} vs {w}");
    }
}

fn adjacency(n: usize, edges: &[(usize, usize)]) -> Adjacency {
    let mut a = Adjacency::empty(n);
    for &(i, j) in edges {
        a.set(i, j, true);
    }
    a
}

/// `[M,n,n]` normalized adjacency and `[M,n,d]` features on a fresh tape,
/// then `f`.
fn on_tape(
    a: &Adjacency,
    x: &[f64],
    d: usize,
    f: impl FnOnce(&mut Session, tgcnet::tensor::Var, tgcnet::tensor::Var) -> tgcnet::tensor::Var,
) -> Vec<f64> {
    let store = ParamStore::new();
    let mut s = Session::new(&store, false);
    let n = a.n();
    let av = s.g.constant(vec![1, n, n], a.values()).unwrap();
    let a_hat = normalized_constant(&mut s, av).unwrap();
    let xv = s.g.constant(vec![1, n, d], x.to_vec()).unwrap();
    let out = f(&mut s, a_hat, xv);
    s.g.value(out).to_vec()
}

#[test]
fn normalization_worked_examples() {
    assert_close(
        &normalize_adjacency(&adjacency(2, &[(0, 1), (1, 0)])),
        &[0.5; 4],
    );
    assert_close(
        &normalize_adjacency(&Adjacency::empty(2)),
        &[1.0, 0.0, 0.0, 1.0],
    );
    // directed n=3: rows of A + I sum to 2, 3, 1
    let a = adjacency(3, &[(0, 1), (1, 0), (1, 2)]);
    let (r6, r3) = (1.0 / 6f64.sqrt(), 1.0 / 3f64.sqrt());
    assert_close(
        &normalize_adjacency(&a),
        &[0.5, r6, 0.0, r6, 1.0 / 3.0, r3, 0.0, 0.0, 1.0],
    );
}

#[test]
fn regular_graphs_have_unit_row_sums() {
    // all 2-regular directed graphs on 4 nodes with symmetric edges: the 4-cycles
    for perm in [[0, 1, 2, 3], [0, 2, 1, 3], [0, 1, 3, 2]] {
        let mut edges = Vec::new();
        for k in 0..4 {
            let (i, j) = (perm[k], perm[(k + 1) % 4]);
            edges.push((i, j));
            edges.push((j, i));
        }
        let a_hat = normalize_adjacency(&adjacency(4, &edges));
        for row in a_hat.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < TOL);
        }
    }
    let full = adjacency(3, &[(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]);
    assert_close(&normalize_adjacency(&full), &[1.0 / 3.0; 9]);
}

#[test]
fn gcn_layer_n2() {
    let a = adjacency(2, &[(0, 1), (1, 0)]);
    let x = [1.0, 2.0, 3.0, -1.0];
    let w = [1.0, 0.5, -1.0, 2.0];
    // ÂX = [[2, 0.5], [2, 0.5]]; ÂXW = [[1.5, 2], [1.5, 2]]
    let linear = on_tape(&a, &x, 2, |s, a_hat, xv| {
        let wv = s.g.constant(vec![2, 2], w.to_vec()).unwrap();
        gcn_layer(s, a_hat, xv, Some(wv), Activation::Identity).unwrap()
    });
    assert_close(&linear, &[1.5, 2.0, 1.5, 2.0]);
    let squashed = on_tape(&a, &x, 2, |s, a_hat, xv| {
        let wv = s.g.constant(vec![2, 2], w.to_vec()).unwrap();
        gcn_layer(s, a_hat, xv, Some(wv), Activation::Tanh).unwrap()
    });
    let (t1, t2) = (1.5f64.tanh(), 2f64.tanh());
    assert_close(&squashed, &[t1, t2, t1, t2]);
    // Â = I, identity weight and activation
    let same = on_tape(&Adjacency::empty(2), &x, 2, |s, a_hat, xv| {
        gcn_layer(s, a_hat, xv, None, Activation::Identity).unwrap()
    });
    assert_close(&same, &x);
}

#[test]
fn gcn_layer_n3_directed() {
    let a = adjacency(3, &[(0, 1), (1, 0), (1, 2)]);
    let x = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
    let (r6, r3) = (1.0 / 6f64.sqrt(), 1.0 / 3f64.sqrt());
    let got = on_tape(&a, &x, 2, |s, a_hat, xv| {
        gcn_layer(s, a_hat, xv, None, Activation::Identity).unwrap()
    });
    assert_close(&got, &[0.5, r6, r6 + r3, 1.0 / 3.0 + r3, 1.0, 1.0]);
    let elu = on_tape(&a, &[-1.0, 0.0, 0.0, 0.0, 0.0, 0.0], 2, |s, a_hat, xv| {
        gcn_layer(s, a_hat, xv, None, Activation::Elu).unwrap()
    });
    assert_close(
        &elu,
        &[(-0.5f64).exp_m1(), 0.0, (-r6).exp_m1(), 0.0, 0.0, 0.0],
    );
}

#[test]
fn pooling_worked_examples() {
    let a = adjacency(2, &[(0, 1), (1, 0)]);
    let x = [1.0, 2.0, 3.0, -1.0];
    let got = on_tape(&a, &x, 2, |s, a_hat, xv| {
        self_att_pool(s, a_hat, xv).unwrap()
    });
    let (t2, th) = (2f64.tanh(), 0.5f64.tanh());
    assert_close(&got, &[t2, 2.0 * th, 3.0 * t2, -th]);

    let a3 = adjacency(3, &[(0, 1), (1, 0), (1, 2)]);
    let x3 = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
    let r3 = 1.0 / 3f64.sqrt();
    let got = on_tape(&a3, &x3, 2, |s, a_hat, xv| {
        self_att_pool(s, a_hat, xv).unwrap()
    });
    let want = [
        0.5f64.tanh(),
        0.0,
        0.0,
        (1.0 / 3.0 + r3).tanh(),
        1f64.tanh(),
        1f64.tanh(),
    ];
    assert_close(&got, &want);

    let zero = on_tape(&a3, &[0.0; 6], 2, |s, a_hat, xv| {
        self_att_pool(s, a_hat, xv).unwrap()
    });
    assert_close(&zero, &[0.0; 6]);
}

fn identity_linear(store: &mut ParamStore, inputs: usize, outputs: usize) -> Linear {
    let lin = Linear::zeroed(store, "l", inputs, outputs);
    let w = store.get_mut(lin.w).data_mut();
    for k in 0..inputs.min(outputs) {
        w[k * outputs + k] = 1.0;
    }
    lin
}

#[test]
fn agg_overlap_worked_example() {
    let mut store = ParamStore::new();
    let lin = identity_linear(&mut store, 2, 2);
    let mut s = Session::new(&store, false);
    let x =
        s.g.constant(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 1.0])
            .unwrap();
    let (state, _) = agg_overlap(&mut s, x, &lin, Activation::Identity).unwrap();
    assert_close(s.g.value(state), &[1.0, 1.0]);
}

#[test]
fn readout_of_identical_rows_sees_v_twice() {
    let mut store = ParamStore::new();
    let lin = identity_linear(&mut store, 4, 4);
    let mut s = Session::new(&store, false);
    let v = [0.3, -0.7];
    let x = s.g.constant(vec![1, 3, 2], v.repeat(3)).unwrap();
    let out = readout(&mut s, x, &lin, Activation::Identity).unwrap();
    assert_close(s.g.value(out), &[0.3, -0.7, 0.3, -0.7]);
}

fn eigen_moduli(n: usize, bits: u32) -> Vec<f64> {
    let mut a = Adjacency::empty(n);
    let mut k = 0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                a.set(i, j, bits >> k & 1 == 1);
                k += 1;
            }
        }
    }
    let m = DMatrix::from_row_slice(n, n, &normalize_values(n, &a.values()));
    m.complex_eigenvalues().iter().map(|z| z.norm()).collect()
}

#[test]
fn spectrum_within_unit_disc_exhaustive() {
    for n in 2..=3 {
        for bits in 0..1u32 << (n * (n - 1)) {
            for r in eigen_moduli(n, bits) {
                assert!(r <= 1.0 + 1e-10, "n={n} graph {bits:b}: |λ| = {r}");
            }
        }
    }
}

proptest! {
    #[test]
    fn symmetric_graphs_have_real_spectrum_in_range(n in 2usize..7, seed in any::<u64>()) {
        let mut a = Adjacency::empty(n);
        let mut bits = seed;
        for i in 0..n {
            for j in i + 1..n {
                let on = bits & 1 == 1;
                bits = bits.rotate_right(1);
                a.set(i, j, on);
                a.set(j, i, on);
            }
        }
        let m = DMatrix::from_row_slice(n, n, &normalize_adjacency(&a));
        prop_assert!((m.clone() - m.transpose()).abs().max() < TOL);
        for l in m.symmetric_eigen().eigenvalues.iter() {
            prop_assert!((-1.0 - 1e-10..=1.0 + 1e-10).contains(l), "λ = {}", l);
        }
    }

    #[test]
    fn directed_graphs_spectrum_in_unit_disc(n in 2usize..6, bits in any::<u32>()) {
        for r in eigen_moduli(n, bits) {
            prop_assert!(r <= 1.0 + 1e-10);
        }
    }
}
