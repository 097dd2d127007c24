use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mcafjsp::bench::evaluate_sampling;
use mcafjsp::env::SimState;
use mcafjsp::instance::{generate_instance, parse_instance, GenSpec};
use mcafjsp::pdr::{pdr_select, Rule};
use mcafjsp::policy::ssm::{selective_scan, ScanInputs};
use mcafjsp::policy::{pool_nonzero, DecoderKind, EncoderKind, MambaBlock, Policy, PolicyConfig};
use mcafjsp::tensor::{Graph, ParamStore};

fn small(seed: u64) -> Policy {
    Policy::new(PolicyConfig {
        seed,
        ..PolicyConfig::with_dims(16, 2, 4)
    })
    .unwrap()
}

fn mid_episode(seed: u64, steps: usize) -> SimState {
    let inst = Arc::new(generate_instance(&GenSpec::new(5, 3, seed)).unwrap());
    let mut s = SimState::reset(inst);
    for _ in 0..steps {
        let a = pdr_select(Rule::Mwkr, &s).unwrap();
        s.step(a).unwrap();
    }
    s
}

#[test]
fn single_candidate_gets_all_mass() {
    let inst = Arc::new(parse_instance("1 1\n1 1 1 7\n").unwrap());
    let f = SimState::reset(inst).features();
    let (probs, value) = small(1).forward(&f).unwrap();
    assert_eq!(probs, vec![1.0]);
    assert!(value.is_finite());
}

#[test]
fn candidate_order_is_equivariant() {
    let policy = small(2);
    for steps in [0, 3, 7] {
        let f = mid_episode(40 + steps as u64, steps).features();
        let n = f.n_pairs();
        let perm: Vec<usize> = (0..n).rev().collect();
        let (p, v) = policy.forward(&f).unwrap();
        let (q, w) = policy.forward(&f.permute_pairs(&perm)).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            assert!((q[new] - p[old]).abs() < 1e-12);
        }
        assert!((v - w).abs() < 1e-12);
    }
}

#[test]
fn encoder_branches_are_independent() {
    let policy = small(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ops: Vec<f64> = (0..7 * 10).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let run = |machines: Vec<f64>, ops: Vec<f64>| {
        let mut g = Graph::new(&policy.params);
        let o = g.input(7, 10, ops).unwrap();
        let m = g.input(3, 8, machines).unwrap();
        let (ho, hm) = policy.encode(&mut g, o, m).unwrap();
        (g.value(ho).to_vec(), g.value(hm).to_vec())
    };
    let (ho1, hm1) = run(vec![0.5; 24], ops.clone());
    let (ho2, _) = run(vec![-2.0; 24], ops);
    let (_, hm3) = run(vec![0.5; 24], vec![3.0; 70]);
    assert_eq!(ho1, ho2);
    assert_eq!(hm1, hm3);
}

#[test]
fn pooling_ignores_inactive_rows() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let h = g.input(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let h_extra = g.input(4, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 99.0, -99.0]).unwrap();
    let a = pool_nonzero(&mut g, h, &[true, true, true]).unwrap();
    let b = pool_nonzero(&mut g, h_extra, &[true, true, true, false]).unwrap();
    assert_eq!(g.value(a), &[3.0, 4.0]);
    assert_eq!(g.value(a), g.value(b));
}

#[test]
fn decoder_attention_shapes() {
    let policy = small(4);
    let f = mid_episode(5, 2).features();
    let mut g = Graph::new(&policy.params);
    let out = policy.forward_graph(&mut g, &f).unwrap();
    let (o, m) = (f.n_ops, f.n_machines);
    assert_eq!(out.attention_shapes, vec![(m, o), (m, o), (o, m), (o, m)]);
}

#[test]
fn ablations_build_and_run() {
    let f = mid_episode(6, 4).features();
    for (encoder, decoder) in [
        (EncoderKind::None, DecoderKind::CrossAttention),
        (EncoderKind::Dme, DecoderKind::None),
        (EncoderKind::None, DecoderKind::None),
    ] {
        let p = Policy::new(PolicyConfig {
            encoder,
            decoder,
            ..PolicyConfig::with_dims(16, 2, 4)
        })
        .unwrap();
        let (probs, _) = p.forward(&f).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut g = Graph::new(&p.params);
        let out = p.forward_graph(&mut g, &f).unwrap();
        assert_eq!(out.attention_shapes.is_empty(), decoder == DecoderKind::None);
    }
}

#[test]
fn mamba_block_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let cfg = PolicyConfig::with_dims(8, 2, 4);
    let block = MambaBlock::new(&mut store, "b", &cfg, &mut rng).unwrap();
    let x: Vec<f64> = (0..6 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let run = |x: Vec<f64>| {
        let mut g = Graph::new(&store);
        let h = g.input(6, 8, x).unwrap();
        let y = block.forward(&mut g, h).unwrap();
        g.value(y).to_vec()
    };
    let base = run(x.clone());
    for t in 0..6 {
        let mut x2 = x.clone();
        for v in &mut x2[t * 8..(t + 1) * 8] {
            *v += 0.7;
        }
        let y = run(x2);
        assert_eq!(&y[..t * 8], &base[..t * 8]);
        assert_ne!(&y[t * 8..(t + 1) * 8], &base[t * 8..(t + 1) * 8]);
    }
}

#[test]
fn scan_of_zero_input_is_zero() {
    let (l, d, n) = (5, 3, 4);
    let u = vec![0.0; l * d];
    let delta = vec![0.3; l * d];
    let a = vec![-1.0; d * n];
    let b = vec![0.8; l * n];
    let c = vec![-0.4; l * n];
    let skip = vec![1.0; d];
    let y = selective_scan(&ScanInputs {
        len: l,
        channels: d,
        state: n,
        u: &u,
        delta: &delta,
        a: &a,
        b: &b,
        c: &c,
        skip: &skip,
    });
    assert!(y.iter().all(|&v| v == 0.0));
}

#[test]
fn scan_of_length_one_is_closed_form() {
    // y = sum_n c_n * delta * b_n * expm1(delta a_n)/(delta a_n) * u + skip * u
    let (u, dt, skip) = (1.5, 0.2, 0.25);
    let a = [-1.0, -3.0];
    let b = [0.5, -2.0];
    let c = [1.0, 0.5];
    let y = selective_scan(&ScanInputs {
        len: 1,
        channels: 1,
        state: 2,
        u: &[u],
        delta: &[dt],
        a: &a,
        b: &b,
        c: &c,
        skip: &[skip],
    });
    let expect: f64 = (0..2)
        .map(|k| c[k] * b[k] * (dt * a[k]).exp_m1() / a[k] * u)
        .sum::<f64>()
        + skip * u;
    assert!((y[0] - expect).abs() < 1e-14);
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ckpt");
    let policy = small(9);
    policy.save(&path).unwrap();
    let back = Policy::load(&path).unwrap();
    assert_eq!(back.config(), policy.config());
    let f = mid_episode(9, 3).features();
    assert_eq!(back.forward(&f).unwrap(), policy.forward(&f).unwrap());
}

#[test]
fn best_of_many_samples_beats_one_on_average() {
    let policy = Policy::new(PolicyConfig {
        seed: 10,
        ..PolicyConfig::with_dims(8, 2, 4)
    })
    .unwrap();
    let (mut one, mut many) = (0, 0);
    for i in 0..20u64 {
        let inst = Arc::new(generate_instance(&GenSpec::new(6, 4, 500 + i)).unwrap());
        one += evaluate_sampling(&policy, inst.clone(), 1, i).unwrap().makespan;
        many += evaluate_sampling(&policy, inst, 100, i).unwrap().makespan;
    }
    assert!(many <= one);
    assert!(many < one, "100 samples never improved on one");
}
