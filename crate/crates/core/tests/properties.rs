//! Property tests against independent oracles (nalgebra eigensolver,
//! brute-force pair counting, sort-based selection).

use morphsnn_core::diffusion::{
    build_operator, dirichlet_energy, dirichlet_energy_pairwise, energy_decay_profile, is_non_increasing, verify_gradient_flow,
};
use morphsnn_core::network::{ForwardOptions, MorphNet, NetConfig};
use morphsnn_core::neuron::SpikeTensor;
use morphsnn_core::ood::{auroc, fpr95, knn_score};
use morphsnn_core::stsp::{attention_scores, instantaneous_adjacency, symmetrize_scores, topk_mask, topk_prune, AttentionParams};
use morphsnn_core::training::{generate_dataset, perturb_with_stats, DatasetKind, PerturbKind, PerturbSpec, SynthStream};
use morphsnn_core::{Matrix, Mode, Rng};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn matrix(n: usize, vals: &[f64]) -> Matrix {
    Matrix::from_vec(n, n, vals[..n * n].to_vec()).unwrap()
}

fn nalgebra_eigs(m: &Matrix) -> Vec<f64> {
    let d = DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
    let mut e: Vec<f64> = d.symmetric_eigen().eigenvalues.iter().cloned().collect();
    e.sort_by(f64::total_cmp);
    e
}

fn pruned(n: usize, k: usize, vals: &[f64]) -> Matrix {
    topk_prune(&matrix(n, vals), k).unwrap().0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn operator_symmetric_with_bounded_spectrum(
        n in 3usize..12, k in 1usize..4, vals in prop::collection::vec(0.0f64..1.0, 144),
    ) {
        let op = build_operator(&pruned(n, k.min(n), &vals), 2).unwrap();
        prop_assert!(op.p.max_asymmetry() < 1e-12);
        for lam in nalgebra_eigs(&op.laplacian()) {
            prop_assert!((-1e-8..=2.0 + 1e-8).contains(&lam), "eigenvalue {lam}");
        }
    }

    #[test]
    fn energy_decays_and_matches_pairwise(
        n in 3usize..10, vals in prop::collection::vec(0.0f64..1.0, 100), sig in prop::collection::vec(-1.0f64..1.0, 30),
    ) {
        let op = build_operator(&pruned(n, 3, &vals), 2).unwrap();
        let y = Matrix::from_vec(n, 3, sig[..n * 3].to_vec()).unwrap();
        let a = dirichlet_energy(&y, &op.s_sym).unwrap();
        let b = dirichlet_energy_pairwise(&y, &op.s_sym).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
        let prof = energy_decay_profile(&op, &y, 8).unwrap();
        prop_assert!(is_non_increasing(&prof, 1e-9));
        prop_assert!(verify_gradient_flow(&op, &y).unwrap() < 1e-12);
    }

    #[test]
    fn energy_contraction_matches_eigen_oracle(
        n in 3usize..8, vals in prop::collection::vec(0.0f64..1.0, 64), sig in prop::collection::vec(-1.0f64..1.0, 8),
    ) {
        // One diffusion step scales the energy of each eigenmode by (1-λ)²,
        // so E₁ ≤ max_λ (1-λ)² · E₀.
        let op = build_operator(&pruned(n, 3, &vals), 1).unwrap();
        let y = Matrix::from_vec(n, 1, sig[..n].to_vec()).unwrap();
        let prof = energy_decay_profile(&op, &y, 1).unwrap();
        let factor = nalgebra_eigs(&op.laplacian()).iter().map(|l| (1.0 - l) * (1.0 - l)).fold(0.0, f64::max);
        prop_assert!(factor <= 1.0 + 1e-9);
        prop_assert!(prof[1] <= factor * prof[0] + 1e-9);
    }

    #[test]
    fn topk_matches_sort_oracle(n in 2usize..9, k in 1usize..9, vals in prop::collection::vec(0.0f64..1.0, 81)) {
        let k = k.min(n);
        let s = matrix(n, &vals);
        let mask = topk_mask(&s, k).unwrap();
        for i in 0..n {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| s.get(i, b).total_cmp(&s.get(i, a)).then(a.cmp(&b)));
            for (rank, &j) in idx.iter().enumerate() {
                prop_assert_eq!(mask.get(i, j), if rank < k { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn attention_rows_are_stochastic(seed in 0u64..1000, n in 2usize..7) {
        let mut rng = Rng::new(seed);
        let params = AttentionParams::new(8, 2, &mut rng).unwrap();
        let traces = Matrix::from_vec(n, params.d_proj(), (0..n * params.d_proj()).map(|_| rng.uniform()).collect()).unwrap();
        let scores = attention_scores(&traces, &params).unwrap();
        let ebar = symmetrize_scores(&scores).unwrap();
        prop_assert_eq!(ebar.max_asymmetry(), 0.0);
        let a = instantaneous_adjacency(&ebar, &params, Mode::Eval, &mut rng).unwrap();
        for i in 0..n {
            prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn auroc_equals_pair_count(id in prop::collection::vec(0u8..20, 1..40), ood in prop::collection::vec(0u8..20, 1..40)) {
        let id: Vec<f64> = id.into_iter().map(f64::from).collect();
        let ood: Vec<f64> = ood.into_iter().map(f64::from).collect();
        let mut pairs = 0.0;
        for o in &ood {
            for i in &id {
                pairs += if o > i { 1.0 } else if o == i { 0.5 } else { 0.0 };
            }
        }
        let brute = pairs / (id.len() * ood.len()) as f64;
        prop_assert!((auroc(&id, &ood) - brute).abs() < 1e-12);
        // Strictly increasing transform leaves the metrics unchanged.
        let f = |v: &Vec<f64>| v.iter().map(|x| (0.3 * x).exp() - 5.0).collect::<Vec<_>>();
        prop_assert!((auroc(&f(&id), &f(&ood)) - auroc(&id, &ood)).abs() < 1e-12);
        prop_assert_eq!(fpr95(&f(&id), &f(&ood)), fpr95(&id, &ood));
    }

    #[test]
    fn knn_non_decreasing_in_k(train in prop::collection::vec(-5.0f64..5.0, 2..20), q in -5.0f64..5.0) {
        let train: Vec<Vec<f64>> = train.into_iter().map(|v| vec![v]).collect();
        let scores: Vec<f64> = (1..=train.len()).map(|k| knn_score(&[q], &train, k).unwrap()).collect();
        prop_assert!(scores.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn fpr95_endpoints() {
    assert_eq!(fpr95(&[0.1, 0.2], &[0.8, 0.9]), 0.0);
    assert_eq!(fpr95(&[0.8, 0.9], &[0.1, 0.2]), 1.0);
}

fn bar_stream(seed: u64) -> SynthStream {
    generate_dataset(DatasetKind::MovingBar, 4, 1, [100, 1, 10, 10], seed).unwrap().remove(0)
}

#[test]
fn salt_pepper_rate() {
    let mut rng = Rng::new(1);
    let (mut selected, mut total) = (0, 0);
    for s in 0..10 {
        let stream = bar_stream(s);
        let (_, st) = perturb_with_stats(&stream, PerturbSpec::new(PerturbKind::SaltPepper, 5).unwrap(), &mut rng).unwrap();
        selected += st.selected;
        total += stream.frames.data().len();
    }
    assert!(total >= 100_000);
    let frac = selected as f64 / total as f64;
    assert!((frac - 0.10).abs() < 0.01, "fraction {frac}");
}

#[test]
fn frame_loss_rate() {
    let mut rng = Rng::new(2);
    let stream = bar_stream(0);
    let mut dropped = 0;
    for _ in 0..100 {
        let (out, st) = perturb_with_stats(&stream, PerturbSpec::new(PerturbKind::FrameLoss, 9).unwrap(), &mut rng).unwrap();
        dropped += st.dropped_frames;
        let zero_frames = (0..100).filter(|&t| out.frames.frame(t).iter().all(|&v| v == 0)).count();
        assert!(zero_frames >= st.dropped_frames);
    }
    let frac = dropped as f64 / 10_000.0;
    assert!((frac - 0.45).abs() < 0.05, "fraction {frac}");
}

#[test]
fn poisson_rate_within_three_standard_errors() {
    let mut rng = Rng::new(3);
    let stream = SynthStream { frames: SpikeTensor::zeros(50, 1, 20, 20), label: 0 };
    let (out, _) = perturb_with_stats(&stream, PerturbSpec::new(PerturbKind::Poisson, 4).unwrap(), &mut rng).unwrap();
    let n = out.frames.data().len() as f64;
    let p = 1.0 - (-0.04f64).exp();
    let observed = out.frames.count_ones() as f64 / n;
    assert!((observed - p).abs() < 3.0 * (p * (1.0 - p) / n).sqrt(), "rate {observed} vs {p}");
}

#[test]
fn flicker_mean_map_is_stationary() {
    let data = generate_dataset(DatasetKind::FlickerPattern, 2, 2000, [4, 1, 8, 8], 5).unwrap();
    for class in 0..2 {
        let streams: Vec<_> = data.iter().filter(|s| s.label == class).collect();
        let mut maps = vec![vec![0.0; 64]; 4];
        for s in &streams {
            for (t, map) in maps.iter_mut().enumerate() {
                for (m, &v) in map.iter_mut().zip(s.frames.frame(t)) {
                    *m += v as f64 / streams.len() as f64;
                }
            }
        }
        for t in 1..4 {
            for p in 0..64 {
                assert!((maps[t][p] - maps[0][p]).abs() < 0.08, "class {class} pixel {p}");
            }
        }
    }
}

fn tiny_config() -> NetConfig {
    NetConfig {
        in_channels: 1,
        channels: 4,
        height: 8,
        width: 8,
        layers: 2,
        nodes: 3,
        k: 2,
        heads: 2,
        timesteps: 3,
        classes: 3,
        ..NetConfig::default()
    }
}

fn noise(cfg: &NetConfig, seed: u64) -> SpikeTensor {
    let mut rng = Rng::new(seed);
    let len = cfg.timesteps * cfg.in_channels * cfg.height * cfg.width;
    SpikeTensor::from_vec([cfg.timesteps, cfg.in_channels, cfg.height, cfg.width], (0..len).map(|_| rng.bernoulli(0.4) as u8).collect())
        .unwrap()
}

#[test]
fn state_isolation_across_interleaved_samples() {
    let cfg = tiny_config();
    let net = MorphNet::new(cfg.clone(), 1).unwrap();
    let (a, b) = (noise(&cfg, 1), noise(&cfg, 2));
    let alone_a = net.infer(&[&a], ForwardOptions::default()).unwrap();
    let alone_b = net.infer(&[&b], ForwardOptions::default()).unwrap();
    let again_a = net.infer(&[&a], ForwardOptions::default()).unwrap();
    assert_eq!(alone_a.logits, again_a.logits);
    let both = net.infer(&[&b, &a], ForwardOptions::default()).unwrap();
    assert_eq!(both.logits[0], alone_b.logits[0]);
    assert_eq!(both.logits[1], alone_a.logits[0]);
}

#[test]
fn class_head_permutation_permutes_logits() {
    let cfg = tiny_config();
    let net = MorphNet::new(cfg.clone(), 2).unwrap();
    let mut perm = net.clone();
    let order = [2, 0, 1];
    for r in 0..net.classifier_w.rows() {
        for (c, &src) in order.iter().enumerate() {
            perm.classifier_w.set(r, c, net.classifier_w.get(r, src));
        }
    }
    for (c, &src) in order.iter().enumerate() {
        perm.classifier_b.set(0, c, net.classifier_b.get(0, src) + 0.1 * src as f64);
    }
    let mut base = net.clone();
    for src in 0..3 {
        base.classifier_b.set(0, src, net.classifier_b.get(0, src) + 0.1 * src as f64);
    }
    let s = noise(&cfg, 3);
    let x = base.infer(&[&s], ForwardOptions::default()).unwrap().logits.remove(0);
    let y = perm.infer(&[&s], ForwardOptions::default()).unwrap().logits.remove(0);
    for (c, &src) in order.iter().enumerate() {
        assert_eq!(y[c], x[src]);
    }
}

#[test]
fn single_timestep_logits_are_that_step() {
    let cfg = NetConfig { timesteps: 1, ..tiny_config() };
    let net = MorphNet::new(cfg.clone(), 3).unwrap();
    let s = noise(&cfg, 4);
    let inf = net.infer(&[&s], ForwardOptions::default()).unwrap();
    let f = &inf.features[0];
    for c in 0..cfg.classes {
        let manual: f64 = f.iter().enumerate().map(|(r, v)| v * net.classifier_w.get(r, c)).sum::<f64>() + net.classifier_b.get(0, c);
        assert!((manual - inf.logits[0][c]).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn shape_contract(nodes in 2usize..5, layers in 1usize..3, t in 1usize..4, side in prop::sample::select(vec![4usize, 8, 16])) {
        let cfg = NetConfig { nodes, layers, timesteps: t, height: side, width: side, k: 2.min(nodes), ..tiny_config() };
        let net = MorphNet::new(cfg.clone(), 5).unwrap();
        let s = noise(&cfg, 6);
        let inf = net.infer(&[&s], ForwardOptions::default()).unwrap();
        prop_assert_eq!(inf.logits[0].len(), cfg.classes);
        for trace in &inf.traces[0] {
            prop_assert_eq!(trace.records.len(), t);
            for r in &trace.records {
                prop_assert_eq!(r.s_pruned.shape(), (nodes, nodes));
                prop_assert_eq!(r.firing_rates.len(), nodes);
            }
        }
    }
}
