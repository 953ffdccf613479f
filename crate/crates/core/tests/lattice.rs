use ltstream::error::Error;
use ltstream::lattice::{
    best_path, enumerate_paths, forward_backward, kbest_paths, Lattice, LatticeArc, LatticeNode,
    DEFAULT_PATH_CAP,
};
use ltstream::Matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SENONES: usize = 4;

fn arc(from: usize, to: usize, word: Option<u32>, senones: Vec<u32>, ac: f64, lm: f64) -> LatticeArc {
    LatticeArc { from, to, word, senones, acoustic: ac, lm }
}

fn nodes(times: &[usize]) -> Vec<LatticeNode> {
    times.iter().map(|&time| LatticeNode { time }).collect()
}

/// Random acyclic lattice in which every node lies on a start-to-end path.
fn random_lattice(seed: u64) -> Lattice {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = rng.gen_range(2..=6);
    let inner = rng.gen_range(0..=5);
    let mut times = vec![0];
    for _ in 0..inner {
        times.push(rng.gen_range(1..frames));
    }
    times.push(frames);
    // index order with non-decreasing time keeps same-time arcs acyclic
    times[1..=inner].sort();
    let end = times.len() - 1;
    let mut arcs = Vec::new();
    let add = |rng: &mut ChaCha8Rng, from: usize, to: usize, arcs: &mut Vec<LatticeArc>| {
        let span = times[to] - times[from];
        let sen = (0..span).map(|_| rng.gen_range(0..SENONES as u32)).collect();
        let word = if rng.gen_bool(0.8) { Some(rng.gen_range(0..5)) } else { None };
        arcs.push(arc(from, to, word, sen, rng.gen_range(-3.0..1.0), rng.gen_range(-2.0..0.0)));
    };
    for j in 1..=end {
        let from = rng.gen_range(0..j);
        add(&mut rng, from, j, &mut arcs);
    }
    for i in 1..end {
        let to = rng.gen_range(i + 1..=end);
        add(&mut rng, i, to, &mut arcs);
    }
    for _ in 0..rng.gen_range(0..6) {
        let i = rng.gen_range(0..end);
        let j = rng.gen_range(i + 1..=end);
        add(&mut rng, i, j, &mut arcs);
    }
    Lattice::new(frames, nodes(&times), arcs).expect("generator builds valid lattices")
}

struct Brute {
    total: f64,
    arc_post: Vec<f64>,
    occupancy: Matrix,
}

fn brute_force(lat: &Lattice) -> Brute {
    let paths = enumerate_paths(lat, DEFAULT_PATH_CAP).unwrap();
    let max = paths.iter().map(|p| p.score).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = paths.iter().map(|p| (p.score - max).exp()).sum();
    let mut arc_post = vec![0.0; lat.arcs().len()];
    let mut occupancy = Matrix::zeros(lat.num_frames(), SENONES);
    for p in &paths {
        let w = (p.score - max).exp() / z;
        for &a in &p.arcs {
            arc_post[a] += w;
        }
        for (t, s) in p.senones(lat).into_iter().enumerate() {
            occupancy.add_at(t, s as usize, w);
        }
    }
    Brute { total: max + z.ln(), arc_post, occupancy }
}

#[test]
fn forward_backward_matches_enumeration_on_random_lattices() {
    for seed in 0..100 {
        let lat = random_lattice(seed);
        let fb = forward_backward(&lat, SENONES).unwrap();
        let bf = brute_force(&lat);
        assert!((fb.total - bf.total).abs() < 1e-10, "seed {seed}: {} vs {}", fb.total, bf.total);
        for (a, b) in fb.arc_posteriors.iter().zip(&bf.arc_post) {
            assert!((a - b).abs() < 1e-9, "seed {seed}");
        }
        for (a, b) in fb.occupancy.data().iter().zip(bf.occupancy.data()) {
            assert!((a - b).abs() < 1e-9, "seed {seed}");
        }
    }
}

#[test]
fn occupancy_rows_sum_to_one() {
    for seed in 100..150 {
        let lat = random_lattice(seed);
        let fb = forward_backward(&lat, SENONES).unwrap();
        for row in fb.occupancy.iter_rows() {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn single_path_total_is_path_score() {
    let lat = Lattice::new(
        3,
        nodes(&[0, 2, 3]),
        vec![arc(0, 1, Some(0), vec![1, 1], -1.5, -0.5), arc(1, 2, Some(1), vec![2], -0.25, -1.0)],
    )
    .unwrap();
    let fb = forward_backward(&lat, 3).unwrap();
    assert!((fb.total - (-3.25)).abs() < 1e-12);
    assert_eq!(fb.arc_posteriors, vec![1.0, 1.0]);
    assert_eq!(fb.occupancy.row(0), &[0.0, 1.0, 0.0]);
    assert_eq!(fb.occupancy.row(2), &[0.0, 0.0, 1.0]);
}

#[test]
fn parallel_arcs_split_by_softmax() {
    let (a, b) = (-1.0f64, -2.0f64);
    let lat = Lattice::new(
        1,
        nodes(&[0, 1]),
        vec![arc(0, 1, Some(0), vec![0], a, 0.0), arc(0, 1, Some(1), vec![1], b, 0.0)],
    )
    .unwrap();
    let fb = forward_backward(&lat, 2).unwrap();
    let expect_total = (a.exp() + b.exp()).ln();
    assert!((fb.total - expect_total).abs() < 1e-12);
    let pa = a.exp() / (a.exp() + b.exp());
    assert!((fb.arc_posteriors[0] - pa).abs() < 1e-12);
    assert!((fb.occupancy.get(0, 1) - (1.0 - pa)).abs() < 1e-12);
}

fn stages(k: usize) -> Lattice {
    let times: Vec<usize> = (0..=k).collect();
    let mut arcs = Vec::new();
    for i in 0..k {
        arcs.push(arc(i, i + 1, Some(0), vec![0], -1.0, 0.0));
        arcs.push(arc(i, i + 1, Some(1), vec![1], -2.0, 0.0));
    }
    Lattice::new(k, nodes(&times), arcs).unwrap()
}

#[test]
fn diamond_and_three_stage_path_counts() {
    let diamond = Lattice::new(
        2,
        nodes(&[0, 1, 1, 2]),
        vec![
            arc(0, 1, Some(0), vec![0], -1.0, 0.0),
            arc(0, 2, Some(1), vec![1], -1.0, 0.0),
            arc(1, 3, Some(2), vec![0], -1.0, 0.0),
            arc(2, 3, Some(2), vec![1], -1.0, 0.0),
        ],
    )
    .unwrap();
    assert_eq!(enumerate_paths(&diamond, 10).unwrap().len(), 2);
    assert_eq!(enumerate_paths(&stages(3), 10).unwrap().len(), 8);
}

#[test]
fn enumeration_refuses_beyond_cap() {
    let lat = stages(20);
    match enumerate_paths(&lat, DEFAULT_PATH_CAP) {
        Err(Error::PathCapExceeded(cap)) => assert_eq!(cap, DEFAULT_PATH_CAP),
        other => panic!("expected refusal, got {other:?}"),
    }
    // forward-backward is unaffected by the path count
    let fb = forward_backward(&lat, 2).unwrap();
    let per_stage = ((-1.0f64).exp() + (-2.0f64).exp()).ln();
    assert!((fb.total - 20.0 * per_stage).abs() < 1e-9);
}

#[test]
fn cycle_is_diagnosed() {
    let err = Lattice::new(
        0,
        nodes(&[0, 0, 0, 0]),
        vec![
            arc(0, 1, None, vec![], 0.0, 0.0),
            arc(1, 2, None, vec![], 0.0, 0.0),
            arc(2, 1, None, vec![], 0.0, 0.0),
            arc(2, 3, None, vec![], 0.0, 0.0),
        ],
    )
    .unwrap_err();
    assert!(matches!(err, Error::LatticeCycle(_)), "{err:?}");
}

#[test]
fn dead_nodes_are_diagnosed() {
    // node 2 has no outgoing arc
    let err = Lattice::new(
        2,
        nodes(&[0, 1, 1, 2]),
        vec![
            arc(0, 1, Some(0), vec![0], 0.0, 0.0),
            arc(0, 2, Some(1), vec![0], 0.0, 0.0),
            arc(1, 3, Some(0), vec![0], 0.0, 0.0),
        ],
    )
    .unwrap_err();
    assert!(matches!(err, Error::DeadNode(2)), "{err:?}");
    // node 2 has no incoming arc
    let err = Lattice::new(
        2,
        nodes(&[0, 1, 1, 2]),
        vec![
            arc(0, 1, Some(0), vec![0], 0.0, 0.0),
            arc(2, 3, Some(1), vec![0], 0.0, 0.0),
            arc(1, 3, Some(0), vec![0], 0.0, 0.0),
        ],
    )
    .unwrap_err();
    assert!(matches!(err, Error::DeadNode(2)), "{err:?}");
}

#[test]
fn span_mismatch_is_malformed() {
    let err = Lattice::new(2, nodes(&[0, 2]), vec![arc(0, 1, Some(0), vec![0], 0.0, 0.0)]).unwrap_err();
    assert!(matches!(err, Error::MalformedLattice(_)));
}

#[test]
fn best_and_kbest_agree_with_enumeration() {
    for seed in 200..240 {
        let lat = random_lattice(seed);
        let mut all: Vec<f64> = enumerate_paths(&lat, DEFAULT_PATH_CAP).unwrap().iter().map(|p| p.score).collect();
        all.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let kb = kbest_paths(&lat, 5).unwrap();
        assert_eq!(kb.len(), all.len().min(5));
        for (p, s) in kb.iter().zip(&all) {
            assert!((p.score - s).abs() < 1e-12);
            let direct: f64 = p.arcs.iter().map(|&a| lat.arcs()[a].score()).sum();
            assert!((direct - p.score).abs() < 1e-12);
        }
        assert!((best_path(&lat).unwrap().score - all[0]).abs() < 1e-12);
    }
}

#[test]
fn with_path_adds_missing_path_once() {
    let lat = stages(2);
    let path = vec![arc(0, 0, Some(7), vec![3], -5.0, -1.0), arc(0, 0, Some(8), vec![2], -5.0, -1.0)];
    let grown = lat.with_path(&path).unwrap();
    assert!(grown.contains_path(&path));
    assert_eq!(enumerate_paths(&grown, 100).unwrap().len(), 5);
    assert_eq!(grown.with_path(&path).unwrap(), grown);
}

#[test]
fn pruning_keeps_best_path_and_bounds_arcs() {
    for seed in 300..330 {
        let lat = random_lattice(seed);
        let best = best_path(&lat).unwrap();
        let pruned = lat.pruned(3).unwrap();
        assert!(pruned.arcs().len() <= lat.arcs().len());
        assert!((best_path(&pruned).unwrap().score - best.score).abs() < 1e-12);
    }
}

#[test]
fn rescoring_replaces_acoustics_only() {
    let lat = stages(2);
    let mut scores = Matrix::zeros(2, 2);
    scores.set(0, 0, -0.5);
    scores.set(1, 1, -4.0);
    let r = lat.rescored(&scores).unwrap();
    let ac: Vec<f64> = r.arcs().iter().map(|a| a.acoustic).collect();
    assert_eq!(ac, vec![-0.5, 0.0, 0.0, -4.0]);
    assert!(lat.rescored(&Matrix::zeros(3, 2)).is_err());
}

#[test]
fn text_round_trip_random() {
    for seed in 400..420 {
        let lat = random_lattice(seed);
        assert_eq!(Lattice::from_text(&lat.to_text()).unwrap(), lat);
    }
}

proptest! {
    #[test]
    fn posteriors_are_probabilities(seed in 0u64..10_000) {
        let lat = random_lattice(seed);
        let fb = forward_backward(&lat, SENONES).unwrap();
        for &p in &fb.arc_posteriors {
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&p));
        }
        // posteriors of arcs leaving the start node sum to one
        let s: f64 = lat.arcs().iter().zip(&fb.arc_posteriors)
            .filter(|(a, _)| a.from == lat.start()).map(|(_, p)| p).sum();
        prop_assert!((s - 1.0).abs() < 1e-9);
    }
}
