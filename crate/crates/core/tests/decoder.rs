use ltstream::corpus::{generate_corpus, ToyTaskSpec};
use ltstream::criteria::acoustic_score;
use ltstream::decoder::{decode, decode_words, forced_path, generate_lattice, SearchConfig, StreamingDecoder};
use ltstream::error::Error;
use ltstream::lattice::{enumerate_paths, LatticeArc};
use ltstream::lm::{train_ngram, Lexicon, NGramLm};
use ltstream::Matrix;

/// Scores for posteriors putting `peak` on the aligned senone.
fn peaked_scores(align: &[u32], num_senones: usize, peak: f64) -> Matrix {
    let rest = (1.0 - peak) / (num_senones - 1) as f64;
    let rows: Vec<Vec<f64>> = align
        .iter()
        .map(|&s| (0..num_senones).map(|k| if k == s as usize { peak } else { rest }).collect())
        .collect();
    let post = Matrix::from_rows(&rows).unwrap();
    acoustic_score(&post, &vec![1.0 / num_senones as f64; num_senones], 1.0).unwrap()
}

fn toy() -> (ToyTaskSpec, Lexicon, NGramLm, NGramLm) {
    let spec = ToyTaskSpec {
        vocab_size: 6,
        ..ToyTaskSpec::default()
    };
    let corpus = generate_corpus(&spec, 60).unwrap();
    let text: Vec<Vec<u32>> = corpus.utterances.iter().map(|u| u.words.clone()).collect();
    let uni = train_ngram(&text, 6, 1, 0.5).unwrap();
    let tri = train_ngram(&text, 6, 3, 0.5).unwrap();
    (spec.clone(), spec.lexicon(), uni, tri)
}

fn same_path(a: &[LatticeArc], b: &[LatticeArc]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| x.word == y.word && x.senones == y.senones && x.lm == y.lm)
}

#[test]
fn forced_single_path_lattice() {
    let lex = Lexicon::toy(1, 3);
    let lm = train_ngram(&[vec![0]], 1, 2, 1.0).unwrap();
    let align = [1, 2, 3];
    let scores = peaked_scores(&align, 4, 0.7);
    let lat = generate_lattice(&scores, &lm, &lex, &SearchConfig::default()).unwrap();
    let paths = enumerate_paths(&lat, 10).unwrap();
    assert_eq!(paths.len(), 1);
    assert_eq!(paths[0].senones(&lat), align.to_vec());
    let (forced, words) = forced_path(&align, &scores, &lm, &lex, 1.0).unwrap();
    assert_eq!(words, vec![0]);
    let arcs: Vec<LatticeArc> = paths[0].arcs.iter().map(|&a| lat.arcs()[a].clone()).collect();
    assert!(same_path(&arcs, &forced));
    let total: f64 = forced.iter().map(|a| a.score()).sum();
    assert!((total - paths[0].score).abs() < 1e-12);
}

#[test]
fn generous_beam_contains_reference() {
    let (spec, lex, _, tri) = toy();
    let corpus = generate_corpus(&ToyTaskSpec { seed: 9, ..spec.clone() }, 8).unwrap();
    for u in &corpus.utterances {
        let scores = peaked_scores(&u.feature_align, spec.num_senones(), 0.5);
        let lat = generate_lattice(&scores, &tri, &lex, &SearchConfig { beam: 40.0, ..Default::default() }).unwrap();
        let (forced, words) = forced_path(&u.feature_align, &scores, &tri, &lex, 1.0).unwrap();
        assert_eq!(words, u.words);
        assert!(lat.contains_path(&forced), "{}", u.id);
    }
}

#[test]
fn lm_order_changes_only_lm_scores_on_shared_arcs() {
    let (spec, lex, uni, tri) = toy();
    let corpus = generate_corpus(&ToyTaskSpec { seed: 4, ..spec.clone() }, 3).unwrap();
    for u in &corpus.utterances {
        let scores = peaked_scores(&u.feature_align, spec.num_senones(), 0.6);
        let cfg = SearchConfig::default();
        let a = generate_lattice(&scores, &uni, &lex, &cfg).unwrap();
        let b = generate_lattice(&scores, &tri, &lex, &cfg).unwrap();
        let key = |lat: &ltstream::lattice::Lattice, x: &LatticeArc| {
            (lat.nodes()[x.from].time, lat.nodes()[x.to].time, x.word, x.senones.clone())
        };
        let mut shared = 0;
        for x in a.arcs() {
            for y in b.arcs() {
                if key(&a, x) == key(&b, y) {
                    assert_eq!(x.acoustic, y.acoustic);
                    shared += 1;
                }
            }
        }
        assert!(shared > 0);
    }
}

#[test]
fn clean_scores_decode_to_reference() {
    let (spec, lex, _, tri) = toy();
    let corpus = generate_corpus(&ToyTaskSpec { seed: 5, ..spec.clone() }, 10).unwrap();
    for u in &corpus.utterances {
        let scores = peaked_scores(&u.feature_align, spec.num_senones(), 0.9);
        let words = decode_words(&scores, &tri, &lex, &SearchConfig::default()).unwrap();
        assert_eq!(words, u.words);
    }
}

#[test]
fn streaming_commits_are_a_prefix_of_the_final_result() {
    let (spec, lex, _, tri) = toy();
    let corpus = generate_corpus(&ToyTaskSpec { seed: 6, ..spec.clone() }, 10).unwrap();
    let mut early = 0;
    for u in &corpus.utterances {
        let scores = peaked_scores(&u.feature_align, spec.num_senones(), 0.7);
        let full = decode(&scores, &tri, &lex, &SearchConfig::default()).unwrap();
        let mut dec = StreamingDecoder::new(&tri, &lex, SearchConfig::default()).unwrap();
        let mut got = Vec::new();
        for (t, row) in scores.iter_rows().enumerate() {
            let new = dec.push(row).unwrap();
            for w in &new {
                assert!(w.end <= t + 1);
            }
            if t + 1 < scores.rows() {
                early += new.len();
            }
            got.extend(new);
        }
        got.extend(dec.finish().unwrap());
        assert_eq!(got, full);
    }
    assert!(early > 0, "agreement never reached before the end");
}

#[test]
fn unreachable_end_reports_frame() {
    let lex = Lexicon::toy(1, 3);
    let lm = train_ngram(&[vec![0]], 1, 2, 1.0).unwrap();
    let scores = peaked_scores(&[1, 2], 4, 0.7);
    match generate_lattice(&scores, &lm, &lex, &SearchConfig::default()) {
        Err(Error::PruningEmptied { frame }) => assert_eq!(frame, 1),
        other => panic!("{other:?}"),
    }
    let mut nan = scores.clone();
    nan.set(0, 1, f64::NAN);
    nan.set(0, 0, f64::NAN);
    nan.set(0, 2, f64::NAN);
    nan.set(0, 3, f64::NAN);
    match generate_lattice(&nan, &lm, &lex, &SearchConfig::default()) {
        Err(Error::PruningEmptied { frame }) => assert_eq!(frame, 0),
        other => panic!("{other:?}"),
    }
}

#[test]
fn forced_path_rejects_non_paths() {
    let lex = Lexicon::toy(2, 3);
    let lm = train_ngram(&[vec![0, 1]], 2, 2, 1.0).unwrap();
    let scores = Matrix::zeros(4, 7);
    assert!(forced_path(&[1, 3, 2, 3], &scores, &lm, &lex, 1.0).is_err());
    assert!(forced_path(&[0, 0, 0, 0], &scores, &lm, &lex, 1.0).is_err());
    assert!(forced_path(&[1, 2, 0, 3], &scores, &lm, &lex, 1.0).is_err());
    assert!(forced_path(&[1, 2, 3, 0], &scores, &lm, &lex, 1.0).is_ok());
}
