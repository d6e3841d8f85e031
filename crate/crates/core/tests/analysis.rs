use default_moe::analysis::{
    cosine_similarity, default_vector_similarity, expert_coactivation, router_entropy,
    routing_frequency, AnalysisError,
};
use default_moe::moe::{DefaultVectorBank, DefaultVectorOptions, EmaInit};
use default_moe::tensor::Tensor;
use proptest::prelude::*;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_probs(rng: &mut ChaCha8Rng, rows: usize, n: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let raw: Vec<f64> = (0..n)
                .map(|_| rng.random::<f64>().powi(3) + 1e-12)
                .collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|x| x / s).collect()
        })
        .collect()
}

fn random_selection(rng: &mut ChaCha8Rng, tokens: usize, n: usize, k: usize) -> Vec<Vec<usize>> {
    let all: Vec<usize> = (0..n).collect();
    (0..tokens)
        .map(|_| {
            let mut s: Vec<usize> = all.choose_multiple(rng, k).copied().collect();
            s.sort_unstable();
            s
        })
        .collect()
}

fn tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    let n = rows[0].len();
    Tensor::new(vec![rows.len(), n], rows.concat()).unwrap()
}

#[test]
fn entropy_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = random_probs(&mut rng, 40, 8);
    let mut oracle = 0.0;
    for row in &p {
        for &x in row {
            oracle -= x * x.ln();
        }
    }
    oracle /= 40.0;
    let got = router_entropy(&tensor(&p)).unwrap();
    assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
}

#[test]
fn entropy_examples() {
    let u = tensor(&vec![vec![0.125; 8]; 3]);
    assert!((router_entropy(&u).unwrap() - 2.0794415416798357).abs() < 1e-12);
    let mut one_hot = vec![vec![0.0; 8]; 2];
    one_hot[0][3] = 1.0;
    one_hot[1][0] = 1.0;
    assert_eq!(router_entropy(&tensor(&one_hot)).unwrap(), 0.0);
}

#[test]
fn entropy_rejects_unnormalized_rows() {
    let p = tensor(&[vec![0.5, 0.25], vec![0.5, 0.5]]);
    assert!(matches!(
        router_entropy(&p),
        Err(AnalysisError::Unnormalized { row: 0, .. })
    ));
}

#[test]
fn entropy_in_single_precision() {
    let p = Tensor::<f32>::from_f64(vec![1, 4], &[0.25; 4]).unwrap();
    assert!((router_entropy(&p).unwrap() - 4f64.ln()).abs() < 1e-6);
}

#[test]
fn frequency_matches_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, k, t) = (6, 2, 300);
    let sel = random_selection(&mut rng, t, n, k);
    let tags: Vec<usize> = (0..t).map(|_| rng.random_range(0..3)).collect();
    let f = routing_frequency(&sel, &tags, n).unwrap();
    for tag in 0..3 {
        let mut counts = vec![0.0; n];
        for (s, &g) in sel.iter().zip(&tags) {
            if g == tag {
                s.iter().for_each(|&i| counts[i] += 1.0);
            }
        }
        let total: f64 = counts.iter().sum();
        for i in 0..n {
            assert!((f.per_tag[&tag][i] - counts[i] / total).abs() < 1e-15);
        }
    }
    for i in 0..n {
        let c = sel.iter().filter(|s| s.contains(&i)).count() as f64;
        assert!((f.overall[i] - c / (t * k) as f64).abs() < 1e-15);
    }
}

#[test]
fn frequency_examples() {
    let rr: Vec<Vec<usize>> = (0..32).map(|t| vec![t % 8]).collect();
    let f = routing_frequency(&rr, &[0; 32], 8).unwrap();
    assert!(f.overall.iter().all(|&x| x == 0.125));
    assert_eq!(f.max_min_ratio(), 1.0);
    let one = vec![vec![0]; 5];
    let f = routing_frequency(&one, &[0; 5], 4).unwrap();
    assert_eq!(f.overall, vec![1.0, 0.0, 0.0, 0.0]);
    assert!(f.max_min_ratio().is_infinite());
}

#[test]
fn frequency_errors() {
    assert!(matches!(
        routing_frequency(&[], &[], 4),
        Err(AnalysisError::Empty)
    ));
    assert!(matches!(
        routing_frequency(&[vec![7]], &[0], 4),
        Err(AnalysisError::BadExpert {
            index: 7,
            experts: 4
        })
    ));
}

#[test]
fn coactivation_matches_pair_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, k, t) = (5, 3, 50);
    let sel = random_selection(&mut rng, t, n, k);
    let co = expert_coactivation(&sel, n);
    for i in 0..n {
        for j in 0..n {
            let both = sel
                .iter()
                .filter(|s| s.contains(&i) && s.contains(&j))
                .count() as f64;
            assert!((co[i][j] - both / t as f64).abs() < 1e-15);
        }
    }
}

#[test]
fn coactivation_extremes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let co = expert_coactivation(&random_selection(&mut rng, 20, 4, 1), 4);
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                assert_eq!(co[i][j], 0.0);
            }
        }
    }
    let co = expert_coactivation(&random_selection(&mut rng, 20, 4, 4), 4);
    assert!(co.iter().flatten().all(|&x| x == 1.0));
}

fn bank_with(vectors: &[Vec<f64>]) -> DefaultVectorBank<f64> {
    let opts = DefaultVectorOptions {
        init: EmaInit::Zeros,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut bank = DefaultVectorBank::new(vectors.len(), vectors[0].len(), opts, &mut rng);
    for (i, v) in vectors.iter().enumerate() {
        bank.set_vector(i, v);
    }
    bank
}

#[test]
fn similarity_examples() {
    let same = bank_with(&vec![vec![1.0, -2.0, 0.5]; 4]);
    for row in default_vector_similarity(&same) {
        for c in row {
            assert!((c.unwrap() - 1.0).abs() < 1e-15);
        }
    }
    let orth = bank_with(&[vec![1.0, 0.0], vec![0.0, 3.0]]);
    let m = default_vector_similarity(&orth);
    assert_eq!(m[0][1], Some(0.0));
    assert_eq!(m[0][0], Some(1.0));
}

#[test]
fn zero_vector_is_flagged_not_nan() {
    let b = bank_with(&[vec![1.0, 2.0], vec![0.0, 0.0]]);
    let m = default_vector_similarity(&b);
    assert_eq!(m[0][1], None);
    assert_eq!(m[1][0], None);
    assert_eq!(m[1][1], None);
    assert_eq!(m[0][0], Some(1.0));
    assert!(matches!(
        cosine_similarity(&[0.0], &[1.0]),
        Err(AnalysisError::ZeroNorm)
    ));
}

proptest! {
    #[test]
    fn entropy_is_bounded(seed in any::<u64>(), n in 2usize..12, rows in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = router_entropy(&tensor(&random_probs(&mut rng, rows, n))).unwrap();
        prop_assert!(h >= 0.0 && h <= (n as f64).ln());
    }

    #[test]
    fn frequencies_sum_to_one(seed in any::<u64>(), n in 1usize..10, t in 1usize..60, tags in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(1..=n);
        let sel = random_selection(&mut rng, t, n, k);
        let tag: Vec<usize> = (0..t).map(|_| rng.random_range(0..tags)).collect();
        let f = routing_frequency(&sel, &tag, n).unwrap();
        prop_assert!((f.overall.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for g in f.per_tag.values() {
            prop_assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn coactivation_is_consistent(seed in any::<u64>(), n in 1usize..9, t in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(1..=n);
        let co = expert_coactivation(&random_selection(&mut rng, t, n, k), n);
        for i in 0..n {
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| co[i][j]).sum();
            prop_assert!(off <= (k as f64 - 1.0) * co[i][i] + 1e-12);
            for j in 0..n {
                prop_assert_eq!(co[i][j], co[j][i]);
                prop_assert!(co[i][j] <= co[i][i]);
            }
        }
    }

    #[test]
    fn similarity_is_symmetric_with_unit_diagonal(seed in any::<u64>(), n in 1usize..8, d in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let m = default_vector_similarity(&bank_with(&v));
        for i in 0..n {
            prop_assert_eq!(m[i][i], Some(1.0));
            for j in 0..n {
                let (a, b) = (m[i][j].unwrap(), m[j][i].unwrap());
                prop_assert!((a - b).abs() <= 1e-12);
                prop_assert!((-1.0..=1.0).contains(&a));
            }
        }
    }
}
