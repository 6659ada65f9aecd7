mod common;

use common::metrics_oracle::{self as oracle, compare_all};
use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
use rac_core::metrics::{self, full_report, LabelMatrix, ReportMode, ScoreMatrix};
use rac_core::numerics::Rng;

fn random_case(rng: &mut Rng, rows: usize, cols: usize, graded: bool) -> (ScoreMatrix, LabelMatrix) {
    let labels: Vec<u8> = (0..rows * cols).map(|_| (rng.uniform() < 0.4) as u8).collect();
    let scores: Vec<f64> = (0..rows * cols)
        .map(|_| if graded { rng.below(5) as f64 / 4.0 } else { rng.below(2) as f64 })
        .collect();
    (
        ScoreMatrix::new(rows, cols, scores).unwrap(),
        LabelMatrix::new(rows, cols, labels).unwrap(),
    )
}

#[test]
fn hand_built_f1_case() {
    // 4 docs × 3 labels
    let labels = LabelMatrix::from_rows(&[vec![1, 0, 1], vec![0, 1, 0], vec![1, 1, 0], vec![0, 0, 0]]).unwrap();
    let scores = ScoreMatrix::new(4, 3, vec![0.9, 0.6, 0.2, 0.1, 0.7, 0.5, 0.5, 0.2, 0.0, 0.4, 0.0, 0.3]).unwrap();
    let f = metrics::f1(&scores, &labels, 0.5).unwrap();
    // label 0: TP 2 FP 0 FN 0 → 1; label 1: TP 1 FP 1 FN 1 → 0.5; label 2: TP 0 FP 1 FN 1 → 0
    assert_eq!(f.macro_f1, 0.5);
    // pooled TP 3, FP 2, FN 2
    assert_eq!(f.micro_f1, 6.0 / 10.0);
    assert!(compare_all(&scores, &labels).is_ok());
}

#[test]
fn hand_built_precision_case() {
    let labels = LabelMatrix::from_rows(&[vec![1, 0, 0, 1], vec![0, 0, 0, 0], vec![0, 1, 1, 0]]).unwrap();
    let scores = ScoreMatrix::new(3, 4, vec![0.9, 0.8, 0.1, 0.2, 0.5, 0.5, 0.5, 0.5, 0.3, 0.3, 0.9, 0.3]).unwrap();
    // top-2 per doc: {0,1} → 1 hit; {0,1} → 0; {2,0} → 1 hit
    assert_eq!(metrics::precision_at_n(&scores, &labels, 2).unwrap(), (0.5 + 0.0 + 0.5) / 3.0);
    assert_eq!(oracle::precision_at_n(&scores, &labels, 2), (0.5 + 0.0 + 0.5) / 3.0);
}

#[test]
fn random_five_by_two_auc() {
    let mut rng = Rng::new(17);
    for _ in 0..200 {
        let (s, l) = random_case(&mut rng, 5, 2, true);
        let lib = metrics::auc(&s, &l).unwrap();
        let o = oracle::auc(&s, &l);
        assert_eq!(lib.macro_auc, o.macro_auc);
        assert_eq!(lib.micro_auc, o.micro_auc);
    }
}

#[test]
fn random_ten_by_six_agreement() {
    let mut rng = Rng::new(18);
    for _ in 0..200 {
        let (s, l) = random_case(&mut rng, 10, 6, false);
        compare_all(&s, &l).unwrap();
    }
}

#[test]
fn skipped_label_count_matches_direct_count() {
    let mut rng = Rng::new(19);
    let (s, _) = random_case(&mut rng, 6, 5, true);
    // label 0 all negative, label 3 all positive
    let rows: Vec<Vec<u8>> = (0..6).map(|i| vec![0, (i % 2) as u8, (i % 3 == 0) as u8, 1, (i < 2) as u8]).collect();
    let l = LabelMatrix::from_rows(&rows).unwrap();
    let r = full_report(&s, &l, ReportMode::Ranking).unwrap();
    assert_eq!(r.skipped_label_count, Some(2));
}

#[test]
fn table_sized_report_completes_in_range() {
    let (n, m) = (3373, 8921);
    let mut rng = Rng::new(20);
    let scores: Vec<f64> = (0..n * m).map(|_| rng.uniform()).collect();
    let labels: Vec<u8> = (0..n * m).map(|_| (rng.uniform() < 0.002) as u8).collect();
    let s = ScoreMatrix::new(n, m, scores).unwrap();
    let l = LabelMatrix::new(n, m, labels).unwrap();
    let r = full_report(&s, &l, ReportMode::Ranking).unwrap();
    for (name, v) in r.values() {
        assert!((0.0..=1.0).contains(&v), "{name} = {v}");
    }
    // random scores carry no signal
    assert!((r.micro_auc.unwrap() - 0.5).abs() < 0.01);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_invariant_under_row_and_column_permutation(seed in 0u64..10_000) {
        let mut rng = Rng::new(seed);
        let (s, l) = random_case(&mut rng, 6, 5, true);
        let mut rows: Vec<usize> = (0..6).collect();
        let mut cols: Vec<usize> = (0..5).collect();
        rng.shuffle(&mut rows);
        rng.shuffle(&mut cols);
        let ps = ScoreMatrix::new(6, 5, rows.iter().flat_map(|&i| cols.iter().map(move |&j| (i, j))).map(|(i, j)| s.get(i, j)).collect()).unwrap();
        let pl = LabelMatrix::new(6, 5, rows.iter().flat_map(|&i| cols.iter().map(move |&j| (i, j))).map(|(i, j)| l.get(i, j)).collect()).unwrap();
        let a = metrics::f1(&s, &l, 0.5).unwrap();
        let b = metrics::f1(&ps, &pl, 0.5).unwrap();
        prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
        prop_assert_eq!(a.micro_f1, b.micro_f1);
        let a = metrics::auc(&s, &l).unwrap();
        let b = metrics::auc(&ps, &pl).unwrap();
        prop_assert_eq!(a.micro_auc, b.micro_auc);
        prop_assert!((a.macro_auc.unwrap_or(0.0) - b.macro_auc.unwrap_or(0.0)).abs() < 1e-12);
        let sa = metrics::set_agreement(&s.binarize(0.5), &l, metrics::MacroAxis::Label).unwrap();
        let sb = metrics::set_agreement(&ps.binarize(0.5), &pl, metrics::MacroAxis::Label).unwrap();
        prop_assert_eq!(sa.micro_jaccard, sb.micro_jaccard);
        prop_assert!((sa.macro_jaccard - sb.macro_jaccard).abs() < 1e-12);
    }

    #[test]
    fn precision_ignores_monotone_transforms(seed in 0u64..10_000, n in 1usize..=5) {
        let mut rng = Rng::new(seed);
        let (s, l) = random_case(&mut rng, 4, 5, true);
        let t = ScoreMatrix::new(4, 5, s.data().iter().map(|x| (3.0 * x).exp() - 7.0).collect()).unwrap();
        prop_assert_eq!(
            metrics::precision_at_n(&s, &l, n).unwrap(),
            metrics::precision_at_n(&t, &l, n).unwrap()
        );
    }

    #[test]
    fn random_eight_by_eight_matches_oracles(seed in 0u64..1_000_000) {
        let mut rng = Rng::new(seed);
        let (s, l) = random_case(&mut rng, 8, 8, seed % 2 == 0);
        prop_assert_eq!(compare_all(&s, &l), Ok(()));
    }
}
