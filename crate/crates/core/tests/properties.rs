use std::collections::BTreeMap;

use discoprop::autograd::softmax_rows;
use discoprop::corpus::{aggregate_any_positive, propagate_to_subwords, Article, Label, Relation, Split};
use discoprop::distill::{relation_mse, response_kl, spatial_matrix, Level, RelationReduction, DEFAULT_EPSILON};
use discoprop::eval::{macro_f1, prf, ratio_analysis, score, Counts, RatioAxis, UnitKey};
use discoprop::student::ablate_relation_probs;
use discoprop::teachers::argmax;
use ndarray::Array2;
use proptest::prelude::*;

const CASES: u32 = 1000;

fn logits(max_rows: usize, k: usize) -> impl Strategy<Value = Array2<f64>> {
    (1..=max_rows).prop_flat_map(move |n| {
        prop::collection::vec(-6.0f64..6.0, n * k).prop_map(move |v| Array2::from_shape_vec((n, k), v).unwrap())
    })
}

fn stochastic(max_rows: usize, k: usize) -> impl Strategy<Value = Array2<f64>> {
    logits(max_rows, k).prop_map(|z| softmax_rows(z.view()))
}

fn embeddings() -> impl Strategy<Value = Array2<f64>> {
    (1usize..=6, 1usize..=8).prop_flat_map(|(n, d)| {
        prop::collection::vec(-3.0f64..3.0, n * d)
            .prop_map(move |v| Array2::from_shape_vec((n, d), v).unwrap())
            .prop_filter("rows need a usable norm", |s| s.rows().into_iter().all(|r| r.dot(&r) > 1e-6))
    })
}

fn relation() -> impl Strategy<Value = Relation> {
    prop::sample::select(Relation::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn kl_is_nonnegative_and_zero_on_identical_inputs(p in stochastic(6, 4), z in logits(6, 4)) {
        prop_assert!(response_kl(p.view(), p.view(), DEFAULT_EPSILON).abs() < 1e-12);
        let n = p.nrows().min(z.nrows());
        let p = p.slice(ndarray::s![..n, ..]).to_owned();
        let q = softmax_rows(z.slice(ndarray::s![..n, ..]));
        let kl = response_kl(p.view(), q.view(), DEFAULT_EPSILON);
        prop_assert!(kl >= -1e-12, "kl = {kl}");
        let gap = p.iter().zip(q.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if gap > 1e-3 {
            prop_assert!(kl > 0.0);
        }
    }

    #[test]
    fn spatial_matrix_is_symmetric_bounded_with_unit_diagonal(s in embeddings()) {
        let m = spatial_matrix(s.view());
        let n = s.nrows();
        prop_assert_eq!(m.dim(), (n, n));
        for i in 0..n {
            prop_assert!((m[[i, i]] - 1.0).abs() < 1e-12);
            for k in 0..n {
                prop_assert_eq!(m[[i, k]], m[[k, i]]);
                prop_assert!(m[[i, k]].abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn spatial_matrix_ignores_positive_row_scaling(
        s in embeddings(),
        scales in prop::collection::vec(0.01f64..100.0, 6),
    ) {
        let mut scaled = s.clone();
        for (mut row, c) in scaled.rows_mut().into_iter().zip(&scales) {
            row *= *c;
        }
        let a = spatial_matrix(s.view());
        let b = spatial_matrix(scaled.view());
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn relation_mse_is_zero_on_itself_and_symmetric(a in embeddings(), seed in any::<u64>()) {
        let m = spatial_matrix(a.view());
        for r in [RelationReduction::Mean, RelationReduction::Sum] {
            prop_assert_eq!(relation_mse(m.view(), m.view(), r), 0.0);
        }
        let shifted = a.mapv(|v| v + (seed % 7) as f64 * 0.1 - 0.3);
        let other = spatial_matrix(shifted.view());
        let ab = relation_mse(m.view(), other.view(), RelationReduction::Mean);
        let ba = relation_mse(other.view(), m.view(), RelationReduction::Mean);
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-15);
    }

    #[test]
    fn ablation_keeps_rows_stochastic(p in stochastic(6, 4), rel in relation()) {
        let mut p = p;
        // an all-zero row, as for the first sentence in some caches
        if p.nrows() > 1 {
            p.row_mut(0).assign(&ndarray::arr1(&[0.0, 0.0, 0.0, 0.0]));
            p[[0, rel.index()]] = 1.0;
        }
        let out = ablate_relation_probs(&p, rel);
        for row in out.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            prop_assert_eq!(row[rel.index()], 0.0);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn argmax_is_stable_under_positive_scaling_and_shifts(
        z in logits(1, 8),
        c in 0.01f64..50.0,
        shift in -10.0f64..10.0,
    ) {
        let row = z.row(0);
        let base = argmax(softmax_rows(z.view()).row(0));
        prop_assert_eq!(base, argmax(row));
        let scaled = z.mapv(|v| v * c + shift);
        prop_assert_eq!(argmax(softmax_rows(scaled.view()).row(0)), base);
    }

    #[test]
    fn prf_matches_its_definition(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500, tn in 0u64..500) {
        let counts = Counts { tp, fp, fn_, tn };
        let (p, r, f1) = prf(&counts);
        for v in [p, r, f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if tp > 0 {
            prop_assert!((p - tp as f64 / (tp + fp) as f64).abs() < 1e-12);
            prop_assert!((r - tp as f64 / (tp + fn_) as f64).abs() < 1e-12);
            prop_assert!((f1 - 2.0 * p * r / (p + r)).abs() < 1e-12);
            prop_assert!(f1 <= p.max(r) + 1e-12 && f1 >= p.min(r) - 1e-12);
        } else {
            prop_assert_eq!(f1, 0.0);
        }
    }

    #[test]
    fn score_ignores_unit_order(
        units in prop::collection::vec((any::<bool>(), any::<bool>()), 1..60),
        rotate in 0usize..60,
    ) {
        let key = |i: usize| UnitKey::token(&format!("a{}", i % 3), i / 10, i % 10);
        let gold: BTreeMap<_, _> = units.iter().enumerate().map(|(i, &(g, _))| (key(i), g)).collect();
        let pred: BTreeMap<_, _> = units.iter().enumerate().map(|(i, &(_, p))| (key(i), p)).collect();
        let a = score(&pred, &gold, Level::Token).unwrap();
        // relabel units by a cyclic permutation applied to both sides
        let m = units.len();
        let perm = |i: usize| key((i + rotate) % m);
        let gold2: BTreeMap<_, _> = units.iter().enumerate().map(|(i, &(g, _))| (perm(i), g)).collect();
        let pred2: BTreeMap<_, _> = units.iter().enumerate().map(|(i, &(_, p))| (perm(i), p)).collect();
        let b = score(&pred2, &gold2, Level::Token).unwrap();
        prop_assert_eq!(a.counts, b.counts);
        prop_assert_eq!(a.counts.total(), m as u64);
        prop_assert_eq!(a.f1, b.f1);
    }

    #[test]
    fn macro_f1_is_one_exactly_on_perfect_predictions(gold in prop::collection::vec(0usize..8, 1..80)) {
        prop_assert_eq!(macro_f1(&gold, &gold, 8), 1.0);
        let shifted: Vec<usize> = gold.iter().map(|c| (c + 1) % 8).collect();
        let f = macro_f1(&gold, &shifted, 8);
        prop_assert!((0.0..1.0).contains(&f));
    }

    #[test]
    fn ratio_table_rows_sum_to_totals(
        rows in prop::collection::vec((any::<bool>(), prop::option::weighted(0.9, 0usize..8)), 0..200),
    ) {
        let gold: Vec<Label> = rows.iter().map(|(p, _)| Label::from_bool(*p)).collect();
        let classes: Vec<Option<usize>> = rows.iter().map(|(_, c)| *c).collect();
        let t = ratio_analysis(&gold, &classes, RatioAxis::Role).unwrap();
        let unclassed_p = rows.iter().filter(|(p, c)| *p && c.is_none()).count() as u64;
        let unclassed_b = rows.iter().filter(|(p, c)| !*p && c.is_none()).count() as u64;
        prop_assert_eq!(t.propaganda.iter().sum::<u64>() + unclassed_p, t.total_propaganda);
        prop_assert_eq!(t.benign.iter().sum::<u64>() + unclassed_b, t.total_benign);
        prop_assert_eq!(t.total_propaganda + t.total_benign, rows.len() as u64);
        for col in 0..8 {
            match (t.ratio(Label::Propaganda, col), t.ratio(Label::Benign, col)) {
                (Some(a), Some(b)) => prop_assert!((a + b - 1.0).abs() < 1e-12),
                (None, None) => prop_assert_eq!(t.column_total(col), 0),
                _ => prop_assert!(false, "one-sided ratio in column {}", col),
            }
        }
    }

    #[test]
    fn subword_labels_round_trip_through_any_positive(
        sizes in prop::collection::vec(1usize..4, 1..12),
        labels in prop::collection::vec(any::<bool>(), 12),
    ) {
        let mut next = 0;
        let alignment: Vec<Vec<usize>> = sizes
            .iter()
            .map(|&k| {
                let v: Vec<usize> = (next..next + k).collect();
                next += k;
                v
            })
            .collect();
        let words: Vec<Option<Label>> = labels[..sizes.len()].iter().map(|&b| Some(Label::from_bool(b))).collect();
        let pieces = propagate_to_subwords(&alignment, &words);
        prop_assert_eq!(pieces.len(), next);
        let positive: Vec<bool> = pieces.iter().map(|l| l.unwrap().is_propaganda()).collect();
        prop_assert_eq!(aggregate_any_positive(&alignment, &positive), labels[..sizes.len()].to_vec());
    }

    #[test]
    fn segments_become_one_sentence_each(words in prop::collection::vec("[a-z]{1,8}( [a-z]{1,8}){0,5}", 1..8)) {
        let segments: Vec<String> = words.iter().map(|w| format!("{w}.")).collect();
        let article = Article::from_segments("seg", &segments, Split::Test).unwrap();
        prop_assert_eq!(article.sentences.len(), segments.len());
        for (s, seg) in article.sentences.iter().zip(&segments) {
            prop_assert_eq!(article.slice(s.char_span), seg.as_str());
        }
    }
}
