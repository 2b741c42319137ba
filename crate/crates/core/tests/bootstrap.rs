use std::collections::{BTreeMap, BTreeSet};

use cdrex::corpus::CidPair;
use cdrex::evaluation::{bootstrap_test, DocPairs};
use cdrex::rng::Rng;

struct Doc {
    gold: usize,
    a_tp: usize,
    a_fp: usize,
    b_tp: usize,
    b_fp: usize,
}

fn pairs(prefix: &str, n: usize) -> BTreeSet<CidPair> {
    (0..n).map(|i| (format!("C{prefix}{i}"), format!("D{i}"))).collect()
}

fn build(docs: &[Doc]) -> (DocPairs, DocPairs, DocPairs) {
    let (mut gold, mut a, mut b) = (BTreeMap::new(), BTreeMap::new(), BTreeMap::new());
    for (k, d) in docs.iter().enumerate() {
        let pmid = format!("{k:03}");
        let g = pairs("g", d.gold);
        let take =
            |tp: usize, fp: usize| -> BTreeSet<CidPair> { g.iter().take(tp).cloned().chain(pairs("x", fp)).collect() };
        a.insert(pmid.clone(), take(d.a_tp, d.a_fp));
        b.insert(pmid.clone(), take(d.b_tp, d.b_fp));
        gold.insert(pmid, g);
    }
    (gold, a, b)
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fn_) as f64;
    2.0 * p * r / (p + r)
}

/// Exact p-value over all n^n ordered resamples.
fn exhaustive(docs: &[Doc]) -> f64 {
    let n = docs.len();
    let diff = |idx: &[usize]| {
        let (mut a, mut b, mut g) = ((0, 0), (0, 0), 0);
        for &i in idx {
            let d = &docs[i];
            g += d.gold;
            a = (a.0 + d.a_tp, a.1 + d.a_fp);
            b = (b.0 + d.b_tp, b.1 + d.b_fp);
        }
        f1(a.0, a.1, g - a.0) - f1(b.0, b.1, g - b.0)
    };
    let observed = diff(&(0..n).collect::<Vec<_>>());
    let sign = if observed >= 0.0 { 1.0 } else { -1.0 };
    let total = n.pow(n as u32);
    let mut losses = 0;
    let mut idx = vec![0usize; n];
    for code in 0..total {
        let mut c = code;
        for slot in idx.iter_mut() {
            *slot = c % n;
            c /= n;
        }
        if sign * diff(&idx) <= 0.0 {
            losses += 1;
        }
    }
    losses as f64 / total as f64
}

fn twenty_documents() -> Vec<Doc> {
    let mut rng = Rng::new(31);
    (0..20)
        .map(|_| {
            let gold = 1 + rng.index(3);
            let a_tp = rng.index(gold + 1);
            let b_tp = a_tp.saturating_sub(rng.index(2));
            Doc {
                gold,
                a_tp,
                a_fp: rng.index(2),
                b_tp,
                b_fp: rng.index(3),
            }
        })
        .collect()
}

#[test]
fn bootstrap_matches_exhaustive_enumeration() {
    let docs = twenty_documents();
    let mut checked = 0;
    for start in 0..=15 {
        let subset = &docs[start..start + 5];
        let exact = exhaustive(subset);
        if !(0.02..0.98).contains(&exact) {
            continue;
        }
        let (gold, a, b) = build(subset);
        let got = bootstrap_test(&a, &b, &gold, 10_000, &mut Rng::new(7 + start as u64)).unwrap();
        assert!(
            (got.p_value - exact).abs() <= 0.02,
            "subset {start}: bootstrap {} vs exhaustive {exact}",
            got.p_value
        );
        checked += 1;
    }
    assert!(checked >= 3, "only {checked} informative subsets");
}

#[test]
fn bootstrap_on_full_set_is_seed_deterministic() {
    let (gold, a, b) = build(&twenty_documents());
    let x = bootstrap_test(&a, &b, &gold, 1000, &mut Rng::new(1)).unwrap();
    let y = bootstrap_test(&a, &b, &gold, 1000, &mut Rng::new(1)).unwrap();
    assert_eq!(x, y);
    assert!(x.observed_diff > 0.0);
    assert!(x.p_value < 0.5);
}
