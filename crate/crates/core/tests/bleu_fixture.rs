use cmt::eval::{bleu, BleuStats};

fn load() -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let text = include_str!("fixtures/bleu_micro.tsv");
    let toks = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    text.lines()
        .map(|l| {
            let (h, r) = l.split_once('\t').unwrap();
            (toks(h), toks(r))
        })
        .unzip()
}

// Counts worked out by hand for the two fixture pairs.
#[test]
fn micro_corpus_matches_hand_counts() {
    let (hyps, refs) = load();
    let mut stats = BleuStats::default();
    for (h, r) in hyps.iter().zip(&refs) {
        stats.add(h, r);
    }
    assert_eq!(stats.matches, [8, 5, 2, 0]);
    assert_eq!(stats.totals, [9, 7, 5, 3]);
    assert_eq!((stats.hyp_len, stats.ref_len), (9, 10));

    let precisions = [8.0 / 9.0, 5.0 / 7.0, 2.0 / 5.0, 1.0 / 4.0];
    let geo = precisions.iter().map(|p: &f64| p.ln()).sum::<f64>() / 4.0;
    let expected = 100.0 * (1.0f64 - 10.0 / 9.0).exp() * geo.exp();
    let got = bleu(&hyps, &refs).unwrap();
    assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
}
