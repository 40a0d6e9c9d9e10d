use proptest::prelude::*;
use transcoder::autodiff::Graph;
use transcoder::data::{subsample, RawCorpus, RawExample, TaskKind, TaskSpec, Vocab};
use transcoder::metrics::bleu4_smoothed;
use transcoder::model::{attention_with_prefix, AttnMask};
use transcoder::training::{plan_epoch, sampling_distribution};

const WORDS: [&str; 8] = ["let", "x", "y", "ret", "add", "one", "two", "loop"];

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..7, seed in values(35)) {
        let mut g = Graph::<f64>::new();
        let x = g.input(vec![rows, cols], seed[..rows * cols].to_vec(), false).unwrap();
        let s = g.softmax(x, 1).unwrap();
        for row in g.value(s).chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn attention_over_prefix_is_a_distribution(
        prefix in 0usize..4,
        keys in 1usize..4,
        causal in any::<bool>(),
        v in values(4 * 3 * 2 + 4 * 3 * 2 * 2 + 2 * 2 * 3 * 2 * 2),
    ) {
        let (b, h, t, dh) = (2, 2, 3, 2);
        let mut g = Graph::<f64>::new();
        let mut at = 0;
        let mut take = |g: &mut Graph<f64>, len: usize| {
            let n = b * h * len * dh;
            let out = g.input(vec![b, h, len, dh], v[at..at + n].to_vec(), false).unwrap();
            at += n;
            out
        };
        let q = take(&mut g, t);
        let k = take(&mut g, keys);
        let val = take(&mut g, keys);
        let pair = (prefix > 0).then(|| (take(&mut g, prefix), take(&mut g, prefix)));
        let mask = AttnMask { batch: b, query_len: t, key_len: keys, causal, key_padding: None };
        let out = attention_with_prefix(&mut g, q, k, val, pair, &mask).unwrap();
        prop_assert_eq!(g.shape(out.weights), &[b, h, t, prefix + keys]);
        for row in g.value(out.weights).chunks(prefix + keys) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn task_distribution_sums_to_one(sizes in prop::collection::vec(1usize..1_000_000, 1..8), delta in 0.01f64..5.0) {
        let p = sampling_distribution(&sizes, delta).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|x| *x > 0.0));
    }

    #[test]
    fn smaller_tasks_are_oversampled(sizes in prop::collection::vec(1usize..1_000_000, 2..8), delta in 1.0f64..3.0) {
        prop_assume!(sizes.iter().min() != sizes.iter().max());
        let p = sampling_distribution(&sizes, delta).unwrap();
        let total: usize = sizes.iter().sum();
        let (lo, hi) = (
            (0..sizes.len()).min_by_key(|&i| sizes[i]).unwrap(),
            (0..sizes.len()).max_by_key(|&i| sizes[i]).unwrap(),
        );
        prop_assert!(p[lo] > sizes[lo] as f64 / total as f64);
        prop_assert!(p[hi] < sizes[hi] as f64 / total as f64);
    }

    #[test]
    fn scaling_sizes_keeps_the_ordering(sizes in prop::collection::vec(1usize..100_000, 2..6), factor in 2usize..50) {
        let p = sampling_distribution(&sizes, 1.0).unwrap();
        let scaled: Vec<usize> = sizes.iter().map(|n| n * factor).collect();
        let q = sampling_distribution(&scaled, 1.0).unwrap();
        for i in 0..sizes.len() {
            for j in 0..sizes.len() {
                if sizes[i] < sizes[j] {
                    prop_assert!(p[i] < p[j] && q[i] < q[j]);
                }
            }
        }
    }

    #[test]
    fn epoch_plan_spends_the_whole_budget(sizes in prop::collection::vec(1usize..100_000, 1..8), extra in 0usize..500) {
        let p = sampling_distribution(&sizes, 1.0).unwrap();
        let budget = sizes.len() + extra;
        let plan = plan_epoch(&p, budget).unwrap();
        prop_assert_eq!(plan.iter().sum::<usize>(), budget);
        prop_assert!(plan.iter().all(|&n| n >= 1));
    }

    #[test]
    fn bleu_ignores_pair_order(
        pairs in prop::collection::vec(
            (prop::collection::vec(0u8..6, 1..10), prop::collection::vec(0u8..6, 1..10)), 1..6),
        rot in 0usize..6,
    ) {
        let (h, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let mut rotated = pairs.clone();
        rotated.rotate_left(rot % pairs.len());
        let (h2, r2): (Vec<_>, Vec<_>) = rotated.into_iter().unzip();
        let a = bleu4_smoothed(&h, &r).unwrap();
        let b = bleu4_smoothed(&h2, &r2).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&a));
    }

    #[test]
    fn encode_then_decode_is_identity(idx in prop::collection::vec(0usize..WORDS.len(), 0..20)) {
        let vocab = Vocab::from_words(WORDS);
        let text = idx.iter().map(|&i| WORDS[i]).collect::<Vec<_>>().join(" ");
        prop_assert_eq!(vocab.decode(&vocab.encode(&text)), text.clone());
        prop_assert_eq!(vocab.decode(&vocab.encode_target(&text)), text);
    }

    #[test]
    fn subsample_keeps_the_ceiling(n in 1usize..400, permille in 1usize..=1000, seed in any::<u64>()) {
        let vocab = Vocab::from_words(WORDS);
        let ex = (0..n).map(|i| RawExample { source: WORDS[i % 8].into(), target: WORDS[(i / 8) % 8].into() }).collect();
        let raw = RawCorpus {
            spec: TaskSpec::new("p", TaskKind::Summarization, "alpha"),
            seed: 0,
            train: ex,
            dev: Vec::new(),
            test: Vec::new(),
        };
        let corpus = raw.encode(&vocab).unwrap();
        let rate = permille as f64 / 1000.0;
        let expected = (permille * n).div_ceil(1000).max(1);
        prop_assert_eq!(subsample(&corpus, rate, seed).unwrap().train.len(), expected);
    }
}
