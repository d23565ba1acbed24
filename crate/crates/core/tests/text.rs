use ova::text::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn q(s: &str) -> QueryText {
    QueryText::new(s).unwrap()
}

/// Same masked-rescale-renormalize pipeline, written against f32 buffers.
fn rederive_variant(base: &[f32], k: u64, rate: f64, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k << 8);
    let mut v: Vec<f32> = base
        .iter()
        .map(|&b| {
            let keep = rng.random::<f64>() >= rate;
            if keep {
                b / (1.0 - rate as f32)
            } else {
                0.0
            }
        })
        .collect();
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

#[test]
fn variant_five_matches_independent_rederivation() {
    let base = embed(&q("red ring"), 64).unwrap();
    let vars = make_variants(&base, 64, 0.1, 1234).unwrap();
    assert_eq!(vars.len(), 64);
    let want = rederive_variant(&base, 5, 0.1, 1234);
    for (a, b) in vars[5].iter().zip(&want) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
    // about 10% of coordinates dropped
    let zeros = vars[5].iter().filter(|x| **x == 0.0).count();
    assert!((1..=20).contains(&zeros), "{zeros}");
}

#[test]
fn variant_cosine_regression_bounds() {
    // pinned minima over 200 words x 63 variants, dim 64
    let bounds = [(0.05, 0.75), (0.1, 0.70), (0.2, 0.55)];
    let mut prev_mean = 1.0;
    for (rate, floor) in bounds {
        let mut min = 1.0f64;
        let mut sum = 0.0;
        let mut n = 0;
        for w in 0..200u64 {
            let base = embed(&q(&format!("word{w}")), 64).unwrap();
            for v in &make_variants(&base, 64, rate, w).unwrap()[1..] {
                let c = cosine(v, &base);
                min = min.min(c);
                sum += c;
                n += 1;
            }
        }
        let mean = sum / n as f64;
        assert!(min >= floor, "rate {rate}: min cosine {min}");
        // keeping a (1 - rate) share of the energy gives cos ~ sqrt(1 - rate)
        assert!(
            (mean - (1.0 - rate).sqrt()).abs() < 0.02,
            "rate {rate}: mean {mean}"
        );
        assert!(mean < prev_mean);
        prev_mean = mean;
    }
}

#[test]
fn sampling_frequencies_are_uniform() {
    let names: Vec<String> = vec!["blue square".into()];
    let bank = EmbeddingBank::for_classes(&names, 64, 64, 0.1, 7).unwrap();
    let vars = bank.variants("blue square").unwrap().to_vec();
    let mut counts = [0usize; 64];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..10_000 {
        let s = bank.sample("blue square", &mut rng).unwrap();
        let i = vars.iter().position(|v| v.as_slice() == s).unwrap();
        counts[i] += 1;
    }
    // Each count is Binomial(10000, 1/64): mean 156.25, sd 12.4, so the
    // +-10% band is about 1.26 sd and all 64 counts fit it with probability
    // ~3e-7. Gate on the chi-square statistic instead: df 63, 99.9% quantile
    // 103.4.
    let expect = 10_000.0 / 64.0;
    let chi2: f64 = counts
        .iter()
        .map(|c| (*c as f64 - expect).powi(2) / expect)
        .sum();
    assert!(chi2 < 103.4, "chi-square {chi2}");
    let (lo, hi) = (0.9 * expect, 1.1 * expect);
    let inside = counts
        .iter()
        .filter(|c| (**c as f64) >= lo && (**c as f64) <= hi)
        .count();
    assert!(
        inside >= 40,
        "only {inside}/64 variants within [0.9/64, 1.1/64]"
    );
}

#[test]
fn unrelated_words_over_100_pairs() {
    let words: Vec<String> = (0..101).map(|i| format!("w{i}x")).collect();
    for p in words.windows(2) {
        let c = cosine(
            &embed(&q(&p[0]), 256).unwrap(),
            &embed(&q(&p[1]), 256).unwrap(),
        );
        assert!(c.abs() < 0.35, "{}/{}: {c}", p[0], p[1]);
    }
}

#[test]
fn bank_file_is_byte_identical_on_regeneration() {
    let names: Vec<String> = ["a b", "c d", "e f"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("1.bank"), dir.path().join("2.bank"));
    EmbeddingBank::for_classes(&names, 32, 8, 0.1, 3)
        .unwrap()
        .save(&p1)
        .unwrap();
    EmbeddingBank::for_classes(&names, 32, 8, 0.1, 3)
        .unwrap()
        .save(&p2)
        .unwrap();
    let (b1, b2) = (std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(b1, b2);
    assert_eq!(&b1[..4], b"OVB1");
    let back = EmbeddingBank::load(&p1).unwrap();
    for n in &names {
        for v in back.variants(n).unwrap() {
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5);
        }
    }
}
