use equiscale::cipher::{apply, compose, invert, Permutation};
use equiscale::ngram::{full_alphabet, reference_model, NGramModel};
use equiscale::scaling::{extrapolate_x_for_loss, fit_power_law, ScalingPoint};
use equiscale::solvers::{
    brute_force_decipher, decoded_log_likelihood, frequency_decipher, hillclimb_decipher,
    HillClimbOptions,
};
use equiscale::textcorpus::{
    decode, encode, normalize, NormalizedLine, TokenSeq, Vocab, FIRST_CONTENT, LAST_CONTENT,
    MAX_SEQ_LEN,
};
use proptest::prelude::*;

const CASES: u32 = 1000;

fn perm() -> impl Strategy<Value = Permutation> {
    any::<u64>().prop_map(Permutation::sample)
}

fn payload(max: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(FIRST_CONTENT..=LAST_CONTENT, 0..max)
}

fn seq(max: usize) -> impl Strategy<Value = TokenSeq> {
    payload(max).prop_map(|p| TokenSeq::from_payload(&p).unwrap())
}

/// Space-separated lowercase words: already normalized text.
fn normalized_text(max_words: usize) -> impl Strategy<Value = String> {
    prop::collection::vec("[a-z]{1,12}", 0..max_words).prop_map(|w| w.join(" "))
}

/// Permutation of the content IDs in `alphabet`, leaving everything else fixed.
fn within(alphabet: &[u8], seed: u64) -> Permutation {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut images = alphabet.to_vec();
    images.shuffle(&mut rng);
    let mut map: [u8; 27] = std::array::from_fn(|j| FIRST_CONTENT + j as u8);
    for (&a, &b) in alphabet.iter().zip(&images) {
        map[(a - FIRST_CONTENT) as usize] = b;
    }
    Permutation::from_map(map).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn normalize_is_idempotent_and_closed(raw in any::<String>()) {
        let once = normalize(&raw);
        prop_assert_eq!(normalize(once.text()), once.clone());
        prop_assert!(once.text().chars().all(|c| c == ' ' || c.is_ascii_lowercase()));
        prop_assert!(!once.text().starts_with(' ') && !once.text().ends_with(' '));
        prop_assert!(!once.text().contains("  "));
    }

    #[test]
    fn normalize_is_idempotent_on_ascii(raw in "[ -~\t]{0,200}") {
        let once = normalize(&raw);
        prop_assert_eq!(normalize(once.text()), once);
    }

    #[test]
    fn encode_decode_round_trip(text in normalized_text(60)) {
        prop_assume!(text.len() <= MAX_SEQ_LEN - 2);
        let vocab = Vocab::new();
        let line = NormalizedLine::new(text.clone(), 0).unwrap();
        let s = encode(&line, &vocab, MAX_SEQ_LEN).unwrap();
        prop_assert_eq!(s.len(), text.len() + 2);
        prop_assert_eq!(decode(&s, &vocab), text);
    }

    #[test]
    fn encode_never_exceeds_max_len(text in normalized_text(150), max_len in 2usize..=MAX_SEQ_LEN) {
        let line = NormalizedLine::new(text, 0).unwrap();
        let s = encode(&line, &Vocab::new(), max_len).unwrap();
        prop_assert!(s.len() <= max_len);
        prop_assert_eq!(*s.ids().last().unwrap(), 1);
    }

    #[test]
    fn inverse_undoes_apply(g in perm(), s in seq(300)) {
        prop_assert_eq!(apply(&invert(&g), &apply(&g, &s)), s.clone());
        prop_assert_eq!(apply(&g, &apply(&invert(&g), &s)), s);
    }

    #[test]
    fn compose_is_associative(a in perm(), b in perm(), c in perm()) {
        prop_assert_eq!(compose(&compose(&a, &b), &c), compose(&a, &compose(&b, &c)));
    }

    #[test]
    fn compose_applies_right_then_left(a in perm(), b in perm(), s in seq(100)) {
        prop_assert_eq!(apply(&compose(&a, &b), &s), apply(&a, &apply(&b, &s)));
    }

    #[test]
    fn identity_and_inverse_laws(g in perm()) {
        let id = Permutation::identity();
        prop_assert_eq!(compose(&g, &id), g.clone());
        prop_assert_eq!(compose(&id, &g), g.clone());
        prop_assert!(compose(&g, &invert(&g)).is_identity());
        prop_assert!(compose(&invert(&g), &g).is_identity());
        prop_assert_eq!(invert(&invert(&g)), g);
    }

    #[test]
    fn distributions_sum_to_one(order in 1usize..=3, ctx in payload(4)) {
        let lm = reference_model(order, 0.5).unwrap();
        let total: f64 = lm.distribution(&ctx).iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12, "sum {}", total);
    }

    #[test]
    fn ngram_statistics_are_permutation_covariant(
        corpus in prop::collection::vec(seq(60), 1..6),
        probe in seq(80),
        g in perm(),
        order in 1usize..=3,
        k in 0.05f64..2.0,
    ) {
        let alphabet = full_alphabet();
        let lm = NGramModel::fit_sequences(&corpus, order, k, &alphabet).unwrap();
        let moved: Vec<TokenSeq> = corpus.iter().map(|s| apply(&g, s)).collect();
        let lm_g = NGramModel::fit_sequences(&moved, order, k, &alphabet).unwrap();
        prop_assert_eq!(lm_g.log_likelihood(&apply(&g, &probe)), lm.log_likelihood(&probe));
    }

    #[test]
    fn power_law_exponent_is_scale_invariant(
        ys in prop::collection::vec(0.01f64..10.0, 3..8),
        c in 1e-3f64..1e3,
    ) {
        let pts: Vec<ScalingPoint> = ys
            .iter()
            .enumerate()
            .map(|(i, &y)| ScalingPoint { run_id: i.to_string(), x: 2f64.powi(i as i32), y })
            .collect();
        let scaled: Vec<ScalingPoint> = pts.iter().map(|p| ScalingPoint { x: p.x * c, ..p.clone() }).collect();
        let a = fit_power_law(&pts).unwrap();
        let b = fit_power_law(&scaled).unwrap();
        prop_assert!((a.b - b.b).abs() < 1e-9 * a.b.abs().max(1.0));
        prop_assert!((a.r2 - b.r2).abs() < 1e-9);
        let shift = a.log10_a - a.b * c.log10();
        prop_assert!((b.log10_a - shift).abs() < 1e-8);
    }

    #[test]
    fn extrapolation_inverts_prediction(
        log10_a in -2f64..3.0,
        b in -2f64..-0.01,
        target in 1e-3f64..10.0,
    ) {
        let ys = [1.0, 10.0].map(|x: f64| 10f64.powf(log10_a + b * x.log10()));
        let pts = vec![
            ScalingPoint { run_id: "a".into(), x: 1.0, y: ys[0] },
            ScalingPoint { run_id: "b".into(), x: 10.0, y: ys[1] },
        ];
        let fit = fit_power_law(&pts).unwrap();
        let x = extrapolate_x_for_loss(&fit, target).unwrap();
        prop_assert!((fit.predict(x) / target - 1.0).abs() < 1e-9);
    }
}

/// Reduced five-symbol plaintext from a random walk over `alphabet`.
fn reduced_text(alphabet: &[u8], seed: u64, len: usize) -> Vec<u8> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<u8> = Vec::with_capacity(len);
    for _ in 0..len {
        // Sticky transitions give the bigram model something to learn.
        let next = match out.last() {
            Some(&prev) if rng.gen_bool(0.5) => {
                let i = alphabet.iter().position(|&a| a == prev).unwrap();
                alphabet[(i + 1) % alphabet.len()]
            }
            _ => alphabet[rng.gen_range(0..alphabet.len())],
        };
        out.push(next);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn solver_score_is_equivariant(seed in any::<u64>(), h_seed in any::<u64>(), g_seed in any::<u64>()) {
        let alphabet = [2u8, 3, 7, 11, 20];
        let lm = NGramModel::fit_sequences(
            &[TokenSeq::from_payload(&reduced_text(&alphabet, seed, 300)).unwrap()],
            2,
            0.5,
            &alphabet,
        ).unwrap();
        let plain = TokenSeq::from_payload(&reduced_text(&alphabet, seed ^ 1, 120)).unwrap();
        let c = within(&alphabet, g_seed).apply(&plain);
        let h = within(&alphabet, h_seed);
        let opts = HillClimbOptions { iterations: 1000, restarts: 10, seed: 9, ..HillClimbOptions::default() };
        let r1 = hillclimb_decipher(&[c.clone()], &lm, &opts).unwrap();
        let r2 = hillclimb_decipher(&[h.apply(&c)], &lm, &opts).unwrap();
        // Undo the relabeling: cipher id x of c is h(x) in h(c).
        let relabeled = compose(&r2.permutation(), &h);
        let rescored = decoded_log_likelihood(&[c.clone()], &lm, relabeled.map());
        prop_assert!((rescored - r2.score).abs() < 1e-9);
        prop_assert!((r1.score - r2.score).abs() < 1e-9, "{} vs {}", r1.score, r2.score);

        let exact = brute_force_decipher(&[c.clone()], &lm, 8).unwrap();
        let freq = frequency_decipher(&[c.clone()], &lm.unigram());
        let freq_score = decoded_log_likelihood(&[c.clone()], &lm, &freq.decode_map);
        prop_assert!(exact.score + 1e-9 >= r1.score.max(freq_score));
    }
}
