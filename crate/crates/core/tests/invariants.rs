use proptest::prelude::*;

use tada_core::aligner::{
    decode_cache, encode_cache, filter_alignment, viterbi_score, CacheRecord, Curriculum, CurriculumSchedule,
    FilterConfig,
};
use tada_core::backbone::{sfg_logits, Acoustic, FusedStep, Mode};
use tada_core::durbits::{
    chain_consistency, decode_count, durations_from_positions, encode_count, gray_decode, gray_encode, pack,
    positions_from_durations, unpack,
};
use tada_core::flowhead::cfg_combine;
use tada_core::masks::{decoder_stream_mask, encoder_mask, StreamVariant};
use tada_core::numerics::{Checkpoint, Tensor};
use tada_core::pipeline::tfg_negative;

/// `(p, T)` with `1 <= p_1 < ... < p_L <= T`.
fn layout(max_t: usize) -> impl Strategy<Value = (Vec<usize>, usize)> {
    (1..=max_t)
        .prop_flat_map(|t| (prop::collection::btree_set(1..=t, 1..=t), Just(t)))
        .prop_map(|(p, t)| (p.into_iter().collect(), t))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn durations_roundtrip((p, t) in layout(60)) {
        let d = durations_from_positions(&p, t).unwrap();
        prop_assert_eq!(d.len(), p.len());
        prop_assert_eq!(chain_consistency(&d), 1.0);
        prop_assert_eq!(positions_from_durations(&d), (p.clone(), t));
        let blanks: u32 = d.iter().map(|x| x.before).sum::<u32>() + d.last().unwrap().after;
        prop_assert_eq!(blanks as usize, t - p.len());
    }

    #[test]
    fn gray_neighbours_differ_in_one_bit(b in 1usize..=16, n in 0u32..65535) {
        let n = n % ((1u32 << b) - 1).max(1);
        let (x, y) = (gray_encode(n, b).unwrap(), gray_encode(n + 1, b).unwrap());
        prop_assert_eq!(x.iter().zip(&y).filter(|(a, c)| a != c).count(), 1);
        prop_assert_eq!(gray_decode(&x), n);
        prop_assert_eq!(decode_count(&encode_count(n, b).unwrap()), n);
    }

    #[test]
    fn pack_unpack(s in prop::collection::vec(-3.0f64..3.0, 1..12), before in 0u32..256, after in 0u32..256) {
        let y = pack(&s, before, after, 8).unwrap();
        let (s2, d) = unpack(&y, s.len(), 8).unwrap();
        prop_assert_eq!(s2, s);
        prop_assert_eq!((d.before, d.after), (before, after));
    }

    #[test]
    fn encoder_rows_stay_between_neighbours((p, t) in layout(24)) {
        let m = encoder_mask(&p, t).unwrap();
        for (i, &q) in p.iter().enumerate() {
            let lo = if i == 0 { 1 } else { p[i - 1] + 1 };
            let hi = p.get(i + 1).map_or(t, |&n| n - 1);
            for k in 1..=t {
                prop_assert_eq!(m.get(q - 1, k - 1), (lo..=hi).contains(&k), "row {} col {}", q, k);
            }
        }
        for q in 0..t {
            prop_assert!(m.get(q, q));
        }
    }

    #[test]
    fn stream_rows_never_see_past_their_position((p, t) in layout(24), strict in any::<bool>()) {
        let v = if strict { StreamVariant::Strict } else { StreamVariant::SelfInclusive };
        let m = decoder_stream_mask(&p, t, v).unwrap();
        for q in 1..=t {
            // the aligned position that closes the segment of q
            let close = p.iter().copied().find(|&x| if strict { x > q } else { x >= q }).unwrap_or(t);
            for k in close + 1..=t {
                prop_assert!(!m.get(q - 1, k - 1), "row {} sees {} beyond {}", q, k, close);
            }
        }
    }

    #[test]
    fn filter_matches_reference((p, t) in layout(400)) {
        let cfg = FilterConfig::default();
        let longest_run = p.windows(2).fold((1, 1), |(run, best), w| {
            let r = if w[1] == w[0] + 1 { run + 1 } else { 1 };
            (r, best.max(r))
        }).1;
        let mut gaps = vec![p[0], t - p[p.len() - 1]];
        gaps.extend(p.windows(2).map(|w| w[1] - w[0]));
        let keep = longest_run <= cfg.max_run && gaps.iter().all(|&g| g <= cfg.max_gap);
        prop_assert_eq!(filter_alignment(&p, t, &cfg).is_keep(), keep);
    }

    #[test]
    fn viterbi_positions_are_valid_and_score_matches(
        t in 1usize..20,
        seed_scores in prop::collection::vec(-5.0f64..0.0, 20 * 4),
        tokens in prop::collection::vec(0usize..3, 1..20),
    ) {
        prop_assume!(tokens.len() <= t);
        let y = &seed_scores[..t * 4];
        let (p, score) = viterbi_score(y, t, 4, &tokens).unwrap();
        prop_assert!(p.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(p[0] >= 1 && p[p.len() - 1] <= t);
        let direct: f64 = p.iter().zip(&tokens).map(|(&q, &w)| y[(q - 1) * 4 + w]).sum();
        prop_assert!((direct - score).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_roundtrip(arrays in prop::collection::vec((prop::collection::vec(1usize..4, 0..3), any::<u32>()), 0..5)) {
        let mut ck = Checkpoint::new();
        for (i, (shape, seed)) in arrays.iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|j| (seed.wrapping_add(j as u32) as f32).sin()).collect();
            ck.insert(format!("a{i}"), Tensor::new(shape.clone(), data).unwrap());
        }
        let bytes = ck.to_bytes();
        prop_assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        prop_assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn cache_roundtrip(items in prop::collection::vec((any::<u32>(), layout(50)), 0..6)) {
        let records: Vec<CacheRecord> = items.into_iter().map(|(id, (positions, t))| CacheRecord { id, t, positions }).collect();
        let bytes = encode_cache(&records).unwrap();
        prop_assert_eq!(bytes.len(), 4 * records.iter().map(|r| 3 + r.positions.len()).sum::<usize>());
        prop_assert_eq!(decode_cache(&bytes).unwrap(), records);
    }

    #[test]
    fn guidance_identities(v in prop::collection::vec(-4.0f64..4.0, 2..10), w in prop::collection::vec(-4.0f64..4.0, 10)) {
        let neg = &w[..v.len()];
        prop_assert_eq!(cfg_combine(&v, neg, 1.0, v.len()).unwrap(), v.clone());
        let z = cfg_combine(&v, neg, 2.5, 1).unwrap();
        prop_assert_eq!(&z[1..], &v[1..]);
        let (a, b): (Vec<f32>, Vec<f32>) = (v.iter().map(|&x| x as f32).collect(), neg.iter().map(|&x| x as f32).collect());
        prop_assert_eq!(sfg_logits(&a, &b, 0.0).unwrap(), a.clone());
        prop_assert_eq!(sfg_logits(&a, &b, 1.0).unwrap(), b);
    }

    #[test]
    fn tfg_negative_only_erases_text(tokens in prop::collection::vec(0usize..32, 1..12)) {
        let steps: Vec<FusedStep> = tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| FusedStep {
                token: t,
                acoustic: if i % 2 == 0 { Acoustic::Bos } else { Acoustic::Packed(vec![i as f32; 3]) },
                mode: if i % 3 == 0 { Mode::TextOnly } else { Mode::TextSpeech },
            })
            .collect();
        let neg = tfg_negative(&steps, 32);
        prop_assert_eq!(neg.len(), steps.len());
        for (a, b) in steps.iter().zip(&neg) {
            prop_assert_eq!(b.token, 32);
            prop_assert_eq!(&a.acoustic, &b.acoustic);
            prop_assert_eq!(a.mode, b.mode);
        }
    }

    #[test]
    fn curriculum_never_shrinks(batches in prop::collection::vec(prop::collection::vec(0usize..40, 1..6), 1..30)) {
        let schedule = CurriculumSchedule { stages: vec![(0, Some(4)), (10, Some(12)), (20, None)] };
        let mut c = Curriculum::new(40, schedule);
        let mut prev: Vec<usize> = Vec::new();
        for (step, b) in batches.iter().enumerate() {
            let v = c.update(step as u64, b);
            let now = v.indices();
            prop_assert!(prev.iter().all(|k| now.contains(k)));
            prop_assert!(v.contains(40));
            prev = now;
        }
    }
}
