//! Codec and quantizer properties over whole vectors and the wire format.

use moniqua::codec::{centered_mod, lemma1_recover, CodecError, EncodedMessage, ModuloCodec};
use moniqua::quant::{pack_codes, unpack_codes, QuantizerKind, QuantizerSpec, Randomness, SharedSeed};
use proptest::prelude::*;

fn spec(kind: u8, m: u64) -> QuantizerSpec {
    match kind % 4 {
        0 => QuantizerSpec::nearest(1.0 / m as f64).unwrap(),
        1 => QuantizerSpec::stochastic(1.0 / (m + 1) as f64, Randomness::Shared).unwrap(),
        2 => QuantizerSpec::stochastic(1.0 / (m + 1) as f64, Randomness::Independent).unwrap(),
        _ => QuantizerSpec::exact(),
    }
}

fn vectors(dim: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        proptest::collection::vec(-100.0f64..100.0, dim),
        proptest::collection::vec(-0.999f64..0.999, dim),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn recovery_is_exact_inside_the_window(
        y in -1e4f64..1e4,
        frac in -0.999f64..0.999,
        theta in 1e-4f64..1e2,
    ) {
        let x = y + frac * theta;
        let r = lemma1_recover(centered_mod(x, 2.0 * theta).unwrap(), y, theta).unwrap();
        prop_assert!((r - x).abs() <= 1e-12 * x.abs().max(theta));
    }

    #[test]
    fn vector_lift_respects_error_bound(
        (y, frac) in vectors(24),
        theta in 1e-3f64..10.0,
        m in 2u64..2000,
        kind in any::<u8>(),
        k in any::<u32>(),
        worker in 0usize..64,
    ) {
        let c = ModuloCodec::new(theta, spec(kind, m)).unwrap();
        let x: Vec<f64> = y.iter().zip(&frac).map(|(a, f)| a + f * theta).collect();
        let seed = SharedSeed::new(5);
        let msg = c.encode(&x, k as u64, worker, &seed, true).unwrap();
        let remote = c.decode_remote(&msg, &y).unwrap();
        let own = c.self_bias(&x, &msg).unwrap();
        for i in 0..x.len() {
            prop_assert!((remote[i] - x[i]).abs() <= c.error_bound() + 1e-12);
            prop_assert_eq!(remote[i].to_bits(), own[i].to_bits());
        }
    }

    #[test]
    fn wire_round_trip_and_tamper_detection(
        (y, frac) in vectors(17),
        theta in 1e-2f64..5.0,
        m in 2u64..600,
        kind in 0u8..3,
        flip in 0usize..1000,
    ) {
        let c = ModuloCodec::new(theta, spec(kind, m)).unwrap();
        let x: Vec<f64> = y.iter().zip(&frac).map(|(a, f)| a + f * theta).collect();
        let msg = c.encode(&x, 3, 1, &SharedSeed::new(9), true).unwrap();
        let bytes = msg.to_bytes().unwrap();
        let back = EncodedMessage::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &msg);
        prop_assert!(EncodedMessage::from_bytes(&bytes[..bytes.len() - 1]).is_err());

        // flip one payload bit inside the used code bits
        let used = msg.payload_bits() as usize;
        let bit = flip % used;
        let mut bad = msg.clone();
        bad.packed[bit / 8] ^= 1 << (bit % 8);
        let r = c.decode_remote(&bad, &y);
        prop_assert!(r.is_err(), "tampered message decoded");
        if let Err(e) = r {
            let detected = matches!(
                e,
                CodecError::RecoveryVerificationFailed { .. } | CodecError::Quant(_) | CodecError::Wire(_)
            );
            prop_assert!(detected, "unexpected error {e}");
        }
    }

    #[test]
    fn encoding_is_deterministic_and_shared_offsets_ignore_worker(
        x in proptest::collection::vec(-10.0f64..10.0, 1..32),
        m in 3u64..300,
        k in any::<u32>(),
    ) {
        let shared = ModuloCodec::new(1.0, QuantizerSpec::stochastic(1.0 / m as f64, Randomness::Shared).unwrap()).unwrap();
        let seed = SharedSeed::new(1234);
        let a = shared.encode(&x, k as u64, 0, &seed, false).unwrap();
        let b = shared.encode(&x, k as u64, 0, &seed, false).unwrap();
        let c = shared.encode(&x, k as u64, 7, &seed, false).unwrap();
        prop_assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        prop_assert_eq!(a.packed, c.packed);
    }

    #[test]
    fn packing_is_bit_exact(bits in 1u32..=64, raw in proptest::collection::vec(any::<u64>(), 0..200)) {
        let mask = if bits == 64 { u64::MAX } else { (1u64 << bits) - 1 };
        let codes: Vec<u64> = raw.iter().map(|c| c & mask).collect();
        let bytes = pack_codes(&codes, bits).unwrap();
        prop_assert_eq!(bytes.len(), (codes.len() * bits as usize).div_ceil(8));
        prop_assert_eq!(unpack_codes(&bytes, bits, codes.len()).unwrap(), codes);
    }

    #[test]
    fn stochastic_rounding_brackets_the_input(x in -1e3f64..1e3, m in 2u64..1024, u in 0.0f64..1.0) {
        let q = QuantizerSpec::new(QuantizerKind::StochasticRound, 1.0 / m as f64, 1.0, Randomness::Shared).unwrap();
        let v = q.apply(x, u).unwrap();
        let s = q.step;
        prop_assert!(v >= x - s - 1e-9 && v <= x + s + 1e-9);
        let g = v / s;
        prop_assert!((g - g.round()).abs() < 1e-6);
    }
}

#[test]
fn rejects_gossip_and_wide_delta() {
    assert!(ModuloCodec::new(1.0, QuantizerSpec::gossip(0.5).unwrap()).is_err());
    assert!(ModuloCodec::new(1.0, QuantizerSpec::stochastic(0.5, Randomness::Shared).unwrap()).is_err());
}
