mod common;

use common::{near_vs_pair, random_any, VARIANTS};
use nearv::asm::{assemble, split_hi_lo};
use nearv::eval::{gen_workload, WorkloadSpec};
use nearv::isa::{near_offset_domain, BaseSelect, EncodingVariant, Mnemonic};
use nearv::object::{read_object, write_object};
use nearv::{decode, encode};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn variant() -> impl Strategy<Value = EncodingVariant> {
    prop::sample::select(VARIANTS.to_vec())
}

const ACCESSES: [Mnemonic; 10] = [
    Mnemonic::Lb,
    Mnemonic::Lh,
    Mnemonic::Lw,
    Mnemonic::Lbu,
    Mnemonic::Lhu,
    Mnemonic::Flw,
    Mnemonic::Sb,
    Mnemonic::Sh,
    Mnemonic::Sw,
    Mnemonic::Fsw,
];

proptest! {
    #[test]
    fn encode_decode_round_trip(v in variant(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..64 {
            let ins = random_any(v, &mut rng);
            let word = encode(&ins, v).unwrap();
            prop_assert_eq!(decode(word, v).unwrap(), ins);
        }
    }

    #[test]
    fn decode_encode_round_trip(v in variant(), word in any::<u32>()) {
        if let Ok(ins) = decode(word, v) {
            prop_assert_eq!(decode(encode(&ins, v).unwrap(), v).unwrap(), ins);
        }
    }

    #[test]
    fn hi_lo_split_reconstructs(value in any::<u32>()) {
        let (hi, lo) = split_hi_lo(value);
        prop_assert!((-2048..=2047).contains(&lo));
        prop_assert_eq!((hi << 12).wrapping_add(lo as u32), value);
    }

    #[test]
    fn near_access_matches_pair(
        v in variant(),
        m in prop::sample::select(ACCESSES.to_vec()),
        b1 in any::<bool>(),
        base in 0x1000_0000u32..0xF000_0000,
        raw in any::<i32>(),
        value in any::<u32>(),
        data in any::<[u8; 16]>(),
    ) {
        let width = m.access_width().unwrap() as i64;
        let (min, max) = near_offset_domain(v);
        let span = i64::from(max) - i64::from(min) + 1;
        let mut offset = i64::from(min) + (i64::from(raw) - i64::from(min)).rem_euclid(span);
        offset -= (i64::from(base) + offset).rem_euclid(width);
        prop_assume!(offset >= i64::from(min));
        let bs = (v == EncodingVariant::DualRange64K).then_some(if b1 { BaseSelect::B1 } else { BaseSelect::B0 });
        let (near, pair) = near_vs_pair(v, m, bs, base, offset as i32, value, data);
        prop_assert_eq!(near.dest, pair.dest);
        prop_assert_eq!(near.trace, pair.trace);
        prop_assert_eq!(near.memory, pair.memory);
        prop_assert_eq!(near.instret + 1, pair.instret);
    }

    #[test]
    fn object_text_round_trip(v in variant(), seed in 0u64..1000, scalars in 1u32..40) {
        let spec = WorkloadSpec { scalar_count: scalars, aggregate_count: 2, seed, ..WorkloadSpec::default() };
        let unit = assemble(&gen_workload(&spec).unwrap(), v).unwrap();
        prop_assert_eq!(read_object(&write_object(&unit)).unwrap(), unit);
    }
}
