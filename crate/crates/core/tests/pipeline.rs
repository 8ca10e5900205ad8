mod common;

use common::VARIANTS;
use nearv::asm::assemble;
use nearv::emu::{load_image, Outcome};
use nearv::eval::{corpus, gen_workload, WorkloadSpec};
use nearv::image::{read_image, write_image};
use nearv::isa::{is_near_reachable, EncodingVariant, Reg};
use nearv::link::{link, MemoryMap, NearPolicy};
use nearv::object::ObjectUnit;

const T0: Reg = Reg(5);
const T1: Reg = Reg(6);

fn policy(variant: EncodingVariant, threshold: u32, near_ram: bool, near_rom: bool) -> NearPolicy {
    NearPolicy {
        variant,
        threshold,
        near_ram,
        near_rom,
    }
}

fn workload(seed: u64, variant: EncodingVariant) -> ObjectUnit {
    let spec = WorkloadSpec {
        scalar_count: 120,
        aggregate_count: 4,
        rodata_fraction: 0.3,
        seed,
        ..WorkloadSpec::default()
    };
    assemble(&gen_workload(&spec).unwrap(), variant).unwrap()
}

#[test]
fn base_registers_per_variant() {
    let single = workload(1, EncodingVariant::SingleRange128K);
    let (image, _) = link(
        &[single],
        &MemoryMap::CONTIGUOUS,
        &policy(EncodingVariant::SingleRange128K, 64, true, true),
        true,
    )
    .unwrap();
    assert_eq!(
        image.regs.iter().map(|r| r.0).collect::<Vec<_>>(),
        [Reg::GP]
    );

    let dual = workload(1, EncodingVariant::DualRange64K);
    let (image, _) = link(
        &[dual],
        &MemoryMap::CONTIGUOUS,
        &policy(EncodingVariant::DualRange64K, 64, true, true),
        true,
    )
    .unwrap();
    let regs: Vec<Reg> = image.regs.iter().map(|r| r.0).collect();
    assert!(regs.contains(&T0) && regs.contains(&T1));
    assert!(!regs.contains(&Reg::GP));
}

#[test]
fn zero_threshold_matches_no_relax() {
    for v in VARIANTS {
        for map in [MemoryMap::CONTIGUOUS, MemoryMap::FRAGMENTED] {
            let unit = workload(7, v);
            let p = policy(v, 0, true, true);
            let (relaxed, stats) = link(std::slice::from_ref(&unit), &map, &p, true).unwrap();
            let (plain, _) = link(&[unit], &map, &p, false).unwrap();
            assert_eq!(stats.relax_count, 0);
            assert_eq!(write_image(&relaxed), write_image(&plain));
        }
    }
}

#[test]
fn size_identity_and_monotonicity() {
    for spec in corpus(6, 99) {
        for v in VARIANTS {
            let unit = assemble(&gen_workload(&spec).unwrap(), v).unwrap();
            let map = MemoryMap::FRAGMENTED;
            let (_, base) = link(
                std::slice::from_ref(&unit),
                &map,
                &policy(v, 64, true, false),
                false,
            )
            .unwrap();
            let (_, ram) = link(
                std::slice::from_ref(&unit),
                &map,
                &policy(v, 64, true, false),
                true,
            )
            .unwrap();
            let (_, both) = link(&[unit], &map, &policy(v, 64, true, true), true).unwrap();
            for s in [&ram, &both] {
                assert_eq!(
                    s.code_size_bytes + 4 * s.relax_count as u32,
                    base.code_size_bytes
                );
            }
            assert!(both.relax_count >= ram.relax_count);
            assert!(both.code_size_bytes <= ram.code_size_bytes);
        }
    }
}

#[test]
fn window_members_reachable_from_anchor() {
    for v in VARIANTS {
        let unit = workload(3, v);
        let (image, stats) = link(
            &[unit],
            &MemoryMap::FRAGMENTED,
            &policy(v, 64, true, true),
            true,
        )
        .unwrap();
        assert!(!stats.windows.is_empty());
        for w in &stats.windows {
            let anchor = image.reg(w.base).unwrap();
            assert_eq!(anchor, w.anchor);
            assert!(w.members > 0 && w.used <= w.span);
            let in_window: Vec<_> = image
                .symbols
                .iter()
                .filter(|s| s.addr >= w.start && s.addr < w.start + w.used)
                .collect();
            assert!(in_window.len() >= w.members);
            for sym in in_window {
                assert!(is_near_reachable(sym.addr, anchor, v), "{}", sym.name);
                assert!(
                    is_near_reachable(sym.addr + sym.size.max(1) - 1, anchor, v),
                    "{} end",
                    sym.name
                );
            }
        }
    }
}

#[test]
fn execution_is_deterministic() {
    for v in VARIANTS {
        let (image, _) = link(
            &[workload(11, v)],
            &MemoryMap::CONTIGUOUS,
            &policy(v, 64, true, true),
            true,
        )
        .unwrap();
        let image = read_image(&write_image(&image)).unwrap();
        let runs: Vec<String> = (0..2)
            .map(|_| {
                let mut st = load_image(&image).unwrap();
                let r = st.run(10_000_000);
                assert_eq!(r.outcome, Outcome::Halted);
                format!("{}{}", st.dump(&r.outcome), r.instret)
            })
            .collect();
        assert_eq!(runs[0], runs[1]);
    }
}

#[test]
fn multi_unit_link_runs() {
    let v = EncodingVariant::SingleRange128K;
    let lib = assemble(".global counter\n.global bump\n.data\ncounter: .word 41\n.text\nbump:\n    lw a0, counter\n    addi a0, a0, 1\n    sw a0, counter, t2\n    jalr zero, 0(ra)\n", v).unwrap();
    let main = assemble(".global _start\n.global bump\n.global counter\n.text\n_start:\n    jal ra, bump\n    lw a1, counter\n    ebreak\n", v).unwrap();
    for relax in [false, true] {
        let (image, _) = link(
            &[main.clone(), lib.clone()],
            &MemoryMap::CONTIGUOUS,
            &policy(v, 64, true, false),
            relax,
        )
        .unwrap();
        let mut st = load_image(&image).unwrap();
        assert_eq!(st.run(100).outcome, Outcome::Halted);
        assert_eq!(st.x[11], 42);
    }
}
