use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const PROGRAM: &str = "\
.global _start
.data
a: .word 5
b: .word 7
sum: .word 0
.text
_start:
    lw a0, a
    lw a1, b
    add a0, a0, a1
    sw a0, sum, t2
    la t2, sum
    lw a2, 0(t2)
    ebreak
";

fn nearv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nearv"))
        .args(args)
        .output()
        .unwrap()
}

fn text(out: &[u8]) -> String {
    String::from_utf8_lossy(out).into_owned()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn build(dir: &Path, variant: &str, relax: &str) -> PathBuf {
    let src = write(dir, "prog.s", PROGRAM);
    let obj = dir.join(format!("prog-{variant}.o"));
    let out = nearv(&["asm", s(&src), "-o", s(&obj), "--variant", variant]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let img = dir.join(format!("prog-{variant}{relax}.img"));
    let out = nearv(&[
        "link",
        s(&obj),
        "-o",
        s(&img),
        "--variant",
        variant,
        relax,
        "--near-rom",
        "--stats",
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    img
}

#[test]
fn relaxed_and_plain_runs_agree() {
    let dir = TempDir::new().unwrap();
    for variant in ["single", "dual"] {
        let relaxed = nearv(&["run", s(&build(dir.path(), variant, "--relax"))]);
        let plain = nearv(&["run", s(&build(dir.path(), variant, "--no-relax"))]);
        assert_eq!(relaxed.status.code(), Some(0), "{}", text(&relaxed.stderr));
        assert_eq!(plain.status.code(), Some(0));
        let dump = text(&relaxed.stdout);
        assert!(dump.contains("status halted"), "{dump}");
        let strip = |d: &str| {
            d.lines()
                .filter(|l| !["gp ", "t0 ", "t1 "].iter().any(|r| l.starts_with(r)))
                .collect::<Vec<_>>()
                .join("\n")
        };
        assert_eq!(strip(&dump), strip(&text(&plain.stdout)));
        assert!(dump.contains("0x0000000c"), "{dump}");
    }
}

#[test]
fn asm_dis_round_trip() {
    let dir = TempDir::new().unwrap();
    let src = write(dir.path(), "prog.s", PROGRAM);
    let obj = dir.path().join("prog.o");
    assert!(nearv(&["asm", s(&src), "-o", s(&obj)]).status.success());
    let listing = nearv(&["dis", s(&obj)]);
    assert!(listing.status.success());
    let again_src = write(dir.path(), "again.s", &text(&listing.stdout));
    let again = dir.path().join("again.o");
    assert!(nearv(&["asm", s(&again_src), "-o", s(&again)])
        .status
        .success());
    assert_eq!(fs::read(&obj).unwrap(), fs::read(&again).unwrap());

    let img = build(dir.path(), "single", "--relax");
    let listing = text(&nearv(&["dis", s(&img)]).stdout);
    assert!(listing.contains("nlw"), "{listing}");
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    assert_eq!(nearv(&["asm", "--bogus"]).status.code(), Some(1));
    assert_eq!(nearv(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(nearv(&["--help"]).status.code(), Some(0));

    let bad = write(dir.path(), "bad.s", ".text\n    addi a0, a0, 99999\n");
    let out = nearv(&["asm", s(&bad), "-o", s(&dir.path().join("bad.o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).starts_with("nearv:"));

    let undef = write(
        dir.path(),
        "undef.s",
        ".global missing\n.text\n    lw a0, missing\n    ebreak\n",
    );
    let obj = dir.path().join("undef.o");
    assert!(nearv(&["asm", s(&undef), "-o", s(&obj)]).status.success());
    let out = nearv(&["link", s(&obj), "-o", s(&dir.path().join("undef.img"))]);
    assert_eq!(out.status.code(), Some(2));

    let trap = write(
        dir.path(),
        "trap.s",
        ".global _start\n.text\n_start:\n    lui a0, 0x10\n    lw a1, 0(a0)\n    ebreak\n",
    );
    let obj = dir.path().join("trap.o");
    let img = dir.path().join("trap.img");
    assert!(nearv(&["asm", s(&trap), "-o", s(&obj)]).status.success());
    assert!(nearv(&["link", s(&obj), "-o", s(&img)]).status.success());
    let out = nearv(&["run", s(&img)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(
        text(&out.stdout).contains("unmapped"),
        "{}",
        text(&out.stdout)
    );

    let spin = write(
        dir.path(),
        "spin.s",
        ".global _start\n.text\n_start:\n    beq zero, zero, 0\n",
    );
    let obj = dir.path().join("spin.o");
    let img = dir.path().join("spin.img");
    assert!(nearv(&["asm", s(&spin), "-o", s(&obj)]).status.success());
    assert!(nearv(&["link", s(&obj), "-o", s(&img)]).status.success());
    assert_eq!(
        nearv(&["run", s(&img), "--max-steps", "100"]).status.code(),
        Some(3)
    );
}

#[test]
fn gen_and_experiment() {
    let dir = TempDir::new().unwrap();
    let spec = write(
        dir.path(),
        "w.spec",
        "name=small\nscalar_count=40\naggregate_count=3\nseed=5\n",
    );
    let src = dir.path().join("w.s");
    let out = nearv(&["gen", s(&spec), "-o", s(&src)]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(fs::read_to_string(&src).unwrap().contains("_start"));

    let csv = dir.path().join("w.csv");
    let out = nearv(&["exp", s(&spec), "--format", "csv", "-o", s(&csv)]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let report = fs::read_to_string(&csv).unwrap();
    assert!(report.lines().count() > 2, "{report}");

    let out = nearv(&["exp", s(&spec), "--fragmented", "--baseline", "gp12"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains('%'));
}
