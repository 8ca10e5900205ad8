use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nearv::asm::assemble;
use nearv::dis::{disassemble_image, disassemble_object};
use nearv::emu::{load_image, trace_line, Outcome};
use nearv::eval::{
    emit_report, full_matrix, gen_workload, parse_matrix, run_experiment, table1_analog,
    table1_summary, BaselineKind, EvalError, ReportFormat, WorkloadSpec, DEFAULT_THRESHOLD,
};
use nearv::image::{read_image, write_image, IMAGE_MAGIC};
use nearv::link::{link, link_gp12, parse_link_config, MemoryMap, NearPolicy};
use nearv::object::{read_object, write_object, ObjectUnit};
use nearv::EncodingVariant;

#[derive(Parser)]
#[command(
    name = "nearv",
    version,
    about = "RV32 toolchain with near-addressing loads and stores"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble a source file into a relocatable object
    Asm {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value = "single")]
        variant: EncodingVariant,
    },
    /// Link objects into an executable image
    Link(LinkArgs),
    /// Execute an image and print its final state
    Run {
        image: PathBuf,
        #[arg(long, default_value_t = 10_000_000)]
        max_steps: u64,
        /// Print one line per executed instruction before the final state
        #[arg(long)]
        trace: bool,
    },
    /// Disassemble an object or image
    Dis {
        input: PathBuf,
        /// Encoding used to decode an object (images record their own)
        #[arg(long, default_value = "single")]
        variant: EncodingVariant,
    },
    /// Generate a synthetic workload from a spec file
    Gen {
        spec: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Override the spec's seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a size experiment over a policy matrix
    Exp(ExpArgs),
}

#[derive(Args)]
struct LinkArgs {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
    /// Memory map and policy file (key=value)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<EncodingVariant>,
    #[arg(long)]
    threshold: Option<u32>,
    #[arg(long, overrides_with = "no_near_ram")]
    near_ram: bool,
    #[arg(long)]
    no_near_ram: bool,
    #[arg(long, overrides_with = "no_near_rom")]
    near_rom: bool,
    #[arg(long)]
    no_near_rom: bool,
    #[arg(long, overrides_with = "no_relax")]
    relax: bool,
    #[arg(long)]
    no_relax: bool,
    /// Relax into a 4 KB gp window with base instructions instead
    #[arg(long, conflicts_with_all = ["no_relax", "variant"])]
    gp12: bool,
    /// Print link statistics to stderr
    #[arg(long)]
    stats: bool,
}

#[derive(Args)]
struct ExpArgs {
    /// Workload spec file (omit with --preset)
    #[arg(required_unless_present = "preset")]
    spec: Option<PathBuf>,
    /// Built-in workload set
    #[arg(long, value_parser = ["table1-analog"], conflicts_with = "spec")]
    preset: Option<String>,
    /// Memory map file; defaults to a contiguous 1 MB ROM + 1 MB RAM map
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the built-in fragmented map instead of the contiguous one
    #[arg(long, conflicts_with = "config")]
    fragmented: bool,
    /// Policy matrix, one `variant=.. threshold=.. near_ram=.. near_rom=..` per line
    #[arg(long)]
    matrix: Option<PathBuf>,
    #[arg(long, default_value = "no-relax")]
    baseline: BaselineKind,
    #[arg(long, default_value = "table")]
    format: ReportFormat,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Toolchain(String),
    Semantics(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Toolchain(_) => 2,
            Failure::Semantics(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Toolchain(m) | Failure::Semantics(m) => m,
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn toolchain(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Toolchain(format!("{}: {e}", path.display()))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| toolchain(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| toolchain(path, e))
}

fn cmd_asm(input: &Path, output: &Path, variant: EncodingVariant) -> Result<()> {
    let unit = assemble(&read(input)?, variant).map_err(|e| toolchain(input, e))?;
    write(output, &write_object(&unit))
}

fn cmd_link(a: &LinkArgs) -> Result<()> {
    let (map, mut policy) = match &a.config {
        Some(path) => parse_link_config(&read(path)?).map_err(|e| toolchain(path, e))?,
        None => (
            MemoryMap::CONTIGUOUS,
            NearPolicy {
                variant: EncodingVariant::SingleRange128K,
                threshold: DEFAULT_THRESHOLD,
                near_ram: true,
                near_rom: false,
            },
        ),
    };
    if let Some(v) = a.variant {
        policy.variant = v;
    }
    if let Some(t) = a.threshold {
        policy.threshold = t;
    }
    if a.near_ram {
        policy.near_ram = true;
    }
    if a.no_near_ram {
        policy.near_ram = false;
    }
    if a.near_rom {
        policy.near_rom = true;
    }
    if a.no_near_rom {
        policy.near_rom = false;
    }
    let units = a
        .inputs
        .iter()
        .map(|p| read_object(&read(p)?).map_err(|e| toolchain(p, e)))
        .collect::<Result<Vec<ObjectUnit>>>()?;
    let linked = if a.gp12 {
        link_gp12(&units, &map, policy.threshold)
    } else {
        link(&units, &map, &policy, !a.no_relax)
    };
    let (image, stats) = linked.map_err(|e| Failure::Toolchain(format!("link: {e}")))?;
    for d in &stats.diagnostics {
        eprintln!("nearv: warning: {d}");
    }
    if a.stats {
        eprintln!("code_size_bytes {}", stats.code_size_bytes);
        eprintln!("relax_count {}", stats.relax_count);
        for w in &stats.windows {
            eprintln!(
                "window {} start 0x{:08x} anchor 0x{:08x} used {}/{} members {}",
                w.base.abi_name(),
                w.start,
                w.anchor,
                w.used,
                w.span,
                w.members
            );
        }
    }
    write(&a.output, &write_image(&image))
}

fn cmd_run(path: &Path, max_steps: u64, trace: bool) -> Result<()> {
    if max_steps == 0 {
        return Err(Failure::Usage("--max-steps must be positive".into()));
    }
    let image = read_image(&read(path)?).map_err(|e| toolchain(path, e))?;
    let mut state = load_image(&image).map_err(|e| toolchain(path, e))?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let result = state.run_with(max_steps, |pc, ins| {
        if trace {
            let _ = writeln!(out, "{}", trace_line(pc, ins));
        }
    });
    let _ = write!(out, "{}", state.dump(&result.outcome));
    eprintln!("instret {} pc 0x{:08x}", result.instret, state.pc);
    match result.outcome {
        Outcome::Halted => Ok(()),
        other => Err(Failure::Semantics(format!(
            "{}: {}",
            path.display(),
            other.label()
        ))),
    }
}

fn cmd_dis(path: &Path, variant: EncodingVariant) -> Result<()> {
    let text = read(path)?;
    let is_image = text.split_whitespace().next() == Some(IMAGE_MAGIC);
    let listing = if is_image {
        disassemble_image(&read_image(&text).map_err(|e| toolchain(path, e))?)
    } else {
        disassemble_object(
            &read_object(&text).map_err(|e| toolchain(path, e))?,
            variant,
        )
    };
    print!("{listing}");
    Ok(())
}

fn cmd_gen(spec_path: &Path, output: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec = WorkloadSpec::parse(&read(spec_path)?).map_err(|e| toolchain(spec_path, e))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let text = gen_workload(&spec).map_err(|e| toolchain(spec_path, e))?;
    write(output, &text)
}

fn eval_failure(e: EvalError) -> Failure {
    match e {
        EvalError::SemanticsMismatch { .. } | EvalError::Run { .. } => {
            Failure::Semantics(e.to_string())
        }
        e => Failure::Toolchain(e.to_string()),
    }
}

fn cmd_exp(a: &ExpArgs) -> Result<()> {
    let map = match &a.config {
        Some(path) => {
            parse_link_config(&read(path)?)
                .map_err(|e| toolchain(path, e))?
                .0
        }
        None if a.fragmented => MemoryMap::FRAGMENTED,
        None => MemoryMap::CONTIGUOUS,
    };
    let matrix = match &a.matrix {
        Some(path) => parse_matrix(&read(path)?).map_err(|e| toolchain(path, e))?,
        None => full_matrix(DEFAULT_THRESHOLD),
    };
    let specs = match (&a.spec, &a.preset) {
        (Some(path), _) => {
            let mut spec = WorkloadSpec::parse(&read(path)?).map_err(|e| toolchain(path, e))?;
            if let Some(s) = a.seed {
                spec.seed = s;
            }
            vec![spec]
        }
        _ => table1_analog(a.seed.unwrap_or(1)),
    };
    let reports = specs
        .iter()
        .map(|s| run_experiment(s, &map, &matrix, a.baseline))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(eval_failure)?;
    let mut out = String::new();
    for r in &reports {
        if reports.len() > 1 {
            out.push_str(&format!("# {}\n", r.workload));
        }
        out.push_str(&emit_report(r, a.format));
        for d in r.rows.iter().flat_map(|row| &row.diagnostics) {
            eprintln!("nearv: warning: {d}");
        }
    }
    if a.format == ReportFormat::Table && reports.len() > 1 {
        let mut variants: Vec<EncodingVariant> = matrix.iter().map(|p| p.variant).collect();
        variants.dedup();
        for v in variants {
            out.push_str(&format!(
                "\n# relative code size, {v} ({} baseline)\n",
                a.baseline.as_str()
            ));
            out.push_str(&table1_summary(&reports, v));
        }
    }
    match &a.output {
        Some(path) => write(path, &out),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Asm {
            input,
            output,
            variant,
        } => cmd_asm(&input, &output, variant),
        Command::Link(a) => cmd_link(&a),
        Command::Run {
            image,
            max_steps,
            trace,
        } => cmd_run(&image, max_steps, trace),
        Command::Dis { input, variant } => cmd_dis(&input, variant),
        Command::Gen { spec, output, seed } => cmd_gen(&spec, &output, seed),
        Command::Exp(a) => cmd_exp(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let first = first
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("nearv: {first}");
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("nearv: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
