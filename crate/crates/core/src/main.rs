use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use reslab::analysis::scev::{header_ivs, scev_analyze};
use reslab::analysis::{compute_liveness, find_loops};
use reslab::campaign::{self, Campaign, CampaignConfig, Mode, Prepared, Target, CSV_HEADER};
use reslab::injector::{classify, InjectionPlan};
use reslab::kernels::{self, KERNELS};
use reslab::mir::{inst_text, parse_module_named, print_module, validate, InstId, Module};
use reslab::recovery::{build_kernels, Artifacts};
use reslab::runtime::{RecoveryMode, Runtime};
use reslab::transforms::{run_pipeline, Pass};
use reslab::vm::{profile, render_trace, run, Input, Program, RecoveryHook, RunConfig};

#[derive(Parser)]
#[command(name = "reslab", version, about = "Recovery kernels and fault-injection campaigns on a small SSA IR")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for campaigns (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Text,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse and validate IR files.
    Validate { files: Vec<PathBuf> },
    /// Print liveness, loop or induction-variable tables.
    Analyze {
        #[arg(long)]
        liveness: bool,
        #[arg(long)]
        loops: bool,
        #[arg(long)]
        scev: bool,
        file: String,
    },
    /// Apply a pass pipeline such as `sr,unroll:2,icp,mck`.
    Transform {
        #[arg(long, default_value = "")]
        passes: String,
        file: String,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Emit the recovery table, kernel library and IV pairs.
    BuildKernels {
        file: String,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run `main` on an input.
    Run {
        file: String,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        trace: bool,
        #[arg(long)]
        budget: Option<u64>,
    },
    /// Print per-instruction execution counts.
    Profile {
        file: String,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Run once with a single bit flip.
    Inject {
        file: String,
        /// `[FUNC:]INST,OCCURRENCE,BIT`; FUNC defaults to main.
        #[arg(long)]
        plan: String,
        #[arg(long)]
        input: Option<PathBuf>,
        /// Recovery artifacts from build-kernels; built on the fly when
        /// omitted.
        #[arg(long)]
        artifacts: Option<PathBuf>,
        #[arg(long, default_value = "none")]
        mode: Mode,
        /// Passes applied before injecting, as for `transform`.
        #[arg(long, default_value = "")]
        passes: String,
        #[arg(long)]
        trace: bool,
        #[arg(long)]
        budget: Option<u64>,
    },
    /// Seeded injection campaign. Targets are bundled kernel names, IR
    /// files, or `all`.
    Campaign {
        #[arg(default_value = "all")]
        targets: Vec<String>,
        #[arg(long, default_value_t = campaign::DEFAULT_RUNS)]
        runs: u64,
        /// One or more of none, care, iterpro, comma separated.
        #[arg(long, default_value = "iterpro")]
        mode: String,
        #[arg(long, value_enum, default_value_t = TargetArg::All)]
        target: TargetArg,
        /// Input for IR files given by path.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Fill the recovery_ms column and report recovery times.
        #[arg(long)]
        timing: bool,
        /// Directory receiving one CSV per kernel and mode.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Recovery log lines, appended per kernel and mode.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Exit nonzero when any kernel fails to build.
        #[arg(long)]
        strict: bool,
    },
    /// Recoverable induction variables before and after the transforms.
    ReportIvs {
        #[arg(default_value = "all")]
        targets: Vec<String>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TargetArg {
    All,
    Addr,
}

/// A module to work on, with its input and classic passes when it is one
/// of the bundled kernels.
struct Loaded {
    name: String,
    module: Module,
    input: Option<Input>,
    classic: Vec<Pass>,
}

fn load(arg: &str) -> Result<Loaded> {
    if let Some(k) = kernels::by_name(arg) {
        return Ok(Loaded {
            name: k.name.to_string(),
            module: k.module()?,
            input: Some(k.input()),
            classic: k.classic_passes(),
        });
    }
    let path = Path::new(arg);
    let text = fs::read_to_string(path).with_context(|| format!("reading {arg}"))?;
    let module = parse_module_named(&text, arg)?;
    let sibling = path.with_extension("input");
    let input = match fs::read_to_string(&sibling) {
        Ok(t) => Some(Input::parse(&t).with_context(|| format!("parsing {}", sibling.display()))?),
        Err(_) => None,
    };
    let name = path.file_stem().map_or(arg.to_string(), |s| s.to_string_lossy().into_owned());
    Ok(Loaded { name, module, input, classic: Vec::new() })
}

fn expand(targets: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    for t in targets {
        if t == "all" {
            out.extend(KERNELS.iter().map(|k| k.name.to_string()));
        } else {
            out.push(t.clone());
        }
    }
    out
}

fn input_for(l: &Loaded, path: Option<&Path>) -> Result<Input> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(Input::parse(&text)?)
        }
        None => l.input.clone().context("no input: pass --input"),
    }
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_plan(m: &Module, arg: &str, seed: u64) -> Result<InjectionPlan> {
    let parts: Vec<&str> = arg.split(',').map(str::trim).collect();
    let [site, occurrence, bit] = parts[..] else {
        bail!("plan `{arg}` is not [FUNC:]INST,OCCURRENCE,BIT");
    };
    let (func, inst) = site.rsplit_once(':').unwrap_or(("main", site));
    let fid = m.function_id(func).with_context(|| format!("no function `{func}`"))?;
    let inst: u32 = inst.trim_start_matches('#').parse().context("instruction index")?;
    if inst as usize >= m.func(fid).num_insts() {
        bail!("`{func}` has no instruction {inst}");
    }
    let bit: u32 = bit.parse().context("bit")?;
    if bit >= 64 {
        bail!("bit must be below 64");
    }
    Ok(InjectionPlan {
        id: 0,
        func: fid,
        inst: InstId(inst),
        occurrence: occurrence.parse().context("occurrence")?,
        bit,
        seed,
    })
}

fn analyze(m: &Module, liveness: bool, loops: bool, scev: bool) -> String {
    let all = !(liveness || loops || scev);
    let mut out = String::new();
    for f in &m.functions {
        out += &format!("fn {}\n", f.name);
        let found = find_loops(f);
        if liveness || all {
            let lv = compute_liveness(f);
            let names = |set: &std::collections::BTreeSet<_>| {
                set.iter().map(|v| format!("%{}", f.value_name(*v))).collect::<Vec<_>>().join(" ")
            };
            out += "  liveness\n";
            for inst in f.insts() {
                out += &format!(
                    "    {:<5} {:<40} in {{{}}} out {{{}}}\n",
                    inst.id.to_string(),
                    inst_text(m, f, inst),
                    names(&lv.live_in[inst.id.index()]),
                    names(&lv.live_out[inst.id.index()])
                );
            }
        }
        if loops || all {
            out += "  loops\n";
            for (i, l) in found.iter().enumerate() {
                let label = |b| f.block(b).label.clone();
                out += &format!(
                    "    loop{} header={} latch={} depth={} parent={} preheader={} body=[{}]\n",
                    i,
                    label(l.header),
                    label(l.latch),
                    l.depth,
                    l.parent.map_or("-".into(), |p| format!("loop{p}")),
                    l.preheader.map_or("-".into(), label),
                    l.body.iter().map(|b| label(*b)).collect::<Vec<_>>().join(",")
                );
            }
        }
        if scev || all {
            out += "  induction variables\n";
            for l in &found {
                for iv in header_ivs(l, f) {
                    out += &format!(
                        "    {:<5} %{:<14} {{{}, +, {}}}\n",
                        f.block(l.header).label,
                        f.value_name(iv.value),
                        iv.init.display(m, f),
                        iv.step.display(m, f)
                    );
                }
                for inst in f.insts() {
                    let Some(v) = inst.result else { continue };
                    let is_phi = matches!(inst.op, reslab::mir::Op::Phi { .. });
                    if is_phi || !l.contains(f.block_of(inst.id)) {
                        continue;
                    }
                    if let Some(r) = scev_analyze(v, l, f) {
                        out += &format!(
                            "    {:<5} %{:<14} {{{}, +, {}}}\n",
                            f.block(l.header).label,
                            f.value_name(v),
                            r.init.display(m, f),
                            r.step.display(m, f)
                        );
                    }
                }
            }
        }
    }
    out
}

fn modes(s: &str) -> Result<Vec<Mode>> {
    s.split(',').map(|m| m.trim().parse::<Mode>().map_err(anyhow::Error::msg)).collect()
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Validate { files } => {
            let mut bad = false;
            for path in files {
                let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                match parse_module_named(&text, &path.display().to_string()) {
                    Err(e) => {
                        bad = true;
                        println!("{e}");
                    }
                    Ok(m) => {
                        let vs = validate(&m);
                        bad |= !vs.is_empty();
                        for v in &vs {
                            println!("{}: {v}", path.display());
                        }
                        if vs.is_empty() {
                            println!("{}: ok", path.display());
                        }
                    }
                }
            }
            return Ok(if bad { ExitCode::FAILURE } else { ExitCode::SUCCESS });
        }
        Cmd::Analyze { liveness, loops, scev, file } => {
            let l = load(&file)?;
            print!("{}", analyze(&l.module, liveness, loops, scev));
        }
        Cmd::Transform { passes, file, output } => {
            let l = load(&file)?;
            let (m, reports) = run_pipeline(&l.module, &Pass::parse_list(&passes)?)?;
            for r in &reports {
                eprintln!("{r}");
            }
            emit(output.as_deref(), &print_module(&m))?;
        }
        Cmd::BuildKernels { file, output } => {
            let l = load(&file)?;
            let build = build_kernels(&l.module);
            build.artifacts(&l.module)?.write_dir(&output)?;
            println!(
                "{} kernels, {} IV pairs, {} accesses skipped -> {}",
                build.kernels.len(),
                build.pairs.len(),
                build.skipped.len(),
                output.display()
            );
            for (key, func, reason) in &build.skipped {
                println!("  skipped {key}: {}", reason.describe(l.module.func(*func)));
            }
        }
        Cmd::Run { file, input, trace, budget } => {
            let l = load(&file)?;
            let input = input_for(&l, input.as_deref())?;
            let prog = Program::new(l.module)?;
            let r = run(&prog, &input, RunConfig { budget, trace, ..Default::default() })?;
            if trace {
                print!("{}", render_trace(&prog.module, &r.trace));
            }
            println!("status {:?}", r.status);
            println!("instructions {}", r.dyn_count);
            if let Some(ret) = r.output.ret {
                println!("ret {ret:#x}");
            }
        }
        Cmd::Profile { file, input } => {
            let l = load(&file)?;
            let input = input_for(&l, input.as_deref())?;
            let prog = Program::new(l.module)?;
            let (_, counts) = profile(&prog, &input)?;
            if cli.format == Format::Csv {
                println!("instr,count");
            }
            for (fi, f) in prog.module.functions.iter().enumerate() {
                for inst in f.insts() {
                    let n = counts[fi][inst.id.index()];
                    match cli.format {
                        Format::Csv => println!("{}:{},{n}", f.name, inst.id.0),
                        Format::Text => {
                            println!("{:>10}  {}:{:<4} {}", n, f.name, inst.id.0, inst_text(&prog.module, f, inst))
                        }
                    }
                }
            }
        }
        Cmd::Inject { file, plan, input, artifacts, mode, passes, trace, budget } => {
            let mut l = load(&file)?;
            let input = input_for(&l, input.as_deref())?;
            l.module = run_pipeline(&l.module, &Pass::parse_list(&passes)?)?.0;
            let plan = parse_plan(&l.module, &plan, cli.seed)?;
            let artifacts = match (mode, artifacts) {
                (Mode::None, _) => None,
                (_, Some(dir)) => Some(Artifacts::read_dir(&dir)?),
                (_, None) => Some(build_kernels(&l.module).artifacts(&l.module)?),
            };
            let prog = Program::new(l.module)?;
            let golden = run(&prog, &input, RunConfig::default())?;
            let mut runtime = artifacts.map(|a| {
                let m = if mode == Mode::Care { RecoveryMode::Care } else { RecoveryMode::IterPro };
                Runtime::new(a, m)
            });
            let r = run(
                &prog,
                &input,
                RunConfig {
                    budget: Some(budget.unwrap_or(golden.dyn_count.saturating_mul(10).max(1000))),
                    trace,
                    injection: Some(plan.injection()),
                    hook: runtime.as_mut().map(|h| h as &mut dyn RecoveryHook),
                    ..Default::default()
                },
            )?;
            if trace {
                print!("{}", render_trace(&prog.module, &r.trace));
            }
            if let Some(rt) = &runtime {
                for a in &rt.log {
                    println!("{}", a.log_line(plan.id));
                }
            }
            let o = classify(&r, &golden);
            println!(
                "class={} trap={} latency={} recovered={}",
                o.class,
                o.trap.map_or("-", |t| t.as_str()),
                o.latency.map_or("-".into(), |x| x.to_string()),
                o.recovered
            );
        }
        Cmd::Campaign { targets, runs, mode, target, input, timing, out, log, strict } => {
            let modes = modes(&mode)?;
            let targets = expand(&targets);
            if cli.format == Format::Csv && out.is_none() && targets.len() * modes.len() > 1 {
                bail!("CSV for several kernels or modes needs --out DIR");
            }
            if let Some(dir) = &out {
                fs::create_dir_all(dir)?;
            }
            let mut failed = false;
            for t in &targets {
                let mut rates = Vec::new();
                for &m in &modes {
                    let cfg = CampaignConfig {
                        runs,
                        seed: cli.seed,
                        mode: m,
                        target: if target == TargetArg::Addr { Target::AddrFeeding } else { Target::All },
                        timing,
                        jobs: cli.jobs,
                    };
                    let done = load(t).and_then(|l| {
                        let input = input_for(&l, input.as_deref())?;
                        let mut passes = l.classic.clone();
                        passes.extend(m.extra_passes());
                        let p = Prepared::new(&l.name, &l.module, &input, m, &passes)?;
                        let c = p.campaign(&cfg)?;
                        Ok((p, c))
                    });
                    let (p, c): (Prepared, Campaign) = match done {
                        Ok(x) => x,
                        Err(e) => {
                            failed = true;
                            eprintln!("{t} ({m}): {e:#}");
                            continue;
                        }
                    };
                    let csv = c.csv(&p);
                    debug_assert!(csv.starts_with(CSV_HEADER));
                    if let Some(dir) = &out {
                        fs::write(dir.join(format!("{}-{m}.csv", p.name)), &csv)?;
                    }
                    if let Some(path) = &log {
                        use std::io::Write as _;
                        let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
                        for line in c.log_lines() {
                            writeln!(f, "kernel={} mode={m} {line}", p.name)?;
                        }
                    }
                    let rep = c.report();
                    match cli.format {
                        Format::Csv => print!("{csv}"),
                        Format::Text => print!("{}", rep.render()),
                    }
                    if let Some(r) = rep.recovery_rate() {
                        rates.push((m, r));
                    }
                }
                if cli.format == Format::Text && rates.len() > 1 {
                    let (m0, r0) = rates[0];
                    for (m, r) in &rates[1..] {
                        println!("{t}: {m} recovery rate {:+.2} points vs {m0}", (r - r0) * 100.0);
                    }
                }
                if cli.format == Format::Text {
                    println!();
                }
            }
            if failed && strict {
                return Ok(ExitCode::FAILURE);
            }
        }
        Cmd::ReportIvs { targets } => {
            let mut rows = Vec::new();
            for t in expand(&targets) {
                let l = load(&t)?;
                rows.push(campaign::iv_stats(&l.name, &l.module, &l.classic)?);
            }
            match cli.format {
                Format::Text => print!("{}", campaign::render_iv_stats(&rows)),
                Format::Csv => {
                    println!("kernel,loops,before,after,ratio");
                    for r in rows {
                        println!("{},{},{},{},{}", r.name, r.loops, r.before, r.after, r.ratio());
                    }
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

