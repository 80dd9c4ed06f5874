//! Fault-injection campaigns over one prepared program, and the reports
//! built from them.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::rc::Rc;
use std::str::FromStr;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::analysis::scev::{header_ivs, phi_init_next};
use crate::analysis::{find_loops, is_used_in_addr_compute};
use crate::injector::{classify, injection_sites, InjectionPlan, Outcome, OutcomeClass, PlanSampler, BUCKETS};
use crate::kernels::Kernel;
use crate::mir::{FuncId, InstId, Module, Op, ParseError};
use crate::recovery::{build_kernels, Artifacts, TableError};
use crate::runtime::{RecoveryAction, RecoveryMode, Runtime};
use crate::transforms::{run_pipeline, Pass, TransformError};
use crate::vm::{
    profile, run, Input, MachineState, Observer, Program, RecoveryHook, RunConfig, RunResult,
    Status, TrapKind, TrapRecord, VmError,
};

pub const DEFAULT_RUNS: u64 = 5000;
pub const CI_RUNS: u64 = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// No recovery: the plain manifestation study.
    None,
    /// Replay-only recovery on the classically optimized program.
    Care,
    /// Full pipeline with induction-variable repair.
    IterPro,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::None => "none",
            Mode::Care => "care",
            Mode::IterPro => "iterpro",
        }
    }

    /// Passes applied on top of the kernel's classic ones.
    pub fn extra_passes(self) -> Vec<Pass> {
        match self {
            Mode::Care => vec![],
            Mode::None | Mode::IterPro => vec![Pass::Icp, Pass::MicroCheckpoint],
        }
    }

    fn recovery(self) -> Option<RecoveryMode> {
        match self {
            Mode::None => None,
            Mode::Care => Some(RecoveryMode::Care),
            Mode::IterPro => Some(RecoveryMode::IterPro),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Mode, String> {
        match s {
            "none" => Ok(Mode::None),
            "care" => Ok(Mode::Care),
            "iterpro" => Ok(Mode::IterPro),
            _ => Err(format!("unknown mode `{s}` (expected none, care or iterpro)")),
        }
    }
}

/// Which instructions plans may pick.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    All,
    /// Only instructions whose result feeds a memory address.
    AddrFeeding,
}

#[derive(Debug, Clone)]
pub struct CampaignConfig {
    pub runs: u64,
    pub seed: u64,
    pub mode: Mode,
    pub target: Target,
    /// Fill the `recovery_ms` column. Off by default so CSVs are
    /// reproducible byte for byte.
    pub timing: bool,
    pub jobs: Option<usize>,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            runs: DEFAULT_RUNS,
            seed: 0,
            mode: Mode::IterPro,
            target: Target::All,
            timing: false,
            jobs: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Vm(#[from] VmError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("the golden run did not complete: {0:?}")]
    Golden(Status),
    #[error("no injectable instruction executes")]
    NothingToInject,
    #[error("thread pool: {0}")]
    Pool(String),
}

type Site = (FuncId, InstId);

/// A program ready for injection: transformed for its mode, with its golden
/// run, profile and recovery artifacts.
pub struct Prepared {
    pub name: String,
    pub mode: Mode,
    pub program: Program,
    pub input: Input,
    pub golden: RunResult,
    pub profile: Vec<Vec<u64>>,
    pub artifacts: Option<Artifacts>,
    pub budget: u64,
    /// Addresses each access touched in the golden run, in order.
    golden_addresses: HashMap<Site, Vec<u64>>,
    /// Header induction phis and their increments.
    pub iv_sites: HashSet<Site>,
    pub addr_sites: HashSet<Site>,
}

#[derive(Default)]
struct AddressLog(HashMap<Site, Vec<u64>>);

impl Observer for AddressLog {
    fn on_access(&mut self, state: &MachineState, _: &Program, inst: InstId, addr: u64) {
        self.0.entry((state.frame().func, inst)).or_default().push(addr);
    }
}

impl Prepared {
    pub fn from_kernel(k: &Kernel, mode: Mode) -> Result<Prepared, CampaignError> {
        let mut passes = k.classic_passes();
        passes.extend(mode.extra_passes());
        Prepared::new(k.name, &k.module()?, &k.input(), mode, &passes)
    }

    pub fn new(name: &str, m: &Module, input: &Input, mode: Mode, passes: &[Pass]) -> Result<Prepared, CampaignError> {
        let (module, _) = run_pipeline(m, passes)?;
        let artifacts = match mode {
            Mode::None => None,
            _ => Some(build_kernels(&module).artifacts(&module)?),
        };
        let program = Program::new(module)?;
        let (golden, profile) = profile(&program, input)?;
        if golden.status != Status::Completed {
            return Err(CampaignError::Golden(golden.status));
        }
        let mut log = AddressLog::default();
        run(&program, input, RunConfig { observer: Some(&mut log), ..Default::default() })?;
        let mut iv_sites = HashSet::new();
        let mut addr_sites = HashSet::new();
        for (fi, f) in program.module.functions.iter().enumerate() {
            let func = FuncId(fi as u32);
            for l in find_loops(f) {
                for iv in header_ivs(&l, f) {
                    let phi = f.def_inst(iv.value).unwrap();
                    iv_sites.insert((func, phi.id));
                    if let Some(next) = phi_init_next(phi, &l).and_then(|(_, n)| n.as_value()) {
                        if let Some(d) = f.def_inst(next) {
                            iv_sites.insert((func, d.id));
                        }
                    }
                }
            }
            for inst in f.insts() {
                let feeds = matches!(inst.op, Op::Addr { .. })
                    || inst.result.is_some_and(|r| is_used_in_addr_compute(r, f));
                if feeds {
                    addr_sites.insert((func, inst.id));
                }
            }
        }
        Ok(Prepared {
            name: name.to_string(),
            mode,
            budget: golden.dyn_count.saturating_mul(10).max(1000),
            program,
            input: input.clone(),
            golden,
            profile,
            artifacts,
            golden_addresses: log.0,
            iv_sites,
            addr_sites,
        })
    }

    /// `runs` plans drawn serially from `seed`.
    pub fn plans(&self, cfg: &CampaignConfig) -> Result<Vec<InjectionPlan>, CampaignError> {
        let mut sites = injection_sites(&self.program.module, &self.profile);
        if cfg.target == Target::AddrFeeding {
            sites.retain(|s| self.addr_sites.contains(&(s.0, s.1)));
        }
        let sampler = PlanSampler::new(sites).ok_or(CampaignError::NothingToInject)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok((0..cfg.runs).map(|id| sampler.sample(id, cfg.seed, &mut rng)).collect())
    }
}

#[derive(Default)]
struct Tracker {
    /// Per access: ordinal of the last execution seen and how many distinct
    /// executions there have been.
    seen: HashMap<Site, (u64, u64)>,
    /// (site, occurrence, patched address) for every resumed recovery.
    patches: Vec<(Site, u64, u64)>,
}

struct TrackObserver(Rc<RefCell<Tracker>>);

impl Observer for TrackObserver {
    fn on_access(&mut self, state: &MachineState, _: &Program, inst: InstId, _: u64) {
        let ordinal = state.dyn_count + 1;
        let mut t = self.0.borrow_mut();
        let e = t.seen.entry((state.frame().func, inst)).or_insert((0, 0));
        if e.0 != ordinal {
            *e = (ordinal, e.1 + 1);
        }
    }
}

struct TrackedHook {
    runtime: Runtime,
    tracker: Rc<RefCell<Tracker>>,
}

impl RecoveryHook for TrackedHook {
    fn on_invalid_access(&mut self, trap: &TrapRecord, state: &mut MachineState, prog: &Program) -> bool {
        let action = self.runtime.handle_trap(trap, state, prog);
        if let Some(address) = action.decision.address() {
            let mut t = self.tracker.borrow_mut();
            let site = (trap.func, trap.inst);
            let occurrence = t.seen.get(&site).map_or(0, |e| e.1);
            t.patches.push((site, occurrence, address));
        }
        action.decision.resumes()
    }
}

/// One injected run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub plan: InjectionPlan,
    pub outcome: Outcome,
    pub actions: Vec<RecoveryAction>,
    /// An SDC run in which some patched address differs from the address
    /// the same access used in the golden run.
    pub recovery_induced_sdc: bool,
    /// An SDC run with a patch at an execution the golden run never
    /// reached, so the patch cannot be compared.
    pub unattributed_sdc: bool,
    /// The flip hit a loop induction variable or its increment.
    pub iv_target: bool,
    pub recovery_time: Duration,
    pub prepare_time: Duration,
}

impl Prepared {
    pub fn run_plan(&self, plan: &InjectionPlan) -> Result<RunRecord, CampaignError> {
        let tracker = Rc::new(RefCell::new(Tracker::default()));
        let mut observer = TrackObserver(tracker.clone());
        let mut hook = self.artifacts.as_ref().zip(self.mode.recovery()).map(|(a, mode)| TrackedHook {
            runtime: Runtime::new(a.clone(), mode),
            tracker: tracker.clone(),
        });
        let result = run(
            &self.program,
            &self.input,
            RunConfig {
                budget: Some(self.budget),
                injection: Some(plan.injection()),
                hook: hook.as_mut().map(|h| h as &mut dyn RecoveryHook),
                observer: Some(&mut observer),
                ..Default::default()
            },
        )?;
        let outcome = classify(&result, &self.golden);
        let actions = hook.map(|h| h.runtime.log).unwrap_or_default();
        let golden_of = |site: &Site, occ: u64| {
            let g = self.golden_addresses.get(site)?;
            g.get((occ as usize).checked_sub(1)?).copied()
        };
        let sdc = outcome.class == OutcomeClass::Sdc;
        let patches = &tracker.borrow().patches;
        let recovery_induced_sdc = sdc
            && patches
                .iter()
                .any(|(site, occ, addr)| golden_of(site, *occ).is_some_and(|g| g != *addr));
        let unattributed_sdc = sdc
            && !recovery_induced_sdc
            && patches.iter().any(|(site, occ, _)| golden_of(site, *occ).is_none());
        Ok(RunRecord {
            plan: *plan,
            outcome,
            recovery_time: actions.iter().map(|a| a.elapsed).sum(),
            prepare_time: actions.iter().map(|a| a.prepare).sum(),
            actions,
            recovery_induced_sdc,
            unattributed_sdc,
            iv_target: self.iv_sites.contains(&(plan.func, plan.inst)),
        })
    }

    pub fn campaign(&self, cfg: &CampaignConfig) -> Result<Campaign, CampaignError> {
        let plans = self.plans(cfg)?;
        let exec = || -> Result<Vec<RunRecord>, CampaignError> {
            plans.par_iter().map(|p| self.run_plan(p)).collect()
        };
        let mut records = match cfg.jobs {
            Some(n) => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CampaignError::Pool(e.to_string()))?
                .install(exec)?,
            None => exec()?,
        };
        records.sort_by_key(|r| r.plan.id);
        Ok(Campaign {
            name: self.name.clone(),
            mode: self.mode,
            timing: cfg.timing,
            records,
        })
    }

    fn site_name(&self, func: FuncId, inst: InstId) -> String {
        format!("{}:{}", self.program.module.func(func).name, inst.0)
    }
}

pub const CSV_HEADER: &str = "plan_id,instr,occurrence,bit,class,trap,latency,bucket,recovered,recovery_ms";

pub struct Campaign {
    pub name: String,
    pub mode: Mode,
    pub timing: bool,
    /// Sorted by plan id.
    pub records: Vec<RunRecord>,
}

impl Campaign {
    pub fn csv(&self, prepared: &Prepared) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.records {
            let o = &r.outcome;
            let recovered = match self.mode {
                Mode::None => "",
                _ if o.recovered => "true",
                _ => "false",
            };
            let ms = if self.timing && !r.actions.is_empty() {
                format!("{:.3}", r.recovery_time.as_secs_f64() * 1e3)
            } else {
                String::new()
            };
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.plan.id,
                prepared.site_name(r.plan.func, r.plan.inst),
                r.plan.occurrence,
                r.plan.bit,
                o.class,
                o.trap.map_or("", |t| t.as_str()),
                o.latency.map_or(String::new(), |l| l.to_string()),
                o.bucket().map_or("", |b| BUCKETS[b]),
                recovered,
                ms
            )
            .unwrap();
        }
        out
    }

    /// Recovery log lines of every run, in plan order.
    pub fn log_lines(&self) -> Vec<String> {
        self.records
            .iter()
            .flat_map(|r| r.actions.iter().map(|a| a.log_line(r.plan.id)))
            .collect()
    }

    pub fn report(&self) -> CampaignReport {
        let mut rep = CampaignReport {
            name: self.name.clone(),
            mode: Some(self.mode),
            runs: self.records.len() as u64,
            timing: self.timing,
            ..Default::default()
        };
        for r in &self.records {
            let o = &r.outcome;
            *rep.classes.entry(o.class).or_default() += 1;
            if let Some(t) = o.trap {
                *rep.first_traps.entry(t).or_default() += 1;
            }
            if o.class == OutcomeClass::Crash {
                let kind = o.trap.expect("crashed runs trapped");
                *rep.crash_traps.entry(kind).or_default() += 1;
            }
            if let Some(b) = o.bucket() {
                rep.buckets[b] += 1;
            }
            let invalid = o.trap == Some(TrapKind::InvalidAccess);
            if invalid {
                rep.invalid_access += 1;
                rep.recovered += o.recovered as u64;
                if let Some(b) = o.bucket() {
                    rep.invalid_access_buckets[b] += 1;
                }
            }
            rep.recovery_induced_sdc += r.recovery_induced_sdc as u64;
            rep.unattributed_sdc += r.unattributed_sdc as u64;
            if r.iv_target {
                rep.iv_injections += 1;
                rep.iv_invalid_access += invalid as u64;
                rep.iv_recovered += (invalid && o.recovered) as u64;
            }
            if !r.actions.is_empty() {
                rep.recovery_times.push(r.recovery_time);
                rep.prepare_time += r.prepare_time;
            }
        }
        rep.recovery_times.sort();
        rep
    }
}

#[derive(Debug, Clone, Default)]
pub struct CampaignReport {
    pub name: String,
    pub mode: Option<Mode>,
    pub runs: u64,
    pub classes: BTreeMap<OutcomeClass, u64>,
    /// Kind of the first trap of every run that trapped at all.
    pub first_traps: BTreeMap<TrapKind, u64>,
    /// Kind of the first trap of runs that ended in a crash.
    pub crash_traps: BTreeMap<TrapKind, u64>,
    /// Latency buckets of every first trap.
    pub buckets: [u64; 4],
    pub invalid_access_buckets: [u64; 4],
    pub invalid_access: u64,
    pub recovered: u64,
    pub recovery_induced_sdc: u64,
    pub unattributed_sdc: u64,
    pub iv_injections: u64,
    pub iv_invalid_access: u64,
    pub iv_recovered: u64,
    pub timing: bool,
    /// Total handler time of every run that entered the runtime, sorted.
    pub recovery_times: Vec<Duration>,
    /// Share of the handler time spent loading artifacts.
    pub prepare_time: Duration,
}

impl CampaignReport {
    pub fn count(&self, c: OutcomeClass) -> u64 {
        self.classes.get(&c).copied().unwrap_or(0)
    }

    fn recovering(&self) -> bool {
        self.mode.is_some_and(|m| m != Mode::None)
    }

    /// Recovered runs over runs whose first trap was an invalid access;
    /// `None` without recovery.
    pub fn recovery_rate(&self) -> Option<f64> {
        self.recovering().then(|| ratio(self.recovered, self.invalid_access))
    }

    pub fn iv_recovery_rate(&self) -> Option<f64> {
        self.recovering().then(|| ratio(self.iv_recovered, self.iv_invalid_access))
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let mode = self.mode.map_or("-", |m| m.as_str());
        writeln!(s, "kernel {}  mode {}  runs {}", self.name, mode, self.runs).unwrap();
        for c in OutcomeClass::ALL {
            let n = self.count(c);
            writeln!(s, "  {:<8}{:>7}  {:>6.2}%", c.as_str(), n, pct(n, self.runs)).unwrap();
        }
        writeln!(s, "first traps").unwrap();
        for (k, n) in &self.first_traps {
            writeln!(s, "  {:<14}{:>7}", k.as_str(), n).unwrap();
        }
        writeln!(s, "crash latency").unwrap();
        for (b, n) in BUCKETS.iter().zip(self.buckets) {
            writeln!(s, "  {b:<8}{n:>7}").unwrap();
        }
        if let Some(rate) = self.recovery_rate() {
            writeln!(
                s,
                "recovered {}/{} invalid accesses ({:.2}%), recovery-induced SDC {}, unattributed {}",
                self.recovered,
                self.invalid_access,
                rate * 100.0,
                self.recovery_induced_sdc,
                self.unattributed_sdc
            )
            .unwrap();
            writeln!(
                s,
                "IV injections {}: recovered {}/{} invalid accesses",
                self.iv_injections, self.iv_recovered, self.iv_invalid_access
            )
            .unwrap();
        }
        if self.timing && !self.recovery_times.is_empty() {
            let t = &self.recovery_times;
            let ms = |d: Duration| d.as_secs_f64() * 1e3;
            let total: Duration = t.iter().sum();
            writeln!(
                s,
                "recovery time ms: min {:.3} median {:.3} p95 {:.3} max {:.3}; {:.1}% loading artifacts",
                ms(t[0]),
                ms(t[t.len() / 2]),
                ms(t[(t.len() * 95 / 100).min(t.len() - 1)]),
                ms(t[t.len() - 1]),
                100.0 * self.prepare_time.as_secs_f64() / total.as_secs_f64().max(f64::MIN_POSITIVE)
            )
            .unwrap();
        }
        s
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn pct(a: u64, b: u64) -> f64 {
    ratio(a, b) * 100.0
}

/// Recoverable induction variables in the unoptimized module and after the
/// full iterpro pipeline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IvStats {
    pub name: String,
    pub loops: usize,
    pub before: usize,
    pub after: usize,
}

impl IvStats {
    pub fn ratio(&self) -> String {
        match (self.before, self.after) {
            (0, 0) => "-".into(),
            (0, _) => "new".into(),
            (b, a) => format!("{:.2}", a as f64 / b as f64),
        }
    }
}

pub fn iv_stats(name: &str, raw: &Module, classic: &[Pass]) -> Result<IvStats, CampaignError> {
    use crate::recovery::count_recoverable_ivs;
    let mut passes = classic.to_vec();
    passes.extend(Mode::IterPro.extra_passes());
    let (after_m, _) = run_pipeline(raw, &passes)?;
    let (loops, before) = count_recoverable_ivs(raw);
    let (_, after) = count_recoverable_ivs(&after_m);
    Ok(IvStats {
        name: name.to_string(),
        loops,
        before,
        after,
    })
}

pub fn render_iv_stats(rows: &[IvStats]) -> String {
    let mut s = format!("{:<16}{:>6}{:>8}{:>7}{:>7}\n", "kernel", "loops", "before", "after", "ratio");
    for r in rows {
        writeln!(s, "{:<16}{:>6}{:>8}{:>7}{:>7}", r.name, r.loops, r.before, r.after, r.ratio()).unwrap();
    }
    s
}
