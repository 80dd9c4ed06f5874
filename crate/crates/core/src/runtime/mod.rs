//! The trap handler: finds the recovery kernel of a faulting access,
//! replays it against the surviving machine state, repairs induction
//! variables from their partners when replay alone cannot help, and patches
//! the state so the access can be retried.

mod load;

use std::collections::HashMap;
use std::fmt;
use std::time::{Duration, Instant};

pub use load::{KernelEntry, LoadError, Loaded, ParamSource};

use crate::analysis::ScevExpr;
use crate::mir::{FuncId, InstId, Operand, ValueId};
use crate::recovery::{recover_iv, Artifacts};
use crate::vm::{
    snapshot_live_state, LiveState, MachineState, Program, RecoveryHook, TrapKind,
    TrapRecord,
};

/// Attempts allowed per dynamic access; the next trap there gives up.
pub const MAX_ATTEMPTS: u32 = 2;
pub const REPLAY_BUDGET: u64 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecoveryMode {
    /// Replay only.
    Care,
    /// Replay, then induction-variable repair.
    IterPro,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbortReason {
    NoKernel,
    MissingParam,
    Inconclusive,
    RetryExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Patched {
        address: u64,
    },
    IvRepaired {
        value: ValueId,
        old: u64,
        new: u64,
        address: u64,
    },
    Aborted(AbortReason),
}

impl Decision {
    pub fn resumes(&self) -> bool {
        !matches!(self, Decision::Aborted(_))
    }

    pub fn address(&self) -> Option<u64> {
        match self {
            Decision::Patched { address } | Decision::IvRepaired { address, .. } => Some(*address),
            Decision::Aborted(_) => None,
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decision::Patched { .. } => f.write_str("Patched"),
            Decision::IvRepaired { .. } => f.write_str("IVRepaired"),
            Decision::Aborted(r) => write!(f, "Aborted({r:?})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecoveryAction {
    pub func: FuncId,
    pub inst: InstId,
    /// Dynamic ordinal of the faulting execution.
    pub site: u64,
    pub key: Option<String>,
    pub decision: Decision,
    /// Which attempt at this dynamic site this was.
    pub attempts: u32,
    pub elapsed: Duration,
    /// Part of `elapsed` spent loading the artifacts.
    pub prepare: Duration,
    pub params_read: u32,
}

impl RecoveryAction {
    /// One structured log line.
    pub fn log_line(&self, plan_id: u64) -> String {
        let repaired = match self.decision {
            Decision::IvRepaired { value, old, new, .. } => format!("%{}:{old}->{new}", value.0),
            _ => "-".to_string(),
        };
        format!(
            "plan_id={plan_id} key={} decision={} attempts={} elapsed_us={} params_read={} iv_repaired={repaired}",
            self.key.as_deref().unwrap_or("-"),
            self.decision,
            self.attempts,
            self.elapsed.as_micros(),
            self.params_read
        )
    }
}

/// Work the runtime has done; both stay zero until the first trap.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    /// Kernel instructions replayed.
    pub instructions: u64,
    /// Artifact loads and replay frames.
    pub allocations: u64,
}

/// A [`RecoveryHook`] backed by the artifacts of one application module.
pub struct Runtime {
    artifacts: Artifacts,
    mode: RecoveryMode,
    attempts: HashMap<(FuncId, InstId, u64), u32>,
    prepare: Duration,
    pub counters: Counters,
    pub log: Vec<RecoveryAction>,
}

impl Runtime {
    /// Registers the artifacts; nothing is parsed until a trap arrives.
    pub fn new(artifacts: Artifacts, mode: RecoveryMode) -> Runtime {
        Runtime {
            artifacts,
            mode,
            attempts: HashMap::new(),
            prepare: Duration::ZERO,
            counters: Counters::default(),
            log: Vec::new(),
        }
    }

    pub fn mode(&self) -> RecoveryMode {
        self.mode
    }

    /// Diagnoses `trap` and, unless it aborts, patches `state` so the
    /// faulting instruction can run again.
    pub fn handle_trap(&mut self, trap: &TrapRecord, state: &mut MachineState, prog: &Program) -> RecoveryAction {
        let start = Instant::now();
        let site = (trap.func, trap.inst, trap.dyn_count);
        let attempts = {
            let n = self.attempts.entry(site).or_insert(0);
            *n += 1;
            *n
        };
        let key = prog
            .module
            .func(trap.func)
            .inst(trap.inst)
            .debug
            .as_ref()
            .map(|d| d.key());
        let mut action = RecoveryAction {
            func: trap.func,
            inst: trap.inst,
            site: trap.dyn_count,
            key: key.clone(),
            decision: Decision::Aborted(AbortReason::RetryExhausted),
            attempts,
            elapsed: Duration::ZERO,
            prepare: Duration::ZERO,
            params_read: 0,
        };
        self.prepare = Duration::ZERO;
        if attempts <= MAX_ATTEMPTS {
            let (decision, reads) = self.diagnose(trap, key.as_deref(), state, prog);
            action.decision = decision;
            action.params_read = reads;
        }
        action.elapsed = start.elapsed();
        action.prepare = self.prepare;
        self.log.push(action.clone());
        action
    }
}

impl Runtime {
    fn diagnose(
        &mut self,
        trap: &TrapRecord,
        key: Option<&str>,
        state: &mut MachineState,
        prog: &Program,
    ) -> (Decision, u32) {
        let abort = |r| (Decision::Aborted(r), 0);
        let Some(key) = key else {
            return abort(AbortReason::NoKernel);
        };
        self.counters.allocations += 1;
        let t = Instant::now();
        let parsed = Loaded::parse(&self.artifacts, &prog.module);
        self.prepare = t.elapsed();
        let Ok(loaded) = parsed else {
            return abort(AbortReason::NoKernel);
        };
        let Some(entry) = loaded.kernels.get(key) else {
            return abort(AbortReason::NoKernel);
        };
        let fault = trap.address.unwrap_or(0);
        let f = prog.module.func(trap.func);
        let Some(Operand::Value(addr_value)) = f.inst(trap.inst).op.address_operand() else {
            return abort(AbortReason::NoKernel);
        };
        let counters = &mut self.counters;
        let mut replay = |args: &[u64]| -> Option<u64> {
            counters.allocations += 1;
            let (address, n) = loaded.replay(entry, args, REPLAY_BUDGET)?;
            counters.instructions += n;
            Some(address)
        };

        let ls = snapshot_live_state(prog, state, trap.func, trap.inst);
        let Ok(args) = entry.gather(&ls) else {
            return (Decision::Aborted(AbortReason::MissingParam), ls.reads());
        };
        let Some(address) = replay(&args) else {
            return (Decision::Aborted(AbortReason::Inconclusive), ls.reads());
        };
        if address != fault {
            let reads = ls.reads();
            state.set_value(addr_value, address);
            return (Decision::Patched { address }, reads);
        }
        if self.mode == RecoveryMode::Care {
            return (Decision::Aborted(AbortReason::Inconclusive), ls.reads());
        }
        for (pi, p) in entry.params.iter().enumerate() {
            for pair in loaded.pairs.iter().filter(|q| q.func == trap.func) {
                let Some(member) = pair.member(p.value) else {
                    continue;
                };
                let Some(new) = repaired_value(&member, &ls) else {
                    continue;
                };
                let old = args[pi];
                if new == old {
                    continue;
                }
                let mut repaired = args.clone();
                repaired[pi] = new;
                let Some(address) = replay(&repaired) else {
                    continue;
                };
                if address == fault {
                    continue;
                }
                let next = member.target_next.filter(|n| ls.is_readable(*n)).and_then(|n| {
                    let step = eval(member.s_target, &ls)?;
                    Some((n, (new as i64).wrapping_add(step) as u64))
                });
                let reads = ls.reads();
                state.set_value(p.value, new);
                if let Some((n, v)) = next {
                    state.set_value(n, v);
                }
                state.set_value(addr_value, address);
                let decision = Decision::IvRepaired {
                    value: p.value,
                    old,
                    new,
                    address,
                };
                return (decision, reads);
            }
        }
        (Decision::Aborted(AbortReason::Inconclusive), ls.reads())
    }
}

/// Evaluates an init or step expression from the live state, reading
/// checkpointed values from their slots.
fn eval(e: &ScevExpr, ls: &LiveState<'_>) -> Option<i64> {
    let f = ls.function();
    e.eval(
        &mut |v| {
            let r = match crate::recovery::is_checkpoint_reload(f, v) {
                Some(slot) => ls.read_slot(slot),
                None => ls.read(v),
            };
            r.ok().map(|x| x as i64)
        },
        &|g| ls.global_base(g) as i64,
    )
}

/// The value the pair's partner implies for the target.
fn repaired_value(m: &load::Member<'_>, ls: &LiveState<'_>) -> Option<u64> {
    let s_partner = eval(m.s_partner, ls)?;
    let partner = match ls.read(m.partner) {
        Ok(v) => v as i64,
        // The phi itself may be dead once its successor value is computed.
        Err(_) => (ls.read(m.partner_next?).ok()? as i64).wrapping_sub(s_partner),
    };
    let v = recover_iv(
        partner,
        eval(m.partner0, ls)?,
        s_partner,
        eval(m.target0, ls)?,
        eval(m.s_target, ls)?,
    )?;
    Some(v as u64)
}

impl RecoveryHook for Runtime {
    fn on_invalid_access(&mut self, trap: &TrapRecord, state: &mut MachineState, prog: &Program) -> bool {
        debug_assert_eq!(trap.kind, TrapKind::InvalidAccess);
        self.handle_trap(trap, state, prog).decision.resumes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::by_name;
    use crate::mir::{parse_module, Module};
    use crate::recovery::build_kernels;
    use crate::transforms::{run_pipeline, Pass};
    use crate::vm::{run, Injection, Input, RunConfig, RunResult, Status};

    fn transformed(name: &str, passes: &str) -> Module {
        let m = by_name(name).unwrap().module().unwrap();
        run_pipeline(&m, &Pass::parse_list(passes).unwrap()).unwrap().0
    }

    fn runtime_for(m: &Module, mode: RecoveryMode) -> Runtime {
        let art = build_kernels(m).artifacts(m).unwrap();
        Runtime::new(art, mode)
    }

    fn inject(m: &Module, value: &str, occurrence: u64, bit: u32) -> Injection {
        let f = &m.functions[0];
        let v = f.value_by_name(value).unwrap();
        Injection {
            func: FuncId(0),
            inst: f.def_inst(v).unwrap().id,
            occurrence,
            bit,
        }
    }

    fn run_with(m: &Module, input: &Input, rt: &mut Runtime, inj: Option<Injection>) -> RunResult {
        let prog = Program::new(m.clone()).unwrap();
        run(
            &prog,
            input,
            RunConfig {
                injection: inj,
                hook: Some(rt),
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn dormant_without_traps() {
        for name in ["gather2d", "pointer_walk", "saxpy_unrolled"] {
            let m = transformed(name, "icp,mck");
            let mut rt = runtime_for(&m, RecoveryMode::IterPro);
            let r = run_with(&m, &by_name(name).unwrap().input(), &mut rt, None);
            assert_eq!(r.status, Status::Completed);
            assert_eq!(rt.counters, Counters::default());
            assert!(rt.log.is_empty());
        }
    }

    #[test]
    fn corrupted_index_arithmetic_is_replayed() {
        let k = by_name("gather2d").unwrap();
        let m = k.module().unwrap();
        let golden = run_with(&m, &k.input(), &mut runtime_for(&m, RecoveryMode::Care), None);
        let mut rt = runtime_for(&m, RecoveryMode::Care);
        let r = run_with(&m, &k.input(), &mut rt, Some(inject(&m, "w", 2, 45)));
        assert_eq!(r.status, Status::Completed, "{:?}", rt.log);
        assert_eq!(r.output, golden.output);
        assert!(!rt.log.is_empty());
        assert!(rt.log.iter().all(|a| matches!(a.decision, Decision::Patched { .. })), "{:?}", rt.log);
        assert!(rt.counters.instructions > 0);
    }

    #[test]
    fn corrupted_counter_is_repaired_from_its_partner() {
        let k = by_name("saxpy_unrolled").unwrap();
        let m = transformed("saxpy_unrolled", "icp,mck");
        let golden = run_with(&m, &k.input(), &mut runtime_for(&m, RecoveryMode::IterPro), None);
        for (mode, recovered) in [(RecoveryMode::IterPro, true), (RecoveryMode::Care, false)] {
            let mut rt = runtime_for(&m, mode);
            let r = run_with(&m, &k.input(), &mut rt, Some(inject(&m, "i", 3, 40)));
            assert_eq!(r.status == Status::Completed, recovered, "{mode:?} {:?}", rt.log);
            if recovered {
                assert_eq!(r.output, golden.output);
                assert!(rt.log.iter().any(|a| matches!(a.decision, Decision::IvRepaired { .. })));
            } else {
                assert_eq!(rt.log[0].decision, Decision::Aborted(AbortReason::Inconclusive));
            }
        }
    }

    #[test]
    fn pointer_is_rebuilt_from_the_counter() {
        let k = by_name("pointer_walk").unwrap();
        let m = transformed("pointer_walk", "icp,mck");
        let golden = run_with(&m, &k.input(), &mut runtime_for(&m, RecoveryMode::IterPro), None);
        let mut rt = runtime_for(&m, RecoveryMode::IterPro);
        let r = run_with(&m, &k.input(), &mut rt, Some(inject(&m, "A.next", 2, 44)));
        assert_eq!(r.output, golden.output, "{:?}", rt.log);
        assert!(matches!(rt.log[0].decision, Decision::IvRepaired { .. }));
        let line = rt.log[0].log_line(7);
        assert!(line.starts_with("plan_id=7 key=pointer_walk.ir:"), "{line}");
        assert!(line.contains("decision=IVRepaired attempts=1"), "{line}");
    }

    #[test]
    fn one_fault_recovered_at_every_manifestation() {
        let k = by_name("saxpy_unrolled").unwrap();
        let m = k.module().unwrap();
        let golden = run_with(&m, &k.input(), &mut runtime_for(&m, RecoveryMode::Care), None);
        let mut rt = runtime_for(&m, RecoveryMode::Care);
        let r = run_with(&m, &k.input(), &mut rt, Some(inject(&m, "i1", 5, 41)));
        assert_eq!(r.output, golden.output);
        assert_eq!(rt.log.len(), 2, "{:?}", rt.log);
        assert!(rt.log.iter().all(|a| a.decision.resumes()));
    }

    #[test]
    fn unknown_access_has_no_kernel() {
        let k = by_name("saxpy").unwrap();
        let m = k.module().unwrap();
        let empty = Artifacts {
            table: crate::recovery::RecoveryTable::default().render(),
            kernels: String::new(),
            pairs: String::new(),
        };
        let mut rt = Runtime::new(empty, RecoveryMode::IterPro);
        let r = run_with(&m, &k.input(), &mut rt, Some(inject(&m, "px", 1, 40)));
        assert!(matches!(r.status, Status::Trapped(_)));
        assert_eq!(rt.log[0].decision, Decision::Aborted(AbortReason::NoKernel));
    }

    #[test]
    fn bad_patches_exhaust_the_retries() {
        let m = parse_module(
            "global g[4] : i64
fn main(%n: i64) -> i64 {
entry:
  %p = addr @g, %n, 8, 0
  %v = load i64 %p !dbg \"t.ir\":4:8
  ret %v
}",
        )
        .unwrap();
        // A kernel that always moves the address further away.
        let lib = "fn recovery_k1(%p: addr) -> addr {\nentry:\n  %q = add %p, 8000\n  ret %q\n}\n";
        let art = Artifacts {
            table: "reslab-recovery-table\t1\nt.ir:4:8\trecovery_k1\tp:addr\n".into(),
            kernels: lib.into(),
            pairs: String::new(),
        };
        let mut rt = Runtime::new(art, RecoveryMode::IterPro);
        let mut input = Input::default();
        input.set_int("n", 1);
        let r = run_with(&m, &input, &mut rt, Some(inject(&m, "p", 1, 42)));
        assert!(matches!(r.status, Status::Trapped(_)));
        let decisions: Vec<Decision> = rt.log.iter().map(|a| a.decision).collect();
        assert!(matches!(decisions[0], Decision::Patched { .. }));
        assert!(matches!(decisions[1], Decision::Patched { .. }));
        assert_eq!(decisions[2], Decision::Aborted(AbortReason::RetryExhausted));
        assert_eq!(rt.log.iter().map(|a| a.attempts).collect::<Vec<_>>(), [1, 2, 3]);
    }
}
