use super::memory::{global_address, Access, STACK_BASE, STACK_STRIDE};
use super::{
    Callee, CmpMode, Frame, InjectRecord, Injection, Input, MachineState, Memory, Observer,
    Output, Program, RecoveryHook, RunResult, Status, TraceEvent, TrapKind, TrapRecord, VmError,
};
use crate::mir::{BinOp, BlockId, CmpPred, FuncId, InstId, Op, Operand};

/// Budget used when none is given.
pub const DEFAULT_BUDGET: u64 = 50_000_000;

/// Traps at one dynamic site after which the VM stops resuming, whatever
/// the hook says.
const MAX_TRAPS_PER_SITE: u32 = 16;

#[derive(Default)]
pub struct RunConfig<'a> {
    /// Maximum completed instructions before the run counts as a hang.
    pub budget: Option<u64>,
    pub trace: bool,
    pub profile: bool,
    pub injection: Option<Injection>,
    pub hook: Option<&'a mut dyn RecoveryHook>,
    pub observer: Option<&'a mut dyn Observer>,
}

/// Runs `main` of `prog` on `input`.
pub fn run(prog: &Program, input: &Input, cfg: RunConfig<'_>) -> Result<RunResult, VmError> {
    let main = prog
        .main()
        .ok_or_else(|| VmError::NoFunction("main".into()))?;
    let m = &prog.module;
    let f = m.func(main);
    for name in input.bindings.keys() {
        let is_param = f.params.iter().any(|p| f.value_name(*p) == name);
        if !is_param && m.global_id(name).is_none() {
            return Err(VmError::UnknownBinding(name.clone()));
        }
    }
    let mut memory = Memory::default();
    for (i, g) in m.globals.iter().enumerate() {
        let mut cells = vec![0u64; g.count as usize];
        if let Some(vals) = input.get(&g.name) {
            if vals.len() as u64 > g.count {
                return Err(VmError::TooManyValues {
                    name: g.name.clone(),
                    given: vals.len(),
                    count: g.count,
                });
            }
            for (c, v) in cells.iter_mut().zip(vals) {
                *c = v.payload(g.kind);
            }
        }
        memory.map(global_address(i), g.kind, cells);
    }
    let mut args = Vec::new();
    for p in &f.params {
        let name = f.value_name(*p);
        let v = input
            .get(name)
            .and_then(|v| v.first())
            .ok_or_else(|| VmError::MissingParam(name.to_string()))?;
        args.push(v.payload(f.value(*p).kind));
    }
    let state = MachineState {
        memory,
        frames: vec![new_frame(prog, main, &args)],
        dyn_count: 0,
        next_slot: 0,
    };
    Ok(Machine::new(prog, state, cfg).run())
}

/// Completed execution counts of every instruction in a fault-free run.
pub fn profile(prog: &Program, input: &Input) -> Result<(RunResult, Vec<Vec<u64>>), VmError> {
    let r = run(
        prog,
        input,
        RunConfig {
            profile: true,
            ..Default::default()
        },
    )?;
    let p = r.profile.clone().unwrap();
    Ok((r, p))
}

/// Calls a side-effect-free function directly with argument payloads.
/// Returns the result (or the trap) and the number of instructions
/// executed.
pub fn call_function(
    prog: &Program,
    func: FuncId,
    args: &[u64],
    budget: u64,
) -> Result<(Result<Option<u64>, TrapRecord>, u64), VmError> {
    let f = prog.module.func(func);
    if f.params.len() != args.len() {
        return Err(VmError::Arity {
            expected: f.params.len(),
            given: args.len(),
        });
    }
    let state = MachineState {
        memory: Memory::default(),
        frames: vec![new_frame(prog, func, args)],
        dyn_count: 0,
        next_slot: 0,
    };
    let r = Machine::new(
        prog,
        state,
        RunConfig {
            budget: Some(budget),
            ..Default::default()
        },
    )
    .run();
    let out = match r.status {
        Status::Completed => Ok(r.output.ret),
        Status::Trapped(t) => Err(t),
        Status::HangBudgetExceeded => Err(TrapRecord {
            kind: TrapKind::ArithFault,
            func,
            inst: InstId(0),
            address: None,
            dyn_count: r.dyn_count,
        }),
    };
    Ok((out, r.dyn_count))
}

fn new_frame(prog: &Program, func: FuncId, args: &[u64]) -> Frame {
    let f = prog.module.func(func);
    let mut values = vec![0u64; f.values.len()];
    for (p, a) in f.params.iter().zip(args) {
        values[p.index()] = *a;
    }
    Frame {
        func,
        values,
        pc: 0,
        prev_block: None,
        phi_temp: Vec::new(),
        slots: Vec::new(),
    }
}

enum Flow {
    Next(Option<u64>),
    Stored(u64),
    Jump(BlockId),
    Trap(TrapKind, Option<u64>),
    Return(Option<u64>),
    Call(FuncId, Vec<u64>),
}

struct Machine<'p, 'c> {
    prog: &'p Program,
    state: MachineState,
    cfg: RunConfig<'c>,
    traps: Vec<TrapRecord>,
    trace: Vec<TraceEvent>,
    profile: Option<Vec<Vec<u64>>>,
    inj_seen: u64,
    injected: Option<InjectRecord>,
}

fn operand(frame: &Frame, o: &Operand) -> u64 {
    match o {
        Operand::Value(v) => frame.values[v.index()],
        Operand::Int(i) => *i as u64,
        Operand::Float(bits) => *bits,
        Operand::Global(g) => global_address(g.0 as usize),
    }
}

fn compare(mode: CmpMode, pred: CmpPred, a: u64, b: u64) -> bool {
    use std::cmp::Ordering;
    let ord = match mode {
        CmpMode::Signed => Some((a as i64).cmp(&(b as i64))),
        CmpMode::Unsigned => Some(a.cmp(&b)),
        CmpMode::Float => f64::from_bits(a).partial_cmp(&f64::from_bits(b)),
    };
    match (pred, ord) {
        (CmpPred::Ne, None) => true,
        (_, None) => false,
        (CmpPred::Eq, Some(o)) => o == Ordering::Equal,
        (CmpPred::Ne, Some(o)) => o != Ordering::Equal,
        (CmpPred::Lt, Some(o)) => o == Ordering::Less,
        (CmpPred::Le, Some(o)) => o != Ordering::Greater,
        (CmpPred::Gt, Some(o)) => o == Ordering::Greater,
        (CmpPred::Ge, Some(o)) => o != Ordering::Less,
    }
}

impl<'p, 'c> Machine<'p, 'c> {
    fn new(prog: &'p Program, state: MachineState, cfg: RunConfig<'c>) -> Self {
        let profile = cfg.profile.then(|| {
            prog.funcs
                .iter()
                .map(|c| vec![0u64; c.insts.len()])
                .collect()
        });
        Machine {
            prog,
            state,
            cfg,
            traps: Vec::new(),
            trace: Vec::new(),
            profile,
            inj_seen: 0,
            injected: None,
        }
    }

    fn run(mut self) -> RunResult {
        let budget = self.cfg.budget.unwrap_or(DEFAULT_BUDGET);
        let mut site_traps = (u64::MAX, 0u32);
        let status = loop {
            if self.state.dyn_count >= budget {
                break Status::HangBudgetExceeded;
            }
            let frame = self.state.frame();
            let func = frame.func;
            let pc = frame.pc;
            let code = self.prog.code(func);
            let inst = &code.insts[pc];
            match self.execute(func, pc) {
                Flow::Next(result) => {
                    if let Some(r) = inst.result {
                        self.state.frame_mut().values[r.index()] = result.unwrap();
                    }
                    self.complete(func, pc, result, None);
                    self.state.frame_mut().pc += 1;
                }
                Flow::Stored(addr) => {
                    self.complete(func, pc, None, Some(addr));
                    self.state.frame_mut().pc += 1;
                }
                Flow::Jump(target) => {
                    self.complete(func, pc, None, None);
                    let from = code.block_of[pc];
                    let frame = self.state.frame_mut();
                    frame.phi_temp.clear();
                    if let Some(srcs) = code.phi_sources.get(&(from, target)) {
                        for o in srcs {
                            let v = operand(frame, o);
                            frame.phi_temp.push(v);
                        }
                    }
                    frame.prev_block = Some(from);
                    frame.pc = code.block_start[target.index()];
                }
                Flow::Call(callee, args) => {
                    let f = new_frame(self.prog, callee, &args);
                    self.state.frames.push(f);
                }
                Flow::Return(v) => {
                    self.complete(func, pc, None, None);
                    let frame = self.state.frames.pop().unwrap();
                    for s in frame.slots {
                        self.state.memory.unmap(s);
                    }
                    if self.state.frames.is_empty() {
                        let output = self.output(v);
                        return self.finish(Status::Completed, output);
                    }
                    let caller = self.state.frame();
                    let (cf, cpc) = (caller.func, caller.pc);
                    let call = &self.prog.code(cf).insts[cpc];
                    if let Some(r) = call.result {
                        self.state.frame_mut().values[r.index()] = v.unwrap_or(0);
                    }
                    self.complete(cf, cpc, v, None);
                    self.state.frame_mut().pc += 1;
                }
                Flow::Trap(kind, address) => {
                    let trap = TrapRecord {
                        kind,
                        func,
                        inst: InstId(pc as u32),
                        address,
                        dyn_count: self.state.dyn_count + 1,
                    };
                    self.traps.push(trap);
                    if self.cfg.trace {
                        self.trace.push(TraceEvent::Trap(trap));
                    }
                    if site_traps.0 == trap.dyn_count {
                        site_traps.1 += 1;
                    } else {
                        site_traps = (trap.dyn_count, 1);
                    }
                    let resumed = kind == TrapKind::InvalidAccess
                        && site_traps.1 <= MAX_TRAPS_PER_SITE
                        && match self.cfg.hook.as_mut() {
                            Some(h) => h.on_invalid_access(&trap, &mut self.state, self.prog),
                            None => false,
                        };
                    if self.cfg.trace && self.cfg.hook.is_some() && kind == TrapKind::InvalidAccess {
                        self.trace.push(TraceEvent::Recovery {
                            dyn_count: trap.dyn_count,
                            resumed,
                        });
                    }
                    if !resumed {
                        break Status::Trapped(trap);
                    }
                }
            }
        };
        let output = self.output(None);
        self.finish(status, output)
    }

    fn output(&self, ret: Option<u64>) -> Output {
        let globals = (0..self.prog.module.globals.len())
            .map(|i| {
                self.state
                    .memory
                    .region(global_address(i))
                    .map(|r| r.cells.clone())
                    .unwrap_or_default()
            })
            .collect();
        Output { ret, globals }
    }

    fn finish(self, status: Status, output: Output) -> RunResult {
        RunResult {
            status,
            output,
            dyn_count: self.state.dyn_count,
            traps: self.traps,
            injected: self.injected,
            trace: self.trace,
            profile: self.profile,
        }
    }

    /// Bookkeeping for a completed instruction: counters, trace, and the
    /// pending injection.
    fn complete(&mut self, func: FuncId, pc: usize, result: Option<u64>, stored: Option<u64>) {
        self.state.dyn_count += 1;
        if let Some(p) = self.profile.as_mut() {
            p[func.0 as usize][pc] += 1;
        }
        if self.cfg.trace {
            self.trace.push(TraceEvent::Exec {
                dyn_count: self.state.dyn_count,
                func,
                inst: InstId(pc as u32),
                result,
            });
        }
        let Some(inj) = self.cfg.injection else {
            return;
        };
        if self.injected.is_some() || inj.func != func || inj.inst.index() != pc {
            return;
        }
        self.inj_seen += 1;
        if self.inj_seen != inj.occurrence {
            return;
        }
        let mask = 1u64 << (inj.bit & 63);
        let rec = if let Some(addr) = stored {
            let old = self.state.memory.read(addr).unwrap();
            self.state.memory.write(addr, old ^ mask).unwrap();
            Some((old, old ^ mask))
        } else {
            let r = self.prog.code(func).insts[pc].result;
            r.map(|r| {
                // The frame that executed the instruction is on top again
                // by the time a call completes.
                let slot = &mut self.state.frame_mut().values[r.index()];
                let old = *slot;
                *slot ^= mask;
                (old, *slot)
            })
        };
        if let Some((old, new)) = rec {
            let rec = InjectRecord {
                dyn_count: self.state.dyn_count,
                old,
                new,
            };
            self.injected = Some(rec);
            if self.cfg.trace {
                self.trace.push(TraceEvent::Inject(rec));
            }
        }
    }

    fn execute(&mut self, func: FuncId, pc: usize) -> Flow {
        let code = self.prog.code(func);
        let inst = &code.insts[pc];
        let frame = self.state.frame();
        let get = |o: &Operand| operand(frame, o);
        match &inst.op {
            Op::Const(c) => Flow::Next(Some(get(c))),
            Op::Bin { op, lhs, rhs } => {
                let (a, b) = (get(lhs), get(rhs));
                if code.float_arith[pc] {
                    let (x, y) = (f64::from_bits(a), f64::from_bits(b));
                    let r = match op {
                        BinOp::Add => x + y,
                        BinOp::Sub => x - y,
                        BinOp::Mul => x * y,
                        BinOp::Div => {
                            if y == 0.0 {
                                return Flow::Trap(TrapKind::ArithFault, None);
                            }
                            x / y
                        }
                        BinOp::Shl => unreachable!("validated"),
                    };
                    Flow::Next(Some(r.to_bits()))
                } else {
                    let (x, y) = (a as i64, b as i64);
                    let r = match op {
                        BinOp::Add => x.wrapping_add(y),
                        BinOp::Sub => x.wrapping_sub(y),
                        BinOp::Mul => x.wrapping_mul(y),
                        BinOp::Div => {
                            if y == 0 {
                                return Flow::Trap(TrapKind::ArithFault, None);
                            }
                            x.wrapping_div(y)
                        }
                        BinOp::Shl => x.wrapping_shl(y as u32),
                    };
                    Flow::Next(Some(r as u64))
                }
            }
            Op::Icmp { pred, lhs, rhs } => Flow::Next(Some(compare(
                code.cmp_mode[pc],
                *pred,
                get(lhs),
                get(rhs),
            ) as u64)),
            Op::Phi { .. } => {
                let k = pc - code.block_start[code.block_of[pc].index()];
                Flow::Next(Some(frame.phi_temp[k]))
            }
            Op::Addr {
                base,
                index,
                scale,
                offset,
            } => Flow::Next(Some(
                get(base)
                    .wrapping_add(get(index).wrapping_mul(*scale as u64))
                    .wrapping_add(*offset as u64),
            )),
            Op::Load { addr } => {
                let a = get(addr);
                self.observe(pc, a);
                match self.state.memory.read(a) {
                    Ok(v) => Flow::Next(Some(v)),
                    Err(Access::Misaligned) => Flow::Trap(TrapKind::Misaligned, Some(a)),
                    Err(_) => Flow::Trap(TrapKind::InvalidAccess, Some(a)),
                }
            }
            Op::Store { addr, value } => {
                let (a, v) = (get(addr), get(value));
                self.observe(pc, a);
                match self.state.memory.write(a, v) {
                    Ok(()) => Flow::Stored(a),
                    Err(Access::Misaligned) => Flow::Trap(TrapKind::Misaligned, Some(a)),
                    Err(_) => Flow::Trap(TrapKind::InvalidAccess, Some(a)),
                }
            }
            Op::Alloc => {
                let base = STACK_BASE + self.state.next_slot * STACK_STRIDE;
                self.state.next_slot += 1;
                self.state.memory.map(base, code.alloc_kind[pc], vec![0]);
                self.state.frame_mut().slots.push(base);
                Flow::Next(Some(base))
            }
            Op::Call { args, .. } => {
                let vals: Vec<u64> = args.iter().map(get).collect();
                match code.callee[pc].unwrap() {
                    Callee::Sqrt => Flow::Next(Some(f64::from_bits(vals[0]).sqrt().to_bits())),
                    Callee::Fabs => Flow::Next(Some(f64::from_bits(vals[0]).abs().to_bits())),
                    Callee::User(f) => Flow::Call(f, vals),
                }
            }
            Op::Br { target } => Flow::Jump(*target),
            Op::CondBr {
                cond,
                then_block,
                else_block,
            } => Flow::Jump(if get(cond) != 0 {
                *then_block
            } else {
                *else_block
            }),
            Op::Ret { value } => Flow::Return(value.as_ref().map(get)),
        }
    }

    fn observe(&mut self, pc: usize, addr: u64) {
        if let Some(o) = self.cfg.observer.as_mut() {
            o.on_access(&self.state, self.prog, InstId(pc as u32), addr);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mir::parse_module;
    use crate::vm::Scalar;

    const DOT: &str = "global x[16] : f64
global y[16] : f64
fn main(%n: i64) -> f64 {
entry:
  %g = icmp lt 0, %n
  condbr %g, loop, exit
loop:
  %i = phi i64 [0, entry], [%i.next, loop]
  %acc = phi f64 [0.0, entry], [%acc.next, loop]
  %px = addr @x, %i, 8, 0
  %vx = load f64 %px
  %py = addr @y, %i, 8, 0
  %vy = load f64 %py
  %prod = mul %vx, %vy
  %acc.next = add %acc, %prod
  %i.next = add %i, 1
  %c = icmp lt %i.next, %n
  condbr %c, loop, exit
exit:
  %r = phi f64 [0.0, entry], [%acc.next, loop]
  ret %r
}";

    fn dot_input(n: usize) -> (Input, f64) {
        let xs: Vec<f64> = (0..n).map(|k| k as f64 * 0.5 + 1.0).collect();
        let ys: Vec<f64> = (0..n).map(|k| 3.0 - k as f64).collect();
        let mut expect = 0.0;
        for k in 0..n {
            expect += xs[k] * ys[k];
        }
        let mut input = Input::default();
        input.set_int("n", n as i64);
        input.set_array("x", xs.into_iter().map(Scalar::Float).collect());
        input.set_array("y", ys.into_iter().map(Scalar::Float).collect());
        (input, expect)
    }

    fn program(src: &str) -> Program {
        Program::new(parse_module(src).unwrap()).unwrap()
    }

    #[test]
    fn dot_product_matches_reference() {
        let prog = program(DOT);
        let (input, expect) = dot_input(8);
        let r = run(&prog, &input, RunConfig::default()).unwrap();
        assert_eq!(r.status, Status::Completed);
        assert_eq!(r.output.ret, Some(expect.to_bits()));
        assert!(r.traps.is_empty());
    }

    #[test]
    fn profile_counts_follow_trip_count() {
        let prog = program(DOT);
        let (input, _) = dot_input(10);
        let (r, p) = profile(&prog, &input).unwrap();
        let counts = &p[0];
        assert_eq!(counts.iter().sum::<u64>(), r.dyn_count);
        assert_eq!(&counts[0..2], &[1, 1]);
        assert!(counts[2..13].iter().all(|c| *c == 10));
        assert_eq!(&counts[13..], &[1, 1]);
    }

    #[test]
    fn store_outside_regions_traps() {
        let prog = program(
            "global a[2] : i64\nfn main { e:\n %p = addr @a, 5, 8, 0\n store %p, 1\n ret\n}",
        );
        let r = run(&prog, &Input::default(), RunConfig::default()).unwrap();
        let Status::Trapped(t) = r.status else { panic!() };
        assert_eq!(t.kind, TrapKind::InvalidAccess);
        assert_eq!(t.inst, InstId(1));
        assert_eq!(t.address, Some(global_address(0) + 40));
        assert_eq!(t.dyn_count, 2);
    }

    #[test]
    fn addr_flip_faults_at_xored_address() {
        let prog = program(DOT);
        let (input, _) = dot_input(8);
        let inj = Injection {
            func: FuncId(0),
            inst: InstId(4),
            occurrence: 3,
            bit: 40,
        };
        let r = run(
            &prog,
            &input,
            RunConfig {
                injection: Some(inj),
                trace: true,
                ..Default::default()
            },
        )
        .unwrap();
        let Status::Trapped(t) = r.status else { panic!("{:?}", r.status) };
        let golden = global_address(0) + 2 * 8;
        assert_eq!(t.kind, TrapKind::InvalidAccess);
        assert_eq!(t.address, Some(golden ^ (1 << 40)));
        let rec = r.injected.unwrap();
        assert_eq!(rec.old, golden);
        assert_eq!(t.dyn_count - rec.dyn_count, 1);
        let injects = r
            .trace
            .iter()
            .filter(|e| matches!(e, TraceEvent::Inject(_)))
            .count();
        assert_eq!(injects, 1);
    }

    #[test]
    fn phis_read_in_parallel() {
        let prog = program(
            "fn main(%n: i64) -> i64 {
entry:
  br loop
loop:
  %a = phi i64 [1, entry], [%b, loop]
  %b = phi i64 [2, entry], [%a, loop]
  %i = phi i64 [0, entry], [%i.next, loop]
  %i.next = add %i, 1
  %c = icmp lt %i.next, %n
  condbr %c, loop, exit
exit:
  %d = mul %a, 10
  %r = add %d, %b
  ret %r
}",
        );
        let mut input = Input::default();
        input.set_int("n", 3);
        let r = run(&prog, &input, RunConfig::default()).unwrap();
        assert_eq!(r.output.ret, Some(12));
    }

    #[test]
    fn budget_and_div_by_zero() {
        let prog = program(
            "fn main(%n: i64) -> i64 {
entry:
  %q = div 10, %n
  br loop
loop:
  br loop
}",
        );
        let mut input = Input::default();
        input.set_int("n", 0);
        let r = run(&prog, &input, RunConfig::default()).unwrap();
        assert!(matches!(r.status, Status::Trapped(t) if t.kind == TrapKind::ArithFault));
        input.set_int("n", 2);
        let r = run(
            &prog,
            &input,
            RunConfig {
                budget: Some(100),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.status, Status::HangBudgetExceeded);
        assert_eq!(r.dyn_count, 100);
    }

    #[test]
    fn pure_calls_and_slots() {
        let prog = program(
            "pure fn twice(%a: i64) -> i64 {
e:
  %b = add %a, %a
  ret %b
}
fn main() -> i64 {
e:
  %s = alloc i64
  store %s, 21
  %v = load i64 %s
  %w = call i64 twice(%v)
  ret %w
}",
        );
        let r = run(&prog, &Input::default(), RunConfig::default()).unwrap();
        assert_eq!(r.output.ret, Some(42));
        let f = prog.module.function_id("twice").unwrap();
        let (out, n) = call_function(&prog, f, &[5], 100).unwrap();
        assert_eq!(out, Ok(Some(10)));
        assert_eq!(n, 2);
    }
}
