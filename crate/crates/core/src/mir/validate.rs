use std::collections::{HashMap, HashSet};
use std::fmt;

use super::{
    BinOp, BlockId, Function, InstId, Kind, Module, Op, Operand, ValueDef, ValueId, INTRINSICS,
};
use crate::analysis::cfg::Cfg;
use crate::analysis::dominators::DomTree;

/// A structural rule broken by a module.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub function: String,
    pub inst: Option<InstId>,
    pub reason: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.inst {
            Some(i) => write!(f, "{} {}: {}", self.function, i, self.reason),
            None => write!(f, "{}: {}", self.function, self.reason),
        }
    }
}

/// Checks every structural rule and returns all violations found.
pub fn validate(m: &Module) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut names = HashSet::new();
    for g in &m.globals {
        if !names.insert(format!("@{}", g.name)) {
            out.push(Violation {
                function: String::new(),
                inst: None,
                reason: format!("duplicate global @{}", g.name),
            });
        }
    }
    let mut fnames = HashSet::new();
    for f in &m.functions {
        if !fnames.insert(f.name.as_str()) {
            out.push(Violation {
                function: f.name.clone(),
                inst: None,
                reason: "duplicate function name".into(),
            });
        }
        if INTRINSICS.iter().any(|(n, _, _)| *n == f.name) {
            out.push(Violation {
                function: f.name.clone(),
                inst: None,
                reason: "function name shadows an intrinsic".into(),
            });
        }
    }
    let mut tags: HashMap<String, String> = HashMap::new();
    for f in &m.functions {
        FunctionCheck::new(m, f, &mut out).run();
        for inst in f.memory_accesses() {
            if let Some(d) = &inst.debug {
                if let Some(prev) = tags.insert(d.key(), f.name.clone()) {
                    out.push(Violation {
                        function: f.name.clone(),
                        inst: Some(inst.id),
                        reason: format!("debug tag {} already used in {}", d.key(), prev),
                    });
                }
            }
        }
    }
    out
}

struct FunctionCheck<'a> {
    m: &'a Module,
    f: &'a Function,
    out: &'a mut Vec<Violation>,
}

impl<'a> FunctionCheck<'a> {
    fn new(m: &'a Module, f: &'a Function, out: &'a mut Vec<Violation>) -> Self {
        FunctionCheck { m, f, out }
    }

    fn report(&mut self, inst: Option<InstId>, reason: impl Into<String>) {
        self.out.push(Violation {
            function: self.f.name.clone(),
            inst,
            reason: reason.into(),
        });
    }

    fn run(&mut self) {
        let f = self.f;
        if f.blocks.is_empty() {
            self.report(None, "function has no blocks");
            return;
        }
        let mut next = 0u32;
        for inst in f.insts() {
            if inst.id != InstId(next) {
                self.report(Some(inst.id), "instruction ids are not dense");
                return;
            }
            next += 1;
        }
        if !self.names_and_defs() {
            return;
        }
        let structure_ok = self.structure();
        self.kinds();
        if structure_ok {
            self.dominance();
        }
        if f.pure_fn {
            for inst in f.insts() {
                if matches!(inst.op, Op::Load { .. } | Op::Store { .. } | Op::Alloc) {
                    self.report(Some(inst.id), "pure function touches memory");
                }
            }
        }
        for inst in f.insts() {
            if inst.op.is_memory_access() && inst.debug.is_none() {
                self.report(Some(inst.id), "memory access without a debug tag");
            }
            if !inst.op.is_memory_access() && inst.debug.is_some() {
                self.report(Some(inst.id), "debug tag on a non-memory instruction");
            }
        }
    }

    fn names_and_defs(&mut self) -> bool {
        let f = self.f;
        let mut ok = true;
        let mut labels = HashSet::new();
        for b in &f.blocks {
            if !labels.insert(b.label.as_str()) {
                self.report(None, format!("duplicate label {}", b.label));
            }
        }
        let mut seen = HashSet::new();
        for (i, p) in f.params.iter().enumerate() {
            if f.value(*p).def != ValueDef::Param(i) {
                self.report(None, format!("parameter %{} is stale", f.value_name(*p)));
                ok = false;
            }
            if !seen.insert(f.value_name(*p)) {
                self.report(None, format!("duplicate value %{}", f.value_name(*p)));
            }
        }
        for inst in f.insts() {
            if let Some(r) = inst.result {
                if r.index() >= f.values.len() || f.value(r).def != ValueDef::Inst(inst.id) {
                    self.report(Some(inst.id), "result value is stale");
                    ok = false;
                    continue;
                }
                if !seen.insert(f.value_name(r)) {
                    self.report(Some(inst.id), format!("duplicate value %{}", f.value_name(r)));
                }
            }
            for v in inst.op.used_values() {
                if v.index() >= f.values.len() || f.value(v).def == ValueDef::Detached {
                    self.report(Some(inst.id), "use of a value with no definition");
                    ok = false;
                }
            }
        }
        ok
    }

    fn structure(&mut self) -> bool {
        let f = self.f;
        let mut ok = true;
        let n = f.blocks.len();
        for b in &f.blocks {
            let Some(last) = b.insts.last() else {
                self.report(None, format!("block {} is empty", b.label));
                ok = false;
                continue;
            };
            if !last.op.is_terminator() {
                self.report(Some(last.id), format!("block {} lacks a terminator", b.label));
                ok = false;
            }
            for inst in &b.insts[..b.insts.len() - 1] {
                if inst.op.is_terminator() {
                    self.report(Some(inst.id), "terminator in the middle of a block");
                    ok = false;
                }
            }
            for inst in &b.insts {
                for s in inst.op.successors() {
                    if s.index() >= n {
                        self.report(Some(inst.id), "branch to a missing block");
                        ok = false;
                    }
                }
            }
        }
        if !ok {
            return false;
        }
        let preds = f.predecessors();
        if !preds[0].is_empty() {
            self.report(None, "entry block has predecessors");
            ok = false;
        }
        for (bi, b) in f.blocks.iter().enumerate() {
            let phis = b.phi_count();
            for inst in &b.insts[phis..] {
                if matches!(inst.op, Op::Phi { .. }) {
                    self.report(Some(inst.id), "phi after a non-phi instruction");
                }
            }
            for inst in &b.insts[..phis] {
                let Op::Phi { incoming } = &inst.op else {
                    unreachable!()
                };
                let mut from: Vec<BlockId> = incoming.iter().map(|(_, b)| *b).collect();
                from.sort();
                let mut expect = preds[bi].clone();
                expect.sort();
                if from != expect {
                    self.report(
                        Some(inst.id),
                        format!(
                            "phi has {} incoming edges but block {} has {} predecessors",
                            incoming.len(),
                            b.label,
                            preds[bi].len()
                        ),
                    );
                    ok = false;
                }
            }
        }
        let cfg = Cfg::new(f);
        let dom = DomTree::new(&cfg);
        for (u, v) in cfg.retreating_edges() {
            if !dom.dominates(v, u) {
                self.report(
                    None,
                    format!(
                        "irreducible control flow at edge {} -> {}",
                        f.block(u).label,
                        f.block(v).label
                    ),
                );
                ok = false;
            }
        }
        ok
    }

    fn operand_kind(&self, o: &Operand) -> Kind {
        match o {
            Operand::Value(v) => self.f.value(*v).kind,
            Operand::Global(_) => Kind::Addr,
            Operand::Int(_) => Kind::I64,
            Operand::Float(_) => Kind::F64,
        }
    }

    fn kinds(&mut self) {
        let f = self.f;
        for inst in f.insts() {
            let rk = inst.result.map(|r| f.value(r).kind);
            let id = Some(inst.id);
            for o in inst.op.operands() {
                if let Operand::Global(g) = o {
                    if g.0 as usize >= self.m.globals.len() {
                        self.report(id, "reference to a missing global");
                        return;
                    }
                }
            }
            match &inst.op {
                Op::Const(c) => {
                    let ok = matches!(
                        (rk.unwrap(), c),
                        (Kind::F64, Operand::Float(_))
                            | (Kind::I64, Operand::Int(_))
                            | (Kind::Addr, Operand::Int(_) | Operand::Global(_))
                    );
                    if !ok {
                        self.report(id, "constant does not match its kind");
                    }
                }
                Op::Bin { op, lhs, rhs } => {
                    let (a, b) = (self.operand_kind(lhs), self.operand_kind(rhs));
                    let expect = match (op, a, b) {
                        (_, Kind::I64, Kind::I64) => Some(Kind::I64),
                        (BinOp::Shl, Kind::F64, _) | (BinOp::Shl, _, Kind::F64) => None,
                        (_, Kind::F64, Kind::F64) => Some(Kind::F64),
                        (BinOp::Add, Kind::Addr, Kind::I64)
                        | (BinOp::Add, Kind::I64, Kind::Addr)
                        | (BinOp::Sub, Kind::Addr, Kind::I64) => Some(Kind::Addr),
                        (BinOp::Sub, Kind::Addr, Kind::Addr) => Some(Kind::I64),
                        _ => None,
                    };
                    match expect {
                        None => self.report(
                            id,
                            format!("{} of {} and {} is not allowed", op.as_str(), a, b),
                        ),
                        Some(k) if Some(k) != rk => {
                            self.report(id, format!("result should be {k}"))
                        }
                        _ => {}
                    }
                }
                Op::Icmp { lhs, rhs, .. } => {
                    let (a, b) = (self.operand_kind(lhs), self.operand_kind(rhs));
                    if a.is_integral() != b.is_integral() || rk != Some(Kind::I64) {
                        self.report(id, format!("cannot compare {a} with {b}"));
                    }
                }
                Op::Phi { incoming } => {
                    for (o, _) in incoming {
                        let k = self.operand_kind(o);
                        let ok = Some(k) == rk || (rk == Some(Kind::Addr) && k == Kind::I64 && o.is_literal());
                        if !ok {
                            self.report(id, format!("phi incoming {k} does not match"));
                        }
                    }
                }
                Op::Addr { base, index, .. } => {
                    if self.operand_kind(base) != Kind::Addr {
                        self.report(id, "addr base must be an address");
                    }
                    if self.operand_kind(index) != Kind::I64 {
                        self.report(id, "addr index must be i64");
                    }
                }
                Op::Load { addr } | Op::Store { addr, .. } => {
                    if self.operand_kind(addr) != Kind::Addr {
                        self.report(id, "memory access through a non-address");
                    }
                }
                Op::Alloc => {
                    if rk != Some(Kind::Addr) {
                        self.report(id, "alloc yields an address");
                    }
                }
                Op::Call { callee, args } => self.check_call(inst.id, callee, args, rk),
                Op::Br { .. } => {}
                Op::CondBr { cond, .. } => {
                    if self.operand_kind(cond) != Kind::I64 {
                        self.report(id, "branch condition must be i64");
                    }
                }
                Op::Ret { value } => match (value, f.ret) {
                    (None, None) => {}
                    (Some(v), Some(k)) if self.operand_kind(v) == k => {}
                    _ => self.report(id, "return does not match the signature"),
                },
            }
        }
    }

    fn check_call(&mut self, id: InstId, callee: &str, args: &[Operand], rk: Option<Kind>) {
        let arg_kinds: Vec<Kind> = args.iter().map(|a| self.operand_kind(a)).collect();
        if let Some((_, k, n)) = INTRINSICS.iter().find(|(n, _, _)| *n == callee) {
            if arg_kinds.len() != *n || arg_kinds.iter().any(|a| a != k) || rk != Some(*k) {
                self.report(Some(id), format!("bad call to intrinsic {callee}"));
            }
            return;
        }
        let Some(target) = self.m.function(callee) else {
            self.report(Some(id), format!("call to unknown function {callee}"));
            return;
        };
        if !target.pure_fn {
            self.report(Some(id), format!("call target {callee} is not pure"));
        }
        let want: Vec<Kind> = target.params.iter().map(|p| target.value(*p).kind).collect();
        if want != arg_kinds || target.ret != rk || rk.is_none() {
            self.report(Some(id), format!("call to {callee} does not match its signature"));
        }
    }

    fn dominance(&mut self) {
        let f = self.f;
        let cfg = Cfg::new(f);
        let dom = DomTree::new(&cfg);
        let positions = f.positions();
        let def_pos = |v: ValueId| -> Option<(BlockId, usize)> {
            match f.value(v).def {
                ValueDef::Inst(i) => Some(positions[i.index()]),
                _ => None,
            }
        };
        for inst in f.insts() {
            let (ub, upos) = positions[inst.id.index()];
            if !cfg.reachable(ub) {
                continue;
            }
            if let Op::Phi { incoming } = &inst.op {
                for (o, pred) in incoming {
                    let Some(v) = o.as_value() else { continue };
                    let Some((db, _)) = def_pos(v) else { continue };
                    if cfg.reachable(*pred) && !dom.dominates(db, *pred) {
                        self.report(
                            Some(inst.id),
                            format!(
                                "%{} does not dominate the end of {}",
                                f.value_name(v),
                                f.block(*pred).label
                            ),
                        );
                    }
                }
                continue;
            }
            for v in inst.op.used_values() {
                let Some((db, dpos)) = def_pos(v) else { continue };
                let ok = if db == ub {
                    dpos < upos
                } else {
                    dom.dominates(db, ub)
                };
                if !ok {
                    self.report(
                        Some(inst.id),
                        format!("use of %{} not dominated by its definition", f.value_name(v)),
                    );
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::parse_module;
    use super::*;

    fn reasons(src: &str) -> Vec<String> {
        validate(&parse_module(src).unwrap())
            .into_iter()
            .map(|v| v.reason)
            .collect()
    }

    #[test]
    fn accepts_simple_loop() {
        let src = "global x[8] : i64
fn main(%n: i64) {
entry:
  br loop
loop:
  %i = phi i64 [0, entry], [%i.next, loop]
  %p = addr @x, %i, 8, 0
  store %p, %i
  %i.next = add %i, 1
  %c = icmp lt %i.next, %n
  condbr %c, loop, exit
exit:
  ret
}";
        assert!(reasons(src).is_empty(), "{:?}", reasons(src));
    }

    #[test]
    fn rejects_phi_edge_mismatch() {
        let src = "fn main {\nentry:\n br l\nl:\n %a = phi i64 [0, entry]\n br l\n}";
        assert!(reasons(src).iter().any(|r| r.contains("incoming edges")));
    }

    #[test]
    fn rejects_irreducible() {
        let src = "fn main(%c: i64) {
e: condbr %c, a, b
a: br b
b: condbr %c, a, x
x: ret
}";
        assert!(reasons(src).iter().any(|r| r.contains("irreducible")));
    }

    #[test]
    fn rejects_non_dominating_use() {
        let src = "fn main(%c: i64) -> i64 {
e: condbr %c, a, b
a: %v = const i64 1
 br b
b: %w = phi i64 [0, e], [1, a]
 ret %w
}";
        assert!(reasons(src).is_empty());
        let bad = "fn main(%c: i64) -> i64 {
e: condbr %c, a, b
a: %v = const i64 1
 br b
b: %w = add %v, 1
 ret %w
}";
        assert!(reasons(bad).iter().any(|r| r.contains("not dominated")));
    }

    #[test]
    fn rejects_kind_errors_and_impure_calls() {
        let src = "fn g(%a: i64) -> i64 { e: ret %a }
fn main(%x: f64) -> i64 {
e: %a = call i64 g(1)
 %b = add %a, %x
 ret %a
}";
        let r = reasons(src);
        assert!(r.iter().any(|r| r.contains("not pure")));
        assert!(r.iter().any(|r| r.contains("not allowed")));
    }

    #[test]
    fn rejects_duplicate_debug_tags() {
        let src = "global x[1] : i64
fn main {
e: store @x, 1 !dbg \"a\":1:1
 store @x, 2 !dbg \"a\":1:1
 ret
}";
        assert!(reasons(src).iter().any(|r| r.contains("already used")));
    }
}
