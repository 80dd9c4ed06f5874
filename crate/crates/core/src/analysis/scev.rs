use std::fmt;

use super::loops::LoopInfo;
use crate::mir::{
    BinOp, BlockId, Function, GlobalId, InstId, Instruction, Kind, Module, Op, Operand, ValueDef,
    ValueId,
};

/// A loop-invariant integer expression over constants, values and global
/// base addresses.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ScevExpr {
    Const(i64),
    Value(ValueId),
    Global(GlobalId),
    Add(Box<ScevExpr>, Box<ScevExpr>),
    Mul(Box<ScevExpr>, Box<ScevExpr>),
}

impl ScevExpr {
    pub fn from_operand(o: &Operand) -> Option<ScevExpr> {
        match o {
            Operand::Int(c) => Some(ScevExpr::Const(*c)),
            Operand::Value(v) => Some(ScevExpr::Value(*v)),
            Operand::Global(g) => Some(ScevExpr::Global(*g)),
            Operand::Float(_) => None,
        }
    }

    pub fn add(a: ScevExpr, b: ScevExpr) -> ScevExpr {
        match (a, b) {
            (ScevExpr::Const(x), ScevExpr::Const(y)) => ScevExpr::Const(x.wrapping_add(y)),
            (ScevExpr::Const(0), e) | (e, ScevExpr::Const(0)) => e,
            // Keep constants on the right so folding finds them.
            (ScevExpr::Const(c), e) => ScevExpr::add(e, ScevExpr::Const(c)),
            (ScevExpr::Add(x, y), ScevExpr::Const(c)) if matches!(*y, ScevExpr::Const(_)) => {
                let ScevExpr::Const(d) = *y else { unreachable!() };
                ScevExpr::add(*x, ScevExpr::Const(d.wrapping_add(c)))
            }
            (a, b) => ScevExpr::Add(Box::new(a), Box::new(b)),
        }
    }

    pub fn mul(a: ScevExpr, b: ScevExpr) -> ScevExpr {
        match (a, b) {
            (ScevExpr::Const(x), ScevExpr::Const(y)) => ScevExpr::Const(x.wrapping_mul(y)),
            (ScevExpr::Const(0), _) | (_, ScevExpr::Const(0)) => ScevExpr::Const(0),
            (ScevExpr::Const(1), e) | (e, ScevExpr::Const(1)) => e,
            (e, ScevExpr::Const(c)) => ScevExpr::mul(ScevExpr::Const(c), e),
            (ScevExpr::Const(c), ScevExpr::Mul(x, y)) if matches!(*x, ScevExpr::Const(_)) => {
                let ScevExpr::Const(d) = *x else { unreachable!() };
                ScevExpr::mul(ScevExpr::Const(c.wrapping_mul(d)), *y)
            }
            (a, b) => ScevExpr::Mul(Box::new(a), Box::new(b)),
        }
    }

    pub fn neg(a: ScevExpr) -> ScevExpr {
        ScevExpr::mul(ScevExpr::Const(-1), a)
    }

    pub fn as_const(&self) -> Option<i64> {
        match self {
            ScevExpr::Const(c) => Some(*c),
            _ => None,
        }
    }

    /// Values mentioned by the expression.
    pub fn values(&self) -> Vec<ValueId> {
        let mut out = Vec::new();
        self.walk(&mut |e| {
            if let ScevExpr::Value(v) = e {
                if !out.contains(v) {
                    out.push(*v);
                }
            }
        });
        out
    }

    fn walk(&self, visit: &mut impl FnMut(&ScevExpr)) {
        visit(self);
        if let ScevExpr::Add(a, b) | ScevExpr::Mul(a, b) = self {
            a.walk(visit);
            b.walk(visit);
        }
    }

    /// Evaluates with wrapping arithmetic; `None` when a value is unreadable.
    pub fn eval(
        &self,
        value: &mut dyn FnMut(ValueId) -> Option<i64>,
        global: &dyn Fn(GlobalId) -> i64,
    ) -> Option<i64> {
        Some(match self {
            ScevExpr::Const(c) => *c,
            ScevExpr::Value(v) => value(*v)?,
            ScevExpr::Global(g) => global(*g),
            ScevExpr::Add(a, b) => a.eval(value, global)?.wrapping_add(b.eval(value, global)?),
            ScevExpr::Mul(a, b) => a.eval(value, global)?.wrapping_mul(b.eval(value, global)?),
        })
    }

    pub fn kind(&self, f: &Function) -> Kind {
        match self {
            ScevExpr::Const(_) => Kind::I64,
            ScevExpr::Value(v) => f.value(*v).kind,
            ScevExpr::Global(_) => Kind::Addr,
            ScevExpr::Add(a, b) => {
                if a.kind(f) == Kind::Addr || b.kind(f) == Kind::Addr {
                    Kind::Addr
                } else {
                    Kind::I64
                }
            }
            ScevExpr::Mul(..) => Kind::I64,
        }
    }

    /// Emits instructions computing the expression into `block` before
    /// position `pos`, returning the operand holding the result and the
    /// number of instructions inserted.
    pub fn materialize(
        &self,
        f: &mut Function,
        block: BlockId,
        pos: usize,
        hint: &str,
    ) -> (Operand, usize) {
        let mut inserted = 0;
        let op = self.emit(f, block, pos, hint, &mut inserted);
        (op, inserted)
    }

    fn emit(
        &self,
        f: &mut Function,
        block: BlockId,
        pos: usize,
        hint: &str,
        inserted: &mut usize,
    ) -> Operand {
        let (op, a, b) = match self {
            ScevExpr::Const(c) => return Operand::Int(*c),
            ScevExpr::Value(v) => return Operand::Value(*v),
            ScevExpr::Global(g) => return Operand::Global(*g),
            ScevExpr::Add(a, b) => (BinOp::Add, a, b),
            ScevExpr::Mul(a, b) => (BinOp::Mul, a, b),
        };
        let lhs = a.emit(f, block, pos, hint, inserted);
        let rhs = b.emit(f, block, pos, hint, inserted);
        // Addresses must come first in a mixed add.
        let (lhs, rhs) = if op == BinOp::Add && b.kind(f) == Kind::Addr {
            (rhs, lhs)
        } else {
            (lhs, rhs)
        };
        let kind = self.kind(f);
        let name = f.fresh_name(hint);
        let v = f.add_value(name, kind);
        let at = pos + *inserted;
        f.block_mut(block)
            .insts
            .insert(at, Instruction::new(Some(v), Op::Bin { op, lhs, rhs }));
        *inserted += 1;
        Operand::Value(v)
    }

    pub fn display<'a>(&'a self, m: &'a Module, f: &'a Function) -> ScevDisplay<'a> {
        ScevDisplay { e: self, m, f }
    }

    /// Parses the textual form written by [`ScevExpr::display`].
    pub fn parse(text: &str, m: &Module, f: &Function) -> Option<ScevExpr> {
        let toks: Vec<String> = text
            .replace('(', " ( ")
            .replace(')', " ) ")
            .split_whitespace()
            .map(str::to_string)
            .collect();
        let mut pos = 0;
        let e = parse_sexpr(&toks, &mut pos, m, f)?;
        (pos == toks.len()).then_some(e)
    }
}

fn parse_sexpr(toks: &[String], pos: &mut usize, m: &Module, f: &Function) -> Option<ScevExpr> {
    let t = toks.get(*pos)?.clone();
    *pos += 1;
    if t == "(" {
        let op = toks.get(*pos)?.clone();
        *pos += 1;
        let a = parse_sexpr(toks, pos, m, f)?;
        let b = parse_sexpr(toks, pos, m, f)?;
        if toks.get(*pos)? != ")" {
            return None;
        }
        *pos += 1;
        return match op.as_str() {
            "+" => Some(ScevExpr::Add(Box::new(a), Box::new(b))),
            "*" => Some(ScevExpr::Mul(Box::new(a), Box::new(b))),
            _ => None,
        };
    }
    if let Some(name) = t.strip_prefix('%') {
        return f.value_by_name(name).map(ScevExpr::Value);
    }
    if let Some(name) = t.strip_prefix('@') {
        return m.global_id(name).map(ScevExpr::Global);
    }
    t.parse().ok().map(ScevExpr::Const)
}

pub struct ScevDisplay<'a> {
    e: &'a ScevExpr,
    m: &'a Module,
    f: &'a Function,
}

impl fmt::Display for ScevDisplay<'_> {
    fn fmt(&self, out: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sub = |e| ScevDisplay {
            e,
            m: self.m,
            f: self.f,
        };
        match self.e {
            ScevExpr::Const(c) => write!(out, "{c}"),
            ScevExpr::Value(v) => write!(out, "%{}", self.f.value_name(*v)),
            ScevExpr::Global(g) => write!(out, "@{}", self.m.global(*g).name),
            ScevExpr::Add(a, b) => write!(out, "(+ {} {})", sub(&**a), sub(&**b)),
            ScevExpr::Mul(a, b) => write!(out, "(* {} {})", sub(&**a), sub(&**b)),
        }
    }
}

/// An add-recurrence `{init, +, step}` over the iterations of one loop.
///
/// For a header phi, `init` is its value on loop entry. For a value derived
/// from such phis, `init` is its value in the first iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AddRecInfo {
    pub value: ValueId,
    pub init: ScevExpr,
    pub step: ScevExpr,
    pub loop_header: BlockId,
}

fn def_block(f: &Function, v: ValueId) -> Option<BlockId> {
    match f.value(v).def {
        ValueDef::Inst(id) => Some(f.block_of(id)),
        _ => None,
    }
}

/// Whether `o` is fixed across all iterations of `l`.
pub fn is_invariant(o: &Operand, l: &LoopInfo, f: &Function) -> bool {
    match o {
        Operand::Value(v) if def_block(f, *v).is_none_or(|b| !l.contains(b)) => true,
        _ => invariant_expr(o, l, f).is_some(),
    }
}

/// `o` as an expression over values defined outside `l`. Integer
/// arithmetic inside the loop whose operands are all invariant is expanded,
/// so the result can be materialized outside the loop.
pub fn invariant_expr(o: &Operand, l: &LoopInfo, f: &Function) -> Option<ScevExpr> {
    invariant_at(o, l, f, 0)
}

fn invariant_at(o: &Operand, l: &LoopInfo, f: &Function, depth: usize) -> Option<ScevExpr> {
    let Operand::Value(v) = o else {
        return ScevExpr::from_operand(o);
    };
    match def_block(f, *v) {
        Some(b) if l.contains(b) => {}
        _ => return f.value(*v).kind.is_integral().then_some(ScevExpr::Value(*v)),
    }
    if depth > 64 || !f.value(*v).kind.is_integral() {
        return None;
    }
    match &f.def_inst(*v)?.op {
        Op::Const(c) => ScevExpr::from_operand(c),
        Op::Bin { op, lhs, rhs } => {
            let a = invariant_at(lhs, l, f, depth + 1)?;
            let b = invariant_at(rhs, l, f, depth + 1)?;
            match op {
                BinOp::Add => Some(ScevExpr::add(a, b)),
                BinOp::Sub => Some(ScevExpr::add(a, ScevExpr::neg(b))),
                BinOp::Mul => Some(ScevExpr::mul(a, b)),
                BinOp::Shl => match b {
                    ScevExpr::Const(s) if (0..63).contains(&s) => {
                        Some(ScevExpr::mul(ScevExpr::Const(1 << s), a))
                    }
                    _ => None,
                },
                BinOp::Div => None,
            }
        }
        _ => None,
    }
}

/// The header-phi incoming operand from outside the loop, and the operand
/// flowing around the back edges. `None` unless the phi has exactly those
/// two sources.
pub fn phi_init_next(inst: &Instruction, l: &LoopInfo) -> Option<(Operand, Operand)> {
    let Op::Phi { incoming } = &inst.op else {
        return None;
    };
    let mut init = None;
    let mut next: Option<Operand> = None;
    for (o, from) in incoming {
        if l.contains(*from) {
            if next.is_some_and(|n| n != *o) {
                return None;
            }
            next = Some(*o);
        } else {
            if init.is_some() {
                return None;
            }
            init = Some(*o);
        }
    }
    Some((init?, next?))
}

/// Recognizes `v` as an add-recurrence of `l`.
pub fn scev_analyze(v: ValueId, l: &LoopInfo, f: &Function) -> Option<AddRecInfo> {
    analyze(v, l, f, 0)
}

fn analyze(v: ValueId, l: &LoopInfo, f: &Function, depth: usize) -> Option<AddRecInfo> {
    if depth > 64 || !f.value(v).kind.is_integral() {
        return None;
    }
    let inst = f.def_inst(v)?;
    let b = f.block_of(inst.id);
    if !l.contains(b) {
        return None;
    }
    let rec = |init, step| AddRecInfo {
        value: v,
        init,
        step,
        loop_header: l.header,
    };
    match &inst.op {
        Op::Phi { .. } => {
            if b != l.header {
                return None;
            }
            let (init, next) = phi_init_next(inst, l)?;
            let step = offset_from(v, &next, l, f, 0)?;
            Some(rec(ScevExpr::from_operand(&init)?, step))
        }
        Op::Bin { op, lhs, rhs } => {
            let side = |o: &Operand| -> Option<Result<AddRecInfo, ScevExpr>> {
                if let Some(c) = invariant_expr(o, l, f) {
                    return Some(Err(c));
                }
                analyze(o.as_value()?, l, f, depth + 1).map(Ok)
            };
            let (a, c) = (side(lhs)?, side(rhs)?);
            match (op, a, c) {
                (BinOp::Add, Ok(x), Ok(y)) => Some(rec(
                    ScevExpr::add(x.init, y.init),
                    ScevExpr::add(x.step, y.step),
                )),
                (BinOp::Add, Ok(x), Err(c)) | (BinOp::Add, Err(c), Ok(x)) => {
                    Some(rec(ScevExpr::add(x.init, c), x.step))
                }
                (BinOp::Sub, Ok(x), Ok(y)) => Some(rec(
                    ScevExpr::add(x.init, ScevExpr::neg(y.init)),
                    ScevExpr::add(x.step, ScevExpr::neg(y.step)),
                )),
                (BinOp::Sub, Ok(x), Err(c)) => Some(rec(ScevExpr::add(x.init, ScevExpr::neg(c)), x.step)),
                (BinOp::Sub, Err(c), Ok(x)) => Some(rec(
                    ScevExpr::add(c, ScevExpr::neg(x.init)),
                    ScevExpr::neg(x.step),
                )),
                (BinOp::Mul, Ok(x), Err(c)) | (BinOp::Mul, Err(c), Ok(x)) => Some(rec(
                    ScevExpr::mul(x.init, c.clone()),
                    ScevExpr::mul(x.step, c),
                )),
                (BinOp::Shl, Ok(x), Err(ScevExpr::Const(s))) if (0..63).contains(&s) => {
                    let c = ScevExpr::Const(1i64 << s);
                    Some(rec(ScevExpr::mul(x.init, c.clone()), ScevExpr::mul(x.step, c)))
                }
                _ => None,
            }
        }
        _ => None,
    }
}

/// How much `o` exceeds the phi `v` by, when `o` is `v` plus a chain of
/// invariant additions and subtractions.
fn offset_from(
    v: ValueId,
    o: &Operand,
    l: &LoopInfo,
    f: &Function,
    depth: usize,
) -> Option<ScevExpr> {
    let x = o.as_value()?;
    if x == v {
        return Some(ScevExpr::Const(0));
    }
    if depth > 64 {
        return None;
    }
    let inst = f.def_inst(x)?;
    if !l.contains(f.block_of(inst.id)) {
        return None;
    }
    let Op::Bin { op, lhs, rhs } = &inst.op else {
        return None;
    };
    let inv = |o: &Operand| invariant_expr(o, l, f);
    match op {
        BinOp::Add => {
            if let Some(c) = inv(rhs) {
                return Some(ScevExpr::add(offset_from(v, lhs, l, f, depth + 1)?, c));
            }
            let c = inv(lhs)?;
            Some(ScevExpr::add(offset_from(v, rhs, l, f, depth + 1)?, c))
        }
        BinOp::Sub => {
            let c = inv(rhs)?;
            Some(ScevExpr::add(
                offset_from(v, lhs, l, f, depth + 1)?,
                ScevExpr::neg(c),
            ))
        }
        _ => None,
    }
}

/// Header phis of `l` that are add-recurrences.
pub fn header_ivs(l: &LoopInfo, f: &Function) -> Vec<AddRecInfo> {
    f.block(l.header)
        .insts
        .iter()
        .filter_map(|i| i.result)
        .filter_map(|v| {
            matches!(f.def_inst(v)?.op, Op::Phi { .. }).then(|| scev_analyze(v, l, f))?
        })
        .collect()
}

/// Whether `v` feeds an operand of some `addr` instruction, directly or
/// through other instructions (including phis).
pub fn is_used_in_addr_compute(v: ValueId, f: &Function) -> bool {
    let users = f.users();
    let mut seen = vec![false; f.values.len()];
    let mut work = vec![v];
    seen[v.index()] = true;
    while let Some(x) = work.pop() {
        for &u in &users[x.index()] {
            let inst = f.inst(u);
            if let Op::Addr { base, index, .. } = &inst.op {
                if *base == Operand::Value(x) || *index == Operand::Value(x) {
                    return true;
                }
            }
            if let Some(r) = inst.result {
                if !seen[r.index()] {
                    seen[r.index()] = true;
                    work.push(r);
                }
            }
        }
    }
    false
}

/// Every value the address operand of `mem` depends on, including itself.
pub fn address_closure(f: &Function, mem: InstId) -> Vec<ValueId> {
    let mut out = Vec::new();
    if let Some(Operand::Value(a)) = f.inst(mem).op.address_operand() {
        operand_closure(f, a, &mut out);
    }
    out
}

/// Transitive operands of `v` through every kind of definition.
pub fn operand_closure(f: &Function, v: ValueId, out: &mut Vec<ValueId>) {
    let mut work = vec![v];
    while let Some(x) = work.pop() {
        if out.contains(&x) {
            continue;
        }
        out.push(x);
        if let Some(inst) = f.def_inst(x) {
            work.extend(inst.op.used_values());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::loops::find_loops;
    use crate::mir::parse_module;

    fn setup(body: &str) -> (Module, LoopInfo) {
        let src = format!(
            "global y[64] : i64
fn main(%n: i64, %c: i64) {{
entry:
  br loop
loop:
{body}
  %t = icmp lt %i.next, %n
  condbr %t, loop, exit
exit:
  ret
}}"
        );
        let m = parse_module(&src).unwrap();
        assert!(crate::mir::validate(&m).is_empty(), "{:?}", crate::mir::validate(&m));
        let l = find_loops(&m.functions[0]).remove(0);
        (m, l)
    }

    fn rec(m: &Module, l: &LoopInfo, name: &str) -> Option<(String, String)> {
        let f = &m.functions[0];
        let r = scev_analyze(f.value_by_name(name).unwrap(), l, f)?;
        Some((
            r.init.display(m, f).to_string(),
            r.step.display(m, f).to_string(),
        ))
    }

    #[test]
    fn basic_and_parametric_steps() {
        let (m, l) = setup(
            "  %i = phi i64 [0, entry], [%i.next, loop]
  %k = phi i64 [0, entry], [%k.next, loop]
  %x = phi i64 [1, entry], [%x.next, loop]
  %i.next = add %i, 1
  %k.next = add %k, %c
  %x.next = mul %x, 2",
        );
        assert_eq!(rec(&m, &l, "i"), Some(("0".into(), "1".into())));
        assert_eq!(rec(&m, &l, "k"), Some(("0".into(), "%c".into())));
        assert_eq!(rec(&m, &l, "x"), None);
        assert_eq!(rec(&m, &l, "i.next"), Some(("1".into(), "1".into())));
    }

    #[test]
    fn derived_values_and_addr_use() {
        let (m, l) = setup(
            "  %i = phi i64 [%c, entry], [%i.next, loop]
  %t3 = mul %i, 3
  %u = add %t3, 5
  %p = addr @y, %u, 8, 0
  store %p, %i
  %i.next = add %i, 1",
        );
        let f = &m.functions[0];
        assert_eq!(
            rec(&m, &l, "u"),
            Some(("(+ (* 3 %c) 5)".into(), "3".into()))
        );
        let id = |n: &str| f.value_by_name(n).unwrap();
        assert!(is_used_in_addr_compute(id("u"), f));
        assert!(is_used_in_addr_compute(id("t3"), f));
        assert!(is_used_in_addr_compute(id("i"), f));
        let e = ScevExpr::parse("(+ (* 3 %c) 5)", &m, f).unwrap();
        assert_eq!(scev_analyze(id("u"), &l, f).unwrap().init, e);
    }

    #[test]
    fn branch_only_value_is_not_address_feeding() {
        let (m, _) = setup(
            "  %i = phi i64 [0, entry], [%i.next, loop]
  %i.next = add %i, 1",
        );
        let f = &m.functions[0];
        assert!(!is_used_in_addr_compute(f.value_by_name("i.next").unwrap(), f));
    }

    #[test]
    fn invariant_arithmetic_inside_the_loop() {
        let (m, l) = setup(
            "  %i = phi i64 [0, entry], [%i.next, loop]
  %c1 = sub %c, 1
  %base = mul %c1, %n
  %x = add %base, %i
  %i.next = add %i, 1",
        );
        let f = &m.functions[0];
        let id = |n: &str| f.value_by_name(n).unwrap();
        assert!(is_invariant(&Operand::Value(id("base")), &l, f));
        assert!(!is_invariant(&Operand::Value(id("x")), &l, f));
        assert_eq!(
            rec(&m, &l, "x"),
            Some(("(* (+ %c -1) %n)".into(), "1".into()))
        );
        assert_eq!(rec(&m, &l, "base"), None);
    }

    #[test]
    fn folding() {
        let e = ScevExpr::add(ScevExpr::add(ScevExpr::Value(ValueId(0)), ScevExpr::Const(2)), ScevExpr::Const(3));
        assert_eq!(e, ScevExpr::Add(Box::new(ScevExpr::Value(ValueId(0))), Box::new(ScevExpr::Const(5))));
        assert_eq!(ScevExpr::mul(ScevExpr::Const(3), ScevExpr::Const(0)), ScevExpr::Const(0));
        assert_eq!(ScevExpr::mul(ScevExpr::Const(2), ScevExpr::mul(ScevExpr::Const(3), ScevExpr::Value(ValueId(1)))).as_const(), None);
    }
}
