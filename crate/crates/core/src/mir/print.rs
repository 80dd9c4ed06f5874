use std::fmt::Write;

use super::{Function, Instruction, Module, Op, Operand};

/// Renders a module in the textual form accepted by [`super::parse_module`].
pub fn print_module(m: &Module) -> String {
    let mut out = String::new();
    for g in &m.globals {
        writeln!(out, "global {}[{}] : {}", g.name, g.count, g.kind).unwrap();
    }
    for (i, f) in m.functions.iter().enumerate() {
        if i > 0 || !m.globals.is_empty() {
            out.push('\n');
        }
        print_function(&mut out, m, f);
    }
    out
}

pub(crate) fn operand_text(m: &Module, f: &Function, o: &Operand) -> String {
    match o {
        Operand::Value(v) => format!("%{}", f.value_name(*v)),
        Operand::Global(g) => format!("@{}", m.global(*g).name),
        Operand::Int(v) => v.to_string(),
        Operand::Float(bits) => format!("{:?}", f64::from_bits(*bits)),
    }
}

fn print_function(out: &mut String, m: &Module, f: &Function) {
    if f.pure_fn {
        out.push_str("pure ");
    }
    let params: Vec<String> = f
        .params
        .iter()
        .map(|p| format!("%{}: {}", f.value_name(*p), f.value(*p).kind))
        .collect();
    write!(out, "fn {}({})", f.name, params.join(", ")).unwrap();
    if let Some(k) = f.ret {
        write!(out, " -> {k}").unwrap();
    }
    out.push_str(" {\n");
    for b in &f.blocks {
        writeln!(out, "{}:", b.label).unwrap();
        for inst in &b.insts {
            writeln!(out, "  {}", inst_text(m, f, inst)).unwrap();
        }
    }
    out.push_str("}\n");
}

/// One instruction, without indentation or newline.
pub fn inst_text(m: &Module, f: &Function, inst: &Instruction) -> String {
    let o = |x: &Operand| operand_text(m, f, x);
    let label = |b: &super::BlockId| f.block(*b).label.clone();
    let mut s = String::new();
    if let Some(r) = inst.result {
        write!(s, "%{} = ", f.value_name(r)).unwrap();
    }
    let kind = || inst.result.map(|r| f.value(r).kind.as_str()).unwrap_or("?");
    match &inst.op {
        Op::Const(c) => write!(s, "const {} {}", kind(), o(c)),
        Op::Bin { op, lhs, rhs } => write!(s, "{} {}, {}", op.as_str(), o(lhs), o(rhs)),
        Op::Icmp { pred, lhs, rhs } => {
            write!(s, "icmp {} {}, {}", pred.as_str(), o(lhs), o(rhs))
        }
        Op::Phi { incoming } => {
            let parts: Vec<String> = incoming
                .iter()
                .map(|(v, b)| format!("[{}, {}]", o(v), label(b)))
                .collect();
            write!(s, "phi {} {}", kind(), parts.join(", "))
        }
        Op::Addr {
            base,
            index,
            scale,
            offset,
        } => write!(s, "addr {}, {}, {}, {}", o(base), o(index), scale, offset),
        Op::Load { addr } => write!(s, "load {} {}", kind(), o(addr)),
        Op::Store { addr, value } => write!(s, "store {}, {}", o(addr), o(value)),
        Op::Alloc => write!(s, "alloc {}", kind_of_alloc(f, inst)),
        Op::Call { callee, args } => {
            let a: Vec<String> = args.iter().map(o).collect();
            write!(s, "call {} {}({})", kind(), callee, a.join(", "))
        }
        Op::Br { target } => write!(s, "br {}", label(target)),
        Op::CondBr {
            cond,
            then_block,
            else_block,
        } => write!(
            s,
            "condbr {}, {}, {}",
            o(cond),
            label(then_block),
            label(else_block)
        ),
        Op::Ret { value: Some(v) } => write!(s, "ret {}", o(v)),
        Op::Ret { value: None } => write!(s, "ret"),
    }
    .unwrap();
    if let Some(d) = &inst.debug {
        write!(s, " !dbg \"{}\":{}:{}", d.file, d.line, d.column).unwrap();
    }
    s
}

/// Alloc results are addresses; the slot kind is whatever is stored into it.
fn kind_of_alloc(f: &Function, inst: &Instruction) -> &'static str {
    let Some(slot) = inst.result else {
        return "i64";
    };
    for other in f.insts() {
        if let Op::Store { addr, value } = &other.op {
            if *addr == Operand::Value(slot) {
                return match value {
                    Operand::Value(v) => f.value(*v).kind.as_str(),
                    Operand::Float(_) => "f64",
                    Operand::Global(_) => "addr",
                    Operand::Int(_) => "i64",
                };
            }
        }
    }
    "i64"
}

#[cfg(test)]
mod tests {
    use super::super::parse_module;
    use super::*;

    #[test]
    fn round_trip_is_stable() {
        let src = "global x[4] : f64
global y[4] : f64

pure fn sq(%a: f64) -> f64 {
entry:
  %b = mul %a, %a
  ret %b
}

fn main(%n: i64) -> f64 {
entry:
  %s = alloc f64
  store %s, 1.5 !dbg \"t.ir\":1:1
  br loop
loop:
  %i = phi i64 [0, entry], [%i.next, loop]
  %acc = phi f64 [0.0, entry], [%acc.next, loop]
  %p = addr @x, %i, 8, 0
  %v = load f64 %p !dbg \"t.ir\":2:3
  %q = call f64 sq(%v)
  %acc.next = add %acc, %q
  %i.next = add %i, 1
  %c = icmp lt %i.next, %n
  condbr %c, loop, exit
exit:
  %r = call f64 sqrt(%acc.next)
  ret %r
}
";
        let m = parse_module(src).unwrap();
        let printed = print_module(&m);
        assert_eq!(printed, src);
        assert_eq!(parse_module(&printed).unwrap(), m);
    }
}
