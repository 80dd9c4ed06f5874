use crate::mir::{BinOp, Function, Op};

/// Removes pure instructions and phis whose results nothing live depends
/// on, dead phi cycles included. Returns how many were removed.
pub fn dce(f: &mut Function) -> usize {
    f.renumber();
    let root = |op: &Op| {
        !(op.is_pure() || matches!(op, Op::Phi { .. }))
            || matches!(op, Op::Bin { op: BinOp::Div, .. })
    };
    let mut live = vec![false; f.num_insts()];
    let mut work = Vec::new();
    for inst in f.insts() {
        if root(&inst.op) {
            live[inst.id.index()] = true;
            work.push(inst.id);
        }
    }
    while let Some(id) = work.pop() {
        for v in f.inst(id).op.used_values() {
            if let Some(def) = f.def_inst(v) {
                if !live[def.id.index()] {
                    live[def.id.index()] = true;
                    work.push(def.id);
                }
            }
        }
    }
    let before = live.len();
    for block in f.blocks.iter_mut() {
        block.insts.retain(|i| live[i.id.index()]);
    }
    f.renumber();
    before - f.num_insts()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mir::{parse_module, validate};

    #[test]
    fn removes_dead_chains_and_phi_cycles() {
        let mut m = parse_module(
            "fn main(%n: i64) -> i64 {
entry:
  %dead = mul %n, 3
  br loop
loop:
  %i = phi i64 [0, entry], [%i.next, loop]
  %z = phi i64 [0, entry], [%z.next, loop]
  %z.next = add %z, 2
  %i.next = add %i, 1
  %c = icmp lt %i.next, %n
  condbr %c, loop, exit
exit:
  %q = div %n, 0
  ret %i.next
}",
        )
        .unwrap();
        let f = &mut m.functions[0];
        assert_eq!(dce(f), 3);
        for gone in ["dead", "z", "z.next"] {
            let v = f.value_by_name(gone);
            assert!(v.and_then(|v| f.def_inst(v)).is_none(), "{gone}");
        }
        f.compact();
        assert!(validate(&m).is_empty());
    }
}
