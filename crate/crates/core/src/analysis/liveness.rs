use std::collections::BTreeSet;

use super::cfg::Cfg;
use crate::mir::{Function, InstId, Op, ValueId};

pub type ValueSet = BTreeSet<ValueId>;

/// Per-instruction live-in and live-out sets, indexed by [`InstId`].
///
/// A phi's incoming values are uses on the edge from the matching
/// predecessor: they are live out of that predecessor's terminator but not
/// live into the phi itself. Phis of one block define their results in
/// parallel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LivenessMap {
    pub live_in: Vec<ValueSet>,
    pub live_out: Vec<ValueSet>,
}

impl LivenessMap {
    pub fn is_live_in(&self, i: InstId, v: ValueId) -> bool {
        self.live_in[i.index()].contains(&v)
    }

    pub fn is_live_out(&self, i: InstId, v: ValueId) -> bool {
        self.live_out[i.index()].contains(&v)
    }
}

/// Backward dataflow to a fixpoint over the instruction graph.
pub fn compute_liveness(f: &Function) -> LivenessMap {
    let n = f.num_insts();
    let mut live_in = vec![ValueSet::new(); n];
    let mut live_out = vec![ValueSet::new(); n];
    let cfg = Cfg::new(f);
    let first_id: Vec<usize> = {
        let mut ids = Vec::with_capacity(f.blocks.len());
        let mut next = 0;
        for b in &f.blocks {
            ids.push(next);
            next += b.insts.len();
        }
        ids
    };
    // Reverse postorder reversed visits successors first in acyclic regions.
    let mut order: Vec<usize> = cfg.rpo.iter().rev().map(|b| b.index()).collect();
    for b in 0..f.blocks.len() {
        if !cfg.reachable(crate::mir::BlockId(b as u32)) {
            order.push(b);
        }
    }
    let mut changed = true;
    while changed {
        changed = false;
        for &b in &order {
            let block = &f.blocks[b];
            let base = first_id[b];
            for pos in (0..block.insts.len()).rev() {
                let inst = &block.insts[pos];
                let id = base + pos;
                let mut out = if pos + 1 < block.insts.len() {
                    live_in[id + 1].clone()
                } else {
                    let mut out = ValueSet::new();
                    for s in &cfg.succs[b] {
                        let sb = &f.blocks[s.index()];
                        if !sb.insts.is_empty() {
                            out.extend(live_in[first_id[s.index()]].iter().copied());
                        }
                        for phi in &sb.insts[..sb.phi_count()] {
                            if let Op::Phi { incoming } = &phi.op {
                                for (o, from) in incoming {
                                    if from.index() == b {
                                        if let Some(v) = o.as_value() {
                                            out.insert(v);
                                        }
                                    }
                                }
                            }
                        }
                    }
                    out
                };
                let mut inn = out.clone();
                if let Some(r) = inst.result {
                    inn.remove(&r);
                }
                if !matches!(inst.op, Op::Phi { .. }) {
                    inn.extend(inst.op.used_values());
                }
                if inn != live_in[id] {
                    live_in[id] = inn;
                    changed = true;
                }
                if out != live_out[id] {
                    std::mem::swap(&mut live_out[id], &mut out);
                    changed = true;
                }
            }
        }
    }
    LivenessMap { live_in, live_out }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mir::parse_module;

    fn names(f: &Function, s: &ValueSet) -> Vec<String> {
        s.iter().map(|v| f.value_name(*v).to_string()).collect()
    }

    #[test]
    fn straight_line() {
        let m = parse_module(
            "fn main() -> i64 { e:\n %a = const i64 1\n %b = add %a, 1\n ret %b\n}",
        )
        .unwrap();
        let f = &m.functions[0];
        let lm = compute_liveness(f);
        assert_eq!(names(f, &lm.live_in[1]), vec!["a"]);
        assert!(names(f, &lm.live_out[1]) == vec!["b"]);
        assert_eq!(names(f, &lm.live_in[2]), vec!["b"]);
        assert!(lm.live_out[2].is_empty());
    }

    #[test]
    fn phi_uses_live_on_edges_only() {
        let m = parse_module(
            "fn main(%n: i64) {
entry:
  br loop
loop:
  %i = phi i64 [0, entry], [%i.next, loop]
  %i.next = add %i, 1
  %c = icmp lt %i.next, %n
  condbr %c, loop, exit
exit:
  ret
}",
        )
        .unwrap();
        let f = &m.functions[0];
        let lm = compute_liveness(f);
        // At the phi, only the loop bound is live in; i.next flows in on the
        // back edge but is not live into the header.
        assert_eq!(names(f, &lm.live_in[1]), vec!["n"]);
        assert_eq!(names(f, &lm.live_out[4]), vec!["n", "i.next"]);
        assert_eq!(names(f, &lm.live_in[5]), Vec::<String>::new());
    }

    #[test]
    fn fixpoint_is_stable() {
        let m = parse_module(
            "fn main(%n: i64) -> i64 {
entry:
  %z = const i64 3
  br loop
loop:
  %i = phi i64 [0, entry], [%i.next, loop]
  %i.next = add %i, %z
  %c = icmp lt %i.next, %n
  condbr %c, loop, exit
exit:
  ret %i
}",
        )
        .unwrap();
        let f = &m.functions[0];
        let a = compute_liveness(f);
        let b = compute_liveness(f);
        assert_eq!(a, b);
        for id in 0..f.num_insts() {
            let inst = f.inst(InstId(id as u32));
            let mut expect = a.live_out[id].clone();
            if let Some(r) = inst.result {
                expect.remove(&r);
            }
            if !matches!(inst.op, Op::Phi { .. }) {
                expect.extend(inst.op.used_values());
            }
            assert_eq!(expect, a.live_in[id]);
        }
    }
}
