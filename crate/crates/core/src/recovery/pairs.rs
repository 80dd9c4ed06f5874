use crate::analysis::scev::{address_closure, header_ivs, operand_closure, phi_init_next};
use crate::analysis::{compute_liveness, find_loops, LivenessMap, LoopInfo, ScevExpr};
use crate::mir::{BlockId, Function, Module, Op, Operand, ValueId};

/// Two induction phis of one loop that advance in lockstep, so either can
/// be recomputed from the other.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IvPair {
    pub i: ValueId,
    pub k: ValueId,
    pub i0: ScevExpr,
    pub k0: ScevExpr,
    pub s_i: ScevExpr,
    pub s_k: ScevExpr,
    pub loop_header: BlockId,
}

impl IvPair {
    /// The member other than `v`, with its init and step, followed by the
    /// init and step of `v`.
    pub fn partner_of(&self, v: ValueId) -> Option<(ValueId, &ScevExpr, &ScevExpr, &ScevExpr, &ScevExpr)> {
        if v == self.i {
            Some((self.k, &self.k0, &self.s_k, &self.i0, &self.s_i))
        } else if v == self.k {
            Some((self.i, &self.i0, &self.s_i, &self.k0, &self.s_k))
        } else {
            None
        }
    }

    pub fn contains(&self, v: ValueId) -> bool {
        v == self.i || v == self.k
    }
}

/// Whether every value in `e` can be read anywhere inside `l`: arguments,
/// values live around the back edge, and reloads of checkpoint slots.
pub(crate) fn resolvable(e: &ScevExpr, f: &Function, l: &LoopInfo, lm: &LivenessMap) -> bool {
    let latch_term = f.block(l.latch).terminator().unwrap().id;
    e.values().into_iter().all(|v| {
        f.is_param(v)
            || lm.is_live_out(latch_term, v)
            || is_checkpoint_reload(f, v).is_some()
    })
}

/// The slot `v` was reloaded from, if `v` is a load from an `alloc`.
pub fn is_checkpoint_reload(f: &Function, v: ValueId) -> Option<ValueId> {
    match f.def_inst(v)?.op {
        Op::Load { addr: Operand::Value(s) } => {
            matches!(f.def_inst(s)?.op, Op::Alloc).then_some(s)
        }
        _ => None,
    }
}

/// Every pair of induction phis of `l` that are independent of each other,
/// never combined into one address, and have resolvable inits and steps.
pub fn pair_induction_variables(l: &LoopInfo, f: &Function, lm: &LivenessMap) -> Vec<IvPair> {
    let mut ivs = header_ivs(l, f);
    ivs.retain(|iv| {
        let phi = f.def_inst(iv.value).unwrap();
        phi_init_next(phi, l).is_some()
            && resolvable(&iv.init, f, l, lm)
            && resolvable(&iv.step, f, l, lm)
    });
    ivs.sort_by_key(|iv| iv.value);
    let closures: Vec<Vec<ValueId>> = ivs
        .iter()
        .map(|iv| {
            let mut out = Vec::new();
            operand_closure(f, iv.value, &mut out);
            out
        })
        .collect();
    let addresses: Vec<Vec<ValueId>> = f.memory_accesses().map(|m| address_closure(f, m.id)).collect();
    let mut pairs = Vec::new();
    for a in 0..ivs.len() {
        for b in a + 1..ivs.len() {
            let (i, k) = (ivs[a].value, ivs[b].value);
            let dependent = closures[a].contains(&k) || closures[b].contains(&i);
            let co_addressed = addresses.iter().any(|c| c.contains(&i) && c.contains(&k));
            if dependent || co_addressed {
                continue;
            }
            pairs.push(IvPair {
                i,
                k,
                i0: ivs[a].init.clone(),
                k0: ivs[b].init.clone(),
                s_i: ivs[a].step.clone(),
                s_k: ivs[b].step.clone(),
                loop_header: l.header,
            });
        }
    }
    pairs
}

/// All pairs of one function, loop by loop.
pub fn function_pairs(f: &Function) -> Vec<IvPair> {
    let lm = compute_liveness(f);
    find_loops(f)
        .iter()
        .flat_map(|l| pair_induction_variables(l, f, &lm))
        .collect()
}

/// Number of loops, and of induction phis that belong to at least one pair.
pub fn count_recoverable_ivs(m: &Module) -> (usize, usize) {
    let mut loops = 0;
    let mut ivs = 0;
    for f in &m.functions {
        loops += find_loops(f).len();
        let mut members: Vec<ValueId> = function_pairs(f).iter().flat_map(|p| [p.i, p.k]).collect();
        members.sort();
        members.dedup();
        ivs += members.len();
    }
    (loops, ivs)
}

/// `(partner - partner0) / s_partner * s_target + target0`: the value an
/// induction variable should hold given its partner. `None` when the partner
/// is not a whole number of steps from its start.
pub fn recover_iv(partner: i64, partner0: i64, s_partner: i64, target0: i64, s_target: i64) -> Option<i64> {
    let delta = partner.wrapping_sub(partner0);
    if s_partner == 0 || delta.checked_rem(s_partner)? != 0 {
        return None;
    }
    let n = delta.checked_div(s_partner)?;
    Some(n.wrapping_mul(s_target).wrapping_add(target0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{by_name, KERNELS};
    use crate::mir::parse_module;
    use crate::transforms::{run_pipeline, Pass};

    #[test]
    fn recover_iv_examples() {
        let c = 5;
        assert_eq!(recover_iv(7 * c, 0, c, 0, 1), Some(7));
        assert_eq!(recover_iv(100, 100, 4, 3, 2), Some(3));
        assert_eq!(recover_iv(128, 100, 4, 3, 2), Some(17));
        assert_eq!(recover_iv(129, 100, 4, 3, 2), None);
        assert_eq!(recover_iv(5, 0, 0, 0, 1), None);
    }

    #[test]
    fn recoverable_iv_counts_before_and_after() {
        let expected = [
            ("dot", 0, 0),
            ("saxpy", 0, 0),
            ("saxpy_unrolled", 0, 2),
            ("stencil", 0, 3),
            ("gather2d", 0, 3),
            ("pointer_walk", 0, 2),
            ("sr_showcase", 2, 3),
        ];
        assert_eq!(expected.len(), KERNELS.len());
        for (name, before, after) in expected {
            let k = by_name(name).unwrap();
            let m = k.module().unwrap();
            let mut passes = k.classic_passes();
            passes.extend([Pass::Icp, Pass::MicroCheckpoint]);
            let (t, _) = run_pipeline(&m, &passes).unwrap();
            assert_eq!(count_recoverable_ivs(&m).1, before, "{name} before");
            assert_eq!(count_recoverable_ivs(&t).1, after, "{name} after");
        }
    }

    fn pairs_of(src: &str) -> Vec<(String, String)> {
        let m = parse_module(src).unwrap();
        let f = &m.functions[0];
        function_pairs(f)
            .iter()
            .map(|p| (f.value_name(p.i).to_string(), f.value_name(p.k).to_string()))
            .collect()
    }

    const LOOP: &str = "global y[128] : i64
fn main(%n: i64, %c: i64) {
entry:
  br loop
loop:
  %i = phi i64 [0, entry], [%i.next, loop]
  %k = phi i64 [0, entry], [%k.next, loop]
  BODY
  %i.next = add %i, 1
  %k.next = add %k, %c
  %t = icmp lt %i.next, %n
  condbr %t, loop, exit
exit:
  ret
}";

    #[test]
    fn strength_reduced_pair() {
        let src = LOOP.replace("BODY", "%p = addr @y, %k, 8, 0\n  store %p, %i");
        assert_eq!(pairs_of(&src), [("i".to_string(), "k".to_string())]);
    }

    #[test]
    fn co_addressed_ivs_are_not_paired() {
        let src = LOOP.replace("BODY", "%s = add %i, %k\n  %p = addr @y, %s, 8, 0\n  store %p, 1");
        assert!(pairs_of(&src).is_empty());
    }

    #[test]
    fn single_iv_has_no_pair() {
        let src = LOOP
            .replace("  %k = phi i64 [0, entry], [%k.next, loop]\n", "")
            .replace("  %k.next = add %k, %c\n", "")
            .replace("BODY", "%p = addr @y, %i, 8, 0\n  store %p, 1");
        assert!(pairs_of(&src).is_empty());
    }

    #[test]
    fn dependent_ivs_are_not_paired() {
        let src = LOOP
            .replace("%k.next = add %k, %c", "%k.next = add %i.next, %c")
            .replace("BODY", "%p = addr @y, %k, 8, 0\n  store %p, 1");
        assert!(pairs_of(&src).is_empty());
    }
}
