//! Loop transformations: the two classic passes that create semi-redundant
//! induction values (strength reduction, unrolling) and the two passes that
//! make them usable for recovery (independent compute promotion,
//! micro-checkpointing).

mod dce;
mod icp;
mod micro_checkpoint;
mod strength_reduce;
mod unroll;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub use dce::dce;
pub use icp::icp;
pub use micro_checkpoint::micro_checkpoint;
pub use strength_reduce::strength_reduce;
pub use unroll::unroll;

use crate::analysis::{find_loops, AddRecInfo, LoopInfo};
use crate::mir::{
    validate, BinOp, Block, BlockId, Function, Instruction, Module, Op, Operand, ValueId, Violation,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Pass {
    StrengthReduce,
    Unroll(u32),
    Icp,
    MicroCheckpoint,
}

impl Pass {
    fn rank(self) -> u8 {
        match self {
            Pass::StrengthReduce => 0,
            Pass::Unroll(_) => 1,
            Pass::Icp => 2,
            Pass::MicroCheckpoint => 3,
        }
    }

    /// Parses a comma-separated list such as `sr,unroll:2,icp,mck`.
    pub fn parse_list(s: &str) -> Result<Vec<Pass>, TransformError> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl fmt::Display for Pass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pass::StrengthReduce => f.write_str("sr"),
            Pass::Unroll(k) => write!(f, "unroll:{k}"),
            Pass::Icp => f.write_str("icp"),
            Pass::MicroCheckpoint => f.write_str("mck"),
        }
    }
}

impl FromStr for Pass {
    type Err = TransformError;

    fn from_str(s: &str) -> Result<Pass, TransformError> {
        match s {
            "sr" => Ok(Pass::StrengthReduce),
            "icp" => Ok(Pass::Icp),
            "mck" => Ok(Pass::MicroCheckpoint),
            _ => {
                let factor = s
                    .strip_prefix("unroll:")
                    .and_then(|f| f.parse::<u32>().ok())
                    .ok_or_else(|| TransformError::UnknownPass(s.to_string()))?;
                if ![1, 2, 4].contains(&factor) {
                    return Err(TransformError::BadFactor(factor));
                }
                Ok(Pass::Unroll(factor))
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("unknown pass `{0}` (expected sr, unroll:N, icp or mck)")]
    UnknownPass(String),
    #[error("unroll factor must be 1, 2 or 4, not {0}")]
    BadFactor(u32),
    #[error("loop at {0} has several latches")]
    MultipleLatches(String),
    #[error("loop at {header} cannot be unrolled: {reason}")]
    Unsupported { header: String, reason: String },
    #[error("pass {pass} produced an invalid module: {}", .violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid {
        pass: Pass,
        violations: Vec<Violation>,
    },
}

/// What one pass did to one loop.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TransformReport {
    pub pass: String,
    pub function: String,
    /// Label of the loop header.
    pub loop_header: String,
    pub created_values: Vec<String>,
    pub replaced_values: Vec<(String, String)>,
    pub checkpoint_slots: Vec<String>,
}

impl TransformReport {
    pub(crate) fn new(pass: &str, f: &Function, l: &LoopInfo) -> TransformReport {
        TransformReport {
            pass: pass.to_string(),
            function: f.name.clone(),
            loop_header: f.block(l.header).label.clone(),
            ..Default::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.created_values.is_empty()
            && self.replaced_values.is_empty()
            && self.checkpoint_slots.is_empty()
    }
}

impl fmt::Display for TransformReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "pass={} function={} loop={} created=[{}] replaced=[{}] slots=[{}]",
            self.pass,
            self.function,
            self.loop_header,
            self.created_values.join(","),
            self.replaced_values
                .iter()
                .map(|(a, b)| format!("{a}->{b}"))
                .collect::<Vec<_>>()
                .join(","),
            self.checkpoint_slots.join(",")
        )
    }
}

/// Applies `passes` in the fixed order sr, unroll, icp, mck (duplicates are
/// applied once), returning the transformed module and one report per
/// transformed loop.
pub fn run_pipeline(
    m: &Module,
    passes: &[Pass],
) -> Result<(Module, Vec<TransformReport>), TransformError> {
    let mut ordered: Vec<Pass> = passes.to_vec();
    ordered.sort_by_key(|p| p.rank());
    ordered.dedup_by_key(|p| p.rank());
    let mut out = m.clone();
    let mut reports = Vec::new();
    for pass in ordered {
        reports.extend(apply_pass(&mut out, pass)?);
    }
    Ok((out, reports))
}

/// Applies one pass to every function of `m`.
pub fn apply_pass(m: &mut Module, pass: Pass) -> Result<Vec<TransformReport>, TransformError> {
    let mut reports = Vec::new();
    for fi in 0..m.functions.len() {
        let f = &mut m.functions[fi];
        let loops = find_loops(f);
        let headers: Vec<String> = loops
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                // Only innermost loops are unrolled or promoted.
                !matches!(pass, Pass::Unroll(_) | Pass::Icp)
                    || !loops.iter().any(|o| o.parent == Some(*i))
            })
            .map(|(_, l)| f.block(l.header).label.clone())
            .collect();
        for h in headers {
            let Some(l) = find_loops(f)
                .into_iter()
                .find(|l| f.block(l.header).label == h)
            else {
                continue;
            };
            let report = match pass {
                Pass::StrengthReduce => strength_reduce(f, &l),
                Pass::Unroll(k) => unroll(f, &l, k)?,
                Pass::Icp => icp(f, &l),
                Pass::MicroCheckpoint => micro_checkpoint(f, &l),
            };
            f.renumber();
            if !report.is_empty() {
                reports.push(report);
            }
        }
        f.compact();
    }
    m.tag_memory_accesses();
    let violations = validate(m);
    if !violations.is_empty() {
        return Err(TransformError::Invalid { pass, violations });
    }
    Ok(reports)
}

/// Inserts `block` at index `at`, shifting later blocks and rewriting every
/// branch and phi that referred to them.
pub(crate) fn insert_block(f: &mut Function, at: usize, block: Block) -> BlockId {
    let shift = |b: &mut BlockId| {
        if b.index() >= at {
            b.0 += 1;
        }
    };
    for blk in f.blocks.iter_mut() {
        for inst in blk.insts.iter_mut() {
            for s in inst.op.successors_mut() {
                shift(s);
            }
            if let Op::Phi { incoming } = &mut inst.op {
                for (_, b) in incoming.iter_mut() {
                    shift(b);
                }
            }
        }
    }
    f.blocks.insert(at, block);
    BlockId(at as u32)
}

/// Replaces the induction value `v` (described by `rec`) with a new header
/// phi stepped at the latch, then deletes whatever became dead. Returns the
/// names of the phi and its increment.
pub(crate) fn promote(
    f: &mut Function,
    l: &LoopInfo,
    pre: BlockId,
    latch: BlockId,
    v: ValueId,
    rec: &AddRecInfo,
    suffix: &str,
) -> (String, String) {
    let name = f.value_name(v).to_string();
    let kind = f.value(v).kind;
    let at = f.block(pre).insts.len() - 1;
    let (init, n) = rec.init.materialize(f, pre, at, &format!("{name}.init"));
    let (step, _) = rec.step.materialize(f, pre, at + n, &format!("{name}.step"));
    let phi_name = f.fresh_name(&format!("{name}.{suffix}"));
    let phi = f.add_value(phi_name.clone(), kind);
    let next_name = f.fresh_name(&format!("{phi_name}.next"));
    let next = f.add_value(next_name.clone(), kind);
    let header = f.block_mut(l.header);
    let at = header.phi_count();
    let incoming = vec![(init, pre), (Operand::Value(next), latch)];
    header
        .insts
        .insert(at, Instruction::new(Some(phi), Op::Phi { incoming }));
    let inc = Op::Bin {
        op: BinOp::Add,
        lhs: Operand::Value(phi),
        rhs: step,
    };
    insert_before_terminator(f, latch, vec![Instruction::new(Some(next), inc)]);
    f.replace_all_uses(v, Operand::Value(phi));
    dce(f);
    (phi_name, next_name)
}

/// Inserts `insts` just before the terminator of `b`.
pub(crate) fn insert_before_terminator(f: &mut Function, b: BlockId, insts: Vec<Instruction>) {
    let block = f.block_mut(b);
    let at = block.insts.len() - 1;
    for (k, inst) in insts.into_iter().enumerate() {
        block.insts.insert(at + k, inst);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pass_lists() {
        assert_eq!(
            Pass::parse_list("mck,sr,unroll:2").unwrap(),
            vec![Pass::MicroCheckpoint, Pass::StrengthReduce, Pass::Unroll(2)]
        );
        assert!(Pass::parse_list("unroll:3").is_err());
        assert!(Pass::parse_list("licm").is_err());
        assert_eq!(Pass::Unroll(4).to_string(), "unroll:4");
    }

    #[test]
    fn full_pipeline_preserves_every_kernel() {
        use crate::vm::{run, Program, RunConfig};
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let all = Pass::parse_list("sr,unroll:2,icp,mck").unwrap();
        for k in crate::kernels::KERNELS {
            let original = Program::new(k.module().unwrap()).unwrap();
            let (m, reports) = run_pipeline(&k.module().unwrap(), &all).unwrap();
            assert!(!reports.is_empty(), "{}", k.name);
            let again = crate::mir::parse_module_named(&crate::mir::print_module(&m), &k.file_name());
            assert_eq!(again.unwrap(), m, "{}", k.name);
            let prog = Program::new(m).unwrap();
            for _ in 0..10 {
                let input = k.random_input(&mut rng);
                let a = run(&original, &input, RunConfig::default()).unwrap();
                let b = run(&prog, &input, RunConfig::default()).unwrap();
                assert_eq!(a.output, b.output, "{}", k.name);
            }
        }
    }
}
