//! A miniature SSA IR.
//!
//! Programs are made of functions, each holding an ordered list of basic
//! blocks. Every instruction defines at most one value; values carry a fixed
//! [`Kind`]. Instruction ids are dense per function and follow textual order,
//! so they are stable across printing and re-parsing.
//!
//! The textual grammar is documented in `docs/ir.md` at the repository root.

mod parse;
mod print;
mod validate;

use std::collections::HashSet;
use std::fmt;

pub use parse::{parse_module, parse_module_named, ParseError, ParseErrorKind};
pub use print::{inst_text, print_module};
pub use validate::{validate, Violation};

/// Index of a function inside a [`Module`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FuncId(pub u32);

/// Index of a global array inside a [`Module`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GlobalId(pub u32);

/// Index of a block inside a [`Function`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockId(pub u32);

/// Dense per-function instruction index, in textual order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InstId(pub u32);

/// Index into a function's value table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ValueId(pub u32);

impl BlockId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl InstId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl ValueId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for InstId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kind {
    I64,
    F64,
    Addr,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::I64 => "i64",
            Kind::F64 => "f64",
            Kind::Addr => "addr",
        }
    }

    pub fn from_name(s: &str) -> Option<Kind> {
        match s {
            "i64" => Some(Kind::I64),
            "f64" => Some(Kind::F64),
            "addr" => Some(Kind::Addr),
            _ => None,
        }
    }

    /// Integer-like kinds share two's-complement arithmetic.
    pub fn is_integral(self) -> bool {
        matches!(self, Kind::I64 | Kind::Addr)
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// All memory cells and values are 8 bytes wide.
pub const ELEM_SIZE: u64 = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Global {
    pub name: String,
    pub count: u64,
    pub kind: Kind,
}

/// Source position attached to every memory-access instruction; the key used
/// to find its recovery kernel.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DebugTag {
    pub file: String,
    pub line: u32,
    pub column: u32,
}

impl DebugTag {
    pub fn key(&self) -> String {
        format!("{}:{}:{}", self.file, self.line, self.column)
    }
}

impl fmt::Display for DebugTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.file, self.line, self.column)
    }
}

/// An instruction operand.
///
/// Floats are stored as their IEEE bit pattern so operands compare exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Value(ValueId),
    Global(GlobalId),
    Int(i64),
    Float(u64),
}

impl Operand {
    pub fn float(v: f64) -> Operand {
        Operand::Float(v.to_bits())
    }

    pub fn as_value(&self) -> Option<ValueId> {
        match self {
            Operand::Value(v) => Some(*v),
            _ => None,
        }
    }

    pub fn is_literal(&self) -> bool {
        matches!(self, Operand::Int(_) | Operand::Float(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Shl,
}

impl BinOp {
    pub const ALL: [BinOp; 5] = [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div, BinOp::Shl];

    pub fn as_str(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
            BinOp::Shl => "shl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CmpPred {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpPred {
    pub const ALL: [CmpPred; 6] = [
        CmpPred::Eq,
        CmpPred::Ne,
        CmpPred::Lt,
        CmpPred::Le,
        CmpPred::Gt,
        CmpPred::Ge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CmpPred::Eq => "eq",
            CmpPred::Ne => "ne",
            CmpPred::Lt => "lt",
            CmpPred::Le => "le",
            CmpPred::Gt => "gt",
            CmpPred::Ge => "ge",
        }
    }
}

/// Intrinsics callable from any function. All are pure.
pub const INTRINSICS: &[(&str, Kind, usize)] = &[("sqrt", Kind::F64, 1), ("fabs", Kind::F64, 1)];

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Const(Operand),
    Bin {
        op: BinOp,
        lhs: Operand,
        rhs: Operand,
    },
    Icmp {
        pred: CmpPred,
        lhs: Operand,
        rhs: Operand,
    },
    Phi {
        incoming: Vec<(Operand, BlockId)>,
    },
    /// `base + index * scale + offset`, in bytes.
    Addr {
        base: Operand,
        index: Operand,
        scale: i64,
        offset: i64,
    },
    Load {
        addr: Operand,
    },
    Store {
        addr: Operand,
        value: Operand,
    },
    Alloc,
    Call {
        callee: String,
        args: Vec<Operand>,
    },
    Br {
        target: BlockId,
    },
    CondBr {
        cond: Operand,
        then_block: BlockId,
        else_block: BlockId,
    },
    Ret {
        value: Option<Operand>,
    },
}

impl Op {
    pub fn opcode(&self) -> &'static str {
        match self {
            Op::Const(_) => "const",
            Op::Bin { op, .. } => op.as_str(),
            Op::Icmp { .. } => "icmp",
            Op::Phi { .. } => "phi",
            Op::Addr { .. } => "addr",
            Op::Load { .. } => "load",
            Op::Store { .. } => "store",
            Op::Alloc => "alloc",
            Op::Call { .. } => "call",
            Op::Br { .. } => "br",
            Op::CondBr { .. } => "condbr",
            Op::Ret { .. } => "ret",
        }
    }

    pub fn is_terminator(&self) -> bool {
        matches!(self, Op::Br { .. } | Op::CondBr { .. } | Op::Ret { .. })
    }

    pub fn is_memory_access(&self) -> bool {
        matches!(self, Op::Load { .. } | Op::Store { .. })
    }

    /// Instructions that can be re-executed from their operands alone.
    pub fn is_pure(&self) -> bool {
        matches!(
            self,
            Op::Const(_) | Op::Bin { .. } | Op::Icmp { .. } | Op::Addr { .. } | Op::Call { .. }
        )
    }

    /// The address operand of a load or store.
    pub fn address_operand(&self) -> Option<Operand> {
        match self {
            Op::Load { addr } | Op::Store { addr, .. } => Some(*addr),
            _ => None,
        }
    }

    pub fn operands(&self) -> Vec<Operand> {
        match self {
            Op::Const(c) => vec![*c],
            Op::Bin { lhs, rhs, .. } | Op::Icmp { lhs, rhs, .. } => vec![*lhs, *rhs],
            Op::Phi { incoming } => incoming.iter().map(|(o, _)| *o).collect(),
            Op::Addr { base, index, .. } => vec![*base, *index],
            Op::Load { addr } => vec![*addr],
            Op::Store { addr, value } => vec![*addr, *value],
            Op::Alloc | Op::Br { .. } => vec![],
            Op::Call { args, .. } => args.clone(),
            Op::CondBr { cond, .. } => vec![*cond],
            Op::Ret { value } => value.iter().copied().collect(),
        }
    }

    pub fn operands_mut(&mut self) -> Vec<&mut Operand> {
        match self {
            Op::Const(c) => vec![c],
            Op::Bin { lhs, rhs, .. } | Op::Icmp { lhs, rhs, .. } => vec![lhs, rhs],
            Op::Phi { incoming } => incoming.iter_mut().map(|(o, _)| o).collect(),
            Op::Addr { base, index, .. } => vec![base, index],
            Op::Load { addr } => vec![addr],
            Op::Store { addr, value } => vec![addr, value],
            Op::Alloc | Op::Br { .. } => vec![],
            Op::Call { args, .. } => args.iter_mut().collect(),
            Op::CondBr { cond, .. } => vec![cond],
            Op::Ret { value } => value.iter_mut().collect(),
        }
    }

    /// Values read by this instruction.
    pub fn used_values(&self) -> impl Iterator<Item = ValueId> {
        self.operands().into_iter().filter_map(|o| o.as_value())
    }

    pub fn successors(&self) -> Vec<BlockId> {
        match self {
            Op::Br { target } => vec![*target],
            Op::CondBr {
                then_block,
                else_block,
                ..
            } => {
                if then_block == else_block {
                    vec![*then_block]
                } else {
                    vec![*then_block, *else_block]
                }
            }
            _ => vec![],
        }
    }

    pub fn successors_mut(&mut self) -> Vec<&mut BlockId> {
        match self {
            Op::Br { target } => vec![target],
            Op::CondBr {
                then_block,
                else_block,
                ..
            } => vec![then_block, else_block],
            _ => vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instruction {
    pub id: InstId,
    pub result: Option<ValueId>,
    pub op: Op,
    pub debug: Option<DebugTag>,
}

impl Instruction {
    pub fn new(result: Option<ValueId>, op: Op) -> Instruction {
        Instruction {
            id: InstId(u32::MAX),
            result,
            op,
            debug: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub label: String,
    pub insts: Vec<Instruction>,
}

impl Block {
    pub fn terminator(&self) -> Option<&Instruction> {
        self.insts.last().filter(|i| i.op.is_terminator())
    }

    pub fn terminator_mut(&mut self) -> Option<&mut Instruction> {
        self.insts.last_mut().filter(|i| i.op.is_terminator())
    }

    pub fn successors(&self) -> Vec<BlockId> {
        self.terminator().map(|t| t.op.successors()).unwrap_or_default()
    }

    /// Number of leading phi instructions.
    pub fn phi_count(&self) -> usize {
        self.insts
            .iter()
            .take_while(|i| matches!(i.op, Op::Phi { .. }))
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueDef {
    Param(usize),
    Inst(InstId),
    /// Left behind by a transform that deleted the definition; removed by
    /// [`Function::compact`].
    Detached,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueData {
    pub name: String,
    pub kind: Kind,
    pub def: ValueDef,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Function {
    pub name: String,
    /// Declared free of side effects; the only user functions callable with
    /// `call`.
    pub pure_fn: bool,
    pub params: Vec<ValueId>,
    pub ret: Option<Kind>,
    pub values: Vec<ValueData>,
    /// `blocks[0]` is the entry block.
    pub blocks: Vec<Block>,
}

impl Function {
    pub fn new(name: &str) -> Function {
        Function {
            name: name.to_string(),
            pure_fn: false,
            params: Vec::new(),
            ret: None,
            values: Vec::new(),
            blocks: Vec::new(),
        }
    }

    pub fn entry(&self) -> BlockId {
        BlockId(0)
    }

    pub fn block(&self, b: BlockId) -> &Block {
        &self.blocks[b.index()]
    }

    pub fn block_mut(&mut self, b: BlockId) -> &mut Block {
        &mut self.blocks[b.index()]
    }

    pub fn block_ids(&self) -> impl Iterator<Item = BlockId> {
        (0..self.blocks.len() as u32).map(BlockId)
    }

    pub fn block_by_label(&self, label: &str) -> Option<BlockId> {
        self.blocks
            .iter()
            .position(|b| b.label == label)
            .map(|i| BlockId(i as u32))
    }

    pub fn value(&self, v: ValueId) -> &ValueData {
        &self.values[v.index()]
    }

    pub fn value_name(&self, v: ValueId) -> &str {
        &self.values[v.index()].name
    }

    pub fn value_by_name(&self, name: &str) -> Option<ValueId> {
        self.values
            .iter()
            .position(|d| d.name == name && d.def != ValueDef::Detached)
            .map(|i| ValueId(i as u32))
    }

    pub fn num_insts(&self) -> usize {
        self.blocks.iter().map(|b| b.insts.len()).sum()
    }

    pub fn insts(&self) -> impl Iterator<Item = &Instruction> {
        self.blocks.iter().flat_map(|b| b.insts.iter())
    }

    /// (block, position) of every instruction, indexed by [`InstId`].
    pub fn positions(&self) -> Vec<(BlockId, usize)> {
        let mut out = Vec::with_capacity(self.num_insts());
        for (b, block) in self.blocks.iter().enumerate() {
            for i in 0..block.insts.len() {
                out.push((BlockId(b as u32), i));
            }
        }
        out
    }

    /// Looks up an instruction by id. Assumes ids are current (see
    /// [`Function::renumber`]).
    pub fn inst(&self, id: InstId) -> &Instruction {
        let mut remaining = id.index();
        for block in &self.blocks {
            if remaining < block.insts.len() {
                return &block.insts[remaining];
            }
            remaining -= block.insts.len();
        }
        panic!("instruction {id} out of range in {}", self.name)
    }

    pub fn block_of(&self, id: InstId) -> BlockId {
        let mut remaining = id.index();
        for (b, block) in self.blocks.iter().enumerate() {
            if remaining < block.insts.len() {
                return BlockId(b as u32);
            }
            remaining -= block.insts.len();
        }
        panic!("instruction {id} out of range in {}", self.name)
    }

    /// The instruction defining `v`, if any.
    pub fn def_inst(&self, v: ValueId) -> Option<&Instruction> {
        match self.values[v.index()].def {
            ValueDef::Inst(id) => Some(self.inst(id)),
            _ => None,
        }
    }

    pub fn is_param(&self, v: ValueId) -> bool {
        matches!(self.values[v.index()].def, ValueDef::Param(_))
    }

    pub fn add_value(&mut self, name: String, kind: Kind) -> ValueId {
        let id = ValueId(self.values.len() as u32);
        self.values.push(ValueData {
            name,
            kind,
            def: ValueDef::Detached,
        });
        id
    }

    /// A value name not yet used in this function, derived from `base`.
    pub fn fresh_name(&self, base: &str) -> String {
        let taken: HashSet<&str> = self.values.iter().map(|v| v.name.as_str()).collect();
        if !taken.contains(base) {
            return base.to_string();
        }
        (1..)
            .map(|n| format!("{base}.{n}"))
            .find(|c| !taken.contains(c.as_str()))
            .unwrap()
    }

    pub fn fresh_label(&self, base: &str) -> String {
        let taken: HashSet<&str> = self.blocks.iter().map(|b| b.label.as_str()).collect();
        if !taken.contains(base) {
            return base.to_string();
        }
        (1..)
            .map(|n| format!("{base}.{n}"))
            .find(|c| !taken.contains(c.as_str()))
            .unwrap()
    }

    /// Reassigns dense instruction ids in textual order and refreshes value
    /// definitions. Values whose defining instruction disappeared become
    /// [`ValueDef::Detached`].
    pub fn renumber(&mut self) {
        for v in self.values.iter_mut() {
            if matches!(v.def, ValueDef::Inst(_)) {
                v.def = ValueDef::Detached;
            }
        }
        let mut next = 0u32;
        for block in self.blocks.iter_mut() {
            for inst in block.insts.iter_mut() {
                inst.id = InstId(next);
                if let Some(r) = inst.result {
                    self.values[r.index()].def = ValueDef::Inst(InstId(next));
                }
                next += 1;
            }
        }
        for (i, p) in self.params.iter().enumerate() {
            self.values[p.index()].def = ValueDef::Param(i);
        }
    }

    /// Renumbers, then rebuilds the value table in canonical order (params,
    /// then results in textual order), dropping detached values. After this
    /// the function is structurally identical to what the parser produces
    /// from its printed form.
    pub fn compact(&mut self) {
        self.renumber();
        let mut remap = vec![None; self.values.len()];
        let mut values = Vec::with_capacity(self.values.len());
        for p in &self.params {
            remap[p.index()] = Some(ValueId(values.len() as u32));
            values.push(self.values[p.index()].clone());
        }
        for block in &self.blocks {
            for inst in &block.insts {
                if let Some(r) = inst.result {
                    remap[r.index()] = Some(ValueId(values.len() as u32));
                    values.push(self.values[r.index()].clone());
                }
            }
        }
        let map = |v: ValueId| remap[v.index()].expect("use of a detached value");
        for p in self.params.iter_mut() {
            *p = map(*p);
        }
        for block in self.blocks.iter_mut() {
            for inst in block.insts.iter_mut() {
                if let Some(r) = inst.result.as_mut() {
                    *r = map(*r);
                }
                for o in inst.op.operands_mut() {
                    if let Operand::Value(v) = o {
                        *v = map(*v);
                    }
                }
            }
        }
        self.values = values;
    }

    /// Users of each value, indexed by [`ValueId`].
    pub fn users(&self) -> Vec<Vec<InstId>> {
        let mut users = vec![Vec::new(); self.values.len()];
        for inst in self.insts() {
            for v in inst.op.used_values() {
                if !users[v.index()].contains(&inst.id) {
                    users[v.index()].push(inst.id);
                }
            }
        }
        users
    }

    /// Rewrites every use of `from` into `to`.
    pub fn replace_all_uses(&mut self, from: ValueId, to: Operand) {
        for block in self.blocks.iter_mut() {
            for inst in block.insts.iter_mut() {
                for o in inst.op.operands_mut() {
                    if *o == Operand::Value(from) {
                        *o = to;
                    }
                }
            }
        }
    }

    /// Predecessor lists, in block order.
    pub fn predecessors(&self) -> Vec<Vec<BlockId>> {
        let mut preds = vec![Vec::new(); self.blocks.len()];
        for (b, block) in self.blocks.iter().enumerate() {
            for s in block.successors() {
                if !preds[s.index()].contains(&BlockId(b as u32)) {
                    preds[s.index()].push(BlockId(b as u32));
                }
            }
        }
        preds
    }

    pub fn memory_accesses(&self) -> impl Iterator<Item = &Instruction> {
        self.insts().filter(|i| i.op.is_memory_access())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Module {
    /// Source file name; used for synthesized debug tags.
    pub source: String,
    pub globals: Vec<Global>,
    pub functions: Vec<Function>,
}

impl Module {
    pub fn new(source: &str) -> Module {
        Module {
            source: source.to_string(),
            globals: Vec::new(),
            functions: Vec::new(),
        }
    }

    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn function_id(&self, name: &str) -> Option<FuncId> {
        self.functions
            .iter()
            .position(|f| f.name == name)
            .map(|i| FuncId(i as u32))
    }

    pub fn func(&self, id: FuncId) -> &Function {
        &self.functions[id.0 as usize]
    }

    pub fn global(&self, id: GlobalId) -> &Global {
        &self.globals[id.0 as usize]
    }

    pub fn global_id(&self, name: &str) -> Option<GlobalId> {
        self.globals
            .iter()
            .position(|g| g.name == name)
            .map(|i| GlobalId(i as u32))
    }

    /// A debug tag no memory access in the module uses yet.
    pub fn fresh_debug_tag(&self) -> DebugTag {
        let max_line = self
            .functions
            .iter()
            .flat_map(|f| f.insts())
            .filter_map(|i| i.debug.as_ref())
            .map(|d| d.line)
            .max()
            .unwrap_or(0);
        DebugTag {
            file: self.source.clone(),
            line: max_line + 1,
            column: 1,
        }
    }

    /// Gives every untagged memory access a fresh tag.
    pub fn tag_memory_accesses(&mut self) {
        let mut next = self.fresh_debug_tag();
        for f in 0..self.functions.len() {
            for b in 0..self.functions[f].blocks.len() {
                for i in 0..self.functions[f].blocks[b].insts.len() {
                    let inst = &mut self.functions[f].blocks[b].insts[i];
                    if inst.op.is_memory_access() && inst.debug.is_none() {
                        inst.debug = Some(next.clone());
                        next.line += 1;
                    }
                }
            }
        }
    }
}
