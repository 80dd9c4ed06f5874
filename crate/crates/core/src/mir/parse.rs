use std::collections::{HashMap, HashSet};

use thiserror::Error;

use super::{
    BinOp, Block, BlockId, CmpPred, DebugTag, Function, Global, Instruction, Kind, Module, Op,
    Operand, ValueData, ValueDef, ValueId,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{line}:{column}: {kind}")]
pub struct ParseError {
    pub line: u32,
    pub column: u32,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("duplicate definition of `{0}`")]
    DuplicateDefinition(String),
    #[error("unknown opcode `{0}`")]
    UnknownOpcode(String),
    #[error("undefined name `{0}`")]
    Undefined(String),
    #[error("SSA violation: `{0}` used before its definition")]
    SsaViolation(String),
}

/// Parses IR text, tagging memory accesses with the file name `<input>`.
pub fn parse_module(text: &str) -> Result<Module, ParseError> {
    parse_module_named(text, "<input>")
}

/// Parses IR text; `source` names the file in synthesized debug tags.
pub fn parse_module_named(text: &str, source: &str) -> Result<Module, ParseError> {
    let tokens = lex(text)?;
    let mut p = Parser {
        toks: tokens,
        pos: 0,
    };
    let mut module = Module::new(source);
    let mut raw_funcs = Vec::new();
    while !p.at_end() {
        let t = p.peek().clone();
        match &t.tok {
            Tok::Ident(s) if s == "global" => {
                p.bump();
                let (name, _) = p.ident()?;
                p.expect(&Tok::LBracket)?;
                let count = p.int()?;
                if count <= 0 {
                    return Err(t.err(ParseErrorKind::Syntax("array length must be positive".into())));
                }
                p.expect(&Tok::RBracket)?;
                p.expect(&Tok::Colon)?;
                let kind = p.kind()?;
                if module.globals.iter().any(|g| g.name == name) {
                    return Err(t.err(ParseErrorKind::DuplicateDefinition(format!("@{name}"))));
                }
                module.globals.push(Global {
                    name,
                    count: count as u64,
                    kind,
                });
            }
            Tok::Ident(s) if s == "fn" || s == "pure" => {
                let f = p.function()?;
                if raw_funcs.iter().any(|g: &RawFunction| g.name == f.name) {
                    return Err(t.err(ParseErrorKind::DuplicateDefinition(f.name.clone())));
                }
                raw_funcs.push(f);
            }
            other => {
                return Err(t.err(ParseErrorKind::Syntax(format!(
                    "expected `global` or `fn`, found {}",
                    other.describe()
                ))))
            }
        }
    }
    let globals: HashMap<&str, usize> = module
        .globals
        .iter()
        .enumerate()
        .map(|(i, g)| (g.name.as_str(), i))
        .collect();
    let mut functions = Vec::new();
    for raw in raw_funcs {
        functions.push(resolve_function(raw, &globals, source)?);
    }
    module.functions = functions;
    Ok(module)
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Local(String),
    GlobalRef(String),
    Int(i64),
    Float(f64),
    Str(String),
    Dbg,
    LBrace,
    RBrace,
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Colon,
    Eq,
    Arrow,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Local(s) => format!("`%{s}`"),
            Tok::GlobalRef(s) => format!("`@{s}`"),
            Tok::Int(v) => format!("`{v}`"),
            Tok::Float(v) => format!("`{v:?}`"),
            Tok::Str(s) => format!("\"{s}\""),
            Tok::Dbg => "`!dbg`".into(),
            Tok::LBrace => "`{`".into(),
            Tok::RBrace => "`}`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::LBracket => "`[`".into(),
            Tok::RBracket => "`]`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Colon => "`:`".into(),
            Tok::Eq => "`=`".into(),
            Tok::Arrow => "`->`".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: u32,
    col: u32,
}

impl Token {
    fn err(&self, kind: ParseErrorKind) -> ParseError {
        ParseError {
            line: self.line,
            column: self.col,
            kind,
        }
    }
}

fn is_name_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.'
}

fn lex(text: &str) -> Result<Vec<Token>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1u32, 1u32);
    while i < chars.len() {
        let c = chars[i];
        let (tl, tc) = (line, col);
        let err = |msg: String| ParseError {
            line: tl,
            column: tc,
            kind: ParseErrorKind::Syntax(msg),
        };
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c == ';' {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        let tok = match c {
            '{' => Tok::LBrace,
            '}' => Tok::RBrace,
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            '[' => Tok::LBracket,
            ']' => Tok::RBracket,
            ',' => Tok::Comma,
            ':' => Tok::Colon,
            '=' => Tok::Eq,
            '-' if chars.get(i + 1) == Some(&'>') => {
                i += 1;
                Tok::Arrow
            }
            '%' | '@' => {
                i += 1;
                let s = i;
                while i < chars.len() && is_name_char(chars[i]) {
                    i += 1;
                }
                if s == i {
                    return Err(err(format!("expected a name after `{c}`")));
                }
                let name: String = chars[s..i].iter().collect();
                i -= 1;
                if c == '%' {
                    Tok::Local(name)
                } else {
                    Tok::GlobalRef(name)
                }
            }
            '!' => {
                let s = i + 1;
                let mut j = s;
                while j < chars.len() && chars[j].is_ascii_alphabetic() {
                    j += 1;
                }
                let word: String = chars[s..j].iter().collect();
                if word != "dbg" {
                    return Err(err(format!("unknown directive `!{word}`")));
                }
                i = j - 1;
                Tok::Dbg
            }
            '"' => {
                let mut j = i + 1;
                while j < chars.len() && chars[j] != '"' && chars[j] != '\n' {
                    j += 1;
                }
                if j >= chars.len() || chars[j] != '"' {
                    return Err(err("unterminated string".into()));
                }
                let s: String = chars[i + 1..j].iter().collect();
                i = j;
                Tok::Str(s)
            }
            c if c.is_ascii_digit()
                || (c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) =>
            {
                let mut j = i + 1;
                while j < chars.len() {
                    let d = chars[j];
                    let exp_sign = (d == '-' || d == '+') && matches!(chars[j - 1], 'e' | 'E');
                    if d.is_ascii_alphanumeric() || d == '.' || exp_sign {
                        j += 1;
                    } else {
                        break;
                    }
                }
                let s: String = chars[i..j].iter().collect();
                i = j - 1;
                if let Ok(v) = s.parse::<i64>() {
                    Tok::Int(v)
                } else if let Some(hex) = s.strip_prefix("0x") {
                    Tok::Int(
                        u64::from_str_radix(hex, 16).map_err(|_| err(format!("bad number `{s}`")))?
                            as i64,
                    )
                } else if let Ok(v) = s.parse::<f64>() {
                    Tok::Float(v)
                } else {
                    return Err(err(format!("bad number `{s}`")));
                }
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut j = i;
                while j < chars.len() && is_name_char(chars[j]) {
                    j += 1;
                }
                let s: String = chars[i..j].iter().collect();
                i = j - 1;
                Tok::Ident(s)
            }
            other => return Err(err(format!("unexpected character `{other}`"))),
        };
        i += 1;
        col += (i - start) as u32;
        out.push(Token {
            tok,
            line: tl,
            col: tc,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
enum RawOperand {
    Local(String, Token),
    Global(String, Token),
    Int(i64),
    Float(f64),
}

#[derive(Debug, Clone)]
enum RawOp {
    Const(Kind, RawOperand),
    Bin(BinOp, RawOperand, RawOperand),
    Icmp(CmpPred, RawOperand, RawOperand),
    Phi(Kind, Vec<(RawOperand, Token, String)>),
    Addr(RawOperand, RawOperand, i64, i64),
    Load(Kind, RawOperand),
    Store(RawOperand, RawOperand),
    Alloc,
    Call(Kind, String, Vec<RawOperand>),
    Br(Token, String),
    CondBr(RawOperand, (Token, String), (Token, String)),
    Ret(Option<RawOperand>),
}

#[derive(Debug, Clone)]
struct RawInst {
    result: Option<(String, Token)>,
    op: RawOp,
    at: Token,
    dbg: Option<DebugTag>,
}

#[derive(Debug)]
struct RawBlock {
    label: String,
    at: Token,
    insts: Vec<RawInst>,
}

#[derive(Debug)]
struct RawFunction {
    name: String,
    pure_fn: bool,
    params: Vec<(String, Kind, Token)>,
    ret: Option<Kind>,
    blocks: Vec<RawBlock>,
    at: Token,
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn at_end(&self) -> bool {
        self.pos >= self.toks.len()
    }

    fn peek(&self) -> &Token {
        self.toks.get(self.pos).unwrap_or_else(|| self.toks.last().unwrap())
    }

    fn peek_tok(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.tok)
    }

    fn peek_nth(&self, n: usize) -> Option<&Tok> {
        self.toks.get(self.pos + n).map(|t| &t.tok)
    }

    fn bump(&mut self) -> Token {
        let t = self.peek().clone();
        self.pos += 1;
        t
    }

    fn eof_err(&self) -> ParseError {
        let last = self.toks.last();
        ParseError {
            line: last.map_or(1, |t| t.line),
            column: last.map_or(1, |t| t.col),
            kind: ParseErrorKind::Syntax("unexpected end of input".into()),
        }
    }

    fn next(&mut self) -> Result<Token, ParseError> {
        if self.at_end() {
            return Err(self.eof_err());
        }
        Ok(self.bump())
    }

    fn expect(&mut self, want: &Tok) -> Result<Token, ParseError> {
        let t = self.next()?;
        if &t.tok != want {
            return Err(t.err(ParseErrorKind::Syntax(format!(
                "expected {}, found {}",
                want.describe(),
                t.tok.describe()
            ))));
        }
        Ok(t)
    }

    fn ident(&mut self) -> Result<(String, Token), ParseError> {
        let t = self.next()?;
        match &t.tok {
            Tok::Ident(s) => Ok((s.clone(), t.clone())),
            other => Err(t.err(ParseErrorKind::Syntax(format!(
                "expected a name, found {}",
                other.describe()
            )))),
        }
    }

    fn int(&mut self) -> Result<i64, ParseError> {
        let t = self.next()?;
        match t.tok {
            Tok::Int(v) => Ok(v),
            ref other => Err(t.err(ParseErrorKind::Syntax(format!(
                "expected an integer, found {}",
                other.describe()
            )))),
        }
    }

    fn kind(&mut self) -> Result<Kind, ParseError> {
        let (name, t) = self.ident()?;
        Kind::from_name(&name)
            .ok_or_else(|| t.err(ParseErrorKind::Syntax(format!("unknown kind `{name}`"))))
    }

    fn operand(&mut self) -> Result<RawOperand, ParseError> {
        let t = self.next()?;
        match &t.tok {
            Tok::Local(s) => Ok(RawOperand::Local(s.clone(), t.clone())),
            Tok::GlobalRef(s) => Ok(RawOperand::Global(s.clone(), t.clone())),
            Tok::Int(v) => Ok(RawOperand::Int(*v)),
            Tok::Float(v) => Ok(RawOperand::Float(*v)),
            Tok::Ident(s) if s == "inf" || s == "NaN" => Ok(RawOperand::Float(s.parse().unwrap())),
            other => Err(t.err(ParseErrorKind::Syntax(format!(
                "expected an operand, found {}",
                other.describe()
            )))),
        }
    }

    fn starts_operand(&self) -> bool {
        match self.peek_tok() {
            Some(Tok::Local(_)) => self.peek_nth(1) != Some(&Tok::Eq),
            Some(Tok::GlobalRef(_)) | Some(Tok::Int(_)) | Some(Tok::Float(_)) => true,
            _ => false,
        }
    }

    fn function(&mut self) -> Result<RawFunction, ParseError> {
        let mut pure_fn = false;
        let first = self.peek().clone();
        if self.peek_tok() == Some(&Tok::Ident("pure".into())) {
            self.bump();
            pure_fn = true;
        }
        self.expect(&Tok::Ident("fn".into()))?;
        let (name, _) = self.ident()?;
        let mut params = Vec::new();
        if self.peek_tok() == Some(&Tok::LParen) {
            self.bump();
            while self.peek_tok() != Some(&Tok::RParen) {
                let t = self.next()?;
                let Tok::Local(pname) = &t.tok else {
                    return Err(t.err(ParseErrorKind::Syntax(format!(
                        "expected a parameter, found {}",
                        t.tok.describe()
                    ))));
                };
                self.expect(&Tok::Colon)?;
                let kind = self.kind()?;
                params.push((pname.clone(), kind, t.clone()));
                if self.peek_tok() == Some(&Tok::Comma) {
                    self.bump();
                }
            }
            self.expect(&Tok::RParen)?;
        }
        let mut ret = None;
        if self.peek_tok() == Some(&Tok::Arrow) {
            self.bump();
            ret = Some(self.kind()?);
        }
        self.expect(&Tok::LBrace)?;
        let mut blocks: Vec<RawBlock> = Vec::new();
        loop {
            match self.peek_tok() {
                None => return Err(self.eof_err()),
                Some(Tok::RBrace) => {
                    self.bump();
                    break;
                }
                Some(Tok::Ident(_)) if self.peek_nth(1) == Some(&Tok::Colon) => {
                    let (label, at) = self.ident()?;
                    self.bump();
                    blocks.push(RawBlock {
                        label,
                        at,
                        insts: Vec::new(),
                    });
                }
                _ => {
                    let inst = self.instruction()?;
                    match blocks.last_mut() {
                        Some(b) => b.insts.push(inst),
                        None => {
                            return Err(inst.at.err(ParseErrorKind::Syntax(
                                "instruction outside of a labeled block".into(),
                            )))
                        }
                    }
                }
            }
        }
        Ok(RawFunction {
            name,
            pure_fn,
            params,
            ret,
            blocks,
            at: first,
        })
    }

    fn instruction(&mut self) -> Result<RawInst, ParseError> {
        let mut result = None;
        if let Some(Tok::Local(name)) = self.peek_tok() {
            let name = name.clone();
            let t = self.bump();
            self.expect(&Tok::Eq)?;
            result = Some((name, t));
        }
        let (opcode, at) = self.ident()?;
        let op = match opcode.as_str() {
            "const" => {
                let k = self.kind()?;
                RawOp::Const(k, self.operand()?)
            }
            "add" | "sub" | "mul" | "div" | "shl" => {
                let op = *BinOp::ALL.iter().find(|b| b.as_str() == opcode).unwrap();
                let lhs = self.operand()?;
                self.expect(&Tok::Comma)?;
                RawOp::Bin(op, lhs, self.operand()?)
            }
            "icmp" => {
                let (pname, pt) = self.ident()?;
                let pred = *CmpPred::ALL
                    .iter()
                    .find(|p| p.as_str() == pname)
                    .ok_or_else(|| {
                        pt.err(ParseErrorKind::Syntax(format!("unknown predicate `{pname}`")))
                    })?;
                let lhs = self.operand()?;
                self.expect(&Tok::Comma)?;
                RawOp::Icmp(pred, lhs, self.operand()?)
            }
            "phi" => {
                let k = self.kind()?;
                let mut incoming = Vec::new();
                loop {
                    self.expect(&Tok::LBracket)?;
                    let v = self.operand()?;
                    self.expect(&Tok::Comma)?;
                    let (label, lt) = self.ident()?;
                    self.expect(&Tok::RBracket)?;
                    incoming.push((v, lt, label));
                    if self.peek_tok() == Some(&Tok::Comma) {
                        self.bump();
                    } else {
                        break;
                    }
                }
                RawOp::Phi(k, incoming)
            }
            "addr" => {
                let base = self.operand()?;
                self.expect(&Tok::Comma)?;
                let index = self.operand()?;
                self.expect(&Tok::Comma)?;
                let scale = self.int()?;
                self.expect(&Tok::Comma)?;
                RawOp::Addr(base, index, scale, self.int()?)
            }
            "load" => {
                let k = self.kind()?;
                RawOp::Load(k, self.operand()?)
            }
            "store" => {
                let a = self.operand()?;
                self.expect(&Tok::Comma)?;
                RawOp::Store(a, self.operand()?)
            }
            "alloc" => {
                self.kind()?;
                RawOp::Alloc
            }
            "call" => {
                let k = self.kind()?;
                let (callee, _) = self.ident()?;
                self.expect(&Tok::LParen)?;
                let mut args = Vec::new();
                while self.peek_tok() != Some(&Tok::RParen) {
                    args.push(self.operand()?);
                    if self.peek_tok() == Some(&Tok::Comma) {
                        self.bump();
                    }
                }
                self.expect(&Tok::RParen)?;
                RawOp::Call(k, callee, args)
            }
            "br" => {
                let (l, t) = self.ident()?;
                RawOp::Br(t, l)
            }
            "condbr" => {
                let c = self.operand()?;
                self.expect(&Tok::Comma)?;
                let (a, at_a) = self.ident()?;
                self.expect(&Tok::Comma)?;
                let (b, at_b) = self.ident()?;
                RawOp::CondBr(c, (at_a, a), (at_b, b))
            }
            "ret" => {
                if self.starts_operand() {
                    RawOp::Ret(Some(self.operand()?))
                } else {
                    RawOp::Ret(None)
                }
            }
            _ => return Err(at.err(ParseErrorKind::UnknownOpcode(opcode))),
        };
        let has_result = matches!(
            op,
            RawOp::Const(..)
                | RawOp::Bin(..)
                | RawOp::Icmp(..)
                | RawOp::Phi(..)
                | RawOp::Addr(..)
                | RawOp::Load(..)
                | RawOp::Alloc
                | RawOp::Call(..)
        );
        if has_result != result.is_some() {
            let msg = if has_result {
                format!("`{opcode}` must define a value")
            } else {
                format!("`{opcode}` does not produce a value")
            };
            return Err(at.err(ParseErrorKind::Syntax(msg)));
        }
        let mut dbg = None;
        if self.peek_tok() == Some(&Tok::Dbg) {
            self.bump();
            let t = self.next()?;
            let Tok::Str(file) = t.tok.clone() else {
                return Err(t.err(ParseErrorKind::Syntax("expected a quoted file name".into())));
            };
            self.expect(&Tok::Colon)?;
            let line = self.int()?;
            self.expect(&Tok::Colon)?;
            let column = self.int()?;
            if line <= 0 || column <= 0 {
                return Err(t.err(ParseErrorKind::Syntax("debug positions are 1-based".into())));
            }
            dbg = Some(DebugTag {
                file,
                line: line as u32,
                column: column as u32,
            });
        }
        Ok(RawInst {
            result,
            op,
            at,
            dbg,
        })
    }
}

fn resolve_function(
    raw: RawFunction,
    globals: &HashMap<&str, usize>,
    source: &str,
) -> Result<Function, ParseError> {
    let mut f = Function::new(&raw.name);
    f.pure_fn = raw.pure_fn;
    f.ret = raw.ret;

    let mut labels: HashMap<String, BlockId> = HashMap::new();
    for (i, b) in raw.blocks.iter().enumerate() {
        if labels.insert(b.label.clone(), BlockId(i as u32)).is_some() {
            return Err(b.at.err(ParseErrorKind::DuplicateDefinition(b.label.clone())));
        }
    }
    if raw.blocks.is_empty() {
        return Err(raw
            .at
            .err(ParseErrorKind::Syntax("function has no blocks".into())));
    }

    let mut seen: HashSet<String> = HashSet::new();
    for (name, _, t) in &raw.params {
        if !seen.insert(name.clone()) {
            return Err(t.err(ParseErrorKind::DuplicateDefinition(format!("%{name}"))));
        }
    }
    for b in &raw.blocks {
        for inst in &b.insts {
            if let Some((name, t)) = &inst.result {
                if !seen.insert(name.clone()) {
                    return Err(t.err(ParseErrorKind::DuplicateDefinition(format!("%{name}"))));
                }
            }
        }
    }

    let mut ids: HashMap<String, ValueId> = HashMap::new();
    for (i, (name, kind, _)) in raw.params.iter().enumerate() {
        let id = ValueId(f.values.len() as u32);
        f.values.push(ValueData {
            name: name.clone(),
            kind: *kind,
            def: ValueDef::Param(i),
        });
        f.params.push(id);
        ids.insert(name.clone(), id);
    }

    let label = |t: &Token, l: &str| -> Result<BlockId, ParseError> {
        labels
            .get(l)
            .copied()
            .ok_or_else(|| t.err(ParseErrorKind::Undefined(l.to_string())))
    };

    // Phi operands may refer forward; pre-register every result name so they
    // resolve. Kinds of forward values are fixed up as definitions are seen.
    let mut pending: HashMap<String, ValueId> = HashMap::new();
    for b in &raw.blocks {
        for inst in &b.insts {
            if let Some((name, _)) = &inst.result {
                let id = ValueId((f.values.len() + pending.len()) as u32);
                pending.insert(name.clone(), id);
            }
        }
    }
    let total = f.values.len() + pending.len();
    f.values.resize(
        total,
        ValueData {
            name: String::new(),
            kind: Kind::I64,
            def: ValueDef::Detached,
        },
    );
    let mut defined = ids.clone();

    for b in &raw.blocks {
        let mut insts = Vec::new();
        for inst in &b.insts {
            let lookup = |o: &RawOperand, allow_forward: bool| -> Result<Operand, ParseError> {
                match o {
                    RawOperand::Int(v) => Ok(Operand::Int(*v)),
                    RawOperand::Float(v) => Ok(Operand::float(*v)),
                    RawOperand::Global(name, t) => globals
                        .get(name.as_str())
                        .map(|g| Operand::Global(super::GlobalId(*g as u32)))
                        .ok_or_else(|| t.err(ParseErrorKind::Undefined(format!("@{name}")))),
                    RawOperand::Local(name, t) => {
                        if let Some(v) = defined.get(name) {
                            return Ok(Operand::Value(*v));
                        }
                        if let Some(v) = pending.get(name) {
                            if allow_forward {
                                return Ok(Operand::Value(*v));
                            }
                            return Err(t.err(ParseErrorKind::SsaViolation(format!("%{name}"))));
                        }
                        Err(t.err(ParseErrorKind::Undefined(format!("%{name}"))))
                    }
                }
            };
            let kind_of = |o: &Operand, vals: &Vec<ValueData>| -> Kind {
                match o {
                    Operand::Value(v) => vals[v.index()].kind,
                    Operand::Global(_) => Kind::Addr,
                    Operand::Int(_) => Kind::I64,
                    Operand::Float(_) => Kind::F64,
                }
            };
            let (op, kind) = match &inst.op {
                RawOp::Const(k, o) => {
                    let c = match (k, lookup(o, false)?) {
                        (Kind::F64, Operand::Int(v)) => Operand::float(v as f64),
                        (_, c) => c,
                    };
                    (Op::Const(c), Some(*k))
                }
                RawOp::Bin(op, a, b2) => {
                    let (l, r) = (lookup(a, false)?, lookup(b2, false)?);
                    let (kl, kr) = (kind_of(&l, &f.values), kind_of(&r, &f.values));
                    let k = match (kl, kr) {
                        (Kind::Addr, Kind::Addr) if *op == BinOp::Sub => Kind::I64,
                        (Kind::Addr, _) | (_, Kind::Addr) => Kind::Addr,
                        _ if !l.is_literal() => kl,
                        _ => kr,
                    };
                    (
                        Op::Bin {
                            op: *op,
                            lhs: l,
                            rhs: r,
                        },
                        Some(k),
                    )
                }
                RawOp::Icmp(pred, a, b2) => (
                    Op::Icmp {
                        pred: *pred,
                        lhs: lookup(a, false)?,
                        rhs: lookup(b2, false)?,
                    },
                    Some(Kind::I64),
                ),
                RawOp::Phi(k, incoming) => {
                    let mut inc = Vec::new();
                    for (o, t, l) in incoming {
                        inc.push((lookup(o, true)?, label(t, l)?));
                    }
                    (Op::Phi { incoming: inc }, Some(*k))
                }
                RawOp::Addr(base, idx, scale, offset) => (
                    Op::Addr {
                        base: lookup(base, false)?,
                        index: lookup(idx, false)?,
                        scale: *scale,
                        offset: *offset,
                    },
                    Some(Kind::Addr),
                ),
                RawOp::Load(k, a) => (
                    Op::Load {
                        addr: lookup(a, false)?,
                    },
                    Some(*k),
                ),
                RawOp::Store(a, v) => (
                    Op::Store {
                        addr: lookup(a, false)?,
                        value: lookup(v, false)?,
                    },
                    None,
                ),
                RawOp::Alloc => (Op::Alloc, Some(Kind::Addr)),
                RawOp::Call(k, callee, args) => {
                    let mut a = Vec::new();
                    for o in args {
                        a.push(lookup(o, false)?);
                    }
                    (
                        Op::Call {
                            callee: callee.clone(),
                            args: a,
                        },
                        Some(*k),
                    )
                }
                RawOp::Br(t, l) => (Op::Br { target: label(t, l)? }, None),
                RawOp::CondBr(c, (ta, a), (tb, b2)) => (
                    Op::CondBr {
                        cond: lookup(c, false)?,
                        then_block: label(ta, a)?,
                        else_block: label(tb, b2)?,
                    },
                    None,
                ),
                RawOp::Ret(v) => (
                    Op::Ret {
                        value: match v {
                            Some(o) => Some(lookup(o, false)?),
                            None => None,
                        },
                    },
                    None,
                ),
            };
            let result = match &inst.result {
                Some((name, _)) => {
                    let id = pending[name];
                    f.values[id.index()] = ValueData {
                        name: name.clone(),
                        kind: kind.unwrap(),
                        def: ValueDef::Detached,
                    };
                    defined.insert(name.clone(), id);
                    Some(id)
                }
                None => None,
            };
            let debug = if op.is_memory_access() {
                Some(inst.dbg.clone().unwrap_or_else(|| DebugTag {
                    file: source.to_string(),
                    line: inst.at.line,
                    column: inst.at.col,
                }))
            } else {
                None
            };
            let mut i = Instruction::new(result, op);
            i.debug = debug;
            insts.push(i);
        }
        f.blocks.push(Block {
            label: b.label.clone(),
            insts,
        });
    }
    f.renumber();
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_program() {
        let m = parse_module("fn main { entry: ret }").unwrap();
        assert_eq!(m.functions.len(), 1);
        assert_eq!(m.functions[0].blocks.len(), 1);
        assert!(matches!(m.functions[0].blocks[0].insts[0].op, Op::Ret { value: None }));
    }

    #[test]
    fn use_before_definition_is_ssa_violation() {
        let src = "fn main() -> i64 {\nentry:\n  %a = add %b, 1\n  %b = const i64 2\n  ret %a\n}";
        let err = parse_module(src).unwrap_err();
        assert!(matches!(err.kind, ParseErrorKind::SsaViolation(_)));
        assert!(err.to_string().contains("SSA violation"));
        assert_eq!((err.line, err.column), (3, 12));
    }

    #[test]
    fn duplicate_and_unknown() {
        let dup = "fn main { entry:\n %a = const i64 1\n %a = const i64 2\n ret }";
        assert!(matches!(
            parse_module(dup).unwrap_err().kind,
            ParseErrorKind::DuplicateDefinition(_)
        ));
        let unk = "fn main { entry:\n %a = frob 1, 2\n ret }";
        assert_eq!(
            parse_module(unk).unwrap_err().kind,
            ParseErrorKind::UnknownOpcode("frob".into())
        );
        let dupfn = "fn main { entry: ret }\nfn main { entry: ret }";
        assert!(matches!(
            parse_module(dupfn).unwrap_err().kind,
            ParseErrorKind::DuplicateDefinition(_)
        ));
    }

    #[test]
    fn syntax_error_carries_position() {
        let err = parse_module("fn main {\nentry:\n  %a = add 1 2\n ret }").unwrap_err();
        assert!(matches!(err.kind, ParseErrorKind::Syntax(_)));
        assert_eq!(err.line, 3);
    }

    #[test]
    fn phi_forward_reference_and_kinds() {
        let src = "global x[4] : f64
fn main(%n: i64) {
entry:
  br loop
loop:
  %i = phi i64 [0, entry], [%i.next, loop]
  %p = addr @x, %i, 8, 0
  %v = load f64 %p
  %i.next = add %i, 1
  %c = icmp lt %i.next, %n
  condbr %c, loop, exit
exit:
  ret
}";
        let m = parse_module_named(src, "k.ir").unwrap();
        let f = &m.functions[0];
        assert_eq!(f.num_insts(), 8);
        let p = f.value_by_name("p").unwrap();
        assert_eq!(f.value(p).kind, Kind::Addr);
        let load = f.insts().find(|i| matches!(i.op, Op::Load { .. })).unwrap();
        assert_eq!(
            load.debug,
            Some(DebugTag {
                file: "k.ir".into(),
                line: 8,
                column: 8
            })
        );
        let ids: Vec<u32> = f.insts().map(|i| i.id.0).collect();
        assert_eq!(ids, (0..8).collect::<Vec<_>>());
    }
}
