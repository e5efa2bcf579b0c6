//! Arithmetic expression language used by model files.
//!
//! Grammar (precedence low to high): `+ -` < `* /` < unary `-` < `^`
//! (right-associative). Function application is an identifier followed by a
//! parenthesized argument list. Known functions: `exp`, `ln`, `sqrt`, `abs`
//! (one argument), `min`, `max` (two arguments).

use std::fmt;

use thiserror::Error;

/// Binary operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }

    /// Binding strength used by the parser and the printer.
    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
            BinOp::Pow => 4,
        }
    }
}

const NEG_PRECEDENCE: u8 = 3;
const ATOM_PRECEDENCE: u8 = 5;

/// Built-in functions with fixed arity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Ln,
    Sqrt,
    Abs,
    Min,
    Max,
}

impl Func {
    pub fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "exp" => Func::Exp,
            "ln" => Func::Ln,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Ln => "ln",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Exp | Func::Ln | Func::Sqrt | Func::Abs => 1,
            Func::Min | Func::Max => 2,
        }
    }
}

/// Expression tree. Every node keeps the byte offset of the source text it
/// came from so evaluation errors can point back at the model file.
#[derive(Debug, Clone, PartialEq)]
pub enum ExprAst {
    Num {
        value: f64,
        offset: usize,
    },
    Var {
        name: String,
        offset: usize,
    },
    Neg {
        arg: Box<ExprAst>,
        offset: usize,
    },
    Bin {
        op: BinOp,
        lhs: Box<ExprAst>,
        rhs: Box<ExprAst>,
        offset: usize,
    },
    Call {
        func: Func,
        args: Vec<ExprAst>,
        offset: usize,
    },
}

impl ExprAst {
    pub fn offset(&self) -> usize {
        match self {
            ExprAst::Num { offset, .. }
            | ExprAst::Var { offset, .. }
            | ExprAst::Neg { offset, .. }
            | ExprAst::Bin { offset, .. }
            | ExprAst::Call { offset, .. } => *offset,
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            ExprAst::Num { .. } | ExprAst::Var { .. } | ExprAst::Call { .. } => ATOM_PRECEDENCE,
            ExprAst::Neg { .. } => NEG_PRECEDENCE,
            ExprAst::Bin { op, .. } => op.precedence(),
        }
    }

    /// Collect every variable name referenced by the expression.
    pub fn variables<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            ExprAst::Num { .. } => {}
            ExprAst::Var { name, .. } => out.push(name),
            ExprAst::Neg { arg, .. } => arg.variables(out),
            ExprAst::Bin { lhs, rhs, .. } => {
                lhs.variables(out);
                rhs.variables(out);
            }
            ExprAst::Call { args, .. } => {
                for a in args {
                    a.variables(out);
                }
            }
        }
    }

    /// Replace variables by expressions (used to close feedback loops).
    pub fn substitute(&self, map: &dyn Fn(&str) -> Option<ExprAst>) -> ExprAst {
        match self {
            ExprAst::Num { .. } => self.clone(),
            ExprAst::Var { name, .. } => map(name).unwrap_or_else(|| self.clone()),
            ExprAst::Neg { arg, offset } => ExprAst::Neg {
                arg: Box::new(arg.substitute(map)),
                offset: *offset,
            },
            ExprAst::Bin {
                op,
                lhs,
                rhs,
                offset,
            } => ExprAst::Bin {
                op: *op,
                lhs: Box::new(lhs.substitute(map)),
                rhs: Box::new(rhs.substitute(map)),
                offset: *offset,
            },
            ExprAst::Call { func, args, offset } => ExprAst::Call {
                func: *func,
                args: args.iter().map(|a| a.substitute(map)).collect(),
                offset: *offset,
            },
        }
    }

    /// Rename variables in place.
    pub fn rename(&self, map: &dyn Fn(&str) -> Option<String>) -> ExprAst {
        self.substitute(&|name| {
            map(name).map(|n| ExprAst::Var {
                name: n,
                offset: 0,
            })
        })
    }

    /// Structural equality ignoring source offsets. Numbers compare by bit
    /// pattern, so this is exact round-trip identity, not approximate.
    pub fn same_shape(&self, other: &ExprAst) -> bool {
        match (self, other) {
            (ExprAst::Num { value: va, .. }, ExprAst::Num { value: vb, .. }) => {
                va.to_bits() == vb.to_bits()
            }
            (ExprAst::Var { name: na, .. }, ExprAst::Var { name: nb, .. }) => na == nb,
            (ExprAst::Neg { arg: aa, .. }, ExprAst::Neg { arg: ab, .. }) => aa.same_shape(ab),
            (
                ExprAst::Bin { op: oa, lhs: la, rhs: ra, .. },
                ExprAst::Bin { op: ob, lhs: lb, rhs: rb, .. },
            ) => oa == ob && la.same_shape(lb) && ra.same_shape(rb),
            (
                ExprAst::Call { func: fa, args: aa, .. },
                ExprAst::Call { func: fb, args: ab, .. },
            ) => {
                fa == fb
                    && aa.len() == ab.len()
                    && aa.iter().zip(ab).all(|(x, y)| x.same_shape(y))
            }
            _ => false,
        }
    }
}

/// Printer with enough parentheses that `parse(print(e)) == e` up to offsets.
impl fmt::Display for ExprAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn child(f: &mut fmt::Formatter<'_>, e: &ExprAst, needs_paren: bool) -> fmt::Result {
            if needs_paren {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        }
        match self {
            ExprAst::Num { value, .. } => write!(f, "{value}"),
            ExprAst::Var { name, .. } => write!(f, "{name}"),
            ExprAst::Neg { arg, .. } => {
                write!(f, "-")?;
                child(f, arg, arg.precedence() < NEG_PRECEDENCE)
            }
            ExprAst::Bin { op, lhs, rhs, .. } => {
                let p = op.precedence();
                match op {
                    // Left-associative: parenthesize an equal-precedence rhs.
                    BinOp::Add | BinOp::Sub | BinOp::Mul | BinOp::Div => {
                        child(f, lhs, lhs.precedence() < p)?;
                        write!(f, " {} ", op.symbol())?;
                        child(f, rhs, rhs.precedence() <= p)
                    }
                    // Right-associative and binding tighter than unary minus.
                    BinOp::Pow => {
                        child(f, lhs, lhs.precedence() <= p)?;
                        write!(f, "{}", op.symbol())?;
                        child(f, rhs, rhs.precedence() < p)
                    }
                }
            }
            ExprAst::Call { func, args, .. } => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Token {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
}

impl Token {
    fn describe(&self) -> String {
        match self {
            Token::Num(v) => format!("number `{v}`"),
            Token::Ident(s) => format!("identifier `{s}`"),
            Token::Plus => "`+`".into(),
            Token::Minus => "`-`".into(),
            Token::Star => "`*`".into(),
            Token::Slash => "`/`".into(),
            Token::Caret => "`^`".into(),
            Token::LParen => "`(`".into(),
            Token::RParen => "`)`".into(),
            Token::Comma => "`,`".into(),
        }
    }
}

/// A token together with the byte offset where it starts.
#[derive(Debug, Clone, PartialEq)]
pub struct SpannedToken {
    pub token: Token,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("illegal character `{ch}` at offset {offset}")]
    IllegalCharacter { ch: char, offset: usize },
    #[error("unbalanced parenthesis at offset {offset}")]
    UnbalancedParen { offset: usize },
    #[error("unexpected {found} at offset {offset}")]
    UnexpectedToken { offset: usize, found: String },
    #[error("unexpected end of expression")]
    UnexpectedEnd,
    #[error("unknown function `{name}` at offset {offset}")]
    UnknownFunction { name: String, offset: usize },
    #[error("wrong arity for `{name}` at offset {offset}: expected {expected}, got {got}")]
    WrongArity {
        name: String,
        offset: usize,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("unbound variable `{name}`")]
    UnboundVariable { name: String },
    #[error("domain error at offset {offset}: {what}")]
    Domain { offset: usize, what: String },
}

/// Split source text into tokens. Numbers are unsigned decimal literals with
/// an optional fractional part and exponent; `-` is always its own token.
pub fn tokenize(src: &str) -> Result<Vec<SpannedToken>, ExprError> {
    let bytes = src.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let start = i;
        let c = bytes[i];
        match c {
            b' ' | b'\t' | b'\r' | b'\n' => {
                i += 1;
            }
            b'+' => {
                tokens.push(SpannedToken { token: Token::Plus, offset: start });
                i += 1;
            }
            b'-' => {
                tokens.push(SpannedToken { token: Token::Minus, offset: start });
                i += 1;
            }
            b'*' => {
                tokens.push(SpannedToken { token: Token::Star, offset: start });
                i += 1;
            }
            b'/' => {
                tokens.push(SpannedToken { token: Token::Slash, offset: start });
                i += 1;
            }
            b'^' => {
                tokens.push(SpannedToken { token: Token::Caret, offset: start });
                i += 1;
            }
            b'(' => {
                tokens.push(SpannedToken { token: Token::LParen, offset: start });
                i += 1;
            }
            b')' => {
                tokens.push(SpannedToken { token: Token::RParen, offset: start });
                i += 1;
            }
            b',' => {
                tokens.push(SpannedToken { token: Token::Comma, offset: start });
                i += 1;
            }
            b'0'..=b'9' | b'.' => {
                // Digits, optional fraction, optional exponent. The exponent
                // marker is only consumed when digits actually follow it, so
                // `2.5e` lexes as the number `2.5` and the identifier `e`.
                if c == b'.' && !bytes.get(i + 1).is_some_and(u8::is_ascii_digit) {
                    let ch = src[start..].chars().next().unwrap();
                    return Err(ExprError::IllegalCharacter { ch, offset: start });
                }
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == b'.' {
                    i += 1;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &src[start..i];
                let value: f64 = text.parse().map_err(|_| ExprError::IllegalCharacter {
                    ch: text.chars().next().unwrap(),
                    offset: start,
                })?;
                tokens.push(SpannedToken { token: Token::Num(value), offset: start });
            }
            b'A'..=b'Z' | b'a'..=b'z' | b'_' => {
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                tokens.push(SpannedToken {
                    token: Token::Ident(src[start..i].to_string()),
                    offset: start,
                });
            }
            _ => {
                let ch = src[start..].chars().next().unwrap();
                return Err(ExprError::IllegalCharacter { ch, offset: start });
            }
        }
    }
    Ok(tokens)
}

struct Parser<'t> {
    tokens: &'t [SpannedToken],
    pos: usize,
}

impl<'t> Parser<'t> {
    fn peek(&self) -> Option<&'t SpannedToken> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<&'t SpannedToken> {
        let t = self.tokens.get(self.pos);
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect_rparen(&mut self, open_offset: usize) -> Result<(), ExprError> {
        match self.next() {
            Some(st) if st.token == Token::RParen => Ok(()),
            Some(st) => Err(ExprError::UnbalancedParen { offset: st.offset }),
            None => Err(ExprError::UnbalancedParen { offset: open_offset }),
        }
    }

    // expr := term (('+'|'-') term)*
    fn expr(&mut self) -> Result<ExprAst, ExprError> {
        let mut lhs = self.term()?;
        while let Some(st) = self.peek() {
            let op = match st.token {
                Token::Plus => BinOp::Add,
                Token::Minus => BinOp::Sub,
                _ => break,
            };
            let offset = st.offset;
            self.pos += 1;
            let rhs = self.term()?;
            lhs = ExprAst::Bin {
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
                offset,
            };
        }
        Ok(lhs)
    }

    // term := factor (('*'|'/') factor)*
    fn term(&mut self) -> Result<ExprAst, ExprError> {
        let mut lhs = self.factor()?;
        while let Some(st) = self.peek() {
            let op = match st.token {
                Token::Star => BinOp::Mul,
                Token::Slash => BinOp::Div,
                _ => break,
            };
            let offset = st.offset;
            self.pos += 1;
            let rhs = self.factor()?;
            lhs = ExprAst::Bin {
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
                offset,
            };
        }
        Ok(lhs)
    }

    // factor := '-' factor | power
    fn factor(&mut self) -> Result<ExprAst, ExprError> {
        if let Some(st) = self.peek() {
            if st.token == Token::Minus {
                let offset = st.offset;
                self.pos += 1;
                let arg = self.factor()?;
                return Ok(ExprAst::Neg {
                    arg: Box::new(arg),
                    offset,
                });
            }
        }
        self.power()
    }

    // power := atom ('^' factor)?   (right-associative via factor recursion)
    fn power(&mut self) -> Result<ExprAst, ExprError> {
        let base = self.atom()?;
        if let Some(st) = self.peek() {
            if st.token == Token::Caret {
                let offset = st.offset;
                self.pos += 1;
                let exponent = self.factor()?;
                return Ok(ExprAst::Bin {
                    op: BinOp::Pow,
                    lhs: Box::new(base),
                    rhs: Box::new(exponent),
                    offset,
                });
            }
        }
        Ok(base)
    }

    // atom := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'
    fn atom(&mut self) -> Result<ExprAst, ExprError> {
        let st = self.next().ok_or(ExprError::UnexpectedEnd)?;
        match &st.token {
            Token::Num(v) => Ok(ExprAst::Num {
                value: *v,
                offset: st.offset,
            }),
            Token::Ident(name) => {
                let is_call = self.peek().map(|t| t.token == Token::LParen) == Some(true);
                if !is_call {
                    return Ok(ExprAst::Var {
                        name: name.clone(),
                        offset: st.offset,
                    });
                }
                let func = Func::from_name(name).ok_or_else(|| ExprError::UnknownFunction {
                    name: name.clone(),
                    offset: st.offset,
                })?;
                let open_offset = self.peek().unwrap().offset;
                self.pos += 1; // consume '('
                let mut args = vec![self.expr()?];
                while self.peek().map(|t| t.token == Token::Comma) == Some(true) {
                    self.pos += 1;
                    args.push(self.expr()?);
                }
                self.expect_rparen(open_offset)?;
                if args.len() != func.arity() {
                    return Err(ExprError::WrongArity {
                        name: func.name().to_string(),
                        offset: st.offset,
                        expected: func.arity(),
                        got: args.len(),
                    });
                }
                Ok(ExprAst::Call {
                    func,
                    args,
                    offset: st.offset,
                })
            }
            Token::LParen => {
                let inner = self.expr()?;
                match self.next() {
                    Some(t) if t.token == Token::RParen => Ok(inner),
                    Some(t) => Err(ExprError::UnbalancedParen { offset: t.offset }),
                    None => Err(ExprError::UnbalancedParen { offset: st.offset }),
                }
            }
            Token::RParen => Err(ExprError::UnbalancedParen { offset: st.offset }),
            other => Err(ExprError::UnexpectedToken {
                offset: st.offset,
                found: other.describe(),
            }),
        }
    }
}

/// Parse a token sequence produced by [`tokenize`].
pub fn parse_tokens(tokens: &[SpannedToken]) -> Result<ExprAst, ExprError> {
    let mut p = Parser { tokens, pos: 0 };
    let ast = p.expr()?;
    if let Some(extra) = p.peek() {
        return Err(match extra.token {
            Token::RParen => ExprError::UnbalancedParen { offset: extra.offset },
            _ => ExprError::UnexpectedToken {
                offset: extra.offset,
                found: extra.token.describe(),
            },
        });
    }
    Ok(ast)
}

/// Tokenize and parse in one step.
pub fn parse(src: &str) -> Result<ExprAst, ExprError> {
    parse_tokens(&tokenize(src)?)
}

/// Variable lookup used by [`eval_ast`].
pub trait VarLookup {
    fn get(&self, name: &str) -> Option<f64>;
}

impl VarLookup for std::collections::HashMap<String, f64> {
    fn get(&self, name: &str) -> Option<f64> {
        std::collections::HashMap::get(self, name).copied()
    }
}

impl VarLookup for std::collections::BTreeMap<String, f64> {
    fn get(&self, name: &str) -> Option<f64> {
        std::collections::BTreeMap::get(self, name).copied()
    }
}

/// Parallel name/value slices. Lookup is a linear scan, which beats hashing
/// at the handful of names a model carries.
pub struct SliceEnv<'a> {
    pub names: &'a [String],
    pub values: &'a [f64],
}

impl VarLookup for SliceEnv<'_> {
    fn get(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.values[i])
    }
}

/// Evaluate an expression. Division by zero, `ln` of a non-positive value,
/// `sqrt` of a negative value, `0^negative`, and any other operation that
/// would manufacture a NaN from finite operands are reported as domain
/// errors instead of being propagated silently.
pub fn eval_ast(ast: &ExprAst, env: &dyn VarLookup) -> Result<f64, EvalError> {
    match ast {
        ExprAst::Num { value, .. } => Ok(*value),
        ExprAst::Var { name, .. } => env.get(name).ok_or_else(|| EvalError::UnboundVariable {
            name: name.clone(),
        }),
        ExprAst::Neg { arg, .. } => Ok(-eval_ast(arg, env)?),
        ExprAst::Bin {
            op,
            lhs,
            rhs,
            offset,
        } => {
            let a = eval_ast(lhs, env)?;
            let b = eval_ast(rhs, env)?;
            let v = match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::Div => {
                    if b == 0.0 {
                        return Err(EvalError::Domain {
                            offset: *offset,
                            what: "division by zero".into(),
                        });
                    }
                    a / b
                }
                BinOp::Pow => {
                    if a == 0.0 && b < 0.0 {
                        return Err(EvalError::Domain {
                            offset: *offset,
                            what: "zero raised to a negative power".into(),
                        });
                    }
                    a.powf(b)
                }
            };
            reject_nan(v, a, b, *offset)
        }
        ExprAst::Call { func, args, offset } => {
            let a = eval_ast(&args[0], env)?;
            match func {
                Func::Exp => Ok(a.exp()),
                Func::Ln => {
                    if a <= 0.0 {
                        Err(EvalError::Domain {
                            offset: *offset,
                            what: format!("ln of non-positive value {a}"),
                        })
                    } else {
                        Ok(a.ln())
                    }
                }
                Func::Sqrt => {
                    if a < 0.0 {
                        Err(EvalError::Domain {
                            offset: *offset,
                            what: format!("sqrt of negative value {a}"),
                        })
                    } else {
                        Ok(a.sqrt())
                    }
                }
                Func::Abs => Ok(a.abs()),
                Func::Min | Func::Max => {
                    let b = eval_ast(&args[1], env)?;
                    if a.is_nan() || b.is_nan() {
                        return Err(EvalError::Domain {
                            offset: *offset,
                            what: "NaN operand".into(),
                        });
                    }
                    Ok(match func {
                        Func::Min => a.min(b),
                        Func::Max => a.max(b),
                        _ => unreachable!(),
                    })
                }
            }
        }
    }
}

fn reject_nan(v: f64, a: f64, b: f64, offset: usize) -> Result<f64, EvalError> {
    if v.is_nan() && !a.is_nan() && !b.is_nan() {
        Err(EvalError::Domain {
            offset,
            what: format!("operation on {a} and {b} produced NaN"),
        })
    } else {
        Ok(v)
    }
}
