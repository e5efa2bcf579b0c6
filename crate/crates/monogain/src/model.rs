//! The model file format and the evaluable system definition built from it.
//!
//! A model is `dx/dt = f(x, u)`, `y = h(x)` with named states, inputs, and
//! parameters. Dynamics come either as one expression per state plus one
//! expression per output, or as a linear triple `(A, B, C)` with the output
//! convention `h(x) = -Cx`. The two forms are mutually exclusive in a file.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::expr::{self, EvalError, ExprAst, Func, SliceEnv};
use crate::order::OrthantOrder;

/// Whether an error is a malformed-text problem or a well-formed document
/// that fails semantic checks. The CLI maps these to different exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelErrorKind {
    Parse,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("line {line}: {source}")]
    Expr {
        line: usize,
        source: expr::ExprError,
    },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: {message}")]
    ValidationAt { line: usize, message: String },
    #[error("{message}")]
    Validation { message: String },
    #[error("dimension mismatch: {message}")]
    DimensionMismatch { message: String },
}

impl ModelError {
    pub fn kind(&self) -> ModelErrorKind {
        match self {
            ModelError::Expr { .. } | ModelError::Syntax { .. } => ModelErrorKind::Parse,
            ModelError::ValidationAt { .. }
            | ModelError::Validation { .. }
            | ModelError::DimensionMismatch { .. } => ModelErrorKind::Validation,
        }
    }
}

fn validation(message: impl Into<String>) -> ModelError {
    ModelError::Validation {
        message: message.into(),
    }
}

/// Linear dynamics `f(x,u) = Ax + Bu` with output `h(x) = -Cx`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTriple {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl LinearTriple {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
    ) -> Result<LinearTriple, ModelError> {
        if a.nrows() != a.ncols() {
            return Err(ModelError::DimensionMismatch {
                message: format!("A must be square, got {}x{}", a.nrows(), a.ncols()),
            });
        }
        let n = a.nrows();
        let m = b.ncols();
        if b.nrows() != n {
            return Err(ModelError::DimensionMismatch {
                message: format!("B must have {n} rows to match A, got {}", b.nrows()),
            });
        }
        if c.ncols() != n || c.nrows() != m {
            return Err(ModelError::DimensionMismatch {
                message: format!(
                    "C must be {m}x{n} (inputs x states), got {}x{}",
                    c.nrows(),
                    c.ncols()
                ),
            });
        }
        for mat in [&a, &b, &c] {
            if mat.iter().any(|v| !v.is_finite()) {
                return Err(validation("linear matrices must have finite entries"));
            }
        }
        Ok(LinearTriple { a, b, c })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }
}

#[derive(Debug, Clone)]
pub enum Dynamics {
    /// One right-hand side per state over states, inputs, and parameters;
    /// one output expression per input channel over states and parameters.
    Expressions {
        rhs: Vec<ExprAst>,
        outputs: Vec<ExprAst>,
    },
    Linear(LinearTriple),
}

/// A fully validated system definition. Immutable after construction.
#[derive(Debug, Clone)]
pub struct ModelDef {
    name: String,
    state_names: Vec<String>,
    input_names: Vec<String>,
    params: Vec<(String, f64)>,
    dynamics: Dynamics,
    order_states: OrthantOrder,
    order_inputs: OrthantOrder,
    // states ++ inputs ++ param names, the evaluation environment layout.
    env_names: Vec<String>,
    param_values: Vec<f64>,
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

const DIRECTIVES: &[&str] = &[
    "model",
    "states",
    "inputs",
    "param",
    "order_states",
    "order_inputs",
    "linear",
];

fn check_name(name: &str) -> Result<(), ModelError> {
    if !is_identifier(name) {
        return Err(validation(format!("`{name}` is not a valid identifier")));
    }
    if DIRECTIVES.contains(&name) {
        return Err(validation(format!(
            "`{name}` is a directive keyword and cannot name a state, input, or parameter"
        )));
    }
    if Func::from_name(name).is_some() {
        return Err(validation(format!(
            "`{name}` is a built-in function name and cannot name a state, input, or parameter"
        )));
    }
    Ok(())
}

impl ModelDef {
    /// Construct and validate a model from already-parsed parts.
    pub fn from_parts(
        name: impl Into<String>,
        state_names: Vec<String>,
        input_names: Vec<String>,
        params: Vec<(String, f64)>,
        dynamics: Dynamics,
        order_states: OrthantOrder,
        order_inputs: OrthantOrder,
    ) -> Result<ModelDef, ModelError> {
        let name = name.into();
        let n = state_names.len();
        let m = input_names.len();

        let mut seen = BTreeSet::new();
        for nm in state_names
            .iter()
            .chain(&input_names)
            .chain(params.iter().map(|(p, _)| p))
        {
            check_name(nm)?;
            if !seen.insert(nm.as_str()) {
                return Err(validation(format!("name `{nm}` declared more than once")));
            }
        }
        for (p, v) in &params {
            if !v.is_finite() {
                return Err(validation(format!(
                    "parameter `{p}` must be finite, got {v}"
                )));
            }
        }
        if order_states.dim() != n {
            return Err(ModelError::DimensionMismatch {
                message: format!(
                    "order_states has {} signs but there are {n} states",
                    order_states.dim()
                ),
            });
        }
        if order_inputs.dim() != m {
            return Err(ModelError::DimensionMismatch {
                message: format!(
                    "order_inputs has {} signs but there are {m} inputs",
                    order_inputs.dim()
                ),
            });
        }

        match &dynamics {
            Dynamics::Expressions { rhs, outputs } => {
                if rhs.len() != n {
                    return Err(validation(format!(
                        "{} dynamics expressions for {n} states",
                        rhs.len()
                    )));
                }
                if outputs.len() != m {
                    return Err(validation(format!(
                        "{} output expressions for {m} inputs",
                        outputs.len()
                    )));
                }
                let state_set: BTreeSet<&str> =
                    state_names.iter().map(String::as_str).collect();
                let input_set: BTreeSet<&str> =
                    input_names.iter().map(String::as_str).collect();
                let param_set: BTreeSet<&str> =
                    params.iter().map(|(p, _)| p.as_str()).collect();
                let mut vars = Vec::new();
                for (i, e) in rhs.iter().enumerate() {
                    vars.clear();
                    e.variables(&mut vars);
                    for v in &vars {
                        if !state_set.contains(v) && !input_set.contains(v) && !param_set.contains(v)
                        {
                            return Err(validation(format!(
                                "dynamics of `{}` references unknown name `{v}`",
                                state_names[i]
                            )));
                        }
                    }
                }
                for (k, e) in outputs.iter().enumerate() {
                    vars.clear();
                    e.variables(&mut vars);
                    for v in &vars {
                        if input_set.contains(v) {
                            return Err(validation(format!(
                                "output y{} may not reference input `{v}`: outputs are functions of the state",
                                k + 1
                            )));
                        }
                        if !state_set.contains(v) && !param_set.contains(v) {
                            return Err(validation(format!(
                                "output y{} references unknown name `{v}`",
                                k + 1
                            )));
                        }
                    }
                }
            }
            Dynamics::Linear(t) => {
                if t.n() != n {
                    return Err(ModelError::DimensionMismatch {
                        message: format!("A is {}x{} but there are {n} states", t.n(), t.n()),
                    });
                }
                if t.m() != m {
                    return Err(ModelError::DimensionMismatch {
                        message: format!("B has {} columns but there are {m} inputs", t.m()),
                    });
                }
            }
        }

        let mut env_names = Vec::with_capacity(n + m + params.len());
        env_names.extend(state_names.iter().cloned());
        env_names.extend(input_names.iter().cloned());
        env_names.extend(params.iter().map(|(p, _)| p.clone()));
        let param_values = params.iter().map(|(_, v)| *v).collect();

        Ok(ModelDef {
            name,
            state_names,
            input_names,
            params,
            dynamics,
            order_states,
            order_inputs,
            env_names,
            param_values,
        })
    }

    /// Wrap a matrix triple as a model with states `x1..xn`, inputs
    /// `u1..um`, and all-increasing orders.
    pub fn from_linear(
        name: impl Into<String>,
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        c: &DMatrix<f64>,
    ) -> Result<ModelDef, ModelError> {
        let triple = LinearTriple::new(a.clone(), b.clone(), c.clone())?;
        let n = triple.n();
        let m = triple.m();
        ModelDef::from_parts(
            name,
            (1..=n).map(|i| format!("x{i}")).collect(),
            (1..=m).map(|i| format!("u{i}")).collect(),
            Vec::new(),
            Dynamics::Linear(triple),
            OrthantOrder::all_plus(n),
            OrthantOrder::all_plus(m),
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.state_names.len()
    }

    /// Input dimension = output dimension.
    pub fn m(&self) -> usize {
        self.input_names.len()
    }

    pub fn state_names(&self) -> &[String] {
        &self.state_names
    }

    pub fn input_names(&self) -> &[String] {
        &self.input_names
    }

    pub fn params(&self) -> &[(String, f64)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<f64> {
        self.params
            .iter()
            .find(|(p, _)| p == name)
            .map(|(_, v)| *v)
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    pub fn linear(&self) -> Option<&LinearTriple> {
        match &self.dynamics {
            Dynamics::Linear(t) => Some(t),
            Dynamics::Expressions { .. } => None,
        }
    }

    pub fn order_states(&self) -> &OrthantOrder {
        &self.order_states
    }

    pub fn order_inputs(&self) -> &OrthantOrder {
        &self.order_inputs
    }

    fn env_values(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut values = Vec::with_capacity(self.env_names.len());
        values.extend_from_slice(x);
        values.extend_from_slice(u);
        values.extend_from_slice(&self.param_values);
        values
    }

    /// Evaluate `f(x, u)` into `out`.
    pub fn f(&self, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        assert_eq!(x.len(), self.n(), "state dimension");
        assert_eq!(u.len(), self.m(), "input dimension");
        assert_eq!(out.len(), self.n(), "output buffer");
        match &self.dynamics {
            Dynamics::Linear(t) => {
                for (i, o) in out.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for (j, &xj) in x.iter().enumerate() {
                        s += t.a[(i, j)] * xj;
                    }
                    for (j, &uj) in u.iter().enumerate() {
                        s += t.b[(i, j)] * uj;
                    }
                    *o = s;
                }
                Ok(())
            }
            Dynamics::Expressions { rhs, .. } => {
                let values = self.env_values(x, u);
                let env = SliceEnv {
                    names: &self.env_names,
                    values: &values,
                };
                for (o, e) in out.iter_mut().zip(rhs) {
                    *o = expr::eval_ast(e, &env)?;
                }
                Ok(())
            }
        }
    }

    /// Evaluate `h(x)` into `out` (length `m`).
    pub fn h(&self, x: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        assert_eq!(x.len(), self.n(), "state dimension");
        assert_eq!(out.len(), self.m(), "output buffer");
        match &self.dynamics {
            Dynamics::Linear(t) => {
                for (k, o) in out.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for (j, &xj) in x.iter().enumerate() {
                        s += t.c[(k, j)] * xj;
                    }
                    *o = -s;
                }
                Ok(())
            }
            Dynamics::Expressions { outputs, .. } => {
                // Outputs never reference inputs (validated), so the input
                // block of the environment can be anything; zeros here.
                let values = self.env_values(x, &vec![0.0; self.m()]);
                let env = SliceEnv {
                    names: &self.env_names,
                    values: &values,
                };
                for (o, e) in out.iter_mut().zip(outputs) {
                    *o = expr::eval_ast(e, &env)?;
                }
                Ok(())
            }
        }
    }

    /// Convenience allocating wrapper around [`ModelDef::h`].
    pub fn h_vec(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        let mut out = vec![0.0; self.m()];
        self.h(x, &mut out)?;
        Ok(out)
    }

    /// Serialize back to the model file format. Parsing the result yields an
    /// equivalent model (same names, parameters, orders, and dynamics).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model {}", self.name);
        let _ = writeln!(s, "states {}", self.state_names.join(" "));
        if !self.input_names.is_empty() {
            let _ = writeln!(s, "inputs {}", self.input_names.join(" "));
        }
        for (p, v) in &self.params {
            let _ = writeln!(s, "param {p} {v}");
        }
        let fmt_order = |o: &OrthantOrder| {
            o.signs()
                .iter()
                .map(|&sg| if sg > 0 { "+" } else { "-" })
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(s, "order_states {}", fmt_order(&self.order_states));
        if !self.input_names.is_empty() {
            let _ = writeln!(s, "order_inputs {}", fmt_order(&self.order_inputs));
        }
        match &self.dynamics {
            Dynamics::Expressions { rhs, outputs } => {
                for (name, e) in self.state_names.iter().zip(rhs) {
                    let _ = writeln!(s, "d{name} = {e}");
                }
                for (k, e) in outputs.iter().enumerate() {
                    let _ = writeln!(s, "y{} = {e}", k + 1);
                }
            }
            Dynamics::Linear(t) if t.m() > 0 => {
                let fmt_mat = |mat: &DMatrix<f64>| {
                    let rows: Vec<String> = (0..mat.nrows())
                        .map(|i| {
                            let entries: Vec<String> =
                                (0..mat.ncols()).map(|j| format!("{}", mat[(i, j)])).collect();
                            format!("[{}]", entries.join(","))
                        })
                        .collect();
                    format!("[{}]", rows.join(","))
                };
                let _ = writeln!(s, "linear A = {}", fmt_mat(&t.a));
                let _ = writeln!(s, "linear B = {}", fmt_mat(&t.b));
                let _ = writeln!(s, "linear C = {}", fmt_mat(&t.c));
            }
            Dynamics::Linear(t) => {
                // No inputs, so the matrix form has nothing to hang B and C
                // on; emit the equivalent expression form instead.
                for (i, name) in self.state_names.iter().enumerate() {
                    let terms: Vec<String> = (0..t.n())
                        .filter(|&j| t.a[(i, j)] != 0.0)
                        .map(|j| format!("{} * {}", t.a[(i, j)], self.state_names[j]))
                        .collect();
                    let rhs = if terms.is_empty() {
                        "0".to_string()
                    } else {
                        terms.join(" + ")
                    };
                    let _ = writeln!(s, "d{name} = {rhs}");
                }
            }
        }
        s
    }
}

/// Split one matrix-literal or entry list on commas that sit at bracket
/// depth zero relative to `src`.
fn split_top_level(src: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    for (i, c) in src.char_indices() {
        match c {
            '[' | '(' => depth += 1,
            ']' | ')' => depth = depth.saturating_sub(1),
            ',' if depth == 0 => {
                parts.push(&src[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(&src[start..]);
    parts
}

/// Parse `[[a,b],[c,d]]` into a row-major matrix. Entries are constant
/// expressions over the declared parameters.
fn parse_matrix_literal(src: &str, params: &[(String, f64)]) -> Result<DMatrix<f64>, String> {
    let s = src.trim();
    let inner = s
        .strip_prefix('[')
        .and_then(|t| t.strip_suffix(']'))
        .ok_or_else(|| "matrix literal must be wrapped in [...]".to_string())?;
    let names: Vec<String> = params.iter().map(|(p, _)| p.clone()).collect();
    let values: Vec<f64> = params.iter().map(|(_, v)| *v).collect();
    let env = SliceEnv {
        names: &names,
        values: &values,
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for row_src in split_top_level(inner) {
        let row_src = row_src.trim();
        let row_inner = row_src
            .strip_prefix('[')
            .and_then(|t| t.strip_suffix(']'))
            .ok_or_else(|| format!("matrix row `{row_src}` must be wrapped in [...]"))?;
        let mut row = Vec::new();
        for entry in split_top_level(row_inner) {
            let entry = entry.trim();
            if entry.is_empty() {
                return Err("empty matrix entry".to_string());
            }
            let ast = expr::parse(entry).map_err(|e| format!("entry `{entry}`: {e}"))?;
            let v = expr::eval_ast(&ast, &env).map_err(|e| format!("entry `{entry}`: {e}"))?;
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(format!(
                    "ragged matrix: row 1 has {} entries, row {} has {}",
                    first.len(),
                    rows.len() + 1,
                    row.len()
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() || rows[0].is_empty() {
        return Err("matrix must have at least one row and one column".to_string());
    }
    let nrows = rows.len();
    let ncols = rows[0].len();
    Ok(DMatrix::from_row_iterator(
        nrows,
        ncols,
        rows.into_iter().flatten(),
    ))
}

fn parse_signs(rest: &str, line: usize) -> Result<OrthantOrder, ModelError> {
    let mut signs = Vec::new();
    for tok in rest.split_whitespace() {
        match tok {
            "+" => signs.push(1),
            "-" => signs.push(-1),
            other => {
                return Err(ModelError::Syntax {
                    line,
                    message: format!("order entries must be `+` or `-`, got `{other}`"),
                })
            }
        }
    }
    Ok(OrthantOrder::from_signs(signs).expect("entries are +-1 by construction"))
}

/// Parse the text model format into a validated [`ModelDef`].
pub fn load_model(document: &str) -> Result<ModelDef, ModelError> {
    struct Decl<T> {
        line: usize,
        value: T,
    }
    let mut name: Option<Decl<String>> = None;
    let mut states: Option<Decl<Vec<String>>> = None;
    let mut inputs: Option<Decl<Vec<String>>> = None;
    let mut order_states: Option<Decl<OrthantOrder>> = None;
    let mut order_inputs: Option<Decl<OrthantOrder>> = None;
    let mut params: Vec<(usize, String, f64)> = Vec::new();
    // (line, lhs, rhs source)
    let mut equations: Vec<(usize, String, String)> = Vec::new();
    // (line, which of A/B/C, literal source)
    let mut blocks: Vec<(usize, char, String)> = Vec::new();

    fn set_once<T>(
        slot: &mut Option<Decl<T>>,
        line: usize,
        what: &str,
        value: T,
    ) -> Result<(), ModelError>
    where
        Decl<T>: Sized,
    {
        if let Some(prev) = slot {
            return Err(ModelError::ValidationAt {
                line,
                message: format!("duplicate `{what}` (first declared on line {})", prev.line),
            });
        }
        *slot = Some(Decl { line, value });
        Ok(())
    }

    for (idx, raw) in document.lines().enumerate() {
        let line = idx + 1;
        let text = raw.split('#').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        let (word, rest) = match text.split_once(char::is_whitespace) {
            Some((w, r)) => (w, r.trim()),
            None => (text, ""),
        };
        match word {
            "model" => {
                if !is_identifier(rest) {
                    return Err(ModelError::Syntax {
                        line,
                        message: format!("model name `{rest}` is not an identifier"),
                    });
                }
                set_once(&mut name, line, "model", rest.to_string())?;
            }
            "states" | "inputs" => {
                let names: Vec<String> = rest.split_whitespace().map(str::to_string).collect();
                if names.is_empty() {
                    return Err(ModelError::Syntax {
                        line,
                        message: format!("`{word}` needs at least one name"),
                    });
                }
                for nm in &names {
                    check_name(nm).map_err(|e| ModelError::ValidationAt {
                        line,
                        message: e.to_string(),
                    })?;
                }
                if word == "states" {
                    set_once(&mut states, line, "states", names)?;
                } else {
                    set_once(&mut inputs, line, "inputs", names)?;
                }
            }
            "param" => {
                let (pname, vsrc) = rest.split_once(char::is_whitespace).ok_or_else(|| {
                    ModelError::Syntax {
                        line,
                        message: "param needs a name and a value".to_string(),
                    }
                })?;
                let vsrc = vsrc.trim().strip_prefix('=').unwrap_or(vsrc).trim();
                check_name(pname).map_err(|e| ModelError::ValidationAt {
                    line,
                    message: e.to_string(),
                })?;
                if params.iter().any(|(_, p, _)| p == pname) {
                    return Err(ModelError::ValidationAt {
                        line,
                        message: format!("duplicate parameter `{pname}`"),
                    });
                }
                let ast =
                    expr::parse(vsrc).map_err(|source| ModelError::Expr { line, source })?;
                let so_far: Vec<(String, f64)> = params
                    .iter()
                    .map(|(_, p, v)| (p.clone(), *v))
                    .collect();
                let names: Vec<String> = so_far.iter().map(|(p, _)| p.clone()).collect();
                let values: Vec<f64> = so_far.iter().map(|(_, v)| *v).collect();
                let v = expr::eval_ast(
                    &ast,
                    &SliceEnv {
                        names: &names,
                        values: &values,
                    },
                )
                .map_err(|e| ModelError::ValidationAt {
                    line,
                    message: format!("parameter `{pname}`: {e}"),
                })?;
                if !v.is_finite() {
                    return Err(ModelError::ValidationAt {
                        line,
                        message: format!("parameter `{pname}` must be finite, got {v}"),
                    });
                }
                params.push((line, pname.to_string(), v));
            }
            "order_states" => {
                let o = parse_signs(rest, line)?;
                set_once(&mut order_states, line, "order_states", o)?;
            }
            "order_inputs" => {
                let o = parse_signs(rest, line)?;
                set_once(&mut order_inputs, line, "order_inputs", o)?;
            }
            "linear" => {
                let (which, eq_rest) =
                    rest.split_once('=').ok_or_else(|| ModelError::Syntax {
                        line,
                        message: "expected `linear A = [[...]]`".to_string(),
                    })?;
                let which = which.trim();
                if !matches!(which, "A" | "B" | "C") {
                    return Err(ModelError::Syntax {
                        line,
                        message: format!("linear block must be A, B, or C, got `{which}`"),
                    });
                }
                let ch = which.chars().next().unwrap();
                if blocks.iter().any(|(_, c, _)| *c == ch) {
                    return Err(ModelError::ValidationAt {
                        line,
                        message: format!("duplicate `linear {which}`"),
                    });
                }
                blocks.push((line, ch, eq_rest.trim().to_string()));
            }
            _ => {
                if let Some((lhs, rhs)) = text.split_once('=') {
                    let lhs = lhs.trim();
                    if !is_identifier(lhs) {
                        return Err(ModelError::Syntax {
                            line,
                            message: format!("`{lhs}` is not a valid equation left-hand side"),
                        });
                    }
                    if equations.iter().any(|(_, l, _)| l == lhs) {
                        return Err(ModelError::ValidationAt {
                            line,
                            message: format!("duplicate equation for `{lhs}`"),
                        });
                    }
                    equations.push((line, lhs.to_string(), rhs.trim().to_string()));
                } else {
                    return Err(ModelError::Syntax {
                        line,
                        message: format!("unknown directive `{word}`"),
                    });
                }
            }
        }
    }

    let params_flat: Vec<(String, f64)> = params
        .iter()
        .map(|(_, p, v)| (p.clone(), *v))
        .collect();
    let model_name = name.map_or_else(|| "unnamed".to_string(), |d| d.value);

    let (state_names, input_names, dynamics) = if !blocks.is_empty() {
        if let Some((line, lhs, _)) = equations.first() {
            return Err(ModelError::ValidationAt {
                line: *line,
                message: format!(
                    "equation for `{lhs}`: linear and expression dynamics are mutually exclusive"
                ),
            });
        }
        let mut mats: [Option<DMatrix<f64>>; 3] = [None, None, None];
        for (line, ch, src) in &blocks {
            let mat = parse_matrix_literal(src, &params_flat).map_err(|message| {
                ModelError::Syntax {
                    line: *line,
                    message,
                }
            })?;
            mats[(*ch as u8 - b'A') as usize] = Some(mat);
        }
        let [a, b, c] = mats;
        let missing: Vec<&str> = [("A", &a), ("B", &b), ("C", &c)]
            .iter()
            .filter(|(_, m)| m.is_none())
            .map(|(w, _)| *w)
            .collect();
        if !missing.is_empty() {
            return Err(validation(format!(
                "linear form needs all of A, B, C; missing {}",
                missing.join(", ")
            )));
        }
        let triple = LinearTriple::new(a.unwrap(), b.unwrap(), c.unwrap())?;
        let n = triple.n();
        let m = triple.m();
        let state_names = match states {
            Some(d) => {
                if d.value.len() != n {
                    return Err(ModelError::DimensionMismatch {
                        message: format!(
                            "{} state names declared but A is {n}x{n}",
                            d.value.len()
                        ),
                    });
                }
                d.value
            }
            None => (1..=n).map(|i| format!("x{i}")).collect(),
        };
        let input_names = match inputs {
            Some(d) => {
                if d.value.len() != m {
                    return Err(ModelError::DimensionMismatch {
                        message: format!(
                            "{} input names declared but B has {m} columns",
                            d.value.len()
                        ),
                    });
                }
                d.value
            }
            None => (1..=m).map(|i| format!("u{i}")).collect(),
        };
        (state_names, input_names, Dynamics::Linear(triple))
    } else {
        let state_names = states
            .ok_or_else(|| validation("no `states` declaration and no linear block"))?
            .value;
        let input_names = inputs.map(|d| d.value).unwrap_or_default();
        let n = state_names.len();
        let m = input_names.len();

        let mut rhs: Vec<Option<(usize, ExprAst)>> = vec![None; n];
        let mut outputs: Vec<Option<(usize, ExprAst)>> = vec![None; m];
        for (line, lhs, src) in &equations {
            let ast = expr::parse(src).map_err(|source| ModelError::Expr {
                line: *line,
                source,
            })?;
            if let Some(state) = lhs.strip_prefix('d') {
                if let Some(i) = state_names.iter().position(|s| s == state) {
                    rhs[i] = Some((*line, ast));
                    continue;
                }
            }
            if let Some(idx_src) = lhs.strip_prefix('y') {
                if let Ok(k) = idx_src.parse::<usize>() {
                    if k == 0 || k > m {
                        return Err(ModelError::ValidationAt {
                            line: *line,
                            message: format!(
                                "output index y{k} out of range: there are {m} inputs"
                            ),
                        });
                    }
                    outputs[k - 1] = Some((*line, ast));
                    continue;
                }
            }
            return Err(ModelError::ValidationAt {
                line: *line,
                message: format!(
                    "unknown equation left-hand side `{lhs}` (dynamics lines are d<state>, outputs y<index>)"
                ),
            });
        }
        let mut rhs_final = Vec::with_capacity(n);
        for (i, slot) in rhs.into_iter().enumerate() {
            match slot {
                Some((_, ast)) => rhs_final.push(ast),
                None => {
                    return Err(validation(format!(
                        "missing dynamics line d{} for state `{}`",
                        state_names[i], state_names[i]
                    )))
                }
            }
        }
        let mut outputs_final = Vec::with_capacity(m);
        for (k, slot) in outputs.into_iter().enumerate() {
            match slot {
                Some((_, ast)) => outputs_final.push(ast),
                None => {
                    return Err(validation(format!("missing output line y{}", k + 1)));
                }
            }
        }
        (
            state_names,
            input_names,
            Dynamics::Expressions {
                rhs: rhs_final,
                outputs: outputs_final,
            },
        )
    };

    let n = state_names.len();
    let m = input_names.len();
    let order_states_v = match order_states {
        Some(d) => {
            if d.value.dim() != n {
                return Err(ModelError::DimensionMismatch {
                    message: format!(
                        "order_states has {} signs but there are {n} states (line {})",
                        d.value.dim(),
                        d.line
                    ),
                });
            }
            d.value
        }
        None => OrthantOrder::all_plus(n),
    };
    let order_inputs_v = match order_inputs {
        Some(d) => {
            if d.value.dim() != m {
                return Err(ModelError::DimensionMismatch {
                    message: format!(
                        "order_inputs has {} signs but there are {m} inputs (line {})",
                        d.value.dim(),
                        d.line
                    ),
                });
            }
            d.value
        }
        None => OrthantOrder::all_plus(m),
    };

    ModelDef::from_parts(
        model_name,
        state_names,
        input_names,
        params_flat,
        dynamics,
        order_states_v,
        order_inputs_v,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const GOODWIN: &str = "\
model goodwin3
states x1 x2 x3
inputs u1
param V 2.0
param m 4.0
order_states + + +
order_inputs +
dx1 = -x1 + u1
dx2 = -x2 + x1
dx3 = -x3 + x2
y1 = V/(1 + x3^m)
";

    #[test]
    fn loads_goodwin_listing() {
        let md = load_model(GOODWIN).unwrap();
        assert_eq!(md.name(), "goodwin3");
        assert_eq!(md.n(), 3);
        assert_eq!(md.m(), 1);
        assert_eq!(md.param("V"), Some(2.0));
        assert_eq!(md.param("m"), Some(4.0));
        assert_eq!(md.order_states().signs(), &[1, 1, 1]);
        assert_eq!(md.order_inputs().signs(), &[1]);

        let mut dx = [0.0; 3];
        md.f(&[1.0, 2.0, 3.0], &[0.5], &mut dx).unwrap();
        assert_eq!(dx, [-0.5, -1.0, -1.0]);
        let y = md.h_vec(&[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(y, vec![1.0]);
    }

    #[test]
    fn round_trip_reserialization() {
        let md = load_model(GOODWIN).unwrap();
        let text = md.to_text();
        let md2 = load_model(&text).unwrap();
        assert_eq!(md.name(), md2.name());
        assert_eq!(md.state_names(), md2.state_names());
        assert_eq!(md.input_names(), md2.input_names());
        assert_eq!(md.params(), md2.params());
        assert_eq!(md.order_states(), md2.order_states());
        assert_eq!(md.order_inputs(), md2.order_inputs());
        match (md.dynamics(), md2.dynamics()) {
            (
                Dynamics::Expressions { rhs: r1, outputs: o1 },
                Dynamics::Expressions { rhs: r2, outputs: o2 },
            ) => {
                assert!(r1.iter().zip(r2).all(|(a, b)| a.same_shape(b)));
                assert!(o1.iter().zip(o2).all(|(a, b)| a.same_shape(b)));
            }
            _ => panic!("dynamics form changed"),
        }
    }

    #[test]
    fn scalar_expression_model() {
        let md = load_model("states x1\ninputs u1\ndx1 = -x1 + u1\ny1 = -0.5*x1\n").unwrap();
        assert_eq!((md.n(), md.m()), (1, 1));
        assert_eq!(md.name(), "unnamed");
        let mut dx = [0.0];
        md.f(&[2.0], &[3.0], &mut dx).unwrap();
        assert_eq!(dx, [1.0]);
        assert_eq!(md.h_vec(&[2.0]).unwrap(), vec![-1.0]);
    }

    #[test]
    fn linear_scalar_model() {
        let md =
            load_model("model s\nlinear A = [[-1]]\nlinear B = [[1]]\nlinear C = [[0.5]]\n")
                .unwrap();
        assert_eq!((md.n(), md.m()), (1, 1));
        assert_eq!(md.state_names(), &["x1".to_string()]);
        let mut dx = [0.0];
        md.f(&[2.0], &[3.0], &mut dx).unwrap();
        assert_eq!(dx, [1.0]);
        assert_eq!(md.h_vec(&[2.0]).unwrap(), vec![-1.0]);
    }

    #[test]
    fn linear_round_trip() {
        let md = load_model(
            "model lt\nlinear A = [[-2,1],[0,-3]]\nlinear B = [[1],[0.25]]\nlinear C = [[0.5,0]]\n",
        )
        .unwrap();
        let md2 = load_model(&md.to_text()).unwrap();
        let (t1, t2) = (md.linear().unwrap(), md2.linear().unwrap());
        assert_eq!(t1, t2);
        assert_eq!(md.state_names(), md2.state_names());
    }

    #[test]
    fn linear_dimension_mismatch() {
        let err = load_model(
            "linear A = [[-1,0],[0,-1]]\nlinear B = [[1],[1]]\nlinear C = [[1,0],[0,1]]\n",
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::DimensionMismatch { .. }), "{err}");
        assert_eq!(err.kind(), ModelErrorKind::Validation);
    }

    #[test]
    fn linear_entries_may_reference_params() {
        let md = load_model(
            "param g 0.5\nlinear A = [[-1]]\nlinear B = [[1]]\nlinear C = [[g]]\n",
        )
        .unwrap();
        assert_eq!(md.linear().unwrap().c[(0, 0)], 0.5);
    }

    #[test]
    fn mixed_forms_rejected() {
        let err = load_model(
            "states x1\ninputs u1\nlinear A = [[-1]]\nlinear B = [[1]]\nlinear C = [[1]]\ndx1 = -x1\ny1 = -x1\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("mutually exclusive"), "{err}");
    }

    #[test]
    fn bad_expression_is_parse_error_with_line() {
        let err =
            load_model("states x1\ninputs u1\ndx1 = -x1 + (u1\ny1 = -x1\n").unwrap_err();
        assert_eq!(err.kind(), ModelErrorKind::Parse);
        assert!(err.to_string().starts_with("line 3:"), "{err}");
    }

    #[test]
    fn unknown_name_is_validation_error() {
        let err = load_model("states x1\ninputs u1\ndx1 = -x1 + w\ny1 = -x1\n").unwrap_err();
        assert_eq!(err.kind(), ModelErrorKind::Validation);
        assert!(err.to_string().contains("unknown name `w`"), "{err}");
    }

    #[test]
    fn output_may_not_use_inputs() {
        let err = load_model("states x1\ninputs u1\ndx1 = -x1 + u1\ny1 = -u1\n").unwrap_err();
        assert!(err.to_string().contains("may not reference input"), "{err}");
    }

    #[test]
    fn missing_dynamics_line() {
        let err = load_model("states x1 x2\ninputs u1\ndx1 = -x1\ny1 = -x1\n").unwrap_err();
        assert!(err.to_string().contains("missing dynamics line dx2"), "{err}");
    }

    #[test]
    fn missing_output_line() {
        let err = load_model("states x1\ninputs u1\ndx1 = -x1 + u1\n").unwrap_err();
        assert!(err.to_string().contains("missing output line y1"), "{err}");
    }

    #[test]
    fn output_index_out_of_range() {
        let err =
            load_model("states x1\ninputs u1\ndx1 = -x1 + u1\ny2 = -x1\n").unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
    }

    #[test]
    fn duplicate_equation_rejected() {
        let err = load_model("states x1\ninputs u1\ndx1 = -x1\ndx1 = -2*x1\ny1 = -x1\n")
            .unwrap_err();
        assert!(err.to_string().contains("duplicate equation"), "{err}");
    }

    #[test]
    fn duplicate_param_rejected() {
        let err = load_model("states x1\nparam a 1\nparam a 2\ndx1 = -x1\n").unwrap_err();
        assert!(err.to_string().contains("duplicate parameter"), "{err}");
    }

    #[test]
    fn non_finite_param_rejected() {
        let err = load_model("states x1\nparam V 1e999\ndx1 = -V*x1\n").unwrap_err();
        assert!(err.to_string().contains("finite"), "{err}");
        let err = load_model("states x1\nparam V 1/0\ndx1 = -V*x1\n").unwrap_err();
        assert!(err.to_string().contains("division by zero"), "{err}");
    }

    #[test]
    fn order_length_mismatch() {
        let err = load_model(
            "states x1 x2\ninputs u1\norder_states + + +\ndx1 = -x1\ndx2 = -x2\ny1 = -x1\n",
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::DimensionMismatch { .. }), "{err}");
    }

    #[test]
    fn default_orders_are_all_plus() {
        let md = load_model("states x1 x2\ninputs u1\ndx1 = -x1\ndx2 = -x2\ny1 = -x1\n").unwrap();
        assert_eq!(md.order_states().signs(), &[1, 1]);
        assert_eq!(md.order_inputs().signs(), &[1]);
    }

    #[test]
    fn autonomous_model_without_inputs() {
        let md = load_model("states x1\ndx1 = -x1\n").unwrap();
        assert_eq!((md.n(), md.m()), (1, 0));
        let mut dx = [0.0];
        md.f(&[3.0], &[], &mut dx).unwrap();
        assert_eq!(dx, [-3.0]);
    }

    #[test]
    fn comments_and_blank_lines_skipped() {
        let md = load_model(
            "# leading comment\n\nstates x1  # trailing\ninputs u1\ndx1 = -x1 + u1 # eol\ny1 = -x1\n",
        )
        .unwrap();
        assert_eq!(md.n(), 1);
    }

    #[test]
    fn reserved_names_rejected() {
        for bad in ["min", "exp", "param", "linear"] {
            let doc = format!("states {bad}\nd{bad} = -{bad}\n");
            let err = load_model(&doc).unwrap_err();
            assert_eq!(err.kind(), ModelErrorKind::Validation, "{bad}: {err}");
        }
    }

    #[test]
    fn unknown_directive_is_syntax_error() {
        let err = load_model("states x1\nbogus stuff here\ndx1 = -x1\n").unwrap_err();
        assert!(matches!(err, ModelError::Syntax { line: 2, .. }), "{err}");
    }

    #[test]
    fn matrix_literal_errors() {
        let err =
            load_model("linear A = [[1,2],[3]]\nlinear B = [[1],[1]]\nlinear C = [[1,1]]\n")
                .unwrap_err();
        assert!(err.to_string().contains("ragged"), "{err}");
        let err = load_model("linear A = [-1]\nlinear B = [[1]]\nlinear C = [[1]]\n").unwrap_err();
        assert!(matches!(err, ModelError::Syntax { .. }), "{err}");
    }

    #[test]
    fn missing_linear_block() {
        let err = load_model("linear A = [[-1]]\nlinear B = [[1]]\n").unwrap_err();
        assert!(err.to_string().contains("missing C"), "{err}");
    }

    #[test]
    fn linear_matches_expression_form() {
        // Same system entered both ways; the two evaluation paths must agree
        // to 1e-12 relative on random points.
        let lin = load_model(
            "linear A = [[-2,1],[0.5,-3]]\nlinear B = [[1,0],[0.25,2]]\nlinear C = [[0.5,0],[1,1]]\n",
        )
        .unwrap();
        let exprs = load_model(
            "states x1 x2\ninputs u1 u2\n\
             dx1 = -2*x1 + 1*x2 + 1*u1 + 0*u2\n\
             dx2 = 0.5*x1 - 3*x2 + 0.25*u1 + 2*u2\n\
             y1 = -(0.5*x1 + 0*x2)\n\
             y2 = -(1*x1 + 1*x2)\n",
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let x = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let u = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let (mut fa, mut fb) = ([0.0; 2], [0.0; 2]);
            lin.f(&x, &u, &mut fa).unwrap();
            exprs.f(&x, &u, &mut fb).unwrap();
            for (a, b) in fa.iter().zip(&fb) {
                let scale = a.abs().max(1.0);
                assert!((a - b).abs() <= 1e-12 * scale, "{fa:?} vs {fb:?}");
            }
            let ya = lin.h_vec(&x).unwrap();
            let yb = exprs.h_vec(&x).unwrap();
            for (a, b) in ya.iter().zip(&yb) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn eval_domain_error_surfaces() {
        let md = load_model("states x1\ninputs u1\ndx1 = 1/x1\ny1 = -x1\n").unwrap();
        let mut dx = [0.0];
        assert!(md.f(&[0.0], &[0.0], &mut dx).is_err());
    }
}
