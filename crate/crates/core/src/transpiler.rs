//! The dataframe-DSL to SQL transpiler and its interpreter oracle.
//!
//! Writer agents in program-of-thoughts mode emit small pandas-style code
//! blocks. Instead of executing model-written code, we parse a whitelisted
//! surface of it (column selection, boolean-mask filters, merge, groupby
//! aggregation, sort/head, isin) and lower it to a single SELECT statement.
//! The in-memory interpreter evaluates the same program over `ResultTable`s
//! with SQL multiset/null semantics, giving an independent second route for
//! every lowered query.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use crate::prompts;
use crate::types::{CellValue, DatabaseSchema, ResultTable, SqlQuery};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeHow {
    Inner,
    Left,
}

impl MergeHow {
    fn as_str(&self) -> &'static str {
        match self {
            MergeHow::Inner => "inner",
            MergeHow::Left => "left",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggFunc {
    Count,
    Sum,
    Avg,
    Min,
    Max,
}

impl AggFunc {
    fn dsl_name(&self) -> &'static str {
        match self {
            AggFunc::Count => "count",
            AggFunc::Sum => "sum",
            AggFunc::Avg => "avg",
            AggFunc::Min => "min",
            AggFunc::Max => "max",
        }
    }

    fn sql_name(&self) -> &'static str {
        match self {
            AggFunc::Count => "COUNT",
            AggFunc::Sum => "SUM",
            AggFunc::Avg => "AVG",
            AggFunc::Min => "MIN",
            AggFunc::Max => "MAX",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "count" => Some(AggFunc::Count),
            "sum" => Some(AggFunc::Sum),
            "avg" | "mean" => Some(AggFunc::Avg),
            "min" => Some(AggFunc::Min),
            "max" => Some(AggFunc::Max),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    fn as_str(&self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    fn sql(&self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            other => other.as_str(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Int(i64),
    Real(f64),
    Text(String),
}

impl Literal {
    fn dsl(&self) -> String {
        match self {
            Literal::Int(v) => v.to_string(),
            Literal::Real(v) => format!("{v:?}"),
            Literal::Text(v) => format!("'{}'", v.replace('\'', "\\'")),
        }
    }

    fn sql(&self) -> String {
        match self {
            Literal::Int(v) => v.to_string(),
            Literal::Real(v) => format!("{v:?}"),
            Literal::Text(v) => format!("'{}'", v.replace('\'', "''")),
        }
    }

    fn cell(&self) -> CellValue {
        match self {
            Literal::Int(v) => CellValue::Int(*v),
            Literal::Real(v) => CellValue::Real(*v),
            Literal::Text(v) => CellValue::Text(v.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub column: String,
    pub op: CmpOp,
    pub value: Literal,
}

/// One node of the whitelisted dataframe algebra.
#[derive(Debug, Clone, PartialEq)]
pub enum DslExpr {
    /// Reference to a prior step's target.
    StepRef(String),
    /// `db_dict['table']`
    TableRef(String),
    ColumnSelect {
        src: Box<DslExpr>,
        columns: Vec<String>,
    },
    /// Conjunction of comparisons (boolean-mask filter).
    Filter {
        src: Box<DslExpr>,
        predicate: Vec<Comparison>,
    },
    Merge {
        left: Box<DslExpr>,
        right: Box<DslExpr>,
        on: String,
        how: MergeHow,
    },
    GroupAgg {
        src: Box<DslExpr>,
        keys: Vec<String>,
        aggs: Vec<(String, AggFunc)>,
    },
    Sort {
        src: Box<DslExpr>,
        keys: Vec<String>,
        desc: Vec<bool>,
    },
    Limit {
        src: Box<DslExpr>,
        n: u64,
    },
    /// Membership filter; `negated` gives the set-difference form.
    IsIn {
        src: Box<DslExpr>,
        column: String,
        other: Box<DslExpr>,
        other_column: String,
        negated: bool,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub target: String,
    pub expr: DslExpr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodeBlockProgram {
    pub steps: Vec<Step>,
}

impl CodeBlockProgram {
    pub fn final_step(&self) -> Option<&Step> {
        self.steps.iter().find(|s| s.target == "result").or(self.steps.last())
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TranspileError {
    #[error("no code block found")]
    NoCodeFound,
    #[error("unsupported construct: {0}")]
    UnsupportedConstruct(String),
    #[error("undefined name `{0}`")]
    UndefinedName(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("internal: unlowered variant")]
    UnloweredVariant,
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Str(String),
    Int(i64),
    Float(f64),
    LBracket,
    RBracket,
    LParen,
    RParen,
    LBrace,
    RBrace,
    Comma,
    Colon,
    Dot,
    Amp,
    Tilde,
    Assign,
    Cmp(CmpOp),
}

fn tokenize(line: &str) -> Result<Vec<Tok>, TranspileError> {
    let unsupported = || TranspileError::UnsupportedConstruct(line.to_string());
    let mut toks = Vec::new();
    let chars: Vec<char> = line.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            ' ' | '\t' => i += 1,
            '#' => break,
            '[' => {
                toks.push(Tok::LBracket);
                i += 1;
            }
            ']' => {
                toks.push(Tok::RBracket);
                i += 1;
            }
            '(' => {
                toks.push(Tok::LParen);
                i += 1;
            }
            ')' => {
                toks.push(Tok::RParen);
                i += 1;
            }
            '{' => {
                toks.push(Tok::LBrace);
                i += 1;
            }
            '}' => {
                toks.push(Tok::RBrace);
                i += 1;
            }
            ',' => {
                toks.push(Tok::Comma);
                i += 1;
            }
            ':' => {
                toks.push(Tok::Colon);
                i += 1;
            }
            '.' => {
                toks.push(Tok::Dot);
                i += 1;
            }
            '&' => {
                toks.push(Tok::Amp);
                i += 1;
            }
            '~' => {
                toks.push(Tok::Tilde);
                i += 1;
            }
            '=' => {
                if chars.get(i + 1) == Some(&'=') {
                    toks.push(Tok::Cmp(CmpOp::Eq));
                    i += 2;
                } else {
                    toks.push(Tok::Assign);
                    i += 1;
                }
            }
            '!' => {
                if chars.get(i + 1) == Some(&'=') {
                    toks.push(Tok::Cmp(CmpOp::Ne));
                    i += 2;
                } else {
                    return Err(unsupported());
                }
            }
            '<' => {
                if chars.get(i + 1) == Some(&'=') {
                    toks.push(Tok::Cmp(CmpOp::Le));
                    i += 2;
                } else {
                    toks.push(Tok::Cmp(CmpOp::Lt));
                    i += 1;
                }
            }
            '>' => {
                if chars.get(i + 1) == Some(&'=') {
                    toks.push(Tok::Cmp(CmpOp::Ge));
                    i += 2;
                } else {
                    toks.push(Tok::Cmp(CmpOp::Gt));
                    i += 1;
                }
            }
            '\'' | '"' => {
                let quote = c;
                let mut s = String::new();
                i += 1;
                loop {
                    match chars.get(i) {
                        Some(&d) if d == quote => {
                            i += 1;
                            break;
                        }
                        Some('\\') if chars.get(i + 1) == Some(&quote) => {
                            s.push(quote);
                            i += 2;
                        }
                        Some(&d) => {
                            s.push(d);
                            i += 1;
                        }
                        None => return Err(unsupported()),
                    }
                }
                toks.push(Tok::Str(s));
            }
            '-' | '0'..='9' => {
                let start = i;
                if c == '-' {
                    i += 1;
                }
                let mut is_float = false;
                while let Some(&d) = chars.get(i) {
                    if d.is_ascii_digit() {
                        i += 1;
                    } else if d == '.' && !is_float && chars.get(i + 1).is_some_and(|x| x.is_ascii_digit()) {
                        is_float = true;
                        i += 1;
                    } else {
                        break;
                    }
                }
                let text: String = chars[start..i].iter().collect();
                if text == "-" {
                    return Err(unsupported());
                }
                if is_float {
                    toks.push(Tok::Float(text.parse().map_err(|_| unsupported())?));
                } else {
                    toks.push(Tok::Int(text.parse().map_err(|_| unsupported())?));
                }
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while chars
                    .get(i)
                    .is_some_and(|d| d.is_alphanumeric() || *d == '_')
                {
                    i += 1;
                }
                toks.push(Tok::Ident(chars[start..i].iter().collect()));
            }
            _ => return Err(unsupported()),
        }
    }
    Ok(toks)
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

struct Parser<'a> {
    toks: &'a [Tok],
    pos: usize,
    line: &'a str,
    defined: &'a HashSet<String>,
}

impl<'a> Parser<'a> {
    fn err(&self) -> TranspileError {
        TranspileError::UnsupportedConstruct(self.line.to_string())
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<&Tok> {
        let t = self.toks.get(self.pos);
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn eat(&mut self, tok: &Tok) -> Result<(), TranspileError> {
        if self.peek() == Some(tok) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err())
        }
    }

    fn eat_str(&mut self) -> Result<String, TranspileError> {
        match self.next() {
            Some(Tok::Str(s)) => Ok(s.clone()),
            _ => Err(self.err()),
        }
    }

    fn eat_ident(&mut self) -> Result<String, TranspileError> {
        match self.next() {
            Some(Tok::Ident(s)) => Ok(s.clone()),
            _ => Err(self.err()),
        }
    }

    /// `db_dict['t']` or a previously defined step name.
    fn primary(&mut self) -> Result<DslExpr, TranspileError> {
        let name = self.eat_ident()?;
        if name == "db_dict" {
            self.eat(&Tok::LBracket)?;
            let table = self.eat_str()?;
            self.eat(&Tok::RBracket)?;
            Ok(DslExpr::TableRef(table))
        } else if name == "pd" {
            self.merge_call()
        } else {
            if !self.defined.contains(&name) {
                return Err(TranspileError::UndefinedName(name));
            }
            Ok(DslExpr::StepRef(name))
        }
    }

    /// `pd.merge(left, right, on='c', how='inner')` (the `pd` ident is
    /// already consumed).
    fn merge_call(&mut self) -> Result<DslExpr, TranspileError> {
        self.eat(&Tok::Dot)?;
        if self.eat_ident()? != "merge" {
            return Err(self.err());
        }
        self.eat(&Tok::LParen)?;
        let left = self.expr()?;
        self.eat(&Tok::Comma)?;
        let right = self.expr()?;
        let mut on = None;
        let mut how = MergeHow::Inner;
        while self.peek() == Some(&Tok::Comma) {
            self.pos += 1;
            let kw = self.eat_ident()?;
            self.eat(&Tok::Assign)?;
            let value = self.eat_str()?;
            match kw.as_str() {
                "on" => on = Some(value),
                "how" => {
                    how = match value.as_str() {
                        "inner" => MergeHow::Inner,
                        "left" => MergeHow::Left,
                        _ => return Err(self.err()),
                    }
                }
                _ => return Err(self.err()),
            }
        }
        self.eat(&Tok::RParen)?;
        let on = on.ok_or_else(|| self.err())?;
        Ok(DslExpr::Merge {
            left: Box::new(left),
            right: Box::new(right),
            on,
            how,
        })
    }

    fn expr(&mut self) -> Result<DslExpr, TranspileError> {
        let mut cur = self.primary()?;
        loop {
            match self.peek() {
                Some(Tok::LBracket) => {
                    self.pos += 1;
                    if self.peek() == Some(&Tok::LBracket) {
                        // [['a', 'b']] column selection
                        self.pos += 1;
                        let mut columns = vec![self.eat_str()?];
                        while self.peek() == Some(&Tok::Comma) {
                            self.pos += 1;
                            columns.push(self.eat_str()?);
                        }
                        self.eat(&Tok::RBracket)?;
                        self.eat(&Tok::RBracket)?;
                        cur = DslExpr::ColumnSelect {
                            src: Box::new(cur),
                            columns,
                        };
                    } else {
                        // Boolean mask; only valid over a named source.
                        cur = self.mask(cur)?;
                        self.eat(&Tok::RBracket)?;
                    }
                }
                Some(Tok::Dot) => {
                    self.pos += 1;
                    let method = self.eat_ident()?;
                    cur = match method.as_str() {
                        "groupby" => self.group_agg(cur)?,
                        "sort_values" => self.sort(cur)?,
                        "head" => {
                            self.eat(&Tok::LParen)?;
                            let n = match self.next() {
                                Some(Tok::Int(n)) if *n >= 0 => *n as u64,
                                _ => return Err(self.err()),
                            };
                            self.eat(&Tok::RParen)?;
                            DslExpr::Limit {
                                src: Box::new(cur),
                                n,
                            }
                        }
                        _ => return Err(self.err()),
                    };
                }
                _ => break,
            }
        }
        Ok(cur)
    }

    /// The inside of a `src[...]` boolean mask: a conjunction of
    /// comparisons, or a single (possibly negated) `isin` membership test.
    fn mask(&mut self, src: DslExpr) -> Result<DslExpr, TranspileError> {
        if !matches!(src, DslExpr::StepRef(_) | DslExpr::TableRef(_)) {
            return Err(self.err());
        }
        // Negated membership: src[~src['c'].isin(...)]
        if self.peek() == Some(&Tok::Tilde) {
            self.pos += 1;
            return self.isin(src, true);
        }
        // Try a membership test first: base['c'].isin(other['oc'])
        let save = self.pos;
        if let Ok(e) = self.isin(src.clone(), false) {
            return Ok(e);
        }
        self.pos = save;
        let mut predicate = vec![self.comparison(&src)?];
        while self.peek() == Some(&Tok::Amp) {
            self.pos += 1;
            predicate.push(self.comparison(&src)?);
        }
        Ok(DslExpr::Filter {
            src: Box::new(src),
            predicate,
        })
    }

    /// `base['c'] op literal`, optionally parenthesized; base must repeat
    /// the mask subject.
    fn comparison(&mut self, src: &DslExpr) -> Result<Comparison, TranspileError> {
        let parens = self.peek() == Some(&Tok::LParen);
        if parens {
            self.pos += 1;
        }
        let base = self.primary()?;
        if &base != src {
            return Err(self.err());
        }
        self.eat(&Tok::LBracket)?;
        let column = self.eat_str()?;
        self.eat(&Tok::RBracket)?;
        let op = match self.next() {
            Some(Tok::Cmp(op)) => *op,
            _ => return Err(self.err()),
        };
        let value = match self.next() {
            Some(Tok::Int(v)) => Literal::Int(*v),
            Some(Tok::Float(v)) => Literal::Real(*v),
            Some(Tok::Str(s)) => Literal::Text(s.clone()),
            _ => return Err(self.err()),
        };
        if parens {
            self.eat(&Tok::RParen)?;
        }
        Ok(Comparison { column, op, value })
    }

    /// `base['c'].isin(other['oc'])`; base must repeat the mask subject and
    /// `other` must be a named source.
    fn isin(&mut self, src: DslExpr, negated: bool) -> Result<DslExpr, TranspileError> {
        let base = self.primary()?;
        if base != src {
            return Err(self.err());
        }
        self.eat(&Tok::LBracket)?;
        let column = self.eat_str()?;
        self.eat(&Tok::RBracket)?;
        self.eat(&Tok::Dot)?;
        if self.eat_ident()? != "isin" {
            return Err(self.err());
        }
        self.eat(&Tok::LParen)?;
        let other = self.primary()?;
        if !matches!(other, DslExpr::StepRef(_) | DslExpr::TableRef(_)) {
            return Err(self.err());
        }
        self.eat(&Tok::LBracket)?;
        let other_column = self.eat_str()?;
        self.eat(&Tok::RBracket)?;
        self.eat(&Tok::RParen)?;
        Ok(DslExpr::IsIn {
            src: Box::new(src),
            column,
            other: Box::new(other),
            other_column,
            negated,
        })
    }

    /// `.groupby(keys).agg({'col': 'func', ...})`; `groupby` already eaten.
    fn group_agg(&mut self, src: DslExpr) -> Result<DslExpr, TranspileError> {
        self.eat(&Tok::LParen)?;
        let keys = self.string_or_list()?;
        self.eat(&Tok::RParen)?;
        self.eat(&Tok::Dot)?;
        if self.eat_ident()? != "agg" {
            return Err(self.err());
        }
        self.eat(&Tok::LParen)?;
        self.eat(&Tok::LBrace)?;
        let mut aggs = Vec::new();
        loop {
            let col = self.eat_str()?;
            self.eat(&Tok::Colon)?;
            let func = self.eat_str()?;
            let func = AggFunc::parse(&func).ok_or_else(|| self.err())?;
            aggs.push((col, func));
            if self.peek() == Some(&Tok::Comma) {
                self.pos += 1;
            } else {
                break;
            }
        }
        self.eat(&Tok::RBrace)?;
        self.eat(&Tok::RParen)?;
        Ok(DslExpr::GroupAgg {
            src: Box::new(src),
            keys,
            aggs,
        })
    }

    /// `.sort_values(by=..., ascending=...)`; `sort_values` already eaten.
    fn sort(&mut self, src: DslExpr) -> Result<DslExpr, TranspileError> {
        self.eat(&Tok::LParen)?;
        let keys = match self.peek() {
            Some(Tok::Ident(kw)) if kw == "by" => {
                self.pos += 1;
                self.eat(&Tok::Assign)?;
                self.string_or_list()?
            }
            _ => self.string_or_list()?,
        };
        let mut desc = vec![false; keys.len()];
        if self.peek() == Some(&Tok::Comma) {
            self.pos += 1;
            let kw = self.eat_ident()?;
            if kw != "ascending" {
                return Err(self.err());
            }
            self.eat(&Tok::Assign)?;
            let flags = self.bool_or_list()?;
            if flags.len() == 1 {
                desc = vec![!flags[0]; keys.len()];
            } else if flags.len() == keys.len() {
                desc = flags.iter().map(|a| !a).collect();
            } else {
                return Err(self.err());
            }
        }
        self.eat(&Tok::RParen)?;
        Ok(DslExpr::Sort {
            src: Box::new(src),
            keys,
            desc,
        })
    }

    fn string_or_list(&mut self) -> Result<Vec<String>, TranspileError> {
        match self.peek() {
            Some(Tok::Str(_)) => Ok(vec![self.eat_str()?]),
            Some(Tok::LBracket) => {
                self.pos += 1;
                let mut items = vec![self.eat_str()?];
                while self.peek() == Some(&Tok::Comma) {
                    self.pos += 1;
                    items.push(self.eat_str()?);
                }
                self.eat(&Tok::RBracket)?;
                Ok(items)
            }
            _ => Err(self.err()),
        }
    }

    fn bool_or_list(&mut self) -> Result<Vec<bool>, TranspileError> {
        let one = |p: &mut Self| -> Result<bool, TranspileError> {
            match p.next() {
                Some(Tok::Ident(s)) if s == "True" => Ok(true),
                Some(Tok::Ident(s)) if s == "False" => Ok(false),
                _ => Err(p.err()),
            }
        };
        match self.peek() {
            Some(Tok::LBracket) => {
                self.pos += 1;
                let mut items = vec![one(self)?];
                while self.peek() == Some(&Tok::Comma) {
                    self.pos += 1;
                    items.push(one(self)?);
                }
                self.eat(&Tok::RBracket)?;
                Ok(items)
            }
            _ => Ok(vec![one(self)?]),
        }
    }
}

fn target_name_ok(name: &str) -> bool {
    if name == "result" {
        return true;
    }
    name.strip_prefix("step")
        .and_then(|rest| rest.strip_suffix("_result"))
        .map(|mid| !mid.is_empty() && mid.bytes().all(|b| b.is_ascii_digit()))
        .unwrap_or(false)
}

/// Parse one program from already-extracted code text (one statement per
/// line; blank lines and `#` comments skipped).
pub fn parse_program(code: &str) -> Result<CodeBlockProgram, TranspileError> {
    let mut steps: Vec<Step> = Vec::new();
    let mut defined: HashSet<String> = HashSet::new();
    for line in code.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let toks = tokenize(trimmed)?;
        if toks.is_empty() {
            continue;
        }
        let mut p = Parser {
            toks: &toks,
            pos: 0,
            line: trimmed,
            defined: &defined,
        };
        let target = p.eat_ident()?;
        p.eat(&Tok::Assign)?;
        if !target_name_ok(&target) {
            return Err(TranspileError::UnsupportedConstruct(trimmed.to_string()));
        }
        if defined.contains(&target) {
            return Err(TranspileError::UnsupportedConstruct(trimmed.to_string()));
        }
        let expr = p.expr()?;
        if p.pos != toks.len() {
            return Err(p.err());
        }
        defined.insert(target.clone());
        steps.push(Step { target, expr });
    }
    if steps.is_empty() {
        return Err(TranspileError::NoCodeFound);
    }
    Ok(CodeBlockProgram { steps })
}

/// Extract fenced code from assistant text and parse it as a program. Fences
/// tagged `python`/`py` and untagged fences count, in order of appearance.
pub fn parse_codeblocks(assistant_text: &str) -> Result<CodeBlockProgram, TranspileError> {
    let mut code = String::new();
    for tag in ["python", "py", ""] {
        for block in prompts::extract_fenced(assistant_text, tag) {
            code.push_str(&block.content);
            code.push('\n');
        }
    }
    if code.trim().is_empty() {
        return Err(TranspileError::NoCodeFound);
    }
    parse_program(&code)
}

// ---------------------------------------------------------------------------
// Pretty printer
// ---------------------------------------------------------------------------

fn pretty_expr(expr: &DslExpr, out: &mut String) {
    match expr {
        DslExpr::StepRef(name) => out.push_str(name),
        DslExpr::TableRef(t) => {
            let _ = write!(out, "db_dict['{t}']");
        }
        DslExpr::ColumnSelect { src, columns } => {
            pretty_expr(src, out);
            let quoted: Vec<String> = columns.iter().map(|c| format!("'{c}'")).collect();
            let _ = write!(out, "[[{}]]", quoted.join(", "));
        }
        DslExpr::Filter { src, predicate } => {
            pretty_expr(src, out);
            out.push('[');
            let mut base = String::new();
            pretty_expr(src, &mut base);
            let terms: Vec<String> = predicate
                .iter()
                .map(|c| {
                    format!(
                        "({base}['{}'] {} {})",
                        c.column,
                        c.op.as_str(),
                        c.value.dsl()
                    )
                })
                .collect();
            out.push_str(&terms.join(" & "));
            out.push(']');
        }
        DslExpr::Merge {
            left,
            right,
            on,
            how,
        } => {
            out.push_str("pd.merge(");
            pretty_expr(left, out);
            out.push_str(", ");
            pretty_expr(right, out);
            let _ = write!(out, ", on='{on}', how='{}')", how.as_str());
        }
        DslExpr::GroupAgg { src, keys, aggs } => {
            pretty_expr(src, out);
            let quoted: Vec<String> = keys.iter().map(|k| format!("'{k}'")).collect();
            let _ = write!(out, ".groupby([{}])", quoted.join(", "));
            let pairs: Vec<String> = aggs
                .iter()
                .map(|(c, f)| format!("'{c}': '{}'", f.dsl_name()))
                .collect();
            let _ = write!(out, ".agg({{{}}})", pairs.join(", "));
        }
        DslExpr::Sort { src, keys, desc } => {
            pretty_expr(src, out);
            let quoted: Vec<String> = keys.iter().map(|k| format!("'{k}'")).collect();
            let flags: Vec<&str> = desc.iter().map(|d| if *d { "False" } else { "True" }).collect();
            let _ = write!(
                out,
                ".sort_values(by=[{}], ascending=[{}])",
                quoted.join(", "),
                flags.join(", ")
            );
        }
        DslExpr::Limit { src, n } => {
            pretty_expr(src, out);
            let _ = write!(out, ".head({n})");
        }
        DslExpr::IsIn {
            src,
            column,
            other,
            other_column,
            negated,
        } => {
            pretty_expr(src, out);
            out.push('[');
            if *negated {
                out.push('~');
            }
            let mut base = String::new();
            pretty_expr(src, &mut base);
            let mut other_s = String::new();
            pretty_expr(other, &mut other_s);
            let _ = write!(
                out,
                "{base}['{column}'].isin({other_s}['{other_column}'])"
            );
            out.push(']');
        }
    }
}

/// Print a program back as DSL text; parsing the output reproduces the same
/// step DAG.
pub fn pretty_print(program: &CodeBlockProgram) -> String {
    let mut out = String::new();
    for step in &program.steps {
        out.push_str(&step.target);
        out.push_str(" = ");
        pretty_expr(&step.expr, &mut out);
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Lowering to SQL
// ---------------------------------------------------------------------------

struct SqlSel {
    /// Output columns in order: (name, select expression).
    select: Vec<(String, String)>,
    from: String,
    wheres: Vec<String>,
    group_by: Vec<String>,
    order_by: Vec<String>,
    limit: Option<u64>,
}

impl SqlSel {
    fn col_expr(&self, name: &str) -> Option<&str> {
        self.select
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| e.as_str())
    }

    fn render(&self) -> String {
        let sel: Vec<String> = self
            .select
            .iter()
            .map(|(name, expr)| {
                let implied = expr.rsplit('.').next().unwrap_or(expr);
                if implied == name {
                    expr.clone()
                } else {
                    format!("{expr} AS {name}")
                }
            })
            .collect();
        let mut sql = format!("SELECT {} FROM {}", sel.join(", "), self.from);
        if !self.wheres.is_empty() {
            let _ = write!(sql, " WHERE {}", self.wheres.join(" AND "));
        }
        if !self.group_by.is_empty() {
            let _ = write!(sql, " GROUP BY {}", self.group_by.join(", "));
        }
        if !self.order_by.is_empty() {
            let _ = write!(sql, " ORDER BY {}", self.order_by.join(", "));
        }
        if let Some(n) = self.limit {
            let _ = write!(sql, " LIMIT {n}");
        }
        sql
    }
}

struct Lowerer<'a> {
    schema: &'a DatabaseSchema,
    steps: HashMap<String, String>, // target -> rendered SQL
    step_cols: HashMap<String, Vec<String>>,
    next_alias: usize,
}

impl<'a> Lowerer<'a> {
    fn alias(&mut self) -> String {
        self.next_alias += 1;
        format!("T{}", self.next_alias)
    }

    fn table_cols(&self, name: &str) -> Result<Vec<String>, TranspileError> {
        self.schema
            .table(name)
            .map(|t| t.columns.iter().map(|c| c.name.clone()).collect())
            .ok_or_else(|| TranspileError::SchemaMismatch(format!("no such table `{name}`")))
    }

    /// Lower an expression into a fresh FROM source: either an inline table
    /// or a parenthesized subquery.
    fn as_source(&mut self, expr: &DslExpr) -> Result<SqlSel, TranspileError> {
        match expr {
            DslExpr::TableRef(t) => {
                let cols = self.table_cols(t)?;
                let alias = self.alias();
                Ok(SqlSel {
                    select: cols
                        .iter()
                        .map(|c| (c.clone(), format!("{alias}.{c}")))
                        .collect(),
                    from: format!("{t} AS {alias}"),
                    wheres: vec![],
                    group_by: vec![],
                    order_by: vec![],
                    limit: None,
                })
            }
            DslExpr::StepRef(name) => {
                let sql = self
                    .steps
                    .get(name)
                    .cloned()
                    .ok_or_else(|| TranspileError::UndefinedName(name.clone()))?;
                let cols = self.step_cols[name].clone();
                let alias = self.alias();
                Ok(SqlSel {
                    select: cols
                        .iter()
                        .map(|c| (c.clone(), format!("{alias}.{c}")))
                        .collect(),
                    from: format!("({sql}) AS {alias}"),
                    wheres: vec![],
                    group_by: vec![],
                    order_by: vec![],
                    limit: None,
                })
            }
            other => {
                let inner = self.lower(other)?;
                Ok(self.wrap(inner))
            }
        }
    }

    fn wrap(&mut self, q: SqlSel) -> SqlSel {
        let alias = self.alias();
        let names: Vec<String> = q.select.iter().map(|(n, _)| n.clone()).collect();
        SqlSel {
            select: names
                .iter()
                .map(|n| (n.clone(), format!("{alias}.{n}")))
                .collect(),
            from: format!("({}) AS {alias}", q.render()),
            wheres: vec![],
            group_by: vec![],
            order_by: vec![],
            limit: None,
        }
    }

    fn require_col<'q>(q: &'q SqlSel, col: &str) -> Result<&'q str, TranspileError> {
        q.col_expr(col)
            .ok_or_else(|| TranspileError::SchemaMismatch(format!("no such column `{col}`")))
    }

    fn lower(&mut self, expr: &DslExpr) -> Result<SqlSel, TranspileError> {
        match expr {
            DslExpr::TableRef(_) | DslExpr::StepRef(_) => self.as_source(expr),
            DslExpr::ColumnSelect { src, columns } => {
                let q = self.lower(src)?;
                let q = if q.limit.is_some() { self.wrap(q) } else { q };
                let mut select = Vec::with_capacity(columns.len());
                for c in columns {
                    let e = Self::require_col(&q, c)?.to_string();
                    select.push((c.clone(), e));
                }
                Ok(SqlSel { select, ..q })
            }
            DslExpr::Filter { src, predicate } => {
                let q = self.lower(src)?;
                let mut q = if q.group_by.is_empty() && q.limit.is_none() {
                    q
                } else {
                    self.wrap(q)
                };
                for cmp in predicate {
                    let e = Self::require_col(&q, &cmp.column)?.to_string();
                    q.wheres
                        .push(format!("{e} {} {}", cmp.op.sql(), cmp.value.sql()));
                }
                Ok(q)
            }
            DslExpr::Merge {
                left,
                right,
                on,
                how,
            } => {
                let l = self.as_source(left)?;
                let r = self.as_source(right)?;
                let l_on = Self::require_col(&l, on)?.to_string();
                let r_on = Self::require_col(&r, on)?.to_string();
                // Disjoint column names apart from the join key.
                for (name, _) in &r.select {
                    if name != on && l.col_expr(name).is_some() {
                        return Err(TranspileError::SchemaMismatch(format!(
                            "ambiguous column `{name}` after merge"
                        )));
                    }
                }
                let join_kw = match how {
                    MergeHow::Inner => "JOIN",
                    MergeHow::Left => "LEFT JOIN",
                };
                let mut select = l.select.clone();
                select.extend(r.select.iter().filter(|(n, _)| n != on).cloned());
                Ok(SqlSel {
                    select,
                    from: format!("{} {join_kw} {} ON {l_on} = {r_on}", l.from, r.from),
                    wheres: l
                        .wheres
                        .iter()
                        .chain(r.wheres.iter())
                        .cloned()
                        .collect(),
                    group_by: vec![],
                    order_by: vec![],
                    limit: None,
                })
            }
            DslExpr::GroupAgg { src, keys, aggs } => {
                let q = self.lower(src)?;
                let q = if q.group_by.is_empty() && q.limit.is_none() {
                    q
                } else {
                    self.wrap(q)
                };
                let mut select = Vec::new();
                let mut group_by = Vec::new();
                for k in keys {
                    let e = Self::require_col(&q, k)?.to_string();
                    group_by.push(e.clone());
                    select.push((k.clone(), e));
                }
                for (col, func) in aggs {
                    let e = Self::require_col(&q, col)?.to_string();
                    select.push((
                        format!("{}_{col}", func.dsl_name()),
                        format!("{}({e})", func.sql_name()),
                    ));
                }
                Ok(SqlSel {
                    select,
                    group_by,
                    order_by: vec![],
                    ..q
                })
            }
            DslExpr::Sort { src, keys, desc } => {
                let q = self.lower(src)?;
                let mut q = if q.limit.is_none() { q } else { self.wrap(q) };
                let mut order_by = Vec::new();
                for (k, d) in keys.iter().zip(desc) {
                    let e = Self::require_col(&q, k)?.to_string();
                    order_by.push(format!("{e}{}", if *d { " DESC" } else { "" }));
                }
                // Remaining columns break ties so row order is deterministic
                // on both execution routes.
                for (name, e) in &q.select {
                    if !keys.contains(name) {
                        order_by.push(e.clone());
                    }
                }
                q.order_by = order_by;
                Ok(q)
            }
            DslExpr::Limit { src, n } => {
                let q = self.lower(src)?;
                let mut q = if q.limit.is_none() { q } else { self.wrap(q) };
                q.limit = Some(*n);
                Ok(q)
            }
            DslExpr::IsIn {
                src,
                column,
                other,
                other_column,
                negated,
            } => {
                let q = self.lower(src)?;
                let mut q = if q.group_by.is_empty() && q.limit.is_none() {
                    q
                } else {
                    self.wrap(q)
                };
                let e = Self::require_col(&q, column)?.to_string();
                let sub = self.lower(&DslExpr::ColumnSelect {
                    src: other.clone(),
                    columns: vec![other_column.clone()],
                })?;
                let kw = if *negated { "NOT IN" } else { "IN" };
                q.wheres.push(format!("{e} {kw} ({})", sub.render()));
                Ok(q)
            }
        }
    }
}

/// Lower a parsed program to a single SELECT statement.
///
/// Intermediate steps become nested subqueries; aliases `T1, T2, ...` are
/// assigned deterministically, so identical programs produce byte-identical
/// SQL.
pub fn lower_to_sql(
    program: &CodeBlockProgram,
    schema: &DatabaseSchema,
) -> Result<SqlQuery, TranspileError> {
    let mut lowerer = Lowerer {
        schema,
        steps: HashMap::new(),
        step_cols: HashMap::new(),
        next_alias: 0,
    };
    let mut last_sql = None;
    for step in &program.steps {
        let q = lowerer.lower(&step.expr)?;
        let sql = q.render();
        let cols: Vec<String> = q.select.iter().map(|(n, _)| n.clone()).collect();
        lowerer.steps.insert(step.target.clone(), sql.clone());
        lowerer.step_cols.insert(step.target.clone(), cols);
        last_sql = Some(sql);
    }
    let final_target = program
        .final_step()
        .ok_or(TranspileError::UnloweredVariant)?
        .target
        .clone();
    let sql = lowerer
        .steps
        .get(&final_target)
        .cloned()
        .or(last_sql)
        .ok_or(TranspileError::UnloweredVariant)?;
    Ok(SqlQuery::new(sql))
}

// ---------------------------------------------------------------------------
// Interpreter (independent oracle)
// ---------------------------------------------------------------------------

use std::cmp::Ordering;

/// SQLite-style three-way comparison for sorting: NULL first, then numerics,
/// then text, then blobs.
pub fn cell_cmp(a: &CellValue, b: &CellValue) -> Ordering {
    fn rank(c: &CellValue) -> u8 {
        match c {
            CellValue::Null => 0,
            CellValue::Int(_) | CellValue::Real(_) => 1,
            CellValue::Text(_) => 2,
            CellValue::Blob(_) => 3,
        }
    }
    match (a, b) {
        (CellValue::Int(x), CellValue::Int(y)) => x.cmp(y),
        (CellValue::Int(x), CellValue::Real(y)) => {
            (*x as f64).partial_cmp(y).unwrap_or(Ordering::Equal)
        }
        (CellValue::Real(x), CellValue::Int(y)) => {
            x.partial_cmp(&(*y as f64)).unwrap_or(Ordering::Equal)
        }
        (CellValue::Real(x), CellValue::Real(y)) => x.partial_cmp(y).unwrap_or(Ordering::Equal),
        (CellValue::Text(x), CellValue::Text(y)) => x.as_bytes().cmp(y.as_bytes()),
        (CellValue::Blob(x), CellValue::Blob(y)) => x.cmp(y),
        _ => rank(a).cmp(&rank(b)),
    }
}

/// Three-valued comparison used by filters: any NULL operand fails the
/// predicate.
fn cmp_truth(a: &CellValue, op: CmpOp, b: &CellValue) -> bool {
    if matches!(a, CellValue::Null) || matches!(b, CellValue::Null) {
        return false;
    }
    let ord = cell_cmp(a, b);
    match op {
        CmpOp::Eq => ord == Ordering::Equal,
        CmpOp::Ne => ord != Ordering::Equal,
        CmpOp::Lt => ord == Ordering::Less,
        CmpOp::Le => ord != Ordering::Greater,
        CmpOp::Gt => ord == Ordering::Greater,
        CmpOp::Ge => ord != Ordering::Less,
    }
}

fn sql_eq(a: &CellValue, b: &CellValue) -> bool {
    cmp_truth(a, CmpOp::Eq, b)
}

struct Interp<'a> {
    tables: &'a BTreeMap<String, ResultTable>,
    env: HashMap<String, ResultTable>,
}

impl<'a> Interp<'a> {
    fn col_index(t: &ResultTable, name: &str) -> Result<usize, TranspileError> {
        t.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| TranspileError::SchemaMismatch(format!("no such column `{name}`")))
    }

    fn eval(&mut self, expr: &DslExpr) -> Result<ResultTable, TranspileError> {
        match expr {
            DslExpr::TableRef(name) => self
                .tables
                .get(name)
                .cloned()
                .ok_or_else(|| TranspileError::SchemaMismatch(format!("no such table `{name}`"))),
            DslExpr::StepRef(name) => self
                .env
                .get(name)
                .cloned()
                .ok_or_else(|| TranspileError::UndefinedName(name.clone())),
            DslExpr::ColumnSelect { src, columns } => {
                let t = self.eval(src)?;
                let idx: Vec<usize> = columns
                    .iter()
                    .map(|c| Self::col_index(&t, c))
                    .collect::<Result<_, _>>()?;
                Ok(ResultTable {
                    columns: columns.clone(),
                    rows: t
                        .rows
                        .iter()
                        .map(|r| idx.iter().map(|&i| r[i].clone()).collect())
                        .collect(),
                    truncated: false,
                })
            }
            DslExpr::Filter { src, predicate } => {
                let t = self.eval(src)?;
                let checks: Vec<(usize, CmpOp, CellValue)> = predicate
                    .iter()
                    .map(|c| Ok((Self::col_index(&t, &c.column)?, c.op, c.value.cell())))
                    .collect::<Result<_, TranspileError>>()?;
                let rows = t
                    .rows
                    .iter()
                    .filter(|r| checks.iter().all(|(i, op, v)| cmp_truth(&r[*i], *op, v)))
                    .cloned()
                    .collect();
                Ok(ResultTable {
                    columns: t.columns.clone(),
                    rows,
                    truncated: false,
                })
            }
            DslExpr::Merge {
                left,
                right,
                on,
                how,
            } => {
                let l = self.eval(left)?;
                let r = self.eval(right)?;
                let li = Self::col_index(&l, on)?;
                let ri = Self::col_index(&r, on)?;
                let keep_r: Vec<usize> = (0..r.columns.len()).filter(|&i| i != ri).collect();
                for &i in &keep_r {
                    if l.columns.contains(&r.columns[i]) {
                        return Err(TranspileError::SchemaMismatch(format!(
                            "ambiguous column `{}` after merge",
                            r.columns[i]
                        )));
                    }
                }
                let mut columns = l.columns.clone();
                columns.extend(keep_r.iter().map(|&i| r.columns[i].clone()));
                let mut rows = Vec::new();
                for lr in &l.rows {
                    let mut matched = false;
                    for rr in &r.rows {
                        if sql_eq(&lr[li], &rr[ri]) {
                            matched = true;
                            let mut row = lr.clone();
                            row.extend(keep_r.iter().map(|&i| rr[i].clone()));
                            rows.push(row);
                        }
                    }
                    if !matched && *how == MergeHow::Left {
                        let mut row = lr.clone();
                        row.extend(keep_r.iter().map(|_| CellValue::Null));
                        rows.push(row);
                    }
                }
                Ok(ResultTable {
                    columns,
                    rows,
                    truncated: false,
                })
            }
            DslExpr::GroupAgg { src, keys, aggs } => {
                let t = self.eval(src)?;
                let key_idx: Vec<usize> = keys
                    .iter()
                    .map(|k| Self::col_index(&t, k))
                    .collect::<Result<_, _>>()?;
                let agg_idx: Vec<(usize, AggFunc)> = aggs
                    .iter()
                    .map(|(c, f)| Ok((Self::col_index(&t, c)?, *f)))
                    .collect::<Result<_, TranspileError>>()?;
                // Group keys treat NULLs as equal, like SQL GROUP BY.
                let mut order: Vec<Vec<CellValue>> = Vec::new();
                let mut groups: Vec<Vec<&Vec<CellValue>>> = Vec::new();
                for row in &t.rows {
                    let key: Vec<CellValue> = key_idx.iter().map(|&i| row[i].clone()).collect();
                    let slot = order.iter().position(|k| {
                        k.iter().zip(&key).all(|(a, b)| {
                            matches!((a, b), (CellValue::Null, CellValue::Null)) || sql_eq(a, b)
                        })
                    });
                    match slot {
                        Some(i) => groups[i].push(row),
                        None => {
                            order.push(key);
                            groups.push(vec![row]);
                        }
                    }
                }
                let mut columns = keys.clone();
                columns.extend(aggs.iter().map(|(c, f)| format!("{}_{c}", f.dsl_name())));
                let mut rows = Vec::with_capacity(groups.len());
                for (key, members) in order.into_iter().zip(groups) {
                    let mut row = key;
                    for (i, func) in &agg_idx {
                        let values: Vec<&CellValue> = members
                            .iter()
                            .map(|r| &r[*i])
                            .filter(|v| !matches!(v, CellValue::Null))
                            .collect();
                        row.push(aggregate(*func, &values));
                    }
                    rows.push(row);
                }
                Ok(ResultTable {
                    columns,
                    rows,
                    truncated: false,
                })
            }
            DslExpr::Sort { src, keys, desc } => {
                let t = self.eval(src)?;
                let mut spec: Vec<(usize, bool)> = keys
                    .iter()
                    .zip(desc)
                    .map(|(k, d)| Ok((Self::col_index(&t, k)?, *d)))
                    .collect::<Result<_, TranspileError>>()?;
                // Same tiebreak as the lowering: remaining columns ascending.
                for (i, c) in t.columns.iter().enumerate() {
                    if !keys.contains(c) {
                        spec.push((i, false));
                    }
                }
                let mut rows = t.rows.clone();
                rows.sort_by(|a, b| {
                    for (i, d) in &spec {
                        let ord = cell_cmp(&a[*i], &b[*i]);
                        let ord = if *d { ord.reverse() } else { ord };
                        if ord != Ordering::Equal {
                            return ord;
                        }
                    }
                    Ordering::Equal
                });
                Ok(ResultTable {
                    columns: t.columns.clone(),
                    rows,
                    truncated: false,
                })
            }
            DslExpr::Limit { src, n } => {
                let mut t = self.eval(src)?;
                t.rows.truncate(*n as usize);
                Ok(t)
            }
            DslExpr::IsIn {
                src,
                column,
                other,
                other_column,
                negated,
            } => {
                let t = self.eval(src)?;
                let o = self.eval(other)?;
                let ci = Self::col_index(&t, column)?;
                let oi = Self::col_index(&o, other_column)?;
                let set: Vec<&CellValue> = o.rows.iter().map(|r| &r[oi]).collect();
                let set_has_null = set.iter().any(|v| matches!(v, CellValue::Null));
                let rows = t
                    .rows
                    .iter()
                    .filter(|r| {
                        let x = &r[ci];
                        if matches!(x, CellValue::Null) {
                            return false;
                        }
                        let found = set.iter().any(|v| sql_eq(x, v));
                        if *negated {
                            // NOT IN over a set containing NULL matches no row.
                            !found && !set_has_null
                        } else {
                            found
                        }
                    })
                    .cloned()
                    .collect();
                Ok(ResultTable {
                    columns: t.columns.clone(),
                    rows,
                    truncated: false,
                })
            }
        }
    }
}

fn aggregate(func: AggFunc, values: &[&CellValue]) -> CellValue {
    match func {
        AggFunc::Count => CellValue::Int(values.len() as i64),
        AggFunc::Sum | AggFunc::Avg => {
            if values.is_empty() {
                return CellValue::Null;
            }
            let any_real = values.iter().any(|v| matches!(v, CellValue::Real(_)));
            if func == AggFunc::Avg || any_real {
                let total: f64 = values
                    .iter()
                    .map(|v| match v {
                        CellValue::Int(x) => *x as f64,
                        CellValue::Real(x) => *x,
                        _ => 0.0,
                    })
                    .sum();
                match func {
                    AggFunc::Avg => CellValue::Real(total / values.len() as f64),
                    _ => CellValue::Real(total),
                }
            } else {
                let total: i64 = values
                    .iter()
                    .map(|v| match v {
                        CellValue::Int(x) => *x,
                        _ => 0,
                    })
                    .sum();
                CellValue::Int(total)
            }
        }
        AggFunc::Min => values
            .iter()
            .min_by(|a, b| cell_cmp(a, b))
            .map(|v| (*v).clone())
            .unwrap_or(CellValue::Null),
        AggFunc::Max => values
            .iter()
            .max_by(|a, b| cell_cmp(a, b))
            .map(|v| (*v).clone())
            .unwrap_or(CellValue::Null),
    }
}

/// Evaluate a program over in-memory tables with SQL multiset and null
/// semantics. This is the independent oracle the lowering is checked
/// against.
pub fn interpret(
    program: &CodeBlockProgram,
    tables: &BTreeMap<String, ResultTable>,
) -> Result<ResultTable, TranspileError> {
    let mut interp = Interp {
        tables,
        env: HashMap::new(),
    };
    let mut last = None;
    for step in &program.steps {
        let t = interp.eval(&step.expr)?;
        interp.env.insert(step.target.clone(), t.clone());
        last = Some(t);
    }
    let final_target = program
        .final_step()
        .ok_or(TranspileError::UnloweredVariant)?
        .target
        .clone();
    interp
        .env
        .get(&final_target)
        .cloned()
        .or(last)
        .ok_or(TranspileError::UnloweredVariant)
}
