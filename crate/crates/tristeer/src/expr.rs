//! A minimal pure-expression language for defining system blocks in config
//! files: literals, named variables, `+ - * / ^` with unary minus, the
//! functions `sin cos exp ln abs pow`, and `piecewise(cond, a, b)` with the
//! comparisons `< <= > >=`. `piecewise` evaluates only the taken branch.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
}

impl fmt::Display for CmpOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Ln,
    Abs,
}

impl Func {
    fn name(&self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Ln => "ln",
            Func::Abs => "abs",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(String),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
    Pow2(Box<Expr>, Box<Expr>),
    Piecewise {
        lhs: Box<Expr>,
        op: CmpOp,
        rhs: Box<Expr>,
        then: Box<Expr>,
        otherwise: Box<Expr>,
    },
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdent { offset: usize, name: String },
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("ln of non-positive value {0}")]
    LnDomain(f64),
    #[error("division by zero")]
    DivByZero,
    #[error("unbound variable `{0}`")]
    UnboundVar(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
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
    Cmp(CmpOp),
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Self {
            src: src.as_bytes(),
            pos: 0,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn next(&mut self) -> Result<Option<(usize, Tok)>, ParseError> {
        self.skip_ws();
        if self.pos >= self.src.len() {
            return Ok(None);
        }
        let start = self.pos;
        let c = self.src[self.pos];
        let tok = match c {
            b'+' => {
                self.pos += 1;
                Tok::Plus
            }
            b'-' => {
                self.pos += 1;
                Tok::Minus
            }
            b'*' => {
                self.pos += 1;
                Tok::Star
            }
            b'/' => {
                self.pos += 1;
                Tok::Slash
            }
            b'^' => {
                self.pos += 1;
                Tok::Caret
            }
            b'(' => {
                self.pos += 1;
                Tok::LParen
            }
            b')' => {
                self.pos += 1;
                Tok::RParen
            }
            b',' => {
                self.pos += 1;
                Tok::Comma
            }
            b'<' | b'>' => {
                self.pos += 1;
                let eq = self.pos < self.src.len() && self.src[self.pos] == b'=';
                if eq {
                    self.pos += 1;
                }
                Tok::Cmp(match (c, eq) {
                    (b'<', false) => CmpOp::Lt,
                    (b'<', true) => CmpOp::Le,
                    (b'>', false) => CmpOp::Gt,
                    _ => CmpOp::Ge,
                })
            }
            b'0'..=b'9' | b'.' => {
                let mut end = self.pos;
                while end < self.src.len()
                    && (self.src[end].is_ascii_digit() || self.src[end] == b'.')
                {
                    end += 1;
                }
                if end < self.src.len() && (self.src[end] | 32) == b'e' {
                    let mut e = end + 1;
                    if e < self.src.len() && (self.src[e] == b'+' || self.src[e] == b'-') {
                        e += 1;
                    }
                    if e < self.src.len() && self.src[e].is_ascii_digit() {
                        end = e;
                        while end < self.src.len() && self.src[end].is_ascii_digit() {
                            end += 1;
                        }
                    }
                }
                let text = std::str::from_utf8(&self.src[self.pos..end]).unwrap();
                let value = text.parse::<f64>().map_err(|_| ParseError::Syntax {
                    offset: start,
                    message: format!("bad number literal `{text}`"),
                })?;
                self.pos = end;
                Tok::Num(value)
            }
            b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                let mut end = self.pos;
                while end < self.src.len()
                    && (self.src[end].is_ascii_alphanumeric() || self.src[end] == b'_')
                {
                    end += 1;
                }
                let text = std::str::from_utf8(&self.src[self.pos..end]).unwrap();
                self.pos = end;
                Tok::Ident(text.to_string())
            }
            other => {
                return Err(ParseError::Syntax {
                    offset: start,
                    message: format!("unexpected byte `{}`", other as char),
                })
            }
        };
        Ok(Some((start, tok)))
    }
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    idx: usize,
    end_offset: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.idx).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.toks
            .get(self.idx)
            .map(|(o, _)| *o)
            .unwrap_or(self.end_offset)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.idx).map(|(_, t)| t.clone());
        self.idx += 1;
        t
    }

    fn expect(&mut self, want: &Tok, what: &str) -> Result<(), ParseError> {
        let off = self.offset();
        match self.bump() {
            Some(ref t) if t == want => Ok(()),
            got => Err(ParseError::Syntax {
                offset: off,
                message: format!("expected {what}, got {got:?}"),
            }),
        }
    }

    // expr := term (('+'|'-') term)*
    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.bump();
                    let rhs = self.term()?;
                    lhs = Expr::Bin(BinOp::Add, Box::new(lhs), Box::new(rhs));
                }
                Some(Tok::Minus) => {
                    self.bump();
                    let rhs = self.term()?;
                    lhs = Expr::Bin(BinOp::Sub, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    // term := unary (('*'|'/') unary)*
    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.bump();
                    let rhs = self.unary()?;
                    lhs = Expr::Bin(BinOp::Mul, Box::new(lhs), Box::new(rhs));
                }
                Some(Tok::Slash) => {
                    self.bump();
                    let rhs = self.unary()?;
                    lhs = Expr::Bin(BinOp::Div, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    // unary := '-' unary | power  (so -2^2 parses as -(2^2))
    fn unary(&mut self) -> Result<Expr, ParseError> {
        if matches!(self.peek(), Some(Tok::Minus)) {
            self.bump();
            let inner = self.unary()?;
            return Ok(Expr::Neg(Box::new(inner)));
        }
        self.power()
    }

    // power := atom ('^' unary)?  (right-associative, exponent may be signed)
    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if matches!(self.peek(), Some(Tok::Caret)) {
            self.bump();
            let exp = self.unary()?;
            return Ok(Expr::Pow2(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let off = self.offset();
        match self.bump() {
            Some(Tok::Num(v)) => Ok(Expr::Num(v)),
            Some(Tok::LParen) => {
                let e = self.expr()?;
                self.expect(&Tok::RParen, "`)`")?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                if matches!(self.peek(), Some(Tok::LParen)) {
                    self.bump();
                    let e = self.call(off, &name)?;
                    self.expect(&Tok::RParen, "`)`")?;
                    Ok(e)
                } else {
                    Ok(Expr::Var(name))
                }
            }
            got => Err(ParseError::Syntax {
                offset: off,
                message: format!("expected a value, got {got:?}"),
            }),
        }
    }

    fn call(&mut self, off: usize, name: &str) -> Result<Expr, ParseError> {
        let func = match name {
            "sin" => Some(Func::Sin),
            "cos" => Some(Func::Cos),
            "exp" => Some(Func::Exp),
            "ln" => Some(Func::Ln),
            "abs" => Some(Func::Abs),
            _ => None,
        };
        if let Some(func) = func {
            let arg = self.expr()?;
            return Ok(Expr::Call(func, Box::new(arg)));
        }
        match name {
            "pow" => {
                let base = self.expr()?;
                self.expect(&Tok::Comma, "`,`")?;
                let exp = self.expr()?;
                Ok(Expr::Pow2(Box::new(base), Box::new(exp)))
            }
            "piecewise" => {
                let lhs = self.expr()?;
                let op = match self.bump() {
                    Some(Tok::Cmp(op)) => op,
                    got => {
                        return Err(ParseError::Syntax {
                            offset: off,
                            message: format!("piecewise condition needs a comparison, got {got:?}"),
                        })
                    }
                };
                let rhs = self.expr()?;
                self.expect(&Tok::Comma, "`,`")?;
                let then = self.expr()?;
                self.expect(&Tok::Comma, "`,`")?;
                let otherwise = self.expr()?;
                Ok(Expr::Piecewise {
                    lhs: Box::new(lhs),
                    op,
                    rhs: Box::new(rhs),
                    then: Box::new(then),
                    otherwise: Box::new(otherwise),
                })
            }
            _ => Err(ParseError::UnknownIdent {
                offset: off,
                name: name.to_string(),
            }),
        }
    }
}

/// Parses an expression with standard precedence
/// (`^` right-assoc > unary `-` > `* /` > `+ -`).
pub fn parse_expr(src: &str) -> Result<Expr, ParseError> {
    let mut lexer = Lexer::new(src);
    let mut toks = Vec::new();
    while let Some(t) = lexer.next()? {
        toks.push(t);
    }
    let mut parser = Parser {
        toks,
        idx: 0,
        end_offset: src.len(),
    };
    let e = parser.expr()?;
    if parser.idx != parser.toks.len() {
        return Err(ParseError::Syntax {
            offset: parser.offset(),
            message: "trailing input".to_string(),
        });
    }
    Ok(e)
}

impl Expr {
    /// Evaluates against a variable lookup. Total on finite inputs except
    /// `ln` of a non-positive value and division by zero; the untaken branch
    /// of `piecewise` is not evaluated.
    pub fn eval<L>(&self, lookup: &L) -> Result<f64, EvalError>
    where
        L: Fn(&str) -> Option<f64>,
    {
        match self {
            Expr::Num(v) => Ok(*v),
            Expr::Var(name) => lookup(name).ok_or_else(|| EvalError::UnboundVar(name.clone())),
            Expr::Neg(e) => Ok(-e.eval(lookup)?),
            Expr::Bin(op, a, b) => {
                let a = a.eval(lookup)?;
                let b = b.eval(lookup)?;
                Ok(match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            return Err(EvalError::DivByZero);
                        }
                        a / b
                    }
                })
            }
            Expr::Pow2(a, b) => {
                let a = a.eval(lookup)?;
                let b = b.eval(lookup)?;
                Ok(a.powf(b))
            }
            Expr::Call(f, arg) => {
                let v = arg.eval(lookup)?;
                Ok(match f {
                    Func::Sin => v.sin(),
                    Func::Cos => v.cos(),
                    Func::Exp => v.exp(),
                    Func::Ln => {
                        if v <= 0.0 {
                            return Err(EvalError::LnDomain(v));
                        }
                        v.ln()
                    }
                    Func::Abs => v.abs(),
                })
            }
            Expr::Piecewise {
                lhs,
                op,
                rhs,
                then,
                otherwise,
            } => {
                let l = lhs.eval(lookup)?;
                let r = rhs.eval(lookup)?;
                let taken = match op {
                    CmpOp::Lt => l < r,
                    CmpOp::Le => l <= r,
                    CmpOp::Gt => l > r,
                    CmpOp::Ge => l >= r,
                };
                if taken {
                    then.eval(lookup)
                } else {
                    otherwise.eval(lookup)
                }
            }
        }
    }

    /// Names of all referenced variables.
    pub fn variables(&self, out: &mut Vec<String>) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(name) => {
                if !out.contains(name) {
                    out.push(name.clone());
                }
            }
            Expr::Neg(e) => e.variables(out),
            Expr::Bin(_, a, b) | Expr::Pow2(a, b) => {
                a.variables(out);
                b.variables(out);
            }
            Expr::Call(_, a) => a.variables(out),
            Expr::Piecewise {
                lhs,
                rhs,
                then,
                otherwise,
                ..
            } => {
                lhs.variables(out);
                rhs.variables(out);
                then.variables(out);
                otherwise.variables(out);
            }
        }
    }
}

impl fmt::Display for Expr {
    /// Fully parenthesized form; `parse_expr(print(e))` is structurally `e`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => {
                if *v < 0.0 {
                    // keep literals non-negative so reparsing produces Neg
                    write!(f, "(-{})", -v)
                } else {
                    write!(f, "{v:?}")
                }
            }
            Expr::Var(name) => f.write_str(name),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Bin(op, a, b) => {
                let sym = match op {
                    BinOp::Add => "+",
                    BinOp::Sub => "-",
                    BinOp::Mul => "*",
                    BinOp::Div => "/",
                };
                write!(f, "({a}{sym}{b})")
            }
            Expr::Pow2(a, b) => write!(f, "pow({a},{b})"),
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
            Expr::Piecewise {
                lhs,
                op,
                rhs,
                then,
                otherwise,
            } => write!(f, "piecewise({lhs}{op}{rhs},{then},{otherwise})"),
        }
    }
}
