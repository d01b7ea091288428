//! Arithmetic evaluator behind the `calculator` tool.
//!
//! Grammar: numbers, `+ - * / %`, `**` or `^` (right associative), unary
//! signs and parentheses. Nothing else is accepted.

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CalcError {
    #[error("unexpected character {0:?} at position {1}")]
    UnexpectedChar(char, usize),
    #[error("unexpected end of expression")]
    UnexpectedEnd,
    #[error("unexpected token at position {0}")]
    UnexpectedToken(usize),
    #[error("division by zero")]
    DivisionByZero,
    #[error("result is not a finite number")]
    NonFinite,
    #[error("expression is too deeply nested")]
    TooDeep,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Tok {
    Num(f64),
    Plus,
    Minus,
    Star,
    Slash,
    Percent,
    Pow,
    LParen,
    RParen,
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, CalcError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
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
                let n = text
                    .parse::<f64>()
                    .map_err(|_| CalcError::UnexpectedToken(start))?;
                out.push((Tok::Num(n), start));
            }
            '*' if bytes.get(i + 1) == Some(&b'*') => {
                out.push((Tok::Pow, i));
                i += 2;
            }
            _ => {
                let tok = match c {
                    '+' => Tok::Plus,
                    '-' => Tok::Minus,
                    '*' | '×' => Tok::Star,
                    '/' => Tok::Slash,
                    '%' => Tok::Percent,
                    '^' => Tok::Pow,
                    '(' => Tok::LParen,
                    ')' => Tok::RParen,
                    other => {
                        let ch = src[i..].chars().next().unwrap_or(other);
                        return Err(CalcError::UnexpectedChar(ch, i));
                    }
                };
                out.push((tok, i));
                i += 1;
            }
        }
    }
    Ok(out)
}

const MAX_DEPTH: usize = 128;

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    depth: usize,
}

impl Parser {
    fn peek(&self) -> Option<Tok> {
        self.toks.get(self.pos).map(|t| t.0)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.peek();
        self.pos += 1;
        t
    }

    fn expr(&mut self) -> Result<f64, CalcError> {
        let mut lhs = self.term()?;
        while let Some(op @ (Tok::Plus | Tok::Minus)) = self.peek() {
            self.bump();
            let rhs = self.term()?;
            lhs = if op == Tok::Plus { lhs + rhs } else { lhs - rhs };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<f64, CalcError> {
        let mut lhs = self.unary()?;
        while let Some(op @ (Tok::Star | Tok::Slash | Tok::Percent)) = self.peek() {
            self.bump();
            let rhs = self.unary()?;
            lhs = match op {
                Tok::Star => lhs * rhs,
                _ if rhs == 0.0 => return Err(CalcError::DivisionByZero),
                Tok::Slash => lhs / rhs,
                _ => lhs - rhs * (lhs / rhs).floor(),
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<f64, CalcError> {
        match self.peek() {
            Some(Tok::Minus) => {
                self.bump();
                self.descend(|p| p.unary()).map(|v| -v)
            }
            Some(Tok::Plus) => {
                self.bump();
                self.descend(|p| p.unary())
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<f64, CalcError> {
        let base = self.atom()?;
        if self.peek() == Some(Tok::Pow) {
            self.bump();
            let exp = self.descend(|p| p.unary())?;
            return Ok(base.powf(exp));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<f64, CalcError> {
        let at = self.toks.get(self.pos).map(|t| t.1);
        match self.bump() {
            Some(Tok::Num(n)) => Ok(n),
            Some(Tok::LParen) => {
                let v = self.descend(|p| p.expr())?;
                match self.bump() {
                    Some(Tok::RParen) => Ok(v),
                    Some(_) => Err(CalcError::UnexpectedToken(self.toks[self.pos - 1].1)),
                    None => Err(CalcError::UnexpectedEnd),
                }
            }
            Some(_) => Err(CalcError::UnexpectedToken(at.unwrap_or(0))),
            None => Err(CalcError::UnexpectedEnd),
        }
    }

    fn descend(&mut self, f: impl FnOnce(&mut Self) -> Result<f64, CalcError>) -> Result<f64, CalcError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(CalcError::TooDeep);
        }
        let out = f(self);
        self.depth -= 1;
        out
    }
}

pub fn evaluate(expression: &str) -> Result<f64, CalcError> {
    let toks = lex(expression)?;
    let mut p = Parser {
        toks,
        pos: 0,
        depth: 0,
    };
    let v = p.expr()?;
    if let Some(&(_, at)) = p.toks.get(p.pos) {
        return Err(CalcError::UnexpectedToken(at));
    }
    if !v.is_finite() {
        return Err(CalcError::NonFinite);
    }
    Ok(v)
}

/// Integral values print without a fractional part.
pub fn format_number(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        assert_eq!(evaluate("2+3*4").unwrap(), 14.0);
        assert_eq!(evaluate("(2+3)*4").unwrap(), 20.0);
        assert_eq!(evaluate("2**3**2").unwrap(), 512.0);
        assert_eq!(evaluate("-2^2").unwrap(), -4.0);
        assert_eq!(evaluate("7 % 3").unwrap(), 1.0);
        assert_eq!(evaluate("1e3 / 8").unwrap(), 125.0);
    }

    #[test]
    fn rejects_code() {
        assert!(matches!(
            evaluate("__import__('os')"),
            Err(CalcError::UnexpectedChar('_', 0))
        ));
        assert_eq!(evaluate("1/0"), Err(CalcError::DivisionByZero));
        assert_eq!(evaluate("(1+2"), Err(CalcError::UnexpectedEnd));
        assert!(evaluate("1 2").is_err());
        assert!(evaluate("").is_err());
        assert_eq!(evaluate(&"(".repeat(500)), Err(CalcError::TooDeep));
    }

    #[test]
    fn formatting() {
        assert_eq!(format_number(14.0), "14");
        assert_eq!(format_number(-3.0), "-3");
        assert_eq!(format_number(0.5), "0.5");
    }
}
