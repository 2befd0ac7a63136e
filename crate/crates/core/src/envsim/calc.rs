//! Exact rational calculator for the `calculator` tool.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, Zero};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CalcError {
    Syntax(String),
    DivisionByZero,
}

struct Parser<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
}

impl Parser<'_> {
    fn skip_ws(&mut self) {
        while self.chars.peek().is_some_and(|c| c.is_whitespace()) {
            self.chars.next();
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.peek().copied()
    }

    fn expr(&mut self) -> Result<BigRational, CalcError> {
        let mut acc = self.term()?;
        while let Some(op @ ('+' | '-')) = self.peek() {
            self.chars.next();
            let rhs = self.term()?;
            acc = if op == '+' { acc + rhs } else { acc - rhs };
        }
        Ok(acc)
    }

    fn term(&mut self) -> Result<BigRational, CalcError> {
        let mut acc = self.unary()?;
        while let Some(op @ ('*' | '/' | '×' | '÷')) = self.peek() {
            self.chars.next();
            let rhs = self.unary()?;
            acc = match op {
                '*' | '×' => acc * rhs,
                _ => {
                    if rhs.is_zero() {
                        return Err(CalcError::DivisionByZero);
                    }
                    acc / rhs
                }
            };
        }
        Ok(acc)
    }

    fn unary(&mut self) -> Result<BigRational, CalcError> {
        match self.peek() {
            Some('-' | '−') => {
                self.chars.next();
                Ok(-self.unary()?)
            }
            Some('+') => {
                self.chars.next();
                self.unary()
            }
            _ => self.primary(),
        }
    }

    fn primary(&mut self) -> Result<BigRational, CalcError> {
        match self.peek() {
            Some('(') => {
                self.chars.next();
                let v = self.expr()?;
                if self.peek() != Some(')') {
                    return Err(CalcError::Syntax("missing closing parenthesis".into()));
                }
                self.chars.next();
                Ok(v)
            }
            Some(c) if c.is_ascii_digit() => {
                let mut digits = String::new();
                while let Some(&c) = self.chars.peek() {
                    if !c.is_ascii_digit() {
                        break;
                    }
                    digits.push(c);
                    self.chars.next();
                }
                let n: BigInt = digits.parse().expect("ascii digits");
                Ok(BigRational::from_integer(n))
            }
            Some(c) => Err(CalcError::Syntax(format!("unexpected character {c:?}"))),
            None => Err(CalcError::Syntax("unexpected end of expression".into())),
        }
    }
}

/// Evaluates an integer expression with `+ - * /`, unary minus and parentheses.
pub fn evaluate(expr: &str) -> Result<BigRational, CalcError> {
    let mut p = Parser {
        chars: expr.chars().peekable(),
    };
    let v = p.expr()?;
    if let Some(c) = p.peek() {
        return Err(CalcError::Syntax(format!("unexpected trailing {c:?}")));
    }
    Ok(v)
}

/// Integers print plainly, other values as a reduced `p/q`.
pub fn format_rational(v: &BigRational) -> String {
    if v.is_integer() {
        v.numer().to_string()
    } else {
        let sign = if v.is_negative() { "-" } else { "" };
        format!("{sign}{}/{}", v.numer().abs(), v.denom())
    }
}
