//! Integer arithmetic for `is/2` and the comparison builtins.

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{Signed, Zero};

use crate::engine::Bindings;
use crate::term::Term;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ArithError {
    #[error("instantiation error: unbound variable `{0}` in arithmetic")]
    Unbound(String),
    #[error("type error: `{0}` is not an evaluable integer expression")]
    NotEvaluable(String),
    #[error("division by zero")]
    DivisionByZero,
}

/// Applies an evaluable functor to already-evaluated arguments.
pub(crate) fn apply(op: &str, args: &[BigInt]) -> Option<Result<BigInt, ArithError>> {
    Some(Ok(match (op, args) {
        ("+", [a, b]) => a + b,
        ("-", [a, b]) => a - b,
        ("*", [a, b]) => a * b,
        ("//", [a, b]) | ("mod", [a, b]) if b.is_zero() => {
            return Some(Err(ArithError::DivisionByZero))
        }
        ("//", [a, b]) => a.div_floor(b),
        ("mod", [a, b]) => a.mod_floor(b),
        ("min", [a, b]) => a.min(b).clone(),
        ("max", [a, b]) => a.max(b).clone(),
        ("-", [a]) => -a,
        ("+", [a]) => a.clone(),
        ("abs", [a]) => a.abs(),
        _ => return None,
    }))
}

/// Evaluates a ground integer expression after applying `bindings`.
///
/// Operators: `+ - * // mod min max abs`; `//` floors toward negative infinity.
pub fn eval_arith(expr: &Term, bindings: &Bindings) -> Result<BigInt, ArithError> {
    eval(&bindings.apply(expr))
}

fn eval(t: &Term) -> Result<BigInt, ArithError> {
    match t {
        Term::Int(v) => Ok(v.clone()),
        Term::Var(v) => Err(ArithError::Unbound(v.clone())),
        Term::Compound(f, args) => {
            let vals = args.iter().map(eval).collect::<Result<Vec<_>, _>>()?;
            apply(f, &vals).unwrap_or_else(|| Err(ArithError::NotEvaluable(t.to_string())))
        }
        other => Err(ArithError::NotEvaluable(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse_term;

    fn ev(src: &str) -> Result<BigInt, ArithError> {
        eval_arith(&parse_term(src).unwrap(), &Bindings::default())
    }

    #[test]
    fn examples() {
        assert_eq!(ev("2 + 3 * 4").unwrap(), BigInt::from(14));
        assert_eq!(ev("7 // 2").unwrap(), BigInt::from(3));
        assert!(matches!(ev("X + 1"), Err(ArithError::Unbound(v)) if v == "X"));
    }

    #[test]
    fn floor_semantics() {
        assert_eq!(ev("-7 // 2").unwrap(), BigInt::from(-4));
        assert_eq!(ev("-7 mod 2").unwrap(), BigInt::from(1));
        assert_eq!(ev("7 mod -2").unwrap(), BigInt::from(-1));
        assert_eq!(ev("max(3, min(10, 4)) + abs(-2)").unwrap(), BigInt::from(6));
    }

    #[test]
    fn errors() {
        assert_eq!(ev("1 // 0"), Err(ArithError::DivisionByZero));
        assert_eq!(ev("5 mod 0"), Err(ArithError::DivisionByZero));
        assert!(matches!(ev("foo + 1"), Err(ArithError::NotEvaluable(_))));
        assert!(matches!(
            ev("\"2017\" + 1"),
            Err(ArithError::NotEvaluable(_))
        ));
    }

    #[test]
    fn bound_variables_are_substituted() {
        let mut b = Bindings::default();
        b.insert("X", Term::int(41));
        let e = parse_term("X + 1").unwrap();
        assert_eq!(eval_arith(&e, &b).unwrap(), BigInt::from(42));
    }

    #[test]
    fn arbitrary_precision() {
        let big = ev("123456789012345678901234567890 * 10").unwrap();
        assert_eq!(big.to_string(), "1234567890123456789012345678900");
    }
}
