//! Object model for the logic language: terms, clauses and programs.

use std::fmt;

use num_bigint::BigInt;

/// A term of the Prolog subset.
///
/// Lists are represented the usual way: `'[]'` for the empty list and
/// `'.'(Head, Tail)` for cons cells.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    Atom(String),
    Var(String),
    Int(BigInt),
    Str(String),
    /// Functor applied to at least one argument.
    Compound(String, Vec<Term>),
}

pub const NIL: &str = "[]";
pub const CONS: &str = ".";

impl Term {
    pub fn atom(name: impl Into<String>) -> Term {
        Term::Atom(name.into())
    }

    pub fn var(name: impl Into<String>) -> Term {
        Term::Var(name.into())
    }

    pub fn int(value: impl Into<BigInt>) -> Term {
        Term::Int(value.into())
    }

    pub fn string(value: impl Into<String>) -> Term {
        Term::Str(value.into())
    }

    /// Builds a compound term, collapsing zero-arity applications to atoms.
    pub fn compound(functor: impl Into<String>, args: Vec<Term>) -> Term {
        let functor = functor.into();
        if args.is_empty() {
            Term::Atom(functor)
        } else {
            Term::Compound(functor, args)
        }
    }

    pub fn list(items: Vec<Term>) -> Term {
        items.into_iter().rev().fold(Term::atom(NIL), |tail, head| {
            Term::Compound(CONS.to_string(), vec![head, tail])
        })
    }

    /// Name and arity for atoms and compounds.
    pub fn functor(&self) -> Option<(&str, usize)> {
        match self {
            Term::Atom(name) => Some((name, 0)),
            Term::Compound(name, args) => Some((name, args.len())),
            _ => None,
        }
    }

    pub fn args(&self) -> &[Term] {
        match self {
            Term::Compound(_, args) => args,
            _ => &[],
        }
    }

    pub fn is_callable(&self) -> bool {
        matches!(self, Term::Atom(_) | Term::Compound(..))
    }

    pub fn is_ground(&self) -> bool {
        match self {
            Term::Var(_) => false,
            Term::Compound(_, args) => args.iter().all(Term::is_ground),
            _ => true,
        }
    }

    /// Named variables in order of first occurrence; `_` is skipped.
    pub fn variables(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut Vec<String>) {
        match self {
            Term::Var(name) if name != "_" => {
                if !out.iter().any(|v| v == name) {
                    out.push(name.clone());
                }
            }
            Term::Compound(_, args) => args.iter().for_each(|a| a.collect_vars(out)),
            _ => {}
        }
    }

    pub fn as_int(&self) -> Option<&BigInt> {
        match self {
            Term::Int(v) => Some(v),
            _ => None,
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&crate::render::render_term(self))
    }
}

/// A Horn clause. An empty body makes it a fact.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Clause {
    pub head: Term,
    pub body: Vec<Term>,
}

impl Clause {
    /// Checks the clause invariants: callable non-builtin head, callable goals.
    pub fn new(head: Term, body: Vec<Term>) -> Result<Clause, String> {
        let (name, arity) = head
            .functor()
            .ok_or_else(|| format!("clause head `{head}` is not callable"))?;
        if crate::builtins::is_reserved(name, arity) {
            return Err(format!("cannot redefine builtin {name}/{arity}"));
        }
        if let Some(goal) = body.iter().find(|g| !g.is_callable()) {
            return Err(format!("body goal `{goal}` is not callable"));
        }
        Ok(Clause { head, body })
    }

    pub fn fact(head: Term) -> Result<Clause, String> {
        Clause::new(head, Vec::new())
    }

    pub fn is_fact(&self) -> bool {
        self.body.is_empty()
    }

    pub fn key(&self) -> (&str, usize) {
        self.head.functor().expect("clause head is callable")
    }
}

/// Clauses in source order plus a provenance label.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Program {
    pub clauses: Vec<Clause>,
    pub source_id: String,
}

impl Program {
    pub fn new(source_id: impl Into<String>) -> Program {
        Program {
            clauses: Vec::new(),
            source_id: source_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.clauses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clauses.is_empty()
    }

    pub fn facts_only(&self) -> bool {
        self.clauses.iter().all(Clause::is_fact)
    }
}
