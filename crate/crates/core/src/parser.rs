//! Tokenizer and operator-precedence parser for the Prolog subset.
//!
//! Supported: facts and rules terminated by `.`, `%` line comments, quoted
//! strings, quoted atoms, lists, integers of any size and the operators
//! `:-  ,  \+  =  \=  is  <  >  =<  >=  =:=  =\=  +  -  *  //  mod` plus `!`.
//! Disjunction is rejected, as are floats, directives and operator
//! declarations.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;

use crate::term::{Clause, Program, Term, CONS, NIL};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
    pub offending_lexeme: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.line, self.column, self.message)?;
        if !self.offending_lexeme.is_empty() {
            write!(f, " (at `{}`)", self.offending_lexeme)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Name(String),
    Quoted(String),
    Var(String),
    Int(BigInt),
    Str(String),
    Sym(&'static str),
    Open,
    Close,
    OpenList,
    CloseList,
    Bar,
    Comma,
    End,
    Eof,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    column: usize,
    lexeme: String,
    /// Name immediately followed by `(`, i.e. functional notation.
    call: bool,
}

// Longest first.
const SYMBOLS: &[&str] = &[
    "=:=", "=\\=", ":-", "\\+", "\\=", "=<", ">=", "//", "->", "=", "<", ">", "+", "-", "*", "!",
    ";",
];

struct Lexer<'a> {
    chars: Vec<char>,
    pos: usize,
    line: usize,
    column: usize,
    _src: &'a str,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            chars: src.chars().collect(),
            pos: 0,
            line: 1,
            column: 1,
            _src: src,
        }
    }

    fn peek(&self, ahead: usize) -> Option<char> {
        self.chars.get(self.pos + ahead).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.get(self.pos).copied()?;
        self.pos += 1;
        if c == '\n' {
            self.line += 1;
            self.column = 1;
        } else {
            self.column += 1;
        }
        Some(c)
    }

    fn err(
        &self,
        line: usize,
        column: usize,
        msg: impl Into<String>,
        lexeme: impl Into<String>,
    ) -> ParseError {
        ParseError {
            line,
            column,
            message: msg.into(),
            offending_lexeme: lexeme.into(),
        }
    }

    fn skip_trivia(&mut self) {
        loop {
            match self.peek(0) {
                Some(c) if c.is_whitespace() => {
                    self.bump();
                }
                Some('%') => {
                    while let Some(c) = self.peek(0) {
                        if c == '\n' {
                            break;
                        }
                        self.bump();
                    }
                }
                _ => break,
            }
        }
    }

    fn tokenize(mut self) -> Result<Vec<Token>, ParseError> {
        let mut out = Vec::new();
        loop {
            self.skip_trivia();
            let (line, column) = (self.line, self.column);
            let start = self.pos;
            let Some(c) = self.peek(0) else {
                out.push(Token {
                    tok: Tok::Eof,
                    line,
                    column,
                    lexeme: String::new(),
                    call: false,
                });
                return Ok(out);
            };
            let tok = if c.is_ascii_lowercase() {
                Tok::Name(self.ident())
            } else if c.is_ascii_uppercase() || c == '_' {
                Tok::Var(self.ident())
            } else if c.is_ascii_digit() {
                let mut digits = String::new();
                while let Some(d) = self.peek(0) {
                    if d.is_ascii_digit() {
                        digits.push(d);
                        self.bump();
                    } else {
                        break;
                    }
                }
                if self.peek(0) == Some('.') && self.peek(1).is_some_and(|d| d.is_ascii_digit()) {
                    return Err(self.err(
                        line,
                        column,
                        "floating-point numbers are not supported",
                        digits,
                    ));
                }
                if self.peek(0).is_some_and(|d| d.is_alphabetic() || d == '_') {
                    return Err(self.err(line, column, "malformed number", digits));
                }
                Tok::Int(BigInt::from_str(&digits).expect("digits"))
            } else if c == '"' {
                Tok::Str(self.quoted('"', line, column)?)
            } else if c == '\'' {
                Tok::Quoted(self.quoted('\'', line, column)?)
            } else if c == '(' {
                self.bump();
                Tok::Open
            } else if c == ')' {
                self.bump();
                Tok::Close
            } else if c == '[' {
                self.bump();
                Tok::OpenList
            } else if c == ']' {
                self.bump();
                Tok::CloseList
            } else if c == '|' {
                self.bump();
                Tok::Bar
            } else if c == ',' {
                self.bump();
                Tok::Comma
            } else if c == '.' && self.peek(1).is_none_or(|n| n.is_whitespace() || n == '%') {
                self.bump();
                Tok::End
            } else if let Some(sym) = SYMBOLS.iter().find(|s| self.starts_with(s)) {
                for _ in 0..sym.chars().count() {
                    self.bump();
                }
                Tok::Sym(sym)
            } else {
                return Err(self.err(
                    line,
                    column,
                    format!("unexpected character `{c}`"),
                    c.to_string(),
                ));
            };
            let lexeme: String = self.chars[start..self.pos].iter().collect();
            let call = matches!(tok, Tok::Name(_) | Tok::Quoted(_)) && self.peek(0) == Some('(');
            out.push(Token {
                tok,
                line,
                column,
                lexeme,
                call,
            });
        }
    }

    fn starts_with(&self, s: &str) -> bool {
        s.chars().enumerate().all(|(i, c)| self.peek(i) == Some(c))
    }

    fn ident(&mut self) -> String {
        let mut s = String::new();
        while let Some(c) = self.peek(0) {
            if c.is_ascii_alphanumeric() || c == '_' {
                s.push(c);
                self.bump();
            } else {
                break;
            }
        }
        s
    }

    fn quoted(&mut self, quote: char, line: usize, column: usize) -> Result<String, ParseError> {
        self.bump();
        let mut s = String::new();
        loop {
            match self.bump() {
                None => {
                    return Err(self.err(
                        line,
                        column,
                        "unterminated quoted text",
                        quote.to_string(),
                    ))
                }
                Some(c) if c == quote => return Ok(s),
                Some('\\') => match self.bump() {
                    Some('n') => s.push('\n'),
                    Some('t') => s.push('\t'),
                    Some(c @ ('\\' | '"' | '\'')) => s.push(c),
                    other => {
                        return Err(self.err(
                            self.line,
                            self.column,
                            "unknown escape sequence",
                            format!("\\{}", other.map(String::from).unwrap_or_default()),
                        ))
                    }
                },
                Some(c) => s.push(c),
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Assoc {
    Xfx,
    Xfy,
    Yfx,
}

fn infix(tok: &Tok) -> Option<(&'static str, u32, Assoc)> {
    Some(match tok {
        Tok::Sym(":-") => (":-", 1200, Assoc::Xfx),
        Tok::Comma => (",", 1000, Assoc::Xfy),
        Tok::Sym(s @ ("=" | "\\=" | "<" | ">" | "=<" | ">=" | "=:=" | "=\\=")) => {
            (s, 700, Assoc::Xfx)
        }
        Tok::Name(n) if n == "is" => ("is", 700, Assoc::Xfx),
        Tok::Sym(s @ ("+" | "-")) => (s, 500, Assoc::Yfx),
        Tok::Sym(s @ ("*" | "//")) => (s, 400, Assoc::Yfx),
        Tok::Name(n) if n == "mod" => ("mod", 400, Assoc::Yfx),
        _ => return None,
    })
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn new(src: &str) -> Result<Self, ParseError> {
        Ok(Parser {
            toks: Lexer::new(src).tokenize()?,
            pos: 0,
        })
    }

    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn next(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if !matches!(t.tok, Tok::Eof) {
            self.pos += 1;
        }
        t
    }

    fn error_at(tok: &Token, msg: impl Into<String>) -> ParseError {
        ParseError {
            line: tok.line,
            column: tok.column,
            message: msg.into(),
            offending_lexeme: tok.lexeme.clone(),
        }
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<Token, ParseError> {
        let t = self.next();
        if t.tok == want {
            Ok(t)
        } else if matches!(t.tok, Tok::Eof) {
            Err(Self::error_at(
                &t,
                format!("unexpected end of input, expected {what}"),
            ))
        } else {
            Err(Self::error_at(&t, format!("expected {what}")))
        }
    }

    fn parse(&mut self, max: u32) -> Result<(Term, u32), ParseError> {
        let (mut left, mut left_prec) = self.parse_primary(max)?;
        loop {
            let tok = self.peek().clone();
            if tok.tok == Tok::Sym(";") {
                return Err(Self::error_at(
                    &tok,
                    "disjunction `;` is not supported; write one clause per alternative",
                ));
            }
            if tok.tok == Tok::Sym("->") {
                return Err(Self::error_at(&tok, "if-then-else is not supported"));
            }
            let Some((op, prec, assoc)) = infix(&tok.tok) else {
                break;
            };
            if prec > max {
                break;
            }
            let (left_max, right_max) = match assoc {
                Assoc::Xfx => (prec - 1, prec - 1),
                Assoc::Xfy => (prec - 1, prec),
                Assoc::Yfx => (prec, prec - 1),
            };
            if left_prec > left_max {
                return Err(Self::error_at(
                    &tok,
                    format!("operator priority clash at `{op}`"),
                ));
            }
            self.next();
            let (right, _) = self.parse(right_max)?;
            left = Term::Compound(op.to_string(), vec![left, right]);
            left_prec = prec;
        }
        Ok((left, left_prec))
    }

    fn parse_primary(&mut self, max: u32) -> Result<(Term, u32), ParseError> {
        let tok = self.next();
        match tok.tok.clone() {
            Tok::Int(v) => Ok((Term::Int(v), 0)),
            Tok::Str(s) => Ok((Term::Str(s), 0)),
            Tok::Var(v) => Ok((Term::Var(v), 0)),
            Tok::Sym("!") => Ok((Term::atom("!"), 0)),
            Tok::Sym("-") => {
                let next = self.peek().clone();
                if let Tok::Int(v) = &next.tok {
                    if next.line == tok.line && next.column == tok.column + 1 {
                        self.next();
                        return Ok((Term::Int(-v.clone()), 0));
                    }
                }
                if max < 200 {
                    return Err(Self::error_at(&tok, "operator priority clash"));
                }
                let (arg, _) = self.parse(200)?;
                Ok((Term::Compound("-".into(), vec![arg]), 200))
            }
            Tok::Sym("\\+") => {
                if max < 900 {
                    return Err(Self::error_at(&tok, "operator priority clash at `\\+`"));
                }
                if self.peek().tok == Tok::Open && self.peek().column == tok.column + 2 {
                    // `\+(Goal)` functional notation
                    self.next();
                    let (arg, _) = self.parse(1200)?;
                    self.expect(Tok::Close, "`)`")?;
                    return Ok((Term::Compound("\\+".into(), vec![arg]), 0));
                }
                let (arg, _) = self.parse(900)?;
                Ok((Term::Compound("\\+".into(), vec![arg]), 900))
            }
            Tok::Open => {
                let (inner, _) = self.parse(1200)?;
                self.expect(Tok::Close, "`)`")?;
                Ok((inner, 0))
            }
            Tok::OpenList => self.parse_list().map(|t| (t, 0)),
            Tok::Name(name) | Tok::Quoted(name) => {
                if tok.call {
                    self.next();
                    let mut args = Vec::new();
                    loop {
                        let (arg, _) = self.parse(999)?;
                        args.push(arg);
                        let sep = self.next();
                        match sep.tok {
                            Tok::Comma => continue,
                            Tok::Close => break,
                            Tok::Sym(";") => {
                                return Err(Self::error_at(
                                    &sep,
                                    "disjunction `;` is not supported; write one clause per alternative",
                                ))
                            }
                            _ => return Err(Self::error_at(&sep, "expected `,` or `)` in argument list")),
                        }
                    }
                    Ok((Term::Compound(name, args), 0))
                } else {
                    Ok((Term::Atom(name), 0))
                }
            }
            Tok::Eof => Err(Self::error_at(&tok, "unexpected end of input")),
            Tok::Sym(";") => Err(Self::error_at(
                &tok,
                "disjunction `;` is not supported; write one clause per alternative",
            )),
            _ => Err(Self::error_at(&tok, "unexpected token")),
        }
    }

    fn parse_list(&mut self) -> Result<Term, ParseError> {
        if self.peek().tok == Tok::CloseList {
            self.next();
            return Ok(Term::atom(NIL));
        }
        let mut items = Vec::new();
        let mut tail = Term::atom(NIL);
        loop {
            let (item, _) = self.parse(999)?;
            items.push(item);
            let sep = self.next();
            match sep.tok {
                Tok::Comma => continue,
                Tok::CloseList => break,
                Tok::Bar => {
                    tail = self.parse(999)?.0;
                    self.expect(Tok::CloseList, "`]`")?;
                    break;
                }
                _ => return Err(Self::error_at(&sep, "expected `,`, `|` or `]` in list")),
            }
        }
        Ok(items
            .into_iter()
            .rev()
            .fold(tail, |t, h| Term::Compound(CONS.into(), vec![h, t])))
    }
}

/// Splits a right- or left-nested `,` term into its conjuncts.
pub fn flatten_conjunction(term: Term, out: &mut Vec<Term>) {
    match term {
        Term::Compound(f, mut args) if f == "," && args.len() == 2 => {
            let right = args.pop().unwrap();
            let left = args.pop().unwrap();
            flatten_conjunction(left, out);
            flatten_conjunction(right, out);
        }
        other => out.push(other),
    }
}

fn term_to_clause(term: Term, at: &Token) -> Result<Clause, ParseError> {
    let (head, body) = match term {
        Term::Compound(f, mut args) if f == ":-" && args.len() == 2 => {
            let body_term = args.pop().unwrap();
            let head = args.pop().unwrap();
            let mut body = Vec::new();
            flatten_conjunction(body_term, &mut body);
            (head, body)
        }
        Term::Compound(f, args) if f == "\\+" || f == "," => {
            return Err(Parser::error_at(
                at,
                format!("`{}` cannot be a clause head", Term::Compound(f, args)),
            ))
        }
        other => (other, Vec::new()),
    };
    Clause::new(head, body).map_err(|m| Parser::error_at(at, m))
}

pub fn parse_program(source: &str) -> Result<Program, ParseError> {
    parse_program_with_id(source, "")
}

pub fn parse_program_with_id(source: &str, source_id: &str) -> Result<Program, ParseError> {
    let mut p = Parser::new(source)?;
    let mut program = Program::new(source_id);
    while !matches!(p.peek().tok, Tok::Eof) {
        let start = p.peek().clone();
        if start.tok == Tok::Sym(":-") {
            return Err(Parser::error_at(&start, "directives are not supported"));
        }
        let (term, _) = p.parse(1200)?;
        p.expect(Tok::End, "`.` at end of clause")?;
        program.clauses.push(term_to_clause(term, &start)?);
    }
    Ok(program)
}

/// Parses a single goal, optionally terminated by `.`.
pub fn parse_query(source: &str) -> Result<Term, ParseError> {
    let mut p = Parser::new(source)?;
    let start = p.peek().clone();
    let (term, _) = p.parse(1200)?;
    if let Term::Compound(f, _) = &term {
        if f == ":-" {
            return Err(Parser::error_at(&start, "a query cannot be a clause"));
        }
    }
    if !term.is_callable() {
        return Err(Parser::error_at(
            &start,
            "a query must be an atom or compound goal",
        ));
    }
    if p.peek().tok == Tok::End {
        p.next();
    }
    let rest = p.peek().clone();
    if !matches!(rest.tok, Tok::Eof) {
        return Err(Parser::error_at(&rest, "expected a single goal"));
    }
    Ok(term)
}

/// Parses one term (no clause terminator required).
pub fn parse_term(source: &str) -> Result<Term, ParseError> {
    let mut p = Parser::new(source)?;
    let (term, _) = p.parse(1200)?;
    if p.peek().tok == Tok::End {
        p.next();
    }
    let rest = p.peek().clone();
    if !matches!(rest.tok, Tok::Eof) {
        return Err(Parser::error_at(&rest, "unexpected trailing input"));
    }
    Ok(term)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn marriage_event_facts() {
        let p = parse_program("marriage_(m). agent_(m,alice). agent_(m,bob).").unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.facts_only());
        assert_eq!(
            p.clauses[1].head,
            Term::compound("agent_", vec![Term::atom("m"), Term::atom("alice")])
        );
    }

    #[test]
    fn empty_source() {
        assert!(parse_program("").unwrap().is_empty());
        assert!(parse_program("  % only a comment\n").unwrap().is_empty());
    }

    #[test]
    fn disjunction_is_rejected_at_semicolon() {
        let err = parse_program("foo(a) :- bar(X); baz(X).").unwrap_err();
        assert_eq!((err.line, err.column), (1, 17));
        assert_eq!(err.offending_lexeme, ";");
    }

    #[test]
    fn error_positions_are_one_based_lines() {
        let err = parse_program("a.\nb(X) :-\n   c(X) ; d.").unwrap_err();
        assert_eq!((err.line, err.column), (3, 9));
    }

    #[test]
    fn missing_terminator() {
        let err = parse_program("a(b)").unwrap_err();
        assert!(err.message.contains("expected `.`"), "{err}");
    }

    #[test]
    fn queries() {
        let q = parse_query("owes_tax(alice,2015,T)").unwrap();
        assert_eq!(
            q,
            Term::compound(
                "owes_tax",
                vec![Term::atom("alice"), Term::int(2015), Term::var("T")]
            )
        );
        let q = parse_query("s2_b(bob,2017).").unwrap();
        assert!(q.is_ground());
        assert!(parse_query("foo(a). bar(b).").is_err());
        assert!(parse_query("a :- b.").is_err());
        assert!(parse_query("X").is_err());
    }

    #[test]
    fn operators_and_precedence() {
        let c = &parse_program("t(X, Y) :- Y is 2 + 3 * X // 4 - 1, Y >= 0, \\+ q(Y), !.")
            .unwrap()
            .clauses[0];
        assert_eq!(c.body.len(), 4);
        assert_eq!(c.body[0].to_string(), "Y is 2 + 3 * X // 4 - 1");
        let is_rhs = &c.body[0].args()[1];
        assert_eq!(is_rhs.functor(), Some(("-", 2)));
        assert_eq!(c.body[2].functor(), Some(("\\+", 1)));
        assert_eq!(c.body[3], Term::atom("!"));
    }

    #[test]
    fn negative_literals_and_unary_minus() {
        assert_eq!(parse_term("-5").unwrap(), Term::int(-5));
        assert_eq!(
            parse_term("X - -5").unwrap(),
            Term::compound("-", vec![Term::var("X"), Term::int(-5)])
        );
        assert_eq!(
            parse_term("- X").unwrap(),
            Term::compound("-", vec![Term::var("X")])
        );
    }

    #[test]
    fn lists_and_findall() {
        let t = parse_term("findall(A, (income_(E), amount_(E, A)), [1, 2|T])").unwrap();
        let args = t.args();
        assert_eq!(args[1].functor(), Some((",", 2)));
        assert_eq!(args[2].functor(), Some((".", 2)));
    }

    #[test]
    fn strings_and_big_integers() {
        let t = parse_term("start_(e, \"2017-12-31\", 123456789012345678901234567890)").unwrap();
        assert_eq!(t.args()[1], Term::string("2017-12-31"));
        assert_eq!(
            t.args()[2],
            Term::Int("123456789012345678901234567890".parse().unwrap())
        );
    }

    #[test]
    fn rejects_floats_and_builtin_heads() {
        assert!(parse_program("amount_(e, 1.5).").is_err());
        let err = parse_program("is(X, Y) :- X = Y.").unwrap_err();
        assert!(err.message.contains("builtin"), "{err}");
        assert!(parse_program("p :- X.").is_err());
        assert!(parse_program(":- dynamic(foo/1).").is_err());
    }
}
