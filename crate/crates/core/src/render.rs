//! Text rendering that the parser reads back to an identical term.

use crate::term::{Clause, Program, Term, CONS, NIL};

fn infix_op(name: &str) -> Option<(u32, u32, u32)> {
    // (priority, left max, right max)
    Some(match name {
        ":-" => (1200, 1199, 1199),
        "," => (1000, 999, 1000),
        "=" | "\\=" | "<" | ">" | "=<" | ">=" | "=:=" | "=\\=" | "is" => (700, 699, 699),
        "+" | "-" => (500, 500, 499),
        "*" | "//" | "mod" => (400, 400, 399),
        _ => return None,
    })
}

fn prefix_op(name: &str) -> Option<(u32, u32)> {
    match name {
        "-" => Some((200, 200)),
        "\\+" => Some((900, 900)),
        _ => None,
    }
}

fn is_plain_atom(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase())
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn atom_text(name: &str) -> String {
    if is_plain_atom(name) || name == NIL || name == "!" {
        name.to_string()
    } else {
        format!("'{}'", escape(name, '\''))
    }
}

fn escape(s: &str, quote: char) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c if c == quote => {
                out.push('\\');
                out.push(c);
            }
            c => out.push(c),
        }
    }
    out
}

pub fn render_term(t: &Term) -> String {
    render(t, 1200)
}

fn render(t: &Term, max: u32) -> String {
    match t {
        Term::Atom(a) => {
            if infix_op(a).is_some() || prefix_op(a).is_some() {
                format!("'{}'", escape(a, '\''))
            } else {
                atom_text(a)
            }
        }
        Term::Var(v) => v.clone(),
        Term::Int(i) => i.to_string(),
        Term::Str(s) => format!("\"{}\"", escape(s, '"')),
        Term::Compound(f, args) if f == CONS && args.len() == 2 => render_list(t),
        Term::Compound(f, args) => {
            if args.len() == 2 {
                if let Some((p, lmax, rmax)) = infix_op(f) {
                    let sep = if f == "," {
                        ", ".to_string()
                    } else {
                        format!(" {f} ")
                    };
                    let s = format!(
                        "{}{}{}",
                        render(&args[0], lmax),
                        sep,
                        render(&args[1], rmax)
                    );
                    return if p > max { format!("({s})") } else { s };
                }
            }
            if args.len() == 1 {
                if let Some((p, amax)) = prefix_op(f) {
                    let s = format!("{} {}", f, render(&args[0], amax));
                    return if p > max { format!("({s})") } else { s };
                }
            }
            let rendered: Vec<String> = args.iter().map(|a| render(a, 999)).collect();
            format!("{}({})", atom_text(f), rendered.join(","))
        }
    }
}

fn render_list(t: &Term) -> String {
    let mut items = Vec::new();
    let mut cur = t;
    loop {
        match cur {
            Term::Compound(f, args) if f == CONS && args.len() == 2 => {
                items.push(render(&args[0], 999));
                cur = &args[1];
            }
            Term::Atom(a) if a == NIL => return format!("[{}]", items.join(",")),
            tail => return format!("[{}|{}]", items.join(","), render(tail, 999)),
        }
    }
}

pub fn render_clause(c: &Clause) -> String {
    if c.body.is_empty() {
        format!("{}.", render(&c.head, 1199))
    } else {
        let body: Vec<String> = c.body.iter().map(|g| render(g, 999)).collect();
        format!("{} :- {}.", render(&c.head, 1199), body.join(", "))
    }
}

pub fn render_program(p: &Program) -> String {
    let mut out = String::new();
    for c in &p.clauses {
        out.push_str(&render_clause(c));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::{parse_program, parse_term};
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let t = Term::compound("amount_", vec![Term::atom("e1"), Term::int(50000)]);
        assert_eq!(render_term(&t), "amount_(e1,50000)");
        assert_eq!(render_term(&Term::var("X")), "X");
        assert_eq!(render_term(&Term::string("2017-12-31")), "\"2017-12-31\"");
    }

    #[test]
    fn operators_get_parentheses_only_when_needed() {
        for src in [
            "X is (A + B) * C",
            "X is A - (B - C)",
            "X is A - B - C",
            "\\+ (a, b)",
            "findall(X, (p(X), q(X)), L)",
            "X = 'Hello world'",
            "f('-', [], [a,b|T], \"q\\\"uote\")",
            "X is - Y",
            "Y is 3 - -5",
        ] {
            let t = parse_term(src).unwrap();
            let again = parse_term(&render_term(&t)).unwrap();
            assert_eq!(t, again, "{src} -> {}", render_term(&t));
        }
        assert_eq!(
            render_term(&parse_term("X is A-(B-C)").unwrap()),
            "X is A - (B - C)"
        );
    }

    #[test]
    fn clause_round_trip() {
        let src = "p(X) :- q(X,Y), Y > 3, !.\nr.\n";
        let p = parse_program(src).unwrap();
        assert_eq!(render_program(&p), src);
    }

    fn arb_term() -> impl Strategy<Value = Term> {
        let leaf = prop_oneof![
            "[a-z][a-z0-9_]{0,5}".prop_map(Term::Atom),
            "[A-Z][a-z0-9]{0,3}".prop_map(Term::Var),
            any::<i64>().prop_map(Term::int),
            "[ -~]{0,8}".prop_map(Term::Str),
            Just(Term::atom("[]")),
        ];
        leaf.prop_recursive(4, 24, 4, |inner| {
            prop_oneof![
                (
                    "[a-z][a-z_]{0,4}",
                    prop::collection::vec(inner.clone(), 1..4)
                )
                    .prop_map(|(f, a)| Term::Compound(f, a)),
                (
                    prop::sample::select(vec![
                        "+", "-", "*", "//", "mod", "is", "=", "<", "=<", ",", "=:=", "\\="
                    ]),
                    inner.clone(),
                    inner.clone()
                )
                    .prop_map(|(op, a, b)| Term::Compound(op.to_string(), vec![a, b])),
                (prop::sample::select(vec!["-", "\\+"]), inner.clone())
                    .prop_map(|(op, a)| Term::Compound(op.to_string(), vec![a])),
                prop::collection::vec(inner, 0..4).prop_map(Term::list),
            ]
        })
    }

    proptest! {
        #[test]
        fn parse_inverts_render(t in arb_term()) {
            let text = render_term(&t);
            let back = parse_term(&text).map_err(|e| TestCaseError::fail(format!("{text}: {e}")))?;
            prop_assert_eq!(back, t, "{}", text);
        }
    }
}
