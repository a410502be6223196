//! Naive bottom-up evaluation for the function-free fragment with
//! stratified negation. Independent of the SLD engine; used as a reference.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::term::{Program, Term};

type Subst = BTreeMap<String, Term>;

fn subst(t: &Term, s: &Subst) -> Term {
    match t {
        Term::Var(v) => s.get(v).cloned().unwrap_or_else(|| t.clone()),
        Term::Compound(f, args) => {
            Term::Compound(f.clone(), args.iter().map(|a| subst(a, s)).collect())
        }
        _ => t.clone(),
    }
}

/// One-sided matching of a pattern against a ground fact.
fn matches(pat: &Term, fact: &Term, s: &mut Subst) -> bool {
    match (pat, fact) {
        (Term::Var(v), _) => match s.get(v) {
            Some(bound) => bound == fact,
            None => {
                s.insert(v.clone(), fact.clone());
                true
            }
        },
        (Term::Compound(f, a), Term::Compound(g, b)) => {
            f == g && a.len() == b.len() && a.iter().zip(b).all(|(x, y)| matches(x, y, s))
        }
        _ => pat == fact,
    }
}

fn negated(goal: &Term) -> Option<&Term> {
    match goal {
        Term::Compound(f, args) if f == "\\+" && args.len() == 1 => Some(&args[0]),
        _ => None,
    }
}

fn key(t: &Term) -> (String, usize) {
    match t {
        Term::Compound(f, a) => (f.clone(), a.len()),
        Term::Atom(a) => (a.clone(), 0),
        _ => panic!("not callable: {t}"),
    }
}

fn strata(program: &Program) -> HashMap<(String, usize), usize> {
    let mut level: HashMap<(String, usize), usize> = HashMap::new();
    for c in &program.clauses {
        level.entry(key(&c.head)).or_insert(0);
    }
    loop {
        let mut changed = false;
        for c in &program.clauses {
            let mut need = 0;
            for g in &c.body {
                need = need.max(match negated(g) {
                    Some(inner) => level.get(&key(inner)).copied().unwrap_or(0) + 1,
                    None => level.get(&key(g)).copied().unwrap_or(0),
                });
            }
            let h = level.get_mut(&key(&c.head)).unwrap();
            if need > *h {
                assert!(need <= program.clauses.len(), "program is not stratified");
                *h = need;
                changed = true;
            }
        }
        if !changed {
            return level;
        }
    }
}

fn extend(goals: &[Term], s: Subst, facts: &BTreeSet<Term>, out: &mut Vec<Subst>) {
    let Some((g, rest)) = goals.split_first() else {
        out.push(s);
        return;
    };
    if let Some(inner) = negated(g) {
        if !facts.contains(&subst(inner, &s)) {
            extend(rest, s, facts, out);
        }
        return;
    }
    for f in facts {
        let mut s2 = s.clone();
        if matches(g, f, &mut s2) {
            extend(rest, s2, facts, out);
        }
    }
}

/// Least model, stratum by stratum. Panics on unstratifiable programs.
pub fn fixpoint(program: &Program) -> BTreeSet<Term> {
    let level = strata(program);
    let top = level.values().copied().max().unwrap_or(0);
    let mut facts = BTreeSet::new();
    for stratum in 0..=top {
        loop {
            let mut new = Vec::new();
            for c in program
                .clauses
                .iter()
                .filter(|c| level[&key(&c.head)] == stratum)
            {
                let mut substs = Vec::new();
                extend(&c.body, Subst::new(), &facts, &mut substs);
                for s in substs {
                    let h = subst(&c.head, &s);
                    if !facts.contains(&h) {
                        new.push(h);
                    }
                }
            }
            if new.is_empty() {
                break;
            }
            facts.extend(new);
        }
    }
    facts
}

/// Ground instances of `query` in the least model, as variable tuples in
/// first-occurrence order.
pub fn answers(program: &Program, query: &Term) -> BTreeSet<Vec<Term>> {
    let vars = query.variables();
    fixpoint(program)
        .iter()
        .filter_map(|f| {
            let mut s = Subst::new();
            matches(query, f, &mut s).then(|| vars.iter().map(|v| s[v].clone()).collect())
        })
        .collect()
}
