//! Depth-bounded SLD resolution over an indexed clause store.
//!
//! Goals are resolved left to right, clauses are tried in source order and
//! the search is depth first. The search state lives in a private
//! [`Machine`] per call, so a frozen [`KnowledgeBase`] can be shared freely
//! between threads.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::rc::Rc;
use std::sync::Arc;

use num_bigint::BigInt;
use num_traits::{One, ToPrimitive, Zero};

use crate::arith::{self, ArithError};
use crate::builtins;
use crate::term::{Clause, Program, Term, CONS, NIL};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EngineError {
    #[error("knowledge base is frozen")]
    Frozen,
    #[error("knowledge base must be frozen before solving")]
    NotFrozen,
    #[error("cannot redefine builtin {name}/{arity}")]
    BuiltinRedefinition { name: String, arity: usize },
    #[error("goal `{0}` is not callable")]
    NotCallable(String),
    #[error("instantiation error in `{0}`")]
    Instantiation(String),
    #[error("type error: {0}")]
    Type(String),
    #[error("`{0}` is not a YYYY-MM-DD date string")]
    BadDate(String),
    #[error(transparent)]
    Arith(#[from] ArithError),
}

/// Variable bindings keyed by variable name.
///
/// Values may mention other bound variables; reads go through
/// [`Bindings::get`] or [`Bindings::apply`], which dereference fully.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Bindings(BTreeMap<String, Term>);

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, var: impl Into<String>, value: Term) {
        self.0.insert(var.into(), value);
    }

    pub fn get(&self, var: &str) -> Option<Term> {
        self.0.get(var).map(|t| self.apply(t))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn vars(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    /// Substitutes bound variables throughout `t`.
    pub fn apply(&self, t: &Term) -> Term {
        match t {
            Term::Var(v) => match self.0.get(v) {
                Some(bound) => self.apply(bound),
                None => t.clone(),
            },
            Term::Compound(f, args) => {
                Term::Compound(f.clone(), args.iter().map(|a| self.apply(a)).collect())
            }
            other => other.clone(),
        }
    }

    /// Fully dereferenced copy of every binding.
    pub fn resolved(&self) -> Bindings {
        Bindings(
            self.0
                .keys()
                .map(|k| (k.clone(), self.get(k).expect("key present")))
                .collect(),
        )
    }

    fn walk<'a>(&'a self, t: &'a Term) -> &'a Term {
        let mut cur = t;
        while let Term::Var(v) = cur {
            match self.0.get(v) {
                Some(next) => cur = next,
                None => break,
            }
        }
        cur
    }

    fn occurs(&self, var: &str, t: &Term) -> bool {
        match self.walk(t) {
            Term::Var(v) => v == var,
            Term::Compound(_, args) => args.iter().any(|a| self.occurs(var, a)),
            _ => false,
        }
    }
}

/// Most general unifier of `a` and `b` extending `bindings`, with occurs check.
///
/// `_` unifies with anything and is never bound.
pub fn unify(a: &Term, b: &Term, bindings: &Bindings) -> Option<Bindings> {
    let mut out = bindings.clone();
    let mut stack = vec![(a.clone(), b.clone())];
    while let Some((x, y)) = stack.pop() {
        let x = out.walk(&x).clone();
        let y = out.walk(&y).clone();
        match (&x, &y) {
            (Term::Var(v), _) | (_, Term::Var(v)) if v == "_" => {}
            (Term::Var(v), Term::Var(w)) if v == w => {}
            (Term::Var(v), other) | (other, Term::Var(v)) => {
                if out.occurs(v, other) {
                    return None;
                }
                out.0.insert(v.clone(), other.clone());
            }
            (Term::Compound(f, xs), Term::Compound(g, ys)) => {
                if f != g || xs.len() != ys.len() {
                    return None;
                }
                stack.extend(xs.iter().cloned().zip(ys.iter().cloned()));
            }
            _ if x == y => {}
            _ => return None,
        }
    }
    Some(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SolveConfig {
    pub max_depth: usize,
    /// `None` collects every solution.
    pub max_solutions: Option<usize>,
    pub occurs_check: bool,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            max_depth: 4096,
            max_solutions: None,
            occurs_check: true,
        }
    }
}

impl SolveConfig {
    pub fn with_max_depth(mut self, depth: usize) -> Self {
        self.max_depth = depth.max(1);
        self
    }

    pub fn with_max_solutions(mut self, n: usize) -> Self {
        self.max_solutions = Some(n.max(1));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SolveOutcome {
    /// Distinct answers in discovery order; never empty.
    Solutions(Vec<Bindings>),
    /// The search space was exhausted without an answer.
    NoSolution,
    ResourceExhausted {
        depth_hit: bool,
    },
}

impl SolveOutcome {
    pub fn is_success(&self) -> bool {
        matches!(self, SolveOutcome::Solutions(_))
    }
}

// ---------------------------------------------------------------------------
// compiled representation

#[derive(Debug, Clone)]
enum Cell {
    Var(usize),
    Atom(Arc<str>),
    Int(Arc<BigInt>),
    Str(Arc<str>),
    /// Functor, arguments, and whether the subtree is free of variables.
    Comp(Arc<str>, Arc<[Cell]>, bool),
}

impl Cell {
    fn has_vars(&self) -> bool {
        match self {
            Cell::Var(_) => true,
            Cell::Comp(_, _, ground) => !ground,
            _ => false,
        }
    }

    fn comp(f: Arc<str>, args: Vec<Cell>) -> Cell {
        let ground = args.iter().all(|a| !a.has_vars());
        Cell::Comp(f, args.into(), ground)
    }

    fn name(&self) -> Option<(&str, usize)> {
        match self {
            Cell::Atom(a) => Some((a, 0)),
            Cell::Comp(f, args, _) => Some((f, args.len())),
            _ => None,
        }
    }
}

struct Compiler {
    names: HashMap<String, usize>,
    next: usize,
}

impl Compiler {
    fn new() -> Self {
        Compiler {
            names: HashMap::new(),
            next: 0,
        }
    }

    fn compile(&mut self, t: &Term) -> Cell {
        match t {
            Term::Var(v) if v == "_" => {
                self.next += 1;
                Cell::Var(self.next - 1)
            }
            Term::Var(v) => {
                let next = &mut self.next;
                let id = *self.names.entry(v.clone()).or_insert_with(|| {
                    *next += 1;
                    *next - 1
                });
                Cell::Var(id)
            }
            Term::Atom(a) => Cell::Atom(a.as_str().into()),
            Term::Int(i) => Cell::Int(Arc::new(i.clone())),
            Term::Str(s) => Cell::Str(s.as_str().into()),
            Term::Compound(f, args) => Cell::comp(
                f.as_str().into(),
                args.iter().map(|a| self.compile(a)).collect(),
            ),
        }
    }
}

#[derive(Debug, Clone)]
struct CompiledClause {
    head: Cell,
    body: Vec<Cell>,
    nvars: usize,
}

fn compile_clause(c: &Clause) -> CompiledClause {
    let mut comp = Compiler::new();
    let head = comp.compile(&c.head);
    let body = c.body.iter().map(|g| comp.compile(g)).collect();
    CompiledClause {
        head,
        body,
        nvars: comp.next,
    }
}

/// Clause store indexed by predicate, preserving source order.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    ruleset_id: String,
    clauses: Vec<Clause>,
    compiled: Vec<CompiledClause>,
    index: HashMap<String, Vec<(usize, Vec<usize>)>>,
    frozen: bool,
}

impl KnowledgeBase {
    pub fn new(ruleset_id: impl Into<String>) -> Self {
        KnowledgeBase {
            ruleset_id: ruleset_id.into(),
            ..Default::default()
        }
    }

    pub fn ruleset_id(&self) -> &str {
        &self.ruleset_id
    }

    /// Appends the program's clauses after those already present.
    pub fn consult(&mut self, program: &Program) -> Result<&mut Self, EngineError> {
        if self.frozen {
            return Err(EngineError::Frozen);
        }
        if let Some(c) = program.clauses.iter().find(|c| {
            let (n, a) = c.key();
            builtins::is_reserved(n, a)
        }) {
            let (name, arity) = c.key();
            return Err(EngineError::BuiltinRedefinition {
                name: name.to_string(),
                arity,
            });
        }
        for clause in &program.clauses {
            let (name, arity) = clause.key();
            let id = self.clauses.len();
            let entries = self.index.entry(name.to_string()).or_default();
            match entries.iter_mut().find(|(a, _)| *a == arity) {
                Some((_, ids)) => ids.push(id),
                None => entries.push((arity, vec![id])),
            }
            self.compiled.push(compile_clause(clause));
            self.clauses.push(clause.clone());
        }
        Ok(self)
    }

    pub fn freeze(&mut self) -> &mut Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn clauses(&self) -> &[Clause] {
        &self.clauses
    }

    pub fn len(&self) -> usize {
        self.clauses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clauses.is_empty()
    }

    /// Whether any clause (or builtin) answers to `name/arity`.
    pub fn defines(&self, name: &str, arity: usize) -> bool {
        builtins::is_reserved(name, arity) || !self.candidates(name, arity).is_empty()
    }

    /// Clauses for `name/arity` in source order.
    pub fn clauses_for(&self, name: &str, arity: usize) -> impl Iterator<Item = &Clause> {
        self.candidates(name, arity)
            .iter()
            .map(|&i| &self.clauses[i])
    }

    fn candidates(&self, name: &str, arity: usize) -> &[usize] {
        self.index
            .get(name)
            .and_then(|e| e.iter().find(|(a, _)| *a == arity))
            .map(|(_, ids)| ids.as_slice())
            .unwrap_or(&[])
    }
}

/// Runs `goal` against a frozen knowledge base.
pub fn solve(
    kb: &KnowledgeBase,
    goal: &Term,
    cfg: &SolveConfig,
) -> Result<SolveOutcome, EngineError> {
    if !kb.frozen {
        return Err(EngineError::NotFrozen);
    }
    if !goal.is_callable() {
        return Err(EngineError::NotCallable(goal.to_string()));
    }
    let mut comp = Compiler::new();
    let query = comp.compile(goal);
    let named: Vec<(String, usize)> = goal
        .variables()
        .into_iter()
        .map(|v| {
            let id = comp.names[&v];
            (v, id)
        })
        .collect();

    let mut m = Machine {
        kb,
        cfg,
        store: vec![None; comp.next],
        trail: Vec::new(),
    };
    let mut found: Vec<Bindings> = Vec::new();
    let mut seen: HashSet<Bindings> = HashSet::new();
    let limit = cfg.max_solutions;
    let start = Some(Rc::new(GoalNode {
        goal: query,
        depth: 0,
        barrier: 0,
        next: None,
    }));
    let run = m.run(start, &mut |m: &Machine| {
        let mut b = Bindings::new();
        for (name, id) in &named {
            b.insert(name.clone(), m.export(&Cell::Var(*id)));
        }
        if seen.insert(b.clone()) {
            found.push(b);
        }
        limit.is_some_and(|n| found.len() >= n)
    });
    match run {
        Ok(()) if found.is_empty() => Ok(SolveOutcome::NoSolution),
        Ok(()) => Ok(SolveOutcome::Solutions(found)),
        Err(Halt::Depth) => Ok(SolveOutcome::ResourceExhausted { depth_hit: true }),
        Err(Halt::Error(e)) => Err(e),
    }
}

// ---------------------------------------------------------------------------
// search machine

type Goals = Option<Rc<GoalNode>>;

struct GoalNode {
    goal: Cell,
    depth: usize,
    /// Choicepoint height that `!` in this goal cuts back to.
    barrier: usize,
    next: Goals,
}

enum Alt<'kb> {
    Clauses {
        cands: &'kb [usize],
        pos: usize,
    },
    Between {
        cur: BigInt,
        hi: BigInt,
        target: Cell,
    },
}

struct ChoicePoint<'kb> {
    trail_len: usize,
    store_len: usize,
    goal: Cell,
    depth: usize,
    next: Goals,
    alt: Alt<'kb>,
}

enum Halt {
    Depth,
    Error(EngineError),
}

impl From<EngineError> for Halt {
    fn from(e: EngineError) -> Self {
        Halt::Error(e)
    }
}

impl From<ArithError> for Halt {
    fn from(e: ArithError) -> Self {
        Halt::Error(EngineError::Arith(e))
    }
}

struct Machine<'kb> {
    kb: &'kb KnowledgeBase,
    cfg: &'kb SolveConfig,
    store: Vec<Option<Cell>>,
    trail: Vec<usize>,
}

fn push_goal(goal: Cell, depth: usize, barrier: usize, next: Goals) -> Goals {
    Some(Rc::new(GoalNode {
        goal,
        depth,
        barrier,
        next,
    }))
}

impl<'kb> Machine<'kb> {
    /// Depth-first search over `goals`. `on_solution` returns `true` to stop.
    fn run(
        &mut self,
        goals: Goals,
        on_solution: &mut dyn FnMut(&Machine) -> bool,
    ) -> Result<(), Halt> {
        let mut cps: Vec<ChoicePoint<'kb>> = Vec::new();
        let mut goals = goals;
        loop {
            let next = match goals.take() {
                None => {
                    if on_solution(self) {
                        return Ok(());
                    }
                    None
                }
                Some(node) => self.step(&node, &mut cps)?,
            };
            match next {
                Some(g) => goals = g,
                None => match self.backtrack(&mut cps)? {
                    Some(g) => goals = g,
                    None => return Ok(()),
                },
            }
        }
    }

    fn backtrack(&mut self, cps: &mut Vec<ChoicePoint<'kb>>) -> Result<Option<Goals>, Halt> {
        while let Some(cp) = cps.pop() {
            self.undo(cp.trail_len, cp.store_len);
            match cp.alt {
                Alt::Clauses { cands, pos } => {
                    if let Some(g) = self.try_clauses(&cp.goal, cp.depth, &cp.next, cands, pos, cps)
                    {
                        return Ok(Some(g));
                    }
                }
                Alt::Between { cur, hi, target } => {
                    if cur < hi {
                        cps.push(ChoicePoint {
                            trail_len: self.trail.len(),
                            store_len: self.store.len(),
                            goal: cp.goal.clone(),
                            depth: cp.depth,
                            next: cp.next.clone(),
                            alt: Alt::Between {
                                cur: &cur + 1,
                                hi,
                                target: target.clone(),
                            },
                        });
                    }
                    let ok = self.unify(&target, &Cell::Int(Arc::new(cur)));
                    debug_assert!(ok);
                    return Ok(Some(cp.next));
                }
            }
        }
        Ok(None)
    }

    fn undo(&mut self, trail_len: usize, store_len: usize) {
        for &v in &self.trail[trail_len..] {
            if v < self.store.len() {
                self.store[v] = None;
            }
        }
        self.trail.truncate(trail_len);
        self.store.truncate(store_len);
    }

    fn deref(&self, c: &Cell) -> Cell {
        let mut cur = c;
        while let Cell::Var(v) = cur {
            match &self.store[*v] {
                Some(next) => cur = next,
                None => break,
            }
        }
        cur.clone()
    }

    fn bind(&mut self, v: usize, value: Cell) {
        self.store[v] = Some(value);
        self.trail.push(v);
    }

    fn occurs(&self, v: usize, c: &Cell) -> bool {
        match self.deref(c) {
            Cell::Var(w) => v == w,
            Cell::Comp(_, args, false) => args.iter().any(|a| self.occurs(v, a)),
            _ => false,
        }
    }

    fn unify(&mut self, a: &Cell, b: &Cell) -> bool {
        let mut stack = vec![(a.clone(), b.clone())];
        while let Some((x, y)) = stack.pop() {
            let x = self.deref(&x);
            let y = self.deref(&y);
            match (&x, &y) {
                (Cell::Var(v), Cell::Var(w)) if v == w => {}
                (Cell::Var(v), other) | (other, Cell::Var(v)) => {
                    if self.cfg.occurs_check && self.occurs(*v, other) {
                        return false;
                    }
                    self.bind(*v, other.clone());
                }
                (Cell::Atom(p), Cell::Atom(q)) | (Cell::Str(p), Cell::Str(q)) => {
                    if p != q {
                        return false;
                    }
                }
                (Cell::Int(p), Cell::Int(q)) => {
                    if p != q {
                        return false;
                    }
                }
                (Cell::Comp(f, xs, gx), Cell::Comp(g, ys, gy)) => {
                    if f != g || xs.len() != ys.len() {
                        return false;
                    }
                    if Arc::ptr_eq(xs, ys) && *gx && *gy {
                        continue;
                    }
                    stack.extend(xs.iter().cloned().zip(ys.iter().cloned()));
                }
                _ => return false,
            }
        }
        true
    }

    fn rename(&self, c: &Cell, base: usize) -> Cell {
        match c {
            Cell::Var(v) => Cell::Var(v + base),
            Cell::Comp(f, args, false) => Cell::comp(
                f.clone(),
                args.iter().map(|a| self.rename(a, base)).collect(),
            ),
            other => other.clone(),
        }
    }

    /// Copy with every bound variable replaced by its value.
    fn resolve(&self, c: &Cell) -> Cell {
        match self.deref(c) {
            Cell::Comp(f, args, false) => {
                Cell::comp(f, args.iter().map(|a| self.resolve(a)).collect())
            }
            other => other,
        }
    }

    fn export(&self, c: &Cell) -> Term {
        match self.deref(c) {
            Cell::Var(v) => Term::Var(format!("_G{v}")),
            Cell::Atom(a) => Term::Atom(a.to_string()),
            Cell::Int(i) => Term::Int((*i).clone()),
            Cell::Str(s) => Term::Str(s.to_string()),
            Cell::Comp(f, args, _) => {
                Term::Compound(f.to_string(), args.iter().map(|a| self.export(a)).collect())
            }
        }
    }

    fn fresh_copy(&mut self, c: &Cell, map: &mut HashMap<usize, usize>) -> Cell {
        match c {
            Cell::Var(v) => {
                let id = match map.get(v) {
                    Some(id) => *id,
                    None => {
                        self.store.push(None);
                        let id = self.store.len() - 1;
                        map.insert(*v, id);
                        id
                    }
                };
                Cell::Var(id)
            }
            Cell::Comp(f, args, false) => {
                let args = args.iter().map(|a| self.fresh_copy(a, map)).collect();
                Cell::comp(f.clone(), args)
            }
            other => other.clone(),
        }
    }

    fn try_clauses(
        &mut self,
        goal: &Cell,
        depth: usize,
        next: &Goals,
        cands: &'kb [usize],
        pos: usize,
        cps: &mut Vec<ChoicePoint<'kb>>,
    ) -> Option<Goals> {
        let barrier = cps.len();
        let goal_args: Option<Vec<Cell>> = match goal {
            Cell::Comp(_, args, _) => Some(args.iter().map(|a| self.deref(a)).collect()),
            _ => None,
        };
        for (i, &ci) in cands.iter().enumerate().skip(pos) {
            let clause = &self.kb.compiled[ci];
            if let (Some(gargs), Cell::Comp(_, hargs, _)) = (&goal_args, &clause.head) {
                if clash(gargs, hargs) {
                    continue;
                }
            }
            let (trail_len, store_len) = (self.trail.len(), self.store.len());
            self.store.extend(std::iter::repeat_n(None, clause.nvars));
            let head = self.rename(&clause.head, store_len);
            if self.unify(goal, &head) {
                if cands[i + 1..]
                    .iter()
                    .any(|&cj| match (&goal_args, &self.kb.compiled[cj].head) {
                        (Some(gargs), Cell::Comp(_, hargs, _)) => !clash(gargs, hargs),
                        _ => true,
                    })
                {
                    cps.push(ChoicePoint {
                        trail_len,
                        store_len,
                        goal: goal.clone(),
                        depth,
                        next: next.clone(),
                        alt: Alt::Clauses { cands, pos: i + 1 },
                    });
                }
                let mut g = next.clone();
                for b in clause.body.iter().rev() {
                    g = push_goal(self.rename(b, store_len), depth + 1, barrier, g);
                }
                return Some(g);
            }
            self.undo(trail_len, store_len);
        }
        None
    }

    fn step(
        &mut self,
        node: &GoalNode,
        cps: &mut Vec<ChoicePoint<'kb>>,
    ) -> Result<Option<Goals>, Halt> {
        let goal = self.deref(&node.goal);
        let next = node.next.clone();
        let Some((name, arity)) = goal.name() else {
            return Err(match goal {
                Cell::Var(_) => EngineError::Instantiation("call/1".into()),
                _ => EngineError::NotCallable(self.export(&goal).to_string()),
            }
            .into());
        };
        let args: Vec<Cell> = match &goal {
            Cell::Comp(_, args, _) => args.to_vec(),
            _ => Vec::new(),
        };
        let ok = |b: bool| if b { Some(next.clone()) } else { None };
        Ok(match (name, arity) {
            ("true", 0) => Some(next.clone()),
            ("fail" | "false", 0) => None,
            ("!", 0) => {
                cps.truncate(node.barrier);
                Some(next.clone())
            }
            (",", 2) => {
                let g = push_goal(args[1].clone(), node.depth, node.barrier, next.clone());
                Some(push_goal(args[0].clone(), node.depth, node.barrier, g))
            }
            ("\\+", 1) => {
                let (tl, sl) = (self.trail.len(), self.store.len());
                let mut succeeded = false;
                let sub = push_goal(args[0].clone(), node.depth, 0, None);
                self.run(sub, &mut |_| {
                    succeeded = true;
                    true
                })?;
                self.undo(tl, sl);
                ok(!succeeded)
            }
            ("findall", 3) => {
                let (tl, sl) = (self.trail.len(), self.store.len());
                let mut results = Vec::new();
                let template = args[0].clone();
                let sub = push_goal(args[1].clone(), node.depth, 0, None);
                self.run(sub, &mut |m| {
                    results.push(m.resolve(&template));
                    false
                })?;
                self.undo(tl, sl);
                let mut list = Cell::Atom(NIL.into());
                let copies: Vec<Cell> = results
                    .iter()
                    .map(|r| self.fresh_copy(r, &mut HashMap::new()))
                    .collect();
                for item in copies.into_iter().rev() {
                    list = Cell::comp(CONS.into(), vec![item, list]);
                }
                ok(self.unify(&args[2], &list))
            }
            ("=", 2) => ok(self.unify(&args[0], &args[1])),
            ("\\=", 2) => {
                let (tl, sl) = (self.trail.len(), self.store.len());
                let unified = self.unify(&args[0], &args[1]);
                self.undo(tl, sl);
                ok(!unified)
            }
            ("is", 2) => {
                let v = self.eval(&args[1])?;
                ok(self.unify(&args[0], &Cell::Int(Arc::new(v))))
            }
            ("<" | ">" | "=<" | ">=" | "=:=" | "=\\=", 2) => {
                let ord = self.eval(&args[0])?.cmp(&self.eval(&args[1])?);
                ok(compare_holds(name, ord))
            }
            ("between", 3) => {
                let lo = self.int_arg(&args[0], "between/3")?;
                let hi = self.int_arg(&args[1], "between/3")?;
                match self.deref(&args[2]) {
                    Cell::Int(x) => ok(lo <= *x && *x <= hi),
                    target @ Cell::Var(_) => {
                        if lo > hi {
                            None
                        } else {
                            if lo < hi {
                                cps.push(ChoicePoint {
                                    trail_len: self.trail.len(),
                                    store_len: self.store.len(),
                                    goal: goal.clone(),
                                    depth: node.depth,
                                    next: next.clone(),
                                    alt: Alt::Between {
                                        cur: &lo + BigInt::one(),
                                        hi,
                                        target: target.clone(),
                                    },
                                });
                            }
                            ok(self.unify(&target, &Cell::Int(Arc::new(lo))))
                        }
                    }
                    other => return Err(type_error(&self.export(&other), "integer").into()),
                }
            }
            ("sum_list", 2) => {
                let items = self.proper_list(&args[0], "sum_list/2")?;
                let mut total = BigInt::zero();
                for item in items {
                    total += self.int_arg(&item, "sum_list/2")?;
                }
                ok(self.unify(&args[1], &Cell::Int(Arc::new(total))))
            }
            ("length", 2) => {
                let n = self.proper_list(&args[0], "length/2")?.len();
                ok(self.unify(&args[1], &Cell::Int(Arc::new(BigInt::from(n)))))
            }
            ("year_of", 2) => {
                let date = self.date_arg(&args[0])?;
                let year: BigInt = date[..4].parse().expect("validated digits");
                ok(self.unify(&args[1], &Cell::Int(Arc::new(year))))
            }
            ("date_lt" | "date_le" | "date_gt" | "date_ge", 2) => {
                let ord = self.date_arg(&args[0])?.cmp(&self.date_arg(&args[1])?);
                ok(match name {
                    "date_lt" => ord == Ordering::Less,
                    "date_le" => ord != Ordering::Greater,
                    "date_gt" => ord == Ordering::Greater,
                    _ => ord != Ordering::Less,
                })
            }
            (";" | "->", 2) => {
                return Err(
                    EngineError::Type(format!("unsupported control construct {name}/2")).into(),
                )
            }
            _ => {
                if node.depth >= self.cfg.max_depth {
                    return Err(Halt::Depth);
                }
                let cands = self.kb.candidates(name, arity);
                self.try_clauses(&goal, node.depth, &next, cands, 0, cps)
            }
        })
    }

    fn eval(&self, c: &Cell) -> Result<BigInt, Halt> {
        match self.deref(c) {
            Cell::Int(i) => Ok((*i).clone()),
            Cell::Var(v) => Err(ArithError::Unbound(format!("_G{v}")).into()),
            Cell::Comp(f, args, _) => {
                let vals = args
                    .iter()
                    .map(|a| self.eval(a))
                    .collect::<Result<Vec<_>, _>>()?;
                match arith::apply(&f, &vals) {
                    Some(r) => Ok(r?),
                    None => Err(ArithError::NotEvaluable(self.export(c).to_string()).into()),
                }
            }
            other => Err(ArithError::NotEvaluable(self.export(&other).to_string()).into()),
        }
    }

    fn int_arg(&self, c: &Cell, ctx: &str) -> Result<BigInt, Halt> {
        match self.deref(c) {
            Cell::Int(i) => Ok((*i).clone()),
            Cell::Var(_) => Err(EngineError::Instantiation(ctx.into()).into()),
            other => Err(type_error(&self.export(&other), "integer").into()),
        }
    }

    fn date_arg(&self, c: &Cell) -> Result<Arc<str>, Halt> {
        match self.deref(c) {
            Cell::Str(s) if builtins::is_iso_date(&s) => Ok(s),
            Cell::Var(_) => Err(EngineError::Instantiation("date builtin".into()).into()),
            other => Err(EngineError::BadDate(self.export(&other).to_string()).into()),
        }
    }

    fn proper_list(&self, c: &Cell, ctx: &str) -> Result<Vec<Cell>, Halt> {
        let mut out = Vec::new();
        let mut cur = self.deref(c);
        loop {
            match cur {
                Cell::Atom(a) if &*a == NIL => return Ok(out),
                Cell::Comp(f, args, _) if &*f == CONS && args.len() == 2 => {
                    out.push(args[0].clone());
                    cur = self.deref(&args[1]);
                }
                Cell::Var(_) => return Err(EngineError::Instantiation(ctx.into()).into()),
                other => return Err(type_error(&self.export(&other), "list").into()),
            }
        }
    }
}

/// True when two argument vectors have a constant mismatch at the top level.
fn clash(goal_args: &[Cell], head_args: &[Cell]) -> bool {
    goal_args.iter().zip(head_args).any(|(g, h)| match (g, h) {
        (Cell::Atom(a), Cell::Atom(b)) | (Cell::Str(a), Cell::Str(b)) => a != b,
        (Cell::Int(a), Cell::Int(b)) => a != b,
        (Cell::Var(_), _) | (_, Cell::Var(_)) => false,
        (Cell::Comp(f, xs, _), Cell::Comp(g, ys, _)) => f != g || xs.len() != ys.len(),
        _ => true,
    })
}

fn compare_holds(op: &str, ord: Ordering) -> bool {
    match op {
        "<" => ord == Ordering::Less,
        ">" => ord == Ordering::Greater,
        "=<" => ord != Ordering::Greater,
        ">=" => ord != Ordering::Less,
        "=:=" => ord == Ordering::Equal,
        _ => ord != Ordering::Equal,
    }
}

fn type_error(t: &Term, expected: &str) -> EngineError {
    EngineError::Type(format!("expected {expected}, found `{t}`"))
}

/// Integer value of a term, if it is one that fits in `i64`.
pub fn small_int(t: &Term) -> Option<i64> {
    t.as_int().and_then(ToPrimitive::to_i64)
}
