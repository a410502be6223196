//! Statutory reasoning toolkit: runs tax-law cases as logic programs,
//! audits benchmark contamination with bias-corrected quizzes, and builds
//! perturbed test splits whose labels are regenerated by the solver.

pub mod arith;
pub mod audit;
pub mod builtins;
pub mod bundled;
pub mod corpus;
pub mod engine;
pub mod eval;
pub mod fixpoint;
pub mod llm;
pub mod parser;
pub mod render;
pub mod term;
pub mod util;
pub mod variants;

pub use engine::{solve, unify, Bindings, EngineError, KnowledgeBase, SolveConfig, SolveOutcome};
pub use parser::{parse_program, parse_query, ParseError};
pub use render::{render_clause, render_program, render_term};
pub use term::{Clause, Program, Term};
