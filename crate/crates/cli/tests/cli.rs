use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/fixtures")
        .join(name)
}

fn taxlog(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taxlog"))
        .args(args)
        .current_dir(dir)
        .env_remove("TAXLOG_API_KEY")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn solve_alice() {
    let dir = tempfile::tempdir().unwrap();
    let alice = fixture("alice.pl");
    let statutes = fixture("statutes.pl");
    let o = taxlog(
        dir.path(),
        &[
            "solve",
            "--statutes",
            statutes.to_str().unwrap(),
            "--facts",
            alice.to_str().unwrap(),
            "--query",
            "owes_tax(alice,2015,T)",
            "--out",
            "run",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o), "T = 14000\n");
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("run/manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["config"]["query"], "owes_tax(alice,2015,T)");
}

#[test]
fn solve_verdicts_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let alice = fixture("alice.pl");
    let a = alice.to_str().unwrap();
    let yes = taxlog(
        dir.path(),
        &[
            "solve",
            "--facts",
            a,
            "--query",
            "owes_tax(alice,2015,14000)",
        ],
    );
    assert_eq!(
        (yes.status.code(), stdout(&yes).as_str()),
        (Some(0), "Entailment\n")
    );
    let no = taxlog(
        dir.path(),
        &[
            "solve",
            "--facts",
            a,
            "--query",
            "owes_tax(alice,2015,14001)",
        ],
    );
    assert_eq!(
        (no.status.code(), stdout(&no).as_str()),
        (Some(0), "Contradiction\n")
    );

    let looping = fixture("loop.pl");
    let o = taxlog(
        dir.path(),
        &[
            "solve",
            "--statutes",
            looping.to_str().unwrap(),
            "--query",
            "ancestor(a,X)",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("resource_exhausted"));

    let o = taxlog(
        dir.path(),
        &["solve", "--facts", "missing/facts.pl", "--query", "p"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing/facts.pl"));

    let o = taxlog(dir.path(), &["solve", "--query", "p", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn computed_predicate_in_facts_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.pl"), "s151(alice, 2015, 4000).\n").unwrap();
    let o = taxlog(
        dir.path(),
        &[
            "solve",
            "--facts",
            "bad.pl",
            "--query",
            "owes_tax(alice,2015,T)",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("s151"), "{}", stderr(&o));
}

#[test]
fn every_subcommand_documents_its_flags() {
    let dir = tempfile::tempdir().unwrap();
    let expect: [(&[&str], &[&str]); 6] = [
        (
            &["solve"],
            &[
                "--statutes",
                "--facts",
                "--query",
                "--ruleset",
                "--blocklist",
                "--seed",
                "--max-depth",
                "--out",
            ],
        ),
        (
            &["eval"],
            &[
                "--statutes",
                "--cases",
                "--ruleset",
                "--blocklist",
                "--mode",
                "--provider",
                "--model",
                "--seed",
                "--max-depth",
                "--jobs",
                "--out",
            ],
        ),
        (
            &["gen"],
            &[
                "--statutes",
                "--cases",
                "--blocklist",
                "--seed",
                "--max-depth",
                "--jobs",
                "--out",
                "--split",
            ],
        ),
        (
            &["quiz", "build"],
            &[
                "--cases",
                "--provider",
                "--model",
                "--seed",
                "--out",
                "--stage",
            ],
        ),
        (
            &["quiz", "run"],
            &[
                "--quiz",
                "--responder",
                "--provider",
                "--model",
                "--seed",
                "--out",
            ],
        ),
        (&["quiz", "report"], &["--bdq", "--bcq", "--out"]),
    ];
    for (cmd, flags) in expect {
        let mut args = cmd.to_vec();
        args.push("--help");
        let o = taxlog(dir.path(), &args);
        assert_eq!(o.status.code(), Some(0));
        let help = stdout(&o);
        for f in flags {
            assert!(help.contains(f), "{cmd:?} --help lacks {f}");
        }
    }
}

#[test]
fn eval_gold_summary() {
    let dir = tempfile::tempdir().unwrap();
    let o = taxlog(dir.path(), &["eval", "--mode", "gold_facts", "--out", "ev"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(
        stdout(&o).starts_with("EM 1.000  Err 0.000"),
        "{}",
        stdout(&o)
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("ev/report.json")).unwrap())
            .unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 37);
}

#[test]
fn gen_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = taxlog(
            dir.path(),
            &["gen", "--split", "N_rc", "--seed", "42", "--out", out],
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for f in ["N_rc.jsonl", "r_prime.pl", "r_prime.txt"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn failed_runs_leave_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = taxlog(
        dir.path(),
        &[
            "eval",
            "--mode",
            "direct_qa",
            "--provider",
            "http",
            "--out",
            "ev",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("TAXLOG_API_KEY"));
    assert!(!dir.path().join("ev").exists());

    let o = taxlog(dir.path(), &["gen", "--split", "Ee_r", "--out", "g"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("g").exists());
}

#[test]
fn quiz_report_prints_contamination() {
    let dir = tempfile::tempdir().unwrap();
    let steps: [&[&str]; 4] = [
        &["quiz", "build", "--seed", "3", "--out", "q"],
        &[
            "quiz",
            "run",
            "--quiz",
            "q/bdq.jsonl",
            "--responder",
            "memorizer",
            "--out",
            "q/r1.jsonl",
        ],
        &[
            "quiz",
            "build",
            "--stage",
            "bcq",
            "--bdq",
            "q/bdq.jsonl",
            "--responses",
            "q/r1.jsonl",
            "--originals",
            "q/originals.jsonl",
            "--out",
            "q",
        ],
        &[
            "quiz",
            "run",
            "--quiz",
            "q/bcq.jsonl",
            "--responder",
            "memorizer",
            "--out",
            "q/r2.jsonl",
        ],
    ];
    for s in steps {
        let o = taxlog(dir.path(), s);
        assert_eq!(o.status.code(), Some(0), "{s:?}: {}", stderr(&o));
    }
    let o = taxlog(
        dir.path(),
        &[
            "quiz",
            "report",
            "--bdq",
            "q/r1.jsonl",
            "--bcq",
            "q/r2.jsonl",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("min_contamination 1.000"), "{out}");
    assert!(out.contains("max_contamination 1.000"), "{out}");
}
