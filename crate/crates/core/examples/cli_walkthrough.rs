//! Drives `nxgpt` in-process through every subcommand, in the order a user
//! would run them, inside a scratch directory.

use std::path::{Path, PathBuf};

fn nxgpt(args: &[&str]) -> String {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("nxgpt").chain(args.iter().copied());
    let code = nxgpt::cli::run(argv, &mut out, &mut err);
    let err = String::from_utf8_lossy(&err);
    assert_eq!(code, 0, "nxgpt {} failed: {err}", args.join(" "));
    String::from_utf8_lossy(&out).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn main() {
    let quick = std::env::args().any(|a| a == "--quick");
    let root: PathBuf = std::env::temp_dir().join(format!("nxgpt-walkthrough-{}", std::process::id()));
    let p = |x: &str| root.join(x);
    let (pairs, dialogues, pre_steps, steps) = if quick { ("2", "2", "5", "2") } else { ("11", "31", "600", "300") };

    nxgpt(&["gen-data", "--out", s(&p("data")), "--pairs", pairs, "--dialogues", dialogues, "--seed", "5"]);
    println!("gen-data wrote {}", p("data").display());
    nxgpt(&["pretrain", "--data", s(&p("data")), "--out", s(&p("pre")), "--llm-steps", pre_steps, "--backbone-steps", pre_steps, "--seed", "5"]);
    let mut prev = p("pre");
    for stage in ["1", "2", "3"] {
        let out = p(&format!("s{stage}"));
        nxgpt(&["train", "--stage", stage, "--data", s(&p("data")), "--out", s(&out), "--resume", s(&prev), "--steps", steps, "--seed", "5"]);
        let log = std::fs::read_to_string(out.join("metrics.jsonl")).expect("metrics log");
        println!("train stage {stage}: {} logged steps, last {}", log.lines().count(), log.lines().last().unwrap_or(""));
        prev = out;
    }
    let record = nxgpt(&["infer", "--ckpt", s(&prev), "--prompt", "show a picture of a big red dot, top left", "--max-new", "32", "--seed", "5"]);
    println!("infer:\n{record}");
    let budget = nxgpt(&["param-budget", "--paper-scale"]);
    println!("param-budget:\n{budget}");
    let sweep = nxgpt(&["sweep-signals", "--counts", "1,4", "--data", s(&p("data")), "--out", s(&p("sweep")), "--resume", s(&p("s1")), "--steps", steps, "--seed", "5"]);
    println!("sweep-signals:\n{sweep}");
    let _ = std::fs::remove_dir_all(&root);
}
