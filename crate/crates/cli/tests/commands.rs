use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::io::Write;

use kgd_cli::chat::{Reply, Session};
use kgd_cli::{DecodeArgs, Loaded};
use tempfile::TempDir;

fn kgd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kgd"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = kgd(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Column two of a `key<TAB>value` table.
fn field(tsv: &str, key: &str) -> String {
    tsv.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}\t")))
        .unwrap_or_else(|| panic!("no {key} in {tsv}"))
        .to_string()
}

#[test]
fn build_kb_counts_modes_and_reruns() {
    let dir = TempDir::new().unwrap();
    let lines: Vec<String> = (0..10).map(|i| format!("fact number {i} about item{i}")).collect();
    let input = dir.path().join("kb.txt");
    fs::write(&input, lines.join("\n")).unwrap();
    let prefix = dir.path().join("kb");
    let out = ok(&["build-kb", "--input", s(&input), "--mode", "sentence", "--out", s(&prefix)]);
    assert_eq!(field(&out, "sentences"), "10");
    assert_eq!(field(&out, "avg_len"), "5.0000");

    let idx = fs::read(dir.path().join("kb.idx")).unwrap();
    let side = fs::read(dir.path().join("kb.sentences.txt")).unwrap();
    ok(&["build-kb", "--input", s(&input), "--out", s(&prefix)]);
    assert_eq!(fs::read(dir.path().join("kb.idx")).unwrap(), idx);
    assert_eq!(fs::read(dir.path().join("kb.sentences.txt")).unwrap(), side);

    let docs = dir.path().join("docs.txt");
    fs::write(&docs, "First one here. Second one here.\nThird one.\n").unwrap();
    let out = ok(&["build-kb", "--input", s(&docs), "--mode", "doc", "--out", s(&dir.path().join("d"))]);
    assert_eq!(field(&out, "sentences"), "3");
    let out = ok(&["build-kb", "--input", s(&docs), "--mode", "sentence", "--out", s(&dir.path().join("d"))]);
    assert_eq!(field(&out, "sentences"), "2");
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.txt");
    let out = kgd(&["build-kb", "--input", s(&missing), "--out", s(&dir.path().join("kb"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    assert!(!out.stderr.is_empty());

    let out = kgd(&["build-kb", "--input", s(&missing), "--out", "x", "--bogus"]);
    assert!(!out.status.success());
    let out = kgd(&["build-kb", "--out", "x"]);
    assert!(!out.status.success());

    // Nothing to train on is a training error, not an I/O one.
    let kb = dir.path().join("kb.txt");
    fs::write(&kb, "a lonely fact about owls\n").unwrap();
    ok(&["build-kb", "--input", s(&kb), "--out", s(&dir.path().join("kb"))]);
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = kgd(&[
        "train", "--smoke", "--train", s(&empty), "--kb", s(&dir.path().join("kb")),
        "--out", s(&dir.path().join("run")), "--validate-every", "0",
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

const FIXTURE_KB: [&str; 3] = [
    "the eiffel tower in paris was completed in 1889 for the world fair",
    "mount everest rises above the himalaya border between nepal and tibet",
    "honey bees communicate through a waggle dance",
];

/// Rules 1 to 5 in order, then one that passes.
const FIXTURE_RESPONSES: [&str; 6] = [
    "i like that a lot",
    "eiffel tower paris completed 1889 world fair honey bees waggle dance nepal",
    "paris tower fair world the the the the a a a a",
    "i think my cat is so happy when she can sleep on it all day",
    "i read that honey bees communicate through a waggle dance and it amazed me",
    "the eiffel tower in paris was completed in 1889 for the world fair",
];

fn fixture_kb(dir: &Path) -> PathBuf {
    let kb = dir.join("kb.txt");
    fs::write(&kb, FIXTURE_KB.join("\n")).unwrap();
    let prefix = dir.join("kb");
    ok(&["build-kb", "--input", s(&kb), "--out", s(&prefix)]);
    prefix
}

fn dialogue_line(response: &str) -> String {
    format!("{{\"context\": [\"tell me something\"], \"response\": \"{response}\"}}")
}

fn report_counts(path: &Path) -> Vec<(String, usize)> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("category\tcount"));
    lines
        .map(|l| {
            let (k, v) = l.split_once('\t').unwrap();
            (k.to_string(), v.parse().unwrap())
        })
        .collect()
}

#[test]
fn filter_fixture_one_rejection_per_rule() {
    let dir = TempDir::new().unwrap();
    let kb = fixture_kb(dir.path());
    let input = dir.path().join("in.jsonl");
    let mut text: Vec<String> = FIXTURE_RESPONSES.iter().map(|r| dialogue_line(r)).collect();
    text.push("{not json".into());
    fs::write(&input, text.join("\n")).unwrap();
    let (out, report) = (dir.path().join("out.jsonl"), dir.path().join("report.tsv"));
    let summary = ok(&[
        "filter-dialogues", "--input", s(&input), "--kb", s(&kb), "--out", s(&out), "--report", s(&report),
    ]);
    assert_eq!(field(&summary, "accepted"), "1");
    assert_eq!(field(&summary, "total"), "7");
    let counts = report_counts(&report);
    let want = [("rule1", 1), ("rule2", 1), ("rule3", 1), ("rule4", 1), ("rule5", 1), ("malformed", 1), ("accepted", 1)];
    let want: Vec<(String, usize)> = want.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    assert_eq!(counts, want);
    assert_eq!(counts.iter().map(|c| c.1).sum::<usize>(), text.len());
    let kept = fs::read_to_string(&out).unwrap();
    assert_eq!(kept.lines().count(), 1);
    assert!(kept.contains(FIXTURE_RESPONSES[5]));
}

#[test]
fn filter_empty_input() {
    let dir = TempDir::new().unwrap();
    let kb = fixture_kb(dir.path());
    let input = dir.path().join("in.jsonl");
    fs::write(&input, "").unwrap();
    let (out, report) = (dir.path().join("out.jsonl"), dir.path().join("report.tsv"));
    ok(&["filter-dialogues", "--input", s(&input), "--kb", s(&kb), "--out", s(&out), "--report", s(&report)]);
    assert_eq!(fs::read_to_string(&out).unwrap(), "");
    assert!(report_counts(&report).iter().all(|c| c.1 == 0));
}

/// A synthetic corpus, its index and a briefly trained checkpoint.
struct Trained {
    dir: TempDir,
}

impl Trained {
    fn new(steps: u64) -> Self {
        let dir = TempDir::new().unwrap();
        let p = dir.path();
        let out = ok(&["synth", "--out", s(p), "--dialogues", "60", "--candidates", "4", "--seed", "3"]);
        assert_eq!(field(&out, "dialogues"), "60");
        ok(&["build-kb", "--input", s(&p.join("knowledge.txt")), "--out", s(&p.join("kb"))]);
        let steps = steps.to_string();
        let out = ok(&[
            "train", "--smoke", "--train", s(&p.join("dialogues.jsonl")), "--kb", s(&p.join("kb")),
            "--out", s(&p.join("run")), "--max-steps", &steps, "--validate-every", "0", "--seed", "5",
            "--set", "hidden=16", "--set", "layers=1",
        ]);
        assert_eq!(field(&out, "steps"), steps);
        Self { dir }
    }

    fn path(&self, rel: &str) -> String {
        self.dir.path().join(rel).to_str().unwrap().to_string()
    }
}

#[test]
fn train_logs_at_most_max_steps() {
    let t = Trained::new(10);
    let log = fs::read_to_string(t.path("run/train_log.tsv")).unwrap();
    let rows: Vec<&str> = log.lines().skip(1).collect();
    assert_eq!(rows.len(), 10);
    assert_eq!(rows.last().unwrap().split('\t').next(), Some("10"));
    for f in ["model.bin", "vocab.txt", "net.txt", "train.txt", "state.txt", "optim.bin"] {
        assert!(t.dir.path().join("run/best").join(f).exists(), "{f}");
    }
    let cfg = fs::read_to_string(t.path("run/best/train.txt")).unwrap();
    assert!(cfg.lines().any(|l| l.replace(' ', "") == "seed=5"), "{cfg}");
}

#[test]
fn eval_sweep_and_chat() {
    let t = Trained::new(4);
    let (ckpt, kb) = (t.path("run/best"), t.path("kb"));

    // References scored as hypotheses give perfect F1.
    let test = t.path("test.jsonl");
    let lines: Vec<String> = fs::read_to_string(t.path("dialogues.jsonl")).unwrap().lines().take(5).map(String::from).collect();
    fs::write(&test, lines.join("\n")).unwrap();
    let refs: Vec<String> = lines
        .iter()
        .map(|l| kgd_core::corpus::DialogueExample::from_json_line(l, 1).unwrap().response)
        .collect();
    let hyps = t.path("hyps.txt");
    fs::write(&hyps, refs.join("\n")).unwrap();
    let tsv = ok(&["eval", "--checkpoint", &ckpt, "--kb", &kb, "--test", &test, "--hypotheses", &hyps]);
    let header: Vec<&str> = tsv.lines().next().unwrap().split('\t').collect();
    assert_eq!(header[..5], ["example", "ppl", "nll", "tokens", "f1"]);
    let all: Vec<&str> = tsv.lines().last().unwrap().split('\t').collect();
    assert_eq!(all[0], "all");
    assert_eq!(all[4], "1.000000");
    assert_eq!(all[5], "1.000000");
    let ppl: f64 = all[1].parse().unwrap();
    assert!(ppl.is_finite() && ppl > 1.0);
    assert_eq!(tsv.lines().count(), 1 + 5 + 1);

    // Decoding and writing to a file; stdout stays empty.
    let out = t.path("eval.tsv");
    let printed = ok(&["eval", "--checkpoint", &ckpt, "--kb", &kb, "--test", &test, "--out", &out, "--alpha", "0.5"]);
    assert!(printed.is_empty());
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 7);

    let sweep = ok(&["sweep-alpha", "--checkpoint", &ckpt, "--kb", &kb, "--test", &test, "--beam", "1"]);
    let rows: Vec<&str> = sweep.lines().collect();
    assert_eq!(rows[0], "alpha\tmean_sim\tn_examples");
    assert_eq!(rows.len(), 10);
    assert!(rows[1].starts_with("0.1\t") && rows[9].starts_with("0.9\t"));
    assert!(rows[1..].iter().all(|r| r.ends_with("\t5")));
    let again = ok(&["sweep-alpha", "--checkpoint", &ckpt, "--kb", &kb, "--test", &test, "--beam", "1"]);
    assert_eq!(sweep, again);

    chat_session(&ckpt, &kb);
    chat_binary(&ckpt, &kb);
}

fn text(r: Reply) -> String {
    match r {
        Reply::Text(t) => t,
        Reply::Quit => panic!("unexpected quit"),
    }
}

fn chat_session(ckpt: &str, kb: &str) {
    let args = DecodeArgs {
        checkpoint: ckpt.into(),
        kb: kb.into(),
        topk: Some(3),
        beam: Some(1),
    };
    let mut chat = Session::new(Loaded::open(&args).unwrap(), None);
    assert_eq!(text(chat.handle("/show")), "nothing yet");

    assert!(text(chat.handle("/alpha 0.7")).contains("0.7"));
    text(chat.handle("where does amara live ?"));
    let show = text(chat.handle("/show"));
    assert!(show.contains("bucket\t7\n"), "{show}");
    assert!(show.contains("(fixed)"));
    assert!(show.contains("context\t1 utterances"));
    let ranked: Vec<&str> = show.lines().skip_while(|l| !l.starts_with("rank\t")).skip(1).collect();
    assert_eq!(ranked.len(), 3);

    text(chat.handle("what does amara drive ?"));
    assert!(text(chat.handle("/show")).contains("context\t3 utterances"));

    let err = text(chat.handle("/alpha 1.5"));
    assert!(err.starts_with("error"), "{err}");
    assert_eq!(chat.alpha, Some(0.7));

    assert_eq!(text(chat.handle("/reset")), "context cleared");
    assert!(chat.context.is_empty());
    text(chat.handle("does amara have any pets ?"));
    assert!(text(chat.handle("/show")).contains("context\t1 utterances"));

    assert!(text(chat.handle("/frobnicate")).starts_with("commands:"));
    text(chat.handle("/alpha auto"));
    assert_eq!(chat.alpha, None);
    text(chat.handle("what food does amara cook ?"));
    assert!(text(chat.handle("/show")).contains("(predicted)"));
    assert_eq!(chat.handle("/quit"), Reply::Quit);
}

fn chat_binary(ckpt: &str, kb: &str) {
    let mut child = Command::new(env!("CARGO_BIN_EXE_kgd"))
        .args(["chat", "--checkpoint", ckpt, "--kb", kb, "--alpha", "0.3", "--beam", "1"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"/nonsense\nwhere does soren live ?\n/show\n/quit\nnever read\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("commands:"));
    assert!(stdout.contains("bucket\t3\n"), "{stdout}");

    let out = kgd(&["chat", "--checkpoint", ckpt, "--kb", kb, "--alpha", "2"]);
    assert_eq!(out.status.code(), Some(1));
}
