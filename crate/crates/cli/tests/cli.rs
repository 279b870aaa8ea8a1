use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmt")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = cmt(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path) {
    ok(&[
        "gen-corpus", "--langs", "3", "--sentences", "40", "--vocab", "10", "--heldout", "8", "--seed", "3", "--out", s(dir),
    ]);
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn write_config(root: &Path, corpus: &Path) -> std::path::PathBuf {
    let path = root.join("run.cfg");
    let text = format!(
        "# tiny model\ncorpus_dir = {}\nd_model = 8\nn_heads = 2\nd_ffn = 16\nmax_len = 16\ntotal_steps = 6\nwarmup_steps = 2\ntoken_budget = 64\n",
        corpus.display()
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn gen_corpus_is_deterministic_and_guards_output() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    gen(&a);
    gen(&b);
    let ca = dir_contents(&a);
    assert_eq!(ca, dir_contents(&b));
    for name in ["manifest.txt", "ciphers.tsv", "synonyms.tsv", "l1-l2.l1.txt", "mono.l3.txt", "multiway.l2.txt"] {
        assert!(ca.iter().any(|(n, _)| n == name), "missing {name}");
    }
    let again = cmt(&["gen-corpus", "--langs", "3", "--out", s(&a)]);
    assert_eq!(again.status.code(), Some(1));
    ok(&["gen-corpus", "--langs", "3", "--sentences", "10", "--vocab", "10", "--heldout", "4", "--out", s(&a), "--force"]);
}

#[test]
fn train_eval_export_round() {
    let root = tempfile::tempdir().unwrap();
    let corpus = root.path().join("corpus");
    gen(&corpus);
    let cfg = write_config(root.path(), &corpus);
    let run = root.path().join("run");
    ok(&["train", "--config", s(&cfg), "--mode", "baseline", "--out", s(&run), "--set", "seed=4"]);
    for f in ["manifest.txt", "config.txt", "vocab.txt", "train_log.tsv", "checkpoint.bin"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert_eq!(fs::read_to_string(run.join("train_log.tsv")).unwrap().lines().count(), 7);
    assert!(fs::read_to_string(run.join("config.txt")).unwrap().contains("seed = 4"));

    let ckpt = run.join("checkpoint.bin");
    let before = fs::read(&ckpt).unwrap();
    let ev = root.path().join("eval");
    let out = ok(&["eval", "--ckpt", s(&ckpt), "--suite", "all", "--out", s(&ev)]);
    assert_eq!(fs::read(&ckpt).unwrap(), before);
    let summary = fs::read_to_string(ev.join("summary.txt")).unwrap();
    for word in ["supervised", "unsupervised", "zero-shot"] {
        assert!(summary.contains(word));
    }
    assert_eq!(String::from_utf8(out.stdout).unwrap(), summary);
    let reports = fs::read_to_string(ev.join("reports.tsv")).unwrap();
    assert_eq!(reports.lines().count(), 1 + 2 * 6);

    let emb = root.path().join("emb.tsv");
    ok(&["export-emb", "--ckpt", s(&ckpt), "--proj", "pca2", "--out", s(&emb)]);
    let text = fs::read_to_string(&emb).unwrap();
    assert_eq!(text.lines().count(), 3 * 8);
    assert!(text.lines().all(|l| l.split('\t').count() == 4));
}

#[test]
fn augment_preview_output() {
    let root = tempfile::tempdir().unwrap();
    let corpus = root.path().join("corpus");
    gen(&corpus);
    let input = root.path().join("in.txt");
    fs::write(&input, "l1_0 l1_1 l1_2\nl1_3\n").unwrap();
    let dict = corpus.join("synonyms.tsv");
    let args = ["augment-preview", "--dict", s(&dict), "--input", s(&input), "--seed", "2"];
    let a = ok(&args);
    assert_eq!(a.stdout, ok(&args).stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "original\taugmented");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("l1_0 l1_1 l1_2\t"));
    let mut p0 = args.to_vec();
    p0.extend(["--p", "0"]);
    let text = String::from_utf8(ok(&p0).stdout).unwrap();
    for l in text.lines().skip(1) {
        let (a, b) = l.split_once('\t').unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn ablation_writes_comparison() {
    let root = tempfile::tempdir().unwrap();
    let corpus = root.path().join("corpus");
    gen(&corpus);
    let cfg = write_config(root.path(), &corpus);
    let out = root.path().join("abl");
    let res = ok(&["ablation", "--config", s(&cfg), "--modes", "baseline,full", "--out", s(&out)]);
    let table = fs::read_to_string(out.join("comparison.tsv")).unwrap();
    assert_eq!(String::from_utf8(res.stdout).unwrap(), table);
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().nth(2).unwrap().starts_with("full\t"));
}

#[test]
fn exit_codes() {
    assert_eq!(cmt(&[]).status.code(), Some(1));
    assert_eq!(cmt(&["train", "--mode", "sideways"]).status.code(), Some(1));
    assert_eq!(cmt(&["--help"]).status.code(), Some(0));
    let root = tempfile::tempdir().unwrap();
    let missing = root.path().join("nope.bin");
    let r = cmt(&["eval", "--ckpt", s(&missing), "--out", s(&root.path().join("e"))]);
    assert_eq!(r.status.code(), Some(2));
    let cfg = root.path().join("bad.cfg");
    fs::write(&cfg, "corpus_dir = x\nwarmup = 3\n").unwrap();
    let r = cmt(&["train", "--config", s(&cfg), "--out", s(&root.path().join("t"))]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("warmup"));
}
