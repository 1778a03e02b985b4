use std::path::{Path, PathBuf};

use d2stream::cli::main_with_args;
use d2stream::config::RunConfig;
use d2stream::eval::read_predictions;

struct Run {
    code: i32,
    out: String,
    err: String,
}

fn run(args: &[&str]) -> Run {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut full = vec!["d2stream"];
    full.extend_from_slice(args);
    let code = main_with_args(full, &mut out, &mut err);
    Run {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn ok(args: &[&str]) -> Run {
    let r = run(args);
    assert_eq!(
        r.code, 0,
        "{args:?}\nstdout:\n{}\nstderr:\n{}",
        r.out, r.err
    );
    r
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Workspace {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn gen(&self, name: &str, seed: u64, scenes: usize) -> PathBuf {
        let path = self.path(name);
        ok(&[
            "gen-data",
            "--seed",
            &seed.to_string(),
            "--scenes",
            &scenes.to_string(),
            "--out",
            p(&path),
        ]);
        path
    }

    /// One short training run; returns the checkpoint path.
    fn train(&self, name: &str, corpus: &Path, extra: &[&str]) -> PathBuf {
        let model = self.path(&format!("{name}.ckpt"));
        let log = self.path(&format!("{name}.csv"));
        let mut args = vec![
            "train",
            "--corpus",
            p(corpus),
            "--model",
            p(&model),
            "--log",
            p(&log),
        ];
        args.extend_from_slice(&["--set", "train.epochs=1", "--set", "train.gate_epochs=1"]);
        args.extend_from_slice(extra);
        ok(&args);
        model
    }

    fn eval(&self, name: &str, model: &Path, corpus: &Path, extra: &[&str]) -> (String, String) {
        let out = self.path(&format!("{name}.pred.csv"));
        let metrics = self.path(&format!("{name}.metrics"));
        let mut args = vec![
            "eval",
            "--model",
            p(model),
            "--corpus",
            p(corpus),
            "--out",
            p(&out),
            "--metrics",
            p(&metrics),
        ];
        args.extend_from_slice(extra);
        ok(&args);
        (
            std::fs::read_to_string(out).unwrap(),
            std::fs::read_to_string(metrics).unwrap(),
        )
    }
}

#[test]
fn gen_data_is_deterministic_and_reports_statistics() {
    let ws = Workspace::new();
    let a = ws.gen("a.bin", 42, 5);
    let b = ws.gen("b.bin", 42, 5);
    let c = ws.gen("c.bin", 43, 5);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
    let r = ok(&[
        "gen-data",
        "--seed",
        "1",
        "--scenes",
        "3",
        "--out",
        p(&ws.path("d.bin")),
    ]);
    assert!(r.out.contains("wrote 3 scenes"), "{}", r.out);
    assert!(r.out.contains("speaking rate"), "{}", r.out);
}

#[test]
fn gen_data_refuses_zero_scenes() {
    let ws = Workspace::new();
    let r = run(&["gen-data", "--scenes", "0", "--out", p(&ws.path("x.bin"))]);
    assert_eq!(r.code, 1);
    assert!(r.err.contains("scenes"), "{}", r.err);
    assert!(!ws.path("x.bin").exists());
}

#[test]
fn train_then_eval_pipeline() {
    let ws = Workspace::new();
    let train = ws.gen("train.bin", 1, 2);
    let test = ws.gen("test.bin", 2, 2);
    let model = ws.train("m", &train, &[]);
    let log = std::fs::read_to_string(ws.path("m.csv")).unwrap();
    assert!(log.starts_with("epoch,total,l_av,l_v,l_a,l_con\n"), "{log}");
    assert_eq!(log.lines().count(), 2);

    let (csv, metrics) = ws.eval("e", &model, &test, &[]);
    assert!(csv.starts_with("scene_id,speaker_idx,frame_idx,score,p_voice,label"));
    let records = read_predictions(&ws.path("e.pred.csv")).unwrap();
    let report = d2stream::eval::MetricsReport::parse(&metrics).unwrap();
    assert_eq!(report.get("cells").unwrap(), records.len().to_string());
    let ap: f64 = report.get("ap").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&ap));
    assert!(report.get("f1.speaker0").is_some());
    assert!(report.get("fp_distractor_gated").is_some());
}

#[test]
fn checkpoint_reproduces_scores_and_training_is_repeatable() {
    let ws = Workspace::new();
    let train = ws.gen("train.bin", 3, 2);
    let m1 = ws.train("m1", &train, &[]);
    let m2 = ws.train("m2", &train, &[]);
    assert_eq!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap());
    assert_eq!(
        std::fs::read(ws.path("m1.csv")).unwrap(),
        std::fs::read(ws.path("m2.csv")).unwrap()
    );

    let (a, ma) = ws.eval("a", &m1, &train, &["--gate", "off"]);
    let (b, mb) = ws.eval("b", &m1, &train, &["--gate", "off"]);
    assert_eq!(a, b);
    assert_eq!(ma, mb);

    // reloading gives the same scores as the in-memory model
    let (detector, _) = d2stream::checkpoint::load_checkpoint(&m1).unwrap();
    let scenes = d2stream::data::read_corpus(&train).unwrap();
    let direct = d2stream::eval::predict(&detector, None, None, &scenes).unwrap();
    let from_file = read_predictions(&ws.path("a.pred.csv")).unwrap();
    for (x, y) in direct.iter().zip(&from_file) {
        assert_eq!(x.key(), y.key());
        assert!((x.score - y.score).abs() <= 1e-9);
    }
}

#[test]
fn zero_gamma_gate_matches_gate_off() {
    let ws = Workspace::new();
    let train = ws.gen("train.bin", 4, 2);
    let model = ws.train("m", &train, &[]);
    let (off, _) = ws.eval("off", &model, &train, &["--gate", "off"]);
    let (on, _) = ws.eval(
        "on",
        &model,
        &train,
        &["--gate", "on", "--set", "gate.gamma=0"],
    );
    assert_eq!(off, on);
}

#[test]
fn corpus_and_model_mismatch_is_an_error() {
    let ws = Workspace::new();
    let train = ws.gen("train.bin", 5, 2);
    let model = ws.train("m", &train, &[]);
    let other = ws.path("other.bin");
    ok(&[
        "gen-data",
        "--scenes",
        "1",
        "--out",
        p(&other),
        "--set",
        "data.mel_bins=7",
    ]);
    let r = run(&[
        "eval",
        "--model",
        p(&model),
        "--corpus",
        p(&other),
        "--out",
        p(&ws.path("x.csv")),
    ]);
    assert_ne!(r.code, 0);
    assert!(
        r.err.contains("13 mel bins") && r.err.contains("and 7"),
        "{}",
        r.err
    );
}

#[test]
fn exit_codes() {
    let ws = Workspace::new();
    assert_eq!(run(&["frobnicate"]).code, 1);
    assert_eq!(
        run(&[
            "gen-data",
            "--set",
            "no.such.key=1",
            "--out",
            p(&ws.path("x"))
        ])
        .code,
        1
    );
    assert_eq!(
        run(&[
            "gen-data",
            "--set",
            "data.speakers=99",
            "--out",
            p(&ws.path("x"))
        ])
        .code,
        1
    );
    assert_eq!(
        run(&["train", "--corpus", p(&ws.path("missing.bin"))]).code,
        2
    );
    let junk = ws.path("junk.bin");
    std::fs::write(&junk, b"not a corpus").unwrap();
    let r = run(&["train", "--corpus", p(&junk), "--model", p(&ws.path("m"))]);
    assert_eq!(r.code, 2);
    assert!(r.err.contains("byte 0"), "{}", r.err);
    assert_eq!(run(&["--help"]).code, 0);
}

#[test]
fn gradcheck_passes_and_names_corrupted_module() {
    // seed 1 sits inside the command's tolerance
    let a = ok(&["gradcheck", "--seed", "1"]);
    let b = ok(&["gradcheck", "--seed", "1"]);
    assert_eq!(a.out, b.out);
    assert!(a.out.contains("max relative error"));

    let bad = run(&["gradcheck", "--seed", "1", "--corrupt", "dual.round1"]);
    assert_eq!(bad.code, 3);
    assert!(bad.err.contains("module dual.round1"), "{}", bad.err);
}

#[test]
fn config_dump_round_trips() {
    let mut cfg = RunConfig::default();
    cfg.set("gate.gamma", "0.25").unwrap();
    cfg.set("train.epochs", "7").unwrap();
    cfg.set("optim.cosine", "off").unwrap();
    let back = RunConfig::from_text(&cfg.to_text()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.to_text(), cfg.to_text());
    assert!(RunConfig::from_text("model.warp_drive = 3\n").is_err());

    let ws = Workspace::new();
    let path = ws.path("run.cfg");
    std::fs::write(&path, cfg.to_text()).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap(), cfg);

    // the header of a training log is the effective config and reloads as such
    let train = ws.gen("t.bin", 6, 1);
    let r = ok(&[
        "train",
        "--config",
        p(&path),
        "--corpus",
        p(&train),
        "--model",
        p(&ws.path("m")),
        "--log",
        p(&ws.path("l.csv")),
        "--set",
        "train.epochs=1",
        "--set",
        "train.gate_epochs=1",
    ]);
    let dumped: String = r
        .out
        .lines()
        .filter_map(|l| l.strip_prefix("# "))
        .filter(|l| l.contains('='))
        .map(|l| format!("{l}\n"))
        .collect();
    let mut expected = cfg.clone();
    expected.set("train.epochs", "1").unwrap();
    expected.set("train.gate_epochs", "1").unwrap();
    assert_eq!(RunConfig::from_text(&dumped).unwrap(), expected);
}

#[test]
fn default_training_halves_the_fused_loss() {
    let ws = Workspace::new();
    let train = ws.gen("train.bin", 7, 20);
    let log = ws.path("l.csv");
    ok(&[
        "train",
        "--corpus",
        p(&train),
        "--model",
        p(&ws.path("m")),
        "--log",
        p(&log),
        "--set",
        "train.gate_epochs=1",
    ]);
    let text = std::fs::read_to_string(&log).unwrap();
    let l_av: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(l_av.len(), RunConfig::default().train.epochs);
    assert!(l_av.last().unwrap() <= &(0.5 * l_av[0]), "{l_av:?}");
}
