use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rsknet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsknet")).args(args).output().expect("spawn rsknet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn separated_scores_give_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.txt");
    fs::write(&scores, "a b 0.9 target\na c 0.8 target\nb c -0.1 nontarget\nc d -0.4 nontarget\n").unwrap();
    let o = rsknet(&["eval", "--scores", p(&scores)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("EER      0.0000%"), "{out}");
    assert!(out.contains("MinDCF   0.0000"), "{out}");
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    assert_eq!(rsknet(&["eval"]).status.code(), Some(1));
    assert_eq!(rsknet(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(rsknet(&["param-report", "--set", "model.stage_widths=1,2"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.ini");
    fs::write(&cfg, "[train]\nlearning_speed = 3\n").unwrap();
    let o = rsknet(&["--config", p(&cfg), "param-report"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_speed"));
}

#[test]
fn missing_input_file_is_an_io_error() {
    assert_eq!(rsknet(&["eval", "--scores", "/nonexistent/scores.txt"]).status.code(), Some(2));
}

#[test]
fn param_report_counts() {
    let out = stdout(&rsknet(&["param-report"]));
    assert!(out.contains("13884960"), "{out}");
    let csv = stdout(&rsknet(&["param-report", "--model", "resnet34_sp", "--csv"]));
    assert!(csv.starts_with("path,shape,count,kind\n"));
    assert!(csv.lines().any(|l| l.starts_with("head.weight,256x2560,")), "{csv}");
    let table = stdout(&rsknet(&["param-report", "--table"]));
    assert!(table.contains("rsknet_mtsp_lite"));
}

#[test]
fn gradcheck_passes() {
    let o = rsknet(&["gradcheck"]);
    assert!(o.status.success());
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus");
    let run = d.join("run");
    let o = rsknet(&["gen-toy", "--out", p(&corpus), "--speakers", "3", "--utts", "4", "--heldout", "2", "--trials", "12"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let cfg = d.join("tiny.ini");
    fs::write(
        &cfg,
        format!(
            "[model]\nstage_depths = 1,1,1,1\nstage_widths = 2,4,8,16\nembed_dim = 16\n\n\
             [train]\nbatch_size = 4\ncrop_frames = 32\nmax_epochs = 2\n\n\
             [paths]\nmanifest = {}\nout = {}\n",
            corpus.join("train.lst").display(),
            run.display()
        ),
    )
    .unwrap();
    let c = p(&cfg);
    let o = rsknet(&["--config", c, "train"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.join("checkpoints/epoch-002.ckpt").exists());
    let history = fs::read_to_string(run.join("loss_history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);

    let embs = d.join("heldout.emb");
    let o = rsknet(&[
        "extract",
        "--manifest",
        p(&corpus.join("heldout.lst")),
        "--checkpoint",
        p(&run.join("final.ckpt")),
        "--out",
        p(&embs),
        "--workers",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let scores = d.join("scores.txt");
    let trials = corpus.join("trials.txt");
    let o = rsknet(&[
        "score",
        "--trials",
        p(&trials),
        "--embeddings",
        p(&embs),
        "--mean",
        p(&run.join("mean.txt")),
        "--out",
        p(&scores),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&scores).unwrap().lines().count(), 12);

    let o = rsknet(&["eval", "--scores", p(&scores), "--trials", p(&trials)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("trials   12"));
    let o = rsknet(&["det", "--scores", p(&scores), "--trials", p(&trials)]);
    assert!(o.status.success());
    assert!(stdout(&o).lines().count() > 2);

    let o = rsknet(&["--config", c, "train", "--resume", p(&run.join("checkpoints/epoch-001.ckpt")), "--out", p(&d.join("resumed"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(d.join("resumed/final.ckpt")).unwrap(), fs::read(run.join("final.ckpt")).unwrap());
}
