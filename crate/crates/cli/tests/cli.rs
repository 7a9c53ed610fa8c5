use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TOY: &str = "\
[backbone]
image_size = 16
patch_size = 4
embed_dim = 8
heads = 2
n_gpsa_blocks = 1
n_sa_blocks = 1

[optimizer]
seed = 7
steps = 5
batch_size = 12

[data]
n_domains = 3
n_real = 10
n_fake = 10
";

fn fas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fas")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_data_writes_png_tree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "toy.toml", TOY);
    let out = dir.path().join("faces");
    let res = fas(&["generate-data", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert!(stdout(&res).contains("d2: 10 real, 10 fake"));
    for d in ["d0", "d1", "d2"] {
        for class in ["real", "fake"] {
            assert_eq!(fs::read_dir(out.join(d).join(class)).unwrap().count(), 10);
        }
    }
}

#[test]
fn train_then_eval_with_each_threshold_rule() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "toy.toml", TOY);
    let ckpt = dir.path().join("m.ckpt");
    let record = dir.path().join("run.json");
    let res = fas(&[
        "train",
        "--config",
        s(&cfg),
        "--sources",
        "d1,d2",
        "--out",
        s(&ckpt),
        "--record",
        s(&record),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(&record).unwrap()).unwrap();
    assert_eq!(run["losses"].as_array().unwrap().len(), 5);
    assert_eq!(run["config"], TOY);
    assert_eq!(run["training_reads"][0], 0);

    let scores = dir.path().join("scores.csv");
    let res = fas(&["eval", "--ckpt", s(&ckpt), "--target", "d0", "--scores", s(&scores)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let report: serde_json::Value = serde_json::from_str(&stdout(&res)).unwrap();
    for key in ["auc", "hter", "eer", "tau", "far", "frr", "n_real", "n_fake"] {
        assert!(report.get(key).is_some(), "{key}");
    }
    assert_eq!(report["threshold"], "eer-target");
    assert_eq!(
        (report["n_real"].as_u64(), report["n_fake"].as_u64()),
        (Some(10), Some(10))
    );
    let csv = fs::read_to_string(&scores).unwrap();
    assert!(csv.starts_with("score,label,domain\n"));
    assert_eq!(csv.lines().count(), 21);

    for rule in ["fixed:0.5", "eer-dev"] {
        let res = fas(&["eval", "--ckpt", s(&ckpt), "--target", "d0", "--threshold", rule]);
        assert_eq!(code(&res), 0, "{rule}: {}", stderr(&res));
        let report: serde_json::Value = serde_json::from_str(&stdout(&res)).unwrap();
        assert_eq!(report["threshold"], rule);
    }
    let res = fas(&["eval", "--ckpt", s(&ckpt), "--target", "d0", "--threshold", "median"]);
    assert_eq!(code(&res), 2);
    let res = fas(&["eval", "--ckpt", s(&ckpt), "--target", "d9"]);
    assert_eq!(code(&res), 2, "{}", stderr(&res));
}

#[test]
fn eval_reads_an_ingested_tree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "toy.toml", TOY);
    let faces = dir.path().join("faces");
    let ckpt = dir.path().join("m.ckpt");
    assert_eq!(
        code(&fas(&["generate-data", "--config", s(&cfg), "--out", s(&faces)])),
        0
    );
    assert_eq!(
        code(&fas(&[
            "train",
            "--config",
            s(&cfg),
            "--sources",
            "d0,d1",
            "--out",
            s(&ckpt)
        ])),
        0
    );
    let res = fas(&["eval", "--ckpt", s(&ckpt), "--target", "d2", "--data", s(&faces)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let report: serde_json::Value = serde_json::from_str(&stdout(&res)).unwrap();
    assert_eq!(report["n_real"], 10);
}

#[test]
fn cross_eval_report_and_matching_train_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "toy.toml", TOY);
    let report_path = dir.path().join("report.json");
    let ckpts = dir.path().join("ckpts");
    let res = fas(&[
        "cross-eval",
        "--config",
        s(&cfg),
        "--out",
        s(&report_path),
        "--checkpoints",
        s(&ckpts),
        "--quiet",
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let table = stdout(&res);
    assert!(table.contains("d1,d2 -> d0") && table.contains("mean ± std"), "{table}");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["folds"].as_array().unwrap().len(), 3);
    assert_eq!(report["config"], TOY);

    let single = dir.path().join("d0.ckpt");
    let res = fas(&["train", "--config", s(&cfg), "--sources", "d1,d2", "--out", s(&single)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert_eq!(
        fs::read(&single).unwrap(),
        fs::read(ckpts.join("fold_d0.ckpt")).unwrap()
    );
}

#[test]
fn cross_eval_over_seeds_and_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "toy.toml", TOY);
    let out = dir.path().join("seeds.json");
    let res = fas(&[
        "cross-eval",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--seeds",
        "1,2",
        "--quiet",
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let reports: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let seeds: Vec<u64> = reports
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["seed"].as_u64().unwrap())
        .collect();
    assert_eq!(seeds, vec![1, 2]);

    let out = dir.path().join("ablation.json");
    let res = fas(&[
        "cross-eval",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--ablation",
        "--quiet",
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert!(stdout(&res).contains("AUC no-adv"));
    let runs: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(runs["summary"]["rows"].as_array().unwrap().len(), 1);
    assert_eq!(runs["without"][0]["folds"][0]["record"]["losses"][0]["lambda_grl"], 0.0);
}

#[test]
fn grad_check_passes_on_toy_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "toy.toml", TOY);
    let res = fas(&["grad-check", "--config", s(&cfg), "--max-coords", "300"]);
    assert_eq!(code(&res), 0, "{}{}", stdout(&res), stderr(&res));
    assert!(stdout(&res).contains("checked 300 of"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write_config(dir.path(), "unknown.toml", &format!("{TOY}bogus = 1\n"));
    let res = fas(&["cross-eval", "--config", s(&unknown), "--out", "x.json"]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("bogus"), "{}", stderr(&res));

    let no_seed = write_config(dir.path(), "noseed.toml", "[heads]\nk = 4\n");
    assert_eq!(code(&fas(&["grad-check", "--config", s(&no_seed)])), 2);
    assert_eq!(code(&fas(&["grad-check", "--config", "/nonexistent/c.toml"])), 2);
    assert_eq!(code(&fas(&["train", "--config", s(&unknown)])), 2);

    let missing = write_config(
        dir.path(),
        "missing.toml",
        &TOY.replace("[data]", "[data]\ningest = \"/nonexistent/faces\""),
    );
    let res = fas(&["train", "--config", s(&missing), "--sources", "a,b", "--out", "m.ckpt"]);
    assert_eq!(code(&res), 3, "{}", stderr(&res));
    assert_eq!(
        code(&fas(&["eval", "--ckpt", "/nonexistent/m.ckpt", "--target", "d0"])),
        3
    );

    let exploding = write_config(
        dir.path(),
        "lr.toml",
        &TOY.replace("steps = 5", "steps = 20\nlr = 1e30"),
    );
    let ckpt = dir.path().join("m.ckpt");
    let res = fas(&[
        "train",
        "--config",
        s(&exploding),
        "--sources",
        "d0,d1",
        "--out",
        s(&ckpt),
    ]);
    assert_eq!(code(&res), 4, "{}", stderr(&res));
    assert!(stderr(&res).contains("step"));
}
