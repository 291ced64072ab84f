use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value as Json;

const TINY: &str = r#"{
  "seed": 7,
  "dims": {"z": [2, 3], "h": 6, "hidden": 8},
  "attribute_hidden": 4,
  "predictor_hidden": 8,
  "optimizer": {
    "attributes": {"lr": 0.01, "epochs": 100, "batch_size": 256},
    "ladder": {"lr": 0.001, "epochs": 2, "batch_size": 32},
    "predictors": {"lr": 0.001, "epochs": 2, "batch_size": 32},
    "finetune": {"lr": 0.0001, "epochs": 2, "batch_size": 32}
  },
  "codebook": {"latent": 8, "entries": 8, "vector": 4, "iterations": 5, "jitter": 1e-8}
}"#;

fn cfscm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfscm"))
        .args(args)
        .env_remove("CFSCM_SEED")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let o = cfscm(args);
    assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout_json(o: &Output) -> Json {
    serde_json::from_slice(&o.stdout).unwrap()
}

/// Independent CFT1 encoder for golden files.
fn cft1(dims: &[u64], data: &[f64]) -> Vec<u8> {
    let mut b = b"CFT1".to_vec();
    b.extend([1u8, dims.len() as u8, 0, 0]);
    for d in dims {
        b.extend(d.to_le_bytes());
    }
    for v in data {
        b.extend(v.to_le_bytes());
    }
    b
}

fn read_cft1(path: &Path) -> (Vec<u64>, Vec<f64>) {
    let b = fs::read(path).unwrap();
    assert_eq!(&b[..4], b"CFT1");
    let rank = b[5] as usize;
    let dims: Vec<u64> = (0..rank)
        .map(|k| u64::from_le_bytes(b[8 + 8 * k..16 + 8 * k].try_into().unwrap()))
        .collect();
    let start = 8 + 8 * rank;
    let data = b[start..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    (dims, data)
}

struct Fixture {
    root: PathBuf,
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

/// A dataset and one trained model of each kind, shared by the tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = tempfile::tempdir().unwrap().keep();
        fs::write(root.join("tiny.json"), TINY).unwrap();
        let cfg = root.join("tiny.json");
        ok(&["synth", "--out", p(&root.join("data")), "--n", "160", "--seed", "3"]);
        for v in ["mediator", "exogenous", "vqglm"] {
            ok(&[
                "train",
                "--config",
                p(&cfg),
                "--data",
                p(&root.join("data")),
                "--out",
                p(&root.join(v)),
                "--variant",
                v,
            ]);
        }
        Fixture { root }
    })
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_deterministic_and_checks_usage() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["synth", "--out", p(&a), "--n", "12", "--seed", "5"]);
    ok(&["synth", "--out", p(&b), "--n", "12", "--seed", "5"]);
    assert_eq!(tree(&a), tree(&b));
    assert_eq!(code(&cfscm(&["synth", "--n", "3"])), 2);
    assert_eq!(code(&cfscm(&["synth", "--out", p(&a), "--n", "x"])), 2);

    let empty = dir.path().join("empty");
    ok(&["synth", "--out", p(&empty), "--n", "0"]);
    let (dims, data) = read_cft1(&empty.join("images.cft"));
    assert_eq!(dims[0], 0);
    assert!(data.is_empty());
    assert_eq!(fs::read_to_string(empty.join("attributes.csv")).unwrap().lines().count(), 1);

    // Seed precedence: flag over environment over default.
    let env = dir.path().join("env");
    let o = Command::new(env!("CARGO_BIN_EXE_cfscm"))
        .args(["synth", "--out", p(&env), "--n", "12"])
        .env("CFSCM_SEED", "5")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(tree(&env), tree(&a));
    let o = Command::new(env!("CARGO_BIN_EXE_cfscm"))
        .args(["synth", "--out", p(&env), "--n", "12", "--seed", "6"])
        .env("CFSCM_SEED", "5")
        .output()
        .unwrap();
    assert_eq!(stdout_json(&o)["seed"], 6);
    let o = Command::new(env!("CARGO_BIN_EXE_cfscm"))
        .args(["synth", "--out", p(&env), "--n", "1"])
        .env("CFSCM_SEED", "abc")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn train_is_reproducible_and_rejects_bad_input() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let again = dir.path().join("again");
    ok(&[
        "train",
        "--config",
        p(&f.path("tiny.json")),
        "--data",
        p(&f.path("data")),
        "--out",
        p(&again),
        "--variant",
        "mediator",
    ]);
    assert_eq!(tree(&again), tree(&f.path("mediator")));

    let train = |cfg: &Path, data: &Path, extra: &[&str]| {
        let out = dir.path().join("x");
        let mut args = vec!["train", "--config", p(cfg), "--data", p(data), "--out", p(&out)];
        args.extend(extra);
        code(&cfscm(&args))
    };
    assert_eq!(train(&f.path("tiny.json"), &f.path("data"), &["--variant", "flow"]), 2);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"seed": 1, "learning_rate": 2}"#).unwrap();
    assert_eq!(train(&bad, &f.path("data"), &[]), 2);
    fs::write(&bad, "{").unwrap();
    assert_eq!(train(&bad, &f.path("data"), &[]), 2);
    assert_eq!(train(&f.path("tiny.json"), &dir.path().join("nowhere"), &[]), 3);
    assert_eq!(code(&cfscm(&["train", "--out", p(&dir.path().join("y"))])), 2);
}

#[test]
fn finetune_records_the_multiplier_trace() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ft");
    let o = ok(&["finetune", "--model", p(&f.path("mediator")), "--out", p(&out)]);
    let summary = stdout_json(&o);
    assert!(summary["lambda"].as_f64().unwrap() >= 0.0);
    let trace = fs::read_to_string(out.join("finetune_trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next().unwrap(), "epoch,L_CT,F_FE,lambda");
    assert_eq!(lines.count(), 2);
    let manifest: Json = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["finetune"].is_object());

    let out2 = dir.path().join("ft2");
    ok(&["finetune", "--model", p(&f.path("mediator")), "--out", p(&out2)]);
    assert_eq!(tree(&out), tree(&out2));

    let o = cfscm(&["finetune", "--model", p(&f.path("vqglm")), "--out", p(&dir.path().join("x"))]);
    assert_eq!(code(&o), 2);
    let o = cfscm(&["finetune", "--model", p(&dir.path().join("none")), "--out", p(&dir.path().join("x"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn counterfactual_command() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let model = f.path("mediator");
    let data = f.path("data");
    let cf = |out: &str, doo: &str, extra: &[&str]| {
        let out = dir.path().join(out);
        let mut args = vec!["counterfactual", "--model", p(&model), "--data", p(&data), "--obs", "3"];
        args.extend(["--do", doo, "--out"]);
        args.push(p(&out));
        args.extend(extra);
        (cfscm(&args), out)
    };

    let pgm = dir.path().join("pgm");
    let (o, out) = cf("t2", "t=2.0", &["--pgm", p(&pgm)]);
    assert_eq!(code(&o), 0);
    let s = stdout_json(&o);
    assert_eq!(s["counterfactual_parents"]["t"], 2.0);
    assert_eq!(s["null_intervention"], false);
    let (dims, _) = read_cft1(&out.join("counterfactual.cft"));
    assert_eq!(dims, vec![16, 16]);
    let img = fs::read(pgm.join("counterfactual.pgm")).unwrap();
    assert!(img.starts_with(b"P5\n16 16\n255\n"));

    let (o, out) = cf("null", "", &["--pi", "0"]);
    assert_eq!(code(&o), 0);
    let s = stdout_json(&o);
    assert_eq!(s["null_intervention"], true);
    assert!(s["change_max"].as_f64().unwrap() <= 1e-6);
    assert_eq!(fs::read(out.join("summary.json")).unwrap(), {
        let (o2, out2) = cf("null2", "", &["--pi", "0"]);
        assert_eq!(code(&o2), 0);
        fs::read(out2.join("summary.json")).unwrap()
    });

    let (o, _) = cf("q", "q=1", &[]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains('q'));
    assert_eq!(code(&cf("bad", "t=", &[]).0), 2);
    assert_eq!(code(&cf("bad", "t", &[]).0), 2);
    assert_eq!(code(&cf("bad", "y=square", &[]).0), 2);
    assert_eq!(code(&cf("pi", "t=2", &["--pi", "1.5"]).0), 2);

    let (o, _) = {
        let out = dir.path().join("id");
        let args = ["counterfactual", "--model", p(&model), "--data", p(&data), "--obs", "999", "--do", "t=2", "--out", p(&out)];
        (cfscm(&args), out)
    };
    assert_eq!(code(&o), 3);

    // An observation given as a JSON file.
    let obs = dir.path().join("obs.json");
    let image: Vec<f64> = (0..256).map(|k| (k % 7) as f64 / 7.0).collect();
    fs::write(&obs, serde_json::json!({"image": image, "y": "ring", "t": 1.2, "i": 90.0}).to_string()).unwrap();
    let out = dir.path().join("file");
    let args = ["counterfactual", "--model", p(&model), "--obs", p(&obs), "--do", "y=cross", "--out", p(&out)];
    let s = stdout_json(&ok(&args));
    assert_eq!(s["counterfactual_parents"]["y"], "cross");
    assert_eq!(s["obs"], Json::Null);
}

#[test]
fn effects_command() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let run = |model: &str, doo: &str, out: &str, extra: &[&str]| {
        let out = dir.path().join(out);
        let mut args = vec!["effects", "--model"];
        let m = f.path(model);
        let d = f.path("data");
        args.extend([p(&m), "--data", p(&d), "--obs", "5", "--do", doo, "--out", p(&out)]);
        args.extend(extra);
        (cfscm(&args), out)
    };
    let (o, out) = run("mediator", "", "null", &["--pi", "0"]);
    assert_eq!(code(&o), 0);
    for name in ["de", "ie", "te"] {
        let (_, v) = read_cft1(&out.join(format!("{name}.cft")));
        assert!(v.iter().all(|x| *x == 0.0), "{name}");
    }
    let (o, out) = run("mediator", "t=2.5", "t", &[]);
    assert_eq!(code(&o), 0);
    let norms: Json = serde_json::from_slice(&fs::read(out.join("norms.json")).unwrap()).unwrap();
    for k in ["de", "ie", "te"] {
        assert!(norms[k].is_f64(), "{k}");
    }
    assert!(norms["te"].as_f64().unwrap() > 0.0);
    assert!(norms["telescoping_error"].as_f64().unwrap() <= 1e-9);

    assert_eq!(code(&run("exogenous", "t=2.5", "x", &[]).0), 2);
    assert_eq!(code(&run("vqglm", "t=2.5", "x", &[]).0), 2);
}

#[test]
fn evaluate_reports_are_stable() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &str| {
        let out = dir.path().join(out);
        ok(&[
            "evaluate",
            "--models",
            p(&f.path("mediator")),
            p(&f.path("vqglm")),
            "--dataset",
            p(&f.path("data")),
            "--suite",
            "soundness",
            "--n",
            "40",
            "--pgm",
            "3",
            "--out",
            p(&out),
        ]);
        out
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(tree(&a), tree(&b));
    let report: Json = serde_json::from_slice(&fs::read(a.join("report.json")).unwrap()).unwrap();
    let adapters = report["adapters"].as_array().unwrap();
    let names: Vec<&str> = adapters.iter().map(|r| r["adapter"].as_str().unwrap()).collect();
    assert_eq!(names, ["oracle", "ignore", "mediator", "vqglm"]);
    for (m, v) in adapters[0]["composition_l1"].as_object().unwrap() {
        assert_eq!(v.as_f64().unwrap(), 0.0, "cycles {m}");
    }
    for r in adapters {
        let keys: Vec<&String> = r.as_object().unwrap().keys().collect();
        assert_eq!(
            keys,
            ["adapter", "cohens_d", "composition_l1", "effectiveness", "oracle_l1", "reversibility_l1"]
        );
    }
    assert!(a.join("grids/mediator_t.pgm").exists());
    let csv = fs::read_to_string(a.join("report.csv")).unwrap();
    assert!(csv.starts_with("adapter,metric,key,value\n"));

    let o = cfscm(&["evaluate", "--models", p(&f.path("mediator")), "--dataset", p(&f.path("data")), "--suite", "other", "--out", p(&dir.path().join("x"))]);
    assert_eq!(code(&o), 2);
    let o = cfscm(&["evaluate", "--models", p(&f.path("mediator")), "--dataset", p(&dir.path().join("none")), "--out", p(&dir.path().join("x"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn glm_hand_example_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let z = dir.path().join("z.cft");
    fs::write(&z, cft1(&[2, 1], &[2.0, 4.0])).unwrap();
    let pcsv = dir.path().join("p.csv");
    fs::write(&pcsv, "one,x\n1,0\n1,1\n").unwrap();
    let out = dir.path().join("fit");
    ok(&["glm", "fit", "--z", p(&z), "--p", p(&pcsv), "--design", "given", "--out", p(&out)]);
    // Solving [[2,1],[1,1]]·B = [[6],[4]] by hand gives B = [[2],[2]].
    assert_eq!(fs::read(out.join("B.cft")).unwrap(), cft1(&[2, 1], &[2.0, 2.0]));

    let u = dir.path().join("u.cft");
    ok(&["glm", "abduct", "--params", p(&out), "--z", p(&z), "--p", p(&pcsv), "--out", p(&u)]);
    assert_eq!(fs::read(&u).unwrap(), cft1(&[2, 1], &[0.0, 0.0]));
    let pcf = dir.path().join("pcf.csv");
    fs::write(&pcf, "one,x\n1,2\n1,-1\n").unwrap();
    let zcf = dir.path().join("zcf.cft");
    ok(&["glm", "counterfactual", "--params", p(&out), "--z", p(&z), "--p", p(&pcsv), "--p-cf", p(&pcf), "--out", p(&zcf)]);
    assert_eq!(fs::read(&zcf).unwrap(), cft1(&[2, 1], &[6.0, 0.0]));
}

#[test]
fn glm_steps_compose_and_singular_designs_fail() {
    let dir = tempfile::tempdir().unwrap();
    let (n, m, k) = (30, 3, 5);
    let mut state = 0x2545_f491_4f6c_dd1du64;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
    };
    let zv: Vec<f64> = (0..n * k).map(|_| next()).collect();
    let z = dir.path().join("z.cft");
    fs::write(&z, cft1(&[n as u64, k as u64], &zv)).unwrap();
    let mut csv = String::from("a,b,c\n");
    for _ in 0..n {
        let row: Vec<String> = (0..m).map(|_| format!("{:?}", 10.0 * next())).collect();
        csv += &(row.join(",") + "\n");
    }
    let pcsv = dir.path().join("p.csv");
    fs::write(&pcsv, csv).unwrap();
    for design in ["standardized", "raw"] {
        let params = dir.path().join(design);
        ok(&["glm", "fit", "--z", p(&z), "--p", p(&pcsv), "--design", design, "--out", p(&params)]);
        let u = dir.path().join("u.cft");
        let zh = dir.path().join("zh.cft");
        ok(&["glm", "abduct", "--params", p(&params), "--z", p(&z), "--p", p(&pcsv), "--out", p(&u)]);
        ok(&["glm", "predict", "--params", p(&params), "--u", p(&u), "--p", p(&pcsv), "--out", p(&zh)]);
        let (dims, back) = read_cft1(&zh);
        assert_eq!(dims, vec![n as u64, k as u64]);
        let err = back.iter().zip(&zv).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-12, "{design}: {err}");
    }

    let dup = dir.path().join("dup.csv");
    fs::write(&dup, "a,b\n1,1\n2,2\n3,3\n").unwrap();
    let z3 = dir.path().join("z3.cft");
    fs::write(&z3, cft1(&[3, 1], &[1.0, 2.0, 3.0])).unwrap();
    let fit = |extra: &[&str]| {
        let out = dir.path().join("s");
        let mut args = vec!["glm", "fit", "--z", p(&z3), "--p", p(&dup), "--design", "given", "--out", p(&out)];
        args.extend(extra);
        cfscm(&args)
    };
    let o = fit(&[]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("singular"));
    assert_eq!(code(&fit(&["--jitter"])), 0);
    assert_eq!(code(&fit(&["--jitter", "1e-3"])), 0);

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "a\nx\n").unwrap();
    let o = cfscm(&["glm", "fit", "--z", p(&z3), "--p", p(&bad), "--out", p(&dir.path().join("b"))]);
    assert_eq!(code(&o), 3);
    let o = cfscm(&["glm", "fit", "--z", p(&z), "--p", p(&dup), "--out", p(&dir.path().join("b"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn threads_flag_does_not_change_results() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let run = |threads: &str, out: &str| {
        let out = dir.path().join(out);
        ok(&[
            "--threads",
            threads,
            "counterfactual",
            "--model",
            p(&f.path("exogenous")),
            "--data",
            p(&f.path("data")),
            "--obs",
            "1",
            "--do",
            "i=120",
            "--out",
            p(&out),
        ]);
        tree(&out)
    };
    assert_eq!(run("1", "one"), run("4", "four"));
    assert_eq!(code(&cfscm(&["--threads", "0", "synth", "--out", p(&dir.path().join("z"))])), 2);
}
