use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dislocgas(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dislocgas"));
    cmd.args(args).env_remove("DISLOCGAS_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn malformed_config_exits_2_without_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let out_s = out.to_string_lossy().into_owned();
    for text in
        ["[graph\nextent = 1", "[graph]\nextnt = [1, 1, 0]\n", "[elastic]\nmu = -1.0\n", "[grid]\nlength = 2.0\n"]
    {
        let cfg = write_config(tmp.path(), text);
        let o = dislocgas(&["energy", "--config", &cfg, "--out", &out_s], &[]);
        assert_eq!(o.status.code(), Some(2), "{text}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!out.exists(), "{text}: artifacts written");
        assert!(!o.stderr.is_empty());
    }
    let o = dislocgas(&["energy", "--config", "/nonexistent.toml", "--out", &out_s], &[]);
    assert_eq!(o.status.code(), Some(2));
    let o = dislocgas(&["energy", "--out", &out_s], &[]);
    assert_eq!(o.status.code(), Some(2));
    let o = dislocgas(&["no-such-command"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn energy_run_writes_tables_log_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let text = "seed = 9\n[energy]\ncurrents = [[[1, 0, 0]], [[2, 0, 0]]]\n";
    let cfg = write_config(tmp.path(), text);
    let out = tmp.path().join("run");
    let o = dislocgas(&["energy", "--config", &cfg, "--out", &out.to_string_lossy()], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "current,norm1,energy,integrability_defect,constraint_defect,orthogonality_defect"
    );
    let energies: Vec<f64> = lines.map(|l| l.rsplit(',').nth(3).unwrap().parse().unwrap()).collect();
    assert_eq!(energies.len(), 2);
    assert!((energies[1] - 4.0 * energies[0]).abs() <= 1e-10 * energies[1]);
    let jsonl = fs::read_to_string(out.join("results.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 2);
    assert!(jsonl.lines().all(|l| serde_json::from_str::<Value>(l).unwrap()["table"] == "energy"));
    assert!(fs::read_to_string(out.join("run.log")).unwrap().contains("minimized"));
    let m = manifest(&out);
    assert_eq!(m["schema_version"], 1);
    assert_eq!(m["subcommand"], "energy");
    assert_eq!(m["seed"], 9);
    assert_eq!(m["config_text"], text);
    assert_eq!(m["verdict"], "pass");
    assert_eq!(m["exit_code"], 0);
    assert_eq!(m["config"]["energy"]["currents"][1][0][0], 2);
    assert_eq!(m["table_sha256"]["results.csv"].as_str().unwrap().len(), 64);
}

#[test]
fn seed_and_threads_follow_flag_env_config_order() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "seed = 4\nthreads = 3\n");
    let run = |tag: &str, extra: &[&str], env: &[(&str, &str)]| {
        let out = tmp.path().join(tag);
        let mut args = vec!["gram", "--config", &cfg, "--out"];
        let out_s = out.to_string_lossy().into_owned();
        args.push(&out_s);
        args.extend_from_slice(extra);
        let o = dislocgas(&args, env);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        manifest(&out)
    };
    let m = run("config", &[], &[]);
    assert_eq!((m["seed"].as_u64(), m["threads"].as_u64()), (Some(4), Some(3)));
    let m = run("env", &[], &[("DISLOCGAS_THREADS", "2")]);
    assert_eq!(m["threads"], 2);
    let m = run("flag", &["--threads", "1", "--seed", "8"], &[("DISLOCGAS_THREADS", "2")]);
    assert_eq!((m["seed"].as_u64(), m["threads"].as_u64()), (Some(8), Some(1)));
}

#[test]
fn output_directory_defaults_to_config_then_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("out = {:?}\n", tmp.path().join("from-config").to_string_lossy()));
    let o = dislocgas(&["gram", "--config", &cfg], &[]);
    assert_eq!(o.status.code(), Some(0));
    assert!(tmp.path().join("from-config/manifest.json").exists());
    let cfg = write_config(tmp.path(), "");
    let o = Command::new(env!("CARGO_BIN_EXE_dislocgas"))
        .args(["gram", "--config", &cfg])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(tmp.path().join("runs/gram/results.csv").exists());
    assert!(tmp.path().join("runs/gram/eigenvalues.csv").exists());
}

#[test]
fn mcmc_sample_is_reproducible_and_seed_sensitive() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "[gibbs]\nmode = \"mcmc\"\nbetas = [1.0]\nsteps = 100_000\nburn_in = 1000\nbatches = 10\n",
    );
    let run = |tag: &str, seed: &str| {
        let out = tmp.path().join(tag);
        let o = dislocgas(&["sample", "--config", &cfg, "--out", &out.to_string_lossy(), "--seed", seed], &[]);
        assert!(matches!(o.status.code(), Some(0 | 1)), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(out.join("results.csv")).unwrap()
    };
    assert_eq!(run("a", "3"), run("b", "3"));
    assert_ne!(run("a", "3"), run("c", "4"));
}
