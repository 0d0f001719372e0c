use std::path::PathBuf;
use std::process::{Command, Output};

fn floss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_floss")).args(args).output().expect("binary runs")
}

fn graph(name: &str) -> String {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "core", "graphs", name].iter().collect();
    p.to_str().unwrap().to_string()
}

fn small_config(dir: &tempfile::TempDir) -> String {
    let path = dir.path().join("small.conf");
    std::fs::write(
        &path,
        "train.rounds = 2\ntrain.max_iterations = 5\nexperiment.test_users = 100\n\
         experiment.clients = 60, 80\nexperiment.seeds = 1, 2\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gradients_are_not_separated_from_their_indicator() {
    let o = floss(&["dsep-check", &graph("gradient_mnar.graph"), "R; G;"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("not d-separated"), "{out}");
    assert!(out.contains("open path: "), "{out}");
}

#[test]
fn shadow_is_separated_from_response() {
    let o = floss(&["dsep-check", &graph("shadow_assumption.graph"), "Z; R; S, Drest"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "d-separated");
}

#[test]
fn malformed_graph_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.graph");
    std::fs::write(&path, "vertex A observed\nvertex B sideways\n").unwrap();
    let o = floss(&["dsep-check", path.to_str().unwrap(), "A; B;"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn run_writes_one_row_per_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&dir);
    let o = floss(&["run", "--config", &cfg, "--mode", "oracle", "--seed", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert!(lines[0].starts_with("schema_version,mode,n_clients,seed,round"));
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,oracle,1000,5,0,"), "{}", lines[1]);
}

#[test]
fn sweep_output_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&dir);
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let o = floss(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (a, b) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    assert_eq!(a, b);
    // header + 4 modes x 2 sizes x 2 seeds x 2 rounds
    assert_eq!(a.iter().filter(|&&c| c == b'\n').count(), 1 + 32);
}

#[test]
fn bad_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.conf");
    std::fs::write(&path, "train.k = 3\ntrain.kk = 4\n").unwrap();
    let o = floss(&["sweep", "--config", path.to_str().unwrap(), "--out", "/dev/null"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn unwritable_output_exits_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&dir);
    let out = dir.path().join("missing-dir").join("x.csv");
    let o = floss(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn unknown_mode_is_a_usage_error() {
    let o = floss(&["run", "--mode", "sometimes"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_population_dumps_every_user() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pop.tsv");
    let cfg = dir.path().join("pop.conf");
    std::fs::write(&cfg, "population.n_users = 25\n").unwrap();
    let o = floss(&["gen-population", "--config", cfg.to_str().unwrap(), "--seed", "4", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out).unwrap();
    assert!(text.starts_with("# floss-population v1"));
    assert_eq!(text.lines().filter(|l| !l.starts_with('#') && !l.starts_with("id\t")).count(), 25);
}
