use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
[subframe]
n_sc = 32
n_cp = 8
n_total = 6
n_pilot = 2
[channel]
taps = 4
[run]
ebno_db = 5, 15
n_subframes = 3
detectors = Lmmse{PilotOnly}, SphereDecoder{Oracle}
";

fn neurorx(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neurorx"))
        .current_dir(dir)
        .env_remove("NEURORX_SEED")
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn sweep_twice_gives_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    let a = neurorx(dir.path(), &["sweep", "--config", "small.cfg", "--seed", "7", "--out", "a"]);
    let b = neurorx(dir.path(), &["sweep", "--config", "small.cfg", "--seed", "7", "--out", "b", "--parallelism", "3"]);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(b.status.code(), Some(0));
    let ta = fs::read(dir.path().join("a/sweep.csv")).unwrap();
    assert_eq!(ta, fs::read(dir.path().join("b/sweep.csv")).unwrap());
    let text = String::from_utf8(ta).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 1 + 4);
    assert!(rows[0].starts_with("detector,ebno_db,n_subframes,bits,bit_errors,ber,symbols,symbol_errors,ser,excluded_subframes,seconds"));
    assert!(text.contains("# seed = 7"));
    assert!(text.contains("# n_sc = 32"));
}

#[test]
fn existing_output_is_refused_without_force() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    let args = ["sweep", "--config", "small.cfg", "--out", "o"];
    assert_eq!(neurorx(dir.path(), &args).status.code(), Some(0));
    let again = neurorx(dir.path(), &args);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(neurorx(dir.path(), &forced).status.code(), Some(0));
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_neurorx"))
        .current_dir(dir.path())
        .env("NEURORX_SEED", "42")
        .args(["sweep", "--config", "small.cfg"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(fs::read_to_string(dir.path().join("sweep.csv")).unwrap().contains("# seed = 42"));
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = neurorx(dir.path(), &["sweep", "--config", "nowhere/default.cfg"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nowhere/default.cfg"));

    fs::write(dir.path().join("bad.cfg"), "[subframe]\nmod_order = 15\n").unwrap();
    let bad = neurorx(dir.path(), &["sweep", "--config", "bad.cfg"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("line 2"));

    fs::write(dir.path().join("long.cfg"), "[subframe]\nn_cp = 4\n[channel]\ntaps = 8\n").unwrap();
    let long = neurorx(dir.path(), &["sweep", "--config", "long.cfg"]);
    assert_eq!(long.status.code(), Some(1));
    assert!(!dir.path().join("sweep.csv").exists());
}

#[test]
fn toy_b_check_passes_when_the_ordering_holds() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("toy.cfg"), "[toy]\nn_channels = 20\ncorruption = 0.7\n").unwrap();
    let out = neurorx(dir.path(), &["toy-b", "--check", "--config", "toy.cfg"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("toy-b.csv")).unwrap();
    assert!(text.lines().any(|l| l.starts_with("StructNet,5.0,0.7,20,")));
}

#[test]
fn failed_check_exits_with_three() {
    // a single Eb/No point with no 5 dB entry cannot satisfy the toy A check
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("toy.cfg"),
        "[toy]\nn_channels = 2\nn_test = 200\nepochs = 2\nebno_db = 9\n",
    )
    .unwrap();
    let out = neurorx(dir.path(), &["toy-a", "--check", "--config", "toy.cfg"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let plain = neurorx(dir.path(), &["toy-a", "--config", "toy.cfg", "--force"]);
    assert_eq!(plain.status.code(), Some(0));
}
