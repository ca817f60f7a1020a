use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gnnd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gnnd")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn data_lines(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#')).collect()
}

const SWEEP: &str = r#"kind = "gmi-sweep"
users = 2
antennas = 2
snr_db = [0, 10]
methods = ["gnnd", "cl", "mi"]
draws = 2
samples = 2048
seed = 5
"#;

#[test]
fn gmi_sweep_writes_rows_summary_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "sweep.toml", SWEEP);
    let out = dir.path().join("rates.csv");
    let out_s = out.to_string_lossy().into_owned();
    let r = gnnd(&["gmi-sweep", "--config", &cfg, "--out", &out_s, "--threads", "1"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let first = fs::read_to_string(&out).unwrap();
    assert!(first.starts_with("# gnnd "));
    assert!(first.contains("# seed = 5"));
    let rows = data_lines(&first);
    assert_eq!(rows[0], "draw,snr_db,method,receiver,sum_rate,sum_std_error,samples,per_user,per_user_std_error");
    // draws x snr points x methods
    assert_eq!(rows.len() - 1, 2 * 2 * 3);
    let summary = fs::read_to_string(dir.path().join("rates.summary.csv")).unwrap();
    assert_eq!(data_lines(&summary).len() - 1, 2 * 3);

    let r = gnnd(&["gmi-sweep", "--config", &cfg, "--out", &out_s]);
    assert!(r.status.success());
    assert_eq!(fs::read_to_string(&out).unwrap(), first, "reruns are bit-identical");

    let r = gnnd(&["gmi-sweep", "--config", &cfg, "--out", &out_s, "--seed", "6"]);
    assert!(r.status.success());
    let reseeded = fs::read_to_string(&out).unwrap();
    assert!(reseeded.contains("# seed = 6"));
    assert_ne!(data_lines(&reseeded), rows);
}

#[test]
fn config_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", &format!("{SWEEP}bogus = 3\n"));
    let r = gnnd(&["gmi-sweep", "--config", &cfg]);
    assert!(!r.status.success());
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("line 9"), "{err}");

    let cfg = write(dir.path(), "empty.toml", &SWEEP.replace(r#"["gnnd", "cl", "mi"]"#, "[]"));
    let r = gnnd(&["gmi-sweep", "--config", &cfg]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("line 5"));
}

#[test]
fn subcommand_must_match_kind() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "sweep.toml", SWEEP);
    let r = gnnd(&["scatter", "--config", &cfg]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("not scatter"));
    let r = gnnd(&["gmi-sweep", "--config", &dir.path().join("missing.toml").to_string_lossy()]);
    assert!(!r.status.success());
}

#[test]
fn scatter_row_count_matches_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "s.toml",
        "kind = \"scatter\"\nusers = 3\nantennas = 2\nsnr_db = [15]\nsamples = 300\nseed = 2\n",
    );
    let out = dir.path().join("s.csv");
    let r = gnnd(&["scatter", "--config", &cfg, "--out", &out.to_string_lossy()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let rows = data_lines(&text);
    assert_eq!(rows[0], "sample,symbol,x_re,x_im,gnnd_re,gnnd_im,cl_re,cl_im");
    assert_eq!(rows.len() - 1, 300);
}

#[test]
fn viterbi_ber_records_stopping_rule() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "v.toml",
        "kind = \"viterbi-ber\"\nusers = 2\nantennas = 2\nsnr_db = [0]\nreceiver = \"sic\"\nmethods = [\"gnnd\", \"cl\"]\ninfo_bits = 50\nmin_errors = 20\nmax_blocks = 40\nseed = 3\n",
    );
    let out = dir.path().join("v.csv");
    let r = gnnd(&["viterbi-ber", "--config", &cfg, "--out", &out.to_string_lossy()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.contains("# stopping rule:"));
    let rows = data_lines(&text);
    assert_eq!(rows[0], "pilot_power,snr_db,method,user,errors,bits,blocks,ber,stop");
    // (all + 2 users) x 2 methods
    assert_eq!(rows.len() - 1, 6);
    assert!(rows[1].starts_with("perfect,0.0,gnnd,all,"));
}

#[test]
fn train_net_writes_trace_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "t.toml",
        "kind = \"train-net\"\nusers = 2\nantennas = 2\nsnr_db = [5]\nseed = 4\n\n[mmse_net]\nsamples = 512\nepochs = 2\nbatch_size = 64\nheldout = 200\n",
    );
    let out = dir.path().join("t.csv");
    let r = gnnd(&["train-net", "--config", &cfg, "--out", &out.to_string_lossy()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.contains("# heldout exact mmse"));
    let rows = data_lines(&text);
    assert_eq!(rows[0], "epoch,loss");
    assert_eq!(rows.len() - 1, 3);
    let model = fs::read_to_string(dir.path().join("t.model.txt")).unwrap();
    assert!(model.starts_with("gnnd-mlp v1"));
}

/// Runs `golden/<name>.toml` and compares every output file with the checked-in
/// copy, ignoring the version line.
fn check_golden(sub: &str, name: &str, outputs: &[&str]) {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join(format!("{name}.csv"));
    let cfg = golden.join(format!("{name}.toml"));
    let r = gnnd(&[sub, "--config", &cfg.to_string_lossy(), "--out", &out.to_string_lossy()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for file in outputs {
        let got = fs::read_to_string(dir.path().join(file)).unwrap();
        let want = fs::read_to_string(golden.join(file)).unwrap();
        let strip = |t: &str| t.lines().skip(1).map(str::to_owned).collect::<Vec<_>>();
        assert_eq!(strip(&got), strip(&want), "{file} differs from the golden copy");
    }
}

#[test]
fn golden_gmi_sweep() {
    check_golden("gmi-sweep", "gmi_sweep", &["gmi_sweep.csv", "gmi_sweep.summary.csv"]);
}

#[test]
fn golden_scatter() {
    check_golden("scatter", "scatter", &["scatter.csv"]);
}

#[test]
fn golden_viterbi_ber() {
    check_golden("viterbi-ber", "viterbi_ber", &["viterbi_ber.csv"]);
}
