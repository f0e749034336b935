use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
resolution = 10
sample.extent = 30
sample.clear_blobs = on
sample.blob.a = 15,15,7,7,20
sample.random_blobs = 0
sample.total_variation_mv = none
scan.extent = 30
scan.scan_time = 90
ff.window = 20
";

fn sqdm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sqdm"))
        .args(args)
        .output()
        .expect("spawn sqdm")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("run.cfg");
    // keys in `extra` replace those of the base config
    let key = |l: &str| l.split('=').next().unwrap_or("").trim().to_string();
    let overridden: Vec<_> = extra.lines().map(key).collect();
    let base: String = SMALL
        .lines()
        .filter(|l| !overridden.contains(&key(l)))
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(&p, format!("{base}{extra}")).unwrap();
    p.to_str().unwrap().to_string()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn scan_writes_fixed_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("run");
    let o = sqdm(&["scan", "--config", &cfg, "--seed", "3", "--out", out.to_str().unwrap()]);
    ok(&o);
    for f in [
        "record.csv",
        "map_neg.txt",
        "map_pos.txt",
        "phi_star.txt",
        "phi_star.pgm",
        "metrics.txt",
        "manifest.txt",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let manifest = read(&out.join("manifest.txt"));
    for key in ["seed = 3", "derived.neg.k_esc", "derived.pos.phi", "wall_time_s", "files = "] {
        assert!(manifest.contains(key), "manifest lacks {key}");
    }
    assert!(read(&out.join("record.csv")).starts_with("dip,t,x,y"));
}

#[test]
fn same_seed_same_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "seed = 42\n");
    let run = |name: &str| {
        let out = tmp.path().join(name);
        ok(&sqdm(&["scan", "--config", &cfg, "--controller", "stc", "--out", out.to_str().unwrap()]));
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["record.csv", "map_neg.txt", "map_pos.txt", "phi_star.txt", "metrics.txt"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f} differs");
    }
    let strip = |s: String| s.lines().filter(|l| !l.starts_with("wall_time_s")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(read(&a.join("manifest.txt"))), strip(read(&b.join("manifest.txt"))));

    let c = tmp.path().join("c");
    ok(&sqdm(&["scan", "--config", &cfg, "--controller", "stc", "--seed", "43", "--out", c.to_str().unwrap()]));
    assert_ne!(read(&a.join("record.csv")), read(&c.join("record.csv")));
}

#[test]
fn seed_is_required() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let o = sqdm(&["scan", "--config", &cfg, "--out", tmp.path().join("x").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
}

#[test]
fn gen_sample_image_score_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let s = tmp.path().join("sample");
    ok(&sqdm(&["gen-sample", "--config", &cfg, "--seed", "7", "--out", s.to_str().unwrap()]));
    assert!(s.join("maps/v_neg.txt").is_file());

    // scanning saved maps gives the same result as the synthetic source
    let maps_cfg = write_config(
        tmp.path(),
        &format!(
            "sample.maps = {}\nsample.reference = {}\n",
            s.join("maps").display(),
            s.join("phi_true.txt").display()
        ),
    );
    let r = tmp.path().join("run");
    ok(&sqdm(&["scan", "--config", &maps_cfg, "--seed", "7", "--dip", "both", "--out", r.to_str().unwrap()]));
    let r2 = tmp.path().join("run2");
    ok(&sqdm(&["scan", "--config", &cfg, "--seed", "7", "--out", r2.to_str().unwrap()]));
    assert_eq!(read(&r.join("phi_star.txt")), read(&r2.join("phi_star.txt")));

    let img = tmp.path().join("img");
    ok(&sqdm(&["image", "--dir", r.to_str().unwrap(), "--out", img.to_str().unwrap()]));
    assert_eq!(read(&img.join("phi_star.txt")), read(&r.join("phi_star.txt")));

    let o = sqdm(&[
        "score",
        "--image",
        img.join("phi_star.txt").to_str().unwrap(),
        "--reference",
        s.join("phi_true.txt").to_str().unwrap(),
    ]);
    ok(&o);
    let text = String::from_utf8_lossy(&o.stdout);
    let rmse: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("rmse_mv = "))
        .expect("rmse line")
        .parse()
        .unwrap();
    assert!(rmse < 5.0, "{rmse}");
}

#[test]
fn single_dip_scan_has_no_phi() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("run");
    ok(&sqdm(&["scan", "--config", &cfg, "--seed", "1", "--dip", "pos", "--ff", "off", "--out", out.to_str().unwrap()]));
    assert!(out.join("map_pos.txt").is_file());
    assert!(!out.join("map_neg.txt").exists());
    assert!(!out.join("phi_star.txt").exists());
}

#[test]
fn dip_loss_sets_exit_status() {
    let tmp = tempfile::tempdir().unwrap();
    // a weak controller cannot follow a steep ramp
    let cfg = write_config(
        tmp.path(),
        "sample.ramp = 20,0\nstc.k_neg = 0.004\nff.enabled = off\n",
    );
    let out = tmp.path().join("run");
    let o = sqdm(&["scan", "--config", &cfg, "--seed", "1", "--controller", "stc", "--dip", "neg", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(read(&out.join("metrics.txt")).contains("neg.faults"));
}

#[test]
fn sweep_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "sweep.scan_time_factors = 1,2\nsweep.controllers = esc,stc\nsweep.depth_scales = 1\n",
    );
    let out = tmp.path().join("sweep");
    ok(&sqdm(&["sweep", "--config", &cfg, "--seed", "5", "--dip", "neg", "--out", out.to_str().unwrap()]));
    let csv = read(&out.join("sweep.csv"));
    let lines: Vec<_> = csv.lines().collect();
    assert!(lines[0].starts_with("index,experiment,controller"));
    assert_eq!(lines.len(), 1 + 4 + 1);
    assert!(read(&out.join("summary.txt")).contains("throughput.factor"));

    let empty = write_config(tmp.path(), "");
    let o = sqdm(&["sweep", "--config", &empty, "--seed", "5", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn validate_reports_guideline_violations() {
    let tmp = tempfile::tempdir().unwrap();
    let good = write_config(tmp.path(), "");
    let o = sqdm(&["validate", "--config", &good, "--seed", "1"]);
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("throughput"));

    let bad = write_config(tmp.path(), "esc.a_d = 0.05\n");
    let o = sqdm(&["validate", "--config", &bad, "--seed", "1"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("dither exceeds dip width"));
}
