use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fieldrecon"))
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("fieldrecon-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

const SMALL: &str = "\
preset = homogeneous
sensors = 12
grid = 8
replicates = 3
observations = 10
methods = oracle, naive, sblue, icm
icm_restarts = 1
seed = 4
";

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn synth_is_deterministic() {
    let dir = scratch("synth");
    let cfg = write(&dir, "small.cfg", SMALL);
    let a = run(&["synth", "--config", &cfg]);
    let b = run(&["synth", "--config", &cfg]);
    ok(&a);
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("label,method,replicate"));
    assert_eq!(lines.count(), 3 * 4);
}

#[test]
fn dump_reconstruct_and_score() {
    let dir = scratch("pipeline");
    let cfg = write(&dir, "small.cfg", SMALL);
    let world = dir.join("world");
    let w = world.to_str().unwrap();
    ok(&run(&["synth", "--config", &cfg, "--dump", w, "--out", dir.join("m.csv").to_str().unwrap()]));
    for f in ["observations.csv", "distortions.csv", "hyper.csv", "truth.csv"] {
        assert!(world.join(f).exists(), "{f}");
    }
    let grid = dir.join("grid.csv");
    let psi = dir.join("psi.csv");
    ok(&run(&[
        "reconstruct",
        "--observations",
        &format!("{w}/observations.csv"),
        "--hyper",
        &format!("{w}/hyper.csv"),
        "--config",
        &cfg,
        "--method",
        "icm",
        "--grid",
        "8",
        "--truth",
        &format!("{w}/truth.csv"),
        "--out",
        grid.to_str().unwrap(),
        "--distortions",
        psi.to_str().unwrap(),
    ]));
    let header = std::fs::read_to_string(&grid).unwrap();
    assert!(header.starts_with("x1,x2,truth,estimate,predictive_var"));
    assert_eq!(header.lines().count(), 1 + 64);
    let out = run(&[
        "metrics",
        "--grid",
        grid.to_str().unwrap(),
        "--prior-var",
        "100",
        "--true-flags",
        &format!("{w}/distortions.csv"),
        "--est-flags",
        psi.to_str().unwrap(),
        "--method",
        "icm",
    ]);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    let rmse: f64 = row[7].parse().unwrap();
    assert!(rmse.is_finite() && rmse >= 0.0);
    let fpr: f64 = row[8].parse().unwrap();
    assert!((0.0..=1.0).contains(&fpr));
}

#[test]
fn cluster_lonlat_groups() {
    let dir = scratch("cluster");
    let locs = write(
        &dir,
        "locs.csv",
        "sensor_id,longitude,latitude\na,-100,40\nb,-88,40\nc,-100.2,40.1\nd,-88.2,39.9\n",
    );
    let out = run(&["cluster", "--locations", &locs, "--lonlat", "--clusters", "2"]);
    ok(&out);
    assert_eq!(
        String::from_utf8(out.stdout).unwrap(),
        "sensor_id,cluster_id\na,1\nb,2\nc,1\nd,2\n"
    );
}

#[test]
fn fit_hyper_on_observations() {
    let dir = scratch("fit");
    let cfg = write(&dir, "small.cfg", &SMALL.replace("sensors = 12", "sensors = 40"));
    let world = dir.join("world");
    ok(&run(&["synth", "--config", &cfg, "--dump", world.to_str().unwrap(), "--set", "methods=naive"]));
    let out = run(&["fit-hyper", "--observations", world.join("observations.csv").to_str().unwrap()]);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("mean,variance,lengthscale,noise_var,log_likelihood"));
    let v: Vec<f64> = text.lines().nth(1).unwrap().split(',').map(|s| s.parse().unwrap()).collect();
    assert!(v[1] > 0.0 && v[2] > 0.0 && v[3] > 0.0);
}

#[test]
fn fit_hyper_on_epa_days() {
    let dir = scratch("epa");
    let mut text = String::from("State.Code,County.Code,Site.Num,Longitude,Latitude,Date.Local,X1st.Max.Value\n");
    for day in 1..=3 {
        for s in 0..12 {
            let lon = -100.0 + (s % 4) as f64;
            let lat = 35.0 + (s / 4) as f64;
            let f = 70.0 + 3.0 * (lon + 100.0) - 2.0 * (lat - 35.0) + day as f64 + 0.3 * ((s * 7 % 5) as f64);
            text.push_str(&format!("1,1,{s},{lon},{lat},2020-07-0{day},{f}\n"));
        }
    }
    text.push_str("1,1,0,-100,35,2020-07-01,257\n");
    let epa = write(&dir, "epa.csv", &text);
    let out = run(&["fit-hyper", "--epa", &epa, "--upper", "60", "--from", "2020-07-01", "--to", "2020-07-03"]);
    ok(&out);
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("12 sites, 3 days"), "{stderr}");
    let stdout = String::from_utf8(out.stdout).unwrap();
    let row: Vec<&str> = stdout.lines().nth(1).unwrap().split(',').collect();
    let mean: f64 = row[0].parse().unwrap();
    assert!((15.0..40.0).contains(&mean), "{mean}");
}

#[test]
fn input_errors_exit_with_one() {
    let dir = scratch("errors");
    assert_eq!(run(&["cluster", "--locations", "/nonexistent.csv", "--clusters", "2"]).status.code(), Some(1));
    let bad = write(&dir, "bad.csv", "sensor_id,x1,x2,value\na,0.1,0.2,notanumber\n");
    assert_eq!(run(&["reconstruct", "--observations", &bad]).status.code(), Some(1));
    assert_eq!(run(&["synth", "--set", "proportion=2"]).status.code(), Some(1));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    let obs = write(&dir, "obs.csv", "sensor_id,x1,x2,value\na,0.1,0.2,3\nb,0.5,0.5,4\n");
    assert_eq!(run(&["reconstruct", "--observations", &obs, "--method", "oracle"]).status.code(), Some(1));
}

#[test]
fn numerical_failure_exits_with_two() {
    let dir = scratch("numerical");
    let text = "State.Code,County.Code,Site.Num,Longitude,Latitude,Date.Local,X1st.Max.Value\n\
                1,1,1,-100,35,2020-07-01,80\n1,1,2,-99,35,2020-07-01,81\n";
    let epa = write(&dir, "epa.csv", text);
    assert_eq!(run(&["fit-hyper", "--epa", &epa]).status.code(), Some(2));
}

#[test]
fn help_exits_cleanly() {
    let out = run(&["--help"]);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in ["synth", "reconstruct", "cluster", "fit-hyper", "metrics"] {
        assert!(text.contains(cmd), "{cmd}");
    }
}
