use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vcmamba")).args(args).output().expect("spawn vcmamba")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn total(o: &Output) -> f64 {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix("total,"))
        .expect("total row")
        .parse()
        .unwrap()
}

#[test]
fn params_reports_band_totals() {
    for (preset, target) in [("S", 10.5e6), ("M", 21.0e6), ("B", 31.5e6)] {
        let o = run(&["params", preset]);
        assert_eq!(o.status.code(), Some(0));
        let t = total(&o);
        assert!((t - target).abs() <= 0.1 * target, "{preset}: {t}");
        assert!(stdout(&o).starts_with("module,params\nstem,"));
    }
}

#[test]
fn macs_reports_band_totals() {
    for (preset, target) in [("S", 1.1e9), ("B", 4.0e9)] {
        let o = run(&["macs", preset, "--resolution", "224"]);
        assert_eq!(o.status.code(), Some(0));
        let t = total(&o);
        assert!((t - target).abs() <= 0.15 * target, "{preset}: {t}");
    }
    assert_eq!(run(&["macs", "B", "--resolution", "100"]).status.code(), Some(1));
}

#[test]
fn scan_dump_csv() {
    let o = run(&["scan-dump", "--height", "2", "--width", "3", "--path", "col-tl"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        stdout(&o),
        "step,flat_index,row,col,direction\n\
         0,0,0,0,begin\n1,3,1,0,down\n2,4,1,1,right\n3,1,0,1,up\n4,2,0,2,right\n5,5,1,2,down\n"
    );
    assert_eq!(run(&["scan-dump", "--height", "2", "--width", "2", "--path", "zigzag"]).status.code(), Some(1));
    assert_eq!(run(&["scan-dump", "--height", "0", "--width", "2", "--path", "row-tl"]).status.code(), Some(1));
}

#[test]
fn usage_errors_exit_one() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["params", "XL"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn check_passes_every_suite() {
    let o = run(&["check"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("suite,result,detail"));
    let rows: Vec<&str> = lines.collect();
    assert!(rows.len() >= 8);
    assert!(rows.iter().all(|r| r.split(',').nth(1) == Some("pass")), "{text}");
}

#[test]
fn train_then_eval_and_error_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(
        &cfg,
        "[model]\npreset = Nano\n[train]\nbatch_size = 8\nsteps = 3\nseed = 1\n[data]\nn_samples = 24\n[output]\ncheckpoint = out/m.vcmb\nlog = out/log.csv\n",
    )
    .unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(dir.path().join("out/log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 3 + 1);
    let last = log.lines().last().unwrap().to_string();

    let ckpt = dir.path().join("out/m.vcmb");
    let o = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let row = stdout(&o).lines().nth(1).unwrap().to_string();
    let f: Vec<&str> = row.split(',').collect();
    let l: Vec<&str> = last.split(',').collect();
    assert_eq!((f[0], f[1], f[2]), (l[3], l[2], "24"));

    // runtime failures exit 2, validation failures exit 1
    let missing = dir.path().join("missing.vcmb");
    assert_eq!(run(&["eval", "--checkpoint", missing.to_str().unwrap()]).status.code(), Some(2));
    let garbage = dir.path().join("garbage.vcmb");
    std::fs::write(&garbage, b"VCMB\x01\0\0\0garbage").unwrap();
    assert_eq!(run(&["eval", "--checkpoint", garbage.to_str().unwrap()]).status.code(), Some(2));
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "[train]\nbatch_size = 0\n").unwrap();
    assert_eq!(run(&["train", "--config", bad.to_str().unwrap()]).status.code(), Some(1));
}
