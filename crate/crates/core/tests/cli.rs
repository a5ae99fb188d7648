use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lowrank::cli::parse_summary;

fn lowrank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lowrank"))
        .args(args)
        .env("LOWRANK_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("exp.conf");
    fs::write(&path, format!("output_dir = out\nwall_clock = false\n{body}")).unwrap();
    path
}

fn only_hash_dir(out: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

const BLOBS: &str = "dataset = blobs\nblobs_train = 256\nblobs_test = 96\nblobs_dims = 16\nblobs_classes = 12\n\
architecture = mlp:16-24-12\nbatch_size = 32\nepochs = 3\ntracking_every = 2\n";

#[test]
fn help_and_version_exit_zero() {
    let help = lowrank(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8_lossy(&help.stdout);
    assert!(text.contains("run") && text.contains("report"), "{text}");
    let version = lowrank(&["--version"]);
    assert_eq!(version.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&version.stdout).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn usage_and_config_errors_exit_one() {
    assert_eq!(lowrank(&[]).status.code(), Some(1));
    assert_eq!(lowrank(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(lowrank(&["run", "/nonexistent/exp.conf"]).status.code(), Some(1));

    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{BLOBS}epochs = many\n"));
    let out = lowrank(&["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("exp.conf:") && err.contains("epochs"), "{err}");

    // rank above the smallest dense layer is caught before any run starts
    let cfg = write_config(tmp.path(), &format!("{BLOBS}variant = SBPCA\nrank = 13\n"));
    let out = lowrank(&["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn rank_sweep_writes_one_set_of_artifacts_per_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &format!("{BLOBS}check_orthonormality = true\n[sweep]\nvariant = SBPCA\nrank = 1, 3, 10\n"),
    );
    let out = lowrank(&["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let root = only_hash_dir(&tmp.path().join("out"));
    let rows = parse_summary(&fs::read_to_string(root.join("summary.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.ok()));
    for (row, k) in rows.iter().zip([1, 3, 10]) {
        assert_eq!(row.rank, Some(k));
        let run = root.join(&row.run);
        let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 1 + 3);
        assert!(metrics.starts_with(
            "epoch,train_loss,test_loss,test_accuracy,tracking_error_fc1,tracking_error_fc2,wall_seconds\n"
        ));
        for file in ["cost_report.txt", "model.bin", "state_fc1.bin", "state_fc2.bin", "hyperparams.txt"] {
            assert!(run.join(file).is_file(), "{file}");
        }
        let report = fs::read_to_string(run.join("cost_report.txt")).unwrap();
        assert!(report.contains("orthonormality_violations 0"), "{report}");
        let state = lowrank::sbpca::LowRankState::load(run.join("state_fc2.bin")).unwrap();
        assert_eq!(state.rank(), k);
    }
    assert!(fs::read_to_string(root.join("config.txt")).unwrap().contains("rank = 1, 3, 10"));

    let table = lowrank(&["report", root.to_str().unwrap()]);
    assert_eq!(table.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&table.stdout).lines().count(), 4);
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &format!("{BLOBS}dropout = true\n[sweep]\nvariant = MBGD, SBPCA, SBPCAV\nrank = 2\n"),
    );
    let cfg = cfg.to_str().unwrap();
    let snapshot = |root: &Path| -> Vec<(String, Vec<u8>)> {
        let mut files = vec![("summary.csv".to_string(), fs::read(root.join("summary.csv")).unwrap())];
        for entry in fs::read_dir(root).unwrap() {
            let run = entry.unwrap().path();
            if run.is_dir() {
                for f in ["metrics.csv", "model.bin", "cost_report.txt"] {
                    files.push((format!("{}/{f}", run.display()), fs::read(run.join(f)).unwrap()));
                }
            }
        }
        files.sort();
        files
    };
    assert_eq!(lowrank(&["run", cfg]).status.code(), Some(0));
    let root = only_hash_dir(&tmp.path().join("out"));
    let first = snapshot(&root);
    assert_eq!(first.len(), 1 + 3 * 3);
    assert_eq!(lowrank(&["run", cfg]).status.code(), Some(0));
    assert_eq!(snapshot(&root), first);
}

#[test]
fn memory_ratios_in_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    // one 256x128 dense layer, B = 128
    let cfg = write_config(
        tmp.path(),
        "dataset = blobs\nblobs_train = 256\nblobs_test = 64\nblobs_dims = 128\nblobs_classes = 256\n\
         architecture = mlp:128-256\nbatch_size = 128\nepochs = 1\nalpha_fc = 0.001\n\
         [sweep]\nvariant = MBGD, SBPCA\nrank = 10\n",
    );
    assert_eq!(lowrank(&["run", cfg.to_str().unwrap()]).status.code(), Some(0));
    let root = only_hash_dir(&tmp.path().join("out"));
    let rows = parse_summary(&fs::read_to_string(root.join("summary.csv")).unwrap()).unwrap();
    assert_eq!(rows[0].memory_ratio, 1.0);
    assert_eq!(rows[0].aux_floats, 48 * 1024);
    assert_eq!(rows[1].aux_floats, 3850 + 3840 + 2916);
    // (3k+1)/B treats max(m,n)/(m+n) as 1; here it is 2/3
    let approx = 31.0 / 128.0;
    assert!((rows[1].memory_ratio - approx).abs() / approx < 0.15, "{}", rows[1].memory_ratio);

    let text = String::from_utf8_lossy(&lowrank(&["report", tmp.path().join("out").to_str().unwrap()]).stdout)
        .into_owned();
    assert!(text.contains("1.0000") && text.contains("0.2158"), "{text}");
}

#[test]
fn report_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = lowrank(&["report", tmp.path().to_str().unwrap()]);
    assert_eq!(empty.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&empty.stderr).contains("no runs found"));

    let bad = tmp.path().join("abc");
    fs::create_dir(&bad).unwrap();
    fs::write(bad.join("summary.csv"), "garbage\n").unwrap();
    let out = lowrank(&["report", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("abc/summary.csv"));
}

#[test]
fn diverging_run_is_marked_failed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{BLOBS}[sweep]\nalpha_fc = 0.01, 1e12\n"));
    let out = lowrank(&["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let root = only_hash_dir(&tmp.path().join("out"));
    let rows = parse_summary(&fs::read_to_string(root.join("summary.csv")).unwrap()).unwrap();
    assert!(rows[0].ok());
    assert!(rows[1].status.starts_with("failed"), "{}", rows[1].status);
    assert_eq!(rows[1].final_accuracy, None);
}

#[test]
fn differing_config_in_the_same_directory_is_not_overwritten() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), BLOBS);
    assert_eq!(lowrank(&["run", cfg.to_str().unwrap()]).status.code(), Some(0));
    let root = only_hash_dir(&tmp.path().join("out"));
    fs::write(root.join("config.txt"), "tampered\n").unwrap();
    let out = lowrank(&["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("refusing"));
}
