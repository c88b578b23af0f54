mod common;

use std::fs;
use std::process::{Command, Stdio};
use std::sync::{Mutex, MutexGuard, OnceLock};

use crc_core::idx::{dataset_paths, read_idx_images, read_idx_labels};
use crc_core::nn::load_model;
use crc_core::Split;
use crc_harness::artifacts::{load_probs, Manifest};
use crc_harness::label_free::select_from_images;
use crc_harness::pipeline::{
    indices_path, load_family_models, load_indices, probs_path, run_all, run_generate, run_select, run_train,
    subsample_indices,
};
use crc_harness::report::{Metric, SelectionResultTable};
use crc_harness::{ExperimentPlan, Family};
use tempfile::TempDir;

struct Fixture {
    _dir: TempDir,
    plan: ExperimentPlan,
}

/// One end-to-end run over both families, shared by the tests below.
fn fixture() -> MutexGuard<'static, Fixture> {
    static RUN: OnceLock<Mutex<Fixture>> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let plan = common::tiny_plan(dir.path(), &Family::ALL);
        common::seed_originals(&plan);
        run_all(&plan).unwrap();
        Mutex::new(Fixture { _dir: dir, plan })
    })
    .lock()
    .unwrap_or_else(|e| e.into_inner())
}

fn results(plan: &ExperimentPlan, family: Family, n: usize) -> SelectionResultTable {
    SelectionResultTable::from_csv(&fs::read_to_string(plan.results_path(family, n, 0)).unwrap()).unwrap()
}

#[test]
fn missing_originals_error_is_actionable() {
    let dir = tempfile::tempdir().unwrap();
    let plan = common::tiny_plan(dir.path(), &[Family::Mnist]);
    let err = format!("{:#}", run_generate(&plan).unwrap_err());
    assert!(err.contains("train-images-idx3-ubyte"), "{err}");
    assert!(err.contains("--data-dir"), "{err}");
}

#[test]
fn generate_writes_every_split_and_is_reproducible() {
    let fx = fixture();
    let plan = &fx.plan;
    for family in Family::ALL {
        let files = fs::read_dir(plan.datasets_dir(family)).unwrap().count();
        assert_eq!(files, 5 * 2 * 2, "{family}: 5 datasets x 2 splits x (images, labels)");
    }

    let again = tempfile::tempdir().unwrap();
    let mut replay = plan.clone();
    replay.out_dir = again.path().join("out");
    run_generate(&replay).unwrap();
    for family in Family::ALL {
        let a = Manifest::load_or_default(&plan.manifest_path(family)).unwrap();
        let b = Manifest::load_or_default(&replay.manifest_path(family)).unwrap();
        let datasets = |m: &Manifest| -> Vec<(String, String)> {
            m.entries
                .iter()
                .filter(|(k, _)| k.starts_with("dataset."))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect()
        };
        assert_eq!(datasets(&a).len(), 20);
        assert_eq!(datasets(&a), datasets(&b));
        let key = |i: usize| format!("dataset.{}.test.images.sha256", family.dataset_name(i));
        assert_ne!(a.get(&key(3)), a.get(&key(4)), "variance 0.02 and 0.1 must differ");
        assert_eq!(a.get("seed.subsample"), Some(plan.subsample_seed.to_string().as_str()));
    }
}

#[test]
fn checkpoints_carry_provenance_and_are_reused() {
    let fx = fixture();
    let plan = &fx.plan;
    for family in Family::ALL {
        for i in 0..5 {
            let ck = load_model::<f64>(&plan.checkpoint_path(family, i)).unwrap();
            assert_eq!(ck.metadata["family"], family.name());
            assert_eq!(ck.metadata["dataset"], family.dataset_name(i));
            assert_eq!(ck.metadata["split"], "train");
            assert_eq!(ck.metadata["seed"], plan.model_seeds[i].to_string());
            assert_eq!(ck.metadata["epochs"], "2");
        }
    }
    let rerun = run_train(plan).unwrap();
    assert_eq!(rerun.len(), 10);
    assert!(rerun.iter().all(|t| t.report.is_none()));
}

#[test]
fn crc_is_computed_from_images_alone() {
    let fx = fixture();
    let plan = &fx.plan;
    let family = Family::FashionMnist;
    let (images_path, _) = dataset_paths(&plan.datasets_dir(family), &family.dataset_name(2), Split::Test);
    // a directory holding the test images and nothing else
    let bare = tempfile::tempdir().unwrap();
    let copy = bare.path().join("images.idx");
    fs::copy(&images_path, &copy).unwrap();

    let models = load_family_models(plan, family).unwrap();
    let images = read_idx_images::<f64>(&copy).unwrap();
    let sel = select_from_images(&models, &images).unwrap();
    let row = &results(plan, family, 100).rows[2];
    assert_eq!(sel.report.scores(), row.metric(Metric::Crc));
    assert_eq!(sel.report.selected_index, row.selected_by(Metric::Crc));
}

#[test]
fn er_and_ce_match_recomputation_from_persisted_probabilities() {
    let fx = fixture();
    let plan = &fx.plan;
    for family in Family::ALL {
        for n in [100, 20] {
            let table = results(plan, family, n);
            for (d, row) in table.rows.iter().enumerate() {
                let (_, lp) = dataset_paths(&plan.datasets_dir(family), &family.dataset_name(d), Split::Test);
                let all = read_idx_labels(&lp, 10).unwrap();
                let labels: Vec<usize> = if n == 100 {
                    all.as_slice().to_vec()
                } else {
                    let idx = load_indices(&indices_path(plan, family, n, 0, d)).unwrap();
                    idx.iter().map(|&i| all.as_slice()[i]).collect()
                };
                for k in 0..5 {
                    let p = load_probs(&probs_path(plan, family, n, 0, d, k)).unwrap();
                    assert_eq!(p.rows(), n);
                    let mut wrong = 0usize;
                    let mut nll = 0.0f64;
                    for (r, &y) in labels.iter().enumerate() {
                        let row_p = p.row(r);
                        let mut best = 0;
                        for c in 1..row_p.len() {
                            if row_p[c] > row_p[best] {
                                best = c;
                            }
                        }
                        wrong += usize::from(best != y);
                        nll -= row_p[y].max(1e-12).ln();
                    }
                    let er = wrong as f64 / n as f64;
                    let ce = nll / n as f64;
                    assert!((row.metric(Metric::Er)[k] - er).abs() < 1e-12);
                    assert!(
                        (row.metric(Metric::Ce)[k] - ce).abs() < 1e-9,
                        "{} vs {ce}",
                        row.metric(Metric::Ce)[k]
                    );
                }
            }
        }
    }
}

#[test]
fn report_has_one_mark_per_dataset_and_metric() {
    let fx = fixture();
    let plan = &fx.plan;
    let csv = fs::read_to_string(plan.report_dir().join("selection_N100.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(lines.len(), 10 * 3 * 5);
    for family in Family::ALL {
        for d in 0..5 {
            for m in ["CRC", "ER", "CE"] {
                let prefix = format!("{},{},100,0,{m},", family.name(), family.dataset_name(d));
                let cells: Vec<&&str> = lines.iter().filter(|l| l.starts_with(&prefix)).collect();
                assert_eq!(cells.len(), 5);
                assert_eq!(cells.iter().filter(|l| l.contains(",1,M")).count(), 1, "{prefix}");
            }
        }
    }
    let summary = fs::read_to_string(plan.report_dir().join("summary.txt")).unwrap();
    let first = summary.lines().next().unwrap();
    assert!(first.starts_with("N=100: CRC correct in "), "{first}");
    assert_eq!(first.matches("/10").count(), 3, "{first}");
    let text = fs::read_to_string(plan.report_dir().join("tables_N20.txt")).unwrap();
    assert!(text.contains("FashionMNIST-D4  (ground truth M4)"));
}

#[test]
fn select_refuses_missing_or_foreign_checkpoints() {
    let copy = tempfile::tempdir().unwrap();
    let mut plan = {
        let fx = fixture();
        common::copy_dir(&fx.plan.out_dir, &copy.path().join("out"));
        fx.plan.clone()
    };
    plan.out_dir = copy.path().join("out");

    let mnist_m1 = plan.checkpoint_path(Family::Mnist, 1);
    fs::copy(plan.checkpoint_path(Family::FashionMnist, 1), &mnist_m1).unwrap();
    let err = format!("{:#}", run_select(&plan).unwrap_err());
    assert!(err.contains("provenance family=FashionMNIST"), "{err}");

    fs::remove_file(&mnist_m1).unwrap();
    let err = format!("{:#}", run_select(&plan).unwrap_err());
    assert!(err.contains("M1.ckpt") && err.contains("run `train` first"), "{err}");
}

#[test]
fn subsamples_are_seeded_draws_without_replacement() {
    let a = subsample_indices(7, Family::Mnist, 3, 160, 0, 10_000);
    assert_eq!(a.len(), 160);
    assert!(a.windows(2).all(|w| w[0] < w[1]));
    assert!(a.iter().all(|&i| i < 10_000));
    assert_eq!(a, subsample_indices(7, Family::Mnist, 3, 160, 0, 10_000));
    assert_ne!(a, subsample_indices(7, Family::Mnist, 4, 160, 0, 10_000));
    assert_ne!(a, subsample_indices(7, Family::Mnist, 3, 160, 1, 10_000));
    assert_ne!(a, subsample_indices(8, Family::Mnist, 3, 160, 0, 10_000));
    assert_eq!(
        subsample_indices(1, Family::FashionMnist, 0, 50, 0, 50),
        (0..50).collect::<Vec<_>>()
    );
}

#[test]
fn cli_select_and_report_reproduce_the_library_run() {
    let copy = tempfile::tempdir().unwrap();
    let (plan, expected) = {
        let fx = fixture();
        common::copy_dir(&fx.plan.out_dir, &copy.path().join("out"));
        let csv = fs::read_to_string(fx.plan.report_dir().join("selection_N20.csv")).unwrap();
        (fx.plan.clone(), csv)
    };
    let out = copy.path().join("out");
    fs::remove_dir_all(out.join("report")).unwrap();
    let config = copy.path().join("plan.txt");
    fs::write(&config, plan.to_config_text()).unwrap();

    let bin = env!("CARGO_BIN_EXE_crc-harness");
    for cmd in ["select", "report"] {
        let status = Command::new(bin)
            .arg(cmd)
            .arg("--config")
            .arg(&config)
            .arg("--out-dir")
            .arg(&out)
            .args(["--family", "both", "--eval-sizes", "100,20", "--workers", "2"])
            .env("RUST_LOG", "warn")
            .stdout(Stdio::null())
            .status()
            .unwrap();
        assert!(status.success(), "{cmd}");
    }
    assert_eq!(
        fs::read_to_string(out.join("report/selection_N20.csv")).unwrap(),
        expected
    );

    let empty = tempfile::tempdir().unwrap();
    let output = Command::new(bin)
        .args(["report", "--out-dir"])
        .arg(empty.path())
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("run `select` first"));

    let output = Command::new(bin)
        .args(["--set", "bogus=1", "generate"])
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("unknown config key"));
}
