//! The four experiment stages: generate, train, select, report.
//!
//! Stages communicate only through files below `out_dir`, so each can be
//! re-run on its own:
//!
//! ```text
//! <out_dir>/plan.txt
//! <out_dir>/<family>/manifest.txt
//! <out_dir>/<family>/datasets/<family>-D<i>-{train,test}-{images,labels}.idx
//! <out_dir>/<family>/models/M<i>.ckpt
//! <out_dir>/<family>/probs/<tag>/<family>-D<i>_M<k>.prob  (+ <family>-D<i>.indices)
//! <out_dir>/<family>/results/<tag>.csv
//! <out_dir>/report/{selection_<tag>.csv, tables_<tag>.txt, summary.txt}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, bail, ensure, Context, Result};
use crc_core::idx::{dataset_paths, read_dataset, read_idx_images, read_idx_labels, write_idx};
use crc_core::imageops::Perturbation;
use crc_core::nn::{load_model_expecting, save_model, train_with, Architecture, CnnModel, TrainReport};
use crc_core::{crc_scores, cross_entropy, error_rate, LabeledDataset, ProbabilityMatrix, Split};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::artifacts::{save_probs, sha256_file, sha256_hex, Manifest};
use crate::label_free::model_probabilities;
use crate::plan::{run_tag, ExperimentPlan, Family, NUM_DATASETS, NUM_OPERATIONS};
use crate::report::{merge, write_report, DatasetResult, ReportFiles, SelectionResultTable};

pub const CLASSES: usize = 10;

/// Distributed file names; a `.gz` suffix is also accepted.
pub const ORIGINAL_FILES: [(Split, &str, &str); 2] = [
    (Split::Train, "train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    (Split::Test, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
];

const VERSION: &str = env!("CARGO_PKG_VERSION");

fn find_original(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    bail!(
        "missing original file {stem}[.gz] in {}: download the four IDX files \
         (train-images-idx3-ubyte, train-labels-idx1-ubyte, t10k-images-idx3-ubyte, \
         t10k-labels-idx1-ubyte, optionally gzipped) into that directory or point --data-dir at their parent",
        dir.display()
    )
}

/// Image and label paths of both original splits, checked to exist.
pub fn original_paths(plan: &ExperimentPlan, family: Family) -> Result<Vec<(Split, PathBuf, PathBuf)>> {
    let dir = plan.originals_dir(family);
    ORIGINAL_FILES
        .iter()
        .map(|&(split, images, labels)| Ok((split, find_original(&dir, images)?, find_original(&dir, labels)?)))
        .collect()
}

/// Train and test noise must not share a pattern, so the test split runs on
/// a distinct seed derived from the operation seed.
pub fn split_seed(seed: u64, split: Split) -> u64 {
    match split {
        Split::Train => seed,
        Split::Test => seed ^ 0x9E37_79B9_7F4A_7C15,
    }
}

/// Operation `op` (1-4) with the plan's Laplacian shape.
pub fn perturbation(plan: &ExperimentPlan, op: u8) -> Result<Perturbation> {
    Ok(match Perturbation::from_id(op)? {
        Perturbation::Laplacian(_) => Perturbation::Laplacian(plan.laplacian),
        p => p,
    })
}

fn write_plan(plan: &ExperimentPlan) -> Result<()> {
    fs::create_dir_all(&plan.out_dir).with_context(|| format!("creating {}", plan.out_dir.display()))?;
    fs::write(plan.out_dir.join("plan.txt"), plan.to_config_text())?;
    Ok(())
}

fn record_seeds(plan: &ExperimentPlan, m: &mut Manifest) {
    m.insert("version.crc-harness", VERSION);
    m.insert("seed", plan.seed);
    for (i, s) in plan.model_seeds.iter().enumerate() {
        m.insert(format!("seed.model.M{i}"), s);
    }
    for (i, s) in plan.noise_seeds.iter().enumerate() {
        m.insert(format!("seed.noise.op{}", i + 1), s);
    }
    m.insert("seed.subsample", plan.subsample_seed);
}

fn dataset_key(name: &str, split: Split, part: &str) -> String {
    format!("dataset.{name}.{split}.{part}.sha256")
}

/// Writes D0 (a re-encoding of the originals) and D1-D4 for both splits of
/// every family, recording seeds and checksums in the family manifest.
pub fn run_generate(plan: &ExperimentPlan) -> Result<()> {
    plan.validate()?;
    write_plan(plan)?;
    for &family in &plan.families {
        let originals = original_paths(plan, family)?;
        let dir = plan.datasets_dir(family);
        let mut manifest = Manifest::load_or_default(&plan.manifest_path(family))?;
        record_seeds(plan, &mut manifest);
        manifest.insert("laplacian", format!("{:?}", plan.laplacian));
        for (split, images_path, labels_path) in originals {
            for p in [&images_path, &labels_path] {
                let file = p.file_name().and_then(|f| f.to_str()).unwrap_or("original");
                manifest.insert(format!("original.{file}.sha256"), sha256_file(p)?);
            }
            let d0 = read_dataset::<f64>(&images_path, &labels_path, family.dataset_name(0), split, CLASSES)
                .with_context(|| format!("reading {family} {split} originals"))?;
            info!("{family} {split}: {} images", d0.len());
            write_dataset(&d0, &dir, &mut manifest)?;
            for op in 1..=NUM_OPERATIONS as u8 {
                let seed = split_seed(plan.noise_seeds[op as usize - 1], split);
                let images = perturbation(plan, op)?.apply(d0.images(), seed)?;
                let derived = d0.with_images(family.dataset_name(op as usize), images);
                write_dataset(&derived, &dir, &mut manifest)?;
            }
        }
        manifest.save(&plan.manifest_path(family))?;
    }
    Ok(())
}

fn write_dataset(d: &LabeledDataset<f64>, dir: &Path, manifest: &mut Manifest) -> Result<()> {
    let (ip, lp) = write_idx(d, dir).with_context(|| format!("writing {}", d.name))?;
    manifest.insert(dataset_key(&d.name, d.split, "images"), sha256_file(&ip)?);
    manifest.insert(dataset_key(&d.name, d.split, "labels"), sha256_file(&lp)?);
    info!("wrote {} {} ({} images)", d.name, d.split, d.len());
    Ok(())
}

fn existing_dataset_paths(
    plan: &ExperimentPlan,
    family: Family,
    index: usize,
    split: Split,
) -> Result<(PathBuf, PathBuf)> {
    let name = family.dataset_name(index);
    let (ip, lp) = dataset_paths(&plan.datasets_dir(family), &name, split);
    for p in [&ip, &lp] {
        ensure!(
            p.is_file(),
            "missing dataset file {}: run `generate` first",
            p.display()
        );
    }
    Ok((ip, lp))
}

/// Provenance recorded in every checkpoint; a checkpoint whose metadata
/// matches is reused instead of retrained.
fn checkpoint_metadata(
    plan: &ExperimentPlan,
    family: Family,
    index: usize,
    images_sha: &str,
) -> BTreeMap<String, String> {
    let cfg = plan.train_config(index);
    let mut m = BTreeMap::new();
    m.insert("family".into(), family.name().into());
    m.insert("dataset".into(), family.dataset_name(index));
    m.insert("split".into(), Split::Train.to_string());
    m.insert("train_images_sha256".into(), images_sha.into());
    m.insert("seed".into(), cfg.seed.to_string());
    m.insert("epochs".into(), cfg.epochs.to_string());
    m.insert("initial_lr".into(), cfg.initial_lr.to_string());
    m.insert("lr_decay".into(), cfg.lr_decay.to_string());
    m.insert("momentum".into(), cfg.momentum.to_string());
    m.insert("batch_size".into(), cfg.batch_size.to_string());
    m.insert(
        "train_samples".into(),
        cfg.max_samples.map_or("all".into(), |n| n.to_string()),
    );
    m.insert("version".into(), VERSION.into());
    m
}

fn metadata_matches(found: &BTreeMap<String, String>, wanted: &BTreeMap<String, String>) -> bool {
    wanted.iter().all(|(k, v)| found.get(k) == Some(v))
}

/// Outcome of one training job.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub family: Family,
    pub index: usize,
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    /// `None` when an up-to-date checkpoint was reused.
    pub report: Option<TrainReport>,
    /// Wall-clock training time; zero when reused.
    pub seconds: f64,
}

fn train_one(plan: &ExperimentPlan, family: Family, index: usize) -> Result<TrainedModel> {
    let (ip, lp) = existing_dataset_paths(plan, family, index, Split::Train)?;
    let images_sha = sha256_file(&ip)?;
    let metadata = checkpoint_metadata(plan, family, index, &images_sha);
    let path = plan.checkpoint_path(family, index);
    let label = format!("{family} M{index}");
    if path.is_file() {
        match load_model_expecting::<f64>(&path, &Architecture::reference()) {
            Ok(ck) if metadata_matches(&ck.metadata, &metadata) => {
                info!("{label}: up-to-date checkpoint, skipping");
                return Ok(TrainedModel {
                    family,
                    index,
                    checkpoint_sha256: sha256_file(&path)?,
                    checkpoint: path,
                    report: None,
                    seconds: 0.0,
                });
            }
            _ => info!("{label}: stale checkpoint, retraining"),
        }
    }
    let data = read_dataset::<f64>(&ip, &lp, family.dataset_name(index), Split::Train, CLASSES)?;
    let cfg = plan.train_config(index);
    info!(
        "{label}: training on {} ({} samples)",
        data.name,
        cfg.max_samples.unwrap_or(data.len()).min(data.len())
    );
    let started = std::time::Instant::now();
    let (model, report) = train_with(&data, &cfg, |e| {
        info!(
            "{label}: epoch {} lr {} train loss {:.4} monitor loss {:.4}",
            e.epoch, e.learning_rate, e.train_loss, e.monitor_loss
        )
    })
    .with_context(|| format!("training {label}"))?;
    let mut metadata = metadata;
    metadata.insert("initial_monitor_loss".into(), report.initial_monitor_loss.to_string());
    if let Some(last) = report.epochs.last() {
        metadata.insert("final_monitor_loss".into(), last.monitor_loss.to_string());
    }
    fs::create_dir_all(plan.models_dir(family))?;
    save_model(&model, &metadata, &path)?;
    Ok(TrainedModel {
        family,
        index,
        checkpoint_sha256: sha256_file(&path)?,
        checkpoint: path,
        report: Some(report),
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Trains `M_i` on the train split of `D_i` for every family, running up to
/// `plan.workers` jobs at once.
pub fn run_train(plan: &ExperimentPlan) -> Result<Vec<TrainedModel>> {
    plan.validate()?;
    write_plan(plan)?;
    let jobs: Vec<(Family, usize)> = plan
        .families
        .iter()
        .flat_map(|&f| (0..NUM_DATASETS).map(move |i| (f, i)))
        .collect();
    for &(f, i) in &jobs {
        existing_dataset_paths(plan, f, i, Split::Train)?;
    }
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..plan.workers.min(jobs.len()) {
            s.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(family, index)) = jobs.get(j) else { break };
                let r = train_one(plan, family, index);
                if r.is_err() {
                    // let the other workers drain quickly
                    next.store(jobs.len(), Ordering::SeqCst);
                }
                results.lock().expect("results lock").push(r);
            });
        }
    });
    let mut trained = results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    trained.sort_by_key(|t| (t.family, t.index));
    ensure!(trained.len() == jobs.len(), "training stopped early");
    for &family in &plan.families {
        let mut manifest = Manifest::load_or_default(&plan.manifest_path(family))?;
        record_seeds(plan, &mut manifest);
        for t in trained.iter().filter(|t| t.family == family) {
            manifest.insert(format!("checkpoint.M{}.sha256", t.index), &t.checkpoint_sha256);
            if t.report.is_some() {
                manifest.insert(format!("train_seconds.M{}", t.index), format!("{:.1}", t.seconds));
            }
        }
        manifest.save(&plan.manifest_path(family))?;
    }
    Ok(trained)
}

/// Loads the five checkpoints of a family, refusing any whose provenance
/// names another family or dataset or a different training split.
pub fn load_family_models(plan: &ExperimentPlan, family: Family) -> Result<Vec<CnnModel<f64>>> {
    let manifest = Manifest::load_or_default(&plan.manifest_path(family))?;
    (0..NUM_DATASETS)
        .map(|i| {
            let path = plan.checkpoint_path(family, i);
            ensure!(
                path.is_file(),
                "missing checkpoint {}: run `train` first",
                path.display()
            );
            let ck = load_model_expecting::<f64>(&path, &Architecture::reference())
                .with_context(|| format!("loading {}", path.display()))?;
            let expect = [
                ("family", family.name().to_string()),
                ("dataset", family.dataset_name(i)),
            ];
            for (k, v) in expect {
                let found = ck.metadata.get(k).map(String::as_str).unwrap_or("<missing>");
                ensure!(found == v, "{}: provenance {k}={found}, expected {v}", path.display());
            }
            let key = dataset_key(&family.dataset_name(i), Split::Train, "images");
            if let (Some(want), Some(found)) = (manifest.get(&key), ck.metadata.get("train_images_sha256")) {
                ensure!(
                    want == found,
                    "{}: trained on data that no longer matches {key}; retrain",
                    path.display()
                );
            }
            Ok(ck.model)
        })
        .collect()
}

/// Uniform draw of `n` of `total` indices without replacement, sorted. The
/// stream separates families, datasets, sizes and repeats.
pub fn subsample_indices(
    seed: u64,
    family: Family,
    dataset: usize,
    n: usize,
    repeat: usize,
    total: usize,
) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stream = ((family as u64) << 56)
        | ((dataset as u64) << 48)
        | ((repeat as u64 & 0xffff) << 32)
        | (n as u64 & 0xffff_ffff);
    rng.set_stream(stream);
    let mut idx = rand::seq::index::sample(&mut rng, total, n).into_vec();
    idx.sort_unstable();
    idx
}

/// Draws evaluated at size `n` on a test split of `total` images.
pub fn draws_for(plan: &ExperimentPlan, n: usize, total: usize) -> usize {
    if n == total {
        1
    } else {
        plan.repeats
    }
}

pub fn probs_path(
    plan: &ExperimentPlan,
    family: Family,
    n: usize,
    repeat: usize,
    dataset: usize,
    model: usize,
) -> PathBuf {
    plan.probs_dir(family, n, repeat)
        .join(format!("{}_M{model}.prob", family.dataset_name(dataset)))
}

pub fn indices_path(plan: &ExperimentPlan, family: Family, n: usize, repeat: usize, dataset: usize) -> PathBuf {
    plan.probs_dir(family, n, repeat)
        .join(format!("{}.indices", family.dataset_name(dataset)))
}

/// Parses a persisted `.indices` file (one index per line).
pub fn load_indices(path: &Path) -> Result<Vec<usize>> {
    fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?
        .lines()
        .map(|l| {
            l.trim()
                .parse()
                .with_context(|| format!("{}: bad index {l:?}", path.display()))
        })
        .collect()
}

/// Evaluates every model of every family on every dataset and size. CRC is
/// computed from the probability matrices alone; labels are read afterwards
/// for the ER and CE baselines.
pub fn run_select(plan: &ExperimentPlan) -> Result<Vec<SelectionResultTable>> {
    plan.validate()?;
    write_plan(plan)?;
    // (eval size, repeat) -> rows
    let mut tables: BTreeMap<(usize, usize), Vec<DatasetResult>> = BTreeMap::new();
    let mut order: Vec<(usize, usize)> = Vec::new();
    for &family in &plan.families {
        let models = load_family_models(plan, family)?;
        let mut manifest = Manifest::load_or_default(&plan.manifest_path(family))?;
        record_seeds(plan, &mut manifest);
        let mut family_rows: BTreeMap<(usize, usize), Vec<DatasetResult>> = BTreeMap::new();
        for d in 0..NUM_DATASETS {
            let (ip, lp) = existing_dataset_paths(plan, family, d, Split::Test)?;
            let images = read_idx_images::<f64>(&ip)?;
            let full = model_probabilities(&models, &images)?;
            let labels = read_idx_labels(&lp, CLASSES)?;
            ensure!(
                labels.len() == images.len(),
                "{}: label count differs from image count",
                lp.display()
            );
            let total = images.len();
            for &n in &plan.eval_sizes {
                ensure!(
                    n <= total,
                    "eval size {n} exceeds the {total} test images of {}",
                    family.dataset_name(d)
                );
                for r in 0..draws_for(plan, n, total) {
                    let tag = run_tag(n, r);
                    let (probs, labels_n) = if n == total {
                        (full.clone(), labels.clone())
                    } else {
                        let idx = subsample_indices(plan.subsample_seed, family, d, n, r, total);
                        let text: String = idx.iter().map(|i| format!("{i}\n")).collect();
                        let ipath = indices_path(plan, family, n, r, d);
                        fs::create_dir_all(plan.probs_dir(family, n, r))?;
                        fs::write(&ipath, &text)?;
                        manifest.insert(
                            format!("subsample.{tag}.{}.sha256", family.dataset_name(d)),
                            sha256_hex(text.as_bytes()),
                        );
                        let probs = full
                            .iter()
                            .map(|p| p.select_rows(&idx))
                            .collect::<Result<Vec<ProbabilityMatrix<f64>>, _>>()?;
                        (probs, labels.select(&idx))
                    };
                    for (k, p) in probs.iter().enumerate() {
                        let path = probs_path(plan, family, n, r, d, k);
                        save_probs(p, &path)?;
                        manifest.insert(
                            format!("probs.{tag}.{}.M{k}.sha256", family.dataset_name(d)),
                            sha256_file(&path)?,
                        );
                    }
                    let crc = crc_scores(&probs)?;
                    let er = probs
                        .iter()
                        .map(|p| error_rate(p, &labels_n))
                        .collect::<Result<Vec<_>, _>>()?;
                    let ce = probs
                        .iter()
                        .map(|p| cross_entropy(p, &labels_n))
                        .collect::<Result<Vec<_>, _>>()?;
                    let row = DatasetResult::new(family, d, [crc.scores(), er, ce]);
                    info!(
                        "{} {tag}: CRC->M{} ER->M{} CE->M{}",
                        family.dataset_name(d),
                        row.selected[0],
                        row.selected[1],
                        row.selected[2]
                    );
                    family_rows.entry((n, r)).or_default().push(row);
                    if !order.contains(&(n, r)) {
                        order.push((n, r));
                    }
                }
            }
        }
        for (&(n, r), rows) in &family_rows {
            let t = SelectionResultTable {
                eval_size: n,
                repeat: r,
                rows: rows.clone(),
            };
            let path = plan.results_path(family, n, r);
            fs::create_dir_all(path.parent().expect("results dir"))?;
            fs::write(&path, t.to_csv())?;
            manifest.insert(format!("results.{}.sha256", t.tag()), sha256_file(&path)?);
        }
        manifest.save(&plan.manifest_path(family))?;
        for (key, rows) in family_rows {
            tables.entry(key).or_default().extend(rows);
        }
    }
    Ok(order
        .into_iter()
        .map(|(n, r)| SelectionResultTable {
            eval_size: n,
            repeat: r,
            rows: tables.remove(&(n, r)).unwrap_or_default(),
        })
        .collect())
}

/// Per-family result tables found on disk, merged across families, in plan
/// order of eval sizes and then repeats.
pub fn load_results(plan: &ExperimentPlan) -> Result<Vec<SelectionResultTable>> {
    let mut out = Vec::new();
    for &n in &plan.eval_sizes {
        for r in 0..plan.repeats.max(1) {
            let paths: Vec<PathBuf> = plan.families.iter().map(|&f| plan.results_path(f, n, r)).collect();
            let present = paths.iter().filter(|p| p.is_file()).count();
            if present == 0 {
                if r == 0 {
                    bail!("no results for N={n} in {}: run `select` first", paths[0].display());
                }
                continue;
            }
            if present < paths.len() {
                warn!("results for {} missing for some families", run_tag(n, r));
            }
            let tables = paths
                .iter()
                .filter(|p| p.is_file())
                .map(|p| {
                    let text = fs::read_to_string(p)?;
                    SelectionResultTable::from_csv(&text).with_context(|| format!("parsing {}", p.display()))
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(merge(tables)?);
        }
    }
    Ok(out)
}

/// Writes combined CSVs, aligned tables and the summary under `report/`.
pub fn run_report(plan: &ExperimentPlan) -> Result<ReportFiles> {
    let tables = load_results(plan)?;
    let files = write_report(&tables, &plan.report_dir())?;
    for t in &tables {
        for line in t.summary().lines() {
            info!("{line}");
        }
    }
    Ok(files)
}

/// generate, train, select, report.
pub fn run_all(plan: &ExperimentPlan) -> Result<ReportFiles> {
    run_generate(plan)?;
    run_train(plan)?;
    run_select(plan)?;
    run_report(plan)
}

/// Test images of `D_index` with no labels attached.
pub fn read_test_images(plan: &ExperimentPlan, family: Family, index: usize) -> Result<Vec<crc_core::Image<f64>>> {
    let (ip, _) = dataset_paths(&plan.datasets_dir(family), &family.dataset_name(index), Split::Test);
    read_idx_images(&ip).map_err(|e| anyhow!("{}: {e}", ip.display()))
}
