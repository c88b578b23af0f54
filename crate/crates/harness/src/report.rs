//! Selection result tables: CSV, aligned text, and summary lines.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use crate::plan::{run_tag, Family};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    /// Label-free; higher is better.
    Crc,
    /// Error rate; lower is better.
    Er,
    /// Cross-entropy; lower is better.
    Ce,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Crc, Metric::Er, Metric::Ce];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Crc => "CRC",
            Metric::Er => "ER",
            Metric::Ce => "CE",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "CRC" => Metric::Crc,
            "ER" => Metric::Er,
            "CE" => Metric::Ce,
            _ => bail!("unknown metric {s:?}"),
        })
    }

    /// Index of the best model; ties go to the lowest index.
    pub fn select(self, values: &[f64]) -> usize {
        let mut best = 0;
        for (i, &v) in values.iter().enumerate().skip(1) {
            let better = match self {
                Metric::Crc => v > values[best],
                Metric::Er | Metric::Ce => v < values[best],
            };
            if better {
                best = i;
            }
        }
        best
    }
}

/// Every metric for every model on one evaluation dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetResult {
    pub family: Family,
    pub dataset_index: usize,
    pub ground_truth: usize,
    /// `values[m][k]`: metric `Metric::ALL[m]` of model `k`.
    pub values: [Vec<f64>; 3],
    pub selected: [usize; 3],
}

impl DatasetResult {
    pub fn new(family: Family, dataset_index: usize, values: [Vec<f64>; 3]) -> Self {
        let selected = [0, 1, 2].map(|m| Metric::ALL[m].select(&values[m]));
        Self {
            family,
            dataset_index,
            ground_truth: dataset_index,
            values,
            selected,
        }
    }

    pub fn dataset_name(&self) -> String {
        self.family.dataset_name(self.dataset_index)
    }

    pub fn metric(&self, m: Metric) -> &[f64] {
        &self.values[m as usize]
    }

    pub fn selected_by(&self, m: Metric) -> usize {
        self.selected[m as usize]
    }

    pub fn correct(&self, m: Metric) -> bool {
        self.selected_by(m) == self.ground_truth
    }

    pub fn num_models(&self) -> usize {
        self.values[0].len()
    }
}

/// All datasets evaluated at one sample size (and subsample draw).
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResultTable {
    pub eval_size: usize,
    pub repeat: usize,
    pub rows: Vec<DatasetResult>,
}

pub const CSV_HEADER: &str = "family,dataset,eval_size,repeat,metric,model,value,selected,ground_truth";

impl SelectionResultTable {
    pub fn tag(&self) -> String {
        run_tag(self.eval_size, self.repeat)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            for m in Metric::ALL {
                for (k, v) in r.metric(m).iter().enumerate() {
                    writeln!(
                        out,
                        "{},{},{},{},{},M{},{:?},{},M{}",
                        r.family,
                        r.dataset_name(),
                        self.eval_size,
                        self.repeat,
                        m.name(),
                        k,
                        v,
                        u8::from(r.selected_by(m) == k),
                        r.ground_truth
                    )
                    .expect("string write");
                }
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            bail!("unexpected CSV header");
        }
        let mut eval_size = None;
        let mut repeat = None;
        // (family, dataset) -> per-metric values
        let mut rows: Vec<(Family, usize, [Vec<f64>; 3])> = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                bail!("CSV line {}: expected 9 fields", i + 2);
            }
            let family: Family = f[0].parse()?;
            let index: usize = f[1]
                .rsplit_once("-D")
                .and_then(|(_, d)| d.parse().ok())
                .with_context(|| format!("CSV line {}: bad dataset {:?}", i + 2, f[1]))?;
            let (n, rep): (usize, usize) = (f[2].parse()?, f[3].parse()?);
            if *eval_size.get_or_insert(n) != n || *repeat.get_or_insert(rep) != rep {
                bail!("CSV line {}: mixed eval sizes or repeats", i + 2);
            }
            let metric = Metric::parse(f[4])?;
            let model: usize = f[5].trim_start_matches('M').parse()?;
            let value: f64 = f[6].parse()?;
            let pos = match rows.iter().position(|(fa, d, _)| *fa == family && *d == index) {
                Some(p) => p,
                None => {
                    rows.push((family, index, Default::default()));
                    rows.len() - 1
                }
            };
            let vals = &mut rows[pos].2[metric as usize];
            if vals.len() != model {
                bail!("CSV line {}: models out of order", i + 2);
            }
            vals.push(value);
        }
        Ok(Self {
            eval_size: eval_size.context("empty CSV")?,
            repeat: repeat.unwrap_or(0),
            rows: rows.into_iter().map(|(f, d, v)| DatasetResult::new(f, d, v)).collect(),
        })
    }

    /// Aligned text blocks: one block per dataset, one row per metric, `*`
    /// marking each metric's selection.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "Model selection metrics, N = {} test images per dataset{}",
            self.eval_size,
            if self.repeat > 0 {
                format!(" (draw {})", self.repeat)
            } else {
                String::new()
            }
        )
        .unwrap();
        writeln!(out, "'*' marks the model selected by each metric; CRC uses no labels.").unwrap();
        for r in &self.rows {
            writeln!(out).unwrap();
            writeln!(out, "{}  (ground truth M{})", r.dataset_name(), r.ground_truth).unwrap();
            let mut header = format!("{:<6}", "");
            for k in 0..r.num_models() {
                write!(header, "{:>12}", format!("M{k}")).unwrap();
            }
            writeln!(out, "{}", header.trim_end()).unwrap();
            for m in Metric::ALL {
                let mut line = format!("{:<6}", m.name());
                for (k, v) in r.metric(m).iter().enumerate() {
                    let mark = if r.selected_by(m) == k { "*" } else { " " };
                    write!(line, "{:>11.4}{mark}", v).unwrap();
                }
                writeln!(out, "{}", line.trim_end()).unwrap();
            }
        }
        out
    }

    pub fn correct_count(&self, m: Metric) -> usize {
        self.rows.iter().filter(|r| r.correct(m)).count()
    }

    pub fn agreement_with_crc(&self, m: Metric) -> usize {
        self.rows
            .iter()
            .filter(|r| r.selected_by(m) == r.selected_by(Metric::Crc))
            .count()
    }

    /// Datasets whose selected CRC score lies outside `[0, 1]`.
    pub fn score_range_violations(&self) -> Vec<(String, f64)> {
        self.rows
            .iter()
            .map(|r| (r.dataset_name(), r.metric(Metric::Crc)[r.selected_by(Metric::Crc)]))
            .filter(|(_, s)| !(0.0..=1.0).contains(s))
            .collect()
    }

    pub fn summary(&self) -> String {
        let n = self.rows.len();
        let label = match self.repeat {
            0 => format!("N={}", self.eval_size),
            r => format!("N={} draw {r}", self.eval_size),
        };
        let mut out = format!(
            "{label}: CRC correct in {}/{n} datasets; ER in {}/{n}; CE in {}/{n}\n",
            self.correct_count(Metric::Crc),
            self.correct_count(Metric::Er),
            self.correct_count(Metric::Ce)
        );
        writeln!(
            out,
            "{label}: ER agrees with CRC in {}/{n}; CE agrees with CRC in {}/{n}",
            self.agreement_with_crc(Metric::Er),
            self.agreement_with_crc(Metric::Ce)
        )
        .unwrap();
        let violations = self.score_range_violations();
        if violations.is_empty() {
            writeln!(out, "{label}: selected CRC score within [0, 1] on all {n} datasets").unwrap();
        } else {
            let list: Vec<String> = violations.iter().map(|(d, s)| format!("{d}={s}")).collect();
            writeln!(out, "{label}: selected CRC score OUTSIDE [0, 1]: {}", list.join(", ")).unwrap();
        }
        out
    }
}

/// Concatenates per-family tables of the same size/draw, families in order.
pub fn merge(tables: Vec<SelectionResultTable>) -> Result<SelectionResultTable> {
    let mut it = tables.into_iter();
    let mut merged = it.next().context("no result tables")?;
    for t in it {
        if t.eval_size != merged.eval_size || t.repeat != merged.repeat {
            bail!("cannot merge {} into {}", t.tag(), merged.tag());
        }
        merged.rows.extend(t.rows);
    }
    merged.rows.sort_by_key(|r| (r.family, r.dataset_index));
    Ok(merged)
}

/// Files written by [`write_report`].
#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub csv: Vec<PathBuf>,
    pub text: Vec<PathBuf>,
    pub summary: PathBuf,
}

/// Writes `selection_<tag>.csv`, `tables_<tag>.txt` per table and one
/// `summary.txt`.
pub fn write_report(tables: &[SelectionResultTable], dir: &Path) -> Result<ReportFiles> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut files = ReportFiles {
        csv: Vec::new(),
        text: Vec::new(),
        summary: dir.join("summary.txt"),
    };
    let mut summary = String::new();
    for t in tables {
        let csv = dir.join(format!("selection_{}.csv", t.tag()));
        fs::write(&csv, t.to_csv())?;
        let txt = dir.join(format!("tables_{}.txt", t.tag()));
        fs::write(&txt, t.to_text())?;
        summary.push_str(&t.summary());
        files.csv.push(csv);
        files.text.push(txt);
    }
    fs::write(&files.summary, summary)?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> SelectionResultTable {
        let rows = (0..5)
            .map(|d| {
                let crc: Vec<f64> = (0..5)
                    .map(|k| if k == d { 0.05 } else { -0.05 - k as f64 * 0.01 })
                    .collect();
                let er: Vec<f64> = (0..5).map(|k| if k == (d + 1) % 5 { 0.01 } else { 0.02 }).collect();
                let ce: Vec<f64> = (0..5).map(|k| if k == d { 0.1 } else { 0.3 }).collect();
                DatasetResult::new(Family::Mnist, d, [crc, er, ce])
            })
            .collect();
        SelectionResultTable {
            eval_size: 160,
            repeat: 0,
            rows,
        }
    }

    #[test]
    fn selection_directions_and_ties() {
        assert_eq!(Metric::Crc.select(&[0.1, 0.3, 0.3]), 1);
        assert_eq!(Metric::Er.select(&[0.2, 0.1, 0.1]), 1);
        assert_eq!(Metric::Ce.select(&[0.2, 0.2]), 0);
    }

    #[test]
    fn csv_shape_and_roundtrip() {
        let t = table();
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 1 + 5 * 3 * 5);
        for d in 0..5 {
            for m in ["CRC", "ER", "CE"] {
                let marked = csv
                    .lines()
                    .filter(|l| {
                        l.contains(&format!("MNIST-D{d},"))
                            && l.contains(&format!(",{m},"))
                            && l.ends_with(&format!(",1,M{d}"))
                    })
                    .count();
                assert_eq!(marked, 1, "D{d} {m}");
            }
        }
        assert_eq!(SelectionResultTable::from_csv(&csv).unwrap(), t);
    }

    #[test]
    fn summary_counts() {
        let t = table();
        assert_eq!(t.correct_count(Metric::Crc), 5);
        assert_eq!(t.correct_count(Metric::Er), 0);
        let s = t.summary();
        assert!(s.starts_with("N=160: CRC correct in 5/5 datasets; ER in 0/5; CE in 5/5\n"));
        assert!(s.contains("within [0, 1]"));
    }

    #[test]
    fn text_table_marks_one_model_per_metric() {
        let text = table().to_text();
        let crc_lines: Vec<&str> = text.lines().filter(|l| l.starts_with("CRC")).collect();
        assert_eq!(crc_lines.len(), 5);
        assert!(crc_lines.iter().all(|l| l.matches('*').count() == 1));
        assert!(text.contains("MNIST-D3  (ground truth M3)"));
    }

    #[test]
    fn merge_orders_families() {
        let mut fashion = table();
        for r in &mut fashion.rows {
            r.family = Family::FashionMnist;
        }
        let merged = merge(vec![fashion, table()]).unwrap();
        assert_eq!(merged.rows.len(), 10);
        assert_eq!(merged.rows[0].family, Family::Mnist);
        let mut other = table();
        other.eval_size = 10;
        assert!(merge(vec![table(), other]).is_err());
    }

    #[test]
    fn range_violations_are_listed() {
        let mut t = table();
        t.rows[2].values[0][2] = 1.3;
        assert_eq!(t.score_range_violations(), vec![("MNIST-D2".to_string(), 1.3)]);
        assert!(t.summary().contains("OUTSIDE [0, 1]: MNIST-D2=1.3"));
    }
}
