use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use xstars::evaluation::ProbeReport;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const LAMBDA_FILE: &str = "lambda.csv";

/// One checkpoint on one dataset, merged over its probe reports.
#[derive(Debug, Clone)]
pub struct Row {
    pub run: String,
    pub checkpoint: String,
    pub dataset: String,
    pub config_hash: String,
    pub lambda: Option<f64>,
    pub config: BTreeMap<String, String>,
    pub knn_mean: Option<f64>,
    pub linear: BTreeMap<String, f64>,
    pub miou: Option<f64>,
}

impl Row {
    /// Headline number: k-NN mean, else full-data linear accuracy, else mIoU.
    pub fn metric(&self) -> Option<(&'static str, f64)> {
        if let Some(v) = self.knn_mean {
            return Some(("knn_mean", v));
        }
        if let Some(v) = self.linear.get("1").or_else(|| self.linear.values().next()) {
            return Some(("linear", *v));
        }
        self.miou.map(|v| ("miou", v))
    }
}

/// Run directory name of a checkpoint path `<run>/checkpoints/<epoch>`.
pub fn run_name(checkpoint: &str) -> String {
    let p = Path::new(checkpoint);
    let comps: Vec<String> = p.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
    if let Some(i) = comps.iter().rposition(|c| c == xstars::training::CHECKPOINT_DIR) {
        if i > 0 {
            return comps[i - 1].clone();
        }
    }
    p.file_name().map_or_else(|| checkpoint.to_string(), |n| n.to_string_lossy().into_owned())
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, String>) {
    match v {
        serde_json::Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

pub fn collect(input: &Path) -> Result<Vec<ProbeReport>> {
    if !input.is_dir() {
        bail!("report input {} is not a directory", input.display());
    }
    let mut files: Vec<PathBuf> = walkdir::WalkDir::new(input)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.path().extension().is_some_and(|x| x == "json"))
        .map(|e| e.into_path())
        .collect();
    files.sort();
    let mut reports = Vec::new();
    for f in files {
        match ProbeReport::load(&f) {
            Ok(r) => reports.push(r),
            Err(e) => log::debug!("skipping {}: {e}", f.display()),
        }
    }
    if reports.is_empty() {
        bail!("no probe reports found under {}", input.display());
    }
    Ok(reports)
}

/// Merges reports into rows sorted by lambda, refusing runs whose name is
/// shared by different configurations.
pub fn rows(reports: &[ProbeReport]) -> Result<Vec<Row>> {
    let mut hashes: BTreeMap<String, String> = BTreeMap::new();
    let mut merged: BTreeMap<(String, String, String), Row> = BTreeMap::new();
    for r in reports {
        let run = run_name(&r.checkpoint);
        if let Some(h) = hashes.get(&run) {
            if *h != r.config_hash {
                bail!(
                    "run `{run}` appears with two configurations ({h} and {}); rename one of the runs",
                    r.config_hash
                );
            }
        }
        hashes.insert(run.clone(), r.config_hash.clone());
        let key = (run.clone(), r.dataset.clone(), r.checkpoint.clone());
        let row = merged.entry(key).or_insert_with(|| {
            let mut config = BTreeMap::new();
            if let Some(c) = &r.train_config {
                flatten("", &serde_json::to_value(c).expect("serializable config"), &mut config);
            }
            Row {
                run,
                checkpoint: r.checkpoint.clone(),
                dataset: r.dataset.clone(),
                config_hash: r.config_hash.clone(),
                lambda: r.train_config.as_ref().map(|c| c.lambda),
                config,
                knn_mean: None,
                linear: BTreeMap::new(),
                miou: None,
            }
        });
        if let Some(k) = &r.knn {
            row.knn_mean = Some(k.mean);
        }
        for l in &r.linear {
            row.linear.insert(l.fraction.to_string(), l.accuracy);
        }
        if let Some(s) = &r.segmentation {
            row.miou = Some(s.miou);
        }
    }
    let mut rows: Vec<Row> = merged.into_values().collect();
    rows.sort_by(|a, b| {
        a.lambda
            .unwrap_or(f64::NAN)
            .total_cmp(&b.lambda.unwrap_or(f64::NAN))
            .then_with(|| a.run.cmp(&b.run))
            .then_with(|| a.dataset.cmp(&b.dataset))
    });
    Ok(rows)
}

/// Configuration keys whose values differ between rows.
pub fn delta_keys(rows: &[Row]) -> Vec<String> {
    let keys: BTreeSet<&String> = rows.iter().flat_map(|r| r.config.keys()).collect();
    keys.into_iter()
        .filter(|k| {
            let vals: BTreeSet<Option<&String>> = rows.iter().map(|r| r.config.get(*k)).collect();
            vals.len() > 1
        })
        .cloned()
        .collect()
}

/// Seed-averaged headline metric per (dataset, lambda).
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaPoint {
    pub dataset: String,
    pub lambda: f64,
    pub metric: String,
    pub mean: f64,
    pub runs: usize,
    /// `peak`, `decreasing` or `not-decreasing` past the peak; empty before.
    pub trend: String,
}

pub fn lambda_curve(rows: &[Row]) -> Vec<LambdaPoint> {
    let mut groups: BTreeMap<String, BTreeMap<u64, (f64, Vec<f64>, &'static str)>> = BTreeMap::new();
    for r in rows {
        if let (Some(l), Some((name, v))) = (r.lambda, r.metric()) {
            let e = groups
                .entry(r.dataset.clone())
                .or_default()
                .entry(l.to_bits())
                .or_insert((l, Vec::new(), name));
            e.1.push(v);
        }
    }
    let mut out = Vec::new();
    for (dataset, by_lambda) in groups {
        let mut pts: Vec<(f64, f64, usize, &str)> = by_lambda
            .into_values()
            .map(|(l, v, name)| (l, v.iter().sum::<f64>() / v.len() as f64, v.len(), name))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let peak = pts
            .iter()
            .enumerate()
            .fold(0, |best, (i, p)| if p.1 > pts[best].1 { i } else { best });
        for (i, (l, mean, runs, name)) in pts.iter().enumerate() {
            let trend = if i == peak {
                "peak"
            } else if i > peak {
                if *mean <= pts[i - 1].1 {
                    "decreasing"
                } else {
                    "not-decreasing"
                }
            } else {
                ""
            };
            out.push(LambdaPoint {
                dataset: dataset.clone(),
                lambda: *l,
                metric: name.to_string(),
                mean: *mean,
                runs: *runs,
                trend: trend.into(),
            });
        }
    }
    out
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn write_tables(rows: &[Row], out: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let deltas = delta_keys(rows);
    let fractions: BTreeSet<&String> = rows.iter().flat_map(|r| r.linear.keys()).collect();
    let summary = out.join(SUMMARY_FILE);
    let mut w = csv::Writer::from_path(&summary)?;
    let mut header = vec!["run".to_string(), "dataset".into(), "checkpoint".into(), "config_hash".into()];
    header.extend(deltas.iter().cloned());
    header.push("knn_mean".into());
    header.extend(fractions.iter().map(|f| format!("linear@{f}")));
    header.push("miou".into());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.run.clone(), r.dataset.clone(), r.checkpoint.clone(), r.config_hash.clone()];
        rec.extend(deltas.iter().map(|k| r.config.get(k).cloned().unwrap_or_default()));
        rec.push(fmt(r.knn_mean));
        rec.extend(fractions.iter().map(|f| fmt(r.linear.get(*f).copied())));
        rec.push(fmt(r.miou));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let lambda = out.join(LAMBDA_FILE);
    let mut w = csv::Writer::from_path(&lambda)?;
    w.write_record(["dataset", "lambda", "metric", "mean", "runs", "trend"])?;
    for p in lambda_curve(rows) {
        w.write_record([
            p.dataset,
            p.lambda.to_string(),
            p.metric,
            format!("{:.6}", p.mean),
            p.runs.to_string(),
            p.trend,
        ])?;
    }
    w.flush()?;
    Ok((summary, lambda))
}

pub fn run(input: &Path, out: Option<&Path>) -> Result<()> {
    let reports = collect(input)?;
    let rows = rows(&reports)?;
    let deltas = delta_keys(&rows);
    println!("{} runs; differing keys: {}", rows.len(), if deltas.is_empty() { "none".into() } else { deltas.join(", ") });
    for r in &rows {
        let (name, v) = r.metric().unwrap_or(("none", f64::NAN));
        println!(
            "  {:<24} {:<12} lambda={:<6} {name}={v:.4}",
            r.run,
            r.dataset,
            r.lambda.map_or("-".into(), |l| l.to_string())
        );
    }
    for p in lambda_curve(&rows).iter().filter(|p| !p.trend.is_empty()) {
        println!("  [{}] lambda {}: {} {:.4} ({})", p.dataset, p.lambda, p.metric, p.mean, p.trend);
    }
    let (summary, lambda) = write_tables(&rows, out.unwrap_or(input))?;
    println!("wrote {} and {}", summary.display(), lambda.display());
    Ok(())
}
