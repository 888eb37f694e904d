//! Batch evaluation over scene sets and CSV reports.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::metrics::mean_std;
use super::pipeline::{run_method, EnhancementMethod, MethodParams, MetricsRow};
use crate::error::{Error, Result};
use crate::simulator::{load_scene, Manifest, Scene, SnrSpec};

/// Environment variable capping the number of evaluation workers.
pub const THREADS_ENV: &str = "CLEANSTREAM_THREADS";

pub const ROW_COLUMNS: [&str; 12] = [
    "scene_id",
    "snr",
    "num_mics",
    "method",
    "domain",
    "input_snr_db",
    "output_snr_db",
    "snr_improvement_db",
    "si_sdr_db",
    "lsd_db",
    "mask_mse",
    "status",
];

const SUMMARY_METRICS: [&str; 6] = [
    "input_snr_db",
    "output_snr_db",
    "snr_improvement_db",
    "si_sdr_db",
    "lsd_db",
    "mask_mse",
];

/// A scene to evaluate, or the reason it could not be loaded.
pub struct SceneInput {
    pub id: String,
    pub snr: SnrSpec,
    pub num_mics: usize,
    pub scene: Result<Scene>,
}

impl SceneInput {
    pub fn loaded(id: impl Into<String>, scene: Scene) -> Self {
        SceneInput {
            id: id.into(),
            snr: scene.config.snr,
            num_mics: scene.num_mics(),
            scene: Ok(scene),
        }
    }
}

/// Loads every scene listed in the manifest at `path`. Scenes whose audio
/// cannot be read are kept as failures so the run can continue.
pub fn load_manifest_scenes(path: &Path) -> Result<Vec<SceneInput>> {
    let manifest = Manifest::load(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    Ok(manifest
        .scenes
        .par_iter()
        .map(|entry| SceneInput {
            id: entry.id.clone(),
            snr: entry.snr,
            num_mics: entry.config.geometry.num_mics(),
            scene: load_scene(entry, &base),
        })
        .collect())
}

/// Worker count from [`THREADS_ENV`], if set to a positive integer.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::InvalidConfig(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
        },
    }
}

fn snr_order(a: &SnrSpec, b: &SnrSpec) -> Ordering {
    a.db().total_cmp(&b.db())
}

/// Canonical row order: method, mic count, SNR, scene id.
pub fn sort_rows(rows: &mut [MetricsRow]) {
    rows.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.num_mics.cmp(&b.num_mics))
            .then(snr_order(&a.snr, &b.snr))
            .then_with(|| a.scene_id.cmp(&b.scene_id))
    });
}

/// Runs every method on every scene, once per entry of `mic_counts`
/// (`None` keeps each scene's own array). Failures become rows with an
/// error status. Rows come back in canonical order.
pub fn evaluate(
    scenes: &[SceneInput],
    methods: &[EnhancementMethod],
    mic_counts: &[Option<usize>],
    params: &MethodParams,
) -> Result<Vec<MetricsRow>> {
    let jobs: Vec<(&SceneInput, EnhancementMethod, Option<usize>)> = scenes
        .iter()
        .flat_map(|s| {
            methods
                .iter()
                .flat_map(move |&m| mic_counts.iter().map(move |&n| (s, m, n)))
        })
        .collect();
    let run = || -> Vec<MetricsRow> {
        jobs.par_iter()
            .map(|&(input, method, mics)| {
                let num_mics = mics.unwrap_or(input.num_mics);
                let result = input.scene.as_ref().map_err(clone_error).and_then(|scene| {
                    let params = MethodParams {
                        num_mics: mics,
                        ..params.clone()
                    };
                    run_method(scene, &input.id, method, &params)
                });
                match result {
                    Ok(out) => out.metrics,
                    Err(e) => MetricsRow::failed(&input.id, input.snr, num_mics, method, &e),
                }
            })
            .collect()
    };
    let mut rows = match thread_cap()? {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?
            .install(run),
        None => run(),
    };
    sort_rows(&mut rows);
    Ok(rows)
}

/// Load failures are shared across jobs, so they are re-raised by message.
fn clone_error(e: &Error) -> Error {
    Error::InvalidConfig(format!("scene unavailable: {e}"))
}

/// Fixed-point value with six decimals; non-finite values are spelled
/// `inf`, `-inf` and `nan`.
pub fn format_value(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        let s = format!("{v:.6}");
        if s == "-0.000000" {
            "0.000000".into()
        } else {
            s
        }
    }
}

fn row_record(row: &MetricsRow) -> Vec<String> {
    vec![
        row.scene_id.clone(),
        row.snr.to_string(),
        row.num_mics.to_string(),
        row.method.to_string(),
        row.domain.name().to_string(),
        format_value(row.input_snr_db),
        format_value(row.output_snr_db),
        format_value(row.snr_improvement_db),
        format_value(row.si_sdr_db),
        format_value(row.lsd_db),
        format_value(row.mask_mse),
        match &row.error {
            None => "ok".into(),
            Some(e) => format!("error: {e}"),
        },
    ]
}

fn metric_values(row: &MetricsRow) -> [f64; 6] {
    [
        row.input_snr_db,
        row.output_snr_db,
        row.snr_improvement_db,
        row.si_sdr_db,
        row.lsd_db,
        row.mask_mse,
    ]
}

/// Aggregates for one (method, mic count, SNR) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: EnhancementMethod,
    pub num_mics: usize,
    pub snr: SnrSpec,
    pub scenes: usize,
    pub failures: usize,
    /// Mean and population std of each metric over successful rows, in
    /// the order input SNR, output SNR, improvement, SI-SDR, LSD, mask MSE.
    /// Non-finite values are left out.
    pub stats: [(f64, f64); 6],
}

impl SummaryRow {
    pub fn improvement(&self) -> (f64, f64) {
        self.stats[2]
    }
}

/// Per-cell means and standard deviations, in canonical order.
pub fn summarize(rows: &[MetricsRow]) -> Vec<SummaryRow> {
    let mut cells: BTreeMap<(EnhancementMethod, usize, String), Vec<&MetricsRow>> = BTreeMap::new();
    for row in rows {
        cells
            .entry((row.method, row.num_mics, row.snr.to_string()))
            .or_default()
            .push(row);
    }
    let mut out: Vec<SummaryRow> = cells
        .into_values()
        .map(|cell| {
            let ok: Vec<&MetricsRow> = cell.iter().copied().filter(|r| r.error.is_none()).collect();
            let stats = std::array::from_fn(|i| {
                let values: Vec<f64> = ok.iter().map(|r| metric_values(r)[i]).collect();
                mean_std(&values)
            });
            SummaryRow {
                method: cell[0].method,
                num_mics: cell[0].num_mics,
                snr: cell[0].snr,
                scenes: cell.len(),
                failures: cell.len() - ok.len(),
                stats,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.num_mics.cmp(&b.num_mics))
            .then(snr_order(&a.snr, &b.snr))
    });
    out
}

fn write_records(path: &Path, header: &[String], records: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut writer = csv::Writer::from_path(path).map_err(io)?;
    writer.write_record(header).map_err(io)?;
    for record in records {
        writer.write_record(&record).map_err(io)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Writes `<method>.csv` for every method present plus `summary.csv` into
/// `dir`, returning the paths written.
pub fn write_report(rows: &[MetricsRow], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut sorted = rows.to_vec();
    sort_rows(&mut sorted);
    let header: Vec<String> = ROW_COLUMNS.iter().map(|c| c.to_string()).collect();
    let mut written = Vec::new();
    let mut methods: Vec<EnhancementMethod> = sorted.iter().map(|r| r.method).collect();
    methods.dedup();
    for method in methods {
        let path = dir.join(format!("{method}.csv"));
        write_records(
            &path,
            &header,
            sorted.iter().filter(|r| r.method == method).map(row_record),
        )?;
        written.push(path);
    }

    let mut header: Vec<String> = ["method", "num_mics", "snr", "scenes", "failures"]
        .iter()
        .map(|c| c.to_string())
        .collect();
    for metric in SUMMARY_METRICS {
        header.push(format!("{metric}_mean"));
        header.push(format!("{metric}_std"));
    }
    let path = dir.join("summary.csv");
    write_records(
        &path,
        &header,
        summarize(&sorted).iter().map(|s| {
            let mut rec = vec![
                s.method.to_string(),
                s.num_mics.to_string(),
                s.snr.to_string(),
                s.scenes.to_string(),
                s.failures.to_string(),
            ];
            for (mean, std) in s.stats {
                rec.push(format_value(mean));
                rec.push(format_value(std));
            }
            rec
        }),
    )?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::pipeline::SnrDomain;

    fn row(id: &str, method: EnhancementMethod, snr: f64, improvement: f64) -> MetricsRow {
        MetricsRow {
            scene_id: id.into(),
            snr: SnrSpec::Db(snr),
            num_mics: 3,
            method,
            domain: SnrDomain::Time,
            input_snr_db: snr,
            output_snr_db: snr + improvement,
            snr_improvement_db: improvement,
            si_sdr_db: 1.0,
            lsd_db: 2.0,
            mask_mse: f64::NAN,
            error: None,
        }
    }

    #[test]
    fn value_formatting() {
        assert_eq!(format_value(1.0 / 3.0), "0.333333");
        assert_eq!(format_value(-1e-9), "0.000000");
        assert_eq!(format_value(f64::INFINITY), "inf");
        assert_eq!(format_value(f64::NAN), "nan");
    }

    #[test]
    fn rows_sort_canonically() {
        let mut rows = vec![
            row("b", EnhancementMethod::Cleaner, 6.0, 1.0),
            row("a", EnhancementMethod::Cleaner, 6.0, 1.0),
            row("c", EnhancementMethod::Cleaner, -12.0, 1.0),
            row("z", EnhancementMethod::Passthrough, 12.0, 0.0),
        ];
        sort_rows(&mut rows);
        let ids: Vec<&str> = rows.iter().map(|r| r.scene_id.as_str()).collect();
        assert_eq!(ids, ["z", "c", "a", "b"]);
    }

    #[test]
    fn summary_matches_rows() {
        let mut rows = vec![
            row("a", EnhancementMethod::Cleaner, 0.0, 1.0),
            row("b", EnhancementMethod::Cleaner, 0.0, 4.0),
            row("c", EnhancementMethod::Cleaner, 6.0, 2.0),
        ];
        let mut failed = row("d", EnhancementMethod::Cleaner, 0.0, 100.0);
        failed.error = Some("boom".into());
        rows.push(failed);
        let summary = summarize(&rows);
        assert_eq!(summary.len(), 2);
        assert_eq!(summary[0].scenes, 3);
        assert_eq!(summary[0].failures, 1);
        assert_eq!(summary[0].improvement(), (2.5, 1.5));
        assert!(summary[0].stats[5].0.is_nan());
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            row("a", EnhancementMethod::Cleaner, 0.0, 1.0),
            row("a", EnhancementMethod::Passthrough, 0.0, 0.0),
        ];
        let files = write_report(&rows, dir.path()).unwrap();
        let names: Vec<String> = files
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["passthrough.csv", "cleaner.csv", "summary.csv"]);
        let text = std::fs::read_to_string(&files[1]).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), ROW_COLUMNS.join(","));
        assert_eq!(
            lines.next().unwrap(),
            "a,0,3,cleaner,time,0.000000,1.000000,1.000000,1.000000,2.000000,nan,ok"
        );
    }
}
