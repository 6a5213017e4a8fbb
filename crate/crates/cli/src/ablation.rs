//! Ablation grids over the student heads, the sampling ratio and the band
//! distance, aggregated as medians over seeds.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use nucseg::pipeline::train::TrainedModel;
use nucseg::pipeline::{run_from_teacher, train_teacher, Dataset, HeadFlags, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Heads,
    Alpha,
    Distance,
}

impl FromStr for Axis {
    type Err = nucseg::Error;

    fn from_str(s: &str) -> nucseg::Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "heads" => Ok(Axis::Heads),
            "alpha" => Ok(Axis::Alpha),
            "distance" | "d" => Ok(Axis::Distance),
            other => Err(nucseg::Error::InvalidArgument(format!("unknown ablation axis {other:?}"))),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Heads => "heads",
            Axis::Alpha => "alpha",
            Axis::Distance => "distance",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "value", rename_all = "lowercase")]
pub enum AxisValue {
    Heads(HeadFlags),
    Alpha(f64),
    Distance(f64),
}

impl AxisValue {
    pub fn label(&self) -> String {
        match self {
            AxisValue::Heads(h) => h.to_string(),
            AxisValue::Alpha(a) => format!("{a}"),
            AxisValue::Distance(d) => format!("{d}"),
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match *self {
            AxisValue::Heads(h) => cfg.heads = h,
            AxisValue::Alpha(a) => cfg.alpha = a,
            AxisValue::Distance(d) => cfg.d = d,
        }
        cfg
    }

    pub fn parse(axis: Axis, s: &str) -> nucseg::Result<Self> {
        let num = || {
            s.trim()
                .parse::<f64>()
                .map_err(|_| nucseg::Error::InvalidArgument(format!("not a number: {s:?}")))
        };
        Ok(match axis {
            Axis::Heads => AxisValue::Heads(s.parse()?),
            Axis::Alpha => AxisValue::Alpha(num()?),
            Axis::Distance => AxisValue::Distance(num()?),
        })
    }
}

pub fn default_values(axis: Axis) -> Vec<AxisValue> {
    match axis {
        Axis::Heads => ["nmh", "lrd", "nmh+lrd", "nmh+lrd+crc"]
            .iter()
            .map(|s| AxisValue::Heads(s.parse().expect("valid head list")))
            .collect(),
        Axis::Alpha => [0.1, 0.3, 0.5, 0.7].into_iter().map(AxisValue::Alpha).collect(),
        Axis::Distance => [0.0, 2.0, 4.0, 6.0].into_iter().map(AxisValue::Distance).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub axis: Axis,
    pub values: Vec<AxisValue>,
    pub seeds: Vec<u64>,
    pub base: TrainConfig,
}

impl AblationSpec {
    pub fn new(axis: Axis, base: TrainConfig, seeds: Vec<u64>) -> Self {
        Self {
            axis,
            values: default_values(axis),
            seeds,
            base,
        }
    }

    pub fn validate(&self) -> nucseg::Result<()> {
        if self.values.is_empty() || self.seeds.is_empty() {
            return Err(nucseg::Error::InvalidArgument("ablation needs at least one value and one seed".into()));
        }
        for v in &self.values {
            v.apply(&self.base).validate()?;
        }
        Ok(())
    }

    /// `(row, config)` for every value x seed, value-major.
    pub fn cells(&self) -> Vec<(usize, TrainConfig)> {
        let mut out = Vec::with_capacity(self.values.len() * self.seeds.len());
        for (row, v) in self.values.iter().enumerate() {
            for &seed in &self.seeds {
                out.push((row, TrainConfig { seed, ..v.apply(&self.base) }));
            }
        }
        out
    }
}

/// Dice / AJI / PQ of one run on the held-out split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub dice: f64,
    pub aji: f64,
    pub pq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub label: String,
    pub seed: u64,
    pub scores: Option<Scores>,
    pub error: Option<String>,
    pub secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub value: AxisValue,
    pub label: String,
    pub median: Option<Scores>,
    pub runs: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub axis: Axis,
    pub split: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<Row>,
    pub cells: Vec<Cell>,
}

impl AblationResult {
    pub fn row(&self, label: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.label == label)
    }
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

fn median_scores(scores: &[Scores]) -> Option<Scores> {
    let pick = |f: fn(&Scores) -> f64| median(&mut scores.iter().map(f).collect::<Vec<_>>());
    Some(Scores {
        dice: pick(|s| s.dice)?,
        aji: pick(|s| s.aji)?,
        pq: pick(|s| s.pq)?,
    })
}

/// Runs every cell through `run_cell`; a failing cell is recorded and the
/// grid continues.
pub fn run_grid<F>(spec: &AblationSpec, split: &str, mut run_cell: F) -> nucseg::Result<AblationResult>
where
    F: FnMut(&TrainConfig) -> anyhow::Result<Scores>,
{
    spec.validate()?;
    let mut cells = Vec::new();
    let mut per_row: BTreeMap<usize, Vec<Scores>> = BTreeMap::new();
    for (row, cfg) in spec.cells() {
        let label = spec.values[row].label();
        let start = Instant::now();
        let outcome = run_cell(&cfg);
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(s) => {
                log::info!("{label} seed {}: dice {:.2} aji {:.2} pq {:.2} ({secs:.0}s)", cfg.seed, s.dice, s.aji, s.pq);
                per_row.entry(row).or_default().push(s);
                cells.push(Cell {
                    label,
                    seed: cfg.seed,
                    scores: Some(s),
                    error: None,
                    secs,
                });
            }
            Err(e) => {
                log::warn!("{label} seed {} failed: {e:#}", cfg.seed);
                cells.push(Cell {
                    label,
                    seed: cfg.seed,
                    scores: None,
                    error: Some(format!("{e:#}")),
                    secs,
                });
            }
        }
    }
    let rows = spec
        .values
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let ok = per_row.get(&k).map(Vec::as_slice).unwrap_or(&[]);
            Row {
                value: *v,
                label: v.label(),
                median: median_scores(ok),
                runs: spec.seeds.len(),
                failed: spec.seeds.len() - ok.len(),
            }
        })
        .collect();
    Ok(AblationResult {
        axis: spec.axis,
        split: split.to_string(),
        seeds: spec.seeds.clone(),
        rows,
        cells,
    })
}

/// Full pipeline per cell, scored on the test partition. Teachers are shared
/// between cells of the same seed since none of the axes reaches the teacher.
pub fn run_ablation(ds: &Dataset, spec: &AblationSpec) -> nucseg::Result<AblationResult> {
    let mut teachers: BTreeMap<u64, TrainedModel> = BTreeMap::new();
    run_grid(spec, "test", |cfg| {
        let start = Instant::now();
        let teacher = match teachers.get(&cfg.seed) {
            Some(t) => t.clone(),
            None => {
                let t = train_teacher(cfg, &ds.labeled)?;
                teachers.insert(cfg.seed, t.clone());
                t
            }
        };
        let out = run_from_teacher(ds, cfg, teacher, start)?;
        let t = out.record.test;
        Ok(Scores {
            dice: t.dice,
            aji: t.aji,
            pq: t.pq,
        })
    })
}

fn fmt_cell(v: f64) -> String {
    format!("{v:.2}")
}

/// Markdown table in the layout of the corresponding ablation: head
/// check-marks for the heads axis, one value column otherwise.
pub fn format_markdown(res: &AblationResult) -> String {
    let mut s = String::new();
    match res.axis {
        Axis::Heads => {
            s.push_str("| NMH | LRD | CRC | Dice | AJI | PQ |\n|:---:|:---:|:---:|---:|---:|---:|\n");
        }
        Axis::Alpha => s.push_str("| α | Dice | AJI | PQ |\n|---:|---:|---:|---:|\n"),
        Axis::Distance => s.push_str("| d | Dice | AJI | PQ |\n|---:|---:|---:|---:|\n"),
    }
    for row in &res.rows {
        let lead = match row.value {
            AxisValue::Heads(h) => {
                let m = |b: bool| if b { "✓" } else { "" };
                format!("| {} | {} | {} |", m(h.nmh), m(h.lrd), m(h.crc))
            }
            _ => format!("| {} |", row.label),
        };
        let metrics = match (&row.median, row.failed) {
            (Some(m), 0) => format!(" {} | {} | {} |", fmt_cell(m.dice), fmt_cell(m.aji), fmt_cell(m.pq)),
            (Some(m), f) => format!(
                " {} | {} | {} | ({f}/{} failed)",
                fmt_cell(m.dice),
                fmt_cell(m.aji),
                fmt_cell(m.pq),
                row.runs
            ),
            (None, _) => " FAILED | FAILED | FAILED |".to_string(),
        };
        s.push_str(&lead);
        s.push_str(&metrics);
        s.push('\n');
    }
    s.push_str(&format!(
        "\nMedian over seeds {:?} on the {} split.\n",
        res.seeds, res.split
    ));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grids() {
        let labels: Vec<String> = default_values(Axis::Heads).iter().map(AxisValue::label).collect();
        assert_eq!(labels, ["NMH", "LRD", "NMH+LRD", "NMH+LRD+CRC"]);
        let a: Vec<String> = default_values(Axis::Alpha).iter().map(AxisValue::label).collect();
        assert_eq!(a, ["0.1", "0.3", "0.5", "0.7"]);
        let d: Vec<String> = default_values(Axis::Distance).iter().map(AxisValue::label).collect();
        assert_eq!(d, ["0", "2", "4", "6"]);
    }

    #[test]
    fn heads_grid_has_twelve_cells() {
        let spec = AblationSpec::new(Axis::Heads, TrainConfig::default(), vec![0, 1, 2]);
        let cells = spec.cells();
        assert_eq!(cells.len(), 12);
        assert_eq!((cells[0].1.heads, cells[2].1.seed), (HeadFlags::NMH, 2));
        assert_eq!((cells[3].1.heads.to_string(), cells[3].1.seed), ("LRD".to_string(), 0));
        assert_eq!(cells[11].1.heads, HeadFlags::ALL);
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }

    #[test]
    fn failing_cells_are_marked_and_siblings_run() {
        let spec = AblationSpec::new(Axis::Alpha, TrainConfig::default(), vec![0, 1, 2]);
        let mut calls = 0;
        let res = run_grid(&spec, "test", |cfg| {
            calls += 1;
            if cfg.alpha == 0.3 || (cfg.alpha == 0.5 && cfg.seed == 1) {
                anyhow::bail!("boom");
            }
            Ok(Scores {
                dice: cfg.alpha * 100.0 + cfg.seed as f64,
                aji: 0.0,
                pq: 0.0,
            })
        })
        .unwrap();
        assert_eq!(calls, 12);
        assert_eq!(res.row("0.3").unwrap().median, None);
        assert_eq!(res.row("0.3").unwrap().failed, 3);
        let r5 = res.row("0.5").unwrap();
        assert_eq!((r5.failed, r5.median.unwrap().dice), (1, 51.0));
        assert_eq!(res.row("0.7").unwrap().median.unwrap().dice, 71.0);
        let md = format_markdown(&res);
        assert!(md.contains("| 0.3 | FAILED |"));
        assert!(md.contains("(1/3 failed)"));
    }
}
