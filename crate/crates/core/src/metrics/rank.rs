//! Rank-sum comparison tables.
//!
//! Methods are ranked per `(metric, dataset)` column; ranks are totalled per
//! metric, per task (segmentation: E1 + E2, localization: mDice + mHdis) and
//! overall. Lower totals are better.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    LowerIsBetter,
    HigherIsBetter,
    /// The score already is a rank and is summed as given.
    Rank,
    /// A published rank sum, used only to cross-check the computed totals.
    Reported,
}

impl Direction {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lower" | "lower-is-better" | "lower_is_better" | "min" => Ok(Self::LowerIsBetter),
            "higher" | "higher-is-better" | "higher_is_better" | "max" => Ok(Self::HigherIsBetter),
            "rank" => Ok(Self::Rank),
            "reported" => Ok(Self::Reported),
            other => Err(Error::config(format!(
                "unknown direction `{other}` (expected lower, higher, rank or reported)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskGroup {
    Segmentation,
    Localization,
}

/// The four challenge metrics, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    E1,
    E2,
    MDice,
    MHdis,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::E1, Metric::E2, Metric::MDice, Metric::MHdis];

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "e1" => Ok(Self::E1),
            "e2" => Ok(Self::E2),
            "mdice" => Ok(Self::MDice),
            "mhdis" => Ok(Self::MHdis),
            other => Err(Error::config(format!(
                "unknown metric `{other}` (expected E1, E2, mDice or mHdis)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::E1 => "E1",
            Metric::E2 => "E2",
            Metric::MDice => "mDice",
            Metric::MHdis => "mHdis",
        }
    }

    pub fn group(self) -> TaskGroup {
        match self {
            Metric::E1 | Metric::E2 => TaskGroup::Segmentation,
            Metric::MDice | Metric::MHdis => TaskGroup::Localization,
        }
    }
}

/// Which published total a `Reported` row refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SumKind {
    Segmentation,
    Localization,
    Total,
}

impl SumKind {
    fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "seg_rank_sum" | "segmentation" => Ok(Self::Segmentation),
            "loc_rank_sum" | "localization" => Ok(Self::Localization),
            "rank_sum" | "total" => Ok(Self::Total),
            other => Err(Error::config(format!(
                "reported row has metric `{other}` (expected seg_rank_sum, loc_rank_sum or rank_sum)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SumKind::Segmentation => "seg_rank_sum",
            SumKind::Localization => "loc_rank_sum",
            SumKind::Total => "rank_sum",
        }
    }
}

/// One row of the scores CSV: `method,metric,dataset,score,direction`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCell {
    pub method: String,
    pub metric: String,
    pub dataset: String,
    pub score: f64,
    pub direction: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Column {
    pub metric: Metric,
    pub dataset: String,
}

/// A rectangular methods × columns grid of scores.
#[derive(Debug, Clone)]
pub struct ScoreGrid {
    pub methods: Vec<String>,
    pub columns: Vec<(Column, Direction)>,
    /// `scores[method][column]`.
    pub scores: Vec<Vec<f64>>,
    pub reported: BTreeMap<(String, SumKind), f64>,
}

impl ScoreGrid {
    /// Builds the grid, rejecting ragged input (a missing or duplicated cell)
    /// and columns whose rows disagree on direction.
    pub fn from_cells(cells: &[ScoreCell]) -> Result<Self> {
        let mut methods: Vec<String> = Vec::new();
        let mut columns: BTreeMap<Column, Direction> = BTreeMap::new();
        let mut values: BTreeMap<(String, Column), f64> = BTreeMap::new();
        let mut reported = BTreeMap::new();

        for cell in cells {
            if !cell.score.is_finite() {
                return Err(Error::config(format!(
                    "{} / {} / {}: score is not finite",
                    cell.method, cell.metric, cell.dataset
                )));
            }
            if !methods.contains(&cell.method) {
                methods.push(cell.method.clone());
            }
            let direction = Direction::parse(&cell.direction)?;
            if direction == Direction::Reported {
                let kind = SumKind::parse(&cell.metric)?;
                if reported
                    .insert((cell.method.clone(), kind), cell.score)
                    .is_some()
                {
                    return Err(Error::config(format!(
                        "duplicate reported {} for {}",
                        kind.name(),
                        cell.method
                    )));
                }
                continue;
            }
            let column = Column {
                metric: Metric::parse(&cell.metric)?,
                dataset: cell.dataset.clone(),
            };
            if let Some(prev) = columns.insert(column.clone(), direction) {
                if prev != direction {
                    return Err(Error::config(format!(
                        "column {} / {} mixes directions {prev:?} and {direction:?}",
                        column.metric.name(),
                        column.dataset
                    )));
                }
            }
            if values
                .insert((cell.method.clone(), column.clone()), cell.score)
                .is_some()
            {
                return Err(Error::config(format!(
                    "ragged grid: duplicate cell for {} / {} / {}",
                    cell.method,
                    column.metric.name(),
                    column.dataset
                )));
            }
        }
        if methods.is_empty() {
            return Err(Error::EmptyInput("score grid has no methods".into()));
        }

        let columns: Vec<(Column, Direction)> = columns.into_iter().collect();
        let mut scores = Vec::with_capacity(methods.len());
        for m in &methods {
            let mut row = Vec::with_capacity(columns.len());
            for (col, _) in &columns {
                let v = values.get(&(m.clone(), col.clone())).ok_or_else(|| {
                    Error::config(format!(
                        "ragged grid: method {m} has no score for {} / {}",
                        col.metric.name(),
                        col.dataset
                    ))
                })?;
                row.push(*v);
            }
            scores.push(row);
        }
        Ok(Self {
            methods,
            columns,
            scores,
            reported,
        })
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let headers = rdr.headers()?.clone();
        let expected = ["method", "metric", "dataset", "score", "direction"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::config(format!(
                "scores CSV header must be `{}`, got `{}`",
                expected.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let cells = rdr
            .deserialize::<ScoreCell>()
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::from_cells(&cells)
    }
}

/// Ranks of `scores` where better scores get smaller ranks and tied scores
/// share the mean of the positions they occupy.
pub fn rank_column(scores: &[f64], direction: Direction) -> Vec<f64> {
    match direction {
        Direction::Rank | Direction::Reported => return scores.to_vec(),
        Direction::LowerIsBetter | Direction::HigherIsBetter => {}
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let ord = scores[a].total_cmp(&scores[b]);
        if direction == Direction::HigherIsBetter {
            ord.reverse()
        } else {
            ord
        }
    });
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // positions i..=j are 1-based ranks i+1..=j+1
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mean;
        }
        i = j + 1;
    }
    ranks
}

/// A published total that disagrees with the sum of its components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub method: String,
    pub kind: SumKind,
    pub computed: f64,
    pub reported: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodTotals {
    pub method: String,
    /// Rank totals per metric over all datasets, in [`Metric::ALL`] order.
    pub per_metric: [f64; 4],
    pub segmentation: f64,
    pub localization: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct RankTable {
    pub methods: Vec<String>,
    pub columns: Vec<(Column, Direction)>,
    /// `ranks[method][column]`.
    pub ranks: Vec<Vec<f64>>,
    pub totals: Vec<MethodTotals>,
    pub reported: BTreeMap<(String, SumKind), f64>,
    pub discrepancies: Vec<Discrepancy>,
}

pub fn rank_sum(grid: &ScoreGrid) -> Result<RankTable> {
    let k = grid.methods.len();
    if k == 0 {
        return Err(Error::EmptyInput("rank sum over zero methods".into()));
    }
    if grid.scores.len() != k || grid.scores.iter().any(|r| r.len() != grid.columns.len()) {
        return Err(Error::config("ragged score grid"));
    }
    let mut ranks = vec![vec![0.0; grid.columns.len()]; k];
    for (c, (_, dir)) in grid.columns.iter().enumerate() {
        let col: Vec<f64> = grid.scores.iter().map(|r| r[c]).collect();
        for (m, r) in rank_column(&col, *dir).into_iter().enumerate() {
            ranks[m][c] = r;
        }
    }

    let mut totals = Vec::with_capacity(k);
    let mut discrepancies = Vec::new();
    for (m, method) in grid.methods.iter().enumerate() {
        let mut per_metric = [0.0; 4];
        for (c, (col, _)) in grid.columns.iter().enumerate() {
            let idx = Metric::ALL.iter().position(|&x| x == col.metric).expect("known metric");
            per_metric[idx] += ranks[m][c];
        }
        let segmentation = per_metric[0] + per_metric[1];
        let localization = per_metric[2] + per_metric[3];
        let t = MethodTotals {
            method: method.clone(),
            per_metric,
            segmentation,
            localization,
            total: segmentation + localization,
        };
        for kind in [SumKind::Segmentation, SumKind::Localization, SumKind::Total] {
            if let Some(&reported) = grid.reported.get(&(method.clone(), kind)) {
                let computed = match kind {
                    SumKind::Segmentation => t.segmentation,
                    SumKind::Localization => t.localization,
                    SumKind::Total => t.total,
                };
                if (computed - reported).abs() > 1e-9 {
                    discrepancies.push(Discrepancy {
                        method: method.clone(),
                        kind,
                        computed,
                        reported,
                    });
                }
            }
        }
        totals.push(t);
    }
    Ok(RankTable {
        methods: grid.methods.clone(),
        columns: grid.columns.clone(),
        ranks,
        totals,
        reported: grid.reported.clone(),
        discrepancies,
    })
}

fn fmt_rank(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

impl RankTable {
    pub fn totals_for(&self, method: &str) -> Option<&MethodTotals> {
        self.totals.iter().find(|t| t.method == method)
    }

    /// Table layout: per-metric rank totals, task sums and the overall sum,
    /// followed by the published overall sum (when given) and a consistency check.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "method",
            "E1",
            "E2",
            "seg_rank_sum",
            "mDice",
            "mHdis",
            "loc_rank_sum",
            "rank_sum",
            "reported_rank_sum",
            "check",
        ])?;
        for t in &self.totals {
            let issues: Vec<String> = self
                .discrepancies
                .iter()
                .filter(|d| d.method == t.method)
                .map(|d| {
                    format!(
                        "{} computed {} but reported {}",
                        d.kind.name(),
                        fmt_rank(d.computed),
                        fmt_rank(d.reported)
                    )
                })
                .collect();
            let any_reported = self.reported.keys().any(|(m, _)| *m == t.method);
            let check = if !issues.is_empty() {
                format!("inconsistent: {}", issues.join("; "))
            } else if any_reported {
                "consistent".to_string()
            } else {
                String::new()
            };
            let reported_total = self
                .reported
                .get(&(t.method.clone(), SumKind::Total))
                .map(|&v| fmt_rank(v))
                .unwrap_or_default();
            w.write_record([
                t.method.clone(),
                fmt_rank(t.per_metric[0]),
                fmt_rank(t.per_metric[1]),
                fmt_rank(t.segmentation),
                fmt_rank(t.per_metric[2]),
                fmt_rank(t.per_metric[3]),
                fmt_rank(t.localization),
                fmt_rank(t.total),
                reported_total,
                check,
            ])?;
        }
        w.flush().map_err(|e| Error::io("csv output", e))?;
        Ok(())
    }
}
