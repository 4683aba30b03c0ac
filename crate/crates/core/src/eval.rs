//! Scoring predicted stances against survey ground truth.
//!
//! Each community's expected rating of a target is the ideology-weighted
//! average of the liberal and conservative survey means. Two ranking tasks
//! compare predictions to that truth: per target, rank the communities
//! (target-specific); per community, rank the targets (community-specific).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::ideology::IdeologyMix;
use crate::probe::StanceMatrix;
use crate::CommunityId;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("lists differ in length: {0} vs {1}")]
    Length(usize, usize),
    #[error("need at least 2 values, got {0}")]
    TooShort(usize),
    #[error("correlation undefined for a constant list")]
    Undefined,
    #[error("non-finite value in input")]
    NonFinite,
    #[error("no ground truth for target {0:?}")]
    MissingTarget(String),
    #[error("rating {value} for {target:?} is outside 0..=100")]
    OutOfRange { target: String, value: f64 },
    #[error("no prediction for community {0}, target {1:?}")]
    MissingCell(CommunityId, String),
    #[error("reports disagree: {0}")]
    Mismatch(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Survey means per target on the 0-100 thermometer scale.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruthTable {
    pub rows: BTreeMap<String, (f64, f64)>,
}

impl GroundTruthTable {
    pub fn insert(&mut self, target: impl Into<String>, s_lib: f64, s_con: f64) -> Result<(), EvalError> {
        let target = target.into();
        for value in [s_lib, s_con] {
            if !(0.0..=100.0).contains(&value) {
                return Err(EvalError::OutOfRange { target, value });
            }
        }
        self.rows.insert(target, (s_lib, s_con));
        Ok(())
    }

    /// `target,s_lib,s_con` rows.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, EvalError> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
        let mut t = GroundTruthTable::default();
        for row in rdr.deserialize() {
            let (target, s_lib, s_con): (String, f64, f64) = row?;
            t.insert(target, s_lib, s_con)?;
        }
        Ok(t)
    }

    pub fn write_csv<W: Write>(&self, mut w: W, manifest: Option<&str>) -> Result<(), EvalError> {
        if let Some(m) = manifest {
            writeln!(w, "# manifest: {m}")?;
        }
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["target", "s_lib", "s_con"])?;
        for (t, (l, c)) in &self.rows {
            out.write_record([t.as_str(), &format!("{l:?}"), &format!("{c:?}")])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// `r_lib * s_lib + r_con * s_con` for one target.
pub fn reweight_truth(gt: &GroundTruthTable, target: &str, mix: IdeologyMix) -> Result<f64, EvalError> {
    let &(s_lib, s_con) = gt
        .rows
        .get(target)
        .ok_or_else(|| EvalError::MissingTarget(target.to_string()))?;
    Ok(mix.r_lib() * s_lib + mix.r_con() * s_con)
}

/// Expected rating of every target by every community.
pub type TruthMatrix = BTreeMap<(CommunityId, String), f64>;

pub fn truth_matrix(
    gt: &GroundTruthTable,
    mixes: &BTreeMap<CommunityId, IdeologyMix>,
    targets: &[String],
) -> Result<TruthMatrix, EvalError> {
    let mut m = TruthMatrix::new();
    for (&c, &mix) in mixes {
        for t in targets {
            m.insert((c, t.clone()), reweight_truth(gt, t, mix)?);
        }
    }
    Ok(m)
}

fn check(xs: &[f64], ys: &[f64]) -> Result<(), EvalError> {
    if xs.len() != ys.len() {
        return Err(EvalError::Length(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(EvalError::TooShort(xs.len()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    Ok(())
}

/// 1-based ranks with tied values sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::Undefined);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    check(xs, ys)?;
    pearson(&average_ranks(xs), &average_ranks(ys))
}

fn tied_pairs(sorted: &[f64]) -> u64 {
    let mut total = 0;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Sorts `v` in place, returning the number of inversions removed.
fn merge_count(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], buf) + merge_count(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf.push(v[j]);
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Kendall's tau-b in O(n log n) (Knight's algorithm).
pub fn kendall_tau_b(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    check(xs, ys)?;
    let n = xs.len() as u64;
    // adding 0.0 turns -0.0 into 0.0 so the two sort as equal
    let mut pairs: Vec<(f64, f64)> = xs.iter().zip(ys).map(|(x, y)| (x + 0.0, y + 0.0)).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let n0 = n * (n - 1) / 2;
    let sorted_x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let n1 = tied_pairs(&sorted_x);
    let mut n3 = 0;
    let mut run = 1u64;
    for w in pairs.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            n3 += run * (run - 1) / 2;
            run = 1;
        }
    }
    n3 += run * (run - 1) / 2;

    let mut y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = Vec::with_capacity(y.len());
    let discordant = merge_count(&mut y, &mut buf);
    let n2 = tied_pairs(&y);

    if n0 == n1 || n0 == n2 {
        return Err(EvalError::Undefined);
    }
    let concordant = n0 + n3 - n1 - n2 - discordant;
    let num = concordant as f64 - discordant as f64;
    let den = ((n0 - n1) as f64 * (n0 - n2) as f64).sqrt();
    Ok((num / den).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingTask {
    TargetSpecific,
    CommunitySpecific,
}

impl RankingTask {
    pub fn as_str(self) -> &'static str {
        match self {
            RankingTask::TargetSpecific => "target_specific",
            RankingTask::CommunitySpecific => "community_specific",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitScore {
    /// target name or community id
    pub unit: String,
    /// `None` when either side was constant
    pub spearman: Option<f64>,
    pub kendall: Option<f64>,
}

/// Correlations for one run, one prompt and one task.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingReport {
    pub task: RankingTask,
    pub prompt_index: usize,
    pub units: Vec<UnitScore>,
    pub spearman_mean: Option<f64>,
    pub kendall_mean: Option<f64>,
    /// units left out of the means because a score vector was constant
    pub skipped: usize,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn report(
    task: RankingTask,
    prompt_index: usize,
    series: Vec<(String, Vec<f64>, Vec<f64>)>,
) -> Result<RankingReport, EvalError> {
    let mut units = Vec::new();
    let mut skipped = 0;
    for (unit, pred, truth) in series {
        let s = match spearman(&pred, &truth) {
            Ok(v) => Some(v),
            Err(EvalError::Undefined) | Err(EvalError::TooShort(_)) => None,
            Err(e) => return Err(e),
        };
        let k = match kendall_tau_b(&pred, &truth) {
            Ok(v) => Some(v),
            Err(EvalError::Undefined) | Err(EvalError::TooShort(_)) => None,
            Err(e) => return Err(e),
        };
        if s.is_none() || k.is_none() {
            log::debug!("{} unit {unit}: constant scores, left out of the mean", task.as_str());
            skipped += 1;
        }
        units.push(UnitScore {
            unit,
            spearman: s,
            kendall: k,
        });
    }
    let both: Vec<&UnitScore> = units
        .iter()
        .filter(|u| u.spearman.is_some() && u.kendall.is_some())
        .collect();
    let ss: Vec<f64> = both.iter().filter_map(|u| u.spearman).collect();
    let ks: Vec<f64> = both.iter().filter_map(|u| u.kendall).collect();
    Ok(RankingReport {
        task,
        prompt_index,
        spearman_mean: mean(&ss),
        kendall_mean: mean(&ks),
        units,
        skipped,
    })
}

fn lookup(pred: &StanceMatrix, truth: &TruthMatrix, c: CommunityId, t: &str) -> Result<(f64, f64), EvalError> {
    let key = (c, t.to_string());
    let p = pred
        .cells
        .get(&key)
        .ok_or_else(|| EvalError::MissingCell(c, t.to_string()))?;
    let s = truth
        .get(&key)
        .ok_or_else(|| EvalError::MissingCell(c, t.to_string()))?;
    Ok((p.score, *s))
}

fn targets_of(truth: &TruthMatrix) -> Vec<String> {
    truth
        .keys()
        .map(|(_, t)| t.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn communities_of(truth: &TruthMatrix) -> Vec<CommunityId> {
    truth
        .keys()
        .map(|(c, _)| *c)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// For every target, correlate communities' predicted and true stances;
/// average over targets.
pub fn target_specific_report(pred: &StanceMatrix, truth: &TruthMatrix) -> Result<RankingReport, EvalError> {
    let communities = communities_of(truth);
    let mut series = Vec::new();
    for t in targets_of(truth) {
        let (mut p, mut s) = (Vec::new(), Vec::new());
        for &c in &communities {
            let (a, b) = lookup(pred, truth, c, &t)?;
            p.push(a);
            s.push(b);
        }
        series.push((t, p, s));
    }
    report(RankingTask::TargetSpecific, pred.prompt_index, series)
}

/// For each of the `top_n` largest communities (the lowest ids), correlate
/// predicted and true stances across targets; average over communities.
pub fn community_specific_report(
    pred: &StanceMatrix,
    truth: &TruthMatrix,
    top_n: usize,
) -> Result<RankingReport, EvalError> {
    let targets = targets_of(truth);
    let mut series = Vec::new();
    for c in communities_of(truth).into_iter().take(top_n) {
        let (mut p, mut s) = (Vec::new(), Vec::new());
        for t in &targets {
            let (a, b) = lookup(pred, truth, c, t)?;
            p.push(a);
            s.push(b);
        }
        series.push((c.to_string(), p, s));
    }
    report(RankingTask::CommunitySpecific, pred.prompt_index, series)
}

/// Mean and sample standard deviation over runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        let mean = mean(values)?;
        let n = values.len();
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Summary { mean, std, n })
    }
}

/// Per-run reports for one task and prompt, summarized across runs.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateReport {
    pub task: RankingTask,
    pub prompt_index: usize,
    pub spearman: Option<Summary>,
    pub kendall: Option<Summary>,
    pub runs: usize,
    pub skipped: usize,
}

pub fn aggregate(reports: &[RankingReport]) -> Result<AggregateReport, EvalError> {
    let first = reports
        .first()
        .ok_or_else(|| EvalError::Mismatch("no reports".into()))?;
    if let Some(r) = reports
        .iter()
        .find(|r| r.task != first.task || r.prompt_index != first.prompt_index)
    {
        return Err(EvalError::Mismatch(format!(
            "{} prompt {} vs {} prompt {}",
            first.task.as_str(),
            first.prompt_index,
            r.task.as_str(),
            r.prompt_index
        )));
    }
    let s: Vec<f64> = reports.iter().filter_map(|r| r.spearman_mean).collect();
    let k: Vec<f64> = reports.iter().filter_map(|r| r.kendall_mean).collect();
    Ok(AggregateReport {
        task: first.task,
        prompt_index: first.prompt_index,
        spearman: Summary::of(&s),
        kendall: Summary::of(&k),
        runs: reports.len(),
        skipped: reports.iter().map(|r| r.skipped).sum(),
    })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// `task,prompt,coefficient,mean,std,runs,skipped`, one row per coefficient.
pub fn write_aggregate_csv<W: Write>(
    reports: &[AggregateReport],
    mut w: W,
    manifest: Option<&str>,
) -> Result<(), EvalError> {
    if let Some(m) = manifest {
        writeln!(w, "# manifest: {m}")?;
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["task", "prompt", "coefficient", "mean", "std", "runs", "skipped"])?;
    for r in reports {
        for (name, s) in [("spearman", r.spearman), ("kendall", r.kendall)] {
            out.write_record([
                r.task.as_str().to_string(),
                r.prompt_index.to_string(),
                name.to_string(),
                fmt_opt(s.map(|s| s.mean)),
                fmt_opt(s.map(|s| s.std)),
                r.runs.to_string(),
                r.skipped.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Read back what [`write_aggregate_csv`] wrote. `#` lines are skipped.
pub fn read_aggregate_csv<R: Read>(reader: R) -> Result<Vec<AggregateReport>, EvalError> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    let mut out: Vec<AggregateReport> = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let bad = |what: &str| EvalError::Mismatch(format!("row {}: bad {what}", i + 1));
        let task = match row.get(0).unwrap_or("") {
            "target_specific" => RankingTask::TargetSpecific,
            "community_specific" => RankingTask::CommunitySpecific,
            _ => return Err(bad("task")),
        };
        let prompt_index: usize = row.get(1).unwrap_or("").parse().map_err(|_| bad("prompt"))?;
        let runs: usize = row.get(5).unwrap_or("").parse().map_err(|_| bad("runs"))?;
        let skipped: usize = row.get(6).unwrap_or("").parse().map_err(|_| bad("skipped"))?;
        let summary = match (row.get(3).unwrap_or(""), row.get(4).unwrap_or("")) {
            ("", _) => None,
            (m, s) => Some(Summary {
                mean: m.parse().map_err(|_| bad("mean"))?,
                std: s.parse().map_err(|_| bad("std"))?,
                n: runs,
            }),
        };
        let idx = match out
            .iter()
            .position(|r| r.task == task && r.prompt_index == prompt_index)
        {
            Some(idx) => idx,
            None => {
                out.push(AggregateReport {
                    task,
                    prompt_index,
                    spearman: None,
                    kendall: None,
                    runs,
                    skipped,
                });
                out.len() - 1
            }
        };
        match row.get(2).unwrap_or("") {
            "spearman" => out[idx].spearman = summary,
            "kendall" => out[idx].kendall = summary,
            _ => return Err(bad("coefficient")),
        }
    }
    Ok(out)
}

/// `run,task,prompt,unit,spearman,kendall` for every unit of every report.
pub fn write_units_csv<W: Write>(
    runs: &[(String, Vec<RankingReport>)],
    mut w: W,
    manifest: Option<&str>,
) -> Result<(), EvalError> {
    if let Some(m) = manifest {
        writeln!(w, "# manifest: {m}")?;
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["run", "task", "prompt", "unit", "spearman", "kendall"])?;
    for (run, reports) in runs {
        for r in reports {
            for u in &r.units {
                out.write_record([
                    run.clone(),
                    r.task.as_str().to_string(),
                    r.prompt_index.to_string(),
                    u.unit.clone(),
                    fmt_opt(u.spearman),
                    fmt_opt(u.kendall),
                ])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Side-by-side summaries of several runs for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub task: RankingTask,
    pub columns: Vec<String>,
    /// `(prompt, coefficient, one summary per column, flagged columns)`
    pub rows: Vec<ComparisonRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub prompt_index: usize,
    pub coefficient: &'static str,
    pub cells: Vec<Option<Summary>>,
    pub best: Vec<bool>,
}

/// Tabulate runs (for instance message passing on, off and random) per
/// prompt and coefficient, flagging the highest mean in each row. Equal
/// best means are all flagged.
pub fn compare_runs(runs: &[(String, Vec<AggregateReport>)]) -> Result<ComparisonTable, EvalError> {
    let (_, first) = runs.first().ok_or_else(|| EvalError::Mismatch("no runs".into()))?;
    let task = first
        .first()
        .ok_or_else(|| EvalError::Mismatch("empty run".into()))?
        .task;
    let prompts: BTreeSet<usize> = first.iter().map(|r| r.prompt_index).collect();
    for (label, reports) in runs {
        if let Some(r) = reports.iter().find(|r| r.task != task) {
            return Err(EvalError::Mismatch(format!(
                "run {label} has task {} but expected {}",
                r.task.as_str(),
                task.as_str()
            )));
        }
        let p: BTreeSet<usize> = reports.iter().map(|r| r.prompt_index).collect();
        if p != prompts {
            return Err(EvalError::Mismatch(format!(
                "run {label} covers prompts {p:?}, expected {prompts:?}"
            )));
        }
    }
    let mut rows = Vec::new();
    for &p in &prompts {
        for coefficient in ["spearman", "kendall"] {
            let cells: Vec<Option<Summary>> = runs
                .iter()
                .map(|(_, reports)| {
                    let r = reports
                        .iter()
                        .find(|r| r.prompt_index == p)
                        .expect("prompt sets checked");
                    if coefficient == "spearman" {
                        r.spearman
                    } else {
                        r.kendall
                    }
                })
                .collect();
            let top = cells.iter().flatten().map(|s| s.mean).fold(f64::NEG_INFINITY, f64::max);
            let best = cells.iter().map(|c| c.is_some_and(|s| s.mean == top)).collect();
            rows.push(ComparisonRow {
                prompt_index: p,
                coefficient,
                cells,
                best,
            });
        }
    }
    Ok(ComparisonTable {
        task,
        columns: runs.iter().map(|(l, _)| l.clone()).collect(),
        rows,
    })
}

impl ComparisonTable {
    fn cell_text(cell: &Option<Summary>, best: bool) -> String {
        match cell {
            Some(s) => format!("{:.4} ± {:.4}{}", s.mean, s.std, if best { "*" } else { "" }),
            None => "n/a".to_string(),
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W, manifest: Option<&str>) -> Result<(), EvalError> {
        if let Some(m) = manifest {
            writeln!(w, "# manifest: {m}")?;
        }
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["task".to_string(), "prompt".into(), "coefficient".into()];
        for c in &self.columns {
            header.push(format!("{c}_mean"));
            header.push(format!("{c}_std"));
            header.push(format!("{c}_best"));
        }
        out.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                self.task.as_str().to_string(),
                r.prompt_index.to_string(),
                r.coefficient.to_string(),
            ];
            for (c, b) in r.cells.iter().zip(&r.best) {
                rec.push(fmt_opt(c.map(|s| s.mean)));
                rec.push(fmt_opt(c.map(|s| s.std)));
                rec.push(if *b { "*".into() } else { String::new() });
            }
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Aligned plain-text rendering with `*` on each row's best cell.
    pub fn render_text(&self) -> String {
        let mut header = vec!["prompt".to_string(), "coef".to_string()];
        header.extend(self.columns.iter().cloned());
        let mut lines = vec![header];
        for r in &self.rows {
            let mut l = vec![r.prompt_index.to_string(), r.coefficient.to_string()];
            l.extend(
                r.cells
                    .iter()
                    .zip(&r.best)
                    .map(|(c, &b)| ComparisonTable::cell_text(c, b)),
            );
            lines.push(l);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|i| lines.iter().map(|l| l[i].chars().count()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.task.as_str());
        for l in &lines {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            let _ = writeln!(s, "{}", cells.join("  ").trim_end());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::CellScore;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn reweight_examples() {
        let mut gt = GroundTruthTable::default();
        gt.insert("a", 80.0, 20.0).unwrap();
        gt.insert("b", 90.0, 10.0).unwrap();
        assert_eq!(reweight_truth(&gt, "a", IdeologyMix::new(1.0).unwrap()).unwrap(), 80.0);
        assert_eq!(reweight_truth(&gt, "a", IdeologyMix::new(0.5).unwrap()).unwrap(), 50.0);
        assert!(close(
            reweight_truth(&gt, "b", IdeologyMix::new(0.05).unwrap()).unwrap(),
            14.0
        ));
        assert!(reweight_truth(&gt, "zz", IdeologyMix::new(0.5).unwrap()).is_err());
        assert!(gt.insert("c", 101.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn reweight_bounded_and_linear(l in 0.0f64..=100.0, c in 0.0f64..=100.0, r in 0.0f64..=1.0) {
            let mut gt = GroundTruthTable::default();
            gt.insert("t", l, c).unwrap();
            let v = reweight_truth(&gt, "t", IdeologyMix::new(r).unwrap()).unwrap();
            prop_assert!(v >= l.min(c) - 1e-9 && v <= l.max(c) + 1e-9);
            prop_assert!((v - (c + r * (l - c))).abs() < 1e-9);
        }
    }

    #[test]
    fn ground_truth_csv_roundtrip() {
        let csv = "target,s_lib,s_con\nfeminists,70.5,40\nJoe Biden,65,20.25\n";
        let gt = GroundTruthTable::read_csv(csv.as_bytes()).unwrap();
        let mut out = Vec::new();
        gt.write_csv(&mut out, Some("h")).unwrap();
        assert_eq!(GroundTruthTable::read_csv(&out[..]).unwrap(), gt);
    }

    #[test]
    fn spearman_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!(close(spearman(&a, &a).unwrap(), 1.0));
        assert!(close(spearman(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0));
        assert!(close(spearman(&a, &[2.0, 1.0, 4.0, 3.0]).unwrap(), 0.6));
        assert!(matches!(spearman(&a, &[1.0; 4]), Err(EvalError::Undefined)));
        assert!(matches!(spearman(&a, &[1.0]), Err(EvalError::Length(4, 1))));
        assert!(matches!(spearman(&[1.0], &[1.0]), Err(EvalError::TooShort(1))));
    }

    #[test]
    fn kendall_examples() {
        let a = [1.0, 2.0, 3.0];
        assert!(close(kendall_tau_b(&a, &a).unwrap(), 1.0));
        assert!(close(kendall_tau_b(&a, &[3.0, 2.0, 1.0]).unwrap(), -1.0));
        assert!(close(kendall_tau_b(&a, &[1.0, 3.0, 2.0]).unwrap(), 1.0 / 3.0));
        assert!(matches!(kendall_tau_b(&[2.0; 3], &a), Err(EvalError::Undefined)));
        assert!(matches!(
            kendall_tau_b(&a, &[f64::NAN, 1.0, 2.0]),
            Err(EvalError::NonFinite)
        ));
        let t = kendall_tau_b(&[-0.0, 0.0, 1.0], &[5.0, 3.0, 4.0]).unwrap();
        let u = kendall_tau_b(&[0.0, 0.0, 1.0], &[5.0, 3.0, 4.0]).unwrap();
        assert_eq!(t, u);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    proptest! {
        #[test]
        fn monotone_transform_invariance(
            xs in prop::collection::vec(-5i32..5, 3..12),
            seed in any::<u64>(),
        ) {
            let xs: Vec<f64> = xs.into_iter().map(f64::from).collect();
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| ((i as u64 ^ seed) % 7) as f64 - x).collect();
            let tx: Vec<f64> = xs.iter().map(|x| x.powi(3) + 2.0 * x).collect();
            let ty: Vec<f64> = ys.iter().map(|y| y.exp()).collect();
            match (spearman(&xs, &ys), spearman(&tx, &ty)) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
                (Err(_), Err(_)) => {}
                other => prop_assert!(false, "{:?}", other),
            }
            match (kendall_tau_b(&xs, &ys), kendall_tau_b(&tx, &ty)) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
                (Err(_), Err(_)) => {}
                other => prop_assert!(false, "{:?}", other),
            }
        }
    }

    fn matrices(offset: impl Fn(CommunityId, &str, f64) -> f64) -> (StanceMatrix, TruthMatrix) {
        let mut truth = TruthMatrix::new();
        let mut pred = StanceMatrix {
            prompt_index: 2,
            ..Default::default()
        };
        for c in 1..=5u32 {
            for (k, t) in ["a", "b", "c", "d"].iter().enumerate() {
                let v = (c as f64 * 7.0 + k as f64 * 13.0) % 17.0;
                truth.insert((c, t.to_string()), v);
                pred.cells.insert(
                    (c, t.to_string()),
                    CellScore {
                        score: offset(c, t, v),
                        n_scored: 1,
                    },
                );
            }
        }
        (pred, truth)
    }

    #[test]
    fn reports_on_exact_prediction() {
        let (p, t) = matrices(|_, _, v| v);
        let r = target_specific_report(&p, &t).unwrap();
        assert!(close(r.spearman_mean.unwrap(), 1.0));
        assert_eq!(r.units.len(), 4);
        let r = community_specific_report(&p, &t, 10).unwrap();
        assert!(close(r.kendall_mean.unwrap(), 1.0));
        assert_eq!(r.units.len(), 5);
        assert_eq!(community_specific_report(&p, &t, 3).unwrap().units.len(), 3);
    }

    #[test]
    fn negated_and_shifted() {
        let (p, t) = matrices(|_, _, v| -v);
        assert!(close(
            target_specific_report(&p, &t).unwrap().spearman_mean.unwrap(),
            -1.0
        ));
        let (p, t) = matrices(|_, tg, v| v + tg.len() as f64 * 100.0 + if tg == "b" { 5.0 } else { 0.0 });
        assert!(close(
            target_specific_report(&p, &t).unwrap().spearman_mean.unwrap(),
            1.0
        ));
    }

    #[test]
    fn constant_column_skipped() {
        let (p, t) = matrices(|_, tg, v| if tg == "c" { 0.0 } else { v });
        let r = target_specific_report(&p, &t).unwrap();
        assert_eq!(r.skipped, 1);
        assert!(close(r.spearman_mean.unwrap(), 1.0));
        assert!(r.units.iter().any(|u| u.unit == "c" && u.spearman.is_none()));
    }

    #[test]
    fn missing_cell_errors() {
        let (mut p, t) = matrices(|_, _, v| v);
        p.cells.remove(&(3, "a".to_string()));
        assert!(matches!(
            target_specific_report(&p, &t),
            Err(EvalError::MissingCell(3, _))
        ));
    }

    #[test]
    fn aggregate_mean_and_sample_std() {
        let mk = |s| RankingReport {
            task: RankingTask::TargetSpecific,
            prompt_index: 1,
            units: vec![],
            spearman_mean: Some(s),
            kendall_mean: Some(s / 2.0),
            skipped: 1,
        };
        let a = aggregate(&[mk(0.2), mk(0.4), mk(0.6)]).unwrap();
        let s = a.spearman.unwrap();
        assert!(close(s.mean, 0.4));
        assert!(close(s.std, 0.2));
        assert_eq!(a.skipped, 3);
        let mut other = mk(0.1);
        other.prompt_index = 2;
        assert!(aggregate(&[mk(0.2), other]).is_err());
    }

    fn agg(task: RankingTask, p: usize, s: f64) -> AggregateReport {
        AggregateReport {
            task,
            prompt_index: p,
            spearman: Some(Summary {
                mean: s,
                std: 0.01,
                n: 5,
            }),
            kendall: Some(Summary {
                mean: s / 2.0,
                std: 0.01,
                n: 5,
            }),
            runs: 5,
            skipped: 0,
        }
    }

    #[test]
    fn comparison_shape_and_flags() {
        let t = RankingTask::TargetSpecific;
        let run = |base: f64| (1..=4).map(|p| agg(t, p, base + p as f64 / 100.0)).collect::<Vec<_>>();
        let table = compare_runs(&[
            ("on".into(), run(0.8)),
            ("off".into(), run(0.5)),
            ("random".into(), run(0.8)),
        ])
        .unwrap();
        assert_eq!(table.rows.len(), 8);
        assert!(table.rows.iter().all(|r| r.cells.len() == 3));
        assert!(table.rows.iter().all(|r| r.best == vec![true, false, true]));
        let text = table.render_text();
        assert!(text.contains("0.8100 ± 0.0100*"));
        let single = compare_runs(&[("on".into(), run(0.8))]).unwrap();
        assert!(single.rows.iter().all(|r| r.cells.len() == 1 && r.best == vec![true]));
    }

    #[test]
    fn comparison_rejects_mismatch() {
        let a = vec![agg(RankingTask::TargetSpecific, 1, 0.5)];
        let b = vec![agg(RankingTask::CommunitySpecific, 1, 0.5)];
        assert!(compare_runs(&[("a".into(), a.clone()), ("b".into(), b)]).is_err());
        let c = vec![agg(RankingTask::TargetSpecific, 2, 0.5)];
        assert!(compare_runs(&[("a".into(), a), ("c".into(), c)]).is_err());
    }

    #[test]
    fn csv_outputs_are_stable() {
        let t = RankingTask::TargetSpecific;
        let runs = vec![("on".to_string(), vec![agg(t, 1, 0.7)])];
        let table = compare_runs(&runs).unwrap();
        let mut a = Vec::new();
        table.write_csv(&mut a, Some("m")).unwrap();
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("# manifest: m\ntask,prompt,coefficient,on_mean,on_std,on_best\n"));
        assert!(text.contains("target_specific,1,spearman,0.700000,0.010000,*"));
        let mut b = Vec::new();
        write_aggregate_csv(&runs[0].1, &mut b, None).unwrap();
        assert_eq!(String::from_utf8(b).unwrap().lines().count(), 3);
    }

    #[test]
    fn aggregate_csv_roundtrip() {
        let reports = vec![
            agg(RankingTask::TargetSpecific, 1, 0.75),
            agg(RankingTask::TargetSpecific, 2, 0.5),
        ];
        let mut buf = Vec::new();
        write_aggregate_csv(&reports, &mut buf, Some("abc")).unwrap();
        let back = read_aggregate_csv(buf.as_slice()).unwrap();
        assert_eq!(back, reports);
        let mut empty = agg(RankingTask::CommunitySpecific, 3, 0.1);
        empty.kendall = None;
        let mut buf = Vec::new();
        write_aggregate_csv(&[empty.clone()], &mut buf, None).unwrap();
        assert_eq!(read_aggregate_csv(buf.as_slice()).unwrap(), vec![empty]);
    }
}
