//! Regional Dice, paired signed-rank tests and the per-case report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::cinedata::{LabelMap, Region};
use crate::error::{Error, Result};

/// Overlap of one class between two label maps. Both empty gives 1.
pub fn dice(a: &LabelMap, b: &LabelMap, class_id: u8) -> Result<f64> {
    let (inter, na, nb) = overlap_counts(a, b, class_id)?;
    Ok(dice_from_counts(inter, na, nb))
}

fn overlap_counts(a: &LabelMap, b: &LabelMap, class_id: u8) -> Result<(usize, usize, usize)> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Contract(format!(
            "dice: masks are {}x{} and {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let (mut inter, mut na, mut nb) = (0, 0, 0);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (ia, ib) = (x == class_id, y == class_id);
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    Ok((inter, na, nb))
}

fn dice_from_counts(inter: usize, na: usize, nb: usize) -> f64 {
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// Region per slice index, ordered base to apex: the first `ceil(n/3)` are
/// base, the last `floor(n/3)` apex, the rest mid.
pub fn region_split(num_slices: usize) -> Result<Vec<Region>> {
    if num_slices < 3 {
        return Err(Error::Config(format!("region_split needs at least 3 slices, got {num_slices}")));
    }
    let base = num_slices.div_ceil(3);
    let apex = num_slices / 3;
    Ok((0..num_slices)
        .map(|i| {
            if i < base {
                Region::Base
            } else if i >= num_slices - apex {
                Region::Apex
            } else {
                Region::Mid
            }
        })
        .collect())
}

/// Largest sample size handled by the exact null distribution.
pub const WILCOXON_EXACT_MAX: usize = 20;
/// Fewest nonzero differences accepted.
pub const WILCOXON_MIN_N: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WilcoxonMethod {
    /// Exact for `n <= 20`, normal approximation above.
    Auto,
    Exact,
    Normal,
}

/// Two-sided Wilcoxon signed-rank p-value for paired differences.
pub fn wilcoxon_signed_rank(differences: &[f64]) -> Result<f64> {
    wilcoxon_signed_rank_with(differences, WilcoxonMethod::Auto)
}

pub fn wilcoxon_signed_rank_with(differences: &[f64], method: WilcoxonMethod) -> Result<f64> {
    if differences.iter().any(|d| !d.is_finite()) {
        return Err(Error::Statistics("non-finite difference".into()));
    }
    let nonzero: Vec<f64> = differences.iter().copied().filter(|&d| d != 0.0).collect();
    if nonzero.is_empty() {
        return Err(Error::Statistics("all differences are zero".into()));
    }
    let n = nonzero.len();
    if n < WILCOXON_MIN_N {
        return Err(Error::Statistics(format!(
            "{n} nonzero differences, at least {WILCOXON_MIN_N} required"
        )));
    }
    let ranks = midranks(&nonzero.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus: f64 = nonzero.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let exact = match method {
        WilcoxonMethod::Auto => n <= WILCOXON_EXACT_MAX,
        WilcoxonMethod::Exact => true,
        WilcoxonMethod::Normal => false,
    };
    if exact {
        if n > 30 {
            return Err(Error::Statistics(format!("exact null distribution requested for n = {n}")));
        }
        Ok(exact_p(&ranks, w_plus))
    } else {
        Ok(normal_p(&ranks, w_plus))
    }
}

/// 1-based ranks of `values`, tied values sharing the mean of their ranks.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Exact null distribution of `W+` over all sign assignments. Midranks are
/// multiples of 1/2, so the distribution is built over doubled ranks.
fn exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0f64; total + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let all = 2f64.powi(ranks.len() as i32);
    let centre = total as f64 / 2.0;
    let dev = (2.0 * w_plus - centre).abs();
    let extreme: f64 = counts
        .iter()
        .enumerate()
        .filter(|(s, _)| (*s as f64 - centre).abs() >= dev - 1e-9)
        .map(|(_, c)| c)
        .sum();
    (extreme / all).min(1.0)
}

fn normal_p(ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    let dev = (w_plus - mean).abs() - 0.5;
    if dev <= 0.0 || var <= 0.0 {
        return 1.0;
    }
    let z = dev / var.sqrt();
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * (1.0 - std.cdf(z))).min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    ED,
    ES,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::ED => "ED",
            Phase::ES => "ES",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "ED" => Some(Phase::ED),
            "ES" => Some(Phase::ES),
            _ => None,
        }
    }
}

/// Row grouping in the report: a slice region or the whole study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportRegion {
    Base,
    Mid,
    Apex,
    Full,
}

impl ReportRegion {
    pub const ALL: [ReportRegion; 4] = [ReportRegion::Base, ReportRegion::Mid, ReportRegion::Apex, ReportRegion::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            ReportRegion::Base => "base",
            ReportRegion::Mid => "mid",
            ReportRegion::Apex => "apex",
            ReportRegion::Full => "full",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.as_str() == s)
    }

    fn of(region: Region) -> Option<Self> {
        match region {
            Region::Base => Some(ReportRegion::Base),
            Region::Mid => Some(ReportRegion::Mid),
            Region::Apex => Some(ReportRegion::Apex),
            Region::Unknown => None,
        }
    }
}

impl fmt::Display for ReportRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One slice at one phase.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCase {
    pub seq_id: String,
    pub study_id: String,
    pub region: Region,
    pub phase: Phase,
    pub mask: LabelMap,
    /// Ensemble volume spread for the evaluated class, predictions only.
    pub sigma_v_ml: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodPredictions {
    pub method: String,
    pub cases: Vec<EvalCase>,
}

/// Pixel area and slice thickness, both in mm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub pixel_spacing: (f64, f64),
    pub slice_thickness: f64,
}

impl Spacing {
    pub fn voxel_ml(&self) -> f64 {
        self.pixel_spacing.0 * self.pixel_spacing.1 * self.slice_thickness / 1000.0
    }
}

/// One CSV line. Per-case rows carry a case id; summary rows use `mean` and
/// `sd`. `p_value` sits on `mean` rows and compares the method with the first
/// (reference) method.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub region: ReportRegion,
    pub phase: Phase,
    pub case_id: String,
    pub dice: f64,
    pub sigma_v_ml: Option<f64>,
    pub p_value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseTest {
    pub method_a: String,
    pub method_b: String,
    pub region: ReportRegion,
    pub phase: Phase,
    pub n: usize,
    /// `None` when the test is undefined (too few nonzero differences).
    pub p_value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionalReport {
    pub class_id: u8,
    pub methods: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub pairwise: Vec<PairwiseTest>,
    /// Predicted and reference volume (mL) per method and slice case.
    pub volumes: Vec<(String, String, Phase, f64, f64)>,
}

pub const CSV_HEADER: [&str; 7] = ["method", "region", "phase", "case_id", "dice", "sigma_v_ml", "p_value"];

type CaseKey = (String, Phase);

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Per-case regional Dice for `class_id`, summaries, and signed-rank tests
/// between every pair of methods. Study-level (`full`) Dice pools pixel
/// counts over all slices of a study.
pub fn evaluate_run(
    predictions: &[MethodPredictions],
    ground_truth: &[EvalCase],
    spacings: &BTreeMap<String, Spacing>,
    class_id: u8,
) -> Result<RegionalReport> {
    if predictions.is_empty() {
        return Err(Error::Data("evaluate_run: no predictions".into()));
    }
    let mut gt: BTreeMap<CaseKey, &EvalCase> = BTreeMap::new();
    for c in ground_truth {
        if gt.insert((c.seq_id.clone(), c.phase), c).is_some() {
            return Err(Error::Data(format!("duplicate ground truth for {} {}", c.seq_id, c.phase.as_str())));
        }
    }
    let mut methods = Vec::new();
    // method -> region -> phase -> case id -> dice
    let mut table: BTreeMap<(usize, ReportRegion, Phase), Vec<(String, f64, Option<f64>)>> = BTreeMap::new();
    let mut volumes = Vec::new();
    for (mi, mp) in predictions.iter().enumerate() {
        if methods.contains(&mp.method) {
            return Err(Error::Data(format!("method {} listed twice", mp.method)));
        }
        methods.push(mp.method.clone());
        let mut seen = BTreeSet::new();
        let mut studies: BTreeMap<(String, Phase), (usize, usize, usize)> = BTreeMap::new();
        for c in &mp.cases {
            let key = (c.seq_id.clone(), c.phase);
            let Some(g) = gt.get(&key) else {
                return Err(Error::Data(format!(
                    "{}: prediction {} {} has no ground truth",
                    mp.method,
                    c.seq_id,
                    c.phase.as_str()
                )));
            };
            if !seen.insert(key) {
                return Err(Error::Data(format!("{}: duplicate prediction {} {}", mp.method, c.seq_id, c.phase.as_str())));
            }
            let region = ReportRegion::of(g.region)
                .ok_or_else(|| Error::Data(format!("{}: ground truth has no region tag", c.seq_id)))?;
            let spacing = spacings
                .get(&c.seq_id)
                .ok_or_else(|| Error::Data(format!("no spacing for {}", c.seq_id)))?;
            let (inter, na, nb) = overlap_counts(&c.mask, &g.mask, class_id)?;
            table
                .entry((mi, region, c.phase))
                .or_default()
                .push((c.seq_id.clone(), dice_from_counts(inter, na, nb), c.sigma_v_ml));
            let acc = studies.entry((g.study_id.clone(), c.phase)).or_default();
            acc.0 += inter;
            acc.1 += na;
            acc.2 += nb;
            volumes.push((
                mp.method.clone(),
                c.seq_id.clone(),
                c.phase,
                na as f64 * spacing.voxel_ml(),
                nb as f64 * spacing.voxel_ml(),
            ));
        }
        if seen.len() != gt.len() {
            let missing = gt.keys().find(|k| !seen.contains(*k)).expect("some case missing");
            return Err(Error::Data(format!(
                "{}: no prediction for {} {}",
                mp.method,
                missing.0,
                missing.1.as_str()
            )));
        }
        for ((study, phase), (inter, na, nb)) in studies {
            table.entry((mi, ReportRegion::Full, phase)).or_default().push((
                study,
                dice_from_counts(inter, na, nb),
                None,
            ));
        }
    }

    let mut pairwise = Vec::new();
    for a in 0..methods.len() {
        for b in a + 1..methods.len() {
            for region in ReportRegion::ALL {
                for phase in [Phase::ED, Phase::ES] {
                    let (Some(ra), Some(rb)) = (table.get(&(a, region, phase)), table.get(&(b, region, phase))) else {
                        continue;
                    };
                    // Both lists follow the same sorted case order.
                    let da: BTreeMap<&str, f64> = ra.iter().map(|(id, d, _)| (id.as_str(), *d)).collect();
                    let diffs: Vec<f64> = rb.iter().map(|(id, d, _)| d - da[id.as_str()]).collect();
                    pairwise.push(PairwiseTest {
                        method_a: methods[a].clone(),
                        method_b: methods[b].clone(),
                        region,
                        phase,
                        n: diffs.len(),
                        p_value: wilcoxon_signed_rank(&diffs).ok(),
                    });
                }
            }
        }
    }

    let mut rows = Vec::new();
    for ((mi, region, phase), mut cases) in table {
        cases.sort_by(|x, y| x.0.cmp(&y.0));
        let method = &methods[mi];
        let dices: Vec<f64> = cases.iter().map(|c| c.1).collect();
        let sig: Vec<f64> = cases.iter().filter_map(|c| c.2).collect();
        for (id, d, s) in &cases {
            rows.push(ReportRow {
                method: method.clone(),
                region,
                phase,
                case_id: id.clone(),
                dice: *d,
                sigma_v_ml: *s,
                p_value: None,
            });
        }
        let (dm, dsd) = mean_sd(&dices);
        let (sm, ssd) = if sig.is_empty() { (None, None) } else {
            let (m, s) = mean_sd(&sig);
            (Some(m), Some(s))
        };
        let p_value = if mi == 0 {
            None
        } else {
            pairwise
                .iter()
                .find(|t| t.method_a == methods[0] && &t.method_b == method && t.region == region && t.phase == phase)
                .and_then(|t| t.p_value)
        };
        rows.push(ReportRow { method: method.clone(), region, phase, case_id: "mean".into(), dice: dm, sigma_v_ml: sm, p_value });
        rows.push(ReportRow { method: method.clone(), region, phase, case_id: "sd".into(), dice: dsd, sigma_v_ml: ssd, p_value: None });
    }
    Ok(RegionalReport { class_id, methods, rows, pairwise, volumes })
}

impl RegionalReport {
    /// Summary row for a method, region and phase.
    pub fn mean_dice(&self, method: &str, region: ReportRegion, phase: Phase) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.region == region && r.phase == phase && r.case_id == "mean")
            .map(|r| r.dice)
    }

    pub fn case_rows(&self) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(|r| r.case_id != "mean" && r.case_id != "sd")
    }

    /// Every per-case σ_v.
    pub fn sigma_v_list(&self) -> Vec<f64> {
        self.case_rows().filter_map(|r| r.sigma_v_ml).collect()
    }

    pub fn to_csv(&self) -> String {
        write_csv_rows(&self.rows)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_csv_rows(rows: &[ReportRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.region.as_str().to_string(),
            r.phase.as_str().to_string(),
            r.case_id.clone(),
            r.dice.to_string(),
            opt(r.sigma_v_ml),
            opt(r.p_value),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8 csv")
}

/// Parse a report CSV. The header must match exactly.
pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::Data(format!("report csv: {e}")))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Data(format!("report csv: header {:?}, expected {:?}", header, CSV_HEADER)));
    }
    let num = |s: &str, line: usize| -> Result<Option<f64>> {
        if s.is_empty() {
            return Ok(None);
        }
        s.parse().map(Some).map_err(|_| Error::Data(format!("report csv line {line}: bad number {s:?}")))
    };
    let mut rows = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::Data(format!("report csv line {line}: {e}")))?;
        let region = ReportRegion::parse(&rec[1]).ok_or_else(|| Error::Data(format!("report csv line {line}: bad region")))?;
        let phase = Phase::parse(&rec[2]).ok_or_else(|| Error::Data(format!("report csv line {line}: bad phase")))?;
        rows.push(ReportRow {
            method: rec[0].to_string(),
            region,
            phase,
            case_id: rec[3].to_string(),
            dice: num(&rec[4], line)?.ok_or_else(|| Error::Data(format!("report csv line {line}: missing dice")))?,
            sigma_v_ml: num(&rec[5], line)?,
            p_value: num(&rec[6], line)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> LabelMap {
        LabelMap::new(1, bits.len(), bits.to_vec())
    }

    #[test]
    fn dice_examples() {
        let a = mask(&[1, 1, 0, 0]);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice(&a, &mask(&[0, 0, 1, 1]), 1).unwrap(), 0.0);
        assert_eq!(dice(&mask(&[0, 0]), &mask(&[0, 0]), 1).unwrap(), 1.0);
        // |A| = 4, |B| = 6, overlap 3.
        let a = mask(&[1, 1, 1, 1, 0, 0, 0, 0, 0]);
        let b = mask(&[1, 1, 1, 0, 1, 1, 1, 0, 0]);
        assert!((dice(&a, &b, 1).unwrap() - 0.6).abs() < 1e-12);
        assert!(matches!(dice(&a, &mask(&[1]), 1), Err(Error::Contract(_))));
    }

    #[test]
    fn region_split_examples() {
        let count = |n| {
            let r = region_split(n).unwrap();
            [Region::Base, Region::Mid, Region::Apex].map(|x| r.iter().filter(|&&y| y == x).count())
        };
        assert_eq!(count(9), [3, 3, 3]);
        assert_eq!(count(10), [4, 3, 3]);
        assert_eq!(count(3), [1, 1, 1]);
        assert_eq!(count(4), [2, 1, 1]);
        assert_eq!(count(5), [2, 2, 1]);
        assert!(matches!(region_split(2), Err(Error::Config(_))));
    }

    #[test]
    fn wilcoxon_examples() {
        let p = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert!((p - 0.03125).abs() < 1e-12);
        let anti: Vec<f64> = (0..10).map(|i| if i % 2 == 0 { 0.7 } else { -0.7 }).collect();
        assert_eq!(wilcoxon_signed_rank(&anti).unwrap(), 1.0);
        assert!(matches!(wilcoxon_signed_rank(&[0.0; 8]), Err(Error::Statistics(_))));
        assert!(matches!(wilcoxon_signed_rank(&[1.0, 0.0, 2.0]), Err(Error::Statistics(_))));
        // Zeros are dropped before ranking.
        let with_zeros = wilcoxon_signed_rank(&[0.0, 1.0, 2.0, 0.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(with_zeros, p);
    }

    #[test]
    fn midranks_average_ties() {
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    fn case(seq: &str, study: &str, region: Region, phase: Phase, bits: &[u8]) -> EvalCase {
        EvalCase {
            seq_id: seq.into(),
            study_id: study.into(),
            region,
            phase,
            mask: mask(bits),
            sigma_v_ml: None,
        }
    }

    fn spacings(ids: &[&str]) -> BTreeMap<String, Spacing> {
        ids.iter()
            .map(|id| (id.to_string(), Spacing { pixel_spacing: (1.0, 1.0), slice_thickness: 10.0 }))
            .collect()
    }

    #[test]
    fn full_region_pools_study_counts() {
        let gt = vec![
            case("a", "s", Region::Base, Phase::ED, &[1, 1, 0, 0]),
            case("b", "s", Region::Mid, Phase::ED, &[1, 1, 1, 1]),
        ];
        let pred = MethodPredictions {
            method: "m".into(),
            cases: vec![
                case("a", "s", Region::Base, Phase::ED, &[1, 0, 0, 0]),
                case("b", "s", Region::Mid, Phase::ED, &[1, 1, 1, 1]),
            ],
        };
        let rep = evaluate_run(&[pred], &gt, &spacings(&["a", "b"]), 1).unwrap();
        // Pooled: overlap 5, sizes 5 and 6.
        let full = rep.mean_dice("m", ReportRegion::Full, Phase::ED).unwrap();
        assert!((full - 10.0 / 11.0).abs() < 1e-12);
        assert!((rep.mean_dice("m", ReportRegion::Base, Phase::ED).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let v = rep.volumes.iter().find(|v| v.1 == "a").unwrap();
        assert!((v.3 - 0.01).abs() < 1e-12 && (v.4 - 0.02).abs() < 1e-12);
    }

    #[test]
    fn unmatched_ids_are_data_errors() {
        let gt = vec![case("a", "s", Region::Base, Phase::ED, &[1])];
        let extra = MethodPredictions { method: "m".into(), cases: vec![case("z", "s", Region::Base, Phase::ED, &[1])] };
        assert!(matches!(evaluate_run(&[extra], &gt, &spacings(&["a", "z"]), 1), Err(Error::Data(_))));
        let missing = MethodPredictions { method: "m".into(), cases: vec![] };
        assert!(matches!(evaluate_run(&[missing], &gt, &spacings(&["a"]), 1), Err(Error::Data(_))));
    }

    #[test]
    fn parse_rejects_wrong_header() {
        assert!(parse_csv("method,region\n").is_err());
        assert!(parse_csv("method,region,phase,case_id,dice,sigma_v_ml,p_value\nm,nowhere,ED,a,1,,\n").is_err());
    }
}
