//! Detection scoring: radius-criterion matching, FROC curve construction,
//! and sensitivity averaged over the seven standard FP/scan budgets.
//!
//! A candidate counts for a nodule when its Euclidean distance to the nodule
//! center is at most the nodule radius (inclusive). Accepted candidates
//! within radius of any nodule are absorbed, duplicates included, and never
//! become false positives. Thresholds sweep the distinct candidate
//! probabilities in descending order; equal probabilities enter together.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::ct::Annotation;
use crate::error::{Error, Result};
use crate::parallel::maybe_par_map;

/// False-positive-per-scan budgets the average sensitivity is taken over.
pub const OPERATING_POINTS: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub series_id: String,
    /// Same coordinate frame and unit as the annotations (world mm).
    pub center: [f64; 3],
    pub probability: f64,
}

impl Candidate {
    pub fn validate(&self) -> Result<()> {
        if !self.probability.is_finite() || !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::data(format!(
                "candidate for `{}` has probability {}, need [0,1]",
                self.series_id, self.probability
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct MatchOptions {
    /// With a roster, candidates for series outside it are an error when
    /// strict, otherwise plain false positives. Without a roster every
    /// series is considered known (nodule-free scans have no annotations).
    pub strict: bool,
    pub known_series: Option<BTreeSet<String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScanDetail {
    /// Global annotation indices detected on this scan.
    pub detected: Vec<usize>,
    pub fp_count: usize,
    pub known: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchOutcome {
    /// Global annotation indices with at least one accepted candidate in
    /// radius.
    pub detected: BTreeSet<usize>,
    pub fp_count: usize,
    pub per_scan: BTreeMap<String, ScanDetail>,
}

fn in_radius(cand: &Candidate, ann: &Annotation) -> bool {
    let r = ann.radius();
    let d2: f64 = (0..3)
        .map(|k| (cand.center[k] - ann.center_world_mm[k]).powi(2))
        .sum();
    d2 <= r * r
}

fn unknown_series_error(series: &str) -> Error {
    Error::data(format!("candidate references unknown series `{series}`"))
}

/// Matches candidates with probability >= threshold against annotations.
pub fn match_at(
    cands: &[Candidate],
    anns: &[Annotation],
    threshold: f64,
    opts: &MatchOptions,
) -> Result<MatchOutcome> {
    let mut by_scan: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, a) in anns.iter().enumerate() {
        by_scan.entry(&a.series_id).or_default().push(i);
    }
    let mut out = MatchOutcome::default();
    for scan in by_scan.keys() {
        out.per_scan.insert(
            (*scan).to_string(),
            ScanDetail {
                detected: Vec::new(),
                fp_count: 0,
                known: true,
            },
        );
    }
    for c in cands {
        c.validate()?;
        let known = match &opts.known_series {
            Some(roster) => roster.contains(&c.series_id),
            None => true,
        };
        if !known && opts.strict {
            return Err(unknown_series_error(&c.series_id));
        }
        let detail = out.per_scan.entry(c.series_id.clone()).or_insert(ScanDetail {
            detected: Vec::new(),
            fp_count: 0,
            known,
        });
        detail.known = known;
        if c.probability < threshold {
            continue;
        }
        let mut absorbed = false;
        if let Some(idxs) = by_scan.get(c.series_id.as_str()) {
            for &ai in idxs {
                if in_radius(c, &anns[ai]) {
                    absorbed = true;
                    if out.detected.insert(ai) {
                        detail.detected.push(ai);
                    }
                }
            }
        }
        if !absorbed {
            detail.fp_count += 1;
            out.fp_count += 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub fp_per_scan: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocResult {
    pub operating_points: Vec<f64>,
    pub sensitivities: Vec<f64>,
    pub average: f64,
    pub curve: Vec<CurvePoint>,
}

/// Sweeps distinct probabilities descending and reads the sensitivity at
/// each FP budget as the best sweep point at or below that budget.
pub fn froc(
    cands: &[Candidate],
    anns: &[Annotation],
    scan_count: usize,
    opts: &MatchOptions,
) -> Result<FrocResult> {
    if scan_count == 0 {
        return Err(Error::usage("scan_count must cover at least one scan"));
    }
    if anns.is_empty() {
        return Err(Error::data(
            "no annotated nodules: sensitivity is undefined",
        ));
    }
    for c in cands {
        c.validate()?;
        let known = match &opts.known_series {
            Some(roster) => roster.contains(&c.series_id),
            None => true,
        };
        if !known && opts.strict {
            return Err(unknown_series_error(&c.series_id));
        }
    }

    let mut by_scan: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, a) in anns.iter().enumerate() {
        by_scan.entry(&a.series_id).or_default().push(i);
    }
    // per candidate: annotation indices it falls inside; index-ordered
    // parallel map, so the result is identical to the sequential pass
    let covers: Vec<Vec<usize>> = maybe_par_map(cands.iter().collect(), |c: &Candidate| {
        by_scan
            .get(c.series_id.as_str())
            .map(|idxs| {
                idxs.iter()
                    .copied()
                    .filter(|&ai| in_radius(c, &anns[ai]))
                    .collect()
            })
            .unwrap_or_default()
    });

    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| {
        cands[b]
            .probability
            .total_cmp(&cands[a].probability)
            .then(a.cmp(&b))
    });

    let total = anns.len() as f64;
    let scans = scan_count as f64;
    let mut detected: BTreeSet<usize> = BTreeSet::new();
    let mut fp = 0usize;
    let mut curve = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let p = cands[order[i]].probability;
        // consume the whole tie group before emitting a sweep point
        while i < order.len() && cands[order[i]].probability == p {
            let ci = order[i];
            if covers[ci].is_empty() {
                fp += 1;
            } else {
                for &ai in &covers[ci] {
                    detected.insert(ai);
                }
            }
            i += 1;
        }
        curve.push(CurvePoint {
            threshold: p,
            fp_per_scan: fp as f64 / scans,
            sensitivity: detected.len() as f64 / total,
        });
    }

    let sensitivities: Vec<f64> = OPERATING_POINTS
        .iter()
        .map(|&budget| {
            curve
                .iter()
                .filter(|pt| pt.fp_per_scan <= budget)
                .map(|pt| pt.sensitivity)
                .fold(0.0, f64::max)
        })
        .collect();
    let average = sensitivities.iter().sum::<f64>() / sensitivities.len() as f64;
    Ok(FrocResult {
        operating_points: OPERATING_POINTS.to_vec(),
        sensitivities,
        average,
        curve,
    })
}

/// CSV serialization: curve rows, then the seven operating points, then the
/// average. Value formatting round-trips f64 exactly.
pub fn curve_to_string(result: &FrocResult) -> String {
    let mut s = String::from("section,threshold,fp_per_scan,sensitivity\n");
    for pt in &result.curve {
        writeln!(
            s,
            "curve,{},{},{}",
            pt.threshold, pt.fp_per_scan, pt.sensitivity
        )
        .unwrap();
    }
    for (op, sens) in result.operating_points.iter().zip(&result.sensitivities) {
        writeln!(s, "operating_point,,{op},{sens}").unwrap();
    }
    writeln!(s, "average,,,{}", result.average).unwrap();
    s
}

pub fn emit_curve(result: &FrocResult, path: &Path) -> Result<()> {
    std::fs::write(path, curve_to_string(result))?;
    Ok(())
}

pub fn parse_curve(text: &str) -> Result<FrocResult> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == "section,threshold,fp_per_scan,sensitivity" => {}
        _ => return Err(Error::parse("bad or missing curve header")),
    }
    let mut curve = Vec::new();
    let mut operating_points = Vec::new();
    let mut sensitivities = Vec::new();
    let mut average = None;
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::parse(format!("line {line_no}: expected 4 fields")));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::parse(format!("line {line_no}: bad number `{s}`")))
        };
        match f[0] {
            "curve" => curve.push(CurvePoint {
                threshold: num(f[1])?,
                fp_per_scan: num(f[2])?,
                sensitivity: num(f[3])?,
            }),
            "operating_point" => {
                operating_points.push(num(f[2])?);
                sensitivities.push(num(f[3])?);
            }
            "average" => average = Some(num(f[3])?),
            other => {
                return Err(Error::parse(format!(
                    "line {line_no}: unknown section `{other}`"
                )))
            }
        }
    }
    let average =
        average.ok_or_else(|| Error::parse("curve file has no average row"))?;
    if operating_points.len() != OPERATING_POINTS.len() {
        return Err(Error::parse(format!(
            "expected {} operating points, got {}",
            OPERATING_POINTS.len(),
            operating_points.len()
        )));
    }
    Ok(FrocResult {
        operating_points,
        sensitivities,
        average,
        curve,
    })
}

/// Candidate CSV: `seriesuid,coordX,coordY,coordZ,probability`.
pub fn parse_candidates(text: &str) -> Result<Vec<Candidate>> {
    let mut lines = text.lines().enumerate();
    lines
        .next()
        .ok_or_else(|| Error::parse("candidate file is empty (missing header row)"))?;
    let mut out = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(Error::parse(format!(
                "line {line_no}: expected 5 fields, got {}",
                f.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::parse(format!("line {line_no}: bad number `{}`", s.trim())))
        };
        let c = Candidate {
            series_id: f[0].trim().to_string(),
            center: [num(f[1])?, num(f[2])?, num(f[3])?],
            probability: num(f[4])?,
        };
        c.validate()?;
        out.push(c);
    }
    Ok(out)
}

pub fn candidates_to_string(cands: &[Candidate]) -> String {
    let mut s = String::from("seriesuid,coordX,coordY,coordZ,probability\n");
    for c in cands {
        writeln!(
            s,
            "{},{},{},{},{}",
            c.series_id, c.center[0], c.center[1], c.center[2], c.probability
        )
        .unwrap();
    }
    s
}
