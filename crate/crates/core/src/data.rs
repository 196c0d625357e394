//! Pooled matched case-control data and the biomarker categorization.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// How reference-laboratory values map onto the `P` exposure levels.
///
/// Level 1 (the lowest) is always the reference level.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CategoryScheme {
    cut_points: Option<Vec<f64>>,
    category_count: usize,
}

impl CategoryScheme {
    /// Categories are supplied directly as integers `1..=category_count`.
    pub fn direct(category_count: usize) -> Result<Self> {
        if category_count < 2 {
            return Err(Error::Input(format!(
                "need at least 2 categories, got {category_count}"
            )));
        }
        Ok(Self {
            cut_points: None,
            category_count,
        })
    }

    /// Categories are the intervals `[c_{p-1}, c_p)` defined by strictly
    /// increasing finite cut points.
    pub fn cut_points(cuts: Vec<f64>) -> Result<Self> {
        if cuts.is_empty() {
            return Err(Error::Input("at least one cut point is required".into()));
        }
        if cuts.iter().any(|c| !c.is_finite()) {
            return Err(Error::Input("cut points must be finite".into()));
        }
        if cuts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Input(format!(
                "cut points must be strictly increasing: {cuts:?}"
            )));
        }
        let category_count = cuts.len() + 1;
        Ok(Self {
            cut_points: Some(cuts),
            category_count,
        })
    }

    pub fn category_count(&self) -> usize {
        self.category_count
    }

    pub fn cuts(&self) -> Option<&[f64]> {
        self.cut_points.as_deref()
    }

    pub fn is_cut_point_mode(&self) -> bool {
        self.cut_points.is_some()
    }

    pub fn reference_level(&self) -> usize {
        1
    }

    /// Maps a continuous value to its 1-based category.
    pub fn categorize(&self, value: f64) -> Result<usize> {
        let cuts = self
            .cut_points
            .as_deref()
            .ok_or_else(|| Error::Input("categorize requires a cut-point scheme".into()))?;
        categorize(value, cuts)
    }
}

/// Left-closed, right-open interval lookup: returns `p` with
/// `cuts[p-2] <= value < cuts[p-1]`, taking the outer bounds as infinite.
pub fn categorize(value: f64, cuts: &[f64]) -> Result<usize> {
    if !value.is_finite() {
        return Err(Error::Input(format!(
            "cannot categorize non-finite value {value}"
        )));
    }
    Ok(1 + cuts.partition_point(|&c| c <= value))
}

/// `(P-1)`-vector of level indicators; all zeros for the reference level.
pub fn indicator_vector(category: usize, category_count: usize) -> Result<Vec<f64>> {
    if category == 0 || category > category_count {
        return Err(Error::Input(format!(
            "category {category} outside 1..={category_count}"
        )));
    }
    let mut out = vec![0.0; category_count - 1];
    if category > 1 {
        out[category - 2] = 1.0;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Participant {
    pub id: Option<String>,
    pub outcome: bool,
    /// Biomarker as measured by the study's own laboratory.
    pub local_value: f64,
    pub covariates: Vec<f64>,
    /// Reference-laboratory category, known only for calibration members.
    pub ref_category: Option<usize>,
    /// Continuous reference-laboratory value, when the study recorded it.
    pub ref_value: Option<f64>,
    pub in_calibration: bool,
}

/// One matched set. The case is always stored at index 0.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Stratum {
    pub id: String,
    pub participants: Vec<Participant>,
}

impl Stratum {
    pub fn case(&self) -> &Participant {
        &self.participants[0]
    }

    pub fn controls(&self) -> &[Participant] {
        &self.participants[1..]
    }

    /// Number of matched controls.
    pub fn matching_ratio(&self) -> usize {
        self.participants.len() - 1
    }

    pub fn len(&self) -> usize {
        self.participants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.participants.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Study {
    pub id: String,
    pub strata: Vec<Stratum>,
}

impl Study {
    pub fn participants(&self) -> impl Iterator<Item = &Participant> {
        self.strata.iter().flat_map(|s| s.participants.iter())
    }

    pub fn calibration_members(&self) -> impl Iterator<Item = &Participant> {
        self.participants().filter(|p| p.in_calibration)
    }
}

/// All studies, validated against the structural invariants on construction.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PooledDataset {
    studies: Vec<Study>,
    covariate_count: usize,
    category_count: usize,
}

impl PooledDataset {
    pub fn new(studies: Vec<Study>, covariate_count: usize, category_count: usize) -> Result<Self> {
        if category_count < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 categories, got {category_count}"
            )));
        }
        if studies.is_empty() {
            return Err(Error::Validation("dataset has no studies".into()));
        }
        let mut problems = Vec::new();
        let mut study_ids = BTreeMap::new();
        for study in &studies {
            if study_ids.insert(study.id.as_str(), ()).is_some() {
                problems.push(format!("duplicate study id {}", study.id));
            }
            if study.strata.is_empty() {
                problems.push(format!("study {} has no strata", study.id));
            }
            for stratum in &study.strata {
                let where_ = format!("study {} stratum {}", study.id, stratum.id);
                let cases = stratum.participants.iter().filter(|p| p.outcome).count();
                if cases != 1 {
                    problems.push(format!("{where_}: stratum has {cases} cases"));
                } else if !stratum.participants[0].outcome {
                    problems.push(format!("{where_}: case must be stored first"));
                }
                if stratum.participants.len() < 2 {
                    problems.push(format!("{where_}: stratum has no controls"));
                }
                for (i, p) in stratum.participants.iter().enumerate() {
                    if let Some(msg) = participant_problem(p, covariate_count, category_count) {
                        problems.push(format!("{where_} participant {}: {msg}", i + 1));
                    }
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems.join("; ")));
        }
        Ok(Self {
            studies,
            covariate_count,
            category_count,
        })
    }

    pub fn studies(&self) -> &[Study] {
        &self.studies
    }

    pub fn into_studies(self) -> Vec<Study> {
        self.studies
    }

    pub fn covariate_count(&self) -> usize {
        self.covariate_count
    }

    pub fn category_count(&self) -> usize {
        self.category_count
    }

    /// Length of the association parameter vector, `(P-1) + K`.
    pub fn parameter_count(&self) -> usize {
        self.category_count - 1 + self.covariate_count
    }

    pub fn study(&self, id: &str) -> Option<&Study> {
        self.studies.iter().find(|s| s.id == id)
    }

    pub fn strata(&self) -> impl Iterator<Item = (usize, &Stratum)> {
        self.studies
            .iter()
            .enumerate()
            .flat_map(|(s, study)| study.strata.iter().map(move |st| (s, st)))
    }

    pub fn stratum_count(&self) -> usize {
        self.studies.iter().map(|s| s.strata.len()).sum()
    }

    pub fn participant_count(&self) -> usize {
        self.strata().map(|(_, st)| st.len()).sum()
    }

    /// Same data with the studies in a different order.
    pub fn reordered(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.studies.len()];
        if order.len() != self.studies.len() {
            return Err(Error::Input("study order has the wrong length".into()));
        }
        for &i in order {
            if i >= seen.len() || core::mem::replace(&mut seen[i], true) {
                return Err(Error::Input("study order is not a permutation".into()));
            }
        }
        let studies = order.iter().map(|&i| self.studies[i].clone()).collect();
        Self::new(studies, self.covariate_count, self.category_count)
    }

    /// Marks every participant as a calibration member with the given
    /// category, e.g. to fit the known-exposure model in simulations.
    pub fn with_categories<F>(&self, mut category_of: F) -> Result<Self>
    where
        F: FnMut(usize, usize, usize) -> usize,
    {
        let mut studies = self.studies.clone();
        for (s, study) in studies.iter_mut().enumerate() {
            for (j, stratum) in study.strata.iter_mut().enumerate() {
                for (i, p) in stratum.participants.iter_mut().enumerate() {
                    p.ref_category = Some(category_of(s, j, i));
                    p.in_calibration = true;
                }
            }
        }
        Self::new(studies, self.covariate_count, self.category_count)
    }
}

fn participant_problem(p: &Participant, k: usize, categories: usize) -> Option<String> {
    if !p.local_value.is_finite() {
        return Some("local value is not finite".into());
    }
    if p.covariates.len() != k {
        return Some(format!("expected {k} covariates, found {}", p.covariates.len()));
    }
    if p.covariates.iter().any(|z| !z.is_finite()) {
        return Some("covariate is not finite".into());
    }
    match (p.in_calibration, p.ref_category) {
        (true, None) => return Some("calibration member without a reference category".into()),
        (false, Some(_)) => return Some("reference category outside the calibration subset".into()),
        (_, Some(c)) if c == 0 || c > categories => {
            return Some(format!("reference category {c} outside 1..={categories}"))
        }
        _ => {}
    }
    if matches!(p.ref_value, Some(x) if !x.is_finite()) {
        return Some("reference value is not finite".into());
    }
    None
}

/// One parsed input row, before strata are assembled.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Record {
    /// 1-based data row number, used in error messages.
    pub row: usize,
    pub study_id: String,
    pub stratum_id: String,
    pub participant_id: Option<String>,
    pub case: bool,
    pub local_value: Option<f64>,
    pub covariates: Vec<f64>,
    pub ref_category: Option<usize>,
    pub ref_value: Option<f64>,
    pub in_calibration: bool,
}

/// Groups records into studies and strata, placing each case first.
///
/// Studies and strata keep their order of first appearance. A calibration
/// row may omit its category when a continuous reference value and a
/// cut-point scheme are both available.
pub fn assemble(
    records: Vec<Record>,
    scheme: &CategoryScheme,
    covariate_count: usize,
) -> Result<PooledDataset> {
    let categories = scheme.category_count();
    let mut problems: Vec<String> = Vec::new();
    let mut study_order: Vec<String> = Vec::new();
    // (study, stratum) -> (first row, rows with their participants)
    type Members = (usize, Vec<(usize, Participant)>);
    let mut strata: BTreeMap<(String, String), Members> = BTreeMap::new();
    let mut stratum_order: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut seen_ids: BTreeMap<(String, String), usize> = BTreeMap::new();

    for rec in records {
        let row = rec.row;
        let Some(local_value) = rec.local_value else {
            problems.push(format!("row {row}: missing w"));
            continue;
        };
        if !local_value.is_finite() {
            problems.push(format!("row {row}: w is not finite"));
            continue;
        }
        if rec.covariates.len() != covariate_count {
            problems.push(format!(
                "row {row}: expected {covariate_count} covariates, found {}",
                rec.covariates.len()
            ));
            continue;
        }
        if let Some(pid) = &rec.participant_id {
            let key = (rec.study_id.clone(), pid.clone());
            if let Some(first) = seen_ids.insert(key, row) {
                problems.push(format!(
                    "row {row}: duplicate participant {pid} in study {} (first seen at row {first})",
                    rec.study_id
                ));
                continue;
            }
        }
        let mut ref_category = rec.ref_category;
        if let Some(c) = ref_category {
            if c == 0 || c > categories {
                problems.push(format!("row {row}: x_cat {c} outside 1..={categories}"));
                continue;
            }
        }
        if let (Some(x), Some(_)) = (rec.ref_value, scheme.cuts()) {
            let derived = scheme.categorize(x)?;
            match ref_category {
                None if rec.in_calibration => ref_category = Some(derived),
                Some(c) if c != derived => {
                    problems.push(format!(
                        "row {row}: x_cat {c} disagrees with x={x} (category {derived})"
                    ));
                    continue;
                }
                _ => {}
            }
        }
        if rec.in_calibration && ref_category.is_none() {
            problems.push(format!("row {row}: in_calibration=1 without x_cat"));
            continue;
        }
        if !rec.in_calibration && ref_category.is_some() {
            problems.push(format!("row {row}: x_cat given but in_calibration=0"));
            continue;
        }

        if !study_order.contains(&rec.study_id) {
            study_order.push(rec.study_id.clone());
        }
        let key = (rec.study_id.clone(), rec.stratum_id.clone());
        let entry = strata.entry(key).or_insert_with(|| {
            stratum_order
                .entry(rec.study_id.clone())
                .or_default()
                .push(rec.stratum_id.clone());
            (row, Vec::new())
        });
        entry.1.push((
            row,
            Participant {
                id: rec.participant_id,
                outcome: rec.case,
                local_value,
                covariates: rec.covariates,
                ref_category,
                ref_value: rec.ref_value,
                in_calibration: rec.in_calibration,
            },
        ));
    }

    let mut studies = Vec::with_capacity(study_order.len());
    for study_id in study_order {
        let mut study = Study {
            id: study_id.clone(),
            strata: Vec::new(),
        };
        for stratum_id in stratum_order.remove(&study_id).unwrap_or_default() {
            let (first_row, members) = strata
                .remove(&(study_id.clone(), stratum_id.clone()))
                .unwrap_or_default();
            let case_rows: Vec<usize> = members
                .iter()
                .filter(|(_, p)| p.outcome)
                .map(|(r, _)| *r)
                .collect();
            if case_rows.len() != 1 {
                problems.push(format!(
                    "study {study_id} stratum {stratum_id} (row {first_row}): stratum has {} cases{}",
                    case_rows.len(),
                    if case_rows.is_empty() {
                        String::new()
                    } else {
                        format!(" at rows {case_rows:?}")
                    }
                ));
                continue;
            }
            if members.len() < 2 {
                problems.push(format!(
                    "study {study_id} stratum {stratum_id} (row {first_row}): stratum has no controls"
                ));
                continue;
            }
            let (cases, controls): (Vec<_>, Vec<_>) =
                members.into_iter().map(|(_, p)| p).partition(|p| p.outcome);
            let mut participants = cases;
            participants.extend(controls);
            study.strata.push(Stratum {
                id: stratum_id,
                participants,
            });
        }
        studies.push(study);
    }

    if !problems.is_empty() {
        return Err(Error::Validation(problems.join("; ")));
    }
    PooledDataset::new(studies, covariate_count, categories)
}

/// Flattens a dataset back into records in storage order (case first).
pub fn records(dataset: &PooledDataset) -> Vec<Record> {
    let mut out = Vec::with_capacity(dataset.participant_count());
    for study in dataset.studies() {
        for stratum in &study.strata {
            for p in &stratum.participants {
                out.push(Record {
                    row: out.len() + 1,
                    study_id: study.id.clone(),
                    stratum_id: stratum.id.clone(),
                    participant_id: p.id.clone(),
                    case: p.outcome,
                    local_value: Some(p.local_value),
                    covariates: p.covariates.clone(),
                    ref_category: p.ref_category,
                    ref_value: p.ref_value,
                    in_calibration: p.in_calibration,
                });
            }
        }
    }
    out
}

impl core::fmt::Display for CategoryScheme {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match &self.cut_points {
            Some(c) => write!(f, "cut points {c:?}"),
            None => write!(f, "{} direct categories", self.category_count),
        }
    }
}

/// Human-readable label of each level under a scheme, e.g. `"<30"`.
pub fn level_labels(scheme: &CategoryScheme) -> Vec<String> {
    match scheme.cuts() {
        None => (1..=scheme.category_count()).map(|p| p.to_string()).collect(),
        Some(c) => {
            let mut out = Vec::with_capacity(c.len() + 1);
            out.push(format!("<{}", c[0]));
            for w in c.windows(2) {
                out.push(format!("[{}, {})", w[0], w[1]));
            }
            out.push(format!(">={}", c[c.len() - 1]));
            out
        }
    }
}
