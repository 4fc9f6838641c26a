//! Detection and fairness metrics over prediction records.
//!
//! A record is predicted fake when `score >= threshold`. Metrics that need
//! records a group does not have skip that group and list it as excluded.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Label, PredictionRecord};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("no records")]
    Empty,
    #[error("AUC needs at least one real and one fake record")]
    SingleClass,
    #[error("no real records")]
    NoRealSamples,
    #[error("no group has the records needed for this metric")]
    NoComputableGroup,
    #[error("no group has both real and fake records")]
    NoValidGroupPair,
    #[error("reports differ in {0}")]
    MismatchedReports(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    Subgroup,
    Method,
}

impl std::str::FromStr for GroupBy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "subgroup" => Ok(Self::Subgroup),
            "method" => Ok(Self::Method),
            other => Err(format!("unknown group-by {other:?} (expected subgroup or method)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MagVariant {
    Auc,
    Acc,
}

pub fn predicted_fake(score: f64, threshold: f64) -> bool {
    score >= threshold
}

/// Splits records into named groups. Grouping by method gives each method
/// its own fakes plus every real record (the per-forgery test-set layout).
pub fn group_records(records: &[PredictionRecord], group_by: GroupBy) -> BTreeMap<String, Vec<&PredictionRecord>> {
    let mut groups: BTreeMap<String, Vec<&PredictionRecord>> = BTreeMap::new();
    match group_by {
        GroupBy::Subgroup => {
            for r in records {
                groups.entry(r.subgroup.to_string()).or_default().push(r);
            }
        }
        GroupBy::Method => {
            for r in records.iter().filter(|r| r.label == Label::Fake) {
                let key = r.method.map(|m| m.to_string()).unwrap_or_else(|| "unknown".into());
                groups.entry(key).or_default().push(r);
            }
            let reals: Vec<&PredictionRecord> = records.iter().filter(|r| r.label == Label::Real).collect();
            for g in groups.values_mut() {
                g.extend(reals.iter().copied());
            }
        }
    }
    groups
}

/// Pairwise (Mann-Whitney) AUC with ties counted as one half, computed by
/// sorting and counting tie blocks.
pub fn roc_auc<'a>(records: impl IntoIterator<Item = &'a PredictionRecord>) -> Result<f64, MetricsError> {
    let mut scored: Vec<(f64, bool)> = records.into_iter().map(|r| (r.score, r.label == Label::Fake)).collect();
    let n_pos = scored.iter().filter(|s| s.1).count() as u64;
    let n_neg = scored.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    // twice the U statistic, kept integral
    let mut twice_u: u64 = 0;
    let mut negs_below: u64 = 0;
    let mut i = 0;
    while i < scored.len() {
        let mut j = i;
        while j < scored.len() && scored[j].0 == scored[i].0 {
            j += 1;
        }
        let block = &scored[i..j];
        let pos = block.iter().filter(|s| s.1).count() as u64;
        let neg = block.len() as u64 - pos;
        twice_u += pos * (2 * negs_below + neg);
        negs_below += neg;
        i = j;
    }
    Ok((twice_u as f64 / 2.0) / (n_pos * n_neg) as f64)
}

fn count_fp(records: &[&PredictionRecord], threshold: f64) -> (u64, u64) {
    let reals = records.iter().filter(|r| r.label == Label::Real);
    let (mut n, mut fp) = (0, 0);
    for r in reals {
        n += 1;
        if predicted_fake(r.score, threshold) {
            fp += 1;
        }
    }
    (fp, n)
}

pub fn false_positive_rate(records: &[&PredictionRecord], threshold: f64) -> Option<f64> {
    let (fp, n) = count_fp(records, threshold);
    (n > 0).then(|| fp as f64 / n as f64)
}

pub fn accuracy(records: &[&PredictionRecord], threshold: f64) -> Option<f64> {
    if records.is_empty() {
        return None;
    }
    let correct = records
        .iter()
        .filter(|r| predicted_fake(r.score, threshold) == (r.label == Label::Fake))
        .count();
    Some(correct as f64 / records.len() as f64)
}

/// A fairness value and the groups that could not contribute to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub value: f64,
    pub excluded: Vec<String>,
}

/// Sum over groups of `|FPR_g - FPR_overall|`.
pub fn f_fpr(records: &[PredictionRecord], threshold: f64, group_by: GroupBy) -> Result<Outcome, MetricsError> {
    let all: Vec<&PredictionRecord> = records.iter().collect();
    let overall = false_positive_rate(&all, threshold).ok_or(MetricsError::NoRealSamples)?;
    let mut value = 0.0;
    let mut excluded = Vec::new();
    for (name, g) in group_records(records, group_by) {
        match false_positive_rate(&g, threshold) {
            Some(f) => value += (f - overall).abs(),
            None => excluded.push(name),
        }
    }
    Ok(Outcome { value, excluded })
}

/// Max minus min of a per-group metric.
pub fn f_mag(
    records: &[PredictionRecord],
    variant: MagVariant,
    threshold: f64,
    group_by: GroupBy,
) -> Result<Outcome, MetricsError> {
    let mut values = Vec::new();
    let mut excluded = Vec::new();
    for (name, g) in group_records(records, group_by) {
        let v = match variant {
            MagVariant::Auc => roc_auc(g.iter().copied()).ok(),
            MagVariant::Acc => accuracy(&g, threshold),
        };
        match v {
            Some(v) => values.push(v),
            None => excluded.push(name),
        }
    }
    let (lo, hi) = min_max(&values).ok_or(MetricsError::NoComputableGroup)?;
    Ok(Outcome { value: hi - lo, excluded })
}

fn min_max(values: &[f64]) -> Option<(f64, f64)> {
    let first = *values.first()?;
    Some(values.iter().fold((first, first), |(lo, hi), &v| (lo.min(v), hi.max(v))))
}

/// Largest across-group gap in `P(pred = k | label = k', group)` over all
/// four `(k, k')` pairs.
pub fn f_meo(records: &[PredictionRecord], threshold: f64, group_by: GroupBy) -> Result<Outcome, MetricsError> {
    // rates[k][k'] collects one value per valid group
    let mut rates: [[Vec<f64>; 2]; 2] = Default::default();
    let mut excluded = Vec::new();
    for (name, g) in group_records(records, group_by) {
        let mut n = [0u64; 2];
        let mut pred_fake = [0u64; 2];
        for r in &g {
            let y = r.label.as_u8() as usize;
            n[y] += 1;
            if predicted_fake(r.score, threshold) {
                pred_fake[y] += 1;
            }
        }
        if n[0] == 0 || n[1] == 0 {
            excluded.push(name);
            continue;
        }
        for y in 0..2 {
            let p1 = pred_fake[y] as f64 / n[y] as f64;
            let p0 = (n[y] - pred_fake[y]) as f64 / n[y] as f64;
            rates[0][y].push(p0);
            rates[1][y].push(p1);
        }
    }
    let mut value: Option<f64> = None;
    for row in &rates {
        for col in row {
            if let Some((lo, hi)) = min_max(col) {
                value = Some(value.map_or(hi - lo, |v: f64| v.max(hi - lo)));
            }
        }
    }
    value
        .map(|value| Outcome { value, excluded })
        .ok_or(MetricsError::NoValidGroupPair)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub auc: Option<f64>,
    pub acc: Option<f64>,
    pub fpr: Option<f64>,
    pub n_real: usize,
    pub n_fake: usize,
}

fn group_metrics(g: &[&PredictionRecord], threshold: f64) -> GroupMetrics {
    GroupMetrics {
        auc: roc_auc(g.iter().copied()).ok(),
        acc: accuracy(g, threshold),
        fpr: false_positive_rate(g, threshold),
        n_real: g.iter().filter(|r| r.label == Label::Real).count(),
        n_fake: g.iter().filter(|r| r.label == Label::Fake).count(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fairness {
    pub f_fpr: Option<f64>,
    pub f_mag_auc: Option<f64>,
    pub f_mag_acc: Option<f64>,
    pub f_meo: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Exclusions {
    pub f_fpr: Vec<String>,
    pub f_mag_auc: Vec<String>,
    pub f_mag_acc: Vec<String>,
    pub f_meo: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub dataset_id: Option<String>,
    pub split: Option<String>,
    pub perturbation: Option<String>,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: GroupMetrics,
    pub per_group: BTreeMap<String, GroupMetrics>,
    pub fairness: Fairness,
    pub exclusions: Exclusions,
    pub threshold: f64,
    pub group_by: GroupBy,
    pub meta: ReportMeta,
}

fn split_outcome(r: Result<Outcome, MetricsError>) -> (Option<f64>, Vec<String>) {
    match r {
        Ok(o) => (Some(o.value), o.excluded),
        Err(_) => (None, Vec::new()),
    }
}

pub fn subgroup_report(records: &[PredictionRecord], threshold: f64, group_by: GroupBy) -> Result<MetricsReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let all: Vec<&PredictionRecord> = records.iter().collect();
    let per_group = group_records(records, group_by)
        .into_iter()
        .map(|(k, g)| (k, group_metrics(&g, threshold)))
        .collect();
    let (f_fpr_v, f_fpr_x) = split_outcome(f_fpr(records, threshold, group_by));
    let (auc_v, auc_x) = split_outcome(f_mag(records, MagVariant::Auc, threshold, group_by));
    let (acc_v, acc_x) = split_outcome(f_mag(records, MagVariant::Acc, threshold, group_by));
    let (meo_v, meo_x) = split_outcome(f_meo(records, threshold, group_by));
    Ok(MetricsReport {
        overall: group_metrics(&all, threshold),
        per_group,
        fairness: Fairness {
            f_fpr: f_fpr_v,
            f_mag_auc: auc_v,
            f_mag_acc: acc_v,
            f_meo: meo_v,
        },
        exclusions: Exclusions {
            f_fpr: f_fpr_x,
            f_mag_auc: auc_x,
            f_mag_acc: acc_x,
            f_meo: meo_x,
        },
        threshold,
        group_by,
        meta: ReportMeta::default(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessDelta {
    pub delta_f_fpr: Option<f64>,
    pub delta_f_mag: Option<f64>,
    pub delta_auc: Option<f64>,
}

fn sub(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(a? - b?)
}

/// Perturbed minus clean, using the AUC variant of the magnitude gap.
pub fn robustness_delta(clean: &MetricsReport, perturbed: &MetricsReport) -> Result<RobustnessDelta, MetricsError> {
    if clean.group_by != perturbed.group_by {
        return Err(MetricsError::MismatchedReports("group_by"));
    }
    if clean.threshold != perturbed.threshold {
        return Err(MetricsError::MismatchedReports("threshold"));
    }
    Ok(RobustnessDelta {
        delta_f_fpr: sub(perturbed.fairness.f_fpr, clean.fairness.f_fpr),
        delta_f_mag: sub(perturbed.fairness.f_mag_auc, clean.fairness.f_mag_auc),
        delta_auc: sub(perturbed.overall.auc, clean.overall.auc),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsReport {
    /// One row per group; the overall row lives in the JSON form.
    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["group", "n_real", "n_fake", "auc", "acc", "fpr"]).expect("in-memory");
        for (name, g) in &self.per_group {
            w.write_record([
                name.to_string(),
                g.n_real.to_string(),
                g.n_fake.to_string(),
                opt(g.auc),
                opt(g.acc),
                opt(g.fpr),
            ])
            .expect("in-memory");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DemographicKey, Gender, Method, Race};

    fn rec(id: usize, score: f64, fake: bool, g: DemographicKey) -> PredictionRecord {
        PredictionRecord {
            sample_id: format!("r{id}"),
            score,
            label: if fake { Label::Fake } else { Label::Real },
            subgroup: g,
            method: fake.then_some(Method::SYNTH),
        }
    }

    const MW: DemographicKey = DemographicKey::new(Gender::M, Race::W);
    const FB: DemographicKey = DemographicKey::new(Gender::F, Race::B);

    #[test]
    fn auc_examples() {
        let r = vec![rec(0, 0.9, true, MW), rec(1, 0.8, true, MW), rec(2, 0.1, false, MW), rec(3, 0.2, false, MW)];
        assert_eq!(roc_auc(&r).unwrap(), 1.0);
        let tied: Vec<_> = (0..6).map(|i| rec(i, 0.4, i % 2 == 0, MW)).collect();
        assert_eq!(roc_auc(&tied).unwrap(), 0.5);
        assert_eq!(roc_auc(&r[..2]), Err(MetricsError::SingleClass));
    }

    #[test]
    fn f_fpr_two_group_example() {
        let mut r = Vec::new();
        for i in 0..10 {
            r.push(rec(i, if i < 2 { 0.9 } else { 0.1 }, false, MW));
            r.push(rec(100 + i, if i < 4 { 0.9 } else { 0.1 }, false, FB));
        }
        let o = f_fpr(&r, 0.5, GroupBy::Subgroup).unwrap();
        assert!((o.value - 0.2).abs() < 1e-15);
    }

    #[test]
    fn f_meo_constructed_example() {
        let mut r = Vec::new();
        for i in 0..10 {
            r.push(rec(i, if i < 9 { 0.9 } else { 0.1 }, true, MW));
            r.push(rec(20 + i, if i < 7 { 0.9 } else { 0.1 }, true, FB));
            r.push(rec(40 + i, if i < 1 { 0.9 } else { 0.1 }, false, MW));
            r.push(rec(60 + i, if i < 1 { 0.9 } else { 0.1 }, false, FB));
        }
        let o = f_meo(&r, 0.5, GroupBy::Subgroup).unwrap();
        assert!((o.value - 0.2).abs() < 1e-12);
    }

    #[test]
    fn f_mag_example_and_single_group() {
        let mut r = vec![rec(0, 0.9, true, MW), rec(1, 0.1, false, MW), rec(2, 0.6, true, FB), rec(3, 0.7, false, FB)];
        let o = f_mag(&r, MagVariant::Auc, 0.5, GroupBy::Subgroup).unwrap();
        assert_eq!(o.value, 1.0);
        r.retain(|x| x.subgroup == MW);
        for v in [MagVariant::Auc, MagVariant::Acc] {
            assert_eq!(f_mag(&r, v, 0.5, GroupBy::Subgroup).unwrap().value, 0.0);
        }
        assert_eq!(f_fpr(&r, 0.5, GroupBy::Subgroup).unwrap().value, 0.0);
        assert_eq!(f_meo(&r, 0.5, GroupBy::Subgroup).unwrap().value, 0.0);
    }

    #[test]
    fn exclusions_are_reported() {
        let r = vec![rec(0, 0.9, true, MW), rec(1, 0.1, false, MW), rec(2, 0.6, true, FB)];
        let o = f_fpr(&r, 0.5, GroupBy::Subgroup).unwrap();
        assert_eq!(o.excluded, vec!["F-B".to_string()]);
        let rep = subgroup_report(&r, 0.5, GroupBy::Subgroup).unwrap();
        assert_eq!(rep.exclusions.f_meo, vec!["F-B".to_string()]);
        assert_eq!(rep.per_group["F-B"].auc, None);
    }

    #[test]
    fn method_grouping_shares_reals() {
        let mut r = vec![rec(0, 0.9, true, MW), rec(1, 0.1, false, MW), rec(2, 0.6, true, FB)];
        r[2].method = Some(Method::DF);
        let g = group_records(&r, GroupBy::Method);
        assert_eq!(g.len(), 2);
        assert!(g.values().all(|v| v.iter().any(|x| x.label == Label::Real)));
        let one: Vec<_> = r.iter().filter(|x| x.method != Some(Method::DF)).cloned().collect();
        let rep = subgroup_report(&one, 0.5, GroupBy::Method).unwrap();
        assert_eq!(rep.per_group.len(), 1);
    }

    #[test]
    fn deltas() {
        let r = vec![rec(0, 0.9, true, MW), rec(1, 0.1, false, MW), rec(2, 0.6, true, FB), rec(3, 0.7, false, FB)];
        let clean = subgroup_report(&r, 0.5, GroupBy::Subgroup).unwrap();
        let d = robustness_delta(&clean, &clean).unwrap();
        assert_eq!((d.delta_auc, d.delta_f_fpr, d.delta_f_mag), (Some(0.0), Some(0.0), Some(0.0)));
        let mut p = clean.clone();
        p.fairness.f_fpr = Some(clean.fairness.f_fpr.unwrap() + 0.15);
        let d = robustness_delta(&clean, &p).unwrap();
        assert!((d.delta_f_fpr.unwrap() - 0.15).abs() < 1e-15);
        p.threshold = 0.4;
        assert_eq!(robustness_delta(&clean, &p), Err(MetricsError::MismatchedReports("threshold")));
    }

    #[test]
    fn csv_has_one_row_per_group() {
        let r = vec![rec(0, 0.9, true, MW), rec(1, 0.1, false, MW)];
        let csv = subgroup_report(&r, 0.5, GroupBy::Subgroup).unwrap().to_csv_string();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "group,n_real,n_fake,auc,acc,fpr");
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("M-W,1,1,1,1,0"));
    }
}
