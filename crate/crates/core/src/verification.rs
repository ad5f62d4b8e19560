//! Template-level identity verification: mean-pooled templates compared by
//! cosine similarity, summarized as ROC curves. The comparison splits pairs
//! into those where both identities are the most invariantly coded and all
//! other pairs.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::invariance::{invariance_index, rank_invariant_identities, InvarianceMap};
use crate::stats::{mix64, stream_rng};

pub const COMPARATOR: &str = "mean_pool_cosine";
pub const DEFAULT_IMPOSTOR_CAP: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub template_id: String,
    pub subject_id: String,
    pub items: Vec<usize>,
    pub pooled_feature: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Grouping {
    ByTemplateId,
    BySubject,
    /// Each subject's items shuffled and cut into templates of `size`;
    /// a shorter remainder becomes its own template.
    RandomSplit {
        size: usize,
        seed: u64,
    },
}

fn pooled(ds: &Dataset, items: &[usize]) -> Vec<f64> {
    let fm = ds.features();
    let mut acc = vec![0.0; fm.cols()];
    for &i in items {
        for (a, &v) in acc.iter_mut().zip(fm.row(i)) {
            *a += f64::from(v);
        }
    }
    let n = items.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Groups dataset items into templates, ordered by template id.
pub fn build_templates(ds: &Dataset, grouping: Grouping) -> Result<Vec<Template>> {
    let mut groups: BTreeMap<String, (String, Vec<usize>)> = BTreeMap::new();
    match grouping {
        Grouping::ByTemplateId => {
            for (i, rec) in ds.metadata().iter().enumerate() {
                let Some(tid) = &rec.template_id else {
                    continue;
                };
                let entry = groups
                    .entry(tid.clone())
                    .or_insert_with(|| (rec.subject_id.clone(), Vec::new()));
                if entry.0 != rec.subject_id {
                    return Err(Error::MixedTemplate {
                        template: tid.clone(),
                        first: entry.0.clone(),
                        second: rec.subject_id.clone(),
                    });
                }
                entry.1.push(i);
            }
        }
        Grouping::BySubject => {
            for (subject, items) in ds.indices_by_subject() {
                groups.insert(subject.to_string(), (subject.to_string(), items));
            }
        }
        Grouping::RandomSplit { size, seed } => {
            if size == 0 {
                return Err(Error::invalid("template size must be positive"));
            }
            for (k, (subject, mut items)) in ds.indices_by_subject().into_iter().enumerate() {
                let mut rng = stream_rng(seed, mix64(k as u64));
                items.shuffle(&mut rng);
                for (c, chunk) in items.chunks(size).enumerate() {
                    groups.insert(
                        format!("{subject}#{c:04}"),
                        (subject.to_string(), chunk.to_vec()),
                    );
                }
            }
        }
    }
    if groups.is_empty() {
        return Err(Error::invalid("no item carries a template assignment"));
    }
    groups
        .into_iter()
        .map(|(template_id, (subject_id, items))| {
            if items.is_empty() {
                return Err(Error::EmptyTemplate(template_id));
            }
            Ok(Template {
                pooled_feature: pooled(ds, &items),
                template_id,
                subject_id,
                items,
            })
        })
        .collect()
}

/// Cosine similarity of the pooled features.
pub fn template_similarity(t1: &Template, t2: &Template) -> Result<f64> {
    if t1.pooled_feature.len() != t2.pooled_feature.len() {
        return Err(Error::invalid("templates differ in dimensionality"));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (n1, n2) = (norm(&t1.pooled_feature), norm(&t2.pooled_feature));
    if n1 == 0.0 {
        return Err(Error::ZeroNorm(t1.template_id.clone()));
    }
    if n2 == 0.0 {
        return Err(Error::ZeroNorm(t2.template_id.clone()));
    }
    let dot: f64 = t1
        .pooled_feature
        .iter()
        .zip(&t2.pooled_feature)
        .map(|(a, b)| a * b)
        .sum();
    Ok((dot / (n1 * n2)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(false_accept_rate, true_accept_rate)` from (0, 0) to (1, 1).
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
    pub genuine: usize,
    pub impostor: usize,
}

impl RocCurve {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["far", "tar"])?;
        for &(far, tar) in &self.points {
            wtr.write_record([far.to_string(), tar.to_string()])?;
        }
        wtr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// Highest TAR reached at or below the given FAR.
    pub fn tar_at_far(&self, far: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.0 <= far)
            .map(|p| p.1)
            .fold(0.0, f64::max)
    }
}

pub fn trapezoid_auc(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// ROC over `(score, same_identity)` pairs, accepting scores `>=` each
/// distinct threshold in turn. Only the score order matters.
pub fn roc(pairs: &[(f64, bool)]) -> Result<RocCurve> {
    let genuine = pairs.iter().filter(|p| p.1).count();
    let impostor = pairs.len() - genuine;
    if genuine == 0 || impostor == 0 {
        return Err(Error::DegeneratePairs {
            set: "roc",
            missing: if genuine == 0 { "genuine" } else { "impostor" },
        });
    }
    if pairs.iter().any(|p| p.0.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let score = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == score {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / impostor as f64, tp as f64 / genuine as f64));
    }
    Ok(RocCurve {
        auc: trapezoid_auc(&points),
        points,
        genuine,
        impostor,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerificationConfig {
    pub k: usize,
    pub grouping: Grouping,
    /// Impostor pairs kept per set, sampled with `seed` when exceeded.
    pub impostor_cap: usize,
    pub seed: u64,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        VerificationConfig {
            k: 7,
            grouping: Grouping::ByTemplateId,
            impostor_cap: DEFAULT_IMPOSTOR_CAP,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub invariant_identities: Vec<String>,
    pub roc_invariant: RocCurve,
    pub roc_rest: RocCurve,
    pub comparator: String,
    pub template_count: usize,
    pub config: VerificationConfig,
}

fn cap_impostors(pairs: &mut Vec<(usize, usize, bool)>, cap: usize, seed: u64, stream: u64) {
    let impostors = pairs.iter().filter(|p| !p.2).count();
    if impostors <= cap {
        return;
    }
    let mut rng = stream_rng(seed, stream);
    let mut keep: Vec<usize> = (0..impostors).collect();
    keep.shuffle(&mut rng);
    let mut keep_flag = vec![false; impostors];
    keep[..cap].iter().for_each(|&k| keep_flag[k] = true);
    let mut k = 0;
    pairs.retain(|p| {
        if p.2 {
            return true;
        }
        k += 1;
        keep_flag[k - 1]
    });
}

/// Scores every template pair and splits them into pairs whose identities
/// are both among the `k` most invariant (set A) and all others (set B).
pub fn compare_invariant_vs_rest(
    ds: &Dataset,
    map: &InvarianceMap,
    cfg: &VerificationConfig,
) -> Result<VerificationReport> {
    let invariant = rank_invariant_identities(&invariance_index(map), cfg.k)?;
    let templates = build_templates(ds, cfg.grouping)?;
    let is_invariant: Vec<bool> = templates
        .iter()
        .map(|t| invariant.contains(&t.subject_id))
        .collect();

    let mut set_a = Vec::new();
    let mut set_b = Vec::new();
    for i in 0..templates.len() {
        for j in i + 1..templates.len() {
            let same = templates[i].subject_id == templates[j].subject_id;
            if is_invariant[i] && is_invariant[j] {
                set_a.push((i, j, same));
            } else {
                set_b.push((i, j, same));
            }
        }
    }
    cap_impostors(&mut set_a, cfg.impostor_cap, cfg.seed, 0);
    cap_impostors(&mut set_b, cfg.impostor_cap, cfg.seed, 1);

    let score = |set: &[(usize, usize, bool)], name: &'static str| -> Result<RocCurve> {
        let scored: Vec<(f64, bool)> = set
            .par_iter()
            .map(|&(i, j, same)| Ok((template_similarity(&templates[i], &templates[j])?, same)))
            .collect::<Result<_>>()?;
        roc(&scored).map_err(|e| match e {
            Error::DegeneratePairs { missing, .. } => Error::DegeneratePairs { set: name, missing },
            other => other,
        })
    };
    Ok(VerificationReport {
        roc_invariant: score(&set_a, "invariant")?,
        roc_rest: score(&set_b, "rest")?,
        invariant_identities: invariant,
        comparator: COMPARATOR.to_string(),
        template_count: templates.len(),
        config: *cfg,
    })
}
