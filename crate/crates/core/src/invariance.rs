//! Per-identity invariance maps: for every qualifying identity and every
//! feature, a t-test of the feature's values under two viewing conditions
//! (frontal vs profile, or still vs video).

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{select_identities, Dataset, MediaType};
use crate::error::{Error, Result};
use crate::plot;
use crate::stats::{bonferroni_alpha, t_test, TTestKind};

/// p-values below this are drawn at full intensity.
pub const DISPLAY_P_FLOOR: f64 = 1e-16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    FrontalVsProfile,
    StillVsVideo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub kind: ConditionKind,
    pub frontal_max_absyaw: f64,
    pub profile_min_absyaw: f64,
}

impl ConditionSpec {
    pub fn new(kind: ConditionKind) -> Self {
        ConditionSpec {
            kind,
            frontal_max_absyaw: 20.0,
            profile_min_absyaw: 60.0,
        }
    }

    pub fn with_yaw_thresholds(mut self, frontal_max: f64, profile_min: f64) -> Result<Self> {
        if !(0.0 <= frontal_max && frontal_max < profile_min && profile_min <= 90.0) {
            return Err(Error::invalid(format!(
                "need 0 <= frontal max ({frontal_max}) < profile min ({profile_min}) <= 90"
            )));
        }
        self.frontal_max_absyaw = frontal_max;
        self.profile_min_absyaw = profile_min;
        Ok(self)
    }
}

/// Condition group of an item. `A` is frontal or still, `B` profile or video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    A,
    B,
    Neither,
}

/// Items lacking the field a condition needs land in `Neither`.
pub fn assign_groups(ds: &Dataset, cond: &ConditionSpec) -> Vec<Group> {
    ds.metadata()
        .iter()
        .map(|rec| match cond.kind {
            ConditionKind::FrontalVsProfile => match rec.yaw_deg.map(f64::abs) {
                Some(y) if y <= cond.frontal_max_absyaw => Group::A,
                Some(y) if y >= cond.profile_min_absyaw => Group::B,
                _ => Group::Neither,
            },
            ConditionKind::StillVsVideo => match rec.media_type {
                Some(MediaType::Still) => Group::A,
                Some(MediaType::VideoFrame) => Group::B,
                None => Group::Neither,
            },
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvarianceConfig {
    pub min_per_group: usize,
    /// Family-wise alpha before Bonferroni correction over the features.
    pub alpha: f64,
    pub test: TTestKind,
}

impl Default for InvarianceConfig {
    fn default() -> Self {
        InvarianceConfig {
            min_per_group: 20,
            alpha: 0.05,
            test: TTestKind::Welch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub n_a: usize,
    pub n_b: usize,
}

/// Feature × identity grid of p-values. Rows are features, columns identities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceMap {
    pub identities: Vec<String>,
    pub feature_count: usize,
    /// Row-major, `feature_count` rows by `identities.len()` columns.
    pub p_values: Vec<f64>,
    pub alpha_corrected: f64,
    pub significant: Vec<bool>,
    pub counts: Vec<GroupCounts>,
}

impl InvarianceMap {
    /// Wraps precomputed p-values, deriving the significance mask.
    pub fn from_p_values(
        identities: Vec<String>,
        feature_count: usize,
        p_values: Vec<f64>,
        alpha_corrected: f64,
        counts: Vec<GroupCounts>,
    ) -> Result<Self> {
        if p_values.len() != feature_count * identities.len() || counts.len() != identities.len() {
            return Err(Error::invalid("p-value grid does not match its labels"));
        }
        if p_values.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("p-values must lie in [0, 1]"));
        }
        let significant = p_values.iter().map(|&p| p < alpha_corrected).collect();
        Ok(InvarianceMap {
            identities,
            feature_count,
            p_values,
            alpha_corrected,
            significant,
            counts,
        })
    }

    pub fn identity_count(&self) -> usize {
        self.identities.len()
    }

    pub fn p_value(&self, feature: usize, identity: usize) -> f64 {
        self.p_values[feature * self.identities.len() + identity]
    }

    pub fn is_significant(&self, feature: usize, identity: usize) -> bool {
        self.significant[feature * self.identities.len() + identity]
    }

    pub fn significant_in_column(&self, identity: usize) -> usize {
        (0..self.feature_count)
            .filter(|&f| self.is_significant(f, identity))
            .count()
    }

    /// CSV of p-values: header of identity labels, one row per feature.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["feature".to_string()];
        header.extend(self.identities.iter().cloned());
        wtr.write_record(&header)?;
        for f in 0..self.feature_count {
            let mut row = vec![format!("f{f}")];
            row.extend((0..self.identity_count()).map(|i| format!("{:e}", self.p_value(f, i))));
            wtr.write_record(&row)?;
        }
        wtr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Welch (or pooled) t-test of group A vs group B per identity and feature,
/// over identities with at least `min_per_group` items in each group.
/// Alpha is Bonferroni-corrected by the feature count.
pub fn compute_invariance_map(
    ds: &Dataset,
    cond: &ConditionSpec,
    cfg: &InvarianceConfig,
) -> Result<InvarianceMap> {
    let identities = select_identities(ds, cond, cfg.min_per_group.max(2));
    if identities.is_empty() {
        return Err(Error::NoQualifyingIdentities {
            min_per_group: cfg.min_per_group,
        });
    }
    let groups = assign_groups(ds, cond);
    let by_subject = ds.indices_by_subject();
    let fm = ds.features();
    let d = fm.cols();

    let columns: Vec<(Vec<f64>, GroupCounts)> = identities
        .par_iter()
        .map(|id| {
            let items = &by_subject[id.as_str()];
            let pick = |g: Group| -> Vec<usize> {
                items.iter().copied().filter(|&i| groups[i] == g).collect()
            };
            let (rows_a, rows_b) = (pick(Group::A), pick(Group::B));
            let mut column = Vec::with_capacity(d);
            for f in 0..d {
                // Sorted samples make the sums independent of item order.
                let mut a = fm.column_at(f, &rows_a);
                let mut b = fm.column_at(f, &rows_b);
                a.sort_by(f64::total_cmp);
                b.sort_by(f64::total_cmp);
                column.push(t_test(&a, &b, cfg.test)?.p_value);
            }
            Ok((
                column,
                GroupCounts {
                    n_a: rows_a.len(),
                    n_b: rows_b.len(),
                },
            ))
        })
        .collect::<Result<_>>()?;

    let n_id = identities.len();
    let mut p_values = vec![0.0; d * n_id];
    for (i, (column, _)) in columns.iter().enumerate() {
        for (f, &p) in column.iter().enumerate() {
            p_values[f * n_id + i] = p;
        }
    }
    let counts = columns.into_iter().map(|(_, c)| c).collect();
    InvarianceMap::from_p_values(
        identities,
        d,
        p_values,
        bonferroni_alpha(cfg.alpha, d),
        counts,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityInvariance {
    pub identity: String,
    pub significant_count: usize,
    pub fraction_significant: f64,
    /// `1 - fraction_significant`.
    pub fraction_undifferentiated: f64,
    pub n_a: usize,
    pub n_b: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceIndex {
    pub entries: Vec<IdentityInvariance>,
}

pub fn invariance_index(map: &InvarianceMap) -> InvarianceIndex {
    let entries = map
        .identities
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let count = map.significant_in_column(i);
            let fraction = count as f64 / map.feature_count as f64;
            IdentityInvariance {
                identity: id.clone(),
                significant_count: count,
                fraction_significant: fraction,
                fraction_undifferentiated: 1.0 - fraction,
                n_a: map.counts[i].n_a,
                n_b: map.counts[i].n_b,
            }
        })
        .collect();
    InvarianceIndex { entries }
}

/// The `k` identities with the fewest significant features; ties go to the
/// smaller label.
pub fn rank_invariant_identities(index: &InvarianceIndex, k: usize) -> Result<Vec<String>> {
    if k > index.entries.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the {} identities in the map",
            index.entries.len()
        )));
    }
    let mut order: Vec<&IdentityInvariance> = index.entries.iter().collect();
    order.sort_by(|a, b| {
        a.fraction_significant
            .total_cmp(&b.fraction_significant)
            .then_with(|| a.identity.cmp(&b.identity))
    });
    Ok(order
        .into_iter()
        .take(k)
        .map(|e| e.identity.clone())
        .collect())
}

/// Writes the map as an SVG heatmap. Output bytes depend only on the map.
pub fn emit_heatmap(map: &InvarianceMap, path: &Path) -> Result<()> {
    fs::write(path, plot::heatmap_svg(map)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{join, FeatureMatrix, MetadataRecord};

    fn map_with(p: Vec<f64>, features: usize, ids: &[&str], alpha: f64) -> InvarianceMap {
        let identities: Vec<String> = ids.iter().map(|s| s.to_string()).collect();
        let counts = vec![GroupCounts { n_a: 20, n_b: 20 }; ids.len()];
        InvarianceMap::from_p_values(identities, features, p, alpha, counts).unwrap()
    }

    fn yaw_dataset(yaws: &[Option<f64>]) -> Dataset {
        let recs: Vec<MetadataRecord> = yaws
            .iter()
            .enumerate()
            .map(|(i, &y)| MetadataRecord {
                item_id: format!("i{i}"),
                subject_id: "s".into(),
                media_type: Some(if i % 2 == 0 {
                    MediaType::Still
                } else {
                    MediaType::VideoFrame
                }),
                yaw_deg: y,
                pitch_deg: None,
                roll_deg: None,
                template_id: None,
            })
            .collect();
        let fm = FeatureMatrix::new(
            recs.iter().map(|r| r.item_id.clone()).collect(),
            1,
            vec![0.0; recs.len()],
        )
        .unwrap();
        join(&fm, &recs, &[]).unwrap()
    }

    #[test]
    fn yaw_thresholds() {
        let ds = yaw_dataset(&[
            Some(0.0),
            Some(90.0),
            Some(40.0),
            Some(-20.0),
            Some(-60.0),
            None,
        ]);
        let g = assign_groups(&ds, &ConditionSpec::new(ConditionKind::FrontalVsProfile));
        use Group::*;
        assert_eq!(g, [A, B, Neither, A, B, Neither]);
    }

    #[test]
    fn media_partition_is_total() {
        let ds = yaw_dataset(&[None, None, None]);
        let g = assign_groups(&ds, &ConditionSpec::new(ConditionKind::StillVsVideo));
        assert_eq!(g, [Group::A, Group::B, Group::A]);
    }

    #[test]
    fn uniform_yaw_group_fractions() {
        let n = 90_001;
        let yaws: Vec<Option<f64>> = (0..n)
            .map(|i| Some(90.0 * i as f64 / (n - 1) as f64))
            .collect();
        let g = assign_groups(
            &yaw_dataset(&yaws),
            &ConditionSpec::new(ConditionKind::FrontalVsProfile),
        );
        let frac = |grp| g.iter().filter(|&&x| x == grp).count() as f64 / n as f64;
        assert!((frac(Group::A) - 2.0 / 9.0).abs() < 1e-3);
        assert!((frac(Group::B) - 1.0 / 3.0).abs() < 1e-3);
    }

    #[test]
    fn bad_thresholds_rejected() {
        let c = ConditionSpec::new(ConditionKind::FrontalVsProfile);
        assert!(c.with_yaw_thresholds(60.0, 20.0).is_err());
        assert!(c.with_yaw_thresholds(10.0, 45.0).is_ok());
    }

    #[test]
    fn null_map_has_zero_fraction() {
        let map = map_with(vec![1.0; 6], 3, &["a", "b"], 0.01);
        let idx = invariance_index(&map);
        assert!(idx.entries.iter().all(|e| e.fraction_significant == 0.0));
    }

    #[test]
    fn half_planted_column() {
        let p: Vec<f64> = (0..320).map(|f| if f < 160 { 0.0 } else { 0.5 }).collect();
        let map = map_with(p, 320, &["x"], bonferroni_alpha(0.05, 320));
        let e = &invariance_index(&map).entries[0];
        assert_eq!(e.fraction_significant, 0.5);
        assert_eq!(e.fraction_undifferentiated, 0.5);
    }

    fn index_of(fracs: &[(&str, f64)]) -> InvarianceIndex {
        InvarianceIndex {
            entries: fracs
                .iter()
                .map(|&(id, f)| IdentityInvariance {
                    identity: id.into(),
                    significant_count: 0,
                    fraction_significant: f,
                    fraction_undifferentiated: 1.0 - f,
                    n_a: 0,
                    n_b: 0,
                })
                .collect(),
        }
    }

    #[test]
    fn ranking_and_ties() {
        let idx = index_of(&[("a", 0.1), ("b", 0.5), ("c", 0.02)]);
        assert_eq!(rank_invariant_identities(&idx, 2).unwrap(), ["c", "a"]);
        let idx = index_of(&[("z", 0.3), ("m", 0.3), ("b", 0.3)]);
        assert_eq!(rank_invariant_identities(&idx, 2).unwrap(), ["b", "m"]);
        assert!(rank_invariant_identities(&idx, 4).is_err());
    }

    #[test]
    fn heatmap_structure_and_determinism() {
        let map = map_with(vec![0.0, 0.5, 1e-30, 1.0], 2, &["a", "b<&>"], 0.01);
        let svg = plot::heatmap_svg(&map);
        assert_eq!(svg.matches("<rect class=\"cell").count(), 4);
        assert_eq!(svg.matches("class=\"cell sig\"").count(), 2);
        assert!(svg.contains("b&lt;&amp;&gt;"));

        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.svg"), dir.path().join("b.svg"));
        emit_heatmap(&map, &p1).unwrap();
        emit_heatmap(&map, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert!(emit_heatmap(&map, &dir.path().join("missing/x.svg")).is_err());
    }

    #[test]
    fn solid_significant_column() {
        let mut p = vec![0.9; 320 * 3];
        for f in 0..320 {
            p[f * 3 + 1] = 1e-9;
        }
        let map = map_with(p, 320, &["a", "b", "c"], bonferroni_alpha(0.05, 320));
        assert_eq!(map.significant_in_column(1), 320);
        assert!((0..320).all(|f| map.is_significant(f, 1)));
        assert_eq!(map.significant_in_column(0), 0);
    }

    #[test]
    fn p_value_csv_layout() {
        let map = map_with(vec![0.25, 1.0, 0.5, 0.0], 2, &["a", "b"], 0.01);
        let mut out = Vec::new();
        map.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "feature,a,b");
        assert_eq!(lines[1], "f0,2.5e-1,1e0");
        assert_eq!(lines.len(), 3);
    }
}
