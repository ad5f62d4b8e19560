//! Quality index: items ranked by the Euclidean distance of their raw
//! feature vector from the center of the feature space.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::FeatureMatrix;
use crate::error::{Error, Result};
use crate::stats::nearest_rank;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Center {
    #[default]
    Origin,
    Centroid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub item_id: String,
    /// Row in the source matrix.
    pub row: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityRanking {
    /// Ascending by distance, ties by item id.
    pub items: Vec<RankedItem>,
    pub center: Center,
    pub center_vector: Vec<f64>,
}

pub fn rank_by_center_distance(fm: &FeatureMatrix, center: Center) -> Result<QualityRanking> {
    let (n, d) = (fm.rows(), fm.cols());
    if n == 0 {
        return Err(Error::invalid("cannot rank an empty matrix"));
    }
    let center_vector = match center {
        Center::Origin => vec![0.0; d],
        Center::Centroid => {
            let mut c = vec![0.0; d];
            for r in 0..n {
                for (acc, &v) in c.iter_mut().zip(fm.row(r)) {
                    *acc += f64::from(v);
                }
            }
            c.iter_mut().for_each(|v| *v /= n as f64);
            c
        }
    };
    let mut items: Vec<RankedItem> = (0..n)
        .map(|r| RankedItem {
            item_id: fm.item_ids()[r].clone(),
            row: r,
            distance: fm
                .row(r)
                .iter()
                .zip(&center_vector)
                .map(|(&v, c)| (f64::from(v) - c).powi(2))
                .sum::<f64>()
                .sqrt(),
        })
        .collect();
    items.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then_with(|| a.item_id.cmp(&b.item_id))
    });
    Ok(QualityRanking {
        items,
        center,
        center_vector,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Take {
    Count(usize),
    /// Rounded to the nearest count.
    Fraction(f64),
}

impl QualityRanking {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Items closest to the center.
    pub fn head(&self, take: Take) -> Result<&[RankedItem]> {
        let n = self.items.len();
        let k = match take {
            Take::Count(k) => k,
            Take::Fraction(f) => {
                if !(0.0..=1.0).contains(&f) {
                    return Err(Error::invalid(format!("fraction {f} outside [0, 1]")));
                }
                (f * n as f64).round() as usize
            }
        };
        if k > n {
            return Err(Error::invalid(format!("asked for {k} of {n} items")));
        }
        Ok(&self.items[..k])
    }

    /// `count` consecutive items centered on rank `ceil(p/100 * n)`, clamped
    /// to stay inside the ranking.
    pub fn percentile_band(&self, p: f64, count: usize) -> Result<&[RankedItem]> {
        let n = self.items.len();
        if count > n {
            return Err(Error::invalid(format!("band of {count} exceeds {n} items")));
        }
        if !(0.0..=100.0).contains(&p) {
            return Err(Error::invalid(format!("percentile {p} outside [0, 100]")));
        }
        let start = nearest_rank(p, n).saturating_sub(count / 2).min(n - count);
        Ok(&self.items[start..start + count])
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["rank", "item_id", "distance"])?;
        for (rank, item) in self.items.iter().enumerate() {
            wtr.write_record([
                rank.to_string(),
                item.item_id.clone(),
                item.distance.to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryBand {
    pub label: String,
    pub start_rank: usize,
    pub item_ids: Vec<String>,
}

/// Item ids for the closest-to-center head and each percentile band, for
/// mounting image galleries outside this toolkit.
pub fn gallery_manifest(
    rank: &QualityRanking,
    percentiles: &[f64],
    count: usize,
) -> Result<Vec<GalleryBand>> {
    let count = count.min(rank.len());
    let ids = |items: &[RankedItem]| items.iter().map(|i| i.item_id.clone()).collect();
    let position = |items: &[RankedItem]| {
        items.first().map_or(0, |first| {
            rank.items
                .iter()
                .position(|i| i.row == first.row)
                .unwrap_or(0)
        })
    };
    let mut bands = vec![GalleryBand {
        label: "closest".into(),
        start_rank: 0,
        item_ids: ids(rank.head(Take::Count(count))?),
    }];
    for &p in percentiles {
        let band = rank.percentile_band(p, count)?;
        bands.push(GalleryBand {
            label: format!("p{p}"),
            start_rank: position(band),
            item_ids: ids(band),
        });
    }
    Ok(bands)
}
