//! Synthetic embedding datasets with planted structure.
//!
//! Each item's features are
//!
//! ```text
//! q · ( c_id + pose_scale · (|yaw| + e) · u  [non-invariant identities only]
//!            + media_shift · m                [still images only]
//!            + noise_sd · s_id · z )
//! ```
//!
//! with `c_id ~ N(0, identity_spread²)`, `e ~ N(0, yaw_noise_deg²)`, unit
//! directions `u ⟂ m`, isotropic `z`, per-identity noise multiplier `s_id`
//! and per-item quality `q`. With `unit_norm_base` the bracket is scaled to
//! unit length first, so `|x| = q` exactly.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{join, Dataset, FeatureMatrix, MediaType, MetadataRecord};
use crate::error::{Error, Result};
use crate::stats::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_identities: usize,
    pub items_per_identity: usize,
    pub dim: usize,
    pub identity_spread: f64,
    pub noise_sd: f64,
    /// Feature units per degree of |yaw| along the pose direction.
    pub pose_scale: f64,
    /// Noise on the planted yaw signal, in degrees.
    pub yaw_noise_deg: f64,
    pub media_shift: f64,
    pub still_fraction: f64,
    pub pitch_sd_deg: f64,
    pub invariant_identity_fraction: f64,
    /// Multiplies the isotropic noise of invariant identities.
    pub invariant_noise_scale: f64,
    /// Per-item quality multiplier drawn uniformly from this range.
    pub quality_range: [f64; 2],
    pub unit_norm_base: bool,
    pub template_size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_identities: 38,
            items_per_identity: 200,
            dim: 64,
            identity_spread: 1.0,
            noise_sd: 1.0,
            pose_scale: 0.1,
            yaw_noise_deg: 5.0,
            media_shift: 2.0,
            still_fraction: 0.5,
            pitch_sd_deg: 10.0,
            invariant_identity_fraction: 7.0 / 38.0,
            invariant_noise_scale: 1.0,
            quality_range: [1.0, 1.0],
            unit_norm_base: false,
            template_size: 10,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities == 0
            || self.items_per_identity == 0
            || self.dim == 0
            || self.template_size == 0
        {
            return Err(Error::invalid(
                "identity, item, dimension and template counts must be positive",
            ));
        }
        if self.dim < 2 {
            return Err(Error::invalid(
                "need at least two dimensions for the pose and media directions",
            ));
        }
        let non_negative = [
            ("identity_spread", self.identity_spread),
            ("noise_sd", self.noise_sd),
            ("yaw_noise_deg", self.yaw_noise_deg),
            ("pitch_sd_deg", self.pitch_sd_deg),
            ("invariant_noise_scale", self.invariant_noise_scale),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be non-negative")));
            }
        }
        for (name, v) in [
            (
                "invariant_identity_fraction",
                self.invariant_identity_fraction,
            ),
            ("still_fraction", self.still_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1]")));
            }
        }
        let [lo, hi] = self.quality_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid("quality range must satisfy 0 < low <= high"));
        }
        Ok(())
    }

    /// Expected mean absolute error of a perfect linear yaw probe.
    pub fn yaw_mae_floor(&self) -> f64 {
        self.yaw_noise_deg * (2.0 / std::f64::consts::PI).sqrt()
    }
}

/// Everything planted by [`generate`], aligned with the dataset rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SynthSpec,
    pub identities: Vec<String>,
    /// Sorted by label.
    pub invariant_identities: Vec<String>,
    pub pose_direction: Vec<f64>,
    pub media_direction: Vec<f64>,
    pub yaw_mae_floor: f64,
    pub qualities: Vec<f64>,
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_vector<R: Rng>(rng: &mut R, d: usize, against: Option<&[f64]>) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..d).map(|_| gauss(rng)).collect();
        if let Some(u) = against {
            let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= proj * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            return v;
        }
    }
}

pub fn generate(spec: &SynthSpec) -> Result<(Dataset, GroundTruth)> {
    spec.validate()?;
    let d = spec.dim;
    let mut rng = stream_rng(spec.seed, 0);

    let identities: Vec<String> = (0..spec.n_identities).map(|i| format!("s{i:03}")).collect();
    let n_invariant =
        (spec.invariant_identity_fraction * spec.n_identities as f64).round() as usize;
    let mut order: Vec<usize> = (0..spec.n_identities).collect();
    order.shuffle(&mut rng);
    let mut is_invariant = vec![false; spec.n_identities];
    order[..n_invariant]
        .iter()
        .for_each(|&i| is_invariant[i] = true);

    let pose_direction = unit_vector(&mut rng, d, None);
    let media_direction = unit_vector(&mut rng, d, Some(&pose_direction));
    let yaw_noise = Normal::new(0.0, spec.yaw_noise_deg).expect("non-negative sd");
    let pitch = Normal::new(0.0, spec.pitch_sd_deg).expect("non-negative sd");
    let roll = Normal::new(0.0, 5.0).expect("valid sd");
    let [q_lo, q_hi] = spec.quality_range;

    let n = spec.n_identities * spec.items_per_identity;
    let mut rows = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    let mut qualities = Vec::with_capacity(n);
    for (id, subject) in identities.iter().enumerate() {
        let centroid: Vec<f64> = (0..d)
            .map(|_| spec.identity_spread * gauss(&mut rng))
            .collect();
        let noise_scale = spec.noise_sd
            * if is_invariant[id] {
                spec.invariant_noise_scale
            } else {
                1.0
            };
        for item in 0..spec.items_per_identity {
            let yaw: f64 = rng.random_range(-90.0..=90.0);
            let still = rng.random::<f64>() < spec.still_fraction;
            let yaw_latent = yaw.abs() + yaw_noise.sample(&mut rng);
            let mut x = centroid.clone();
            if !is_invariant[id] {
                x.iter_mut()
                    .zip(&pose_direction)
                    .for_each(|(v, u)| *v += spec.pose_scale * yaw_latent * u);
            }
            if still {
                x.iter_mut()
                    .zip(&media_direction)
                    .for_each(|(v, m)| *v += spec.media_shift * m);
            }
            for v in x.iter_mut() {
                *v += noise_scale * gauss(&mut rng);
            }
            if spec.unit_norm_base {
                let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    x.iter_mut().for_each(|v| *v /= norm);
                }
            }
            let q = if q_hi > q_lo {
                rng.random_range(q_lo..q_hi)
            } else {
                q_lo
            };
            x.iter_mut().for_each(|v| *v *= q);

            records.push(MetadataRecord {
                item_id: format!("{subject}_{item:05}"),
                subject_id: subject.clone(),
                media_type: Some(if still {
                    MediaType::Still
                } else {
                    MediaType::VideoFrame
                }),
                yaw_deg: Some(yaw),
                pitch_deg: Some(pitch.sample(&mut rng)),
                roll_deg: Some(roll.sample(&mut rng)),
                template_id: Some(format!("{subject}_t{:03}", item / spec.template_size)),
            });
            rows.push(x);
            qualities.push(q);
        }
    }

    let fm = FeatureMatrix::from_rows(records.iter().map(|r| r.item_id.clone()).collect(), &rows)?;
    let ds = join(&fm, &records, &[])?;
    let mut invariant_identities: Vec<String> = identities
        .iter()
        .zip(&is_invariant)
        .filter(|(_, &inv)| inv)
        .map(|(s, _)| s.clone())
        .collect();
    invariant_identities.sort();
    Ok((
        ds,
        GroundTruth {
            spec: *spec,
            identities,
            invariant_identities,
            pose_direction,
            media_direction,
            yaw_mae_floor: spec.yaw_mae_floor(),
            qualities,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = SynthSpec {
            n_identities: 4,
            items_per_identity: 10,
            dim: 8,
            seed: 3,
            ..Default::default()
        };
        let (a, ga) = generate(&spec).unwrap();
        let (b, gb) = generate(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
        let (c, _) = generate(&SynthSpec { seed: 4, ..spec }).unwrap();
        assert_ne!(a.features(), c.features());
    }

    #[test]
    fn noiseless_identity_rows_differ_only_by_planted_shifts() {
        let spec = SynthSpec {
            n_identities: 1,
            items_per_identity: 50,
            dim: 6,
            noise_sd: 0.0,
            yaw_noise_deg: 0.0,
            seed: 1,
            ..Default::default()
        };
        let (ds, truth) = generate(&spec).unwrap();
        let base = ds
            .features()
            .row(0)
            .iter()
            .map(|&v| f64::from(v))
            .collect::<Vec<_>>();
        let planted = |i: usize| {
            let rec = &ds.metadata()[i];
            let yaw = rec.yaw_deg.unwrap().abs();
            let still = f64::from(u8::from(rec.media_type == Some(MediaType::Still)));
            let pose = if truth.invariant_identities.is_empty() {
                spec.pose_scale
            } else {
                0.0
            };
            (0..6)
                .map(|j| {
                    pose * yaw * truth.pose_direction[j]
                        + spec.media_shift * still * truth.media_direction[j]
                })
                .collect::<Vec<f64>>()
        };
        let p0 = planted(0);
        for i in 1..50 {
            let pi = planted(i);
            for j in 0..6 {
                let expected = base[j] - p0[j] + pi[j];
                assert!((ds.features().value(i, j) - expected).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn invariant_count_and_quality_norm() {
        let spec = SynthSpec {
            n_identities: 38,
            items_per_identity: 5,
            dim: 16,
            unit_norm_base: true,
            quality_range: [0.5, 3.0],
            seed: 9,
            ..Default::default()
        };
        let (ds, truth) = generate(&spec).unwrap();
        assert_eq!(truth.invariant_identities.len(), 7);
        assert!(
            (truth
                .pose_direction
                .iter()
                .zip(&truth.media_direction)
                .map(|(a, b)| a * b)
                .sum::<f64>())
            .abs()
                < 1e-12
        );
        for (i, q) in truth.qualities.iter().enumerate() {
            let norm = ds
                .features()
                .row(i)
                .iter()
                .map(|&v| f64::from(v).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((norm - q).abs() < 1e-5 * q);
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(generate(&SynthSpec {
            dim: 0,
            ..Default::default()
        })
        .is_err());
        assert!(generate(&SynthSpec {
            noise_sd: -1.0,
            ..Default::default()
        })
        .is_err());
        assert!(generate(&SynthSpec {
            invariant_identity_fraction: 1.5,
            ..Default::default()
        })
        .is_err());
        assert!(generate(&SynthSpec {
            quality_range: [2.0, 1.0],
            ..Default::default()
        })
        .is_err());
    }
}
