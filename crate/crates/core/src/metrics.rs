//! Scale-invariant SDR, permutation-invariant scoring and evaluation reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::AudioClip;

/// Value reported when the residual vanishes.
pub const SI_SDR_CAP_DB: f64 = 100.0;
const CAP_RATIO: f64 = 1e-20;

#[derive(Clone, Debug, PartialEq)]
pub struct SiSdrBreakdown {
    pub s_target: Vec<f64>,
    pub e_noise: Vec<f64>,
    pub value_db: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `10 log10(‖s_target‖² / ‖e_noise‖²)` with `s_target` the projection of the
/// estimate onto the reference. Clipped to ±100 dB at the singular ends.
pub fn si_sdr(estimate: &AudioClip, reference: &AudioClip) -> Result<SiSdrBreakdown> {
    let (est, refr) = (&estimate.samples, &reference.samples);
    if est.len() != refr.len() {
        return Err(Error::LengthMismatch(est.len(), refr.len()));
    }
    let ref_energy = dot(refr, refr);
    if ref_energy == 0.0 {
        return Err(Error::ZeroReference);
    }
    let alpha = dot(est, refr) / ref_energy;
    let s_target: Vec<f64> = refr.iter().map(|s| alpha * s).collect();
    let e_noise: Vec<f64> = est.iter().zip(&s_target).map(|(e, t)| e - t).collect();
    let target_energy = dot(&s_target, &s_target);
    let noise_energy = dot(&e_noise, &e_noise);
    let value_db = if noise_energy < CAP_RATIO * target_energy {
        SI_SDR_CAP_DB
    } else if target_energy == 0.0 {
        -SI_SDR_CAP_DB
    } else {
        (10.0 * (target_energy / noise_energy).log10()).clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB)
    };
    Ok(SiSdrBreakdown {
        s_target,
        e_noise,
        value_db,
    })
}

/// SI-SDR after truncating (or zero-padding) the estimate to the reference
/// length.
pub fn si_sdr_aligned(estimate: &AudioClip, reference: &AudioClip) -> Result<f64> {
    Ok(si_sdr(&estimate.fit_to(reference.len()), reference)?.value_db)
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for rest in permutations(k - 1) {
        for pos in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(pos, k - 1);
            out.push(p);
        }
    }
    out.sort();
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PitScore {
    pub mean_db: f64,
    /// `permutation[i]` is the estimate assigned to reference `i`.
    pub permutation: Vec<usize>,
    pub per_reference_db: Vec<f64>,
}

/// Best mean SI-SDR over all assignments of estimates to references.
pub fn si_sdr_pit(estimates: &[AudioClip], references: &[AudioClip]) -> Result<PitScore> {
    if estimates.len() != references.len() || references.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} estimates for {} references",
            estimates.len(),
            references.len()
        )));
    }
    let k = references.len();
    let mut table = vec![vec![0.0; k]; k];
    for (r, reference) in references.iter().enumerate() {
        for (e, estimate) in estimates.iter().enumerate() {
            table[r][e] = si_sdr_aligned(estimate, reference)?;
        }
    }
    let mut best: Option<PitScore> = None;
    for perm in permutations(k) {
        let per: Vec<f64> = perm.iter().enumerate().map(|(r, &e)| table[r][e]).collect();
        let mean = per.iter().sum::<f64>() / k as f64;
        if best.as_ref().is_none_or(|b| mean > b.mean_db) {
            best = Some(PitScore {
                mean_db: mean,
                permutation: perm,
                per_reference_db: per,
            });
        }
    }
    Ok(best.expect("at least one permutation"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureScore {
    pub mix_id: String,
    pub si_sdr_per_speaker: Vec<f64>,
    pub mean_si_sdr: f64,
    pub permutation: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub mean: f64,
    pub stddev: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    /// `synthetic-test` or `realistic-test`.
    pub label: String,
    pub distance_m: Option<f64>,
}

/// Scores for one model on one test condition. Means are mixture means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub condition: Condition,
    pub mixtures: Vec<MixtureScore>,
    pub aggregate: Aggregate,
}

/// One test item: the mixture and its ground-truth sources.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub mix_id: String,
    pub mixture: AudioClip,
    pub references: Vec<AudioClip>,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        let count = values.len();
        if count == 0 {
            return Self {
                count,
                mean: f64::NAN,
                stddev: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / count as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
        Self {
            count,
            mean,
            stddev: var.sqrt(),
        }
    }
}

/// Runs `separate` on every item and scores the outputs with PIT SI-SDR.
pub fn evaluate_items<F>(
    model: &str,
    condition: Condition,
    items: &[EvalItem],
    mut separate: F,
) -> Result<EvalReport>
where
    F: FnMut(&AudioClip) -> Result<Vec<AudioClip>>,
{
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty test split".into()));
    }
    let mut mixtures = Vec::with_capacity(items.len());
    for item in items {
        let estimates = separate(&item.mixture)?;
        let pit = si_sdr_pit(&estimates, &item.references)?;
        mixtures.push(MixtureScore {
            mix_id: item.mix_id.clone(),
            si_sdr_per_speaker: pit.per_reference_db,
            mean_si_sdr: pit.mean_db,
            permutation: pit.permutation,
        });
    }
    let means: Vec<f64> = mixtures.iter().map(|m| m.mean_si_sdr).collect();
    Ok(EvalReport {
        model: model.to_string(),
        condition,
        aggregate: Aggregate::of(&means),
        mixtures,
    })
}

impl EvalReport {
    /// One row per mixture followed by `mean` and `stddev` aggregate rows.
    pub fn to_csv(&self) -> String {
        let k = self
            .mixtures
            .first()
            .map(|m| m.si_sdr_per_speaker.len())
            .unwrap_or(0);
        let mut out = String::from("mix_id");
        for s in 1..=k {
            let _ = write!(out, ",si_sdr_s{s}");
        }
        out.push_str(",mean_si_sdr,permutation\n");
        for m in &self.mixtures {
            out.push_str(&m.mix_id);
            for v in &m.si_sdr_per_speaker {
                let _ = write!(out, ",{v}");
            }
            let perm: Vec<String> = m.permutation.iter().map(|p| (p + 1).to_string()).collect();
            let _ = writeln!(out, ",{},{}", m.mean_si_sdr, perm.join(" "));
        }
        let blanks = ",".repeat(k);
        let _ = writeln!(out, "mean{blanks},{},", self.aggregate.mean);
        let _ = writeln!(out, "stddev{blanks},{},", self.aggregate.stddev);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clip(v: Vec<f64>) -> AudioClip {
        AudioClip::new(v, 8000).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, len: usize) -> AudioClip {
        clip((0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn hand_example() {
        let b = si_sdr(&clip(vec![1.0, 1.0]), &clip(vec![1.0, 0.0])).unwrap();
        assert_eq!(b.s_target, vec![1.0, 0.0]);
        assert_eq!(b.e_noise, vec![0.0, 1.0]);
        assert!(b.value_db.abs() <= 1e-9);
    }

    #[test]
    fn perfect_estimate_hits_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random(&mut rng, 500);
        assert_eq!(si_sdr(&s, &s).unwrap().value_db, SI_SDR_CAP_DB);
        assert_eq!(si_sdr(&s.scaled(3.0), &s).unwrap().value_db, SI_SDR_CAP_DB);
    }

    #[test]
    fn decomposition_sums_to_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (e, s) = (random(&mut rng, 300), random(&mut rng, 300));
        let b = si_sdr(&e, &s).unwrap();
        for i in 0..300 {
            assert!((b.s_target[i] + b.e_noise[i] - e.samples[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (e, s) = (random(&mut rng, 64), random(&mut rng, 64));
            let alpha = rng.random_range(0.01..100.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let a = si_sdr(&e.scaled(alpha), &s).unwrap().value_db;
            let b = si_sdr(&e, &s).unwrap().value_db;
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn orthogonal_perturbation_monotone() {
        let s = clip(vec![1.0, 0.0, 0.0, 0.0]);
        let mut last = f64::INFINITY;
        for step in 1..50 {
            let d = step as f64 * 0.05;
            let v = si_sdr(&clip(vec![1.0, d, 0.5 * d, 0.0]), &s).unwrap().value_db;
            assert!(v <= last);
            last = v;
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(
            si_sdr(&clip(vec![1.0]), &clip(vec![0.0])),
            Err(Error::ZeroReference)
        ));
        assert!(matches!(
            si_sdr(&clip(vec![1.0]), &clip(vec![1.0, 2.0])),
            Err(Error::LengthMismatch(1, 2))
        ));
        assert!(si_sdr_pit(&[clip(vec![1.0])], &[]).is_err());
    }

    #[test]
    fn pit_swapped_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, b) = (random(&mut rng, 100), random(&mut rng, 100));
        let pit = si_sdr_pit(&[b.clone(), a.clone()], &[a, b]).unwrap();
        assert_eq!(pit.permutation, vec![1, 0]);
        assert_eq!(pit.mean_db, SI_SDR_CAP_DB);
    }

    #[test]
    fn pit_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let refs = [random(&mut rng, 80), random(&mut rng, 80)];
            let mut ests = [random(&mut rng, 90), random(&mut rng, 70)];
            ests[0].samples.iter_mut().zip(&refs[1].samples).for_each(|(e, r)| *e += r);
            let pit = si_sdr_pit(&ests, &refs).unwrap();
            // Independent evaluation of both assignments.
            let score = |e: &AudioClip, r: &AudioClip| {
                let mut est = e.samples.clone();
                est.resize(r.len(), 0.0);
                let alpha = dot(&est, &r.samples) / dot(&r.samples, &r.samples);
                let tgt: f64 = r.samples.iter().map(|x| (alpha * x).powi(2)).sum();
                let res: f64 = est.iter().zip(&r.samples).map(|(e, x)| (e - alpha * x).powi(2)).sum();
                10.0 * (tgt / res).log10()
            };
            let identity = (score(&ests[0], &refs[0]) + score(&ests[1], &refs[1])) / 2.0;
            let swapped = (score(&ests[1], &refs[0]) + score(&ests[0], &refs[1])) / 2.0;
            assert!((pit.mean_db - identity.max(swapped)).abs() < 1e-9);
            assert_eq!(pit.permutation == vec![1, 0], swapped > identity);
        }
    }

    #[test]
    fn pit_prefers_perfect_assignment() {
        let a = clip(vec![1.0, 0.0, 0.0, 0.0]);
        let b = clip(vec![0.0, 1.0, 0.0, 0.0]);
        let orthogonal = clip(vec![0.0, 0.0, 1.0, 0.0]);
        let identity_mean = (si_sdr(&a, &a).unwrap().value_db + si_sdr(&orthogonal, &b).unwrap().value_db) / 2.0;
        let pit = si_sdr_pit(&[a.clone(), orthogonal], &[a, b]).unwrap();
        assert!(pit.mean_db >= identity_mean);
    }

    #[test]
    fn report_aggregates_and_csv() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let items: Vec<EvalItem> = (0..4)
            .map(|i| {
                let refs = vec![random(&mut rng, 50), random(&mut rng, 50)];
                EvalItem {
                    mix_id: format!("mix{i}"),
                    mixture: crate::signal::mix_pointwise(&refs, &[1.0, 1.0]).unwrap(),
                    references: refs,
                }
            })
            .collect();
        let cond = Condition {
            label: "synthetic-test".into(),
            distance_m: None,
        };
        let perfect = evaluate_items("oracle", cond.clone(), &items, |m| {
            let item = items.iter().find(|i| i.mixture == *m).unwrap();
            Ok(item.references.clone())
        })
        .unwrap();
        assert_eq!(perfect.aggregate.mean, SI_SDR_CAP_DB);

        let baseline = evaluate_items("mix", cond, &items, |m| Ok(vec![m.clone(), m.clone()])).unwrap();
        assert!(baseline.aggregate.mean.is_finite());
        assert!(baseline.aggregate.mean < perfect.aggregate.mean);
        let mean_of_means =
            baseline.mixtures.iter().map(|m| m.mean_si_sdr).sum::<f64>() / baseline.mixtures.len() as f64;
        assert!((baseline.aggregate.mean - mean_of_means).abs() <= 1e-12);

        let csv = baseline.to_csv();
        assert!(csv.starts_with("mix_id,si_sdr_s1,si_sdr_s2,mean_si_sdr,permutation\n"));
        assert_eq!(csv.lines().count(), 1 + 4 + 2);
    }

    proptest::proptest! {
        #[test]
        fn decomposition_holds_for_any_pair(len in 2usize..400, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let est = random(&mut rng, len);
            let reference = random(&mut rng, len);
            let b = si_sdr(&est, &reference).unwrap();
            for i in 0..len {
                proptest::prop_assert!((b.s_target[i] + b.e_noise[i] - est.samples[i]).abs() <= 1e-12);
            }
        }

        #[test]
        fn score_ignores_estimate_scale(len in 2usize..400, seed in 0u64..1000, gain in 1e-3f64..1e3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let est = random(&mut rng, len);
            let reference = random(&mut rng, len);
            let scaled = clip(est.samples.iter().map(|x| gain * x).collect());
            let a = si_sdr(&est, &reference).unwrap().value_db;
            let b = si_sdr(&scaled, &reference).unwrap().value_db;
            proptest::prop_assert!((a - b).abs() <= 1e-8);
        }
    }
}
