//! Choosing the next measurement from a batch of posterior samples.
//!
//! Adaptive strategies score every design by how much the samples disagree
//! about its projection and take the argmax over unmeasured designs (ties go
//! to the lowest index). Uniform and LowToHigh ignore the samples.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{DalError, Result};
use crate::geometry::{DesignSpace, Projector};
use crate::image::Image;
use crate::posterior::SampleBatch;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// Total predictive variance of the projection.
    Variance,
    /// Disagreement with the batch mean.
    Committee,
    /// `log det(sigma I + C_psi)` of the sample covariance of the projection.
    GaussEntropy { sigma: f64 },
    /// Bit-reversed ordering of the pool.
    Uniform,
    /// Unmeasured k-space row closest to the centre.
    LowToHigh,
}

impl Strategy {
    pub fn is_adaptive(&self) -> bool {
        matches!(
            self,
            Strategy::Variance | Strategy::Committee | Strategy::GaussEntropy { .. }
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Variance => "variance",
            Strategy::Committee => "committee",
            Strategy::GaussEntropy { .. } => "gauss_entropy",
            Strategy::Uniform => "uniform",
            Strategy::LowToHigh => "low_to_high",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    pub strategy: Strategy,
    /// Candidate designs for the non-adaptive policies; all designs when
    /// absent.
    pub pool: Option<Vec<usize>>,
}

impl AcquisitionConfig {
    pub fn new(strategy: Strategy) -> Self {
        AcquisitionConfig { strategy, pool: None }
    }

    pub fn validate(&self, space: &DesignSpace) -> Result<()> {
        if let Strategy::GaussEntropy { sigma } = self.strategy {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(DalError::invalid("GaussEntropy sigma must be > 0"));
            }
        }
        if self.strategy == Strategy::LowToHigh && space.kind() != crate::geometry::OperatorKind::FourierRowMask {
            return Err(DalError::UnsupportedOperator {
                op: "low_to_high",
                reason: "needs a k-space row design space".into(),
            });
        }
        if let Some(pool) = &self.pool {
            if pool.is_empty() {
                return Err(DalError::Empty("design pool"));
            }
            for &p in pool {
                space.check_design(p)?;
            }
        }
        Ok(())
    }
}

/// Per-design scores; measured designs hold `-inf`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    #[serde(with = "finite_or_null")]
    pub scores: Vec<f64>,
    pub measured: Vec<bool>,
    pub chosen: usize,
}

/// JSON has no infinities; measured designs are stored as `null`.
mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|x| x.is_finite().then_some(*x))
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(v.into_iter().map(|x| x.unwrap_or(f64::NEG_INFINITY)).collect())
    }
}

impl ScoreTable {
    /// Masks measured designs and picks the argmax (lowest index on ties).
    pub fn from_scores(mut scores: Vec<f64>, measured: &[bool]) -> Result<Self> {
        if scores.len() != measured.len() {
            return Err(DalError::DimensionMismatch {
                expected: measured.len(),
                got: scores.len(),
            });
        }
        let mut chosen = None;
        for (i, s) in scores.iter_mut().enumerate() {
            if measured[i] {
                *s = f64::NEG_INFINITY;
                continue;
            }
            if !s.is_finite() {
                return Err(DalError::NonFinite("acquisition score"));
            }
            match chosen {
                Some((_, best)) if *s <= best => {}
                _ => chosen = Some((i, *s)),
            }
        }
        let chosen = chosen.ok_or(DalError::ExhaustedDesignSpace)?.0;
        Ok(ScoreTable {
            scores,
            measured: measured.to_vec(),
            chosen,
        })
    }
}

fn check_measured(projector: &Projector, measured: &[bool]) -> Result<()> {
    if measured.len() != projector.space().len() {
        return Err(DalError::DimensionMismatch {
            expected: projector.space().len(),
            got: measured.len(),
        });
    }
    Ok(())
}

/// `forward_all` for every image, skipping nothing (measured designs are
/// cheap compared with the bookkeeping of skipping them).
fn project_all(projector: &Projector, images: &[Image]) -> Result<Vec<Vec<Vec<f64>>>> {
    images
        .iter()
        .map(|x| Ok(projector.forward_all(x)?.into_iter().map(|p| p.values).collect()))
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// `score(psi) = (1/k) sum_i ||A_psi x_i - A_psi mean||^2`.
pub fn score_variance(batch: &SampleBatch, projector: &Projector, measured: &[bool]) -> Result<ScoreTable> {
    let mut t = score_committee(batch, &batch.mean, projector, measured)?;
    let k = batch.k() as f64;
    for s in t.scores.iter_mut().filter(|s| s.is_finite()) {
        *s /= k;
    }
    Ok(t)
}

/// `score(psi) = sum_i ||A_psi x_i - A_psi reference||^2`.
pub fn score_committee(
    batch: &SampleBatch,
    reference: &Image,
    projector: &Projector,
    measured: &[bool],
) -> Result<ScoreTable> {
    check_measured(projector, measured)?;
    reference.same_size(&batch.mean)?;
    let samples = project_all(projector, &batch.samples)?;
    let refp: Vec<Vec<f64>> = projector.forward_all(reference)?.into_iter().map(|p| p.values).collect();
    let scores = (0..measured.len())
        .map(|psi| samples.iter().map(|s| sq_dist(&s[psi], &refp[psi])).sum())
        .collect();
    ScoreTable::from_scores(scores, measured)
}

/// `log det(sigma I_l + C_psi)` through the `k x k` Gram form
/// `(l - k) log sigma + log det(sigma I_k + V^T V)` with `V` the centred
/// projections scaled by `1/sqrt(k)`.
pub fn score_gauss_entropy(batch: &SampleBatch, sigma: f64, projector: &Projector, measured: &[bool]) -> Result<ScoreTable> {
    check_measured(projector, measured)?;
    if batch.k() < 2 {
        return Err(DalError::invalid("GaussEntropy needs k >= 2 samples"));
    }
    if !(sigma > 0.0) {
        return Err(DalError::invalid("GaussEntropy sigma must be > 0"));
    }
    let samples = project_all(projector, &batch.samples)?;
    let l = projector.output_len();
    let scores = (0..measured.len())
        .map(|psi| {
            let cols: Vec<&[f64]> = samples.iter().map(|s| s[psi].as_slice()).collect();
            gram_logdet(&cols, l, sigma)
        })
        .collect::<Result<Vec<f64>>>()?;
    ScoreTable::from_scores(scores, measured)
}

fn gram_logdet(cols: &[&[f64]], l: usize, sigma: f64) -> Result<f64> {
    let k = cols.len();
    let mean: Vec<f64> = (0..l).map(|j| cols.iter().map(|c| c[j]).sum::<f64>() / k as f64).collect();
    let v = DMatrix::from_fn(l, k, |j, i| (cols[i][j] - mean[j]) / (k as f64).sqrt());
    let mut g = v.transpose() * &v;
    for i in 0..k {
        g[(i, i)] += sigma;
    }
    let chol = g.cholesky().ok_or(DalError::NonFinite("Gram matrix"))?;
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok((l as f64 - k as f64) * sigma.ln() + logdet)
}

/// Bit-reversed (van der Corput) ordering of `0..n`: every prefix is spread
/// as evenly as the sequence allows.
pub fn bit_reversed_order(n: usize) -> Vec<usize> {
    if n <= 1 {
        return (0..n).collect();
    }
    let bits = usize::BITS - (n - 1).leading_zeros();
    (0..1usize << bits)
        .map(|i| i.reverse_bits() >> (usize::BITS - bits))
        .filter(|&i| i < n)
        .collect()
}

/// `n` equispaced designs of a space (rounded to the nearest index).
pub fn uniform_pool(space: &DesignSpace, n: usize) -> Result<Vec<usize>> {
    let total = space.len();
    if n == 0 || n > total {
        return Err(DalError::invalid(format!("pool size must lie in 1..={total}, got {n}")));
    }
    Ok((0..n).map(|i| (i * total + n / 2) / n - (n / 2) / n).collect())
}

/// Order in which Uniform visits its pool.
pub fn uniform_order(pool: &[usize]) -> Vec<usize> {
    bit_reversed_order(pool.len()).into_iter().map(|i| pool[i]).collect()
}

fn low_to_high(measured: &[bool]) -> Result<usize> {
    let c = measured.len() / 2;
    (0..measured.len())
        .filter(|&i| !measured[i])
        .min_by_key(|&i| (i.abs_diff(c), i))
        .ok_or(DalError::ExhaustedDesignSpace)
}

/// Result of one acquisition: the design and, for adaptive strategies, the
/// table it was chosen from.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub design: usize,
    pub table: Option<ScoreTable>,
}

/// Picks the next design. Adaptive strategies need a batch.
pub fn next_design(
    cfg: &AcquisitionConfig,
    batch: Option<&SampleBatch>,
    projector: &Projector,
    measured: &[bool],
) -> Result<Selection> {
    cfg.validate(projector.space())?;
    check_measured(projector, measured)?;
    if measured.iter().all(|&m| m) {
        return Err(DalError::ExhaustedDesignSpace);
    }
    let need_batch = || batch.ok_or_else(|| DalError::invalid("adaptive acquisition needs a sample batch"));
    let table = match cfg.strategy {
        Strategy::Variance => Some(score_variance(need_batch()?, projector, measured)?),
        Strategy::Committee => {
            let b = need_batch()?;
            Some(score_committee(b, &b.mean, projector, measured)?)
        }
        Strategy::GaussEntropy { sigma } => Some(score_gauss_entropy(need_batch()?, sigma, projector, measured)?),
        Strategy::Uniform | Strategy::LowToHigh => None,
    };
    let design = match (&table, cfg.strategy) {
        (Some(t), _) => t.chosen,
        (None, Strategy::Uniform) => {
            let pool = match &cfg.pool {
                Some(p) => p.clone(),
                None => (0..measured.len()).collect(),
            };
            uniform_order(&pool)
                .into_iter()
                .find(|&d| !measured[d])
                .ok_or(DalError::ExhaustedDesignSpace)?
        }
        (None, _) => match &cfg.pool {
            Some(pool) => {
                let c = measured.len() / 2;
                pool.iter()
                    .copied()
                    .filter(|&i| !measured[i])
                    .min_by_key(|&i| (i.abs_diff(c), i))
                    .ok_or(DalError::ExhaustedDesignSpace)?
            }
            None => low_to_high(measured)?,
        },
    };
    Ok(Selection { design, table })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::Rng as _;

    use super::*;
    use crate::geometry::AngleGrid;
    use crate::posterior::Provenance;
    use crate::rng;

    fn angles() -> Projector {
        Projector::new(DesignSpace::Angles(AngleGrid::full_degree()), 16).unwrap()
    }

    fn batch(samples: Vec<Image>) -> SampleBatch {
        let k = samples.len();
        SampleBatch::new(
            samples,
            Provenance {
                model_id: "test".into(),
                set_hash: String::new(),
                seed: 0,
            },
            vec![0; k],
        )
        .unwrap()
    }

    fn random_batch(k: usize, d: usize, seed: u64) -> SampleBatch {
        let mut r = rng::rng(seed);
        batch((0..k).map(|_| Image::from_fn(d, |_, _| r.gen::<f64>())).collect())
    }

    #[test]
    fn identical_samples_score_zero_and_pick_lowest_unmeasured() {
        let p = angles();
        let x = Image::from_fn(16, |r, c| ((r + 2 * c) % 5) as f64 / 5.0);
        let b = batch(vec![x.clone(), x.clone(), x]);
        let mut measured = vec![false; 180];
        measured[0] = true;
        measured[1] = true;
        let t = score_variance(&b, &p, &measured).unwrap();
        assert!(t.scores[2..].iter().all(|&s| s == 0.0));
        assert_eq!(t.scores[0], f64::NEG_INFINITY);
        assert_eq!(t.chosen, 2);
        let g = score_gauss_entropy(&b, 0.5, &p, &measured).unwrap();
        for &s in &g.scores[2..] {
            assert!((s - 16.0 * 0.5f64.ln()).abs() < 1e-9);
        }
        assert_eq!(g.chosen, 2);
        let single = random_batch(1, 16, 1);
        assert!(score_variance(&single, &p, &measured).unwrap().scores[2..].iter().all(|&s| s == 0.0));
        assert!(score_gauss_entropy(&single, 1.0, &p, &measured).is_err());
    }

    #[test]
    fn variance_and_committee_match_loop_oracles() {
        let p = angles();
        let b = random_batch(2, 16, 2);
        let measured = vec![false; 180];
        let v = score_variance(&b, &p, &measured).unwrap();
        let mut r = rng::rng(3);
        let reference = Image::from_fn(16, |_, _| r.gen::<f64>());
        let c = score_committee(&b, &reference, &p, &measured).unwrap();
        let mut best = (0, f64::MIN);
        for psi in 0..180 {
            let m = p.forward(psi, &b.mean).unwrap();
            let rf = p.forward(psi, &reference).unwrap();
            let mut var = 0.0;
            let mut com = 0.0;
            for x in &b.samples {
                let a = p.forward(psi, x).unwrap();
                for j in 0..a.len() {
                    var += (a[j] - m[j]).powi(2) / 2.0;
                    com += (a[j] - rf[j]).powi(2);
                }
            }
            assert!((v.scores[psi] - var).abs() < 1e-9 * var.max(1.0));
            assert!((c.scores[psi] - com).abs() < 1e-9 * com.max(1.0));
            if var > best.1 {
                best = (psi, var);
            }
        }
        assert_eq!(v.chosen, best.0);
    }

    #[test]
    fn committee_with_sample_reference_and_k1_is_zero() {
        let p = angles();
        let b = random_batch(1, 16, 4);
        let t = score_committee(&b, &b.samples[0], &p, &[false; 180]).unwrap();
        assert!(t.scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn committee_with_mean_agrees_with_variance_on_random_batches() {
        let p = angles();
        let measured: Vec<bool> = (0..180).map(|i| i % 7 == 3).collect();
        for seed in 0..100 {
            let b = random_batch(2 + (seed as usize % 4), 16, 100 + seed);
            let v = score_variance(&b, &p, &measured).unwrap();
            let c = score_committee(&b, &b.mean, &p, &measured).unwrap();
            assert_eq!(v.chosen, c.chosen, "seed {seed}");
            for (a, b2) in v.scores.iter().zip(&c.scores).filter(|(a, _)| a.is_finite()) {
                assert!((a * b.k() as f64 - b2).abs() <= 1e-12 * b2.abs().max(1.0));
            }
        }
    }

    /// Dense `l x l` log-det oracle via a symmetric eigendecomposition.
    fn dense_logdet(cols: &[Vec<f64>], sigma: f64) -> f64 {
        let (k, l) = (cols.len(), cols[0].len());
        let mean: Vec<f64> = (0..l).map(|j| cols.iter().map(|c| c[j]).sum::<f64>() / k as f64).collect();
        let mut c = DMatrix::from_element(l, l, 0.0);
        for col in cols {
            for a in 0..l {
                for b in 0..l {
                    c[(a, b)] += (col[a] - mean[a]) * (col[b] - mean[b]) / k as f64;
                }
            }
        }
        for a in 0..l {
            c[(a, a)] += sigma;
        }
        c.symmetric_eigen().eigenvalues.iter().map(|e| e.ln()).sum()
    }

    #[test]
    fn gram_form_matches_dense_log_det() {
        let mut r = rng::rng(5);
        for sigma in [0.01, 0.3, 2.0] {
            let cols: Vec<Vec<f64>> = (0..3).map(|_| (0..8).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
            let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
            let g = gram_logdet(&refs, 8, sigma).unwrap();
            assert!((g - dense_logdet(&cols, sigma)).abs() < 1e-8);
        }
    }

    #[test]
    fn gauss_entropy_matches_dense_oracle_on_projections() {
        let p = Projector::with_bins(DesignSpace::Angles(AngleGrid::full_degree()), 8, 8).unwrap();
        let b = random_batch(3, 8, 6);
        let t = score_gauss_entropy(&b, 0.7, &p, &[false; 180]).unwrap();
        for psi in [0, 33, 90, 179] {
            let cols: Vec<Vec<f64>> = b.samples.iter().map(|x| p.forward(psi, x).unwrap()).collect();
            assert!((t.scores[psi] - dense_logdet(&cols, 0.7)).abs() < 1e-8);
        }
    }

    #[test]
    fn huge_likelihood_noise_flattens_gauss_entropy() {
        let p = angles();
        let b = random_batch(3, 16, 7);
        let sigma = 1e6;
        let t = score_gauss_entropy(&b, sigma, &p, &[false; 180]).unwrap();
        let (lo, hi) = t.scores.iter().fold((f64::MAX, f64::MIN), |(a, b), &s| (a.min(s), b.max(s)));
        assert!(hi - lo < 1e-6 * 16.0 * sigma.ln());
    }

    #[test]
    fn uniform_ordering() {
        assert_eq!(bit_reversed_order(4), vec![0, 2, 1, 3]);
        assert_eq!(bit_reversed_order(8), vec![0, 4, 2, 6, 1, 5, 3, 7]);
        let mut all = bit_reversed_order(180);
        assert_eq!(&all[..4], &[0, 128, 64, 32]);
        all.sort_unstable();
        assert_eq!(all, (0..180).collect::<Vec<_>>());

        let space = DesignSpace::Angles(AngleGrid::full_degree());
        let pool = uniform_pool(&space, 4).unwrap();
        assert_eq!(pool, vec![0, 45, 90, 135]);
        let p = angles();
        let cfg = AcquisitionConfig {
            strategy: Strategy::Uniform,
            pool: Some(pool),
        };
        let mut measured = vec![false; 180];
        let mut got = Vec::new();
        for _ in 0..4 {
            let d = next_design(&cfg, None, &p, &measured).unwrap().design;
            measured[d] = true;
            got.push(d);
        }
        assert_eq!(got, vec![0, 90, 45, 135]);
        assert!(matches!(
            next_design(&cfg, None, &p, &measured),
            Err(DalError::ExhaustedDesignSpace)
        ));
    }

    #[test]
    fn low_to_high_starts_at_the_centre() {
        let p = Projector::new(DesignSpace::KspaceRows { size: 32 }, 32).unwrap();
        let cfg = AcquisitionConfig::new(Strategy::LowToHigh);
        let mut measured = vec![false; 32];
        let mut got = Vec::new();
        for _ in 0..5 {
            let d = next_design(&cfg, None, &p, &measured).unwrap().design;
            measured[d] = true;
            got.push(d);
        }
        assert_eq!(got, vec![16, 15, 17, 14, 18]);
        assert!(next_design(&cfg, None, &angles(), &[false; 180]).is_err());
    }

    #[test]
    fn variance_finds_the_stripe_direction() {
        // samples differ only inside a vertical stripe; brute force decides
        let p = angles();
        let base = Image::from_fn(16, |r, c| 0.2 + 0.01 * ((r * c) % 7) as f64);
        let mut r = rng::rng(8);
        let samples = (0..4)
            .map(|_| {
                let a = r.gen_range(0.0..1.0);
                Image::from_fn(16, |i, j| if (7..9).contains(&j) { base.get(i, j) + a } else { base.get(i, j) })
            })
            .collect();
        let b = batch(samples);
        let measured = vec![false; 180];
        let sel = next_design(&AcquisitionConfig::new(Strategy::Variance), Some(&b), &p, &measured).unwrap();
        let brute = (0..180)
            .map(|psi| {
                let m = p.forward(psi, &b.mean).unwrap();
                let s: f64 = b.samples.iter().map(|x| sq_dist(&p.forward(psi, x).unwrap(), &m)).sum();
                (psi, s)
            })
            .fold((0, f64::MIN), |best, (psi, s)| if s > best.1 { (psi, s) } else { best });
        assert_eq!(sel.design, brute.0);
        assert!(next_design(&AcquisitionConfig::new(Strategy::Variance), None, &p, &measured).is_err());
    }

    #[test]
    fn full_runs_never_repeat_designs() {
        let p = Projector::new(DesignSpace::Angles(AngleGrid::full_degree()), 8).unwrap();
        for strategy in [Strategy::Variance, Strategy::Committee, Strategy::GaussEntropy { sigma: 0.1 }, Strategy::Uniform] {
            let cfg = AcquisitionConfig::new(strategy);
            let mut measured = vec![false; 180];
            for step in 0..180 {
                let b = random_batch(3, 8, step);
                let d = next_design(&cfg, Some(&b), &p, &measured).unwrap().design;
                assert!(!measured[d]);
                measured[d] = true;
            }
            assert!(measured.iter().all(|&m| m));
        }
    }

    #[test]
    fn score_table_serialises_masked_scores() {
        let t = ScoreTable::from_scores(vec![1.0, 2.0, 3.0], &[false, false, true]).unwrap();
        assert_eq!(t.chosen, 1);
        let back: ScoreTable = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn scores_scale_quadratically(seed in 0u64..1000, c in 0.1f64..10.0) {
            let p = Projector::new(DesignSpace::Angles(AngleGrid::full_degree()), 8).unwrap();
            let b = random_batch(3, 8, seed);
            let scaled = batch(b.samples.iter().map(|x| x.map(|v| c * v)).collect());
            let measured: Vec<bool> = (0..180).map(|i| i % 5 == 0).collect();
            let t = score_variance(&b, &p, &measured).unwrap();
            let ts = score_variance(&scaled, &p, &measured).unwrap();
            prop_assert_eq!(t.chosen, ts.chosen);
            for (a, s) in t.scores.iter().zip(&ts.scores).filter(|(a, _)| a.is_finite()) {
                prop_assert!((a * c * c - s).abs() <= 1e-9 * s.abs().max(1e-12));
            }
            let tc = score_committee(&scaled, &scaled.mean, &p, &measured).unwrap();
            prop_assert_eq!(tc.chosen, t.chosen);
        }

        #[test]
        fn scoring_is_deterministic(seed in 0u64..1000) {
            let p = Projector::new(DesignSpace::Angles(AngleGrid::full_degree()), 8).unwrap();
            let b = random_batch(3, 8, seed);
            let m = vec![false; 180];
            prop_assert_eq!(score_gauss_entropy(&b, 0.2, &p, &m).unwrap(), score_gauss_entropy(&b, 0.2, &p, &m).unwrap());
            prop_assert_eq!(score_variance(&b, &p, &m).unwrap(), score_variance(&b, &p, &m).unwrap());
        }
    }
}
