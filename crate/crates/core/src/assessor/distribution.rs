use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BUCKETS: usize = 10;
const SUM_TOLERANCE: f64 = 1e-6;

/// Probability mass over the score buckets `1..=10`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ScoreDistribution([f64; BUCKETS]);

impl ScoreDistribution {
    /// Checks non-negativity and unit sum (within 1e-6).
    pub fn new(p: [f64; BUCKETS]) -> Result<Self> {
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig(format!("negative or non-finite bucket in {p:?}")));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidConfig(format!("distribution sums to {sum}")));
        }
        Ok(ScoreDistribution(p))
    }

    /// Normalise non-negative weights.
    pub fn from_weights(w: [f64; BUCKETS]) -> Result<Self> {
        let sum: f64 = w.iter().sum();
        if !(sum > 0.0) || w.iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidConfig("weights must be non-negative with a positive sum".into()));
        }
        Ok(ScoreDistribution(w.map(|v| v / sum)))
    }

    pub fn uniform() -> Self {
        ScoreDistribution([1.0 / BUCKETS as f64; BUCKETS])
    }

    /// All mass on `bucket` (1-based).
    pub fn one_hot(bucket: usize) -> Self {
        assert!((1..=BUCKETS).contains(&bucket), "bucket {bucket} outside 1..=10");
        let mut p = [0.0; BUCKETS];
        p[bucket - 1] = 1.0;
        ScoreDistribution(p)
    }

    /// The default optimisation target: a realistic high-aesthetic rating
    /// profile rather than a one-hot 10.
    pub fn high_aesthetic_target() -> Self {
        ScoreDistribution([0.0, 0.0, 0.0, 0.0, 0.0, 0.01, 0.09, 0.15, 0.55, 0.20])
    }

    pub fn probabilities(&self) -> &[f64; BUCKETS] {
        &self.0
    }

    pub fn mean(&self) -> f64 {
        mean_score(self)
    }
}

impl Default for ScoreDistribution {
    fn default() -> Self {
        Self::high_aesthetic_target()
    }
}

impl TryFrom<Vec<f64>> for ScoreDistribution {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        let arr: [f64; BUCKETS] = v
            .try_into()
            .map_err(|v: Vec<f64>| Error::InvalidConfig(format!("expected {BUCKETS} buckets, got {}", v.len())))?;
        ScoreDistribution::new(arr)
    }
}

impl From<ScoreDistribution> for Vec<f64> {
    fn from(d: ScoreDistribution) -> Self {
        d.0.to_vec()
    }
}

/// Expected bucket, `sum j * p_j`.
pub fn mean_score(d: &ScoreDistribution) -> f64 {
    d.0.iter().enumerate().map(|(j, p)| (j + 1) as f64 * p).sum()
}

/// Earth mover's distance on the cumulative distributions with exponent 2:
/// `sqrt(mean_j (CDF_p(j) - CDF_q(j))^2)`.
pub fn emd(p: &ScoreDistribution, q: &ScoreDistribution) -> f64 {
    let mut cp = 0.0;
    let mut cq = 0.0;
    let mut acc = 0.0;
    for j in 0..BUCKETS {
        cp += p.0[j];
        cq += q.0[j];
        acc += (cp - cq) * (cp - cq);
    }
    (acc / BUCKETS as f64).sqrt()
}

/// Gradient of [`emd`] w.r.t. the entries of `p`. Zero where the distance
/// itself is zero.
pub fn emd_gradient(p: &ScoreDistribution, q: &ScoreDistribution) -> [f64; BUCKETS] {
    let mut diff = [0.0; BUCKETS];
    let (mut cp, mut cq) = (0.0, 0.0);
    for j in 0..BUCKETS {
        cp += p.0[j];
        cq += q.0[j];
        diff[j] = cp - cq;
    }
    let e = emd(p, q);
    if e == 0.0 {
        return [0.0; BUCKETS];
    }
    // d/dp_i touches every CDF entry j >= i
    let mut grad = [0.0; BUCKETS];
    let mut tail = 0.0;
    for i in (0..BUCKETS).rev() {
        tail += diff[i];
        grad[i] = tail / (BUCKETS as f64 * e);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn target_mean_is_8_84() {
        let t = ScoreDistribution::high_aesthetic_target();
        // 6*0.01 + 7*0.09 + 8*0.15 + 9*0.55 + 10*0.20
        assert!((t.mean() - 8.84).abs() < 1e-12);
        assert_eq!(ScoreDistribution::one_hot(10).mean(), 10.0);
        assert!((ScoreDistribution::uniform().mean() - 5.5).abs() < 1e-12);
    }

    #[test]
    fn emd_reference_values() {
        let d = ScoreDistribution::high_aesthetic_target();
        assert_eq!(emd(&d, &d), 0.0);
        let e = emd(&ScoreDistribution::one_hot(1), &ScoreDistribution::one_hot(10));
        assert!((e - 0.9f64.sqrt()).abs() < 1e-12);
        let e = emd(&ScoreDistribution::one_hot(1), &ScoreDistribution::one_hot(2));
        assert!((e - 0.1f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rejects_invalid_distributions() {
        assert!(ScoreDistribution::new([0.1; 10]).is_ok());
        assert!(ScoreDistribution::new([0.2; 10]).is_err());
        let mut neg = [0.1; 10];
        neg[0] = -0.1;
        neg[1] = 0.3;
        assert!(ScoreDistribution::new(neg).is_err());
        assert!(serde_json::from_str::<ScoreDistribution>("[0.5, 0.5]").is_err());
    }

    fn dist() -> impl Strategy<Value = ScoreDistribution> {
        proptest::array::uniform10(0.0..1.0f64)
            .prop_filter("positive mass", |w| w.iter().sum::<f64>() > 1e-3)
            .prop_map(|w| ScoreDistribution::from_weights(w).unwrap())
    }

    proptest! {
        #[test]
        fn emd_gradient_matches_differences(p in dist(), q in dist()) {
            prop_assume!(emd(&p, &q) > 1e-3);
            let g = emd_gradient(&p, &q);
            let h = 1e-6;
            for i in 0..BUCKETS {
                // perturb one entry; the formula does not need a normalised input
                let mut plus = p;
                plus.0[i] += h;
                let mut minus = p;
                minus.0[i] -= h;
                let fd = (emd(&plus, &q) - emd(&minus, &q)) / (2.0 * h);
                prop_assert!((fd - g[i]).abs() < 1e-6, "{} vs {}", fd, g[i]);
            }
        }
    }
}
