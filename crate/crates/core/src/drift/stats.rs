//! Divergence and rank statistics used by the drift monitor.

use std::collections::BTreeMap;

use serde::Serialize;

use super::DriftError;

/// Minimum sample size per side for the normal approximation.
pub const MWU_MIN_SAMPLES: usize = 8;
/// Two-sided 5% critical value.
pub const Z_CRITICAL_05: f64 = 1.96;

fn normalize(v: &[f64]) -> Result<Vec<f64>, DriftError> {
    if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(DriftError::InvalidDistribution);
    }
    let sum: f64 = v.iter().sum();
    if sum <= 0.0 {
        return Err(DriftError::EmptyDistribution);
    }
    Ok(v.iter().map(|x| x / sum).collect())
}

/// Base-2 Jensen-Shannon divergence of two aligned weight vectors. Each is
/// normalized first, so raw counts are accepted. Result lies in [0, 1].
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64, DriftError> {
    if p.len() != q.len() {
        return Err(DriftError::SupportMismatch);
    }
    let p = normalize(p)?;
    let q = normalize(q)?;
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(&q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            acc += a * (a / m).log2();
        }
        if b > 0.0 {
            acc += b * (b / m).log2();
        }
    }
    Ok((0.5 * acc).clamp(0.0, 1.0))
}

/// JSD of two count maps over the union of their keys.
pub fn js_divergence_counts(p: &BTreeMap<String, u64>, q: &BTreeMap<String, u64>) -> Result<f64, DriftError> {
    let (a, b) = align(p, q);
    js_divergence(&a, &b)
}

fn align(p: &BTreeMap<String, u64>, q: &BTreeMap<String, u64>) -> (Vec<f64>, Vec<f64>) {
    let keys: std::collections::BTreeSet<&String> = p.keys().chain(q.keys()).collect();
    keys.into_iter()
        .map(|k| {
            (
                p.get(k).copied().unwrap_or(0) as f64,
                q.get(k).copied().unwrap_or(0) as f64,
            )
        })
        .unzip()
}

/// Cosine similarity of two count maps; 0 when either is empty.
pub fn cosine_similarity(p: &BTreeMap<String, u64>, q: &BTreeMap<String, u64>) -> f64 {
    let (a, b) = align(p, q);
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MwuResult {
    /// U for the `recent` sample: pairs with recent > baseline, ties count half.
    pub u: f64,
    pub z: f64,
    pub reject: bool,
}

/// Mann-Whitney U with midranks and tie-corrected normal approximation (no
/// continuity correction).
pub fn mann_whitney_u(recent: &[f64], baseline: &[f64]) -> Result<MwuResult, DriftError> {
    let (n1, n2) = (recent.len(), baseline.len());
    if n1 < MWU_MIN_SAMPLES || n2 < MWU_MIN_SAMPLES {
        return Err(DriftError::InsufficientSamples { recent: n1, baseline: n2 });
    }
    if recent.iter().chain(baseline).any(|x| x.is_nan()) {
        return Err(DriftError::InvalidDistribution);
    }
    let mut all: Vec<(f64, bool)> = recent
        .iter()
        .map(|&x| (x, true))
        .chain(baseline.iter().map(|&x| (x, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = all.len();
    let mut rank_sum_recent = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1..=j share the midrank
        let midrank = (i + 1 + j) as f64 / 2.0;
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        rank_sum_recent += midrank * all[i..j].iter().filter(|(_, r)| *r).count() as f64;
        i = j;
    }
    let (f1, f2, fnn) = (n1 as f64, n2 as f64, n as f64);
    let u = rank_sum_recent - f1 * (f1 + 1.0) / 2.0;
    let mean = f1 * f2 / 2.0;
    let var = f1 * f2 / 12.0 * ((fnn + 1.0) - tie_term / (fnn * (fnn - 1.0)));
    let z = if var > 0.0 { (u - mean) / var.sqrt() } else { 0.0 };
    Ok(MwuResult {
        u,
        z,
        reject: z.abs() > Z_CRITICAL_05,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn jsd_identity_and_disjoint() {
        assert_eq!(js_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!(matches!(js_divergence(&[0.0, 0.0], &[1.0, 0.0]), Err(DriftError::EmptyDistribution)));
        assert!(matches!(js_divergence(&[1.0], &[1.0, 0.0]), Err(DriftError::SupportMismatch)));
    }

    #[test]
    fn jsd_known_value() {
        // p=(.5,.5), q=(.9,.1), m=(.7,.3)
        let kl = |a: f64, b: f64, m1: f64, m2: f64| a * (a / m1).log2() + b * (b / m2).log2();
        let want = 0.5 * kl(0.5, 0.5, 0.7, 0.3) + 0.5 * kl(0.9, 0.1, 0.7, 0.3);
        let got = js_divergence(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.1467931).abs() < 1e-6);
    }

    #[test]
    fn count_maps_align_on_union() {
        let p: BTreeMap<String, u64> = [("a".into(), 2), ("b".into(), 2)].into();
        let q: BTreeMap<String, u64> = [("c".into(), 5)].into();
        assert_eq!(js_divergence_counts(&p, &q).unwrap(), 1.0);
        assert_eq!(js_divergence_counts(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn cosine_examples() {
        let p: BTreeMap<String, u64> = [("a".into(), 3), ("b".into(), 4)].into();
        let q: BTreeMap<String, u64> = [("a".into(), 4), ("b".into(), 3)].into();
        assert!((cosine_similarity(&p, &q) - 24.0 / 25.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&p, &BTreeMap::new()), 0.0);
    }

    #[test]
    fn mwu_identical_and_extreme() {
        let a: Vec<f64> = (0..10).map(|x| x as f64).collect();
        let r = mann_whitney_u(&a, &a).unwrap();
        assert_eq!(r.u, 50.0);
        assert!(r.z.abs() < 1e-12);
        assert!(!r.reject);
        let hi: Vec<f64> = (100..110).map(|x| x as f64).collect();
        let r = mann_whitney_u(&hi, &a).unwrap();
        assert_eq!(r.u, 100.0);
        assert!(r.reject);
        assert!(matches!(mann_whitney_u(&a[..7], &a), Err(DriftError::InsufficientSamples { .. })));
    }

    #[test]
    fn mwu_all_tied_has_zero_z() {
        let a = vec![1.0; 9];
        let r = mann_whitney_u(&a, &a).unwrap();
        assert_eq!(r.z, 0.0);
        assert_eq!(r.u, 40.5);
    }

    proptest! {
        #[test]
        fn jsd_symmetric_bounded(p in prop::collection::vec(0.0f64..10.0, 1..12), seed in 0.0f64..10.0) {
            let q: Vec<f64> = p.iter().enumerate().map(|(i, x)| (x * 1.7 + seed * i as f64) % 10.0).collect();
            prop_assume!(p.iter().sum::<f64>() > 0.0 && q.iter().sum::<f64>() > 0.0);
            let a = js_divergence(&p, &q).unwrap();
            let b = js_divergence(&q, &p).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn mwu_u_sum(a in prop::collection::vec(0i32..20, 8..20), b in prop::collection::vec(0i32..20, 8..20)) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            let u1 = mann_whitney_u(&a, &b).unwrap();
            let u2 = mann_whitney_u(&b, &a).unwrap();
            prop_assert!((u1.u + u2.u - (a.len() * b.len()) as f64).abs() < 1e-9);
            prop_assert!((u1.z + u2.z).abs() < 1e-9);
        }
    }
}
