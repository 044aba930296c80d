//! Dense parameter-vector arithmetic and the statistical kernels the
//! detection schemes are built from.
//!
//! Every model, update, and running average in the system is a point in the
//! same p-dimensional space, so a single flat `ParameterVector` is the
//! universal currency. All statistics are double precision.

use crate::error::{Error, Result};

/// Norms below this are treated as zero when computing cosine similarity.
/// A zero update carries no directional evidence, so its similarity is
/// reported as a neutral 0 rather than an error.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// Flat vector of model parameters or a gradient update. The length is the
/// model's parameter count p and is identical across all clients in one
/// experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
}

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// True when every entry is finite (no NaN/Inf).
    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self += k * other`. Lengths must match.
    pub fn scaled_add(&mut self, k: f64, other: &ParameterVector) -> Result<()> {
        check_len(self.len(), other.len())?;
        for (a, b) in self.values.iter_mut().zip(other.values.iter()) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        for a in &mut self.values {
            *a *= k;
        }
    }
}

impl From<Vec<f64>> for ParameterVector {
    fn from(values: Vec<f64>) -> Self {
        Self { values }
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

/// Inner product Σ a_i·b_i.
pub fn dot(a: &ParameterVector, b: &ParameterVector) -> Result<f64> {
    check_len(a.len(), b.len())?;
    Ok(a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| x * y)
        .sum())
}

/// Euclidean (L2) norm.
pub fn norm(a: &ParameterVector) -> f64 {
    a.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity in [-1, 1]. When either vector has norm below
/// [`ZERO_NORM_EPS`] the result is 0 (see the constant's doc).
pub fn cosine_similarity(a: &ParameterVector, b: &ParameterVector) -> Result<f64> {
    check_len(a.len(), b.len())?;
    let na = norm(a);
    let nb = norm(b);
    if na < ZERO_NORM_EPS || nb < ZERO_NORM_EPS {
        return Ok(0.0);
    }
    Ok(dot(a, b)? / (na * nb))
}

/// ‖a − b‖.
pub fn euclidean_distance(a: &ParameterVector, b: &ParameterVector) -> Result<f64> {
    check_len(a.len(), b.len())?;
    Ok(a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

/// Mean over coordinates of the per-coordinate population variance across
/// the window. The window must hold at least two vectors of equal length.
pub fn mean_coordinate_variance<'a, I>(window: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a ParameterVector>,
    I::IntoIter: Clone,
{
    let iter = window.into_iter();
    let n = iter.clone().count();
    if n < 2 {
        return Err(Error::InsufficientHistory { got: n });
    }
    let p = iter.clone().next().expect("nonempty").len();
    for v in iter.clone() {
        check_len(p, v.len())?;
    }
    if p == 0 {
        return Ok(0.0);
    }

    // Two-pass per coordinate: means first, then squared deviations.
    let mut means = vec![0.0; p];
    for v in iter.clone() {
        for (m, x) in means.iter_mut().zip(v.as_slice()) {
            *m += x;
        }
    }
    let inv_n = 1.0 / n as f64;
    for m in &mut means {
        *m *= inv_n;
    }

    let mut var_sum = 0.0;
    for (j, m) in means.iter().enumerate() {
        let mut acc = 0.0;
        for v in iter.clone() {
            let d = v.as_slice()[j] - m;
            acc += d * d;
        }
        var_sum += acc * inv_n;
    }
    Ok(var_sum / p as f64)
}

/// Arithmetic mean of a nonempty slice.
pub fn mean(xs: &[f64]) -> f64 {
    debug_assert!(!xs.is_empty());
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance (divide by n) of a nonempty slice.
pub fn population_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Population standard deviation of a nonempty slice.
pub fn population_std(xs: &[f64]) -> f64 {
    population_variance(xs).sqrt()
}

/// Median of a nonempty slice; the mean of the two middle values when the
/// length is even.
pub fn median(xs: &[f64]) -> f64 {
    debug_assert!(!xs.is_empty());
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite statistics"));
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 0 {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    } else {
        sorted[mid]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(values: &[f64]) -> ParameterVector {
        ParameterVector::new(values.to_vec())
    }

    #[test]
    fn dot_orthogonal_is_zero() {
        assert_eq!(dot(&pv(&[1.0, 0.0]), &pv(&[0.0, 1.0])).unwrap(), 0.0);
    }

    #[test]
    fn dot_direct_arithmetic() {
        assert_eq!(dot(&pv(&[1.0, 2.0]), &pv(&[3.0, 4.0])).unwrap(), 11.0);
    }

    #[test]
    fn dot_zero_vector() {
        assert_eq!(dot(&pv(&[0.0; 4]), &pv(&[3.0, -1.0, 2.5, 9.0])).unwrap(), 0.0);
    }

    #[test]
    fn dot_length_mismatch() {
        assert!(matches!(
            dot(&pv(&[1.0]), &pv(&[1.0, 2.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn norm_345() {
        assert_eq!(norm(&pv(&[3.0, 4.0])), 5.0);
    }

    #[test]
    fn norm_zero() {
        assert_eq!(norm(&pv(&[0.0, 0.0, 0.0])), 0.0);
    }

    #[test]
    fn norm_ones() {
        assert_eq!(norm(&pv(&[1.0, 1.0, 1.0, 1.0])), 2.0);
    }

    #[test]
    fn cosine_identical_direction() {
        assert!((cosine_similarity(&pv(&[1.0, 0.0]), &pv(&[1.0, 0.0])).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_exact_flip() {
        let d = cosine_similarity(&pv(&[1.0, 2.0]), &pv(&[-1.0, -2.0])).unwrap();
        assert!((d + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_45_degrees() {
        let d = cosine_similarity(&pv(&[1.0, 1.0]), &pv(&[1.0, 0.0])).unwrap();
        assert!((d - 1.0 / 2.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_is_neutral() {
        assert_eq!(
            cosine_similarity(&pv(&[0.0, 0.0]), &pv(&[1.0, 2.0])).unwrap(),
            0.0
        );
        assert_eq!(
            cosine_similarity(&pv(&[1.0, 2.0]), &pv(&[0.0, 0.0])).unwrap(),
            0.0
        );
    }

    #[test]
    fn distance_345() {
        assert_eq!(euclidean_distance(&pv(&[3.0, 4.0]), &pv(&[0.0, 0.0])).unwrap(), 5.0);
    }

    #[test]
    fn distance_identity() {
        let a = pv(&[1.5, -2.5, 7.0]);
        assert_eq!(euclidean_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn distance_displacement() {
        assert_eq!(euclidean_distance(&pv(&[1.0, 1.0]), &pv(&[4.0, 5.0])).unwrap(), 5.0);
    }

    #[test]
    fn variance_constant_window() {
        let window = vec![pv(&[0.0, 0.0]); 5];
        assert_eq!(mean_coordinate_variance(&window).unwrap(), 0.0);
    }

    #[test]
    fn variance_one_dim_sequence() {
        let window: Vec<_> = [1.0, 2.0, 3.0, 4.0, 5.0].iter().map(|&x| pv(&[x])).collect();
        assert_eq!(mean_coordinate_variance(&window).unwrap(), 2.0);
    }

    #[test]
    fn variance_two_coordinates() {
        // {0,2} -> 1, {0,4} -> 4, mean 2.5
        let window = vec![pv(&[0.0, 0.0]), pv(&[2.0, 4.0])];
        assert_eq!(mean_coordinate_variance(&window).unwrap(), 2.5);
    }

    #[test]
    fn variance_needs_two_entries() {
        let window = vec![pv(&[1.0])];
        assert!(matches!(
            mean_coordinate_variance(&window),
            Err(Error::InsufficientHistory { got: 1 })
        ));
    }

    #[test]
    fn median_and_std_conventions() {
        let v = [0.0, 0.0, 0.0, 0.0, 8.0];
        assert_eq!(median(&v), 0.0);
        assert!((population_std(&v) - 3.2).abs() < 1e-12);
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), 2.5);
    }

    fn nonzero_vec() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-100.0f64..100.0, 1..32)
            .prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-6)
    }

    proptest! {
        #[test]
        fn cosine_self_and_negation(v in nonzero_vec()) {
            let a = ParameterVector::new(v.clone());
            let neg = ParameterVector::new(v.iter().map(|x| -x).collect());
            let same = cosine_similarity(&a, &a).unwrap();
            let opposite = cosine_similarity(&a, &neg).unwrap();
            prop_assert!((same - 1.0).abs() < 1e-9);
            prop_assert!((opposite + 1.0).abs() < 1e-9);
        }

        #[test]
        fn cosine_scale_invariance(v in nonzero_vec(), w in nonzero_vec(), k in 1e-3f64..1e3) {
            let n = v.len().min(w.len());
            let a = ParameterVector::new(v[..n].to_vec());
            let b = ParameterVector::new(w[..n].to_vec());
            let scaled = ParameterVector::new(v[..n].iter().map(|x| k * x).collect());
            let d1 = cosine_similarity(&a, &b).unwrap();
            let d2 = cosine_similarity(&scaled, &b).unwrap();
            prop_assert!((d1 - d2).abs() < 1e-9);
        }

        #[test]
        fn distance_symmetry_and_triangle(
            v in proptest::collection::vec(-100.0f64..100.0, 3),
            w in proptest::collection::vec(-100.0f64..100.0, 3),
            u in proptest::collection::vec(-100.0f64..100.0, 3),
        ) {
            let a = ParameterVector::new(v);
            let b = ParameterVector::new(w);
            let c = ParameterVector::new(u);
            let ab = euclidean_distance(&a, &b).unwrap();
            let ba = euclidean_distance(&b, &a).unwrap();
            let ac = euclidean_distance(&a, &c).unwrap();
            let cb = euclidean_distance(&c, &b).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!(ab <= ac + cb + 1e-9);
        }

        #[test]
        fn variance_permutation_invariant(
            rows in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 4), 2..6),
            swap_a in 0usize..6,
            swap_b in 0usize..6,
        ) {
            let window: Vec<_> = rows.iter().map(|r| ParameterVector::new(r.clone())).collect();
            let mut shuffled = window.clone();
            let a = swap_a % shuffled.len();
            let b = swap_b % shuffled.len();
            shuffled.swap(a, b);
            let v1 = mean_coordinate_variance(&window).unwrap();
            let v2 = mean_coordinate_variance(&shuffled).unwrap();
            prop_assert!((v1 - v2).abs() < 1e-9);
        }
    }
}
