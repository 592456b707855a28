//! Cosine-similarity sets, their normalization into distributions, and the
//! divergences used both by the alignment losses and the diagnostic bound.

use super::{DenseMatrix, NumericsError};
use crate::fmath;
use alloc::vec;
use alloc::vec::Vec;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    fmath::sqrt(dot(a, a))
}

/// Cosine similarity of two nonzero vectors, clamped into [-1, 1].
#[inline]
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = norm2(a) * norm2(b);
    (dot(a, b) / n).clamp(-1.0, 1.0)
}

/// Discrete probability vector: nonnegative weights summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector {
    weights: Vec<f64>,
}

impl ProbVector {
    pub fn try_new(weights: Vec<f64>) -> Result<Self, NumericsError> {
        if weights.is_empty() {
            return Err(NumericsError::EmptyInput {
                context: "ProbVector",
            });
        }
        let mut sum = 0.0;
        for (i, w) in weights.iter().enumerate() {
            if !w.is_finite() || *w < 0.0 {
                return Err(NumericsError::BadSimilarity { index: i });
            }
            sum += w;
        }
        if fmath::abs(sum - 1.0) > 1e-12 {
            return Err(NumericsError::BadParameter {
                context: "ProbVector weights must sum to 1",
            });
        }
        Ok(ProbVector { weights })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }
}

/// Cosine similarities of one anchor item against a set of other items,
/// kept in a fixed index order.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilaritySet {
    anchor: usize,
    entries: Vec<(usize, f64)>,
}

impl SimilaritySet {
    pub fn try_new(anchor: usize, entries: Vec<(usize, f64)>) -> Result<Self, NumericsError> {
        for (pos, (idx, cos)) in entries.iter().enumerate() {
            if *idx == anchor {
                return Err(NumericsError::BadSimilarity { index: pos });
            }
            if !cos.is_finite() || fmath::abs(*cos) > 1.0 + 1e-9 {
                return Err(NumericsError::BadSimilarity { index: pos });
            }
        }
        Ok(SimilaritySet { anchor, entries })
    }

    pub fn anchor(&self) -> usize {
        self.anchor
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn cosines(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|(_, c)| *c)
    }
}

/// Pairwise cosine similarities between the columns of K. The result is
/// symmetric with unit diagonal; a zero-norm column is a contract error
/// naming the offending index.
pub fn pairwise_cosine(k: &DenseMatrix) -> Result<DenseMatrix, NumericsError> {
    let n = k.cols();
    let d = k.rows();
    if n == 0 {
        return Err(NumericsError::EmptyInput {
            context: "pairwise_cosine",
        });
    }
    // Normalize columns once, in transposed (row-major per item) layout.
    let mut unit = vec![0.0; n * d];
    for j in 0..n {
        let mut nrm = 0.0;
        for i in 0..d {
            let v = k.at(i, j);
            nrm += v * v;
        }
        let nrm = fmath::sqrt(nrm);
        if nrm == 0.0 {
            return Err(NumericsError::ZeroColumn { col: j });
        }
        for i in 0..d {
            unit[j * d + i] = k.at(i, j) / nrm;
        }
    }
    let mut out = DenseMatrix::zeros(n, n);
    for a in 0..n {
        out.set(a, a, 1.0);
        let ra = &unit[a * d..(a + 1) * d];
        for b in (a + 1)..n {
            let rb = &unit[b * d..(b + 1) * d];
            let c = dot(ra, rb).clamp(-1.0, 1.0);
            out.set(a, b, c);
            out.set(b, a, c);
        }
    }
    Ok(out)
}

/// Temperature-scaled exponential normalization of a similarity set into a
/// strictly positive distribution, in the set's index order.
pub fn normalize_similarities(
    set: &SimilaritySet,
    temperature: f64,
) -> Result<ProbVector, NumericsError> {
    if set.is_empty() {
        return Err(NumericsError::EmptyInput {
            context: "normalize_similarities",
        });
    }
    if !(temperature > 0.0) {
        return Err(NumericsError::BadParameter {
            context: "temperature must be > 0",
        });
    }
    let max = set
        .cosines()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = set
        .cosines()
        .map(|c| fmath::exp((c - max) / temperature))
        .collect();
    let sum: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= sum;
    }
    ProbVector::try_new(weights)
}

/// KL(q || p) = sum q ln(q/p) with 0 ln(0/p) = 0. Returns +inf when q puts
/// mass where p has none; tiny negative rounding is clamped to zero.
pub fn kl_divergence(q: &ProbVector, p: &ProbVector) -> Result<f64, NumericsError> {
    if q.len() != p.len() {
        return Err(NumericsError::DimensionMismatch {
            context: "kl_divergence",
            expected: q.len(),
            actual: p.len(),
        });
    }
    let mut acc = 0.0;
    for (&qi, &pi) in q.as_slice().iter().zip(p.as_slice().iter()) {
        if qi == 0.0 {
            continue;
        }
        if pi == 0.0 {
            return Ok(f64::INFINITY);
        }
        acc += qi * fmath::ln(qi / pi);
    }
    if acc < 0.0 && acc > -1e-9 {
        acc = 0.0;
    }
    Ok(acc)
}

/// Total variation distance between two distributions of equal length.
pub fn tv_distance(p: &ProbVector, q: &ProbVector) -> Result<f64, NumericsError> {
    if q.len() != p.len() {
        return Err(NumericsError::DimensionMismatch {
            context: "tv_distance",
            expected: p.len(),
            actual: q.len(),
        });
    }
    let mut acc = 0.0;
    for (&pi, &qi) in p.as_slice().iter().zip(q.as_slice().iter()) {
        acc += fmath::abs(pi - qi);
    }
    Ok(0.5 * acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn set_from(cosines: &[f64]) -> SimilaritySet {
        let entries = cosines
            .iter()
            .enumerate()
            .map(|(j, &c)| (j + 1, c))
            .collect();
        SimilaritySet::try_new(0, entries).unwrap()
    }

    fn random_prob(rng: &mut Rng, n: usize) -> ProbVector {
        let mut w: Vec<f64> = (0..n).map(|_| rng.next_f64() + 1e-6).collect();
        let s: f64 = w.iter().sum();
        for v in w.iter_mut() {
            *v /= s;
        }
        ProbVector::try_new(w).unwrap()
    }

    #[test]
    fn similarity_set_rejects_anchor_entry() {
        let err = SimilaritySet::try_new(2, vec![(1, 0.5), (2, 0.1)]).unwrap_err();
        assert_eq!(err, NumericsError::BadSimilarity { index: 1 });
    }

    #[test]
    fn pairwise_cosine_orthogonal_and_scaled() {
        let e1 = vec![1.0, 0.0, 0.0];
        let e2 = vec![0.0, 1.0, 0.0];
        let m = pairwise_cosine(&DenseMatrix::from_columns(&[e1.clone(), e2]).unwrap()).unwrap();
        assert_eq!(m.at(0, 1), 0.0);
        assert_eq!(m.at(0, 0), 1.0);

        let k = vec![0.3, -0.4, 1.2];
        let k2: Vec<f64> = k.iter().map(|v| 2.0 * v).collect();
        let m = pairwise_cosine(&DenseMatrix::from_columns(&[k, k2]).unwrap()).unwrap();
        assert!((m.at(0, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pairwise_cosine_matches_scalar_oracle() {
        let mut rng = Rng::new(21);
        let cols: Vec<Vec<f64>> = (0..8)
            .map(|_| {
                let mut v = vec![0.0; 5];
                rng.fill_normal(&mut v, 1.0);
                v
            })
            .collect();
        let m = pairwise_cosine(&DenseMatrix::from_columns(&cols).unwrap()).unwrap();
        for a in 0..8 {
            for b in 0..8 {
                let expect = if a == b {
                    1.0
                } else {
                    dot(&cols[a], &cols[b]) / (norm2(&cols[a]) * norm2(&cols[b]))
                };
                assert!((m.at(a, b) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pairwise_cosine_names_zero_column() {
        let cols = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
        let err = pairwise_cosine(&DenseMatrix::from_columns(&cols).unwrap()).unwrap_err();
        assert_eq!(err, NumericsError::ZeroColumn { col: 1 });
    }

    #[test]
    fn normalize_equal_cosines_is_uniform() {
        let p = normalize_similarities(&set_from(&[0.4, 0.4, 0.4]), 0.1).unwrap();
        for &w in p.as_slice() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_low_temperature_concentrates_on_argmax() {
        let p = normalize_similarities(&set_from(&[0.9, 0.1, -0.5]), 1e-3).unwrap();
        assert!(p.as_slice()[0] > 1.0 - 1e-12);
    }

    #[test]
    fn normalize_two_term_hand_oracle() {
        // exp(0.9)/ (exp(0.9)+exp(0.1)) = 0.68997...
        let p = normalize_similarities(&set_from(&[0.9, 0.1]), 1.0).unwrap();
        assert!((p.as_slice()[0] - 0.6900).abs() < 1e-3);
        assert!((p.as_slice()[1] - 0.3100).abs() < 1e-3);
    }

    #[test]
    fn normalize_rejects_empty_set() {
        let empty = SimilaritySet::try_new(0, vec![]).unwrap();
        assert!(normalize_similarities(&empty, 0.1).is_err());
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let mut rng = Rng::new(22);
        let p = random_prob(&mut rng, 7);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_two_term_hand_oracle() {
        let q = ProbVector::try_new(vec![0.7, 0.3]).unwrap();
        let p = ProbVector::try_new(vec![0.5, 0.5]).unwrap();
        let kl = kl_divergence(&q, &p).unwrap();
        assert!((kl - 0.0823).abs() < 1e-4, "kl = {kl}");
    }

    #[test]
    fn kl_nonnegative_and_zero_iff_equal() {
        let mut rng = Rng::new(23);
        for _ in 0..200 {
            let n = 2 + rng.below(8);
            let q = random_prob(&mut rng, n);
            let p = random_prob(&mut rng, n);
            let kl = kl_divergence(&q, &p).unwrap();
            assert!(kl >= 0.0);
            let tv = tv_distance(&p, &q).unwrap();
            if kl < 1e-12 {
                assert!(tv < 1e-5);
            }
        }
    }

    #[test]
    fn kl_handles_zero_mass() {
        let q = ProbVector::try_new(vec![0.0, 1.0]).unwrap();
        let p = ProbVector::try_new(vec![0.5, 0.5]).unwrap();
        // 0 ln 0 contributes nothing.
        let kl = kl_divergence(&q, &p).unwrap();
        assert!((kl - fmath::ln(2.0)).abs() < 1e-12);
        // Mass where p has none diverges.
        let p0 = ProbVector::try_new(vec![1.0, 0.0]).unwrap();
        assert!(kl_divergence(&q, &p0).unwrap().is_infinite());
    }

    #[test]
    fn tv_basics() {
        let a = ProbVector::try_new(vec![1.0, 0.0]).unwrap();
        let b = ProbVector::try_new(vec![0.0, 1.0]).unwrap();
        assert_eq!(tv_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(tv_distance(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn pinsker_inequality_holds_on_random_pairs() {
        let mut rng = Rng::new(24);
        for _ in 0..1000 {
            let n = 2 + rng.below(12);
            let q = random_prob(&mut rng, n);
            let p = random_prob(&mut rng, n);
            let tv = tv_distance(&p, &q).unwrap();
            let kl = kl_divergence(&q, &p).unwrap();
            assert!(tv <= fmath::sqrt(kl / 2.0) + 1e-12);
        }
    }

    #[test]
    fn cosine_invariant_to_positive_rescaling() {
        let mut rng = Rng::new(25);
        let mut a = vec![0.0; 6];
        let mut b = vec![0.0; 6];
        rng.fill_normal(&mut a, 1.0);
        rng.fill_normal(&mut b, 1.0);
        let c1 = cosine(&a, &b);
        let a2: Vec<f64> = a.iter().map(|v| 37.5 * v).collect();
        let c2 = cosine(&a2, &b);
        assert!((c1 - c2).abs() < 1e-12);
    }
}
