//! Optimal matching of reconstructions to reference images.
//!
//! Reconstruction attacks return images in arbitrary order, so scoring first
//! solves a max-weight assignment over pairwise PSNR. The solver is the
//! O(n^3) shortest-augmenting-path form of the Hungarian algorithm.

use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::tensor::Tensor;

/// Weight below which a pairing is considered forbidden and dropped from
/// results (used to encode label constraints and rectangular padding).
const FORBIDDEN: f64 = -1e15;

/// Max-weight assignment of rows to columns. Returns `assign[row] = col`,
/// with `usize::MAX` for rows left unmatched (more rows than columns or only
/// forbidden options). Accepts any rectangular matrix.
pub fn optimal_assignment(weights: &[Vec<f64>]) -> Result<Vec<usize>> {
    let rows = weights.len();
    if rows == 0 {
        return Ok(Vec::new());
    }
    let cols = weights[0].len();
    if weights.iter().any(|r| r.len() != cols) {
        return Err(Error::input("weight matrix is ragged"));
    }
    if cols == 0 {
        return Ok(vec![usize::MAX; rows]);
    }
    let n = rows.max(cols);
    // square minimisation problem; pad with zero cost, negate real weights
    let mut cost = vec![vec![0.0f64; n + 1]; n + 1];
    for (i, row) in weights.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            cost[i + 1][j + 1] = -v;
        }
    }

    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // p[col] = row matched to col
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0][j] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assign = vec![usize::MAX; rows];
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i <= rows && j <= cols && weights[i - 1][j - 1] > FORBIDDEN / 2.0 {
            assign[i - 1] = j - 1;
        }
    }
    Ok(assign)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchMode {
    /// Any reconstruction may pair with any reference.
    Unconstrained,
    /// Pairs must agree on the class label.
    LabelConstrained,
}

#[derive(Debug, Clone)]
pub struct MatchedPair {
    pub reconstruction: usize,
    pub reference: usize,
    pub psnr: f64,
}

#[derive(Debug, Clone)]
pub struct Matching {
    pub pairs: Vec<MatchedPair>,
    /// Mean PSNR over matched pairs.
    pub mean_psnr: f64,
}

/// Pairs each reconstruction with a distinct reference image so that total
/// PSNR is maximal. With [`MatchMode::LabelConstrained`], labels must be
/// provided for both sides and only same-label pairs are allowed;
/// reconstructions with no feasible partner stay unmatched.
pub fn match_reconstructions(
    recs: &[Tensor],
    refs: &[Tensor],
    rec_labels: Option<&[usize]>,
    ref_labels: Option<&[usize]>,
    max_val: f64,
    mode: MatchMode,
) -> Result<Matching> {
    if recs.is_empty() || refs.is_empty() {
        return Ok(Matching { pairs: Vec::new(), mean_psnr: 0.0 });
    }
    if mode == MatchMode::LabelConstrained {
        match (rec_labels, ref_labels) {
            (Some(a), Some(b)) if a.len() == recs.len() && b.len() == refs.len() => {}
            _ => {
                return Err(Error::input(
                    "label-constrained matching needs labels for both sides",
                ))
            }
        }
    }
    let mut weights = vec![vec![0.0f64; refs.len()]; recs.len()];
    for (i, rec) in recs.iter().enumerate() {
        for (j, reference) in refs.iter().enumerate() {
            let allowed = match mode {
                MatchMode::Unconstrained => true,
                MatchMode::LabelConstrained => rec_labels.unwrap()[i] == ref_labels.unwrap()[j],
            };
            weights[i][j] = if allowed { psnr(rec, reference, max_val)? } else { FORBIDDEN };
        }
    }
    let assign = optimal_assignment(&weights)?;
    let mut pairs = Vec::new();
    for (i, &j) in assign.iter().enumerate() {
        if j != usize::MAX {
            pairs.push(MatchedPair { reconstruction: i, reference: j, psnr: weights[i][j] });
        }
    }
    let mean_psnr = if pairs.is_empty() {
        0.0
    } else {
        pairs.iter().map(|p| p.psnr).sum::<f64>() / pairs.len() as f64
    };
    Ok(Matching { pairs, mean_psnr })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    /// Exhaustive max-weight assignment for small instances; the oracle the
    /// Hungarian implementation is judged against.
    fn brute_force(weights: &[Vec<f64>]) -> f64 {
        let rows = weights.len();
        let cols = weights[0].len();
        fn rec(weights: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == weights.len() {
                return 0.0;
            }
            // a row may also stay unmatched when columns are scarce
            let mut best = f64::NEG_INFINITY;
            let mut any = false;
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    let v = weights[row][j] + rec(weights, row + 1, used);
                    used[j] = false;
                    best = best.max(v);
                    any = true;
                }
            }
            if !any {
                return rec(weights, row + 1, used);
            }
            best
        }
        let mut used = vec![false; cols];
        let _ = rows;
        rec(weights, 0, &mut used)
    }

    fn total_of(weights: &[Vec<f64>], assign: &[usize]) -> f64 {
        assign
            .iter()
            .enumerate()
            .filter(|(_, &j)| j != usize::MAX)
            .map(|(i, &j)| weights[i][j])
            .sum()
    }

    #[test]
    fn matches_brute_force_on_random_square_instances() {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        for trial in 0..40 {
            let n = 2 + (trial % 6);
            let weights: Vec<Vec<f64>> =
                (0..n).map(|_| (0..n).map(|_| rng.gen_range(0.0..50.0)).collect()).collect();
            let assign = optimal_assignment(&weights).unwrap();
            let got = total_of(&weights, &assign);
            let want = brute_force(&weights);
            assert!((got - want).abs() < 1e-9, "n={} got {} want {}", n, got, want);
        }
    }

    #[test]
    fn matches_brute_force_on_rectangular_instances() {
        let mut rng = ChaCha20Rng::seed_from_u64(78);
        for trial in 0..30 {
            let rows = 2 + (trial % 4);
            let cols = rows + 1 + (trial % 3);
            let weights: Vec<Vec<f64>> =
                (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(0.0..10.0)).collect()).collect();
            let assign = optimal_assignment(&weights).unwrap();
            assert!(assign.iter().all(|&j| j != usize::MAX));
            let got = total_of(&weights, &assign);
            let want = brute_force(&weights);
            assert!((got - want).abs() < 1e-9, "got {} want {}", got, want);
        }
    }

    #[test]
    fn assignment_is_a_partial_injection() {
        let weights = vec![vec![1.0, 9.0], vec![2.0, 8.0], vec![3.0, 7.0]];
        let assign = optimal_assignment(&weights).unwrap();
        let matched: Vec<usize> = assign.iter().copied().filter(|&j| j != usize::MAX).collect();
        let mut dedup = matched.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(matched.len(), dedup.len());
        assert_eq!(matched.len(), 2, "only two columns exist");
    }

    #[test]
    fn identical_images_match_themselves() {
        let imgs: Vec<Tensor> = (0..4)
            .map(|i| Tensor::full(vec![1, 3, 3], 0.2 * i as f64))
            .collect();
        let shuffled = vec![imgs[2].clone(), imgs[0].clone(), imgs[3].clone(), imgs[1].clone()];
        let m = match_reconstructions(&shuffled, &imgs, None, None, 1.0, MatchMode::Unconstrained)
            .unwrap();
        assert_eq!(m.pairs.len(), 4);
        for p in &m.pairs {
            assert_eq!(p.psnr, crate::metrics::PSNR_CAP);
        }
        let map: Vec<usize> = {
            let mut v = vec![0; 4];
            for p in &m.pairs {
                v[p.reconstruction] = p.reference;
            }
            v
        };
        assert_eq!(map, vec![2, 0, 3, 1]);
    }

    #[test]
    fn label_constraint_overrides_pixel_similarity() {
        // rec 0 is pixel-close to ref 0 but labels force it onto ref 1
        let recs = vec![Tensor::full(vec![1, 2, 2], 0.10)];
        let refs = vec![Tensor::full(vec![1, 2, 2], 0.11), Tensor::full(vec![1, 2, 2], 0.9)];
        let unconstrained =
            match_reconstructions(&recs, &refs, None, None, 1.0, MatchMode::Unconstrained).unwrap();
        assert_eq!(unconstrained.pairs[0].reference, 0);
        let constrained = match_reconstructions(
            &recs,
            &refs,
            Some(&[5]),
            Some(&[3, 5]),
            1.0,
            MatchMode::LabelConstrained,
        )
        .unwrap();
        assert_eq!(constrained.pairs[0].reference, 1);
    }

    #[test]
    fn infeasible_label_pairs_stay_unmatched() {
        let recs = vec![Tensor::full(vec![1, 2, 2], 0.5)];
        let refs = vec![Tensor::full(vec![1, 2, 2], 0.5)];
        let m = match_reconstructions(
            &recs,
            &refs,
            Some(&[1]),
            Some(&[2]),
            1.0,
            MatchMode::LabelConstrained,
        )
        .unwrap();
        assert!(m.pairs.is_empty());
    }
}
