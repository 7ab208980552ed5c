//! Evaluation metrics: classification accuracy, ranked contact
//! precision, and Spearman rank correlation.

use crate::corpus::ContactMap;
use crate::error::{Error, Result};

/// Micro-averaged per-position accuracy across records.
pub fn token_accuracy(pred: &[Vec<usize>], truth: &[Vec<usize>]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predicted records vs {} truth records",
            pred.len(),
            truth.len()
        )));
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(Error::InvalidArgument(format!(
                "predicted {} positions vs {} truth positions",
                p.len(),
                t.len()
            )));
        }
        total += t.len();
        correct += p.iter().zip(t).filter(|(a, b)| a == b).count();
    }
    if total == 0 {
        return Err(Error::EmptySelection("token_accuracy"));
    }
    Ok(correct as f64 / total as f64)
}

/// Fraction of records whose predicted class matches the truth.
pub fn top1_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::EmptySelection("top1_accuracy"));
    }
    let correct = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / pred.len() as f64)
}

/// Sequence-separation band for contact metrics. Separation is j - i
/// for a pair i < j.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContactBand {
    /// Any separation (still subject to the minimum).
    All,
    /// 12 <= separation <= 23.
    Medium,
    /// separation >= 24.
    Long,
}

impl ContactBand {
    pub fn admits(self, separation: usize) -> bool {
        match self {
            ContactBand::All => true,
            ContactBand::Medium => (12..=23).contains(&separation),
            ContactBand::Long => separation >= 24,
        }
    }
}

/// Precision of the top ceil(L / divisor) scored pairs. Candidates are
/// valid pairs i < j with j - i >= min_sep inside the band; ties break
/// by ascending (i, j) so the ranking is total. Fewer candidates than k
/// means all of them count.
pub fn contact_precision(
    scores: &[Vec<f64>],
    truth: &ContactMap,
    divisor: usize,
    min_sep: usize,
    band: ContactBand,
) -> Result<f64> {
    let l = truth.size();
    if divisor == 0 {
        return Err(Error::InvalidArgument("contact precision divisor must be positive".into()));
    }
    if scores.len() != l || scores.iter().any(|row| row.len() != l) {
        return Err(Error::InvalidArgument(format!(
            "score matrix is not {l}x{l} to match the contact map"
        )));
    }
    let mut candidates: Vec<(usize, usize)> = Vec::new();
    for i in 0..l {
        for j in (i + 1)..l {
            if j - i >= min_sep && band.admits(j - i) && truth.valid(i, j) {
                candidates.push((i, j));
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::EmptySelection("contact_precision"));
    }
    candidates.sort_by(|&(ai, aj), &(bi, bj)| {
        scores[bi][bj]
            .partial_cmp(&scores[ai][aj])
            .expect("contact scores must not be NaN")
            .then(ai.cmp(&bi))
            .then(aj.cmp(&bj))
    });
    let k = l.div_ceil(divisor).min(candidates.len());
    let hits = candidates[..k].iter().filter(|&&(i, j)| truth.contact(i, j)).count();
    Ok(hits as f64 / k as f64)
}

/// Average fractional ranks: ties share the mean of the ranks they
/// occupy, ranks start at 1.
fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("ranks need non-NaN values"));
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) hold equal values; mean 1-based rank
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mean;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Numeric {
            op: "spearman_rho",
            details: "rank correlation is undefined when one side is constant".into(),
        });
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

/// Spearman rank correlation: Pearson correlation of the average
/// fractional ranks.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "{} values vs {} values",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::EmptySelection("spearman_rho"));
    }
    pearson(&fractional_ranks(a), &fractional_ranks(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn token_accuracy_counts_positions_not_records() {
        let pred = vec![vec![0, 1, 2], vec![1]];
        let truth = vec![vec![0, 1, 0], vec![1]];
        assert_eq!(token_accuracy(&pred, &truth).unwrap(), 0.75);
        assert!(token_accuracy(&pred, &truth[..1].to_vec()).is_err());
        assert!(token_accuracy(&[vec![]], &[vec![]]).is_err());
    }

    #[test]
    fn top1_accuracy_basics() {
        assert_eq!(top1_accuracy(&[1, 2, 3, 4], &[1, 2, 0, 4]).unwrap(), 0.75);
        assert!(top1_accuracy(&[], &[]).is_err());
        assert!(top1_accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn bands_partition_separations() {
        for sep in 0..64 {
            assert!(ContactBand::All.admits(sep));
            assert_eq!(ContactBand::Medium.admits(sep), (12..=23).contains(&sep));
            assert_eq!(ContactBand::Long.admits(sep), sep >= 24);
            assert!(!(ContactBand::Medium.admits(sep) && ContactBand::Long.admits(sep)));
        }
    }

    #[test]
    fn perfect_scores_give_perfect_precision() {
        let l = 30;
        let mut map = ContactMap::new(l);
        map.set_all_valid();
        for i in 0..l {
            map.set_contact(i, l - 1 - i).unwrap();
        }
        let mut scores = vec![vec![0.0; l]; l];
        for i in 0..l {
            for j in 0..l {
                if map.contact(i, j) {
                    scores[i][j] = 1.0;
                }
            }
        }
        let p = contact_precision(&scores, &map, 5, 6, ContactBand::All).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn ties_rank_by_ascending_pair_order() {
        // All scores equal: top-k is the lexicographically first k
        // eligible pairs. Make exactly those contacts and expect 1.0;
        // shift the contacts to the last pairs and expect 0.0.
        let l = 10;
        let mut map = ContactMap::new(l);
        map.set_all_valid();
        let scores = vec![vec![0.5; l]; l];
        let eligible: Vec<(usize, usize)> =
            (0..l).flat_map(|i| (i + 6..l).map(move |j| (i, j))).collect();
        let k = l.div_ceil(5);
        let mut first = map.clone();
        for &(i, j) in &eligible[..k] {
            first.set_contact(i, j).unwrap();
        }
        assert_eq!(contact_precision(&scores, &first, 5, 6, ContactBand::All).unwrap(), 1.0);
        let mut last = map.clone();
        for &(i, j) in &eligible[eligible.len() - k..] {
            last.set_contact(i, j).unwrap();
        }
        assert_eq!(contact_precision(&scores, &last, 5, 6, ContactBand::All).unwrap(), 0.0);
    }

    #[test]
    fn invalid_pairs_are_not_candidates() {
        let l = 16;
        let mut map = ContactMap::new(l);
        // Only one valid pair; it is a contact with a low score, while a
        // high-scoring invalid pair must be ignored.
        map.set_contact(0, 8).unwrap();
        map.set_valid(0, 8).unwrap();
        let mut scores = vec![vec![0.0; l]; l];
        scores[0][8] = 0.1;
        scores[1][9] = 0.9;
        let p = contact_precision(&scores, &map, 5, 6, ContactBand::All).unwrap();
        assert_eq!(p, 1.0);
        // Restricting to long range leaves no candidates at all.
        assert!(matches!(
            contact_precision(&scores, &map, 5, 6, ContactBand::Long),
            Err(Error::EmptySelection(_))
        ));
    }

    #[test]
    fn precision_matches_brute_force_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let l = rng.gen_range(8..40);
            let mut map = ContactMap::new(l);
            let mut scores = vec![vec![0.0; l]; l];
            for i in 0..l {
                for j in (i + 1)..l {
                    if rng.gen_bool(0.8) {
                        map.set_valid(i, j).unwrap();
                    }
                    if rng.gen_bool(0.3) {
                        map.set_contact(i, j).unwrap();
                    }
                    // Coarse grid so ties actually occur.
                    let s = (rng.gen_range(0..5) as f64) / 4.0;
                    scores[i][j] = s;
                    scores[j][i] = s;
                }
            }
            for band in [ContactBand::All, ContactBand::Medium, ContactBand::Long] {
                let mut cands: Vec<(usize, usize)> = Vec::new();
                for i in 0..l {
                    for j in (i + 1)..l {
                        if j - i >= 6 && band.admits(j - i) && map.valid(i, j) {
                            cands.push((i, j));
                        }
                    }
                }
                let got = contact_precision(&scores, &map, 5, 6, band);
                if cands.is_empty() {
                    assert!(got.is_err());
                    continue;
                }
                cands.sort_by(|&(ai, aj), &(bi, bj)| {
                    scores[bi][bj]
                        .partial_cmp(&scores[ai][aj])
                        .unwrap()
                        .then(ai.cmp(&bi).then(aj.cmp(&bj)))
                });
                let k = l.div_ceil(5).min(cands.len());
                let want = cands[..k].iter().filter(|&&(i, j)| map.contact(i, j)).count() as f64
                    / k as f64;
                assert_eq!(got.unwrap(), want, "L={l} band={band:?}");
            }
        }
    }

    #[test]
    fn spearman_on_monotone_data_is_one() {
        let a: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let b: Vec<f64> = a.iter().map(|x| x * x + 3.0).collect();
        assert!((spearman_rho(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let rev: Vec<f64> = a.iter().rev().cloned().collect();
        assert!((spearman_rho(&a, &rev).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_handles_ties_via_average_ranks() {
        // [1, 1, 2] vs [3, 5, 4]: ranks (1.5, 1.5, 3) vs (1, 3, 2).
        // Rank deviations (-0.5, -0.5, 1) and (-1, 1, 0) are orthogonal,
        // so the correlation is exactly zero.
        let rho = spearman_rho(&[1.0, 1.0, 2.0], &[3.0, 5.0, 4.0]).unwrap();
        let ra = [1.5, 1.5, 3.0];
        let rb = [1.0, 3.0, 2.0];
        let want = pearson(&ra, &rb).unwrap();
        assert!((rho - want).abs() < 1e-12);
        assert!(rho.abs() < 1e-12);
    }

    #[test]
    fn spearman_rejects_degenerate_input() {
        assert!(spearman_rho(&[1.0], &[2.0]).is_err());
        assert!(spearman_rho(&[1.0, 1.0], &[2.0, 3.0]).is_err());
        assert!(spearman_rho(&[1.0, 2.0], &[2.0]).is_err());
    }

    #[test]
    fn fractional_ranks_match_naive_counting() {
        // rank = 1 + count(less) + count(equal and earlier)? No: the
        // average-rank definition is 1 + count(less) + (ties - 1) / 2.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.gen_range(1..30);
            let vals: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..8) as f64) / 2.0).collect();
            let ranks = fractional_ranks(&vals);
            for (i, &v) in vals.iter().enumerate() {
                let less = vals.iter().filter(|&&x| x < v).count() as f64;
                let ties = vals.iter().filter(|&&x| x == v).count() as f64;
                let want = less + (ties - 1.0) / 2.0 + 1.0;
                assert!((ranks[i] - want).abs() < 1e-12);
            }
        }
    }
}
