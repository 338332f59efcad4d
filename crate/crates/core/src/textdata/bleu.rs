//! Corpus-level BLEU with clipped n-gram precision, geometric mean and
//! brevity penalty — no smoothing. The variant is pinned here and used
//! for every reported number, so scores are comparable within this
//! project (and only within it).

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::textdata::Corpus;

/// Corpus BLEU of candidate sequences against a shared reference set.
pub fn test_bleu(candidates: &Corpus, references: &Corpus, max_n: usize) -> Result<f64> {
    test_bleu_tokens(&candidates.content_tokens(), &references.content_tokens(), max_n)
}

/// Mean over candidates of each one's BLEU against all the others.
pub fn self_bleu(candidates: &Corpus, max_n: usize) -> Result<f64> {
    self_bleu_tokens(&candidates.content_tokens(), max_n)
}

fn check_max_n(max_n: usize) -> Result<()> {
    if !(2..=5).contains(&max_n) {
        return Err(Error::Param(format!("max_n must be in 2..=5, got {max_n}")));
    }
    Ok(())
}

/// Clipped n-gram counts for each order: `(matched, total)` pairs,
/// aggregated over the whole candidate set. Exposed so the oracle cases
/// can pin individual precisions, not just the final score.
pub fn clipped_precisions(
    candidates: &[Vec<u32>],
    references: &[Vec<u32>],
    max_n: usize,
) -> Result<Vec<(usize, usize)>> {
    if candidates.is_empty() {
        return Err(Error::Input("empty candidate set".into()));
    }
    if references.is_empty() {
        return Err(Error::Input("empty reference set".into()));
    }
    let mut out = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        // Per n-gram, the largest count any single reference attains.
        let mut ref_max: HashMap<&[u32], usize> = HashMap::new();
        for r in references {
            let mut local: HashMap<&[u32], usize> = HashMap::new();
            for g in r.windows(n) {
                *local.entry(g).or_default() += 1;
            }
            for (g, c) in local {
                let slot = ref_max.entry(g).or_default();
                *slot = (*slot).max(c);
            }
        }
        let mut matched = 0;
        let mut total = 0;
        for c in candidates {
            let mut local: HashMap<&[u32], usize> = HashMap::new();
            for g in c.windows(n) {
                *local.entry(g).or_default() += 1;
                total += 1;
            }
            for (g, count) in local {
                matched += count.min(*ref_max.get(g).unwrap_or(&0));
            }
        }
        out.push((matched, total));
    }
    Ok(out)
}

/// Corpus BLEU over raw token sequences (specials already stripped).
pub fn test_bleu_tokens(
    candidates: &[Vec<u32>],
    references: &[Vec<u32>],
    max_n: usize,
) -> Result<f64> {
    check_max_n(max_n)?;
    let precisions = clipped_precisions(candidates, references, max_n)?;

    let ref_lens: Vec<usize> = {
        let mut v: Vec<usize> = references.iter().map(|r| r.len()).collect();
        v.sort_unstable();
        v
    };
    let cand_len: usize = candidates.iter().map(|c| c.len()).sum();
    let eff_ref_len: usize = candidates
        .iter()
        .map(|c| closest_length(&ref_lens, c.len()))
        .sum();

    Ok(score(&precisions, cand_len, eff_ref_len, max_n))
}

fn score(precisions: &[(usize, usize)], cand_len: usize, eff_ref_len: usize, max_n: usize) -> f64 {
    let mut log_sum = 0.0;
    for &(matched, total) in precisions {
        if matched == 0 || total == 0 {
            return 0.0;
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let brevity = if cand_len >= eff_ref_len || cand_len == 0 {
        1.0
    } else {
        (1.0 - eff_ref_len as f64 / cand_len as f64).exp()
    };
    brevity * (log_sum / max_n as f64).exp()
}

/// Closest value in a sorted slice; ties go to the smaller length.
fn closest_length(sorted: &[usize], target: usize) -> usize {
    debug_assert!(!sorted.is_empty());
    let idx = sorted.partition_point(|&l| l < target);
    let above = sorted.get(idx).copied();
    let below = idx.checked_sub(1).map(|i| sorted[i]);
    match (below, above) {
        (Some(b), Some(a)) => {
            if target - b <= a - target {
                b
            } else {
                a
            }
        }
        (Some(b), None) => b,
        (None, Some(a)) => a,
        (None, None) => unreachable!(),
    }
}

/// Self-BLEU over raw token sequences: for each candidate, corpus BLEU
/// of that one sequence against all the others. The max-over-others
/// clip is answered in O(1) per n-gram by keeping the two largest
/// per-gram counts and their holder.
pub fn self_bleu_tokens(candidates: &[Vec<u32>], max_n: usize) -> Result<f64> {
    check_max_n(max_n)?;
    if candidates.len() < 2 {
        return Err(Error::Input(format!(
            "self-BLEU needs at least 2 candidates, got {}",
            candidates.len()
        )));
    }

    #[derive(Clone, Copy, Default)]
    struct Top2 {
        best: usize,
        holder: usize,
        second: usize,
    }

    let m = candidates.len();
    // lengths multiset for leave-one-out closest-length lookups
    let mut len_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for c in candidates {
        *len_counts.entry(c.len()).or_default() += 1;
    }

    let mut per_order: Vec<(Vec<HashMap<&[u32], usize>>, HashMap<&[u32], Top2>)> = Vec::new();
    for n in 1..=max_n {
        let mut per_cand: Vec<HashMap<&[u32], usize>> = Vec::with_capacity(m);
        let mut global: HashMap<&[u32], Top2> = HashMap::new();
        for (i, c) in candidates.iter().enumerate() {
            let mut local: HashMap<&[u32], usize> = HashMap::new();
            for g in c.windows(n) {
                *local.entry(g).or_default() += 1;
            }
            for (&g, &count) in &local {
                let t = global.entry(g).or_default();
                if count > t.best {
                    t.second = t.best;
                    t.best = count;
                    t.holder = i;
                } else if count > t.second {
                    t.second = count;
                }
            }
            per_cand.push(local);
        }
        per_order.push((per_cand, global));
    }

    let mut acc = 0.0;
    for i in 0..m {
        let mut precisions = Vec::with_capacity(max_n);
        for (per_cand, global) in &per_order {
            let mut matched = 0;
            let mut total = 0;
            for (g, &count) in &per_cand[i] {
                let t = global[g];
                let cap = if t.holder == i { t.second } else { t.best };
                matched += count.min(cap);
                total += count;
            }
            precisions.push((matched, total));
        }
        let own = candidates[i].len();
        let eff = closest_length_excluding(&len_counts, own);
        acc += score(&precisions, own, eff, max_n);
    }
    Ok(acc / m as f64)
}

/// Closest length in the multiset after removing one copy of `own`.
fn closest_length_excluding(lens: &BTreeMap<usize, usize>, own: usize) -> usize {
    if lens.get(&own).copied().unwrap_or(0) >= 2 {
        return own;
    }
    let below = lens
        .range(..own)
        .next_back()
        .map(|(&l, _)| l);
    let above = lens
        .range(own + 1..)
        .next()
        .map(|(&l, _)| l);
    match (below, above) {
        (Some(b), Some(a)) => {
            if own - b <= a - own {
                b
            } else {
                a
            }
        }
        (Some(b), None) => b,
        (None, Some(a)) => a,
        (None, None) => own,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{seq::SliceRandom, Rng, SeedableRng};

    fn toks(words: &[&str]) -> Vec<u32> {
        // tiny stable string->id hash for test readability
        words
            .iter()
            .map(|w| w.bytes().fold(7u32, |h, b| h.wrapping_mul(31).wrapping_add(b as u32)))
            .collect()
    }

    #[test]
    fn identical_corpora_score_one() {
        let cands = vec![toks(&["a", "b", "c"]), toks(&["d", "e"])];
        let refs = cands.clone();
        for n in 2..=3 {
            let b = test_bleu_tokens(&cands, &refs, n).unwrap();
            assert!((b - 1.0).abs() < 1e-12, "n={n}: {b}");
        }
    }

    #[test]
    fn clipped_unigram_hand_case() {
        // "the the the the the the the" vs "the cat is on the mat":
        // seven candidate unigrams, clipped to the reference's two.
        let cands = vec![toks(&["the"; 7])];
        let refs = vec![toks(&["the", "cat", "is", "on", "the", "mat"])];
        let p = clipped_precisions(&cands, &refs, 2).unwrap();
        assert_eq!(p[0], (2, 7));
        // No bigram "the the" in the reference.
        assert_eq!(p[1].0, 0);
        assert_eq!(test_bleu_tokens(&cands, &refs, 2).unwrap(), 0.0);
    }

    #[test]
    fn disjoint_vocabulary_scores_zero() {
        let cands = vec![toks(&["x", "y", "z"])];
        let refs = vec![toks(&["a", "b", "c"])];
        assert_eq!(test_bleu_tokens(&cands, &refs, 2).unwrap(), 0.0);
    }

    #[test]
    fn empty_candidates_rejected() {
        let refs = vec![toks(&["a"])];
        assert!(matches!(
            test_bleu_tokens(&[], &refs, 2),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn bounded_and_permutation_invariant() {
        let mut rng = StdRng::seed_from_u64(5);
        let vocabulary = ["a", "b", "c", "d", "e"];
        let mut rand_seq = |rng: &mut StdRng| {
            let len = rng.gen_range(2..8);
            (0..len)
                .map(|_| vocabulary[rng.gen_range(0..vocabulary.len())])
                .collect::<Vec<_>>()
        };
        for _ in 0..10 {
            let cands: Vec<Vec<u32>> =
                (0..6).map(|_| toks(&rand_seq(&mut rng))).collect();
            let refs: Vec<Vec<u32>> =
                (0..6).map(|_| toks(&rand_seq(&mut rng))).collect();
            let b = test_bleu_tokens(&cands, &refs, 3).unwrap();
            assert!((0.0..=1.0).contains(&b));

            let mut shuffled = cands.clone();
            shuffled.shuffle(&mut rng);
            let b2 = test_bleu_tokens(&shuffled, &refs, 3).unwrap();
            assert_eq!(b.to_bits(), b2.to_bits(), "corpus counts are order-free");
        }
    }

    #[test]
    fn brevity_penalty_bites_short_candidates() {
        let cands = vec![toks(&["a", "b"])];
        let refs = vec![toks(&["a", "b", "c", "d"])];
        let b = test_bleu_tokens(&cands, &refs, 2).unwrap();
        // p1 = 1, p2 = 1, BP = exp(1 - 4/2)
        let expect = (1.0_f64 - 2.0).exp();
        assert!((b - expect).abs() < 1e-12, "{b} vs {expect}");
    }

    #[test]
    fn self_bleu_identical_candidates_is_one() {
        let cands = vec![toks(&["a", "b", "c"]); 4];
        let s = self_bleu_tokens(&cands, 2).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn self_bleu_disjoint_candidates_is_zero() {
        let cands = vec![
            toks(&["a", "b"]),
            toks(&["c", "d"]),
            toks(&["e", "f"]),
        ];
        assert_eq!(self_bleu_tokens(&cands, 2).unwrap(), 0.0);
    }

    #[test]
    fn self_bleu_needs_two_candidates() {
        let cands = vec![toks(&["a", "b"])];
        assert!(matches!(
            self_bleu_tokens(&cands, 2),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn self_bleu_matches_naive_leave_one_out() {
        let mut rng = StdRng::seed_from_u64(17);
        let vocabulary = ["a", "b", "c", "d"];
        let cands: Vec<Vec<u32>> = (0..8)
            .map(|_| {
                let len = rng.gen_range(2..7);
                toks(
                    &(0..len)
                        .map(|_| vocabulary[rng.gen_range(0..vocabulary.len())])
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        let fast = self_bleu_tokens(&cands, 3).unwrap();
        let mut naive = 0.0;
        for i in 0..cands.len() {
            let one = vec![cands[i].clone()];
            let rest: Vec<Vec<u32>> = cands
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, c)| c.clone())
                .collect();
            naive += test_bleu_tokens(&one, &rest, 3).unwrap();
        }
        naive /= cands.len() as f64;
        assert!((fast - naive).abs() < 1e-12, "{fast} vs {naive}");
    }
}
