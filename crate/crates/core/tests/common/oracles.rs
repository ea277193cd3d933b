//! Brute-force reference implementations, written independently of the
//! library code they check.

#![allow(dead_code)]

use num_rational::Ratio;

/// Top-`m` caption indices: one representative per distinct text (highest
/// score, then lowest index), then repeated selection of the best remaining.
pub fn caption_top_m(texts: &[String], scores: &[f64], m: usize) -> Vec<usize> {
    let mut reps: Vec<usize> = Vec::new();
    for i in 0..texts.len() {
        let first_of_text = (0..i).all(|j| texts[j] != texts[i]);
        if !first_of_text {
            continue;
        }
        let mut best = i;
        for j in i + 1..texts.len() {
            if texts[j] == texts[i] && scores[j] > scores[best] {
                best = j;
            }
        }
        reps.push(best);
    }
    select_repeatedly(reps, m, |a, b| {
        scores[a] > scores[b] || (scores[a] == scores[b] && a < b)
    })
}

/// Best `limit` train indices by averaged similarity; ties to the smaller id.
pub fn avg_sim_top(ids: &[String], q: &[f64], v: &[f64], limit: usize) -> Vec<usize> {
    let score = |i: usize| (q[i] + v[i]) / 2.0;
    select_repeatedly((0..ids.len()).collect(), limit, |a, b| {
        score(a) > score(b) || (score(a) == score(b) && ids[a] < ids[b])
    })
}

fn select_repeatedly(mut pool: Vec<usize>, take: usize, better: impl Fn(usize, usize) -> bool) -> Vec<usize> {
    let mut out = Vec::new();
    while out.len() < take && !pool.is_empty() {
        let mut best = 0;
        for p in 1..pool.len() {
            if better(pool[p], pool[best]) {
                best = p;
            }
        }
        out.push(pool.remove(best));
    }
    out
}

/// Deals ranks `0..n*k` into `k` buckets by rank modulo `k`, then reverses
/// each bucket so the best shot is last.
pub fn strided(ranked: &[String], n: usize, k: usize) -> Vec<Vec<String>> {
    let mut buckets = vec![Vec::new(); k];
    for (r, id) in ranked.iter().take(n * k).enumerate() {
        buckets[r % k].push(id.clone());
    }
    for b in &mut buckets {
        b.reverse();
    }
    buckets
}

/// Mode of `answers`; a later answer only wins with a strictly higher count.
pub fn mode(answers: &[String]) -> Option<String> {
    let mut best: Option<(&String, usize)> = None;
    for a in answers {
        let c = answers.iter().filter(|x| *x == a).count();
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((a, c));
        }
    }
    best.map(|(a, _)| a.clone())
}

/// Soft accuracy by enumerating all 9-of-10 subsets of the human answers.
pub fn soft_accuracy_exact(matches: &[bool]) -> Ratio<i64> {
    assert_eq!(matches.len(), 10);
    let mut total = Ratio::from_integer(0);
    let mut subsets = 0;
    for mask in 0u32..(1 << 10) {
        if mask.count_ones() != 9 {
            continue;
        }
        subsets += 1;
        let hits = (0..10).filter(|&i| mask & (1 << i) != 0 && matches[i]).count() as i64;
        total += std::cmp::min(Ratio::new(hits, 3), Ratio::from_integer(1));
    }
    total / Ratio::from_integer(subsets)
}

pub fn ratio_f64(r: Ratio<i64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}
