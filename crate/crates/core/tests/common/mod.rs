//! Independent reference implementations used by the integration tests.
//! Everything here is written from the definitions, quadratic or worse, and
//! shares no code with the library.
#![allow(dead_code)]

use std::collections::BTreeMap;

/// Average 1-based rank by counting: 1 + (#smaller) + (#equal - 1) / 2.
pub fn rank_by_counting(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| {
            let less = xs.iter().filter(|&&y| y < x).count() as f64;
            let equal = xs.iter().filter(|&&y| y == x).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

pub fn brute_spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&rank_by_counting(x), &rank_by_counting(y))
}

/// Classic `1 - 6 sum d^2 / (n (n^2 - 1))`, valid only without ties.
pub fn spearman_no_ties(x: &[f64], y: &[f64]) -> f64 {
    let rx = rank_by_counting(x);
    let ry = rank_by_counting(y);
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

/// Tau-b from all pairs: (C - D) / sqrt((P - Tx)(P - Ty)) where Tx counts
/// pairs tied in x and Ty pairs tied in y.
pub fn brute_kendall(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    let (mut c, mut d, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let a = (x[i] - x[j]).signum();
            let b = (y[i] - y[j]).signum();
            if x[i] == x[j] {
                tx += 1;
            }
            if y[i] == y[j] {
                ty += 1;
            }
            if x[i] != x[j] && y[i] != y[j] {
                if a == b {
                    c += 1;
                } else {
                    d += 1;
                }
            }
        }
    }
    let p = (n * (n - 1) / 2) as i64;
    let den = ((p - tx) as f64 * (p - ty) as f64).sqrt();
    if den == 0.0 {
        return None;
    }
    Some((c - d) as f64 / den)
}

/// Normalized mutual information, arithmetic-mean normalization, from the
/// contingency table of two labelings.
pub fn nmi<A: Ord + Clone, B: Ord + Clone>(a: &[A], b: &[B]) -> f64 {
    let n = a.len() as f64;
    let mut joint: BTreeMap<(A, B), f64> = BTreeMap::new();
    let mut pa: BTreeMap<A, f64> = BTreeMap::new();
    let mut pb: BTreeMap<B, f64> = BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        *joint.entry((x.clone(), y.clone())).or_default() += 1.0 / n;
        *pa.entry(x.clone()).or_default() += 1.0 / n;
        *pb.entry(y.clone()).or_default() += 1.0 / n;
    }
    let h = |ps: Vec<f64>| -> f64 { -ps.iter().map(|p| p * p.ln()).sum::<f64>() };
    let ha = h(pa.values().copied().collect());
    let hb = h(pb.values().copied().collect());
    let mi: f64 = joint.iter().map(|((x, y), p)| p * (p / (pa[x] * pb[y])).ln()).sum();
    if ha + hb == 0.0 {
        return 1.0;
    }
    2.0 * mi / (ha + hb)
}

/// Hamilton apportionment of `total` over integer weights, in exact
/// arithmetic. Equal remainders go to the larger weight, then the lower
/// index.
pub fn hamilton_exact(total: u64, weights: &[u64]) -> Vec<u64> {
    let sum: u64 = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut out: Vec<u64> = weights.iter().map(|&w| total * w / sum).collect();
    let rem: Vec<u64> = weights.iter().map(|&w| total * w % sum).collect();
    let left = total - out.iter().sum::<u64>();
    // try every way of handing out the leftover units and keep the best
    let k = weights.len();
    let mut best: Option<(Vec<(u64, u64, i64)>, u32)> = None;
    for mask in 0u32..(1 << k) {
        if mask.count_ones() as u64 != left {
            continue;
        }
        if (0..k).any(|i| mask & (1 << i) != 0 && weights[i] == 0) {
            continue;
        }
        let mut key: Vec<(u64, u64, i64)> = (0..k)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| (rem[i], weights[i], -(i as i64)))
            .collect();
        key.sort_unstable_by(|a, b| b.cmp(a));
        if best.as_ref().map_or(true, |(bk, _)| key > *bk) {
            best = Some((key, mask));
        }
    }
    let (_, mask) = best.expect("some subset has the right size");
    for (i, o) in out.iter_mut().enumerate() {
        if mask & (1 << i) != 0 {
            *o += 1;
        }
    }
    out
}

/// The integer vector with `0 <= v[j] <= caps[j]` and `sum v = total`
/// closest in squared distance to `num[j] / den`; among equally close
/// vectors the lexicographically largest. Searches every vector within two
/// units of the real quotas.
pub fn closest_vector(num: &[u64], den: u64, caps: &[u64], total: u64) -> Vec<u64> {
    let k = num.len();
    let lo: Vec<u64> = num.iter().map(|&q| (q / den).saturating_sub(2)).collect();
    let hi: Vec<u64> = (0..k).map(|j| ((num[j] + den - 1) / den + 2).min(caps[j])).collect();
    let mut best: Option<(i128, Vec<u64>)> = None;
    let mut cur = vec![0u64; k];
    fn rec(
        j: usize,
        left: i64,
        lo: &[u64],
        hi: &[u64],
        num: &[u64],
        den: u64,
        cur: &mut Vec<u64>,
        best: &mut Option<(i128, Vec<u64>)>,
    ) {
        if j == cur.len() {
            if left != 0 {
                return;
            }
            let cost: i128 = cur
                .iter()
                .zip(num)
                .map(|(&v, &q)| {
                    let d = v as i128 * den as i128 - q as i128;
                    d * d
                })
                .sum();
            let better = match best {
                None => true,
                Some((c, v)) => cost < *c || (cost == *c && cur > v),
            };
            if better {
                *best = Some((cost, cur.clone()));
            }
            return;
        }
        if lo[j] > hi[j] {
            if left >= 0 {
                cur[j] = hi[j];
                rec(j + 1, left - hi[j] as i64, lo, hi, num, den, cur, best);
            }
            return;
        }
        for v in lo[j]..=hi[j] {
            cur[j] = v;
            rec(j + 1, left - v as i64, lo, hi, num, den, cur, best);
        }
    }
    rec(0, total as i64, &lo, &hi, num, den, &mut cur, &mut best);
    best.expect("a feasible vector within the search window").1
}

/// Expected `(neighbor, [lib, con, unknown])` draw counts for one message
/// passing step of a corpus with stratum counts `own` over out-edges with
/// integer weights, including the documented empty-stratum fallback.
pub fn expected_draws(
    own: [u64; 3],
    edges: &[(u32, u64)],
    neighbor_strata: &BTreeMap<u32, [u64; 3]>,
) -> BTreeMap<(u32, usize), u64> {
    let size: u64 = own.iter().sum();
    let weights: Vec<u64> = edges.iter().map(|e| e.1).collect();
    let c = hamilton_exact(size, &weights);
    let lib_num: Vec<u64> = c.iter().map(|&cj| cj * own[0]).collect();
    let lib = closest_vector(&lib_num, size, &c, own[0]);
    let caps: Vec<u64> = c.iter().zip(&lib).map(|(a, b)| a - b).collect();
    let unk_num: Vec<u64> = c.iter().map(|&cj| cj * own[2]).collect();
    let unk = closest_vector(&unk_num, size, &caps, own[2]);
    let mut out = BTreeMap::new();
    for (n, &(j, _)) in edges.iter().enumerate() {
        let want = [lib[n], c[n] - lib[n] - unk[n], unk[n]];
        let have = neighbor_strata[&j];
        for s in 0..3 {
            if want[s] == 0 {
                continue;
            }
            let alt: &[usize] = match s {
                0 => &[0, 1, 2],
                1 => &[1, 0, 2],
                _ => &[2, 0, 1],
            };
            let from = *alt.iter().find(|&&a| have[a] > 0).expect("neighbor has tweets");
            *out.entry((j, from)).or_insert(0) += want[s];
        }
    }
    out
}
