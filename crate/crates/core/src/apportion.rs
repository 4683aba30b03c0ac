/// Quotas closer than this to an integer are treated as that integer, so
/// products like `0.7 * 30` apportion as 21 rather than 20 + remainder.
const SNAP: f64 = 1e-9;

fn snapped_floor(q: f64) -> (u64, f64) {
    let r = q.round();
    if (q - r).abs() < SNAP {
        (r.max(0.0) as u64, 0.0)
    } else {
        let f = q.floor();
        (f.max(0.0) as u64, q - f)
    }
}

/// Largest-remainder (Hamilton) apportionment of `total` units over `weights`.
///
/// Each slot gets the floor of its quota `total * w / sum(w)`; leftover units
/// go to the largest fractional parts. Equal remainders are broken by the
/// larger weight, then by the lower index. Zero weights never receive units.
/// Returns all zeros when the weights sum to zero.
pub fn largest_remainder(total: u64, weights: &[f64]) -> Vec<u64> {
    let sum: f64 = weights.iter().filter(|w| **w > 0.0).sum();
    if sum <= 0.0 || weights.is_empty() {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights
        .iter()
        .map(|&w| if w > 0.0 { total as f64 * w / sum } else { 0.0 })
        .collect();
    let mut counts = Vec::with_capacity(quotas.len());
    let mut rems = Vec::with_capacity(quotas.len());
    for &q in &quotas {
        let (f, r) = snapped_floor(q);
        counts.push(f);
        rems.push(r);
    }
    let assigned: u64 = counts.iter().sum();
    let mut left = total.saturating_sub(assigned);
    if left == 0 {
        return counts;
    }
    let mut order: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (rems[a], rems[b]);
        if (ra - rb).abs() > SNAP {
            rb.partial_cmp(&ra).unwrap()
        } else {
            weights[b].partial_cmp(&weights[a]).unwrap().then(a.cmp(&b))
        }
    });
    // more than one pass only happens through float slop on huge totals
    while left > 0 {
        for &i in &order {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
    }
    counts
}

/// Round `quotas` to integers within `[0, caps[i]]` summing to `total`.
///
/// Starts from the floors (clamped to the caps) and hands out the remaining
/// units by descending fractional part among slots with spare capacity, ties
/// to the lower index. Used
/// to split each neighbor's sample across strata while hitting the stratum
/// totals exactly.
pub(crate) fn bounded_round(quotas: &[f64], caps: &[u64], total: u64) -> Vec<u64> {
    let mut out: Vec<u64> = quotas
        .iter()
        .zip(caps)
        .map(|(&q, &c)| snapped_floor(q.max(0.0)).0.min(c))
        .collect();
    let mut have: u64 = out.iter().sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - out[a] as f64;
        let fb = quotas[b] - out[b] as f64;
        if (fa - fb).abs() > SNAP {
            fb.partial_cmp(&fa).unwrap()
        } else {
            a.cmp(&b)
        }
    });
    while have < total {
        let before = have;
        for &i in &order {
            if have == total {
                break;
            }
            if out[i] < caps[i] {
                out[i] += 1;
                have += 1;
            }
        }
        if have == before {
            break;
        }
    }
    while have > total {
        let before = have;
        for &i in order.iter().rev() {
            if have == total {
                break;
            }
            if out[i] > 0 {
                out[i] -= 1;
                have -= 1;
            }
        }
        if have == before {
            break;
        }
    }
    out
}
