use crate::error::{MmqError, Result};

/// Kendall's tau-b between two paired lists, in `O(n log n)`.
///
/// Pairs tied in either list count as neither concordant nor discordant; the
/// denominator is `√((P − T_a)(P − T_b))` with `P = n(n−1)/2`. A list that is
/// constant makes the coefficient undefined and gives `0`.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    let (p, s) = counts(a, b)?;
    Ok(finish(p, s))
}

struct TieCounts {
    pairs: i64,
    ties_a: i64,
    ties_b: i64,
}

fn finish(t: TieCounts, numerator: i64) -> f64 {
    let denom = ((t.pairs - t.ties_a) as f64) * ((t.pairs - t.ties_b) as f64);
    if denom <= 0.0 {
        return 0.0;
    }
    (numerator as f64 / denom.sqrt()).clamp(-1.0, 1.0)
}

/// Finite-only comparison under which `-0.0 == 0.0`.
fn cmp(x: f64, y: f64) -> std::cmp::Ordering {
    x.partial_cmp(&y).expect("finite inputs")
}

fn check(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(MmqError::dim("kendall_tau lists", a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(MmqError::InvalidArgument(format!(
            "kendall_tau needs at least 2 paired values, got {}",
            a.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(MmqError::NonFinite("kendall_tau input".into()));
    }
    Ok(())
}

/// Knight's algorithm: sort by `(a, b)`, count ties, then count inversions
/// of `b` with a merge sort. Returns tie counts and `concordant − discordant`.
fn counts(a: &[f64], b: &[f64]) -> Result<(TieCounts, i64)> {
    check(a, b)?;
    let n = a.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| cmp(a[i], a[j]).then(cmp(b[i], b[j])));

    let pairs_in_runs = |eq: &dyn Fn(usize, usize) -> bool| -> i64 {
        let mut total = 0i64;
        let mut run = 1i64;
        for w in 1..n {
            if eq(idx[w - 1], idx[w]) {
                run += 1;
            } else {
                total += run * (run - 1) / 2;
                run = 1;
            }
        }
        total + run * (run - 1) / 2
    };
    let ties_a = pairs_in_runs(&|i, j| a[i] == a[j]);
    let ties_ab = pairs_in_runs(&|i, j| a[i] == a[j] && b[i] == b[j]);

    let mut seq: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
    let mut buf = vec![0.0; n];
    let swaps = merge_count(&mut seq, &mut buf);

    // `seq` is now sorted by b.
    let mut ties_b = 0i64;
    let mut run = 1i64;
    for w in 1..n {
        if seq[w - 1] == seq[w] {
            run += 1;
        } else {
            ties_b += run * (run - 1) / 2;
            run = 1;
        }
    }
    ties_b += run * (run - 1) / 2;

    let pairs = (n as i64) * (n as i64 - 1) / 2;
    // concordant − discordant = P − T_a − T_b + T_ab − 2·discordant
    let numerator = pairs - ties_a - ties_b + ties_ab - 2 * swaps;
    Ok((
        TieCounts {
            pairs,
            ties_a,
            ties_b,
        },
        numerator,
    ))
}

/// Sorts `v` ascending and returns the number of strict inversions.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> i64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (l, r) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        merge_count(l, bl) + merge_count(r, br)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as i64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}
