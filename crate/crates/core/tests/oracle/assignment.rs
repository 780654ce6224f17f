//! Exhaustive enumeration of partial one-to-one assignments.

/// Every assignment of `min(R, C)` pairs as a row-sorted pair list.
fn enumerate(cost: &[Vec<f64>]) -> Vec<Vec<(usize, usize)>> {
    let r = cost.len();
    let c = if r == 0 { 0 } else { cost[0].len() };
    let target = r.min(c);
    let mut out = Vec::new();
    let mut used = vec![false; c];
    let mut cur = Vec::new();
    fn go(
        i: usize,
        r: usize,
        c: usize,
        target: usize,
        used: &mut [bool],
        cur: &mut Vec<(usize, usize)>,
        out: &mut Vec<Vec<(usize, usize)>>,
    ) {
        if cur.len() == target {
            out.push(cur.clone());
            return;
        }
        if i == r || r - i < target - cur.len() {
            return;
        }
        for j in 0..c {
            if !used[j] {
                used[j] = true;
                cur.push((i, j));
                go(i + 1, r, c, target, used, cur, out);
                cur.pop();
                used[j] = false;
            }
        }
        go(i + 1, r, c, target, used, cur, out);
    }
    go(0, r, c, target, &mut used, &mut cur, &mut out);
    out
}

/// Optimal cost and, among assignments within `1e-9 * max(1, |opt|)` of
/// it, the lexicographically smallest pair list.
pub fn brute_force(cost: &[Vec<f64>]) -> (f64, Vec<(usize, usize)>) {
    let all = enumerate(cost);
    let total = |a: &Vec<(usize, usize)>| a.iter().map(|&(i, j)| cost[i][j]).sum::<f64>();
    let best = all.iter().map(total).fold(f64::INFINITY, f64::min);
    let best = if all.is_empty() { 0.0 } else { best };
    let tol = 1e-9 * best.abs().max(1.0);
    let pick = all
        .iter()
        .filter(|a| total(a) <= best + tol)
        .min()
        .cloned()
        .unwrap_or_default();
    (best, pick)
}
