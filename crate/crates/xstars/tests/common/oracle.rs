//! Straightforward scalar re-implementations used as references.

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for k in 0..a.len() {
        ab += a[k] * b[k];
        aa += a[k] * a[k];
        bb += b[k] * b[k];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// `p[i][j]`: per-token softmax over `j` of `cos(x_i[t], y_j[t]) / tau`,
/// averaged over tokens. `x[i][t]` is token `t` of item `i`.
pub fn similarity(x: &[Vec<Vec<f64>>], y: &[Vec<Vec<f64>>], tau: f64) -> Vec<Vec<f64>> {
    let n = x.len();
    let t_count = x[0].len();
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        for t in 0..t_count {
            let mut denom = 0.0;
            for k in 0..n {
                denom += (cosine(&x[i][t], &y[k][t]) / tau).exp();
            }
            for j in 0..n {
                p[i][j] += (cosine(&x[i][t], &y[j][t]) / tau).exp() / denom / t_count as f64;
            }
        }
    }
    p
}

pub fn target(n: usize, alpha: f64, i: usize, j: usize) -> f64 {
    let delta = if i == j { 1.0 } else { 0.0 };
    if n == 1 {
        return delta;
    }
    (1.0 - alpha) * delta + alpha / (n as f64 - 1.0) * (1.0 - delta)
}

/// Full alignment loss from token arrays `a[i][t][d]`, `b[i][t][d]`.
pub fn msad(a: &[Vec<Vec<f64>>], b: &[Vec<Vec<f64>>], tau: f64, alpha: f64) -> f64 {
    let n = a.len();
    let pa = similarity(a, b, tau);
    let pb = similarity(b, a, tau);
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            let y = target(n, alpha, i, j);
            s += y * pa[i][j].max(1e-8).ln() + y * pb[i][j].max(1e-8).ln();
        }
    }
    -s / (2.0 * n as f64)
}

pub fn softmax(z: &[f64], tau: f64) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// DINO cross-entropy from student logits `s[v][i][k]` and teacher
/// probabilities `t[g][i][k]`, averaged over pairs `v != g` and the batch.
pub fn dino(student_logits: &[Vec<Vec<f64>>], student_tau: f64, teacher: &[Vec<Vec<f64>>]) -> f64 {
    let mut total = 0.0;
    let mut terms = 0;
    for (g, tg) in teacher.iter().enumerate() {
        for (v, sv) in student_logits.iter().enumerate() {
            if v == g {
                continue;
            }
            let mut batch = 0.0;
            for i in 0..tg.len() {
                let p = softmax(&sv[i], student_tau);
                batch += -tg[i].iter().zip(&p).map(|(t, q)| t * q.ln()).sum::<f64>();
            }
            total += batch / tg.len() as f64;
            terms += 1;
        }
    }
    total / terms as f64
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut up = x.to_vec();
            let mut dn = x.to_vec();
            up[i] += h;
            dn[i] -= h;
            (f(&up) - f(&dn)) / (2.0 * h)
        })
        .collect()
}

/// Exhaustive k-NN: all pairwise cosine distances, full stable sort, plain
/// vote count, ties to the larger summed similarity then the smaller label.
pub fn knn(train: &[Vec<f64>], labels: &[usize], query: &[f64], k: usize) -> usize {
    let mut d: Vec<(f64, usize)> = train
        .iter()
        .enumerate()
        .map(|(i, x)| (1.0 - cosine(x, query), i))
        .collect();
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let classes = labels.iter().max().unwrap() + 1;
    let mut votes = vec![0usize; classes];
    let mut sims = vec![0.0f64; classes];
    for &(dist, i) in d.iter().take(k.min(train.len())) {
        votes[labels[i]] += 1;
        sims[labels[i]] += 1.0 - dist;
    }
    let mut best = 0;
    for c in 1..classes {
        if votes[c] > votes[best] || (votes[c] == votes[best] && sims[c] > sims[best]) {
            best = c;
        }
    }
    best
}
