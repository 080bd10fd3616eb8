#![allow(dead_code)]

use robustrisk::distortion::WeightFunction;

/// Weighted antitone least-squares fit by pool-adjacent-violators.
pub fn pava_decreasing(y: &[f64], w: &[f64]) -> Vec<f64> {
    let mut vals: Vec<f64> = Vec::with_capacity(y.len());
    let mut wts: Vec<f64> = Vec::with_capacity(y.len());
    let mut counts: Vec<usize> = Vec::with_capacity(y.len());
    for (&t, &wt) in y.iter().zip(w) {
        vals.push(t);
        wts.push(wt);
        counts.push(1);
        while vals.len() > 1 && vals[vals.len() - 2] < vals[vals.len() - 1] {
            let (v2, w2, c2) = (vals.pop().unwrap(), wts.pop().unwrap(), counts.pop().unwrap());
            let (v1, w1, c1) = (vals.pop().unwrap(), wts.pop().unwrap(), counts.pop().unwrap());
            vals.push((v1 * w1 + v2 * w2) / (w1 + w2));
            wts.push(w1 + w2);
            counts.push(c1 + c2);
        }
    }
    let mut out = Vec::with_capacity(y.len());
    for (v, c) in vals.into_iter().zip(counts) {
        out.extend(std::iter::repeat_n(v, c));
    }
    out
}

/// Projection of increments δ onto {δ/h non-increasing ≥ 0 left of k, non-decreasing ≥ 0 right of k}.
fn project_increments(delta: &mut [f64], h: &[f64], k: usize) {
    let n = delta.len();
    let target: Vec<f64> = delta.iter().zip(h).map(|(d, w)| d / w).collect();
    let wts: Vec<f64> = h.iter().map(|w| w * w).collect();
    let left = pava_decreasing(&target[..k], &wts[..k]);
    let rt: Vec<f64> = target[k..].iter().rev().copied().collect();
    let rw: Vec<f64> = wts[k..].iter().rev().copied().collect();
    let right = pava_decreasing(&rt, &rw);
    for (i, s) in left.into_iter().enumerate() {
        delta[i] = s.max(0.0) * h[i];
    }
    for (i, s) in right.into_iter().enumerate() {
        delta[n - 1 - i] = s.max(0.0) * h[n - 1 - i];
    }
}

/// Hat-basis loads ∫ γ φⱼ on the grid `x`.
fn loads(gamma: &WeightFunction, x: &[f64]) -> Vec<f64> {
    let m = x.len() - 1;
    let mut b = vec![0.0; m + 1];
    for j in 0..m {
        let (l, r) = (x[j], x[j + 1]);
        let h = r - l;
        for p in gamma.pieces() {
            let c = p.lo.max(l);
            let d = p.hi.min(r);
            if d <= c {
                continue;
            }
            let mid = 0.5 * (c + d);
            let s = (d - c) / 6.0;
            let f = |u: f64| p.a + p.b * u;
            b[j] += s * (f(c) * (r - c) + 4.0 * f(mid) * (r - mid) + f(d) * (r - d)) / h;
            b[j + 1] += s * (f(c) * (c - l) + 4.0 * f(mid) * (mid - l) + f(d) * (d - l)) / h;
        }
    }
    b
}

fn values_from(delta: &[f64], x: &[f64], mean: f64) -> Vec<f64> {
    let m = delta.len();
    let mut v = vec![0.0; m + 1];
    for i in 0..m {
        v[i + 1] = v[i] + delta[i];
    }
    let cur: f64 = (0..m).map(|i| 0.5 * (x[i + 1] - x[i]) * (v[i] + v[i + 1])).sum();
    for t in v.iter_mut() {
        *t += mean - cur;
    }
    v
}

fn mass_mul(v: &[f64], x: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut out = vec![0.0; n];
    for j in 0..n - 1 {
        let h = x[j + 1] - x[j];
        out[j] += h / 3.0 * v[j] + h / 6.0 * v[j + 1];
        out[j + 1] += h / 6.0 * v[j] + h / 3.0 * v[j + 1];
    }
    out
}

/// Projection of γ onto piecewise-linear cone members on the grid `x` (ξ a node),
/// by accelerated projected gradient on the increments with adaptive restart.
pub fn cone_oracle_on(gamma: &WeightFunction, xi: f64, x: &[f64], iters: usize) -> Vec<f64> {
    let m = x.len() - 1;
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let k = x.iter().position(|&t| (t - xi).abs() < 1e-12).expect("xi must be a grid node");
    let b = loads(gamma, x);
    let mean = gamma.mean();
    let eval = |d: &[f64]| -> (Vec<f64>, f64) {
        let v = values_from(d, x, mean);
        let mv = mass_mul(&v, x);
        let obj = 0.5 * v.iter().zip(&mv).map(|(a, c)| a * c).sum::<f64>() - v.iter().zip(&b).map(|(a, c)| a * c).sum::<f64>();
        let mut g = vec![0.0; m];
        let mut acc = 0.0;
        for i in (0..m).rev() {
            acc += mv[i + 1] - b[i + 1];
            g[i] = acc;
        }
        (g, obj)
    };
    let mut probe: Vec<f64> = (0..m).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
    let mut lip = 1.0;
    for _ in 0..60 {
        let nrm = probe.iter().map(|a| a * a).sum::<f64>().sqrt();
        probe.iter_mut().for_each(|a| *a /= nrm);
        let v = values_from(&probe, x, 0.0);
        let mv = mass_mul(&v, x);
        let mut acc = 0.0;
        let mut g = vec![0.0; m];
        for i in (0..m).rev() {
            acc += mv[i + 1];
            g[i] = acc;
        }
        lip = g.iter().map(|a| a * a).sum::<f64>().sqrt();
        probe = g;
    }
    let step = 0.9 / lip;
    let mut d = vec![0.0; m];
    let mut yk = d.clone();
    let mut t = 1.0f64;
    let mut prev_obj = f64::INFINITY;
    for _ in 0..iters {
        let (g, _) = eval(&yk);
        let mut nd: Vec<f64> = yk.iter().zip(&g).map(|(a, c)| a - step * c).collect();
        project_increments(&mut nd, &h, k);
        let (_, obj) = eval(&nd);
        if obj > prev_obj {
            t = 1.0;
            yk = d.clone();
            continue;
        }
        let moved = nd.iter().zip(&d).fold(0.0f64, |a, (p, q)| a.max((p - q).abs()));
        if moved < 1e-16 {
            d = nd;
            break;
        }
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / tn;
        yk = nd.iter().zip(&d).map(|(a, c)| a + beta * (a - c)).collect();
        d = nd;
        t = tn;
        prev_obj = obj;
    }
    values_from(&d, x, mean)
}

/// 4096-cell oracle: a coarse uniform solve locates the kinks, then half of the
/// cells are placed uniformly and half in windows around those kinks.
/// Breakpoints of γ and ξ must be multiples of 1/64.
pub fn cone_oracle(gamma: &WeightFunction, xi: f64) -> (Vec<f64>, Vec<f64>) {
    let coarse: Vec<f64> = (0..=1024).map(|i| i as f64 / 1024.0).collect();
    let v = cone_oracle_on(gamma, xi, &coarse, 3000);
    let s: Vec<f64> = (0..1024).map(|j| (v[j + 1] - v[j]) * 1024.0).collect();
    let jumps: Vec<f64> = (1..1024).map(|j| (s[j] - s[j - 1]).abs()).collect();
    let top = jumps.iter().fold(0.0f64, |a, b| a.max(*b));
    let mut windows: Vec<(f64, f64)> = Vec::new();
    for (i, &jmp) in jumps.iter().enumerate() {
        if jmp > 1e-3 * top {
            let c = (i + 1) as f64 / 1024.0;
            let (l, r) = ((c - 3.0 / 1024.0).max(0.0), (c + 3.0 / 1024.0).min(1.0));
            match windows.last_mut() {
                Some(w) if l <= w.1 => w.1 = r,
                _ => windows.push((l, r)),
            }
        }
    }
    let mut x: Vec<f64> = (0..=2048).map(|i| i as f64 / 2048.0).collect();
    let total: f64 = windows.iter().map(|w| w.1 - w.0).sum();
    if total > 0.0 {
        for w in &windows {
            let n = ((w.1 - w.0) / total * 2048.0).round().max(1.0) as usize;
            x.extend((1..n).map(|i| w.0 + (w.1 - w.0) * i as f64 / n as f64));
        }
    }
    x.sort_by(f64::total_cmp);
    x.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let v = cone_oracle_on(gamma, xi, &x, 8000);
    (x, v)
}

pub fn pl_eval_on(x: &[f64], v: &[f64], u: f64) -> f64 {
    let j = x.partition_point(|&t| t <= u).clamp(1, x.len() - 1) - 1;
    let w = (u - x[j]) / (x[j + 1] - x[j]);
    v[j] * (1.0 - w) + v[j + 1] * w
}

/// L2 distance between two functions on (0,1) by a fine midpoint rule.
pub fn l2_distance(f: impl Fn(f64) -> f64, g: impl Fn(f64) -> f64, n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        let u = (i as f64 + 0.5) / n as f64;
        s += (f(u) - g(u)).powi(2);
    }
    (s / n as f64).sqrt()
}

