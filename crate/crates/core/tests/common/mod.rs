#![allow(dead_code)]

use spatial_ratchet::Configuration;

/// Law at `time` of a birth-death chain on `0..=cap` started at `n0`, with
/// total rates `birth(n)` and `death(n)`, by RK4 on the master equation.
/// Births out of `cap` are dropped.
pub fn master_equation(
    birth: impl Fn(u64) -> f64,
    death: impl Fn(u64) -> f64,
    n0: u64,
    cap: u64,
    time: f64,
    steps: usize,
) -> Vec<f64> {
    let size = cap as usize + 1;
    let b: Vec<f64> = (0..=cap)
        .map(|n| if n < cap { birth(n) } else { 0.0 })
        .collect();
    let d: Vec<f64> = (0..=cap).map(&death).collect();
    let rhs = |p: &[f64]| -> Vec<f64> {
        (0..size)
            .map(|n| {
                let mut v = -(b[n] + d[n]) * p[n];
                if n > 0 {
                    v += b[n - 1] * p[n - 1];
                }
                if n + 1 < size {
                    v += d[n + 1] * p[n + 1];
                }
                v
            })
            .collect()
    };
    let mut p = vec![0.0; size];
    p[n0 as usize] = 1.0;
    let h = time / steps as f64;
    let axpy = |x: &[f64], k: &[f64], a: f64| -> Vec<f64> {
        x.iter().zip(k).map(|(x, k)| x + a * k).collect()
    };
    for _ in 0..steps {
        let k1 = rhs(&p);
        let k2 = rhs(&axpy(&p, &k1, h / 2.0));
        let k3 = rhs(&axpy(&p, &k2, h / 2.0));
        let k4 = rhs(&axpy(&p, &k3, h));
        for n in 0..size {
            p[n] += h / 6.0 * (k1[n] + 2.0 * k2[n] + 2.0 * k3[n] + k4[n]);
        }
    }
    p
}

pub fn mean_of(law: &[f64]) -> f64 {
    law.iter().enumerate().map(|(n, p)| n as f64 * p).sum()
}

pub fn single_site(count: u64) -> Configuration {
    let mut c = Configuration::new();
    c.add(0, 0, count);
    c
}

pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
