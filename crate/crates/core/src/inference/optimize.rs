//! Derivative-free minimisation, used to warm-start the sampler.

/// Nelder–Mead minimisation of `f` from `x0` with initial simplex edges
/// `steps`. Coefficients follow the dimension-adapted choice of Gao and Han,
/// which behaves much better than the classic ones beyond a handful of
/// dimensions. Non-finite objective values count as `+∞`.
///
/// Stops once the spread of objective values over the simplex falls below
/// `ftol` or after `max_evals` evaluations. Returns the best vertex and its
/// value.
pub(crate) fn nelder_mead(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    steps: &[f64],
    max_evals: usize,
    ftol: f64,
) -> (Vec<f64>, f64) {
    let n = x0.len();
    let mut eval = |x: &[f64]| {
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    if n == 0 {
        let v = eval(x0);
        return (Vec::new(), v);
    }
    let nf = n as f64;
    let (alpha, beta, gamma, delta) = (1.0, 1.0 + 2.0 / nf, 0.75 - 0.5 / nf, 1.0 - 1.0 / nf);

    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    pts.push(x0.to_vec());
    for (i, &h) in steps.iter().enumerate() {
        let mut p = x0.to_vec();
        p[i] += h;
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| eval(p)).collect();
    let mut evals = n + 1;
    let along = |c: &[f64], d: &[f64], t: f64| -> Vec<f64> { c.iter().zip(d).map(|(a, b)| a + t * (b - a)).collect() };

    loop {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.iter().map(|&i| pts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        if evals >= max_evals || (vals[n] - vals[0]).abs() <= ftol {
            break;
        }
        let mut c = vec![0.0; n];
        for p in &pts[..n] {
            for (ci, pi) in c.iter_mut().zip(p) {
                *ci += pi / nf;
            }
        }
        let worst = pts[n].clone();
        let xr = along(&c, &worst, -alpha);
        let fr = eval(&xr);
        evals += 1;
        if fr < vals[0] {
            let xe = along(&c, &xr, beta);
            let fe = eval(&xe);
            evals += 1;
            (pts[n], vals[n]) = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < vals[n - 1] {
            (pts[n], vals[n]) = (xr, fr);
            continue;
        }
        let (xc, fc, limit) = if fr < vals[n] {
            let x = along(&c, &xr, gamma);
            let v = eval(&x);
            (x, v, fr)
        } else {
            let x = along(&c, &worst, gamma);
            let v = eval(&x);
            (x, v, vals[n])
        };
        evals += 1;
        if fc < limit {
            (pts[n], vals[n]) = (xc, fc);
            continue;
        }
        // shrink towards the best vertex
        for i in 1..=n {
            pts[i] = along(&pts[0], &pts[i], delta);
            vals[i] = eval(&pts[i]);
        }
        evals += n;
    }
    (pts.swap_remove(0), vals[0])
}
