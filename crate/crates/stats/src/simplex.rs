//! Derivative-free Nelder–Mead simplex search on a box.

#[derive(Debug, Clone, Copy)]
pub struct SimplexOptions {
    pub max_iter: usize,
    /// Stop when the spread of objective values across the simplex falls below
    /// `f_tol * (1 + |best|)`, so large objectives are not held to a spread
    /// finer than their own rounding.
    pub f_tol: f64,
    /// ... and the simplex diameter (max-norm) falls below this.
    pub x_tol: f64,
    pub initial_step: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            f_tol: 1e-12,
            x_tol: 1e-9,
            initial_step: 1.0,
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Best objective value after each iteration.
    pub trace: Vec<f64>,
}

/// Minimizes `f` starting from `start`. Points are projected into `[lower, upper]`
/// coordinate-wise before every evaluation.
pub fn nelder_mead<F>(mut f: F, start: &[f64], opts: &SimplexOptions) -> SimplexResult
where
    F: FnMut(&[f64]) -> f64,
{
    let n = start.len();
    let clamp = |x: &mut Vec<f64>| {
        for v in x.iter_mut() {
            *v = v.clamp(opts.lower, opts.upper);
        }
    };
    let mut eval = |x: &[f64]| {
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    if n == 0 {
        let value = eval(start);
        return SimplexResult {
            x: Vec::new(),
            value,
            iterations: 0,
            converged: true,
            trace: vec![value],
        };
    }

    let mut points: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    let mut p0 = start.to_vec();
    clamp(&mut p0);
    points.push(p0.clone());
    for i in 0..n {
        let mut p = p0.clone();
        p[i] += opts.initial_step;
        if p[i] > opts.upper {
            p[i] = p0[i] - opts.initial_step;
        }
        clamp(&mut p);
        points.push(p);
    }
    let mut values: Vec<f64> = points.iter().map(|p| eval(p)).collect();

    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iter {
        // order: best first; ties keep lower original index
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
        points = order.iter().map(|&i| points[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();
        trace.push(values[0]);

        let f_spread = values[n] - values[0];
        let x_spread = points
            .iter()
            .skip(1)
            .flat_map(|p| p.iter().zip(&points[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0_f64, f64::max);
        if f_spread.abs() <= opts.f_tol * (1.0 + values[0].abs()) && x_spread <= opts.x_tol {
            converged = true;
            break;
        }
        iterations += 1;

        let centroid: Vec<f64> = (0..n)
            .map(|j| points[..n].iter().map(|p| p[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = centroid
                .iter()
                .zip(&points[n])
                .map(|(c, w)| c + t * (c - w))
                .collect();
            clamp(&mut p);
            p
        };

        let reflected = along(1.0);
        let f_r = eval(&reflected);
        if f_r < values[0] {
            let expanded = along(2.0);
            let f_e = eval(&expanded);
            if f_e < f_r {
                points[n] = expanded;
                values[n] = f_e;
            } else {
                points[n] = reflected;
                values[n] = f_r;
            }
            continue;
        }
        if f_r < values[n - 1] {
            points[n] = reflected;
            values[n] = f_r;
            continue;
        }
        let (contracted, f_c) = if f_r < values[n] {
            let c = along(0.5);
            let v = eval(&c);
            (c, v)
        } else {
            let c = along(-0.5);
            let v = eval(&c);
            (c, v)
        };
        if f_c < values[n].min(f_r) {
            points[n] = contracted;
            values[n] = f_c;
            continue;
        }
        // shrink toward the best vertex
        for i in 1..=n {
            let mut p: Vec<f64> = points[i]
                .iter()
                .zip(&points[0])
                .map(|(x, b)| b + 0.5 * (x - b))
                .collect();
            clamp(&mut p);
            values[i] = eval(&p);
            points[i] = p;
        }
    }

    let best = (0..=n)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)))
        .unwrap_or(0);
    SimplexResult {
        x: points[best].clone(),
        value: values[best],
        iterations,
        converged,
        trace,
    }
}
