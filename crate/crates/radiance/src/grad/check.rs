use crate::real::Real;
use rand::seq::SliceRandom;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Flat parameter index of the worst disagreement.
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compare analytic gradients against central finite differences on a sample
/// of parameters.
///
/// `grad` runs the full forward+backward pass, accumulating into its second
/// argument; `loss` is the forward pass alone, used for the two perturbed
/// evaluations per sampled parameter. Parameters with exactly zero analytic
/// gradient are skipped in favor of touched ones when enough exist.
///
/// Relative error per parameter: `|a - n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<T: Real>(
    values: &mut [T],
    loss: impl Fn(&[T]) -> T,
    grad: impl Fn(&[T], &mut [T]) -> T,
    n_params: usize,
    eps: f64,
    seed: u64,
) -> GradCheckReport {
    let mut analytic = vec![T::ZERO; values.len()];
    let _ = grad(values, &mut analytic);

    let mut touched: Vec<usize> = (0..values.len())
        .filter(|&i| analytic[i] != T::ZERO)
        .collect();
    let mut rng = crate::rng::stream(seed, "grad-check");
    touched.shuffle(&mut rng);
    let mut sample: Vec<usize> = touched.into_iter().take(n_params).collect();
    if sample.len() < n_params {
        let mut rest: Vec<usize> = (0..values.len())
            .filter(|&i| analytic[i] == T::ZERO)
            .collect();
        rest.shuffle(&mut rng);
        sample.extend(rest.into_iter().take(n_params - sample.len()));
    }

    let h = T::cast(eps);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: sample.len(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for &i in &sample {
        let saved = values[i];
        values[i] = saved + h;
        let plus = loss(values).to_f64();
        values[i] = saved - h;
        let minus = loss(values).to_f64();
        values[i] = saved;

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i].to_f64();
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_loss_is_exact() {
        let mut values = vec![1.0f64, -2.0, 3.0, 0.5];
        let report = grad_check(
            &mut values,
            |v| v.iter().map(|x| x * x).sum(),
            |v, g| {
                for i in 0..v.len() {
                    g[i] += 2.0 * v[i];
                }
                v.iter().map(|x| x * x).sum()
            },
            4,
            1e-3,
            0,
        );
        assert!(report.max_rel_error <= 1e-9, "{report:?}");
    }

    #[test]
    fn halving_eps_stays_stable() {
        // Discretization sanity on a smooth non-polynomial loss.
        let run = |eps: f64| {
            let mut values = vec![0.3f64, -0.8, 1.2];
            grad_check(
                &mut values,
                |v| v.iter().map(|x| (x.sin() * 1.5).exp()).sum(),
                |v, g| {
                    let mut l = 0.0;
                    for i in 0..v.len() {
                        let e = (v[i].sin() * 1.5).exp();
                        l += e;
                        g[i] += e * 1.5 * v[i].cos();
                    }
                    l
                },
                3,
                eps,
                0,
            )
            .max_rel_error
        };
        let coarse = run(1e-3);
        let fine = run(5e-4);
        assert!(fine <= coarse.max(1e-12) * 10.0, "coarse {coarse} fine {fine}");
    }

    #[test]
    fn unused_parameter_stays_zero() {
        // Only the first parameter enters the loss; the second must report a
        // zero analytic and a zero numeric derivative.
        let mut values = vec![2.0f64, 5.0];
        let report = grad_check(
            &mut values,
            |v| v[0] * v[0],
            |v, g| {
                g[0] += 2.0 * v[0];
                v[0] * v[0]
            },
            2,
            1e-3,
            0,
        );
        assert!(report.max_rel_error <= 1e-9);
    }
}
