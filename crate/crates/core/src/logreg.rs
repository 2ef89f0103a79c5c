//! Multinomial logistic regression on standardized features, fitted with
//! L-BFGS.
//!
//! Minimizes `(1/n) Σ CE(xᵢ, yᵢ) + λ/(2n) ‖W‖²` (biases unpenalized), which
//! has the same minimizer as the summed loss with an L2 strength of `λ`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::ClassId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LogRegError {
    #[error("training data holds fewer than two distinct classes")]
    SingleClassDegenerate,
    #[error("training data has inconsistent dimensions")]
    DimensionMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRegConfig {
    pub l2: f64,
    pub max_iter: usize,
    /// Stop once the gradient norm of the mean objective falls below this.
    pub tol: f64,
    pub history: usize,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        Self {
            l2: 1.0,
            max_iter: 500,
            tol: 1e-6,
            history: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticRegression {
    classes: Vec<ClassId>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// Row-major `classes × (dim + 1)`, bias last.
    weights: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

struct Problem {
    x: Vec<Vec<f64>>,
    y: Vec<usize>,
    n_classes: usize,
    dim: usize,
    l2: f64,
}

impl Problem {
    fn stride(&self) -> usize {
        self.dim + 1
    }

    /// Mean objective and its gradient.
    fn eval(&self, w: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let n = self.x.len() as f64;
        let s = self.stride();
        let mut logits = vec![0.0; self.n_classes];
        let mut loss = 0.0;
        for (xi, &yi) in self.x.iter().zip(&self.y) {
            for (c, l) in logits.iter_mut().enumerate() {
                let row = &w[c * s..(c + 1) * s];
                *l = row[self.dim] + row[..self.dim].iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let lse = max + z.ln();
            loss += lse - logits[yi];
            for (c, &l) in logits.iter().enumerate() {
                let p = (l - lse).exp() - f64::from(u8::from(c == yi));
                let g = &mut grad[c * s..(c + 1) * s];
                for (gj, xj) in g[..self.dim].iter_mut().zip(xi) {
                    *gj += p * xj;
                }
                g[self.dim] += p;
            }
        }
        let mut reg = 0.0;
        for c in 0..self.n_classes {
            for j in 0..self.dim {
                let wi = w[c * s + j];
                reg += wi * wi;
                grad[c * s + j] += self.l2 * wi;
            }
        }
        grad.iter_mut().for_each(|g| *g /= n);
        (loss + 0.5 * self.l2 * reg) / n
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl LogisticRegression {
    pub fn fit<V: AsRef<[f32]>>(samples: &[(V, ClassId)], config: &LogRegConfig) -> Result<Self, LogRegError> {
        let mut classes: Vec<ClassId> = samples.iter().map(|(_, c)| *c).collect();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(LogRegError::SingleClassDegenerate);
        }
        let dim = samples[0].0.as_ref().len();
        if samples.iter().any(|(v, _)| v.as_ref().len() != dim) {
            return Err(LogRegError::DimensionMismatch);
        }
        let n = samples.len() as f64;
        let mut mean = vec![0.0; dim];
        for (v, _) in samples {
            for (m, &x) in mean.iter_mut().zip(v.as_ref()) {
                *m += f64::from(x);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut scale = vec![0.0; dim];
        for (v, _) in samples {
            for ((s, &x), m) in scale.iter_mut().zip(v.as_ref()).zip(&mean) {
                *s += (f64::from(x) - m).powi(2);
            }
        }
        for s in &mut scale {
            let sd = (*s / n).sqrt();
            *s = if sd > 0.0 { sd } else { 1.0 };
        }

        let x: Vec<Vec<f64>> = samples
            .iter()
            .map(|(v, _)| {
                v.as_ref()
                    .iter()
                    .zip(mean.iter().zip(&scale))
                    .map(|(&x, (m, s))| (f64::from(x) - m) / s)
                    .collect()
            })
            .collect();
        let y = samples
            .iter()
            .map(|(_, c)| classes.binary_search(c).expect("class present"))
            .collect();
        let problem = Problem {
            x,
            y,
            n_classes: classes.len(),
            dim,
            l2: config.l2,
        };

        let (weights, iterations, converged) = lbfgs(&problem, config);
        Ok(Self {
            classes,
            mean,
            scale,
            weights,
            iterations,
            converged,
        })
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Class probabilities in the order of [`classes`](Self::classes).
    pub fn predict_proba(&self, v: &[f32]) -> Vec<f64> {
        let dim = self.dim();
        let s = dim + 1;
        let x: Vec<f64> = v
            .iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(&x, (m, sc))| (f64::from(x) - m) / sc)
            .collect();
        let logits: Vec<f64> = (0..self.classes.len())
            .map(|c| {
                let row = &self.weights[c * s..(c + 1) * s];
                row[dim] + dot(&row[..dim], &x)
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= z);
        p
    }

    /// Most probable class and its probability; ties go to the lower class id.
    pub fn predict(&self, v: &[f32]) -> (ClassId, f64) {
        let p = self.predict_proba(v);
        let (i, &best) = p
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |b, c| if c.1 > b.1 { c } else { b });
        (self.classes[i], best)
    }

    pub fn accuracy<V: AsRef<[f32]>>(&self, samples: &[(V, ClassId)]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        let hits = samples.iter().filter(|(v, c)| self.predict(v.as_ref()).0 == *c).count();
        hits as f64 / samples.len() as f64
    }
}

fn lbfgs(problem: &Problem, config: &LogRegConfig) -> (Vec<f64>, usize, bool) {
    let size = problem.n_classes * problem.stride();
    let mut w = vec![0.0; size];
    let mut g = vec![0.0; size];
    let mut f = problem.eval(&w, &mut g);
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut w_new = vec![0.0; size];
    let mut g_new = vec![0.0; size];

    for iter in 0..config.max_iter {
        if norm(&g) < config.tol {
            return (w, iter, true);
        }
        // Two-loop recursion for d = -H g.
        let mut q = g.clone();
        let m = s_hist.len();
        let mut alpha = vec![0.0; m];
        for i in (0..m).rev() {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            alpha[i] = rho * dot(&s_hist[i], &q);
            q.iter_mut().zip(&y_hist[i]).for_each(|(qj, yj)| *qj -= alpha[i] * yj);
        }
        let gamma = if m > 0 {
            dot(&s_hist[m - 1], &y_hist[m - 1]) / dot(&y_hist[m - 1], &y_hist[m - 1])
        } else {
            1.0 / norm(&g).max(1.0)
        };
        q.iter_mut().for_each(|v| *v *= gamma);
        for i in 0..m {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            let beta = rho * dot(&y_hist[i], &q);
            q.iter_mut().zip(&s_hist[i]).for_each(|(qj, sj)| *qj += (alpha[i] - beta) * sj);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
            s_hist.clear();
            y_hist.clear();
        }

        // Backtracking with the Armijo condition.
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            w_new.iter_mut().zip(w.iter().zip(&dir)).for_each(|(n, (a, d))| *n = a + step * d);
            let f_new = problem.eval(&w_new, &mut g_new);
            if f_new <= f + 1e-4 * step * slope {
                let s: Vec<f64> = w_new.iter().zip(&w).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
                if dot(&s, &y) > 1e-12 {
                    if s_hist.len() == config.history {
                        s_hist.remove(0);
                        y_hist.remove(0);
                    }
                    s_hist.push(s);
                    y_hist.push(y);
                }
                std::mem::swap(&mut w, &mut w_new);
                std::mem::swap(&mut g, &mut g_new);
                f = f_new;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No further decrease representable in floating point.
            return (w, iter + 1, norm(&g) < config.tol);
        }
    }
    let converged = norm(&g) < config.tol;
    (w, config.max_iter, converged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingestion::generate_synthetic_pool;

    fn separable() -> Vec<(Vec<f32>, ClassId)> {
        let mut out = Vec::new();
        for i in 0..40 {
            let t = i as f32 / 40.0;
            out.push((vec![-1.0 - t, 0.5 * t], ClassId(0)));
            out.push((vec![1.0 + t, -0.5 * t], ClassId(1)));
        }
        out
    }

    #[test]
    fn separable_two_class_fits_exactly() {
        let data = separable();
        let m = LogisticRegression::fit(&data, &LogRegConfig::default()).unwrap();
        assert_eq!(m.accuracy(&data), 1.0);
        assert!(m.converged, "iterations {}", m.iterations);
    }

    #[test]
    fn probabilities_are_normalized() {
        let (recs, labels) = generate_synthetic_pool(5, 30, 8, 1.5, 4);
        let data: Vec<_> = recs.iter().map(|r| r.vector.clone()).zip(labels).collect();
        let m = LogisticRegression::fit(&data, &LogRegConfig::default()).unwrap();
        for (v, _) in &data {
            let p = m.predict_proba(v);
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        let far = vec![1e6f32; 8];
        assert!((m.predict_proba(&far).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn single_class_is_degenerate() {
        let data = vec![(vec![0.0f32, 1.0], ClassId(2)), (vec![1.0, 0.0], ClassId(2))];
        assert_eq!(
            LogisticRegression::fit(&data, &LogRegConfig::default()),
            Err(LogRegError::SingleClassDegenerate)
        );
    }

    #[test]
    fn deterministic_fit() {
        let (recs, labels) = generate_synthetic_pool(3, 20, 4, 1.0, 8);
        let data: Vec<_> = recs.iter().map(|r| r.vector.clone()).zip(labels).collect();
        let a = LogisticRegression::fit(&data, &LogRegConfig::default()).unwrap();
        let b = LogisticRegression::fit(&data, &LogRegConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_feature_does_not_break_scaling() {
        let data = vec![
            (vec![0.0f32, 3.0], ClassId(0)),
            (vec![0.1, 3.0], ClassId(0)),
            (vec![2.0, 3.0], ClassId(1)),
            (vec![2.1, 3.0], ClassId(1)),
        ];
        let m = LogisticRegression::fit(&data, &LogRegConfig::default()).unwrap();
        assert_eq!(m.accuracy(&data), 1.0);
    }
}
