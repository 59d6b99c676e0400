//! Independent reference computations used to certify the fast paths:
//! central finite differences, the explicit GAE double sum, closed-form
//! pipeline makespans and binomial confidence bounds.
//!
//! Nothing in here is called by the training or scheduling code.

/// Central finite-difference gradient of `f` at `theta`.
pub fn central_difference<F>(theta: &[f64], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute norm when both are tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// How a unit ends, for the explicit GAE sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnitEnd {
    Continue,
    Terminated,
    Truncated(f64),
}

/// `A_t = sum_k (gamma lambda)^k delta_{t+k}`, summed until the episode
/// boundary, with every TD residual written out directly.
pub fn gae_double_sum(
    rewards: &[f64],
    values: &[f64],
    ends: &[UnitEnd],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let n = rewards.len();
    let delta = |t: usize| -> f64 {
        let next = match ends[t] {
            UnitEnd::Terminated => 0.0,
            UnitEnd::Truncated(v) => v,
            UnitEnd::Continue if t + 1 < n => values[t + 1],
            UnitEnd::Continue => bootstrap,
        };
        rewards[t] + gamma * next - values[t]
    };
    (0..n)
        .map(|t| {
            let mut total = 0.0;
            let mut k = 0;
            loop {
                let idx = t + k;
                if idx >= n {
                    break;
                }
                total += (gamma * lambda).powi(k as i32) * delta(idx);
                if ends[idx] != UnitEnd::Continue {
                    break;
                }
                k += 1;
            }
            total
        })
        .collect()
}

/// Rollout makespan of a `k`-stage generate/simulate pipeline over `steps`
/// steps, where each stage call takes `gen` and `sim` time units and the two
/// components sit on separate resources.
///
/// With one stage the two calls strictly alternate. With two or more stages
/// the bottleneck resource never idles after the first call of the other
/// resource, giving `k * steps * max + min`.
pub fn pipeline_makespan(steps: usize, stages: usize, gen: f64, sim: f64) -> f64 {
    if stages <= 1 {
        steps as f64 * (gen + sim)
    } else {
        (stages * steps) as f64 * gen.max(sim) + gen.min(sim)
    }
}

/// Two-sided `z`-sigma interval half-width of a binomial proportion.
pub fn binomial_halfwidth(p: f64, n: usize, z: f64) -> f64 {
    z * (p * (1.0 - p) / n as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_on_quadratic() {
        let g = central_difference(&[1.0, -2.0], 1e-5, |x| x[0] * x[0] + 3.0 * x[1]);
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn double_sum_reward_to_go() {
        let a = gae_double_sum(
            &[0.0, 0.0, 1.0],
            &[0.0; 3],
            &[UnitEnd::Continue, UnitEnd::Continue, UnitEnd::Terminated],
            0.0,
            1.0,
            1.0,
        );
        assert_eq!(a, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn makespans() {
        assert_eq!(pipeline_makespan(10, 1, 1.0, 1.0), 20.0);
        assert_eq!(pipeline_makespan(10, 2, 0.5, 0.5), 10.5);
    }
}
