//! Time discretisation.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Increasing knots `t0 = knots[0] < ... < knots[M] = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    knots: Vec<f64>,
}

impl TimeGrid {
    /// Uniform grid with `steps` intervals on `[t0, t_end]`.
    pub fn uniform(t0: f64, t_end: f64, steps: usize) -> Result<Self> {
        if !(t0 >= 0.0) || !(t_end > t0) || !t_end.is_finite() {
            return invalid(format!("time grid needs 0 <= t0 < T, got [{t0}, {t_end}]"));
        }
        if steps == 0 {
            return invalid("time grid needs at least one step");
        }
        let dt = (t_end - t0) / steps as f64;
        let mut knots: Vec<f64> = (0..=steps).map(|i| t0 + dt * i as f64).collect();
        knots[steps] = t_end;
        Ok(Self { knots })
    }

    /// Arbitrary strictly increasing knots.
    pub fn from_knots(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 {
            return invalid("time grid needs at least two knots");
        }
        if knots[0] < 0.0 || knots.windows(2).any(|w| !(w[1] > w[0])) {
            return invalid("knots must be nonnegative and strictly increasing");
        }
        Ok(Self { knots })
    }

    pub fn steps(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn t0(&self) -> f64 {
        self.knots[0]
    }

    pub fn t_end(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn time(&self, i: usize) -> f64 {
        self.knots[i]
    }

    pub fn dt(&self, i: usize) -> f64 {
        self.knots[i + 1] - self.knots[i]
    }

    /// Index of the knot equal (to rounding) to `t`, if any.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let scale = (self.t_end() - self.t0()).max(1.0);
        self.knots
            .iter()
            .position(|&k| (k - t).abs() <= 1e-9 * scale)
    }

    /// Sub-grid on knots `from..=to`.
    pub fn slice(&self, from: usize, to: usize) -> Result<Self> {
        if from >= to || to > self.steps() {
            return invalid(format!(
                "bad grid slice {from}..={to} of {} steps",
                self.steps()
            ));
        }
        Ok(Self {
            knots: self.knots[from..=to].to_vec(),
        })
    }

    pub fn is_uniform(&self) -> bool {
        let dt0 = self.dt(0);
        (0..self.steps()).all(|i| (self.dt(i) - dt0).abs() <= 1e-12 * dt0.max(1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_endpoints_exact() {
        let g = TimeGrid::uniform(0.25, 1.0, 3).unwrap();
        assert_eq!(g.t0(), 0.25);
        assert_eq!(g.t_end(), 1.0);
        assert_eq!(g.steps(), 3);
        assert!(g.is_uniform());
        assert_eq!(g.index_of(0.5), Some(1));
        assert_eq!(g.index_of(0.6), None);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TimeGrid::uniform(0.0, 1.0, 0).is_err());
        assert!(TimeGrid::uniform(1.0, 1.0, 4).is_err());
        assert!(TimeGrid::from_knots(vec![0.0, 0.5, 0.5]).is_err());
    }

    #[test]
    fn slice_keeps_knots() {
        let g = TimeGrid::uniform(0.0, 1.0, 8).unwrap();
        let s = g.slice(2, 6).unwrap();
        assert_eq!(s.steps(), 4);
        assert_eq!(s.t0(), 0.25);
        assert_eq!(s.t_end(), 0.75);
    }
}
