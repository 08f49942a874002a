use serde::Serialize;

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl MeanEstimate {
    /// Mean and standard error over `values`, summed in iteration order.
    pub fn from_values<I: IntoIterator<Item = f64>>(values: I) -> Self {
        let values: Vec<f64> = values.into_iter().collect();
        let n = values.len();
        if n == 0 {
            return MeanEstimate {
                mean: f64::NAN,
                se: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        MeanEstimate { mean, se, n }
    }

    /// Proportion of `true` with the binomial standard error.
    pub fn proportion(hits: usize, n: usize) -> Self {
        if n == 0 {
            return MeanEstimate {
                mean: f64::NAN,
                se: f64::NAN,
                n,
            };
        }
        let p = hits as f64 / n as f64;
        MeanEstimate {
            mean: p,
            se: (p * (1.0 - p) / n as f64).sqrt(),
            n,
        }
    }

    pub fn variance(&self) -> f64 {
        self.se * self.se * self.n as f64
    }

    /// `|mean − target| ≤ k·se + floor`.
    pub fn within(&self, target: f64, k: f64, floor: f64) -> bool {
        (self.mean - target).abs() <= k * self.se + floor
    }

    pub fn scaled(&self, factor: f64) -> Self {
        MeanEstimate {
            mean: self.mean * factor,
            se: self.se * factor.abs(),
            n: self.n,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_se() {
        let est = MeanEstimate::from_values([1.0, 2.0, 3.0, 4.0]);
        assert_eq!(est.mean, 2.5);
        // sample variance 5/3
        assert!((est.se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert!(est.within(2.6, 1.0, 0.0));
        assert!(!est.within(10.0, 3.0, 0.0));
    }

    #[test]
    fn degenerate_inputs() {
        assert!(MeanEstimate::from_values(Vec::new()).mean.is_nan());
        assert_eq!(MeanEstimate::from_values([7.0]).se, 0.0);
        let p = MeanEstimate::proportion(3, 4);
        assert_eq!(p.mean, 0.75);
        assert!((p.se - (0.75f64 * 0.25 / 4.0).sqrt()).abs() < 1e-15);
    }
}
