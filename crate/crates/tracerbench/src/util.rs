//! Small numeric helpers shared across modules.

/// Compensated (Neumaier) summation.
///
/// Global mass ledgers add ~1e4..1e5 terms spanning many orders of magnitude;
/// plain summation drifts enough to eat into 1e-12-level budget checks, so all
/// global reductions on physical quantities go through this.
#[derive(Debug, Clone, Copy, Default)]
pub struct Kahan {
    sum: f64,
    comp: f64,
}

impl Kahan {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Compensated sum of an iterator of f64 terms.
pub fn csum(it: impl IntoIterator<Item = f64>) -> f64 {
    let mut k = Kahan::new();
    for x in it {
        k.add(x);
    }
    k.total()
}

/// Compensated dot product Σ aᵢ·bᵢ.
pub fn cdot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut k = Kahan::new();
    for (x, y) in a.iter().zip(b) {
        k.add(x * y);
    }
    k.total()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kahan_recovers_cancelled_terms() {
        // 1 + 1e16 - 1e16 loses the 1 in naive f64 summation order.
        let naive: f64 = [1.0, 1e16, -1e16].iter().sum();
        assert_eq!(naive, 0.0);
        assert_eq!(csum([1.0, 1e16, -1e16]), 1.0);
    }

    #[test]
    fn kahan_matches_exact_on_small_input() {
        assert_eq!(csum([0.25, 0.5, 0.125]), 0.875);
    }
}
