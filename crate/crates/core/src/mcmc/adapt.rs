//! Robbins–Monro scaling of random-walk proposals.

/// One Robbins–Monro step on the log scale: up by `(1 − target)/i` after
/// an acceptance, down by `target/i` after a rejection.
pub fn rm_adapt(scale: f64, accepted: bool, iteration: usize, target: f64) -> f64 {
    let i = iteration.max(1) as f64;
    let step = if accepted { (1.0 - target) / i } else { -target / i };
    (scale.ln() + step).exp()
}

/// Iterations at which proposal shapes are re-estimated and the
/// Robbins–Monro counter restarts: 0, 50, 150, 350, … up to `0.6 · warmup`.
pub fn refresh_points(warmup: usize) -> Vec<usize> {
    let limit = (0.6 * warmup as f64) as usize;
    let mut out = vec![0];
    let mut next = 50;
    let mut width = 50;
    while next <= limit {
        out.push(next);
        width *= 2;
        next += width;
    }
    out
}

/// Scale and acceptance bookkeeping of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapt {
    pub log_scale: f64,
    pub target: f64,
    /// Steps since the last restart.
    pub count: usize,
    pub accepted: u64,
    pub proposed: u64,
}

impl Adapt {
    /// Starts at the `2.38/√d` random-walk scale.
    pub fn new(dim: usize, target: f64) -> Self {
        Self { log_scale: (2.38 / (dim.max(1) as f64).sqrt()).ln(), target, count: 0, accepted: 0, proposed: 0 }
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn restart(&mut self) {
        self.count = 0;
    }

    /// Records an MH outcome; adapts during warmup, counts afterwards.
    pub fn record(&mut self, accepted: bool, adapting: bool) {
        if adapting {
            self.count += 1;
            self.log_scale = rm_adapt(self.scale(), accepted, self.count, self.target).ln();
        } else {
            self.proposed += 1;
            self.accepted += u64::from(accepted);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direction_of_steps() {
        assert!(rm_adapt(1.0, false, 3, 0.44) < 1.0);
        assert!(rm_adapt(1.0, true, 3, 0.44) > 1.0);
        assert!(rm_adapt(1e-300, false, 1, 0.99) > 0.0);
    }

    #[test]
    fn windows_double() {
        assert_eq!(refresh_points(1500), vec![0, 50, 150, 350, 750]);
        assert_eq!(refresh_points(10), vec![0]);
    }
}
