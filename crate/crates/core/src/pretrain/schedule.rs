/// Learning rate for update number `step` (1-based): linear warmup from 0 to
/// `peak` over `warmup` steps, then linear decay reaching 0 at `total`.
pub fn learning_rate(step: u64, peak: f64, warmup: u64, total: u64) -> f64 {
    if step >= total {
        return 0.0;
    }
    if warmup > 0 && step <= warmup {
        return peak * (step as f64 / warmup as f64);
    }
    peak * ((total - step) as f64 / (total - warmup) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_midpoint_and_end() {
        assert_eq!(learning_rate(5000, 2e-4, 10_000, 2_000_000), 1e-4);
        assert_eq!(learning_rate(10_000, 2e-4, 10_000, 2_000_000), 2e-4);
        assert_eq!(learning_rate(2_000_000, 2e-4, 10_000, 2_000_000), 0.0);
        assert_eq!(learning_rate(0, 2e-4, 10_000, 2_000_000), 0.0);
    }

    #[test]
    fn decay_is_linear() {
        let lr = |s| learning_rate(s, 1.0, 10, 110);
        assert!((lr(60) - 0.5).abs() < 1e-15);
        assert!((lr(100) - 0.1).abs() < 1e-15);
        assert!(lr(109) > 0.0);
    }

    #[test]
    fn no_warmup() {
        assert_eq!(learning_rate(1, 1.0, 0, 4), 0.75);
        assert_eq!(learning_rate(4, 1.0, 0, 4), 0.0);
        assert_eq!(learning_rate(0, 1.0, 0, 4), 1.0);
    }
}
