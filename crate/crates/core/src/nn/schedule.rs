use super::{NnError, Result};

/// Linear decay from `base_lr` at iteration 0 to zero at `total_iters`.
pub fn lr_schedule(iter: u64, total_iters: u64, base_lr: f64) -> Result<f64> {
    if iter > total_iters {
        return Err(NnError::ScheduleOutOfRange {
            iter,
            total: total_iters,
        });
    }
    if total_iters == 0 {
        return Ok(base_lr);
    }
    Ok(base_lr * (1.0 - iter as f64 / total_iters as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(lr_schedule(0, 50_000, 1e-4).unwrap(), 1e-4);
        assert_eq!(lr_schedule(50_000, 50_000, 1e-4).unwrap(), 0.0);
        assert!((lr_schedule(25_000, 50_000, 4e-4).unwrap() - 2e-4).abs() < 1e-18);
    }

    #[test]
    fn past_the_end_is_an_error() {
        assert!(matches!(
            lr_schedule(11, 10, 1.0),
            Err(NnError::ScheduleOutOfRange { iter: 11, total: 10 })
        ));
    }
}
