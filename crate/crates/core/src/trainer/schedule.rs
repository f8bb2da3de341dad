use std::f64::consts::PI;

/// Linear warmup from 0 to `target` over `warmup` steps, then a single
/// cosine cycle down to 0 at `total_steps`.
pub fn lr_at_step(step: u64, total_steps: u64, target: f64, warmup: u64) -> f64 {
    if warmup > 0 && step <= warmup {
        return target * step as f64 / warmup as f64;
    }
    if total_steps <= warmup {
        return target;
    }
    let progress = ((step - warmup) as f64 / (total_steps - warmup) as f64).min(1.0);
    0.5 * target * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn landmarks() {
        let t = 0.0005;
        assert_eq!(lr_at_step(0, 5000, t, 1000), 0.0);
        assert!((lr_at_step(500, 5000, t, 1000) - 0.00025).abs() < 1e-15);
        assert!((lr_at_step(1000, 5000, t, 1000) - t).abs() < 1e-15);
        assert!((lr_at_step(3000, 5000, t, 1000) - t / 2.0).abs() < 1e-15);
        assert!(lr_at_step(5000, 5000, t, 1000).abs() < 1e-15);
        assert!(lr_at_step(9000, 5000, t, 1000).abs() < 1e-15);
        assert_eq!(lr_at_step(3, 2, t, 0), 0.0);
        assert_eq!(lr_at_step(0, 10, t, 0), t);
    }

    proptest! {
        #[test]
        fn bounded_and_monotone_after_warmup(target in 1e-5f64..1e-2, warmup in 1u64..500, extra in 1u64..5000, s in 0u64..6000) {
            let total = warmup + extra;
            let v = lr_at_step(s, total, target, warmup);
            prop_assert!((0.0..=target).contains(&v));
            if s >= warmup {
                prop_assert!(lr_at_step(s + 1, total, target, warmup) <= v);
            } else {
                prop_assert!(lr_at_step(s + 1, total, target, warmup) > v);
            }
        }
    }
}
