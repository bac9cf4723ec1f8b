use crate::error::{Error, Result};

/// Half-cosine decay from `lr0` at step 0 to 0 at `total_steps`.
pub fn cosine_lr_at(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::Schedule {
            step,
            total: total_steps,
        });
    }
    let t = step as f64 / total_steps as f64;
    Ok((0.5 * lr0 * (1.0 + (std::f64::consts::PI * t).cos())).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn boundaries() {
        assert_eq!(cosine_lr_at(0, 100, 0.05).unwrap(), 0.05);
        assert!(cosine_lr_at(100, 100, 0.05).unwrap().abs() < 1e-18);
        assert!((cosine_lr_at(50, 100, 0.05).unwrap() - 0.025).abs() < 1e-15);
    }

    #[test]
    fn out_of_range() {
        assert!(matches!(cosine_lr_at(11, 10, 1.0), Err(Error::Schedule { step: 11, total: 10 })));
        assert!(cosine_lr_at(0, 0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn nonincreasing_and_bounded(total in 1usize..5000, lr0 in 1e-4f64..10.0) {
            let mut prev = f64::INFINITY;
            for s in 0..=total {
                let lr = cosine_lr_at(s, total, lr0).unwrap();
                prop_assert!(lr <= prev && (0.0..=lr0).contains(&lr));
                prev = lr;
            }
        }
    }
}
