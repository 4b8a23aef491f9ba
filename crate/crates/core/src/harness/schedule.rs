/// Linear warm-up from 0 to `base_lr` over `warmup_steps`, then half-cosine
/// decay to 0 at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64) -> f64 {
    let step = step.min(total_steps);
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let decay = total_steps.saturating_sub(warmup_steps);
    if decay == 0 {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / decay as f64;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchors() {
        assert_eq!(cosine_lr(0, 100, 20, 0.001), 0.0);
        assert_eq!(cosine_lr(20, 100, 20, 0.001), 0.001);
        assert!(cosine_lr(100, 100, 20, 0.001).abs() < 1e-18);
        assert!((cosine_lr(60, 100, 20, 0.001) - 0.0005).abs() < 1e-15);
        assert_eq!(cosine_lr(10, 100, 20, 0.001), 0.0005);
    }

    #[test]
    fn continuous_and_non_negative() {
        let (total, warm, base) = (1000, 100, 0.001);
        let mut prev = cosine_lr(0, total, warm, base);
        for s in 1..=total {
            let lr = cosine_lr(s, total, warm, base);
            assert!(lr >= 0.0);
            assert!((lr - prev).abs() <= base / warm as f64 + 1e-12, "jump at {s}");
            prev = lr;
        }
        assert!((cosine_lr(warm - 1, total, warm, base) - cosine_lr(warm, total, warm, base)).abs() < 2e-5);
    }
}
