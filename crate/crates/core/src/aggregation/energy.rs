use crate::error::{Error, Result};

/// Smallest `p` with `Σ_{i<p} s_i² / Σ_i s_i² ≥ tau`; `0` when every `s_i` is zero.
pub fn energy_rank(s: &[f64], tau: f64) -> Result<usize> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidThreshold(tau));
    }
    for (i, w) in s.windows(2).enumerate() {
        if w[0].partial_cmp(&w[1]).is_none_or(|o| o.is_lt()) {
            return Err(Error::UnsortedSpectrum { index: i + 1 });
        }
    }
    if s.last().is_some_and(|&x| x < 0.0) {
        return Err(Error::UnsortedSpectrum { index: s.len() - 1 });
    }
    let total: f64 = s.iter().map(|x| x * x).sum();
    if total == 0.0 {
        return Ok(0);
    }
    let mut acc = 0.0;
    for (i, x) in s.iter().enumerate() {
        acc += x * x;
        if acc / total >= tau {
            return Ok(i + 1);
        }
    }
    Ok(s.len())
}

/// Fraction of squared-singular-value mass in the first `p` values.
pub fn retained_energy(s: &[f64], p: usize) -> f64 {
    let total: f64 = s.iter().map(|x| x * x).sum();
    if total == 0.0 {
        return 1.0;
    }
    s[..p].iter().map(|x| x * x).sum::<f64>() / total
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn prefix_scan_oracle(s: &[f64], tau: f64) -> usize {
        let total: f64 = s.iter().map(|x| x * x).sum();
        if total == 0.0 {
            return 0;
        }
        (1..=s.len())
            .find(|&p| s[..p].iter().map(|x| x * x).sum::<f64>() / total >= tau)
            .unwrap_or(s.len())
    }

    #[test]
    fn hand_cases() {
        assert_eq!(energy_rank(&[1.0, 0.0, 0.0], 0.9).unwrap(), 1);
        assert_eq!(energy_rank(&[2.0, 1.0], 0.79).unwrap(), 1);
        assert_eq!(energy_rank(&[2.0, 1.0], 0.81).unwrap(), 2);
        assert_eq!(energy_rank(&[0.0, 0.0], 1.0).unwrap(), 0);
        assert_eq!(energy_rank(&[], 0.5).unwrap(), 0);
    }

    #[test]
    fn ties_do_not_force_the_group() {
        assert_eq!(energy_rank(&[1.0, 1.0, 1.0, 1.0], 0.5).unwrap(), 2);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(energy_rank(&[1.0], 0.0), Err(Error::InvalidThreshold(_))));
        assert!(matches!(energy_rank(&[1.0], 1.01), Err(Error::InvalidThreshold(_))));
        assert!(matches!(
            energy_rank(&[1.0, 2.0], 0.5),
            Err(Error::UnsortedSpectrum { index: 1 })
        ));
        assert!(energy_rank(&[1.0, -1.0], 0.5).is_err());
    }

    #[test]
    fn matches_prefix_scan_on_fixed_spectrum() {
        let mut s: Vec<f64> = (0..20).map(|i| (1.0 + i as f64).powf(-1.3) * 7.0).collect();
        s.sort_by(|a, b| b.total_cmp(a));
        assert_eq!(energy_rank(&s, 0.95).unwrap(), prefix_scan_oracle(&s, 0.95));
    }

    proptest! {
        #[test]
        fn agrees_with_oracle_and_is_monotone(
            mut s in prop::collection::vec(0.0f64..10.0, 0..20),
            t1 in 0.01f64..=1.0,
            t2 in 0.01f64..=1.0,
        ) {
            s.sort_by(|a, b| b.total_cmp(a));
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let p_lo = energy_rank(&s, lo).unwrap();
            let p_hi = energy_rank(&s, hi).unwrap();
            prop_assert_eq!(p_lo, prefix_scan_oracle(&s, lo));
            prop_assert!(p_lo <= p_hi);
            prop_assert!(p_hi <= s.len());
            if p_hi > 0 {
                prop_assert!(retained_energy(&s, p_hi) >= hi);
            }
        }
    }
}
