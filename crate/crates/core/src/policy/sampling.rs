use rand::Rng;

use crate::error::{contract, NavError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleMode {
    Greedy,
    Sample,
    /// Categorical draw from `softmax(logits / τ)`.
    Temperature(f64),
}

impl SampleMode {
    pub fn temperature(self) -> f64 {
        match self {
            SampleMode::Temperature(t) => t,
            _ => 1.0,
        }
    }
}

/// Log-softmax of `logits / tau`; `-inf` entries stay excluded.
pub fn log_softmax(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(NavError::Config(format!("temperature {tau} must be positive and finite")));
    }
    if logits.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return contract("logits contain NaN or +inf");
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return contract("every action is masked");
    }
    let scaled: Vec<f64> = logits.iter().map(|&x| (x - max) / tau).collect();
    let lse = scaled.iter().map(|&x| x.exp()).sum::<f64>().ln();
    Ok(scaled.iter().map(|&x| x - lse).collect())
}

/// Picks an action index from masked logits (`-inf` = unavailable) and returns
/// it with its log-probability under the distribution it was drawn from.
/// Greedy picks the lowest index among maximal logits and reports its
/// probability under the untempered softmax.
pub fn sample_action(logits: &[f64], mode: SampleMode, rng: &mut impl Rng) -> Result<(usize, f64)> {
    let logp = log_softmax(logits, mode.temperature())?;
    let idx = match mode {
        SampleMode::Greedy => {
            let mut best = 0;
            for (i, &x) in logits.iter().enumerate() {
                if x > logits[best] {
                    best = i;
                }
            }
            best
        }
        SampleMode::Sample | SampleMode::Temperature(_) => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = None;
            let mut last = 0;
            for (i, &lp) in logp.iter().enumerate() {
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                last = i;
                acc += lp.exp();
                if u < acc {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or(last)
        }
    };
    Ok((idx, logp[idx]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_for;

    #[test]
    fn greedy_takes_the_argmax() {
        let mut rng = rng_for(0, &[]);
        assert_eq!(sample_action(&[0.1, 2.0, -1.0], SampleMode::Greedy, &mut rng).unwrap().0, 1);
        assert_eq!(sample_action(&[3.0, 3.0], SampleMode::Greedy, &mut rng).unwrap().0, 0);
    }

    #[test]
    fn masked_entries_are_never_drawn() {
        let mut rng = rng_for(1, &[]);
        let logits = [f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY, 1.0];
        for _ in 0..500 {
            let (i, lp) = sample_action(&logits, SampleMode::Sample, &mut rng).unwrap();
            assert!(i == 1 || i == 3);
            assert!(lp.is_finite());
        }
        let all = [f64::NEG_INFINITY; 3];
        assert!(sample_action(&all, SampleMode::Sample, &mut rng).is_err());
    }

    #[test]
    fn huge_temperature_is_nearly_uniform() {
        let lp = log_softmax(&[5.0, -3.0, 0.5, 2.0], 1e6).unwrap();
        for x in lp {
            assert!((x.exp() - 0.25).abs() < 1e-5);
        }
        assert!(log_softmax(&[1.0], 0.0).is_err());
    }
}
