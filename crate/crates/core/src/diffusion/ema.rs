use crate::denoiser::DenoiserParams;
use crate::error::{Error, Result};

/// `shadow = decay · shadow + (1 - decay) · current`, elementwise.
pub fn ema_update(shadow: &mut DenoiserParams, current: &DenoiserParams, decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::Parameter(format!("EMA decay {decay} outside [0, 1)")));
    }
    shadow.check_same_shape(current)?;
    for (s, c) in shadow.values_mut().zip(current.values()) {
        *s = decay * *s + (1.0 - decay) * c;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ArchitectureConfig;

    fn filled(v: f64) -> DenoiserParams {
        let mut p = DenoiserParams::zeros(ArchitectureConfig::tiny());
        p.values_mut().for_each(|x| *x = v);
        p
    }

    #[test]
    fn zero_decay_copies_current() {
        let mut s = filled(3.0);
        ema_update(&mut s, &filled(-1.5), 0.0).unwrap();
        assert!(s.bitwise_eq(&filled(-1.5)));
    }

    #[test]
    fn geometric_closed_form() {
        for (decay, k, s0, c) in [(0.9, 25, 2.0, -1.0), (0.5, 40, 0.0, 1.0), (0.999, 1000, 0.0, 1.0)] {
            let mut s = filled(s0);
            let target = filled(c);
            for _ in 0..k {
                ema_update(&mut s, &target, decay).unwrap();
            }
            let dk = f64::powi(decay, k);
            let expect = dk * s0 + (1.0 - dk) * c;
            assert!(s.values().all(|v| (v - expect).abs() < 1e-12));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut s = filled(0.0);
        assert!(ema_update(&mut s, &filled(1.0), 1.0).is_err());
        assert!(ema_update(&mut s, &DenoiserParams::zeros(ArchitectureConfig::default()), 0.5).is_err());
    }
}
