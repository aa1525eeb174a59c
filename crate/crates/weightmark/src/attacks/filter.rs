//! Order-5 Butterworth filters as cascaded second-order sections.
//!
//! Designed by bilinear transform of the analog prototype with frequency
//! prewarping; applied single-pass causal from zero initial state.

use rustfft::num_complex::Complex64;

/// One biquad (or degenerate first-order) section, coefficients normalized
/// so a0 == 1.
#[derive(Clone, Copy, Debug)]
pub struct Sos {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

pub const ORDER: usize = 5;

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Response {
    Lowpass,
    Highpass,
}

/// Butterworth analog prototype poles for the fixed order, left half-plane.
fn prototype_poles() -> Vec<Complex64> {
    (0..ORDER)
        .map(|k| {
            let theta = std::f64::consts::PI * (2 * k + ORDER + 1) as f64 / (2 * ORDER) as f64;
            Complex64::new(theta.cos(), theta.sin())
        })
        .collect()
}

/// Design the section cascade for a cutoff in Hz at the given sample rate.
pub fn design(kind: Response, cutoff_hz: f64, sample_rate: f64) -> Vec<Sos> {
    assert!(cutoff_hz > 0.0 && cutoff_hz < sample_rate / 2.0);
    let c = 2.0 * sample_rate;
    let warped = c * (std::f64::consts::PI * cutoff_hz / sample_rate).tan();

    let analog: Vec<Complex64> = prototype_poles()
        .into_iter()
        .map(|p| match kind {
            Response::Lowpass => p * warped,
            Response::Highpass => warped / p,
        })
        .collect();
    let digital: Vec<Complex64> = analog
        .iter()
        .map(|&s| (Complex64::new(c, 0.0) + s) / (Complex64::new(c, 0.0) - s))
        .collect();

    // Conjugate pairs (k, ORDER-1-k) form biquads; the middle real pole is a
    // first-order section. Zeros sit at z = -1 (lowpass) or z = +1 (highpass).
    let zero = match kind {
        Response::Lowpass => -1.0f64,
        Response::Highpass => 1.0f64,
    };
    let mut sections = Vec::new();
    for k in 0..ORDER / 2 {
        let p = digital[k];
        let a = [1.0, -2.0 * p.re, p.norm_sqr()];
        let b = [1.0, -2.0 * zero, zero * zero];
        sections.push(normalize(Sos { b, a }, kind));
    }
    let p = digital[ORDER / 2];
    debug_assert!(p.im.abs() < 1e-9, "middle pole must be real");
    let a = [1.0, -p.re, 0.0];
    let b = [1.0, -zero, 0.0];
    sections.push(normalize(Sos { b, a }, kind));
    sections
}

/// Scale b so the section has unit gain at the passband reference
/// (DC for lowpass, Nyquist for highpass).
fn normalize(s: Sos, kind: Response) -> Sos {
    let at = match kind {
        Response::Lowpass => 1.0f64,
        Response::Highpass => -1.0f64,
    };
    let num = s.b[0] + s.b[1] * at + s.b[2] * at * at;
    let den = s.a[0] + s.a[1] * at + s.a[2] * at * at;
    let g = den / num;
    Sos { b: [s.b[0] * g, s.b[1] * g, s.b[2] * g], a: s.a }
}

/// Run the cascade over a signal, direct form II transposed, zero state.
pub fn sosfilt(sections: &[Sos], x: &[f32]) -> Vec<f32> {
    let mut y: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    for s in sections {
        let mut z1 = 0.0f64;
        let mut z2 = 0.0f64;
        for v in y.iter_mut() {
            let xin = *v;
            let out = s.b[0] * xin + z1;
            z1 = s.b[1] * xin - s.a[1] * out + z2;
            z2 = s.b[2] * xin - s.a[2] * out;
            *v = out;
        }
    }
    y.into_iter().map(|v| v as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gain_at(sections: &[Sos], freq_hz: f64, sr: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * freq_hz / sr;
        let z = Complex64::new(w.cos(), w.sin());
        let zi = 1.0 / z;
        sections
            .iter()
            .map(|s| {
                let num = s.b[0] + s.b[1] * zi + s.b[2] * zi * zi;
                let den = s.a[0] + s.a[1] * zi + s.a[2] * zi * zi;
                (num / den).norm()
            })
            .product()
    }

    #[test]
    fn lowpass_has_unit_dc_gain_and_half_power_cutoff() {
        let sos = design(Response::Lowpass, 500.0, 16_000.0);
        assert_eq!(sos.len(), 3);
        assert!((gain_at(&sos, 1e-6, 16_000.0) - 1.0).abs() < 1e-9);
        let gc = gain_at(&sos, 500.0, 16_000.0);
        assert!(
            (gc - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6,
            "cutoff gain {gc}"
        );
    }

    #[test]
    fn highpass_has_unit_nyquist_gain_and_half_power_cutoff() {
        let sos = design(Response::Highpass, 1_500.0, 16_000.0);
        assert!((gain_at(&sos, 7_999.9, 16_000.0) - 1.0).abs() < 1e-6);
        let gc = gain_at(&sos, 1_500.0, 16_000.0);
        assert!(
            (gc - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6,
            "cutoff gain {gc}"
        );
    }

    #[test]
    fn rolloff_matches_the_fifth_order_slope() {
        let sos = design(Response::Lowpass, 500.0, 16_000.0);
        // One decade above cutoff a 5th-order filter is ~100 dB down.
        let g = gain_at(&sos, 5_000.0, 16_000.0);
        let db = 20.0 * g.log10();
        assert!(db < -90.0, "gain {db} dB at 10x cutoff");
    }

    #[test]
    fn filtering_is_stable_on_long_noise() {
        let sos = design(Response::Highpass, 1_500.0, 16_000.0);
        let x: Vec<f32> = (0..48_000)
            .map(|i| ((i * 2_654_435_761u64 as usize) % 1000) as f32 / 500.0 - 1.0)
            .collect();
        let y = sosfilt(&sos, &x);
        assert!(y.iter().all(|v| v.is_finite()));
        let peak = y.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
        assert!(peak < 10.0, "unstable output peak {peak}");
    }
}
