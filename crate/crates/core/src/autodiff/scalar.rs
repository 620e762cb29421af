//! Numerically stable scalar kernels shared by the tape and by value-only
//! code paths (evaluation, enumeration).

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x) = -softplus(-x)`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// `ln(1 - e^x)` for `x < 0`.
#[inline]
pub fn log1m_exp(x: f64) -> f64 {
    // Switch at -ln 2 (Mächler's note on log1mexp).
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sigmoid_reference_values() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        // -ln(1 + e) from a 30-digit evaluation.
        assert!((log_sigmoid(-1.0) - (-1.313_261_687_518_222_8)).abs() < 1e-15);
        let y = log_sigmoid(100.0);
        assert!(y < 0.0 && y > -1e-40);
        for x in [-30.0, -45.5, -300.0, -1e6] {
            assert!((log_sigmoid(x) - x).abs() < 1e-12, "x = {x}");
        }
    }

    #[test]
    fn sigmoid_is_symmetric() {
        for x in [-50.0, -3.0, -0.1, 0.0, 0.7, 12.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn log1m_exp_matches_naive_away_from_zero() {
        for x in [-1e-3, -0.3, -0.7, -2.0, -20.0] {
            let naive = (1.0 - f64::exp(x)).ln();
            assert!((log1m_exp(x) - naive).abs() < 1e-12 * naive.abs().max(1.0));
        }
        // Near zero the naive form loses every digit.
        assert!((log1m_exp(-1e-12) - (1e-12f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn log_softmax_normalizes() {
        let l = log_softmax(&[1.0, 0.0]);
        assert!((l[0] - log_sigmoid(1.0)).abs() < 1e-15);
        assert!((l[1] - log_sigmoid(-1.0)).abs() < 1e-15);
        let l = log_softmax(&[700.0, -700.0, 3.0]);
        let s: f64 = l.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
