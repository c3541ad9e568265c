//! Diagnostics over decode traces: lexical metrics, prior drift, PCA
//! trajectories, attention by distance and class, frequency bands.

pub mod attention;
pub mod bands;
pub mod drift;
pub mod metrics;
pub mod pca;

pub use attention::{
    attention_by_distance, attention_mass_per_step, attention_records, relative_attention_change, AttentionRecord,
    DistanceBins, TokenClass,
};
pub use bands::{band_table, frequency_decomposition, frequency_decomposition_with, BandQuantity};
pub use drift::{drift_trace, random_token_baseline, DriftRecord};
pub use metrics::{distinct_n, lexical, repetition_ratio, Lexical};
pub use pca::{pca_trajectory, Trajectory};

/// One-sided sign test: probability of at least `wins` successes out of
/// `wins + losses` fair coin flips. Ties are dropped by the caller.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    // Σ_{i=wins}^{n} C(n, i) / 2^n, in log space.
    let ln_half_n = -(n as f64) * std::f64::consts::LN_2;
    let mut ln_c = 0.0f64; // ln C(n, 0)
    let mut total = 0.0;
    for i in 0..=n {
        if i > 0 {
            ln_c += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        if i >= wins {
            total += (ln_c + ln_half_n).exp();
        }
    }
    total.min(1.0)
}

/// Wins/losses of paired differences `a − b` (ties excluded) and the
/// one-sided p-value for `a > b`.
pub fn paired_sign_test(a: &[f64], b: &[f64]) -> (usize, usize, f64) {
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x < y).count();
    (wins, losses, sign_test_p(wins, losses))
}
