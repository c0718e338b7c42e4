//! Reference losses over probabilities. The trainer computes the same
//! quantities on the graph; these are the plain-number versions.

use super::TrainError;

const LOG_FLOOR: f64 = 1e-12;

fn nll(p: f64) -> f64 {
    -p.max(LOG_FLOOR).ln()
}

/// `−log P_M(true pattern)`.
pub fn loss_rmd(p_m: &[f64], true_pattern: usize) -> f64 {
    nll(p_m[true_pattern])
}

/// Mean of [`loss_rmd`] over a batch.
pub fn loss_rmd_batch(p_m: &[Vec<f64>], targets: &[usize]) -> f64 {
    assert_eq!(p_m.len(), targets.len());
    p_m.iter().zip(targets).map(|(p, &k)| loss_rmd(p, k)).sum::<f64>() / p_m.len().max(1) as f64
}

/// Mean over content positions `1..attention_len` of `−log P_D(target)`,
/// where `p_d[i] = [P(original), P(replaced)]` and `targets[i]` is 1 for
/// replaced.
pub fn loss_rtd(p_d: &[[f64; 2]], targets: &[u8], attention_len: usize) -> Result<f64, TrainError> {
    if attention_len < 2 {
        return Err(TrainError::NoContent);
    }
    let total: f64 = (1..attention_len).map(|i| nll(p_d[i][targets[i] as usize])).sum();
    Ok(total / (attention_len - 1) as f64)
}

/// Mean over masked positions of `−log P_G(original token)`; `p_g` is
/// row-major `positions × vocab`.
pub fn loss_mlm(p_g: &[f64], vocab: usize, original: &[usize], masked: &[usize]) -> Result<f64, TrainError> {
    if masked.is_empty() {
        return Err(TrainError::EmptyMask);
    }
    let total: f64 = masked.iter().map(|&i| nll(p_g[i * vocab + original[i]])).sum();
    Ok(total / masked.len() as f64)
}
