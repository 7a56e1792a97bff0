use crate::error::{Error, Result};

/// Smallest probability fed to the logarithm.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

/// Mean of `-ln p[target]` over a batch of posterior rows.
pub fn cross_entropy(posteriors: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    if posteriors.len() != targets.len() || posteriors.is_empty() {
        return Err(Error::invalid(format!(
            "{} posterior rows for {} targets",
            posteriors.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (row, &t) in posteriors.iter().zip(targets) {
        let p = *row
            .get(t)
            .ok_or_else(|| Error::invalid(format!("target {t} out of range for {} classes", row.len())))?;
        total -= p.max(PROBABILITY_FLOOR).ln();
    }
    Ok(total / targets.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let one_hot = vec![vec![0.0, 1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0, 0.0]];
        assert!(cross_entropy(&one_hot, &[1, 0]).unwrap() <= 1e-6);
        let uniform = vec![vec![0.25; 4]; 3];
        assert!((cross_entropy(&uniform, &[0, 1, 3]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&uniform, &[0, 1, 4]).is_err());
        assert!(cross_entropy(&one_hot, &[0]).is_err());
    }
}
