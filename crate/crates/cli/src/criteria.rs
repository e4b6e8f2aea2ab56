use std::io::Write;

use ssvi::gaussian_stats::{CriterionKind, GaussParam};

use crate::error::CliError;

/// All six criteria on the grid `mu × sigma` as CSV.
pub fn criteria_table<W: Write>(
    mu: &[f64],
    sigma: &[f64],
    lambda: f64,
    out: W,
) -> Result<(), CliError> {
    if mu.is_empty() || sigma.is_empty() {
        return Err(CliError::Grid("mu and sigma grids must be nonempty".into()));
    }
    if let Some(m) = mu.iter().find(|m| !m.is_finite()) {
        return Err(CliError::Grid(format!("mu = {m} is not finite")));
    }
    if let Some(s) = sigma.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(CliError::Grid(format!(
            "sigma = {s} must be positive and finite"
        )));
    }
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(CliError::Grid(format!(
            "lambda = {lambda} must be positive and finite"
        )));
    }
    let kinds = CriterionKind::all(lambda);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["mu", "sigma"];
    header.extend(kinds.iter().map(|k| k.name()));
    w.write_record(&header)
        .map_err(|e| CliError::Io(e.to_string()))?;
    for &m in mu {
        for &s in sigma {
            let p = GaussParam::new(m, s);
            let mut row = vec![m.to_string(), s.to_string()];
            for k in &kinds {
                row.push(
                    k.score(p)
                        .map_err(|e| CliError::Grid(e.to_string()))?
                        .to_string(),
                );
            }
            w.write_record(&row)
                .map_err(|e| CliError::Io(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}
