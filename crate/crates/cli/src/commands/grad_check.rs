use pointformer::gradcheck::GradReport;
use pointformer::gradsuite::{self, Scope};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone)]
pub struct GradCheckArgs {
    pub eps: f64,
    pub tolerance: f64,
    pub scopes: Vec<Scope>,
}

pub fn run(args: &GradCheckArgs) -> CliResult<Vec<GradReport>> {
    if !(args.eps > 0.0) || !(args.tolerance > 0.0) {
        return Err(CliError::Usage("eps and tolerance must be positive".into()));
    }
    let mut reports = Vec::new();
    for &scope in &args.scopes {
        reports.extend(gradsuite::run(scope, args.eps, args.tolerance)?);
    }
    Ok(reports)
}

pub fn render(reports: &[GradReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&format!(
            "{:<30} {:>7} checked  max_rel_err {:.3e}  {}\n",
            r.component,
            r.checked,
            r.max_rel_err,
            if r.passed { "ok" } else { "FAIL" }
        ));
    }
    out
}

/// Error naming every component over tolerance, if any.
pub fn verdict(reports: &[GradReport], tolerance: f64) -> CliResult<()> {
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} ({:.3e} at {})", r.component, r.max_rel_err, r.worst))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "gradient check exceeded tolerance {tolerance:e}: {}",
            failed.join(", ")
        )))
    }
}
