//! Runs the oracle suites end to end.

use iada::oracle::{
    convergence_suite, gradient_suite, hypergradient_suite, jensen_suite, mgf_suite, pooling_suite, JensenConfig, SuiteReport,
};

use crate::CliError;

const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Smaller instance and draw counts; seconds instead of about a minute.
    pub quick: bool,
    /// Fault injection: negate ρ in the closed form the Jensen suite checks.
    pub flip_rho_sign: bool,
}

struct Sizes {
    jensen: (usize, usize),
    mgf: (usize, usize),
    convergence: usize,
    gradient: usize,
    hypergradient: usize,
    pooling: usize,
}

const FULL: Sizes = Sizes {
    jensen: (1000, 100_000),
    mgf: (5, 1_000_000),
    convergence: 50,
    gradient: 50,
    hypergradient: 20,
    pooling: 20,
};

const QUICK: Sizes = Sizes {
    jensen: (100, 20_000),
    mgf: (3, 200_000),
    convergence: 20,
    gradient: 10,
    hypergradient: 4,
    pooling: 5,
};

pub fn run_suites(opts: &VerifyOptions) -> Result<Vec<SuiteReport>, CliError> {
    let n = if opts.quick { QUICK } else { FULL };
    let s = opts.seed;
    let jensen = JensenConfig { instances: n.jensen.0, mc_samples: n.jensen.1, seed: s, flip_rho_sign: opts.flip_rho_sign };
    Ok(vec![
        jensen_suite(&jensen)?,
        mgf_suite(n.mgf.0, n.mgf.1, s)?,
        convergence_suite(n.convergence, s)?.0,
        gradient_suite(n.gradient, s, FD_STEP)?,
        hypergradient_suite(n.hypergradient, s, FD_STEP)?,
        pooling_suite(n.pooling, s)?,
    ])
}

pub fn report_line(r: &SuiteReport) -> String {
    let verdict = if r.passed() { "PASS" } else { "FAIL" };
    format!("{verdict} {:<14} {}/{} failed, worst {:.3e}; {}", r.name, r.failures, r.cases, r.worst, r.detail)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suites_pass_and_the_fault_is_caught() {
        let reports = run_suites(&VerifyOptions { seed: 2, quick: true, flip_rho_sign: false }).unwrap();
        assert_eq!(reports.len(), 6);
        for r in &reports {
            assert!(r.passed(), "{}", report_line(r));
        }
        let faulty = run_suites(&VerifyOptions { seed: 2, quick: true, flip_rho_sign: true }).unwrap();
        let failed: Vec<&str> = faulty.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
        assert_eq!(failed, vec![reports[0].name.as_str()]);
    }
}
