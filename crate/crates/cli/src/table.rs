//! Plain-text summaries printed after each command.

use std::fmt::Write;

use bcert_core::bound::SafetyBound;
use bcert_core::certify::{CheckReport, CheckStatus};
use bcert_core::project::{CheckOutcome, ComposeOutcome, DemoReport, LiftOutcome};
use bcert_core::sim::SimReport;

fn status_word(s: CheckStatus) -> &'static str {
    match s {
        CheckStatus::Verified => "ok",
        CheckStatus::Refuted => "REFUTED",
        CheckStatus::Vacuous => "vacuous",
    }
}

fn report_cells(reports: &[CheckReport]) -> String {
    reports
        .iter()
        .map(|r| {
            let m = r.worst_margin.map(|m| format!("{m:+.3e}")).unwrap_or_else(|| "-".into());
            format!("{:?} {:<7} {:>11}", r.condition, status_word(r.status), m)
        })
        .collect::<Vec<_>>()
        .join("  ")
}

pub fn checks(out: &CheckOutcome) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{} subsystem(s), {} distinct, worst margins (lhs - rhs):", out.subsystems.len(), out.classes);
    for sub in out.subsystems.iter().filter(|s| s.id == s.representative) {
        for m in &sub.modes {
            let _ = writeln!(s, "  {:<10} mode {:<2} {}", sub.id, m.mode, report_cells(&m.reports));
        }
    }
    let _ = writeln!(s, "verified: {}", out.verified);
    s
}

pub fn lift(out: &LiftOutcome) -> String {
    let mut s = String::new();
    for sub in out.subsystems.iter().filter(|s| s.id == s.representative) {
        let c = &sub.certificate;
        let _ = writeln!(s, "{}: k_d = {} (required {}), epsilon = {:?}", sub.id, c.k_d, sub.required_dwell, c.epsilon);
        for d in &sub.derivation {
            let _ = writeln!(s, "  {:<16} {:>13.6e}   {}", d.constant, d.value, d.formula);
        }
        if let Some(mu) = &sub.mu {
            let _ = writeln!(s, "  mu estimate {:.4} over {} points", mu.raw, mu.points);
        }
        if !sub.reports.is_empty() {
            let _ = writeln!(s, "  check: {}", report_cells(&sub.reports));
        }
    }
    for w in &out.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

pub fn compose(out: &ComposeOutcome) -> String {
    let mut s = String::new();
    let sg = &out.small_gain;
    let _ = writeln!(
        s,
        "small-gain: {} (max cycle mean of log gains {:?}, cycle gain {:?})",
        sg.satisfied, sg.max_cycle_mean, sg.cycle_gain
    );
    let identity = out.scalings.iter().all(|v| *v == 1.0);
    let _ = writeln!(s, "scalings: {}", if identity { "identity".to_string() } else { format!("{:?}", out.scalings) });
    let k = &out.constants;
    let _ = writeln!(
        s,
        "network certificate: gamma {:.6}  lambda {:.6}  kappa {:.6}  psi {:.6e}  ({:?} semantics)",
        k.gamma, k.lambda, k.kappa, k.psi, out.semantics
    );
    let _ = writeln!(s, "verified: {}", out.status.is_verified());
    s
}

pub fn bound(b: &SafetyBound) -> String {
    format!(
        "delta = {:.6}  (safe with probability >= {:.6} over {} steps, {:?})\n",
        b.delta,
        b.safe_probability(),
        b.horizon,
        b.branch
    )
}

pub fn simulation(r: &SimReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{} trajectories, horizon {}, seed {}", r.trajectories, r.horizon, r.seed);
    if let Some(f) = &r.exceedance_frequency {
        let _ = writeln!(
            s,
            "  sup B >= lambda: {} ({:.5}, 95% CI [{:.5}, {:.5}])",
            f.count, f.value, f.lower95, f.upper95
        );
    }
    if let Some(f) = &r.unsafe_frequency {
        let _ = writeln!(s, "  entered unsafe set: {} ({:.5})", f.count, f.value);
    }
    if let (Some(b), Some(ok)) = (&r.bound, r.bound_respected) {
        let _ = writeln!(s, "  delta {:.5}; upper confidence limit within delta: {ok}", b.delta);
    }
    let _ = writeln!(s, "  controller warnings {}, dwell violations {}", r.controller_warnings, r.dwell_violations);
    for w in &r.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

pub fn demo(r: &DemoReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{} with {} subsystems ({} distinct)", r.fixture, r.size, r.symmetry_classes);
    for c in &r.checks {
        let _ = writeln!(
            s,
            "  mode {:<2} {}",
            c.mode,
            if c.verified { "verified".to_string() } else { format!("refuted: {}", c.failure.clone().unwrap_or_default()) }
        );
    }
    let k = &r.composition.constants;
    let _ = writeln!(
        s,
        "  k_d {}  gamma {:.4}  lambda {:.4}  kappa {:.4}  psi {:.4e}",
        r.lift.certificate.k_d, k.gamma, k.lambda, k.kappa, k.psi
    );
    let _ = writeln!(
        s,
        "  1 - delta = {:.4} over {} steps (published: {:.2})",
        r.formula_safe_probability, r.bound.horizon, r.claimed_safe_probability
    );
    if let Some(f) = &r.simulation.exceedance_frequency {
        let _ = writeln!(
            s,
            "  Monte Carlo: exceedance {:.5} (upper 95% {:.5}) vs delta {:.5}",
            f.value, f.upper95, r.bound.delta
        );
    }
    for n in &r.notes {
        let _ = writeln!(s, "note: {n}");
    }
    s
}
