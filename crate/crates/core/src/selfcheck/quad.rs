//! Quadrature used as an independent numerical oracle.
//!
//! The underlying double-exponential rule works to an absolute target, so
//! the interval is split into panels and integrated twice: once coarsely to
//! learn the magnitude, then again with the absolute target set from the
//! requested relative tolerance.

/// Integrand magnitude below which the half-line integrals are truncated.
pub const TRUNCATION_LEVEL: f64 = 1e-300;

const PANELS: usize = 64;
const SCAN_STEP: f64 = 0.25;
/// Keeps `exp(u)` finite while walking outward in log coordinates.
const LOG_LIMIT: f64 = 700.0;

fn panelled<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, abs_tol: f64) -> f64 {
    let width = (b - a) / PANELS as f64;
    let per_panel = abs_tol / PANELS as f64;
    (0..PANELS)
        .map(|i| {
            let lo = a + width * i as f64;
            let hi = if i + 1 == PANELS { b } else { lo + width };
            quadrature::integrate(f, lo, hi, per_panel).integral
        })
        .sum()
}

/// `∫_a^b f` to relative tolerance `rel_tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> f64 {
    let coarse = panelled(&f, a, b, 1e-6 * (b - a).abs().max(1.0));
    let scale = coarse.abs().max(f64::MIN_POSITIVE);
    panelled(&f, a, b, rel_tol * scale)
}

/// Support of `exp(log_g)` in log coordinates, cut where the integrand drops
/// below [`TRUNCATION_LEVEL`].
fn log_support<F: Fn(f64) -> f64>(log_g: &F) -> (f64, f64) {
    let cut = TRUNCATION_LEVEL.ln();
    let mut peak = 0.0;
    let mut best = f64::NEG_INFINITY;
    let mut u = -LOG_LIMIT;
    while u <= LOG_LIMIT {
        let v = log_g(u);
        if v > best {
            best = v;
            peak = u;
        }
        u += SCAN_STEP;
    }
    let mut lo = peak;
    while lo > -LOG_LIMIT && log_g(lo) > cut {
        lo -= SCAN_STEP;
    }
    let mut hi = peak;
    while hi < LOG_LIMIT && log_g(hi) > cut {
        hi += SCAN_STEP;
    }
    (lo, hi)
}

/// `∫_0^∞ exp(log_w(x)) · g(x) dx` for a positive weight given by its log.
///
/// Integration runs over `u = ln x`, and the range is chosen from the weight
/// itself so heavy tails are followed as far as they matter.
pub fn integrate_half_line<W, G>(log_w: W, g: G, rel_tol: f64) -> f64
where
    W: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    let log_integrand = |u: f64| log_w(u.exp()) + u;
    let (lo, hi) = log_support(&log_integrand);
    integrate(
        |u: f64| {
            let x = u.exp();
            (log_w(x) + u).exp() * g(x)
        },
        lo,
        hi,
        rel_tol,
    )
}
