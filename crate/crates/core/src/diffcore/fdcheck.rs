//! Central finite-difference verification of analytic gradients.

/// One evaluation of the function under test.
///
/// `signature` identifies the smooth piece the point lies on (for tape-based
/// functions, [`Tape::kink_signature`](super::Tape::kink_signature)). Points on
/// different pieces are never differenced against each other.
#[derive(Clone, Copy, Debug)]
pub struct Probe {
    pub value: f64,
    pub signature: u64,
}

impl Probe {
    pub fn smooth(value: f64) -> Self {
        Probe {
            value,
            signature: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub h: f64,
    pub tolerance: f64,
    /// Coordinates whose signature changes anywhere within `±kink_radius·h`
    /// are excluded.
    pub kink_radius: f64,
    /// Lower bound on the relative-error denominator. Derivatives smaller
    /// than this are swamped by round-off in the difference quotient.
    pub floor: f64,
}

impl FdOptions {
    pub fn new(h: f64, tolerance: f64) -> Self {
        FdOptions {
            h,
            tolerance,
            kink_radius: 10.0,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FdReport {
    /// Relative error per coordinate; `None` for excluded kink coordinates.
    pub errors: Vec<Option<f64>>,
    pub max_rel_error: f64,
    pub worst: Option<usize>,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
}

/// Compares `analytic[i]` with `(f(x + h e_i) - f(x - h e_i)) / 2h` for each
/// coordinate in `coords` (all coordinates when `None`).
pub fn finite_difference_check<F>(
    mut f: F,
    point: &[f64],
    analytic: &[f64],
    coords: Option<&[usize]>,
    opts: &FdOptions,
) -> FdReport
where
    F: FnMut(&[f64]) -> Probe,
{
    assert_eq!(point.len(), analytic.len(), "gradient length must match point");
    let base = f(point);
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };

    let mut x = point.to_vec();
    let mut errors = vec![None; point.len()];
    let (mut checked, mut skipped) = (0, 0);
    let mut worst = None;
    let mut max_rel = 0.0f64;
    let mut eval_at = |x: &mut Vec<f64>, i: usize, delta: f64| {
        x[i] = point[i] + delta;
        let p = f(x);
        x[i] = point[i];
        p
    };

    for &i in coords {
        let plus = eval_at(&mut x, i, opts.h);
        let minus = eval_at(&mut x, i, -opts.h);
        let mut kink = plus.signature != base.signature || minus.signature != base.signature;
        if !kink && opts.kink_radius > 1.0 {
            let far = opts.kink_radius * opts.h;
            kink = eval_at(&mut x, i, far).signature != base.signature
                || eval_at(&mut x, i, -far).signature != base.signature;
        }
        if kink {
            skipped += 1;
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * opts.h);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(opts.floor);
        let rel = (a - numeric).abs() / denom;
        errors[i] = Some(rel);
        checked += 1;
        if rel > max_rel || worst.is_none() {
            max_rel = max_rel.max(rel);
            worst = Some(i);
        }
    }

    FdReport {
        errors,
        max_rel_error: max_rel,
        worst,
        checked,
        skipped,
        passed: max_rel < opts.tolerance,
    }
}
