//! Central finite differences against the tape's reverse pass.

use cmg::autograd::{Tape, Var};
use cmg::params::{ParamId, ParamStore};
use cmg::Mat;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Entries whose analytic and numeric values are both below this scale are
/// compared on an absolute basis: `|a - n| <= REL_TOL * SCALE_FLOOR`.
pub const SCALE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradReport {
    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err <= REL_TOL
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(SCALE_FLOOR)
}

fn evaluate<F: Fn(&mut Tape<'_>) -> (Var, u64)>(store: &ParamStore, f: &F) -> (f64, u64) {
    let mut t = Tape::with_params(store);
    let (l, extra) = f(&mut t);
    (t.scalar(l), t.branch_signature() ^ extra.rotate_left(17))
}

/// Checks `per_param` random entries of every parameter in `ids`. The loss
/// builder returns the scalar loss and a fingerprint of any discrete choice
/// made outside the tape (such as kNN edges).
pub fn check<R: Rng, F: Fn(&mut Tape<'_>) -> (Var, u64)>(
    store: &ParamStore,
    ids: &[ParamId],
    per_param: usize,
    f: F,
    rng: &mut R,
) -> GradReport {
    let analytic = {
        let mut t = Tape::with_params(store);
        let (l, _) = f(&mut t);
        t.backward(l).params()
    };
    let (_, base_sig) = evaluate(store, &f);
    let mut report = GradReport::default();
    let mut probe = store.clone();
    for &id in ids {
        let len = store.get(id).len();
        for _ in 0..per_param.min(len) {
            let k = rng.random_range(0..len);
            let orig = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + FD_STEP;
            let (up, sig_up) = evaluate(&probe, &f);
            probe.get_mut(id).data_mut()[k] = orig - FD_STEP;
            let (down, sig_down) = evaluate(&probe, &f);
            probe.get_mut(id).data_mut()[k] = orig;
            if sig_up != base_sig || sig_down != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[id.0].data()[k];
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = format!("{}[{k}]: analytic {a:e}, numeric {numeric:e}", store.name(id));
            }
        }
    }
    report
}

/// `sum(y * r)` for a fixed random `r`, turning any output into a scalar
/// with a generic gradient.
pub fn project(t: &mut Tape, y: Var, r: &Mat) -> Var {
    let c = t.constant(r.clone());
    let p = t.mul(y, c);
    t.sum(p)
}
