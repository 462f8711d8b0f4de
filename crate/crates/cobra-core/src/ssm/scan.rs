//! Parallel inclusive scan for the first-order linear recurrence
//! `h_t = a_t h_{t-1} + b_t`.
//!
//! The combine `(a1, b1) . (a2, b2) = (a2 a1, a2 b1 + b2)` is associative, so
//! the prefix can be evaluated over a balanced tree. The split point is always
//! `len / 2`, which fixes the reduction order and makes results deterministic
//! for a given length.

/// One step of the recurrence as an affine map `h -> a h + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinStep {
    pub a: f64,
    pub b: f64,
}

impl LinStep {
    pub const IDENTITY: LinStep = LinStep { a: 1.0, b: 0.0 };

    /// Apply to a state value.
    #[inline]
    pub fn apply(&self, h: f64) -> f64 {
        self.a * h + self.b
    }
}

/// `first` then `second`, composed into one affine map.
#[inline]
pub fn combine(first: LinStep, second: LinStep) -> LinStep {
    LinStep {
        a: second.a * first.a,
        b: second.a * first.b + second.b,
    }
}

/// In-place inclusive prefix scan: afterwards `steps[t]` maps the initial
/// state directly to `h_t`.
pub fn inclusive_scan(steps: &mut [LinStep]) {
    if steps.len() <= 1 {
        return;
    }
    let mid = steps.len() / 2;
    let (left, right) = steps.split_at_mut(mid);
    inclusive_scan(left);
    inclusive_scan(right);
    let carry = left[left.len() - 1];
    for s in right.iter_mut() {
        *s = combine(carry, *s);
    }
}
