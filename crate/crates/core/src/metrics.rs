//! Comparison metrics between gradient vectors.

/// Floor fraction for comparing two exact strategies.
pub const EXACT_FLOOR: f64 = 1e-6;
/// Floor fraction against central differences, whose absolute rounding error is roughly
/// `1e-16 * J / eps`.
pub const FD_FLOOR: f64 = 1e-4;

/// Componentwise relative error, `max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)`, where
/// `floor = floor_frac * max_i |b_i|` keeps components that are zero up to rounding
/// from dominating. `b` is the reference.
pub fn max_rel_err(a: &[f64], b: &[f64], floor_frac: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "compared vectors differ in length");
    let floor = floor_frac * max_abs(b);
    let mut worst: f64 = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let diff = (x - y).abs();
        if diff == 0.0 {
            continue;
        }
        let scale = x.abs().max(y.abs()).max(floor);
        worst = worst.max(if scale > 0.0 { diff / scale } else { f64::INFINITY });
        if diff.is_nan() {
            return f64::NAN;
        }
    }
    worst
}

/// Index and value of the worst component of [`max_rel_err`].
pub fn worst_component(a: &[f64], b: &[f64], floor_frac: f64) -> Option<(usize, f64)> {
    let floor = floor_frac * max_abs(b);
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let diff = (x - y).abs();
            if diff == 0.0 {
                0.0
            } else {
                diff / x.abs().max(y.abs()).max(floor)
            }
        })
        .enumerate()
        .max_by(|p, q| p.1.total_cmp(&q.1))
}

/// Copies of `a` and `b` without the components listed in `skip` (sorted).
pub fn without(a: &[f64], b: &[f64], skip: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let mut skip = skip.iter().peekable();
    let mut out = (Vec::with_capacity(a.len()), Vec::with_capacity(b.len()));
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        if skip.peek() == Some(&&i) {
            skip.next();
            continue;
        }
        out.0.push(x);
        out.1.push(y);
    }
    out
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `|a - b| / |b|`, infinite when `b` is zero and `a` is not.
pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "compared vectors differ in length");
    let num = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den = l2(b);
    if num == 0.0 {
        0.0
    } else if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "compared vectors differ in length");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let den = l2(a) * l2(b);
    if den == 0.0 {
        0.0
    } else {
        dot / den
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_vectors_have_zero_error() {
        let a = [1.0, -2.0, 0.0];
        assert_eq!(max_rel_err(&a, &a, 1e-6), 0.0);
        assert_eq!(rel_l2(&a, &a), 0.0);
    }

    #[test]
    fn without_drops_listed_components() {
        let (a, b) = without(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], &[0, 2]);
        assert_eq!((a, b), (vec![2.0, 4.0], vec![6.0, 8.0]));
    }

    #[test]
    fn floor_limits_tiny_components() {
        let a = [1.0, 1e-12];
        let b = [1.0, 0.0];
        assert!(max_rel_err(&a, &b, 0.0) == 1.0);
        assert!(max_rel_err(&a, &b, 1e-6) < 1e-5);
    }

    #[test]
    fn cosine_of_parallel_vectors_is_one() {
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-15);
        assert!(cosine(&[1.0, 0.0], &[0.0, 1.0]).abs() < 1e-15);
    }
}
