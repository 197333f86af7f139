//! Small 2-D vector helpers. Positions and displacements are `[f64; 2]`.

pub type Vec2 = [f64; 2];

#[inline]
pub fn add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}

#[inline]
pub fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn scale(a: Vec2, s: f64) -> Vec2 {
    [a[0] * s, a[1] * s]
}

#[inline]
pub fn norm(a: Vec2) -> f64 {
    a[0].hypot(a[1])
}

#[inline]
pub fn dist(a: Vec2, b: Vec2) -> f64 {
    norm(sub(a, b))
}

#[inline]
pub fn dist2(a: Vec2, b: Vec2) -> f64 {
    let d = sub(a, b);
    d[0] * d[0] + d[1] * d[1]
}

/// Shrink `a` onto the disc of radius `max` if it lies outside it.
pub fn clamp_norm(a: Vec2, max: f64) -> Vec2 {
    let n = norm(a);
    if n > max && n > 0.0 {
        scale(a, max / n)
    } else {
        a
    }
}

/// Angle between two non-zero vectors, in degrees.
pub fn angle_deg(a: Vec2, b: Vec2) -> f64 {
    let c = (a[0] * b[0] + a[1] * b[1]) / (norm(a) * norm(b));
    c.clamp(-1.0, 1.0).acos().to_degrees()
}
