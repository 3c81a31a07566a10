//! Procedural cartoon faces with analytic 68-point landmarks.
//!
//! A face is a small parameter vector (head ellipse, eye openness, brow
//! height and slant, mouth curvature, aperture and asymmetry). Each
//! expression owns a parameter regime; samples add Gaussian jitter. The
//! landmarks follow the standard 68-point ordering (jaw 0–16, brows
//! 17–26, nose 27–35, eyes 36–47, mouth 48–67) and the image is drawn by
//! stroking the landmark contours with anti-aliasing.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::autograd::Tensor;
use crate::expression::{Expression, NUM_LANDMARKS};
use crate::rng::Rng;

pub const IMAGE_SIZE: usize = 64;

/// Landmark bounds guaranteed by the parameter ranges.
pub const LANDMARK_MIN: f64 = 0.05;
pub const LANDMARK_MAX: f64 = 0.95;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFaceParams {
    pub center: [f64; 2],
    pub radii: [f64; 2],
    /// In-plane head rotation, radians.
    pub roll: f64,
    /// Eye height relative to a neutral eye, 0 (shut) to ~1.2 (wide).
    pub eye_open: f64,
    /// Upward brow offset in face units.
    pub brow_raise: f64,
    /// Positive pulls the inner brow ends down (frown), negative lifts them.
    pub brow_slant: f64,
    /// Positive lifts the mouth corners (smile).
    pub mouth_curve: f64,
    /// Vertical gap between the lips in face units.
    pub mouth_open: f64,
    /// Lifts one mouth corner and lowers the other.
    pub mouth_skew: f64,
    /// Standard deviation of per-landmark Gaussian noise, in image units.
    pub noise: f64,
}

struct Regime {
    eye_open: f64,
    brow_raise: f64,
    brow_slant: f64,
    mouth_curve: f64,
    mouth_open: f64,
    mouth_skew: f64,
}

fn regime(e: Expression) -> Regime {
    let r = |eye_open, brow_raise, brow_slant, mouth_curve, mouth_open, mouth_skew| Regime {
        eye_open,
        brow_raise,
        brow_slant,
        mouth_curve,
        mouth_open,
        mouth_skew,
    };
    match e {
        Expression::Anger => r(0.55, -0.04, 1.0, -0.02, 0.0, 0.0),
        Expression::Disgust => r(0.4, -0.02, 0.35, -0.04, 0.03, 0.1),
        Expression::Fear => r(1.1, 0.07, -0.7, -0.04, 0.07, 0.0),
        Expression::Happiness => r(0.55, 0.0, 0.0, 0.16, 0.05, 0.0),
        Expression::Sadness => r(0.45, 0.0, -0.9, -0.13, 0.0, 0.0),
        Expression::Surprise => r(1.1, 0.1, 0.0, 0.0, 0.24, 0.0),
    }
}

fn jittered(rng: &mut Rng, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    let n = Normal::new(mean, sd).expect("finite normal parameters");
    n.sample(rng).clamp(lo, hi)
}

impl SyntheticFaceParams {
    /// Draws one face of class `e`.
    pub fn sample(e: Expression, rng: &mut Rng) -> Self {
        let m = regime(e);
        SyntheticFaceParams {
            center: [
                jittered(rng, 0.5, 0.015, 0.47, 0.53),
                jittered(rng, 0.5, 0.015, 0.47, 0.53),
            ],
            radii: [
                jittered(rng, 0.3, 0.015, 0.26, 0.33),
                jittered(rng, 0.36, 0.015, 0.32, 0.4),
            ],
            roll: jittered(rng, 0.0, 0.04, -0.1, 0.1),
            eye_open: jittered(rng, m.eye_open, 0.1, 0.1, 1.4),
            brow_raise: jittered(rng, m.brow_raise, 0.015, -0.08, 0.14),
            brow_slant: jittered(rng, m.brow_slant, 0.15, -1.3, 1.3),
            mouth_curve: jittered(rng, m.mouth_curve, 0.025, -0.2, 0.22),
            mouth_open: jittered(rng, m.mouth_open, 0.02, 0.0, 0.3),
            mouth_skew: jittered(rng, m.mouth_skew, 0.02, -0.16, 0.16),
            noise: 0.002,
        }
    }

    /// Noise-free landmarks in face units `(u, v)`, u rightwards and v
    /// downwards, both roughly in [-1, 1].
    fn face_points(&self) -> Vec<[f64; 2]> {
        let mut pts = Vec::with_capacity(NUM_LANDMARKS);
        // jaw: ear to ear under the chin
        for i in 0..17 {
            let t = std::f64::consts::PI * i as f64 / 16.0;
            pts.push([-t.cos(), -0.15 + 1.15 * t.sin()]);
        }
        // brows, each listed left to right in the image
        let brow = |s: f64, inner: f64, pts: &mut Vec<[f64; 2]>| {
            let arch = 0.07 * (1.0 - (2.0 * s - 1.0).powi(2));
            let v = -0.48 - self.brow_raise - arch + 0.12 * self.brow_slant * inner;
            pts.push([0.0, v]);
        };
        for i in 0..5 {
            let s = i as f64 / 4.0;
            brow(s, s, &mut pts);
            let last = pts.len() - 1;
            pts[last][0] = -0.75 + 0.55 * s;
        }
        for i in 0..5 {
            let s = i as f64 / 4.0;
            brow(s, 1.0 - s, &mut pts);
            let last = pts.len() - 1;
            pts[last][0] = 0.2 + 0.55 * s;
        }
        // nose bridge and base
        for i in 0..4 {
            pts.push([0.0, -0.3 + 0.14 * i as f64]);
        }
        for i in 0..5 {
            let u = -0.16 + 0.08 * i as f64;
            pts.push([u, 0.2 - 0.03 * (1.0 - (u / 0.16).powi(2))]);
        }
        // eyes: outer/inner corner, two upper lid points, two lower
        let eye_h = 0.08 * self.eye_open;
        for (cx, outer_left) in [(-0.42, true), (0.42, false)] {
            let w = 0.16;
            let (c0, c3) = if outer_left { (cx - w, cx + w) } else { (cx - w, cx + w) };
            pts.push([c0, -0.25]);
            pts.push([cx - w / 3.0, -0.25 - eye_h]);
            pts.push([cx + w / 3.0, -0.25 - eye_h]);
            pts.push([c3, -0.25]);
            pts.push([cx + w / 3.0, -0.25 + eye_h]);
            pts.push([cx - w / 3.0, -0.25 + eye_h]);
        }
        // mouth: centre line bent by curvature and skew
        let half_w = 0.34;
        let line = |s: f64| 0.52 - self.mouth_curve * s * s + self.mouth_skew * s;
        let lip = |s: f64| (1.0 - s * s).max(0.0).sqrt();
        let gap = self.mouth_open / 2.0;
        let outer_upper = [-2.0 / 3.0, -1.0 / 3.0, 0.0, 1.0 / 3.0, 2.0 / 3.0];
        pts.push([-half_w, line(-1.0)]);
        for s in outer_upper {
            pts.push([s * half_w, line(s) - (0.05 + gap) * lip(s)]);
        }
        pts.push([half_w, line(1.0)]);
        for s in outer_upper.iter().rev() {
            pts.push([s * half_w, line(*s) + (0.06 + gap) * lip(*s)]);
        }
        let inner = [-0.4, 0.0, 0.4];
        pts.push([-0.85 * half_w, line(-0.85)]);
        for s in inner {
            pts.push([s * half_w, line(s) - gap * lip(s)]);
        }
        pts.push([0.85 * half_w, line(0.85)]);
        for s in inner.iter().rev() {
            pts.push([s * half_w, line(*s) + gap * lip(*s)]);
        }
        debug_assert_eq!(pts.len(), NUM_LANDMARKS);
        pts
    }

    /// Landmarks in normalized image coordinates with per-point noise.
    pub fn landmarks(&self, rng: &mut Rng) -> Vec<[f64; 2]> {
        let (sin, cos) = self.roll.sin_cos();
        let noise = Normal::new(0.0, self.noise.max(1e-12)).expect("finite noise");
        self.face_points()
            .into_iter()
            .map(|[u, v]| {
                let (x, y) = (u * self.radii[0], v * self.radii[1]);
                let xr = cos * x - sin * y + self.center[0] + noise.sample(rng);
                let yr = sin * x + cos * y + self.center[1] + noise.sample(rng);
                [
                    xr.clamp(LANDMARK_MIN, LANDMARK_MAX),
                    yr.clamp(LANDMARK_MIN, LANDMARK_MAX),
                ]
            })
            .collect()
    }
}

/// Landmark index chains that are stroked when rendering, with a flag for
/// closed contours.
const CONTOURS: [(std::ops::Range<usize>, bool); 9] = [
    (0..17, false),
    (17..22, false),
    (22..27, false),
    (27..31, false),
    (31..36, false),
    (36..42, true),
    (42..48, true),
    (48..60, true),
    (60..68, true),
];

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (ex, ey) = (p[0] - a[0] - t * dx, p[1] - a[1] - t * dy);
    (ex * ex + ey * ey).sqrt()
}

fn stroke(coverage: &mut [f64], size: usize, a: [f64; 2], b: [f64; 2], half_width: f64) {
    let s = size as f64;
    let (a, b) = ([a[0] * s, a[1] * s], [b[0] * s, b[1] * s]);
    let reach = half_width + 1.0;
    let x0 = (a[0].min(b[0]) - reach).floor().max(0.0) as usize;
    let x1 = ((a[0].max(b[0]) + reach).ceil() as usize).min(size);
    let y0 = (a[1].min(b[1]) - reach).floor().max(0.0) as usize;
    let y1 = ((a[1].max(b[1]) + reach).ceil() as usize).min(size);
    for y in y0..y1 {
        for x in x0..x1 {
            let d = segment_distance([x as f64 + 0.5, y as f64 + 0.5], a, b);
            let c = (half_width + 0.5 - d).clamp(0.0, 1.0);
            let slot = &mut coverage[y * size + x];
            *slot = slot.max(c);
        }
    }
}

/// Renders a face as a 3×64×64 image in [0, 1].
pub fn render(params: &SyntheticFaceParams, landmarks: &[[f64; 2]], rng: &mut Rng) -> Tensor<f32> {
    let size = IMAGE_SIZE;
    let bg_level = rng.random_range(0.1..0.35);
    let background = [bg_level, bg_level * rng.random_range(0.85..1.15), bg_level * rng.random_range(0.85..1.15)];
    let tone = rng.random_range(0.75..1.0);
    let skin = [0.92 * tone, 0.76 * tone, 0.64 * tone];
    let ink = [0.12, 0.06, 0.05];

    let (sin, cos) = params.roll.sin_cos();
    let mut face = vec![0.0f64; size * size];
    for y in 0..size {
        for x in 0..size {
            let px = (x as f64 + 0.5) / size as f64 - params.center[0];
            let py = (y as f64 + 0.5) / size as f64 - params.center[1];
            // undo the roll, then measure the signed distance to the ellipse edge in pixels
            let u = (cos * px + sin * py) / params.radii[0];
            let v = (-sin * px + cos * py) / (params.radii[1] * 1.15);
            let r = (u * u + v * v).sqrt();
            let edge_px = (1.0 - r) * params.radii[0] * size as f64;
            face[y * size + x] = (edge_px + 0.5).clamp(0.0, 1.0);
        }
    }

    let mut ink_cov = vec![0.0f64; size * size];
    for (range, closed) in CONTOURS {
        let pts = &landmarks[range];
        for w in pts.windows(2) {
            stroke(&mut ink_cov, size, w[0], w[1], 0.6);
        }
        if closed {
            stroke(&mut ink_cov, size, pts[pts.len() - 1], pts[0], 0.6);
        }
    }

    let grain = Normal::new(0.0, 0.015).expect("finite noise");
    let mut data = vec![0.0f32; 3 * size * size];
    for i in 0..size * size {
        let n = grain.sample(rng);
        for c in 0..3 {
            let base = background[c] + (skin[c] - background[c]) * face[i];
            let v = base + (ink[c] - base) * ink_cov[i] + n;
            data[c * size * size + i] = v.clamp(0.0, 1.0) as f32;
        }
    }
    Tensor::new(vec![3, size, size], data).expect("image buffer matches shape")
}
