//! Procedural 2-D face renderer.
//!
//! The face is drawn in a canonical frame (origin at the face center, y down,
//! units of pixels at scale 1) and mapped into the 64×64 canvas by the pose:
//! `p = c + t + s·R(θ)·q`. Every primitive is an analytic shape with a one-pixel
//! anti-aliased edge, so masks and keypoints are known exactly.

use super::factors::{FactorVector, POSE_HALF_RANGE};
use crate::image::{Affine2, FloatImage, Mask, RgbImage};

pub const FRAME_SIZE: usize = 64;
pub const NUM_KEYPOINTS: usize = 8;

/// Keypoint order: left-eye outer, left-eye inner, right-eye inner, right-eye outer,
/// mouth left corner, mouth right corner, mouth top, mouth bottom.
pub type Keypoints = [[f32; 2]; NUM_KEYPOINTS];

/// Indices of the mouth keypoints within [`Keypoints`].
pub const MOUTH_KEYPOINTS: std::ops::Range<usize> = 4..8;

const CANVAS_CENTER: f64 = FRAME_SIZE as f64 / 2.0;

const FACE_CENTER_Y: f64 = 1.0;
const FACE_HALF_WIDTH: f64 = 18.0;
const FACE_HALF_HEIGHT: f64 = 22.0;
const HAIRLINE_Y: f64 = -13.0;

const EYE_Y: f64 = -4.0;
const EYE_X: f64 = 9.0;
const EYE_HALF_WIDTH: f64 = 5.5;
const EYE_HALF_HEIGHT: f64 = 3.2;
const IRIS_RADIUS: f64 = 2.1;
const PUPIL_RADIUS: f64 = 0.9;
const GAZE_REACH: [f64; 2] = [2.6, 1.3];

const BROW_Y: f64 = -12.0;
const BROW_RAISE: f64 = 2.0;
const BROW_FURROW: f64 = 1.4;
const BROW_HALF_THICKNESS: f64 = 1.0;

const MOUTH_Y: f64 = 11.0;
const MOUTH_HALF_WIDTH: f64 = 8.0;
const MOUTH_CURL: f64 = 2.2;
const MOUTH_MIN_OPEN: f64 = 0.3;
const MOUTH_OPEN_RANGE: f64 = 4.7;
const LIP_THICKNESS: f64 = 1.6;

const CHEEK_X: f64 = 11.0;
const CHEEK_Y: f64 = 6.0;
const CHEEK_RADIUS: f64 = 3.8;

const SCLERA: [f32; 3] = [0.96, 0.96, 0.94];
const MOUTH_INTERIOR: [f32; 3] = [0.22, 0.04, 0.07];
const CHEEK_TINT: [f32; 3] = [0.93, 0.42, 0.45];

/// Identity-dependent colors and proportions decoded from the appearance vector.
#[derive(Clone, Debug)]
struct Look {
    skin: [f32; 3],
    hair: [f32; 3],
    background: [f32; 3],
    iris: [f32; 3],
    lip: [f32; 3],
    face_width: f64,
    eye_spacing: f64,
    mouth_width: f64,
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

impl Look {
    fn decode(a: &[f32; 16]) -> Self {
        let skin = [lerp(0.55, 0.95, a[0]), lerp(0.38, 0.78, a[1]), lerp(0.28, 0.66, a[2])];
        Self {
            skin,
            hair: [lerp(0.05, 0.55, a[3]), lerp(0.04, 0.45, a[4]), lerp(0.03, 0.4, a[5])],
            background: [lerp(0.15, 0.85, a[6]), lerp(0.2, 0.85, a[7]), lerp(0.25, 0.9, a[8])],
            iris: [lerp(0.1, 0.45, a[9]), lerp(0.15, 0.5, a[10]), lerp(0.1, 0.6, a[11])],
            lip: [lerp(0.6, 0.85, a[12]), lerp(0.2, 0.35, a[12]), lerp(0.25, 0.35, a[12])],
            face_width: lerp(0.9, 1.05, a[13]) as f64,
            eye_spacing: lerp(0.92, 1.08, a[14]) as f64,
            mouth_width: lerp(0.85, 1.12, a[15]) as f64,
        }
    }
}

/// Canonical-to-image transform of a face.
pub fn face_transform(f: &FactorVector) -> Affine2 {
    let rot = f.pose[0] as f64;
    let scale = (f.pose[3] as f64).exp();
    let (s, c) = rot.sin_cos();
    Affine2 {
        m: [[scale * c, -scale * s], [scale * s, scale * c]],
        t: [
            CANVAS_CENTER + f.pose[1] as f64 * FRAME_SIZE as f64,
            CANVAS_CENTER + f.pose[2] as f64 * FRAME_SIZE as f64,
        ],
    }
}

#[inline]
fn coverage(inside_px: f64) -> f32 {
    (inside_px + 0.5).clamp(0.0, 1.0) as f32
}

/// Coverage that is exactly zero on and outside the boundary.
#[inline]
fn inner_coverage(inside_px: f64) -> f32 {
    inside_px.clamp(0.0, 1.0) as f32
}

#[inline]
fn blend(dst: &mut [f32; 3], src: [f32; 3], alpha: f32) {
    if alpha <= 0.0 {
        return;
    }
    for i in 0..3 {
        dst[i] += (src[i] - dst[i]) * alpha;
    }
}

/// Approximate signed inside-distance to an axis-aligned ellipse, exact on the boundary.
#[inline]
fn ellipse_inside(x: f64, y: f64, a: f64, b: f64) -> f64 {
    let k = ((x / a).powi(2) + (y / b).powi(2)).sqrt();
    (1.0 - k) * a.min(b)
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0);
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}

fn eye_centers(look: &Look) -> [[f64; 2]; 2] {
    let ex = EYE_X * look.eye_spacing;
    [[-ex, EYE_Y], [ex, EYE_Y]]
}

fn mouth_half_width(look: &Look) -> f64 {
    MOUTH_HALF_WIDTH * look.mouth_width
}

fn mouth_open(f: &FactorVector) -> f64 {
    MOUTH_MIN_OPEN + MOUTH_OPEN_RANGE * f.lip_aperture as f64
}

/// Renders one frame in floating point.
pub fn render_float(f: &FactorVector) -> FloatImage {
    let look = Look::decode(&f.appearance);
    let to_image = face_transform(f);
    let to_canon = to_image.inverse().expect("pose scale is positive");
    let scale = (f.pose[3] as f64).exp();

    let fw = FACE_HALF_WIDTH * look.face_width;
    let eyes = eye_centers(&look);
    let mw = mouth_half_width(&look);
    let open = mouth_open(f);
    let [brow_raise, brow_furrow, curl, cheek_raise] = f.expression.map(|v| v as f64);
    let brow_y = BROW_Y - BROW_RAISE * brow_raise;
    let brow_hair = [look.hair[0] * 0.8, look.hair[1] * 0.8, look.hair[2] * 0.8];
    let cheek_alpha = (0.08 + 0.22 * (cheek_raise + 1.0) * 0.5) as f32;
    let cheek_y = CHEEK_Y - 1.2 * cheek_raise;
    let eye_open = EYE_HALF_HEIGHT * (1.0 - f.blink as f64);

    let mut img = FloatImage::new(FRAME_SIZE, FRAME_SIZE);
    for row in 0..FRAME_SIZE {
        for col in 0..FRAME_SIZE {
            let [x, y] = to_canon.apply([col as f64 + 0.5, row as f64 + 0.5]);
            let mut px = look.background;

            let face = coverage(ellipse_inside(x, y - FACE_CENTER_Y, fw, FACE_HALF_HEIGHT) * scale);
            if face > 0.0 {
                let mut skin = look.skin;

                let hairline = HAIRLINE_Y + 1.5 * (x / fw).powi(2);
                blend(&mut skin, look.hair, coverage((hairline - y) * scale));

                for side in [-1.0, 1.0] {
                    let d = ((x - side * CHEEK_X * look.face_width).powi(2)
                        + (y - cheek_y).powi(2))
                    .sqrt();
                    blend(&mut skin, CHEEK_TINT, cheek_alpha * coverage((CHEEK_RADIUS - d) * scale));
                }

                for (side, eye) in [-1.0, 1.0].iter().zip(&eyes) {
                    let outer = [eye[0] + side * (EYE_HALF_WIDTH - 0.5), brow_y];
                    let inner = [eye[0] - side * (EYE_HALF_WIDTH - 1.5), brow_y + BROW_FURROW * brow_furrow];
                    let d = segment_distance([x, y], outer, inner);
                    blend(&mut skin, brow_hair, coverage((BROW_HALF_THICKNESS - d) * scale));
                }

                if x.abs() < mw {
                    let u = x / mw;
                    let profile = (1.0 - u * u).sqrt();
                    let center = MOUTH_Y - MOUTH_CURL * curl * u * u;
                    let dy = (y - center).abs();
                    blend(&mut skin, look.lip, coverage(((open + LIP_THICKNESS) * profile - dy) * scale));
                    blend(&mut skin, MOUTH_INTERIOR, coverage((open * profile - dy) * scale));
                }

                for eye in &eyes {
                    let ex = x - eye[0];
                    let ey = y - eye[1];
                    if ex.abs() >= EYE_HALF_WIDTH || eye_open <= 0.0 {
                        continue;
                    }
                    let u = ex / EYE_HALF_WIDTH;
                    let lid = eye_open * (1.0 - u * u).sqrt() - ey.abs();
                    let open_cov = inner_coverage(lid * scale);
                    if open_cov <= 0.0 {
                        continue;
                    }
                    let mut content = SCLERA;
                    let ic = [GAZE_REACH[0] * f.gaze[0] as f64, GAZE_REACH[1] * f.gaze[1] as f64];
                    let r = ((ex - ic[0]).powi(2) + (ey - ic[1]).powi(2)).sqrt();
                    blend(&mut content, look.iris, coverage((IRIS_RADIUS - r) * scale));
                    blend(&mut content, [0.03, 0.03, 0.04], coverage((PUPIL_RADIUS - r) * scale));
                    blend(&mut skin, content, open_cov);
                }

                blend(&mut px, skin, face);
            }
            let i = (row * FRAME_SIZE + col) * 3;
            img.data[i..i + 3].copy_from_slice(&px);
        }
    }
    img
}

/// Renders one frame quantized to 8 bits.
pub fn render_frame(f: &FactorVector) -> RgbImage {
    render_float(f).quantize()
}

fn canonical_keypoints(f: &FactorVector) -> [[f64; 2]; NUM_KEYPOINTS] {
    let look = Look::decode(&f.appearance);
    let eyes = eye_centers(&look);
    let mw = mouth_half_width(&look);
    let open = mouth_open(f);
    let corner_y = MOUTH_Y - MOUTH_CURL * f.expression[2] as f64;
    [
        [eyes[0][0] - EYE_HALF_WIDTH, EYE_Y],
        [eyes[0][0] + EYE_HALF_WIDTH, EYE_Y],
        [eyes[1][0] - EYE_HALF_WIDTH, EYE_Y],
        [eyes[1][0] + EYE_HALF_WIDTH, EYE_Y],
        [-mw, corner_y],
        [mw, corner_y],
        [0.0, MOUTH_Y - open - LIP_THICKNESS],
        [0.0, MOUTH_Y + open + LIP_THICKNESS],
    ]
}

/// Ground-truth landmark positions in continuous image coordinates.
pub fn keypoints(f: &FactorVector) -> Keypoints {
    let to_image = face_transform(f);
    canonical_keypoints(f).map(|q| {
        let p = to_image.apply(q);
        [p[0] as f32, p[1] as f32]
    })
}

/// Whether canonical point `q` lies strictly inside either eye socket.
fn in_eye_socket(look: &Look, q: [f64; 2]) -> bool {
    eye_centers(look).iter().any(|e| {
        ((q[0] - e[0]) / EYE_HALF_WIDTH).powi(2) + ((q[1] - e[1]) / EYE_HALF_HEIGHT).powi(2) < 1.0
    })
}

/// Whether the continuous image point `p` lies inside the eye region of `f`.
pub fn eye_region_contains(f: &FactorVector, p: [f64; 2]) -> bool {
    let look = Look::decode(&f.appearance);
    let to_canon = face_transform(f).inverse().expect("pose scale is positive");
    in_eye_socket(&look, to_canon.apply(p))
}

/// Pixels whose centers fall inside either eye socket. Gaze and blink only ever
/// change pixels inside this mask.
pub fn eye_region_mask(f: &FactorVector) -> Mask {
    let look = Look::decode(&f.appearance);
    let to_canon = face_transform(f).inverse().expect("pose scale is positive");
    let mut bits = vec![false; FRAME_SIZE * FRAME_SIZE];
    for row in 0..FRAME_SIZE {
        for col in 0..FRAME_SIZE {
            let q = to_canon.apply([col as f64 + 0.5, row as f64 + 0.5]);
            bits[row * FRAME_SIZE + col] = in_eye_socket(&look, q);
        }
    }
    Mask {
        width: FRAME_SIZE,
        height: FRAME_SIZE,
        bits,
    }
}

/// Extreme points (left, right, top, bottom) of both sockets in image coordinates;
/// used to align eye regions between frames.
pub fn eye_polygon(f: &FactorVector) -> [[f64; 2]; 8] {
    let look = Look::decode(&f.appearance);
    let to_image = face_transform(f);
    let mut out = [[0.0; 2]; 8];
    for (k, e) in eye_centers(&look).iter().enumerate() {
        let pts = [
            [e[0] - EYE_HALF_WIDTH, e[1]],
            [e[0] + EYE_HALF_WIDTH, e[1]],
            [e[0], e[1] - EYE_HALF_HEIGHT],
            [e[0], e[1] + EYE_HALF_HEIGHT],
        ];
        for (j, p) in pts.iter().enumerate() {
            out[k * 4 + j] = to_image.apply(*p);
        }
    }
    out
}

/// Pose transform of an image-space similarity applied about the canvas center:
/// rendering the returned factors equals warping the original render by `aug`.
pub fn compose_pose(f: &FactorVector, angle: f64, log_scale: f64) -> FactorVector {
    let mut out = f.clone();
    let (s, c) = angle.sin_cos();
    let k = log_scale.exp();
    let tx = f.pose[1] as f64;
    let ty = f.pose[2] as f64;
    out.pose[0] = (f.pose[0] as f64 + angle) as f32;
    out.pose[1] = (k * (c * tx - s * ty)) as f32;
    out.pose[2] = (k * (s * tx + c * ty)) as f32;
    out.pose[3] = (f.pose[3] as f64 + log_scale) as f32;
    out
}

/// Normalized pose, each component divided by its half-range.
pub fn normalized_pose(f: &FactorVector) -> [f32; 4] {
    let mut out = [0f32; 4];
    for i in 0..4 {
        out[i] = f.pose[i] / POSE_HALF_RANGE[i];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FactorVector {
        let mut f = FactorVector::neutral(42);
        f.lip_aperture = 0.4;
        f.pose = [0.05, 0.01, -0.02, 0.03];
        f.gaze = [0.3, -0.4];
        f.expression = [0.2, -0.3, 0.5, 0.1];
        f
    }

    #[test]
    fn render_is_deterministic() {
        let f = sample();
        assert_eq!(render_frame(&f), render_frame(&f));
    }

    #[test]
    fn blink_changes_only_eye_region() {
        let mut open = sample();
        open.blink = 0.0;
        let mut closed = open.clone();
        closed.blink = 1.0;
        let a = render_float(&open);
        let b = render_float(&closed);
        let mask = eye_region_mask(&open);
        let mut changed_inside = 0;
        for row in 0..FRAME_SIZE {
            for col in 0..FRAME_SIZE {
                for ch in 0..3 {
                    let d = a.get(row, col, ch) - b.get(row, col, ch);
                    if mask.get(row, col) {
                        changed_inside += (d != 0.0) as usize;
                    } else {
                        assert_eq!(d, 0.0, "pixel ({row},{col}) outside mask changed");
                    }
                }
            }
        }
        assert!(changed_inside > 20);
    }

    #[test]
    fn closed_eyes_show_skin() {
        let mut closed = sample();
        closed.blink = 1.0;
        let mut other_gaze = closed.clone();
        other_gaze.gaze = [-0.9, 0.9];
        assert_eq!(render_float(&closed), render_float(&other_gaze));
    }

    #[test]
    fn gaze_changes_only_eye_region() {
        let a = sample();
        let mut b = a.clone();
        b.gaze = [-0.8, 0.7];
        let (ia, ib) = (render_float(&a), render_float(&b));
        let mask = eye_region_mask(&a);
        for row in 0..FRAME_SIZE {
            for col in 0..FRAME_SIZE {
                if !mask.get(row, col) {
                    for ch in 0..3 {
                        assert_eq!(ia.get(row, col, ch), ib.get(row, col, ch));
                    }
                }
            }
        }
        assert_ne!(ia, ib);
    }

    #[test]
    fn rotation_matches_rigid_warp() {
        let mut f = sample();
        f.pose = [0.0, 0.0, 0.0, 0.0];
        let mut g = f.clone();
        g.pose[0] = 0.3;
        let base = render_float(&f);
        let rotated = render_float(&g);
        let center = [CANVAS_CENTER, CANVAS_CENTER];
        let inverse = Affine2::similarity_about(center, -0.3, 1.0);
        let warped = base.warp(&inverse);
        let err = warped.mean_abs_diff(&rotated);
        assert!(err < 0.02, "mean abs error {err}");
    }

    #[test]
    fn mouth_opens_monotonically() {
        let mut f = sample();
        let mut last = f64::NEG_INFINITY;
        for k in 0..=10 {
            f.lip_aperture = k as f32 / 10.0;
            let img = render_float(&f);
            // Darkness of the mouth interior grows with aperture.
            let dark: f64 = img
                .data
                .chunks(3)
                .map(|p| {
                    let d = (p[0] - MOUTH_INTERIOR[0]).abs()
                        + (p[1] - MOUTH_INTERIOR[1]).abs()
                        + (p[2] - MOUTH_INTERIOR[2]).abs();
                    (0.15 - d as f64).max(0.0)
                })
                .sum();
            assert!(dark > last, "aperture {k}: {dark} <= {last}");
            last = dark;
        }
    }

    #[test]
    fn keypoints_follow_pose() {
        let mut f = sample();
        f.pose = [0.0; 4];
        let k0 = keypoints(&f);
        let g = compose_pose(&f, 0.2, 0.05);
        let k1 = keypoints(&g);
        let aug = Affine2::similarity_about([CANVAS_CENTER, CANVAS_CENTER], 0.2, 0.05f64.exp());
        for (a, b) in k0.iter().zip(&k1) {
            let p = aug.apply([a[0] as f64, a[1] as f64]);
            assert!((p[0] - b[0] as f64).abs() < 1e-4 && (p[1] - b[1] as f64).abs() < 1e-4);
        }
    }

    #[test]
    fn face_stays_on_canvas_at_extreme_pose() {
        let mut f = sample();
        f.pose = POSE_HALF_RANGE;
        let img = render_frame(&f);
        let bg = Look::decode(&f.appearance).background.map(|v| (v * 255.0).round() as u8);
        for col in 0..FRAME_SIZE {
            assert_eq!(img.pixel(0, col), bg);
            assert_eq!(img.pixel(FRAME_SIZE - 1, col), bg);
        }
    }
}
