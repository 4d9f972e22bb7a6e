//! Linear blendshape face with a single jaw joint.
//!
//! A vertex is displaced by the expression basis and then blended between
//! its rest position and its jaw-rotated position:
//! `V_i = (1-w_i)·P_i + w_i·(R(jaw)·(P_i - pivot) + pivot)` with
//! `P = template + basis·psi`.

use std::f64::consts::PI;
use std::rc::Rc;

use lipcycle_grad::{Graph, Mat, Var};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::seed;

/// Animation frame rate shared by every expression sequence.
pub const ANIMATION_FPS: u32 = 25;

pub type Mat3 = [[f64; 3]; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceTemplate {
    /// `n_v×3` rest positions.
    pub template: Mat,
    /// `(3·n_v)×|psi|`; row `3i+c` holds coordinate `c` of vertex `i`.
    pub expr_basis: Mat,
    pub jaw_weights: Vec<f64>,
    pub jaw_pivot: [f64; 3],
    pub faces: Vec<[u32; 3]>,
    pub mouth_idx: Vec<usize>,
    pub lip_idx: Vec<usize>,
    pub upper_idx: Vec<usize>,
    pub upper_lip_mid: usize,
    pub lower_lip_mid: usize,
    /// Expression channels whose basis lives on the mouth region.
    pub mouth_channels: Vec<usize>,
    /// Expression channels whose basis lives on the upper face.
    pub upper_channels: Vec<usize>,
}

impl FaceTemplate {
    pub fn num_vertices(&self) -> usize {
        self.template.nrows()
    }

    pub fn psi_dim(&self) -> usize {
        self.expr_basis.ncols()
    }

    /// Width of one expression frame, `|psi| + 3`.
    pub fn param_dim(&self) -> usize {
        self.psi_dim() + 3
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_vertices();
        if self.template.ncols() != 3 || self.expr_basis.nrows() != 3 * n {
            return Err(invalid!("template/basis shapes disagree"));
        }
        if self.jaw_weights.len() != n {
            return Err(invalid!("jaw_weights length {} != n_v {n}", self.jaw_weights.len()));
        }
        if self.jaw_weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(invalid!("jaw_weights must lie in [0, 1]"));
        }
        if self.mouth_idx.is_empty() || self.lip_idx.is_empty() || self.upper_idx.is_empty() {
            return Err(invalid!("vertex index sets must be non-empty"));
        }
        let all = self
            .mouth_idx
            .iter()
            .chain(&self.lip_idx)
            .chain(&self.upper_idx);
        if all.copied().any(|i| i >= n) {
            return Err(invalid!("vertex index out of range"));
        }
        if !self.lip_idx.iter().all(|i| self.mouth_idx.contains(i)) {
            return Err(invalid!("lip_idx must be a subset of mouth_idx"));
        }
        if self.upper_lip_mid == self.lower_lip_mid
            || !self.lip_idx.contains(&self.upper_lip_mid)
            || !self.lip_idx.contains(&self.lower_lip_mid)
        {
            return Err(invalid!("lip midpoints must be distinct lip vertices"));
        }
        let finite = self.template.iter().chain(self.expr_basis.iter()).all(|x| x.is_finite());
        if !finite {
            return Err(invalid!("template contains non-finite values"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionParams {
    pub psi: Vec<f64>,
    pub jaw: [f64; 3],
}

impl ExpressionParams {
    pub fn zeros(psi_dim: usize) -> Self {
        Self {
            psi: vec![0.0; psi_dim],
            jaw: [0.0; 3],
        }
    }

    /// Splits one `|psi|+3` frame.
    pub fn from_row(row: &[f64]) -> Self {
        let n = row.len() - 3;
        Self {
            psi: row[..n].to_vec(),
            jaw: [row[n], row[n + 1], row[n + 2]],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.psi.iter().chain(&self.jaw).any(|x| !x.is_finite()) {
            return Err(invalid!("expression parameters must be finite"));
        }
        if norm3(&self.jaw) >= PI {
            return Err(invalid!("jaw rotation magnitude must be below pi"));
        }
        Ok(())
    }
}

/// `T×(|psi|+3)` trajectory at [`ANIMATION_FPS`].
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionSequence {
    pub frames: Mat,
}

impl ExpressionSequence {
    pub fn new(frames: Mat) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(invalid!("expression sequence needs at least one frame"));
        }
        if frames.ncols() < 3 {
            return Err(invalid!("expression frame narrower than the jaw block"));
        }
        for row in frames.rows() {
            ExpressionParams::from_row(row.as_slice().expect("row-major")).validate()?;
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }
}

/// `T` frames of `n_v×3` positions, stored as `T×(3·n_v)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshSequence {
    pub vertices: Mat,
}

impl MeshSequence {
    pub fn frames(&self) -> usize {
        self.vertices.nrows()
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.ncols() / 3
    }

    pub fn vertex(&self, t: usize, i: usize) -> [f64; 3] {
        let r = self.vertices.row(t);
        [r[3 * i], r[3 * i + 1], r[3 * i + 2]]
    }
}

fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn hat(v: &[f64; 3]) -> Mat3 {
    [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
}

fn mat_mul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, o) in row.iter_mut().enumerate() {
            *o = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn mat_vec3(a: &Mat3, v: &[f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

fn mat_t_vec3(a: &Mat3, v: &[f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[1][0] * v[1] + a[2][0] * v[2],
        a[0][1] * v[0] + a[1][1] * v[1] + a[2][1] * v[2],
        a[0][2] * v[0] + a[1][2] * v[1] + a[2][2] * v[2],
    ]
}

/// Rodrigues coefficients `A = sinθ/θ`, `B = (1-cosθ)/θ²` and their
/// θ-derivatives divided by θ.
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64, f64) {
    let t2 = theta * theta;
    let (a, b) = if theta < 1e-6 {
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
    } else {
        let half = (0.5 * theta).sin();
        (theta.sin() / theta, 2.0 * half * half / t2)
    };
    let (da, db) = if theta < 1e-2 {
        (
            -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (
            (theta * c - s) / (t2 * theta),
            (theta * s - 2.0 * (1.0 - c)) / (t2 * t2),
        )
    };
    (a, b, da, db)
}

fn rotation_unchecked(jaw: &[f64; 3]) -> Mat3 {
    let (a, b, _, _) = rodrigues_coeffs(norm3(jaw));
    let k = hat(jaw);
    let k2 = mat_mul3(&k, &k);
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = f64::from(u8::from(i == j)) + a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// Rotation matrix for an axis-angle vector (Rodrigues formula).
pub fn rotation_from_axis_angle(jaw: [f64; 3]) -> Result<Mat3> {
    if jaw.iter().any(|x| !x.is_finite()) {
        return Err(invalid!("axis-angle components must be finite"));
    }
    Ok(rotation_unchecked(&jaw))
}

/// Partial derivatives `∂R/∂r_c` for `c = 0, 1, 2`.
pub fn rotation_jacobian(jaw: [f64; 3]) -> [Mat3; 3] {
    let (a, b, da, db) = rodrigues_coeffs(norm3(&jaw));
    let k = hat(&jaw);
    let k2 = mat_mul3(&k, &k);
    let mut out = [[[0.0; 3]; 3]; 3];
    for (c, d) in out.iter_mut().enumerate() {
        let mut e = [0.0; 3];
        e[c] = 1.0;
        let ec = hat(&e);
        let ek = mat_mul3(&ec, &k);
        let ke = mat_mul3(&k, &ec);
        for i in 0..3 {
            for j in 0..3 {
                d[i][j] = a * ec[i][j]
                    + b * (ek[i][j] + ke[i][j])
                    + da * jaw[c] * k[i][j]
                    + db * jaw[c] * k2[i][j];
            }
        }
    }
    out
}

/// Decodes one frame into `n_v×3` vertices.
pub fn decode(template: &FaceTemplate, params: &ExpressionParams) -> Result<Mat> {
    if params.psi.len() != template.psi_dim() {
        return Err(invalid!(
            "psi has {} entries, basis has {}",
            params.psi.len(),
            template.psi_dim()
        ));
    }
    params.validate()?;
    let mut frame = Vec::with_capacity(template.param_dim());
    frame.extend_from_slice(&params.psi);
    frame.extend_from_slice(&params.jaw);
    let all: Vec<usize> = (0..template.num_vertices()).collect();
    let flat = decode_frame(template, &frame, &all);
    Ok(Mat::from_shape_vec((template.num_vertices(), 3), flat).expect("shape"))
}

/// Decodes every frame; output is `T×(3·n_v)`.
pub fn decode_sequence(template: &FaceTemplate, seq: &ExpressionSequence) -> Result<MeshSequence> {
    if seq.frames.ncols() != template.param_dim() {
        return Err(invalid!(
            "expression width {} != |psi|+3 = {}",
            seq.frames.ncols(),
            template.param_dim()
        ));
    }
    let all: Vec<usize> = (0..template.num_vertices()).collect();
    Ok(MeshSequence {
        vertices: decode_rows(template, &seq.frames, &all),
    })
}

/// Decodes the listed vertices of each row of `frames` (no validation).
pub fn decode_rows(template: &FaceTemplate, frames: &Mat, subset: &[usize]) -> Mat {
    let mut out = Mat::zeros((frames.nrows(), 3 * subset.len()));
    for (t, row) in frames.rows().into_iter().enumerate() {
        let row = row.to_vec();
        let flat = decode_frame(template, &row, subset);
        out.row_mut(t).assign(&ndarray::ArrayView1::from(&flat));
    }
    out
}

fn displaced(template: &FaceTemplate, psi: &[f64], i: usize) -> [f64; 3] {
    let mut p = [0.0; 3];
    for (c, pc) in p.iter_mut().enumerate() {
        let basis_row = template.expr_basis.row(3 * i + c);
        *pc = template.template[[i, c]]
            + basis_row.iter().zip(psi).map(|(b, x)| b * x).sum::<f64>();
    }
    p
}

fn decode_frame(template: &FaceTemplate, frame: &[f64], subset: &[usize]) -> Vec<f64> {
    let n_psi = template.psi_dim();
    let psi = &frame[..n_psi];
    let jaw = [frame[n_psi], frame[n_psi + 1], frame[n_psi + 2]];
    let r = rotation_unchecked(&jaw);
    let still = jaw == [0.0; 3];
    let pivot = template.jaw_pivot;
    let mut out = Vec::with_capacity(3 * subset.len());
    for &i in subset {
        let p = displaced(template, psi, i);
        let w = template.jaw_weights[i];
        if w == 0.0 || still {
            out.extend_from_slice(&p);
            continue;
        }
        let rel = [p[0] - pivot[0], p[1] - pivot[1], p[2] - pivot[2]];
        let rot = mat_vec3(&r, &rel);
        for c in 0..3 {
            out.push((1.0 - w) * p[c] + w * (rot[c] + pivot[c]));
        }
    }
    out
}

/// Places a differentiable decode of `x` (`T×(|psi|+3)`) on the graph,
/// returning `T×(3·|subset|)` vertex coordinates.
pub fn decode_var(g: &mut Graph, template: &Rc<FaceTemplate>, x: Var, subset: Rc<[usize]>) -> Var {
    let value = decode_rows(template, g.value(x), &subset);
    let tpl = Rc::clone(template);
    g.custom(
        &[x],
        value,
        Box::new(move |gout, inputs| vec![decode_backward(&tpl, inputs[0], &subset, gout)]),
    )
}

fn decode_backward(template: &FaceTemplate, frames: &Mat, subset: &[usize], gout: &Mat) -> Mat {
    let n_psi = template.psi_dim();
    let pivot = template.jaw_pivot;
    let mut grad = Mat::zeros(frames.dim());
    for (t, row) in frames.rows().into_iter().enumerate() {
        let psi: Vec<f64> = row.iter().take(n_psi).copied().collect();
        let jaw = [row[n_psi], row[n_psi + 1], row[n_psi + 2]];
        let r = rotation_unchecked(&jaw);
        let dr = rotation_jacobian(jaw);
        let mut outer = [[0.0; 3]; 3];
        let mut dpsi = vec![0.0; n_psi];
        for (s, &i) in subset.iter().enumerate() {
            let gv = [gout[[t, 3 * s]], gout[[t, 3 * s + 1]], gout[[t, 3 * s + 2]]];
            let w = template.jaw_weights[i];
            // d/dP of (1-w)P + w R(P - pivot)
            let rt = mat_t_vec3(&r, &gv);
            let a = [
                (1.0 - w) * gv[0] + w * rt[0],
                (1.0 - w) * gv[1] + w * rt[1],
                (1.0 - w) * gv[2] + w * rt[2],
            ];
            for (c, &ac) in a.iter().enumerate() {
                if ac == 0.0 {
                    continue;
                }
                let basis_row = template.expr_basis.row(3 * i + c);
                for (d, b) in dpsi.iter_mut().zip(basis_row.iter()) {
                    *d += ac * b;
                }
            }
            if w != 0.0 {
                let p = displaced(template, &psi, i);
                let rel = [p[0] - pivot[0], p[1] - pivot[1], p[2] - pivot[2]];
                for a in 0..3 {
                    for b in 0..3 {
                        outer[a][b] += w * gv[a] * rel[b];
                    }
                }
            }
        }
        for (k, d) in dpsi.into_iter().enumerate() {
            grad[[t, k]] = d;
        }
        for (c, drc) in dr.iter().enumerate() {
            let mut s = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    s += drc[a][b] * outer[a][b];
                }
            }
            grad[[t, n_psi + c]] = s;
        }
    }
    grad
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

const MOUTH_CENTER: [f64; 2] = [0.0, -0.5];
const LIP_RADII: [f64; 2] = [0.25, 0.12];

/// Builds a deterministic face-like template.
///
/// Vertices sit on concentric rings around the mouth: three inner rings form
/// the mouth region (the outermost of them is the lip contour) and the
/// remaining rings expand over the face. The first `3/8` of the expression
/// channels are mouth channels; the rest are upper-face channels.
pub fn make_synthetic_template(seed: u64, n_v: usize, psi_dim: usize) -> Result<FaceTemplate> {
    if n_v < 50 {
        return Err(invalid!("n_v must be at least 50, got {n_v}"));
    }
    if psi_dim < 8 {
        return Err(invalid!("psi_dim must be at least 8, got {psi_dim}"));
    }
    let mut rng = seed::rng(seed::stream_seed(seed, "template"));
    let ring = (4 * ((n_v as f64 / 60.0).round() as usize)).max(8);
    let rings = n_v.div_ceil(ring);
    let outer_rings = rings - 3;

    let mut template = Mat::zeros((n_v, 3));
    for v in 0..n_v {
        let (k, j) = (v / ring, v % ring);
        let phi = 2.0 * PI * j as f64 / ring as f64;
        let (rx, ry, lift) = if k < 3 {
            let s = (k + 1) as f64 / 3.0;
            (LIP_RADII[0] * s, LIP_RADII[1] * s, 0.0)
        } else {
            // Outer rings drift upward as they grow so most of the face lies above the mouth.
            let t = (k - 2) as f64 / outer_rings.max(1) as f64;
            let ry_up = LIP_RADII[1] + 1.2 * t;
            let ry_down = LIP_RADII[1] + 1.0 * t;
            let ry = if phi.sin() >= 0.0 { ry_up } else { ry_down };
            (LIP_RADII[0] + 0.8 * t, ry, 0.5 * t)
        };
        // Lip contour stays exact so the midpoints sit at ±π/2.
        let jitter = if k == 2 { 0.0 } else { 0.01 };
        let x = MOUTH_CENTER[0] + rx * phi.cos() + jitter * rng.random_range(-1.0..1.0);
        let y = MOUTH_CENTER[1] + lift + ry * phi.sin() + jitter * rng.random_range(-1.0..1.0);
        let bulge = 0.3 * (1.0 - (x / 1.2).powi(2) - (y / 1.8).powi(2)).max(0.0);
        let lip = if k == 2 { 0.05 } else { 0.0 };
        template[[v, 0]] = x;
        template[[v, 1]] = y;
        template[[v, 2]] = bulge + lip;
    }

    let mut faces = Vec::new();
    for k in 0..rings.saturating_sub(1) {
        for j in 0..ring {
            let a = k * ring + j;
            let b = k * ring + (j + 1) % ring;
            let c = (k + 1) * ring + j;
            let d = (k + 1) * ring + (j + 1) % ring;
            if c < n_v && d < n_v {
                faces.push([a as u32, c as u32, d as u32]);
                faces.push([a as u32, d as u32, b as u32]);
            }
        }
    }

    let mouth_idx: Vec<usize> = (0..3 * ring).collect();
    let lip_idx: Vec<usize> = (2 * ring..3 * ring).collect();
    let upper_lip_mid = 2 * ring + ring / 4;
    let lower_lip_mid = 2 * ring + 3 * ring / 4;

    let upper_floor = MOUTH_CENTER[1] + 2.5 * LIP_RADII[1];
    let upper_idx: Vec<usize> = (3 * ring..n_v)
        .filter(|&v| template[[v, 1]] > upper_floor)
        .collect();

    let y_open = MOUTH_CENTER[1] + 0.8 * LIP_RADII[1];
    let y_full = MOUTH_CENTER[1] - LIP_RADII[1] - 0.05;
    let jaw_weights: Vec<f64> = (0..n_v)
        .map(|v| smoothstep((y_open - template[[v, 1]]) / (y_open - y_full)))
        .collect();

    let n_mouth_ch = (3 * psi_dim) / 8;
    let mouth_channels: Vec<usize> = (0..n_mouth_ch).collect();
    let upper_channels: Vec<usize> = (n_mouth_ch..psi_dim).collect();

    let mut basis = Mat::zeros((3 * n_v, psi_dim));
    let ellipse_radius = |v: usize| {
        let dx = (template[[v, 0]] - MOUTH_CENTER[0]) / LIP_RADII[0];
        let dy = (template[[v, 1]] - MOUTH_CENTER[1]) / LIP_RADII[1];
        (dx * dx + dy * dy).sqrt()
    };
    for ch in 0..psi_dim {
        let is_mouth = ch < n_mouth_ch;
        let centers: Vec<([f64; 2], [f64; 3])> = (0..3)
            .map(|_| {
                let c = if is_mouth {
                    [
                        MOUTH_CENTER[0] + LIP_RADII[0] * rng.random_range(-1.0..1.0),
                        MOUTH_CENTER[1] + LIP_RADII[1] * rng.random_range(-1.0..1.0),
                    ]
                } else {
                    [rng.random_range(-0.9..0.9), rng.random_range(0.1..1.1)]
                };
                let amp: [f64; 3] = std::array::from_fn(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    0.03 * z
                });
                (c, amp)
            })
            .collect();
        let width: f64 = if is_mouth { 0.15 } else { 0.35 };
        for v in 0..n_v {
            let mask = if is_mouth {
                let d = ellipse_radius(v);
                if d <= 1.0 {
                    1.0
                } else {
                    (1.0 - (d - 1.0) / 1.5).max(0.0).powi(2)
                }
            } else {
                smoothstep((template[[v, 1]] + 0.25) / 0.25)
            };
            if mask == 0.0 {
                continue;
            }
            for (c, amp) in &centers {
                let dx = template[[v, 0]] - c[0];
                let dy = template[[v, 1]] - c[1];
                let rbf = (-(dx * dx + dy * dy) / (2.0 * width * width)).exp();
                for k in 0..3 {
                    basis[[3 * v + k, ch]] += mask * rbf * amp[k];
                }
            }
        }
    }

    let tpl = FaceTemplate {
        template,
        expr_basis: basis,
        jaw_weights,
        jaw_pivot: [0.0, -0.3, -0.9],
        faces,
        mouth_idx,
        lip_idx,
        upper_idx,
        upper_lip_mid,
        lower_lip_mid,
        mouth_channels,
        upper_channels,
    };
    tpl.validate()?;
    Ok(tpl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tpl() -> FaceTemplate {
        make_synthetic_template(3, 300, 16).unwrap()
    }

    fn apply(r: &Mat3, v: [f64; 3]) -> [f64; 3] {
        mat_vec3(r, &v)
    }

    /// Independent route: rotation matrix from a unit quaternion.
    fn quat_rotation(axis: [f64; 3], angle: f64) -> Mat3 {
        let (s, w) = (0.5 * angle).sin_cos();
        let (x, y, z) = (axis[0] * s, axis[1] * s, axis[2] * s);
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
            [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
            [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    #[test]
    fn zero_rotation_is_identity() {
        let r = rotation_from_axis_angle([0.0; 3]).unwrap();
        assert_eq!(r, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = rotation_from_axis_angle([0.0, 0.0, PI / 2.0]).unwrap();
        let v = apply(&r, [1.0, 0.0, 0.0]);
        for (a, b) in v.iter().zip([0.0, 1.0, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_axis_angle_rejected() {
        assert!(rotation_from_axis_angle([f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn trace_identity_and_quaternion_agreement() {
        let mut rng = seed::rng(11);
        for _ in 0..50 {
            let z: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            let n = norm3(&z);
            let axis = [z[0] / n, z[1] / n, z[2] / n];
            let theta = rng.random_range(0.0..3.0);
            let r = rotation_from_axis_angle([axis[0] * theta, axis[1] * theta, axis[2] * theta])
                .unwrap();
            let q = quat_rotation(axis, theta);
            let trace = r[0][0] + r[1][1] + r[2][2];
            let q_trace = q[0][0] + q[1][1] + q[2][2];
            assert!((trace - (1.0 + 2.0 * theta.cos())).abs() < 1e-10);
            assert!((trace - q_trace).abs() < 1e-10);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((r[i][j] - q[i][j]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn rotations_are_orthonormal() {
        let mut rng = seed::rng(12);
        for _ in 0..100 {
            let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.7..1.7));
            let r = rotation_from_axis_angle(v).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-10);
                }
            }
            let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
                - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
                + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
            assert!((det - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn rotation_jacobian_matches_finite_differences() {
        let h = 1e-6;
        for v in [[0.3, -0.2, 0.5], [1e-8, 0.0, -2e-8], [0.0; 3], [1.2, 0.4, -0.9], [4e-3, 1e-3, 0.0]]
        {
            let jac = rotation_jacobian(v);
            for c in 0..3 {
                let mut p = v;
                p[c] += h;
                let mut m = v;
                m[c] -= h;
                let rp = rotation_unchecked(&p);
                let rm = rotation_unchecked(&m);
                for i in 0..3 {
                    for j in 0..3 {
                        let fd = (rp[i][j] - rm[i][j]) / (2.0 * h);
                        assert!((fd - jac[c][i][j]).abs() < 1e-7, "{v:?} c={c}");
                    }
                }
            }
        }
    }

    #[test]
    fn zero_params_decode_to_template_bitwise() {
        let t = tpl();
        let v = decode(&t, &ExpressionParams::zeros(16)).unwrap();
        assert_eq!(v, t.template);
    }

    #[test]
    fn one_hot_psi_adds_basis_column() {
        let t = tpl();
        for k in [0, 5, 15] {
            let mut p = ExpressionParams::zeros(16);
            p.psi[k] = 1.0;
            let v = decode(&t, &p).unwrap();
            for i in 0..t.num_vertices() {
                for c in 0..3 {
                    let want = t.template[[i, c]] + t.expr_basis[[3 * i + c, k]];
                    assert!((v[[i, c]] - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn psi_length_mismatch_rejected() {
        let t = tpl();
        assert!(decode(&t, &ExpressionParams::zeros(15)).is_err());
        let bad = ExpressionSequence {
            frames: Mat::zeros((2, 18)),
        };
        assert!(decode_sequence(&t, &bad).is_err());
    }

    #[test]
    fn decode_sequence_matches_per_frame_decode() {
        let t = tpl();
        let mut rng = seed::rng(5);
        let mut frames = seed::standard_normal(&mut rng, 5, 19);
        frames.column_mut(16).mapv_inplace(|x| 0.2 * x);
        let seq = ExpressionSequence::new(frames.clone()).unwrap();
        let mesh = decode_sequence(&t, &seq).unwrap();
        assert_eq!(mesh.frames(), 5);
        for tt in 0..5 {
            let v = decode(&t, &ExpressionParams::from_row(frames.row(tt).as_slice().unwrap()))
                .unwrap();
            for i in 0..t.num_vertices() {
                assert_eq!(mesh.vertex(tt, i), [v[[i, 0]], v[[i, 1]], v[[i, 2]]]);
            }
        }
        let single = ExpressionSequence::new(frames.slice(ndarray::s![..1, ..]).to_owned()).unwrap();
        assert_eq!(decode_sequence(&t, &single).unwrap().frames(), 1);
        let constant = ExpressionSequence::new(
            Mat::from_shape_fn((4, 19), |(_, c)| frames[[0, c]]),
        )
        .unwrap();
        let m = decode_sequence(&t, &constant).unwrap();
        for tt in 1..4 {
            assert_eq!(m.vertices.row(tt), m.vertices.row(0));
        }
    }

    #[test]
    fn template_is_deterministic_and_structured() {
        let a = make_synthetic_template(9, 300, 16).unwrap();
        let b = make_synthetic_template(9, 300, 16).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mouth_idx.len(), 60);
        assert_eq!(a.lip_idx.len(), 20);
        assert!(a.upper_idx.len() >= 100, "{}", a.upper_idx.len());
        for &i in &a.upper_idx {
            assert!(a.jaw_weights[i] < 0.05, "vertex {i} y={} w={}", a.template[[i, 1]], a.jaw_weights[i]);
        }
        assert!(a.jaw_weights[a.lower_lip_mid] > 0.8);
        assert!(a.jaw_weights[a.upper_lip_mid] < 0.05);
        for &ch in &a.mouth_channels {
            let norm = |idx: &[usize]| {
                idx.iter()
                    .flat_map(|&i| (0..3).map(move |c| 3 * i + c))
                    .map(|r| a.expr_basis[[r, ch]].powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            assert!(norm(&a.upper_idx) < 0.01 * norm(&a.mouth_idx));
        }
    }

    #[test]
    fn template_rejects_small_sizes() {
        assert!(make_synthetic_template(0, 49, 16).is_err());
        assert!(make_synthetic_template(0, 300, 7).is_err());
        assert!(make_synthetic_template(0, 50, 8).is_ok());
    }

    fn jacobian_check(t: &FaceTemplate, frame: &[f64]) {
        let all: Rc<[usize]> = (0..t.num_vertices()).collect();
        let x = Mat::from_shape_vec((1, frame.len()), frame.to_vec()).unwrap();
        let n_out = 3 * t.num_vertices();
        let h = 1e-6;
        let rc = Rc::new(t.clone());
        // Analytic Jacobian column by column through the graph.
        for o in (0..n_out).step_by(37) {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let v = decode_var(&mut g, &rc, xv, Rc::clone(&all));
            let sel = g.gather_cols(v, Rc::from(vec![o]));
            let s = g.sum(sel);
            let grads = g.backward(s);
            let an = grads.get(xv).unwrap();
            for k in 0..frame.len() {
                let mut p = x.clone();
                p[[0, k]] += h;
                let mut m = x.clone();
                m[[0, k]] -= h;
                let fd = (decode_rows(t, &p, &all)[[0, o]] - decode_rows(t, &m, &all)[[0, o]])
                    / (2.0 * h);
                let a = an[[0, k]];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-5 || (a - fd).abs() < 1e-9, "out {o} param {k}: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn decode_jacobian_matches_finite_differences() {
        let t = make_synthetic_template(4, 60, 8).unwrap();
        let mut rng = seed::rng(77);
        for _ in 0..10 {
            let frame: Vec<f64> = (0..11)
                .map(|k| if k < 8 { rng.random_range(-1.0..1.0) } else { rng.random_range(-0.5..0.5) })
                .collect();
            jacobian_check(&t, &frame);
        }
        let mut zero = vec![0.0; 11];
        jacobian_check(&t, &zero);
        zero[8] = 1e-9;
        jacobian_check(&t, &zero);
    }

    proptest! {
        #[test]
        fn blendshape_term_is_linear(a in prop::collection::vec(-2.0f64..2.0, 16),
                                     b in prop::collection::vec(-2.0f64..2.0, 16)) {
            let t = tpl();
            let dec = |psi: Vec<f64>| {
                decode(&t, &ExpressionParams { psi, jaw: [0.0; 3] }).unwrap() - &t.template
            };
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let lhs = dec(sum);
            let rhs = dec(a) + dec(b);
            for (l, r) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((l - r).abs() < 1e-12);
            }
        }
    }
}
