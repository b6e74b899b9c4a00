//! Rotation algebra, covariance construction and the real spherical-harmonics
//! basis used throughout the pipeline.
//!
//! Every forward routine that sits on the training path has a matching
//! `*_backward` that maps an upstream gradient to its inputs.

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};

/// Rotation quaternion stored as `(w, x, y, z)`.
///
/// Learnable quaternions are kept unnormalized and normalized on use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quat {
    fn default() -> Self {
        Self::identity()
    }
}

impl Quat {
    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub const fn identity() -> Self {
        Self::new(1.0, 0.0, 0.0, 0.0)
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self::new(s[0], s[1], s[2], s[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::identity();
        }
        let a = axis / n;
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, a.x * s, a.y * s, a.z * s)
    }

    /// Rotation vector (axis scaled by angle) to quaternion.
    pub fn from_rotation_vector(v: Vector3<f64>) -> Self {
        Self::from_axis_angle(v, v.norm())
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalize(self) -> Result<Self> {
        let n = self.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::ZeroQuaternion);
        }
        Ok(Self::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    pub fn conj(self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn scale(self, k: f64) -> Self {
        Self::new(self.w * k, self.x * k, self.y * k, self.z * k)
    }

    pub fn dot(self, o: Self) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn is_finite(self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

impl std::ops::Add for Quat {
    type Output = Quat;

    fn add(self, o: Self) -> Self {
        Self::new(self.w + o.w, self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::AddAssign for Quat {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Hamilton product `a * b`; `R(a * b) = R(a) R(b)`.
pub fn quat_mul(a: Quat, b: Quat) -> Quat {
    Quat::new(
        a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
        a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
        a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
    )
}

/// Gradients of `quat_mul(a, b)` with respect to `a` and `b`.
pub fn quat_mul_backward(a: Quat, b: Quat, grad: Quat) -> (Quat, Quat) {
    (quat_mul(grad, b.conj()), quat_mul(a.conj(), grad))
}

/// Normalizes `q`; zero-norm input is an error.
pub fn quat_to_rotmat(q: Quat) -> Result<Matrix3<f64>> {
    Ok(unit_quat_to_rotmat(q.normalize()?))
}

/// Rotation matrix of an already-normalized quaternion.
pub fn unit_quat_to_rotmat(q: Quat) -> Matrix3<f64> {
    let Quat { w, x, y, z } = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Gradient of [`unit_quat_to_rotmat`] with respect to the quaternion
/// components (treated as free variables).
pub fn unit_quat_to_rotmat_backward(q: Quat, g: &Matrix3<f64>) -> Quat {
    let Quat { w, x, y, z } = q;
    let dw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    Quat::new(dw, dx, dy, dz)
}

/// Backward of `q / |q|`: maps a gradient on the unit quaternion to the raw one.
pub fn quat_normalize_backward(raw: Quat, grad_unit: Quat) -> Quat {
    let n = raw.norm();
    let u = raw.scale(1.0 / n);
    let d = u.dot(grad_unit);
    (grad_unit + u.scale(-d)).scale(1.0 / n)
}

/// Backward of `v / |v|` for 3-vectors.
pub fn normalize3_backward(raw: &Vector3<f64>, grad_unit: &Vector3<f64>) -> Vector3<f64> {
    let n = raw.norm();
    let u = raw / n;
    (grad_unit - u * u.dot(grad_unit)) / n
}

/// 4x4 homogeneous transform `[M | t]`. Built from a quaternion the linear
/// block is orthonormal; skinning blends of several transforms generally are
/// not, and are kept as-is.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub linear: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            linear: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(linear: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            linear,
            translation,
        }
    }

    pub fn from_quat(q: Quat, translation: Vector3<f64>) -> Result<Self> {
        Ok(Self::new(quat_to_rotmat(q)?, translation))
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.linear);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `self * other` as homogeneous matrices.
    pub fn compose(&self, other: &Self) -> Self {
        Self::new(
            self.linear * other.linear,
            self.linear * other.translation + self.translation,
        )
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.linear * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.linear * v
    }

    /// Inverse assuming an orthonormal linear block.
    pub fn rigid_inverse(&self) -> Self {
        let rt = self.linear.transpose();
        Self::new(rt, -(rt * self.translation))
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self::new(self.linear * k, self.translation * k)
    }

    pub fn add(&self, o: &Self) -> Self {
        Self::new(self.linear + o.linear, self.translation + o.translation)
    }
}

/// Symmetric 3x3 covariance `R S S^T R^T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance3(pub Matrix3<f64>);

impl Covariance3 {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }
}

/// Covariance from a positive scale vector and a (possibly unnormalized) quaternion.
pub fn build_covariance(scale: Vector3<f64>, q: Quat) -> Result<Covariance3> {
    if scale.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::NonPositiveScale([scale.x, scale.y, scale.z]));
    }
    let r = quat_to_rotmat(q)?;
    Ok(Covariance3(covariance_from_linear(&r, &scale)))
}

/// `M diag(s^2) M^T` for an arbitrary linear block `M`.
pub fn covariance_from_linear(m: &Matrix3<f64>, scale: &Vector3<f64>) -> Matrix3<f64> {
    let ms = m * Matrix3::from_diagonal(scale);
    ms * ms.transpose()
}

/// Backward of [`covariance_from_linear`]; returns `(dL/dM, dL/ds)`.
pub fn covariance_from_linear_backward(
    m: &Matrix3<f64>,
    scale: &Vector3<f64>,
    grad: &Matrix3<f64>,
) -> (Matrix3<f64>, Vector3<f64>) {
    let ms = m * Matrix3::from_diagonal(scale);
    let d_ms = (grad + grad.transpose()) * ms;
    let mut d_m = d_ms;
    let mut d_s = Vector3::zeros();
    for j in 0..3 {
        for i in 0..3 {
            d_m[(i, j)] = d_ms[(i, j)] * scale[j];
            d_s[j] += d_ms[(i, j)] * m[(i, j)];
        }
    }
    (d_m, d_s)
}

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Number of SH coefficients for `degree`.
pub const fn sh_len(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Real spherical harmonics up to `degree` (at most 3) evaluated at `dir`.
pub fn sh_basis(dir: &Vector3<f64>, degree: usize) -> Result<Vec<f64>> {
    if degree > 3 {
        return Err(Error::UnsupportedShDegree(degree));
    }
    let (vals, _) = sh_basis_with_grad(dir);
    Ok(vals[..sh_len(degree)].to_vec())
}

/// Degree-3 basis and its Jacobian with respect to the (unnormalized)
/// components of `dir`.
pub fn sh_basis_with_grad(dir: &Vector3<f64>) -> ([f64; 16], [[f64; 3]; 16]) {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    let c2 = SH_C2;
    let c3 = SH_C3;
    let v = [
        SH_C0,
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        c2[0] * xy,
        c2[1] * yz,
        c2[2] * (2.0 * zz - xx - yy),
        c2[3] * xz,
        c2[4] * (xx - yy),
        c3[0] * y * (3.0 * xx - yy),
        c3[1] * xy * z,
        c3[2] * y * (4.0 * zz - xx - yy),
        c3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        c3[4] * x * (4.0 * zz - xx - yy),
        c3[5] * z * (xx - yy),
        c3[6] * x * (xx - 3.0 * yy),
    ];
    let g = [
        [0.0, 0.0, 0.0],
        [0.0, -SH_C1, 0.0],
        [0.0, 0.0, SH_C1],
        [-SH_C1, 0.0, 0.0],
        [c2[0] * y, c2[0] * x, 0.0],
        [0.0, c2[1] * z, c2[1] * y],
        [-2.0 * c2[2] * x, -2.0 * c2[2] * y, 4.0 * c2[2] * z],
        [c2[3] * z, 0.0, c2[3] * x],
        [2.0 * c2[4] * x, -2.0 * c2[4] * y, 0.0],
        [c3[0] * 6.0 * xy, c3[0] * (3.0 * xx - 3.0 * yy), 0.0],
        [c3[1] * yz, c3[1] * xz, c3[1] * xy],
        [
            c3[2] * -2.0 * xy,
            c3[2] * (4.0 * zz - xx - 3.0 * yy),
            c3[2] * 8.0 * yz,
        ],
        [
            c3[3] * -6.0 * xz,
            c3[3] * -6.0 * yz,
            c3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
        ],
        [
            c3[4] * (4.0 * zz - 3.0 * xx - yy),
            c3[4] * -2.0 * xy,
            c3[4] * 8.0 * xz,
        ],
        [c3[5] * 2.0 * xz, c3[5] * -2.0 * yz, c3[5] * (xx - yy)],
        [c3[6] * (3.0 * xx - 3.0 * yy), c3[6] * -6.0 * xy, 0.0],
    ];
    (v, g)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn vec3(s: &[f64]) -> Vector3<f64> {
    Vector3::new(s[0], s[1], s[2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_quat(rng: &mut impl Rng) -> Quat {
        Quat::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
    }

    #[test]
    fn identity_quat_is_identity_matrix() {
        assert_eq!(
            quat_to_rotmat(Quat::identity()).unwrap(),
            Matrix3::identity()
        );
    }

    #[test]
    fn quarter_turn_about_z() {
        let h = 0.5f64.sqrt();
        let r = quat_to_rotmat(Quat::new(h, 0.0, 0.0, h)).unwrap();
        let v = r * Vector3::x();
        assert_relative_eq!(v, Vector3::y(), epsilon = 1e-12);
    }

    #[test]
    fn zero_quat_rejected() {
        assert!(matches!(
            quat_to_rotmat(Quat::new(0.0, 0.0, 0.0, 0.0)),
            Err(Error::ZeroQuaternion)
        ));
    }

    #[test]
    fn random_rotations_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let r = quat_to_rotmat(random_quat(&mut rng)).unwrap();
            assert!((r * r.transpose() - Matrix3::identity()).abs().max() < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn quat_mul_identity_and_composition() {
        let h = 0.5f64.sqrt();
        let a = Quat::new(h, 0.0, 0.0, h);
        assert_eq!(quat_mul(a, Quat::identity()), a);
        let r = quat_to_rotmat(quat_mul(a, a)).unwrap();
        let v = r * Vector3::x();
        assert_relative_eq!(v, -Vector3::x(), epsilon = 1e-12);
    }

    #[test]
    fn quat_mul_is_matrix_homomorphism() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let a = random_quat(&mut rng).normalize().unwrap();
            let b = random_quat(&mut rng).normalize().unwrap();
            let lhs = quat_to_rotmat(quat_mul(a, b)).unwrap();
            let rhs = quat_to_rotmat(a).unwrap() * quat_to_rotmat(b).unwrap();
            assert!((lhs - rhs).abs().max() < 1e-10);
        }
    }

    #[test]
    fn covariance_examples() {
        let c = build_covariance(Vector3::new(1.0, 1.0, 1.0), Quat::identity()).unwrap();
        assert_eq!(c.0, Matrix3::identity());
        let c = build_covariance(Vector3::new(2.0, 1.0, 1.0), Quat::identity()).unwrap();
        assert_eq!(c.0, Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)));
        assert!(matches!(
            build_covariance(Vector3::new(1.0, 0.0, 1.0), Quat::identity()),
            Err(Error::NonPositiveScale(_))
        ));
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let s = Vector3::new(
                rng.random_range(0.1..3.0),
                rng.random_range(0.1..3.0),
                rng.random_range(0.1..3.0),
            );
            let c = build_covariance(s, random_quat(&mut rng)).unwrap();
            assert!((c.0 - c.0.transpose()).abs().max() < 1e-12);
            let mut eig: Vec<f64> = c.0.symmetric_eigenvalues().iter().copied().collect();
            let mut want: Vec<f64> = s.iter().map(|v| v * v).collect();
            eig.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&want) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
                assert!(*a >= -1e-12);
            }
        }
    }

    #[test]
    fn frobenius_difference_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let sa = Vector3::new(0.3, 1.1, 0.7);
            let sb = Vector3::new(2.0, 0.2, 0.9);
            let a = build_covariance(sa, random_quat(&mut rng)).unwrap().0;
            let b = build_covariance(sb, random_quat(&mut rng)).unwrap().0;
            let r = quat_to_rotmat(random_quat(&mut rng)).unwrap();
            let lhs = (r * (a - b) * r.transpose()).norm();
            assert!((lhs - (a - b).norm()).abs() < 1e-9);
        }
    }

    #[test]
    fn rotmat_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_quat(&mut rng);
        let g = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let loss = |q: Quat| unit_quat_to_rotmat(q).component_mul(&g).sum();
        let an = unit_quat_to_rotmat_backward(q, &g).to_array();
        for k in 0..4 {
            let mut p = q.to_array();
            let mut m = q.to_array();
            p[k] += 1e-6;
            m[k] -= 1e-6;
            let fd = (loss(Quat::from_array(p)) - loss(Quat::from_array(m))) / 2e-6;
            assert!((fd - an[k]).abs() < 1e-7, "{k}: {fd} vs {}", an[k]);
        }
    }

    #[test]
    fn sh_constant_band_and_unit_z() {
        let d = Vector3::new(0.3, -0.4, 0.5).normalize();
        let b0 = sh_basis(&d, 0).unwrap();
        assert_eq!(b0.len(), 1);
        assert!((b0[0] - 0.282_094_791_77).abs() < 1e-11);
        let b = sh_basis(&Vector3::z(), 1).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(&b[1..], &[0.0, SH_C1, 0.0]);
        assert_eq!(sh_basis(&d, 3).unwrap().len(), 16);
        assert!(matches!(
            sh_basis(&d, 4),
            Err(Error::UnsupportedShDegree(4))
        ));
    }

    #[test]
    fn sh_jacobian_matches_finite_differences() {
        let d = Vector3::new(0.3, -0.7, 0.5);
        let (_, g) = sh_basis_with_grad(&d);
        for k in 0..3 {
            let mut p = d;
            let mut m = d;
            p[k] += 1e-6;
            m[k] -= 1e-6;
            let (vp, _) = sh_basis_with_grad(&p);
            let (vm, _) = sh_basis_with_grad(&m);
            for i in 0..16 {
                let fd = (vp[i] - vm[i]) / 2e-6;
                assert!((fd - g[i][k]).abs() < 1e-8, "coef {i} axis {k}");
            }
        }
    }

    #[test]
    fn sh_monte_carlo_orthonormality() {
        // Uniform sphere samples; E[Y_i Y_j] * 4pi ~ delta_ij.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 1_000_000;
        let mut gram = [[0.0f64; 16]; 16];
        for _ in 0..n {
            let z: f64 = rng.random_range(-1.0..1.0);
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let r = (1.0 - z * z).sqrt();
            let d = Vector3::new(r * phi.cos(), r * phi.sin(), z);
            let (v, _) = sh_basis_with_grad(&d);
            for i in 0..16 {
                for j in i..16 {
                    gram[i][j] += v[i] * v[j];
                }
            }
        }
        let w = 4.0 * std::f64::consts::PI / n as f64;
        for i in 0..16 {
            for j in i..16 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[i][j] * w - want).abs() < 1e-2, "({i},{j})");
            }
        }
    }

    #[test]
    fn rigid_transform_compose_matches_homogeneous_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a =
            RigidTransform::from_quat(random_quat(&mut rng), Vector3::new(1.0, 2.0, 3.0)).unwrap();
        let b =
            RigidTransform::from_quat(random_quat(&mut rng), Vector3::new(-1.0, 0.5, 0.0)).unwrap();
        let lhs = a.compose(&b).to_homogeneous();
        let rhs = a.to_homogeneous() * b.to_homogeneous();
        assert!((lhs - rhs).abs().max() < 1e-12);
        assert_eq!(lhs.row(3), Matrix4::<f64>::identity().row(3));
        let inv = a.rigid_inverse().compose(&a);
        assert!((inv.to_homogeneous() - Matrix4::identity()).abs().max() < 1e-12);
    }
}
