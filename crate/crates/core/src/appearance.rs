//! Per-gaussian color: canonicalized view direction, SH encoding, a tiny
//! MLP and per-frame latent codes.

use nalgebra::{Matrix3, Rotation3, Vector3};
use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::geometry::{normalize3_backward, sh_basis_with_grad};
use crate::nn::{Activation, Mlp, MlpCache, OutputInit};
use crate::params::{ParamClass, ParamId, ParamStore};

pub const SH_DIM: usize = 16;
pub const LATENT_DIM: usize = 16;
const COLOR_PREFIX: &str = "color";
const LATENT_NAME: &str = "frame_latents";

/// Input layout of the color network: `f | z | Z_c | SH(d)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColorLayout {
    pub feature: usize,
    pub local: usize,
    pub latent: usize,
}

impl ColorLayout {
    pub fn input_dim(&self) -> usize {
        self.feature + self.local + self.latent + SH_DIM
    }

    pub fn local_offset(&self) -> usize {
        self.feature
    }

    pub fn latent_offset(&self) -> usize {
        self.feature + self.local
    }

    pub fn sh_offset(&self) -> usize {
        self.feature + self.local + self.latent
    }
}

#[derive(Debug, Clone)]
pub struct ColorMlp {
    pub layout: ColorLayout,
    pub mlp: Mlp,
}

impl ColorMlp {
    fn sizes(layout: &ColorLayout, hidden: usize) -> [usize; 3] {
        [layout.input_dim(), hidden, 3]
    }

    pub fn new(
        store: &mut ParamStore,
        layout: ColorLayout,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mlp = Mlp::new(
            store,
            COLOR_PREFIX,
            ParamClass::Color,
            &Self::sizes(&layout, hidden),
            Activation::Relu,
            Activation::Sigmoid,
            OutputInit::Scaled(1.0),
            rng,
        );
        Self { layout, mlp }
    }

    pub fn attach(store: &ParamStore, layout: ColorLayout, hidden: usize) -> Option<Self> {
        let mlp = Mlp::attach(
            store,
            COLOR_PREFIX,
            &Self::sizes(&layout, hidden),
            Activation::Relu,
            Activation::Sigmoid,
        )?;
        Some(Self { layout, mlp })
    }

    /// Rows are assembled inputs (see [`ColorLayout`]); output is `n x 3` RGB.
    pub fn forward(&self, store: &ParamStore, inputs: ArrayView2<f64>) -> MlpCache {
        self.mlp.forward(store, inputs)
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &MlpCache,
        grad_rgb: ArrayView2<f64>,
    ) -> Array2<f64> {
        self.mlp.backward(store, cache, grad_rgb)
    }

    /// Single evaluation `c = F(f, z, Z_c, SH(d))`.
    pub fn decode(
        &self,
        store: &ParamStore,
        f: &[f64],
        z: &[f64],
        latent: &[f64],
        dir: &Vector3<f64>,
    ) -> [f64; 3] {
        let row = self.assemble(f, z, latent, dir);
        let x = Array2::from_shape_vec((1, row.len()), row).expect("row shape");
        let out = self.forward(store, x.view());
        let o = out.output();
        [o[(0, 0)], o[(0, 1)], o[(0, 2)]]
    }

    pub fn assemble(&self, f: &[f64], z: &[f64], latent: &[f64], dir: &Vector3<f64>) -> Vec<f64> {
        let (sh, _) = sh_basis_with_grad(dir);
        let mut row = Vec::with_capacity(self.layout.input_dim());
        row.extend_from_slice(f);
        row.extend_from_slice(z);
        row.extend_from_slice(latent);
        row.extend_from_slice(&sh);
        debug_assert_eq!(row.len(), self.layout.input_dim());
        row
    }
}

/// Table of per-training-frame appearance codes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameLatents {
    pub id: ParamId,
    pub frames: usize,
    pub dim: usize,
}

impl FrameLatents {
    pub fn new(store: &mut ParamStore, frames: usize, dim: usize) -> Self {
        let id = store.register(
            LATENT_NAME,
            ParamClass::FrameLatent,
            vec![0.0; frames.max(1) * dim],
            dim,
        );
        Self {
            id,
            frames: frames.max(1),
            dim,
        }
    }

    pub fn attach(store: &ParamStore, dim: usize) -> Option<Self> {
        let id = store.find(LATENT_NAME)?;
        Some(Self {
            id,
            frames: store.value(id).len() / dim,
            dim,
        })
    }

    /// Row used for a frame; unseen frames use the last training code.
    pub fn row_for(&self, frame: Option<usize>) -> usize {
        match frame {
            Some(f) if f < self.frames => f,
            _ => self.frames - 1,
        }
    }

    pub fn code<'a>(&self, store: &'a ParamStore, frame: Option<usize>) -> &'a [f64] {
        let r = self.row_for(frame);
        &store.value(self.id)[r * self.dim..(r + 1) * self.dim]
    }

    pub fn accumulate(&self, store: &mut ParamStore, frame: Option<usize>, grad: &[f64]) {
        let r = self.row_for(frame);
        let g = &mut store.grad_mut(self.id)[r * self.dim..(r + 1) * self.dim];
        for (d, s) in g.iter_mut().zip(grad) {
            *d += s;
        }
    }
}

/// Result of mapping an observation-space view direction back to canonical space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanonicalViewDir {
    pub dir: Vector3<f64>,
    /// `A^{-1} d` before normalization.
    raw: Vector3<f64>,
    /// `None` when the linear block was singular and `d` was passed through.
    inverse: Option<Matrix3<f64>>,
}

impl CanonicalViewDir {
    pub fn is_fallback(&self) -> bool {
        self.inverse.is_none()
    }

    /// Returns `(dL/dd, dL/dA)` given `dL/d(dir)`.
    pub fn backward(&self, grad_dir: &Vector3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
        match &self.inverse {
            Some(inv) => {
                let dy = normalize3_backward(&self.raw, grad_dir);
                let dd = inv.transpose() * dy;
                (dd, -(dd * self.raw.transpose()))
            }
            None => (normalize3_backward(&self.raw, grad_dir), Matrix3::zeros()),
        }
    }
}

pub const SINGULAR_DET: f64 = 1e-9;

/// `normalize(A^{-1} d)`; if `|det A| < 1e-9` falls back to `normalize(d)`.
pub fn canonicalize_viewdir(d: &Vector3<f64>, linear: &Matrix3<f64>) -> CanonicalViewDir {
    let inverse = if linear.determinant().abs() < SINGULAR_DET {
        None
    } else {
        linear.try_inverse()
    };
    let raw = match &inverse {
        Some(inv) => inv * d,
        None => *d,
    };
    CanonicalViewDir {
        dir: raw.normalize(),
        raw,
        inverse,
    }
}

/// Random rotation `Rz(yaw) Ry(pitch) Rx(roll)` with each angle in `[0, max_deg)`.
pub fn random_view_rotation(rng: &mut impl Rng, max_deg: f64) -> Matrix3<f64> {
    if max_deg <= 0.0 {
        return Matrix3::identity();
    }
    let mut angle = || rng.random_range(0.0..max_deg).to_radians();
    let (roll, pitch, yaw) = (angle(), angle(), angle());
    *Rotation3::from_euler_angles(roll, pitch, yaw).matrix()
}

pub fn viewdir_augment(d: &Vector3<f64>, rng: &mut impl Rng, max_deg: f64) -> Vector3<f64> {
    random_view_rotation(rng, max_deg) * d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Quat;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout() -> ColorLayout {
        ColorLayout {
            feature: 32,
            local: 16,
            latent: 16,
        }
    }

    fn rand_dir(rng: &mut impl Rng) -> Vector3<f64> {
        Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize()
    }

    #[test]
    fn layout_is_eighty_wide() {
        assert_eq!(layout().input_dim(), 80);
    }

    #[test]
    fn zero_weights_give_sigmoid_of_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let c = ColorMlp::new(&mut store, layout(), 64, &mut rng);
        for id in c.mlp.param_ids() {
            store.value_mut(id).iter_mut().for_each(|v| *v = 0.0);
        }
        let last = c.mlp.layers[1].bias;
        store.value_mut(last).copy_from_slice(&[0.3, -1.0, 2.0]);
        let rgb = c.decode(&store, &[0.0; 32], &[0.0; 16], &[0.0; 16], &Vector3::z());
        for (got, b) in rgb.iter().zip([0.3_f64, -1.0, 2.0]) {
            assert!((got - 1.0 / (1.0 + (-b).exp())).abs() < 1e-15);
        }
    }

    #[test]
    fn latent_changes_color() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let c = ColorMlp::new(&mut store, layout(), 64, &mut rng);
        let f: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z = vec![0.1; 16];
        let a = c.decode(&store, &f, &z, &[0.0; 16], &Vector3::x());
        let b = c.decode(&store, &f, &z, &[0.5; 16], &Vector3::x());
        assert!(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() > 1e-6);
        assert!(a.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn color_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let c = ColorMlp::new(&mut store, layout(), 64, &mut rng);
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let f: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
                let z: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
                let l: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
                c.assemble(&f, &z, &l, &rand_dir(&mut rng))
            })
            .collect();
        let x = Array2::from_shape_fn((4, 80), |(i, j)| rows[i][j]);
        let r = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let loss = |s: &ParamStore| (c.forward(s, x.view()).output() * &r).sum();
        let cache = c.forward(&store, x.view());
        c.backward(&mut store, &cache, r.view());
        for id in c.mlp.param_ids() {
            for k in (0..store.value(id).len()).step_by(97) {
                let orig = store.value(id)[k];
                store.value_mut(id)[k] = orig + 1e-6;
                let lp = loss(&store);
                store.value_mut(id)[k] = orig - 1e-6;
                let lm = loss(&store);
                store.value_mut(id)[k] = orig;
                let fd = (lp - lm) / 2e-6;
                let an = store.grad(id)[k];
                assert!(
                    (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-6),
                    "{fd} {an}"
                );
            }
        }
    }

    #[test]
    fn canonicalize_identity_and_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = rand_dir(&mut rng);
        assert!((canonicalize_viewdir(&d, &Matrix3::identity()).dir - d).norm() < 1e-15);
        let r = crate::geometry::unit_quat_to_rotmat(
            Quat::new(0.8, 0.1, -0.3, 0.2).normalize().unwrap(),
        );
        let got = canonicalize_viewdir(&d, &r).dir;
        assert!((got - r.transpose() * d).norm() < 1e-12);
    }

    #[test]
    fn canonicalize_blended_matches_inverse_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let a = Matrix3::from_fn(
                |i, j| if i == j { 1.0 } else { 0.0 } + rng.random_range(-0.3..0.3),
            );
            let d = rand_dir(&mut rng);
            let oracle = a.lu().solve(&d).unwrap().normalize();
            assert!((canonicalize_viewdir(&d, &a).dir - oracle).norm() < 1e-10);
        }
    }

    #[test]
    fn singular_block_falls_back() {
        let d = Vector3::new(0.0, 0.6, 0.8);
        let c = canonicalize_viewdir(&d, &Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0)));
        assert!(c.is_fallback());
        assert_eq!(c.dir, d);
    }

    #[test]
    fn canonicalize_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a =
            Matrix3::from_fn(|i, j| if i == j { 1.0 } else { 0.0 } + rng.random_range(-0.3..0.3));
        let d = Vector3::new(0.3, -0.4, 0.5);
        let g = Vector3::new(0.7, 0.1, -0.9);
        let f = |d: &Vector3<f64>, a: &Matrix3<f64>| canonicalize_viewdir(d, a).dir.dot(&g);
        let (dd, da) = canonicalize_viewdir(&d, &a).backward(&g);
        for k in 0..3 {
            let mut p = d;
            p[k] += 1e-7;
            let mut m = d;
            m[k] -= 1e-7;
            assert!(((f(&p, &a) - f(&m, &a)) / 2e-7 - dd[k]).abs() < 1e-7);
        }
        for i in 0..3 {
            for j in 0..3 {
                let mut p = a;
                p[(i, j)] += 1e-7;
                let mut m = a;
                m[(i, j)] -= 1e-7;
                assert!(((f(&d, &p) - f(&d, &m)) / 2e-7 - da[(i, j)]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn rigid_motion_leaves_color_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let c = ColorMlp::new(&mut store, layout(), 64, &mut rng);
        let f: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d = rand_dir(&mut rng);
        let r = crate::geometry::unit_quat_to_rotmat(
            Quat::new(0.5, 0.5, -0.1, 0.7).normalize().unwrap(),
        );
        let base = c.decode(
            &store,
            &f,
            &[0.0; 16],
            &[0.0; 16],
            &canonicalize_viewdir(&d, &Matrix3::identity()).dir,
        );
        let moved = c.decode(
            &store,
            &f,
            &[0.0; 16],
            &[0.0; 16],
            &canonicalize_viewdir(&(r * d), &r).dir,
        );
        for k in 0..3 {
            assert!((base[k] - moved[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn augmentation_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = rand_dir(&mut rng);
        assert_eq!(viewdir_augment(&d, &mut rng, 0.0), d);
        let mut max_angle: f64 = 0.0;
        for _ in 0..10_000 {
            let o = viewdir_augment(&d, &mut rng, 45.0);
            assert!((o.norm() - 1.0).abs() < 1e-12);
            max_angle = max_angle.max(o.dot(&d).clamp(-1.0, 1.0).acos().to_degrees());
        }
        // Three rotations of at most 45 degrees compose to at most 135.
        assert!(max_angle < 135.0 && max_angle > 10.0);
    }

    #[test]
    fn unseen_frames_use_last_code() {
        let mut store = ParamStore::new();
        let l = FrameLatents::new(&mut store, 3, 16);
        store.value_mut(l.id)[32] = 5.0;
        assert_eq!(l.code(&store, None)[0], 5.0);
        assert_eq!(l.code(&store, Some(99))[0], 5.0);
        assert_eq!(l.code(&store, Some(0))[0], 0.0);
    }
}
