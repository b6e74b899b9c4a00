//! Flat registry of every learnable tensor, its gradient slot and Adam state.

use std::collections::HashMap;

/// Coarse grouping used for learning rates, stage gates and gradient audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamClass {
    GaussianPosition,
    GaussianScale,
    GaussianRotation,
    GaussianOpacity,
    GaussianFeature,
    Skinning,
    NonRigid,
    HashGrid,
    Color,
    FrameLatent,
    Pose,
}

impl ParamClass {
    pub const ALL: [ParamClass; 11] = [
        ParamClass::GaussianPosition,
        ParamClass::GaussianScale,
        ParamClass::GaussianRotation,
        ParamClass::GaussianOpacity,
        ParamClass::GaussianFeature,
        ParamClass::Skinning,
        ParamClass::NonRigid,
        ParamClass::HashGrid,
        ParamClass::Color,
        ParamClass::FrameLatent,
        ParamClass::Pose,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamClass::GaussianPosition => "gaussian.position",
            ParamClass::GaussianScale => "gaussian.log_scale",
            ParamClass::GaussianRotation => "gaussian.rotation",
            ParamClass::GaussianOpacity => "gaussian.opacity_logit",
            ParamClass::GaussianFeature => "gaussian.feature",
            ParamClass::Skinning => "skinning_mlp",
            ParamClass::NonRigid => "nonrigid_mlp",
            ParamClass::HashGrid => "hash_tables",
            ParamClass::Color => "color_mlp",
            ParamClass::FrameLatent => "frame_latents",
            ParamClass::Pose => "pose",
        }
    }

    pub fn is_gaussian(self) -> bool {
        matches!(
            self,
            ParamClass::GaussianPosition
                | ParamClass::GaussianScale
                | ParamClass::GaussianRotation
                | ParamClass::GaussianOpacity
                | ParamClass::GaussianFeature
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub class: ParamClass,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    /// Row width for per-gaussian tensors (0 = not row-structured).
    pub row_width: usize,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Param {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.value.len().checked_div(self.row_width).unwrap_or(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// Per-parameter update settings for one Adam step. `None` freezes the tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSettings {
    pub lr: f64,
    /// Decoupled decay: `p -= lr * weight_decay * p`.
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        class: ParamClass,
        value: Vec<f64>,
        row_width: usize,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "parameter `{name}` registered twice"
        );
        let id = ParamId(self.params.len());
        let n = value.len();
        self.params.push(Param {
            name: name.clone(),
            class,
            value,
            grad: vec![0.0; n],
            row_width,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        });
        self.by_name.insert(name, id);
        id
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].grad
    }

    pub fn accumulate(&mut self, id: ParamId, g: &[f64]) {
        let dst = &mut self.params[id.0].grad;
        debug_assert_eq!(dst.len(), g.len(), "{}", self.params[id.0].name);
        for (d, s) in dst.iter_mut().zip(g) {
            *d += s;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn classes(&self) -> Vec<ParamClass> {
        let mut c: Vec<_> = self.params.iter().map(|p| p.class).collect();
        c.sort();
        c.dedup();
        c
    }

    /// One Adam step over every tensor for which `settings` yields `Some`.
    ///
    /// Entries whose gradient and both moments are exactly zero are skipped;
    /// for them the update is the identity anyway.
    pub fn adam_step(
        &mut self,
        cfg: &AdamConfig,
        mut settings: impl FnMut(&Param) -> Option<StepSettings>,
    ) {
        for p in &mut self.params {
            let Some(s) = settings(p) else { continue };
            p.step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(p.step as i32);
            let bc2 = 1.0 - cfg.beta2.powi(p.step as i32);
            let step_size = s.lr / bc1;
            let bc2_sqrt = bc2.sqrt();
            let decay = s.lr * s.weight_decay;
            for i in 0..p.value.len() {
                let g = p.grad[i];
                if s.weight_decay != 0.0 {
                    p.value[i] -= decay * p.value[i];
                }
                if g == 0.0 && p.m[i] == 0.0 && p.v[i] == 0.0 {
                    continue;
                }
                let m = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
                p.m[i] = m;
                p.v[i] = v;
                p.value[i] -= step_size * m / (v.sqrt() / bc2_sqrt + cfg.eps);
            }
        }
    }

    /// Keeps only the rows of row-structured tensor `id` where `keep` is true.
    pub fn retain_rows(&mut self, id: ParamId, keep: &[bool]) {
        let p = &mut self.params[id.0];
        let w = p.row_width;
        assert!(w > 0 && keep.len() * w == p.value.len());
        for buf in [&mut p.value, &mut p.grad, &mut p.m, &mut p.v] {
            let mut out = Vec::with_capacity(buf.len());
            for (r, k) in keep.iter().enumerate() {
                if *k {
                    out.extend_from_slice(&buf[r * w..(r + 1) * w]);
                }
            }
            *buf = out;
        }
    }

    /// Appends rows (with zeroed gradient and moments) to tensor `id`.
    pub fn append_rows(&mut self, id: ParamId, rows: &[f64]) {
        let p = &mut self.params[id.0];
        assert!(p.row_width > 0 && rows.len().is_multiple_of(p.row_width));
        p.value.extend_from_slice(rows);
        let n = p.value.len();
        p.grad.resize(n, 0.0);
        p.m.resize(n, 0.0);
        p.v.resize(n, 0.0);
    }

    /// Replaces the value of `id` wholesale; resets its optimizer state.
    pub fn set_value(&mut self, id: ParamId, value: Vec<f64>) {
        let p = &mut self.params[id.0];
        let n = value.len();
        p.value = value;
        p.grad = vec![0.0; n];
        p.m = vec![0.0; n];
        p.v = vec![0.0; n];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = ParamStore::new();
        let id = s.register("a", ParamClass::Color, vec![1.0, 2.0], 0);
        s.grad_mut(id).copy_from_slice(&[0.5, -3.0]);
        s.adam_step(&AdamConfig::default(), |_| {
            Some(StepSettings {
                lr: 0.1,
                weight_decay: 0.0,
            })
        });
        let v = s.value(id);
        assert!((v[0] - 0.9).abs() < 1e-12);
        assert!((v[1] - 2.1).abs() < 1e-12);
    }

    #[test]
    fn frozen_and_zero_entries_do_not_move() {
        let mut s = ParamStore::new();
        let a = s.register("a", ParamClass::Color, vec![1.0, 2.0], 0);
        let b = s.register("b", ParamClass::Pose, vec![3.0], 0);
        s.grad_mut(a)[1] = 1.0;
        s.grad_mut(b)[0] = 1.0;
        s.adam_step(&AdamConfig::default(), |p| {
            (p.class == ParamClass::Color).then_some(StepSettings {
                lr: 0.1,
                weight_decay: 0.0,
            })
        });
        assert_eq!(s.value(a)[0], 1.0);
        assert_ne!(s.value(a)[1], 2.0);
        assert_eq!(s.value(b)[0], 3.0);
    }

    #[test]
    fn decoupled_weight_decay_shrinks() {
        let mut s = ParamStore::new();
        let a = s.register("a", ParamClass::FrameLatent, vec![2.0], 0);
        s.adam_step(&AdamConfig::default(), |_| {
            Some(StepSettings {
                lr: 0.1,
                weight_decay: 0.05,
            })
        });
        assert!((s.value(a)[0] - 2.0 * (1.0 - 0.005)).abs() < 1e-15);
    }

    #[test]
    fn row_ops_keep_state_aligned() {
        let mut s = ParamStore::new();
        let a = s.register(
            "pos",
            ParamClass::GaussianPosition,
            vec![0., 1., 2., 3., 4., 5.],
            2,
        );
        s.param_mut(a).m = vec![1., 1., 2., 2., 3., 3.];
        s.retain_rows(a, &[true, false, true]);
        assert_eq!(s.value(a), &[0., 1., 4., 5.]);
        assert_eq!(s.param(a).m, vec![1., 1., 3., 3.]);
        s.append_rows(a, &[9., 9.]);
        assert_eq!(s.param(a).rows(), 3);
        assert_eq!(s.param(a).m[4..], [0., 0.]);
    }
}
