//! The pluggable estimator bundle: identity embedder, perceptual features,
//! pose/expression estimator, gaze estimator and face parser.
//!
//! Training, the probe and the evaluation suite all consume the
//! [`PerceptionBundle`] trait, so any member can be swapped for an external
//! backend. The built-in stubs are small frozen conv nets with seeded
//! weights: deterministic, differentiable, and cheap enough to run inside
//! the training loop. They are measurement devices, not trainable modules —
//! their parameters never join an optimizer.

use crate::ad::{Arr, ParamId, ParamStore, Registrar, Tape, Var};
use crate::error::{Error, Result};
use crate::image::{stack_batch, ImageTensor};
use crate::morphable::{FaceParams, MorphableBasis};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Batched face parameters on a tape: `alpha [b, d_alpha]`, `beta [b,
/// d_beta]`, `pose [b, 6]`.
#[derive(Clone, Copy)]
pub struct FaceParamsVar {
    pub alpha: Var,
    pub beta: Var,
    pub pose: Var,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum FaceClass {
    Other,
    Skin,
    Hair,
}

/// Per-pixel face-parsing result in the canonical {skin, hair, other} set.
#[derive(Clone, Debug)]
pub struct FaceClassMap {
    classes: Array2<u8>,
}

impl FaceClassMap {
    pub fn new(classes: Array2<u8>) -> Self {
        FaceClassMap { classes }
    }

    pub fn class(&self, i: usize, j: usize) -> FaceClass {
        match self.classes[(i, j)] {
            1 => FaceClass::Skin,
            2 => FaceClass::Hair,
            _ => FaceClass::Other,
        }
    }

    pub fn is_skin_or_hair(&self, i: usize, j: usize) -> bool {
        self.classes[(i, j)] != 0
    }

    pub fn resolution(&self) -> usize {
        self.classes.shape()[0]
    }
}

pub trait PerceptionBundle {
    /// Identity embedding, `[b, E]`, rows approximately unit norm.
    fn embed_identity_t(&self, t: &Tape, img: Var) -> Result<Var>;

    /// Multi-scale features for the perceptual reconstruction term.
    fn perceptual_features_t(&self, t: &Tape, img: Var) -> Result<Vec<Var>>;

    /// Morphable-model coefficients `(alpha, beta, pose)` per sample.
    fn estimate_pose_expr_t(&self, t: &Tape, img: Var) -> Result<FaceParamsVar>;

    /// Gaze angles `[b, 2]` (yaw, pitch).
    fn estimate_gaze_t(&self, t: &Tape, img: Var) -> Result<Var>;

    /// Face parsing into the canonical class triple (plain, metric-side).
    fn parse_face(&self, img: &ImageTensor) -> Result<FaceClassMap>;

    /// Optional head-pose backend (the evaluation table keeps a slot for it;
    /// pairs are excluded when no backend is plugged in).
    fn estimate_head_pose(&self, _img: &ImageTensor) -> Option<Result<Array1<f64>>> {
        None
    }

    // ---- plain single-image helpers built on the tape methods ----

    fn embed_identity(&self, img: &ImageTensor) -> Result<Array1<f64>> {
        let t = Tape::new();
        let v = t.constant(stack_batch(&[img])?);
        let e = self.embed_identity_t(&t, v)?;
        Ok(row0(&t.value(e)))
    }

    fn estimate_pose_expr(&self, img: &ImageTensor) -> Result<FaceParams> {
        let t = Tape::new();
        let v = t.constant(stack_batch(&[img])?);
        let p = self.estimate_pose_expr_t(&t, v)?;
        Ok(FaceParams {
            alpha: row0(&t.value(p.alpha)),
            beta: row0(&t.value(p.beta)),
            pose: row0(&t.value(p.pose)),
        })
    }

    fn estimate_gaze(&self, img: &ImageTensor) -> Result<(f64, f64)> {
        let t = Tape::new();
        let v = t.constant(stack_batch(&[img])?);
        let g = self.estimate_gaze_t(&t, v)?;
        let gv = t.value(g);
        Ok((gv[[0, 0]], gv[[0, 1]]))
    }
}

fn row0(a: &Arr) -> Array1<f64> {
    a.index_axis(ndarray::Axis(0), 0)
        .to_owned()
        .into_dimensionality()
        .unwrap()
}

/// Seeded stub bundle. `training` and `evaluation` differ in seed and
/// embedding width, so the evaluation identity model is a genuinely
/// different measurement than the training one.
pub struct StubBundle {
    store: ParamStore,
    embed_dim: usize,
    d_alpha: usize,
    d_beta: usize,
    // identity net
    id_conv1: ParamId,
    id_conv2: ParamId,
    id_head_w: ParamId,
    id_head_b: ParamId,
    // pose/expression net
    pe_conv1: ParamId,
    pe_conv2: ParamId,
    pe_head_w: ParamId,
    pe_head_b: ParamId,
    // gaze net
    gz_conv1: ParamId,
    gz_head_w: ParamId,
    gz_head_b: ParamId,
}

const STUB_BASE: usize = 16; // stubs operate at 16x16 after box-downsampling

impl StubBundle {
    pub fn training(seed: u64, basis: &MorphableBasis) -> Self {
        Self::build(seed, 32, basis)
    }

    pub fn evaluation(seed: u64, basis: &MorphableBasis) -> Self {
        Self::build(seed.wrapping_add(0x9e37_79b9), 48, basis)
    }

    fn build(seed: u64, embed_dim: usize, basis: &MorphableBasis) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut reg = Registrar::new(&mut store, &mut rng, "stub");
        let id_conv1 = reg.normal("id/conv1", &[8, 3, 3, 3], (2.0 / 27.0_f64).sqrt());
        let id_conv2 = reg.normal("id/conv2", &[16, 8, 3, 3], (2.0 / 72.0_f64).sqrt());
        let id_head_w = reg.normal("id/head_w", &[embed_dim, 16], 0.25);
        let id_head_b = reg.normal("id/head_b", &[embed_dim], 0.05);
        let pe_out = basis.d_alpha() + basis.d_beta() + 6;
        let pe_conv1 = reg.normal("pe/conv1", &[8, 3, 3, 3], (2.0 / 27.0_f64).sqrt());
        let pe_conv2 = reg.normal("pe/conv2", &[16, 8, 3, 3], (2.0 / 72.0_f64).sqrt());
        let pe_head_w = reg.normal("pe/head_w", &[pe_out, 16], 0.25);
        let pe_head_b = reg.normal("pe/head_b", &[pe_out], 0.02);
        let gz_conv1 = reg.normal("gz/conv1", &[8, 3, 3, 3], (2.0 / 27.0_f64).sqrt());
        let gz_head_w = reg.normal("gz/head_w", &[2, 8], 0.3);
        let gz_head_b = reg.normal("gz/head_b", &[2], 0.02);
        let _ = reg.finish();
        StubBundle {
            store,
            embed_dim,
            d_alpha: basis.d_alpha(),
            d_beta: basis.d_beta(),
            id_conv1,
            id_conv2,
            id_head_w,
            id_head_b,
            pe_conv1,
            pe_conv2,
            pe_head_w,
            pe_head_b,
            gz_conv1,
            gz_head_w,
            gz_head_b,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    /// Frozen weights enter each tape as constants.
    fn cvar(&self, t: &Tape, id: ParamId) -> Var {
        t.constant(self.store.value(id).clone())
    }

    fn to_base(&self, t: &Tape, img: Var) -> Result<Var> {
        let sh = t.shape(img);
        if sh.len() != 4 || sh[1] != 3 {
            return Err(Error::domain("bundle expects [b, 3, r, r] images"));
        }
        let r = sh[2];
        if r < STUB_BASE || !r.is_power_of_two() {
            return Err(Error::domain(format!(
                "bundle expects a power-of-two resolution >= {STUB_BASE}, got {r}"
            )));
        }
        Ok(if r > STUB_BASE {
            t.avg_downsample(img, r / STUB_BASE)
        } else {
            img
        })
    }

    fn global_pool(t: &Tape, x: Var) -> Var {
        let sh = t.shape(x);
        let pooled = t.avg_downsample(x, sh[2]);
        t.reshape(pooled, &[sh[0], sh[1]])
    }
}

impl PerceptionBundle for StubBundle {
    fn embed_identity_t(&self, t: &Tape, img: Var) -> Result<Var> {
        let x = self.to_base(t, img)?;
        let x = t.leaky_relu(t.conv2d(x, self.cvar(t, self.id_conv1), 2, 1), 0.2);
        let x = t.leaky_relu(t.conv2d(x, self.cvar(t, self.id_conv2), 2, 1), 0.2);
        let pooled = Self::global_pool(t, x);
        let e = t.linear(pooled, self.cvar(t, self.id_head_w), self.cvar(t, self.id_head_b));
        // normalize rows
        let n2 = t.sum_rows(t.square(e));
        let inv = t.rsqrt_eps(n2, 1e-24);
        Ok(t.scale_rows(e, inv))
    }

    fn perceptual_features_t(&self, t: &Tape, img: Var) -> Result<Vec<Var>> {
        let sh = t.shape(img);
        if sh.len() != 4 || sh[1] != 3 {
            return Err(Error::domain("bundle expects [b, 3, r, r] images"));
        }
        let mut feats = vec![img];
        let mut cur = img;
        for _ in 0..3 {
            if t.shape(cur)[2] >= 2 {
                cur = t.avg_downsample(cur, 2);
                feats.push(cur);
            }
        }
        Ok(feats)
    }

    fn estimate_pose_expr_t(&self, t: &Tape, img: Var) -> Result<FaceParamsVar> {
        let x = self.to_base(t, img)?;
        let x = t.leaky_relu(t.conv2d(x, self.cvar(t, self.pe_conv1), 2, 1), 0.2);
        let x = t.leaky_relu(t.conv2d(x, self.cvar(t, self.pe_conv2), 2, 1), 0.2);
        let pooled = Self::global_pool(t, x);
        let out = t.linear(pooled, self.cvar(t, self.pe_head_w), self.cvar(t, self.pe_head_b));
        let out = t.scale(t.tanh(out), 0.6); // keep coefficients in a sane range
        Ok(FaceParamsVar {
            alpha: t.slice_cols(out, 0, self.d_alpha),
            beta: t.slice_cols(out, self.d_alpha, self.d_beta),
            pose: t.slice_cols(out, self.d_alpha + self.d_beta, 6),
        })
    }

    fn estimate_gaze_t(&self, t: &Tape, img: Var) -> Result<Var> {
        let x = self.to_base(t, img)?;
        let x = t.leaky_relu(t.conv2d(x, self.cvar(t, self.gz_conv1), 2, 1), 0.2);
        let pooled = Self::global_pool(t, x);
        let g = t.linear(pooled, self.cvar(t, self.gz_head_w), self.cvar(t, self.gz_head_b));
        Ok(t.scale(t.tanh(g), 0.8))
    }

    /// Threshold parser: the blue channel doubles as a label plane. Values
    /// above 0.3 read as skin, below -0.3 as hair, the rest as other.
    fn parse_face(&self, img: &ImageTensor) -> Result<FaceClassMap> {
        let r = img.resolution();
        let mut classes = Array2::<u8>::zeros((r, r));
        for i in 0..r {
            for j in 0..r {
                let b = img.data()[(2, i, j)];
                classes[(i, j)] = if b > 0.3 {
                    1
                } else if b < -0.3 {
                    2
                } else {
                    0
                };
            }
        }
        Ok(FaceClassMap::new(classes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn img(seed: u64, res: usize) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(ndarray::Array3::from_shape_fn((3, res, res), |_| {
            rng.gen::<f64>() * 2.0 - 1.0
        }))
        .unwrap()
    }

    fn bundle() -> StubBundle {
        StubBundle::training(3, &MorphableBasis::synthetic(42))
    }

    #[test]
    fn members_are_deterministic_and_resolution_flexible() {
        let b = bundle();
        for res in [16, 32, 64] {
            let im = img(res as u64, res);
            let e1 = b.embed_identity(&im).unwrap();
            let e2 = b.embed_identity(&im).unwrap();
            assert_eq!(e1, e2);
            let n: f64 = e1.dot(&e1);
            assert!((n - 1.0).abs() < 1e-9, "norm {n}");
            let p = b.estimate_pose_expr(&im).unwrap();
            assert_eq!(p.alpha.len(), 16);
            assert_eq!(p.beta.len(), 10);
            assert_eq!(p.pose.len(), 6);
            let (yaw, pitch) = b.estimate_gaze(&im).unwrap();
            assert!(yaw.is_finite() && pitch.is_finite());
        }
    }

    #[test]
    fn training_and_evaluation_bundles_differ() {
        let basis = MorphableBasis::synthetic(42);
        let tr = StubBundle::training(3, &basis);
        let ev = StubBundle::evaluation(3, &basis);
        assert_ne!(tr.embed_dim(), ev.embed_dim());
        let im = img(1, 32);
        let a = tr.estimate_pose_expr(&im).unwrap();
        let b = ev.estimate_pose_expr(&im).unwrap();
        assert_ne!(a.alpha, b.alpha);
    }

    #[test]
    fn perturbing_the_input_moves_the_embedding() {
        let b = bundle();
        let im = img(5, 32);
        let mut data = im.data().clone();
        data[(0, 3, 3)] += 0.5;
        let im2 = ImageTensor::new(data).unwrap();
        let e1 = b.embed_identity(&im).unwrap();
        let e2 = b.embed_identity(&im2).unwrap();
        assert!((&e1 - &e2).iter().any(|v| v.abs() > 0.0));
    }

    #[test]
    fn parser_thresholds_the_blue_channel() {
        let b = bundle();
        let mut data = ndarray::Array3::<f64>::zeros((3, 16, 16));
        data[(2, 0, 0)] = 0.9; // skin
        data[(2, 1, 1)] = -0.9; // hair
        let map = b.parse_face(&ImageTensor::new(data).unwrap()).unwrap();
        assert_eq!(map.class(0, 0), FaceClass::Skin);
        assert_eq!(map.class(1, 1), FaceClass::Hair);
        assert_eq!(map.class(2, 2), FaceClass::Other);
        assert!(map.is_skin_or_hair(0, 0));
        assert!(!map.is_skin_or_hair(2, 2));
    }

    #[test]
    fn gradients_flow_through_the_stub_estimators() {
        let b = bundle();
        let im = img(6, 32);
        let t = Tape::new();
        let x = t.leaf(stack_batch(&[&im]).unwrap());
        let p = b.estimate_pose_expr_t(&t, x).unwrap();
        let loss = t.sum_all(t.square(p.alpha));
        let grads = t.backward(loss);
        let gx = grads.get(x).expect("gradient must reach the image");
        assert!(gx.iter().any(|v| v.abs() > 0.0));
    }
}
