//! Linear 3D morphable face model: `vertices = R(pose) * (mean +
//! shape_basis * alpha + expr_basis * beta) + translation`, with the
//! landmark bookkeeping used by the partial landmark loss.
//!
//! The desk-scale basis is synthetic (a seeded orthonormal set of smooth
//! displacement fields over a sphere of 512 vertices); real bases with the
//! same container schema load through [`MorphableBasis::load`], so a
//! full-size configuration is a file away.

use crate::ad::{Arr, Tape, Var};
use crate::container::Container;
use crate::error::{Error, Result};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Coefficients of one face: shape `alpha`, expression `beta`, and a rigid
/// pose `[axis-angle rotation (3), translation (3)]`.
#[derive(Clone, Debug)]
pub struct FaceParams {
    pub alpha: Array1<f64>,
    pub beta: Array1<f64>,
    pub pose: Array1<f64>,
}

impl FaceParams {
    pub fn zeros(d_alpha: usize, d_beta: usize) -> Self {
        FaceParams {
            alpha: Array1::zeros(d_alpha),
            beta: Array1::zeros(d_beta),
            pose: Array1::zeros(6),
        }
    }
}

/// Take the source's shape and the target's expression and pose.
pub fn mix_params(src: &FaceParams, tgt: &FaceParams) -> FaceParams {
    FaceParams {
        alpha: src.alpha.clone(),
        beta: tgt.beta.clone(),
        pose: tgt.pose.clone(),
    }
}

#[derive(Clone, Debug)]
pub struct Mesh {
    pub vertices: Array2<f64>, // [V, 3]
    basis_tag: u64,
}

impl Mesh {
    pub fn basis_tag(&self) -> u64 {
        self.basis_tag
    }
}

pub struct MorphableBasis {
    pub mean: Array2<f64>,         // [V, 3]
    shape_flat: Array2<f64>,       // [3V, d_alpha]
    expr_flat: Array2<f64>,        // [3V, d_beta]
    pub landmark_indices: Vec<usize>, // 68 vertex ids
    pub inner_indices: Vec<usize>,    // the 51 inner landmarks
    tag: u64,
}

impl MorphableBasis {
    pub fn vertex_count(&self) -> usize {
        self.mean.shape()[0]
    }

    pub fn d_alpha(&self) -> usize {
        self.shape_flat.shape()[1]
    }

    pub fn d_beta(&self) -> usize {
        self.expr_flat.shape()[1]
    }

    pub fn tag(&self) -> u64 {
        self.tag
    }

    /// Seeded desk-scale basis: 512 vertices, 16 shape and 10 expression
    /// components, columns jointly orthonormal.
    pub fn synthetic(seed: u64) -> Self {
        let v = 512;
        let (da, db) = (16, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        // vertices on a Fibonacci sphere
        let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
        let mut mean = Array2::<f64>::zeros((v, 3));
        for i in 0..v {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / v as f64;
            let r = (1.0 - y * y).sqrt();
            let th = golden * i as f64;
            mean[(i, 0)] = r * th.cos();
            mean[(i, 1)] = y;
            mean[(i, 2)] = r * th.sin();
        }

        // smooth displacement fields: low-order polynomials of position
        let mut cols = Array2::<f64>::zeros((3 * v, da + db));
        for k in 0..da + db {
            let lin = Array2::from_shape_fn((3, 3), |_| rng.gen::<f64>() * 2.0 - 1.0);
            let quad = Array2::from_shape_fn((3, 3), |_| rng.gen::<f64>() * 2.0 - 1.0);
            let dir = Array1::from_shape_fn(3, |_| rng.gen::<f64>() * 2.0 - 1.0);
            for i in 0..v {
                let p = mean.row(i);
                let l = lin.dot(&p);
                let q: f64 = p.dot(&quad.dot(&p));
                for c in 0..3 {
                    cols[(3 * i + c, k)] = l[c] + q * dir[c];
                }
            }
        }
        // modified Gram-Schmidt across all columns: shape and expression
        // subspaces come out mutually orthonormal
        for k in 0..da + db {
            for j in 0..k {
                let proj = cols.column(k).dot(&cols.column(j));
                let cj = cols.column(j).to_owned();
                cols.column_mut(k).scaled_add(-proj, &cj);
            }
            let norm = cols.column(k).dot(&cols.column(k)).sqrt();
            cols.column_mut(k).mapv_inplace(|x| x / norm);
        }
        let shape_flat = cols.slice(ndarray::s![.., 0..da]).to_owned();
        let expr_flat = cols.slice(ndarray::s![.., da..da + db]).to_owned();

        // 68 landmark vertices, sorted sample without replacement
        let mut pool: Vec<usize> = (0..v).collect();
        for i in (1..pool.len()).rev() {
            let j = rng.gen_range(0..=i);
            pool.swap(i, j);
        }
        let mut landmark_indices: Vec<usize> = pool[..68].to_vec();
        landmark_indices.sort_unstable();
        // the standard convention drops the 17 jaw/contour points
        let inner_indices = landmark_indices[17..].to_vec();

        let tag = seed ^ 0x6d6f_7270_6861_626c;
        MorphableBasis {
            mean,
            shape_flat,
            expr_flat,
            landmark_indices,
            inner_indices,
            tag,
        }
    }

    fn validate(&self) -> Result<()> {
        let v = self.vertex_count();
        if self.shape_flat.shape()[0] != 3 * v || self.expr_flat.shape()[0] != 3 * v {
            return Err(Error::Format("basis rows must equal 3 * vertex count".into()));
        }
        if self.landmark_indices.len() != 68 || self.inner_indices.len() != 51 {
            return Err(Error::Format(
                "expected 68 landmarks with 51 inner landmarks".into(),
            ));
        }
        if self.landmark_indices.iter().any(|&i| i >= v) {
            return Err(Error::Format("landmark index out of range".into()));
        }
        if !self
            .inner_indices
            .iter()
            .all(|i| self.landmark_indices.contains(i))
        {
            return Err(Error::Format("inner landmarks must be a subset".into()));
        }
        Ok(())
    }

    /// Differentiable decode on a tape. `alpha [d_alpha]`, `beta [d_beta]`,
    /// `pose [6]` are single-sample vectors; the result is `[V, 3]`.
    pub fn decode_t(&self, t: &Tape, alpha: Var, beta: Var, pose: Var) -> Var {
        let v = self.vertex_count();
        let mean = t.constant(
            self.mean
                .to_shape((3 * v, 1))
                .unwrap()
                .to_owned()
                .into_dyn(),
        );
        let sb = t.constant(self.shape_flat.clone().into_dyn());
        let eb = t.constant(self.expr_flat.clone().into_dyn());
        let a = t.reshape(alpha, &[self.d_alpha(), 1]);
        let b = t.reshape(beta, &[self.d_beta(), 1]);
        let blend = t.add(t.add(mean, t.matmul(sb, a)), t.matmul(eb, b));
        let blend = t.reshape(blend, &[v, 3]);
        let pose_row = t.reshape(pose, &[1, 6]);
        let rot = t.reshape(t.slice_cols(pose_row, 0, 3), &[3]);
        let trans = t.reshape(t.slice_cols(pose_row, 3, 3), &[3]);
        t.rigid_transform(blend, rot, trans)
    }

    /// Plain decode.
    pub fn decode(&self, params: &FaceParams) -> Result<Mesh> {
        if params.alpha.len() != self.d_alpha()
            || params.beta.len() != self.d_beta()
            || params.pose.len() != 6
        {
            return Err(Error::domain(format!(
                "face params dims ({}, {}, {}) do not match basis ({}, {}, 6)",
                params.alpha.len(),
                params.beta.len(),
                params.pose.len(),
                self.d_alpha(),
                self.d_beta()
            )));
        }
        let t = Tape::new();
        let a = t.constant(params.alpha.clone().into_dyn());
        let b = t.constant(params.beta.clone().into_dyn());
        let p = t.constant(params.pose.clone().into_dyn());
        let out = self.decode_t(&t, a, b, p);
        let vertices = t
            .value(out)
            .view()
            .to_owned()
            .into_dimensionality()
            .unwrap();
        Ok(Mesh {
            vertices,
            basis_tag: self.tag,
        })
    }

    pub fn mesh_from_vertices(&self, vertices: Array2<f64>) -> Result<Mesh> {
        if vertices.shape() != [self.vertex_count(), 3] {
            return Err(Error::domain("vertex array shape mismatch"));
        }
        Ok(Mesh {
            vertices,
            basis_tag: self.tag,
        })
    }

    /// Gather the 51 inner landmark coordinates.
    pub fn partial_landmarks(&self, mesh: &Mesh) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((self.inner_indices.len(), 3));
        for (k, &i) in self.inner_indices.iter().enumerate() {
            out.row_mut(k).assign(&mesh.vertices.row(i));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let manifest = serde_json::json!({
            "kind": "morphable-basis",
            "version": 1,
            "vertices": self.vertex_count(),
            "d_alpha": self.d_alpha(),
            "d_beta": self.d_beta(),
            "tag": self.tag,
        });
        let mut c = Container::new(manifest);
        c.push_array("mean", self.mean.clone().into_dyn());
        c.push_array("shape_basis", self.shape_flat.clone().into_dyn());
        c.push_array("expr_basis", self.expr_flat.clone().into_dyn());
        c.push_indices(
            "landmark_indices",
            self.landmark_indices.iter().map(|&i| i as u32).collect(),
        );
        c.push_indices(
            "inner_indices",
            self.inner_indices.iter().map(|&i| i as u32).collect(),
        );
        c.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c = Container::load(path)?;
        let mean: Array2<f64> = to_2d(c.array("mean")?)?;
        let shape_flat = to_2d(c.array("shape_basis")?)?;
        let expr_flat = to_2d(c.array("expr_basis")?)?;
        let landmark_indices: Vec<usize> = c
            .indices("landmark_indices")?
            .iter()
            .map(|&i| i as usize)
            .collect();
        let inner_indices: Vec<usize> =
            c.indices("inner_indices")?.iter().map(|&i| i as usize).collect();
        let tag = c
            .manifest
            .get("tag")
            .and_then(|t| t.as_u64())
            .unwrap_or(0);
        let basis = MorphableBasis {
            mean,
            shape_flat,
            expr_flat,
            landmark_indices,
            inner_indices,
            tag,
        };
        basis.validate()?;
        Ok(basis)
    }
}

fn to_2d(a: &Arr) -> Result<Array2<f64>> {
    a.view()
        .to_owned()
        .into_dimensionality()
        .map_err(|_| Error::Format("expected a 2-d array".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis() -> MorphableBasis {
        MorphableBasis::synthetic(42)
    }

    #[test]
    fn zero_params_decode_to_the_mean_exactly() {
        let b = basis();
        let mesh = b.decode(&FaceParams::zeros(16, 10)).unwrap();
        assert_eq!(mesh.vertices, b.mean);
    }

    #[test]
    fn decode_is_linear_in_alpha_before_pose() {
        let b = basis();
        let mut p1 = FaceParams::zeros(16, 10);
        for (i, v) in p1.alpha.iter_mut().enumerate() {
            *v = (i as f64 - 4.0) * 0.11;
        }
        let mut p2 = p1.clone();
        p2.alpha.mapv_inplace(|v| 2.0 * v);
        let m1 = b.decode(&p1).unwrap();
        let m2 = b.decode(&p2).unwrap();
        let lhs = &m2.vertices - &b.mean;
        let rhs = 2.0 * (&m1.vertices - &b.mean);
        let diff = (&lhs - &rhs).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-12, "alpha linearity violated: {diff}");
    }

    #[test]
    fn decode_gradient_wrt_alpha_matches_finite_differences() {
        let b = basis();
        let alpha = Array1::from_shape_fn(16, |i| 0.05 * (i as f64 + 1.0));
        let beta = Array1::from_shape_fn(10, |i| -0.03 * (i as f64 + 1.0));
        let pose = ndarray::arr1(&[0.3, -0.2, 0.1, 0.5, 0.0, -0.4]);
        let run = |a: &Array1<f64>| -> (f64, Option<Array1<f64>>) {
            let t = Tape::new();
            let va = t.leaf(a.clone().into_dyn());
            let vb = t.constant(beta.clone().into_dyn());
            let vp = t.constant(pose.clone().into_dyn());
            let mesh = b.decode_t(&t, va, vb, vp);
            let loss = t.sum_all(t.square(mesh));
            let grads = t.backward(loss);
            let g = grads
                .get(va)
                .map(|g| g.view().to_owned().into_dimensionality().unwrap());
            (t.scalar_value(loss), g)
        };
        let (_, g) = run(&alpha);
        let g = g.unwrap();
        let h = 1e-6;
        for i in 0..16 {
            let mut ap = alpha.clone();
            let mut am = alpha.clone();
            ap[i] += h;
            am[i] -= h;
            let fd = (run(&ap).0 - run(&am).0) / (2.0 * h);
            let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1.0);
            assert!(rel < 1e-6, "alpha[{i}]: ad={} fd={fd}", g[i]);
        }
    }

    #[test]
    fn mix_copies_fields_and_is_idempotent() {
        let b = basis();
        let mut src = FaceParams::zeros(16, 10);
        let mut tgt = FaceParams::zeros(16, 10);
        src.alpha.fill(0.7);
        src.beta.fill(-0.2);
        src.pose.fill(0.1);
        tgt.alpha.fill(-0.4);
        tgt.beta.fill(0.9);
        tgt.pose.fill(-0.3);
        let mix = mix_params(&src, &tgt);
        assert_eq!(mix.alpha, src.alpha);
        assert_eq!(mix.beta, tgt.beta);
        assert_eq!(mix.pose, tgt.pose);
        let again = mix_params(&mix, &tgt);
        assert_eq!(again.alpha, mix.alpha);
        assert_eq!(again.beta, mix.beta);
        assert_eq!(again.pose, mix.pose);
        // same shape on both sides: the mix decodes exactly like the target
        let mut tgt2 = tgt.clone();
        tgt2.alpha = src.alpha.clone();
        let m_mix = b.decode(&mix_params(&src, &tgt2)).unwrap();
        let m_tgt = b.decode(&tgt2).unwrap();
        assert_eq!(m_mix.vertices, m_tgt.vertices);
    }

    #[test]
    fn partial_landmarks_match_a_plain_index_loop() {
        let b = basis();
        let mut p = FaceParams::zeros(16, 10);
        p.alpha.fill(0.3);
        p.pose[1] = 0.8;
        let mesh = b.decode(&p).unwrap();
        let lm = b.partial_landmarks(&mesh);
        assert_eq!(lm.shape(), &[51, 3]);
        for (k, &i) in b.inner_indices.iter().enumerate() {
            for c in 0..3 {
                assert_eq!(lm[(k, c)], mesh.vertices[(i, c)]);
            }
        }
        // translation equivariance
        let shifted = b
            .mesh_from_vertices(&mesh.vertices + 2.5)
            .unwrap();
        let lm2 = b.partial_landmarks(&shifted);
        let diff = (&lm2 - &(&lm + 2.5)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn basis_file_round_trips() {
        let b = basis();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("basis.fsc");
        b.save(&path).unwrap();
        let b2 = MorphableBasis::load(&path).unwrap();
        assert_eq!(b.mean, b2.mean);
        assert_eq!(b.landmark_indices, b2.landmark_indices);
        assert_eq!(b.inner_indices, b2.inner_indices);
        assert_eq!(b.tag(), b2.tag());
        let p = FaceParams::zeros(16, 10);
        assert_eq!(b.decode(&p).unwrap().vertices, b2.decode(&p).unwrap().vertices);
    }

    #[test]
    fn inner_landmarks_drop_the_contour_points() {
        let b = basis();
        assert_eq!(b.inner_indices, b.landmark_indices[17..].to_vec());
    }
}
