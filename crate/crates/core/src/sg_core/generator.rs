//! The style-based synthesis network.
//!
//! Each block upsamples, applies two styled (modulated + demodulated)
//! convolutions with per-site noise, and contributes to a running skip image
//! through a styled 1x1 projection. The forward pass can start from the
//! learned constant, stop at any block boundary, or resume from an injected
//! `(feature, low-res image)` pair — the three paths share one block
//! implementation, which is what makes split and rejoin agree exactly.

use super::{split_index, ExtendedLatent, FeatureMap, GeneratorConfig, LatentTail, NoiseBank};
use crate::ad::{ParamId, ParamStore, Registrar, Tape, Var};
use crate::error::{Error, Result};
use crate::image::{unstack_batch, ImageTensor};
use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;

struct StyleConv {
    affine_w: ParamId,
    affine_b: ParamId,
    weight: ParamId, // [co, ci, 3, 3]
    bias: ParamId,
    noise_gain: ParamId,
    up: bool,
    level: usize,
    site: usize,
}

struct ToRgbStage {
    affine_w: ParamId,
    affine_b: ParamId,
    weight: ParamId, // [3, ci, 1, 1]
    bias: ParamId,
}

struct Block {
    level: usize,
    conv0: Option<StyleConv>,
    conv1: StyleConv,
    to_rgb: ToRgbStage,
}

/// 1-based style indices consumed by the block at `level`:
/// `(conv0, conv1, to_rgb)`.
fn style_indices(level: usize) -> (Option<usize>, usize, usize) {
    if level == 4 {
        (None, 1, 2)
    } else {
        let m = 2 * (level.trailing_zeros() as usize) - 2;
        (Some(m - 2), m - 1, m)
    }
}

/// Resume point for [`Generator::generate_from_feature`]: the feature map at
/// a level plus the running low-resolution skip image alongside it.
#[derive(Clone, Debug)]
pub struct ResumeState {
    pub feature: FeatureMap,
    /// `[3, level, level]`
    pub lowres: Array3<f64>,
}

pub struct Generator {
    cfg: GeneratorConfig,
    const_input: ParamId,
    blocks: Vec<Block>,
    ids: Vec<ParamId>,
}

impl Generator {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: GeneratorConfig,
        prefix: &str,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut reg = Registrar::new(store, rng, prefix);
        let c4 = cfg.channels(4);
        let const_input = reg.normal("const", &[c4, 4, 4], 1.0);
        let mut blocks = Vec::new();
        for level in cfg.levels() {
            let ci_prev = if level == 4 { c4 } else { cfg.channels(level / 2) };
            let co = cfg.channels(level);
            let tag = format!("b{level}");
            let conv0 = (level > 4).then(|| {
                style_conv(&mut reg, &cfg, &format!("{tag}/conv0"), ci_prev, co, true, level, 0)
            });
            let conv1_in = if level == 4 { c4 } else { co };
            let site = if level == 4 { 0 } else { 1 };
            let conv1 = style_conv(&mut reg, &cfg, &format!("{tag}/conv1"), conv1_in, co, false, level, site);
            let to_rgb = ToRgbStage {
                affine_w: reg.normal(
                    &format!("{tag}/torgb/affine_w"),
                    &[co, cfg.latent_dim],
                    (1.0 / cfg.latent_dim as f64).sqrt(),
                ),
                affine_b: reg.constant(&format!("{tag}/torgb/affine_b"), &[co], 1.0),
                weight: reg.normal(
                    &format!("{tag}/torgb/weight"),
                    &[3, co, 1, 1],
                    (1.0 / co as f64).sqrt(),
                ),
                bias: reg.zeros(&format!("{tag}/torgb/bias"), &[3]),
            };
            blocks.push(Block {
                level,
                conv0,
                conv1,
                to_rgb,
            });
        }
        let ids = reg.finish();
        Ok(Generator {
            cfg,
            const_input,
            blocks,
            ids,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.ids
    }

    fn begin(&self, t: &Tape, ps: &ParamStore, batch: usize) -> Var {
        let c4 = self.cfg.channels(4);
        let konst = t.param(ps, self.const_input);
        let flat = t.reshape(konst, &[1, c4 * 16]);
        let ones = t.constant(Array2::<f64>::ones((batch, 1)).into_dyn());
        let tiled = t.matmul(ones, flat);
        t.reshape(tiled, &[batch, c4, 4, 4])
    }

    fn apply_style_conv(
        &self,
        t: &Tape,
        ps: &ParamStore,
        sc: &StyleConv,
        x: Var,
        style: Var,
        noise: &NoiseBank,
    ) -> Var {
        let aff_w = t.param(ps, sc.affine_w);
        let aff_b = t.param(ps, sc.affine_b);
        let s = t.linear(style, aff_w, aff_b); // [b, ci]
        let x = if sc.up { t.upsample2x(x) } else { x };
        let xm = t.scale_channels(x, s);
        let w = t.param(ps, sc.weight);
        let y = t.conv2d(xm, w, 1, 1);
        // demodulation: per-(sample, out-channel) inverse norm of the
        // modulated kernel
        let wsh = t.shape(w);
        let (co, ci) = (wsh[0], wsh[1]);
        let w2 = t.reshape(t.square(w), &[co * ci, wsh[2] * wsh[3]]);
        let w2 = t.reshape(t.sum_rows(w2), &[co, ci]);
        let q = t.matmul_nt(t.square(s), w2); // [b, co]
        let d = t.rsqrt_eps(q, 1e-8);
        let y = t.scale_channels(y, d);
        let gain = t.param(ps, sc.noise_gain);
        let y = t.add_noise(y, noise.grid(sc.level, sc.site).clone().into_dyn(), gain);
        let y = t.add_bias_ch(y, t.param(ps, sc.bias));
        t.leaky_relu(y, 0.2)
    }

    fn apply_to_rgb(&self, t: &Tape, ps: &ParamStore, stage: &ToRgbStage, x: Var, style: Var) -> Var {
        let s = t.linear(style, t.param(ps, stage.affine_w), t.param(ps, stage.affine_b));
        let xm = t.scale_channels(x, s);
        let y = t.conv2d(xm, t.param(ps, stage.weight), 1, 0);
        t.add_bias_ch(y, t.param(ps, stage.bias))
    }

    fn apply_block(
        &self,
        t: &Tape,
        ps: &ParamStore,
        block: &Block,
        x: Var,
        img: Option<Var>,
        style_at: &dyn Fn(usize) -> Var,
        noise: &NoiseBank,
    ) -> (Var, Var) {
        let (i0, i1, irgb) = style_indices(block.level);
        let mut x = x;
        if let Some(conv0) = &block.conv0 {
            x = self.apply_style_conv(t, ps, conv0, x, style_at(i0.unwrap()), noise);
        }
        x = self.apply_style_conv(t, ps, &block.conv1, x, style_at(i1), noise);
        let rgb = self.apply_to_rgb(t, ps, &block.to_rgb, x, style_at(irgb));
        let img = match img {
            Some(prev) => t.add(t.upsample2x(prev), rgb),
            None => rgb,
        };
        (x, img)
    }

    /// Full synthesis from `n_latents` per-layer styles, each `[b, latent_dim]`.
    pub fn forward_full_t(&self, t: &Tape, ps: &ParamStore, styles: &[Var], noise: &NoiseBank) -> Var {
        assert_eq!(styles.len(), self.cfg.n_latents(), "style count mismatch");
        let batch = t.shape(styles[0])[0];
        let mut x = self.begin(t, ps, batch);
        let mut img = None;
        for block in &self.blocks {
            let (nx, nimg) = self.apply_block(t, ps, block, x, img, &|i| styles[i - 1], noise);
            x = nx;
            img = Some(nimg);
        }
        t.tanh(img.expect("at least one block"))
    }

    /// Synthesis up to and including the block at `level`, returning the
    /// feature map (consumes styles `w_1 ..= w_(m-1)`) and the running skip
    /// image (additionally consumes `w_m`).
    pub fn extract_t(
        &self,
        t: &Tape,
        ps: &ParamStore,
        styles: &[Var],
        noise: &NoiseBank,
        level: usize,
    ) -> (Var, Var) {
        let batch = t.shape(styles[0])[0];
        let mut x = self.begin(t, ps, batch);
        let mut img = None;
        for block in self.blocks.iter().filter(|b| b.level <= level) {
            let (nx, nimg) = self.apply_block(t, ps, block, x, img, &|i| styles[i - 1], noise);
            x = nx;
            img = Some(nimg);
        }
        (x, img.expect("level >= 4"))
    }

    /// Resume synthesis above `level` from an injected feature/image pair.
    /// `tail[0]` must be `w_m` with `m = split_index(level)`.
    pub fn resume_t(
        &self,
        t: &Tape,
        ps: &ParamStore,
        level: usize,
        feature: Var,
        lowres: Var,
        tail: &[Var],
        noise: &NoiseBank,
    ) -> Var {
        let m = split_index(level).expect("validated by callers");
        debug_assert_eq!(tail.len(), self.cfg.n_latents() - m + 1);
        let mut x = feature;
        let mut img = lowres;
        for block in self.blocks.iter().filter(|b| b.level > level) {
            let (nx, nimg) =
                self.apply_block(t, ps, block, x, Some(img), &|i| tail[i - m], noise);
            x = nx;
            img = nimg;
        }
        t.tanh(img)
    }

    fn latent_vars(&self, t: &Tape, vectors: &[ndarray::Array1<f64>]) -> Vec<Var> {
        vectors
            .iter()
            .map(|v| t.constant(v.view().insert_axis(ndarray::Axis(0)).to_owned().into_dyn()))
            .collect()
    }

    fn check_latent(&self, w: &ExtendedLatent) -> Result<()> {
        if w.len() != self.cfg.n_latents() {
            return Err(Error::domain(format!(
                "extended latent has {} vectors, generator expects {}",
                w.len(),
                self.cfg.n_latents()
            )));
        }
        if w.dim() != self.cfg.latent_dim {
            return Err(Error::domain(format!(
                "latent dim {} != configured {}",
                w.dim(),
                self.cfg.latent_dim
            )));
        }
        Ok(())
    }

    fn check_split_level(&self, level: usize) -> Result<()> {
        if !self.cfg.split_levels().contains(&level) {
            return Err(Error::domain(format!(
                "level {level} is not an injectable block resolution of this generator \
                 (valid: {:?})",
                self.cfg.split_levels()
            )));
        }
        Ok(())
    }

    /// Deterministic image from an extended latent and a noise bank.
    pub fn generate_full(
        &self,
        ps: &ParamStore,
        w: &ExtendedLatent,
        noise: &NoiseBank,
    ) -> Result<ImageTensor> {
        self.check_latent(w)?;
        let t = Tape::new();
        let styles = self.latent_vars(&t, w.vectors());
        let out = self.forward_full_t(&t, ps, &styles, noise);
        let imgs = unstack_batch(&t.value(out))?;
        Ok(imgs.into_iter().next().unwrap())
    }

    /// The internal activation after the `level` block plus the running skip
    /// image, packaged for later resumption.
    pub fn extract_feature(
        &self,
        ps: &ParamStore,
        w: &ExtendedLatent,
        noise: &NoiseBank,
        level: usize,
    ) -> Result<ResumeState> {
        self.check_latent(w)?;
        self.check_split_level(level)?;
        let t = Tape::new();
        let styles = self.latent_vars(&t, w.vectors());
        let (feat, img) = self.extract_t(&t, ps, &styles, noise, level);
        let fval = t.value(feat);
        let ival = t.value(img);
        let feature = FeatureMap {
            level,
            data: fval
                .view()
                .index_axis(ndarray::Axis(0), 0)
                .to_owned()
                .into_dimensionality()
                .unwrap(),
        };
        let lowres = ival
            .view()
            .index_axis(ndarray::Axis(0), 0)
            .to_owned()
            .into_dimensionality()
            .unwrap();
        Ok(ResumeState { feature, lowres })
    }

    /// Resume synthesis from an injected state with the latent tail
    /// `w_m ..= w_n`.
    pub fn generate_from_feature(
        &self,
        ps: &ParamStore,
        state: &ResumeState,
        tail: &LatentTail,
        noise: &NoiseBank,
    ) -> Result<ImageTensor> {
        Ok(self
            .generate_from_feature_batch(ps, state, std::slice::from_ref(tail), noise)?
            .into_iter()
            .next()
            .unwrap())
    }

    /// Batched resumption: one shared state, many tails.
    pub fn generate_from_feature_batch(
        &self,
        ps: &ParamStore,
        state: &ResumeState,
        tails: &[LatentTail],
        noise: &NoiseBank,
    ) -> Result<Vec<ImageTensor>> {
        if tails.is_empty() {
            return Ok(Vec::new());
        }
        let level = state.feature.level;
        self.check_split_level(level)?;
        let m = split_index(level)?;
        let expected_len = self.cfg.n_latents() - m + 1;
        for tail in tails {
            if tail.start != m {
                return Err(Error::domain(format!(
                    "latent tail starts at index {}, feature level {level} requires {m}",
                    tail.start
                )));
            }
            if tail.len() != expected_len {
                return Err(Error::domain(format!(
                    "latent tail has {} vectors, expected {expected_len}",
                    tail.len()
                )));
            }
            if tail.vectors()[0].len() != self.cfg.latent_dim {
                return Err(Error::domain("latent tail dimension mismatch"));
            }
        }
        if state.feature.channels() != self.cfg.channels(level) {
            return Err(Error::domain(format!(
                "feature map has {} channels, level {level} carries {}",
                state.feature.channels(),
                self.cfg.channels(level)
            )));
        }
        if state.lowres.shape() != [3, level, level] {
            return Err(Error::domain("resume image must be [3, level, level]"));
        }

        let k = tails.len();
        let t = Tape::new();
        let mut fdata = ndarray::Array4::<f64>::zeros((
            k,
            state.feature.channels(),
            level,
            level,
        ));
        let mut idata = ndarray::Array4::<f64>::zeros((k, 3, level, level));
        for i in 0..k {
            fdata
                .index_axis_mut(ndarray::Axis(0), i)
                .assign(&state.feature.data);
            idata
                .index_axis_mut(ndarray::Axis(0), i)
                .assign(&state.lowres);
        }
        let feature = t.constant(fdata.into_dyn());
        let lowres = t.constant(idata.into_dyn());
        let tail_vars: Vec<Var> = (0..expected_len)
            .map(|j| {
                let mut m2 = Array2::<f64>::zeros((k, self.cfg.latent_dim));
                for (i, tail) in tails.iter().enumerate() {
                    m2.row_mut(i).assign(&tail.vectors()[j]);
                }
                t.constant(m2.into_dyn())
            })
            .collect();
        let out = self.resume_t(&t, ps, level, feature, lowres, &tail_vars, noise);
        unstack_batch(&t.value(out))
    }
}

fn style_conv(
    reg: &mut Registrar,
    cfg: &GeneratorConfig,
    name: &str,
    ci: usize,
    co: usize,
    up: bool,
    level: usize,
    site: usize,
) -> StyleConv {
    StyleConv {
        affine_w: reg.normal(
            &format!("{name}/affine_w"),
            &[ci, cfg.latent_dim],
            (1.0 / cfg.latent_dim as f64).sqrt(),
        ),
        affine_b: reg.constant(&format!("{name}/affine_b"), &[ci], 1.0),
        weight: reg.normal(
            &format!("{name}/weight"),
            &[co, ci, 3, 3],
            (2.0 / (ci * 9) as f64).sqrt(),
        ),
        bias: reg.zeros(&format!("{name}/bias"), &[co]),
        noise_gain: reg.constant(&format!("{name}/noise_gain"), &[], 0.05),
        up,
        level,
        site,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sg_core::NoiseMode;
    use rand::SeedableRng;

    fn tiny_generator(res: usize) -> (Generator, ParamStore) {
        let cfg = GeneratorConfig {
            output_resolution: res,
            latent_dim: 16,
            base_channels: 4,
            channel_cap: 32,
            noise_mode: NoiseMode::FixedPerModel,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gen = Generator::new(&mut store, &mut rng, cfg, "gen").unwrap();
        (gen, store)
    }

    #[test]
    fn full_generation_is_deterministic_and_bounded() {
        let (gen, store) = tiny_generator(32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = ExtendedLatent::sample(&mut rng, gen.config().n_latents(), 16);
        let noise = NoiseBank::zero(gen.config());
        let a = gen.generate_full(&store, &w, &noise).unwrap();
        let b = gen.generate_full(&store, &w, &noise).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.is_finite());
        assert!(a.max_abs() <= 1.0);
        assert_eq!(a.resolution(), 32);
    }

    #[test]
    fn distinct_noise_banks_change_the_output() {
        let (gen, store) = tiny_generator(32);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = ExtendedLatent::sample(&mut rng, gen.config().n_latents(), 16);
        let a = gen
            .generate_full(&store, &w, &NoiseBank::seeded(gen.config(), 1))
            .unwrap();
        let b = gen
            .generate_full(&store, &w, &NoiseBank::seeded(gen.config(), 2))
            .unwrap();
        let diff = (a.data() - b.data()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff > 0.0, "different banks must differ");
    }

    #[test]
    fn split_and_rejoin_reproduce_the_full_path() {
        let (gen, store) = tiny_generator(64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = NoiseBank::seeded(gen.config(), 5);
        for level in gen.config().split_levels() {
            let w = ExtendedLatent::sample(&mut rng, gen.config().n_latents(), 16);
            let full = gen.generate_full(&store, &w, &noise).unwrap();
            let state = gen.extract_feature(&store, &w, &noise, level).unwrap();
            let m = split_index(level).unwrap();
            let rejoined = gen
                .generate_from_feature(&store, &state, &w.tail(m).unwrap(), &noise)
                .unwrap();
            let diff = (full.data() - rejoined.data())
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff < 1e-5, "level {level}: max abs diff {diff}");
        }
    }

    #[test]
    fn feature_depends_only_on_prefix_styles() {
        let (gen, store) = tiny_generator(64);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = NoiseBank::zero(gen.config());
        let w = ExtendedLatent::sample(&mut rng, gen.config().n_latents(), 16);
        let level = 16;
        let m = split_index(level).unwrap();
        let base = gen.extract_feature(&store, &w, &noise, level).unwrap();
        // j >= m: feature bitwise unchanged
        for j in m..=w.len() {
            let mut w2 = w.clone();
            w2.set(j, ndarray::Array1::from_elem(16, 3.25));
            let alt = gen.extract_feature(&store, &w2, &noise, level).unwrap();
            assert_eq!(base.feature.data, alt.feature.data, "w_{j} must not reach F");
        }
        // j < m: feature changes
        for j in 1..m {
            let mut w2 = w.clone();
            w2.set(j, ndarray::Array1::from_elem(16, 3.25));
            let alt = gen.extract_feature(&store, &w2, &noise, level).unwrap();
            assert_ne!(base.feature.data, alt.feature.data, "w_{j} must reach F");
        }
    }

    #[test]
    fn extract_shape_matches_channel_schedule() {
        let (gen, store) = tiny_generator(64);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = ExtendedLatent::sample(&mut rng, gen.config().n_latents(), 16);
        let noise = NoiseBank::zero(gen.config());
        let state = gen.extract_feature(&store, &w, &noise, 8).unwrap();
        assert_eq!(
            state.feature.data.shape(),
            &[gen.config().channels(8), 8, 8]
        );
        assert_eq!(state.lowres.shape(), &[3, 8, 8]);
    }

    #[test]
    fn composing_one_block_reproduces_the_next_extract() {
        let (gen, store) = tiny_generator(64);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = ExtendedLatent::sample(&mut rng, gen.config().n_latents(), 16);
        let noise = NoiseBank::seeded(gen.config(), 9);
        let s16 = gen.extract_feature(&store, &w, &noise, 16).unwrap();
        let s32 = gen.extract_feature(&store, &w, &noise, 32).unwrap();
        // apply the 32-block by hand on top of the level-16 state
        let t = Tape::new();
        let styles = gen.latent_vars(&t, w.vectors());
        let feat = t.constant(
            s16.feature
                .data
                .view()
                .insert_axis(ndarray::Axis(0))
                .to_owned()
                .into_dyn(),
        );
        let img = t.constant(
            s16.lowres
                .view()
                .insert_axis(ndarray::Axis(0))
                .to_owned()
                .into_dyn(),
        );
        let block = gen.blocks.iter().find(|b| b.level == 32).unwrap();
        let (f, _i) = gen.apply_block(&t, &store, block, feat, Some(img), &|i| styles[i - 1], &noise);
        let manual = t.value(f);
        let expect = s32.feature.data.view().insert_axis(ndarray::Axis(0));
        let diff = (&*manual - &expect)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-12, "manual block application diverged: {diff}");
    }

    #[test]
    fn misaligned_tail_is_rejected() {
        let (gen, store) = tiny_generator(64);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = ExtendedLatent::sample(&mut rng, gen.config().n_latents(), 16);
        let noise = NoiseBank::zero(gen.config());
        let state = gen.extract_feature(&store, &w, &noise, 32).unwrap();
        // tail starting one index late
        let bad = w.tail(split_index(32).unwrap() + 1).unwrap();
        assert!(gen
            .generate_from_feature(&store, &state, &bad, &noise)
            .is_err());
        // levels outside [8, R/2] cannot be injected
        assert!(gen.extract_feature(&store, &w, &noise, 64).is_err());
        assert!(gen.extract_feature(&store, &w, &noise, 128).is_err());
    }

    #[test]
    fn batched_resume_matches_single_resume() {
        let (gen, store) = tiny_generator(32);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = ExtendedLatent::sample(&mut rng, gen.config().n_latents(), 16);
        let noise = NoiseBank::seeded(gen.config(), 3);
        let state = gen.extract_feature(&store, &w, &noise, 8).unwrap();
        let m = split_index(8).unwrap();
        let tails: Vec<LatentTail> = (0..3)
            .map(|_| LatentTail::sample(&mut rng, m, gen.config().n_latents() - m + 1, 16))
            .collect();
        let batched = gen
            .generate_from_feature_batch(&store, &state, &tails, &noise)
            .unwrap();
        for (i, tail) in tails.iter().enumerate() {
            let single = gen
                .generate_from_feature(&store, &state, tail, &noise)
                .unwrap();
            let diff = (single.data() - batched[i].data())
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff < 1e-12);
        }
    }
}
