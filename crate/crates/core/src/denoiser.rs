//! The clean-motion-prediction denoiser and its control branch.
//!
//! The base network is a small pre-norm transformer encoder. Per-frame
//! feature vectors are projected to `d_model`, given sinusoidal positional
//! encodings, and prefixed with two extra tokens: a learned timestep
//! embedding and a learned condition-label embedding. Frame-token outputs are
//! projected back to feature space.
//!
//! The control branch is a trainable copy of the encoder blocks. Trajectory
//! and pose constraints pass through dedicated per-frame encoders (coordinates
//! plus a mask bit), are fused by a linear projection, and are added to the
//! branch's frame tokens. After each copied block, a zero-initialized
//! projection of its output is added to the corresponding base block's input,
//! so an untrained branch leaves the base network bit-exactly unchanged.

use ndarray::{s, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::control::ControlSpec;
use crate::error::{Error, Result};
use crate::motion::FEATURE_DIM;
use crate::nn::{
    sinusoidal_positions, EncoderBlock, EncoderBlockCache, Linear, ParamVisit, TensorMut,
    TensorRef,
};
use crate::skeleton::JOINT_COUNT;

/// Number of non-frame prefix tokens (timestep + condition).
pub const PREFIX_TOKENS: usize = 2;

/// Trajectory encoder input width: 3 coordinates + mask bit.
pub const TRAJ_ENC_IN: usize = 4;

/// Pose encoder input width: 22 * 3 coordinates + mask bit.
pub const POSE_ENC_IN: usize = JOINT_COUNT * 3 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DenoiserConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub n_classes: usize,
    /// Size of the timestep embedding table; the diffusion step count this
    /// model was built for.
    pub t_steps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            ff_dim: 128,
            n_classes: 5,
            t_steps: 1000,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.ff_dim == 0 || self.n_classes == 0 || self.t_steps == 0 {
            return Err(Error::Config("all denoiser dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Weights of the base denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub cfg: DenoiserConfig,
    pub input_proj: Linear,
    /// (t_steps, d_model), row t-1 embeds diffusion step t.
    pub t_emb: Array2<f64>,
    /// (n_classes, d_model)
    pub cond_emb: Array2<f64>,
    pub blocks: Vec<EncoderBlock>,
    pub final_ln: crate::nn::LayerNorm,
    pub output_proj: Linear,
}

impl DenoiserParams {
    pub fn init(cfg: DenoiserConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        Ok(DenoiserParams {
            cfg,
            input_proj: Linear::init(FEATURE_DIM, d, rng),
            t_emb: Array2::from_shape_fn((cfg.t_steps, d), |_| 0.02 * rng.gen_range(-1.0..1.0)),
            cond_emb: Array2::from_shape_fn((cfg.n_classes, d), |_| {
                0.02 * rng.gen_range(-1.0..1.0)
            }),
            blocks: (0..cfg.n_layers)
                .map(|_| EncoderBlock::init(d, cfg.n_heads, cfg.ff_dim, rng))
                .collect(),
            final_ln: crate::nn::LayerNorm::init(d),
            output_proj: Linear::init(d, FEATURE_DIM, rng),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    fn check_inputs(&self, x: &Array2<f64>, t: usize, condition: usize) -> Result<()> {
        if x.ncols() != FEATURE_DIM {
            return Err(Error::ShapeMismatch(format!(
                "denoiser input must have {FEATURE_DIM} channels, got {}",
                x.ncols()
            )));
        }
        if x.nrows() == 0 {
            return Err(Error::ShapeMismatch("denoiser input must have frames".into()));
        }
        if t < 1 || t > self.cfg.t_steps {
            return Err(Error::InvalidInput(format!(
                "diffusion step {t} outside [1, {}]",
                self.cfg.t_steps
            )));
        }
        if condition >= self.cfg.n_classes {
            return Err(Error::InvalidInput(format!(
                "condition label {condition} outside [0, {})",
                self.cfg.n_classes
            )));
        }
        Ok(())
    }

    /// Assemble the token matrix: [t_emb, cond_emb, frames + positions].
    fn embed(&self, x: &Array2<f64>, t: usize, condition: usize, positions: &[usize]) -> Array2<f64> {
        let n = x.nrows();
        let d = self.cfg.d_model;
        let frames = self.input_proj.forward(x);
        let max_pos = positions.iter().copied().max().unwrap_or(0) + 1;
        let pe = sinusoidal_positions(max_pos, d);
        let mut tokens = Array2::zeros((n + PREFIX_TOKENS, d));
        tokens.row_mut(0).assign(&self.t_emb.row(t - 1));
        tokens.row_mut(1).assign(&self.cond_emb.row(condition));
        for i in 0..n {
            let row = &frames.row(i) + &pe.row(positions[i]);
            tokens.row_mut(i + PREFIX_TOKENS).assign(&row);
        }
        tokens
    }

    /// Predict the clean motion from a noised one. Deterministic.
    pub fn denoise(&self, x_t: &Array2<f64>, t: usize, condition: usize) -> Result<Array2<f64>> {
        let positions: Vec<usize> = (0..x_t.nrows()).collect();
        self.denoise_with_positions(x_t, t, condition, &positions)
    }

    /// [`Self::denoise`] with explicit per-frame positional indices (used by
    /// tests to force two frames onto the same index).
    pub fn denoise_with_positions(
        &self,
        x_t: &Array2<f64>,
        t: usize,
        condition: usize,
        positions: &[usize],
    ) -> Result<Array2<f64>> {
        self.check_inputs(x_t, t, condition)?;
        let mut tokens = self.embed(x_t, t, condition, positions);
        for block in &self.blocks {
            let (out, _) = block.forward(&tokens);
            tokens = out;
        }
        let (normed, _) = self.final_ln.forward(&tokens);
        Ok(self
            .output_proj
            .forward(&normed.slice(s![PREFIX_TOKENS.., ..]).to_owned()))
    }

    /// Forward pass retaining every intermediate needed for the backward
    /// pass.
    pub fn forward_train(
        &self,
        x_t: &Array2<f64>,
        t: usize,
        condition: usize,
    ) -> Result<(Array2<f64>, DenoiserCache)> {
        self.check_inputs(x_t, t, condition)?;
        let positions: Vec<usize> = (0..x_t.nrows()).collect();
        let tokens0 = self.embed(x_t, t, condition, &positions);
        let mut tokens = tokens0.clone();
        let mut block_inputs = Vec::with_capacity(self.blocks.len());
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            block_inputs.push(tokens.clone());
            let (out, cache) = block.forward(&tokens);
            block_caches.push(cache);
            tokens = out;
        }
        let (normed, ln_cache) = self.final_ln.forward(&tokens);
        let frame_tokens = normed.slice(s![PREFIX_TOKENS.., ..]).to_owned();
        let out = self.output_proj.forward(&frame_tokens);
        Ok((
            out,
            DenoiserCache {
                x: x_t.clone(),
                t,
                condition,
                block_caches,
                ln_input: tokens,
                ln_cache,
                frame_tokens,
                _block_inputs: block_inputs,
            },
        ))
    }

    /// Backward through [`Self::forward_train`]: accumulates parameter
    /// gradients into `grads`, returns the gradient with respect to the
    /// noised input.
    pub fn backward(
        &self,
        cache: &DenoiserCache,
        d_out: &Array2<f64>,
        grads: &mut DenoiserParams,
    ) -> Array2<f64> {
        let d = self.cfg.d_model;
        let n_tokens = cache.ln_input.nrows();

        let d_frames = self
            .output_proj
            .backward(&cache.frame_tokens, d_out, &mut grads.output_proj);
        let mut d_normed = Array2::zeros((n_tokens, d));
        d_normed.slice_mut(s![PREFIX_TOKENS.., ..]).assign(&d_frames);
        let mut d_tokens = self
            .final_ln
            .backward(&cache.ln_cache, &d_normed, &mut grads.final_ln);

        for i in (0..self.blocks.len()).rev() {
            d_tokens = self.blocks[i].backward(&cache.block_caches[i], &d_tokens, &mut grads.blocks[i]);
        }

        // Split token gradients back into embeddings and frame projections.
        {
            let mut row = grads.t_emb.row_mut(cache.t - 1);
            row += &d_tokens.row(0);
        }
        {
            let mut row = grads.cond_emb.row_mut(cache.condition);
            row += &d_tokens.row(1);
        }
        let d_frame_tokens = d_tokens.slice(s![PREFIX_TOKENS.., ..]).to_owned();
        self.input_proj
            .backward(&cache.x, &d_frame_tokens, &mut grads.input_proj)
    }
}

/// Intermediates of one base forward pass.
pub struct DenoiserCache {
    x: Array2<f64>,
    t: usize,
    condition: usize,
    block_caches: Vec<EncoderBlockCache>,
    ln_input: Array2<f64>,
    ln_cache: crate::nn::LayerNormCache,
    frame_tokens: Array2<f64>,
    _block_inputs: Vec<Array2<f64>>,
}

impl ParamVisit for DenoiserParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, TensorRef<'a>)) {
        self.input_proj.visit(&format!("{prefix}input_proj"), f);
        f(format!("{prefix}t_emb"), TensorRef::M(&self.t_emb));
        f(format!("{prefix}cond_emb"), TensorRef::M(&self.cond_emb));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}blocks.{i}"), f);
        }
        self.final_ln.visit(&format!("{prefix}final_ln"), f);
        self.output_proj.visit(&format!("{prefix}output_proj"), f);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, TensorMut<'a>)) {
        self.input_proj.visit_mut(&format!("{prefix}input_proj"), f);
        f(format!("{prefix}t_emb"), TensorMut::M(&mut self.t_emb));
        f(format!("{prefix}cond_emb"), TensorMut::M(&mut self.cond_emb));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}blocks.{i}"), f);
        }
        self.final_ln.visit_mut(&format!("{prefix}final_ln"), f);
        self.output_proj.visit_mut(&format!("{prefix}output_proj"), f);
    }
}

// ---------------------------------------------------------------------------
// Control branch
// ---------------------------------------------------------------------------

/// Weights of the control branch: copied encoder blocks, per-frame
/// trajectory/pose encoders, the fusion projection, and per-layer
/// zero-initialized output projections.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlNetParams {
    pub blocks: Vec<EncoderBlock>,
    pub traj_encoder: Linear,
    pub pose_encoder: Linear,
    pub fusion: Linear,
    pub zero_proj: Vec<Linear>,
}

impl ControlNetParams {
    /// Blocks start as copies of the trained base blocks; the injection
    /// projections start at exactly zero so the branch is initially inert.
    pub fn init_from_base(base: &DenoiserParams, rng: &mut ChaCha8Rng) -> Self {
        let d = base.cfg.d_model;
        ControlNetParams {
            blocks: base.blocks.clone(),
            traj_encoder: Linear::init(TRAJ_ENC_IN, d, rng),
            pose_encoder: Linear::init(POSE_ENC_IN, d, rng),
            fusion: Linear::init(2 * d, d, rng),
            zero_proj: (0..base.cfg.n_layers).map(|_| Linear::zeros(d, d)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    /// Per-frame control features: trajectory and pose constraints encoded
    /// separately (masked-off coordinates zeroed, mask bit appended) and
    /// fused by a linear projection of the concatenation.
    pub fn encode_controls(&self, c: &ControlSpec) -> (Array2<f64>, ControlEncodeCache) {
        let n = c.n_frames();
        let mut traj_in = Array2::zeros((n, TRAJ_ENC_IN));
        let mut pose_in = Array2::zeros((n, POSE_ENC_IN));
        for f in 0..n {
            if c.traj_mask()[f] {
                let p = c.traj_point(f);
                traj_in[[f, 0]] = p[0];
                traj_in[[f, 1]] = p[1];
                traj_in[[f, 2]] = p[2];
                traj_in[[f, 3]] = 1.0;
            }
            if c.pose_mask()[f] {
                for j in 0..JOINT_COUNT {
                    let p = c.pose_joint(f, j);
                    pose_in[[f, 3 * j]] = p[0];
                    pose_in[[f, 3 * j + 1]] = p[1];
                    pose_in[[f, 3 * j + 2]] = p[2];
                }
                pose_in[[f, POSE_ENC_IN - 1]] = 1.0;
            }
        }
        let traj_feat = self.traj_encoder.forward(&traj_in);
        let pose_feat = self.pose_encoder.forward(&pose_in);
        let mut fused_in = Array2::zeros((n, 2 * traj_feat.ncols()));
        fused_in
            .slice_mut(s![.., ..traj_feat.ncols()])
            .assign(&traj_feat);
        fused_in
            .slice_mut(s![.., traj_feat.ncols()..])
            .assign(&pose_feat);
        let fused = self.fusion.forward(&fused_in);
        (
            fused,
            ControlEncodeCache {
                traj_in,
                pose_in,
                fused_in,
            },
        )
    }
}

pub struct ControlEncodeCache {
    traj_in: Array2<f64>,
    pose_in: Array2<f64>,
    fused_in: Array2<f64>,
}

impl ParamVisit for ControlNetParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, TensorRef<'a>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}blocks.{i}"), f);
        }
        self.traj_encoder.visit(&format!("{prefix}traj_encoder"), f);
        self.pose_encoder.visit(&format!("{prefix}pose_encoder"), f);
        self.fusion.visit(&format!("{prefix}fusion"), f);
        for (i, z) in self.zero_proj.iter().enumerate() {
            z.visit(&format!("{prefix}zero_proj.{i}"), f);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, TensorMut<'a>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}blocks.{i}"), f);
        }
        self.traj_encoder
            .visit_mut(&format!("{prefix}traj_encoder"), f);
        self.pose_encoder
            .visit_mut(&format!("{prefix}pose_encoder"), f);
        self.fusion.visit_mut(&format!("{prefix}fusion"), f);
        for (i, z) in self.zero_proj.iter_mut().enumerate() {
            z.visit_mut(&format!("{prefix}zero_proj.{i}"), f);
        }
    }
}

/// Control-conditioned denoising. The branch consumes the base input tokens
/// plus the fused control features (added per frame); after each copied block
/// its zero-initialized projection is added to the corresponding base block's
/// input; the prediction comes from the base head.
pub fn controlled_denoise(
    base: &DenoiserParams,
    cn: &ControlNetParams,
    x_t: &Array2<f64>,
    t: usize,
    condition: usize,
    c: &ControlSpec,
) -> Result<Array2<f64>> {
    let (out, _) = controlled_forward(base, cn, x_t, t, condition, c)?;
    Ok(out)
}

/// [`controlled_denoise`] retaining caches for the backward pass.
pub fn controlled_forward(
    base: &DenoiserParams,
    cn: &ControlNetParams,
    x_t: &Array2<f64>,
    t: usize,
    condition: usize,
    c: &ControlSpec,
) -> Result<(Array2<f64>, ControlledCache)> {
    base.check_inputs(x_t, t, condition)?;
    if c.n_frames() != x_t.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "control spec covers {} frames but motion has {}",
            c.n_frames(),
            x_t.nrows()
        )));
    }
    let positions: Vec<usize> = (0..x_t.nrows()).collect();
    let b0 = base.embed(x_t, t, condition, &positions);
    let (ctrl, enc_cache) = cn.encode_controls(c);
    let mut c_tokens = b0.clone();
    {
        let mut frames = c_tokens.slice_mut(s![PREFIX_TOKENS.., ..]);
        frames += &ctrl;
    }

    let n_layers = base.blocks.len();
    let mut b_tokens = b0;
    let mut ctrl_outputs = Vec::with_capacity(n_layers);
    let mut ctrl_caches = Vec::with_capacity(n_layers);
    let mut ctrl_inputs = Vec::with_capacity(n_layers);
    let mut base_caches = Vec::with_capacity(n_layers);
    let mut base_inputs = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        ctrl_inputs.push(c_tokens.clone());
        let (c_next, c_cache) = cn.blocks[l].forward(&c_tokens);
        ctrl_caches.push(c_cache);
        let z = cn.zero_proj[l].forward(&c_next);
        ctrl_outputs.push(c_next.clone());
        c_tokens = c_next;

        let b_in = &b_tokens + &z;
        base_inputs.push(b_in.clone());
        let (b_next, b_cache) = base.blocks[l].forward(&b_in);
        base_caches.push(b_cache);
        b_tokens = b_next;
    }

    let (normed, ln_cache) = base.final_ln.forward(&b_tokens);
    let frame_tokens = normed.slice(s![PREFIX_TOKENS.., ..]).to_owned();
    let out = base.output_proj.forward(&frame_tokens);
    Ok((
        out,
        ControlledCache {
            enc_cache,
            ctrl_caches,
            ctrl_outputs,
            base_caches,
            ln_cache,
            frame_tokens,
            n_frames: x_t.nrows(),
        },
    ))
}

pub struct ControlledCache {
    enc_cache: ControlEncodeCache,
    ctrl_caches: Vec<EncoderBlockCache>,
    ctrl_outputs: Vec<Array2<f64>>,
    base_caches: Vec<EncoderBlockCache>,
    ln_cache: crate::nn::LayerNormCache,
    frame_tokens: Array2<f64>,
    n_frames: usize,
}

/// Backward through [`controlled_forward`] accumulating gradients for the
/// control branch only; the base network is frozen (its activations still
/// carry gradient flow).
pub fn controlled_backward(
    base: &DenoiserParams,
    cn: &ControlNetParams,
    cache: &ControlledCache,
    d_out: &Array2<f64>,
    grads: &mut ControlNetParams,
) {
    let d = base.cfg.d_model;
    let n_tokens = cache.n_frames + PREFIX_TOKENS;
    // Scratch sink for frozen base parameter gradients.
    let mut base_sink = base.zeros_like();

    let d_frames = base
        .output_proj
        .backward(&cache.frame_tokens, d_out, &mut base_sink.output_proj);
    let mut d_normed = Array2::zeros((n_tokens, d));
    d_normed.slice_mut(s![PREFIX_TOKENS.., ..]).assign(&d_frames);
    let mut d_b = base
        .final_ln
        .backward(&cache.ln_cache, &d_normed, &mut base_sink.final_ln);

    // Gradient w.r.t. the control branch's token stream, accumulated from the
    // injection points as we descend.
    let mut d_c: Option<Array2<f64>> = None;
    for l in (0..base.blocks.len()).rev() {
        let d_b_in =
            base.blocks[l].backward(&cache.base_caches[l], &d_b, &mut base_sink.blocks[l]);
        // b_in = b + zero_proj(c_out): both summands receive d_b_in.
        let d_c_out_from_z =
            cn.zero_proj[l].backward(&cache.ctrl_outputs[l], &d_b_in, &mut grads.zero_proj[l]);
        let d_c_out = match d_c {
            Some(upper) => upper + &d_c_out_from_z,
            None => d_c_out_from_z,
        };
        d_c = Some(cn.blocks[l].backward(&cache.ctrl_caches[l], &d_c_out, &mut grads.blocks[l]));
        d_b = d_b_in;
    }

    // Control branch input = base tokens + fused features on frame rows.
    if let Some(d_c0) = d_c {
        let d_fused = d_c0.slice(s![PREFIX_TOKENS.., ..]).to_owned();
        let d_fused_in = cn
            .fusion
            .backward(&cache.enc_cache.fused_in, &d_fused, &mut grads.fusion);
        let d_traj_feat = d_fused_in.slice(s![.., ..d]).to_owned();
        let d_pose_feat = d_fused_in.slice(s![.., d..]).to_owned();
        cn.traj_encoder
            .backward(&cache.enc_cache.traj_in, &d_traj_feat, &mut grads.traj_encoder);
        cn.pose_encoder
            .backward(&cache.enc_cache.pose_in, &d_pose_feat, &mut grads.pose_encoder);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::ControlSpec;
    use crate::motion::FramePose;
    use ndarray::Array2;
    use rand::SeedableRng;

    fn small_cfg() -> DenoiserConfig {
        DenoiserConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            ff_dim: 32,
            n_classes: 3,
            t_steps: 10,
        }
    }

    fn random_input(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, FEATURE_DIM), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn output_shape_matches_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = DenoiserParams::init(small_cfg(), &mut rng).unwrap();
        for n in [1usize, 16, 196] {
            let x = random_input(&mut rng, n);
            let y = params.denoise(&x, 3, 1).unwrap();
            assert_eq!(y.dim(), (n, FEATURE_DIM));
            assert!(y.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn identical_tokens_get_identical_outputs() {
        // Two frames with identical features forced onto the same positional
        // index are indistinguishable to attention.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = DenoiserParams::init(small_cfg(), &mut rng).unwrap();
        let mut x = random_input(&mut rng, 4);
        let row = x.row(1).to_owned();
        x.row_mut(3).assign(&row);
        let y = params
            .denoise_with_positions(&x, 2, 0, &[0, 1, 2, 1])
            .unwrap();
        for c in 0..FEATURE_DIM {
            assert!(
                (y[[1, c]] - y[[3, c]]).abs() < 1e-12,
                "channel {c}: {} vs {}",
                y[[1, c]],
                y[[3, c]]
            );
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = DenoiserParams::init(small_cfg(), &mut rng).unwrap();
        let x = random_input(&mut rng, 4);
        assert!(params.denoise(&x, 0, 0).is_err());
        assert!(params.denoise(&x, 11, 0).is_err());
        assert!(params.denoise(&x, 1, 3).is_err());
        let bad = Array2::zeros((4, 10));
        assert!(params.denoise(&bad, 1, 0).is_err());
    }

    #[test]
    fn training_gradient_matches_fd_on_sampled_weights() {
        // MSE loss against a fixed target; check ~1% of weights.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = DenoiserParams::init(small_cfg(), &mut rng).unwrap();
        let x0 = random_input(&mut rng, 5);
        let x_t = random_input(&mut rng, 5);

        let loss = |p: &DenoiserParams| -> f64 {
            let pred = p.denoise(&x_t, 4, 2).unwrap();
            (&pred - &x0).mapv(|v| v * v).mean().unwrap()
        };

        let mut grads = params.zeros_like();
        let (pred, cache) = params.forward_train(&x_t, 4, 2).unwrap();
        let d_out = (&pred - &x0) * (2.0 / (pred.len() as f64));
        params.backward(&cache, &d_out, &mut grads);

        let flat = params.flatten();
        let gflat = grads.flatten();
        let mut checked = 0;
        let mut p = params.clone();
        let h = 1e-5;
        let stride = (flat.len() / 120).max(1);
        for idx in (0..flat.len()).step_by(stride) {
            let mut fp = flat.clone();
            fp[idx] += h;
            p.unflatten(&fp);
            let lp = loss(&p);
            let mut fm = flat.clone();
            fm[idx] -= h;
            p.unflatten(&fm);
            let lm = loss(&p);
            let fd = (lp - lm) / (2.0 * h);
            let an = gflat[idx];
            if fd.abs().max(an.abs()) > 1e-10 {
                let rel = (fd - an).abs() / fd.abs().max(an.abs());
                assert!(rel < 1e-3, "weight {idx}: fd {fd} vs analytic {an} (rel {rel})");
            }
            checked += 1;
        }
        assert!(checked >= 100);
    }

    fn spec_with_controls(n: usize) -> ControlSpec {
        let mut c = ControlSpec::empty(n);
        c.set_traj_point(0, [0.5, 0.9, -0.3]);
        let mut pose = FramePose::zeros();
        pose.set_joint(3, [0.1, 1.2, 0.0]);
        if n > 1 {
            c.set_pose_frame(n - 1, &pose);
        } else {
            c.set_pose_frame(0, &pose);
        }
        c
    }

    #[test]
    fn encode_controls_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = DenoiserParams::init(small_cfg(), &mut rng).unwrap();
        let cn = ControlNetParams::init_from_base(&params, &mut rng);

        // Fully masked-off spec: every frame encodes the same zero-input
        // vector.
        let empty = ControlSpec::empty(6);
        let (feat, _) = cn.encode_controls(&empty);
        assert_eq!(feat.dim(), (6, 16));
        for f in 1..6 {
            for k in 0..16 {
                assert_eq!(feat[[f, k]], feat[[0, k]]);
            }
        }

        // Toggling a mask bit changes that frame's encoding only.
        let mut one = ControlSpec::empty(6);
        one.set_traj_point(2, [0.0, 0.0, 0.0]); // mask bit only; coords zero
        let (feat2, _) = cn.encode_controls(&one);
        for f in 0..6 {
            let differs = (0..16).any(|k| feat2[[f, k]] != feat[[f, k]]);
            assert_eq!(differs, f == 2, "frame {f}");
        }

        // Fused dimension is d_model for any N.
        for n in [1usize, 3, 17] {
            let (feat, _) = cn.encode_controls(&ControlSpec::empty(n));
            assert_eq!(feat.dim(), (n, 16));
        }
    }

    #[test]
    fn zero_init_branch_is_bitwise_inert() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = DenoiserParams::init(small_cfg(), &mut rng).unwrap();
        let cn = ControlNetParams::init_from_base(&params, &mut rng);
        for _ in 0..10 {
            let x = random_input(&mut rng, 7);
            let c = spec_with_controls(7);
            let plain = params.denoise(&x, 5, 1).unwrap();
            let controlled = controlled_denoise(&params, &cn, &x, 5, 1, &c).unwrap();
            for (a, b) in plain.iter().zip(controlled.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn trained_projection_changes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = DenoiserParams::init(small_cfg(), &mut rng).unwrap();
        let mut cn = ControlNetParams::init_from_base(&params, &mut rng);
        // Simulate training having moved a projection off zero.
        cn.zero_proj[0].w[[0, 0]] = 0.05;
        let x = random_input(&mut rng, 7);
        let c = spec_with_controls(7);
        let plain = params.denoise(&x, 5, 1).unwrap();
        let controlled = controlled_denoise(&params, &cn, &x, 5, 1, &c).unwrap();
        let linf = plain
            .iter()
            .zip(controlled.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(linf > 1e-9);
    }

    #[test]
    fn output_shape_invariant_to_mask_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = DenoiserParams::init(small_cfg(), &mut rng).unwrap();
        let cn = ControlNetParams::init_from_base(&params, &mut rng);
        let n = 196;
        let x = random_input(&mut rng, n);
        for density in [1usize, 2, 5, 49, 196] {
            let mut c = ControlSpec::empty(n);
            for f in 0..density {
                c.set_traj_point(f * (n / density), [0.1, 0.9, 0.2]);
            }
            let y = controlled_denoise(&params, &cn, &x, 3, 0, &c).unwrap();
            assert_eq!(y.dim(), (n, FEATURE_DIM));
        }
    }

    #[test]
    fn controlnet_gradient_matches_fd_on_sampled_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = DenoiserParams::init(small_cfg(), &mut rng).unwrap();
        let mut cn = ControlNetParams::init_from_base(&base, &mut rng);
        // Move proj off zero so the branch participates.
        for z in cn.zero_proj.iter_mut() {
            for v in z.w.iter_mut() {
                *v = rng.gen_range(-0.05..0.05);
            }
        }
        let x0 = random_input(&mut rng, 5);
        let x_t = random_input(&mut rng, 5);
        let c = spec_with_controls(5);

        let loss = |p: &ControlNetParams| -> f64 {
            let pred = controlled_denoise(&base, p, &x_t, 4, 2, &c).unwrap();
            (&pred - &x0).mapv(|v| v * v).mean().unwrap()
        };

        let mut grads = cn.zeros_like();
        let (pred, cache) = controlled_forward(&base, &cn, &x_t, 4, 2, &c).unwrap();
        let d_out = (&pred - &x0) * (2.0 / (pred.len() as f64));
        controlled_backward(&base, &cn, &cache, &d_out, &mut grads);

        let flat = cn.flatten();
        let gflat = grads.flatten();
        let h = 1e-5;
        let stride = (flat.len() / 100).max(1);
        let mut p = cn.clone();
        for idx in (0..flat.len()).step_by(stride) {
            let mut fp = flat.clone();
            fp[idx] += h;
            p.unflatten(&fp);
            let lp = loss(&p);
            let mut fm = flat.clone();
            fm[idx] -= h;
            p.unflatten(&fm);
            let lm = loss(&p);
            let fd = (lp - lm) / (2.0 * h);
            let an = gflat[idx];
            if fd.abs().max(an.abs()) > 1e-10 {
                let rel = (fd - an).abs() / fd.abs().max(an.abs());
                assert!(rel < 1e-3, "weight {idx}: fd {fd} vs analytic {an} (rel {rel})");
            }
        }
    }
}
