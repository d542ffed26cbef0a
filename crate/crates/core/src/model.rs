//! Shared multimodal encoder, latent projection, mask and modality tokens,
//! lightweight decoder, output projection and the masked reconstruction loss.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{sample_mask_plan, scatter_backward, scatter_with_mask_tokens, MaskPlan};
use crate::modality::{Modality, PerModality};
use crate::nn::{Linear, Transformer, TransformerCache};
use crate::params::{join, trunc_normal, Parameters};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::{
    embed_rows, grid_dims, patchify, sincos_pe, unpatchify, TokenSequence, TokenizerParams,
};
use crate::volume::{Grid3, MultimodalVolume, Shape3};

/// Standard deviation of the truncated-normal initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Encoder width `d`.
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    /// Decoder width `d′`.
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    /// Patch edge length `p` in voxels.
    pub patch: usize,
    /// Dirichlet concentration for pre-training masks.
    pub alpha: f64,
    /// Global masking ratio `r`.
    pub mask_ratio: f64,
    /// Volume shape `(H, W, D)` after preprocessing.
    pub input_shape: Shape3,
}

impl ModelConfig {
    /// Desk-scale preset: 32³ volumes, 8³ patches, d = 96.
    pub fn tiny() -> Self {
        Self {
            dim: 96,
            depth: 4,
            heads: 4,
            mlp_dim: 192,
            dec_dim: 48,
            dec_depth: 2,
            dec_heads: 4,
            patch: 8,
            alpha: 1.0,
            mask_ratio: 0.75,
            input_shape: (32, 32, 32),
        }
    }

    /// Full-size preset: 128³ volumes, 16³ patches, 12 blocks of width 768.
    pub fn paper() -> Self {
        Self {
            dim: 768,
            depth: 12,
            heads: 12,
            mlp_dim: 1536,
            dec_dim: 384,
            dec_depth: 3,
            dec_heads: 12,
            patch: 16,
            alpha: 1.0,
            mask_ratio: 0.75,
            input_shape: (128, 128, 128),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.into()))
            }
        };
        check(
            self.depth >= 1 && self.dec_depth >= 1,
            "encoder and decoder need at least one block",
        )?;
        check(
            self.heads > 0 && self.dim % self.heads == 0,
            "dim must be divisible by heads",
        )?;
        check(self.dim >= 6, "dim must be at least 6")?;
        check(
            self.dec_heads > 0 && self.dec_dim % self.dec_heads == 0,
            "dec_dim must be divisible by dec_heads",
        )?;
        check(self.dec_dim >= 6, "dec_dim must be at least 6")?;
        check(self.mlp_dim > 0, "mlp_dim must be positive")?;
        check(self.alpha > 0.0, "alpha must be positive")?;
        check(
            (0.0..=1.0).contains(&self.mask_ratio),
            "mask_ratio must lie in [0, 1]",
        )?;
        grid_dims(self.input_shape, self.patch).map_err(|e| Error::Config(format!("{e}")))?;
        Ok(())
    }

    /// Decoder MLP width, keeping the encoder's MLP ratio.
    pub fn dec_mlp_dim(&self) -> usize {
        (self.mlp_dim * self.dec_dim / self.dim).max(1)
    }

    pub fn patch_voxels(&self) -> usize {
        self.patch * self.patch * self.patch
    }

    pub fn grid_dims(&self) -> Shape3 {
        let (h, w, d) = self.input_shape;
        (h / self.patch, w / self.patch, d / self.patch)
    }

    /// Patches per modality, `L`.
    pub fn patches_per_modality(&self) -> usize {
        let (a, b, c) = self.grid_dims();
        a * b * c
    }
}

/// Every learnable parameter of the pre-training model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub tokenizer: TokenizerParams<T>,
    pub cls_token: Tensor<T>,
    pub encoder: Transformer<T>,
    /// Projection `d → d′` into the decoder width.
    pub latent: Linear<T>,
    pub mask_token: Tensor<T>,
    pub modality_embed: PerModality<Tensor<T>>,
    pub decoder: Transformer<T>,
    /// Shared projection `d′ → p³` back to voxel space.
    pub output: Linear<T>,
}

impl<T: Scalar> ModelState<T> {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let s = INIT_STD;
        Ok(Self {
            tokenizer: TokenizerParams::init(config.patch_voxels(), config.dim, s, rng),
            cls_token: trunc_normal(1, config.dim, s, rng),
            encoder: Transformer::init(
                config.dim,
                config.depth,
                config.heads,
                config.mlp_dim,
                s,
                rng,
            ),
            latent: Linear::init(config.dim, config.dec_dim, s, rng),
            mask_token: trunc_normal(1, config.dec_dim, s, rng),
            modality_embed: Modality::ALL
                .iter()
                .map(|&m| (m, trunc_normal(1, config.dec_dim, s, rng)))
                .collect(),
            decoder: Transformer::init(
                config.dec_dim,
                config.dec_depth,
                config.dec_heads,
                config.dec_mlp_dim(),
                s,
                rng,
            ),
            output: Linear::init(config.dec_dim, config.patch_voxels(), s, rng),
        })
    }

    /// Structurally identical all-zero state, used as a gradient buffer.
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            tokenizer: TokenizerParams::zeros(config.patch_voxels(), config.dim),
            cls_token: Tensor::zeros(1, config.dim),
            encoder: Transformer::zeros(config.dim, config.depth, config.heads, config.mlp_dim),
            latent: Linear::zeros(config.dim, config.dec_dim),
            mask_token: Tensor::zeros(1, config.dec_dim),
            modality_embed: Modality::ALL
                .iter()
                .map(|&m| (m, Tensor::zeros(1, config.dec_dim)))
                .collect(),
            decoder: Transformer::zeros(
                config.dec_dim,
                config.dec_depth,
                config.dec_heads,
                config.dec_mlp_dim(),
            ),
            output: Linear::zeros(config.dec_dim, config.patch_voxels()),
        }
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<U: Scalar>(&self, config: &ModelConfig) -> ModelState<U> {
        let mut out = ModelState::<U>::zeros(config);
        let src = self.named_parameters();
        let mut i = 0;
        out.visit_mut("", &mut |_, t| {
            *t = src[i].1.cast();
            i += 1;
        });
        out
    }
}

impl<T: Scalar> Parameters<T> for ModelState<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.tokenizer.visit(&join(prefix, "tokenizer"), f);
        f(&join(prefix, "cls_token"), &self.cls_token);
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.latent.visit(&join(prefix, "latent"), f);
        f(&join(prefix, "mask_token"), &self.mask_token);
        for (m, t) in self.modality_embed.iter() {
            f(&join(prefix, &format!("modality_embed.{}", m.name())), t);
        }
        self.decoder.visit(&join(prefix, "decoder"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.tokenizer.visit_mut(&join(prefix, "tokenizer"), f);
        f(&join(prefix, "cls_token"), &mut self.cls_token);
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.latent.visit_mut(&join(prefix, "latent"), f);
        f(&join(prefix, "mask_token"), &mut self.mask_token);
        for (m, t) in self.modality_embed.iter_mut() {
            f(&join(prefix, &format!("modality_embed.{}", m.name())), t);
        }
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// Result of one encoder pass over `1 + L^v` tokens.
#[derive(Clone, Debug)]
pub struct EncoderOutput<T> {
    pub cls_out: Vec<T>,
    /// Encoded visible tokens (cls excluded) with their provenance.
    pub tokens: TokenSequence<T>,
    /// Raw output of every encoder block, cls row first.
    pub per_block: Vec<Tensor<T>>,
    /// Full normalized output sequence, cls row first.
    pub hidden: Tensor<T>,
}

impl<T: Scalar> EncoderOutput<T> {
    pub fn sequence_len(&self) -> usize {
        self.hidden.rows()
    }
}

pub(crate) struct EncodeCache<T> {
    /// Visible patch rows per modality in gather order.
    inputs: Vec<(Modality, Tensor<T>)>,
    transformer: TransformerCache<T>,
}

/// Tokenizes the visible patches of every plan modality.
pub fn embed_visible<T: Scalar>(
    volume: &MultimodalVolume,
    plan: &MaskPlan,
    state: &ModelState<T>,
    config: &ModelConfig,
) -> Result<TokenSequence<T>> {
    Ok(embed_visible_cached(volume, plan, state, config)?.0)
}

fn embed_visible_cached<T: Scalar>(
    volume: &MultimodalVolume,
    plan: &MaskPlan,
    state: &ModelState<T>,
    config: &ModelConfig,
) -> Result<(TokenSequence<T>, Vec<(Modality, Tensor<T>)>)> {
    if plan.modalities.is_empty() {
        return Err(Error::Plan(
            "encoder needs a non-empty modality subset".into(),
        ));
    }
    if volume.shape() != config.input_shape {
        return Err(Error::Dimension(format!(
            "volume shape {:?} does not match model input {:?}",
            volume.shape(),
            config.input_shape
        )));
    }
    if plan.patches != config.patches_per_modality() {
        return Err(Error::Plan(format!(
            "plan covers {} patches per modality, model expects {}",
            plan.patches,
            config.patches_per_modality()
        )));
    }
    let pe = sincos_pe::<T>(config.grid_dims(), config.dim)?;
    let mut parts = Vec::new();
    let mut inputs = Vec::new();
    let mut provenance = Vec::with_capacity(plan.total_visible);
    for (&m, vis) in plan.modalities.iter().zip(&plan.visible) {
        if vis.is_empty() {
            continue;
        }
        let grid = volume.grid(m)?;
        let patches = patchify::<T, f32>(grid, config.patch)?;
        let seq = embed_rows(&patches.patches, vis, m, state.tokenizer.get(m)?, &pe);
        inputs.push((m, patches.patches.select_rows(vis)));
        provenance.extend(seq.provenance);
        parts.push(seq.tokens);
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    let tokens = if refs.is_empty() {
        Tensor::zeros(0, config.dim)
    } else {
        Tensor::vstack(&refs)
    };
    Ok((TokenSequence { tokens, provenance }, inputs))
}

/// [`encode`] with the modality subset stated explicitly; the plan must
/// cover exactly that subset.
pub fn encode_subset<T: Scalar>(
    volume: &MultimodalVolume,
    subset: &[Modality],
    plan: &MaskPlan,
    state: &ModelState<T>,
    config: &ModelConfig,
) -> Result<EncoderOutput<T>> {
    if subset.is_empty() {
        return Err(Error::Plan(
            "encoder needs a non-empty modality subset".into(),
        ));
    }
    let mut sorted = subset.to_vec();
    sorted.sort();
    if sorted != plan.modalities {
        return Err(Error::Plan(format!(
            "plan covers {:?}, subset is {:?}",
            plan.modalities, subset
        )));
    }
    encode(volume, plan, state, config)
}

/// Runs the encoder over already-embedded tokens with `cls` prepended.
pub fn encode_sequence<T: Scalar>(
    tokens: &TokenSequence<T>,
    state: &ModelState<T>,
) -> EncoderOutput<T> {
    encode_sequence_cached(tokens, state).0
}

fn encode_sequence_cached<T: Scalar>(
    tokens: &TokenSequence<T>,
    state: &ModelState<T>,
) -> (EncoderOutput<T>, TransformerCache<T>) {
    let x = Tensor::vstack(&[&state.cls_token, &tokens.tokens]);
    let (out, cache) = state.encoder.forward(&x);
    let hidden = out.output;
    let n = hidden.rows();
    let enc = EncoderOutput {
        cls_out: hidden.row(0).to_vec(),
        tokens: TokenSequence {
            tokens: hidden.slice_rows(1, n),
            provenance: tokens.provenance.clone(),
        },
        per_block: out.per_block,
        hidden,
    };
    (enc, cache)
}

/// Tokenizes the plan's visible patches, prepends `cls` and runs the encoder.
pub fn encode<T: Scalar>(
    volume: &MultimodalVolume,
    plan: &MaskPlan,
    state: &ModelState<T>,
    config: &ModelConfig,
) -> Result<EncoderOutput<T>> {
    Ok(encode_cached(volume, plan, state, config)?.0)
}

pub(crate) fn encode_cached<T: Scalar>(
    volume: &MultimodalVolume,
    plan: &MaskPlan,
    state: &ModelState<T>,
    config: &ModelConfig,
) -> Result<(EncoderOutput<T>, EncodeCache<T>)> {
    let (seq, inputs) = embed_visible_cached(volume, plan, state, config)?;
    let (enc, transformer) = encode_sequence_cached(&seq, state);
    Ok((
        enc,
        EncodeCache {
            inputs,
            transformer,
        },
    ))
}

/// Backpropagates gradients of the encoder's normalized output and/or its
/// per-block snapshots into tokenizer, cls and encoder parameters.
pub(crate) fn encode_backward<T: Scalar>(
    cache: &EncodeCache<T>,
    state: &ModelState<T>,
    d_hidden: Option<&Tensor<T>>,
    d_per_block: Option<&[Option<Tensor<T>>]>,
    grads: &mut ModelState<T>,
) {
    let dx = state.encoder.backward(
        &cache.transformer,
        d_hidden,
        d_per_block,
        &mut grads.encoder,
    );
    for (g, &d) in grads.cls_token.as_mut_slice().iter_mut().zip(dx.row(0)) {
        *g += d;
    }
    let mut row = 1;
    for (m, inputs) in &cache.inputs {
        let n = inputs.rows();
        let d_tokens = dx.slice_rows(row, row + n);
        let map = state
            .tokenizer
            .get(*m)
            .expect("tokenizer covers every modality");
        let gmap = grads
            .tokenizer
            .maps
            .get_mut(*m)
            .expect("gradient covers every modality");
        map.backward_params(inputs, &d_tokens, gmap);
        row += n;
    }
}

pub(crate) struct DecodeCache<T> {
    hidden: Tensor<T>,
    provenance: Vec<(Modality, usize)>,
    transformer: TransformerCache<T>,
    decoded: Tensor<T>,
}

/// Builds the decoder input `[cls′; H_m …]` with `H_m = Z_m + C_m + PE′`.
pub fn decoder_input<T: Scalar>(
    cls_latent: &[T],
    latent_tokens: &PerModality<Tensor<T>>,
    state: &ModelState<T>,
    config: &ModelConfig,
) -> Result<Tensor<T>> {
    let pe = sincos_pe::<T>(config.grid_dims(), config.dec_dim)?;
    let mut parts = vec![Tensor::row_vector(cls_latent.to_vec())];
    for (m, z) in latent_tokens.iter() {
        if z.shape() != pe.shape() {
            return Err(Error::Dimension(format!(
                "latent tokens for {m} have shape {:?}, expected {:?}",
                z.shape(),
                pe.shape()
            )));
        }
        let mut h = z.clone();
        h.add_assign(&pe);
        h.add_row_broadcast(
            state
                .modality_embed
                .get(m)
                .ok_or(Error::MissingModality(m))?
                .as_slice(),
        );
        parts.push(h);
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Ok(Tensor::vstack(&refs))
}

/// Decodes complete per-modality latent grids `Z_m` into predicted patches.
pub fn decode_tokens<T: Scalar>(
    cls_latent: &[T],
    latent_tokens: &PerModality<Tensor<T>>,
    state: &ModelState<T>,
    config: &ModelConfig,
) -> Result<PerModality<Tensor<T>>> {
    let h = decoder_input(cls_latent, latent_tokens, state, config)?;
    let (out, _) = state.decoder.forward(&h);
    Ok(project_patches(
        &out.output,
        &latent_tokens.modalities(),
        state,
        config,
    ))
}

fn project_patches<T: Scalar>(
    decoded: &Tensor<T>,
    modalities: &[Modality],
    state: &ModelState<T>,
    config: &ModelConfig,
) -> PerModality<Tensor<T>> {
    let l = config.patches_per_modality();
    let body = decoded.slice_rows(1, decoded.rows());
    let pred = state.output.forward(&body);
    modalities
        .iter()
        .enumerate()
        .map(|(k, &m)| (m, pred.slice_rows(k * l, (k + 1) * l)))
        .collect()
}

fn decode_cached<T: Scalar>(
    enc: &EncoderOutput<T>,
    plan: &MaskPlan,
    state: &ModelState<T>,
    config: &ModelConfig,
) -> Result<(PerModality<Tensor<T>>, DecodeCache<T>)> {
    if enc.hidden.cols() != state.latent.inputs() {
        return Err(Error::Dimension(format!(
            "encoder width {} does not match latent projection input {}",
            enc.hidden.cols(),
            state.latent.inputs()
        )));
    }
    let y = state.latent.forward(&enc.hidden);
    let n = y.rows();
    let encoded = TokenSequence {
        tokens: y.slice_rows(1, n),
        provenance: enc.tokens.provenance.clone(),
    };
    let z = scatter_with_mask_tokens(&encoded, plan, state.mask_token.as_slice())?;
    let h = decoder_input(y.row(0), &z, state, config)?;
    let (out, transformer) = state.decoder.forward(&h);
    let pred = project_patches(&out.output, &plan.modalities, state, config);
    Ok((
        pred,
        DecodeCache {
            hidden: enc.hidden.clone(),
            provenance: enc.tokens.provenance.clone(),
            transformer,
            decoded: out.output,
        },
    ))
}

/// Gradient of the predicted patches back to the encoder's normalized output.
fn decode_backward<T: Scalar>(
    cache: &DecodeCache<T>,
    plan: &MaskPlan,
    d_pred: &PerModality<Tensor<T>>,
    state: &ModelState<T>,
    config: &ModelConfig,
    grads: &mut ModelState<T>,
) -> Tensor<T> {
    let l = config.patches_per_modality();
    let dd = config.dec_dim;
    let parts: Vec<&Tensor<T>> = plan
        .modalities
        .iter()
        .map(|&m| d_pred.get(m).unwrap())
        .collect();
    let d_pred_all = Tensor::vstack(&parts);
    let body = cache.decoded.slice_rows(1, cache.decoded.rows());
    let d_body = state.output.backward(&body, &d_pred_all, &mut grads.output);
    let d_decoded = Tensor::vstack(&[&Tensor::zeros(1, dd), &d_body]);
    let dh = state.decoder.backward(
        &cache.transformer,
        Some(&d_decoded),
        None,
        &mut grads.decoder,
    );
    let mut d_z = PerModality::new();
    for (k, &m) in plan.modalities.iter().enumerate() {
        let block = dh.slice_rows(1 + k * l, 1 + (k + 1) * l);
        let g = grads.modality_embed.get_mut(m).unwrap();
        for (a, b) in g.as_mut_slice().iter_mut().zip(block.column_sums()) {
            *a += b;
        }
        d_z.insert(m, block);
    }
    let (d_tokens, d_mask) = scatter_backward(&d_z, &cache.provenance, plan, dd);
    for (a, b) in grads.mask_token.as_mut_slice().iter_mut().zip(d_mask) {
        *a += b;
    }
    let dy = Tensor::vstack(&[&dh.slice_rows(0, 1), &d_tokens]);
    state.latent.backward(&cache.hidden, &dy, &mut grads.latent)
}

/// Reconstructs every plan modality from an encoder pass.
pub fn decode<T: Scalar>(
    enc: &EncoderOutput<T>,
    plan: &MaskPlan,
    state: &ModelState<T>,
    config: &ModelConfig,
) -> Result<PerModality<Grid3<T>>> {
    let (pred, _) = decode_cached(enc, plan, state, config)?;
    patches_to_volumes(&pred, config)
}

fn patches_to_volumes<T: Scalar>(
    pred: &PerModality<Tensor<T>>,
    config: &ModelConfig,
) -> Result<PerModality<Grid3<T>>> {
    let mut out = PerModality::new();
    for (m, p) in pred.iter() {
        out.insert(m, unpatchify(p, config.patch, config.input_shape)?);
    }
    Ok(out)
}

/// Masked-patch MSE on patch matrices, with its gradient w.r.t. `pred`.
///
/// Each modality contributes the mean over its masked patches of the
/// per-voxel mean squared error; contributions are averaged over the
/// modalities that have at least one masked patch.
pub fn masked_patch_loss<T: Scalar>(
    pred: &PerModality<Tensor<T>>,
    target: &PerModality<Tensor<T>>,
    plan: &MaskPlan,
) -> Result<(T, PerModality<Tensor<T>>)> {
    let contributing: Vec<Modality> = plan
        .modalities
        .iter()
        .copied()
        .filter(|&m| !plan.masked_of(m).is_empty())
        .collect();
    if contributing.is_empty() {
        return Err(Error::DegenerateLoss(
            "every plan modality is fully visible".into(),
        ));
    }
    let n_mod = T::from_usize(contributing.len()).unwrap();
    let mut loss = T::zero();
    let mut grad = PerModality::new();
    for &m in &plan.modalities {
        let p = pred.get(m).ok_or(Error::MissingModality(m))?;
        let mut g = p.zeros_like();
        let masked = plan.masked_of(m);
        if !masked.is_empty() {
            let t = target.get(m).ok_or(Error::MissingModality(m))?;
            if t.shape() != p.shape() {
                return Err(Error::Dimension(format!(
                    "prediction/target shape mismatch for {m}"
                )));
            }
            let voxels = T::from_usize(p.cols()).unwrap();
            let denom = voxels * T::from_usize(masked.len()).unwrap();
            let scale = T::lit(2.0) / (denom * n_mod);
            let mut sum = T::zero();
            for &i in masked {
                let gr = g.row_mut(i);
                for ((gv, &pv), &tv) in gr.iter_mut().zip(p.row(i)).zip(t.row(i)) {
                    let e = pv - tv;
                    sum += e * e;
                    *gv = scale * e;
                }
            }
            loss += sum / denom;
        }
        grad.insert(m, g);
    }
    Ok((loss / n_mod, grad))
}

fn target_patches<T: Scalar>(
    target: &MultimodalVolume,
    plan: &MaskPlan,
    patch: usize,
) -> Result<PerModality<Tensor<T>>> {
    let mut out = PerModality::new();
    for &m in &plan.modalities {
        if plan.masked_of(m).is_empty() {
            continue;
        }
        out.insert(m, patchify::<T, f32>(target.grid(m)?, patch)?.patches);
    }
    Ok(out)
}

/// Reconstruction loss over masked patches only, evaluated on volumes.
pub fn reconstruction_loss<T: Scalar>(
    pred: &PerModality<Grid3<T>>,
    target: &MultimodalVolume,
    plan: &MaskPlan,
    patch: usize,
) -> Result<T> {
    Ok(reconstruction_loss_with_grad(pred, target, plan, patch)?.0)
}

/// [`reconstruction_loss`] plus its gradient w.r.t. every predicted voxel.
pub fn reconstruction_loss_with_grad<T: Scalar>(
    pred: &PerModality<Grid3<T>>,
    target: &MultimodalVolume,
    plan: &MaskPlan,
    patch: usize,
) -> Result<(T, PerModality<Grid3<T>>)> {
    let mut pred_patches = PerModality::new();
    for &m in &plan.modalities {
        let g = pred.get(m).ok_or(Error::MissingModality(m))?;
        if g.shape() != target.shape() {
            return Err(Error::Dimension(format!(
                "prediction for {m} has shape {:?}",
                g.shape()
            )));
        }
        pred_patches.insert(
            m,
            patchify::<T, f64>(&g.map(|x| x.as_f64()), patch)?.patches,
        );
    }
    let targets = target_patches(target, plan, patch)?;
    let (loss, grad) = masked_patch_loss(&pred_patches, &targets, plan)?;
    let mut out = PerModality::new();
    for (m, g) in grad.iter() {
        out.insert(m, unpatchify(g, patch, target.shape())?);
    }
    Ok((loss, out))
}

/// Everything one pre-training forward pass produces.
#[derive(Clone, Debug)]
pub struct PretrainOutput<T> {
    pub loss: T,
    pub plan: MaskPlan,
    pub reconstructions: PerModality<Grid3<T>>,
}

fn require_all_modalities(volume: &MultimodalVolume) -> Result<()> {
    for m in Modality::ALL {
        if !volume.has(m) {
            return Err(Error::MissingModality(m));
        }
    }
    Ok(())
}

/// Samples a Dirichlet mask plan, encodes, decodes and scores one patient.
pub fn forward_pretrain<T: Scalar, R: Rng + ?Sized>(
    volume: &MultimodalVolume,
    state: &ModelState<T>,
    config: &ModelConfig,
    rng: &mut R,
) -> Result<PretrainOutput<T>> {
    require_all_modalities(volume)?;
    let plan = sample_mask_plan(
        config.patches_per_modality(),
        &Modality::ALL,
        config.mask_ratio,
        config.alpha,
        rng,
    )?;
    let enc = encode(volume, &plan, state, config)?;
    let (pred, _) = decode_cached(&enc, &plan, state, config)?;
    let targets = target_patches(volume, &plan, config.patch)?;
    let (loss, _) = masked_patch_loss(&pred, &targets, &plan)?;
    Ok(PretrainOutput {
        loss,
        reconstructions: patches_to_volumes(&pred, config)?,
        plan,
    })
}

/// Pre-training loss for a fixed plan.
pub fn pretrain_loss<T: Scalar>(
    volume: &MultimodalVolume,
    plan: &MaskPlan,
    state: &ModelState<T>,
    config: &ModelConfig,
) -> Result<T> {
    let enc = encode(volume, plan, state, config)?;
    let (pred, _) = decode_cached(&enc, plan, state, config)?;
    let targets = target_patches(volume, plan, config.patch)?;
    Ok(masked_patch_loss(&pred, &targets, plan)?.0)
}

/// Pre-training loss for a fixed plan and its gradient w.r.t. every
/// parameter.
pub fn pretrain_loss_and_grad<T: Scalar>(
    volume: &MultimodalVolume,
    plan: &MaskPlan,
    state: &ModelState<T>,
    config: &ModelConfig,
) -> Result<(T, ModelState<T>)> {
    let (enc, enc_cache) = encode_cached(volume, plan, state, config)?;
    let (pred, dec_cache) = decode_cached(&enc, plan, state, config)?;
    let targets = target_patches(volume, plan, config.patch)?;
    let (loss, d_pred) = masked_patch_loss(&pred, &targets, plan)?;
    let mut grads = ModelState::zeros(config);
    let d_hidden = decode_backward(&dec_cache, plan, &d_pred, state, config, &mut grads);
    encode_backward(&enc_cache, state, Some(&d_hidden), None, &mut grads);
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{full_visibility_plan, gather_visible, plan_from_visible};
    use crate::synth::generate_synthetic_cohort;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro() -> ModelConfig {
        ModelConfig {
            dim: 12,
            depth: 2,
            heads: 2,
            mlp_dim: 24,
            dec_dim: 6,
            dec_depth: 1,
            dec_heads: 2,
            patch: 4,
            alpha: 1.0,
            mask_ratio: 0.75,
            input_shape: (8, 8, 8),
        }
    }

    fn volume(shape: Shape3, seed: u64) -> MultimodalVolume {
        let cohort = generate_synthetic_cohort(1, shape, seed, 4).unwrap();
        crate::volume::preprocess(&cohort[0].volume, shape).unwrap()
    }

    #[test]
    fn presets_validate() {
        ModelConfig::tiny().validate().unwrap();
        ModelConfig::paper().validate().unwrap();
        assert_eq!(ModelConfig::paper().patches_per_modality(), 512);
        let mut bad = ModelConfig::tiny();
        bad.dim = 98; // not a multiple of the 4 heads
        assert!(bad.validate().is_err());
    }

    #[test]
    fn tiny_single_modality_sequence_length() {
        let cfg = ModelConfig::tiny();
        let state = ModelState::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let v = volume((32, 32, 32), 1);
        let plan = full_visibility_plan(64, &[Modality::T2]).unwrap();
        let enc = encode(&v, &plan, &state, &cfg).unwrap();
        assert_eq!(enc.sequence_len(), 65);
        assert_eq!(enc.per_block.len(), cfg.depth);
    }

    #[test]
    fn visible_row_embedding_matches_embed_then_gather() {
        let cfg = micro();
        let state = ModelState::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let v = volume(cfg.input_shape, 2);
        let plan = sample_mask_plan(
            8,
            &Modality::ALL,
            0.5,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        let direct = embed_visible(&v, &plan, &state, &cfg).unwrap();
        let full: PerModality<TokenSequence<f64>> = Modality::ALL
            .iter()
            .map(|&m| {
                let p = patchify::<f64, f32>(v.grid(m).unwrap(), cfg.patch).unwrap();
                (m, crate::tokenizer::embed(&p, m, &state.tokenizer).unwrap())
            })
            .collect();
        let gathered = gather_visible(&full, &plan).unwrap();
        assert_eq!(direct.provenance, gathered.provenance);
        for (a, b) in direct
            .tokens
            .as_slice()
            .iter()
            .zip(gathered.tokens.as_slice())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decoder_input_length_and_output_shapes() {
        let cfg = micro();
        let state = ModelState::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let v = volume(cfg.input_shape, 5);
        let subset = [Modality::T1, Modality::T2, Modality::Flair];
        let plan =
            sample_mask_plan(8, &subset, 0.75, 1.0, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let enc = encode(&v, &plan, &state, &cfg).unwrap();
        assert_eq!(enc.sequence_len(), 1 + plan.total_visible);
        let y = state.latent.forward(&enc.hidden);
        let encoded = TokenSequence {
            tokens: y.slice_rows(1, y.rows()),
            provenance: enc.tokens.provenance.clone(),
        };
        let z = scatter_with_mask_tokens(&encoded, &plan, state.mask_token.as_slice()).unwrap();
        let h = decoder_input(y.row(0), &z, &state, &cfg).unwrap();
        assert_eq!(h.rows(), subset.len() * 8 + 1);
        let recon = decode(&enc, &plan, &state, &cfg).unwrap();
        assert_eq!(recon.modalities(), subset);
        for (_, g) in recon.iter() {
            assert_eq!(g.shape(), cfg.input_shape);
        }
    }

    #[test]
    fn modality_embeddings_are_the_only_modality_signal() {
        let cfg = micro();
        let mut state = ModelState::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        for (_, c) in state.modality_embed.iter_mut() {
            c.fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = crate::params::normal::<f64, _>(8, cfg.dec_dim, 1.0, &mut rng);
        let b = crate::params::normal::<f64, _>(8, cfg.dec_dim, 1.0, &mut rng);
        let cls = [0.1, -0.2, 0.3, 0.0, 0.5, -0.1];
        let z: PerModality<Tensor<f64>> = [(Modality::T1, a.clone()), (Modality::T2, b.clone())]
            .into_iter()
            .collect();
        let swapped: PerModality<Tensor<f64>> =
            [(Modality::T1, b), (Modality::T2, a)].into_iter().collect();
        let p = decode_tokens(&cls, &z, &state, &cfg).unwrap();
        let q = decode_tokens(&cls, &swapped, &state, &cfg).unwrap();
        let close = |x: &Tensor<f64>, y: &Tensor<f64>| {
            x.as_slice()
                .iter()
                .zip(y.as_slice())
                .all(|(u, v)| (u - v).abs() < 1e-12)
        };
        assert!(close(
            p.get(Modality::T1).unwrap(),
            q.get(Modality::T2).unwrap()
        ));
        assert!(close(
            p.get(Modality::T2).unwrap(),
            q.get(Modality::T1).unwrap()
        ));
        // with learned embeddings restored, the swap no longer commutes
        let state2 = ModelState::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let p2 = decode_tokens(&cls, &z, &state2, &cfg).unwrap();
        let q2 = decode_tokens(&cls, &swapped, &state2, &cfg).unwrap();
        assert!(!close(
            p2.get(Modality::T1).unwrap(),
            q2.get(Modality::T2).unwrap()
        ));
    }

    #[test]
    fn loss_zero_on_perfect_prediction_and_constant_offset_value() {
        let cfg = micro();
        let v = volume(cfg.input_shape, 9);
        let plan = plan_from_visible(
            8,
            vec![
                (Modality::T1, vec![0, 1, 2, 3, 4]),
                (Modality::T2, (0..6).collect()),
            ],
        )
        .unwrap();
        let perfect: PerModality<Grid3<f64>> = [Modality::T1, Modality::T2]
            .iter()
            .map(|&m| (m, v.grid(m).unwrap().map(|x| x as f64)))
            .collect();
        assert_eq!(reconstruction_loss(&perfect, &v, &plan, 4).unwrap(), 0.0);

        // patch 6 of T1 is masked; offset by c everywhere in it
        let c = 0.7;
        let mut off = perfect.clone();
        let g = off.get_mut(Modality::T1).unwrap();
        for h in 4..8 {
            for w in 4..8 {
                for d in 0..4 {
                    let x = g.get(h, w, d);
                    g.set(h, w, d, x + c);
                }
            }
        }
        // two plan modalities, T1 has |ℳ| = 3 masked patches
        let loss = reconstruction_loss(&off, &v, &plan, 4).unwrap();
        assert!((loss - c * c / (2.0 * 3.0)).abs() < 1e-12);
    }

    #[test]
    fn visible_perturbation_leaves_loss_and_gradient_zero() {
        let cfg = micro();
        let v = volume(cfg.input_shape, 10);
        let plan = sample_mask_plan(
            8,
            &Modality::ALL,
            0.5,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(11),
        )
        .unwrap();
        let pred: PerModality<Grid3<f64>> = Modality::ALL
            .iter()
            .map(|&m| (m, Grid3::filled(cfg.input_shape, 0.3)))
            .collect();
        let (base, grad) = reconstruction_loss_with_grad(&pred, &v, &plan, 4).unwrap();
        let mut bumped = pred.clone();
        for &m in &Modality::ALL {
            let grid = bumped.get_mut(m).unwrap();
            let mut p = patchify::<f64, f64>(grid, 4).unwrap();
            for &i in plan.visible_of(m) {
                p.patches.row_mut(i).iter_mut().for_each(|x| *x += 5.0);
                for &gv in patchify::<f64, f64>(grad.get(m).unwrap(), 4)
                    .unwrap()
                    .patches
                    .row(i)
                {
                    assert_eq!(gv, 0.0);
                }
            }
            *grid = unpatchify(&p.patches, 4, cfg.input_shape).unwrap();
        }
        assert_eq!(reconstruction_loss(&bumped, &v, &plan, 4).unwrap(), base);
    }

    #[test]
    fn fully_visible_plan_is_degenerate() {
        let cfg = micro();
        let v = volume(cfg.input_shape, 12);
        let plan = full_visibility_plan(8, &Modality::ALL).unwrap();
        let pred: PerModality<Grid3<f64>> = Modality::ALL
            .iter()
            .map(|&m| (m, Grid3::filled(cfg.input_shape, 0.0)))
            .collect();
        assert!(matches!(
            reconstruction_loss(&pred, &v, &plan, 4),
            Err(Error::DegenerateLoss(_))
        ));
    }

    #[test]
    fn forward_pretrain_requires_all_modalities_and_is_deterministic() {
        let cfg = micro();
        let state = ModelState::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
        let v = volume(cfg.input_shape, 14);
        let a = forward_pretrain(&v, &state, &cfg, &mut ChaCha8Rng::seed_from_u64(15)).unwrap();
        let b = forward_pretrain(&v, &state, &cfg, &mut ChaCha8Rng::seed_from_u64(15)).unwrap();
        assert_eq!(a.loss, b.loss);
        assert!(a.loss.is_finite() && a.loss > 0.0);

        let mut grids = PerModality::new();
        grids.insert(Modality::T1, v.grid(Modality::T1).unwrap().clone());
        let partial = MultimodalVolume::new("p", grids).unwrap();
        assert!(matches!(
            forward_pretrain(&partial, &state, &cfg, &mut ChaCha8Rng::seed_from_u64(15)),
            Err(Error::MissingModality(_))
        ));
    }

    #[test]
    fn analytic_gradient_matches_loss_evaluation_path() {
        let cfg = micro();
        let state = ModelState::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(16)).unwrap();
        let v = volume(cfg.input_shape, 17);
        let plan = sample_mask_plan(
            8,
            &Modality::ALL,
            0.75,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(18),
        )
        .unwrap();
        let (loss, grads) = pretrain_loss_and_grad(&v, &plan, &state, &cfg).unwrap();
        assert_eq!(loss, pretrain_loss(&v, &plan, &state, &cfg).unwrap());
        assert_eq!(grads.parameter_count(), state.parameter_count());
    }
}
