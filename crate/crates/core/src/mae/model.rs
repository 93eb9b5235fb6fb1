use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::layers::{normal_vec, sincos_2d, Block, BlockCache, LayerNorm, LayerNormCache, Linear};
use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{axpy, normalize, Mat};
use crate::imagecore::{to_patches, Image, PatchGrid};
use crate::masking::{self, MaskPlan};
use crate::{Error, Result};

/// Architecture and optimisation settings for masked-autoencoder pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaeConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mask_rate: f64,
    /// Share of the visible budget picked by contour score (1 = fully
    /// contour-guided, 0 = uniform random masking).
    pub contour_fraction: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for MaeConfig {
    fn default() -> Self {
        MaeConfig {
            image_size: 64,
            patch_size: 8,
            channels: 3,
            embed_dim: 128,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            decoder_dim: 64,
            decoder_depth: 2,
            decoder_heads: 4,
            mask_rate: 0.75,
            contour_fraction: 1.0,
            lr: 2.5e-4,
            weight_decay: 5e-2,
            batch_size: 32,
            epochs: 200,
            seed: 0,
        }
    }
}

impl MaeConfig {
    /// ViT-B/16-sized geometry on 224×224 inputs.
    pub fn vit_base_scale() -> Self {
        MaeConfig {
            image_size: 224,
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            decoder_dim: 512,
            decoder_depth: 8,
            decoder_heads: 16,
            ..MaeConfig::default()
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let key = |k: &str| format!("mae.{k}");
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config(
                &key("patch_size"),
                format!("{} must divide image_size {}", self.patch_size, self.image_size),
            ));
        }
        if self.channels == 0 {
            return Err(Error::config(&key("channels"), "must be positive"));
        }
        for (name, dim, heads) in [
            ("embed_dim", self.embed_dim, self.heads),
            ("decoder_dim", self.decoder_dim, self.decoder_heads),
        ] {
            if heads == 0 || dim == 0 || dim % heads != 0 {
                return Err(Error::config(
                    &key(name),
                    format!("{dim} must be a positive multiple of the head count {heads}"),
                ));
            }
            if dim % 4 != 0 {
                return Err(Error::config(&key(name), format!("{dim} must be divisible by 4")));
            }
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config(&key("mlp_ratio"), "must be positive"));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::config(
                &key("mask_rate"),
                format!("must lie in (0, 1), got {}", self.mask_rate),
            ));
        }
        if masking::visible_count(self.num_patches(), self.mask_rate) == 0 {
            return Err(Error::config(&key("mask_rate"), "leaves no visible patch"));
        }
        if !(0.0..=1.0).contains(&self.contour_fraction) {
            return Err(Error::config(
                &key("contour_fraction"),
                format!("must lie in [0, 1], got {}", self.contour_fraction),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(&key("lr"), "must be finite and non-negative"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(&key("weight_decay"), "must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(&key("batch_size"), "must be positive"));
        }
        Ok(())
    }
}

/// Encoder/decoder weights plus the fixed positional tables.
#[derive(Clone, Debug)]
pub struct MaeModel {
    pub config: MaeConfig,
    pub store: ParamStore,
    patch_embed: Linear,
    enc_blocks: Vec<Block>,
    enc_norm: LayerNorm,
    dec_embed: Linear,
    mask_token: ParamId,
    dec_blocks: Vec<Block>,
    dec_norm: LayerNorm,
    pred: Linear,
    enc_pos: Mat,
    dec_pos: Mat,
}

pub(crate) struct EncoderTape {
    input: Mat,
    blocks: Vec<BlockCache>,
    norm: LayerNormCache,
}

/// Intermediate state from [`MaeModel::feature_forward`], consumed by
/// [`MaeModel::feature_backward`].
pub struct FeatureTape {
    encoder: EncoderTape,
    pooled_norm: f64,
    feature: Vec<f64>,
    tokens: usize,
}

impl FeatureTape {
    pub fn feature(&self) -> &[f64] {
        &self.feature
    }
}

fn run_blocks(blocks: &[Block], p: &ParamStore, x: Mat) -> (Mat, Vec<BlockCache>) {
    let mut caches = Vec::with_capacity(blocks.len());
    let mut h = x;
    for b in blocks {
        let (y, c) = b.forward(p, &h);
        caches.push(c);
        h = y;
    }
    (h, caches)
}

fn backprop_blocks(blocks: &[Block], p: &ParamStore, g: &mut Grads, caches: &[BlockCache], dy: Mat) -> Mat {
    let mut d = dy;
    for (b, c) in blocks.iter().zip(caches).rev() {
        d = b.backward(p, g, c, &d);
    }
    d
}

impl MaeModel {
    pub fn new(config: MaeConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::seed::rng(config.seed, "init", &[]);
        let mut store = ParamStore::default();
        let (de, dd) = (config.embed_dim, config.decoder_dim);
        let patch_embed = Linear::new(&mut store, &mut rng, "patch_embed", config.patch_dim(), de);
        let enc_blocks = (0..config.depth)
            .map(|i| {
                Block::new(
                    &mut store,
                    &mut rng,
                    &format!("encoder.{i}"),
                    de,
                    config.heads,
                    de * config.mlp_ratio,
                )
            })
            .collect();
        let enc_norm = LayerNorm::new(&mut store, "encoder.norm", de);
        let dec_embed = Linear::new(&mut store, &mut rng, "decoder_embed", de, dd);
        let mask_token = store.add("mask_token", vec![dd], normal_vec(&mut rng, dd, 0.02));
        let dec_blocks = (0..config.decoder_depth)
            .map(|i| {
                Block::new(
                    &mut store,
                    &mut rng,
                    &format!("decoder.{i}"),
                    dd,
                    config.decoder_heads,
                    dd * config.mlp_ratio,
                )
            })
            .collect();
        let dec_norm = LayerNorm::new(&mut store, "decoder.norm", dd);
        let pred = Linear::new(&mut store, &mut rng, "decoder_pred", dd, config.patch_dim());
        let side = config.grid_side();
        Ok(MaeModel {
            enc_pos: sincos_2d(side, side, de),
            dec_pos: sincos_2d(side, side, dd),
            config,
            store,
            patch_embed,
            enc_blocks,
            enc_norm,
            dec_embed,
            mask_token,
            dec_blocks,
            dec_norm,
            pred,
        })
    }

    /// Rebuilds the architecture for `config` and loads `params` by name.
    pub fn with_params(config: MaeConfig, params: &[(String, Vec<usize>, Vec<f64>)]) -> Result<Self> {
        let mut model = MaeModel::new(config)?;
        if params.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                model.store.len(),
                params.len()
            )));
        }
        for (name, shape, value) in params {
            let id = model
                .store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            let slot = &mut model.store.params_mut()[id.0];
            if &slot.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} does not match {:?}",
                    shape, slot.shape
                )));
            }
            slot.value.clone_from(value);
        }
        Ok(model)
    }

    pub fn num_patches(&self) -> usize {
        self.config.num_patches()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn patchify(&self, img: &Image) -> Result<PatchGrid> {
        if img.height() != self.config.image_size
            || img.width() != self.config.image_size
            || img.channels() != self.config.channels
        {
            return Err(Error::Shape(format!(
                "model expects {0}x{0}x{1} images, got {2}x{3}x{4}",
                self.config.image_size,
                self.config.channels,
                img.height(),
                img.width(),
                img.channels()
            )));
        }
        to_patches(img, self.config.patch_size)
    }

    fn check_positions(&self, positions: &[usize]) -> Result<()> {
        let k = self.num_patches();
        if let Some(&bad) = positions.iter().find(|&&p| p >= k) {
            return Err(Error::InvalidArgument(format!(
                "patch position {bad} out of range for {k} patches"
            )));
        }
        Ok(())
    }

    fn patch_matrix(&self, kept: &[(usize, Vec<f64>)]) -> Result<(Mat, Vec<usize>)> {
        let pd = self.config.patch_dim();
        let positions: Vec<usize> = kept.iter().map(|(p, _)| *p).collect();
        self.check_positions(&positions)?;
        let mut x = Mat::zeros(kept.len(), pd);
        for (i, (_, patch)) in kept.iter().enumerate() {
            if patch.len() != pd {
                return Err(Error::Shape(format!(
                    "patch has {} values, expected {pd}",
                    patch.len()
                )));
            }
            x.row_mut(i).copy_from_slice(patch);
        }
        Ok((x, positions))
    }

    fn add_positions(table: &Mat, x: &mut Mat, positions: &[usize]) {
        for (i, &p) in positions.iter().enumerate() {
            axpy(1.0, table.row(p), x.row_mut(i));
        }
    }

    /// Linear patch projection plus the positional entry of each patch.
    pub fn embed_patches(&self, kept: &[(usize, Vec<f64>)]) -> Result<Mat> {
        let (x, positions) = self.patch_matrix(kept)?;
        let mut tokens = self.patch_embed.forward(&self.store, &x);
        Self::add_positions(&self.enc_pos, &mut tokens, &positions);
        Ok(tokens)
    }

    fn encode_tape(&self, tokens: Mat) -> (Mat, Vec<BlockCache>, LayerNormCache) {
        let (h, blocks) = run_blocks(&self.enc_blocks, &self.store, tokens);
        let (out, norm) = self.enc_norm.forward(&self.store, &h);
        (out, blocks, norm)
    }

    /// MHSA encoder over an arbitrary token subset.
    pub fn encode(&self, tokens: &Mat) -> Result<Mat> {
        self.check_tokens(tokens)?;
        Ok(self.encode_tape(tokens.clone()).0)
    }

    fn check_tokens(&self, tokens: &Mat) -> Result<()> {
        if tokens.rows == 0 {
            return Err(Error::InvalidArgument("encoder needs at least one token".into()));
        }
        if tokens.cols != self.config.embed_dim {
            return Err(Error::Shape(format!(
                "tokens have width {}, expected {}",
                tokens.cols, self.config.embed_dim
            )));
        }
        Ok(())
    }

    /// Per-head attention matrices of every encoder block.
    pub fn encoder_attention(&self, tokens: &Mat) -> Result<Vec<Mat>> {
        self.check_tokens(tokens)?;
        let (_, blocks, _) = self.encode_tape(tokens.clone());
        Ok(blocks.into_iter().flat_map(|b| b.attn.probs).collect())
    }

    fn decoder_input(&self, latents: &Mat, kept: &[usize], masked: &[usize]) -> Result<(Mat, Mat)> {
        if latents.rows != kept.len() {
            return Err(Error::Shape(format!(
                "{} latents for {} kept positions",
                latents.rows,
                kept.len()
            )));
        }
        self.check_positions(kept)?;
        self.check_positions(masked)?;
        let kept_set: HashSet<usize> = kept.iter().copied().collect();
        if let Some(p) = masked.iter().find(|p| kept_set.contains(p)) {
            return Err(Error::InvalidArgument(format!(
                "position {p} is both kept and masked"
            )));
        }
        let embedded = self.dec_embed.forward(&self.store, latents);
        let dd = self.config.decoder_dim;
        let mut seq = Mat::zeros(kept.len() + masked.len(), dd);
        seq.data[..embedded.data.len()].copy_from_slice(&embedded.data);
        let token = self.store.get(self.mask_token);
        for i in 0..masked.len() {
            seq.row_mut(kept.len() + i).copy_from_slice(token);
        }
        for (i, &p) in kept.iter().chain(masked).enumerate() {
            axpy(1.0, self.dec_pos.row(p), seq.row_mut(i));
        }
        Ok((seq, embedded))
    }

    /// Pixel predictions for `masked` (one row per position, same order).
    pub fn decode(&self, latents: &Mat, kept: &[usize], masked: &[usize]) -> Result<Mat> {
        if masked.is_empty() {
            return Ok(Mat::zeros(0, self.config.patch_dim()));
        }
        let (seq, _) = self.decoder_input(latents, kept, masked)?;
        let (h, _) = run_blocks(&self.dec_blocks, &self.store, seq);
        let (out, _) = self.dec_norm.forward(&self.store, &h);
        let rows: Vec<usize> = (kept.len()..kept.len() + masked.len()).collect();
        Ok(self.pred.forward(&self.store, &out.select_rows(&rows)))
    }

    /// Forward pass on a masked grid; returns predictions for `plan.masked`.
    pub fn reconstruct(&self, grid: &PatchGrid, plan: &MaskPlan) -> Result<Mat> {
        let kept = masking::apply_mask(grid, plan)?.kept;
        let latents = self.encode(&self.embed_patches(&kept)?)?;
        self.decode(&latents, &plan.kept, &plan.masked)
    }

    /// Forward and backward pass of the masked reconstruction loss.
    /// Accumulates parameter gradients into `grads` and returns the loss.
    pub fn reconstruction_step(&self, grid: &PatchGrid, plan: &MaskPlan, grads: &mut Grads) -> Result<f64> {
        let p = &self.store;
        let masked = masking::apply_mask(grid, plan)?;
        let (x, positions) = self.patch_matrix(&masked.kept)?;
        let mut tokens = self.patch_embed.forward(p, &x);
        Self::add_positions(&self.enc_pos, &mut tokens, &positions);
        let (latents, enc_caches, enc_norm) = self.encode_tape(tokens);

        let (seq, _) = self.decoder_input(&latents, &plan.kept, &plan.masked)?;
        let (h, dec_caches) = run_blocks(&self.dec_blocks, p, seq);
        let (out, dec_norm) = self.dec_norm.forward(p, &h);
        let m = plan.kept.len();
        let rows: Vec<usize> = (m..m + plan.masked.len()).collect();
        let selected = out.select_rows(&rows);
        let pred = self.pred.forward(p, &selected);

        let target = grid_rows(grid, &plan.masked);
        let n = pred.data.len() as f64;
        let mut dpred = Mat::zeros(pred.rows, pred.cols);
        let mut loss = 0.0;
        for ((d, a), b) in dpred.data.iter_mut().zip(&pred.data).zip(&target.data) {
            let e = a - b;
            loss += e * e;
            *d = 2.0 * e / n;
        }
        loss /= n;

        let dsel = self.pred.backward(p, grads, &selected, &dpred, true).unwrap();
        let mut dout = Mat::zeros(out.rows, out.cols);
        for (i, &r) in rows.iter().enumerate() {
            dout.row_mut(r).copy_from_slice(dsel.row(i));
        }
        let dh = self.dec_norm.backward(p, grads, &dec_norm, &dout);
        let dseq = backprop_blocks(&self.dec_blocks, p, grads, &dec_caches, dh);
        {
            let gt = grads.get_mut(self.mask_token);
            for &r in &rows {
                axpy(1.0, dseq.row(r), gt);
            }
        }
        let dembedded = dseq.select_rows(&(0..m).collect::<Vec<_>>());
        let dlatents = self.dec_embed.backward(p, grads, &latents, &dembedded, true).unwrap();
        let dh = self.enc_norm.backward(p, grads, &enc_norm, &dlatents);
        let dtokens = backprop_blocks(&self.enc_blocks, p, grads, &enc_caches, dh);
        self.patch_embed.backward(p, grads, &x, &dtokens, false);
        Ok(loss)
    }

    pub(crate) fn feature_forward_grid(&self, grid: &PatchGrid) -> Result<FeatureTape> {
        let kept: Vec<(usize, Vec<f64>)> = grid.patches.iter().cloned().enumerate().collect();
        let (x, positions) = self.patch_matrix(&kept)?;
        let mut tokens = self.patch_embed.forward(&self.store, &x);
        Self::add_positions(&self.enc_pos, &mut tokens, &positions);
        let (out, blocks, norm) = self.encode_tape(tokens);
        let mut pooled = vec![0.0; out.cols];
        for i in 0..out.rows {
            axpy(1.0, out.row(i), &mut pooled);
        }
        pooled.iter_mut().for_each(|v| *v /= out.rows as f64);
        let pooled_norm = normalize(&mut pooled);
        Ok(FeatureTape {
            encoder: EncoderTape {
                input: x,
                blocks,
                norm,
            },
            pooled_norm,
            feature: pooled,
            tokens: out.rows,
        })
    }

    /// Encodes every patch (no masking), mean-pools and L2-normalizes.
    /// Keeps the intermediate state for [`feature_backward`](Self::feature_backward).
    pub fn feature_forward(&self, img: &Image) -> Result<FeatureTape> {
        self.feature_forward_grid(&self.patchify(img)?)
    }

    /// Back-propagates `dfeature` (gradient w.r.t. the unit feature) into `grads`.
    pub fn feature_backward(&self, tape: &FeatureTape, dfeature: &[f64], grads: &mut Grads) {
        let p = &self.store;
        let f = &tape.feature;
        let proj = f.iter().zip(dfeature).map(|(a, b)| a * b).sum::<f64>();
        let scale = 1.0 / (tape.pooled_norm * tape.tokens as f64);
        let drow: Vec<f64> = dfeature
            .iter()
            .zip(f)
            .map(|(d, fi)| (d - fi * proj) * scale)
            .collect();
        let mut dout = Mat::zeros(tape.tokens, f.len());
        for i in 0..tape.tokens {
            dout.row_mut(i).copy_from_slice(&drow);
        }
        let dh = self.enc_norm.backward(p, grads, &tape.encoder.norm, &dout);
        let dtokens = backprop_blocks(&self.enc_blocks, p, grads, &tape.encoder.blocks, dh);
        self.patch_embed.backward(p, grads, &tape.encoder.input, &dtokens, false);
    }

    /// Unit-norm inference feature of `img`.
    pub fn extract_feature(&self, img: &Image) -> Result<Vec<f64>> {
        Ok(self.feature_forward(img)?.feature)
    }

    /// Features of many images, computed in parallel, in input order.
    pub fn extract_features(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        crate::par::map_slice(images, |img| self.extract_feature(img))
            .into_iter()
            .collect()
    }
}

fn grid_rows(grid: &PatchGrid, idx: &[usize]) -> Mat {
    let mut m = Mat::zeros(idx.len(), grid.patch_dim());
    for (o, &i) in idx.iter().enumerate() {
        m.row_mut(o).copy_from_slice(&grid.patches[i]);
    }
    m
}

/// Mean squared error over the pixels of the masked patches only.
/// `predicted` row `i` is the prediction for `plan.masked[i]`.
pub fn reconstruction_loss(predicted: &Mat, original: &Image, plan: &MaskPlan, patch_size: usize) -> Result<f64> {
    let grid = to_patches(original, patch_size)?;
    if grid.len() != plan.num_patches {
        return Err(Error::Shape(format!(
            "plan covers {} patches, image has {}",
            plan.num_patches,
            grid.len()
        )));
    }
    if predicted.rows != plan.masked.len() || predicted.cols != grid.patch_dim() {
        return Err(Error::Shape(format!(
            "predictions are {}x{}, plan needs {}x{}",
            predicted.rows,
            predicted.cols,
            plan.masked.len(),
            grid.patch_dim()
        )));
    }
    if plan.masked.is_empty() {
        return Ok(0.0);
    }
    let target = grid_rows(&grid, &plan.masked);
    let sse: f64 = predicted
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sse / predicted.data.len() as f64)
}
