//! Fragment image crop to the visual feature.
//!
//! The crop is resized to a fixed height, passed through a stack of
//! conv + relu + max-pool blocks whose pooling collapses the height to one
//! row, read column by column as a sequence, encoded by a stacked
//! bidirectional LSTM and max-pooled over time.

use image::imageops::{self, FilterType};
use image::GrayImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::document::{cut_crop, FragmentId, RectClosure};
use crate::error::{Error, Result};
use crate::nn::conv::PoolCache;
use crate::nn::lstm::BiLstmCache;
use crate::nn::{BiLstm, Conv2d, Grads, MaxPool2d, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropGeometry {
    pub height: usize,
    pub min_width: usize,
    pub max_width: usize,
}

impl Default for CropGeometry {
    fn default() -> Self {
        Self {
            height: 32,
            min_width: 32,
            max_width: 512,
        }
    }
}

/// Resized crop; pixel values are ink intensity in `[0, 1]` (background is 0).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageCrop {
    pub fragment_id: FragmentId,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl ImageCrop {
    pub fn blank(fragment_id: FragmentId, height: usize, width: usize) -> Self {
        Self {
            fragment_id,
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }
}

/// Cuts `closure` out of the page raster (clamped to the page) and resizes it.
pub fn crop_and_resize(
    page_image: Option<&GrayImage>,
    closure: &RectClosure,
    geometry: &CropGeometry,
    fragment_id: FragmentId,
) -> Result<ImageCrop> {
    let image = page_image.ok_or_else(|| {
        Error::Validation(
            "no page image available for cropping; disable the visual modality for this dataset".into(),
        )
    })?;
    Ok(resize_crop(&cut_crop(image, closure), geometry, fragment_id))
}

/// Aspect-preserving resize to `geometry.height`; widths above the maximum are
/// squeezed, widths below the minimum are padded on the right with background.
pub fn resize_crop(raw: &GrayImage, geometry: &CropGeometry, fragment_id: FragmentId) -> ImageCrop {
    let (w, h) = raw.dimensions();
    let target_h = geometry.height;
    let scaled = ((w as f64) * target_h as f64 / h.max(1) as f64).round() as usize;
    let new_w = scaled.clamp(1, geometry.max_width);
    let resized = if (new_w as u32, target_h as u32) == (w, h) {
        raw.clone()
    } else {
        imageops::resize(raw, new_w as u32, target_h as u32, FilterType::Triangle)
    };
    let out_w = new_w.max(geometry.min_width);
    let mut crop = ImageCrop::blank(fragment_id, target_h, out_w);
    for (x, y, p) in resized.enumerate_pixels() {
        crop.pixels[y as usize * out_w + x as usize] = 1.0 - p.0[0] as f64 / 255.0;
    }
    crop
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    SmallCrnn,
    Resnet50Modified,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub channels: usize,
    pub pool_h: usize,
    pub pool_w: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisualEncoderSpec {
    pub backbone: BackboneKind,
    pub geometry: CropGeometry,
    pub blocks: Vec<ConvBlockSpec>,
    pub rnn_layers: usize,
}

impl Default for VisualEncoderSpec {
    fn default() -> Self {
        let block = |channels, pool_h, pool_w| ConvBlockSpec {
            channels,
            pool_h,
            pool_w,
        };
        Self {
            backbone: BackboneKind::SmallCrnn,
            geometry: CropGeometry::default(),
            blocks: vec![
                block(4, 2, 2),
                block(8, 2, 2),
                block(16, 2, 1),
                block(16, 2, 1),
                block(32, 2, 1),
            ],
            rnn_layers: 2,
        }
    }
}

impl VisualEncoderSpec {
    pub fn height_factor(&self) -> usize {
        self.blocks.iter().map(|b| b.pool_h).product()
    }

    pub fn width_factor(&self) -> usize {
        self.blocks.iter().map(|b| b.pool_w).product()
    }

    /// Sequence length produced for a crop of the given width.
    pub fn sequence_len(&self, width: usize) -> usize {
        self.blocks.iter().fold(width, |w, b| w / b.pool_w)
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("visual encoder: {m}")));
        if self.backbone == BackboneKind::Resnet50Modified {
            return fail(
                "backbone resnet50_modified needs external pretrained weights and is not built in; use small_crnn".into(),
            );
        }
        if self.blocks.is_empty() || self.rnn_layers == 0 {
            return fail("need at least one conv block and one recurrent layer".into());
        }
        if self.blocks.iter().any(|b| b.channels == 0 || b.pool_h == 0 || b.pool_w == 0) {
            return fail("channels and pool sizes must be positive".into());
        }
        let g = &self.geometry;
        if g.height == 0 || g.min_width == 0 || g.min_width > g.max_width {
            return fail(format!("invalid crop geometry {g:?}"));
        }
        if self.height_factor() != g.height {
            return fail(format!(
                "backbone reduces height {} by a factor of {}, which does not leave a single row",
                g.height,
                self.height_factor()
            ));
        }
        if self.sequence_len(g.min_width) == 0 {
            return fail(format!(
                "min_width {} is smaller than the width factor {}",
                g.min_width,
                self.width_factor()
            ));
        }
        if dim == 0 || !dim.is_multiple_of(2) {
            return fail(format!("visual dimension {dim} must be positive and even"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeature(pub Vec<f64>);

impl VisualFeature {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone)]
pub struct VisualEncoder {
    convs: Vec<Conv2d>,
    pools: Vec<MaxPool2d>,
    rnn: Vec<BiLstm>,
    dim: usize,
    spec: VisualEncoderSpec,
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Vec<f64>,
    height: usize,
    width: usize,
    activated: Vec<f64>,
    pool: PoolCache,
}

#[derive(Debug, Clone)]
pub struct VisualCache {
    blocks: Vec<BlockCache>,
    channels: usize,
    steps: usize,
    rnn: Vec<BiLstmCache>,
    argmax: Vec<usize>,
}

impl VisualCache {
    /// Per-step outputs of the last recurrent layer, `steps x dim`.
    pub fn hidden_states(&self) -> &[f64] {
        &self.rnn.last().expect("at least one layer").output
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

impl VisualEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        spec: &VisualEncoderSpec,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate(dim)?;
        let mut convs = Vec::new();
        let mut pools = Vec::new();
        let mut in_ch = 1;
        for (i, b) in spec.blocks.iter().enumerate() {
            convs.push(Conv2d::new(store, &format!("visual.conv{i}"), in_ch, b.channels, rng));
            pools.push(MaxPool2d {
                pool_h: b.pool_h,
                pool_w: b.pool_w,
            });
            in_ch = b.channels;
        }
        let mut rnn = Vec::new();
        let mut rnn_in = in_ch;
        for l in 0..spec.rnn_layers {
            rnn.push(BiLstm::new(store, &format!("visual.rnn{l}"), rnn_in, dim / 2, rng));
            rnn_in = dim;
        }
        Ok(Self {
            convs,
            pools,
            rnn,
            dim,
            spec: spec.clone(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn spec(&self) -> &VisualEncoderSpec {
        &self.spec
    }

    pub fn encode_visual(&self, store: &ParamStore, crop: &ImageCrop) -> Result<VisualFeature> {
        Ok(VisualFeature(self.forward(store, crop)?.0))
    }

    pub fn forward(&self, store: &ParamStore, crop: &ImageCrop) -> Result<(Vec<f64>, VisualCache)> {
        let g = &self.spec.geometry;
        if crop.height != g.height || crop.width < g.min_width || crop.width > g.max_width {
            return Err(Error::Validation(format!(
                "crop of fragment {} is {}x{}, expected height {} and width in [{}, {}]",
                crop.fragment_id, crop.height, crop.width, g.height, g.min_width, g.max_width
            )));
        }
        let mut x = crop.pixels.clone();
        let (mut h, mut w) = (crop.height, crop.width);
        let mut blocks = Vec::with_capacity(self.convs.len());
        for (conv, pool) in self.convs.iter().zip(&self.pools) {
            let mut y = conv.forward(store, &x, h, w);
            y.iter_mut().for_each(|v| {
                if !(*v > 0.0) {
                    *v = 0.0
                }
            });
            let (pooled, pool_cache) = pool.forward(&y, conv.out_channels, h, w);
            let (oh, ow) = pool.output_size(h, w);
            blocks.push(BlockCache {
                input: std::mem::replace(&mut x, pooled),
                height: h,
                width: w,
                activated: y,
                pool: pool_cache,
            });
            h = oh;
            w = ow;
        }
        debug_assert_eq!(h, 1);
        let channels = self.convs.last().expect("validated").out_channels;
        let steps = w;
        let mut seq = vec![0.0; steps * channels];
        for c in 0..channels {
            for t in 0..steps {
                seq[t * channels + c] = x[c * steps + t];
            }
        }
        let mut caches: Vec<BiLstmCache> = Vec::with_capacity(self.rnn.len());
        for layer in &self.rnn {
            let input = caches.last().map(|c| &c.output[..]).unwrap_or(&seq);
            let cache = layer.forward(store, input, steps);
            caches.push(cache);
        }
        let states = &caches.last().expect("validated").output;
        let mut out = vec![f64::NEG_INFINITY; self.dim];
        let mut argmax = vec![0usize; self.dim];
        for t in 0..steps {
            for k in 0..self.dim {
                let v = states[t * self.dim + k];
                if v > out[k] {
                    out[k] = v;
                    argmax[k] = t;
                }
            }
        }
        Ok((
            out,
            VisualCache {
                blocks,
                channels,
                steps,
                rnn: caches,
                argmax,
            },
        ))
    }

    pub fn backward(&self, store: &ParamStore, cache: &VisualCache, d_out: &[f64], grads: &mut Grads) {
        let (dim, steps) = (self.dim, cache.steps);
        let mut d_states = vec![0.0; steps * dim];
        for k in 0..dim {
            d_states[cache.argmax[k] * dim + k] += d_out[k];
        }
        for (layer, lc) in self.rnn.iter().zip(&cache.rnn).rev() {
            d_states = layer
                .backward(store, lc, &d_states, grads, true)
                .expect("input gradient requested");
        }
        let channels = cache.channels;
        let mut d_map = vec![0.0; channels * steps];
        for c in 0..channels {
            for t in 0..steps {
                d_map[c * steps + t] = d_states[t * channels + c];
            }
        }
        for (i, (conv, pool)) in self.convs.iter().zip(&self.pools).enumerate().rev() {
            let bc = &cache.blocks[i];
            let mut d_act = pool.backward(&bc.pool, &d_map);
            for (d, a) in d_act.iter_mut().zip(&bc.activated) {
                if !(*a > 0.0) {
                    *d = 0.0;
                }
            }
            match conv.backward(store, &bc.input, bc.height, bc.width, &d_act, grads, i > 0) {
                Some(d_in) => d_map = d_in,
                None => break,
            }
        }
    }
}
