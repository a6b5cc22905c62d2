//! Raster to patch tokens: a strided convolutional stem (kernel = stride, so
//! every output cell sees exactly its own receptive field) followed by a
//! fixed 2D sine/cosine positional embedding.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::{gelu, Init, LayerNorm, Linear, ParamGroup};

/// Channel-first image, values already centered (see [`crate::scenes::Image::to_raster`]).
#[derive(Debug, Clone, PartialEq)]
pub struct RasterInput {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl RasterInput {
    pub fn zeros(height: usize, width: usize) -> Self {
        RasterInput {
            channels: 3,
            height,
            width,
            pixels: vec![0.0; 3 * height * width],
        }
    }

    pub fn validate(&self, stride_total: usize) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::Dimension(format!("expected 3 channels, got {}", self.channels)));
        }
        if self.pixels.len() != self.channels * self.height * self.width {
            return Err(Error::Dimension(format!(
                "pixel buffer has {} values for {}x{}x{}",
                self.pixels.len(),
                self.channels,
                self.height,
                self.width
            )));
        }
        if self.height < stride_total
            || self.width < stride_total
            || self.height % stride_total != 0
            || self.width % stride_total != 0
        {
            return Err(Error::Dimension(format!(
                "{}x{} raster is not a positive multiple of stride {stride_total}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Sequenced patch tokens of one or more images: `tokens: [B, grid_h * grid_w, D]`.
#[derive(Debug, Clone)]
pub struct PatchTokenSet {
    pub tokens: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchTokenSet {
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// 2D sine/cosine table of shape `[grid_h * grid_w, dim]` (row-major cells).
/// The first half of the channels encodes the row, the second half the column;
/// within a half, even channels are `sin(p / 10000^(2i/half))` and odd
/// channels the matching cosine, so cell (0, 0) is all sines 0, cosines 1.
pub fn cosine_position_embedding(grid_h: usize, grid_w: usize, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 || dim == 0 {
        return Err(Error::Dimension(format!("positional embedding dim {dim} must be even")));
    }
    let half = dim / 2;
    let encode = |pos: usize, out: &mut Vec<f64>| {
        for c in 0..half {
            let i = (c / 2) as f64;
            let freq = 10000f64.powf(2.0 * i / half as f64);
            let angle = pos as f64 / freq;
            out.push(if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    };
    let mut table = Vec::with_capacity(grid_h * grid_w * dim);
    for r in 0..grid_h {
        for c in 0..grid_w {
            encode(r, &mut table);
            encode(c, &mut table);
        }
    }
    Ok(table)
}

/// One patchify block: non-overlapping `stride x stride` cells through a
/// shared linear map (a convolution with kernel = stride, no padding).
#[derive(Debug, Clone)]
struct PatchBlock {
    proj: Linear,
    stride: usize,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    blocks: Vec<PatchBlock>,
    norm: LayerNorm,
    dim: usize,
}

impl Backbone {
    /// `channels` lists the intermediate widths; the last block outputs `dim`.
    pub fn new(init: &mut Init, channels: &[usize], strides: &[usize], dim: usize) -> Result<Self> {
        if strides.len() != channels.len() + 1 {
            return Err(Error::Config("stem needs one stride per block".into()));
        }
        let mut s = init.pp("backbone").with_group(ParamGroup::Backbone);
        let widths: Vec<usize> = std::iter::once(3).chain(channels.iter().copied()).chain([dim]).collect();
        let blocks = strides
            .iter()
            .enumerate()
            .map(|(i, &stride)| {
                let d_in = widths[i] * stride * stride;
                Ok(PatchBlock {
                    proj: Linear::new(&mut s, &format!("block{i}"), d_in, widths[i + 1])?,
                    stride,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(&mut s, "norm", dim)?;
        Ok(Backbone { blocks, norm, dim })
    }

    pub fn stride_total(&self) -> usize {
        self.blocks.iter().map(|b| b.stride).product()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Pre-embedding features: `[B, 3, H, W] -> [B, (H/s)(W/s), D]`.
    pub fn features(&self, images: &Tensor) -> Result<(Tensor, usize, usize)> {
        let (b, c, h, w) = images.dims4()?;
        let st = self.stride_total();
        if c != 3 || h % st != 0 || w % st != 0 || h < st || w < st {
            return Err(Error::Dimension(format!(
                "input {:?} incompatible with total stride {st}",
                images.dims()
            )));
        }
        let mut x = images.clone();
        let n = self.blocks.len();
        for (i, block) in self.blocks.iter().enumerate() {
            let (b, c, h, w) = x.dims4()?;
            let s = block.stride;
            let (gh, gw) = (h / s, w / s);
            let cells = x
                .reshape(vec![b, c, gh, s, gw, s])?
                .permute(vec![0, 2, 4, 1, 3, 5])?
                .contiguous()?
                .reshape((b * gh * gw, c * s * s))?;
            let mut y = block.proj.forward(&cells)?;
            if i + 1 < n {
                y = gelu(&y)?;
            }
            x = y.reshape((b, gh, gw, block.proj.out_dim()))?.permute((0, 3, 1, 2))?;
        }
        let (_, d, gh, gw) = x.dims4()?;
        let tokens = x.reshape((b, d, gh * gw))?.transpose(1, 2)?.contiguous()?;
        Ok((self.norm.forward(&tokens)?, gh, gw))
    }

    /// Patch tokens with the positional embedding added after flattening.
    pub fn forward(&self, images: &Tensor) -> Result<PatchTokenSet> {
        let (features, gh, gw) = self.features(images)?;
        let pe = cosine_position_embedding(gh, gw, self.dim)?;
        let pe = Tensor::from_vec(pe, (gh * gw, self.dim), &Device::Cpu)?.to_dtype(features.dtype())?;
        Ok(PatchTokenSet {
            tokens: features.broadcast_add(&pe)?,
            grid_h: gh,
            grid_w: gw,
        })
    }

    /// Single-raster convenience wrapper around [`Backbone::forward`].
    pub fn tokenize(&self, input: &RasterInput, dtype: DType) -> Result<PatchTokenSet> {
        input.validate(self.stride_total())?;
        let images = stack_rasters(std::slice::from_ref(input), dtype)?;
        self.forward(&images)
    }
}

/// Stacks equally sized rasters into a `[B, 3, H, W]` tensor.
pub fn stack_rasters(rasters: &[RasterInput], dtype: DType) -> Result<Tensor> {
    let first = rasters
        .first()
        .ok_or_else(|| Error::Dimension("empty raster batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(rasters.len() * 3 * h * w);
    for r in rasters {
        if (r.channels, r.height, r.width) != (3, h, w) {
            return Err(Error::Dimension("rasters in a batch must share their size".into()));
        }
        data.extend_from_slice(&r.pixels);
    }
    Ok(Tensor::from_vec(data, (rasters.len(), 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}
