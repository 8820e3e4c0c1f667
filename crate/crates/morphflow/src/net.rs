//! The registration network: a convolutional encoder-decoder with skip
//! connections that maps a (fixed, moving) pair — stacked as a 2-channel
//! input — to a dense displacement field.
//!
//! The encoder applies one stride-2 convolution per level (kernel 3 per axis,
//! leaky rectifier), halving the spatial dims each time. The decoder starts
//! with a convolution at the coarsest scale, then repeats [×2 nearest
//! upsample, concatenate the matching encoder activation (the raw 2-channel
//! input at full scale), stride-1 convolution]; an optional extra
//! full-resolution convolution follows. A final stride-1 convolution with no
//! activation produces one offset channel per spatial axis; its weights start
//! at 1e-3 scale so a fresh network predicts a near-identity warp.
//!
//! In concatenations the upsampled decoder path comes first, then the skip.

use std::fs;
use std::hash::{Hash, Hasher};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{
    concat_channels, conv_backward, conv_forward, leaky_relu_backward, leaky_relu_forward,
    split_channels, upsample_nearest, upsample_nearest_backward, ConvKernel, Tensor,
};
use crate::rng::seeded;
use crate::volume::Volume;
use crate::warp::DisplacementField;
use crate::Real;
use rand::Rng as _;

/// Convolution kernel side length used throughout the network.
pub const KERNEL_EXTENT: usize = 3;

/// Architecture description: channel counts per layer plus the activation
/// slope. The number of offset channels always equals `spatial_rank`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// 2 or 3.
    pub spatial_rank: usize,
    /// Output channels of each stride-2 encoder level.
    pub encoder_channels: Vec<usize>,
    /// Output channels of each decoder convolution, coarsest first; length
    /// must be `levels + 1`, plus 1 when `extra_full_res_layer` is set.
    pub decoder_channels: Vec<usize>,
    /// Append one more full-resolution convolution before the field layer.
    pub extra_full_res_layer: bool,
    /// Negative-side slope of the leaky rectifier.
    pub leaky_slope: Real,
}

impl ArchConfig {
    /// Smaller preset: encoder (16, 32, 32, 32), decoder (32, 32, 32, 8, 8).
    pub fn model_1(spatial_rank: usize) -> Self {
        ArchConfig {
            spatial_rank,
            encoder_channels: vec![16, 32, 32, 32],
            decoder_channels: vec![32, 32, 32, 8, 8],
            extra_full_res_layer: false,
            leaky_slope: 0.2,
        }
    }

    /// Larger preset: more late-stage channels and one extra full-resolution
    /// convolution — decoder (32, 32, 32, 32, 16, 16).
    pub fn model_2(spatial_rank: usize) -> Self {
        ArchConfig {
            spatial_rank,
            encoder_channels: vec![16, 32, 32, 32],
            decoder_channels: vec![32, 32, 32, 32, 16, 16],
            extra_full_res_layer: true,
            leaky_slope: 0.2,
        }
    }

    /// Number of stride-2 levels.
    pub fn levels(&self) -> usize {
        self.encoder_channels.len()
    }

    /// Input dims must be divisible by this.
    pub fn downsample_factor(&self) -> usize {
        1 << self.levels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.spatial_rank != 2 && self.spatial_rank != 3 {
            return Err(Error::InvalidConfig(format!(
                "spatial_rank must be 2 or 3, got {}",
                self.spatial_rank
            )));
        }
        if self.encoder_channels.is_empty() {
            return Err(Error::InvalidConfig(
                "encoder needs at least one level".into(),
            ));
        }
        let want = self.levels() + 1 + usize::from(self.extra_full_res_layer);
        if self.decoder_channels.len() != want {
            return Err(Error::InvalidConfig(format!(
                "decoder_channels must hold {} entries for {} levels{}, got {}",
                want,
                self.levels(),
                if self.extra_full_res_layer {
                    " plus the extra layer"
                } else {
                    ""
                },
                self.decoder_channels.len()
            )));
        }
        if self
            .encoder_channels
            .iter()
            .chain(&self.decoder_channels)
            .any(|&c| c == 0)
        {
            return Err(Error::InvalidConfig("channel counts must be positive".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "leaky_slope must lie in (0, 1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    /// Receptive field (in input voxels, per axis) of one unit at the
    /// coarsest encoder scale: starting from r = 1 with jump j = 1, each
    /// stride-2 kernel-3 level grows r by 2j and doubles j.
    pub fn receptive_field(&self) -> usize {
        let mut r = 1usize;
        let mut j = 1usize;
        for _ in 0..self.levels() {
            r += 2 * j;
            j *= 2;
        }
        r
    }

    /// (in_channels, out_channels, stride) of every convolution in execution
    /// order: encoder, decoder, field layer.
    fn layer_plan(&self) -> Vec<(usize, usize, usize)> {
        let levels = self.levels();
        let mut plan = Vec::new();
        let mut prev = 2;
        for &c in &self.encoder_channels {
            plan.push((prev, c, 2));
            prev = c;
        }
        for (j, &c) in self.decoder_channels.iter().enumerate() {
            let input = if j == 0 || j > levels {
                prev
            } else if j < levels {
                // Upsampled path + encoder skip from the matching scale.
                prev + self.encoder_channels[levels - 1 - j]
            } else {
                // Full resolution: skip is the raw 2-channel input.
                prev + 2
            };
            plan.push((input, c, 1));
            prev = c;
        }
        plan.push((prev, self.spatial_rank, 1));
        plan
    }
}

/// All learnable parameters plus the architecture they implement.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub arch: ArchConfig,
    /// Seed the parameters were initialized from.
    pub seed: u64,
    /// Encoder convolutions, decoder convolutions, field convolution — in
    /// execution order.
    pub layers: Vec<ConvKernel>,
}

impl NetworkParams {
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|k| k.num_params()).sum()
    }

    /// All weights and biases as one vector (per layer: weights, then bias).
    pub fn flatten(&self) -> Vec<Real> {
        let mut flat = Vec::with_capacity(self.num_params());
        for k in &self.layers {
            flat.extend_from_slice(&k.weights);
            flat.extend_from_slice(&k.bias);
        }
        flat
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn set_from_flat(&mut self, flat: &[Real]) {
        assert_eq!(flat.len(), self.num_params(), "flat length must match");
        let mut pos = 0;
        for k in self.layers.iter_mut() {
            let nw = k.weights.len();
            k.weights.copy_from_slice(&flat[pos..pos + nw]);
            pos += nw;
            let nb = k.bias.len();
            k.bias.copy_from_slice(&flat[pos..pos + nb]);
            pos += nb;
        }
    }

    fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for k in &self.layers {
            for w in k.weights.iter().chain(&k.bias) {
                w.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Flatten gradient kernels in the same order as [`NetworkParams::flatten`].
pub fn flatten_kernels(layers: &[ConvKernel]) -> Vec<Real> {
    let mut flat = Vec::new();
    for k in layers {
        flat.extend_from_slice(&k.weights);
        flat.extend_from_slice(&k.bias);
    }
    flat
}

/// Initialize parameters for `cfg`. Hidden layers draw uniformly with the
/// fan-in bound √(6 / fan_in); the field layer draws at ±1e-3 so the initial
/// warp is near identity. Values are snapped to f32 so checkpoints round-trip
/// bit-exactly.
pub fn build_network(cfg: &ArchConfig, seed: u64) -> Result<NetworkParams> {
    cfg.validate()?;
    let mut rng = seeded(seed);
    let plan = cfg.layer_plan();
    let extent = vec![KERNEL_EXTENT; cfg.spatial_rank];
    let k_vox: usize = extent.iter().product();
    let mut layers = Vec::with_capacity(plan.len());
    for (li, &(ci, co, _)) in plan.iter().enumerate() {
        let is_field_layer = li == plan.len() - 1;
        let bound = if is_field_layer {
            1e-3
        } else {
            (6.0 / (ci * k_vox) as f64).sqrt()
        };
        let weights: Vec<Real> = (0..co * ci * k_vox)
            .map(|_| (rng.random_range(-bound..bound) as f32) as Real)
            .collect();
        layers.push(ConvKernel::new(co, ci, extent.clone(), weights, vec![0.0; co]));
    }
    Ok(NetworkParams {
        arch: cfg.clone(),
        seed,
        layers,
    })
}

/// Activations retained by [`forward`] for the backward pass.
pub struct ForwardCache {
    fingerprint: u64,
    input_shape: Vec<usize>,
    /// Input tensor of every convolution, execution order.
    conv_inputs: Vec<Tensor>,
    /// Pre-activation output of every rectified convolution (all but the
    /// field layer).
    pre_acts: Vec<Tensor>,
}

fn volumes_to_input(f: &Volume, m: &Volume) -> Tensor {
    let mut data = Vec::with_capacity(2 * f.len());
    data.extend_from_slice(&f.data);
    data.extend_from_slice(&m.data);
    Tensor::new(2, f.shape.clone(), data)
}

/// Run the network on a (fixed, moving) pair, producing the displacement
/// field and the activation cache needed by [`backward`].
pub fn forward(
    params: &NetworkParams,
    f: &Volume,
    m: &Volume,
) -> Result<(DisplacementField, ForwardCache)> {
    let arch = &params.arch;
    arch.validate()?;
    if f.shape != m.shape {
        return Err(Error::shape_mismatch("network input", &f.shape, &m.shape));
    }
    if f.rank() != arch.spatial_rank {
        return Err(Error::InvalidArgument(format!(
            "network expects rank {}, input has rank {}",
            arch.spatial_rank,
            f.rank()
        )));
    }
    let factor = arch.downsample_factor();
    if f.shape.iter().any(|&d| d % factor != 0) {
        return Err(Error::InvalidArgument(format!(
            "input dims {:?} must be divisible by {}",
            f.shape, factor
        )));
    }

    let levels = arch.levels();
    let slope = arch.leaky_slope;
    let x0 = volumes_to_input(f, m);
    let mut conv_inputs = Vec::new();
    let mut pre_acts = Vec::new();
    let mut layer = 0usize;

    // Encoder: post-activation outputs double as decoder skips.
    let mut skips: Vec<Tensor> = Vec::with_capacity(levels);
    let mut cur = x0.clone();
    for _ in 0..levels {
        let pre = conv_forward(&cur, &params.layers[layer], 2)?;
        let post = leaky_relu_forward(&pre, slope);
        conv_inputs.push(cur);
        pre_acts.push(pre);
        skips.push(post.clone());
        cur = post;
        layer += 1;
    }

    // Decoder: coarsest conv, then upsample/concat/conv per level, then the
    // optional extra full-resolution conv.
    for j in 0..arch.decoder_channels.len() {
        let input = if j == 0 || j > levels {
            cur
        } else {
            let up = upsample_nearest(&cur);
            let skip = if j < levels { &skips[levels - 1 - j] } else { &x0 };
            concat_channels(&up, skip)?
        };
        let pre = conv_forward(&input, &params.layers[layer], 1)?;
        let post = leaky_relu_forward(&pre, slope);
        conv_inputs.push(input);
        pre_acts.push(pre);
        cur = post;
        layer += 1;
    }

    // Field layer: no activation.
    let field_tensor = conv_forward(&cur, &params.layers[layer], 1)?;
    conv_inputs.push(cur);

    let field = DisplacementField {
        shape: field_tensor.shape,
        offsets: field_tensor.data,
    };
    Ok((
        field,
        ForwardCache {
            fingerprint: params.fingerprint(),
            input_shape: f.shape.clone(),
            conv_inputs,
            pre_acts,
        },
    ))
}

/// Field prediction without keeping the cache.
pub fn predict_field(params: &NetworkParams, f: &Volume, m: &Volume) -> Result<DisplacementField> {
    forward(params, f, m).map(|(field, _)| field)
}

/// Gradients of `⟨grad_field, forward(params, f, m)⟩` with respect to every
/// parameter, one gradient kernel per layer in the same order as
/// `params.layers`. The cache must come from a [`forward`] run with the same
/// parameter values.
pub fn backward(
    params: &NetworkParams,
    cache: &ForwardCache,
    grad_field: &DisplacementField,
) -> Result<Vec<ConvKernel>> {
    if cache.fingerprint != params.fingerprint() {
        return Err(Error::StaleCache);
    }
    if grad_field.shape != cache.input_shape {
        return Err(Error::shape_mismatch(
            "backward upstream",
            &grad_field.shape,
            &cache.input_shape,
        ));
    }
    let arch = &params.arch;
    let levels = arch.levels();
    let slope = arch.leaky_slope;
    let n_layers = params.layers.len();
    let mut grads: Vec<ConvKernel> = Vec::with_capacity(n_layers);

    // Field layer.
    let mut layer = n_layers - 1;
    let upstream = Tensor::new(
        arch.spatial_rank,
        grad_field.shape.clone(),
        grad_field.offsets.clone(),
    );
    let (mut cur_grad, g_field) = conv_backward(
        &cache.conv_inputs[layer],
        &params.layers[layer],
        1,
        &upstream,
    )?;
    grads.push(g_field);

    // Decoder in reverse. Skip gradients accumulate per encoder level.
    let mut skip_grads: Vec<Option<Tensor>> = (0..levels).map(|_| None).collect();
    for j in (0..arch.decoder_channels.len()).rev() {
        layer -= 1;
        let g_pre = leaky_relu_backward(&cache.pre_acts[layer], slope, &cur_grad);
        let (g_in, g_k) = conv_backward(&cache.conv_inputs[layer], &params.layers[layer], 1, &g_pre)?;
        grads.push(g_k);
        if j == 0 || j > levels {
            cur_grad = g_in;
        } else {
            let up_channels = g_in.channels
                - if j < levels {
                    arch.encoder_channels[levels - 1 - j]
                } else {
                    2
                };
            let (g_up, g_skip) = split_channels(&g_in, up_channels);
            cur_grad = upsample_nearest_backward(&g_up);
            if j < levels {
                skip_grads[levels - 1 - j] = Some(g_skip);
            }
            // j == levels: the skip is the raw input; its gradient is unused.
        }
    }

    // Encoder in reverse; each level's activation feeds both the next level
    // and (except the coarsest) a decoder concat.
    for i in (0..levels).rev() {
        layer -= 1;
        let g_pre = leaky_relu_backward(&cache.pre_acts[layer], slope, &cur_grad);
        let (g_in, g_k) = conv_backward(&cache.conv_inputs[layer], &params.layers[layer], 2, &g_pre)?;
        grads.push(g_k);
        if i > 0 {
            cur_grad = g_in;
            if let Some(sg) = skip_grads[i - 1].take() {
                for (a, b) in cur_grad.data.iter_mut().zip(&sg.data) {
                    *a += b;
                }
            }
        }
    }

    grads.reverse();
    Ok(grads)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MFLOWNET";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    arch: ArchConfig,
    seed: u64,
}

/// Write parameters as magic + JSON header + little-endian f32 blob in layer
/// order. Parameters are stored in single precision.
// The narrowing is a no-op under the `f32` feature, where `Real` is `f32`.
#[allow(clippy::unnecessary_cast)]
pub fn save_params(params: &NetworkParams, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        arch: params.arch.clone(),
        seed: params.seed,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for v in params.flatten() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Load a checkpoint written by [`save_params`], validating the header and
/// the parameter count.
pub fn load_params(path: &Path) -> Result<NetworkParams> {
    let corrupt = |reason: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("not a network checkpoint (bad magic)"));
    }
    let header_len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    if bytes.len() < 12 + header_len {
        return Err(corrupt("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|_| corrupt("unparseable header"))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(corrupt(&format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    header.arch.validate()?;

    let mut params = build_network(&header.arch, header.seed)?;
    let expected = params.num_params();
    let blob = &bytes[12 + header_len..];
    if blob.len() != expected * 4 {
        return Err(corrupt(&format!(
            "parameter blob holds {} values, architecture needs {}",
            blob.len() / 4,
            expected
        )));
    }
    let flat: Vec<Real> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Real)
        .collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(corrupt("non-finite parameter values"));
    }
    params.set_from_flat(&flat);
    Ok(params)
}
