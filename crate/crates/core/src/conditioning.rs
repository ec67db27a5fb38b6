//! Multimodal conditioning: image encoder, release-date encoder, and the
//! cross-attention fusion producing the embedding injected into every
//! denoiser block.
//!
//! The date embedding acts as the single query token; the image tokens are
//! keys and values. At desk scale the image backbone is a small 4-stage
//! ConvNet so tests never need pretrained weights; the output contract
//! (C x W tokens) is the same either way.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ProductImage, ReleaseDate};
use crate::error::{CoreError, Result};
use crate::graph::{Conv2dSpec, Graph, NodeId, ParamStore};
use crate::num::Scalar;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditioningConfig {
    /// Embedding channels C; must match the denoiser's channel count.
    pub channels: usize,
    /// Number of image tokens W.
    pub horizon: usize,
    pub n_heads: usize,
    /// Learned positional encoding over the W image tokens.
    pub positional_encoding: bool,
    /// Per-stage output channels of the desk-scale conv backbone.
    pub backbone_channels: Vec<usize>,
    pub use_image: bool,
    pub use_temporal: bool,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        ConditioningConfig {
            channels: 64,
            horizon: 6,
            n_heads: 4,
            positional_encoding: true,
            backbone_channels: vec![16, 32, 64, 64],
            use_image: true,
            use_temporal: true,
        }
    }
}

impl ConditioningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.horizon == 0 || self.n_heads == 0 {
            return Err(CoreError::InvalidConfig(
                "conditioning dimensions must be positive".into(),
            ));
        }
        if self.channels % self.n_heads != 0 {
            return Err(CoreError::InvalidConfig(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.n_heads
            )));
        }
        if !self.use_image && !self.use_temporal {
            return Err(CoreError::InvalidConfig(
                "at least one of use_image / use_temporal must be set".into(),
            ));
        }
        if self.backbone_channels.is_empty() {
            return Err(CoreError::InvalidConfig("backbone needs >= 1 stage".into()));
        }
        Ok(())
    }
}

pub fn init_conditioning<F: Scalar>(
    config: &ConditioningConfig,
    store: &mut ParamStore<F>,
    prefix: &str,
    seed: u64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = config.channels;
    let dense = |rng: &mut ChaCha8Rng, store: &mut ParamStore<F>, name: String, rows: usize, cols: usize| {
        let scale = 1.0 / (cols as f64).sqrt();
        store.init_normal(name, rows, cols, scale, rng);
    };
    // image backbone: 3x3 stride-2 convs
    let mut in_ch = 3;
    for (i, &out_ch) in config.backbone_channels.iter().enumerate() {
        let fan_in = in_ch * 9;
        dense(
            &mut rng,
            store,
            format!("{prefix}.img.conv{i}.w"),
            out_ch,
            fan_in,
        );
        store.init_zeros(format!("{prefix}.img.conv{i}.b"), out_ch, 1);
        in_ch = out_ch;
    }
    // channel reduction (the Conv1D role) and per-token dense projection
    dense(&mut rng, store, format!("{prefix}.img.reduce_w"), c, in_ch);
    store.init_zeros(format!("{prefix}.img.reduce_b"), c, 1);
    dense(&mut rng, store, format!("{prefix}.img.proj_w"), c, c);
    store.init_zeros(format!("{prefix}.img.proj_b"), c, 1);
    if config.positional_encoding {
        store.init_normal(format!("{prefix}.img.pos"), c, config.horizon, 0.02, &mut rng);
    }
    // temporal encoder: four per-component MLPs (1 -> C -> C), then 4C -> C
    for comp in ["day", "week", "month", "year"] {
        dense(&mut rng, store, format!("{prefix}.date.{comp}.w1"), c, 1);
        store.init_zeros(format!("{prefix}.date.{comp}.b1"), c, 1);
        dense(&mut rng, store, format!("{prefix}.date.{comp}.w2"), c, c);
        store.init_zeros(format!("{prefix}.date.{comp}.b2"), c, 1);
    }
    dense(&mut rng, store, format!("{prefix}.date.mix_w1"), c, 4 * c);
    store.init_zeros(format!("{prefix}.date.mix_b1"), c, 1);
    dense(&mut rng, store, format!("{prefix}.date.mix_w2"), c, c);
    store.init_zeros(format!("{prefix}.date.mix_b2"), c, 1);
    // transformer-decoder-style fusion layer
    for name in ["sa_v", "sa_o", "wq", "wk", "wv", "wo", "ff_w1", "ff_w2"] {
        let (rows, cols) = match name {
            "ff_w1" => (2 * c, c),
            "ff_w2" => (c, 2 * c),
            _ => (c, c),
        };
        dense(&mut rng, store, format!("{prefix}.fuse.{name}"), rows, cols);
    }
    for name in ["sa_b", "wo_b", "ff_b2"] {
        store.init_zeros(format!("{prefix}.fuse.{name}"), c, 1);
    }
    store.init_zeros(format!("{prefix}.fuse.ff_b1"), 2 * c, 1);
    for ln in ["ln1", "ln2", "ln3"] {
        store.insert(
            format!("{prefix}.fuse.{ln}.gamma"),
            Array2::from_elem((c, 1), F::one()),
        );
        store.init_zeros(format!("{prefix}.fuse.{ln}.beta"), c, 1);
    }
}

/// Encode a square RGB image into `(C, W)` tokens.
pub fn encode_image<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    prefix: &str,
    config: &ConditioningConfig,
    image: &ProductImage<F>,
) -> Result<NodeId> {
    if image.pixels.nrows() != 3 {
        return Err(CoreError::ShapeMismatch {
            context: "encode_image".into(),
            expected: "3 channels".into(),
            got: format!("{}", image.pixels.nrows()),
        });
    }
    if image.size < 32 {
        return Err(CoreError::InvalidConfig(format!(
            "image size {} below minimum 32",
            image.size
        )));
    }
    let mut h = g.leaf(image.pixels.clone());
    let mut size = image.size;
    let mut in_ch = 3;
    for (i, &out_ch) in config.backbone_channels.iter().enumerate() {
        let spec = Conv2dSpec {
            in_channels: in_ch,
            out_channels: out_ch,
            height: size,
            width: size,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let w = g.param(store, &format!("{prefix}.img.conv{i}.w"));
        let b = g.param(store, &format!("{prefix}.img.conv{i}.b"));
        let conv = g.conv2d(h, w, spec);
        let biased = g.add_broadcast_col(conv, b);
        h = g.silu(biased);
        size = spec.out_height();
        in_ch = out_ch;
    }
    // flatten spatially (already (C_f, S)), pool to W positions, reduce channels
    let pooled = g.avg_pool_cols(h, config.horizon);
    let reduce_w = g.param(store, &format!("{prefix}.img.reduce_w"));
    let reduce_b = g.param(store, &format!("{prefix}.img.reduce_b"));
    let red = g.matmul(reduce_w, pooled);
    let red = g.add_broadcast_col(red, reduce_b);
    let red = g.silu(red);
    let proj_w = g.param(store, &format!("{prefix}.img.proj_w"));
    let proj_b = g.param(store, &format!("{prefix}.img.proj_b"));
    let tokens = g.matmul(proj_w, red);
    let mut tokens = g.add_broadcast_col(tokens, proj_b);
    if config.positional_encoding {
        let pos = g.param(store, &format!("{prefix}.img.pos"));
        tokens = g.add(tokens, pos);
    }
    Ok(tokens)
}

/// Encode a release date into a `(C, 1)` embedding via four component MLPs
/// and a 4C -> C mixer.
pub fn encode_release_date<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    prefix: &str,
    config: &ConditioningConfig,
    release: &ReleaseDate,
    year_range: (i32, i32),
) -> Result<NodeId> {
    let encoded: [F; 4] = release.encode(year_range.0, year_range.1);
    let comps = ["day", "week", "month", "year"];
    let mut parts = Vec::with_capacity(4);
    for (value, comp) in encoded.iter().zip(comps) {
        let x = g.leaf(Array2::from_elem((1, 1), *value));
        let w1 = g.param(store, &format!("{prefix}.date.{comp}.w1"));
        let b1 = g.param(store, &format!("{prefix}.date.{comp}.b1"));
        let w2 = g.param(store, &format!("{prefix}.date.{comp}.w2"));
        let b2 = g.param(store, &format!("{prefix}.date.{comp}.b2"));
        let h = g.matmul(w1, x);
        let h = g.add(h, b1);
        let h = g.silu(h);
        let h = g.matmul(w2, h);
        let h = g.add(h, b2);
        parts.push(h);
    }
    let cat = g.concat_rows(&parts); // (4C, 1)
    let mix_w1 = g.param(store, &format!("{prefix}.date.mix_w1"));
    let mix_b1 = g.param(store, &format!("{prefix}.date.mix_b1"));
    let mix_w2 = g.param(store, &format!("{prefix}.date.mix_w2"));
    let mix_b2 = g.param(store, &format!("{prefix}.date.mix_b2"));
    let h = g.matmul(mix_w1, cat);
    let h = g.add(h, mix_b1);
    let h = g.silu(h);
    let h = g.matmul(mix_w2, h);
    let out = g.add(h, mix_b2);
    let _ = config;
    Ok(out)
}

pub struct FusionOutput {
    /// The conditioning embedding `(C, 1)`.
    pub embedding: NodeId,
    /// Cross-attention weights, one `(1, W)` row per head.
    pub attention: Vec<NodeId>,
}

/// Transformer-decoder-style fusion: the date embedding is the lone query;
/// image tokens are keys and values. Self-attention over a single query is
/// degenerate (weight exactly 1) and reduces to a value+output projection.
pub fn fuse<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    prefix: &str,
    config: &ConditioningConfig,
    image_tokens: NodeId,
    temporal: NodeId,
) -> Result<FusionOutput> {
    let c = config.channels;
    let heads = config.n_heads;
    let dk = c / heads;
    if g.shape(image_tokens).0 != c || g.shape(temporal) != (c, 1) {
        return Err(CoreError::ShapeMismatch {
            context: "fuse".into(),
            expected: format!("tokens ({c}, W), temporal ({c}, 1)"),
            got: format!("{:?} and {:?}", g.shape(image_tokens), g.shape(temporal)),
        });
    }
    // degenerate self-attention over the single query token
    let sa_v = g.param(store, &format!("{prefix}.fuse.sa_v"));
    let sa_o = g.param(store, &format!("{prefix}.fuse.sa_o"));
    let sa_b = g.param(store, &format!("{prefix}.fuse.sa_b"));
    let v_sa = g.matmul(sa_v, temporal);
    let sa = g.matmul(sa_o, v_sa);
    let sa = g.add(sa, sa_b);
    let q_res = g.add(temporal, sa);
    let ln1g = g.param(store, &format!("{prefix}.fuse.ln1.gamma"));
    let ln1b = g.param(store, &format!("{prefix}.fuse.ln1.beta"));
    let q_ln = g.layer_norm_cols(q_res, ln1g, ln1b);

    // multi-head cross-attention
    let wq = g.param(store, &format!("{prefix}.fuse.wq"));
    let wk = g.param(store, &format!("{prefix}.fuse.wk"));
    let wv = g.param(store, &format!("{prefix}.fuse.wv"));
    let q_all = g.matmul(wq, q_ln); // (C, 1)
    let k_all = g.matmul(wk, image_tokens); // (C, W)
    let v_all = g.matmul(wv, image_tokens); // (C, W)
    let scale = F::from_f64(1.0 / (dk as f64).sqrt());
    let mut head_outs = Vec::with_capacity(heads);
    let mut attn_rows = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_rows(q_all, h * dk, (h + 1) * dk); // (dk, 1)
        let kh = g.slice_rows(k_all, h * dk, (h + 1) * dk); // (dk, W)
        let vh = g.slice_rows(v_all, h * dk, (h + 1) * dk); // (dk, W)
        let qt = g.transpose(qh); // (1, dk)
        let scores = g.matmul(qt, kh); // (1, W)
        let scaled = g.scale(scores, scale);
        let attn = g.softmax_rows(scaled); // (1, W)
        let attn_t = g.transpose(attn); // (W, 1)
        head_outs.push(g.matmul(vh, attn_t)); // (dk, 1)
        attn_rows.push(attn);
    }
    let concat = g.concat_rows(&head_outs); // (C, 1)
    let wo = g.param(store, &format!("{prefix}.fuse.wo"));
    let wo_b = g.param(store, &format!("{prefix}.fuse.wo_b"));
    let attended = g.matmul(wo, concat);
    let attended = g.add(attended, wo_b);
    let x_res = g.add(q_ln, attended);
    let ln2g = g.param(store, &format!("{prefix}.fuse.ln2.gamma"));
    let ln2b = g.param(store, &format!("{prefix}.fuse.ln2.beta"));
    let x_ln = g.layer_norm_cols(x_res, ln2g, ln2b);

    // feed-forward + residual + norm
    let ff_w1 = g.param(store, &format!("{prefix}.fuse.ff_w1"));
    let ff_b1 = g.param(store, &format!("{prefix}.fuse.ff_b1"));
    let ff_w2 = g.param(store, &format!("{prefix}.fuse.ff_w2"));
    let ff_b2 = g.param(store, &format!("{prefix}.fuse.ff_b2"));
    let f = g.matmul(ff_w1, x_ln);
    let f = g.add(f, ff_b1);
    let f = g.silu(f);
    let f = g.matmul(ff_w2, f);
    let f = g.add(f, ff_b2);
    let y_res = g.add(x_ln, f);
    let ln3g = g.param(store, &format!("{prefix}.fuse.ln3.gamma"));
    let ln3b = g.param(store, &format!("{prefix}.fuse.ln3.beta"));
    let embedding = g.layer_norm_cols(y_res, ln3g, ln3b);
    Ok(FusionOutput {
        embedding,
        attention: attn_rows,
    })
}

/// Full conditioning path for one product, honoring the ablation flags.
/// A disabled modality contributes a zero tensor of the right shape.
pub fn conditioning_embedding<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    prefix: &str,
    config: &ConditioningConfig,
    image: &ProductImage<F>,
    release: &ReleaseDate,
    year_range: (i32, i32),
) -> Result<NodeId> {
    config.validate()?;
    let image_tokens = if config.use_image {
        encode_image(g, store, prefix, config, image)?
    } else {
        g.leaf(Array2::zeros((config.channels, config.horizon)))
    };
    let temporal = if config.use_temporal {
        encode_release_date(g, store, prefix, config, release, year_range)?
    } else {
        g.leaf(Array2::zeros((config.channels, 1)))
    };
    Ok(fuse(g, store, prefix, config, image_tokens, temporal)?.embedding)
}
