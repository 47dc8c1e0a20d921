//! Conditional graph-convolutional VAE-GAN over mesh displacement fields.
//!
//! The generator is a mesh autoencoder: Chebyshev spectral convolutions at
//! each resolution of a [`SamplingHierarchy`], pooling through the
//! hierarchy's one-hot down-matrices and barycentric up-matrices. Pose and
//! clothing type are embedded by small fully-connected nets and injected
//! twice ("combined" conditioning): concatenated with the latent code at
//! the decoder input, and tiled onto every vertex at the entrance of each
//! conditional residual block. The discriminator is patchwise — a stack of
//! conv + downsample stages ending in one sigmoid score per coarsest-level
//! vertex, so each score judges a local patch of the input graph. Its conv
//! blocks carry no normalization: per-sample statistics would couple every
//! vertex and destroy patch locality.
//!
//! All builders assemble onto a caller-supplied [`Tape`], with batches
//! stored as vertically stacked sample blocks (`(B·V) × F`). Parameters
//! live outside the tape as plain tensors in a [`NetParams`] registry with
//! a stable order; [`ClothingNet::bind`] copies them onto a tape as
//! trainable or frozen leaves per phase, which is how the alternating
//! D-step / G-step freezes one side of the adversarial pair.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::body::{pose_conditioning, BodyModelSpec, ClothingType, PoseParams};
use crate::io::{bad_data, read_container_header, read_f64_vec, write_container_header, write_f64_slice};
use crate::sampling::{HierarchyLevel, SamplingHierarchy};
use crate::tensor::tape::SparsePair;
use crate::tensor::{Tape, Tensor, Var};

/// Errors from network construction and evaluation.
#[derive(Debug, Error)]
pub enum NetError {
    #[error("bad network config: {0}")]
    BadConfig(String),
    #[error("hierarchy unsuitable: {0}")]
    BadHierarchy(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Where the condition embeddings enter the generator.
///
/// The default feeds them both at the latent bottleneck and tiled into
/// every decoder residual block; the single-injection modes exist as
/// ablation switches and are otherwise untested.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    Combined,
    LatentOnly,
    TileOnly,
}

/// Architecture hyperparameters. [`Default`] gives the reference
/// configuration; tests shrink the widths but keep the wiring.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Latent code dimension.
    pub latent_dim: usize,
    /// Hidden width of the pose embedding net.
    pub pose_hidden: usize,
    /// Pose embedding output dimension.
    pub pose_embed: usize,
    /// Clothing-type embedding output dimension.
    pub cloth_embed: usize,
    /// Generator conv widths per resolution stage, finest → coarsest.
    pub stage_widths: [usize; 4],
    /// Discriminator conv widths, finest stage first.
    pub disc_widths: [usize; 4],
    /// Channels of the 1×1 conv between the conv stacks and the latent
    /// heads (and its mirror at the decoder entrance).
    pub bottleneck: usize,
    /// Chebyshev order of generator convolutions.
    pub k_generator: usize,
    /// Chebyshev order of discriminator convolutions.
    pub k_discriminator: usize,
    /// Group-norm group count is `min(this, channels)`.
    pub groupnorm_max_groups: usize,
    pub groupnorm_eps: f64,
    /// Negative slope of every leaky ReLU.
    pub lrelu_slope: f64,
    /// Log-variance head outputs are clamped into `±this`.
    pub logvar_clamp: f64,
    pub conditioning: ConditioningMode,
    /// Build the decoder from conditional residual blocks (default); the
    /// ablation swaps in plain conv blocks of the same widths.
    pub use_residual_blocks: bool,
    /// Build the discriminator tower at all; without it the model is a
    /// pure conditional VAE (the discriminator ablation).
    pub with_discriminator: bool,
    /// Zero-initialize the final decoder conv so an untrained model emits
    /// exactly zero displacement.
    pub zero_init_final: bool,
    /// Placeholder for a latent-space sampling variant reported elsewhere
    /// but not specified; sampling is plain standard-normal regardless and
    /// this flag only records the request.
    pub spherical_sampling_stub: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            latent_dim: 18,
            pose_hidden: 63,
            pose_embed: 24,
            cloth_embed: 8,
            stage_widths: [64, 128, 256, 512],
            disc_widths: [64, 64, 128, 128],
            bottleneck: 64,
            k_generator: 2,
            k_discriminator: 3,
            groupnorm_max_groups: 32,
            groupnorm_eps: 1e-5,
            lrelu_slope: 0.1,
            logvar_clamp: 20.0,
            conditioning: ConditioningMode::Combined,
            use_residual_blocks: true,
            with_discriminator: true,
            zero_init_final: true,
            spherical_sampling_stub: false,
        }
    }
}

impl NetConfig {
    /// Width of the concatenated condition embedding `(z_θ, z_c)`.
    pub fn cond_width(&self) -> usize {
        self.pose_embed + self.cloth_embed
    }

    /// Whether embeddings are concatenated with the latent code.
    pub fn conditions_in_latent(&self) -> bool {
        matches!(self.conditioning, ConditioningMode::Combined | ConditioningMode::LatentOnly)
    }

    /// Whether embeddings are tiled into the decoder residual blocks.
    pub fn conditions_tiled(&self) -> bool {
        matches!(self.conditioning, ConditioningMode::Combined | ConditioningMode::TileOnly)
    }

    /// Decoder input width: latent code plus (mode-dependent) embeddings.
    pub fn decoder_input(&self) -> usize {
        self.latent_dim + if self.conditions_in_latent() { self.cond_width() } else { 0 }
    }

    fn gn_groups(&self, channels: usize) -> usize {
        self.groupnorm_max_groups.min(channels)
    }

    /// Check internal consistency (positive dims, group-norm divisibility,
    /// even residual widths).
    pub fn validate(&self) -> Result<(), NetError> {
        let pos = [
            self.latent_dim,
            self.pose_hidden,
            self.pose_embed,
            self.cloth_embed,
            self.bottleneck,
        ];
        if pos.iter().any(|&d| d == 0) || self.stage_widths.contains(&0) || self.disc_widths.contains(&0) {
            return Err(NetError::BadConfig("all layer widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.lrelu_slope) {
            return Err(NetError::BadConfig(format!("leaky-relu slope {} outside (0, 1)", self.lrelu_slope)));
        }
        if self.logvar_clamp <= 0.0 || self.groupnorm_eps <= 0.0 || self.groupnorm_max_groups == 0 {
            return Err(NetError::BadConfig("clamp, eps and group count must be positive".into()));
        }
        let mut gn_channels: Vec<usize> = self.stage_widths.to_vec();
        for (cin, cout) in decoder_block_io(&self.stage_widths) {
            if self.use_residual_blocks {
                if cout % 2 != 0 {
                    return Err(NetError::BadConfig(format!("residual width {cout} must be even")));
                }
                let cat = cin + if self.conditions_tiled() { self.cond_width() } else { 0 };
                gn_channels.extend([cat, cout / 2]);
            }
        }
        for c in gn_channels {
            let g = self.gn_groups(c);
            if c % g != 0 {
                return Err(NetError::BadConfig(format!(
                    "group norm with {g} groups does not divide {c} channels"
                )));
            }
        }
        Ok(())
    }
}

/// Encoder conv blocks as `(level, in, out)`, finest stage first.
fn encoder_block_io(w: &[usize; 4]) -> [(usize, usize, usize); 8] {
    [
        (0, 3, w[0]),
        (1, w[0], w[0]),
        (1, w[0], w[1]),
        (2, w[1], w[1]),
        (2, w[1], w[2]),
        (3, w[2], w[2]),
        (3, w[2], w[3]),
        (3, w[3], w[3]),
    ]
}

/// Decoder residual blocks as `(level, in, out)`, coarsest stage first.
fn decoder_block_levels(w: &[usize; 4]) -> [(usize, usize, usize); 8] {
    [
        (3, w[3], w[3]),
        (3, w[3], w[3]),
        (2, w[3], w[2]),
        (2, w[2], w[2]),
        (1, w[2], w[1]),
        (1, w[1], w[1]),
        (0, w[1], w[0]),
        (0, w[0], w[0]),
    ]
}

fn decoder_block_io(w: &[usize; 4]) -> impl Iterator<Item = (usize, usize)> {
    decoder_block_levels(w).into_iter().map(|(_, cin, cout)| (cin, cout))
}

/// Ordered name → tensor registry for every trainable parameter.
#[derive(Clone, Debug)]
pub struct NetParams {
    entries: Vec<(String, Tensor)>,
    index: BTreeMap<String, usize>,
}

impl NetParams {
    fn new() -> Self {
        NetParams { entries: Vec::new(), index: BTreeMap::new() }
    }

    fn push(&mut self, name: String, t: Tensor) {
        let prev = self.index.insert(name.clone(), self.entries.len());
        assert!(prev.is_none(), "duplicate parameter name {name}");
        self.entries.push((name, t));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Mutable view of the parameters in registration order, for optimizer
    /// updates applied in place.
    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.entries[i].1
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

/// Optimizer grouping: the generator side (embeddings, encoder, decoder)
/// and the discriminator train on alternating steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Generator,
    Discriminator,
}

/// Which optimizer group a parameter name belongs to. The condition
/// embeddings sit in the generator group: they feed the discriminator only
/// as detached inputs and are updated by generator losses alone.
pub fn param_group(name: &str) -> ParamGroup {
    if name.starts_with("disc.") {
        ParamGroup::Discriminator
    } else {
        ParamGroup::Generator
    }
}

/// Tape handles for one bound copy of the parameter set, parallel to the
/// registry order.
pub struct BoundNet {
    vars: Vec<Var>,
}

/// The full model: generator (condition embeddings, encoder, decoder) and
/// patchwise discriminator over one mesh hierarchy.
#[derive(Clone, Debug)]
pub struct ClothingNet {
    pub config: NetConfig,
    /// Number of skeleton joints whose rotations condition the net.
    pub retained_joints: usize,
    pub hierarchy: Arc<SamplingHierarchy>,
    pub params: NetParams,
}

fn expected_entries(cfg: &NetConfig, retained: usize, counts: &[usize]) -> Vec<(String, usize, usize)> {
    let mut v: Vec<(String, usize, usize)> = Vec::new();
    let mut p = |name: String, r: usize, c: usize| v.push((name, r, c));
    let w = &cfg.stage_widths;
    let (kg, kd) = (cfg.k_generator, cfg.k_discriminator);

    p("embed.pose.fc1.w".into(), 9 * retained, cfg.pose_hidden);
    p("embed.pose.fc1.b".into(), 1, cfg.pose_hidden);
    p("embed.pose.fc2.w".into(), cfg.pose_hidden, cfg.pose_embed);
    p("embed.pose.fc2.b".into(), 1, cfg.pose_embed);
    p("embed.cloth.fc.w".into(), 4, cfg.cloth_embed);
    p("embed.cloth.fc.b".into(), 1, cfg.cloth_embed);

    for (i, (_, cin, cout)) in encoder_block_io(w).into_iter().enumerate() {
        p(format!("enc.cb{i}.conv.w"), (kg + 1) * cin, cout);
        p(format!("enc.cb{i}.conv.b"), 1, cout);
        p(format!("enc.cb{i}.gn.gamma"), 1, cout);
        p(format!("enc.cb{i}.gn.beta"), 1, cout);
    }
    p("enc.neck.w".into(), w[3], cfg.bottleneck);
    p("enc.neck.b".into(), 1, cfg.bottleneck);
    let n3 = counts[3];
    p("enc.mu.w".into(), n3 * cfg.bottleneck, cfg.latent_dim);
    p("enc.mu.b".into(), 1, cfg.latent_dim);
    p("enc.logvar.w".into(), n3 * cfg.bottleneck, cfg.latent_dim);
    p("enc.logvar.b".into(), 1, cfg.latent_dim);

    p("dec.fc.w".into(), cfg.decoder_input(), cfg.bottleneck * n3);
    p("dec.fc.b".into(), 1, cfg.bottleneck * n3);
    p("dec.neck.w".into(), cfg.bottleneck, w[3]);
    p("dec.neck.b".into(), 1, w[3]);
    let condw = if cfg.conditions_tiled() { cfg.cond_width() } else { 0 };
    for (i, (_, cin, cout)) in decoder_block_levels(w).into_iter().enumerate() {
        let cat = cin + condw;
        if cfg.use_residual_blocks {
            p(format!("dec.cres{i}.gn0.gamma"), 1, cat);
            p(format!("dec.cres{i}.gn0.beta"), 1, cat);
            p(format!("dec.cres{i}.lin1.w"), cat, cout / 2);
            p(format!("dec.cres{i}.lin1.b"), 1, cout / 2);
            p(format!("dec.cres{i}.gn1.gamma"), 1, cout / 2);
            p(format!("dec.cres{i}.gn1.beta"), 1, cout / 2);
            p(format!("dec.cres{i}.conv.w"), (kg + 1) * (cout / 2), cout / 2);
            p(format!("dec.cres{i}.conv.b"), 1, cout / 2);
            p(format!("dec.cres{i}.gn2.gamma"), 1, cout / 2);
            p(format!("dec.cres{i}.gn2.beta"), 1, cout / 2);
            p(format!("dec.cres{i}.lin2.w"), cout / 2, cout);
            p(format!("dec.cres{i}.lin2.b"), 1, cout);
            if cin != cout {
                p(format!("dec.cres{i}.skip.w"), cin, cout);
                p(format!("dec.cres{i}.skip.b"), 1, cout);
            }
        } else {
            p(format!("dec.cb{i}.conv.w"), (kg + 1) * cat, cout);
            p(format!("dec.cb{i}.conv.b"), 1, cout);
            p(format!("dec.cb{i}.gn.gamma"), 1, cout);
            p(format!("dec.cb{i}.gn.beta"), 1, cout);
        }
    }
    p("dec.out.w".into(), (kg + 1) * w[0], 3);
    p("dec.out.b".into(), 1, 3);

    if cfg.with_discriminator {
        let dw = &cfg.disc_widths;
        let mut cin = 3 + cfg.cond_width();
        for (i, &cout) in dw.iter().enumerate() {
            p(format!("disc.cb{i}.conv.w"), (kd + 1) * cin, cout);
            p(format!("disc.cb{i}.conv.b"), 1, cout);
            cin = cout;
        }
        p("disc.out.w".into(), dw[3], 1);
        p("disc.out.b".into(), 1, 1);
    }
    v
}

fn check_hierarchy(h: &SamplingHierarchy) -> Result<(), NetError> {
    if h.levels.len() != 5 {
        return Err(NetError::BadHierarchy(format!(
            "network needs 5 resolution levels (4 coarsenings), hierarchy has {}",
            h.levels.len()
        )));
    }
    Ok(())
}

impl ClothingNet {
    /// Initialize all parameters from a seeded rng.
    ///
    /// Conv and FC weights are fan-in-scaled uniform (`±sqrt(6/fan_in)`,
    /// standard deviation `sqrt(2/fan_in)`); biases and group-norm shifts
    /// start at zero, group-norm scales at one. With `zero_init_final` the
    /// last decoder conv starts at zero so the first forward pass emits
    /// zero displacement. Draws happen in registry order, so a fixed seed
    /// gives identical parameters.
    pub fn init(
        config: NetConfig,
        retained_joints: usize,
        hierarchy: Arc<SamplingHierarchy>,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self, NetError> {
        config.validate()?;
        check_hierarchy(&hierarchy)?;
        if retained_joints == 0 {
            return Err(NetError::BadConfig("need at least one retained joint".into()));
        }
        let mut params = NetParams::new();
        for (name, rows, cols) in expected_entries(&config, retained_joints, &hierarchy.counts()) {
            let mut t = Tensor::zeros(rows, cols);
            if name.ends_with(".gamma") {
                t.data.fill(1.0);
            } else if name.ends_with(".w") && !(config.zero_init_final && name == "dec.out.w") {
                let limit = (6.0 / rows as f64).sqrt();
                for x in t.data.iter_mut() {
                    *x = rng.random_range(-limit..limit);
                }
            }
            params.push(name, t);
        }
        Ok(ClothingNet { config, retained_joints, hierarchy, params })
    }

    /// Rebuild a net from stored parameters (checkpoint loading), checking
    /// the entry names and shapes against what the architecture implies.
    pub fn from_params(
        config: NetConfig,
        retained_joints: usize,
        hierarchy: Arc<SamplingHierarchy>,
        entries: Vec<(String, Tensor)>,
    ) -> Result<Self, NetError> {
        config.validate()?;
        check_hierarchy(&hierarchy)?;
        if retained_joints == 0 {
            return Err(NetError::BadConfig("need at least one retained joint".into()));
        }
        let expected = expected_entries(&config, retained_joints, &hierarchy.counts());
        if entries.len() != expected.len() {
            return Err(NetError::ShapeMismatch(format!(
                "{} stored parameters, architecture expects {}",
                entries.len(),
                expected.len()
            )));
        }
        let mut params = NetParams::new();
        for ((name, t), (want, rows, cols)) in entries.into_iter().zip(expected) {
            if name != want {
                return Err(NetError::ShapeMismatch(format!(
                    "stored parameter {name} where {want} was expected"
                )));
            }
            if t.rows != rows || t.cols != cols {
                return Err(NetError::ShapeMismatch(format!(
                    "{name} is {}×{}, want {rows}×{cols}",
                    t.rows, t.cols
                )));
            }
            if !t.all_finite() {
                return Err(NetError::ShapeMismatch(format!("{name} has non-finite values")));
            }
            params.push(name, t);
        }
        Ok(ClothingNet { config, retained_joints, hierarchy, params })
    }

    /// Finest-level vertex count (the mesh the model runs on).
    pub fn vertex_count(&self) -> usize {
        self.hierarchy.levels[0].vertex_count
    }

    /// Copy every parameter onto the tape; `trainable` decides per name
    /// whether the leaf accumulates gradient or is frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> BoundNet {
        let vars = self
            .params
            .entries
            .iter()
            .map(|(n, t)| if trainable(n) { tape.param(t.clone()) } else { tape.input(t.clone()) })
            .collect();
        BoundNet { vars }
    }

    /// Tape leaf of a parameter in a bound set.
    pub fn var(&self, bound: &BoundNet, name: &str) -> Var {
        let i = *self.params.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        bound.vars[i]
    }

    /// Gradient harvested after a backward pass, in registry order, `None`
    /// for parameters that received none.
    pub fn gradients<'t>(&self, tape: &'t Tape, bound: &BoundNet) -> Vec<Option<&'t Tensor>> {
        bound.vars.iter().map(|&v| tape.grad(v)).collect()
    }

    fn linear(&self, t: &mut Tape, b: &BoundNet, prefix: &str, x: Var) -> Var {
        let w = self.var(b, &format!("{prefix}.w"));
        let bias = self.var(b, &format!("{prefix}.b"));
        let h = t.matmul(x, w);
        t.add_row(h, bias)
    }

    fn conv(&self, t: &mut Tape, b: &BoundNet, prefix: &str, lap: &Arc<SparsePair>, k: usize, blocks: usize, x: Var) -> Var {
        let w = self.var(b, &format!("{prefix}.w"));
        let bias = self.var(b, &format!("{prefix}.b"));
        let h = t.cheb_conv(lap, x, w, k, blocks);
        t.add_row(h, bias)
    }

    fn gn(&self, t: &mut Tape, b: &BoundNet, prefix: &str, x: Var, channels: usize, blocks: usize) -> Var {
        let gamma = self.var(b, &format!("{prefix}.gamma"));
        let beta = self.var(b, &format!("{prefix}.beta"));
        let groups = self.config.gn_groups(channels);
        t.group_norm(x, gamma, beta, groups, blocks, self.config.groupnorm_eps)
    }

    /// Encoder conv block: Chebyshev conv → group norm → leaky ReLU.
    fn enc_block(&self, t: &mut Tape, b: &BoundNet, i: usize, level: &HierarchyLevel, cout: usize, blocks: usize, x: Var) -> Var {
        let h = self.conv(t, b, &format!("enc.cb{i}.conv"), &level.laplacian.matrix, self.config.k_generator, blocks, x);
        let h = self.gn(t, b, &format!("enc.cb{i}.gn"), h, cout, blocks);
        t.leaky_relu(h, self.config.lrelu_slope)
    }

    /// Discriminator conv block: conv → leaky ReLU, no normalization (see
    /// module docs on patch locality).
    fn disc_block(&self, t: &mut Tape, b: &BoundNet, i: usize, level: &HierarchyLevel, blocks: usize, x: Var) -> Var {
        let h = self.conv(t, b, &format!("disc.cb{i}.conv"), &level.laplacian.matrix, self.config.k_discriminator, blocks, x);
        t.leaky_relu(h, self.config.lrelu_slope)
    }

    /// Conditional residual block. The condition embedding (already tiled
    /// to this level) is concatenated to the features; the body is
    /// norm → act → linear (to half width) → norm → act → conv → norm →
    /// act → linear (to full width); the skip path runs from the
    /// *pre-concat* input, projected by a per-vertex linear map when the
    /// widths differ.
    #[allow(clippy::too_many_arguments)]
    fn cres_block(
        &self,
        t: &mut Tape,
        b: &BoundNet,
        prefix: &str,
        level: &HierarchyLevel,
        blocks: usize,
        x: Var,
        cin: usize,
        cout: usize,
        cond_tiled: Option<Var>,
    ) -> Var {
        let cfg = &self.config;
        let (cat, catw) = match cond_tiled {
            Some(c) => (t.concat_cols(x, c), cin + cfg.cond_width()),
            None => (x, cin),
        };
        let h = self.gn(t, b, &format!("{prefix}.gn0"), cat, catw, blocks);
        let h = t.leaky_relu(h, cfg.lrelu_slope);
        let h = self.linear(t, b, &format!("{prefix}.lin1"), h);
        let h = self.gn(t, b, &format!("{prefix}.gn1"), h, cout / 2, blocks);
        let h = t.leaky_relu(h, cfg.lrelu_slope);
        let h = self.conv(t, b, &format!("{prefix}.conv"), &level.laplacian.matrix, cfg.k_generator, blocks, h);
        let h = self.gn(t, b, &format!("{prefix}.gn2"), h, cout / 2, blocks);
        let h = t.leaky_relu(h, cfg.lrelu_slope);
        let h = self.linear(t, b, &format!("{prefix}.lin2"), h);
        let skip = if cin == cout { x } else { self.linear(t, b, &format!("{prefix}.skip"), x) };
        t.add(skip, h)
    }

    /// Plain decoder conv block for the no-residual ablation: concat the
    /// tiled condition, then conv → group norm → leaky ReLU.
    fn dec_plain_block(
        &self,
        t: &mut Tape,
        b: &BoundNet,
        i: usize,
        level: &HierarchyLevel,
        blocks: usize,
        x: Var,
        cout: usize,
        cond_tiled: Option<Var>,
    ) -> Var {
        let cat = match cond_tiled {
            Some(c) => t.concat_cols(x, c),
            None => x,
        };
        let h = self.conv(t, b, &format!("dec.cb{i}.conv"), &level.laplacian.matrix, self.config.k_generator, blocks, cat);
        let h = self.gn(t, b, &format!("dec.cb{i}.gn"), h, cout, blocks);
        t.leaky_relu(h, self.config.lrelu_slope)
    }

    /// Embed per-sample conditions: pose rows are the flattened rotation
    /// matrices of the retained joints (`B × 9·R`), clothing rows the
    /// one-hot type (`B × 4`). Returns `(z_θ, z_c)` as `B × pose_embed`
    /// and `B × cloth_embed`.
    pub fn build_embeddings(&self, t: &mut Tape, b: &BoundNet, pose_rows: Var, cloth_rows: Var) -> (Var, Var) {
        let h = self.linear(t, b, "embed.pose.fc1", pose_rows);
        let h = t.leaky_relu(h, self.config.lrelu_slope);
        let z_theta = self.linear(t, b, "embed.pose.fc2", h);
        let z_c = self.linear(t, b, "embed.cloth.fc", cloth_rows);
        (z_theta, z_c)
    }

    /// Encoder: displacement stack `(B·V) × 3` → latent heads `(μ, logσ²)`,
    /// each `B × latent`. The log-variance is clamped here so every
    /// downstream consumer sees bounded values.
    pub fn build_encoder(&self, t: &mut Tape, b: &BoundNet, x: Var, batch: usize) -> (Var, Var) {
        let lv = &self.hierarchy.levels;
        let cfg = &self.config;
        let mut h = x;
        let mut at = 0usize;
        for (i, (level, _, cout)) in encoder_block_io(&cfg.stage_widths).into_iter().enumerate() {
            while at < level {
                at += 1;
                h = t.spmm(lv[at].down.as_ref().expect("hierarchy level without down-matrix"), h, batch);
            }
            h = self.enc_block(t, b, i, &lv[level], cout, batch, h);
        }
        let h = self.linear(t, b, "enc.neck", h);
        let n3 = lv[3].vertex_count;
        let flat = t.reshape(h, batch, n3 * cfg.bottleneck);
        let mu = self.linear(t, b, "enc.mu", flat);
        let logvar = self.linear(t, b, "enc.logvar", flat);
        let logvar = t.clamp(logvar, -cfg.logvar_clamp, cfg.logvar_clamp);
        (mu, logvar)
    }

    /// Decoder: latent code plus embeddings → displacement stack
    /// `(B·V) × 3`. A pure function of its inputs — the generative map.
    pub fn build_decoder(&self, t: &mut Tape, b: &BoundNet, z: Var, z_theta: Var, z_c: Var, batch: usize) -> Var {
        let lv = &self.hierarchy.levels;
        let cfg = &self.config;
        let z_full = if cfg.conditions_in_latent() {
            let zc2 = t.concat_cols(z, z_theta);
            t.concat_cols(zc2, z_c)
        } else {
            z
        };
        let h = self.linear(t, b, "dec.fc", z_full);
        let n3 = lv[3].vertex_count;
        let h = t.reshape(h, batch * n3, cfg.bottleneck);
        let mut h = self.linear(t, b, "dec.neck", h);

        let cond = if cfg.conditions_tiled() { Some(t.concat_cols(z_theta, z_c)) } else { None };
        let mut tiled_at: Option<(usize, Var)> = None;
        let mut at = 3usize;
        for (i, (level, cin, cout)) in decoder_block_levels(&cfg.stage_widths).into_iter().enumerate() {
            while at > level {
                h = t.spmm(lv[at].up.as_ref().expect("hierarchy level without up-matrix"), h, batch);
                at -= 1;
            }
            let cond_tiled = cond.map(|c| {
                let count = lv[level].vertex_count;
                match tiled_at {
                    Some((l, v)) if l == level => v,
                    _ => {
                        let v = t.tile_rows(c, count);
                        tiled_at = Some((level, v));
                        v
                    }
                }
            });
            h = if cfg.use_residual_blocks {
                self.cres_block(t, b, &format!("dec.cres{i}"), &lv[level], batch, h, cin, cout, cond_tiled)
            } else {
                self.dec_plain_block(t, b, i, &lv[level], batch, h, cout, cond_tiled)
            };
        }
        self.conv(t, b, "dec.out", &lv[0].laplacian.matrix, cfg.k_generator, batch, h)
    }

    /// Discriminator: displacement stack plus embeddings → one sigmoid
    /// score per coarsest-level vertex, `(B·n_coarsest) × 1`. The
    /// embeddings are tiled onto every finest-level vertex and concatenated
    /// with the input channels.
    pub fn build_discriminator(&self, t: &mut Tape, b: &BoundNet, x: Var, z_theta: Var, z_c: Var, batch: usize) -> Var {
        assert!(self.config.with_discriminator, "model was built without a discriminator");
        let lv = &self.hierarchy.levels;
        let cond = t.concat_cols(z_theta, z_c);
        let tiled = t.tile_rows(cond, lv[0].vertex_count);
        let mut h = t.concat_cols(x, tiled);
        for i in 0..4 {
            h = self.disc_block(t, b, i, &lv[i], batch, h);
            h = t.spmm(lv[i + 1].down.as_ref().expect("hierarchy level without down-matrix"), h, batch);
        }
        let s = self.linear(t, b, "disc.out", h);
        t.sigmoid(s)
    }

    // ---- value-level conveniences (fresh tape, frozen parameters) --------

    fn frozen(&self, tape: &mut Tape) -> BoundNet {
        self.bind(tape, |_| false)
    }

    /// Embed conditions for a batch of (pose, clothing type) pairs drawn
    /// against a body spec.
    pub fn embed_conditions(
        &self,
        spec: &BodyModelSpec,
        poses: &[PoseParams],
        clothing: &[ClothingType],
    ) -> Result<(Tensor, Tensor), NetError> {
        let (pose_rows, cloth_rows) = condition_rows(spec, poses, clothing)?;
        if pose_rows.cols != 9 * self.retained_joints {
            return Err(NetError::ShapeMismatch(format!(
                "spec retains {} joints, network expects {}",
                pose_rows.cols / 9,
                self.retained_joints
            )));
        }
        let mut tape = Tape::new();
        let b = self.frozen(&mut tape);
        let pr = tape.input(pose_rows);
        let cr = tape.input(cloth_rows);
        let (zt, zc) = self.build_embeddings(&mut tape, &b, pr, cr);
        Ok((tape.value(zt).clone(), tape.value(zc).clone()))
    }

    /// Encode a stacked batch of displacement fields to latent heads.
    pub fn encode(&self, offsets: &Tensor, batch: usize) -> Result<(Tensor, Tensor), NetError> {
        let v = self.vertex_count();
        if offsets.rows != batch * v || offsets.cols != 3 {
            return Err(NetError::ShapeMismatch(format!(
                "offsets are {}×{}, want {}×3 for batch {batch} on {v} vertices",
                offsets.rows, offsets.cols, batch * v
            )));
        }
        let mut tape = Tape::new();
        let b = self.frozen(&mut tape);
        let x = tape.input(offsets.clone());
        let (mu, logvar) = self.build_encoder(&mut tape, &b, x, batch);
        Ok((tape.value(mu).clone(), tape.value(logvar).clone()))
    }

    /// Decode latent codes with precomputed embeddings.
    pub fn decode(&self, z: &Tensor, z_theta: &Tensor, z_c: &Tensor) -> Result<Tensor, NetError> {
        let cfg = &self.config;
        if z.cols != cfg.latent_dim || z_theta.cols != cfg.pose_embed || z_c.cols != cfg.cloth_embed {
            return Err(NetError::ShapeMismatch(format!(
                "latent/embedding widths ({}, {}, {}) want ({}, {}, {})",
                z.cols, z_theta.cols, z_c.cols, cfg.latent_dim, cfg.pose_embed, cfg.cloth_embed
            )));
        }
        if z.rows != z_theta.rows || z.rows != z_c.rows {
            return Err(NetError::ShapeMismatch("latent/embedding batch sizes differ".into()));
        }
        let mut tape = Tape::new();
        let b = self.frozen(&mut tape);
        let zv = tape.input(z.clone());
        let zt = tape.input(z_theta.clone());
        let zc = tape.input(z_c.clone());
        let out = self.build_decoder(&mut tape, &b, zv, zt, zc, z.rows);
        Ok(tape.value(out).clone())
    }

    /// The generative map: sample-or-given latent code, pose, clothing
    /// type → displacement field offsets for one mesh. Deterministic in its
    /// inputs.
    pub fn generate(
        &self,
        spec: &BodyModelSpec,
        z: &Tensor,
        pose: &PoseParams,
        clothing: ClothingType,
    ) -> Result<Tensor, NetError> {
        let (zt, zc) = self.embed_conditions(spec, std::slice::from_ref(pose), &[clothing])?;
        self.decode(z, &zt, &zc)
    }

    /// Score a stacked batch of displacement fields under given conditions.
    pub fn discriminate(&self, offsets: &Tensor, z_theta: &Tensor, z_c: &Tensor) -> Result<Tensor, NetError> {
        if !self.config.with_discriminator {
            return Err(NetError::BadConfig("model was built without a discriminator".into()));
        }
        let v = self.vertex_count();
        let batch = z_theta.rows;
        if offsets.rows != batch * v || offsets.cols != 3 || z_c.rows != batch {
            return Err(NetError::ShapeMismatch(format!(
                "offsets are {}×{}, want {}×3 for batch {batch}",
                offsets.rows,
                offsets.cols,
                batch * v
            )));
        }
        let mut tape = Tape::new();
        let b = self.frozen(&mut tape);
        let x = tape.input(offsets.clone());
        let zt = tape.input(z_theta.clone());
        let zc = tape.input(z_c.clone());
        let s = self.build_discriminator(&mut tape, &b, x, zt, zc, batch);
        Ok(tape.value(s).clone())
    }

    /// JSON description of the built architecture: hierarchy, widths,
    /// orders, dimensions, parameter count.
    pub fn architecture_manifest(&self) -> serde_json::Value {
        serde_json::json!({
            "level_counts": self.hierarchy.counts(),
            "stage_widths": self.config.stage_widths,
            "disc_widths": self.config.disc_widths,
            "k_generator": self.config.k_generator,
            "k_discriminator": self.config.k_discriminator,
            "latent_dim": self.config.latent_dim,
            "pose_embed": self.config.pose_embed,
            "cloth_embed": self.config.cloth_embed,
            "bottleneck": self.config.bottleneck,
            "decoder_input": self.config.decoder_input(),
            "conditioning": self.config.conditioning,
            "use_residual_blocks": self.config.use_residual_blocks,
            "with_discriminator": self.config.with_discriminator,
            "retained_joints": self.retained_joints,
            "parameter_scalars": self.params.scalar_count(),
        })
    }
}

/// Reparameterized latent sample on the tape: `z = μ + exp(½·logσ²) ⊙ ε`.
/// The noise is a leaf the caller provides, so gradient checks can hold it
/// fixed and training draws it from the seeded stream.
pub fn build_reparameterize(t: &mut Tape, mu: Var, logvar: Var, eps: Var) -> Var {
    let half = t.affine(logvar, 0.5, 0.0);
    let std = t.exp(half);
    let noise = t.mul(std, eps);
    t.add(mu, noise)
}

/// Standard-normal tensor from a seeded stream (latent priors,
/// reparameterization noise).
pub fn sample_standard_normal(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for x in t.data.iter_mut() {
        *x = rng.sample(rand_distr::StandardNormal);
    }
    t
}

/// Per-sample condition inputs for a batch: flattened retained-joint
/// rotations (`B × 9·R`) and one-hot clothing types (`B × 4`).
pub fn condition_rows(
    spec: &BodyModelSpec,
    poses: &[PoseParams],
    clothing: &[ClothingType],
) -> Result<(Tensor, Tensor), NetError> {
    if poses.len() != clothing.len() || poses.is_empty() {
        return Err(NetError::ShapeMismatch(format!(
            "{} poses vs {} clothing labels",
            poses.len(),
            clothing.len()
        )));
    }
    let width = 9 * spec.retained_joints.len();
    let mut pose_rows = Tensor::zeros(poses.len(), width);
    for (i, pose) in poses.iter().enumerate() {
        if pose.joint_count() != spec.joint_count() {
            return Err(NetError::ShapeMismatch(format!(
                "pose {i} has {} joints, spec has {}",
                pose.joint_count(),
                spec.joint_count()
            )));
        }
        pose_rows.row_mut(i).copy_from_slice(&pose_conditioning(spec, pose));
    }
    let mut cloth_rows = Tensor::zeros(clothing.len(), 4);
    for (i, c) in clothing.iter().enumerate() {
        cloth_rows.row_mut(i).copy_from_slice(&c.one_hot());
    }
    Ok((pose_rows, cloth_rows))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MNTLCKPT";

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointHeader {
    config: NetConfig,
    retained_joints: usize,
    level_counts: Vec<usize>,
    tensors: Vec<TensorMeta>,
}

impl ClothingNet {
    /// Write parameters and config as a container: JSON header, then each
    /// tensor as little-endian `f64` in registry order.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            retained_joints: self.retained_joints,
            level_counts: self.hierarchy.counts(),
            tensors: self
                .params
                .iter()
                .map(|(n, t)| TensorMeta { name: n.to_string(), rows: t.rows, cols: t.cols })
                .collect(),
        };
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        write_container_header(&mut w, CHECKPOINT_MAGIC, &header)?;
        for (_, t) in self.params.iter() {
            write_f64_slice(&mut w, &t.data)?;
        }
        use std::io::Write as _;
        w.flush()
    }

    /// Read a checkpoint back over a hierarchy. The stored layer table must
    /// match what the stored config demands on this hierarchy — a changed
    /// mesh or config is rejected rather than silently reinterpreted.
    pub fn load(path: &Path, hierarchy: Arc<SamplingHierarchy>) -> std::io::Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let h: CheckpointHeader = read_container_header(&mut r, CHECKPOINT_MAGIC)?;
        h.config.validate().map_err(|e| bad_data(e.to_string()))?;
        check_hierarchy(&hierarchy).map_err(|e| bad_data(e.to_string()))?;
        if h.level_counts != hierarchy.counts() {
            return Err(bad_data(format!(
                "checkpoint was trained on level counts {:?}, hierarchy has {:?}",
                h.level_counts,
                hierarchy.counts()
            )));
        }
        let expect = expected_entries(&h.config, h.retained_joints, &hierarchy.counts());
        if expect.len() != h.tensors.len() {
            return Err(bad_data(format!(
                "checkpoint lists {} tensors, architecture needs {}",
                h.tensors.len(),
                expect.len()
            )));
        }
        let mut params = NetParams::new();
        for (meta, (name, rows, cols)) in h.tensors.iter().zip(expect) {
            if meta.name != name || meta.rows != rows || meta.cols != cols {
                return Err(bad_data(format!(
                    "checkpoint tensor {} ({}×{}) does not match expected {} ({rows}×{cols})",
                    meta.name, meta.rows, meta.cols, name
                )));
            }
            let data = read_f64_vec(&mut r, rows * cols)?;
            params.push(name, Tensor::from_vec(rows, cols, data));
        }
        Ok(ClothingNet { config: h.config, retained_joints: h.retained_joints, hierarchy, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::BodyModelSpec;
    use crate::data::{cylinder_tube, torus};
    use crate::graph::{build_topology, LaplacianMode};
    use crate::rng::{stream, Stream};
    use crate::sampling::build_sampling_hierarchy;

    fn toy_config() -> NetConfig {
        NetConfig {
            latent_dim: 5,
            pose_hidden: 9,
            pose_embed: 6,
            cloth_embed: 4,
            stage_widths: [4, 6, 8, 10],
            disc_widths: [4, 4, 6, 6],
            bottleneck: 6,
            ..NetConfig::default()
        }
    }

    fn toy_hierarchy() -> Arc<SamplingHierarchy> {
        let (pos, faces) = cylinder_tube(10, 5, 0.5, 2.0);
        let g = build_topology(&faces, pos.rows).unwrap();
        Arc::new(build_sampling_hierarchy(&g, &pos, &[2, 2, 2, 2], LaplacianMode::SymmetricNormalized).unwrap())
    }

    fn toy_net(seed: u64) -> ClothingNet {
        let mut rng = stream(seed, Stream::Init);
        ClothingNet::init(toy_config(), 3, toy_hierarchy(), &mut rng).unwrap()
    }

    /// Straight-chain body with 4 joints for condition-row construction.
    fn tiny_spec() -> BodyModelSpec {
        let v = 6;
        let j = 4;
        let mut template = Tensor::zeros(v, 3);
        for i in 0..v {
            template.row_mut(i)[2] = i as f64 * 0.2;
        }
        let mut regressor = Tensor::zeros(j, v);
        for k in 0..j {
            *regressor.at_mut(k, k) = 1.0;
        }
        let mut weights = Tensor::zeros(v, j);
        for i in 0..v {
            *weights.at_mut(i, i.min(j - 1)) = 1.0;
        }
        BodyModelSpec::new(
            template,
            Tensor::zeros(3 * v, 1),
            Tensor::zeros(3 * v, 9 * (j - 1)),
            regressor,
            weights,
            vec![-1, 0, 1, 2],
            vec![1, 2, 3],
        )
        .unwrap()
    }

    #[test]
    fn init_is_seed_deterministic() {
        let (a, b, c) = (toy_net(7), toy_net(7), toy_net(8));
        for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            for (x, y) in ta.data.iter().zip(&tb.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let differs = a
            .params
            .iter()
            .zip(c.params.iter())
            .any(|((_, ta), (_, tc))| ta.data.iter().zip(&tc.data).any(|(x, y)| x != y));
        assert!(differs, "different seeds must give different parameters");
    }

    #[test]
    fn init_weight_spread_matches_fan_in() {
        // Large layer: sample standard deviation should sit near
        // sqrt(2/fan_in) — the uniform limit is sqrt(6/fan_in).
        let cfg = NetConfig::default();
        let (pos, faces) = cylinder_tube(20, 20, 0.5, 2.0);
        let g = build_topology(&faces, pos.rows).unwrap();
        let h = Arc::new(build_sampling_hierarchy(&g, &pos, &[2, 2, 2, 2], LaplacianMode::SymmetricNormalized).unwrap());
        let mut rng = stream(3, Stream::Init);
        let net = ClothingNet::init(cfg, 14, h, &mut rng).unwrap();
        for name in ["dec.cres0.lin1.w", "enc.cb7.conv.w", "dec.fc.w"] {
            let t = net.params.get(name);
            let n = t.len() as f64;
            let mean: f64 = t.data.iter().sum::<f64>() / n;
            let var: f64 = t.data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let want = (2.0 / t.rows as f64).sqrt();
            let got = var.sqrt();
            assert!((got - want).abs() / want < 0.1, "{name}: std {got} vs {want}");
        }
    }

    #[test]
    fn zero_init_final_conv_decodes_to_zero() {
        let net = toy_net(1);
        let mut rng = stream(2, Stream::Sample);
        let z = sample_standard_normal(&mut rng, 2, 5);
        let zt = sample_standard_normal(&mut rng, 2, 6);
        let zc = sample_standard_normal(&mut rng, 2, 4);
        let out = net.decode(&z, &zt, &zc).unwrap();
        assert_eq!((out.rows, out.cols), (2 * 50, 3));
        assert!(out.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn encoder_shapes_and_zero_behaviour() {
        let mut net = toy_net(4);
        let x = Tensor::zeros(3 * 50, 3);
        let (mu, logvar) = net.encode(&x, 3).unwrap();
        assert_eq!((mu.rows, mu.cols), (3, 5));
        assert_eq!((logvar.rows, logvar.cols), (3, 5));
        // Zero input through zero parameters → zero heads.
        let names: Vec<String> = net.params.iter().map(|(n, _)| n.to_string()).collect();
        for n in &names {
            net.params.get_mut(n).data.fill(0.0);
        }
        let (mu, logvar) = net.encode(&x, 3).unwrap();
        assert!(mu.data.iter().all(|&v| v == 0.0));
        assert!(logvar.data.iter().all(|&v| v == 0.0));
        // Wrong vertex count is rejected.
        assert!(net.encode(&Tensor::zeros(49, 3), 1).is_err());
    }

    #[test]
    fn encoder_levels_match_hierarchy_counts() {
        // The flatten width (and hence the μ head's row count) is pinned to
        // the 4th-level count, which pins the whole downsampling path.
        let net = toy_net(5);
        let n3 = net.hierarchy.counts()[3];
        assert_eq!(net.params.get("enc.mu.w").rows, n3 * net.config.bottleneck);
        assert_eq!(net.params.get("dec.fc.w").cols, n3 * net.config.bottleneck);
    }

    #[test]
    fn logvar_head_is_clamped() {
        let mut net = toy_net(6);
        // Blow up the log-variance bias far past the clamp.
        net.params.get_mut("enc.logvar.b").data.fill(1e6);
        let x = Tensor::zeros(50, 3);
        let (_, logvar) = net.encode(&x, 1).unwrap();
        assert!(logvar.data.iter().all(|&v| v <= net.config.logvar_clamp));
    }

    #[test]
    fn reparameterize_matches_formula_and_clamps() {
        let mut tape = Tape::new();
        let mu = tape.input(Tensor::from_vec(1, 3, vec![1.0, -2.0, 0.5]));
        let logvar = tape.input(Tensor::from_vec(1, 3, vec![0.0, -20.0, 2.0]));
        let eps = tape.input(Tensor::from_vec(1, 3, vec![1.0, 1.0, -1.0]));
        let z = build_reparameterize(&mut tape, mu, logvar, eps);
        let zv = tape.value(z);
        assert!((zv.data[0] - (1.0 + 1.0)).abs() < 1e-15);
        // At the clamp floor the noise term is e^{-10} ≈ 4.5e-5: z ≈ μ.
        assert!((zv.data[1] - -2.0).abs() < 1e-4);
        assert!((zv.data[2] - (0.5 - 1.0f64.exp())).abs() < 1e-12);
    }

    #[test]
    fn standard_normal_sampler_is_seeded_and_centered() {
        let mut a = stream(9, Stream::Sample);
        let mut b = stream(9, Stream::Sample);
        let (ta, tb) = (sample_standard_normal(&mut a, 4, 5), sample_standard_normal(&mut b, 4, 5));
        for (x, y) in ta.data.iter().zip(&tb.data) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        // Monte-Carlo: 10⁵ draws per dimension, the mean settles near 0.
        let mut rng = stream(10, Stream::Sample);
        let big = sample_standard_normal(&mut rng, 100_000, 3);
        for d in 0..3 {
            let mean: f64 = big.data.iter().skip(d).step_by(3).sum::<f64>() / 100_000.0;
            assert!(mean.abs() <= 0.02, "dim {d} mean {mean}");
        }
    }

    #[test]
    fn condition_rows_rest_pose_is_tiled_identity() {
        let spec = tiny_spec();
        let poses = vec![PoseParams::zero(4)];
        let (rows, cloth) = condition_rows(&spec, &poses, &[ClothingType::ShortLong]).unwrap();
        assert_eq!((rows.rows, rows.cols), (1, 27));
        let vec_i = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        for j in 0..3 {
            assert_eq!(&rows.row(0)[9 * j..9 * (j + 1)], &vec_i);
        }
        assert_eq!(cloth.row(0), [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn embeddings_zero_params_and_distinctness() {
        let spec = tiny_spec();
        let mut net = toy_net(12);
        // Zero clothing FC → zero clothing embedding for any one-hot input.
        net.params.get_mut("embed.cloth.fc.w").data.fill(0.0);
        let poses = vec![PoseParams::zero(4), PoseParams::new(vec![[0.0; 3], [0.9, 0.0, 0.0], [0.0; 3], [0.0, 0.4, 0.0]]).unwrap()];
        let cloth = vec![ClothingType::LongLong, ClothingType::ShortShort];
        let (zt, zc) = net.embed_conditions(&spec, &poses, &cloth).unwrap();
        assert!(zc.data.iter().all(|&x| x == 0.0));
        // Random-weight embeddings of distinct poses are distinct.
        let diff: f64 = zt.row(0).iter().zip(zt.row(1)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!(diff > 1e-8, "distinct poses must embed apart, got {diff}");
    }

    #[test]
    fn decode_is_deterministic_and_pose_sensitive() {
        let spec = tiny_spec();
        let mut net = toy_net(13);
        net.config.zero_init_final = false;
        // Re-randomize the final conv so outputs are nontrivial.
        let mut rng = stream(14, Stream::Init);
        let wt = net.params.get_mut("dec.out.w");
        let limit = (6.0 / wt.rows as f64).sqrt();
        for x in wt.data.iter_mut() {
            *x = rng.random_range(-limit..limit);
        }
        let z = sample_standard_normal(&mut rng, 1, 5);
        let p1 = PoseParams::zero(4);
        let p2 = PoseParams::new(vec![[0.0; 3], [1.0, 0.2, 0.0], [0.0; 3], [0.0; 3]]).unwrap();
        let a1 = net.generate(&spec, &z, &p1, ClothingType::ShortLong).unwrap();
        let a2 = net.generate(&spec, &z, &p1, ClothingType::ShortLong).unwrap();
        let b = net.generate(&spec, &z, &p2, ClothingType::ShortLong).unwrap();
        for (x, y) in a1.data.iter().zip(&a2.data) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let diff: f64 = a1.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
        assert!(diff > 0.0, "pose change must move the output");
    }

    #[test]
    fn discriminator_scores_per_coarsest_vertex() {
        let net = toy_net(15);
        let n4 = *net.hierarchy.counts().last().unwrap();
        let mut rng = stream(16, Stream::Sample);
        let x = sample_standard_normal(&mut rng, 2 * 50, 3);
        let zt = sample_standard_normal(&mut rng, 2, 6);
        let zc = sample_standard_normal(&mut rng, 2, 4);
        let s = net.discriminate(&x, &zt, &zc).unwrap();
        assert_eq!((s.rows, s.cols), (2 * n4, 1));
        assert!(s.data.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zeroed_final_disc_layer_scores_half_everywhere() {
        let mut net = toy_net(17);
        net.params.get_mut("disc.out.w").data.fill(0.0);
        net.params.get_mut("disc.out.b").data.fill(0.0);
        let mut rng = stream(18, Stream::Sample);
        let x = sample_standard_normal(&mut rng, 50, 3);
        let zt = sample_standard_normal(&mut rng, 1, 6);
        let zc = sample_standard_normal(&mut rng, 1, 4);
        let s = net.discriminate(&x, &zt, &zc).unwrap();
        assert!(s.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn residual_block_with_zero_params_is_identity_skip() {
        let net = toy_net(19);
        let mut zeroed = net.clone();
        let names: Vec<String> = zeroed
            .params
            .iter()
            .map(|(n, _)| n.to_string())
            .filter(|n| n.starts_with("dec.cres1."))
            .collect();
        for n in &names {
            zeroed.params.get_mut(n).data.fill(0.0);
        }
        // cres1 runs at the coarsest level with in == out == w3: with all
        // its parameters zero the body contributes nothing and the skip is
        // the raw input.
        let lv = &zeroed.hierarchy.levels;
        let n3 = lv[3].vertex_count;
        let mut rng = stream(20, Stream::Sample);
        let x = sample_standard_normal(&mut rng, n3, 10);
        let cond = sample_standard_normal(&mut rng, 1, 10);
        let mut tape = Tape::new();
        let b = zeroed.bind(&mut tape, |_| false);
        let xv = tape.input(x.clone());
        let cv = tape.input(cond);
        let tiled = tape.tile_rows(cv, n3);
        let out = zeroed.cres_block(&mut tape, &b, "dec.cres1", &lv[3], 1, xv, 10, 10, Some(tiled));
        for (a, bb) in tape.value(out).data.iter().zip(&x.data) {
            assert_eq!(a.to_bits(), bb.to_bits());
        }
    }

    #[test]
    fn discriminator_scores_are_patch_local() {
        // Exact influence oracle: starting from the perturbed vertex,
        // expand K hops in each level's Laplacian pattern, then map through
        // the one-hot selection down-matrix; scores outside the final set
        // cannot change. The mesh is large enough that the complement is
        // nonempty, so the check is not vacuous.
        let (pos, faces) = torus(80, 40, 1.0, 0.4);
        let g = build_topology(&faces, pos.rows).unwrap();
        let h = Arc::new(build_sampling_hierarchy(&g, &pos, &[2, 2, 2, 2], LaplacianMode::SymmetricNormalized).unwrap());
        let mut rng = stream(23, Stream::Init);
        let net = ClothingNet::init(toy_config(), 3, h.clone(), &mut rng).unwrap();

        let v = h.levels[0].vertex_count;
        let mut rng = stream(24, Stream::Sample);
        let x0 = sample_standard_normal(&mut rng, v, 3);
        let zt = sample_standard_normal(&mut rng, 1, 6);
        let zc = sample_standard_normal(&mut rng, 1, 4);
        let mut x1 = x0.clone();
        *x1.at_mut(0, 0) += 0.5;
        let s0 = net.discriminate(&x0, &zt, &zc).unwrap();
        let s1 = net.discriminate(&x1, &zt, &zc).unwrap();

        let mut influenced: Vec<bool> = vec![false; v];
        influenced[0] = true;
        for lvl in 0..4 {
            let lap = &h.levels[lvl].laplacian.matrix.fwd;
            for _ in 0..net.config.k_discriminator {
                let mut next = influenced.clone();
                for r in 0..lap.rows {
                    if influenced[r] {
                        for e in lap.row_ptr[r] as usize..lap.row_ptr[r + 1] as usize {
                            next[lap.col_idx[e] as usize] = true;
                        }
                    }
                }
                // The pattern is symmetric, so one sweep covers both
                // influence directions.
                influenced = next;
            }
            let down = h.levels[lvl + 1].down.as_ref().unwrap();
            let mut coarse = vec![false; down.fwd.rows];
            for (r, c) in coarse.iter_mut().enumerate() {
                let e = down.fwd.row_ptr[r] as usize;
                *c = influenced[down.fwd.col_idx[e] as usize];
            }
            influenced = coarse;
        }

        let mut changed = 0;
        let mut reachable = 0;
        for (i, allowed) in influenced.iter().enumerate() {
            if *allowed {
                reachable += 1;
            }
            if (s0.data[i] - s1.data[i]).abs() > 1e-13 {
                changed += 1;
                assert!(*allowed, "score {i} changed outside the receptive field");
            }
        }
        assert!(changed > 0, "perturbation must move nearby scores");
        assert!(reachable < influenced.len(), "mesh too small for a meaningful locality check");
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let net = toy_net(25);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        net.save(&path).unwrap();
        let loaded = ClothingNet::load(&path, net.hierarchy.clone()).unwrap();
        assert_eq!(loaded.config, net.config);
        assert_eq!(loaded.retained_joints, net.retained_joints);
        for ((na, ta), (nb, tb)) in loaded.params.iter().zip(net.params.iter()) {
            assert_eq!(na, nb);
            for (x, y) in ta.data.iter().zip(&tb.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // A different mesh is rejected.
        let (pos, faces) = cylinder_tube(12, 5, 0.5, 2.0);
        let g = build_topology(&faces, pos.rows).unwrap();
        let other =
            Arc::new(build_sampling_hierarchy(&g, &pos, &[2, 2, 2, 2], LaplacianMode::SymmetricNormalized).unwrap());
        assert!(ClothingNet::load(&path, other).is_err());
    }

    #[test]
    fn manifest_reports_architecture() {
        let net = toy_net(26);
        let m = net.architecture_manifest();
        assert_eq!(m["level_counts"], serde_json::json!([50, 25, 13, 7, 4]));
        assert_eq!(m["decoder_input"], serde_json::json!(15));
        assert_eq!(m["parameter_scalars"], serde_json::json!(net.params.scalar_count()));
    }

    #[test]
    fn plain_decoder_ablation_drops_residual_blocks() {
        let cfg = NetConfig { use_residual_blocks: false, ..toy_config() };
        let mut rng = stream(21, Stream::Init);
        let net = ClothingNet::init(cfg, 3, toy_hierarchy(), &mut rng).unwrap();
        assert!(net.params.iter().all(|(n, _)| !n.contains("cres")));
        assert!(net.params.get("dec.cb0.conv.w").rows > 0);
        // The zero-initialized output layer still pins decoded offsets to zero.
        let z = sample_standard_normal(&mut rng, 2, 5);
        let zt = sample_standard_normal(&mut rng, 2, 6);
        let zc = sample_standard_normal(&mut rng, 2, 4);
        let out = net.decode(&z, &zt, &zc).unwrap();
        assert_eq!((out.rows, out.cols), (2 * 50, 3));
        assert!(out.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn discriminator_free_ablation_has_no_disc_params() {
        let cfg = NetConfig { with_discriminator: false, ..toy_config() };
        let mut rng = stream(22, Stream::Init);
        let net = ClothingNet::init(cfg, 3, toy_hierarchy(), &mut rng).unwrap();
        assert!(net.params.iter().all(|(n, _)| param_group(n) == ParamGroup::Generator));
        let x = Tensor::zeros(net.vertex_count(), 3);
        let (zt, zc) = (Tensor::zeros(1, 6), Tensor::zeros(1, 4));
        assert!(matches!(net.discriminate(&x, &zt, &zc), Err(NetError::BadConfig(_))));
    }

    #[test]
    fn config_validation_catches_bad_widths() {
        let mut cfg = toy_config();
        cfg.stage_widths = [4, 6, 8, 11];
        assert!(matches!(cfg.validate(), Err(NetError::BadConfig(_))));
        let mut cfg = toy_config();
        cfg.latent_dim = 0;
        assert!(cfg.validate().is_err());
        assert!(toy_config().validate().is_ok());
        assert_eq!(NetConfig::default().decoder_input(), 50);
        let lat = NetConfig { conditioning: ConditioningMode::TileOnly, ..NetConfig::default() };
        assert_eq!(lat.decoder_input(), 18);
    }
}
