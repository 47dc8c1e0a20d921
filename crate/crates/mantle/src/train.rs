//! Losses, the adversarial training loop, the learning-rate schedule, and the
//! evaluation stack: masked per-vertex error, an 18-component PCA baseline,
//! and scale/translation-aligned MSE.
//!
//! Each batch runs two phases on one reused tape. The discriminator phase
//! binds only `disc.*` parameters as trainable, runs the generator frozen to
//! produce reconstructions, scores real and fake fields, and steps the
//! discriminator on its log loss. The generator phase then rebinds with the
//! generator group trainable and the *freshly updated* discriminator frozen,
//! rebuilds the forward pass, and steps on the weighted total of L1
//! reconstruction, edge, KL, and non-saturating GAN losses. Both phases share
//! one reparameterization noise draw per batch.
//!
//! Every random choice (initialization, shuffling, noise) flows from the
//! config seed through named [`Stream`]s, so a training run is reproduced
//! bit for bit by the same build and seed.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body::{BodyModelSpec, ClothingType, PoseParams, VertexMask};
use crate::graph::{LaplacianMode, MeshError, TopologyGraph};
use crate::net::{
    build_reparameterize, condition_rows, param_group, sample_standard_normal, ClothingNet,
    NetConfig, NetError, ParamGroup,
};
use crate::rng::{stream, Stream};
use crate::sampling::{build_sampling_hierarchy, SamplingHierarchy};
use crate::sparse::CsrMatrix;
use crate::tensor::optim::SgdMomentum;
use crate::tensor::tape::{SparsePair, Tape, Var};
use crate::tensor::Tensor;

/// Downsample rates of the level stack every model in this crate trains on:
/// four halvings of the template mesh.
pub const HIERARCHY_FACTORS: [usize; 4] = [2, 2, 2, 2];

/// Training failure modes.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("invalid training data: {0}")]
    Data(String),
    #[error(
        "non-finite loss at epoch {epoch} batch {batch} \
         (recon {}, edge {}, kl {}, gan_g {:?}, gan_d {:?})",
        .parts.recon, .parts.edge, .parts.kl, .parts.gan_g, .parts.gan_d
    )]
    NonFinite { epoch: usize, batch: usize, parts: LossParts },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Loss-term weights for the total objective
/// `recon + γ_edge·edge + γ_kl·kl + γ_gan·gan`.
///
/// The defaults are implementer-chosen working values, not published
/// constants; they are exposed in the config file for that reason.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub gamma_edge: f64,
    pub gamma_kl: f64,
    pub gamma_gan: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { gamma_edge: 1.0, gamma_kl: 1e-2, gamma_gan: 1e-2 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        for (name, g) in
            [("gamma_edge", self.gamma_edge), ("gamma_kl", self.gamma_kl), ("gamma_gan", self.gamma_gan)]
        {
            if !g.is_finite() || g < 0.0 {
                return Err(TrainError::Config(format!("{name} must be finite and nonnegative, got {g}")));
            }
        }
        Ok(())
    }
}

/// Component-removal switches mirroring the ablation study rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Drop the discriminator entirely: no `disc.*` parameters, no GAN term.
    pub no_discriminator: bool,
    /// Replace decoder residual blocks with plain conv blocks.
    pub no_resblock: bool,
    /// Zero the edge-loss weight.
    pub no_edge_loss: bool,
}

impl AblationFlags {
    /// Set the flag named by an ablation label (`discriminator`, `res-block`,
    /// `edge-loss`; case and punctuation are ignored).
    pub fn set_label(&mut self, label: &str) -> Result<(), TrainError> {
        let key: String = label
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        match key.as_str() {
            "discriminator" | "nodiscriminator" => self.no_discriminator = true,
            "resblock" | "noresblock" => self.no_resblock = true,
            "edgeloss" | "noedgeloss" => self.no_edge_loss = true,
            _ => {
                return Err(TrainError::Config(format!(
                    "unknown ablation {label:?} (known: no_discriminator, no_resblock, no_edge_loss)"
                )))
            }
        }
        Ok(())
    }

    /// Active ablations under their reporting labels.
    pub fn active_labels(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.no_discriminator {
            v.push("Discriminator");
        }
        if self.no_resblock {
            v.push("Res-block");
        }
        if self.no_edge_loss {
            v.push("Edge loss");
        }
        v
    }
}

/// Full training configuration. Defaults follow the published recipe: 60
/// epochs, batch 16 (trailing partial batches are dropped; the shuffle
/// rotates which records they are), SGD with momentum 0.9 and weight decay
/// 2e−3, and the warmup-then-decay schedule of [`lr_schedule`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Epochs to run; 0 trains nothing and yields the freshly initialized
    /// network (useful for baseline checkpoints).
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate at epoch 0.
    pub lr_init: f64,
    /// Additive warmup step per epoch while `epoch < warmup_epochs`.
    pub warmup_increment: f64,
    /// Number of warmed epochs. With the default of 4, epochs 0–3 warm up
    /// (2e−3·(epoch+1)) and decay multiplies from epoch 4 on; this pins down
    /// the ambiguous "for 4 epochs" boundary.
    pub warmup_epochs: usize,
    /// Per-epoch multiplicative decay after warmup.
    pub decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Write a checkpoint every N epochs (0 = only after the final epoch).
    /// Consumed by the CLI's epoch callback.
    pub checkpoint_every: usize,
    pub weights: LossWeights,
    pub ablation: AblationFlags,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 16,
            lr_init: 2e-3,
            warmup_increment: 2e-3,
            warmup_epochs: 4,
            decay: 0.99,
            momentum: 0.9,
            weight_decay: 2e-3,
            seed: 0,
            checkpoint_every: 0,
            weights: LossWeights::default(),
            ablation: AblationFlags::default(),
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Network config with the architecture ablations applied.
    pub fn resolved_net(&self) -> NetConfig {
        let mut net = self.net.clone();
        if self.ablation.no_discriminator {
            net.with_discriminator = false;
        }
        if self.ablation.no_resblock {
            net.use_residual_blocks = false;
        }
        net
    }

    /// Loss weights with the loss ablations applied.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if self.ablation.no_edge_loss {
            w.gamma_edge = 0.0;
        }
        if self.ablation.no_discriminator {
            w.gamma_gan = 0.0;
        }
        w
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if self.warmup_epochs == 0 {
            return Err(TrainError::Config("warmup_epochs must be at least 1".into()));
        }
        let rates = [
            ("lr_init", self.lr_init),
            ("warmup_increment", self.warmup_increment),
            ("weight_decay", self.weight_decay),
        ];
        for (name, r) in rates {
            if !r.is_finite() || r < 0.0 {
                return Err(TrainError::Config(format!("{name} must be finite and nonnegative, got {r}")));
            }
        }
        if !self.decay.is_finite() || self.decay <= 0.0 {
            return Err(TrainError::Config(format!("decay must be positive, got {}", self.decay)));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        self.weights.validate()?;
        self.resolved_net().validate()?;
        Ok(())
    }
}

/// Learning rate for an epoch: linear warmup `lr_init + epoch·increment`
/// while `epoch < warmup_epochs`, then the warmed peak decays by `decay` each
/// further epoch. With defaults: 2e−3, 4e−3, 6e−3, 8e−3, 8e−3·0.99,
/// 8e−3·0.99², …
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        cfg.lr_init + epoch as f64 * cfg.warmup_increment
    } else {
        let peak = cfg.lr_init + (cfg.warmup_epochs - 1) as f64 * cfg.warmup_increment;
        peak * cfg.decay.powi((epoch + 1 - cfg.warmup_epochs) as i32)
    }
}

// ---- losses ----------------------------------------------------------------

/// Clamp bound keeping GAN score logs finite.
const SCORE_CLAMP: f64 = 1e-12;

/// Edge-difference operator of a mesh: an `E × V` matrix whose row for edge
/// `(a, b)` (with `a < b`) holds −1 at `a` and +1 at `b`, so applying it to a
/// vertex field yields the per-edge endpoint differences.
pub fn edge_incidence(graph: &TopologyGraph) -> Arc<SparsePair> {
    let mut trips = Vec::with_capacity(2 * graph.edges.len());
    for (i, &(a, b)) in graph.edges.iter().enumerate() {
        trips.push((i as u32, a, -1.0));
        trips.push((i as u32, b, 1.0));
    }
    SparsePair::new(CsrMatrix::from_triplets(graph.edges.len(), graph.vertex_count, &trips))
}

/// L1 reconstruction loss: coordinate-wise absolute error summed over all
/// vertices and coordinates, averaged over the batch.
pub fn loss_recon(t: &mut Tape, xhat: Var, x: Var, batch: usize) -> Var {
    let d = t.sub(xhat, x);
    let a = t.abs(d);
    let s = t.sum(a);
    t.affine(s, 1.0 / batch as f64, 0.0)
}

/// Edge loss: mean (over edges and batch) Euclidean norm of the difference
/// between generated and ground-truth 3D edge vectors. Edge vectors of the
/// difference field equal the difference of edge vectors, so one incidence
/// application suffices.
pub fn loss_edge(t: &mut Tape, incidence: &Arc<SparsePair>, xhat: Var, x: Var, batch: usize) -> Var {
    let d = t.sub(xhat, x);
    let ed = t.spmm(incidence, d, batch);
    let n = t.per_row_l2(ed);
    t.mean(n)
}

/// KL divergence of the diagonal-Gaussian posterior from the standard-normal
/// prior: `0.5 · Σ_d (exp(logσ²) + μ² − 1 − logσ²)`, averaged over the batch.
/// The per-entry term is computed as `(exp(logσ²) + μ²) − (1 + logσ²)`, which
/// is exactly zero at the prior.
pub fn loss_kl(t: &mut Tape, mu: Var, logvar: Var, batch: usize) -> Var {
    let e = t.exp(logvar);
    let m2 = t.square(mu);
    let lhs = t.add(e, m2);
    let rhs = t.affine(logvar, 1.0, 1.0);
    let term = t.sub(lhs, rhs);
    let s = t.sum(term);
    t.affine(s, 0.5 / batch as f64, 0.0)
}

fn clamped_log(t: &mut Tape, s: Var) -> Var {
    let c = t.clamp(s, SCORE_CLAMP, 1.0 - SCORE_CLAMP);
    t.log(c)
}

/// Discriminator objective: `−mean log s_real − mean log(1 − s_fake)` over
/// all patch scores, with log arguments clamped away from 0 and 1.
pub fn loss_gan_discriminator(t: &mut Tape, scores_real: Var, scores_fake: Var) -> Var {
    let lr = clamped_log(t, scores_real);
    let mr = t.mean(lr);
    let flipped = t.affine(scores_fake, -1.0, 1.0);
    let lf = clamped_log(t, flipped);
    let mf = t.mean(lf);
    let s = t.add(mr, mf);
    t.affine(s, -1.0, 0.0)
}

/// Generator objective, non-saturating form: `−mean log s_fake`. Shares the
/// minimax optimum with the raw objective but keeps gradients alive when the
/// discriminator wins early.
pub fn loss_gan_generator(t: &mut Tape, scores_fake: Var) -> Var {
    let lf = clamped_log(t, scores_fake);
    let m = t.mean(lf);
    t.affine(m, -1.0, 0.0)
}

/// Both GAN objectives as `(d_loss, g_loss)`.
pub fn loss_gan(t: &mut Tape, scores_real: Var, scores_fake: Var) -> (Var, Var) {
    (loss_gan_discriminator(t, scores_real, scores_fake), loss_gan_generator(t, scores_fake))
}

/// Weighted total `recon + γ_edge·edge + γ_kl·kl + γ_gan·gan`. Terms whose
/// weight is zero (or that were never built) are skipped outright, so with
/// all weights zero the returned node *is* the reconstruction node.
pub fn weighted_total(
    t: &mut Tape,
    recon: Var,
    edge: Option<Var>,
    kl: Option<Var>,
    gan_g: Option<Var>,
    w: &LossWeights,
) -> Var {
    let mut acc = recon;
    for (term, gamma) in [(edge, w.gamma_edge), (kl, w.gamma_kl), (gan_g, w.gamma_gan)] {
        if let Some(v) = term {
            if gamma != 0.0 {
                let scaled = t.affine(v, gamma, 0.0);
                acc = t.add(acc, scaled);
            }
        }
    }
    acc
}

/// Loss-term values of one batch. `gan_*` are `None` when the model trains
/// without a discriminator. In a non-finite-loss abort raised from the
/// discriminator phase, the generator-side parts are NaN (not yet computed).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossParts {
    pub recon: f64,
    pub edge: f64,
    pub kl: f64,
    pub gan_g: Option<f64>,
    pub gan_d: Option<f64>,
    pub total: f64,
}

// ---- data views ------------------------------------------------------------

/// One training sample: a clothing displacement field in unposed space with
/// the pose and clothing type it was captured under.
#[derive(Clone, Debug)]
pub struct TrainRecord {
    /// `V × 3` offsets, meters; rows outside the mask are zero.
    pub offsets: Tensor,
    pub pose: PoseParams,
    pub clothing: ClothingType,
}

/// Borrowed view of a dataset split plus the shared body and topology.
#[derive(Clone, Copy)]
pub struct TrainSet<'a> {
    pub spec: &'a BodyModelSpec,
    pub graph: &'a TopologyGraph,
    pub mask: &'a VertexMask,
    pub records: &'a [TrainRecord],
}

impl TrainSet<'_> {
    pub fn validate(&self) -> Result<(), TrainError> {
        let v = self.spec.vertex_count();
        if self.graph.vertex_count != v {
            return Err(TrainError::Data(format!(
                "topology has {} vertices, body has {v}",
                self.graph.vertex_count
            )));
        }
        if self.mask.len() != v {
            return Err(TrainError::Data(format!("mask covers {} vertices, body has {v}", self.mask.len())));
        }
        if self.records.is_empty() {
            return Err(TrainError::Data("no records".into()));
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.offsets.rows != v || r.offsets.cols != 3 {
                return Err(TrainError::Data(format!(
                    "record {i} offsets are {}×{}, want {v}×3",
                    r.offsets.rows, r.offsets.cols
                )));
            }
            if r.pose.joint_count() != self.spec.joint_count() {
                return Err(TrainError::Data(format!(
                    "record {i} pose has {} joints, body has {}",
                    r.pose.joint_count(),
                    self.spec.joint_count()
                )));
            }
        }
        Ok(())
    }
}

/// Per-epoch report: averaged loss parts plus the masked per-vertex
/// reconstruction error pooled over the epoch's training batches (sampled
/// latent codes, parameters moving mid-epoch — the clean figure comes from
/// [`eval_reconstruction`]). The median pools all masked vertex distances of
/// the epoch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub batches: usize,
    pub recon: f64,
    pub edge: f64,
    pub kl: f64,
    pub gan_g: Option<f64>,
    pub gan_d: Option<f64>,
    pub total: f64,
    pub err_mean: f64,
    pub err_median: f64,
}

/// A finished training run.
pub struct TrainOutcome {
    pub net: ClothingNet,
    pub metrics: Vec<EpochMetrics>,
}

/// Build the fixed five-level sampling hierarchy for a body's template mesh.
pub fn build_hierarchy_for(
    spec: &BodyModelSpec,
    graph: &TopologyGraph,
) -> Result<Arc<SamplingHierarchy>, TrainError> {
    if graph.vertex_count != spec.vertex_count() {
        return Err(TrainError::Data(format!(
            "topology has {} vertices, body has {}",
            graph.vertex_count,
            spec.vertex_count()
        )));
    }
    Ok(Arc::new(build_sampling_hierarchy(
        graph,
        &spec.template,
        &HIERARCHY_FACTORS,
        LaplacianMode::SymmetricNormalized,
    )?))
}

// ---- training loop ---------------------------------------------------------

/// Train a fresh network on `set` under `cfg`, building the hierarchy from
/// the set's topology. `on_epoch` runs after every epoch (metrics streaming,
/// checkpointing); returning an error aborts the run.
pub fn train(
    set: &TrainSet,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochMetrics, &ClothingNet) -> Result<(), TrainError>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    set.validate()?;
    let hierarchy = build_hierarchy_for(set.spec, set.graph)?;
    train_with_hierarchy(set, cfg, hierarchy, on_epoch)
}

/// [`train`] with a prebuilt hierarchy (callers that already hold one).
pub fn train_with_hierarchy(
    set: &TrainSet,
    cfg: &TrainConfig,
    hierarchy: Arc<SamplingHierarchy>,
    mut on_epoch: impl FnMut(&EpochMetrics, &ClothingNet) -> Result<(), TrainError>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    set.validate()?;
    let v = set.spec.vertex_count();
    if hierarchy.levels[0].vertex_count != v {
        return Err(TrainError::Data(format!(
            "hierarchy is built over {} vertices, body has {v}",
            hierarchy.levels[0].vertex_count
        )));
    }

    let net_cfg = cfg.resolved_net();
    let weights = cfg.effective_weights();
    let with_disc = net_cfg.with_discriminator;
    let mut init_rng = stream(cfg.seed, Stream::Init);
    let mut net =
        ClothingNet::init(net_cfg, set.spec.retained_joints.len(), hierarchy, &mut init_rng)?;
    let latent = net.config.latent_dim;

    let mut g_opt = SgdMomentum::new(
        cfg.momentum,
        cfg.weight_decay,
        net.params.iter().filter(|(n, _)| param_group(n) == ParamGroup::Generator).map(|(_, t)| t),
    );
    let mut d_opt = with_disc.then(|| {
        SgdMomentum::new(
            cfg.momentum,
            cfg.weight_decay,
            net.params
                .iter()
                .filter(|(n, _)| param_group(n) == ParamGroup::Discriminator)
                .map(|(_, t)| t),
        )
    });

    let incidence = edge_incidence(set.graph);
    let n = set.records.len();
    let bsz = cfg.batch_size.min(n);
    let excluded: Vec<usize> = (0..v).filter(|&i| !set.mask.is_included(i)).collect();

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(cfg.seed, Stream::Train);
    let mut tape = Tape::new();
    let mut x = Tensor::zeros(bsz * v, 3);
    let mut epoch_dists: Vec<f64> = Vec::new();
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        order.shuffle(&mut rng);
        epoch_dists.clear();
        let mut batches = 0usize;
        let (mut a_recon, mut a_edge, mut a_kl, mut a_gg, mut a_gd, mut a_total) =
            (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);

        for chunk in order.chunks_exact(bsz) {
            for (bi, &ri) in chunk.iter().enumerate() {
                let rec = &set.records[ri];
                x.data[bi * v * 3..(bi + 1) * v * 3].copy_from_slice(&rec.offsets.data);
                for &e in &excluded {
                    x.row_mut(bi * v + e).fill(0.0);
                }
            }
            let poses: Vec<PoseParams> = chunk.iter().map(|&ri| set.records[ri].pose.clone()).collect();
            let cloths: Vec<ClothingType> = chunk.iter().map(|&ri| set.records[ri].clothing).collect();
            let (pose_rows, cloth_rows) = condition_rows(set.spec, &poses, &cloths)?;
            let eps = sample_standard_normal(&mut rng, bsz, latent);

            // Discriminator phase: generator frozen, its output scored
            // against the real field.
            let mut d_val = None;
            if with_disc {
                tape.reset();
                let b = net.bind(&mut tape, |nm| param_group(nm) == ParamGroup::Discriminator);
                let xr = tape.input(x.clone());
                let pr = tape.input(pose_rows.clone());
                let cr = tape.input(cloth_rows.clone());
                let (zt, zc) = net.build_embeddings(&mut tape, &b, pr, cr);
                let (mu, lv) = net.build_encoder(&mut tape, &b, xr, bsz);
                let ev = tape.input(eps.clone());
                let z = build_reparameterize(&mut tape, mu, lv, ev);
                let xf = net.build_decoder(&mut tape, &b, z, zt, zc, bsz);
                let s_real = net.build_discriminator(&mut tape, &b, xr, zt, zc, bsz);
                let s_fake = net.build_discriminator(&mut tape, &b, xf, zt, zc, bsz);
                let d_loss = loss_gan_discriminator(&mut tape, s_real, s_fake);
                let dv = tape.value(d_loss).data[0];
                if !dv.is_finite() {
                    let nan = f64::NAN;
                    return Err(TrainError::NonFinite {
                        epoch,
                        batch: batches,
                        parts: LossParts {
                            recon: nan,
                            edge: nan,
                            kl: nan,
                            gan_g: None,
                            gan_d: Some(dv),
                            total: nan,
                        },
                    });
                }
                tape.backward(d_loss);
                let grads = net.gradients(&tape, &b);
                step_group(&mut net, &grads, ParamGroup::Discriminator, d_opt.as_mut().unwrap(), lr);
                d_val = Some(dv);
            }

            // Generator phase against the just-updated discriminator.
            tape.reset();
            let b = net.bind(&mut tape, |nm| param_group(nm) == ParamGroup::Generator);
            let xr = tape.input(x.clone());
            let pr = tape.input(pose_rows.clone());
            let cr = tape.input(cloth_rows.clone());
            let (zt, zc) = net.build_embeddings(&mut tape, &b, pr, cr);
            let (mu, lv) = net.build_encoder(&mut tape, &b, xr, bsz);
            let ev = tape.input(eps.clone());
            let z = build_reparameterize(&mut tape, mu, lv, ev);
            let xf = net.build_decoder(&mut tape, &b, z, zt, zc, bsz);
            let recon = loss_recon(&mut tape, xf, xr, bsz);
            let edge = loss_edge(&mut tape, &incidence, xf, xr, bsz);
            let kl = loss_kl(&mut tape, mu, lv, bsz);
            let gan_g = if with_disc {
                // The embeddings reach the discriminator as detached values:
                // they learn through the decoder path only.
                let ztv = tape.value(zt).clone();
                let zcv = tape.value(zc).clone();
                let ztd = tape.input(ztv);
                let zcd = tape.input(zcv);
                let s_fake = net.build_discriminator(&mut tape, &b, xf, ztd, zcd, bsz);
                Some(loss_gan_generator(&mut tape, s_fake))
            } else {
                None
            };
            let total = weighted_total(&mut tape, recon, Some(edge), Some(kl), gan_g, &weights);

            let parts = LossParts {
                recon: tape.value(recon).data[0],
                edge: tape.value(edge).data[0],
                kl: tape.value(kl).data[0],
                gan_g: gan_g.map(|g| tape.value(g).data[0]),
                gan_d: d_val,
                total: tape.value(total).data[0],
            };
            if !parts.total.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: batches, parts });
            }
            masked_vertex_errors_into(tape.value(xf), &x, set.mask, bsz, &mut epoch_dists);

            tape.backward(total);
            let grads = net.gradients(&tape, &b);
            step_group(&mut net, &grads, ParamGroup::Generator, &mut g_opt, lr);

            a_recon += parts.recon;
            a_edge += parts.edge;
            a_kl += parts.kl;
            a_gg += parts.gan_g.unwrap_or(0.0);
            a_gd += parts.gan_d.unwrap_or(0.0);
            a_total += parts.total;
            batches += 1;
        }

        let nb = batches as f64;
        let err_mean = epoch_dists.iter().sum::<f64>() / epoch_dists.len() as f64;
        let err_median = median_in_place(&mut epoch_dists);
        let em = EpochMetrics {
            epoch,
            lr,
            batches,
            recon: a_recon / nb,
            edge: a_edge / nb,
            kl: a_kl / nb,
            gan_g: with_disc.then(|| a_gg / nb),
            gan_d: with_disc.then(|| a_gd / nb),
            total: a_total / nb,
            err_mean,
            err_median,
        };
        on_epoch(&em, &net)?;
        metrics.push(em);
    }

    Ok(TrainOutcome { net, metrics })
}

/// Apply one optimizer step to the parameters of `group`, consuming the
/// matching entries of a full-registry gradient harvest.
fn step_group(
    net: &mut ClothingNet,
    grads: &[Option<&Tensor>],
    group: ParamGroup,
    opt: &mut SgdMomentum,
    lr: f64,
) {
    let mut ps: Vec<&mut Tensor> = Vec::new();
    let mut gs: Vec<Option<&Tensor>> = Vec::new();
    for ((name, t), g) in net.params.iter_mut().zip(grads.iter()) {
        if param_group(name) == group {
            ps.push(t);
            gs.push(*g);
        }
    }
    opt.step(lr, &mut ps, &gs);
}

// ---- evaluation ------------------------------------------------------------

/// Euclidean distance per *included* vertex between two stacked `(B·V) × 3`
/// fields, appended to `out` in sample-major order.
pub fn masked_vertex_errors_into(
    pred: &Tensor,
    gt: &Tensor,
    mask: &VertexMask,
    batch: usize,
    out: &mut Vec<f64>,
) {
    let v = mask.len();
    debug_assert_eq!(pred.rows, batch * v);
    debug_assert_eq!(pred.rows, gt.rows);
    for bi in 0..batch {
        for vi in 0..v {
            if !mask.is_included(vi) {
                continue;
            }
            let p = pred.row(bi * v + vi);
            let g = gt.row(bi * v + vi);
            let d = (p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2);
            out.push(d.sqrt());
        }
    }
}

/// Median via partial selection; for an even count, the mean of the two
/// middle values. Deterministic for any input order; panics on NaN.
pub fn median_in_place(xs: &mut [f64]) -> f64 {
    assert!(!xs.is_empty(), "median of an empty slice");
    let n = xs.len();
    let cmp = |a: &f64, b: &f64| a.partial_cmp(b).expect("non-finite value in median");
    let (lo, mid, _) = xs.select_nth_unstable_by(n / 2, cmp);
    let m = *mid;
    if n % 2 == 1 {
        m
    } else {
        let below = lo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (below + m)
    }
}

/// Pearson correlation of two equal-length samples; 0 when either sample has
/// zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "pearson needs equal-length samples");
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Summary of a masked per-vertex evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    /// Included vertices per sample.
    pub vertices_per_sample: usize,
    pub err_mean: f64,
    pub err_median: f64,
}

fn report_from(mut dists: Vec<f64>, samples: usize, per_sample: usize) -> EvalReport {
    let err_mean = dists.iter().sum::<f64>() / dists.len() as f64;
    let err_median = median_in_place(&mut dists);
    EvalReport { samples, vertices_per_sample: per_sample, err_mean, err_median }
}

/// Deterministic reconstruction evaluation: encode each record's offsets,
/// decode from the posterior mean (no sampling), and pool masked per-vertex
/// Euclidean errors. Because clothing is additive and the minimal body is
/// shared, the offset error equals the clothed-vertex error. Chunking is a
/// throughput choice only — all per-sample statistics are batch-independent.
pub fn eval_reconstruction(
    net: &ClothingNet,
    set: &TrainSet,
    batch_size: usize,
) -> Result<EvalReport, TrainError> {
    set.validate()?;
    let v = set.spec.vertex_count();
    if net.vertex_count() != v {
        return Err(TrainError::Data(format!(
            "network operates on {} vertices, body has {v}",
            net.vertex_count()
        )));
    }
    let bsz = batch_size.clamp(1, set.records.len());
    let mut dists = Vec::with_capacity(set.records.len() * set.mask.included_count());
    for chunk in set.records.chunks(bsz) {
        let b = chunk.len();
        let mut x = Tensor::zeros(b * v, 3);
        for (bi, rec) in chunk.iter().enumerate() {
            x.data[bi * v * 3..(bi + 1) * v * 3].copy_from_slice(&rec.offsets.data);
        }
        for bi in 0..b {
            for vi in 0..v {
                if !set.mask.is_included(vi) {
                    x.row_mut(bi * v + vi).fill(0.0);
                }
            }
        }
        let poses: Vec<PoseParams> = chunk.iter().map(|r| r.pose.clone()).collect();
        let cloths: Vec<ClothingType> = chunk.iter().map(|r| r.clothing).collect();
        let (zt, zc) = net.embed_conditions(set.spec, &poses, &cloths)?;
        let (mu, _) = net.encode(&x, b)?;
        let xf = net.decode(&mu, &zt, &zc)?;
        masked_vertex_errors_into(&xf, &x, set.mask, b, &mut dists);
    }
    Ok(report_from(dists, set.records.len(), set.mask.included_count()))
}

// ---- PCA baseline ----------------------------------------------------------

/// Linear codec: mean field plus orthonormal principal directions fitted on
/// flattened offsets. Encoding projects onto the directions; decoding is the
/// affine reconstruction.
#[derive(Clone, Debug)]
pub struct PcaCodec {
    /// Mean flattened field, length `3V`.
    pub mean: Vec<f64>,
    /// `k × 3V`; rows are orthonormal principal directions, strongest first.
    pub components: Tensor,
    /// Data energy along each component (squared singular values of the
    /// centered data matrix), descending.
    pub eigenvalues: Vec<f64>,
}

impl PcaCodec {
    pub fn component_count(&self) -> usize {
        self.components.rows
    }

    /// Project a flattened field onto the components.
    pub fn encode(&self, flat: &[f64]) -> Vec<f64> {
        assert_eq!(flat.len(), self.mean.len(), "field length mismatch");
        let k = self.components.rows;
        let mut code = vec![0.0; k];
        for (i, c) in code.iter_mut().enumerate() {
            let row = self.components.row(i);
            *c = row.iter().zip(flat).zip(&self.mean).map(|((w, x), m)| w * (x - m)).sum();
        }
        code
    }

    /// Reconstruct a flattened field from a code.
    pub fn decode(&self, code: &[f64]) -> Vec<f64> {
        assert_eq!(code.len(), self.components.rows, "code length mismatch");
        let mut out = self.mean.clone();
        for (i, &c) in code.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.components.row(i)) {
                *o += c * w;
            }
        }
        out
    }

    pub fn reconstruct(&self, flat: &[f64]) -> Vec<f64> {
        self.decode(&self.encode(flat))
    }
}

/// Fit a PCA codec on the records' flattened offsets via the Gram-matrix
/// eigendecomposition (N×N instead of 3V×3V). Eigenvalue ratios below 1e−10
/// of the largest count as rank deficiency: fewer components are returned and
/// a warning is printed.
pub fn pca_baseline(records: &[TrainRecord], n_components: usize) -> Result<PcaCodec, TrainError> {
    let n = records.len();
    if n_components == 0 {
        return Err(TrainError::Config("n_components must be positive".into()));
    }
    if n < n_components {
        return Err(TrainError::Data(format!(
            "{n} records cannot support {n_components} components"
        )));
    }
    let d = records[0].offsets.len();
    if records.iter().any(|r| r.offsets.len() != d) {
        return Err(TrainError::Data("records disagree on field size".into()));
    }

    let mut mean = vec![0.0; d];
    for r in records {
        for (m, &x) in mean.iter_mut().zip(&r.offsets.data) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = records
        .iter()
        .map(|r| r.offsets.data.iter().zip(&mean).map(|(&x, m)| x - m).collect())
        .collect();

    let mut gram = Tensor::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let g: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            *gram.at_mut(i, j) = g;
            *gram.at_mut(j, i) = g;
        }
    }

    let (vals, vecs) = jacobi_eigh(&gram);
    let lead = vals.first().copied().unwrap_or(0.0).max(0.0);
    let kept: Vec<usize> =
        (0..n_components).filter(|&i| vals[i] > 1e-10 * lead && vals[i] > 0.0).collect();
    if kept.len() < n_components {
        eprintln!(
            "warning: training set supports {} of {n_components} requested PCA components \
             (rank-deficient data)",
            kept.len()
        );
    }

    let mut components = Tensor::zeros(kept.len(), d);
    let mut eigenvalues = Vec::with_capacity(kept.len());
    for (row, &i) in kept.iter().enumerate() {
        let out = components.row_mut(row);
        for (j, c) in centered.iter().enumerate() {
            let u = vecs.at(j, i);
            for (o, &x) in out.iter_mut().zip(c) {
                *o += u * x;
            }
        }
        let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for o in out.iter_mut() {
                *o /= norm;
            }
        }
        eigenvalues.push(vals[i]);
    }
    Ok(PcaCodec { mean, components, eigenvalues })
}

/// Masked per-vertex evaluation of the PCA codec over a record set.
pub fn eval_pca(
    codec: &PcaCodec,
    records: &[TrainRecord],
    mask: &VertexMask,
) -> Result<EvalReport, TrainError> {
    if records.is_empty() {
        return Err(TrainError::Data("no records".into()));
    }
    if codec.mean.len() != mask.len() * 3 {
        return Err(TrainError::Data(format!(
            "codec covers {} coordinates, mask covers {}",
            codec.mean.len(),
            mask.len() * 3
        )));
    }
    let v = mask.len();
    let mut dists = Vec::with_capacity(records.len() * mask.included_count());
    for r in records {
        let rec = codec.reconstruct(&r.offsets.data);
        for vi in 0..v {
            if !mask.is_included(vi) {
                continue;
            }
            let g = r.offsets.row(vi);
            let p = &rec[vi * 3..vi * 3 + 3];
            let dd =
                (p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2);
            dists.push(dd.sqrt());
        }
    }
    Ok(report_from(dists, records.len(), mask.included_count()))
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues in descending order and the matching orthonormal eigenvectors
/// as columns.
fn jacobi_eigh(a: &Tensor) -> (Vec<f64>, Tensor) {
    assert_eq!(a.rows, a.cols, "jacobi_eigh needs a square matrix");
    let n = a.rows;
    let mut m = a.clone();
    let mut q = Tensor::zeros(n, n);
    for i in 0..n {
        *q.at_mut(i, i) = 1.0;
    }
    let scale = a.norm().max(1.0);
    for _sweep in 0..60 {
        let mut off = 0.0;
        for p in 0..n {
            for r in p + 1..n {
                off += m.at(p, r) * m.at(p, r);
            }
        }
        if (2.0 * off).sqrt() <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for r in p + 1..n {
                let apq = m.at(p, r);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m.at(r, r) - m.at(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.at(k, p);
                    let mkr = m.at(k, r);
                    *m.at_mut(k, p) = c * mkp - s * mkr;
                    *m.at_mut(k, r) = s * mkp + c * mkr;
                }
                for k in 0..n {
                    let mpk = m.at(p, k);
                    let mrk = m.at(r, k);
                    *m.at_mut(p, k) = c * mpk - s * mrk;
                    *m.at_mut(r, k) = s * mpk + c * mrk;
                }
                for k in 0..n {
                    let qkp = q.at(k, p);
                    let qkr = q.at(k, r);
                    *q.at_mut(k, p) = c * qkp - s * qkr;
                    *q.at_mut(k, r) = s * qkp + c * qkr;
                }
            }
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| m.at(j, j).partial_cmp(&m.at(i, i)).expect("non-finite eigenvalue"));
    let vals: Vec<f64> = idx.iter().map(|&i| m.at(i, i)).collect();
    let mut vecs = Tensor::zeros(n, n);
    for (col, &i) in idx.iter().enumerate() {
        for k in 0..n {
            *vecs.at_mut(k, col) = q.at(k, i);
        }
    }
    (vals, vecs)
}

// ---- aligned evaluation ----------------------------------------------------

/// Optimal similarity fit of a prediction to ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AlignedFit {
    pub mse: f64,
    pub scale: f64,
    pub translation: [f64; 3],
}

/// Minimize `(1/N) Σ ‖s·(p_i + t) − g_i‖²` over masked vertices in closed
/// form: centering both clouds makes the optimum `s* = Σ⟨p̃,g̃⟩ / Σ‖p̃‖²` and
/// `t* = ḡ/s* − p̄`. Degenerate inputs (a collapsed prediction cloud, or an
/// exactly uncorrelated pair where `s* = 0` would make `t` undefined) fall
/// back to `s = 1` with pure translation alignment.
pub fn eval_aligned_mse(
    pred: &Tensor,
    gt: &Tensor,
    mask: &VertexMask,
) -> Result<AlignedFit, TrainError> {
    if pred.rows != gt.rows || pred.cols != 3 || gt.cols != 3 {
        return Err(TrainError::Data(format!(
            "prediction is {}×{}, ground truth {}×{}; want matching V×3",
            pred.rows, pred.cols, gt.rows, gt.cols
        )));
    }
    if mask.len() != pred.rows {
        return Err(TrainError::Data(format!(
            "mask covers {} vertices, meshes have {}",
            mask.len(),
            pred.rows
        )));
    }
    let included: Vec<usize> = (0..pred.rows).filter(|&i| mask.is_included(i)).collect();
    let nf = included.len() as f64;

    let (mut pm, mut gm) = ([0.0; 3], [0.0; 3]);
    for &i in &included {
        for k in 0..3 {
            pm[k] += pred.at(i, k);
            gm[k] += gt.at(i, k);
        }
    }
    for k in 0..3 {
        pm[k] /= nf;
        gm[k] /= nf;
    }

    let (mut cross, mut pp) = (0.0, 0.0);
    for &i in &included {
        for k in 0..3 {
            let pc = pred.at(i, k) - pm[k];
            let gc = gt.at(i, k) - gm[k];
            cross += pc * gc;
            pp += pc * pc;
        }
    }

    let mut scale = if pp > 0.0 { cross / pp } else { 1.0 };
    if scale == 0.0 || !scale.is_finite() {
        scale = 1.0;
    }
    let translation = [gm[0] / scale - pm[0], gm[1] / scale - pm[1], gm[2] / scale - pm[2]];

    let mut mse = 0.0;
    for &i in &included {
        for k in 0..3 {
            let r = scale * (pred.at(i, k) + translation[k]) - gt.at(i, k);
            mse += r * r;
        }
    }
    mse /= nf;
    Ok(AlignedFit { mse, scale, translation })
}
