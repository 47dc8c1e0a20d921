//! Additive clothed-body mesh model.
//!
//! The crate decomposes into three layers:
//!
//! * a small dense/sparse tensor engine with reverse-mode automatic
//!   differentiation ([`tensor`], [`sparse`]), sized for CPU training;
//! * mesh machinery: triangle-mesh topology and graph Laplacians
//!   ([`graph`]), quadric-error-metric coarsening with paired down/up
//!   sampling matrices ([`sampling`]), and a linear-blend-skinning body
//!   runtime that treats clothing as an additive displacement layer on the
//!   undressed body ([`body`]);
//! * the generative model: a pose- and clothing-conditioned graph-conv
//!   VAE-GAN over per-vertex displacements ([`net`]), its losses and
//!   training loop ([`train`]), and a synthetic data generator with planted,
//!   analytically known structure for end-to-end verification ([`data`]).
//!
//! File formats (meshes, checkpoints, datasets, sampling hierarchies) live
//! in [`io`]. Everything is deterministic given a seed: all randomness runs
//! through ChaCha streams and no operation depends on hash-map iteration
//! order, so repeated runs produce byte-identical artifacts.

pub mod body;
pub mod data;
pub mod graph;
pub mod gradcheck;
pub mod io;
pub mod net;
pub mod rng;
pub mod sampling;
pub mod sparse;
pub mod tensor;
pub mod train;

pub use body::{
    clothed_template, extract_displacement, lbs_pose, minimal_body, minimal_rest_shape, pose_blend,
    pose_clothed, pose_conditioning, pose_feature, regress_joints, rodrigues, shape_blend, unpose,
    BodyError, BodyModelSpec, ClothingType, DisplacementField, PoseParams, VertexMask,
};
pub use data::{
    generate, load_external, save_dataset, BaseShape, DataError, Dataset, DatasetRecord,
    PlantedMaps, Split, SyntheticSpec,
};
pub use graph::{build_topology, LaplacianMode, MeshError, ScaledLaplacian, TopologyGraph};
pub use io::{
    load_checkpoint, read_obj, read_ply, save_checkpoint, write_obj, write_ply, Checkpoint, PlyMesh,
};
pub use net::{
    build_reparameterize, condition_rows, param_group, sample_standard_normal, BoundNet,
    ClothingNet, ConditioningMode, NetConfig, NetError, NetParams, ParamGroup,
};
pub use sampling::{build_sampling_hierarchy, SamplingHierarchy};
pub use tensor::{Tape, Tensor, Var};
pub use train::{
    build_hierarchy_for, edge_incidence, eval_aligned_mse, eval_pca, eval_reconstruction,
    lr_schedule, masked_vertex_errors_into, median_in_place, pca_baseline, pearson, train,
    train_with_hierarchy, AblationFlags, AlignedFit, EpochMetrics, EvalReport, LossParts,
    LossWeights, PcaCodec, TrainConfig, TrainError, TrainOutcome, TrainRecord, TrainSet,
    HIERARCHY_FACTORS,
};
