//! Seed-deterministic synthetic clothed-offset datasets with a planted,
//! analytically known pose dependence.
//!
//! Each record's offset field is the sum of three parts, all expressed in the
//! unposed template frame and zeroed outside the clothing mask:
//!
//! 1. a smooth low-frequency field chosen once per clothing type,
//! 2. a pose-modulated component `A · vec(R_j − I)` over the retained
//!    joints, where `A` is a fixed random low-rank linear map, and
//! 3. Gaussian wrinkle noise.
//!
//! Because `A` is known exactly, downstream fits can be scored against
//! ground truth: the derivative of a clean offset field with respect to the
//! pose feature vector *is* `A`, and the difference between two clean fields
//! at the same clothing type is exactly `A · Δfeature`.
//!
//! Datasets round-trip through an on-disk layout of one `topology.json`
//! (faces, body model, mask) plus `records/NNNNNN.rec` files in the crate's
//! shared container framing (magic tag, JSON header, raw little-endian
//! `f64` offset payload). Generation is single-threaded so a seed fully
//! determines every byte.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body::{
    pose_conditioning, BodyError, BodyModelSpec, ClothingType, PoseParams, VertexMask,
};
use crate::data::shapes::{cylinder_tube, icosphere};
use crate::graph::{build_topology, MeshError, TopologyGraph};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;
use crate::train::TrainRecord;

/// Errors from dataset generation, serialization, or loading.
#[derive(Debug, Error)]
pub enum DataError {
    /// The generation spec is internally inconsistent.
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    /// Filesystem access failed.
    #[error("dataset I/O failed on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    /// A dataset file exists but its contents are unusable.
    #[error("malformed dataset file {path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Body(#[from] BodyError),
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

/// Which split a record belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Base mesh for a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum BaseShape {
    /// Open tube: `rings × segments` vertices, boundary loops at both ends.
    Cylinder { rings: usize, segments: usize, radius: f64, height: f64 },
    /// Subdivided icosahedron (`10·4^n + 2` vertices), no boundary.
    Icosphere { subdivisions: usize, radius: f64 },
}

impl BaseShape {
    /// Vertex count of the built mesh.
    pub fn vertex_count(&self) -> usize {
        match *self {
            BaseShape::Cylinder { rings, segments, .. } => rings * segments,
            BaseShape::Icosphere { subdivisions, .. } => 10 * 4usize.pow(subdivisions as u32) + 2,
        }
    }

    fn build(&self) -> (Tensor, Vec<[u32; 3]>) {
        match *self {
            BaseShape::Cylinder { rings, segments, radius, height } => {
                cylinder_tube(rings, segments, radius, height)
            }
            BaseShape::Icosphere { subdivisions, radius } => icosphere(subdivisions, radius),
        }
    }
}

/// Recipe for a generated dataset. All randomness derives from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Base mesh; the default is a 20×20 cylinder (400 vertices).
    pub shape: BaseShape,
    /// Total records; the trailing sixth becomes the test split.
    pub n_samples: usize,
    /// Skeleton joints, chained along the mesh axis.
    pub joints: usize,
    /// Joints whose rotations drive the planted pose component and condition
    /// the network. Root excluded.
    pub retained_joints: Vec<usize>,
    /// Cylinder rings excluded from the mask at each open end.
    pub boundary_rings: usize,
    /// Target RMS vertex displacement of each clothing type's base field.
    pub base_amplitude: f64,
    /// Target RMS vertex displacement of the pose-modulated component.
    pub pose_amplitude: f64,
    /// Standard deviation of the per-coordinate wrinkle noise.
    pub noise_scale: f64,
    /// Standard deviation of each sampled axis-angle component.
    pub pose_angle_scale: f64,
    /// Master seed for the generation stream.
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            shape: BaseShape::Cylinder { rings: 20, segments: 20, radius: 0.3, height: 1.6 },
            n_samples: 600,
            joints: 14,
            retained_joints: vec![1, 3, 5, 7, 9, 11, 13],
            boundary_rings: 2,
            base_amplitude: 0.04,
            pose_amplitude: 0.02,
            noise_scale: 0.004,
            pose_angle_scale: 0.35,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Vertices in the base mesh.
    pub fn vertex_count(&self) -> usize {
        self.shape.vertex_count()
    }

    /// Records in the test split (the trailing `n_samples / 6`).
    pub fn test_count(&self) -> usize {
        self.n_samples / 6
    }

    /// Split of record `index`, a pure function of the spec.
    pub fn split_of(&self, index: usize) -> Split {
        if index >= self.n_samples - self.test_count() {
            Split::Test
        } else {
            Split::Train
        }
    }

    /// Check internal consistency; every error names the offending field.
    pub fn validate(&self) -> Result<(), DataError> {
        let v = self.vertex_count();
        if v < 12 {
            return Err(DataError::Spec(format!("shape has {v} vertices, need at least 12")));
        }
        if self.n_samples == 0 {
            return Err(DataError::Spec("n_samples is zero".into()));
        }
        if self.joints < 2 {
            return Err(DataError::Spec(format!("{} joints, need at least 2", self.joints)));
        }
        if self.retained_joints.is_empty() {
            return Err(DataError::Spec("retained_joints is empty".into()));
        }
        for &j in &self.retained_joints {
            if j == 0 || j >= self.joints {
                return Err(DataError::Spec(format!(
                    "retained joint {j} out of range 1..{}",
                    self.joints
                )));
            }
        }
        if let BaseShape::Cylinder { rings, .. } = self.shape {
            if 2 * self.boundary_rings >= rings {
                return Err(DataError::Spec(format!(
                    "{} boundary rings leave no interior on a {rings}-ring cylinder",
                    self.boundary_rings
                )));
            }
        }
        for (name, val) in [
            ("base_amplitude", self.base_amplitude),
            ("pose_amplitude", self.pose_amplitude),
            ("noise_scale", self.noise_scale),
            ("pose_angle_scale", self.pose_angle_scale),
        ] {
            if !val.is_finite() || val < 0.0 {
                return Err(DataError::Spec(format!("{name} is {val}, want finite ≥ 0")));
            }
        }
        Ok(())
    }
}

/// One sample: masked offsets plus the conditions that produced them.
#[derive(Clone, Debug)]
pub struct DatasetRecord {
    /// `V × 3` unposed offsets; rows outside the mask are zero, all finite.
    pub offsets: Tensor,
    pub pose: PoseParams,
    pub clothing: ClothingType,
    pub split: Split,
}

/// The ground-truth linear structure a generated dataset was built from.
#[derive(Clone, Debug)]
pub struct PlantedMaps {
    /// Fixed linear map from pose features to flattened offsets, `3V × F`
    /// with `F = 9·|retained|`. Rows of excluded vertices are zero.
    pub pose_map: Tensor,
    /// Smooth base field per clothing type, each `V × 3`, masked.
    pub type_fields: Vec<Tensor>,
}

impl PlantedMaps {
    /// The pose feature the planted map acts on: `vec(R_j − I)` for each
    /// retained joint, `9·|retained|` values.
    pub fn pose_feature(body: &BodyModelSpec, pose: &PoseParams) -> Vec<f64> {
        let mut f = pose_conditioning(body, pose);
        for block in f.chunks_exact_mut(9) {
            block[0] -= 1.0;
            block[4] -= 1.0;
            block[8] -= 1.0;
        }
        f
    }

    /// Pose-modulated offset component `A · vec(R − I)` as `V × 3`.
    pub fn pose_component(&self, body: &BodyModelSpec, pose: &PoseParams) -> Tensor {
        let feat = Self::pose_feature(body, pose);
        assert_eq!(self.pose_map.cols, feat.len(), "pose feature length mismatch");
        let v = self.pose_map.rows / 3;
        let mut out = Tensor::zeros(v, 3);
        for (r, row) in self.pose_map.data.chunks_exact(self.pose_map.cols).enumerate() {
            out.data[r] = row.iter().zip(&feat).map(|(a, f)| a * f).sum();
        }
        out
    }

    /// Noise-free offset field for a condition pair: type base plus pose
    /// component. Identical to a generated record at `noise_scale = 0`.
    pub fn clean_field(
        &self,
        body: &BodyModelSpec,
        clothing: ClothingType,
        pose: &PoseParams,
    ) -> Tensor {
        let base = &self.type_fields[clothing.index()];
        let pose_part = self.pose_component(body, pose);
        let mut out = base.clone();
        for (o, p) in out.data.iter_mut().zip(&pose_part.data) {
            *o += p;
        }
        out
    }
}

/// A full dataset: shared body, topology, mask, and per-record samples.
/// `planted` carries the generator's ground truth and is absent for data
/// loaded from disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub body: BodyModelSpec,
    pub graph: TopologyGraph,
    pub mask: VertexMask,
    pub records: Vec<DatasetRecord>,
    pub planted: Option<PlantedMaps>,
}

impl Dataset {
    /// Clone one split's records into the training-loop sample type.
    pub fn split_records(&self, split: Split) -> Vec<TrainRecord> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| TrainRecord {
                offsets: r.offsets.clone(),
                pose: r.pose.clone(),
                clothing: r.clothing,
            })
            .collect()
    }

    /// Order-sensitive content hash (FNV-1a over every stored byte), used to
    /// fingerprint a dataset in run manifests.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for x in &self.body.template.data {
            eat(&x.to_le_bytes());
        }
        for f in &self.graph.faces {
            for &i in f {
                eat(&i.to_le_bytes());
            }
        }
        for v in 0..self.mask.len() {
            eat(&[self.mask.is_included(v) as u8]);
        }
        for r in &self.records {
            for x in &r.offsets.data {
                eat(&x.to_le_bytes());
            }
            for w in r.pose.axis_angles() {
                for c in w {
                    eat(&c.to_le_bytes());
                }
            }
            eat(&[r.clothing.index() as u8, (r.split == Split::Test) as u8]);
        }
        h
    }
}

/// Normalized axial coordinate `t ∈ [0, 1]` and azimuth `φ` per vertex.
fn axial_coords(template: &Tensor) -> Vec<(f64, f64)> {
    let zs: Vec<f64> = (0..template.rows).map(|v| template.at(v, 2)).collect();
    let z_min = zs.iter().cloned().fold(f64::INFINITY, f64::min);
    let z_max = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (z_max - z_min).max(1e-12);
    (0..template.rows)
        .map(|v| {
            let t = (template.at(v, 2) - z_min) / span;
            let phi = template.at(v, 1).atan2(template.at(v, 0));
            (t, phi)
        })
        .collect()
}

/// Build the chain-skeleton body model for a base mesh: joints evenly spaced
/// along the axis, Gaussian joint regressor rows, two-joint linear skinning,
/// two shape modes (radial bulge, axial stretch), zero pose correctives.
fn build_body(spec: &SyntheticSpec, template: Tensor) -> Result<BodyModelSpec, DataError> {
    let v = template.rows;
    let j = spec.joints;
    let coords = axial_coords(&template);

    let mut regressor = Tensor::zeros(j, v);
    let bandwidth = 1.0 / j as f64;
    for jj in 0..j {
        let t_j = jj as f64 / (j - 1) as f64;
        let mut sum = 0.0;
        for (vv, &(t, _)) in coords.iter().enumerate() {
            let d = (t - t_j) / bandwidth;
            let w = (-d * d).exp();
            *regressor.at_mut(jj, vv) = w;
            sum += w;
        }
        for vv in 0..v {
            *regressor.at_mut(jj, vv) /= sum;
        }
    }

    let mut skin = Tensor::zeros(v, j);
    for (vv, &(t, _)) in coords.iter().enumerate() {
        let s = t * (j - 1) as f64;
        let j0 = (s.floor() as usize).min(j - 2);
        let frac = s - j0 as f64;
        *skin.at_mut(vv, j0) = 1.0 - frac;
        *skin.at_mut(vv, j0 + 1) = frac;
    }

    let mut shape_dirs = Tensor::zeros(3 * v, 2);
    for (vv, &(t, phi)) in coords.iter().enumerate() {
        let bulge = (std::f64::consts::PI * t).sin();
        *shape_dirs.at_mut(3 * vv, 0) = bulge * phi.cos();
        *shape_dirs.at_mut(3 * vv + 1, 0) = bulge * phi.sin();
        *shape_dirs.at_mut(3 * vv + 2, 1) = t - 0.5;
    }

    let pose_dirs = Tensor::zeros(3 * v, 9 * (j - 1));
    let mut parents = vec![-1i64];
    parents.extend(0..j as i64 - 1);

    Ok(BodyModelSpec::new(
        template,
        shape_dirs,
        pose_dirs,
        regressor,
        skin,
        parents,
        spec.retained_joints.clone(),
    )?)
}

/// Clothing mask for a base mesh: drop the open boundary rings of a
/// cylinder, or the polar caps of an icosphere.
fn build_mask(spec: &SyntheticSpec, template: &Tensor) -> Result<VertexMask, DataError> {
    let v = template.rows;
    let included: Vec<bool> = match spec.shape {
        BaseShape::Cylinder { rings, segments, .. } => (0..v)
            .map(|vv| {
                let ring = vv / segments;
                ring >= spec.boundary_rings && ring < rings - spec.boundary_rings
            })
            .collect(),
        BaseShape::Icosphere { radius, .. } => {
            (0..v).map(|vv| template.at(vv, 2).abs() <= 0.8 * radius).collect()
        }
    };
    Ok(VertexMask::new(included)?)
}

/// Low-frequency basis over (axial, azimuthal) coordinates.
fn smooth_basis(t: f64, phi: f64) -> [f64; 8] {
    let pt = std::f64::consts::PI * t;
    [1.0, pt.cos(), pt.sin(), (2.0 * pt).cos(), phi.cos(), phi.sin(), (2.0 * phi).cos(), (2.0 * phi).sin()]
}

/// Draw a smooth random field as `V × 3`, masked, then scaled so the RMS
/// per-vertex displacement over included vertices equals `amplitude`.
fn smooth_field(
    rng: &mut ChaCha20Rng,
    coords: &[(f64, f64)],
    mask: &VertexMask,
    amplitude: f64,
) -> Tensor {
    let mut coefs = [[0.0; 8]; 3];
    for c in coefs.iter_mut() {
        for w in c.iter_mut() {
            *w = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let mut field = Tensor::zeros(coords.len(), 3);
    for (vv, &(t, phi)) in coords.iter().enumerate() {
        let basis = smooth_basis(t, phi);
        for k in 0..3 {
            let val: f64 = coefs[k].iter().zip(&basis).map(|(c, b)| c * b).sum();
            *field.at_mut(vv, k) = val;
        }
    }
    mask.zero_excluded(&mut field);
    let mut sq = 0.0;
    for vv in 0..coords.len() {
        if mask.is_included(vv) {
            sq += (0..3).map(|k| field.at(vv, k).powi(2)).sum::<f64>();
        }
    }
    let rms = (sq / mask.included_count() as f64).sqrt();
    if rms > 0.0 {
        let scale = amplitude / rms;
        for x in field.data.iter_mut() {
            *x *= scale;
        }
    }
    field
}

/// Draw a pose: independent Gaussian axis-angle components on the retained
/// joints, identity elsewhere.
fn draw_pose(spec: &SyntheticSpec, rng: &mut ChaCha20Rng) -> PoseParams {
    let mut theta = vec![[0.0; 3]; spec.joints];
    for &j in &spec.retained_joints {
        for c in 0..3 {
            theta[j][c] = spec.pose_angle_scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
    PoseParams::new(theta).expect("drawn axis-angles are finite")
}

const POSE_MAP_RANK: usize = 10;
const CALIBRATION_PROBES: usize = 32;

/// Build the planted maps: four type fields plus the low-rank pose map
/// `A = Σ u_r v_rᵀ` with smooth spatial factors, calibrated on probe poses
/// so the pose component's RMS displacement matches `pose_amplitude`.
fn plant_maps(
    spec: &SyntheticSpec,
    body: &BodyModelSpec,
    mask: &VertexMask,
    coords: &[(f64, f64)],
    rng: &mut ChaCha20Rng,
) -> PlantedMaps {
    let type_fields: Vec<Tensor> = (0..ClothingType::ALL.len())
        .map(|_| smooth_field(rng, coords, mask, spec.base_amplitude))
        .collect();

    let v = coords.len();
    let feat_dim = 9 * spec.retained_joints.len();
    let spatial: Vec<Tensor> =
        (0..POSE_MAP_RANK).map(|_| smooth_field(rng, coords, mask, 1.0)).collect();
    let mut weights = Tensor::zeros(POSE_MAP_RANK, feat_dim);
    for x in weights.data.iter_mut() {
        *x = rng.sample::<f64, _>(StandardNormal) / (feat_dim as f64).sqrt();
    }

    let mut pose_map = Tensor::zeros(3 * v, feat_dim);
    for r in 0..POSE_MAP_RANK {
        for vv in 0..v {
            for k in 0..3 {
                let u = spatial[r].at(vv, k);
                if u == 0.0 {
                    continue;
                }
                for f in 0..feat_dim {
                    let idx = (3 * vv + k) * feat_dim + f;
                    pose_map.data[idx] += u * weights.at(r, f);
                }
            }
        }
    }

    let mut sq = 0.0;
    let mut planted = PlantedMaps { pose_map, type_fields };
    for _ in 0..CALIBRATION_PROBES {
        let pose = draw_pose(spec, rng);
        let comp = planted.pose_component(body, &pose);
        for vv in 0..v {
            if mask.is_included(vv) {
                sq += (0..3).map(|k| comp.at(vv, k).powi(2)).sum::<f64>();
            }
        }
    }
    let rms = (sq / (CALIBRATION_PROBES * mask.included_count()) as f64).sqrt();
    if rms > 0.0 {
        let scale = spec.pose_amplitude / rms;
        for x in planted.pose_map.data.iter_mut() {
            *x *= scale;
        }
    }
    planted
}

/// Generate a dataset from a spec. Single-threaded; every byte of the result
/// is a pure function of the spec.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let (template, faces) = spec.shape.build();
    let graph = build_topology(&faces, template.rows)?;
    let coords = axial_coords(&template);
    let mask = build_mask(spec, &template)?;
    let body = build_body(spec, template)?;

    let mut rng = stream(spec.seed, Stream::Data);
    let planted = plant_maps(spec, &body, &mask, &coords, &mut rng);

    let v = coords.len();
    let mut records = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let clothing = ClothingType::ALL[i % ClothingType::ALL.len()];
        let pose = draw_pose(spec, &mut rng);
        let mut offsets = planted.clean_field(&body, clothing, &pose);
        for x in offsets.data.iter_mut() {
            *x += spec.noise_scale * rng.sample::<f64, _>(StandardNormal);
        }
        mask.zero_excluded(&mut offsets);
        debug_assert_eq!(offsets.rows, v);
        records.push(DatasetRecord { offsets, pose, clothing, split: spec.split_of(i) });
    }

    Ok(Dataset { body, graph, mask, records, planted: Some(planted) })
}

#[derive(Serialize, Deserialize)]
struct TopologyFile {
    faces: Vec<[u32; 3]>,
    body: BodyModelSpec,
    mask: VertexMask,
}

const RECORD_MAGIC: &[u8; 8] = b"MNTLREC1";

#[derive(Serialize, Deserialize)]
struct RecordHeader {
    pose: Vec<[f64; 3]>,
    clothing: ClothingType,
    split: Split,
}

/// Write a dataset to `dir` as `topology.json` plus `records/NNNNNN.rec`.
/// Offsets are stored as raw little-endian `f64`, so a save/load round trip
/// is bit-exact.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<(), DataError> {
    let records_dir = dir.join("records");
    fs::create_dir_all(&records_dir).map_err(|e| io_err(&records_dir, e))?;

    let topo = TopologyFile {
        faces: ds.graph.faces.clone(),
        body: ds.body.clone(),
        mask: ds.mask.clone(),
    };
    let topo_path = dir.join("topology.json");
    let topo_json = serde_json::to_string(&topo).expect("topology serializes");
    fs::write(&topo_path, topo_json).map_err(|e| io_err(&topo_path, e))?;

    for (i, rec) in ds.records.iter().enumerate() {
        let header = RecordHeader {
            pose: rec.pose.axis_angles().to_vec(),
            clothing: rec.clothing,
            split: rec.split,
        };
        let path = records_dir.join(format!("{i:06}.rec"));
        let mut buf: Vec<u8> = Vec::with_capacity(256 + 8 * rec.offsets.data.len());
        crate::io::write_container_header(&mut buf, RECORD_MAGIC, &header)
            .map_err(|e| io_err(&path, e))?;
        crate::io::write_f64_slice(&mut buf, &rec.offsets.data).map_err(|e| io_err(&path, e))?;
        fs::write(&path, buf).map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

fn malformed(path: &Path, reason: impl Into<String>) -> DataError {
    DataError::Malformed { path: path.display().to_string(), reason: reason.into() }
}

fn read_record(path: &Path, body: &BodyModelSpec) -> Result<DatasetRecord, DataError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut cursor = std::io::Cursor::new(bytes.as_slice());
    let header: RecordHeader = crate::io::read_container_header(&mut cursor, RECORD_MAGIC)
        .map_err(|e| malformed(path, format!("bad header: {e}")))?;
    if header.pose.len() != body.joint_count() {
        return Err(malformed(
            path,
            format!(
                "pose has {} joints, body has {}",
                header.pose.len(),
                body.joint_count()
            ),
        ));
    }
    let payload = &bytes[cursor.position() as usize..];
    let expect = 8 * 3 * body.vertex_count();
    if payload.len() != expect {
        return Err(malformed(
            path,
            format!(
                "offset payload is {} bytes for {} values, topology has {} vertices (want {expect} bytes)",
                payload.len(),
                payload.len() / 8,
                body.vertex_count()
            ),
        ));
    }
    let mut offsets = Tensor::zeros(body.vertex_count(), 3);
    for (x, chunk) in offsets.data.iter_mut().zip(payload.chunks_exact(8)) {
        *x = f64::from_le_bytes(chunk.try_into().unwrap());
        if !x.is_finite() {
            return Err(malformed(path, "non-finite offset value"));
        }
    }
    Ok(DatasetRecord {
        offsets,
        pose: PoseParams::new(header.pose)
            .map_err(|e| malformed(path, format!("bad pose: {e}")))?,
        clothing: header.clothing,
        split: header.split,
    })
}

/// Load a dataset previously written by [`save_dataset`] (or any external
/// data in the same layout). A directory with no dataset content yields
/// `Ok(None)` with a warning on stderr; every malformed record error names
/// the offending file. `planted` is always `None` for loaded data.
pub fn load_external(dir: &Path) -> Result<Option<Dataset>, DataError> {
    let topo_path = dir.join("topology.json");
    let records_dir = dir.join("records");
    let mut rec_paths: Vec<PathBuf> = match fs::read_dir(&records_dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "rec"))
            .collect(),
        Err(_) => Vec::new(),
    };
    rec_paths.sort();

    if !topo_path.exists() {
        if rec_paths.is_empty() {
            eprintln!(
                "warning: dataset directory {} is empty; loaded no data",
                dir.display()
            );
            return Ok(None);
        }
        return Err(malformed(
            &topo_path,
            "records present but topology.json is missing",
        ));
    }

    let topo_json = fs::read_to_string(&topo_path).map_err(|e| io_err(&topo_path, e))?;
    let topo: TopologyFile = serde_json::from_str(&topo_json)
        .map_err(|e| malformed(&topo_path, format!("bad topology: {e}")))?;
    // Re-run full validation on the deserialized body rather than trusting
    // the file.
    let body = BodyModelSpec::new(
        topo.body.template,
        topo.body.shape_dirs,
        topo.body.pose_dirs,
        topo.body.joint_regressor,
        topo.body.skin_weights,
        topo.body.parents,
        topo.body.retained_joints,
    )?;
    let graph = build_topology(&topo.faces, body.vertex_count())?;
    if topo.mask.len() != body.vertex_count() {
        return Err(malformed(
            &topo_path,
            format!("mask covers {} vertices, body has {}", topo.mask.len(), body.vertex_count()),
        ));
    }
    let mask = topo.mask;

    if rec_paths.is_empty() {
        eprintln!(
            "warning: dataset directory {} has a topology but no records",
            dir.display()
        );
    }
    let mut records = Vec::with_capacity(rec_paths.len());
    for path in &rec_paths {
        records.push(read_record(path, &body)?);
    }
    Ok(Some(Dataset { body, graph, mask, records, planted: None }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            shape: BaseShape::Cylinder { rings: 10, segments: 12, radius: 0.3, height: 1.2 },
            n_samples: 24,
            joints: 5,
            retained_joints: vec![1, 3],
            boundary_rings: 1,
            seed: 9,
            ..SyntheticSpec::default()
        }
    }

    fn bits(t: &Tensor) -> Vec<u64> {
        t.data.iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn same_seed_generates_byte_identical_datasets() {
        let a = generate(&small_spec()).unwrap();
        let b = generate(&small_spec()).unwrap();
        assert_eq!(a.records.len(), b.records.len());
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(bits(&ra.offsets), bits(&rb.offsets));
            assert_eq!(ra.pose.axis_angles(), rb.pose.axis_angles());
            assert_eq!(ra.clothing, rb.clothing);
            assert_eq!(ra.split, rb.split);
        }
        assert_eq!(a.fingerprint(), b.fingerprint());

        let mut other = small_spec();
        other.seed = 10;
        let c = generate(&other).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn zero_noise_records_equal_the_planted_clean_field() {
        let spec = SyntheticSpec { noise_scale: 0.0, ..small_spec() };
        let ds = generate(&spec).unwrap();
        let planted = ds.planted.as_ref().unwrap();
        for rec in &ds.records {
            let clean = planted.clean_field(&ds.body, rec.clothing, &rec.pose);
            assert_eq!(bits(&rec.offsets), bits(&clean));
        }
    }

    #[test]
    fn clean_fields_differ_by_the_planted_map_times_feature_delta() {
        let ds = generate(&small_spec()).unwrap();
        let planted = ds.planted.as_ref().unwrap();
        let (r0, r1) = (&ds.records[0], &ds.records[4]);
        assert_eq!(r0.clothing, r1.clothing);
        assert_ne!(r0.pose.axis_angles(), r1.pose.axis_angles());

        let f0 = PlantedMaps::pose_feature(&ds.body, &r0.pose);
        let f1 = PlantedMaps::pose_feature(&ds.body, &r1.pose);
        let delta: Vec<f64> = f0.iter().zip(&f1).map(|(a, b)| a - b).collect();

        let c0 = planted.clean_field(&ds.body, r0.clothing, &r0.pose);
        let c1 = planted.clean_field(&ds.body, r1.clothing, &r1.pose);
        let v = ds.body.vertex_count();
        for vv in 0..v {
            for k in 0..3 {
                let got = c0.at(vv, k) - c1.at(vv, k);
                let want: f64 = (0..delta.len())
                    .map(|f| planted.pose_map.at(3 * vv + k, f) * delta[f])
                    .sum();
                assert!((got - want).abs() <= 1e-12, "vertex {vv} coord {k}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn zero_pose_has_zero_pose_component() {
        let ds = generate(&small_spec()).unwrap();
        let planted = ds.planted.as_ref().unwrap();
        let rest = PoseParams::zero(ds.body.joint_count());
        let comp = planted.pose_component(&ds.body, &rest);
        assert!(comp.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn split_is_a_pure_function_of_the_index() {
        let spec = SyntheticSpec { n_samples: 600, ..small_spec() };
        let ds = generate(&spec).unwrap();
        let train = ds.records.iter().filter(|r| r.split == Split::Train).count();
        let test = ds.records.iter().filter(|r| r.split == Split::Test).count();
        assert_eq!((train, test), (500, 100));
        for (i, rec) in ds.records.iter().enumerate() {
            assert_eq!(rec.split, if i >= 500 { Split::Test } else { Split::Train });
            assert_eq!(rec.split, spec.split_of(i));
        }
        assert_eq!(ds.split_records(Split::Train).len(), 500);
        assert_eq!(ds.split_records(Split::Test).len(), 100);
    }

    #[test]
    fn offsets_are_masked_and_finite() {
        let ds = generate(&small_spec()).unwrap();
        for rec in &ds.records {
            assert!(rec.offsets.data.iter().all(|x| x.is_finite()));
            for vv in 0..ds.mask.len() {
                if !ds.mask.is_included(vv) {
                    for k in 0..3 {
                        assert_eq!(rec.offsets.at(vv, k), 0.0);
                    }
                }
            }
        }
        // Boundary rings of the cylinder are excluded, interior included.
        assert!(!ds.mask.is_included(0));
        assert!(ds.mask.is_included(5 * 12));
        assert_eq!(ds.mask.included_count(), 8 * 12);
    }

    #[test]
    fn body_regressor_and_skinning_rows_are_normalized() {
        let ds = generate(&small_spec()).unwrap();
        for j in 0..ds.body.joint_count() {
            let sum: f64 = ds.body.joint_regressor.row(j).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        for v in 0..ds.body.vertex_count() {
            let sum: f64 = ds.body.skin_weights.row(v).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        assert_eq!(ds.body.joint_count(), 5);
        assert_eq!(ds.planted.as_ref().unwrap().pose_map.cols, 18);
    }

    #[test]
    fn icosphere_base_generates() {
        let spec = SyntheticSpec {
            shape: BaseShape::Icosphere { subdivisions: 2, radius: 0.5 },
            n_samples: 8,
            ..small_spec()
        };
        assert_eq!(spec.vertex_count(), 162);
        let ds = generate(&spec).unwrap();
        assert_eq!(ds.body.vertex_count(), 162);
        assert!(ds.mask.included_count() > 0);
        assert!(ds.mask.included_count() < 162);
    }

    #[test]
    fn save_and_load_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("mantle-synth-rt-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let ds = generate(&small_spec()).unwrap();
        save_dataset(&ds, &dir).unwrap();
        let loaded = load_external(&dir).unwrap().expect("dataset present");

        assert_eq!(bits(&loaded.body.template), bits(&ds.body.template));
        assert_eq!(loaded.graph.faces, ds.graph.faces);
        assert_eq!(loaded.mask.included_count(), ds.mask.included_count());
        assert_eq!(loaded.records.len(), ds.records.len());
        for (ra, rb) in ds.records.iter().zip(&loaded.records) {
            assert_eq!(bits(&ra.offsets), bits(&rb.offsets));
            assert_eq!(ra.pose.axis_angles(), rb.pose.axis_angles());
            assert_eq!(ra.clothing, rb.clothing);
            assert_eq!(ra.split, rb.split);
        }
        assert!(loaded.planted.is_none());
        assert_eq!(loaded.fingerprint(), ds.fingerprint());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn empty_directory_loads_as_no_dataset() {
        let dir = std::env::temp_dir().join(format!("mantle-synth-empty-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        assert!(load_external(&dir).unwrap().is_none());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn vertex_count_mismatch_names_the_offending_file() {
        let dir = std::env::temp_dir().join(format!("mantle-synth-bad-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let mut ds = generate(&small_spec()).unwrap();
        ds.records.truncate(3);
        save_dataset(&ds, &dir).unwrap();

        // Rewrite record 1 with a truncated payload, as if it came from a
        // different topology.
        let bad = dir.join("records").join("000001.rec");
        let mut bytes = fs::read(&bad).unwrap();
        bytes.truncate(bytes.len() - 16);
        fs::write(&bad, &bytes).unwrap();

        match load_external(&dir) {
            Err(DataError::Malformed { path, reason }) => {
                assert!(path.contains("000001.rec"), "error names {path}");
                assert!(reason.contains("vertices"), "reason: {reason}");
            }
            other => panic!("expected malformed-record error, got {other:?}"),
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn missing_header_metadata_is_rejected() {
        let dir = std::env::temp_dir().join(format!("mantle-synth-hdr-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let mut ds = generate(&small_spec()).unwrap();
        ds.records.truncate(1);
        save_dataset(&ds, &dir).unwrap();

        let path = dir.join("records").join("000000.rec");
        let bytes = fs::read(&path).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload = bytes[16 + header_len..].to_vec();
        let new_header = br#"{"pose":[[0.0,0.0,0.0]]}"#;
        let mut out = Vec::new();
        out.extend_from_slice(&bytes[..8]);
        out.extend_from_slice(&(new_header.len() as u64).to_le_bytes());
        out.extend_from_slice(new_header);
        out.extend_from_slice(&payload);
        fs::write(&path, out).unwrap();

        match load_external(&dir) {
            Err(DataError::Malformed { path, reason }) => {
                assert!(path.contains("000000.rec"));
                assert!(reason.contains("bad header"), "reason: {reason}");
            }
            other => panic!("expected header error, got {other:?}"),
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn spec_validation_names_bad_fields() {
        let mut spec = small_spec();
        spec.retained_joints = vec![0];
        match spec.validate() {
            Err(DataError::Spec(msg)) => assert!(msg.contains("retained joint 0")),
            other => panic!("expected spec error, got {other:?}"),
        }
        let tiny = SyntheticSpec {
            shape: BaseShape::Cylinder { rings: 2, segments: 3, radius: 0.1, height: 0.2 },
            boundary_rings: 0,
            ..small_spec()
        };
        assert!(matches!(tiny.validate(), Err(DataError::Spec(_))));
        let spec_round: SyntheticSpec =
            serde_json::from_str(&serde_json::to_string(&small_spec()).unwrap()).unwrap();
        assert_eq!(spec_round, small_spec());
    }
}
