//! Articulated body runtime with an additive clothing layer.
//!
//! The undressed body follows the usual blendshape-plus-skinning recipe: a
//! rest template is offset by a linear shape basis and a pose-dependent
//! corrective basis, joints are regressed linearly from the shaped rest
//! mesh, and vertices are posed by linear blend skinning down a kinematic
//! tree. Clothing is a *displacement field*: per-vertex offsets added to the
//! rest-pose (unposed) body, so a clothed mesh is posed with exactly the
//! same skeleton and skinning weights as the body underneath — the skeleton
//! never sees the clothing.
//!
//! Two directions matter. Forward: [`clothed_template`] adds offsets to the
//! unposed body and [`pose_clothed`] skins the result. Backward:
//! [`unpose`] inverts each vertex's blended transform so a captured posed
//! scan can be compared with the unposed minimal body, and
//! [`extract_displacement`] turns that difference into training targets,
//! zeroed outside the clothing-relevant [`VertexMask`].

use std::io::{BufReader, BufWriter};
use std::path::Path;

use thiserror::Error;

use crate::io::{bad_data, read_container_header, read_f64_vec, write_container_header, write_f64_slice};
use crate::tensor::Tensor;

/// Errors from body-model validation and evaluation.
#[derive(Debug, Error)]
pub enum BodyError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("skeleton is not a tree rooted at joint 0: {0}")]
    BadSkeleton(String),
    #[error("skin weight row {row} {problem}")]
    BadSkinWeights { row: usize, problem: String },
    #[error("joint regressor row {row} sums to {sum}, expected 1 within 1e-6")]
    BadRegressor { row: usize, sum: f64 },
    #[error("pose has a non-finite value at joint {joint}")]
    NonFinitePose { joint: usize },
    #[error("blended transform at vertex {vertex} is singular (|det| = {det:.3e})")]
    SingularTransform { vertex: usize, det: f64 },
    #[error("vertex mask excludes every vertex")]
    EmptyMask,
}

/// The minimal-body model: template, blendshape bases, skeleton.
///
/// Offsets bases are stored flattened: row `3·v + k` of `shape_dirs` /
/// `pose_dirs` is coordinate `k` of vertex `v`, so blend evaluation is a
/// single matrix–vector product. Joints must be topologically ordered
/// (`parents[j] < j`, root first) — the usual convention for skinned body
/// models — so world transforms compose in one forward sweep.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct BodyModelSpec {
    /// Rest-pose template `T̄`, `V × 3` meters.
    pub template: Tensor,
    /// Shape blend basis, `3V × n_β`.
    pub shape_dirs: Tensor,
    /// Pose-corrective basis, `3V × 9·(J−1)`.
    pub pose_dirs: Tensor,
    /// Joint regressor, `J × V`; rows sum to 1.
    pub joint_regressor: Tensor,
    /// Skinning weights, `V × J`; nonnegative rows summing to 1.
    pub skin_weights: Tensor,
    /// Parent joint per joint; `parents[0] = −1`.
    pub parents: Vec<i64>,
    /// Joints whose rotations condition the clothing network.
    pub retained_joints: Vec<usize>,
}

fn validate_parents(parents: &[i64]) -> Result<(), BodyError> {
    if parents.is_empty() {
        return Err(BodyError::BadSkeleton("no joints".into()));
    }
    if parents[0] != -1 {
        return Err(BodyError::BadSkeleton(format!("root parent is {}, expected -1", parents[0])));
    }
    for (j, &p) in parents.iter().enumerate().skip(1) {
        if p < 0 || p as usize >= j {
            return Err(BodyError::BadSkeleton(format!(
                "joint {j} has parent {p}; joints must be topologically ordered (0 ≤ parent < joint)"
            )));
        }
    }
    Ok(())
}

impl BodyModelSpec {
    /// Validate and assemble a spec. See the type docs for layouts.
    pub fn new(
        template: Tensor,
        shape_dirs: Tensor,
        pose_dirs: Tensor,
        joint_regressor: Tensor,
        skin_weights: Tensor,
        parents: Vec<i64>,
        retained_joints: Vec<usize>,
    ) -> Result<Self, BodyError> {
        let v = template.rows;
        let j = joint_regressor.rows;
        if template.cols != 3 {
            return Err(BodyError::ShapeMismatch(format!("template is {v}×{}, want V×3", template.cols)));
        }
        if shape_dirs.rows != 3 * v {
            return Err(BodyError::ShapeMismatch(format!(
                "shape basis has {} rows, want 3V = {}",
                shape_dirs.rows,
                3 * v
            )));
        }
        validate_parents(&parents)?;
        if parents.len() != j {
            return Err(BodyError::ShapeMismatch(format!(
                "{} parents for {j} regressor rows",
                parents.len()
            )));
        }
        if pose_dirs.rows != 3 * v || pose_dirs.cols != 9 * (j - 1) {
            return Err(BodyError::ShapeMismatch(format!(
                "pose basis is {}×{}, want {}×{}",
                pose_dirs.rows,
                pose_dirs.cols,
                3 * v,
                9 * (j - 1)
            )));
        }
        if joint_regressor.cols != v {
            return Err(BodyError::ShapeMismatch(format!(
                "joint regressor is {j}×{}, want J×{v}",
                joint_regressor.cols
            )));
        }
        if skin_weights.rows != v || skin_weights.cols != j {
            return Err(BodyError::ShapeMismatch(format!(
                "skin weights are {}×{}, want {v}×{j}",
                skin_weights.rows, skin_weights.cols
            )));
        }
        for r in 0..j {
            let sum: f64 = joint_regressor.row(r).iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(BodyError::BadRegressor { row: r, sum });
            }
        }
        for r in 0..v {
            let row = skin_weights.row(r);
            if row.iter().any(|&w| w < 0.0) {
                return Err(BodyError::BadSkinWeights { row: r, problem: "has a negative weight".into() });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(BodyError::BadSkinWeights {
                    row: r,
                    problem: format!("sums to {sum}, expected 1 within 1e-6"),
                });
            }
        }
        if retained_joints.is_empty() {
            return Err(BodyError::ShapeMismatch("retained joint list is empty".into()));
        }
        if let Some(&bad) = retained_joints.iter().find(|&&r| r >= j) {
            return Err(BodyError::ShapeMismatch(format!("retained joint {bad} out of range (J = {j})")));
        }
        Ok(BodyModelSpec { template, shape_dirs, pose_dirs, joint_regressor, skin_weights, parents, retained_joints })
    }

    pub fn vertex_count(&self) -> usize {
        self.template.rows
    }

    pub fn joint_count(&self) -> usize {
        self.joint_regressor.rows
    }

    pub fn beta_count(&self) -> usize {
        self.shape_dirs.cols
    }
}

/// Per-joint axis-angle pose, radians. Construction canonicalizes any
/// axis-angle of magnitude ≥ 2π to its equivalent below 2π and rejects
/// non-finite entries.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PoseParams {
    theta: Vec<[f64; 3]>,
}

impl PoseParams {
    pub fn new(theta: Vec<[f64; 3]>) -> Result<Self, BodyError> {
        for (j, w) in theta.iter().enumerate() {
            if !w.iter().all(|x| x.is_finite()) {
                return Err(BodyError::NonFinitePose { joint: j });
            }
        }
        let tau = 2.0 * std::f64::consts::PI;
        let theta = theta
            .into_iter()
            .map(|w| {
                let a = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
                if a < tau {
                    w
                } else {
                    let s = a.rem_euclid(tau) / a;
                    [w[0] * s, w[1] * s, w[2] * s]
                }
            })
            .collect();
        Ok(PoseParams { theta })
    }

    /// Rest pose (all zeros) for `joints` joints.
    pub fn zero(joints: usize) -> Self {
        PoseParams { theta: vec![[0.0; 3]; joints] }
    }

    pub fn joint_count(&self) -> usize {
        self.theta.len()
    }

    pub fn axis_angles(&self) -> &[[f64; 3]] {
        &self.theta
    }

    /// Rotation matrix per joint.
    pub fn rotations(&self) -> Vec<[[f64; 3]; 3]> {
        self.theta.iter().map(|&w| rodrigues(w)).collect()
    }
}

/// Fixed registry of clothing types the model is conditioned on. Labels
/// follow the upper/lower garment length: e.g. `ShortLong` is a short-sleeve
/// top with long pants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClothingType {
    ShortLong,
    ShortShort,
    LongShort,
    LongLong,
}

impl ClothingType {
    pub const ALL: [ClothingType; 4] = [
        ClothingType::ShortLong,
        ClothingType::ShortShort,
        ClothingType::LongShort,
        ClothingType::LongLong,
    ];

    /// One-hot encoding in registry order.
    pub fn one_hot(self) -> [f64; 4] {
        let mut v = [0.0; 4];
        v[self.index()] = 1.0;
        v
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).unwrap()
    }

    pub fn label(self) -> &'static str {
        match self {
            ClothingType::ShortLong => "shortlong",
            ClothingType::ShortShort => "shortshort",
            ClothingType::LongShort => "longshort",
            ClothingType::LongLong => "longlong",
        }
    }

    pub fn from_label(label: &str) -> Option<ClothingType> {
        Self::ALL.iter().copied().find(|c| c.label() == label)
    }
}

/// Clothing-relevant vertex marker: offsets outside it are forced to zero.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct VertexMask {
    included: Vec<bool>,
}

impl VertexMask {
    pub fn new(included: Vec<bool>) -> Result<Self, BodyError> {
        if !included.iter().any(|&b| b) {
            return Err(BodyError::EmptyMask);
        }
        Ok(VertexMask { included })
    }

    /// Mask that includes every vertex.
    pub fn all(vertex_count: usize) -> Self {
        VertexMask { included: vec![true; vertex_count] }
    }

    pub fn len(&self) -> usize {
        self.included.len()
    }

    pub fn is_empty(&self) -> bool {
        self.included.is_empty()
    }

    pub fn is_included(&self, v: usize) -> bool {
        self.included[v]
    }

    pub fn included_count(&self) -> usize {
        self.included.iter().filter(|&&b| b).count()
    }

    /// Zero the rows of `offsets` for excluded vertices.
    pub fn zero_excluded(&self, offsets: &mut Tensor) {
        for (v, &inc) in self.included.iter().enumerate() {
            if !inc {
                offsets.row_mut(v).fill(0.0);
            }
        }
    }
}

/// Per-vertex clothing offsets in unposed space, with the pose and clothing
/// type they were captured under.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct DisplacementField {
    /// `V × 3` offsets, meters, unposed space; zero outside the mask.
    pub offsets: Tensor,
    pub pose: PoseParams,
    pub clothing_type: ClothingType,
}

impl DisplacementField {
    /// All-zero field (the undressed body) at the given pose.
    pub fn zero(vertex_count: usize, pose: PoseParams, clothing_type: ClothingType) -> Self {
        DisplacementField { offsets: Tensor::zeros(vertex_count, 3), pose, clothing_type }
    }
}

/// Rotation matrix of an axis-angle vector (Rodrigues formula). Magnitudes
/// below 1e−8 use the first-order form `I + skew(ω)`, which is exactly the
/// identity at zero.
pub fn rodrigues(axis_angle: [f64; 3]) -> [[f64; 3]; 3] {
    let [x, y, z] = axis_angle;
    let theta = (x * x + y * y + z * z).sqrt();
    if theta < 1e-8 {
        return [[1.0, -z, y], [z, 1.0, -x], [-y, x, 1.0]];
    }
    let (kx, ky, kz) = (x / theta, y / theta, z / theta);
    let (s, c) = theta.sin_cos();
    let t = 1.0 - c;
    [
        [c + t * kx * kx, t * kx * ky - s * kz, t * kx * kz + s * ky],
        [t * ky * kx + s * kz, c + t * ky * ky, t * ky * kz - s * kx],
        [t * kz * kx - s * ky, t * kz * ky + s * kx, c + t * kz * kz],
    ]
}

/// Pose-corrective feature: `vec(R_j − I)` row-major for every non-root
/// joint, concatenated in joint order; `9·(J−1)` values, all zero at rest.
pub fn pose_feature(pose: &PoseParams) -> Vec<f64> {
    let mut f = Vec::with_capacity(9 * pose.joint_count().saturating_sub(1));
    for &w in &pose.axis_angles()[1..] {
        let r = rodrigues(w);
        for (i, row) in r.iter().enumerate() {
            for (j, &val) in row.iter().enumerate() {
                f.push(val - if i == j { 1.0 } else { 0.0 });
            }
        }
    }
    f
}

/// Network conditioning vector: the full rotation matrices (row-major) of
/// the spec's retained joints, `9·|retained|` values.
pub fn pose_conditioning(spec: &BodyModelSpec, pose: &PoseParams) -> Vec<f64> {
    assert_eq!(pose.joint_count(), spec.joint_count(), "pose/spec joint count mismatch");
    let mut f = Vec::with_capacity(9 * spec.retained_joints.len());
    for &j in &spec.retained_joints {
        let r = rodrigues(pose.axis_angles()[j]);
        for row in r {
            f.extend_from_slice(&row);
        }
    }
    f
}

/// Shape blendshape offsets `B_S(β)` as `V × 3`.
pub fn shape_blend(spec: &BodyModelSpec, beta: &[f64]) -> Result<Tensor, BodyError> {
    if beta.len() != spec.beta_count() {
        return Err(BodyError::ShapeMismatch(format!(
            "beta has {} entries, basis has {} columns",
            beta.len(),
            spec.beta_count()
        )));
    }
    let b = Tensor::from_vec(beta.len(), 1, beta.to_vec());
    let flat = spec.shape_dirs.matmul(&b);
    Ok(Tensor::from_vec(spec.vertex_count(), 3, flat.data))
}

/// Pose-corrective offsets `B_P(θ)` as `V × 3`; zero at the rest pose by
/// construction of the feature.
pub fn pose_blend(spec: &BodyModelSpec, pose: &PoseParams) -> Tensor {
    assert_eq!(pose.joint_count(), spec.joint_count(), "pose/spec joint count mismatch");
    let f = pose_feature(pose);
    let fv = Tensor::from_vec(f.len(), 1, f);
    let flat = spec.pose_dirs.matmul(&fv);
    Tensor::from_vec(spec.vertex_count(), 3, flat.data)
}

/// Joint locations regressed from rest vertices: `joint_regressor · rest`.
pub fn regress_joints(spec: &BodyModelSpec, rest_vertices: &Tensor) -> Result<Tensor, BodyError> {
    if rest_vertices.rows != spec.vertex_count() || rest_vertices.cols != 3 {
        return Err(BodyError::ShapeMismatch(format!(
            "rest vertices are {}×{}, want {}×3",
            rest_vertices.rows,
            rest_vertices.cols,
            spec.vertex_count()
        )));
    }
    Ok(spec.joint_regressor.matmul(rest_vertices))
}

/// Rigid transform as rotation/linear part plus translation.
#[derive(Clone, Copy)]
struct Affine {
    m: [[f64; 3]; 3],
    t: [f64; 3],
}

const IDENTITY3: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl Affine {
    /// `self ∘ other`: apply `other` first.
    fn compose(&self, other: &Affine) -> Affine {
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = (0..3).map(|k| self.m[i][k] * other.m[k][j]).sum();
            }
        }
        let mut t = self.t;
        for i in 0..3 {
            t[i] += (0..3).map(|k| self.m[i][k] * other.t[k]).sum::<f64>();
        }
        Affine { m, t }
    }

    fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = self.t;
        for i in 0..3 {
            out[i] += (0..3).map(|k| self.m[i][k] * p[k]).sum::<f64>();
        }
        out
    }

    fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Inverse via the adjugate; `None` when `|det| ≤ min_det`.
    fn inverse(&self, min_det: f64) -> Option<Affine> {
        let d = self.det();
        if d.abs() <= min_det {
            return None;
        }
        let m = &self.m;
        let inv = [
            [
                (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / d,
                (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / d,
                (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / d,
            ],
            [
                (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / d,
                (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / d,
                (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / d,
            ],
            [
                (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / d,
                (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / d,
                (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / d,
            ],
        ];
        let a = Affine { m: inv, t: [0.0; 3] };
        let mt = a.apply(self.t);
        Some(Affine { m: inv, t: [-mt[0], -mt[1], -mt[2]] })
    }
}

/// Per-joint transforms relative to the rest skeleton: world transform down
/// the tree, then shifted so a joint's own rest location maps to itself.
fn rest_relative_transforms(spec: &BodyModelSpec, joints: &Tensor, pose: &PoseParams) -> Result<Vec<Affine>, BodyError> {
    validate_parents(&spec.parents)?;
    if pose.joint_count() != spec.joint_count() {
        return Err(BodyError::ShapeMismatch(format!(
            "pose has {} joints, spec has {}",
            pose.joint_count(),
            spec.joint_count()
        )));
    }
    let rotations = pose.rotations();
    let j_count = spec.joint_count();
    let jloc = |j: usize| -> [f64; 3] {
        let r = joints.row(j);
        [r[0], r[1], r[2]]
    };
    let mut world: Vec<Affine> = Vec::with_capacity(j_count);
    for j in 0..j_count {
        let local_t = if j == 0 {
            jloc(0)
        } else {
            let (jj, jp) = (jloc(j), jloc(spec.parents[j] as usize));
            [jj[0] - jp[0], jj[1] - jp[1], jj[2] - jp[2]]
        };
        let local = Affine { m: rotations[j], t: local_t };
        let w = if j == 0 { local } else { world[spec.parents[j] as usize].compose(&local) };
        world.push(w);
    }
    Ok(world
        .iter()
        .enumerate()
        .map(|(j, w)| {
            let jj = jloc(j);
            // w ∘ translate(−j_rest): t = w.t − w.m · j_rest.
            let mj = Affine { m: w.m, t: [0.0; 3] }.apply(jj);
            Affine { m: w.m, t: [w.t[0] - mj[0], w.t[1] - mj[1], w.t[2] - mj[2]] }
        })
        .collect())
}

/// Blend a vertex's joint transforms. Accumulating deviations from the
/// identity (`I + Σ_j w_vj·(G_j − I)`) makes the rest pose an exact fixed
/// point: every `G_j − I` is exactly zero there, regardless of how the
/// weight row rounds.
fn blended_transform(spec: &BodyModelSpec, rel: &[Affine], v: usize) -> Affine {
    let mut m = IDENTITY3;
    let mut t = [0.0; 3];
    for (j, &w) in spec.skin_weights.row(v).iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let g = &rel[j];
        for i in 0..3 {
            for k in 0..3 {
                m[i][k] += w * (g.m[i][k] - if i == k { 1.0 } else { 0.0 });
            }
            t[i] += w * g.t[i];
        }
    }
    Affine { m, t }
}

/// Pose rest vertices by linear blend skinning, regressing joints from the
/// same rest vertices.
pub fn lbs_pose(spec: &BodyModelSpec, rest_vertices: &Tensor, pose: &PoseParams) -> Result<Tensor, BodyError> {
    let joints = regress_joints(spec, rest_vertices)?;
    skin_with_joints(spec, rest_vertices, &joints, pose)
}

/// Skin `vertices` with transforms built from an explicit joint set; the
/// clothed path uses this to keep the skeleton pinned to the minimal body.
pub fn skin_with_joints(
    spec: &BodyModelSpec,
    vertices: &Tensor,
    joints: &Tensor,
    pose: &PoseParams,
) -> Result<Tensor, BodyError> {
    if vertices.rows != spec.vertex_count() || vertices.cols != 3 {
        return Err(BodyError::ShapeMismatch(format!(
            "vertices are {}×{}, want {}×3",
            vertices.rows,
            vertices.cols,
            spec.vertex_count()
        )));
    }
    let rel = rest_relative_transforms(spec, joints, pose)?;
    let mut out = Tensor::zeros(vertices.rows, 3);
    for v in 0..vertices.rows {
        let r = vertices.row(v);
        let p = blended_transform(spec, &rel, v).apply([r[0], r[1], r[2]]);
        out.row_mut(v).copy_from_slice(&p);
    }
    Ok(out)
}

/// Invert skinning: map posed vertices back to unposed space using the
/// blended transforms implied by `rest_reference` (the minimal body the
/// skeleton was regressed from) and `pose`.
pub fn unpose(
    spec: &BodyModelSpec,
    posed_vertices: &Tensor,
    pose: &PoseParams,
    rest_reference: &Tensor,
) -> Result<Tensor, BodyError> {
    if posed_vertices.rows != spec.vertex_count() || posed_vertices.cols != 3 {
        return Err(BodyError::ShapeMismatch(format!(
            "posed vertices are {}×{}, want {}×3",
            posed_vertices.rows,
            posed_vertices.cols,
            spec.vertex_count()
        )));
    }
    let joints = regress_joints(spec, rest_reference)?;
    let rel = rest_relative_transforms(spec, &joints, pose)?;
    let mut out = Tensor::zeros(posed_vertices.rows, 3);
    for v in 0..posed_vertices.rows {
        let b = blended_transform(spec, &rel, v);
        let inv = b.inverse(1e-10).ok_or(BodyError::SingularTransform { vertex: v, det: b.det() })?;
        let r = posed_vertices.row(v);
        out.row_mut(v).copy_from_slice(&inv.apply([r[0], r[1], r[2]]));
    }
    Ok(out)
}

/// Clothing offsets from a clothed/minimal pair of unposed meshes, zeroed
/// outside the mask.
pub fn extract_displacement(
    clothed_unposed: &Tensor,
    minimal_unposed: &Tensor,
    mask: &VertexMask,
    pose: PoseParams,
    clothing_type: ClothingType,
) -> Result<DisplacementField, BodyError> {
    if clothed_unposed.rows != minimal_unposed.rows
        || clothed_unposed.cols != 3
        || minimal_unposed.cols != 3
        || mask.len() != clothed_unposed.rows
    {
        return Err(BodyError::ShapeMismatch(format!(
            "clothed {}×{}, minimal {}×{}, mask {}",
            clothed_unposed.rows,
            clothed_unposed.cols,
            minimal_unposed.rows,
            minimal_unposed.cols,
            mask.len()
        )));
    }
    let mut offsets = Tensor::zeros(clothed_unposed.rows, 3);
    for (o, (c, m)) in offsets.data.iter_mut().zip(clothed_unposed.data.iter().zip(&minimal_unposed.data)) {
        *o = c - m;
    }
    mask.zero_excluded(&mut offsets);
    Ok(DisplacementField { offsets, pose, clothing_type })
}

/// Unposed clothed body: `T̄ + B_S(β) + B_P(θ) + offsets`.
pub fn clothed_template(
    spec: &BodyModelSpec,
    beta: &[f64],
    pose: &PoseParams,
    displacement: &DisplacementField,
) -> Result<Tensor, BodyError> {
    if displacement.offsets.rows != spec.vertex_count() || displacement.offsets.cols != 3 {
        return Err(BodyError::ShapeMismatch(format!(
            "offsets are {}×{}, want {}×3",
            displacement.offsets.rows,
            displacement.offsets.cols,
            spec.vertex_count()
        )));
    }
    // Same evaluation order as [`minimal_body`] — (T̄ + B_S) + B_P first —
    // so a zero field reproduces the minimal pipeline bit for bit.
    let mut out = minimal_rest_shape(spec, beta)?;
    let pb = pose_blend(spec, pose);
    for ((o, s), d) in out.data.iter_mut().zip(&pb.data).zip(&displacement.offsets.data) {
        *o = (*o + s) + d;
    }
    Ok(out)
}

/// Posed clothed body. Joints are regressed from the *minimal* shaped rest
/// body `T̄ + B_S(β)` — clothing never moves the skeleton — and the clothed
/// rest mesh (template + blends + offsets) is skinned with those joints.
pub fn pose_clothed(
    spec: &BodyModelSpec,
    beta: &[f64],
    pose: &PoseParams,
    displacement: &DisplacementField,
) -> Result<Tensor, BodyError> {
    let minimal_rest = minimal_rest_shape(spec, beta)?;
    let joints = regress_joints(spec, &minimal_rest)?;
    let clothed_rest = clothed_template(spec, beta, pose, displacement)?;
    skin_with_joints(spec, &clothed_rest, &joints, pose)
}

/// Shaped rest body without pose correctives: `T̄ + B_S(β)`; the mesh joints
/// are regressed from.
pub fn minimal_rest_shape(spec: &BodyModelSpec, beta: &[f64]) -> Result<Tensor, BodyError> {
    let mut out = shape_blend(spec, beta)?;
    for (o, t) in out.data.iter_mut().zip(&spec.template.data) {
        *o += t;
    }
    Ok(out)
}

/// Posed minimal (undressed) body: the zero-displacement pipeline.
pub fn minimal_body(spec: &BodyModelSpec, beta: &[f64], pose: &PoseParams) -> Result<Tensor, BodyError> {
    let minimal_rest = minimal_rest_shape(spec, beta)?;
    let joints = regress_joints(spec, &minimal_rest)?;
    let pb = pose_blend(spec, pose);
    let mut vertices = minimal_rest.clone();
    for (v, d) in vertices.data.iter_mut().zip(&pb.data) {
        *v += d;
    }
    skin_with_joints(spec, &vertices, &joints, pose)
}

const BODY_MAGIC: &[u8; 8] = b"MNTLBODY";

#[derive(serde::Serialize, serde::Deserialize)]
struct BodyHeader {
    vertex_count: usize,
    joint_count: usize,
    beta_count: usize,
    parents: Vec<i64>,
    retained_joints: Vec<usize>,
}

impl BodyModelSpec {
    /// Write the spec as a container: JSON header (counts, parents, retained
    /// joints) followed by little-endian `f64` arrays in fixed order —
    /// template, shape basis, pose basis, joint regressor, skin weights.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let header = BodyHeader {
            vertex_count: self.vertex_count(),
            joint_count: self.joint_count(),
            beta_count: self.beta_count(),
            parents: self.parents.clone(),
            retained_joints: self.retained_joints.clone(),
        };
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        write_container_header(&mut w, BODY_MAGIC, &header)?;
        for arr in [&self.template, &self.shape_dirs, &self.pose_dirs, &self.joint_regressor, &self.skin_weights] {
            write_f64_slice(&mut w, &arr.data)?;
        }
        use std::io::Write as _;
        w.flush()
    }

    /// Read a spec written by [`BodyModelSpec::save`]; validates on load.
    pub fn load(path: &Path) -> std::io::Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let h: BodyHeader = read_container_header(&mut r, BODY_MAGIC)?;
        let (v, j, nb) = (h.vertex_count, h.joint_count, h.beta_count);
        if j == 0 {
            return Err(bad_data("body spec has no joints"));
        }
        let template = Tensor::from_vec(v, 3, read_f64_vec(&mut r, v * 3)?);
        let shape_dirs = Tensor::from_vec(3 * v, nb, read_f64_vec(&mut r, 3 * v * nb)?);
        let pose_dirs = Tensor::from_vec(3 * v, 9 * (j - 1), read_f64_vec(&mut r, 3 * v * 9 * (j - 1))?);
        let joint_regressor = Tensor::from_vec(j, v, read_f64_vec(&mut r, j * v)?);
        let skin_weights = Tensor::from_vec(v, j, read_f64_vec(&mut r, v * j)?);
        BodyModelSpec::new(template, shape_dirs, pose_dirs, joint_regressor, skin_weights, h.parents, h.retained_joints)
            .map_err(|e| bad_data(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use rand::Rng;

    fn mat3_mul(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        out
    }

    /// Independent oracle: truncated power series of the matrix exponential
    /// of the skew matrix, `Σ_{k≤terms} Aᵏ/k!`.
    fn expm_skew_series(w: [f64; 3], terms: usize) -> [[f64; 3]; 3] {
        let a = [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]];
        let mut acc = IDENTITY3;
        let mut term = IDENTITY3;
        for k in 1..=terms {
            term = mat3_mul(term, a);
            for row in term.iter_mut() {
                for x in row.iter_mut() {
                    *x /= k as f64;
                }
            }
            for i in 0..3 {
                for j in 0..3 {
                    acc[i][j] += term[i][j];
                }
            }
        }
        acc
    }

    /// Straight-line body: `v` vertices along the z axis, `j` joints evenly
    /// spread over them with one-hot regressor rows, each vertex skinned to
    /// its two bracketing joints with exact-sum weights.
    fn line_spec(v: usize, j: usize) -> BodyModelSpec {
        let mut template = Tensor::zeros(v, 3);
        for i in 0..v {
            template.row_mut(i)[2] = i as f64 / (v - 1) as f64;
        }
        // Deterministic small bases so blend tests have structure.
        let n_beta = 2;
        let mut shape_dirs = Tensor::zeros(3 * v, n_beta);
        let mut pose_dirs = Tensor::zeros(3 * v, 9 * (j - 1));
        for r in 0..3 * v {
            for c in 0..n_beta {
                *shape_dirs.at_mut(r, c) = 0.01 * ((r * 7 + c * 3) % 11) as f64 / 11.0;
            }
            for c in 0..9 * (j - 1) {
                *pose_dirs.at_mut(r, c) = 0.001 * ((r * 5 + c) % 13) as f64 / 13.0;
            }
        }
        let mut joint_regressor = Tensor::zeros(j, v);
        for k in 0..j {
            let pick = k * (v - 1) / (j - 1);
            *joint_regressor.at_mut(k, pick) = 1.0;
        }
        let mut skin_weights = Tensor::zeros(v, j);
        for i in 0..v {
            let pos = i as f64 / (v - 1) as f64 * (j - 1) as f64;
            let lo = (pos.floor() as usize).min(j - 2);
            let frac = pos - lo as f64;
            *skin_weights.at_mut(i, lo) = 1.0 - frac;
            *skin_weights.at_mut(i, lo + 1) = frac;
        }
        let parents: Vec<i64> = (0..j as i64).map(|k| k - 1).collect();
        let retained: Vec<usize> = (1..j).collect();
        BodyModelSpec::new(template, shape_dirs, pose_dirs, joint_regressor, skin_weights, parents, retained)
            .unwrap()
    }

    fn random_pose(spec: &BodyModelSpec, seed: u64, scale: f64) -> PoseParams {
        let mut rng = stream(seed, Stream::Test);
        let theta = (0..spec.joint_count())
            .map(|_| [0.0; 3].map(|_| rng.random_range(-scale..scale)))
            .collect();
        PoseParams::new(theta).unwrap()
    }

    #[test]
    fn rodrigues_zero_is_exact_identity() {
        assert_eq!(rodrigues([0.0; 3]), IDENTITY3);
    }

    #[test]
    fn rodrigues_half_turn_about_z() {
        let r = rodrigues([0.0, 0.0, std::f64::consts::PI]);
        let want = [[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((r[i][j] - want[i][j]).abs() < 1e-15, "r[{i}][{j}] = {}", r[i][j]);
            }
        }
    }

    #[test]
    fn rodrigues_matches_series_oracle() {
        let w = [0.3, -0.2, 0.1];
        let r = rodrigues(w);
        let series = expm_skew_series(w, 30);
        for i in 0..3 {
            for j in 0..3 {
                assert!((r[i][j] - series[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rodrigues_outputs_are_rotations() {
        let mut rng = stream(11, Stream::Test);
        for _ in 0..1000 {
            let w = [0.0; 3].map(|_| rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
            let r = rodrigues(w);
            let rt = [[r[0][0], r[1][0], r[2][0]], [r[0][1], r[1][1], r[2][1]], [r[0][2], r[1][2], r[2][2]]];
            let prod = mat3_mul(rt, r);
            for i in 0..3 {
                for j in 0..3 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((prod[i][j] - want).abs() < 1e-12);
                }
            }
            let det = Affine { m: r, t: [0.0; 3] }.det();
            assert!((det - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pose_params_canonicalize_large_angles() {
        let tau = 2.0 * std::f64::consts::PI;
        let p = PoseParams::new(vec![[3.0 * std::f64::consts::PI, 0.0, 0.0]]).unwrap();
        let a = p.axis_angles()[0];
        let mag = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        assert!(mag < tau);
        assert!((a[0] - std::f64::consts::PI).abs() < 1e-12);
        assert!(matches!(
            PoseParams::new(vec![[f64::NAN, 0.0, 0.0]]),
            Err(BodyError::NonFinitePose { joint: 0 })
        ));
    }

    #[test]
    fn shape_blend_is_linear_in_beta() {
        let spec = line_spec(10, 3);
        let zero = shape_blend(&spec, &[0.0, 0.0]).unwrap();
        assert!(zero.data.iter().all(|&x| x == 0.0));
        let e1 = shape_blend(&spec, &[1.0, 0.0]).unwrap();
        for r in 0..30 {
            assert_eq!(e1.data[r], spec.shape_dirs.at(r, 0));
        }
        let combo = shape_blend(&spec, &[2.0, 3.0]).unwrap();
        for r in 0..30 {
            let want = 2.0 * spec.shape_dirs.at(r, 0) + 3.0 * spec.shape_dirs.at(r, 1);
            assert!((combo.data[r] - want).abs() < 1e-12);
        }
        assert!(shape_blend(&spec, &[1.0]).is_err());
    }

    #[test]
    fn pose_blend_zero_pose_is_exactly_zero() {
        let spec = line_spec(8, 3);
        let out = pose_blend(&spec, &PoseParams::zero(3));
        assert!(out.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn pose_blend_identity_basis_reads_off_feature() {
        // 6 vertices × 3 coords = 18 = 9·(3−1) pose-feature entries, so an
        // identity basis copies the feature into the offsets directly.
        let mut spec = line_spec(6, 3);
        let mut eye = Tensor::zeros(18, 18);
        for i in 0..18 {
            *eye.at_mut(i, i) = 1.0;
        }
        spec.pose_dirs = eye;
        let pose =
            PoseParams::new(vec![[0.0; 3], [0.0, 0.0, std::f64::consts::PI], [0.0; 3]]).unwrap();
        let out = pose_blend(&spec, &pose);
        // vec(diag(−1,−1,1) − I) = [−2,0,0, 0,−2,0, 0,0,0] lands on the
        // first three vertices; the second joint block stays zero.
        let r = rodrigues([0.0, 0.0, std::f64::consts::PI]);
        let want_head = [r[0][0] - 1.0, r[0][1], r[0][2], r[1][0], r[1][1] - 1.0, r[1][2], r[2][0], r[2][1], r[2][2] - 1.0];
        for (k, w) in want_head.iter().enumerate() {
            assert!((out.data[k] - w).abs() < 1e-15);
        }
        for k in 9..18 {
            assert_eq!(out.data[k], 0.0);
        }
    }

    #[test]
    fn pose_blend_is_linear_in_the_feature() {
        let spec = line_spec(7, 4);
        let p1 = random_pose(&spec, 3, 0.8);
        let p2 = random_pose(&spec, 4, 0.8);
        let (f1, f2) = (pose_feature(&p1), pose_feature(&p2));
        // Oracle: dense loop over the basis with the summed feature.
        let mut want = vec![0.0; 3 * spec.vertex_count()];
        for (r, w) in want.iter_mut().enumerate() {
            for c in 0..f1.len() {
                *w += spec.pose_dirs.at(r, c) * (f1[c] + f2[c]);
            }
        }
        let (b1, b2) = (pose_blend(&spec, &p1), pose_blend(&spec, &p2));
        for (k, w) in want.iter().enumerate() {
            assert!((b1.data[k] + b2.data[k] - w).abs() < 1e-12);
        }
    }

    #[test]
    fn regress_joints_one_hot_and_uniform() {
        let spec = line_spec(10, 3);
        let joints = regress_joints(&spec, &spec.template).unwrap();
        // line_spec uses one-hot rows at vertices 0, 4 (floor(9/2)), 9.
        assert_eq!(joints.row(0), spec.template.row(0));
        assert_eq!(joints.row(1), spec.template.row(4));
        assert_eq!(joints.row(2), spec.template.row(9));

        let mut uniform = spec.clone();
        let v = uniform.vertex_count();
        uniform.joint_regressor = Tensor::from_vec(3, v, vec![1.0 / v as f64; 3 * v]);
        let joints = regress_joints(&uniform, &uniform.template).unwrap();
        let centroid: f64 = uniform.template.data.iter().skip(2).step_by(3).sum::<f64>() / v as f64;
        for k in 0..3 {
            assert!((joints.at(k, 2) - centroid).abs() < 1e-12);
        }
    }

    #[test]
    fn regress_joints_matches_dense_oracle() {
        let mut rng = stream(5, Stream::Test);
        let spec = line_spec(10, 3);
        let mut reg = Tensor::zeros(3, 10);
        for r in 0..3 {
            let raw: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for (c, x) in raw.iter().enumerate() {
                *reg.at_mut(r, c) = x / s;
            }
        }
        let mut spec2 = spec.clone();
        spec2.joint_regressor = reg.clone();
        let mut verts = Tensor::zeros(10, 3);
        for x in verts.data.iter_mut() {
            *x = rng.random_range(-1.0..1.0);
        }
        let joints = regress_joints(&spec2, &verts).unwrap();
        for j in 0..3 {
            for k in 0..3 {
                let want: f64 = (0..10).map(|v| reg.at(j, v) * verts.at(v, k)).sum();
                assert!((joints.at(j, k) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lbs_zero_pose_is_bitwise_identity() {
        let spec = line_spec(20, 4);
        let posed = lbs_pose(&spec, &spec.template, &PoseParams::zero(4)).unwrap();
        for (a, b) in posed.data.iter().zip(&spec.template.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn global_rotation_is_rigid_about_root() {
        let spec = line_spec(12, 3);
        let half_pi = std::f64::consts::FRAC_PI_2;
        let pose = PoseParams::new(vec![[0.0, half_pi, 0.0], [0.0; 3], [0.0; 3]]).unwrap();
        let posed = lbs_pose(&spec, &spec.template, &pose).unwrap();
        let r = rodrigues([0.0, half_pi, 0.0]);
        let j0 = [spec.template.at(0, 0), spec.template.at(0, 1), spec.template.at(0, 2)];
        for v in 0..12 {
            let p = [spec.template.at(v, 0), spec.template.at(v, 1), spec.template.at(v, 2)];
            let rel = [p[0] - j0[0], p[1] - j0[1], p[2] - j0[2]];
            let rot = Affine { m: r, t: [0.0; 3] }.apply(rel);
            let want = [rot[0] + j0[0], rot[1] + j0[1], rot[2] + j0[2]];
            for k in 0..3 {
                assert!((posed.at(v, k) - want[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_hot_weights_move_rigidly_with_joints() {
        // Two-joint arm: joint 1 bends by π/2 about x. Vertices bound fully
        // to joint 1 rotate about its location; the oracle composes the
        // world chain by hand.
        let mut spec = line_spec(6, 2);
        let mut w = Tensor::zeros(6, 2);
        for v in 0..6 {
            *w.at_mut(v, if v < 3 { 0 } else { 1 }) = 1.0;
        }
        spec.skin_weights = w;
        let half_pi = std::f64::consts::FRAC_PI_2;
        let pose = PoseParams::new(vec![[0.0; 3], [half_pi, 0.0, 0.0]]).unwrap();
        let posed = lbs_pose(&spec, &spec.template, &pose).unwrap();
        let joints = regress_joints(&spec, &spec.template).unwrap();
        let j1 = [joints.at(1, 0), joints.at(1, 1), joints.at(1, 2)];
        let r = rodrigues([half_pi, 0.0, 0.0]);
        for v in 0..6 {
            let p = [spec.template.at(v, 0), spec.template.at(v, 1), spec.template.at(v, 2)];
            let want = if v < 3 {
                p
            } else {
                let rel = [p[0] - j1[0], p[1] - j1[1], p[2] - j1[2]];
                let rot = Affine { m: r, t: [0.0; 3] }.apply(rel);
                [rot[0] + j1[0], rot[1] + j1[1], rot[2] + j1[2]]
            };
            for k in 0..3 {
                assert!((posed.at(v, k) - want[k]).abs() < 1e-12, "vertex {v}");
            }
        }
    }

    #[test]
    fn unpose_round_trip() {
        let spec = line_spec(20, 4);
        let pose = random_pose(&spec, 21, 1.2);
        let posed = lbs_pose(&spec, &spec.template, &pose).unwrap();
        let back = unpose(&spec, &posed, &pose, &spec.template).unwrap();
        for (a, b) in back.data.iter().zip(&spec.template.data) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn unpose_zero_pose_is_bitwise_identity() {
        let spec = line_spec(9, 3);
        let back = unpose(&spec, &spec.template, &PoseParams::zero(3), &spec.template).unwrap();
        for (a, b) in back.data.iter().zip(&spec.template.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn unpose_reports_singular_vertex() {
        // Equal-weight blend of identity and a half-turn about z is
        // diag(0, 0, 1): rank 2, not invertible.
        let mut spec = line_spec(4, 2);
        spec.skin_weights = Tensor::from_vec(4, 2, vec![0.5; 8]);
        // Put both joints at the same spot so translations cancel.
        spec.joint_regressor = {
            let mut r = Tensor::zeros(2, 4);
            *r.at_mut(0, 0) = 1.0;
            *r.at_mut(1, 0) = 1.0;
            r
        };
        let pose = PoseParams::new(vec![[0.0; 3], [0.0, 0.0, std::f64::consts::PI]]).unwrap();
        match unpose(&spec, &spec.template, &pose, &spec.template) {
            Err(BodyError::SingularTransform { vertex: 0, .. }) => {}
            other => panic!("expected singular-transform error, got {other:?}"),
        }
    }

    #[test]
    fn extract_displacement_subtracts_and_masks() {
        let spec = line_spec(6, 2);
        let mut clothed = spec.template.clone();
        for v in 0..6 {
            clothed.row_mut(v)[2] += 0.01;
        }
        let mask = VertexMask::new(vec![true, true, true, true, false, false]).unwrap();
        let field = extract_displacement(&clothed, &spec.template, &mask, PoseParams::zero(2), ClothingType::LongLong)
            .unwrap();
        for v in 0..4 {
            assert!((field.offsets.at(v, 2) - 0.01).abs() < 1e-15);
            assert_eq!(field.offsets.at(v, 0), 0.0);
        }
        for v in 4..6 {
            assert_eq!(field.offsets.row(v), [0.0, 0.0, 0.0]);
        }

        // Random pair against the element-wise oracle.
        let mut rng = stream(9, Stream::Test);
        let mut a = Tensor::zeros(6, 3);
        let mut b = Tensor::zeros(6, 3);
        for (x, y) in a.data.iter_mut().zip(b.data.iter_mut()) {
            *x = rng.random_range(-1.0..1.0);
            *y = rng.random_range(-1.0..1.0);
        }
        let mask = VertexMask::all(6);
        let field =
            extract_displacement(&a, &b, &mask, PoseParams::zero(2), ClothingType::ShortLong).unwrap();
        for k in 0..18 {
            assert_eq!(field.offsets.data[k], a.data[k] - b.data[k]);
        }
    }

    #[test]
    fn clothed_template_is_additive() {
        let spec = line_spec(8, 3);
        let pose = random_pose(&spec, 31, 0.7);
        let beta = [0.5, -0.3];
        let zero = DisplacementField::zero(8, pose.clone(), ClothingType::ShortShort);
        let base = clothed_template(&spec, &beta, &pose, &zero).unwrap();
        // Zero everything → template.
        let plain = clothed_template(&spec, &[0.0, 0.0], &PoseParams::zero(3), &zero).unwrap();
        for (a, b) in plain.data.iter().zip(&spec.template.data) {
            assert_eq!(a, b);
        }
        // Adding offsets afterwards equals baking them into the field.
        let mut field = zero.clone();
        for x in field.offsets.data.iter_mut() {
            *x = 0.02;
        }
        let shifted = clothed_template(&spec, &beta, &pose, &field).unwrap();
        for (s, b) in shifted.data.iter().zip(&base.data) {
            assert!((s - (b + 0.02)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_displacement_clothed_pipeline_is_bitwise_minimal() {
        let spec = line_spec(16, 4);
        let pose = random_pose(&spec, 41, 1.0);
        let beta = [0.4, 0.1];
        let zero = DisplacementField::zero(16, pose.clone(), ClothingType::LongShort);
        let clothed = pose_clothed(&spec, &beta, &pose, &zero).unwrap();
        let minimal = minimal_body(&spec, &beta, &pose).unwrap();
        for (a, b) in clothed.data.iter().zip(&minimal.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rest_pose_clothing_adds_raw_offsets() {
        let spec = line_spec(10, 3);
        let mut field = DisplacementField::zero(10, PoseParams::zero(3), ClothingType::LongLong);
        for (k, x) in field.offsets.data.iter_mut().enumerate() {
            *x = 0.001 * k as f64;
        }
        let posed = pose_clothed(&spec, &[0.0, 0.0], &PoseParams::zero(3), &field).unwrap();
        for (k, (a, t)) in posed.data.iter().zip(&spec.template.data).enumerate() {
            assert!((a - (t + 0.001 * k as f64)).abs() < 1e-15);
        }
    }

    #[test]
    fn displacement_round_trip_through_posing() {
        // Dress the body, pose it, unpose the scan against the minimal
        // body, extract — the planted offsets come back. This is the exact
        // loop the dataset generator runs.
        let spec = line_spec(20, 4);
        let pose = random_pose(&spec, 51, 1.1);
        let beta = [0.2, -0.4];
        let mask = VertexMask::new((0..20).map(|v| v % 5 != 0).collect()).unwrap();
        let mut field = DisplacementField::zero(20, pose.clone(), ClothingType::ShortLong);
        let mut rng = stream(52, Stream::Test);
        for x in field.offsets.data.iter_mut() {
            *x = rng.random_range(-0.02..0.02);
        }
        field.offsets = {
            let mut o = field.offsets.clone();
            mask.zero_excluded(&mut o);
            o
        };

        let clothed_posed = pose_clothed(&spec, &beta, &pose, &field).unwrap();
        let minimal_posed = minimal_body(&spec, &beta, &pose).unwrap();
        let minimal_rest = minimal_rest_shape(&spec, &beta).unwrap();
        let clothed_unposed = unpose(&spec, &clothed_posed, &pose, &minimal_rest).unwrap();
        let minimal_unposed = unpose(&spec, &minimal_posed, &pose, &minimal_rest).unwrap();
        let recovered =
            extract_displacement(&clothed_unposed, &minimal_unposed, &mask, pose.clone(), field.clothing_type)
                .unwrap();
        for (a, b) in recovered.offsets.data.iter().zip(&field.offsets.data) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn spec_validation_rejects_bad_inputs() {
        let spec = line_spec(6, 3);
        // Cycle / wrong order.
        let mut parents = spec.parents.clone();
        parents[1] = 2;
        assert!(matches!(
            BodyModelSpec::new(
                spec.template.clone(),
                spec.shape_dirs.clone(),
                spec.pose_dirs.clone(),
                spec.joint_regressor.clone(),
                spec.skin_weights.clone(),
                parents,
                spec.retained_joints.clone()
            ),
            Err(BodyError::BadSkeleton(_))
        ));
        // Weight row that does not sum to 1.
        let mut w = spec.skin_weights.clone();
        *w.at_mut(2, 0) += 0.5;
        assert!(matches!(
            BodyModelSpec::new(
                spec.template.clone(),
                spec.shape_dirs.clone(),
                spec.pose_dirs.clone(),
                spec.joint_regressor.clone(),
                w,
                spec.parents.clone(),
                spec.retained_joints.clone()
            ),
            Err(BodyError::BadSkinWeights { row: 2, .. })
        ));
        // Regressor row off.
        let mut reg = spec.joint_regressor.clone();
        *reg.at_mut(1, 0) += 0.1;
        assert!(matches!(
            BodyModelSpec::new(
                spec.template.clone(),
                spec.shape_dirs.clone(),
                spec.pose_dirs.clone(),
                reg,
                spec.skin_weights.clone(),
                spec.parents.clone(),
                spec.retained_joints.clone()
            ),
            Err(BodyError::BadRegressor { row: 1, .. })
        ));
    }

    #[test]
    fn spec_save_load_round_trip_is_exact() {
        let spec = line_spec(12, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("body.bin");
        spec.save(&path).unwrap();
        let loaded = BodyModelSpec::load(&path).unwrap();
        assert_eq!(loaded.parents, spec.parents);
        assert_eq!(loaded.retained_joints, spec.retained_joints);
        for (a, b) in [
            (&loaded.template, &spec.template),
            (&loaded.shape_dirs, &spec.shape_dirs),
            (&loaded.pose_dirs, &spec.pose_dirs),
            (&loaded.joint_regressor, &spec.joint_regressor),
            (&loaded.skin_weights, &spec.skin_weights),
        ] {
            assert_eq!((a.rows, a.cols), (b.rows, b.cols));
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn clothing_labels_round_trip() {
        for c in ClothingType::ALL {
            assert_eq!(ClothingType::from_label(c.label()), Some(c));
            assert_eq!(c.one_hot().iter().sum::<f64>(), 1.0);
            assert_eq!(c.one_hot()[c.index()], 1.0);
        }
        assert_eq!(ClothingType::from_label("cape"), None);
        assert!(VertexMask::new(vec![false; 4]).is_err());
    }
}
