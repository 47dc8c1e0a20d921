//! On-disk formats: the shared binary-container framing and mesh files.
//!
//! Every binary artifact this crate writes (sampling hierarchies, body
//! specs, checkpoints, dataset records) uses the same framing: an 8-byte
//! magic tag, a little-endian `u64` header length, a JSON header, then
//! little-endian `f64` payload arrays in the order the header declares.
//! JSON keeps the self-describing parts human-inspectable (`python -c
//! "import json,sys; ..."` can read any header) while bulk numbers stay
//! compact and bit-exact.
//!
//! Mesh import/export (OBJ, binary PLY) also lives here; vertex order is
//! preserved in both directions.

use std::io::{Read, Write};

/// Invalid-data error with a message; the shared shape for format errors.
pub(crate) fn bad_data(msg: impl Into<String>) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, msg.into())
}

/// Write container framing: magic, header length, header JSON.
pub(crate) fn write_container_header<W: Write, T: serde::Serialize>(
    w: &mut W,
    magic: &[u8; 8],
    header: &T,
) -> std::io::Result<()> {
    let bytes = serde_json::to_vec(header).map_err(|e| bad_data(e.to_string()))?;
    w.write_all(magic)?;
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(&bytes)
}

/// Read container framing; errors if the magic does not match.
pub(crate) fn read_container_header<R: Read, T: serde::de::DeserializeOwned>(
    r: &mut R,
    magic: &[u8; 8],
) -> std::io::Result<T> {
    let mut found = [0u8; 8];
    r.read_exact(&mut found)?;
    if &found != magic {
        return Err(bad_data(format!(
            "bad magic: expected {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&found)
        )));
    }
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8)?;
    let len = u64::from_le_bytes(len8) as usize;
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)?;
    serde_json::from_slice(&bytes).map_err(|e| bad_data(format!("bad header: {e}")))
}

/// Write a flat `f64` array little-endian.
pub(crate) fn write_f64_slice<W: Write>(w: &mut W, values: &[f64]) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Read `n` little-endian `f64` values.
pub(crate) fn read_f64_vec<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

use std::fs;
use std::path::Path;

use crate::body::{BodyModelSpec, VertexMask};
use crate::graph::{build_topology, TopologyGraph};
use crate::net::{ClothingNet, NetConfig};
use crate::tensor::Tensor;
use crate::train::build_hierarchy_for;

fn check_mesh(positions: &Tensor, faces: &[[u32; 3]]) -> Result<(), String> {
    if positions.cols != 3 {
        return Err(format!("positions are {}×{}, want V×3", positions.rows, positions.cols));
    }
    for (fi, f) in faces.iter().enumerate() {
        for &v in f {
            if v as usize >= positions.rows {
                return Err(format!("face {fi} references vertex {v} of {}", positions.rows));
            }
        }
    }
    Ok(())
}

/// Write an ASCII OBJ: `v x y z` lines (nine decimal places) followed by
/// 1-indexed `f` triangles. Output bytes are a pure function of the inputs.
pub fn write_obj(path: &Path, positions: &Tensor, faces: &[[u32; 3]]) -> std::io::Result<()> {
    use std::fmt::Write as _;
    check_mesh(positions, faces).map_err(|m| bad_data(format!("{}: {m}", path.display())))?;
    let mut out = String::with_capacity(positions.rows * 48 + faces.len() * 18);
    for v in 0..positions.rows {
        let r = positions.row(v);
        writeln!(out, "v {:.9} {:.9} {:.9}", r[0], r[1], r[2]).unwrap();
    }
    for f in faces {
        writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).unwrap();
    }
    fs::write(path, out)
}

/// Read an ASCII OBJ: `v` and `f` records (`vt`/`vn`/materials ignored).
/// Faces may use `i`, `i/j`, or `i//k` references and are fan-triangulated
/// when they have more than three corners.
pub fn read_obj(path: &Path) -> std::io::Result<(Tensor, Vec<[u32; 3]>)> {
    let text = fs::read_to_string(path)?;
    let ctx = |line: usize, msg: String| bad_data(format!("{}:{line}: {msg}", path.display()));
    let mut coords: Vec<f64> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let ln = ln + 1;
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                let mut xyz = [0.0; 3];
                for x in xyz.iter_mut() {
                    let t = tok.next().ok_or_else(|| ctx(ln, "vertex needs 3 coordinates".into()))?;
                    *x = t.parse::<f64>().map_err(|_| ctx(ln, format!("bad coordinate {t:?}")))?;
                }
                coords.extend_from_slice(&xyz);
            }
            Some("f") => {
                let mut idx: Vec<u32> = Vec::with_capacity(4);
                for t in tok {
                    let first = t.split('/').next().unwrap_or("");
                    let i = first
                        .parse::<i64>()
                        .map_err(|_| ctx(ln, format!("bad face index {t:?}")))?;
                    if i < 1 {
                        return Err(ctx(ln, format!("face index {i} must be positive")));
                    }
                    let i = (i - 1) as u64;
                    if i >= (coords.len() / 3) as u64 {
                        return Err(ctx(ln, format!("face references vertex {} of {}", i + 1, coords.len() / 3)));
                    }
                    idx.push(i as u32);
                }
                if idx.len() < 3 {
                    return Err(ctx(ln, "face needs at least 3 corners".into()));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    let v = coords.len() / 3;
    Ok((Tensor::from_vec(v, 3, coords), faces))
}

/// A mesh read back from PLY: positions, triangles, and any per-vertex
/// scalar attributes beyond the coordinates.
#[derive(Clone, Debug)]
pub struct PlyMesh {
    pub positions: Tensor,
    pub faces: Vec<[u32; 3]>,
    pub scalars: Vec<(String, Vec<f64>)>,
}

fn valid_ply_name(name: &str) -> bool {
    !name.is_empty()
        && !name.as_bytes()[0].is_ascii_digit()
        && name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_')
}

/// Write a binary little-endian PLY with double-precision positions and
/// optional named per-vertex scalar attributes (each of length V) —
/// the vehicle for visualizing per-vertex fields on a mesh. Byte-exact
/// across runs.
pub fn write_ply(
    path: &Path,
    positions: &Tensor,
    faces: &[[u32; 3]],
    scalars: &[(&str, &[f64])],
) -> std::io::Result<()> {
    let ctx = |m: String| bad_data(format!("{}: {m}", path.display()));
    check_mesh(positions, faces).map_err(ctx)?;
    for (name, vals) in scalars {
        if !valid_ply_name(name) {
            return Err(ctx(format!("invalid attribute name {name:?}")));
        }
        if vals.len() != positions.rows {
            return Err(ctx(format!(
                "attribute {name} has {} values for {} vertices",
                vals.len(),
                positions.rows
            )));
        }
    }
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(b"ply\nformat binary_little_endian 1.0\n");
    out.extend_from_slice(format!("element vertex {}\n", positions.rows).as_bytes());
    out.extend_from_slice(b"property double x\nproperty double y\nproperty double z\n");
    for (name, _) in scalars {
        out.extend_from_slice(format!("property double {name}\n").as_bytes());
    }
    out.extend_from_slice(format!("element face {}\n", faces.len()).as_bytes());
    out.extend_from_slice(b"property list uchar uint vertex_indices\nend_header\n");
    for v in 0..positions.rows {
        for &x in positions.row(v) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for (_, vals) in scalars {
            out.extend_from_slice(&vals[v].to_le_bytes());
        }
    }
    for f in faces {
        out.push(3);
        for &i in f {
            out.extend_from_slice(&i.to_le_bytes());
        }
    }
    fs::write(path, out)
}

/// Read a binary little-endian PLY of the subset this crate writes:
/// float/double vertex properties including `x`,`y`,`z`, triangle faces
/// with a `uchar` count and 4-byte indices. Extra scalar properties come
/// back by name.
pub fn read_ply(path: &Path) -> std::io::Result<PlyMesh> {
    let bytes = fs::read(path)?;
    let ctx = |m: String| bad_data(format!("{}: {m}", path.display()));
    let end_tag = b"end_header\n";
    let header_end = bytes
        .windows(end_tag.len())
        .position(|w| w == end_tag)
        .ok_or_else(|| ctx("missing end_header".into()))?
        + end_tag.len();
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| ctx("header is not UTF-8".into()))?;

    #[derive(PartialEq)]
    enum Elem {
        None,
        Vertex,
        Face,
        Other,
    }
    let mut elem = Elem::None;
    let mut n_vertex = 0usize;
    let mut n_face = 0usize;
    // (name, is_double) per vertex property, in file order.
    let mut vprops: Vec<(String, bool)> = Vec::new();
    let mut face_list_ok = false;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(ctx("not a PLY file".into()));
    }
    for line in lines {
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                let rest: Vec<&str> = tok.collect();
                if rest != ["binary_little_endian", "1.0"] {
                    return Err(ctx(format!("unsupported format {:?}", rest.join(" "))));
                }
            }
            Some("comment") => {}
            Some("element") => {
                let kind = tok.next().unwrap_or("");
                let count: usize = tok
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| ctx(format!("bad element line {line:?}")))?;
                elem = match kind {
                    "vertex" => {
                        n_vertex = count;
                        Elem::Vertex
                    }
                    "face" => {
                        n_face = count;
                        Elem::Face
                    }
                    _ => {
                        if count != 0 {
                            return Err(ctx(format!("unsupported element {kind:?}")));
                        }
                        Elem::Other
                    }
                };
            }
            Some("property") => match elem {
                Elem::Vertex => {
                    let ty = tok.next().unwrap_or("");
                    let name = tok.next().unwrap_or("");
                    let is_double = match ty {
                        "double" | "float64" => true,
                        "float" | "float32" => false,
                        _ => return Err(ctx(format!("unsupported vertex property type {ty:?}"))),
                    };
                    vprops.push((name.to_string(), is_double));
                }
                Elem::Face => {
                    let spec: Vec<&str> = tok.collect();
                    let [kw, count_ty, idx_ty, _name] = spec.as_slice() else {
                        return Err(ctx(format!("unsupported face property {line:?}")));
                    };
                    if *kw != "list"
                        || !matches!(*count_ty, "uchar" | "uint8")
                        || !matches!(*idx_ty, "uint" | "int" | "uint32" | "int32")
                    {
                        return Err(ctx(format!("unsupported face property {line:?}")));
                    }
                    face_list_ok = true;
                }
                _ => return Err(ctx("property outside vertex/face element".into())),
            },
            Some("end_header") => break,
            Some(other) => return Err(ctx(format!("unsupported header line {other:?}"))),
            None => {}
        }
    }
    if n_face > 0 && !face_list_ok {
        return Err(ctx("face element lacks a vertex_indices list".into()));
    }
    for need in ["x", "y", "z"] {
        if !vprops.iter().any(|(n, _)| n == need) {
            return Err(ctx(format!("vertex element lacks property {need}")));
        }
    }

    let mut off = header_end;
    let take = |off: &mut usize, n: usize| -> std::io::Result<usize> {
        let start = *off;
        *off += n;
        if *off > bytes.len() {
            return Err(ctx("file truncated".into()));
        }
        Ok(start)
    };
    let mut positions = Tensor::zeros(n_vertex, 3);
    let mut scalars: Vec<(String, Vec<f64>)> = vprops
        .iter()
        .filter(|(n, _)| n != "x" && n != "y" && n != "z")
        .map(|(n, _)| (n.clone(), Vec::with_capacity(n_vertex)))
        .collect();
    for v in 0..n_vertex {
        let mut extra = 0usize;
        for (name, is_double) in &vprops {
            let val = if *is_double {
                let s = take(&mut off, 8)?;
                f64::from_le_bytes(bytes[s..s + 8].try_into().unwrap())
            } else {
                let s = take(&mut off, 4)?;
                f32::from_le_bytes(bytes[s..s + 4].try_into().unwrap()) as f64
            };
            match name.as_str() {
                "x" => *positions.at_mut(v, 0) = val,
                "y" => *positions.at_mut(v, 1) = val,
                "z" => *positions.at_mut(v, 2) = val,
                _ => {
                    scalars[extra].1.push(val);
                    extra += 1;
                }
            }
        }
    }
    let mut faces = Vec::with_capacity(n_face);
    for _ in 0..n_face {
        let s = take(&mut off, 1)?;
        let n = bytes[s] as usize;
        if n != 3 {
            return Err(ctx(format!("non-triangular face with {n} corners")));
        }
        let mut f = [0u32; 3];
        for x in f.iter_mut() {
            let s = take(&mut off, 4)?;
            *x = u32::from_le_bytes(bytes[s..s + 4].try_into().unwrap());
            if *x as usize >= n_vertex {
                return Err(ctx(format!("face references vertex {x} of {n_vertex}")));
            }
        }
        faces.push(f);
    }
    if off != bytes.len() {
        return Err(ctx(format!("{} trailing bytes after face data", bytes.len() - off)));
    }
    Ok(PlyMesh { positions, faces, scalars })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MNTLCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorShape {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: NetConfig,
    parents: Vec<i64>,
    retained_joints: Vec<usize>,
    mask: Vec<bool>,
    faces: Vec<[u32; 3]>,
    tensors: Vec<TensorShape>,
}

/// Everything needed to rebuild a trained model: the body it dresses, the
/// clothed-region mask, the mesh topology, and the network weights.
#[derive(Debug)]
pub struct Checkpoint {
    pub body: BodyModelSpec,
    pub mask: VertexMask,
    pub faces: Vec<[u32; 3]>,
    pub config: NetConfig,
    pub net_params: Vec<(String, Tensor)>,
}

const BODY_TENSORS: [&str; 5] =
    ["body.template", "body.shape_dirs", "body.pose_dirs", "body.joint_regressor", "body.skin_weights"];

/// Serialize a model and its body to one file: the shared container framing,
/// a JSON header describing every tensor, then all tensor payloads as
/// little-endian f64 in header order. Bitwise-deterministic.
pub fn save_checkpoint(
    path: &Path,
    body: &BodyModelSpec,
    mask: &VertexMask,
    faces: &[[u32; 3]],
    net: &ClothingNet,
) -> std::io::Result<()> {
    let body_fields: [&Tensor; 5] = [
        &body.template,
        &body.shape_dirs,
        &body.pose_dirs,
        &body.joint_regressor,
        &body.skin_weights,
    ];
    let mut tensors: Vec<TensorShape> = BODY_TENSORS
        .iter()
        .zip(body_fields)
        .map(|(name, t)| TensorShape { name: name.to_string(), rows: t.rows, cols: t.cols })
        .collect();
    for (name, t) in net.params.iter() {
        tensors.push(TensorShape { name: format!("net.{name}"), rows: t.rows, cols: t.cols });
    }
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config: net.config.clone(),
        parents: body.parents.clone(),
        retained_joints: body.retained_joints.clone(),
        mask: (0..mask.len()).map(|v| mask.is_included(v)).collect(),
        faces: faces.to_vec(),
        tensors,
    };
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    write_container_header(&mut w, CHECKPOINT_MAGIC, &header)?;
    for t in body_fields {
        write_f64_slice(&mut w, &t.data)?;
    }
    for (_, t) in net.params.iter() {
        write_f64_slice(&mut w, &t.data)?;
    }
    use std::io::Write as _;
    w.flush()
}

/// Read back a checkpoint written by [`save_checkpoint`], validating the
/// magic, version, and every tensor shape before accepting the payload.
pub fn load_checkpoint(path: &Path) -> std::io::Result<Checkpoint> {
    let ctx = |m: String| bad_data(format!("{}: {m}", path.display()));
    let mut r = std::io::BufReader::new(fs::File::open(path)?);
    let header: CheckpointHeader = read_container_header(&mut r, CHECKPOINT_MAGIC)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(ctx(format!("unsupported checkpoint version {}", header.version)));
    }
    if header.tensors.len() < BODY_TENSORS.len() {
        return Err(ctx("checkpoint lists too few tensors".into()));
    }
    let mut payload: Vec<(String, Tensor)> = Vec::with_capacity(header.tensors.len());
    for shape in &header.tensors {
        let data = read_f64_vec(&mut r, shape.rows * shape.cols)
            .map_err(|e| ctx(format!("reading tensor {}: {e}", shape.name)))?;
        if data.iter().any(|x| !x.is_finite()) {
            return Err(ctx(format!("tensor {} contains non-finite values", shape.name)));
        }
        payload.push((shape.name.clone(), Tensor::from_vec(shape.rows, shape.cols, data)));
    }
    use std::io::Read as _;
    if r.read(&mut [0u8])? != 0 {
        return Err(ctx("trailing bytes after tensor payload".into()));
    }

    let mut body_fields = Vec::with_capacity(BODY_TENSORS.len());
    for (want, (name, t)) in BODY_TENSORS.iter().zip(payload.drain(..BODY_TENSORS.len())) {
        if name != *want {
            return Err(ctx(format!("expected tensor {want}, found {name}")));
        }
        body_fields.push(t);
    }
    let mut it = body_fields.into_iter();
    let body = BodyModelSpec::new(
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
        header.parents,
        header.retained_joints,
    )
    .map_err(|e| ctx(format!("invalid body model: {e}")))?;
    if header.mask.len() != body.template.rows {
        return Err(ctx(format!(
            "mask covers {} vertices, body has {}",
            header.mask.len(),
            body.template.rows
        )));
    }
    let mask = VertexMask::new(header.mask).map_err(|e| ctx(format!("invalid mask: {e}")))?;
    for (fi, f) in header.faces.iter().enumerate() {
        for &v in f {
            if v as usize >= body.template.rows {
                return Err(ctx(format!("face {fi} references vertex {v} of {}", body.template.rows)));
            }
        }
    }
    let net_params: Vec<(String, Tensor)> = payload
        .into_iter()
        .map(|(name, t)| {
            let trimmed = name
                .strip_prefix("net.")
                .ok_or_else(|| ctx(format!("unexpected tensor {name} in network section")))?;
            Ok((trimmed.to_string(), t))
        })
        .collect::<std::io::Result<_>>()?;
    Ok(Checkpoint { body, mask, faces: header.faces, config: header.config, net_params })
}

impl Checkpoint {
    /// Rebuild the mesh topology and the network from the stored pieces.
    pub fn instantiate(&self) -> std::io::Result<(TopologyGraph, ClothingNet)> {
        let graph = build_topology(&self.faces, self.body.template.rows)
            .map_err(|e| bad_data(format!("checkpoint topology: {e}")))?;
        let hierarchy = build_hierarchy_for(&self.body, &graph)
            .map_err(|e| bad_data(format!("checkpoint hierarchy: {e}")))?;
        let net = ClothingNet::from_params(
            self.config.clone(),
            self.body.retained_joints.len(),
            hierarchy,
            self.net_params.clone(),
        )
        .map_err(|e| bad_data(format!("checkpoint network: {e}")))?;
        Ok((graph, net))
    }
}
