//! Numerical gradient verification: analytic tape gradients checked against
//! central finite differences, plus the standard layer-by-layer battery the
//! test suites run on a small topology.
//!
//! The relative error of an analytic/numeric pair `(a, f)` is
//! `|a − f| / max(|a|, |f|, 1)`; the floor of 1 keeps near-zero gradients
//! from amplifying roundoff into spurious failures.

use std::sync::Arc;

use rand::Rng;

use crate::data::shapes::cylinder_tube;
use crate::graph::{build_topology, LaplacianMode, ScaledLaplacian, TopologyGraph};
use crate::net::{build_reparameterize, BoundNet, ClothingNet, NetConfig};
use crate::rng::{stream, Stream};
use crate::sampling::build_sampling_hierarchy;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::{
    edge_incidence, loss_edge, loss_gan_discriminator, loss_gan_generator, loss_kl, loss_recon,
    weighted_total, LossWeights,
};

/// Central-difference step matched to float64 precision.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    /// Scalar parameter entries differenced.
    pub entries: usize,
    /// Worst relative error over all entries.
    pub max_rel: f64,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Check a scalar-valued graph built by `build` from the given parameter
/// tensors: one analytic backward pass, then every entry of every parameter
/// is centrally differenced.
pub fn check_scalar_graph(
    name: &str,
    params: &[Tensor],
    h: f64,
    build: impl Fn(&mut Tape, &[Var]) -> Var,
) -> GradReport {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = build(&mut tape, &vars);
    assert_eq!(tape.value(root).len(), 1, "{name}: gradcheck root must be scalar");
    tape.backward(root);
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.rows, p.cols)))
        .collect();

    let mut work = params.to_vec();
    let eval = |tape: &mut Tape, ps: &[Tensor]| -> f64 {
        tape.reset();
        let vs: Vec<Var> = ps.iter().map(|p| tape.input(p.clone())).collect();
        let r = build(tape, &vs);
        tape.value(r).data[0]
    };

    let mut max_rel: f64 = 0.0;
    let mut entries = 0usize;
    for pi in 0..work.len() {
        for ei in 0..work[pi].len() {
            let orig = work[pi].data[ei];
            work[pi].data[ei] = orig + h;
            let fp = eval(&mut tape, &work);
            work[pi].data[ei] = orig - h;
            let fm = eval(&mut tape, &work);
            work[pi].data[ei] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let rel = rel_error(analytic[pi].data[ei], fd);
            if rel > max_rel {
                max_rel = rel;
            }
            entries += 1;
        }
    }
    GradReport { name: name.into(), entries, max_rel }
}

/// Check a scalar-valued graph over a network's full parameter registry.
/// `build` receives the net and a bound view and must rebuild the same
/// forward pass on every call (inputs it captures stay fixed).
pub fn check_net_graph(
    name: &str,
    net: &mut ClothingNet,
    h: f64,
    build: impl Fn(&mut Tape, &ClothingNet, &BoundNet) -> Var,
) -> GradReport {
    let mut tape = Tape::new();
    let analytic: Vec<Tensor> = {
        let bound = net.bind(&mut tape, |_| true);
        let root = build(&mut tape, net, &bound);
        assert_eq!(tape.value(root).len(), 1, "{name}: gradcheck root must be scalar");
        tape.backward(root);
        net.gradients(&tape, &bound)
            .into_iter()
            .zip(net.params.iter())
            .map(|(g, (_, p))| g.cloned().unwrap_or_else(|| Tensor::zeros(p.rows, p.cols)))
            .collect()
    };

    let sizes: Vec<usize> = net.params.iter().map(|(_, t)| t.len()).collect();
    let mut max_rel: f64 = 0.0;
    let mut entries = 0usize;
    for (pi, &len) in sizes.iter().enumerate() {
        for ei in 0..len {
            let orig = set_entry(net, pi, ei, None, h);
            let fp = eval_net(&mut tape, net, &build);
            set_entry(net, pi, ei, Some(orig - h), 0.0);
            let fm = eval_net(&mut tape, net, &build);
            set_entry(net, pi, ei, Some(orig), 0.0);
            let fd = (fp - fm) / (2.0 * h);
            let rel = rel_error(analytic[pi].data[ei], fd);
            if rel > max_rel {
                max_rel = rel;
            }
            entries += 1;
        }
    }
    GradReport { name: name.into(), entries, max_rel }
}

/// Write one registry entry: with `value` given, store it; otherwise add
/// `bump` to the current value. Returns the entry's previous value.
fn set_entry(net: &mut ClothingNet, pi: usize, ei: usize, value: Option<f64>, bump: f64) -> f64 {
    let (_, t) = net.params.iter_mut().nth(pi).expect("parameter index in range");
    let orig = t.data[ei];
    t.data[ei] = value.unwrap_or(orig + bump);
    orig
}

fn eval_net(
    tape: &mut Tape,
    net: &ClothingNet,
    build: &impl Fn(&mut Tape, &ClothingNet, &BoundNet) -> Var,
) -> f64 {
    tape.reset();
    // All parameters frozen: the forward pass alone is evaluated.
    let bound = net.bind(tape, |_| false);
    let r = build(tape, net, &bound);
    tape.value(r).data[0]
}

fn rand_tensor(rng: &mut impl Rng, rows: usize, cols: usize, lim: f64) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for x in t.data.iter_mut() {
        *x = rng.random_range(-lim..lim);
    }
    t
}

/// Random tensor with entries bounded away from zero, for ops with a kink
/// at the origin (|·|, leaky ReLU) where finite differences would straddle
/// the non-smooth point.
fn rand_tensor_offzero(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for x in t.data.iter_mut() {
        let mag = rng.random_range(0.05..1.0);
        *x = if rng.random_bool(0.5) { mag } else { -mag };
    }
    t
}

fn small_graph() -> TopologyGraph {
    let (_, faces) = cylinder_tube(6, 5, 0.5, 2.0);
    build_topology(&faces, 30).unwrap()
}

/// The standard per-layer battery on a ≤50-vertex topology: Chebyshev
/// convolutions of order 0, 2, and 3, group normalization, leaky ReLU, a
/// fully connected layer, a residual block, down-/up-sampling, the four
/// losses, elementwise primitives, and the full encode→decode→loss
/// composite for both the generator and discriminator objectives.
pub fn standard_suite(seed: u64) -> Vec<GradReport> {
    let mut rng = stream(seed, Stream::Test);
    let h = DEFAULT_STEP;
    let mut reports = Vec::new();

    let graph = small_graph();
    let lap = ScaledLaplacian::build(&graph, LaplacianMode::SymmetricNormalized).unwrap();
    let lmat = Arc::clone(&lap.matrix);
    let v = graph.vertex_count;

    // Chebyshev convolution at the orders the model uses, plus order 0.
    for k in [0usize, 2, 3] {
        let x = rand_tensor(&mut rng, 2 * v, 3, 1.0);
        let w = rand_tensor(&mut rng, (k + 1) * 3, 4, 1.0);
        let probe = rand_tensor(&mut rng, 2 * v, 4, 1.0);
        let m = Arc::clone(&lmat);
        reports.push(check_scalar_graph(
            &format!("cheb_conv_k{k}"),
            &[x, w],
            h,
            move |t, vars| {
                let y = t.cheb_conv(&m, vars[0], vars[1], k, 2);
                let p = t.input(probe.clone());
                let yp = t.mul(y, p);
                t.sum(yp)
            },
        ));
    }

    // Group normalization over two sample blocks and two channel groups.
    {
        let x = rand_tensor(&mut rng, 6, 8, 1.0);
        let gamma = rand_tensor(&mut rng, 1, 8, 1.0);
        let beta = rand_tensor(&mut rng, 1, 8, 1.0);
        let probe = rand_tensor(&mut rng, 6, 8, 1.0);
        reports.push(check_scalar_graph("group_norm", &[x, gamma, beta], h, move |t, vars| {
            let y = t.group_norm(vars[0], vars[1], vars[2], 2, 2, 1e-5);
            let p = t.input(probe.clone());
            let yp = t.mul(y, p);
            t.sum(yp)
        }));
    }

    // Leaky ReLU away from its kink.
    {
        let x = rand_tensor_offzero(&mut rng, 5, 7);
        let probe = rand_tensor(&mut rng, 5, 7, 1.0);
        reports.push(check_scalar_graph("leaky_relu", &[x], h, move |t, vars| {
            let y = t.leaky_relu(vars[0], 0.1);
            let p = t.input(probe.clone());
            let yp = t.mul(y, p);
            t.sum(yp)
        }));
    }

    // Fully connected layer: matmul plus broadcast bias row.
    {
        let x = rand_tensor(&mut rng, 4, 6, 1.0);
        let w = rand_tensor(&mut rng, 6, 5, 1.0);
        let b = rand_tensor(&mut rng, 1, 5, 1.0);
        let probe = rand_tensor(&mut rng, 4, 5, 1.0);
        reports.push(check_scalar_graph("fully_connected", &[x, w, b], h, move |t, vars| {
            let y = t.matmul(vars[0], vars[1]);
            let yb = t.add_row(y, vars[2]);
            let p = t.input(probe.clone());
            let yp = t.mul(yb, p);
            t.sum(yp)
        }));
    }

    // Residual block in the decoder's shape: condition concat, three
    // norm/activation stages, a Chebyshev filter, and a learned skip.
    {
        let cin = 4;
        let half = 3;
        let cout = 6;
        let cond = 5;
        let x = rand_tensor(&mut rng, 2 * v, cin, 1.0);
        let z = rand_tensor(&mut rng, 2, cond, 1.0);
        let w1 = rand_tensor(&mut rng, cin + cond, half, 1.0);
        let b1 = rand_tensor(&mut rng, 1, half, 0.5);
        let wc = rand_tensor(&mut rng, 3 * half, half, 1.0);
        let w2 = rand_tensor(&mut rng, half, cout, 1.0);
        let b2 = rand_tensor(&mut rng, 1, cout, 0.5);
        let ws = rand_tensor(&mut rng, cin, cout, 1.0);
        let g1 = rand_tensor(&mut rng, 1, cin + cond, 1.0);
        let be1 = rand_tensor(&mut rng, 1, cin + cond, 1.0);
        let g2 = rand_tensor(&mut rng, 1, half, 1.0);
        let be2 = rand_tensor(&mut rng, 1, half, 1.0);
        let g3 = rand_tensor(&mut rng, 1, half, 1.0);
        let be3 = rand_tensor(&mut rng, 1, half, 1.0);
        let probe = rand_tensor(&mut rng, 2 * v, cout, 1.0);
        let m = Arc::clone(&lmat);
        let params = [x, z, w1, b1, wc, w2, b2, ws, g1, be1, g2, be2, g3, be3];
        reports.push(check_scalar_graph("residual_block", &params, h, move |t, vars| {
            let &[x, z, w1, b1, wc, w2, b2, ws, g1, be1, g2, be2, g3, be3] = vars else {
                unreachable!()
            };
            let zt = t.tile_rows(z, v);
            let xc = t.concat_cols(x, zt);
            let n1 = t.group_norm(xc, g1, be1, 3, 2, 1e-5);
            let a1 = t.leaky_relu(n1, 0.1);
            let l1 = t.matmul(a1, w1);
            let l1b = t.add_row(l1, b1);
            let n2 = t.group_norm(l1b, g2, be2, 1, 2, 1e-5);
            let a2 = t.leaky_relu(n2, 0.1);
            let cv = t.cheb_conv(&m, a2, wc, 2, 2);
            let n3 = t.group_norm(cv, g3, be3, 1, 2, 1e-5);
            let a3 = t.leaky_relu(n3, 0.1);
            let l2 = t.matmul(a3, w2);
            let l2b = t.add_row(l2, b2);
            let skip = t.matmul(x, ws);
            let y = t.add(l2b, skip);
            let p = t.input(probe.clone());
            let yp = t.mul(y, p);
            t.sum(yp)
        }));
    }

    // Down- and up-sampling through the hierarchy's selection and
    // barycentric matrices.
    {
        let (pos, faces) = cylinder_tube(10, 5, 0.5, 2.0);
        let g50 = build_topology(&faces, 50).unwrap();
        let hier =
            build_sampling_hierarchy(&g50, &pos, &[2, 2], LaplacianMode::SymmetricNormalized)
                .unwrap();
        let down = Arc::clone(hier.levels[1].down.as_ref().unwrap());
        let up = Arc::clone(hier.levels[1].up.as_ref().unwrap());
        let x = rand_tensor(&mut rng, 2 * 50, 3, 1.0);
        let probe = rand_tensor(&mut rng, 2 * hier.levels[1].vertex_count, 3, 1.0);
        reports.push(check_scalar_graph("downsample", &[x], h, move |t, vars| {
            let y = t.spmm(&down, vars[0], 2);
            let p = t.input(probe.clone());
            let yp = t.mul(y, p);
            t.sum(yp)
        }));
        let xc = rand_tensor(&mut rng, 2 * hier.levels[1].vertex_count, 3, 1.0);
        let probe_up = rand_tensor(&mut rng, 2 * 50, 3, 1.0);
        reports.push(check_scalar_graph("upsample", &[xc], h, move |t, vars| {
            let y = t.spmm(&up, vars[0], 2);
            let p = t.input(probe_up.clone());
            let yp = t.mul(y, p);
            t.sum(yp)
        }));
    }

    // Reconstruction loss, with the prediction held away from the ground
    // truth so |·| is differenced on one side of its kink.
    {
        let x = rand_tensor(&mut rng, 2 * v, 3, 1.0);
        let delta = rand_tensor_offzero(&mut rng, 2 * v, 3);
        let mut xhat = x.clone();
        for (o, d) in xhat.data.iter_mut().zip(&delta.data) {
            *o += d;
        }
        let gt = x.clone();
        reports.push(check_scalar_graph("loss_recon", &[xhat], h, move |t, vars| {
            let xr = t.input(gt.clone());
            loss_recon(t, vars[0], xr, 2)
        }));
    }

    // Edge loss on the mesh's incidence operator.
    {
        let inc = edge_incidence(&graph);
        let x = rand_tensor(&mut rng, 2 * v, 3, 1.0);
        let xhat = rand_tensor(&mut rng, 2 * v, 3, 1.0);
        reports.push(check_scalar_graph("loss_edge", &[xhat], h, move |t, vars| {
            let xr = t.input(x.clone());
            loss_edge(t, &inc, vars[0], xr, 2)
        }));
    }

    // KL divergence.
    {
        let mu = rand_tensor(&mut rng, 4, 5, 1.0);
        let lv = rand_tensor(&mut rng, 4, 5, 1.0);
        reports.push(check_scalar_graph("loss_kl", &[mu, lv], h, |t, vars| {
            loss_kl(t, vars[0], vars[1], 4)
        }));
    }

    // GAN losses, parameterized by pre-sigmoid logits so scores stay inside
    // the clamp interval.
    {
        let lr = rand_tensor(&mut rng, 8, 1, 2.0);
        let lf = rand_tensor(&mut rng, 8, 1, 2.0);
        reports.push(check_scalar_graph("loss_gan_d", &[lr.clone(), lf.clone()], h, |t, vars| {
            let sr = t.sigmoid(vars[0]);
            let sf = t.sigmoid(vars[1]);
            loss_gan_discriminator(t, sr, sf)
        }));
        reports.push(check_scalar_graph("loss_gan_g", &[lf], h, |t, vars| {
            let sf = t.sigmoid(vars[0]);
            loss_gan_generator(t, sf)
        }));
    }

    // Elementwise primitives chained into one scalar.
    {
        let x = rand_tensor(&mut rng, 4, 6, 1.0);
        reports.push(check_scalar_graph("elementwise_chain", &[x], h, |t, vars| {
            let x = vars[0];
            let a = t.affine(x, 1.3, 0.2);
            let e = t.exp(a);
            let shifted = t.affine(e, 1.0, 1.5);
            let l = t.log(shifted);
            let s = t.sigmoid(x);
            let q = t.square(x);
            let ab_arg = t.affine(x, 1.0, 3.0);
            let ab = t.abs(ab_arg);
            let cl = t.clamp(x, -5.0, 5.0);
            let m1 = t.mul(l, s);
            let m2 = t.add(q, ab);
            let m3 = t.sub(m2, cl);
            let cat = t.concat_cols(m1, m3);
            let re = t.reshape(cat, 8, 6);
            let n = t.per_row_l2(re);
            let mn = t.mean(n);
            let sm = t.sum(m1);
            let both = t.add(mn, sm);
            t.affine(both, 0.5, 0.1)
        }));
    }

    // Full network composites on a 50-vertex topology.
    {
        let (pos, faces) = cylinder_tube(10, 5, 0.5, 2.0);
        let g50 = build_topology(&faces, 50).unwrap();
        let hier = Arc::new(
            build_sampling_hierarchy(&g50, &pos, &[2, 2, 2, 2], LaplacianMode::SymmetricNormalized)
                .unwrap(),
        );
        let cfg = NetConfig {
            latent_dim: 5,
            pose_hidden: 9,
            pose_embed: 6,
            cloth_embed: 4,
            stage_widths: [4, 6, 8, 10],
            disc_widths: [4, 4, 6, 6],
            bottleneck: 6,
            ..NetConfig::default()
        };
        let mut init_rng = stream(seed ^ 0x9e37, Stream::Init);
        let mut net = ClothingNet::init(cfg, 2, hier, &mut init_rng).unwrap();
        // Condition the evaluation point. Zero-initialized tensors (output
        // layer, biases) get generic values, and every group norm is set to
        // a small gain with a large shift: each normalized channel then sits
        // well away from the leaky-ReLU kink, which central differences at
        // h = 1e−5 must not straddle.
        for (_, tns) in net.params.iter_mut() {
            if tns.data.iter().all(|&x| x == 0.0) {
                for x in tns.data.iter_mut() {
                    *x = rng.random_range(-0.3..0.3);
                }
            }
        }
        for (name, tns) in net.params.iter_mut() {
            let sign = |r: &mut rand_chacha::ChaCha20Rng| if r.random_bool(0.5) { 1.0 } else { -1.0 };
            if name.ends_with(".gamma") {
                for x in tns.data.iter_mut() {
                    *x = sign(&mut rng) * rng.random_range(0.15..0.3);
                }
            } else if name.ends_with(".beta") {
                for x in tns.data.iter_mut() {
                    *x = sign(&mut rng) * rng.random_range(1.5..2.5);
                }
            }
        }
        let b = 2;
        let x_in = rand_tensor(&mut rng, b * 50, 3, 0.5);
        let x_gt = rand_tensor(&mut rng, b * 50, 3, 0.5);
        let pose_rows = rand_tensor(&mut rng, b, 18, 0.8);
        let cloth_rows = {
            let mut c = Tensor::zeros(b, 4);
            *c.at_mut(0, 1) = 1.0;
            *c.at_mut(1, 3) = 1.0;
            c
        };
        let eps = rand_tensor(&mut rng, b, 5, 1.0);
        let inc = edge_incidence(&g50);
        let weights = LossWeights::default();

        let xi = x_in.clone();
        let xg = x_gt.clone();
        let pr = pose_rows.clone();
        let cr = cloth_rows.clone();
        let ep = eps.clone();
        let inc_g = Arc::clone(&inc);
        reports.push(check_net_graph("composite_generator", &mut net, h, move |t, net, bound| {
            let x = t.input(xi.clone());
            let gt = t.input(xg.clone());
            let p = t.input(pr.clone());
            let c = t.input(cr.clone());
            let (zt, zc) = net.build_embeddings(t, bound, p, c);
            let (mu, lv) = net.build_encoder(t, bound, x, b);
            let e = t.input(ep.clone());
            let z = build_reparameterize(t, mu, lv, e);
            let xf = net.build_decoder(t, bound, z, zt, zc, b);
            let recon = loss_recon(t, xf, gt, b);
            let edge = loss_edge(t, &inc_g, xf, gt, b);
            let kl = loss_kl(t, mu, lv, b);
            let sf = net.build_discriminator(t, bound, xf, zt, zc, b);
            let gg = loss_gan_generator(t, sf);
            weighted_total(t, recon, Some(edge), Some(kl), Some(gg), &weights)
        }));

        let xi = x_in;
        let pr = pose_rows;
        let cr = cloth_rows;
        let ep = eps;
        reports.push(check_net_graph("composite_discriminator", &mut net, h, move |t, net, bound| {
            let x = t.input(xi.clone());
            let p = t.input(pr.clone());
            let c = t.input(cr.clone());
            let (zt, zc) = net.build_embeddings(t, bound, p, c);
            let (mu, lv) = net.build_encoder(t, bound, x, b);
            let e = t.input(ep.clone());
            let z = build_reparameterize(t, mu, lv, e);
            let xf = net.build_decoder(t, bound, z, zt, zc, b);
            let sr = net.build_discriminator(t, bound, x, zt, zc, b);
            let sf = net.build_discriminator(t, bound, xf, zt, zc, b);
            loss_gan_discriminator(t, sr, sf)
        }));
    }

    reports
}
