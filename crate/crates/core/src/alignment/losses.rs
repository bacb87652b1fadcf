//! The reward-based alignment objective: its five terms, their weighted
//! sum, and the gradient of that sum with respect to all four networks of
//! one alignment group (state or action).
//!
//! Every term is mean-reduced over the rows, pairs or neighbour edges it
//! ranges over.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{knn_graph, MatchedPairSet};
use crate::error::{Error, Result};
use crate::nn::{Gradients, Mlp};

/// Latent vectors with a norm below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// `exp(−|r_x − r_y| / δ²)`.
pub fn similarity_coefficient(r_x: f64, r_y: f64, delta: f64) -> f64 {
    (-(r_x - r_y).abs() / (delta * delta)).exp()
}

/// Normalized Euclidean distance mapped linearly onto the cosine range:
/// `1 − 2·‖a − b‖/√N`.
pub fn cos_d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!("cos_d needs equal non-zero dims, got {} and {}", a.len(), b.len())));
    }
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(1.0 - 2.0 * d2.sqrt() / (a.len() as f64).sqrt())
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(u: ArrayView1<f64>, v: ArrayView1<f64>) -> f64 {
    let (nu, nv) = (norm(u), norm(v));
    if nu < ZERO_NORM || nv < ZERO_NORM {
        0.0
    } else {
        u.dot(&v) / (nu * nv)
    }
}

/// Adds `scale · ∂cos(u, v)/∂u` and `scale · ∂cos(u, v)/∂v` into `gu`, `gv`
/// and returns the cosine.
fn cosine_backprop(
    u: ArrayView1<f64>,
    v: ArrayView1<f64>,
    scale: f64,
    mut gu: ndarray::ArrayViewMut1<f64>,
    mut gv: ndarray::ArrayViewMut1<f64>,
) -> f64 {
    let (nu, nv) = (norm(u), norm(v));
    if nu < ZERO_NORM || nv < ZERO_NORM {
        return 0.0;
    }
    let c = u.dot(&v) / (nu * nv);
    let inv = 1.0 / (nu * nv);
    for k in 0..u.len() {
        gu[k] += scale * (v[k] * inv - c * u[k] / (nu * nu));
        gv[k] += scale * (u[k] * inv - c * v[k] / (nv * nv));
    }
    c
}

/// λ1..λ5 of the total objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lambdas {
    pub alignment: f64,
    pub geometry: f64,
    pub reconstruction: f64,
    pub cycle: f64,
    pub latent_norm: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self { alignment: 1.0, geometry: 1.0, reconstruction: 1.0, cycle: 0.5, latent_norm: 0.05 }
    }
}

impl Lambdas {
    pub fn zero() -> Self {
        Self { alignment: 0.0, geometry: 0.0, reconstruction: 0.0, cycle: 0.0, latent_norm: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alignment", self.alignment),
            ("geometry", self.geometry),
            ("reconstruction", self.reconstruction),
            ("cycle", self.cycle),
            ("latent_norm", self.latent_norm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("lambda `{name}` must be ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unweighted term values. `reconstruction`, `cycle` and `latent_norm` are
/// already summed over the two domains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub alignment: f64,
    pub geometry: f64,
    pub reconstruction: f64,
    pub cycle: f64,
    pub latent_norm: f64,
    pub total: f64,
}

impl LossTerms {
    fn weighted_total(&mut self, l: &Lambdas) {
        self.total = l.alignment * self.alignment
            + l.geometry * self.geometry
            + l.reconstruction * self.reconstruction
            + l.cycle * self.cycle
            + l.latent_norm * self.latent_norm;
    }

    pub fn is_finite(&self) -> bool {
        [self.alignment, self.geometry, self.reconstruction, self.cycle, self.latent_norm, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// The four networks aligning one pair of spaces `X` and `Y`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupNets {
    pub enc_x: Mlp,
    pub dec_x: Mlp,
    pub enc_y: Mlp,
    pub dec_y: Mlp,
}

/// Gradients for [`GroupNets`], same field order.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupGradients {
    pub enc_x: Gradients,
    pub dec_x: Gradients,
    pub enc_y: Gradients,
    pub dec_y: Gradients,
}

impl GroupNets {
    pub fn zero_gradients(&self) -> GroupGradients {
        GroupGradients {
            enc_x: self.enc_x.zero_gradients(),
            dec_x: self.dec_x.zero_gradients(),
            enc_y: self.enc_y.zero_gradients(),
            dec_y: self.dec_y.zero_gradients(),
        }
    }

    pub fn nets(&self) -> [&Mlp; 4] {
        [&self.enc_x, &self.dec_x, &self.enc_y, &self.dec_y]
    }

    pub fn nets_mut(&mut self) -> [&mut Mlp; 4] {
        [&mut self.enc_x, &mut self.dec_x, &mut self.enc_y, &mut self.dec_y]
    }

    pub fn latent_dim(&self) -> usize {
        self.enc_x.output_dim()
    }

    fn validate(&self) -> Result<()> {
        let m = self.enc_x.output_dim();
        let (p, q) = (self.enc_x.input_dim(), self.enc_y.input_dim());
        if self.enc_y.output_dim() != m
            || self.dec_x.input_dim() != m
            || self.dec_y.input_dim() != m
            || self.dec_x.output_dim() != p
            || self.dec_y.output_dim() != q
        {
            return Err(Error::shape(format!(
                "inconsistent alignment group: enc_x {:?}, dec_x {:?}, enc_y {:?}, dec_y {:?}",
                self.enc_x.layer_dims(),
                self.dec_x.layer_dims(),
                self.enc_y.layer_dims(),
                self.dec_y.layer_dims()
            )));
        }
        Ok(())
    }
}

impl GroupGradients {
    pub fn all(&self) -> [&Gradients; 4] {
        [&self.enc_x, &self.dec_x, &self.enc_y, &self.dec_y]
    }

    pub fn into_array(self) -> [Gradients; 4] {
        [self.enc_x, self.dec_x, self.enc_y, self.dec_y]
    }
}

/// A matched pair given by row indices into a batch, with its weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightedPair {
    pub x: usize,
    pub y: usize,
    pub w: f64,
}

/// Rows and index lists for one evaluation of the objective.
///
/// `anchors_*` select the rows entering the reconstruction, cycle and
/// latent-norm terms; `geo_*` are `(i, j)` neighbour edges; `pairs` index
/// `x` and `y` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupBatch {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub anchors_x: Vec<usize>,
    pub anchors_y: Vec<usize>,
    pub geo_x: Vec<(usize, usize)>,
    pub geo_y: Vec<(usize, usize)>,
    pub pairs: Vec<WeightedPair>,
}

fn edges(graph: &[Vec<usize>]) -> Vec<(usize, usize)> {
    graph.iter().enumerate().flat_map(|(i, nbrs)| nbrs.iter().map(move |&j| (i, j))).collect()
}

impl GroupBatch {
    /// Every row is an anchor, neighbour edges come from the exact k-NN
    /// graph of each set, and `pairs` index the same full sets.
    pub fn full(x: ArrayView2<f64>, y: ArrayView2<f64>, pairs: &MatchedPairSet, k: usize) -> Result<Self> {
        Ok(Self {
            anchors_x: (0..x.nrows()).collect(),
            anchors_y: (0..y.nrows()).collect(),
            geo_x: edges(&knn_graph(x, k)?),
            geo_y: edges(&knn_graph(y, k)?),
            pairs: pairs.pairs.iter().map(|p| WeightedPair { x: p.x, y: p.y, w: pairs.weight(p) }).collect(),
            x: x.to_owned(),
            y: y.to_owned(),
        })
    }

    /// Gathers the rows needed by a minibatch of full-set indices: the
    /// anchors, their precomputed neighbours, and both members of each pair.
    pub fn gather(
        x: ArrayView2<f64>,
        y: ArrayView2<f64>,
        anchors_x: &[usize],
        anchors_y: &[usize],
        graph_x: &[Vec<usize>],
        graph_y: &[Vec<usize>],
        pairs: &[WeightedPair],
    ) -> Self {
        struct Side {
            local: HashMap<usize, usize>,
            rows: Vec<usize>,
        }
        impl Side {
            fn id(&mut self, i: usize) -> usize {
                let next = self.rows.len();
                *self.local.entry(i).or_insert_with(|| {
                    self.rows.push(i);
                    next
                })
            }
        }
        let mut sx = Side { local: HashMap::new(), rows: Vec::new() };
        let mut sy = Side { local: HashMap::new(), rows: Vec::new() };
        let ax: Vec<usize> = anchors_x.iter().map(|&i| sx.id(i)).collect();
        let ay: Vec<usize> = anchors_y.iter().map(|&i| sy.id(i)).collect();
        let mut geo_x = Vec::new();
        for &i in anchors_x {
            for &j in &graph_x[i] {
                geo_x.push((sx.id(i), sx.id(j)));
            }
        }
        let mut geo_y = Vec::new();
        for &i in anchors_y {
            for &j in &graph_y[i] {
                geo_y.push((sy.id(i), sy.id(j)));
            }
        }
        let pairs = pairs.iter().map(|p| WeightedPair { x: sx.id(p.x), y: sy.id(p.y), w: p.w }).collect();
        Self {
            x: x.select(Axis(0), &sx.rows),
            y: y.select(Axis(0), &sy.rows),
            anchors_x: ax,
            anchors_y: ay,
            geo_x,
            geo_y,
            pairs,
        }
    }
}

/// Mean over pairs of `−cos(z_x, z_y)·w`, accumulating `scale ·` its latent
/// gradient.
fn alignment_term(
    zx: &Array2<f64>,
    zy: &Array2<f64>,
    pairs: &[WeightedPair],
    scale: f64,
    gx: &mut Array2<f64>,
    gy: &mut Array2<f64>,
) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let n = pairs.len() as f64;
    let mut loss = 0.0;
    for p in pairs {
        let s = -p.w * scale / n;
        let c = cosine_backprop(zx.row(p.x), zy.row(p.y), s, gx.row_mut(p.x), gy.row_mut(p.y));
        loss -= c * p.w;
    }
    loss / n
}

fn geometry_term(
    points: &Array2<f64>,
    z: &Array2<f64>,
    edges: &[(usize, usize)],
    scale: f64,
    g: &mut Array2<f64>,
) -> Result<f64> {
    if edges.is_empty() {
        return Ok(0.0);
    }
    let n = edges.len() as f64;
    let mut loss = 0.0;
    for &(i, j) in edges {
        let target = cos_d(
            points.row(i).as_slice().expect("standard layout"),
            points.row(j).as_slice().expect("standard layout"),
        )?;
        let c = cosine(z.row(i), z.row(j));
        let diff = c - target;
        loss += diff * diff;
        // An edge from a row to itself has constant cosine and no gradient.
        if scale != 0.0 && i != j {
            let mut gi = Array2::zeros((2, z.ncols()));
            let (a, b) = gi.multi_slice_mut((ndarray::s![0, ..], ndarray::s![1, ..]));
            cosine_backprop(z.row(i), z.row(j), 2.0 * diff * scale / n, a, b);
            g.row_mut(i).scaled_add(1.0, &gi.row(0));
            g.row_mut(j).scaled_add(1.0, &gi.row(1));
        }
    }
    Ok(loss / n)
}

fn latent_norm_term(z: &Array2<f64>, anchors: &[usize], scale: f64, g: &mut Array2<f64>) -> f64 {
    if anchors.is_empty() {
        return 0.0;
    }
    let n = anchors.len() as f64;
    let mut loss = 0.0;
    for &i in anchors {
        let nz = norm(z.row(i));
        loss += nz;
        if nz >= ZERO_NORM && scale != 0.0 {
            g.row_mut(i).scaled_add(scale / (n * nz), &z.row(i));
        }
    }
    loss / n
}

/// Mean over rows of the squared error summed over coordinates, and its
/// gradient with respect to `pred` scaled by `scale`.
fn squared_error(target: &Array2<f64>, pred: &Array2<f64>, scale: f64) -> (f64, Array2<f64>) {
    let n = target.nrows().max(1) as f64;
    let diff = pred - target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    (loss, diff * (2.0 * scale / n))
}

fn scatter_add(g: &mut Array2<f64>, rows: &[usize], src: &Array2<f64>) {
    for (k, &i) in rows.iter().enumerate() {
        g.row_mut(i).scaled_add(1.0, &src.row(k));
    }
}

/// Reconstruction and cycle terms for one domain, accumulating decoder
/// gradients and the latent gradient of the anchors.
#[allow(clippy::too_many_arguments)]
fn decode_terms(
    own_dec: &Mlp,
    other_enc: &Mlp,
    other_dec: &Mlp,
    points: &Array2<f64>,
    z: &Array2<f64>,
    anchors: &[usize],
    lambdas: &Lambdas,
    g_z: &mut Array2<f64>,
    g_own_dec: &mut Gradients,
    g_other_enc: &mut Gradients,
    g_other_dec: &mut Gradients,
) -> Result<(f64, f64)> {
    if anchors.is_empty() {
        return Ok((0.0, 0.0));
    }
    let target = points.select(Axis(0), anchors);
    let za = z.select(Axis(0), anchors);

    let rec_trace = own_dec.forward_traced(za.view())?;
    let (rec, d_rec) = squared_error(&target, rec_trace.output(), lambdas.reconstruction);
    if lambdas.reconstruction != 0.0 {
        let gz = own_dec.backward(&rec_trace, d_rec.view(), g_own_dec)?;
        scatter_add(g_z, anchors, &gz);
    }

    let t1 = other_dec.forward_traced(za.view())?;
    let t2 = other_enc.forward_traced(t1.output().view())?;
    let t3 = own_dec.forward_traced(t2.output().view())?;
    let (cyc, d_cyc) = squared_error(&target, t3.output(), lambdas.cycle);
    if lambdas.cycle != 0.0 {
        let d2 = own_dec.backward(&t3, d_cyc.view(), g_own_dec)?;
        let d1 = other_enc.backward(&t2, d2.view(), g_other_enc)?;
        let gz = other_dec.backward(&t1, d1.view(), g_other_dec)?;
        scatter_add(g_z, anchors, &gz);
    }
    Ok((rec, cyc))
}

fn check_batch(nets: &GroupNets, b: &GroupBatch) -> Result<()> {
    nets.validate()?;
    if b.x.ncols() != nets.enc_x.input_dim() || b.y.ncols() != nets.enc_y.input_dim() {
        return Err(Error::shape(format!(
            "batch dims ({}, {}) do not match encoders ({}, {})",
            b.x.ncols(),
            b.y.ncols(),
            nets.enc_x.input_dim(),
            nets.enc_y.input_dim()
        )));
    }
    let (nx, ny) = (b.x.nrows(), b.y.nrows());
    let bad_x = b.anchors_x.iter().chain(b.geo_x.iter().flat_map(|e| [&e.0, &e.1])).any(|&i| i >= nx);
    let bad_y = b.anchors_y.iter().chain(b.geo_y.iter().flat_map(|e| [&e.0, &e.1])).any(|&i| i >= ny);
    let bad_p = b.pairs.iter().any(|p| p.x >= nx || p.y >= ny);
    if bad_x || bad_y || bad_p {
        return Err(Error::shape("batch index out of range"));
    }
    Ok(())
}

/// Term values and the gradient of the weighted total for all four
/// networks. Terms with a zero weight are still evaluated but contribute no
/// gradient.
pub fn reba_eval(nets: &GroupNets, batch: &GroupBatch, lambdas: &Lambdas) -> Result<(LossTerms, GroupGradients)> {
    check_batch(nets, batch)?;
    let mut grads = nets.zero_gradients();
    let tx = nets.enc_x.forward_traced(batch.x.view())?;
    let ty = nets.enc_y.forward_traced(batch.y.view())?;
    let (zx, zy) = (tx.output(), ty.output());
    let mut gx = Array2::zeros(zx.raw_dim());
    let mut gy = Array2::zeros(zy.raw_dim());

    let mut terms = LossTerms {
        alignment: alignment_term(zx, zy, &batch.pairs, lambdas.alignment, &mut gx, &mut gy),
        geometry: geometry_term(&batch.x, zx, &batch.geo_x, lambdas.geometry, &mut gx)?
            + geometry_term(&batch.y, zy, &batch.geo_y, lambdas.geometry, &mut gy)?,
        latent_norm: latent_norm_term(zx, &batch.anchors_x, lambdas.latent_norm, &mut gx)
            + latent_norm_term(zy, &batch.anchors_y, lambdas.latent_norm, &mut gy),
        ..LossTerms::default()
    };
    let (rx, cx) = decode_terms(
        &nets.dec_x,
        &nets.enc_y,
        &nets.dec_y,
        &batch.x,
        zx,
        &batch.anchors_x,
        lambdas,
        &mut gx,
        &mut grads.dec_x,
        &mut grads.enc_y,
        &mut grads.dec_y,
    )?;
    let (ry, cy) = decode_terms(
        &nets.dec_y,
        &nets.enc_x,
        &nets.dec_x,
        &batch.y,
        zy,
        &batch.anchors_y,
        lambdas,
        &mut gy,
        &mut grads.dec_y,
        &mut grads.enc_x,
        &mut grads.dec_x,
    )?;
    terms.reconstruction = rx + ry;
    terms.cycle = cx + cy;
    terms.weighted_total(lambdas);

    nets.enc_x.backward(&tx, gx.view(), &mut grads.enc_x)?;
    nets.enc_y.backward(&ty, gy.view(), &mut grads.enc_y)?;
    Ok((terms, grads))
}

/// Weighted total objective on one batch.
pub fn reba_total(nets: &GroupNets, batch: &GroupBatch, lambdas: &Lambdas) -> Result<f64> {
    Ok(reba_eval(nets, batch, lambdas)?.0.total)
}

/// Mean over `pairs` of `−cos(enc_x(x), enc_y(y))·W(r_x, r_y)`, with pair
/// indices into `x` and `y`.
pub fn alignment_loss(
    enc_x: &Mlp,
    enc_y: &Mlp,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    pairs: &MatchedPairSet,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("alignment loss needs at least one matched pair"));
    }
    let zx = enc_x.forward_batch(x)?;
    let zy = enc_y.forward_batch(y)?;
    let wp: Vec<WeightedPair> =
        pairs.pairs.iter().map(|p| WeightedPair { x: p.x, y: p.y, w: pairs.weight(p) }).collect();
    if wp.iter().any(|p| p.x >= zx.nrows() || p.y >= zy.nrows()) {
        return Err(Error::shape("pair index out of range"));
    }
    let (mut gx, mut gy) = (zx.clone(), zy.clone());
    Ok(alignment_term(&zx, &zy, &wp, 0.0, &mut gx, &mut gy))
}

/// Mean over points and their `k` nearest neighbours of
/// `(cos_d(x_i, x_j) − cos(enc(x_i), enc(x_j)))²` for one domain.
pub fn geometry_loss(enc: &Mlp, points: ArrayView2<f64>, k: usize) -> Result<f64> {
    if points.nrows() <= k {
        return Err(Error::invalid(format!("geometry loss needs more than k = {k} points, got {}", points.nrows())));
    }
    let graph = knn_graph(points, k)?;
    let z = enc.forward_batch(points)?;
    let mut g = z.clone();
    geometry_term(&points.to_owned(), &z, &edges(&graph), 0.0, &mut g)
}

/// Mean over rows of `‖x − dec(enc(x))‖²`.
pub fn reconstruction_loss(enc: &Mlp, dec: &Mlp, batch: ArrayView2<f64>) -> Result<f64> {
    let out = dec.forward_batch(enc.forward_batch(batch)?.view())?;
    Ok(squared_error(&batch.to_owned(), &out, 0.0).0)
}

/// Mean over rows of `‖x − dec_x(enc_y(dec_y(enc_x(x))))‖²`.
pub fn cycle_loss(enc_x: &Mlp, dec_x: &Mlp, enc_y: &Mlp, dec_y: &Mlp, batch_x: ArrayView2<f64>) -> Result<f64> {
    let z = enc_x.forward_batch(batch_x)?;
    let y = dec_y.forward_batch(z.view())?;
    let z2 = enc_y.forward_batch(y.view())?;
    let out = dec_x.forward_batch(z2.view())?;
    Ok(squared_error(&batch_x.to_owned(), &out, 0.0).0)
}

/// Mean latent L2 norm of `enc` over the rows of `batch`.
pub fn latent_norm_loss(enc: &Mlp, batch: ArrayView2<f64>) -> Result<f64> {
    let z = enc.forward_batch(batch)?;
    let anchors: Vec<usize> = (0..z.nrows()).collect();
    let mut g = z.clone();
    Ok(latent_norm_term(&z, &anchors, 0.0, &mut g))
}
