//! Composite rendering loss and its exact reverse-mode gradient.
//!
//! `L = mean|S - S_gt| + lambda * mean[(A - A_sup)^2 + (B - B_sup)^2]`
//! where `S, A, B` are the rendered sigma / alpha / beta line integrals.
//! The loss is a mean of per-ray terms, so rays are processed in small
//! chunks whose forward and backward passes run back to back.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::{NeuralField, ThresholdSurrogate, Workspace};
use crate::geometry::{intersect_aabb, Ray, Vec3};

/// Rays per forward/backward chunk.
const CHUNK_RAYS: usize = 8;

/// Rays with their quadrature samples and per-ray targets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RayBatch {
    pub n_samples: usize,
    /// Sample points in the field's normalized coordinates, ray-major.
    pub points: Vec<Vec3>,
    pub dt: Vec<f64>,
    pub sigma_gt: Vec<f64>,
    pub alpha_sup: Vec<f64>,
    pub beta_sup: Vec<f64>,
}

impl RayBatch {
    pub fn new(n_samples: usize) -> Self {
        Self {
            n_samples,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.dt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dt.is_empty()
    }

    pub fn clear(&mut self) {
        self.points.clear();
        self.dt.clear();
        self.sigma_gt.clear();
        self.alpha_sup.clear();
        self.beta_sup.clear();
    }

    /// Clips `ray` to the field domain and appends stratified samples
    /// (jittered within strata if `rng` is given). Returns `false`, adding
    /// nothing, when the ray misses the domain.
    pub fn push_ray<R: Rng + ?Sized>(
        &mut self,
        field: &NeuralField,
        ray: &Ray,
        targets: [f64; 3],
        rng: Option<&mut R>,
    ) -> bool {
        let domain = field.domain();
        let Some((t0, t1)) = intersect_aabb(ray, domain) else {
            return false;
        };
        let dt = (t1 - t0) / self.n_samples as f64;
        match rng {
            Some(r) => {
                for i in 0..self.n_samples {
                    let t = t0 + (i as f64 + r.gen::<f64>()) * dt;
                    self.points.push(domain.normalize(ray.at(t)));
                }
            }
            None => {
                for i in 0..self.n_samples {
                    let t = t0 + (i as f64 + 0.5) * dt;
                    self.points.push(domain.normalize(ray.at(t)));
                }
            }
        }
        self.dt.push(dt);
        self.sigma_gt.push(targets[0]);
        self.alpha_sup.push(targets[1]);
        self.beta_sup.push(targets[2]);
        true
    }

    /// Sub-batch of rays `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> RayBatch {
        let n = self.n_samples;
        RayBatch {
            n_samples: n,
            points: self.points[range.start * n..range.end * n].to_vec(),
            dt: self.dt[range.clone()].to_vec(),
            sigma_gt: self.sigma_gt[range.clone()].to_vec(),
            alpha_sup: self.alpha_sup[range.clone()].to_vec(),
            beta_sup: self.beta_sup[range].to_vec(),
        }
    }

    fn validate(&self) -> Result<()> {
        let b = self.len();
        if b == 0 {
            return invalid("ray batch is empty");
        }
        if self.n_samples == 0 || self.points.len() != b * self.n_samples {
            return invalid("ray batch sample layout is inconsistent");
        }
        if self.sigma_gt.len() != b || self.alpha_sup.len() != b || self.beta_sup.len() != b {
            return invalid("ray batch target lengths differ");
        }
        Ok(())
    }
}

/// Loss value split into its two terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    /// `mean |S - S_gt|`
    pub data: f64,
    /// `mean [(A - A_sup)^2 + (B - B_sup)^2]`, before weighting by lambda
    pub tissue: f64,
}

/// Options shared by all loss evaluations of a training run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossOptions {
    /// Threshold surrogate for the alpha/beta channels of single-output fields.
    pub surrogate: Option<ThresholdSurrogate>,
    /// Fixed reduction order independent of the thread count.
    pub deterministic: bool,
}

/// Reusable buffers for [`loss_forward_backward`].
#[derive(Debug, Default)]
pub struct GradEngine {
    groups: Vec<GroupState>,
    pub grads: Vec<f64>,
}

#[derive(Debug, Default)]
struct GroupState {
    ws: Workspace,
    grads: Vec<f64>,
    d_chan: Vec<f64>,
    /// per ray: |residual|, tissue term
    terms: Vec<(f64, f64)>,
}

impl GradEngine {
    pub fn new() -> Self {
        Self::default()
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Processes rays `range` of `batch`: forward, per-ray loss terms and,
/// if `grads` is given, the accumulated parameter gradient.
fn run_group(
    field: &NeuralField,
    batch: &RayBatch,
    range: std::ops::Range<usize>,
    lambda: f64,
    inv_b: f64,
    st: &mut GroupState,
    with_grad: bool,
) -> Result<()> {
    let ns = batch.n_samples;
    st.terms.clear();
    let mut start = range.start;
    while start < range.end {
        let end = (start + CHUNK_RAYS).min(range.end);
        let n_rays = end - start;
        let n = n_rays * ns;
        field.forward_points(&batch.points[start * ns..end * ns], &mut st.ws)?;
        if with_grad {
            st.d_chan.resize(3 * n, 0.0);
        }
        for r in 0..n_rays {
            let ray = start + r;
            let dt = batch.dt[ray];
            let ch = st.ws.channels();
            let acc = |c: usize| crate::nn::sum(&ch[c * n + r * ns..c * n + (r + 1) * ns]) * dt;
            let (s, a, b) = (acc(0), acc(1), acc(2));
            let rs = s - batch.sigma_gt[ray];
            let ra = a - batch.alpha_sup[ray];
            let rb = b - batch.beta_sup[ray];
            let tissue = ra * ra + rb * rb;
            if !(rs.is_finite() && tissue.is_finite()) {
                return Err(Error::NumericFailure(format!(
                    "non-finite loss on ray {ray} (rendered {s}, {a}, {b})"
                )));
            }
            st.terms.push((rs.abs(), tissue));
            if with_grad {
                let gs = sign(rs) * inv_b * dt;
                let ga = 2.0 * lambda * ra * inv_b * dt;
                let gb = 2.0 * lambda * rb * inv_b * dt;
                st.d_chan[r * ns..(r + 1) * ns].fill(gs);
                st.d_chan[n + r * ns..n + (r + 1) * ns].fill(ga);
                st.d_chan[2 * n + r * ns..2 * n + (r + 1) * ns].fill(gb);
            }
        }
        if with_grad {
            field.backward_points(&mut st.ws, &st.d_chan, &mut st.grads);
        }
        start = end;
    }
    Ok(())
}

fn evaluate(
    field: &NeuralField,
    batch: &RayBatch,
    lambda: f64,
    opts: &LossOptions,
    engine: &mut GradEngine,
    with_grad: bool,
) -> Result<LossTerms> {
    batch.validate()?;
    if !(lambda >= 0.0) {
        return invalid("lambda must be non-negative");
    }
    let b = batch.len();
    let n_params = field.params().len();
    let n_groups = if opts.deterministic {
        1
    } else {
        rayon::current_num_threads().clamp(1, b.div_ceil(CHUNK_RAYS))
    };
    engine.groups.resize_with(n_groups, GroupState::default);
    engine.groups.truncate(n_groups);
    for g in &mut engine.groups {
        field.set_surrogate(&mut g.ws, opts.surrogate);
        if with_grad {
            g.grads.clear();
            g.grads.resize(n_params, 0.0);
        }
    }
    let inv_b = 1.0 / b as f64;
    // contiguous, chunk-aligned ray ranges per group
    let chunks = b.div_ceil(CHUNK_RAYS);
    let ranges: Vec<_> = (0..n_groups)
        .map(|g| {
            let c0 = chunks * g / n_groups;
            let c1 = chunks * (g + 1) / n_groups;
            (c0 * CHUNK_RAYS).min(b)..(c1 * CHUNK_RAYS).min(b)
        })
        .collect();
    if n_groups == 1 {
        run_group(field, batch, 0..b, lambda, inv_b, &mut engine.groups[0], with_grad)?;
    } else {
        engine
            .groups
            .par_iter_mut()
            .zip(ranges.par_iter())
            .map(|(st, r)| run_group(field, batch, r.clone(), lambda, inv_b, st, with_grad))
            .collect::<Result<Vec<()>>>()?;
    }
    let (mut data, mut tissue) = (0.0, 0.0);
    for g in &engine.groups {
        for &(d, t) in &g.terms {
            data += d;
            tissue += t;
        }
    }
    data *= inv_b;
    tissue *= inv_b;
    if with_grad {
        let (first, rest) = engine.groups.split_first_mut().unwrap();
        for g in rest.iter() {
            for (a, &x) in first.grads.iter_mut().zip(&g.grads) {
                *a += x;
            }
        }
        std::mem::swap(&mut engine.grads, &mut first.grads);
    }
    let total = data + lambda * tissue;
    if !total.is_finite() {
        return Err(Error::NumericFailure("non-finite batch loss".into()));
    }
    Ok(LossTerms { total, data, tissue })
}

/// Loss of `batch` and its gradient, left in `engine.grads`.
pub fn loss_forward_backward(
    field: &NeuralField,
    batch: &RayBatch,
    lambda: f64,
    opts: &LossOptions,
    engine: &mut GradEngine,
) -> Result<LossTerms> {
    evaluate(field, batch, lambda, opts, engine, true)
}

/// Loss of `batch` without gradients.
pub fn loss_only(
    field: &NeuralField,
    batch: &RayBatch,
    lambda: f64,
    opts: &LossOptions,
    engine: &mut GradEngine,
) -> Result<LossTerms> {
    evaluate(field, batch, lambda, opts, engine, false)
}
