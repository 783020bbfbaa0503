//! Scoring and training objective.
//!
//! Every candidate is scored `S = -(L_img + L_ind + L_kl)`; the argmax wins
//! and only the winner's loss is backpropagated. The independence term
//! penalizes squared mixed second partials of the decoder output with respect
//! to latent pairs, estimated by central finite differences through full
//! decoder forward passes (intra-module pairs and cross-module pairs).

use ndarray::{Array1, Array2, Array3, Array4, Axis, IxDyn};
use rand::Rng;
use rand::seq::SliceRandom;

use crate::combin::Candidate;
use crate::error::{Error, Result};
use crate::lie;
use crate::nn::{Gradients, Tape, VarId};
use crate::pool::ModulePool;
use crate::rng::child_rng;

/// Per-candidate score terms. Fields hold the lambda-weighted contributions,
/// so `score == -(img + ind + kl)` exactly.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct ScoreBreakdown {
    pub img: f64,
    pub ind: f64,
    pub kl: f64,
    pub score: f64,
}

/// Winner loss terms (lambda-weighted); `total` is their exact sum.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LossBreakdown {
    pub img: f64,
    pub ind: f64,
    pub kl: f64,
    pub extra: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub idcls: Option<f64>,
    pub total: f64,
}

/// Objective hyperparameters shared by scoring and the winner loss.
/// A pair cap of 0 means "use every pair".
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ObjectiveConfig {
    pub eps_fd: f64,
    pub hessian_pairs_intra: usize,
    pub hessian_pairs_inter: usize,
    pub lambda_img: f64,
    pub lambda_ind: f64,
    pub lambda_kl: f64,
    pub lambda_extra: f64,
    pub id_classifier: bool,
    pub lambda_cls: f64,
    pub lambda_feat: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            eps_fd: 1e-2,
            hessian_pairs_intra: 8,
            hessian_pairs_inter: 8,
            lambda_img: 1.0,
            lambda_ind: 1.0,
            lambda_kl: 1.0,
            lambda_extra: 1.0,
            id_classifier: false,
            lambda_cls: 1.0,
            lambda_feat: 1.0,
        }
    }
}

// ---------------------------------------------------------------------------
// Elementary losses
// ---------------------------------------------------------------------------

/// Mean over all pixels/channels of the squared difference.
pub fn image_loss(x: &Array3<f64>, xhat: &Array3<f64>) -> Result<f64> {
    if x.dim() != xhat.dim() {
        return Err(Error::invalid(format!(
            "image shapes differ: {:?} vs {:?}",
            x.dim(),
            xhat.dim()
        )));
    }
    let n = x.len() as f64;
    Ok(x.iter()
        .zip(xhat.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Closed-form KL divergence to a standard normal prior:
/// `sum_d 0.5 (mu_d^2 + sigma_d^2 - 1 - 2 ln sigma_d)`.
pub fn kl_loss(mu: &Array1<f64>, sigma: &Array1<f64>) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::invalid("kl_loss length mismatch"));
    }
    if sigma.iter().any(|&s| s <= 0.0) {
        return Err(Error::invalid("kl_loss needs strictly positive sigma"));
    }
    Ok(mu
        .iter()
        .zip(sigma.iter())
        .map(|(m, s)| 0.5 * (m * m + s * s - 1.0 - 2.0 * s.ln()))
        .sum())
}

/// Central mixed second difference of a scalar probe:
/// `[f(z+ei+ej) - f(z+ei-ej) - f(z-ei+ej) + f(z-ei-ej)] / (4 eps^2)`.
pub fn fd_hessian<F>(f: F, z: &Array1<f64>, i: usize, j: usize, eps: f64) -> Result<f64>
where
    F: Fn(&Array1<f64>) -> f64,
{
    if i == j {
        return Err(Error::invalid("fd_hessian needs distinct indices (diagonal is not penalized)"));
    }
    if i >= z.len() || j >= z.len() {
        return Err(Error::invalid("fd_hessian index out of range"));
    }
    if eps <= 0.0 {
        return Err(Error::invalid("fd_hessian needs a positive step"));
    }
    let eval = |si: f64, sj: f64| {
        let mut p = z.clone();
        p[i] += si * eps;
        p[j] += sj * eps;
        f(&p)
    };
    Ok((eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0)) / (4.0 * eps * eps))
}

// ---------------------------------------------------------------------------
// Hessian pair selection
// ---------------------------------------------------------------------------

/// An intra-module pair: (participating-module position, i, j) with i < j.
pub type IntraPair = (usize, usize, usize);
/// A cross-module pair: ((position a, i), (position b, j)) with a < b.
pub type InterPair = ((usize, usize), (usize, usize));

/// The (possibly subsampled) pair sets for one candidate, plus the
/// universe/sample ratios that keep the subsampled sum unbiased.
#[derive(Debug, Clone)]
pub struct HessianPairs {
    pub intra: Vec<IntraPair>,
    pub inter: Vec<InterPair>,
    pub intra_scale: f64,
    pub inter_scale: f64,
}

impl HessianPairs {
    pub fn is_empty(&self) -> bool {
        self.intra.is_empty() && self.inter.is_empty()
    }

    pub fn len(&self) -> usize {
        self.intra.len() + self.inter.len()
    }
}

fn subsample<T: Clone>(universe: Vec<T>, cap: usize, rng: &mut impl Rng) -> (Vec<T>, f64) {
    if cap == 0 || cap >= universe.len() {
        return (universe, 1.0);
    }
    let total = universe.len();
    let mut items = universe;
    // Partial Fisher-Yates: the first `cap` slots become the sample.
    for idx in 0..cap {
        let swap = rng.random_range(idx..items.len());
        items.swap(idx, swap);
    }
    items.truncate(cap);
    (items, total as f64 / cap as f64)
}

/// Enumerate and (when capped) subsample pairs for a candidate whose
/// participating modules have latent lengths `ks`.
pub fn select_hessian_pairs(
    ks: &[usize],
    cap_intra: usize,
    cap_inter: usize,
    rng: &mut impl Rng,
) -> HessianPairs {
    let mut intra_universe = Vec::new();
    for (pos, &k) in ks.iter().enumerate() {
        for i in 0..k {
            for j in (i + 1)..k {
                intra_universe.push((pos, i, j));
            }
        }
    }
    let mut inter_universe = Vec::new();
    for a in 0..ks.len() {
        for b in (a + 1)..ks.len() {
            for i in 0..ks[a] {
                for j in 0..ks[b] {
                    inter_universe.push(((a, i), (b, j)));
                }
            }
        }
    }
    let (intra, intra_scale) = subsample(intra_universe, cap_intra, rng);
    let (inter, inter_scale) = subsample(inter_universe, cap_inter, rng);
    HessianPairs {
        intra,
        inter,
        intra_scale,
        inter_scale,
    }
}

/// The four sign combinations of the mixed central stencil, as per-module
/// one-hot perturbations `(position, dim, delta)`.
fn stencil(pair_kind: StencilPair, eps: f64) -> [Vec<(usize, usize, f64)>; 4] {
    let ((pa, ia), (pb, ib)) = match pair_kind {
        StencilPair::Intra(p, i, j) => ((p, i), (p, j)),
        StencilPair::Inter(a, b) => (a, b),
    };
    let mk = |sa: f64, sb: f64| {
        if pa == pb {
            vec![(pa, ia, sa * eps), (pa, ib, sb * eps)]
        } else {
            vec![(pa, ia, sa * eps), (pb, ib, sb * eps)]
        }
    };
    [mk(1.0, 1.0), mk(1.0, -1.0), mk(-1.0, 1.0), mk(-1.0, -1.0)]
}

#[derive(Clone, Copy)]
enum StencilPair {
    Intra(usize, usize, usize),
    Inter((usize, usize), (usize, usize)),
}

fn pair_list(pairs: &HessianPairs) -> Vec<(StencilPair, f64)> {
    let mut out = Vec::with_capacity(pairs.len());
    for &(p, i, j) in &pairs.intra {
        out.push((StencilPair::Intra(p, i, j), pairs.intra_scale));
    }
    for &(a, b) in &pairs.inter {
        out.push((StencilPair::Inter(a, b), pairs.inter_scale));
    }
    out
}

// ---------------------------------------------------------------------------
// Independence loss
// ---------------------------------------------------------------------------

/// Independence penalty for an arbitrary image-valued probe of per-module
/// latent vectors: the mean over output pixels of the summed squared mixed
/// second differences over the given pairs. This generic form is the seam the
/// analytic test maps plug into; production wraps the decoder pipeline.
pub fn independence_loss_probe<F>(
    mut probe: F,
    zs: &[Array1<f64>],
    pairs: &HessianPairs,
    eps: f64,
) -> f64
where
    F: FnMut(&[Array1<f64>]) -> Array3<f64>,
{
    let mut total = 0.0;
    for (pair, scale) in pair_list(pairs) {
        let mut imgs: Vec<Array3<f64>> = Vec::with_capacity(4);
        for deltas in stencil(pair, eps) {
            let mut perturbed: Vec<Array1<f64>> = zs.to_vec();
            for &(pos, dim, delta) in &deltas {
                perturbed[pos][dim] += delta;
            }
            imgs.push(probe(&perturbed));
        }
        let denom = 4.0 * eps * eps;
        let len = imgs[0].len() as f64;
        let mut acc = 0.0;
        for idx in 0..imgs[0].len() {
            let d = (imgs[0].as_slice().unwrap()[idx] - imgs[1].as_slice().unwrap()[idx]
                - imgs[2].as_slice().unwrap()[idx]
                + imgs[3].as_slice().unwrap()[idx])
                / denom;
            acc += d * d;
        }
        total += scale * acc / len;
    }
    total
}

/// Rebuild a candidate transform with per-module latent perturbations: exp-map
/// the perturbed modules, reuse stored transforms elsewhere, fold in ascending
/// order, right-multiply the identity.
fn rebuild_transform(
    cand: &Candidate,
    bases: &[lie::LieAlgebraBasisSet],
    ident: &Array2<f64>,
    deltas: &[(usize, usize, f64)],
) -> Result<Array2<f64>> {
    let mut acc: Option<Array2<f64>> = None;
    for (pos, latent) in cand.latents.iter().enumerate() {
        let local: Vec<(usize, f64)> = deltas
            .iter()
            .filter(|(p, _, _)| *p == pos)
            .map(|&(_, dim, delta)| (dim, delta))
            .collect();
        let t = if local.is_empty() {
            latent.transform.clone()
        } else {
            let mut z = latent.z.clone();
            for (dim, delta) in local {
                z[dim] += delta;
            }
            lie::exp_map(&z, &bases[pos])?
        };
        acc = Some(match acc {
            None => t,
            Some(p) => p.dot(&t),
        });
    }
    let comp = acc.ok_or_else(|| Error::invalid("candidate has no participating modules"))?;
    Ok(comp.dot(ident))
}

/// Compose a candidate transform from explicit per-module latent vectors.
fn transform_from_zs(
    zs: &[Array1<f64>],
    bases: &[lie::LieAlgebraBasisSet],
    ident: &Array2<f64>,
) -> Result<Array2<f64>> {
    let mut acc: Option<Array2<f64>> = None;
    for (z, b) in zs.iter().zip(bases.iter()) {
        let t = lie::exp_map(z, b)?;
        acc = Some(match acc {
            None => t,
            Some(p) => p.dot(&t),
        });
    }
    let comp = acc.ok_or_else(|| Error::invalid("no participating modules"))?;
    Ok(comp.dot(ident))
}

/// Independence loss of a real candidate through the decoder, one probe
/// evaluation at a time. The batched scoring path must agree with this.
pub fn independence_loss(
    pool: &ModulePool,
    cand: &Candidate,
    pairs: &HessianPairs,
    eps: f64,
) -> Result<f64> {
    let bases: Vec<_> = cand
        .latents
        .iter()
        .map(|l| pool.bases(l.module))
        .collect();
    let ident = pool.ident(cand.id.identity_index).transform();
    let zs: Vec<Array1<f64>> = cand.latents.iter().map(|l| l.z.clone()).collect();
    let mut failure: Option<Error> = None;
    let loss = independence_loss_probe(
        |perturbed| {
            match transform_from_zs(perturbed, &bases, &ident)
                .and_then(|t| pool.decoder().decode(&t))
            {
                Ok(img) => img,
                Err(e) => {
                    failure.get_or_insert(e);
                    Array3::zeros((1, 1, 1))
                }
            }
        },
        &zs,
        pairs,
        eps,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(loss),
    }
}

// ---------------------------------------------------------------------------
// Candidate scoring (batched, tape-free)
// ---------------------------------------------------------------------------

/// Decode in bounded chunks to keep peak memory flat.
fn decode_chunked(pool: &ModulePool, transforms: &[Array2<f64>]) -> Result<Array4<f64>> {
    const CHUNK: usize = 512;
    let side = pool.dims().image_side;
    let mut out = Array4::<f64>::zeros((transforms.len(), 3, side, side));
    let mut start = 0;
    while start < transforms.len() {
        let end = (start + CHUNK).min(transforms.len());
        let chunk = pool.decode_batch_raw(&transforms[start..end])?;
        out.slice_axis_mut(Axis(0), ndarray::Slice::from(start..end))
            .assign(&chunk);
        start = end;
    }
    Ok(out)
}

/// Score all candidates against the input: decode each candidate (plus its
/// Hessian probe quads) in one batched pass, then assemble
/// `S = -(L_img + L_ind + L_kl)` with KL summed over participating modules
/// only. Fills `reconstruction` and `score` on each candidate.
///
/// `pair_seed` fixes the per-candidate Hessian pair subsample; the winner's
/// training loss re-derives the identical pairs from the same seed.
pub fn score_candidates(
    x: &Array3<f64>,
    candidates: &mut [Candidate],
    pool: &ModulePool,
    cfg: &ObjectiveConfig,
    pair_seed: u64,
) -> Result<Vec<ScoreBreakdown>> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidates to score"));
    }
    let use_probes = cfg.lambda_ind != 0.0;
    let mut transforms: Vec<Array2<f64>> = Vec::new();
    let mut layout = Vec::with_capacity(candidates.len());
    let mut pair_sets = Vec::with_capacity(candidates.len());
    for (ci, cand) in candidates.iter().enumerate() {
        let base_idx = transforms.len();
        transforms.push(cand.transform.clone());
        let pairs = if use_probes {
            let ks: Vec<usize> = cand.latents.iter().map(|l| l.z.len()).collect();
            let mut rng = child_rng(pair_seed, "hpairs", &[ci as u64]);
            select_hessian_pairs(&ks, cfg.hessian_pairs_intra, cfg.hessian_pairs_inter, &mut rng)
        } else {
            HessianPairs {
                intra: Vec::new(),
                inter: Vec::new(),
                intra_scale: 1.0,
                inter_scale: 1.0,
            }
        };
        if use_probes && !pairs.is_empty() {
            let bases: Vec<_> = cand.latents.iter().map(|l| pool.bases(l.module)).collect();
            let ident = pool.ident(cand.id.identity_index).transform();
            for (pair, _) in pair_list(&pairs) {
                for deltas in stencil(pair, cfg.eps_fd) {
                    transforms.push(rebuild_transform(cand, &bases, &ident, &deltas)?);
                }
            }
        }
        layout.push(base_idx);
        pair_sets.push(pairs);
    }

    let images = decode_chunked(pool, &transforms)?;
    let mut breakdowns = Vec::with_capacity(candidates.len());
    for (ci, cand) in candidates.iter_mut().enumerate() {
        let base_idx = layout[ci];
        let recon = images.index_axis(Axis(0), base_idx).to_owned();
        let img_raw = image_loss(x, &recon)?;
        cand.reconstruction = Some(recon);

        let mut ind_raw = 0.0;
        if use_probes {
            let pairs = &pair_sets[ci];
            let denom = 4.0 * cfg.eps_fd * cfg.eps_fd;
            let mut offset = base_idx + 1;
            for (_, scale) in pair_list(pairs) {
                let q0 = images.index_axis(Axis(0), offset);
                let q1 = images.index_axis(Axis(0), offset + 1);
                let q2 = images.index_axis(Axis(0), offset + 2);
                let q3 = images.index_axis(Axis(0), offset + 3);
                offset += 4;
                let mut acc = 0.0;
                let (s0, s1, s2, s3) = (
                    q0.to_slice().unwrap(),
                    q1.to_slice().unwrap(),
                    q2.to_slice().unwrap(),
                    q3.to_slice().unwrap(),
                );
                for idx in 0..s0.len() {
                    let d = (s0[idx] - s1[idx] - s2[idx] + s3[idx]) / denom;
                    acc += d * d;
                }
                ind_raw += scale * acc / s0.len() as f64;
            }
        }

        let mut kl_raw = 0.0;
        for latent in &cand.latents {
            kl_raw += kl_loss(&latent.mu, &latent.sigma)?;
        }

        let img = cfg.lambda_img * img_raw;
        let ind = cfg.lambda_ind * ind_raw;
        let kl = cfg.lambda_kl * kl_raw;
        let score = -(img + ind + kl);
        cand.score = Some(score);
        breakdowns.push(ScoreBreakdown { img, ind, kl, score });
    }
    Ok(breakdowns)
}

/// Argmax of score; ties break toward the lowest enumeration index.
/// Non-finite scores never win; if no finite score exists that is an error.
pub fn select_winner(scores: &[ScoreBreakdown]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::invalid("select_winner needs a non-empty score list"));
    }
    let key = |s: &ScoreBreakdown| {
        if s.score.is_finite() {
            s.score
        } else {
            f64::NEG_INFINITY
        }
    };
    let mut best = 0usize;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if key(s) > key(&scores[best]) {
            best = i;
        }
    }
    if !scores[best].score.is_finite() {
        return Err(Error::NonFinite(format!(
            "winning score is not finite: {}",
            scores[best].score
        )));
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// ID classifier loss
// ---------------------------------------------------------------------------

fn classifier_features_raw(pool: &ModulePool, input: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let u = pool.dims().u;
    let flat = Array2::from_shape_vec((1, u * u), input.iter().copied().collect())
        .expect("transform is u*u");
    let mut h = flat;
    for name in ["fc1", "fc2"] {
        let w = pool
            .param(&format!("classifier/{name}/w"))
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let b = pool
            .param(&format!("classifier/{name}/b"))
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        h = crate::nn::ops::dense(&h.view(), &w.view(), Some(&b.view()));
        h.mapv_inplace(|v| v.max(0.0));
    }
    let features = h.row(0).to_owned();
    let w = pool
        .param("classifier/head/w")
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned();
    let b = pool
        .param("classifier/head/b")
        .view()
        .into_dimensionality::<ndarray::Ix1>()
        .unwrap()
        .to_owned();
    let logits = crate::nn::ops::dense(
        &h.view(),
        &w.view(),
        Some(&b.view()),
    )
    .row(0)
    .to_owned();
    (features, logits)
}

/// Cross-entropy of the classifier on the winning identity transform, plus
/// the squared L2 distance between classifier features of the identity and
/// the combined transform.
pub fn id_classifier_loss(
    pool: &ModulePool,
    t_ident: &Array2<f64>,
    t_combined: &Array2<f64>,
    shape_label: usize,
) -> Result<(f64, f64)> {
    if shape_label >= pool.dims().num_shapes {
        return Err(Error::invalid(format!(
            "shape label {shape_label} out of range for {} classes",
            pool.dims().num_shapes
        )));
    }
    let (feat_ident, logits) = classifier_features_raw(pool, t_ident);
    let (feat_comb, _) = classifier_features_raw(pool, t_combined);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_denom = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    let ce = log_denom - logits[shape_label];
    let feat_l2 = feat_ident
        .iter()
        .zip(feat_comb.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((ce, feat_l2))
}

// ---------------------------------------------------------------------------
// Winner total loss (tape)
// ---------------------------------------------------------------------------

/// Everything a training step needs back from one winner's loss graph.
#[derive(Debug)]
pub struct WinnerLoss {
    pub breakdown: LossBreakdown,
    pub gradients: Gradients,
    /// Score recomputed from the trained losses: -(img + ind + kl).
    pub score: f64,
}

/// Build the winner's full loss on a tape and backpropagate it.
///
/// Gradients flow only into the participating compositional modules, the
/// winning identity matrix, the decoder and (when enabled) the classifier;
/// every other parameter is absent from the graph entirely.
///
/// `eps_all` holds the reparameterization noise for all m modules (the same
/// draws scoring used); `cand_index` aligns the Hessian pair stream with
/// scoring's per-candidate subsample.
pub fn winner_total_loss(
    pool: &ModulePool,
    x: &Array3<f64>,
    winner: &Candidate,
    eps_all: &[Array1<f64>],
    shape_label: Option<usize>,
    cand_index: usize,
    cfg: &ObjectiveConfig,
    pair_seed: u64,
) -> Result<WinnerLoss> {
    let dims = pool.dims();
    let u = dims.u;
    if winner.latents.is_empty() {
        return Err(Error::invalid("winner carries no participating modules"));
    }
    if cfg.id_classifier && shape_label.is_none() {
        return Err(Error::invalid("id_classifier enabled but no shape label supplied"));
    }

    let mut tape = Tape::new();
    let x_const = tape.constant(x.clone().insert_axis(Axis(0)).into_dyn());

    // Per participating module: encode, reparameterize, exp-map.
    let mut z_vars = Vec::new();
    let mut mu_vars = Vec::new();
    let mut ls_vars = Vec::new();
    let mut exp_vars = Vec::new();
    let mut bases_vars = Vec::new();
    for latent in &winner.latents {
        let (mu, ls) = pool.encode_tape(&mut tape, latent.module, x)?;
        let sigma = tape.exp(ls);
        let eps = &eps_all[latent.module - 1];
        let eps_const = tape.constant(
            eps.clone()
                .into_shape_with_order(IxDyn(&[1, dims.k]))
                .expect("eps length k"),
        );
        let noise = tape.mul(sigma, eps_const);
        let z = tape.add(mu, noise);
        let b = pool.tape_param(&mut tape, &format!("comp/{}/bases", latent.module));
        let zb = tape.matmul(z, b);
        let m  = tape.reshape(zb, &[u, u]);
        let t = tape.mat_exp(m)?;
        z_vars.push(z);
        mu_vars.push(mu);
        ls_vars.push(ls);
        exp_vars.push(t);
        bases_vars.push(b);
    }
    let ident_var = pool.tape_param(
        &mut tape,
        &format!("ident/{}/matrix", winner.id.identity_index),
    );

    let compose = |tape: &mut Tape, parts: &[VarId], ident: VarId| -> VarId {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = tape.matmul(acc, p);
        }
        tape.matmul(acc, ident)
    };
    let base_transform = compose(&mut tape, &exp_vars, ident_var);
    let base_flat = tape.reshape(base_transform, &[1, u * u]);

    // Hessian probes: identical pair subsample as scoring.
    let use_probes = cfg.lambda_ind != 0.0;
    let pairs = if use_probes {
        let ks: Vec<usize> = winner.latents.iter().map(|l| l.z.len()).collect();
        let mut rng = child_rng(pair_seed, "hpairs", &[cand_index as u64]);
        select_hessian_pairs(&ks, cfg.hessian_pairs_intra, cfg.hessian_pairs_inter, &mut rng)
    } else {
        HessianPairs {
            intra: Vec::new(),
            inter: Vec::new(),
            intra_scale: 1.0,
            inter_scale: 1.0,
        }
    };
    let listed = pair_list(&pairs);
    let mut probe_flats = Vec::with_capacity(listed.len() * 4);
    for (pair, _) in &listed {
        for deltas in stencil(*pair, cfg.eps_fd) {
            let mut parts = exp_vars.clone();
            // Group deltas by position (intra pairs perturb one module twice).
            let mut by_pos: Vec<(usize, Vec<(usize, f64)>)> = Vec::new();
            for (pos, dim, delta) in deltas {
                match by_pos.iter_mut().find(|(p, _)| *p == pos) {
                    Some((_, v)) => v.push((dim, delta)),
                    None => by_pos.push((pos, vec![(dim, delta)])),
                }
            }
            for (pos, dim_deltas) in by_pos {
                let mut onehot = Array2::<f64>::zeros((1, dims.k));
                for (dim, delta) in dim_deltas {
                    onehot[[0, dim]] += delta;
                }
                let delta_const = tape.constant(onehot.into_dyn());
                let z_pert = tape.add(z_vars[pos], delta_const);
                let zb = tape.matmul(z_pert, bases_vars[pos]);
                let m = tape.reshape(zb, &[u, u]);
                parts[pos] = tape.mat_exp(m)?;
            }
            let t = compose(&mut tape, &parts, ident_var);
            probe_flats.push(tape.reshape(t, &[1, u * u]));
        }
    }

    let mut stack_inputs = vec![base_flat];
    stack_inputs.extend(probe_flats.iter().copied());
    let stacked = tape.concat0(&stack_inputs);
    let decoded = pool.decode_tape(&mut tape, stacked);

    // Image term.
    let recon = tape.narrow0(decoded, 0, 1);
    let diff = tape.sub(recon, x_const);
    let sq = tape.mul(diff, diff);
    let img_var = tape.mean_all(sq);

    // Independence term.
    let mut ind_var: Option<VarId> = None;
    let denom = 1.0 / (4.0 * cfg.eps_fd * cfg.eps_fd);
    for (pi, (_, scale)) in listed.iter().enumerate() {
        let off = 1 + pi * 4;
        let p0 = tape.narrow0(decoded, off, 1);
        let p1 = tape.narrow0(decoded, off + 1, 1);
        let p2 = tape.narrow0(decoded, off + 2, 1);
        let p3 = tape.narrow0(decoded, off + 3, 1);
        let a = tape.sub(p0, p1);
        let b = tape.sub(a, p2);
        let c = tape.add(b, p3);
        let d = tape.scale(c, denom);
        let dsq = tape.mul(d, d);
        let mean = tape.mean_all(dsq);
        let scaled = tape.scale(mean, *scale);
        ind_var = Some(match ind_var {
            None => scaled,
            Some(acc) => tape.add(acc, scaled),
        });
    }
    let ind_var = match ind_var {
        Some(v) => v,
        None => tape.constant(ndarray::ArrayD::zeros(IxDyn(&[]))),
    };

    // KL term over participating modules.
    let mut kl_var: Option<VarId> = None;
    for (mu, ls) in mu_vars.iter().zip(ls_vars.iter()) {
        let mu2 = tape.mul(*mu, *mu);
        let two_ls = tape.scale(*ls, 2.0);
        let sig2 = tape.exp(two_ls);
        let sum_terms = tape.add(mu2, sig2);
        let ones = tape.constant(ndarray::ArrayD::ones(IxDyn(&[1, dims.k])));
        let centered = tape.sub(sum_terms, ones);
        let inner = tape.sub(centered, two_ls);
        let summed = tape.sum_all(inner);
        let half = tape.scale(summed, 0.5);
        kl_var = Some(match kl_var {
            None => half,
            Some(acc) => tape.add(acc, half),
        });
    }
    let kl_var = kl_var.expect("at least one participating module");

    // Stability term: basis orthogonality penalty of participating modules.
    let mut extra_var: Option<VarId> = None;
    if cfg.lambda_extra != 0.0 {
        for &b in &bases_vars {
            for i in 0..dims.k {
                for j in 0..dims.k {
                    if i == j {
                        continue;
                    }
                    let row_i = tape.narrow0(b, i, 1);
                    let row_j = tape.narrow0(b, j, 1);
                    let a_i = tape.reshape(row_i, &[u, u]);
                    let a_j = tape.reshape(row_j, &[u, u]);
                    let prod = tape.matmul(a_i, a_j);
                    let sq = tape.mul(prod, prod);
                    let s = tape.sum_all(sq);
                    extra_var = Some(match extra_var {
                        None => s,
                        Some(acc) => tape.add(acc, s),
                    });
                }
            }
        }
    }
    let extra_var = match extra_var {
        Some(v) => v,
        None => tape.constant(ndarray::ArrayD::zeros(IxDyn(&[]))),
    };

    // Optional ID classifier terms.
    let idcls = if cfg.id_classifier {
        let label = shape_label.expect("checked above");
        if label >= dims.num_shapes {
            return Err(Error::invalid(format!(
                "shape label {label} out of range for {} classes",
                dims.num_shapes
            )));
        }
        let ident_flat = tape.reshape(ident_var, &[1, u * u]);
        let (feat_ident, logits) = pool.classifier_tape(&mut tape, ident_flat, false);
        let ce_var = tape.softmax_cross_entropy(logits, label)?;

        // Feature-matching trains the compositional side only: classifier
        // weights frozen, identity branch detached.
        let ident_detached = tape.detach(ident_var);
        let mut acc = exp_vars[0];
        for &p in &exp_vars[1..] {
            acc = tape.matmul(acc, p);
        }
        let combined = tape.matmul(acc, ident_detached);
        let combined_flat = tape.reshape(combined, &[1, u * u]);
        let (feat_comb, _) = pool.classifier_tape(&mut tape, combined_flat, true);
        let target = tape.detach(feat_ident);
        let fdiff = tape.sub(feat_comb, target);
        let fsq = tape.mul(fdiff, fdiff);
        let feat_var = tape.sum_all(fsq);

        let ce_w = tape.scale(ce_var, cfg.lambda_cls);
        let feat_w = tape.scale(feat_var, cfg.lambda_feat);
        Some(tape.add(ce_w, feat_w))
    } else {
        None
    };

    // Weighted total.
    let img_w = tape.scale(img_var, cfg.lambda_img);
    let ind_w = tape.scale(ind_var, cfg.lambda_ind);
    let kl_w = tape.scale(kl_var, cfg.lambda_kl);
    let extra_w = tape.scale(extra_var, cfg.lambda_extra);
    let mut total = tape.add(img_w, ind_w);
    total = tape.add(total, kl_w);
    total = tape.add(total, extra_w);
    if let Some(idcls_var) = idcls {
        total = tape.add(total, idcls_var);
    }

    let breakdown = LossBreakdown {
        img: tape.scalar(img_w),
        ind: tape.scalar(ind_w),
        kl: tape.scalar(kl_w),
        extra: tape.scalar(extra_w),
        idcls: idcls.map(|v| tape.scalar(v)),
        total: tape.scalar(total),
    };
    let score = -(breakdown.img + breakdown.ind + breakdown.kl);
    let gradients = tape.backward(total);
    Ok(WinnerLoss {
        breakdown,
        gradients,
        score,
    })
}

// Re-exported for shuffling in the trainer.
pub(crate) fn shuffle_indices(count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(rng);
    idx
}
