//! Candidate enumeration: every non-empty subset of compositional transforms,
//! composed in ascending module-index order, paired with every identity
//! transform (identity on the right). Enumeration order is deterministic:
//! subsets by (popcount, mask value), identities ascending within a subset.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::pool::CompForward;

/// Which modules produced a candidate. `subset_mask` bit i-1 set means
/// compositional module i participates; `identity_index` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct CombinationId {
    pub subset_mask: u32,
    pub identity_index: usize,
}

impl CombinationId {
    pub fn participating(&self) -> impl Iterator<Item = usize> + '_ {
        (0..u32::BITS as usize)
            .filter(move |i| self.subset_mask & (1 << i) != 0)
            .map(|i| i + 1)
    }

    pub fn popcount(&self) -> usize {
        self.subset_mask.count_ones() as usize
    }
}

/// Latent sample carried by a candidate for one participating module.
#[derive(Debug, Clone)]
pub struct ModuleLatent {
    /// 1-based compositional module index.
    pub module: usize,
    pub mu: Array1<f64>,
    pub sigma: Array1<f64>,
    pub z: Array1<f64>,
    /// exp-mapped transform of this module alone.
    pub transform: Array2<f64>,
}

/// One element of the candidate set: a combined transform plus everything the
/// objective needs to score and train it.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub id: CombinationId,
    pub transform: Array2<f64>,
    /// Participating modules in ascending index order.
    pub latents: Vec<ModuleLatent>,
    /// Filled by the objective when candidates are decoded.
    pub reconstruction: Option<ndarray::Array3<f64>>,
    /// Filled by the objective when candidates are scored.
    pub score: Option<f64>,
}

/// All 2^m - 1 subset products, ordered by (popcount, mask). Products fold in
/// ascending module-index order: T_1 * T_2 * ... for the participating set.
pub fn enumerate_compositional(transforms: &[Array2<f64>]) -> Result<Vec<(u32, Array2<f64>)>> {
    let m = transforms.len();
    if m == 0 {
        return Err(Error::invalid("need at least one compositional transform"));
    }
    if m > 31 {
        return Err(Error::invalid("subset enumeration supports at most 31 modules"));
    }
    let total = (1usize << m) - 1;
    // products[mask] via highest-bit recurrence: prefix-product * last factor.
    let mut products: Vec<Option<Array2<f64>>> = vec![None; total + 1];
    for mask in 1..=total {
        let last = usize::BITS as usize - 1 - mask.leading_zeros() as usize;
        let rest = mask & !(1 << last);
        let prod = if rest == 0 {
            transforms[last].clone()
        } else {
            products[rest]
                .as_ref()
                .expect("rest < mask already computed")
                .dot(&transforms[last])
        };
        products[mask] = Some(prod);
    }
    let mut masks: Vec<usize> = (1..=total).collect();
    masks.sort_by_key(|&mask| (mask.count_ones(), mask));
    Ok(masks
        .into_iter()
        .map(|mask| (mask as u32, products[mask].take().unwrap()))
        .collect())
}

/// Pair every subset product with every identity transform (right factor).
pub fn pair_with_identities(
    comps: &[(u32, Array2<f64>)],
    idents: &[Array2<f64>],
) -> Result<Vec<Candidate>> {
    if idents.is_empty() {
        return Err(Error::invalid("need at least one identity transform"));
    }
    if comps.is_empty() {
        return Err(Error::invalid("need at least one compositional product"));
    }
    let mut out = Vec::with_capacity(comps.len() * idents.len());
    for (mask, comp) in comps {
        for (j, ident) in idents.iter().enumerate() {
            out.push(Candidate {
                id: CombinationId {
                    subset_mask: *mask,
                    identity_index: j + 1,
                },
                transform: comp.dot(ident),
                latents: Vec::new(),
                reconstruction: None,
                score: None,
            });
        }
    }
    Ok(out)
}

/// Full candidate construction from per-module forwards and identity
/// transforms; attaches the participating latents to each candidate.
pub fn build_candidates(
    forwards: &[CompForward],
    idents: &[Array2<f64>],
) -> Result<Vec<Candidate>> {
    let transforms: Vec<Array2<f64>> = forwards.iter().map(|f| f.transform.clone()).collect();
    let comps = enumerate_compositional(&transforms)?;
    let mut candidates = pair_with_identities(&comps, idents)?;
    for cand in &mut candidates {
        cand.latents = cand
            .id
            .participating()
            .map(|module| {
                let f = &forwards[module - 1];
                ModuleLatent {
                    module,
                    mu: f.mu.clone(),
                    sigma: f.sigma.clone(),
                    z: f.z.clone(),
                    transform: f.transform.clone(),
                }
            })
            .collect();
    }
    Ok(candidates)
}
