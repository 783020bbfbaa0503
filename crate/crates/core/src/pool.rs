//! The module pool: m input-observing compositional encoders, n input-blind
//! learnable identity transforms, one shared decoder, and the optional
//! shape classifier. All trainable state lives in a flat name -> tensor map
//! so the tape, the optimizer and the checkpoint format agree on layout.
//!
//! Identity modules are the only piece with no forward path from an image:
//! their accessor takes no input by construction.

use indexmap::IndexMap;
use ndarray::{Array1, Array2, Array3, Array4, ArrayD, IxDyn, s};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::lie::LieAlgebraBasisSet;
use crate::nn::ops;
use crate::nn::{Tape, VarId};
use crate::rng::child_rng;

/// Pool-wide dimensions. `u` is the transform side, `k` the latent length per
/// compositional module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    pub m: usize,
    pub n: usize,
    pub u: usize,
    pub k: usize,
    pub image_side: usize,
    pub num_shapes: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 || self.n < 1 {
            return Err(Error::invalid("need at least one module of each kind"));
        }
        if self.u < 2 {
            return Err(Error::invalid("transform side u must be >= 2"));
        }
        if self.k < 1 {
            return Err(Error::invalid("latent dimension k must be >= 1"));
        }
        if self.image_side != 32 && self.image_side != 64 {
            return Err(Error::invalid("image side must be 32 or 64"));
        }
        if self.num_shapes < 1 {
            return Err(Error::invalid("need at least one shape class"));
        }
        Ok(())
    }

    /// Encoder output spatial side after four stride-2 convolutions.
    fn encoder_tail_side(&self) -> usize {
        self.image_side / 16
    }

    fn encoder_flat(&self) -> usize {
        self.encoder_tail_side() * self.encoder_tail_side() * 64
    }
}

/// Encoder channel plan: 4 conv layers, stride 2, channels 32-32-64-64.
const ENC_CHANNELS: [(usize, usize); 4] = [(3, 32), (32, 32), (32, 64), (64, 64)];
/// Decoder transposed-conv plan mirrors the encoder: 64-64-32-32 then RGB.
const DEC_CHANNELS: [(usize, usize); 4] = [(64, 64), (64, 32), (32, 32), (32, 3)];
const DEC_BASE_SIDE: usize = 4;
const DEC_FC_UNITS: usize = DEC_BASE_SIDE * DEC_BASE_SIDE * 64;
const ENC_FC_UNITS: usize = 256;
const CLS_HIDDEN: [usize; 2] = [128, 64];
/// Identity matrices start at I plus this much Gaussian jitter.
const IDENT_INIT_STD: f64 = 0.01;

/// Transposed-conv (kernel, stride) per decoder layer. For 32x32 output the
/// stride-1 layer sits first, at 4x4, where it is cheapest.
fn decoder_plan(image_side: usize) -> [(usize, usize); 4] {
    if image_side == 32 {
        [(3, 1), (4, 2), (4, 2), (4, 2)]
    } else {
        [(4, 2), (4, 2), (4, 2), (4, 2)]
    }
}

pub struct ModulePool {
    dims: ModelDims,
    params: IndexMap<String, ArrayD<f64>>,
    basis_init_std: f64,
}

impl ModulePool {
    /// Deterministically initialize all parameters from `seed`.
    pub fn init(dims: ModelDims, seed: u64, basis_init_std: f64) -> Result<Self> {
        dims.validate()?;
        let mut pool = Self {
            dims,
            params: IndexMap::new(),
            basis_init_std,
        };
        for i in 1..=dims.m {
            pool.init_encoder(i, seed);
        }
        for j in 1..=dims.n {
            pool.init_identity(j, seed);
        }
        pool.init_decoder(seed);
        pool.init_classifier(seed);
        Ok(pool)
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn params(&self) -> &IndexMap<String, ArrayD<f64>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut IndexMap<String, ArrayD<f64>> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> &ArrayD<f64> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// View of compositional module i (1-based).
    pub fn comp(&self, index: usize) -> CompositionalModule<'_> {
        assert!(index >= 1 && index <= self.dims.m, "module index out of range");
        CompositionalModule { pool: self, index }
    }

    /// View of identity module j (1-based).
    pub fn ident(&self, index: usize) -> IdentityModule<'_> {
        assert!(index >= 1 && index <= self.dims.n, "identity index out of range");
        IdentityModule { pool: self, index }
    }

    pub fn decoder(&self) -> Decoder<'_> {
        Decoder { pool: self }
    }

    fn insert_normal(&mut self, name: String, shape: &[usize], std: f64, seed: u64) {
        let mut rng = child_rng(seed, "init", &[crate::rng::name_hash(&name)]);
        let dist = Normal::new(0.0, std).expect("std must be finite");
        let value = ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(&mut rng));
        self.params.insert(name, value);
    }

    fn insert_zeros(&mut self, name: String, shape: &[usize]) {
        self.params.insert(name, ArrayD::zeros(IxDyn(shape)));
    }

    fn init_encoder(&mut self, i: usize, seed: u64) {
        for (l, (cin, cout)) in ENC_CHANNELS.iter().enumerate() {
            let fan_in = cin * 16;
            let std = (2.0 / fan_in as f64).sqrt();
            self.insert_normal(
                format!("comp/{i}/conv{}/w", l + 1),
                &[*cout, *cin, 4, 4],
                std,
                seed,
            );
            self.insert_zeros(format!("comp/{i}/conv{}/b", l + 1), &[*cout]);
        }
        let flat = self.dims.encoder_flat();
        let std = (2.0 / flat as f64).sqrt();
        self.insert_normal(format!("comp/{i}/fc/w"), &[flat, ENC_FC_UNITS], std, seed);
        self.insert_zeros(format!("comp/{i}/fc/b"), &[ENC_FC_UNITS]);
        // Heads start at zero: mu = 0, sigma = 1 for any input at init.
        self.insert_zeros(format!("comp/{i}/mu/w"), &[ENC_FC_UNITS, self.dims.k]);
        self.insert_zeros(format!("comp/{i}/mu/b"), &[self.dims.k]);
        self.insert_zeros(format!("comp/{i}/logsig/w"), &[ENC_FC_UNITS, self.dims.k]);
        self.insert_zeros(format!("comp/{i}/logsig/b"), &[self.dims.k]);
        self.insert_normal(
            format!("comp/{i}/bases"),
            &[self.dims.k, self.dims.u * self.dims.u],
            self.basis_init_std,
            seed,
        );
    }

    fn init_identity(&mut self, j: usize, seed: u64) {
        let u = self.dims.u;
        let name = format!("ident/{j}/matrix");
        let mut rng = child_rng(seed, "init", &[crate::rng::name_hash(&name)]);
        let dist = Normal::new(0.0, IDENT_INIT_STD).expect("finite std");
        let mut m = Array2::<f64>::eye(u);
        m.mapv_inplace(|v| v + dist.sample(&mut rng));
        self.params.insert(name, m.into_dyn());
    }

    fn init_decoder(&mut self, seed: u64) {
        let u2 = self.dims.u * self.dims.u;
        let std = (2.0 / u2 as f64).sqrt();
        self.insert_normal("decoder/fc/w".to_string(), &[u2, DEC_FC_UNITS], std, seed);
        self.insert_zeros("decoder/fc/b".to_string(), &[DEC_FC_UNITS]);
        let plan = decoder_plan(self.dims.image_side);
        for (l, ((cin, cout), (kernel, _))) in DEC_CHANNELS.iter().zip(plan.iter()).enumerate() {
            let fan_in = cin * kernel * kernel;
            let std = (2.0 / fan_in as f64).sqrt();
            self.insert_normal(
                format!("decoder/tconv{}/w", l + 1),
                &[*cin, *cout, *kernel, *kernel],
                std,
                seed,
            );
            self.insert_zeros(format!("decoder/tconv{}/b", l + 1), &[*cout]);
        }
    }

    fn init_classifier(&mut self, seed: u64) {
        let u2 = self.dims.u * self.dims.u;
        let dims = [u2, CLS_HIDDEN[0], CLS_HIDDEN[1], self.dims.num_shapes];
        let names = ["fc1", "fc2", "head"];
        for (l, name) in names.iter().enumerate() {
            let std = (2.0 / dims[l] as f64).sqrt();
            self.insert_normal(
                format!("classifier/{name}/w"),
                &[dims[l], dims[l + 1]],
                std,
                seed,
            );
            self.insert_zeros(format!("classifier/{name}/b"), &[dims[l + 1]]);
        }
    }

    fn check_image_shape(&self, x: &Array3<f64>) -> Result<()> {
        let side = self.dims.image_side;
        if x.dim() != (3, side, side) {
            return Err(Error::invalid(format!(
                "image shape {:?} does not match configured (3, {side}, {side})",
                x.dim()
            )));
        }
        Ok(())
    }

    /// Raw (tape-free) encoder forward for one image: (mu, sigma).
    fn encode_raw(&self, index: usize, x: &Array3<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        self.check_image_shape(x)?;
        let mut h = x
            .clone()
            .insert_axis(ndarray::Axis(0))
            .into_dimensionality::<ndarray::Ix4>()
            .expect("rank 4");
        for l in 1..=4 {
            let w = as4(self.param(&format!("comp/{index}/conv{l}/w")));
            let b = as1(self.param(&format!("comp/{index}/conv{l}/b")));
            h = ops::conv2d(&h.view(), &w.view(), Some(&b.view()), 2, 1);
            h.mapv_inplace(|v| v.max(0.0));
        }
        let flat = h
            .into_shape_with_order((1, self.dims.encoder_flat()))
            .expect("flatten");
        let w = as2(self.param(&format!("comp/{index}/fc/w")));
        let b = as1(self.param(&format!("comp/{index}/fc/b")));
        let mut hidden = ops::dense(&flat.view(), &w.view(), Some(&b.view()));
        hidden.mapv_inplace(|v| v.max(0.0));
        let mu_w = as2(self.param(&format!("comp/{index}/mu/w")));
        let mu_b = as1(self.param(&format!("comp/{index}/mu/b")));
        let mu = ops::dense(&hidden.view(), &mu_w.view(), Some(&mu_b.view()));
        let ls_w = as2(self.param(&format!("comp/{index}/logsig/w")));
        let ls_b = as1(self.param(&format!("comp/{index}/logsig/b")));
        let log_sigma = ops::dense(&hidden.view(), &ls_w.view(), Some(&ls_b.view()));
        let sigma = log_sigma.mapv(f64::exp);
        Ok((mu.row(0).to_owned(), sigma.row(0).to_owned()))
    }

    /// Raw batched decoder forward: transforms (each u x u) -> images (N,3,H,W).
    pub fn decode_batch_raw(&self, transforms: &[Array2<f64>]) -> Result<Array4<f64>> {
        let u = self.dims.u;
        let n = transforms.len();
        if n == 0 {
            return Err(Error::invalid("decode_batch_raw needs at least one transform"));
        }
        let mut flat = Array2::<f64>::zeros((n, u * u));
        for (r, t) in transforms.iter().enumerate() {
            if t.dim() != (u, u) {
                return Err(Error::invalid(format!(
                    "transform side {:?} does not match configured u={u}",
                    t.dim()
                )));
            }
            flat.row_mut(r)
                .assign(&ndarray::ArrayView1::from_shape(u * u, t.as_slice().unwrap()).unwrap());
        }
        let w = as2(self.param("decoder/fc/w"));
        let b = as1(self.param("decoder/fc/b"));
        let mut hidden = ops::dense(&flat.view(), &w.view(), Some(&b.view()));
        hidden.mapv_inplace(|v| v.max(0.0));
        let mut h = hidden
            .into_shape_with_order((n, 64, DEC_BASE_SIDE, DEC_BASE_SIDE))
            .expect("decoder base reshape");
        let plan = decoder_plan(self.dims.image_side);
        for (l, &(_, stride)) in plan.iter().enumerate() {
            let w = as4(self.param(&format!("decoder/tconv{}/w", l + 1)));
            let b = as1(self.param(&format!("decoder/tconv{}/b", l + 1)));
            h = ops::conv2d_transpose(&h.view(), &w.view(), Some(&b.view()), stride, 1);
            if l + 1 < plan.len() {
                h.mapv_inplace(|v| v.max(0.0));
            } else {
                h.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp()));
            }
        }
        Ok(h)
    }

    /// Tape encoder forward; returns (mu, log_sigma) vars of shape (1,k).
    pub fn encode_tape(
        &self,
        tape: &mut Tape,
        index: usize,
        x: &Array3<f64>,
    ) -> Result<(VarId, VarId)> {
        self.check_image_shape(x)?;
        let x4 = x.clone().insert_axis(ndarray::Axis(0)).into_dyn();
        let h = tape.constant(x4);
        Ok(self.encode_tape_var(tape, index, h))
    }

    /// Tape encoder forward from an existing (1,3,H,W) var.
    pub fn encode_tape_var(&self, tape: &mut Tape, index: usize, x: VarId) -> (VarId, VarId) {
        let mut h = x;
        for l in 1..=4 {
            let w = self.tape_param(tape, &format!("comp/{index}/conv{l}/w"));
            let b = self.tape_param(tape, &format!("comp/{index}/conv{l}/b"));
            h = tape.conv2d(h, w, b, 2, 1);
            h = tape.relu(h);
        }
        let flat = tape.reshape(h, &[1, self.dims.encoder_flat()]);
        let w = self.tape_param(tape, &format!("comp/{index}/fc/w"));
        let b = self.tape_param(tape, &format!("comp/{index}/fc/b"));
        let hidden = tape.matmul(flat, w);
        let hidden = tape.bias_add2(hidden, b);
        let hidden = tape.relu(hidden);
        let mu_w = self.tape_param(tape, &format!("comp/{index}/mu/w"));
        let mu_b = self.tape_param(tape, &format!("comp/{index}/mu/b"));
        let mu = tape.matmul(hidden, mu_w);
        let mu = tape.bias_add2(mu, mu_b);
        let ls_w = self.tape_param(tape, &format!("comp/{index}/logsig/w"));
        let ls_b = self.tape_param(tape, &format!("comp/{index}/logsig/b"));
        let ls = tape.matmul(hidden, ls_w);
        let ls = tape.bias_add2(ls, ls_b);
        (mu, ls)
    }

    /// Tape decoder forward on a (N, u*u) var of flattened transforms.
    pub fn decode_tape(&self, tape: &mut Tape, flat: VarId) -> VarId {
        let n = tape.value(flat).shape()[0];
        let w = self.tape_param(tape, "decoder/fc/w");
        let b = self.tape_param(tape, "decoder/fc/b");
        let hidden = tape.matmul(flat, w);
        let hidden = tape.bias_add2(hidden, b);
        let hidden = tape.relu(hidden);
        let mut h = tape.reshape(hidden, &[n, 64, DEC_BASE_SIDE, DEC_BASE_SIDE]);
        let plan = decoder_plan(self.dims.image_side);
        for (l, (_, stride)) in plan.iter().enumerate() {
            let w = self.tape_param(tape, &format!("decoder/tconv{}/w", l + 1));
            let b = self.tape_param(tape, &format!("decoder/tconv{}/b", l + 1));
            h = tape.conv2d_transpose(h, w, b, *stride, 1);
            if l + 1 < plan.len() {
                h = tape.relu(h);
            } else {
                h = tape.sigmoid(h);
            }
        }
        h
    }

    /// Tape classifier forward on a (1, u*u) var. Returns (features, logits).
    /// With `frozen` the classifier weights enter as constants, so the term
    /// trains the input branch only.
    pub fn classifier_tape(&self, tape: &mut Tape, input: VarId, frozen: bool) -> (VarId, VarId) {
        let mut h = input;
        for name in ["fc1", "fc2"] {
            let w = self.tape_param_maybe_frozen(tape, &format!("classifier/{name}/w"), frozen);
            let b = self.tape_param_maybe_frozen(tape, &format!("classifier/{name}/b"), frozen);
            h = tape.matmul(h, w);
            h = tape.bias_add2(h, b);
            h = tape.relu(h);
        }
        let features = h;
        let w = self.tape_param_maybe_frozen(tape, "classifier/head/w", frozen);
        let b = self.tape_param_maybe_frozen(tape, "classifier/head/b", frozen);
        let logits = tape.matmul(features, w);
        let logits = tape.bias_add2(logits, b);
        (features, logits)
    }

    pub fn tape_param(&self, tape: &mut Tape, name: &str) -> VarId {
        tape.param(name, self.param(name).clone())
    }

    fn tape_param_maybe_frozen(&self, tape: &mut Tape, name: &str, frozen: bool) -> VarId {
        if frozen {
            tape.constant(self.param(name).clone())
        } else {
            self.tape_param(tape, name)
        }
    }

    /// Basis set of compositional module i.
    pub fn bases(&self, index: usize) -> LieAlgebraBasisSet {
        let flat = as2(self.param(&format!("comp/{index}/bases")));
        LieAlgebraBasisSet::from_flat(self.dims.u, &flat).expect("stored bases are valid")
    }
}

/// z = mu + sigma * eps, elementwise.
pub fn reparameterize(
    mu: &Array1<f64>,
    sigma: &Array1<f64>,
    eps: &Array1<f64>,
) -> Result<Array1<f64>> {
    if mu.len() != sigma.len() || mu.len() != eps.len() {
        return Err(Error::invalid(format!(
            "reparameterize length mismatch: mu {}, sigma {}, eps {}",
            mu.len(),
            sigma.len(),
            eps.len()
        )));
    }
    Ok(mu + &(sigma * eps))
}

/// Input-observing module view. Owns nothing; reads pool parameters.
pub struct CompositionalModule<'a> {
    pool: &'a ModulePool,
    index: usize,
}

/// Everything one compositional forward produces; kept for loss computation.
#[derive(Debug, Clone)]
pub struct CompForward {
    pub transform: Array2<f64>,
    pub mu: Array1<f64>,
    pub sigma: Array1<f64>,
    pub z: Array1<f64>,
}

impl<'a> CompositionalModule<'a> {
    pub fn index(&self) -> usize {
        self.index
    }

    /// Posterior parameters for an image: (mu, sigma), sigma > 0 elementwise.
    pub fn encode(&self, x: &Array3<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        self.pool.encode_raw(self.index, x)
    }

    pub fn bases(&self) -> LieAlgebraBasisSet {
        self.pool.bases(self.index)
    }

    /// Full forward: encode, reparameterize with the given noise, exp-map.
    pub fn forward(&self, x: &Array3<f64>, eps: &Array1<f64>) -> Result<CompForward> {
        let (mu, sigma) = self.encode(x)?;
        let z = reparameterize(&mu, &sigma, eps)?;
        let transform = crate::lie::exp_map(&z, &self.bases())?;
        Ok(CompForward {
            transform,
            mu,
            sigma,
            z,
        })
    }
}

/// Input-blind module view: no method here accepts an image.
pub struct IdentityModule<'a> {
    pool: &'a ModulePool,
    index: usize,
}

impl<'a> IdentityModule<'a> {
    pub fn index(&self) -> usize {
        self.index
    }

    /// The current learnable matrix; changes only via optimizer steps.
    pub fn transform(&self) -> Array2<f64> {
        as2(self.pool.param(&format!("ident/{}/matrix", self.index)))
    }
}

pub struct Decoder<'a> {
    pool: &'a ModulePool,
}

impl<'a> Decoder<'a> {
    /// Decode one transform into an image (3,H,W) with values in [0,1].
    pub fn decode(&self, transform: &Array2<f64>) -> Result<Array3<f64>> {
        let batch = self.pool.decode_batch_raw(std::slice::from_ref(transform))?;
        Ok(batch.slice(s![0, .., .., ..]).to_owned())
    }

    pub fn decode_batch(&self, transforms: &[Array2<f64>]) -> Result<Array4<f64>> {
        self.pool.decode_batch_raw(transforms)
    }
}

fn as1(v: &ArrayD<f64>) -> Array1<f64> {
    v.view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("1-d param")
        .to_owned()
}

fn as2(v: &ArrayD<f64>) -> Array2<f64> {
    v.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("2-d param")
        .to_owned()
}

fn as4(v: &ArrayD<f64>) -> Array4<f64> {
    v.view()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("4-d param")
        .to_owned()
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"IMNCKPT1";

/// JSON metadata block stored in every checkpoint.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub u: usize,
    pub k: usize,
    pub m: usize,
    pub n: usize,
    pub image_shape: [usize; 3],
    pub num_shapes: usize,
    pub seed: u64,
    pub step: u64,
}

/// Write an archive of named tensors plus the metadata block.
pub fn save_checkpoint(
    path: &std::path::Path,
    meta: &CheckpointMeta,
    tensors: &IndexMap<String, ArrayD<f64>>,
) -> Result<()> {
    use std::io::Write;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    let meta_json = serde_json::to_vec(meta).expect("meta serializes");
    buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(tensor.ndim() as u8);
        for d in tensor.shape() {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in tensor.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    file.write_all(&buf)
        .map_err(|e| Error::io(path.to_path_buf(), e))?;
    Ok(())
}

pub fn load_checkpoint(
    path: &std::path::Path,
) -> Result<(CheckpointMeta, IndexMap<String, ArrayD<f64>>)> {
    let data = std::fs::read(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let mut cur = 0usize;
    let take = |cur: &mut usize, len: usize| -> Result<&[u8]> {
        if *cur + len > data.len() {
            return Err(Error::format(format!(
                "checkpoint truncated at byte {} of {}",
                *cur,
                data.len()
            )));
        }
        let s = &data[*cur..*cur + len];
        *cur += len;
        Ok(s)
    };
    let magic = take(&mut cur, 8)?;
    if magic != CKPT_MAGIC {
        return Err(Error::format("not a checkpoint file (bad magic)"));
    }
    let meta_len = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
    let meta: CheckpointMeta = serde_json::from_slice(take(&mut cur, meta_len)?)
        .map_err(|e| Error::format(format!("checkpoint metadata: {e}")))?;
    let count = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
    let mut tensors = IndexMap::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut cur, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut cur, name_len)?.to_vec())
            .map_err(|_| Error::format("tensor name is not utf-8"))?;
        let ndim = take(&mut cur, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize);
        }
        let len: usize = shape.iter().product();
        let bytes = take(&mut cur, len * 8)?;
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = ArrayD::from_shape_vec(IxDyn(&shape), values)
            .map_err(|e| Error::format(format!("tensor {name}: {e}")))?;
        tensors.insert(name, tensor);
    }
    Ok((meta, tensors))
}

impl ModulePool {
    /// Save model parameters (plus any extra tensors, e.g. optimizer state).
    pub fn save(
        &self,
        path: &std::path::Path,
        seed: u64,
        step: u64,
        extra: &IndexMap<String, ArrayD<f64>>,
    ) -> Result<()> {
        let side = self.dims.image_side;
        let meta = CheckpointMeta {
            u: self.dims.u,
            k: self.dims.k,
            m: self.dims.m,
            n: self.dims.n,
            image_shape: [side, side, 3],
            num_shapes: self.dims.num_shapes,
            seed,
            step,
        };
        let mut tensors = self.params.clone();
        for (name, tensor) in extra {
            tensors.insert(name.clone(), tensor.clone());
        }
        save_checkpoint(path, &meta, &tensors)
    }

    /// Load a pool; returns extra (non-model) tensors separately.
    pub fn load(
        path: &std::path::Path,
    ) -> Result<(Self, CheckpointMeta, IndexMap<String, ArrayD<f64>>)> {
        let (meta, tensors) = load_checkpoint(path)?;
        let dims = ModelDims {
            m: meta.m,
            n: meta.n,
            u: meta.u,
            k: meta.k,
            image_side: meta.image_shape[0],
            num_shapes: meta.num_shapes,
        };
        dims.validate()?;
        let template = ModulePool::init(dims, meta.seed, 0.05)?;
        let mut params = IndexMap::new();
        let mut extra = IndexMap::new();
        for (name, tensor) in tensors {
            if template.params.contains_key(&name) {
                let expected = template.params[&name].shape();
                if tensor.shape() != expected {
                    return Err(Error::format(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        tensor.shape(),
                        expected
                    )));
                }
                params.insert(name, tensor);
            } else {
                extra.insert(name, tensor);
            }
        }
        for name in template.params.keys() {
            if !params.contains_key(name) {
                return Err(Error::format(format!("checkpoint is missing tensor {name}")));
            }
        }
        // Preserve canonical ordering.
        let mut ordered = IndexMap::with_capacity(params.len());
        for name in template.params.keys() {
            ordered.insert(name.clone(), params.shift_remove(name).unwrap());
        }
        Ok((
            Self {
                dims,
                params: ordered,
                basis_init_std: 0.05,
            },
            meta,
            extra,
        ))
    }
}
