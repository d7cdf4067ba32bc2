//! The multimodal VAE: one encoder and one decoder per modality, subset
//! posteriors by dependent-expert consensus, and learnable subset weights.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};

use crate::autodiff::{
    encoder_heads, forward_mlp, load_checkpoint, save_checkpoint, BoundMlp, Matrix, MlpParams, NodeId, Tape,
};
use crate::consensus::precision_weights;
use crate::data::{ModalityData, MultimodalDataset};
use crate::elbo::{objective_on_tape, LikelihoodFamily, LikelihoodSpec, PiPlacement, SubsetWeights};
use crate::error::{arg_err, Error, Result};
use crate::gaussian::{enumerate_subsets, CorrelationSpec, SubsetMask};

/// Shapes and fixed hyperparameters of a [`CodeVae`].
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub dims: Vec<usize>,
    pub families: Vec<LikelihoodFamily>,
    pub rho: CorrelationSpec,
}

impl Architecture {
    pub fn for_dataset(ds: &MultimodalDataset, latent_dim: usize, hidden: Vec<usize>, rho: CorrelationSpec) -> Self {
        Self { latent_dim, hidden, dims: ds.dims(), families: ds.families.clone(), rho }
    }

    pub fn modalities(&self) -> usize {
        self.dims.len()
    }

    fn encoder_input_dim(&self, m: usize) -> usize {
        match self.families[m] {
            LikelihoodFamily::Categorical { classes } => classes,
            _ => self.dims[m],
        }
    }

    pub fn likelihood(&self) -> Result<LikelihoodSpec> {
        LikelihoodSpec::from_dims(self.families.clone(), &self.dims)
    }
}

/// Loss-side settings that do not change the parameter shapes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSettings {
    pub beta: f64,
    pub entropy_scale: f64,
    pub placement: PiPlacement,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodeVae {
    arch: Architecture,
    subsets: Vec<SubsetMask>,
    likelihood: LikelihoodSpec,
    encoders: Vec<MlpParams>,
    decoders: Vec<MlpParams>,
    pi_logits: Matrix,
}

/// Encoder means and stds for one batch, one `rows x D` pair per modality.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub means: Vec<Matrix>,
    pub stds: Vec<Matrix>,
}

/// Nodes of one recorded minibatch objective.
#[derive(Debug, Clone)]
pub struct ObjectiveGraph {
    pub objective: NodeId,
    /// Parameter leaves, in [`CodeVae::params`] order.
    pub params: Vec<NodeId>,
    /// `K x 1` batch-mean reconstruction terms.
    pub recon: NodeId,
    /// `K x 1` batch-mean KL terms.
    pub kl: NodeId,
    pub encoder_calls: usize,
}

/// Encoder input: real features as-is, class indices one-hot.
pub fn encoder_input(data: &ModalityData, family: LikelihoodFamily) -> Result<Matrix> {
    match (data, family) {
        (ModalityData::Real(x), _) => Ok(x.clone()),
        (ModalityData::Categorical(v), LikelihoodFamily::Categorical { classes }) => {
            let mut m = Matrix::zeros(v.len(), classes);
            for (r, c) in v.iter().enumerate() {
                m.set(r, *c, 1.0);
            }
            Ok(m)
        }
        _ => arg_err("categorical data needs a categorical likelihood"),
    }
}

impl CodeVae {
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        let m = arch.modalities();
        if m == 0 || arch.families.len() != m || arch.latent_dim == 0 {
            return arg_err("architecture needs modalities and a positive latent size");
        }
        let subsets = enumerate_subsets(m)?;
        let likelihood = arch.likelihood()?;
        let mut encoders = Vec::with_capacity(m);
        let mut decoders = Vec::with_capacity(m);
        for i in 0..m {
            let mut sizes = vec![arch.encoder_input_dim(i)];
            sizes.extend(&arch.hidden);
            sizes.push(2 * arch.latent_dim);
            encoders.push(MlpParams::new(&sizes, rng)?);
        }
        for i in 0..m {
            let mut sizes = vec![arch.latent_dim];
            sizes.extend(arch.hidden.iter().rev());
            sizes.push(arch.encoder_input_dim(i));
            decoders.push(MlpParams::new(&sizes, rng)?);
        }
        let pi_logits = Matrix::zeros(1, subsets.len());
        Ok(Self { arch, subsets, likelihood, encoders, decoders, pi_logits })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn subsets(&self) -> &[SubsetMask] {
        &self.subsets
    }

    pub fn likelihood(&self) -> &LikelihoodSpec {
        &self.likelihood
    }

    pub fn rho(&self) -> f64 {
        self.arch.rho.rho()
    }

    pub fn subset_weights(&self) -> SubsetWeights {
        SubsetWeights::from_logits(self.pi_logits.as_slice().to_vec()).expect("finite logits")
    }

    pub fn pi(&self) -> Vec<f64> {
        self.subset_weights().pi()
    }

    /// Position of the subset-weight logits in [`CodeVae::params`].
    pub fn pi_param_index(&self) -> usize {
        self.params().len() - 1
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = self.encoders.iter().flat_map(|e| e.params()).collect();
        out.extend(self.decoders.iter().flat_map(|d| d.params()));
        out.push(&self.pi_logits);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = self.encoders.iter_mut().flat_map(|e| e.params_mut()).collect();
        out.extend(self.decoders.iter_mut().flat_map(|d| d.params_mut()));
        out.push(&mut self.pi_logits);
        out
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.params().iter().map(|p| p.shape()).collect()
    }

    fn check_batch(&self, batch: &MultimodalDataset) -> Result<()> {
        if batch.dims() != self.arch.dims || batch.families != self.arch.families {
            return arg_err(format!(
                "batch modalities {:?} do not match the model's {:?}",
                batch.dims(),
                self.arch.dims
            ));
        }
        if batch.is_empty() {
            return arg_err("empty batch");
        }
        Ok(())
    }

    /// Records the minibatch objective with one shared noise draw `eps`
    /// (`rows x D`) reused by every subset.
    pub fn build_objective(
        &self,
        tape: &mut Tape,
        batch: &MultimodalDataset,
        eps: &Matrix,
        settings: ObjectiveSettings,
    ) -> Result<ObjectiveGraph> {
        self.check_batch(batch)?;
        let rows = batch.len();
        let d = self.arch.latent_dim;
        if eps.shape() != (rows, d) {
            return arg_err(format!("noise shape {:?}, expected ({rows}, {d})", eps.shape()));
        }
        let enc: Vec<BoundMlp> = self.encoders.iter().map(|e| e.bind(tape)).collect();
        let dec: Vec<BoundMlp> = self.decoders.iter().map(|e| e.bind(tape)).collect();
        let logits = tape.leaf(self.pi_logits.clone());
        let mut params: Vec<NodeId> = enc.iter().flat_map(|b| b.layers.iter().flat_map(|(w, b)| [*w, *b])).collect();
        params.extend(dec.iter().flat_map(|b| b.layers.iter().flat_map(|(w, b)| [*w, *b])));
        params.push(logits);

        let mut means = Vec::with_capacity(enc.len());
        let mut stds = Vec::with_capacity(enc.len());
        for (m, bound) in enc.iter().enumerate() {
            let x = tape.leaf(encoder_input(&batch.modalities[m], batch.families[m])?);
            let out = forward_mlp(bound, tape, x)?;
            let (mu, sd) = encoder_heads(tape, out, d)?;
            means.push(mu);
            stds.push(sd);
        }
        let encoder_calls = enc.len();

        let k = self.subsets.len();
        let mut sub_means = Vec::with_capacity(k);
        let mut sub_stds = Vec::with_capacity(k);
        for mask in &self.subsets {
            let members: Vec<usize> = mask.members().collect();
            if let [only] = members[..] {
                sub_means.push(means[only]);
                sub_stds.push(stds[only]);
                continue;
            }
            let sds: Vec<NodeId> = members.iter().map(|i| stds[*i]).collect();
            let w = tape.consensus_weights(&sds, self.rho())?;
            let mut precision: Option<NodeId> = None;
            let mut numer: Option<NodeId> = None;
            for (j, i) in members.iter().enumerate() {
                let c = tape.col_slice(w, j * d, d)?;
                let cm = tape.mul(c, means[*i])?;
                precision = Some(match precision {
                    None => c,
                    Some(p) => tape.add(p, c)?,
                });
                numer = Some(match numer {
                    None => cm,
                    Some(n) => tape.add(n, cm)?,
                });
            }
            let (a, b) = (precision.expect("members"), numer.expect("members"));
            sub_means.push(tape.div(b, a)?);
            let var = tape.recip(a);
            sub_stds.push(tape.sqrt(var));
        }

        let mu_all = tape.concat_rows(&sub_means)?;
        let sd_all = tape.concat_rows(&sub_stds)?;
        let eps_all = tape.leaf(eps.repeat_rows(k));
        let noise = tape.mul(sd_all, eps_all)?;
        let z = tape.add(mu_all, noise)?;

        // KL(q || N(0, I)) per row, then per subset.
        let var = tape.square(sd_all);
        let mu2 = tape.square(mu_all);
        let s = tape.add(var, mu2)?;
        let s = tape.offset(s, -1.0);
        let lv = tape.ln(var);
        let s = tape.sub(s, lv)?;
        let kl_rows = tape.row_sum(s);
        let kl_rows = tape.scale(kl_rows, 0.5);
        let kl = tape.block_mean(kl_rows, k)?;

        let mut total: Option<NodeId> = None;
        for (m, bound) in dec.iter().enumerate() {
            let out = forward_mlp(bound, tape, z)?;
            let ll = match (&batch.modalities[m], batch.families[m]) {
                (ModalityData::Real(x), LikelihoodFamily::Gaussian) => {
                    tape.gaussian_log_density(out, &x.repeat_rows(k))?
                }
                (ModalityData::Real(x), LikelihoodFamily::Laplace) => {
                    tape.laplace_log_density(out, &x.repeat_rows(k))?
                }
                (ModalityData::Categorical(v), LikelihoodFamily::Categorical { .. }) => {
                    let target: Vec<usize> = (0..k).flat_map(|_| v.iter().copied()).collect();
                    tape.categorical_log_density(out, &target)?
                }
                _ => return arg_err(format!("modality {m} data does not match its likelihood")),
            };
            let ll = tape.scale(ll, self.likelihood.weights()[m]);
            total = Some(match total {
                None => ll,
                Some(t) => tape.add(t, ll)?,
            });
        }
        let recon = tape.block_mean(total.expect("modalities"), k)?;
        let objective =
            objective_on_tape(tape, recon, kl, logits, settings.beta, settings.entropy_scale, settings.placement)?;
        Ok(ObjectiveGraph { objective, params, recon, kl, encoder_calls })
    }

    /// Encoder outputs without a tape.
    pub fn encode(&self, batch: &MultimodalDataset) -> Result<Encoded> {
        self.check_batch(batch)?;
        let d = self.arch.latent_dim;
        let mut means = Vec::new();
        let mut stds = Vec::new();
        for (m, enc) in self.encoders.iter().enumerate() {
            let out = enc.evaluate(&encoder_input(&batch.modalities[m], batch.families[m])?)?;
            let mut mu = Matrix::zeros(out.rows(), d);
            let mut sd = Matrix::zeros(out.rows(), d);
            for r in 0..out.rows() {
                mu.row_mut(r).copy_from_slice(&out.row(r)[..d]);
                for (s, raw) in sd.row_mut(r).iter_mut().zip(&out.row(r)[d..]) {
                    *s = raw.max(0.0) + (-raw.abs()).exp().ln_1p() + crate::autodiff::STD_FLOOR;
                }
            }
            means.push(mu);
            stds.push(sd);
        }
        Ok(Encoded { means, stds })
    }

    /// Posterior mean and std of `q(z | X_k)` for every row.
    pub fn subset_posterior(&self, encoded: &Encoded, mask: SubsetMask) -> Result<(Matrix, Matrix)> {
        if mask.modalities() != self.arch.modalities() {
            return arg_err("mask modality count differs from the model's");
        }
        let members: Vec<usize> = mask.members().collect();
        let (rows, d) = encoded.means[0].shape();
        let mut mean = Matrix::zeros(rows, d);
        let mut std = Matrix::zeros(rows, d);
        let mut s = vec![0.0; members.len()];
        for r in 0..rows {
            for dim in 0..d {
                for (j, i) in members.iter().enumerate() {
                    s[j] = encoded.stds[*i].get(r, dim);
                }
                let c = precision_weights(&s, self.rho()).ok_or(Error::NotPositiveDefinite { dim })?;
                let a: f64 = c.iter().sum();
                let b: f64 = c.iter().zip(&members).map(|(w, i)| w * encoded.means[*i].get(r, dim)).sum();
                mean.set(r, dim, b / a);
                std.set(r, dim, (1.0 / a).sqrt());
            }
        }
        Ok((mean, std))
    }

    /// Decoder output for modality `m`: means, or logits for categorical data.
    pub fn decode(&self, m: usize, z: &Matrix) -> Result<Matrix> {
        self.decoders.get(m).ok_or_else(|| Error::Argument(format!("no modality {m}")))?.evaluate(z)
    }

    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        let mut entries = extra.clone();
        let join = |v: Vec<String>| v.join(",");
        entries.insert("format".into(), "codevae-checkpoint-1".into());
        entries.insert("latent_dim".into(), self.arch.latent_dim.to_string());
        entries.insert("hidden".into(), join(self.arch.hidden.iter().map(ToString::to_string).collect()));
        entries.insert("dims".into(), join(self.arch.dims.iter().map(ToString::to_string).collect()));
        entries.insert("likelihoods".into(), join(self.arch.families.iter().map(LikelihoodFamily::tag).collect()));
        entries.insert("rho".into(), format!("{}", self.rho()));
        save_checkpoint(path, &self.params(), &entries)
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let (tensors, manifest) = load_checkpoint(path)?;
        let get = |k: &str| manifest.get(k).ok_or_else(|| Error::Format(format!("checkpoint lacks {k}")));
        let list = |k: &str| -> Result<Vec<usize>> {
            let v = get(k)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|x| x.parse().map_err(|_| Error::Format(format!("bad {k}")))).collect()
        };
        let latent_dim = get("latent_dim")?.parse().map_err(|_| Error::Format("bad latent_dim".into()))?;
        let rho: f64 = get("rho")?.parse().map_err(|_| Error::Format("bad rho".into()))?;
        let families = get("likelihoods")?
            .split(',')
            .map(LikelihoodFamily::parse)
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Format(e.to_string()))?;
        let arch = Architecture {
            latent_dim,
            hidden: list("hidden")?,
            dims: list("dims")?,
            families,
            rho: CorrelationSpec::new(rho).map_err(|e| Error::Format(e.to_string()))?,
        };
        // Any seed works: every tensor is overwritten below.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(arch, &mut rng)?;
        if model.param_shapes() != tensors.iter().map(Matrix::shape).collect::<Vec<_>>() {
            return Err(Error::Format("checkpoint shapes do not match its architecture".into()));
        }
        for (p, t) in model.params_mut().into_iter().zip(tensors) {
            *p = t;
        }
        Ok((model, manifest))
    }
}
