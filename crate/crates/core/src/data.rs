//! Synthetic multimodal data with a shared linear-Gaussian latent factor,
//! and the on-disk dataset format.
//!
//! File layout: the 8-byte magic `CODEMM01`, a newline, a `key=value` text
//! manifest closed by an `end` line, the per-modality payloads (row-major
//! little-endian `f64`, or `i32` class indices for categorical modalities),
//! the labels as little-endian `i32`, and finally a little-endian `u64`
//! FNV-1a checksum of every payload byte.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::autodiff::{parse_key_values, Matrix};
use crate::elbo::LikelihoodFamily;
use crate::error::{arg_err, Error, Result};

pub const MAGIC: &[u8; 8] = b"CODEMM01";

/// Observations of one modality.
#[derive(Debug, Clone, PartialEq)]
pub enum ModalityData {
    Real(Matrix),
    Categorical(Vec<usize>),
}

impl ModalityData {
    pub fn rows(&self) -> usize {
        match self {
            Self::Real(m) => m.rows(),
            Self::Categorical(v) => v.len(),
        }
    }

    /// Stored columns: the feature width, or 1 for class indices.
    pub fn dim(&self) -> usize {
        match self {
            Self::Real(m) => m.cols(),
            Self::Categorical(_) => 1,
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        match self {
            Self::Real(m) => Self::Real(m.select_rows(idx)),
            Self::Categorical(v) => Self::Categorical(idx.iter().map(|i| v[*i]).collect()),
        }
    }

    pub fn as_real(&self) -> Option<&Matrix> {
        match self {
            Self::Real(m) => Some(m),
            Self::Categorical(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModalityKind {
    /// `x = A g + b + noise` with Gaussian or Laplace likelihood tag.
    Linear { dim: usize, noise_std: f64, likelihood: LikelihoodFamily },
    /// Like `Linear` but `A = I`, `b = 0`; needs `dim` equal to the factor size.
    Identity { noise_std: f64 },
    /// The class label itself, as a categorical modality.
    Label,
}

/// Modality `target` replaced by `(1 - fraction)·x_source + fraction·η`, where
/// `η` is Gaussian noise with the source's column means and deviations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Duplication {
    pub target: usize,
    pub source: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub modalities: Vec<ModalityKind>,
    /// Size of the true generative factor.
    pub factor_dim: usize,
    pub classes: usize,
    pub loading_seed: u64,
    pub duplication: Option<Duplication>,
}

impl SyntheticSpec {
    /// `count` Gaussian modalities of width `dim` sharing a factor of size
    /// `factor_dim`.
    pub fn gaussian(count: usize, dim: usize, factor_dim: usize, noise_std: f64) -> Self {
        Self {
            modalities: vec![ModalityKind::Linear { dim, noise_std, likelihood: LikelihoodFamily::Gaussian }; count],
            factor_dim,
            classes: 4,
            loading_seed: 17,
            duplication: None,
        }
    }

    /// Two modalities where the second is a copy of the first with noise
    /// fraction `fraction`.
    pub fn duplicated(dim: usize, factor_dim: usize, noise_std: f64, fraction: f64) -> Self {
        let mut s = Self::gaussian(2, dim, factor_dim, noise_std);
        s.duplication = Some(Duplication { target: 1, source: 0, fraction });
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() || self.modalities.len() > crate::gaussian::MAX_MODALITIES {
            return arg_err("modality count out of range");
        }
        if self.factor_dim == 0 {
            return arg_err("factor dimension must be positive");
        }
        if !(2..=10).contains(&self.classes) {
            return arg_err(format!("class count {} outside [2, 10]", self.classes));
        }
        for (m, kind) in self.modalities.iter().enumerate() {
            match kind {
                ModalityKind::Linear { dim, noise_std, likelihood } => {
                    if *dim == 0 {
                        return arg_err(format!("modality {m} has zero width"));
                    }
                    if !(*noise_std >= 0.0) {
                        return arg_err(format!("modality {m} has negative noise"));
                    }
                    if matches!(likelihood, LikelihoodFamily::Categorical { .. }) {
                        return arg_err(format!("modality {m}: linear modalities are real-valued"));
                    }
                }
                ModalityKind::Identity { noise_std } => {
                    if !(*noise_std >= 0.0) {
                        return arg_err(format!("modality {m} has negative noise"));
                    }
                }
                ModalityKind::Label => {}
            }
        }
        if let Some(d) = self.duplication {
            if !(0.0..=1.0).contains(&d.fraction) {
                return arg_err(format!("duplication fraction {} outside [0, 1]", d.fraction));
            }
            if d.target == d.source || d.target >= self.modalities.len() || d.source >= self.modalities.len() {
                return arg_err("duplication target/source invalid");
            }
            if self.dim(d.target) != self.dim(d.source)
                || matches!(self.modalities[d.target], ModalityKind::Label)
                || matches!(self.modalities[d.source], ModalityKind::Label)
            {
                return arg_err("duplication needs two real modalities of equal width");
            }
        }
        Ok(())
    }

    pub fn dim(&self, m: usize) -> usize {
        match &self.modalities[m] {
            ModalityKind::Linear { dim, .. } => *dim,
            ModalityKind::Identity { .. } => self.factor_dim,
            ModalityKind::Label => 1,
        }
    }

    pub fn family(&self, m: usize) -> LikelihoodFamily {
        match &self.modalities[m] {
            ModalityKind::Linear { likelihood, .. } => *likelihood,
            ModalityKind::Identity { .. } => LikelihoodFamily::Gaussian,
            ModalityKind::Label => LikelihoodFamily::Categorical { classes: self.classes },
        }
    }

    /// Loading matrix `A_m` (`dim x factor_dim`) and offset `b_m` of a real
    /// modality.
    pub fn loading(&self, m: usize) -> Option<(Matrix, Vec<f64>)> {
        match &self.modalities[m] {
            ModalityKind::Linear { dim, .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.loading_seed.wrapping_add(m as u64));
                let scale = Normal::new(0.0, (1.0 / self.factor_dim as f64).sqrt()).expect("positive");
                let a = (0..dim * self.factor_dim).map(|_| scale.sample(&mut rng)).collect();
                let offset = Normal::new(0.0, 0.5).expect("positive");
                let b = (0..*dim).map(|_| offset.sample(&mut rng)).collect();
                Some((Matrix::from_vec(*dim, self.factor_dim, a).expect("shape"), b))
            }
            ModalityKind::Identity { .. } => {
                let g = self.factor_dim;
                let mut a = Matrix::zeros(g, g);
                for i in 0..g {
                    a.set(i, i, 1.0);
                }
                Some((a, vec![0.0; g]))
            }
            ModalityKind::Label => None,
        }
    }

    fn noise_std(&self, m: usize) -> f64 {
        match &self.modalities[m] {
            ModalityKind::Linear { noise_std, .. } | ModalityKind::Identity { noise_std } => *noise_std,
            ModalityKind::Label => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalDataset {
    pub modalities: Vec<ModalityData>,
    pub families: Vec<LikelihoodFamily>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

impl MultimodalDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn modality_count(&self) -> usize {
        self.modalities.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.modalities.iter().map(ModalityData::dim).collect()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            modalities: self.modalities.iter().map(|m| m.select_rows(idx)).collect(),
            families: self.families.clone(),
            labels: idx.iter().map(|i| self.labels[*i]).collect(),
            classes: self.classes,
            seed: self.seed,
        }
    }

    /// First `n` rows and the remainder.
    pub fn split(&self, n: usize) -> Result<(Self, Self)> {
        if n == 0 || n >= self.len() {
            return arg_err(format!("cannot split {} rows at {n}", self.len()));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((self.select_rows(&head), self.select_rows(&tail)))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.modalities.is_empty() || self.modalities.len() != self.families.len() {
            return Err(Error::Format("modalities and likelihood tags disagree".into()));
        }
        if self.modalities.iter().any(|m| m.rows() != n) {
            return Err(Error::Format("modalities have unequal row counts".into()));
        }
        if self.labels.iter().any(|l| *l >= self.classes) {
            return Err(Error::Format("label out of range".into()));
        }
        for (m, (data, fam)) in self.modalities.iter().zip(&self.families).enumerate() {
            match (data, fam) {
                (ModalityData::Categorical(v), LikelihoodFamily::Categorical { classes }) => {
                    if v.iter().any(|c| c >= classes) {
                        return Err(Error::Format(format!("modality {m} has a class out of range")));
                    }
                }
                (ModalityData::Real(_), LikelihoodFamily::Gaussian | LikelihoodFamily::Laplace) => {}
                _ => return Err(Error::Format(format!("modality {m} data does not match its likelihood"))),
            }
        }
        Ok(())
    }
}

/// Per-column mean and (population) standard deviation.
pub fn column_moments(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows() as f64;
    let mut mean = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    (mean, var.into_iter().map(f64::sqrt).collect())
}

pub fn generate(spec: &SyntheticSpec, rows: usize, seed: u64) -> Result<MultimodalDataset> {
    spec.validate()?;
    if rows == 0 {
        return arg_err("dataset needs at least one row");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = spec.factor_dim;
    let factors = Matrix::from_vec(rows, g, (0..rows * g).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())?;

    // Rank-based quantile buckets of the first factor.
    let mut order: Vec<usize> = (0..rows).collect();
    order.sort_by(|a, b| factors.get(*a, 0).total_cmp(&factors.get(*b, 0)).then(a.cmp(b)));
    let mut labels = vec![0; rows];
    for (rank, i) in order.into_iter().enumerate() {
        labels[i] = rank * spec.classes / rows;
    }

    let mut modalities = Vec::with_capacity(spec.modalities.len());
    for m in 0..spec.modalities.len() {
        let data = match spec.loading(m) {
            Some((a, b)) => {
                let noise = spec.noise_std(m);
                let mut x = factors.matmul(&a.transpose())?;
                for r in 0..rows {
                    for (v, off) in x.row_mut(r).iter_mut().zip(&b) {
                        let e: f64 = rng.sample(StandardNormal);
                        *v += off + noise * e;
                    }
                }
                ModalityData::Real(x)
            }
            None => ModalityData::Categorical(labels.clone()),
        };
        modalities.push(data);
    }

    if let Some(dup) = spec.duplication {
        let source = modalities[dup.source].as_real().expect("validated").clone();
        let (mean, sd) = column_moments(&source);
        let mut target = source.clone();
        let f = dup.fraction;
        for r in 0..rows {
            for (c, v) in target.row_mut(r).iter_mut().enumerate() {
                let e: f64 = rng.sample(StandardNormal);
                let eta = mean[c] + sd[c] * e;
                if f != 0.0 {
                    *v = (1.0 - f) * *v + f * eta;
                }
            }
        }
        modalities[dup.target] = ModalityData::Real(target);
    }

    let families = (0..spec.modalities.len()).map(|m| spec.family(m)).collect();
    let ds = MultimodalDataset { modalities, families, labels, classes: spec.classes, seed };
    ds.validate()?;
    Ok(ds)
}

/// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3))
}

pub fn to_bytes(ds: &MultimodalDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let dims: Vec<String> = ds.dims().iter().map(ToString::to_string).collect();
    let tags: Vec<String> = ds.families.iter().map(LikelihoodFamily::tag).collect();
    let manifest = format!(
        "modalities={}\nn={}\nclasses={}\nseed={}\ndims={}\nlikelihoods={}\nend\n",
        ds.modality_count(),
        ds.len(),
        ds.classes,
        ds.seed,
        dims.join(","),
        tags.join(",")
    );
    let mut payload = Vec::new();
    for m in &ds.modalities {
        match m {
            ModalityData::Real(x) => x.as_slice().iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
            ModalityData::Categorical(v) => {
                v.iter().for_each(|c| payload.extend_from_slice(&(*c as i32).to_le_bytes()))
            }
        }
    }
    ds.labels.iter().for_each(|l| payload.extend_from_slice(&(*l as i32).to_le_bytes()));

    let mut out = Vec::with_capacity(9 + manifest.len() + payload.len() + 8);
    out.extend_from_slice(MAGIC);
    out.push(b'\n');
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&fnv1a(&payload).to_le_bytes());
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<MultimodalDataset> {
    let fmt = |m: &str| Error::Format(m.to_string());
    if bytes.len() < MAGIC.len() + 1 || &bytes[..8] != MAGIC || bytes[8] != b'\n' {
        return Err(fmt("missing CODEMM01 magic"));
    }
    let body = &bytes[9..];
    let end = body
        .windows(4)
        .position(|w| w == b"end\n")
        .filter(|p| *p == 0 || body[p - 1] == b'\n')
        .ok_or_else(|| fmt("manifest is not terminated"))?;
    let text = std::str::from_utf8(&body[..end]).map_err(|_| fmt("manifest is not UTF-8"))?;
    let kv = parse_key_values(text)?;
    let get = |k: &str| kv.get(k).ok_or_else(|| Error::Format(format!("manifest lacks {k}")));
    let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| Error::Format(format!("bad {k}"))) };
    let count = num("modalities")? as usize;
    let n = num("n")? as usize;
    let classes = num("classes")? as usize;
    let seed = num("seed")?;
    let dims: Vec<usize> =
        get("dims")?.split(',').map(|d| d.parse().map_err(|_| fmt("bad dims"))).collect::<Result<_>>()?;
    let families: Vec<LikelihoodFamily> = get("likelihoods")?
        .split(',')
        .map(|t| LikelihoodFamily::parse(t).map_err(|_| Error::Format(format!("bad likelihood {t}"))))
        .collect::<Result<_>>()?;
    if dims.len() != count || families.len() != count || count == 0 {
        return Err(fmt("modality count disagrees with dims/likelihoods"));
    }

    let rest = &body[end + 4..];
    let mut expected = n * 4 + 8;
    for (d, f) in dims.iter().zip(&families) {
        expected += match f {
            LikelihoodFamily::Categorical { .. } => n * 4,
            _ => n * d * 8,
        };
    }
    if rest.len() != expected {
        return Err(Error::Format(format!("payload has {} bytes, manifest implies {expected}", rest.len())));
    }
    let (payload, tail) = rest.split_at(rest.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if stored != fnv1a(payload) {
        return Err(fmt("checksum mismatch"));
    }

    let mut cursor = payload;
    let mut take = |len: usize| {
        let (a, b) = cursor.split_at(len);
        cursor = b;
        a
    };
    let read_ints = |chunk: &[u8]| -> Result<Vec<usize>> {
        chunk
            .chunks_exact(4)
            .map(|b| {
                let v = i32::from_le_bytes(b.try_into().expect("4 bytes"));
                usize::try_from(v).map_err(|_| Error::Format("negative class index".into()))
            })
            .collect()
    };
    let mut modalities = Vec::with_capacity(count);
    for (d, f) in dims.iter().zip(&families) {
        match f {
            LikelihoodFamily::Categorical { .. } => {
                if *d != 1 {
                    return Err(fmt("categorical modality must have width 1"));
                }
                modalities.push(ModalityData::Categorical(read_ints(take(n * 4))?));
            }
            _ => {
                let data = take(n * d * 8)
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect();
                modalities.push(ModalityData::Real(Matrix::from_vec(n, *d, data)?));
            }
        }
    }
    let labels = read_ints(take(n * 4))?;
    let ds = MultimodalDataset { modalities, families, labels, classes, seed };
    ds.validate()?;
    Ok(ds)
}

pub fn save(ds: &MultimodalDataset, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(ds)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<MultimodalDataset> {
    from_bytes(&fs::read(path)?)
}
