//! Spectral libraries, synthetic highly-mixed datasets, dataset persistence,
//! and shuffled mini-batch iteration.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::numerics::{mat_mul, sample_dirichlet_into, sample_gaussian, DirichletSpec, Matrix, Rng};

/// Reflectance slack tolerated above 1.
const REFLECTANCE_SLACK: f64 = 1e-9;
const MAX_CONSECUTIVE_REJECTIONS: u64 = 1_000_000;

/// Endmember spectra, one column per material.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralLibrary {
    names: Vec<String>,
    spectra: Matrix,
}

impl SpectralLibrary {
    pub fn new(names: Vec<String>, spectra: Matrix) -> Result<Self> {
        if names.len() != spectra.cols() {
            return Err(Error::invalid(format!(
                "{} names for {} spectra",
                names.len(),
                spectra.cols()
            )));
        }
        if let Some((idx, v)) = spectra
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v >= 0.0 && **v <= 1.0 + REFLECTANCE_SLACK))
        {
            let (band, col) = (idx / spectra.cols(), idx % spectra.cols());
            return Err(Error::invalid(format!(
                "reflectance {v} of {} at band {band} is outside [0, 1]",
                names[col]
            )));
        }
        Ok(SpectralLibrary { names, spectra })
    }

    pub fn band_count(&self) -> usize {
        self.spectra.rows()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn spectra(&self) -> &Matrix {
        &self.spectra
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_named_columns_csv(path, &self.names, &self.spectra)
    }
}

/// Parses a library CSV: header of material names, then one row of
/// reflectances per band, no wavelength column.
pub fn load_spectral_library(path: &Path) -> Result<SpectralLibrary> {
    let (names, spectra) = io::read_named_columns_csv(path)?;
    SpectralLibrary::new(names, spectra).map_err(|e| match e {
        Error::InvalidArgument(msg) => Error::Format {
            path: path.to_path_buf(),
            msg,
        },
        other => other,
    })
}

/// Builds a library of smooth, reflectance-like spectra sampled over
/// 0.4-2.5 µm: a sigmoid continuum (red edge or soil ramp) carved by a few
/// Gaussian absorption features. Stands in for a field library when none is at hand.
pub fn synthetic_library(bands: usize, materials: usize, seed: u64) -> Result<SpectralLibrary> {
    if bands < 2 || materials == 0 {
        return Err(Error::invalid("synthetic library needs >= 2 bands and >= 1 material"));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let wavelengths: Vec<f64> = (0..bands)
        .map(|b| 0.4 + 2.1 * b as f64 / (bands - 1) as f64)
        .collect();
    let mut spectra = Matrix::zeros(bands, materials);
    let mut names = Vec::with_capacity(materials);
    for m in 0..materials {
        let base = 0.03 + 0.25 * rng.uniform();
        let rise = (0.2 + 0.6 * rng.uniform()) * if rng.uniform() < 0.25 { -0.5 } else { 1.0 };
        let edge = 0.55 + 1.2 * rng.uniform();
        let width = 0.03 + 0.3 * rng.uniform();
        let slope = 0.15 * (rng.uniform() - 0.5);
        let features: Vec<(f64, f64, f64)> = (0..1 + rng.below(4))
            .map(|_| {
                let center = 0.45 + 2.0 * rng.uniform();
                let depth = 0.1 + 0.5 * rng.uniform();
                let sigma = 0.02 + 0.12 * rng.uniform();
                (center, depth, sigma)
            })
            .collect();
        let mut column = Vec::with_capacity(bands);
        for &w in &wavelengths {
            let continuum = base + rise / (1.0 + (-(w - edge) / width).exp()) + slope * (w - 1.45);
            let absorption: f64 = features
                .iter()
                .map(|&(c, d, s)| 1.0 - d * (-0.5 * ((w - c) / s).powi(2)).exp())
                .product();
            // Gentle ripple so no two bands are exactly collinear across materials.
            let ripple = 1.0 + 0.01 * (2.0 * PI * w * (3.0 + m as f64)).sin();
            column.push((continuum * absorption * ripple).clamp(0.01, 0.98));
        }
        spectra.set_col(m, &column);
        names.push(format!("material_{m:02}"));
    }
    SpectralLibrary::new(names, spectra)
}

/// Recipe for a synthetic linear-mixture dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub k: usize,
    pub n: usize,
    pub alpha: DirichletSpec,
    pub max_purity: f64,
    /// Signal-to-noise ratio in dB; `f64::INFINITY` disables noise.
    #[serde(with = "real_or_inf")]
    pub snr_db: f64,
    pub seed: u64,
    /// Pins the library columns to use instead of a seeded random choice.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endmember_names: Option<Vec<String>>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig::synth4(0)
    }
}

impl SynthConfig {
    /// The highly mixed three-endmember recipe: 2000 pixels, Dirichlet(4,4,4)
    /// abundances capped at purity 0.8, 40 dB noise.
    pub fn synth4(seed: u64) -> Self {
        SynthConfig {
            k: 3,
            n: 2000,
            alpha: DirichletSpec::symmetric(3, 4.0).expect("positive alpha"),
            max_purity: 0.8,
            snr_db: 40.0,
            seed,
            endmember_names: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.n < 1 {
            return Err(Error::invalid("k and n must be >= 1"));
        }
        if self.alpha.k() != self.k {
            return Err(Error::invalid(format!(
                "alpha has {} entries but k = {}",
                self.alpha.k(),
                self.k
            )));
        }
        if !(self.max_purity > 1.0 / self.k as f64 && self.max_purity <= 1.0) {
            return Err(Error::invalid(format!(
                "max_purity must lie in (1/k, 1], got {}",
                self.max_purity
            )));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::invalid("snr_db must be a number or +inf"));
        }
        if let Some(names) = &self.endmember_names {
            if names.len() != self.k {
                return Err(Error::invalid(format!("{} endmember names for k = {}", names.len(), self.k)));
            }
        }
        Ok(())
    }
}

/// Dataset metadata as stored in `meta.json`. Generation fields are absent
/// for externally supplied observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n: usize,
    pub l: usize,
    pub k: Option<usize>,
    pub alpha: Option<DirichletSpec>,
    pub max_purity: Option<f64>,
    #[serde(with = "opt_real_or_inf")]
    pub snr_db: Option<f64>,
    pub seed: Option<u64>,
    pub endmember_names: Vec<String>,
}

/// Observations plus optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: Matrix,
    pub m_true: Option<Matrix>,
    pub a_true: Option<Matrix>,
    pub meta: DatasetMeta,
}

impl Dataset {
    /// Wraps externally supplied observations (l x n) with no ground truth.
    pub fn from_observations(y: Matrix) -> Result<Self> {
        let meta = DatasetMeta {
            n: y.cols(),
            l: y.rows(),
            k: None,
            alpha: None,
            max_purity: None,
            snr_db: None,
            seed: None,
            endmember_names: Vec::new(),
        };
        let ds = Dataset {
            y,
            m_true: None,
            a_true: None,
            meta,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.y.cols()
    }

    pub fn l(&self) -> usize {
        self.y.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (l, n) = self.y.shape();
        if self.meta.n != n || self.meta.l != l {
            return Err(Error::invalid(format!(
                "metadata says {}x{} but Y is {l}x{n}",
                self.meta.l, self.meta.n
            )));
        }
        if n == 0 || l == 0 {
            return Err(Error::invalid("empty observation matrix"));
        }
        if !self.y.is_finite() || self.y.min() < 0.0 {
            return Err(Error::invalid("observations must be finite and nonnegative"));
        }
        if let Some(m) = &self.m_true {
            if m.rows() != l {
                return Err(Error::Shape {
                    op: "dataset endmembers",
                    left: m.shape(),
                    right: self.y.shape(),
                });
            }
            if self.meta.k.is_some_and(|k| k != m.cols()) {
                return Err(Error::invalid("metadata k disagrees with M_true"));
            }
            if !m.is_finite() || m.min() < 0.0 {
                return Err(Error::invalid("endmembers must be finite and nonnegative"));
            }
        }
        if let Some(a) = &self.a_true {
            if a.cols() != n || self.m_true.as_ref().is_some_and(|m| m.cols() != a.rows()) {
                return Err(Error::Shape {
                    op: "dataset abundances",
                    left: a.shape(),
                    right: self.y.shape(),
                });
            }
            if a.min() < 0.0 {
                return Err(Error::invalid("abundances must be nonnegative"));
            }
            if let Some(j) = a.col_sums().iter().position(|s| (s - 1.0).abs() > 1e-9) {
                return Err(Error::invalid(format!("abundance column {j} does not sum to 1")));
            }
            if let Some(p) = self.meta.max_purity {
                if a.max() > p + 1e-9 {
                    return Err(Error::invalid(format!(
                        "abundance {} exceeds max purity {p}",
                        a.max()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Noiseless product `M_true * A_true`, when both are known.
    pub fn clean_signal(&self) -> Option<Matrix> {
        match (&self.m_true, &self.a_true) {
            (Some(m), Some(a)) => mat_mul(m, a).ok(),
            _ => None,
        }
    }

    /// Realized SNR in dB of `Y` against the noiseless product.
    pub fn realized_snr_db(&self) -> Option<f64> {
        let clean = self.clean_signal()?;
        let noise = self.y.sub(&clean).ok()?;
        Some(10.0 * (clean.frobenius_norm_sq() / noise.frobenius_norm_sq()).log10())
    }

    /// Writes `Y.hsib`, `M_true.hsib`, `A_true.hsib` (when present) and `meta.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        io::write_hsib(&dir.join("Y.hsib"), &self.y)?;
        if let Some(m) = &self.m_true {
            io::write_hsib(&dir.join("M_true.hsib"), m)?;
        }
        if let Some(a) = &self.a_true {
            io::write_hsib(&dir.join("A_true.hsib"), a)?;
        }
        io::write_json(&dir.join("meta.json"), &self.meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: DatasetMeta = io::read_json(&dir.join("meta.json"))?;
        let y = io::read_hsib(&dir.join("Y.hsib"))?;
        let optional = |name: &str| -> Result<Option<Matrix>> {
            let p = dir.join(name);
            if p.exists() {
                io::read_hsib(&p).map(Some)
            } else {
                Ok(None)
            }
        };
        let ds = Dataset {
            m_true: optional("M_true.hsib")?,
            a_true: optional("A_true.hsib")?,
            y,
            meta,
        };
        ds.validate().map_err(|e| Error::Format {
            path: dir.to_path_buf(),
            msg: e.to_string(),
        })?;
        Ok(ds)
    }
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.save(dir)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir)
}

/// Draws a linear-mixture dataset `Y = M A + E` from library endmembers.
///
/// Abundance columns are Dirichlet draws, each redrawn whole until its
/// largest entry is at most `max_purity`. Noise is Gaussian, rescaled so
/// the Frobenius SNR equals `snr_db` exactly, and `Y` is clamped at zero.
pub fn generate_synthetic(lib: &SpectralLibrary, cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    if lib.names().len() < cfg.k {
        return Err(Error::invalid(format!(
            "library has {} materials, need {}",
            lib.names().len(),
            cfg.k
        )));
    }
    let root = Rng::seed_from_u64(cfg.seed);
    let (mut pick_rng, mut abund_rng, mut noise_rng) = (root.fork(1), root.fork(2), root.fork(3));

    let columns: Vec<usize> = match &cfg.endmember_names {
        Some(names) => names
            .iter()
            .map(|n| {
                lib.index_of(n)
                    .ok_or_else(|| Error::invalid(format!("library has no material named {n:?}")))
            })
            .collect::<Result<_>>()?,
        None => {
            let mut all: Vec<usize> = (0..lib.names().len()).collect();
            pick_rng.shuffle(&mut all);
            all.truncate(cfg.k);
            all
        }
    };
    let m_true = lib.spectra().select_columns(&columns);
    let a_true = sample_truncated_dirichlet(&mut abund_rng, &cfg.alpha, cfg.n, cfg.max_purity)?;
    let clean = mat_mul(&m_true, &a_true)?;

    let y = if cfg.snr_db.is_infinite() {
        clean
    } else {
        let noise = sample_gaussian(&mut noise_rng, clean.rows(), clean.cols(), 1.0)?;
        let target_energy = clean.frobenius_norm_sq() / 10f64.powf(cfg.snr_db / 10.0);
        let noise = noise.scale((target_energy / noise.frobenius_norm_sq()).sqrt());
        clean.add(&noise)?.map(|v| v.max(0.0))
    };

    let ds = Dataset {
        meta: DatasetMeta {
            n: cfg.n,
            l: lib.band_count(),
            k: Some(cfg.k),
            alpha: Some(cfg.alpha.clone()),
            max_purity: Some(cfg.max_purity),
            snr_db: Some(cfg.snr_db),
            seed: Some(cfg.seed),
            endmember_names: columns.iter().map(|&c| lib.names()[c].clone()).collect(),
        },
        y,
        m_true: Some(m_true),
        a_true: Some(a_true),
    };
    ds.validate()?;
    Ok(ds)
}

/// `n` Dirichlet columns conditioned on `max(column) <= max_purity`.
pub fn sample_truncated_dirichlet(
    rng: &mut Rng,
    alpha: &DirichletSpec,
    n: usize,
    max_purity: f64,
) -> Result<Matrix> {
    let k = alpha.k();
    let mut out = Matrix::zeros(k, n);
    let mut col = vec![0.0; k];
    for j in 0..n {
        let mut rejections = 0u64;
        loop {
            sample_dirichlet_into(rng, alpha, &mut col);
            if col.iter().all(|&v| v <= max_purity) {
                break;
            }
            rejections += 1;
            if rejections >= MAX_CONSECUTIVE_REJECTIONS {
                return Err(Error::Infeasible(format!(
                    "{MAX_CONSECUTIVE_REJECTIONS} consecutive Dirichlet draws exceeded max purity {max_purity}"
                )));
            }
        }
        out.set_col(j, &col);
    }
    Ok(out)
}

/// One epoch of shuffled column-index batches partitioning `0..n`. The
/// last batch holds the remainder when `batch_size` does not divide `n`.
pub fn batch_iter(n: usize, batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::invalid(format!("batch size {batch_size} must lie in 1..={n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

mod real_or_inf {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    pub(super) enum Repr {
        Num(f64),
        Text(String),
    }

    pub(super) fn to_repr(v: f64) -> Repr {
        if v == f64::INFINITY {
            Repr::Text("inf".into())
        } else {
            Repr::Num(v)
        }
    }

    pub(super) fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(E::custom(format!("expected a number or \"inf\", got {t:?}"))),
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }
}

mod opt_real_or_inf {
    use super::real_or_inf::{from_repr, to_repr, Repr};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.map(to_repr).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Option::<Repr>::deserialize(d)?.map(from_repr).transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_lib() -> SpectralLibrary {
        synthetic_library(40, 6, 1).unwrap()
    }

    #[test]
    fn library_rejects_out_of_range() {
        let m = Matrix::from_rows(&[vec![0.5], vec![1.2]]).unwrap();
        assert!(SpectralLibrary::new(vec!["a".into()], m).is_err());
    }

    #[test]
    fn synth4_replica() {
        let lib = synthetic_library(224, 8, 3).unwrap();
        let ds = generate_synthetic(&lib, &SynthConfig::synth4(7)).unwrap();
        assert_eq!(ds.y.shape(), (224, 2000));
        let a = ds.a_true.as_ref().unwrap();
        assert!(a.max() <= 0.8);
        assert!(a.min() >= 0.0);
        for s in a.col_sums() {
            assert!((s - 1.0).abs() <= 1e-9);
        }
        let snr = ds.realized_snr_db().unwrap();
        assert!((snr - 40.0).abs() <= 0.1, "{snr}");
        assert_eq!(ds.meta.endmember_names.len(), 3);
    }

    #[test]
    fn noiseless_is_exact_product() {
        let mut cfg = SynthConfig::synth4(2);
        cfg.n = 100;
        cfg.snr_db = f64::INFINITY;
        let ds = generate_synthetic(&small_lib(), &cfg).unwrap();
        assert_eq!(ds.y, ds.clean_signal().unwrap());
    }

    #[test]
    fn pinned_endmembers() {
        let mut cfg = SynthConfig::synth4(2);
        cfg.n = 10;
        cfg.endmember_names = Some(vec!["material_04".into(), "material_00".into(), "material_02".into()]);
        let lib = small_lib();
        let ds = generate_synthetic(&lib, &cfg).unwrap();
        assert_eq!(ds.m_true.as_ref().unwrap().col(0), lib.spectra().col(4));
        cfg.endmember_names = Some(vec!["nope".into(), "material_00".into(), "material_02".into()]);
        assert!(generate_synthetic(&lib, &cfg).is_err());
    }

    #[test]
    fn infeasible_purity_rejected() {
        let mut cfg = SynthConfig::synth4(2);
        cfg.max_purity = 1.0 / 3.0;
        assert!(generate_synthetic(&small_lib(), &cfg).is_err());
    }

    #[test]
    fn truncated_dirichlet_matches_direct_rejection() {
        // Independent construction: plain Gamma normalization with an explicit rejection loop.
        let alpha = DirichletSpec::symmetric(3, 4.0).unwrap();
        let mut rng = Rng::seed_from_u64(10);
        let a = sample_truncated_dirichlet(&mut rng, &alpha, 20_000, 0.8).unwrap();
        let mut oracle_rng = Rng::seed_from_u64(99);
        let mut sums = [0.0; 3];
        let mut accepted = 0;
        while accepted < 20_000 {
            let g: Vec<f64> = (0..3).map(|_| crate::numerics::sample_gamma(&mut oracle_rng, 4.0)).collect();
            let t: f64 = g.iter().sum();
            if g.iter().all(|v| v / t <= 0.8) {
                for i in 0..3 {
                    sums[i] += g[i] / t;
                }
                accepted += 1;
            }
        }
        for i in 0..3 {
            let ours = a.row(i).iter().sum::<f64>() / 20_000.0;
            assert!((ours - sums[i] / 20_000.0).abs() < 0.01);
        }
    }

    #[test]
    fn batches_partition_epoch() {
        let mut rng = Rng::seed_from_u64(0);
        let batches = batch_iter(2000, 185, &mut rng).unwrap();
        assert_eq!(batches.len(), 11);
        assert!(batches[..10].iter().all(|b| b.len() == 185));
        assert_eq!(batches[10].len(), 150);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..2000).collect::<Vec<_>>());

        let single = batch_iter(50, 50, &mut rng).unwrap();
        assert_eq!(single.len(), 1);
        let mut p = single[0].clone();
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());

        assert!(batch_iter(10, 0, &mut rng).is_err());
        assert!(batch_iter(10, 11, &mut rng).is_err());
    }

    #[test]
    fn synth_config_json_accepts_inf() {
        let mut cfg = SynthConfig::synth4(1);
        cfg.snr_db = f64::INFINITY;
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"inf\""));
        let back: SynthConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
