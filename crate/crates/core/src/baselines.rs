//! Shallow feature-level alignment applied once before training.
//!
//! * PDS standardizes each domain's video features with that domain's own
//!   per-dimension mean and (population) standard deviation.
//! * CORAL whitens source features with the source covariance and recolors
//!   them with the target covariance. Target features pass through.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::Domain;
use crate::error::{Error, Result};
use crate::linalg::check_dims;

/// Standard deviations are floored here.
pub const STD_FLOOR: f64 = 1e-8;
/// Covariance ridge, relative to `trace / d`.
pub const CORAL_RIDGE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    None,
    #[default]
    Pds,
    /// PDS followed by CORAL.
    Coral,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl ColumnStats {
    pub fn fit(x: ArrayView2<'_, f64>, what: &'static str) -> Result<Self> {
        if x.nrows() < 2 {
            return Err(Error::Config(format!(
                "{what}: need at least 2 rows, got {}",
                x.nrows()
            )));
        }
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let mut std = x.std_axis(Axis(0), 0.0);
        let mut floored = 0;
        std.mapv_inplace(|s| {
            if s < STD_FLOOR {
                floored += 1;
                STD_FLOOR
            } else {
                s
            }
        });
        if floored > 0 {
            log::warn!("{what}: {floored} constant feature dimension(s); std floored at {STD_FLOOR:e}");
        }
        Ok(ColumnStats { mean, std })
    }

    pub fn standardize(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dims("standardize", self.mean.len(), x.ncols())?;
        Ok((&x - &self.mean) / &self.std)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdsStats {
    pub source: ColumnStats,
    pub target: ColumnStats,
}

pub fn pds_fit(source: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<PdsStats> {
    check_dims("pds fit", source.ncols(), target.ncols())?;
    Ok(PdsStats {
        source: ColumnStats::fit(source, "pds source")?,
        target: ColumnStats::fit(target, "pds target")?,
    })
}

pub fn pds_apply(stats: &PdsStats, features: ArrayView2<'_, f64>, domain: Domain) -> Result<Array2<f64>> {
    match domain {
        Domain::Source => stats.source.standardize(features),
        Domain::Target => stats.target.standardize(features),
    }
}

/// `x -> (x - source_mean) A + source_mean`, `A = Cs^{-1/2} Ct^{1/2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoralTransform {
    pub source_mean: Array1<f64>,
    pub matrix: Array2<f64>,
}

/// Population covariance.
pub fn covariance(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let centered = &x - &mean;
    centered.t().dot(&centered) / x.nrows() as f64
}

fn regularized(cov: &Array2<f64>) -> DMatrix<f64> {
    let d = cov.nrows();
    let ridge = CORAL_RIDGE * cov.diag().sum() / d as f64;
    // a zero-trace covariance still needs to be invertible
    let ridge = if ridge > 0.0 { ridge } else { CORAL_RIDGE };
    DMatrix::from_fn(d, d, |i, j| {
        let sym = 0.5 * (cov[[i, j]] + cov[[j, i]]);
        if i == j {
            sym + ridge
        } else {
            sym
        }
    })
}

/// `C^p` for symmetric positive definite `C`.
fn spd_power(c: DMatrix<f64>, p: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(c);
    let vals = eig.eigenvalues.map(|l| l.max(f64::MIN_POSITIVE).powf(p));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

pub fn coral_fit(source: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<CoralTransform> {
    check_dims("coral fit", source.ncols(), target.ncols())?;
    if source.nrows() < 2 || target.nrows() < 2 {
        return Err(Error::Config("coral: need at least 2 rows per domain".into()));
    }
    let d = source.ncols();
    let inv_root_s = spd_power(regularized(&covariance(source)), -0.5);
    let root_t = spd_power(regularized(&covariance(target)), 0.5);
    let a = inv_root_s * root_t;
    Ok(CoralTransform {
        source_mean: source.mean_axis(Axis(0)).expect("non-empty"),
        matrix: Array2::from_shape_fn((d, d), |(i, j)| a[(i, j)]),
    })
}

pub fn coral_apply(transform: &CoralTransform, source: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    check_dims("coral apply", transform.source_mean.len(), source.ncols())?;
    let centered = &source - &transform.source_mean;
    Ok(centered.dot(&transform.matrix) + &transform.source_mean)
}

/// Fitted input transform, stored in checkpoints so evaluation reuses it.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Preprocess {
    #[default]
    None,
    Pds(PdsStats),
    Coral {
        pds: PdsStats,
        coral: CoralTransform,
    },
}

impl Preprocess {
    pub fn fit(kind: BaselineKind, source: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<Self> {
        Ok(match kind {
            BaselineKind::None => Preprocess::None,
            BaselineKind::Pds => Preprocess::Pds(pds_fit(source, target)?),
            BaselineKind::Coral => {
                let pds = pds_fit(source, target)?;
                let s = pds_apply(&pds, source, Domain::Source)?;
                let t = pds_apply(&pds, target, Domain::Target)?;
                let coral = coral_fit(s.view(), t.view())?;
                Preprocess::Coral { pds, coral }
            }
        })
    }

    pub fn kind(&self) -> BaselineKind {
        match self {
            Preprocess::None => BaselineKind::None,
            Preprocess::Pds(_) => BaselineKind::Pds,
            Preprocess::Coral { .. } => BaselineKind::Coral,
        }
    }

    pub fn apply(&self, features: ArrayView2<'_, f64>, domain: Domain) -> Result<Array2<f64>> {
        match self {
            Preprocess::None => Ok(features.to_owned()),
            Preprocess::Pds(stats) => pds_apply(stats, features, domain),
            Preprocess::Coral { pds, coral } => {
                let x = pds_apply(pds, features, domain)?;
                match domain {
                    Domain::Source => coral_apply(coral, x.view()),
                    Domain::Target => Ok(x),
                }
            }
        }
    }

    pub(crate) fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        fn vec<W: Write>(w: &mut W, v: &Array1<f64>) -> std::io::Result<()> {
            v.iter().try_for_each(|x| w.write_f64::<LittleEndian>(*x))
        }
        fn pds<W: Write>(w: &mut W, p: &PdsStats) -> std::io::Result<()> {
            w.write_u32::<LittleEndian>(p.source.mean.len() as u32)?;
            vec(w, &p.source.mean)?;
            vec(w, &p.source.std)?;
            vec(w, &p.target.mean)?;
            vec(w, &p.target.std)
        }
        match self {
            Preprocess::None => w.write_u8(0),
            Preprocess::Pds(p) => {
                w.write_u8(1)?;
                pds(w, p)
            }
            Preprocess::Coral { pds: p, coral } => {
                w.write_u8(2)?;
                pds(w, p)?;
                vec(w, &coral.source_mean)?;
                coral.matrix.iter().try_for_each(|x| w.write_f64::<LittleEndian>(*x))
            }
        }
    }

    pub(crate) fn read_from<R: Read>(r: &mut R) -> std::io::Result<std::result::Result<Self, Error>> {
        fn vec<R: Read>(r: &mut R, d: usize) -> std::io::Result<Array1<f64>> {
            let mut v = vec![0.0; d];
            r.read_f64_into::<LittleEndian>(&mut v)?;
            Ok(Array1::from(v))
        }
        fn pds<R: Read>(r: &mut R) -> std::io::Result<(usize, PdsStats)> {
            let d = r.read_u32::<LittleEndian>()? as usize;
            let source = ColumnStats {
                mean: vec(r, d)?,
                std: vec(r, d)?,
            };
            let target = ColumnStats {
                mean: vec(r, d)?,
                std: vec(r, d)?,
            };
            Ok((d, PdsStats { source, target }))
        }
        Ok(Ok(match r.read_u8()? {
            0 => Preprocess::None,
            1 => Preprocess::Pds(pds(r)?.1),
            2 => {
                let (d, p) = pds(r)?;
                let source_mean = vec(r, d)?;
                let flat = vec(r, d * d)?;
                Preprocess::Coral {
                    pds: p,
                    coral: CoralTransform {
                        source_mean,
                        matrix: flat.into_shape_with_order((d, d)).expect("d*d values"),
                    },
                }
            }
            tag => return Ok(Err(Error::Config(format!("unknown preprocessing tag {tag}")))),
        }))
    }
}
