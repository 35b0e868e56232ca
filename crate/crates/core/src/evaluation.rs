//! Reconstruction methods, the mean relative error and figure output.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{read_f64_file, write_f64_file};
use crate::dataset::{Dataset, Role};
use crate::error::{check_len, Error, Result};
use crate::geometry::{norm2, CoefficientImage};
use crate::network::{reconstruct, NetworkParams};
use crate::pgm::{write_pgm, GrayScale};
use crate::regularization::{optimal_tsvd, pseudo_inverse_apply, tsvd_apply, TruncationPolicy};
use crate::svd::SvdFactors;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Pinv,
    Tsvd,
    OptimalTsvd,
    Net,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Pinv => "pinv",
            Method::Tsvd => "tsvd",
            Method::OptimalTsvd => "optimal-tsvd",
            Method::Net => "net",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pinv" => Ok(Method::Pinv),
            "tsvd" => Ok(Method::Tsvd),
            "optimal-tsvd" => Ok(Method::OptimalTsvd),
            "net" => Ok(Method::Net),
            _ => Err(Error::InvalidParameter(format!(
                "unknown method {s:?} (expected pinv, tsvd, optimal-tsvd or net)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstructions {
    pub method: Method,
    pub images: Vec<CoefficientImage>,
    /// Singular values used per sample.
    pub kept: Vec<usize>,
}

impl Reconstructions {
    /// All images back to back as one flat `f64` file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let flat: Vec<f64> = self.images.iter().flat_map(|i| i.values.iter().copied()).collect();
        write_f64_file(path, &flat)
    }

    pub fn load(path: &Path, method: Method, side: usize, kept: Vec<usize>) -> Result<Self> {
        let flat = read_f64_file(path)?;
        let n = side * side;
        if n == 0 || flat.len() % n != 0 {
            return Err(Error::container(path, "length is not a whole number of images"));
        }
        check_len("reconstruction count", kept.len(), flat.len() / n)?;
        let images = flat
            .chunks_exact(n)
            .map(|c| CoefficientImage {
                side,
                values: c.to_vec(),
            })
            .collect();
        Ok(Reconstructions { method, images, kept })
    }
}

/// Reconstructs every sample of `data` with `method`.
pub fn reconstruct_dataset(
    method: Method,
    f: &SvdFactors,
    policy: &TruncationPolicy,
    net: Option<&NetworkParams>,
    data: &Dataset,
) -> Result<Reconstructions> {
    if method == Method::Net && net.is_none() {
        return Err(Error::InvalidParameter("method net needs trained network parameters".into()));
    }
    let out = data
        .samples
        .par_iter()
        .map(|s| -> Result<(CoefficientImage, usize)> {
            Ok(match method {
                Method::Pinv => (pseudo_inverse_apply(f, &s.y)?, f.rank()),
                Method::Tsvd => (tsvd_apply(f, policy, &s.y)?, policy.kept),
                Method::OptimalTsvd => {
                    let (p, img) = optimal_tsvd(f, &s.y, &s.x)?;
                    (img, p.kept)
                }
                Method::Net => (reconstruct(net.expect("checked above"), f, policy, &s.y)?, policy.kept),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (images, kept) = out.into_iter().unzip();
    Ok(Reconstructions { method, images, kept })
}

/// `‖x̂ − x‖₂ / ‖x‖₂`.
pub fn relative_error(estimate: &[f64], truth: &[f64]) -> f64 {
    let diff: Vec<f64> = estimate.iter().zip(truth).map(|(a, b)| a - b).collect();
    norm2(&diff) / norm2(truth)
}

/// Arithmetic mean, summed in index order.
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub dataset: String,
    /// Kept count of the run's truncation policy.
    pub kept: usize,
    pub sample_kept: Vec<usize>,
    pub per_sample: Vec<f64>,
    pub mean: f64,
}

/// Mean relative error `(1/M) Σ ‖x̂_i − x_i‖₂ / ‖x_i‖₂` of `recons` against
/// the ground truth of a held-out set.
pub fn evaluate(recons: &Reconstructions, test: &Dataset, kept: usize) -> Result<EvalReport> {
    if test.role == Role::Train {
        return Err(Error::RoleViolation("a training set cannot be used for evaluation".into()));
    }
    if test.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    check_len("reconstructions", test.len(), recons.images.len())?;
    let per_sample: Vec<f64> = recons
        .images
        .iter()
        .zip(&test.samples)
        .map(|(r, s)| {
            check_len("reconstruction", s.x.values.len(), r.values.len())?;
            Ok(relative_error(&r.values, &s.x.values))
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        method: recons.method,
        dataset: test.id(),
        kept,
        sample_kept: recons.kept.clone(),
        mean: mean(&per_sample),
        per_sample,
    })
}

/// Fails if `train` and `test` share a phantom seed or `test` is not a
/// held-out role.
pub fn check_disjoint(train: &Dataset, test: &Dataset) -> Result<()> {
    if train.role != Role::Train || test.role == Role::Train {
        return Err(Error::RoleViolation(format!(
            "expected a train set and a held-out set, got {} and {}",
            train.role, test.role
        )));
    }
    let seeds: std::collections::HashSet<u64> = train.samples.iter().map(|s| s.phantom_seed).collect();
    if let Some(i) = test.samples.iter().position(|s| seeds.contains(&s.phantom_seed)) {
        return Err(Error::RoleViolation(format!(
            "held-out sample {i} shares its phantom with the training set"
        )));
    }
    Ok(())
}

fn write_image(path: &Path, side_w: usize, side_h: usize, values: &[f64]) -> Result<GrayScale> {
    let scale = write_pgm(path, side_w, side_h, values)?;
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".scale.txt");
    std::fs::write(PathBuf::from(sidecar), scale.to_text())?;
    Ok(scale)
}

/// Writes, for the first `limit` samples, the ground truth, each method's
/// reconstruction, the absolute difference `|x̂ − x|` and a
/// truth | reconstruction | difference panel, each with a `.scale.txt`
/// sidecar. Also writes per-method error tables and `singular_values.csv`
/// (one `index,sigma` row per singular value, no header).
pub fn emit_figures(
    dir: &Path,
    reports: &[EvalReport],
    recons: &[Reconstructions],
    truth: &Dataset,
    sigma: &[f64],
    limit: usize,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let n = truth.len().min(limit);
    let side = truth.grid.side;
    for (i, s) in truth.samples.iter().take(n).enumerate() {
        let p = dir.join(format!("truth_{i:03}.pgm"));
        write_image(&p, side, side, &s.x.values)?;
        written.push(p);
    }
    for r in recons {
        check_len("reconstructions", truth.len(), r.images.len())?;
        for (i, (img, s)) in r.images.iter().zip(&truth.samples).take(n).enumerate() {
            check_len("reconstruction", s.x.values.len(), img.values.len())?;
            let diff: Vec<f64> = img.values.iter().zip(&s.x.values).map(|(a, b)| (a - b).abs()).collect();
            let base = format!("{}_{i:03}", r.method);
            let p = dir.join(format!("{base}.pgm"));
            write_image(&p, side, side, &img.values)?;
            written.push(p);
            let p = dir.join(format!("{base}_diff.pgm"));
            write_image(&p, side, side, &diff)?;
            written.push(p);
            let mut panel = Vec::with_capacity(3 * side * side);
            for row in 0..side {
                let range = row * side..(row + 1) * side;
                panel.extend_from_slice(&s.x.values[range.clone()]);
                panel.extend_from_slice(&img.values[range.clone()]);
                panel.extend_from_slice(&diff[range]);
            }
            let p = dir.join(format!("{base}_panel.pgm"));
            write_image(&p, 3 * side, side, &panel)?;
            written.push(p);
        }
    }
    for rep in reports {
        let p = dir.join(format!("errors_{}.csv", rep.method));
        let mut out = String::from("index,relative_error,kept\n");
        for (i, (e, k)) in rep.per_sample.iter().zip(&rep.sample_kept).enumerate() {
            out.push_str(&format!("{i},{e:e},{k}\n"));
        }
        std::fs::write(&p, out)?;
        written.push(p);
    }
    let p = dir.join("singular_values.csv");
    let mut file = std::io::BufWriter::new(std::fs::File::create(&p)?);
    for (i, s) in sigma.iter().enumerate() {
        writeln!(file, "{},{s:e}", i + 1)?;
    }
    file.flush()?;
    written.push(p);
    Ok(written)
}
