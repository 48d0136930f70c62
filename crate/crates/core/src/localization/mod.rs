//! Splice localization: dense patch signatures, a two-component mixture over
//! them and a per-pixel splice probability map.

mod gmm;

use std::path::Path;

use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::save_gray_png;
use crate::error::{io_err, Error, Result};
use crate::model::FingerprintModel;

pub use gmm::{fit_gmm2_data, min_samples, CovarianceKind, EmConfig, Gmm2};

/// Which parts of the stochastic code enter the signature.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignatureKind {
    #[default]
    MeanScale,
    MeanOnly,
}

/// Grid of per-patch signatures; row `r * grid_w + c` belongs to the patch
/// whose top-left corner is `(r * stride, c * stride)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SignatureField {
    pub features: Array2<f64>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub image_h: usize,
    pub image_w: usize,
}

impl SignatureField {
    pub fn num_cells(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

pub fn default_stride(patch_size: usize) -> usize {
    ((patch_size + 1) / 2).max(1)
}

pub fn grid_dims(image_h: usize, image_w: usize, patch: usize, stride: usize) -> Result<(usize, usize)> {
    if stride == 0 || patch == 0 {
        return Err(Error::Config("patch size and stride must be positive".into()));
    }
    if image_h < patch || image_w < patch {
        return Err(Error::Shape(format!("image {image_h}x{image_w} is smaller than patch {patch}")));
    }
    Ok(((image_h - patch) / stride + 1, (image_w - patch) / stride + 1))
}

const ENCODE_CHUNK: usize = 256;

/// Encodes every grid patch of an `[H, W, 3]` image in eval mode.
pub fn extract_signatures(
    image: &Array3<f64>,
    model: &FingerprintModel,
    stride: usize,
    kind: SignatureKind,
) -> Result<SignatureField> {
    let p = model.patch_size();
    let (h, w, c) = image.dim();
    let (gh, gw) = grid_dims(h, w, p, stride)?;
    let d = model.code_dim();
    let dim = match kind {
        SignatureKind::MeanScale => 2 * d,
        SignatureKind::MeanOnly => d,
    };
    let cells = gh * gw;
    let mut features = Array2::<f64>::zeros((cells, dim));
    for start in (0..cells).step_by(ENCODE_CHUNK) {
        let end = (start + ENCODE_CHUNK).min(cells);
        let mut batch = Array4::<f64>::zeros((end - start, p, p, c));
        for (b, cell) in (start..end).enumerate() {
            let (y, x) = ((cell / gw) * stride, (cell % gw) * stride);
            batch.slice_mut(s![b, .., .., ..]).assign(&image.slice(s![y..y + p, x..x + p, ..]));
        }
        for (b, code) in model.encode_batch(batch.view())?.into_iter().enumerate() {
            let sig = match kind {
                SignatureKind::MeanScale => code.signature(),
                SignatureKind::MeanOnly => code.mean,
            };
            if sig.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    step: start + b,
                    detail: "signature".into(),
                });
            }
            features.row_mut(start + b).assign(&ndarray::Array1::from(sig));
        }
    }
    Ok(SignatureField {
        features,
        grid_h: gh,
        grid_w: gw,
        patch_size: p,
        stride,
        image_h: h,
        image_w: w,
    })
}

pub fn fit_gmm2(field: &SignatureField, config: &EmConfig) -> Result<Gmm2> {
    fit_gmm2_data(field.features.view(), config)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Upsample {
    /// Mean posterior over every patch covering the pixel.
    #[default]
    Average,
    /// Posterior of the cell whose patch centre is closest.
    Nearest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMethod {
    Otsu,
    Optimal,
    Fixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatMap {
    /// Splice probability per pixel, in `[0, 1]`.
    pub values: Array2<f64>,
    pub mask: Option<Array2<bool>>,
    pub threshold: Option<(ThresholdMethod, f64)>,
}

impl HeatMap {
    pub fn new(values: Array2<f64>) -> Self {
        Self {
            values,
            mask: None,
            threshold: None,
        }
    }

    /// Marks pixels strictly above `t` as spliced.
    pub fn binarize(&mut self, method: ThresholdMethod, t: f64) {
        self.mask = Some(self.values.mapv(|v| v > t));
        self.threshold = Some((method, t));
    }
}

fn mahalanobis_sq(x: &[f64], mean: &[f64], chol: &Array2<f64>) -> f64 {
    let d = x.len();
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut s = x[i] - mean[i];
        for j in 0..i {
            s -= chol[[i, j]] * y[j];
        }
        y[i] = s / chol[[i, i]];
    }
    y.iter().map(|v| v * v).sum()
}

/// Index of the component treated as spliced: the one with less
/// responsibility mass. On a tie it is the component whose mean lies further
/// from the global data mean, measured under that component's own covariance
/// (under a shared metric both means are equidistant by construction).
pub fn spliced_component(data: ArrayView2<f64>, resp: &Array2<f64>, gmm: &Gmm2) -> usize {
    let m0 = resp.column(0).sum();
    let m1 = resp.column(1).sum();
    let tol = 1e-9 * (m0 + m1).max(1.0);
    if (m0 - m1).abs() > tol {
        return usize::from(m1 < m0);
    }
    let mean = data.mean_axis(Axis(0)).expect("non-empty").to_vec();
    let dist = |k: usize| -> f64 {
        let n = gmm.dim();
        let cov = Array2::from_shape_fn((n, n), |(i, j)| gmm.covariances[k][i][j]);
        gmm::cholesky(&cov).map_or(0.0, |l| mahalanobis_sq(&gmm.means[k], &mean, &l))
    };
    usize::from(dist(1) > dist(0))
}

/// Per-cell splice posterior from a fitted mixture.
pub fn cell_posteriors(field: &SignatureField, gmm: &Gmm2) -> Result<Vec<f64>> {
    let resp = gmm.responsibilities(field.features.view())?;
    let k = spliced_component(field.features.view(), &resp, gmm);
    Ok(resp.column(k).to_vec())
}

/// Broadcasts per-cell values to an `[H, W]` map.
pub fn upsample_cells(field: &SignatureField, cells: &[f64], mode: Upsample) -> Result<Array2<f64>> {
    if cells.len() != field.num_cells() {
        return Err(Error::Shape(format!("{} cell values for {} cells", cells.len(), field.num_cells())));
    }
    let (h, w, p, st) = (field.image_h, field.image_w, field.patch_size, field.stride);
    let cell = |r: usize, c: usize| cells[r * field.grid_w + c].clamp(0.0, 1.0);
    // nearest patch centre along one axis
    let nearest = |pos: usize, n: usize| -> usize {
        let centre = pos as f64 - (p as f64 - 1.0) / 2.0;
        ((centre / st as f64).round().max(0.0) as usize).min(n - 1)
    };
    let mut out = Array2::<f64>::zeros((h, w));
    match mode {
        Upsample::Nearest => {
            for y in 0..h {
                let r = nearest(y, field.grid_h);
                for x in 0..w {
                    out[[y, x]] = cell(r, nearest(x, field.grid_w));
                }
            }
        }
        Upsample::Average => {
            let mut count = Array2::<u32>::zeros((h, w));
            for r in 0..field.grid_h {
                for c in 0..field.grid_w {
                    let v = cell(r, c);
                    let (y0, x0) = (r * st, c * st);
                    out.slice_mut(s![y0..y0 + p, x0..x0 + p]).mapv_inplace(|a| a + v);
                    count.slice_mut(s![y0..y0 + p, x0..x0 + p]).mapv_inplace(|a| a + 1);
                }
            }
            for y in 0..h {
                for x in 0..w {
                    out[[y, x]] = match count[[y, x]] {
                        // uncovered border pixels take the nearest cell
                        0 => cell(nearest(y, field.grid_h), nearest(x, field.grid_w)),
                        n => (out[[y, x]] / n as f64).clamp(0.0, 1.0),
                    };
                }
            }
        }
    }
    Ok(out)
}

pub fn splice_probability(field: &SignatureField, gmm: &Gmm2, mode: Upsample) -> Result<HeatMap> {
    let cells = cell_posteriors(field, gmm)?;
    Ok(HeatMap::new(upsample_cells(field, &cells, mode)?))
}

pub const OTSU_BINS: usize = 256;

/// Otsu threshold over a 256-bin histogram of `[0, 1]` values. Pixels strictly
/// above the returned value form the upper class.
pub fn otsu_threshold(values: ArrayView2<f64>) -> Result<f64> {
    let mut hist = [0u64; OTSU_BINS];
    for &v in values.iter() {
        if !v.is_finite() {
            return Err(Error::Domain("non-finite map value".into()));
        }
        let b = ((v.clamp(0.0, 1.0) * OTSU_BINS as f64) as usize).min(OTSU_BINS - 1);
        hist[b] += 1;
    }
    let total: u64 = hist.iter().sum();
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::DegenerateHistogram);
    }
    let centre = |b: usize| (b as f64 + 0.5) / OTSU_BINS as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(b, &c)| c as f64 * centre(b)).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_bin) = (f64::NEG_INFINITY, 0);
    for (b, &count) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w0 += count as f64;
        sum0 += count as f64 * centre(b);
        let w1 = total as f64 - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let diff = sum0 / w0 - (sum_all - sum0) / w1;
        let between = w0 * w1 * diff * diff;
        if between > best {
            best = between;
            best_bin = b;
        }
    }
    Ok((best_bin + 1) as f64 / OTSU_BINS as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizeConfig {
    /// Defaults to half the patch size.
    pub stride: Option<usize>,
    pub signature: SignatureKind,
    pub em: EmConfig,
    pub upsample: Upsample,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            stride: None,
            signature: SignatureKind::MeanScale,
            em: EmConfig::default(),
            upsample: Upsample::Average,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Localization {
    pub field: SignatureField,
    pub gmm: Gmm2,
    pub heatmap: HeatMap,
}

impl Localization {
    pub fn sidecar(&self) -> HeatmapSidecar {
        let (method, t) = self.heatmap.threshold.unwrap_or((ThresholdMethod::Otsu, f64::NAN));
        HeatmapSidecar {
            threshold_method: method,
            threshold: if t.is_finite() { Some(t) } else { None },
            gmm_loglik: self.gmm.log_likelihood(),
            grid_shape: [self.field.grid_h, self.field.grid_w],
            stride: self.field.stride,
        }
    }
}

/// Full pipeline for one image. The map is binarized with Otsu when its
/// histogram allows it.
pub fn localize(image: &Array3<f64>, model: &FingerprintModel, config: &LocalizeConfig) -> Result<Localization> {
    let stride = config.stride.unwrap_or_else(|| default_stride(model.patch_size()));
    let field = extract_signatures(image, model, stride, config.signature)?;
    let gmm = fit_gmm2(&field, &config.em)?;
    let mut heatmap = splice_probability(&field, &gmm, config.upsample)?;
    match otsu_threshold(heatmap.values.view()) {
        Ok(t) => heatmap.binarize(ThresholdMethod::Otsu, t),
        Err(Error::DegenerateHistogram) => log::warn!("heat map is flat; left unthresholded"),
        Err(e) => return Err(e),
    }
    Ok(Localization { field, gmm, heatmap })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub threshold_method: ThresholdMethod,
    pub threshold: Option<f64>,
    pub gmm_loglik: f64,
    pub grid_shape: [usize; 2],
    pub stride: usize,
}

/// Writes the map as 8-bit grayscale plus a JSON sidecar.
pub fn write_heatmap(png: &Path, sidecar_path: &Path, map: &HeatMap, sidecar: &HeatmapSidecar) -> Result<()> {
    save_gray_png(png, &map.values)?;
    let text = serde_json::to_string_pretty(sidecar)?;
    std::fs::write(sidecar_path, text).map_err(io_err(sidecar_path))
}
