//! Quantitative diagnostics: the attention non-locality metric, feature
//! similarity matrices, and gate-value reporting.
//!
//! Non-locality of one head is the attention-weighted mean patch-grid
//! distance: D = (1/N_p) * sum_ij A[i,j] * delta[i,j]. The class token has
//! no grid position, so it is stripped and the remaining rows renormalized
//! before the sum; reports record that choice.

use crate::attention::AlphaMode;
use crate::error::{Error, Result};
use crate::model::{model_forward, ModelConfig, ParamSet, Variant};
use crate::tensor::{Real, Tensor};
use crate::util::par_map;
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Tolerance for accepting a row as stochastic.
const ROW_SUM_TOL: f64 = 1e-4;
/// Rows with less than this much mass left after stripping the class token
/// contribute zero distance instead of being renormalized.
const STRIP_MASS_FLOOR: f64 = 1e-8;

/// Pairwise Euclidean distances between patch-grid cells, in patch units;
/// constant for a fixed config.
#[derive(Clone, Debug)]
pub struct DistanceMatrix {
    delta: Tensor,
    grid: usize,
}

impl DistanceMatrix {
    pub fn grid(&self) -> usize {
        self.grid
    }

    /// `[N_p, N_p]` distances; symmetric, zero diagonal.
    pub fn delta(&self) -> &Tensor {
        &self.delta
    }

    pub fn patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn max_distance(&self) -> f64 {
        self.delta.data().iter().cloned().fold(0.0, Real::max) as f64
    }
}

/// Distances between all pairs of cells of a `grid x grid` patch layout,
/// scanned row-major to match patch embedding order.
pub fn build_distance_matrix(grid: usize) -> DistanceMatrix {
    assert!(grid >= 1, "grid must be positive");
    let n = grid * grid;
    let mut delta = Tensor::zeros(vec![n, n]);
    let d = delta.data_mut();
    for i in 0..n {
        let (ri, ci) = ((i / grid) as f64, (i % grid) as f64);
        for j in 0..n {
            let (rj, cj) = ((j / grid) as f64, (j % grid) as f64);
            d[i * n + j] = (((ri - rj).powi(2) + (ci - cj).powi(2)).sqrt()) as Real;
        }
    }
    DistanceMatrix { delta, grid }
}

fn check_square(op: &'static str, a: &Tensor) -> Result<usize> {
    match a.shape() {
        [r, c] if r == c => Ok(*r),
        s => Err(Error::shape(op, s, &[])),
    }
}

fn check_row_stochastic(op: &'static str, a: &Tensor) -> Result<()> {
    let n = check_square(op, a)?;
    for r in 0..n {
        let sum: f64 = a.data()[r * n..(r + 1) * n].iter().map(|&v| v as f64).sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::invalid(format!(
                "{op}: row {r} sums to {sum}, not stochastic within {ROW_SUM_TOL}"
            )));
        }
    }
    Ok(())
}

/// Drop the class-token row and column (index 0) from a full attention map.
pub fn strip_class_token(a: &Tensor) -> Result<Tensor> {
    let n = check_square("strip_class_token", a)?;
    if n < 2 {
        return Err(Error::invalid("strip_class_token: need at least one patch token"));
    }
    let p = n - 1;
    let mut out = Tensor::zeros(vec![p, p]);
    for i in 0..p {
        for j in 0..p {
            out.data_mut()[i * p + j] = a.data()[(i + 1) * n + (j + 1)];
        }
    }
    Ok(out)
}

/// Renormalize rows to sum to one; rows below the mass floor are zeroed.
pub fn renormalize_rows(a: &Tensor) -> Tensor {
    let (rows, cols) = a.rows_cols();
    let mut out = a.clone();
    for r in 0..rows {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let sum: f64 = row.iter().map(|&v| v as f64).sum();
        if sum <= STRIP_MASS_FLOOR {
            row.fill(0.0);
        } else {
            for v in row.iter_mut() {
                *v = (*v as f64 / sum) as Real;
            }
        }
    }
    out
}

/// Non-locality over a patch-only attention map `[N_p, N_p]`.
pub fn non_locality_patches(a: &Tensor, dm: &DistanceMatrix) -> Result<f64> {
    let p = check_square("non_locality_patches", a)?;
    if p != dm.patches() {
        return Err(Error::shape("non_locality_patches", a.shape(), dm.delta.shape()));
    }
    check_row_stochastic("non_locality_patches", a)?;
    let mut total = 0.0f64;
    for (av, dv) in a.data().iter().zip(dm.delta.data()) {
        total += *av as f64 * *dv as f64;
    }
    Ok(total / p as f64)
}

/// Non-locality of one head given its full attention map `[N, N]` including
/// the class token, which is stripped and the rows renormalized.
pub fn non_locality_head(a_full: &Tensor, dm: &DistanceMatrix) -> Result<f64> {
    check_row_stochastic("non_locality_head", a_full)?;
    let stripped = strip_class_token(a_full)?;
    if stripped.shape()[0] != dm.patches() {
        return Err(Error::shape("non_locality_head", stripped.shape(), dm.delta.shape()));
    }
    let renorm = renormalize_rows(&stripped);
    let p = dm.patches();
    let mut total = 0.0f64;
    for (av, dv) in renorm.data().iter().zip(dm.delta.data()) {
        total += *av as f64 * *dv as f64;
    }
    Ok(total / p as f64)
}

/// Per-head non-locality and the head mean for one layer `[H, N, N]`.
pub fn non_locality_layer(a: &Tensor, dm: &DistanceMatrix) -> Result<(Vec<f64>, f64)> {
    let (h, n) = match a.shape() {
        [h, n, n2] if n == n2 => (*h, *n),
        s => return Err(Error::shape("non_locality_layer", s, &[])),
    };
    let mut per_head = Vec::with_capacity(h);
    for i in 0..h {
        let head =
            Tensor::new(vec![n, n], a.data()[i * n * n..(i + 1) * n * n].to_vec())?;
        per_head.push(non_locality_head(&head, dm)?);
    }
    let mean = per_head.iter().sum::<f64>() / h as f64;
    Ok((per_head, mean))
}

/// Globality of a convex combination of two consecutive layers' patch-level
/// attention maps: D over `alpha * A_cur + (1 - alpha) * A_prev`.
pub fn revit_globality_decomposition(
    a_cur: &Tensor,
    a_prev: &Tensor,
    alpha: Real,
    dm: &DistanceMatrix,
) -> Result<f64> {
    if a_cur.shape() != a_prev.shape() {
        return Err(Error::shape("revit_globality_decomposition", a_cur.shape(), a_prev.shape()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let p = check_square("revit_globality_decomposition", a_cur)?;
    if p != dm.patches() {
        return Err(Error::shape("revit_globality_decomposition", a_cur.shape(), dm.delta.shape()));
    }
    check_row_stochastic("revit_globality_decomposition", a_cur)?;
    check_row_stochastic("revit_globality_decomposition", a_prev)?;
    let a = alpha as f64;
    let mut total = 0.0f64;
    for ((&cv, &pv), &dv) in a_cur.data().iter().zip(a_prev.data()).zip(dm.delta.data()) {
        total += (a * cv as f64 + (1.0 - a) * pv as f64) * dv as f64;
    }
    Ok(total / p as f64)
}

/// Cosine similarity between all row pairs of `[N, dim]` features. Zero-norm
/// rows get similarity 0 by convention.
pub fn feature_similarity(x: &Tensor) -> Result<Tensor> {
    let (n, d) = match x.shape() {
        [n, d] => (*n, *d),
        s => return Err(Error::shape("feature_similarity", s, &[])),
    };
    let norms: Vec<f64> = (0..n)
        .map(|i| {
            x.data()[i * d..(i + 1) * d].iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut out = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..n {
            if norms[i] == 0.0 || norms[j] == 0.0 {
                continue;
            }
            let dot: f64 = x.data()[i * d..(i + 1) * d]
                .iter()
                .zip(&x.data()[j * d..(j + 1) * d])
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            out.data_mut()[i * n + j] = (dot / (norms[i] * norms[j])) as Real;
        }
    }
    Ok(out)
}

/// Mean of off-diagonal entries of a square similarity matrix.
pub fn mean_offdiag(sim: &Tensor) -> Result<f64> {
    let n = check_square("mean_offdiag", sim)?;
    if n < 2 {
        return Err(Error::invalid("mean_offdiag: need at least two rows"));
    }
    let mut total = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += sim.data()[i * n + j] as f64;
            }
        }
    }
    Ok(total / (n * (n - 1)) as f64)
}

/// Effective per-layer gate values for a checkpoint; `None` for the plain
/// variant.
pub fn effective_alphas(cfg: &ModelConfig, params: &ParamSet) -> Option<Vec<Real>> {
    if cfg.variant != Variant::Revit {
        return None;
    }
    let gate = match cfg.alpha_mode {
        AlphaMode::Fixed(v) => return Some(vec![v; cfg.depth]),
        AlphaMode::Shared => {
            let raw = params.get("alpha_raw")?.data()[0];
            return Some(vec![crate::attention::logistic(raw); cfg.depth]);
        }
        AlphaMode::PerLayer => params.get("alpha_raw")?,
    };
    Some(gate.data().iter().map(|&r| crate::attention::logistic(r)).collect())
}

/// Mean non-locality per head and per layer over a set of images.
#[derive(Clone, Debug, Serialize)]
pub struct NonLocalityReport {
    pub model: String,
    pub samples: usize,
    /// Rows renormalized after stripping the class token.
    pub class_token_stripped: bool,
    /// `[layer][head]`
    pub per_head: Vec<Vec<f64>>,
    /// `[layer]`
    pub per_layer: Vec<f64>,
}

/// Run captured forwards over `images` and average the non-locality metric
/// per head and layer.
pub fn nonlocality_report(
    cfg: &ModelConfig,
    params: &ParamSet,
    images: &[Tensor],
    tag: &str,
) -> Result<NonLocalityReport> {
    if images.is_empty() {
        return Err(Error::invalid("nonlocality_report: empty image set"));
    }
    let dm = build_distance_matrix(cfg.grid());
    let per_image: Vec<Result<Vec<Vec<f64>>>> = par_map(images.len(), |i| {
        let record = model_forward(&images[i], cfg, params, true)?;
        let mut layers = Vec::with_capacity(cfg.depth);
        for a in &record.attn {
            let (heads, _) = non_locality_layer(a, &dm)?;
            layers.push(heads);
        }
        Ok(layers)
    });
    let mut acc = vec![vec![0.0f64; cfg.heads]; cfg.depth];
    for res in per_image {
        let layers = res?;
        for (l, heads) in layers.iter().enumerate() {
            for (h, v) in heads.iter().enumerate() {
                acc[l][h] += v;
            }
        }
    }
    let count = images.len() as f64;
    for heads in &mut acc {
        for v in heads.iter_mut() {
            *v /= count;
        }
    }
    let per_layer: Vec<f64> =
        acc.iter().map(|hs| hs.iter().sum::<f64>() / hs.len() as f64).collect();
    Ok(NonLocalityReport {
        model: tag.to_string(),
        samples: images.len(),
        class_token_stripped: true,
        per_head: acc,
        per_layer,
    })
}

/// Mean mixed-map decomposition vs the exact captured value, per layer.
#[derive(Clone, Debug, Serialize)]
pub struct DecompositionRow {
    pub layer: usize,
    /// D over `alpha * A_l + (1 - alpha) * A_{l-1}` (patch level, head mean).
    pub decomposed: f64,
    /// D over the true forward-pass A_l.
    pub exact: f64,
    pub difference: f64,
}

/// Compare the analysis-side decomposition with the exact non-locality of
/// the captured maps, averaged over images. Only meaningful for the
/// residual variant; layers start at 1.
pub fn decomposition_report(
    cfg: &ModelConfig,
    params: &ParamSet,
    images: &[Tensor],
) -> Result<Vec<DecompositionRow>> {
    if cfg.variant != Variant::Revit {
        return Ok(Vec::new());
    }
    if images.is_empty() || cfg.depth < 2 {
        return Ok(Vec::new());
    }
    let alphas = effective_alphas(cfg, params)
        .ok_or_else(|| Error::invalid("missing gate values for residual variant"))?;
    let dm = build_distance_matrix(cfg.grid());
    let n = cfg.tokens();
    let mut rows: Vec<DecompositionRow> = (1..cfg.depth)
        .map(|layer| DecompositionRow { layer, decomposed: 0.0, exact: 0.0, difference: 0.0 })
        .collect();
    for image in images {
        let record = model_forward(image, cfg, params, true)?;
        for l in 1..cfg.depth {
            let mut decomposed = 0.0f64;
            let mut exact = 0.0f64;
            for h in 0..cfg.heads {
                let cur = head_patch_map(&record.attn[l], h, n)?;
                let prev = head_patch_map(&record.attn[l - 1], h, n)?;
                decomposed += revit_globality_decomposition(&cur, &prev, alphas[l], &dm)?;
                exact += non_locality_patches(&cur, &dm)?;
            }
            rows[l - 1].decomposed += decomposed / cfg.heads as f64;
            rows[l - 1].exact += exact / cfg.heads as f64;
        }
    }
    let count = images.len() as f64;
    for row in &mut rows {
        row.decomposed /= count;
        row.exact /= count;
        row.difference = row.decomposed - row.exact;
    }
    Ok(rows)
}

/// One head's class-token-stripped, renormalized patch map.
fn head_patch_map(layer_attn: &Tensor, head: usize, n: usize) -> Result<Tensor> {
    let full = Tensor::new(
        vec![n, n],
        layer_attn.data()[head * n * n..(head + 1) * n * n].to_vec(),
    )?;
    Ok(renormalize_rows(&strip_class_token(&full)?))
}

// ---- report files ----

fn create_file(path: &Path) -> Result<std::fs::File> {
    std::fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn write_all(path: &Path, content: &str) -> Result<()> {
    let mut f = create_file(path)?;
    f.write_all(content.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Write `(model, layer, head, D)` and `(model, layer, D_layer)` CSVs for
/// one or more reports.
pub fn write_nonlocality_csvs(
    reports: &[NonLocalityReport],
    dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let head_path = dir.join("nonlocality_head.csv");
    let layer_path = dir.join("nonlocality_layer.csv");
    let mut head_csv = String::from("model,layer,head,D\n");
    let mut layer_csv = String::from("model,layer,D_layer\n");
    for r in reports {
        for (l, heads) in r.per_head.iter().enumerate() {
            for (h, v) in heads.iter().enumerate() {
                head_csv.push_str(&format!("{},{},{},{}\n", r.model, l, h, v));
            }
            layer_csv.push_str(&format!("{},{},{}\n", r.model, l, r.per_layer[l]));
        }
    }
    write_all(&head_path, &head_csv)?;
    write_all(&layer_path, &layer_csv)?;
    Ok((head_path, layer_path))
}

#[derive(Serialize)]
struct NonLocalitySummary<'a> {
    reports: &'a [NonLocalityReport],
    decomposition: &'a [(String, Vec<DecompositionRow>)],
    max_distance: f64,
}

/// Machine-readable summary alongside the CSVs.
pub fn write_nonlocality_json(
    reports: &[NonLocalityReport],
    decomposition: &[(String, Vec<DecompositionRow>)],
    grid: usize,
    dir: &Path,
) -> Result<PathBuf> {
    let path = dir.join("nonlocality_summary.json");
    let dm = build_distance_matrix(grid);
    let summary = NonLocalitySummary { reports, decomposition, max_distance: dm.max_distance() };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::format(format!("summary serialization: {e}")))?;
    write_all(&path, &json)?;
    Ok(path)
}

#[derive(Serialize)]
struct SimilarityEntry {
    image: usize,
    layer: usize,
    file: String,
    /// Rows given similarity 0 by the zero-norm convention.
    zero_norm_rows: usize,
}

/// Write one patch-level similarity matrix CSV per (image, layer), plus a
/// JSON index recording any zero-norm rows. Returns the matrix paths.
pub fn write_similarity_csvs(
    cfg: &ModelConfig,
    params: &ParamSet,
    images: &[Tensor],
    tag: &str,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    let mut index = Vec::new();
    for (i, image) in images.iter().enumerate() {
        let record = model_forward(image, cfg, params, true)?;
        for (l, feats) in record.features.iter().enumerate() {
            let n = feats.shape()[0];
            let d = feats.shape()[1];
            // Patch rows only; the class token has no grid cell.
            let patch =
                Tensor::new(vec![n - 1, d], feats.data()[d..].to_vec())?;
            let zero_norm_rows = (0..n - 1)
                .filter(|&r| patch.data()[r * d..(r + 1) * d].iter().all(|&v| v == 0.0))
                .count();
            let sim = feature_similarity(&patch)?;
            let p = n - 1;
            let mut csv = String::new();
            for r in 0..p {
                let row: Vec<String> =
                    sim.data()[r * p..(r + 1) * p].iter().map(|v| v.to_string()).collect();
                csv.push_str(&row.join(","));
                csv.push('\n');
            }
            let name = format!("similarity_{tag}_img{i}_layer{l}.csv");
            let path = dir.join(&name);
            write_all(&path, &csv)?;
            paths.push(path);
            index.push(SimilarityEntry { image: i, layer: l, file: name, zero_norm_rows });
        }
    }
    let json = serde_json::to_string_pretty(&index)
        .map_err(|e| Error::format(format!("similarity index serialization: {e}")))?;
    write_all(&dir.join(format!("similarity_index_{tag}.json")), &json)?;
    Ok(paths)
}

/// Per-layer effective gate CSV. Returns `false` (header-only file) for the
/// plain variant, which has no gate.
pub fn write_alpha_csv(cfg: &ModelConfig, params: &ParamSet, path: &Path) -> Result<bool> {
    let mut csv = String::from("layer,alpha\n");
    match effective_alphas(cfg, params) {
        Some(alphas) => {
            for (l, a) in alphas.iter().enumerate() {
                csv.push_str(&format!("{l},{a}\n"));
            }
            write_all(path, &csv)?;
            Ok(true)
        }
        None => {
            write_all(path, &csv)?;
            Ok(false)
        }
    }
}

/// Index for a raw attention-map export.
#[derive(Serialize)]
pub struct AttnExportIndex {
    pub layers: usize,
    pub heads: usize,
    pub tokens: usize,
    pub dtype: String,
    /// Blob layout: layer-major, then head, then row.
    pub order: String,
    pub blob: String,
    pub csv_files: Vec<String>,
}

/// Write per-layer per-head attention maps as CSVs plus one raw
/// little-endian f32 blob with a JSON index.
#[allow(clippy::unnecessary_cast)] // Real -> f32 is required under `f64`
pub fn export_attention_maps(attn: &[Tensor], dir: &Path) -> Result<AttnExportIndex> {
    if attn.is_empty() {
        return Err(Error::invalid("export_attention_maps: no captured maps"));
    }
    let (heads, n) = match attn[0].shape() {
        [h, n, n2] if n == n2 => (*h, *n),
        s => return Err(Error::shape("export_attention_maps", s, &[])),
    };
    let mut blob: Vec<u8> = Vec::with_capacity(attn.len() * heads * n * n * 4);
    let mut csv_files = Vec::new();
    for (l, layer) in attn.iter().enumerate() {
        if layer.shape() != [heads, n, n] {
            return Err(Error::shape("export_attention_maps", &[heads, n, n], layer.shape()));
        }
        for h in 0..heads {
            let map = &layer.data()[h * n * n..(h + 1) * n * n];
            for &v in map {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
            let mut csv = String::new();
            for r in 0..n {
                let row: Vec<String> =
                    map[r * n..(r + 1) * n].iter().map(|v| v.to_string()).collect();
                csv.push_str(&row.join(","));
                csv.push('\n');
            }
            let name = format!("attn_l{l}_h{h}.csv");
            write_all(&dir.join(&name), &csv)?;
            csv_files.push(name);
        }
    }
    let blob_name = "attn.bin".to_string();
    std::fs::write(dir.join(&blob_name), &blob).map_err(|e| Error::io(dir.join(&blob_name), e))?;
    let index = AttnExportIndex {
        layers: attn.len(),
        heads,
        tokens: n,
        dtype: "f32le".to_string(),
        order: "layer,head,row".to_string(),
        blob: blob_name,
        csv_files,
    };
    let json = serde_json::to_string_pretty(&index)
        .map_err(|e| Error::format(format!("index serialization: {e}")))?;
    write_all(&dir.join("index.json"), &json)?;
    Ok(index)
}

/// Outcome of the feature-collapse probe over a trained pair.
#[derive(Clone, Debug, Serialize)]
pub struct CollapseProbe {
    pub images: usize,
    /// Fraction of images whose plain-variant mean off-diagonal similarity
    /// is non-decreasing across layers.
    pub vit_nondecreasing_frac: f64,
    /// Fraction of images where the residual variant's final-layer mean
    /// similarity is strictly below the plain variant's.
    pub revit_lower_final_frac: f64,
}

/// Compare per-layer feature similarity trends between a plain and a
/// residual model over the same images.
pub fn feature_collapse_probe(
    vit: (&ModelConfig, &ParamSet),
    revit: (&ModelConfig, &ParamSet),
    images: &[Tensor],
) -> Result<CollapseProbe> {
    if images.is_empty() {
        return Err(Error::invalid("feature_collapse_probe: empty image set"));
    }
    let mut nondecreasing = 0usize;
    let mut lower_final = 0usize;
    for image in images {
        let vit_sims = per_layer_mean_sim(vit.0, vit.1, image)?;
        let revit_sims = per_layer_mean_sim(revit.0, revit.1, image)?;
        if vit_sims.windows(2).all(|w| w[1] >= w[0] - 1e-6) {
            nondecreasing += 1;
        }
        if revit_sims.last() < vit_sims.last() {
            lower_final += 1;
        }
    }
    Ok(CollapseProbe {
        images: images.len(),
        vit_nondecreasing_frac: nondecreasing as f64 / images.len() as f64,
        revit_lower_final_frac: lower_final as f64 / images.len() as f64,
    })
}

fn per_layer_mean_sim(cfg: &ModelConfig, params: &ParamSet, image: &Tensor) -> Result<Vec<f64>> {
    let record = model_forward(image, cfg, params, true)?;
    record
        .features
        .iter()
        .map(|feats| {
            let d = feats.shape()[1];
            let patch = Tensor::new(vec![feats.shape()[0] - 1, d], feats.data()[d..].to_vec())?;
            mean_offdiag(&feature_similarity(&patch)?)
        })
        .collect()
}
