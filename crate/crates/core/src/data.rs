//! Observations, alignment, stacking and image downsampling.
//!
//! Gridded images carry a validity mask; masked pixels (decorrelated
//! regions) are never sampled and never enter box averages.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::forward::LookVector;

/// Observations from one data source.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceObservations {
    pub inputs: DMatrix<f64>,
    pub outputs: DVector<f64>,
    pub look: Option<LookVector>,
    pub label: String,
    /// Per-observation likelihood weights, e.g. quadtree pixel counts.
    pub weights: Option<DVector<f64>>,
}

impl SourceObservations {
    pub fn new(inputs: DMatrix<f64>, outputs: DVector<f64>, label: impl Into<String>) -> Result<Self> {
        let obs = SourceObservations {
            inputs,
            outputs,
            look: None,
            label: label.into(),
            weights: None,
        };
        obs.validate()?;
        Ok(obs)
    }

    pub fn with_look(mut self, look: LookVector) -> Self {
        self.look = Some(look);
        self
    }

    pub fn with_weights(mut self, weights: DVector<f64>) -> Result<Self> {
        self.weights = Some(weights);
        self.validate()?;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.outputs.len()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.outputs.is_empty() {
            return domain(format!("source '{}' has no observations", self.label));
        }
        if self.inputs.nrows() != self.outputs.len() {
            return domain(format!(
                "source '{}': {} input rows but {} outputs",
                self.label,
                self.inputs.nrows(),
                self.outputs.len()
            ));
        }
        if self.inputs.iter().chain(self.outputs.iter()).any(|v| !v.is_finite()) {
            return domain(format!("source '{}' contains non-finite values", self.label));
        }
        if let Some(w) = &self.weights {
            if w.len() != self.outputs.len() {
                return domain(format!("source '{}': weight count mismatch", self.label));
            }
            if w.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return domain(format!("source '{}': weights must be positive", self.label));
            }
        }
        Ok(())
    }
}

/// `k` sources; `aligned` records whether they share identical inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiSourceDataset {
    pub sources: Vec<SourceObservations>,
    pub aligned: bool,
}

impl MultiSourceDataset {
    pub fn new(sources: Vec<SourceObservations>) -> Result<Self> {
        for s in &sources {
            s.validate()?;
        }
        let mut ds = MultiSourceDataset {
            sources,
            aligned: false,
        };
        validate_alignment(&mut ds)?;
        Ok(ds)
    }

    pub fn k(&self) -> usize {
        self.sources.len()
    }

    /// Observations per source; only meaningful for aligned data.
    pub fn n(&self) -> usize {
        self.sources[0].n()
    }

    pub fn dim(&self) -> usize {
        self.sources[0].dim()
    }

    /// Shared design of an aligned dataset.
    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.sources[0].inputs
    }

    pub fn weights(&self) -> Option<&DVector<f64>> {
        self.sources[0].weights.as_ref()
    }

    pub fn require_aligned(&self) -> Result<()> {
        if self.aligned {
            Ok(())
        } else {
            Err(Error::Alignment(format!(
                "{} sources do not share identical inputs; only the model without source bias applies",
                self.k()
            )))
        }
    }
}

/// True iff every source has the same inputs and weights, bit for bit.
pub fn validate_alignment(ds: &mut MultiSourceDataset) -> Result<bool> {
    let Some(first) = ds.sources.first() else {
        return domain("dataset has no sources");
    };
    let aligned = ds
        .sources
        .iter()
        .all(|s| s.inputs == first.inputs && s.weights == first.weights);
    ds.aligned = aligned;
    Ok(aligned)
}

/// Pointwise mean of the source outputs. The look vector is kept only when
/// every source shares it.
pub fn stack_sources(ds: &MultiSourceDataset) -> Result<SourceObservations> {
    ds.require_aligned()?;
    let k = ds.k() as f64;
    let mut sum = DVector::zeros(ds.n());
    for s in &ds.sources {
        sum += &s.outputs;
    }
    let first_look = ds.sources[0].look;
    let look = if ds.sources.iter().all(|s| s.look == first_look) {
        first_look
    } else {
        None
    };
    Ok(SourceObservations {
        inputs: ds.inputs().clone(),
        outputs: sum / k,
        look,
        label: "stack".into(),
        weights: ds.weights().cloned(),
    })
}

/// A regular raster. Pixel `(r, c)` sits at `origin + (c * dx, r * dy)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridImage {
    pub origin: [f64; 2],
    pub spacing: [f64; 2],
    pub values: DMatrix<f64>,
    /// `true` where the pixel is observed.
    pub mask: DMatrix<bool>,
    pub look: Option<LookVector>,
}

impl GridImage {
    pub fn new(origin: [f64; 2], spacing: [f64; 2], values: DMatrix<f64>) -> Result<Self> {
        let mask = values.map(|v| v.is_finite());
        Self::with_mask(origin, spacing, values, mask)
    }

    pub fn with_mask(origin: [f64; 2], spacing: [f64; 2], values: DMatrix<f64>, mask: DMatrix<bool>) -> Result<Self> {
        if !(spacing[0] > 0.0 && spacing[1] > 0.0) {
            return domain(format!("grid spacing must be positive, got {spacing:?}"));
        }
        if mask.shape() != values.shape() {
            return domain("mask and values differ in shape");
        }
        if values.iter().zip(mask.iter()).any(|(v, m)| *m && !v.is_finite()) {
            return domain("observed pixel holds a non-finite value");
        }
        Ok(GridImage {
            origin,
            spacing,
            values,
            mask,
            look: None,
        })
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn coordinate(&self, r: usize, c: usize) -> [f64; 2] {
        [
            self.origin[0] + c as f64 * self.spacing[0],
            self.origin[1] + r as f64 * self.spacing[1],
        ]
    }

    pub fn is_observed(&self, r: usize, c: usize) -> bool {
        self.mask[(r, c)]
    }

    /// Observed pixels in row-major order.
    pub fn observed_pixels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.rows() {
            for c in 0..self.cols() {
                if self.mask[(r, c)] {
                    out.push((r, c));
                }
            }
        }
        out
    }

    fn same_geometry(&self, other: &GridImage) -> bool {
        self.origin == other.origin && self.spacing == other.spacing && self.values.shape() == other.values.shape()
    }

    fn pixels_to_observations(&self, pixels: &[(usize, usize)], label: &str) -> Result<SourceObservations> {
        let inputs = DMatrix::from_fn(pixels.len(), 2, |i, j| self.coordinate(pixels[i].0, pixels[i].1)[j]);
        let outputs = DVector::from_iterator(pixels.len(), pixels.iter().map(|&(r, c)| self.values[(r, c)]));
        let obs = SourceObservations::new(inputs, outputs, label)?;
        Ok(match self.look {
            Some(l) => obs.with_look(l),
            None => obs,
        })
    }
}

fn sample_pixels(candidates: &[(usize, usize)], m: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if m == 0 {
        return domain("subsample size must be positive");
    }
    if m > candidates.len() {
        return domain(format!(
            "cannot draw {m} pixels from {} observed pixels",
            candidates.len()
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, candidates.len(), m).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| candidates[i]).collect())
}

/// `m` distinct observed pixels drawn without replacement, in raster order.
pub fn uniform_subsample(img: &GridImage, m: usize, seed: u64) -> Result<SourceObservations> {
    let pixels = sample_pixels(&img.observed_pixels(), m, seed)?;
    img.pixels_to_observations(&pixels, "uniform")
}

/// Draws the same `m` pixels from every image, among pixels observed in all
/// of them, giving an aligned dataset.
pub fn uniform_subsample_aligned(imgs: &[GridImage], m: usize, seed: u64) -> Result<MultiSourceDataset> {
    let Some(first) = imgs.first() else {
        return domain("no images to subsample");
    };
    if imgs.iter().any(|im| !first.same_geometry(im)) {
        return Err(Error::Alignment("images do not share a grid".into()));
    }
    let common: Vec<_> = first
        .observed_pixels()
        .into_iter()
        .filter(|&(r, c)| imgs.iter().all(|im| im.is_observed(r, c)))
        .collect();
    let pixels = sample_pixels(&common, m, seed)?;
    let sources = imgs
        .iter()
        .enumerate()
        .map(|(l, im)| im.pixels_to_observations(&pixels, &format!("source{}", l + 1)))
        .collect::<Result<Vec<_>>>()?;
    MultiSourceDataset::new(sources)
}

/// One quadtree cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadBox {
    pub center: [f64; 2],
    pub extent: [f64; 2],
    pub value: f64,
    pub n_pixels: usize,
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadtreeImage {
    pub boxes: Vec<QuadBox>,
    pub total_pixels: usize,
    pub look: Option<LookVector>,
}

impl QuadtreeImage {
    /// Box centers as inputs, box means as outputs, pixel counts as weights.
    pub fn to_observations(&self, label: &str) -> Result<SourceObservations> {
        let m = self.boxes.len();
        let inputs = DMatrix::from_fn(m, 2, |i, j| self.boxes[i].center[j]);
        let outputs = DVector::from_iterator(m, self.boxes.iter().map(|b| b.value));
        let obs = SourceObservations::new(inputs, outputs, label)?.with_weights(quadtree_weights(self)?)?;
        Ok(match self.look {
            Some(l) => obs.with_look(l),
            None => obs,
        })
    }

    /// Averages another image over the same boxes. Boxes with no observed
    /// pixel in `img` make the result an alignment error.
    pub fn resample(&self, img: &GridImage) -> Result<QuadtreeImage> {
        let mut boxes = Vec::with_capacity(self.boxes.len());
        let mut total = 0;
        for b in &self.boxes {
            let (sum, count) = box_sum(img, b.row0, b.col0, b.rows, b.cols);
            if count == 0 {
                return Err(Error::Alignment(format!(
                    "box at rows {}..{}, cols {}..{} has no observed pixels",
                    b.row0,
                    b.row0 + b.rows,
                    b.col0,
                    b.col0 + b.cols
                )));
            }
            total += count;
            boxes.push(QuadBox {
                value: sum / count as f64,
                n_pixels: count,
                ..*b
            });
        }
        Ok(QuadtreeImage {
            boxes,
            total_pixels: total,
            look: img.look,
        })
    }
}

fn box_sum(img: &GridImage, r0: usize, c0: usize, h: usize, w: usize) -> (f64, usize) {
    let mut sum = 0.0;
    let mut count = 0;
    for r in r0..r0 + h {
        for c in c0..c0 + w {
            if img.mask[(r, c)] {
                sum += img.values[(r, c)];
                count += 1;
            }
        }
    }
    (sum, count)
}

/// Recursive 4-way averaging. A box splits when its larger side exceeds
/// `max_box`, or when its value range exceeds `split_threshold` and its
/// larger side exceeds `min_box`.
pub fn quadtree_downsample(img: &GridImage, split_threshold: f64, min_box: usize, max_box: usize) -> Result<QuadtreeImage> {
    if !(split_threshold > 0.0) {
        return domain(format!("split threshold must be positive, got {split_threshold}"));
    }
    if min_box == 0 || min_box > max_box {
        return domain(format!("need 1 <= min_box <= max_box, got {min_box} and {max_box}"));
    }
    let mut boxes = Vec::new();
    let mut stack = vec![(0usize, 0usize, img.rows(), img.cols())];
    while let Some((r0, c0, h, w)) = stack.pop() {
        if h == 0 || w == 0 {
            continue;
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let (sum, count) = box_sum(img, r0, c0, h, w);
        if count == 0 {
            continue;
        }
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                if img.mask[(r, c)] {
                    lo = lo.min(img.values[(r, c)]);
                    hi = hi.max(img.values[(r, c)]);
                }
            }
        }
        let side = h.max(w);
        let split = side > 1 && (side > max_box || (hi - lo > split_threshold && side > min_box));
        if split {
            let (h1, w1) = (h.div_ceil(2), w.div_ceil(2));
            // pushed in reverse so boxes come out in quadrant order
            for (dr, hh) in [(h1, h - h1), (0, h1)] {
                for (dc, ww) in [(w1, w - w1), (0, w1)] {
                    stack.push((r0 + dr, c0 + dc, hh, ww));
                }
            }
            continue;
        }
        let first = img.coordinate(r0, c0);
        let last = img.coordinate(r0 + h - 1, c0 + w - 1);
        boxes.push(QuadBox {
            center: [0.5 * (first[0] + last[0]), 0.5 * (first[1] + last[1])],
            extent: [w as f64 * img.spacing[0], h as f64 * img.spacing[1]],
            value: sum / count as f64,
            n_pixels: count,
            row0: r0,
            col0: c0,
            rows: h,
            cols: w,
        });
    }
    if boxes.is_empty() {
        return Err(Error::Empty("image has no observed pixels".into()));
    }
    let total_pixels = boxes.iter().map(|b| b.n_pixels).sum();
    Ok(QuadtreeImage {
        boxes,
        total_pixels,
        look: img.look,
    })
}

/// `w_j = n_j`.
pub fn quadtree_weights(q: &QuadtreeImage) -> Result<DVector<f64>> {
    if q.boxes.is_empty() {
        return Err(Error::Empty("quadtree has no boxes".into()));
    }
    Ok(DVector::from_iterator(q.boxes.len(), q.boxes.iter().map(|b| b.n_pixels as f64)))
}

// ---------------------------------------------------------------------------
// File formats

/// Sidecar metadata of a grid CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSidecar {
    pub origin: [f64; 2],
    pub spacing: [f64; 2],
    pub rows: usize,
    pub cols: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub look_vector: Option<LookVector>,
}

fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(r)
}

fn parse_f64(field: &str, what: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("{what}: cannot parse '{field}' as a number")))
}

/// Reads `row,col,easting_m,northing_m,value`; empty values and pixels
/// absent from the file are missing.
pub fn read_grid_csv<R: Read>(r: R, meta: &GridSidecar) -> Result<GridImage> {
    let mut values = DMatrix::from_element(meta.rows, meta.cols, f64::NAN);
    let mut mask = DMatrix::from_element(meta.rows, meta.cols, false);
    let mut rdr = csv_reader(r);
    let headers = rdr.headers()?.clone();
    let want = ["row", "col", "easting_m", "northing_m", "value"];
    if headers.iter().collect::<Vec<_>>() != want {
        return Err(Error::Parse(format!("grid header must be {}", want.join(","))));
    }
    for rec in rdr.records() {
        let rec = rec?;
        let row: usize = rec[0].parse().map_err(|_| Error::Parse(format!("bad row index '{}'", &rec[0])))?;
        let col: usize = rec[1].parse().map_err(|_| Error::Parse(format!("bad column index '{}'", &rec[1])))?;
        if row >= meta.rows || col >= meta.cols {
            return Err(Error::Parse(format!("pixel ({row}, {col}) outside {}x{} grid", meta.rows, meta.cols)));
        }
        if rec[4].is_empty() {
            continue;
        }
        values[(row, col)] = parse_f64(&rec[4], "grid value")?;
        mask[(row, col)] = true;
    }
    let mut img = GridImage::with_mask(meta.origin, meta.spacing, values, mask)?;
    img.look = meta.look_vector;
    Ok(img)
}

pub fn write_grid_csv<W: Write>(w: W, img: &GridImage) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["row", "col", "easting_m", "northing_m", "value"])?;
    for r in 0..img.rows() {
        for c in 0..img.cols() {
            let [e, n] = img.coordinate(r, c);
            let v = if img.mask[(r, c)] {
                img.values[(r, c)].to_string()
            } else {
                String::new()
            };
            wtr.write_record([r.to_string(), c.to_string(), e.to_string(), n.to_string(), v])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn grid_sidecar(img: &GridImage) -> GridSidecar {
    GridSidecar {
        origin: img.origin,
        spacing: img.spacing,
        rows: img.rows(),
        cols: img.cols(),
        look_vector: img.look,
    }
}

/// Reads `x1,...,xp,y` with an optional trailing `weight` column.
pub fn read_observations_csv<R: Read>(r: R, label: &str) -> Result<SourceObservations> {
    let mut rdr = csv_reader(r);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let weighted = headers.last().map(String::as_str) == Some("weight");
    let n_in = headers.len() - if weighted { 2 } else { 1 };
    let shape_ok = n_in >= 1
        && headers[n_in] == "y"
        && (0..n_in).all(|j| headers[j] == format!("x{}", j + 1));
    if !shape_ok {
        return Err(Error::Parse(format!(
            "observation header must be x1,...,xp,y[,weight], got {}",
            headers.join(",")
        )));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut ws = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        for j in 0..n_in {
            xs.push(parse_f64(&rec[j], "input")?);
        }
        ys.push(parse_f64(&rec[n_in], "output")?);
        if weighted {
            ws.push(parse_f64(&rec[n_in + 1], "weight")?);
        }
    }
    if ys.is_empty() {
        return Err(Error::Parse(format!("'{label}' has no rows")));
    }
    let n = ys.len();
    let obs = SourceObservations::new(DMatrix::from_row_slice(n, n_in, &xs), DVector::from_vec(ys), label)?;
    if weighted {
        obs.with_weights(DVector::from_vec(ws))
    } else {
        Ok(obs)
    }
}

pub fn write_observations_csv<W: Write>(w: W, obs: &SourceObservations) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = (1..=obs.dim()).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    if obs.weights.is_some() {
        header.push("weight".into());
    }
    wtr.write_record(&header)?;
    for i in 0..obs.n() {
        let mut row: Vec<String> = obs.inputs.row(i).iter().map(f64::to_string).collect();
        row.push(obs.outputs[i].to_string());
        if let Some(w) = &obs.weights {
            row.push(w[i].to_string());
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_quadtree_csv<W: Write>(w: W, q: &QuadtreeImage) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["center_x", "center_y", "extent_x", "extent_y", "value", "n_pixels"])?;
    for b in &q.boxes {
        wtr.write_record([
            b.center[0].to_string(),
            b.center[1].to_string(),
            b.extent[0].to_string(),
            b.extent[1].to_string(),
            b.value.to_string(),
            b.n_pixels.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(xs: &[f64], ys: &[f64]) -> SourceObservations {
        SourceObservations::new(
            DMatrix::from_column_slice(xs.len(), 1, xs),
            DVector::from_column_slice(ys),
            "s",
        )
        .unwrap()
    }

    fn grid(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> GridImage {
        GridImage::new([0.0, 0.0], [1.0, 1.0], DMatrix::from_fn(rows, cols, f)).unwrap()
    }

    #[test]
    fn alignment_rules() {
        let a = obs(&[0.0, 1.0], &[1.0, 2.0]);
        assert!(MultiSourceDataset::new(vec![a.clone()]).unwrap().aligned);
        assert!(MultiSourceDataset::new(vec![a.clone(), a.clone()]).unwrap().aligned);
        let b = obs(&[0.0, 1.001], &[1.0, 2.0]);
        let ds = MultiSourceDataset::new(vec![a, b]).unwrap();
        assert!(!ds.aligned);
        assert!(matches!(stack_sources(&ds), Err(Error::Alignment(_))));
        let mut empty = MultiSourceDataset {
            sources: vec![],
            aligned: true,
        };
        assert!(validate_alignment(&mut empty).is_err());
    }

    #[test]
    fn stacking() {
        let a = obs(&[0.0, 1.0, 2.0], &[1.0, -2.0, 0.5]);
        let neg = obs(&[0.0, 1.0, 2.0], &[-1.0, 2.0, -0.5]);
        let same = stack_sources(&MultiSourceDataset::new(vec![a.clone(), a.clone()]).unwrap()).unwrap();
        assert_eq!(same.outputs, a.outputs);
        assert_eq!(same.label, "stack");
        let zero = stack_sources(&MultiSourceDataset::new(vec![a, neg]).unwrap()).unwrap();
        assert!(zero.outputs.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let r = SourceObservations::new(DMatrix::zeros(3, 1), DVector::zeros(2), "bad");
        assert!(r.is_err());
    }

    #[test]
    fn uniform_full_and_deterministic() {
        let img = grid(4, 5, |r, c| (r * 5 + c) as f64);
        let all = uniform_subsample(&img, 20, 3).unwrap();
        let mut seen: Vec<f64> = all.outputs.iter().copied().collect();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, (0..20).map(|v| v as f64).collect::<Vec<_>>());
        let a = uniform_subsample(&img, 7, 11).unwrap();
        let b = uniform_subsample(&img, 7, 11).unwrap();
        assert_eq!(a, b);
        assert!(uniform_subsample(&img, 21, 0).is_err());
    }

    #[test]
    fn uniform_skips_missing() {
        let mut img = grid(3, 3, |r, c| (r + c) as f64);
        img.mask[(1, 1)] = false;
        let s = uniform_subsample(&img, 8, 1).unwrap();
        assert!((0..8).all(|i| !(s.inputs[(i, 0)] == 1.0 && s.inputs[(i, 1)] == 1.0)));
        assert!(uniform_subsample(&img, 9, 1).is_err());
    }

    #[test]
    fn constant_image_single_box() {
        let img = grid(8, 8, |_, _| 2.5);
        let q = quadtree_downsample(&img, 0.1, 1, 8).unwrap();
        assert_eq!(q.boxes.len(), 1);
        assert_eq!(q.boxes[0].n_pixels, 64);
        assert_eq!(q.boxes[0].center, [3.5, 3.5]);
        assert_eq!(q.boxes[0].extent, [8.0, 8.0]);
    }

    #[test]
    fn offset_quadrant_splits_once() {
        // the top-right quadrant is offset by 10x the threshold
        let img = grid(4, 4, |r, c| if r < 2 && c >= 2 { 10.0 } else { 0.0 });
        let q = quadtree_downsample(&img, 1.0, 1, 4).unwrap();
        assert_eq!(q.boxes.len(), 4);
        assert!(q.boxes.iter().all(|b| b.n_pixels == 4));
        let hot: Vec<_> = q.boxes.iter().filter(|b| b.value == 10.0).collect();
        assert_eq!(hot.len(), 1);
        assert_eq!((hot[0].row0, hot[0].col0), (0, 2));
    }

    #[test]
    fn single_pixel_offset_refines_its_quadrant() {
        let img = grid(4, 4, |r, c| if r == 3 && c == 0 { 10.0 } else { 0.0 });
        let q = quadtree_downsample(&img, 1.0, 1, 4).unwrap();
        // three untouched quadrants plus four single pixels
        assert_eq!(q.boxes.len(), 7);
        assert_eq!(q.boxes.iter().filter(|b| b.n_pixels == 1).count(), 4);
    }

    #[test]
    fn max_box_forces_splits() {
        let img = grid(8, 8, |_, _| 1.0);
        let q = quadtree_downsample(&img, 1.0, 1, 2).unwrap();
        assert_eq!(q.boxes.len(), 16);
    }

    #[test]
    fn missing_pixels_and_empty_image() {
        let mut img = grid(4, 4, |r, c| (r * c) as f64);
        for r in 0..2 {
            for c in 0..2 {
                img.mask[(r, c)] = false;
            }
        }
        let q = quadtree_downsample(&img, 100.0, 1, 2).unwrap();
        assert_eq!(q.boxes.len(), 3);
        assert_eq!(q.total_pixels, 12);
        img.mask.fill(false);
        assert!(matches!(quadtree_downsample(&img, 1.0, 1, 4), Err(Error::Empty(_))));
    }

    #[test]
    fn weights_are_pixel_counts() {
        let img = grid(4, 4, |r, c| if r < 2 && c < 2 { 5.0 } else { 0.0 });
        let q = quadtree_downsample(&img, 1.0, 1, 4).unwrap();
        let w = quadtree_weights(&q).unwrap();
        assert_eq!(w.sum(), 16.0);
        let single = quadtree_downsample(&grid(4, 4, |_, _| 0.0), 1.0, 1, 4).unwrap();
        assert_eq!(quadtree_weights(&single).unwrap().as_slice(), &[16.0]);
    }

    #[test]
    fn resample_matches_direct_averages() {
        let a = grid(6, 6, |r, c| (r as f64 - 2.0).powi(2) + c as f64);
        let b = grid(6, 6, |r, c| (r * c) as f64);
        let q = quadtree_downsample(&a, 2.0, 1, 4).unwrap();
        let qb = q.resample(&b).unwrap();
        for bx in &qb.boxes {
            let (s, n) = box_sum(&b, bx.row0, bx.col0, bx.rows, bx.cols);
            assert_eq!(bx.value, s / n as f64);
        }
        assert_eq!(qb.total_pixels, 36);
    }

    #[test]
    fn observation_csv_round_trip() {
        let o = obs(&[0.25, 1.0 / 3.0], &[1e-7, -2.5])
            .with_weights(DVector::from_vec(vec![4.0, 1.0]))
            .unwrap();
        let mut buf = Vec::new();
        write_observations_csv(&mut buf, &o).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x1,y,weight\n"));
        let back = read_observations_csv(buf.as_slice(), "s").unwrap();
        assert_eq!(back, o);
        assert!(read_observations_csv("a,b\n1,2\n".as_bytes(), "bad").is_err());
    }

    #[test]
    fn grid_csv_round_trip_with_missing() {
        let mut img = grid(3, 2, |r, c| r as f64 - 0.5 * c as f64);
        img.mask[(2, 1)] = false;
        img.values[(2, 1)] = f64::NAN;
        img.look = Some(LookVector::normalized([0.1, -0.2, 0.9]).unwrap());
        let mut buf = Vec::new();
        write_grid_csv(&mut buf, &img).unwrap();
        let meta = grid_sidecar(&img);
        let json = serde_json::to_string(&meta).unwrap();
        let meta2: GridSidecar = serde_json::from_str(&json).unwrap();
        let back = read_grid_csv(buf.as_slice(), &meta2).unwrap();
        assert_eq!(back.mask, img.mask);
        assert_eq!(back.look, img.look);
        for (r, c) in img.observed_pixels() {
            assert_eq!(back.values[(r, c)], img.values[(r, c)]);
        }
    }
}
