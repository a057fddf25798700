//! Seeded synthetic datasets, delimited-text I/O, standardisation and
//! train/validation/test splitting.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, LogNormal, Normal, StandardNormal};

use crate::error::{Result, SnlError};
use crate::numeric::sigmoid;
use crate::rng::{stream, streams, SnlRng};

/// Split sizes for the 2-D density sets: train, validation, test.
pub const DENSITY_SPLIT: [usize; 3] = [7000, 1000, 2000];
/// Split sizes for the 1-D regression sets.
pub const REGRESSION_SPLIT: [usize; 3] = [2000, 500, 1000];

pub const DENSITY_NAMES: [&str; 4] = ["funnel", "pinwheel", "checkerboard", "four_circles"];

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub name: String,
    pub seed: u64,
    pub train: Array2<f64>,
    pub validation: Array2<f64>,
    pub test: Array2<f64>,
}

impl DatasetSplit {
    pub fn dim(&self) -> usize {
        self.train.ncols()
    }

    /// Standardise every split with statistics of the training split.
    pub fn standardize(&mut self) -> Result<Standardizer> {
        let s = Standardizer::fit(self.train.view())?;
        s.apply_in_place(&mut self.train);
        s.apply_in_place(&mut self.validation);
        s.apply_in_place(&mut self.test);
        Ok(s)
    }
}

/// Per-column affine map to zero mean and unit population variance.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Standardizer {
    pub fn fit(points: ArrayView2<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(SnlError::EmptyBatch("standardisation data"));
        }
        let mean = points.mean_axis(Axis(0)).expect("nonempty");
        let std = points.std_axis(Axis(0), 0.0);
        if let Some(j) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(SnlError::DegenerateData(format!("column {j} is constant")));
        }
        Ok(Self { mean, std })
    }

    pub fn apply_in_place(&self, points: &mut Array2<f64>) {
        for mut row in points.rows_mut() {
            row -= &self.mean;
            row /= &self.std;
        }
    }

    /// `log |det|` of the map; add it to a log-density in standardised
    /// units to express it in the original units.
    pub fn log_jacobian(&self) -> f64 {
        -self.std.iter().map(|s| s.ln()).sum::<f64>()
    }
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        Err(SnlError::Domain("dataset size must be at least 1".into()))
    } else {
        Ok(())
    }
}

/// Points of a named 2-D density, reproducible from `seed`.
///
/// * `checkerboard`: uniform on `[-4, 4]²` restricted to cells with
///   `⌊u₁⌋ + ⌊u₂⌋` even.
/// * `funnel`: `v ~ N(0, 1)`, `x ~ N(0, e^{2v})`, emitted as `(v, x)` and
///   clamped to `[-6, 6]²`.
/// * `pinwheel`: five spokes; radial offset `1 + N(0, 0.3²)`, tangential
///   `N(0, 0.05²)`, each point rotated by its spoke angle plus
///   `0.25·exp(radial)`, then scaled by 2.
/// * `four_circles`: one of the radii 1, 2, 3, 4 uniformly, uniform angle,
///   plus `N(0, 0.1²)` noise per coordinate.
pub fn generate_density_2d(name: &str, n: usize, seed: u64) -> Result<Array2<f64>> {
    check_n(n)?;
    let mut rng = stream(seed, streams::DATASET);
    let mut out = Array2::zeros((n, 2));
    match name {
        "checkerboard" => {
            let mut i = 0;
            while i < n {
                let u1: f64 = rng.random_range(-4.0..4.0);
                let u2: f64 = rng.random_range(-4.0..4.0);
                if checkerboard_cell(u1, u2) {
                    out[[i, 0]] = u1;
                    out[[i, 1]] = u2;
                    i += 1;
                }
            }
        }
        "funnel" => {
            for mut row in out.rows_mut() {
                let v: f64 = rng.sample(StandardNormal);
                let z: f64 = rng.sample(StandardNormal);
                row[0] = v.clamp(-6.0, 6.0);
                row[1] = (v.exp() * z).clamp(-6.0, 6.0);
            }
        }
        "pinwheel" => {
            let spokes = 5;
            for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                let spoke = (i % spokes) as f64;
                let r = 1.0 + 0.3 * rng.sample::<f64, _>(StandardNormal);
                let t = 0.05 * rng.sample::<f64, _>(StandardNormal);
                let angle = 2.0 * std::f64::consts::PI * spoke / spokes as f64 + 0.25 * r.exp();
                let (s, c) = angle.sin_cos();
                row[0] = 2.0 * (r * c - t * s);
                row[1] = 2.0 * (r * s + t * c);
            }
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            out = out.select(Axis(0), &perm);
        }
        "four_circles" => {
            for mut row in out.rows_mut() {
                let radius = rng.random_range(1..=4) as f64;
                let angle: f64 = rng.random_range(0.0..2.0 * std::f64::consts::PI);
                row[0] = radius * angle.cos() + 0.1 * rng.sample::<f64, _>(StandardNormal);
                row[1] = radius * angle.sin() + 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        other => {
            return Err(SnlError::UnknownName {
                kind: "dataset",
                name: other.to_string(),
            })
        }
    }
    Ok(out)
}

/// Parity rule of the checkerboard density.
pub fn checkerboard_cell(u1: f64, u2: f64) -> bool {
    (u1.floor() as i64 + u2.floor() as i64).rem_euclid(2) == 0
}

/// `(x, y)` pairs of a 1-D regression set, one pair per row.
///
/// * `1`: `x ~ U[-3, 3]`. For `x < 0`, `y` is a two-component Gaussian
///   mixture with weight 0.8 on mean `sin x` and 0.2 on mean `-sin x`, both
///   with scale `0.15·σ(x)`. For `x ≥ 0`, `y ~ LogNormal(0, 0.25)`.
/// * `2`: `x ~ U[0, 1]`, in four chunks: `Beta(0.5, 1)` below 0.21;
///   `N(3cos x - 2, |3cos x - 2|)` up to 0.47; `U(0, 4x)` up to 0.61; an
///   equal mixture of `U(0.5, 8)`, `U(1, 3)` and `U(-4.5, 1.5)` above.
pub fn generate_regression_1d(which: u32, n: usize, seed: u64) -> Result<Array2<f64>> {
    check_n(n)?;
    let mut rng = stream(seed, streams::DATASET);
    let mut out = Array2::zeros((n, 2));
    match which {
        1 => {
            let lognormal = LogNormal::new(0.0, 0.25).expect("valid");
            for mut row in out.rows_mut() {
                let x: f64 = rng.random_range(-3.0..3.0);
                let y = if x < 0.0 {
                    let sign = if rng.random::<f64>() < 0.8 { 1.0 } else { -1.0 };
                    let sd = 0.15 * sigmoid(x);
                    sign * x.sin() + sd * rng.sample::<f64, _>(StandardNormal)
                } else {
                    lognormal.sample(&mut rng)
                };
                row[0] = x;
                row[1] = y;
            }
        }
        2 => {
            let beta = Beta::new(0.5, 1.0).expect("valid");
            for mut row in out.rows_mut() {
                let x: f64 = rng.random_range(0.0..=1.0);
                let y = if x < 0.21 {
                    beta.sample(&mut rng)
                } else if x < 0.47 {
                    let mu = 3.0 * x.cos() - 2.0;
                    Normal::new(mu, mu.abs()).expect("positive scale").sample(&mut rng)
                } else if x < 0.61 {
                    rng.random_range(0.0..4.0 * x)
                } else {
                    match rng.random_range(0..3) {
                        0 => rng.random_range(0.5..8.0),
                        1 => rng.random_range(1.0..3.0),
                        _ => rng.random_range(-4.5..1.5),
                    }
                };
                row[0] = x;
                row[1] = y;
            }
        }
        other => {
            return Err(SnlError::UnknownName {
                kind: "regression dataset",
                name: other.to_string(),
            })
        }
    }
    Ok(out)
}

/// Seeded permutation of the rows followed by a contiguous partition into
/// train, validation and test.
pub fn split(points: ArrayView2<f64>, sizes: [usize; 3], seed: u64, name: &str) -> Result<DatasetSplit> {
    let total: usize = sizes.iter().sum();
    if total > points.nrows() {
        return Err(SnlError::InvalidConfig(format!(
            "split sizes sum to {total} but only {} points are available",
            points.nrows()
        )));
    }
    let mut perm: Vec<usize> = (0..points.nrows()).collect();
    let mut rng: SnlRng = stream(seed, streams::SPLIT);
    perm.shuffle(&mut rng);
    let (a, rest) = perm.split_at(sizes[0]);
    let (b, rest) = rest.split_at(sizes[1]);
    let c = &rest[..sizes[2]];
    Ok(DatasetSplit {
        name: name.to_string(),
        seed,
        train: points.select(Axis(0), a),
        validation: points.select(Axis(0), b),
        test: points.select(Axis(0), c),
    })
}

/// A named 2-D density at the standard 7000/1000/2000 split.
pub fn density_split(name: &str, seed: u64) -> Result<DatasetSplit> {
    let total = DENSITY_SPLIT.iter().sum();
    let points = generate_density_2d(name, total, seed)?;
    split(points.view(), DENSITY_SPLIT, seed, name)
}

/// A 1-D regression set at the 2000/500/1000 split.
pub fn regression_split(which: u32, seed: u64) -> Result<DatasetSplit> {
    let total = REGRESSION_SPLIT.iter().sum();
    let points = generate_regression_1d(which, total, seed)?;
    split(points.view(), REGRESSION_SPLIT, seed, &format!("regression{which}"))
}

/// Parse comma-separated numeric rows.
pub fn parse_delimited(text: &str, has_header: bool) -> Result<Array2<f64>> {
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (line_no, line) in text.lines().enumerate().skip(usize::from(has_header)) {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut count = 0;
        for (col, cell) in line.split(',').enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| SnlError::Parse {
                row: line_no + 1,
                column: col + 1,
                message: format!("not a number: {:?}", cell.trim()),
            })?;
            values.push(v);
            count += 1;
        }
        match cols {
            None => cols = Some(count),
            Some(c) if c != count => {
                return Err(SnlError::Parse {
                    row: line_no + 1,
                    column: count.min(c) + 1,
                    message: format!("expected {c} columns, found {count}"),
                })
            }
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| SnlError::DegenerateData("no data rows".into()))?;
    Ok(Array2::from_shape_vec((rows, cols), values).expect("rectangular"))
}

/// Read a delimited file. With `standardize`, the columns are standardised
/// using the file's own statistics, so pass the training split here and
/// apply the returned [`Standardizer`] to the other splits.
pub fn load_delimited(path: &Path, has_header: bool, standardize: bool) -> Result<(Array2<f64>, Option<Standardizer>)> {
    let text = std::fs::read_to_string(path)?;
    let mut points = parse_delimited(&text, has_header)?;
    if standardize {
        let s = Standardizer::fit(points.view())?;
        s.apply_in_place(&mut points);
        return Ok((points, Some(s)));
    }
    Ok((points, None))
}

/// Rows as comma-separated text with shortest round-trip decimal formatting.
pub fn format_delimited(points: ArrayView2<f64>, header: Option<&[&str]>) -> String {
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&h.join(","));
        out.push('\n');
    }
    for row in points.rows() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v:?}").expect("string write");
        }
        out.push('\n');
    }
    out
}
