//! Synthetic paired-translation datasets and the intensity normalization
//! pipeline.
//!
//! * `gauss2gauss`: 2-D targets from a two-component Gaussian mixture; the
//!   source is `tanh(1.5 R(35 deg) x0)`, an invertible nonlinear map.
//! * `shapes16`: 16x16 single-channel images of rectangles and ellipses on a
//!   dark background; the source is the intensity-inverted image passed
//!   through a 3x3 box blur.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::io::{load_tensor, save_tensor};
use crate::rng::{substream, Purpose};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Gauss2Gauss,
    Shapes16,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Gauss2Gauss => "gauss2gauss",
            Task::Shapes16 => "shapes16",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss2gauss" => Ok(Task::Gauss2Gauss),
            "shapes16" => Ok(Task::Shapes16),
            other => Err(Error::Config(format!(
                "unknown task `{other}` (expected gauss2gauss or shapes16)"
            ))),
        }
    }
}

impl Task {
    pub fn sample_shape(self) -> Vec<usize> {
        match self {
            Task::Gauss2Gauss => vec![2],
            Task::Shapes16 => vec![1, 16, 16],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Target/source pairs of one split, with their indices into the full set.
#[derive(Clone, Debug, PartialEq)]
pub struct Pairs {
    pub x0: Tensor,
    pub y: Tensor,
    pub indices: Vec<usize>,
}

impl Pairs {
    pub fn len(&self) -> usize {
        self.x0.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub task: Option<Task>,
    pub train: Pairs,
    pub val: Pairs,
    pub test: Pairs,
}

impl PairedDataset {
    pub fn split(&self, s: Split) -> &Pairs {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.train.x0.sample_shape()
    }

    /// Splits full `(x0, y)` batches 80/10/10 after a seeded shuffle.
    pub fn from_full(task: Option<Task>, x0: Tensor, y: Tensor, seed: u64) -> Result<Self> {
        x0.ensure_same_shape(&y)?;
        let n = x0.batch();
        if n == 0 {
            return Err(Error::Config("dataset is empty".into()));
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = substream(seed, 0, 0, Purpose::Split);
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let n_val = n / 10;
        let n_test = n / 10;
        let n_train = n - n_val - n_test;
        let take = |idx: &[usize]| {
            let mut idx = idx.to_vec();
            idx.sort_unstable();
            Pairs {
                x0: x0.select(&idx),
                y: y.select(&idx),
                indices: idx,
            }
        };
        Ok(PairedDataset {
            task,
            train: take(&order[..n_train]),
            val: take(&order[n_train..n_train + n_val]),
            test: take(&order[n_train + n_val..]),
        })
    }

    /// Writes `<split>_x0.brt` and `<split>_y.brt` for each split.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for s in Split::ALL {
            let p = self.split(s);
            save_tensor(dir.join(format!("{}_x0.brt", s.name())), &p.x0)?;
            save_tensor(dir.join(format!("{}_y.brt", s.name())), &p.y)?;
        }
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let load = |s: Split| -> Result<Pairs> {
            let x0 = load_tensor(dir.join(format!("{}_x0.brt", s.name())))?;
            let y = load_tensor(dir.join(format!("{}_y.brt", s.name())))?;
            x0.ensure_same_shape(&y)?;
            Ok(Pairs {
                indices: Vec::new(),
                x0,
                y,
            })
        };
        let (mut train, mut val, mut test) = (load(Split::Train)?, load(Split::Val)?, load(Split::Test)?);
        // Stored splits are disjoint by construction; index them in order.
        train.indices = (0..train.len()).collect();
        val.indices = (train.len()..train.len() + val.len()).collect();
        test.indices = (train.len() + val.len()..train.len() + val.len() + test.len()).collect();
        if train.is_empty() {
            return Err(Error::Config(format!("{}: training split is empty", dir.display())));
        }
        Ok(PairedDataset {
            task: None,
            train,
            val,
            test,
        })
    }
}

const MIXTURE_MEANS: [[f64; 2]; 2] = [[-0.45, 0.35], [0.4, -0.3]];
const MIXTURE_SD: f64 = 0.15;
const ROTATION_DEG: f64 = 35.0;
const SOURCE_GAIN: f64 = 1.5;

/// The gauss2gauss source map `tanh(1.5 R(35 deg) x)`.
pub fn gauss2gauss_source(x: [f64; 2]) -> [f64; 2] {
    let (s, c) = ROTATION_DEG.to_radians().sin_cos();
    let rx = c * x[0] - s * x[1];
    let ry = s * x[0] + c * x[1];
    [(SOURCE_GAIN * rx).tanh(), (SOURCE_GAIN * ry).tanh()]
}

/// Inverse of [`gauss2gauss_source`] on `(-1, 1)^2`.
pub fn gauss2gauss_target(y: [f64; 2]) -> [f64; 2] {
    let (s, c) = ROTATION_DEG.to_radians().sin_cos();
    let rx = y[0].atanh() / SOURCE_GAIN;
    let ry = y[1].atanh() / SOURCE_GAIN;
    [c * rx + s * ry, -s * rx + c * ry]
}

/// 3x3 box blur with edge replication, per channel.
pub fn box_blur3(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    acc += img[sy * w + sx];
                }
            }
            out[y * w + x] = acc / 9.0;
        }
    }
    out
}

fn render_shapes(rng: &mut impl Rng, size: usize) -> Vec<f64> {
    let mut img = vec![-1.0; size * size];
    let count = rng.random_range(1..=3);
    for _ in 0..count {
        let cy = rng.random_range(2.0..size as f64 - 2.0);
        let cx = rng.random_range(2.0..size as f64 - 2.0);
        let ry = rng.random_range(1.5..size as f64 / 3.0);
        let rx = rng.random_range(1.5..size as f64 / 3.0);
        let level = rng.random_range(-0.2..1.0);
        let ellipse = rng.random_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (py, px) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let inside = if ellipse {
                    (py / ry).powi(2) + (px / rx).powi(2) <= 1.0
                } else {
                    py.abs() <= ry && px.abs() <= rx
                };
                if inside {
                    img[y * size + x] = level;
                }
            }
        }
    }
    img
}

/// Draws `n` pairs for `task` and splits them.
pub fn make_synthetic_pairs(task: Task, n: usize, seed: u64) -> Result<PairedDataset> {
    if n == 0 {
        return Err(Error::Config("n must be >= 1".into()));
    }
    let shape = task.sample_shape();
    let per: usize = shape.iter().product();
    let mut full_shape = vec![n];
    full_shape.extend(&shape);
    let mut x0 = Tensor::zeros(&full_shape);
    let mut y = Tensor::zeros(&full_shape);
    for i in 0..n {
        let mut rng = substream(seed, i as u64, 0, Purpose::Data);
        match task {
            Task::Gauss2Gauss => {
                let comp = usize::from(rng.random_bool(0.5));
                let mut p = [0.0; 2];
                for (k, v) in p.iter_mut().enumerate() {
                    let e: f64 = rng.sample(StandardNormal);
                    *v = (MIXTURE_MEANS[comp][k] + MIXTURE_SD * e).clamp(-1.0, 1.0);
                }
                x0.sample_mut(i).copy_from_slice(&p);
                y.sample_mut(i).copy_from_slice(&gauss2gauss_source(p));
            }
            Task::Shapes16 => {
                let img = render_shapes(&mut rng, 16);
                let inverted: Vec<f64> = img.iter().map(|v| -v).collect();
                x0.sample_mut(i).copy_from_slice(&img);
                y.sample_mut(i).copy_from_slice(&box_blur3(&inverted, 16, 16));
            }
        }
        debug_assert_eq!(x0.sample(i).len(), per);
    }
    PairedDataset::from_full(Some(task), x0, y, seed)
}

/// Scales to mean intensity 1, then maps the global min/max onto `[-1, 1]`.
pub fn normalize_volume(raw: &Tensor) -> Result<Tensor> {
    if raw.is_empty() || !raw.all_finite() {
        return Err(Error::Degenerate("volume must be non-empty and finite".into()));
    }
    let mean = raw.mean();
    if mean <= 0.0 {
        return Err(Error::Degenerate(format!(
            "volume mean must be positive to rescale to 1, got {mean}"
        )));
    }
    let scaled = raw.map(|v| v / mean);
    let lo = scaled.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scaled.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Err(Error::Degenerate("constant volume has zero range".into()));
    }
    let mut out = scaled.map(|v| 2.0 * (v - lo) / (hi - lo) - 1.0);
    // Pin the extremes exactly.
    for (o, s) in out.data_mut().iter_mut().zip(scaled.data()) {
        if *s == lo {
            *o = -1.0;
        } else if *s == hi {
            *o = 1.0;
        }
    }
    Ok(out)
}
