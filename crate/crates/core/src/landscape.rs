//! Weight-space plane sections through trained subnetworks and principal
//! component projections of function-space training trajectories.
//!
//! A subnetwork's slice holds the parameters exclusive to it: its input
//! slot's first-layer rows plus its head's output columns and biases. A
//! slice is evaluated in isolation: its input slot receives the data and
//! every other slot receives zeros.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, argmax, PROBABILITY_FLOOR};
use crate::data::Dataset;
use crate::model::{Architecture, ModelError, Network, Task};
use crate::tensor::Tensor;
use crate::training::TrajectoryLog;

#[derive(Debug, Error)]
pub enum LandscapeError {
    #[error("slice has {got} values, network expects {expected}")]
    SliceLength { expected: usize, got: usize },
    #[error("subnetwork {index} out of range for {heads} heads")]
    Subnetwork { index: usize, heads: usize },
    #[error("{0}")]
    Unsupported(String),
    #[error("degenerate plane: {0}")]
    Degenerate(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Analysis(#[from] analysis::AnalysisError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, LandscapeError>;

pub const DEFAULT_RESOLUTION: usize = 25;
pub const DEFAULT_MARGIN: f64 = 0.2;
pub const DEFAULT_MAX_EXAMPLES: usize = 1000;
const DEGENERATE_NORM: f64 = 1e-10;
const POWER_TOLERANCE: f64 = 1e-9;
const POWER_MAX_ITERATIONS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubnetworkSlice {
    pub index: usize,
    pub values: Vec<f64>,
}

struct Layout {
    input_dim: usize,
    hidden: usize,
    output_dim: usize,
    heads: usize,
    /// Whether every slot owns separate first-layer rows (false when the input is shared).
    slot_rows: bool,
}

impl Layout {
    fn of(net: &Network) -> Result<Self> {
        let c = net.config();
        match c.architecture {
            Architecture::DeepEnsemble => {
                return Err(LandscapeError::Unsupported(
                    "deep ensemble members do not share a body, so their slices cannot be interchanged".into(),
                ))
            }
            Architecture::Standard | Architecture::Mimo | Architecture::NaiveMultihead => {}
        }
        let &hidden = c.hidden_widths.first().ok_or_else(|| {
            LandscapeError::Unsupported("slices need at least one hidden layer".into())
        })?;
        Ok(Layout {
            input_dim: c.input_dim,
            hidden,
            output_dim: c.output_dim,
            heads: c.ensemble_size,
            slot_rows: c.architecture == Architecture::Mimo,
        })
    }

    fn last_width(net: &Network) -> usize {
        *net.config().hidden_widths.last().expect("checked by Layout::of")
    }

    fn slice_len(&self, last: usize) -> usize {
        self.input_dim * self.hidden + last * self.output_dim + self.output_dim
    }

    fn check(&self, index: usize) -> Result<()> {
        if index >= self.heads {
            return Err(LandscapeError::Subnetwork {
                index,
                heads: self.heads,
            });
        }
        Ok(())
    }

    fn first_row(&self, index: usize) -> usize {
        if self.slot_rows {
            index * self.input_dim
        } else {
            0
        }
    }
}

pub fn extract_slice(net: &Network, index: usize) -> Result<SubnetworkSlice> {
    let layout = Layout::of(net)?;
    layout.check(index)?;
    let last = Layout::last_width(net);
    let mut values = Vec::with_capacity(layout.slice_len(last));
    let w0 = net.parameter("hidden0.weight")?;
    let start = layout.first_row(index) * layout.hidden;
    values.extend_from_slice(&w0.data()[start..start + layout.input_dim * layout.hidden]);
    let out = net.parameter("output.weight")?;
    let k = layout.output_dim;
    for r in 0..last {
        values.extend_from_slice(&out.row(r)[index * k..(index + 1) * k]);
    }
    values.extend_from_slice(&net.parameter("output.bias")?.data()[index * k..(index + 1) * k]);
    Ok(SubnetworkSlice { index, values })
}

/// Copy of `net` with subnetwork `index`'s exclusive parameters replaced by
/// `slice.values`; the body and every other subnetwork are untouched.
pub fn install_slice(net: &Network, index: usize, slice: &SubnetworkSlice) -> Result<Network> {
    let layout = Layout::of(net)?;
    layout.check(index)?;
    let last = Layout::last_width(net);
    let expected = layout.slice_len(last);
    if slice.values.len() != expected {
        return Err(LandscapeError::SliceLength {
            expected,
            got: slice.values.len(),
        });
    }
    let mut out_net = net.clone();
    let (first, rest) = slice.values.split_at(layout.input_dim * layout.hidden);
    let start = layout.first_row(index) * layout.hidden;
    out_net.parameter_mut("hidden0.weight")?.data_mut()[start..start + first.len()].copy_from_slice(first);
    let k = layout.output_dim;
    let (head, bias) = rest.split_at(last * k);
    let w = out_net.parameter_mut("output.weight")?;
    let cols = w.cols();
    for r in 0..last {
        w.data_mut()[r * cols + index * k..r * cols + (index + 1) * k].copy_from_slice(&head[r * k..(r + 1) * k]);
    }
    out_net.parameter_mut("output.bias")?.data_mut()[index * k..(index + 1) * k].copy_from_slice(bias);
    Ok(out_net)
}

/// Head `index`'s predictions with `x` in its own input slot and zeros in
/// every other slot.
pub fn subnetwork_predictions(net: &Network, index: usize, x: &Tensor) -> Result<Tensor> {
    let layout = Layout::of(net)?;
    layout.check(index)?;
    let inputs: Vec<Tensor> = (0..net.input_slots())
        .map(|slot| {
            if slot == index || net.input_slots() == 1 {
                x.clone()
            } else {
                Tensor::zeros(x.shape())
            }
        })
        .collect();
    Ok(net.forward_mimo(&inputs)?.swap_remove(index))
}

/// Isolated prediction of an arbitrary slice, installed in subnetwork 0's place.
pub fn slice_predictions(net: &Network, slice: &SubnetworkSlice, x: &Tensor) -> Result<Tensor> {
    let installed = install_slice(net, 0, slice)?;
    subnetwork_predictions(&installed, 0, x)
}

fn accuracy(probs: &Tensor, classes: &[usize]) -> f64 {
    let hits = classes.iter().enumerate().filter(|(r, &y)| argmax(probs.row(*r)) == y).count();
    hits as f64 / classes.len() as f64
}

fn nll(probs: &Tensor, classes: &[usize]) -> f64 {
    classes
        .iter()
        .enumerate()
        .map(|(r, &y)| -probs.row(r)[y].max(PROBABILITY_FLOOR).ln())
        .sum::<f64>()
        / classes.len() as f64
}

fn disagreement_rate(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.rows();
    (0..n).filter(|&r| argmax(a.row(r)) != argmax(b.row(r))).count() as f64 / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlaneOptions {
    pub resolution: usize,
    pub margin: f64,
    pub max_examples: usize,
}

impl Default for PlaneOptions {
    fn default() -> Self {
        PlaneOptions {
            resolution: DEFAULT_RESOLUTION,
            margin: DEFAULT_MARGIN,
            max_examples: DEFAULT_MAX_EXAMPLES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub u: f64,
    pub v: f64,
    pub accuracy: f64,
    pub nll: f64,
    /// Disagreement with each trained subnetwork.
    pub disagreement: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub resolution: usize,
    pub examples: usize,
    /// Cells evaluated exactly at each trained subnetwork's coordinates.
    pub anchors: Vec<GridCell>,
    /// Isolated test accuracy of each trained subnetwork.
    pub subnetwork_accuracy: Vec<f64>,
    /// Disagreement between the trained subnetworks, symmetric.
    pub subnetwork_disagreement: Vec<Vec<f64>>,
    /// Distance from the zero slice to the plane.
    pub origin_distance: f64,
    /// `resolution x resolution` cells, `v` outermost.
    pub cells: Vec<GridCell>,
}

impl GridReport {
    pub fn max_subnetwork_disagreement(&self) -> f64 {
        self.subnetwork_disagreement
            .iter()
            .flatten()
            .copied()
            .fold(0.0, f64::max)
    }

    fn write_cells<'a>(&self, out: impl Write, label: &str, cells: impl Iterator<Item = (String, &'a GridCell)>) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![label.to_string(), "u".into(), "v".into(), "accuracy".into(), "nll".into()];
        header.extend((0..self.subnetwork_accuracy.len()).map(|m| format!("disagreement_{m}")));
        w.write_record(&header)?;
        for (key, c) in cells {
            let mut rec = vec![key, c.u.to_string(), c.v.to_string(), c.accuracy.to_string(), c.nll.to_string()];
            rec.extend(c.disagreement.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Columns `cell,u,v,accuracy,nll,disagreement_0..`, one row per grid cell.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        self.write_cells(out, "cell", self.cells.iter().enumerate().map(|(i, c)| (i.to_string(), c)))
    }

    /// Anchor cells in the columns of [`Self::write_csv`], keyed by subnetwork.
    pub fn write_anchor_csv(&self, out: impl Write) -> Result<()> {
        self.write_cells(out, "subnetwork", self.anchors.iter().enumerate().map(|(m, c)| (m.to_string(), c)))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(out: &mut [f64], alpha: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// Evaluates the plane through the slices of subnetworks 0, 1 and 2 on a
/// grid covering their bounding box widened by `margin` of its extent.
pub fn plane_section(net: &Network, dataset: &Dataset, options: &PlaneOptions) -> Result<GridReport> {
    let layout = Layout::of(net)?;
    if layout.heads != 3 {
        return Err(LandscapeError::Unsupported(format!(
            "a plane section needs exactly 3 subnetworks, network has {}",
            layout.heads
        )));
    }
    if net.task() != Task::Classification {
        return Err(LandscapeError::Unsupported("plane sections need a classification task".into()));
    }
    if options.resolution < 2 || !(options.margin >= 0.0) || options.max_examples == 0 {
        return Err(LandscapeError::InvalidArgument(
            "resolution must be at least 2, margin non-negative and max_examples positive".into(),
        ));
    }
    let data = dataset.head(options.max_examples);
    if data.is_empty() {
        return Err(LandscapeError::InvalidArgument("empty evaluation set".into()));
    }
    let x = data.features();
    let classes: Vec<usize> = (0..data.len()).map(|i| data.class_of(i)).collect();

    let slices: Vec<SubnetworkSlice> = (0..3).map(|m| extract_slice(net, m)).collect::<Result<_>>()?;
    let origin = &slices[0].values;
    let mut e1: Vec<f64> = slices[1].values.iter().zip(origin).map(|(b, a)| b - a).collect();
    let len_u = norm(&e1);
    if len_u < DEGENERATE_NORM {
        return Err(LandscapeError::Degenerate("subnetworks 0 and 1 coincide".into()));
    }
    e1.iter_mut().for_each(|v| *v /= len_u);
    let w: Vec<f64> = slices[2].values.iter().zip(origin).map(|(c, a)| c - a).collect();
    let c1 = dot(&w, &e1);
    let mut e2 = w.clone();
    axpy(&mut e2, -c1, &e1);
    let c2 = norm(&e2);
    if c2 < DEGENERATE_NORM {
        return Err(LandscapeError::Degenerate("the three subnetworks are collinear".into()));
    }
    e2.iter_mut().for_each(|v| *v /= c2);

    let point = |u: f64, v: f64| -> SubnetworkSlice {
        let mut values = origin.clone();
        axpy(&mut values, u, &e1);
        axpy(&mut values, v, &e2);
        SubnetworkSlice { index: 0, values }
    };

    let trained: Vec<Tensor> = (0..3).map(|m| subnetwork_predictions(net, m, x)).collect::<Result<_>>()?;
    let evaluate = |u: f64, v: f64, slice: &SubnetworkSlice| -> Result<GridCell> {
        let probs = slice_predictions(net, slice, x)?;
        Ok(GridCell {
            u,
            v,
            accuracy: accuracy(&probs, &classes),
            nll: nll(&probs, &classes),
            disagreement: trained.iter().map(|t| disagreement_rate(&probs, t)).collect(),
        })
    };

    let coords = [(0.0, 0.0), (len_u, 0.0), (c1, c2)];
    let anchors = coords
        .iter()
        .zip(&slices)
        .map(|(&(u, v), s)| evaluate(u, v, &SubnetworkSlice { index: 0, values: s.values.clone() }))
        .collect::<Result<Vec<_>>>()?;

    let span = |vals: [f64; 3]| {
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pad = options.margin * (hi - lo);
        (lo - pad, hi + pad)
    };
    let (u_lo, u_hi) = span([0.0, len_u, c1]);
    let (v_lo, v_hi) = span([0.0, 0.0, c2]);
    let r = options.resolution;
    let step = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (r - 1) as f64;
    let cells = (0..r * r)
        .into_par_iter()
        .map(|idx| {
            let (u, v) = (step(u_lo, u_hi, idx % r), step(v_lo, v_hi, idx / r));
            evaluate(u, v, &point(u, v))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut subnetwork_disagreement = vec![vec![0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                subnetwork_disagreement[i][j] = disagreement_rate(&trained[i], &trained[j]);
            }
        }
    }
    // distance from the zero vector to the affine plane through the slices
    let mut residual: Vec<f64> = origin.iter().map(|v| -v).collect();
    let (p1, p2) = (dot(&residual, &e1), dot(&residual, &e2));
    axpy(&mut residual, -p1, &e1);
    axpy(&mut residual, -p2, &e2);

    Ok(GridReport {
        resolution: r,
        examples: data.len(),
        anchors,
        subnetwork_accuracy: trained.iter().map(|t| accuracy(t, &classes)).collect(),
        subnetwork_disagreement,
        origin_distance: norm(&residual),
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub step: usize,
    pub head: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub points: Vec<ProjectedPoint>,
    /// Variance captured by each of the two components.
    pub component_variance: [f64; 2],
}

impl Projection {
    /// Points of one head in snapshot order.
    pub fn trajectory(&self, head: usize) -> Vec<&ProjectedPoint> {
        self.points.iter().filter(|p| p.head == head).collect()
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "head", "pc1", "pc2"])?;
        for p in &self.points {
            w.write_record([p.step.to_string(), p.head.to_string(), p.x.to_string(), p.y.to_string()])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Leading eigenvector of the symmetric matrix `g` (row-major `n x n`)
/// orthogonal to `found`, by power iteration.
fn power_iteration(g: &[f64], n: usize, found: &[Vec<f64>]) -> (Vec<f64>, f64) {
    let deflate = |v: &mut Vec<f64>| {
        for f in found {
            let p = dot(v, f);
            axpy(v, -p, f);
        }
    };
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 0.618_033_988_75).fract()).collect();
    deflate(&mut v);
    let mut len = norm(&v);
    if len == 0.0 {
        return (v, 0.0);
    }
    v.iter_mut().for_each(|x| *x /= len);
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITERATIONS {
        let mut next: Vec<f64> = (0..n).map(|i| dot(&g[i * n..(i + 1) * n], &v)).collect();
        deflate(&mut next);
        len = norm(&next);
        if len == 0.0 {
            return (v, 0.0);
        }
        next.iter_mut().for_each(|x| *x /= len);
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        lambda = len;
        if delta < POWER_TOLERANCE {
            break;
        }
    }
    (v, lambda)
}

/// Projects every `(snapshot, head)` prediction matrix onto the top two
/// principal components of the centered set of such matrices.
pub fn project_trajectories(log: &TrajectoryLog) -> Result<Projection> {
    let mut labels = Vec::new();
    let mut rows: Vec<&[f64]> = Vec::new();
    for s in &log.snapshots {
        for (h, pred) in s.heads.iter().enumerate() {
            labels.push((s.step, h));
            rows.push(pred);
        }
    }
    let distinct = rows.iter().skip(1).any(|r| *r != rows[0]);
    if rows.is_empty() || !distinct {
        return Err(LandscapeError::InvalidArgument(
            "projection needs at least 2 distinct snapshots".into(),
        ));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(LandscapeError::InvalidArgument("snapshots differ in size".into()));
    }
    let n = rows.len();
    let mut mean = vec![0.0; d];
    for r in &rows {
        axpy(&mut mean, 1.0 / n as f64, r);
    }
    let centered: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&mean).map(|(a, m)| a - m).collect()).collect();
    // Gram matrix shares the covariance's nonzero spectrum and is n x n
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = dot(&centered[i], &centered[j]);
            gram[i * n + j] = v;
            gram[j * n + i] = v;
        }
    }
    let mut found: Vec<Vec<f64>> = Vec::new();
    let mut axes: Vec<Vec<f64>> = Vec::new();
    let mut coords = vec![[0.0; 2]; n];
    let mut component_variance = [0.0; 2];
    for k in 0..2 {
        let (w, lambda) = power_iteration(&gram, n, &found);
        if lambda <= 0.0 {
            break;
        }
        // principal axis X^T w, re-orthonormalized so the map is an exact orthogonal projection
        let mut axis = vec![0.0; d];
        for (row, wi) in centered.iter().zip(&w) {
            axpy(&mut axis, *wi, row);
        }
        for a in &axes {
            let p = dot(&axis, a);
            axpy(&mut axis, -p, a);
        }
        let len = norm(&axis);
        if len < DEGENERATE_NORM {
            break;
        }
        axis.iter_mut().for_each(|v| *v /= len);
        if let Some(big) = axis.iter().copied().reduce(|a, b| if b.abs() > a.abs() { b } else { a }) {
            if big < 0.0 {
                axis.iter_mut().for_each(|v| *v = -*v);
            }
        }
        for (c, row) in coords.iter_mut().zip(&centered) {
            c[k] = dot(row, &axis);
        }
        component_variance[k] = coords.iter().map(|c| c[k] * c[k]).sum::<f64>() / n as f64;
        found.push(w);
        axes.push(axis);
    }
    Ok(Projection {
        points: labels
            .into_iter()
            .zip(coords)
            .map(|((step, head), [x, y])| ProjectedPoint { step, head, x, y })
            .collect(),
        component_variance,
    })
}
