//! Point↔pillar index maps, pillar aggregation and pillar-to-point gathers.
//!
//! A [`PillarGrid`] holds both directions of the point/pillar relation: the
//! per-point pillar index and, per pillar, the sorted list of member points
//! (stored CSR-style). Features flow point → pillar through [`aggregate`] and
//! back through [`gather_nearest`] or [`gather_bilinear`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Point3;
use crate::views::ViewSpec;

/// Dense `n × k` per-point feature matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFeatures {
    n: usize,
    k: usize,
    data: Vec<f64>,
}

impl PointFeatures {
    pub fn zeros(n: usize, k: usize) -> Self {
        Self {
            n,
            k,
            data: vec![0.0; n * k],
        }
    }

    pub fn from_vec(n: usize, k: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * k {
            return Err(Error::mismatch(n * k, data.len()));
        }
        Ok(Self { n, k, data })
    }

    /// `(x, y, z)` per point.
    pub fn from_points(points: &[Point3]) -> Self {
        let data = points.iter().flat_map(|p| p.to_array()).collect();
        Self {
            n: points.len(),
            k: 3,
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn channels(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.k..(i + 1) * self.k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Concatenates per-point features channel-wise, in the given order.
pub fn concat_point_features(parts: &[PointFeatures]) -> Result<PointFeatures> {
    let Some(first) = parts.first() else {
        return Ok(PointFeatures::zeros(0, 0));
    };
    let n = first.n;
    if let Some(bad) = parts.iter().find(|p| p.n != n) {
        return Err(Error::mismatch(
            format!("{n} points"),
            format!("{} points", bad.n),
        ));
    }
    let k: usize = parts.iter().map(|p| p.k).sum();
    let mut data = Vec::with_capacity(n * k);
    for i in 0..n {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Ok(PointFeatures { n, k, data })
}

/// Per-point affine transform `f ↦ f·W + b` applied before aggregation, for
/// replaying externally trained point featurizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointAffine {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `in_dim × out_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl PointAffine {
    pub fn apply(&self, features: &PointFeatures) -> Result<PointFeatures> {
        if self.weights.len() != self.in_dim * self.out_dim || self.bias.len() != self.out_dim {
            return Err(Error::mismatch(
                format!(
                    "{}x{} weights and {} bias",
                    self.in_dim, self.out_dim, self.out_dim
                ),
                format!(
                    "{} weights and {} bias",
                    self.weights.len(),
                    self.bias.len()
                ),
            ));
        }
        if features.k != self.in_dim {
            return Err(Error::mismatch(
                format!("{} input channels", self.in_dim),
                features.k,
            ));
        }
        let mut out = PointFeatures::zeros(features.n, self.out_dim);
        out.data
            .par_chunks_mut(self.out_dim.max(1))
            .zip(features.data.par_chunks(self.in_dim.max(1)))
            .for_each(|(dst, src)| {
                dst.copy_from_slice(&self.bias);
                for (i, &x) in src.iter().enumerate() {
                    let w = &self.weights[i * self.out_dim..(i + 1) * self.out_dim];
                    for (d, &wij) in dst.iter_mut().zip(w) {
                        *d += x * wij;
                    }
                }
            });
        Ok(out)
    }
}

/// Dense `h × w × c` feature grid, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarFeatureMap {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

const MAP_HEADER_LEN: usize = 12;

impl PillarFeatureMap {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::mismatch(h * w * c, data.len()));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn filled(h: usize, w: usize, values: &[f64]) -> Self {
        let data = values
            .iter()
            .copied()
            .cycle()
            .take(h * w * values.len())
            .collect();
        Self {
            h,
            w,
            c: values.len(),
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn pillar(&self, flat: usize) -> &[f64] {
        &self.data[flat * self.c..(flat + 1) * self.c]
    }

    pub fn pillar_mut(&mut self, flat: usize) -> &mut [f64] {
        &mut self.data[flat * self.c..(flat + 1) * self.c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn check_spec(&self, spec: &ViewSpec) -> Result<()> {
        if [self.h, self.w] != spec.bins {
            return Err(Error::mismatch(
                format!("{}x{} map", spec.bins[0], spec.bins[1]),
                format!("{}x{} map", self.h, self.w),
            ));
        }
        Ok(())
    }

    /// Writes the map as a 12-byte header (`h`, `w`, `c` as u32 LE) followed
    /// by row-major f32 LE values. Values are narrowed to 32 bits.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        for dim in [self.h, self.w, self.c] {
            let dim = u32::try_from(dim)
                .map_err(|_| Error::InvalidSpec(format!("dimension {dim} exceeds u32")))?;
            out.write_all(&dim.to_le_bytes())?;
        }
        for &v in &self.data {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R, origin: &Path) -> Result<Self> {
        let mut header = [0u8; MAP_HEADER_LEN];
        input
            .read_exact(&mut header)
            .map_err(|_| Error::malformed(origin, "truncated feature-map header"))?;
        let dim =
            |i: usize| u32::from_le_bytes(header[4 * i..4 * i + 4].try_into().unwrap()) as usize;
        let (h, w, c) = (dim(0), dim(1), dim(2));
        let count = h
            .checked_mul(w)
            .and_then(|hw| hw.checked_mul(c))
            .ok_or_else(|| Error::malformed(origin, "feature-map dimensions overflow"))?;
        let mut payload = Vec::new();
        input.read_to_end(&mut payload)?;
        if payload.len() != count * 4 {
            return Err(Error::malformed(
                origin,
                format!(
                    "expected {} payload bytes for {h}x{w}x{c}, found {}",
                    count * 4,
                    payload.len()
                ),
            ));
        }
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Ok(Self { h, w, c, data })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?), path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reducer {
    #[default]
    Max,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PillarGrid {
    spec: ViewSpec,
    point_to_pillar: Vec<Option<usize>>,
    offsets: Vec<usize>,
    members: Vec<usize>,
}

impl PillarGrid {
    pub fn spec(&self) -> &ViewSpec {
        &self.spec
    }

    pub fn n_points(&self) -> usize {
        self.point_to_pillar.len()
    }

    pub fn num_pillars(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Pillar index of point `i`, if it is in range.
    pub fn pillar_of(&self, i: usize) -> Option<usize> {
        self.point_to_pillar[i]
    }

    pub fn point_to_pillar(&self) -> &[Option<usize>] {
        &self.point_to_pillar
    }

    /// Points of pillar `j`, ascending.
    pub fn points_in(&self, j: usize) -> &[usize] {
        &self.members[self.offsets[j]..self.offsets[j + 1]]
    }

    pub fn num_in_range(&self) -> usize {
        self.members.len()
    }

    pub fn occupied_pillars(&self) -> usize {
        self.offsets.windows(2).filter(|w| w[1] > w[0]).count()
    }
}

pub fn build_grid(points: &[Point3], spec: &ViewSpec) -> Result<PillarGrid> {
    spec.validate()?;
    let point_to_pillar: Vec<Option<usize>> = points
        .par_iter()
        .map(|p| spec.bin_of_point(p).map(|(r, c)| spec.flat_index(r, c)))
        .collect();

    let n_pillars = spec.num_bins();
    let mut offsets = vec![0usize; n_pillars + 1];
    for j in point_to_pillar.iter().flatten() {
        offsets[j + 1] += 1;
    }
    for j in 0..n_pillars {
        offsets[j + 1] += offsets[j];
    }
    let mut cursor = offsets.clone();
    let mut members = vec![0usize; offsets[n_pillars]];
    for (i, j) in point_to_pillar.iter().enumerate() {
        if let Some(j) = *j {
            members[cursor[j]] = i;
            cursor[j] += 1;
        }
    }
    Ok(PillarGrid {
        spec: *spec,
        point_to_pillar,
        offsets,
        members,
    })
}

/// Symmetric per-pillar reduction of point features; empty pillars are 0.
pub fn aggregate(
    features: &PointFeatures,
    grid: &PillarGrid,
    reducer: Reducer,
) -> Result<PillarFeatureMap> {
    if features.n != grid.n_points() {
        return Err(Error::mismatch(
            format!("{} point rows", grid.n_points()),
            features.n,
        ));
    }
    let [h, w] = grid.spec.bins;
    let k = features.k;
    let mut map = PillarFeatureMap::zeros(h, w, k);
    if k == 0 {
        return Ok(map);
    }
    map.data.par_chunks_mut(k).enumerate().for_each(|(j, out)| {
        let members = grid.points_in(j);
        let Some((&first, rest)) = members.split_first() else {
            return;
        };
        out.copy_from_slice(features.row(first));
        match reducer {
            Reducer::Max => {
                for &i in rest {
                    for (o, &v) in out.iter_mut().zip(features.row(i)) {
                        *o = o.max(v);
                    }
                }
            }
            Reducer::Mean => {
                for &i in rest {
                    for (o, &v) in out.iter_mut().zip(features.row(i)) {
                        *o += v;
                    }
                }
                let inv = members.len() as f64;
                out.iter_mut().for_each(|o| *o /= inv);
            }
        }
    });
    Ok(map)
}

/// Each point receives its own pillar's features; out-of-range points get 0.
pub fn gather_nearest(map: &PillarFeatureMap, grid: &PillarGrid) -> Result<PointFeatures> {
    map.check_spec(&grid.spec)?;
    let c = map.c;
    let mut out = PointFeatures::zeros(grid.n_points(), c);
    if c == 0 {
        return Ok(out);
    }
    out.data
        .par_chunks_mut(c)
        .zip(grid.point_to_pillar.par_iter())
        .for_each(|(dst, j)| {
            if let Some(j) = *j {
                dst.copy_from_slice(map.pillar(j));
            }
        });
    Ok(out)
}

// Grid coordinates closer than this to an integer snap onto it, so queries
// at bin centers hit exactly one bin.
const CENTER_SNAP: f64 = 1e-9;

/// Bilinear stencil of a query: the four clamped neighbor bins and the
/// fractional offsets `(fr, fc)` along rows and columns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearTaps {
    /// Flat indices of `(r0,c0), (r0,c1), (r1,c0), (r1,c1)`.
    pub bins: [usize; 4],
    pub fr: f64,
    pub fc: f64,
}

impl BilinearTaps {
    pub fn weights(&self) -> [f64; 4] {
        let (fr, fc) = (self.fr, self.fc);
        [
            (1.0 - fr) * (1.0 - fc),
            (1.0 - fr) * fc,
            fr * (1.0 - fc),
            fr * fc,
        ]
    }
}

fn axis_taps(x: f64, min: f64, span: f64, n: usize) -> (usize, usize, f64) {
    let mut g = (x - min) / span * n as f64 - 0.5;
    let nearest = g.round();
    if (g - nearest).abs() < CENTER_SNAP {
        g = nearest;
    }
    let lo = g.floor();
    let frac = g - lo;
    let last = (n - 1) as f64;
    let i0 = lo.clamp(0.0, last) as usize;
    let i1 = (lo + 1.0).clamp(0.0, last) as usize;
    (i0, i1, frac)
}

/// Bilinear stencil of `p` in `spec`, or `None` when `p` is out of range.
pub fn bilinear_taps(p: &Point3, spec: &ViewSpec) -> Option<BilinearTaps> {
    let c = spec.view_coord(p)?;
    if !spec.axis0.contains(c.u) || !spec.axis1.contains(c.v) {
        return None;
    }
    let [h, w] = spec.bins;
    let (r0, r1, fr) = axis_taps(c.u, spec.axis0.min, spec.axis0.span(), h);
    let (c0, c1, fc) = axis_taps(c.v, spec.axis1.min, spec.axis1.span(), w);
    Some(BilinearTaps {
        bins: [r0 * w + c0, r0 * w + c1, r1 * w + c0, r1 * w + c1],
        fr,
        fc,
    })
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + t * (b - a)
    }
}

/// Bilinear pillar-to-point projection with border replication.
///
/// Evaluated as nested lerps: constant maps come back exactly and a query on
/// a bin center returns that bin's features bit-for-bit.
pub fn gather_bilinear(
    map: &PillarFeatureMap,
    points: &[Point3],
    spec: &ViewSpec,
) -> Result<PointFeatures> {
    map.check_spec(spec)?;
    let c = map.c;
    let mut out = PointFeatures::zeros(points.len(), c);
    if c == 0 {
        return Ok(out);
    }
    out.data
        .par_chunks_mut(c)
        .zip(points.par_iter())
        .for_each(|(dst, p)| {
            let Some(t) = bilinear_taps(p, spec) else {
                return;
            };
            let [a, b, cc, d] = t.bins.map(|j| map.pillar(j));
            for k in 0..dst.len() {
                let top = lerp(a[k], b[k], t.fc);
                let bottom = lerp(cc[k], d[k], t.fc);
                dst[k] = lerp(top, bottom, t.fr);
            }
        });
    Ok(out)
}

/// Adjoint of [`gather_bilinear`] with respect to the map: scatter-adds each
/// upstream row into its four neighbor bins with the bilinear weights.
pub fn gather_bilinear_backward(
    shape: (usize, usize, usize),
    points: &[Point3],
    spec: &ViewSpec,
    upstream: &PointFeatures,
) -> Result<PillarFeatureMap> {
    let (h, w, c) = shape;
    if [h, w] != spec.bins {
        return Err(Error::mismatch(
            format!("{}x{} map", spec.bins[0], spec.bins[1]),
            format!("{h}x{w} map"),
        ));
    }
    if upstream.n != points.len() || upstream.k != c {
        return Err(Error::mismatch(
            format!("{}x{c} upstream", points.len()),
            format!("{}x{}", upstream.n, upstream.k),
        ));
    }
    let mut grad = PillarFeatureMap::zeros(h, w, c);
    // Sequential scatter keeps the accumulation order fixed.
    for (i, p) in points.iter().enumerate() {
        let Some(t) = bilinear_taps(p, spec) else {
            continue;
        };
        let up = upstream.row(i);
        for (&j, wt) in t.bins.iter().zip(t.weights()) {
            if wt == 0.0 {
                continue;
            }
            for (g, &u) in grad.pillar_mut(j).iter_mut().zip(up) {
                *g += wt * u;
            }
        }
    }
    Ok(grad)
}

/// Pillar-to-point interpolation scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    #[default]
    Nearest,
    Bilinear,
}

/// Projects `map` back onto the grid's points with the chosen scheme.
pub fn gather(
    map: &PillarFeatureMap,
    grid: &PillarGrid,
    points: &[Point3],
    interp: Interp,
) -> Result<PointFeatures> {
    if points.len() != grid.n_points() {
        return Err(Error::mismatch(
            format!("{} points", grid.n_points()),
            points.len(),
        ));
    }
    match interp {
        Interp::Nearest => gather_nearest(map, grid),
        Interp::Bilinear => gather_bilinear(map, points, grid.spec()),
    }
}
