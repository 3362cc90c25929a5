//! Scatter tokens back onto the BEV grid and fill holes with two 3x3
//! convolutions.
//!
//! Convolutions run channels-last: each band of output rows gathers its 3x3
//! neighbourhoods into an im2col matrix and multiplies it with the reshaped
//! kernel. Band height depends only on the grid width, so the arithmetic is
//! the same for any worker count.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, Axis};
use rayon::prelude::*;

use crate::complexity::FlopLedger;
use crate::error::{arg_err, config_err, integrity_err, Result};
use crate::real::Real;
use crate::rng::XorShift64Star;
use crate::voxelizer::{Cell, GridConfig, TokenSet};

/// Output pixels per im2col band.
const BAND_PIXELS: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMap<T> {
    /// (C, ny, nx)
    pub data: Array3<T>,
}

impl<T: Real> DenseMap<T> {
    pub fn zeros(channels: usize, ny: usize, nx: usize) -> Self {
        Self { data: Array3::zeros((channels, ny, nx)) }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn ny(&self) -> usize {
        self.data.dim().1
    }

    pub fn nx(&self) -> usize {
        self.data.dim().2
    }

    /// (ny * nx, C), row-major over (iy, ix).
    pub fn to_channels_last(&self) -> Array2<T> {
        let (c, ny, nx) = self.data.dim();
        let hwc = self.data.view().permuted_axes([1, 2, 0]);
        hwc.as_standard_layout().into_owned().into_shape_with_order((ny * nx, c)).unwrap()
    }

    pub fn from_channels_last(hwc: Array2<T>, ny: usize, nx: usize) -> Self {
        let c = hwc.ncols();
        let data = hwc.into_shape_with_order((ny, nx, c)).unwrap().permuted_axes([2, 0, 1]);
        Self { data: data.as_standard_layout().into_owned() }
    }
}

pub fn scatter_to_dense<T: Real>(tokens: &TokenSet<T>, grid: &GridConfig) -> Result<DenseMap<T>> {
    tokens.check_bounds(grid)?;
    let (nx, ny) = (grid.nx(), grid.ny());
    let mut map = DenseMap::zeros(tokens.channels(), ny, nx);
    let mut seen = vec![false; nx * ny];
    for (row, cell) in tokens.features.rows().into_iter().zip(&tokens.coords) {
        let flat = cell.iy as usize * nx + cell.ix as usize;
        if std::mem::replace(&mut seen[flat], true) {
            return Err(integrity_err!("duplicate token coordinate {cell:?}"));
        }
        map.data.slice_mut(s![.., cell.iy as usize, cell.ix as usize]).assign(&row);
    }
    Ok(map)
}

pub fn gather_from_dense<T: Real>(map: &DenseMap<T>, coords: &[Cell]) -> Result<Array2<T>> {
    let mut out = Array2::zeros((coords.len(), map.channels()));
    for (mut row, cell) in out.rows_mut().into_iter().zip(coords) {
        if cell.ix as usize >= map.nx() || cell.iy as usize >= map.ny() {
            return Err(arg_err!("cell {cell:?} outside the {} x {} map", map.nx(), map.ny()));
        }
        row.assign(&map.data.slice(s![.., cell.iy as usize, cell.ix as usize]));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    /// (C_out, C_in, 3, 3)
    pub w1: Array4<T>,
    pub b1: Array1<T>,
    pub w2: Array4<T>,
    pub b2: Array1<T>,
}

impl<T: Real> ConvParams<T> {
    pub fn zeros(channels: usize) -> Self {
        Self {
            w1: Array4::zeros((channels, channels, 3, 3)),
            b1: Array1::zeros(channels),
            w2: Array4::zeros((channels, channels, 3, 3)),
            b2: Array1::zeros(channels),
        }
    }

    /// Centre tap one on the diagonal: each conv passes its input through.
    pub fn identity(channels: usize) -> Self {
        let mut p = Self::zeros(channels);
        for c in 0..channels {
            p.w1[[c, c, 1, 1]] = T::one();
            p.w2[[c, c, 1, 1]] = T::one();
        }
        p
    }

    /// He-uniform kernels, small biases.
    pub fn random(channels: usize, rng: &mut XorShift64Star) -> Self {
        let a = (6.0 / (9 * channels) as f64).sqrt();
        let mut p = Self::zeros(channels);
        for w in [&mut p.w1, &mut p.w2] {
            w.mapv_inplace(|_| T::of(rng.uniform(-a, a)));
        }
        for b in [&mut p.b1, &mut p.b2] {
            b.mapv_inplace(|_| T::of(rng.uniform(-0.01, 0.01)));
        }
        p
    }

    pub fn channels(&self) -> usize {
        self.w1.dim().0
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        let kernel = (c, c, 3, 3);
        if self.w1.dim() != kernel || self.w2.dim() != kernel || self.b1.len() != c || self.b2.len() != c {
            return Err(config_err!("conv parameters inconsistent with {c} channels"));
        }
        Ok(())
    }
}

/// One 3x3, stride 1, zero-padded convolution on a channels-last map.
fn conv3x3<T: Real>(input: ArrayView2<'_, T>, ny: usize, nx: usize, w: &Array4<T>, b: &Array1<T>) -> Array2<T> {
    let (cout, cin, _, _) = w.dim();
    let wmat = w
        .view()
        .permuted_axes([2, 3, 1, 0])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((9 * cin, cout))
        .unwrap();
    let input = input.as_standard_layout();
    let src = input.as_slice().unwrap();
    let band_rows = (BAND_PIXELS / nx.max(1)).max(1);
    let mut out = Array2::<T>::zeros((ny * nx, cout));
    if out.is_empty() {
        return out;
    }
    out.axis_chunks_iter_mut(Axis(0), band_rows * nx).into_par_iter().enumerate().for_each(|(band, mut chunk)| {
        let y0 = band * band_rows;
        let pixels = chunk.nrows();
        let mut cols = Array2::<T>::zeros((pixels, 9 * cin));
        let dst = cols.as_slice_mut().unwrap();
        for p in 0..pixels {
            let (y, x) = (y0 + p / nx, p % nx);
            for ky in 0..3 {
                let Some(sy) = (y + ky).checked_sub(1).filter(|&v| v < ny) else { continue };
                for kx in 0..3 {
                    let Some(sx) = (x + kx).checked_sub(1).filter(|&v| v < nx) else { continue };
                    let from = (sy * nx + sx) * cin;
                    let to = p * 9 * cin + (ky * 3 + kx) * cin;
                    dst[to..to + cin].copy_from_slice(&src[from..from + cin]);
                }
            }
        }
        ndarray::linalg::general_mat_mul(T::one(), &cols, &wmat, T::zero(), &mut chunk);
        chunk += b;
    });
    out
}

/// conv → ReLU → conv; spatial size unchanged.
pub fn conv2d<T: Real>(
    map: &DenseMap<T>,
    params: &ConvParams<T>,
    ledger: Option<&mut FlopLedger>,
) -> Result<DenseMap<T>> {
    params.validate()?;
    let (c, ny, nx) = map.data.dim();
    if c != params.channels() {
        return Err(config_err!("map has {c} channels, conv expects {}", params.channels()));
    }
    let x = map.to_channels_last();
    let mut h = conv3x3(x.view(), ny, nx, &params.w1, &params.b1);
    crate::linalg::relu_inplace(&mut h);
    let y = conv3x3(h.view(), ny, nx, &params.w2, &params.b2);
    if let Some(l) = ledger {
        l.dense_conv += 2 * (nx * ny * 9 * c * c) as u64;
    }
    Ok(DenseMap::from_channels_last(y, ny, nx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::random_tokens;

    fn direct_conv(x: &Array3<f64>, w: &Array4<f64>, b: &Array1<f64>) -> Array3<f64> {
        let (cin, ny, nx) = x.dim();
        let cout = w.dim().0;
        let mut out = Array3::zeros((cout, ny, nx));
        for co in 0..cout {
            for y in 0..ny {
                for xx in 0..nx {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                if sy >= 0 && sx >= 0 && (sy as usize) < ny && (sx as usize) < nx {
                                    acc += w[[co, ci, ky, kx]] * x[[ci, sy as usize, sx as usize]];
                                }
                            }
                        }
                    }
                    out[[co, y, xx]] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn round_trip_and_sum() {
        let mut rng = XorShift64Star::new(1);
        let grid = GridConfig::square(16, 0.5);
        let tokens: TokenSet<f64> = random_tokens(&mut rng, 60, 16, 16, 5);
        let map = scatter_to_dense(&tokens, &grid).unwrap();
        assert_eq!(gather_from_dense(&map, &tokens.coords).unwrap(), tokens.features);
        assert!((map.data.sum() - tokens.features.sum()).abs() < 1e-12);
        let empty = TokenSet::<f64>::new(vec![], Array2::zeros((0, 5))).unwrap();
        assert!(scatter_to_dense(&empty, &grid).unwrap().data.iter().all(|v| *v == 0.0));
        assert!(gather_from_dense(&map, &[Cell::new(16, 0)]).is_err());
    }

    #[test]
    fn duplicate_coords_are_integrity_errors() {
        let grid = GridConfig::square(4, 1.0);
        let tokens = TokenSet { coords: vec![Cell::new(1, 1), Cell::new(1, 1)], features: Array2::<f64>::ones((2, 2)) };
        assert!(matches!(scatter_to_dense(&tokens, &grid), Err(crate::SstError::Integrity(_))));
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = XorShift64Star::new(2);
        // nx = 50 gives bands of 20 rows, so 45 rows exercise a ragged last band.
        let mut map = DenseMap::<f64>::zeros(4, 45, 50);
        map.data.mapv_inplace(|_| rng.uniform(-1.0, 1.0));
        let p = ConvParams::<f64>::random(4, &mut rng);
        let mut hidden = direct_conv(&map.data, &p.w1, &p.b1);
        hidden.mapv_inplace(|v| v.max(0.0));
        let expect = direct_conv(&hidden, &p.w2, &p.b2);
        let got = conv2d(&map, &p, None).unwrap();
        let err = (&got.data - &expect).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn identity_kernel_rectifies() {
        let mut rng = XorShift64Star::new(3);
        let mut map = DenseMap::<f64>::zeros(3, 7, 9);
        map.data.mapv_inplace(|_| rng.uniform(-1.0, 1.0));
        let got = conv2d(&map, &ConvParams::identity(3), None).unwrap();
        assert_eq!(got.data, map.data.mapv(|v| v.max(0.0)));
    }

    #[test]
    fn ones_kernel_fills_neighbourhood() {
        let mut map = DenseMap::<f64>::zeros(1, 9, 9);
        map.data[[0, 4, 4]] = 1.0;
        let mut p = ConvParams::<f64>::zeros(1);
        p.w1.fill(1.0);
        p.w2[[0, 0, 1, 1]] = 1.0;
        let got = conv2d(&map, &p, None).unwrap();
        for y in 0..9 {
            for x in 0..9 {
                let inside = (3..=5).contains(&y) && (3..=5).contains(&x);
                assert_eq!(got.data[[0, y, x]], if inside { 1.0 } else { 0.0 });
            }
        }
        // Both convs positive: Chebyshev radius two is reached.
        p.w2.fill(1.0);
        let got = conv2d(&map, &p, None).unwrap();
        for y in 0..9usize {
            for x in 0..9usize {
                let reach = y.abs_diff(4).max(x.abs_diff(4)) <= 2;
                assert_eq!(got.data[[0, y, x]] > 0.0, reach);
            }
        }
    }

    #[test]
    fn zero_kernels_give_bias_and_ledger_counts() {
        let mut p = ConvParams::<f64>::zeros(2);
        p.b2 = Array1::from(vec![0.5, -2.0]);
        let map = DenseMap::<f64>::zeros(2, 5, 6);
        let mut ledger = FlopLedger::default();
        let got = conv2d(&map, &p, Some(&mut ledger)).unwrap();
        assert!(got.data.slice(s![0, .., ..]).iter().all(|v| *v == 0.5));
        assert!(got.data.slice(s![1, .., ..]).iter().all(|v| *v == -2.0));
        assert_eq!(ledger.dense_conv, 2 * 5 * 6 * 9 * 4);
    }

    #[test]
    fn worker_count_does_not_change_bits() {
        let mut rng = XorShift64Star::new(4);
        let mut map = DenseMap::<f32>::zeros(8, 70, 40);
        map.data.mapv_inplace(|_| rng.uniform(-1.0, 1.0) as f32);
        let p = ConvParams::<f32>::random(8, &mut rng);
        let run = |n| {
            rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap().install(|| conv2d(&map, &p, None).unwrap())
        };
        assert_eq!(run(1), run(4));
    }
}
