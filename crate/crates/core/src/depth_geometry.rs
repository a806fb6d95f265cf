//! Depth maps, Sobel gradients, pinhole projection and flying-pixel scoring.

use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};

/// Dense per-pixel depth in meters with a validity mask.
///
/// Values at invalid pixels are kept verbatim (they may be 0 or NaN) so that
/// file round trips are lossless; every reduction in this crate skips them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// Builds a map whose mask marks every finite, strictly positive value as valid.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        check_len(width, height, values.len())?;
        let valid = values.iter().map(|v| v.is_finite() && *v > 0.0).collect();
        Ok(Self {
            width,
            height,
            values,
            valid,
        })
    }

    pub fn with_mask(width: usize, height: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        check_len(width, height, values.len())?;
        check_len(width, height, valid.len())?;
        for (i, (&v, &ok)) in values.iter().zip(&valid).enumerate() {
            if ok && !(v.is_finite() && v > 0.0) {
                if !v.is_finite() {
                    return Err(Error::NonFinite("depth map"));
                }
                return Err(Error::NonPositiveDepth {
                    u: i % width,
                    v: i / width,
                    value: v,
                });
            }
        }
        Ok(Self {
            width,
            height,
            values,
            valid,
        })
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Result<Self> {
        Self::from_values(width, height, vec![depth; width * height])
    }

    /// Builds a map from a closure of pixel coordinates `(u, v)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let values = (0..height)
            .flat_map(|v| (0..width).map(move |u| (u, v)))
            .map(|(u, v)| f(u, v))
            .collect();
        Self::from_values(width, height, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.values[v * self.width + u]
    }

    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.valid[v * self.width + u]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }

    /// Applies `f` to every value, then recomputes nothing: the mask is kept.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = self.values.iter().map(|&v| f(v)).collect();
        Self::with_mask(self.width, self.height, values, self.valid.clone())
    }

    /// Same dimensions, new values, this map's mask.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::with_mask(self.width, self.height, values, self.valid.clone())
    }

    pub fn same_dims(&self, other: &DepthMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn ensure_same_dims(&self, other: &DepthMap) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }
}

fn check_len(width: usize, height: usize, len: usize) -> Result<()> {
    if width * height != len {
        return Err(Error::ShapeMismatch(format!(
            "{width}x{height} map with {len} entries"
        )));
    }
    Ok(())
}

/// Per-pixel Sobel responses, in depth units per pixel step.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub width: usize,
    pub height: usize,
    pub gx: Vec<f64>,
    pub gy: Vec<f64>,
}

impl GradientField {
    /// `|gx| + |gy|` per pixel.
    pub fn magnitude(&self) -> Vec<f64> {
        self.gx.iter().zip(&self.gy).map(|(x, y)| x.abs() + y.abs()).collect()
    }
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Source index of tap `(dy, dx)` for the valid pixel `(u, v)`.
///
/// Out-of-frame taps clamp to the border; taps landing on invalid pixels read
/// the center pixel instead, so holes neither create edges nor leak their
/// (meaningless) values into neighboring gradients.
#[inline]
fn tap(valid: &[bool], w: usize, h: usize, u: usize, v: usize, dx: isize, dy: isize) -> usize {
    let uu = (u as isize + dx).clamp(0, w as isize - 1) as usize;
    let vv = (v as isize + dy).clamp(0, h as isize - 1) as usize;
    let j = vv * w + uu;
    if valid[j] {
        j
    } else {
        v * w + u
    }
}

pub(crate) fn sobel_raw(values: &[f64], valid: &[bool], w: usize, h: usize) -> Result<GradientField> {
    if w < 3 || h < 3 {
        return Err(Error::DimensionTooSmall {
            width: w,
            height: h,
        });
    }
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            if !valid[i] {
                continue;
            }
            let (mut sx, mut sy) = (0.0, 0.0);
            for ky in 0..3 {
                for kx in 0..3 {
                    let j = tap(valid, w, h, u, v, kx as isize - 1, ky as isize - 1);
                    sx += SOBEL_X[ky][kx] * values[j];
                    sy += SOBEL_Y[ky][kx] * values[j];
                }
            }
            gx[i] = sx;
            gy[i] = sy;
        }
    }
    Ok(GradientField {
        width: w,
        height: h,
        gx,
        gy,
    })
}

/// Transpose of [`sobel_raw`] as a linear map of `values`: scatters upstream
/// gradients on `gx`/`gy` back onto the depth values.
pub(crate) fn sobel_adjoint(dgx: &[f64], dgy: &[f64], valid: &[bool], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            if !valid[i] || (dgx[i] == 0.0 && dgy[i] == 0.0) {
                continue;
            }
            for ky in 0..3 {
                for kx in 0..3 {
                    let j = tap(valid, w, h, u, v, kx as isize - 1, ky as isize - 1);
                    out[j] += SOBEL_X[ky][kx] * dgx[i] + SOBEL_Y[ky][kx] * dgy[i];
                }
            }
        }
    }
    out
}

/// 3x3 Sobel gradients with replicate padding; invalid pixels get 0.
pub fn sobel_gradients(depth: &DepthMap) -> Result<GradientField> {
    sobel_raw(&depth.values, &depth.valid, depth.width, depth.height)
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::Config(format!(
                "intrinsics need fx > 0 and fy > 0 (got fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        [
            (u - self.cx) * depth / self.fx,
            (v - self.cy) * depth / self.fy,
            depth,
        ]
    }

    /// Pixel coordinates `(u, v)` of a camera-frame point with `Z > 0`.
    pub fn project(&self, p: [f64; 3]) -> (f64, f64) {
        (p[0] * self.fx / p[2] + self.cx, p[1] * self.fy / p[2] + self.cy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    /// RGB in [0, 1], one per point.
    pub colors: Option<Vec<[f64; 3]>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Back-projects every valid pixel, in row-major order.
pub fn project_to_point_cloud(
    depth: &DepthMap,
    intrinsics: &CameraIntrinsics,
    colors: Option<&Image>,
) -> Result<PointCloud> {
    intrinsics.validate()?;
    if let Some(img) = colors {
        if img.width() != depth.width || img.height() != depth.height {
            return Err(Error::ShapeMismatch(format!(
                "color image {}x{} vs depth {}x{}",
                img.width(),
                img.height(),
                depth.width,
                depth.height
            )));
        }
    }
    let n = depth.valid_count();
    if n == 0 {
        return Err(Error::EmptyCloud);
    }
    let mut points = Vec::with_capacity(n);
    let mut rgb = colors.map(|_| Vec::with_capacity(n));
    for v in 0..depth.height {
        for u in 0..depth.width {
            if !depth.is_valid(u, v) {
                continue;
            }
            points.push(intrinsics.unproject(u as f64, v as f64, depth.at(u, v)));
            if let (Some(out), Some(img)) = (rgb.as_mut(), colors) {
                let c = img.pixel(u, v);
                out.push([c[0] as f64, c[1] as f64, c[2] as f64]);
            }
        }
    }
    Ok(PointCloud { points, colors: rgb })
}

/// Parameters of [`flying_pixel_score_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlyingPixelParams {
    /// Dilation radius of the GT edge band, in pixels.
    pub edge_band: usize,
    /// Meters a prediction must stay away from both local GT extremes to count.
    pub margin: f64,
    /// GT Sobel magnitude above which a pixel is an edge.
    pub edge_threshold: f64,
}

impl Default for FlyingPixelParams {
    fn default() -> Self {
        Self {
            edge_band: 2,
            margin: 0.2,
            edge_threshold: 0.5,
        }
    }
}

/// Fraction of GT edge-band pixels whose predicted depth hovers strictly
/// between the local GT foreground and background levels.
pub fn flying_pixel_score(pred: &DepthMap, gt: &DepthMap, edge_band: usize, margin: f64) -> Result<f64> {
    flying_pixel_score_with(
        pred,
        gt,
        &FlyingPixelParams {
            edge_band,
            margin,
            ..FlyingPixelParams::default()
        },
    )
}

pub fn flying_pixel_score_with(pred: &DepthMap, gt: &DepthMap, params: &FlyingPixelParams) -> Result<f64> {
    gt.ensure_same_dims(pred)?;
    if params.edge_band < 1 {
        return Err(Error::Config("edge_band must be at least 1".into()));
    }
    if !(params.margin > 0.0) || !(params.edge_threshold > 0.0) {
        return Err(Error::Config("margin and edge_threshold must be positive".into()));
    }
    let (w, h) = (gt.width, gt.height);
    let mag = sobel_gradients(gt)?.magnitude();
    let edge: Vec<bool> = mag
        .iter()
        .zip(&gt.valid)
        .map(|(&m, &ok)| ok && m > params.edge_threshold)
        .collect();
    let r = params.edge_band as isize;
    let window = |u: usize, v: usize| {
        let (u0, u1) = ((u as isize - r).max(0) as usize, ((u as isize + r) as usize).min(w - 1));
        let (v0, v1) = ((v as isize - r).max(0) as usize, ((v as isize + r) as usize).min(h - 1));
        (v0..=v1).flat_map(move |y| (u0..=u1).map(move |x| y * w + x))
    };

    let (mut band, mut flying) = (0usize, 0usize);
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            if !gt.valid[i] || !window(u, v).any(|j| edge[j]) {
                continue;
            }
            let (lo, hi) = window(u, v)
                .filter(|&j| gt.valid[j])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), j| {
                    (lo.min(gt.values[j]), hi.max(gt.values[j]))
                });
            band += 1;
            let d = pred.values[i];
            if d > lo + params.margin && d < hi - params.margin {
                flying += 1;
            }
        }
    }
    if band == 0 {
        return Err(Error::NoEdges);
    }
    Ok(flying as f64 / band as f64)
}

/// Square `(2r+1)^2` box filter over valid pixels with edge clamping.
pub fn box_blur(depth: &DepthMap, radius: usize) -> Result<DepthMap> {
    let (w, h) = (depth.width, depth.height);
    let r = radius as isize;
    let mut out = depth.values.clone();
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            if !depth.valid[i] {
                continue;
            }
            let (mut sum, mut n) = (0.0, 0usize);
            for dy in -r..=r {
                for dx in -r..=r {
                    let x = (u as isize + dx).clamp(0, w as isize - 1) as usize;
                    let y = (v as isize + dy).clamp(0, h as isize - 1) as usize;
                    let j = y * w + x;
                    if depth.valid[j] {
                        sum += depth.values[j];
                        n += 1;
                    }
                }
            }
            out[i] = sum / n as f64;
        }
    }
    depth.with_values(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Columns `[0, 0, 1]` lifted by 1 m so every pixel is a valid depth;
    /// the offset does not change any gradient.
    fn columns(cols: [f64; 3]) -> DepthMap {
        DepthMap::from_fn(3, 3, |u, _| cols[u] + 1.0).unwrap()
    }

    /// Direct 3x3 correlation at the center pixel.
    fn center_response(vals: &[f64; 9], k: &[[f64; 3]; 3]) -> f64 {
        (0..9).map(|i| vals[i] * k[i / 3][i % 3]).sum()
    }

    #[test]
    fn constant_map_has_zero_gradient() {
        let d = DepthMap::constant(5, 5, 2.0).unwrap();
        let g = sobel_gradients(&d).unwrap();
        assert!(g.gx.iter().chain(&g.gy).all(|&x| x == 0.0));
    }

    #[test]
    fn column_step_center_response() {
        let d = columns([0.0, 0.0, 1.0]);
        let g = sobel_gradients(&d).unwrap();
        let vals: [f64; 9] = std::array::from_fn(|i| [0.0, 0.0, 1.0][i % 3]);
        assert_eq!(center_response(&vals, &SOBEL_X), 4.0);
        assert_eq!(g.gx[4], 4.0);
        assert_eq!(g.gy[4], 0.0);
    }

    #[test]
    fn row_step_center_response() {
        let d = DepthMap::from_fn(3, 3, |_, v| if v == 2 { 2.0 } else { 1.0 }).unwrap();
        let g = sobel_gradients(&d).unwrap();
        assert_eq!(g.gy[4], 4.0);
        assert_eq!(g.gx[4], 0.0);
    }

    #[test]
    fn too_small_is_rejected() {
        let d = DepthMap::constant(2, 5, 1.0).unwrap();
        assert!(matches!(sobel_gradients(&d), Err(Error::DimensionTooSmall { .. })));
    }

    #[test]
    fn invalid_pixels_get_zero_and_do_not_leak() {
        let mut values = vec![1.0; 25];
        values[12] = 0.0;
        let d = DepthMap::from_values(5, 5, values).unwrap();
        let g = sobel_gradients(&d).unwrap();
        assert!(g.gx.iter().chain(&g.gy).all(|&x| x == 0.0));
    }

    #[test]
    fn adjoint_matches_transpose() {
        let (w, h) = (5, 4);
        let valid: Vec<bool> = (0..w * h).map(|i| i % 7 != 3).collect();
        let x: Vec<f64> = (0..w * h).map(|i| ((i * 37) % 11) as f64 * 0.3).collect();
        let dy: Vec<f64> = (0..w * h).map(|i| ((i * 13) % 5) as f64 - 2.0).collect();
        let dz: Vec<f64> = (0..w * h).map(|i| ((i * 7) % 3) as f64 - 1.0).collect();
        let g = sobel_raw(&x, &valid, w, h).unwrap();
        let lhs: f64 = g.gx.iter().zip(&dy).chain(g.gy.iter().zip(&dz)).map(|(a, b)| a * b).sum();
        let back = sobel_adjoint(&dy, &dz, &valid, w, h);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert_relative_eq!(lhs, rhs, epsilon = 1e-9);
    }

    #[test]
    fn projection_examples() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        let d = DepthMap::constant(4, 2, 2.0).unwrap();
        let cloud = project_to_point_cloud(&d, &k, None).unwrap();
        assert_eq!(cloud.points[0], [0.0, 0.0, 2.0]);
        // Row-major: pixel (3, 1) is index 1 * 4 + 3.
        assert_eq!(cloud.points[7], [6.0, 2.0, 2.0]);
        let small = DepthMap::constant(2, 2, 1.0).unwrap();
        assert_eq!(project_to_point_cloud(&small, &k, None).unwrap().len(), 4);
    }

    #[test]
    fn empty_cloud_is_an_error() {
        let d = DepthMap::from_values(2, 2, vec![0.0; 4]).unwrap();
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        assert!(matches!(project_to_point_cloud(&d, &k, None), Err(Error::EmptyCloud)));
    }

    #[test]
    fn bad_intrinsics_rejected() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
    }

    fn step(w: usize, h: usize) -> DepthMap {
        DepthMap::from_fn(w, h, |u, _| if u < w / 2 { 1.0 } else { 3.0 }).unwrap()
    }

    /// Exhaustive count of intermediate-band pixels, written independently.
    fn brute_flying(pred: &DepthMap, gt: &DepthMap, band: usize, margin: f64, thr: f64) -> (usize, usize) {
        let (w, h) = (gt.width(), gt.height());
        let g = sobel_gradients(gt).unwrap();
        let mut inband = 0;
        let mut count = 0;
        for v in 0..h {
            for u in 0..w {
                let mut near_edge = false;
                let mut lo = f64::MAX;
                let mut hi = f64::MIN;
                for y in v.saturating_sub(band)..=(v + band).min(h - 1) {
                    for x in u.saturating_sub(band)..=(u + band).min(w - 1) {
                        let j = y * w + x;
                        if g.gx[j].abs() + g.gy[j].abs() > thr {
                            near_edge = true;
                        }
                        lo = lo.min(gt.values()[j]);
                        hi = hi.max(gt.values()[j]);
                    }
                }
                if near_edge {
                    inband += 1;
                    let d = pred.at(u, v);
                    if lo + margin < d && d < hi - margin {
                        count += 1;
                    }
                }
            }
        }
        (count, inband)
    }

    #[test]
    fn flying_pixels_sharp_vs_blurred() {
        let gt = step(16, 12);
        assert_eq!(flying_pixel_score(&gt, &gt, 2, 0.2).unwrap(), 0.0);
        let blurred = box_blur(&gt, 2).unwrap();
        let s = flying_pixel_score(&blurred, &gt, 2, 0.2).unwrap();
        let (c, n) = brute_flying(&blurred, &gt, 2, 0.2, 0.5);
        assert!(c > 0);
        assert_eq!(s, c as f64 / n as f64);
        assert!(s > 0.0);
    }

    #[test]
    fn flying_pixels_need_edges() {
        let gt = DepthMap::constant(8, 8, 2.0).unwrap();
        assert!(matches!(flying_pixel_score(&gt, &gt, 1, 0.2), Err(Error::NoEdges)));
    }

    proptest! {
        #[test]
        fn sobel_is_linear(vals in prop::collection::vec(0.1f64..10.0, 30), a in 0.01f64..50.0) {
            let d = DepthMap::from_values(6, 5, vals).unwrap();
            let g = sobel_gradients(&d).unwrap();
            let ga = sobel_gradients(&d.map_values(|x| a * x).unwrap()).unwrap();
            for (x, y) in g.gx.iter().chain(&g.gy).zip(ga.gx.iter().chain(&ga.gy)) {
                prop_assert!((a * x - y).abs() <= 1e-6 * (a * x).abs().max(1e-9) + 1e-9);
            }
        }

        #[test]
        fn projection_round_trip(vals in prop::collection::vec(prop_oneof![Just(0.0), 0.2f64..20.0], 20),
                                 fx in 10.0f64..800.0, fy in 10.0f64..800.0, cx in -5.0f64..5.0, cy in -5.0f64..5.0) {
            let d = DepthMap::from_values(5, 4, vals).unwrap();
            let k = CameraIntrinsics::new(fx, fy, cx, cy).unwrap();
            match project_to_point_cloud(&d, &k, None) {
                Err(Error::EmptyCloud) => prop_assert_eq!(d.valid_count(), 0),
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
                Ok(cloud) => {
                    prop_assert_eq!(cloud.len(), d.valid_count());
                    let pixels = (0..20).filter(|&i| d.valid()[i]);
                    for (p, i) in cloud.points.iter().zip(pixels) {
                        let (u, v) = k.project(*p);
                        prop_assert!((u - (i % 5) as f64).abs() < 1e-6);
                        prop_assert!((v - (i / 5) as f64).abs() < 1e-6);
                        prop_assert_eq!(p[2], d.values()[i]);
                    }
                }
            }
        }

        #[test]
        fn flying_score_shift_invariant(c in 0.0f64..5.0, blur in 1usize..3) {
            let gt = step(12, 10);
            let pred = box_blur(&gt, blur).unwrap();
            let s0 = flying_pixel_score(&pred, &gt, 2, 0.2).unwrap();
            let s1 = flying_pixel_score(&pred.map_values(|x| x + c).unwrap(), &gt.map_values(|x| x + c).unwrap(), 2, 0.2).unwrap();
            prop_assert_eq!(s0, s1);
        }
    }
}
