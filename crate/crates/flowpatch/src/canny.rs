//! Canny edge detection.
//!
//! The stages are fixed so that results are reproducible bit for bit:
//! grayscale, separable Gaussian blur (radius `ceil(3*sigma)`, symmetric
//! reflection at borders), 3x3 Sobel, non-maximum suppression with the
//! gradient direction quantized to four bins, then double-threshold
//! hysteresis with 8-connectivity. Thresholds are fractions of the maximum
//! suppressed gradient magnitude. Border pixels are never edges.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::par;

/// Binary edge map.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl EdgeMap {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::DimensionMismatch(format!(
                "{h}x{w} edge map with {} entries",
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Render as a black/white image.
    pub fn to_image(&self) -> Image {
        let data = self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Image::new(self.h, self.w, 1, data).expect("sizes agree")
    }
}

/// Gradients of a single-channel image.
#[derive(Debug, Clone)]
pub struct GradientField {
    pub h: usize,
    pub w: usize,
    pub gx: Vec<f64>,
    pub gy: Vec<f64>,
    pub magnitude: Vec<f64>,
    /// `atan2(gy, gx)` in radians, y pointing down.
    pub direction: Vec<f64>,
}

/// Symmetric border reflection: `-1 -> 0`, `-2 -> 1`, `n -> n-1`.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Normalized 1-D Gaussian taps over radius `ceil(3*sigma)`.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur of a single-channel image. `sigma == 0` returns
/// the input unchanged.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    if sigma < 0.0 {
        return Err(Error::NegativeSigma(sigma));
    }
    if img.channels() != 1 {
        return Err(Error::DimensionMismatch(
            "gaussian_blur expects a single-channel image".into(),
        ));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let (h, w) = (img.height(), img.width());
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let src = img.data();

    let mut horiz = vec![0.0; h * w];
    par::for_each_row(&mut horiz, w, |y, row| {
        for (x, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (ki, &kv) in k.iter().enumerate() {
                let sx = reflect(x as isize + ki as isize - r, w);
                acc += kv * src[y * w + sx];
            }
            *out = acc;
        }
    });

    let mut out = vec![0.0; h * w];
    par::for_each_row(&mut out, w, |y, row| {
        for (x, o) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (ki, &kv) in k.iter().enumerate() {
                let sy = reflect(y as isize + ki as isize - r, h);
                acc += kv * horiz[sy * w + x];
            }
            *o = acc;
        }
    });
    Image::new(h, w, 1, out)
}

/// 3x3 Sobel gradients with symmetric reflection; magnitude is
/// `sqrt(gx^2 + gy^2)`.
pub fn sobel_gradients(img: &Image) -> Result<GradientField> {
    if img.channels() != 1 {
        return Err(Error::DimensionMismatch(
            "sobel_gradients expects a single-channel image".into(),
        ));
    }
    let (h, w) = (img.height(), img.width());
    if h < 3 || w < 3 {
        return Err(Error::TooSmall { h, w, min: 3 });
    }
    let src = img.data();
    let at = |y: isize, x: isize| src[reflect(y, h) * w + reflect(x, w)];

    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    par::for_each_row(&mut gx, w, |y, row| {
        let y = y as isize;
        for (x, o) in row.iter_mut().enumerate() {
            let x = x as isize;
            *o = -at(y - 1, x - 1) + at(y - 1, x + 1) - 2.0 * at(y, x - 1)
                + 2.0 * at(y, x + 1)
                - at(y + 1, x - 1)
                + at(y + 1, x + 1);
        }
    });
    par::for_each_row(&mut gy, w, |y, row| {
        let y = y as isize;
        for (x, o) in row.iter_mut().enumerate() {
            let x = x as isize;
            *o = -at(y - 1, x - 1) - 2.0 * at(y - 1, x) - at(y - 1, x + 1)
                + at(y + 1, x - 1)
                + 2.0 * at(y + 1, x)
                + at(y + 1, x + 1);
        }
    });
    let magnitude: Vec<f64> = gx
        .iter()
        .zip(&gy)
        .map(|(&a, &b)| (a * a + b * b).sqrt())
        .collect();
    let direction: Vec<f64> = gy.iter().zip(&gx).map(|(&b, &a)| b.atan2(a)).collect();
    Ok(GradientField { h, w, gx, gy, magnitude, direction })
}

/// Quantize a gradient direction (radians) to one of the four neighbor axes,
/// returning the two neighbor offsets `(dy, dx)` along the gradient.
#[inline]
pub fn direction_neighbors(dir: f64) -> [(isize, isize); 2] {
    let mut deg = dir.to_degrees();
    if deg < 0.0 {
        deg += 180.0;
    }
    if !(22.5..157.5).contains(&deg) {
        [(0, -1), (0, 1)] // horizontal gradient
    } else if deg < 67.5 {
        [(-1, -1), (1, 1)] // down-right diagonal
    } else if deg < 112.5 {
        [(-1, 0), (1, 0)] // vertical gradient
    } else {
        [(-1, 1), (1, -1)] // down-left diagonal
    }
}

/// Full Canny pipeline. `low` and `high` are fractions of the maximum
/// suppressed gradient magnitude; `low <= high` is required.
pub fn canny_edges(img: &Image, sigma: f64, low: f64, high: f64) -> Result<EdgeMap> {
    if !(0.0..=f64::MAX).contains(&low) || low > high {
        return Err(Error::InvalidThresholds { low, high });
    }
    let gray = img.to_grayscale();
    let blurred = gaussian_blur(&gray, sigma)?;
    let grad = sobel_gradients(&blurred)?;
    let (h, w) = (grad.h, grad.w);

    // Non-maximum suppression on interior pixels; a pixel survives unless a
    // neighbor along the gradient direction is strictly stronger.
    let mut nms = vec![0.0; h * w];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let m = grad.magnitude[y * w + x];
            let [a, b] = direction_neighbors(grad.direction[y * w + x]);
            let ma = grad.magnitude[(y as isize + a.0) as usize * w + (x as isize + a.1) as usize];
            let mb = grad.magnitude[(y as isize + b.0) as usize * w + (x as isize + b.1) as usize];
            if m >= ma && m >= mb {
                nms[y * w + x] = m;
            }
        }
    }

    let max = nms.iter().cloned().fold(0.0, f64::max);
    let hi = high * max;
    let lo = low * max;
    let strong = |m: f64| m > 0.0 && m >= hi;
    let weak = |m: f64| m > 0.0 && m >= lo;

    // Hysteresis: flood from strong pixels through weak ones, 8-connected.
    let mut edges = vec![false; h * w];
    let mut stack = Vec::new();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            if strong(nms[y * w + x]) && !edges[y * w + x] {
                edges[y * w + x] = true;
                stack.push((y, x));
                while let Some((cy, cx)) = stack.pop() {
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            if dy == 0 && dx == 0 {
                                continue;
                            }
                            let (ny, nx) = (cy as isize + dy, cx as isize + dx);
                            if ny < 1 || nx < 1 || ny >= h as isize - 1 || nx >= w as isize - 1 {
                                continue;
                            }
                            let (ny, nx) = (ny as usize, nx as usize);
                            if !edges[ny * w + nx] && weak(nms[ny * w + nx]) {
                                edges[ny * w + nx] = true;
                                stack.push((ny, nx));
                            }
                        }
                    }
                }
            }
        }
    }
    EdgeMap::new(h, w, edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_blur_is_identity() {
        let img = Image::new(3, 3, 1, (0..9).map(|i| i as f64 / 10.0).collect()).unwrap();
        assert_eq!(gaussian_blur(&img, 0.0).unwrap(), img);
    }

    #[test]
    fn negative_sigma_is_rejected() {
        let img = Image::zeros(3, 3, 1);
        assert!(matches!(
            gaussian_blur(&img, -1.0),
            Err(Error::NegativeSigma(_))
        ));
    }

    #[test]
    fn gaussian_kernel_sums_to_one() {
        for sigma in [0.5, 1.0, 2.3] {
            let k = gaussian_kernel(sigma);
            assert_eq!(k.len(), 2 * (3.0 * sigma).ceil() as usize + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_of_constant_image_is_constant() {
        let img = Image::new(8, 8, 1, vec![0.37; 64]).unwrap();
        let out = gaussian_blur(&img, 1.5).unwrap();
        for &v in out.data() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn impulse_blur_center_matches_separable_kernel_weight() {
        let mut img = Image::zeros(9, 9, 1);
        img.set(4, 4, 0, 1.0);
        let out = gaussian_blur(&img, 1.0).unwrap();
        let k = gaussian_kernel(1.0);
        let center = k[k.len() / 2];
        assert!((out.get(4, 4, 0) - center * center).abs() < 1e-12);
    }

    #[test]
    fn vertical_step_peaks_adjacent_to_step_with_sobel_weight() {
        // Left half 0, right half 0.5; the two columns next to the step see
        // the full Sobel positive-tap weight (1+2+1) times the step height.
        let mut img = Image::zeros(7, 8, 1);
        for y in 0..7 {
            for x in 4..8 {
                img.set(y, x, 0, 0.5);
            }
        }
        let g = sobel_gradients(&img).unwrap();
        let m = |y: usize, x: usize| g.magnitude[y * 8 + x];
        assert!((m(3, 3) - 4.0 * 0.5).abs() < 1e-12);
        assert!((m(3, 4) - 4.0 * 0.5).abs() < 1e-12);
        assert_eq!(g.direction[3 * 8 + 3], 0.0);
        assert!(m(3, 1) < 1e-12);
    }

    #[test]
    fn too_small_images_are_rejected() {
        let img = Image::zeros(2, 5, 1);
        assert!(matches!(
            sobel_gradients(&img),
            Err(Error::TooSmall { .. })
        ));
    }

    #[test]
    fn thresholds_must_be_ordered() {
        let img = Image::zeros(8, 8, 1);
        assert!(matches!(
            canny_edges(&img, 1.0, 0.5, 0.2),
            Err(Error::InvalidThresholds { .. })
        ));
    }

    #[test]
    fn constant_image_has_no_edges() {
        let img = Image::new(16, 16, 1, vec![0.8; 256]).unwrap();
        let e = canny_edges(&img, 1.0, 0.1, 0.3).unwrap();
        assert_eq!(e.count(), 0);
    }

    #[test]
    fn borders_are_never_edges() {
        let mut img = Image::zeros(12, 12, 1);
        for y in 0..12 {
            for x in 6..12 {
                img.set(y, x, 0, 1.0);
            }
        }
        let e = canny_edges(&img, 1.0, 0.1, 0.3).unwrap();
        assert!(e.count() > 0);
        for i in 0..12 {
            assert!(!e.get(0, i) && !e.get(11, i) && !e.get(i, 0) && !e.get(i, 11));
        }
    }

    #[test]
    fn raising_high_never_adds_edges() {
        let mut img = Image::zeros(16, 16, 1);
        for y in 4..12 {
            for x in 4..12 {
                img.set(y, x, 0, ((y * x) % 7) as f64 / 7.0);
            }
        }
        let loose = canny_edges(&img, 1.0, 0.1, 0.2).unwrap();
        let tight = canny_edges(&img, 1.0, 0.1, 0.6).unwrap();
        for (l, t) in loose.data().iter().zip(tight.data()) {
            assert!(*l || !*t, "tight edge set must be a subset");
        }
    }
}
