//! Exact 2D discrete Fourier transform and inverse.
//!
//! Forward transform is unnormalized, inverse carries `1/(HW)`:
//!
//! ```text
//! X[u,v] = Σ_i Σ_j x[i,j] · exp(-2πi (u·i/H + v·j/W))
//! x[i,j] = 1/(HW) Σ_u Σ_v X[u,v] · exp(+2πi (u·i/H + v·j/W))
//! ```
//!
//! Bins are kept in unshifted order (DC at `(0, 0)`). Each axis is handled by
//! an iterative radix-2 FFT when its length is a power of two and by a direct
//! sum with a precomputed twiddle table otherwise.

use std::f64::consts::PI;

pub use num_complex::Complex64;

/// A complex `H x W` grid in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    height: usize,
    width: usize,
    bins: Vec<Complex64>,
}

impl Spectrum {
    pub fn new(height: usize, width: usize, bins: Vec<Complex64>) -> Self {
        assert_eq!(bins.len(), height * width, "spectrum size mismatch");
        Spectrum {
            height,
            width,
            bins,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![Complex64::new(0.0, 0.0); height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bins(&self) -> &[Complex64] {
        &self.bins
    }

    pub fn bins_mut(&mut self) -> &mut [Complex64] {
        &mut self.bins
    }

    pub fn get(&self, u: usize, v: usize) -> Complex64 {
        self.bins[u * self.width + v]
    }

    pub fn set(&mut self, u: usize, v: usize, value: Complex64) {
        self.bins[u * self.width + v] = value;
    }

    /// Real parts, row-major.
    pub fn real(&self) -> Vec<f64> {
        self.bins.iter().map(|c| c.re).collect()
    }

    /// Largest `|Im|` over all bins.
    pub fn max_imag(&self) -> f64 {
        self.bins.iter().map(|c| c.im.abs()).fold(0.0, f64::max)
    }
}

/// Forward transform of a real `height x width` channel.
pub fn dft2(channel: &[f64], height: usize, width: usize) -> Spectrum {
    assert!(height >= 1 && width >= 1, "empty grid");
    assert_eq!(channel.len(), height * width, "channel size mismatch");
    let bins = channel.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    let mut spec = Spectrum::new(height, width, bins);
    transform_2d(&mut spec, Direction::Forward);
    spec
}

/// Inverse transform, including the `1/(HW)` factor. Returns the complex grid.
pub fn idft2(spec: &Spectrum) -> Spectrum {
    let mut out = spec.clone();
    transform_2d(&mut out, Direction::Inverse);
    let norm = 1.0 / (spec.height * spec.width) as f64;
    for c in out.bins.iter_mut() {
        *c *= norm;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Direction {
    Forward,
    Inverse,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Forward => -1.0,
            Direction::Inverse => 1.0,
        }
    }
}

fn transform_2d(spec: &mut Spectrum, dir: Direction) {
    let (h, w) = (spec.height, spec.width);
    let row_plan = Plan1d::new(w, dir);
    let mut scratch = vec![Complex64::new(0.0, 0.0); h.max(w)];
    for row in spec.bins.chunks_mut(w) {
        row_plan.run(row, &mut scratch[..w]);
    }
    let col_plan = Plan1d::new(h, dir);
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for v in 0..w {
        for u in 0..h {
            column[u] = spec.bins[u * w + v];
        }
        col_plan.run(&mut column, &mut scratch[..h]);
        for u in 0..h {
            spec.bins[u * w + v] = column[u];
        }
    }
}

/// Twiddles for one axis length.
struct Plan1d {
    len: usize,
    twiddles: Vec<Complex64>,
    radix2: bool,
}

impl Plan1d {
    fn new(len: usize, dir: Direction) -> Self {
        let radix2 = len.is_power_of_two();
        let s = dir.sign();
        let twiddles = (0..len)
            .map(|k| Complex64::from_polar(1.0, s * 2.0 * PI * k as f64 / len as f64))
            .collect();
        Plan1d {
            len,
            twiddles,
            radix2,
        }
    }

    fn run(&self, data: &mut [Complex64], scratch: &mut [Complex64]) {
        debug_assert_eq!(data.len(), self.len);
        if self.len <= 1 {
            return;
        }
        if self.radix2 {
            self.fft_radix2(data);
        } else {
            self.direct(data, scratch);
        }
    }

    fn direct(&self, data: &mut [Complex64], scratch: &mut [Complex64]) {
        let n = self.len;
        for (k, out) in scratch.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for (j, x) in data.iter().enumerate() {
                acc += x * self.twiddles[(k * j) % n];
            }
            *out = acc;
        }
        data.copy_from_slice(scratch);
    }

    fn fft_radix2(&self, data: &mut [Complex64]) {
        let n = self.len;
        let bits = n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if j > i {
                data.swap(i, j);
            }
        }
        let mut size = 2;
        while size <= n {
            let half = size / 2;
            let stride = n / size;
            for start in (0..n).step_by(size) {
                for k in 0..half {
                    let t = self.twiddles[k * stride] * data[start + k + half];
                    let u = data[start + k];
                    data[start + k] = u + t;
                    data[start + k + half] = u - t;
                }
            }
            size *= 2;
        }
    }
}
