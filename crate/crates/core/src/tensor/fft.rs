use rustfft::num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use super::{ComplexTensor4, Shape4, Tensor4};

/// Unnormalized forward 4-D DFT with kernel `exp(-2πi Σ k_j n_j / d_j)`.
pub fn fft4(x: &Tensor4) -> ComplexTensor4 {
    let buf: Vec<Complex64> = x.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let out = transform(buf, x.shape(), FftDirection::Forward);
    split(out, x.shape())
}

/// Inverse 4-D DFT, normalized by `1 / (d1 d2 d3 d4)`.
pub fn ifft4(f: &ComplexTensor4) -> ComplexTensor4 {
    let shape = f.shape();
    let n: usize = shape.iter().product();
    let buf: Vec<Complex64> =
        f.re.data()
            .iter()
            .zip(f.im.data())
            .map(|(&r, &i)| Complex64::new(r, i))
            .collect();
    let mut out = transform(buf, shape, FftDirection::Inverse);
    let inv = 1.0 / n as f64;
    out.iter_mut().for_each(|c| *c *= inv);
    split(out, shape)
}

/// Adjoint of `f ↦ Re(ifft4(f))` with `(re, im)` treated as independent
/// real coordinates. Pulls a latent-space cotangent back to the spectrum.
///
/// `∂z(n)/∂re(k) = cos θ / N` and `∂z(n)/∂im(k) = -sin θ / N`, which is
/// exactly `fft4(g) / N`.
pub fn real_ifft4_adjoint(g: &Tensor4) -> ComplexTensor4 {
    let n = g.len() as f64;
    fft4(g).scale(1.0 / n)
}

fn split(buf: Vec<Complex64>, shape: Shape4) -> ComplexTensor4 {
    let re = buf.iter().map(|c| c.re).collect();
    let im = buf.iter().map(|c| c.im).collect();
    ComplexTensor4 {
        re: Tensor4 { shape, data: re },
        im: Tensor4 { shape, data: im },
    }
}

/// Separable transform: one batch of 1-D FFTs per axis.
fn transform(mut buf: Vec<Complex64>, shape: Shape4, dir: FftDirection) -> Vec<Complex64> {
    let mut planner = FftPlanner::<f64>::new();
    for axis in 0..4 {
        let len = shape[axis];
        if len == 1 {
            continue;
        }
        let fft = planner.plan_fft(len, dir);
        let stride: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut line = vec![Complex64::default(); len];
        let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        for o in 0..outer {
            for s in 0..stride {
                let base = o * len * stride + s;
                for (k, slot) in line.iter_mut().enumerate() {
                    *slot = buf[base + k * stride];
                }
                fft.process_with_scratch(&mut line, &mut scratch);
                for (k, v) in line.iter().enumerate() {
                    buf[base + k * stride] = *v;
                }
            }
        }
    }
    buf
}
