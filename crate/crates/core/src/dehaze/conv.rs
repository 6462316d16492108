//! Stride-1, zero-padded ("same") 2-D convolution over planar CHW buffers.

use rand::Rng;

/// Weights are laid out `[out][in][ky][kx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvGrad {
    pub fn zeros_like(conv: &Conv2d) -> Self {
        Self {
            weight: vec![0.0; conv.weight.len()],
            bias: vec![0.0; conv.bias.len()],
        }
    }

    pub fn add_assign(&mut self, other: &ConvGrad) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.weight.iter_mut().chain(self.bias.iter_mut()).for_each(|v| *v *= s);
    }
}

/// Row/column span `[lo, hi)` of output positions whose tap at offset `d` lands inside `[0, n)`.
#[inline]
fn span(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

impl Conv2d {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        Self {
            in_ch,
            out_ch,
            kernel,
            weight: vec![0.0; out_ch * in_ch * kernel * kernel],
            bias: vec![0.0; out_ch],
        }
    }

    /// Uniform init with the given standard deviation.
    pub fn random(in_ch: usize, out_ch: usize, kernel: usize, std: f64, rng: &mut impl Rng) -> Self {
        let mut c = Self::zeros(in_ch, out_ch, kernel);
        let a = std * 3f64.sqrt();
        c.weight.iter_mut().for_each(|w| *w = rng.gen_range(-a..=a));
        c
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    #[inline]
    fn widx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_ch + i) * self.kernel + ky) * self.kernel + kx
    }

    pub fn forward(&self, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let hw = h * w;
        debug_assert_eq!(input.len(), self.in_ch * hw);
        let p = (self.kernel / 2) as isize;
        let mut out = vec![0.0; self.out_ch * hw];
        for o in 0..self.out_ch {
            let oplane = &mut out[o * hw..(o + 1) * hw];
            oplane.iter_mut().for_each(|v| *v = self.bias[o]);
            for i in 0..self.in_ch {
                let iplane = &input[i * hw..(i + 1) * hw];
                for ky in 0..self.kernel {
                    let dy = ky as isize - p;
                    let (ylo, yhi) = span(h, dy);
                    for kx in 0..self.kernel {
                        let dx = kx as isize - p;
                        let (xlo, xhi) = span(w, dx);
                        if xlo >= xhi {
                            continue;
                        }
                        let wv = self.weight[self.widx(o, i, ky, kx)];
                        for y in ylo..yhi {
                            let sy = (y as isize + dy) as usize;
                            let orow = &mut oplane[y * w + xlo..y * w + xhi];
                            let start = (sy * w) as isize + xlo as isize + dx;
                            let irow = &iplane[start as usize..start as usize + (xhi - xlo)];
                            for (a, b) in orow.iter_mut().zip(irow) {
                                *a += wv * b;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns `(d_input, grads)` for upstream gradient `d_out`. `d_input` is
    /// skipped (empty) when `need_input_grad` is false.
    pub fn backward(
        &self,
        input: &[f64],
        h: usize,
        w: usize,
        d_out: &[f64],
        need_input_grad: bool,
    ) -> (Vec<f64>, ConvGrad) {
        let hw = h * w;
        let p = (self.kernel / 2) as isize;
        let mut grad = ConvGrad::zeros_like(self);
        let mut d_in = if need_input_grad {
            vec![0.0; self.in_ch * hw]
        } else {
            Vec::new()
        };
        for o in 0..self.out_ch {
            let gplane = &d_out[o * hw..(o + 1) * hw];
            grad.bias[o] = gplane.iter().sum();
            for i in 0..self.in_ch {
                let iplane = &input[i * hw..(i + 1) * hw];
                for ky in 0..self.kernel {
                    let dy = ky as isize - p;
                    let (ylo, yhi) = span(h, dy);
                    for kx in 0..self.kernel {
                        let dx = kx as isize - p;
                        let (xlo, xhi) = span(w, dx);
                        if xlo >= xhi {
                            continue;
                        }
                        let widx = self.widx(o, i, ky, kx);
                        let wv = self.weight[widx];
                        let mut acc = 0.0;
                        for y in ylo..yhi {
                            let sy = (y as isize + dy) as usize;
                            let grow = &gplane[y * w + xlo..y * w + xhi];
                            let start = ((sy * w) as isize + xlo as isize + dx) as usize;
                            let irow = &iplane[start..start + (xhi - xlo)];
                            acc += grow.iter().zip(irow).map(|(g, x)| g * x).sum::<f64>();
                            if need_input_grad {
                                let drow = &mut d_in[i * hw + start..i * hw + start + (xhi - xlo)];
                                for (d, g) in drow.iter_mut().zip(grow) {
                                    *d += wv * g;
                                }
                            }
                        }
                        grad.weight[widx] = acc;
                    }
                }
            }
        }
        (d_in, grad)
    }
}

pub fn relu_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward(grad: &mut [f64], activated: &[f64]) {
    for (g, a) in grad.iter_mut().zip(activated) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct definition with explicit bounds checks.
    fn naive_forward(c: &Conv2d, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let p = (c.kernel / 2) as isize;
        let mut out = vec![0.0; c.out_ch * h * w];
        for o in 0..c.out_ch {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = c.bias[o];
                    for i in 0..c.in_ch {
                        for ky in 0..c.kernel {
                            for kx in 0..c.kernel {
                                let sy = y as isize + ky as isize - p;
                                let sx = x as isize + kx as isize - p;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += c.weight[c.widx(o, i, ky, kx)]
                                    * input[i * h * w + sy as usize * w + sx as usize];
                            }
                        }
                    }
                    out[o * h * w + y * w + x] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, h, w) in &[(1, 4, 5), (3, 5, 4), (5, 3, 7), (7, 4, 4)] {
            let mut c = Conv2d::random(2, 3, k, 0.3, &mut rng);
            c.bias = vec![0.1, -0.2, 0.3];
            let input: Vec<f64> = (0..2 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fast = c.forward(&input, h, w);
            let slow = naive_forward(&c, &input, h, w);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (h, w) = (4, 5);
        let c = Conv2d::random(2, 2, 3, 0.4, &mut rng);
        let input: Vec<f64> = (0..2 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let probe: Vec<f64> = (0..2 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // loss = <probe, conv(input)>
        let loss = |c: &Conv2d, x: &[f64]| -> f64 {
            c.forward(x, h, w).iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let (d_in, g) = c.backward(&input, h, w, &probe, true);
        let eps = 1e-6;
        for idx in [0, 5, 17, 35] {
            let mut cp = c.clone();
            cp.weight[idx] += eps;
            let mut cm = c.clone();
            cm.weight[idx] -= eps;
            let fd = (loss(&cp, &input) - loss(&cm, &input)) / (2.0 * eps);
            assert!((fd - g.weight[idx]).abs() < 1e-7);
        }
        for idx in [0, 9, 33] {
            let mut xp = input.clone();
            xp[idx] += eps;
            let mut xm = input.clone();
            xm[idx] -= eps;
            let fd = (loss(&c, &xp) - loss(&c, &xm)) / (2.0 * eps);
            assert!((fd - d_in[idx]).abs() < 1e-7);
        }
        let bias_fd: f64 = probe[..h * w].iter().sum();
        assert!((g.bias[0] - bias_fd).abs() < 1e-12);
    }
}
