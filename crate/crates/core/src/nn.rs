//! Small fully connected networks evaluated over batches of points.
//!
//! Activations are stored feature-major (`[feature][point]`) so the inner
//! loops run over points and vectorize.

use rand::Rng;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Deterministic sum with independent lanes.
#[inline]
pub(crate) fn sum(a: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let c = a.chunks_exact(8);
    let r = c.remainder();
    for x in c {
        for k in 0..8 {
            lanes[k] += x[k];
        }
    }
    let tail: f64 = r.iter().sum();
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail
}

/// Layer sizes and the parameter offset of a ReLU MLP with a linear output.
/// Each layer stores its `out x in` weight matrix (row-major) followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    offset: usize,
}

impl Mlp {
    pub fn new(sizes: Vec<usize>, offset: usize) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        Self { sizes, offset }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_len(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        Self::count_params(&self.sizes)
    }

    pub fn count_params(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Activation buffer length for `n` points.
    pub fn acts_len(&self, n: usize) -> usize {
        self.sizes[1..].iter().sum::<usize>() * n
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.n_params()
    }

    /// He-uniform hidden layers, Glorot-uniform output layer, zero biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, params: &mut [f64]) {
        let mut off = self.offset;
        let n_layers = self.sizes.len() - 1;
        for (li, w) in self.sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = if li + 1 == n_layers {
                (6.0 / (fan_in + fan_out) as f64).sqrt()
            } else {
                (6.0 / fan_in as f64).sqrt()
            };
            for p in &mut params[off..off + fan_in * fan_out] {
                *p = rng.gen_range(-bound..bound);
            }
            off += fan_in * fan_out;
            for p in &mut params[off..off + fan_out] {
                *p = 0.0;
            }
            off += fan_out;
        }
    }

    /// Forward pass for `n` points. `input` is `[in][n]`; `acts` receives every
    /// layer's output, the last one being the linear output `[out][n]`.
    pub fn forward(&self, params: &[f64], input: &[f64], n: usize, acts: &mut [f64]) {
        assert_eq!(input.len(), self.input_len() * n);
        assert_eq!(acts.len(), self.acts_len(n));
        let n_layers = self.sizes.len() - 1;
        let mut off = self.offset;
        let mut act_off = 0;
        for li in 0..n_layers {
            let (fi, fo) = (self.sizes[li], self.sizes[li + 1]);
            let w = &params[off..off + fi * fo];
            let b = &params[off + fi * fo..off + fi * fo + fo];
            let (prev, rest) = acts.split_at_mut(act_off);
            let x: &[f64] = if li == 0 { input } else { &prev[act_off - fi * n..] };
            let out = &mut rest[..fo * n];
            for o in 0..fo {
                out[o * n..(o + 1) * n].fill(b[o]);
            }
            // out += W x
            gemm(fo, fi, n, w, (fi, 1), x, (n, 1), 1.0, out);
            if li + 1 < n_layers {
                for r in out.iter_mut() {
                    *r = r.max(0.0);
                }
            }
            off += fi * fo + fo;
            act_off += fo * n;
        }
    }

    /// Output slice of `acts` after [`forward`].
    pub fn output<'a>(&self, acts: &'a [f64], n: usize) -> &'a [f64] {
        &acts[acts.len() - self.output_len() * n..]
    }

    /// Backward pass. `d_out` is the gradient with respect to the linear output
    /// `[out][n]`; parameter gradients are added into `grads` (same layout as
    /// `params`) and, if given, input gradients are written to `d_input`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        params: &[f64],
        input: &[f64],
        acts: &[f64],
        d_out: &[f64],
        n: usize,
        grads: &mut [f64],
        mut d_input: Option<&mut [f64]>,
        scratch: &mut Vec<f64>,
    ) {
        let n_layers = self.sizes.len() - 1;
        let max_width = *self.sizes.iter().max().unwrap();
        scratch.resize(2 * max_width * n, 0.0);
        let (cur, nxt) = scratch.split_at_mut(max_width * n);
        let fo_last = self.output_len();
        cur[..fo_last * n].copy_from_slice(d_out);

        // offsets of each layer's parameters and activations
        let mut p_offs = Vec::with_capacity(n_layers);
        let mut a_offs = Vec::with_capacity(n_layers);
        let (mut po, mut ao) = (self.offset, 0);
        for li in 0..n_layers {
            p_offs.push(po);
            a_offs.push(ao);
            po += self.sizes[li] * self.sizes[li + 1] + self.sizes[li + 1];
            ao += self.sizes[li + 1] * n;
        }

        let mut delta: &mut [f64] = cur;
        let mut next: &mut [f64] = nxt;
        for li in (0..n_layers).rev() {
            let (fi, fo) = (self.sizes[li], self.sizes[li + 1]);
            let off = p_offs[li];
            let x: &[f64] = if li == 0 {
                input
            } else {
                &acts[a_offs[li - 1]..a_offs[li - 1] + fi * n]
            };
            let d = &delta[..fo * n];
            // dW += delta x^T
            gemm(fo, n, fi, d, (n, 1), x, (1, n), 1.0, &mut grads[off..off + fi * fo]);
            for o in 0..fo {
                grads[off + fi * fo + o] += sum(&d[o * n..(o + 1) * n]);
            }
            let need_input_grad = li > 0 || d_input.is_some();
            if !need_input_grad {
                break;
            }
            let w = &params[off..off + fi * fo];
            let dx: &mut [f64] = if li == 0 {
                d_input.as_deref_mut().unwrap()
            } else {
                &mut next[..fi * n]
            };
            // dx = W^T delta
            gemm(fi, fo, n, w, (1, fi), d, (n, 1), 0.0, dx);
            if li > 0 {
                // ReLU derivative from the stored post-activations
                for (g, &a) in dx.iter_mut().zip(x) {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
                std::mem::swap(&mut delta, &mut next);
            }
        }
    }
}

/// `c = a b + beta c` for an `m x k` matrix `a` and `k x n` matrix `b` given
/// by (row, column) strides; `c` is dense row-major `m x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the assertions above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
