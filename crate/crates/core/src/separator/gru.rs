//! Single-direction GRU over a whole sequence, with its backward pass.
//!
//! Gates are stored side by side as `[update | reset | candidate]` in the
//! `3H` columns of both weight matrices:
//!
//! ```text
//! z = σ(x Wz + h Uz + bz + cz)
//! r = σ(x Wr + h Ur + br + cr)
//! n = tanh(x Wn + bn + r ⊙ (h Un + cn))
//! h' = (1 - z) ⊙ n + z ⊙ h
//! ```

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    /// `input × 3H`
    pub w_in: Array2<f64>,
    /// `H × 3H`
    pub w_rec: Array2<f64>,
    pub b_in: Array1<f64>,
    pub b_rec: Array1<f64>,
}

impl GruParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_in: Array2::zeros((input, 3 * hidden)),
            w_rec: Array2::zeros((hidden, 3 * hidden)),
            b_in: Array1::zeros(3 * hidden),
            b_rec: Array1::zeros(3 * hidden),
        }
    }

    /// Weights uniform in ±1/√fan_in; biases zero.
    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(input, hidden);
        let bound_in = 1.0 / (input as f64).sqrt();
        let bound_rec = 1.0 / (hidden as f64).sqrt();
        p.w_in.mapv_inplace(|_| rng.random_range(-bound_in..bound_in));
        p.w_rec.mapv_inplace(|_| rng.random_range(-bound_rec..bound_rec));
        p
    }

    pub fn hidden(&self) -> usize {
        self.w_rec.nrows()
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            self.w_in.as_slice().expect("contiguous"),
            self.w_rec.as_slice().expect("contiguous"),
            self.b_in.as_slice().expect("contiguous"),
            self.b_rec.as_slice().expect("contiguous"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w_in.as_slice_mut().expect("contiguous"),
            self.w_rec.as_slice_mut().expect("contiguous"),
            self.b_in.as_slice_mut().expect("contiguous"),
            self.b_rec.as_slice_mut().expect("contiguous"),
        ]
    }
}

pub struct GruCache {
    x: Array2<f64>,
    z: Array2<f64>,
    r: Array2<f64>,
    n: Array2<f64>,
    /// Recurrent candidate term `h Un + cn` before the reset gate.
    rec_n: Array2<f64>,
    h_prev: Array2<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Runs the cell over all rows of `x`; returns the `m × H` hidden states.
pub fn forward(p: &GruParams, x: ArrayView2<f64>) -> (Array2<f64>, GruCache) {
    let m = x.nrows();
    let h = p.hidden();
    let ax = x.dot(&p.w_in) + &p.b_in;
    let mut cache = GruCache {
        x: x.to_owned(),
        z: Array2::zeros((m, h)),
        r: Array2::zeros((m, h)),
        n: Array2::zeros((m, h)),
        rec_n: Array2::zeros((m, h)),
        h_prev: Array2::zeros((m, h)),
    };
    let mut out = Array2::zeros((m, h));
    let mut state = Array1::<f64>::zeros(h);
    for t in 0..m {
        let ah = state.dot(&p.w_rec) + &p.b_rec;
        let axt = ax.row(t);
        cache.h_prev.row_mut(t).assign(&state);
        for j in 0..h {
            let z = sigmoid(axt[j] + ah[j]);
            let r = sigmoid(axt[h + j] + ah[h + j]);
            let rec_n = ah[2 * h + j];
            let n = (axt[2 * h + j] + r * rec_n).tanh();
            cache.z[[t, j]] = z;
            cache.r[[t, j]] = r;
            cache.n[[t, j]] = n;
            cache.rec_n[[t, j]] = rec_n;
            state[j] = (1.0 - z) * n + z * state[j];
        }
        out.row_mut(t).assign(&state);
    }
    (out, cache)
}

/// Back-propagates `d_out` (`m × H`) through time. Returns the input gradient
/// and the parameter gradients.
pub fn backward(p: &GruParams, cache: &GruCache, d_out: ArrayView2<f64>) -> (Array2<f64>, GruParams) {
    let m = d_out.nrows();
    let h = p.hidden();
    let mut d_ax = Array2::<f64>::zeros((m, 3 * h));
    let mut d_ah = Array2::<f64>::zeros((m, 3 * h));
    let mut d_next = Array1::<f64>::zeros(h);
    for t in (0..m).rev() {
        let mut d_prev = Array1::<f64>::zeros(h);
        for j in 0..h {
            let dh = d_out[[t, j]] + d_next[j];
            let (z, r, n) = (cache.z[[t, j]], cache.r[[t, j]], cache.n[[t, j]]);
            let hp = cache.h_prev[[t, j]];
            let dn = dh * (1.0 - z);
            let dz = dh * (hp - n);
            d_prev[j] = dh * z;
            let dan = dn * (1.0 - n * n);
            let dr = dan * cache.rec_n[[t, j]];
            let daz = dz * z * (1.0 - z);
            let dar = dr * r * (1.0 - r);
            d_ax[[t, j]] = daz;
            d_ax[[t, h + j]] = dar;
            d_ax[[t, 2 * h + j]] = dan;
            d_ah[[t, j]] = daz;
            d_ah[[t, h + j]] = dar;
            d_ah[[t, 2 * h + j]] = dan * r;
        }
        d_prev += &p.w_rec.dot(&d_ah.row(t));
        d_next = d_prev;
    }
    let grads = GruParams {
        w_in: cache.x.t().dot(&d_ax),
        w_rec: cache.h_prev.t().dot(&d_ah),
        b_in: d_ax.sum_axis(Axis(0)),
        b_rec: d_ah.sum_axis(Axis(0)),
    };
    (d_ax.dot(&p.w_in.t()), grads)
}

/// Reverses the row (time) order.
pub fn reversed(x: ArrayView2<f64>) -> Array2<f64> {
    x.slice(s![..;-1, ..]).to_owned()
}
