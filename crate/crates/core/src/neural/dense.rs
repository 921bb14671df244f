use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Real};
use crate::error::{AceError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

/// Fully connected layer `act(x · Wᵀ + b)` applied row-wise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

/// Activations kept from a recorded forward pass.
#[derive(Debug, Clone)]
pub struct DenseCache<T> {
    input: Array2<T>,
    output: Array2<T>,
}

impl Dense {
    /// Adds `name.weight` (output × input, uniform ±sqrt(1/input)) and
    /// `name.bias` (zeros) to the store.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let weight = store.uniform(&format!("{name}.weight"), &[output, input], input, rng);
        let bias = store.zeros(&format!("{name}.bias"), &[output]);
        Self {
            weight,
            bias,
            input,
            output,
            activation,
        }
    }

    /// Looks the layer up by name in an already populated store.
    pub fn bind<T: Real>(
        store: &ParamStore<T>,
        name: &str,
        activation: Activation,
    ) -> Result<Self> {
        let find = |suffix: &str| {
            store.id(&format!("{name}.{suffix}")).ok_or_else(|| {
                AceError::StructureMismatch(format!("missing parameter {name}.{suffix}"))
            })
        };
        let (weight, bias) = (find("weight")?, find("bias")?);
        let shape = &store.get(weight).shape;
        Ok(Self {
            weight,
            bias,
            input: shape[1],
            output: shape[0],
            activation,
        })
    }

    pub fn num_params(&self) -> usize {
        self.output * (self.input + 1)
    }

    /// Forward pass; with `record` the activations needed by
    /// [`Dense::backward`] are returned as well.
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: ArrayView2<'_, T>,
        record: bool,
    ) -> Result<(Array2<T>, Option<DenseCache<T>>)> {
        if x.ncols() != self.input {
            return Err(AceError::DimensionMismatch(format!(
                "dense layer expects width {}, got {}",
                self.input,
                x.ncols()
            )));
        }
        let w = store.matrix(self.weight);
        let b = ArrayView1::from(store.value(self.bias));
        let mut out = Array2::from_shape_fn((x.nrows(), self.output), |(_, o)| b[o]);
        general_mat_mul(T::one(), &x, &w.t(), T::one(), &mut out);
        if self.activation == Activation::Relu {
            out.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
        }
        let cache = record.then(|| DenseCache {
            input: x.to_owned(),
            output: out.clone(),
        });
        Ok((out, cache))
    }

    /// Accumulates parameter gradients into the store and returns the
    /// gradient with respect to the layer input.
    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: Option<&DenseCache<T>>,
        grad_out: ArrayView2<'_, T>,
    ) -> Result<Array2<T>> {
        let cache = cache.ok_or(AceError::NoCache)?;
        if grad_out.dim() != cache.output.dim() {
            return Err(AceError::DimensionMismatch(format!(
                "upstream gradient {:?} vs output {:?}",
                grad_out.dim(),
                cache.output.dim()
            )));
        }
        let mut dpre = grad_out.to_owned();
        if self.activation == Activation::Relu {
            ndarray::Zip::from(&mut dpre)
                .and(&cache.output)
                .for_each(|d, &y| {
                    if y <= T::zero() {
                        *d = T::zero()
                    }
                });
        }
        let mut dx = Array2::zeros((dpre.nrows(), self.input));
        general_mat_mul(
            T::one(),
            &dpre,
            &store.matrix(self.weight),
            T::zero(),
            &mut dx,
        );
        {
            let mut dw = store.grad_matrix_mut(self.weight);
            general_mat_mul(T::one(), &dpre.t(), &cache.input, T::one(), &mut dw);
        }
        let db = dpre.sum_axis(Axis(0));
        for (g, d) in store.grad_mut(self.bias).iter_mut().zip(db.iter()) {
            *g += *d;
        }
        Ok(dx)
    }
}

/// Element-wise mean of the rows of `rows`; an empty set pools to zero.
///
/// Each coordinate is summed in ascending value order, so the result does not
/// depend on the order of the rows.
pub fn mean_pool<T: Real>(rows: ArrayView2<'_, T>) -> Array1<T> {
    let k = rows.nrows();
    let width = rows.ncols();
    match k {
        0 => Array1::zeros(width),
        1 => rows.row(0).to_owned(),
        2 => {
            let scale = T::lit(0.5);
            (&rows.row(0) + &rows.row(1)).mapv(|v| v * scale)
        }
        _ => {
            let inv = T::one() / T::lit(k as f64);
            let mut col = Vec::with_capacity(k);
            Array1::from_shape_fn(width, |c| {
                col.clear();
                col.extend(rows.column(c).iter().copied());
                col.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                col.iter().fold(T::zero(), |acc, &v| acc + v) * inv
            })
        }
    }
}

/// Gradient of [`mean_pool`]: every input row receives `grad / k`.
pub fn mean_pool_backward<T: Real>(grad: ArrayView1<'_, T>, k: usize) -> Array2<T> {
    if k == 0 {
        return Array2::zeros((0, grad.len()));
    }
    let scaled = grad.mapv(|g| g / T::lit(k as f64));
    let mut out = Array2::zeros((k, grad.len()));
    for mut row in out.rows_mut() {
        row.assign(&scaled);
    }
    out
}

/// Element-wise maximum of the rows of `rows` and, per column, the row that
/// attained it (lowest index on ties).
pub fn max_pool<T: Real>(rows: ArrayView2<'_, T>) -> (Array1<T>, Vec<usize>) {
    let width = rows.ncols();
    if rows.nrows() == 0 {
        return (Array1::zeros(width), vec![0; width]);
    }
    let mut arg = vec![0; width];
    let out = Array1::from_shape_fn(width, |c| {
        let col = rows.column(c);
        let mut best = 0;
        for r in 1..col.len() {
            if col[r] > col[best] {
                best = r;
            }
        }
        arg[c] = best;
        col[best]
    });
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::gradcheck::finite_difference_check;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(act: Activation, input: usize, output: usize) -> (ParamStore<f64>, Dense) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let d = Dense::new(&mut store, "l", input, output, act, &mut rng);
        (store, d)
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let (mut store, d) = layer(Activation::Identity, 3, 3);
        let w = store.value_mut(d.weight);
        w.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let x = array![[1.0, -2.0, 3.5], [0.0, 4.0, -1.0]];
        let (y, _) = d.forward(&store, x.view(), false).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn relu_zeroes_negative_preactivations() {
        let (mut store, d) = layer(Activation::Relu, 2, 4);
        store.value_mut(d.bias).iter_mut().for_each(|b| *b = -100.0);
        let x = random_matrix(5, 2, 1);
        let (y, _) = d.forward(&store, x.view(), false).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_triple_loop() {
        let (mut store, d) = layer(Activation::Relu, 7, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        store
            .value_mut(d.bias)
            .iter_mut()
            .for_each(|b| *b = rng.gen_range(-0.5..0.5));
        let x = random_matrix(9, 7, 2);
        let (y, _) = d.forward(&store, x.view(), false).unwrap();
        let w = store.value(d.weight);
        let b = store.value(d.bias);
        for r in 0..9 {
            for o in 0..5 {
                let mut acc = b[o];
                for i in 0..7 {
                    acc += w[o * 7 + i] * x[[r, i]];
                }
                let expect = acc.max(0.0);
                assert!((y[[r, o]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let (store, d) = layer(Activation::Relu, 3, 2);
        let x = random_matrix(2, 4, 0);
        assert!(matches!(
            d.forward(&store, x.view(), true),
            Err(AceError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn backward_without_cache_fails() {
        let (mut store, d) = layer(Activation::Relu, 3, 2);
        let g = Array2::<f64>::zeros((1, 2));
        assert!(matches!(
            d.backward(&mut store, None, g.view()),
            Err(AceError::NoCache)
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let (mut store, d) = layer(Activation::Relu, 3, 4);
        let x = random_matrix(6, 3, 3);
        let (y, cache) = d.forward(&store, x.view(), true).unwrap();
        let dx = d
            .backward(&mut store, cache.as_ref(), Array2::zeros(y.dim()).view())
            .unwrap();
        assert!(dx.iter().all(|&v| v == 0.0));
        assert!(store
            .params()
            .iter()
            .all(|p| p.grad.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn relu_passes_gradient_where_active() {
        let (mut store, d) = layer(Activation::Relu, 1, 1);
        store.value_mut(d.weight)[0] = 2.0;
        store.value_mut(d.bias)[0] = 0.5;
        let x = array![[1.0]];
        let (_, cache) = d.forward(&store, x.view(), true).unwrap();
        let dx = d
            .backward(&mut store, cache.as_ref(), array![[3.0]].view())
            .unwrap();
        assert_eq!(dx[[0, 0]], 6.0);
        assert_eq!(store.grad(d.weight)[0], 3.0);
        assert_eq!(store.grad(d.bias)[0], 3.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for act in [Activation::Relu, Activation::Identity] {
            let (mut store, d) = layer(act, 4, 3);
            let x = random_matrix(5, 4, 8);
            let coef = random_matrix(5, 3, 9);
            let loss = |s: &ParamStore<f64>| {
                let (y, _) = d.forward(s, x.view(), false).unwrap();
                (&y * &coef).sum()
            };
            store.zero_grad();
            let (_, cache) = d.forward(&store, x.view(), true).unwrap();
            d.backward(&mut store, cache.as_ref(), coef.view()).unwrap();
            let report = finite_difference_check(&mut store, 1e-5, loss);
            assert!(report.max_relative_error < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn accumulation_adds() {
        let (mut store, d) = layer(Activation::Identity, 2, 2);
        let x = random_matrix(3, 2, 5);
        let g = random_matrix(3, 2, 6);
        let (_, cache) = d.forward(&store, x.view(), true).unwrap();
        d.backward(&mut store, cache.as_ref(), g.view()).unwrap();
        let once = store.grad(d.weight).to_vec();
        d.backward(&mut store, cache.as_ref(), g.view()).unwrap();
        for (a, b) in once.iter().zip(store.grad(d.weight)) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_pool_properties() {
        let same = array![[1.5, -2.0], [1.5, -2.0], [1.5, -2.0]];
        assert_eq!(mean_pool(same.view()), array![1.5, -2.0]);
        assert_eq!(
            mean_pool(Array2::<f64>::zeros((0, 3)).view()),
            array![0.0, 0.0, 0.0]
        );

        let rows = random_matrix(5, 4, 12);
        let pooled = mean_pool(rows.view());
        let mut perm = rows.clone();
        for (dst, src) in [4usize, 2, 0, 3, 1].iter().enumerate() {
            perm.row_mut(dst).assign(&rows.row(*src));
        }
        assert_eq!(pooled, mean_pool(perm.view()));

        let g = mean_pool_backward(array![3.0, -6.0].view(), 3);
        assert_eq!(g, array![[1.0, -2.0], [1.0, -2.0], [1.0, -2.0]]);
    }
}
