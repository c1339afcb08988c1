//! View-dependent color head: positional encoding followed by a small
//! fully-connected network with ReLU hidden layers and a sigmoid output.
//!
//! The head runs over a batch of samples at once. [`ColorHead::forward`]
//! returns a [`HeadTape`] holding every activation, which
//! [`ColorHead::backward`] consumes to produce feature gradients and to
//! accumulate weight gradients into the parameter store.

use ndarray::{linalg::general_mat_mul, s, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::optim::{ParamGroup, ParamId, ParamStore};

/// Appends `v`, then `sin(2^k v)` and `cos(2^k v)` for `k = 0..freqs`.
pub fn positional_encode(v: &[f64], freqs: usize, out: &mut Vec<f64>) {
    out.extend_from_slice(v);
    let mut scale = 1.0;
    for _ in 0..freqs {
        out.extend(v.iter().map(|x| (scale * x).sin()));
        out.extend(v.iter().map(|x| (scale * x).cos()));
        scale *= 2.0;
    }
}

pub fn encoded_len(dim: usize, freqs: usize) -> usize {
    dim * (1 + 2 * freqs)
}

fn encode_into(v: &Vec3, freqs: usize, out: &mut [f64]) {
    out[..3].copy_from_slice(v.as_slice());
    // Octave frequencies follow from the double-angle identities.
    let mut sc = [v[0].sin_cos(), v[1].sin_cos(), v[2].sin_cos()];
    let mut k = 3;
    for _ in 0..freqs {
        for (i, (s, c)) in sc.iter_mut().enumerate() {
            out[k + i] = *s;
            out[k + 3 + i] = *c;
            (*s, *c) = (2.0 * *s * *c, (*c - *s) * (*c + *s));
        }
        k += 6;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadConfig {
    pub feature_dim: usize,
    pub pe_freqs_x: usize,
    pub pe_freqs_d: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            feature_dim: 12,
            pe_freqs_x: 5,
            pe_freqs_d: 4,
            hidden_width: 64,
            hidden_layers: 2,
        }
    }
}

impl HeadConfig {
    pub fn input_dim(&self) -> usize {
        self.feature_dim + encoded_len(3, self.pe_freqs_x) + encoded_len(3, self.pe_freqs_d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Color network shared by every field of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorHead {
    pub config: HeadConfig,
    pub layers: Vec<Linear>,
}

/// Activations recorded by a forward pass.
#[derive(Clone, Debug)]
pub struct HeadTape {
    pub input: Array2<f64>,
    hidden: Vec<Array2<f64>>,
    pub rgb: Array2<f64>,
}

impl HeadTape {
    pub fn len(&self) -> usize {
        self.rgb.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn color(&self, row: usize) -> [f64; 3] {
        [self.rgb[[row, 0]], self.rgb[[row, 1]], self.rgb[[row, 2]]]
    }
}

impl ColorHead {
    /// Registers the layer tensors under `prefix` with uniform fan-in scaled
    /// weights and zero biases.
    pub fn new(
        config: HeadConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.hidden_width == 0 && config.hidden_layers > 0 {
            return Err(Error::Config("hidden_width must be positive".into()));
        }
        let mut dims = vec![config.input_dim()];
        dims.extend(std::iter::repeat_n(config.hidden_width, config.hidden_layers));
        dims.push(3);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (k, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let weights: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let weight = store.register(
                format!("{prefix}.layer{k}.weight"),
                ParamGroup::Head,
                vec![fan_out, fan_in],
                weights,
            )?;
            let bias = store.register(
                format!("{prefix}.layer{k}.bias"),
                ParamGroup::Head,
                vec![fan_out],
                vec![0.0; fan_out],
            )?;
            layers.push(Linear {
                weight,
                bias,
                fan_in,
                fan_out,
            });
        }
        Ok(ColorHead { config, layers })
    }

    /// Rebinds a head to tensors already present in a store.
    pub fn from_store(config: HeadConfig, store: &ParamStore, prefix: &str) -> Result<Self> {
        let mut layers = Vec::new();
        for k in 0..=config.hidden_layers {
            let find = |suffix: &str| {
                store
                    .find(&format!("{prefix}.layer{k}.{suffix}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {prefix}.layer{k}.{suffix}")))
            };
            let weight = find("weight")?;
            let bias = find("bias")?;
            let shape = &store.param(weight).shape;
            if shape.len() != 2 {
                return Err(Error::Shape(format!("layer {k} weight must be 2-D")));
            }
            layers.push(Linear {
                weight,
                bias,
                fan_in: shape[1],
                fan_out: shape[0],
            });
        }
        let head = ColorHead { config, layers };
        head.validate(store)?;
        Ok(head)
    }

    fn validate(&self, store: &ParamStore) -> Result<()> {
        let mut expected_in = self.config.input_dim();
        for (k, l) in self.layers.iter().enumerate() {
            if l.fan_in != expected_in || store.param(l.bias).values.len() != l.fan_out {
                return Err(Error::Shape(format!("color head layer {k} does not chain")));
            }
            expected_in = l.fan_out;
        }
        if expected_in != 3 {
            return Err(Error::Shape("color head must output 3 channels".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim()
    }

    /// Writes one input row: feature, encoded position, encoded direction.
    pub fn encode(&self, feature: &[f64], position: &Vec3, direction: &Vec3, row: &mut [f64]) {
        row[..self.config.feature_dim].copy_from_slice(feature);
        self.encode_geometry(position, direction, row);
    }

    /// Fills only the encoded position and direction of an input row.
    pub fn encode_geometry(&self, position: &Vec3, direction: &Vec3, row: &mut [f64]) {
        let d = self.config.feature_dim;
        let px = encoded_len(3, self.config.pe_freqs_x);
        encode_into(position, self.config.pe_freqs_x, &mut row[d..d + px]);
        encode_into(direction, self.config.pe_freqs_d, &mut row[d + px..]);
    }

    fn weight<'a>(&self, store: &'a ParamStore, l: &Linear) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((l.fan_out, l.fan_in), store.values(l.weight)).expect("weight shape")
    }

    pub fn forward(&self, store: &ParamStore, input: Array2<f64>) -> Result<HeadTape> {
        if input.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "color head expects {} inputs, got {}",
                self.input_dim(),
                input.ncols()
            )));
        }
        let mut hidden: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len() - 1);
        let mut rgb = None;
        for (k, l) in self.layers.iter().enumerate() {
            let x = if k == 0 { input.view() } else { hidden[k - 1].view() };
            let mut z = Array2::zeros((x.nrows(), l.fan_out));
            general_mat_mul(1.0, &x, &self.weight(store, l).t(), 0.0, &mut z);
            let bias = store.values(l.bias);
            let last = k + 1 == self.layers.len();
            for mut row in z.rows_mut() {
                for (v, b) in row.iter_mut().zip(bias) {
                    let pre = *v + b;
                    *v = if last { sigmoid(pre) } else { pre.max(0.0) };
                }
            }
            if last {
                rgb = Some(z);
            } else {
                hidden.push(z);
            }
        }
        Ok(HeadTape {
            input,
            hidden,
            rgb: rgb.expect("head has an output layer"),
        })
    }

    /// Reverse pass. Adds weight and bias gradients into the store (when
    /// `accumulate_params` is set) and returns the gradient with respect to
    /// the feature columns of the input.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        tape: &HeadTape,
        d_rgb: ArrayView2<f64>,
        accumulate_params: bool,
    ) -> Result<Array2<f64>> {
        if d_rgb.dim() != tape.rgb.dim() {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match head output {:?}",
                d_rgb.dim(),
                tape.rgb.dim()
            )));
        }
        let mut dz = &d_rgb * &tape.rgb.mapv(|o| o * (1.0 - o));
        for k in (0..self.layers.len()).rev() {
            let l = self.layers[k];
            let x = if k == 0 { tape.input.view() } else { tape.hidden[k - 1].view() };
            if accumulate_params {
                let mut gw = ArrayViewMut2::from_shape((l.fan_out, l.fan_in), store.grad_mut(l.weight))
                    .expect("weight shape");
                general_mat_mul(1.0, &dz.t(), &x, 1.0, &mut gw);
                let gb = store.grad_mut(l.bias);
                for (g, s) in gb.iter_mut().zip(dz.sum_axis(Axis(0))) {
                    *g += s;
                }
            }
            let w = self.weight(store, &l);
            if k == 0 {
                let d = self.config.feature_dim;
                let mut dx = Array2::zeros((dz.nrows(), d));
                general_mat_mul(1.0, &dz, &w.slice(s![.., ..d]), 0.0, &mut dx);
                return Ok(dx);
            }
            let mut dh = Array2::zeros((dz.nrows(), l.fan_in));
            general_mat_mul(1.0, &dz, &w, 0.0, &mut dh);
            dh.zip_mut_with(&tape.hidden[k - 1], |g, &h| {
                if h <= 0.0 {
                    *g = 0.0
                }
            });
            dz = dh;
        }
        unreachable!("head has at least one layer")
    }

    /// Convenience single-sample evaluation.
    pub fn color(&self, store: &ParamStore, feature: &[f64], position: &Vec3, direction: &Vec3) -> Result<[f64; 3]> {
        if feature.len() != self.config.feature_dim {
            return Err(Error::Shape(format!(
                "feature has {} channels, head expects {}",
                feature.len(),
                self.config.feature_dim
            )));
        }
        let mut input = Array2::zeros((1, self.input_dim()));
        self.encode(feature, position, direction, input.row_mut(0).as_slice_mut().unwrap());
        Ok(self.forward(store, input)?.color(0))
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn small_head(seed: u64) -> (ColorHead, ParamStore) {
        let mut store = ParamStore::new();
        let cfg = HeadConfig {
            feature_dim: 5,
            pe_freqs_x: 2,
            pe_freqs_d: 1,
            hidden_width: 16,
            hidden_layers: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = ColorHead::new(cfg, &mut store, "head", &mut rng).unwrap();
        // Nonzero biases so every path in the network is exercised.
        for l in &head.layers {
            for b in store.values_mut(l.bias) {
                *b = rng.random_range(-0.5..0.5);
            }
        }
        (head, store)
    }

    fn random_input(head: &ColorHead, n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut input = Array2::zeros((n, head.input_dim()));
        for mut row in input.rows_mut() {
            let f: Vec<f64> = (0..head.config.feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let d = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
            head.encode(&f, &p, &d, row.as_slice_mut().unwrap());
        }
        input
    }

    #[test]
    fn encoding_examples() {
        let mut out = Vec::new();
        positional_encode(&[0.3, -0.2], 0, &mut out);
        assert_eq!(out, vec![0.3, -0.2]);
        out.clear();
        positional_encode(&[0.0, 0.0], 2, &mut out);
        assert_eq!(out, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        out.clear();
        positional_encode(&[PI], 1, &mut out);
        assert_eq!(out[0], PI);
        assert!(out[1].abs() < 1e-15);
        assert_eq!(out[2], -1.0);
        for freqs in 0..6 {
            out.clear();
            positional_encode(&[1.0, 2.0, 3.0], freqs, &mut out);
            assert_eq!(out.len(), encoded_len(3, freqs));
        }
    }

    #[test]
    fn row_encoding_matches_positional_encode() {
        let (head, _) = small_head(1);
        let f = [0.1, 0.2, 0.3, 0.4, 0.5];
        let p = Vec3::new(0.3, -0.7, 0.9);
        let d = Vec3::new(0.0, 0.6, -0.8);
        let mut row = vec![0.0; head.input_dim()];
        head.encode(&f, &p, &d, &mut row);
        let mut expected = f.to_vec();
        positional_encode(p.as_slice(), 2, &mut expected);
        positional_encode(d.as_slice(), 1, &mut expected);
        for (a, b) in row.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn zero_weights_give_mid_gray() {
        let (head, mut store) = small_head(2);
        for p in store.params_mut() {
            p.values.fill(0.0);
        }
        let input = random_input(&head, 4, 3);
        let tape = head.forward(&store, input).unwrap();
        assert!(tape.rgb.iter().all(|&c| c == 0.5));
    }

    #[test]
    fn zero_first_layer_ignores_inputs() {
        let (head, mut store) = small_head(4);
        store.values_mut(head.layers[0].weight).fill(0.0);
        let a = head.forward(&store, random_input(&head, 3, 5)).unwrap();
        let b = head.forward(&store, random_input(&head, 3, 6)).unwrap();
        assert_eq!(a.rgb, b.rgb);
        assert!(a.rgb.iter().all(|&c| c > 0.0 && c < 1.0));
    }

    #[test]
    fn shape_errors() {
        let (head, mut store) = small_head(5);
        assert!(head.forward(&store, Array2::zeros((2, 3))).is_err());
        let tape = head.forward(&store, random_input(&head, 2, 1)).unwrap();
        assert!(head.backward(&mut store, &tape, Array2::zeros((3, 3)).view(), true).is_err());
        assert!(head.color(&store, &[0.0; 2], &Vec3::zeros(), &Vec3::z()).is_err());
    }

    /// Weighted sum of outputs as a scalar objective.
    fn objective(head: &ColorHead, store: &ParamStore, input: &Array2<f64>, up: &Array2<f64>) -> f64 {
        let tape = head.forward(store, input.clone()).unwrap();
        (&tape.rgb * up).sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let (head, mut store) = small_head(10 + seed);
            let input = random_input(&head, 6, 20 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(30 + seed);
            let up = Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));
            let tape = head.forward(&store, input.clone()).unwrap();
            let d_feat = head.backward(&mut store, &tape, up.view(), true).unwrap();

            for l in head.layers.clone() {
                for id in [l.weight, l.bias] {
                    let x = store.values(id).to_vec();
                    let analytic = store.grad(id).to_vec();
                    let mut probe = store.clone();
                    let report = grad_check(
                        |v| {
                            probe.values_mut(id).copy_from_slice(v);
                            objective(&head, &probe, &input, &up)
                        },
                        &x,
                        &analytic,
                        &[],
                        1e-6,
                        1e-5,
                        1e-6,
                    );
                    assert!(report.passed(), "{report}");
                }
            }

            let d = head.config.feature_dim;
            for r in 0..6 {
                let x: Vec<f64> = input.row(r).slice(s![..d]).to_vec();
                let analytic = d_feat.row(r).to_vec();
                let report = grad_check(
                    |v| {
                        let mut inp = input.clone();
                        inp.row_mut(r).slice_mut(s![..d]).assign(&ndarray::ArrayView1::from(v));
                        objective(&head, &store, &inp, &up)
                    },
                    &x,
                    &analytic,
                    &[],
                    1e-6,
                    1e-5,
                    1e-6,
                );
                assert!(report.passed(), "{report}");
            }
        }
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let (head, store) = small_head(7);
        let input = random_input(&head, 5, 8);
        let tape = head.forward(&store, input).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let up = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));

        let mut s0 = store.clone();
        let zero = head.backward(&mut s0, &tape, Array2::zeros((5, 3)).view(), true).unwrap();
        assert!(zero.iter().all(|&g| g == 0.0));
        assert!(s0.params().iter().all(|p| p.grad.iter().all(|&g| g == 0.0)));

        let mut s1 = store.clone();
        let g1 = head.backward(&mut s1, &tape, up.view(), true).unwrap();
        let mut s2 = store.clone();
        let g2 = head.backward(&mut s2, &tape, (&up * 2.5).view(), true).unwrap();
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert!((2.5 * a - b).abs() < 1e-12);
        }
        for (p1, p2) in s1.params().iter().zip(s2.params()) {
            for (a, b) in p1.grad.iter().zip(&p2.grad) {
                assert!((2.5 * a - b).abs() < 1e-12);
            }
        }
    }
}
