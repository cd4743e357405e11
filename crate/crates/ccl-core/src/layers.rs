//! Parameterized layer primitives: dense layers, convolution blocks, and
//! their transposed-convolution mirrors, with initialization schemes and
//! layer-local gradient entry points.
//!
//! `local_grads` differentiates only through the layer's own affine map and
//! activation; the input is treated as a constant, which is what keeps every
//! update local to its layer.

use crate::conv::{
    conv2d_bias_grad, conv2d_forward, conv2d_grads, conv_transpose2d, conv_transpose2d_grads,
    maxpool2x2, maxpool2x2_backward,
};
use crate::error::{CclError, Result};
use crate::rng::Rng;
use crate::tensor::{elu, elu_derivative, tanh_derivative, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Tanh,
    None,
}

impl Activation {
    pub fn apply<T: Scalar>(&self, z: &Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Elu => z.map(elu),
            Activation::Tanh => z.map(|v| v.tanh()),
            Activation::None => z.clone(),
        }
    }

    /// σ′ evaluated at the pre-activation.
    pub fn derivative<T: Scalar>(&self, z: &Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Elu => z.map(elu_derivative),
            Activation::Tanh => z.map(tanh_derivative),
            Activation::None => Tensor::filled(z.shape(), T::one()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Elu => "elu",
            Activation::Tanh => "tanh",
            Activation::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    KaimingUniform,
    XavierUniform,
    Orthogonal,
}

/// Weight gradients of one layer.
#[derive(Debug, Clone)]
pub struct LayerGrads<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// What a layer's forward pass produces. `pre` is the pre-activation the
/// derivative is evaluated at (for pooled conv blocks, the pooled map);
/// `mask` carries pool argmax routes when present.
#[derive(Debug, Clone)]
pub struct LayerOutput<T: Scalar> {
    pub pre: Tensor<T>,
    pub act: Tensor<T>,
    pub mask: Option<Vec<u8>>,
}

/// Dense layer: `a = σ(W·x + b)` with `W: [out×in]`.
///
/// A transposed copy of the weight is cached for the forward matmul; it is
/// refreshed by `sync_transpose` after every parameter update.
#[derive(Debug, Clone)]
pub struct LinearLayer<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub activation: Activation,
    weight_t: Tensor<T>,
}

impl<T: Scalar> LinearLayer<T> {
    pub fn new(
        out_dim: usize,
        in_dim: usize,
        activation: Activation,
        scheme: InitScheme,
        rng: &mut Rng,
    ) -> Self {
        let weight = init_matrix(out_dim, in_dim, scheme, rng);
        let bias = init_bias(out_dim, in_dim, rng);
        let weight_t = weight.transposed2().expect("rank-2 weight");
        LinearLayer {
            weight,
            bias,
            activation,
            weight_t,
        }
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>, activation: Activation) -> Result<Self> {
        let (out_dim, _) = weight.dims2()?;
        if bias.len() != out_dim {
            return Err(CclError::dim("bias length must equal weight rows".into()));
        }
        let weight_t = weight.transposed2()?;
        Ok(LinearLayer {
            weight,
            bias,
            activation,
            weight_t,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn sync_transpose(&mut self) {
        self.weight_t = self.weight.transposed2().expect("rank-2 weight");
    }

    /// Returns `(z, a)` for a [B×in] input.
    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let z = input.matmul(&self.weight_t)?.add_row_bias(&self.bias)?;
        let a = self.activation.apply(&z);
        Ok((z, a))
    }

    /// Layer-local gradients: chain rule through σ and the affine map only.
    /// Returns the weight/bias gradients and dLoss/dz (useful to callers that
    /// continue a backward chain).
    pub fn local_grads(
        &self,
        input: &Tensor<T>,
        pre: &Tensor<T>,
        dloss_dact: &Tensor<T>,
    ) -> Result<(LayerGrads<T>, Tensor<T>)> {
        let dz = dloss_dact.hadamard(&self.activation.derivative(pre))?;
        let weight = dz.matmul_tn(input)?; // [out×B]·[B×in]
        let bias = dz.col_sum()?;
        Ok((LayerGrads { weight, bias }, dz))
    }

    /// dLoss/dinput given dLoss/dz — the backward-chain link used by the
    /// BP and FA baselines, never by the local rules.
    pub fn grad_input(&self, dz: &Tensor<T>) -> Result<Tensor<T>> {
        dz.matmul(&self.weight)
    }
}

/// Convolution block: 3×3 same-padding convolution, optional 2×2 max pool,
/// then activation. With a monotone activation, pooling before or after the
/// activation is equivalent; pooling first touches fewer elements.
#[derive(Debug, Clone)]
pub struct ConvBlock<T: Scalar> {
    pub kernel: Tensor<T>, // [F×C×3×3]
    pub bias: Tensor<T>,   // [F]
    pub pool: bool,
    pub activation: Activation,
}

impl<T: Scalar> ConvBlock<T> {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        pool: bool,
        activation: Activation,
        scheme: InitScheme,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_channels * 9;
        let flat = init_matrix(out_channels, fan_in, scheme, rng);
        let kernel = flat
            .reshaped(&[out_channels, in_channels, 3, 3])
            .expect("kernel reshape");
        let bias = init_bias(out_channels, fan_in, rng);
        ConvBlock {
            kernel,
            bias,
            pool,
            activation,
        }
    }

    fn add_channel_bias(&self, z: &mut Tensor<T>) {
        let (b, f, oh, ow) = (
            z.shape()[0],
            z.shape()[1],
            z.shape()[2],
            z.shape()[3],
        );
        let zd = z.data_mut();
        for bi in 0..b {
            for fi in 0..f {
                let base = (bi * f + fi) * oh * ow;
                let bv = self.bias.data()[fi];
                for p in 0..oh * ow {
                    zd[base + p] += bv;
                }
            }
        }
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<LayerOutput<T>> {
        let mut z = conv2d_forward(input, &self.kernel, 1, 1)?;
        self.add_channel_bias(&mut z);
        if self.pool {
            let (pooled, mask) = maxpool2x2(&z)?;
            let act = self.activation.apply(&pooled);
            Ok(LayerOutput {
                pre: pooled,
                act,
                mask: Some(mask),
            })
        } else {
            let act = self.activation.apply(&z);
            Ok(LayerOutput {
                pre: z,
                act,
                mask: None,
            })
        }
    }

    /// Layer-local gradients; also returns dLoss/d(conv input) for backward
    /// chains.
    pub fn grads(
        &self,
        input: &Tensor<T>,
        out: &LayerOutput<T>,
        dloss_dact: &Tensor<T>,
        need_input_grad: bool,
    ) -> Result<(LayerGrads<T>, Option<Tensor<T>>)> {
        let dpre = dloss_dact.hadamard(&self.activation.derivative(&out.pre))?;
        let conv_shape = [
            input.shape()[0],
            self.kernel.shape()[0],
            input.shape()[2],
            input.shape()[3],
        ];
        let dz = match &out.mask {
            Some(mask) => maxpool2x2_backward(&dpre, mask, &conv_shape)?,
            None => dpre,
        };
        let bias = conv2d_bias_grad(&dz)?;
        if need_input_grad {
            let (gi, gk) = conv2d_grads(input, &self.kernel, &dz, 1, 1)?;
            Ok((LayerGrads { weight: gk, bias }, Some(gi)))
        } else {
            let (_, gk) = conv2d_grads(input, &self.kernel, &dz, 1, 1)?;
            Ok((LayerGrads { weight: gk, bias }, None))
        }
    }
}

/// Mirror of a conv(+pool) block in the feedback network: a 3×3 transposed
/// convolution, stride 2 when the mirrored block pooled, so the spatial size
/// reverses exactly.
#[derive(Debug, Clone)]
pub struct FeedbackConvBlock<T: Scalar> {
    pub kernel: Tensor<T>, // [C×F×3×3]: out channels × in channels
    pub bias: Tensor<T>,   // [C]
    pub upsample: bool,
    pub activation: Activation,
}

impl<T: Scalar> FeedbackConvBlock<T> {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        upsample: bool,
        activation: Activation,
        scheme: InitScheme,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_channels * 9;
        let flat = init_matrix(out_channels, fan_in, scheme, rng);
        let kernel = flat
            .reshaped(&[out_channels, in_channels, 3, 3])
            .expect("kernel reshape");
        let bias = init_bias(out_channels, fan_in, rng);
        FeedbackConvBlock {
            kernel,
            bias,
            upsample,
            activation,
        }
    }

    fn conv_params(&self) -> (usize, usize, usize) {
        // (stride, padding, output_padding)
        if self.upsample {
            (2, 1, 1)
        } else {
            (1, 1, 0)
        }
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<LayerOutput<T>> {
        let (s, p, op) = self.conv_params();
        let mut z = conv_transpose2d(input, &self.kernel, s, p, op)?;
        // channel bias, same layout as the forward block
        let (b, f, oh, ow) = (z.shape()[0], z.shape()[1], z.shape()[2], z.shape()[3]);
        {
            let zd = z.data_mut();
            for bi in 0..b {
                for fi in 0..f {
                    let base = (bi * f + fi) * oh * ow;
                    let bv = self.bias.data()[fi];
                    for q in 0..oh * ow {
                        zd[base + q] += bv;
                    }
                }
            }
        }
        let act = self.activation.apply(&z);
        Ok(LayerOutput {
            pre: z,
            act,
            mask: None,
        })
    }

    pub fn grads(
        &self,
        input: &Tensor<T>,
        out: &LayerOutput<T>,
        dloss_dact: &Tensor<T>,
    ) -> Result<LayerGrads<T>> {
        let dz = dloss_dact.hadamard(&self.activation.derivative(&out.pre))?;
        let (s, p, op) = self.conv_params();
        let bias = conv2d_bias_grad(&dz)?;
        let (_, gk) = conv_transpose2d_grads(input, &self.kernel, &dz, s, p, op)?;
        Ok(LayerGrads { weight: gk, bias })
    }
}

/// Weight init, sampled row-major then bias, deterministic under the rng.
///
/// - kaiming: U(−√(6/fan_in), √(6/fan_in)), sample variance 2/fan_in
/// - xavier:  U(−√(6/(fan_in+fan_out)), …)
/// - orthogonal: Gram–Schmidt on a Gaussian draw; rows orthonormal when
///   out ≤ in, columns orthonormal otherwise
pub fn init_matrix<T: Scalar>(
    out_dim: usize,
    in_dim: usize,
    scheme: InitScheme,
    rng: &mut Rng,
) -> Tensor<T> {
    match scheme {
        InitScheme::KaimingUniform => {
            let b = (6.0 / in_dim as f64).sqrt();
            uniform_matrix(out_dim, in_dim, b, rng)
        }
        InitScheme::XavierUniform => {
            let b = (6.0 / (in_dim + out_dim) as f64).sqrt();
            uniform_matrix(out_dim, in_dim, b, rng)
        }
        InitScheme::Orthogonal => orthogonal_matrix(out_dim, in_dim, rng),
    }
}

fn uniform_matrix<T: Scalar>(r: usize, c: usize, bound: f64, rng: &mut Rng) -> Tensor<T> {
    let data = (0..r * c)
        .map(|_| T::from_f64(rng.uniform(-bound, bound)))
        .collect();
    Tensor::from_vec(&[r, c], data).expect("sized data")
}

fn init_bias<T: Scalar>(out_dim: usize, fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let b = 1.0 / (fan_in as f64).sqrt();
    let data = (0..out_dim)
        .map(|_| T::from_f64(rng.uniform(-b, b)))
        .collect();
    Tensor::from_vec(&[out_dim], data).expect("sized data")
}

fn orthogonal_matrix<T: Scalar>(out_dim: usize, in_dim: usize, rng: &mut Rng) -> Tensor<T> {
    // Orthonormalize along the longer axis so the result is row-orthonormal
    // when out ≤ in (W·Wᵀ = I) and column-orthonormal otherwise.
    let transpose = out_dim > in_dim;
    let (r, c) = if transpose {
        (in_dim, out_dim)
    } else {
        (out_dim, in_dim)
    };
    let mut rows: Vec<Vec<f64>> = (0..r)
        .map(|_| (0..c).map(|_| rng.normal()).collect())
        .collect();
    for i in 0..r {
        for j in 0..i {
            let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            let (head, tail) = rows.split_at_mut(i);
            for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                *a -= dot * b;
            }
        }
        let norm: f64 = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in rows[i].iter_mut() {
            *v /= norm;
        }
    }
    let mut out = Tensor::zeros(&[out_dim, in_dim]);
    for i in 0..r {
        for j in 0..c {
            let v = T::from_f64(rows[i][j]);
            if transpose {
                out.data_mut()[j * in_dim + i] = v;
            } else {
                out.data_mut()[i * in_dim + j] = v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::eye;

    fn rngt() -> Rng {
        Rng::new(99)
    }

    #[test]
    fn zero_weights_elu_gives_zero() {
        let layer = LinearLayer::from_parts(
            Tensor::<f64>::zeros(&[3, 4]),
            Tensor::zeros(&[3]),
            Activation::Elu,
        )
        .unwrap();
        let x = Tensor::from_rows(&[&[1.0, 2.0, 3.0, 4.0]]).unwrap();
        let (_, a) = layer.forward(&x).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_weight_passthrough() {
        let layer =
            LinearLayer::from_parts(eye::<f64>(4), Tensor::zeros(&[4]), Activation::None).unwrap();
        let x = Tensor::from_rows(&[&[1.0, -2.0, 3.0, -4.0]]).unwrap();
        let (_, a) = layer.forward(&x).unwrap();
        assert_eq!(a, x);
    }

    #[test]
    fn forward_matches_composition_oracle() {
        let mut rng = rngt();
        let layer = LinearLayer::<f64>::new(5, 7, Activation::Elu, InitScheme::KaimingUniform, &mut rng);
        let x = Tensor::from_vec(&[2, 7], (0..14).map(|i| i as f64 * 0.1 - 0.7).collect()).unwrap();
        let (z, a) = layer.forward(&x).unwrap();
        let want_z = x
            .matmul(&layer.weight.transposed2().unwrap())
            .unwrap()
            .add_row_bias(&layer.bias)
            .unwrap();
        assert_eq!(z, want_z);
        assert_eq!(a, want_z.map(elu));
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let mut rng = rngt();
        let layer = LinearLayer::<f64>::new(3, 4, Activation::Tanh, InitScheme::XavierUniform, &mut rng);
        let x = Tensor::from_rows(&[&[0.5, -0.5, 0.25, 1.0]]).unwrap();
        let (z, _) = layer.forward(&x).unwrap();
        let up = Tensor::zeros(&[1, 3]);
        let (g, _) = layer.local_grads(&x, &z, &up).unwrap();
        assert!(g.weight.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = rngt();
        let layer = LinearLayer::<f64>::new(6, 6, Activation::Elu, InitScheme::KaimingUniform, &mut rng);
        let x = Tensor::from_vec(&[3, 6], (0..18).map(|i| (i as f64).sin()).collect()).unwrap();
        assert_eq!(layer.forward(&x).unwrap(), layer.forward(&x).unwrap());
    }

    #[test]
    fn orthogonal_rows_orthonormal() {
        let mut rng = rngt();
        let w: Tensor<f64> = init_matrix(4, 8, InitScheme::Orthogonal, &mut rng);
        let wwt = w.matmul(&w.transposed2().unwrap()).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((wwt.at2(i, j) - want).abs() < 1e-6, "{i},{j}: {}", wwt.at2(i, j));
            }
        }
    }

    #[test]
    fn orthogonal_tall_columns_orthonormal() {
        let mut rng = rngt();
        let w: Tensor<f64> = init_matrix(8, 3, InitScheme::Orthogonal, &mut rng);
        let wtw = w.transposed2().unwrap().matmul(&w).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((wtw.at2(i, j) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a: Tensor<f64> = init_matrix(5, 5, InitScheme::KaimingUniform, &mut Rng::new(7));
        let b: Tensor<f64> = init_matrix(5, 5, InitScheme::KaimingUniform, &mut Rng::new(7));
        assert_eq!(a, b);
    }

    #[test]
    fn kaiming_variance_near_two_over_fan_in() {
        let mut rng = rngt();
        let w: Tensor<f64> = init_matrix(256, 256, InitScheme::KaimingUniform, &mut rng);
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let want = 2.0 / 256.0;
        assert!(
            (var - want).abs() < 0.2 * want,
            "variance {var} vs expected {want}"
        );
    }

    #[test]
    fn conv_block_shapes() {
        let mut rng = rngt();
        let block = ConvBlock::<f64>::new(8, 3, true, Activation::Elu, InitScheme::KaimingUniform, &mut rng);
        let x = Tensor::zeros(&[2, 3, 8, 8]);
        let out = block.forward(&x).unwrap();
        assert_eq!(out.act.shape(), &[2, 8, 4, 4]);
        assert!(out.mask.is_some());
    }

    #[test]
    fn feedback_block_mirrors_spatial() {
        let mut rng = rngt();
        let block = FeedbackConvBlock::<f64>::new(
            3,
            8,
            true,
            Activation::Elu,
            InitScheme::KaimingUniform,
            &mut rng,
        );
        let x = Tensor::zeros(&[2, 8, 4, 4]);
        let out = block.forward(&x).unwrap();
        assert_eq!(out.act.shape(), &[2, 3, 8, 8]);
    }
}
