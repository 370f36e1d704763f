//! Non-local attention block with analytic forward and backward passes.
//!
//! The block projects a C×H×W map into query/key/value spaces with 1×1
//! (per-location) linear maps, forms an HW×HW attention matrix whose columns
//! sum to one, aggregates the value projection through it, then applies one
//! more 1×1 projection followed by per-channel standardization scaled by
//! `gamma` and shifted by `beta`. The result is added back onto the input,
//! and because `gamma` and `beta` start at zero the block is an exact
//! identity at initialization.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};

/// Epsilon inside the standardization square root.
pub const NORM_EPSILON: f64 = 1e-5;

/// Default channel-reduction ratio for the query/key projections.
pub const DEFAULT_REDUCTION: usize = 8;

/// Reduced channel count C' for a given C and reduction ratio.
pub fn reduced_channels(channels: usize, reduction: usize) -> usize {
    (channels / reduction).max(1)
}

/// Weights of one non-local block.
///
/// `wf`/`wg` are C'×C query/key projections, `wh`/`wk` are C×C value and
/// output projections (all bias-free), and `gamma`/`beta` scale and shift
/// the standardized output per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct NonLocalParams {
    pub wf: Tensor,
    pub wg: Tensor,
    pub wh: Tensor,
    pub wk: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    reduction: usize,
}

impl NonLocalParams {
    /// Fresh block: projections uniform in ±1/√C, `gamma` and `beta` zero.
    pub fn init(channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        if channels == 0 || reduction == 0 {
            return Err(Error::invalid("channels and reduction must be positive"));
        }
        let reduced = reduced_channels(channels, reduction);
        let scale = 1.0 / (channels as f64).sqrt();
        let mut uniform = |shape: &[usize]| -> Result<Tensor> {
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| rng.gen_range(-scale..scale)).collect();
            Tensor::new(shape, data)
        };
        Ok(NonLocalParams {
            wf: uniform(&[reduced, channels])?,
            wg: uniform(&[reduced, channels])?,
            wh: uniform(&[channels, channels])?,
            wk: uniform(&[channels, channels])?,
            gamma: Tensor::zeros(&[channels])?,
            beta: Tensor::zeros(&[channels])?,
            reduction,
        })
    }

    /// All-zero block of the right shapes (mostly useful in tests).
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        let reduced = reduced_channels(channels, reduction);
        Ok(NonLocalParams {
            wf: Tensor::zeros(&[reduced, channels])?,
            wg: Tensor::zeros(&[reduced, channels])?,
            wh: Tensor::zeros(&[channels, channels])?,
            wk: Tensor::zeros(&[channels, channels])?,
            gamma: Tensor::zeros(&[channels])?,
            beta: Tensor::zeros(&[channels])?,
            reduction,
        })
    }

    /// Assemble from explicit tensors, checking shape consistency.
    pub fn from_parts(
        wf: Tensor,
        wg: Tensor,
        wh: Tensor,
        wk: Tensor,
        gamma: Tensor,
        beta: Tensor,
        reduction: usize,
    ) -> Result<Self> {
        let channels = gamma.shape()[0];
        let reduced = reduced_channels(channels, reduction);
        let expect = |name: &str, t: &Tensor, shape: &[usize]| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::shape(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(())
        };
        expect("wf", &wf, &[reduced, channels])?;
        expect("wg", &wg, &[reduced, channels])?;
        expect("wh", &wh, &[channels, channels])?;
        expect("wk", &wk, &[channels, channels])?;
        expect("gamma", &gamma, &[channels])?;
        expect("beta", &beta, &[channels])?;
        Ok(NonLocalParams {
            wf,
            wg,
            wh,
            wk,
            gamma,
            beta,
            reduction,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape()[0]
    }

    pub fn reduced_channels(&self) -> usize {
        self.wf.shape()[0]
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }
}

/// Gradients for every tensor in [`NonLocalParams`].
#[derive(Debug, Clone)]
pub struct NonLocalGrads {
    pub wf: Tensor,
    pub wg: Tensor,
    pub wh: Tensor,
    pub wk: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Intermediates of one forward pass, kept for the backward pass.
///
/// The attention matrix is cached transposed (`alpha_t[j][i]` = weight of
/// input location i on output location j) so that the softmax rows and the
/// backward products all walk contiguous memory.
#[derive(Debug, Clone)]
pub struct NonLocalCache {
    x_flat: Tensor,      // C × HW
    f_flat: Tensor,      // C' × HW
    g_flat: Tensor,      // C' × HW
    h_flat: Tensor,      // C × HW
    alpha_t: Tensor,     // HW × HW, rows sum to 1
    aggregated: Tensor,  // C × HW, value projection pushed through alpha
    normalized: Tensor,  // C × HW, standardized output projection
    inv_std: Vec<f64>,   // per-channel 1/sqrt(var + eps)
    spatial: (usize, usize),
}

fn check_input(x: &Tensor, params: &NonLocalParams) -> Result<(usize, usize, usize)> {
    if x.rank() != 3 {
        return Err(Error::shape(format!(
            "non-local input must be C x H x W, got {:?}",
            x.shape()
        )));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if c != params.channels() {
        return Err(Error::shape(format!(
            "input has {c} channels, block expects {}",
            params.channels()
        )));
    }
    Ok((c, h, w))
}

/// Row-wise softmax of a square matrix (applied to the transposed scores,
/// this realizes the softmax over the first index of the score matrix).
fn row_softmax(scores: &Tensor) -> Tensor {
    let n = scores.shape()[0];
    let mut out = scores.data().to_vec();
    for row in out.chunks_exact_mut(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(&[n, n], out).expect("square matrix")
}

/// Transposed attention: alpha_t = row_softmax(g_flatᵀ · f_flat), so row j
/// holds the incoming weights of output location j.
fn attention_transposed(f_flat: &Tensor, g_flat: &Tensor) -> Result<Tensor> {
    let scores_t = matmul(&g_flat.transposed2()?, f_flat)?;
    Ok(row_softmax(&scores_t))
}

fn project(x: &Tensor, params: &NonLocalParams) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let (c, h, w) = check_input(x, params)?;
    let x_flat = x.reshaped(&[c, h * w])?;
    let f_flat = matmul(&params.wf, &x_flat)?;
    let g_flat = matmul(&params.wg, &x_flat)?;
    let h_flat = matmul(&params.wh, &x_flat)?;
    Ok((x_flat, f_flat, g_flat, h_flat))
}

/// Attention matrix alone: softmax over the first index of fᵀg, so every
/// column sums to 1.
pub fn attention_matrix(x: &Tensor, params: &NonLocalParams) -> Result<Tensor> {
    let (_, f_flat, g_flat, _) = project(x, params)?;
    attention_transposed(&f_flat, &g_flat)?.transposed2()
}

/// Full forward pass: y = standardize(wk · (wh·x ⊗ α)) · γ + β + x.
pub fn nl_forward(x: &Tensor, params: &NonLocalParams) -> Result<(Tensor, NonLocalCache)> {
    let (c, h, w) = check_input(x, params)?;
    let locations = h * w;
    let (x_flat, f_flat, g_flat, h_flat) = project(x, params)?;
    let alpha_t = attention_transposed(&f_flat, &g_flat)?;
    let aggregated = matmul(&h_flat, &alpha_t.transposed2()?)?;
    let projected = matmul(&params.wk, &aggregated)?;

    // Per-channel standardization over the spatial positions.
    let mut normalized = vec![0.0; c * locations];
    let mut inv_std = Vec::with_capacity(c);
    let proj = projected.data();
    for ch in 0..c {
        let row = &proj[ch * locations..(ch + 1) * locations];
        let mean = row.iter().sum::<f64>() / locations as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / locations as f64;
        let istd = 1.0 / (var + NORM_EPSILON).sqrt();
        inv_std.push(istd);
        for (l, &v) in row.iter().enumerate() {
            normalized[ch * locations + l] = (v - mean) * istd;
        }
    }

    let gamma = params.gamma.data();
    let beta = params.beta.data();
    let mut y = vec![0.0; c * locations];
    for ch in 0..c {
        for l in 0..locations {
            let idx = ch * locations + l;
            y[idx] = gamma[ch] * normalized[idx] + beta[ch] + x_flat.data()[idx];
        }
    }

    let cache = NonLocalCache {
        x_flat,
        f_flat,
        g_flat,
        h_flat,
        alpha_t,
        aggregated,
        normalized: Tensor::new(&[c, locations], normalized)?,
        inv_std,
        spatial: (h, w),
    };
    Ok((Tensor::new(&[c, h, w], y)?, cache))
}

/// Analytic gradients of the forward map w.r.t. the input and every
/// parameter tensor.
pub fn nl_backward(
    params: &NonLocalParams,
    cache: &NonLocalCache,
    dy: &Tensor,
) -> Result<(Tensor, NonLocalGrads)> {
    let (h, w) = cache.spatial;
    let c = params.channels();
    let locations = h * w;
    if dy.shape() != [c, h, w] {
        return Err(Error::shape(format!(
            "dy has shape {:?}, cache expects {:?}",
            dy.shape(),
            [c, h, w]
        )));
    }
    let dz = dy.reshaped(&[c, locations])?;
    let dz_data = dz.data();
    let n_data = cache.normalized.data();
    let gamma = params.gamma.data();

    // Scale/shift backward.
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut dnorm = vec![0.0; c * locations];
    for ch in 0..c {
        for l in 0..locations {
            let idx = ch * locations + l;
            dgamma[ch] += dz_data[idx] * n_data[idx];
            dbeta[ch] += dz_data[idx];
            dnorm[idx] = dz_data[idx] * gamma[ch];
        }
    }

    // Standardization backward per channel:
    // dt = inv_std * (dn − mean(dn) − n · mean(dn ⊙ n)).
    let mut dproj = vec![0.0; c * locations];
    for ch in 0..c {
        let base = ch * locations;
        let mut mean_dn = 0.0;
        let mut mean_dn_n = 0.0;
        for l in 0..locations {
            mean_dn += dnorm[base + l];
            mean_dn_n += dnorm[base + l] * n_data[base + l];
        }
        mean_dn /= locations as f64;
        mean_dn_n /= locations as f64;
        let istd = cache.inv_std[ch];
        for l in 0..locations {
            dproj[base + l] =
                istd * (dnorm[base + l] - mean_dn - n_data[base + l] * mean_dn_n);
        }
    }
    let dproj = Tensor::new(&[c, locations], dproj)?;

    // Output projection and attention aggregation backward.
    let dwk = matmul(&dproj, &cache.aggregated.transposed2()?)?;
    let daggregated = matmul(&params.wk.transposed2()?, &dproj)?;
    // dh[c][i] = sum_j dagg[c][j] alpha[i][j]; alpha_t already is alpha
    // transposed, so this is a plain product.
    let dh_flat = matmul(&daggregated, &cache.alpha_t)?;
    let dalpha_t = matmul(&daggregated.transposed2()?, &cache.h_flat)?;

    // Softmax backward, one contiguous row of alpha_t at a time.
    let alpha_t = cache.alpha_t.data();
    let dalpha_data = dalpha_t.data();
    let mut dscores_t = vec![0.0; locations * locations];
    for j in 0..locations {
        let row = &alpha_t[j * locations..(j + 1) * locations];
        let drow = &dalpha_data[j * locations..(j + 1) * locations];
        let dot: f64 = row.iter().zip(drow).map(|(a, d)| a * d).sum();
        let out = &mut dscores_t[j * locations..(j + 1) * locations];
        for ((o, &a), &d) in out.iter_mut().zip(row).zip(drow) {
            *o = a * (d - dot);
        }
    }
    let dscores_t = Tensor::new(&[locations, locations], dscores_t)?;

    // scores = f_flatᵀ · g_flat, with dscores_t holding the transposed
    // score gradients.
    let df_flat = matmul(&cache.g_flat, &dscores_t)?;
    let dg_flat = matmul(&cache.f_flat, &dscores_t.transposed2()?)?;

    let x_flat_t = cache.x_flat.transposed2()?;
    let dwf = matmul(&df_flat, &x_flat_t)?;
    let dwg = matmul(&dg_flat, &x_flat_t)?;
    let dwh = matmul(&dh_flat, &x_flat_t)?;

    let mut dx_flat = matmul(&params.wf.transposed2()?, &df_flat)?;
    dx_flat = dx_flat.add(&matmul(&params.wg.transposed2()?, &dg_flat)?)?;
    dx_flat = dx_flat.add(&matmul(&params.wh.transposed2()?, &dh_flat)?)?;
    // Residual path.
    dx_flat = dx_flat.add(&dz)?;

    Ok((
        dx_flat.reshaped(&[c, h, w])?,
        NonLocalGrads {
            wf: dwf,
            wg: dwg,
            wh: dwh,
            wk: dwk,
            gamma: Tensor::new(&[c], dgamma)?,
            beta: Tensor::new(&[c], dbeta)?,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_relative_error, FD_STEP, GRAD_TOLERANCE};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_tensor(shape: &[usize], rng: &mut StdRng) -> Tensor {
        let len: usize = shape.iter().product();
        let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    fn random_params(channels: usize, rng: &mut StdRng) -> NonLocalParams {
        let mut p = NonLocalParams::init(channels, DEFAULT_REDUCTION, rng).unwrap();
        // Randomize gamma/beta so the normalization path carries gradient.
        p.gamma = random_tensor(&[channels], rng);
        p.beta = random_tensor(&[channels], rng);
        p
    }

    #[test]
    fn zero_projections_give_uniform_attention() {
        let mut rng = StdRng::seed_from_u64(1);
        let mut params = NonLocalParams::init(4, 2, &mut rng).unwrap();
        params.wf = Tensor::zeros(params.wf.shape()).unwrap();
        params.wg = Tensor::zeros(params.wg.shape()).unwrap();
        let x = random_tensor(&[4, 3, 3], &mut rng);
        let alpha = attention_matrix(&x, &params).unwrap();
        for &v in alpha.data() {
            assert!((v - 1.0 / 9.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn attention_columns_sum_to_one() {
        let mut rng = StdRng::seed_from_u64(2);
        let params = random_params(8, &mut rng);
        let x = random_tensor(&[8, 4, 5], &mut rng);
        let alpha = attention_matrix(&x, &params).unwrap();
        let n = alpha.shape()[0];
        for j in 0..n {
            let sum: f64 = (0..n).map(|i| alpha.at2(i, j)).sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_location_attention_is_one() {
        let mut rng = StdRng::seed_from_u64(3);
        let params = random_params(2, &mut rng);
        let x = random_tensor(&[2, 1, 1], &mut rng);
        let alpha = attention_matrix(&x, &params).unwrap();
        assert_eq!(alpha.shape(), &[1, 1]);
        assert!((alpha.data()[0] - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn identity_at_initialization() {
        let mut rng = StdRng::seed_from_u64(4);
        let params = NonLocalParams::init(8, 8, &mut rng).unwrap();
        let x = random_tensor(&[8, 5, 4], &mut rng);
        let (y, _) = nl_forward(&x, &params).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_location_forward_hand_evaluation() {
        // With H = W = 1 the attention is [[1]] and the standardized value
        // is exactly zero, so y = beta + x channel-wise.
        let mut rng = StdRng::seed_from_u64(5);
        let mut params = random_params(2, &mut rng);
        params.beta = Tensor::new(&[2], vec![0.7, -0.2]).unwrap();
        let x = Tensor::new(&[2, 1, 1], vec![1.5, -2.5]).unwrap();
        let (y, _) = nl_forward(&x, &params).unwrap();
        assert!((y.data()[0] - (1.5 + 0.7)).abs() <= 1e-12);
        assert!((y.data()[1] - (-2.5 - 0.2)).abs() <= 1e-12);
    }

    #[test]
    fn spatial_permutation_equivariance() {
        let mut rng = StdRng::seed_from_u64(6);
        let params = random_params(8, &mut rng);
        let (h, w) = (4, 3);
        let x = random_tensor(&[8, h, w], &mut rng);
        let (y, _) = nl_forward(&x, &params).unwrap();

        // Random permutation of the HW locations.
        let n = h * w;
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let permute = |t: &Tensor| -> Tensor {
            let mut out = vec![0.0; 8 * n];
            for c in 0..8 {
                for l in 0..n {
                    out[c * n + perm[l]] = t.data()[c * n + l];
                }
            }
            Tensor::new(&[8, h, w], out).unwrap()
        };
        let (y_perm, _) = nl_forward(&permute(&x), &params).unwrap();
        let expected = permute(&y);
        for (a, b) in y_perm.data().iter().zip(expected.data()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = StdRng::seed_from_u64(7);
        let params = random_params(4, &mut rng);
        let x = random_tensor(&[4, 3, 3], &mut rng);
        let (_, cache) = nl_forward(&x, &params).unwrap();
        let dy = Tensor::zeros(&[4, 3, 3]).unwrap();
        let (dx, grads) = nl_backward(&params, &cache, &dy).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        for t in [&grads.wf, &grads.wg, &grads.wh, &grads.wk, &grads.gamma, &grads.beta] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_gamma_passes_dy_through_and_still_feeds_gamma() {
        let mut rng = StdRng::seed_from_u64(8);
        let params = NonLocalParams::init(4, 2, &mut rng).unwrap();
        let x = random_tensor(&[4, 3, 3], &mut rng);
        let (_, cache) = nl_forward(&x, &params).unwrap();
        let dy = random_tensor(&[4, 3, 3], &mut rng);
        let (dx, grads) = nl_backward(&params, &cache, &dy).unwrap();
        for (a, b) in dx.data().iter().zip(dy.data()) {
            assert!((a - b).abs() <= 1e-15);
        }
        assert!(grads.gamma.data().iter().any(|&v| v.abs() > 1e-6));
    }

    #[test]
    fn backward_rejects_mismatched_dy() {
        let mut rng = StdRng::seed_from_u64(9);
        let params = random_params(4, &mut rng);
        let x = random_tensor(&[4, 3, 3], &mut rng);
        let (_, cache) = nl_forward(&x, &params).unwrap();
        let dy = Tensor::zeros(&[4, 2, 2]).unwrap();
        assert!(nl_backward(&params, &cache, &dy).is_err());
    }

    #[test]
    fn forward_rejects_channel_mismatch() {
        let mut rng = StdRng::seed_from_u64(10);
        let params = random_params(4, &mut rng);
        let x = random_tensor(&[5, 3, 3], &mut rng);
        assert!(nl_forward(&x, &params).is_err());
        assert!(attention_matrix(&x, &params).is_err());
    }

    /// Loss = Σ probe ⊙ y, so dy = probe and the numeric check exercises
    /// the whole forward map.
    #[test]
    fn gradients_match_central_differences() {
        let (c, h, w) = (4, 5, 5);
        let mut rng = StdRng::seed_from_u64(11);
        let params = random_params(c, &mut rng);
        let x = random_tensor(&[c, h, w], &mut rng);
        let probe = random_tensor(&[c, h, w], &mut rng);

        let loss = |p: &NonLocalParams, input: &Tensor| -> f64 {
            let (y, _) = nl_forward(input, p).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };

        let (_, cache) = nl_forward(&x, &params).unwrap();
        let (dx, grads) = nl_backward(&params, &cache, &probe).unwrap();

        let check = |name: &str, analytic: &Tensor, write: &mut dyn FnMut(&mut NonLocalParams) -> &mut Tensor| {
            let mut numeric = Vec::with_capacity(analytic.len());
            for idx in 0..analytic.len() {
                let mut plus = params.clone();
                write(&mut plus).data_mut()[idx] += FD_STEP;
                let mut minus = params.clone();
                write(&mut minus).data_mut()[idx] -= FD_STEP;
                numeric.push((loss(&plus, &x) - loss(&minus, &x)) / (2.0 * FD_STEP));
            }
            let err = max_relative_error(analytic.data(), &numeric);
            assert!(err <= GRAD_TOLERANCE, "{name}: max rel err {err}");
        };

        check("wf", &grads.wf, &mut |p| &mut p.wf);
        check("wg", &grads.wg, &mut |p| &mut p.wg);
        check("wh", &grads.wh, &mut |p| &mut p.wh);
        check("wk", &grads.wk, &mut |p| &mut p.wk);
        check("gamma", &grads.gamma, &mut |p| &mut p.gamma);
        check("beta", &grads.beta, &mut |p| &mut p.beta);

        let mut numeric_dx = Vec::with_capacity(dx.len());
        for idx in 0..dx.len() {
            let mut plus = x.clone();
            plus.data_mut()[idx] += FD_STEP;
            let mut minus = x.clone();
            minus.data_mut()[idx] -= FD_STEP;
            numeric_dx.push((loss(&params, &plus) - loss(&params, &minus)) / (2.0 * FD_STEP));
        }
        let err = max_relative_error(dx.data(), &numeric_dx);
        assert!(err <= GRAD_TOLERANCE, "input: max rel err {err}");
    }
}
