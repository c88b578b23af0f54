//! Forward inference and backpropagation.

use rayon::prelude::*;

use super::{Architecture, CnnModel, NnError, ParamLayout, Result};
use crate::dataset::Image;
use crate::scalar::Scalar;
use crate::selection::ProbabilityMatrix;

/// Images per gradient chunk. Chunk sums are combined in chunk order, so the
/// result does not depend on how many threads evaluate the chunks.
pub(crate) const GRAD_CHUNK: usize = 16;

/// Gradient of the mean cross-entropy, laid out like [`CnnModel::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn tensor(&self, layout: &ParamLayout, name: &str) -> &[T] {
        let (_, r) = layout
            .tensors()
            .into_iter()
            .find(|(n, _)| *n == name)
            .unwrap_or_else(|| panic!("unknown tensor {name}"));
        &self.values[r]
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Per-image activations and backward scratch space.
pub(crate) struct Workspace<T> {
    conv: Vec<T>,
    pooled: Vec<T>,
    h1: Vec<T>,
    h2: Vec<T>,
    logits: Vec<T>,
    probs: Vec<T>,
    d_h2: Vec<T>,
    d_h1: Vec<T>,
    d_pooled: Vec<T>,
    d_conv: Vec<T>,
}

impl<T: Scalar> Workspace<T> {
    pub(crate) fn new(a: &Architecture) -> Self {
        let conv = a.filters * a.conv_side() * a.conv_side();
        Self {
            conv: vec![T::zero(); conv],
            pooled: vec![T::zero(); a.flat_len()],
            h1: vec![T::zero(); a.hidden1],
            h2: vec![T::zero(); a.hidden2],
            logits: vec![T::zero(); a.classes],
            probs: vec![T::zero(); a.classes],
            d_h2: vec![T::zero(); a.hidden2],
            d_h1: vec![T::zero(); a.hidden1],
            d_pooled: vec![T::zero(); a.flat_len()],
            d_conv: vec![T::zero(); conv],
        }
    }

    pub(crate) fn probs(&self) -> &[T] {
        &self.probs
    }
}

/// `out = relu(b + W^T x)` with `W` stored `[in][out]`.
fn dense_forward<T: Scalar>(w: &[T], b: &[T], x: &[T], out: &mut [T], relu: bool) {
    out.copy_from_slice(b);
    let n_out = out.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi != T::zero() {
            axpy(xi, &w[i * n_out..(i + 1) * n_out], out);
        }
    }
    if relu {
        for o in out.iter_mut() {
            *o = o.max(T::zero());
        }
    }
}

/// Accumulates weight/bias gradients of a dense layer and, if requested,
/// writes the input gradient.
fn dense_backward<T: Scalar>(w: &[T], x: &[T], d_out: &[T], gw: &mut [T], gb: &mut [T], d_in: Option<&mut [T]>) {
    let n_out = d_out.len();
    for (g, &d) in gb.iter_mut().zip(d_out) {
        *g += d;
    }
    for (i, &xi) in x.iter().enumerate() {
        if xi != T::zero() {
            axpy(xi, d_out, &mut gw[i * n_out..(i + 1) * n_out]);
        }
    }
    if let Some(d_in) = d_in {
        for (i, di) in d_in.iter_mut().enumerate() {
            *di = dot(&w[i * n_out..(i + 1) * n_out], d_out);
        }
    }
}

/// Runs one image through the network, leaving activations in `ws`.
pub(crate) fn forward_one<T: Scalar>(model: &CnnModel<T>, img: &[T], ws: &mut Workspace<T>) {
    let a = model.architecture();
    let l = model.layout();
    let p = model.params();
    let (side, k, cs, ps, pool) = (a.input_side, a.kernel, a.conv_side(), a.pooled_side(), a.pool);

    // convolution (valid correlation) + ReLU
    let conv_w = &p[l.conv_w.clone()];
    let conv_b = &p[l.conv_b.clone()];
    for f in 0..a.filters {
        let plane = &mut ws.conv[f * cs * cs..(f + 1) * cs * cs];
        plane.fill(conv_b[f]);
        let wf = &conv_w[f * k * k..(f + 1) * k * k];
        for ky in 0..k {
            for kx in 0..k {
                let wv = wf[ky * k + kx];
                for y in 0..cs {
                    let src = &img[(y + ky) * side + kx..(y + ky) * side + kx + cs];
                    axpy(wv, src, &mut plane[y * cs..(y + 1) * cs]);
                }
            }
        }
        for v in plane.iter_mut() {
            *v = v.max(T::zero());
        }
    }

    // average pooling
    let inv = T::one() / T::of((pool * pool) as f64);
    for f in 0..a.filters {
        let plane = &ws.conv[f * cs * cs..(f + 1) * cs * cs];
        let out = &mut ws.pooled[f * ps * ps..(f + 1) * ps * ps];
        for py in 0..ps {
            for px in 0..ps {
                let mut s = T::zero();
                for dy in 0..pool {
                    let row = &plane[(py * pool + dy) * cs + px * pool..][..pool];
                    for &v in row {
                        s += v;
                    }
                }
                out[py * ps + px] = s * inv;
            }
        }
    }

    dense_forward(&p[l.fc1_w.clone()], &p[l.fc1_b.clone()], &ws.pooled, &mut ws.h1, true);
    dense_forward(&p[l.fc2_w.clone()], &p[l.fc2_b.clone()], &ws.h1, &mut ws.h2, true);
    dense_forward(&p[l.out_w.clone()], &p[l.out_b.clone()], &ws.h2, &mut ws.logits, false);

    let max = ws.logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (pr, &z) in ws.probs.iter_mut().zip(&ws.logits) {
        *pr = (z - max).exp();
        sum += *pr;
    }
    for pr in ws.probs.iter_mut() {
        *pr /= sum;
    }
}

/// `-ln p[label]` of the last forward pass, via log-sum-exp.
fn nll<T: Scalar>(ws: &Workspace<T>, label: usize) -> T {
    let max = ws.logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = ws.logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
    lse - (ws.logits[label] - max)
}

/// Adds the gradient of `-ln p[label]` for the image last passed through
/// [`forward_one`] to `grads`.
pub(crate) fn backward_one<T: Scalar>(
    model: &CnnModel<T>,
    img: &[T],
    label: usize,
    ws: &mut Workspace<T>,
    grads: &mut [T],
) {
    let a = model.architecture();
    let l = model.layout();
    let p = model.params();
    let (side, k, cs, ps, pool) = (a.input_side, a.kernel, a.conv_side(), a.pooled_side(), a.pool);

    let mut d_logits = ws.probs.clone();
    d_logits[label] -= T::one();

    let (gw, gb) = split_pair(grads, &l.out_w, &l.out_b);
    dense_backward(&p[l.out_w.clone()], &ws.h2, &d_logits, gw, gb, Some(&mut ws.d_h2));
    for (d, &h) in ws.d_h2.iter_mut().zip(&ws.h2) {
        if h <= T::zero() {
            *d = T::zero();
        }
    }

    let (gw, gb) = split_pair(grads, &l.fc2_w, &l.fc2_b);
    dense_backward(&p[l.fc2_w.clone()], &ws.h1, &ws.d_h2, gw, gb, Some(&mut ws.d_h1));
    for (d, &h) in ws.d_h1.iter_mut().zip(&ws.h1) {
        if h <= T::zero() {
            *d = T::zero();
        }
    }

    let (gw, gb) = split_pair(grads, &l.fc1_w, &l.fc1_b);
    dense_backward(
        &p[l.fc1_w.clone()],
        &ws.pooled,
        &ws.d_h1,
        gw,
        gb,
        Some(&mut ws.d_pooled),
    );

    // average-pool backward, masked by the conv ReLU
    let inv = T::one() / T::of((pool * pool) as f64);
    for f in 0..a.filters {
        for y in 0..cs {
            for x in 0..cs {
                let i = f * cs * cs + y * cs + x;
                ws.d_conv[i] = if ws.conv[i] > T::zero() {
                    ws.d_pooled[f * ps * ps + (y / pool) * ps + x / pool] * inv
                } else {
                    T::zero()
                };
            }
        }
    }

    let (gw, gb) = split_pair(grads, &l.conv_w, &l.conv_b);
    for f in 0..a.filters {
        let d = &ws.d_conv[f * cs * cs..(f + 1) * cs * cs];
        gb[f] += d.iter().copied().sum::<T>();
        let gf = &mut gw[f * k * k..(f + 1) * k * k];
        for ky in 0..k {
            for kx in 0..k {
                let mut acc = T::zero();
                for y in 0..cs {
                    let src = &img[(y + ky) * side + kx..(y + ky) * side + kx + cs];
                    acc += dot(&d[y * cs..(y + 1) * cs], src);
                }
                gf[ky * k + kx] += acc;
            }
        }
    }
}

/// Disjoint mutable views of a weight range and the bias range following it.
fn split_pair<'a, T>(
    grads: &'a mut [T],
    w: &std::ops::Range<usize>,
    b: &std::ops::Range<usize>,
) -> (&'a mut [T], &'a mut [T]) {
    debug_assert_eq!(w.end, b.start);
    let (head, tail) = grads[w.start..b.end].split_at_mut(w.len());
    (head, tail)
}

pub(crate) fn check_images<T: Scalar>(a: &Architecture, images: &[&Image<T>]) -> Result<()> {
    for (index, img) in images.iter().enumerate() {
        if img.height() != a.input_side || img.width() != a.input_side {
            return Err(NnError::InputShape {
                index,
                height: img.height(),
                width: img.width(),
                expected: a.input_side,
            });
        }
    }
    Ok(())
}

/// Softmax outputs for every image, one row per image.
pub fn forward<T: Scalar>(model: &CnnModel<T>, batch: &[Image<T>]) -> Result<ProbabilityMatrix<T>> {
    let a = *model.architecture();
    if batch.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    let refs: Vec<&Image<T>> = batch.iter().collect();
    check_images(&a, &refs)?;
    let mut values = vec![T::zero(); batch.len() * a.classes];
    values
        .par_chunks_mut(a.classes * 64)
        .zip(batch.par_chunks(64))
        .for_each_init(
            || Workspace::new(&a),
            |ws, (out, imgs)| {
                for (row, img) in out.chunks_exact_mut(a.classes).zip(imgs) {
                    forward_one(model, img.pixels(), ws);
                    row.copy_from_slice(ws.probs());
                }
            },
        );
    Ok(ProbabilityMatrix::new(batch.len(), a.classes, values)?)
}

/// Sums per-image losses and gradients over `images`, chunked so the sum is
/// thread-count independent. `buffers` holds one scratch gradient per chunk.
pub(crate) fn accumulate<T: Scalar>(
    model: &CnnModel<T>,
    images: &[&Image<T>],
    labels: &[usize],
    buffers: &mut Vec<Vec<T>>,
    out: &mut [T],
) -> T {
    let a = *model.architecture();
    let n_chunks = images.len().div_ceil(GRAD_CHUNK);
    while buffers.len() < n_chunks {
        buffers.push(vec![T::zero(); model.num_params()]);
    }
    let losses: Vec<T> = buffers[..n_chunks]
        .par_iter_mut()
        .zip(images.par_chunks(GRAD_CHUNK).zip(labels.par_chunks(GRAD_CHUNK)))
        .map_init(
            || Workspace::new(&a),
            |ws, (buf, (imgs, labs))| {
                buf.fill(T::zero());
                let mut loss = T::zero();
                for (img, &lab) in imgs.iter().zip(labs) {
                    forward_one(model, img.pixels(), ws);
                    loss += nll(ws, lab);
                    backward_one(model, img.pixels(), lab, ws, buf);
                }
                loss
            },
        )
        .collect();
    out.fill(T::zero());
    for buf in &buffers[..n_chunks] {
        for (o, &g) in out.iter_mut().zip(buf) {
            *o += g;
        }
    }
    losses.into_iter().fold(T::zero(), |acc, l| acc + l)
}

fn check_labels<T: Scalar>(model: &CnnModel<T>, images: usize, labels: &[usize]) -> Result<()> {
    if images == 0 {
        return Err(NnError::EmptyBatch);
    }
    if images != labels.len() {
        return Err(NnError::LabelCount {
            images,
            labels: labels.len(),
        });
    }
    let classes = model.architecture().classes;
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(NnError::Label { label, classes });
    }
    Ok(())
}

/// Mean cross-entropy over the batch and its exact gradient.
pub fn forward_backward<T: Scalar>(
    model: &CnnModel<T>,
    batch: &[&Image<T>],
    labels: &[usize],
) -> Result<(T, Gradients<T>)> {
    check_labels(model, batch.len(), labels)?;
    check_images(model.architecture(), batch)?;
    let mut values = vec![T::zero(); model.num_params()];
    let loss = accumulate(model, batch, labels, &mut Vec::new(), &mut values);
    let scale = T::one() / T::of(batch.len() as f64);
    for v in &mut values {
        *v *= scale;
    }
    Ok((loss * scale, Gradients { values }))
}

/// Gradient of the mean cross-entropy of `batch` w.r.t. every parameter.
pub fn backward<T: Scalar>(model: &CnnModel<T>, batch: &[Image<T>], labels: &[usize]) -> Result<Gradients<T>> {
    let refs: Vec<&Image<T>> = batch.iter().collect();
    forward_backward(model, &refs, labels).map(|(_, g)| g)
}

/// Mean cross-entropy and gradient for an owned batch.
pub fn loss_and_gradients<T: Scalar>(
    model: &CnnModel<T>,
    batch: &[Image<T>],
    labels: &[usize],
) -> Result<(T, Gradients<T>)> {
    let refs: Vec<&Image<T>> = batch.iter().collect();
    forward_backward(model, &refs, labels)
}

/// Mean cross-entropy of `batch` without gradients.
pub fn mean_loss<T: Scalar>(model: &CnnModel<T>, batch: &[&Image<T>], labels: &[usize]) -> Result<T> {
    check_labels(model, batch.len(), labels)?;
    check_images(model.architecture(), batch)?;
    let a = *model.architecture();
    let total = batch
        .par_iter()
        .zip(labels.par_iter())
        .with_min_len(64)
        .map_init(
            || Workspace::new(&a),
            |ws, (img, &lab)| {
                forward_one(model, img.pixels(), ws);
                nll(ws, lab)
            },
        )
        .collect::<Vec<T>>()
        .into_iter()
        .fold(T::zero(), |acc, l| acc + l);
    Ok(total / T::of(batch.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_arch() -> Architecture {
        Architecture {
            input_side: 12,
            filters: 2,
            kernel: 5,
            pool: 2,
            hidden1: 20,
            hidden2: 10,
            classes: 10,
        }
    }

    fn random_images(n: usize, side: usize, seed: u64) -> Vec<Image<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Image::new(side, side, (0..side * side).map(|_| rng.random::<f64>()).collect()))
            .collect()
    }

    #[test]
    fn zero_model_outputs_uniform_rows() {
        let m = CnnModel::<f64>::zeros(Architecture::reference()).unwrap();
        let imgs = random_images(3, 28, 1);
        let p = forward(&m, &imgs).unwrap();
        assert_eq!(p.rows(), 3);
        for r in p.iter_rows() {
            assert!(r.iter().all(|&v| (v - 0.1).abs() < 1e-15));
        }
    }

    #[test]
    fn rows_sum_to_one() {
        let m = CnnModel::<f64>::glorot(Architecture::reference(), 4).unwrap();
        let p = forward(&m, &random_images(5, 28, 2)).unwrap();
        for r in p.iter_rows() {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(r.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let m = CnnModel::<f64>::zeros(Architecture::reference()).unwrap();
        let err = forward(&m, &random_images(1, 12, 0)).unwrap_err();
        assert!(matches!(
            err,
            NnError::InputShape {
                index: 0,
                height: 12,
                ..
            }
        ));
        assert!(matches!(forward(&m, &[]), Err(NnError::EmptyBatch)));
        let g = backward(&m, &random_images(2, 28, 0), &[1]);
        assert!(matches!(g, Err(NnError::LabelCount { images: 2, labels: 1 })));
        let g = backward(&m, &random_images(1, 28, 0), &[10]);
        assert!(matches!(g, Err(NnError::Label { label: 10, .. })));
    }

    #[test]
    fn pooling_preserves_mean_and_relu_is_nonnegative() {
        let m = CnnModel::<f64>::glorot(Architecture::reference(), 9).unwrap();
        let img = &random_images(1, 28, 3)[0];
        let mut ws = Workspace::new(m.architecture());
        forward_one(&m, img.pixels(), &mut ws);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert_relative_eq!(mean(&ws.conv), mean(&ws.pooled), max_relative = 1e-12);
        assert!(ws.conv.iter().chain(&ws.h1).chain(&ws.h2).all(|&v| v >= 0.0));
    }

    #[test]
    fn duplicated_batch_gives_same_gradient() {
        let mut m = CnnModel::<f64>::glorot(small_arch(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for p in m.params_mut() {
            *p += rng.random_range(-0.05..0.05);
        }
        let imgs = random_images(3, 12, 4);
        let labels = [1, 4, 7];
        let once = backward(&m, &imgs, &labels).unwrap();
        let twice_imgs: Vec<_> = imgs.iter().flat_map(|i| [i.clone(), i.clone()]).collect();
        let twice = backward(&m, &twice_imgs, &[1, 1, 4, 4, 7, 7]).unwrap();
        for (a, b) in once.values.iter().zip(&twice.values) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-6));
        }
    }

    #[test]
    fn output_gradient_vanishes_at_the_optimum() {
        let mut m = CnnModel::<f64>::glorot(small_arch(), 8).unwrap();
        let l = m.layout().clone();
        m.params_mut()[l.out_b.start + 3] = 40.0;
        let zero = Image::zeros(12, 12);
        let g = backward(&m, &[zero], &[3]).unwrap();
        assert!(g.tensor(&l, "out.bias").iter().all(|v| v.abs() < 1e-12));
        assert!(g.tensor(&l, "out.weight").iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn chunked_accumulation_matches_per_image_sum() {
        let m = CnnModel::<f64>::glorot(small_arch(), 2).unwrap();
        let imgs = random_images(40, 12, 6);
        let labels: Vec<usize> = (0..40).map(|i| i % 10).collect();
        let (loss, g) = loss_and_gradients(&m, &imgs, &labels).unwrap();
        let mut sum = vec![0.0; m.num_params()];
        let mut ls = 0.0;
        for (img, &lab) in imgs.iter().zip(&labels) {
            let (li, gi) = loss_and_gradients(&m, std::slice::from_ref(img), &[lab]).unwrap();
            ls += li;
            for (s, v) in sum.iter_mut().zip(&gi.values) {
                *s += v / 40.0;
            }
        }
        assert_relative_eq!(loss, ls / 40.0, max_relative = 1e-12);
        for (a, b) in g.values.iter().zip(&sum) {
            assert!((a - b).abs() < 1e-12);
        }
        let refs: Vec<_> = imgs.iter().collect();
        assert_relative_eq!(mean_loss(&m, &refs, &labels).unwrap(), loss, max_relative = 1e-12);
    }
}
