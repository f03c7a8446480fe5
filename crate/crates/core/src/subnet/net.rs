//! Plain 2-D convolution stack with manual backpropagation.
//!
//! Activations live in zero-padded planes of `(h + 2p) x (w + 2p)` values,
//! `p` being the largest kernel radius. With that layout one kernel tap is a
//! single contiguous multiply-add over the flattened interior span, which
//! the compiler vectorizes; the pad columns that the span also touches are
//! re-zeroed after every layer.

use std::ops::{Add, AddAssign, Mul, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{InputNorm, SubnetConfig};
use crate::error::{Error, Result};
use crate::evidential::SubnetId;
use crate::losses::{loss_and_gradient, softplus, LossBreakdown, LossConfig};
use crate::volume::Element;

/// Floating-point type the network can run in.
pub trait Scalar:
    Element + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + AddAssign
{
    /// Zero for magnitudes below [`GRADIENT_FLOOR`], identity otherwise.
    /// Keeps backpropagated values out of the subnormal range.
    #[inline]
    fn flush(self) -> Self {
        let v = self.to_f64();
        if v.abs() < GRADIENT_FLOOR {
            Self::default()
        } else {
            self
        }
    }
}

/// Backpropagated values smaller than this are dropped.
pub const GRADIENT_FLOOR: f64 = 1e-30;

impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
fn axpy<F: Scalar>(dst: &mut [F], w: F, src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += w * s;
    }
}

const LANES: usize = 16;

#[inline]
fn reduce<F: Scalar>(acc: &[F; LANES]) -> F {
    let mut total = F::default();
    for &v in acc {
        total += v;
    }
    total
}

/// Dot product with sixteen independent accumulators, in a fixed order.
#[inline]
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::default(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = F::default();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    reduce(&acc) + tail
}

/// `dst[i] += sum_j w[j] * src[j][i]` for the nine taps of a 3x3 kernel.
#[inline]
fn axpy9<F: Scalar>(dst: &mut [F], w: &[F; 9], src: [&[F]; 9]) {
    let n = dst.len();
    let [s0, s1, s2, s3, s4, s5, s6, s7, s8] = src.map(|s| &s[..n]);
    for i in 0..n {
        let a = w[0] * s0[i] + w[1] * s1[i] + w[2] * s2[i];
        let b = w[3] * s3[i] + w[4] * s4[i] + w[5] * s5[i];
        let c = w[6] * s6[i] + w[7] * s7[i] + w[8] * s8[i];
        dst[i] += (a + b) + c;
    }
}

#[inline]
fn sum<F: Scalar>(a: &[F]) -> F {
    let mut acc = [F::default(); LANES];
    let ca = a.chunks_exact(LANES);
    let r = ca.remainder();
    for x in ca {
        for i in 0..LANES {
            acc[i] += x[i];
        }
    }
    let mut tail = F::default();
    for &x in r {
        tail += x;
    }
    reduce(&acc) + tail
}

/// Padded-plane geometry for an `h x w` slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub h: usize,
    pub w: usize,
    pub pad: usize,
}

impl Geometry {
    pub fn new(h: usize, w: usize, pad: usize) -> Self {
        Geometry { h, w, pad }
    }

    #[inline]
    pub fn wp(&self) -> usize {
        self.w + 2 * self.pad
    }

    #[inline]
    pub fn plane(&self) -> usize {
        (self.h + 2 * self.pad) * self.wp()
    }

    /// Flat span covering every interior pixel (plus the pad columns
    /// between interior rows).
    #[inline]
    fn span(&self) -> (usize, usize) {
        let wp = self.wp();
        let lo = self.pad * wp + self.pad;
        let hi = (self.pad + self.h - 1) * wp + self.pad + self.w;
        (lo, hi)
    }

    #[inline]
    fn offset(&self, dy: isize, dx: isize) -> isize {
        dy * self.wp() as isize + dx
    }

    /// Copies an unpadded `h x w` image into a zeroed padded plane.
    pub fn pad_image<F: Scalar>(&self, image: &[F], plane: &mut [F]) {
        let wp = self.wp();
        for y in 0..self.h {
            let dst = (y + self.pad) * wp + self.pad;
            plane[dst..dst + self.w].copy_from_slice(&image[y * self.w..(y + 1) * self.w]);
        }
    }

    /// Interior of a padded plane as an `h x w` image.
    pub fn unpad<F: Scalar>(&self, plane: &[F], out: &mut Vec<F>) {
        let wp = self.wp();
        for y in 0..self.h {
            let src = (y + self.pad) * wp + self.pad;
            out.extend_from_slice(&plane[src..src + self.w]);
        }
    }

    fn zero_pad_columns<F: Scalar>(&self, plane: &mut [F]) {
        let wp = self.wp();
        for y in self.pad..self.pad + self.h {
            plane[y * wp..y * wp + self.pad].fill(F::default());
            plane[y * wp + self.pad + self.w..(y + 1) * wp].fill(F::default());
        }
    }
}

/// Location of one layer's weights and biases inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerShape {
    fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    #[inline]
    fn weight_index(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        self.weight_offset + ((co * self.in_channels + ci) * self.kernel + ky) * self.kernel + kx
    }
}

/// Convolutional evidence network: ReLU between layers, softplus head.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet<F: Scalar> {
    config: SubnetConfig,
    subnet_id: SubnetId,
    class_names: Vec<String>,
    shapes: Vec<LayerShape>,
    params: Vec<F>,
    input_norm: InputNorm,
}

/// Cached activations of one forward pass over a slice.
#[derive(Debug, Clone)]
pub struct ForwardCache<F: Scalar> {
    geom: Geometry,
    input: Vec<F>,
    /// Post-ReLU outputs of hidden layers.
    hidden: Vec<Vec<F>>,
    /// Pre-softplus outputs of the final layer.
    logits: Vec<F>,
}

impl<F: Scalar> ForwardCache<F> {
    pub fn geometry(&self) -> Geometry {
        self.geom
    }

    /// Final-layer activations, class-major `h x w` images.
    pub fn logits(&self) -> Vec<F> {
        let mut out =
            Vec::with_capacity(self.geom.h * self.geom.w * self.logits.len() / self.geom.plane());
        for plane in self.logits.chunks_exact(self.geom.plane()) {
            self.geom.unpad(plane, &mut out);
        }
        out
    }
}

fn layer_shapes(config: &SubnetConfig) -> Vec<LayerShape> {
    let mut shapes = Vec::with_capacity(config.layers.len());
    let mut cin = config.input_channels;
    let mut offset = 0;
    for layer in &config.layers {
        let w = layer.out_channels * cin * layer.kernel * layer.kernel;
        shapes.push(LayerShape {
            in_channels: cin,
            out_channels: layer.out_channels,
            kernel: layer.kernel,
            weight_offset: offset,
            bias_offset: offset + w,
        });
        offset += w + layer.out_channels;
        cin = layer.out_channels;
    }
    shapes
}

impl<F: Scalar> ConvNet<F> {
    /// He-uniform weights from the config seed, zero biases.
    pub fn init(
        config: SubnetConfig,
        subnet_id: SubnetId,
        class_names: Vec<String>,
    ) -> Result<Self> {
        config.validate()?;
        let shapes = layer_shapes(&config);
        let total = shapes
            .last()
            .map(|s| s.bias_offset + s.out_channels)
            .unwrap_or(0);
        let mut params = vec![F::default(); total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for s in &shapes {
            let fan_in = (s.in_channels * s.kernel * s.kernel) as f64;
            let bound = (6.0 / fan_in).sqrt();
            for p in &mut params[s.weight_offset..s.weight_offset + s.weight_len()] {
                *p = F::from_f64(rng.random_range(-bound..bound));
            }
        }
        Self::from_parts(config, subnet_id, class_names, params)
    }

    pub fn from_parts(
        config: SubnetConfig,
        subnet_id: SubnetId,
        class_names: Vec<String>,
        params: Vec<F>,
    ) -> Result<Self> {
        config.validate()?;
        if class_names.len() != config.num_classes {
            return Err(Error::config(format!(
                "{} class names for {} classes",
                class_names.len(),
                config.num_classes
            )));
        }
        let shapes = layer_shapes(&config);
        let total = shapes
            .last()
            .map(|s| s.bias_offset + s.out_channels)
            .unwrap_or(0);
        if params.len() != total {
            return Err(Error::shape(format!(
                "{} parameters for a network needing {total}",
                params.len()
            )));
        }
        if let Some(index) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(ConvNet {
            config,
            subnet_id,
            class_names,
            shapes,
            params,
            input_norm: InputNorm::default(),
        })
    }

    pub fn config(&self) -> &SubnetConfig {
        &self.config
    }

    pub fn subnet_id(&self) -> &SubnetId {
        &self.subnet_id
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Normalization applied to raw inputs before [`ConvNet::forward`].
    pub fn input_norm(&self) -> InputNorm {
        self.input_norm
    }

    pub fn with_input_norm(mut self, norm: InputNorm) -> Result<Self> {
        norm.validate()?;
        self.input_norm = norm;
        Ok(self)
    }

    /// Same network in another precision.
    pub fn cast<G: Scalar>(&self) -> ConvNet<G> {
        ConvNet {
            config: self.config.clone(),
            subnet_id: self.subnet_id.clone(),
            class_names: self.class_names.clone(),
            shapes: self.shapes.clone(),
            params: self
                .params
                .iter()
                .map(|p| G::from_f64(p.to_f64()))
                .collect(),
            input_norm: self.input_norm,
        }
    }

    pub fn geometry(&self, h: usize, w: usize) -> Geometry {
        Geometry::new(h, w, self.config.max_radius())
    }

    fn check_slice(&self, image: &[F], h: usize, w: usize) -> Result<()> {
        let need = self.config.input_channels * h * w;
        if image.len() != need {
            return Err(Error::shape(format!(
                "slice of {} values, expected {}x{}x{}",
                image.len(),
                self.config.input_channels,
                h,
                w
            )));
        }
        let k = self
            .config
            .layers
            .iter()
            .map(|l| l.kernel)
            .max()
            .unwrap_or(1);
        if h < k || w < k {
            return Err(Error::shape(format!(
                "slice {h}x{w} smaller than the {k}x{k} kernel footprint"
            )));
        }
        Ok(())
    }

    /// Flat offsets of the kernel taps, row-major over the kernel.
    fn tap_offsets(s: &LayerShape, g: &Geometry) -> Vec<isize> {
        let r = (s.kernel / 2) as isize;
        let mut offs = Vec::with_capacity(s.kernel * s.kernel);
        for ky in 0..s.kernel as isize {
            for kx in 0..s.kernel as isize {
                offs.push(g.offset(ky - r, kx - r));
            }
        }
        offs
    }

    fn conv_forward(&self, s: &LayerShape, g: &Geometry, input: &[F], out: &mut [F]) {
        let plane = g.plane();
        let (lo, hi) = g.span();
        let offs = Self::tap_offsets(s, g);
        let taps = offs.len();
        for co in 0..s.out_channels {
            let o = &mut out[co * plane..(co + 1) * plane];
            o[lo..hi].fill(self.params[s.bias_offset + co]);
            for ci in 0..s.in_channels {
                let inp = &input[ci * plane..(ci + 1) * plane];
                let w0 = s.weight_index(co, ci, 0, 0);
                let w = &self.params[w0..w0 + taps];
                let shifted = |t: usize| {
                    &inp[(lo as isize + offs[t]) as usize..(hi as isize + offs[t]) as usize]
                };
                if taps == 9 {
                    axpy9(
                        &mut o[lo..hi],
                        w.try_into().unwrap(),
                        std::array::from_fn(shifted),
                    );
                } else {
                    for (t, &wv) in w.iter().enumerate() {
                        axpy(&mut o[lo..hi], wv, shifted(t));
                    }
                }
            }
            g.zero_pad_columns(o);
        }
    }

    /// Forward pass over one `input_channels x h x w` slice (channel-major,
    /// row-major inside a channel), keeping what backpropagation needs.
    pub fn forward_cached(&self, image: &[F], h: usize, w: usize) -> Result<ForwardCache<F>> {
        self.check_slice(image, h, w)?;
        let g = self.geometry(h, w);
        let plane = g.plane();
        let mut input = vec![F::default(); self.config.input_channels * plane];
        for c in 0..self.config.input_channels {
            g.pad_image(
                &image[c * h * w..(c + 1) * h * w],
                &mut input[c * plane..(c + 1) * plane],
            );
        }
        let mut hidden: Vec<Vec<F>> = Vec::with_capacity(self.shapes.len() - 1);
        let last = self.shapes.len() - 1;
        let mut logits = Vec::new();
        for (i, s) in self.shapes.iter().enumerate() {
            let mut out = vec![F::default(); s.out_channels * plane];
            {
                let src = if i == 0 { &input } else { &hidden[i - 1] };
                self.conv_forward(s, &g, src, &mut out);
            }
            if i == last {
                logits = out;
            } else {
                for v in out.iter_mut() {
                    if !(*v > F::default()) {
                        *v = F::default();
                    }
                }
                hidden.push(out);
            }
        }
        Ok(ForwardCache {
            geom: g,
            input,
            hidden,
            logits,
        })
    }

    /// Evidence for one slice, class-major `N x h x w`.
    pub fn forward(&self, image: &[F], h: usize, w: usize) -> Result<Vec<F>> {
        let cache = self.forward_cached(image, h, w)?;
        Ok(cache
            .logits()
            .into_iter()
            .map(|z| F::from_f64(softplus(z.to_f64())))
            .collect())
    }

    /// Accumulates parameter gradients given `d loss / d logits` (padded
    /// planes with zero padding) into `grad`.
    pub fn backward(&self, cache: &ForwardCache<F>, dlogits: Vec<F>, grad: &mut [F]) {
        assert_eq!(grad.len(), self.params.len());
        let g = cache.geom;
        let plane = g.plane();
        let (lo, hi) = g.span();
        let mut delta = dlogits;
        for i in (0..self.shapes.len()).rev() {
            let s = &self.shapes[i];
            let input = if i == 0 {
                &cache.input
            } else {
                &cache.hidden[i - 1]
            };
            let offs = Self::tap_offsets(s, &g);
            let taps = offs.len();
            let mut dinput = if i > 0 {
                vec![F::default(); s.in_channels * plane]
            } else {
                Vec::new()
            };
            for co in 0..s.out_channels {
                let dplane = &delta[co * plane..(co + 1) * plane];
                let d = &dplane[lo..hi];
                grad[s.bias_offset + co] += sum(d);
                for ci in 0..s.in_channels {
                    let inp = &input[ci * plane..(ci + 1) * plane];
                    let w0 = s.weight_index(co, ci, 0, 0);
                    let fwd = |t: usize| {
                        &inp[(lo as isize + offs[t]) as usize..(hi as isize + offs[t]) as usize]
                    };
                    // Only interior entries of the propagated gradient
                    // survive the ReLU mask below.
                    let bwd = |t: usize| {
                        &dplane[(lo as isize - offs[t]) as usize..(hi as isize - offs[t]) as usize]
                    };
                    if taps == 9 {
                        for t in 0..9 {
                            grad[w0 + t] += dot(d, fwd(t));
                        }
                        if i > 0 {
                            let w: &[F; 9] = self.params[w0..w0 + 9].try_into().unwrap();
                            axpy9(
                                &mut dinput[ci * plane + lo..ci * plane + hi],
                                w,
                                std::array::from_fn(bwd),
                            );
                        }
                    } else {
                        for t in 0..taps {
                            grad[w0 + t] += dot(d, fwd(t));
                            if i > 0 {
                                let w = self.params[w0 + t];
                                axpy(&mut dinput[ci * plane + lo..ci * plane + hi], w, bwd(t));
                            }
                        }
                    }
                }
            }
            if i > 0 {
                // ReLU derivative; the padding of `input` is zero, so this
                // also clears every pad entry of the propagated gradient.
                for (dv, &a) in dinput.iter_mut().zip(input.iter()) {
                    *dv = if a > F::default() {
                        dv.flush()
                    } else {
                        F::default()
                    };
                }
                delta = dinput;
            }
        }
    }

    /// Loss over a batch of slices and its gradient with respect to every
    /// parameter. `slices` pairs each input image with its per-pixel labels.
    pub fn loss_and_gradient(
        &self,
        slices: &[(&[F], &[u16])],
        h: usize,
        w: usize,
        loss: &LossConfig,
    ) -> Result<(LossBreakdown, Vec<F>)> {
        let caches = slices
            .iter()
            .map(|(img, _)| self.forward_cached(img, h, w))
            .collect::<Result<Vec<_>>>()?;
        let (breakdown, dlogits) = self.loss_from_caches(&caches, slices, loss)?;
        let mut grad = vec![F::default(); self.params.len()];
        for (cache, d) in caches.iter().zip(dlogits) {
            self.backward(cache, d, &mut grad);
        }
        Ok((breakdown, grad))
    }

    /// Loss only, for finite-difference checks and validation.
    pub fn loss(
        &self,
        slices: &[(&[F], &[u16])],
        h: usize,
        w: usize,
        loss: &LossConfig,
    ) -> Result<LossBreakdown> {
        let caches = slices
            .iter()
            .map(|(img, _)| self.forward_cached(img, h, w))
            .collect::<Result<Vec<_>>>()?;
        let (z, t) = self.batch_tensors(&caches, slices)?;
        crate::losses::loss_from_activations(&z, &t, self.num_classes(), loss)
    }

    /// Class-major logits and one-hot targets over all pixels of a batch.
    fn batch_tensors(
        &self,
        caches: &[ForwardCache<F>],
        slices: &[(&[F], &[u16])],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.num_classes();
        let g = caches[0].geom;
        let hw = g.h * g.w;
        let voxels = hw * caches.len();
        let mut z = vec![0.0; n * voxels];
        let mut t = vec![0.0; n * voxels];
        let mut buf = Vec::with_capacity(hw);
        for (s, (cache, (_, labels))) in caches.iter().zip(slices).enumerate() {
            if labels.len() != hw {
                return Err(Error::shape(format!(
                    "{} labels for a {}x{} slice",
                    labels.len(),
                    g.h,
                    g.w
                )));
            }
            for c in 0..n {
                buf.clear();
                g.unpad(&cache.logits[c * g.plane()..(c + 1) * g.plane()], &mut buf);
                let dst = &mut z[c * voxels + s * hw..c * voxels + (s + 1) * hw];
                for (d, v) in dst.iter_mut().zip(&buf) {
                    *d = v.to_f64();
                }
            }
            for (i, &l) in labels.iter().enumerate() {
                if l as usize >= n {
                    return Err(Error::LabelOutOfRange {
                        index: i,
                        label: l as u32,
                        classes: n,
                    });
                }
                t[l as usize * voxels + s * hw + i] = 1.0;
            }
        }
        Ok((z, t))
    }

    fn loss_from_caches(
        &self,
        caches: &[ForwardCache<F>],
        slices: &[(&[F], &[u16])],
        loss: &LossConfig,
    ) -> Result<(LossBreakdown, Vec<Vec<F>>)> {
        if caches.is_empty() {
            return Err(Error::EmptyDataset("empty batch".into()));
        }
        let n = self.num_classes();
        let (z, t) = self.batch_tensors(caches, slices)?;
        let (breakdown, gz) = loss_and_gradient(&z, &t, n, loss)?;
        let g = caches[0].geom;
        let hw = g.h * g.w;
        let voxels = hw * caches.len();
        let wp = g.wp();
        let per_slice = (0..caches.len())
            .map(|s| {
                let mut planes = vec![F::default(); n * g.plane()];
                for c in 0..n {
                    let src = &gz[c * voxels + s * hw..c * voxels + (s + 1) * hw];
                    for y in 0..g.h {
                        let dst = c * g.plane() + (y + g.pad) * wp + g.pad;
                        for x in 0..g.w {
                            planes[dst + x] = F::from_f64(src[y * g.w + x]).flush();
                        }
                    }
                }
                planes
            })
            .collect();
        Ok((breakdown, per_slice))
    }
}
