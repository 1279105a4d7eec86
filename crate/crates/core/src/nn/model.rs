//! The multi-scale CNN: parallel same-padded branches, conv blocks, dense head.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::class::N_CLASSES;
use crate::error::{Error, Result};
use crate::nn::activation::{dropout_backward, dropout_forward, relu_backward, relu_forward};
use crate::nn::batchnorm::{BatchNormCache, BatchNormLayer};
use crate::nn::conv::ConvLayer;
use crate::nn::dense::DenseLayer;
use crate::nn::pool::{maxpool2_backward, maxpool2_forward};
use crate::nn::tensor::Tensor4;
use crate::nn::Mode;
use crate::rng::{self, Rng};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub in_channels: usize,
    pub patch_size: usize,
    pub branch_kernels: Vec<usize>,
    pub branch_channels: usize,
    pub block_channels: Vec<usize>,
    pub block_kernel: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub n_classes: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            in_channels: 10,
            patch_size: 32,
            branch_kernels: vec![3, 5, 7],
            branch_channels: 32,
            block_channels: vec![64, 128, 128, 256, 256],
            block_kernel: 3,
            hidden: 256,
            dropout: 0.25,
            n_classes: N_CLASSES,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.in_channels == 0 || self.branch_channels == 0 || self.hidden == 0 || self.n_classes == 0 {
            return bad("architecture widths must be positive".into());
        }
        if self.branch_kernels.is_empty() || self.branch_kernels.iter().any(|k| k % 2 == 0) || self.block_kernel.is_multiple_of(2) {
            return bad("kernel sizes must be odd and at least one branch is required".into());
        }
        if self.block_channels.contains(&0) {
            return bad("block widths must be positive".into());
        }
        let nb = self.block_channels.len();
        if nb >= usize::BITS as usize || self.patch_size == 0 || !self.patch_size.is_multiple_of(1 << nb) {
            return bad(format!("patch size {} is not divisible by 2^{nb}", self.patch_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn concat_channels(&self) -> usize {
        self.branch_kernels.len() * self.branch_channels
    }

    /// Length of the flattened feature vector fed to the dense head.
    pub fn flatten_dim(&self) -> usize {
        let side = self.patch_size >> self.block_channels.len();
        side * side * self.block_channels.last().copied().unwrap_or(self.concat_channels())
    }

    /// Layer indices: 0 is the multi-scale layer, `1..=n_blocks` the blocks,
    /// then the hidden and output dense layers.
    pub fn n_layers(&self) -> usize {
        self.block_channels.len() + 3
    }
}

/// Per-channel input standardization `(x - mean) * inv_std`, applied before the branches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
}

impl ChannelNorm {
    pub fn identity(channels: usize) -> Self {
        ChannelNorm {
            mean: vec![0.0; channels],
            inv_std: vec![1.0; channels],
        }
    }

    /// Mean and population std of each channel over all pixels of all patches.
    pub fn fit(set: &crate::sampling::SampleSet) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::Empty("cannot fit input normalization on an empty set".into()));
        }
        let c = set.n_channels;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let mut n = 0.0f64;
        for p in &set.patches {
            for (ch, (s, q)) in sum.iter_mut().zip(&mut sq).enumerate() {
                for &v in p.channel(ch) {
                    *s += v as f64;
                    *q += v as f64 * v as f64;
                }
            }
            n += (p.size * p.size) as f64;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let inv_std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                if var > 1e-12 { (1.0 / var.sqrt()) as f32 } else { 1.0 }
            })
            .collect();
        Ok(ChannelNorm {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            inv_std,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.mean.iter().all(|&m| m == 0.0) && self.inv_std.iter().all(|&s| s == 1.0)
    }
}

/// Conv, batch norm, ReLU, 2x2 max pool. The conv bias stays zero and is not
/// a parameter: batch norm's beta absorbs any per-channel shift.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<T> {
    pub conv: ConvLayer<T>,
    pub bn: BatchNormLayer<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MscnnModel<T> {
    pub arch: Architecture,
    pub norm: ChannelNorm,
    pub branches: Vec<ConvLayer<T>>,
    pub blocks: Vec<ConvBlock<T>>,
    pub hidden: DenseLayer<T>,
    pub output: DenseLayer<T>,
    /// One flag per layer index (see [`Architecture::n_layers`]).
    pub frozen: Vec<bool>,
}

/// Where the dropout mask comes from during a training forward pass.
pub enum DropoutMask<'a, T> {
    Sample(&'a mut Rng),
    Fixed(&'a [T]),
}

struct BlockCache<T> {
    input: Tensor4<T>,
    conv_out: Tensor4<T>,
    bn: Option<BatchNormCache<T>>,
    activated: Tensor4<T>,
    argmax: Vec<u8>,
}

/// Intermediate values kept by a training forward pass.
pub struct ForwardCache<T> {
    input: Tensor4<T>,
    blocks: Vec<BlockCache<T>>,
    flat: Tensor4<T>,
    hidden_act: Tensor4<T>,
    mask: Option<Vec<T>>,
    dropped: Tensor4<T>,
}

impl<T> ForwardCache<T> {
    pub fn dropout_mask(&self) -> Option<&[T]> {
        self.mask.as_deref()
    }
}

/// Name, layer index and length of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub layer: usize,
    pub len: usize,
}

impl<T: Scalar> MscnnModel<T> {
    /// He-initialized model; every stream derives from `seed`.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut r = rng::stream(seed, 0x6d73_636e);
        let branches = arch
            .branch_kernels
            .iter()
            .map(|&k| ConvLayer::he_init(arch.in_channels, arch.branch_channels, k, &mut r))
            .collect::<Result<Vec<_>>>()?;
        let mut in_ch = arch.concat_channels();
        let mut blocks = Vec::with_capacity(arch.block_channels.len());
        for &out in &arch.block_channels {
            blocks.push(ConvBlock {
                conv: ConvLayer::he_init(in_ch, out, arch.block_kernel, &mut r)?,
                bn: BatchNormLayer::new(out),
            });
            in_ch = out;
        }
        let hidden = DenseLayer::he_init(arch.flatten_dim(), arch.hidden, &mut r);
        let output = DenseLayer::he_init(arch.hidden, arch.n_classes, &mut r);
        Ok(MscnnModel {
            norm: ChannelNorm::identity(arch.in_channels),
            frozen: vec![false; arch.n_layers()],
            arch,
            branches,
            blocks,
            hidden,
            output,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.arch.n_layers()
    }

    pub fn hidden_layer(&self) -> usize {
        self.blocks.len() + 1
    }

    pub fn output_layer(&self) -> usize {
        self.blocks.len() + 2
    }

    /// Checks internal consistency after construction or deserialization.
    pub fn check(&self) -> Result<()> {
        self.arch.validate()?;
        let a = &self.arch;
        let bad = |m: &str| Err(Error::MalformedModel(m.to_string()));
        if self.frozen.len() != a.n_layers() || self.branches.len() != a.branch_kernels.len() || self.blocks.len() != a.block_channels.len() {
            return bad("layer counts disagree with the architecture");
        }
        if self.norm.mean.len() != a.in_channels || self.norm.inv_std.len() != a.in_channels {
            return bad("input normalization has the wrong channel count");
        }
        for (b, &k) in self.branches.iter().zip(&a.branch_kernels) {
            if b.k != k || b.in_ch != a.in_channels || b.out_ch != a.branch_channels {
                return bad("branch shape disagrees with the architecture");
            }
        }
        let mut in_ch = a.concat_channels();
        for (blk, &out) in self.blocks.iter().zip(&a.block_channels) {
            if blk.conv.in_ch != in_ch || blk.conv.out_ch != out || blk.conv.k != a.block_kernel || blk.bn.channels() != out {
                return bad("block shape disagrees with the architecture");
            }
            if blk.conv.bias.iter().any(|&b| b != T::zero()) {
                return bad("block conv bias must be zero");
            }
            if blk.bn.running_var.iter().any(|&v| v < T::zero()) {
                return bad("negative running variance");
            }
            in_ch = out;
        }
        if self.hidden.n_in != a.flatten_dim() || self.hidden.n_out != a.hidden || self.output.n_in != a.hidden || self.output.n_out != a.n_classes {
            return bad("dense head disagrees with the architecture");
        }
        Ok(())
    }

    /// Parameter tensors in declaration order.
    pub fn param_info(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        let mut push = |name: String, layer: usize, len: usize| out.push(ParamInfo { name, layer, len });
        for (i, b) in self.branches.iter().enumerate() {
            push(format!("branch{i}.weight"), 0, b.weight.len());
            push(format!("branch{i}.bias"), 0, b.bias.len());
        }
        for (i, blk) in self.blocks.iter().enumerate() {
            push(format!("block{i}.conv.weight"), i + 1, blk.conv.weight.len());
            push(format!("block{i}.bn.gamma"), i + 1, blk.bn.gamma.len());
            push(format!("block{i}.bn.beta"), i + 1, blk.bn.beta.len());
        }
        let (h, o) = (self.hidden_layer(), self.output_layer());
        push("hidden.weight".into(), h, self.hidden.weight.len());
        push("hidden.bias".into(), h, self.hidden.bias.len());
        push("output.weight".into(), o, self.output.weight.len());
        push("output.bias".into(), o, self.output.bias.len());
        out
    }

    pub fn params(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for b in &self.branches {
            out.push(&b.weight);
            out.push(&b.bias);
        }
        for blk in &self.blocks {
            out.push(&blk.conv.weight);
            out.push(&blk.bn.gamma);
            out.push(&blk.bn.beta);
        }
        out.extend([&self.hidden.weight[..], &self.hidden.bias, &self.output.weight, &self.output.bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for b in &mut self.branches {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
        }
        for blk in &mut self.blocks {
            out.push(&mut blk.conv.weight);
            out.push(&mut blk.bn.gamma);
            out.push(&mut blk.bn.beta);
        }
        out.extend([&mut self.hidden.weight[..], &mut self.hidden.bias, &mut self.output.weight, &mut self.output.bias]);
        out
    }

    /// Every stored tensor (parameters and batch-norm running statistics) with
    /// its layer index, in serialization order.
    pub fn state_tensors(&self) -> Vec<(usize, &[T])> {
        let mut out: Vec<(usize, &[T])> = Vec::new();
        for b in &self.branches {
            out.push((0, &b.weight));
            out.push((0, &b.bias));
        }
        for (i, blk) in self.blocks.iter().enumerate() {
            for t in [&blk.conv.weight, &blk.bn.gamma, &blk.bn.beta, &blk.bn.running_mean, &blk.bn.running_var] {
                out.push((i + 1, t));
            }
        }
        let (h, o) = (self.hidden_layer(), self.output_layer());
        out.extend([(h, &self.hidden.weight[..]), (h, &self.hidden.bias), (o, &self.output.weight), (o, &self.output.bias)]);
        out
    }

    pub fn state_tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for b in &mut self.branches {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
        }
        for blk in &mut self.blocks {
            out.push(&mut blk.conv.weight);
            out.push(&mut blk.bn.gamma);
            out.push(&mut blk.bn.beta);
            out.push(&mut blk.bn.running_mean);
            out.push(&mut blk.bn.running_var);
        }
        out.extend([&mut self.hidden.weight[..], &mut self.hidden.bias, &mut self.output.weight, &mut self.output.bias]);
        out
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> MscnnModel<U> {
        let cv = |v: &[T]| -> Vec<U> { v.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect() };
        let conv = |c: &ConvLayer<T>| ConvLayer {
            in_ch: c.in_ch,
            out_ch: c.out_ch,
            k: c.k,
            weight: cv(&c.weight),
            bias: cv(&c.bias),
        };
        let dense = |d: &DenseLayer<T>| DenseLayer {
            n_in: d.n_in,
            n_out: d.n_out,
            weight: cv(&d.weight),
            bias: cv(&d.bias),
        };
        MscnnModel {
            arch: self.arch.clone(),
            norm: self.norm.clone(),
            branches: self.branches.iter().map(conv).collect(),
            blocks: self
                .blocks
                .iter()
                .map(|b| ConvBlock {
                    conv: conv(&b.conv),
                    bn: BatchNormLayer {
                        gamma: cv(&b.bn.gamma),
                        beta: cv(&b.bn.beta),
                        running_mean: cv(&b.bn.running_mean),
                        running_var: cv(&b.bn.running_var),
                    },
                })
                .collect(),
            hidden: dense(&self.hidden),
            output: dense(&self.output),
            frozen: self.frozen.clone(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn n_trainable_params(&self) -> usize {
        self.param_info().iter().filter(|p| !self.frozen[p.layer]).map(|p| p.len).sum()
    }

    /// SHA-256 (hex) over the little-endian bytes of the state tensors whose
    /// layer satisfies `select`.
    pub fn checksum_where(&self, select: impl Fn(usize) -> bool) -> String {
        let mut bytes = Vec::new();
        for (layer, t) in self.state_tensors() {
            if select(layer) {
                T::extend_le_bytes(t, &mut bytes);
            }
        }
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn checksum(&self) -> String {
        self.checksum_where(|_| true)
    }

    pub fn frozen_checksum(&self) -> String {
        self.checksum_where(|l| self.frozen[l])
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        let a = &self.arch;
        if x.channels() != a.in_channels || x.height() != a.patch_size || x.width() != a.patch_size {
            return Err(Error::ShapeMismatch(format!(
                "model expects (batch, {}, {}, {}), got {:?}",
                a.in_channels,
                a.patch_size,
                a.patch_size,
                x.shape()
            )));
        }
        if x.batch() == 0 {
            return Err(Error::Empty("empty batch".into()));
        }
        Ok(())
    }

    fn normalize(&self, x: &Tensor4<T>) -> Tensor4<T> {
        if self.norm.is_identity() {
            return x.clone();
        }
        let mut y = x.clone();
        let [b, c, h, w] = x.shape();
        let plane = h * w;
        for s in 0..b {
            for ch in 0..c {
                let m = T::from_f64_lossy(self.norm.mean[ch] as f64);
                let k = T::from_f64_lossy(self.norm.inv_std[ch] as f64);
                for v in &mut y.data_mut()[(s * c + ch) * plane..][..plane] {
                    *v = (*v - m) * k;
                }
            }
        }
        y
    }

    fn multiscale(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let outs = self.branches.iter().map(|b| b.forward(x)).collect::<Result<Vec<_>>>()?;
        Tensor4::concat_channels(&outs)
    }

    /// Eval-mode logits, row-major (batch, n_classes). Pure: no state changes.
    pub fn forward_eval(&self, x: &Tensor4<T>) -> Result<Vec<T>> {
        self.check_input(x)?;
        let mut h = self.multiscale(&self.normalize(x))?;
        for blk in &self.blocks {
            let z = blk.bn.forward_eval(&blk.conv.forward(&h)?)?;
            h = maxpool2_forward(&relu_forward(&z))?.0;
        }
        let b = h.batch();
        let flat = h.reshape([b, self.arch.flatten_dim(), 1, 1])?;
        let hid = relu_forward(&self.hidden.forward(&flat)?);
        Ok(self.output.forward(&hid)?.into_data())
    }

    /// Training-mode forward pass. Unfrozen batch-norm layers use batch
    /// statistics and update their running statistics; frozen ones run in
    /// eval mode.
    pub fn forward_train(&mut self, x: &Tensor4<T>, dropout: DropoutMask<'_, T>) -> Result<(Vec<T>, ForwardCache<T>)> {
        self.check_input(x)?;
        let input = self.normalize(x);
        let mut h = self.multiscale(&input)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            let conv_out = blk.conv.forward(&h)?;
            let (z, bn) = if self.frozen[i + 1] {
                (blk.bn.forward_eval(&conv_out)?, None)
            } else {
                let (z, c) = blk.bn.forward_train(&conv_out)?;
                (z, Some(c))
            };
            let activated = relu_forward(&z);
            let (pooled, argmax) = maxpool2_forward(&activated)?;
            blocks.push(BlockCache {
                input: std::mem::replace(&mut h, pooled),
                conv_out,
                bn,
                activated,
                argmax,
            });
        }
        let b = h.batch();
        let flat = h.reshape([b, self.arch.flatten_dim(), 1, 1])?;
        let hidden_act = relu_forward(&self.hidden.forward(&flat)?);
        let (dropped, mask) = match dropout {
            DropoutMask::Sample(r) => dropout_forward(&hidden_act, self.arch.dropout, Mode::Train, r)?,
            DropoutMask::Fixed(m) => {
                if m.len() != hidden_act.data().len() {
                    return Err(Error::ShapeMismatch("fixed dropout mask has the wrong length".into()));
                }
                let mut d = hidden_act.clone();
                for (v, &k) in d.data_mut().iter_mut().zip(m) {
                    *v *= k;
                }
                (d, Some(m.to_vec()))
            }
        };
        let logits = self.output.forward(&dropped)?.into_data();
        Ok((
            logits,
            ForwardCache {
                input,
                blocks,
                flat,
                hidden_act,
                mask,
                dropped,
            },
        ))
    }

    /// Reverse-mode gradients for every parameter tensor, aligned with
    /// [`params`](Self::params). Frozen tensors get `None`; propagation stops
    /// below the lowest trainable layer.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_logits: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let b = cache.input.batch();
        let nb = self.blocks.len();
        let lowest_trainable = self.frozen.iter().position(|f| !f);
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.params().len()];
        let Some(lowest) = lowest_trainable else {
            return Ok(grads);
        };
        let n_branch_tensors = 2 * self.branches.len();
        let block_slot = |i: usize| n_branch_tensors + 3 * i;
        let hidden_slot = n_branch_tensors + 3 * nb;

        let g = Tensor4::matrix(b, self.arch.n_classes, grad_logits.to_vec())?;
        let (l_out, l_hid) = (self.output_layer(), self.hidden_layer());
        let (g, og) = self.output.backward(&cache.dropped, &g, lowest < l_out)?;
        if !self.frozen[l_out] {
            grads[hidden_slot + 2] = Some(og.weight);
            grads[hidden_slot + 3] = Some(og.bias);
        }
        let Some(g) = g else { return Ok(grads) };
        let g = dropout_backward(&g, cache.mask.as_deref());
        let g = relu_backward(&cache.hidden_act, &g);
        let (g, hg) = self.hidden.backward(&cache.flat, &g, lowest < l_hid)?;
        if !self.frozen[l_hid] {
            grads[hidden_slot] = Some(hg.weight);
            grads[hidden_slot + 1] = Some(hg.bias);
        }
        let Some(g) = g else { return Ok(grads) };
        let last_shape = match cache.blocks.last() {
            Some(c) => {
                let [bb, ch, h, w] = c.activated.shape();
                [bb, ch, h / 2, w / 2]
            }
            None => unreachable!("architecture has at least one block"),
        };
        let mut g = g.reshape(last_shape)?;
        for i in (0..nb).rev() {
            let blk = &self.blocks[i];
            let c = &cache.blocks[i];
            let layer = i + 1;
            let gp = maxpool2_backward(&g, &c.argmax, c.activated.shape())?;
            let gz = relu_backward(&c.activated, &gp);
            let (gconv, bng) = match &c.bn {
                Some(bc) => blk.bn.backward_train(bc, &gz)?,
                None => blk.bn.backward_eval(&c.conv_out, &gz)?,
            };
            let (gin, cg) = blk.conv.backward(&c.input, &gconv, lowest < layer)?;
            if !self.frozen[layer] {
                let s = block_slot(i);
                grads[s] = Some(cg.weight);
                grads[s + 1] = Some(bng.gamma);
                grads[s + 2] = Some(bng.beta);
            }
            match gin {
                Some(gi) => g = gi,
                None => return Ok(grads),
            }
        }
        if !self.frozen[0] {
            let parts = g.split_channels(&vec![self.arch.branch_channels; self.branches.len()])?;
            for (j, (br, gp)) in self.branches.iter().zip(&parts).enumerate() {
                let (_, bg) = br.backward(&cache.input, gp, false)?;
                grads[2 * j] = Some(bg.weight);
                grads[2 * j + 1] = Some(bg.bias);
            }
        }
        Ok(grads)
    }
}

/// Copies patches into an (n, channels, size, size) tensor.
pub fn batch_tensor<T: Scalar>(patches: &[&crate::raster::Patch]) -> Result<Tensor4<T>> {
    let first = patches.first().ok_or_else(|| Error::Empty("empty batch".into()))?;
    let (c, s) = (first.n_channels, first.size);
    let mut data = Vec::with_capacity(patches.len() * c * s * s);
    for p in patches {
        if p.n_channels != c || p.size != s {
            return Err(Error::ShapeMismatch("patches in a batch differ in shape".into()));
        }
        data.extend(p.data.iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Tensor4::new([patches.len(), c, s, s], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::loss::softmax_cross_entropy;
    use rand::Rng as _;

    fn tiny() -> Architecture {
        Architecture {
            in_channels: 3,
            patch_size: 8,
            branch_kernels: vec![3, 5, 7],
            branch_channels: 4,
            block_channels: vec![6, 8],
            block_kernel: 3,
            hidden: 12,
            dropout: 0.25,
            n_classes: 17,
        }
    }

    fn random_input(shape: [usize; 4], seed: u64) -> Tensor4<f64> {
        let mut r = rng::rng(seed);
        let n = shape.iter().product();
        Tensor4::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn default_shapes() {
        let arch = Architecture::default();
        assert_eq!(arch.concat_channels(), 96);
        assert_eq!(arch.flatten_dim(), 256);
        let m = MscnnModel::<f32>::new(arch, 1).unwrap();
        m.check().unwrap();
        let x = Tensor4::zeros([2, 10, 32, 32]);
        assert_eq!(m.forward_eval(&x).unwrap().len(), 2 * 17);
        let bad = Tensor4::zeros([2, 10, 16, 16]);
        assert!(m.forward_eval(&bad).is_err());
    }

    #[test]
    fn eval_is_pure() {
        let m = MscnnModel::<f64>::new(tiny(), 3).unwrap();
        let x = random_input([3, 3, 8, 8], 4);
        assert_eq!(m.forward_eval(&x).unwrap(), m.forward_eval(&x).unwrap());
    }

    #[test]
    fn param_lists_agree() {
        let m = MscnnModel::<f32>::new(tiny(), 3).unwrap();
        let info = m.param_info();
        let params = m.params();
        assert_eq!(info.len(), params.len());
        for (i, p) in info.iter().zip(&params) {
            assert_eq!(i.len, p.len());
        }
        assert_eq!(m.state_tensors().len(), params.len() + 2 * m.blocks.len());
    }

    #[test]
    fn batch_permutation_leaves_gradient_unchanged() {
        let mut m = MscnnModel::<f64>::new(tiny(), 5).unwrap();
        m.arch.dropout = 0.0;
        let x = random_input([4, 3, 8, 8], 6);
        let labels = [1usize, 4, 4, 16];
        let perm = [2usize, 0, 3, 1];
        let mut px = Vec::new();
        for &p in &perm {
            px.extend_from_slice(x.sample(p));
        }
        let px = Tensor4::new(x.shape(), px).unwrap();
        let plabels: Vec<usize> = perm.iter().map(|&p| labels[p]).collect();
        let grads = |m: &mut MscnnModel<f64>, x: &Tensor4<f64>, l: &[usize]| {
            let mut r = rng::rng(0);
            let (logits, cache) = m.forward_train(x, DropoutMask::Sample(&mut r)).unwrap();
            let (_, g) = softmax_cross_entropy(&logits, l, 17).unwrap();
            m.backward(&cache, &g).unwrap()
        };
        let a = grads(&mut m.clone(), &x, &labels);
        let b = grads(&mut m.clone(), &px, &plabels);
        for (ga, gb) in a.iter().zip(&b) {
            for (u, v) in ga.as_ref().unwrap().iter().zip(gb.as_ref().unwrap()) {
                assert!((u - v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn frozen_layers_get_no_gradient() {
        let mut m = MscnnModel::<f64>::new(tiny(), 5).unwrap();
        m.frozen = vec![true, true, false, false, false];
        let x = random_input([2, 3, 8, 8], 6);
        let mut r = rng::rng(0);
        let (logits, cache) = m.forward_train(&x, DropoutMask::Sample(&mut r)).unwrap();
        let (_, g) = softmax_cross_entropy(&logits, &[0, 1], 17).unwrap();
        let grads = m.backward(&cache, &g).unwrap();
        for (info, g) in m.param_info().iter().zip(&grads) {
            assert_eq!(g.is_some(), !m.frozen[info.layer], "{}", info.name);
        }
    }

    #[test]
    fn zero_loss_gradient_gives_zero_parameter_gradients() {
        let mut m = MscnnModel::<f64>::new(tiny(), 5).unwrap();
        let x = random_input([2, 3, 8, 8], 6);
        let mut r = rng::rng(0);
        let (_, cache) = m.forward_train(&x, DropoutMask::Sample(&mut r)).unwrap();
        let grads = m.backward(&cache, &[0.0; 34]).unwrap();
        assert!(grads.iter().flatten().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn checksum_tracks_state() {
        let a = MscnnModel::<f32>::new(tiny(), 1).unwrap();
        let mut b = a.clone();
        assert_eq!(a.checksum(), b.checksum());
        b.blocks[0].bn.running_mean[0] = 0.5;
        assert_ne!(a.checksum(), b.checksum());
        assert_eq!(a.checksum_where(|l| l != 1), b.checksum_where(|l| l != 1));
    }
}
