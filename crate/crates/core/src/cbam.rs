//! Convolutional block attention: sequential channel-then-spatial
//! multiplicative gating of a `[N,C,D,H,W]` feature map.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{he_uniform, Conv3dLayer};
use crate::tensor::{Element, PoolKind, Tape, Tensor};

/// Channel gate: a two-layer MLP (no biases) shared between the global
/// average and global max descriptors, squashed by a sigmoid. Every
/// gate coefficient lies in (0,1).
#[derive(Clone)]
pub struct ChannelAttention<T: Element> {
    pub w1: Tensor<T>, // [C/r, C]
    pub w2: Tensor<T>, // [C, C/r]
}

impl<T: Element> ChannelAttention<T> {
    pub fn new(channels: usize, ratio: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if ratio == 0 || channels % ratio != 0 {
            return Err(Error::BadReduction { channels, ratio });
        }
        let hidden = channels / ratio;
        Ok(ChannelAttention {
            w1: he_uniform(rng, channels, vec![hidden, channels]),
            w2: he_uniform(rng, hidden, vec![channels, hidden]),
        })
    }

    /// `sigmoid(mlp(global_avg(F)) + mlp(global_max(F)))`, shape `[N,C]`.
    pub fn forward(&self, tape: &mut Tape<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
        let avg = tape.global_pool(PoolKind::Avg, f)?;
        let max = tape.global_pool(PoolKind::Max, f)?;
        let a = self.mlp(tape, &avg)?;
        let b = self.mlp(tape, &max)?;
        let s = tape.add(&a, &b)?;
        tape.sigmoid(&s)
    }

    fn mlp(&self, tape: &mut Tape<T>, d: &Tensor<T>) -> Result<Tensor<T>> {
        let w1t = tape.transpose(&self.w1)?;
        let h = tape.matmul(d, &w1t)?;
        let h = tape.relu(&h)?;
        let w2t = tape.transpose(&self.w2)?;
        tape.matmul(&h, &w2t)
    }

    pub(crate) fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}.w1"), &self.w1));
        out.push((format!("{prefix}.w2"), &self.w2));
    }

    pub(crate) fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{prefix}.w1"), &mut self.w1));
        out.push((format!("{prefix}.w2"), &mut self.w2));
    }
}

/// Spatial gate: channel-average and channel-max maps concatenated into
/// two channels, convolved with an odd kernel at shape-preserving
/// padding, squashed by a sigmoid. Output shape `[N,1,D,H,W]`.
#[derive(Clone)]
pub struct SpatialAttention<T: Element> {
    pub conv: Conv3dLayer<T>,
}

impl<T: Element> SpatialAttention<T> {
    pub fn new(kernel: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::EvenKernel { kernel });
        }
        Ok(SpatialAttention { conv: Conv3dLayer::new(2, 1, kernel, 1, (kernel - 1) / 2, rng) })
    }

    pub fn forward(&self, tape: &mut Tape<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
        let avg = tape.channel_reduce(PoolKind::Avg, f)?;
        let max = tape.channel_reduce(PoolKind::Max, f)?;
        let cat = tape.concat_channels(&avg, &max)?;
        let y = self.conv.forward(tape, &cat)?;
        tape.sigmoid(&y)
    }

    pub(crate) fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.conv.visit_params(&format!("{prefix}.conv"), out);
    }

    pub(crate) fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.conv.visit_params_mut(&format!("{prefix}.conv"), out);
    }
}

/// Channel attention followed by spatial attention:
/// `F'' = (F ⊙ ca(F)) ⊙ sa(F ⊙ ca(F))`. Shape-preserving, and every
/// output magnitude is bounded by the input magnitude since both gates
/// lie in (0,1).
#[derive(Clone)]
pub struct CbamBlock<T: Element> {
    pub channel: ChannelAttention<T>,
    pub spatial: SpatialAttention<T>,
}

impl<T: Element> CbamBlock<T> {
    pub fn new(channels: usize, ratio: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(CbamBlock {
            channel: ChannelAttention::new(channels, ratio, rng)?,
            spatial: SpatialAttention::new(kernel, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
        let ca = self.channel.forward(tape, f)?;
        let f1 = tape.scale_channels(f, &ca)?;
        let sa = self.spatial.forward(tape, &f1)?;
        tape.scale_spatial(&f1, &sa)
    }

    pub(crate) fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.channel.visit_params(&format!("{prefix}.channel"), out);
        self.spatial.visit_params(&format!("{prefix}.spatial"), out);
    }

    pub(crate) fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.channel.visit_params_mut(&format!("{prefix}.channel"), out);
        self.spatial.visit_params_mut(&format!("{prefix}.spatial"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn zeroed_cbam(channels: usize) -> CbamBlock<f64> {
        let mut blk = CbamBlock::new(channels, 2, 3, &mut rng()).unwrap();
        blk.channel.w1 = Tensor::zeros(blk.channel.w1.shape().to_vec()).with_grad();
        blk.channel.w2 = Tensor::zeros(blk.channel.w2.shape().to_vec()).with_grad();
        blk.spatial.conv.weight = Tensor::zeros(blk.spatial.conv.weight.shape().to_vec()).with_grad();
        blk
    }

    #[test]
    fn reduction_must_divide_channels() {
        assert!(matches!(
            ChannelAttention::<f64>::new(6, 4, &mut rng()),
            Err(Error::BadReduction { channels: 6, ratio: 4 })
        ));
    }

    #[test]
    fn spatial_kernel_must_be_odd() {
        assert!(matches!(
            SpatialAttention::<f64>::new(4, &mut rng()),
            Err(Error::EvenKernel { kernel: 4 })
        ));
    }

    #[test]
    fn zero_mlp_weights_gate_at_half() {
        let blk = zeroed_cbam(4);
        let mut tape = Tape::new();
        let f = Tensor::from_vec(vec![1, 4, 1, 2, 2], (0..16).map(|i| i as f64 - 8.0).collect()).unwrap();
        let gate = blk.channel.forward(&mut tape, &f).unwrap();
        assert!(gate.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn constant_map_doubles_shared_descriptor() {
        // spatially constant input: avg and max descriptors coincide, so
        // the gate is sigmoid(2 * mlp(d))
        let blk = CbamBlock::<f64>::new(4, 2, 3, &mut rng()).unwrap();
        let f = Tensor::from_vec(
            vec![1, 4, 1, 1, 2],
            vec![1.0, 1.0, -2.0, -2.0, 0.5, 0.5, 3.0, 3.0],
        )
        .unwrap();
        let mut tape = Tape::new();
        let gate = blk.channel.forward(&mut tape, &f).unwrap();

        let mut tape2 = Tape::new();
        let d = tape2.global_pool(PoolKind::Avg, &f).unwrap();
        let w1t = tape2.transpose(&blk.channel.w1).unwrap();
        let h = tape2.matmul(&d, &w1t).unwrap();
        let h = tape2.relu(&h).unwrap();
        let w2t = tape2.transpose(&blk.channel.w2).unwrap();
        let m = tape2.matmul(&h, &w2t).unwrap();
        let twice = tape2.affine(&m, 2.0, 0.0).unwrap();
        let want = tape2.sigmoid(&twice).unwrap();
        for (g, w) in gate.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn single_channel_spatial_maps_equal_input() {
        let blk = SpatialAttention::<f64>::new(3, &mut rng()).unwrap();
        let f = Tensor::from_vec(vec![1, 1, 1, 2, 2], vec![0.2, -0.4, 0.6, -0.8]).unwrap();
        let mut tape = Tape::new();
        let avg = tape.channel_reduce(PoolKind::Avg, &f).unwrap();
        let max = tape.channel_reduce(PoolKind::Max, &f).unwrap();
        assert_eq!(avg.data(), f.data());
        assert_eq!(max.data(), f.data());
        let gate = blk.forward(&mut tape, &f).unwrap();
        assert_eq!(gate.shape(), &[1, 1, 1, 2, 2]);
    }

    #[test]
    fn zero_weight_cbam_scales_by_quarter() {
        let blk = zeroed_cbam(4);
        let f = Tensor::from_vec(vec![1, 4, 1, 2, 2], (0..16).map(|i| i as f64 - 7.5).collect()).unwrap();
        let mut tape = Tape::new();
        let y = blk.forward(&mut tape, &f).unwrap();
        for (yv, fv) in y.data().iter().zip(f.data()) {
            assert!((yv - 0.25 * fv).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_input_stays_zero() {
        let blk = CbamBlock::<f64>::new(4, 2, 3, &mut rng()).unwrap();
        let f = Tensor::zeros(vec![2, 4, 2, 2, 2]);
        let mut tape = Tape::new();
        let y = blk.forward(&mut tape, &f).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_gate_applies_before_spatial_gate() {
        // zero spatial weights only: output must be 0.5 * (channel-gated F),
        // not 0.5 * F
        let mut blk = CbamBlock::<f64>::new(4, 2, 3, &mut rng()).unwrap();
        blk.spatial.conv.weight = Tensor::zeros(blk.spatial.conv.weight.shape().to_vec()).with_grad();
        let f = Tensor::from_vec(vec![1, 4, 1, 2, 2], (0..16).map(|i| (i as f64) * 0.3 - 2.0).collect())
            .unwrap();
        let mut tape = Tape::new();
        let y = blk.forward(&mut tape, &f).unwrap();

        let mut tape2 = Tape::new();
        let ca = blk.channel.forward(&mut tape2, &f).unwrap();
        let f1 = tape2.scale_channels(&f, &ca).unwrap();
        for (yv, f1v) in y.data().iter().zip(f1.data()) {
            assert!((yv - 0.5 * f1v).abs() < 1e-15);
        }
        // and it differs from gating the raw input
        assert!(y.data().iter().zip(f.data()).any(|(yv, fv)| (yv - 0.5 * fv).abs() > 1e-9));
    }
}
