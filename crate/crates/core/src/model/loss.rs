use crate::dsp::MagnitudeSpectrogram;
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

/// Time-frequency mask with entries in `[0, 1]`, stored `[T, F̄]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    frames: usize,
    bins: usize,
    data: Vec<f32>,
}

impl Mask {
    pub fn new(frames: usize, bins: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * bins {
            return Err(Error::shape(format!(
                "mask {frames}x{bins} needs {} values, got {}",
                frames * bins,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Numeric(format!("mask value {v} outside [0, 1]")));
        }
        Ok(Self { frames, bins, data })
    }

    pub fn ones(frames: usize, bins: usize) -> Self {
        Self {
            frames,
            bins,
            data: vec![1.0; frames * bins],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Element-wise product of a magnitude spectrogram and a mask.
pub fn apply_mask(mag: &MagnitudeSpectrogram, mask: &Mask) -> Result<MagnitudeSpectrogram> {
    if mag.frames() != mask.frames || mag.bins() != mask.bins {
        return Err(Error::shape(format!(
            "magnitude {}x{} vs mask {}x{}",
            mag.frames(),
            mag.bins(),
            mask.frames,
            mask.bins
        )));
    }
    let data = mag.data().iter().zip(&mask.data).map(|(m, k)| m * *k as f64).collect();
    MagnitudeSpectrogram::new(mag.frames(), mag.bins(), data)
}

/// Squared Euclidean distance summed over every time-frequency cell.
pub fn l2_loss(est: &MagnitudeSpectrogram, target: &MagnitudeSpectrogram) -> Result<f64> {
    if est.frames() != target.frames() || est.bins() != target.bins() {
        return Err(Error::shape(format!(
            "estimate {}x{} vs target {}x{}",
            est.frames(),
            est.bins(),
            target.frames(),
            target.bins()
        )));
    }
    Ok(est.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum())
}

/// Assignment of the two outputs to the two targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Permutation {
    Identity,
    Swapped,
}

impl Permutation {
    /// Target index matched to output `i`.
    pub fn target_of(self, i: usize) -> usize {
        match self {
            Self::Identity => i,
            Self::Swapped => 1 - i,
        }
    }
}

fn check_pair<T>(what: &str, xs: &[T]) -> Result<()> {
    if xs.len() != 2 {
        return Err(Error::invalid(format!(
            "permutation loss needs 2 {what}, got {}",
            xs.len()
        )));
    }
    Ok(())
}

/// Lower of the two assignment losses of masked mixtures to targets; ties go
/// to the identity.
pub fn pit_loss(
    masks: &[Mask],
    mixture: &MagnitudeSpectrogram,
    targets: &[MagnitudeSpectrogram],
) -> Result<(f64, Permutation)> {
    check_pair("masks", masks)?;
    check_pair("targets", targets)?;
    let est0 = apply_mask(mixture, &masks[0])?;
    let est1 = apply_mask(mixture, &masks[1])?;
    let ident = l2_loss(&est0, &targets[0])? + l2_loss(&est1, &targets[1])?;
    let swap = l2_loss(&est0, &targets[1])? + l2_loss(&est1, &targets[0])?;
    Ok(if swap < ident {
        (swap, Permutation::Swapped)
    } else {
        (ident, Permutation::Identity)
    })
}

/// `sum((mask ⊙ mag - target)^2)` on the graph.
pub fn masked_l2_node(g: &mut Graph, mag: &Tensor, mask: NodeId, target: &Tensor) -> Result<NodeId> {
    let m = g.constant(mag.clone());
    let est = g.mul(mask, m)?;
    g.sum_squared_error(est, target.clone())
}

/// Graph form of [`pit_loss`]; both assignments are recorded and the lower
/// one is returned.
pub fn pit_loss_node(
    g: &mut Graph,
    mag: &Tensor,
    masks: &[NodeId],
    targets: &[Tensor],
) -> Result<(NodeId, Permutation)> {
    check_pair("masks", masks)?;
    check_pair("targets", targets)?;
    let m = g.constant(mag.clone());
    let e0 = g.mul(masks[0], m)?;
    let e1 = g.mul(masks[1], m)?;
    let a = g.sum_squared_error(e0, targets[0].clone())?;
    let b = g.sum_squared_error(e1, targets[1].clone())?;
    let ident = g.add(a, b)?;
    let c = g.sum_squared_error(e0, targets[1].clone())?;
    let d = g.sum_squared_error(e1, targets[0].clone())?;
    let swap = g.add(c, d)?;
    Ok(if g.scalar(swap) < g.scalar(ident) {
        (swap, Permutation::Swapped)
    } else {
        (ident, Permutation::Identity)
    })
}
