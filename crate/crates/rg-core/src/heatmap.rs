//! 8-bit PGM export of feature-map channels for visual inspection.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Renders one channel of a C×H×W tensor as a binary (P5) PGM image,
/// min-max normalized to 0..255. A constant channel renders as uniform
/// mid-gray.
pub fn channel_to_pgm(tensor: &Tensor, channel: usize) -> Result<Vec<u8>> {
    let shape = tensor.shape();
    if shape.len() != 3 {
        return Err(CoreError::InvalidArgument(format!(
            "heatmap expects a C×H×W tensor, got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if channel >= c {
        return Err(CoreError::InvalidArgument(format!(
            "channel {channel} out of range for {c} channels"
        )));
    }
    let plane = &tensor.data()[channel * h * w..(channel + 1) * h * w];
    let min = plane.iter().cloned().fold(f64::INFINITY as _, |a: crate::tensor::Real, b| a.min(b));
    let max = plane.iter().cloned().fold(f64::NEG_INFINITY as _, |a: crate::tensor::Real, b| a.max(b));
    let span = max - min;

    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    if span <= 0.0 {
        out.extend(std::iter::repeat_n(128u8, h * w));
    } else {
        for &v in plane {
            let n = ((v - min) / span * 255.0).round();
            out.push(n.clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channel_is_uniform_gray() {
        let t = Tensor::filled(&[2, 3, 4], 7.5);
        let pgm = channel_to_pgm(&t, 1).unwrap();
        let header = b"P5\n4 3\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert!(pgm[header.len()..].iter().all(|&b| b == 128));
    }

    #[test]
    fn channel_out_of_range_errors() {
        let t = Tensor::zeros(&[2, 3, 4]);
        assert!(channel_to_pgm(&t, 2).is_err());
    }

    #[test]
    fn dims_are_preserved_and_range_mapped() {
        let mut t = Tensor::zeros(&[1, 2, 2]);
        t.set(&[0, 0, 0], -1.0);
        t.set(&[0, 1, 1], 3.0);
        let pgm = channel_to_pgm(&t, 0).unwrap();
        let body = &pgm[b"P5\n2 2\n255\n".len()..];
        assert_eq!(body.len(), 4);
        assert_eq!(body[0], 0);
        assert_eq!(body[3], 255);
    }
}
