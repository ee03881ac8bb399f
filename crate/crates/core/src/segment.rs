//! Normalized temporal segments.

use crate::graph::{inverse_sigmoid, sigmoid};
use crate::kernels::segment_iou_with_grad;
use crate::tensor::Scalar;

/// A temporal segment in normalized `(center, length)` form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub center: Scalar,
    pub length: Scalar,
}

impl Segment {
    pub const fn new(center: Scalar, length: Scalar) -> Self {
        Self { center, length }
    }

    pub fn from_interval(start: Scalar, end: Scalar) -> Self {
        Self {
            center: 0.5 * (start + end),
            length: end - start,
        }
    }

    pub fn start(&self) -> Scalar {
        self.center - 0.5 * self.length
    }

    pub fn end(&self) -> Scalar {
        self.center + 0.5 * self.length
    }

    pub fn interval(&self) -> (Scalar, Scalar) {
        (self.start(), self.end())
    }

    /// The interval view clipped to `[0, 1]`.
    pub fn clipped(&self) -> (Scalar, Scalar) {
        (self.start().clamp(0.0, 1.0), self.end().clamp(0.0, 1.0))
    }

    pub fn as_array(&self) -> [Scalar; 2] {
        [self.center, self.length]
    }

    /// Moves both fields by offsets applied in log-odds space.
    pub fn refine(&self, d_center: Scalar, d_length: Scalar) -> Self {
        Self {
            center: sigmoid(d_center + inverse_sigmoid(self.center)),
            length: sigmoid(d_length + inverse_sigmoid(self.length)),
        }
    }
}

/// Intersection over union of two intervals; zero for empty unions.
pub fn interval_iou(a: (Scalar, Scalar), b: (Scalar, Scalar)) -> Scalar {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn segment_iou(a: &Segment, b: &Segment) -> Scalar {
    segment_iou_with_grad(a.as_array(), b.as_array()).0
}

/// L1 distance in `(center, length)` coordinates.
pub fn segment_l1(a: &Segment, b: &Segment) -> Scalar {
    libm::fabs(a.center - b.center) + libm::fabs(a.length - b.length)
}

/// Negative IoU, in `[-1, 0]`.
pub fn iou_loss(a: &Segment, b: &Segment) -> Scalar {
    -segment_iou(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_examples() {
        let a = Segment::new(0.5, 0.2);
        assert_eq!(segment_l1(&a, &a), 0.0);
        let b = Segment::new(0.6, 0.2);
        assert!((segment_l1(&a, &b) - 0.1).abs() < 1e-12);
        assert_eq!(segment_l1(&a, &b), segment_l1(&b, &a));
    }

    #[test]
    fn iou_loss_examples() {
        let s = Segment::new(0.3, 0.2);
        assert!((iou_loss(&s, &s) + 1.0).abs() < 1e-12);
        let far = Segment::new(0.9, 0.1);
        assert_eq!(iou_loss(&s, &far), 0.0);
        let a = Segment::from_interval(0.2, 0.6);
        let b = Segment::from_interval(0.4, 0.8);
        assert!((iou_loss(&a, &b) + 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn refine_examples() {
        let s = Segment::new(0.37, 0.21);
        let r = s.refine(0.0, 0.0);
        assert!((r.center - s.center).abs() < 1e-9 && (r.length - s.length).abs() < 1e-9);
        let r = Segment::new(0.5, 0.3).refine(1.0, 0.0);
        assert!((r.center - 0.731_058_578_630_004_9).abs() < 1e-9);
        assert!(r.center > 0.5);
    }

    #[test]
    fn interval_round_trip() {
        let s = Segment::from_interval(0.125, 0.625);
        assert_eq!(s.interval(), (0.125, 0.625));
    }
}
