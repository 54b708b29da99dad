//! Dense N-dimensional arrays.
//!
//! [`Tensor`] is a row-major, channels-last (`[batch, height, width,
//! channels]`) f64 array. All operations are pure: inputs are never mutated
//! and repeated calls are bit-identical. Reductions (matmul, the layer
//! modules built on top) use a fixed left-to-right summation order so results
//! are reproducible down to the last bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered list of positive extents.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Shape(Vec<usize>);

impl Shape {
    /// Validates that all extents are at least 1 and that the element count
    /// fits in `usize`.
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::InvalidShape {
                reason: "shape must have at least one dimension".into(),
            });
        }
        let mut count: usize = 1;
        for (axis, &d) in dims.iter().enumerate() {
            if d == 0 {
                return Err(Error::InvalidShape {
                    reason: format!("extent of axis {axis} is 0; all extents must be >= 1"),
                });
            }
            count = count.checked_mul(d).ok_or_else(|| Error::InvalidShape {
                reason: format!("element count of {dims:?} overflows usize"),
            })?;
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn element_count(&self) -> usize {
        self.0.iter().product()
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

/// Elementwise unary functions and their derivatives (derivatives are
/// expressed in terms of the *input*, not the activation output).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryFn {
    Relu,
    Sigmoid,
    Tanh,
    ReluPrime,
    SigmoidPrime,
    TanhPrime,
}

impl UnaryFn {
    /// Scalar evaluation.
    ///
    /// `sigmoid` uses the numerically stable two-branch form. Note that in
    /// f64 the mathematical open range (0,1) saturates to exactly 0 or 1 for
    /// |x| beyond ~36.7; the strict-range guarantee holds for inputs inside
    /// that band, which covers every activation this crate produces in
    /// practice.
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryFn::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            UnaryFn::Sigmoid => sigmoid(x),
            UnaryFn::Tanh => x.tanh(),
            UnaryFn::ReluPrime => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryFn::SigmoidPrime => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            UnaryFn::TanhPrime => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise binary combination.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// Dense row-major f64 array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    /// Construct from row-major values. Errors when the value count does not
    /// match the shape's element count.
    pub fn from_values(shape: Shape, values: Vec<f64>) -> Result<Self> {
        let expected = shape.element_count();
        if values.len() != expected {
            return Err(Error::LengthMismatch {
                shape: shape.to_string(),
                expected,
                actual: values.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: values,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.element_count();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        let n = shape.element_count();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    /// Rank-2 convenience constructor.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::from_values(Shape::new([rows, cols])?, values)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row-major flat view.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable flat view. Used by the optimizer and initializers; layer
    /// operations never mutate their inputs.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Row-major flattening; `from_values(shape, t.flatten())` is the
    /// identity on `t`.
    pub fn flatten(&self) -> Vec<f64> {
        self.data.clone()
    }

    /// Same data, new shape (element counts must agree).
    pub fn reshape(&self, shape: Shape) -> Result<Tensor> {
        if shape.element_count() != self.data.len() {
            return Err(Error::shape_mismatch(
                "reshape",
                format!("{} elements", self.data.len()),
                format!("{shape} ({} elements)", shape.element_count()),
            ));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Element read by multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub(crate) fn offset(&self, index: &[usize]) -> usize {
        let dims = self.shape.dims();
        debug_assert_eq!(index.len(), dims.len(), "index rank mismatch");
        let mut off = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < dims[i], "index {ix} out of bounds for axis {i}");
            off = off * dims[i] + ix;
        }
        off
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix product of two rank-2 tensors `[m,k] x [k,n] -> [m,n]`.
    ///
    /// The reduction over `k` runs left to right, unconditionally, so the
    /// result is bit-reproducible across runs and platforms.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (a, b) = (self, rhs);
        if a.rank() != 2 || b.rank() != 2 {
            return Err(Error::shape_mismatch(
                "matmul",
                "two rank-2 tensors",
                format!("ranks {} and {}", a.rank(), b.rank()),
            ));
        }
        let (m, k) = (a.dims()[0], a.dims()[1]);
        let (k2, n) = (b.dims()[0], b.dims()[1]);
        if k != k2 {
            return Err(Error::shape_mismatch(
                "matmul inner dimension",
                format!("[{m},{k}] x [{k},*]"),
                format!("[{m},{k}] x [{k2},{n}]"),
            ));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &a.data[i * k..(i + 1) * k];
            for j in 0..n {
                let mut acc = 0.0;
                for (kk, &av) in row.iter().enumerate() {
                    acc += av * b.data[kk * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::from_values(Shape::new([m, n])?, out)
    }

    /// Rank-2 transpose.
    pub fn transpose2(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::shape_mismatch(
                "transpose2",
                "rank-2 tensor",
                format!("rank {}", self.rank()),
            ));
        }
        let (m, n) = (self.dims()[0], self.dims()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::from_values(Shape::new([n, m])?, out)
    }

    /// Elementwise application of `f`.
    pub fn map_unary(&self, f: UnaryFn) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f.apply(x)).collect(),
        }
    }

    /// Elementwise combination of two same-shaped tensors.
    pub fn elementwise(&self, rhs: &Tensor, op: BinaryOp) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(Error::shape_mismatch(
                "elementwise",
                self.shape.to_string(),
                rhs.shape.to_string(),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(rhs.data.iter())
            .map(|(&a, &b)| match op {
                BinaryOp::Add => a + b,
                BinaryOp::Sub => a - b,
                BinaryOp::Mul => a * b,
            })
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.elementwise(rhs, BinaryOp::Add)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.elementwise(rhs, BinaryOp::Sub)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.elementwise(rhs, BinaryOp::Mul)
    }

    /// Multiply every element by a scalar.
    pub fn scale(&self, s: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| x * s).collect(),
        }
    }

    /// Round every element to the nearest f32 value (kept as f64).
    ///
    /// Model parameters live on this grid: checkpoints encode 32-bit floats,
    /// and keeping the in-memory values on the same grid makes save/load
    /// round-trips bit-identical while all arithmetic stays f64.
    pub fn snap_to_f32(&mut self) {
        for v in self.data.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(dims: &[usize], values: &[f64]) -> Tensor {
        Tensor::from_values(Shape::new(dims.to_vec()).unwrap(), values.to_vec()).unwrap()
    }

    #[test]
    fn from_values_is_row_major() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(a.at(&[1, 1]), 4.0);
        assert_eq!(a.at(&[0, 1]), 2.0);
    }

    #[test]
    fn from_values_zero_vector() {
        let z = t(&[3], &[0.0, 0.0, 0.0]);
        assert_eq!(z.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn from_values_rejects_length_mismatch() {
        let err = Tensor::from_values(Shape::new([2, 3]).unwrap(), vec![0.0; 5]).unwrap_err();
        match err {
            Error::LengthMismatch {
                expected, actual, ..
            } => {
                assert_eq!(expected, 6);
                assert_eq!(actual, 5);
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn shape_rejects_zero_extent_and_overflow() {
        assert!(Shape::new([2, 0, 3]).is_err());
        assert!(Shape::new([usize::MAX, 2]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(id.matmul(&b).unwrap(), b);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.dims(), &[1, 1]);
        assert_eq!(c.data()[0], 11.0);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        assert!(matches!(
            a.matmul(&b),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = crate::rng::stream(11, "test.matmul");
        let a = crate::oracles::random_tensor(&mut rng, &[4, 5], 1.0);
        let b = crate::oracles::random_tensor(&mut rng, &[5, 3], 1.0);
        let got = a.matmul(&b).unwrap();
        let want = crate::oracles::matmul_naive(&a, &b);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() <= 1e-12, "got {g}, oracle {w}");
        }
    }

    #[test]
    fn map_unary_pointwise_values() {
        let x = t(&[3], &[0.0, -1.0, 2.0]);
        let s = x.map_unary(UnaryFn::Sigmoid);
        assert_eq!(s.data()[0], 0.5);
        let r = x.map_unary(UnaryFn::Relu);
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
    }

    // Reference values computed independently with 40-digit arithmetic and
    // frozen verbatim; the extra digits are intentional.
    #[allow(clippy::excessive_precision)]
    const TANH_REFERENCE: &[(f64, f64)] = &[
        (-2.5, -0.98661429815143028888),
        (-1.25, -0.84828363995751289761),
        (-0.5, -0.4621171572600097585),
        (-0.1, -0.099667994624955817118),
        (0.0, 0.0),
        (0.3, 0.29131261245159090582),
        (0.9, 0.71629787019902442081),
        (1.7, 0.93540907060309898052),
        (3.1, 0.99594935922190023573),
    ];

    #[allow(clippy::excessive_precision)]
    const SIGMOID_REFERENCE: &[(f64, f64)] = &[
        (-2.5, 0.075858180021243551193),
        (-1.25, 0.222700138825308853),
        (-0.5, 0.37754066879814543536),
        (-0.1, 0.4750208125210600139),
        (0.0, 0.5),
        (0.3, 0.57444251681165898715),
        (0.9, 0.71094950262500396346),
        (1.7, 0.84553473491646529567),
        (3.1, 0.95689274505891387745),
    ];

    #[test]
    fn tanh_matches_high_precision_reference() {
        for &(x, want) in TANH_REFERENCE {
            let got = UnaryFn::Tanh.apply(x);
            assert!((got - want).abs() <= 1e-12, "tanh({x}) = {got}, want {want}");
        }
    }

    #[test]
    fn sigmoid_matches_high_precision_reference() {
        for &(x, want) in SIGMOID_REFERENCE {
            let got = UnaryFn::Sigmoid.apply(x);
            assert!(
                (got - want).abs() <= 1e-12,
                "sigmoid({x}) = {got}, want {want}"
            );
        }
    }

    #[test]
    fn derivative_variants_match_definitions() {
        for &x in &[-1.5, -0.2, 0.0, 0.4, 2.0] {
            let s = UnaryFn::Sigmoid.apply(x);
            assert!((UnaryFn::SigmoidPrime.apply(x) - s * (1.0 - s)).abs() < 1e-15);
            let th = x.tanh();
            assert!((UnaryFn::TanhPrime.apply(x) - (1.0 - th * th)).abs() < 1e-15);
        }
        assert_eq!(UnaryFn::ReluPrime.apply(-3.0), 0.0);
        assert_eq!(UnaryFn::ReluPrime.apply(3.0), 1.0);
    }

    #[test]
    fn elementwise_identities_and_hand_values() {
        let a = t(&[3], &[1.0, 2.0, 3.0]);
        let zeros = Tensor::zeros(Shape::new([3]).unwrap());
        let ones = Tensor::filled(Shape::new([3]).unwrap(), 1.0);
        assert_eq!(a.add(&zeros).unwrap(), a);
        assert_eq!(a.mul(&ones).unwrap(), a);
        let b = t(&[3], &[4.0, 5.0, 6.0]);
        assert_eq!(a.mul(&b).unwrap().data(), &[4.0, 10.0, 18.0]);
    }

    #[test]
    fn elementwise_rejects_shape_mismatch() {
        let a = t(&[3], &[0.0; 3]);
        let b = t(&[2], &[0.0; 2]);
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn operations_are_pure_and_repeatable() {
        let a = t(&[2, 2], &[0.3, -0.7, 1.1, 2.2]);
        let before = a.clone();
        let y1 = a.map_unary(UnaryFn::Tanh);
        let y2 = a.map_unary(UnaryFn::Tanh);
        assert_eq!(a, before);
        assert_eq!(y1, y2);
        let m1 = a.matmul(&a).unwrap();
        let m2 = a.matmul(&a).unwrap();
        assert_eq!(m1, m2);
    }

    proptest! {
        #[test]
        fn flatten_roundtrip_is_identity(values in proptest::collection::vec(-1e3f64..1e3, 1..64)) {
            let n = values.len();
            let t = Tensor::from_values(Shape::new([n]).unwrap(), values).unwrap();
            let back = Tensor::from_values(t.shape().clone(), t.flatten()).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        // f64 saturates tanh to exactly +/-1 above |x| ~ 19 and sigmoid to
        // 0/1 above |x| ~ 37; the strict open range holds inside that band,
        // which covers every activation the network produces.
        fn sigmoid_and_tanh_stay_in_open_ranges(values in proptest::collection::vec(-18.0f64..18.0, 1..64)) {
            let n = values.len();
            let t = Tensor::from_values(Shape::new([n]).unwrap(), values).unwrap();
            for &s in t.map_unary(UnaryFn::Sigmoid).data() {
                prop_assert!(s > 0.0 && s < 1.0);
            }
            for &h in t.map_unary(UnaryFn::Tanh).data() {
                prop_assert!(h > -1.0 && h < 1.0);
            }
        }

        #[test]
        fn matmul_is_associative_within_tolerance(
            seed in 0u64..1000,
            m in 1usize..5, k in 1usize..5, n in 1usize..5, p in 1usize..5,
        ) {
            let mut rng = crate::rng::stream(seed, "test.assoc");
            let a = crate::oracles::random_tensor(&mut rng, &[m, k], 1.0);
            let b = crate::oracles::random_tensor(&mut rng, &[k, n], 1.0);
            let c = crate::oracles::random_tensor(&mut rng, &[n, p], 1.0);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (l, r) in left.data().iter().zip(right.data()) {
                prop_assert!((l - r).abs() <= 1e-9, "{l} vs {r}");
            }
        }
    }
}
