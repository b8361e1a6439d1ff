//! Modality encoders and the small heads that sit between encoders and
//! denoisers: the contact gate, the guidance-scale predictor and the
//! two-expert router.

use super::layers::{softplus, Mlp};
use super::params::{Builder, ParamId, ParameterSet};
use super::tensor::{Mat, Scalar};
use crate::error::{Error, Result};

/// Width of every encoded feature vector.
pub const FEATURE_DIM: usize = 64;
pub const ENCODER_HIDDEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Vision,
    Torque,
    Proprio,
    GatedTorque,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector<T> {
    pub values: Vec<T>,
    pub modality: Modality,
}

impl<T: Scalar> FeatureVector<T> {
    pub fn new(values: Vec<T>, modality: Modality) -> Result<Self> {
        if values.len() != FEATURE_DIM {
            return Err(Error::Shape(format!(
                "feature vector has {} entries, expected {FEATURE_DIM}",
                values.len()
            )));
        }
        Ok(FeatureVector { values, modality })
    }

    pub fn as_row(&self) -> Mat<T> {
        Mat::from_vec(1, self.values.len(), self.values.clone())
    }
}

/// Two-layer perceptron `d_in → 128 → 64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub mlp: Mlp,
    pub modality: Modality,
}

impl Encoder {
    pub fn new<T: Scalar>(bld: &mut Builder<'_, T>, name: &str, d_in: usize, modality: Modality) -> Self {
        Encoder {
            mlp: Mlp::new(bld, name, &[d_in, ENCODER_HIDDEN, FEATURE_DIM]),
            modality,
        }
    }

    pub fn d_in(&self) -> usize {
        self.mlp.d_in()
    }

    pub fn encode<T: Scalar>(&self, p: &ParameterSet<T>, input: &[T]) -> Result<FeatureVector<T>> {
        if input.len() != self.d_in() {
            return Err(Error::Shape(format!(
                "{:?} encoder expects {} inputs, got {}",
                self.modality,
                self.d_in(),
                input.len()
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite {:?} input", self.modality)));
        }
        let x = Mat::from_vec(1, input.len(), input.to_vec());
        FeatureVector::new(self.mlp.eval(p, &x).data, self.modality)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactGate {
    pub phi: bool,
    pub threshold: f64,
}

impl ContactGate {
    pub fn phi_value<T: Scalar>(&self) -> T {
        if self.phi {
            T::one()
        } else {
            T::zero()
        }
    }
}

/// Contact iff some joint's most recent torque magnitude strictly exceeds
/// `threshold`. `latest` holds one value per joint.
pub fn detect_contact(latest: &[f32], threshold: f64) -> Result<ContactGate> {
    if !(threshold > 0.0) {
        return Err(Error::Invalid(format!("gate threshold must be > 0, got {threshold}")));
    }
    let phi = latest.iter().any(|&t| (t as f64).abs() > threshold);
    Ok(ContactGate { phi, threshold })
}

/// `φ·f_torque + (1−φ)·f*`. With binary φ the blend is a selection, which
/// keeps both endpoints bit-exact.
pub fn gate_torque<T: Scalar>(
    f_torque: &FeatureVector<T>,
    gate: ContactGate,
    f_star: &[T],
) -> Result<FeatureVector<T>> {
    if f_star.len() != FEATURE_DIM {
        return Err(Error::Shape("free-space embedding must be 64-d".into()));
    }
    let values = if gate.phi {
        f_torque.values.clone()
    } else {
        f_star.to_vec()
    };
    FeatureVector::new(values, Modality::GatedTorque)
}

/// Batched gate: rows with `phi[b]` take `f_torque`, the others `f*`.
pub fn gate_rows<T: Scalar>(f_torque: &Mat<T>, phi: &[bool], f_star: &[T]) -> Mat<T> {
    let mut out = f_torque.clone();
    for (b, &on) in phi.iter().enumerate() {
        if !on {
            out.row_mut(b).copy_from_slice(f_star);
        }
    }
    out
}

/// Routes `d_out` back through [`gate_rows`]: returns the gradient for the
/// torque features and accumulates the free-space rows into `d_f_star`.
pub fn gate_rows_backward<T: Scalar>(d_out: &Mat<T>, phi: &[bool], d_f_star: &mut [T]) -> Mat<T> {
    let mut d_tor = d_out.clone();
    for (b, &on) in phi.iter().enumerate() {
        if !on {
            for (acc, v) in d_f_star.iter_mut().zip(d_tor.row_mut(b)) {
                *acc += *v;
                *v = T::zero();
            }
        }
    }
    d_tor
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceWeight<T> {
    /// Raw predictor output (pre-activation).
    pub w_scale: T,
    /// `φ · softplus(w_scale)`.
    pub w_torque: T,
}

pub fn guidance_weight<T: Scalar>(w_scale: T, phi: bool) -> GuidanceWeight<T> {
    let w_torque = if phi { softplus(w_scale) } else { T::zero() };
    GuidanceWeight { w_scale, w_torque }
}

/// Three-layer perceptron over `[f_gated ‖ f_vision]` producing the raw
/// guidance scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalePredictor {
    pub mlp: Mlp,
}

pub const SCALE_HIDDEN: usize = 64;

impl ScalePredictor {
    pub fn new<T: Scalar>(bld: &mut Builder<'_, T>, name: &str) -> Self {
        ScalePredictor {
            mlp: Mlp::new(bld, name, &[2 * FEATURE_DIM, SCALE_HIDDEN, SCALE_HIDDEN, 1]),
        }
    }

    pub fn predict<T: Scalar>(
        &self,
        p: &ParameterSet<T>,
        f_gated: &FeatureVector<T>,
        f_vision: &FeatureVector<T>,
        gate: ContactGate,
    ) -> GuidanceWeight<T> {
        let x = Mat::hcat(&[&f_gated.as_row(), &f_vision.as_row()]);
        let w_scale = self.mlp.eval(p, &x).data[0];
        guidance_weight(w_scale, gate.phi)
    }
}

/// Softmax over two logits, computed with the max subtracted.
pub fn softmax2<T: Scalar>(a: T, b: T) -> (T, T) {
    let m = a.max(b);
    let ea = (a - m).exp();
    let eb = (b - m).exp();
    let s = ea + eb;
    (ea / s, eb / s)
}

/// Small perceptron producing the (image, torque) routing logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Router {
    pub mlp: Mlp,
}

pub const ROUTER_HIDDEN: usize = 64;

impl Router {
    pub fn new<T: Scalar>(bld: &mut Builder<'_, T>, name: &str, d_in: usize) -> Self {
        Router {
            mlp: Mlp::new(bld, name, &[d_in, ROUTER_HIDDEN, 2]),
        }
    }

    /// Returns `(w_img, w_tor)`.
    pub fn route<T: Scalar>(&self, p: &ParameterSet<T>, f_img: &[T], f_tor: &[T]) -> Result<(T, T)> {
        if f_img.len() + f_tor.len() != self.mlp.d_in() {
            return Err(Error::Shape(format!(
                "router expects {} inputs, got {}",
                self.mlp.d_in(),
                f_img.len() + f_tor.len()
            )));
        }
        let mut x = f_img.to_vec();
        x.extend_from_slice(f_tor);
        let logits = self.mlp.eval(p, &Mat::from_vec(1, x.len(), x));
        Ok(softmax2(logits.data[0], logits.data[1]))
    }
}

/// Looks up the learnable free-space embedding.
pub fn f_star<T: Scalar>(p: &ParameterSet<T>, id: ParamId) -> &[T] {
    p.data(id)
}
