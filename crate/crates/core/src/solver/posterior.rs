use nalgebra::Matrix3;

use crate::geometry::PoseOffset3;
use crate::{Error, Result};

/// Candidate offsets with their softmax probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub offsets: Vec<PoseOffset3>,
    pub probs: Vec<f64>,
}

/// Max-subtracted softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn posterior(offsets: Vec<PoseOffset3>, scores: &[f64]) -> Result<Posterior> {
    if offsets.len() != scores.len() || offsets.is_empty() {
        return Err(Error::Shape(format!("{} offsets vs {} scores", offsets.len(), scores.len())));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::arg(format!("score {i} is not finite")));
    }
    Ok(Posterior {
        offsets,
        probs: softmax(scores),
    })
}

/// Probability-weighted mean offset; yaw is averaged on the real line.
pub fn expected_offset(post: &Posterior) -> PoseOffset3 {
    let mut acc = [0.0; 3];
    for (o, &p) in post.offsets.iter().zip(&post.probs) {
        for (a, v) in acc.iter_mut().zip(o.to_array()) {
            *a += p * v;
        }
    }
    PoseOffset3::from_array(acc)
}

/// Weighted outer-product spread of the candidates around `delta`.
pub fn offset_covariance(post: &Posterior, delta: PoseOffset3) -> Matrix3<f64> {
    let mean = delta.to_array();
    let mut s = Matrix3::zeros();
    for (o, &p) in post.offsets.iter().zip(&post.probs) {
        if p == 0.0 {
            continue;
        }
        let v = o.to_array();
        let d = [v[0] - mean[0], v[1] - mean[1], v[2] - mean[2]];
        for i in 0..3 {
            for j in i..3 {
                s[(i, j)] += p * d[i] * d[j];
            }
        }
    }
    for i in 0..3 {
        for j in 0..i {
            s[(i, j)] = s[(j, i)];
        }
    }
    s
}
