//! K-estimator and attention head: forward passes with cached activations,
//! and the matching reverse passes.
//!
//! K-estimator topology (all stages 3 filters, ReLU):
//!
//! ```text
//! x1 = conv1x1(I)            x2 = conv3x3(x1)
//! x3 = conv5x5([x1, x2])     x4 = conv7x7([x2, x3])
//! K  = conv3x3([x1, x2, x3, x4])
//! ```
//!
//! Attention head: `M = sigmoid(conv3x3(relu(conv3x3([K, roi]))))`.

use super::conv::{relu_backward, relu_in_place, Conv2d, ConvGrad};

pub const K_WIDTH: usize = 3;
pub const ATTN_HIDDEN: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct KEstimator {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub conv3: Conv2d,
    pub conv4: Conv2d,
    pub conv5: Conv2d,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

pub(crate) fn concat(parts: &[&[f64]]) -> Vec<f64> {
    let mut v = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        v.extend_from_slice(p);
    }
    v
}

pub(crate) struct KCache {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub x3: Vec<f64>,
    pub x4: Vec<f64>,
    pub cat12: Vec<f64>,
    pub cat23: Vec<f64>,
    pub cat1234: Vec<f64>,
    pub k: Vec<f64>,
}

impl KEstimator {
    pub(crate) fn forward(&self, input: &[f64], h: usize, w: usize) -> KCache {
        let mut x1 = self.conv1.forward(input, h, w);
        relu_in_place(&mut x1);
        let mut x2 = self.conv2.forward(&x1, h, w);
        relu_in_place(&mut x2);
        let cat12 = concat(&[&x1, &x2]);
        let mut x3 = self.conv3.forward(&cat12, h, w);
        relu_in_place(&mut x3);
        let cat23 = concat(&[&x2, &x3]);
        let mut x4 = self.conv4.forward(&cat23, h, w);
        relu_in_place(&mut x4);
        let cat1234 = concat(&[&x1, &x2, &x3, &x4]);
        let mut k = self.conv5.forward(&cat1234, h, w);
        relu_in_place(&mut k);
        KCache {
            x1,
            x2,
            x3,
            x4,
            cat12,
            cat23,
            cat1234,
            k,
        }
    }

    /// Gradients for conv1..conv5 given `d_k` (gradient w.r.t. the ReLU'd K).
    pub(crate) fn backward(
        &self,
        cache: &KCache,
        input: &[f64],
        h: usize,
        w: usize,
        mut d_k: Vec<f64>,
    ) -> [ConvGrad; 5] {
        let plane = K_WIDTH * h * w;
        relu_backward(&mut d_k, &cache.k);
        let (d_cat1234, g5) = self.conv5.backward(&cache.cat1234, h, w, &d_k, true);
        let mut dx1 = d_cat1234[..plane].to_vec();
        let mut dx2 = d_cat1234[plane..2 * plane].to_vec();
        let mut dx3 = d_cat1234[2 * plane..3 * plane].to_vec();
        let mut dx4 = d_cat1234[3 * plane..].to_vec();

        relu_backward(&mut dx4, &cache.x4);
        let (d_cat23, g4) = self.conv4.backward(&cache.cat23, h, w, &dx4, true);
        add_into(&mut dx2, &d_cat23[..plane]);
        add_into(&mut dx3, &d_cat23[plane..]);

        relu_backward(&mut dx3, &cache.x3);
        let (d_cat12, g3) = self.conv3.backward(&cache.cat12, h, w, &dx3, true);
        add_into(&mut dx1, &d_cat12[..plane]);
        add_into(&mut dx2, &d_cat12[plane..]);

        relu_backward(&mut dx2, &cache.x2);
        let (d_x1, g2) = self.conv2.backward(&cache.x1, h, w, &dx2, true);
        add_into(&mut dx1, &d_x1);

        relu_backward(&mut dx1, &cache.x1);
        let (_, g1) = self.conv1.backward(input, h, w, &dx1, false);
        [g1, g2, g3, g4, g5]
    }
}

pub(crate) struct AttnCache {
    pub a_in: Vec<f64>,
    pub a1: Vec<f64>,
    pub m: Vec<f64>,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl AttentionHead {
    pub(crate) fn forward(&self, k: &[f64], roi: &[f64], h: usize, w: usize) -> AttnCache {
        let a_in = concat(&[k, roi]);
        let mut a1 = self.conv1.forward(&a_in, h, w);
        relu_in_place(&mut a1);
        let mut m = self.conv2.forward(&a1, h, w);
        m.iter_mut().for_each(|z| *z = sigmoid(*z));
        AttnCache { a_in, a1, m }
    }

    /// Returns the gradient flowing back into K and the head's own gradients.
    pub(crate) fn backward(
        &self,
        cache: &AttnCache,
        h: usize,
        w: usize,
        d_m: &[f64],
    ) -> (Vec<f64>, [ConvGrad; 2]) {
        let dz: Vec<f64> = d_m
            .iter()
            .zip(&cache.m)
            .map(|(g, m)| g * m * (1.0 - m))
            .collect();
        let (mut d_a1, g2) = self.conv2.backward(&cache.a1, h, w, &dz, true);
        relu_backward(&mut d_a1, &cache.a1);
        let (d_in, g1) = self.conv1.backward(&cache.a_in, h, w, &d_a1, true);
        let d_k = d_in[..K_WIDTH * h * w].to_vec();
        (d_k, [g1, g2])
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
