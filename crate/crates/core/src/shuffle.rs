//! Space-to-channel squeeze and its inverse.
//!
//! The squeeze trades spatial resolution for channels by tiling non-overlapping
//! r x r patches into the channel axis. The ordering is fixed: output channel
//! `c*r*r + dy*r + dx` at position `(i, j)` holds input channel `c` at
//! `(r*i + dy, r*j + dx)`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn squeeze<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    if r == 0 {
        return Err(Error::Shape("squeeze factor must be >= 1".into()));
    }
    if h % r != 0 || w % r != 0 {
        return Err(Error::Shape(format!(
            "squeeze factor {r} does not divide spatial size {h}x{w}"
        )));
    }
    let (oh, ow) = (h / r, w / r);
    let mut out = vec![T::zero(); c * r * r * oh * ow];
    let xs = x.data();
    for ch in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let oc = (ch * r + dy) * r + dx;
                for i in 0..oh {
                    let in_row = (ch * h + (r * i + dy)) * w;
                    let out_row = (oc * oh + i) * ow;
                    for j in 0..ow {
                        out[out_row + j] = xs[in_row + r * j + dx];
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![c * r * r, oh, ow], out)
}

pub fn unsqueeze<T: Scalar>(z: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (cz, zh, zw) = z.dims3()?;
    if r == 0 {
        return Err(Error::Shape("squeeze factor must be >= 1".into()));
    }
    if cz % (r * r) != 0 {
        return Err(Error::Shape(format!(
            "unsqueeze needs channels divisible by r^2 = {}, got {cz}",
            r * r
        )));
    }
    let c = cz / (r * r);
    let (h, w) = (zh * r, zw * r);
    let mut out = vec![T::zero(); c * h * w];
    let zs = z.data();
    for ch in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let zc = (ch * r + dy) * r + dx;
                for i in 0..zh {
                    let z_row = (zc * zh + i) * zw;
                    let out_row = (ch * h + (r * i + dy)) * w;
                    for j in 0..zw {
                        out[out_row + r * j + dx] = zs[z_row + j];
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![c, h, w], out)
}
