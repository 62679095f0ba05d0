//! Dense row-major tensors (rank 1-4, f64) and the numeric kernels the
//! pipeline is built on: 2-D cross-correlation, ReLU, max-pooling, global
//! average pooling, bilinear upsampling and elementwise arithmetic.
//!
//! All operations are pure: they take references and return fresh tensors,
//! so disjoint inputs can be processed concurrently without locking.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Dense numeric array, rank 1 to 4, contiguous row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating rank and element count.
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(Error::Shape(format!(
                "rank must be 1..=4, got {}",
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in dims {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "dims {:?} imply {} elements, data has {}",
                dims,
                n,
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        Tensor::new(dims.to_vec(), vec![0.0; n])
    }

    pub fn filled(dims: &[usize], value: f64) -> Result<Self> {
        let n: usize = dims.iter().product();
        Tensor::new(dims.to_vec(), vec![value; n])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Flat index for rank-3 [c, y, x] access.
    #[inline]
    pub fn idx3(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.rank(), 3);
        (c * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get3(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx3(c, y, x)]
    }

    /// Flat index for rank-2 [y, x] access.
    #[inline]
    pub fn idx2(&self, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.rank(), 2);
        y * self.dims[1] + x
    }

    #[inline]
    pub fn get2(&self, y: usize, x: usize) -> f64 {
        self.data[self.idx2(y, x)]
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// New tensor with `f` applied to every element.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }
}

/// Elementwise max(0, x).
pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// 2-D cross-correlation over a [C_in, H, W] input with [C_out, C_in, kH, kW]
/// kernels and a [C_out] bias. Output spatial extents follow the usual
/// floor((H + 2*pad - kH) / stride) + 1 rule.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    if input.rank() != 3 {
        return Err(Error::Shape(format!(
            "conv2d input must be rank 3, got {:?}",
            input.dims()
        )));
    }
    if kernels.rank() != 4 {
        return Err(Error::Shape(format!(
            "conv2d kernels must be rank 4, got {:?}",
            kernels.dims()
        )));
    }
    let (c_in, h, w) = (input.dims[0], input.dims[1], input.dims[2]);
    let (c_out, kc_in, kh, kw) = (
        kernels.dims[0],
        kernels.dims[1],
        kernels.dims[2],
        kernels.dims[3],
    );
    if kc_in != c_in {
        return Err(Error::Shape(format!(
            "kernel expects {kc_in} input channels, input has {c_in}"
        )));
    }
    if bias.rank() != 1 || bias.dims[0] != c_out {
        return Err(Error::Shape(format!(
            "bias dims {:?} do not match {c_out} output channels",
            bias.dims()
        )));
    }
    if stride == 0 {
        return Err(Error::Shape("stride must be >= 1".into()));
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::Shape(format!(
            "kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let out_h = (h + 2 * pad - kh) / stride + 1;
    let out_w = (w + 2 * pad - kw) / stride + 1;

    let mut out = vec![0.0; c_out * out_h * out_w];
    for co in 0..c_out {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = bias.data[co];
                for ci in 0..c_in {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let iv = input.data[(ci * h + iy as usize) * w + ix as usize];
                            let kv =
                                kernels.data[((co * c_in + ci) * kh + ky) * kw + kx];
                            acc += iv * kv;
                        }
                    }
                }
                out[(co * out_h + oy) * out_w + ox] = acc;
            }
        }
    }
    Tensor::new(vec![c_out, out_h, out_w], out)
}

/// Per-channel arithmetic mean of a [K, H, W] tensor, yielding [K].
pub fn global_average_pool(input: &Tensor) -> Result<Tensor> {
    if input.rank() != 3 {
        return Err(Error::Shape(format!(
            "global_average_pool input must be rank 3, got {:?}",
            input.dims()
        )));
    }
    let (k, h, w) = (input.dims[0], input.dims[1], input.dims[2]);
    let plane = h * w;
    let mut out = vec![0.0; k];
    for (c, slot) in out.iter_mut().enumerate() {
        let mut sum = 0.0;
        for v in &input.data[c * plane..(c + 1) * plane] {
            sum += v;
        }
        *slot = sum / plane as f64;
    }
    Tensor::new(vec![k], out)
}

/// Per-window maximum over a [C, H, W] tensor; also returns the flat input
/// index of each window's argmax so back-propagation can route gradients.
/// Ties go to the first element in scan order.
pub fn maxpool2d(input: &Tensor, k: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    if input.rank() != 3 {
        return Err(Error::Shape(format!(
            "maxpool2d input must be rank 3, got {:?}",
            input.dims()
        )));
    }
    if k == 0 || stride == 0 {
        return Err(Error::Shape("pool size and stride must be >= 1".into()));
    }
    let (c, h, w) = (input.dims[0], input.dims[1], input.dims[2]);
    if k > h || k > w {
        return Err(Error::Shape(format!(
            "pool window {k} larger than input {h}x{w}"
        )));
    }
    let out_h = (h - k) / stride + 1;
    let out_w = (w - k) / stride + 1;
    let mut out = vec![0.0; c * out_h * out_w];
    let mut argmax = vec![0usize; c * out_h * out_w];
    for ci in 0..c {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = oy * stride + ky;
                        let ix = ox * stride + kx;
                        let idx = (ci * h + iy) * w + ix;
                        if input.data[idx] > best {
                            best = input.data[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (ci * out_h + oy) * out_w + ox;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    Ok((Tensor::new(vec![c, out_h, out_w], out)?, argmax))
}

/// Align-corners bilinear interpolation of a [H, W] map to [out_h, out_w].
///
/// Each output sample is clamped to the range of its four source corners, so
/// the output never leaves [min(input), max(input)].
pub fn bilinear_upsample(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if input.rank() != 2 {
        return Err(Error::Shape(format!(
            "bilinear_upsample input must be rank 2, got {:?}",
            input.dims()
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape("output extents must be >= 1".into()));
    }
    let (h, w) = (input.dims[0], input.dims[1]);
    let scale_y = if out_h > 1 {
        (h - 1) as f64 / (out_h - 1) as f64
    } else {
        0.0
    };
    let scale_x = if out_w > 1 {
        (w - 1) as f64 / (out_w - 1) as f64
    } else {
        0.0
    };
    let mut out = vec![0.0; out_h * out_w];
    for oy in 0..out_h {
        let sy = oy as f64 * scale_y;
        let y0 = (sy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = ox as f64 * scale_x;
            let x0 = (sx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let v00 = input.data[y0 * w + x0];
            let v01 = input.data[y0 * w + x1];
            let v10 = input.data[y1 * w + x0];
            let v11 = input.data[y1 * w + x1];
            let v = v00 * (1.0 - fx) * (1.0 - fy)
                + v01 * fx * (1.0 - fy)
                + v10 * (1.0 - fx) * fy
                + v11 * fx * fy;
            let lo = v00.min(v01).min(v10).min(v11);
            let hi = v00.max(v01).max(v10).max(v11);
            out[oy * out_w + ox] = v.clamp(lo, hi);
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}

const TNSR_MAGIC: &[u8; 4] = b"TNSR";
const TNSR_VERSION: u8 = 0x01;

/// Serializes a tensor in the TNSR container: magic "TNSR", version byte
/// 0x01, u32-LE rank, rank x u32-LE dims, then f64-LE values. Bit-exact.
pub fn write_tnsr<W: Write>(tensor: &Tensor, mut out: W) -> std::io::Result<()> {
    out.write_all(TNSR_MAGIC)?;
    out.write_all(&[TNSR_VERSION])?;
    out.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &d in tensor.dims() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in tensor.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads one TNSR container from a stream.
pub fn read_tnsr<R: Read>(mut input: R) -> Result<Tensor> {
    let bad = |msg: &str| Error::Data(format!("TNSR: {msg}"));
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|_| bad("truncated magic"))?;
    if &magic != TNSR_MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let mut version = [0u8; 1];
    input
        .read_exact(&mut version)
        .map_err(|_| bad("truncated version"))?;
    if version[0] != TNSR_VERSION {
        return Err(bad(&format!("unsupported version {}", version[0])));
    }
    let mut u32buf = [0u8; 4];
    input
        .read_exact(&mut u32buf)
        .map_err(|_| bad("truncated rank"))?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    if rank == 0 || rank > 4 {
        return Err(bad(&format!("rank {rank} out of range")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        input
            .read_exact(&mut u32buf)
            .map_err(|_| bad("truncated dims"))?;
        dims.push(u32::from_le_bytes(u32buf) as usize);
    }
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut f64buf = [0u8; 8];
    for _ in 0..n {
        input
            .read_exact(&mut f64buf)
            .map_err(|_| bad("truncated data"))?;
        data.push(f64::from_le_bytes(f64buf));
    }
    Tensor::new(dims, data)
}

pub fn save_tnsr(tensor: &Tensor, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = std::io::BufWriter::new(file);
    write_tnsr(tensor, &mut buf).map_err(|e| Error::io(path, e))?;
    buf.flush().map_err(|e| Error::io(path, e))
}

pub fn load_tnsr(path: &Path) -> Result<Tensor> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_tnsr(std::io::BufReader::new(file))
}
