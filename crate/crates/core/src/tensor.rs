//! Dense row-major `f64` tensors and the handful of kernels the models need.
//!
//! Every kernel is a direct loop with a fixed accumulation order, so identical
//! inputs always produce bitwise-identical outputs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{shape_err, Error, Result};

pub const FBPT_MAGIC: &[u8; 4] = b"FBPT";
pub const FBPT_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating extents, length and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return shape_err(format!(
                "{} values supplied for shape {:?} ({} expected)",
                data.len(),
                shape,
                expected
            ));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Tensor { shape, data })
    }

    /// Kernel-internal constructor; callers guarantee the length invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn flat_index(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return shape_err(format!("index rank {} for tensor of rank {}", index.len(), self.rank()));
        }
        let mut flat = 0;
        for (&i, &extent) in index.iter().zip(&self.shape) {
            if i >= extent {
                return shape_err(format!("index {index:?} out of bounds for shape {:?}", self.shape));
            }
            flat = flat * extent + i;
        }
        Ok(flat)
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.flat_index(index)?])
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return shape_err(format!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        Ok(Tensor { shape, data: self.data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).fold(0.0, |acc, (a, b)| acc + a * b))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc + v * v).sqrt()
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!("shape {:?} does not match {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    /// Writes the FBPT encoding: magic, version, rank, u32 extents, f64 data (all little-endian).
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        if self.rank() > u8::MAX as usize {
            return shape_err(format!("rank {} exceeds FBPT limit", self.rank()));
        }
        w.write_all(FBPT_MAGIC)?;
        w.write_all(&[FBPT_VERSION, self.rank() as u8])?;
        for &extent in &self.shape {
            let extent = u32::try_from(extent)
                .map_err(|_| Error::Shape(format!("extent {extent} exceeds u32")))?;
            w.write_all(&extent.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads one FBPT tensor. Returns `Ok(None)` on a clean end of stream.
    pub fn read_from(r: &mut impl Read) -> Result<Option<Self>> {
        let mut magic = [0u8; 4];
        match read_exact_or_eof(r, &mut magic)? {
            0 => return Ok(None),
            4 => {}
            _ => return Err(Error::Corrupt("truncated tensor header".into())),
        }
        if &magic != FBPT_MAGIC {
            return Err(Error::Corrupt(format!("bad magic {magic:?}")));
        }
        let mut head = [0u8; 2];
        read_exact(r, &mut head, "tensor header")?;
        if head[0] != FBPT_VERSION {
            return Err(Error::Version { found: head[0] as u32, expected: FBPT_VERSION as u32 });
        }
        let rank = head[1] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 4];
            read_exact(r, &mut b, "tensor extents")?;
            shape.push(u32::from_le_bytes(b) as usize);
        }
        if check_shape(&shape).is_err() {
            return Err(Error::Corrupt(format!("invalid extents {shape:?}")));
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        read_exact(r, &mut bytes, "tensor data")?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Some(Tensor::new(shape, data)?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Tensor::read_from(&mut r)?.ok_or_else(|| Error::Corrupt("empty tensor file".into()))
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return shape_err("rank-0 shape; scalars use shape [1]");
    }
    if shape.contains(&0) {
        return shape_err(format!("zero extent in {shape:?}"));
    }
    Ok(())
}

fn read_exact_or_eof(r: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(filled)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    if read_exact_or_eof(r, buf)? != buf.len() {
        return Err(Error::Corrupt(format!("truncated {what}")));
    }
    Ok(())
}

/// `[m,k] x [k,n] -> [m,n]`, accumulating over `k` left to right.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return shape_err(format!("matmul needs rank-2 operands, got {:?} and {:?}", a.shape, b.shape));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return shape_err(format!("matmul inner dimensions differ: {:?} x {:?}", a.shape, b.shape));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Output spatial extent of a strided, padded window, or a shape error.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return shape_err("stride must be positive");
    }
    let span = input + 2 * pad;
    if kernel > span || (span - kernel) % stride != 0 {
        return shape_err(format!(
            "window {kernel} with stride {stride} and pad {pad} does not tile extent {input}"
        ));
    }
    Ok((span - kernel) / stride + 1)
}

struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_geometry(input: &[usize], kernels: &[usize], stride: usize, pad: usize) -> Result<ConvGeometry> {
    if input.len() != 3 || kernels.len() != 4 {
        return shape_err(format!("conv2d expects [C,H,W] and [Co,Ci,kH,kW], got {input:?} and {kernels:?}"));
    }
    if input[0] != kernels[1] {
        return shape_err(format!("conv2d channel mismatch: input {input:?}, kernels {kernels:?}"));
    }
    let oh = conv_out_extent(input[1], kernels[2], stride, pad)?;
    let ow = conv_out_extent(input[2], kernels[3], stride, pad)?;
    Ok(ConvGeometry {
        c_in: input[0],
        h: input[1],
        w: input[2],
        c_out: kernels[0],
        kh: kernels[2],
        kw: kernels[3],
        oh,
        ow,
    })
}

/// Direct 2-D cross-correlation with zero padding.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = conv_geometry(&input.shape, &kernels.shape, stride, pad)?;
    let mut out = vec![0.0; g.c_out * g.oh * g.ow];
    for co in 0..g.c_out {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = 0.0;
                for ci in 0..g.c_in {
                    for ky in 0..g.kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let in_row = (ci * g.h + iy as usize) * g.w;
                        let k_row = ((co * g.c_in + ci) * g.kh + ky) * g.kw;
                        for kx in 0..g.kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            acc += input.data[in_row + ix as usize] * kernels.data[k_row + kx];
                        }
                    }
                }
                out[(co * g.oh + oy) * g.ow + ox] = acc;
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.c_out, g.oh, g.ow], out))
}

/// Gradients of [`conv2d`] with respect to its input and its kernels, each
/// computed only when requested.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    want_input: bool,
    want_kernels: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let g = conv_geometry(&input.shape, &kernels.shape, stride, pad)?;
    if grad_out.shape != [g.c_out, g.oh, g.ow] {
        return shape_err(format!("conv2d output gradient has shape {:?}", grad_out.shape));
    }
    let mut gin = want_input.then(|| vec![0.0; input.len()]);
    let mut gk = want_kernels.then(|| vec![0.0; kernels.len()]);
    for co in 0..g.c_out {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let go = grad_out.data[(co * g.oh + oy) * g.ow + ox];
                if go == 0.0 {
                    continue;
                }
                for ci in 0..g.c_in {
                    for ky in 0..g.kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let in_row = (ci * g.h + iy as usize) * g.w;
                        let k_row = ((co * g.c_in + ci) * g.kh + ky) * g.kw;
                        for kx in 0..g.kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let at = in_row + ix as usize;
                            if let Some(gk) = gk.as_mut() {
                                gk[k_row + kx] += go * input.data[at];
                            }
                            if let Some(gin) = gin.as_mut() {
                                gin[at] += go * kernels.data[k_row + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        gin.map(|d| Tensor::from_parts(input.shape.clone(), d)),
        gk.map(|d| Tensor::from_parts(kernels.shape.clone(), d)),
    ))
}

/// Non-overlapping max pooling over `[C,H,W]` with a square window.
pub fn max_pool2d(input: &Tensor, size: usize) -> Result<Tensor> {
    let (c, oh, ow) = pool_geometry(input, size)?;
    let (h, w) = (input.shape[1], input.shape[2]);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let at = pool_argmax(&input.data, ch, h, w, oy, ox, size);
                out.push(input.data[at]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, oh, ow], out))
}

/// Routes each output gradient to the first maximal element of its window.
pub fn max_pool2d_backward(input: &Tensor, size: usize, grad_out: &Tensor) -> Result<Tensor> {
    let (c, oh, ow) = pool_geometry(input, size)?;
    if grad_out.shape != [c, oh, ow] {
        return shape_err(format!("max-pool output gradient has shape {:?}", grad_out.shape));
    }
    let (h, w) = (input.shape[1], input.shape[2]);
    let mut gin = vec![0.0; input.len()];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let at = pool_argmax(&input.data, ch, h, w, oy, ox, size);
                gin[at] += grad_out.data[(ch * oh + oy) * ow + ox];
            }
        }
    }
    Ok(Tensor::from_parts(input.shape.clone(), gin))
}

fn pool_geometry(input: &Tensor, size: usize) -> Result<(usize, usize, usize)> {
    if input.rank() != 3 {
        return shape_err(format!("max-pool expects [C,H,W], got {:?}", input.shape));
    }
    if size == 0 || input.shape[1] % size != 0 || input.shape[2] % size != 0 {
        return shape_err(format!("pool window {size} does not tile {:?}", input.shape));
    }
    Ok((input.shape[0], input.shape[1] / size, input.shape[2] / size))
}

fn pool_argmax(data: &[f64], ch: usize, h: usize, w: usize, oy: usize, ox: usize, size: usize) -> usize {
    let mut best = (ch * h + oy * size) * w + ox * size;
    for dy in 0..size {
        for dx in 0..size {
            let at = (ch * h + oy * size + dy) * w + ox * size + dx;
            if data[at] > data[best] {
                best = at;
            }
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
        Activation::Sigmoid => x.map(sigmoid),
    }
}

/// Vector-Jacobian product of [`activation`] at `x`.
pub fn activation_backward(x: &Tensor, grad_out: &Tensor, kind: Activation) -> Result<Tensor> {
    match kind {
        Activation::Relu => x.zip_map(grad_out, |v, g| if v > 0.0 { g } else { 0.0 }),
        Activation::Sigmoid => x.zip_map(grad_out, |v, g| {
            let s = sigmoid(v);
            g * s * (1.0 - s)
        }),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Sum or mean over all elements, left to right.
pub fn reduce(x: &Tensor, kind: Reduction) -> Tensor {
    let sum = x.data.iter().fold(0.0, |acc, v| acc + v);
    match kind {
        Reduction::Sum => Tensor::scalar(sum),
        Reduction::Mean => Tensor::scalar(sum / x.len() as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn create_is_row_major() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.get(&[1, 0]).unwrap(), 3.0);
        let s = Tensor::new(vec![1], vec![5.0]).unwrap();
        assert!(s.is_scalar());
        assert_eq!(s.item(), 5.0);
    }

    #[test]
    fn create_rejects_bad_input() {
        assert!(matches!(Tensor::new(vec![2, 3], vec![0.0; 5]), Err(Error::Shape(_))));
        assert!(matches!(Tensor::new(vec![0], vec![]), Err(Error::Shape(_))));
        assert!(matches!(Tensor::new(vec![2], vec![1.0, f64::NAN]), Err(Error::NonFinite { index: 1 })));
    }

    #[test]
    fn matmul_small_cases() {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&eye, &b).unwrap(), b);
        let six = matmul(&Tensor::new(vec![1, 1], vec![2.0]).unwrap(), &Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        assert_eq!(six.unwrap().data(), &[6.0]);
        assert!(matches!(matmul(&b, &Tensor::zeros(&[3, 1])), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&[7, 5], &mut rng);
        let b = random(&[5, 4], &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..4 {
                let mut s = 0.0;
                for p in 0..5 {
                    s += a.get(&[i, p]).unwrap() * b.get(&[p, j]).unwrap();
                }
                assert!((c.get(&[i, j]).unwrap() - s).abs() < 1e-12);
            }
        }
    }

    fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
        let (ci, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
        let (co, kh, kw) = (k.shape[0], k.shape[2], k.shape[3]);
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut padded = vec![0.0; ci * ph * pw];
        for c in 0..ci {
            for y in 0..h {
                for xx in 0..w {
                    padded[(c * ph + y + pad) * pw + xx + pad] = x.get(&[c, y, xx]).unwrap();
                }
            }
        }
        let (oh, ow) = ((ph - kh) / stride + 1, (pw - kw) / stride + 1);
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    for c in 0..ci {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                out[(o * oh + y) * ow + xx] += padded[(c * ph + y * stride + dy) * pw + xx * stride + dx]
                                    * k.get(&[o, c, dy, dx]).unwrap();
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_small_cases() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ones = Tensor::full(&[1, 1, 2, 2], 1.0);
        assert_eq!(conv2d(&x, &ones, 1, 0).unwrap().data(), &[10.0]);
        let unit = Tensor::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &unit, 1, 0).unwrap(), x);
        assert!(matches!(conv2d(&Tensor::zeros(&[1, 4, 4]), &Tensor::zeros(&[1, 1, 3, 3]), 2, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_matches_dense_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[3, 7, 7], &mut rng);
        let k = random(&[4, 3, 3, 3], &mut rng);
        let y = conv2d(&x, &k, 2, 1).unwrap();
        assert_eq!(y.shape(), &[4, 4, 4]);
        for (a, b) in y.data().iter().zip(conv_oracle(&x, &k, 2, 1)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 5, 5], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let probe = random(&[3, 3, 3], &mut rng);
        let f = |x: &Tensor, k: &Tensor| conv2d(x, k, 2, 1).unwrap().dot(&probe).unwrap();
        let (gx, gk) = conv2d_backward(&x, &k, &probe, 2, 1, true, true).unwrap();
        let (gx, gk) = (gx.unwrap(), gk.unwrap());
        let eps = 1e-6;
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += eps;
            xm.data_mut()[i] -= eps;
            let fd = (f(&xp, &k) - f(&xm, &k)) / (2.0 * eps);
            assert!((fd - gx.data()[i]).abs() < 1e-7);
        }
        for i in 0..k.len() {
            let (mut kp, mut km) = (k.clone(), k.clone());
            kp.data_mut()[i] += eps;
            km.data_mut()[i] -= eps;
            let fd = (f(&x, &kp) - f(&x, &km)) / (2.0 * eps);
            assert!((fd - gk.data()[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn pooling_routes_to_first_max() {
        let x = Tensor::new(vec![1, 2, 4], vec![1.0, 5.0, 2.0, 2.0, 3.0, 0.0, 2.0, 2.0]).unwrap();
        let y = max_pool2d(&x, 2).unwrap();
        assert_eq!(y.data(), &[5.0, 2.0]);
        let g = max_pool2d_backward(&x, 2, &Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(max_pool2d(&Tensor::zeros(&[1, 3, 4]), 2).is_err());
    }

    #[test]
    fn activations() {
        let s = activation(&Tensor::scalar(0.0), Activation::Sigmoid);
        assert_eq!(s.item(), 0.5);
        let r = activation(&Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap(), Activation::Relu);
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        // 1 / (1 + e^-10) = 0.999954602131...
        assert!((sigmoid(10.0) - 0.9999546).abs() < 1e-7);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
        assert!((softplus(-800.0)).abs() < 1e-300);
        assert_eq!(softplus(800.0), 800.0);
    }

    fn pairwise_sum(v: &[f64]) -> f64 {
        if v.len() <= 8 {
            return v.iter().sum();
        }
        let (a, b) = v.split_at(v.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }

    #[test]
    fn reductions() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(reduce(&x, Reduction::Sum).item(), 6.0);
        assert_eq!(reduce(&Tensor::zeros(&[4, 2]), Reduction::Mean).item(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vals: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let oracle = pairwise_sum(&vals);
        let got = reduce(&Tensor::new(vec![10_000], vals).unwrap(), Reduction::Sum).item();
        assert!(((got - oracle) / oracle).abs() < 1e-9);
    }

    #[test]
    fn fbpt_rejects_bad_streams() {
        let t = Tensor::new(vec![2, 1], vec![1.5, -2.0]).unwrap();
        let mut bytes = Vec::new();
        t.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..6], b"FBPT\x01\x02");
        assert_eq!(bytes.len(), 6 + 8 + 16);

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(Tensor::read_from(&mut &truncated[..]), Err(Error::Corrupt(_))));

        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(Tensor::read_from(&mut &v2[..]), Err(Error::Version { found: 2, .. })));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Tensor::read_from(&mut &bad[..]), Err(Error::Corrupt(_))));
    }

    proptest! {
        #[test]
        fn fbpt_round_trip(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random(&shape, &mut rng);
            let mut bytes = Vec::new();
            t.write_to(&mut bytes).unwrap();
            let back = Tensor::read_from(&mut &bytes[..]).unwrap().unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn unit_kernel_is_identity(c in 1usize..4, h in 1usize..7, w in 1usize..7, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[c, h, w], &mut rng);
            let mut k = Tensor::zeros(&[c, c, 1, 1]);
            for i in 0..c {
                k.data_mut()[i * c + i] = 1.0;
            }
            prop_assert_eq!(conv2d(&x, &k, 1, 0).unwrap(), x);
        }

        #[test]
        fn kernels_are_deterministic(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[2, 6, 6], &mut rng);
            let k = random(&[3, 2, 3, 3], &mut rng);
            let a = conv2d(&x, &k, 1, 1).unwrap();
            let b = conv2d(&x, &k, 1, 1).unwrap();
            prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}
