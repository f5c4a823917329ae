use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// Dense row-major `f32` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} holds {numel} values, buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f32) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..numel).map(&mut f).collect(),
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let t = Tensor::new(shape, self.data.clone())?;
        Ok(t.with_grad(self.requires_grad))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Writes `shape: d1 d2 ... dn\n` followed by the little-endian buffer.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        writeln!(w, "shape: {}", dims.join(" "))?;
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for x in &self.data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&bytes)
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Tensor> {
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| Error::Parse {
            context: "tensor header".into(),
            detail: e.to_string(),
        })?;
        let shape = parse_shape_line(line.trim_end())?;
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes).map_err(|e| Error::Parse {
            context: "tensor payload".into(),
            detail: e.to_string(),
        })?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(shape, data)
    }
}

fn parse_shape_line(line: &str) -> Result<Vec<usize>> {
    let rest = line.strip_prefix("shape:").ok_or_else(|| Error::Parse {
        context: "tensor header".into(),
        detail: format!("expected `shape:` line, got {line:?}"),
    })?;
    let dims = rest
        .split_whitespace()
        .map(|d| {
            d.parse::<usize>().map_err(|e| Error::Parse {
                context: "tensor header".into(),
                detail: format!("bad dimension {d:?}: {e}"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if dims.is_empty() {
        return Err(Error::Parse {
            context: "tensor header".into(),
            detail: "empty shape".into(),
        });
    }
    Ok(dims)
}
