use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// 2-D weights get low-rank perturbations; 1-D vectors (biases) are always
/// perturbed densely.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Matrix,
    Vector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    /// Block index used by layer-wise rank selection.
    pub block: usize,
    pub kind: ParamKind,
    /// Vectors are stored as `len x 1`.
    pub value: Matrix,
}

impl Param {
    pub fn matrix(name: impl Into<String>, block: usize, value: Matrix) -> Self {
        Self { name: name.into(), block, kind: ParamKind::Matrix, value }
    }

    pub fn vector(name: impl Into<String>, block: usize, value: Vec<f64>) -> Self {
        let n = value.len();
        Self {
            name: name.into(),
            block,
            kind: ParamKind::Vector,
            value: Matrix::from_vec(n, 1, value).expect("column vector"),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Ordered list of named parameters. Declaration order is the order in
/// which perturbations consume random draws.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    params: Vec<Param>,
}

impl ModelParams {
    pub fn new(params: Vec<Param>) -> Self {
        Self { params }
    }

    pub fn single(name: &str, value: Matrix) -> Self {
        Self::new(vec![Param::matrix(name, 0, value)])
    }

    pub fn push(&mut self, p: Param) {
        self.params.push(p);
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    pub fn values(&self) -> impl Iterator<Item = &Matrix> {
        self.params.iter().map(|p| &p.value)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    /// All scalars concatenated in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for p in &self.params {
            out.extend_from_slice(p.value.as_slice());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Shape(format!(
                "flat vector has {} entries, model has {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.len();
            p.value.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// A model with the same layout whose values are `values` (one matrix per param).
    pub fn with_values(&self, values: Vec<Matrix>) -> Result<Self> {
        if values.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "{} values for {} params",
                values.len(),
                self.params.len()
            )));
        }
        let params = self
            .params
            .iter()
            .zip(values)
            .map(|(p, v)| {
                v.ensure_shape(p.value.rows(), p.value.cols(), &p.name)?;
                Ok(Param { value: v, ..p.clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { params })
    }
}

impl<'a> IntoIterator for &'a ModelParams {
    type Item = &'a Param;
    type IntoIter = std::slice::Iter<'a, Param>;

    fn into_iter(self) -> Self::IntoIter {
        self.params.iter()
    }
}

/// Parses the plain-text model format:
///
/// ```text
/// # comment
/// layer <name> <rows> <cols> [block]
/// <rows lines of cols whitespace-separated numbers>
/// ```
///
/// Layers with one column are read as vectors. Without an explicit block the
/// layer's position among matrices is used.
pub fn parse_model_text(text: &str) -> Result<ModelParams> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let mut params = Vec::new();
    let mut matrices = 0;
    while let Some((no, line)) = lines.next() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.first() != Some(&"layer") || !(4..=5).contains(&fields.len()) {
            return Err(Error::Parse(format!("line {no}: expected `layer <name> <rows> <cols> [block]`")));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Parse(format!("line {no}: bad integer `{s}`")));
        let (rows, cols) = (num(fields[2])?, num(fields[3])?);
        if rows == 0 || cols == 0 {
            return Err(Error::Parse(format!("line {no}: empty layer")));
        }
        let block = fields.get(4).map(|b| num(b)).transpose()?.unwrap_or(matrices);
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (rno, row) = lines
                .next()
                .ok_or_else(|| Error::Parse(format!("layer `{}`: expected {rows} rows", fields[1])))?;
            let before = data.len();
            for x in row.split_whitespace() {
                data.push(x.parse::<f64>().map_err(|_| Error::Parse(format!("line {rno}: bad number `{x}`")))?);
            }
            if data.len() - before != cols {
                return Err(Error::Parse(format!("line {rno}: expected {cols} values, got {}", data.len() - before)));
            }
        }
        if cols == 1 {
            params.push(Param::vector(fields[1], block, data));
        } else {
            params.push(Param::matrix(fields[1], block, Matrix::from_vec(rows, cols, data)?));
            matrices += 1;
        }
    }
    Ok(ModelParams::new(params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_roundtrip() {
        let mut p = ModelParams::new(vec![
            Param::matrix("w", 0, Matrix::from_fn(2, 3, |i, j| (i * 3 + j) as f64)),
            Param::vector("b", 0, vec![7.0, 8.0]),
        ]);
        let flat = p.flatten();
        assert_eq!(flat, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 7.0, 8.0]);
        let before = p.clone();
        p.set_flat(&flat).unwrap();
        assert_eq!(p, before);
        assert!(p.set_flat(&flat[..3]).is_err());
    }

    #[test]
    fn model_text() {
        let text = "# two layers\nlayer a 2 2 5\n1 0\n0 1\n\nlayer bias 2 1\n3\n4\nlayer c 1 3\n1 2 3\n";
        let m = parse_model_text(text).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.get(0).block, 5);
        assert_eq!(m.get(1).kind, ParamKind::Vector);
        assert_eq!(m.get(2).block, 1);
        assert_eq!(m.get(2).value.as_slice(), &[1.0, 2.0, 3.0]);
        assert!(parse_model_text("layer a 2 2\n1 2\n").is_err());
        assert!(parse_model_text("layer a 1 2\n1 x\n").is_err());
        assert!(parse_model_text("weights a 1 1\n1\n").is_err());
    }
}
