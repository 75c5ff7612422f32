//! Codes relating two patches `x` and `y`: the concatenation-linear code, the
//! full bilinear mapping unit, its rank-F factorization, and the energy model
//! whose expansion contains the factorized term.
//!
//! Matrices are rank-2 [`Tensor`]s stored row-major. Factor filters are rows:
//! `wx` is `[F, |x|]`, `wy` is `[F, |y|]`, `wz` is `[K, F]`.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Largest patch length accepted by the cubic mapping-unit tensor.
pub const MAX_MAPPING_PATCH: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl PatchPair {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(shape_err!("patch sizes differ: {} vs {}", x.len(), y.len()));
        }
        Ok(PatchPair { x, y })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactoredWeights {
    pub wx: Tensor,
    pub wy: Tensor,
    pub wz: Tensor,
}

fn mat_dims(m: &Tensor, what: &str) -> Result<(usize, usize)> {
    match m.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(shape_err!("{what} must be a matrix, got {:?}", s)),
    }
}

impl FactoredWeights {
    pub fn new(wx: Tensor, wy: Tensor, wz: Tensor) -> Result<Self> {
        let (fx, _) = mat_dims(&wx, "wx")?;
        let (fy, _) = mat_dims(&wy, "wy")?;
        let (_, fz) = mat_dims(&wz, "wz")?;
        if fx != fy || fx != fz {
            return Err(shape_err!("factor counts disagree: wx {fx}, wy {fy}, wz {fz}"));
        }
        Ok(FactoredWeights { wx, wy, wz })
    }

    pub fn random<R: Rng + ?Sized>(nx: usize, ny: usize, factors: usize, codes: usize, rng: &mut R) -> Result<Self> {
        Self::new(
            Tensor::uniform(&[factors, nx], -1.0, 1.0, rng)?,
            Tensor::uniform(&[factors, ny], -1.0, 1.0, rng)?,
            Tensor::uniform(&[codes, factors], -1.0, 1.0, rng)?,
        )
    }

    pub fn factors(&self) -> usize {
        self.wx.shape()[0]
    }

    pub fn codes(&self) -> usize {
        self.wz.shape()[0]
    }

    /// Factor responses `(wx·x, wy·y)`.
    pub fn responses(&self, pair: &PatchPair) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((self.wx.matvec(&pair.x)?, self.wy.matvec(&pair.y)?))
    }

    /// The full tensor `w_ijk = sum_f wx[f,i] wy[f,j] wz[k,f]`, shaped `[|x|, |y|, K]`.
    pub fn expand(&self) -> Result<Tensor> {
        let (f, nx) = mat_dims(&self.wx, "wx")?;
        let (_, ny) = mat_dims(&self.wy, "wy")?;
        let k = self.codes();
        check_mapping_size(nx, ny)?;
        let (wx, wy, wz) = (self.wx.data(), self.wy.data(), self.wz.data());
        let mut out = vec![0.0; nx * ny * k];
        for i in 0..nx {
            for j in 0..ny {
                for c in 0..k {
                    out[(i * ny + j) * k + c] = (0..f).map(|q| wx[q * nx + i] * wy[q * ny + j] * wz[c * f + q]).sum();
                }
            }
        }
        Tensor::from_vec(&[nx, ny, k], out)
    }
}

fn check_mapping_size(nx: usize, ny: usize) -> Result<()> {
    if nx > MAX_MAPPING_PATCH || ny > MAX_MAPPING_PATCH {
        return Err(shape_err!(
            "mapping-unit tensor limited to patches of at most {MAX_MAPPING_PATCH} elements, got {nx}x{ny}"
        ));
    }
    Ok(())
}

/// `z_k = wx_k·x + wy_k·y` with `wx` `[K, |x|]` and `wy` `[K, |y|]`.
pub fn concat_linear_code(pair: &PatchPair, wx: &Tensor, wy: &Tensor) -> Result<Vec<f64>> {
    let a = wx.matvec(&pair.x)?;
    let b = wy.matvec(&pair.y)?;
    if a.len() != b.len() {
        return Err(shape_err!("code counts differ: {} vs {}", a.len(), b.len()));
    }
    Ok(a.iter().zip(&b).map(|(p, q)| p + q).collect())
}

/// `z_k = sum_ij w_ijk x_i y_j` for `w` shaped `[|x|, |y|, K]`.
pub fn mapping_unit_code(pair: &PatchPair, w: &Tensor) -> Result<Vec<f64>> {
    let &[nx, ny, k] = w.shape() else {
        return Err(shape_err!("mapping tensor must be rank 3, got {:?}", w.shape()));
    };
    if nx != pair.x.len() || ny != pair.y.len() {
        return Err(shape_err!(
            "mapping tensor {:?} does not match patches of length {}/{}",
            w.shape(),
            pair.x.len(),
            pair.y.len()
        ));
    }
    check_mapping_size(nx, ny)?;
    let wd = w.data();
    let mut z = vec![0.0; k];
    for (i, xi) in pair.x.iter().enumerate() {
        for (j, yj) in pair.y.iter().enumerate() {
            let xy = xi * yj;
            let row = &wd[(i * ny + j) * k..(i * ny + j + 1) * k];
            for (zc, wv) in z.iter_mut().zip(row) {
                *zc += wv * xy;
            }
        }
    }
    Ok(z)
}

/// `z = wz · ((wx·x) ⊙ (wy·y))`.
pub fn factored_code(pair: &PatchPair, fw: &FactoredWeights) -> Result<Vec<f64>> {
    let (a, b) = fw.responses(pair)?;
    let prod: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p * q).collect();
    fw.wz.matvec(&prod)
}

/// `z = wz · ((wx·x + wy·y)^2)`, squares taken per factor.
pub fn energy_code(pair: &PatchPair, fw: &FactoredWeights) -> Result<Vec<f64>> {
    let (a, b) = fw.responses(pair)?;
    let sq: Vec<f64> = a.iter().zip(&b).map(|(p, q)| (p + q) * (p + q)).collect();
    fw.wz.matvec(&sq)
}

/// The per-input terms `wz · ((wx·x)^2 + (wy·y)^2)` that separate the energy
/// code from twice the factored code.
pub fn quadratic_terms(pair: &PatchPair, fw: &FactoredWeights) -> Result<Vec<f64>> {
    let (a, b) = fw.responses(pair)?;
    let sq: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p * p + q * q).collect();
    fw.wz.matvec(&sq)
}

/// Cosine/sine filter pair at `frequency` (radians per sample) over `len`
/// samples, shared by both inputs and summed into a single code.
pub fn quadrature_pair(frequency: f64, len: usize) -> Result<FactoredWeights> {
    let mut rows = Vec::with_capacity(2 * len);
    rows.extend((0..len).map(|i| (frequency * i as f64).cos()));
    rows.extend((0..len).map(|i| (frequency * i as f64).sin()));
    let filters = Tensor::from_vec(&[2, len], rows)?;
    FactoredWeights::new(filters.clone(), filters, Tensor::from_vec(&[1, 2], vec![1.0, 1.0])?)
}

/// `amplitude * cos(frequency * (i - shift))` for `i in 0..len`.
pub fn sinusoid(frequency: f64, amplitude: f64, shift: f64, len: usize) -> Vec<f64> {
    (0..len).map(|i| amplitude * (frequency * (i as f64 - shift)).cos()).collect()
}

/// First code of the energy model on `(x, x shifted by s)` for each shift `s`,
/// where `x` is a sinusoid at `frequency`.
pub fn phase_response_curve(frequency: f64, content_amplitude: f64, shifts: &[f64], fw: &FactoredWeights) -> Result<Vec<f64>> {
    let len = fw.wx.shape()[1];
    let x = sinusoid(frequency, content_amplitude, 0.0, len);
    shifts
        .iter()
        .map(|&s| {
            let pair = PatchPair::new(x.clone(), sinusoid(frequency, content_amplitude, s, len))?;
            Ok(energy_code(&pair, fw)?[0])
        })
        .collect()
}

/// Index of the largest response; ties resolve to the first.
pub fn argmax(values: &[f64]) -> Option<usize> {
    values
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, b)) if b >= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}
