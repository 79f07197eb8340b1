//! Gaussian variational factors in unconstrained coordinates, the flat
//! coordinate vector ξ that stacks them, and Gauss–Hermite quadrature for
//! the few expectations without closed forms.

use nalgebra::DMatrix;

use crate::dualnum::Real;
use crate::{Error, Result};

/// ½·log(2πe), the entropy of a standard normal.
pub const HALF_LN_TWO_PI_E: f64 = 1.418_938_533_204_672_7;

const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;

/// How a positive scale (a standard deviation or Cholesky diagonal) is
/// stored as an unconstrained coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScaleParam {
    /// The coordinate is log(scale). Smooth and unconstrained; the default.
    #[default]
    Log,
    /// The coordinate is the scale itself. Only used to verify that
    /// linear-response results are invariant to the parameterization.
    Direct,
}

impl ScaleParam {
    /// Decode one stored coordinate into `(scale, log scale)`.
    #[inline]
    pub fn decode<S: Real>(self, coord: S) -> Result<(S, S)> {
        match self {
            ScaleParam::Log => Ok((coord.exp(), coord)),
            ScaleParam::Direct => Ok((coord, coord.ln()?)),
        }
    }

    /// The stored coordinate for a given log scale.
    #[inline]
    pub fn encode_log_scale(self, log_scale: f64) -> f64 {
        match self {
            ScaleParam::Log => log_scale,
            ScaleParam::Direct => log_scale.exp(),
        }
    }
}

/// One-dimensional Gaussian factor, `N(mean, exp(log_sd)²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianFactor1D {
    pub mean: f64,
    pub log_sd: f64,
}

impl GaussianFactor1D {
    pub fn new(mean: f64, log_sd: f64) -> Self {
        Self { mean, log_sd }
    }

    pub fn from_moments(mean: f64, var: f64) -> Result<Self> {
        if !(var > 0.0 && var.is_finite()) {
            return Err(Error::InvalidParameter(format!("variance must be positive, got {var}")));
        }
        Ok(Self { mean, log_sd: 0.5 * var.ln() })
    }

    /// ½·log(2πe) + log sd.
    pub fn entropy(&self) -> f64 {
        HALF_LN_TWO_PI_E + self.log_sd
    }

    /// `(E[θ], Var[θ])`.
    pub fn moments(&self) -> (f64, f64) {
        (self.mean, (2.0 * self.log_sd).exp())
    }
}

/// Two-dimensional Gaussian factor with full covariance `L·Lᵀ`, the Cholesky
/// factor stored as `(log ℓ₁₁, ℓ₂₁, log ℓ₂₂)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianFactor2D {
    pub mean: [f64; 2],
    pub log_l11: f64,
    pub l21: f64,
    pub log_l22: f64,
}

impl GaussianFactor2D {
    pub fn new(mean: [f64; 2], log_l11: f64, l21: f64, log_l22: f64) -> Self {
        Self { mean, log_l11, l21, log_l22 }
    }

    pub fn from_moments(mean: [f64; 2], cov: [[f64; 2]; 2]) -> Result<Self> {
        let l11 = cov[0][0];
        if l11 <= 0.0 {
            return Err(Error::InvalidParameter("covariance is not positive definite".into()));
        }
        let l11 = l11.sqrt();
        let l21 = cov[0][1] / l11;
        let rest = cov[1][1] - l21 * l21;
        if rest <= 0.0 {
            return Err(Error::InvalidParameter("covariance is not positive definite".into()));
        }
        Ok(Self { mean, log_l11: l11.ln(), l21, log_l22: 0.5 * rest.ln() })
    }

    /// log(2πe) + log det L.
    pub fn entropy(&self) -> f64 {
        2.0 * HALF_LN_TWO_PI_E + self.log_l11 + self.log_l22
    }

    /// `(E[θ], Cov[θ])` with `Cov = L·Lᵀ`.
    pub fn moments(&self) -> ([f64; 2], [[f64; 2]; 2]) {
        let l11 = self.log_l11.exp();
        let l22 = self.log_l22.exp();
        let v11 = l11 * l11;
        let v12 = l11 * self.l21;
        let v22 = self.l21 * self.l21 + l22 * l22;
        (self.mean, [[v11, v12], [v12, v22]])
    }
}

/// Factor family occupying one coordinate block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FactorKind {
    Gaussian1D,
    Gaussian2D,
}

impl FactorKind {
    /// Count of ξ coordinates the factor occupies.
    pub fn xi_len(self) -> usize {
        match self {
            FactorKind::Gaussian1D => 2,
            FactorKind::Gaussian2D => 5,
        }
    }

    /// Count of θ means the factor contributes.
    pub fn m_len(self) -> usize {
        match self {
            FactorKind::Gaussian1D => 1,
            FactorKind::Gaussian2D => 2,
        }
    }

    /// Count of distinct covariance entries the factor contributes to the
    /// extended moment vector.
    pub fn cov_len(self) -> usize {
        match self {
            FactorKind::Gaussian1D => 1,
            FactorKind::Gaussian2D => 3,
        }
    }
}

/// One factor's slices of ξ and of the moment vector m = E_q[θ].
#[derive(Clone, Debug)]
pub struct FactorBlock {
    pub id: String,
    pub kind: FactorKind,
    pub xi_start: usize,
    pub m_start: usize,
}

/// Decoded one-dimensional block.
#[derive(Clone, Copy, Debug)]
pub struct Block1<S> {
    pub mean: S,
    pub sd: S,
    pub log_sd: S,
    pub var: S,
}

impl<S: Real> Block1<S> {
    /// True when no field carries derivative content, so any expression of
    /// this block may be evaluated on plain values and lifted back.
    pub fn is_constant(&self) -> bool {
        self.mean.is_constant()
            && self.sd.is_constant()
            && self.log_sd.is_constant()
            && self.var.is_constant()
    }

    /// The value lanes of every field.
    pub fn values(&self) -> Block1<f64> {
        Block1 {
            mean: self.mean.value(),
            sd: self.sd.value(),
            log_sd: self.log_sd.value(),
            var: self.var.value(),
        }
    }

    /// Lift plain values into any scalar as constants.
    pub fn lift(b: &Block1<f64>) -> Self {
        Block1 {
            mean: S::constant(b.mean),
            sd: S::constant(b.sd),
            log_sd: S::constant(b.log_sd),
            var: S::constant(b.var),
        }
    }
}

/// Decoded two-dimensional block.
#[derive(Clone, Copy, Debug)]
pub struct Block2<S> {
    pub mean: [S; 2],
    pub v11: S,
    pub v12: S,
    pub v22: S,
    pub log_l11: S,
    pub log_l22: S,
}

impl<S: Real> Block2<S> {
    /// True when no field carries derivative content.
    pub fn is_constant(&self) -> bool {
        self.mean[0].is_constant()
            && self.mean[1].is_constant()
            && self.v11.is_constant()
            && self.v12.is_constant()
            && self.v22.is_constant()
            && self.log_l11.is_constant()
            && self.log_l22.is_constant()
    }

    /// The value lanes of every field.
    pub fn values(&self) -> Block2<f64> {
        Block2 {
            mean: [self.mean[0].value(), self.mean[1].value()],
            v11: self.v11.value(),
            v12: self.v12.value(),
            v22: self.v22.value(),
            log_l11: self.log_l11.value(),
            log_l22: self.log_l22.value(),
        }
    }

    /// Lift plain values into any scalar as constants.
    pub fn lift(b: &Block2<f64>) -> Self {
        Block2 {
            mean: [S::constant(b.mean[0]), S::constant(b.mean[1])],
            v11: S::constant(b.v11),
            v12: S::constant(b.v12),
            v22: S::constant(b.v22),
            log_l11: S::constant(b.log_l11),
            log_l22: S::constant(b.log_l22),
        }
    }
}

fn decode1_raw<S: Real>(scale: ScaleParam, c: [S; 2]) -> Result<Block1<S>> {
    let (sd, log_sd) = scale.decode(c[1])?;
    Ok(Block1 { mean: c[0], sd, log_sd, var: sd * sd })
}

fn decode2_raw<S: Real>(scale: ScaleParam, c: [S; 5]) -> Result<Block2<S>> {
    let (l11, log_l11) = scale.decode(c[2])?;
    let l21 = c[3];
    let (l22, log_l22) = scale.decode(c[4])?;
    Ok(Block2 {
        mean: [c[0], c[1]],
        v11: l11 * l11,
        v12: l11 * l21,
        v22: l21 * l21 + l22 * l22,
        log_l11,
        log_l22,
    })
}

/// Ordered factor blocks mapping the flat vector ξ to factors, plus the
/// induced layout of the moment vector.
#[derive(Clone, Debug)]
pub struct CoordinateLayout {
    blocks: Vec<FactorBlock>,
    dim_xi: usize,
    dim_m: usize,
    scale: ScaleParam,
}

impl CoordinateLayout {
    pub fn new<I: IntoIterator<Item = (String, FactorKind)>>(specs: I, scale: ScaleParam) -> Self {
        let mut blocks = Vec::new();
        let (mut xi, mut m) = (0usize, 0usize);
        for (id, kind) in specs {
            blocks.push(FactorBlock { id, kind, xi_start: xi, m_start: m });
            xi += kind.xi_len();
            m += kind.m_len();
        }
        Self { blocks, dim_xi: xi, dim_m: m, scale }
    }

    /// Same blocks under the other scale parameterization.
    pub fn with_scale(&self, scale: ScaleParam) -> Self {
        Self { scale, ..self.clone() }
    }

    pub fn scale(&self) -> ScaleParam {
        self.scale
    }

    pub fn dim(&self) -> usize {
        self.dim_xi
    }

    pub fn n_moments(&self) -> usize {
        self.dim_m
    }

    pub fn blocks(&self) -> &[FactorBlock] {
        &self.blocks
    }

    pub fn block(&self, index: usize) -> &FactorBlock {
        &self.blocks[index]
    }

    pub fn decode1<S: Real>(&self, block: &FactorBlock, xi: &[S]) -> Result<Block1<S>> {
        debug_assert_eq!(block.kind, FactorKind::Gaussian1D);
        let at = block.xi_start;
        if xi[at].is_constant() && xi[at + 1].is_constant() {
            let plain = decode1_raw(self.scale, [xi[at].value(), xi[at + 1].value()])?;
            return Ok(Block1::lift(&plain));
        }
        decode1_raw(self.scale, [xi[at], xi[at + 1]])
    }

    pub fn decode2<S: Real>(&self, block: &FactorBlock, xi: &[S]) -> Result<Block2<S>> {
        debug_assert_eq!(block.kind, FactorKind::Gaussian2D);
        let at = block.xi_start;
        let coords = [xi[at], xi[at + 1], xi[at + 2], xi[at + 3], xi[at + 4]];
        if coords.iter().all(|c| c.is_constant()) {
            let plain = decode2_raw(self.scale, coords.map(Real::value))?;
            return Ok(Block2::lift(&plain));
        }
        decode2_raw(self.scale, coords)
    }

    /// Total entropy `Σ factors [½·d·log(2πe) + log det L]`.
    pub fn entropy<S: Real>(&self, xi: &[S]) -> Result<S> {
        let mut total = S::constant(0.0);
        for b in &self.blocks {
            match b.kind {
                FactorKind::Gaussian1D => {
                    let f = self.decode1(b, xi)?;
                    total = total + S::constant(HALF_LN_TWO_PI_E) + f.log_sd;
                }
                FactorKind::Gaussian2D => {
                    let f = self.decode2(b, xi)?;
                    total = total + S::constant(2.0 * HALF_LN_TWO_PI_E) + f.log_l11 + f.log_l22;
                }
            }
        }
        Ok(total)
    }

    /// The moment vector m = E_q[θ]: all factor means in block order.
    pub fn moments<S: Real>(&self, xi: &[S]) -> Result<Vec<S>> {
        let mut m = Vec::with_capacity(self.dim_m);
        for b in &self.blocks {
            match b.kind {
                FactorKind::Gaussian1D => m.push(xi[b.xi_start]),
                FactorKind::Gaussian2D => {
                    m.push(xi[b.xi_start]);
                    m.push(xi[b.xi_start + 1]);
                }
            }
        }
        Ok(m)
    }

    /// Means followed by the per-block covariance entries (variance for 1-D
    /// blocks; `v11, v12, v22` for 2-D blocks), in block order. This is the
    /// complete mean parameterization of the family, which generic moment
    /// perturbations are written against.
    pub fn extended_moments<S: Real>(&self, xi: &[S]) -> Result<Vec<S>> {
        let mut out = self.moments(xi)?;
        for b in &self.blocks {
            match b.kind {
                FactorKind::Gaussian1D => out.push(self.decode1(b, xi)?.var),
                FactorKind::Gaussian2D => {
                    let f = self.decode2(b, xi)?;
                    out.extend([f.v11, f.v12, f.v22]);
                }
            }
        }
        Ok(out)
    }

    /// Block-diagonal covariance over θ read straight off the factors.
    pub fn mfvb_cov(&self, xi: &[f64]) -> Result<DMatrix<f64>> {
        let mut cov = DMatrix::zeros(self.dim_m, self.dim_m);
        for b in &self.blocks {
            let at = b.m_start;
            match b.kind {
                FactorKind::Gaussian1D => cov[(at, at)] = self.decode1(b, xi)?.var,
                FactorKind::Gaussian2D => {
                    let f = self.decode2(b, xi)?;
                    cov[(at, at)] = f.v11;
                    cov[(at, at + 1)] = f.v12;
                    cov[(at + 1, at)] = f.v12;
                    cov[(at + 1, at + 1)] = f.v22;
                }
            }
        }
        Ok(cov)
    }

    /// Write a 1-D factor's coordinates into ξ.
    pub fn pack1(&self, block: &FactorBlock, f: &GaussianFactor1D, xi: &mut [f64]) {
        debug_assert_eq!(block.kind, FactorKind::Gaussian1D);
        xi[block.xi_start] = f.mean;
        xi[block.xi_start + 1] = self.scale.encode_log_scale(f.log_sd);
    }

    /// Write a 2-D factor's coordinates into ξ.
    pub fn pack2(&self, block: &FactorBlock, f: &GaussianFactor2D, xi: &mut [f64]) {
        debug_assert_eq!(block.kind, FactorKind::Gaussian2D);
        let at = block.xi_start;
        xi[at] = f.mean[0];
        xi[at + 1] = f.mean[1];
        xi[at + 2] = self.scale.encode_log_scale(f.log_l11);
        xi[at + 3] = f.l21;
        xi[at + 4] = self.scale.encode_log_scale(f.log_l22);
    }

    /// Re-express coordinates under another scale parameterization; the
    /// represented distribution is unchanged.
    pub fn convert_coords(&self, xi: &[f64], to: ScaleParam) -> Result<Vec<f64>> {
        let mut out = xi.to_vec();
        for b in &self.blocks {
            let scale_offsets: &[usize] = match b.kind {
                FactorKind::Gaussian1D => &[1],
                FactorKind::Gaussian2D => &[2, 4],
            };
            for &off in scale_offsets {
                let (_, log_scale) = self.scale.decode(xi[b.xi_start + off])?;
                out[b.xi_start + off] = to.encode_log_scale(log_scale);
            }
        }
        Ok(out)
    }
}

/// Physicists' Gauss–Hermite rule: `∫ e^{−z²} h(z) dz ≈ Σ w_i h(z_i)`.
#[derive(Clone, Debug)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Build an `n`-node rule by Golub–Welsch: the nodes are eigenvalues of
    /// the symmetric tridiagonal Jacobi matrix with off-diagonals √(i/2),
    /// and each weight is √π times the squared first component of the
    /// corresponding eigenvector.
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("quadrature needs at least one node".into()));
        }
        if n == 1 {
            return Ok(Self { nodes: vec![0.0], weights: vec![std::f64::consts::PI.sqrt()] });
        }
        let mut jacobi = DMatrix::zeros(n, n);
        for i in 1..n {
            let b = (i as f64 / 2.0).sqrt();
            jacobi[(i - 1, i)] = b;
            jacobi[(i, i - 1)] = b;
        }
        let eig = jacobi.symmetric_eigen();
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let mut rule: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let first = eig.eigenvectors[(0, i)];
                (eig.eigenvalues[i], sqrt_pi * first * first)
            })
            .collect();
        rule.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Self {
            nodes: rule.iter().map(|r| r.0).collect(),
            weights: rule.iter().map(|r| r.1).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `E_{x~N(mean, sd²)}[g(x)] ≈ Σ w_i·g(mean + sd·√2·z_i)/√π`.
    ///
    /// Exact for polynomials of degree ≤ 2·nodes − 1.
    pub fn expect<S: Real, G>(&self, mean: S, sd: S, g: G) -> Result<S>
    where
        G: Fn(S) -> Result<S>,
    {
        if sd.value() <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "quadrature standard deviation must be positive, got {}",
                sd.value()
            )));
        }
        let sqrt2 = S::constant(std::f64::consts::SQRT_2);
        let mut acc = S::constant(0.0);
        for (&z, &w) in self.nodes.iter().zip(&self.weights) {
            let x = mean + sd * sqrt2 * S::constant(z);
            acc = acc + S::constant(w) * g(x)?;
        }
        Ok(acc * S::constant(FRAC_1_SQRT_PI))
    }
}

/// One-off quadrature of `E_{x~N(mean, sd²)}[g(x)]` with a fresh rule.
pub fn gauss_hermite<G: Fn(f64) -> f64>(g: G, mean: f64, sd: f64, nodes: usize) -> Result<f64> {
    GaussHermite::new(nodes)?.expect(mean, sd, |x| Ok(g(x)))
}
