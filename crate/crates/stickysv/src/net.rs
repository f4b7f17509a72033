//! Highway-style deep-Galerkin network with an exact differentiation engine.
//!
//! The network maps the (normalized) inputs through one dense layer and `L`
//! gated hidden cells:
//!
//! ```text
//! S1     = tanh(x W1 + b1)
//! Zl     = tanh(x Uz + Sl Wz + bz)       Gl = tanh(x Ug + Sl Wg + bg)
//! Rl     = tanh(x Ur + Sl Wr + br)       Hl = tanh(x Uh + (Sl .* Rl) Wh + bh)
//! S(l+1) = (1 - Gl) .* Hl + Zl .* Sl
//! P      = S(L+1) W + b
//! ```
//!
//! PDE residuals need exact first derivatives in (t, x, y, z, v) and the
//! second derivatives P_xx, P_xv, P_vv; training additionally needs the
//! gradient of functionals of those quantities with respect to every weight.
//! Both come from one mechanism: each layer quantity is carried as a "jet"
//! (value column, one column per input tangent, one column per requested
//! second-derivative pair), propagated by closed-form chain rules, and the
//! weight gradient is a hand-written reverse sweep through the jet
//! computation. Everything is checked against finite differences in tests.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::model::{ContractSpec, DomainBox, InputField, ModelParams, ModelVariant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub variant: ModelVariant,
    pub hidden_layers: usize,
    pub width: usize,
    pub input_box: DomainBox,
}

impl NetworkConfig {
    /// Full-scale architecture: four hidden cells of width 110.
    pub fn full(variant: ModelVariant) -> Self {
        NetworkConfig {
            variant,
            hidden_layers: 4,
            width: 110,
            input_box: DomainBox::default(),
        }
    }

    pub fn new(variant: ModelVariant, hidden_layers: usize, width: usize) -> Self {
        NetworkConfig {
            variant,
            hidden_layers,
            width,
            input_box: DomainBox::default(),
        }
    }

    pub fn n_inputs(&self) -> usize {
        self.variant.input_fields().len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgmLayerWeights {
    pub u_z: DMatrix<f64>,
    pub w_z: DMatrix<f64>,
    pub b_z: DVector<f64>,
    pub u_g: DMatrix<f64>,
    pub w_g: DMatrix<f64>,
    pub b_g: DVector<f64>,
    pub u_r: DMatrix<f64>,
    pub w_r: DMatrix<f64>,
    pub b_r: DVector<f64>,
    pub u_h: DMatrix<f64>,
    pub w_h: DMatrix<f64>,
    pub b_h: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkWeights {
    pub config: NetworkConfig,
    pub w_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub layers: Vec<DgmLayerWeights>,
    pub w_out: DVector<f64>,
    pub b_out: f64,
}

#[derive(Debug, Error)]
pub enum NetError {
    #[error("forward pass produced a non-finite output")]
    NonFiniteOutput,
    #[error("derivative evaluation produced a non-finite value")]
    NonFiniteDerivative,
    #[error("weight gradient produced a non-finite value")]
    NonFiniteGradient,
    #[error("`{0}` is not a calibratable input of this network")]
    UnknownParameter(&'static str),
    #[error("weight container does not match its declared shapes: {0}")]
    ShapeMismatch(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

impl NetworkWeights {
    /// Same shapes as `self`, all entries zero. Used for gradients and
    /// optimizer moments.
    pub fn zeros_like(&self) -> NetworkWeights {
        let d = self.w_in.nrows();
        let m = self.w_in.ncols();
        NetworkWeights {
            config: self.config.clone(),
            w_in: DMatrix::zeros(d, m),
            b_in: DVector::zeros(m),
            layers: self
                .layers
                .iter()
                .map(|_| DgmLayerWeights {
                    u_z: DMatrix::zeros(d, m),
                    w_z: DMatrix::zeros(m, m),
                    b_z: DVector::zeros(m),
                    u_g: DMatrix::zeros(d, m),
                    w_g: DMatrix::zeros(m, m),
                    b_g: DVector::zeros(m),
                    u_r: DMatrix::zeros(d, m),
                    w_r: DMatrix::zeros(m, m),
                    b_r: DVector::zeros(m),
                    u_h: DMatrix::zeros(d, m),
                    w_h: DMatrix::zeros(m, m),
                    b_h: DVector::zeros(m),
                })
                .collect(),
            w_out: DVector::zeros(m),
            b_out: 0.0,
        }
    }

    /// Flat views over every weight array, in declaration order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.w_in.as_slice(), self.b_in.as_slice()];
        for l in &self.layers {
            out.push(l.u_z.as_slice());
            out.push(l.w_z.as_slice());
            out.push(l.b_z.as_slice());
            out.push(l.u_g.as_slice());
            out.push(l.w_g.as_slice());
            out.push(l.b_g.as_slice());
            out.push(l.u_r.as_slice());
            out.push(l.w_r.as_slice());
            out.push(l.b_r.as_slice());
            out.push(l.u_h.as_slice());
            out.push(l.w_h.as_slice());
            out.push(l.b_h.as_slice());
        }
        out.push(self.w_out.as_slice());
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> =
            vec![self.w_in.as_mut_slice(), self.b_in.as_mut_slice()];
        for l in &mut self.layers {
            out.push(l.u_z.as_mut_slice());
            out.push(l.w_z.as_mut_slice());
            out.push(l.b_z.as_mut_slice());
            out.push(l.u_g.as_mut_slice());
            out.push(l.w_g.as_mut_slice());
            out.push(l.b_g.as_mut_slice());
            out.push(l.u_r.as_mut_slice());
            out.push(l.w_r.as_mut_slice());
            out.push(l.b_r.as_mut_slice());
            out.push(l.u_h.as_mut_slice());
            out.push(l.w_h.as_mut_slice());
            out.push(l.b_h.as_mut_slice());
        }
        out.push(self.w_out.as_mut_slice());
        out
    }

    pub fn n_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum::<usize>() + 1
    }

    /// self += c * other, including the output bias.
    pub fn add_scaled(&mut self, other: &NetworkWeights, c: f64) {
        let mut mine = self.slices_mut();
        let theirs = other.slices();
        for (a, b) in mine.iter_mut().zip(theirs.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += c * y;
            }
        }
        self.b_out += c * other.b_out;
    }

    pub fn is_finite(&self) -> bool {
        self.b_out.is_finite() && self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<NetworkWeights, NetError> {
        let file = std::fs::File::open(path)?;
        let w: NetworkWeights = serde_json::from_reader(std::io::BufReader::new(file))?;
        w.check_shapes()?;
        Ok(w)
    }

    pub fn check_shapes(&self) -> Result<(), NetError> {
        let d = self.config.n_inputs();
        let m = self.config.width;
        let expect = |ok: bool, what: &str| -> Result<(), NetError> {
            if ok {
                Ok(())
            } else {
                Err(NetError::ShapeMismatch(what.to_string()))
            }
        };
        expect(self.w_in.shape() == (d, m), "w_in")?;
        expect(self.b_in.len() == m, "b_in")?;
        expect(self.layers.len() == self.config.hidden_layers, "layer count")?;
        for (i, l) in self.layers.iter().enumerate() {
            for (u, name) in [(&l.u_z, "u_z"), (&l.u_g, "u_g"), (&l.u_r, "u_r"), (&l.u_h, "u_h")]
            {
                expect(u.shape() == (d, m), &format!("layer {i} {name}"))?;
            }
            for (w, name) in [(&l.w_z, "w_z"), (&l.w_g, "w_g"), (&l.w_r, "w_r"), (&l.w_h, "w_h")]
            {
                expect(w.shape() == (m, m), &format!("layer {i} {name}"))?;
            }
            for (b, name) in [(&l.b_z, "b_z"), (&l.b_g, "b_g"), (&l.b_r, "b_r"), (&l.b_h, "b_h")]
            {
                expect(b.len() == m, &format!("layer {i} {name}"))?;
            }
        }
        expect(self.w_out.len() == m, "w_out")?;
        Ok(())
    }
}

/// Scale-balanced uniform initialization: every matrix entry uniform in
/// +-sqrt(6 / (fan_in + fan_out)), biases zero, filled column-major in
/// declaration order so a seed pins every entry.
pub fn init_network(cfg: &NetworkConfig, seed: u64) -> NetworkWeights {
    let d = cfg.n_inputs();
    let m = cfg.width;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |rows: usize, cols: usize, fan_in: usize, fan_out: usize| -> DMatrix<f64> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut mat = DMatrix::zeros(rows, cols);
        for j in 0..cols {
            for i in 0..rows {
                mat[(i, j)] = rng.random_range(-bound..bound);
            }
        }
        mat
    };
    let w_in = fill(d, m, d, m);
    let b_in = DVector::zeros(m);
    let mut layers = Vec::with_capacity(cfg.hidden_layers);
    for _ in 0..cfg.hidden_layers {
        layers.push(DgmLayerWeights {
            u_z: fill(d, m, d, m),
            w_z: fill(m, m, m, m),
            b_z: DVector::zeros(m),
            u_g: fill(d, m, d, m),
            w_g: fill(m, m, m, m),
            b_g: DVector::zeros(m),
            u_r: fill(d, m, d, m),
            w_r: fill(m, m, m, m),
            b_r: DVector::zeros(m),
            u_h: fill(d, m, d, m),
            w_h: fill(m, m, m, m),
            b_h: DVector::zeros(m),
        });
    }
    let w_out = DVector::from_column_slice(fill(m, 1, m, 1).as_slice());
    NetworkWeights {
        config: cfg.clone(),
        w_in,
        b_in,
        layers,
        w_out,
        b_out: 0.0,
    }
}

/// One evaluation point in raw (un-normalized) units; the variant's layout
/// selects which fields feed the network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawInput {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub v: f64,
    pub strike: f64,
    pub rate: f64,
    pub rho: f64,
    pub kappa: f64,
    pub theta: f64,
    pub sigma: f64,
    pub eta: f64,
    pub maturity: f64,
    pub xi: f64,
}

impl RawInput {
    pub fn get(&self, f: InputField) -> f64 {
        match f {
            InputField::Time => self.t,
            InputField::Spot => self.x,
            InputField::RunMax => self.y,
            InputField::RunMin => self.z,
            InputField::Var => self.v,
            InputField::Strike => self.strike,
            InputField::Rate => self.rate,
            InputField::Rho => self.rho,
            InputField::Kappa => self.kappa,
            InputField::Theta => self.theta,
            InputField::Sigma => self.sigma,
            InputField::Eta => self.eta,
            InputField::Maturity => self.maturity,
            InputField::Xi => self.xi,
        }
    }

    pub fn set(&mut self, f: InputField, value: f64) {
        match f {
            InputField::Time => self.t = value,
            InputField::Spot => self.x = value,
            InputField::RunMax => self.y = value,
            InputField::RunMin => self.z = value,
            InputField::Var => self.v = value,
            InputField::Strike => self.strike = value,
            InputField::Rate => self.rate = value,
            InputField::Rho => self.rho = value,
            InputField::Kappa => self.kappa = value,
            InputField::Theta => self.theta = value,
            InputField::Sigma => self.sigma = value,
            InputField::Eta => self.eta = value,
            InputField::Maturity => self.maturity = value,
            InputField::Xi => self.xi = value,
        }
    }

    pub fn from_model(p: &ModelParams, c: &ContractSpec) -> Self {
        RawInput {
            t: c.valuation_time,
            x: p.x0,
            y: p.y0,
            z: p.z0,
            v: p.v0,
            strike: c.strike,
            rate: p.r,
            rho: p.rho,
            kappa: p.kappa,
            theta: p.theta,
            sigma: p.sigma,
            eta: p.eta,
            maturity: c.maturity,
            xi: p.xi,
        }
    }
}

/// Which tangents and second-derivative pairs a jet carries. Pairs index
/// into the tangent list.
#[derive(Debug, Clone)]
struct JetSpec {
    /// Per tangent: the layout row it seeds and the normalization scale, or
    /// `None` if the field is absent from the variant layout (derivative is
    /// identically zero).
    seeds: Vec<Option<(usize, f64)>>,
    pairs: Vec<(usize, usize)>,
}

impl JetSpec {
    fn slots(&self) -> usize {
        1 + self.seeds.len() + self.pairs.len()
    }

    fn build(
        cfg: &NetworkConfig,
        tangent_fields: &[InputField],
        pairs: Vec<(usize, usize)>,
    ) -> JetSpec {
        let layout = cfg.variant.input_fields();
        let seeds = tangent_fields
            .iter()
            .map(|f| {
                layout
                    .iter()
                    .position(|g| g == f)
                    .map(|row| (row, cfg.input_box.scale(*f)))
            })
            .collect();
        JetSpec { seeds, pairs }
    }
}

/// Dense m x slots array, column-major; column 0 is the value, then
/// tangents, then curvature pairs.
#[derive(Debug, Clone)]
struct Jet {
    m: usize,
    slots: usize,
    data: Vec<f64>,
}

impl Jet {
    fn zeros(m: usize, slots: usize) -> Jet {
        Jet {
            m,
            slots,
            data: vec![0.0; m * slots],
        }
    }

    fn col(&self, i: usize) -> &[f64] {
        &self.data[i * self.m..(i + 1) * self.m]
    }

    fn col_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.m..(i + 1) * self.m]
    }
}

/// Four-accumulator dot product: a fixed summation order that the compiler
/// can keep in SIMD lanes, identical on every target.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for k in 0..chunks {
        let j = 4 * k;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..n {
        s += a[j] * b[j];
    }
    s
}

/// dst += W^T s  (W is m_in x m_out, s has m_in entries, dst m_out).
fn tr_matvec_add(dst: &mut [f64], w: &DMatrix<f64>, s: &[f64]) {
    let m_in = w.nrows();
    let ws = w.as_slice();
    for (d, col) in dst.iter_mut().zip(ws.chunks_exact(m_in)) {
        *d += dot(col, s);
    }
}

/// dst[.,k] += W^T src[.,k] for every jet column.
fn tr_matmul_add(dst: &mut Jet, w: &DMatrix<f64>, src: &Jet) {
    for k in 0..dst.slots {
        tr_matvec_add(dst.col_mut(k), w, src.col(k));
    }
}

/// dst += W c  (W is m_in x m_out, c has m_out entries, dst m_in).
fn matvec_add(dst: &mut [f64], w: &DMatrix<f64>, c: &[f64]) {
    let m_in = w.nrows();
    let ws = w.as_slice();
    for (&cj, col) in c.iter().zip(ws.chunks_exact(m_in)) {
        if cj == 0.0 {
            continue;
        }
        for (d, a) in dst.iter_mut().zip(col) {
            *d += a * cj;
        }
    }
}

/// dst[.,k] += W c_bar[.,k] for every slot.
fn matmul_add(dst: &mut Jet, w: &DMatrix<f64>, c_bar: &Jet) {
    for k in 0..dst.slots {
        matvec_add(dst.col_mut(k), w, c_bar.col(k));
    }
}

/// W += sum_k s[.,k] c_bar[.,k]^T.
fn outer_jets_add(w: &mut DMatrix<f64>, s: &Jet, c_bar: &Jet) {
    for k in 0..s.slots {
        outer_add(w, s.col(k), c_bar.col(k));
    }
}

/// W += s c^T as a slice kernel (W is m_in x m_out).
fn outer_add(w: &mut DMatrix<f64>, s: &[f64], c: &[f64]) {
    let m_in = w.nrows();
    let ws = w.as_mut_slice();
    for (&cj, col) in c.iter().zip(ws.chunks_exact_mut(m_in)) {
        if cj == 0.0 {
            continue;
        }
        for (d, a) in col.iter_mut().zip(s) {
            *d += a * cj;
        }
    }
}

fn ew_add_mul(dst: &mut [f64], a: &[f64], b: &[f64]) {
    for ((d, x), y) in dst.iter_mut().zip(a).zip(b) {
        *d += x * y;
    }
}

/// Affine jet: C = U^T x + W^T S + b, tangent a additionally gets the seed
/// row of U, curvature columns only propagate S.
fn affine_jet(
    spec: &JetSpec,
    x_norm: &[f64],
    u: &DMatrix<f64>,
    sw: Option<(&Jet, &DMatrix<f64>)>,
    b: Option<&DVector<f64>>,
) -> Jet {
    let m = u.ncols();
    let mut out = Jet::zeros(m, spec.slots());
    tr_matvec_add(out.col_mut(0), u, x_norm);
    if let Some(bv) = b {
        let c0 = out.col_mut(0);
        for i in 0..m {
            c0[i] += bv[i];
        }
    }
    for (a, seed) in spec.seeds.iter().enumerate() {
        if let Some((row, scale)) = seed {
            let col = out.col_mut(1 + a);
            for j in 0..m {
                col[j] += scale * u[(*row, j)];
            }
        }
    }
    if let Some((s, w)) = sw {
        tr_matmul_add(&mut out, w, s);
    }
    out
}

/// Reverse of [`affine_jet`]: accumulate weight gradients and the adjoint of
/// the incoming state jet.
#[allow(clippy::too_many_arguments)]
fn affine_reverse(
    spec: &JetSpec,
    x_norm: &[f64],
    c_bar: &Jet,
    u_grad: &mut DMatrix<f64>,
    s: Option<&Jet>,
    w: Option<&DMatrix<f64>>,
    w_grad: Option<&mut DMatrix<f64>>,
    s_bar: Option<&mut Jet>,
    b_grad: Option<&mut DVector<f64>>,
) {
    outer_add(u_grad, x_norm, c_bar.col(0));
    for (a, seed) in spec.seeds.iter().enumerate() {
        if let Some((row, scale)) = seed {
            let cb = c_bar.col(1 + a);
            for j in 0..u_grad.ncols() {
                u_grad[(*row, j)] += scale * cb[j];
            }
        }
    }
    if let Some(bg) = b_grad {
        let c0 = c_bar.col(0);
        for i in 0..bg.len() {
            bg[i] += c0[i];
        }
    }
    if let (Some(s), Some(w), Some(wg), Some(sb)) = (s, w, w_grad, s_bar) {
        outer_jets_add(wg, s, c_bar);
        matmul_add(sb, w, c_bar);
    }
}

/// Elementwise tanh jet.
fn tanh_jet(spec: &JetSpec, a: &Jet) -> Jet {
    let m = a.m;
    let mut out = Jet::zeros(m, a.slots);
    let n_tan = spec.seeds.len();
    let (val, rest) = out.data.split_at_mut(m);
    for (o, x) in val.iter_mut().zip(a.col(0)) {
        *o = x.tanh();
    }
    // tangents: f1 * Aa
    for t in 0..n_tan {
        let dst = &mut rest[t * m..(t + 1) * m];
        for ((o, &f), x) in dst.iter_mut().zip(val.iter()).zip(a.col(1 + t)) {
            *o = (1.0 - f * f) * x;
        }
    }
    // pairs: f2 * A_pa * A_pb + f1 * Ap
    for (pi, &(pa, pb)) in spec.pairs.iter().enumerate() {
        let sp = n_tan + pi;
        let dst = &mut rest[sp * m..(sp + 1) * m];
        let ta = a.col(1 + pa);
        let tb = a.col(1 + pb);
        let ap = a.col(1 + n_tan + pi);
        for i in 0..m {
            let f = val[i];
            let f1 = 1.0 - f * f;
            let f2 = -2.0 * f * f1;
            dst[i] = f2 * ta[i] * tb[i] + f1 * ap[i];
        }
    }
    out
}

/// Reverse of [`tanh_jet`]: needs the pre-activation jet and the activated
/// value column.
fn tanh_reverse(spec: &JetSpec, a: &Jet, f_val: &[f64], c_bar: &Jet, a_bar: &mut Jet) {
    let m = a.m;
    let n_tan = spec.seeds.len();
    let slots = a.slots;
    // f1 factor on every slot
    for k in 0..slots {
        let src = c_bar.col(k);
        let dst = a_bar.col_mut(k);
        for i in 0..m {
            let f = f_val[i];
            dst[i] += (1.0 - f * f) * src[i];
        }
    }
    // value-channel corrections from tangent slots
    {
        let val_bar = a_bar.col_mut(0);
        for t in 0..n_tan {
            let ta = a.col(1 + t);
            let cb = c_bar.col(1 + t);
            for i in 0..m {
                let f = f_val[i];
                let f2 = -2.0 * f * (1.0 - f * f);
                val_bar[i] += f2 * ta[i] * cb[i];
            }
        }
    }
    // pair slots
    for (pi, &(pa, pb)) in spec.pairs.iter().enumerate() {
        let sp = 1 + n_tan + pi;
        let ta = a.col(1 + pa);
        let tb = a.col(1 + pb);
        let ap = a.col(sp);
        let cb = c_bar.col(sp);
        {
            let val_bar = a_bar.col_mut(0);
            for i in 0..m {
                let f = f_val[i];
                let f1 = 1.0 - f * f;
                let f2 = -2.0 * f * f1;
                let f3 = (6.0 * f * f - 2.0) * f1;
                val_bar[i] += (f3 * ta[i] * tb[i] + f2 * ap[i]) * cb[i];
            }
        }
        {
            let dst = a_bar.col_mut(1 + pa);
            for i in 0..m {
                let f = f_val[i];
                let f2 = -2.0 * f * (1.0 - f * f);
                dst[i] += f2 * tb[i] * cb[i];
            }
        }
        {
            let dst = a_bar.col_mut(1 + pb);
            for i in 0..m {
                let f = f_val[i];
                let f2 = -2.0 * f * (1.0 - f * f);
                dst[i] += f2 * ta[i] * cb[i];
            }
        }
    }
}

/// Hadamard product jet: C = P .* Q.
fn mul_jet(spec: &JetSpec, p: &Jet, q: &Jet) -> Jet {
    let m = p.m;
    let n_tan = spec.seeds.len();
    let mut out = Jet::zeros(m, p.slots);
    ew_add_mul(out.col_mut(0), p.col(0), q.col(0));
    let (p0, q0) = (p.col(0), q.col(0));
    for t in 0..n_tan {
        let k = 1 + t;
        let (pk, qk) = (p.col(k), q.col(k));
        let dst = out.col_mut(k);
        for i in 0..m {
            dst[i] = pk[i] * q0[i] + p0[i] * qk[i];
        }
    }
    for (pi, &(pa, pb)) in spec.pairs.iter().enumerate() {
        let sp = 1 + n_tan + pi;
        let (pp, qp) = (p.col(sp), q.col(sp));
        let (pta, qta) = (p.col(1 + pa), q.col(1 + pa));
        let (ptb, qtb) = (p.col(1 + pb), q.col(1 + pb));
        let dst = out.col_mut(sp);
        for i in 0..m {
            dst[i] = pp[i] * q0[i] + pta[i] * qtb[i] + ptb[i] * qta[i] + p0[i] * qp[i];
        }
    }
    out
}

/// Reverse of [`mul_jet`] into both factors.
fn mul_reverse(spec: &JetSpec, p: &Jet, q: &Jet, c_bar: &Jet, p_bar: &mut Jet, q_bar: &mut Jet) {
    let n_tan = spec.seeds.len();
    // value slot
    ew_add_mul(p_bar.col_mut(0), q.col(0), c_bar.col(0));
    ew_add_mul(q_bar.col_mut(0), p.col(0), c_bar.col(0));
    for t in 0..n_tan {
        let k = 1 + t;
        // Ck = Pk Q0 + P0 Qk
        ew_add_mul(p_bar.col_mut(k), q.col(0), c_bar.col(k));
        ew_add_mul(q_bar.col_mut(k), p.col(0), c_bar.col(k));
        ew_add_mul(p_bar.col_mut(0), q.col(k), c_bar.col(k));
        ew_add_mul(q_bar.col_mut(0), p.col(k), c_bar.col(k));
    }
    for (pi, &(pa, pb)) in spec.pairs.iter().enumerate() {
        let sp = 1 + n_tan + pi;
        // Cp = Pp Q0 + P_pa Q_pb + P_pb Q_pa + P0 Qp
        ew_add_mul(p_bar.col_mut(sp), q.col(0), c_bar.col(sp));
        ew_add_mul(q_bar.col_mut(sp), p.col(0), c_bar.col(sp));
        ew_add_mul(p_bar.col_mut(0), q.col(sp), c_bar.col(sp));
        ew_add_mul(q_bar.col_mut(0), p.col(sp), c_bar.col(sp));
        ew_add_mul(p_bar.col_mut(1 + pa), q.col(1 + pb), c_bar.col(sp));
        ew_add_mul(p_bar.col_mut(1 + pb), q.col(1 + pa), c_bar.col(sp));
        ew_add_mul(q_bar.col_mut(1 + pa), p.col(1 + pb), c_bar.col(sp));
        ew_add_mul(q_bar.col_mut(1 + pb), p.col(1 + pa), c_bar.col(sp));
    }
}

struct LayerTrace {
    s_in: Jet,
    az: Jet,
    z: Jet,
    ag: Jet,
    g: Jet,
    ar: Jet,
    r: Jet,
    sr: Jet,
    ah: Jet,
    h: Jet,
}

/// Full forward state kept for a reverse sweep.
pub struct EvalTrace {
    spec: JetSpec,
    x_norm: Vec<f64>,
    a1: Jet,
    layers: Vec<LayerTrace>,
    s_final: Jet,
    /// Per-slot scalar outputs: value, tangents, pairs.
    outputs: Vec<f64>,
}

impl EvalTrace {
    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }
}

fn forward_jets(w: &NetworkWeights, raw: &RawInput, spec: JetSpec) -> Result<EvalTrace, NetError> {
    let fields = w.config.variant.input_fields();
    let x_norm: Vec<f64> = fields
        .iter()
        .map(|&f| w.config.input_box.normalize_field(f, raw.get(f)))
        .collect();
    let a1 = affine_jet(&spec, &x_norm, &w.w_in, None, Some(&w.b_in));
    let mut s = tanh_jet(&spec, &a1);
    let mut layers = Vec::with_capacity(w.layers.len());
    for lw in &w.layers {
        let az = affine_jet(&spec, &x_norm, &lw.u_z, Some((&s, &lw.w_z)), Some(&lw.b_z));
        let z = tanh_jet(&spec, &az);
        let ag = affine_jet(&spec, &x_norm, &lw.u_g, Some((&s, &lw.w_g)), Some(&lw.b_g));
        let g = tanh_jet(&spec, &ag);
        let ar = affine_jet(&spec, &x_norm, &lw.u_r, Some((&s, &lw.w_r)), Some(&lw.b_r));
        let r = tanh_jet(&spec, &ar);
        let sr = mul_jet(&spec, &s, &r);
        let ah = affine_jet(&spec, &x_norm, &lw.u_h, Some((&sr, &lw.w_h)), Some(&lw.b_h));
        let h = tanh_jet(&spec, &ah);
        // S' = H - G.*H + Z.*S
        let gh = mul_jet(&spec, &g, &h);
        let zs = mul_jet(&spec, &z, &s);
        let mut s_next = h.clone();
        for i in 0..s_next.data.len() {
            s_next.data[i] += zs.data[i] - gh.data[i];
        }
        layers.push(LayerTrace {
            s_in: s,
            az,
            z,
            ag,
            g,
            ar,
            r,
            sr,
            ah,
            h,
        });
        s = s_next;
    }
    let slots = spec.slots();
    let mut outputs = vec![0.0; slots];
    for (k, out) in outputs.iter_mut().enumerate() {
        let col = s.col(k);
        let mut acc = 0.0;
        for i in 0..col.len() {
            acc += col[i] * w.w_out[i];
        }
        *out = acc;
    }
    outputs[0] += w.b_out;
    if outputs.iter().any(|o| !o.is_finite()) {
        return Err(NetError::NonFiniteOutput);
    }
    Ok(EvalTrace {
        spec,
        x_norm,
        a1,
        layers,
        s_final: s,
        outputs,
    })
}

/// Reverse sweep: accumulate d(sum_k adj[k] * output_k)/d(weights) into
/// `grad`, reusing the forward trace.
pub fn backward_jets(w: &NetworkWeights, trace: &EvalTrace, adj: &[f64], grad: &mut NetworkWeights) {
    let spec = &trace.spec;
    let m = w.config.width;
    let slots = spec.slots();
    debug_assert_eq!(adj.len(), slots);
    // output layer
    let mut s_bar = Jet::zeros(m, slots);
    for k in 0..slots {
        if adj[k] == 0.0 {
            continue;
        }
        let sb = s_bar.col_mut(k);
        for i in 0..m {
            sb[i] = adj[k] * w.w_out[i];
        }
        let sc = trace.s_final.col(k);
        for i in 0..m {
            grad.w_out[i] += adj[k] * sc[i];
        }
    }
    grad.b_out += adj[0];
    // hidden cells, backwards
    for (lw, lt, lg) in itertools_rev(w, trace, grad) {
        // S' = H + Z.*S - G.*H
        let mut h_bar = s_bar.clone();
        let mut g_bar = Jet::zeros(m, slots);
        let mut z_bar = Jet::zeros(m, slots);
        let mut s_in_bar = Jet::zeros(m, slots);
        {
            // M1 = G .* H contributes with weight -1
            let mut neg = s_bar.clone();
            for v in neg.data.iter_mut() {
                *v = -*v;
            }
            mul_reverse(spec, &lt.g, &lt.h, &neg, &mut g_bar, &mut h_bar);
            // M2 = Z .* S contributes with weight +1
            mul_reverse(spec, &lt.z, &lt.s_in, &s_bar, &mut z_bar, &mut s_in_bar);
        }
        // H = tanh(AH), AH = x Uh + SR Wh + bh
        let mut ah_bar = Jet::zeros(m, slots);
        tanh_reverse(spec, &lt.ah, lt.h.col(0), &h_bar, &mut ah_bar);
        let mut sr_bar = Jet::zeros(m, slots);
        affine_reverse(
            spec,
            &trace.x_norm,
            &ah_bar,
            &mut lg.u_h,
            Some(&lt.sr),
            Some(&lw.w_h),
            Some(&mut lg.w_h),
            Some(&mut sr_bar),
            Some(&mut lg.b_h),
        );
        // SR = S .* R
        let mut r_bar = Jet::zeros(m, slots);
        mul_reverse(spec, &lt.s_in, &lt.r, &sr_bar, &mut s_in_bar, &mut r_bar);
        // R = tanh(AR)
        let mut ar_bar = Jet::zeros(m, slots);
        tanh_reverse(spec, &lt.ar, lt.r.col(0), &r_bar, &mut ar_bar);
        affine_reverse(
            spec,
            &trace.x_norm,
            &ar_bar,
            &mut lg.u_r,
            Some(&lt.s_in),
            Some(&lw.w_r),
            Some(&mut lg.w_r),
            Some(&mut s_in_bar),
            Some(&mut lg.b_r),
        );
        // Z = tanh(AZ)
        let mut az_bar = Jet::zeros(m, slots);
        tanh_reverse(spec, &lt.az, lt.z.col(0), &z_bar, &mut az_bar);
        affine_reverse(
            spec,
            &trace.x_norm,
            &az_bar,
            &mut lg.u_z,
            Some(&lt.s_in),
            Some(&lw.w_z),
            Some(&mut lg.w_z),
            Some(&mut s_in_bar),
            Some(&mut lg.b_z),
        );
        // G = tanh(AG)
        let mut ag_bar = Jet::zeros(m, slots);
        tanh_reverse(spec, &lt.ag, lt.g.col(0), &g_bar, &mut ag_bar);
        affine_reverse(
            spec,
            &trace.x_norm,
            &ag_bar,
            &mut lg.u_g,
            Some(&lt.s_in),
            Some(&lw.w_g),
            Some(&mut lg.w_g),
            Some(&mut s_in_bar),
            Some(&mut lg.b_g),
        );
        s_bar = s_in_bar;
    }
    // input layer: S1 = tanh(A1), A1 = x W_in + b_in
    let s1 = trace
        .layers
        .first()
        .map(|l| &l.s_in)
        .unwrap_or(&trace.s_final);
    let mut a1_bar = Jet::zeros(m, slots);
    tanh_reverse(spec, &trace.a1, s1.col(0), &s_bar, &mut a1_bar);
    affine_reverse(
        spec,
        &trace.x_norm,
        &a1_bar,
        &mut grad.w_in,
        None,
        None,
        None,
        None,
        Some(&mut grad.b_in),
    );
}

/// Zip layer weights, traces and gradient layers in reverse order. Written as
/// a helper because the gradient borrow must be split per layer.
fn itertools_rev<'a>(
    w: &'a NetworkWeights,
    trace: &'a EvalTrace,
    grad: &'a mut NetworkWeights,
) -> impl Iterator<Item = (&'a DgmLayerWeights, &'a LayerTrace, &'a mut DgmLayerWeights)> {
    w.layers
        .iter()
        .rev()
        .zip(trace.layers.iter().rev())
        .zip(grad.layers.iter_mut().rev())
        .map(|((a, b), c)| (a, b, c))
}

/// Everything the PDE residuals need at one point: the price and its
/// derivatives with respect to the raw inputs t, x, y, z, v, plus the
/// second derivatives P_xx, P_xv and P_vv.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DerivBundle {
    pub p: f64,
    pub p_t: f64,
    pub p_x: f64,
    pub p_y: f64,
    pub p_z: f64,
    pub p_v: f64,
    pub p_xx: f64,
    pub p_xv: f64,
    pub p_vv: f64,
}

/// Adjoint seed paired with [`DerivBundle`] for reverse sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BundleAdjoint {
    pub p: f64,
    pub p_t: f64,
    pub p_x: f64,
    pub p_y: f64,
    pub p_z: f64,
    pub p_v: f64,
    pub p_xx: f64,
    pub p_xv: f64,
    pub p_vv: f64,
}

impl BundleAdjoint {
    fn to_slots(self) -> [f64; 9] {
        [
            self.p, self.p_t, self.p_x, self.p_y, self.p_z, self.p_v, self.p_xx, self.p_xv,
            self.p_vv,
        ]
    }
}

const PDE_TANGENTS: [InputField; 5] = [
    InputField::Time,
    InputField::Spot,
    InputField::RunMax,
    InputField::RunMin,
    InputField::Var,
];

fn pde_spec(cfg: &NetworkConfig) -> JetSpec {
    // pairs into the tangent list: (x,x), (x,v), (v,v)
    JetSpec::build(cfg, &PDE_TANGENTS, vec![(1, 1), (1, 4), (4, 4)])
}

/// Network value at one raw input point.
pub fn forward(w: &NetworkWeights, raw: &RawInput) -> Result<f64, NetError> {
    let spec = JetSpec::build(&w.config, &[], vec![]);
    Ok(forward_jets(w, raw, spec)?.outputs[0])
}

/// Value plus the exact first and second derivatives the pricing PDE needs,
/// all with respect to the raw (pre-normalization) inputs.
pub fn derivatives(w: &NetworkWeights, raw: &RawInput) -> Result<DerivBundle, NetError> {
    Ok(eval_pde(w, raw)?.0)
}

/// As [`derivatives`] but keeps the forward trace for a reverse sweep.
pub fn eval_pde(w: &NetworkWeights, raw: &RawInput) -> Result<(DerivBundle, EvalTrace), NetError> {
    let trace = forward_jets(w, raw, pde_spec(&w.config))?;
    let o = &trace.outputs;
    let bundle = DerivBundle {
        p: o[0],
        p_t: o[1],
        p_x: o[2],
        p_y: o[3],
        p_z: o[4],
        p_v: o[5],
        p_xx: o[6],
        p_xv: o[7],
        p_vv: o[8],
    };
    if !o.iter().all(|v| v.is_finite()) {
        return Err(NetError::NonFiniteDerivative);
    }
    Ok((bundle, trace))
}

/// Value-only forward keeping the trace (used for terminal-condition points
/// where no derivatives enter the loss).
pub fn eval_value(w: &NetworkWeights, raw: &RawInput) -> Result<(f64, EvalTrace), NetError> {
    let trace = forward_jets(w, raw, JetSpec::build(&w.config, &[], vec![]))?;
    Ok((trace.outputs[0], trace))
}

/// Accumulate the weight gradient of `sum adj . outputs` for a PDE-spec
/// trace.
pub fn backward_pde(
    w: &NetworkWeights,
    trace: &EvalTrace,
    adj: &BundleAdjoint,
    grad: &mut NetworkWeights,
) {
    backward_jets(w, trace, &adj.to_slots(), grad);
}

/// Accumulate the weight gradient of `p_bar * P` for a value-only trace.
pub fn backward_value(w: &NetworkWeights, trace: &EvalTrace, p_bar: f64, grad: &mut NetworkWeights) {
    backward_jets(w, trace, &[p_bar], grad);
}

/// Fields allowed in a calibration jacobian.
const CALIBRATABLE: [InputField; 9] = [
    InputField::Rho,
    InputField::Kappa,
    InputField::Theta,
    InputField::Sigma,
    InputField::Eta,
    InputField::Var,
    InputField::Xi,
    InputField::RunMax,
    InputField::RunMin,
];

/// Exact gradient of the network value with respect to a calibratable subset
/// of the raw inputs (normalization chain rule included).
pub fn param_jacobian(
    w: &NetworkWeights,
    raw: &RawInput,
    params: &[InputField],
) -> Result<Vec<f64>, NetError> {
    let layout = w.config.variant.input_fields();
    for f in params {
        if !CALIBRATABLE.contains(f) || !layout.contains(f) {
            return Err(NetError::UnknownParameter(f.name()));
        }
    }
    let spec = JetSpec::build(&w.config, params, vec![]);
    let trace = forward_jets(w, raw, spec)?;
    let grads = trace.outputs[1..].to_vec();
    if !grads.iter().all(|g| g.is_finite()) {
        return Err(NetError::NonFiniteDerivative);
    }
    Ok(grads)
}

/// Gradient of a scalar objective over a batch of points with respect to
/// every weight. The objective receives the per-point derivative bundles and
/// must return its value together with the exact per-point adjoints.
pub fn weight_gradient<F>(
    w: &NetworkWeights,
    points: &[RawInput],
    objective: F,
) -> Result<(f64, NetworkWeights), NetError>
where
    F: FnOnce(&[DerivBundle]) -> (f64, Vec<BundleAdjoint>),
{
    let mut traces = Vec::with_capacity(points.len());
    let mut bundles = Vec::with_capacity(points.len());
    for raw in points {
        let (b, t) = eval_pde(w, raw)?;
        bundles.push(b);
        traces.push(t);
    }
    let (value, adjoints) = objective(&bundles);
    assert_eq!(adjoints.len(), points.len(), "one adjoint per point");
    let mut grad = w.zeros_like();
    for (trace, adj) in traces.iter().zip(adjoints.iter()) {
        backward_pde(w, trace, adj, &mut grad);
    }
    if !grad.is_finite() {
        return Err(NetError::NonFiniteGradient);
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn test_cfg(variant: ModelVariant, layers: usize, width: usize) -> NetworkConfig {
        NetworkConfig::new(variant, layers, width)
    }

    fn random_raw(rng: &mut ChaCha8Rng, b: &DomainBox) -> RawInput {
        let mut raw = RawInput {
            t: 0.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
            v: 0.0,
            strike: 0.0,
            rate: 0.0,
            rho: 0.0,
            kappa: 0.0,
            theta: 0.0,
            sigma: 0.0,
            eta: 0.0,
            maturity: 0.0,
            xi: 0.0,
        };
        for f in InputField::ALL {
            let (lo, hi) = (b.lo_of(f), b.hi_of(f));
            // keep a margin so FD probes stay in sensible territory
            let pad = 0.05 * (hi - lo);
            raw.set(f, rng.random_range(lo + pad..hi - pad));
        }
        raw
    }

    /// Straight-line re-implementation of the layer equations with plain
    /// loops; independent of the jet machinery.
    fn plain_forward(w: &NetworkWeights, raw: &RawInput) -> f64 {
        let fields = w.config.variant.input_fields();
        let x: Vec<f64> = fields
            .iter()
            .map(|&f| w.config.input_box.normalize_field(f, raw.get(f)))
            .collect();
        let m = w.config.width;
        let affine = |u: &DMatrix<f64>, s: Option<&Vec<f64>>, wm: Option<&DMatrix<f64>>,
                      b: &DVector<f64>| {
            let mut out = vec![0.0; m];
            for j in 0..m {
                let mut acc = b[j];
                for (i, xi) in x.iter().enumerate() {
                    acc += xi * u[(i, j)];
                }
                if let (Some(s), Some(wm)) = (s, wm) {
                    for i in 0..m {
                        acc += s[i] * wm[(i, j)];
                    }
                }
                out[j] = acc;
            }
            out
        };
        let mut s: Vec<f64> = affine(&w.w_in, None, None, &w.b_in)
            .iter()
            .map(|a| a.tanh())
            .collect();
        for l in &w.layers {
            let z: Vec<f64> = affine(&l.u_z, Some(&s), Some(&l.w_z), &l.b_z)
                .iter()
                .map(|a| a.tanh())
                .collect();
            let g: Vec<f64> = affine(&l.u_g, Some(&s), Some(&l.w_g), &l.b_g)
                .iter()
                .map(|a| a.tanh())
                .collect();
            let r: Vec<f64> = affine(&l.u_r, Some(&s), Some(&l.w_r), &l.b_r)
                .iter()
                .map(|a| a.tanh())
                .collect();
            let sr: Vec<f64> = s.iter().zip(r.iter()).map(|(a, b)| a * b).collect();
            let h: Vec<f64> = affine(&l.u_h, Some(&sr), Some(&l.w_h), &l.b_h)
                .iter()
                .map(|a| a.tanh())
                .collect();
            s = (0..m)
                .map(|i| (1.0 - g[i]) * h[i] + z[i] * s[i])
                .collect();
        }
        let mut out = w.b_out;
        for i in 0..m {
            out += s[i] * w.w_out[i];
        }
        out
    }

    fn rel_close(a: f64, b: f64, rel: f64, floor: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()) + floor
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = test_cfg(ModelVariant::Svsdu, 2, 110);
        let a = init_network(&cfg, 5);
        let b = init_network(&cfg, 5);
        assert_eq!(a, b);
        let c = init_network(&cfg, 6);
        assert_ne!(a, c);
        // first-layer bound sqrt(6 / (14 + 110))
        let bound = (6.0 / 124.0f64).sqrt();
        assert_abs_diff_eq!(bound, 0.2200, epsilon = 5e-5);
        let max = a.w_in.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
        assert!(max <= bound && max > 0.9 * bound);
        assert!(a.b_in.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_network_is_constant_bias() {
        let cfg = test_cfg(ModelVariant::Svsdu, 2, 8);
        let mut w = init_network(&cfg, 1).zeros_like();
        w.b_out = 3.25;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw = random_raw(&mut rng, &cfg.input_box);
        assert_eq!(forward(&w, &raw).unwrap(), 3.25);
        let d = derivatives(&w, &raw).unwrap();
        assert_eq!(d.p, 3.25);
        for v in [d.p_t, d.p_x, d.p_y, d.p_z, d.p_v, d.p_xx, d.p_xv, d.p_vv] {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn output_bias_shifts_forward_exactly() {
        let cfg = test_cfg(ModelVariant::Svsdu, 2, 16);
        let mut w = init_network(&cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw = random_raw(&mut rng, &cfg.input_box);
        let before = forward(&w, &raw).unwrap();
        w.b_out += 0.731;
        let after = forward(&w, &raw).unwrap();
        assert_abs_diff_eq!(after - before, 0.731, epsilon = 1e-14);
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (variant, layers, width) in [
            (ModelVariant::Svsdu, 3, 20),
            (ModelVariant::Svsd, 2, 13),
            (ModelVariant::Svsu, 1, 7),
        ] {
            let cfg = test_cfg(variant, layers, width);
            let w = init_network(&cfg, 11);
            for _ in 0..10 {
                let raw = random_raw(&mut rng, &cfg.input_box);
                let a = forward(&w, &raw).unwrap();
                let b = plain_forward(&w, &raw);
                assert!(
                    (a - b).abs() < 1e-12,
                    "jet vs plain forward: {a} vs {b}"
                );
            }
        }
    }

    fn fd_first(w: &NetworkWeights, raw: &RawInput, f: InputField) -> f64 {
        let b = &w.config.input_box;
        let h = 1e-4 * (b.hi_of(f) - b.lo_of(f)) / 2.0;
        let mut up = *raw;
        up.set(f, raw.get(f) + h);
        let mut dn = *raw;
        dn.set(f, raw.get(f) - h);
        (forward(w, &up).unwrap() - forward(w, &dn).unwrap()) / (2.0 * h)
    }

    fn fd_second(w: &NetworkWeights, raw: &RawInput, f: InputField) -> f64 {
        let b = &w.config.input_box;
        let h = 1e-3 * (b.hi_of(f) - b.lo_of(f)) / 2.0;
        let mut up = *raw;
        up.set(f, raw.get(f) + h);
        let mut dn = *raw;
        dn.set(f, raw.get(f) - h);
        (forward(w, &up).unwrap() - 2.0 * forward(w, raw).unwrap() + forward(w, &dn).unwrap())
            / (h * h)
    }

    fn fd_cross(w: &NetworkWeights, raw: &RawInput, f: InputField, g: InputField) -> f64 {
        let b = &w.config.input_box;
        let hf = 1e-3 * (b.hi_of(f) - b.lo_of(f)) / 2.0;
        let hg = 1e-3 * (b.hi_of(g) - b.lo_of(g)) / 2.0;
        let eval = |df: f64, dg: f64| {
            let mut r = *raw;
            r.set(f, raw.get(f) + df);
            r.set(g, raw.get(g) + dg);
            forward(w, &r).unwrap()
        };
        (eval(hf, hg) - eval(hf, -hg) - eval(-hf, hg) + eval(-hf, -hg)) / (4.0 * hf * hg)
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let cfg = test_cfg(ModelVariant::Svsdu, 2, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..20 {
            let w = init_network(&cfg, 100 + trial);
            let raw = random_raw(&mut rng, &cfg.input_box);
            let d = derivatives(&w, &raw).unwrap();
            for (got, f) in [
                (d.p_t, InputField::Time),
                (d.p_x, InputField::Spot),
                (d.p_y, InputField::RunMax),
                (d.p_z, InputField::RunMin),
                (d.p_v, InputField::Var),
            ] {
                let fd = fd_first(&w, &raw, f);
                assert!(
                    rel_close(got, fd, 1e-5, 1e-9),
                    "first deriv {f:?}: exact {got} vs fd {fd}"
                );
            }
            let fd_xx = fd_second(&w, &raw, InputField::Spot);
            assert!(
                rel_close(d.p_xx, fd_xx, 1e-3, 1e-7),
                "p_xx {} vs {fd_xx}",
                d.p_xx
            );
            let fd_vv = fd_second(&w, &raw, InputField::Var);
            assert!(
                rel_close(d.p_vv, fd_vv, 1e-3, 1e-7),
                "p_vv {} vs {fd_vv}",
                d.p_vv
            );
            let fd_xv = fd_cross(&w, &raw, InputField::Spot, InputField::Var);
            assert!(
                rel_close(d.p_xv, fd_xv, 1e-3, 1e-7),
                "p_xv {} vs {fd_xv}",
                d.p_xv
            );
        }
    }

    #[test]
    fn derivatives_are_box_invariant_in_raw_space() {
        // a differently-scaled box changes the represented function, but the
        // reported derivatives must always be raw-space ones
        let mut cfg = test_cfg(ModelVariant::Svsdu, 2, 10);
        for f in InputField::ALL {
            let i = f.index();
            let mid = 0.5 * (cfg.input_box.lo[i] + cfg.input_box.hi[i]);
            let half = 0.5 * (cfg.input_box.hi[i] - cfg.input_box.lo[i]);
            cfg.input_box.lo[i] = mid - 1.7 * half;
            cfg.input_box.hi[i] = mid + 1.7 * half;
        }
        let w = init_network(&cfg, 77);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let raw = random_raw(&mut rng, &DomainBox::default());
        let d = derivatives(&w, &raw).unwrap();
        let fd = fd_first(&w, &raw, InputField::Spot);
        assert!(rel_close(d.p_x, fd, 1e-6, 1e-10));
        let fd_xx = fd_second(&w, &raw, InputField::Spot);
        assert!(rel_close(d.p_xx, fd_xx, 1e-3, 1e-8));
    }

    #[test]
    fn param_jacobian_matches_fd_and_derivative_bundle() {
        let cfg = test_cfg(ModelVariant::Svsdu, 2, 12);
        let w = init_network(&cfg, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let params = [
            InputField::Rho,
            InputField::Kappa,
            InputField::Theta,
            InputField::Sigma,
            InputField::Eta,
            InputField::Var,
            InputField::Xi,
            InputField::RunMax,
            InputField::RunMin,
        ];
        for _ in 0..10 {
            let raw = random_raw(&mut rng, &cfg.input_box);
            let jac = param_jacobian(&w, &raw, &params).unwrap();
            for (j, f) in params.iter().enumerate() {
                let fd = fd_first(&w, &raw, *f);
                assert!(
                    rel_close(jac[j], fd, 1e-5, 1e-9),
                    "{f:?}: {} vs {fd}",
                    jac[j]
                );
            }
            let only_v = param_jacobian(&w, &raw, &[InputField::Var]).unwrap();
            let d = derivatives(&w, &raw).unwrap();
            assert_abs_diff_eq!(only_v[0], d.p_v, epsilon = 1e-12);
        }
    }

    #[test]
    fn param_jacobian_rejects_unknown_parameters() {
        let cfg = test_cfg(ModelVariant::Svsdu, 1, 6);
        let w = init_network(&cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = random_raw(&mut rng, &cfg.input_box);
        assert!(matches!(
            param_jacobian(&w, &raw, &[InputField::Strike]),
            Err(NetError::UnknownParameter(_))
        ));
        // the drawdown-only variant has no running minimum input
        let cfg2 = test_cfg(ModelVariant::Svsd, 1, 6);
        let w2 = init_network(&cfg2, 3);
        assert!(matches!(
            param_jacobian(&w2, &raw, &[InputField::RunMin]),
            Err(NetError::UnknownParameter(_))
        ));
    }

    #[test]
    fn zero_network_has_zero_jacobian() {
        let cfg = test_cfg(ModelVariant::Svsdu, 1, 6);
        let w = init_network(&cfg, 3).zeros_like();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = random_raw(&mut rng, &cfg.input_box);
        let jac = param_jacobian(&w, &raw, &[InputField::Var, InputField::Rho]).unwrap();
        assert_eq!(jac, vec![0.0, 0.0]);
    }

    /// Objective touching every output slot: sum over points of
    /// (p + p_t + p_x + p_y + p_z + p_v + p_xx + p_xv + p_vv)^2.
    fn slot_sum_objective(bundles: &[DerivBundle]) -> (f64, Vec<BundleAdjoint>) {
        let mut value = 0.0;
        let mut adj = Vec::with_capacity(bundles.len());
        for b in bundles {
            let s = b.p + b.p_t + b.p_x + b.p_y + b.p_z + b.p_v + b.p_xx + b.p_xv + b.p_vv;
            value += s * s;
            let g = 2.0 * s;
            adj.push(BundleAdjoint {
                p: g,
                p_t: g,
                p_x: g,
                p_y: g,
                p_z: g,
                p_v: g,
                p_xx: g,
                p_xv: g,
                p_vv: g,
            });
        }
        (value, adj)
    }

    fn objective_value(w: &NetworkWeights, points: &[RawInput]) -> f64 {
        let bundles: Vec<DerivBundle> =
            points.iter().map(|r| derivatives(w, r).unwrap()).collect();
        slot_sum_objective(&bundles).0
    }

    #[test]
    fn gradient_of_output_bias_is_one() {
        let cfg = test_cfg(ModelVariant::Svsdu, 2, 10);
        let w = init_network(&cfg, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let raw = random_raw(&mut rng, &cfg.input_box);
        let (_, grad) = weight_gradient(&w, &[raw], |bundles| {
            (bundles[0].p, vec![BundleAdjoint { p: 1.0, ..Default::default() }])
        })
        .unwrap();
        assert_abs_diff_eq!(grad.b_out, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn full_weight_gradient_matches_dense_fd_on_small_net() {
        let cfg = test_cfg(ModelVariant::Svsdu, 1, 3);
        let w = init_network(&cfg, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let points: Vec<RawInput> = (0..3).map(|_| random_raw(&mut rng, &cfg.input_box)).collect();
        let (_, grad) = weight_gradient(&w, &points, slot_sum_objective).unwrap();
        let eps = 1e-6;
        // every array entry
        let n_arrays = w.slices().len();
        for ai in 0..n_arrays {
            let len = w.slices()[ai].len();
            for i in (0..len).step_by(1 + len / 7) {
                let mut up = w.clone();
                up.slices_mut()[ai][i] += eps;
                let mut dn = w.clone();
                dn.slices_mut()[ai][i] -= eps;
                let fd = (objective_value(&up, &points) - objective_value(&dn, &points))
                    / (2.0 * eps);
                let got = grad.slices()[ai][i];
                assert!(
                    rel_close(got, fd, 1e-6, 1e-7),
                    "array {ai} entry {i}: {got} vs {fd}"
                );
            }
        }
        // output bias
        let mut up = w.clone();
        up.b_out += eps;
        let mut dn = w.clone();
        dn.b_out -= eps;
        let fd = (objective_value(&up, &points) - objective_value(&dn, &points)) / (2.0 * eps);
        assert!(rel_close(grad.b_out, fd, 1e-6, 1e-8));
    }

    #[test]
    fn directional_weight_gradient_matches_fd_on_batch() {
        let cfg = test_cfg(ModelVariant::Svsdu, 2, 9);
        let w = init_network(&cfg, 41);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let points: Vec<RawInput> =
            (0..10).map(|_| random_raw(&mut rng, &cfg.input_box)).collect();
        let (_, grad) = weight_gradient(&w, &points, slot_sum_objective).unwrap();
        // random direction
        let mut dir = w.zeros_like();
        for s in dir.slices_mut() {
            for x in s.iter_mut() {
                *x = rng.random_range(-1.0..1.0);
            }
        }
        dir.b_out = rng.random_range(-1.0..1.0);
        let dot: f64 = grad
            .slices()
            .iter()
            .zip(dir.slices().iter())
            .map(|(g, d)| g.iter().zip(d.iter()).map(|(a, b)| a * b).sum::<f64>())
            .sum::<f64>()
            + grad.b_out * dir.b_out;
        let eps = 1e-6;
        let mut up = w.clone();
        up.add_scaled(&dir, eps);
        let mut dn = w.clone();
        dn.add_scaled(&dir, -eps);
        let fd = (objective_value(&up, &points) - objective_value(&dn, &points)) / (2.0 * eps);
        assert!(
            rel_close(dot, fd, 1e-4, 1e-8),
            "directional derivative {dot} vs fd {fd}"
        );
    }

    #[test]
    fn weights_round_trip_through_container() {
        let cfg = test_cfg(ModelVariant::Svsd, 2, 7);
        let w = init_network(&cfg, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.json");
        w.save(&path).unwrap();
        let back = NetworkWeights::load(&path).unwrap();
        assert_eq!(w, back);
    }

    #[test]
    fn load_rejects_mismatched_shapes() {
        let cfg = test_cfg(ModelVariant::Svsd, 2, 7);
        let mut w = init_network(&cfg, 2);
        w.config.width = 9; // lie about the width
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.json");
        w.save(&path).unwrap();
        assert!(matches!(
            NetworkWeights::load(&path),
            Err(NetError::ShapeMismatch(_))
        ));
    }
}
