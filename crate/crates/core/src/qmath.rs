//! Dense complex linear algebra for registers of one to four qubits.
//!
//! Qubit ordering is little-endian throughout the crate: qubit 0 is the least
//! significant bit of a basis index, so `|q1 q0>` with `q0 = 1, q1 = 0` is
//! basis index 1. Tensor products place the left operand on the lower qubits.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;

pub const MAX_QUBITS: usize = 4;

const HERMITIAN_TOL: f64 = 1e-12;
const TRACE_TOL: f64 = 1e-12;
const POSITIVITY_TOL: f64 = 1e-10;
const CHANNEL_TOL: f64 = 1e-10;

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn r(re: f64) -> C64 {
    C64::new(re, 0.0)
}

fn qubits_for_dim(dim: usize) -> Result<usize> {
    if dim < 2 || !dim.is_power_of_two() {
        return Err(Error::InvalidState(format!("dimension {dim} is not a power of two")));
    }
    let n = dim.trailing_zeros() as usize;
    if n > MAX_QUBITS {
        return Err(Error::RegisterSize(n));
    }
    Ok(n)
}

/// Largest element modulus.
pub fn max_abs(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// `a ⊗ b` with `a` on the low qubits.
pub fn kron_le(a: &CMatrix, b: &CMatrix) -> CMatrix {
    b.kronecker(a)
}

/// Lifts an operator acting on `targets` (target `k` is bit `k` of the
/// operator's own index) to the full register.
pub fn embed(op: &CMatrix, targets: &[usize], n_qubits: usize) -> Result<CMatrix> {
    let k = targets.len();
    if op.nrows() != op.ncols() || op.nrows() != 1 << k {
        return Err(Error::DimensionMismatch {
            expected: 1 << k,
            got: op.nrows(),
        });
    }
    check_targets(targets, n_qubits)?;
    let dim = 1usize << n_qubits;
    let mask: usize = targets.iter().map(|&t| 1 << t).sum();
    let sub = |i: usize| -> usize {
        targets
            .iter()
            .enumerate()
            .map(|(b, &t)| ((i >> t) & 1) << b)
            .sum()
    };
    let mut out = CMatrix::zeros(dim, dim);
    for i in 0..dim {
        for j in 0..dim {
            if i & !mask == j & !mask {
                out[(i, j)] = op[(sub(i), sub(j))];
            }
        }
    }
    Ok(out)
}

fn check_targets(targets: &[usize], n_qubits: usize) -> Result<()> {
    for (i, &t) in targets.iter().enumerate() {
        if t >= n_qubits {
            return Err(Error::QubitOutOfRange { index: t, n_qubits });
        }
        if targets[..i].contains(&t) {
            return Err(Error::InvalidParameter {
                name: "targets".into(),
                reason: format!("qubit {t} listed twice"),
            });
        }
    }
    Ok(())
}

fn hermitian_eigenvalues(m: &CMatrix) -> Vec<f64> {
    let h = (m + m.adjoint()) * r(0.5);
    h.symmetric_eigenvalues().iter().copied().collect()
}

/// A normalized, Hermitian, positive semidefinite operator on 1–4 qubits.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    n_qubits: usize,
    mat: CMatrix,
}

impl DensityMatrix {
    pub fn from_matrix(mat: CMatrix) -> Result<Self> {
        if mat.nrows() != mat.ncols() {
            return Err(Error::DimensionMismatch {
                expected: mat.nrows(),
                got: mat.ncols(),
            });
        }
        let n_qubits = qubits_for_dim(mat.nrows())?;
        let rho = DensityMatrix { n_qubits, mat };
        rho.validate()?;
        Ok(rho)
    }

    /// Builds `|psi><psi|`; `psi` must be normalized to 1e-10.
    pub fn from_pure(psi: &[C64]) -> Result<Self> {
        let n_qubits = qubits_for_dim(psi.len())?;
        let norm: f64 = psi.iter().map(|a| a.norm_sqr()).sum();
        if (norm - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidState(format!("state vector norm² {norm}")));
        }
        let v = nalgebra::DVector::from_column_slice(psi);
        Ok(DensityMatrix {
            n_qubits,
            mat: &v * v.adjoint(),
        })
    }

    pub fn basis(n_qubits: usize, index: usize) -> Result<Self> {
        if n_qubits == 0 || n_qubits > MAX_QUBITS {
            return Err(Error::RegisterSize(n_qubits));
        }
        let dim = 1 << n_qubits;
        if index >= dim {
            return Err(Error::DimensionMismatch { expected: dim, got: index });
        }
        let mut mat = CMatrix::zeros(dim, dim);
        mat[(index, index)] = r(1.0);
        Ok(DensityMatrix { n_qubits, mat })
    }

    pub fn maximally_mixed(n_qubits: usize) -> Result<Self> {
        if n_qubits == 0 || n_qubits > MAX_QUBITS {
            return Err(Error::RegisterSize(n_qubits));
        }
        let dim = 1 << n_qubits;
        Ok(DensityMatrix {
            n_qubits,
            mat: CMatrix::identity(dim, dim) * r(1.0 / dim as f64),
        })
    }

    /// Convex combination `sum w_i rho_i`; weights must sum to one.
    pub fn mixture(parts: &[(f64, &DensityMatrix)]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidState("empty mixture".into()))?;
        let dim = first.1.dim();
        let mut mat = CMatrix::zeros(dim, dim);
        for (w, rho) in parts {
            if rho.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: rho.dim() });
            }
            if *w < 0.0 {
                return Err(Error::InvalidState("negative mixture weight".into()));
            }
            mat += &rho.mat * r(*w);
        }
        DensityMatrix::from_matrix(mat)
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn dim(&self) -> usize {
        1 << self.n_qubits
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.mat
    }

    pub fn trace(&self) -> f64 {
        self.mat.trace().re
    }

    pub fn purity(&self) -> f64 {
        (&self.mat * &self.mat).trace().re
    }

    pub fn element(&self, row: usize, col: usize) -> C64 {
        self.mat[(row, col)]
    }

    /// Population of basis state `index`.
    pub fn population(&self, index: usize) -> f64 {
        self.mat[(index, index)].re
    }

    pub fn tensor(&self, upper: &DensityMatrix) -> Result<Self> {
        let n = self.n_qubits + upper.n_qubits;
        if n > MAX_QUBITS {
            return Err(Error::RegisterSize(n));
        }
        Ok(DensityMatrix {
            n_qubits: n,
            mat: kron_le(&self.mat, &upper.mat),
        })
    }

    pub fn expectation(&self, op: &CMatrix) -> Result<C64> {
        if op.nrows() != self.dim() || op.ncols() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: op.nrows() });
        }
        Ok((&self.mat * op).trace())
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        hermitian_eigenvalues(&self.mat)
    }

    pub fn validate(&self) -> Result<()> {
        let dev = max_abs(&(&self.mat - self.mat.adjoint()));
        if dev > HERMITIAN_TOL {
            return Err(Error::InvalidState(format!("not Hermitian (deviation {dev:e})")));
        }
        let tr = self.mat.trace();
        if (tr.re - 1.0).abs() > TRACE_TOL || tr.im.abs() > TRACE_TOL {
            return Err(Error::InvalidState(format!("trace {tr}")));
        }
        let min = self.eigenvalues().into_iter().fold(f64::INFINITY, f64::min);
        if min < -POSITIVITY_TOL {
            return Err(Error::InvalidState(format!("negative eigenvalue {min:e}")));
        }
        Ok(())
    }

    /// Wraps a matrix produced by a trusted operation. Hermiticity is
    /// restored exactly; positivity and trace are checked in debug builds.
    fn from_op(n_qubits: usize, mat: CMatrix) -> Self {
        let mat = (&mat + mat.adjoint()) * r(0.5);
        let rho = DensityMatrix { n_qubits, mat };
        debug_assert!(rho.validate().is_ok(), "{:?}", rho.validate());
        rho
    }
}

/// A completely positive map given by Kraus operators.
#[derive(Debug, Clone)]
pub struct KrausChannel {
    ops: Vec<CMatrix>,
    n_qubits: usize,
    trace_preserving: bool,
}

impl KrausChannel {
    pub fn new(ops: Vec<CMatrix>) -> Result<Self> {
        let first = ops
            .first()
            .ok_or_else(|| Error::NonPhysicalChannel("no Kraus operators".into()))?;
        let dim = first.nrows();
        let n_qubits = qubits_for_dim(dim)
            .map_err(|_| Error::NonPhysicalChannel(format!("operator dimension {dim}")))?;
        for k in &ops {
            if k.nrows() != dim || k.ncols() != dim {
                return Err(Error::NonPhysicalChannel("operators of unequal dimension".into()));
            }
        }
        let sum = ops
            .iter()
            .fold(CMatrix::zeros(dim, dim), |acc, k| acc + k.adjoint() * k);
        let slack = CMatrix::identity(dim, dim) - &sum;
        let eig = hermitian_eigenvalues(&slack);
        let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
        if min < -CHANNEL_TOL {
            return Err(Error::NonPhysicalChannel(format!(
                "sum K†K exceeds identity by {:e}",
                -min
            )));
        }
        let trace_preserving = max_abs(&slack) <= CHANNEL_TOL;
        Ok(KrausChannel { ops, n_qubits, trace_preserving })
    }

    pub fn identity(n_qubits: usize) -> Result<Self> {
        if n_qubits == 0 || n_qubits > MAX_QUBITS {
            return Err(Error::RegisterSize(n_qubits));
        }
        let dim = 1 << n_qubits;
        KrausChannel::new(vec![CMatrix::identity(dim, dim)])
    }

    pub fn unitary(u: CMatrix) -> Result<Self> {
        let dim = u.nrows();
        let dev = max_abs(&(u.adjoint() * &u - CMatrix::identity(dim, dim)));
        if dev > HERMITIAN_TOL {
            return Err(Error::NonPhysicalChannel(format!("not unitary (deviation {dev:e})")));
        }
        KrausChannel::new(vec![u])
    }

    /// Single-qubit depolarizing channel `rho -> (1-p) rho + p I/2`.
    pub fn depolarizing(p: f64) -> Result<Self> {
        check_prob("p", p)?;
        let w0 = (1.0 - 0.75 * p).sqrt();
        let w = (p / 4.0).sqrt();
        KrausChannel::new(vec![
            pauli_i() * r(w0),
            pauli_x() * r(w),
            pauli_y() * r(w),
            pauli_z() * r(w),
        ])
    }

    pub fn bit_flip(p: f64) -> Result<Self> {
        check_prob("p", p)?;
        KrausChannel::new(vec![pauli_i() * r((1.0 - p).sqrt()), pauli_x() * r(p.sqrt())])
    }

    pub fn phase_flip(p: f64) -> Result<Self> {
        check_prob("p", p)?;
        KrausChannel::new(vec![pauli_i() * r((1.0 - p).sqrt()), pauli_z() * r(p.sqrt())])
    }

    pub fn amplitude_damping(gamma: f64) -> Result<Self> {
        check_prob("gamma", gamma)?;
        let k0 = mat2([[r(1.0), r(0.0)], [r(0.0), r((1.0 - gamma).sqrt())]]);
        let k1 = mat2([[r(0.0), r(gamma.sqrt())], [r(0.0), r(0.0)]]);
        KrausChannel::new(vec![k0, k1])
    }

    /// `self` followed by `next`, as a single channel on the same register.
    pub fn then(&self, next: &KrausChannel) -> Result<Self> {
        if self.n_qubits != next.n_qubits {
            return Err(Error::DimensionMismatch {
                expected: self.n_qubits,
                got: next.n_qubits,
            });
        }
        let ops = next
            .ops
            .iter()
            .flat_map(|b| self.ops.iter().map(move |a| b * a))
            .collect();
        KrausChannel::new(ops)
    }

    pub fn operators(&self) -> &[CMatrix] {
        &self.ops
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn is_trace_preserving(&self) -> bool {
        self.trace_preserving
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::param(name, format!("{p} is not a probability")));
    }
    Ok(())
}

fn apply_ops(rho: &DensityMatrix, ch: &KrausChannel, targets: &[usize]) -> Result<CMatrix> {
    if targets.len() != ch.n_qubits {
        return Err(Error::DimensionMismatch {
            expected: ch.n_qubits,
            got: targets.len(),
        });
    }
    let dim = rho.dim();
    let mut out = CMatrix::zeros(dim, dim);
    for k in &ch.ops {
        let full = embed(k, targets, rho.n_qubits)?;
        out += &full * &rho.mat * full.adjoint();
    }
    Ok(out)
}

/// `rho -> sum K rho K†` for a trace-preserving channel on `targets`.
pub fn apply_channel(rho: &DensityMatrix, ch: &KrausChannel, targets: &[usize]) -> Result<DensityMatrix> {
    if !ch.trace_preserving {
        return Err(Error::TraceDecreasing);
    }
    let out = apply_ops(rho, ch, targets)?;
    Ok(DensityMatrix::from_op(rho.n_qubits, out))
}

/// Applies a trace-decreasing instrument branch and renormalizes.
/// Returns the conditional state and the branch probability.
pub fn herald(rho: &DensityMatrix, ch: &KrausChannel, targets: &[usize]) -> Result<(DensityMatrix, f64)> {
    let out = apply_ops(rho, ch, targets)?;
    let p = out.trace().re;
    if p <= 1e-300 {
        return Err(Error::ZeroProbability);
    }
    Ok((DensityMatrix::from_op(rho.n_qubits, out * r(1.0 / p)), p))
}

/// Reduced state of the qubits in `keep`; `keep[k]` becomes qubit `k`.
pub fn partial_trace(rho: &DensityMatrix, keep: &[usize]) -> Result<DensityMatrix> {
    if keep.is_empty() {
        return Err(Error::InvalidParameter {
            name: "keep".into(),
            reason: "no qubits kept".into(),
        });
    }
    check_targets(keep, rho.n_qubits)?;
    let traced: Vec<usize> = (0..rho.n_qubits).filter(|q| !keep.contains(q)).collect();
    let kd = 1usize << keep.len();
    let td = 1usize << traced.len();
    let compose = |kept: usize, tr: usize| -> usize {
        let mut idx = 0;
        for (b, &q) in keep.iter().enumerate() {
            idx |= ((kept >> b) & 1) << q;
        }
        for (b, &q) in traced.iter().enumerate() {
            idx |= ((tr >> b) & 1) << q;
        }
        idx
    };
    let mut out = CMatrix::zeros(kd, kd);
    for i in 0..kd {
        for j in 0..kd {
            let mut acc = C64::new(0.0, 0.0);
            for t in 0..td {
                acc += rho.mat[(compose(i, t), compose(j, t))];
            }
            out[(i, j)] = acc;
        }
    }
    Ok(DensityMatrix::from_op(keep.len(), out))
}

/// `<psi| rho |psi>`.
pub fn fidelity_to_pure(rho: &DensityMatrix, psi: &[C64]) -> Result<f64> {
    if psi.len() != rho.dim() {
        return Err(Error::DimensionMismatch { expected: rho.dim(), got: psi.len() });
    }
    let norm: f64 = psi.iter().map(|a| a.norm_sqr()).sum();
    if (norm - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidState(format!("target norm² {norm}")));
    }
    let v = nalgebra::DVector::from_column_slice(psi);
    let f = (v.adjoint() * &rho.mat * &v)[(0, 0)].re;
    Ok(f.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Basis {
    Z,
    X,
}

/// One branch of a projective single-qubit measurement. Outcome 0 is `|0>`
/// (Z basis) or `|+>` (X basis).
#[derive(Debug, Clone)]
pub struct MeasurementOutcome {
    pub outcome: u8,
    pub probability: f64,
    pub state: DensityMatrix,
}

pub fn projector(basis: Basis, outcome: u8) -> CMatrix {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let v: [C64; 2] = match (basis, outcome) {
        (Basis::Z, 0) => [r(1.0), r(0.0)],
        (Basis::Z, _) => [r(0.0), r(1.0)],
        (Basis::X, 0) => [r(s), r(s)],
        (Basis::X, _) => [r(s), r(-s)],
    };
    let v = nalgebra::DVector::from_column_slice(&v);
    &v * v.adjoint()
}

/// Measures one qubit; zero-probability outcomes are omitted.
pub fn measure(rho: &DensityMatrix, qubit: usize, basis: Basis) -> Result<Vec<MeasurementOutcome>> {
    if qubit >= rho.n_qubits {
        return Err(Error::QubitOutOfRange { index: qubit, n_qubits: rho.n_qubits });
    }
    let mut out = Vec::with_capacity(2);
    for outcome in 0..2u8 {
        let p = embed(&projector(basis, outcome), &[qubit], rho.n_qubits)?;
        let m = &p * &rho.mat * &p;
        let prob = m.trace().re;
        if prob > 1e-14 {
            out.push(MeasurementOutcome {
                outcome,
                probability: prob,
                state: DensityMatrix::from_op(rho.n_qubits, m * r(1.0 / prob)),
            });
        }
    }
    Ok(out)
}

fn mat2(rows: [[C64; 2]; 2]) -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[rows[0][0], rows[0][1], rows[1][0], rows[1][1]])
}

pub fn pauli_i() -> CMatrix {
    CMatrix::identity(2, 2)
}

pub fn pauli_x() -> CMatrix {
    mat2([[r(0.0), r(1.0)], [r(1.0), r(0.0)]])
}

pub fn pauli_y() -> CMatrix {
    mat2([[r(0.0), c(0.0, -1.0)], [c(0.0, 1.0), r(0.0)]])
}

pub fn pauli_z() -> CMatrix {
    mat2([[r(1.0), r(0.0)], [r(0.0), r(-1.0)]])
}

/// Quantum gates used by the protocol circuits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateSpec {
    X(usize),
    Z(usize),
    H(usize),
    Rx(usize, f64),
    Ry(usize, f64),
    Cnot { control: usize, target: usize },
    Swap(usize, usize),
    /// X on `target` only while `control` is in `control_value`: a
    /// spin-selective π rotation.
    SelectiveX { control: usize, control_value: u8, target: usize },
}

impl GateSpec {
    pub fn targets(&self) -> Vec<usize> {
        match *self {
            GateSpec::X(q) | GateSpec::Z(q) | GateSpec::H(q) | GateSpec::Rx(q, _) | GateSpec::Ry(q, _) => {
                vec![q]
            }
            GateSpec::Cnot { control, target } => vec![control, target],
            GateSpec::Swap(a, b) => vec![a, b],
            GateSpec::SelectiveX { control, target, .. } => vec![control, target],
        }
    }

    /// Matrix on the gate's own targets, ordered as [`GateSpec::targets`].
    pub fn matrix(&self) -> CMatrix {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        match *self {
            GateSpec::X(_) => pauli_x(),
            GateSpec::Z(_) => pauli_z(),
            GateSpec::H(_) => mat2([[r(s), r(s)], [r(s), r(-s)]]),
            GateSpec::Rx(_, t) => {
                let (cs, sn) = ((t / 2.0).cos(), (t / 2.0).sin());
                mat2([[r(cs), c(0.0, -sn)], [c(0.0, -sn), r(cs)]])
            }
            GateSpec::Ry(_, t) => {
                let (cs, sn) = ((t / 2.0).cos(), (t / 2.0).sin());
                mat2([[r(cs), r(-sn)], [r(sn), r(cs)]])
            }
            GateSpec::Cnot { .. } => selective_x(1),
            GateSpec::SelectiveX { control_value, .. } => selective_x(control_value),
            GateSpec::Swap(..) => {
                let mut m = CMatrix::zeros(4, 4);
                m[(0, 0)] = r(1.0);
                m[(1, 2)] = r(1.0);
                m[(2, 1)] = r(1.0);
                m[(3, 3)] = r(1.0);
                m
            }
        }
    }

    pub fn channel(&self) -> KrausChannel {
        KrausChannel::unitary(self.matrix()).expect("gate matrices are unitary")
    }
}

// control is local bit 0, target local bit 1
fn selective_x(control_value: u8) -> CMatrix {
    let mut m = CMatrix::zeros(4, 4);
    for idx in 0..4usize {
        let ctrl = (idx & 1) as u8;
        let out = if ctrl == control_value { idx ^ 2 } else { idx };
        m[(out, idx)] = r(1.0);
    }
    m
}

pub fn apply_gate(rho: &DensityMatrix, gate: &GateSpec) -> Result<DensityMatrix> {
    apply_channel(rho, &gate.channel(), &gate.targets())
}

/// Bell states in little-endian ordering.
pub mod bell {
    use super::{r, C64};

    const S: f64 = std::f64::consts::FRAC_1_SQRT_2;

    pub fn phi_plus() -> Vec<C64> {
        vec![r(S), r(0.0), r(0.0), r(S)]
    }

    pub fn phi_minus() -> Vec<C64> {
        vec![r(S), r(0.0), r(0.0), r(-S)]
    }

    pub fn psi_plus() -> Vec<C64> {
        vec![r(0.0), r(S), r(S), r(0.0)]
    }

    pub fn psi_minus() -> Vec<C64> {
        vec![r(0.0), r(S), r(-S), r(0.0)]
    }
}
