//! Shot-by-shot simulation of the two-module apparatus.
//!
//! Each module holds a classical spin flag (bright = resonant with the
//! excitation laser). Photons are generated per `OpticalExcite`, attenuated
//! by the module's loss chain, interfered at a 50:50 beamsplitter and
//! detected by two threshold detectors D1 and D2 behind it.

use std::io::{BufRead, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::emitter::{EmitterParams, InterferenceFactor};
use crate::error::{Error, Result};

pub const HOM_DELAY_NS: f64 = 500.0;
pub const EARLY_LATE_SEPARATION_NS: f64 = 1910.0;
pub const DEFAULT_DEAD_TIME_NS: f64 = 30.0;
pub const DEFAULT_GATE_NS: f64 = 130.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossElement {
    pub label: String,
    /// Stored as a non-positive number, e.g. −3 for a 3 dB loss.
    pub loss_db: f64,
}

/// Optical chain of one module up to and including its detectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpticalPath {
    pub elements: Vec<LossElement>,
    /// Per-pulse excitation probability in dB. A probability, not a
    /// transmission.
    pub excitation_db: f64,
    pub detector_efficiency: f64,
    /// Whether `detector_efficiency` multiplies the dB chain in addition to
    /// any detector-related loss element.
    pub stack_detector_efficiency: bool,
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

impl OpticalPath {
    pub fn lossless() -> Self {
        OpticalPath {
            elements: Vec::new(),
            excitation_db: 0.0,
            detector_efficiency: 1.0,
            stack_detector_efficiency: true,
        }
    }

    /// The measured chain shared by both modules.
    pub fn measured() -> Self {
        let el = |label: &str, loss_db: f64| LossElement { label: label.into(), loss_db };
        OpticalPath {
            elements: vec![
                el("detector_loss", -1.97),
                el("symmetric_cavity_loss", -3.0),
                el("path_loss", -7.0),
                el("quantum_efficiency_loss", -0.46),
            ],
            excitation_db: -14.9,
            detector_efficiency: 0.9,
            stack_detector_efficiency: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.elements {
            if !(e.loss_db <= 0.0) || !e.loss_db.is_finite() {
                return Err(Error::param(
                    &e.label,
                    format!("loss {} dB must be stored as a finite non-positive number", e.loss_db),
                ));
            }
        }
        if !(self.excitation_db <= 0.0) || !self.excitation_db.is_finite() {
            return Err(Error::param("excitation_db", "must be finite and non-positive"));
        }
        if !(self.detector_efficiency > 0.0 && self.detector_efficiency <= 1.0) {
            return Err(Error::param("detector_efficiency", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Probability that an emitted photon produces a detector click.
    pub fn transmission(&self) -> f64 {
        let chain: f64 = self.elements.iter().map(|e| db_to_linear(e.loss_db)).product();
        if self.stack_detector_efficiency {
            chain * self.detector_efficiency
        } else {
            chain
        }
    }

    pub fn excitation_probability(&self) -> f64 {
        db_to_linear(self.excitation_db)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub dark_rate_hz: f64,
    pub dead_time_ns: f64,
    /// Fixed delay added to every photon arrival (fibre latency).
    pub latency_ns: f64,
}

impl Default for DetectorModel {
    fn default() -> Self {
        DetectorModel { dark_rate_hz: 10.0, dead_time_ns: DEFAULT_DEAD_TIME_NS, latency_ns: 0.0 }
    }
}

impl DetectorModel {
    pub fn ideal() -> Self {
        DetectorModel { dark_rate_hz: 0.0, dead_time_ns: 0.0, latency_ns: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dark_rate_hz >= 0.0) || !(self.dead_time_ns >= 0.0) || !(self.latency_ns >= 0.0) {
            return Err(Error::param("detectors", "rates and times must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Detector {
    D1,
    D2,
}

impl Detector {
    pub fn id(self) -> u8 {
        match self {
            Detector::D1 => 1,
            Detector::D2 => 2,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(Detector::D1),
            2 => Ok(Detector::D2),
            _ => Err(Error::Format(format!("unknown detector id {id}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    A,
    B,
    /// Elements acting on the shared detectors.
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ElementKind {
    OpticalPump,
    OpticalExcite,
    MwPulse { angle_rad: f64, selective: bool },
    RfPulse { angle_rad: f64 },
    DetectGate,
    Delay,
    Readout,
}

impl ElementKind {
    fn channel(&self) -> u8 {
        match self {
            ElementKind::OpticalPump | ElementKind::OpticalExcite | ElementKind::Readout => 0,
            ElementKind::MwPulse { .. } => 1,
            ElementKind::RfPulse { .. } => 2,
            ElementKind::DetectGate => 3,
            ElementKind::Delay => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeqElement {
    pub kind: ElementKind,
    pub start_ns: f64,
    pub duration_ns: f64,
    pub target: Target,
}

impl SeqElement {
    pub fn end_ns(&self) -> f64 {
        self.start_ns + self.duration_ns
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseSequence {
    pub elements: Vec<SeqElement>,
    /// Time between shot starts.
    pub period_ns: f64,
}

impl PulseSequence {
    pub fn validate(&self) -> Result<()> {
        if !(self.period_ns > 0.0) {
            return Err(Error::InvalidSequence("period must be positive".into()));
        }
        for (i, e) in self.elements.iter().enumerate() {
            if !(e.start_ns >= 0.0) || !(e.duration_ns >= 0.0) {
                return Err(Error::InvalidSequence(format!("element {i} has a negative time")));
            }
            if e.end_ns() > self.period_ns {
                return Err(Error::InvalidSequence(format!("element {i} ends after the period")));
            }
            let shared = e.kind == ElementKind::DetectGate;
            if shared != (e.target == Target::Shared) {
                return Err(Error::InvalidSequence(format!(
                    "element {i}: only detection gates act on the shared detectors"
                )));
            }
            for (j, f) in self.elements[..i].iter().enumerate() {
                if e.target == f.target
                    && e.kind.channel() == f.kind.channel()
                    && e.start_ns < f.end_ns()
                    && f.start_ns < e.end_ns()
                {
                    return Err(Error::InvalidSequence(format!("elements {j} and {i} overlap")));
                }
            }
        }
        Ok(())
    }

    pub fn gates(&self) -> Vec<(f64, f64)> {
        let mut g: Vec<(f64, f64)> = self
            .elements
            .iter()
            .filter(|e| e.kind == ElementKind::DetectGate)
            .map(|e| (e.start_ns, e.end_ns()))
            .collect();
        g.sort_by(|a, b| a.0.total_cmp(&b.0));
        g
    }

    pub fn excitations(&self, target: Target) -> Vec<f64> {
        self.elements
            .iter()
            .filter(|e| e.kind == ElementKind::OpticalExcite && e.target == target)
            .map(|e| e.start_ns)
            .collect()
    }

    fn period_ps(&self) -> u64 {
        (self.period_ns * 1000.0).round() as u64
    }
}

const PUMP_NS: f64 = 1000.0;
const PI_NS: f64 = 50.0;
const EXCITE_NS: f64 = 10.0;

fn el(kind: ElementKind, start_ns: f64, duration_ns: f64, target: Target) -> SeqElement {
    SeqElement { kind, start_ns, duration_ns, target }
}

/// HOM sequence: pump both spins dark, flip them bright with a π pulse,
/// excite. The distinguishable variant delays module B's excitation.
pub fn build_hom_sequence(indistinguishable: bool) -> PulseSequence {
    use ElementKind::*;
    let pi = MwPulse { angle_rad: std::f64::consts::PI, selective: false };
    let t0 = PUMP_NS + PI_NS + 50.0;
    let tb = if indistinguishable { t0 } else { t0 + HOM_DELAY_NS };
    let mut elements = vec![
        el(OpticalPump, 0.0, PUMP_NS, Target::A),
        el(OpticalPump, 0.0, PUMP_NS, Target::B),
        el(pi, PUMP_NS, PI_NS, Target::A),
        el(pi, PUMP_NS, PI_NS, Target::B),
        el(OpticalExcite, t0, EXCITE_NS, Target::A),
        el(OpticalExcite, tb, EXCITE_NS, Target::B),
        el(DetectGate, t0, DEFAULT_GATE_NS, Target::Shared),
    ];
    if !indistinguishable {
        elements.push(el(DetectGate, tb, DEFAULT_GATE_NS, Target::Shared));
    }
    PulseSequence { elements, period_ns: 2000.0 }
}

/// Barrett-Kok sequence at the given repetition rate. `basis_pulse` adds a
/// final MW rotation on both modules before readout.
pub fn build_bk_sequence(repetition_rate_hz: f64, basis_pulse: Option<f64>) -> Result<PulseSequence> {
    use ElementKind::*;
    if !(repetition_rate_hz > 0.0) {
        return Err(Error::param("repetition_rate_hz", "must be positive"));
    }
    let pi = MwPulse { angle_rad: std::f64::consts::PI, selective: false };
    let half = MwPulse { angle_rad: std::f64::consts::FRAC_PI_2, selective: false };
    let prep = PUMP_NS;
    let early = prep + PI_NS + 50.0;
    let late = early + EARLY_LATE_SEPARATION_NS;
    let flip = early + 0.5 * EARLY_LATE_SEPARATION_NS;
    let mut elements = Vec::new();
    for t in [Target::A, Target::B] {
        elements.push(el(OpticalPump, 0.0, PUMP_NS, t));
        elements.push(el(half, prep, PI_NS / 2.0, t));
        elements.push(el(OpticalExcite, early, EXCITE_NS, t));
        elements.push(el(pi, flip, PI_NS, t));
        elements.push(el(OpticalExcite, late, EXCITE_NS, t));
    }
    elements.push(el(DetectGate, early, DEFAULT_GATE_NS, Target::Shared));
    elements.push(el(DetectGate, late, DEFAULT_GATE_NS, Target::Shared));
    let mut end = late + DEFAULT_GATE_NS + 20.0;
    for t in [Target::A, Target::B] {
        if let Some(angle) = basis_pulse {
            elements.push(el(MwPulse { angle_rad: angle, selective: false }, end, PI_NS, t));
        }
    }
    if basis_pulse.is_some() {
        end += PI_NS + 10.0;
    }
    for t in [Target::A, Target::B] {
        elements.push(el(Readout, end, 1000.0, t));
    }
    let period_ns = 1e9 / repetition_rate_hz;
    let seq = PulseSequence { elements, period_ns };
    seq.validate()?;
    Ok(seq)
}

/// Herald predicate: at least one click in the early gate and at least one
/// in the late gate.
pub fn bk_herald(shot_clicks: &[ClickRecord], early: (f64, f64), late: (f64, f64), shot_start_ns: f64) -> bool {
    let inside = |g: (f64, f64)| {
        shot_clicks.iter().any(|c| {
            let t = c.timestamp_ns() - shot_start_ns;
            t >= g.0 && t <= g.1
        })
    };
    inside(early) && inside(late)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickRecord {
    pub shot: u32,
    pub detector: Detector,
    pub timestamp_ps: u64,
}

impl ClickRecord {
    pub fn timestamp_ns(&self) -> f64 {
        self.timestamp_ps as f64 * 1e-3
    }
}

/// Clicks ordered by shot, then time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagStream {
    pub shots: u32,
    pub period_ps: u64,
    pub records: Vec<ClickRecord>,
}

const BINARY_RECORD: usize = 13;

impl TagStream {
    pub fn shot_start_ns(&self, shot: u32) -> f64 {
        (shot as u64 * self.period_ps) as f64 * 1e-3
    }

    /// Records grouped by shot, in order.
    pub fn by_shot(&self) -> impl Iterator<Item = &[ClickRecord]> {
        self.records.chunk_by(|a, b| a.shot == b.shot)
    }

    pub fn count(&self, det: Detector) -> usize {
        self.records.iter().filter(|r| r.detector == det).count()
    }

    /// `shot,detector,timestamp_ns` with detectors written as 1 or 2 and
    /// times as exact decimal ns (three fractional digits).
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "shot,detector,timestamp_ns")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{}.{:03}",
                r.shot,
                r.detector.id(),
                r.timestamp_ps / 1000,
                r.timestamp_ps % 1000
            )?;
        }
        Ok(())
    }

    /// Reads the CSV layout; `shots` and `period_ps` are not stored there
    /// and must be supplied.
    pub fn read_csv<R: BufRead>(r: R, shots: u32, period_ps: u64) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty tag file".into()))?
            .map_err(|e| Error::Format(e.to_string()))?;
        if header.trim() != "shot,detector,timestamp_ns" {
            return Err(Error::Format(format!("unexpected header `{header}`")));
        }
        let mut records = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::Format(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("line {}: `{line}`", n + 2));
            let mut it = line.split(',');
            let shot: u32 = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let det: u8 = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let ts = it.next().ok_or_else(bad)?;
            let (whole, frac) = ts.split_once('.').unwrap_or((ts, "0"));
            if frac.len() > 3 || it.next().is_some() {
                return Err(bad());
            }
            let whole: u64 = whole.parse().map_err(|_| bad())?;
            let frac: u64 = format!("{frac:0<3}").parse().map_err(|_| bad())?;
            records.push(ClickRecord {
                shot,
                detector: Detector::from_id(det)?,
                timestamp_ps: whole * 1000 + frac,
            });
        }
        Ok(TagStream { shots, period_ps, records })
    }

    /// Little-endian records of u32 shot, u8 detector, u64 timestamp in ps,
    /// 13 bytes each, no header.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.records {
            let mut buf = [0u8; BINARY_RECORD];
            buf[..4].copy_from_slice(&r.shot.to_le_bytes());
            buf[4] = r.detector.id();
            buf[5..].copy_from_slice(&r.timestamp_ps.to_le_bytes());
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R, shots: u32, period_ps: u64) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::Format(e.to_string()))?;
        if bytes.len() % BINARY_RECORD != 0 {
            return Err(Error::Format(format!("{} bytes is not a whole number of records", bytes.len())));
        }
        let records = bytes
            .chunks_exact(BINARY_RECORD)
            .map(|b| {
                Ok(ClickRecord {
                    shot: u32::from_le_bytes(b[..4].try_into().unwrap()),
                    detector: Detector::from_id(b[4])?,
                    timestamp_ps: u64::from_le_bytes(b[5..].try_into().unwrap()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TagStream { shots, period_ps, records })
    }
}

/// Everything the simulator needs besides the sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Apparatus {
    pub emitters: [EmitterParams; 2],
    pub paths: [OpticalPath; 2],
    pub detectors: Option<DetectorModel>,
    /// Probability that optical pumping leaves the spin dark.
    pub init_fidelity: f64,
}

impl Apparatus {
    pub fn lossless(emitters: [EmitterParams; 2]) -> Self {
        Apparatus {
            emitters,
            paths: [OpticalPath::lossless(), OpticalPath::lossless()],
            detectors: Some(DetectorModel::ideal()),
            init_fidelity: 1.0,
        }
    }

    pub fn measured() -> Self {
        Apparatus {
            emitters: [EmitterParams::tc1(), EmitterParams::tc2()],
            paths: [OpticalPath::measured(), OpticalPath::measured()],
            detectors: Some(DetectorModel::default()),
            init_fidelity: 0.983,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.emitters {
            e.validate()?;
        }
        for p in &self.paths {
            p.validate()?;
        }
        if let Some(d) = &self.detectors {
            d.validate()?;
        }
        if !(0.0..=1.0).contains(&self.init_fidelity) {
            return Err(Error::param("init_fidelity", "must be a probability"));
        }
        Ok(())
    }

    /// Probability that one excitation pulse on a bright spin yields a
    /// click from the main emission.
    pub fn detection_probability(&self, module: usize) -> f64 {
        let e = &self.emitters[module];
        let p = &self.paths[module];
        p.excitation_probability() * (1.0 - e.br_radiative - e.br_nonradiative) * p.transmission()
    }
}

// Separate random streams per purpose keep losses coupled across
// configurations that differ only in transmission.
const STREAM_EMIT: u128 = 0;
const STREAM_LOSS: u128 = 1 << 40;
const STREAM_ROUTE: u128 = 2 << 40;
const STREAM_DARK: u128 = 3 << 40;

fn shot_rng(seed: u64, shot: u32, purpose: u128) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(shot as u64);
    rng.set_word_pos(purpose);
    rng
}

#[derive(Debug, Clone, Copy)]
struct Photon {
    module: usize,
    t_ns: f64,
    extra: bool,
    excite_ns: f64,
    freq_mhz: f64,
}

struct Ctx<'a> {
    seq: &'a PulseSequence,
    app: &'a Apparatus,
    det: DetectorModel,
    gates: Vec<(f64, f64)>,
    order: Vec<usize>,
    interference: InterferenceFactor,
    extra_q: [f64; 2],
    pair_span: f64,
}

impl<'a> Ctx<'a> {
    fn new(seq: &'a PulseSequence, app: &'a Apparatus) -> Result<Self> {
        seq.validate()?;
        app.validate()?;
        let gates = seq.gates();
        let det = match (&app.detectors, gates.is_empty()) {
            (Some(d), _) => d.clone(),
            (None, false) => {
                return Err(Error::InvalidSequence("detection gate without a detector model".into()));
            }
            (None, true) => DetectorModel::ideal(),
        };
        let mut order: Vec<usize> = (0..seq.elements.len()).collect();
        order.sort_by(|&a, &b| seq.elements[a].start_ns.total_cmp(&seq.elements[b].start_ns));
        let [e1, e2] = &app.emitters;
        let life = e1.lifetime_ns.max(e2.lifetime_ns);
        Ok(Ctx {
            seq,
            app,
            det,
            gates,
            order,
            interference: InterferenceFactor::new(e1, e2),
            extra_q: [e1.extra_photon_probability(), e2.extra_photon_probability()],
            pair_span: 40.0 * life,
        })
    }

    fn shot(&self, seed: u64, shot: u32, out: &mut Vec<ClickRecord>) {
        let mut emit = shot_rng(seed, shot, STREAM_EMIT);
        let mut loss = shot_rng(seed, shot, STREAM_LOSS);
        let mut route = shot_rng(seed, shot, STREAM_ROUTE);
        let mut dark = shot_rng(seed, shot, STREAM_DARK);

        let mut bright = [false; 2];
        let mut freq = [0.0; 2];
        let mut in_band = [true; 2];
        for m in 0..2 {
            let e = &self.app.emitters[m];
            let f = if e.diffusion_sigma_mhz > 0.0 {
                Normal::new(0.0, e.diffusion_sigma_mhz).unwrap().sample(&mut emit)
            } else {
                0.0
            };
            freq[m] = e.mean_detuning_mhz + f;
            if let Some(bw) = e.excitation_bandwidth_mhz {
                in_band[m] = f.abs() <= bw / 2.0;
            }
        }

        let mut photons: Vec<Photon> = Vec::new();
        for &i in &self.order {
            let e = &self.seq.elements[i];
            let m = match e.target {
                Target::A => 0,
                Target::B => 1,
                Target::Shared => continue,
            };
            let em = &self.app.emitters[m];
            match e.kind {
                ElementKind::OpticalPump => {
                    bright[m] = emit.random::<f64>() >= self.app.init_fidelity;
                }
                ElementKind::MwPulse { angle_rad, .. } => {
                    let p_flip = (angle_rad / 2.0).sin().powi(2);
                    if emit.random::<f64>() < p_flip {
                        bright[m] = !bright[m];
                    }
                }
                ElementKind::OpticalExcite => {
                    // fixed draw count keeps the emission stream aligned
                    let u_exc: f64 = emit.random();
                    let u_extra: f64 = emit.random();
                    let u_branch: f64 = emit.random();
                    let delay = Exp::new(em.gamma()).unwrap().sample(&mut emit);
                    let excited = bright[m] && in_band[m] && u_exc < self.app.paths[m].excitation_probability();
                    if !excited {
                        continue;
                    }
                    if u_extra < self.extra_q[m] {
                        photons.push(Photon {
                            module: m,
                            t_ns: e.start_ns + em.desync_ns,
                            extra: true,
                            excite_ns: e.start_ns,
                            freq_mhz: freq[m],
                        });
                    }
                    if u_branch < em.br_radiative + em.br_nonradiative {
                        bright[m] = false;
                    } else {
                        photons.push(Photon {
                            module: m,
                            t_ns: e.start_ns + em.desync_ns + delay,
                            extra: false,
                            excite_ns: e.start_ns,
                            freq_mhz: freq[m],
                        });
                    }
                }
                ElementKind::RfPulse { .. } | ElementKind::DetectGate | ElementKind::Delay | ElementKind::Readout => {}
            }
        }

        let photons: Vec<Photon> = photons
            .into_iter()
            .filter(|p| loss.random::<f64>() < self.app.paths[p.module].transmission())
            .collect();

        let mut hits: Vec<(Detector, f64)> = Vec::with_capacity(photons.len() + 2);
        let coin = |r: &mut ChaCha8Rng| if r.random::<bool>() { Detector::D1 } else { Detector::D2 };
        let mut used = vec![false; photons.len()];
        for i in 0..photons.len() {
            if used[i] {
                continue;
            }
            used[i] = true;
            let a = photons[i];
            let partner = (!a.extra)
                .then(|| {
                    (i + 1..photons.len()).find(|&j| {
                        let b = photons[j];
                        !used[j] && !b.extra && b.module != a.module && (b.excite_ns - a.excite_ns).abs() < self.pair_span
                    })
                })
                .flatten();
            match partner {
                None => hits.push((coin(&mut route), a.t_ns)),
                Some(j) => {
                    used[j] = true;
                    let b = photons[j];
                    let (p1, p2) = if a.module == 0 { (a, b) } else { (b, a) };
                    let q = self.bunching_weight(&p1, &p2);
                    let u: f64 = route.random();
                    let d = coin(&mut route);
                    let other = if d == Detector::D1 { Detector::D2 } else { Detector::D1 };
                    if u < 0.5 * (1.0 - q) {
                        hits.push((d, p1.t_ns));
                        hits.push((other, p2.t_ns));
                    } else {
                        hits.push((d, p1.t_ns));
                        hits.push((d, p2.t_ns));
                    }
                }
            }
        }

        let mut clicks: Vec<(Detector, f64)> = hits
            .into_iter()
            .map(|(d, t)| (d, t + self.det.latency_ns))
            .filter(|&(_, t)| self.gates.iter().any(|g| t >= g.0 && t <= g.1))
            .collect();
        if self.det.dark_rate_hz > 0.0 {
            for &(g0, g1) in &self.gates {
                for d in [Detector::D1, Detector::D2] {
                    let mean = self.det.dark_rate_hz * (g1 - g0) * 1e-9;
                    let n = Poisson::new(mean).unwrap().sample(&mut dark) as u64;
                    for _ in 0..n {
                        clicks.push((d, g0 + (g1 - g0) * dark.random::<f64>()));
                    }
                }
            }
        }

        clicks.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let base = shot as u64 * self.seq.period_ps();
        let mut last: [Option<f64>; 2] = [None, None];
        let start = out.len();
        for (d, t) in clicks {
            let k = (d.id() - 1) as usize;
            if let Some(prev) = last[k] {
                if t - prev < self.det.dead_time_ns {
                    continue;
                }
            }
            last[k] = Some(t);
            out.push(ClickRecord {
                shot,
                detector: d,
                timestamp_ps: base + (t * 1000.0).round().max(0.0) as u64,
            });
        }
        out[start..].sort_by_key(|r| (r.timestamp_ps, r.detector));
    }

    // q(x, y) = ½ Re c / S for one pair of main photons.
    fn bunching_weight(&self, p1: &Photon, p2: &Photon) -> f64 {
        let [e1, e2] = &self.app.emitters;
        let env = |e: &EmitterParams, start: f64, t: f64| e.envelope(t - start);
        let (x, y) = (p1.t_ns, p2.t_ns);
        let p1x = env(e1, p1.excite_ns, x);
        let p1y = env(e1, p1.excite_ns, y);
        let p2x = env(e2, p2.excite_ns, x);
        let p2y = env(e2, p2.excite_ns, y);
        let s = 0.25 * (p1x * p2y + p1y * p2x);
        if s <= 0.0 {
            return 0.0;
        }
        let c = self.interference.eval_fixed(y - x, p1.freq_mhz, p2.freq_mhz) * (p1x * p2x * p1y * p2y).sqrt();
        (0.5 * c / s).clamp(-1.0, 1.0)
    }
}

/// Simulates `shots` repetitions of `seq`. Shot `i` depends only on
/// `(seed, i)`, so the stream is identical for any worker count.
pub fn run_sequence(seq: &PulseSequence, app: &Apparatus, shots: u32, seed: u64) -> Result<TagStream> {
    run_sequence_with_workers(seq, app, shots, seed, 0)
}

/// As [`run_sequence`] on a dedicated pool of `workers` threads (0 uses the
/// global pool).
pub fn run_sequence_with_workers(
    seq: &PulseSequence,
    app: &Apparatus,
    shots: u32,
    seed: u64,
    workers: usize,
) -> Result<TagStream> {
    if shots == 0 {
        return Err(Error::param("shots", "must be at least 1"));
    }
    let ctx = Ctx::new(seq, app)?;
    const CHUNK: u32 = 4096;
    let chunks: Vec<u32> = (0..shots.div_ceil(CHUNK)).collect();
    let work = || -> Vec<Vec<ClickRecord>> {
        chunks
            .par_iter()
            .map(|&c| {
                let mut out = Vec::new();
                let end = ((c as u64 + 1) * CHUNK as u64).min(shots as u64) as u32;
                for s in c * CHUNK..end {
                    ctx.shot(seed, s, &mut out);
                }
                out
            })
            .collect()
    };
    let parts = if workers == 0 {
        work()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::param("workers", e.to_string()))?
            .install(work)
    };
    Ok(TagStream {
        shots,
        period_ps: seq.period_ps(),
        records: parts.concat(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_excite(indist: bool) -> PulseSequence {
        let mut s = build_hom_sequence(indist);
        s.elements.retain(|e| !(e.kind == ElementKind::OpticalExcite && e.target == Target::B));
        s
    }

    #[test]
    fn lossless_single_excitation_clicks_every_shot() {
        let app = Apparatus::lossless([EmitterParams::ideal(65.0), EmitterParams::ideal(65.0)]);
        let mut seq = single_excite(true);
        // a long gate so no emission falls outside it
        for e in seq.elements.iter_mut().filter(|e| e.kind == ElementKind::DetectGate) {
            e.duration_ns = 1800.0;
        }
        seq.period_ns = 4000.0;
        let s = run_sequence(&seq, &app, 1000, 7).unwrap();
        assert_eq!(s.records.len(), 1000);
    }

    #[test]
    fn hom_sequence_timing() {
        let exc = |s: &PulseSequence, t| s.excitations(t)[0];
        let i = build_hom_sequence(true);
        assert_eq!(exc(&i, Target::A), exc(&i, Target::B));
        let d = build_hom_sequence(false);
        assert_eq!(exc(&d, Target::B) - exc(&d, Target::A), 500.0);
        assert!(i.validate().is_ok() && d.validate().is_ok());
    }

    #[test]
    fn bk_sequence_timing() {
        let s = build_bk_sequence(11_800.0, None).unwrap();
        let g = s.gates();
        assert_eq!(g.len(), 2);
        assert_eq!(g[1].0 - g[0].0, 1910.0);
    }

    #[test]
    fn herald_needs_both_rounds() {
        let c = |t_ps| ClickRecord { shot: 0, detector: Detector::D1, timestamp_ps: t_ps };
        let early = (100.0, 230.0);
        let late = (2010.0, 2140.0);
        assert!(!bk_herald(&[c(150_000)], early, late, 0.0));
        assert!(bk_herald(&[c(150_000), c(2_050_000)], early, late, 0.0));
    }

    #[test]
    fn sequence_validation() {
        let mut s = build_hom_sequence(true);
        s.elements.push(el(ElementKind::OpticalPump, 500.0, 10.0, Target::A));
        assert!(matches!(s.validate(), Err(Error::InvalidSequence(_))));
        let mut s = build_hom_sequence(true);
        s.elements[0].start_ns = -1.0;
        assert!(s.validate().is_err());
        let app = Apparatus { detectors: None, ..Apparatus::measured() };
        assert!(matches!(
            run_sequence(&build_hom_sequence(true), &app, 10, 1),
            Err(Error::InvalidSequence(_))
        ));
    }

    #[test]
    fn loss_chain_product() {
        let p = OpticalPath::measured();
        let db: f64 = -1.97 - 3.0 - 7.0 - 0.46;
        assert!((p.transmission() - 10f64.powf(db / 10.0) * 0.9).abs() < 1e-15);
        let bad = OpticalPath {
            elements: vec![LossElement { label: "x".into(), loss_db: 3.0 }],
            ..OpticalPath::lossless()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn csv_and_binary_round_trip() {
        let app = Apparatus::lossless([EmitterParams::tc1(), EmitterParams::tc2()]);
        let s = run_sequence(&build_hom_sequence(true), &app, 200, 3).unwrap();
        let mut csv = Vec::new();
        s.write_csv(&mut csv).unwrap();
        let back = TagStream::read_csv(csv.as_slice(), s.shots, s.period_ps).unwrap();
        assert_eq!(back, s);
        let mut bin = Vec::new();
        s.write_binary(&mut bin).unwrap();
        assert_eq!(bin.len(), 13 * s.records.len());
        assert_eq!(TagStream::read_binary(bin.as_slice(), s.shots, s.period_ps).unwrap(), s);
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let app = Apparatus::measured();
        let seq = build_hom_sequence(false);
        let a = run_sequence_with_workers(&seq, &Apparatus::lossless(app.emitters.clone()), 9000, 11, 1).unwrap();
        let b = run_sequence_with_workers(&seq, &Apparatus::lossless(app.emitters.clone()), 9000, 11, 4).unwrap();
        assert_eq!(a, b);
    }
}
