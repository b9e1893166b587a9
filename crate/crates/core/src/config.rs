//! Run configuration in TOML. Keys follow the measured-parameter table in
//! snake_case; unknown keys are rejected. Omitted sections take the shipped
//! defaults.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::analysis::{SpinCurve, SsroModel};
use crate::emitter::{EmitterParams, FWHM_PER_SIGMA};
use crate::error::Error;
use crate::forecast::{EfficiencyBudget, ProjectionParams, StepBudget};
use crate::harness::{Apparatus, DetectorModel, LossElement, OpticalPath, EARLY_LATE_SEPARATION_NS};
use crate::protocol::{BkModelParams, GateErrorModel, TcnotMode, VisibilityProfile};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Hom,
    Bk,
    Tcnot,
    Spin,
    Ssro,
    Forecast,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Hom => "hom",
            Experiment::Bk => "bk",
            Experiment::Tcnot => "tcnot",
            Experiment::Spin => "spin",
            Experiment::Ssro => "ssro",
            Experiment::Forecast => "forecast",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Experiment::Hom,
            Experiment::Bk,
            Experiment::Tcnot,
            Experiment::Spin,
            Experiment::Ssro,
            Experiment::Forecast,
        ]
        .into_iter()
        .find(|e| e.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmitterSection {
    pub purcell_enhanced_lifetime_ns: f64,
    pub fast_spectral_diffusion_mhz: f64,
    /// FWHM of the slow spectral diffusion.
    pub excitation_bandwidth_mhz: f64,
    /// Drop diffusion offsets outside the excitation bandwidth.
    pub truncate_to_excitation_bandwidth: bool,
    pub mean_detuning_mhz: f64,
    pub polarisation_mismatch_deg: f64,
    pub photon_arrival_time_desynchronisation_ns: f64,
    pub g2_0: f64,
    pub double_excitation_probability: f64,
    pub radiative_branching_ratio: f64,
    pub non_radiative_branching_ratio: f64,
}

impl EmitterSection {
    pub fn from_params(p: &EmitterParams) -> Self {
        EmitterSection {
            purcell_enhanced_lifetime_ns: p.lifetime_ns,
            fast_spectral_diffusion_mhz: p.pure_dephasing_mhz,
            excitation_bandwidth_mhz: p.diffusion_sigma_mhz * FWHM_PER_SIGMA,
            truncate_to_excitation_bandwidth: p.excitation_bandwidth_mhz.is_some(),
            mean_detuning_mhz: p.mean_detuning_mhz,
            polarisation_mismatch_deg: p.polarization_mismatch_deg,
            photon_arrival_time_desynchronisation_ns: p.desync_ns,
            g2_0: p.g2_0,
            double_excitation_probability: p.p_double,
            radiative_branching_ratio: p.br_radiative,
            non_radiative_branching_ratio: p.br_nonradiative,
        }
    }

    pub fn params(&self) -> EmitterParams {
        EmitterParams {
            lifetime_ns: self.purcell_enhanced_lifetime_ns,
            pure_dephasing_mhz: self.fast_spectral_diffusion_mhz,
            diffusion_sigma_mhz: self.excitation_bandwidth_mhz / FWHM_PER_SIGMA,
            mean_detuning_mhz: self.mean_detuning_mhz,
            polarization_mismatch_deg: self.polarisation_mismatch_deg,
            g2_0: self.g2_0,
            p_double: self.double_excitation_probability,
            br_radiative: self.radiative_branching_ratio,
            br_nonradiative: self.non_radiative_branching_ratio,
            desync_ns: self.photon_arrival_time_desynchronisation_ns,
            excitation_bandwidth_mhz: self.truncate_to_excitation_bandwidth.then_some(self.excitation_bandwidth_mhz),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmittersSection {
    pub tc1: EmitterSection,
    pub tc2: EmitterSection,
}

impl Default for EmittersSection {
    fn default() -> Self {
        EmittersSection {
            tc1: EmitterSection::from_params(&EmitterParams::tc1()),
            tc2: EmitterSection::from_params(&EmitterParams::tc2()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardwareSection {
    pub detector_loss_db: f64,
    pub symmetric_cavity_loss_db: f64,
    pub path_loss_db: f64,
    pub quantum_efficiency_loss_db: f64,
    pub probability_of_excitation_db: f64,
    pub detector_efficiency: f64,
    /// Apply `detector_efficiency` on top of `detector_loss_db`.
    pub stack_detector_efficiency: bool,
    pub darkcount_rate_hz: f64,
    pub dead_time_ns: f64,
    pub latency_ns: f64,
    pub acquisition_window_ns: f64,
    pub average_gate_fidelity: f64,
    pub initialization_fidelity: f64,
}

impl Default for HardwareSection {
    fn default() -> Self {
        let p = OpticalPath::measured();
        let db = |label: &str| p.elements.iter().find(|e| e.label == label).map_or(0.0, |e| e.loss_db);
        let d = DetectorModel::default();
        HardwareSection {
            detector_loss_db: db("detector_loss"),
            symmetric_cavity_loss_db: db("symmetric_cavity_loss"),
            path_loss_db: db("path_loss"),
            quantum_efficiency_loss_db: db("quantum_efficiency_loss"),
            probability_of_excitation_db: p.excitation_db,
            detector_efficiency: p.detector_efficiency,
            stack_detector_efficiency: p.stack_detector_efficiency,
            darkcount_rate_hz: d.dark_rate_hz,
            dead_time_ns: d.dead_time_ns,
            latency_ns: d.latency_ns,
            acquisition_window_ns: 130.0,
            average_gate_fidelity: 0.98575,
            initialization_fidelity: 0.983,
        }
    }
}

impl HardwareSection {
    pub fn path(&self) -> OpticalPath {
        let el = |label: &str, loss_db| LossElement { label: label.into(), loss_db };
        OpticalPath {
            elements: vec![
                el("detector_loss", self.detector_loss_db),
                el("symmetric_cavity_loss", self.symmetric_cavity_loss_db),
                el("path_loss", self.path_loss_db),
                el("quantum_efficiency_loss", self.quantum_efficiency_loss_db),
            ],
            excitation_db: self.probability_of_excitation_db,
            detector_efficiency: self.detector_efficiency,
            stack_detector_efficiency: self.stack_detector_efficiency,
        }
    }

    pub fn detectors(&self) -> DetectorModel {
        DetectorModel { dark_rate_hz: self.darkcount_rate_hz, dead_time_ns: self.dead_time_ns, latency_ns: self.latency_ns }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BkEvaluation {
    Analytic,
    /// Estimator on `shots` sampled outcomes per basis.
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSection {
    pub timebins_ns: Vec<f64>,
    /// Timing of the late round; carried for the sequence record.
    pub early_late_separation_ns: f64,
    pub repetition_rate_hz: f64,
    pub electron_pi_pulse_ns: f64,
    pub gate_error_model: GateErrorModel,
    pub evaluation: BkEvaluation,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        ProtocolSection {
            timebins_ns: vec![1.0, 2.0, 5.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 80.0, 100.0, 130.0],
            early_late_separation_ns: EARLY_LATE_SEPARATION_NS,
            repetition_rate_hz: 11_800.0,
            electron_pi_pulse_ns: 50.0,
            gate_error_model: GateErrorModel::Depolarizing,
            evaluation: BkEvaluation::Analytic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HomSection {
    pub windows_ns: Vec<f64>,
    pub bin_width_ns: f64,
    /// Run the tag-level Monte Carlo next to the analytic model.
    pub monte_carlo: bool,
    /// Use unit efficiencies and no darks in the Monte Carlo so that
    /// 10⁶ shots give usable statistics.
    pub lossless_optics: bool,
}

impl Default for HomSection {
    fn default() -> Self {
        HomSection {
            windows_ns: vec![1.0, 2.0, 5.0, 10.0, 20.0, 40.0, 60.0, 100.0, 130.0],
            bin_width_ns: 1.0,
            monte_carlo: true,
            lossless_optics: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BellPairSource {
    /// The heralded state of the BK model at `timebin_ns`.
    Model,
    /// Werner state with `werner_fidelity`.
    Werner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TcnotSection {
    pub mode: TcnotMode,
    pub bell_pair: BellPairSource,
    pub werner_fidelity: f64,
    pub timebin_ns: f64,
}

impl Default for TcnotSection {
    fn default() -> Self {
        TcnotSection { mode: TcnotMode::Postselect00, bell_pair: BellPairSource::Model, werner_fidelity: 0.6, timebin_ns: 40.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpinSection {
    pub curves: Vec<SpinCurve>,
    /// Gate time for the fidelity read off the Rabi envelope.
    pub gate_time_ns: f64,
}

impl Default for SpinSection {
    fn default() -> Self {
        SpinSection { curves: SpinCurve::defaults(), gate_time_ns: 50.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsroSection {
    pub tc1: SsroModel,
    pub tc2: SsroModel,
}

impl Default for SsroSection {
    fn default() -> Self {
        SsroSection { tc1: SsroModel::tc1(), tc2: SsroModel::tc2() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastSection {
    pub projection: ProjectionParams,
    pub steps: StepBudget,
    pub efficiencies: EfficiencyBudget,
    pub fractions: Vec<f64>,
}

impl Default for ForecastSection {
    fn default() -> Self {
        let mut fractions = vec![1e-4, 1e-3];
        fractions.extend((1..=40).map(|i| i as f64 * 0.025));
        ForecastSection {
            projection: ProjectionParams::default(),
            steps: StepBudget::projected(),
            efficiencies: EfficiencyBudget::projected(),
            fractions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub shots: u64,
    pub seed: u64,
    /// Prefix of every artifact path.
    pub output: PathBuf,
    #[serde(default)]
    pub emitters: EmittersSection,
    #[serde(default)]
    pub hardware: HardwareSection,
    #[serde(default)]
    pub protocol: ProtocolSection,
    #[serde(default)]
    pub hom: HomSection,
    #[serde(default)]
    pub tcnot: TcnotSection,
    #[serde(default)]
    pub spin: SpinSection,
    #[serde(default)]
    pub ssro: SsroSection,
    #[serde(default)]
    pub forecast: ForecastSection,
}

/// Configuration problem with the offending key.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: Option<String>,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.key {
            Some(k) => write!(f, "config key `{k}`: {}", self.message),
            None => write!(f, "config: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn keyed(prefix: &str) -> impl Fn(Error) -> ConfigError + '_ {
    move |e| match e {
        Error::InvalidParameter { name, reason } => ConfigError { key: Some(format!("{prefix}.{name}")), message: reason },
        other => ConfigError { key: Some(prefix.to_string()), message: other.to_string() },
    }
}

fn require(ok: bool, key: &str, msg: &str) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError { key: Some(key.into()), message: msg.into() })
    }
}

pub fn default_config(experiment: Experiment) -> RunConfig {
    let shots = match experiment {
        Experiment::Hom => 1_000_000,
        Experiment::Bk => 10_000,
        Experiment::Ssro => 20_000,
        Experiment::Tcnot | Experiment::Spin | Experiment::Forecast => 200,
    };
    RunConfig {
        experiment,
        shots,
        seed: 1,
        output: PathBuf::from(format!("tcsim_out/{}", experiment.name())),
        emitters: EmittersSection::default(),
        hardware: HardwareSection::default(),
        protocol: ProtocolSection::default(),
        hom: HomSection::default(),
        tcnot: TcnotSection::default(),
        spin: SpinSection::default(),
        ssro: SsroSection::default(),
        forecast: ForecastSection::default(),
    }
}

const SECTION_NOTES: &[(&str, &str)] = &[
    ("[emitters.tc1]", "# Emitter of module A. excitation_bandwidth_mhz is the FWHM of the slow diffusion."),
    ("[emitters.tc2]", "# Emitter of module B. Polarisation angles are relative to a common axis."),
    ("[hardware]", "# Losses in dB as non-positive numbers; fidelities as fractions."),
    ("[protocol]", "# Barrett-Kok model. evaluation = \"analytic\" | \"sampled\"; gate_error_model = \"depolarizing\" | \"coherent\"."),
    ("[hom]", "# Window sweep for the visibility curve and the histogram bin width."),
    ("[tcnot]", "# mode = \"postselect00\" | \"feed_forward\"; bell_pair = \"model\" | \"werner\"."),
    ("[spin]", "# Synthetic characterization curves; truth follows the fit model's parameter order."),
    ("[ssro]", "# Readout models: photons per round, nuclear flips per round, mapping gate fidelity."),
    ("[forecast]", "# Projected device. p_double defaults to pulse_width/(4·lifetime) when omitted."),
];

/// Complete config text with section comments.
pub fn default_config_text(experiment: Experiment) -> String {
    let body = toml::to_string(&default_config(experiment)).expect("default config serializes");
    let mut out = String::from(
        "# tcsim run configuration. Unknown keys are rejected; omitted sections use these defaults.\n\
         # experiment = \"hom\" | \"bk\" | \"tcnot\" | \"spin\" | \"ssro\" | \"forecast\"\n",
    );
    for line in body.lines() {
        if let Some((_, note)) = SECTION_NOTES.iter().find(|(h, _)| *h == line.trim()) {
            out.push('\n');
            out.push_str(note);
            out.push('\n');
            out.push_str(line);
            out.push('\n');
        } else if !(line.is_empty() && out.ends_with("\n\n")) {
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError { key: None, message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.emitters.tc1.params().validate().map_err(keyed("emitters.tc1"))?;
        self.emitters.tc2.params().validate().map_err(keyed("emitters.tc2"))?;
        let h = &self.hardware;
        for (k, v) in [
            ("detector_loss_db", h.detector_loss_db),
            ("symmetric_cavity_loss_db", h.symmetric_cavity_loss_db),
            ("path_loss_db", h.path_loss_db),
            ("quantum_efficiency_loss_db", h.quantum_efficiency_loss_db),
        ] {
            require(v <= 0.0 && v.is_finite(), &format!("hardware.{k}"), "losses are non-positive dB values")?;
        }
        h.path().validate().map_err(keyed("hardware"))?;
        require(h.darkcount_rate_hz >= 0.0, "hardware.darkcount_rate_hz", "must be non-negative")?;
        require(h.dead_time_ns >= 0.0, "hardware.dead_time_ns", "must be non-negative")?;
        require(h.latency_ns >= 0.0, "hardware.latency_ns", "must be non-negative")?;
        require(h.acquisition_window_ns > 0.0, "hardware.acquisition_window_ns", "must be positive")?;
        for (k, v) in [("average_gate_fidelity", h.average_gate_fidelity), ("initialization_fidelity", h.initialization_fidelity)] {
            require((0.5..=1.0).contains(&v), &format!("hardware.{k}"), "must lie in [0.5, 1]")?;
        }
        let p = &self.protocol;
        require(!p.timebins_ns.is_empty(), "protocol.timebins_ns", "needs at least one time bin")?;
        for t in &p.timebins_ns {
            require(
                *t > 0.0 && *t <= h.acquisition_window_ns,
                "protocol.timebins_ns",
                &format!("{t} outside (0, acquisition_window_ns]"),
            )?;
        }
        require(p.early_late_separation_ns > h.acquisition_window_ns, "protocol.early_late_separation_ns", "rounds overlap")?;
        require(p.repetition_rate_hz > 0.0, "protocol.repetition_rate_hz", "must be positive")?;
        require(p.electron_pi_pulse_ns > 0.0, "protocol.electron_pi_pulse_ns", "must be positive")?;
        require(!self.hom.windows_ns.is_empty(), "hom.windows_ns", "needs at least one window")?;
        for t in &self.hom.windows_ns {
            require(*t > 0.0 && *t <= h.acquisition_window_ns, "hom.windows_ns", &format!("{t} outside (0, acquisition_window_ns]"))?;
        }
        require(self.hom.bin_width_ns > 0.0, "hom.bin_width_ns", "must be positive")?;
        require((0.25..=1.0).contains(&self.tcnot.werner_fidelity), "tcnot.werner_fidelity", "must lie in [0.25, 1]")?;
        require(
            self.tcnot.timebin_ns > 0.0 && self.tcnot.timebin_ns <= h.acquisition_window_ns,
            "tcnot.timebin_ns",
            "outside (0, acquisition_window_ns]",
        )?;
        for (i, c) in self.spin.curves.iter().enumerate() {
            c.validate().map_err(keyed(&format!("spin.curves[{i}]")))?;
        }
        require(self.spin.gate_time_ns >= 0.0, "spin.gate_time_ns", "must be non-negative")?;
        self.ssro.tc1.validate().map_err(keyed("ssro.tc1"))?;
        self.ssro.tc2.validate().map_err(keyed("ssro.tc2"))?;
        let f = &self.forecast;
        f.projection.validate().map_err(keyed("forecast.projection"))?;
        f.steps.validate().map_err(keyed("forecast.steps"))?;
        f.efficiencies.validate().map_err(keyed("forecast.efficiencies"))?;
        for x in &f.fractions {
            require(*x > 0.0 && *x <= 1.0, "forecast.fractions", &format!("{x} outside (0, 1]"))?;
        }
        require(self.shots > 0, "shots", "must be at least 1")?;
        if matches!(self.experiment, Experiment::Hom | Experiment::Ssro) {
            require(self.shots <= u32::MAX as u64, "shots", "exceeds the 32-bit shot counter")?;
        }
        Ok(())
    }

    pub fn emitters(&self) -> [EmitterParams; 2] {
        [self.emitters.tc1.params(), self.emitters.tc2.params()]
    }

    pub fn apparatus(&self) -> Apparatus {
        Apparatus {
            emitters: self.emitters(),
            paths: [self.hardware.path(), self.hardware.path()],
            detectors: Some(self.hardware.detectors()),
            init_fidelity: self.hardware.initialization_fidelity,
        }
    }

    pub fn bk_params(&self, timebin_ns: f64) -> BkModelParams {
        let h = &self.hardware;
        BkModelParams {
            emitters: self.emitters(),
            paths: [h.path(), h.path()],
            gate_fidelity: h.average_gate_fidelity,
            init_fidelity: h.initialization_fidelity,
            dark_rate_hz: h.darkcount_rate_hz,
            gate_ns: h.acquisition_window_ns,
            visibility: VisibilityProfile::FromEmitters,
            timebin_ns,
            tau_lim_ns: h.acquisition_window_ns,
            pi_pulse_ns: self.protocol.electron_pi_pulse_ns,
            repetition_rate_hz: self.protocol.repetition_rate_hz,
            gate_error: self.protocol.gate_error_model,
        }
    }
}
