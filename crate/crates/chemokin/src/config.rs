//! Scenario configuration: a line-oriented key-value format with sections
//! and inline numeric arrays. One parse path, one grammar (documented in
//! `docs/config-format.md`), and a distinct error code per failure class so
//! rejects are testable.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::characteristics::internal_state_box;
use crate::grid::YBox;
use crate::model::{
    GrowthSpec, KernelMatrix, KernelSpec, ModelConfig, MonotoneFn, ReactionVariant, SampleBox,
    SignalComponent, SignalResponse, TurningRateSpec, ValidationReport, VelocitySet,
    validate_growth_conditions,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfigErrorCode {
    Syntax,
    UnknownKey,
    MissingField,
    BadValue,
    Positivity,
    KernelNormalization,
    SupportTooWide,
    Inconsistent,
}

impl std::fmt::Display for ConfigErrorCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ConfigErrorCode::Syntax => "SYNTAX",
            ConfigErrorCode::UnknownKey => "UNKNOWN_KEY",
            ConfigErrorCode::MissingField => "MISSING_FIELD",
            ConfigErrorCode::BadValue => "BAD_VALUE",
            ConfigErrorCode::Positivity => "POSITIVITY",
            ConfigErrorCode::KernelNormalization => "KERNEL_NORMALIZATION",
            ConfigErrorCode::SupportTooWide => "SUPPORT_TOO_WIDE",
            ConfigErrorCode::Inconsistent => "INCONSISTENT",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub code: ConfigErrorCode,
    pub field: String,
    pub reason: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} at {}: {}", self.code, self.field, self.reason)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Kinetic,
    Agent,
    Compare,
    Monitor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coupling {
    OneWay,
    TwoWay,
}

#[derive(Debug, Clone, PartialEq)]
pub enum XProfile {
    Gaussian { center: f64, sigma: f64, support: f64 },
    Box { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialSignal {
    /// Recomputed from the initial density through the elliptic relation.
    Elliptic,
    Uniform(Vec<f64>),
    Gaussian {
        amplitude: Vec<f64>,
        center: Vec<f64>,
        sigma: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialSpec {
    pub mass: f64,
    pub x_profile: XProfile,
    pub v_weights: Vec<f64>,
    pub y_center: [f64; 2],
    pub y_sigma: [f64; 2],
    pub y_support: [f64; 2],
    pub s0: InitialSignal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub model: ModelConfig,
    pub growth: GrowthSpec,
    pub sample_box: SampleBox,
    pub mode: RunMode,
    pub signal_mode: crate::signal::SignalMode,
    pub horizon: f64,
    pub dt: f64,
    pub output_every: usize,
    pub snapshot_every: usize,
    pub seed: u64,
    pub workers: usize,
    pub n_agents: usize,
    pub coupling: Coupling,
    pub trajectories: usize,
    pub initial: InitialSpec,
    /// Inflated a priori internal-state box; the phase-space grid box.
    pub state_box: YBox,
    /// A priori sup bound on the signal magnitude, from the initial mass.
    pub s_bar: f64,
    pub hash: String,
}

#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub config: ScenarioConfig,
    pub validation: ValidationReport,
    pub lambda_max: f64,
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Word(String),
    Array(Vec<f64>),
}

fn tokenize(value: &str, field: &str, errors: &mut Vec<ConfigError>) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut rest = value.trim();
    while !rest.is_empty() {
        if let Some(stripped) = rest.strip_prefix('[') {
            match stripped.find(']') {
                Some(end) => {
                    let inner = &stripped[..end];
                    let mut arr = Vec::new();
                    for piece in inner.split(|c: char| c == ',' || c.is_whitespace()) {
                        if piece.is_empty() {
                            continue;
                        }
                        match piece.parse::<f64>() {
                            Ok(v) => arr.push(v),
                            Err(_) => errors.push(ConfigError {
                                code: ConfigErrorCode::BadValue,
                                field: field.into(),
                                reason: format!("'{piece}' is not a number"),
                            }),
                        }
                    }
                    tokens.push(Token::Array(arr));
                    rest = stripped[end + 1..].trim_start();
                }
                None => {
                    errors.push(ConfigError {
                        code: ConfigErrorCode::Syntax,
                        field: field.into(),
                        reason: "unterminated '['".into(),
                    });
                    return tokens;
                }
            }
        } else {
            let end = rest
                .find(|c: char| c.is_whitespace() || c == '[')
                .unwrap_or(rest.len());
            tokens.push(Token::Word(rest[..end].to_string()));
            rest = rest[end..].trim_start();
        }
    }
    tokens
}

// ---------------------------------------------------------------------------
// Raw document
// ---------------------------------------------------------------------------

struct RawDoc {
    entries: BTreeMap<(String, String), String>,
}

fn parse_lines(text: &str, errors: &mut Vec<ConfigError>) -> RawDoc {
    let mut entries = BTreeMap::new();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            match name.strip_suffix(']') {
                Some(n) if !n.trim().is_empty() => section = n.trim().to_string(),
                _ => errors.push(ConfigError {
                    code: ConfigErrorCode::Syntax,
                    field: format!("line {}", lineno + 1),
                    reason: format!("malformed section header '{line}'"),
                }),
            }
            continue;
        }
        match line.split_once('=') {
            Some((key, value)) => {
                let key = key.trim().to_string();
                if section.is_empty() {
                    errors.push(ConfigError {
                        code: ConfigErrorCode::Syntax,
                        field: format!("line {}", lineno + 1),
                        reason: "entry before any [section]".into(),
                    });
                    continue;
                }
                entries.insert((section.clone(), key), value.trim().to_string());
            }
            None => errors.push(ConfigError {
                code: ConfigErrorCode::Syntax,
                field: format!("line {}", lineno + 1),
                reason: format!("expected 'key = value', got '{line}'"),
            }),
        }
    }
    RawDoc { entries }
}

struct Extract<'a> {
    doc: &'a RawDoc,
    errors: Vec<ConfigError>,
    used: Vec<(String, String)>,
}

impl<'a> Extract<'a> {
    fn raw(&mut self, section: &str, key: &str) -> Option<String> {
        let k = (section.to_string(), key.to_string());
        self.used.push(k.clone());
        self.doc.entries.get(&k).cloned()
    }

    fn missing(&mut self, section: &str, key: &str) {
        self.errors.push(ConfigError {
            code: ConfigErrorCode::MissingField,
            field: format!("{section}.{key}"),
            reason: "required field absent".into(),
        });
    }

    fn bad(&mut self, section: &str, key: &str, reason: impl Into<String>) {
        self.errors.push(ConfigError {
            code: ConfigErrorCode::BadValue,
            field: format!("{section}.{key}"),
            reason: reason.into(),
        });
    }

    fn tokens(&mut self, section: &str, key: &str) -> Option<Vec<Token>> {
        let value = self.raw(section, key)?;
        let field = format!("{section}.{key}");
        let mut errs = Vec::new();
        let toks = tokenize(&value, &field, &mut errs);
        self.errors.extend(errs);
        Some(toks)
    }

    fn f64_req(&mut self, section: &str, key: &str) -> Option<f64> {
        match self.raw(section, key) {
            None => {
                self.missing(section, key);
                None
            }
            Some(v) => match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Some(x),
                _ => {
                    self.bad(section, key, format!("'{v}' is not a finite number"));
                    None
                }
            },
        }
    }

    fn usize_req(&mut self, section: &str, key: &str) -> Option<usize> {
        match self.raw(section, key) {
            None => {
                self.missing(section, key);
                None
            }
            Some(v) => match v.parse::<usize>() {
                Ok(x) => Some(x),
                _ => {
                    self.bad(section, key, format!("'{v}' is not a nonnegative integer"));
                    None
                }
            },
        }
    }

    fn usize_opt(&mut self, section: &str, key: &str, default: usize) -> usize {
        match self.raw(section, key) {
            None => default,
            Some(v) => match v.parse::<usize>() {
                Ok(x) => x,
                _ => {
                    self.bad(section, key, format!("'{v}' is not a nonnegative integer"));
                    default
                }
            },
        }
    }

    fn u64_req(&mut self, section: &str, key: &str) -> Option<u64> {
        match self.raw(section, key) {
            None => {
                self.missing(section, key);
                None
            }
            Some(v) => match v.parse::<u64>() {
                Ok(x) => Some(x),
                _ => {
                    self.bad(section, key, format!("'{v}' is not an unsigned integer"));
                    None
                }
            },
        }
    }

    fn array_req(&mut self, section: &str, key: &str) -> Option<Vec<f64>> {
        match self.tokens(section, key) {
            None => {
                self.missing(section, key);
                None
            }
            Some(toks) => match toks.as_slice() {
                [Token::Array(a)] => Some(a.clone()),
                _ => {
                    self.bad(section, key, "expected a single [ ... ] array");
                    None
                }
            },
        }
    }

    fn word_req(&mut self, section: &str, key: &str) -> Option<String> {
        match self.raw(section, key) {
            None => {
                self.missing(section, key);
                None
            }
            Some(v) => Some(v),
        }
    }
}

fn parse_monotone(
    ex: &mut Extract,
    section: &str,
    key: &str,
) -> Option<MonotoneFn> {
    let toks = match ex.tokens(section, key) {
        None => {
            ex.missing(section, key);
            return None;
        }
        Some(t) => t,
    };
    let word = |t: &Token| -> Option<f64> {
        match t {
            Token::Word(w) => w.parse::<f64>().ok(),
            _ => None,
        }
    };
    let out = match toks.as_slice() {
        [Token::Word(k), a] if k == "constant" => word(a).map(|c| MonotoneFn::Constant { c }),
        [Token::Word(k), a, b] if k == "affine" => {
            word(a).zip(word(b)).map(|(a, b)| MonotoneFn::Affine { a, b })
        }
        [Token::Word(k), c, p] if k == "power" => {
            word(c).zip(word(p)).map(|(c, p)| MonotoneFn::Power { c, p })
        }
        [Token::Word(k), a, b] if k == "saturating_linear" => word(a)
            .zip(word(b))
            .map(|(a, b)| MonotoneFn::SaturatingLinear { a, b }),
        [Token::Word(k), Token::Array(rs), Token::Array(vs)] if k == "table" => {
            if rs.len() == vs.len() && !rs.is_empty() {
                Some(MonotoneFn::Tabulated {
                    points: rs.iter().cloned().zip(vs.iter().cloned()).collect(),
                })
            } else {
                None
            }
        }
        _ => None,
    };
    if out.is_none() {
        ex.bad(
            section,
            key,
            "expected 'constant c' | 'affine a b' | 'power c p' | \
             'saturating_linear a b' | 'table [r...] [v...]'",
        );
    }
    out
}

const KNOWN_KEYS: &[(&str, &str)] = &[
    ("model", "t_e"),
    ("model", "t_a"),
    ("model", "g"),
    ("model", "lambda"),
    ("model", "kernel"),
    ("model", "speeds"),
    ("model", "weights"),
    ("model", "d"),
    ("model", "k"),
    ("model", "k0"),
    ("model", "reaction"),
    ("model", "length"),
    ("model", "nx"),
    ("model", "ny1"),
    ("model", "ny2"),
    ("growth", "phi"),
    ("growth", "psi"),
    ("growth", "lambda_fn"),
    ("growth", "pi"),
    ("growth", "omega"),
    ("growth", "sigma"),
    ("growth", "gamma"),
    ("growth", "c_y"),
    ("growth", "c_poly"),
    ("growth", "c_lambda"),
    ("growth", "c_div"),
    ("growth", "s_max"),
    ("growth", "dcdt_max"),
    ("growth", "samples"),
    ("scenario", "mode"),
    ("scenario", "signal"),
    ("scenario", "horizon"),
    ("scenario", "dt"),
    ("scenario", "output_every"),
    ("scenario", "snapshot_every"),
    ("scenario", "seed"),
    ("scenario", "workers"),
    ("scenario", "agents"),
    ("scenario", "coupling"),
    ("scenario", "trajectories"),
    ("initial", "mass"),
    ("initial", "x_profile"),
    ("initial", "v_weights"),
    ("initial", "y_center"),
    ("initial", "y_sigma"),
    ("initial", "y_support"),
    ("initial", "s0"),
];

/// Parses and fully validates a scenario file; returns either the loaded,
/// hypothesis-checked scenario or the complete list of problems.
pub fn load_config(path: &Path) -> Result<LoadedScenario, Vec<ConfigError>> {
    let bytes = std::fs::read(path).map_err(|e| {
        vec![ConfigError {
            code: ConfigErrorCode::Syntax,
            field: path.display().to_string(),
            reason: format!("cannot read file: {e}"),
        }]
    })?;
    let text = String::from_utf8_lossy(&bytes).to_string();
    let hash = hex_digest(&bytes);
    load_config_str(&text, hash)
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load_config_str(text: &str, hash: String) -> Result<LoadedScenario, Vec<ConfigError>> {
    let mut errors = Vec::new();
    let doc = parse_lines(text, &mut errors);
    let mut ex = Extract {
        doc: &doc,
        errors,
        used: Vec::new(),
    };

    // -- model ------------------------------------------------------------
    let t_e = ex.f64_req("model", "t_e");
    let t_a = ex.f64_req("model", "t_a");
    let g = parse_signal_response(&mut ex);
    let lambda = parse_lambda(&mut ex);
    let kernel = parse_kernel(&mut ex);
    let speeds = ex.array_req("model", "speeds");
    let weights = ex.array_req("model", "weights");
    let d = ex.array_req("model", "d");
    let k = ex.array_req("model", "k");
    let k0 = ex.array_req("model", "k0");
    let reaction = match ex.word_req("model", "reaction").as_deref() {
        Some("produce_degrade") => Some(ReactionVariant::ProduceDegrade),
        Some("consume") => Some(ReactionVariant::Consume),
        Some(other) => {
            ex.bad("model", "reaction", format!("unknown variant '{other}'"));
            None
        }
        None => None,
    };
    let length = ex.f64_req("model", "length");
    let nx = ex.usize_req("model", "nx");
    let ny1 = ex.usize_req("model", "ny1");
    let ny2 = ex.usize_req("model", "ny2");

    // -- growth -----------------------------------------------------------
    let phi = parse_monotone(&mut ex, "growth", "phi");
    let psi = parse_monotone(&mut ex, "growth", "psi");
    let lambda_fn = parse_monotone(&mut ex, "growth", "lambda_fn");
    let pi = parse_monotone(&mut ex, "growth", "pi");
    let omega = ex.f64_req("growth", "omega");
    let sigma = ex.f64_req("growth", "sigma");
    let gamma = ex.f64_req("growth", "gamma");
    let c_y = ex.f64_req("growth", "c_y");
    let c_poly = ex.f64_req("growth", "c_poly");
    let c_lambda = ex.f64_req("growth", "c_lambda");
    let c_div = ex.f64_req("growth", "c_div");
    let s_max = ex.f64_req("growth", "s_max");
    let dcdt_max = ex.f64_req("growth", "dcdt_max");
    let samples = ex.usize_opt("growth", "samples", 33);

    // -- scenario ---------------------------------------------------------
    let mode = match ex.word_req("scenario", "mode").as_deref() {
        Some("kinetic") => Some(RunMode::Kinetic),
        Some("agent") => Some(RunMode::Agent),
        Some("compare") => Some(RunMode::Compare),
        Some("monitor") => Some(RunMode::Monitor),
        Some(other) => {
            ex.bad("scenario", "mode", format!("unknown mode '{other}'"));
            None
        }
        None => None,
    };
    let signal_mode = match ex.word_req("scenario", "signal").as_deref() {
        Some("elliptic") => Some(crate::signal::SignalMode::Elliptic),
        Some("parabolic") => Some(crate::signal::SignalMode::Parabolic),
        Some(other) => {
            ex.bad("scenario", "signal", format!("unknown signal mode '{other}'"));
            None
        }
        None => None,
    };
    let horizon = ex.f64_req("scenario", "horizon");
    let dt = ex.f64_req("scenario", "dt");
    let output_every = ex.usize_opt("scenario", "output_every", 1);
    let snapshot_every = ex.usize_opt("scenario", "snapshot_every", 0);
    let seed = ex.u64_req("scenario", "seed");
    let workers = ex.usize_opt("scenario", "workers", 0);
    let n_agents = ex.usize_opt("scenario", "agents", 10_000);
    let coupling = match ex.raw("scenario", "coupling").as_deref() {
        None | Some("one_way") => Coupling::OneWay,
        Some("two_way") => Coupling::TwoWay,
        Some(other) => {
            ex.bad("scenario", "coupling", format!("unknown coupling '{other}'"));
            Coupling::OneWay
        }
    };
    let trajectories = ex.usize_opt("scenario", "trajectories", 0);

    // -- initial ----------------------------------------------------------
    let mass = ex.f64_req("initial", "mass");
    let x_profile = parse_x_profile(&mut ex);
    let v_weights0 = ex.array_req("initial", "v_weights");
    let y_center = ex.array_req("initial", "y_center");
    let y_sigma = ex.array_req("initial", "y_sigma");
    let y_support = ex.array_req("initial", "y_support");
    let s0 = parse_initial_signal(&mut ex);

    // Unknown keys.
    for (section, key) in doc.entries.keys() {
        if !KNOWN_KEYS
            .iter()
            .any(|(s, k)| s == section && k == key)
        {
            ex.errors.push(ConfigError {
                code: ConfigErrorCode::UnknownKey,
                field: format!("{section}.{key}"),
                reason: "not a recognised configuration key".into(),
            });
        }
    }

    // Bail here if anything structural failed.
    if !ex.errors.is_empty() {
        return Err(ex.errors);
    }
    let (t_e, t_a) = (t_e.unwrap(), t_a.unwrap());
    let (g, lambda, kernel) = (g.unwrap(), lambda.unwrap(), kernel.unwrap());
    let (speeds, weights) = (speeds.unwrap(), weights.unwrap());
    let (d, k, k0) = (d.unwrap(), k.unwrap(), k0.unwrap());
    let (length, nx, ny1, ny2) = (length.unwrap(), nx.unwrap(), ny1.unwrap(), ny2.unwrap());
    let growth = GrowthSpec {
        phi: phi.unwrap(),
        psi: psi.unwrap(),
        lambda_growth: lambda_fn.unwrap(),
        pi: pi.unwrap(),
        omega: omega.unwrap(),
        sigma: sigma.unwrap(),
        gamma: gamma.unwrap(),
        c_y: c_y.unwrap(),
        c_poly: c_poly.unwrap(),
        c_lambda: c_lambda.unwrap(),
        c_div: c_div.unwrap(),
    };
    let mut errors = Vec::new();

    // Positivity of the named constants.
    let mut positivity = |name: &str, value: f64, strict: bool| {
        if (strict && !(value > 0.0)) || (!strict && !(value >= 0.0)) {
            errors.push(ConfigError {
                code: ConfigErrorCode::Positivity,
                field: name.into(),
                reason: format!("must be {} 0, got {value}", if strict { ">" } else { ">=" }),
            });
        }
    };
    positivity("model.t_e", t_e, true);
    positivity("model.t_a", t_a, true);
    for (i, &v) in d.iter().enumerate() {
        positivity(&format!("model.d[{i}]"), v, true);
    }
    for (i, &v) in k.iter().enumerate() {
        positivity(&format!("model.k[{i}]"), v, true);
    }
    for (i, &v) in k0.iter().enumerate() {
        positivity(&format!("model.k0[{i}]"), v, true);
    }
    positivity("model.length", length, true);
    positivity("scenario.dt", dt.unwrap(), true);
    positivity("scenario.horizon", horizon.unwrap(), false);
    positivity("initial.mass", mass.unwrap(), true);

    if d.len() != k.len() || d.len() != k0.len() || d.is_empty() {
        errors.push(ConfigError {
            code: ConfigErrorCode::BadValue,
            field: "model.d/k/k0".into(),
            reason: "signal constant arrays must be nonempty and equally long".into(),
        });
    }
    let signal: Vec<SignalComponent> = d
        .iter()
        .zip(&k)
        .zip(&k0)
        .map(|((&diffusion, &production), &decay)| SignalComponent {
            diffusion,
            production,
            decay,
        })
        .collect();

    let velocities = VelocitySet {
        speeds: speeds.clone(),
        weights: weights.clone(),
    };
    if let Err(e) = velocities.validate() {
        errors.push(ConfigError {
            code: ConfigErrorCode::BadValue,
            field: "model.speeds/weights".into(),
            reason: e.to_string(),
        });
    }
    if let Err(e) = KernelMatrix::materialize(&kernel, &velocities) {
        errors.push(ConfigError {
            code: ConfigErrorCode::KernelNormalization,
            field: "model.kernel".into(),
            reason: e.to_string(),
        });
    }

    let model = ModelConfig {
        m: 2,
        excitation_time: t_e,
        adaptation_time: t_a,
        g,
        lambda,
        kernel,
        velocities,
        signal,
        reaction: reaction.unwrap(),
        domain_length: length,
        nx,
        ny: [ny1, ny2],
    };
    if errors.is_empty() {
        if let Err(e) = model.validate() {
            errors.push(ConfigError {
                code: ConfigErrorCode::BadValue,
                field: "model".into(),
                reason: e.to_string(),
            });
        }
    }

    // Structural cross-checks.
    let dt_v = dt.unwrap();
    let dt_limit = t_e.min(t_a) / 4.0;
    if dt_v > dt_limit * (1.0 + 1e-12) {
        errors.push(ConfigError {
            code: ConfigErrorCode::Inconsistent,
            field: "scenario.dt".into(),
            reason: format!("dt = {dt_v} exceeds min(t_e, t_a)/4 = {dt_limit}"),
        });
    }
    let signal_mode_v = signal_mode.unwrap();
    if matches!(model.reaction, ReactionVariant::Consume)
        && matches!(signal_mode_v, crate::signal::SignalMode::Elliptic)
    {
        errors.push(ConfigError {
            code: ConfigErrorCode::Inconsistent,
            field: "model.reaction".into(),
            reason: "the consuming reaction has no elliptic quasi-equilibrium; use parabolic"
                .into(),
        });
    }
    let s0_v = s0.unwrap();
    if matches!(signal_mode_v, crate::signal::SignalMode::Elliptic)
        && !matches!(s0_v, InitialSignal::Elliptic)
    {
        errors.push(ConfigError {
            code: ConfigErrorCode::Inconsistent,
            field: "initial.s0".into(),
            reason: "elliptic runs recompute S0 from the initial density; set s0 = elliptic"
                .into(),
        });
    }
    match &s0_v {
        InitialSignal::Uniform(v) if v.len() != model.signal_dim() => {
            errors.push(ConfigError {
                code: ConfigErrorCode::BadValue,
                field: "initial.s0".into(),
                reason: "uniform S0 needs one value per signal component".into(),
            });
        }
        InitialSignal::Gaussian {
            amplitude,
            center,
            sigma,
        } if amplitude.len() != model.signal_dim()
            || center.len() != model.signal_dim()
            || sigma.len() != model.signal_dim() =>
        {
            errors.push(ConfigError {
                code: ConfigErrorCode::BadValue,
                field: "initial.s0".into(),
                reason: "gaussian S0 needs one amplitude/center/sigma per component".into(),
            });
        }
        _ => {}
    }

    // Initial support checks.
    let x_profile_v = x_profile.unwrap();
    let support_width = match &x_profile_v {
        XProfile::Gaussian { support, .. } => 2.0 * support,
        XProfile::Box { lo, hi } => hi - lo,
    };
    if !(support_width > 0.0) {
        errors.push(ConfigError {
            code: ConfigErrorCode::BadValue,
            field: "initial.x_profile".into(),
            reason: "empty initial support".into(),
        });
    } else if support_width >= 0.5 * length {
        errors.push(ConfigError {
            code: ConfigErrorCode::SupportTooWide,
            field: "initial.x_profile".into(),
            reason: format!(
                "support width {support_width} must stay below half the domain ({})",
                0.5 * length
            ),
        });
    }

    let arr2 = |name: &str, v: &[f64], errors: &mut Vec<ConfigError>| -> [f64; 2] {
        if v.len() == 2 {
            [v[0], v[1]]
        } else {
            errors.push(ConfigError {
                code: ConfigErrorCode::BadValue,
                field: name.into(),
                reason: "expected exactly two entries".into(),
            });
            [0.0, 0.0]
        }
    };
    let y_center_v = arr2("initial.y_center", &y_center.unwrap(), &mut errors);
    let y_sigma_v = arr2("initial.y_sigma", &y_sigma.unwrap(), &mut errors);
    let y_support_v = arr2("initial.y_support", &y_support.unwrap(), &mut errors);
    let v_weights_v = v_weights0.unwrap();
    if v_weights_v.len() != model.velocities.len()
        || v_weights_v.iter().any(|&w| w < 0.0)
        || v_weights_v.iter().sum::<f64>() <= 0.0
    {
        errors.push(ConfigError {
            code: ConfigErrorCode::BadValue,
            field: "initial.v_weights".into(),
            reason: "need one nonnegative weight per velocity with positive sum".into(),
        });
    }

    if !errors.is_empty() {
        return Err(errors);
    }

    // A priori geometry: signal sup bound from the initial mass, then the
    // internal-state box, inflated for the grid.
    let mass_v = mass.unwrap();
    let s_bar: f64 = model
        .signal
        .iter()
        .map(|c| std::f64::consts::PI * c.production * mass_v / (c.diffusion * c.decay).sqrt())
        .sum();
    let y0_box = YBox {
        lo: [
            y_center_v[0] - y_support_v[0],
            y_center_v[1] - y_support_v[1],
        ],
        hi: [
            y_center_v[0] + y_support_v[0],
            y_center_v[1] + y_support_v[1],
        ],
    };
    let tight_box = internal_state_box(s_bar, &model, &growth, &y0_box);
    let state_box = tight_box.inflated(1.2);

    let sample_box = SampleBox {
        s_abs_max: s_max.unwrap().max(s_bar),
        dcdt_abs_max: dcdt_max.unwrap(),
        y_box: state_box,
        samples_per_axis: samples.max(2),
    };
    let validation = validate_growth_conditions(&model, &growth, &sample_box).map_err(|e| {
        vec![ConfigError {
            code: ConfigErrorCode::BadValue,
            field: "growth".into(),
            reason: e.to_string(),
        }]
    })?;
    let lambda_max = validation.lambda_max;

    let config = ScenarioConfig {
        model,
        growth,
        sample_box,
        mode: mode.unwrap(),
        signal_mode: signal_mode_v,
        horizon: horizon.unwrap(),
        dt: dt_v,
        output_every: output_every.max(1),
        snapshot_every,
        seed: seed.unwrap(),
        workers,
        n_agents,
        coupling,
        trajectories,
        initial: InitialSpec {
            mass: mass_v,
            x_profile: x_profile_v,
            v_weights: v_weights_v,
            y_center: y_center_v,
            y_sigma: y_sigma_v,
            y_support: y_support_v,
            s0: s0_v,
        },
        state_box,
        s_bar,
        hash,
    };
    Ok(LoadedScenario {
        config,
        validation,
        lambda_max,
    })
}

fn parse_signal_response(ex: &mut Extract) -> Option<SignalResponse> {
    let toks = match ex.tokens("model", "g") {
        None => {
            ex.missing("model", "g");
            return None;
        }
        Some(t) => t,
    };
    let out = match toks.as_slice() {
        [Token::Word(k), Token::Array(a)] if k == "linear" => {
            Some(SignalResponse::Linear { coeffs: a.clone() })
        }
        [Token::Word(k), Token::Array(a), Token::Array(b)] if k == "saturating" => {
            Some(SignalResponse::Saturating {
                a: a.clone(),
                b: b.clone(),
            })
        }
        _ => None,
    };
    if out.is_none() {
        ex.bad("model", "g", "expected 'linear [a...]' or 'saturating [a...] [b...]'");
    }
    out
}

fn parse_lambda(ex: &mut Extract) -> Option<TurningRateSpec> {
    let toks = match ex.tokens("model", "lambda") {
        None => {
            ex.missing("model", "lambda");
            return None;
        }
        Some(t) => t,
    };
    let num = |t: &Token| -> Option<f64> {
        match t {
            Token::Word(w) => w.parse::<f64>().ok(),
            _ => None,
        }
    };
    let out = match toks.as_slice() {
        [Token::Word(k), r] if k == "constant" => {
            num(r).map(|rate| TurningRateSpec::Constant { rate })
        }
        [Token::Word(k), b, s] if k == "clipped_linear" => num(b)
            .zip(num(s))
            .map(|(base, slope)| TurningRateSpec::ClippedLinear { base, slope }),
        [Token::Word(k), b, a] if k == "saturating" => num(b)
            .zip(num(a))
            .map(|(base, amplitude)| TurningRateSpec::Saturating { base, amplitude }),
        _ => None,
    };
    if out.is_none() {
        ex.bad(
            "model",
            "lambda",
            "expected 'constant r' | 'clipped_linear base slope' | 'saturating base amplitude'",
        );
    }
    out
}

fn parse_kernel(ex: &mut Extract) -> Option<KernelSpec> {
    let toks = match ex.tokens("model", "kernel") {
        None => {
            ex.missing("model", "kernel");
            return None;
        }
        Some(t) => t,
    };
    let out = match toks.as_slice() {
        [Token::Word(k)] if k == "uniform" => Some(KernelSpec::Uniform),
        [Token::Word(k), Token::Word(p)] if k == "persistence" => p
            .parse::<f64>()
            .ok()
            .map(|p_same| KernelSpec::Persistence { p_same }),
        [Token::Word(k), Token::Array(m)] if k == "tabulated" => Some(KernelSpec::Tabulated {
            matrix: m.clone(),
        }),
        _ => None,
    };
    if out.is_none() {
        ex.bad(
            "model",
            "kernel",
            "expected 'uniform' | 'persistence p' | 'tabulated [row-major entries]'",
        );
    }
    out
}

fn parse_x_profile(ex: &mut Extract) -> Option<XProfile> {
    let toks = match ex.tokens("initial", "x_profile") {
        None => {
            ex.missing("initial", "x_profile");
            return None;
        }
        Some(t) => t,
    };
    let num = |t: &Token| -> Option<f64> {
        match t {
            Token::Word(w) => w.parse::<f64>().ok(),
            _ => None,
        }
    };
    let out = match toks.as_slice() {
        [Token::Word(k), c, s] if k == "gaussian" => num(c).zip(num(s)).map(|(center, sigma)| {
            XProfile::Gaussian {
                center,
                sigma,
                support: 4.0 * sigma,
            }
        }),
        [Token::Word(k), c, s, w] if k == "gaussian" => {
            match (num(c), num(s), num(w)) {
                (Some(center), Some(sigma), Some(support)) => Some(XProfile::Gaussian {
                    center,
                    sigma,
                    support,
                }),
                _ => None,
            }
        }
        [Token::Word(k), lo, hi] if k == "box" => {
            num(lo).zip(num(hi)).map(|(lo, hi)| XProfile::Box { lo, hi })
        }
        _ => None,
    };
    if out.is_none() {
        ex.bad(
            "initial",
            "x_profile",
            "expected 'gaussian center sigma [support]' or 'box lo hi'",
        );
    }
    out
}

fn parse_initial_signal(ex: &mut Extract) -> Option<InitialSignal> {
    let toks = match ex.tokens("initial", "s0") {
        None => {
            ex.missing("initial", "s0");
            return None;
        }
        Some(t) => t,
    };
    let out = match toks.as_slice() {
        [Token::Word(k)] if k == "elliptic" => Some(InitialSignal::Elliptic),
        [Token::Word(k), Token::Array(v)] if k == "uniform" => {
            Some(InitialSignal::Uniform(v.clone()))
        }
        [Token::Word(k), Token::Array(a), Token::Array(c), Token::Array(s)] if k == "gaussian" => {
            Some(InitialSignal::Gaussian {
                amplitude: a.clone(),
                center: c.clone(),
                sigma: s.clone(),
            })
        }
        _ => None,
    };
    if out.is_none() {
        ex.bad(
            "initial",
            "s0",
            "expected 'elliptic' | 'uniform [v...]' | 'gaussian [amp...] [center...] [sigma...]'",
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const GOOD: &str = r#"
# minimal valid scenario
[model]
t_e = 1.0
t_a = 4.0
g = saturating [1.0] [1.0]
lambda = saturating 1.0 -0.5
kernel = uniform
speeds = [-1.0, 1.0]
weights = [1.0, 1.0]
d = [1.0]
k = [1.0]
k0 = [1.0]
reaction = produce_degrade
length = 20.0
nx = 64
ny1 = 48
ny2 = 48

[growth]
phi = saturating_linear 1.0 1.0
psi = affine 2.0 1.0
lambda_fn = constant 0.0
pi = constant 0.0
omega = 1.0
sigma = 1.0
gamma = 1.0
c_y = 30.0
c_poly = 2.0
c_lambda = 1.5
c_div = 1.3
s_max = 5.0
dcdt_max = 10.0

[scenario]
mode = kinetic
signal = elliptic
horizon = 1.0
dt = 0.05
output_every = 4
seed = 7
workers = 1

[initial]
mass = 1.0
x_profile = gaussian 10.0 1.0
v_weights = [0.5, 0.5]
y_center = [0.0, 0.3]
y_sigma = [0.3, 0.3]
y_support = [1.2, 1.2]
s0 = elliptic
"#;

    #[test]
    fn good_config_loads_and_validates() {
        let loaded = load_config_str(GOOD, "testhash".into()).unwrap();
        assert_eq!(loaded.config.mode, RunMode::Kinetic);
        assert!(loaded.lambda_max >= 1.0);
        assert!(loaded
            .validation
            .regimes
            .contains(&crate::model::Regime::BoundedRate));
        // The state box contains the initial support with room to spare.
        assert!(loaded.config.state_box.hi[0] > 1.2);
    }

    #[test]
    fn negative_decay_is_positivity_error() {
        let text = GOOD.replace("k0 = [1.0]", "k0 = [-1.0]");
        let errs = load_config_str(&text, "h".into()).unwrap_err();
        assert!(
            errs.iter()
                .any(|e| e.code == ConfigErrorCode::Positivity && e.field == "model.k0[0]"),
            "{errs:?}"
        );
    }

    #[test]
    fn non_stochastic_kernel_is_kernel_error() {
        let text = GOOD.replace(
            "kernel = uniform",
            "kernel = tabulated [0.45, 0.45, 0.45, 0.45]",
        );
        let errs = load_config_str(&text, "h".into()).unwrap_err();
        assert!(
            errs.iter()
                .any(|e| e.code == ConfigErrorCode::KernelNormalization),
            "{errs:?}"
        );
    }

    #[test]
    fn wide_support_is_rejected() {
        let text = GOOD.replace(
            "x_profile = gaussian 10.0 1.0",
            "x_profile = gaussian 10.0 3.0",
        );
        let errs = load_config_str(&text, "h".into()).unwrap_err();
        assert!(
            errs.iter()
                .any(|e| e.code == ConfigErrorCode::SupportTooWide),
            "{errs:?}"
        );
    }

    #[test]
    fn missing_field_and_unknown_key_are_reported_together() {
        let text = GOOD
            .replace("t_e = 1.0", "typo_e = 1.0")
            .replace("seed = 7", "seed = 7\nfrobnicate = 3");
        let errs = load_config_str(&text, "h".into()).unwrap_err();
        assert!(errs
            .iter()
            .any(|e| e.code == ConfigErrorCode::MissingField && e.field == "model.t_e"));
        assert!(errs
            .iter()
            .any(|e| e.code == ConfigErrorCode::UnknownKey && e.field == "model.typo_e"));
        assert!(errs
            .iter()
            .any(|e| e.code == ConfigErrorCode::UnknownKey && e.field == "scenario.frobnicate"));
    }

    #[test]
    fn oversized_dt_is_inconsistent() {
        let text = GOOD.replace("dt = 0.05", "dt = 0.5");
        let errs = load_config_str(&text, "h".into()).unwrap_err();
        assert!(errs
            .iter()
            .any(|e| e.code == ConfigErrorCode::Inconsistent && e.field == "scenario.dt"));
    }

    #[test]
    fn elliptic_mode_requires_recomputed_s0() {
        let text = GOOD.replace("s0 = elliptic", "s0 = uniform [0.4]");
        let errs = load_config_str(&text, "h".into()).unwrap_err();
        assert!(errs
            .iter()
            .any(|e| e.code == ConfigErrorCode::Inconsistent && e.field == "initial.s0"));
    }
}
