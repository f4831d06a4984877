//! INI run configuration.
//!
//! Every key is checked against the section's known keys and every value is
//! parsed and validated before anything is solved.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chemo_limit::dynamics::Regime;
use chemo_limit::experiments::{DataFamily, GridSpec, SweepConfig, SweepKind};
use chemo_limit::initial::Profile;
use ini::Ini;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: PathBuf,
    /// `section.key`, or empty for file-level problems.
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.key.is_empty() {
            write!(f, "{}: {}", self.path.display(), self.message)
        } else {
            write!(f, "{}: `{}`: {}", self.path.display(), self.key, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

/// Initial signal choice for single runs.
#[derive(Debug, Clone, PartialEq)]
pub enum SignalInit {
    /// Whatever the limit system induces from `n₀`.
    Manifold,
    Profile(Profile<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub grid: GridSpec,
    pub t_end: f64,
    pub dt: f64,
    pub stride: usize,
    pub regime: Regime<f64>,
    pub eps: f64,
    pub tau: f64,
    pub n0: Profile<f64>,
    pub c0: SignalInit,
    pub w0: SignalInit,
    pub data: DataFamily,
    pub sweep: Option<SweepSection>,
    pub semigroup: SemigroupSection,
    pub out_dir: PathBuf,
    pub prefix: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSection {
    pub kind: Option<String>,
    pub eps: Vec<f64>,
    /// IDS only; defaults to `eps`.
    pub tau: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemigroupSection {
    pub coefficients: Vec<f64>,
    pub delta: f64,
    pub horizon: f64,
}

const KNOWN: &[(&str, &[&str])] = &[
    (
        "grid",
        &["kind", "length", "nodes", "lx", "ly", "nx", "ny", "dimension", "radius"],
    ),
    ("time", &["t_end", "dt", "stride"]),
    ("model", &["regime", "eps", "tau"]),
    (
        "initial",
        &[
            "n0",
            "n0_value",
            "n0_center",
            "n0_center2",
            "n0_width",
            "n0_mass",
            "n0_mean",
            "n0_amplitude",
            "n0_modes",
            "c0",
            "c0_value",
            "c0_center",
            "c0_center2",
            "c0_width",
            "c0_mass",
            "c0_mean",
            "c0_amplitude",
            "c0_modes",
            "w0",
            "w0_value",
            "w0_center",
            "w0_center2",
            "w0_width",
            "w0_mass",
            "w0_mean",
            "w0_amplitude",
            "w0_modes",
            "data",
            "amplitude",
            "seed",
        ],
    ),
    ("sweep", &["kind", "eps", "tau"]),
    ("semigroup", &["a", "delta", "horizon"]),
    ("output", &["dir", "prefix"]),
];

/// Key lookup with typed parsing and located errors.
struct Reader<'a> {
    path: &'a Path,
    values: BTreeMap<(String, String), String>,
}

impl<'a> Reader<'a> {
    fn err(&self, section: &str, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError {
            path: self.path.to_path_buf(),
            key: format!("{section}.{key}"),
            message: message.into(),
        }
    }

    fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.values
            .get(&(section.to_string(), key.to_string()))
            .map(|s| s.as_str())
    }

    fn opt<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>, ConfigError> {
        match self.raw(section, key) {
            None => Ok(None),
            Some(v) => v
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| self.err(section, key, format!("cannot parse `{v}`"))),
        }
    }

    fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<T, ConfigError> {
        self.opt(section, key)?
            .ok_or_else(|| self.err(section, key, "missing required key"))
    }

    fn or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T, ConfigError> {
        Ok(self.opt(section, key)?.unwrap_or(default))
    }

    fn positive(&self, section: &str, key: &str) -> Result<f64, ConfigError> {
        let v: f64 = self.get(section, key)?;
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(self.err(section, key, format!("must be positive, got {v}")))
        }
    }

    fn list(&self, section: &str, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        let Some(v) = self.raw(section, key) else {
            return Ok(None);
        };
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| self.err(section, key, format!("cannot parse `{}` in list", s.trim())))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    /// `x` or `x, y`.
    fn point(&self, section: &str, key: &str) -> Result<[f64; 2], ConfigError> {
        let v = self
            .list(section, key)?
            .ok_or_else(|| self.err(section, key, "missing required key"))?;
        match v[..] {
            [x] => Ok([x, 0.0]),
            [x, y] => Ok([x, y]),
            _ => Err(self.err(section, key, "expected `x` or `x, y`")),
        }
    }

    fn profile(&self, name: &str, seed: u64) -> Result<Option<Profile<f64>>, ConfigError> {
        let s = "initial";
        let key = |k: &str| format!("{name}_{k}");
        let Some(kind) = self.raw(s, name) else {
            return Ok(None);
        };
        let p = match kind.trim() {
            "constant" => Profile::Constant(self.get(s, &key("value"))?),
            "gaussian" => Profile::Gaussian {
                center: self.point(s, &key("center"))?,
                width: self.get(s, &key("width"))?,
                mass: self.get(s, &key("mass"))?,
            },
            "two-bump" => Profile::TwoBump {
                centers: [self.point(s, &key("center"))?, self.point(s, &key("center2"))?],
                width: self.get(s, &key("width"))?,
                mass: self.get(s, &key("mass"))?,
            },
            "random-cosine" => Profile::RandomCosine {
                mean: self.get(s, &key("mean"))?,
                amplitude: self.get(s, &key("amplitude"))?,
                modes: self.get(s, &key("modes"))?,
                seed,
            },
            "manifold" => return Ok(None),
            other => {
                return Err(self.err(
                    s,
                    name,
                    format!("unknown profile `{other}` (constant, gaussian, two-bump, random-cosine)"),
                ))
            }
        };
        p.validate().map_err(|e| self.err(s, name, e.to_string()))?;
        Ok(Some(p))
    }
}

impl RunConfig {
    /// Reads `path`; `seed` overrides `initial.seed`.
    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self, ConfigError> {
        let file_err = |message: String| ConfigError {
            path: path.to_path_buf(),
            key: String::new(),
            message,
        };
        let ini = Ini::load_from_file(path).map_err(|e| file_err(e.to_string()))?;
        let mut values = BTreeMap::new();
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(file_err(format!("key `{k}` outside of any section")));
                }
                continue;
            };
            let known = KNOWN
                .iter()
                .find(|(s, _)| *s == section)
                .ok_or_else(|| file_err(format!("unknown section [{section}]")))?
                .1;
            for (k, v) in props.iter() {
                if !known.contains(&k) {
                    return Err(ConfigError {
                        path: path.to_path_buf(),
                        key: format!("{section}.{k}"),
                        message: "unknown key".into(),
                    });
                }
                values.insert((section.to_string(), k.to_string()), v.to_string());
            }
        }
        Self::from_reader(&Reader { path, values }, seed)
    }

    fn from_reader(r: &Reader<'_>, seed: Option<u64>) -> Result<Self, ConfigError> {
        let grid = match r.get::<String>("grid", "kind")?.as_str() {
            "interval" => GridSpec::Interval {
                length: r.positive("grid", "length")?,
                nodes: r.get("grid", "nodes")?,
            },
            "rectangle" => GridSpec::Rectangle {
                lx: r.positive("grid", "lx")?,
                ly: r.positive("grid", "ly")?,
                nx: r.get("grid", "nx")?,
                ny: r.get("grid", "ny")?,
            },
            "radial" => GridSpec::RadialBall {
                dimension: r.get("grid", "dimension")?,
                radius: r.positive("grid", "radius")?,
                nodes: r.get("grid", "nodes")?,
            },
            other => {
                return Err(r.err(
                    "grid",
                    "kind",
                    format!("unknown grid `{other}` (interval, rectangle, radial)"),
                ))
            }
        };
        grid.build().map_err(|e| r.err("grid", "kind", e.to_string()))?;

        let t_end = r.positive("time", "t_end")?;
        let dt = r.positive("time", "dt")?;
        let steps = t_end / dt;
        if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
            return Err(r.err("time", "dt", format!("t_end/dt = {steps} is not an integer")));
        }
        let stride: usize = r.or("time", "stride", 10)?;
        if stride == 0 {
            return Err(r.err("time", "stride", "must be at least 1"));
        }

        let tau = match r.raw("model", "tau") {
            Some(_) => r.positive("model", "tau")?,
            None => 1.0,
        };
        let eps = match r.raw("model", "eps") {
            Some(_) => r.positive("model", "eps")?,
            None => 0.1,
        };
        let regime = match r.or("model", "regime", "full".to_string())?.as_str() {
            "full" => Regime::Full { eps, tau },
            "pes" => Regime::PesLimit { tau },
            "ids" => Regime::IdsLimit,
            other => return Err(r.err("model", "regime", format!("unknown regime `{other}` (full, pes, ids)"))),
        };

        let seed = match seed {
            Some(s) => s,
            None => r.or("initial", "seed", 0u64)?,
        };
        let n0 = r
            .profile("n0", seed)?
            .ok_or_else(|| r.err("initial", "n0", "missing required profile"))?;
        let signal = |name: &str, offset: u64| -> Result<SignalInit, ConfigError> {
            Ok(r.profile(name, seed.wrapping_add(offset))?
                .map_or(SignalInit::Manifold, SignalInit::Profile))
        };
        let c0 = signal("c0", 1)?;
        let w0 = signal("w0", 2)?;
        let data = match r.or("initial", "data", "well-prepared".to_string())?.as_str() {
            "well-prepared" => DataFamily::WellPrepared,
            "ill-prepared" => match (&c0, &w0) {
                (SignalInit::Profile(c), SignalInit::Profile(w)) => DataFamily::IllPrepared {
                    c0: c.clone(),
                    w0: w.clone(),
                },
                _ => return Err(r.err("initial", "data", "ill-prepared data needs explicit c0 and w0 profiles")),
            },
            "eps-prepared" => DataFamily::EpsPrepared {
                amplitude: r.or("initial", "amplitude", 1.0)?,
            },
            other => {
                return Err(r.err(
                    "initial",
                    "data",
                    format!("unknown family `{other}` (well-prepared, ill-prepared, eps-prepared)"),
                ))
            }
        };

        let sweep = match r.list("sweep", "eps")? {
            Some(eps) => Some(SweepSection {
                kind: r.opt("sweep", "kind")?,
                eps,
                tau: r.list("sweep", "tau")?,
            }),
            None => None,
        };
        let semigroup = SemigroupSection {
            coefficients: r.list("semigroup", "a")?.unwrap_or_else(|| vec![1.0, 0.1]),
            delta: match r.raw("semigroup", "delta") {
                Some(_) => r.positive("semigroup", "delta")?,
                None => 1e-2,
            },
            horizon: match r.raw("semigroup", "horizon") {
                Some(_) => r.positive("semigroup", "horizon")?,
                None => 40.0,
            },
        };
        if let Some(a) = semigroup.coefficients.iter().find(|a| !(**a > 0.0)) {
            return Err(r.err("semigroup", "a", format!("coefficients must be positive, got {a}")));
        }

        Ok(RunConfig {
            grid,
            t_end,
            dt,
            stride,
            regime,
            eps,
            tau,
            n0,
            c0,
            w0,
            data,
            sweep,
            semigroup,
            out_dir: r.or("output", "dir", PathBuf::from("."))?,
            prefix: r.or("output", "prefix", "run".to_string())?,
        })
    }

    /// Sweep of the requested kind; errors name the `[sweep]` key at fault.
    pub fn sweep_config(&self, path: &Path, want: &str) -> Result<SweepConfig, ConfigError> {
        let err = |key: &str, message: String| ConfigError {
            path: path.to_path_buf(),
            key: format!("sweep.{key}"),
            message,
        };
        let sweep = self
            .sweep
            .as_ref()
            .ok_or_else(|| err("eps", "missing required key".into()))?;
        if let Some(kind) = &sweep.kind {
            if kind != want {
                return Err(err(
                    "kind",
                    format!("this command runs `{want}` sweeps, config says `{kind}`"),
                ));
            }
        }
        let kind = match want {
            "pes" => {
                if sweep.tau.is_some() {
                    return Err(err("tau", "pes sweeps take tau from model.tau".into()));
                }
                SweepKind::Pes {
                    tau: self.tau,
                    eps: sweep.eps.clone(),
                }
            }
            _ => {
                let taus = sweep.tau.clone().unwrap_or_else(|| sweep.eps.clone());
                if taus.len() != sweep.eps.len() {
                    return Err(err(
                        "tau",
                        format!("{} values for {} eps values", taus.len(), sweep.eps.len()),
                    ));
                }
                SweepKind::Ids {
                    kappas: sweep.eps.iter().copied().zip(taus).collect(),
                }
            }
        };
        Ok(SweepConfig {
            kind,
            grid: self.grid,
            t_end: self.t_end,
            dt: self.dt,
            n0: self.n0.clone(),
            data: self.data.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn load(text: &str) -> Result<RunConfig, ConfigError> {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        RunConfig::load(f.path(), None)
    }

    const BASE: &str = "[grid]\nkind = interval\nlength = 1\nnodes = 33\n\
                        [time]\nt_end = 0.1\ndt = 0.01\n\
                        [initial]\nn0 = gaussian\nn0_center = 0.4\nn0_width = 0.1\nn0_mass = 0.5\n";

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = load(BASE).unwrap();
        assert_eq!(cfg.regime, Regime::Full { eps: 0.1, tau: 1.0 });
        assert_eq!(cfg.stride, 10);
        assert_eq!(cfg.c0, SignalInit::Manifold);
        assert_eq!(cfg.data, DataFamily::WellPrepared);
        assert_eq!(cfg.prefix, "run");
        assert!(cfg.sweep.is_none());
    }

    #[test]
    fn inline_comments_are_stripped() {
        let cfg = load(&BASE.replace("nodes = 33", "nodes = 33   # grid points")).unwrap();
        assert!(matches!(cfg.grid, GridSpec::Interval { nodes: 33, .. }));
    }

    #[test]
    fn errors_name_the_key() {
        let e = load(&format!("{BASE}[time]\nstride = zero\n")).unwrap_err();
        assert_eq!(e.key, "time.stride");
        let e = load(&BASE.replace("nodes = 33", "nodez = 33")).unwrap_err();
        assert_eq!(e.key, "grid.nodez");
        let e = load(&BASE.replace("dt = 0.01", "dt = 0.03")).unwrap_err();
        assert_eq!(e.key, "time.dt");
        let e = load(&BASE.replace("n0_width = 0.1", "n0_width = -1")).unwrap_err();
        assert_eq!(e.key, "initial.n0");
        let e = load(&format!("{BASE}[initial]\ndata = ill-prepared\n")).unwrap_err();
        assert_eq!(e.key, "initial.data");
        let e = RunConfig::load(Path::new("/nonexistent/x.cfg"), None).unwrap_err();
        assert!(e.to_string().contains("/nonexistent/x.cfg"));
    }

    #[test]
    fn sweeps_and_profiles_parse() {
        let text = format!(
            "{BASE}c0 = constant\nc0_value = 0\nw0 = random-cosine\nw0_mean = 1\nw0_amplitude = 0.5\n\
             w0_modes = 3\ndata = ill-prepared\nseed = 5\n\
             [sweep]\neps = 0.1, 0.03, 0.01, 0.003\n"
        );
        let cfg = load(&text).unwrap();
        let path = Path::new("x.cfg");
        let pes = cfg.sweep_config(path, "pes").unwrap();
        assert!(matches!(pes.kind, SweepKind::Pes { tau, ref eps } if tau == 1.0 && eps.len() == 4));
        match &pes.data {
            DataFamily::IllPrepared {
                w0: Profile::RandomCosine { seed, .. },
                ..
            } => assert_eq!(*seed, 7),
            other => panic!("{other:?}"),
        }
        let ids = cfg.sweep_config(path, "ids").unwrap();
        assert!(matches!(ids.kind, SweepKind::Ids { ref kappas } if kappas[1] == (0.03, 0.03)));

        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        let reseeded = RunConfig::load(f.path(), Some(100)).unwrap();
        assert!(matches!(
            reseeded.w0,
            SignalInit::Profile(Profile::RandomCosine { seed: 102, .. })
        ));

        let typed = load(&format!("{text}kind = ids\n")).unwrap();
        assert_eq!(typed.sweep_config(path, "pes").unwrap_err().key, "sweep.kind");
    }
}
