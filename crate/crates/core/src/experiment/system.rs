use std::fmt;

use super::{ExperimentError, Result};
use crate::decode::Fusion;
use crate::model::HeadMode;

/// Speed factor for `+SL` without an explicit value.
pub const DEFAULT_SLOW_FACTOR: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Units {
    Char,
    /// English subwords; `None` takes the configured default count.
    Subword(Option<usize>),
}

/// Synthetic monolingual additions, as fractions of the training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MonoMix {
    F1,
    F2,
    F3,
    F4,
}

impl MonoMix {
    /// (Mandarin, English) utterances added per training utterance.
    pub fn fractions(self) -> (f64, f64) {
        match self {
            MonoMix::F1 => (0.5, 0.0),
            MonoMix::F2 => (0.0, 0.5),
            MonoMix::F3 => (0.5, 0.5),
            MonoMix::F4 => (2.5, 2.5),
        }
    }

    fn name(self) -> &'static str {
        match self {
            MonoMix::F1 => "F1",
            MonoMix::F2 => "F2",
            MonoMix::F3 => "F3",
            MonoMix::F4 => "F4",
        }
    }
}

/// Flag set behind a system name such as `E2ESW+3W+F3+SF`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemSpec {
    pub lid: bool,
    pub units: Units,
    pub slow: Option<f64>,
    pub perturb: bool,
    pub mono: Option<MonoMix>,
    pub fusion: Fusion,
}

impl SystemSpec {
    pub const BASELINE: SystemSpec = SystemSpec {
        lid: false,
        units: Units::Char,
        slow: None,
        perturb: false,
        mono: None,
        fusion: Fusion::None,
    };

    pub fn parse(name: &str) -> Result<Self> {
        let fail = |reason: &str| ExperimentError::SystemName {
            name: name.to_string(),
            reason: reason.to_string(),
        };
        let mut parts = name.trim().split('+');
        let base = parts.next().unwrap_or("");
        let mut spec = SystemSpec::BASELINE;
        let rest = base.strip_prefix("E2E").ok_or_else(|| fail("must start with E2E"))?;
        let mut seen = Vec::new();
        let mut apply = |tok: &str, spec: &mut SystemSpec| -> Result<()> {
            let (head, arg) = match tok.find('(') {
                Some(i) if tok.ends_with(')') => (&tok[..i], Some(&tok[i + 1..tok.len() - 1])),
                Some(_) => return Err(fail("unbalanced parenthesis")),
                None => (tok, None),
            };
            let key = match head {
                "F1" | "F2" | "F3" | "F4" => "F",
                "SF" | "CF" => "fusion",
                other => other,
            };
            if seen.contains(&key.to_string()) {
                return Err(fail(&format!("{head} given twice or conflicts with another flag")));
            }
            seen.push(key.to_string());
            let no_arg = |spec: &mut SystemSpec, f: &dyn Fn(&mut SystemSpec)| {
                if arg.is_some() {
                    return Err(fail(&format!("{head} takes no argument")));
                }
                f(spec);
                Ok(())
            };
            match head {
                "LD" => no_arg(spec, &|s| s.lid = true),
                "SW" => {
                    let n = arg
                        .map(|a| a.parse::<usize>().map_err(|_| fail("SW(n) needs a unit count")))
                        .transpose()?;
                    spec.units = Units::Subword(n);
                    Ok(())
                }
                "SL" => {
                    let f = match arg {
                        Some(a) => a.parse::<f64>().map_err(|_| fail("SL(f) needs a speed factor"))?,
                        None => DEFAULT_SLOW_FACTOR,
                    };
                    if !(0.5..1.0).contains(&f) {
                        return Err(fail("SL factor must be in [0.5, 1)"));
                    }
                    spec.slow = Some(f);
                    Ok(())
                }
                "3W" => no_arg(spec, &|s| s.perturb = true),
                "F1" => no_arg(spec, &|s| s.mono = Some(MonoMix::F1)),
                "F2" => no_arg(spec, &|s| s.mono = Some(MonoMix::F2)),
                "F3" => no_arg(spec, &|s| s.mono = Some(MonoMix::F3)),
                "F4" => no_arg(spec, &|s| s.mono = Some(MonoMix::F4)),
                "SF" => no_arg(spec, &|s| s.fusion = Fusion::Shallow),
                "CF" => no_arg(spec, &|s| s.fusion = Fusion::Cold),
                _ => Err(fail(&format!("unknown component {tok:?}"))),
            }
        };
        if !rest.is_empty() {
            apply(rest, &mut spec)?;
        }
        for tok in parts {
            if tok.is_empty() {
                return Err(fail("empty component"));
            }
            apply(tok, &mut spec)?;
        }
        if spec.lid && spec.fusion == Fusion::Cold {
            return Err(fail("language ID and cold fusion use different output heads"));
        }
        Ok(spec)
    }

    pub fn head(&self) -> HeadMode {
        match (self.fusion, self.lid) {
            (Fusion::Cold, _) => HeadMode::ColdFusion,
            (_, true) => HeadMode::Hierarchical,
            _ => HeadMode::Flat,
        }
    }

    pub fn needs_lm(&self) -> bool {
        self.fusion != Fusion::None
    }
}

impl fmt::Display for SystemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("E2E")?;
        if self.lid {
            f.write_str("LD")?;
        }
        match self.units {
            Units::Char => {}
            Units::Subword(n) => {
                f.write_str(if self.lid { "+SW" } else { "SW" })?;
                if let Some(n) = n {
                    write!(f, "({n})")?;
                }
            }
        }
        if let Some(s) = self.slow {
            write!(f, "+SL({s})")?;
        }
        if self.perturb {
            f.write_str("+3W")?;
        }
        if let Some(m) = self.mono {
            write!(f, "+{}", m.name())?;
        }
        match self.fusion {
            Fusion::None => {}
            Fusion::Shallow => f.write_str("+SF")?,
            Fusion::Cold => f.write_str("+CF")?,
        }
        Ok(())
    }
}
