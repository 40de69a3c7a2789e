use std::collections::HashMap;
use std::time::Duration;

use super::NodeAddr;

/// Symmetric round-trip times between host pairs, used only by the
/// in-memory backend and by clients ranking replica locations.
///
/// File format, one pair per line, `#` starts a comment:
///
/// ```text
/// chi1  gsfc1  16
/// chi1  cit1   55
/// ```
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinkProfile {
    rtts: HashMap<(String, String), Duration>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("link profile line {line}: {reason}")]
pub struct ProfileParseError {
    pub line: usize,
    pub reason: String,
}

fn key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl LinkProfile {
    pub fn new() -> Self {
        Self::default()
    }

    /// Set the round trip between two hosts. Negative or non-finite values
    /// are clamped to zero.
    pub fn set(&mut self, a: &str, b: &str, rtt_ms: f64) {
        let ms = if rtt_ms.is_finite() && rtt_ms > 0.0 { rtt_ms } else { 0.0 };
        self.rtts.insert(key(a, b), Duration::from_secs_f64(ms / 1000.0));
    }

    pub fn with(mut self, a: &str, b: &str, rtt_ms: f64) -> Self {
        self.set(a, b, rtt_ms);
        self
    }

    /// Round trip between two endpoints; zero for self links and unlisted pairs.
    pub fn rtt(&self, a: &NodeAddr, b: &NodeAddr) -> Duration {
        self.rtt_hosts(a.host(), b.host())
    }

    pub fn rtt_hosts(&self, a: &str, b: &str) -> Duration {
        if a == b {
            return Duration::ZERO;
        }
        self.rtts.get(&key(a, b)).copied().unwrap_or(Duration::ZERO)
    }

    pub fn is_empty(&self) -> bool {
        self.rtts.is_empty()
    }

    pub fn parse(text: &str) -> Result<Self, ProfileParseError> {
        let mut p = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let err = |reason: String| ProfileParseError { line: i + 1, reason };
            if fields.len() != 3 {
                return Err(err(format!("expected `host host rtt_ms`, got {} fields", fields.len())));
            }
            let ms: f64 = fields[2].parse().map_err(|_| err(format!("bad rtt `{}`", fields[2])))?;
            if !(ms.is_finite() && ms >= 0.0) {
                return Err(err(format!("rtt must be a non-negative number, got {ms}")));
            }
            p.set(fields[0], fields[1], ms);
        }
        Ok(p)
    }

    pub fn to_text(&self) -> String {
        let mut lines: Vec<String> = self
            .rtts
            .iter()
            .map(|((a, b), d)| format!("{a} {b} {}", d.as_secs_f64() * 1000.0))
            .collect();
        lines.sort();
        lines.join("\n") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_and_self_zero() {
        let p = LinkProfile::new().with("chi", "gsfc", 16.0);
        let (a, b) = (NodeAddr::new("chi:1"), NodeAddr::new("gsfc:2"));
        assert_eq!(p.rtt(&a, &b), Duration::from_millis(16));
        assert_eq!(p.rtt(&b, &a), Duration::from_millis(16));
        assert_eq!(p.rtt(&a, &a), Duration::ZERO);
    }

    #[test]
    fn parse_round_trip_and_errors() {
        let p = LinkProfile::parse("# wan\nchi gsfc 16\nchi cit 55 # west\n\ngsfc cit 71\n").unwrap();
        assert_eq!(p.rtt_hosts("cit", "gsfc"), Duration::from_millis(71));
        assert_eq!(LinkProfile::parse(&p.to_text()).unwrap(), p);
        assert_eq!(LinkProfile::parse("a b -1").unwrap_err().line, 1);
        assert!(LinkProfile::parse("a b").is_err());
    }
}
