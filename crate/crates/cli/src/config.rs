use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use weighted_cd::model::{fnv1a, AnsatzKind, IsingClass};

use crate::CliError;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "WCD_OUT";
pub const DEFAULT_OUT: &str = "wcd_out";
pub const MAX_K: usize = 5;

pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Parameters shared by every command. Loadable from JSON; flags override file values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub class: IsingClass,
    pub width: usize,
    pub height: usize,
    /// Seed of the first instance; batches use `seed..seed + count`.
    pub seed: u64,
    pub count: usize,
    #[serde(rename = "K", alias = "k")]
    pub k: Vec<usize>,
    pub ansatz: AnsatzKind,
    /// Number of λ grid points.
    pub grid: usize,
    /// Driving times.
    pub td: Vec<f64>,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub cache: bool,
    /// Bench ladder override; empty means the per-K default.
    pub sizes: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            class: IsingClass::Ferro,
            width: 3,
            height: 3,
            seed: 1,
            count: 1,
            k: (1..=MAX_K).collect(),
            ansatz: AnsatzKind::OneBody,
            grid: weighted_cd::protocol::DEFAULT_GRID_POINTS,
            td: vec![0.01],
            out: default_out_root(),
            threads: None,
            cache: true,
            sizes: Vec::new(),
        }
    }
}

/// Flag values that replace config-file entries when present.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub class: Option<IsingClass>,
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub seed: Option<u64>,
    pub count: Option<usize>,
    pub k: Option<Vec<usize>>,
    pub ansatz: Option<AnsatzKind>,
    pub grid: Option<usize>,
    pub td: Option<Vec<f64>>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub cache: Option<bool>,
    pub sizes: Option<Vec<usize>>,
}

#[derive(Serialize)]
struct HashView<'a> {
    class: IsingClass,
    width: usize,
    height: usize,
    seed: u64,
    count: usize,
    k: &'a [usize],
    ansatz: AnsatzKind,
    grid: usize,
    td: &'a [f64],
    sizes: &'a [usize],
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("bad config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Config file (or defaults), then overrides, then validation.
    pub fn resolve(file: Option<&Path>, ov: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(ov);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, ov: &Overrides) {
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = &ov.$f { self.$f = v.clone(); } )* };
        }
        take!(class, width, height, seed, count, k, ansatz, grid, td, out, cache, sizes);
        if ov.threads.is_some() {
            self.threads = ov.threads;
        }
    }

    pub fn validate(&mut self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.width == 0 || self.height == 0 {
            return bad(format!("lattice must be at least 1x1, got {}x{}", self.width, self.height));
        }
        if self.count == 0 {
            return bad("count must be at least 1".into());
        }
        if self.k.is_empty() {
            return bad("K list is empty".into());
        }
        if let Some(&k) = self.k.iter().find(|&&k| k == 0 || k > MAX_K) {
            return bad(format!("K must be in 1..={MAX_K}, got {k}"));
        }
        self.k.sort_unstable();
        self.k.dedup();
        if self.grid < 2 {
            return bad(format!("grid needs at least 2 points, got {}", self.grid));
        }
        if self.td.is_empty() || self.td.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return bad(format!("driving times must be positive, got {:?}", self.td));
        }
        if self.threads == Some(0) {
            return bad("threads must be at least 1".into());
        }
        if self.sizes.iter().any(|&n| n < 2) {
            return bad("bench sizes must be at least 2".into());
        }
        Ok(())
    }

    pub fn nspins(&self) -> usize {
        self.width * self.height
    }

    pub fn kmax(&self) -> usize {
        self.k.iter().copied().max().unwrap_or(1)
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.count as u64).map(move |i| self.seed + i)
    }

    /// Hash of the fields that determine results; output paths, threads and caching are excluded.
    pub fn hash(&self) -> String {
        let view = HashView {
            class: self.class,
            width: self.width,
            height: self.height,
            seed: self.seed,
            count: self.count,
            k: &self.k,
            ansatz: self.ansatz,
            grid: self.grid,
            td: &self.td,
            sizes: &self.sizes,
        };
        let text = serde_json::to_string(&view).expect("plain data serializes");
        format!("{:016x}", fnv1a(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let e = RunConfig::from_json(r#"{"width": 3, "colour": 1}"#).unwrap_err();
        assert!(matches!(e, CliError::Config(_)));
    }

    #[test]
    fn flags_override_file() {
        let mut cfg = RunConfig::from_json(r#"{"width": 4, "K": [2, 1, 2], "td": [0.1]}"#).unwrap();
        cfg.apply(&Overrides { width: Some(2), ..Default::default() });
        cfg.validate().unwrap();
        assert_eq!((cfg.width, cfg.height), (2, 3));
        assert_eq!(cfg.k, vec![1, 2]);
        assert_eq!(cfg.td, vec![0.1]);
    }

    #[test]
    fn zero_k_is_usage_error() {
        let ov = Overrides { k: Some(vec![0]), ..Default::default() };
        assert!(matches!(RunConfig::resolve(None, &ov), Err(CliError::Config(_))));
    }

    #[test]
    fn hash_ignores_plumbing() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out = "elsewhere".into();
        b.threads = Some(3);
        b.cache = false;
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }
}
