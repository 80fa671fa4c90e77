//! Encoder configuration and its flat `key = value` text form.
//!
//! ```text
//! # comments start with '#'
//! grid = 64x64            # token grid, rows x cols
//! d = 64                  # model width
//! heads = 4
//! window = 14             # local window side
//! layout = local,local,global
//! density = 0.5           # A-shape density r, one value or one per block
//! keep_fraction = 0.5     # MLP keep fraction, one value or one per block
//! stripe_g = 4
//! stripe_variant = full   # full | no_interleave | no_sort
//! granularity = zgroup    # zgroup | token
//! group_size = 4
//! bypass = identity       # identity | layernorm
//! local_tile = 32
//! global_tile = 128
//! mlp_ratio = 4
//! seed = 0
//! ```

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::attention::{GLOBAL_TILE, LOCAL_TILE};
use crate::error::{Error, Result};
use crate::grid::GridShape;
use crate::mlp::BypassMode;
use crate::saliency::{Granularity, OrderingConfig};
use crate::stripesort::{StripeConfig, StripeVariant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Attention confined to non-overlapping windows.
    Local,
    /// Attention over the whole grid.
    Global,
}

impl BlockKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BlockKind::Local => "local",
            BlockKind::Global => "global",
        }
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(BlockKind::Local),
            "global" => Ok(BlockKind::Global),
            other => Err(Error::config(format!(
                "unknown block kind {other:?} (expected local|global)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub grid: GridShape,
    pub d: usize,
    pub heads: usize,
    pub window: usize,
    pub layout: Vec<BlockKind>,
    /// A-shape density per block.
    pub density: Vec<f64>,
    /// MLP keep fraction per block.
    pub keep_fraction: Vec<f64>,
    pub stripe: StripeConfig,
    pub ordering: OrderingConfig,
    pub bypass: BypassMode,
    pub local_tile: usize,
    pub global_tile: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let layout = vec![BlockKind::Local, BlockKind::Local, BlockKind::Global];
        EncoderConfig {
            grid: GridShape { h: 64, w: 64 },
            d: 64,
            heads: 4,
            window: 14,
            density: vec![0.5; layout.len()],
            keep_fraction: vec![0.5; layout.len()],
            layout,
            stripe: StripeConfig::default(),
            ordering: OrderingConfig::default(),
            bypass: BypassMode::Identity,
            local_tile: LOCAL_TILE,
            global_tile: GLOBAL_TILE,
            mlp_ratio: 4,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn blocks(&self) -> usize {
        self.layout.len()
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.d * self.mlp_ratio
    }

    /// Side of the square attention region of a block.
    pub fn attention_side(&self, kind: BlockKind) -> usize {
        match kind {
            BlockKind::Local => self.window,
            BlockKind::Global => self.grid.h,
        }
    }

    /// Same config with every block at density `r`.
    pub fn with_density(&self, r: f64) -> Self {
        EncoderConfig {
            density: vec![r; self.blocks()],
            ..self.clone()
        }
    }

    pub fn with_keep_fraction(&self, k: f64) -> Self {
        EncoderConfig {
            keep_fraction: vec![k; self.blocks()],
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(msg));
        if self.layout.is_empty() {
            return fail("layout has no blocks".into());
        }
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return fail(format!(
                "d = {} is not divisible by heads = {}",
                self.d, self.heads
            ));
        }
        if self.window == 0 || self.local_tile == 0 || self.global_tile == 0 || self.mlp_ratio == 0 {
            return fail("window, tile sizes and mlp_ratio must be positive".into());
        }
        if self.density.len() != self.blocks() || self.keep_fraction.len() != self.blocks() {
            return fail(format!(
                "{} blocks but {} densities and {} keep fractions",
                self.blocks(),
                self.density.len(),
                self.keep_fraction.len()
            ));
        }
        if let Some(r) = self.density.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return fail(format!("density {r} outside [0, 1]"));
        }
        if let Some(k) = self.keep_fraction.iter().find(|k| !(**k > 0.0 && **k <= 1.0)) {
            return fail(format!("keep_fraction {k} outside (0, 1]"));
        }
        if self.stripe.g == 0 || self.ordering.group_size == 0 {
            return fail("stripe_g and group_size must be positive".into());
        }
        let check_region = |what: &str, n: usize| -> Result<()> {
            if !n.is_multiple_of(self.stripe.g) {
                return fail(format!(
                    "{what} has {n} tokens, not divisible by stripe_g = {}",
                    self.stripe.g
                ));
            }
            if self.ordering.granularity == Granularity::ZGroup && !n.is_multiple_of(self.ordering.group_size)
            {
                return fail(format!(
                    "{what} has {n} tokens, not divisible by group_size = {}",
                    self.ordering.group_size
                ));
            }
            Ok(())
        };
        if self.layout.contains(&BlockKind::Local) {
            check_region("a local window", self.window * self.window)?;
        }
        if self.layout.contains(&BlockKind::Global) {
            if self.grid.h != self.grid.w {
                return fail(format!(
                    "global blocks need a square grid for 2D relative bias, got {}x{}",
                    self.grid.h, self.grid.w
                ));
            }
            check_region("the global grid", self.grid.n())?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = EncoderConfig::default();
        let mut density: Option<Vec<f64>> = None;
        let mut keep: Option<Vec<f64>> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: String| Error::config(format!("line {}: {key}: {e}", lineno + 1));
            fn num<T: FromStr>(v: &str) -> std::result::Result<T, String>
            where
                T::Err: std::fmt::Display,
            {
                v.parse::<T>().map_err(|e| format!("{v:?}: {e}"))
            }
            fn list(v: &str) -> std::result::Result<Vec<f64>, String> {
                v.split(',').map(|s| num::<f64>(s.trim())).collect()
            }
            match key {
                "grid" => {
                    let (h, w) = value.split_once('x').ok_or_else(|| bad("expected HxW".into()))?;
                    cfg.grid = GridShape::new(num(h.trim()).map_err(bad)?, num(w.trim()).map_err(bad)?)
                        .map_err(|e| bad(e.to_string()))?;
                }
                "d" => cfg.d = num(value).map_err(bad)?,
                "heads" => cfg.heads = num(value).map_err(bad)?,
                "window" => cfg.window = num(value).map_err(bad)?,
                "layout" => {
                    cfg.layout = value
                        .split(',')
                        .map(|s| s.trim().parse())
                        .collect::<Result<_>>()
                        .map_err(|e| bad(e.to_string()))?
                }
                "density" => density = Some(list(value).map_err(bad)?),
                "keep_fraction" => keep = Some(list(value).map_err(bad)?),
                "stripe_g" => cfg.stripe.g = num(value).map_err(bad)?,
                "stripe_variant" => {
                    cfg.stripe.variant = StripeVariant::from_str(value).map_err(|e| bad(e.to_string()))?
                }
                "granularity" => {
                    cfg.ordering.granularity = Granularity::from_str(value).map_err(|e| bad(e.to_string()))?
                }
                "group_size" => cfg.ordering.group_size = num(value).map_err(bad)?,
                "bypass" => cfg.bypass = BypassMode::from_str(value).map_err(|e| bad(e.to_string()))?,
                "local_tile" => cfg.local_tile = num(value).map_err(bad)?,
                "global_tile" => cfg.global_tile = num(value).map_err(bad)?,
                "mlp_ratio" => cfg.mlp_ratio = num(value).map_err(bad)?,
                "seed" => cfg.seed = num(value).map_err(bad)?,
                other => {
                    return Err(Error::config(format!(
                        "line {}: unknown key {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        let blocks = cfg.blocks();
        let per_block = |v: Option<Vec<f64>>, default: f64, what: &str| -> Result<Vec<f64>> {
            match v {
                None => Ok(vec![default; blocks]),
                Some(v) if v.len() == 1 => Ok(vec![v[0]; blocks]),
                Some(v) if v.len() == blocks => Ok(v),
                Some(v) => Err(Error::config(format!(
                    "{what} lists {} values for {blocks} blocks",
                    v.len()
                ))),
            }
        };
        let default = EncoderConfig::default();
        cfg.density = per_block(density, default.density[0], "density")?;
        cfg.keep_fraction = per_block(keep, default.keep_fraction[0], "keep_fraction")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "grid = {}x{}", self.grid.h, self.grid.w);
        let _ = writeln!(s, "d = {}", self.d);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "window = {}", self.window);
        let layout: Vec<&str> = self.layout.iter().map(BlockKind::as_str).collect();
        let _ = writeln!(s, "layout = {}", layout.join(","));
        let _ = writeln!(s, "density = {}", join(&self.density));
        let _ = writeln!(s, "keep_fraction = {}", join(&self.keep_fraction));
        let _ = writeln!(s, "stripe_g = {}", self.stripe.g);
        let variant = match self.stripe.variant {
            StripeVariant::Full => "full",
            StripeVariant::NoInterleave => "no_interleave",
            StripeVariant::NoSort => "no_sort",
        };
        let _ = writeln!(s, "stripe_variant = {variant}");
        let granularity = match self.ordering.granularity {
            Granularity::Token => "token",
            Granularity::ZGroup => "zgroup",
        };
        let _ = writeln!(s, "granularity = {granularity}");
        let _ = writeln!(s, "group_size = {}", self.ordering.group_size);
        let bypass = match self.bypass {
            BypassMode::Identity => "identity",
            BypassMode::LayerNorm => "layernorm",
        };
        let _ = writeln!(s, "bypass = {bypass}");
        let _ = writeln!(s, "local_tile = {}", self.local_tile);
        let _ = writeln!(s, "global_tile = {}", self.global_tile);
        let _ = writeln!(s, "mlp_ratio = {}", self.mlp_ratio);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let cfg = EncoderConfig::default();
        cfg.validate().unwrap();
        assert_eq!(EncoderConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn parses_per_block_lists_and_comments() {
        let cfg = EncoderConfig::parse(
            "grid = 16x16\nd=32 # width\nheads = 2\nwindow = 8\nlayout = local, global\n\
             density = 0.25, 1\nkeep_fraction = 0.5\nstripe_variant = no_sort\ngranularity = token\n",
        )
        .unwrap();
        assert_eq!(cfg.grid, GridShape { h: 16, w: 16 });
        assert_eq!(cfg.layout, vec![BlockKind::Local, BlockKind::Global]);
        assert_eq!(cfg.density, vec![0.25, 1.0]);
        assert_eq!(cfg.keep_fraction, vec![0.5, 0.5]);
        assert_eq!(cfg.stripe.variant, StripeVariant::NoSort);
        assert_eq!(cfg.ordering.granularity, Granularity::Token);
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            "colour = red",
            "d = 30\nheads = 4",
            "grid = 16x12\nlayout = global",
            "density = 0.5, 0.5",
            "keep_fraction = 0",
            "window = 5",
            "layout = local,sideways",
            "d",
        ] {
            assert!(EncoderConfig::parse(text).is_err(), "{text:?}");
        }
    }
}
