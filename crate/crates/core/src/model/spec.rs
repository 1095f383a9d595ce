use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Ffn,
    Mdm,
}

impl BlockKind {
    pub fn letter(self) -> char {
        match self {
            BlockKind::Ffn => 'F',
            BlockKind::Mdm => 'M',
        }
    }
}

/// Architecture description of one model variant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub name: String,
    pub channels: [usize; 4],
    pub stage_blocks: [Vec<BlockKind>; 4],
    pub num_classes: usize,
    pub input_resolution: usize,
}

/// Stage block order for `n_ffn` FFN and `n_mdm` MDM blocks: alternate
/// starting with MDM while both kinds remain, then append the remainder.
pub fn interleave(n_ffn: usize, n_mdm: usize) -> Vec<BlockKind> {
    let mut out = Vec::with_capacity(n_ffn + n_mdm);
    let (mut f, mut m) = (n_ffn, n_mdm);
    while f + m > 0 {
        if m > 0 {
            out.push(BlockKind::Mdm);
            m -= 1;
        }
        if f > 0 {
            out.push(BlockKind::Ffn);
            f -= 1;
        }
    }
    out
}

fn ffn(n: usize) -> Vec<BlockKind> {
    vec![BlockKind::Ffn; n]
}

impl ModelSpec {
    pub const PRESETS: [&'static str; 4] = ["S", "M", "B", "Nano"];

    pub fn small() -> Self {
        Self {
            name: "S".into(),
            channels: [32, 64, 144, 288],
            stage_blocks: [ffn(4), ffn(4), ffn(12), interleave(4, 4)],
            num_classes: 1000,
            input_resolution: 224,
        }
    }

    pub fn medium() -> Self {
        Self {
            name: "M".into(),
            channels: [48, 96, 224, 448],
            stage_blocks: [ffn(4), ffn(4), ffn(12), interleave(2, 4)],
            num_classes: 1000,
            input_resolution: 224,
        }
    }

    pub fn base() -> Self {
        Self {
            name: "B".into(),
            channels: [64, 128, 320, 512],
            stage_blocks: [ffn(4), ffn(4), ffn(12), interleave(2, 4)],
            num_classes: 1000,
            input_resolution: 224,
        }
    }

    /// Desk-scale variant for 32x32, 10-class toy data.
    pub fn nano() -> Self {
        Self {
            name: "Nano".into(),
            channels: [16, 32, 64, 128],
            stage_blocks: [ffn(2), ffn(2), ffn(4), interleave(1, 2)],
            num_classes: 10,
            input_resolution: 32,
        }
    }

    /// Looks up a preset by (case-insensitive) name.
    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "s" | "small" => Ok(Self::small()),
            "m" | "medium" => Ok(Self::medium()),
            "b" | "base" => Ok(Self::base()),
            "nano" => Ok(Self::nano()),
            _ => Err(Error::invalid(
                "preset",
                format!("unknown preset `{name}` (expected one of S, M, B, Nano)"),
            )),
        }
    }

    /// Checks every structural invariant, reporting all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.name.trim().is_empty() {
            errs.push("name must not be empty".to_string());
        }
        for (i, &c) in self.channels.iter().enumerate() {
            if c == 0 {
                errs.push(format!("stage {} has zero channels", i + 1));
            }
        }
        if self.channels[0] % 2 != 0 {
            errs.push(format!("stage 1 channels ({}) must be even", self.channels[0]));
        }
        for (i, blocks) in self.stage_blocks.iter().enumerate() {
            if blocks.is_empty() {
                errs.push(format!("stage {} has no blocks", i + 1));
            }
            if i < 3 && blocks.contains(&BlockKind::Mdm) {
                errs.push(format!("stage {} contains an MDM block; only stage 4 may", i + 1));
            }
        }
        if self.num_classes == 0 {
            errs.push("num_classes must be positive".to_string());
        }
        if self.input_resolution == 0 || self.input_resolution % 32 != 0 {
            errs.push(format!(
                "input_resolution ({}) must be a positive multiple of 32",
                self.input_resolution
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(errs))
        }
    }

    /// Native side length of the stage-4 grid.
    pub fn final_grid(&self) -> usize {
        self.input_resolution / 32
    }

    /// `key = value` lines; the inverse of [`ModelSpec::from_text`].
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        let mut s = format!("name = {}\nchannels = {}\n", self.name, join(&self.channels));
        for (i, blocks) in self.stage_blocks.iter().enumerate() {
            let kinds: String = blocks.iter().map(|b| b.letter()).collect();
            s += &format!("stage{} = {kinds}\n", i + 1);
        }
        s += &format!(
            "num_classes = {}\nresolution = {}\n",
            self.num_classes, self.input_resolution
        );
        s
    }

    /// Parses a spec from `key = value` pairs. `preset` (if given) supplies
    /// defaults that the remaining keys override.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let pairs: Vec<(&str, &str)> = pairs.into_iter().collect();
        let mut spec = match pairs.iter().find(|(k, _)| *k == "preset") {
            Some((_, v)) => Self::preset(v)?,
            None => Self {
                name: "custom".into(),
                channels: [0; 4],
                stage_blocks: Default::default(),
                num_classes: 0,
                input_resolution: 0,
            },
        };
        let bad = |k: &str, v: &str| Error::invalid("model spec", format!("bad value `{v}` for `{k}`"));
        for &(k, v) in &pairs {
            match k {
                "preset" => {}
                "name" => spec.name = v.to_string(),
                "channels" => {
                    let c: Vec<usize> = v
                        .split(',')
                        .map(|p| p.trim().parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad(k, v))?;
                    spec.channels = c.try_into().map_err(|_| bad(k, v))?;
                }
                "stage1" | "stage2" | "stage3" | "stage4" => {
                    let i = (k.as_bytes()[5] - b'1') as usize;
                    spec.stage_blocks[i] = parse_blocks(v).ok_or_else(|| bad(k, v))?;
                }
                "num_classes" => spec.num_classes = v.parse().map_err(|_| bad(k, v))?,
                "resolution" => spec.input_resolution = v.parse().map_err(|_| bad(k, v))?,
                _ => {
                    return Err(Error::invalid("model spec", format!("unknown key `{k}`")));
                }
            }
        }
        Ok(spec)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid("model spec", format!("expected key = value, got `{line}`")))?;
            pairs.push((k.trim(), v.trim()));
        }
        Self::from_pairs(pairs)
    }
}

/// Parses `FFMF`-style strings, or counts such as `2F+4M` (which interleave).
fn parse_blocks(v: &str) -> Option<Vec<BlockKind>> {
    let v = v.trim();
    if v.contains(|c: char| c.is_ascii_digit()) {
        let (mut f, mut m) = (0, 0);
        for part in v.split('+') {
            let part = part.trim();
            let (num, kind) = part.split_at(part.len().checked_sub(1)?);
            let n: usize = num.trim().parse().ok()?;
            match kind {
                "F" | "f" => f += n,
                "M" | "m" => m += n,
                _ => return None,
            }
        }
        return Some(interleave(f, m));
    }
    v.chars()
        .filter(|c| !c.is_whitespace() && *c != ',')
        .map(|c| match c {
            'F' | 'f' => Some(BlockKind::Ffn),
            'M' | 'm' => Some(BlockKind::Mdm),
            _ => None,
        })
        .collect()
}

impl FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_text(s)
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}
