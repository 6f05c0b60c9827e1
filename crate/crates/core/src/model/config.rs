use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use crate::error::{Error, Result};

/// Architecture hyperparameters of the denoiser.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub patch: [usize; 3],
    pub extents: [usize; 3],
    pub channels: usize,
    /// Window edge in tokens for layers listed in `window_layers`.
    pub window: usize,
    pub window_layers: Vec<usize>,
    pub plane_layers: Vec<usize>,
    pub d_pe: usize,
    pub max_planes: usize,
    /// Append a 0/1 channel marking voxels covered by a slice.
    pub mask_channel: bool,
    /// Feed the slices scattered into a volume as extra input channels.
    pub concat_condition: bool,
    pub t_embed_dim: usize,
    /// Number of diffusion timesteps the time embedding accepts.
    pub timesteps: usize,
    pub shared_plane_weights: bool,
    pub encoder_layers: usize,
    pub encoder_patch: usize,
}

impl ModelConfig {
    fn table_entry(layers: usize, hidden: usize, heads: usize, starred: bool) -> Self {
        let (window_layers, plane_layers) = if starred {
            // pairs (3k+1, 3k+2) while both fit
            let pairs = (0..).map(|k| 3 * k + 1).take_while(|&w| w + 1 < layers);
            pairs.map(|w| (w, w + 1)).unzip()
        } else {
            (Vec::new(), Vec::new())
        };
        Self {
            layers,
            hidden,
            heads,
            patch: [4; 3],
            extents: [32; 3],
            channels: 3,
            window: 4,
            window_layers,
            plane_layers,
            d_pe: 64,
            max_planes: 4,
            mask_channel: true,
            concat_condition: true,
            t_embed_dim: 256,
            timesteps: 1000,
            shared_plane_weights: false,
            encoder_layers: 2,
            encoder_patch: 4,
        }
    }

    pub fn small() -> Self {
        Self::table_entry(8, 384, 6, false)
    }

    pub fn small_star() -> Self {
        Self::table_entry(8, 384, 6, true)
    }

    pub fn base() -> Self {
        Self::table_entry(10, 648, 8, false)
    }

    pub fn base_star() -> Self {
        Self::table_entry(10, 648, 8, true)
    }

    pub fn large() -> Self {
        Self::table_entry(12, 768, 12, false)
    }

    pub fn large_star() -> Self {
        Self::table_entry(12, 768, 12, true)
    }

    /// Desk-scale model for 16³ fields: 4 layers, width 128, patch 2.
    pub fn mini() -> Self {
        Self {
            layers: 4,
            hidden: 128,
            heads: 4,
            patch: [2; 3],
            extents: [16; 3],
            window_layers: alloc::vec![1],
            plane_layers: alloc::vec![2],
            d_pe: 16,
            max_planes: 2,
            t_embed_dim: 128,
            ..Self::small_star()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "small" => Self::small(),
            "small*" => Self::small_star(),
            "base" => Self::base(),
            "base*" => Self::base_star(),
            "large" => Self::large(),
            "large*" => Self::large_star(),
            "mini" => Self::mini(),
            other => return Err(Error::config(format!("unknown model preset `{other}`"))),
        })
    }

    pub fn token_grid(&self) -> [usize; 3] {
        [
            self.extents[0] / self.patch[0],
            self.extents[1] / self.patch[1],
            self.extents[2] / self.patch[2],
        ]
    }

    pub fn num_tokens(&self) -> usize {
        self.token_grid().iter().product()
    }

    pub fn patch_volume(&self) -> usize {
        self.patch.iter().product()
    }

    /// Channels entering the patch embedding.
    pub fn input_channels(&self) -> usize {
        let cond = if self.concat_condition { self.channels } else { 0 };
        self.channels + cond + usize::from(self.concat_condition && self.mask_channel)
    }

    pub fn layer_kind(&self, layer: usize) -> LayerKind {
        if self.window_layers.contains(&layer) {
            LayerKind::Window
        } else if self.plane_layers.contains(&layer) {
            LayerKind::Plane
        } else {
            LayerKind::Global
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.layers == 0 || self.hidden == 0 || self.channels == 0 {
            return fail("layers, hidden and channels must be positive".into());
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return fail(format!("hidden size {} is not divisible by {} heads", self.hidden, self.heads));
        }
        for a in 0..3 {
            if self.patch[a] == 0 || self.extents[a] % self.patch[a] != 0 {
                return fail(format!(
                    "extents {:?} are not divisible by patch {:?}",
                    self.extents, self.patch
                ));
            }
        }
        for &l in self.window_layers.iter().chain(&self.plane_layers) {
            if l >= self.layers {
                return fail(format!("attention layer index {l} is outside 0..{}", self.layers));
            }
        }
        if self.window_layers.iter().any(|l| self.plane_layers.contains(l)) {
            return fail("window and plane layer lists overlap".into());
        }
        if !self.window_layers.is_empty() {
            let grid = self.token_grid();
            if self.window == 0 || grid.iter().any(|e| e % self.window != 0) {
                return fail(format!("token grid {grid:?} is not divisible by window {}", self.window));
            }
        }
        if self.d_pe < 2 || self.d_pe % 2 != 0 {
            return fail(format!("d_pe must be even and at least 2, got {}", self.d_pe));
        }
        if self.t_embed_dim < 2 || self.t_embed_dim % 2 != 0 {
            return fail(format!("t_embed_dim must be even, got {}", self.t_embed_dim));
        }
        if self.timesteps == 0 {
            return fail("timesteps must be positive".into());
        }
        if self.encoder_patch == 0 || self.extents.iter().any(|e| e % self.encoder_patch != 0) {
            return fail(format!(
                "extents {:?} are not divisible by encoder patch {}",
                self.extents, self.encoder_patch
            ));
        }
        Ok(())
    }

    /// Number of scalar parameters of the model this config builds.
    pub fn parameter_count(&self) -> usize {
        let d = self.hidden;
        let lin = |i: usize, o: usize| i * o + o;
        let mlp = |i: usize, h: usize, o: usize| lin(i, h) + lin(h, o);
        let attn = 4 * lin(d, d);
        let ffn = lin(d, 4 * d) + lin(4 * d, d);
        let sublayer_mod = lin(d, 2 * d) + lin(d, d);

        let mut n = lin(self.input_channels() * self.patch_volume(), d);
        n += mlp(self.t_embed_dim, d, d);
        n += mlp(4 * self.d_pe * self.max_planes, d, d);
        n += mlp(self.max_planes * d, d, d);
        n += 2;
        let ep = self.encoder_patch;
        n += lin(ep * ep * self.channels, d) + d;
        n += self.encoder_layers * (attn + ffn);
        for l in 0..self.layers {
            let self_attn = match self.layer_kind(l) {
                LayerKind::Plane if !self.shared_plane_weights => 3 * attn,
                _ => attn,
            };
            n += self_attn + attn + ffn + 3 * sublayer_mod;
        }
        n + lin(d, 2 * d) + lin(d, self.patch_volume() * self.channels)
    }

    /// Canonical `key=value` text, one entry per line in a fixed order.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "layers={}", self.layers);
        let _ = writeln!(s, "hidden={}", self.hidden);
        let _ = writeln!(s, "heads={}", self.heads);
        let _ = writeln!(s, "patch={}", list(&self.patch));
        let _ = writeln!(s, "extents={}", list(&self.extents));
        let _ = writeln!(s, "channels={}", self.channels);
        let _ = writeln!(s, "window={}", self.window);
        let _ = writeln!(s, "window_layers={}", list(&self.window_layers));
        let _ = writeln!(s, "plane_layers={}", list(&self.plane_layers));
        let _ = writeln!(s, "d_pe={}", self.d_pe);
        let _ = writeln!(s, "max_planes={}", self.max_planes);
        let _ = writeln!(s, "mask_channel={}", self.mask_channel);
        let _ = writeln!(s, "concat_condition={}", self.concat_condition);
        let _ = writeln!(s, "t_embed_dim={}", self.t_embed_dim);
        let _ = writeln!(s, "timesteps={}", self.timesteps);
        let _ = writeln!(s, "shared_plane_weights={}", self.shared_plane_weights);
        let _ = writeln!(s, "encoder_layers={}", self.encoder_layers);
        let _ = writeln!(s, "encoder_patch={}", self.encoder_patch);
        s
    }

    /// Parses [`to_text`](Self::to_text) output. Keys missing from `text`
    /// keep the value from `base`; unknown keys are rejected.
    pub fn from_text_with(text: &str, base: Self) -> Result<Self> {
        let mut cfg = base;
        for (key, value) in parse_pairs(text)? {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_text_with(text, Self::small())
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "layers" => self.layers = parse_num(key, value)?,
            "hidden" => self.hidden = parse_num(key, value)?,
            "heads" => self.heads = parse_num(key, value)?,
            "patch" => self.patch = parse_triple(key, value)?,
            "extents" => self.extents = parse_triple(key, value)?,
            "channels" => self.channels = parse_num(key, value)?,
            "window" => self.window = parse_num(key, value)?,
            "window_layers" => self.window_layers = parse_list(key, value)?,
            "plane_layers" => self.plane_layers = parse_list(key, value)?,
            "d_pe" => self.d_pe = parse_num(key, value)?,
            "max_planes" => self.max_planes = parse_num(key, value)?,
            "mask_channel" => self.mask_channel = parse_bool(key, value)?,
            "concat_condition" => self.concat_condition = parse_bool(key, value)?,
            "t_embed_dim" => self.t_embed_dim = parse_num(key, value)?,
            "timesteps" => self.timesteps = parse_num(key, value)?,
            "shared_plane_weights" => self.shared_plane_weights = parse_bool(key, value)?,
            "encoder_layers" => self.encoder_layers = parse_num(key, value)?,
            "encoder_patch" => self.encoder_patch = parse_num(key, value)?,
            other => return Err(Error::Parse(format!("unknown model key `{other}`"))),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Global,
    Window,
    Plane,
}

/// Splits `key=value` lines, skipping blanks and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(&str, &str)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
        out.push((k.trim(), v.trim()));
    }
    Ok(out)
}

pub fn parse_num<T: core::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Parse(format!("{key}: cannot parse `{value}`")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Parse(format!("{key}: expected a boolean, got `{value}`"))),
    }
}

pub fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn parse_triple(key: &str, value: &str) -> Result<[usize; 3]> {
    let v = parse_list(key, value)?;
    match v.as_slice() {
        [a] => Ok([*a; 3]),
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(Error::Parse(format!("{key}: expected 1 or 3 values, got `{value}`"))),
    }
}
