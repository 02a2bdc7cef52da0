//! Mapper configuration as a flat `key = value` file.

use std::fmt::Write as _;
use std::path::Path;

use crate::dsa::{DsaMode, DsaSettings, KfFiltering};
use crate::error::{Error, Result};
use crate::raster::DepthMode;

/// Every tunable of a mapping run.
#[derive(Clone, Debug, PartialEq)]
pub struct MapperConfig {
    /// Thresholds, ablation modes, seeding and optimizer settings.
    pub dsa: DsaSettings,
    /// Keyframe trigger distance in meters.
    pub theta_translation: f64,
    /// Keyframe trigger angle in degrees.
    pub theta_rotation_deg: f64,
    /// Optimization steps after each new keyframe.
    pub mapping_iterations: usize,
    pub final_refinement: bool,
    pub refinement_iterations: usize,
    /// Gaussians below this opacity are pruned after each adaptation step.
    pub prune_opacity: f64,
    /// Learning-rate scale for means; derived from the first frame if unset.
    pub scene_extent: Option<f64>,
    /// Keyframes between checkpoint renders (0 disables them).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            dsa: DsaSettings::default(),
            theta_translation: 0.3,
            theta_rotation_deg: 20.0,
            mapping_iterations: 60,
            final_refinement: true,
            refinement_iterations: 2000,
            prune_opacity: 0.05,
            scene_extent: None,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_switch(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on/off, got {v:?}"))),
    }
}

fn switch(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn mode_name(m: DsaMode) -> &'static str {
    match m {
        DsaMode::Off => "off",
        DsaMode::Add => "add",
        DsaMode::Remove => "remove",
        DsaMode::Full => "full",
    }
}

fn filtering_name(f: KfFiltering) -> &'static str {
    match f {
        KfFiltering::None => "none",
        KfFiltering::Full => "full",
        KfFiltering::Partial => "partial",
    }
}

impl MapperConfig {
    /// Sets one field by key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let d = &mut self.dsa;
        match key.trim() {
            "eps_opacity" => d.thresholds.eps_opacity = parse(key, v)?,
            "eps_depth" => d.thresholds.eps_depth = parse(key, v)?,
            "eps_color" => d.thresholds.eps_color = parse(key, v)?,
            "eps_seed" => d.thresholds.eps_seed = parse(key, v)?,
            "tau" => d.thresholds.tau = parse(key, v)?,
            "mask_cover" => d.thresholds.mask_cover = parse(key, v)?,
            "weight_ratio_gamma" => d.thresholds.weight_ratio_gamma = parse(key, v)?,
            "dsa" => d.mode = v.parse()?,
            "kf_filtering" => d.kf_filtering = v.parse()?,
            "seed_stride" => d.seed_stride = parse(key, v)?,
            "seed_iterations" => d.seed_iterations = parse(key, v)?,
            "post_remove_iterations" => d.post_remove_iterations = parse(key, v)?,
            "refill_after_remove" => d.refill_after_remove = parse_switch(key, v)?,
            "covis_stride" => d.covisibility.stride = parse(key, v)?,
            "covis_tolerance" => d.covisibility.tolerance = parse(key, v)?,
            "covis_min_fraction" => d.covisibility.min_fraction = parse(key, v)?,
            "window_size" => d.window_size = parse(key, v)?,
            "lr_mean" => d.optim.lr_mean = parse(key, v)?,
            "lr_rot" => d.optim.lr_rot = parse(key, v)?,
            "lr_log_scale" => d.optim.lr_log_scale = parse(key, v)?,
            "lr_opacity" => d.optim.lr_opacity = parse(key, v)?,
            "lr_color" => d.optim.lr_color = parse(key, v)?,
            "lambda" => d.optim.lambda = parse(key, v)?,
            "w_iso" => d.optim.w_iso = parse(key, v)?,
            "beta1" => d.optim.beta1 = parse(key, v)?,
            "beta2" => d.optim.beta2 = parse(key, v)?,
            "adam_eps" => d.optim.epsilon = parse(key, v)?,
            "depth_normalization" => {
                d.render.depth_mode = match v {
                    "normalized" => DepthMode::Normalized,
                    "raw" => DepthMode::Raw,
                    _ => return Err(Error::Config(format!("{key}: expected normalized/raw, got {v:?}"))),
                }
            }
            "background" => {
                let parts: Vec<f64> = v.split(',').map(|p| parse(key, p.trim())).collect::<Result<_>>()?;
                let [r, g, b] = parts[..] else {
                    return Err(Error::Config(format!("{key}: expected r,g,b")));
                };
                d.render.background = [r, g, b];
            }
            "theta_translation" => self.theta_translation = parse(key, v)?,
            "theta_rotation" => self.theta_rotation_deg = parse(key, v)?,
            "mapping_iterations" => self.mapping_iterations = parse(key, v)?,
            "final_refinement" => self.final_refinement = parse_switch(key, v)?,
            "refinement_iterations" => self.refinement_iterations = parse(key, v)?,
            "prune_opacity" => self.prune_opacity = parse(key, v)?,
            "scene_extent" => {
                self.scene_extent = if v == "auto" { None } else { Some(parse(key, v)?) };
            }
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k, v)?;
        }
        self.validate()
    }

    /// Parses a config file body over the defaults. `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            c.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.dsa.thresholds.validate()?;
        self.dsa.optim.validate()?;
        let d = &self.dsa;
        if d.seed_stride == 0 || d.covisibility.stride == 0 {
            return Err(Error::Config("strides must be at least 1".into()));
        }
        if d.window_size == 0 {
            return Err(Error::Config("window_size must be at least 1".into()));
        }
        if !(d.covisibility.tolerance > 0.0) || !(0.0..=1.0).contains(&d.covisibility.min_fraction) {
            return Err(Error::Config("covisibility tolerance > 0 and fraction in [0, 1] required".into()));
        }
        if d.render.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config("background must lie in [0, 1]".into()));
        }
        if !(self.theta_translation >= 0.0) || !(0.0..=180.0).contains(&self.theta_rotation_deg) {
            return Err(Error::Config("theta_translation >= 0 and theta_rotation in [0, 180] required".into()));
        }
        if !(0.0..1.0).contains(&self.prune_opacity) {
            return Err(Error::Config("prune_opacity must lie in [0, 1)".into()));
        }
        if self.scene_extent.is_some_and(|e| !(e > 0.0)) {
            return Err(Error::Config("scene_extent must be positive".into()));
        }
        Ok(())
    }

    /// Serializes every key; [`MapperConfig::parse_text`] reads it back.
    pub fn to_text(&self) -> String {
        let d = &self.dsa;
        let t = &d.thresholds;
        let o = &d.optim;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("dsa", mode_name(d.mode).into());
        kv("kf_filtering", filtering_name(d.kf_filtering).into());
        kv("final_refinement", switch(self.final_refinement).into());
        kv("eps_opacity", t.eps_opacity.to_string());
        kv("eps_depth", t.eps_depth.to_string());
        kv("eps_color", t.eps_color.to_string());
        kv("eps_seed", t.eps_seed.to_string());
        kv("tau", t.tau.to_string());
        kv("mask_cover", t.mask_cover.to_string());
        kv("weight_ratio_gamma", t.weight_ratio_gamma.to_string());
        kv("seed_stride", d.seed_stride.to_string());
        kv("seed_iterations", d.seed_iterations.to_string());
        kv("post_remove_iterations", d.post_remove_iterations.to_string());
        kv("refill_after_remove", switch(d.refill_after_remove).into());
        kv("covis_stride", d.covisibility.stride.to_string());
        kv("covis_tolerance", d.covisibility.tolerance.to_string());
        kv("covis_min_fraction", d.covisibility.min_fraction.to_string());
        kv("window_size", d.window_size.to_string());
        kv("lr_mean", o.lr_mean.to_string());
        kv("lr_rot", o.lr_rot.to_string());
        kv("lr_log_scale", o.lr_log_scale.to_string());
        kv("lr_opacity", o.lr_opacity.to_string());
        kv("lr_color", o.lr_color.to_string());
        kv("lambda", o.lambda.to_string());
        kv("w_iso", o.w_iso.to_string());
        kv("beta1", o.beta1.to_string());
        kv("beta2", o.beta2.to_string());
        kv("adam_eps", o.epsilon.to_string());
        kv(
            "depth_normalization",
            match d.render.depth_mode {
                DepthMode::Normalized => "normalized".into(),
                DepthMode::Raw => "raw".into(),
            },
        );
        let b = d.render.background;
        kv("background", format!("{},{},{}", b[0], b[1], b[2]));
        kv("theta_translation", self.theta_translation.to_string());
        kv("theta_rotation", self.theta_rotation_deg.to_string());
        kv("mapping_iterations", self.mapping_iterations.to_string());
        kv("refinement_iterations", self.refinement_iterations.to_string());
        kv("prune_opacity", self.prune_opacity.to_string());
        kv(
            "scene_extent",
            self.scene_extent.map_or_else(|| "auto".into(), |e| e.to_string()),
        );
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("seed", self.seed.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = MapperConfig::default();
        c.validate().unwrap();
        assert_eq!(MapperConfig::parse_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn every_written_key_is_addressable() {
        let mut c = MapperConfig::default();
        c.set("dsa", "remove").unwrap();
        c.set("kf_filtering", "full").unwrap();
        c.set("eps_depth", "0.12").unwrap();
        c.set("depth_normalization", "raw").unwrap();
        c.set("background", "0.1, 0.2, 0.3").unwrap();
        c.set("scene_extent", "2.5").unwrap();
        c.set("final_refinement", "off").unwrap();
        let back = MapperConfig::parse_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        for line in c.to_text().lines() {
            let (k, v) = line.split_once('=').unwrap();
            MapperConfig::default().set(k, v).unwrap();
        }
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(MapperConfig::parse_text("lambda = 2").is_err());
        assert!(MapperConfig::parse_text("eps_opacity = 1.0").is_err());
        assert!(MapperConfig::parse_text("nonsense = 1").is_err());
        assert!(MapperConfig::parse_text("dsa = sideways").is_err());
        assert!(MapperConfig::parse_text("window_size").is_err());
        let mut c = MapperConfig::default();
        assert!(c.apply_overrides(&["lr_color=-1"]).is_err());
        assert!(c.apply_overrides(&["lr_color"]).is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = MapperConfig::parse_text("# header\n\ntau = 8 # inline\n").unwrap();
        assert_eq!(c.dsa.thresholds.tau, 8.0);
    }
}
